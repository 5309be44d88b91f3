//! Run configuration file (TOML).
//!
//! Top-level keys mirror the memory and training knobs; `msw.n_states`,
//! `backbone.*`, `pretrain.*`, `task.*` and `eval.*` are dotted groups.
//! Every key is optional and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::model::MemoryConfig;
use crate::pretrain::PretrainConfig;
use crate::steering::{BranchSet, LayerSet};
use crate::tasks::RecallSpec;
use crate::training::TrainConfig;
use crate::write_policy::{Strategy, DEFAULT_MSW_STATES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MswConfig {
    pub n_states: usize,
}

impl Default for MswConfig {
    fn default() -> Self {
        Self {
            n_states: DEFAULT_MSW_STATES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// One memory training run per seed; reports are averaged.
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2] }
    }
}

/// A warm-up phase of memory training on easier recall contexts with
/// `n_pairs` pairs, run before the main training on the task itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumStage {
    pub n_pairs: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Pretrained backbone checkpoint; relative paths resolve against the
    /// config file's directory.
    pub backbone_checkpoint: Option<PathBuf>,
    /// Directory of the loaded config file.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,

    pub rank: usize,
    pub alpha: f64,
    pub branches: BranchSet,
    pub layers: LayerSet,
    pub strategy: Strategy,
    pub msw: MswConfig,
    pub backbone_len: usize,
    pub write_budget: usize,
    pub truncate_context: bool,

    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub detach_ingest: bool,
    /// Stages run in order, each with a fresh optimizer and schedule.
    pub curriculum: Vec<CurriculumStage>,

    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub task: RecallSpec,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = MemoryConfig::default();
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            out: PathBuf::from("out"),
            backbone_checkpoint: None,
            base_dir: None,
            rank: m.rank,
            alpha: m.alpha,
            branches: m.branches,
            layers: m.layers,
            strategy: m.strategy,
            msw: MswConfig::default(),
            backbone_len: m.backbone_len,
            write_budget: m.write_budget,
            truncate_context: m.truncate_context,
            learning_rate: t.learning_rate,
            warmup_ratio: t.warmup_ratio,
            steps: t.steps,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            detach_ingest: t.detach_ingest,
            curriculum: Vec::new(),
            backbone: BackboneConfig::default(),
            pretrain: PretrainConfig::default(),
            task: RecallSpec::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&std::fs::read_to_string(path)?)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    /// `backbone_checkpoint` resolved against the config file's directory.
    pub fn backbone_path(&self) -> Option<PathBuf> {
        let p = self.backbone_checkpoint.as_ref()?;
        Some(match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.clone(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.memory().validate(self.backbone.max_seq_len)?;
        self.train().validate()?;
        self.task.validate(self.backbone.vocab_size)?;
        for st in &self.curriculum {
            if st.steps == 0 {
                return Err(Error::Config("curriculum stage with zero steps".into()));
            }
            self.stage_spec(st).validate(self.backbone.vocab_size)?;
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval.seeds is empty".into()));
        }
        Ok(())
    }

    /// Task spec of a curriculum stage: the configured task with its pair
    /// count replaced and no test split.
    pub fn stage_spec(&self, stage: &CurriculumStage) -> RecallSpec {
        RecallSpec {
            n_pairs: stage.n_pairs,
            min_pairs: None,
            n_test: 0,
            ..self.task.clone()
        }
    }

    pub fn memory(&self) -> MemoryConfig {
        MemoryConfig {
            rank: self.rank,
            alpha: self.alpha,
            branches: self.branches,
            layers: self.layers.clone(),
            strategy: self.strategy,
            n_states: if self.strategy == Strategy::Msw { self.msw.n_states } else { 1 },
            backbone_len: self.backbone_len,
            write_budget: self.write_budget,
            truncate_context: self.truncate_context,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            warmup_ratio: self.warmup_ratio,
            steps: self.steps,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            seed: self.seed,
            detach_ingest: self.detach_ingest,
        }
    }

    /// SHA-256 over the canonical JSON form, ignoring `out`. Checkpoint paths
    /// enter as written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
