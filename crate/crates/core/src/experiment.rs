//! Seeded train-then-evaluate runs of the recall experiment.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::checkpoint::load_backbone;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{eval_context_recovery, EvalReport};
use crate::model::DeltaMem;
use crate::pretrain::pretrain_backbone;
use crate::tasks::gen_recall;
use crate::training::{train, StepMetrics, TrainConfig, TrainingExample};

pub struct SeedRun {
    pub seed: u64,
    pub model: DeltaMem<f32>,
    pub metrics: Vec<StepMetrics>,
    pub report: EvalReport,
}

/// The configured backbone checkpoint, or a freshly pretrained one.
pub fn obtain_backbone(cfg: &RunConfig) -> Result<Backbone<f32>> {
    match cfg.backbone_path() {
        Some(p) => {
            let b = load_backbone(&p)?;
            if b.config != cfg.backbone {
                return Err(Error::Config(format!(
                    "checkpoint {} holds {:?}, config asks for {:?}",
                    p.display(),
                    b.config,
                    cfg.backbone
                )));
            }
            Ok(b)
        }
        None => Ok(pretrain_backbone(cfg.backbone.clone(), &cfg.task, &cfg.pretrain, None)?.0),
    }
}

/// Data seed of curriculum stage `i` under run seed `seed`.
pub fn stage_seed(seed: u64, i: usize) -> u64 {
    seed ^ ((i as u64 + 1) << 32)
}

/// Runs the configured curriculum stages and then trains on `data`.
/// Metrics of all phases are returned in order; with `out` set, each phase
/// writes `metrics_seed{seed}[_stage{i}].csv` there.
pub fn train_memory(
    cfg: &RunConfig,
    model: &mut DeltaMem<f32>,
    seed: u64,
    data: &[TrainingExample],
    out: Option<&Path>,
) -> Result<Vec<StepMetrics>> {
    let mut metrics = Vec::new();
    for (i, stage) in cfg.curriculum.iter().enumerate() {
        let warm = gen_recall(stage_seed(seed, i), &cfg.stage_spec(stage), cfg.backbone.vocab_size)?;
        let tc = TrainConfig {
            seed,
            steps: stage.steps,
            ..cfg.train()
        };
        let csv = out.map(|d| d.join(format!("metrics_seed{seed}_stage{i}.csv")));
        metrics.extend(train(model, &warm.train, &tc, csv.as_deref(), out)?);
    }
    let tc = TrainConfig { seed, ..cfg.train() };
    let csv = out.map(|d| d.join(format!("metrics_seed{seed}.csv")));
    metrics.extend(train(model, data, &tc, csv.as_deref(), out)?);
    Ok(metrics)
}

/// Generates data for `seed`, trains a fresh memory on it and evaluates the
/// held-out split. Metrics CSV and divergence dumps go under `out` if given.
pub fn run_seed(cfg: &RunConfig, backbone: &Backbone<f32>, seed: u64, out: Option<&Path>) -> Result<SeedRun> {
    let data = gen_recall(seed, &cfg.task, cfg.backbone.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = DeltaMem::new(backbone.clone(), cfg.memory(), &mut rng)?;
    let metrics = train_memory(cfg, &mut model, seed, &data.train, out)?;
    let report = eval_context_recovery(&model, &data.test, &cfg.task.value_alphabet(), vec![seed], cfg.hash())?;
    Ok(SeedRun {
        seed,
        model,
        metrics,
        report,
    })
}

/// One run per `eval.seeds` entry and the seed-averaged report.
pub fn run_experiment(cfg: &RunConfig, backbone: &Backbone<f32>, out: Option<&Path>) -> Result<(Vec<SeedRun>, EvalReport)> {
    let runs = cfg
        .eval
        .seeds
        .iter()
        .map(|&s| run_seed(cfg, backbone, s, out))
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<EvalReport> = runs.iter().map(|r| r.report.clone()).collect();
    let avg = EvalReport::average(&reports)?;
    Ok((runs, avg))
}
