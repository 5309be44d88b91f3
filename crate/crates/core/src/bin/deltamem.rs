use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use deltamem::checkpoint::{load_model, load_state, save_backbone, save_model, save_state};
use deltamem::config::RunConfig;
use deltamem::eval::{self, Condition, EvalReport};
use deltamem::experiment::{obtain_backbone, run_experiment, train_memory};
use deltamem::model::DeltaMem;
use deltamem::pretrain::pretrain_backbone;
use deltamem::tasks::{gen_recall, read_jsonl, write_jsonl};
use deltamem::training::{count_trainable_params, TrainingExample};
use deltamem::{Error, Result};

#[derive(Parser)]
#[command(name = "deltamem", version, about = "Delta-rule memory for frozen attention backbones")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run config file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Instance {
    /// Dataset file (JSONL) to take the instance from.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Record index within `--data`.
    #[arg(long, default_value_t = 0)]
    index: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Language-model pretraining of the backbone.
    PretrainBackbone {
        #[command(flatten)]
        common: Common,
    },
    /// Train the memory of one seed on a frozen backbone.
    Train {
        #[command(flatten)]
        common: Common,
        /// Backbone checkpoint; overrides `backbone_checkpoint`.
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Training set (JSONL); generated from the seed when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a trained model under the three context conditions.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation set (JSONL); the seed's held-out split when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Restrict to one condition.
        #[arg(long)]
        condition: Option<Condition>,
    },
    /// Train and evaluate one memory per configured seed, then average.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Write a context into a fresh memory state and save it.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        state: PathBuf,
        #[command(flatten)]
        instance: Instance,
        /// Comma-separated context tokens, one segment each unless
        /// `--segments` is given.
        #[arg(long, value_delimiter = ',')]
        context: Option<Vec<u32>>,
        #[arg(long, value_delimiter = ',')]
        segments: Option<Vec<u32>>,
    },
    /// Answer a query from a saved memory state.
    Query {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        state: Option<PathBuf>,
        #[command(flatten)]
        instance: Instance,
        #[arg(long, value_delimiter = ',')]
        query: Option<Vec<u32>>,
        /// Answer length in tokens.
        #[arg(long, default_value_t = 1)]
        len: usize,
        /// `state-only` needs `--state`; `with-context` needs `--data`.
        #[arg(long, default_value = "state-only")]
        condition: Condition,
    },
    /// Print the closed-form trainable parameter count.
    Params {
        #[command(flatten)]
        common: Common,
    },
    /// Generate the recall dataset for a seed.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    std::fs::create_dir_all(&cfg.out)?;
    Ok(cfg)
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn instance(i: &Instance) -> Result<Option<TrainingExample>> {
    let Some(path) = &i.data else { return Ok(None) };
    let data = read_jsonl(path)?;
    let n = data.len();
    data.into_iter()
        .nth(i.index)
        .map(Some)
        .ok_or(Error::Index { index: i.index, extent: n })
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::PretrainBackbone { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.pretrain.seed = s;
            }
            let csv = cfg.out.join("pretrain_metrics.csv");
            let (b, log) = pretrain_backbone(cfg.backbone.clone(), &cfg.task, &cfg.pretrain, Some(&csv))?;
            let path = cfg.out.join("backbone.dmem");
            save_backbone(&b, &path)?;
            let last = log.last().map_or(f64::NAN, |m| m.loss);
            write_json(
                &cfg.out.join("pretrain.json"),
                &json!({ "checkpoint": path, "checksum": b.checksum(), "final_loss": last, "config_hash": cfg.hash() }),
            )?;
            println!("{}", path.display());
        }
        Cmd::Train { common, backbone, data } => {
            let mut cfg = load_config(&common)?;
            if let Some(b) = backbone {
                cfg.backbone_checkpoint = Some(std::path::absolute(b)?);
            }
            let b = obtain_backbone(&cfg)?;
            let examples = match data {
                Some(p) => read_jsonl(&p)?,
                None => gen_recall(cfg.seed, &cfg.task, cfg.backbone.vocab_size)?.train,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut model = DeltaMem::new(b, cfg.memory(), &mut rng)?;
            let before = model.backbone.checksum();
            let log = train_memory(&cfg, &mut model, cfg.seed, &examples, Some(&cfg.out))?;
            let path = cfg.out.join("model.dmem");
            save_model(&model, &path)?;
            write_json(
                &cfg.out.join("train.json"),
                &json!({
                    "checkpoint": path,
                    "steps": log.len(),
                    "final_loss": log.last().map_or(f64::NAN, |m| m.loss),
                    "backbone_checksum_before": before,
                    "backbone_checksum_after": model.backbone.checksum(),
                    "config_hash": cfg.hash(),
                }),
            )?;
            println!("{}", path.display());
        }
        Cmd::Eval {
            common,
            checkpoint,
            data,
            condition,
        } => {
            let cfg = load_config(&common)?;
            let model = load_model::<f32>(&checkpoint)?;
            let examples = match data {
                Some(p) => read_jsonl(&p)?,
                None => gen_recall(cfg.seed, &cfg.task, model.backbone.config.vocab_size)?.test,
            };
            let alphabet = cfg.task.value_alphabet();
            let report = match condition {
                Some(c) => EvalReport {
                    version: 1,
                    config_hash: cfg.hash(),
                    seeds: vec![cfg.seed],
                    conditions: vec![eval::eval_condition(&model, &examples, c, &alphabet)?],
                },
                None => eval::eval_context_recovery(&model, &examples, &alphabet, vec![cfg.seed], cfg.hash())?,
            };
            report.write_json(&cfg.out.join("report.json"))?;
            report.write_csv(&cfg.out.join("report.csv"))?;
            print_report(&report);
        }
        Cmd::Experiment { common, backbone } => {
            let mut cfg = load_config(&common)?;
            if let Some(b) = backbone {
                cfg.backbone_checkpoint = Some(std::path::absolute(b)?);
            }
            let b = obtain_backbone(&cfg)?;
            let (runs, avg) = run_experiment(&cfg, &b, Some(&cfg.out))?;
            for r in &runs {
                r.report.write_json(&cfg.out.join(format!("report_seed{}.json", r.seed)))?;
            }
            avg.write_json(&cfg.out.join("report.json"))?;
            avg.write_csv(&cfg.out.join("report.csv"))?;
            print_report(&avg);
        }
        Cmd::Ingest {
            common,
            checkpoint,
            state,
            instance: inst,
            context,
            segments,
        } => {
            let _cfg = load_config(&common)?;
            let model = load_model::<f32>(&checkpoint)?;
            let (ctx, seg) = match (instance(&inst)?, context) {
                (Some(ex), None) => (ex.context, ex.segments),
                (None, Some(c)) => {
                    let seg = segments.unwrap_or_else(|| (0..c.len() as u32).collect());
                    (c, seg)
                }
                _ => return Err(Error::Config("give exactly one of --data or --context".into())),
            };
            let mut s = model.zero_state();
            model.ingest(&ctx, Some(&seg), &mut s)?;
            save_state(&s, &state)?;
            println!("{}", state.display());
        }
        Cmd::Query {
            common,
            checkpoint,
            state,
            instance: inst,
            query,
            len,
            condition,
        } => {
            let cfg = load_config(&common)?;
            let model = load_model::<f32>(&checkpoint)?;
            let ex = instance(&inst)?;
            let q = match (&ex, query) {
                (_, Some(q)) => q,
                (Some(ex), None) => ex.query.clone(),
                (None, None) => return Err(Error::Config("give --query or --data".into())),
            };
            let (prompt, s) = match condition {
                Condition::StateOnly => {
                    let path = state.ok_or_else(|| Error::Config("state-only queries need --state".into()))?;
                    (q, load_state(&path)?)
                }
                Condition::WithContext => {
                    let ex = ex.ok_or_else(|| Error::Config("with-context queries need --data".into()))?;
                    let mut p = ex.context;
                    p.extend_from_slice(&q);
                    (p, model.zero_state())
                }
                Condition::None => (q, model.zero_state()),
            };
            let answer = eval::generate(&model, &prompt, &s, len, &cfg.task.value_alphabet())?;
            write_json(
                &cfg.out.join("answer.json"),
                &json!({ "condition": condition, "prompt": prompt, "answer": answer }),
            )?;
            println!("{}", answer.iter().map(u32::to_string).collect::<Vec<_>>().join(","));
        }
        Cmd::Params { common } => {
            let cfg = load_config(&common)?;
            let hooked = cfg.layers.resolve(cfg.backbone.n_layers)?.len();
            let n = count_trainable_params(cfg.backbone.d_model, hooked, &cfg.memory())?;
            write_json(
                &cfg.out.join("params.json"),
                &json!({ "trainable_params": n, "hooked_layers": hooked, "config_hash": cfg.hash() }),
            )?;
            println!("{n}");
        }
        Cmd::GenData { common } => {
            let cfg = load_config(&common)?;
            let d = gen_recall(cfg.seed, &cfg.task, cfg.backbone.vocab_size)?;
            write_jsonl(&cfg.out.join("train.jsonl"), &d.train)?;
            write_jsonl(&cfg.out.join("test.jsonl"), &d.test)?;
            println!("{} train, {} test", d.train.len(), d.test.len());
        }
    }
    Ok(())
}

fn print_report(r: &EvalReport) {
    println!("condition,exact_match,f1,answer_logprob,n");
    for c in &r.conditions {
        println!("{},{:.4},{:.4},{:.4},{}", c.condition, c.exact_match, c.f1, c.answer_logprob, c.n);
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
