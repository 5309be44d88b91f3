//! Supervised fine-tuning of the memory parameters.
//!
//! The context is written into fresh states and never replayed; the backbone
//! then sees only the query and the response, and the loss is the summed
//! cross-entropy of the response tokens. Only memory parameters move.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_model;
use crate::error::{Error, Result};
use crate::model::{DeltaMem, MemoryConfig, ModelVars};
use crate::numerics::{Scalar, Tape, Var};
use crate::params::{count_where, Parameters};

/// One `(context, query, response)` triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub context: Vec<u32>,
    /// Segment id per context token.
    pub segments: Vec<u32>,
    pub query: Vec<u32>,
    pub response: Vec<u32>,
}

impl TrainingExample {
    /// Backbone input of the prediction pass: the query and all but the last
    /// response token.
    pub fn prompt_tokens(&self) -> Vec<u32> {
        let mut t = self.query.clone();
        t.extend_from_slice(&self.response[..self.response.len().saturating_sub(1)]);
        t
    }

    /// Next-token targets over `prompt_tokens`; `None` outside the response.
    pub fn targets(&self) -> Vec<Option<usize>> {
        let n = self.query.len() + self.response.len() - 1;
        (0..n)
            .map(|p| {
                p.checked_sub(self.query.len() - 1)
                    .map(|j| self.response[j] as usize)
            })
            .collect()
    }

    /// True exactly on response positions of `query ++ response`.
    pub fn loss_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.query.len()];
        m.extend(std::iter::repeat_n(true, self.response.len()));
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.response.is_empty() {
            return Err(Error::EmptyResponse);
        }
        if self.query.is_empty() {
            return Err(Error::Task("query must hold at least one token".into()));
        }
        if self.segments.len() != self.context.len() {
            return Err(Error::Task(format!(
                "{} segment ids for {} context tokens",
                self.segments.len(),
                self.context.len()
            )));
        }
        Ok(())
    }
}

/// Records ingest and prediction on `tape`; returns the summed response loss.
pub fn sft_loss_tape<T: Scalar>(
    model: &DeltaMem<T>,
    tape: &mut Tape<T>,
    vars: &ModelVars,
    ex: &TrainingExample,
    detach_ingest: bool,
) -> Result<Var> {
    ex.validate()?;
    let zero = model.zero_state();
    let mut states = model.state_vars(tape, &zero)?;
    if !ex.context.is_empty() {
        model.ingest_tape(tape, vars, &ex.context, Some(&ex.segments), &mut states)?;
    }
    if detach_ingest {
        for layer in states.iter_mut() {
            for s in layer.iter_mut() {
                let t = tape.tensor(*s);
                *s = tape.leaf(&t.with_grad(false));
            }
        }
    }
    let (logits, _) = model.forward_window(tape, vars, &ex.prompt_tokens(), None, &mut states, true)?;
    tape.cross_entropy(logits.expect("requested"), &ex.targets())
}

pub fn sft_loss<T: Scalar>(model: &DeltaMem<T>, ex: &TrainingExample) -> Result<T> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let loss = sft_loss_tape(model, &mut tape, &vars, ex, false)?;
    Ok(tape.scalar(loss))
}

/// Loss and gradients of every trainable tensor, in `Parameters::visit` order.
pub fn sft_gradients<T: Scalar>(model: &DeltaMem<T>, ex: &TrainingExample, detach_ingest: bool) -> Result<(T, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let loss = sft_loss_tape(model, &mut tape, &vars, ex, detach_ingest)?;
    let mut grads = tape.backward(loss)?;
    let mut sizes = Vec::new();
    model.visit(&mut |_, t| sizes.push(t.numel()));
    let out = vars
        .trainable
        .iter()
        .zip(sizes)
        .map(|(&v, n)| grads.take(v).unwrap_or_else(|| vec![T::zero(); n]))
        .collect();
    Ok((tape.scalar(loss), out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub detach_ingest: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            warmup_ratio: 0.1,
            steps: 1000,
            batch_size: 8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 42,
            detach_ingest: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config("weight_decay and grad_clip must be >= 0".into()));
        }
        Ok(())
    }

    /// Linear warmup over `ceil(warmup_ratio * steps)` steps, then cosine decay to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = (self.warmup_ratio * self.steps as f64).ceil() as usize;
        if step < warm {
            return self.learning_rate * (step + 1) as f64 / warm as f64;
        }
        let span = self.steps.saturating_sub(warm).max(1) as f64;
        let progress = ((step - warm) as f64 / span).min(1.0);
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with decoupled weight decay. Tensors named `*.b` or `*.wbeta` are
/// never decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn decays(name: &str) -> bool {
        !(name.ends_with(".b") || name.ends_with(".wbeta") || name.contains("bias") || name.contains("gain"))
    }

    /// Applies one update with learning rate `lr` to every tensor visited by
    /// `params`, in the order the gradients were produced.
    pub fn step<T: Scalar>(&mut self, params: &mut dyn Parameters<T>, grads: &[Vec<T>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        let mut idx = 0;
        let wd = self.weight_decay;
        let eps = self.eps;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |name, t| {
            let g = &grads[idx];
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            let decay = if Self::decays(name) { wd } else { 0.0 };
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let gj = g[j].as_f64();
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                let x = w.as_f64();
                *w = T::of(x - lr * (update + decay * x));
            }
            idx += 1;
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Trains the memory parameters of `model` on `data`. Examples are visited in
/// a seeded shuffled order, reshuffled every epoch. Metrics go to
/// `metrics_csv` when given; a non-finite loss writes the current model to
/// `dump_dir` and aborts.
pub fn train<T: Scalar>(
    model: &mut DeltaMem<T>,
    data: &[TrainingExample],
    cfg: &TrainConfig,
    metrics_csv: Option<&Path>,
    dump_dir: Option<&Path>,
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Task("empty training set".into()));
    }
    let mut writer = match metrics_csv {
        Some(p) => Some(csv::Writer::from_path(p)?),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut total: Option<Vec<Vec<f64>>> = None;
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &data[order[cursor]];
            cursor += 1;
            let (l, g) = match sft_gradients(model, ex, cfg.detach_ingest) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => return Err(diverged(model, step, dump_dir)),
                Err(e) => return Err(e),
            };
            loss += l.as_f64();
            match &mut total {
                None => total = Some(g.iter().map(|v| v.iter().map(|x| x.as_f64()).collect()).collect()),
                Some(acc) => acc
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, v)| a.iter_mut().zip(v).for_each(|(a, x)| *a += x.as_f64())),
            }
        }
        let n = cfg.batch_size as f64;
        loss /= n;
        if !loss.is_finite() {
            return Err(diverged(model, step, dump_dir));
        }
        let mut grads = total.expect("batch_size >= 1");
        grads.iter_mut().flatten().for_each(|g| *g /= n);
        let grad_norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
            let s = cfg.grad_clip / grad_norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
        let lr = cfg.lr_at(step);
        let grads: Vec<Vec<T>> = grads.into_iter().map(|g| g.into_iter().map(T::of).collect()).collect();
        opt.step(model, &grads, lr);
        let m = StepMetrics {
            step,
            loss,
            lr,
            grad_norm,
        };
        if let Some(w) = writer.as_mut() {
            w.serialize(m)?;
        }
        log.push(m);
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    Ok(log)
}

fn diverged<T: Scalar>(model: &DeltaMem<T>, step: usize, dump_dir: Option<&Path>) -> Error {
    let dump = dump_dir.and_then(|d| {
        let path: PathBuf = d.join(format!("diverged_step{step}.dmem"));
        save_model(model, &path).ok().map(|_| path)
    });
    if let Some(d) = dump_dir {
        if let Ok(mut f) = std::fs::File::create(d.join("diverged.txt")) {
            let _ = writeln!(f, "non-finite loss at step {step}");
        }
    }
    Error::Diverged { step, dump }
}

/// Closed-form trainable parameter count:
/// `layers * N * (3dr + dr + r) + layers * branches * d * N * r`.
pub fn count_trainable_params(d_model: usize, n_hooked_layers: usize, memory: &MemoryConfig) -> Result<usize> {
    let n = memory.states_per_layer()?;
    let (d, r) = (d_model, memory.rank);
    let writes = n * (3 * d * r + d * r + r);
    let steering = memory.branches.len() * d * (n * r);
    Ok(n_hooked_layers * (writes + steering))
}

/// Counts gradient-enabled values by walking every tensor of the model.
pub fn enumerate_trainable<T: Scalar>(model: &DeltaMem<T>) -> usize {
    count_where(model, |_, t| t.requires_grad) + count_where(&model.backbone, |_, t| t.requires_grad)
}
