//! Language-model pretraining of the backbone on recall sequences, before it
//! is frozen for memory training.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, NoHooks};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape};
use crate::params::{Binder, Parameters};
use crate::tasks::{gen_recall, RecallSpec, QRY};
use crate::training::{AdamW, StepMetrics, TrainConfig, TrainingExample};
use crate::write_policy::segments;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Total optimizer steps, `repeat_steps` of them first.
    pub steps: usize,
    /// Leading steps on repeated random token runs, which train the copy
    /// circuit recall relies on before any recall data is seen.
    pub repeat_steps: usize,
    /// Position ids advance by 1 to `max_position_gap` per token from a
    /// random start, so recall cannot lean on exact position arithmetic.
    /// 1 keeps positions contiguous.
    pub max_position_gap: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Pair counts are drawn from `min_pairs..=max_pairs`.
    pub min_pairs: usize,
    pub max_pairs: usize,
    pub n_sequences: usize,
    /// Probes per context, the first being the instance's own query.
    pub queries: usize,
    /// Score only probe answers instead of every next token.
    pub answers_only: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            repeat_steps: 3000,
            max_position_gap: 3,
            batch_size: 16,
            learning_rate: 3e-3,
            warmup_ratio: 0.05,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 42,
            min_pairs: 1,
            max_pairs: 8,
            n_sequences: 50_000,
            queries: 8,
            answers_only: true,
        }
    }
}

/// Strictly increasing position ids for `len` inputs: a random start within
/// the first 64 and steps of 1 to `max_gap`. Falls back to `0..len` when
/// the draw would not fit `max_seq_len`.
pub fn position_ids(len: usize, max_seq_len: usize, max_gap: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut ids = Vec::with_capacity(len);
    let mut p = 0;
    for _ in 0..len {
        ids.push(p);
        p += rng.random_range(1..=max_gap.max(1));
    }
    match ids.last() {
        Some(&last) if last < max_seq_len => {
            let start = rng.random_range(0..=(max_seq_len - 1 - last).min(64));
            ids.iter_mut().for_each(|x| *x += start);
            ids
        }
        Some(_) => (0..len).collect(),
        None => ids,
    }
}

/// A random run of 6 to 19 tokens from `lo..hi`, then the same run again;
/// every next token of the repeat is scored. Runs shrink to fit `max_len`
/// inputs.
pub fn repeat_sequence(lo: u32, hi: u32, max_len: usize, rng: &mut impl Rng) -> (Vec<u32>, Vec<Option<usize>>) {
    let top = ((max_len + 1) / 2).clamp(1, 19);
    let n = rng.random_range(top.min(6)..=top);
    let half: Vec<u32> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    let mut s = half.clone();
    s.extend_from_slice(&half);
    let targets = (0..2 * n - 1).map(|i| (i >= n).then(|| s[i + 1] as usize)).collect();
    (s, targets)
}

/// `context ++ query ++ response` followed by `extra` more probes of pairs
/// drawn with replacement, so earlier answers never rule out later ones.
/// Returns the stream and, per position, the next-token target (answers
/// only, or every token).
pub fn lm_sequence(ex: &TrainingExample, extra: usize, answers_only: bool, rng: &mut impl Rng) -> (Vec<u32>, Vec<Option<usize>>) {
    let all: Vec<(u32, u32)> = segments(&ex.segments)
        .into_iter()
        .filter(|r| r.len() == 2)
        .map(|r| (ex.context[r.start], ex.context[r.start + 1]))
        .collect();
    let pairs: Vec<(u32, u32)> = if all.is_empty() {
        Vec::new()
    } else {
        (0..extra).map(|_| all[rng.random_range(0..all.len())]).collect()
    };
    let mut s = ex.context.clone();
    let mut answer_at = Vec::new();
    s.extend_from_slice(&ex.query);
    answer_at.push(s.len());
    s.extend_from_slice(&ex.response);
    for (k, v) in pairs {
        s.extend_from_slice(&[QRY, k]);
        answer_at.push(s.len());
        s.push(v);
    }
    let mut targets: Vec<Option<usize>> = if answers_only {
        vec![None; s.len() - 1]
    } else {
        s[1..].iter().map(|&t| Some(t as usize)).collect()
    };
    for a in answer_at {
        targets[a - 1] = Some(s[a] as usize);
    }
    (s, targets)
}

/// Summed next-token loss of `tokens[..len-1]` against `targets` and gradients
/// for every backbone tensor, in `Parameters::visit` order.
pub fn lm_gradients<T: Scalar>(b: &Backbone<T>, tokens: &[u32], targets: &[Option<usize>]) -> Result<(T, Vec<Vec<T>>)> {
    let positions: Vec<usize> = (0..tokens.len().saturating_sub(1)).collect();
    lm_gradients_at(b, tokens, &positions, targets)
}

/// `lm_gradients` with explicit position ids for the input tokens.
pub fn lm_gradients_at<T: Scalar>(
    b: &Backbone<T>,
    tokens: &[u32],
    positions: &[usize],
    targets: &[Option<usize>],
) -> Result<(T, Vec<Vec<T>>)> {
    if tokens.len() < 2 || targets.len() + 1 != tokens.len() {
        return Err(Error::Task("language-model sequences need two tokens and one target per input".into()));
    }
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape);
    let vars = b.bind(&mut binder);
    let leaves = binder.finish();
    let input = &tokens[..tokens.len() - 1];
    let out = b.forward_hidden_at(&mut tape, &vars, input, positions, &mut NoHooks, true)?;
    let loss = tape.cross_entropy(out.logits.expect("requested"), targets)?;
    let mut grads = tape.backward(loss)?;
    let mut sizes = Vec::new();
    b.visit(&mut |_, t| sizes.push(t.numel()));
    let g = leaves
        .iter()
        .zip(sizes)
        .map(|(&v, n)| grads.take(v).unwrap_or_else(|| vec![T::zero(); n]))
        .collect();
    Ok((tape.scalar(loss), g))
}

/// Trains a fresh backbone and returns it frozen along with per-step metrics
/// (loss is per scored token).
pub fn pretrain_backbone(
    config: BackboneConfig,
    spec: &RecallSpec,
    cfg: &PretrainConfig,
    metrics_csv: Option<&Path>,
) -> Result<(Backbone<f32>, Vec<StepMetrics>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = config.vocab_size;
    let mut b = Backbone::<f32>::init(config, &mut rng)?;
    b.set_trainable(true);
    let data_spec = RecallSpec {
        n_pairs: cfg.max_pairs,
        min_pairs: Some(cfg.min_pairs),
        n_train: cfg.n_sequences,
        n_test: 0,
        ..spec.clone()
    };
    let extra = cfg.queries.saturating_sub(1);
    let data: Vec<(Vec<u32>, Vec<Option<usize>>)> = gen_recall(cfg.seed ^ 0x5eed, &data_spec, vocab)?
        .train
        .iter()
        .map(|ex| lm_sequence(ex, extra, cfg.answers_only, &mut rng))
        .collect();
    if let Some((s, _)) = data.iter().find(|(s, _)| s.len() > b.config.max_seq_len + 1) {
        return Err(Error::TooLong {
            len: s.len() - 1,
            max: b.config.max_seq_len,
        });
    }
    let schedule = TrainConfig {
        learning_rate: cfg.learning_rate,
        warmup_ratio: cfg.warmup_ratio,
        steps: cfg.steps,
        ..TrainConfig::default()
    };
    let mut writer = match metrics_csv {
        Some(p) => Some(csv::Writer::from_path(p)?),
        None => None,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut acc: Option<Vec<Vec<f64>>> = None;
        let mut loss = 0.0;
        let mut count = 0usize;
        for _ in 0..cfg.batch_size {
            let repeat;
            let (seq, targets) = if step < cfg.repeat_steps {
                repeat = repeat_sequence(data_spec.key_base(), data_spec.value_base() + data_spec.n_values as u32, b.config.max_seq_len, &mut rng);
                (&repeat.0, &repeat.1)
            } else {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                cursor += 1;
                let (s, t) = &data[order[cursor - 1]];
                (s, t)
            };
            let positions = position_ids(seq.len() - 1, b.config.max_seq_len, cfg.max_position_gap, &mut rng);
            let (l, g) = lm_gradients_at(&b, seq, &positions, targets)?;
            loss += l as f64;
            count += targets.iter().flatten().count();
            match &mut acc {
                None => acc = Some(g.iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect()),
                Some(a) => a
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, v)| a.iter_mut().zip(v).for_each(|(a, &x)| *a += x as f64)),
            }
        }
        let n = count as f64;
        let mut grads = acc.expect("batch_size >= 1");
        grads.iter_mut().flatten().for_each(|g| *g /= n);
        let grad_norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Diverged { step, dump: None });
        }
        if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
            let s = cfg.grad_clip / grad_norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
        let lr = schedule.lr_at(step);
        let grads: Vec<Vec<f32>> = grads.into_iter().map(|g| g.into_iter().map(|x| x as f32).collect()).collect();
        opt.step(&mut b, &grads, lr);
        let m = StepMetrics {
            step,
            loss: loss / n,
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
    b.set_trainable(false);
    Ok((b, log))
}
