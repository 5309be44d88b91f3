//! Context-recovery evaluation.
//!
//! Each instance runs under three conditions: the context in the prompt with
//! a fresh memory, the context ingested into the memory with only the query
//! in the prompt, and neither. Decoding is greedy over the answer alphabet,
//! ties going to the lowest token id.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DeltaMem;
use crate::numerics::Scalar;
use crate::osam::MemoryState;
use crate::training::TrainingExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    WithContext,
    StateOnly,
    None,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::WithContext, Condition::StateOnly, Condition::None];
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with-context" => Ok(Condition::WithContext),
            "state-only" => Ok(Condition::StateOnly),
            "none" => Ok(Condition::None),
            _ => Err(Error::Config(format!("unknown condition `{s}`"))),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::WithContext => "with-context",
            Condition::StateOnly => "state-only",
            Condition::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: Condition,
    pub exact_match: f64,
    pub f1: f64,
    /// Mean log-probability of the reference answer under teacher forcing,
    /// over the full vocabulary.
    pub answer_logprob: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub conditions: Vec<ConditionReport>,
}

impl EvalReport {
    pub fn get(&self, c: Condition) -> Option<&ConditionReport> {
        self.conditions.iter().find(|r| r.condition == c)
    }

    pub fn em(&self, c: Condition) -> f64 {
        self.get(c).map_or(f64::NAN, |r| r.exact_match)
    }

    /// Per-condition means of several reports.
    pub fn average(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports.first().ok_or_else(|| Error::Task("no reports to average".into()))?;
        let n = reports.len() as f64;
        let conditions = first
            .conditions
            .iter()
            .map(|c| {
                let all: Vec<&ConditionReport> = reports.iter().filter_map(|r| r.get(c.condition)).collect();
                ConditionReport {
                    condition: c.condition,
                    exact_match: all.iter().map(|r| r.exact_match).sum::<f64>() / n,
                    f1: all.iter().map(|r| r.f1).sum::<f64>() / n,
                    answer_logprob: all.iter().map(|r| r.answer_logprob).sum::<f64>() / n,
                    n: all.iter().map(|r| r.n).sum(),
                }
            })
            .collect();
        Ok(EvalReport {
            version: first.version,
            config_hash: first.config_hash.clone(),
            seeds: reports.iter().flat_map(|r| r.seeds.clone()).collect(),
            conditions,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["condition", "exact_match", "f1", "answer_logprob", "n"])?;
        for c in &self.conditions {
            w.write_record([
                c.condition.to_string(),
                c.exact_match.to_string(),
                c.f1.to_string(),
                c.answer_logprob.to_string(),
                c.n.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Token-level F1 over multisets.
pub fn token_f1(pred: &[u32], gold: &[u32]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for &g in gold {
        *counts.entry(g).or_default() += 1;
    }
    let mut overlap = 0usize;
    for &p in pred {
        if let Some(c) = counts.get_mut(&p) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Index of the largest entry among `allowed`; ties go to the first.
pub fn constrained_argmax<T: Scalar>(row: &[T], allowed: &[u32]) -> u32 {
    let mut best = allowed[0];
    for &a in &allowed[1..] {
        if row[a as usize] > row[best as usize] {
            best = a;
        }
    }
    best
}

/// Prompt and starting state for one condition.
pub fn setup<T: Scalar>(model: &DeltaMem<T>, ex: &TrainingExample, c: Condition) -> Result<(Vec<u32>, MemoryState<T>)> {
    let mut state = model.zero_state();
    let prompt = match c {
        Condition::WithContext => {
            let mut p = ex.context.clone();
            p.extend_from_slice(&ex.query);
            p
        }
        Condition::StateOnly => {
            model.ingest(&ex.context, Some(&ex.segments), &mut state)?;
            ex.query.clone()
        }
        Condition::None => ex.query.clone(),
    };
    Ok((prompt, state))
}

/// Greedy answer of `len` tokens from `prompt` and `state`.
pub fn generate<T: Scalar>(model: &DeltaMem<T>, prompt: &[u32], state: &MemoryState<T>, len: usize, alphabet: &[u32]) -> Result<Vec<u32>> {
    let vocab = model.backbone.config.vocab_size;
    let mut tokens = prompt.to_vec();
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let logits = model.logits(&tokens, state)?;
        let last = &logits.data()[(tokens.len() - 1) * vocab..tokens.len() * vocab];
        let next = constrained_argmax(last, alphabet);
        out.push(next);
        tokens.push(next);
    }
    Ok(out)
}

/// Teacher-forced log-probability of the reference answer.
pub fn answer_logprob<T: Scalar>(model: &DeltaMem<T>, prompt: &[u32], state: &MemoryState<T>, answer: &[u32]) -> Result<f64> {
    let vocab = model.backbone.config.vocab_size;
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(&answer[..answer.len() - 1]);
    let logits = model.logits(&tokens, state)?;
    let mut total = 0.0;
    for (j, &a) in answer.iter().enumerate() {
        let p = prompt.len() - 1 + j;
        let row: Vec<f64> = logits.data()[p * vocab..(p + 1) * vocab].iter().map(|x| x.as_f64()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += row[a as usize] - lse;
    }
    Ok(total)
}

pub fn eval_condition<T: Scalar>(model: &DeltaMem<T>, data: &[TrainingExample], c: Condition, alphabet: &[u32]) -> Result<ConditionReport> {
    if alphabet.is_empty() {
        return Err(Error::Task("empty answer alphabet".into()));
    }
    let (mut em, mut f1, mut lp) = (0usize, 0.0, 0.0);
    for ex in data {
        ex.validate()?;
        let (prompt, state) = setup(model, ex, c)?;
        let pred = generate(model, &prompt, &state, ex.response.len(), alphabet)?;
        em += usize::from(pred == ex.response);
        f1 += token_f1(&pred, &ex.response);
        lp += answer_logprob(model, &prompt, &state, &ex.response)?;
    }
    let n = data.len().max(1) as f64;
    Ok(ConditionReport {
        condition: c,
        exact_match: em as f64 / n,
        f1: f1 / n,
        answer_logprob: lp / n,
        n: data.len(),
    })
}

/// All three conditions on `data`.
pub fn eval_context_recovery<T: Scalar>(
    model: &DeltaMem<T>,
    data: &[TrainingExample],
    alphabet: &[u32],
    seeds: Vec<u64>,
    config_hash: String,
) -> Result<EvalReport> {
    let conditions = Condition::ALL
        .iter()
        .map(|&c| eval_condition(model, data, c, alphabet))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        version: 1,
        config_hash,
        seeds,
        conditions,
    })
}
