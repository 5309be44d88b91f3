//! Synthetic associative recall.
//!
//! Token layout: `0` pad, `1` query marker, then filler, key and value
//! alphabets. A context lists `K` (key, value) pairs, each its own segment;
//! the query is `[QRY, key]` and the answer the bound value.
//!
//! Sampling is fixed so an independent generator can reproduce it:
//! `ChaCha8Rng::seed_from_u64(seed)`, `below(n) = (next_u64 * n) >> 64`, and
//! distinct draws by a partial Fisher-Yates shuffle.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::TrainingExample;

pub const PAD: u32 = 0;
pub const QRY: u32 = 1;
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecallSpec {
    /// Pairs per context; with `min_pairs < n_pairs` each instance draws its
    /// own count uniformly from `min_pairs..=n_pairs`.
    pub n_pairs: usize,
    pub min_pairs: Option<usize>,
    pub n_fillers: usize,
    pub n_keys: usize,
    pub n_values: usize,
    /// Probability of a filler token before each pair.
    pub distractor_rate: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for RecallSpec {
    fn default() -> Self {
        Self {
            n_pairs: 8,
            min_pairs: None,
            n_fillers: 6,
            n_keys: 32,
            n_values: 16,
            distractor_rate: 0.0,
            n_train: 4096,
            n_test: 256,
        }
    }
}

impl RecallSpec {
    pub fn filler_base(&self) -> u32 {
        2
    }

    pub fn key_base(&self) -> u32 {
        self.filler_base() + self.n_fillers as u32
    }

    pub fn value_base(&self) -> u32 {
        self.key_base() + self.n_keys as u32
    }

    pub fn vocab_needed(&self) -> usize {
        self.value_base() as usize + self.n_values
    }

    pub fn value_alphabet(&self) -> Vec<u32> {
        (0..self.n_values as u32).map(|v| self.value_base() + v).collect()
    }

    pub fn min_pairs(&self) -> usize {
        self.min_pairs.unwrap_or(self.n_pairs)
    }

    /// Longest context an instance can produce when no fillers appear.
    pub fn context_len(&self) -> usize {
        2 * self.n_pairs
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.n_pairs == 0 || self.min_pairs() == 0 || self.min_pairs() > self.n_pairs {
            return Err(Error::Task("pair counts must satisfy 1 <= min_pairs <= n_pairs".into()));
        }
        if self.n_pairs > self.n_keys || self.n_pairs > self.n_values {
            return Err(Error::Task(format!(
                "{} pairs need that many distinct keys and values ({} keys, {} values)",
                self.n_pairs, self.n_keys, self.n_values
            )));
        }
        if self.vocab_needed() > vocab_size {
            return Err(Error::Task(format!(
                "layout needs {} token ids, vocabulary has {vocab_size}",
                self.vocab_needed()
            )));
        }
        if !(0.0..1.0).contains(&self.distractor_rate) {
            return Err(Error::Task("distractor_rate must lie in [0, 1)".into()));
        }
        if self.distractor_rate > 0.0 && self.n_fillers == 0 {
            return Err(Error::Task("distractors need at least one filler token".into()));
        }
        Ok(())
    }
}

/// The fixed sampling primitives shared with the reference generator.
pub struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `0..n` by widening multiply.
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.rng.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// `k` distinct values of `0..n` via a partial Fisher-Yates shuffle.
    pub fn distinct(&mut self, n: usize, k: usize) -> Vec<u32> {
        let mut pool: Vec<u32> = (0..n as u32).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// One recall instance as a training triple.
pub fn sample_instance(s: &mut Sampler, spec: &RecallSpec) -> TrainingExample {
    let k = if spec.min_pairs() < spec.n_pairs {
        spec.min_pairs() + s.below((spec.n_pairs - spec.min_pairs() + 1) as u64) as usize
    } else {
        spec.n_pairs
    };
    let keys: Vec<u32> = s.distinct(spec.n_keys, k).into_iter().map(|x| x + spec.key_base()).collect();
    let values: Vec<u32> = s
        .distinct(spec.n_values, k)
        .into_iter()
        .map(|x| x + spec.value_base())
        .collect();
    let threshold = (spec.distractor_rate * 1e6) as u64;
    let mut context = Vec::with_capacity(2 * k);
    let mut segments = Vec::with_capacity(2 * k);
    let mut seg = 0u32;
    for i in 0..k {
        if threshold > 0 {
            while s.below(1_000_000) < threshold {
                context.push(spec.filler_base() + s.below(spec.n_fillers as u64) as u32);
                segments.push(seg);
                seg += 1;
            }
        }
        context.extend([keys[i], values[i]]);
        segments.extend([seg, seg]);
        seg += 1;
    }
    let probe = s.below(k as u64) as usize;
    TrainingExample {
        context,
        segments,
        query: vec![QRY, keys[probe]],
        response: vec![values[probe]],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallDataset {
    pub train: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
}

/// Train instances first, then test instances from the same stream; a test
/// context that repeats a train context is redrawn.
pub fn gen_recall(seed: u64, spec: &RecallSpec, vocab_size: usize) -> Result<RecallDataset> {
    spec.validate(vocab_size)?;
    let mut s = Sampler::new(seed);
    let train: Vec<TrainingExample> = (0..spec.n_train).map(|_| sample_instance(&mut s, spec)).collect();
    let seen: HashSet<&[u32]> = train.iter().map(|e| e.context.as_slice()).collect();
    let mut test = Vec::with_capacity(spec.n_test);
    let mut redraws = 0usize;
    while test.len() < spec.n_test {
        let ex = sample_instance(&mut s, spec);
        if seen.contains(ex.context.as_slice()) {
            redraws += 1;
            if redraws > 1000 * (spec.n_test + 1) {
                return Err(Error::Task("cannot draw test contexts disjoint from training".into()));
            }
            continue;
        }
        test.push(ex);
    }
    Ok(RecallDataset { train, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Record {
    version: u32,
    context: Vec<u32>,
    segments: Vec<u32>,
    query: Vec<u32>,
    answer: Vec<u32>,
}

pub fn write_jsonl(path: &Path, data: &[TrainingExample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in data {
        let r = Record {
            version: DATASET_VERSION,
            context: ex.context.clone(),
            segments: ex.segments.clone(),
            query: ex.query.clone(),
            answer: ex.response.clone(),
        };
        serde_json::to_writer(&mut f, &r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TrainingExample>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line)?;
        if r.version != DATASET_VERSION {
            return Err(Error::Task(format!("line {}: unsupported dataset version {}", i + 1, r.version)));
        }
        let ex = TrainingExample {
            context: r.context,
            segments: r.segments,
            query: r.query,
            response: r.answer,
        };
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}
