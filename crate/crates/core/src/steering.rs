//! Low-rank corrections that turn a memory readout into attention steering.
//!
//! `q~ = q0 + (alpha/r) W_q r_t`, `y~ = a + (alpha/r) W_o r_t`, and likewise
//! for keys and values when those branches are enabled. `r` is the per
//! sub-state rank even when the readout is `N * r` wide.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor, Var};
use crate::params::Binder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Query,
    Key,
    Value,
    Output,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::Query, Branch::Key, Branch::Value, Branch::Output];

    pub fn letter(self) -> char {
        match self {
            Branch::Query => 'q',
            Branch::Key => 'k',
            Branch::Value => 'v',
            Branch::Output => 'o',
        }
    }
}

/// Subset of `{q, k, v, o}`, written as letters in `qkvo` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct BranchSet {
    pub q: bool,
    pub k: bool,
    pub v: bool,
    pub o: bool,
}

impl BranchSet {
    /// Every configuration of the branch ablation grid.
    pub const GRID: [&'static str; 11] = [
        "q", "k", "v", "o", "qk", "qv", "qo", "kv", "qko", "qkv", "qkvo",
    ];

    pub fn qo() -> Self {
        Self {
            q: true,
            o: true,
            ..Self::default()
        }
    }

    pub fn contains(&self, b: Branch) -> bool {
        match b {
            Branch::Query => self.q,
            Branch::Key => self.k,
            Branch::Value => self.v,
            Branch::Output => self.o,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Branch> + '_ {
        Branch::ALL.into_iter().filter(|b| self.contains(*b))
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FromStr for BranchSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = BranchSet::default();
        if s == "none" {
            return Ok(set);
        }
        for c in s.chars() {
            let slot = match c {
                'q' => &mut set.q,
                'k' => &mut set.k,
                'v' => &mut set.v,
                'o' => &mut set.o,
                _ => return Err(Error::Config(format!("unknown branch `{c}` in `{s}`"))),
            };
            if *slot {
                return Err(Error::Config(format!("branch `{c}` repeated in `{s}`")));
            }
            *slot = true;
        }
        Ok(set)
    }
}

impl fmt::Display for BranchSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        self.iter().try_for_each(|b| write!(f, "{}", b.letter()))
    }
}

impl Serialize for BranchSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BranchSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which backbone layers carry a memory.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub enum LayerSet {
    #[default]
    All,
    Front(usize),
    Middle(usize),
    Back(usize),
    List(Vec<usize>),
}

impl LayerSet {
    /// Sorted, deduplicated layer indices for a backbone of `n_layers`.
    pub fn resolve(&self, n_layers: usize) -> Result<Vec<usize>> {
        let take = |k: usize| -> Result<usize> {
            if k == 0 || k > n_layers {
                Err(Error::Config(format!("layer count {k} outside 1..={n_layers}")))
            } else {
                Ok(k)
            }
        };
        let layers: Vec<usize> = match self {
            LayerSet::All => (0..n_layers).collect(),
            LayerSet::Front(k) => (0..take(*k)?).collect(),
            LayerSet::Back(k) => (n_layers - take(*k)?..n_layers).collect(),
            LayerSet::Middle(k) => {
                let k = take(*k)?;
                let start = (n_layers - k) / 2;
                (start..start + k).collect()
            }
            LayerSet::List(list) => {
                let mut l = list.clone();
                l.sort_unstable();
                l.dedup();
                if l.is_empty() {
                    return Err(Error::Config("empty layer list".into()));
                }
                if let Some(&bad) = l.iter().find(|&&x| x >= n_layers) {
                    return Err(Error::Index {
                        index: bad,
                        extent: n_layers,
                    });
                }
                l
            }
        };
        Ok(layers)
    }

    /// Front, middle and back thirds of the stack plus all layers.
    pub fn thirds(n_layers: usize) -> Vec<LayerSet> {
        let k = n_layers.div_ceil(3).max(1);
        vec![
            LayerSet::Front(k),
            LayerSet::Middle(k),
            LayerSet::Back(k),
            LayerSet::All,
        ]
    }
}

impl FromStr for LayerSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "all" {
            return Ok(LayerSet::All);
        }
        let count = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad layer count in `{s}`")))
        };
        if let Some((kind, k)) = s.split_once(':') {
            return match kind {
                "front" => Ok(LayerSet::Front(count(k)?)),
                "middle" => Ok(LayerSet::Middle(count(k)?)),
                "back" => Ok(LayerSet::Back(count(k)?)),
                _ => Err(Error::Config(format!("unknown layer set `{s}`"))),
            };
        }
        let list = s
            .trim_start_matches('[')
            .trim_end_matches(']')
            .split(',')
            .map(|p| count(p.trim()))
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerSet::List(list))
    }
}

impl fmt::Display for LayerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSet::All => f.write_str("all"),
            LayerSet::Front(k) => write!(f, "front:{k}"),
            LayerSet::Middle(k) => write!(f, "middle:{k}"),
            LayerSet::Back(k) => write!(f, "back:{k}"),
            LayerSet::List(l) => {
                let parts: Vec<String> = l.iter().map(|x| x.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl Serialize for LayerSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            List(Vec<usize>),
        }
        match Raw::deserialize(d)? {
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Raw::List(l) => Ok(LayerSet::List(l)),
        }
    }
}

/// Steering maps of one hooked layer, `[d x N*r]` each. Disabled branches
/// have no map at all.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringParams<T = f32> {
    pub wq: Option<Tensor<T>>,
    pub wk: Option<Tensor<T>>,
    pub wv: Option<Tensor<T>>,
    pub wo: Option<Tensor<T>>,
    pub scale: T,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SteeringVars {
    pub wq: Option<Var>,
    pub wk: Option<Var>,
    pub wv: Option<Var>,
    pub wo: Option<Var>,
}

impl SteeringVars {
    pub fn get(&self, b: Branch) -> Option<Var> {
        match b {
            Branch::Query => self.wq,
            Branch::Key => self.wk,
            Branch::Value => self.wv,
            Branch::Output => self.wo,
        }
    }
}

/// Per-branch correction vectors; `None` for disabled branches.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corrections<T> {
    pub q: Option<Vec<T>>,
    pub k: Option<Vec<T>>,
    pub v: Option<Vec<T>>,
    pub o: Option<Vec<T>>,
}

impl<T: Scalar> SteeringParams<T> {
    /// Zero maps for every enabled branch, so the model starts as the backbone.
    pub fn zeros(branches: BranchSet, d_model: usize, read_width: usize, alpha: f64, rank: usize) -> Self {
        let map = |on: bool| on.then(|| Tensor::zeros(vec![d_model, read_width]).with_grad(true));
        Self {
            wq: map(branches.q),
            wk: map(branches.k),
            wv: map(branches.v),
            wo: map(branches.o),
            scale: T::of(alpha / rank as f64),
        }
    }

    pub fn get(&self, b: Branch) -> Option<&Tensor<T>> {
        match b {
            Branch::Query => self.wq.as_ref(),
            Branch::Key => self.wk.as_ref(),
            Branch::Value => self.wv.as_ref(),
            Branch::Output => self.wo.as_ref(),
        }
    }

    pub fn branches(&self) -> BranchSet {
        BranchSet {
            q: self.wq.is_some(),
            k: self.wk.is_some(),
            v: self.wv.is_some(),
            o: self.wo.is_some(),
        }
    }

    pub fn fields(&self) -> Vec<(&'static str, &Tensor<T>)> {
        [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)]
            .into_iter()
            .filter_map(|(n, t)| t.as_ref().map(|t| (n, t)))
            .collect()
    }

    pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
        ]
        .into_iter()
        .filter_map(|(n, t)| t.as_mut().map(|t| (n, t)))
        .collect()
    }

    pub fn cast<U: Scalar>(&self) -> SteeringParams<U> {
        let c = |t: &Option<Tensor<T>>| t.as_ref().map(|t| t.cast::<U>().with_grad(t.requires_grad));
        SteeringParams {
            wq: c(&self.wq),
            wk: c(&self.wk),
            wv: c(&self.wv),
            wo: c(&self.wo),
            scale: U::of(self.scale.as_f64()),
        }
    }

    pub fn bind(&self, b: &mut Binder<'_, T>) -> SteeringVars {
        SteeringVars {
            wq: self.wq.as_ref().map(|t| b.bind(t)),
            wk: self.wk.as_ref().map(|t| b.bind(t)),
            wv: self.wv.as_ref().map(|t| b.bind(t)),
            wo: self.wo.as_ref().map(|t| b.bind(t)),
        }
    }

    /// `W^Delta r` for every enabled branch.
    pub fn corrections(&self, read: &[T]) -> Result<Corrections<T>> {
        let map = |w: &Option<Tensor<T>>| -> Result<Option<Vec<T>>> {
            let Some(w) = w else { return Ok(None) };
            let (d, n) = (w.shape()[0], w.shape()[1]);
            if read.len() != n {
                return Err(Error::shape(
                    "corrections",
                    format!("readout width {} but maps expect {n}", read.len()),
                ));
            }
            Ok(Some(
                (0..d)
                    .map(|i| crate::numerics::dot(&w.data()[i * n..(i + 1) * n], read))
                    .collect(),
            ))
        };
        Ok(Corrections {
            q: map(&self.wq)?,
            k: map(&self.wk)?,
            v: map(&self.wv)?,
            o: map(&self.wo)?,
        })
    }

    /// `base + (alpha/r) delta`, the shared form of every branch.
    pub fn apply(&self, base: &[T], delta: &[T]) -> Result<Vec<T>> {
        if base.len() != delta.len() {
            return Err(Error::shape(
                "steering apply",
                format!("{} vs {}", base.len(), delta.len()),
            ));
        }
        Ok(base.iter().zip(delta).map(|(&b, &d)| b + self.scale * d).collect())
    }

    pub fn apply_query(&self, q0: &[T], dq: &[T]) -> Result<Vec<T>> {
        self.apply(q0, dq)
    }

    pub fn apply_output(&self, a: &[T], d_o: &[T]) -> Result<Vec<T>> {
        self.apply(a, d_o)
    }

    /// Key or value correction at one position; errors if the branch is off.
    pub fn apply_kv(&self, branch: Branch, base: &[T], delta: &[T]) -> Result<Vec<T>> {
        if !matches!(branch, Branch::Key | Branch::Value) || self.get(branch).is_none() {
            return Err(Error::BranchDisabled(branch.letter()));
        }
        self.apply(base, delta)
    }
}
