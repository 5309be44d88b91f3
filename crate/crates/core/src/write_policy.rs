//! Write granularities over the shared gated delta write.
//!
//! Token writes update after every position. Segment writes update once per
//! segment from the mean hidden state, and tokens inside a segment read the
//! state left by the previous segment. Multi-state writes keep `N`
//! independent sub-states, each written at every token.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::osam::OnlineState;
use crate::projections::MemoryProjections;

pub const DEFAULT_MSW_STATES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Tsw,
    Ssw,
    Msw,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsw" => Ok(Strategy::Tsw),
            "ssw" => Ok(Strategy::Ssw),
            "msw" => Ok(Strategy::Msw),
            _ => Err(Error::Config(format!("unknown write strategy `{s}`"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Tsw => "tsw",
            Strategy::Ssw => "ssw",
            Strategy::Msw => "msw",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WritePolicy {
    pub strategy: Strategy,
    n_states: usize,
}

impl Default for WritePolicy {
    fn default() -> Self {
        Self::tsw()
    }
}

impl WritePolicy {
    pub fn tsw() -> Self {
        Self {
            strategy: Strategy::Tsw,
            n_states: 1,
        }
    }

    pub fn ssw() -> Self {
        Self {
            strategy: Strategy::Ssw,
            n_states: 1,
        }
    }

    pub fn msw(n_states: usize) -> Result<Self> {
        if n_states == 0 {
            return Err(Error::Config("msw needs at least one sub-state".into()));
        }
        Ok(Self {
            strategy: Strategy::Msw,
            n_states,
        })
    }

    pub fn new(strategy: Strategy, msw_states: usize) -> Result<Self> {
        match strategy {
            Strategy::Tsw => Ok(Self::tsw()),
            Strategy::Ssw => Ok(Self::ssw()),
            Strategy::Msw => Self::msw(msw_states),
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
}

/// Splits positions into maximal runs of equal segment id.
pub fn segments(ids: &[u32]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for t in 1..=ids.len() {
        if t == ids.len() || ids[t] != ids[start] {
            out.push(start..t);
            start = t;
        }
    }
    out
}

/// The write groups of a window: every group is read with the state left by
/// earlier groups and then written once from the mean of its hidden states.
pub fn write_groups(policy: WritePolicy, len: usize, segment_ids: Option<&[u32]>) -> Result<Vec<std::ops::Range<usize>>> {
    match policy.strategy {
        Strategy::Tsw | Strategy::Msw => Ok((0..len).map(|t| t..t + 1).collect()),
        Strategy::Ssw => match segment_ids {
            Some(ids) if ids.len() == len => Ok(segments(ids)),
            Some(ids) => Err(Error::shape(
                "segments",
                format!("{} segment ids for {len} tokens", ids.len()),
            )),
            None if len == 0 => Ok(Vec::new()),
            None => Ok(vec![0..len]),
        },
    }
}

/// One token write: a single delta write per sub-state from `x`.
pub fn tsw_step<T: Scalar>(state: &mut OnlineState<T>, x: &[T], projections: &[MemoryProjections<T>]) -> Result<()> {
    msw_step(state, x, projections)
}

/// Mean of the hidden states of one segment.
pub fn ssw_segment_mean<T: Scalar>(hiddens: &[&[T]], segment: usize) -> Result<Vec<T>> {
    let first = hiddens.first().ok_or(Error::EmptySegment(segment))?;
    let mut out = vec![T::zero(); first.len()];
    for h in hiddens {
        if h.len() != out.len() {
            return Err(Error::shape("segment mean", format!("{} vs {}", h.len(), out.len())));
        }
        for (o, &v) in out.iter_mut().zip(*h) {
            *o = *o + v;
        }
    }
    let n = T::of(hiddens.len() as f64);
    out.iter_mut().for_each(|o| *o = *o / n);
    Ok(out)
}

/// Every sub-state written with its own projections on the same `x`.
pub fn msw_step<T: Scalar>(state: &mut OnlineState<T>, x: &[T], projections: &[MemoryProjections<T>]) -> Result<()> {
    if projections.len() != state.n_states() {
        return Err(Error::StateCount {
            expected: state.n_states(),
            got: projections.len(),
        });
    }
    for (i, p) in projections.iter().enumerate() {
        let (_, k) = p.project_qk(x)?;
        let v = p.project_v(x)?;
        let (beta, _) = p.gates(x)?;
        state.write(i, &k, &v, &beta)?;
    }
    Ok(())
}

/// Folds a window of hidden states into `state` under `policy`.
pub fn fold<T: Scalar>(
    policy: WritePolicy,
    state: &mut OnlineState<T>,
    hiddens: &[&[T]],
    segment_ids: Option<&[u32]>,
    projections: &[MemoryProjections<T>],
) -> Result<()> {
    for (j, g) in write_groups(policy, hiddens.len(), segment_ids)?.into_iter().enumerate() {
        let x = ssw_segment_mean(&hiddens[g], j)?;
        msw_step(state, &x, projections)?;
    }
    Ok(())
}
