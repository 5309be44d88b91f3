//! A frozen backbone with one memory per hooked layer.
//!
//! At each hooked layer the attention input `x` is projected into memory
//! space. Every position reads the state left by earlier writes, the readout
//! steers q/k/v before attention and the output after it, and the write
//! groups of the active policy then fold into the state. Writes depend only
//! on `x`, so a window's recurrence is folded before attention runs.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneVars, LayerHooks, Qkv};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::osam::{MemoryState, OnlineState};
use crate::params::{Binder, Parameters};
use crate::projections::{MemoryProjections, ProjectionVars};
use crate::steering::{Branch, BranchSet, LayerSet, SteeringParams, SteeringVars};
use crate::write_policy::{segments, write_groups, Strategy, WritePolicy};

/// Memory hyperparameters shared by every hooked layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub rank: usize,
    pub alpha: f64,
    pub branches: BranchSet,
    pub layers: LayerSet,
    pub strategy: Strategy,
    pub n_states: usize,
    /// Longest backbone pass; longer contexts are ingested in windows.
    pub backbone_len: usize,
    /// Most context tokens a single ingest accepts.
    pub write_budget: usize,
    /// Drop the head of an overlong context instead of rejecting it.
    pub truncate_context: bool,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            branches: BranchSet::qo(),
            layers: LayerSet::All,
            strategy: Strategy::Tsw,
            n_states: 1,
            backbone_len: 128,
            write_budget: 1024,
            truncate_context: false,
        }
    }
}

impl MemoryConfig {
    pub fn policy(&self) -> Result<WritePolicy> {
        WritePolicy::new(self.strategy, self.n_states)
    }

    /// Sub-states per hooked layer under the active policy.
    pub fn states_per_layer(&self) -> Result<usize> {
        Ok(self.policy()?.n_states())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be >= 1".into()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        if self.write_budget == 0 {
            return Err(Error::Config("write_budget must be >= 1".into()));
        }
        if self.backbone_len == 0 || self.backbone_len > max_seq_len {
            return Err(Error::Config(format!(
                "backbone_len {} outside 1..={max_seq_len}",
                self.backbone_len
            )));
        }
        self.policy().map(|_| ())
    }
}

/// Projections (one set per sub-state) and steering maps of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMemory<T = f32> {
    pub layer: usize,
    pub projections: Vec<MemoryProjections<T>>,
    pub steering: SteeringParams<T>,
}

#[derive(Debug, Clone)]
pub struct LayerMemoryVars {
    pub projections: Vec<ProjectionVars>,
    pub steering: SteeringVars,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub backbone: BackboneVars,
    pub layers: Vec<LayerMemoryVars>,
    /// Trainable leaves in `Parameters::visit` order.
    pub trainable: Vec<Var>,
}

/// Per hooked layer, per sub-state `[r x r]` state variables.
pub type StateVars = Vec<Vec<Var>>;

#[derive(Debug, Clone)]
pub struct DeltaMem<T = f32> {
    pub backbone: Backbone<T>,
    pub memory: MemoryConfig,
    pub layers: Vec<LayerMemory<T>>,
}

impl<T: Scalar> DeltaMem<T> {
    /// Freezes `backbone` and attaches fresh memories with zero steering maps.
    pub fn new(mut backbone: Backbone<T>, memory: MemoryConfig, rng: &mut impl Rng) -> Result<Self> {
        memory.validate(backbone.config.max_seq_len)?;
        backbone.set_trainable(false);
        let d = backbone.config.d_model;
        let n = memory.states_per_layer()?;
        let layers = memory
            .layers
            .resolve(backbone.config.n_layers)?
            .into_iter()
            .map(|layer| LayerMemory {
                layer,
                projections: (0..n).map(|_| MemoryProjections::init(d, memory.rank, rng)).collect(),
                steering: SteeringParams::zeros(memory.branches, d, n * memory.rank, memory.alpha, memory.rank),
            })
            .collect();
        Ok(Self {
            backbone,
            memory,
            layers,
        })
    }

    pub fn hooked_layers(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.layer).collect()
    }

    pub fn policy(&self) -> WritePolicy {
        self.memory.policy().expect("validated at construction")
    }

    pub fn zero_state(&self) -> MemoryState<T> {
        MemoryState::zeros(&self.hooked_layers(), self.memory.rank, self.policy().n_states())
    }

    pub fn cast<U: Scalar>(&self) -> DeltaMem<U> {
        DeltaMem {
            backbone: self.backbone.cast(),
            memory: self.memory.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerMemory {
                    layer: l.layer,
                    projections: l.projections.iter().map(|p| p.cast()).collect(),
                    steering: l.steering.cast(),
                })
                .collect(),
        }
    }

    pub fn check_state(&self, state: &MemoryState<T>) -> Result<()> {
        let want = self.hooked_layers();
        let got: Vec<usize> = state.layers.iter().map(|(l, _)| *l).collect();
        if want != got {
            return Err(Error::Config(format!(
                "state covers layers {got:?}, model hooks {want:?}"
            )));
        }
        for (_, s) in &state.layers {
            if s.rank() != self.memory.rank {
                return Err(Error::shape("state", format!("rank {} vs {}", s.rank(), self.memory.rank)));
            }
            if s.n_states() != self.policy().n_states() {
                return Err(Error::StateCount {
                    expected: self.policy().n_states(),
                    got: s.n_states(),
                });
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ModelVars {
        let backbone = self.backbone.bind(&mut Binder::new(tape));
        let mut b = Binder::new(tape);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerMemoryVars {
                projections: l.projections.iter().map(|p| p.bind(&mut b)).collect(),
                steering: l.steering.bind(&mut b),
            })
            .collect();
        ModelVars {
            backbone,
            layers,
            trainable: b.finish(),
        }
    }

    /// Records `state` on the tape as constants.
    pub fn state_vars(&self, tape: &mut Tape<T>, state: &MemoryState<T>) -> Result<StateVars> {
        self.check_state(state)?;
        Ok(state
            .layers
            .iter()
            .map(|(_, s)| s.states().iter().map(|t| tape.leaf(&t.clone().with_grad(false))).collect())
            .collect())
    }

    /// Reads state values back from the tape.
    pub fn collect_state(&self, tape: &Tape<T>, vars: &StateVars, base: &MemoryState<T>, writes: u64) -> Result<MemoryState<T>> {
        let mut out = base.clone();
        for ((_, s), layer_vars) in out.layers.iter_mut().zip(vars) {
            let states = layer_vars.iter().map(|&v| tape.tensor(v)).collect();
            s.replace(states, writes);
        }
        Ok(out)
    }

    /// One backbone pass over `tokens` with memories reading and writing.
    /// Returns logits when requested and the number of writes per sub-state.
    pub fn forward_window(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        tokens: &[u32],
        segment_ids: Option<&[u32]>,
        states: &mut StateVars,
        with_logits: bool,
    ) -> Result<(Option<Var>, u64)> {
        let groups = write_groups(self.policy(), tokens.len(), segment_ids)?;
        let writes = groups.len() as u64;
        let mut hook = MemoryHook {
            model: self,
            vars,
            groups,
            states,
            pending: None,
            steered: Vec::new(),
        };
        let out = self
            .backbone
            .forward_hidden(tape, &vars.backbone, tokens, &mut hook, with_logits)?;
        Ok((out.logits, writes))
    }

    /// Splits a context into backbone windows at segment boundaries.
    pub fn context_windows(&self, context: &[u32], segment_ids: Option<&[u32]>) -> Result<Vec<Range<usize>>> {
        if let Some(ids) = segment_ids {
            if ids.len() != context.len() {
                return Err(Error::shape(
                    "segments",
                    format!("{} segment ids for {} tokens", ids.len(), context.len()),
                ));
            }
        }
        let max = self.memory.backbone_len;
        let pieces: Vec<Range<usize>> = match segment_ids {
            Some(ids) => segments(ids)
                .into_iter()
                .flat_map(|r| {
                    (r.start..r.end)
                        .step_by(max)
                        .map(move |s| s..(s + max).min(r.end))
                })
                .collect(),
            None => (0..context.len()).step_by(max).map(|s| s..(s + max).min(context.len())).collect(),
        };
        let mut windows: Vec<Range<usize>> = Vec::new();
        for p in pieces {
            match windows.last_mut() {
                Some(w) if p.end - w.start <= max => w.end = p.end,
                _ => windows.push(p),
            }
        }
        Ok(windows)
    }

    /// Applies the write budget: rejects or keeps the tail of an overlong context.
    pub fn budget<'a>(&self, context: &'a [u32], segment_ids: Option<&'a [u32]>) -> Result<(&'a [u32], Option<&'a [u32]>)> {
        let budget = self.memory.write_budget;
        if context.len() <= budget {
            return Ok((context, segment_ids));
        }
        if !self.memory.truncate_context {
            return Err(Error::TooLong {
                len: context.len(),
                max: budget,
            });
        }
        let cut = context.len() - budget;
        Ok((&context[cut..], segment_ids.map(|s| &s[cut..])))
    }

    /// Writes a context into `states` window by window without producing logits.
    pub fn ingest_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        context: &[u32],
        segment_ids: Option<&[u32]>,
        states: &mut StateVars,
    ) -> Result<u64> {
        let (context, segment_ids) = self.budget(context, segment_ids)?;
        let mut writes = 0;
        for w in self.context_windows(context, segment_ids)? {
            let ids = segment_ids.map(|s| &s[w.clone()]);
            let (_, n) = self.forward_window(tape, vars, &context[w], ids, states, false)?;
            writes += n;
        }
        Ok(writes)
    }

    /// Ingests `context` into `state`.
    pub fn ingest(&self, context: &[u32], segment_ids: Option<&[u32]>, state: &mut MemoryState<T>) -> Result<()> {
        if context.is_empty() {
            return Ok(());
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let mut sv = self.state_vars(&mut tape, state)?;
        let writes = self.ingest_tape(&mut tape, &vars, context, segment_ids, &mut sv)?;
        *state = self.collect_state(&tape, &sv, state, writes)?;
        Ok(())
    }

    /// Prediction pass over `tokens` starting from `state`. The whole pass is
    /// one segment for segment writes.
    pub fn predict(&self, tokens: &[u32], state: &MemoryState<T>) -> Result<(Tensor<T>, MemoryState<T>)> {
        self.predict_segmented(tokens, None, state)
    }

    /// [`predict`](Self::predict) with explicit segment ids for the pass.
    pub fn predict_segmented(
        &self,
        tokens: &[u32],
        segment_ids: Option<&[u32]>,
        state: &MemoryState<T>,
    ) -> Result<(Tensor<T>, MemoryState<T>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let mut sv = self.state_vars(&mut tape, state)?;
        let (logits, writes) = self.forward_window(&mut tape, &vars, tokens, segment_ids, &mut sv, true)?;
        let logits = tape.tensor(logits.expect("requested"));
        let after = self.collect_state(&tape, &sv, state, writes)?;
        Ok((logits, after))
    }

    pub fn logits(&self, tokens: &[u32], state: &MemoryState<T>) -> Result<Tensor<T>> {
        Ok(self.predict(tokens, state)?.0)
    }
}

struct MemoryHook<'a, T: Scalar> {
    model: &'a DeltaMem<T>,
    vars: &'a ModelVars,
    groups: Vec<Range<usize>>,
    states: &'a mut StateVars,
    pending: Option<(usize, Var)>,
    steered: Vec<Var>,
}

impl<T: Scalar> MemoryHook<'_, T> {
    fn slot(&self, layer: usize) -> Option<usize> {
        self.model.layers.iter().position(|l| l.layer == layer)
    }

    /// Reads for every position and folds the write groups; returns the
    /// `[T x N*r]` readout.
    fn read_and_write(&mut self, tape: &mut Tape<T>, slot: usize, x: Var) -> Result<Var> {
        let per_token = self.groups.iter().all(|g| g.len() == 1);
        let write_x = if per_token {
            x
        } else {
            let means = self
                .groups
                .iter()
                .map(|g| tape.mean_rows(x, &g.clone().collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()?;
            tape.stack_rows(&means)?
        };
        let lv = &self.vars.layers[slot];
        let mut reads = Vec::with_capacity(lv.projections.len());
        for (i, pv) in lv.projections.iter().enumerate() {
            let query = pv.project_query(tape, x)?;
            let w = pv.project_writes(tape, write_x)?;
            let mut s = self.states[slot][i];
            let mut rows = Vec::new();
            for (j, g) in self.groups.iter().enumerate() {
                for t in g.clone() {
                    let q = tape.row(query, t)?;
                    rows.push(tape.matvec(s, q)?);
                }
                let k = tape.row(w.key, j)?;
                let v = tape.row(w.value, j)?;
                let beta = tape.row(w.beta, j)?;
                s = tape.delta_write(s, k, v, beta)?;
            }
            self.states[slot][i] = s;
            reads.push(tape.stack_rows(&rows)?);
        }
        if reads.len() == 1 {
            Ok(reads[0])
        } else {
            tape.concat_cols(&reads)
        }
    }

    fn steer(&self, tape: &mut Tape<T>, slot: usize, branch: Branch, base: Var, read: Var) -> Result<Var> {
        match self.vars.layers[slot].steering.get(branch) {
            None => Ok(base),
            Some(w) => {
                let delta = tape.linear(read, w)?;
                let delta = tape.scale(delta, self.model.layers[slot].steering.scale)?;
                tape.add(base, delta)
            }
        }
    }
}

impl<T: Scalar> LayerHooks<T> for MemoryHook<'_, T> {
    fn steer_qkv(&mut self, tape: &mut Tape<T>, layer: usize, x: Var, qkv: Qkv) -> Result<Qkv> {
        let Some(slot) = self.slot(layer) else {
            return Ok(qkv);
        };
        if self.groups.is_empty() {
            return Ok(qkv);
        }
        let read = self.read_and_write(tape, slot, x)?;
        self.pending = Some((slot, read));
        Ok(Qkv {
            query: self.steer(tape, slot, Branch::Query, qkv.query, read)?,
            key: self.steer(tape, slot, Branch::Key, qkv.key, read)?,
            value: self.steer(tape, slot, Branch::Value, qkv.value, read)?,
        })
    }

    fn steer_output(&mut self, tape: &mut Tape<T>, _layer: usize, a: Var) -> Result<Var> {
        let Some((slot, read)) = self.pending.take() else {
            return Ok(a);
        };
        let y = self.steer(tape, slot, Branch::Output, a, read)?;
        self.steered.push(y);
        Ok(y)
    }
}

impl<T: Scalar> Parameters<T> for DeltaMem<T> {
    /// Trainable memory tensors only; the backbone is visited separately.
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for l in &self.layers {
            for (i, p) in l.projections.iter().enumerate() {
                for (name, t) in p.fields() {
                    f(&format!("projections.layer{}.state{i}.{name}", l.layer), t);
                }
            }
            for (name, t) in l.steering.fields() {
                f(&format!("steering.layer{}.{name}", l.layer), t);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for l in &mut self.layers {
            let layer = l.layer;
            for (i, p) in l.projections.iter_mut().enumerate() {
                for (name, t) in p.fields_mut() {
                    f(&format!("projections.layer{layer}.state{i}.{name}"), t);
                }
            }
            for (name, t) in l.steering.fields_mut() {
                f(&format!("steering.layer{layer}.{name}"), t);
            }
        }
    }
}

/// Reference implementation of one hooked attention layer, position by
/// position with an explicit key/value cache. Returns the steered attention
/// outputs (before the residual add) and advances `state`.
pub fn hooked_layer_forward<T: Scalar>(
    block: &crate::backbone::Block<T>,
    n_heads: usize,
    x: &[Vec<T>],
    state: &mut OnlineState<T>,
    memory: &LayerMemory<T>,
    policy: WritePolicy,
    segment_ids: Option<&[u32]>,
) -> Result<Vec<Vec<T>>> {
    let d = block.wq.shape()[0];
    let hd = d / n_heads;
    let sp = &memory.steering;
    let mv = |w: &Tensor<T>, v: &[T]| -> Vec<T> {
        let n = w.shape()[1];
        (0..w.shape()[0])
            .map(|i| crate::numerics::dot(&w.data()[i * n..(i + 1) * n], v))
            .collect()
    };
    let mut keys: Vec<Vec<T>> = Vec::new();
    let mut values: Vec<Vec<T>> = Vec::new();
    let mut out = Vec::with_capacity(x.len());
    let groups = write_groups(policy, x.len(), segment_ids)?;
    for g in &groups {
        for t in g.clone() {
            let xt = &x[t];
            let qs: Vec<Vec<T>> = memory
                .projections
                .iter()
                .map(|p| p.project_qk(xt).map(|(q, _)| q))
                .collect::<Result<_>>()?;
            let qrefs: Vec<&[T]> = qs.iter().map(|q| q.as_slice()).collect();
            let read = state.read(&qrefs)?;
            let c = sp.corrections(&read)?;
            let q = match &c.q {
                Some(dq) => sp.apply_query(&mv(&block.wq, xt), dq)?,
                None => mv(&block.wq, xt),
            };
            let k = match &c.k {
                Some(dk) => sp.apply_kv(Branch::Key, &mv(&block.wk, xt), dk)?,
                None => mv(&block.wk, xt),
            };
            let v = match &c.v {
                Some(dv) => sp.apply_kv(Branch::Value, &mv(&block.wv, xt), dv)?,
                None => mv(&block.wv, xt),
            };
            keys.push(k);
            values.push(v);
            let scale = T::one() / T::of(hd as f64).sqrt();
            let mut heads = vec![T::zero(); d];
            for h in 0..n_heads {
                let off = h * hd;
                let scores: Vec<T> = keys
                    .iter()
                    .map(|k| crate::numerics::dot(&q[off..off + hd], &k[off..off + hd]) * scale)
                    .collect();
                let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
                let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
                let z: T = exps.iter().copied().sum();
                for (e, v) in exps.iter().zip(&values) {
                    for c in 0..hd {
                        heads[off + c] = heads[off + c] + *e / z * v[off + c];
                    }
                }
            }
            let a = mv(&block.wo, &heads);
            out.push(match &c.o {
                Some(d_o) => sp.apply_output(&a, d_o)?,
                None => a,
            });
        }
        let members: Vec<&[T]> = x[g.clone()].iter().map(|r| r.as_slice()).collect();
        let xbar = crate::write_policy::ssw_segment_mean(&members, 0)?;
        crate::write_policy::msw_step(state, &xbar, &memory.projections)?;
    }
    Ok(out)
}
