//! Small pre-norm causal decoder that the memory steers.
//!
//! Blocks are `x = h + Attn(LN1(h))`, `h' = x + MLP(LN2(x))` with GELU, learned
//! absolute positions and an output head tied to the token embedding. The
//! attention input `LN1(h)` is the hidden state handed to the memory hooks.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::params::{Binder, Parameters};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            head_dim: 16,
            vocab_size: 64,
            max_seq_len: 512,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.head_dim,
            self.vocab_size,
            self.max_seq_len,
        ];
        if extents.contains(&0) {
            return Err(Error::Config("backbone extents must be >= 1".into()));
        }
        if self.n_heads * self.head_dim != self.d_model {
            return Err(Error::Config(format!(
                "n_heads * head_dim = {} but d_model = {}",
                self.n_heads * self.head_dim,
                self.d_model
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Block<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub w_up: Tensor<T>,
    pub b_up: Tensor<T>,
    pub w_down: Tensor<T>,
    pub b_down: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w_up: Var,
    pub b_up: Var,
    pub w_down: Var,
    pub b_down: Var,
}

impl<T: Scalar> Block<T> {
    fn init(cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let hidden = 4 * d;
        let bound = 1.0 / (d as f64).sqrt();
        let resid = bound / (2.0 * cfg.n_layers as f64).sqrt();
        Self {
            ln1_gain: Tensor::from_fn(vec![d], |_| T::one()),
            ln1_bias: Tensor::zeros(vec![d]),
            wq: Tensor::uniform(vec![d, d], bound, rng),
            wk: Tensor::uniform(vec![d, d], bound, rng),
            wv: Tensor::uniform(vec![d, d], bound, rng),
            wo: Tensor::uniform(vec![d, d], resid, rng),
            ln2_gain: Tensor::from_fn(vec![d], |_| T::one()),
            ln2_bias: Tensor::zeros(vec![d]),
            w_up: Tensor::uniform(vec![hidden, d], bound, rng),
            b_up: Tensor::zeros(vec![hidden]),
            w_down: Tensor::uniform(vec![d, hidden], resid / 2.0, rng),
            b_down: Tensor::zeros(vec![d]),
        }
    }

    fn bind(&self, b: &mut Binder<'_, T>) -> BlockVars {
        BlockVars {
            ln1_gain: b.bind(&self.ln1_gain),
            ln1_bias: b.bind(&self.ln1_bias),
            wq: b.bind(&self.wq),
            wk: b.bind(&self.wk),
            wv: b.bind(&self.wv),
            wo: b.bind(&self.wo),
            ln2_gain: b.bind(&self.ln2_gain),
            ln2_bias: b.bind(&self.ln2_bias),
            w_up: b.bind(&self.w_up),
            b_up: b.bind(&self.b_up),
            w_down: b.bind(&self.w_down),
            b_down: b.bind(&self.b_down),
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor<T>); 12] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("attn.wq", &self.wq),
            ("attn.wk", &self.wk),
            ("attn.wv", &self.wv),
            ("attn.wo", &self.wo),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("mlp.w_up", &self.w_up),
            ("mlp.b_up", &self.b_up),
            ("mlp.w_down", &self.w_down),
            ("mlp.b_down", &self.b_down),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 12] {
        [
            ("ln1.gain", &mut self.ln1_gain),
            ("ln1.bias", &mut self.ln1_bias),
            ("attn.wq", &mut self.wq),
            ("attn.wk", &mut self.wk),
            ("attn.wv", &mut self.wv),
            ("attn.wo", &mut self.wo),
            ("ln2.gain", &mut self.ln2_gain),
            ("ln2.bias", &mut self.ln2_bias),
            ("mlp.w_up", &mut self.w_up),
            ("mlp.b_up", &mut self.b_up),
            ("mlp.w_down", &mut self.w_down),
            ("mlp.b_down", &mut self.b_down),
        ]
    }
}

/// Decoder weights. Inside a memory model every tensor has
/// `requires_grad = false`; only backbone pretraining unfreezes them.
#[derive(Debug, Clone)]
pub struct Backbone<T = f32> {
    pub config: BackboneConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub lnf_gain: Tensor<T>,
    pub lnf_bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BlockVars>,
    pub lnf_gain: Var,
    pub lnf_bias: Var,
}

/// Query, key and value projections of one attention layer, `[T x d]` each.
#[derive(Debug, Clone, Copy)]
pub struct Qkv {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

/// Interception points inside each attention layer. The defaults leave the
/// layer untouched.
pub trait LayerHooks<T: Scalar> {
    /// Sees the attention input `x` and may replace the projected q/k/v.
    fn steer_qkv(&mut self, _tape: &mut Tape<T>, _layer: usize, _x: Var, qkv: Qkv) -> Result<Qkv> {
        Ok(qkv)
    }

    /// May replace the attention output `a` before the residual add.
    fn steer_output(&mut self, _tape: &mut Tape<T>, _layer: usize, a: Var) -> Result<Var> {
        Ok(a)
    }
}

/// Plain decoder forward.
pub struct NoHooks;

impl<T: Scalar> LayerHooks<T> for NoHooks {}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Per layer, the `[T x d]` attention input.
    pub hidden: Vec<Var>,
    /// Residual stream after the last block.
    pub residual: Var,
    /// `[T x vocab]`, when requested.
    pub logits: Option<Var>,
}

impl<T: Scalar> Backbone<T> {
    pub fn init(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let emb = 0.02 * 3f64.sqrt();
        Ok(Self {
            tok_emb: Tensor::uniform(vec![config.vocab_size, d], emb, rng),
            pos_emb: Tensor::uniform(vec![config.max_seq_len, d], emb, rng),
            blocks: (0..config.n_layers).map(|_| Block::init(&config, rng)).collect(),
            lnf_gain: Tensor::from_fn(vec![d], |_| T::one()),
            lnf_bias: Tensor::zeros(vec![d]),
            config,
        })
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.visit_mut(&mut |_, t| t.requires_grad = trainable);
    }

    pub fn is_frozen(&self) -> bool {
        let mut frozen = true;
        self.visit(&mut |_, t| frozen &= !t.requires_grad);
        frozen
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        let block = |b: &Block<T>| Block {
            ln1_gain: b.ln1_gain.cast(),
            ln1_bias: b.ln1_bias.cast(),
            wq: b.wq.cast(),
            wk: b.wk.cast(),
            wv: b.wv.cast(),
            wo: b.wo.cast(),
            ln2_gain: b.ln2_gain.cast(),
            ln2_bias: b.ln2_bias.cast(),
            w_up: b.w_up.cast(),
            b_up: b.b_up.cast(),
            w_down: b.w_down.cast(),
            b_down: b.b_down.cast(),
        };
        Backbone {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            blocks: self.blocks.iter().map(block).collect(),
            lnf_gain: self.lnf_gain.cast(),
            lnf_bias: self.lnf_bias.cast(),
        }
    }

    /// SHA-256 over every weight's name, shape and little-endian bytes.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit(&mut |name, t| {
            hasher.update(name.as_bytes());
            for &s in t.shape() {
                hasher.update((s as u64).to_le_bytes());
            }
            let mut buf = Vec::with_capacity(t.numel() * T::BYTES);
            for &x in t.data() {
                x.write_le(&mut buf);
            }
            hasher.update(&buf);
        });
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn bind(&self, b: &mut Binder<'_, T>) -> BackboneVars {
        BackboneVars {
            tok_emb: b.bind(&self.tok_emb),
            pos_emb: b.bind(&self.pos_emb),
            blocks: self.blocks.iter().map(|blk| blk.bind(b)).collect(),
            lnf_gain: b.bind(&self.lnf_gain),
            lnf_bias: b.bind(&self.lnf_bias),
        }
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::shape("forward", "empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::TooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::OutOfVocab {
                token: bad,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Causal forward pass. Positions restart at zero for every call.
    pub fn forward_hidden(
        &self,
        tape: &mut Tape<T>,
        vars: &BackboneVars,
        tokens: &[u32],
        hooks: &mut dyn LayerHooks<T>,
        with_logits: bool,
    ) -> Result<ForwardOutput> {
        let positions: Vec<usize> = (0..tokens.len()).collect();
        self.forward_hidden_at(tape, vars, tokens, &positions, hooks, with_logits)
    }

    /// `forward_hidden` with explicit position ids, which must be strictly
    /// increasing and below `max_seq_len`.
    pub fn forward_hidden_at(
        &self,
        tape: &mut Tape<T>,
        vars: &BackboneVars,
        tokens: &[u32],
        positions: &[usize],
        hooks: &mut dyn LayerHooks<T>,
        with_logits: bool,
    ) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        if positions.len() != tokens.len()
            || positions.windows(2).any(|w| w[0] >= w[1])
            || positions.last().is_some_and(|&p| p >= self.config.max_seq_len)
        {
            return Err(Error::shape("forward", "position ids must increase and fit max_seq_len"));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok = tape.gather_rows(vars.tok_emb, &ids)?;
        let pos = tape.gather_rows(vars.pos_emb, positions)?;
        let mut h = tape.add(tok, pos)?;
        let mut hidden = Vec::with_capacity(self.blocks.len());
        for (layer, bv) in vars.blocks.iter().enumerate() {
            let eps = T::of(LN_EPS);
            let x = tape.layer_norm(h, bv.ln1_gain, bv.ln1_bias, eps)?;
            hidden.push(x);
            let qkv = Qkv {
                query: tape.linear(x, bv.wq)?,
                key: tape.linear(x, bv.wk)?,
                value: tape.linear(x, bv.wv)?,
            };
            let qkv = hooks.steer_qkv(tape, layer, x, qkv)?;
            let a = attention(tape, qkv, bv.wo, self.config.n_heads)?;
            let y = hooks.steer_output(tape, layer, a)?;
            h = tape.add(h, y)?;

            let m = tape.layer_norm(h, bv.ln2_gain, bv.ln2_bias, eps)?;
            let up = tape.linear(m, bv.w_up)?;
            let up = tape.add_row(up, bv.b_up)?;
            let act = tape.gelu(up)?;
            let down = tape.linear(act, bv.w_down)?;
            let down = tape.add_row(down, bv.b_down)?;
            h = tape.add(h, down)?;
        }
        let logits = if with_logits {
            let f = tape.layer_norm(h, vars.lnf_gain, vars.lnf_bias, T::of(LN_EPS))?;
            Some(tape.linear(f, vars.tok_emb)?)
        } else {
            None
        };
        Ok(ForwardOutput {
            hidden,
            residual: h,
            logits,
        })
    }

    /// Logits of a plain forward pass on a throwaway tape.
    pub fn logits(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let vars = self.bind(&mut binder);
        let out = self.forward_hidden(&mut tape, &vars, tokens, &mut NoHooks, true)?;
        Ok(tape.tensor(out.logits.expect("requested")))
    }
}

/// Causal multi-head attention: per head `softmax(q k^T / sqrt(hd)) v`,
/// heads concatenated and projected by `wo`.
pub fn attention<T: Scalar>(tape: &mut Tape<T>, qkv: Qkv, wo: Var, n_heads: usize) -> Result<Var> {
    let (sq, sk, sv) = (tape.shape(qkv.query), tape.shape(qkv.key), tape.shape(qkv.value));
    if sq.len() != 2 || sq != sk || sq != sv || sq[1] % n_heads != 0 {
        return Err(Error::shape(
            "attention",
            format!("q {sq:?}, k {sk:?}, v {sv:?}, {n_heads} heads"),
        ));
    }
    let head_dim = sq[1] / n_heads;
    let scale = T::one() / T::of(head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let q = tape.slice_cols(qkv.query, h * head_dim, head_dim)?;
        let k = tape.slice_cols(qkv.key, h * head_dim, head_dim)?;
        let v = tape.slice_cols(qkv.value, h * head_dim, head_dim)?;
        let scores = tape.linear(q, k)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax_rows(scores, true)?;
        heads.push(tape.matmul(weights, v)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    tape.linear(joined, wo)
}

impl<T: Scalar> Parameters<T> for Backbone<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("backbone.tok_emb", &self.tok_emb);
        f("backbone.pos_emb", &self.pos_emb);
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.fields() {
                f(&format!("backbone.layer{l}.{name}"), t);
            }
        }
        f("backbone.ln_f.gain", &self.lnf_gain);
        f("backbone.ln_f.bias", &self.lnf_bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("backbone.tok_emb", &mut self.tok_emb);
        f("backbone.pos_emb", &mut self.pos_emb);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in b.fields_mut() {
                f(&format!("backbone.layer{l}.{name}"), t);
            }
        }
        f("backbone.ln_f.gain", &mut self.lnf_gain);
        f("backbone.ln_f.bias", &mut self.lnf_bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(seed: u64) -> Backbone<f64> {
        let cfg = BackboneConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            vocab_size: 11,
            max_seq_len: 16,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Backbone::init(cfg, &mut rng).unwrap();
        // Non-trivial norms so the oracle exercises gain and bias.
        b.blocks[0].ln1_gain = Tensor::uniform(vec![8], 1.0, &mut rng);
        b.blocks[0].ln2_bias = Tensor::uniform(vec![8], 0.5, &mut rng);
        b
    }

    fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(j, v)| (v - mean) / (var + LN_EPS).sqrt() * g[j] + b[j])
            .collect()
    }

    /// `w [out x in] * x`.
    fn mv(w: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
        let (o, i) = (w.shape()[0], w.shape()[1]);
        (0..o)
            .map(|r| (0..i).map(|c| w.data()[r * i + c] * x[c]).sum())
            .collect()
    }

    /// Position-by-position reference forward with explicit loops.
    fn reference_logits(b: &Backbone<f64>, tokens: &[u32]) -> Vec<Vec<f64>> {
        let d = b.config.d_model;
        let hd = b.config.head_dim;
        let mut h: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(p, &t)| {
                (0..d)
                    .map(|j| b.tok_emb.data()[t as usize * d + j] + b.pos_emb.data()[p * d + j])
                    .collect()
            })
            .collect();
        for blk in &b.blocks {
            let x: Vec<Vec<f64>> = h
                .iter()
                .map(|r| ln(r, blk.ln1_gain.data(), blk.ln1_bias.data()))
                .collect();
            let q: Vec<Vec<f64>> = x.iter().map(|r| mv(&blk.wq, r)).collect();
            let k: Vec<Vec<f64>> = x.iter().map(|r| mv(&blk.wk, r)).collect();
            let v: Vec<Vec<f64>> = x.iter().map(|r| mv(&blk.wv, r)).collect();
            for t in 0..tokens.len() {
                let mut concat = vec![0.0; d];
                for head in 0..b.config.n_heads {
                    let off = head * hd;
                    let scores: Vec<f64> = (0..=t)
                        .map(|s| {
                            (0..hd).map(|c| q[t][off + c] * k[s][off + c]).sum::<f64>()
                                / (hd as f64).sqrt()
                        })
                        .collect();
                    let max = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                    for (s, sc) in scores.iter().enumerate() {
                        let w = (sc - max).exp() / z;
                        for c in 0..hd {
                            concat[off + c] += w * v[s][off + c];
                        }
                    }
                }
                let a = mv(&blk.wo, &concat);
                for j in 0..d {
                    h[t][j] += a[j];
                }
                let m = ln(&h[t], blk.ln2_gain.data(), blk.ln2_bias.data());
                let up: Vec<f64> = mv(&blk.w_up, &m)
                    .iter()
                    .zip(blk.b_up.data())
                    .map(|(u, bb)| crate::numerics::gelu(u + bb))
                    .collect();
                let down = mv(&blk.w_down, &up);
                for j in 0..d {
                    h[t][j] += down[j] + blk.b_down.data()[j];
                }
            }
        }
        h.iter()
            .map(|r| {
                let f = ln(r, b.lnf_gain.data(), b.lnf_bias.data());
                mv(&b.tok_emb, &f)
            })
            .collect()
    }

    #[test]
    fn forward_matches_reference_loops() {
        let b = toy(1);
        let tokens = [3u32, 0, 10, 7, 3];
        let got = b.logits(&tokens).unwrap();
        let expect = reference_logits(&b, &tokens);
        for (t, row) in expect.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                assert!((got.data()[t * 11 + j] - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn causal_prefix_invariance() {
        let b = toy(2);
        let a = b.logits(&[1, 2, 3, 4, 5]).unwrap();
        let c = b.logits(&[1, 2, 3, 9, 0]).unwrap();
        assert_eq!(&a.data()[..3 * 11], &c.data()[..3 * 11]);
        assert_ne!(&a.data()[3 * 11..], &c.data()[3 * 11..]);
    }

    #[test]
    fn deterministic_forward() {
        let b = toy(3);
        let a = b.logits(&[4, 4, 1]).unwrap();
        let c = b.logits(&[4, 4, 1]).unwrap();
        let bits = |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&c));
    }

    #[test]
    fn explicit_positions() {
        let b = toy(5);
        let run = |pos: &[usize]| {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&mut tape);
            let vars = b.bind(&mut binder);
            binder.finish();
            let out = b.forward_hidden_at(&mut tape, &vars, &[1, 2, 3], pos, &mut NoHooks, true)?;
            Ok::<_, Error>(tape.value(out.logits.unwrap()).to_vec())
        };
        assert_eq!(run(&[0, 1, 2]).unwrap(), b.logits(&[1, 2, 3]).unwrap().data());
        assert_ne!(run(&[0, 2, 5]).unwrap(), run(&[0, 1, 2]).unwrap());
        assert!(run(&[0, 2, 2]).is_err());
        assert!(run(&[0, 1]).is_err());
        assert!(run(&[0, 1, 16]).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let b = toy(4);
        assert!(matches!(b.logits(&[11]), Err(Error::OutOfVocab { .. })));
        assert!(matches!(b.logits(&[1; 17]), Err(Error::TooLong { .. })));
    }

    #[test]
    fn single_position_attention_is_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(&Tensor::uniform(vec![1, 4], 3.0, &mut rng));
        let k = tape.leaf(&Tensor::uniform(vec![1, 4], 1.0, &mut rng));
        let vt = Tensor::uniform(vec![1, 4], 1.0, &mut rng);
        let v = tape.leaf(&vt);
        let wot = Tensor::uniform(vec![4, 4], 1.0, &mut rng);
        let wo = tape.leaf(&wot);
        let out = attention(&mut tape, Qkv { query: q, key: k, value: v }, wo, 2).unwrap();
        let expect = mv(&wot, vt.data());
        for (g, e) in tape.value(out).iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_keys_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(&Tensor::uniform(vec![4, 4], 3.0, &mut rng));
        let key_row = Tensor::<f64>::uniform(vec![4], 1.0, &mut rng);
        let keys = Tensor::from_fn(vec![4, 4], |i| key_row.data()[i % 4]);
        let k = tape.leaf(&keys);
        // Values are the identity, so the output rows are the attention weights.
        let v = tape.leaf(&Tensor::identity(4));
        let wo = tape.leaf(&Tensor::identity(4));
        let out = attention(&mut tape, Qkv { query: q, key: k, value: v }, wo, 1).unwrap();
        let w = tape.value(out);
        for t in 0..4 {
            for s in 0..4 {
                let expect = if s <= t { 1.0 / (t + 1) as f64 } else { 0.0 };
                assert!((w[t * 4 + s] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_validation() {
        let bad = BackboneConfig {
            n_heads: 3,
            ..BackboneConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(BackboneConfig::default().validate().is_ok());
    }

    #[test]
    fn checksum_tracks_weights() {
        let mut b = toy(7);
        let before = b.checksum();
        assert_eq!(before, b.clone().checksum());
        b.blocks[0].wq.data_mut()[0] += 1e-3;
        assert_ne!(before, b.checksum());
    }
}
