//! Trainable maps from a backbone hidden state into memory space.
//!
//! `q = l2norm(tanh(W_q x))`, `k = l2norm(tanh(W_k x))`, `v = W_v x`,
//! `beta = sigmoid(W_beta x + b)`. The retention gate is always `1 - beta`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{l2norm_eps, sigmoid, Scalar, Tape, Tensor, Var};
use crate::params::Binder;

pub const NORM_EPS: f64 = 1e-6;
pub const GATE_BIAS_INIT: f64 = -2.0;

/// One projection set: one per (hooked layer, sub-state).
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryProjections<T = f32> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wbeta: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wbeta: Var,
    pub b: Var,
}

/// Projected query/key/value/gate rows for a batch of hidden states.
#[derive(Debug, Clone, Copy)]
pub struct Projected {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub beta: Var,
}

impl<T: Scalar> MemoryProjections<T> {
    /// Uniform `±1/sqrt(d)` maps, gate bias `-2`, all trainable.
    pub fn init(d_model: usize, rank: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_model as f64).sqrt();
        let mut p = Self {
            wq: Tensor::uniform(vec![rank, d_model], bound, rng),
            wk: Tensor::uniform(vec![rank, d_model], bound, rng),
            wv: Tensor::uniform(vec![rank, d_model], bound, rng),
            wbeta: Tensor::uniform(vec![rank, d_model], bound, rng),
            b: Tensor::from_fn(vec![rank], |_| T::of(GATE_BIAS_INIT)),
        };
        p.fields_mut().into_iter().for_each(|(_, t)| t.requires_grad = true);
        p
    }

    pub fn rank(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.wq.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (r, d) = (self.rank(), self.d_model());
        for (name, t) in self.fields() {
            let want: &[usize] = if name == "b" { &[r] } else { &[r, d] };
            if t.shape() != want {
                return Err(Error::shape("projections", format!("{name}: {:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn fields(&self) -> [(&'static str, &Tensor<T>); 5] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wbeta", &self.wbeta),
            ("b", &self.b),
        ]
    }

    pub fn fields_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 5] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wbeta", &mut self.wbeta),
            ("b", &mut self.b),
        ]
    }

    pub fn cast<U: Scalar>(&self) -> MemoryProjections<U> {
        let keep = |t: &Tensor<T>| t.cast::<U>().with_grad(t.requires_grad);
        MemoryProjections {
            wq: keep(&self.wq),
            wk: keep(&self.wk),
            wv: keep(&self.wv),
            wbeta: keep(&self.wbeta),
            b: keep(&self.b),
        }
    }

    pub fn bind(&self, b: &mut Binder<'_, T>) -> ProjectionVars {
        ProjectionVars {
            wq: b.bind(&self.wq),
            wk: b.bind(&self.wk),
            wv: b.bind(&self.wv),
            wbeta: b.bind(&self.wbeta),
            b: b.bind(&self.b),
        }
    }

    /// `(q^m, k^m)` for one hidden state.
    pub fn project_qk(&self, x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let eps = T::of(NORM_EPS);
        let q = linear_tanh(&self.wq, x)?;
        let k = linear_tanh(&self.wk, x)?;
        Ok((l2norm_eps(&q, eps), l2norm_eps(&k, eps)))
    }

    /// `v^m = W_v x`, unnormalized.
    pub fn project_v(&self, x: &[T]) -> Result<Vec<T>> {
        apply(&self.wv, x)
    }

    /// `(beta, lambda)` with `lambda = 1 - beta`.
    pub fn gates(&self, x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let pre = apply(&self.wbeta, x)?;
        let beta: Vec<T> = pre
            .iter()
            .zip(self.b.data())
            .map(|(&p, &b)| sigmoid(p + b))
            .collect();
        let lambda = beta.iter().map(|&b| T::one() - b).collect();
        Ok((beta, lambda))
    }
}

fn apply<T: Scalar>(w: &Tensor<T>, x: &[T]) -> Result<Vec<T>> {
    let (r, d) = (w.shape()[0], w.shape()[1]);
    if x.len() != d {
        return Err(Error::shape("projection", format!("x has {} entries, map expects {d}", x.len())));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("projection input"));
    }
    Ok((0..r)
        .map(|i| crate::numerics::dot(&w.data()[i * d..(i + 1) * d], x))
        .collect())
}

fn linear_tanh<T: Scalar>(w: &Tensor<T>, x: &[T]) -> Result<Vec<T>> {
    Ok(apply(w, x)?.into_iter().map(|v| v.tanh()).collect())
}

impl ProjectionVars {
    /// Projects every row of `x [n x d]`; outputs are `[n x r]`.
    pub fn project<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Projected> {
        let eps = T::of(NORM_EPS);
        let q = tape.linear(x, self.wq)?;
        let q = tape.tanh(q)?;
        let query = tape.l2norm_rows(q, eps)?;
        Ok(Projected {
            query,
            ..self.project_writes(tape, x)?
        })
    }

    /// Key, value and gate rows only; `query` aliases `key`.
    pub fn project_writes<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Projected> {
        let eps = T::of(NORM_EPS);
        let k = tape.linear(x, self.wk)?;
        let k = tape.tanh(k)?;
        let key = tape.l2norm_rows(k, eps)?;
        let value = tape.linear(x, self.wv)?;
        let pre = tape.linear(x, self.wbeta)?;
        let pre = tape.add_row(pre, self.b)?;
        let beta = tape.sigmoid(pre)?;
        Ok(Projected {
            query: key,
            key,
            value,
            beta,
        })
    }

    /// Query rows only.
    pub fn project_query<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let q = tape.linear(x, self.wq)?;
        let q = tape.tanh(q)?;
        tape.l2norm_rows(q, T::of(NORM_EPS))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(d: usize, r: usize, seed: u64) -> MemoryProjections<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = MemoryProjections::init(d, r, &mut rng);
        p.b = Tensor::uniform(vec![r], 1.0, &mut rng);
        p
    }

    #[test]
    fn zero_input_projects_to_zero() {
        let p = random(8, 4, 1);
        let x = vec![0.0; 8];
        let (q, k) = p.project_qk(&x).unwrap();
        assert!(q.iter().chain(&k).all(|&v| v == 0.0));
        assert!(p.project_v(&x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_identity_is_uniform_unit() {
        let mut p = random(4, 4, 2);
        p.wq = Tensor::identity(4);
        p.wk = Tensor::identity(4);
        let (q, k) = p.project_qk(&[20.0; 4]).unwrap();
        for v in q.iter().chain(&k) {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_rows_select_leading_coordinates() {
        let mut p = random(6, 3, 3);
        p.wv = Tensor::from_fn(vec![3, 6], |i| if i / 6 == i % 6 { 1.0 } else { 0.0 });
        let x = [1.5, -2.0, 0.25, 9.0, 9.0, 9.0];
        assert_eq!(p.project_v(&x).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn projections_match_scalar_loops() {
        let p = random(8, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lin = |w: &Tensor<f64>, i: usize| -> f64 { (0..8).map(|j| w.data()[i * 8 + j] * x[j]).sum() };
        let norm = |v: Vec<f64>| {
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| a / (n + 1e-6)).collect::<Vec<_>>()
        };
        let q_ref = norm((0..4).map(|i| lin(&p.wq, i).tanh()).collect());
        let k_ref = norm((0..4).map(|i| lin(&p.wk, i).tanh()).collect());
        let v_ref: Vec<f64> = (0..4).map(|i| lin(&p.wv, i)).collect();
        let b_ref: Vec<f64> = (0..4)
            .map(|i| 1.0 / (1.0 + (-(lin(&p.wbeta, i) + p.b.data()[i])).exp()))
            .collect();
        let (q, k) = p.project_qk(&x).unwrap();
        let v = p.project_v(&x).unwrap();
        let (beta, lambda) = p.gates(&x).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(&q, &q_ref) && close(&k, &k_ref) && close(&v, &v_ref) && close(&beta, &b_ref));
        assert!(beta.iter().zip(&lambda).all(|(b, l)| *l == 1.0 - *b));
    }

    #[test]
    fn gate_closed_forms() {
        let mut p = random(4, 3, 5);
        p.wbeta = Tensor::zeros(vec![3, 4]);
        p.b = Tensor::zeros(vec![3]);
        let (beta, lambda) = p.gates(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(beta.iter().chain(&lambda).all(|&v| v == 0.5));
        p.b = Tensor::from_fn(vec![3], |_| 20.0);
        let (beta, lambda) = p.gates(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(beta.iter().all(|&v| v > 1.0 - 1e-8));
        assert!(lambda.iter().all(|&v| v < 1e-8));
    }

    #[test]
    fn init_gate_is_retention_dominant() {
        let p = MemoryProjections::<f32>::init(64, 8, &mut ChaCha8Rng::seed_from_u64(6));
        let (beta, _) = p.gates(&[0.0; 64]).unwrap();
        assert!(beta.iter().all(|&b| (b - 0.119_202_92).abs() < 1e-6));
        assert!(p.fields().iter().all(|(_, t)| t.requires_grad));
    }

    #[test]
    fn tape_rows_match_concrete() {
        let p = random(8, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let x = Tensor::<f64>::uniform(vec![3, 8], 2.0, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let vars = p.bind(&mut binder);
        let xv = tape.leaf(&x);
        let out = vars.project(&mut tape, xv).unwrap();
        for t in 0..3 {
            let row = &x.data()[t * 8..(t + 1) * 8];
            let (q, k) = p.project_qk(row).unwrap();
            let v = p.project_v(row).unwrap();
            let (beta, _) = p.gates(row).unwrap();
            for (var, want) in [(out.query, q), (out.key, k), (out.value, v), (out.beta, beta)] {
                assert_eq!(&tape.value(var)[t * 4..(t + 1) * 4], want.as_slice());
            }
        }
    }

    #[test]
    fn norms_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..50 {
            let p = random(8, 4, 100 + seed);
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (q, k) = p.project_qk(&x).unwrap();
            for v in [q, k] {
                let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                assert!(n <= 1.0);
            }
        }
    }
}
