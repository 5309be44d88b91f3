//! Online state of associative memory.
//!
//! Each sub-state is an `r x r` matrix `S` read as `S q` and written with the
//! dimension-wise gated delta rule
//!
//! ```text
//! S' = Diag(1 - beta) S + Diag(beta) (v - S k) k^T
//! ```
//!
//! which is one gated SGD step on `0.5 * ||S k - v||^2`. The retention gate is
//! always derived from the write gate at write time.

use crate::error::{Error, Result};
use crate::numerics::{dot, Scalar, Tensor};

/// Slice kernels shared by the tensor API and the tape.
pub(crate) mod kernel {
    use crate::numerics::{dot, Scalar};

    pub(crate) fn write<T: Scalar>(s: &[T], k: &[T], v: &[T], beta: &[T], out: &mut [T]) {
        let r = k.len();
        for i in 0..r {
            let row = &s[i * r..(i + 1) * r];
            let err = v[i] - dot(row, k);
            let keep = T::one() - beta[i];
            let gain = beta[i] * err;
            for j in 0..r {
                out[i * r + j] = keep * row[j] + gain * k[j];
            }
        }
    }

    pub(crate) struct WriteGrads<'a, T> {
        pub state: &'a mut [T],
        pub key: &'a mut [T],
        pub value: &'a mut [T],
        pub beta: &'a mut [T],
    }

    /// Cotangents of [`write`] given `g = dL/dS'`.
    pub(crate) fn write_backward<T: Scalar>(
        s: &[T],
        k: &[T],
        v: &[T],
        beta: &[T],
        g: &[T],
        out: WriteGrads<'_, T>,
    ) {
        let r = k.len();
        for i in 0..r {
            let row = &s[i * r..(i + 1) * r];
            let grow = &g[i * r..(i + 1) * r];
            let err = v[i] - dot(row, k);
            let gk = dot(grow, k);
            let keep = T::one() - beta[i];
            let mut dbeta = T::zero();
            for j in 0..r {
                out.state[i * r + j] = keep * grow[j] - beta[i] * gk * k[j];
                dbeta = dbeta + grow[j] * (err * k[j] - row[j]);
                out.key[j] = out.key[j] + beta[i] * (err * grow[j] - gk * row[j]);
            }
            out.beta[i] = dbeta;
            out.value[i] = beta[i] * gk;
        }
    }
}

fn check_square<T: Scalar>(s: &Tensor<T>) -> Result<usize> {
    match s.shape() {
        [a, b] if a == b => Ok(*a),
        other => Err(Error::shape("osam", format!("state must be square, got {other:?}"))),
    }
}

fn check_vec<T>(name: &'static str, x: &[T], r: usize) -> Result<()> {
    if x.len() != r {
        return Err(Error::shape(name, format!("expected length {r}, got {}", x.len())));
    }
    Ok(())
}

/// One gated delta-rule write; `S` is returned unchanged in shape.
pub fn delta_write<T: Scalar>(s: &Tensor<T>, key: &[T], value: &[T], beta: &[T]) -> Result<Tensor<T>> {
    let r = check_square(s)?;
    check_vec("delta_write", key, r)?;
    check_vec("delta_write", value, r)?;
    check_vec("delta_write", beta, r)?;
    if !(key.iter().chain(value).chain(beta).all(|x| x.is_finite()) && s.is_finite()) {
        return Err(Error::NonFinite("delta_write"));
    }
    let mut out = vec![T::zero(); r * r];
    kernel::write(s.data(), key, value, beta, &mut out);
    if !out.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("delta_write"));
    }
    Tensor::matrix(r, r, out)
}

/// Row `i` of a delta-rule write:
/// `s' = (1 - beta_i) s + beta_i (v_i - s . k) k`.
pub fn row_write<T: Scalar>(row: &[T], i: usize, key: &[T], value: &[T], beta: &[T]) -> Result<Vec<T>> {
    let r = row.len();
    check_vec("row_write", key, r)?;
    if i >= value.len() || i >= beta.len() {
        return Err(Error::Index {
            index: i,
            extent: value.len().min(beta.len()),
        });
    }
    let err = value[i] - dot(row, key);
    let keep = T::one() - beta[i];
    Ok(row
        .iter()
        .zip(key)
        .map(|(&s, &k)| keep * s + beta[i] * err * k)
        .collect())
}

/// `0.5 * ||S k - v||^2`, the loss whose gated SGD step the write performs.
pub fn online_regression_loss<T: Scalar>(s: &Tensor<T>, key: &[T], value: &[T]) -> Result<T> {
    let r = check_square(s)?;
    check_vec("online_regression_loss", key, r)?;
    check_vec("online_regression_loss", value, r)?;
    let half = T::of(0.5);
    Ok((0..r)
        .map(|i| {
            let e = dot(&s.data()[i * r..(i + 1) * r], key) - value[i];
            e * e
        })
        .sum::<T>()
        * half)
}

/// The `N` sub-states of one hooked layer. Fixed shape for the lifetime of a
/// sequence; `N = 1` except under multi-state writes.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineState<T = f32> {
    rank: usize,
    states: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> OnlineState<T> {
    /// Empty memory: every sub-state is zero.
    pub fn zeros(rank: usize, n_states: usize) -> Self {
        Self {
            rank,
            states: (0..n_states).map(|_| Tensor::zeros(vec![rank, rank])).collect(),
            step: 0,
        }
    }

    pub fn from_parts(rank: usize, states: Vec<Tensor<T>>, step: u64) -> Result<Self> {
        for s in &states {
            if s.shape() != [rank, rank] {
                return Err(Error::shape("OnlineState", format!("{:?}", s.shape())));
            }
        }
        Ok(Self { rank, states, step })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    /// Number of writes applied so far (diagnostic only).
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn states(&self) -> &[Tensor<T>] {
        &self.states
    }

    pub fn sub_state(&self, i: usize) -> &Tensor<T> {
        &self.states[i]
    }

    /// `Concat_i(S_i q_i)`; one query per sub-state.
    pub fn read(&self, queries: &[&[T]]) -> Result<Vec<T>> {
        if queries.len() != self.states.len() {
            return Err(Error::StateCount {
                expected: self.states.len(),
                got: queries.len(),
            });
        }
        let r = self.rank;
        let mut out = Vec::with_capacity(r * queries.len());
        for (s, q) in self.states.iter().zip(queries) {
            check_vec("read", q, r)?;
            out.extend((0..r).map(|i| dot(&s.data()[i * r..(i + 1) * r], q)));
        }
        Ok(out)
    }

    /// Writes into sub-state `i`.
    pub fn write(&mut self, i: usize, key: &[T], value: &[T], beta: &[T]) -> Result<()> {
        let n = self.states.len();
        let s = self.states.get(i).ok_or(Error::Index { index: i, extent: n })?;
        self.states[i] = delta_write(s, key, value, beta)?;
        self.step += 1;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().all(Tensor::is_finite)
    }

    pub(crate) fn replace(&mut self, states: Vec<Tensor<T>>, writes: u64) {
        self.states = states;
        self.step += writes;
    }
}

/// Online states of every hooked layer for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState<T = f32> {
    pub layers: Vec<(usize, OnlineState<T>)>,
}

impl<T: Scalar> MemoryState<T> {
    pub fn zeros(hooked_layers: &[usize], rank: usize, n_states: usize) -> Self {
        Self {
            layers: hooked_layers
                .iter()
                .map(|&l| (l, OnlineState::zeros(rank, n_states)))
                .collect(),
        }
    }

    pub fn layer(&self, layer: usize) -> Option<&OnlineState<T>> {
        self.layers.iter().find(|(l, _)| *l == layer).map(|(_, s)| s)
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|(_, s)| s.is_finite())
    }

    /// Bitwise equality of every state entry.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|((la, a), (lb, b))| {
                la == lb
                    && a.n_states() == b.n_states()
                    && a.states.iter().zip(&b.states).all(|(x, y)| {
                        x.data()
                            .iter()
                            .zip(y.data())
                            .all(|(p, q)| p.as_f64().to_bits() == q.as_f64().to_bits())
                    })
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2norm_eps;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Retain, erase and write terms evaluated separately with explicit loops.
    fn three_term_oracle(s: &[f64], k: &[f64], v: &[f64], beta: &[f64]) -> Vec<f64> {
        let r = k.len();
        let mut sk = vec![0.0; r];
        for i in 0..r {
            for j in 0..r {
                sk[i] += s[i * r + j] * k[j];
            }
        }
        let mut out = vec![0.0; r * r];
        for i in 0..r {
            for j in 0..r {
                let retain = (1.0 - beta[i]) * s[i * r + j];
                let erase = beta[i] * sk[i] * k[j];
                let write = beta[i] * v[i] * k[j];
                out[i * r + j] = retain - erase + write;
            }
        }
        out
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
    }

    #[test]
    fn pure_write_from_empty_state() {
        let s = Tensor::<f64>::zeros(vec![2, 2]);
        let out = delta_write(&s, &[1.0, 0.0], &[3.0, -1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(out.data(), &[3.0, 0.0, -1.0, 0.0]);
        let state = OnlineState::from_parts(2, vec![out], 1).unwrap();
        assert_eq!(state.read(&[&[1.0, 0.0]]).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn zero_gate_keeps_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Tensor::<f64>::uniform(vec![4, 4], 1.0, &mut rng);
        let k = random_vec(&mut rng, 4, 1.0);
        let v = random_vec(&mut rng, 4, 3.0);
        let out = delta_write(&s, &k, &v, &[0.0; 4]).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn matches_three_term_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let s = Tensor::<f64>::uniform(vec![4, 4], 1.0, &mut rng);
        let k = l2norm_eps(&random_vec(&mut rng, 4, 1.0), 0.0);
        let v = random_vec(&mut rng, 4, 2.0);
        let beta: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
        let expect = three_term_oracle(s.data(), &k, &v, &beta);
        let got = delta_write(&s, &k, &v, &beta).unwrap();
        for (g, e) in got.data().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn row_write_cases() {
        let k = [0.6, 0.8];
        assert_eq!(
            row_write(&[1.0, 2.0], 0, &k, &[5.0, 5.0], &[0.0, 0.0]).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            row_write(&[0.0, 0.0], 1, &k, &[1.0, 2.0], &[0.0, 1.0]).unwrap(),
            vec![2.0 * 0.6, 2.0 * 0.8]
        );
        assert!(matches!(
            row_write(&[0.0, 0.0], 2, &k, &[1.0, 2.0], &[0.0, 1.0]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn rows_stack_to_matrix_write() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let s = Tensor::<f64>::uniform(vec![3, 3], 1.0, &mut rng);
        let k = l2norm_eps(&random_vec(&mut rng, 3, 1.0), 0.0);
        let v = random_vec(&mut rng, 3, 2.0);
        let beta: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
        let full = delta_write(&s, &k, &v, &beta).unwrap();
        for i in 0..3 {
            let row = row_write(&s.data()[i * 3..(i + 1) * 3], i, &k, &v, &beta).unwrap();
            for j in 0..3 {
                assert!((row[j] - full.data()[i * 3 + j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn regression_loss_cases() {
        let k = [0.6f64, 0.8];
        let v = [2.0f64, -1.0];
        let mut data = vec![0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                data[i * 2 + j] = v[i] * k[j];
            }
        }
        let stored = Tensor::matrix(2, 2, data).unwrap();
        assert!(online_regression_loss(&stored, &k, &v).unwrap().abs() < 1e-15);
        let empty = Tensor::<f64>::zeros(vec![2, 2]);
        assert_eq!(online_regression_loss(&empty, &k, &v).unwrap(), 2.5);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Tensor::<f64>::uniform(vec![3, 3], 1.0, &mut rng);
        let k = random_vec(&mut rng, 3, 1.0);
        let v = random_vec(&mut rng, 3, 1.0);
        let mut expect = 0.0;
        for i in 0..3 {
            let mut p = 0.0;
            for j in 0..3 {
                p += s.data()[i * 3 + j] * k[j];
            }
            expect += 0.5 * (p - v[i]) * (p - v[i]);
        }
        assert!((online_regression_loss(&s, &k, &v).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn write_is_one_gated_sgd_step() {
        // With a scalar gate and no retention loss, the write equals S - beta * dL/dS.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = Tensor::<f64>::uniform(vec![3, 3], 1.0, &mut rng);
        let k = random_vec(&mut rng, 3, 1.0);
        let v = random_vec(&mut rng, 3, 1.0);
        let b = 0.3;
        let got = delta_write(&s, &k, &v, &[b; 3]).unwrap();
        let grad = crate::numerics::finite_diff_grad(
            |t| online_regression_loss(t, &k, &v).unwrap(),
            &s,
            1e-6,
        )
        .unwrap();
        for i in 0..9 {
            let sgd = s.data()[i] - b * grad.data()[i];
            // The gated form also decays the state by (1 - beta).
            let expect = sgd - b * s.data()[i];
            assert!((got.data()[i] - expect).abs() < 1e-8);
        }
    }

    #[test]
    fn read_checks_sub_state_count() {
        let st = OnlineState::<f32>::zeros(2, 2);
        assert!(matches!(
            st.read(&[&[1.0, 0.0]]),
            Err(Error::StateCount { expected: 2, got: 1 })
        ));
        assert_eq!(st.read(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn non_finite_write_is_rejected() {
        let s = Tensor::<f32>::zeros(vec![2, 2]);
        assert!(matches!(
            delta_write(&s, &[f32::NAN, 0.0], &[1.0, 1.0], &[0.5, 0.5]),
            Err(Error::NonFinite(_))
        ));
    }
}
