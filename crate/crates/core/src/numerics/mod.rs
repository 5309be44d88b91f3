//! Dense tensors, a small set of reference operations, and the reverse-mode
//! tape used to differentiate through the memory recurrence.
//!
//! Tensors are row-major. A rank-1 tensor of extent `n` behaves as a `1 x n`
//! row wherever a matrix is expected.

mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rand::Rng;

use crate::error::{Error, Result};

pub use tape::{Gradients, Tape, Var};

/// Element type tag used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const DTYPE: DType;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite cast")
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Row-major dense tensor with an optional gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self {
            data: (0..numel).map(&mut f).collect(),
            shape,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(vec![n, n], |i| {
            if i / n == i % n {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Uniform values in `[-bound, bound)`.
    pub fn uniform(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Matrix view: `[n]` is one row, `[m, n]` is itself.
    pub fn rows_cols(&self) -> (usize, usize) {
        as_matrix(&self.shape)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|&x| U::of(x.as_f64())).collect()),
        }
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.data, &other.data, m, k, n, &mut out);
        Tensor::new(vec![m, n], out)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| x * factor).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

pub(crate) fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [m, n] => (*m, *n),
        [] => (1, 1),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

/// `out = a[m x k] * b[k x n]`, overwriting `out`.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    out.iter_mut().for_each(|x| *x = T::zero());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// `out = a[m x k] * b[n x k]^T`.
pub(crate) fn matmul_nt_into<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
}

/// `out += a[k x m]^T * b[k x n]`.
pub(crate) fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize, out: &mut [T]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `x / (||x||_2 + eps)`. The zero vector maps to itself.
pub fn l2norm_eps<T: Scalar>(x: &[T], eps: T) -> Vec<T> {
    let norm = dot(x, x).sqrt();
    let denom = norm + eps;
    if denom == T::zero() {
        return vec![T::zero(); x.len()];
    }
    x.iter().map(|&v| v / denom).collect()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + T::of(0.044715) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
}

/// Numerically stable softmax of one row, optionally restricted to the first
/// `live` entries (the rest are set to zero).
pub(crate) fn softmax_row<T: Scalar>(row: &[T], live: usize, out: &mut [T]) {
    let max = row[..live].iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &x) in out[..live].iter_mut().zip(&row[..live]) {
        *o = (x - max).exp();
        total = total + *o;
    }
    for o in out[..live].iter_mut() {
        *o = *o / total;
    }
    for o in out[live..].iter_mut() {
        *o = T::zero();
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

/// Central finite-difference gradient of a scalar function, coordinate by
/// coordinate: `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("finite_diff_grad"));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = dot(a, a).sqrt().max(dot(b, b).sqrt());
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_zero() {
        let id = Tensor::<f32>::identity(2);
        let x = Tensor::matrix(2, 1, vec![3.0, -1.0]).unwrap();
        assert_eq!(id.matmul(&x).unwrap().data(), &[3.0, -1.0]);

        let z = Tensor::<f32>::zeros(vec![2, 2]);
        let y = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(z.matmul(&y).unwrap().data(), &[0.0; 6]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = Tensor::<f32>::uniform(vec![3, 4], 1.0, &mut rng);
            let b = Tensor::<f32>::uniform(vec![4, 2], 1.0, &mut rng);
            let expect = naive_matmul(
                &a.cast::<f64>().into_data(),
                &b.cast::<f64>().into_data(),
                3,
                4,
                2,
            );
            let got = a.matmul(&b).unwrap();
            for (g, e) in got.data().iter().zip(&expect) {
                assert!((*g as f64 - e).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn l2norm_cases() {
        assert_eq!(l2norm_eps(&[0.0f64; 4], 1e-6), vec![0.0; 4]);
        assert_eq!(l2norm_eps(&[3.0f64, 4.0], 0.0), vec![0.6, 0.8]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut sq = 0.0;
        for v in &x {
            sq += v * v;
        }
        let denom = sq.sqrt() + 1e-6;
        let got = l2norm_eps(&x, 1e-6);
        for (g, v) in got.iter().zip(&x) {
            assert!((g - v / denom).abs() < 1e-12);
        }
        let n = dot(&got, &got).sqrt();
        assert!(n <= 1.0);
        assert!((n - sq.sqrt() / denom).abs() < 1e-12);
    }

    #[test]
    fn finite_diff_quadratic_and_constant() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let g = finite_diff_grad(|t| dot(t.data(), t.data()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);

        let g = finite_diff_grad(|_| 7.5, &x, 1e-5).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);

        assert!(finite_diff_grad(|_| f64::NAN, &x, 1e-5).is_err());
    }

    #[test]
    fn softmax_row_sums_to_one() {
        let row = [1.0f64, -3.0, 2.5, 0.0];
        let mut out = [0.0; 4];
        softmax_row(&row, 4, &mut out);
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        softmax_row(&row, 2, &mut out);
        assert!((out[0] + out[1] - 1.0).abs() < 1e-12);
        assert_eq!(out[2], 0.0);
    }
}
