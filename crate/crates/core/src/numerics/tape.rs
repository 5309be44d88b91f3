use super::{
    as_matrix, dot, gelu, gelu_grad, log_sum_exp, matmul_into, matmul_nt_into, matmul_tn_acc,
    sigmoid, softmax_row, Scalar, Tensor,
};
use crate::error::{Error, Result};
use crate::osam::kernel;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatVec(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    OneMinus(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    L2NormRows { x: Var, eps: T },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: T },
    Softmax { x: Var },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>> },
    GatherRows { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Row { x: Var, index: usize },
    StackRows(Vec<Var>),
    MeanRows { x: Var, rows: Vec<usize> },
    Outer(Var, Var),
    DiagScaleRows { diag: Var, x: Var },
    DeltaWrite { state: Var, key: Var, value: Var, beta: Var },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Append-only computation record. Every operation checks shapes and rejects
/// non-finite results; `backward` replays the record in reverse.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`]; absent entries received no gradient.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are consistent")
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn mat(&self, v: Var) -> (usize, usize) {
        as_matrix(&self.nodes[v.0].shape)
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Result<Var> {
        check_finite(op_name, &value)?;
        let needs_grad = self.parents_need_grad(&op);
        self.nodes.push(Node {
            shape,
            value,
            needs_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents_need_grad(&self, op: &Op<T>) -> bool {
        let g = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::MatVec(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::Outer(a, b) => g(a) || g(b),
            Op::DiagScaleRows { diag, x } => g(diag) || g(x),
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::OneMinus(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Gelu(x)
            | Op::Sum(x) => g(x),
            Op::L2NormRows { x, .. }
            | Op::Softmax { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Row { x, .. }
            | Op::MeanRows { x, .. } => g(x),
            Op::CrossEntropy { logits, .. } => g(logits),
            Op::GatherRows { table, .. } => g(table),
            Op::LayerNorm { x, gain, bias, .. } => g(x) || g(gain) || g(bias),
            Op::ConcatCols(parts) | Op::StackRows(parts) => parts.iter().any(g),
            Op::DeltaWrite {
                state,
                key,
                value,
                beta,
            } => g(state) || g(key) || g(value) || g(beta),
        }
    }

    /// Records a tensor; gradients are tracked iff `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            needs_grad: t.requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, value: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, value)?;
        Ok(self.leaf(&t))
    }

    /// `a[m x k] * b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a), self.value(b), m, k, n, &mut out);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    /// `x * w^T` for `w` stored as `[out, in]`. A rank-1 `x` yields a rank-1 result.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, k) = self.mat(x);
        let sw = self.shape(w);
        if sw.len() != 2 || sw[1] != k {
            return Err(Error::shape(
                "linear",
                format!("{:?} x {sw:?}^T", self.shape(x)),
            ));
        }
        let o = sw[0];
        let mut out = vec![T::zero(); m * o];
        matmul_nt_into(self.value(x), self.value(w), m, k, o, &mut out);
        let shape = if self.shape(x).len() == 1 {
            vec![o]
        } else {
            vec![m, o]
        };
        self.push("linear", shape, out, Op::MatMulNT(x, w))
    }

    /// `m[r x c] * x[c]`.
    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var> {
        let (sm, sx) = (self.shape(m), self.shape(x));
        if sm.len() != 2 || sx.len() != 1 || sm[1] != sx[0] {
            return Err(Error::shape("matvec", format!("{sm:?} x {sx:?}")));
        }
        let (r, c) = (sm[0], sm[1]);
        let (mv, xv) = (self.value(m), self.value(x));
        let out: Vec<T> = (0..r).map(|i| dot(&mv[i * c..(i + 1) * c], xv)).collect();
        self.push("matvec", vec![r], out, Op::MatVec(m, x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        self.push("transpose", vec![n, m], out, Op::Transpose(x))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the vector `b[n]` to every row of `x[m x n]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.mat(x);
        if self.shape(b) != [n] {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", self.shape(x), self.shape(b)),
            ));
        }
        let (xv, bv) = (self.value(x), self.value(b));
        let out = (0..m * n).map(|i| xv[i] + bv[i % n]).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_row", shape, out, Op::AddRow(x, b))
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(name, shape, out, op)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.map("scale", x, |v| v * factor, Op::Scale(x, factor))
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.map("one_minus", x, |v| T::one() - v, Op::OneMinus(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, T::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map("gelu", x, gelu, Op::Gelu(x))
    }

    /// Row-wise `x / (||x|| + eps)`.
    pub fn l2norm_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let (m, n) = self.mat(x);
        let xv = self.value(x);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            out[i * n..(i + 1) * n].copy_from_slice(&super::l2norm_eps(row, eps));
        }
        let shape = self.shape(x).to_vec();
        self.push("l2norm", shape, out, Op::L2NormRows { x, eps })
    }

    /// Row-wise layer normalization with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (m, n) = self.mat(x);
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape("layer_norm", format!("{:?}", self.shape(x))));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let mut out = vec![T::zero(); m * n];
        let nf = T::of(n as f64);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push("layer_norm", shape, out, Op::LayerNorm { x, gain, bias, eps })
    }

    /// Softmax over the last axis. With `causal`, row `i` only covers columns `0..=i`.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (m, n) = self.mat(x);
        let xv = self.value(x);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let live = if causal { (i + 1).min(n) } else { n };
            softmax_row(&xv[i * n..(i + 1) * n], live, &mut out[i * n..(i + 1) * n]);
        }
        let shape = self.shape(x).to_vec();
        self.push("softmax", shape, out, Op::Softmax { x })
    }

    /// Summed cross-entropy over rows with a target; rows with `None` are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.mat(logits);
        if targets.len() != m {
            return Err(Error::shape(
                "cross_entropy",
                format!("{m} rows, {} targets", targets.len()),
            ));
        }
        let lv = self.value(logits);
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= n {
                    return Err(Error::Index { index: t, extent: n });
                }
                let row = &lv[i * n..(i + 1) * n];
                total = total + log_sum_exp(row) - row[t];
            }
        }
        self.push(
            "cross_entropy",
            vec![1],
            vec![total],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Selects rows of `table[v x n]` by index.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, n) = self.mat(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { index: id, extent: v });
            }
            out.extend_from_slice(&tv[id * n..(id + 1) * n]);
        }
        self.push(
            "gather_rows",
            vec![ids.len(), n],
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Columns `start..start + len` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat(x);
        if start + len > n {
            return Err(Error::Index {
                index: start + len,
                extent: n,
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let shape = if self.shape(x).len() == 1 {
            vec![len]
        } else {
            vec![m, len]
        };
        self.push("slice_cols", shape, out, Op::SliceCols { x, start })
    }

    /// Concatenates along the last axis; all parts share the row count and rank.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let rank = self.shape(first).len();
        let (m, _) = self.mat(first);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.mat(p);
            if pm != m || self.shape(p).len() != rank {
                return Err(Error::shape("concat_cols", format!("{:?}", self.shape(p))));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![m, total] };
        self.push("concat_cols", shape, out, Op::ConcatCols(parts.to_vec()))
    }

    /// Row `index` of a matrix as a rank-1 tensor.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let (m, n) = self.mat(x);
        if index >= m {
            return Err(Error::Index { index, extent: m });
        }
        let out = self.value(x)[index * n..(index + 1) * n].to_vec();
        self.push("row", vec![n], out, Op::Row { x, index })
    }

    /// Stacks rank-1 tensors of equal length into a matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("stack_rows", "no inputs"))?;
        let n = self.shape(first).iter().product::<usize>();
        let mut out = Vec::with_capacity(parts.len() * n);
        for &p in parts {
            if self.shape(p) != [n] {
                return Err(Error::shape("stack_rows", format!("{:?}", self.shape(p))));
            }
            out.extend_from_slice(self.value(p));
        }
        self.push("stack_rows", vec![parts.len(), n], out, Op::StackRows(parts.to_vec()))
    }

    /// Mean of the selected rows, as a rank-1 tensor.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.mat(x);
        if rows.is_empty() {
            return Err(Error::EmptySegment(0));
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); n];
        for &r in rows {
            if r >= m {
                return Err(Error::Index { index: r, extent: m });
            }
            for (o, &v) in out.iter_mut().zip(&xv[r * n..(r + 1) * n]) {
                *o = *o + v;
            }
        }
        let count = T::of(rows.len() as f64);
        out.iter_mut().for_each(|o| *o = *o / count);
        self.push(
            "mean_rows",
            vec![n],
            out,
            Op::MeanRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// `a b^T` for rank-1 inputs.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 1 || sb.len() != 1 {
            return Err(Error::shape("outer", format!("{sa:?} x {sb:?}")));
        }
        let (m, n) = (sa[0], sb[0]);
        let (av, bv) = (self.value(a), self.value(b));
        let out = (0..m * n).map(|i| av[i / n] * bv[i % n]).collect();
        self.push("outer", vec![m, n], out, Op::Outer(a, b))
    }

    /// `Diag(d) x`: scales row `i` of `x` by `d[i]`.
    pub fn diag_scale_rows(&mut self, diag: Var, x: Var) -> Result<Var> {
        let (m, n) = self.mat(x);
        if self.shape(diag) != [m] {
            return Err(Error::shape(
                "diag_scale_rows",
                format!("{:?} . {:?}", self.shape(diag), self.shape(x)),
            ));
        }
        let (dv, xv) = (self.value(diag), self.value(x));
        let out = (0..m * n).map(|i| dv[i / n] * xv[i]).collect();
        let shape = self.shape(x).to_vec();
        self.push("diag_scale_rows", shape, out, Op::DiagScaleRows { diag, x })
    }

    /// Fused gated delta-rule write with retention `1 - beta`.
    pub fn delta_write(&mut self, state: Var, key: Var, value: Var, beta: Var) -> Result<Var> {
        let ss = self.shape(state);
        let r = ss.first().copied().unwrap_or(0);
        if ss != [r, r] || self.shape(key) != [r] || self.shape(value) != [r] || self.shape(beta) != [r] {
            return Err(Error::shape(
                "delta_write",
                format!(
                    "S {:?}, k {:?}, v {:?}, beta {:?}",
                    ss,
                    self.shape(key),
                    self.shape(value),
                    self.shape(beta)
                ),
            ));
        }
        let mut out = vec![T::zero(); r * r];
        kernel::write(
            self.value(state),
            self.value(key),
            self.value(value),
            self.value(beta),
            &mut out,
        );
        self.push(
            "delta_write",
            vec![r, r],
            out,
            Op::DeltaWrite {
                state,
                key,
                value,
                beta,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).iter().copied().sum();
        self.push("sum", vec![1], vec![total], Op::Sum(x))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss has shape {:?}", self.shape(loss)),
            ));
        }
        self.backward_with(loss, vec![T::one()])
    }

    /// Reverse pass with an explicit output cotangent.
    pub fn backward_with(&self, out: Var, seed: Vec<T>) -> Result<Gradients<T>> {
        if seed.len() != self.nodes[out.0].value.len() {
            return Err(Error::shape("backward", "seed length"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for id in (0..=out.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.mat(*a);
                let n = self.mat(*b).1;
                if let Some(da) = self.acc(grads, *a) {
                    let mut tmp = vec![T::zero(); m * k];
                    matmul_nt_into(g, self.value(*b), m, n, k, &mut tmp);
                    add_into(da, &tmp);
                }
                if let Some(db) = self.acc(grads, *b) {
                    matmul_tn_acc(self.value(*a), g, m, k, n, db);
                }
            }
            Op::MatMulNT(x, w) => {
                let (m, k) = self.mat(*x);
                let o = self.mat(*w).0;
                if let Some(dx) = self.acc(grads, *x) {
                    let mut tmp = vec![T::zero(); m * k];
                    matmul_into(g, self.value(*w), m, o, k, &mut tmp);
                    add_into(dx, &tmp);
                }
                if let Some(dw) = self.acc(grads, *w) {
                    matmul_tn_acc(g, self.value(*x), m, o, k, dw);
                }
            }
            Op::MatVec(m, x) => {
                let (r, c) = self.mat(*m);
                if let Some(dm) = self.acc(grads, *m) {
                    let xv = self.value(*x);
                    for i in 0..r {
                        for j in 0..c {
                            dm[i * c + j] = dm[i * c + j] + g[i] * xv[j];
                        }
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let mv = self.value(*m);
                    for i in 0..r {
                        for j in 0..c {
                            dx[j] = dx[j] + g[i] * mv[i * c + j];
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (m, n) = self.mat(*x);
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = dx[i * n + j] + g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d - gv);
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    let bv = self.value(*b);
                    for i in 0..g.len() {
                        da[i] = da[i] + g[i] * bv[i];
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    let av = self.value(*a);
                    for i in 0..g.len() {
                        db[i] = db[i] + g[i] * av[i];
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(dx) = self.acc(grads, *x) {
                    add_into(dx, g);
                }
                let n = self.mat(*x).1;
                if let Some(db) = self.acc(grads, *b) {
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % n] = db[i % n] + gv;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv * *c);
                }
            }
            Op::OneMinus(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d - gv);
                }
            }
            Op::Tanh(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        dx[i] = dx[i] + g[i] * (T::one() - y[i] * y[i]);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        dx[i] = dx[i] + g[i] * y[i] * (T::one() - y[i]);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        dx[i] = dx[i] + g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::L2NormRows { x, eps } => {
                let (m, n) = self.mat(*x);
                let xv = self.value(*x);
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..m {
                        let row = &xv[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let norm = dot(row, row).sqrt();
                        let denom = norm + *eps;
                        if denom == T::zero() {
                            continue;
                        }
                        let xg = dot(row, gr);
                        let coef = if norm > T::zero() {
                            xg / (norm * denom * denom)
                        } else {
                            T::zero()
                        };
                        for j in 0..n {
                            dx[i * n + j] = dx[i * n + j] + gr[j] / denom - row[j] * coef;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (m, n) = self.mat(*x);
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let nf = T::of(n as f64);
                let mut dgain = vec![T::zero(); n];
                let mut dbias = vec![T::zero(); n];
                let mut dxs = vec![T::zero(); m * n];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let mean = row.iter().copied().sum::<T>() / nf;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                    let inv = T::one() / (var + *eps).sqrt();
                    let xhat: Vec<T> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let dxhat: Vec<T> = (0..n).map(|j| gr[j] * gv[j]).collect();
                    let mean_d = dxhat.iter().copied().sum::<T>() / nf;
                    let mean_dx = dot(&dxhat, &xhat) / nf;
                    for j in 0..n {
                        dgain[j] = dgain[j] + gr[j] * xhat[j];
                        dbias[j] = dbias[j] + gr[j];
                        dxs[i * n + j] = inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    add_into(dx, &dxs);
                }
                if let Some(dg) = self.acc(grads, *gain) {
                    add_into(dg, &dgain);
                }
                if let Some(db) = self.acc(grads, *bias) {
                    add_into(db, &dbias);
                }
            }
            Op::Softmax { x, .. } => {
                let (m, n) = self.mat(*x);
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let s = dot(yr, gr);
                        for j in 0..n {
                            dx[i * n + j] = dx[i * n + j] + yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let (_, n) = self.mat(*logits);
                let lv = self.value(*logits);
                let scale = g[0];
                if let Some(dl) = self.acc(grads, *logits) {
                    let mut probs = vec![T::zero(); n];
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        softmax_row(&lv[i * n..(i + 1) * n], n, &mut probs);
                        for j in 0..n {
                            let ind = if j == t { T::one() } else { T::zero() };
                            dl[i * n + j] = dl[i * n + j] + scale * (probs[j] - ind);
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let n = self.mat(*table).1;
                if let Some(dt) = self.acc(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * n..(id + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.mat(*x);
                let len = g.len() / m.max(1);
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..m {
                        add_into(
                            &mut dx[i * n + start..i * n + start + len],
                            &g[i * len..(i + 1) * len],
                        );
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = as_matrix(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let w = self.mat(p).1;
                    if let Some(dp) = self.acc(grads, p) {
                        for i in 0..m {
                            add_into(
                                &mut dp[i * w..(i + 1) * w],
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::Row { x, index } => {
                let n = self.mat(*x).1;
                if let Some(dx) = self.acc(grads, *x) {
                    add_into(&mut dx[index * n..(index + 1) * n], g);
                }
            }
            Op::StackRows(parts) => {
                let n = node.shape[1];
                for (i, &p) in parts.iter().enumerate() {
                    if let Some(dp) = self.acc(grads, p) {
                        add_into(dp, &g[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::MeanRows { x, rows } => {
                let n = self.mat(*x).1;
                let count = T::of(rows.len() as f64);
                if let Some(dx) = self.acc(grads, *x) {
                    for &r in rows {
                        for j in 0..n {
                            dx[r * n + j] = dx[r * n + j] + g[j] / count;
                        }
                    }
                }
            }
            Op::Outer(a, b) => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..m {
                        da[i] = da[i] + dot(&g[i * n..(i + 1) * n], bv);
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for i in 0..m {
                        for j in 0..n {
                            db[j] = db[j] + g[i * n + j] * av[i];
                        }
                    }
                }
            }
            Op::DiagScaleRows { diag, x } => {
                let (m, n) = self.mat(*x);
                let (dv, xv) = (self.value(*diag), self.value(*x));
                if let Some(dd) = self.acc(grads, *diag) {
                    for i in 0..m {
                        dd[i] = dd[i] + dot(&g[i * n..(i + 1) * n], &xv[i * n..(i + 1) * n]);
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..m * n {
                        dx[i] = dx[i] + g[i] * dv[i / n];
                    }
                }
            }
            Op::DeltaWrite {
                state,
                key,
                value,
                beta,
            } => {
                let r = node.shape[0];
                let mut ds = vec![T::zero(); r * r];
                let mut dk = vec![T::zero(); r];
                let mut dv = vec![T::zero(); r];
                let mut db = vec![T::zero(); r];
                kernel::write_backward(
                    self.value(*state),
                    self.value(*key),
                    self.value(*value),
                    self.value(*beta),
                    g,
                    kernel::WriteGrads {
                        state: &mut ds,
                        key: &mut dk,
                        value: &mut dv,
                        beta: &mut db,
                    },
                );
                for (v, d) in [(*state, ds), (*key, dk), (*value, dv), (*beta, db)] {
                    if let Some(acc) = self.acc(grads, v) {
                        add_into(acc, &d);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
