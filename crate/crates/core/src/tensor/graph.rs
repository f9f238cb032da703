//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only for the duration of one
//! forward/backward pass. Every operation appends a node; `backward` walks the
//! nodes in exact reverse order and accumulates into per-parameter buffers.

use super::array::{Result, Tensor, TensorError};
use super::params::{Gradients, ParamId, ParamStore};
use super::real::{gemm, MatView, Real};

/// Value written into masked attention logits before the softmax.
pub const MASK_SENTINEL: f64 = -1e9;

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
pub(crate) const GELU_A: f64 = 0.044_715;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Attention visibility pattern applied by [`Graph::mask_fill`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    /// Row `r` sees columns `0..=r`.
    Causal,
    /// Causal inside consecutive blocks of the given size, nothing across blocks.
    BlockCausal(usize),
    /// Row `r` sees columns `0..=r + offset`; used when earlier keys come from a cache.
    CausalOffset(usize),
}

impl AttnMask {
    #[inline]
    pub fn is_masked(self, r: usize, c: usize) -> bool {
        match self {
            AttnMask::Causal => c > r,
            AttnMask::BlockCausal(b) => c > r || r / b != c / b,
            AttnMask::CausalOffset(o) => c > r + o,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    Add(Var, Var),
    AddRow { a: Var, bias: Var },
    Scale(Var, T),
    Gelu(Var),
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    InterleaveRows(Vec<Var>),
    StridedRows { a: Var, offset: usize, stride: usize },
    MaskFill { a: Var, mask: AttnMask },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    /// `None` for parameters, whose value lives in the store.
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of differentiable operations for one forward pass.
pub struct Graph<'p, T: Real = f32> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("only parameter nodes are stored by reference"),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, node_op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op, detail: format!(" in output of shape {:?}", value.shape()) });
        }
        self.nodes.push(Node { value: Some(value), op: node_op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let trainable = self.params.is_trainable(id);
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: trainable });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool, op: &'static str) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ar, ac) = av.dims2();
        let (br, bc) = bv.dims2();
        let mut va = MatView::new(av.data(), ar, ac);
        let mut vb = MatView::new(bv.data(), br, bc);
        if ta {
            va = va.t();
        }
        if tb {
            vb = vb.t();
        }
        let (m, k) = va.dims();
        let (kb, n) = vb.dims();
        if k != kb {
            return Err(TensorError::Shape { op, lhs: av.shape().to_vec(), rhs: bv.shape().to_vec() });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(va, vb, &mut out, false);
        let needs = self.needs(a) || self.needs(b);
        self.push(op, Tensor::new(&[m, n], out)?, Op::MatMul { a, b, ta, tb }, needs)
    }

    /// `a[m x k] * b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false, "matmul")
    }

    /// `a[m x k] * b[n x k]^T`, without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true, "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        let needs = self.needs(a);
        self.push("transpose", out, Op::Transpose(a), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims2() != bv.dims2() {
            return Err(TensorError::Shape { op: "add", lhs: av.shape().to_vec(), rhs: bv.shape().to_vec() });
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(av.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("add", out, Op::Add(a, b), needs)
    }

    /// Adds a length-`n` row vector to every row of `a[m x n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let (m, n) = av.dims2();
        if bv.len() != n {
            return Err(TensorError::Shape { op: "add_row", lhs: av.shape().to_vec(), rhs: bv.shape().to_vec() });
        }
        let b = bv.data();
        let mut data = av.data().to_vec();
        for r in 0..m {
            for (x, y) in data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *x += *y;
            }
        }
        let out = Tensor::new(av.shape(), data)?;
        let needs = self.needs(a) || self.needs(bias);
        self.push("add_row", out, Op::AddRow { a, bias }, needs)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::lit(factor);
        let out = self.value(a).map(|x| x * f);
        let needs = self.needs(a);
        self.push("scale", out, Op::Scale(a, f), needs)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
        let out = self.value(a).map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let needs = self.needs(a);
        self.push("gelu", out, Op::Gelu(a), needs)
    }

    /// Numerically stable softmax along `axis` (0 = down columns, 1 = along rows).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.rank().min(2) {
            return Err(TensorError::invalid("softmax", format!("axis {axis} out of range for rank {}", av.rank())));
        }
        if !av.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax", detail: " in input".into() });
        }
        let axis = softmax_axis(av, axis);
        let out = softmax_values(av, axis);
        let needs = self.needs(a);
        self.push("softmax", out, Op::Softmax { a, axis }, needs)
    }

    /// Row-wise layer normalization with affine `gain`/`bias`; zero-variance rows map to `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (m, n) = xv.dims2();
        if gv.len() != n || bv.len() != n {
            return Err(TensorError::Shape { op: "layer_norm", lhs: xv.shape().to_vec(), rhs: gv.shape().to_vec() });
        }
        let eps = T::lit(eps);
        let nf = T::lit(n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push("layer_norm", out, Op::LayerNorm { x, gain, bias, xhat, rstd }, needs)
    }

    /// Gathers rows `ids` of `table[V x d]` into a `len x d` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = tv.dims2();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Index { op: "embedding", index: id, bound: vocab });
            }
            data.extend_from_slice(tv.row(id));
        }
        if ids.is_empty() {
            return Err(TensorError::invalid("embedding", "empty id list"));
        }
        let out = Tensor::new(&[ids.len(), d], data)?;
        let needs = self.needs(table);
        self.push("embedding", out, Op::Embedding { table, ids: ids.to_vec() }, needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::invalid("concat_rows", "no inputs"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(TensorError::Shape { op: "concat_rows", lhs: vec![rows, cols], rhs: v.shape().to_vec() });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push("concat_rows", Tensor::new(&[rows, cols], data)?, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::invalid("concat_cols", "no inputs"))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(TensorError::Shape { op: "concat_cols", lhs: vec![rows, total], rhs: v.shape().to_vec() });
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push("concat_cols", Tensor::new(&[rows, total], data)?, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.dims2();
        if start + len > m || len == 0 {
            return Err(TensorError::Index { op: "slice_rows", index: start + len, bound: m });
        }
        let out = Tensor::new(&[len, n], av.data()[start * n..(start + len) * n].to_vec())?;
        let needs = self.needs(a);
        self.push("slice_rows", out, Op::SliceRows { a, start }, needs)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.dims2();
        if start + len > n || len == 0 {
            return Err(TensorError::Index { op: "slice_cols", index: start + len, bound: n });
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let needs = self.needs(a);
        self.push("slice_cols", Tensor::new(&[m, len], data)?, Op::SliceCols { a, start }, needs)
    }

    /// Interleaves equally shaped `[t x d]` parts: output row `k * parts.len() + j` is row `k` of part `j`.
    pub fn interleave_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::invalid("interleave_rows", "no inputs"))?;
        let dims = self.value(*first).dims2();
        for &p in parts {
            if self.value(p).dims2() != dims {
                return Err(TensorError::Shape {
                    op: "interleave_rows",
                    lhs: vec![dims.0, dims.1],
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let (t, d) = dims;
        let mut data = Vec::with_capacity(t * d * parts.len());
        for k in 0..t {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(k));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let out = Tensor::new(&[t * parts.len(), d], data)?;
        self.push("interleave_rows", out, Op::InterleaveRows(parts.to_vec()), needs)
    }

    /// Rows `offset, offset + stride, ...` of `a`.
    pub fn strided_rows(&mut self, a: Var, offset: usize, stride: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.dims2();
        if stride == 0 || offset >= m {
            return Err(TensorError::Index { op: "strided_rows", index: offset, bound: m });
        }
        let mut data = Vec::new();
        let mut count = 0;
        for r in (offset..m).step_by(stride) {
            data.extend_from_slice(av.row(r));
            count += 1;
        }
        let needs = self.needs(a);
        self.push("strided_rows", Tensor::new(&[count, n], data)?, Op::StridedRows { a, offset, stride }, needs)
    }

    /// Writes [`MASK_SENTINEL`] into every position hidden by `mask`.
    pub fn mask_fill(&mut self, a: Var, mask: AttnMask) -> Result<Var> {
        if let AttnMask::BlockCausal(0) = mask {
            return Err(TensorError::invalid("mask_fill", "block size must be positive"));
        }
        let av = self.value(a);
        let (m, n) = av.dims2();
        let sentinel = T::lit(MASK_SENTINEL);
        let mut data = av.data().to_vec();
        for r in 0..m {
            for c in 0..n {
                if mask.is_masked(r, c) {
                    data[r * n + c] = sentinel;
                }
            }
        }
        let needs = self.needs(a);
        self.push("mask_fill", Tensor::new(av.shape(), data)?, Op::MaskFill { a, mask }, needs)
    }

    pub fn causal_mask_fill(&mut self, a: Var) -> Result<Var> {
        self.mask_fill(a, AttnMask::Causal)
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of `logits[n x K]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, k) = lv.dims2();
        if targets.len() != n {
            return Err(TensorError::Shape { op: "cross_entropy", lhs: lv.shape().to_vec(), rhs: vec![targets.len()] });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::Index { op: "cross_entropy", index: bad, bound: k });
        }
        if !lv.is_finite() {
            return Err(TensorError::NonFinite { op: "cross_entropy", detail: " in logits".into() });
        }
        let mut probs = vec![T::zero(); n * k];
        let mut loss = 0.0f64;
        for r in 0..n {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &x) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p = *p / z;
            }
            // accumulate in f64: the loss is a long sum of small terms
            loss += (max + z.ln() - row[targets[r]]).as_f64();
        }
        let needs = self.needs(logits);
        let out = Tensor::scalar(T::lit(loss));
        self.push("cross_entropy", out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, needs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|v| v.as_f64()).sum::<f64>();
        let needs = self.needs(a);
        self.push("sum", Tensor::scalar(T::lit(s)), Op::Sum(a), needs)
    }

    /// Back-propagates from the scalar `loss` and returns one buffer per store entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::invalid("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dout) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let shape = self.params.get(*id).shape();
                    param_grads[id.0] = Some(Tensor::new(shape, dout)?);
                }
                Op::MatMul { a, b, ta, tb } => self.back_matmul(&mut grads, &dout, *a, *b, *ta, *tb),
                Op::Transpose(a) => {
                    if self.needs(*a) {
                        let (r, c) = self.value(*a).dims2();
                        let g = slot(&mut grads, *a, r * c);
                        for i in 0..r {
                            for j in 0..c {
                                g[i * c + j] += dout[j * r + i];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.needs(v) {
                            add_into(slot(&mut grads, v, dout.len()), &dout);
                        }
                    }
                }
                Op::AddRow { a, bias } => {
                    if self.needs(*a) {
                        add_into(slot(&mut grads, *a, dout.len()), &dout);
                    }
                    if self.needs(*bias) {
                        let n = self.value(*bias).len();
                        let g = slot(&mut grads, *bias, n);
                        for row in dout.chunks(n) {
                            add_into(g, row);
                        }
                    }
                }
                Op::Scale(a, f) => {
                    if self.needs(*a) {
                        let g = slot(&mut grads, *a, dout.len());
                        for (x, d) in g.iter_mut().zip(&dout) {
                            *x += *d * *f;
                        }
                    }
                }
                Op::Gelu(a) => {
                    if self.needs(*a) {
                        let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
                        let three = T::lit(3.0);
                        let xs = self.value(*a).data();
                        let g = slot(&mut grads, *a, dout.len());
                        for ((gx, &x), &d) in g.iter_mut().zip(xs).zip(&dout) {
                            let th = (c * (x + k * x * x * x)).tanh();
                            let dydx = half * (T::one() + th)
                                + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x);
                            *gx += d * dydx;
                        }
                    }
                }
                Op::Softmax { a, axis } => {
                    if self.needs(*a) {
                        let y = node.value.as_ref().expect("owned value");
                        let (m, n) = y.dims2();
                        let g = slot(&mut grads, *a, m * n);
                        let yd = y.data();
                        if *axis == 1 {
                            for r in 0..m {
                                let s: T = (0..n).map(|c| dout[r * n + c] * yd[r * n + c]).sum();
                                for c in 0..n {
                                    g[r * n + c] += yd[r * n + c] * (dout[r * n + c] - s);
                                }
                            }
                        } else {
                            for c in 0..n {
                                let s: T = (0..m).map(|r| dout[r * n + c] * yd[r * n + c]).sum();
                                for r in 0..m {
                                    g[r * n + c] += yd[r * n + c] * (dout[r * n + c] - s);
                                }
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let gv = self.value(*gain).data();
                    let n = gv.len();
                    let m = rstd.len();
                    if self.needs(*gain) {
                        let g = slot(&mut grads, *gain, n);
                        for r in 0..m {
                            for c in 0..n {
                                g[c] += dout[r * n + c] * xhat[r * n + c];
                            }
                        }
                    }
                    if self.needs(*bias) {
                        let g = slot(&mut grads, *bias, n);
                        for row in dout.chunks(n) {
                            add_into(g, row);
                        }
                    }
                    if self.needs(*x) {
                        let nf = T::lit(n as f64);
                        let g = slot(&mut grads, *x, m * n);
                        let mut dxhat = vec![T::zero(); n];
                        for r in 0..m {
                            for c in 0..n {
                                dxhat[c] = dout[r * n + c] * gv[c];
                            }
                            let mean_d = dxhat.iter().copied().sum::<T>() / nf;
                            let mean_dx = (0..n).map(|c| dxhat[c] * xhat[r * n + c]).sum::<T>() / nf;
                            for c in 0..n {
                                g[r * n + c] += rstd[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx);
                            }
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    if self.needs(*table) {
                        let tv = self.value(*table);
                        let d = tv.cols();
                        let g = slot(&mut grads, *table, tv.len());
                        for (k, &id) in ids.iter().enumerate() {
                            add_into(&mut g[id * d..(id + 1) * d], &dout[k * d..(k + 1) * d]);
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.needs(p) {
                            add_into(slot(&mut grads, p, len), &dout[off..off + len]);
                        }
                        off += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                    let mut off = 0;
                    for &p in parts {
                        let (m, c) = self.value(p).dims2();
                        if self.needs(p) {
                            let g = slot(&mut grads, p, m * c);
                            for r in 0..m {
                                add_into(&mut g[r * c..(r + 1) * c], &dout[r * total + off..r * total + off + c]);
                            }
                        }
                        off += c;
                    }
                }
                Op::SliceRows { a, start } => {
                    if self.needs(*a) {
                        let av = self.value(*a);
                        let n = av.cols();
                        let g = slot(&mut grads, *a, av.len());
                        add_into(&mut g[start * n..start * n + dout.len()], &dout);
                    }
                }
                Op::SliceCols { a, start } => {
                    if self.needs(*a) {
                        let (m, n) = self.value(*a).dims2();
                        let len = dout.len() / m;
                        let g = slot(&mut grads, *a, m * n);
                        for r in 0..m {
                            add_into(&mut g[r * n + start..r * n + start + len], &dout[r * len..(r + 1) * len]);
                        }
                    }
                }
                Op::InterleaveRows(parts) => {
                    let (t, d) = self.value(parts[0]).dims2();
                    let np = parts.len();
                    for (j, &p) in parts.iter().enumerate() {
                        if self.needs(p) {
                            let g = slot(&mut grads, p, t * d);
                            for k in 0..t {
                                let src = (k * np + j) * d;
                                add_into(&mut g[k * d..(k + 1) * d], &dout[src..src + d]);
                            }
                        }
                    }
                }
                Op::StridedRows { a, offset, stride } => {
                    if self.needs(*a) {
                        let av = self.value(*a);
                        let n = av.cols();
                        let g = slot(&mut grads, *a, av.len());
                        for (k, r) in (*offset..av.rows()).step_by(*stride).enumerate() {
                            add_into(&mut g[r * n..(r + 1) * n], &dout[k * n..(k + 1) * n]);
                        }
                    }
                }
                Op::MaskFill { a, mask } => {
                    if self.needs(*a) {
                        let (m, n) = self.value(*a).dims2();
                        let g = slot(&mut grads, *a, m * n);
                        for r in 0..m {
                            for c in 0..n {
                                if !mask.is_masked(r, c) {
                                    g[r * n + c] += dout[r * n + c];
                                }
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    if self.needs(*logits) {
                        let d = dout[0];
                        let k = self.value(*logits).cols();
                        let g = slot(&mut grads, *logits, probs.len());
                        for (r, &t) in targets.iter().enumerate() {
                            for c in 0..k {
                                let onehot = if c == t { T::one() } else { T::zero() };
                                g[r * k + c] += d * (probs[r * k + c] - onehot);
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if self.needs(*a) {
                        let d = dout[0];
                        let g = slot(&mut grads, *a, self.value(*a).len());
                        g.iter_mut().for_each(|x| *x += d);
                    }
                }
            }
        }
        let grads = Gradients::from_vec(param_grads);
        if let Some(id) = grads.first_non_finite() {
            return Err(TensorError::NonFinite {
                op: "backward",
                detail: format!(" in gradient of {}", self.params.name(id)),
            });
        }
        Ok(grads)
    }

    fn back_matmul(&self, grads: &mut [Option<Vec<T>>], dout: &[T], a: Var, b: Var, ta: bool, tb: bool) {
        let (av, bv) = (self.value(a), self.value(b));
        let (ar, ac) = av.dims2();
        let (br, bc) = bv.dims2();
        let mut va = MatView::new(av.data(), ar, ac);
        let mut vb = MatView::new(bv.data(), br, bc);
        if ta {
            va = va.t();
        }
        if tb {
            vb = vb.t();
        }
        let (m, _) = va.dims();
        let (_, n) = vb.dims();
        let dc = MatView::new(dout, m, n);
        if self.needs(a) {
            let g = slot(grads, a, ar * ac);
            if ta {
                // a holds A'^T, so dA = B' dC^T
                gemm(vb, dc.t(), g, true);
            } else {
                gemm(dc, vb.t(), g, true);
            }
        }
        if self.needs(b) {
            let g = slot(grads, b, br * bc);
            if tb {
                gemm(dc.t(), va, g, true);
            } else {
                gemm(va.t(), dc, g, true);
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn softmax_axis<T: Real>(t: &Tensor<T>, axis: usize) -> usize {
    // rank-1 tensors are a single row
    if t.rank() == 1 {
        1
    } else {
        axis
    }
}

/// Stable softmax of a matrix along `axis` (0 or 1), outside any graph.
pub fn softmax_values<T: Real>(t: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (m, n) = t.dims2();
    let x = t.data();
    let mut out = vec![T::zero(); m * n];
    let (outer, inner, so, si) = if axis == 1 { (m, n, n, 1) } else { (n, m, 1, n) };
    for o in 0..outer {
        let idx = |i: usize| o * so + i * si;
        let max = (0..inner).map(|i| x[idx(i)]).fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for i in 0..inner {
            let e = (x[idx(i)] - max).exp();
            out[idx(i)] = e;
            z += e;
        }
        for i in 0..inner {
            out[idx(i)] = out[idx(i)] / z;
        }
    }
    Tensor::new(t.shape(), out).expect("same shape")
}
