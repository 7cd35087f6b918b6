use super::kernels::{axpy, conv_range, dot, mm_nn, mm_nt, mm_tn, transpose};
use super::{Real, Tensor};
use crate::rng::Stream;
use crate::{Error, Result};
use rand::Rng;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, T),
    Offset(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Conv1d { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanLast(Var),
    Square(Var),
    Rsqrt(Var),
    Log { x: Var, floor: T },
    Dropout { x: Var, mask: Vec<T> },
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Downsample { x: Var, factor: usize, phase: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    grad: bool,
}

/// Execution record for one forward pass.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and the backward sweep simply walks it in reverse.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a node that requires gradients. Leaves that did not
    /// participate in the loss get zeros.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[inline]
fn bcast_index(i: usize, j: usize, br: usize, bc: usize) -> usize {
    (if br == 1 { 0 } else { i }) * bc + if bc == 1 { 0 } else { j }
}

const LN_EPS: f64 = 1e-5;

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let grad = parents.iter().any(|p| self.nodes[p.0].grad);
        self.nodes.push(Node { value, op, grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf without a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| Error::shape(op, format!("expected rank <= 2, got {:?}", self.value(v).shape())))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    fn bcast_dims(&self, a: Var, b: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        let (r, c) = self.dims2(a, op)?;
        let (br, bc) = self.dims2(b, op)?;
        if (br != 1 && br != r) || (bc != 1 && bc != c) {
            return Err(Error::shape(op, format!("cannot broadcast {br}x{bc} over {r}x{c}")));
        }
        Ok((r, c, br, bc))
    }

    fn bcast_apply(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (r, c, br, bc) = self.bcast_dims(a, b, op)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(f(va[i * c + j], vb[bcast_index(i, j, br, bc)]));
            }
        }
        Tensor::new(self.value(a).shape().to_vec(), out)
    }

    /// `a + b` with `b` broadcast over rows and/or columns of `a`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.bcast_apply(a, b, "add_bcast", |x, y| x + y)?;
        self.push("add_bcast", v, Op::AddBcast(a, b), &[a, b])
    }

    /// `a * b` with `b` broadcast over rows and/or columns of `a`.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.bcast_apply(a, b, "mul_bcast", |x, y| x * y)?;
        self.push("mul_bcast", v, Op::MulBcast(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::c(s);
        let v = self.map(a, |x| x * s);
        self.push("scale", v, Op::Scale(a, s), &[a])
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::c(c);
        let v = self.map(a, |x| x + c);
        self.push("offset", v, Op::Offset(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a, "matmul")?;
        let (k2, m) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{n}x{k} · {k2}x{m}")));
        }
        let mut out = vec![T::zero(); n * m];
        mm_nn(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        self.push("matmul", Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a, "matmul_nt")?;
        let (m, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("{n}x{k} · ({m}x{k2})ᵀ")));
        }
        let mut out = vec![T::zero(); n * m];
        mm_nt(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        self.push("matmul_nt", Tensor::new(vec![n, m], out)?, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let out = transpose(self.value(a).data(), r, c);
        self.push("transpose", Tensor::new(vec![c, r], out)?, Op::Transpose(a), &[a])
    }

    /// Stride-1 cross-correlation with "same" zero padding.
    ///
    /// `x` is `[c_in, len]`, `w` is `[c_out, c_in, k]` with odd `k`, `b` is
    /// `[c_out]`. `out[o, t] = b[o] + Σ_i Σ_j w[o, i, j] · x[i, t + j - (k-1)/2]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (cin, len) = self.dims2(x, "conv1d")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 3 || ws[1] != cin || ws[2].is_multiple_of(2) {
            return Err(Error::shape("conv1d", format!("kernel {ws:?} for input {cin}x{len}")));
        }
        let (cout, k) = (ws[0], ws[2]);
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::shape("conv1d", format!("bias {:?} for {cout} outputs", self.value(b).shape())));
            }
        }
        let pad = (k - 1) / 2;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); cout * len];
        for o in 0..cout {
            let orow = &mut out[o * len..(o + 1) * len];
            if let Some(b) = b {
                let bo = self.value(b).data()[o];
                orow.iter_mut().for_each(|v| *v = bo);
            }
            for i in 0..cin {
                let xrow = &xv[i * len..(i + 1) * len];
                for j in 0..k {
                    let wj = wv[(o * cin + i) * k + j];
                    if wj == T::zero() {
                        continue;
                    }
                    let (lo, hi) = conv_range(len, j, pad);
                    if lo < hi {
                        axpy(wj, &xrow[lo + j - pad..hi + j - pad], &mut orow[lo..hi]);
                    }
                }
            }
        }
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("conv1d", Tensor::new(vec![cout, len], out)?, Op::Conv1d { x, w, b }, &parents)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push("relu", v, Op::Relu(a), &[a])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "softmax")?;
        let mut out = self.value(a).data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = 0.0f64;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += v.widen();
            }
            let inv = 1.0 / s;
            row.iter_mut().for_each(|v| *v = T::narrow(v.widen() * inv));
        }
        let v = Tensor::new(self.value(a).shape().to_vec(), out)?;
        self.push("softmax", v, Op::Softmax(a), &[a])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("layer_norm", format!("affine length != {c}")));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let inv_c = T::one() / T::c(c as f64);
        let eps = T::c(LN_EPS);
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + bt[j];
            }
        }
        let v = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            v,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.value(a).data().iter().copied().sum::<T>() / T::c(n as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sum along the last axis: `[r, c] -> [r, 1]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "sum_last")?;
        let d = self.value(a).data();
        let out = (0..r).map(|i| d[i * c..(i + 1) * c].iter().copied().sum::<T>()).collect();
        self.push("sum_last", Tensor::new(vec![r, 1], out)?, Op::SumLast(a), &[a])
    }

    /// Mean along the last axis: `[r, c] -> [r, 1]`.
    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "mean_last")?;
        let d = self.value(a).data();
        let inv = T::one() / T::c(c as f64);
        let out = (0..r).map(|i| d[i * c..(i + 1) * c].iter().copied().sum::<T>() * inv).collect();
        self.push("mean_last", Tensor::new(vec![r, 1], out)?, Op::MeanLast(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x * x);
        self.push("square", v, Op::Square(a), &[a])
    }

    /// `x^(-1/2)`; non-positive inputs are rejected as non-finite.
    pub fn rsqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| if x > T::zero() { T::one() / x.sqrt() } else { T::nan() });
        self.push("rsqrt", v, Op::Rsqrt(a), &[a])
    }

    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        let floor = T::c(floor);
        let v = self.map(a, |x| x.max(floor).ln());
        self.push("log", v, Op::Log { x: a, floor }, &[a])
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, train: bool, rng: &mut Stream) -> Result<Var> {
        if !train || p == 0.0 {
            return Ok(a);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        let keep = T::c(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let va = self.value(a);
        let data = va.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        self.push("dropout", v, Op::Dropout { x: a, mask }, &[a])
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let r = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("row counts {r} vs {pr}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let d = self.value(p).data();
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(&d[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push("concat_cols", Tensor::new(vec![r, total], out)?, Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c} columns")));
        }
        let w = end - start;
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + end]);
        }
        self.push("slice_cols", Tensor::new(vec![r, w], out)?, Op::SliceCols { x: a, start }, &[a])
    }

    /// Keeps columns `phase, phase + factor, ...` of a `[channels, len]` tensor.
    pub fn downsample(&mut self, a: Var, factor: usize, phase: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "downsample")?;
        if factor == 0 || phase >= factor.min(c.max(1)) {
            return Err(Error::shape("downsample", format!("factor {factor} phase {phase}")));
        }
        let m = (c - phase).div_ceil(factor);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(r * m);
        for i in 0..r {
            out.extend((0..m).map(|j| d[i * c + phase + j * factor]));
        }
        self.push("downsample", Tensor::new(vec![r, m], out)?, Op::Downsample { x: a, factor, phase }, &[a])
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.value(v).shape().to_vec(), data).expect("shape preserved")
    }

    fn propagate(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                if self.wants(*a) {
                    self.accumulate(grads, *a, g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*b) {
                    let neg = gd.iter().map(|&v| -v).collect();
                    self.accumulate(grads, *b, self.like(*b, neg));
                }
                if self.wants(*a) {
                    self.accumulate(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = gd.iter().zip(self.value(*b).data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::AddBcast(a, b) => {
                let (r, c, br, bc) = self.bcast_dims(*a, *b, "add_bcast")?;
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); br * bc];
                    for i in 0..r {
                        for j in 0..c {
                            gb[bcast_index(i, j, br, bc)] += gd[i * c + j];
                        }
                    }
                    self.accumulate(grads, *b, self.like(*b, gb));
                }
                if self.wants(*a) {
                    self.accumulate(grads, *a, g);
                }
            }
            Op::MulBcast(a, b) => {
                let (r, c, br, bc) = self.bcast_dims(*a, *b, "mul_bcast")?;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = gd[i * c + j] * bv[bcast_index(i, j, br, bc)];
                        }
                    }
                    self.accumulate(grads, *a, self.like(*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); br * bc];
                    for i in 0..r {
                        for j in 0..c {
                            gb[bcast_index(i, j, br, bc)] += gd[i * c + j] * av[i * c + j];
                        }
                    }
                    self.accumulate(grads, *b, self.like(*b, gb));
                }
            }
            Op::Scale(a, s) => {
                let d = gd.iter().map(|&v| v * *s).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Offset(a) => self.accumulate(grads, *a, g),
            Op::MatMul(a, b) => {
                let (n, k) = self.dims2(*a, "matmul")?;
                let m = self.dims2(*b, "matmul")?.1;
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); n * k];
                    mm_nt(gd, self.value(*b).data(), &mut ga, n, m, k);
                    self.accumulate(grads, *a, self.like(*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * m];
                    mm_tn(self.value(*a).data(), gd, &mut gb, n, k, m);
                    self.accumulate(grads, *b, self.like(*b, gb));
                }
            }
            Op::MatMulNt(a, b) => {
                let (n, k) = self.dims2(*a, "matmul_nt")?;
                let m = self.dims2(*b, "matmul_nt")?.0;
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); n * k];
                    mm_nn(gd, self.value(*b).data(), &mut ga, n, m, k);
                    self.accumulate(grads, *a, self.like(*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); m * k];
                    mm_tn(gd, self.value(*a).data(), &mut gb, n, m, k);
                    self.accumulate(grads, *b, self.like(*b, gb));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims2(*a, "transpose")?;
                self.accumulate(grads, *a, self.like(*a, transpose(gd, c, r)));
            }
            Op::Conv1d { x, w, b } => {
                let (cin, len) = self.dims2(*x, "conv1d")?;
                let ws = self.value(*w).shape();
                let (cout, k) = (ws[0], ws[2]);
                let pad = (k - 1) / 2;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(b) = b {
                    if self.wants(*b) {
                        let gb = (0..cout).map(|o| gd[o * len..(o + 1) * len].iter().copied().sum()).collect();
                        self.accumulate(grads, *b, self.like(*b, gb));
                    }
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); cout * cin * k];
                    for o in 0..cout {
                        let grow = &gd[o * len..(o + 1) * len];
                        for i in 0..cin {
                            let xrow = &xv[i * len..(i + 1) * len];
                            for j in 0..k {
                                let (lo, hi) = conv_range(len, j, pad);
                                if lo < hi {
                                    gw[(o * cin + i) * k + j] = dot(&grow[lo..hi], &xrow[lo + j - pad..hi + j - pad]);
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *w, self.like(*w, gw));
                }
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); cin * len];
                    for o in 0..cout {
                        let grow = &gd[o * len..(o + 1) * len];
                        for i in 0..cin {
                            let gxrow = &mut gx[i * len..(i + 1) * len];
                            for j in 0..k {
                                let wj = wv[(o * cin + i) * k + j];
                                let (lo, hi) = conv_range(len, j, pad);
                                if lo < hi && wj != T::zero() {
                                    axpy(wj, &grow[lo..hi], &mut gxrow[lo + j - pad..hi + j - pad]);
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, self.like(*x, gx));
                }
            }
            Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Softmax(a) => {
                let (r, c) = self.dims2(*a, "softmax")?;
                let y = node.value.data();
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    let (yr, gr) = (&y[i * c..(i + 1) * c], &gd[i * c..(i + 1) * c]);
                    let s = dot(yr, gr);
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (r, c) = self.dims2(*x, "layer_norm")?;
                let gm = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let mut gg = vec![T::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += gd[i * c + j] * xhat[i * c + j];
                        }
                    }
                    self.accumulate(grads, *gamma, self.like(*gamma, gg));
                }
                if self.wants(*beta) {
                    let mut gb = vec![T::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += gd[i * c + j];
                        }
                    }
                    self.accumulate(grads, *beta, self.like(*beta, gb));
                }
                if self.wants(*x) {
                    let inv_c = T::one() / T::c(c as f64);
                    let mut gx = vec![T::zero(); r * c];
                    for i in 0..r {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..c {
                            let gh = gd[i * c + j] * gm[j];
                            s1 += gh;
                            s2 += gh * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let gh = gd[i * c + j] * gm[j];
                            gx[i * c + j] = rstd[i] * (gh - inv_c * s1 - xhat[i * c + j] * inv_c * s2);
                        }
                    }
                    self.accumulate(grads, *x, self.like(*x, gx));
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, self.like(*a, vec![gd[0]; n]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let v = gd[0] / T::c(n as f64);
                self.accumulate(grads, *a, self.like(*a, vec![v; n]));
            }
            Op::SumLast(a) | Op::MeanLast(a) => {
                let (r, c) = self.dims2(*a, "reduce_last")?;
                let s = if matches!(node.op, Op::MeanLast(_)) {
                    T::one() / T::c(c as f64)
                } else {
                    T::one()
                };
                let d = (0..r * c).map(|idx| gd[idx / c] * s).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Square(a) => {
                let two = T::c(2.0);
                let d = gd.iter().zip(self.value(*a).data()).map(|(&gv, &x)| two * x * gv).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Rsqrt(a) => {
                let half = T::c(-0.5);
                let d = gd.iter().zip(node.value.data()).map(|(&gv, &y)| half * y * y * y * gv).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Log { x, floor } => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &v)| if v > *floor { gv / v } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Dropout { x, mask } => {
                let d = gd.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Concat(parts) => {
                let (r, total) = node.value.dims2().expect("2-D");
                let mut off = 0;
                for &p in parts {
                    let w = self.dims2(p, "concat_cols")?.1;
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&gd[i * total + off..i * total + off + w]);
                        }
                        self.accumulate(grads, p, self.like(p, d));
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.dims2(*x, "slice_cols")?;
                let w = node.value.dims2().expect("2-D").1;
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Downsample { x, factor, phase } => {
                let (r, c) = self.dims2(*x, "downsample")?;
                let m = node.value.dims2().expect("2-D").1;
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..m {
                        d[i * c + phase + j * factor] = gd[i * m + j];
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
        }
        Ok(())
    }
}
