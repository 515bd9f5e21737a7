//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Values are computed
//! eagerly; [`Graph::grad`] walks the tape backwards once.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, AttentionLayout};
use super::params::{ParamStore, Params};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probability clamp applied by [`Graph::binary_cross_entropy`].
pub const BCE_CLAMP: f64 = 1e-7;
/// Variance floor inside [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-8;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    MeanRows(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttentionLayout>,
        heads: usize,
        probs: Vec<f64>,
    },
    Bce {
        p: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::grad`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let data = self.grads.get(var.0)?.as_ref()?;
        Tensor::new(self.shapes[var.0].clone(), data.clone()).ok()
    }

    pub fn slice(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0)?.as_deref()
    }

    /// Moves out the gradient of `var`, leaving `None` behind.
    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0)?.take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn dims(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.dims2()
    }

    fn data(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn input(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a constant leaf (never differentiated).
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds every parameter of `store` as a leaf.
    pub fn params(&mut self, store: &ParamStore, trainable: bool) -> Params {
        let vars = store
            .tensors()
            .map(|t| {
                let t = t.clone();
                if trainable {
                    self.input(t.with_grad())
                } else {
                    self.constant(t)
                }
            })
            .collect();
        Params::new(vars)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 || self.shape(a).len() > 2 || self.shape(b).len() > 2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let src = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new([n, m], out)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// `x[m,n] + row[n]`, broadcasting `row` over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(row).numel() != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.data(row);
        let mut out = self.data(x).to_vec();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += b;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::AddRow(x, row), &[x, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.push(value, Op::Scale(x, factor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Column-wise mean over rows: `[m,n] -> [1,n]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if m == 0 {
            return Err(Error::shape("mean_pool", self.shape(x), &[1, n]));
        }
        let src = self.data(x);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let value = Tensor::new([1, n], out)?;
        Ok(self.push(value, Op::MeanRows(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.push(value, op, &[x])
    }

    /// Max-subtracted softmax along `axis` of a 1D or 2D tensor.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if axis >= rank || rank > 2 {
            return Err(Error::Contract(format!(
                "softmax axis {axis} invalid for shape {:?}",
                self.shape(x)
            )));
        }
        let (m, n) = self.dims(x);
        let mut out = self.data(x).to_vec();
        if rank == 1 || axis == 1 {
            for row in out.chunks_mut(n.max(1)) {
                kernels::softmax_in_place(row);
            }
        } else {
            let mut col = vec![0.0; m];
            for j in 0..n {
                for i in 0..m {
                    col[i] = out[i * n + j];
                }
                kernels::softmax_in_place(&mut col);
                for i in 0..m {
                    out[i * n + j] = col[i];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let axis = if rank == 1 { 1 } else { axis };
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of length `n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut normalized = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std[i] = inv;
            for j in 0..n {
                let xh = (row[j] - mean) * inv;
                normalized[i * n + j] = xh;
                out[i * n + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            normalized,
            inv_std,
        };
        Ok(self.push(value, op, &[x, gamma, beta]))
    }

    /// Flat-index gather: `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let src = self.data(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let out = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(value, Op::Gather { x, index }, &[x]))
    }

    /// Gathers whole rows of a 2D tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Contract(format!("row {bad} out of range for {m} rows")));
        }
        let index: Arc<[usize]> = rows.iter().flat_map(|&r| r * n..(r + 1) * n).collect();
        self.gather(x, index, &[rows.len(), n])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Stacks 2D tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let (_, n) = self.dims(first);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, c) = self.dims(p);
            if c != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += m;
            out.extend_from_slice(self.data(p));
        }
        let value = Tensor::new([rows, n], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Multi-head scaled dot-product attention restricted to the groups of `layout`.
    ///
    /// `q`, `k`, `v` are `[tokens, d]` with `d` divisible by `heads`; head `h` uses
    /// columns `[h*d/heads, (h+1)*d/heads)`.
    pub fn grouped_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttentionLayout>,
        heads: usize,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::shape("attention", &shape, self.shape(k)));
        }
        let (n, d) = self.dims(q);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!("{d} channels not divisible by {heads} heads")));
        }
        if layout.tokens != n || layout.group == 0 || n % layout.group != 0 {
            return Err(Error::Contract(format!(
                "attention layout for {} tokens in groups of {} does not fit {n} tokens",
                layout.tokens, layout.group
            )));
        }
        let (out, probs) =
            kernels::grouped_attention(self.data(q), self.data(k), self.data(v), &layout, d, heads);
        let value = Tensor::new([n, d], out)?;
        let op = Op::Attention {
            q,
            k,
            v,
            layout,
            heads,
            probs,
        };
        Ok(self.push(value, op, &[q, k, v]))
    }

    /// Mean binary cross-entropy of probabilities `p` against `targets`.
    ///
    /// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`; a probability that is
    /// NaN or outside `[0, 1]` is a contract error.
    pub fn binary_cross_entropy(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let probs = self.data(p);
        if probs.len() != targets.len() || probs.is_empty() {
            return Err(Error::shape("binary_cross_entropy", self.shape(p), &[targets.len()]));
        }
        let mut total = 0.0;
        for (&raw, &y) in probs.iter().zip(targets) {
            if !(0.0..=1.0).contains(&raw) {
                return Err(Error::Contract(format!("probability {raw} outside [0, 1]")));
            }
            if !(0.0..=1.0).contains(&y) {
                return Err(Error::Contract(format!("target {y} outside [0, 1]")));
            }
            let q = raw.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= y * libm::log(q) + (1.0 - y) * libm::log(1.0 - q);
        }
        let value = Tensor::scalar(total / probs.len() as f64);
        let op = Op::Bce {
            p,
            targets: targets.to_vec(),
        };
        Ok(self.push(value, op, &[p]))
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every node that
    /// depends on a `requires_grad` leaf.
    pub fn grad(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "gradient requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only keep what was differentiated.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop(&self, node: &Node, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                if self.needs(*a) {
                    let da = kernels::matmul_nt(up, self.data(*b), m, n, k);
                    accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let g = slot(grads, *b, k * n);
                    kernels::matmul_tn_acc(self.data(*a), up, m, k, n, g);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = self.dims(*x);
                let g = slot(grads, *x, m * n);
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] += up[j * m + i];
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        accumulate(grads, v, up);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if self.needs(*x) {
                    accumulate(grads, *x, up);
                }
                if self.needs(*row) {
                    let (_, n) = self.dims(*x);
                    let g = slot(grads, *row, n);
                    for chunk in up.chunks(n) {
                        for (gi, u) in g.iter_mut().zip(chunk) {
                            *gi += u;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    let g = slot(grads, *a, da.len());
                    for ((gi, u), y) in g.iter_mut().zip(up).zip(db) {
                        *gi += u * y;
                    }
                }
                if self.needs(*b) {
                    let g = slot(grads, *b, db.len());
                    for ((gi, u), x) in g.iter_mut().zip(up).zip(da) {
                        *gi += u * x;
                    }
                }
            }
            Op::Scale(x, factor) => {
                let g = slot(grads, *x, up.len());
                for (gi, u) in g.iter_mut().zip(up) {
                    *gi += u * factor;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                let g = slot(grads, *x, n);
                g.iter_mut().for_each(|gi| *gi += up[0]);
            }
            Op::MeanRows(x) => {
                let (m, n) = self.dims(*x);
                let g = slot(grads, *x, m * n);
                let inv = 1.0 / m as f64;
                for row in g.chunks_mut(n) {
                    for (gi, u) in row.iter_mut().zip(up) {
                        *gi += u * inv;
                    }
                }
            }
            Op::Relu(x) => {
                let src = self.data(*x);
                let g = slot(grads, *x, src.len());
                for ((gi, u), v) in g.iter_mut().zip(up).zip(src) {
                    if *v > 0.0 {
                        *gi += u;
                    }
                }
            }
            Op::Gelu(x) => {
                let src = self.data(*x);
                let g = slot(grads, *x, src.len());
                for ((gi, u), v) in g.iter_mut().zip(up).zip(src) {
                    *gi += u * kernels::gelu_grad(*v);
                }
            }
            Op::Sigmoid(x) => {
                let g = slot(grads, *x, out.len());
                for ((gi, u), s) in g.iter_mut().zip(up).zip(out) {
                    *gi += u * s * (1.0 - s);
                }
            }
            Op::Softmax { x, axis } => {
                let (m, n) = self.dims(*x);
                let g = slot(grads, *x, m * n);
                if *axis == 1 {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dotp = kernels::dot(&up[r.clone()], &out[r.clone()]);
                        for j in r {
                            g[j] += out[j] * (up[j] - dotp);
                        }
                    }
                } else {
                    for j in 0..n {
                        let dotp: f64 = (0..m).map(|i| up[i * n + j] * out[i * n + j]).sum();
                        for i in 0..m {
                            let t = i * n + j;
                            g[t] += out[t] * (up[t] - dotp);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (m, n) = self.dims(*x);
                if self.needs(*gamma) {
                    let g = slot(grads, *gamma, n);
                    for i in 0..m {
                        for j in 0..n {
                            g[j] += up[i * n + j] * normalized[i * n + j];
                        }
                    }
                }
                if self.needs(*beta) {
                    let g = slot(grads, *beta, n);
                    for i in 0..m {
                        for j in 0..n {
                            g[j] += up[i * n + j];
                        }
                    }
                }
                if self.needs(*x) {
                    let gam = self.data(*gamma);
                    let g = slot(grads, *x, m * n);
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let xh = &normalized[r.clone()];
                        let dxh: Vec<f64> = up[r.clone()].iter().zip(gam).map(|(u, w)| u * w).collect();
                        let mean_dxh = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dxh_xh = kernels::dot(&dxh, xh) / n as f64;
                        for j in 0..n {
                            g[i * n + j] += inv_std[i] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                let n = self.value(*x).numel();
                let g = slot(grads, *x, n);
                for (&i, u) in index.iter().zip(up) {
                    g[i] += u;
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, up),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.needs(p) {
                        accumulate(grads, p, &up[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            } => {
                let (_, d) = self.dims(*q);
                let (dq, dk, dv) = kernels::grouped_attention_backward(
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    up,
                    layout,
                    d,
                    *heads,
                );
                for (var, g) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.needs(var) {
                        accumulate(grads, var, &g);
                    }
                }
            }
            Op::Bce { p, targets } => {
                let probs = self.data(*p);
                let inv_n = 1.0 / probs.len() as f64;
                let g = slot(grads, *p, probs.len());
                for ((gi, &raw), &y) in g.iter_mut().zip(probs).zip(targets) {
                    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&raw) {
                        continue;
                    }
                    *gi += up[0] * inv_n * (-y / raw + (1.0 - y) / (1.0 - raw));
                }
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut [f64] {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, g: &[f64]) {
    match &mut grads[var.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
        empty => *empty = Some(g.to_vec()),
    }
}
