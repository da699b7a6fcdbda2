//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its variables in execution
//! order, so node inputs always precede the node itself. [`Tape::backward`]
//! walks the record once in reverse and accumulates adjoints.

use crate::error::{Error, Result};
use crate::tensor::{
    self, as_matrix, broadcast_index, broadcast_shape, gemm, ElementwiseKind, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Recip(Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Concat(Vec<Var>),
    MeanAxis(Var, usize),
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    StackRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    Transpose(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for `v`, or zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }

    pub fn take(&mut self, v: Var) -> Vec<f64> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }

    /// Copies `tape`'s leaf value for `v` with its gradient slot filled.
    pub fn attach(&self, tape: &Tape, v: Var) -> Tensor {
        let mut t = tape.value(v).clone();
        t.grad = Some(self.wrt(v));
        t
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_flag(value, op, needs_grad)
    }

    fn push_flag(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        value.grad = None;
        value.requires_grad = needs_grad;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor; it is differentiated iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push_flag(t, Op::Leaf, rg)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_flag(t.clone(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_flag(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the layout used by linear layers.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.value(a));
        let (n, k2) = as_matrix(self.value(b));
        if k != k2 || self.value(b).shape().len() != 2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {:?} · {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::from_vec(&shape, out)?;
        Ok(self.push(t, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn elementwise(&mut self, kind: ElementwiseKind, x: Var, y: Option<Var>) -> Result<Var> {
        let need_y =
            || y.ok_or_else(|| Error::contract(format!("{kind:?} needs a second operand")));
        match kind {
            ElementwiseKind::Add => self.add(x, need_y()?),
            ElementwiseKind::Sub => self.sub(x, need_y()?),
            ElementwiseKind::Mul => self.mul(x, need_y()?),
            ElementwiseKind::Scale(s) => Ok(self.scale(x, s.get())),
            ElementwiseKind::Sigmoid => Ok(self.sigmoid(x)),
            ElementwiseKind::Relu => Ok(self.relu(x)),
            ElementwiseKind::Log => self.log(x),
            ElementwiseKind::ConcatLastAxis => self.concat(&[x, need_y()?]),
            ElementwiseKind::MeanAxis(axis) => self.mean_axis(x, axis),
        }
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        let out = tensor::broadcast_binary(self.value(x), self.value(y), |a, b| a + b)?;
        Ok(self.push(out, Op::Add(x, y), &[x, y]))
    }

    pub fn sub(&mut self, x: Var, y: Var) -> Result<Var> {
        let out = tensor::broadcast_binary(self.value(x), self.value(y), |a, b| a - b)?;
        Ok(self.push(out, Op::Sub(x, y), &[x, y]))
    }

    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        let out = tensor::broadcast_binary(self.value(x), self.value(y), |a, b| a * b)?;
        Ok(self.push(out, Op::Mul(x, y), &[x, y]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.push(out, Op::AddScalar(x), &[x])
    }

    /// Elementwise `1/x`; every entry must be nonzero.
    pub fn recip(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| **v == 0.0 || !v.is_finite()) {
            return Err(Error::Domain(format!("reciprocal of {bad}")));
        }
        let out = self.value(x).map(|v| 1.0 / v);
        Ok(self.push(out, Op::Recip(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(tensor::sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = tensor::elementwise(ElementwiseKind::Log, self.value(x), None)?;
        Ok(self.push(out, Op::Log(x), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = tensor::concat_last_axis(&refs)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = tensor::mean_axis(self.value(x), axis)?;
        Ok(self.push(out, Op::MeanAxis(x, axis), &[x]))
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Row softmax; causal rows normalize over columns `0..=row` only.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Var {
        let out = tensor::softmax_rows(self.value(x), causal);
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dim(format!(
                "layer norm width {d} disagrees with gamma {:?} / beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = xv.rows();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let xh = (row[c] - mean) * inv;
                xhat[r * d + c] = xh;
                out[r * d + c] = g[c] * xh + b[c];
            }
        }
        let t = Tensor::from_vec(xv.shape(), out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(t, op, &[x, gamma, beta]))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = as_matrix(self.value(x));
        if start + len > n {
            return Err(Error::dim(format!(
                "column slice {start}..{} out of range for {:?}",
                start + len,
                self.shape(x)
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let t = Tensor::from_vec(&[m, len], out)?;
        Ok(self.push(t, Op::SliceCols(x, start), &[x]))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = as_matrix(self.value(x));
        if start + len > m {
            return Err(Error::dim(format!(
                "row slice {start}..{} out of range for {:?}",
                start + len,
                self.shape(x)
            )));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let t = Tensor::from_vec(&[len, n], data)?;
        Ok(self.push(t, Op::SliceRows(x, start), &[x]))
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for p in parts {
            if self.value(*p).cols() != n {
                return Err(Error::dim("stack_rows operands disagree on width"));
            }
            data.extend_from_slice(self.value(*p).data());
        }
        let rows = data.len() / n;
        let t = Tensor::from_vec(&[rows, n], data)?;
        Ok(self.push(t, Op::StackRows(parts.to_vec()), parts))
    }

    /// Picks `x[r, index[r]]` for every row, giving a vector.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = as_matrix(self.value(x));
        if index.len() != m || index.iter().any(|&i| i >= n) {
            return Err(Error::contract(format!(
                "gather index invalid for {:?}",
                self.shape(x)
            )));
        }
        let src = self.value(x).data();
        let data = index.iter().enumerate().map(|(r, &c)| src[r * n + c]).collect();
        let t = Tensor::from_vec(&[m], data)?;
        Ok(self.push(t, Op::Gather(x, index.to_vec()), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = match self.shape(x) {
            [m, n] => (*m, *n),
            s => return Err(Error::dim(format!("transpose expects a matrix, got {s:?}"))),
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::from_vec(&[n, m], out)?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(self.value(*a));
                let n = self.value(*b).cols();
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, &|s| gemm(m, n, k, g, false, bv, true, s, 1.0));
                acc(*b, &|s| gemm(k, m, n, av, true, g, false, s, 1.0));
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = as_matrix(self.value(*a));
                let n = self.value(*b).rows();
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                // out = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                acc(*a, &|s| gemm(m, n, k, g, false, bv, false, s, 1.0));
                acc(*b, &|s| gemm(n, m, k, g, true, av, false, s, 1.0));
            }
            Op::Add(x, y) | Op::Sub(x, y) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let out_shape = node.value.shape();
                acc(*x, &|s| reduce_into(s, self.shape(*x), out_shape, g, |_| 1.0));
                acc(*y, &|s| reduce_into(s, self.shape(*y), out_shape, g, |_| sign));
            }
            Op::Mul(x, y) => {
                let out_shape = node.value.shape();
                let xs = self.value(*x);
                let ys = self.value(*y);
                let ix = broadcast_index(xs.shape(), out_shape);
                let iy = broadcast_index(ys.shape(), out_shape);
                acc(*x, &|s| {
                    reduce_into(s, xs.shape(), out_shape, g, |o| ys.data()[iy[o]])
                });
                acc(*y, &|s| {
                    reduce_into(s, ys.shape(), out_shape, g, |o| xs.data()[ix[o]])
                });
            }
            Op::Scale(x, c) => acc(*x, &|s| axpy(s, g, *c)),
            Op::AddScalar(x) => acc(*x, &|s| axpy(s, g, 1.0)),
            Op::Recip(x) => {
                let y = node.value.data();
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        s[i] -= g[i] * y[i] * y[i];
                    }
                })
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                })
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        if xv[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                })
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / xv[i];
                    }
                })
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    acc(*p, &|s| {
                        for r in 0..rows {
                            for c in 0..w {
                                s[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::MeanAxis(x, axis) => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                acc(*x, &|s| {
                    for o in 0..outer {
                        for a in 0..len {
                            for i in 0..inner {
                                s[(o * len + a) * inner + i] += g[o * inner + i] / len as f64;
                            }
                        }
                    }
                })
            }
            Op::Sum(x) => acc(*x, &|s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Softmax(x) => {
                let y = &node.value;
                let (m, n) = as_matrix(y);
                acc(*x, &|s| {
                    for r in 0..m {
                        let yr = &y.data()[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            s[r * n + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let rows = node.value.rows();
                let gm = self.value(*gamma).data();
                acc(*gamma, &|s| {
                    for r in 0..rows {
                        for c in 0..d {
                            s[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                acc(*beta, &|s| {
                    for r in 0..rows {
                        for c in 0..d {
                            s[c] += g[r * d + c];
                        }
                    }
                });
                acc(*x, &|s| {
                    let n = d as f64;
                    for r in 0..rows {
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for c in 0..d {
                            let gh = g[r * d + c] * gm[c];
                            sum_g += gh;
                            sum_gx += gh * xhat[r * d + c];
                        }
                        for c in 0..d {
                            let gh = g[r * d + c] * gm[c];
                            s[r * d + c] +=
                                inv_std[r] / n * (n * gh - sum_g - xhat[r * d + c] * sum_gx);
                        }
                    }
                })
            }
            Op::SliceCols(x, start) => {
                let (m, n) = as_matrix(self.value(*x));
                let len = node.value.cols();
                acc(*x, &|s| {
                    for r in 0..m {
                        for c in 0..len {
                            s[r * n + start + c] += g[r * len + c];
                        }
                    }
                })
            }
            Op::SliceRows(x, start) => {
                let n = node.value.cols();
                acc(*x, &|s| axpy(&mut s[start * n..start * n + g.len()], g, 1.0))
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    acc(*p, &|s| axpy(s, &g[offset..offset + len], 1.0));
                    offset += len;
                }
            }
            Op::Gather(x, index) => {
                let n = self.value(*x).cols();
                acc(*x, &|s| {
                    for (r, &c) in index.iter().enumerate() {
                        s[r * n + c] += g[r];
                    }
                })
            }
            Op::Transpose(x) => {
                let (m, n) = as_matrix(self.value(*x));
                acc(*x, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                })
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Sums `g[o] * factor(o)` over broadcast output positions into `dst`.
fn reduce_into(
    dst: &mut [f64],
    src_shape: &[usize],
    out_shape: &[usize],
    g: &[f64],
    factor: impl Fn(usize) -> f64,
) {
    if src_shape == out_shape {
        for (o, d) in dst.iter_mut().enumerate() {
            *d += g[o] * factor(o);
        }
        return;
    }
    debug_assert!(broadcast_shape(src_shape, out_shape).is_ok());
    for (o, &i) in broadcast_index(src_shape, out_shape).iter().enumerate() {
        dst[i] += g[o] * factor(o);
    }
}
