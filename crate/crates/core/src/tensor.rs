//! Dense row-major `f64` tensors with one to three axes.
//!
//! The value-level kernels here are shared by the autodiff tape, which
//! records them and supplies the matching backward rules.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::dim(format!(
                "tensors carry 1 to 3 axes, got shape {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {n} values but {} were supplied",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![0.0; n]).expect("zeros: valid shape")
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![value; n]).expect("filled: valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(&[1], vec![value]).unwrap()
    }

    pub fn vector(values: &[f64]) -> Self {
        Tensor::from_vec(&[values.len()], values.to_vec()).unwrap()
    }

    /// Builds a matrix from equal-length rows.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows in matrix literal"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(&[rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (product of leading axes).
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols().max(1)
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.is_empty() || shape.len() > 3 {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(&self.shape, self.data.iter().map(|&v| f(v)).collect()).unwrap()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn as_matrix(t: &Tensor) -> (usize, usize) {
    if t.shape().len() == 1 {
        (1, t.shape()[0])
    } else {
        (t.rows(), t.cols())
    }
}

/// Plain matrix product of `A[m×k]` and `B[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matmul_dims(a)?;
    let (k2, n) = matmul_dims(b)?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions disagree: {:?} · {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
    Tensor::from_vec(&[m, n], out)
}

fn matmul_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(format!("matmul expects 2-axis operands, got {s:?}"))),
    }
}

/// `C = A·B + beta·C` where either operand may be read transposed.
///
/// `a` is stored as `[m×k]` (or `[k×m]` when `ta`), `b` as `[k×n]` (or `[n×k]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover the strided extents implied by (m, k, n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-wise softmax with per-row max subtraction.
///
/// With `causal`, entry `(i, j)` for `j > i` is excluded and set to zero; row
/// `i` of a causal softmax only normalizes over columns `0..=i`.
pub fn softmax_rows(x: &Tensor, causal: bool) -> Tensor {
    let (m, n) = as_matrix(x);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        let width = if causal { (i + 1).min(n) } else { n };
        let max = row[..width].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[i * n..(i + 1) * n];
        let mut sum = 0.0;
        for j in 0..width {
            let e = (row[j] - max).exp();
            dst[j] = e;
            sum += e;
        }
        for v in &mut dst[..width] {
            *v /= sum;
        }
    }
    Tensor::from_vec(x.shape(), out).unwrap()
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Elementwise and shape operations exposed as a single enumerated family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Scale(ScaleFactor),
    Sigmoid,
    Relu,
    Log,
    ConcatLastAxis,
    MeanAxis(usize),
}

/// A scale factor stored by bit pattern so the kind stays `Eq`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleFactor(u64);

impl ScaleFactor {
    pub fn new(v: f64) -> Self {
        ScaleFactor(v.to_bits())
    }
    pub fn get(self) -> f64 {
        f64::from_bits(self.0)
    }
}

pub fn elementwise(kind: ElementwiseKind, x: &Tensor, y: Option<&Tensor>) -> Result<Tensor> {
    let need_y = || y.ok_or_else(|| Error::contract(format!("{kind:?} needs a second operand")));
    match kind {
        ElementwiseKind::Add => broadcast_binary(x, need_y()?, |a, b| a + b),
        ElementwiseKind::Sub => broadcast_binary(x, need_y()?, |a, b| a - b),
        ElementwiseKind::Mul => broadcast_binary(x, need_y()?, |a, b| a * b),
        ElementwiseKind::Scale(s) => Ok(x.map(|v| v * s.get())),
        ElementwiseKind::Sigmoid => Ok(x.map(sigmoid)),
        ElementwiseKind::Relu => Ok(x.map(|v| v.max(0.0))),
        ElementwiseKind::Log => {
            if let Some(bad) = x.data().iter().find(|v| !(**v > 0.0)) {
                return Err(Error::Domain(format!("log of nonpositive value {bad}")));
            }
            Ok(x.map(f64::ln))
        }
        ElementwiseKind::ConcatLastAxis => concat_last_axis(&[x, need_y()?]),
        ElementwiseKind::MeanAxis(axis) => mean_axis(x, axis),
    }
}

pub fn concat_last_axis(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::contract("concat of zero tensors"))?;
    let lead = &first.shape()[..first.shape().len() - 1];
    let rows = first.rows();
    for p in parts {
        if &p.shape()[..p.shape().len() - 1] != lead {
            return Err(Error::dim(format!(
                "concat leading axes differ: {:?} vs {:?}",
                first.shape(),
                p.shape()
            )));
        }
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::from_vec(&shape, data)
}

/// Mean over one axis; the reduced axis is kept with size 1.
pub fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let base = (o * len + a) * inner;
            for i in 0..inner {
                out[o * inner + i] += x.data()[base + i];
            }
        }
    }
    for v in &mut out {
        *v /= len as f64;
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = 1;
    Tensor::from_vec(&out_shape, out)
}

/// Right-aligned broadcasting between two shapes of at most three axes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(format!(
                    "shapes {a:?} and {b:?} are not broadcast-compatible"
                )))
            }
        };
    }
    Ok(out)
}

/// For each output element, the flat index into an operand of shape `src`.
pub(crate) fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let padded: Vec<usize> = (0..n)
        .map(|i| if i + src.len() >= n { src[i + src.len() - n] } else { 1 })
        .collect();
    let mut strides = vec![0usize; n];
    let mut acc = 1;
    for i in (0..n).rev() {
        strides[i] = if padded[i] == 1 { 0 } else { acc };
        acc *= padded[i];
    }
    let total: usize = out.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; n];
    for _ in 0..total {
        idx.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
        for ax in (0..n).rev() {
            counter[ax] += 1;
            if counter[ax] < out[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    idx
}

pub(crate) fn broadcast_binary(
    x: &Tensor,
    y: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if x.shape() == y.shape() {
        let data = x.data().iter().zip(y.data()).map(|(&a, &b)| f(a, b)).collect();
        return Tensor::from_vec(x.shape(), data);
    }
    let shape = broadcast_shape(x.shape(), y.shape())?;
    let ix = broadcast_index(x.shape(), &shape);
    let iy = broadcast_index(y.shape(), &shape);
    let data = ix
        .iter()
        .zip(&iy)
        .map(|(&i, &j)| f(x.data()[i], y.data()[j]))
        .collect();
    Tensor::from_vec(&shape, data)
}
