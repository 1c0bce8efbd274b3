//! Operation recording and reverse-mode differentiation.
//!
//! Every primitive is a method on [`Tape`]. When at least one input carries a
//! node on a recording tape, the primitive appends a record holding whatever
//! it needs for its adjoint; otherwise the output is a plain constant. Records
//! are appended in execution order, which is a topological order by
//! construction, and [`Tape::backward`] walks them exactly once in reverse.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, ConvDims, ConvGeom};
use super::tensor::{numel, NodeRef, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

type Buf = Arc<Vec<f64>>;

enum Adjoint {
    Add,
    Sub,
    Mul { a: Buf, b: Buf },
    Scale(f64),
    Identity,
    AddBias { m: usize, n: usize },
    MatMul { a: Buf, b: Buf, m: usize, k: usize, n: usize },
    MatMulNt { a: Buf, b: Buf, m: usize, k: usize, n: usize },
    Transpose { m: usize, n: usize },
    Conv { cols: Buf, w: Buf, dims: ConvDims, oc: usize },
    Relu { y: Buf },
    Sigmoid { y: Buf },
    Softmax { y: Buf, n: usize },
    LayerNorm { xhat: Buf, inv_std: Vec<f64>, gamma: Buf, n: usize },
    MulConst { mask: Buf },
    MeanSquare { a: Buf },
    Norm { a: Buf, norm: f64 },
    Sum { len: usize },
    GatherRows { idx: Vec<usize>, in_rows: usize, cols: usize },
    ConcatRows { rows: Vec<usize>, cols: usize },
    SliceCols { start: usize, end: usize, cols: usize },
    ConcatCols { widths: Vec<usize>, rows: usize },
    RowNormalize { y: Buf, norms: Vec<f64>, cols: usize },
    ScatterGrid { rows: Vec<usize>, cols: Vec<usize>, out_cols: usize },
    Patchify { c: usize, h: usize, w: usize, p: usize },
    PairwiseAdd { n: usize, m: usize, h: usize },
}

struct Record {
    output: usize,
    inputs: Vec<Option<usize>>,
    adjoint: Adjoint,
}

/// Ordered record of executed primitives.
pub struct Tape {
    id: u64,
    recording: bool,
    nodes: usize,
    records: Vec<Record>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, keyed by tensor.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a tracked leaf tensor. `None` when
    /// the tensor did not influence the loss.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let node = t.node?;
        if node.tape != self.tape {
            return None;
        }
        self.grads.get(node.index)?.as_deref()
    }

    /// Like [`Gradients::get`] but yields zeros for untouched tensors.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        _ => Err(Error::shape(op, t.shape(), &[0, 0])),
    }
}

impl Tape {
    /// A tape that records operations on tracked tensors.
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: 0,
            records: Vec::new(),
        }
    }

    /// A tape that never records; every tensor it produces is a constant.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// A leaf tensor; tracked when the tape records.
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::shape("leaf", shape, &[data.len()]));
        }
        Ok(self.leaf_shared(Arc::new(data), shape.to_vec()))
    }

    pub(crate) fn leaf_shared(&mut self, data: Buf, shape: Vec<usize>) -> Tensor {
        let node = if self.recording {
            let index = self.nodes;
            self.nodes += 1;
            Some(NodeRef { tape: self.id, index })
        } else {
            None
        };
        Tensor::from_parts(data, shape, node)
    }

    /// A tracked copy of `t` on this tape.
    pub fn track(&mut self, t: &Tensor) -> Tensor {
        self.leaf_shared(t.shared(), t.shape().to_vec())
    }

    fn node_of(&self, op: &'static str, t: &Tensor) -> Result<Option<usize>> {
        match t.node {
            None => Ok(None),
            Some(n) if n.tape == self.id => Ok(Some(n.index)),
            Some(_) => Err(Error::ForeignTensor(op)),
        }
    }

    fn push(
        &mut self,
        op: &'static str,
        inputs: &[&Tensor],
        data: Vec<f64>,
        shape: Vec<usize>,
        adjoint: impl FnOnce() -> Adjoint,
    ) -> Result<Tensor> {
        let mut nodes = Vec::with_capacity(inputs.len());
        for t in inputs {
            nodes.push(self.node_of(op, t)?);
        }
        let node = self.record(nodes, adjoint);
        Ok(Tensor::from_parts(Arc::new(data), shape, node))
    }

    fn record(&mut self, inputs: Vec<Option<usize>>, adjoint: impl FnOnce() -> Adjoint) -> Option<NodeRef> {
        if !self.recording || inputs.iter().all(Option::is_none) {
            return None;
        }
        let output = self.nodes;
        self.nodes += 1;
        self.records.push(Record {
            output,
            inputs,
            adjoint: adjoint(),
        });
        Some(NodeRef {
            tape: self.id,
            index: output,
        })
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("add", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        self.push("add", &[a, b], data, a.shape().to_vec(), || Adjoint::Add)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("sub", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        self.push("sub", &[a, b], data, a.shape().to_vec(), || Adjoint::Sub)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("mul", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        self.push("mul", &[a, b], data, a.shape().to_vec(), || Adjoint::Mul {
            a: a.shared(),
            b: b.shared(),
        })
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x * c).collect();
        self.push("scale", &[a], data, a.shape().to_vec(), || Adjoint::Scale(c))
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x + c).collect();
        self.push("add_scalar", &[a], data, a.shape().to_vec(), || Adjoint::Identity)
    }

    /// Multiplies by a fixed (untracked) array of the same length.
    pub fn mul_const(&mut self, a: &Tensor, mask: Vec<f64>) -> Result<Tensor> {
        if mask.len() != a.numel() {
            return Err(Error::shape("mul_const", a.shape(), &[mask.len()]));
        }
        let data = a.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let mask = Arc::new(mask);
        self.push("mul_const", &[a], data, a.shape().to_vec(), || Adjoint::MulConst { mask })
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let y = Arc::new(data.clone());
        self.push("relu", &[a], data, a.shape().to_vec(), || Adjoint::Relu { y })
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero where clamped.
    pub fn clamp(&mut self, a: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let mask = Arc::new(a.data().iter().map(|&x| if x < lo || x > hi { 0.0 } else { 1.0 }).collect());
        self.push("clamp", &[a], data, a.shape().to_vec(), || Adjoint::MulConst { mask })
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|&x| sigmoid(x)).collect();
        let y = Arc::new(data.clone());
        self.push("sigmoid", &[a], data, a.shape().to_vec(), || Adjoint::Sigmoid { y })
    }

    /// Inverted dropout: surviving entries are scaled by `1/(1-rate)`. A no-op
    /// outside training or at rate 0.
    pub fn dropout<R: Rng>(&mut self, a: &Tensor, rate: f64, train: bool, rng: &mut R) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout: rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a.clone());
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..a.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.mul_const(a, mask)
    }

    // ---- linear algebra -------------------------------------------------

    /// `x[m,n] + b[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, n) = matrix("add_bias", x)?;
        if b.shape() != [n] {
            return Err(Error::shape("add_bias", x.shape(), b.shape()));
        }
        let mut data = x.to_vec();
        for row in data.chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        self.push("add_bias", &[x, b], data, vec![m, n], || Adjoint::AddBias { m, n })
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = matrix("matmul", a)?;
        let (k2, n) = matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let data = kernels::matmul(a.data(), b.data(), m, k, n);
        self.push("matmul", &[a, b], data, vec![m, n], || Adjoint::MatMul {
            a: a.shared(),
            b: b.shared(),
            m,
            k,
            n,
        })
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = matrix("matmul_nt", a)?;
        let (n, k2) = matrix("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
        }
        let data = kernels::matmul_nt(a.data(), b.data(), m, k, n);
        self.push("matmul_nt", &[a, b], data, vec![m, n], || Adjoint::MatMulNt {
            a: a.shared(),
            b: b.shared(),
            m,
            k,
            n,
        })
    }

    /// `x · w + b`
    pub fn affine(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let y = self.matmul(x, w)?;
        self.add_bias(&y, b)
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let (m, n) = matrix("transpose", a)?;
        let data = kernels::transpose(a.data(), m, n);
        self.push("transpose", &[a], data, vec![n, m], || Adjoint::Transpose { m, n })
    }

    /// 2-D convolution of `x[c,h,w]` with `w[o,c,kh,kw]` plus bias `b[o]`.
    pub fn conv2d(&mut self, x: &Tensor, w: &Tensor, b: &Tensor, geom: ConvGeom) -> Result<Tensor> {
        let (c, h, wd) = match *x.shape() {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::shape("conv2d", x.shape(), &[0, 0, 0])),
        };
        let (oc, ic, kh, kw) = match *w.shape() {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => return Err(Error::shape("conv2d", w.shape(), &[0, 0, 0, 0])),
        };
        if ic != c {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        if b.shape() != [oc] {
            return Err(Error::shape("conv2d", w.shape(), b.shape()));
        }
        let (oh, ow) = match (geom.out_extent(h, kh), geom.out_extent(wd, kw)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(Error::shape("conv2d", x.shape(), w.shape())),
        };
        let dims = ConvDims {
            c,
            h,
            w: wd,
            kh,
            kw,
            oh,
            ow,
            geom,
        };
        let cols = kernels::im2col(x.data(), &dims);
        let mut data = kernels::matmul(w.data(), &cols, oc, c * kh * kw, oh * ow);
        for (o, plane) in data.chunks_mut(oh * ow).enumerate() {
            let bias = b.data()[o];
            for v in plane {
                *v += bias;
            }
        }
        let cols = Arc::new(cols);
        self.push("conv2d", &[x, w, b], data, vec![oc, oh, ow], || Adjoint::Conv {
            cols,
            w: w.shared(),
            dims,
            oc,
        })
    }

    // ---- normalization ---------------------------------------------------

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let (_, n) = matrix("softmax_rows", a)?;
        let mut data = a.to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let y = Arc::new(data.clone());
        self.push("softmax_rows", &[a], data, a.shape().to_vec(), || Adjoint::Softmax { y, n })
    }

    /// Row-wise layer normalization with affine scale `gamma[n]` and shift `beta[n]`.
    pub fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (m, n) = matrix("layer_norm", x)?;
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                xhat[i * n + j] = (row[j] - mean) * inv;
            }
        }
        let data = xhat
            .chunks(n)
            .flat_map(|r| r.iter().zip(gamma.data()).zip(beta.data()).map(|((v, g), b)| v * g + b))
            .collect();
        let xhat = Arc::new(xhat);
        self.push("layer_norm", &[x, gamma, beta], data, vec![m, n], || Adjoint::LayerNorm {
            xhat,
            inv_std,
            gamma: gamma.shared(),
            n,
        })
    }

    /// Scales each row to unit euclidean length; all-zero rows stay zero.
    pub fn row_normalize(&mut self, a: &Tensor) -> Result<Tensor> {
        let (_, n) = matrix("row_normalize", a)?;
        let mut data = a.to_vec();
        let mut norms = Vec::with_capacity(a.rows());
        for row in data.chunks_mut(n) {
            let norm = kernels::dot(row, row).sqrt();
            norms.push(norm);
            if norm > 0.0 {
                for v in row {
                    *v /= norm;
                }
            }
        }
        let y = Arc::new(data.clone());
        self.push("row_normalize", &[a], data, a.shape().to_vec(), || Adjoint::RowNormalize {
            y,
            norms,
            cols: n,
        })
    }

    // ---- reductions ------------------------------------------------------

    /// `mean(a²)` as a scalar.
    pub fn mean_square(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.numel() == 0 {
            return Err(Error::shape("mean_square", a.shape(), &[1]));
        }
        let v = a.data().iter().map(|x| x * x).sum::<f64>() / a.numel() as f64;
        self.push("mean_square", &[a], vec![v], Vec::new(), || Adjoint::MeanSquare { a: a.shared() })
    }

    /// Euclidean norm of all entries as a scalar.
    pub fn norm(&mut self, a: &Tensor) -> Result<Tensor> {
        let norm = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push("norm", &[a], vec![norm], Vec::new(), || Adjoint::Norm { a: a.shared(), norm })
    }

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        let v = a.data().iter().sum();
        let len = a.numel();
        self.push("sum", &[a], vec![v], Vec::new(), || Adjoint::Sum { len })
    }

    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.numel() == 0 {
            return Err(Error::shape("mean", a.shape(), &[1]));
        }
        let s = self.sum(a)?;
        self.scale(&s, 1.0 / a.numel() as f64)
    }

    // ---- layout ----------------------------------------------------------

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != a.numel() {
            return Err(Error::shape("reshape", a.shape(), shape));
        }
        let input = self.node_of("reshape", a)?;
        let node = self.record(vec![input], || Adjoint::Identity);
        Ok(Tensor::from_parts(a.shared(), shape.to_vec(), node))
    }

    /// Selects rows `idx` (repeats allowed) of a matrix.
    pub fn gather_rows(&mut self, a: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let (m, n) = matrix("gather_rows", a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", a.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(a.row(i));
        }
        let idx = idx.to_vec();
        let rows = idx.len();
        self.push("gather_rows", &[a], data, vec![rows, n], || Adjoint::GatherRows {
            idx,
            in_rows: m,
            cols: n,
        })
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_rows: no inputs"))?;
        let (_, n) = matrix("concat_rows", first)?;
        let mut rows = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for p in parts {
            let (m, n2) = matrix("concat_rows", p)?;
            if n2 != n {
                return Err(Error::shape("concat_rows", first.shape(), p.shape()));
            }
            rows.push(m);
            data.extend_from_slice(p.data());
        }
        let total = rows.iter().sum();
        self.push("concat_rows", parts, data, vec![total, n], || Adjoint::ConcatRows { rows, cols: n })
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = matrix("slice_cols", a)?;
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", a.shape(), &[start, end]));
        }
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&a.row(i)[start..end]);
        }
        self.push("slice_cols", &[a], data, vec![m, end - start], || Adjoint::SliceCols {
            start,
            end,
            cols: n,
        })
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_cols: no inputs"))?;
        let (m, _) = matrix("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (m2, w) = matrix("concat_cols", p)?;
            if m2 != m {
                return Err(Error::shape("concat_cols", first.shape(), p.shape()));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        self.push("concat_cols", parts, data, vec![m, total], || Adjoint::ConcatCols { widths, rows: m })
    }

    /// Places `a[p,q]` into a zero `[out_rows, out_cols]` matrix: entry
    /// `(r, c)` of `a` lands at `(rows[r], cols[c])`.
    pub fn scatter_grid(
        &mut self,
        a: &Tensor,
        rows: &[usize],
        cols: &[usize],
        out_rows: usize,
        out_cols: usize,
    ) -> Result<Tensor> {
        let (p, q) = matrix("scatter_grid", a)?;
        if rows.len() != p
            || cols.len() != q
            || rows.iter().any(|&r| r >= out_rows)
            || cols.iter().any(|&c| c >= out_cols)
        {
            return Err(Error::shape("scatter_grid", a.shape(), &[out_rows, out_cols]));
        }
        let mut data = vec![0.0; out_rows * out_cols];
        for (r, &rr) in rows.iter().enumerate() {
            for (c, &cc) in cols.iter().enumerate() {
                data[rr * out_cols + cc] = a.data()[r * q + c];
            }
        }
        let (rows, cols) = (rows.to_vec(), cols.to_vec());
        self.push("scatter_grid", &[a], data, vec![out_rows, out_cols], || Adjoint::ScatterGrid {
            rows,
            cols,
            out_cols,
        })
    }

    /// Cuts an image `[c,h,w]` into non-overlapping `p×p` patches in raster
    /// order; row `i` holds patch `i` flattened as `(channel, y, x)`.
    pub fn patchify(&mut self, img: &Tensor, p: usize) -> Result<Tensor> {
        let (c, h, w) = match *img.shape() {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::shape("patchify", img.shape(), &[0, 0, 0])),
        };
        if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
            return Err(Error::shape("patchify", img.shape(), &[p, p]));
        }
        let (gh, gw) = (h / p, w / p);
        let width = c * p * p;
        let mut data = vec![0.0; gh * gw * width];
        for_each_patch(c, h, w, p, |patch, k, pix| data[patch * width + k] = img.data()[pix]);
        self.push("patchify", &[img], data, vec![gh * gw, width], || Adjoint::Patchify { c, h, w, p })
    }

    /// Row `i·m + j` of the result is `a[i] + b[j]` for `a[n,h]`, `b[m,h]`.
    pub fn pairwise_add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (n, h) = matrix("pairwise_add", a)?;
        let (m, h2) = matrix("pairwise_add", b)?;
        if h != h2 {
            return Err(Error::shape("pairwise_add", a.shape(), b.shape()));
        }
        let mut data = Vec::with_capacity(n * m * h);
        for i in 0..n {
            for j in 0..m {
                data.extend(a.row(i).iter().zip(b.row(j)).map(|(x, y)| x + y));
            }
        }
        self.push("pairwise_add", &[a, b], data, vec![n * m, h], || Adjoint::PairwiseAdd { n, m, h })
    }

    // ---- differentiation --------------------------------------------------

    /// Reverse pass from a scalar loss. Consumes the recorded operations.
    pub fn backward(&mut self, loss: &Tensor) -> Result<Gradients> {
        if !loss.is_scalar() {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Reverse pass from arbitrary output seeds `(tensor, ∂L/∂tensor)`;
    /// seeds on the same tensor accumulate. Consumes the recorded operations.
    pub fn backward_seeded(&mut self, seeds: &[(&Tensor, Vec<f64>)]) -> Result<Gradients> {
        if self.records.is_empty() {
            return Err(Error::EmptyTape);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes];
        for (t, g) in seeds {
            if g.len() != t.numel() {
                return Err(Error::shape("backward", t.shape(), &[g.len()]));
            }
            if let Some(i) = self.node_of("backward", t)? {
                add_into(&mut grads[i], g.clone());
            }
        }
        let records = std::mem::take(&mut self.records);
        for rec in records.into_iter().rev() {
            let Some(g) = grads[rec.output].take() else {
                continue;
            };
            let input_grads = rec.adjoint.apply(&g, rec.inputs.len());
            for (slot, ig) in rec.inputs.iter().zip(input_grads) {
                if let (Some(i), Some(ig)) = (slot, ig) {
                    add_into(&mut grads[*i], ig);
                }
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn for_each_patch(c: usize, h: usize, w: usize, p: usize, mut f: impl FnMut(usize, usize, usize)) {
    let gw = w / p;
    for gy in 0..h / p {
        for gx in 0..gw {
            let patch = gy * gw + gx;
            let mut k = 0;
            for ch in 0..c {
                for y in 0..p {
                    for x in 0..p {
                        f(patch, k, (ch * h + gy * p + y) * w + gx * p + x);
                        k += 1;
                    }
                }
            }
        }
    }
}

impl Adjoint {
    /// Input gradients for an output gradient `g`; `None` where an input
    /// receives nothing.
    fn apply(self, g: &[f64], arity: usize) -> Vec<Option<Vec<f64>>> {
        let one = |v: Vec<f64>| vec![Some(v)];
        match self {
            Adjoint::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            Adjoint::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
            Adjoint::Mul { a, b } => vec![
                Some(g.iter().zip(b.iter()).map(|(g, b)| g * b).collect()),
                Some(g.iter().zip(a.iter()).map(|(g, a)| g * a).collect()),
            ],
            Adjoint::Scale(c) => one(g.iter().map(|v| v * c).collect()),
            Adjoint::Identity => one(g.to_vec()),
            Adjoint::AddBias { m, n } => {
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        gb[j] += g[i * n + j];
                    }
                }
                vec![Some(g.to_vec()), Some(gb)]
            }
            Adjoint::MatMul { a, b, m, k, n } => vec![
                Some(kernels::matmul_nt(g, &b, m, n, k)),
                Some(kernels::matmul_tn(&a, g, m, k, n)),
            ],
            Adjoint::MatMulNt { a, b, m, k, n } => vec![
                Some(kernels::matmul(g, &b, m, n, k)),
                Some(kernels::matmul_tn(g, &a, m, n, k)),
            ],
            Adjoint::Transpose { m, n } => one(kernels::transpose(g, n, m)),
            Adjoint::Conv { cols, w, dims, oc } => {
                let ckk = dims.c * dims.kh * dims.kw;
                let hw = dims.oh * dims.ow;
                let gw = kernels::matmul_nt(g, &cols, oc, hw, ckk);
                let gcols = kernels::matmul_tn(&w, g, oc, ckk, hw);
                let gx = kernels::col2im(&gcols, &dims);
                let gb = g.chunks(hw).map(|plane| plane.iter().sum()).collect();
                vec![Some(gx), Some(gw), Some(gb)]
            }
            Adjoint::Relu { y } => one(g.iter().zip(y.iter()).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 }).collect()),
            Adjoint::Sigmoid { y } => one(g.iter().zip(y.iter()).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Adjoint::Softmax { y, n } => {
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - s);
                    }
                }
                one(gx)
            }
            Adjoint::LayerNorm { xhat, inv_std, gamma, n } => {
                let m = inv_std.len();
                let mut gx = vec![0.0; m * n];
                let mut ggamma = vec![0.0; n];
                let mut gbeta = vec![0.0; n];
                let mut gxhat = vec![0.0; n];
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    let xr = &xhat[i * n..(i + 1) * n];
                    for j in 0..n {
                        ggamma[j] += gr[j] * xr[j];
                        gbeta[j] += gr[j];
                        gxhat[j] = gr[j] * gamma[j];
                    }
                    let s1: f64 = gxhat.iter().sum();
                    let s2: f64 = gxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                    let scale = inv_std[i] / n as f64;
                    for j in 0..n {
                        gx[i * n + j] = scale * (n as f64 * gxhat[j] - s1 - xr[j] * s2);
                    }
                }
                vec![Some(gx), Some(ggamma), Some(gbeta)]
            }
            Adjoint::MulConst { mask } => one(g.iter().zip(mask.iter()).map(|(g, m)| g * m).collect()),
            Adjoint::MeanSquare { a } => {
                let c = 2.0 * g[0] / a.len() as f64;
                one(a.iter().map(|x| c * x).collect())
            }
            Adjoint::Norm { a, norm } => {
                if norm == 0.0 {
                    one(vec![0.0; a.len()])
                } else {
                    one(a.iter().map(|x| g[0] * x / norm).collect())
                }
            }
            Adjoint::Sum { len } => one(vec![g[0]; len]),
            Adjoint::GatherRows { idx, in_rows, cols } => {
                let mut gx = vec![0.0; in_rows * cols];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..cols {
                        gx[i * cols + j] += g[r * cols + j];
                    }
                }
                one(gx)
            }
            Adjoint::ConcatRows { rows, cols } => {
                let mut out = Vec::with_capacity(rows.len());
                let mut off = 0;
                for m in rows {
                    out.push(Some(g[off..off + m * cols].to_vec()));
                    off += m * cols;
                }
                out
            }
            Adjoint::SliceCols { start, end, cols } => {
                let w = end - start;
                let m = g.len() / w;
                let mut gx = vec![0.0; m * cols];
                for i in 0..m {
                    gx[i * cols + start..i * cols + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                one(gx)
            }
            Adjoint::ConcatCols { widths, rows } => {
                let total: usize = widths.iter().sum();
                let mut outs: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(w * rows)).collect();
                for i in 0..rows {
                    let mut off = i * total;
                    for (o, &w) in outs.iter_mut().zip(&widths) {
                        o.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                outs.into_iter().map(Some).collect()
            }
            Adjoint::RowNormalize { y, norms, cols } => {
                let mut gx = vec![0.0; g.len()];
                for (i, &norm) in norms.iter().enumerate() {
                    if norm == 0.0 {
                        continue;
                    }
                    let gr = &g[i * cols..(i + 1) * cols];
                    let yr = &y[i * cols..(i + 1) * cols];
                    let proj = kernels::dot(gr, yr);
                    for j in 0..cols {
                        gx[i * cols + j] = (gr[j] - yr[j] * proj) / norm;
                    }
                }
                one(gx)
            }
            Adjoint::ScatterGrid { rows, cols, out_cols } => {
                let q = cols.len();
                let mut gx = vec![0.0; rows.len() * q];
                for (r, &rr) in rows.iter().enumerate() {
                    for (c, &cc) in cols.iter().enumerate() {
                        gx[r * q + c] = g[rr * out_cols + cc];
                    }
                }
                one(gx)
            }
            Adjoint::Patchify { c, h, w, p } => {
                let width = c * p * p;
                let mut gx = vec![0.0; c * h * w];
                for_each_patch(c, h, w, p, |patch, k, pix| gx[pix] += g[patch * width + k]);
                one(gx)
            }
            Adjoint::PairwiseAdd { n, m, h } => {
                let mut ga = vec![0.0; n * h];
                let mut gb = vec![0.0; m * h];
                for i in 0..n {
                    for j in 0..m {
                        let row = &g[(i * m + j) * h..(i * m + j + 1) * h];
                        for k in 0..h {
                            ga[i * h + k] += row[k];
                            gb[j * h + k] += row[k];
                        }
                    }
                }
                vec![Some(ga), Some(gb)]
            }
        }
        .into_iter()
        .chain(std::iter::repeat_with(|| None))
        .take(arity)
        .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::inference();
        let x = Tensor::new(vec![0.0, 0.0], &[1, 2]).unwrap();
        assert_eq!(tape.softmax_rows(&x).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::inference();
        let x = Tensor::new(vec![-1.0, 2.0, 0.0], &[3]).unwrap();
        assert_eq!(tape.relu(&x).unwrap().data(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn conv_of_ones_sums_the_window() {
        let mut tape = Tape::inference();
        let x = Tensor::new(vec![1.0; 16], &[1, 4, 4]).unwrap();
        let w = Tensor::new(vec![1.0; 9], &[1, 1, 3, 3]).unwrap();
        let b = Tensor::zeros(&[1]);
        let geom = ConvGeom { stride: 1, pad_lo: 0, pad_hi: 0 };
        let y = tape.conv2d(&x, &w, &b, geom).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[9.0; 4]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3.0], &[]).unwrap();
        let y = tape.mul(&x, &x).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[6.0]);
        assert!(tape.is_empty());
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![0.0], &[]).unwrap();
        let y = tape.sigmoid(&x).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let y = tape.scale(&x, 2.0).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn backward_rejects_empty_tape() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0], &[]).unwrap();
        assert!(matches!(tape.backward(&x), Err(Error::EmptyTape)));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::inference();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = tape.matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut tape = Tape::inference();
        let x = tape.leaf(vec![1.0, 2.0], &[1, 2]).unwrap();
        let y = tape.softmax_rows(&x).unwrap();
        assert!(!y.requires_grad());
        assert!(tape.is_empty());
    }

    #[test]
    fn foreign_tensors_are_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(vec![1.0], &[]).unwrap();
        assert!(matches!(b.scale(&x, 2.0), Err(Error::ForeignTensor(_))));
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::inference();
        let x = Tensor::new(vec![1.0; 100], &[100]).unwrap();
        let y = tape.dropout(&x, 0.5, false, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
        let y = tape.dropout(&x, 0.5, true, &mut rng).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
