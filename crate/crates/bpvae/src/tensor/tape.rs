//! The recording tape: every operation appends a node holding the computed
//! value plus enough bookkeeping to run the backward pass.

use super::conv::{col2im_add, conv_geometry, conv_transpose_geometry, im2col, ConvGeom, Padding};
use super::gemm::gemm;
use super::{Tensor, TensorError};

/// Floor applied inside `log`; inputs below it produce `ln(LOG_EPS)` and a
/// zero gradient.
pub const LOG_EPS: f32 = 1e-7;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

enum Op {
    Leaf,
    Add { lhs: TensorId, rhs: TensorId },
    Sub { lhs: TensorId, rhs: TensorId },
    Mul { lhs: TensorId, rhs: TensorId },
    AddScalar { input: TensorId },
    MulScalar { input: TensorId, value: f32 },
    Matmul { lhs: TensorId, rhs: TensorId },
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        geom: ConvGeom,
        /// im2col patches kept for the backward pass; absent when no input
        /// requires gradients.
        cols: Option<Vec<f32>>,
    },
    ConvT2d {
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        geom: ConvGeom,
    },
    LeakyRelu { input: TensorId, slope: f32 },
    Sigmoid { input: TensorId },
    Exp { input: TensorId },
    Log { input: TensorId },
    Clamp { input: TensorId, lo: f32, hi: f32 },
    Sum { input: TensorId },
    Mean { input: TensorId },
    RowSum { input: TensorId },
    Reshape { input: TensorId },
    Concat { inputs: Vec<TensorId>, axis: usize },
    Slice { input: TensorId, axis: usize, start: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only computation record. Handles returned by ops always refer to
/// earlier nodes, so a single reverse sweep visits consumers before producers.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn fold_chunks(g: &[f32], len: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; len];
    for chunk in g.chunks(len) {
        for (o, c) in out.iter_mut().zip(chunk) {
            *o += c;
        }
    }
    out
}

fn add_into(slot: &mut Option<Vec<f32>>, src: &[f32]) {
    match slot {
        Some(buf) => {
            debug_assert_eq!(buf.len(), src.len());
            for (b, s) in buf.iter_mut().zip(src) {
                *b += s;
            }
        }
        None => *slot = Some(src.to_vec()),
    }
}

fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    /// Records an input tensor as-is, keeping its requires_grad flag.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        self.push(t, Op::Leaf)
    }

    /// Records an input that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> TensorId {
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { value, op });
        TensorId(self.nodes.len() - 1)
    }

    fn get(&self, id: TensorId) -> Result<&Tensor, TensorError> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(TensorError::UnknownId {
                id: id.0,
                len: self.nodes.len(),
            })
    }

    fn elementwise_pair(
        &self,
        op: &'static str,
        lhs: TensorId,
        rhs: TensorId,
    ) -> Result<(), TensorError> {
        let a = self.get(lhs)?;
        let b = self.get(rhs)?;
        if a.shape() == b.shape() || is_suffix(a.shape(), b.shape()) {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })
        }
    }

    fn binary_map(
        &mut self,
        lhs: TensorId,
        rhs: TensorId,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> TensorId {
        let a = &self.nodes[lhs.0].value;
        let b = &self.nodes[rhs.0].value;
        let mut data = Vec::with_capacity(a.numel());
        for chunk in a.data().chunks(b.numel()) {
            for (x, y) in chunk.iter().zip(b.data()) {
                data.push(f(*x, *y));
            }
        }
        let rg = a.requires_grad() || b.requires_grad();
        let mut out = Tensor::from_vec(a.shape(), data).expect("shape already validated");
        out.requires_grad = rg;
        self.push(out, op)
    }

    pub fn add(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise_pair("add", lhs, rhs)?;
        Ok(self.binary_map(lhs, rhs, |a, b| a + b, Op::Add { lhs, rhs }))
    }

    pub fn sub(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise_pair("sub", lhs, rhs)?;
        Ok(self.binary_map(lhs, rhs, |a, b| a - b, Op::Sub { lhs, rhs }))
    }

    pub fn mul(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise_pair("mul", lhs, rhs)?;
        Ok(self.binary_map(lhs, rhs, |a, b| a * b, Op::Mul { lhs, rhs }))
    }

    fn unary_map(&mut self, input: TensorId, f: impl Fn(f32) -> f32, op: Op) -> TensorId {
        let x = &self.nodes[input.0].value;
        let data: Vec<f32> = x.data().iter().map(|v| f(*v)).collect();
        let rg = x.requires_grad();
        let mut out = Tensor::from_vec(x.shape(), data).expect("same shape");
        out.requires_grad = rg;
        self.push(out, op)
    }

    pub fn add_scalar(&mut self, input: TensorId, value: f32) -> Result<TensorId, TensorError> {
        self.get(input)?;
        Ok(self.unary_map(input, |v| v + value, Op::AddScalar { input }))
    }

    pub fn mul_scalar(&mut self, input: TensorId, value: f32) -> Result<TensorId, TensorError> {
        self.get(input)?;
        Ok(self.unary_map(input, |v| v * value, Op::MulScalar { input, value }))
    }

    pub fn leaky_relu(&mut self, input: TensorId, slope: f32) -> Result<TensorId, TensorError> {
        self.get(input)?;
        Ok(self.unary_map(
            input,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu { input, slope },
        ))
    }

    pub fn sigmoid(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        self.get(input)?;
        Ok(self.unary_map(input, stable_sigmoid, Op::Sigmoid { input }))
    }

    pub fn exp(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        self.get(input)?;
        Ok(self.unary_map(input, f32::exp, Op::Exp { input }))
    }

    /// Natural log with the input floored at [`LOG_EPS`]; gradient is zero
    /// below the floor.
    pub fn log(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        self.get(input)?;
        Ok(self.unary_map(input, |v| v.max(LOG_EPS).ln(), Op::Log { input }))
    }

    /// Clamps into [lo, hi]; gradient passes through inside the range
    /// (bounds inclusive) and is zero outside.
    pub fn clamp(&mut self, input: TensorId, lo: f32, hi: f32) -> Result<TensorId, TensorError> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(TensorError::Unsupported {
                op: "clamp",
                reason: format!("empty range [{lo}, {hi}]"),
            });
        }
        self.get(input)?;
        Ok(self.unary_map(input, |v| v.clamp(lo, hi), Op::Clamp { input, lo, hi }))
    }

    pub fn matmul(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId, TensorError> {
        let a = self.get(lhs)?;
        let b = self.get(rhs)?;
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "matmul",
                shape: if a.shape().len() != 2 { a.shape().to_vec() } else { b.shape().to_vec() },
                reason: "matmul operands must be 2-D".to_string(),
            });
        }
        if a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut data = vec![0.0f32; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut data);
        let rg = a.requires_grad() || b.requires_grad();
        let mut out = Tensor::from_vec(&[m, n], data).expect("matmul shape");
        out.requires_grad = rg;
        Ok(self.push(out, Op::Matmul { lhs, rhs }))
    }

    /// 2-D convolution over NCHW input with an (out_ch, in_ch, k, k) kernel.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: Padding,
    ) -> Result<TensorId, TensorError> {
        let x = self.get(input)?;
        let w = self.get(weight)?;
        if x.shape().len() != 4 {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: x.shape().to_vec(),
                reason: "input must be (batch, channels, height, width)".to_string(),
            });
        }
        if w.shape().len() != 4 || w.shape()[2] != w.shape()[3] {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: w.shape().to_vec(),
                reason: "weight must be (out_ch, in_ch, k, k) with a square kernel".to_string(),
            });
        }
        if w.shape()[1] != x.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let (n, c, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oc, k) = (w.shape()[0], w.shape()[2]);
        let geom = conv_geometry(c, h, wid, oc, k, stride, padding)?;
        let mut rg = x.requires_grad() || w.requires_grad();
        if let Some(bid) = bias {
            let b = self.get(bid)?;
            if b.shape() != [oc] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![oc],
                    rhs: b.shape().to_vec(),
                });
            }
            rg = rg || b.requires_grad();
        }
        let patch = geom.patch_len();
        let os = geom.out_spatial();
        let x = self.get(input)?;
        let w = self.get(weight)?;
        let mut cols = vec![0.0f32; n * patch * os];
        let mut data = vec![0.0f32; n * oc * os];
        for s in 0..n {
            let xs = &x.data()[s * c * h * wid..(s + 1) * c * h * wid];
            let cs = &mut cols[s * patch * os..(s + 1) * patch * os];
            im2col(&geom, xs, cs);
            gemm(oc, patch, os, w.data(), false, cs, false, 0.0, &mut data[s * oc * os..(s + 1) * oc * os]);
        }
        if let Some(bid) = bias {
            let b = self.get(bid)?;
            for s in 0..n {
                for o in 0..oc {
                    let bv = b.data()[o];
                    for v in &mut data[(s * oc + o) * os..(s * oc + o + 1) * os] {
                        *v += bv;
                    }
                }
            }
        }
        let mut out = Tensor::from_vec(&[n, oc, geom.out_h, geom.out_w], data).expect("conv shape");
        out.requires_grad = rg;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols: rg.then_some(cols),
            },
        ))
    }

    /// Transposed 2-D convolution (the adjoint of [`Tape::conv2d`]) with an
    /// (in_ch, out_ch, k, k) kernel. Output extent per axis is
    /// (in - 1) * stride - 2 * pad + k.
    pub fn conv2d_transpose(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId, TensorError> {
        let x = self.get(input)?;
        let w = self.get(weight)?;
        if x.shape().len() != 4 {
            return Err(TensorError::InvalidShape {
                op: "conv2d_transpose",
                shape: x.shape().to_vec(),
                reason: "input must be (batch, channels, height, width)".to_string(),
            });
        }
        if w.shape().len() != 4 || w.shape()[2] != w.shape()[3] {
            return Err(TensorError::InvalidShape {
                op: "conv2d_transpose",
                shape: w.shape().to_vec(),
                reason: "weight must be (in_ch, out_ch, k, k) with a square kernel".to_string(),
            });
        }
        if w.shape()[0] != x.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_transpose",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let (n, c, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oc, k) = (w.shape()[1], w.shape()[2]);
        let geom = conv_transpose_geometry(c, h, wid, oc, k, stride, pad)?;
        let mut rg = x.requires_grad() || w.requires_grad();
        if let Some(bid) = bias {
            let b = self.get(bid)?;
            if b.shape() != [oc] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d_transpose",
                    lhs: vec![oc],
                    rhs: b.shape().to_vec(),
                });
            }
            rg = rg || b.requires_grad();
        }
        let patch = geom.patch_len();
        let os = geom.out_spatial();
        let plane = geom.in_h * geom.in_w;
        let x = self.get(input)?;
        let w = self.get(weight)?;
        let mut cols = vec![0.0f32; patch * os];
        let mut data = vec![0.0f32; n * oc * plane];
        for s in 0..n {
            let xs = &x.data()[s * c * h * wid..(s + 1) * c * h * wid];
            gemm(patch, c, os, w.data(), true, xs, false, 0.0, &mut cols);
            col2im_add(&geom, &cols, &mut data[s * oc * plane..(s + 1) * oc * plane]);
        }
        if let Some(bid) = bias {
            let b = self.get(bid)?;
            for s in 0..n {
                for o in 0..oc {
                    let bv = b.data()[o];
                    for v in &mut data[(s * oc + o) * plane..(s * oc + o + 1) * plane] {
                        *v += bv;
                    }
                }
            }
        }
        let mut out =
            Tensor::from_vec(&[n, oc, geom.in_h, geom.in_w], data).expect("conv_transpose shape");
        out.requires_grad = rg;
        Ok(self.push(out, Op::ConvT2d { input, weight, bias, geom }))
    }

    /// Sum of all elements; accumulates in f64 and returns a single-element
    /// tensor.
    pub fn sum(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let x = self.get(input)?;
        let total: f64 = x.data().iter().map(|v| *v as f64).sum();
        let rg = x.requires_grad();
        let mut out = Tensor::scalar(total as f32);
        out.requires_grad = rg;
        Ok(self.push(out, Op::Sum { input }))
    }

    /// Mean of all elements; accumulates in f64.
    pub fn mean(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let x = self.get(input)?;
        let total: f64 = x.data().iter().map(|v| *v as f64).sum();
        let n = x.numel() as f64;
        let rg = x.requires_grad();
        let mut out = Tensor::scalar((total / n) as f32);
        out.requires_grad = rg;
        Ok(self.push(out, Op::Mean { input }))
    }

    /// Sums a (rows, cols) matrix along its second axis, yielding (rows,).
    pub fn row_sum(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let x = self.get(input)?;
        if x.shape().len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "row_sum",
                shape: x.shape().to_vec(),
                reason: "row_sum expects a 2-D tensor".to_string(),
            });
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut data = Vec::with_capacity(r);
        for row in x.data().chunks(c) {
            let acc: f64 = row.iter().map(|v| *v as f64).sum();
            data.push(acc as f32);
        }
        let rg = x.requires_grad();
        let mut out = Tensor::from_vec(&[r], data).expect("row_sum shape");
        out.requires_grad = rg;
        Ok(self.push(out, Op::RowSum { input }))
    }

    pub fn reshape(&mut self, input: TensorId, shape: &[usize]) -> Result<TensorId, TensorError> {
        let x = self.get(input)?;
        let out = x.reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { input }))
    }

    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::Unsupported {
                op: "concat",
                reason: "needs at least one input".to_string(),
            });
        }
        let first = self.get(inputs[0])?.shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut axis_total = 0usize;
        for &id in inputs {
            let s = self.get(id)?.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let mut data = Vec::with_capacity(outer * axis_total * inner);
        let mut rg = false;
        for o in 0..outer {
            for &id in inputs {
                let t = &self.nodes[id.0].value;
                let d = t.shape()[axis];
                let block = &t.data()[o * d * inner..(o + 1) * d * inner];
                data.extend_from_slice(block);
            }
        }
        for &id in inputs {
            rg = rg || self.nodes[id.0].value.requires_grad();
        }
        let mut out = Tensor::from_vec(&shape, data).expect("concat shape");
        out.requires_grad = rg;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Contiguous window along one axis: indices [start, start + len).
    pub fn slice(
        &mut self,
        input: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let x = self.get(input)?;
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape,
                reason: format!(
                    "window [{start}, {}) does not fit axis of size {}",
                    start + len,
                    x.shape()[axis]
                ),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = x.requires_grad();
        let mut out = Tensor::from_vec(&out_shape, data).expect("slice shape");
        out.requires_grad = rg;
        Ok(self.push(out, Op::Slice { input, axis, start }))
    }

    /// Reverse sweep from `loss` (a single-element tensor), accumulating
    /// gradients into every recorded tensor that requires them. Repeated
    /// calls without [`Tape::zero_grads`] keep accumulating.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::UnknownId { id: loss.0, len: 0 });
        }
        let lt = self.get(loss)?;
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        if !lt.requires_grad() {
            return Ok(());
        }
        // Each pass propagates through a scratch table and folds into the
        // nodes at the end, so repeated backward calls add whole passes
        // instead of re-propagating previously accumulated seeds.
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].value.requires_grad() {
                continue;
            }
            let (glo, ghi) = grads.split_at_mut(i);
            let g: &[f32] = ghi[0].as_deref().expect("checked above");
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add { lhs, rhs } => {
                    let rlen = self.nodes[rhs.0].value.numel();
                    if self.nodes[lhs.0].value.requires_grad() {
                        add_into(&mut glo[lhs.0], g);
                    }
                    if self.nodes[rhs.0].value.requires_grad() {
                        if rlen == g.len() {
                            add_into(&mut glo[rhs.0], g);
                        } else {
                            let f = fold_chunks(g, rlen);
                            add_into(&mut glo[rhs.0], &f);
                        }
                    }
                }
                Op::Sub { lhs, rhs } => {
                    let rlen = self.nodes[rhs.0].value.numel();
                    if self.nodes[lhs.0].value.requires_grad() {
                        add_into(&mut glo[lhs.0], g);
                    }
                    if self.nodes[rhs.0].value.requires_grad() {
                        let mut f = fold_chunks(g, rlen);
                        for v in &mut f {
                            *v = -*v;
                        }
                        add_into(&mut glo[rhs.0], &f);
                    }
                }
                Op::Mul { lhs, rhs } => {
                    let rlen = self.nodes[rhs.0].value.numel();
                    if self.nodes[lhs.0].value.requires_grad() {
                        let dl: Vec<f32> = {
                            let r = self.nodes[rhs.0].value.data();
                            let mut dl = Vec::with_capacity(g.len());
                            for chunk in g.chunks(rlen) {
                                for (gi, ri) in chunk.iter().zip(r) {
                                    dl.push(gi * ri);
                                }
                            }
                            dl
                        };
                        add_into(&mut glo[lhs.0], &dl);
                    }
                    if self.nodes[rhs.0].value.requires_grad() {
                        let dr: Vec<f32> = {
                            let l = self.nodes[lhs.0].value.data();
                            let mut dr = vec![0.0f32; rlen];
                            for (ci, chunk) in g.chunks(rlen).enumerate() {
                                let lc = &l[ci * rlen..(ci + 1) * rlen];
                                for j in 0..rlen {
                                    dr[j] += chunk[j] * lc[j];
                                }
                            }
                            dr
                        };
                        add_into(&mut glo[rhs.0], &dr);
                    }
                }
                Op::AddScalar { input } => {
                    if self.nodes[input.0].value.requires_grad() {
                        add_into(&mut glo[input.0], g);
                    }
                }
                Op::MulScalar { input, value } => {
                    if self.nodes[input.0].value.requires_grad() {
                        let d: Vec<f32> = g.iter().map(|v| v * value).collect();
                        add_into(&mut glo[input.0], &d);
                    }
                }
                Op::Matmul { lhs, rhs } => {
                    let m = self.nodes[lhs.0].value.shape()[0];
                    let k = self.nodes[lhs.0].value.shape()[1];
                    let n = self.nodes[rhs.0].value.shape()[1];
                    if self.nodes[lhs.0].value.requires_grad() {
                        let da = {
                            let b = self.nodes[rhs.0].value.data();
                            let mut da = vec![0.0f32; m * k];
                            gemm(m, n, k, g, false, b, true, 0.0, &mut da);
                            da
                        };
                        add_into(&mut glo[lhs.0], &da);
                    }
                    if self.nodes[rhs.0].value.requires_grad() {
                        let db = {
                            let a = self.nodes[lhs.0].value.data();
                            let mut db = vec![0.0f32; k * n];
                            gemm(k, m, n, a, true, g, false, 0.0, &mut db);
                            db
                        };
                        add_into(&mut glo[rhs.0], &db);
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                } => {
                    let cols = cols
                        .as_ref()
                        .expect("conv2d node with gradients recorded without patch buffer");
                    let n = self.nodes[input.0].value.shape()[0];
                    let patch = geom.patch_len();
                    let os = geom.out_spatial();
                    let oc = geom.ch_out;
                    if self.nodes[weight.0].value.requires_grad() {
                        let mut dw = vec![0.0f32; oc * patch];
                        for s in 0..n {
                            gemm(
                                oc,
                                os,
                                patch,
                                &g[s * oc * os..(s + 1) * oc * os],
                                false,
                                &cols[s * patch * os..(s + 1) * patch * os],
                                true,
                                1.0,
                                &mut dw,
                            );
                        }
                        add_into(&mut glo[weight.0], &dw);
                    }
                    if self.nodes[input.0].value.requires_grad() {
                        let dx = {
                            let w = self.nodes[weight.0].value.data();
                            let plane = geom.ch_in * geom.in_h * geom.in_w;
                            let mut dx = vec![0.0f32; n * plane];
                            let mut dcols = vec![0.0f32; patch * os];
                            for s in 0..n {
                                gemm(
                                    patch,
                                    oc,
                                    os,
                                    w,
                                    true,
                                    &g[s * oc * os..(s + 1) * oc * os],
                                    false,
                                    0.0,
                                    &mut dcols,
                                );
                                col2im_add(geom, &dcols, &mut dx[s * plane..(s + 1) * plane]);
                            }
                            dx
                        };
                        add_into(&mut glo[input.0], &dx);
                    }
                    if let Some(b) = bias {
                        if self.nodes[b.0].value.requires_grad() {
                            let mut db = vec![0.0f64; oc];
                            for s in 0..n {
                                for (o, slot) in db.iter_mut().enumerate() {
                                    let base = (s * oc + o) * os;
                                    *slot += g[base..base + os].iter().map(|v| *v as f64).sum::<f64>();
                                }
                            }
                            let db: Vec<f32> = db.iter().map(|v| *v as f32).collect();
                            add_into(&mut glo[b.0], &db);
                        }
                    }
                }
                Op::ConvT2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let n = self.nodes[input.0].value.shape()[0];
                    let c = geom.ch_out;
                    let patch = geom.patch_len();
                    let os = geom.out_spatial();
                    let big = geom.ch_in * geom.in_h * geom.in_w;
                    let want_w = self.nodes[weight.0].value.requires_grad();
                    let want_x = self.nodes[input.0].value.requires_grad();
                    let (dw, dx) = {
                        let xv = self.nodes[input.0].value.data();
                        let wv = self.nodes[weight.0].value.data();
                        let mut cols_dy = vec![0.0f32; patch * os];
                        let mut dw = vec![0.0f32; if want_w { c * patch } else { 0 }];
                        let mut dx = vec![0.0f32; if want_x { n * c * os } else { 0 }];
                        for s in 0..n {
                            im2col(geom, &g[s * big..(s + 1) * big], &mut cols_dy);
                            if want_w {
                                gemm(
                                    c,
                                    os,
                                    patch,
                                    &xv[s * c * os..(s + 1) * c * os],
                                    false,
                                    &cols_dy,
                                    true,
                                    1.0,
                                    &mut dw,
                                );
                            }
                            if want_x {
                                gemm(
                                    c,
                                    patch,
                                    os,
                                    wv,
                                    false,
                                    &cols_dy,
                                    false,
                                    0.0,
                                    &mut dx[s * c * os..(s + 1) * c * os],
                                );
                            }
                        }
                        (dw, dx)
                    };
                    if want_w {
                        add_into(&mut glo[weight.0], &dw);
                    }
                    if want_x {
                        add_into(&mut glo[input.0], &dx);
                    }
                    if let Some(b) = bias {
                        if self.nodes[b.0].value.requires_grad() {
                            let oc_t = geom.ch_in;
                            let plane = geom.in_h * geom.in_w;
                            let mut db = vec![0.0f64; oc_t];
                            for s in 0..n {
                                for (o, slot) in db.iter_mut().enumerate() {
                                    let base = (s * oc_t + o) * plane;
                                    *slot +=
                                        g[base..base + plane].iter().map(|v| *v as f64).sum::<f64>();
                                }
                            }
                            let db: Vec<f32> = db.iter().map(|v| *v as f32).collect();
                            add_into(&mut glo[b.0], &db);
                        }
                    }
                }
                Op::LeakyRelu { input, slope } => {
                    if self.nodes[input.0].value.requires_grad() {
                        let d: Vec<f32> = {
                            let x = self.nodes[input.0].value.data();
                            g.iter()
                                .zip(x)
                                .map(|(gi, xi)| if *xi > 0.0 { *gi } else { gi * slope })
                                .collect()
                        };
                        add_into(&mut glo[input.0], &d);
                    }
                }
                Op::Sigmoid { input } => {
                    if self.nodes[input.0].value.requires_grad() {
                        let y = node.value.data();
                        let d: Vec<f32> = g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
                        add_into(&mut glo[input.0], &d);
                    }
                }
                Op::Exp { input } => {
                    if self.nodes[input.0].value.requires_grad() {
                        let y = node.value.data();
                        let d: Vec<f32> = g.iter().zip(y).map(|(gi, yi)| gi * yi).collect();
                        add_into(&mut glo[input.0], &d);
                    }
                }
                Op::Log { input } => {
                    if self.nodes[input.0].value.requires_grad() {
                        let d: Vec<f32> = {
                            let x = self.nodes[input.0].value.data();
                            g.iter()
                                .zip(x)
                                .map(|(gi, xi)| if *xi >= LOG_EPS { gi / xi } else { 0.0 })
                                .collect()
                        };
                        add_into(&mut glo[input.0], &d);
                    }
                }
                Op::Clamp { input, lo: a, hi: b } => {
                    if self.nodes[input.0].value.requires_grad() {
                        let d: Vec<f32> = {
                            let x = self.nodes[input.0].value.data();
                            g.iter()
                                .zip(x)
                                .map(|(gi, xi)| if *xi >= *a && *xi <= *b { *gi } else { 0.0 })
                                .collect()
                        };
                        add_into(&mut glo[input.0], &d);
                    }
                }
                Op::Sum { input } => {
                    if self.nodes[input.0].value.requires_grad() {
                        let d = vec![g[0]; self.nodes[input.0].value.numel()];
                        add_into(&mut glo[input.0], &d);
                    }
                }
                Op::Mean { input } => {
                    if self.nodes[input.0].value.requires_grad() {
                        let n = self.nodes[input.0].value.numel();
                        let d = vec![g[0] / n as f32; n];
                        add_into(&mut glo[input.0], &d);
                    }
                }
                Op::RowSum { input } => {
                    if self.nodes[input.0].value.requires_grad() {
                        let c = self.nodes[input.0].value.shape()[1];
                        let mut d = Vec::with_capacity(g.len() * c);
                        for gi in g {
                            d.extend(std::iter::repeat_n(*gi, c));
                        }
                        add_into(&mut glo[input.0], &d);
                    }
                }
                Op::Reshape { input } => {
                    if self.nodes[input.0].value.requires_grad() {
                        add_into(&mut glo[input.0], g);
                    }
                }
                Op::Concat { inputs, axis } => {
                    let out_shape = node.value.shape();
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[*axis + 1..].iter().product();
                    let total = out_shape[*axis];
                    let mut offset = 0usize;
                    for &id in inputs {
                        let d = self.nodes[id.0].value.shape()[*axis];
                        if self.nodes[id.0].value.requires_grad() {
                            let mut part = Vec::with_capacity(outer * d * inner);
                            for o in 0..outer {
                                let base = o * total * inner + offset * inner;
                                part.extend_from_slice(&g[base..base + d * inner]);
                            }
                            add_into(&mut glo[id.0], &part);
                        }
                        offset += d;
                    }
                }
                Op::Slice { input, axis, start } => {
                    if self.nodes[input.0].value.requires_grad() {
                        let in_shape = self.nodes[input.0].value.shape().to_vec();
                        let out_shape = node.value.shape();
                        let outer: usize = in_shape[..*axis].iter().product();
                        let inner: usize = in_shape[*axis + 1..].iter().product();
                        let dim = in_shape[*axis];
                        let len = out_shape[*axis];
                        let mut d = vec![0.0f32; self.nodes[input.0].value.numel()];
                        for o in 0..outer {
                            let dst = o * dim * inner + start * inner;
                            let src = o * len * inner;
                            d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                        }
                        add_into(&mut glo[input.0], &d);
                    }
                }
            }
        }
        for (i, slot) in grads.into_iter().enumerate() {
            if let Some(gv) = slot {
                if self.nodes[i].value.requires_grad() {
                    self.nodes[i].value.accumulate_grad(&gv);
                }
            }
        }
        Ok(())
    }
}
