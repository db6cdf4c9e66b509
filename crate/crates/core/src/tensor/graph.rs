use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gemm::{gemm, Strided};
use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRowBias { x: Var, bias: Var },
    Affine { x: Var, mul: f64 },
    ScaleBy { x: Var, s: Var },
    Sigmoid { x: Var },
    Relu { x: Var },
    Abs { x: Var },
    SoftmaxRows { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    L2Norm { x: Var },
    Reshape { x: Var },
    Transpose { x: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Conv2d(Box<ConvSaved>),
    MaxPool2d { x: Var, argmax: Vec<usize> },
    UpsampleNearest { x: Var, factor: usize },
    Dropout { x: Var, mask: Vec<f64> },
    Patchify { x: Var, patch: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::Affine { .. } => "affine",
            Op::ScaleBy { .. } => "scale_by",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::Abs { .. } => "abs",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::L2Norm { .. } => "l2_norm",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Conv2d(_) => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::UpsampleNearest { .. } => "upsample_nearest",
            Op::Dropout { .. } => "dropout",
            Op::Patchify { .. } => "patchify",
        }
    }
}

#[derive(Debug)]
struct ConvSaved {
    x: Var,
    w: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
    /// im2col matrix, (C·kh·kw) × (H'·W').
    cols: Vec<f64>,
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. Nodes are appended in evaluation order, which is a
/// topological order, so backward is a single reverse sweep.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    grads: Vec<Option<Tensor>>,
    training: bool,
    check_finite: bool,
    rng: ChaCha8Rng,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// View of a tensor as `outer × axis × inner` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    /// A graph without parameter bindings, in training mode.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
            grads: Vec::new(),
            training: true,
            check_finite: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            param_vars: vec![None; params.len()],
            ..Self::new()
        }
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Seeds the dropout mask stream.
    pub fn set_seed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// When enabled every primitive rejects non-finite results.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::numeric(format!(
                "{} produced a non-finite value (node {})",
                op.name(),
                self.nodes.len()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter. Repeated calls return the same node, so every
    /// use of a parameter accumulates into one gradient.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .params
            .ok_or_else(|| Error::contract("graph has no parameter store"))?;
        if id.index() >= store.len() {
            return Err(Error::contract(format!("unknown parameter id {}", id.index())));
        }
        if let Some(v) = self.param_vars[id.index()] {
            return Ok(v);
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        Ok(v)
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            Strided::rows(self.value(a).data(), k),
            Strided::rows(self.value(b).data(), n),
            0.0,
            &mut out,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose needs a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { x }, &[x])
    }

    // ---------------------------------------------------------------- elementwise

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{op} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip(a, b, |x, y| x + y);
        self.push(t, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip(a, b, |x, y| x - y);
        self.push(t, Op::Sub { a, b }, &[a, b])
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip(a, b, |x, y| x * y);
        self.push(t, Op::Mul { a, b }, &[a, b])
    }

    /// `x + bias` with `bias` broadcast along the last axis of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.value(bias).numel() != n {
            return Err(Error::dim(format!(
                "bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        self.push(t, Op::AddRowBias { x, bias }, &[x, bias])
    }

    /// `mul·x + add`.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let t = self.value(x).map(|v| mul * v + add);
        self.push(t, Op::Affine { x, mul }, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    /// `s·x` for a one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::dim(format!(
                "scale_by needs a scalar factor, got {:?}",
                self.shape(s)
            )));
        }
        let k = self.value(s).item();
        let t = self.value(x).map(|v| k * v);
        self.push(t, Op::ScaleBy { x, s }, &[x, s])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 });
        self.push(t, Op::Relu { x }, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::abs);
        self.push(t, Op::Abs { x }, &[x])
    }

    /// Softmax over the last axis, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = match shape.last() {
            Some(&n) if n > 0 => n,
            _ => return Err(Error::dim(format!("softmax over empty last axis of {shape:?}"))),
        };
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(t, Op::SoftmaxRows { x }, &[x])
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let m = t.sum() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean { x }, &[x])
    }

    /// Euclidean norm of the flattened tensor.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).l2_norm();
        self.push(Tensor::scalar(n), Op::L2Norm { x }, &[x])
    }

    // ---------------------------------------------------------------- shape

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        self.push(t, Op::Reshape { x }, &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat along axis {axis} of {base:?} and {s:?}"
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim(format!(
                "slice [{start}, {}) of axis {axis} for {shape:?}",
                start + len
            )));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let t = Tensor::new(new_shape, out)?;
        self.push(t, Op::Slice { x, axis, start }, &[x])
    }

    // ---------------------------------------------------------------- spatial

    /// 2-D cross-correlation of `x: C×H×W` with `w: C'×C×kh×kw`, optional bias `[C']`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || stride == 0 {
            return Err(Error::dim(format!(
                "conv2d input {sx:?} with kernels {sw:?} (stride {stride})"
            )));
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::dim(format!(
                "kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != co {
                return Err(Error::dim(format!(
                    "conv bias {:?} for {co} output channels",
                    self.shape(b)
                )));
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let ckk = c * kh * kw;
        let hw = ho * wo;
        let src = self.value(x).data();
        let mut cols = vec![0.0; ckk * hw];
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[(ci * h + iy as usize) * wd..][..wd];
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                dst[oy * wo + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; co * hw];
        gemm(
            co,
            ckk,
            hw,
            Strided::rows(self.value(w).data(), ckk),
            Strided::rows(&cols, hw),
            0.0,
            &mut out,
        );
        if let Some(b) = bias {
            for (row, bb) in out.chunks_mut(hw).zip(self.value(b).data()) {
                for v in row {
                    *v += bb;
                }
            }
        }
        let t = Tensor::new(vec![co, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            t,
            Op::Conv2d(Box::new(ConvSaved {
                x,
                w,
                bias,
                stride,
                pad,
                cols,
            })),
            &inputs,
        )
    }

    /// Non-overlapping max pooling with a `k×k` window (trailing rows/columns dropped).
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || k == 0 || s[1] < k || s[2] < k {
            return Err(Error::dim(format!("maxpool {k}×{k} over {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / k, w / k);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_ix = 0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let ix = (ci * h + oy * k + dy) * w + ox * k + dx;
                            if src[ix] > best || dy + dx == 0 {
                                best = src[ix];
                                best_ix = ix;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_ix);
                }
            }
        }
        let t = Tensor::new(vec![c, ho, wo], out)?;
        self.push(t, Op::MaxPool2d { x, argmax }, &[x])
    }

    /// Nearest-neighbour upsampling of a `C×H×W` map by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || factor == 0 {
            return Err(Error::dim(format!("upsample ×{factor} of {s:?}")));
        }
        if factor == 1 {
            return Ok(x);
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ci in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(ci * ho + y) * wo + xx] = src[(ci * h + y / factor) * w + xx / factor];
                }
            }
        }
        let t = Tensor::new(vec![c, ho, wo], out)?;
        self.push(t, Op::UpsampleNearest { x, factor }, &[x])
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut t = self.value(x).clone();
        for (v, m) in t.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(t, Op::Dropout { x, mask }, &[x])
    }

    /// Splits `C×H×W` into non-overlapping `p×p` patches, one row per patch in
    /// row-major patch order; each row lists the patch values channel-major.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || patch == 0 || s[1] % patch != 0 || s[2] % patch != 0 {
            return Err(Error::dim(format!(
                "patch size {patch} does not divide the spatial extent of {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (gh, gw) = (h / patch, w / patch);
        let feat = c * patch * patch;
        let src = self.value(x).data();
        let mut out = vec![0.0; gh * gw * feat];
        for (dst, src_ix) in patch_index_map(c, h, w, patch) {
            out[dst] = src[src_ix];
        }
        let t = Tensor::new(vec![gh * gw, feat], out)?;
        self.push(t, Op::Patchify { x, patch }, &[x])
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a one-element `loss`. Gradients of leaves are then
    /// available through [`Graph::grad`] and [`Graph::param_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(nodes, i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter bound to this graph.
    pub fn param_grads(&self) -> Result<Gradients> {
        let mut out = Gradients::new(self.param_vars.len());
        for (i, v) in self.param_vars.iter().enumerate() {
            if let Some(g) = v.and_then(|v| self.grad(v)) {
                out.accumulate(ParamId(i), g)?;
            }
        }
        Ok(out)
    }
}

/// `(destination, source)` flat index pairs for [`Graph::patchify`].
fn patch_index_map(
    c: usize,
    h: usize,
    w: usize,
    patch: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let (gh, gw) = (h / patch, w / patch);
    let feat = c * patch * patch;
    (0..gh * gw).flat_map(move |tok| {
        let (py, px) = (tok / gw, tok % gw);
        (0..feat).map(move |f| {
            let ci = f / (patch * patch);
            let dy = (f / patch) % patch;
            let dx = f % patch;
            let src = (ci * h + py * patch + dy) * w + px * patch + dx;
            (tok * feat + f, src)
        })
    })
}

fn accumulate(nodes: &[Node<'_>], grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => {
            let shape = nodes[v.0].value.shape().to_vec();
            *slot = Some(Tensor::new(shape, g).expect("gradient matches value shape"));
        }
    }
}

fn backward_node(
    nodes: &[Node<'_>],
    i: usize,
    g: &Tensor,
    grads: &mut [Option<Tensor>],
) -> Result<()> {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    let needs = |v: Var| nodes[v.0].requires_grad;
    let out = &nodes[i].value;
    let gd = g.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if needs(*a) {
                let mut ga = vec![0.0; m * k];
                gemm(
                    m,
                    n,
                    k,
                    Strided::rows(gd, n),
                    Strided::transposed(val(*b).data(), n),
                    0.0,
                    &mut ga,
                );
                accumulate(nodes, grads, *a, ga);
            }
            if needs(*b) {
                let mut gb = vec![0.0; k * n];
                gemm(
                    k,
                    m,
                    n,
                    Strided::transposed(val(*a).data(), k),
                    Strided::rows(gd, n),
                    0.0,
                    &mut gb,
                );
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, gd.to_vec());
            accumulate(nodes, grads, *b, gd.to_vec());
        }
        Op::Sub { a, b } => {
            accumulate(nodes, grads, *a, gd.to_vec());
            accumulate(nodes, grads, *b, gd.iter().map(|v| -v).collect());
        }
        Op::Mul { a, b } => {
            let (da, db) = (val(*a).data(), val(*b).data());
            if needs(*a) {
                accumulate(nodes, grads, *a, gd.iter().zip(db).map(|(g, y)| g * y).collect());
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, gd.iter().zip(da).map(|(g, x)| g * x).collect());
            }
        }
        Op::AddRowBias { x, bias } => {
            accumulate(nodes, grads, *x, gd.to_vec());
            if needs(*bias) {
                let n = val(*bias).numel();
                let mut gb = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(nodes, grads, *bias, gb);
            }
        }
        Op::Affine { x, mul } => {
            accumulate(nodes, grads, *x, gd.iter().map(|g| g * mul).collect());
        }
        Op::ScaleBy { x, s } => {
            let k = val(*s).item();
            if needs(*x) {
                accumulate(nodes, grads, *x, gd.iter().map(|g| g * k).collect());
            }
            if needs(*s) {
                let gs: f64 = gd.iter().zip(val(*x).data()).map(|(g, v)| g * v).sum();
                accumulate(nodes, grads, *s, vec![gs]);
            }
        }
        Op::Sigmoid { x } => {
            let gx = gd
                .iter()
                .zip(out.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::Relu { x } => {
            let gx = gd
                .iter()
                .zip(val(*x).data())
                .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::Abs { x } => {
            let gx = gd
                .iter()
                .zip(val(*x).data())
                .map(|(g, v)| {
                    if *v > 0.0 {
                        *g
                    } else if *v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::SoftmaxRows { x } => {
            let n = *out.shape().last().expect("softmax has an axis");
            let mut gx = vec![0.0; out.numel()];
            for ((gr, yr), dst) in gd.chunks(n).zip(out.data().chunks(n)).zip(gx.chunks_mut(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Sum { x } => {
            accumulate(nodes, grads, *x, vec![gd[0]; val(*x).numel()]);
        }
        Op::Mean { x } => {
            let n = val(*x).numel();
            accumulate(nodes, grads, *x, vec![gd[0] / n as f64; n]);
        }
        Op::L2Norm { x } => {
            let norm = out.item();
            let gx = if norm > 0.0 {
                val(*x).data().iter().map(|v| gd[0] * v / norm).collect()
            } else {
                vec![0.0; val(*x).numel()]
            };
            accumulate(nodes, grads, *x, gx);
        }
        Op::Reshape { x } => {
            accumulate(nodes, grads, *x, gd.to_vec());
        }
        Op::Transpose { x } => {
            let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
            let mut gx = vec![0.0; r * c];
            for i2 in 0..r {
                for j in 0..c {
                    gx[i2 * c + j] = gd[j * r + i2];
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &v in inputs {
                let len = val(v).shape()[*axis];
                if needs(v) {
                    let mut gv = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gv.extend_from_slice(&gd[base..base + len * inner]);
                    }
                    accumulate(nodes, grads, v, gv);
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, ext, inner) = split_axis(val(*x).shape(), *axis);
            let len = out.shape()[*axis];
            let mut gx = vec![0.0; val(*x).numel()];
            for o in 0..outer {
                let base = (o * ext + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Conv2d(saved) => conv_backward(nodes, saved, out, gd, grads),
        Op::MaxPool2d { x, argmax } => {
            let mut gx = vec![0.0; val(*x).numel()];
            for (gv, &ix) in gd.iter().zip(argmax) {
                gx[ix] += gv;
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::UpsampleNearest { x, factor } => {
            let s = val(*x).shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            let (ho, wo) = (h * factor, w * factor);
            let mut gx = vec![0.0; c * h * w];
            for ci in 0..c {
                for y in 0..ho {
                    for xx in 0..wo {
                        gx[(ci * h + y / factor) * w + xx / factor] += gd[(ci * ho + y) * wo + xx];
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Dropout { x, mask } => {
            accumulate(nodes, grads, *x, gd.iter().zip(mask).map(|(g, m)| g * m).collect());
        }
        Op::Patchify { x, patch } => {
            let s = val(*x).shape();
            let mut gx = vec![0.0; val(*x).numel()];
            for (dst, src) in patch_index_map(s[0], s[1], s[2], *patch) {
                gx[src] += gd[dst];
            }
            accumulate(nodes, grads, *x, gx);
        }
    }
    Ok(())
}

fn conv_backward(
    nodes: &[Node<'_>],
    saved: &ConvSaved,
    out: &Tensor,
    gd: &[f64],
    grads: &mut [Option<Tensor>],
) {
    let xs = nodes[saved.x.0].value.shape();
    let ws = nodes[saved.w.0].value.shape();
    let (c, h, wd) = (xs[0], xs[1], xs[2]);
    let (co, kh, kw) = (ws[0], ws[2], ws[3]);
    let (ho, wo) = (out.shape()[1], out.shape()[2]);
    let hw = ho * wo;
    let ckk = c * kh * kw;

    if nodes[saved.w.0].requires_grad {
        let mut gw = vec![0.0; co * ckk];
        gemm(
            co,
            hw,
            ckk,
            Strided::rows(gd, hw),
            Strided::transposed(&saved.cols, hw),
            0.0,
            &mut gw,
        );
        accumulate(nodes, grads, saved.w, gw);
    }
    if let Some(b) = saved.bias {
        if nodes[b.0].requires_grad {
            let gb = gd.chunks(hw).map(|row| row.iter().sum()).collect();
            accumulate(nodes, grads, b, gb);
        }
    }
    if nodes[saved.x.0].requires_grad {
        let mut gcols = vec![0.0; ckk * hw];
        gemm(
            ckk,
            co,
            hw,
            Strided::transposed(nodes[saved.w.0].value.data(), ckk),
            Strided::rows(gd, hw),
            0.0,
            &mut gcols,
        );
        let mut gx = vec![0.0; c * h * wd];
        let (stride, pad) = (saved.stride, saved.pad);
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let srow = &gcols[row * hw..(row + 1) * hw];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * wd;
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                gx[base + ix as usize] += srow[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        accumulate(nodes, grads, saved.x, gx);
    }
}
