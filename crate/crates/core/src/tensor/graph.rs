use std::rc::Rc;

use super::kernels::{self, ConvDims};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value computed on a [`Graph`].
///
/// Cloning is cheap; the tensor is shared. In no-grad mode the value lives
/// only as long as some `Var` refers to it.
#[derive(Clone, Debug)]
pub struct Var {
    id: usize,
    value: Rc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> usize {
        self.id
    }
}

const DETACHED: usize = usize::MAX;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3x3 { x: usize, w: usize, b: usize, dims: ConvDims },
    Depthwise { x: usize, w: usize, b: usize },
    Pointwise { x: usize, w: usize, b: usize },
    Relu(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Linear { x: usize, w: usize, b: usize },
    Softmax(usize),
    BatchMatmul { a: usize, b: usize },
    Add(usize, usize),
    AddBroadcast(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Concat { inputs: Vec<usize>, widths: Vec<usize> },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Pad { x: usize, pad: [usize; 4] },
    Crop { x: usize, top: usize, left: usize },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv3x3 { x, w, b, .. }
            | Op::Depthwise { x, w, b }
            | Op::Pointwise { x, w, b }
            | Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::BatchMatmul { a, b } => vec![*a, *b],
            Op::Add(a, b) | Op::AddBroadcast(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Relu(x) | Op::Softmax(x) | Op::Scale(x, _) | Op::Sum(x) | Op::Reshape(x) => vec![*x],
            Op::Permute { x, .. } | Op::Pad { x, .. } | Op::Crop { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Rc<Tensor>,
    requires_grad: bool,
}

/// Records primitive operations so gradients can be propagated backwards.
///
/// Nodes are appended in evaluation order, which is already a topological
/// order; [`Graph::backward`] walks it in reverse exactly once.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    record: bool,
    kink_hash: Option<u64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records operations for [`Graph::backward`].
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), record: true, kink_hash: None }
    }

    /// A forward-only graph: nothing is recorded and intermediates are freed
    /// as soon as their last `Var` is dropped.
    pub fn no_grad() -> Self {
        Graph { record: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Starts fingerprinting the sign pattern of every ReLU input. Two
    /// evaluations with equal fingerprints lie in the same linear piece of
    /// every ReLU.
    pub fn track_kinks(&mut self) {
        self.kink_hash = Some(0xcbf2_9ce4_8422_2325);
    }

    pub fn kink_fingerprint(&self) -> Option<u64> {
        self.kink_hash
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, op: Op, value: Tensor, leaf_grad: bool) -> Var {
        if !self.record {
            return Var { id: DETACHED, value: Rc::new(value) };
        }
        let requires_grad = match op {
            Op::Leaf => leaf_grad,
            ref op => op.inputs().iter().any(|&i| self.nodes[i].requires_grad),
        };
        if cfg!(debug_assertions) && !matches!(op, Op::Leaf) {
            let inputs_finite = op.inputs().iter().all(|&i| self.nodes[i].value.is_finite());
            debug_assert!(
                !inputs_finite || value.is_finite(),
                "non-finite output from finite inputs in {op:?}"
            );
        }
        let value = Rc::new(value);
        let id = self.nodes.len();
        self.nodes.push(Node { op, value: Rc::clone(&value), requires_grad });
        self.grads.push(None);
        Var { id, value }
    }

    fn build(&mut self, op: impl FnOnce() -> Op, value: Tensor) -> Var {
        if self.record {
            self.push(op(), value, false)
        } else {
            Var { id: DETACHED, value: Rc::new(value) }
        }
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: &Var) -> Option<Tensor> {
        if v.id == DETACHED {
            return None;
        }
        self.grads[v.id]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.id].value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn requires_grad(&self, v: &Var) -> bool {
        v.id != DETACHED && self.nodes[v.id].requires_grad
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- convolutions -------------------------------------------------

    /// 3x3 convolution, padding 1, stride 1.
    pub fn conv2d(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        let (xs, ws, bs) = (x.shape(), w.shape(), b.shape());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!("conv2d expects 4-d input and weight, got {xs:?} and {ws:?}")));
        }
        if ws[2] != 3 || ws[3] != 3 {
            return Err(Error::UnsupportedGeometry(format!(
                "conv2d supports 3x3 kernels only, got {}x{}",
                ws[2], ws[3]
            )));
        }
        if ws[1] != xs[1] {
            return Err(Error::shape(format!("conv2d: input has {} channels, weight expects {}", xs[1], ws[1])));
        }
        if bs != [ws[0]] {
            return Err(Error::shape(format!("conv2d: bias shape {bs:?} for {} outputs", ws[0])));
        }
        let dims = ConvDims { n: xs[0], cin: xs[1], cout: ws[0], h: xs[2], w: xs[3] };
        let out = kernels::conv3x3_forward(x.value.data(), w.value.data(), b.value.data(), dims);
        let value = Tensor::new([dims.n, dims.cout, dims.h, dims.w], out)?;
        Ok(self.build(|| Op::Conv3x3 { x: x.id, w: w.id, b: b.id, dims }, value))
    }

    /// Per-channel 3x3 convolution with weight `[C, 1, 3, 3]`.
    pub fn depthwise_conv2d(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != 1 {
            return Err(Error::shape(format!("depthwise_conv2d: bad shapes {xs:?}, {ws:?}")));
        }
        if ws[2] != 3 || ws[3] != 3 {
            return Err(Error::UnsupportedGeometry(format!("depthwise kernel {}x{}", ws[2], ws[3])));
        }
        if ws[0] != xs[1] || b.shape() != [xs[1]] {
            return Err(Error::shape(format!(
                "depthwise_conv2d: {} channels vs weight {ws:?}, bias {:?}",
                xs[1],
                b.shape()
            )));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let out = kernels::depthwise3x3_forward(x.value.data(), w.value.data(), b.value.data(), n, c, h, wd);
        let value = Tensor::new([n, c, h, wd], out)?;
        Ok(self.build(|| Op::Depthwise { x: x.id, w: w.id, b: b.id }, value))
    }

    /// 1x1 convolution with weight `[Cout, Cin, 1, 1]`.
    pub fn pointwise_conv2d(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!("pointwise_conv2d: bad shapes {xs:?}, {ws:?}")));
        }
        if ws[2] != 1 || ws[3] != 1 {
            return Err(Error::UnsupportedGeometry(format!("pointwise kernel {}x{}", ws[2], ws[3])));
        }
        if ws[1] != xs[1] || b.shape() != [ws[0]] {
            return Err(Error::shape(format!(
                "pointwise_conv2d: {} channels vs weight {ws:?}, bias {:?}",
                xs[1],
                b.shape()
            )));
        }
        let (n, cin, hw, cout) = (xs[0], xs[1], xs[2] * xs[3], ws[0]);
        let mut out = vec![0.0; n * cout * hw];
        for ni in 0..n {
            let o = &mut out[ni * cout * hw..(ni + 1) * cout * hw];
            for (co, plane) in o.chunks_mut(hw).enumerate() {
                plane.fill(b.value.data()[co]);
            }
            kernels::gemm_acc(w.value.data(), &x.value.data()[ni * cin * hw..(ni + 1) * cin * hw], o, cout, cin, hw);
        }
        let value = Tensor::new([n, cout, xs[2], xs[3]], out)?;
        Ok(self.build(|| Op::Pointwise { x: x.id, w: w.id, b: b.id }, value))
    }

    // ---- elementwise --------------------------------------------------

    pub fn relu(&mut self, x: &Var) -> Var {
        if let Some(h) = self.kink_hash.as_mut() {
            for &v in x.value.data() {
                *h = (*h ^ u64::from(v > 0.0) ^ (u64::from(v < 0.0) << 1)).wrapping_mul(0x0100_0000_01b3);
            }
        }
        let value = x.value.map(|v| if v <= 0.0 { 0.0 } else { v });
        self.build(|| Op::Relu(x.id), value)
    }

    fn same_shape(a: &Var, b: &Var, what: &str) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(())
    }

    fn zip(a: &Var, b: &Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = a.value.data().iter().zip(b.value.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(a.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Self::same_shape(a, b, "add")?;
        let value = Self::zip(a, b, |p, q| p + q);
        Ok(self.build(|| Op::Add(a.id, b.id), value))
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Self::same_shape(a, b, "sub")?;
        let value = Self::zip(a, b, |p, q| p - q);
        Ok(self.build(|| Op::Sub(a.id, b.id), value))
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Self::same_shape(a, b, "mul")?;
        let value = Self::zip(a, b, |p, q| p * q);
        Ok(self.build(|| Op::Mul(a.id, b.id), value))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(format!("add_broadcast: {sb:?} is not a suffix of {sa:?}")));
        }
        let bd = b.value.data();
        let data = a.value.data().chunks(bd.len()).flat_map(|c| c.iter().zip(bd).map(|(p, q)| p + q)).collect();
        let value = Tensor::new(sa, data)?;
        Ok(self.build(|| Op::AddBroadcast(a.id, b.id), value))
    }

    pub fn scale(&mut self, x: &Var, c: f64) -> Var {
        let value = x.value.map(|v| v * c);
        self.build(|| Op::Scale(x.id, c), value)
    }

    pub fn sum(&mut self, x: &Var) -> Var {
        let value = Tensor::scalar(x.value.sum());
        self.build(|| Op::Sum(x.id), value)
    }

    // ---- token ops ----------------------------------------------------

    /// Normalizes over the last axis with population variance.
    pub fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let d = *x.shape().last().expect("rank >= 1");
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape(format!(
                "layer_norm over {d} features with gamma {:?}, beta {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let xd = x.value.data();
        let (g, bt) = (gamma.value.data(), beta.value.data());
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let value = Tensor::new(x.shape(), out)?;
        Ok(self.build(|| Op::LayerNorm { x: x.id, gamma: gamma.id, beta: beta.id, xhat, inv_std }, value))
    }

    /// Affine map on the last axis: `x W^T + b` with `W: [Dout, Din]`.
    pub fn linear(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        let xs = x.shape();
        let din = *xs.last().expect("rank >= 1");
        let ws = w.shape();
        if ws.len() != 2 || ws[1] != din || b.shape() != [ws[0]] {
            return Err(Error::shape(format!(
                "linear: input {xs:?}, weight {ws:?}, bias {:?}",
                b.shape()
            )));
        }
        let dout = ws[0];
        let m = x.value.len() / din;
        let wt = kernels::transpose(w.value.data(), dout, din);
        let mut out = Vec::with_capacity(m * dout);
        for _ in 0..m {
            out.extend_from_slice(b.value.data());
        }
        kernels::gemm_acc(x.value.data(), &wt, &mut out, m, din, dout);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::new(shape, out)?;
        Ok(self.build(|| Op::Linear { x: x.id, w: w.id, b: b.id }, value))
    }

    /// Softmax over the last axis with row-max subtraction.
    pub fn softmax(&mut self, x: &Var) -> Var {
        let k = *x.shape().last().expect("rank >= 1");
        let mut out = x.value.data().to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::new(x.shape(), out).expect("same shape");
        self.build(|| Op::Softmax(x.id), value)
    }

    /// Batched product `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (bn, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bn * m * n];
        for i in 0..bn {
            kernels::gemm_acc(
                &a.value.data()[i * m * k..(i + 1) * m * k],
                &b.value.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new([bn, m, n], out)?;
        Ok(self.build(|| Op::BatchMatmul { a: a.id, b: b.id }, value))
    }

    // ---- layout -------------------------------------------------------

    /// Concatenates `[N, C_i, ...]` tensors along axis 1.
    pub fn concat_channels(&mut self, xs: &[&Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let s0 = first.shape();
        if s0.len() < 2 {
            return Err(Error::shape("concat_channels needs rank >= 2"));
        }
        for x in xs {
            let s = x.shape();
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::shape(format!("concat_channels: {s:?} vs {s0:?}")));
            }
        }
        let n = s0[0];
        let inner: usize = s0[2..].iter().product();
        let widths: Vec<usize> = xs.iter().map(|x| x.shape()[1]).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total * inner);
        for ni in 0..n {
            for (x, &c) in xs.iter().zip(&widths) {
                out.extend_from_slice(&x.value.data()[ni * c * inner..(ni + 1) * c * inner]);
            }
        }
        let mut shape = s0.to_vec();
        shape[1] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.build(|| Op::Concat { inputs: xs.iter().map(|x| x.id).collect(), widths }, value))
    }

    pub fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != x.value.len() {
            return Err(Error::shape(format!("reshape {:?} -> {shape:?}", x.shape())));
        }
        let value = Tensor::new(shape, x.value.data().to_vec())?;
        Ok(self.build(|| Op::Reshape(x.id), value))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: &Var, perm: &[usize]) -> Result<Var> {
        let rank = x.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("invalid permutation {perm:?} for rank {rank}")));
        }
        let (data, shape) = kernels::permute(x.value.data(), x.shape(), perm);
        let value = Tensor::new(shape, data)?;
        Ok(self.build(|| Op::Permute { x: x.id, perm: perm.to_vec() }, value))
    }

    /// Mirror padding of the two trailing axes: `[top, bottom, left, right]`.
    pub fn reflect_pad(&mut self, x: &Var, pad: [usize; 4]) -> Result<Var> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("reflect_pad expects [N,C,H,W], got {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h + pad[0] + pad[1], w + pad[2] + pad[3]);
        let rows: Vec<usize> = (0..oh).map(|y| kernels::reflect_index(y as isize - pad[0] as isize, h)).collect();
        let cols: Vec<usize> = (0..ow).map(|c| kernels::reflect_index(c as isize - pad[2] as isize, w)).collect();
        let xd = x.value.data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let plane = &xd[p * h * w..(p + 1) * h * w];
            for &r in &rows {
                out.extend(cols.iter().map(|&c| plane[r * w + c]));
            }
        }
        let value = Tensor::new([s[0], s[1], oh, ow], out)?;
        Ok(self.build(|| Op::Pad { x: x.id, pad }, value))
    }

    /// Spatial window `[top..top+h, left..left+w]` of an `[N,C,H,W]` tensor.
    pub fn crop(&mut self, x: &Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let s = x.shape();
        if s.len() != 4 || top + h > s[2] || left + w > s[3] || h == 0 || w == 0 {
            return Err(Error::shape(format!("crop {h}x{w}+{top}+{left} from {s:?}")));
        }
        let (planes, ih, iw) = (s[0] * s[1], s[2], s[3]);
        let xd = x.value.data();
        let mut out = Vec::with_capacity(planes * h * w);
        for p in 0..planes {
            for y in top..top + h {
                let base = p * ih * iw + y * iw;
                out.extend_from_slice(&xd[base + left..base + left + w]);
            }
        }
        let value = Tensor::new([s[0], s[1], h, w], out)?;
        Ok(self.build(|| Op::Crop { x: x.id, top, left }, value))
    }

    // ---- backward -----------------------------------------------------

    /// Propagates `d loss / d v` to every reachable leaf that requires a
    /// gradient, accumulating into existing gradients.
    pub fn backward(&mut self, loss: &Var) -> Result<()> {
        if loss.id == DETACHED {
            return Err(Error::Contract("backward on a value from a no-grad graph".into()));
        }
        if loss.value.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", loss.shape())));
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        pending[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = pending[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                accumulate(&mut self.grads[id], &g);
                continue;
            }
            for (input, gi) in self.input_grads(id, &g) {
                if self.nodes[input].requires_grad {
                    accumulate(&mut pending[input], &gi);
                }
            }
        }
        Ok(())
    }

    fn val(&self, id: usize) -> &Tensor {
        &self.nodes[id].value
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn input_grads(&self, id: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv3x3 { x, w, b, dims } => {
                let (gx, gw, gb) = kernels::conv3x3_backward(self.val(*x).data(), self.val(*w).data(), g, *dims);
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Depthwise { x, w, b } => {
                let s = self.val(*x).shape();
                let (gx, gw, gb) =
                    kernels::depthwise3x3_backward(self.val(*x).data(), self.val(*w).data(), g, s[0], s[1], s[2], s[3]);
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Pointwise { x, w, b } => {
                let xs = self.val(*x).shape();
                let (n, cin, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let cout = self.val(*w).shape()[0];
                let xd = self.val(*x).data();
                let wt = kernels::transpose(self.val(*w).data(), cout, cin);
                let mut gx = vec![0.0; n * cin * hw];
                let mut gw = vec![0.0; cout * cin];
                for ni in 0..n {
                    let go = &g[ni * cout * hw..(ni + 1) * cout * hw];
                    if self.needs(*x) {
                        kernels::gemm_acc(&wt, go, &mut gx[ni * cin * hw..(ni + 1) * cin * hw], cin, cout, hw);
                    }
                    if self.needs(*w) {
                        let xt = kernels::transpose(&xd[ni * cin * hw..(ni + 1) * cin * hw], cin, hw);
                        kernels::gemm_acc(go, &xt, &mut gw, cout, hw, cin);
                    }
                }
                let gb = kernels::plane_sums(g, n, cout, hw);
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Relu(x) => {
                let gx = g.iter().zip(self.val(*x).data()).map(|(&gi, &v)| if v > 0.0 { gi } else { 0.0 }).collect();
                vec![(*x, gx)]
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.val(*gamma).len();
                let gm = self.val(*gamma).data();
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dhh = 0.0;
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                        let dh = gr[j] * gm[j];
                        mean_dh += dh;
                        mean_dhh += dh * hr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dhh /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] = is * (gr[j] * gm[j] - mean_dh - hr[j] * mean_dhh);
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gbeta)]
            }
            Op::Linear { x, w, b } => {
                let ws = self.val(*w).shape();
                let (dout, din) = (ws[0], ws[1]);
                let m = g.len() / dout;
                let gx = if self.needs(*x) { kernels::gemm(g, self.val(*w).data(), m, dout, din) } else { vec![] };
                let gw = if self.needs(*w) {
                    let gt = kernels::transpose(g, m, dout);
                    kernels::gemm(&gt, self.val(*x).data(), dout, m, din)
                } else {
                    vec![]
                };
                let mut gb = vec![0.0; dout];
                for row in g.chunks(dout) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(k).zip(y.chunks(k)).zip(gx.chunks_mut(k)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::BatchMatmul { a, b } => {
                let (sa, sb) = (self.val(*a).shape(), self.val(*b).shape());
                let (bn, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                let mut ga = vec![0.0; bn * m * k];
                let mut gb = vec![0.0; bn * k * n];
                for i in 0..bn {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    if self.needs(*a) {
                        let bt = kernels::transpose(&bd[i * k * n..(i + 1) * k * n], k, n);
                        kernels::gemm_acc(gi, &bt, &mut ga[i * m * k..(i + 1) * m * k], m, n, k);
                    }
                    if self.needs(*b) {
                        let at = kernels::transpose(&ad[i * m * k..(i + 1) * m * k], m, k);
                        kernels::gemm_acc(&at, gi, &mut gb[i * k * n..(i + 1) * k * n], k, m, n);
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddBroadcast(a, b) => {
                let n = self.val(*b).len();
                let mut gb = vec![0.0; n];
                for c in g.chunks(n) {
                    for (o, v) in gb.iter_mut().zip(c) {
                        *o += v;
                    }
                }
                vec![(*a, g.to_vec()), (*b, gb)]
            }
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                let ga = g.iter().zip(bd).map(|(p, q)| p * q).collect();
                let gb = g.iter().zip(ad).map(|(p, q)| p * q).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::Sum(x) => vec![(*x, vec![g[0]; self.val(*x).len()])],
            Op::Concat { inputs, widths } => {
                let s = node.value.shape();
                let (n, total) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let mut outs: Vec<Vec<f64>> = widths.iter().map(|c| Vec::with_capacity(n * c * inner)).collect();
                for ni in 0..n {
                    let mut off = ni * total * inner;
                    for (o, &c) in outs.iter_mut().zip(widths) {
                        o.extend_from_slice(&g[off..off + c * inner]);
                        off += c * inner;
                    }
                }
                inputs.iter().copied().zip(outs).collect()
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Permute { x, perm } => {
                let (gx, _) = kernels::permute(g, node.value.shape(), &kernels::inverse_perm(perm));
                vec![(*x, gx)]
            }
            Op::Pad { x, pad } => {
                let s = self.val(*x).shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h + pad[0] + pad[1], w + pad[2] + pad[3]);
                let mut gx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..oh {
                        let r = kernels::reflect_index(y as isize - pad[0] as isize, h);
                        for c in 0..ow {
                            let cc = kernels::reflect_index(c as isize - pad[2] as isize, w);
                            gx[p * h * w + r * w + cc] += g[p * oh * ow + y * ow + c];
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Crop { x, top, left } => {
                let s = self.val(*x).shape();
                let (planes, ih, iw) = (s[0] * s[1], s[2], s[3]);
                let os = node.value.shape();
                let (h, w) = (os[2], os[3]);
                let mut gx = vec![0.0; planes * ih * iw];
                for p in 0..planes {
                    for y in 0..h {
                        let dst = p * ih * iw + (top + y) * iw + left;
                        gx[dst..dst + w].copy_from_slice(&g[(p * h + y) * w..(p * h + y + 1) * w]);
                    }
                }
                vec![(*x, gx)]
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    if g.is_empty() {
        return;
    }
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}
