use std::sync::Arc;

use super::kernels::{col2im_accumulate, conv_out_extent, dot, im2col, matmul, matmul_nt};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle of a recorded node on a tape.
pub type NodeId = usize;

/// One operand of a recorded operation: the producing node (if any) plus a
/// snapshot of shape and values taken at record time. Constants participate
/// with `node: None` and receive no gradient.
#[derive(Clone, Debug)]
struct Src<T> {
    node: Option<NodeId>,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Src<T> {
    fn of(t: &Tensor<T>) -> Self {
        Src {
            node: t.node(),
            shape: t.shape().to_vec(),
            data: Arc::clone(t.buffer()),
        }
    }

    fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Src<T>,
        kernel: Src<T>,
        bias: Option<Src<T>>,
        stride: usize,
        pad: usize,
    },
    Linear {
        input: Src<T>,
        weight: Src<T>,
        bias: Option<Src<T>>,
    },
    Relu {
        input: Src<T>,
    },
    Sigmoid {
        input: Src<T>,
    },
    Exp {
        input: Src<T>,
    },
    Log {
        input: Src<T>,
    },
    Clamp {
        input: Src<T>,
        lo: T,
        hi: T,
    },
    MaxPool2x2 {
        input: Src<T>,
        argmax: Vec<u32>,
    },
    RoiPool {
        input: Src<T>,
        roi: [f64; 4],
        feat_stride: usize,
        out_size: usize,
        argmax: Vec<u32>,
    },
    Add {
        lhs: Src<T>,
        rhs: Src<T>,
    },
    Sub {
        lhs: Src<T>,
        rhs: Src<T>,
    },
    Mul {
        lhs: Src<T>,
        rhs: Src<T>,
    },
    Scale {
        input: Src<T>,
        factor: T,
    },
    Offset {
        input: Src<T>,
        delta: T,
    },
    Mean {
        input: Src<T>,
    },
    Sum {
        input: Src<T>,
    },
    Flatten {
        input: Src<T>,
    },
    Concat {
        inputs: Vec<Src<T>>,
    },
    Grl {
        input: Src<T>,
        strength: T,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

/// Wengert tape: records operations in forward order, replays them in
/// reverse for gradients. One tape lives for one training iteration and is
/// dropped after backward.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

/// Gradient map produced by a backward pass, keyed by node id.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the seeded loss with respect to the given tensor, if any
    /// gradient flowed to it.
    pub fn get(&self, t: &Tensor<T>) -> Option<Tensor<T>> {
        let id = t.node()?;
        self.by_node(id)
            .map(|g| Tensor::from_vec(self.shapes[id].clone(), g.to_vec()).expect("shape consistent"))
    }

    pub fn by_node(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn by_node_mut(&mut self, id: NodeId) -> Option<&mut Vec<T>> {
        self.grads.get_mut(id).and_then(|g| g.as_mut())
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(|g| g.is_none())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A recording tape for one training iteration.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A non-recording tape: same operation code paths, no graph, no
    /// backward. Used by inference.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a differentiable leaf. Returns the same values
    /// attached to this tape with `requires_grad` set.
    pub fn watch(&mut self, t: &Tensor<T>) -> Tensor<T> {
        if !self.recording {
            return t.detached();
        }
        if let Some(_id) = t.node() {
            return t.clone();
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            data: Arc::clone(t.buffer()),
        });
        Tensor::from_parts(t.shape().to_vec(), Arc::clone(t.buffer()), Some(id))
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, data: Vec<T>, tracked: bool) -> Tensor<T> {
        let data = Arc::new(data);
        if self.recording && tracked {
            let id = self.nodes.len();
            self.nodes.push(Node {
                op,
                shape: shape.clone(),
                data: Arc::clone(&data),
            });
            Tensor::from_parts(shape, data, Some(id))
        } else {
            Tensor::from_parts(shape, data, None)
        }
    }

    // ── Convolution and linear ───────────────────────────────────────

    /// 2-D convolution of a (C_in, H, W) input with a (C_out, C_in, k, k)
    /// kernel, zero padding `pad`, stride `stride`, optional per-channel bias.
    pub fn conv2d(
        &mut self,
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        if stride == 0 {
            return Err(Error::NonPositiveStride(stride));
        }
        let ishape = input.shape();
        let kshape = kernel.shape();
        if ishape.len() != 3 {
            return Err(Error::shape("conv2d", format!("input must be rank 3, got {:?}", ishape)));
        }
        if kshape.len() != 4 || kshape[2] != kshape[3] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be (C_out, C_in, k, k), got {:?}", kshape),
            ));
        }
        let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (c_out, k) = (kshape[0], kshape[2]);
        if kshape[1] != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {} input channels, input has {}", kshape[1], c_in),
            ));
        }
        let ho = conv_out_extent(h, k, stride, pad).ok_or_else(|| {
            Error::shape("conv2d", format!("kernel {} too large for height {} with pad {}", k, h, pad))
        })?;
        let wo = conv_out_extent(w, k, stride, pad).ok_or_else(|| {
            Error::shape("conv2d", format!("kernel {} too large for width {} with pad {}", k, w, pad))
        })?;
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias must be ({},), got {:?}", c_out, b.shape()),
                ));
            }
        }
        let op = Op::Conv2d {
            input: Src::of(input),
            kernel: Src::of(kernel),
            bias: bias.map(Src::of),
            stride,
            pad,
        };
        let data = eval_conv2d(&op);
        let tracked = input.node().is_some()
            || kernel.node().is_some()
            || bias.is_some_and(|b| b.node().is_some());
        Ok(self.push(op, vec![c_out, ho, wo], data, tracked))
    }

    /// Fully connected layer: `x (in,) -> (out,)` or `x (rows, in) -> (rows, out)`
    /// with weight `(out, in)` and optional bias `(out,)`.
    pub fn linear(
        &mut self,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let wshape = weight.shape();
        if wshape.len() != 2 {
            return Err(Error::shape("linear", format!("weight must be rank 2, got {:?}", wshape)));
        }
        let (n_out, n_in) = (wshape[0], wshape[1]);
        let ishape = input.shape();
        let (rows, in_dim, out_shape) = match ishape.len() {
            1 => (1, ishape[0], vec![n_out]),
            2 => (ishape[0], ishape[1], vec![ishape[0], n_out]),
            _ => {
                return Err(Error::shape(
                    "linear",
                    format!("input must be rank 1 or 2, got {:?}", ishape),
                ))
            }
        };
        if in_dim != n_in {
            return Err(Error::shape(
                "linear",
                format!("weight expects {} inputs, input has {}", n_in, in_dim),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [n_out] {
                return Err(Error::shape(
                    "linear",
                    format!("bias must be ({},), got {:?}", n_out, b.shape()),
                ));
            }
        }
        let op = Op::Linear {
            input: Src::of(input),
            weight: Src::of(weight),
            bias: bias.map(Src::of),
        };
        let data = eval_linear(&op, rows, n_in, n_out);
        let tracked = input.node().is_some()
            || weight.node().is_some()
            || bias.is_some_and(|b| b.node().is_some());
        Ok(self.push(op, out_shape, data, tracked))
    }

    // ── Element-wise unary ───────────────────────────────────────────

    pub fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let op = Op::Relu { input: Src::of(x) };
        let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
        self.push(op, x.shape().to_vec(), data, x.node().is_some())
    }

    pub fn sigmoid(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let op = Op::Sigmoid { input: Src::of(x) };
        let data = x.data().iter().map(|&v| sigmoid_stable(v)).collect();
        self.push(op, x.shape().to_vec(), data, x.node().is_some())
    }

    pub fn exp(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let op = Op::Exp { input: Src::of(x) };
        let data = x.data().iter().map(|&v| v.exp()).collect();
        self.push(op, x.shape().to_vec(), data, x.node().is_some())
    }

    /// Natural logarithm. Inputs must be strictly positive; the loss
    /// composites clamp probabilities before calling this.
    pub fn log(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if let Some(bad) = x.data().iter().find(|v| **v <= T::zero()) {
            return Err(Error::LogDomain(bad.as_f64()));
        }
        let op = Op::Log { input: Src::of(x) };
        let data = x.data().iter().map(|&v| v.ln()).collect();
        Ok(self.push(op, x.shape().to_vec(), data, x.node().is_some()))
    }

    /// Clamp values to `[lo, hi]`; gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: &Tensor<T>, lo: T, hi: T) -> Result<Tensor<T>> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp: lo {} > hi {}", lo, hi)));
        }
        let op = Op::Clamp { input: Src::of(x), lo, hi };
        let data = x.data().iter().map(|&v| v.max(lo).min(hi)).collect();
        Ok(self.push(op, x.shape().to_vec(), data, x.node().is_some()))
    }

    pub fn scale(&mut self, x: &Tensor<T>, factor: T) -> Tensor<T> {
        let op = Op::Scale { input: Src::of(x), factor };
        let data = x.data().iter().map(|&v| v * factor).collect();
        self.push(op, x.shape().to_vec(), data, x.node().is_some())
    }

    pub fn offset(&mut self, x: &Tensor<T>, delta: T) -> Tensor<T> {
        let op = Op::Offset { input: Src::of(x), delta };
        let data = x.data().iter().map(|&v| v + delta).collect();
        self.push(op, x.shape().to_vec(), data, x.node().is_some())
    }

    /// Gradient reversal: identity forward, gradient multiplied by
    /// `-strength` backward.
    pub fn grl(&mut self, x: &Tensor<T>, strength: T) -> Result<Tensor<T>> {
        if strength < T::zero() {
            return Err(Error::NegativeStrength(strength.as_f64()));
        }
        let op = Op::Grl { input: Src::of(x), strength };
        let tracked = x.node().is_some();
        let data = Arc::clone(x.buffer());
        if self.recording && tracked {
            let id = self.nodes.len();
            self.nodes.push(Node {
                op,
                shape: x.shape().to_vec(),
                data: Arc::clone(&data),
            });
            Ok(Tensor::from_parts(x.shape().to_vec(), data, Some(id)))
        } else {
            Ok(Tensor::from_parts(x.shape().to_vec(), data, None))
        }
    }

    // ── Pooling ──────────────────────────────────────────────────────

    /// 2x2 max pooling with stride 2 over a (C, H, W) tensor; H and W must
    /// be even. Ties route the gradient to the first maximal element in
    /// row-major window order.
    pub fn maxpool2x2(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::shape(
                "maxpool2x2",
                format!("input must be (C, even H, even W), got {:?}", s),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let (data, argmax) = maxpool_forward(x.data(), c, h, w);
        let op = Op::MaxPool2x2 { input: Src::of(x), argmax };
        Ok(self.push(op, vec![c, ho, wo], data, x.node().is_some()))
    }

    /// Max-pool an image-space region of a (C, Hf, Wf) feature map into an
    /// `out_size` x `out_size` grid. The region is given in pixel
    /// coordinates and mapped to the map by `feat_stride`; bins whose integer
    /// cell range is empty take the nearest valid cell's value.
    pub fn roi_pool(
        &mut self,
        feature: &Tensor<T>,
        roi: [f64; 4],
        feat_stride: usize,
        out_size: usize,
    ) -> Result<Tensor<T>> {
        let s = feature.shape();
        if s.len() != 3 {
            return Err(Error::shape("roi_pool", format!("feature must be rank 3, got {:?}", s)));
        }
        let [x1, y1, x2, y2] = roi;
        if !(x2 > x1 && y2 > y1) {
            return Err(Error::invalid(format!(
                "roi_pool: degenerate proposal ({}, {}, {}, {})",
                x1, y1, x2, y2
            )));
        }
        let (c, hf, wf) = (s[0], s[1], s[2]);
        let (data, argmax) = roi_pool_forward(feature.data(), c, hf, wf, roi, feat_stride, out_size);
        let op = Op::RoiPool {
            input: Src::of(feature),
            roi,
            feat_stride,
            out_size,
            argmax,
        };
        Ok(self.push(op, vec![c, out_size, out_size], data, feature.node().is_some()))
    }

    // ── Element-wise binary (same shape, or one side scalar) ─────────

    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binop("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binop("sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binop("mul", a, b, |x, y| x * y)
    }

    fn binop(
        &mut self,
        name: &'static str,
        a: &Tensor<T>,
        b: &Tensor<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (data, shape) = if a.shape() == b.shape() {
            (
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
                a.shape().to_vec(),
            )
        } else if b.is_scalar() {
            let y = b.item();
            (a.data().iter().map(|&x| f(x, y)).collect(), a.shape().to_vec())
        } else if a.is_scalar() {
            let x = a.item();
            (b.data().iter().map(|&y| f(x, y)).collect(), b.shape().to_vec())
        } else {
            return Err(Error::shape(
                name,
                format!("incompatible shapes {:?} and {:?}", a.shape(), b.shape()),
            ));
        };
        let op = match name {
            "add" => Op::Add { lhs: Src::of(a), rhs: Src::of(b) },
            "sub" => Op::Sub { lhs: Src::of(a), rhs: Src::of(b) },
            "mul" => Op::Mul { lhs: Src::of(a), rhs: Src::of(b) },
            _ => unreachable!(),
        };
        let tracked = a.node().is_some() || b.node().is_some();
        Ok(self.push(op, shape, data, tracked))
    }

    // ── Reductions and reshaping ─────────────────────────────────────

    /// Mean over all elements, producing a rank-0 scalar.
    pub fn mean(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let n = T::of(x.numel() as f64);
        let total: T = x.data().iter().copied().fold(T::zero(), |a, v| a + v);
        let op = Op::Mean { input: Src::of(x) };
        self.push(op, vec![], vec![total / n], x.node().is_some())
    }

    /// Sum over all elements, producing a rank-0 scalar.
    pub fn sum(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let total: T = x.data().iter().copied().fold(T::zero(), |a, v| a + v);
        let op = Op::Sum { input: Src::of(x) };
        self.push(op, vec![], vec![total], x.node().is_some())
    }

    pub fn flatten(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let op = Op::Flatten { input: Src::of(x) };
        let numel = x.numel();
        let data = Arc::clone(x.buffer());
        if self.recording && x.node().is_some() {
            let id = self.nodes.len();
            self.nodes.push(Node {
                op,
                shape: vec![numel],
                data: Arc::clone(&data),
            });
            Tensor::from_parts(vec![numel], data, Some(id))
        } else {
            Tensor::from_parts(vec![numel], data, None)
        }
    }

    /// Concatenate along axis 0. All inputs must agree on rank and trailing
    /// extents.
    pub fn concat(&mut self, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if xs.is_empty() {
            return Err(Error::invalid("concat: empty input list"));
        }
        let first = xs[0].shape();
        if first.is_empty() {
            return Err(Error::shape("concat", "inputs must have rank >= 1".to_string()));
        }
        let trailing = &first[1..];
        let mut dim0 = 0;
        for x in xs {
            let s = x.shape();
            if s.len() != first.len() || &s[1..] != trailing {
                return Err(Error::shape(
                    "concat",
                    format!("input shape {:?} incompatible with {:?}", s, first),
                ));
            }
            dim0 += s[0];
        }
        let mut shape = first.to_vec();
        shape[0] = dim0;
        let mut data = Vec::with_capacity(shape.iter().product());
        for x in xs {
            data.extend_from_slice(x.data());
        }
        let op = Op::Concat {
            inputs: xs.iter().map(|x| Src::of(x)).collect(),
        };
        let tracked = xs.iter().any(|x| x.node().is_some());
        Ok(self.push(op, shape, data, tracked))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Backpropagate from a scalar loss seeded with gradient 1.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        self.backward_seeded(&[(loss, T::one())])
    }

    /// Backpropagate from several scalar roots at once, each seeded with its
    /// own weight. Seeding the components of a weighted sum directly is
    /// bit-identical to materializing the sum on the tape first, because the
    /// partial derivatives of `a + w*b` with respect to `a` and `b` are
    /// exactly `1` and `w`.
    pub fn backward_seeded(&self, seeds: &[(&Tensor<T>, T)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        for (loss, weight) in seeds {
            if !loss.is_scalar() {
                return Err(Error::NonScalarLoss(loss.shape().to_vec()));
            }
            if let Some(id) = loss.node() {
                match &mut grads[id] {
                    Some(g) => g[0] += *weight,
                    slot => *slot = Some(vec![*weight]),
                }
            }
        }
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }

    fn backward_node(&self, id: NodeId, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, stride, pad } => {
                backward_conv2d(input, kernel, bias.as_ref(), *stride, *pad, g, grads);
            }
            Op::Linear { input, weight, bias } => {
                backward_linear(input, weight, bias.as_ref(), g, grads);
            }
            Op::Relu { input } => {
                accumulate_map(grads, input, g, |x, go| if x > T::zero() { go } else { T::zero() });
            }
            Op::Sigmoid { input } => {
                let y = &node.data;
                accumulate(grads, input, |buf| {
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b += g[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Exp { input } => {
                let y = &node.data;
                accumulate(grads, input, |buf| {
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b += g[i] * y[i];
                    }
                });
            }
            Op::Log { input } => {
                accumulate_map(grads, input, g, |x, go| go / x);
            }
            Op::Clamp { input, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                accumulate_map(grads, input, g, |x, go| {
                    if x >= lo && x <= hi {
                        go
                    } else {
                        T::zero()
                    }
                });
            }
            Op::MaxPool2x2 { input, argmax } | Op::RoiPool { input, argmax, .. } => {
                accumulate(grads, input, |buf| {
                    for (o, &src) in argmax.iter().enumerate() {
                        buf[src as usize] += g[o];
                    }
                });
            }
            Op::Add { lhs, rhs } => {
                backward_add_like(grads, lhs, rhs, g, T::one());
            }
            Op::Sub { lhs, rhs } => {
                backward_add_like(grads, lhs, rhs, g, -T::one());
            }
            Op::Mul { lhs, rhs } => {
                backward_mul(grads, lhs, rhs, g);
            }
            Op::Scale { input, factor } => {
                let f = *factor;
                accumulate(grads, input, |buf| {
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b += g[i] * f;
                    }
                });
            }
            Op::Offset { input, .. } => {
                accumulate(grads, input, |buf| {
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b += g[i];
                    }
                });
            }
            Op::Mean { input } => {
                let n = T::of(input.numel() as f64);
                let go = g[0] / n;
                accumulate(grads, input, |buf| {
                    for b in buf.iter_mut() {
                        *b += go;
                    }
                });
            }
            Op::Sum { input } => {
                let go = g[0];
                accumulate(grads, input, |buf| {
                    for b in buf.iter_mut() {
                        *b += go;
                    }
                });
            }
            Op::Flatten { input } => {
                accumulate(grads, input, |buf| {
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b += g[i];
                    }
                });
            }
            Op::Concat { inputs } => {
                let mut offset = 0;
                for src in inputs {
                    let n = src.numel();
                    let piece = &g[offset..offset + n];
                    accumulate(grads, src, |buf| {
                        for (i, b) in buf.iter_mut().enumerate() {
                            *b += piece[i];
                        }
                    });
                    offset += n;
                }
            }
            Op::Grl { input, strength } => {
                let f = -*strength;
                accumulate(grads, input, |buf| {
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b += g[i] * f;
                    }
                });
            }
        }
    }

    /// Recompute every recorded node from its saved inputs and compare with
    /// the recorded output, bit-exactly. Test/diagnostic aid.
    pub fn verify_replay(&self) -> bool {
        for node in &self.nodes {
            let recomputed = match &node.op {
                Op::Leaf => continue,
                Op::Conv2d { .. } => eval_conv2d(&node.op),
                Op::Linear { input, weight, .. } => {
                    let rows = if input.shape.len() == 2 { input.shape[0] } else { 1 };
                    let n_in = *input.shape.last().unwrap();
                    let n_out = weight.shape[0];
                    eval_linear(&node.op, rows, n_in, n_out)
                }
                Op::Relu { input } => input.data.iter().map(|&v| v.max(T::zero())).collect(),
                Op::Sigmoid { input } => input.data.iter().map(|&v| sigmoid_stable(v)).collect(),
                Op::Exp { input } => input.data.iter().map(|&v| v.exp()).collect(),
                Op::Log { input } => input.data.iter().map(|&v| v.ln()).collect(),
                Op::Clamp { input, lo, hi } => {
                    input.data.iter().map(|&v| v.max(*lo).min(*hi)).collect()
                }
                Op::MaxPool2x2 { input, .. } => {
                    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
                    maxpool_forward(&input.data, c, h, w).0
                }
                Op::RoiPool { input, roi, feat_stride, out_size, .. } => {
                    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
                    roi_pool_forward(&input.data, c, h, w, *roi, *feat_stride, *out_size).0
                }
                Op::Add { lhs, rhs } => eval_binop(lhs, rhs, |x, y| x + y),
                Op::Sub { lhs, rhs } => eval_binop(lhs, rhs, |x, y| x - y),
                Op::Mul { lhs, rhs } => eval_binop(lhs, rhs, |x, y| x * y),
                Op::Scale { input, factor } => input.data.iter().map(|&v| v * *factor).collect(),
                Op::Offset { input, delta } => input.data.iter().map(|&v| v + *delta).collect(),
                Op::Mean { input } => {
                    let n = T::of(input.numel() as f64);
                    vec![input.data.iter().copied().fold(T::zero(), |a, v| a + v) / n]
                }
                Op::Sum { input } => {
                    vec![input.data.iter().copied().fold(T::zero(), |a, v| a + v)]
                }
                Op::Flatten { input } | Op::Grl { input, .. } => input.data.to_vec(),
                Op::Concat { inputs } => {
                    let mut data = Vec::new();
                    for src in inputs {
                        data.extend_from_slice(&src.data);
                    }
                    data
                }
            };
            if recomputed.len() != node.data.len()
                || recomputed.iter().zip(node.data.iter()).any(|(a, b)| a != b)
            {
                return false;
            }
        }
        true
    }
}

// ── Forward helpers ──────────────────────────────────────────────────

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn eval_binop<T: Scalar>(lhs: &Src<T>, rhs: &Src<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    if lhs.shape == rhs.shape {
        lhs.data.iter().zip(rhs.data.iter()).map(|(&x, &y)| f(x, y)).collect()
    } else if rhs.numel() == 1 {
        let y = rhs.data[0];
        lhs.data.iter().map(|&x| f(x, y)).collect()
    } else {
        let x = lhs.data[0];
        rhs.data.iter().map(|&y| f(x, y)).collect()
    }
}

fn eval_conv2d<T: Scalar>(op: &Op<T>) -> Vec<T> {
    let Op::Conv2d { input, kernel, bias, stride, pad } = op else {
        unreachable!()
    };
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (c_out, k) = (kernel.shape[0], kernel.shape[2]);
    let ho = conv_out_extent(h, k, *stride, *pad).unwrap();
    let wo = conv_out_extent(w, k, *stride, *pad).unwrap();
    let cols = im2col(&input.data, c_in, h, w, k, *stride, *pad, ho, wo);
    let mut out = vec![T::zero(); c_out * ho * wo];
    matmul(&kernel.data, &cols, c_out, c_in * k * k, ho * wo, &mut out);
    if let Some(b) = bias {
        for c in 0..c_out {
            let bc = b.data[c];
            for v in &mut out[c * ho * wo..(c + 1) * ho * wo] {
                *v += bc;
            }
        }
    }
    out
}

fn eval_linear<T: Scalar>(op: &Op<T>, rows: usize, n_in: usize, n_out: usize) -> Vec<T> {
    let Op::Linear { input, weight, bias } = op else {
        unreachable!()
    };
    let mut out = vec![T::zero(); rows * n_out];
    matmul_nt(&input.data, &weight.data, rows, n_in, n_out, &mut out);
    if let Some(b) = bias {
        for r in 0..rows {
            for (o, bv) in out[r * n_out..(r + 1) * n_out].iter_mut().zip(b.data.iter()) {
                *o += *bv;
            }
        }
    }
    out
}

fn maxpool_forward<T: Scalar>(data: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        let plane = ci * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let y0 = oy * 2;
                let x0 = ox * 2;
                // row-major window order; strict > keeps the first maximum
                let mut best_idx = plane + y0 * w + x0;
                let mut best = data[best_idx];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = plane + (y0 + dy) * w + (x0 + dx);
                    if data[idx] > best {
                        best = data[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx as u32);
            }
        }
    }
    (out, argmax)
}

/// Integer cell range covered by one pooling axis of a region.
fn roi_axis_cells(lo_px: f64, hi_px: f64, stride: usize, extent: usize) -> (usize, usize) {
    let lo = (lo_px / stride as f64).floor();
    let hi = (hi_px / stride as f64).ceil();
    let start = lo.max(0.0) as usize;
    let start = start.min(extent - 1);
    let end = (hi.max(1.0) as usize).min(extent).max(start + 1);
    (start, end)
}

fn roi_pool_forward<T: Scalar>(
    data: &[T],
    c: usize,
    hf: usize,
    wf: usize,
    roi: [f64; 4],
    stride: usize,
    out_size: usize,
) -> (Vec<T>, Vec<u32>) {
    let [x1, y1, x2, y2] = roi;
    let (cx0, cx1) = roi_axis_cells(x1, x2, stride, wf);
    let (cy0, cy1) = roi_axis_cells(y1, y2, stride, hf);
    let nx = cx1 - cx0;
    let ny = cy1 - cy0;
    // bin j covers integer cells [j*n/S, (j+1)*n/S); an empty range falls
    // back to the nearest valid cell (the one containing the bin's start).
    let bin_range = |j: usize, n: usize, base: usize| -> (usize, usize) {
        let a = base + j * n / out_size;
        let b = base + (j + 1) * n / out_size;
        if a == b {
            let cell = a.min(base + n - 1);
            (cell, cell + 1)
        } else {
            (a, b)
        }
    };
    let mut out = Vec::with_capacity(c * out_size * out_size);
    let mut argmax = Vec::with_capacity(c * out_size * out_size);
    for ci in 0..c {
        let plane = ci * hf * wf;
        for by in 0..out_size {
            let (ya, yb) = bin_range(by, ny, cy0);
            for bx in 0..out_size {
                let (xa, xb) = bin_range(bx, nx, cx0);
                let mut best_idx = plane + ya * wf + xa;
                let mut best = data[best_idx];
                for y in ya..yb {
                    for x in xa..xb {
                        let idx = plane + y * wf + x;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx as u32);
            }
        }
    }
    (out, argmax)
}

// ── Backward helpers ─────────────────────────────────────────────────

fn accumulate<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    src: &Src<T>,
    f: impl FnOnce(&mut [T]),
) {
    let Some(id) = src.node else { return };
    let buf = grads[id].get_or_insert_with(|| vec![T::zero(); src.numel()]);
    f(buf);
}

fn accumulate_map<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    src: &Src<T>,
    g: &[T],
    f: impl Fn(T, T) -> T,
) {
    let data = Arc::clone(&src.data);
    accumulate(grads, src, |buf| {
        for (i, b) in buf.iter_mut().enumerate() {
            *b += f(data[i], g[i]);
        }
    });
}

fn backward_add_like<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    lhs: &Src<T>,
    rhs: &Src<T>,
    g: &[T],
    rhs_sign: T,
) {
    if lhs.shape == rhs.shape {
        accumulate(grads, lhs, |buf| {
            for (i, b) in buf.iter_mut().enumerate() {
                *b += g[i];
            }
        });
        accumulate(grads, rhs, |buf| {
            for (i, b) in buf.iter_mut().enumerate() {
                *b += g[i] * rhs_sign;
            }
        });
    } else if rhs.numel() == 1 {
        accumulate(grads, lhs, |buf| {
            for (i, b) in buf.iter_mut().enumerate() {
                *b += g[i];
            }
        });
        accumulate(grads, rhs, |buf| {
            let total = g.iter().copied().fold(T::zero(), |a, v| a + v);
            buf[0] += total * rhs_sign;
        });
    } else {
        accumulate(grads, lhs, |buf| {
            let total = g.iter().copied().fold(T::zero(), |a, v| a + v);
            buf[0] += total;
        });
        accumulate(grads, rhs, |buf| {
            for (i, b) in buf.iter_mut().enumerate() {
                *b += g[i] * rhs_sign;
            }
        });
    }
}

fn backward_mul<T: Scalar>(grads: &mut [Option<Vec<T>>], lhs: &Src<T>, rhs: &Src<T>, g: &[T]) {
    if lhs.shape == rhs.shape {
        let rdata = Arc::clone(&rhs.data);
        accumulate(grads, lhs, |buf| {
            for (i, b) in buf.iter_mut().enumerate() {
                *b += g[i] * rdata[i];
            }
        });
        let ldata = Arc::clone(&lhs.data);
        accumulate(grads, rhs, |buf| {
            for (i, b) in buf.iter_mut().enumerate() {
                *b += g[i] * ldata[i];
            }
        });
    } else if rhs.numel() == 1 {
        let y = rhs.data[0];
        accumulate(grads, lhs, |buf| {
            for (i, b) in buf.iter_mut().enumerate() {
                *b += g[i] * y;
            }
        });
        let ldata = Arc::clone(&lhs.data);
        accumulate(grads, rhs, |buf| {
            buf[0] += dot(g, &ldata);
        });
    } else {
        let x = lhs.data[0];
        let rdata = Arc::clone(&rhs.data);
        accumulate(grads, lhs, |buf| {
            buf[0] += dot(g, &rdata);
        });
        accumulate(grads, rhs, |buf| {
            for (i, b) in buf.iter_mut().enumerate() {
                *b += g[i] * x;
            }
        });
    }
}

fn backward_conv2d<T: Scalar>(
    input: &Src<T>,
    kernel: &Src<T>,
    bias: Option<&Src<T>>,
    stride: usize,
    pad: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (c_out, k) = (kernel.shape[0], kernel.shape[2]);
    let ho = conv_out_extent(h, k, stride, pad).unwrap();
    let wo = conv_out_extent(w, k, stride, pad).unwrap();
    let hw = ho * wo;
    let ck2 = c_in * k * k;

    if let Some(b) = bias {
        accumulate(grads, b, |buf| {
            for c in 0..c_out {
                let s = g[c * hw..(c + 1) * hw].iter().copied().fold(T::zero(), |a, v| a + v);
                buf[c] += s;
            }
        });
    }

    let needs_kernel_grad = kernel.node.is_some();
    let needs_input_grad = input.node.is_some();
    if !needs_kernel_grad && !needs_input_grad {
        return;
    }

    let cols = im2col(&input.data, c_in, h, w, k, stride, pad, ho, wo);

    if needs_kernel_grad {
        let mut gk = vec![T::zero(); c_out * ck2];
        matmul_nt(g, &cols, c_out, hw, ck2, &mut gk);
        accumulate(grads, kernel, |buf| {
            for (b, v) in buf.iter_mut().zip(gk.iter()) {
                *b += *v;
            }
        });
    }

    if needs_input_grad {
        // kernel^T (ck2, c_out) times g (c_out, hw)
        let mut kt = vec![T::zero(); ck2 * c_out];
        for c in 0..c_out {
            for j in 0..ck2 {
                kt[j * c_out + c] = kernel.data[c * ck2 + j];
            }
        }
        let mut g_cols = vec![T::zero(); ck2 * hw];
        matmul(&kt, g, ck2, c_out, hw, &mut g_cols);
        let mut gi = vec![T::zero(); c_in * h * w];
        col2im_accumulate(&g_cols, c_in, h, w, k, stride, pad, ho, wo, &mut gi);
        accumulate(grads, input, |buf| {
            for (b, v) in buf.iter_mut().zip(gi.iter()) {
                *b += *v;
            }
        });
    }
}

fn backward_linear<T: Scalar>(
    input: &Src<T>,
    weight: &Src<T>,
    bias: Option<&Src<T>>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let (n_out, n_in) = (weight.shape[0], weight.shape[1]);
    let rows = if input.shape.len() == 2 { input.shape[0] } else { 1 };

    if let Some(b) = bias {
        accumulate(grads, b, |buf| {
            for r in 0..rows {
                for (o, bv) in buf.iter_mut().zip(g[r * n_out..(r + 1) * n_out].iter()) {
                    *o += *bv;
                }
            }
        });
    }

    if weight.node.is_some() {
        let idata = Arc::clone(&input.data);
        accumulate(grads, weight, |buf| {
            for r in 0..rows {
                let xrow = &idata[r * n_in..(r + 1) * n_in];
                let grow = &g[r * n_out..(r + 1) * n_out];
                for (o, &go) in grow.iter().enumerate() {
                    let wrow = &mut buf[o * n_in..(o + 1) * n_in];
                    for (wv, &xv) in wrow.iter_mut().zip(xrow.iter()) {
                        *wv += go * xv;
                    }
                }
            }
        });
    }

    if input.node.is_some() {
        let wdata = Arc::clone(&weight.data);
        let mut gx = vec![T::zero(); rows * n_in];
        matmul(g, &wdata, rows, n_out, n_in, &mut gx);
        accumulate(grads, input, |buf| {
            for (b, v) in buf.iter_mut().zip(gx.iter()) {
                *b += *v;
            }
        });
    }
}
