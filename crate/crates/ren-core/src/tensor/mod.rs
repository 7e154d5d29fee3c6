//! Reverse-mode autodiff on a flat operation tape.
//!
//! A [`Graph`] records every executed operation in topological order (inputs
//! always precede outputs, since a [`TensorRef`] can only name an existing
//! node). One [`Graph::backward`] sweep walks the tape once in reverse and
//! accumulates exact gradients into every node that needs them.
//!
//! Tensors are rank 1..=4 with batch x channel x height x width layout for
//! images. Values are `f32` in training and `f64` for gradient checking;
//! the whole module is generic over [`Scalar`].

mod gradcheck;
mod kernels;

pub use gradcheck::grad_check;

use crate::rng::RngStream;
use crate::scalar::Scalar;
use kernels::{conv_out_size, Dims4};

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorRef(usize);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: {dimension} mismatch: expected {expected}, got {got}")]
    DimMismatch {
        op: &'static str,
        dimension: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {got:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("{op}: shape {shape:?} holds {expected} elements, got {got} values")]
    LengthMismatch {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: window (row {row_off}, col {col_off}, {h}x{w}) exceeds extent {extent_h}x{extent_w}")]
    WindowOutOfBounds {
        op: &'static str,
        row_off: usize,
        col_off: usize,
        h: usize,
        w: usize,
        extent_h: usize,
        extent_w: usize,
    },
    #[error("concat: input {index} shape {got:?} disagrees with {expected:?} off the concat axis {axis}")]
    ConcatMismatch {
        index: usize,
        axis: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: {name} = {value} is invalid")]
    InvalidParam {
        op: &'static str,
        name: &'static str,
        value: String,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
}

type Result<T> = std::result::Result<T, TensorError>;

/// How a node was produced; inputs are tape indices of earlier nodes.
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<u32>,
    },
    Relu {
        input: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Dropout {
        input: usize,
        keep: Vec<bool>,
        inv_keep_prob: f64,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    SliceRegion {
        input: usize,
        row_off: usize,
        col_off: usize,
        h: usize,
        w: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: f64,
    },
    Reshape {
        input: usize,
    },
    Sum {
        input: usize,
    },
    /// Mean of the Huber-style piecewise loss over all elements.
    SmoothL1 {
        pred: usize,
        target: usize,
        breakpoint: f64,
    },
    /// Mean of 0.5 * (pred - target)^2 over all elements.
    L2 {
        pred: usize,
        target: usize,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    /// leaf marked as a differentiation target
    requires_grad: bool,
    /// this node or one of its ancestors requires a gradient
    needs: bool,
    op: Op,
}

/// The recorded computation. One graph per forward/backward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, t: TensorRef) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn values(&self, t: TensorRef) -> &[T] {
        &self.nodes[t.0].values
    }

    pub fn numel(&self, t: TensorRef) -> usize {
        self.nodes[t.0].values.len()
    }

    /// Gradient of the last backward pass, if this node received one.
    pub fn grad(&self, t: TensorRef) -> Option<&[T]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub fn requires_grad(&self, t: TensorRef) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Drops the gradient buffers, e.g. after an optimizer step consumed them.
    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn leaf(&mut self, values: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<TensorRef> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(TensorError::RankMismatch { op: "leaf", expected: 4, got: shape.to_vec() });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidParam {
                op: "leaf",
                name: "shape",
                value: format!("{shape:?}"),
            });
        }
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(TensorError::LengthMismatch {
                op: "leaf",
                shape: shape.to_vec(),
                expected,
                got: values.len(),
            });
        }
        Ok(self.push(shape.to_vec(), values, requires_grad, Op::Leaf))
    }

    pub fn zeros(&mut self, shape: &[usize], requires_grad: bool) -> Result<TensorRef> {
        let n: usize = shape.iter().product();
        self.leaf(vec![T::zero(); n], shape, requires_grad)
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, requires_grad: bool, op: Op) -> TensorRef {
        let needs = requires_grad
            || match &op {
                Op::Leaf => false,
                _ => self.op_inputs(&op).iter().any(|&i| self.nodes[i].needs),
            };
        self.nodes.push(Node { shape, values, grad: None, requires_grad, needs, op });
        TensorRef(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op) -> Vec<usize> {
        match op {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, .. } => vec![*input, *weight, *bias],
            Op::Linear { input, weight, bias } => vec![*input, *weight, *bias],
            Op::MaxPool2d { input, .. }
            | Op::Relu { input }
            | Op::Dropout { input, .. }
            | Op::SliceRegion { input, .. }
            | Op::Scale { input, .. }
            | Op::Reshape { input }
            | Op::Sum { input } => vec![*input],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::SmoothL1 { pred, target, .. } | Op::L2 { pred, target } => vec![*pred, *target],
        }
    }

    fn dims4(&self, t: TensorRef, op: &'static str) -> Result<Dims4> {
        let s = &self.nodes[t.0].shape;
        if s.len() != 4 {
            return Err(TensorError::RankMismatch { op, expected: 4, got: s.clone() });
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    // ── image ops ──────────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        input: TensorRef,
        weight: TensorRef,
        bias: TensorRef,
        stride: usize,
        pad: usize,
    ) -> Result<TensorRef> {
        let ishape = self.dims4(input, "conv2d")?;
        let wshape = self.dims4(weight, "conv2d")?;
        let [n, in_c, h, w] = ishape;
        let [out_c, w_in_c, kh, kw] = wshape;
        if stride == 0 {
            return Err(TensorError::InvalidParam { op: "conv2d", name: "stride", value: "0".into() });
        }
        if w_in_c != in_c {
            return Err(TensorError::DimMismatch {
                op: "conv2d",
                dimension: "input channels",
                expected: w_in_c,
                got: in_c,
            });
        }
        if self.numel(bias) != out_c {
            return Err(TensorError::DimMismatch {
                op: "conv2d",
                dimension: "bias length",
                expected: out_c,
                got: self.numel(bias),
            });
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::WindowOutOfBounds {
                op: "conv2d",
                row_off: 0,
                col_off: 0,
                h: kh,
                w: kw,
                extent_h: h + 2 * pad,
                extent_w: w + 2 * pad,
            });
        }
        let oh = conv_out_size(h, kh, stride, pad);
        let ow = conv_out_size(w, kw, stride, pad);
        let mut out = vec![T::zero(); n * out_c * oh * ow];
        kernels::conv2d_forward(
            &self.nodes[input.0].values,
            ishape,
            &self.nodes[weight.0].values,
            wshape,
            &self.nodes[bias.0].values,
            stride,
            pad,
            &mut out,
        );
        Ok(self.push(
            vec![n, out_c, oh, ow],
            out,
            false,
            Op::Conv2d { input: input.0, weight: weight.0, bias: bias.0, stride, pad },
        ))
    }

    pub fn maxpool2d(&mut self, input: TensorRef, k: usize, stride: usize) -> Result<TensorRef> {
        let ishape = self.dims4(input, "maxpool2d")?;
        let [n, c, h, w] = ishape;
        if k == 0 || stride == 0 {
            return Err(TensorError::InvalidParam {
                op: "maxpool2d",
                name: "kernel/stride",
                value: format!("{k}/{stride}"),
            });
        }
        if k > h || k > w {
            return Err(TensorError::WindowOutOfBounds {
                op: "maxpool2d",
                row_off: 0,
                col_off: 0,
                h: k,
                w: k,
                extent_h: h,
                extent_w: w,
            });
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        kernels::maxpool2d_forward(&self.nodes[input.0].values, ishape, k, stride, &mut out, &mut argmax);
        Ok(self.push(vec![n, c, oh, ow], out, false, Op::MaxPool2d { input: input.0, argmax }))
    }

    pub fn relu(&mut self, input: TensorRef) -> TensorRef {
        let out: Vec<T> = self.nodes[input.0].values.iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(shape, out, false, Op::Relu { input: input.0 })
    }

    /// out = input . weight^T + bias, input is batch x D, weight is O x D.
    pub fn linear(&mut self, input: TensorRef, weight: TensorRef, bias: TensorRef) -> Result<TensorRef> {
        let ishape = self.nodes[input.0].shape.clone();
        let wshape = self.nodes[weight.0].shape.clone();
        if ishape.len() != 2 {
            return Err(TensorError::RankMismatch { op: "linear", expected: 2, got: ishape });
        }
        if wshape.len() != 2 {
            return Err(TensorError::RankMismatch { op: "linear", expected: 2, got: wshape });
        }
        let (batch, d) = (ishape[0], ishape[1]);
        let (o, wd) = (wshape[0], wshape[1]);
        if wd != d {
            return Err(TensorError::DimMismatch {
                op: "linear",
                dimension: "input features",
                expected: wd,
                got: d,
            });
        }
        if self.numel(bias) != o {
            return Err(TensorError::DimMismatch {
                op: "linear",
                dimension: "bias length",
                expected: o,
                got: self.numel(bias),
            });
        }
        let mut out = vec![T::zero(); batch * o];
        kernels::linear_forward(
            &self.nodes[input.0].values,
            batch,
            d,
            &self.nodes[weight.0].values,
            o,
            &self.nodes[bias.0].values,
            &mut out,
        );
        Ok(self.push(
            vec![batch, o],
            out,
            false,
            Op::Linear { input: input.0, weight: weight.0, bias: bias.0 },
        ))
    }

    /// Inverted dropout: zero with probability `rate` and scale survivors by
    /// 1/(1-rate) in training mode; identity in inference mode.
    pub fn dropout(
        &mut self,
        input: TensorRef,
        rate: f64,
        training: bool,
        rng: &mut RngStream,
    ) -> Result<TensorRef> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidParam {
                op: "dropout",
                name: "rate",
                value: rate.to_string(),
            });
        }
        let shape = self.nodes[input.0].shape.clone();
        if !training || rate == 0.0 {
            let out = self.nodes[input.0].values.clone();
            return Ok(self.push(
                shape,
                out,
                false,
                Op::Dropout { input: input.0, keep: Vec::new(), inv_keep_prob: 1.0 },
            ));
        }
        let inv_keep_prob = 1.0 / (1.0 - rate);
        let scale = T::from_f64(inv_keep_prob);
        let keep: Vec<bool> = (0..self.numel(input)).map(|_| rng.uniform() >= rate).collect();
        let out: Vec<T> = self.nodes[input.0]
            .values
            .iter()
            .zip(keep.iter())
            .map(|(&x, &k)| if k { x * scale } else { T::zero() })
            .collect();
        Ok(self.push(shape, out, false, Op::Dropout { input: input.0, keep, inv_keep_prob }))
    }

    pub fn concat(&mut self, inputs: &[TensorRef], axis: usize) -> Result<TensorRef> {
        if inputs.is_empty() {
            return Err(TensorError::InvalidParam { op: "concat", name: "inputs", value: "empty".into() });
        }
        let first = self.nodes[inputs[0].0].shape.clone();
        if axis >= first.len() {
            return Err(TensorError::InvalidParam { op: "concat", name: "axis", value: axis.to_string() });
        }
        let mut axis_total = 0usize;
        for (i, t) in inputs.iter().enumerate() {
            let s = &self.nodes[t.0].shape;
            let compatible = s.len() == first.len()
                && s.iter().zip(first.iter()).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ConcatMismatch {
                    index: i,
                    axis,
                    expected: first.clone(),
                    got: s.clone(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;

        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let out_row = axis_total * inner;
        let mut out = vec![T::zero(); outer * out_row];
        let mut offset = 0usize;
        for t in inputs {
            let len = self.nodes[t.0].shape[axis] * inner;
            let vals = &self.nodes[t.0].values;
            for outer_idx in 0..outer {
                let src = &vals[outer_idx * len..][..len];
                out[outer_idx * out_row + offset..][..len].copy_from_slice(src);
            }
            offset += len;
        }
        Ok(self.push(
            out_shape,
            out,
            false,
            Op::Concat { inputs: inputs.iter().map(|t| t.0).collect(), axis },
        ))
    }

    /// Copies a spatial sub-window (all batches and channels).
    pub fn slice_region(
        &mut self,
        input: TensorRef,
        row_off: usize,
        col_off: usize,
        h: usize,
        w: usize,
    ) -> Result<TensorRef> {
        let [n, c, ih, iw] = self.dims4(input, "slice_region")?;
        if h == 0 || w == 0 || row_off + h > ih || col_off + w > iw {
            return Err(TensorError::WindowOutOfBounds {
                op: "slice_region",
                row_off,
                col_off,
                h,
                w,
                extent_h: ih,
                extent_w: iw,
            });
        }
        let vals = &self.nodes[input.0].values;
        let mut out = Vec::with_capacity(n * c * h * w);
        for plane in 0..n * c {
            let base = plane * ih * iw;
            for y in 0..h {
                let row = base + (row_off + y) * iw + col_off;
                out.extend_from_slice(&vals[row..row + w]);
            }
        }
        Ok(self.push(
            vec![n, c, h, w],
            out,
            false,
            Op::SliceRegion { input: input.0, row_off, col_off, h, w },
        ))
    }

    // ── elementwise and shape ops ──────────────────────────────────────

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.check_same_shape("add", a, b)?;
        let out: Vec<T> = self.nodes[a.0]
            .values
            .iter()
            .zip(self.nodes[b.0].values.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, false, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.check_same_shape("mul", a, b)?;
        let out: Vec<T> = self.nodes[a.0]
            .values
            .iter()
            .zip(self.nodes[b.0].values.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, false, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, input: TensorRef, factor: f64) -> TensorRef {
        let f = T::from_f64(factor);
        let out: Vec<T> = self.nodes[input.0].values.iter().map(|&x| x * f).collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(shape, out, false, Op::Scale { input: input.0, factor })
    }

    pub fn reshape(&mut self, input: TensorRef, shape: &[usize]) -> Result<TensorRef> {
        let expected: usize = shape.iter().product();
        if expected != self.numel(input) || shape.is_empty() || shape.len() > 4 {
            return Err(TensorError::LengthMismatch {
                op: "reshape",
                shape: shape.to_vec(),
                expected,
                got: self.numel(input),
            });
        }
        let out = self.nodes[input.0].values.clone();
        Ok(self.push(shape.to_vec(), out, false, Op::Reshape { input: input.0 }))
    }

    /// Flattens batch x ... to batch x D.
    pub fn flatten(&mut self, input: TensorRef) -> Result<TensorRef> {
        let batch = self.nodes[input.0].shape[0];
        let d = self.numel(input) / batch;
        self.reshape(input, &[batch, d])
    }

    pub fn sum(&mut self, input: TensorRef) -> TensorRef {
        let total: T = self.nodes[input.0].values.iter().copied().sum();
        self.push(vec![1], vec![total], false, Op::Sum { input: input.0 })
    }

    // ── losses ─────────────────────────────────────────────────────────

    /// Piecewise loss averaged over elements: 0.5 x^2 inside |x| < breakpoint,
    /// breakpoint * (|x| - breakpoint/2) outside, x = pred - target.
    pub fn smooth_l1(&mut self, pred: TensorRef, target: TensorRef, breakpoint: f64) -> Result<TensorRef> {
        self.check_same_shape("smooth_l1", pred, target)?;
        self.check_finite("smooth_l1", pred)?;
        self.check_finite("smooth_l1", target)?;
        let bp = T::from_f64(breakpoint);
        let half = T::from_f64(0.5);
        let n = T::from_f64(self.numel(pred) as f64);
        let mut acc = T::zero();
        for (&p, &t) in self.nodes[pred.0].values.iter().zip(self.nodes[target.0].values.iter()) {
            let x = p - t;
            let ax = x.abs();
            acc += if ax < bp { half * x * x } else { bp * (ax - half * bp) };
        }
        Ok(self.push(
            vec![1],
            vec![acc / n],
            false,
            Op::SmoothL1 { pred: pred.0, target: target.0, breakpoint },
        ))
    }

    /// Mean of 0.5 (pred - target)^2 over elements.
    pub fn l2_loss(&mut self, pred: TensorRef, target: TensorRef) -> Result<TensorRef> {
        self.check_same_shape("l2_loss", pred, target)?;
        self.check_finite("l2_loss", pred)?;
        self.check_finite("l2_loss", target)?;
        let half = T::from_f64(0.5);
        let n = T::from_f64(self.numel(pred) as f64);
        let mut acc = T::zero();
        for (&p, &t) in self.nodes[pred.0].values.iter().zip(self.nodes[target.0].values.iter()) {
            let x = p - t;
            acc += half * x * x;
        }
        Ok(self.push(vec![1], vec![acc / n], false, Op::L2 { pred: pred.0, target: target.0 }))
    }

    fn check_same_shape(&self, op: &'static str, a: TensorRef, b: TensorRef) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(TensorError::DimMismatch {
                op,
                dimension: "shape",
                expected: sa.iter().product(),
                got: sb.iter().product(),
            });
        }
        Ok(())
    }

    fn check_finite(&self, op: &'static str, t: TensorRef) -> Result<()> {
        if self.nodes[t.0].values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        Ok(())
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Each tape node is visited exactly
    /// once; gradients accumulate into every node on a path from a
    /// `requires_grad` leaf to the loss.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.numel(loss) != 1 {
            return Err(TensorError::NonScalarLoss { shape: self.nodes[loss.0].shape.clone() });
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs {
                continue;
            }
            // split so node i's op/grad can be read while earlier nodes
            // (its inputs) are written
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let grad = node.grad.as_deref().expect("checked above");
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { input, weight, bias, stride, pad } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let ishape: Dims4 = {
                        let s = &before[input].shape;
                        [s[0], s[1], s[2], s[3]]
                    };
                    let wshape: Dims4 = {
                        let s = &before[weight].shape;
                        [s[0], s[1], s[2], s[3]]
                    };
                    let mut di = local_buf(before, input);
                    let mut dw = local_buf(before, weight);
                    let mut db = local_buf(before, bias);
                    kernels::conv2d_backward(
                        &before[input].values,
                        ishape,
                        &before[weight].values,
                        wshape,
                        *stride,
                        *pad,
                        grad,
                        di.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    accumulate(before, input, di);
                    accumulate(before, weight, dw);
                    accumulate(before, bias, db);
                }
                Op::Linear { input, weight, bias } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let (batch, d) = {
                        let s = &before[input].shape;
                        (s[0], s[1])
                    };
                    let o = before[weight].shape[0];
                    let mut di = local_buf(before, input);
                    let mut dw = local_buf(before, weight);
                    let mut db = local_buf(before, bias);
                    kernels::linear_backward(
                        &before[input].values,
                        batch,
                        d,
                        &before[weight].values,
                        o,
                        grad,
                        di.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    accumulate(before, input, di);
                    accumulate(before, weight, dw);
                    accumulate(before, bias, db);
                }
                Op::MaxPool2d { input, argmax } => {
                    if let Some(di) = grad_buf(before, *input) {
                        kernels::maxpool2d_backward(grad, argmax, di);
                    }
                }
                Op::Relu { input } => {
                    if before[*input].needs {
                        let mask: Vec<bool> =
                            before[*input].values.iter().map(|&x| x > T::zero()).collect();
                        let di = grad_buf(before, *input).expect("needs grad");
                        for ((dv, &g), m) in di.iter_mut().zip(grad.iter()).zip(mask) {
                            if m {
                                *dv += g;
                            }
                        }
                    }
                }
                Op::Dropout { input, keep, inv_keep_prob } => {
                    if let Some(di) = grad_buf(before, *input) {
                        if keep.is_empty() {
                            for (dv, &g) in di.iter_mut().zip(grad.iter()) {
                                *dv += g;
                            }
                        } else {
                            let scale = T::from_f64(*inv_keep_prob);
                            for ((dv, &g), &k) in di.iter_mut().zip(grad.iter()).zip(keep.iter()) {
                                if k {
                                    *dv += g * scale;
                                }
                            }
                        }
                    }
                }
                Op::Concat { inputs, axis } => {
                    let out_shape = node.shape.clone();
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[*axis + 1..].iter().product();
                    let out_row = out_shape[*axis] * inner;
                    let mut offset = 0usize;
                    let inputs = inputs.clone();
                    for idx in inputs {
                        let len = before[idx].shape[*axis] * inner;
                        if before[idx].needs {
                            let di = grad_buf(before, idx).expect("needs grad");
                            for outer_idx in 0..outer {
                                let src = &grad[outer_idx * out_row + offset..][..len];
                                for (dv, &g) in di[outer_idx * len..][..len].iter_mut().zip(src) {
                                    *dv += g;
                                }
                            }
                        }
                        offset += len;
                    }
                }
                Op::SliceRegion { input, row_off, col_off, h, w } => {
                    let (row_off, col_off, h, w) = (*row_off, *col_off, *h, *w);
                    let (ih, iw) = {
                        let s = &before[*input].shape;
                        (s[2], s[3])
                    };
                    let planes = before[*input].shape[0] * before[*input].shape[1];
                    if let Some(di) = grad_buf(before, *input) {
                        for plane in 0..planes {
                            let base = plane * ih * iw;
                            for y in 0..h {
                                let dst = base + (row_off + y) * iw + col_off;
                                let src = (plane * h + y) * w;
                                for x in 0..w {
                                    di[dst + x] += grad[src + x];
                                }
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for idx in [*a, *b] {
                        if let Some(d) = grad_buf(before, idx) {
                            for (dv, &g) in d.iter_mut().zip(grad.iter()) {
                                *dv += g;
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if before[a].needs {
                        let da: Vec<T> =
                            grad.iter().zip(before[b].values.iter()).map(|(&g, &y)| g * y).collect();
                        accumulate(before, a, Some(da));
                    }
                    if before[b].needs {
                        let db: Vec<T> =
                            grad.iter().zip(before[a].values.iter()).map(|(&g, &x)| g * x).collect();
                        accumulate(before, b, Some(db));
                    }
                }
                Op::Scale { input, factor } => {
                    let f = T::from_f64(*factor);
                    if let Some(di) = grad_buf(before, *input) {
                        for (dv, &g) in di.iter_mut().zip(grad.iter()) {
                            *dv += g * f;
                        }
                    }
                }
                Op::Reshape { input } => {
                    if let Some(di) = grad_buf(before, *input) {
                        for (dv, &g) in di.iter_mut().zip(grad.iter()) {
                            *dv += g;
                        }
                    }
                }
                Op::Sum { input } => {
                    let g = grad[0];
                    if let Some(di) = grad_buf(before, *input) {
                        for dv in di.iter_mut() {
                            *dv += g;
                        }
                    }
                }
                Op::SmoothL1 { pred, target, breakpoint } => {
                    let (pred, target) = (*pred, *target);
                    let bp = T::from_f64(*breakpoint);
                    let n = T::from_f64(before[pred].values.len() as f64);
                    let g = grad[0] / n;
                    let diffs: Vec<T> = before[pred]
                        .values
                        .iter()
                        .zip(before[target].values.iter())
                        .map(|(&p, &t)| p - t)
                        .collect();
                    for (idx, sign) in [(pred, T::one()), (target, -T::one())] {
                        if before[idx].needs {
                            let d = grad_buf(before, idx).expect("needs grad");
                            for (dv, &x) in d.iter_mut().zip(diffs.iter()) {
                                let piece = if x.abs() < bp { x } else { bp * x.signum() };
                                *dv += g * sign * piece;
                            }
                        }
                    }
                }
                Op::L2 { pred, target } => {
                    let (pred, target) = (*pred, *target);
                    let n = T::from_f64(before[pred].values.len() as f64);
                    let g = grad[0] / n;
                    let diffs: Vec<T> = before[pred]
                        .values
                        .iter()
                        .zip(before[target].values.iter())
                        .map(|(&p, &t)| p - t)
                        .collect();
                    for (idx, sign) in [(pred, T::one()), (target, -T::one())] {
                        if before[idx].needs {
                            let d = grad_buf(before, idx).expect("needs grad");
                            for (dv, &x) in d.iter_mut().zip(diffs.iter()) {
                                *dv += g * sign * x;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Zero-initialized gradient buffer of `nodes[idx]`, if that node needs one.
fn grad_buf<T: Scalar>(nodes: &mut [Node<T>], idx: usize) -> Option<&mut [T]> {
    if !nodes[idx].needs {
        return None;
    }
    let len = nodes[idx].values.len();
    Some(nodes[idx].grad.get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
}

/// Scratch buffer for the partial gradient of `nodes[idx]`. Multi-input ops
/// write partials into scratch first so aliased inputs (e.g. mul(x, x))
/// accumulate correctly.
fn local_buf<T: Scalar>(nodes: &[Node<T>], idx: usize) -> Option<Vec<T>> {
    nodes[idx].needs.then(|| vec![T::zero(); nodes[idx].values.len()])
}

fn accumulate<T: Scalar>(nodes: &mut [Node<T>], idx: usize, partial: Option<Vec<T>>) {
    if let Some(p) = partial {
        if let Some(g) = grad_buf(nodes, idx) {
            for (gv, pv) in g.iter_mut().zip(p) {
                *gv += pv;
            }
        }
    }
}

#[cfg(test)]
mod tests;
