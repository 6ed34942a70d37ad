//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive as a node in creation order, which is
//! already a topological order. [`Graph::backward`] walks the nodes from the
//! root down to index 0 exactly once, accumulating gradients additively over
//! fan-out. Nodes whose inputs do not require gradients are recorded (so they
//! have handles) but are skipped during the backward sweep.

use crate::error::{invalid, Error, Result};
use crate::kernels;
use crate::tensor::{strides_of, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        padding: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    Exp(usize),
    Abs(usize),
    Softplus(usize),
    Clamp {
        input: usize,
        lo: f64,
        hi: f64,
    },
    Scale(usize, f64),
    Sum(usize),
    Mean(usize),
    SumAxis {
        input: usize,
        axis: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    MaxPool2 {
        input: usize,
        argmax: Vec<u32>,
    },
    Reshape(usize),
    LogSoftmax(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Abs(_) => "abs",
            Op::Softplus(_) => "softplus",
            Op::Clamp { .. } => "clamp",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Reshape(_) => "reshape",
            Op::LogSoftmax(_) => "log_softmax",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation plus accumulated leaf gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    freed: bool,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let shape = value.shape().to_vec();
        self.nodes.push(Node {
            value: Some(value),
            shape,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Value held at `v`.
    ///
    /// Panics if the graph has been freed and `v` is not a leaf.
    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0]
            .value
            .as_ref()
            .expect("value requested from a freed graph")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last backward root(s) with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the right shape when nothing reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].shape.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Drops every intermediate value. Leaves and gradients survive; further
    /// backward passes fail with [`Error::GraphFreed`].
    pub fn free(&mut self) {
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.value = None;
            }
        }
        self.freed = true;
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        if self.freed {
            return Err(Error::GraphFreed);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        let shape = value.shape().to_vec();
        self.nodes.push(Node {
            value: Some(value),
            shape,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn val(&self, v: Var) -> Result<&Tensor> {
        self.nodes[v.0].value.as_ref().ok_or(Error::GraphFreed)
    }

    // ---- elementwise binary ------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (va, vb) = (self.val(a)?, self.val(b)?);
        let out_shape = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| {
            Error::ShapeMismatch {
                op: kind.name(),
                detail: format!("{:?} vs {:?} are not broadcastable", va.shape(), vb.shape()),
            }
        })?;
        let f = kind.forward();
        let data = if va.shape() == vb.shape() {
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let n: usize = out_shape.iter().product();
            let mut out = vec![0.0; n];
            let sa = broadcast_strides(va.shape(), &out_shape);
            let sb = broadcast_strides(vb.shape(), &out_shape);
            let (da, db) = (va.data(), vb.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
            out
        };
        let value = Tensor::new(out_shape, data)?;
        let op = match kind {
            BinaryKind::Add => Op::Add(a.0, b.0),
            BinaryKind::Sub => Op::Sub(a.0, b.0),
            BinaryKind::Mul => Op::Mul(a.0, b.0),
            BinaryKind::Div => Op::Div(a.0, b.0),
        };
        let rg = self.rg(&[a, b]);
        self.push(op, value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }

    // ---- linear algebra ----------------------------------------------------

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.val(a)?, self.val(b)?);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(va.data(), vb.data(), &mut out, m, k, n);
        let value = Tensor::new([m, n], out)?;
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul(a.0, b.0), value, rg)
    }

    /// Stride-1 2-D convolution (cross-correlation) with symmetric zero padding.
    ///
    /// `input` is `(n, c_in, h, w)`, `weight` is `(c_out, c_in, kh, kw)` and
    /// `bias`, when given, is `(c_out)`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
    ) -> Result<Var> {
        let (vx, vw) = (self.val(input)?, self.val(weight)?);
        let geom = kernels::ConvGeom::new(vx.shape(), vw.shape(), padding).map_err(|detail| {
            Error::ShapeMismatch {
                op: "conv2d",
                detail,
            }
        })?;
        let vb = match bias {
            Some(b) => {
                let vb = self.val(b)?;
                if vb.shape() != [geom.c_out] {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d",
                        detail: format!("bias {:?} for {} output channels", vb.shape(), geom.c_out),
                    });
                }
                Some(vb.data())
            }
            None => None,
        };
        let out = kernels::conv2d_forward(&geom, vx.data(), vw.data(), vb);
        let value = Tensor::new(geom.out_shape(), out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        self.push(
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.map(|b| b.0),
                padding,
            },
            value,
            rg,
        )
    }

    // ---- elementwise unary -------------------------------------------------

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.val(a)?.map(f);
        let rg = self.rg(&[a]);
        self.push(op, value, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a.0), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a.0), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a.0), f64::exp)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs(a.0), f64::abs)
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Softplus(a.0), softplus)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(invalid(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(a, Op::Clamp { input: a.0, lo, hi }, |x| x.clamp(lo, hi))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a.0, c), |x| c * x)
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.val(a)?.sum());
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a.0), value, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a)?;
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        let rg = self.rg(&[a]);
        self.push(Op::Mean(a.0), value, rg)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.val(a)?;
        if axis >= t.rank() {
            return Err(Error::ShapeMismatch {
                op: "sum_axis",
                detail: format!("axis {axis} for shape {:?}", t.shape()),
            });
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(y, x)| *y += x);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        self.push(Op::SumAxis { input: a.0, axis }, value, rg)
    }

    // ---- structural --------------------------------------------------------

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(Error::Empty("concat"))?;
        let base = self.val(*first)?.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                detail: format!("axis {axis} for shape {base:?}"),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.val(*v)?.shape();
            let agrees = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !agrees {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    detail: format!("{s:?} vs {base:?} along axis {axis}"),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.val(*v)?;
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(inputs);
        self.push(
            Op::Concat {
                inputs: inputs.iter().map(|v| v.0).collect(),
                axis,
            },
            value,
            rg,
        )
    }

    /// Channel concatenation of `(n, c, h, w)` tensors.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        for v in inputs {
            if self.shape(*v).len() != 4 {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    detail: format!("expected rank 4, got {:?}", self.shape(*v)),
                });
            }
        }
        self.concat(inputs, 1)
    }

    /// Keeps indices `start..end` of `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.val(a)?;
        if axis >= t.rank() || start >= end || end > t.shape()[axis] {
            return Err(Error::ShapeMismatch {
                op: "slice",
                detail: format!("{start}..{end} on axis {axis} of {:?}", t.shape()),
            });
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&t.data()[base..base + width * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = width;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        self.push(
            Op::Slice {
                input: a.0,
                axis,
                start,
            },
            value,
            rg,
        )
    }

    /// 2x2 max pooling with stride 2 over `(n, c, h, w)`; odd trailing rows
    /// and columns are dropped. Ties resolve to the first maximum in scan order.
    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a)?;
        let s = t.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::ShapeMismatch {
                op: "max_pool2",
                detail: format!("need (n, c, h>=2, w>=2), got {s:?}"),
            });
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        let d = t.data();
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = base + 2 * y * w + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * x + dx;
                        if d[i] > d[best] {
                            best = i;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new([s[0], s[1], oh, ow], out)?;
        let rg = self.rg(&[a]);
        self.push(Op::MaxPool2 { input: a.0, argmax }, value, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.val(a)?;
        let shape = shape.into();
        let value = t.reshape(shape.clone()).map_err(|_| Error::ShapeMismatch {
            op: "reshape",
            detail: format!("{:?} -> {shape:?}", t.shape()),
        })?;
        let rg = self.rg(&[a]);
        self.push(Op::Reshape(a.0), value, rg)
    }

    /// Log-softmax along the last axis, stabilized by max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a)?;
        let c = *t.shape().last().ok_or_else(|| Error::ShapeMismatch {
            op: "log_softmax",
            detail: "scalar input".into(),
        })?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        self.push(Op::LogSoftmax(a.0), value, rg)
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates `d root / d leaf` into every gradient-requiring leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.freed {
            return Err(Error::GraphFreed);
        }
        let root_shape = &self.nodes[root.0].shape;
        if root_shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar {
                shape: root_shape.clone(),
            });
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                match &mut self.grads[id] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(Tensor::new(node.shape.clone(), g)?),
                }
                continue;
            }
            self.backprop_node(id, &g, &mut grads)?;
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let val = |i: usize| self.nodes[i].value.as_ref().ok_or(Error::GraphFreed);
        let needs = |i: usize| self.nodes[i].requires_grad;
        let out = node.value.as_ref().ok_or(Error::GraphFreed)?;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (val(a)?, val(b)?);
                let sa = broadcast_strides(va.shape(), &node.shape);
                let sb = broadcast_strides(vb.shape(), &node.shape);
                let (da, db) = (va.data(), vb.data());
                let mut ga = needs(a).then(|| vec![0.0; da.len()]);
                let mut gb = needs(b).then(|| vec![0.0; db.len()]);
                let op = &node.op;
                for_each_broadcast(&node.shape, &sa, &sb, |o, ia, ib| {
                    let (x, y, go) = (da[ia], db[ib], g[o]);
                    let (dx, dy) = match op {
                        Op::Add(..) => (go, go),
                        Op::Sub(..) => (go, -go),
                        Op::Mul(..) => (go * y, go * x),
                        _ => (go / y, -go * x / (y * y)),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += dx;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += dy;
                    }
                });
                if let Some(ga) = ga {
                    accumulate(grads, a, &ga);
                }
                if let Some(gb) = gb {
                    accumulate(grads, b, &gb);
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (val(a)?, val(b)?);
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if needs(a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_a_bt(g, vb.data(), &mut ga, m, n, k);
                    accumulate(grads, a, &ga);
                }
                if needs(b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_at_b(va.data(), g, &mut gb, m, k, n);
                    accumulate(grads, b, &gb);
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            } => {
                let (vx, vw) = (val(*input)?, val(*weight)?);
                let geom = kernels::ConvGeom::new(vx.shape(), vw.shape(), *padding)
                    .map_err(|detail| Error::ShapeMismatch {
                        op: "conv2d",
                        detail,
                    })?;
                if needs(*input) {
                    let gx = kernels::conv2d_grad_input(&geom, g, vw.data());
                    accumulate(grads, *input, &gx);
                }
                if needs(*weight) {
                    let gw = kernels::conv2d_grad_weight(&geom, g, vx.data());
                    accumulate(grads, *weight, &gw);
                }
                if let Some(b) = bias.filter(|b| needs(*b)) {
                    let gb = kernels::conv2d_grad_bias(&geom, g);
                    accumulate(grads, b, &gb);
                }
            }
            Op::Relu(a) => {
                let x = val(*a)?.data();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(&go, &xi)| if xi > 0.0 { go } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &gx);
            }
            Op::Sigmoid(a) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(out.data())
                    .map(|(&go, &s)| go * s * (1.0 - s))
                    .collect();
                accumulate(grads, *a, &gx);
            }
            Op::Log(a) => {
                let x = val(*a)?.data();
                let gx: Vec<f64> = g.iter().zip(x).map(|(&go, &xi)| go / xi).collect();
                accumulate(grads, *a, &gx);
            }
            Op::Exp(a) => {
                let gx: Vec<f64> = g.iter().zip(out.data()).map(|(&go, &e)| go * e).collect();
                accumulate(grads, *a, &gx);
            }
            Op::Abs(a) => {
                let x = val(*a)?.data();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(&go, &xi)| {
                        if xi > 0.0 {
                            go
                        } else if xi < 0.0 {
                            -go
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, *a, &gx);
            }
            Op::Softplus(a) => {
                let x = val(*a)?.data();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(&go, &xi)| go * sigmoid(xi))
                    .collect();
                accumulate(grads, *a, &gx);
            }
            Op::Clamp { input, lo, hi } => {
                let x = val(*input)?.data();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(&go, &xi)| if xi > *lo && xi < *hi { go } else { 0.0 })
                    .collect();
                accumulate(grads, *input, &gx);
            }
            Op::Scale(a, c) => {
                let gx: Vec<f64> = g.iter().map(|&go| go * c).collect();
                accumulate(grads, *a, &gx);
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].shape.iter().product();
                accumulate(grads, *a, &vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n: usize = self.nodes[*a].shape.iter().product();
                accumulate(grads, *a, &vec![g[0] / n as f64; n]);
            }
            Op::SumAxis { input, axis } => {
                let (outer, len, inner) = split_axis(&self.nodes[*input].shape, *axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        gx[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(src);
                    }
                }
                accumulate(grads, *input, &gx);
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for &i in inputs {
                    let chunk = self.nodes[i].shape[*axis] * inner;
                    if needs(i) {
                        let mut gi = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total + offset;
                            gi.extend_from_slice(&g[base..base + chunk]);
                        }
                        accumulate(grads, i, &gi);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = &self.nodes[*input].shape;
                let (outer, len, inner) = split_axis(in_shape, *axis);
                let width = node.shape[*axis];
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    gx[dst..dst + width * inner]
                        .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
                }
                accumulate(grads, *input, &gx);
            }
            Op::MaxPool2 { input, argmax } => {
                let n: usize = self.nodes[*input].shape.iter().product();
                let mut gx = vec![0.0; n];
                for (&go, &src) in g.iter().zip(argmax) {
                    gx[src as usize] += go;
                }
                accumulate(grads, *input, &gx);
            }
            Op::Reshape(a) => accumulate(grads, *a, g),
            Op::LogSoftmax(a) => {
                let c = *node.shape.last().expect("log_softmax rank");
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), xr) in g.chunks(c).zip(out.data().chunks(c)).zip(gx.chunks_mut(c)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        xr[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                accumulate(grads, *a, &gx);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    fn forward(self) -> fn(f64, f64) -> f64 {
        match self {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numpy-style broadcast of two shapes, aligned at the trailing axis.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out_shape`, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let offset = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out_shape.iter().product();
    if out_shape.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out_shape.len();
    let last = rank - 1;
    let (inner, sa_last, sb_last) = (out_shape[last], sa[last], sb[last]);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < n {
        for k in 0..inner {
            f(o + k, ia + k * sa_last, ib + k * sb_last);
        }
        o += inner;
        // advance the odometer over all but the last axis
        let mut axis = last;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            ia += sa[axis];
            ib += sb[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            ia -= sa[axis] * out_shape[axis];
            ib -= sb[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
