//! Computation graph: records tensor operations in construction order and
//! replays them in reverse for gradient computation.
//!
//! Construction order is a topological order by design, since every
//! operation can only reference nodes that already exist. The backward
//! pass walks the node list once, in reverse, accumulating vector-Jacobian
//! products into each input's gradient buffer.

use crate::error::AutodiffError;
use crate::kernels;
use crate::tensor::Tensor;

/// Value below which `log` inputs are clamped.
pub const LOG_CLAMP: f64 = 1e-12;

const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId, broadcast_b: bool },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    MinElem { a: NodeId, b: NodeId },
    MaxElem { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId },
    Abs { x: NodeId },
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Log { x: NodeId },
    Softmax { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, mean: Vec<f64>, inv_std: Vec<f64> },
    Reshape { x: NodeId },
    Concat { xs: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    Sum { x: NodeId },
    Mean { x: NodeId },
    GradReverse { x: NodeId },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A single-owner computation graph over [`Tensor`] values.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

type OpResult = Result<NodeId, AutodiffError>;

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad()
    }

    /// Registers a leaf holding a copy of `t`, preserving its grad flag.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let mut v = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("leaf shape");
        v.set_requires_grad(t.requires_grad());
        self.push(v, Op::Leaf)
    }

    /// Registers a non-differentiable constant leaf, taking ownership.
    pub fn constant(&mut self, mut t: Tensor) -> NodeId {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf)
    }

    /// Shorthand for a scalar constant leaf.
    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    /// Gradient of the last backward pass with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    fn shape_err(op: &'static str, shapes: &[&[usize]], expected: impl Into<String>) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            expected: expected.into(),
        }
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> OpResult {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Self::shape_err(op_name, &[sa, sb], "identical shapes"));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let mut v = Tensor::new(self.shape(a).to_vec(), data).expect("shape");
        v.set_requires_grad(self.requires(a) || self.requires(b));
        Ok(self.push(v, op))
    }

    /// Elementwise sum. `b` may also be a rank-1 `[C]` or `[1, C]` tensor
    /// broadcast over the rows of a `[R, C]` left operand.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> OpResult {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            return self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a, b, broadcast_b: false });
        }
        let cols_b = match sb.as_slice() {
            [c] => *c,
            [1, c] => *c,
            _ => 0,
        };
        if sa.len() == 2 && cols_b == sa[1] {
            let (rows, cols) = (sa[0], sa[1]);
            let mut data = self.data(a).to_vec();
            let bd = self.data(b);
            for r in 0..rows {
                for (o, &bv) in data[r * cols..(r + 1) * cols].iter_mut().zip(bd) {
                    *o += bv;
                }
            }
            let mut v = Tensor::new(sa, data).expect("shape");
            v.set_requires_grad(self.requires(a) || self.requires(b));
            return Ok(self.push(v, Op::Add { a, b, broadcast_b: true }));
        }
        Err(Self::shape_err("add", &[&sa, &sb], "identical shapes or row-broadcastable bias"))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> OpResult {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> OpResult {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> OpResult {
        self.binary_same_shape("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    /// Elementwise minimum; ties route the gradient to the left operand.
    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> OpResult {
        self.binary_same_shape("min", a, b, f64::min, Op::MinElem { a, b })
    }

    /// Elementwise maximum; ties route the gradient to the left operand.
    pub fn max_elem(&mut self, a: NodeId, b: NodeId) -> OpResult {
        self.binary_same_shape("max", a, b, f64::max, Op::MaxElem { a, b })
    }

    fn unary(
        &mut self,
        x: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> NodeId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| f(v)).collect();
        let mut v = Tensor::new(self.shape(x).to_vec(), data).expect("shape");
        v.set_requires_grad(self.requires(x));
        self.push(v, op)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| v * c, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| v + c, Op::AddScalar { x })
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::abs, Op::Abs { x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(
            x,
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid { x },
        )
    }

    /// Natural log, clamped at [`LOG_CLAMP`]; below the clamp the gradient
    /// is zero (the true derivative of the clamped function).
    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(LOG_CLAMP).ln(), Op::Log { x })
    }

    /// Identity forward; negates the upstream gradient on the way back.
    pub fn grad_reverse(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v, Op::GradReverse { x })
    }

    /// Row-stochastic softmax over the last axis, with row-max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> OpResult {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| {
            Self::shape_err("softmax", &[&shape], "rank >= 1")
        })?;
        let rows = self.value(x).numel() / cols;
        let mut data = vec![0.0; rows * cols];
        kernels::softmax_rows(self.data(x), &mut data, rows, cols);
        let mut v = Tensor::new(shape, data).expect("shape");
        v.set_requires_grad(self.requires(x));
        Ok(self.push(v, Op::Softmax { x }))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> OpResult {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| {
            Self::shape_err("layer_norm", &[&shape], "rank >= 1")
        })?;
        let rows = self.value(x).numel() / cols;
        for (name, id) in [("gain", gain), ("bias", bias)] {
            if self.value(id).numel() != cols {
                return Err(Self::shape_err(
                    "layer_norm",
                    &[&shape, self.shape(id)],
                    format!("{name} must have {cols} elements"),
                ));
            }
        }
        let xd = self.data(x);
        let gd = self.data(gain).to_vec();
        let bd = self.data(bias).to_vec();
        let mut data = vec![0.0; rows * cols];
        let mut means = vec![0.0; rows];
        let mut inv_stds = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            means[r] = mean;
            inv_stds[r] = inv;
            let orow = &mut data[r * cols..(r + 1) * cols];
            for c in 0..cols {
                orow[c] = (row[c] - mean) * inv * gd[c] + bd[c];
            }
        }
        let mut v = Tensor::new(shape, data).expect("shape");
        v.set_requires_grad(self.requires(x) || self.requires(gain) || self.requires(bias));
        Ok(self.push(
            v,
            Op::LayerNorm { x, gain, bias, mean: means, inv_std: inv_stds },
        ))
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> OpResult {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::shape_err("matmul", &[&sa, &sb], "(m,k) x (k,n)"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        kernels::matmul(self.data(a), self.data(b), &mut data, m, k, n);
        let mut v = Tensor::new(vec![m, n], data).expect("shape");
        v.set_requires_grad(self.requires(a) || self.requires(b));
        Ok(self.push(v, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: NodeId) -> OpResult {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Self::shape_err("transpose", &[&s], "rank 2"));
        }
        let mut data = vec![0.0; s[0] * s[1]];
        kernels::transpose(self.data(x), &mut data, s[0], s[1]);
        let mut v = Tensor::new(vec![s[1], s[0]], data).expect("shape");
        v.set_requires_grad(self.requires(x));
        Ok(self.push(v, Op::Transpose { x }))
    }

    /// Strided 2-D convolution with symmetric zero padding and bias.
    /// `x`: (cin,h,w), `w`: (cout,cin,kh,kw), `b`: (cout).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> OpResult {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        let ok = sx.len() == 3
            && sw.len() == 4
            && sb.len() == 1
            && sw[1] == sx[0]
            && sb[0] == sw[0]
            && sx[1] + 2 * pad >= sw[2]
            && sx[2] + 2 * pad >= sw[3];
        if !ok {
            return Err(Self::shape_err(
                "conv2d",
                &[&sx, &sw, &sb],
                "(cin,h,w) x (cout,cin,kh,kw) x (cout) with kernel fitting the padded input",
            ));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let oh = kernels::conv_out_dim(h, kh, stride, pad);
        let ow = kernels::conv_out_dim(wd, kw, stride, pad);
        let mut data = vec![0.0; cout * oh * ow];
        kernels::conv2d(
            self.data(x), self.data(w), self.data(b), &mut data,
            cin, h, wd, cout, kh, kw, stride, pad,
        );
        let mut v = Tensor::new(vec![cout, oh, ow], data).expect("shape");
        v.set_requires_grad(self.requires(x) || self.requires(w) || self.requires(b));
        Ok(self.push(v, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> OpResult {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Self::shape_err(
                "reshape",
                &[self.shape(x), &shape],
                "equal element counts",
            ));
        }
        let mut v = Tensor::new(shape, self.data(x).to_vec()).expect("shape");
        v.set_requires_grad(self.requires(x));
        Ok(self.push(v, Op::Reshape { x }))
    }

    /// Concatenation along `axis`; shapes must agree on all other axes.
    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> OpResult {
        let first = xs.first().ok_or_else(|| {
            Self::shape_err("concat", &[], "at least one input")
        })?;
        let rank = self.shape(*first).len();
        if axis >= rank {
            return Err(AutodiffError::InvalidAxis { op: "concat", axis, rank });
        }
        let mut out_shape = self.shape(*first).to_vec();
        out_shape[axis] = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != rank
                || s.iter().zip(&out_shape).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                let shapes: Vec<&[usize]> = xs.iter().map(|&x| self.shape(x)).collect();
                return Err(Self::shape_err("concat", &shapes, "equal shapes off the concat axis"));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total_axis = out_shape[axis];
        let mut data = vec![0.0; outer * total_axis * inner];
        let mut offset = 0;
        for &x in xs {
            let len = self.shape(x)[axis];
            let xd = self.data(x);
            for o in 0..outer {
                let src = &xd[o * len * inner..(o + 1) * len * inner];
                let dst_base = (o * total_axis + offset) * inner;
                data[dst_base..dst_base + len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        let any_grad = xs.iter().any(|&x| self.requires(x));
        let mut v = Tensor::new(out_shape, data).expect("shape");
        v.set_requires_grad(any_grad);
        Ok(self.push(v, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> OpResult {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::InvalidAxis { op: "slice", axis, rank: shape.len() });
        }
        if start + len > shape[axis] {
            return Err(Self::shape_err(
                "slice",
                &[&shape],
                format!("range {start}..{} within axis {axis} of size {}", start + len, shape[axis]),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full_axis = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let xd = self.data(x);
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * full_axis + start) * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&xd[src..src + len * inner]);
        }
        let mut v = Tensor::new(out_shape, data).expect("shape");
        v.set_requires_grad(self.requires(x));
        Ok(self.push(v, Op::Slice { x, axis, start }))
    }

    /// Sum of all elements, as a single-element tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.data(x).iter().sum();
        let mut v = Tensor::scalar(total);
        v.set_requires_grad(self.requires(x));
        self.push(v, Op::Sum { x })
    }

    /// Mean of all elements, as a single-element tensor.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let total: f64 = self.data(x).iter().sum();
        let mut v = Tensor::scalar(total / n);
        v.set_requires_grad(self.requires(x));
        self.push(v, Op::Mean { x })
    }

    /// Runs the backward pass from a scalar loss node, populating `grad`
    /// on every reachable gradient-tracked node.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AutodiffError> {
        if !self.value(loss).is_scalar() {
            return Err(AutodiffError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        if !self.requires(loss) {
            return Err(AutodiffError::NoGradPath);
        }
        for node in &mut self.nodes {
            if node.value.requires_grad() {
                node.value.ensure_grad().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        self.nodes[loss.0].value.ensure_grad()[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            // Detach the output grad so inputs can be mutated freely.
            let gout = match self.nodes[i].value.take_grad() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.backward_op(i, &op, &gout);
            self.nodes[i].value.put_grad(gout);
        }
        Ok(())
    }

    fn acc(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        if self.nodes[id.0].value.requires_grad() {
            f(self.nodes[id.0].value.ensure_grad());
        }
    }

    fn backward_op(&mut self, out_idx: usize, op: &Op, gout: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Add { a, b, broadcast_b } => {
                self.acc(*a, |g| g.iter_mut().zip(gout).for_each(|(g, &d)| *g += d));
                if *broadcast_b {
                    let cols = self.value(*b).numel();
                    self.acc(*b, |g| {
                        for chunk in gout.chunks_exact(cols) {
                            g.iter_mut().zip(chunk).for_each(|(g, &d)| *g += d);
                        }
                    });
                } else {
                    self.acc(*b, |g| g.iter_mut().zip(gout).for_each(|(g, &d)| *g += d));
                }
            }
            Op::Sub { a, b } => {
                self.acc(*a, |g| g.iter_mut().zip(gout).for_each(|(g, &d)| *g += d));
                self.acc(*b, |g| g.iter_mut().zip(gout).for_each(|(g, &d)| *g -= d));
            }
            Op::Mul { a, b } => {
                let bd = self.data(*b).to_vec();
                self.acc(*a, |g| {
                    g.iter_mut().zip(gout).zip(&bd).for_each(|((g, &d), &bv)| *g += d * bv)
                });
                let ad = self.data(*a).to_vec();
                self.acc(*b, |g| {
                    g.iter_mut().zip(gout).zip(&ad).for_each(|((g, &d), &av)| *g += d * av)
                });
            }
            Op::Div { a, b } => {
                let ad = self.data(*a).to_vec();
                let bd = self.data(*b).to_vec();
                self.acc(*a, |g| {
                    g.iter_mut().zip(gout).zip(&bd).for_each(|((g, &d), &bv)| *g += d / bv)
                });
                self.acc(*b, |g| {
                    for (i, g) in g.iter_mut().enumerate() {
                        *g -= gout[i] * ad[i] / (bd[i] * bd[i]);
                    }
                });
            }
            Op::MinElem { a, b } => {
                let ad = self.data(*a).to_vec();
                let bd = self.data(*b).to_vec();
                self.acc(*a, |g| {
                    for (i, g) in g.iter_mut().enumerate() {
                        if ad[i] <= bd[i] {
                            *g += gout[i];
                        }
                    }
                });
                self.acc(*b, |g| {
                    for (i, g) in g.iter_mut().enumerate() {
                        if ad[i] > bd[i] {
                            *g += gout[i];
                        }
                    }
                });
            }
            Op::MaxElem { a, b } => {
                let ad = self.data(*a).to_vec();
                let bd = self.data(*b).to_vec();
                self.acc(*a, |g| {
                    for (i, g) in g.iter_mut().enumerate() {
                        if ad[i] >= bd[i] {
                            *g += gout[i];
                        }
                    }
                });
                self.acc(*b, |g| {
                    for (i, g) in g.iter_mut().enumerate() {
                        if ad[i] < bd[i] {
                            *g += gout[i];
                        }
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.acc(*x, |g| g.iter_mut().zip(gout).for_each(|(g, &d)| *g += c * d));
            }
            Op::AddScalar { x } => {
                self.acc(*x, |g| g.iter_mut().zip(gout).for_each(|(g, &d)| *g += d));
            }
            Op::Abs { x } => {
                let xd = self.data(*x).to_vec();
                self.acc(*x, |g| {
                    for (i, g) in g.iter_mut().enumerate() {
                        if xd[i] > 0.0 {
                            *g += gout[i];
                        } else if xd[i] < 0.0 {
                            *g -= gout[i];
                        }
                    }
                });
            }
            Op::Relu { x } => {
                let xd = self.data(*x).to_vec();
                self.acc(*x, |g| {
                    for (i, g) in g.iter_mut().enumerate() {
                        if xd[i] > 0.0 {
                            *g += gout[i];
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let yd = self.nodes[out_idx].value.data().to_vec();
                self.acc(*x, |g| {
                    for (i, g) in g.iter_mut().enumerate() {
                        *g += gout[i] * yd[i] * (1.0 - yd[i]);
                    }
                });
            }
            Op::Log { x } => {
                let xd = self.data(*x).to_vec();
                self.acc(*x, |g| {
                    for (i, g) in g.iter_mut().enumerate() {
                        if xd[i] >= LOG_CLAMP {
                            *g += gout[i] / xd[i];
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let yd = self.nodes[out_idx].value.data().to_vec();
                let cols = *self.shape(*x).last().unwrap();
                self.acc(*x, |g| {
                    for r in 0..yd.len() / cols {
                        let y = &yd[r * cols..(r + 1) * cols];
                        let go = &gout[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(go).map(|(&p, &d)| p * d).sum();
                        let grow = &mut g[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            grow[c] += y[c] * (go[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, mean, inv_std } => {
                let cols = *self.shape(*x).last().unwrap();
                let rows = mean.len();
                let xd = self.data(*x).to_vec();
                let gd = self.data(*gain).to_vec();
                self.acc(*bias, |g| {
                    for r in 0..rows {
                        let go = &gout[r * cols..(r + 1) * cols];
                        g.iter_mut().zip(go).for_each(|(g, &d)| *g += d);
                    }
                });
                self.acc(*gain, |g| {
                    for r in 0..rows {
                        let go = &gout[r * cols..(r + 1) * cols];
                        let row = &xd[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            g[c] += go[c] * (row[c] - mean[r]) * inv_std[r];
                        }
                    }
                });
                self.acc(*x, |g| {
                    for r in 0..rows {
                        let go = &gout[r * cols..(r + 1) * cols];
                        let row = &xd[r * cols..(r + 1) * cols];
                        let inv = inv_std[r];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for c in 0..cols {
                            let xhat = (row[c] - mean[r]) * inv;
                            let dxhat = go[c] * gd[c];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let nc = cols as f64;
                        let grow = &mut g[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            let xhat = (row[c] - mean[r]) * inv;
                            let dxhat = go[c] * gd[c];
                            grow[c] += inv * (dxhat - sum_dxhat / nc - xhat * sum_dxhat_xhat / nc);
                        }
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let bd = self.data(*b).to_vec();
                self.acc(*a, |g| kernels::matmul_a_bt_acc(gout, &bd, g, m, n, k));
                let ad = self.data(*a).to_vec();
                self.acc(*b, |g| kernels::matmul_at_b_acc(&ad, gout, g, m, k, n));
            }
            Op::Transpose { x } => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut gt = vec![0.0; gout.len()];
                kernels::transpose(gout, &mut gt, cols, rows);
                self.acc(*x, |g| g.iter_mut().zip(&gt).for_each(|(g, &d)| *g += d));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let sx = self.shape(*x).to_vec();
                let sw = self.shape(*w).to_vec();
                let xd = self.data(*x).to_vec();
                let wd_ = self.data(*w).to_vec();
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wd_.len()];
                let mut db = vec![0.0; sw[0]];
                kernels::conv2d_backward(
                    &xd, &wd_, gout, &mut dx, &mut dw, &mut db,
                    sx[0], sx[1], sx[2], sw[0], sw[2], sw[3], *stride, *pad,
                );
                self.acc(*x, |g| g.iter_mut().zip(&dx).for_each(|(g, &d)| *g += d));
                self.acc(*w, |g| g.iter_mut().zip(&dw).for_each(|(g, &d)| *g += d));
                self.acc(*b, |g| g.iter_mut().zip(&db).for_each(|(g, &d)| *g += d));
            }
            Op::Reshape { x } => {
                self.acc(*x, |g| g.iter_mut().zip(gout).for_each(|(g, &d)| *g += d));
            }
            Op::Concat { xs, axis } => {
                let out_shape = self.nodes[out_idx].value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_axis = out_shape[*axis];
                let mut offset = 0;
                for &xid in xs {
                    let len = self.shape(xid)[*axis];
                    let off = offset;
                    self.acc(xid, |g| {
                        for o in 0..outer {
                            let src_base = (o * total_axis + off) * inner;
                            let dst = &mut g[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut()
                                .zip(&gout[src_base..src_base + len * inner])
                                .for_each(|(g, &d)| *g += d);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x).to_vec();
                let out_shape = self.nodes[out_idx].value.shape().to_vec();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let full_axis = in_shape[*axis];
                let len = out_shape[*axis];
                self.acc(*x, |g| {
                    for o in 0..outer {
                        let dst_base = (o * full_axis + start) * inner;
                        let src = &gout[o * len * inner..(o + 1) * len * inner];
                        g[dst_base..dst_base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(g, &d)| *g += d);
                    }
                });
            }
            Op::Sum { x } => {
                let d = gout[0];
                self.acc(*x, |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel() as f64;
                let d = gout[0] / n;
                self.acc(*x, |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::GradReverse { x } => {
                self.acc(*x, |g| g.iter_mut().zip(gout).for_each(|(g, &d)| *g -= d));
            }
        }
    }
}
