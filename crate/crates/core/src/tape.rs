//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Node inputs always precede the node, so a
//! reverse scan of the record is a valid topological order.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, ConvGrads};
use crate::tensor::Tensor;

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A scalar node together with its value; the root of a backward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarTarget {
    pub value: f64,
    pub node: NodeId,
}

impl From<ScalarTarget> for NodeId {
    fn from(t: ScalarTarget) -> Self {
        t.node
    }
}

impl From<&ScalarTarget> for NodeId {
    fn from(t: &ScalarTarget) -> Self {
        t.node
    }
}

/// Kind of a recorded primitive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Relu,
    MaxPool2d,
    UpsampleBilinear,
    UpsampleNearest,
    Add,
    Mul,
    Scale,
    ConcatChannels,
    SumAt,
    Sum,
    GlobalAvgPool,
    SoftmaxChannels,
    CrossEntropy,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::Relu => "relu",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::UpsampleBilinear => "upsample_bilinear",
            OpKind::UpsampleNearest => "upsample_nearest",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::SumAt => "sum_at",
            OpKind::Sum => "sum",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::SoftmaxChannels => "softmax_channels",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub const ALL: [OpKind; 15] = [
        OpKind::Leaf,
        OpKind::Conv2d,
        OpKind::Relu,
        OpKind::MaxPool2d,
        OpKind::UpsampleBilinear,
        OpKind::UpsampleNearest,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::ConcatChannels,
        OpKind::SumAt,
        OpKind::Sum,
        OpKind::GlobalAvgPool,
        OpKind::SoftmaxChannels,
        OpKind::CrossEntropy,
    ];
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        geometry: ConvGeometry,
        batch: usize,
    },
    Relu(NodeId),
    MaxPool2d {
        input: NodeId,
        argmax: Vec<usize>,
    },
    UpsampleBilinear(NodeId),
    UpsampleNearest {
        input: NodeId,
        factor: usize,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatChannels(Vec<NodeId>),
    SumAt {
        input: NodeId,
        indices: Vec<usize>,
    },
    Sum(NodeId),
    GlobalAvgPool(NodeId),
    SoftmaxChannels(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::UpsampleBilinear(_) => OpKind::UpsampleBilinear,
            Op::UpsampleNearest { .. } => OpKind::UpsampleNearest,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::ConcatChannels(_) => OpKind::ConcatChannels,
            Op::SumAt { .. } => OpKind::SumAt,
            Op::Sum(_) => OpKind::Sum,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::SoftmaxChannels(_) => OpKind::SoftmaxChannels,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => vec![*input, *kernel, *bias],
            Op::Relu(x)
            | Op::UpsampleBilinear(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::GlobalAvgPool(x)
            | Op::SoftmaxChannels(x) => vec![*x],
            Op::MaxPool2d { input, .. }
            | Op::UpsampleNearest { input, .. }
            | Op::SumAt { input, .. } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ConcatChannels(xs) => xs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients returned by [`Tape::backward`], keyed by node.
pub type Gradients = HashMap<NodeId, Tensor>;

/// Record of operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: doubles every gradient contribution of `kind` during
    /// backward, producing a deliberately wrong derivative.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(Error::UnknownNode(id.0))
    }

    pub fn kind(&self, id: NodeId) -> Result<OpKind> {
        self.nodes
            .get(id.0)
            .map(|n| n.op.kind())
            .ok_or(Error::UnknownNode(id.0))
    }

    /// Input node ids of `id`, in operand order.
    pub fn inputs(&self, id: NodeId) -> Result<Vec<NodeId>> {
        self.nodes
            .get(id.0)
            .map(|n| n.op.inputs())
            .ok_or(Error::UnknownNode(id.0))
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn check(&self, id: NodeId) -> Result<&Tensor> {
        self.value(id)
    }

    fn check4(&self, op: &'static str, id: NodeId) -> Result<(usize, usize, usize, usize)> {
        self.check(id)?.dims4().map_err(|_| {
            Error::shape(
                op,
                "rank",
                format!("expected rank-4 input, got {:?}", self.val(id).shape()),
            )
        })
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Turns a scalar node into a backward root.
    pub fn scalar_target(&self, id: NodeId) -> Result<ScalarTarget> {
        let v = self.check(id)?;
        if !v.is_scalar() {
            return Err(Error::NonScalarTarget(v.shape().to_vec()));
        }
        Ok(ScalarTarget {
            value: v.data()[0],
            node: id,
        })
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        padding: usize,
        stride: usize,
    ) -> Result<NodeId> {
        const OP: &str = "conv2d";
        let (batch, cin, h, w) = self.check4(OP, input)?;
        let (cout, kcin, kh, kw) = self.check4(OP, kernel)?;
        if kcin != cin {
            return Err(Error::shape(
                OP,
                "in_channels",
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        let bshape = self.check(bias)?.shape();
        if bshape != [cout] {
            return Err(Error::shape(
                OP,
                "bias",
                format!("bias shape {bshape:?}, expected [{cout}]"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape(OP, "stride", "stride must be >= 1"));
        }
        if kh > h + 2 * padding {
            return Err(Error::shape(
                OP,
                "height",
                format!("kernel height {kh} exceeds padded input height {}", h + 2 * padding),
            ));
        }
        if kw > w + 2 * padding {
            return Err(Error::shape(
                OP,
                "width",
                format!("kernel width {kw} exceeds padded input width {}", w + 2 * padding),
            ));
        }
        let geometry = ConvGeometry {
            in_channels: cin,
            out_channels: cout,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            padding,
            stride,
        };
        let data = kernels::conv2d_forward(
            &geometry,
            batch,
            self.val(input).data(),
            self.val(kernel).data(),
            self.val(bias).data(),
        );
        let shape = vec![batch, cout, geometry.out_height(), geometry.out_width()];
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
                batch,
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.check(x)?.map(|v| v.max(0.0));
        Ok(self.push(value, Op::Relu(x)))
    }

    /// Non-overlapping max pooling; both spatial extents must divide evenly.
    pub fn maxpool2d(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        const OP: &str = "maxpool2d";
        let (b, c, h, w) = self.check4(OP, x)?;
        if window == 0 {
            return Err(Error::shape(OP, "window", "window must be >= 1"));
        }
        if h % window != 0 {
            return Err(Error::shape(
                OP,
                "height",
                format!("height {h} not divisible by window {window}"),
            ));
        }
        if w % window != 0 {
            return Err(Error::shape(
                OP,
                "width",
                format!("width {w} not divisible by window {window}"),
            ));
        }
        let (values, argmax) = kernels::maxpool_forward(b * c, h, w, window, self.val(x).data());
        let value = Tensor::new(vec![b, c, h / window, w / window], values)?;
        Ok(self.push(value, Op::MaxPool2d { input: x, argmax }))
    }

    /// Align-corners bilinear upsampling to `out_h` x `out_w`.
    pub fn upsample_bilinear(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        const OP: &str = "upsample_bilinear";
        let (b, c, h, w) = self.check4(OP, x)?;
        if out_h < h {
            return Err(Error::shape(
                OP,
                "height",
                format!("cannot downscale height {h} to {out_h}"),
            ));
        }
        if out_w < w {
            return Err(Error::shape(
                OP,
                "width",
                format!("cannot downscale width {w} to {out_w}"),
            ));
        }
        let data = kernels::bilinear_forward(b * c, h, w, out_h, out_w, self.val(x).data());
        let value = Tensor::new(vec![b, c, out_h, out_w], data)?;
        Ok(self.push(value, Op::UpsampleBilinear(x)))
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        const OP: &str = "upsample_nearest";
        let (b, c, h, w) = self.check4(OP, x)?;
        if factor == 0 {
            return Err(Error::shape(OP, "factor", "factor must be >= 1"));
        }
        let data = kernels::nearest_forward(b * c, h, w, factor, self.val(x).data());
        let value = Tensor::new(vec![b, c, h * factor, w * factor], data)?;
        Ok(self.push(value, Op::UpsampleNearest { input: x, factor }))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.check(a)?.shape(), self.check(b)?.shape());
        if sa != sb {
            return Err(Error::shape(op, "operands", format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.val(a), self.val(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.val(a), self.val(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let value = self.check(x)?.map(|v| v * factor);
        Ok(self.push(value, Op::Scale(x, factor)))
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        const OP: &str = "concat_channels";
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape(OP, "operands", "nothing to concatenate"))?;
        let (b, _, h, w) = self.check4(OP, first)?;
        let mut total = 0;
        for &p in parts {
            let (pb, pc, ph, pw) = self.check4(OP, p)?;
            if pb != b {
                return Err(Error::shape(OP, "batch", format!("{pb} vs {b}")));
            }
            if (ph, pw) != (h, w) {
                return Err(Error::shape(
                    OP,
                    "spatial",
                    format!("{ph}x{pw} vs {h}x{w}"),
                ));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(b * total * h * w);
        for bi in 0..b {
            for &p in parts {
                let v = self.val(p);
                let item = v.shape()[1] * h * w;
                data.extend_from_slice(&v.data()[bi * item..(bi + 1) * item]);
            }
        }
        let value = Tensor::new(vec![b, total, h, w], data)?;
        Ok(self.push(value, Op::ConcatChannels(parts.to_vec())))
    }

    /// Scalar sum of the elements at the given flat indices (an index mask).
    /// An empty index list yields 0.
    pub fn sum_at(&mut self, x: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let v = self.check(x)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.len()) {
            return Err(Error::shape(
                "sum_at",
                "index",
                format!("index {bad} out of range for {} elements", v.len()),
            ));
        }
        let total = indices.iter().map(|&i| v.data()[i]).sum();
        Ok(self.push(Tensor::scalar(total), Op::SumAt { input: x, indices }))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.check(x)?.sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum(x)))
    }

    /// Spatial mean per channel: `[b, c, h, w] -> [b, c, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = self.check4("global_avg_pool", x)?;
        let n = (h * w) as f64;
        let data = self
            .val(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / n)
            .collect();
        let value = Tensor::new(vec![b, c, 1, 1], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x)))
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = self.check4("softmax_channels", x)?;
        let data = softmax_channels(self.val(x).data(), b, c, h * w);
        let value = Tensor::new(vec![b, c, h, w], data)?;
        Ok(self.push(value, Op::SoftmaxChannels(x)))
    }

    /// Mean over pixels of `-log softmax(logits)[label]`. `labels` holds one
    /// class id per `(batch, row, col)` in row-major order.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        const OP: &str = "cross_entropy";
        let (b, c, h, w) = self.check4(OP, logits)?;
        let plane = h * w;
        if labels.len() != b * plane {
            return Err(Error::shape(
                OP,
                "labels",
                format!("{} labels for {} pixels", labels.len(), b * plane),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::ClassOutOfRange {
                class: bad,
                num_classes: c,
            });
        }
        let x = self.val(logits).data();
        let probs = softmax_channels(x, b, c, plane);
        let mut total = 0.0;
        for bi in 0..b {
            for p in 0..plane {
                let base = bi * c * plane + p;
                let label = labels[bi * plane + p];
                let max = (0..c).map(|k| x[base + k * plane]).fold(f64::NEG_INFINITY, f64::max);
                let lse = (0..c).map(|k| (x[base + k * plane] - max).exp()).sum::<f64>().ln() + max;
                total += lse - x[base + label * plane];
            }
        }
        let loss = total / (b * plane) as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Gradients of `target` with respect to every node in `wanted`.
    /// Nodes the target does not depend on get zero tensors.
    pub fn backward(&self, target: impl Into<NodeId>, wanted: &[NodeId]) -> Result<Gradients> {
        let target = target.into();
        let tv = self.check(target)?;
        if !tv.is_scalar() {
            return Err(Error::NonScalarTarget(tv.shape().to_vec()));
        }
        for &w in wanted {
            self.check(w)?;
        }

        // A node needs a gradient if it is wanted or feeds something that does.
        let mut needs = vec![false; target.0 + 1];
        for &w in wanted {
            if w.0 <= target.0 {
                needs[w.0] = true;
            }
        }
        for i in 0..=target.0 {
            if !needs[i] && self.nodes[i].op.inputs().iter().any(|p| needs[p.0]) {
                needs[i] = true;
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; target.0 + 1];
        if needs[target.0] {
            grads[target.0] = Some(vec![1.0; tv.len()]);
        }
        for i in (0..=target.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &needs, &mut grads);
            grads[i] = Some(g);
        }

        Ok(wanted
            .iter()
            .map(|&w| {
                let v = self.val(w);
                let g = grads
                    .get(w.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![0.0; v.len()]);
                let t = Tensor::new(v.shape().to_vec(), g).expect("gradient matches value shape");
                (w, t)
            })
            .collect())
    }

    fn propagate(&self, i: usize, g: &[f64], needs: &[bool], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let faulty = self.fault == Some(node.op.kind());
        let mut scratch: Vec<(NodeId, Vec<f64>)> = Vec::new();
        let want = |id: NodeId| needs[id.0];
        let zeros = |id: NodeId| vec![0.0; self.val(id).len()];

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
                batch,
            } => {
                let mut gi = want(*input).then(|| zeros(*input));
                let mut gk = want(*kernel).then(|| zeros(*kernel));
                let mut gb = want(*bias).then(|| zeros(*bias));
                kernels::conv2d_backward(
                    geometry,
                    *batch,
                    self.val(*input).data(),
                    self.val(*kernel).data(),
                    g,
                    ConvGrads {
                        input: gi.as_deref_mut(),
                        kernel: gk.as_deref_mut(),
                        bias: gb.as_deref_mut(),
                    },
                );
                scratch.extend(gi.map(|v| (*input, v)));
                scratch.extend(gk.map(|v| (*kernel, v)));
                scratch.extend(gb.map(|v| (*bias, v)));
            }
            Op::Relu(x) => {
                if want(*x) {
                    let xs = self.val(*x).data();
                    let d = xs
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    scratch.push((*x, d));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if want(*input) {
                    let mut d = zeros(*input);
                    for (&src, &gv) in argmax.iter().zip(g) {
                        d[src] += gv;
                    }
                    scratch.push((*input, d));
                }
            }
            Op::UpsampleBilinear(x) => {
                if want(*x) {
                    let (b, c, h, w) = self.val(*x).dims4().expect("rank 4");
                    let (_, _, oh, ow) = node.value.dims4().expect("rank 4");
                    let mut d = zeros(*x);
                    kernels::bilinear_backward(b * c, h, w, oh, ow, g, &mut d);
                    scratch.push((*x, d));
                }
            }
            Op::UpsampleNearest { input, factor } => {
                if want(*input) {
                    let (b, c, h, w) = self.val(*input).dims4().expect("rank 4");
                    let mut d = zeros(*input);
                    kernels::nearest_backward(b * c, h, w, *factor, g, &mut d);
                    scratch.push((*input, d));
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if want(*x) {
                        scratch.push((*x, g.to_vec()));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                if want(*a) {
                    scratch.push((*a, g.iter().zip(vb).map(|(gv, y)| gv * y).collect()));
                }
                if want(*b) {
                    scratch.push((*b, g.iter().zip(va).map(|(gv, x)| gv * x).collect()));
                }
            }
            Op::Scale(x, f) => {
                if want(*x) {
                    scratch.push((*x, g.iter().map(|gv| gv * f).collect()));
                }
            }
            Op::ConcatChannels(parts) => {
                let (b, _, h, w) = node.value.dims4().expect("rank 4");
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let pc = self.val(p).shape()[1];
                    if want(p) {
                        let mut d = Vec::with_capacity(b * pc * h * w);
                        for bi in 0..b {
                            let start = (bi * total + offset) * h * w;
                            d.extend_from_slice(&g[start..start + pc * h * w]);
                        }
                        scratch.push((p, d));
                    }
                    offset += pc;
                }
            }
            Op::SumAt { input, indices } => {
                if want(*input) {
                    let mut d = zeros(*input);
                    for &idx in indices {
                        d[idx] += g[0];
                    }
                    scratch.push((*input, d));
                }
            }
            Op::Sum(x) => {
                if want(*x) {
                    scratch.push((*x, vec![g[0]; self.val(*x).len()]));
                }
            }
            Op::GlobalAvgPool(x) => {
                if want(*x) {
                    let (_, _, h, w) = self.val(*x).dims4().expect("rank 4");
                    let n = (h * w) as f64;
                    let d = g
                        .iter()
                        .flat_map(|&gv| std::iter::repeat_n(gv / n, h * w))
                        .collect();
                    scratch.push((*x, d));
                }
            }
            Op::SoftmaxChannels(x) => {
                if want(*x) {
                    let (b, c, h, w) = node.value.dims4().expect("rank 4");
                    let plane = h * w;
                    let y = node.value.data();
                    let mut d = vec![0.0; y.len()];
                    for bi in 0..b {
                        for p in 0..plane {
                            let base = bi * c * plane + p;
                            let dot: f64 = (0..c).map(|k| y[base + k * plane] * g[base + k * plane]).sum();
                            for k in 0..c {
                                let idx = base + k * plane;
                                d[idx] = y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    scratch.push((*x, d));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if want(*logits) {
                    let (b, c, h, w) = self.val(*logits).dims4().expect("rank 4");
                    let plane = h * w;
                    let scale = g[0] / (b * plane) as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for bi in 0..b {
                        for p in 0..plane {
                            let label = labels[bi * plane + p];
                            d[bi * c * plane + label * plane + p] -= scale;
                        }
                    }
                    scratch.push((*logits, d));
                }
            }
        }

        for (id, mut d) in scratch {
            if faulty {
                d.iter_mut().for_each(|v| *v *= 2.0);
            }
            match &mut grads[id.0] {
                Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, v)| *a += v),
                slot @ None => *slot = Some(d),
            }
        }
    }

    /// The value of `id` with its gradient from `grads` attached.
    pub fn value_with_grad(&self, id: NodeId, grads: &Gradients) -> Result<Tensor> {
        let mut t = self.check(id)?.clone();
        if let Some(g) = grads.get(&id) {
            t.set_grad(g.data().to_vec())?;
        }
        Ok(t)
    }
}

/// Numerically stable softmax across the channel axis of `[b, c, plane]`.
pub(crate) fn softmax_channels(x: &[f64], b: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for p in 0..plane {
            let base = bi * c * plane + p;
            let max = (0..c).map(|k| x[base + k * plane]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..c {
                let e = (x[base + k * plane] - max).exp();
                out[base + k * plane] = e;
                z += e;
            }
            for k in 0..c {
                out[base + k * plane] /= z;
            }
        }
    }
    out
}
