//! Dense 64-bit tensors with a Wengert-tape reverse-mode differentiator.
//!
//! The op set is exactly what the network forward pass needs: affine maps
//! over the last axis, sigmoid (or its hard step replacement), concatenation,
//! max reductions, broadcast/expand, a suffix cumulative max over time, and
//! softmax cross-entropy. Tensors are immutable once recorded; a `Tape` is
//! confined to one logical thread and consumed by a single backward pass.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not hold {len} elements")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("reduction over empty axis {axis}")]
    EmptyReduction { axis: usize },
    #[error("concat inputs disagree on leading extents: {a:?} vs {b:?}")]
    ConcatLeadingMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this tape")]
    DoubleBackward,
    #[error("expand count must be >= 1")]
    ZeroExpand,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense tensor of f64. Zero-extent axes are allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Last extent, or 0 for rank-0 tensors.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }
}

/// Weight matrix `[in_dim, out_dim]` plus bias `[out_dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl AffineMap {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(TensorError::DimMismatch {
                context: "affine weight rank",
                expected: 2,
                got: weight.rank(),
            });
        }
        if weight.shape()[1] != bias.len() {
            return Err(TensorError::DimMismatch {
                context: "affine bias width",
                expected: weight.shape()[1],
                got: bias.len(),
            });
        }
        Ok(AffineMap { weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        AffineMap {
            weight: Tensor::zeros(vec![in_dim, out_dim]),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Sigmoid { x: NodeId },
    Step { x: NodeId },
    ConcatLast { xs: Vec<NodeId> },
    ReduceMax { x: NodeId, argmax: Vec<usize> },
    Expand { x: NodeId, axis: usize, n: usize },
    SuffixCumMax { x: NodeId, argmax: Vec<usize> },
    Maximum { a: NodeId, b: NodeId, take_a: Vec<bool> },
    Stack { xs: Vec<NodeId> },
    Row { x: NodeId, index: usize },
    Reshape { x: NodeId },
    IndicatorFeatures { x: NodeId, theta: NodeId, beta: f64 },
    SoftmaxCrossEntropy { logits: NodeId, label: usize, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Wengert tape. Records every primitive in topological order; `backward`
/// replays them once in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Per-node adjoints produced by `Tape::backward`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to node `id`; zero tensor if the
    /// node did not influence the loss.
    pub fn get(&self, id: NodeId, shape_of: &Tape) -> Tensor {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape_of.value(id).shape().to_vec()),
        }
    }
}

fn sigmoid_f(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Registers a leaf node (parameter or constant input).
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// Applies `m` to the last axis of `x`; identical map on every leading slice.
    pub fn affine_last_dim(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (in_dim, out_dim) = {
            let wt = self.value(w);
            (wt.shape()[0], wt.shape()[1])
        };
        let xv = self.value(x);
        if xv.last_dim() != in_dim {
            return Err(TensorError::DimMismatch {
                context: "affine input width",
                expected: in_dim,
                got: xv.last_dim(),
            });
        }
        let lead: usize = xv.shape()[..xv.rank() - 1].iter().product();
        let mut out_shape = xv.shape().to_vec();
        *out_shape.last_mut().unwrap() = out_dim;
        let mut out = vec![0.0; lead * out_dim];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = self.value(b).data();
            for l in 0..lead {
                let xs = &xd[l * in_dim..(l + 1) * in_dim];
                let os = &mut out[l * out_dim..(l + 1) * out_dim];
                os.copy_from_slice(bd);
                for (i, &xi) in xs.iter().enumerate() {
                    if xi != 0.0 {
                        let wr = &wd[i * out_dim..(i + 1) * out_dim];
                        for (o, &wv) in os.iter_mut().zip(wr) {
                            *o += xi * wv;
                        }
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(out_shape, out).unwrap(), Op::Affine { x, w, b }))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&e| sigmoid_f(e)).collect(),
        };
        self.push(out, Op::Sigmoid { x })
    }

    /// Unit step at zero: 1 if pre-activation is strictly positive. Gradient
    /// is zero everywhere; only used for hard-mode compiled evaluation.
    pub fn step(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v
                .data
                .iter()
                .map(|&e| if e > 0.0 { 1.0 } else { 0.0 })
                .collect(),
        };
        self.push(out, Op::Step { x })
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat_last(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        assert!(!xs.is_empty(), "concat_last needs at least one input");
        let lead_shape = {
            let first = self.value(xs[0]);
            first.shape()[..first.rank() - 1].to_vec()
        };
        let mut total_last = 0;
        for &x in xs {
            let v = self.value(x);
            if v.shape()[..v.rank() - 1] != lead_shape[..] {
                return Err(TensorError::ConcatLeadingMismatch {
                    a: lead_shape,
                    b: v.shape()[..v.rank() - 1].to_vec(),
                });
            }
            total_last += v.last_dim();
        }
        let lead: usize = lead_shape.iter().product();
        let mut out = vec![0.0; lead * total_last];
        let mut offset = 0;
        for &x in xs {
            let v = self.value(x);
            let d = v.last_dim();
            for l in 0..lead {
                out[l * total_last + offset..l * total_last + offset + d]
                    .copy_from_slice(&v.data()[l * d..(l + 1) * d]);
            }
            offset += d;
        }
        let mut shape = lead_shape;
        shape.push(total_last);
        Ok(self.push(
            Tensor::new(shape, out).unwrap(),
            Op::ConcatLast { xs: xs.to_vec() },
        ))
    }

    /// Max reduction removing `axis`. Backward routes each upstream gradient
    /// entirely to the lowest flat index among maximal elements.
    pub fn reduce_max(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: v.rank(),
            });
        }
        let extent = v.shape()[axis];
        if extent == 0 {
            return Err(TensorError::EmptyReduction { axis });
        }
        let outer: usize = v.shape()[..axis].iter().product();
        let inner: usize = v.shape()[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for k in 0..extent {
                    let idx = o * extent * inner + k * inner + i;
                    let val = v.data()[idx];
                    if val > best {
                        best = val;
                        best_idx = idx;
                    }
                }
                out[o * inner + i] = best;
                argmax[o * inner + i] = best_idx;
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(
            Tensor::new(shape, out).unwrap(),
            Op::ReduceMax { x, argmax },
        ))
    }

    /// Inserts a new axis of extent `n` at `axis`, duplicating the input.
    /// Backward sums over the inserted axis.
    pub fn expand(&mut self, x: NodeId, axis: usize, n: usize) -> Result<NodeId> {
        if n == 0 {
            return Err(TensorError::ZeroExpand);
        }
        let v = self.value(x);
        if axis > v.rank() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: v.rank(),
            });
        }
        let outer: usize = v.shape()[..axis].iter().product();
        let inner: usize = v.shape()[axis..].iter().product();
        let mut out = vec![0.0; outer * n * inner];
        for o in 0..outer {
            let src = &v.data()[o * inner..(o + 1) * inner];
            for k in 0..n {
                out[(o * n + k) * inner..(o * n + k + 1) * inner].copy_from_slice(src);
            }
        }
        let mut shape = v.shape().to_vec();
        shape.insert(axis, n);
        Ok(self.push(Tensor::new(shape, out).unwrap(), Op::Expand { x, axis, n }))
    }

    /// `out[t] = max over t'' >= t of x[t'']` along axis 0 of a `[T, C]`
    /// tensor, in one reverse sweep. Ties go to the smallest `t''`.
    pub fn suffix_cummax_time(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(TensorError::DimMismatch {
                context: "suffix_cummax_time rank",
                expected: 2,
                got: v.rank(),
            });
        }
        let (t_len, c) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; t_len * c];
        let mut argmax = vec![0usize; t_len * c];
        for j in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut best_t = t_len;
            for t in (0..t_len).rev() {
                let val = v.data()[t * c + j];
                // >= so earlier time steps win ties (lowest flat index).
                if val >= best {
                    best = val;
                    best_t = t;
                }
                out[t * c + j] = best;
                argmax[t * c + j] = best_t * c + j;
            }
        }
        Ok(self.push(
            Tensor::new(vec![t_len, c], out).unwrap(),
            Op::SuffixCumMax { x, argmax },
        ))
    }

    /// Elementwise max of two same-shape tensors; ties take the first operand.
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::DimMismatch {
                context: "maximum shapes",
                expected: av.len(),
                got: bv.len(),
            });
        }
        let take_a: Vec<bool> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x >= y)
            .collect();
        let data: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        let shape = av.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, data).unwrap(),
            Op::Maximum { a, b, take_a },
        ))
    }

    /// Stacks same-shape tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        assert!(!xs.is_empty(), "stack needs at least one input");
        let base = self.value(xs[0]).shape().to_vec();
        let each: usize = base.iter().product();
        let mut data = Vec::with_capacity(each * xs.len());
        for &x in xs {
            let v = self.value(x);
            if v.shape() != base {
                return Err(TensorError::DimMismatch {
                    context: "stack shapes",
                    expected: each,
                    got: v.len(),
                });
            }
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![xs.len()];
        shape.extend_from_slice(&base);
        Ok(self.push(
            Tensor::new(shape, data).unwrap(),
            Op::Stack { xs: xs.to_vec() },
        ))
    }

    /// Slices index `index` along axis 0, dropping that axis.
    pub fn row(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() == 0 || index >= v.shape()[0] {
            return Err(TensorError::AxisOutOfRange {
                axis: index,
                rank: v.shape().first().copied().unwrap_or(0),
            });
        }
        let inner: usize = v.shape()[1..].iter().product();
        let data = v.data()[index * inner..(index + 1) * inner].to_vec();
        let shape = v.shape()[1..].to_vec();
        Ok(self.push(Tensor::new(shape, data).unwrap(), Op::Row { x, index }))
    }

    /// Reinterprets the data under a new shape of equal size.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x);
        let n: usize = shape.iter().product();
        if n != v.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                len: v.len(),
            });
        }
        let t = Tensor::new(shape, v.data().to_vec()).unwrap();
        Ok(self.push(t, Op::Reshape { x }))
    }

    /// Threshold feature bank: `out[m, i] = sigmoid((x[m] - theta[i]) / beta)`
    /// for a flat input `x` and threshold grid `theta`.
    pub fn indicator_features(&mut self, x: NodeId, theta: NodeId, beta: f64) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 1 {
            return Err(TensorError::DimMismatch {
                context: "indicator_features input rank",
                expected: 1,
                got: xv.rank(),
            });
        }
        let tv = self.value(theta);
        let (m, c) = (xv.len(), tv.len());
        let mut out = vec![0.0; m * c];
        for (k, &xm) in xv.data().iter().enumerate() {
            for (i, &th) in tv.data().iter().enumerate() {
                out[k * c + i] = sigmoid_f((xm - th) / beta);
            }
        }
        Ok(self.push(
            Tensor::new(vec![m, c], out).unwrap(),
            Op::IndicatorFeatures { x, theta, beta },
        ))
    }

    /// `-log softmax(logits)[label]` for a rank-1 logits tensor.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let v = self.value(logits);
        if v.rank() != 1 {
            return Err(TensorError::DimMismatch {
                context: "softmax logits rank",
                expected: 1,
                got: v.rank(),
            });
        }
        let c = v.len();
        if label >= c {
            return Err(TensorError::LabelOutOfRange { label, classes: c });
        }
        let max = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.data().iter().map(|&e| (e - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
        let loss = sum.ln() + max - v.data()[label];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar loss. Consumes the tape's one backward pass.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::DoubleBackward);
        }
        let lv = self.value(loss);
        if lv.len() != 1 || lv.rank() != 0 {
            return Err(TensorError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let gd = g.data().to_vec();
            // Re-store so callers can read the adjoint afterwards.
            grads[id] = Some(g);
            let ensure = |grads: &mut Vec<Option<Tensor>>, nid: NodeId, shape: Vec<usize>| {
                if grads[nid].is_none() {
                    grads[nid] = Some(Tensor::zeros(shape));
                }
            };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Affine { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let in_dim = self.value(w).shape()[0];
                    let out_dim = self.value(w).shape()[1];
                    let lead = self.value(x).len() / in_dim.max(1);
                    let lead = if in_dim == 0 {
                        self.value(id).len() / out_dim.max(1)
                    } else {
                        lead
                    };
                    ensure(&mut grads, x, self.value(x).shape().to_vec());
                    ensure(&mut grads, w, self.value(w).shape().to_vec());
                    ensure(&mut grads, b, self.value(b).shape().to_vec());
                    let xd = self.nodes[x].value.data.clone();
                    let wd = self.nodes[w].value.data.clone();
                    {
                        let gx = grads[x].as_mut().unwrap();
                        let gxd = gx.data_mut();
                        for l in 0..lead {
                            let gs = &gd[l * out_dim..(l + 1) * out_dim];
                            for i in 0..in_dim {
                                let wr = &wd[i * out_dim..(i + 1) * out_dim];
                                let mut acc = 0.0;
                                for (gv, wv) in gs.iter().zip(wr) {
                                    acc += gv * wv;
                                }
                                gxd[l * in_dim + i] += acc;
                            }
                        }
                    }
                    {
                        let gw = grads[w].as_mut().unwrap();
                        let gwd = gw.data_mut();
                        for l in 0..lead {
                            let gs = &gd[l * out_dim..(l + 1) * out_dim];
                            let xs = &xd[l * in_dim..(l + 1) * in_dim];
                            for (i, &xi) in xs.iter().enumerate() {
                                if xi != 0.0 {
                                    let wr = &mut gwd[i * out_dim..(i + 1) * out_dim];
                                    for (o, gv) in wr.iter_mut().zip(gs) {
                                        *o += xi * gv;
                                    }
                                }
                            }
                        }
                    }
                    {
                        let gb = grads[b].as_mut().unwrap();
                        let gbd = gb.data_mut();
                        for l in 0..lead {
                            let gs = &gd[l * out_dim..(l + 1) * out_dim];
                            for (o, gv) in gbd.iter_mut().zip(gs) {
                                *o += gv;
                            }
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    ensure(&mut grads, x, self.value(x).shape().to_vec());
                    let yv = self.nodes[id].value.data.clone();
                    let gx = grads[x].as_mut().unwrap();
                    for (i, gv) in gd.iter().enumerate() {
                        let y = yv[i];
                        gx.data_mut()[i] += gv * y * (1.0 - y);
                    }
                }
                Op::Step { x } => {
                    // Zero derivative; keep the accumulator so shapes exist.
                    let x = *x;
                    ensure(&mut grads, x, self.value(x).shape().to_vec());
                }
                Op::ConcatLast { xs } => {
                    let xs = xs.clone();
                    let total_last = self.value(id).last_dim();
                    let lead = self.value(id).len() / total_last.max(1);
                    let mut offset = 0;
                    for &x in &xs {
                        let d = self.value(x).last_dim();
                        ensure(&mut grads, x, self.value(x).shape().to_vec());
                        let gx = grads[x].as_mut().unwrap();
                        for l in 0..lead {
                            for j in 0..d {
                                gx.data_mut()[l * d + j] += gd[l * total_last + offset + j];
                            }
                        }
                        offset += d;
                    }
                }
                Op::ReduceMax { x, argmax, .. } => {
                    let x = *x;
                    let argmax = argmax.clone();
                    ensure(&mut grads, x, self.value(x).shape().to_vec());
                    let gx = grads[x].as_mut().unwrap();
                    for (o, &src) in argmax.iter().enumerate() {
                        gx.data_mut()[src] += gd[o];
                    }
                }
                Op::Expand { x, axis, n } => {
                    let (x, axis, n) = (*x, *axis, *n);
                    ensure(&mut grads, x, self.value(x).shape().to_vec());
                    let outer: usize = self.value(x).shape()[..axis].iter().product();
                    let inner: usize = self.value(x).shape()[axis..].iter().product();
                    let gx = grads[x].as_mut().unwrap();
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                gx.data_mut()[o * inner + i] += gd[(o * n + k) * inner + i];
                            }
                        }
                    }
                }
                Op::SuffixCumMax { x, argmax } => {
                    let x = *x;
                    let argmax = argmax.clone();
                    ensure(&mut grads, x, self.value(x).shape().to_vec());
                    let gx = grads[x].as_mut().unwrap();
                    for (o, &src) in argmax.iter().enumerate() {
                        gx.data_mut()[src] += gd[o];
                    }
                }
                Op::Maximum { a, b, take_a } => {
                    let (a, b) = (*a, *b);
                    let take_a = take_a.clone();
                    ensure(&mut grads, a, self.value(a).shape().to_vec());
                    ensure(&mut grads, b, self.value(b).shape().to_vec());
                    for (i, &ta) in take_a.iter().enumerate() {
                        let tgt = if ta { a } else { b };
                        grads[tgt].as_mut().unwrap().data_mut()[i] += gd[i];
                    }
                }
                Op::Stack { xs } => {
                    let xs = xs.clone();
                    let each = if xs.is_empty() {
                        0
                    } else {
                        self.value(xs[0]).len()
                    };
                    for (k, &x) in xs.iter().enumerate() {
                        ensure(&mut grads, x, self.value(x).shape().to_vec());
                        let gx = grads[x].as_mut().unwrap();
                        for i in 0..each {
                            gx.data_mut()[i] += gd[k * each + i];
                        }
                    }
                }
                Op::Row { x, index } => {
                    let (x, index) = (*x, *index);
                    ensure(&mut grads, x, self.value(x).shape().to_vec());
                    let inner = self.value(id).len();
                    let gx = grads[x].as_mut().unwrap();
                    for i in 0..inner {
                        gx.data_mut()[index * inner + i] += gd[i];
                    }
                }
                Op::Reshape { x } => {
                    let x = *x;
                    ensure(&mut grads, x, self.value(x).shape().to_vec());
                    let gx = grads[x].as_mut().unwrap();
                    for (o, gv) in gx.data_mut().iter_mut().zip(&gd) {
                        *o += gv;
                    }
                }
                Op::IndicatorFeatures { x, theta, beta } => {
                    let (x, theta, beta) = (*x, *theta, *beta);
                    ensure(&mut grads, x, self.value(x).shape().to_vec());
                    ensure(&mut grads, theta, self.value(theta).shape().to_vec());
                    let c = self.value(theta).len();
                    let yv = self.nodes[id].value.data.clone();
                    let m = self.value(x).len();
                    {
                        let gt = grads[theta].as_mut().unwrap();
                        for k in 0..m {
                            for i in 0..c {
                                let y = yv[k * c + i];
                                gt.data_mut()[i] += gd[k * c + i] * y * (1.0 - y) * (-1.0 / beta);
                            }
                        }
                    }
                    {
                        let gx = grads[x].as_mut().unwrap();
                        for k in 0..m {
                            let mut acc = 0.0;
                            for i in 0..c {
                                let y = yv[k * c + i];
                                acc += gd[k * c + i] * y * (1.0 - y) * (1.0 / beta);
                            }
                            gx.data_mut()[k] += acc;
                        }
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    label,
                    probs,
                } => {
                    let (logits, label) = (*logits, *label);
                    let probs = probs.clone();
                    ensure(&mut grads, logits, self.value(logits).shape().to_vec());
                    let gl = grads[logits].as_mut().unwrap();
                    let up = gd[0];
                    for (i, &p) in probs.iter().enumerate() {
                        let onehot = if i == label { 1.0 } else { 0.0 };
                        gl.data_mut()[i] += up * (p - onehot);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Central finite differences oracle used by gradient checks. `f` maps a flat
/// parameter vector to a scalar.
pub fn central_difference(
    f: &mut dyn FnMut(&[f64]) -> f64,
    point: &[f64],
    coord: usize,
    h: f64,
) -> f64 {
    let mut p = point.to_vec();
    p[coord] = point[coord] + h;
    let fp = f(&p);
    p[coord] = point[coord] - h;
    let fm = f(&p);
    (fp - fm) / (2.0 * h)
}

/// Relative error convention shared byed gradient checks: scaled by the
/// larger magnitude, with an absolute floor for near-zero pairs.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / denom
}
