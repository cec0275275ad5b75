use super::conv::{conv2d_backward, conv2d_forward, transpose_conv2d_backward, transpose_conv2d_forward};
use super::{ConvGeometry, Element, Padding, Shape4, Tensor4};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeometry,
    },
    TransposeConv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeometry,
    },
    LeakyRelu {
        x: NodeId,
        slope: T,
    },
    Sigmoid {
        x: NodeId,
    },
    Elementwise {
        kind: ElementwiseKind,
        a: NodeId,
        b: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    SliceChannels {
        x: NodeId,
        start: usize,
    },
    Sum {
        x: NodeId,
    },
    SumSquares {
        x: NodeId,
    },
    Scale {
        x: NodeId,
        factor: T,
    },
    Mse {
        pred: NodeId,
        target: NodeId,
        /// Per-sample weights; `None` means the plain mean over every element.
        weights: Option<Vec<T>>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor4<T>,
    grad: Option<Tensor4<T>>,
    op: Op<T>,
}

/// Append-only record of a forward computation. Nodes are stored in
/// creation order, which is a topological order; [`Graph::backward`] walks
/// it in reverse.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor4<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor4<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor4<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn take_value(&mut self, id: NodeId) -> Tensor4<T> {
        let node = &mut self.nodes[id.0];
        std::mem::replace(&mut node.value, Tensor4::scalar(T::zero()))
    }

    /// Which side of the kink every leaky-relu input element sits on, in
    /// recording order. Central differences are only valid when this is the
    /// same at both probe points.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::LeakyRelu { x, .. } = node.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v >= T::zero()));
            }
        }
        out
    }

    fn shape(&self, id: NodeId) -> Shape4 {
        self.nodes[id.0].value.shape()
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<NodeId> {
        let (y, geom) = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, padding)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, geom }))
    }

    pub fn transpose_conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<NodeId> {
        let (y, geom) =
            transpose_conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, padding)?;
        Ok(self.push(y, Op::TransposeConv2d { x, w, b, geom }))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: T) -> Result<NodeId> {
        if !(slope > T::zero() && slope < T::one()) {
            return Err(Error::InvalidArgument(format!(
                "leaky slope {slope} must lie in (0, 1)"
            )));
        }
        let y = self.value(x).map(|v| if v >= T::zero() { v } else { slope * v });
        Ok(self.push(y, Op::LeakyRelu { x, slope }))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid { x })
    }

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("elementwise", format!("{sa} vs {sb}")));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data = match kind {
            ElementwiseKind::Add => va.iter().zip(vb).map(|(&p, &q)| p + q).collect(),
            ElementwiseKind::Mul => va.iter().zip(vb).map(|(&p, &q)| p * q).collect(),
        };
        let y = Tensor4::new(sa, data)?;
        Ok(self.push(y, Op::Elementwise { kind, a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseKind::Add, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseKind::Mul, a, b)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).concat_channels(self.value(b))?;
        Ok(self.push(y, Op::Concat { a, b }))
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let y = self.value(x).slice_channels(start, len)?;
        Ok(self.push(y, Op::SliceChannels { x, start }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Tensor4::scalar(T::of(s)), Op::Sum { x })
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64() * v.f64()).sum();
        self.push(Tensor4::scalar(T::of(s)), Op::SumSquares { x })
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let y = self.value(x).map(|v| v * factor);
        self.push(y, Op::Scale { x, factor })
    }

    /// Mean over every element of `(pred − target)²`.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.mse_impl(pred, target, None)
    }

    /// `Σₙ weightₙ · mean((predₙ − targetₙ)²)` over batch items `n`.
    pub fn weighted_mse(&mut self, pred: NodeId, target: NodeId, weights: Vec<T>) -> Result<NodeId> {
        self.mse_impl(pred, target, Some(weights))
    }

    fn mse_impl(&mut self, pred: NodeId, target: NodeId, weights: Option<Vec<T>>) -> Result<NodeId> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(Error::shape("loss", format!("prediction {sp} vs target {st}")));
        }
        if let Some(w) = &weights {
            if w.len() != sp.n {
                return Err(Error::shape(
                    "loss",
                    format!("{} sample weights for a batch of {}", w.len(), sp.n),
                ));
            }
        }
        let (p, t) = (self.value(pred), self.value(target));
        let per_sample = sp.sample_len();
        let loss = match &weights {
            None => {
                let total: f64 = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&a, &b)| (a - b).f64().powi(2))
                    .sum();
                total / sp.len() as f64
            }
            Some(w) => (0..sp.n)
                .map(|n| {
                    let sq: f64 = p
                        .sample(n)
                        .iter()
                        .zip(t.sample(n))
                        .map(|(&a, &b)| (a - b).f64().powi(2))
                        .sum();
                    w[n].f64() * sq / per_sample as f64
                })
                .sum(),
        };
        Ok(self.push(Tensor4::scalar(T::of(loss)), Op::Mse { pred, target, weights }))
    }

    /// Reverse-mode sweep from a scalar node. Afterwards every leaf holds
    /// a gradient buffer (all zeros when the loss does not depend on it).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.shape(loss);
        if shape != Shape4::scalar() {
            return Err(Error::NonScalarLoss(shape.dims()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor4::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &gy);
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor4::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    /// Gradient accumulator for node `id`, allocated on first use.
    fn grad_buf(&mut self, id: NodeId) -> &mut [T] {
        let node = &mut self.nodes[id.0];
        let shape = node.value.shape();
        node.grad.get_or_insert_with(|| Tensor4::zeros(shape)).data_mut()
    }

    fn accumulate(&mut self, id: NodeId, f: impl Fn(usize) -> T) {
        for (i, g) in self.grad_buf(id).iter_mut().enumerate() {
            *g = *g + f(i);
        }
    }

    /// Takes a node's gradient buffer out so a kernel can write into it
    /// while other nodes are borrowed.
    fn take_grad(&mut self, id: NodeId) -> Tensor4<T> {
        let node = &mut self.nodes[id.0];
        let shape = node.value.shape();
        node.grad.take().unwrap_or_else(|| Tensor4::zeros(shape))
    }

    fn propagate(&mut self, idx: usize, gy: &Tensor4<T>) {
        // Ops only reference earlier nodes, so split borrows are safe.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, ref geom } | &Op::TransposeConv2d { x, w, b, ref geom } => {
                let transpose = matches!(op, Op::TransposeConv2d { .. });
                let mut gx = self.take_grad(x);
                let mut gw = self.take_grad(w);
                let mut gb = b.map(|b| self.take_grad(b));
                let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let backward = if transpose {
                    transpose_conv2d_backward
                } else {
                    conv2d_backward
                };
                backward(
                    xv,
                    wv,
                    geom,
                    gy,
                    Some(gx.data_mut()),
                    Some(gw.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                self.nodes[x.0].grad = Some(gx);
                self.nodes[w.0].grad = Some(gw);
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.nodes[b.0].grad = Some(gb);
                }
            }
            &Op::LeakyRelu { x, slope } => {
                let xv = self.nodes[x.0].value.data().to_vec();
                let g = gy.data();
                self.accumulate(x, |i| if xv[i] >= T::zero() { g[i] } else { slope * g[i] });
            }
            &Op::Sigmoid { x } => {
                let y = self.nodes[idx].value.data().to_vec();
                let g = gy.data();
                self.accumulate(x, |i| g[i] * y[i] * (T::one() - y[i]));
            }
            &Op::Elementwise { kind, a, b } => {
                let g = gy.data();
                match kind {
                    ElementwiseKind::Add => {
                        self.accumulate(a, |i| g[i]);
                        self.accumulate(b, |i| g[i]);
                    }
                    ElementwiseKind::Mul => {
                        let va = self.nodes[a.0].value.data().to_vec();
                        let vb = self.nodes[b.0].value.data().to_vec();
                        self.accumulate(a, |i| g[i] * vb[i]);
                        self.accumulate(b, |i| g[i] * va[i]);
                    }
                }
            }
            &Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (la, lb) = (sa.sample_len(), sb.sample_len());
                let g = gy.data();
                self.accumulate(a, |i| {
                    let (n, r) = (i / la, i % la);
                    g[n * (la + lb) + r]
                });
                self.accumulate(b, |i| {
                    let (n, r) = (i / lb, i % lb);
                    g[n * (la + lb) + la + r]
                });
            }
            &Op::SliceChannels { x, start } => {
                let sx = self.shape(x);
                let sy = gy.shape();
                let plane = sx.plane_len();
                let buf = self.grad_buf(x);
                for n in 0..sy.n {
                    let dst = n * sx.sample_len() + start * plane;
                    for (d, &g) in buf[dst..dst + sy.sample_len()].iter_mut().zip(gy.sample(n)) {
                        *d = *d + g;
                    }
                }
            }
            &Op::Sum { x } => {
                let g = gy.data()[0];
                self.accumulate(x, |_| g);
            }
            &Op::SumSquares { x } => {
                let g = gy.data()[0];
                let two = T::of(2.0);
                let xv = self.nodes[x.0].value.data().to_vec();
                self.accumulate(x, |i| two * xv[i] * g);
            }
            &Op::Scale { x, factor } => {
                let g = gy.data();
                self.accumulate(x, |i| g[i] * factor);
            }
            Op::Mse { pred, target, weights } => {
                let (pred, target) = (*pred, *target);
                let shape = self.shape(pred);
                let per_sample = shape.sample_len();
                let g = gy.data()[0].f64();
                let coeff: Vec<T> = match weights {
                    None => vec![T::of(2.0 * g / shape.len() as f64); shape.n],
                    Some(w) => w.iter().map(|w| T::of(2.0 * g * w.f64() / per_sample as f64)).collect(),
                };
                let diff: Vec<T> = self.nodes[pred.0]
                    .value
                    .data()
                    .iter()
                    .zip(self.nodes[target.0].value.data())
                    .map(|(&p, &t)| p - t)
                    .collect();
                self.accumulate(pred, |i| coeff[i / per_sample] * diff[i]);
                self.accumulate(target, |i| -(coeff[i / per_sample] * diff[i]));
            }
        }
        self.nodes[idx].op = op;
    }
}

/// Logistic function, evaluated without overflow for any finite input.
#[inline]
pub(crate) fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
