//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order for gradient propagation.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use crate::param::{ParamId, ParamStore};
use crate::scalar::{matmul_into, Mat, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op<T> {
    Leaf,
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    MatMul { a: NodeId, b: NodeId },
    MatMulT { a: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddConst(NodeId),
    MulConst { a: NodeId, c: Tensor<T> },
    Scale { a: NodeId, s: T },
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, spec: Conv2dSpec, cols: Vec<T> },
    MaxPool2d { x: NodeId, argmax: Vec<usize> },
    GlobalAvgPool(NodeId),
    Concat(Vec<NodeId>),
    SliceCols { a: NodeId, start: usize },
    LogSoftmax(NodeId),
    Softmax(NodeId),
    PickRows { a: NodeId, idx: Vec<usize> },
    GatherRows { a: NodeId, idx: Vec<usize> },
    SumCols(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    L2NormalizeRows { a: NodeId, eps: T, norms: Vec<T> },
    Clamp { a: NodeId, lo: T, hi: T },
    Minimum(NodeId, NodeId),
    Reshape(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<(u64, ParamId)>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }
}

/// A single forward evaluation recorded for differentiation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<(u64, usize), NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    match t.shape().len() {
        1 => (1, t.dim(0)),
        _ => (t.rows(), t.row_len()),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite value produced by forward pass");
        self.nodes.push(Node { value, op, requires_grad, param: None });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (inputs under gradient check).
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    /// Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let key = (store.uid(), id.index());
        if let Some(&n) = self.params.get(&key) {
            return n;
        }
        let p = store.get(id);
        let n = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.nodes[n.0].param = Some((store.uid(), id));
        self.params.insert(key, n);
        n
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, din) = rows_cols(xv);
        assert_eq!(wv.shape().len(), 2, "linear weight must be 2-D");
        let (dout, win) = (wv.dim(0), wv.dim(1));
        assert_eq!(din, win, "linear input width {din} vs weight {win}");
        let mut out = vec![T::zero(); n * dout];
        matmul_into(Mat::new(xv.data(), n, din), Mat::new(wv.data(), dout, din).t(), T::zero(), &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), dout);
            for row in out.chunks_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(Tensor::from_vec(&[n, dout], out), Op::Linear { x, w, b }, rg)
    }

    /// `a·b` for 2-D `a: [n,k]`, `b: [k,m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = (av.dim(0), av.dim(1));
        let (k2, m) = (bv.dim(0), bv.dim(1));
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![T::zero(); n * m];
        matmul_into(Mat::new(av.data(), n, k), Mat::new(bv.data(), k, m), T::zero(), &mut out);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_vec(&[n, m], out), Op::MatMul { a, b }, rg)
    }

    /// `a·bᵀ` for `a: [n,d]`, `b: [m,d]`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, d) = (av.dim(0), av.dim(1));
        let (m, d2) = (bv.dim(0), bv.dim(1));
        assert_eq!(d, d2, "matmul_t inner dimension");
        let mut out = vec![T::zero(); n * m];
        matmul_into(Mat::new(av.data(), n, d), Mat::new(bv.data(), m, d).t(), T::zero(), &mut out);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_vec(&[n, m], out), Op::MatMulT { a, b }, rg)
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.shape(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn add_const(&mut self, a: NodeId, c: &Tensor<T>) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.shape(), c.shape());
        let data = av.data().iter().zip(c.data()).map(|(&x, &y)| x + y).collect();
        let v = Tensor::from_vec(av.shape(), data);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddConst(a), rg)
    }

    pub fn mul_const(&mut self, a: NodeId, c: Tensor<T>) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.shape(), c.shape());
        let data = av.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let v = Tensor::from_vec(av.shape(), data);
        let rg = self.rg(&[a]);
        self.push(v, Op::MulConst { a, c }, rg)
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale { a, s }, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.tanh());
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.exp());
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.ln());
        let rg = self.rg(&[a]);
        self.push(v, Op::Log(a), rg)
    }

    /// 2-D convolution over `[N,C,H,W]` with weights `[O,C,k,k]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, spec: Conv2dSpec) -> NodeId {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.shape().len(), 4, "conv2d input must be [N,C,H,W], got {:?}", xv.shape());
        let [n, c, h, wd] = [xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3)];
        let [o, wc, k, k2] = [wv.dim(0), wv.dim(1), wv.dim(2), wv.dim(3)];
        assert_eq!(c, wc, "conv2d channels: input {c}, weight {wc}");
        assert_eq!(k, k2, "square kernels only");
        let (ho, wo) = conv_out(h, wd, k, spec);
        let cols = im2col(xv.data(), [n, c, h, wd], k, spec, ho, wo);
        let ckk = c * k * k;
        let pix = ho * wo;
        let mut tmp = vec![T::zero(); o * n * pix];
        matmul_into(Mat::new(wv.data(), o, ckk), Mat::new(&cols, ckk, n * pix), T::zero(), &mut tmp);
        let mut out = vec![T::zero(); n * o * pix];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for oc in 0..o {
            let bb = bias.as_ref().map_or(T::zero(), |bv| bv[oc]);
            for img in 0..n {
                let src = &tmp[oc * n * pix + img * pix..][..pix];
                let dst = &mut out[(img * o + oc) * pix..][..pix];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bb;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        let cols = if rg { cols } else { Vec::new() };
        self.push(Tensor::from_vec(&[n, o, ho, wo], out), Op::Conv2d { x, w, b, spec, cols }, rg)
    }

    /// Max pooling with windows clipped at the border; an input smaller
    /// than the kernel pools to a single cell.
    pub fn max_pool2d(&mut self, x: NodeId, k: usize, s: usize) -> NodeId {
        let xv = self.value(x);
        let [n, c, h, w] = [xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3)];
        let (ho, wo) = (pool_out(h, k, s), pool_out(w, k, s));
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let data = xv.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                let (y0, y1) = (oy * s, (oy * s + k).min(h));
                for ox in 0..wo {
                    let (x0, x1) = (ox * s, (ox * s + k).min(w));
                    let mut best = base + y0 * w + x0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            let idx = base + yy * w + xx;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(&[n, c, ho, wo], out), Op::MaxPool2d { x, argmax }, rg)
    }

    /// `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let [n, c, h, w] = [xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3)];
        let inv = T::one() / T::lit((h * w) as f64);
        let out = xv.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(&[n, c], out), Op::GlobalAvgPool(x), rg)
    }

    /// Concatenates 2-D tensors along columns.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let n = self.value(parts[0]).dim(0);
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let v = self.value(p);
                assert_eq!(v.dim(0), n, "concat row mismatch");
                v.row_len()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor::from_vec(&[n, total], out), Op::Concat(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        let (n, c) = (av.dim(0), av.dim(1));
        assert!(start + len <= c, "slice out of range");
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::from_vec(&[n, len], out), Op::SliceCols { a, start }, rg)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (_, c) = rows_cols(av);
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_vec(&shape, out), Op::LogSoftmax(a), rg)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (_, c) = rows_cols(av);
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_vec(&shape, out), Op::Softmax(a), rg)
    }

    /// Picks `a[r, idx[r]]` for every row, giving `[n]`.
    pub fn pick_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let av = self.value(a);
        let (n, c) = rows_cols(av);
        assert_eq!(idx.len(), n, "one index per row");
        let out = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| {
                assert!(i < c, "pick index {i} out of range {c}");
                av.data()[r * c + i]
            })
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_vec(&[n], out), Op::PickRows { a, idx: idx.to_vec() }, rg)
    }

    /// Row gather `out[i] = a[idx[i]]`.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let av = self.value(a);
        let mut shape = av.shape().to_vec();
        let w = av.row_len();
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(av.row(i));
        }
        shape[0] = idx.len();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_vec(&shape, out), Op::GatherRows { a, idx: idx.to_vec() }, rg)
    }

    /// Row sums of a 2-D tensor, giving `[n]`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (n, c) = rows_cols(av);
        let out = av.data().chunks(c).map(|r| r.iter().copied().sum()).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_vec(&[n], out), Op::SumCols(a), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let v = Tensor::scalar(av.sum() / T::lit(av.numel() as f64));
        let rg = self.rg(&[a]);
        self.push(v, Op::MeanAll(a), rg)
    }

    /// `x / (‖x‖ + eps)` per row.
    pub fn l2_normalize_rows(&mut self, a: NodeId, eps: T) -> NodeId {
        let av = self.value(a);
        let (_, c) = rows_cols(av);
        let mut out = av.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / c.max(1));
        for row in out.chunks_mut(c) {
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            norms.push(norm);
            let d = norm + eps;
            row.iter_mut().for_each(|x| *x /= d);
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_vec(&shape, out), Op::L2NormalizeRows { a, eps, norms }, rg)
    }

    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> NodeId {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        let rg = self.rg(&[a]);
        self.push(v, Op::Clamp { a, lo, hi }, rg)
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x.min(y));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Minimum(a, b), rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(a).clone().reshape(shape).expect("reshape");
        let rg = self.rg(&[a]);
        self.push(v, Op::Reshape(a), rg)
    }

    /// Hash of every piecewise branch taken (ReLU masks, pooling winners,
    /// clamp/min selections). Two evaluations with equal signatures lie on the
    /// same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(a) => {
                    i.hash(&mut h);
                    for &x in self.value(*a).data() {
                        (x > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2d { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::Clamp { a, lo, hi } => {
                    i.hash(&mut h);
                    for &x in self.value(*a).data() {
                        (x < *lo, x > *hi).hash(&mut h);
                    }
                }
                Op::Minimum(a, b) => {
                    i.hash(&mut h);
                    for (&x, &y) in self.value(*a).data().iter().zip(self.value(*b).data()) {
                        (x <= y).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: NodeId) -> Grads<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, g, &mut grads);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, din) = rows_cols(xv);
                let dout = wv.dim(0);
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    matmul_into(Mat::new(g.data(), n, dout), Mat::new(wv.data(), dout, din), T::zero(), &mut dx);
                    self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    matmul_into(Mat::new(g.data(), n, dout).t(), Mat::new(xv.data(), n, din), T::zero(), &mut dw);
                    self.acc(grads, *w, Tensor::from_vec(wv.shape(), dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); dout];
                        for row in g.data().chunks(dout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.acc(grads, *b, Tensor::from_vec(&[dout], db));
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.dim(0), av.dim(1), bv.dim(1));
                if self.wants(*a) {
                    let mut da = vec![T::zero(); n * k];
                    matmul_into(Mat::new(g.data(), n, m), Mat::new(bv.data(), k, m).t(), T::zero(), &mut da);
                    self.acc(grads, *a, Tensor::from_vec(&[n, k], da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * m];
                    matmul_into(Mat::new(av.data(), n, k).t(), Mat::new(g.data(), n, m), T::zero(), &mut db);
                    self.acc(grads, *b, Tensor::from_vec(&[k, m], db));
                }
            }
            Op::MatMulT { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, d, m) = (av.dim(0), av.dim(1), bv.dim(0));
                if self.wants(*a) {
                    let mut da = vec![T::zero(); n * d];
                    matmul_into(Mat::new(g.data(), n, m), Mat::new(bv.data(), m, d), T::zero(), &mut da);
                    self.acc(grads, *a, Tensor::from_vec(&[n, d], da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); m * d];
                    matmul_into(Mat::new(g.data(), n, m).t(), Mat::new(av.data(), n, d), T::zero(), &mut db);
                    self.acc(grads, *b, Tensor::from_vec(&[m, d], db));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *b, g.clone());
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *b, g.map(|x| -x));
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&gg, &x)| gg * x).collect();
                    self.acc(grads, *a, Tensor::from_vec(av.shape(), d));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&gg, &x)| gg * x).collect();
                    self.acc(grads, *b, Tensor::from_vec(bv.shape(), d));
                }
            }
            Op::AddConst(a) => self.acc(grads, *a, g),
            Op::MulConst { a, c } => {
                let d = g.data().iter().zip(c.data()).map(|(&gg, &x)| gg * x).collect();
                self.acc(grads, *a, Tensor::from_vec(c.shape(), d));
            }
            Op::Scale { a, s } => {
                let s = *s;
                self.acc(grads, *a, g.map(|x| x * s));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gg, &x)| if x > T::zero() { gg } else { T::zero() })
                    .collect();
                self.acc(grads, *a, Tensor::from_vec(av.shape(), d));
            }
            Op::Tanh(a) => {
                let d = g.data().iter().zip(y.data()).map(|(&gg, &t)| gg * (T::one() - t * t)).collect();
                self.acc(grads, *a, Tensor::from_vec(y.shape(), d));
            }
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(y.data()).map(|(&gg, &s)| gg * s * (T::one() - s)).collect();
                self.acc(grads, *a, Tensor::from_vec(y.shape(), d));
            }
            Op::Exp(a) => {
                let d = g.data().iter().zip(y.data()).map(|(&gg, &e)| gg * e).collect();
                self.acc(grads, *a, Tensor::from_vec(y.shape(), d));
            }
            Op::Log(a) => {
                let av = self.value(*a);
                let d = g.data().iter().zip(av.data()).map(|(&gg, &x)| gg / x).collect();
                self.acc(grads, *a, Tensor::from_vec(y.shape(), d));
            }
            Op::Conv2d { x, w, b, spec, cols } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let [n, c, h, wd] = [xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3)];
                let [o, _, k, _] = [wv.dim(0), wv.dim(1), wv.dim(2), wv.dim(3)];
                let (ho, wo) = (y.dim(2), y.dim(3));
                let pix = ho * wo;
                let ckk = c * k * k;
                // [N,O,pix] -> [O, N*pix]
                let mut gy = vec![T::zero(); o * n * pix];
                for img in 0..n {
                    for oc in 0..o {
                        let src = &g.data()[(img * o + oc) * pix..][..pix];
                        gy[oc * n * pix + img * pix..][..pix].copy_from_slice(src);
                    }
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); o * ckk];
                    matmul_into(Mat::new(&gy, o, n * pix), Mat::new(cols, ckk, n * pix).t(), T::zero(), &mut dw);
                    self.acc(grads, *w, Tensor::from_vec(wv.shape(), dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = gy.chunks(n * pix).map(|r| r.iter().copied().sum()).collect();
                        self.acc(grads, *b, Tensor::from_vec(&[o], db));
                    }
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); ckk * n * pix];
                    matmul_into(Mat::new(wv.data(), o, ckk).t(), Mat::new(&gy, o, n * pix), T::zero(), &mut dcols);
                    let dx = col2im(&dcols, [n, c, h, wd], k, *spec, ho, wo);
                    self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let xv = self.value(*x);
                let mut dx = vec![T::zero(); xv.numel()];
                for (&gg, &idx) in g.data().iter().zip(argmax) {
                    dx[idx] += gg;
                }
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let hw = xv.dim(2) * xv.dim(3);
                let inv = T::one() / T::lit(hw as f64);
                let mut dx = Vec::with_capacity(xv.numel());
                for &gg in g.data() {
                    dx.extend(std::iter::repeat_n(gg * inv, hw));
                }
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::Concat(parts) => {
                let n = y.dim(0);
                let total = y.dim(1);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).row_len();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g.data()[r * total + offset..][..w]);
                        }
                        self.acc(grads, p, Tensor::from_vec(self.value(p).shape(), d));
                    }
                    offset += w;
                }
            }
            Op::SliceCols { a, start } => {
                let av = self.value(*a);
                let (n, c) = (av.dim(0), av.dim(1));
                let len = y.dim(1);
                let mut d = vec![T::zero(); n * c];
                for r in 0..n {
                    d[r * c + start..][..len].copy_from_slice(&g.data()[r * len..][..len]);
                }
                self.acc(grads, *a, Tensor::from_vec(av.shape(), d));
            }
            Op::LogSoftmax(a) => {
                let (_, c) = rows_cols(y);
                let mut d = g.data().to_vec();
                for (drow, yrow) in d.chunks_mut(c).zip(y.data().chunks(c)) {
                    let s: T = drow.iter().copied().sum();
                    for (dd, &ly) in drow.iter_mut().zip(yrow) {
                        *dd -= ly.exp() * s;
                    }
                }
                self.acc(grads, *a, Tensor::from_vec(y.shape(), d));
            }
            Op::Softmax(a) => {
                let (_, c) = rows_cols(y);
                let mut d = g.data().to_vec();
                for (drow, yrow) in d.chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&gg, &p)| gg * p).sum();
                    for (dd, &p) in drow.iter_mut().zip(yrow) {
                        *dd = p * (*dd - dot);
                    }
                }
                self.acc(grads, *a, Tensor::from_vec(y.shape(), d));
            }
            Op::PickRows { a, idx } => {
                let av = self.value(*a);
                let (_, c) = rows_cols(av);
                let mut d = vec![T::zero(); av.numel()];
                for (r, (&i, &gg)) in idx.iter().zip(g.data()).enumerate() {
                    d[r * c + i] += gg;
                }
                self.acc(grads, *a, Tensor::from_vec(av.shape(), d));
            }
            Op::GatherRows { a, idx } => {
                let av = self.value(*a);
                let w = av.row_len();
                let mut d = vec![T::zero(); av.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for (dd, &gg) in d[i * w..][..w].iter_mut().zip(&g.data()[r * w..][..w]) {
                        *dd += gg;
                    }
                }
                self.acc(grads, *a, Tensor::from_vec(av.shape(), d));
            }
            Op::SumCols(a) => {
                let av = self.value(*a);
                let (_, c) = rows_cols(av);
                let mut d = Vec::with_capacity(av.numel());
                for &gg in g.data() {
                    d.extend(std::iter::repeat_n(gg, c));
                }
                self.acc(grads, *a, Tensor::from_vec(av.shape(), d));
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, Tensor::full(av.shape(), g.item()));
            }
            Op::MeanAll(a) => {
                let av = self.value(*a);
                let v = g.item() / T::lit(av.numel() as f64);
                self.acc(grads, *a, Tensor::full(av.shape(), v));
            }
            Op::L2NormalizeRows { a, eps, norms } => {
                let av = self.value(*a);
                let (_, c) = rows_cols(av);
                let mut d = g.data().to_vec();
                for ((drow, xrow), &norm) in d.chunks_mut(c).zip(av.data().chunks(c)).zip(norms) {
                    let den = norm + *eps;
                    let dot: T = drow.iter().zip(xrow).map(|(&gg, &x)| gg * x).sum();
                    let coef = if norm > T::zero() { dot / (norm * den * den) } else { T::zero() };
                    for (dd, &x) in drow.iter_mut().zip(xrow) {
                        *dd = *dd / den - x * coef;
                    }
                }
                self.acc(grads, *a, Tensor::from_vec(av.shape(), d));
            }
            Op::Clamp { a, lo, hi } => {
                let av = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gg, &x)| if x >= *lo && x <= *hi { gg } else { T::zero() })
                    .collect();
                self.acc(grads, *a, Tensor::from_vec(av.shape(), d));
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Vec::with_capacity(av.numel());
                let mut db = Vec::with_capacity(av.numel());
                for ((&gg, &x), &yv) in g.data().iter().zip(av.data()).zip(bv.data()) {
                    if x <= yv {
                        da.push(gg);
                        db.push(T::zero());
                    } else {
                        da.push(T::zero());
                        db.push(gg);
                    }
                }
                self.acc(grads, *a, Tensor::from_vec(av.shape(), da));
                self.acc(grads, *b, Tensor::from_vec(bv.shape(), db));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, g.reshape(&shape).expect("reshape grad"));
            }
        }
    }

    /// Node bound to a parameter of `store`, if the graph used it.
    pub fn param_node(&self, store: &ParamStore<T>, id: ParamId) -> Option<NodeId> {
        self.params.get(&(store.uid(), id.index())).copied()
    }

    /// Adds gradients of every parameter leaf that belongs to `store`.
    pub fn accumulate_into(&self, grads: &Grads<T>, store: &mut ParamStore<T>) {
        for node_id in self.params.values() {
            let node = &self.nodes[node_id.0];
            let Some((uid, pid)) = node.param else { continue };
            if uid != store.uid() {
                continue;
            }
            if let Some(g) = grads.get(*node_id) {
                store.get_mut(pid).grad.add_assign(g);
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

pub fn conv_out(h: usize, w: usize, k: usize, spec: Conv2dSpec) -> (usize, usize) {
    assert!(h + 2 * spec.pad >= k && w + 2 * spec.pad >= k, "input {h}x{w} smaller than kernel {k}");
    ((h + 2 * spec.pad - k) / spec.stride + 1, (w + 2 * spec.pad - k) / spec.stride + 1)
}

pub fn pool_out(h: usize, k: usize, s: usize) -> usize {
    if h <= k {
        1
    } else {
        (h - k).div_ceil(s) + 1
    }
}

fn im2col<T: Scalar>(x: &[T], [n, c, h, w]: [usize; 4], k: usize, spec: Conv2dSpec, ho: usize, wo: usize) -> Vec<T> {
    let pix = ho * wo;
    let npix = n * pix;
    let mut cols = vec![T::zero(); c * k * k * npix];
    let (s, p) = (spec.stride as isize, spec.pad as isize);
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst_row = &mut cols[row * npix..][..npix];
                for img in 0..n {
                    let plane = &x[(img * c + ch) * h * w..][..h * w];
                    let dst = &mut dst_row[img * pix..][..pix];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let drow = &mut dst[oy * wo..][..wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], [n, c, h, w]: [usize; 4], k: usize, spec: Conv2dSpec, ho: usize, wo: usize) -> Vec<T> {
    let pix = ho * wo;
    let npix = n * pix;
    let mut x = vec![T::zero(); n * c * h * w];
    let (s, p) = (spec.stride as isize, spec.pad as isize);
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src_row = &cols[row * npix..][..npix];
                for img in 0..n {
                    let plane = &mut x[(img * c + ch) * h * w..][..h * w];
                    let src = &src_row[img * pix..][..pix];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * w..][..w];
                        for ox in 0..wo {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
