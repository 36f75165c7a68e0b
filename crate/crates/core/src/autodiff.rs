//! Define-by-run automatic differentiation with differentiable gradients.
//!
//! Values are computed eagerly as nodes are added. `backward` does not return
//! raw tensors; it builds the gradient out of ordinary graph ops and returns
//! node ids. Because every vector-Jacobian rule is itself expressed with
//! differentiable ops, a scalar formed from gradient nodes can be
//! differentiated again, which is what the bi-level condensation objective
//! needs (the pixel update differentiates a distance between two gradients).
//!
//! Branch choices are frozen at construction time: the relu mask, the row-max
//! shift inside `log_softmax_rows`, and the zero-norm cosine guard all enter
//! the graph as constants, so repeated differentiation stays well defined.

use crate::tensor::{avg_pool2, avg_unpool2, col2im, im2col, SpatialDims, Tensor};
use std::rc::Rc;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGrad,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    Exp,
    Log,
    Sqrt,
    Tanh,
    Relu,
    MatMul,
    Transpose,
    SumAll,
    BroadcastScalar,
    RowSum,
    BroadcastCol,
    ColSum,
    BroadcastRow,
    Reshape,
    Im2Col { dims: SpatialDims, k: usize, pad: usize },
    Col2Im { dims: SpatialDims, k: usize, pad: usize },
    AvgPool { dims: SpatialDims },
    AvgUnpool { pooled: SpatialDims },
    ConcatCols,
    SliceCols { lo: usize },
    PlaceCols { offset: usize },
    ConcatRows,
    GatherRows { idx: Rc<Vec<usize>> },
    ScatterAddRows { idx: Rc<Vec<usize>> },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Eager computation graph. One graph per optimization step is the intended
/// usage; nodes are append-only and never freed.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a tensor. Gradients flow into a leaf only when it is named as a
    /// backward target, so the same entry point serves parameters and data.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], t)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Identity in the forward pass; the backward pass treats it as constant.
    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.push(Op::StopGrad, vec![a], v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(Op::Add, vec![a, b], v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        self.push(Op::Sub, vec![a, b], v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(Op::Mul, vec![a, b], v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        self.push(Op::Div, vec![a, b], v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| -x);
        self.push(Op::Neg, vec![a], v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(c), vec![a], v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar, vec![a], v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp, vec![a], v)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log, vec![a], v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt, vec![a], v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh, vec![a], v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu, vec![a], v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul, vec![a, b], v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose, vec![a], v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll, vec![a], v)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Fill `shape` with a scalar node's value.
    pub fn broadcast_scalar(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let v = Tensor::full(shape, self.value(a).item());
        self.push(Op::BroadcastScalar, vec![a], v)
    }

    /// `[m, n] -> [m, 1]` row sums.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; m];
        for i in 0..m {
            out[i] = t.row(i).iter().sum();
        }
        let _ = n;
        let v = Tensor::new(vec![m, 1], out);
        self.push(Op::RowSum, vec![a], v)
    }

    /// `[m, 1] -> [m, n]` by repeating the column.
    pub fn broadcast_col(&mut self, a: NodeId, n: usize) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.cols(), 1, "broadcast_col expects a column");
        let m = t.rows();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let x = t.data()[i];
            out[i * n..(i + 1) * n].fill(x);
        }
        let v = Tensor::new(vec![m, n], out);
        self.push(Op::BroadcastCol, vec![a], v)
    }

    /// `[m, n] -> [1, n]` column sums.
    pub fn col_sum(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += t.data()[i * n + j];
            }
        }
        let v = Tensor::new(vec![1, n], out);
        self.push(Op::ColSum, vec![a], v)
    }

    /// `[1, n] -> [m, n]` by repeating the row.
    pub fn broadcast_row(&mut self, a: NodeId, m: usize) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.rows(), 1, "broadcast_row expects a row");
        let n = t.cols();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![m, n], out);
        self.push(Op::BroadcastRow, vec![a], v)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self.value(a).clone().reshaped(shape);
        self.push(Op::Reshape, vec![a], v)
    }

    pub fn im2col(&mut self, a: NodeId, dims: SpatialDims, k: usize, pad: usize) -> NodeId {
        let v = im2col(self.value(a), dims, k, pad);
        self.push(Op::Im2Col { dims, k, pad }, vec![a], v)
    }

    pub fn col2im(&mut self, a: NodeId, dims: SpatialDims, c: usize, k: usize, pad: usize) -> NodeId {
        let v = col2im(self.value(a), dims, c, k, pad);
        let _ = c;
        self.push(Op::Col2Im { dims, k, pad }, vec![a], v)
    }

    /// 2x2 average pooling; returns the node and the pooled spatial dims.
    pub fn avg_pool(&mut self, a: NodeId, dims: SpatialDims) -> (NodeId, SpatialDims) {
        let (v, pooled) = avg_pool2(self.value(a), dims);
        (self.push(Op::AvgPool { dims }, vec![a], v), pooled)
    }

    pub fn avg_unpool(&mut self, a: NodeId, pooled: SpatialDims) -> NodeId {
        let v = avg_unpool2(self.value(a), pooled);
        self.push(Op::AvgUnpool { pooled }, vec![a], v)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rows(), tb.rows(), "concat_cols row mismatch");
        let (m, wa, wb) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Vec::with_capacity(m * (wa + wb));
        for i in 0..m {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        let v = Tensor::new(vec![m, wa + wb], out);
        self.push(Op::ConcatCols, vec![a, b], v)
    }

    /// Columns `lo..hi`.
    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> NodeId {
        let t = self.value(a);
        assert!(lo < hi && hi <= t.cols(), "slice_cols out of range");
        let m = t.rows();
        let mut out = Vec::with_capacity(m * (hi - lo));
        for i in 0..m {
            out.extend_from_slice(&t.row(i)[lo..hi]);
        }
        let v = Tensor::new(vec![m, hi - lo], out);
        self.push(Op::SliceCols { lo }, vec![a], v)
    }

    /// Embed into a zero matrix of `width` columns starting at `offset`.
    pub fn place_cols(&mut self, a: NodeId, width: usize, offset: usize) -> NodeId {
        let t = self.value(a);
        let (m, w) = (t.rows(), t.cols());
        assert!(offset + w <= width, "place_cols out of range");
        let mut out = vec![0.0; m * width];
        for i in 0..m {
            out[i * width + offset..i * width + offset + w].copy_from_slice(t.row(i));
        }
        let v = Tensor::new(vec![m, width], out);
        self.push(Op::PlaceCols { offset }, vec![a], v)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.cols(), "concat_rows column mismatch");
        let n = ta.cols();
        let mut out = Vec::with_capacity((ta.rows() + tb.rows()) * n);
        out.extend_from_slice(ta.data());
        out.extend_from_slice(tb.data());
        let v = Tensor::new(vec![ta.rows() + tb.rows(), n], out);
        self.push(Op::ConcatRows, vec![a, b], v)
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Rc<Vec<usize>>) -> NodeId {
        let t = self.value(a);
        let n = t.cols();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            out.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(vec![idx.len(), n], out);
        self.push(Op::GatherRows { idx }, vec![a], v)
    }

    /// Zero matrix of `rows` rows with input row `i` added at `idx[i]`.
    pub fn scatter_add_rows(&mut self, a: NodeId, idx: Rc<Vec<usize>>, rows: usize) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.rows(), idx.len(), "scatter_add_rows index mismatch");
        let n = t.cols();
        let mut out = vec![0.0; rows * n];
        for (i, &dst) in idx.iter().enumerate() {
            for j in 0..n {
                out[dst * n + j] += t.row(i)[j];
            }
        }
        let v = Tensor::new(vec![rows, n], out);
        self.push(Op::ScatterAddRows { idx }, vec![a], v)
    }

    // Composites used across the training code.

    /// Mean squared error over all entries.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Row-wise log-softmax. The per-row max is subtracted as a constant,
    /// which leaves every derivative order untouched because the shift cancels
    /// analytically.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let maxes: Vec<f64> = (0..m)
            .map(|i| t.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let max_leaf = self.leaf(Tensor::new(vec![m, 1], maxes));
        let max_b = self.broadcast_col(max_leaf, n);
        let shifted = self.sub(a, max_b);
        let e = self.exp(shifted);
        let rs = self.row_sum(e);
        let lse = self.log(rs);
        let lse_b = self.broadcast_col(lse, n);
        self.sub(shifted, lse_b)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let ls = self.log_softmax_rows(a);
        self.exp(ls)
    }

    /// Mean cross-entropy of logits against integer class labels.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let t = self.value(logits);
        let (m, n) = (t.rows(), t.cols());
        assert_eq!(m, labels.len(), "label count mismatch");
        let mut onehot = vec![0.0; m * n];
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < n, "label {} out of range for {} classes", y, n);
            onehot[i * n + y] = 1.0;
        }
        let oh = self.leaf(Tensor::new(vec![m, n], onehot));
        let ls = self.log_softmax_rows(logits);
        let picked = self.mul(oh, ls);
        let s = self.sum_all(picked);
        self.scale(s, -1.0 / m as f64)
    }

    /// Rows scaled to unit norm, stabilized as `x / sqrt(|x|^2 + eps)` so a
    /// zero row maps to zero with finite gradients.
    pub fn normalize_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let n = self.value(a).cols();
        let sq = self.mul(a, a);
        let ns = self.row_sum(sq);
        let ns_eps = self.add_scalar(ns, eps);
        let norm = self.sqrt(ns_eps);
        let norm_b = self.broadcast_col(norm, n);
        self.div(a, norm_b)
    }

    /// Cosine similarity of two same-length tensors viewed as flat vectors.
    /// Degenerate norms are resolved at construction time: both zero gives the
    /// constant 1, exactly one zero gives the constant 0.
    pub fn cosine_flat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (na, nb) = (self.value(a).norm(), self.value(b).norm());
        if na == 0.0 && nb == 0.0 {
            return self.scalar_leaf(1.0);
        }
        if na == 0.0 || nb == 0.0 {
            return self.scalar_leaf(0.0);
        }
        assert_eq!(
            self.value(a).len(),
            self.value(b).len(),
            "cosine_flat length mismatch"
        );
        let sa = self.flatten_row(a);
        let sb = self.flatten_row(b);
        let prod = self.mul(sa, sb);
        let dot = self.sum_all(prod);
        let aa = self.mul(sa, sa);
        let saa = self.sum_all(aa);
        let n1 = self.sqrt(saa);
        let bb = self.mul(sb, sb);
        let sbb = self.sum_all(bb);
        let n2 = self.sqrt(sbb);
        let denom = self.mul(n1, n2);
        self.div(dot, denom)
    }

    fn flatten_row(&mut self, a: NodeId) -> NodeId {
        let len = self.value(a).len();
        self.reshape(a, vec![1, len])
    }

    /// Gradient nodes of a scalar `loss` with respect to `targets`.
    ///
    /// Returns one entry per target; `None` means the loss does not depend on
    /// that node (a zero gradient). The returned nodes live in this graph and
    /// can feed further ops, including another `backward` call.
    pub fn backward(&mut self, loss: NodeId, targets: &[NodeId]) -> Vec<Option<NodeId>> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let n = loss.0 + 1;

        // Nodes the loss depends on.
        let mut anc = vec![false; n];
        anc[loss.0] = true;
        for id in (0..n).rev() {
            if anc[id] {
                for inp in &self.nodes[id].inputs {
                    anc[inp.0] = true;
                }
            }
        }
        // Nodes some target feeds into (ids ascend along edges, one pass).
        let mut rel = vec![false; n];
        for t in targets {
            if t.0 < n {
                rel[t.0] = true;
            }
        }
        for id in 0..n {
            if !rel[id] && self.nodes[id].inputs.iter().any(|i| rel[i.0]) {
                rel[id] = true;
            }
        }

        let mut grad: Vec<Option<NodeId>> = vec![None; n];
        grad[loss.0] = Some(self.scalar_leaf(1.0));
        for id in (0..n).rev() {
            let Some(g) = grad[id] else { continue };
            if !(anc[id] && rel[id]) {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let inputs = self.nodes[id].inputs.clone();
            for (slot, contrib) in self.vjp(&op, &inputs, NodeId(id), g, &rel) {
                grad[slot.0] = Some(match grad[slot.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib),
                });
            }
        }
        targets
            .iter()
            .map(|t| grad.get(t.0).copied().flatten())
            .collect()
    }

    /// Contributions of `g` (gradient at the output of `op`) to each input
    /// that can still reach a target. Every rule builds graph ops only.
    fn vjp(
        &mut self,
        op: &Op,
        inputs: &[NodeId],
        out: NodeId,
        g: NodeId,
        rel: &[bool],
    ) -> Vec<(NodeId, NodeId)> {
        let want = |id: NodeId| rel[id.0];
        let mut contribs = Vec::new();
        match op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add => {
                if want(inputs[0]) {
                    contribs.push((inputs[0], g));
                }
                if want(inputs[1]) {
                    contribs.push((inputs[1], g));
                }
            }
            Op::Sub => {
                if want(inputs[0]) {
                    contribs.push((inputs[0], g));
                }
                if want(inputs[1]) {
                    let ng = self.neg(g);
                    contribs.push((inputs[1], ng));
                }
            }
            Op::Mul => {
                if want(inputs[0]) {
                    let c = self.mul(g, inputs[1]);
                    contribs.push((inputs[0], c));
                }
                if want(inputs[1]) {
                    let c = self.mul(g, inputs[0]);
                    contribs.push((inputs[1], c));
                }
            }
            Op::Div => {
                if want(inputs[0]) {
                    let c = self.div(g, inputs[1]);
                    contribs.push((inputs[0], c));
                }
                if want(inputs[1]) {
                    let gy = self.mul(g, out);
                    let gyb = self.div(gy, inputs[1]);
                    let c = self.neg(gyb);
                    contribs.push((inputs[1], c));
                }
            }
            Op::Neg => {
                if want(inputs[0]) {
                    let c = self.neg(g);
                    contribs.push((inputs[0], c));
                }
            }
            Op::Scale(c0) => {
                if want(inputs[0]) {
                    let c = self.scale(g, *c0);
                    contribs.push((inputs[0], c));
                }
            }
            Op::AddScalar => {
                if want(inputs[0]) {
                    contribs.push((inputs[0], g));
                }
            }
            Op::Exp => {
                if want(inputs[0]) {
                    let c = self.mul(g, out);
                    contribs.push((inputs[0], c));
                }
            }
            Op::Log => {
                if want(inputs[0]) {
                    let c = self.div(g, inputs[0]);
                    contribs.push((inputs[0], c));
                }
            }
            Op::Sqrt => {
                if want(inputs[0]) {
                    let go = self.div(g, out);
                    let c = self.scale(go, 0.5);
                    contribs.push((inputs[0], c));
                }
            }
            Op::Tanh => {
                if want(inputs[0]) {
                    let yy = self.mul(out, out);
                    let nyy = self.neg(yy);
                    let sech2 = self.add_scalar(nyy, 1.0);
                    let c = self.mul(g, sech2);
                    contribs.push((inputs[0], c));
                }
            }
            Op::Relu => {
                if want(inputs[0]) {
                    // The active-set mask is frozen as a constant, so higher
                    // derivatives treat relu as piecewise linear.
                    let mask = self.nodes[inputs[0].0].value.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    let m = self.leaf(mask);
                    let c = self.mul(g, m);
                    contribs.push((inputs[0], c));
                }
            }
            Op::MatMul => {
                if want(inputs[0]) {
                    let bt = self.transpose(inputs[1]);
                    let c = self.matmul(g, bt);
                    contribs.push((inputs[0], c));
                }
                if want(inputs[1]) {
                    let at = self.transpose(inputs[0]);
                    let c = self.matmul(at, g);
                    contribs.push((inputs[1], c));
                }
            }
            Op::Transpose => {
                if want(inputs[0]) {
                    let c = self.transpose(g);
                    contribs.push((inputs[0], c));
                }
            }
            Op::SumAll => {
                if want(inputs[0]) {
                    let shape = self.nodes[inputs[0].0].value.shape().to_vec();
                    let c = self.broadcast_scalar(g, shape);
                    contribs.push((inputs[0], c));
                }
            }
            Op::BroadcastScalar => {
                if want(inputs[0]) {
                    let c = self.sum_all(g);
                    contribs.push((inputs[0], c));
                }
            }
            Op::RowSum => {
                if want(inputs[0]) {
                    let n = self.nodes[inputs[0].0].value.cols();
                    let c = self.broadcast_col(g, n);
                    contribs.push((inputs[0], c));
                }
            }
            Op::BroadcastCol => {
                if want(inputs[0]) {
                    let c = self.row_sum(g);
                    contribs.push((inputs[0], c));
                }
            }
            Op::ColSum => {
                if want(inputs[0]) {
                    let m = self.nodes[inputs[0].0].value.rows();
                    let c = self.broadcast_row(g, m);
                    contribs.push((inputs[0], c));
                }
            }
            Op::BroadcastRow => {
                if want(inputs[0]) {
                    let c = self.col_sum(g);
                    contribs.push((inputs[0], c));
                }
            }
            Op::Reshape => {
                if want(inputs[0]) {
                    let shape = self.nodes[inputs[0].0].value.shape().to_vec();
                    let c = self.reshape(g, shape);
                    contribs.push((inputs[0], c));
                }
            }
            Op::Im2Col { dims, k, pad } => {
                if want(inputs[0]) {
                    let c0 = self.nodes[inputs[0].0].value.cols();
                    let c = self.col2im(g, *dims, c0, *k, *pad);
                    contribs.push((inputs[0], c));
                }
            }
            Op::Col2Im { dims, k, pad } => {
                if want(inputs[0]) {
                    let c = self.im2col(g, *dims, *k, *pad);
                    contribs.push((inputs[0], c));
                }
            }
            Op::AvgPool { dims } => {
                if want(inputs[0]) {
                    let pooled = SpatialDims {
                        batch: dims.batch,
                        height: dims.height / 2,
                        width: dims.width / 2,
                    };
                    let c = self.avg_unpool(g, pooled);
                    contribs.push((inputs[0], c));
                }
            }
            Op::AvgUnpool { pooled } => {
                if want(inputs[0]) {
                    let dims = SpatialDims {
                        batch: pooled.batch,
                        height: pooled.height * 2,
                        width: pooled.width * 2,
                    };
                    let (c, _) = self.avg_pool(g, dims);
                    contribs.push((inputs[0], c));
                }
            }
            Op::ConcatCols => {
                let wa = self.nodes[inputs[0].0].value.cols();
                let wb = self.nodes[inputs[1].0].value.cols();
                if want(inputs[0]) {
                    let c = self.slice_cols(g, 0, wa);
                    contribs.push((inputs[0], c));
                }
                if want(inputs[1]) {
                    let c = self.slice_cols(g, wa, wa + wb);
                    contribs.push((inputs[1], c));
                }
            }
            Op::SliceCols { lo } => {
                if want(inputs[0]) {
                    let w = self.nodes[inputs[0].0].value.cols();
                    let c = self.place_cols(g, w, *lo);
                    contribs.push((inputs[0], c));
                }
            }
            Op::PlaceCols { offset } => {
                if want(inputs[0]) {
                    let w = self.nodes[inputs[0].0].value.cols();
                    let c = self.slice_cols(g, *offset, *offset + w);
                    contribs.push((inputs[0], c));
                }
            }
            Op::ConcatRows => {
                let ra = self.nodes[inputs[0].0].value.rows();
                let rb = self.nodes[inputs[1].0].value.rows();
                if want(inputs[0]) {
                    let idx = Rc::new((0..ra).collect::<Vec<_>>());
                    let c = self.gather_rows(g, idx);
                    contribs.push((inputs[0], c));
                }
                if want(inputs[1]) {
                    let idx = Rc::new((ra..ra + rb).collect::<Vec<_>>());
                    let c = self.gather_rows(g, idx);
                    contribs.push((inputs[1], c));
                }
            }
            Op::GatherRows { idx } => {
                if want(inputs[0]) {
                    let rows = self.nodes[inputs[0].0].value.rows();
                    let c = self.scatter_add_rows(g, idx.clone(), rows);
                    contribs.push((inputs[0], c));
                }
            }
            Op::ScatterAddRows { idx } => {
                if want(inputs[0]) {
                    let c = self.gather_rows(g, idx.clone());
                    contribs.push((inputs[0], c));
                }
            }
        }
        contribs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_tensor(shape: Vec<usize>, r: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    /// Loss of a two-layer tanh network against a fixed target.
    fn mlp_loss(g: &mut Graph, x: Tensor, w1: Tensor, w2: Tensor, target: &Tensor) -> (NodeId, [NodeId; 3]) {
        let xn = g.leaf(x);
        let w1n = g.leaf(w1);
        let w2n = g.leaf(w2);
        let h = g.matmul(xn, w1n);
        let a = g.tanh(h);
        let o = g.matmul(a, w2n);
        let tn = g.leaf(target.clone());
        let loss = g.mse(o, tn);
        (loss, [xn, w1n, w2n])
    }

    #[test]
    fn first_order_gradient_matches_finite_differences() {
        let mut r = crate::rng::rng(10, &[1]);
        let x = random_tensor(vec![3, 4], &mut r);
        let w1 = random_tensor(vec![4, 5], &mut r);
        let w2 = random_tensor(vec![5, 2], &mut r);
        let target = random_tensor(vec![3, 2], &mut r);

        let mut g = Graph::new();
        let (loss, [xn, w1n, w2n]) = mlp_loss(&mut g, x.clone(), w1.clone(), w2.clone(), &target);
        let grads = g.backward(loss, &[xn, w1n, w2n]);

        let eval = |x: &Tensor, w1: &Tensor, w2: &Tensor| -> f64 {
            let mut g = Graph::new();
            let (l, _) = mlp_loss(&mut g, x.clone(), w1.clone(), w2.clone(), &target);
            g.value(l).item()
        };
        let h = 1e-5;
        for (ti, t) in [&x, &w1, &w2].iter().enumerate() {
            let gt = g.value(grads[ti].unwrap()).clone();
            for i in 0..t.len() {
                let mut plus = (*t).clone();
                plus.data_mut()[i] += h;
                let mut minus = (*t).clone();
                minus.data_mut()[i] -= h;
                let args_p = [if ti == 0 { &plus } else { &x }, if ti == 1 { &plus } else { &w1 }, if ti == 2 { &plus } else { &w2 }];
                let args_m = [if ti == 0 { &minus } else { &x }, if ti == 1 { &minus } else { &w1 }, if ti == 2 { &minus } else { &w2 }];
                let fd = (eval(args_p[0], args_p[1], args_p[2]) - eval(args_m[0], args_m[1], args_m[2])) / (2.0 * h);
                assert_abs_diff_eq!(gt.data()[i], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn second_order_gradient_matches_finite_differences() {
        // phi(x) = |d loss / d x|^2 must differentiate through the first
        // backward pass.
        let mut r = crate::rng::rng(11, &[2]);
        let x = random_tensor(vec![2, 3], &mut r);
        let w = random_tensor(vec![3, 2], &mut r);
        let target = random_tensor(vec![2, 2], &mut r);

        let phi_and_grad = |x: &Tensor, want_grad: bool| -> (f64, Option<Tensor>) {
            let mut g = Graph::new();
            let xn = g.leaf(x.clone());
            let wn = g.leaf(w.clone());
            let h = g.matmul(xn, wn);
            let a = g.tanh(h);
            let tn = g.leaf(target.clone());
            let loss = g.mse(a, tn);
            let gx = g.backward(loss, &[xn])[0].unwrap();
            let sq = g.mul(gx, gx);
            let phi = g.sum_all(sq);
            let phi_v = g.value(phi).item();
            if want_grad {
                let gphi = g.backward(phi, &[xn])[0].unwrap();
                (phi_v, Some(g.value(gphi).clone()))
            } else {
                (phi_v, None)
            }
        };

        let (_, grad) = phi_and_grad(&x, true);
        let grad = grad.unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let fd = (phi_and_grad(&plus, false).0 - phi_and_grad(&minus, false).0) / (2.0 * h);
            assert_abs_diff_eq!(grad.data()[i], fd, epsilon = 1e-5);
        }
    }

    #[test]
    fn conv_pipeline_gradient_matches_finite_differences() {
        let mut r = crate::rng::rng(12, &[3]);
        let dims = SpatialDims { batch: 2, height: 4, width: 4 };
        let c_in = 2;
        let c_out = 3;
        let x = random_tensor(vec![dims.rows(), c_in], &mut r);
        let w = random_tensor(vec![c_in * 9, c_out], &mut r);
        let head = random_tensor(vec![c_out * 4, 2], &mut r);
        let labels = vec![0usize, 1];

        let run = |x: &Tensor, w: &Tensor| -> (f64, Option<(Tensor, Tensor)>) {
            let mut g = Graph::new();
            let xn = g.leaf(x.clone());
            let wn = g.leaf(w.clone());
            let hn = g.leaf(head.clone());
            let cols = g.im2col(xn, dims, 3, 1);
            let conv = g.matmul(cols, wn);
            let act = g.tanh(conv);
            let (pooled, pdims) = g.avg_pool(act, dims);
            // Flatten each image's pooled grid into one row for the head.
            let feat = g.reshape(pooled, vec![pdims.batch, pdims.height * pdims.width * c_out]);
            let logits = g.matmul(feat, hn);
            let loss = g.cross_entropy_mean(logits, &labels);
            let v = g.value(loss).item();
            let grads = g.backward(loss, &[xn, wn]);
            let gx = g.value(grads[0].unwrap()).clone();
            let gw = g.value(grads[1].unwrap()).clone();
            (v, Some((gx, gw)))
        };

        let (_, grads) = run(&x, &w);
        let (gx, gw) = grads.unwrap();
        let h = 1e-5;
        for i in (0..x.len()).step_by(7) {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let fd = (run(&plus, &w).0 - run(&minus, &w).0) / (2.0 * h);
            assert_abs_diff_eq!(gx.data()[i], fd, epsilon = 1e-6);
        }
        for i in (0..w.len()).step_by(5) {
            let mut plus = w.clone();
            plus.data_mut()[i] += h;
            let mut minus = w.clone();
            minus.data_mut()[i] -= h;
            let fd = (run(&x, &plus).0 - run(&x, &minus).0) / (2.0 * h);
            assert_abs_diff_eq!(gw.data()[i], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut r = crate::rng::rng(13, &[4]);
        let logits = random_tensor(vec![4, 3], &mut r);
        let labels = vec![2usize, 0, 1, 1];
        let mut g = Graph::new();
        let ln = g.leaf(logits.clone());
        let loss = g.cross_entropy_mean(ln, &labels);
        let grad = g.backward(loss, &[ln])[0].unwrap();
        let sm = g.softmax_rows(ln);
        let sm_v = g.value(sm).clone();
        let gv = g.value(grad);
        for i in 0..4 {
            for j in 0..3 {
                let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                let expect = (sm_v.row(i)[j] - onehot) / 4.0;
                assert_abs_diff_eq!(gv.row(i)[j], expect, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = crate::rng::rng(14, &[5]);
        let x = random_tensor(vec![5, 7], &mut r).map(|v| v * 50.0);
        let mut g = Graph::new();
        let xn = g.leaf(x);
        let sm = g.softmax_rows(xn);
        let v = g.value(sm);
        for i in 0..5 {
            assert_abs_diff_eq!(v.row(i).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn stop_grad_blocks_backward() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let s = g.stop_grad(x);
        let sq = g.mul(s, s);
        let loss = g.sum_all(sq);
        assert!(g.backward(loss, &[x])[0].is_none());
    }

    #[test]
    fn unrelated_target_gets_none() {
        let mut g = Graph::new();
        let x = g.scalar_leaf(2.0);
        let y = g.scalar_leaf(3.0);
        let loss = g.mul(x, x);
        let grads = g.backward(loss, &[x, y]);
        assert!(grads[0].is_some());
        assert!(grads[1].is_none());
    }

    #[test]
    fn relu_second_derivative_is_zero_with_linear_first() {
        // f(x) = sum relu(x)^2 has gradient 2*relu(x) and constant curvature
        // 2 on the active side under the frozen mask.
        let x = Tensor::new(vec![1, 4], vec![-1.0, 0.5, 2.0, -0.25]);
        let mut g = Graph::new();
        let xn = g.leaf(x);
        let r = g.relu(xn);
        let sq = g.mul(r, r);
        let loss = g.sum_all(sq);
        let gx = g.backward(loss, &[xn])[0].unwrap();
        assert_eq!(g.value(gx).data(), &[0.0, 1.0, 4.0, 0.0]);
        let total = g.sum_all(gx);
        let ggx = g.backward(total, &[xn])[0].unwrap();
        assert_eq!(g.value(ggx).data(), &[0.0, 2.0, 2.0, 0.0]);
    }

    #[test]
    fn cosine_flat_guards_zero_norms() {
        let mut g = Graph::new();
        let z1 = g.leaf(Tensor::zeros(vec![1, 3]));
        let z2 = g.leaf(Tensor::zeros(vec![1, 3]));
        let v = g.leaf(Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]));
        let both = g.cosine_flat(z1, z2);
        let one = g.cosine_flat(z1, v);
        let same = g.cosine_flat(v, v);
        assert_abs_diff_eq!(g.value(both).item(), 1.0);
        assert_abs_diff_eq!(g.value(one).item(), 0.0);
        assert_abs_diff_eq!(g.value(same).item(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cosine_flat_matches_hand_value() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]));
        let b = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0]));
        let c = g.cosine_flat(a, b);
        assert_abs_diff_eq!(g.value(c).item(), 1.0 / 2.0_f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn gather_scatter_roundtrip_gradient() {
        let mut r = crate::rng::rng(15, &[6]);
        let x = random_tensor(vec![4, 3], &mut r);
        let idx = Rc::new(vec![2usize, 0, 2]);
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let picked = g.gather_rows(xn, idx.clone());
        let sq = g.mul(picked, picked);
        let loss = g.sum_all(sq);
        let grad = g.backward(loss, &[xn])[0].unwrap();
        let gv = g.value(grad);
        // Row 2 is gathered twice, row 0 once, rows 1 and 3 never.
        for j in 0..3 {
            assert_abs_diff_eq!(gv.row(0)[j], 2.0 * x.row(0)[j], epsilon = 1e-12);
            assert_abs_diff_eq!(gv.row(1)[j], 0.0);
            assert_abs_diff_eq!(gv.row(2)[j], 4.0 * x.row(2)[j], epsilon = 1e-12);
            assert_abs_diff_eq!(gv.row(3)[j], 0.0);
        }
    }

    #[test]
    fn hessian_vector_product_matches_finite_differences() {
        let mut r = crate::rng::rng(16, &[7]);
        let x = random_tensor(vec![1, 4], &mut r);
        let v = random_tensor(vec![1, 4], &mut r);

        // f(x) = sum(tanh(x)^3); HVP = d/dx <grad f, v>.
        let grad_of = |x: &Tensor| -> Tensor {
            let mut g = Graph::new();
            let xn = g.leaf(x.clone());
            let t = g.tanh(xn);
            let t2 = g.mul(t, t);
            let t3 = g.mul(t2, t);
            let loss = g.sum_all(t3);
            let gx = g.backward(loss, &[xn])[0].unwrap();
            g.value(gx).clone()
        };

        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let vn = g.leaf(v.clone());
        let t = g.tanh(xn);
        let t2 = g.mul(t, t);
        let t3 = g.mul(t2, t);
        let loss = g.sum_all(t3);
        let gx = g.backward(loss, &[xn])[0].unwrap();
        let gv = g.mul(gx, vn);
        let dir = g.sum_all(gv);
        let hvp = g.backward(dir, &[xn])[0].unwrap();
        let hvp_v = g.value(hvp).clone();

        let h = 1e-5;
        let mut plus = x.clone();
        plus.axpy(h, &v);
        let mut minus = x.clone();
        minus.axpy(-h, &v);
        let gp = grad_of(&plus);
        let gm = grad_of(&minus);
        for i in 0..x.len() {
            let fd = (gp.data()[i] - gm.data()[i]) / (2.0 * h);
            assert_abs_diff_eq!(hvp_v.data()[i], fd, epsilon = 1e-6);
        }
    }
}
