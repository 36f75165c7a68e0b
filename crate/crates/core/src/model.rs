//! Small differentiable classifiers: the global model, the per-task
//! condensation network, and the feature extractor all share this backbone.
//!
//! A [`ParamVector`] is an ordered list of named tensors; two vectors of the
//! same architecture combine elementwise, which is what aggregation and
//! regularizers need. Forward passes are built inside an [`autodiff::Graph`]
//! so gradients with respect to parameters or input pixels come from the same
//! machinery.

use crate::autodiff::{Graph, NodeId};
use crate::dataset::{ImageBatch, ImageShape};
use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Architecture of a backbone. `Conv` stacks `blocks` of 3x3 conv -> act ->
/// 2x2 average pool; `Mlp` is a single hidden layer over flattened pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArchSpec {
    Conv {
        blocks: usize,
        width: usize,
        activation: Activation,
    },
    Mlp {
        hidden: usize,
        activation: Activation,
    },
}

impl ArchSpec {
    /// Feature dimension produced for `input`-shaped images.
    pub fn feature_dim(&self, input: ImageShape) -> Result<usize> {
        match *self {
            ArchSpec::Conv { blocks, width, .. } => {
                if blocks == 0 || width == 0 {
                    return Err(Error::invalid("arch", "conv needs blocks > 0, width > 0"));
                }
                let (mut h, mut w) = (input.height, input.width);
                for _ in 0..blocks {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::invalid(
                            "arch",
                            format!("spatial size {}x{} not divisible for pooling", h, w),
                        ));
                    }
                    h /= 2;
                    w /= 2;
                }
                Ok(width * h * w)
            }
            ArchSpec::Mlp { hidden, .. } => {
                if hidden == 0 {
                    return Err(Error::invalid("arch", "mlp needs hidden > 0"));
                }
                Ok(hidden)
            }
        }
    }

    fn activation(&self) -> Activation {
        match *self {
            ArchSpec::Conv { activation, .. } | ArchSpec::Mlp { activation, .. } => activation,
        }
    }
}

/// Ordered named tensors; the unit of aggregation, checkpointing, and
/// regularization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    entries: Vec<(String, Tensor)>,
}

impl ParamVector {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        ParamVector { entries }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn set(&mut self, name: &str, t: Tensor) {
        match self.get_mut(name) {
            Some(slot) => *slot = t,
            None => self.entries.push((name.to_string(), t)),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_dim(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn same_architecture(&self, other: &ParamVector) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
    }

    pub fn check_same_architecture(&self, other: &ParamVector) -> Result<()> {
        if !self.same_architecture(other) {
            return Err(Error::ShapeMismatch {
                expected: self.names().collect::<Vec<_>>().join(","),
                got: other.names().collect::<Vec<_>>().join(","),
            });
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> ParamVector {
        ParamVector {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    /// In-place `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &ParamVector) {
        assert!(self.same_architecture(other), "param architecture mismatch");
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            a.axpy(c, b);
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for (_, t) in &mut self.entries {
            *t = t.scale(c);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, t)| t.dot(t))
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    pub fn to_named_tensors(&self) -> Vec<(String, Tensor)> {
        self.entries.clone()
    }
}

/// Graph leaves for every parameter, in `ParamVector` order.
pub struct BoundParams {
    pub nodes: Vec<(String, NodeId)>,
}

impl BoundParams {
    pub fn node(&self, name: &str) -> NodeId {
        self.nodes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("no bound param {}", name))
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.nodes.iter().map(|(_, id)| *id).collect()
    }
}

/// Forward-pass handles: penultimate features and class logits.
pub struct ModelOutputs {
    pub features: NodeId,
    pub logits: NodeId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Backbone {
    pub spec: ArchSpec,
    pub input: ImageShape,
    pub head_classes: usize,
    pub params: ParamVector,
}

fn init_matrix(rows: usize, cols: usize, std: f64, r: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let n: f64 = StandardNormal.sample(r);
            n * std
        })
        .collect();
    Tensor::new(vec![rows, cols], data)
}

fn weight_std(fan_in: usize, activation: Activation) -> f64 {
    match activation {
        Activation::Relu => (2.0 / fan_in as f64).sqrt(),
        Activation::Tanh => (1.0 / fan_in as f64).sqrt(),
    }
}

/// One head column (the weights for a single class), seeded by
/// `(seed, class)` alone so growing the head in stages or in one shot yields
/// identical columns.
fn head_column(feature_dim: usize, class: usize, activation: Activation, seed: u64) -> Vec<f64> {
    let mut r = rng::rng(seed, &[domain::HEAD_EXPAND, class as u64]);
    let std = weight_std(feature_dim, activation);
    (0..feature_dim)
        .map(|_| {
            let n: f64 = StandardNormal.sample(&mut r);
            n * std
        })
        .collect()
}

impl Backbone {
    /// Seeded construction; identical inputs produce identical parameters.
    pub fn init(spec: ArchSpec, input: ImageShape, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("num_classes", "must be at least 1"));
        }
        let feature_dim = spec.feature_dim(input)?;
        let act = spec.activation();
        let mut r = rng::rng(seed, &[domain::MODEL_INIT]);
        let mut entries = Vec::new();
        match spec {
            ArchSpec::Conv { blocks, width, .. } => {
                let mut c_in = input.channels;
                for b in 0..blocks {
                    let fan_in = c_in * 9;
                    entries.push((
                        format!("conv{}.w", b),
                        init_matrix(fan_in, width, weight_std(fan_in, act), &mut r),
                    ));
                    entries.push((format!("conv{}.b", b), Tensor::zeros(vec![1, width])));
                    c_in = width;
                }
            }
            ArchSpec::Mlp { hidden, .. } => {
                let in_dim = input.rows_per_image() * input.channels;
                entries.push((
                    "fc0.w".to_string(),
                    init_matrix(in_dim, hidden, weight_std(in_dim, act), &mut r),
                ));
                entries.push(("fc0.b".to_string(), Tensor::zeros(vec![1, hidden])));
            }
        }
        // Head columns come from per-class streams so head growth composes.
        let mut head_w = vec![0.0; feature_dim * num_classes];
        for class in 0..num_classes {
            let col = head_column(feature_dim, class, act, seed);
            for i in 0..feature_dim {
                head_w[i * num_classes + class] = col[i];
            }
        }
        entries.push((
            "head.w".to_string(),
            Tensor::new(vec![feature_dim, num_classes], head_w),
        ));
        entries.push(("head.b".to_string(), Tensor::zeros(vec![1, num_classes])));
        Ok(Backbone {
            spec,
            input,
            head_classes: num_classes,
            params: ParamVector::new(entries),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.spec
            .feature_dim(self.input)
            .expect("validated at construction")
    }

    /// Leaf nodes for every parameter, in order.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let nodes = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), g.leaf(t.clone())))
            .collect();
        BoundParams { nodes }
    }

    fn apply_activation(&self, g: &mut Graph, x: NodeId) -> NodeId {
        match self.spec.activation() {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }

    /// Build the forward pass from a `[b*h*w, c]` pixels node.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        pixels: NodeId,
        batch: usize,
    ) -> ModelOutputs {
        let features = self.features_node(g, bound, pixels, batch);
        let head_w = bound.node("head.w");
        let head_b = bound.node("head.b");
        let wx = g.matmul(features, head_w);
        let bias = g.broadcast_row(head_b, batch);
        let logits = g.add(wx, bias);
        ModelOutputs { features, logits }
    }

    fn features_node(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        pixels: NodeId,
        batch: usize,
    ) -> NodeId {
        match self.spec {
            ArchSpec::Conv { blocks, width, .. } => {
                let mut x = pixels;
                let mut dims = self.input.dims(batch);
                for b in 0..blocks {
                    let cols = g.im2col(x, dims, 3, 1);
                    let w = bound.node(&format!("conv{}.w", b));
                    let bvec = bound.node(&format!("conv{}.b", b));
                    let conv = g.matmul(cols, w);
                    let bias = g.broadcast_row(bvec, dims.rows());
                    let pre = g.add(conv, bias);
                    let act = self.apply_activation(g, pre);
                    let (pooled, pdims) = g.avg_pool(act, dims);
                    x = pooled;
                    dims = pdims;
                }
                let f = width * dims.height * dims.width;
                g.reshape(x, vec![batch, f])
            }
            ArchSpec::Mlp { .. } => {
                let in_dim = self.input.rows_per_image() * self.input.channels;
                let flat = g.reshape(pixels, vec![batch, in_dim]);
                let w = bound.node("fc0.w");
                let b = bound.node("fc0.b");
                let wx = g.matmul(flat, w);
                let bias = g.broadcast_row(b, batch);
                let pre = g.add(wx, bias);
                self.apply_activation(g, pre)
            }
        }
    }

    /// Penultimate-layer activations for a batch, `[b, F]`.
    pub fn extract_features(&self, batch: &ImageBatch) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let pixels = g.leaf(batch.pixels.clone());
        let f = self.features_node(&mut g, &bound, pixels, batch.len());
        Ok(g.value(f).clone())
    }

    /// Class logits for a batch, `[b, head_classes]`.
    pub fn logits(&self, batch: &ImageBatch) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let pixels = g.leaf(batch.pixels.clone());
        let out = self.forward(&mut g, &bound, pixels, batch.len());
        Ok(g.value(out.logits).clone())
    }

    fn check_batch(&self, batch: &ImageBatch) -> Result<()> {
        if batch.shape != self.input {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.input),
                got: format!("{:?}", batch.shape),
            });
        }
        if batch.is_empty() {
            return Err(Error::invalid("batch", "must not be empty"));
        }
        Ok(())
    }

    /// Grow the head by `added_classes` columns. Existing class weights are
    /// preserved bit-exactly; new columns are seeded by `(seed, class)`.
    pub fn expand_head(&self, added_classes: usize, seed: u64) -> Result<Backbone> {
        if added_classes == 0 {
            return Err(Error::invalid("added_classes", "must be at least 1"));
        }
        let f = self.feature_dim();
        let old_c = self.head_classes;
        let new_c = old_c + added_classes;
        let act = self.spec.activation();
        let old_w = self.params.get("head.w").expect("head.w present");
        let old_b = self.params.get("head.b").expect("head.b present");
        let mut w = vec![0.0; f * new_c];
        for i in 0..f {
            w[i * new_c..i * new_c + old_c].copy_from_slice(&old_w.row(i)[..old_c]);
        }
        for class in old_c..new_c {
            let col = head_column(f, class, act, seed);
            for i in 0..f {
                w[i * new_c + class] = col[i];
            }
        }
        let mut b = vec![0.0; new_c];
        b[..old_c].copy_from_slice(old_b.data());
        let mut out = self.clone();
        out.head_classes = new_c;
        out.params.set("head.w", Tensor::new(vec![f, new_c], w));
        out.params.set("head.b", Tensor::new(vec![1, new_c], b));
        Ok(out)
    }
}

/// What to differentiate with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Params,
    Inputs,
}

/// The scalar loss a [`GradRequest`] differentiates.
#[derive(Debug, Clone)]
pub enum LossSpec {
    /// Mean cross-entropy of the batch logits against its labels.
    CrossEntropy,
    /// `0.5 * |params|^2`; its parameter gradient is the parameters.
    HalfSquaredNorm,
}

pub struct GradRequest {
    pub target: GradTarget,
    pub loss: LossSpec,
    pub batch: Option<ImageBatch>,
}

pub enum GradResult {
    /// Per-parameter gradients in `ParamVector` order, plus the loss value.
    Params(ParamVector, f64),
    /// Gradient with respect to the batch pixels, plus the loss value.
    Inputs(Tensor, f64),
}

impl Backbone {
    pub fn grad(&self, request: &GradRequest) -> Result<GradResult> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let batch_nodes = match (&request.loss, &request.batch) {
            (LossSpec::CrossEntropy, None) => {
                return Err(Error::invalid("batch", "cross-entropy needs a batch"))
            }
            (LossSpec::CrossEntropy, Some(b)) => {
                self.check_batch(b)?;
                let pixels = g.leaf(b.pixels.clone());
                let out = self.forward(&mut g, &bound, pixels, b.len());
                let loss = g.cross_entropy_mean(out.logits, &b.labels);
                Some((pixels, loss))
            }
            (LossSpec::HalfSquaredNorm, _) => None,
        };
        let loss = match batch_nodes {
            Some((_, l)) => l,
            None => {
                let mut acc = g.scalar_leaf(0.0);
                for (_, id) in &bound.nodes {
                    let sq = g.mul(*id, *id);
                    let s = g.sum_all(sq);
                    acc = g.add(acc, s);
                }
                g.scale(acc, 0.5)
            }
        };
        let loss_v = g.value(loss).item();
        match request.target {
            GradTarget::Params => {
                let ids = bound.ids();
                let grads = g.backward(loss, &ids);
                let entries = bound
                    .nodes
                    .iter()
                    .zip(&grads)
                    .map(|((name, id), grad)| {
                        let t = match grad {
                            Some(gid) => g.value(*gid).clone(),
                            None => Tensor::zeros(g.value(*id).shape().to_vec()),
                        };
                        (name.clone(), t)
                    })
                    .collect();
                Ok(GradResult::Params(ParamVector::new(entries), loss_v))
            }
            GradTarget::Inputs => {
                let (pixels, _) = batch_nodes
                    .ok_or_else(|| Error::invalid("target", "input gradient needs a batch loss"))?;
                let grads = g.backward(loss, &[pixels]);
                let t = match grads[0] {
                    Some(gid) => g.value(gid).clone(),
                    None => Tensor::zeros(g.value(pixels).shape().to_vec()),
                };
                Ok(GradResult::Inputs(t, loss_v))
            }
        }
    }
}
