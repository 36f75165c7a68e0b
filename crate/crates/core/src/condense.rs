//! Online exemplar condensation.
//!
//! Condensed exemplar pixels are optimized so their gradient signature and
//! feature relationships under the condensation net match those of the real
//! stream, with a contrastive term pulling exemplar features toward their
//! class prototypes. The condensation net itself is trained on real images
//! only; condensed tensors never enter its update, which is the leakage
//! property the origin tags enforce.

use crate::autodiff::{Graph, NodeId};
use crate::contrast::mkcl_batch_loss;
use crate::dataset::ImageBatch;
#[cfg(test)]
use crate::dataset::Origin;
use crate::error::{Error, Result};
use crate::memory::MemoryStore;
use crate::model::{ArchSpec, Backbone, BoundParams};
use crate::proto::PrototypeSet;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Loss switches and rates for one client's condensation run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CondenseConfig {
    /// Condensation-net learning rate.
    pub eta: f64,
    /// Exemplar pixel learning rate.
    pub exemplar_lr: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Contrastive weight; zero disables the term.
    pub beta: f64,
    /// Gradient-matching term switch.
    pub grad_match: bool,
    /// Relationship-matching term switch.
    pub relationship: bool,
    /// Exemplar update iterations per incoming batch.
    pub iterations: usize,
}

impl Default for CondenseConfig {
    fn default() -> Self {
        CondenseConfig {
            eta: 0.01,
            exemplar_lr: 0.01,
            tau: 0.5,
            beta: 0.5,
            grad_match: true,
            relationship: true,
            iterations: 1,
        }
    }
}

impl CondenseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eta", self.eta),
            ("exemplar_lr", self.exemplar_lr),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be finite and nonnegative"));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("tau", "must be positive"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations", "must be at least 1"));
        }
        Ok(())
    }
}

/// The condensation net and its optimizer state. The net is re-initialized
/// every task with a seed derived from (run seed, task id).
#[derive(Debug, Clone)]
pub struct CondensationState {
    model: Backbone,
    eta: f64,
    step_count: usize,
}

/// Per-term losses averaged over the classes touched by one step.
#[derive(Debug, Clone, Copy, Default)]
pub struct CondenseReport {
    pub l_cond: f64,
    pub l_rel: f64,
    pub l_mkcl: f64,
    pub l_total: f64,
    pub classes: usize,
}

impl CondensationState {
    pub fn new(
        spec: ArchSpec,
        input: crate::dataset::ImageShape,
        head_classes: usize,
        eta: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::invalid("eta", "must be finite and nonnegative"));
        }
        Ok(CondensationState {
            model: Backbone::init(spec, input, head_classes, seed)?,
            eta,
            step_count: 0,
        })
    }

    pub fn model(&self) -> &Backbone {
        &self.model
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }
}

fn require_single_class(batch: &ImageBatch, what: &str) -> Result<usize> {
    let label = batch
        .uniform_label()
        .ok_or_else(|| Error::invalid(what, "mixed-label or empty batch"))?;
    Ok(label)
}

fn require_real(batch: &ImageBatch) -> Result<()> {
    if !batch.all_real() {
        return Err(Error::CondensedLeak);
    }
    Ok(())
}

/// Names of the weight tensors entering the gradient-match distance; biases
/// are excluded from the layerwise cosine by construction.
fn weight_names(model: &Backbone) -> Vec<String> {
    model
        .params
        .names()
        .filter(|n| n.ends_with(".w"))
        .map(str::to_string)
        .collect()
}

/// In-graph gradient-matching distance between the class-k exemplar pixels
/// node and a real class-k batch: sum over weight tensors of one minus the
/// cosine of the two CE gradients. Differentiable in `m_pixels`.
pub fn grad_match_loss_node(
    g: &mut Graph,
    model: &Backbone,
    bound: &BoundParams,
    m_logits: NodeId,
    m_labels: &[usize],
    b_batch: &ImageBatch,
) -> Result<NodeId> {
    let weight_ids: Vec<NodeId> = weight_names(model)
        .iter()
        .map(|n| bound.node(n))
        .collect();
    let loss_m = g.cross_entropy_mean(m_logits, m_labels);
    let grads_m = g.backward(loss_m, &weight_ids);

    let b_pixels = g.leaf(b_batch.pixels.clone());
    let b_pixels = g.stop_grad(b_pixels);
    let out_b = model.forward(g, bound, b_pixels, b_batch.len());
    let loss_b = g.cross_entropy_mean(out_b.logits, &b_batch.labels);
    let grads_b = g.backward(loss_b, &weight_ids);

    let mut total = g.scalar_leaf(0.0);
    for (gm, gb) in grads_m.iter().zip(&grads_b) {
        let (gm, gb) = match (gm, gb) {
            (Some(a), Some(b)) => (*a, *b),
            // A weight unreachable from CE would be an architecture bug.
            _ => return Err(Error::invalid("model", "weight missing from gradient")),
        };
        let gb = g.stop_grad(gb);
        let cos = g.cosine_flat(gm, gb);
        let one_minus = g.neg(cos);
        let one_minus = g.add_scalar(one_minus, 1.0);
        total = g.add(total, one_minus);
    }
    Ok(total)
}

/// Standalone gradient-matching distance between an exemplar batch and a
/// real batch of the same class.
pub fn grad_match_loss(
    model: &Backbone,
    m_batch: &ImageBatch,
    b_batch: &ImageBatch,
) -> Result<f64> {
    let mk = require_single_class(m_batch, "m_batch")?;
    let bk = require_single_class(b_batch, "b_batch")?;
    if mk != bk {
        return Err(Error::invalid("b_batch", "class differs from exemplar batch"));
    }
    require_real(b_batch)?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let m_pixels = g.leaf(m_batch.pixels.clone());
    let out_m = model.forward(&mut g, &bound, m_pixels, m_batch.len());
    let node = grad_match_loss_node(&mut g, model, &bound, out_m.logits, &m_batch.labels, b_batch)?;
    Ok(g.value(node).item())
}

/// Reference relationship distance on plain feature matrices: rho(A) is the
/// row-mean of the cosine matrix between A and the reference set, and the
/// result is the mean squared difference of the two rho vectors.
pub fn relationship_from_features(
    feats_m: &Tensor,
    feats_b: &Tensor,
    feats_rest: &Tensor,
) -> Result<f64> {
    if feats_rest.rows() == 0 {
        return Ok(0.0);
    }
    let rho = |a: &Tensor| -> Vec<f64> {
        let mut out = vec![0.0; feats_rest.rows()];
        for i in 0..a.rows() {
            for (j, slot) in out.iter_mut().enumerate() {
                *slot += row_cosine(a.row(i), feats_rest.row(j));
            }
        }
        for v in &mut out {
            *v /= a.rows() as f64;
        }
        out
    };
    let (rm, rb) = (rho(feats_m), rho(feats_b));
    let n = rm.len() as f64;
    Ok(rm
        .iter()
        .zip(&rb)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

fn row_cosine(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// In-graph relationship distance. Rows are normalized with a small epsilon,
/// so an all-zero feature row has similarity zero to everything.
pub fn relationship_loss_node(
    g: &mut Graph,
    feats_m: NodeId,
    feats_b: NodeId,
    feats_rest: NodeId,
) -> NodeId {
    const EPS: f64 = 1e-12;
    let rest_n = g.normalize_rows(feats_rest, EPS);
    let rest_t = g.transpose(rest_n);
    let rho = |g: &mut Graph, a: NodeId| {
        let an = g.normalize_rows(a, EPS);
        let sims = g.matmul(an, rest_t);
        let col = g.col_sum(sims);
        let rows = g.value(a).rows();
        g.scale(col, 1.0 / rows as f64)
    };
    let rm = rho(g, feats_m);
    let rb = rho(g, feats_b);
    g.mse(rm, rb)
}

/// Standalone relationship distance through the condensation net's features.
pub fn relationship_loss(
    model: &Backbone,
    m_batch: &ImageBatch,
    b_batch: &ImageBatch,
    rest: Option<&ImageBatch>,
) -> Result<f64> {
    let mk = require_single_class(m_batch, "m_batch")?;
    let bk = require_single_class(b_batch, "b_batch")?;
    if mk != bk {
        return Err(Error::invalid("b_batch", "class differs from exemplar batch"));
    }
    let rest = match rest {
        Some(r) if !r.is_empty() => r,
        _ => {
            log::warn!("relationship: no reference exemplars, term is zero");
            return Ok(0.0);
        }
    };
    let feats_m = model.extract_features(m_batch)?;
    let feats_b = model.extract_features(b_batch)?;
    let feats_rest = model.extract_features(rest)?;
    relationship_from_features(&feats_m, &feats_b, &feats_rest)
}

/// Combined memory loss; the contrastive term is weighted by beta.
pub fn total_memory_loss(l_cond: f64, l_rel: f64, l_mkcl: f64, beta: f64) -> Result<f64> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::invalid("beta", "must be finite and nonnegative"));
    }
    Ok(l_cond + l_rel + beta * l_mkcl)
}

/// One SGD step on the condensation net from real images only: CE on the
/// current batch plus CE on the stored-original reservoir when present.
pub fn update_condensation_model(
    state: &mut CondensationState,
    b_n: &ImageBatch,
    m_orig: Option<&ImageBatch>,
) -> Result<()> {
    if b_n.is_empty() {
        return Err(Error::invalid("b_n", "must not be empty"));
    }
    require_real(b_n)?;
    if let Some(m) = m_orig {
        require_real(m)?;
    }
    let mut g = Graph::new();
    let bound = state.model.bind(&mut g);
    let pixels = g.leaf(b_n.pixels.clone());
    let out = state.model.forward(&mut g, &bound, pixels, b_n.len());
    let mut loss = g.cross_entropy_mean(out.logits, &b_n.labels);
    if let Some(m) = m_orig {
        if !m.is_empty() {
            let mp = g.leaf(m.pixels.clone());
            let out_m = state.model.forward(&mut g, &bound, mp, m.len());
            let loss_m = g.cross_entropy_mean(out_m.logits, &m.labels);
            loss = g.add(loss, loss_m);
        }
    }
    let names: Vec<String> = state.model.params.names().map(str::to_string).collect();
    let ids: Vec<NodeId> = names.iter().map(|n| bound.node(n)).collect();
    let grads = g.backward(loss, &ids);
    let eta = state.eta;
    for (name, grad) in names.iter().zip(&grads) {
        if let Some(gn) = grad {
            let gt = g.value(*gn).clone();
            state.model.params.get_mut(name).unwrap().axpy(-eta, &gt);
        }
    }
    if !state.model.params.all_finite() {
        return Err(Error::invalid("omega", "non-finite after update"));
    }
    state.step_count += 1;
    Ok(())
}

/// Stack exemplar pixel tensors into one `[m * rows, c]` matrix.
fn stack_pixels(tensors: &[&Tensor]) -> Tensor {
    let rows: usize = tensors.iter().map(|t| t.rows()).sum();
    let cols = tensors[0].cols();
    let data: Vec<f64> = tensors
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    Tensor::new(vec![rows, cols], data)
}

/// Extract the rows of `batch` at the given sample indices as a sub-batch.
fn sub_batch(batch: &ImageBatch, idx: &[usize]) -> ImageBatch {
    let rows = batch.shape.rows_per_image();
    ImageBatch::stack_owned(
        batch.shape,
        idx.iter()
            .map(|&i| {
                let pix = Tensor::new(
                    vec![rows, batch.shape.channels],
                    (i * rows..(i + 1) * rows)
                        .flat_map(|r| batch.pixels.row(r).to_vec())
                        .collect(),
                );
                (pix, batch.labels[i], batch.origins[i])
            })
            .collect(),
    )
}

/// One condensation step: per-class exemplar pixel updates, then the real-only
/// net update, then the reservoir update. Returns class-averaged loss terms.
pub fn condense_step(
    state: &mut CondensationState,
    store: &mut MemoryStore,
    b_n: &ImageBatch,
    prototypes: Option<&PrototypeSet>,
    cfg: &CondenseConfig,
    rng: &mut impl Rng,
) -> Result<CondenseReport> {
    cfg.validate()?;
    if b_n.is_empty() {
        return Err(Error::invalid("b_n", "must not be empty"));
    }
    require_real(b_n)?;

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &label) in b_n.labels.iter().enumerate() {
        by_class.entry(label).or_default().push(i);
    }

    let mut report = CondenseReport::default();
    for (&k, idx) in &by_class {
        let m_idx = store.summary_indices_of_class(k);
        if m_idx.is_empty() {
            continue;
        }
        let b_k = sub_batch(b_n, idx);
        let mut last = (0.0, 0.0, 0.0);
        for _ in 0..cfg.iterations {
            last = condense_class_step(state, store, k, &m_idx, &b_k, prototypes, cfg)?;
        }
        report.l_cond += last.0;
        report.l_rel += last.1;
        report.l_mkcl += last.2;
        report.classes += 1;
    }
    if report.classes > 0 {
        let n = report.classes as f64;
        report.l_cond /= n;
        report.l_rel /= n;
        report.l_mkcl /= n;
        report.l_total = total_memory_loss(report.l_cond, report.l_rel, report.l_mkcl, cfg.beta)?;
    }

    let orig = store.orig_batch();
    update_condensation_model(state, b_n, orig.as_ref())?;

    let cap = store.default_orig_cap();
    let images: Vec<(Tensor, usize)> = (0..b_n.len())
        .map(|i| {
            let s = sub_batch(b_n, &[i]);
            (s.pixels, b_n.labels[i])
        })
        .collect();
    store.admit_original(&images, cap, rng)?;
    Ok(report)
}

/// One pixel-gradient step for a single class; returns the pre-step losses.
fn condense_class_step(
    state: &CondensationState,
    store: &mut MemoryStore,
    k: usize,
    m_idx: &[usize],
    b_k: &ImageBatch,
    prototypes: Option<&PrototypeSet>,
    cfg: &CondenseConfig,
) -> Result<(f64, f64, f64)> {
    let model = &state.model;
    let mut g = Graph::new();
    let bound = model.bind(&mut g);

    let m_tensors: Vec<&Tensor> = m_idx.iter().map(|&i| &store.summ()[i].pixels).collect();
    let m_count = m_tensors.len();
    let m_pixels = g.leaf(stack_pixels(&m_tensors));
    let m_labels = vec![k; m_count];
    let out_m = model.forward(&mut g, &bound, m_pixels, m_count);

    let l_cond = if cfg.grad_match {
        grad_match_loss_node(&mut g, model, &bound, out_m.logits, &m_labels, b_k)?
    } else {
        g.scalar_leaf(0.0)
    };

    let rest: Vec<&Tensor> = store
        .cond()
        .iter()
        .chain(store.summ().iter())
        .filter(|e| e.label != k)
        .map(|e| &e.pixels)
        .collect();
    let l_rel = if cfg.relationship && !rest.is_empty() {
        let rest_count = rest.len();
        let rest_pixels = g.leaf(stack_pixels(&rest));
        let rest_pixels = g.stop_grad(rest_pixels);
        let feats_rest = {
            let out = model.forward(&mut g, &bound, rest_pixels, rest_count);
            out.features
        };
        let b_pixels = g.leaf(b_k.pixels.clone());
        let b_pixels = g.stop_grad(b_pixels);
        let out_b = model.forward(&mut g, &bound, b_pixels, b_k.len());
        relationship_loss_node(&mut g, out_m.features, out_b.features, feats_rest)
    } else {
        if cfg.relationship {
            log::warn!("relationship: no reference exemplars for class {}", k);
        }
        g.scalar_leaf(0.0)
    };

    let l_mkcl = match prototypes {
        Some(p) if cfg.beta > 0.0 => {
            let (pos, neg) = p.split(k);
            if pos.is_empty() || neg.is_empty() {
                g.scalar_leaf(0.0)
            } else {
                let pos_nodes: Vec<NodeId> = pos.iter().map(|t| g.leaf((*t).clone())).collect();
                let neg_nodes: Vec<NodeId> = neg.iter().map(|t| g.leaf((*t).clone())).collect();
                mkcl_batch_loss(&mut g, out_m.features, &pos_nodes, &neg_nodes, cfg.tau)?
            }
        }
        _ => g.scalar_leaf(0.0),
    };

    let report = (
        g.value(l_cond).item(),
        g.value(l_rel).item(),
        g.value(l_mkcl).item(),
    );

    let weighted = g.scale(l_mkcl, cfg.beta);
    let partial = g.add(l_cond, l_rel);
    let total = g.add(partial, weighted);
    let grads = g.backward(total, &[m_pixels]);
    if let Some(gn) = grads[0] {
        let grad = g.value(gn);
        let rows = store.shape().rows_per_image();
        for (slot, &idx) in m_idx.iter().enumerate() {
            let mut pix = store.summ()[idx].pixels.clone();
            for r in 0..rows {
                let grow = grad.row(slot * rows + r);
                for (p, gv) in pix.row_mut(r).iter_mut().zip(grow) {
                    *p -= cfg.exemplar_lr * gv;
                }
            }
            store.update_summary_pixels(idx, pix)?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ImageShape;
    use crate::model::Activation;
    use crate::proto::{build_prototypes, FeatureBank};
    use crate::rng;
    use approx::assert_relative_eq;
    use rand::Rng;

    const SHAPE: ImageShape = ImageShape {
        height: 2,
        width: 2,
        channels: 1,
    };

    fn tiny_spec() -> ArchSpec {
        ArchSpec::Mlp {
            hidden: 6,
            activation: Activation::Tanh,
        }
    }

    fn tiny_state(seed: u64) -> CondensationState {
        CondensationState::new(tiny_spec(), SHAPE, 3, 0.05, seed).unwrap()
    }

    fn batch_of(class: usize, values: &[f64]) -> ImageBatch {
        ImageBatch::stack_owned(
            SHAPE,
            values
                .iter()
                .map(|&v| {
                    (
                        Tensor::new(vec![4, 1], vec![v, v * 0.5, -v, 0.1]),
                        class,
                        Origin::Real,
                    )
                })
                .collect(),
        )
    }

    fn random_batch(class: usize, n: usize, r: &mut impl Rng, origin: Origin) -> ImageBatch {
        ImageBatch::stack_owned(
            SHAPE,
            (0..n)
                .map(|_| {
                    let pix: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
                    (Tensor::new(vec![4, 1], pix), class, origin)
                })
                .collect(),
        )
    }

    #[test]
    fn identical_batches_have_zero_grad_match_loss() {
        let state = tiny_state(1);
        let b = batch_of(1, &[0.4, -0.7]);
        let loss = grad_match_loss(state.model(), &b, &b).unwrap();
        assert!(loss.abs() < 1e-10, "loss {}", loss);
    }

    #[test]
    fn grad_match_matches_independent_cosine_computation() {
        let mut r = rng::rng(3, &[0]);
        for trial in 0..5 {
            let state = tiny_state(trial);
            let m = random_batch(2, 3, &mut r, Origin::Condensed);
            let b = random_batch(2, 4, &mut r, Origin::Real);
            let got = grad_match_loss(state.model(), &m, &b).unwrap();

            // Independent path: raw per-weight gradients from the model's own
            // grad entry point, then scalar cosine arithmetic.
            let gm = ce_weight_grads(state.model(), &m);
            let gb = ce_weight_grads(state.model(), &b);
            let mut expect = 0.0;
            for (a, bb) in gm.iter().zip(&gb) {
                let dot: f64 = a.data().iter().zip(bb.data()).map(|(x, y)| x * y).sum();
                let na = a.norm();
                let nb = bb.norm();
                expect += 1.0 - dot / (na * nb);
            }
            assert_relative_eq!(got, expect, max_relative = 1e-9);
            assert!(got >= 0.0);
        }
    }

    fn ce_weight_grads(model: &Backbone, batch: &ImageBatch) -> Vec<Tensor> {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let pixels = g.leaf(batch.pixels.clone());
        let out = model.forward(&mut g, &bound, pixels, batch.len());
        let loss = g.cross_entropy_mean(out.logits, &batch.labels);
        let names = weight_names(model);
        let ids: Vec<NodeId> = names.iter().map(|n| bound.node(n)).collect();
        let grads = g.backward(loss, &ids);
        grads
            .into_iter()
            .map(|n| g.value(n.unwrap()).clone())
            .collect()
    }

    #[test]
    fn mixed_label_batches_are_rejected() {
        let state = tiny_state(5);
        let mut mixed = batch_of(0, &[0.1, 0.2]);
        mixed.labels[1] = 1;
        let pure = batch_of(0, &[0.3]);
        assert!(grad_match_loss(state.model(), &mixed, &pure).is_err());
        assert!(grad_match_loss(state.model(), &pure, &mixed).is_err());
        let other = batch_of(2, &[0.3]);
        assert!(grad_match_loss(state.model(), &pure, &other).is_err());
    }

    #[test]
    fn condensed_real_side_is_a_leak() {
        let state = tiny_state(5);
        let m = batch_of(0, &[0.1]);
        let mut fake = batch_of(0, &[0.2]);
        fake.origins[0] = Origin::Condensed;
        assert!(matches!(
            grad_match_loss(state.model(), &m, &fake),
            Err(Error::CondensedLeak)
        ));
    }

    #[test]
    fn omega_update_matches_hand_sgd_on_linear_model() {
        // 1x1 image, MLP hidden 1 with tanh: logits = tanh(x w0 + b0) w1 + b1.
        // One CE step on a single example is hand-checkable through the chain
        // rule; instead of transcribing it we verify against the model's own
        // gradient entry point, which is itself finite-difference tested.
        let shape = ImageShape { height: 1, width: 1, channels: 1 };
        let spec = ArchSpec::Mlp { hidden: 2, activation: Activation::Tanh };
        let mut state = CondensationState {
            model: Backbone::init(spec, shape, 2, 9).unwrap(),
            eta: 0.1,
            step_count: 0,
        };
        let before = state.model.params.clone();
        let batch = ImageBatch::stack_owned(
            shape,
            vec![(Tensor::new(vec![1, 1], vec![0.7]), 1, Origin::Real)],
        );
        let grads = ce_param_grads(&state.model, &batch);
        update_condensation_model(&mut state, &batch, None).unwrap();
        for (name, g0) in &grads {
            let expect = {
                let mut t = before.get(name).unwrap().clone();
                t.axpy(-0.1, g0);
                t
            };
            let got = state.model.params.get(name).unwrap();
            for (a, b) in expect.data().iter().zip(got.data()) {
                assert_relative_eq!(a, b, max_relative = 1e-12);
            }
        }
        assert_eq!(state.step_count(), 1);
    }

    fn ce_param_grads(model: &Backbone, batch: &ImageBatch) -> Vec<(String, Tensor)> {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let pixels = g.leaf(batch.pixels.clone());
        let out = model.forward(&mut g, &bound, pixels, batch.len());
        let loss = g.cross_entropy_mean(out.logits, &batch.labels);
        let names: Vec<String> = model.params.names().map(str::to_string).collect();
        let ids: Vec<NodeId> = names.iter().map(|n| bound.node(n)).collect();
        let grads = g.backward(loss, &ids);
        names
            .into_iter()
            .zip(grads)
            .map(|(n, gr)| (n, g.value(gr.unwrap()).clone()))
            .collect()
    }

    #[test]
    fn zero_eta_keeps_omega_fixed() {
        let mut state = tiny_state(7);
        state.eta = 0.0;
        let before = state.model.params.clone();
        let batch = batch_of(1, &[0.5, -0.2]);
        update_condensation_model(&mut state, &batch, None).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(state.model.params.iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn omega_update_rejects_condensed_batches() {
        let mut state = tiny_state(7);
        let mut batch = batch_of(1, &[0.5]);
        batch.origins[0] = Origin::Condensed;
        assert!(matches!(
            update_condensation_model(&mut state, &batch, None),
            Err(Error::CondensedLeak)
        ));
        let real = batch_of(1, &[0.5]);
        let mut bad_orig = batch_of(0, &[0.3]);
        bad_orig.origins[0] = Origin::Condensed;
        assert!(matches!(
            update_condensation_model(&mut state, &real, Some(&bad_orig)),
            Err(Error::CondensedLeak)
        ));
    }

    #[test]
    fn relationship_identity_and_hand_case() {
        // Through the raw feature map: M_k orthogonal to the single reference,
        // B_k parallel to it, so the rho vectors are (0) and (1) and the mean
        // squared difference is 1.
        let m = Tensor::new(vec![1, 2], vec![0.0, 1.0]);
        let b = Tensor::new(vec![1, 2], vec![1.0, 0.0]);
        let rest = Tensor::new(vec![1, 2], vec![1.0, 0.0]);
        let loss = relationship_from_features(&m, &b, &rest).unwrap();
        assert_relative_eq!(loss, 1.0, max_relative = 1e-12);
        let same = relationship_from_features(&b, &b, &rest).unwrap();
        assert!(same.abs() < 1e-12);
        let empty = Tensor::zeros(vec![0, 2]);
        assert_eq!(relationship_from_features(&m, &b, &empty).unwrap(), 0.0);
    }

    #[test]
    fn relationship_graph_form_matches_reference() {
        let mut r = rng::rng(13, &[0]);
        for _ in 0..10 {
            let (m, b, rest) = (
                rand_mat(&mut r, 3, 4),
                rand_mat(&mut r, 2, 4),
                rand_mat(&mut r, 5, 4),
            );
            let expect = relationship_from_features(&m, &b, &rest).unwrap();
            let mut g = Graph::new();
            let mn = g.leaf(m);
            let bn = g.leaf(b);
            let rn = g.leaf(rest);
            let node = relationship_loss_node(&mut g, mn, bn, rn);
            assert_relative_eq!(g.value(node).item(), expect, max_relative = 1e-6);
        }
    }

    fn rand_mat(r: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn relationship_through_model_is_zero_for_identical_batches() {
        let state = tiny_state(15);
        let b = batch_of(0, &[0.2, 0.8]);
        let rest = batch_of(2, &[0.5]);
        let loss = relationship_loss(state.model(), &b, &b, Some(&rest)).unwrap();
        assert!(loss.abs() < 1e-12);
        assert_eq!(relationship_loss(state.model(), &b, &b, None).unwrap(), 0.0);
    }

    #[test]
    fn total_memory_loss_arithmetic() {
        assert_eq!(total_memory_loss(1.0, 0.5, 2.0, 0.5).unwrap(), 2.5);
        assert_eq!(total_memory_loss(1.0, 0.5, 2.0, 0.0).unwrap(), 1.5);
        assert!(total_memory_loss(1.0, 0.5, 2.0, -0.1).is_err());
    }

    fn seeded_store(state: &CondensationState, classes: &[usize], r: &mut impl Rng) -> MemoryStore {
        let mut store = MemoryStore::new(12, SHAPE).unwrap();
        store.rebalance_quota(classes.len()).unwrap();
        store.begin_task(classes).unwrap();
        let _ = state;
        for &c in classes {
            for _ in 0..2 {
                let pix: Vec<f64> = (0..4).map(|_| r.random_range(-0.5..0.5)).collect();
                store
                    .admit_exemplar(Tensor::new(vec![4, 1], pix), c, Origin::Condensed)
                    .unwrap();
            }
        }
        store
    }

    #[test]
    fn pixel_gradients_match_finite_differences() {
        let state = tiny_state(21);
        let mut r = rng::rng(21, &[1]);
        let mut store = seeded_store(&state, &[0, 1], &mut r);
        let b_k = random_batch(0, 3, &mut r, Origin::Real);
        let cfg = CondenseConfig::default();

        // Analytic gradient via one class step with lr acting as -1 scale.
        let m_idx = store.summary_indices_of_class(0);
        let before: Vec<Tensor> = m_idx
            .iter()
            .map(|&i| store.summ()[i].pixels.clone())
            .collect();
        let mut probe_cfg = cfg;
        probe_cfg.exemplar_lr = 1.0;
        let mut probe_store = store.clone();
        condense_class_step(&state, &mut probe_store, 0, &m_idx, &b_k, None, &probe_cfg).unwrap();
        let analytic: Vec<Tensor> = m_idx
            .iter()
            .zip(&before)
            .map(|(&i, b)| {
                let mut diff = b.clone();
                diff.axpy(-1.0, &probe_store.summ()[i].pixels);
                diff
            })
            .collect();

        // Finite differences on the total loss as a function of one pixel.
        let eval = |store: &MemoryStore| -> f64 {
            let m_tensors: Vec<&Tensor> =
                m_idx.iter().map(|&i| &store.summ()[i].pixels).collect();
            let m_batch = ImageBatch::stack(
                SHAPE,
                m_tensors.iter().map(|t| (*t, 0usize, Origin::Condensed)),
            );
            let l_cond = grad_match_loss(state.model(), &m_batch, &b_k).unwrap();
            let rest: Vec<(Tensor, usize, Origin)> = store
                .summ()
                .iter()
                .filter(|e| e.label != 0)
                .map(|e| (e.pixels.clone(), e.label, e.origin))
                .collect();
            let rest_batch = ImageBatch::stack_owned(SHAPE, rest);
            let l_rel =
                relationship_loss(state.model(), &m_batch, &b_k, Some(&rest_batch)).unwrap();
            l_cond + l_rel
        };
        let h = 1e-5;
        let mut checked = 0;
        for (slot, &i) in m_idx.iter().enumerate() {
            for p in 0..4 {
                let mut plus = store.clone();
                let mut pix = plus.summ()[i].pixels.clone();
                pix.data_mut()[p] += h;
                plus.update_summary_pixels(i, pix).unwrap();
                let mut minus = store.clone();
                let mut pix = minus.summ()[i].pixels.clone();
                pix.data_mut()[p] -= h;
                minus.update_summary_pixels(i, pix).unwrap();
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic[slot].data()[p];
                let denom = fd.abs().max(an.abs()).max(1e-4);
                assert!(
                    ((fd - an) / denom).abs() < 1e-3,
                    "pixel ({}, {}): fd {} vs analytic {}",
                    slot,
                    p,
                    fd,
                    an
                );
                checked += 1;
            }
        }
        assert_eq!(checked, 8);
        let _ = &mut store;
    }

    #[test]
    fn condense_descends_on_frozen_batch() {
        let mut r = rng::rng(23, &[2]);
        for seed in [1u64, 2, 3] {
            let state = tiny_state(seed);
            let mut store = seeded_store(&state, &[0, 1], &mut r);
            let b_0 = random_batch(0, 4, &mut r, Origin::Real);
            let cfg = CondenseConfig {
                exemplar_lr: 0.05,
                ..CondenseConfig::default()
            };
            let m_idx = store.summary_indices_of_class(0);
            let mut first = None;
            let mut last = 0.0;
            for _ in 0..100 {
                let (lc, lr_, _) =
                    condense_class_step(&state, &mut store, 0, &m_idx, &b_0, None, &cfg).unwrap();
                let total = lc + lr_;
                if first.is_none() {
                    first = Some(total);
                }
                last = total;
            }
            let first = first.unwrap();
            assert!(
                last <= 0.5 * first,
                "seed {}: loss {} -> {} missed 50% decrease",
                seed,
                first,
                last
            );
        }
    }

    #[test]
    fn step_updates_only_present_classes_and_feeds_reservoir() {
        let state = tiny_state(27);
        let mut r = rng::rng(27, &[3]);
        let mut store = seeded_store(&state, &[0, 1], &mut r);
        let before_1: Vec<Tensor> = store
            .summary_indices_of_class(1)
            .iter()
            .map(|&i| store.summ()[i].pixels.clone())
            .collect();
        let before_0: Vec<Tensor> = store
            .summary_indices_of_class(0)
            .iter()
            .map(|&i| store.summ()[i].pixels.clone())
            .collect();
        let mut state = state;
        let b_n = random_batch(0, 3, &mut r, Origin::Real);
        let cfg = CondenseConfig::default();
        let report = condense_step(&mut state, &mut store, &b_n, None, &cfg, &mut r).unwrap();
        assert_eq!(report.classes, 1);
        for (i, b) in store.summary_indices_of_class(1).iter().zip(&before_1) {
            assert_eq!(&store.summ()[*i].pixels, b, "class 1 must stay frozen");
        }
        let moved = store
            .summary_indices_of_class(0)
            .iter()
            .zip(&before_0)
            .any(|(i, b)| &store.summ()[*i].pixels != b);
        assert!(moved, "class 0 exemplars should move");
        assert_eq!(store.orig().len(), 3);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_exemplar_lr_decouples_pixels_from_omega() {
        let state = tiny_state(29);
        let mut r = rng::rng(29, &[4]);
        let mut store = seeded_store(&state, &[0], &mut r);
        let before: Vec<Tensor> = store.summ().iter().map(|e| e.pixels.clone()).collect();
        let mut state = state;
        let omega_before = state.model.params.clone();
        let b_n = random_batch(0, 2, &mut r, Origin::Real);
        let cfg = CondenseConfig {
            exemplar_lr: 0.0,
            ..CondenseConfig::default()
        };
        condense_step(&mut state, &mut store, &b_n, None, &cfg, &mut r).unwrap();
        for (e, b) in store.summ().iter().zip(&before) {
            assert_eq!(&e.pixels, b);
        }
        let changed = omega_before
            .iter()
            .zip(state.model.params.iter())
            .any(|((_, a), (_, b))| a != b);
        assert!(changed, "omega must still update");
    }

    #[test]
    fn contrastive_term_engages_with_prototypes() {
        let state = tiny_state(31);
        let mut r = rng::rng(31, &[5]);
        let mut store = seeded_store(&state, &[0, 1], &mut r);
        let mut bank = FeatureBank::new(state.model().feature_dim());
        let fa: Vec<f64> = (0..state.model().feature_dim())
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        let fb: Vec<f64> = (0..state.model().feature_dim())
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        bank.push(0, Tensor::new(vec![1, fa.len()], fa)).unwrap();
        bank.push(1, Tensor::new(vec![1, fb.len()], fb)).unwrap();
        let protos = build_prototypes(&bank).unwrap();
        let mut state = state;
        let b_n = random_batch(0, 2, &mut r, Origin::Real);
        let cfg = CondenseConfig::default();
        let with = condense_step(&mut state, &mut store, &b_n, Some(&protos), &cfg, &mut r).unwrap();
        assert!(with.l_mkcl > 0.0, "contrastive loss should be positive");
        assert_relative_eq!(
            with.l_total,
            with.l_cond + with.l_rel + 0.5 * with.l_mkcl,
            max_relative = 1e-12
        );
    }
}
