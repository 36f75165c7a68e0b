//! Multi-prototype contrastive compensation.
//!
//! An exemplar feature z is pulled toward its class prototypes and pushed
//! from all other classes' prototypes through an InfoNCE-style ratio of
//! exponentiated cosine similarities, s(z, u) = exp(cos(z, u) / tau).
//! Prototypes are contrast targets, never optimization variables, so they
//! sit behind a stop gradient.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use std::rc::Rc;

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid("tau", "must be positive"));
    }
    Ok(())
}

/// Scalar reference form on precomputed cosines; the differentiable builder
/// must agree with this exactly.
pub fn mkcl_from_cosines(positives: &[f64], negatives: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if positives.is_empty() {
        return Err(Error::invalid("positives", "need at least one prototype"));
    }
    if negatives.is_empty() {
        return Ok(0.0);
    }
    let mass = |cs: &[f64]| cs.iter().map(|c| (c / tau).exp()).sum::<f64>();
    let p = mass(positives);
    let n = mass(negatives);
    Ok(-(p / (p + n)).ln())
}

fn similarity_mass(g: &mut Graph, z: NodeId, prototypes: &[NodeId], tau: f64) -> NodeId {
    let mut total = g.scalar_leaf(0.0);
    for &u in prototypes {
        let u = g.stop_grad(u);
        let cos = g.cosine_flat(z, u);
        let scaled = g.scale(cos, 1.0 / tau);
        let s = g.exp(scaled);
        total = g.add(total, s);
    }
    total
}

/// Contrastive loss for one feature vector against prototype node lists.
/// An empty negative set degenerates to a ratio of one, hence loss zero.
pub fn mkcl_loss(
    g: &mut Graph,
    z: NodeId,
    positives: &[NodeId],
    negatives: &[NodeId],
    tau: f64,
) -> Result<NodeId> {
    check_tau(tau)?;
    if positives.is_empty() {
        return Err(Error::invalid("positives", "need at least one prototype"));
    }
    if negatives.is_empty() {
        log::warn!("mkcl: no negative prototypes, contrastive term is zero");
        return Ok(g.scalar_leaf(0.0));
    }
    let p = similarity_mass(g, z, positives, tau);
    let n = similarity_mass(g, z, negatives, tau);
    let denom = g.add(p, n);
    let ratio = g.div(p, denom);
    let logr = g.log(ratio);
    Ok(g.neg(logr))
}

/// Mean contrastive loss over the rows of a feature matrix that all carry one
/// class label: positives are that class's prototypes.
pub fn mkcl_batch_loss(
    g: &mut Graph,
    features: NodeId,
    positives: &[NodeId],
    negatives: &[NodeId],
    tau: f64,
) -> Result<NodeId> {
    let m = g.value(features).rows();
    if m == 0 {
        return Err(Error::invalid("features", "empty batch"));
    }
    let mut total = g.scalar_leaf(0.0);
    for i in 0..m {
        let z = g.gather_rows(features, Rc::new(vec![i]));
        let l = mkcl_loss(g, z, positives, negatives, tau)?;
        total = g.add(total, l);
    }
    Ok(g.scale(total, 1.0 / m as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn vec_leaf(g: &mut Graph, v: &[f64]) -> NodeId {
        g.leaf(Tensor::new(vec![1, v.len()], v.to_vec()))
    }

    #[test]
    fn hand_case_single_positive_single_negative() {
        // cos = 1 with the positive, 0 with the negative, tau = 1:
        // -log(e / (e + 1)) = log(1 + 1/e).
        let mut g = Graph::new();
        let z = vec_leaf(&mut g, &[2.0, 0.0]);
        let pos = vec_leaf(&mut g, &[1.0, 0.0]);
        let neg = vec_leaf(&mut g, &[0.0, 1.0]);
        let loss = mkcl_loss(&mut g, z, &[pos], &[neg], 1.0).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert_relative_eq!(g.value(loss).item(), expect, max_relative = 1e-12);
        assert_relative_eq!(
            mkcl_from_cosines(&[1.0], &[0.0], 1.0).unwrap(),
            expect,
            max_relative = 1e-15
        );
    }

    #[test]
    fn graph_form_matches_scalar_form_on_random_configs() {
        let mut r = crate::rng::rng(41, &[0]);
        for _ in 0..30 {
            let d = r.random_range(2..6);
            let np = r.random_range(1..4);
            let nn = r.random_range(1..5);
            let tau = r.random_range(0.2..2.0);
            let mut g = Graph::new();
            let zv: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let z = vec_leaf(&mut g, &zv);
            let mut pos = Vec::new();
            let mut pos_cos = Vec::new();
            let make = |r: &mut rand_chacha::ChaCha8Rng, g: &mut Graph| {
                let uv: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
                let nz = zv.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nu = uv.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dot: f64 = zv.iter().zip(&uv).map(|(a, b)| a * b).sum();
                (vec_leaf(g, &uv), dot / (nz * nu))
            };
            for _ in 0..np {
                let (n, c) = make(&mut r, &mut g);
                pos.push(n);
                pos_cos.push(c);
            }
            let mut neg = Vec::new();
            let mut neg_cos = Vec::new();
            for _ in 0..nn {
                let (n, c) = make(&mut r, &mut g);
                neg.push(n);
                neg_cos.push(c);
            }
            let loss = mkcl_loss(&mut g, z, &pos, &neg, tau).unwrap();
            let reference = mkcl_from_cosines(&pos_cos, &neg_cos, tau).unwrap();
            assert_relative_eq!(g.value(loss).item(), reference, max_relative = 1e-10);
            assert!(g.value(loss).item() >= 0.0);
        }
    }

    #[test]
    fn empty_negative_set_gives_zero() {
        let mut g = Graph::new();
        let z = vec_leaf(&mut g, &[1.0, 2.0]);
        let pos = vec_leaf(&mut g, &[0.5, 0.5]);
        let loss = mkcl_loss(&mut g, z, &[pos], &[], 0.7).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        assert_eq!(mkcl_from_cosines(&[0.3], &[], 0.7).unwrap(), 0.0);
    }

    #[test]
    fn scaling_the_feature_leaves_the_loss_unchanged() {
        let mut g = Graph::new();
        let z1 = vec_leaf(&mut g, &[0.3, -0.8, 0.5]);
        let z2 = vec_leaf(&mut g, &[0.3 * 17.0, -0.8 * 17.0, 0.5 * 17.0]);
        let pos = vec_leaf(&mut g, &[1.0, 0.0, 0.0]);
        let neg = vec_leaf(&mut g, &[0.0, 1.0, 0.0]);
        let l1 = mkcl_loss(&mut g, z1, &[pos], &[neg], 0.5).unwrap();
        let l2 = mkcl_loss(&mut g, z2, &[pos], &[neg], 0.5).unwrap();
        assert_relative_eq!(g.value(l1).item(), g.value(l2).item(), max_relative = 1e-12);
    }

    #[test]
    fn monotone_in_positive_and_negative_cosines() {
        let mut r = crate::rng::rng(41, &[1]);
        for _ in 0..40 {
            let tau = r.random_range(0.2..2.0);
            let pos: Vec<f64> = (0..r.random_range(1..4))
                .map(|_| r.random_range(-0.9..0.9))
                .collect();
            let neg: Vec<f64> = (0..r.random_range(1..4))
                .map(|_| r.random_range(-0.9..0.9))
                .collect();
            let base = mkcl_from_cosines(&pos, &neg, tau).unwrap();
            let mut pos_up = pos.clone();
            pos_up[0] += 0.05;
            assert!(mkcl_from_cosines(&pos_up, &neg, tau).unwrap() < base);
            let mut neg_up = neg.clone();
            neg_up[0] += 0.05;
            assert!(mkcl_from_cosines(&pos, &neg_up, tau).unwrap() > base);
        }
    }

    #[test]
    fn gradients_reach_the_feature_but_not_the_prototypes() {
        let mut g = Graph::new();
        let z = vec_leaf(&mut g, &[0.4, 0.6]);
        let pos = vec_leaf(&mut g, &[1.0, 0.1]);
        let neg = vec_leaf(&mut g, &[-0.3, 0.9]);
        let loss = mkcl_loss(&mut g, z, &[pos], &[neg], 1.0).unwrap();
        let grads = g.backward(loss, &[z, pos, neg]);
        assert!(grads[0].is_some());
        assert!(grads[1].is_none());
        assert!(grads[2].is_none());
    }

    #[test]
    fn batch_loss_is_the_mean_of_row_losses() {
        let mut g = Graph::new();
        let feats = g.leaf(Tensor::new(
            vec![2, 3],
            vec![0.2, -0.4, 0.9, -0.7, 0.1, 0.3],
        ));
        let pos = vec_leaf(&mut g, &[1.0, 0.0, 0.0]);
        let neg = vec_leaf(&mut g, &[0.0, 0.0, 1.0]);
        let batch = mkcl_batch_loss(&mut g, feats, &[pos], &[neg], 0.8).unwrap();
        let r0 = g.gather_rows(feats, Rc::new(vec![0]));
        let r1 = g.gather_rows(feats, Rc::new(vec![1]));
        let l0 = mkcl_loss(&mut g, r0, &[pos], &[neg], 0.8).unwrap();
        let l1 = mkcl_loss(&mut g, r1, &[pos], &[neg], 0.8).unwrap();
        let expect = 0.5 * (g.value(l0).item() + g.value(l1).item());
        assert_relative_eq!(g.value(batch).item(), expect, max_relative = 1e-12);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let mut g = Graph::new();
        let z = vec_leaf(&mut g, &[1.0]);
        let neg = vec_leaf(&mut g, &[1.0]);
        assert!(mkcl_loss(&mut g, z, &[], &[neg], 1.0).is_err());
        assert!(mkcl_loss(&mut g, z, &[neg], &[neg], 0.0).is_err());
        assert!(mkcl_from_cosines(&[], &[0.0], 1.0).is_err());
    }
}
