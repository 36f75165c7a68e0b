//! Shared variational autoencoder over backbone features.
//!
//! Encodes a feature vector to a diagonal Gaussian latent and decodes the
//! reparameterized sample concatenated with a learned class embedding back to
//! feature space. Class embeddings are seeded from (embed seed, class id)
//! alone, so every client registers bit-identical embeddings for a class and
//! plain FedAvg over the flattened parameter vector stays well defined.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::rng::{self, domain::{VAE_EMBED, VAE_INIT, VAE_NOISE}};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VaeConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    /// Disentanglement pressure on the KL term.
    pub beta: f64,
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("hidden", self.hidden),
            ("latent_dim", self.latent_dim),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("beta", "must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Reconstruction and KL terms of the last training step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ElboReport {
    pub recon_mse: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SharedVae {
    cfg: VaeConfig,
    params: ParamVector,
    embeddings: BTreeMap<usize, Tensor>,
    embed_seed: u64,
}

fn gaussian(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape, data)
}

impl SharedVae {
    pub fn new(cfg: VaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::rng(seed, &[VAE_INIT]);
        let (f, h, l, e) = (cfg.feature_dim, cfg.hidden, cfg.latent_dim, cfg.embed_dim);
        let lin = |r: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize| {
            gaussian(r, vec![rows, cols], (1.0 / rows as f64).sqrt())
        };
        let params = ParamVector::new(vec![
            ("enc.w1".into(), lin(&mut r, f, h)),
            ("enc.b1".into(), Tensor::zeros(vec![1, h])),
            ("enc.mu_w".into(), lin(&mut r, h, l)),
            ("enc.mu_b".into(), Tensor::zeros(vec![1, l])),
            ("enc.lv_w".into(), lin(&mut r, h, l)),
            ("enc.lv_b".into(), Tensor::zeros(vec![1, l])),
            ("dec.w1".into(), lin(&mut r, l + e, h)),
            ("dec.b1".into(), Tensor::zeros(vec![1, h])),
            ("dec.w2".into(), lin(&mut r, h, f)),
            ("dec.b2".into(), Tensor::zeros(vec![1, f])),
        ]);
        Ok(SharedVae {
            cfg,
            params,
            embeddings: BTreeMap::new(),
            embed_seed: seed,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    /// Classes with a registered conditioning embedding, ascending.
    pub fn classes(&self) -> Vec<usize> {
        self.embeddings.keys().copied().collect()
    }

    pub fn knows_class(&self, class: usize) -> bool {
        self.embeddings.contains_key(&class)
    }

    /// Register a class embedding; a no-op when already present. Seeding by
    /// (embed seed, class) keeps registration order irrelevant and identical
    /// across clients sharing the seed.
    pub fn register_class(&mut self, class: usize) {
        let e = self.cfg.embed_dim;
        let seed = self.embed_seed;
        self.embeddings.entry(class).or_insert_with(|| {
            let mut r = rng::rng(seed, &[VAE_EMBED, class as u64]);
            gaussian(&mut r, vec![1, e], (1.0 / e as f64).sqrt())
        });
    }

    /// Flatten network parameters plus embeddings for aggregation. Embedding
    /// entries are named `emb.<class>`.
    pub fn to_param_vector(&self) -> ParamVector {
        let mut entries = self.params.to_named_tensors();
        for (class, emb) in &self.embeddings {
            entries.push((format!("emb.{}", class), emb.clone()));
        }
        ParamVector::new(entries)
    }

    /// Inverse of `to_param_vector`; the network layout must match `cfg`.
    pub fn apply_param_vector(&mut self, pv: &ParamVector) -> Result<()> {
        let mut params = Vec::new();
        let mut embeddings = BTreeMap::new();
        for (name, t) in pv.iter() {
            if let Some(class) = name.strip_prefix("emb.") {
                let class: usize = class
                    .parse()
                    .map_err(|_| Error::invalid("params", format!("bad embedding name {}", name)))?;
                t.check_shape(&[1, self.cfg.embed_dim])?;
                embeddings.insert(class, t.clone());
            } else {
                params.push((name.to_string(), t.clone()));
            }
        }
        let params = ParamVector::new(params);
        self.params.check_same_architecture(&params)?;
        self.params = params;
        self.embeddings = embeddings;
        Ok(())
    }

    fn affine(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = g.matmul(x, w);
        let rows = g.value(xw).rows();
        let bb = g.broadcast_row(b, rows);
        g.add(xw, bb)
    }

    /// One SGD step on recon MSE + beta * KL over a labeled feature batch.
    /// Unseen labels are auto-registered. `rng` drives the reparameterization
    /// noise only.
    pub fn train_step(
        &mut self,
        features: &Tensor,
        labels: &[usize],
        lr: f64,
        rng: &mut impl Rng,
    ) -> Result<ElboReport> {
        let m = features.rows();
        if m == 0 || labels.len() != m {
            return Err(Error::invalid("features", "batch and labels must align"));
        }
        features.check_shape(&[m, self.cfg.feature_dim])?;
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid("lr", "must be finite and nonnegative"));
        }
        for &c in labels {
            self.register_class(c);
        }
        let noise = gaussian(rng, vec![m, self.cfg.latent_dim], 1.0);

        let mut g = Graph::new();
        let x = g.leaf(features.clone());
        let x = g.stop_grad(x);
        let names: Vec<String> = self.params.names().map(str::to_string).collect();
        let mut nodes = BTreeMap::new();
        for name in &names {
            nodes.insert(name.clone(), g.leaf(self.params.get(name).unwrap().clone()));
        }
        let n = |nodes: &BTreeMap<String, NodeId>, s: &str| nodes[s];

        let h1 = Self::affine(&mut g, x, n(&nodes, "enc.w1"), n(&nodes, "enc.b1"));
        let h1 = g.tanh(h1);
        let mu = Self::affine(&mut g, h1, n(&nodes, "enc.mu_w"), n(&nodes, "enc.mu_b"));
        let lv = Self::affine(&mut g, h1, n(&nodes, "enc.lv_w"), n(&nodes, "enc.lv_b"));

        let eps = g.leaf(noise);
        let eps = g.stop_grad(eps);
        let half_lv = g.scale(lv, 0.5);
        let std = g.exp(half_lv);
        let scaled = g.mul(std, eps);
        let z = g.add(mu, scaled);

        // Embedding matrix rows follow ascending class order; labels index it.
        let classes = self.classes();
        let class_pos: BTreeMap<usize, usize> =
            classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let emb_nodes: Vec<NodeId> = classes
            .iter()
            .map(|c| g.leaf(self.embeddings[c].clone()))
            .collect();
        let mut emb_matrix = emb_nodes[0];
        for &e in &emb_nodes[1..] {
            emb_matrix = g.concat_rows(emb_matrix, e);
        }
        let idx: Vec<usize> = labels.iter().map(|c| class_pos[c]).collect();
        let emb_batch = g.gather_rows(emb_matrix, Rc::new(idx));

        let zc = g.concat_cols(z, emb_batch);
        let h2 = Self::affine(&mut g, zc, n(&nodes, "dec.w1"), n(&nodes, "dec.b1"));
        let h2 = g.tanh(h2);
        let xhat = Self::affine(&mut g, h2, n(&nodes, "dec.w2"), n(&nodes, "dec.b2"));

        let recon = g.mse(xhat, x);
        // KL(q || N(0, I)) = -1/2 sum(1 + lv - mu^2 - e^lv), mean over batch.
        let mu2 = g.mul(mu, mu);
        let elv = g.exp(lv);
        let t = g.add_scalar(lv, 1.0);
        let t = g.sub(t, mu2);
        let t = g.sub(t, elv);
        let per_row = g.row_sum(t);
        let kl_sum = g.mean_all(per_row);
        let kl = g.scale(kl_sum, -0.5);
        let kl_term = g.scale(kl, self.cfg.beta);
        let loss = g.add(recon, kl_term);

        let report = ElboReport {
            recon_mse: g.value(recon).item(),
            kl: g.value(kl).item(),
        };
        if report.kl < -1e-9 {
            return Err(Error::invalid("kl", "negative divergence"));
        }

        let mut targets: Vec<NodeId> = names.iter().map(|s| nodes[s]).collect();
        targets.extend(&emb_nodes);
        let grads = g.backward(loss, &targets);
        for (name, grad) in names.iter().zip(&grads[..names.len()]) {
            if let Some(gn) = grad {
                let gt = g.value(*gn).clone();
                let p = self.params.get_mut(name).unwrap();
                p.axpy(-lr, &gt);
            }
        }
        for (class, grad) in classes.iter().zip(&grads[names.len()..]) {
            if let Some(gn) = grad {
                let gt = g.value(*gn).clone();
                self.embeddings.get_mut(class).unwrap().axpy(-lr, &gt);
            }
        }
        if !self.params.all_finite() {
            return Err(Error::invalid("params", "non-finite after update"));
        }
        Ok(report)
    }

    /// Decode `n` standard-normal latents with the class's embedding.
    /// Deterministic in (seed, class, n-prefix).
    pub fn generate(&self, class: usize, n: usize, seed: u64) -> Result<Tensor> {
        if !self.knows_class(class) {
            return Err(Error::UnknownClass { class });
        }
        let (f, l) = (self.cfg.feature_dim, self.cfg.latent_dim);
        if n == 0 {
            return Ok(Tensor::zeros(vec![0, f]));
        }
        let mut r = rng::rng(seed, &[VAE_NOISE, class as u64]);
        let z = gaussian(&mut r, vec![n, l], 1.0);
        let emb = &self.embeddings[&class];
        let mut zc = Tensor::zeros(vec![n, l + self.cfg.embed_dim]);
        for i in 0..n {
            let row = zc.row_mut(i);
            row[..l].copy_from_slice(z.row(i));
            row[l..].copy_from_slice(emb.row(0));
        }
        let w1 = self.params.get("dec.w1").unwrap();
        let b1 = self.params.get("dec.b1").unwrap();
        let w2 = self.params.get("dec.w2").unwrap();
        let b2 = self.params.get("dec.b2").unwrap();
        let mut h = zc.matmul(w1);
        for i in 0..n {
            for (v, b) in h.row_mut(i).iter_mut().zip(b1.row(0)) {
                *v = (*v + b).tanh();
            }
        }
        let mut out = h.matmul(w2);
        for i in 0..n {
            for (v, b) in out.row_mut(i).iter_mut().zip(b2.row(0)) {
                *v += b;
            }
        }
        debug_assert!(out.all_finite());
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> VaeConfig {
        VaeConfig {
            feature_dim: 6,
            hidden: 8,
            latent_dim: 3,
            embed_dim: 2,
            beta: 0.5,
        }
    }

    /// Two linearly separated class blobs in feature space.
    fn toy_batch(seed: u64) -> (Tensor, Vec<usize>) {
        let mut r = rng::rng(seed, &[99]);
        let m = 16;
        let mut data = Vec::with_capacity(m * 6);
        let mut labels = Vec::with_capacity(m);
        for i in 0..m {
            let class = i % 2;
            let center = if class == 0 { 0.8 } else { -0.8 };
            for _ in 0..6 {
                data.push(center + 0.1 * r.sample::<f64, _>(StandardNormal));
            }
            labels.push(class);
        }
        (Tensor::new(vec![m, 6], data), labels)
    }

    #[test]
    fn reconstruction_improves_with_training() {
        let mut vae = SharedVae::new(small_cfg(), 7).unwrap();
        let (x, y) = toy_batch(1);
        let mut noise = rng::rng(7, &[100]);
        let first = vae.train_step(&x, &y, 0.05, &mut noise).unwrap();
        let mut last = first;
        for _ in 0..199 {
            last = vae.train_step(&x, &y, 0.05, &mut noise).unwrap();
        }
        assert!(last.kl >= 0.0);
        assert!(
            last.recon_mse <= 0.7 * first.recon_mse,
            "recon {} -> {} fell short of a 30% reduction",
            first.recon_mse,
            last.recon_mse
        );
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut vae = SharedVae::new(small_cfg(), 7).unwrap();
        let before = vae.to_param_vector();
        let (x, y) = toy_batch(2);
        let mut noise = rng::rng(7, &[101]);
        vae.train_step(&x, &y, 0.0, &mut noise).unwrap();
        let after = vae.to_param_vector();
        for ((_, a), (_, b)) in before.iter().zip(after.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn kl_is_nonnegative_across_batches() {
        let mut vae = SharedVae::new(small_cfg(), 9).unwrap();
        let mut noise = rng::rng(9, &[102]);
        for s in 0..10 {
            let (x, y) = toy_batch(s);
            let report = vae.train_step(&x, &y, 0.02, &mut noise).unwrap();
            assert!(report.kl >= 0.0);
        }
    }

    #[test]
    fn generation_is_seeded_and_shaped() {
        let mut vae = SharedVae::new(small_cfg(), 11).unwrap();
        vae.register_class(4);
        let a = vae.generate(4, 5, 33).unwrap();
        let b = vae.generate(4, 5, 33).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows(), 5);
        assert_eq!(a.cols(), 6);
        assert!(a.all_finite());
        let c = vae.generate(4, 5, 34).unwrap();
        assert_ne!(a, c);
        assert_eq!(vae.generate(4, 0, 33).unwrap().rows(), 0);
        assert!(matches!(
            vae.generate(9, 3, 33),
            Err(Error::UnknownClass { class: 9 })
        ));
    }

    #[test]
    fn registration_order_does_not_change_embeddings() {
        let mut a = SharedVae::new(small_cfg(), 13).unwrap();
        a.register_class(2);
        a.register_class(5);
        let mut b = SharedVae::new(small_cfg(), 13).unwrap();
        b.register_class(5);
        b.register_class(2);
        assert_eq!(a.to_param_vector().get("emb.2"), b.to_param_vector().get("emb.2"));
        assert_eq!(a.to_param_vector().get("emb.5"), b.to_param_vector().get("emb.5"));
    }

    #[test]
    fn param_vector_roundtrip_preserves_state() {
        let mut vae = SharedVae::new(small_cfg(), 15).unwrap();
        let (x, y) = toy_batch(3);
        let mut noise = rng::rng(15, &[103]);
        vae.train_step(&x, &y, 0.05, &mut noise).unwrap();
        let pv = vae.to_param_vector();
        let mut other = SharedVae::new(small_cfg(), 999).unwrap();
        other.apply_param_vector(&pv).unwrap();
        assert_eq!(other.to_param_vector().to_named_tensors(), pv.to_named_tensors());
        let g1 = vae.generate(0, 3, 5).unwrap();
        let g2 = other.generate(0, 3, 5).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn embeddings_receive_gradient_updates() {
        let mut vae = SharedVae::new(small_cfg(), 17).unwrap();
        let (x, y) = toy_batch(4);
        let mut noise = rng::rng(17, &[104]);
        vae.train_step(&x, &y, 0.0, &mut noise).unwrap();
        let frozen = vae.to_param_vector().get("emb.0").unwrap().clone();
        vae.train_step(&x, &y, 0.1, &mut noise).unwrap();
        let moved = vae.to_param_vector().get("emb.0").unwrap().clone();
        assert_ne!(frozen, moved);
    }

    #[test]
    fn rejects_misaligned_batches() {
        let mut vae = SharedVae::new(small_cfg(), 19).unwrap();
        let x = Tensor::zeros(vec![2, 6]);
        let mut noise = rng::rng(19, &[105]);
        assert!(vae.train_step(&x, &[0], 0.1, &mut noise).is_err());
        assert!(vae
            .train_step(&Tensor::zeros(vec![0, 6]), &[], 0.1, &mut noise)
            .is_err());
    }
}
