//! Teacher-student distillation loss.
//!
//! Total loss is CE(student, labels) plus lambda * T^2 * KL(p_T || p_S),
//! where both distributions are temperature-softened softmaxes over the
//! old-class logit columns only. The teacher side is wrapped in a stop
//! gradient so backward never reaches teacher parameters.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};

/// Distillation hyperparameters. `old_classes` is the width of the logit
/// slice the teacher is trusted on; zero disables the KD term entirely.
#[derive(Debug, Clone, Copy)]
pub struct KdConfig {
    pub lambda: f64,
    pub temperature: f64,
    pub old_classes: usize,
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda", "must be finite and nonnegative"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature", "must be positive"));
        }
        Ok(())
    }
}

/// Mean KL(p_T || p_S) over the batch with temperature-softened softmaxes
/// over the first `old_classes` columns. Returns a scalar node.
pub fn soft_kl(
    g: &mut Graph,
    student_logits: NodeId,
    teacher_logits: NodeId,
    cfg: &KdConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let cols = g.value(student_logits).cols();
    if g.value(teacher_logits).cols() < cfg.old_classes || cols < cfg.old_classes {
        return Err(Error::invalid(
            "old_classes",
            "wider than the provided logits",
        ));
    }
    if cfg.old_classes == 0 {
        return Ok(g.scalar_leaf(0.0));
    }
    let inv_t = 1.0 / cfg.temperature;
    let t_old = g.slice_cols(teacher_logits, 0, cfg.old_classes);
    let t_old = g.stop_grad(t_old);
    let s_old = g.slice_cols(student_logits, 0, cfg.old_classes);
    let t_scaled = g.scale(t_old, inv_t);
    let s_scaled = g.scale(s_old, inv_t);
    let log_p_t = g.log_softmax_rows(t_scaled);
    let log_p_s = g.log_softmax_rows(s_scaled);
    let p_t = g.exp(log_p_t);
    let diff = g.sub(log_p_t, log_p_s);
    let terms = g.mul(p_t, diff);
    let per_row = g.row_sum(terms);
    Ok(g.mean_all(per_row))
}

/// CE plus the weighted soft-KL term.
pub fn kd_loss(
    g: &mut Graph,
    student_logits: NodeId,
    teacher_logits: NodeId,
    labels: &[usize],
    cfg: &KdConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let ce = g.cross_entropy_mean(student_logits, labels);
    if cfg.old_classes == 0 || cfg.lambda == 0.0 {
        return Ok(ce);
    }
    let kl = soft_kl(g, student_logits, teacher_logits, cfg)?;
    let weighted = g.scale(kl, cfg.lambda * cfg.temperature * cfg.temperature);
    Ok(g.add(ce, weighted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_relative_eq;

    fn logits(vals: &[f64], cols: usize) -> Tensor {
        Tensor::new(vec![vals.len() / cols, cols], vals.to_vec())
    }

    #[test]
    fn mirrored_two_logit_kl_has_closed_form() {
        // For teacher (a, 0) and student (0, a) at T=1 the KL collapses to
        // a * tanh(a / 2); a = 2 gives 2 * tanh(1).
        let mut g = Graph::new();
        let s = g.leaf(logits(&[0.0, 2.0], 2));
        let t = g.leaf(logits(&[2.0, 0.0], 2));
        let cfg = KdConfig {
            lambda: 1.0,
            temperature: 1.0,
            old_classes: 2,
        };
        let kl = soft_kl(&mut g, s, t, &cfg).unwrap();
        assert_relative_eq!(g.value(kl).item(), 2.0 * 1.0f64.tanh(), max_relative = 1e-12);
    }

    #[test]
    fn temperature_softens_and_reweights() {
        // T = 2 halves the mirrored logits, so KL = 1 * tanh(1/2); the loss
        // adds it back scaled by lambda * T^2.
        let mut g = Graph::new();
        let s = g.leaf(logits(&[0.0, 2.0], 2));
        let t = g.leaf(logits(&[2.0, 0.0], 2));
        let cfg = KdConfig {
            lambda: 3.0,
            temperature: 2.0,
            old_classes: 2,
        };
        let kl = soft_kl(&mut g, s, t, &cfg).unwrap();
        assert_relative_eq!(g.value(kl).item(), 0.5f64.tanh(), max_relative = 1e-12);
        let loss = kd_loss(&mut g, s, t, &[1], &cfg).unwrap();
        let ce = -((2.0f64).exp() / (1.0 + (2.0f64).exp())).ln();
        assert_relative_eq!(
            g.value(loss).item(),
            ce + 12.0 * 0.5f64.tanh(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn kl_is_zero_when_student_matches_teacher() {
        let mut g = Graph::new();
        let s = g.leaf(logits(&[0.3, -1.2, 0.9, 2.0, 0.0, -0.5], 3));
        let t = g.leaf(logits(&[0.3, -1.2, 0.9, 2.0, 0.0, -0.5], 3));
        let cfg = KdConfig {
            lambda: 1.0,
            temperature: 2.0,
            old_classes: 3,
        };
        let kl = soft_kl(&mut g, s, t, &cfg).unwrap();
        assert!(g.value(kl).item().abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_on_random_logits() {
        use rand::Rng;
        let mut r = crate::rng::rng(11, &[0]);
        for _ in 0..50 {
            let n = r.random_range(1..5);
            let c = r.random_range(1..6);
            let mk = |r: &mut rand_chacha::ChaCha8Rng| {
                let v: Vec<f64> = (0..n * c).map(|_| r.random_range(-3.0..3.0)).collect();
                logits(&v, c)
            };
            let mut g = Graph::new();
            let sv = mk(&mut r);
            let tv = mk(&mut r);
            let s = g.leaf(sv);
            let t = g.leaf(tv);
            let cfg = KdConfig {
                lambda: 1.0,
                temperature: r.random_range(0.5..4.0),
                old_classes: c,
            };
            let kl = soft_kl(&mut g, s, t, &cfg).unwrap();
            assert!(g.value(kl).item() >= -1e-12);
        }
    }

    #[test]
    fn gradient_stops_at_teacher() {
        let mut g = Graph::new();
        let s = g.leaf(logits(&[0.0, 2.0, 1.0, -1.0], 4));
        let t = g.leaf(logits(&[2.0, 0.0, -1.0, 1.0], 4));
        let cfg = KdConfig {
            lambda: 1.0,
            temperature: 1.0,
            old_classes: 2,
        };
        let loss = kd_loss(&mut g, s, t, &[3], &cfg).unwrap();
        let grads = g.backward(loss, &[s, t]);
        assert!(grads[0].is_some(), "student gradient must flow");
        assert!(grads[1].is_none(), "teacher gradient must be cut");
    }

    #[test]
    fn disabled_kd_reduces_to_cross_entropy() {
        let mut g = Graph::new();
        let s = g.leaf(logits(&[0.5, -0.5, 1.5], 3));
        let t = g.leaf(logits(&[9.0, 9.0, 9.0], 3));
        let ce_only = g.cross_entropy_mean(s, &[2]);
        for cfg in [
            KdConfig { lambda: 0.0, temperature: 2.0, old_classes: 3 },
            KdConfig { lambda: 3.0, temperature: 2.0, old_classes: 0 },
        ] {
            let loss = kd_loss(&mut g, s, t, &[2], &cfg).unwrap();
            assert_relative_eq!(g.value(loss).item(), g.value(ce_only).item());
        }
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let bad_t = KdConfig { lambda: 1.0, temperature: 0.0, old_classes: 1 };
        assert!(bad_t.validate().is_err());
        let bad_l = KdConfig { lambda: -1.0, temperature: 1.0, old_classes: 1 };
        assert!(bad_l.validate().is_err());
        let mut g = Graph::new();
        let s = g.leaf(logits(&[0.0, 1.0], 2));
        let t = g.leaf(logits(&[0.0, 1.0], 2));
        let wide = KdConfig { lambda: 1.0, temperature: 1.0, old_classes: 3 };
        assert!(soft_kl(&mut g, s, t, &wide).is_err());
    }
}
