//! Server-side parameter aggregation.
//!
//! FedAvg is a convex combination over client parameter vectors weighted by
//! local sample counts. VAE aggregation is the same operation restricted to
//! the clients that actually trained the module this round.

use crate::error::{Error, Result};
use crate::model::ParamVector;

/// Sample-count weighted average of client parameters. Every update must
/// share one architecture; a zero total weight cannot be averaged.
pub fn fedavg(updates: &[(&ParamVector, usize)]) -> Result<ParamVector> {
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if updates.is_empty() || total == 0 {
        return Err(Error::EmptyAggregation);
    }
    let mut out = updates[0].0.zeros_like();
    for (p, n) in updates {
        out.check_same_architecture(p)?;
        out.axpy(*n as f64 / total as f64, p);
    }
    if !out.all_finite() {
        return Err(Error::invalid("updates", "non-finite aggregate"));
    }
    Ok(out)
}

/// FedAvg over the flagged subset; clients with `false` contribute nothing.
/// Used for modules only a subgroup trains in a given round.
pub fn masked_fedavg(updates: &[(&ParamVector, usize, bool)]) -> Result<ParamVector> {
    let kept: Vec<(&ParamVector, usize)> = updates
        .iter()
        .filter(|(_, _, active)| *active)
        .map(|(p, n, _)| (*p, *n))
        .collect();
    fedavg(&kept)
}
