//! Non-IID client data partitioning via per-class Dirichlet draws.
//!
//! For every class, proportions over clients are drawn from Dirichlet(sigma)
//! (sampled as normalized Gamma(sigma, 1) variates) and converted to exact
//! counts with the largest-remainder method, so each class's samples are
//! covered disjointly. Smaller sigma concentrates each class on fewer
//! clients.

use crate::error::{Error, Result};
use crate::groups::ClientId;
use crate::rng::{self, domain};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Sample-index assignment for one task.
pub type PartitionFragment = BTreeMap<ClientId, Vec<usize>>;

/// Accumulated assignment across tasks.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ClientPartition {
    pub sigma: f64,
    pub assignment: BTreeMap<(usize, ClientId), Vec<usize>>,
}

impl ClientPartition {
    pub fn new(sigma: f64) -> Self {
        ClientPartition {
            sigma,
            assignment: BTreeMap::new(),
        }
    }

    pub fn insert_task(&mut self, task: usize, fragment: PartitionFragment) {
        for (client, idxs) in fragment {
            self.assignment.insert((task, client), idxs);
        }
    }

    pub fn of(&self, task: usize, client: ClientId) -> &[usize] {
        self.assignment
            .get(&(task, client))
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }
}

/// Proportions to integer counts summing exactly to `total`, by largest
/// remainder; ties go to the lower index.
fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..total.saturating_sub(assigned) {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

/// Partition one task's samples across `clients`. `samples` pairs a global
/// sample index with its class id. The result is a disjoint cover of the
/// input indices.
pub fn dirichlet_partition(
    samples: &[(usize, usize)],
    clients: &[ClientId],
    sigma: f64,
    seed: u64,
) -> Result<PartitionFragment> {
    if clients.is_empty() {
        return Err(Error::invalid("clients", "need at least one client"));
    }
    if sigma <= 0.0 {
        return Err(Error::invalid("sigma", "must be positive"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(idx, class) in samples {
        by_class.entry(class).or_default().push(idx);
    }
    let mut fragment: PartitionFragment =
        clients.iter().map(|&c| (c, Vec::new())).collect();
    let gamma = Gamma::new(sigma, 1.0).map_err(|e| Error::invalid("sigma", e.to_string()))?;
    for (&class, idxs) in &by_class {
        let mut r = rng::rng(seed, &[domain::PARTITION, class as u64]);
        let draws: Vec<f64> = (0..clients.len()).map(|_| gamma.sample(&mut r)).collect();
        let sum: f64 = draws.iter().sum();
        let props: Vec<f64> = if sum > 0.0 && sum.is_finite() {
            draws.iter().map(|d| d / sum).collect()
        } else {
            // Vanishingly unlikely at sane sigma; fall back to uniform.
            vec![1.0 / clients.len() as f64; clients.len()]
        };
        let counts = largest_remainder(&props, idxs.len());
        // Hand out this class's samples contiguously in a seeded order.
        let mut shuffled = idxs.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, r.random_range(0..=i));
        }
        let mut cursor = 0;
        for (client, &n) in clients.iter().zip(&counts) {
            fragment
                .get_mut(client)
                .unwrap()
                .extend_from_slice(&shuffled[cursor..cursor + n]);
            cursor += n;
        }
    }
    Ok(fragment)
}

/// Mean over clients of the Shannon entropy (nats) of each client's class
/// distribution; clients with no samples are skipped.
pub fn mean_client_entropy(fragment: &PartitionFragment, labels: &BTreeMap<usize, usize>) -> f64 {
    let mut entropies = Vec::new();
    for idxs in fragment.values() {
        if idxs.is_empty() {
            continue;
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for idx in idxs {
            *counts.entry(labels[idx]).or_insert(0) += 1;
        }
        let n = idxs.len() as f64;
        let h: f64 = counts
            .values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum();
        entropies.push(h);
    }
    if entropies.is_empty() {
        0.0
    } else {
        entropies.iter().sum::<f64>() / entropies.len() as f64
    }
}
