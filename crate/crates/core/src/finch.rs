//! First-neighbor clustering.
//!
//! One pass: link every point to its nearest neighbor, take connected
//! components of the undirected link graph as clusters. No recursive merging.
//! Labels are compacted in order of first appearance, so label 0 is always
//! point 0's cluster.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Neighbor similarity. Cosine is the production metric; Euclidean exists for
/// low-dimensional data where all points share a direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Cosine,
    Euclidean,
}

/// Cosine similarity with the degenerate-vector convention used everywhere in
/// this crate: two zero vectors are identical (1), one zero vector is
/// orthogonal to anything (0).
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, i: usize) -> usize {
        let mut root = i;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = i;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Index of point `i`'s nearest neighbor, ties going to the lowest index.
fn first_neighbor(rows: &[&[f64]], i: usize, metric: Metric) -> usize {
    let mut best = usize::MAX;
    let mut best_score = f64::NEG_INFINITY;
    for (j, other) in rows.iter().enumerate() {
        if j == i {
            continue;
        }
        let score = match metric {
            Metric::Cosine => cosine(rows[i], other),
            Metric::Euclidean => -sq_dist(rows[i], other),
        };
        if score > best_score {
            best_score = score;
            best = j;
        }
    }
    best
}

/// Cluster the rows of `features` and return one compacted label per row.
pub fn finch_cluster(features: &Tensor, metric: Metric) -> Result<Vec<usize>> {
    let n = features.rows();
    if n == 0 {
        return Err(Error::invalid("features", "need at least one vector"));
    }
    if n == 1 {
        return Ok(vec![0]);
    }
    let rows: Vec<&[f64]> = (0..n).map(|i| features.row(i)).collect();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        uf.union(i, first_neighbor(&rows, i, metric));
    }
    let mut labels = vec![usize::MAX; n];
    let mut next = 0;
    let mut label_of_root = std::collections::BTreeMap::new();
    for (i, label) in labels.iter_mut().enumerate() {
        let root = uf.find(i);
        *label = *label_of_root.entry(root).or_insert_with(|| {
            let l = next;
            next += 1;
            l
        });
    }
    Ok(labels)
}

/// Mean of each cluster's members, indexed by compacted label.
pub fn cluster_means(features: &Tensor, labels: &[usize]) -> Vec<Tensor> {
    let d = features.cols();
    let count = labels.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![vec![0.0; d]; count];
    let mut sizes = vec![0usize; count];
    for (i, &l) in labels.iter().enumerate() {
        for (s, v) in sums[l].iter_mut().zip(features.row(i)) {
            *s += v;
        }
        sizes[l] += 1;
    }
    sums.into_iter()
        .zip(sizes)
        .map(|(mut s, n)| {
            for v in &mut s {
                *v /= n as f64;
            }
            Tensor::new(vec![1, d], s)
        })
        .collect()
}
