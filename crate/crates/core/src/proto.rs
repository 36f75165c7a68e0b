//! Feature banks and class prototypes.
//!
//! A bank collects per-class feature vectors (real or generated); prototypes
//! are the first-neighbor cluster centroids of each class's bank, giving a
//! class several representatives when its features are multi-modal.

use crate::error::{Error, Result};
use crate::finch::{cluster_means, finch_cluster, Metric};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Per-class feature vectors sharing one dimension, all finite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureBank {
    dim: usize,
    features: BTreeMap<usize, Vec<Tensor>>,
}

impl FeatureBank {
    pub fn new(dim: usize) -> Self {
        FeatureBank {
            dim,
            features: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> Vec<usize> {
        self.features.keys().copied().collect()
    }

    pub fn of(&self, class: usize) -> &[Tensor] {
        self.features.get(&class).map_or(&[], |v| v.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn push(&mut self, class: usize, feature: Tensor) -> Result<()> {
        feature.check_shape(&[1, self.dim])?;
        if !feature.all_finite() {
            return Err(Error::invalid("feature", "non-finite entries"));
        }
        self.features.entry(class).or_default().push(feature);
        Ok(())
    }

    /// Append every row of a feature matrix under one class.
    pub fn push_rows(&mut self, class: usize, rows: Tensor) -> Result<()> {
        if rows.cols() != self.dim {
            return Err(Error::ShapeMismatch {
                expected: format!("[*, {}]", self.dim),
                got: format!("{:?}", rows.shape()),
            });
        }
        for i in 0..rows.rows() {
            self.push(class, Tensor::new(vec![1, self.dim], rows.row(i).to_vec()))?;
        }
        Ok(())
    }

    /// Class features stacked into one `[n, dim]` matrix.
    pub fn stacked(&self, class: usize) -> Option<Tensor> {
        let list = self.features.get(&class)?;
        let data: Vec<f64> = list.iter().flat_map(|t| t.data().iter().copied()).collect();
        Some(Tensor::new(vec![list.len(), self.dim], data))
    }
}

/// Cluster centroids per class; `of(k).len()` is the class's cluster count.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PrototypeSet {
    per_class: BTreeMap<usize, Vec<Tensor>>,
}

impl PrototypeSet {
    pub fn classes(&self) -> Vec<usize> {
        self.per_class.keys().copied().collect()
    }

    pub fn of(&self, class: usize) -> &[Tensor] {
        self.per_class.get(&class).map_or(&[], |v| v.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.per_class.is_empty()
    }

    pub fn total(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    /// Positives (class `k`) and negatives (every other class), in class
    /// order, for the contrastive term.
    pub fn split(&self, k: usize) -> (Vec<&Tensor>, Vec<&Tensor>) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (&c, protos) in &self.per_class {
            if c == k {
                pos.extend(protos.iter());
            } else {
                neg.extend(protos.iter());
            }
        }
        (pos, neg)
    }
}

/// First-neighbor clusters per class, each reduced to its centroid.
pub fn build_prototypes(bank: &FeatureBank) -> Result<PrototypeSet> {
    let mut per_class = BTreeMap::new();
    for class in bank.classes() {
        let stacked = bank
            .stacked(class)
            .ok_or_else(|| Error::invalid("bank", "class without features"))?;
        let labels = finch_cluster(&stacked, Metric::Cosine)?;
        per_class.insert(class, cluster_means(&stacked, &labels));
    }
    Ok(PrototypeSet { per_class })
}
