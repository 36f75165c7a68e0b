//! Datasets, image batches, and origin tagging.
//!
//! Images are `[h*w, c]` row-major matrices; batches stack images into one
//! `[b*h*w, c]` matrix. Every image carries an [`Origin`] so the condensation
//! model's "real images only" rule can be enforced mechanically at the places
//! that update it.

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::tensor::{SpatialDims, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Spatial layout of the images in a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn rows_per_image(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self, batch: usize) -> SpatialDims {
        SpatialDims {
            batch,
            height: self.height,
            width: self.width,
        }
    }
}

/// Where an image tensor came from. Condensed exemplars are synthetic and must
/// never reach the condensation-model update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Real,
    Condensed,
}

#[derive(Debug, Clone)]
pub struct Sample {
    /// `[h*w, c]` pixel matrix.
    pub pixels: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub name: String,
    pub class_count: usize,
    pub shape: ImageShape,
    pub samples: Vec<Sample>,
}

impl DatasetSpec {
    pub fn new(
        name: String,
        class_count: usize,
        shape: ImageShape,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::invalid("class_count", "must be positive"));
        }
        let expected = vec![shape.rows_per_image(), shape.channels];
        let mut seen = vec![false; class_count];
        for s in &samples {
            if s.label >= class_count {
                return Err(Error::UnknownClass { class: s.label });
            }
            s.pixels.check_shape(&expected)?;
            seen[s.label] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(
                "samples",
                format!("class {} has no samples", missing),
            ));
        }
        Ok(DatasetSpec {
            name,
            class_count,
            shape,
            samples,
        })
    }

    /// Sample indices grouped by class, ascending.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.class_count];
        for (i, s) in self.samples.iter().enumerate() {
            by_class[s.label].push(i);
        }
        by_class
    }

    /// Deterministic per-class holdout split; the first `test_per_class`
    /// entries of each class's seeded shuffle go to the test set.
    pub fn split_holdout(&self, test_per_class: usize, seed: u64) -> Result<(DatasetSpec, DatasetSpec)> {
        let by_class = self.indices_by_class();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (class, idxs) in by_class.iter().enumerate() {
            if idxs.len() <= test_per_class {
                return Err(Error::invalid(
                    "test_per_class",
                    format!(
                        "class {} has {} samples, cannot hold out {}",
                        class,
                        idxs.len(),
                        test_per_class
                    ),
                ));
            }
            let perm = rng::permutation(idxs.len(), seed, &[domain::DATASET, 1, class as u64]);
            for (pos, &p) in perm.iter().enumerate() {
                let sample = self.samples[idxs[p]].clone();
                if pos < test_per_class {
                    test.push(sample);
                } else {
                    train.push(sample);
                }
            }
        }
        Ok((
            DatasetSpec::new(format!("{}-train", self.name), self.class_count, self.shape, train)?,
            DatasetSpec::new(format!("{}-test", self.name), self.class_count, self.shape, test)?,
        ))
    }
}

/// A stacked batch of images: pixels `[b*h*w, c]`, one label and origin per
/// image.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub pixels: Tensor,
    pub labels: Vec<usize>,
    pub origins: Vec<Origin>,
    pub shape: ImageShape,
}

impl ImageBatch {
    pub fn stack<'a>(
        shape: ImageShape,
        items: impl IntoIterator<Item = (&'a Tensor, usize, Origin)>,
    ) -> Self {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut origins = Vec::new();
        for (pixels, label, origin) in items {
            assert_eq!(
                pixels.shape(),
                &[shape.rows_per_image(), shape.channels],
                "image shape mismatch in batch"
            );
            data.extend_from_slice(pixels.data());
            labels.push(label);
            origins.push(origin);
        }
        let rows = labels.len() * shape.rows_per_image();
        ImageBatch {
            pixels: Tensor::new(vec![rows, shape.channels], data),
            labels,
            origins,
            shape,
        }
    }

    pub fn from_samples(shape: ImageShape, samples: &[&Sample]) -> Self {
        Self::stack(shape, samples.iter().map(|s| (&s.pixels, s.label, Origin::Real)))
    }

    /// `stack` for callers holding owned tensors.
    pub fn stack_owned(shape: ImageShape, items: Vec<(Tensor, usize, Origin)>) -> Self {
        Self::stack(shape, items.iter().map(|(t, l, o)| (t, *l, *o)))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> SpatialDims {
        self.shape.dims(self.len())
    }

    pub fn all_real(&self) -> bool {
        self.origins.iter().all(|o| *o == Origin::Real)
    }

    /// The single class label shared by every image, if there is one.
    pub fn uniform_label(&self) -> Option<usize> {
        let first = *self.labels.first()?;
        self.labels.iter().all(|&l| l == first).then_some(first)
    }
}

/// Deterministic Gaussian-blob image dataset. Each class has a fixed sign
/// pattern drawn from the seed alone, so train and test splits built with
/// different `split` tags share class structure but not noise.
pub fn synthetic_blobs(
    classes: usize,
    per_class: usize,
    shape: ImageShape,
    seed: u64,
    split: u64,
) -> Result<DatasetSpec> {
    noisy_blobs(classes, per_class, shape, 0.35, seed, split)
}

/// `synthetic_blobs` with an explicit noise scale; larger values blur the
/// class margins and make the stream genuinely forgettable.
pub fn noisy_blobs(
    classes: usize,
    per_class: usize,
    shape: ImageShape,
    noise: f64,
    seed: u64,
    split: u64,
) -> Result<DatasetSpec> {
    if classes == 0 || per_class == 0 {
        return Err(Error::invalid("classes/per_class", "must be positive"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::invalid("noise", "must be finite and nonnegative"));
    }
    let dim = shape.rows_per_image() * shape.channels;
    let mut samples = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let mut center_rng = rng::rng(seed, &[domain::DATASET, 2, class as u64]);
        let center: Vec<f64> = (0..dim)
            .map(|_| if center_rng.random::<bool>() { 0.75 } else { -0.75 })
            .collect();
        let mut noise_rng = rng::rng(seed, &[domain::DATASET, 3, split, class as u64]);
        for _ in 0..per_class {
            let data: Vec<f64> = center
                .iter()
                .map(|&c| {
                    let n: f64 = StandardNormal.sample(&mut noise_rng);
                    c + noise * n
                })
                .collect();
            samples.push(Sample {
                pixels: Tensor::new(vec![shape.rows_per_image(), shape.channels], data),
                label: class,
            });
        }
    }
    DatasetSpec::new(format!("blobs-{}x{}", classes, per_class), classes, shape, samples)
}

#[derive(Debug, Serialize, Deserialize)]
struct RawMeta {
    class_count: usize,
    height: usize,
    width: usize,
    channels: usize,
    dtype: String,
}

/// Load a raw-tensor dataset directory: `meta.json` plus one
/// `class_<id>.bin` per class holding concatenated H×W×C row-major u8 images.
/// Pixels are scaled to [0, 1].
pub fn load_raw_dir(dir: &Path) -> Result<DatasetSpec> {
    let meta_raw = std::fs::read_to_string(dir.join("meta.json"))?;
    let meta: RawMeta = serde_json::from_str(&meta_raw)?;
    if meta.dtype != "u8" {
        return Err(Error::Format(format!("unsupported dtype {:?}", meta.dtype)));
    }
    let shape = ImageShape {
        height: meta.height,
        width: meta.width,
        channels: meta.channels,
    };
    let image_bytes = meta.height * meta.width * meta.channels;
    let mut samples = Vec::new();
    for class in 0..meta.class_count {
        let path = dir.join(format!("class_{}.bin", class));
        let bytes = std::fs::read(&path)?;
        if bytes.is_empty() || bytes.len() % image_bytes != 0 {
            return Err(Error::Format(format!(
                "{}: {} bytes is not a positive multiple of {}",
                path.display(),
                bytes.len(),
                image_bytes
            )));
        }
        for chunk in bytes.chunks(image_bytes) {
            let data: Vec<f64> = chunk.iter().map(|&b| b as f64 / 255.0).collect();
            samples.push(Sample {
                pixels: Tensor::new(vec![shape.rows_per_image(), shape.channels], data),
                label: class,
            });
        }
    }
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "raw".to_string());
    DatasetSpec::new(name, meta.class_count, shape, samples)
}
