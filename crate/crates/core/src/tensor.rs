//! Dense row-major f64 tensors.
//!
//! All simulator math runs on these; shapes are 1-D or 2-D (image batches are
//! laid out as `[batch * height * width, channels]` row matrices so that
//! convolution reduces to an im2col gather plus a matmul).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-matrix");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix");
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape size mismatch"
        );
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// In-place `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "dot length mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Matrix product `self[m,k] x other[k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                other.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn check_shape(&self, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", expected),
                got: format!("{:?}", self.shape),
            });
        }
        Ok(())
    }
}

/// Spatial metadata for image batches stored as `[b*h*w, c]` matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialDims {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl SpatialDims {
    pub fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }
}

/// im2col for stride-1, zero-padded square kernels on `[b*h*w, c]` input.
/// Output is `[b*h*w, c*k*k]`; row `(b,i,j)` concatenates the k x k window
/// centred at `(i,j)` channel-minor.
pub fn im2col(input: &Tensor, dims: SpatialDims, k: usize, pad: usize) -> Tensor {
    let c = input.cols();
    assert_eq!(input.rows(), dims.rows(), "im2col row mismatch");
    let (h, w) = (dims.height as isize, dims.width as isize);
    let kk = (k * k) as usize;
    let mut out = vec![0.0; dims.rows() * c * kk];
    let data = input.data();
    for b in 0..dims.batch {
        let in_base = b * (h * w) as usize;
        for i in 0..h {
            for j in 0..w {
                let out_row = (in_base + (i * w + j) as usize) * c * kk;
                let mut patch = 0;
                for di in 0..k as isize {
                    for dj in 0..k as isize {
                        let si = i + di - pad as isize;
                        let sj = j + dj - pad as isize;
                        if si >= 0 && si < h && sj >= 0 && sj < w {
                            let src = (in_base + (si * w + sj) as usize) * c;
                            let dst = out_row + patch * c;
                            out[dst..dst + c].copy_from_slice(&data[src..src + c]);
                        }
                        patch += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![dims.rows(), c * kk], out)
}

/// Adjoint of [`im2col`]: scatter-add column gradients back to input positions.
pub fn col2im(cols: &Tensor, dims: SpatialDims, c: usize, k: usize, pad: usize) -> Tensor {
    let kk = k * k;
    assert_eq!(cols.cols(), c * kk, "col2im column mismatch");
    assert_eq!(cols.rows(), dims.rows(), "col2im row mismatch");
    let (h, w) = (dims.height as isize, dims.width as isize);
    let mut out = vec![0.0; dims.rows() * c];
    let data = cols.data();
    for b in 0..dims.batch {
        let base = b * (h * w) as usize;
        for i in 0..h {
            for j in 0..w {
                let col_row = (base + (i * w + j) as usize) * c * kk;
                let mut patch = 0;
                for di in 0..k as isize {
                    for dj in 0..k as isize {
                        let si = i + di - pad as isize;
                        let sj = j + dj - pad as isize;
                        if si >= 0 && si < h && sj >= 0 && sj < w {
                            let dst = (base + (si * w + sj) as usize) * c;
                            let src = col_row + patch * c;
                            for ch in 0..c {
                                out[dst + ch] += data[src + ch];
                            }
                        }
                        patch += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![dims.rows(), c], out)
}

/// 2x2 average pooling over the spatial rows of a `[b*h*w, c]` matrix.
pub fn avg_pool2(input: &Tensor, dims: SpatialDims) -> (Tensor, SpatialDims) {
    let c = input.cols();
    assert!(dims.height % 2 == 0 && dims.width % 2 == 0, "odd pooling dims");
    let out_dims = SpatialDims {
        batch: dims.batch,
        height: dims.height / 2,
        width: dims.width / 2,
    };
    let mut out = vec![0.0; out_dims.rows() * c];
    let data = input.data();
    let (h, w) = (dims.height, dims.width);
    for b in 0..dims.batch {
        let in_base = b * h * w;
        let out_base = b * out_dims.height * out_dims.width;
        for i in 0..out_dims.height {
            for j in 0..out_dims.width {
                let dst = (out_base + i * out_dims.width + j) * c;
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = (in_base + (2 * i + di) * w + (2 * j + dj)) * c;
                    for ch in 0..c {
                        out[dst + ch] += 0.25 * data[src + ch];
                    }
                }
            }
        }
    }
    (Tensor::new(vec![out_dims.rows(), c], out), out_dims)
}

/// Adjoint of [`avg_pool2`]: spread each pooled gradient over its 2x2 window.
pub fn avg_unpool2(input: &Tensor, pooled_dims: SpatialDims) -> Tensor {
    let c = input.cols();
    let out_dims = SpatialDims {
        batch: pooled_dims.batch,
        height: pooled_dims.height * 2,
        width: pooled_dims.width * 2,
    };
    let mut out = vec![0.0; out_dims.rows() * c];
    let data = input.data();
    for b in 0..pooled_dims.batch {
        let in_base = b * pooled_dims.height * pooled_dims.width;
        let out_base = b * out_dims.height * out_dims.width;
        for i in 0..pooled_dims.height {
            for j in 0..pooled_dims.width {
                let src = (in_base + i * pooled_dims.width + j) * c;
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let dst = (out_base + (2 * i + di) * out_dims.width + (2 * j + dj)) * c;
                    for ch in 0..c {
                        out[dst + ch] = 0.25 * data[src + ch];
                    }
                }
            }
        }
    }
    Tensor::new(vec![out_dims.rows(), c], out)
}
