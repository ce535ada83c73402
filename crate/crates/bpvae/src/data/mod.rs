//! Dataset ingestion (IDX and raw planar RGB), procedural generators, the
//! shared preprocessing pipeline (grayscale, bilinear resize to 32×32, [0,1]
//! range), and batch iteration.

mod idx;
mod synth;

pub use idx::{load_idx, load_rawrgb};
pub use synth::{synth_generate, SyntheticKind, SyntheticSpec};

use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use thiserror::Error;

/// Every stored image is exactly this extent per side, single channel.
pub const IMAGE_HW: usize = 32;
pub const IMAGE_PIXELS: usize = IMAGE_HW * IMAGE_HW;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid data at byte {offset}: {reason}")]
    Format {
        path: String,
        offset: u64,
        reason: String,
    },
    #[error("{reason}")]
    Invalid { reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Idx,
    Synthetic,
}

/// An immutable stack of 32×32×1 images with pixels in [0,1].
#[derive(Debug, Clone)]
pub struct ImageDataset {
    name: String,
    split: Split,
    source: Source,
    images: Vec<f32>,
}

impl ImageDataset {
    pub fn new(
        name: &str,
        split: Split,
        source: Source,
        images: Vec<f32>,
    ) -> Result<Self, DataError> {
        if images.is_empty() || !images.len().is_multiple_of(IMAGE_PIXELS) {
            return Err(DataError::Invalid {
                reason: format!(
                    "dataset '{name}' must hold at least one {IMAGE_HW}x{IMAGE_HW} image, \
                     got {} pixel values",
                    images.len()
                ),
            });
        }
        if let Some(bad) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::Invalid {
                reason: format!("dataset '{name}' has pixel {bad} outside [0,1]"),
            });
        }
        Ok(ImageDataset {
            name: name.to_string(),
            split,
            source,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len() / IMAGE_PIXELS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.images
    }

    /// Returns a copy restricted to the first `limit` images.
    pub fn truncated(&self, limit: usize) -> Self {
        let n = self.len().min(limit.max(1));
        ImageDataset {
            name: self.name.clone(),
            split: self.split,
            source: self.source,
            images: self.images[..n * IMAGE_PIXELS].to_vec(),
        }
    }

    /// Gathers the given rows into an (n, 1, 32, 32) tensor.
    pub fn batch_tensor(&self, indices: &[usize]) -> Tensor {
        assert!(!indices.is_empty(), "batch_tensor needs at least one index");
        let mut data = Vec::with_capacity(indices.len() * IMAGE_PIXELS);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::from_vec(&[indices.len(), 1, IMAGE_HW, IMAGE_HW], data)
            .expect("batch shape follows from index count")
    }

    /// All images as one (n, 1, 32, 32) tensor.
    pub fn tensor_all(&self) -> Tensor {
        Tensor::from_vec(&[self.len(), 1, IMAGE_HW, IMAGE_HW], self.images.clone())
            .expect("dataset invariant guarantees the shape")
    }

    /// One pass over the dataset in batches. With `shuffle` the order is a
    /// seeded permutation; the final batch may be short.
    pub fn batch_iter(
        &self,
        batch_size: usize,
        seed: u64,
        shuffle: bool,
    ) -> Result<BatchIter<'_>, DataError> {
        if batch_size == 0 {
            return Err(DataError::Invalid {
                reason: "batch_size must be positive".to_string(),
            });
        }
        if batch_size > self.len() {
            return Err(DataError::Invalid {
                reason: format!(
                    "batch_size {batch_size} exceeds dataset '{}' of {} images",
                    self.name,
                    self.len()
                ),
            });
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        if shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
        }
        Ok(BatchIter {
            ds: self,
            order,
            cursor: 0,
            batch_size,
        })
    }
}

pub struct BatchIter<'a> {
    ds: &'a ImageDataset,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Tensor;

    fn next(&mut self) -> Option<Tensor> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.ds.batch_tensor(&self.order[self.cursor..end]);
        self.cursor = end;
        Some(batch)
    }
}

/// Endless shuffled batch stream: reshuffles with its own rng stream every
/// time the dataset is exhausted. Lets a short dataset feed fixed-size
/// batches alongside a longer one.
pub struct CycleBatches<'a> {
    ds: &'a ImageDataset,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> CycleBatches<'a> {
    pub fn new(ds: &'a ImageDataset, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        CycleBatches {
            ds,
            rng,
            order,
            cursor: 0,
        }
    }

    pub fn next_batch(&mut self, n: usize) -> Tensor {
        assert!(n > 0, "cycled batch size must be positive");
        let mut indices = Vec::with_capacity(n);
        while indices.len() < n {
            if self.cursor >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            indices.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        self.ds.batch_tensor(&indices)
    }
}

/// BT.601 luminance from an interleaved H×W×3 image in [0,1].
pub fn to_grayscale(rgb: &[f32], height: usize, width: usize) -> Result<Vec<f32>, DataError> {
    if rgb.len() != height * width * 3 {
        return Err(DataError::Invalid {
            reason: format!(
                "expected {}x{}x3 = {} channel values, got {}",
                height,
                width,
                height * width * 3,
                rgb.len()
            ),
        });
    }
    Ok(rgb
        .chunks_exact(3)
        .map(|px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
        .collect())
}

/// Bilinear resample with the half-pixel (align-corners off) convention.
/// Resizing to the source extent reproduces the input exactly.
pub fn resize_bilinear(
    src: &[f32],
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f32> {
    assert_eq!(src.len(), src_h * src_w, "source extent mismatch");
    assert!(src_h > 0 && src_w > 0 && dst_h > 0 && dst_w > 0);
    let mut out = Vec::with_capacity(dst_h * dst_w);
    let sy = src_h as f32 / dst_h as f32;
    let sx = src_w as f32 / dst_w as f32;
    for dy in 0..dst_h {
        let fy = ((dy as f32 + 0.5) * sy - 0.5).clamp(0.0, (src_h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let wy = fy - y0 as f32;
        for dx in 0..dst_w {
            let fx = ((dx as f32 + 0.5) * sx - 0.5).clamp(0.0, (src_w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let wx = fx - x0 as f32;
            let top = src[y0 * src_w + x0] * (1.0 - wx) + src[y0 * src_w + x1] * wx;
            let bot = src[y1 * src_w + x0] * (1.0 - wx) + src[y1 * src_w + x1] * wx;
            out.push(top * (1.0 - wy) + bot * wy);
        }
    }
    out
}

/// Shannon entropy (nats) of a 32-bin pixel histogram over [0,1].
pub fn image_entropy(pixels: &[f32]) -> f64 {
    let mut counts = [0usize; 32];
    for &p in pixels {
        let bin = ((p * 32.0) as usize).min(31);
        counts[bin] += 1;
    }
    let n = pixels.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mean per-image entropy; the complexity knob of every synthetic kind is
/// calibrated against this estimate.
pub fn mean_image_entropy(ds: &ImageDataset) -> f64 {
    (0..ds.len()).map(|i| image_entropy(ds.image(i))).sum::<f64>() / ds.len() as f64
}
