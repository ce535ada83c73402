//! Procedural 32×32 image generators.
//!
//! Three families with one shared `complexity` knob in [0,1] that
//! monotonically raises mean per-image histogram entropy:
//!
//! * `blobs`: dark background (0.30) plus a few soft bright Gaussian bumps.
//!   Complexity adds bumps and contrast. Low complexity gives near-flat,
//!   cheap-to-model images.
//! * `stripes`: sinusoidal gratings at random orientation and phase.
//!   Complexity raises frequency, contrast, and a second harmonic.
//! * `noise-texture`: mid-gray (0.40) field of smoothed white noise.
//!   Complexity raises amplitude and shortens the correlation length, so the
//!   high end is irreducibly unpredictable pixel noise.
//!
//! The blob/noise level constants are deliberately close: their histograms
//! overlap enough that reconstruction cost alone only mildly separates the
//! two families, which is the regime likelihood-based detection is meant to
//! be exercised in.

use super::{DataError, ImageDataset, Source, Split, IMAGE_HW, IMAGE_PIXELS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    Blobs,
    Stripes,
    NoiseTexture,
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::Blobs => "blobs",
            SyntheticKind::Stripes => "stripes",
            SyntheticKind::NoiseTexture => "noise-texture",
        })
    }
}

impl std::str::FromStr for SyntheticKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blobs" => Ok(SyntheticKind::Blobs),
            "stripes" => Ok(SyntheticKind::Stripes),
            "noise-texture" => Ok(SyntheticKind::NoiseTexture),
            other => Err(format!(
                "unknown generator {other}, expected blobs, stripes, or noise-texture"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub complexity: f32,
    pub count: usize,
    pub seed: u64,
}

const BLOB_BACKGROUND: f32 = 0.30;
const NOISE_MEAN: f32 = 0.40;
const STRIPE_MEAN: f32 = 0.40;

pub fn synth_generate(spec: &SyntheticSpec, split: Split) -> Result<ImageDataset, DataError> {
    if spec.count == 0 {
        return Err(DataError::Invalid {
            reason: "synthetic count must be positive".to_string(),
        });
    }
    if !(0.0..=1.0).contains(&spec.complexity) || !spec.complexity.is_finite() {
        return Err(DataError::Invalid {
            reason: format!("complexity {} must lie in [0,1]", spec.complexity),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.complexity;
    let mut images = Vec::with_capacity(spec.count * IMAGE_PIXELS);
    let mut img = vec![0.0f32; IMAGE_PIXELS];
    for _ in 0..spec.count {
        match spec.kind {
            SyntheticKind::Blobs => blobs_image(&mut img, c, &mut rng),
            SyntheticKind::Stripes => stripes_image(&mut img, c, &mut rng),
            SyntheticKind::NoiseTexture => noise_image(&mut img, c, &mut rng),
        }
        images.extend(img.iter().map(|v| v.clamp(0.0, 1.0)));
    }
    let name = format!("{}-c{:.2}", spec.kind, c);
    ImageDataset::new(&name, split, Source::Synthetic, images)
}

fn blobs_image(img: &mut [f32], c: f32, rng: &mut ChaCha8Rng) {
    img.fill(BLOB_BACKGROUND);
    let n_blobs = 1 + (2.0 * c) as usize;
    for _ in 0..n_blobs {
        let cx: f32 = rng.random_range(6.0..26.0);
        let cy: f32 = rng.random_range(6.0..26.0);
        let radius: f32 = rng.random_range(2.5..4.5);
        let amp: f32 = rng.random_range(0.25..0.40) * (0.5 + 0.5 * c);
        let inv = 1.0 / (2.0 * radius * radius);
        for y in 0..IMAGE_HW {
            for x in 0..IMAGE_HW {
                let dy = y as f32 - cy;
                let dx = x as f32 - cx;
                img[y * IMAGE_HW + x] += amp * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
}

fn stripes_image(img: &mut [f32], c: f32, rng: &mut ChaCha8Rng) {
    let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let phase2: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let cycles = 1.5 + 5.5 * c;
    let omega = std::f32::consts::TAU * cycles / IMAGE_HW as f32;
    let amp = 0.10 + 0.25 * c;
    let (sin_t, cos_t) = theta.sin_cos();
    for y in 0..IMAGE_HW {
        for x in 0..IMAGE_HW {
            let u = x as f32 * cos_t + y as f32 * sin_t;
            let v = amp * ((omega * u + phase).sin() + 0.5 * c * (2.0 * omega * u + phase2).sin());
            img[y * IMAGE_HW + x] = STRIPE_MEAN + v;
        }
    }
}

fn noise_image(img: &mut [f32], c: f32, rng: &mut ChaCha8Rng) {
    let amp = 0.03 + 0.125 * c;
    // Correlation length shrinks with complexity; at the high end the field
    // is plain white noise.
    let radius = (2.2 * (1.0 - c)) as usize;
    let mut field = vec![0.0f32; IMAGE_PIXELS];
    for v in field.iter_mut() {
        *v = rng.sample::<f32, _>(StandardNormal);
    }
    if radius > 0 {
        box_blur(&mut field, radius);
    }
    // Rescale to unit empirical std so amplitude means the same thing at
    // every smoothing level.
    let mean = field.iter().map(|&v| v as f64).sum::<f64>() / IMAGE_PIXELS as f64;
    let var = field.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / IMAGE_PIXELS as f64;
    let scale = if var > 1e-12 { 1.0 / var.sqrt() as f32 } else { 1.0 };
    for (out, &f) in img.iter_mut().zip(&field) {
        *out = NOISE_MEAN + amp * (f - mean as f32) * scale;
    }
}

/// Separable edge-clamped box blur with window 2r+1.
fn box_blur(field: &mut [f32], r: usize) {
    let n = IMAGE_HW as isize;
    let ri = r as isize;
    let mut tmp = vec![0.0f32; field.len()];
    for y in 0..n {
        for x in 0..n {
            let lo = (x - ri).max(0);
            let hi = (x + ri).min(n - 1);
            let mut acc = 0.0;
            for xx in lo..=hi {
                acc += field[(y * n + xx) as usize];
            }
            tmp[(y * n + x) as usize] = acc / (hi - lo + 1) as f32;
        }
    }
    for x in 0..n {
        for y in 0..n {
            let lo = (y - ri).max(0);
            let hi = (y + ri).min(n - 1);
            let mut acc = 0.0;
            for yy in lo..=hi {
                acc += tmp[(yy * n + x) as usize];
            }
            field[(y * n + x) as usize] = acc / (hi - lo + 1) as f32;
        }
    }
}
