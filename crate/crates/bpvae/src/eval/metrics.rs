//! Ranking and reconstruction metrics with their exact tie and edge
//! conventions pinned down.

use super::EvalError;

/// SSIM uses a uniform 8x8 window at stride 1 with fixed stabilizers.
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Probability that a random in-distribution score outranks a random
/// out-of-distribution score, ties counting half. Computed from average
/// ranks, so it is exact.
pub(crate) fn rank_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores are finite"));

    let mut rank_sum_id = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks are 1-based; a tie group shares the average rank.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let ties_id = all[i..j].iter().filter(|r| r.1).count();
        rank_sum_id += avg_rank * ties_id as f64;
        i = j;
    }
    let (n_id, n_ood) = (id.len() as f64, ood.len() as f64);
    let u = rank_sum_id - n_id * (n_id + 1.0) / 2.0;
    u / (n_id * n_ood)
}

/// Area under the precision-recall curve with in-distribution as the
/// positive class: stepwise sum of precision times recall increment over
/// descending distinct score thresholds.
pub(crate) fn average_precision(id: &[f64], ood: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("scores are finite"));

    let n_id = id.len() as f64;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut last_recall = 0.0f64;
    let mut ap = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        tp += all[i..j].iter().filter(|r| r.1).count();
        seen += j - i;
        let precision = tp as f64 / seen as f64;
        let recall = tp as f64 / n_id;
        ap += (recall - last_recall) * precision;
        last_recall = recall;
        i = j;
    }
    ap
}

/// Mean squared error over two equally long pixel slices.
pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "mse needs equal lengths");
    assert!(!a.is_empty(), "mse of nothing");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64
}

/// Peak signal-to-noise ratio in decibels for unit-range images. A perfect
/// reconstruction has infinite PSNR.
pub fn psnr_db(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Structural similarity of two h x w images, mean over all full 8x8
/// windows at stride 1. Window sums come from integral images, so cost is
/// independent of the window size.
pub fn ssim(x: &[f32], y: &[f32], h: usize, w: usize) -> Result<f64, EvalError> {
    if x.len() != h * w || y.len() != h * w {
        return Err(EvalError::Config {
            reason: format!("ssim expects two {h}x{w} images"),
        });
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(EvalError::Config {
            reason: format!("ssim needs extents of at least {SSIM_WINDOW}"),
        });
    }

    // Integral images with a zero row/column in front; index (r, c) holds
    // the sum over the rectangle [0, r) x [0, c).
    let stride = w + 1;
    let mut sx = vec![0.0f64; (h + 1) * stride];
    let mut sy = vec![0.0f64; (h + 1) * stride];
    let mut sxx = vec![0.0f64; (h + 1) * stride];
    let mut syy = vec![0.0f64; (h + 1) * stride];
    let mut sxy = vec![0.0f64; (h + 1) * stride];
    for r in 0..h {
        for c in 0..w {
            let (xv, yv) = (x[r * w + c] as f64, y[r * w + c] as f64);
            let i = (r + 1) * stride + c + 1;
            let up = r * stride + c + 1;
            let left = (r + 1) * stride + c;
            let diag = r * stride + c;
            sx[i] = xv + sx[up] + sx[left] - sx[diag];
            sy[i] = yv + sy[up] + sy[left] - sy[diag];
            sxx[i] = xv * xv + sxx[up] + sxx[left] - sxx[diag];
            syy[i] = yv * yv + syy[up] + syy[left] - syy[diag];
            sxy[i] = xv * yv + sxy[up] + sxy[left] - sxy[diag];
        }
    }
    let window_sum = |s: &[f64], r: usize, c: usize| -> f64 {
        let (r1, c1) = (r + SSIM_WINDOW, c + SSIM_WINDOW);
        s[r1 * stride + c1] - s[r * stride + c1] - s[r1 * stride + c] + s[r * stride + c]
    };

    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0f64;
    let mut windows = 0usize;
    for r in 0..=h - SSIM_WINDOW {
        for c in 0..=w - SSIM_WINDOW {
            let mx = window_sum(&sx, r, c) / n;
            let my = window_sum(&sy, r, c) / n;
            let vx = window_sum(&sxx, r, c) / n - mx * mx;
            let vy = window_sum(&syy, r, c) / n - my * my;
            let cov = window_sum(&sxy, r, c) / n - mx * my;
            let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
            total += num / den;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistBin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

/// Equal-width histogram over [min, max]. Every bin is left-closed and
/// right-open except the last, which is closed on both sides so the maximum
/// lands inside. Counts always sum to the input length. A degenerate range
/// (all values equal) puts everything in the first bin.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<HistBin>, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Empty {
            what: "histogram input".to_string(),
        });
    }
    if bins == 0 {
        return Err(EvalError::Config {
            reason: "histogram needs at least one bin".to_string(),
        });
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite {
            what: format!("histogram value {bad}"),
        });
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (max - min) / bins as f64;
    let mut out: Vec<HistBin> = (0..bins)
        .map(|i| HistBin {
            left: min + width * i as f64,
            right: if i + 1 == bins { max } else { min + width * (i + 1) as f64 },
            count: 0,
        })
        .collect();
    for &v in values {
        let idx = if width > 0.0 {
            (((v - min) / width) as usize).min(bins - 1)
        } else {
            0
        };
        out[idx].count += 1;
    }
    Ok(out)
}
