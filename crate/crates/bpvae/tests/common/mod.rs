//! Shared oracles for the integration suites.
//!
//! Everything here recomputes results through a second, deliberately naive
//! path: dense f64 loops instead of the engine's im2col/gemm kernels, direct
//! per-window sums instead of integral images, pair enumeration instead of
//! rank statistics. The suites compare the two paths; agreement within the
//! stated tolerances is the evidence that the fast path computes the right
//! quantity.

use bpvae::models::VaeNet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain f64 tensor: shape plus row-major data. No views, no autograd.
#[derive(Clone, Debug)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Arr {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Arr { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Arr {
        Arr::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Arr {
        Arr::new(shape, data.iter().map(|v| *v as f64).collect())
    }
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops, mirroring the engine's contracts.

/// Binary op with the engine's suffix broadcast: the right operand must be a
/// trailing suffix of the left shape and is cycled over it.
pub fn ref_binary(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    assert!(a.data.len().is_multiple_of(b.data.len()), "rhs must tile lhs");
    let data = a
        .data
        .chunks(b.data.len())
        .flat_map(|chunk| chunk.iter().zip(&b.data).map(|(x, y)| f(*x, *y)))
        .collect();
    Arr::new(&a.shape, data)
}

pub fn ref_unary(a: &Arr, f: impl Fn(f64) -> f64) -> Arr {
    Arr::new(&a.shape, a.data.iter().map(|v| f(*v)).collect())
}

pub fn ref_leaky(a: &Arr, slope: f64) -> Arr {
    ref_unary(a, |v| if v > 0.0 { v } else { slope * v })
}

pub fn ref_sigmoid(a: &Arr) -> Arr {
    ref_unary(a, |v| 1.0 / (1.0 + (-v).exp()))
}

/// The engine floors log inputs at 1e-7 and zeroes the gradient below.
pub const REF_LOG_EPS: f64 = 1e-7;

pub fn ref_log(a: &Arr) -> Arr {
    ref_unary(a, |v| v.max(REF_LOG_EPS).ln())
}

pub fn ref_clamp(a: &Arr, lo: f64, hi: f64) -> Arr {
    ref_unary(a, |v| v.clamp(lo, hi))
}

pub fn ref_matmul(a: &Arr, b: &Arr) -> Arr {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    assert_eq!(k, b.shape[0]);
    let mut out = Arr::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a.data[i * k + t] * b.data[t * n + j];
            }
            out.data[i * n + j] = acc;
        }
    }
    out
}

pub fn ref_sum(a: &Arr) -> f64 {
    a.data.iter().sum()
}

pub fn ref_mean(a: &Arr) -> f64 {
    ref_sum(a) / a.data.len() as f64
}

pub fn ref_row_sum(a: &Arr) -> Arr {
    let (r, c) = (a.shape[0], a.shape[1]);
    let data = a.data.chunks(c).map(|row| row.iter().sum()).collect();
    Arr::new(&[r], data)
}

pub fn ref_concat(parts: &[&Arr], axis: usize) -> Arr {
    let first = &parts[0].shape;
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let axis_total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut shape = first.clone();
    shape[axis] = axis_total;
    let mut data = Vec::with_capacity(outer * axis_total * inner);
    for o in 0..outer {
        for p in parts {
            let d = p.shape[axis];
            data.extend_from_slice(&p.data[o * d * inner..(o + 1) * d * inner]);
        }
    }
    Arr::new(&shape, data)
}

pub fn ref_slice(a: &Arr, axis: usize, start: usize, len: usize) -> Arr {
    let outer: usize = a.shape[..axis].iter().product();
    let inner: usize = a.shape[axis + 1..].iter().product();
    let dim = a.shape[axis];
    let mut shape = a.shape.clone();
    shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * dim * inner + start * inner;
        data.extend_from_slice(&a.data[base..base + len * inner]);
    }
    Arr::new(&shape, data)
}

// ---------------------------------------------------------------------------
// Convolutions as plain nested loops.

/// Same-padding geometry: ceil(extent / stride) outputs with the total
/// padding split evenly; callers only use configurations where it is even.
pub fn same_pad(extent: usize, kernel: usize, stride: usize) -> usize {
    let out = extent.div_ceil(stride);
    let total = (out - 1) * stride + kernel - extent;
    assert!(total.is_multiple_of(2), "uneven same padding");
    total / 2
}

/// Direct convolution. `weight` is (out_ch, in_ch, k, k); out-of-bounds taps
/// read zero.
pub fn ref_conv2d(x: &Arr, w: &Arr, bias: Option<&Arr>, stride: usize, pad: usize) -> Arr {
    let (b, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oc, k) = (w.shape[0], w.shape[2]);
    assert_eq!(w.shape[1], c);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Arr::zeros(&[b, oc, oh, ow]);
    for n in 0..b {
        for o in 0..oc {
            let base = bias.map_or(0.0, |t| t.data[o]);
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = base;
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ii = (oi * stride + ki) as isize - pad as isize;
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                    continue;
                                }
                                let xi = ((n * c + ci) * h + ii as usize) * wd + jj as usize;
                                let wi = ((o * c + ci) * k + ki) * k + kj;
                                acc += x.data[xi] * w.data[wi];
                            }
                        }
                    }
                    out.data[((n * oc + o) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }
    out
}

/// Transposed convolution as the scatter adjoint of [`ref_conv2d`]. `weight`
/// is (in_ch, out_ch, k, k) and the output extent is (in-1)*stride + k - 2*pad.
pub fn ref_conv2d_transpose(x: &Arr, w: &Arr, bias: Option<&Arr>, stride: usize, pad: usize) -> Arr {
    let (b, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oc, k) = (w.shape[1], w.shape[2]);
    assert_eq!(w.shape[0], c);
    let oh = (h - 1) * stride + k - 2 * pad;
    let ow = (wd - 1) * stride + k - 2 * pad;
    let mut out = Arr::zeros(&[b, oc, oh, ow]);
    for n in 0..b {
        for o in 0..oc {
            if let Some(t) = bias {
                for v in &mut out.data[((n * oc + o) * oh) * ow..((n * oc + o) * oh + oh) * ow] {
                    *v = t.data[o];
                }
            }
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..wd {
                        let xv = x.data[((n * c + ci) * h + i) * wd + j];
                        for ki in 0..k {
                            for kj in 0..k {
                                let yi = (i * stride + ki) as isize - pad as isize;
                                let yj = (j * stride + kj) as isize - pad as isize;
                                if yi < 0 || yj < 0 || yi >= oh as isize || yj >= ow as isize {
                                    continue;
                                }
                                let oi = ((n * oc + o) * oh + yi as usize) * ow + yj as usize;
                                let wi = ((ci * oc + o) * k + ki) * k + kj;
                                out.data[oi] += xv * w.data[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Full-objective reference.

/// Mirror of the network's forward pass and training objective in f64.
///
/// `kink_gap` tracks how close any intermediate came to a nonlinearity
/// boundary (LeakyReLU corner, clamp edge): finite differencing is only
/// trustworthy when every intermediate stays on one side, so trials with a
/// small gap are discarded and redrawn.
pub struct RefVae {
    pub input_hw: usize,
    pub latent: usize,
    pub channels: [usize; 2],
    pub kernel: usize,
    pub params: Vec<Arr>,
}

pub const REF_LEAKY_SLOPE: f64 = 0.2;
pub const REF_LOG_VAR_BOUND: f64 = 10.0;
pub const REF_PROB_EPS: f64 = 1e-7;

pub struct RefLoss {
    pub loss: f64,
    pub kink_gap: f64,
}

impl RefVae {
    pub fn from_net(net: &VaeNet) -> RefVae {
        let a = net.arch();
        RefVae {
            input_hw: a.input_hw,
            latent: a.latent_dim,
            channels: a.channels,
            kernel: a.kernel,
            params: net
                .params()
                .iter()
                .map(|p| Arr::from_f32(p.value.shape(), p.value.data()))
                .collect(),
        }
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    pub fn assign_params(&mut self, flat: &[f64]) {
        let mut at = 0;
        for p in &mut self.params {
            let n = p.data.len();
            p.data.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        assert_eq!(at, flat.len());
    }

    fn elbo_rows(&self, x: &Arr, sigma: f64, eps: &Arr, gap: &mut f64) -> Vec<f64> {
        let b = x.shape[0];
        let l = self.latent;
        let bh = self.input_hw / 4;
        let feat = self.channels[1] * bh * bh;
        let pad = same_pad(self.input_hw, self.kernel, 2);
        let track = |gap: &mut f64, a: &Arr| {
            for v in &a.data {
                *gap = gap.min(v.abs());
            }
        };

        let c1 = ref_conv2d(x, &self.params[0], Some(&self.params[1]), 2, pad);
        track(gap, &c1);
        let a1 = ref_leaky(&c1, REF_LEAKY_SLOPE);
        let c2 = ref_conv2d(&a1, &self.params[2], Some(&self.params[3]), 2, pad);
        track(gap, &c2);
        let a2 = ref_leaky(&c2, REF_LEAKY_SLOPE);
        let flat = Arr::new(&[b, feat], a2.data);
        let head = ref_binary(&ref_matmul(&flat, &self.params[4]), &self.params[5], |p, q| p + q);
        let mu = ref_slice(&head, 1, 0, l);
        let lv_raw = ref_slice(&head, 1, l, l);
        for v in &lv_raw.data {
            *gap = gap.min((v.abs() - REF_LOG_VAR_BOUND).abs());
        }
        let lv = ref_clamp(&lv_raw, -REF_LOG_VAR_BOUND, REF_LOG_VAR_BOUND);

        let std = ref_unary(&lv, |v| (0.5 * v).exp());
        let z = Arr::new(
            &[b, l],
            mu.data
                .iter()
                .zip(&std.data)
                .zip(&eps.data)
                .map(|((m, s), e)| m + s * e)
                .collect(),
        );

        let h1 = ref_binary(&ref_matmul(&z, &self.params[6]), &self.params[7], |p, q| p + q);
        track(gap, &h1);
        let ha = ref_leaky(&h1, REF_LEAKY_SLOPE);
        let cube = Arr::new(&[b, self.channels[1], bh, bh], ha.data);
        let dpad = (self.kernel - 2) / 2;
        let d1 = ref_conv2d_transpose(&cube, &self.params[8], Some(&self.params[9]), 2, dpad);
        track(gap, &d1);
        let ad = ref_leaky(&d1, REF_LEAKY_SLOPE);
        let d2 = ref_conv2d_transpose(&ad, &self.params[10], Some(&self.params[11]), 2, dpad);
        let probs = ref_sigmoid(&d2);
        for v in &probs.data {
            *gap = gap.min((v - REF_PROB_EPS).abs());
            *gap = gap.min((1.0 - REF_PROB_EPS - v).abs());
        }
        let p = ref_clamp(&probs, REF_PROB_EPS, 1.0 - REF_PROB_EPS);

        let px = self.input_hw * self.input_hw;
        let mut rows = Vec::with_capacity(b);
        for n in 0..b {
            let mut ll = 0.0;
            for i in 0..px {
                let xv = x.data[n * px + i];
                let pv = p.data[n * px + i];
                ll += xv * pv.max(REF_LOG_EPS).ln() + (1.0 - xv) * (1.0 - pv).max(REF_LOG_EPS).ln();
            }
            let mut kl = 0.0;
            for j in 0..l {
                let m = mu.data[n * l + j];
                let v = lv.data[n * l + j];
                kl += -0.5 * v + (sigma.ln() - 0.5) + (v.exp() + m * m) / (2.0 * sigma * sigma);
            }
            rows.push(ll - kl);
        }
        rows
    }

    /// The joint objective: negative sum of each branch's mean ELBO.
    pub fn loss(&self, basic: (&Arr, f64, &Arr), simples: &[(&Arr, f64, &Arr)]) -> RefLoss {
        let mut gap = f64::INFINITY;
        let rows = self.elbo_rows(basic.0, basic.1, basic.2, &mut gap);
        let mut acc = rows.iter().sum::<f64>() / rows.len() as f64;
        for (batch, sigma, eps) in simples {
            let rows = self.elbo_rows(batch, *sigma, eps, &mut gap);
            acc += rows.iter().sum::<f64>() / rows.len() as f64;
        }
        RefLoss { loss: -acc, kink_gap: gap }
    }
}

// ---------------------------------------------------------------------------
// Finite differences.

/// Central difference of `f` along coordinate `i`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[i] = x[i] + h;
    let up = f(&probe);
    probe[i] = x[i] - h;
    let down = f(&probe);
    (up - down) / (2.0 * h)
}

/// Error of an analytic gradient against its finite-difference estimate,
/// relative to the larger magnitude with an absolute escape for the noise
/// floor of near-zero pairs.
pub fn grad_mismatch(analytic: f64, fd: f64) -> f64 {
    let scale = analytic.abs().max(fd.abs());
    let diff = (analytic - fd).abs();
    if diff <= 1e-6 {
        0.0
    } else {
        diff / scale.max(1e-6)
    }
}

// ---------------------------------------------------------------------------
// Monte-Carlo KL.

/// Estimates KL(N(mu, sigma^2) || N(0, s^2)) by sampling: the mean of
/// ln q(z) - ln p(z) over draws z ~ q.
pub fn mc_kl(mu: f64, sigma: f64, s: f64, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..samples {
        let e: f64 = rng.sample(rand_distr::StandardNormal);
        let z = mu + sigma * e;
        let log_q = -0.5 * e * e - sigma.ln();
        let log_p = -z * z / (2.0 * s * s) - s.ln();
        acc += log_q - log_p;
    }
    acc / samples as f64
}

// ---------------------------------------------------------------------------
// Ranking metrics by enumeration.

/// AUROC by scoring every (id, ood) pair: wins count 1, ties 1/2.
pub fn pairwise_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut acc = 0.0;
    for a in id {
        for b in ood {
            if a > b {
                acc += 1.0;
            } else if a == b {
                acc += 0.5;
            }
        }
    }
    acc / (id.len() as f64 * ood.len() as f64)
}

/// Average precision by rescanning the whole score set at every distinct
/// threshold, descending.
pub fn rescan_auprc(id: &[f64], ood: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = id.iter().chain(ood).copied().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let tp = id.iter().filter(|v| **v >= t).count() as f64;
        let fp = ood.iter().filter(|v| **v >= t).count() as f64;
        let precision = tp / (tp + fp);
        let recall = tp / id.len() as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// SSIM by direct per-window loops: every full 8x8 window at stride 1,
/// population moments, the standard two-factor form.
pub fn naive_ssim(x: &[f32], y: &[f32], h: usize, w: usize) -> f64 {
    const WIN: usize = 8;
    const C1: f64 = 1e-4;
    const C2: f64 = 9e-4;
    let n = (WIN * WIN) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for r in 0..=h - WIN {
        for c in 0..=w - WIN {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..WIN {
                for j in 0..WIN {
                    let xv = x[(r + i) * w + c + j] as f64;
                    let yv = y[(r + i) * w + c + j] as f64;
                    sx += xv;
                    sy += yv;
                    sxx += xv * xv;
                    syy += yv * yv;
                    sxy += xv * yv;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cov = sxy / n - mx * my;
            total += (2.0 * mx * my + C1) * (2.0 * cov + C2)
                / ((mx * mx + my * my + C1) * (vx + vy + C2));
            windows += 1;
        }
    }
    total / windows as f64
}

// ---------------------------------------------------------------------------
// Randomization helpers.

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Uniform values with a dead zone around zero, for sampling inputs to ops
/// with a corner there.
pub fn offset_vec(rng: &mut ChaCha8Rng, n: usize, margin: f32, span: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let v = rng.random_range(margin..margin + span);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}
