//! Differentiable graph builders: encoder, decoder, the Gaussian KL, the
//! Bernoulli reconstruction likelihood, per-sample ELBO, and the joint
//! two-prior training objective.

use super::net::{BoundNet, Slot, LEAKY_SLOPE};
use super::{GaussianPosterior, PriorSpec};
use crate::tensor::{Padding, Tape, Tensor, TensorError, TensorId};

/// Posterior log-variance is clamped to this range before any use.
pub const LOG_VAR_MIN: f32 = -10.0;
pub const LOG_VAR_MAX: f32 = 10.0;
/// Bernoulli probabilities are kept inside [PROB_EPS, 1 - PROB_EPS].
pub const PROB_EPS: f32 = 1e-7;

fn check_batch(tape: &Tape, x: TensorId, net: &BoundNet, op: &'static str) -> Result<usize, TensorError> {
    let shape = tape.value(x).shape();
    let hw = net.arch.input_hw;
    if shape.len() != 4 || shape[1] != 1 || shape[2] != hw || shape[3] != hw {
        return Err(TensorError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("expected (batch, 1, {hw}, {hw})"),
        });
    }
    Ok(shape[0])
}

/// Runs the encoder and returns the clamped Gaussian posterior handles,
/// both shaped (batch, latent_dim).
pub fn encode(tape: &mut Tape, net: &BoundNet, x: TensorId) -> Result<GaussianPosterior, TensorError> {
    let b = check_batch(tape, x, net, "encode")?;
    let l = net.arch.latent_dim;

    let c1 = tape.conv2d(x, net.id(Slot::EncConv1W), Some(net.id(Slot::EncConv1B)), 2, Padding::Same)?;
    let a1 = tape.leaky_relu(c1, LEAKY_SLOPE)?;
    let c2 = tape.conv2d(a1, net.id(Slot::EncConv2W), Some(net.id(Slot::EncConv2B)), 2, Padding::Same)?;
    let a2 = tape.leaky_relu(c2, LEAKY_SLOPE)?;
    let flat = tape.reshape(a2, &[b, net.arch.feature_dim()])?;
    let pre = tape.matmul(flat, net.id(Slot::EncFcW))?;
    let head = tape.add(pre, net.id(Slot::EncFcB))?;

    let mu = tape.slice(head, 1, 0, l)?;
    let lv = tape.slice(head, 1, l, l)?;
    let log_var = tape.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX)?;
    Ok(GaussianPosterior { mu, log_var })
}

/// Maps latent codes (batch, latent_dim) to Bernoulli means with the input
/// image shape.
pub fn decode(tape: &mut Tape, net: &BoundNet, z: TensorId) -> Result<TensorId, TensorError> {
    let shape = tape.value(z).shape().to_vec();
    let (b, l) = (shape[0], net.arch.latent_dim);
    if shape != [b, l] {
        return Err(TensorError::InvalidShape {
            op: "decode",
            shape,
            reason: format!("expected (batch, {l})"),
        });
    }
    let bh = net.arch.bottleneck_hw();
    let c2 = net.arch.channels[1];
    let pad = net.arch.deconv_pad();

    let h = tape.matmul(z, net.id(Slot::DecFcW))?;
    let hb = tape.add(h, net.id(Slot::DecFcB))?;
    let ha = tape.leaky_relu(hb, LEAKY_SLOPE)?;
    let cube = tape.reshape(ha, &[b, c2, bh, bh])?;
    let d1 = tape.conv2d_transpose(cube, net.id(Slot::DecDeconv1W), Some(net.id(Slot::DecDeconv1B)), 2, pad)?;
    let a1 = tape.leaky_relu(d1, LEAKY_SLOPE)?;
    let d2 = tape.conv2d_transpose(a1, net.id(Slot::DecDeconv2W), Some(net.id(Slot::DecDeconv2B)), 2, pad)?;
    tape.sigmoid(d2)
}

/// z = mu + exp(log_var / 2) * noise. Zero noise returns the mean exactly.
pub fn reparameterize(
    tape: &mut Tape,
    posterior: &GaussianPosterior,
    noise: &Tensor,
) -> Result<TensorId, TensorError> {
    let mu_shape = tape.value(posterior.mu).shape().to_vec();
    if noise.shape() != mu_shape.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "reparameterize",
            lhs: mu_shape,
            rhs: noise.shape().to_vec(),
        });
    }
    let eps = tape.constant(noise.clone());
    let half = tape.mul_scalar(posterior.log_var, 0.5)?;
    let std = tape.exp(half)?;
    let scaled = tape.mul(std, eps)?;
    tape.add(posterior.mu, scaled)
}

/// Per-sample KL divergence from N(mu, diag sigma^2) to the zero-mean
/// isotropic prior N(0, s^2 I): sum over dims of
/// ln(s/sigma) + (sigma^2 + mu^2) / (2 s^2) - 1/2.
pub fn kl_to_prior(
    tape: &mut Tape,
    posterior: &GaussianPosterior,
    prior: &PriorSpec,
) -> Result<TensorId, TensorError> {
    let s = prior.sigma();
    let neg_half_lv = tape.mul_scalar(posterior.log_var, -0.5)?;
    let log_term = tape.add_scalar(neg_half_lv, s.ln() - 0.5)?;
    let var = tape.exp(posterior.log_var)?;
    let mu_sq = tape.mul(posterior.mu, posterior.mu)?;
    let moments = tape.add(var, mu_sq)?;
    let scaled = tape.mul_scalar(moments, 1.0 / (2.0 * s * s))?;
    let per_dim = tape.add(log_term, scaled)?;
    tape.row_sum(per_dim)
}

/// Per-sample Bernoulli log-likelihood of `x` under decoder means `probs`,
/// summed over pixels. Both are (batch, 1, h, w).
pub fn reconstruction_loglik(
    tape: &mut Tape,
    probs: TensorId,
    x: TensorId,
) -> Result<TensorId, TensorError> {
    let shape = tape.value(probs).shape().to_vec();
    if shape != tape.value(x).shape() {
        return Err(TensorError::ShapeMismatch {
            op: "reconstruction_loglik",
            lhs: shape,
            rhs: tape.value(x).shape().to_vec(),
        });
    }
    let b = shape[0];
    let px: usize = shape[1..].iter().product();

    let p = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_p = tape.log(p)?;
    let neg_p = tape.mul_scalar(p, -1.0)?;
    let one_minus_p = tape.add_scalar(neg_p, 1.0)?;
    let log_1mp = tape.log(one_minus_p)?;
    let neg_x = tape.mul_scalar(x, -1.0)?;
    let one_minus_x = tape.add_scalar(neg_x, 1.0)?;

    let hit = tape.mul(x, log_p)?;
    let miss = tape.mul(one_minus_x, log_1mp)?;
    let terms = tape.add(hit, miss)?;
    let flat = tape.reshape(terms, &[b, px])?;
    tape.row_sum(flat)
}

/// Single-sample ELBO per image: reconstruction log-likelihood minus the KL
/// to `prior`. Always non-positive.
pub fn elbo(
    tape: &mut Tape,
    net: &BoundNet,
    batch: &Tensor,
    prior: &PriorSpec,
    noise: &Tensor,
) -> Result<TensorId, TensorError> {
    let x = tape.constant(batch.clone());
    check_batch(tape, x, net, "elbo")?;
    let posterior = encode(tape, net, x)?;
    let z = reparameterize(tape, &posterior, noise)?;
    let probs = decode(tape, net, z)?;
    let loglik = reconstruction_loglik(tape, probs, x)?;
    let kl = kl_to_prior(tape, &posterior, prior)?;
    tape.sub(loglik, kl)
}

/// Joint objective: negative sum of the basic branch's mean ELBO and every
/// simple branch's mean ELBO. With no simple branches this is exactly the
/// negative mean ELBO of a plain VAE.
pub fn bpvae_loss(
    tape: &mut Tape,
    net: &BoundNet,
    basic: (&Tensor, &PriorSpec, &Tensor),
    simples: &[(&Tensor, &PriorSpec, &Tensor)],
) -> Result<TensorId, TensorError> {
    let basic_rows = elbo(tape, net, basic.0, basic.1, basic.2)?;
    let mut acc = tape.mean(basic_rows)?;
    for (batch, prior, noise) in simples {
        let rows = elbo(tape, net, batch, prior, noise)?;
        let m = tape.mean(rows)?;
        acc = tape.add(acc, m)?;
    }
    tape.mul_scalar(acc, -1.0)
}

/// Deterministic reconstruction through the posterior mean (no sampling).
pub fn reconstruct(tape: &mut Tape, net: &BoundNet, batch: &Tensor) -> Result<TensorId, TensorError> {
    let x = tape.constant(batch.clone());
    check_batch(tape, x, net, "reconstruct")?;
    let posterior = encode(tape, net, x)?;
    decode(tape, net, posterior.mu)
}
