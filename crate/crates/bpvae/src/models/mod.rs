//! Model layer: a plain VAE trained under one Gaussian prior, and the
//! bigeminal-priors variant that trains a shared encoder/decoder jointly on
//! a basic dataset and one or more simple datasets, each simple branch under
//! its own tighter prior.
//!
//! Scoring always evaluates the single-sample ELBO under the basic prior:
//! inputs resembling the simple data encode into the narrow region the
//! simple priors carved out, where the KL to the wide basic prior is large,
//! so their scores drop far below the basic data's scores.

mod net;
mod ops;
mod train;

pub use net::{Architecture, BoundNet, VaeNet, LEAKY_SLOPE, PARAM_COUNT};
pub use ops::{
    bpvae_loss, decode, elbo, encode, kl_to_prior, reconstruct, reconstruction_loglik,
    reparameterize, LOG_VAR_MAX, LOG_VAR_MIN, PROB_EPS,
};
pub use train::{TrainConfig, TrainLog};

use crate::data::ImageDataset;
use crate::tensor::{Tape, Tensor, TensorError, TensorId};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid prior: {reason}")]
    Prior { reason: String },
    #[error("invalid model configuration: {reason}")]
    Config { reason: String },
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f32 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorRole {
    Basic,
    Simple,
}

/// A zero-mean isotropic Gaussian prior N(0, sigma^2 I) with its role in the
/// joint objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSpec {
    sigma: f32,
    role: PriorRole,
}

impl PriorSpec {
    pub fn new(sigma: f32, role: PriorRole) -> Result<Self, ModelError> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(ModelError::Prior {
                reason: format!("scale {sigma} must be positive and finite"),
            });
        }
        Ok(PriorSpec { sigma, role })
    }

    pub fn basic(sigma: f32) -> Result<Self, ModelError> {
        Self::new(sigma, PriorRole::Basic)
    }

    pub fn simple(sigma: f32) -> Result<Self, ModelError> {
        Self::new(sigma, PriorRole::Simple)
    }

    pub fn sigma(&self) -> f32 {
        self.sigma
    }

    pub fn role(&self) -> PriorRole {
        self.role
    }
}

/// Graph handles of an encoded batch: mean and clamped log-variance, both
/// (batch, latent_dim).
pub struct GaussianPosterior {
    pub mu: TensorId,
    pub log_var: TensorId,
}

fn forward_elbo(
    net: &VaeNet,
    prior: &PriorSpec,
    batch: &Tensor,
    noise: &Tensor,
) -> Result<Vec<f32>, ModelError> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let rows = ops::elbo(&mut tape, &bound, batch, prior, noise)?;
    Ok(tape.value(rows).data().to_vec())
}

fn forward_reconstruct(net: &VaeNet, batch: &Tensor) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let probs = ops::reconstruct(&mut tape, &bound, batch)?;
    Ok(tape.value(probs).clone())
}

/// A VAE with a single prior. Also the reference model the detection
/// comparisons are made against.
#[derive(Debug, Clone)]
pub struct VaeModel {
    net: VaeNet,
    prior: PriorSpec,
}

impl VaeModel {
    pub fn new(arch: Architecture, prior_sigma: f32, seed: u64) -> Result<Self, ModelError> {
        Self::from_parts(VaeNet::new(arch, seed)?, PriorSpec::basic(prior_sigma)?)
    }

    pub fn from_parts(net: VaeNet, prior: PriorSpec) -> Result<Self, ModelError> {
        if prior.role() != PriorRole::Basic {
            return Err(ModelError::Prior {
                reason: "a plain VAE's prior takes the basic role".to_string(),
            });
        }
        Ok(VaeModel { net, prior })
    }

    pub fn net(&self) -> &VaeNet {
        &self.net
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    /// Per-sample single-sample ELBO of a batch under the model prior.
    pub fn elbo_batch(&self, batch: &Tensor, noise: &Tensor) -> Result<Vec<f32>, ModelError> {
        forward_elbo(&self.net, &self.prior, batch, noise)
    }

    /// Decoder means for the posterior-mean latent of each input.
    pub fn reconstruct_batch(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        forward_reconstruct(&self.net, batch)
    }

    pub fn train(&mut self, data: &ImageDataset, cfg: &TrainConfig) -> Result<TrainLog, ModelError> {
        train::run_training(&mut self.net, &self.prior, data, &[], cfg, None)
    }

    pub fn train_with_progress(
        &mut self,
        data: &ImageDataset,
        cfg: &TrainConfig,
        progress: &mut dyn FnMut(usize, f32),
    ) -> Result<TrainLog, ModelError> {
        train::run_training(&mut self.net, &self.prior, data, &[], cfg, Some(progress))
    }
}

/// The two-prior model: shared encoder/decoder, one basic prior, and one
/// strictly narrower prior per simple dataset.
#[derive(Debug, Clone)]
pub struct BpvaeModel {
    net: VaeNet,
    basic_prior: PriorSpec,
    simple_priors: Vec<PriorSpec>,
}

impl BpvaeModel {
    pub fn new(
        arch: Architecture,
        basic_sigma: f32,
        simple_sigmas: &[f32],
        seed: u64,
    ) -> Result<Self, ModelError> {
        let basic = PriorSpec::basic(basic_sigma)?;
        let simples = simple_sigmas
            .iter()
            .map(|&s| PriorSpec::simple(s))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_parts(VaeNet::new(arch, seed)?, basic, simples)
    }

    pub fn from_parts(
        net: VaeNet,
        basic_prior: PriorSpec,
        simple_priors: Vec<PriorSpec>,
    ) -> Result<Self, ModelError> {
        if basic_prior.role() != PriorRole::Basic {
            return Err(ModelError::Prior {
                reason: "the first prior must take the basic role".to_string(),
            });
        }
        if simple_priors.is_empty() {
            return Err(ModelError::Prior {
                reason: "at least one simple prior is required".to_string(),
            });
        }
        for (k, p) in simple_priors.iter().enumerate() {
            if p.role() != PriorRole::Simple {
                return Err(ModelError::Prior {
                    reason: format!("prior {k} must take the simple role"),
                });
            }
            if p.sigma() >= basic_prior.sigma() {
                return Err(ModelError::Prior {
                    reason: format!(
                        "simple prior scale {} must be strictly below the basic scale {}",
                        p.sigma(),
                        basic_prior.sigma()
                    ),
                });
            }
        }
        Ok(BpvaeModel {
            net,
            basic_prior,
            simple_priors,
        })
    }

    pub fn net(&self) -> &VaeNet {
        &self.net
    }

    pub fn basic_prior(&self) -> &PriorSpec {
        &self.basic_prior
    }

    pub fn simple_priors(&self) -> &[PriorSpec] {
        &self.simple_priors
    }

    /// Per-sample single-sample ELBO under the basic prior; this is the
    /// detection score.
    pub fn elbo_basic_batch(&self, batch: &Tensor, noise: &Tensor) -> Result<Vec<f32>, ModelError> {
        forward_elbo(&self.net, &self.basic_prior, batch, noise)
    }

    pub fn reconstruct_batch(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        forward_reconstruct(&self.net, batch)
    }

    pub fn train(
        &mut self,
        basic: &ImageDataset,
        simples: &[&ImageDataset],
        cfg: &TrainConfig,
    ) -> Result<TrainLog, ModelError> {
        self.train_impl(basic, simples, cfg, None)
    }

    pub fn train_with_progress(
        &mut self,
        basic: &ImageDataset,
        simples: &[&ImageDataset],
        cfg: &TrainConfig,
        progress: &mut dyn FnMut(usize, f32),
    ) -> Result<TrainLog, ModelError> {
        self.train_impl(basic, simples, cfg, Some(progress))
    }

    fn train_impl(
        &mut self,
        basic: &ImageDataset,
        simples: &[&ImageDataset],
        cfg: &TrainConfig,
        progress: Option<&mut dyn FnMut(usize, f32)>,
    ) -> Result<TrainLog, ModelError> {
        if simples.len() != self.simple_priors.len() {
            return Err(ModelError::Config {
                reason: format!(
                    "{} simple datasets but {} simple priors",
                    simples.len(),
                    self.simple_priors.len()
                ),
            });
        }
        let pairs: Vec<(&ImageDataset, &PriorSpec)> = simples
            .iter()
            .copied()
            .zip(self.simple_priors.iter())
            .collect();
        train::run_training(&mut self.net, &self.basic_prior, basic, &pairs, cfg, progress)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_arch() -> Architecture {
        Architecture {
            input_hw: 8,
            latent_dim: 4,
            channels: [3, 5],
            kernel: 4,
        }
    }

    #[test]
    fn priors_must_be_positive_and_finite() {
        assert!(PriorSpec::basic(0.0).is_err());
        assert!(PriorSpec::simple(-0.5).is_err());
        assert!(PriorSpec::basic(f32::NAN).is_err());
        assert!(PriorSpec::basic(f32::INFINITY).is_err());
        assert_eq!(PriorSpec::simple(0.1).unwrap().sigma(), 0.1);
    }

    #[test]
    fn simple_scales_must_sit_strictly_below_the_basic_scale() {
        assert!(BpvaeModel::new(toy_arch(), 1.0, &[0.1], 0).is_ok());
        assert!(BpvaeModel::new(toy_arch(), 1.0, &[1.0], 0).is_err(), "equal scales");
        assert!(BpvaeModel::new(toy_arch(), 1.0, &[2.0], 0).is_err(), "inverted scales");
        assert!(BpvaeModel::new(toy_arch(), 1.0, &[0.1, 1.5], 0).is_err(), "one bad branch");
        assert!(BpvaeModel::new(toy_arch(), 1.0, &[], 0).is_err(), "no simple branch");
    }

    #[test]
    fn roles_are_enforced_when_assembling_from_parts() {
        let net = VaeNet::new(toy_arch(), 1).unwrap();
        let simple = PriorSpec::simple(0.1).unwrap();
        assert!(VaeModel::from_parts(net.clone(), simple).is_err());
        let basic = PriorSpec::basic(1.0).unwrap();
        assert!(BpvaeModel::from_parts(net.clone(), simple, vec![basic]).is_err());
        assert!(BpvaeModel::from_parts(net, basic, vec![simple]).is_ok());
    }

    #[test]
    fn scoring_is_deterministic_given_the_noise() {
        let model = BpvaeModel::new(toy_arch(), 1.0, &[0.1], 3).unwrap();
        let batch = Tensor::from_vec(&[2, 1, 8, 8], vec![0.4; 128]).unwrap();
        let noise = Tensor::from_vec(&[2, 4], vec![0.3; 8]).unwrap();
        let a = model.elbo_basic_batch(&batch, &noise).unwrap();
        let b = model.elbo_basic_batch(&batch, &noise).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|v| *v <= 0.0 && v.is_finite()));
    }

    #[test]
    fn reconstruction_keeps_the_batch_shape() {
        let model = VaeModel::new(toy_arch(), 1.0, 4).unwrap();
        let batch = Tensor::from_vec(&[3, 1, 8, 8], vec![0.25; 3 * 64]).unwrap();
        let out = model.reconstruct_batch(&batch).unwrap();
        assert_eq!(out.shape(), batch.shape());
        assert!(out.data().iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
