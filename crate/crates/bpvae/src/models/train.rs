//! Joint training loop: every step takes one batch of the basic dataset and
//! one batch from each simple dataset, builds the combined objective on a
//! fresh tape, and applies one Adam update. Shorter simple datasets cycle
//! with reshuffling. Everything is driven by the config seed, so a run is
//! reproducible bit for bit.

use super::net::VaeNet;
use super::{ops, ModelError, PriorSpec};
use crate::data::{CycleBatches, ImageDataset, IMAGE_HW};
use crate::tensor::{AdamState, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Alternative objective: evaluate every simple branch's KL against the
    /// basic prior instead of the branch's own prior. Off by default; kept
    /// as a switch so the two readings of the joint objective can be
    /// compared experimentally.
    pub simple_kl_to_basic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-4,
            seed: 0,
            simple_kl_to_basic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 {
            return Err(ModelError::Config {
                reason: "batch_size must be positive".to_string(),
            });
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ModelError::Config {
                reason: format!("learning_rate {} must be positive and finite", self.learning_rate),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    /// Mean joint loss per epoch, in training order.
    pub epoch_mean_loss: Vec<f32>,
}

/// Distinct, stable rng streams derived from the config seed.
fn stream_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub(crate) fn gaussian_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    Tensor::from_vec(shape, data).expect("shape is caller-controlled")
}

pub(crate) fn run_training(
    net: &mut VaeNet,
    basic_prior: &PriorSpec,
    basic_ds: &ImageDataset,
    simples: &[(&ImageDataset, &PriorSpec)],
    cfg: &TrainConfig,
    mut progress: Option<&mut dyn FnMut(usize, f32)>,
) -> Result<TrainLog, ModelError> {
    cfg.validate()?;
    if net.arch().input_hw != IMAGE_HW {
        return Err(ModelError::Config {
            reason: format!(
                "training data is {IMAGE_HW}x{IMAGE_HW} but the model expects {}x{}",
                net.arch().input_hw,
                net.arch().input_hw
            ),
        });
    }
    if cfg.batch_size > basic_ds.len() {
        return Err(ModelError::Config {
            reason: format!(
                "batch_size {} exceeds the basic dataset of {} images",
                cfg.batch_size,
                basic_ds.len()
            ),
        });
    }

    let latent = net.arch().latent_dim;
    let mut adam = AdamState::new(&net.param_sizes(), cfg.learning_rate);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0x6E01));
    let mut cycles: Vec<CycleBatches<'_>> = simples
        .iter()
        .enumerate()
        .map(|(k, (ds, _))| CycleBatches::new(ds, stream_seed(cfg.seed, 0xC1C0 + k as u64)))
        .collect();

    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0f64;
        let mut steps = 0usize;
        let order_seed = stream_seed(cfg.seed, 0xE90Cu64.wrapping_add(epoch as u64));
        let batches = basic_ds
            .batch_iter(cfg.batch_size, order_seed, true)
            .map_err(|e| ModelError::Config { reason: e.to_string() })?;

        for basic_batch in batches {
            let b = basic_batch.shape()[0];
            let basic_noise = gaussian_tensor(&mut noise_rng, &[b, latent]);
            let simple_batches: Vec<(Tensor, &PriorSpec, Tensor)> = cycles
                .iter_mut()
                .zip(simples)
                .map(|(cycle, (_, prior))| {
                    let batch = cycle.next_batch(cfg.batch_size);
                    let noise = gaussian_tensor(&mut noise_rng, &[cfg.batch_size, latent]);
                    let kl_prior = if cfg.simple_kl_to_basic { basic_prior } else { *prior };
                    (batch, kl_prior, noise)
                })
                .collect();

            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, true);
            let simple_refs: Vec<(&Tensor, &PriorSpec, &Tensor)> = simple_batches
                .iter()
                .map(|(batch, prior, noise)| (batch, *prior, noise))
                .collect();
            let loss = ops::bpvae_loss(
                &mut tape,
                &bound,
                (&basic_batch, basic_prior, &basic_noise),
                &simple_refs,
            )?;

            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(ModelError::Diverged { epoch, loss: loss_val });
            }
            tape.backward(loss)?;
            net.absorb_grads(&tape, &bound)?;
            adam.step(net.params_mut())?;
            for p in net.params_mut() {
                p.value.clear_grad();
            }

            loss_sum += loss_val as f64;
            steps += 1;
        }

        let mean = (loss_sum / steps as f64) as f32;
        if !mean.is_finite() {
            return Err(ModelError::Diverged { epoch, loss: mean });
        }
        log.epoch_mean_loss.push(mean);
        if let Some(cb) = progress.as_deref_mut() {
            cb(epoch, mean);
        }
    }
    Ok(log)
}
