//! Convolutional encoder/decoder parameter container.
//!
//! Encoder: two stride-2 same-padded convolutions with LeakyReLU, then one
//! dense layer emitting mean and log-variance side by side. Decoder mirrors
//! it: dense, LeakyReLU, two stride-2 transposed convolutions, sigmoid. The
//! parameter order is fixed and shared by the optimizer and the checkpoint
//! format.

use super::ModelError;
use crate::tensor::{Param, Tape, Tensor, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    /// Input images are (1, input_hw, input_hw); must be a multiple of 4 so
    /// two stride-2 stages land on whole extents.
    pub input_hw: usize,
    pub latent_dim: usize,
    /// Channel widths of the two convolution stages.
    pub channels: [usize; 2],
    /// Square kernel extent; even, so stride-2 same padding splits evenly.
    pub kernel: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            input_hw: 32,
            latent_dim: 64,
            channels: [32, 64],
            kernel: 4,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_hw < 4 || !self.input_hw.is_multiple_of(4) {
            return Err(ModelError::Config {
                reason: format!("input extent {} must be a positive multiple of 4", self.input_hw),
            });
        }
        if self.latent_dim == 0 {
            return Err(ModelError::Config {
                reason: "latent_dim must be positive".to_string(),
            });
        }
        if self.channels.contains(&0) {
            return Err(ModelError::Config {
                reason: "channel widths must be positive".to_string(),
            });
        }
        if self.kernel == 0 || !self.kernel.is_multiple_of(2) {
            return Err(ModelError::Config {
                reason: format!("kernel {} must be even for stride-2 same padding", self.kernel),
            });
        }
        Ok(())
    }

    /// Spatial extent after both stride-2 stages.
    pub fn bottleneck_hw(&self) -> usize {
        self.input_hw / 4
    }

    /// Flattened encoder feature width.
    pub fn feature_dim(&self) -> usize {
        self.channels[1] * self.bottleneck_hw() * self.bottleneck_hw()
    }

    /// Transposed convolutions double the extent when pad = (k - 2) / 2.
    pub fn deconv_pad(&self) -> usize {
        (self.kernel - 2) / 2
    }

    fn param_specs(&self) -> Vec<(&'static str, Vec<usize>)> {
        let [c1, c2] = self.channels;
        let k = self.kernel;
        let l = self.latent_dim;
        let f = self.feature_dim();
        vec![
            ("enc.conv1.w", vec![c1, 1, k, k]),
            ("enc.conv1.b", vec![c1]),
            ("enc.conv2.w", vec![c2, c1, k, k]),
            ("enc.conv2.b", vec![c2]),
            ("enc.fc.w", vec![f, 2 * l]),
            ("enc.fc.b", vec![2 * l]),
            ("dec.fc.w", vec![l, f]),
            ("dec.fc.b", vec![f]),
            ("dec.deconv1.w", vec![c2, c1, k, k]),
            ("dec.deconv1.b", vec![c1]),
            ("dec.deconv2.w", vec![c1, 1, k, k]),
            ("dec.deconv2.b", vec![1]),
        ]
    }
}

/// Indices into the fixed parameter order.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Slot {
    EncConv1W = 0,
    EncConv1B,
    EncConv2W,
    EncConv2B,
    EncFcW,
    EncFcB,
    DecFcW,
    DecFcB,
    DecDeconv1W,
    DecDeconv1B,
    DecDeconv2W,
    DecDeconv2B,
}

pub const PARAM_COUNT: usize = 12;

#[derive(Debug, Clone)]
pub struct VaeNet {
    arch: Architecture,
    params: Vec<Param>,
}

impl VaeNet {
    /// Fresh network: weights Xavier-uniform (seeded), biases zero.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let t = if shape.len() == 1 {
                    Tensor::zeros(&shape).expect("bias shapes are nonzero")
                } else {
                    let (fan_in, fan_out) = fans(&shape);
                    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
                    let data = (0..shape.iter().product::<usize>())
                        .map(|_| rng.random_range(-bound..bound))
                        .collect();
                    Tensor::from_vec(&shape, data).expect("init shape is consistent")
                };
                Param::new(name, t)
            })
            .collect();
        Ok(VaeNet { arch, params })
    }

    /// Rebuilds a network from stored parameters, verifying names and shapes.
    pub fn from_params(arch: Architecture, params: Vec<Param>) -> Result<Self, ModelError> {
        arch.validate()?;
        let specs = arch.param_specs();
        if params.len() != specs.len() {
            return Err(ModelError::Config {
                reason: format!("expected {} parameters, got {}", specs.len(), params.len()),
            });
        }
        for (p, (name, shape)) in params.iter().zip(&specs) {
            if p.name != *name || p.value.shape() != shape.as_slice() {
                return Err(ModelError::Config {
                    reason: format!(
                        "parameter '{}' {:?} does not match expected '{}' {:?}",
                        p.name,
                        p.value.shape(),
                        name,
                        shape
                    ),
                });
            }
        }
        Ok(VaeNet { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.value.numel()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.data().iter().all(|v| v.is_finite()))
    }

    /// Pushes every parameter onto a tape. Trainable bindings keep
    /// requires_grad so a later backward pass reaches them; frozen bindings
    /// are constants, which keeps scoring passes cheap.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundNet {
        let ids = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.value.clone();
                t.clear_grad();
                if trainable {
                    tape.leaf(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        BoundNet { arch: self.arch, ids }
    }

    /// Copies gradients accumulated on `tape` back into the parameters.
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &BoundNet) -> Result<(), ModelError> {
        for (p, &id) in self.params.iter_mut().zip(&bound.ids) {
            match tape.grad(id) {
                Some(g) => p.value.accumulate_grad(g),
                None => {
                    return Err(ModelError::Config {
                        reason: format!("parameter '{}' received no gradient", p.name),
                    })
                }
            }
        }
        Ok(())
    }
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        // Dense weights are (in, out).
        2 => (shape[0], shape[1]),
        // Convolution kernels count the receptive field per channel.
        4 => {
            let rf = shape[2] * shape[3];
            (shape[1] * rf, shape[0] * rf)
        }
        _ => unreachable!("weights are rank 2 or 4"),
    }
}

/// A network's parameters registered on one tape.
pub struct BoundNet {
    pub(crate) arch: Architecture,
    ids: Vec<TensorId>,
}

impl BoundNet {
    pub(crate) fn id(&self, slot: Slot) -> TensorId {
        self.ids[slot as usize]
    }
}
