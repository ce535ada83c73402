//! Adam with bias correction, one moment pair per parameter tensor.

use super::{Param, TensorError};

#[derive(Debug, Clone)]
pub struct AdamState {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step_count: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    /// Fresh state with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
    pub fn new(param_sizes: &[usize], lr: f32) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every parameter from its accumulated gradient.
    /// The shared step counter advances once per call, so all parameters see
    /// the same bias correction. Gradients are left untouched; the caller
    /// clears them.
    pub fn step(&mut self, params: &mut [Param]) -> Result<(), TensorError> {
        if params.len() != self.m.len() {
            return Err(TensorError::AdamStateMismatch {
                index: params.len().min(self.m.len()),
                param: params.len(),
                state: self.m.len(),
            });
        }
        self.step_count += 1;
        let c1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let c2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let n = p.value.numel();
            if self.m[i].len() != n {
                return Err(TensorError::AdamStateMismatch {
                    index: i,
                    param: n,
                    state: self.m[i].len(),
                });
            }
            let grad = match p.value.grad() {
                Some(g) => g.to_vec(),
                None => return Err(TensorError::AdamMissingGrad { index: i }),
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = p.value.data_mut();
            for j in 0..n {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
