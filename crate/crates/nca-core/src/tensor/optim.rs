//! Adam with bias correction, plus per-tensor gradient normalization.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one fixed-order list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step_count: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    /// Zeroed moments mirroring the given parameter shapes.
    pub fn new(params: &[&Tensor], hyper: AdamHyper) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step_count: 0,
            hyper,
        }
    }

    /// One Adam update. `params` and `grads` must be in the order the
    /// state was created with.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::config(format!(
                "adam_step expects {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), (m, v)) in params
            .iter()
            .zip(grads)
            .zip(self.m.iter().zip(&self.v))
        {
            if p.numel() != m.len() || g.numel() != v.len() {
                return Err(Error::config("adam_step shape mismatch with state"));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
                v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
            }
        }
        Ok(())
    }
}

/// Divides each gradient tensor by its own L2 norm plus 1e-8.
///
/// Keeps update magnitudes comparable across rollout lengths; a zero
/// gradient stays zero.
pub fn grad_normalize(grads: &mut [Tensor]) {
    for g in grads {
        let norm = g.data.iter().map(|&x| x * x).sum::<f32>().sqrt();
        let inv = 1.0 / (norm + 1e-8);
        for x in &mut g.data {
            *x *= inv;
        }
    }
}
