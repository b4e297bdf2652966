use super::TrainConfig;
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Learning rate for 0-based `epoch`: a linear ramp from `base_lr / 10`
/// during warm-up, then step decay by `decay_factor` every `decay_every`
/// epochs.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let base = cfg.base_lr;
    if epoch < cfg.warmup_epochs {
        let start = base / 10.0;
        return start + (base - start) * epoch as f64 / cfg.warmup_epochs as f64;
    }
    let steps = (epoch - cfg.warmup_epochs) / cfg.decay_every;
    base * cfg.decay_factor.powi(steps as i32)
}

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Adam {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn from_config(params: &ParamStore, cfg: &TrainConfig) -> Self {
        Adam::new(params, cfg.beta1, cfg.beta2, cfg.eps)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from `grads` (one flat gradient per parameter, in store
    /// order). Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::dim("adam_step", &[params.len()], &[grads.len()]));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.len() != params.get(id).numel() {
                return Err(Error::dim("adam_step", params.get(id).shape(), &[g.len()]));
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(format!("{} (value {bad})", params.name(id))));
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let w = params.get_mut(id).data_mut();
            for i in 0..w.len() {
                let g = grads[k][i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
