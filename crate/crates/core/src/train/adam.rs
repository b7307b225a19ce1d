//! Adam with bias correction, over a [`ParamSet`]/[`GradStore`] pair.

use crate::nn::{GradStore, ParamSet};
use crate::tensor::TensorError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second-moment buffers plus the update counter, laid out like the
/// parameter set they track.
#[derive(Clone)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    /// Flattened moments in parameter order, for persistence.
    pub fn flat_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let flat = |slots: &Vec<Vec<f64>>| slots.iter().flatten().copied().collect();
        (flat(&self.m), flat(&self.v))
    }

    /// Rebuilds the state from flattened moments (inverse of
    /// [`flat_moments`](Self::flat_moments)).
    pub fn from_flat(
        params: &ParamSet,
        step: u64,
        m: &[f64],
        v: &[f64],
    ) -> Result<Self, TensorError> {
        let total = params.total_elems();
        if m.len() != total || v.len() != total {
            return Err(TensorError::Config(format!(
                "optimizer state holds {} moment values, parameters need {total}",
                m.len()
            )));
        }
        let mut state = Self::new(params);
        state.step = step;
        let mut offset = 0;
        for (i, (_, t)) in params.iter().enumerate() {
            let n = t.numel();
            state.m[i].copy_from_slice(&m[offset..offset + n]);
            state.v[i].copy_from_slice(&v[offset..offset + n]);
            offset += n;
        }
        Ok(state)
    }
}

/// One Adam update at learning rate `lr`. Rejects non-finite gradients
/// before touching any parameter, naming the offending tensor.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &GradStore,
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<(), TensorError> {
    for id in params.ids() {
        for (i, &gv) in grads.slot(id).iter().enumerate() {
            if !gv.is_finite() {
                return Err(TensorError::NonFinite {
                    context: format!("gradient of parameter `{}`", params.name(id)),
                    index: i,
                    value: gv,
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    debug_assert!(t >= 1.0);
    for id in params.ids() {
        let g = grads.slot(id);
        let m = &mut state.m[id.index()];
        let v = &mut state.v[id.index()];
        let p = params.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
