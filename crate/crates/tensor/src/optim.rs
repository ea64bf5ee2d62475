use crate::graph::Gradients;
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.997,
            eps: 1e-9,
            clip_norm: Some(5.0),
        }
    }
}

/// One bias-corrected Adam update on flat buffers. `t` is the 1-based step.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..params.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam over a whole [`ParamStore`]. Parameters without a gradient in a step
/// are left untouched and keep their moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> f64 {
        self.t += 1;
        let norm = grads.global_norm();
        let factor = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, g) in grads.params() {
            let value = store.get_mut(id);
            let n = value.numel();
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let scaled;
            let gdata = if factor != 1.0 {
                scaled = g.data().iter().map(|x| x * factor).collect::<Vec<_>>();
                &scaled[..]
            } else {
                g.data()
            };
            adam_step(
                value.data_mut(),
                gdata,
                m,
                v,
                self.config.lr,
                self.config.beta1,
                self.config.beta2,
                self.config.eps,
                self.t,
            );
        }
        norm
    }
}
