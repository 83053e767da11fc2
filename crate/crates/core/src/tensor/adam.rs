use serde::{Deserialize, Serialize};

use super::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are allocated lazily and follow
/// the parameter order of the store they are stepped against.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn ensure_state(&mut self, sizes: impl Iterator<Item = usize>) {
        if self.m.is_empty() {
            for n in sizes {
                self.m.push(vec![0.0; n]);
                self.v.push(vec![0.0; n]);
            }
        }
    }

    /// Updates every trainable parameter of `store` from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.ensure_state(store.params().iter().map(|p| p.value.numel()));
        self.t += 1;
        let (c1, c2) = self.corrections();
        let cfg = self.config;
        for ((p, m), v) in store
            .params_mut()
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if !p.requires_grad {
                continue;
            }
            let grad = p.grad.data().to_vec();
            update(p.value.data_mut(), &grad, m, v, cfg, c1, c2);
        }
    }

    /// Single-buffer variant used for plain slices.
    pub fn step_slice(&mut self, params: &mut [f64], grads: &[f64]) {
        self.ensure_state(std::iter::once(params.len()));
        self.t += 1;
        let (c1, c2) = self.corrections();
        update(params, grads, &mut self.m[0], &mut self.v[0], self.config, c1, c2);
    }

    fn corrections(&self) -> (f64, f64) {
        let t = self.t as i32;
        (
            1.0 - self.config.beta1.powi(t),
            1.0 - self.config.beta2.powi(t),
        )
    }
}

fn update(
    x: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    cfg: AdamConfig,
    c1: f64,
    c2: f64,
) {
    for i in 0..x.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        x[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}
