use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Parameters without a gradient only receive weight decay.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.0;
            let p = params.get_mut(id).data_mut();
            let decay = (1.0 - lr * c.weight_decay) as f32;
            let Some(g) = grads.get(i).and_then(Option::as_ref) else {
                p.iter_mut().for_each(|x| *x *= decay);
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((x, &gr), mi), vi) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = (c.beta1 as f32) * *mi + (1.0 - c.beta1 as f32) * gr;
                *vi = (c.beta2 as f32) * *vi + (1.0 - c.beta2 as f32) * gr * gr;
                let mhat = *mi as f64 / bc1;
                let vhat = *vi as f64 / bc2;
                *x = *x * decay - (lr * mhat / (vhat.sqrt() + c.eps)) as f32;
            }
        }
    }

    /// Moments flattened in parameter order, for checkpointing.
    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    pub fn restore(config: AdamWConfig, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Self {
        Self { config, step, m, v }
    }
}
