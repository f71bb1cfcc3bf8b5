use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::nn::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-8,
            clip_norm: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Mat<T>>,
    pub v: Vec<Mat<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| Mat::zeros(p.dim()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update. `grads[i]` belongs to the i-th parameter in store
    /// order; `None` means no gradient reached it.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Option<Mat<T>>]) -> f64 {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|e| e.f64() * e.f64()).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let step_size = T::c(c.lr / bc1);
        let eps = T::c(c.eps);
        let inv_bc2 = T::c(1.0 / bc2);
        let clip = T::c(clip);
        for ((p, g), (m, v)) in params
            .values_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let Some(g) = g else { continue };
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g * clip;
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let vhat = (*v * inv_bc2).sqrt();
                    *p = *p - step_size * *m / (vhat + eps);
                });
        }
        norm
    }
}
