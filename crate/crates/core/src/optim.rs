use serde::{Deserialize, Serialize};

use crate::model::{CfModel, ModelGrads};
use crate::params::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moments, one moment buffer per parameter group.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` from matching `grads`.
    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    pub fn step_model(&mut self, model: &mut CfModel, grads: &ModelGrads) {
        let params: Vec<&mut [f64]> = model.layers_mut().iter_mut().flat_map(|l| l.param_groups_mut()).collect();
        let grads: Vec<&[f64]> = grads.iter().flat_map(|g| g.groups.iter().map(Vec::as_slice)).collect();
        self.update(params, grads);
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ModelGrads, max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.squared_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(f));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::LayerGrads;

    #[test]
    fn first_step_matches_hand_computation() {
        // Two parameters, gradients (0.5, -2.0), lr 0.1.
        let cfg = AdamConfig { learning_rate: 0.1, ..AdamConfig::default() };
        let mut adam = Adam::new(cfg);
        let mut p = vec![1.0, -1.0];
        adam.update(vec![&mut p], vec![&[0.5, -2.0]]);
        // m_hat = g, v_hat = g^2, so each step is lr * g / (|g| + eps).
        let expect0 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        let expect1 = -1.0 - 0.1 * -2.0 / (2.0 + 1e-8);
        assert!((p[0] - expect0).abs() < 1e-12);
        assert!((p[1] - expect1).abs() < 1e-12);

        // Second step with a different gradient.
        adam.update(vec![&mut p], vec![&[0.1, 0.3]]);
        let m0 = 0.9 * 0.05 + 0.1 * 0.1;
        let v0 = 0.999 * 0.001 * 0.25 + 0.001 * 0.01;
        let m_hat = m0 / (1.0 - 0.81);
        let v_hat = v0 / (1.0 - 0.999f64.powi(2));
        let expect0 = expect0 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0] - expect0).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut adam = Adam::new(AdamConfig { learning_rate: 0.0, ..AdamConfig::default() });
        let mut p = vec![0.3];
        adam.update(vec![&mut p], vec![&[5.0]]);
        assert_eq!(p, vec![0.3]);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![LayerGrads { groups: vec![vec![3.0, 4.0]] }];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].squared_norm() - 1.0).abs() < 1e-12);
    }
}
