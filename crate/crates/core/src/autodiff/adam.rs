use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Grads, ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update at the configured learning rate.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, grads, lr)
    }

    /// One update with an explicit learning rate (for schedules).
    pub fn step_with_lr(&mut self, params: &mut ParamSet, grads: &Grads, lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!(
                    "{} params, {} grads, {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for &id in &ids {
            let (p, g) = (params.get(id), grads.get(id));
            if p.shape() != g.shape() || p.shape() != self.m[id.0].shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    detail: format!(
                        "{}: param {:?}, grad {:?}",
                        params.name(id),
                        p.shape(),
                        g.shape()
                    ),
                });
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.step as f64);
        for id in ids {
            let g = grads.get(id).data();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn one_param(values: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        let n = values.len();
        p.insert("w", Tensor::new(vec![n], values).unwrap()).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one_param(vec![1.0, -2.0, 3.5]);
        let before = p.clone();
        let mut st = AdamState::new(&p, AdamConfig::default());
        let g = p.zero_grads();
        for _ in 0..5 {
            st.step(&mut p, &g).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut p = one_param(vec![0.0, 0.0]);
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&p, cfg);
        let mut g = p.zero_grads();
        g.get_mut(p.id("w").unwrap()).data_mut().copy_from_slice(&[0.5, -2.0]);
        let mut last = p.clone();
        for _ in 0..200 {
            st.step(&mut p, &g).unwrap();
            let d0 = last.by_name("w").unwrap().data()[0] - p.by_name("w").unwrap().data()[0];
            let d1 = last.by_name("w").unwrap().data()[1] - p.by_name("w").unwrap().data()[1];
            assert!((d0 - 1e-3).abs() < 1e-9 && (d1 + 1e-3).abs() < 1e-9, "{d0} {d1}");
            last = p.clone();
        }
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let mut p = one_param(vec![0.3, 0.1]);
            let mut st = AdamState::new(&p, AdamConfig::default());
            let mut traj = Vec::new();
            for k in 0..20 {
                let mut g = p.zero_grads();
                let w = p.by_name("w").unwrap().data().to_vec();
                g.get_mut(p.id("w").unwrap())
                    .data_mut()
                    .copy_from_slice(&[2.0 * w[0] + k as f64 * 0.01, w[1] - 0.5]);
                st.step(&mut p, &g).unwrap();
                traj.extend_from_slice(p.by_name("w").unwrap().data());
            }
            traj
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut p = one_param(vec![1.0, 2.0]);
        let other = one_param(vec![1.0, 2.0, 3.0]);
        let mut st = AdamState::new(&p, AdamConfig::default());
        assert!(st.step(&mut p, &other.zero_grads()).is_err());
    }
}
