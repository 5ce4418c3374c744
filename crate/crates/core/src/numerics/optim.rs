use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lr, self.beta1, self.beta2, self.eps, self.weight_decay];
        ensure!(all.iter().all(|v| v.is_finite()), "optimizer hyperparameters must be finite");
        ensure!(self.lr > 0.0, "learning rate must be positive, got {}", self.lr);
        ensure!((0.0..1.0).contains(&self.beta1), "beta1 must lie in [0, 1)");
        ensure!((0.0..1.0).contains(&self.beta2), "beta2 must lie in [0, 1)");
        ensure!(self.eps > 0.0, "eps must be positive");
        ensure!(self.weight_decay >= 0.0, "weight decay must be non-negative");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    first: Vec<f32>,
    second: Vec<f32>,
}

/// AdamW state: one pair of moment buffers per registered parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step_count: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    /// Registers the trainable parameters by name and element count.
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = (&'a str, usize)>) -> Result<Self> {
        config.validate()?;
        let mut moments = BTreeMap::new();
        for (name, len) in params {
            let prev = moments.insert(
                name.to_string(),
                Moments {
                    first: vec![0.0; len],
                    second: vec![0.0; len],
                },
            );
            ensure!(prev.is_none(), "parameter {name} registered twice");
        }
        Ok(Self {
            config,
            step_count: 0,
            moments,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn registered(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }
}

/// One decoupled-weight-decay Adam update using each tensor's grad buffer.
///
/// The parameter list must name exactly the registered parameters. If any
/// gradient is non-finite nothing is modified and a numeric fault is returned.
pub fn adamw_step(params: &mut [(&str, &mut Tensor)], state: &mut OptimizerState) -> Result<()> {
    state.config.validate()?;
    ensure!(
        params.len() == state.moments.len(),
        "{} parameters supplied, {} registered",
        params.len(),
        state.moments.len()
    );
    for (name, t) in params.iter() {
        let m = state
            .moments
            .get(*name)
            .ok_or_else(|| Error::contract(format!("parameter {name} is not registered")))?;
        if m.first.len() != t.numel() {
            return Err(Error::dimension(format!(
                "parameter {name} has {} values, moments hold {}",
                t.numel(),
                m.first.len()
            )));
        }
        let g = t
            .grad()
            .ok_or_else(|| Error::contract(format!("parameter {name} has no grad buffer")))?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite gradient for {name}")));
        }
    }

    state.step_count += 1;
    let c = state.config;
    let t = state.step_count as i32;
    let bias1 = 1.0 - c.beta1.powi(t);
    let bias2 = 1.0 - c.beta2.powi(t);
    let decay = 1.0 - c.lr * c.weight_decay;
    for (name, tensor) in params.iter_mut() {
        let mom = state.moments.get_mut(*name).expect("checked above");
        let grad = tensor.grad().expect("checked above").to_vec();
        let w = tensor.data_mut();
        for i in 0..w.len() {
            let g = grad[i];
            mom.first[i] = c.beta1 * mom.first[i] + (1.0 - c.beta1) * g;
            mom.second[i] = c.beta2 * mom.second[i] + (1.0 - c.beta2) * g * g;
            let m_hat = mom.first[i] / bias1;
            let v_hat = mom.second[i] / bias2;
            w[i] = w[i] * decay - c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(w: f32, g: f32) -> Tensor {
        let mut t = Tensor::new([1], vec![w]).unwrap();
        t.set_requires_grad(true);
        t.accumulate_grad(&[g]).unwrap();
        t
    }

    fn cfg(lr: f32, wd: f32) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut p = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        p.set_requires_grad(true);
        let mut st = OptimizerState::new(cfg(0.1, 0.0), [("p", 3)]).unwrap();
        adamw_step(&mut [("p", &mut p)], &mut st).unwrap();
        assert_eq!(p.data(), &[0.5, -1.0, 2.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_param(1.0, 1.0);
        let mut st = OptimizerState::new(cfg(0.1, 0.0), [("w", 1)]).unwrap();
        adamw_step(&mut [("w", &mut p)], &mut st).unwrap();
        // bias-corrected m̂ = v̂ = 1, so the step is lr / (1 + eps)
        let want = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.data()[0] - want).abs() < 1e-7, "{}", p.data()[0]);
    }

    #[test]
    fn decoupled_decay_scales_weights() {
        let mut p = scalar_param(2.0, 0.0);
        let mut st = OptimizerState::new(cfg(0.1, 0.1), [("w", 1)]).unwrap();
        adamw_step(&mut [("w", &mut p)], &mut st).unwrap();
        assert!((p.data()[0] - 2.0 * (1.0 - 0.01)).abs() < 1e-7);
    }

    #[test]
    fn nan_gradient_rejects_whole_update() {
        let mut a = scalar_param(1.0, 1.0);
        let mut b = scalar_param(1.0, f32::NAN);
        let mut st = OptimizerState::new(cfg(0.1, 0.0), [("a", 1), ("b", 1)]).unwrap();
        let err = adamw_step(&mut [("a", &mut a), ("b", &mut b)], &mut st).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn parameter_set_must_match_registration() {
        let mut a = scalar_param(1.0, 1.0);
        let mut st = OptimizerState::new(cfg(0.1, 0.0), [("a", 1), ("b", 1)]).unwrap();
        assert!(adamw_step(&mut [("a", &mut a)], &mut st).is_err());
        let mut st = OptimizerState::new(cfg(0.1, 0.0), [("x", 1)]).unwrap();
        assert!(adamw_step(&mut [("a", &mut a)], &mut st).is_err());
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        assert!(OptimizerState::new(cfg(0.0, 0.0), [("a", 1)]).is_err());
        assert!(OptimizerState::new(cfg(f32::NAN, 0.0), [("a", 1)]).is_err());
    }

    #[test]
    fn update_is_bitwise_deterministic() {
        let run = || {
            let mut p = Tensor::new([4], vec![0.1, -0.2, 0.3, 0.7]).unwrap();
            p.set_requires_grad(true);
            let mut st = OptimizerState::new(cfg(1e-3, 0.01), [("p", 4)]).unwrap();
            for k in 0..5 {
                p.zero_grad();
                p.accumulate_grad(&[0.3f32 * k as f32, -1.0, 0.25, 1e-3]).unwrap();
                adamw_step(&mut [("p", &mut p)], &mut st).unwrap();
            }
            p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
