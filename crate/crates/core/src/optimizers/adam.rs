use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(10.0),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::config("Adam betas must lie in (0, 1)"));
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return Err(Error::config("gradient clip must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }
}

pub fn global_norm(grad: &[f64]) -> f64 {
    grad.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grad` in place so its global norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = global_norm(grad);
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// One bias-corrected Adam update that descends `grad` with learning rate `lr`.
pub fn adam_step_lr(
    phi: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if phi.len() != grad.len() || state.m.len() != phi.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "phi {} grad {} moments {}",
                phi.len(),
                grad.len(),
                state.m.len()
            ),
        ));
    }
    let mut g = grad.to_vec();
    if let Some(c) = cfg.clip {
        clip_global_norm(&mut g, c);
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            op: "adam_step",
            phase: "backward",
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..phi.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        phi[i] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

pub fn adam_step(
    phi: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    adam_step_lr(phi, grad, state, cfg, cfg.learning_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            clip: None,
            ..AdamConfig::default()
        };
        let mut phi = vec![1.0, 1.0, 1.0];
        let mut st = AdamState::new(3);
        adam_step(&mut phi, &[3.0, -0.002, 0.0], &mut st, &cfg).unwrap();
        assert!((phi[0] - 0.9).abs() < 1e-8);
        assert!((phi[1] - 1.1).abs() < 1e-5);
        assert_eq!(phi[2], 1.0);
    }

    #[test]
    fn clipping_preserves_direction() {
        let mut g = vec![30.0, -40.0];
        let before = clip_global_norm(&mut g, 10.0);
        assert_eq!(before, 50.0);
        assert!((global_norm(&g) - 10.0).abs() < 1e-12);
        assert!((g[0] / g[1] + 0.75).abs() < 1e-15);
        let mut small = vec![1.0, 1.0];
        clip_global_norm(&mut small, 10.0);
        assert_eq!(small, vec![1.0, 1.0]);
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        assert!(AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        }
        .validate()
        .is_err());
        assert!(AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        }
        .validate()
        .is_err());
        let mut st = AdamState::new(1);
        assert!(adam_step(
            &mut [0.0, 0.0],
            &[1.0, 1.0],
            &mut st,
            &AdamConfig::default()
        )
        .is_err());
    }
}
