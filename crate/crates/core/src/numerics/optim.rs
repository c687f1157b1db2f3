use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Moment estimates for one ordered list of parameter arrays.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_shapes(lens: impl IntoIterator<Item = usize>) -> Self {
        let lens: Vec<usize> = lens.into_iter().collect();
        Self {
            step: 0,
            first_moment: lens.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam step with decoupled weight decay.
///
/// `params[i]` and `grads[i]` must have the same length, and the state must
/// either be empty (moments are then allocated) or aligned with `params`.
pub fn adam_update(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    adam_update_grouped(params, grads, state, &vec![lr; params.len()], cfg)
}

/// Adam step where parameter array `i` uses its own rate `lrs[i]`.
pub fn adam_update_grouped(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    lrs: &[f64],
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != lrs.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} rates",
            params.len(),
            grads.len(),
            lrs.len()
        )));
    }
    if state.first_moment.is_empty() && state.step == 0 {
        *state = AdamState::for_shapes(params.iter().map(|p| p.len()));
    }
    if state.first_moment.len() != params.len() || state.second_moment.len() != params.len() {
        return Err(Error::Shape("optimizer state not aligned with parameters".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.first_moment[i].len() != p.len() || state.second_moment[i].len() != p.len() {
            return Err(Error::Shape(format!("parameter {i}: length mismatch")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let lr = lrs[i];
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= lr * cfg.weight_decay * p[j];
            p[j] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Linear warmup to `peak`, then polynomial decay to `end_lr` at `max_updates`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_updates: usize,
    pub max_updates: usize,
    pub power: f64,
    pub end_lr: f64,
}

impl LrSchedule {
    /// Learning rate for 1-based update number `update`.
    pub fn lr(&self, update: usize) -> f64 {
        if self.warmup_updates > 0 && update <= self.warmup_updates {
            return self.peak * update as f64 / self.warmup_updates as f64;
        }
        if update >= self.max_updates {
            return self.end_lr;
        }
        let span = (self.max_updates - self.warmup_updates) as f64;
        let frac = 1.0 - (update - self.warmup_updates) as f64 / span;
        (self.peak - self.end_lr) * frac.powf(self.power) + self.end_lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay() -> AdamConfig {
        AdamConfig { weight_decay: 0.0, ..AdamConfig::default() }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = vec![1.5, -2.0];
        let mut st = AdamState::default();
        for _ in 0..3 {
            adam_update(&mut [&mut p], &[&[0.0, 0.0]], &mut st, 0.1, &no_decay()).unwrap();
        }
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn first_step_hand_computed() {
        // m̂ = 1, v̂ = 1 after bias correction: p' = 1 - 0.1 * 1 / (1 + 1e-8)
        let mut p = vec![1.0];
        let mut st = AdamState::default();
        adam_update(&mut [&mut p], &[&[1.0]], &mut st, 0.1, &no_decay()).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert_eq!(st.step, 1);
        adam_update(&mut [&mut p], &[&[1.0]], &mut st, 0.1, &no_decay()).unwrap();
        assert_eq!(st.step, 2);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = vec![1.0, 2.0];
        let mut st = AdamState::default();
        assert!(adam_update(&mut [&mut p], &[&[1.0]], &mut st, 0.1, &no_decay()).is_err());
    }

    #[test]
    fn grouped_rates_scale_each_array() {
        let (mut a, mut b) = (vec![1.0], vec![1.0]);
        let mut st = AdamState::default();
        adam_update_grouped(&mut [&mut a, &mut b], &[&[1.0], &[1.0]], &mut st, &[0.1, 0.01], &no_decay()).unwrap();
        assert!((a[0] - 0.9).abs() < 1e-6);
        assert!((b[0] - 0.99).abs() < 1e-6);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn decoupled_weight_decay_shrinks_params() {
        let mut p = vec![2.0];
        let mut st = AdamState::default();
        let cfg = AdamConfig { weight_decay: 0.5, ..AdamConfig::default() };
        adam_update(&mut [&mut p], &[&[0.0]], &mut st, 0.1, &cfg).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule { peak: 1e-3, warmup_updates: 10, max_updates: 100, power: 1.0, end_lr: 0.0 };
        assert!((s.lr(10) - 1e-3).abs() < 1e-18);
        assert!((s.lr(5) - 5e-4).abs() < 1e-18);
        assert!(s.lr(100) <= 1e-9);
        assert!((s.lr(55) - 5e-4).abs() < 1e-15);
    }
}
