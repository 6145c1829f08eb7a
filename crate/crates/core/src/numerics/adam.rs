use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Adam moment estimates for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zeroed moments shaped after `shapes` (one length per tensor).
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        AdamState {
            config,
            step_count: 0,
            first_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// One bias-corrected Adam update.
    ///
    /// A non-finite gradient aborts the step before anything is modified.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.first_moment.len(),
                actual: params.len().min(grads.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::DimensionMismatch {
                    expected: m.len(),
                    actual: g.len(),
                });
            }
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("adam gradient"));
        }

        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                p[j] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut state = AdamState::new(AdamConfig::with_learning_rate(0.001), &[3]);
        let mut p = vec![1.0, 2.0, 3.0];
        state.step(&mut [&mut p], &[&[1.0, 1.0, 1.0]]).unwrap();
        for (after, before) in p.iter().zip([1.0, 2.0, 3.0]) {
            assert!((before - after - 0.001).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut state = AdamState::new(AdamConfig::default(), &[2]);
        let mut p = vec![0.5, -0.5];
        state.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![0.5, -0.5]);
    }

    #[test]
    fn opposite_gradients_move_symmetrically() {
        let mut state = AdamState::new(AdamConfig::default(), &[2]);
        let mut p = vec![0.0, 0.0];
        state.step(&mut [&mut p], &[&[1.0, -1.0]]).unwrap();
        assert!(p[0] < 0.0 && p[1] > 0.0);
        assert_eq!(p[0], -p[1]);
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut state = AdamState::new(AdamConfig::default(), &[2]);
        let mut p = vec![1.0, 1.0];
        let err = state.step(&mut [&mut p], &[&[f64::NAN, 1.0]]);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(state.step_count, 0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut state = AdamState::new(AdamConfig::default(), &[2]);
        let mut p = vec![1.0, 1.0, 1.0];
        assert!(state.step(&mut [&mut p], &[&[1.0, 1.0, 1.0]]).is_err());
    }
}
