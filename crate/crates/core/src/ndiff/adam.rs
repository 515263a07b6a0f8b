use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::params::ParamVec;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment estimates for one parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// In-place bias-corrected Adam update.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape("adam parameters", self.m.len(), params.len()));
        }
        if grad.len() != params.len() {
            return Err(Error::shape("adam gradient", params.len(), grad.len()));
        }
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
        Ok(())
    }
}

/// Functional form: returns the updated parameters and optimizer state.
pub fn adam_step(
    state: &AdamState,
    params: &ParamVec,
    grad: &[f64],
    lr: f64,
) -> Result<(ParamVec, AdamState)> {
    let mut state = state.clone();
    let mut values = params.values().to_vec();
    state.update(&mut values, grad, lr)?;
    Ok((ParamVec::new(params.manifest().clone(), values)?, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        let start = p.clone();
        s.update(&mut p, &[0.3, -7.0, 1e-3], 0.01).unwrap();
        for ((a, b), g) in p.iter().zip(&start).zip([0.3f64, -7.0, 1e-3]) {
            let delta = b - a;
            assert!((delta - 0.01 * g.signum()).abs() < 1e-7, "{delta}");
        }
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = AdamState::new(2);
        let mut p = vec![0.25, -4.0];
        s.update(&mut p, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(p, vec![0.25, -4.0]);
    }

    #[test]
    fn shape_and_lr_errors() {
        let mut s = AdamState::new(2);
        let mut p = vec![0.0; 2];
        assert!(matches!(s.update(&mut p, &[1.0], 0.1), Err(Error::Shape { .. })));
        assert!(matches!(s.update(&mut p, &[1.0, 1.0], 0.0), Err(Error::Config(_))));
        let mut short = vec![0.0; 3];
        assert!(s.update(&mut short, &[0.0; 3], 0.1).is_err());
    }

    /// Reference values from a standalone scalar Adam recurrence.
    #[test]
    fn three_steps_match_reference() {
        // x0 = 0, g = 1 each step, lr = 0.1, computed with a separate numpy loop.
        let expected = [
            -0.099_999_999_000_000_02,
            -0.199_999_997_999_999_35,
            -0.299_999_996_999_999_35,
        ];
        let mut s = AdamState::new(1);
        let mut p = vec![0.0];
        for want in expected {
            s.update(&mut p, &[1.0], 0.1).unwrap();
            assert!((p[0] - want).abs() < 1e-14, "{} vs {want}", p[0]);
        }
    }
}
