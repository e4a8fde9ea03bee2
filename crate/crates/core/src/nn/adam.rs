use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8, batch_size: 128 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr > 0.0 && unit(self.beta1) && unit(self.beta2) && self.eps > 0.0 && self.batch_size > 0) {
            return Err(Error::Config(format!("invalid Adam configuration {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [T], grads: &[T], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::invalid(format!(
                "gradient length {} does not match {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i].to_f64().unwrap();
            let m = cfg.beta1 * self.m[i].to_f64().unwrap() + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * self.v[i].to_f64().unwrap() + (1.0 - cfg.beta2) * g * g;
            self.m[i] = lit(m);
            self.v[i] = lit(v);
            let update = cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
            params[i] -= lit(update);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut st = AdamState::<f32>::new(3);
        let mut p = vec![1.0, 2.0, 3.0];
        st.step(&mut p, &[0.0; 3], &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::default();
        for g in [0.3f64, -7.0, 1e-3] {
            let mut st = AdamState::<f64>::new(1);
            let mut p = vec![0.0];
            st.step(&mut p, &[g], &cfg).unwrap();
            let want = cfg.lr * g.abs() / (g.abs() + cfg.eps);
            assert!((p[0].abs() - want).abs() < 1e-12);
            assert_eq!(p[0].signum(), -g.signum());
        }
    }

    #[test]
    fn quadratic_converges() {
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut st = AdamState::<f64>::new(1);
        let mut w = vec![0.0];
        let mut reached = None;
        for k in 1..=500 {
            let g = 2.0 * (w[0] - 3.0);
            st.step(&mut w, &[g], &cfg).unwrap();
            if (w[0] - 3.0f64).abs() < 1e-2 && reached.is_none() {
                reached = Some(k);
            }
        }
        assert!(reached.is_some());
        assert!((w[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn length_mismatch() {
        let mut st = AdamState::<f32>::new(2);
        let mut p = vec![0.0; 2];
        assert!(st.step(&mut p, &[0.0], &AdamConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AdamConfig::default().validate().is_ok());
        assert!(AdamConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { lr: 0.0, ..Default::default() }.validate().is_err());
    }
}
