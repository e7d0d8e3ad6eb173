use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::math::sqrt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_dim("adam parameters", self.m.len(), params.len())?;
        check_dim("adam gradients", self.m.len(), grads.len())?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, f64::from(t));
        let c2 = 1.0 - libm::pow(self.beta2, f64::from(t));
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (sqrt(v_hat) + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params() {
        let mut s = AdamState::new(3, 0.1);
        let mut p = [1.0, -2.0, 3.0];
        s.update(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, [1.0, -2.0, 3.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let lr = 1e-3;
        let mut s = AdamState::new(3, lr);
        let mut p = [0.0; 3];
        s.update(&mut p, &[0.5, -3.0, 2e-2]).unwrap();
        for (v, sign) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - sign * lr).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn update_is_deterministic() {
        let s0 = AdamState::new(2, 0.01);
        let (mut a, mut b) = (s0.clone(), s0);
        let (mut pa, mut pb) = ([0.3, 0.1], [0.3, 0.1]);
        a.update(&mut pa, &[0.2, -0.4]).unwrap();
        b.update(&mut pb, &[0.2, -0.4]).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }
}
