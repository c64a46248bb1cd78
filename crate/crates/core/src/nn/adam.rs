use serde::{Deserialize, Serialize};

use super::{ParamStore, Parameter};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update. The gradient buffer is zeroed afterwards.
pub fn adam_step(p: &mut Parameter, cfg: &AdamConfig) {
    p.step_count += 1;
    let t = p.step_count as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let grad = p.grad.data();
    let m = p.adam_m.data_mut();
    for (m, &g) in m.iter_mut().zip(grad) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    }
    let v = p.adam_v.data_mut();
    for (v, &g) in v.iter_mut().zip(grad) {
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
    }
    let (m, v) = (p.adam_m.data(), p.adam_v.data());
    for ((x, &m), &v) in p.value.data_mut().iter_mut().zip(m).zip(v) {
        *x -= cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
    }
    p.grad.data_mut().fill(0.0);
}

impl ParamStore {
    pub fn adam_step_all(&mut self, cfg: &AdamConfig) {
        for p in self.iter_mut() {
            adam_step(p, cfg);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Parameter::new("w", Tensor::row_vector(vec![1.5, -2.0]));
        adam_step(&mut p, &AdamConfig { lr: 0.1, ..Default::default() });
        assert_eq!(p.value.data(), &[1.5, -2.0]);
        assert_eq!(p.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let cfg = AdamConfig { lr: 1e-3, ..Default::default() };
        let mut p = Parameter::new("w", Tensor::row_vector(vec![0.0, 0.0, 0.0]));
        p.grad = Tensor::row_vector(vec![0.7, -3.0, 1e-2]);
        adam_step(&mut p, &cfg);
        // m_hat / sqrt(v_hat) = g / |g| after bias correction
        for (&x, s) in p.value.data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - s * cfg.lr).abs() < 1e-9, "{x}");
        }
        assert!(p.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn quadratic_loss_decreases_monotonically() {
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        let mut p = Parameter::new("x", Tensor::scalar(0.0));
        let loss = |x: f64| (x - 3.0).powi(2);
        let mut prev = loss(0.0);
        for _ in 0..60 {
            let x = p.value.data()[0];
            p.grad = Tensor::scalar(2.0 * (x - 3.0));
            adam_step(&mut p, &cfg);
            let cur = loss(p.value.data()[0]);
            assert!(cur < prev);
            prev = cur;
        }
    }
}
