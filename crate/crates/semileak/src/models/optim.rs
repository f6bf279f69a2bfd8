//! Parameter update rules.

use crate::error::{Error, Result};

/// Classic momentum SGD with decoupled L2 weight decay folded into the
/// gradient: v = m*v + g + wd*theta; theta -= lr*v.
#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub momentum: f32,
    pub weight_decay: f32,
}

pub fn sgd_step(
    theta: &mut [f32],
    velocity: &mut [f32],
    grad: &[f32],
    lr: f32,
    cfg: SgdConfig,
) -> Result<()> {
    if theta.len() != velocity.len() || theta.len() != grad.len() {
        return Err(Error::Shape("optimizer buffers disagree in length".into()));
    }
    for ((t, v), &g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *t;
        *t -= lr * *v;
    }
    Ok(())
}

/// Adam state for the attack-model optimizer.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        AdamState { m: vec![0.0; param_count], v: vec![0.0; param_count], t: 0 }
    }

    pub fn step(&mut self, theta: &mut [f32], grad: &[f32], lr: f32) -> Result<()> {
        if theta.len() != self.m.len() || theta.len() != grad.len() {
            return Err(Error::Shape("adam buffers disagree in length".into()));
        }
        self.t += 1;
        let b1 = ADAM_BETA1 as f32;
        let b2 = ADAM_BETA2 as f32;
        let bc1 = 1.0 - (ADAM_BETA1.powi(self.t as i32)) as f32;
        let bc2 = 1.0 - (ADAM_BETA2.powi(self.t as i32)) as f32;
        let eps = ADAM_EPS as f32;
        for ((t, (m, v)), &g) in theta
            .iter_mut()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .zip(grad)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *t -= lr * mh / (vh.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_zero_lr_keeps_parameters() {
        let mut theta = vec![1.0f32, -1.0];
        let mut vel = vec![0.0f32; 2];
        let cfg = SgdConfig { momentum: 0.9, weight_decay: 0.0 };
        sgd_step(&mut theta, &mut vel, &[0.5, -0.5], 0.0, cfg).unwrap();
        assert_eq!(theta, vec![1.0, -1.0]);
    }

    #[test]
    fn sgd_descends_against_gradient() {
        let mut theta = vec![0.0f32];
        let mut vel = vec![0.0f32];
        let cfg = SgdConfig { momentum: 0.0, weight_decay: 0.0 };
        sgd_step(&mut theta, &mut vel, &[2.0], 0.1, cfg).unwrap();
        assert!((theta[0] + 0.2).abs() < 1e-7);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut theta = vec![0.0f32];
        let mut vel = vec![0.0f32];
        let cfg = SgdConfig { momentum: 0.5, weight_decay: 0.0 };
        sgd_step(&mut theta, &mut vel, &[1.0], 1.0, cfg).unwrap();
        sgd_step(&mut theta, &mut vel, &[1.0], 1.0, cfg).unwrap();
        // v1 = 1, v2 = 1.5; theta = -(1 + 1.5)
        assert!((theta[0] + 2.5).abs() < 1e-6);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // minimize (x-3)^2
        let mut theta = vec![0.0f32];
        let mut adam = AdamState::new(1);
        for _ in 0..4000 {
            let g = 2.0 * (theta[0] - 3.0);
            adam.step(&mut theta, &[g], 0.01).unwrap();
        }
        assert!((theta[0] - 3.0).abs() < 1e-2, "{}", theta[0]);
    }

    #[test]
    fn mismatched_lengths_error() {
        let mut theta = vec![0.0f32];
        let mut vel = vec![0.0f32; 2];
        let cfg = SgdConfig { momentum: 0.0, weight_decay: 0.0 };
        assert!(sgd_step(&mut theta, &mut vel, &[1.0], 0.1, cfg).is_err());
        let mut adam = AdamState::new(2);
        assert!(adam.step(&mut theta, &[1.0], 0.1).is_err());
    }
}
