use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v <- momentum*v + grad + weight_decay*param; param <- param - lr*v`.
pub fn sgd_update(params: &mut [f64], grads: &[f64], velocity: &mut [f64], cfg: &SgdConfig) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![params.len()],
            actual: vec![grads.len(), velocity.len()],
        });
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
        *p -= cfg.lr * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_is_noop() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        let cfg = SgdConfig { lr: 0.0, momentum: 0.9, weight_decay: 0.1 };
        sgd_update(&mut p, &[3.0, 4.0], &mut v, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn plain_step() {
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        sgd_update(&mut p, &[1.0], &mut v, &cfg).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_second_step_is_1_9x() {
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        sgd_update(&mut p, &[1.0], &mut v, &cfg).unwrap();
        let first = -p[0];
        let before = p[0];
        sgd_update(&mut p, &[1.0], &mut v, &cfg).unwrap();
        let second = before - p[0];
        assert!((second / first - 1.9).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch() {
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        assert!(sgd_update(&mut [0.0], &[1.0, 2.0], &mut [0.0], &cfg).is_err());
    }
}
