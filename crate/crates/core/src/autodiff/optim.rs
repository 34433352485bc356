use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One SGD update with momentum and L2 weight decay folded into the velocity:
///
/// ```text
/// v <- momentum * v + grad + weight_decay * param
/// param <- param - lr * v
/// ```
pub fn sgd_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::contract(format!(
            "sgd_step: param {} / grad {} / velocity {} lengths differ",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::contract(format!("sgd_step: learning rate must be positive, got {lr}")));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD keeping one velocity buffer per named parameter.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &[f64], lr: f64) -> Result<()> {
        let velocity = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.numel()]);
        sgd_step(param.data_mut(), grad, velocity, lr, self.momentum, self.weight_decay)
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step_moves_by_lr_times_grad() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_step(&mut p, &[0.5, -1.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15);
        assert!((p[1] + 1.9).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_leaves_param() {
        let mut p = vec![3.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[0.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, vec![3.0]);
    }

    #[test]
    fn two_momentum_steps_match_unrolled_recurrence() {
        let (lr, mu, wd) = (0.05, 0.9, 1e-3);
        let (g1, g2) = (0.4, -0.3);
        let mut p = vec![1.5];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[g1], &mut v, lr, mu, wd).unwrap();
        sgd_step(&mut p, &[g2], &mut v, lr, mu, wd).unwrap();

        // scalar oracle
        let p0 = 1.5;
        let v1 = g1 + wd * p0;
        let p1 = p0 - lr * v1;
        let v2 = mu * v1 + g2 + wd * p1;
        let p2 = p1 - lr * v2;
        assert!((p[0] - p2).abs() < 1e-15);
        assert!((v[0] - v2).abs() < 1e-15);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let mut p = vec![0.0; 3];
        let mut v = vec![0.0; 3];
        assert!(matches!(sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0), Err(Error::Contract(_))));
        assert!(matches!(sgd_step(&mut p, &[1.0; 3], &mut v, 0.0, 0.9, 0.0), Err(Error::Contract(_))));
    }
}
