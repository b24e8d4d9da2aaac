use std::collections::BTreeMap;

use super::{ParamRegistry, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<T> {
    pub step: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update. Parameters without an entry in `grads`
/// are treated as having a zero gradient.
pub fn adam_step<T: Real>(
    params: &mut ParamRegistry<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        match params.get(name) {
            Some(p) if p.shape() == g.shape() => {}
            Some(p) => {
                return Err(Error::shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )))
            }
            None => return Err(Error::invalid(format!("gradient for unknown parameter `{name}`"))),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let step_size = T::from_f64_lossy(cfg.lr / c1);
    let inv_c2 = T::from_f64_lossy(1.0 / c2);
    let eps = T::from_f64_lossy(cfg.eps);
    for (name, p) in params.iter_mut() {
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let g = grads.get(name);
        for i in 0..p.len() {
            let gi = g.map_or(T::zero(), |g| g.data()[i]);
            let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
            let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            p.data_mut()[i] -= step_size * mi / ((vi * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry(values: &[f64]) -> ParamRegistry<f64> {
        let mut p = ParamRegistry::new();
        p.insert("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = registry(&[1.0, -2.0]);
        let before = p.clone();
        let mut st = AdamState::new();
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        for _ in 0..5 {
            adam_step(&mut p, &grads, &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
        adam_step(&mut p, &BTreeMap::new(), &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g|+eps).
        let mut p = registry(&[0.0, 0.0, 0.0]);
        let g = [3.0, -0.01, 250.0];
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(vec![3], g.to_vec()).unwrap())]);
        let mut st = AdamState::new();
        let cfg = AdamConfig::default();
        adam_step(&mut p, &grads, &mut st, &cfg).unwrap();
        for (pi, gi) in p.get("w").unwrap().data().iter().zip(g) {
            let want = -cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!((pi - want).abs() < 1e-15, "{pi} vs {want}");
            assert!((pi.abs() - cfg.lr).abs() < 1e-8);
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(w) = Σ (w_i − c_i)², minimized at c.
        let target = [0.3, -0.7, 0.05];
        let mut p = registry(&[1.0, 1.0, -1.0]);
        let mut st = AdamState::new();
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut steps = 0;
        loop {
            let w = p.get("w").unwrap().data().to_vec();
            let loss: f64 = w.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum();
            if loss < 1e-6 {
                break;
            }
            assert!(steps < 2000, "loss {loss} after {steps} steps");
            let g: Vec<f64> = w.iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect();
            let grads = BTreeMap::from([("w".to_string(), Tensor::new(vec![3], g).unwrap())]);
            adam_step(&mut p, &grads, &mut st, &cfg).unwrap();
            steps += 1;
        }
    }

    #[test]
    fn mismatched_gradient_is_rejected() {
        let mut p = registry(&[0.0]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        assert!(adam_step(&mut p, &grads, &mut AdamState::new(), &AdamConfig::default()).is_err());
        let grads = BTreeMap::from([("nope".to_string(), Tensor::zeros(&[1]))]);
        assert!(adam_step(&mut p, &grads, &mut AdamState::new(), &AdamConfig::default()).is_err());
    }
}
