use serde::{Deserialize, Serialize};

use super::tensor::{Parameter, Real};
use crate::error::{AodError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

/// One momentum SGD step: optional global-norm clipping, then
/// `v <- momentum * v - lr * grad; value += v`, then grads are zeroed.
///
/// Returns the pre-clip global gradient norm. Parameters are left untouched
/// when any gradient is non-finite.
pub fn sgd_step<R: Real>(params: &mut [&mut Parameter<R>], cfg: &SgdConfig) -> Result<f64> {
    if !(cfg.lr > 0.0) {
        return Err(AodError::config("lr", "must be > 0"));
    }
    if !(0.0..1.0).contains(&cfg.momentum) {
        return Err(AodError::config("momentum", "must be in [0, 1)"));
    }
    for p in params.iter() {
        if !p.grad.is_finite() {
            return Err(AodError::NonFiniteGradient(p.name.clone()));
        }
    }
    let norm = params.iter().map(|p| p.grad.sum_squares()).sum::<f64>().sqrt();
    let scale = match cfg.grad_clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    let lr = R::of(cfg.lr * scale);
    let m = R::of(cfg.momentum);
    for p in params.iter_mut() {
        let Parameter {
            value,
            grad,
            velocity,
            ..
        } = &mut **p;
        for ((x, v), g) in value
            .data_mut()
            .iter_mut()
            .zip(velocity.data_mut())
            .zip(grad.data())
        {
            *v = m * *v - lr * *g;
            *x += *v;
        }
        p.zero_grad();
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn param(v: f64, g: f64) -> Parameter<f64> {
        let mut p = Parameter::new("p", Tensor::from_vec(vec![v]));
        p.grad.data_mut()[0] = g;
        p
    }

    fn cfg(lr: f64, momentum: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum,
            grad_clip: None,
        }
    }

    #[test]
    fn zero_grad_leaves_values() {
        let mut p = param(3.0, 0.0);
        sgd_step(&mut [&mut p], &cfg(0.1, 0.0)).unwrap();
        assert_eq!(p.value.data()[0], 3.0);
    }

    #[test]
    fn one_plain_step() {
        let mut p = param(1.0, 0.5);
        sgd_step(&mut [&mut p], &cfg(0.1, 0.0)).unwrap();
        assert!((p.value.data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(p.grad.data()[0], 0.0);
    }

    #[test]
    fn momentum_recurrence() {
        let mut p = param(0.0, 1.0);
        sgd_step(&mut [&mut p], &cfg(0.1, 0.9)).unwrap();
        assert!((p.value.data()[0] + 0.1).abs() < 1e-15);
        p.grad.data_mut()[0] = 1.0;
        sgd_step(&mut [&mut p], &cfg(0.1, 0.9)).unwrap();
        assert!((p.value.data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn clipping_rescales_by_global_norm() {
        let mut a = param(0.0, 3.0);
        let mut b = param(0.0, 4.0);
        let c = SgdConfig {
            lr: 1.0,
            momentum: 0.0,
            grad_clip: Some(1.0),
        };
        let norm = sgd_step(&mut [&mut a, &mut b], &c).unwrap();
        assert_eq!(norm, 5.0);
        assert!((a.value.data()[0] + 0.6).abs() < 1e-15);
        assert!((b.value.data()[0] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let mut a = param(1.0, 1.0);
        let mut b = param(1.0, f64::INFINITY);
        b.name = "fc7.w".into();
        let err = sgd_step(&mut [&mut a, &mut b], &cfg(0.1, 0.0)).unwrap_err();
        assert!(matches!(err, AodError::NonFiniteGradient(ref n) if n == "fc7.w"));
        assert_eq!(a.value.data()[0], 1.0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let mut a = param(1.0, 1.0);
        assert!(sgd_step(&mut [&mut a], &cfg(0.0, 0.0)).is_err());
        assert!(sgd_step(&mut [&mut a], &cfg(0.1, 1.0)).is_err());
    }
}
