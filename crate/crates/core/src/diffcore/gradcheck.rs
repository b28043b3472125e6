use rand::Rng as _;

use super::kernels::RoiWindow;
use super::ops::{backward, forward, Mode, Op, OpKind};
use super::tensor::Tensor;
use crate::error::{AodError, Result};
use crate::rng::stream_rng;

/// `|a - n| / max(1, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1.0)
}

/// Compares the analytic gradient returned by `f` at `x` with central
/// differences of its value, returning the maximum relative error over all
/// coordinates. `f` must be deterministic and scalar-valued.
pub fn grad_check<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    let (value, analytic) = f(x)?;
    if !value.is_finite() {
        return Err(AodError::NonFinite("grad_check value".into()));
    }
    if analytic.shape() != x.shape() {
        return Err(AodError::Shape(format!(
            "gradient shape {:?} != input shape {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    analytic.ensure_finite("grad_check gradient")?;
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(AodError::NonFinite("grad_check probe".into()));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Checks one op on a fixed, kink-free instance: the scalar objective is a
/// fixed random projection of the output, differentiated with respect to
/// every input in turn. Returns the worst relative error.
pub fn op_grad_check(kind: OpKind, eps: f64) -> Result<f64> {
    let mut rng = stream_rng(0x6a09e667, &[kind as u64]);
    // Values bounded away from each other and from zero so max/relu/smooth-L1
    // choices do not flip under an `eps` probe.
    let mut spread = |shape: &[usize], lo: f64| -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut v: Vec<f64> = (0..n).map(|i| lo + 0.173 * i as f64).collect();
        for i in (1..n).rev() {
            v.swap(i, rng.random_range(0..=i));
        }
        let sign: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let data = if lo < 0.0 { v } else { v.iter().zip(&sign).map(|(a, s)| a * s).collect() };
        Tensor::new(shape.to_vec(), data).expect("shape")
    };
    let (op, inputs): (Op, Vec<Tensor<f64>>) = match kind {
        OpKind::Affine => (Op::Affine, vec![spread(&[5], 0.1), spread(&[3, 5], 0.05), spread(&[3], 0.2)]),
        OpKind::Relu => (Op::Relu, vec![spread(&[7], 0.1)]),
        OpKind::Dropout => (
            Op::Dropout {
                rate: 0.5,
                mode: Mode::Train,
                mask_seed: 3,
            },
            vec![spread(&[8], 0.1)],
        ),
        OpKind::Conv2d => (
            Op::Conv2d { pad: 1 },
            vec![spread(&[2, 4, 4], 0.1), spread(&[3, 2, 3, 3], 0.02), spread(&[3], 0.1)],
        ),
        OpKind::MaxPool2d => (Op::MaxPool2d { size: 2 }, vec![spread(&[2, 4, 4], -2.0)]),
        OpKind::SoftmaxXent => (Op::SoftmaxXent { target: 2 }, vec![spread(&[5], 0.1)]),
        OpKind::SmoothL1 => (Op::SmoothL1, vec![Tensor::from_vec(vec![0.3, -0.6, 1.7, -2.4, 0.05])]),
        OpKind::EltwiseMax => (
            Op::EltwiseMax,
            vec![spread(&[6], -1.5), spread(&[6], -1.4), spread(&[6], -1.3)],
        ),
        OpKind::Concat => (Op::Concat, vec![spread(&[3], 0.1), spread(&[4], 0.1)]),
        OpKind::RoiPool => (
            Op::RoiPool {
                window: RoiWindow {
                    y0: 1,
                    y1: 6,
                    x0: 0,
                    x1: 4,
                    grid_h: 2,
                    grid_w: 3,
                },
            },
            vec![spread(&[2, 6, 5], -3.0)],
        ),
    };
    let (y, _) = forward(&op, &inputs.iter().collect::<Vec<_>>())?;
    let proj: Vec<f64> = (0..y.len()).map(|i| 0.5 + 0.37 * ((i * 7) % 5) as f64).collect();
    let proj = Tensor::new(y.shape().to_vec(), proj)?;
    let mut worst = 0.0f64;
    for which in 0..inputs.len() {
        let err = grad_check(
            |x| {
                let mut args: Vec<&Tensor<f64>> = inputs.iter().collect();
                args[which] = x;
                let (y, rec) = forward(&op, &args)?;
                let value = y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum();
                let grads = backward(&rec, &proj)?;
                Ok((value, grads[which].clone()))
            },
            &inputs[which],
            eps,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 4.0]);
        let err = grad_check(
            |x| Ok((x.data().iter().sum(), Tensor::from_vec(vec![1.0; x.len()]))),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn relu_sum_away_from_kink() {
        let x = Tensor::from_vec(vec![0.5, -0.7, 2.0, -3.0]);
        let err = grad_check(
            |x| {
                let (y, rec) = forward(&Op::Relu, &[x])?;
                let g = backward(&rec, &Tensor::from_vec(vec![1.0; y.len()]))?;
                Ok((y.data().iter().sum(), g[0].clone()))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn every_op_passes() {
        for kind in OpKind::ALL {
            let err = op_grad_check(kind, 1e-5).unwrap();
            assert!(err < 1e-7, "{}: {err}", kind.name());
        }
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let err = grad_check(
            |x| Ok((x.data().iter().map(|v| v * v).sum(), x.clone())),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1);
    }
}
