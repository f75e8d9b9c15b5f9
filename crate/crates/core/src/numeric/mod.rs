//! Dense tensor arithmetic, reverse-mode differentiation, the AdamW
//! optimizer, and the warmup/linear-decay learning-rate schedule used by
//! every training loop in the crate.
//!
//! All production math runs in f32. The tape and model code are generic over
//! [`Scalar`] so gradient checks can run the identical graph in f64.

pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{AdamW, LrSchedule};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Numerically stable softmax of a non-empty vector.
///
/// Outputs sum to 1 (within rounding) and are invariant under a constant
/// shift of the input.
pub fn softmax<T: Scalar>(values: &[T]) -> Result<Vec<T>> {
    if values.is_empty() {
        return Err(Error::invalid_argument("softmax of an empty vector".to_string()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_argument("softmax input must be finite".to_string()));
    }
    let max = values.iter().cloned().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = values.iter().map(|&v| (v - max).exp()).collect();
    let mut sum = T::zero();
    for &e in &exps {
        sum += e;
    }
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-approximation GELU.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (T::one() + inner.tanh())
}

/// Derivative of the tanh-approximation GELU.
pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

/// Per-vector layer normalization with population variance:
/// `gamma * (v - mean) / sqrt(var + eps) + beta`.
pub fn layer_norm<T: Scalar>(v: &[T], gamma: &[T], beta: &[T], eps: T) -> Result<Vec<T>> {
    if v.len() != gamma.len() || v.len() != beta.len() {
        return Err(Error::invalid_argument(format!(
            "layer_norm length mismatch: v={}, gamma={}, beta={}",
            v.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if v.is_empty() {
        return Err(Error::invalid_argument("layer_norm of an empty vector".to_string()));
    }
    if eps <= T::zero() {
        return Err(Error::invalid_argument("layer_norm eps must be > 0".to_string()));
    }
    let n = T::from_f64(v.len() as f64);
    let mut mean = T::zero();
    for &x in v {
        mean += x;
    }
    mean = mean / n;
    let mut var = T::zero();
    for &x in v {
        let d = x - mean;
        var += d * d;
    }
    var = var / n;
    let inv_std = T::one() / (var + eps).sqrt();
    Ok(v.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&x, (&g, &b))| g * (x - mean) * inv_std + b)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_of_equal_inputs_is_uniform() {
        let p = softmax(&[0.0f64, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_of_ln2_zero() {
        let p = softmax(&[(2.0f64).ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_empty_input() {
        assert!(softmax::<f32>(&[]).is_err());
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-3);
        assert!(gelu_scalar(-10.0f64).abs() < 1e-3);
    }

    #[test]
    fn gelu_is_monotone_on_minus_three_three() {
        let mut prev = gelu_scalar(-3.0f64);
        let mut x = -3.0f64;
        while x < 3.0 {
            x += 0.01;
            let y = gelu_scalar(x);
            assert!(y >= prev, "gelu not monotone at {x}");
            prev = y;
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_differences() {
        let h = 1e-6;
        for &x in &[-2.5f64, -1.0, -0.1, 0.0, 0.3, 1.7, 2.9] {
            let numeric = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((gelu_derivative(x) - numeric).abs() < 1e-8, "at {x}");
        }
    }

    #[test]
    fn layer_norm_constant_input_damps_to_zero() {
        let v = [3.0f64; 4];
        let out = layer_norm(&v, &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        for y in out {
            assert!(y.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_unit_variance_pair() {
        let out = layer_norm(&[1.0f64, -1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-12).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-9);
        assert!((out[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_zero_gain_yields_shift() {
        let out = layer_norm(&[5.0f64, -2.0, 0.4], &[0.0; 3], &[0.7; 3], 1e-5).unwrap();
        for y in out {
            assert_eq!(y, 0.7);
        }
    }

    #[test]
    fn layer_norm_rejects_length_mismatch() {
        let err = layer_norm(&[1.0f32, 2.0], &[1.0], &[0.0, 0.0], 1e-5).unwrap_err();
        assert!(matches!(err, crate::error::Error::InvalidArgument(_)));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in prop::collection::vec(-30.0f64..30.0, 1..12),
            c in -50.0f64..50.0,
        ) {
            let p = softmax(&v).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);

            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-6);
            }

            // order preserving
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] < v[j] {
                        prop_assert!(p[i] <= p[j] + 1e-12);
                    }
                }
            }
        }
    }
}
