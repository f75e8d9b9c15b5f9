//! Decoupled-weight-decay adaptive optimizer and the warmup/linear-decay
//! learning-rate schedule shared by the pre-training and fine-tuning loops.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::tensor::{Scalar, Tensor};

/// Adam with decoupled weight decay.
///
/// Weight decay is applied directly to the parameter
/// (`p -= lr * wd * p`), independent of the gradient moments, so a zero
/// gradient with zero decay leaves parameters untouched.
pub struct AdamW<T = f32> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    /// Number of completed optimizer updates. Strictly increases.
    step: u64,
    /// Learning rate used by the most recent step.
    lr: T,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: T) -> Self {
        AdamW {
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            weight_decay,
            step: 0,
            lr: T::zero(),
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn last_lr(&self) -> T {
        self.lr
    }

    /// One optimizer update over all parameters.
    ///
    /// `params` and `grads` must be index-aligned with matching shapes; the
    /// pairing must stay stable across calls because moment buffers are
    /// keyed by position.
    pub fn step(&mut self, lr: T, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid_argument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != params.len() {
            return Err(Error::invalid_argument(format!(
                "optimizer tracks {} parameters, got {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        self.step += 1;
        self.lr = lr;
        let t = self.step as i32;
        let bias1 = T::one() - self.beta1.powi(t);
        let bias2 = T::one() - self.beta2.powi(t);
        let one = T::one();

        for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            if param.shape() != grad.shape() {
                return Err(Error::invalid_argument(format!(
                    "parameter {i} has shape {:?} but gradient has {:?}",
                    param.shape(),
                    grad.shape()
                )));
            }
            if self.first_moment[i].shape() != param.shape() {
                return Err(Error::invalid_argument(format!(
                    "parameter {i} changed shape: moments {:?} vs {:?}",
                    self.first_moment[i].shape(),
                    param.shape()
                )));
            }
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let pd = param.data_mut();
            for j in 0..pd.len() {
                let g = grad.data()[j];
                m[j] = self.beta1 * m[j] + (one - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (one - self.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                pd[j] = pd[j] - lr * m_hat / (v_hat.sqrt() + self.eps) - lr * self.weight_decay * pd[j];
            }
        }
        Ok(())
    }
}

/// Linear warmup to a peak rate, then linear decay to zero.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub total_steps: u64,
    pub warmup_fraction: f64,
}

impl LrSchedule {
    pub fn new(peak: f64, total_steps: u64, warmup_fraction: f64) -> Result<Self> {
        if !(peak.is_finite() && peak >= 0.0) {
            return Err(Error::invalid_argument("peak rate must be finite and >= 0".to_string()));
        }
        if total_steps == 0 {
            return Err(Error::invalid_argument("schedule needs at least one step".to_string()));
        }
        if !(0.0..1.0).contains(&warmup_fraction) {
            return Err(Error::invalid_argument(format!(
                "warmup fraction must be in [0,1), got {warmup_fraction}"
            )));
        }
        Ok(LrSchedule { peak, total_steps, warmup_fraction })
    }

    /// Paper-default schedule: peak 5e-5, warmup fraction 0.1.
    pub fn default_for(total_steps: u64) -> Self {
        LrSchedule { peak: 5e-5, total_steps, warmup_fraction: 0.1 }
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.total_steps as f64 * self.warmup_fraction).round() as u64
    }

    /// Rate at `step`, for `0 <= step <= total_steps`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::invalid_argument(format!(
                "step {step} beyond schedule length {}",
                self.total_steps
            )));
        }
        let warmup = self.warmup_steps();
        let lr = if step <= warmup && warmup > 0 {
            self.peak * step as f64 / warmup as f64
        } else {
            self.peak * (self.total_steps - step) as f64 / (self.total_steps - warmup) as f64
        };
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut opt = AdamW::<f32>::new(0.0);
        let mut p = Tensor::new(vec![2], vec![1.5, -2.25]).unwrap();
        let g = Tensor::zeros(vec![2]);
        opt.step(0.1, &mut [&mut p], &[g]).unwrap();
        assert_eq!(p.data(), &[1.5, -2.25]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn decoupled_decay_only() {
        // param 1.0, grad 0, lr 0.1, wd 0.01, fresh moments -> 0.999
        let mut opt = AdamW::<f64>::new(0.01);
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(0.0);
        opt.step(0.1, &mut [&mut p], &[g]).unwrap();
        assert!((p.data()[0] - 0.999).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_roughly_lr_against_gradient_sign() {
        for &g in &[0.001, 0.5, 7.0] {
            let mut opt = AdamW::<f64>::new(0.0);
            let mut p = Tensor::scalar(1.0);
            let grad = Tensor::scalar(g);
            opt.step(0.1, &mut [&mut p], &[grad]).unwrap();
            assert!((p.data()[0] - 0.9).abs() < 1e-4, "grad {g} -> {}", p.data()[0]);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = AdamW::<f32>::new(0.0);
        let mut p = Tensor::zeros(vec![3]);
        let g = Tensor::zeros(vec![2]);
        let err = opt.step(0.1, &mut [&mut p], &[g]).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn schedule_hits_zero_peak_zero() {
        let sched = LrSchedule::default_for(1000);
        assert_eq!(sched.lr_at(0).unwrap(), 0.0);
        assert!((sched.lr_at(100).unwrap() - 5e-5).abs() < 1e-18);
        assert_eq!(sched.lr_at(1000).unwrap(), 0.0);
        assert!(sched.lr_at(1001).is_err());
    }

    #[test]
    fn schedule_is_piecewise_linear_and_continuous() {
        let sched = LrSchedule::new(3e-4, 200, 0.1).unwrap();
        let warmup = sched.warmup_steps();
        let bound = sched.peak / (warmup.min(sched.total_steps - warmup) as f64);
        let mut max_rate = 0.0f64;
        for s in 0..200u64 {
            let a = sched.lr_at(s).unwrap();
            let b = sched.lr_at(s + 1).unwrap();
            assert!(a >= 0.0);
            assert!((b - a).abs() <= bound + 1e-15);
            max_rate = max_rate.max(a.max(b));
        }
        assert!((max_rate - sched.peak).abs() < 1e-15);
        assert!((sched.lr_at(warmup).unwrap() - sched.peak).abs() < 1e-15);
    }

    #[test]
    fn zero_warmup_starts_at_peak() {
        let sched = LrSchedule::new(1e-3, 10, 0.0).unwrap();
        assert!((sched.lr_at(0).unwrap() - 1e-3).abs() < 1e-15);
        assert_eq!(sched.lr_at(10).unwrap(), 0.0);
    }
}
