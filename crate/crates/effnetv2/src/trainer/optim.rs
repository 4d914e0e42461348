//! Optimizer pieces: learning-rate schedules, RMSProp with momentum, and the
//! exponential moving average of the weights.

use crate::arch::Param;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Learning rate for `step` under linear warmup followed by staircase decay:
/// the rate climbs from 0 to `peak` over `warmup_epochs`, then multiplies by
/// `decay_factor` once per `decay_every_epochs` (floored, so it moves in
/// steps rather than continuously). Epochs are fractional: `step /
/// steps_per_epoch`.
pub fn warmup_staircase_lr(
    step: u64,
    steps_per_epoch: u64,
    peak: f64,
    warmup_epochs: f64,
    decay_factor: f64,
    decay_every_epochs: f64,
) -> Result<f64> {
    if steps_per_epoch == 0 {
        return Err(Error::arg("lr_at", "steps_per_epoch must be positive"));
    }
    if decay_every_epochs <= 0.0 {
        return Err(Error::arg("lr_at", format!("decay_every_epochs {decay_every_epochs} <= 0")));
    }
    let epoch = step as f64 / steps_per_epoch as f64;
    if epoch < warmup_epochs {
        return Ok(peak * epoch / warmup_epochs);
    }
    Ok(peak * decay_factor.powi(((epoch - warmup_epochs) / decay_every_epochs).floor() as i32))
}

/// Cosine decay from `lr0` at step 0 to exactly 0 at the final step.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> f64 {
    if total_steps <= 1 || step == 0 {
        return if step >= total_steps.max(1) { 0.0 } else { lr0 };
    }
    if step >= total_steps {
        return 0.0;
    }
    let t = step as f64 / (total_steps - 1) as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// RMSProp with momentum. Per parameter element:
///
/// ```text
/// g    <- grad + weight_decay * p      (decay-flagged params only)
/// acc  <- decay * acc + (1 - decay) * g^2
/// mom  <- momentum * mom + lr * g / sqrt(acc + eps)
/// p    <- p - mom
/// ```
#[derive(Debug)]
pub struct RmsProp<T: Scalar> {
    pub decay: f64,
    pub momentum: f64,
    pub eps: f64,
    pub weight_decay: f64,
    acc: Vec<Vec<T>>,
    mom: Vec<Vec<T>>,
}

impl<T: Scalar> RmsProp<T> {
    /// Zero-initialized slots, one pair per parameter.
    pub fn new(params: &[Param<T>], decay: f64, momentum: f64, eps: f64, weight_decay: f64) -> Self {
        let acc = params.iter().map(|p| vec![T::zero(); p.value.shape().len()]).collect();
        let mom = params.iter().map(|p| vec![T::zero(); p.value.shape().len()]).collect();
        RmsProp { decay, momentum, eps, weight_decay, acc, mom }
    }

    /// Apply one update. `grads[i]` is the gradient for `params[i]` (`None`
    /// means the parameter received no gradient this step and is left
    /// untouched). A non-finite gradient aborts with the parameter's name.
    pub fn step(
        &mut self,
        params: &mut [Param<T>],
        grads: &[Option<Vec<T>>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.acc.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "rmsprop_step",
                format!("{} params, {} grads, {} slots", params.len(), grads.len(), self.acc.len()),
            ));
        }
        let decay = T::from_f64(self.decay);
        let one_minus = T::from_f64(1.0 - self.decay);
        let momentum = T::from_f64(self.momentum);
        let eps = T::from_f64(self.eps);
        let lr_t = T::from_f64(lr);
        for ((param, grad), (acc, mom)) in
            params.iter_mut().zip(grads).zip(self.acc.iter_mut().zip(self.mom.iter_mut()))
        {
            let Some(grad) = grad else { continue };
            if grad.len() != acc.len() {
                return Err(Error::shape(
                    "rmsprop_step",
                    format!("gradient for {} has {} values, expected {}", param.name, grad.len(), acc.len()),
                ));
            }
            let wd = if param.decay { T::from_f64(self.weight_decay) } else { T::zero() };
            let values = param.value.make_mut();
            for i in 0..values.len() {
                let g = grad[i] + wd * values[i];
                if !g.is_finite() {
                    return Err(Error::non_finite(
                        "rmsprop_step",
                        format!("gradient for {}[{i}] is {}", param.name, grad[i]),
                    ));
                }
                acc[i] = decay * acc[i] + one_minus * g * g;
                mom[i] = momentum * mom[i] + lr_t * g / (acc[i] + eps).sqrt();
                values[i] = values[i] - mom[i];
            }
        }
        Ok(())
    }

    /// Flatten slots for checkpointing, in parameter order.
    pub fn slots(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.acc, &self.mom)
    }

    /// Restore slots saved by [`RmsProp::slots`].
    pub fn restore_slot(&mut self, index: usize, acc: &[T], mom: &[T]) -> Result<()> {
        if index >= self.acc.len() || acc.len() != self.acc[index].len() || mom.len() != self.mom[index].len()
        {
            return Err(Error::CheckpointMismatch(format!(
                "optimizer slot {index} does not match the model layout"
            )));
        }
        self.acc[index].copy_from_slice(acc);
        self.mom[index].copy_from_slice(mom);
        Ok(())
    }
}

/// One EMA step: `shadow <- decay * shadow + (1 - decay) * param`, for every
/// parameter tensor. Shadows never receive gradients; they are read only at
/// evaluation time.
pub fn ema_update<T: Scalar>(shadow: &mut [Tensor<T>], params: &[Param<T>], decay: f64) {
    let d = T::from_f64(decay);
    let one_minus = T::from_f64(1.0 - decay);
    for (s, p) in shadow.iter_mut().zip(params) {
        let out = s.make_mut();
        for (o, &v) in out.iter_mut().zip(p.value.data()) {
            *o = d * *o + one_minus * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn param(name: &str, values: &[f64], decay: bool) -> Param<f64> {
        Param {
            name: name.to_string(),
            value: Tensor::from_vec(Shape::new(1, values.len(), 1, 1), values.to_vec()).unwrap(),
            decay,
        }
    }

    #[test]
    fn warmup_is_linear_and_peaks_exactly() {
        let peak = 0.256;
        // 10 steps/epoch, 5 warmup epochs -> 50 warmup steps.
        assert_eq!(warmup_staircase_lr(0, 10, peak, 5.0, 0.97, 2.4).unwrap(), 0.0);
        let mid = warmup_staircase_lr(25, 10, peak, 5.0, 0.97, 2.4).unwrap();
        assert!((mid - peak * 0.5).abs() < 1e-9);
        let end = warmup_staircase_lr(50, 10, peak, 5.0, 0.97, 2.4).unwrap();
        assert_eq!(end, peak);
        // Linearity: equal increments per step within 1e-9.
        let a = warmup_staircase_lr(7, 10, peak, 5.0, 0.97, 2.4).unwrap();
        let b = warmup_staircase_lr(8, 10, peak, 5.0, 0.97, 2.4).unwrap();
        let c = warmup_staircase_lr(9, 10, peak, 5.0, 0.97, 2.4).unwrap();
        assert!(((b - a) - (c - b)).abs() < 1e-9);
    }

    #[test]
    fn staircase_decays_by_factor_every_interval() {
        let peak = 0.256;
        // Epoch = warmup + 4.8 -> two full 2.4-epoch intervals elapsed.
        let lr = warmup_staircase_lr(98, 10, peak, 5.0, 0.97, 2.4).unwrap();
        assert!((lr - peak * 0.97 * 0.97).abs() < 1e-12);
        // Within the first interval after warmup the rate holds at peak.
        let lr = warmup_staircase_lr(73, 10, peak, 5.0, 0.97, 2.4).unwrap();
        assert_eq!(lr, peak);
        // Never increases after warmup.
        let mut prev = f64::INFINITY;
        for step in 50..400 {
            let lr = warmup_staircase_lr(step, 10, peak, 5.0, 0.97, 2.4).unwrap();
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn lr_rejects_bad_arguments() {
        assert!(warmup_staircase_lr(0, 0, 0.1, 5.0, 0.97, 2.4).is_err());
        assert!(warmup_staircase_lr(0, 10, 0.1, 5.0, 0.97, 0.0).is_err());
    }

    #[test]
    fn cosine_hits_both_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3), 1e-3);
        assert_eq!(cosine_lr(99, 100, 1e-3), 0.0);
        let mid = cosine_lr(50, 101, 1e-3);
        assert!((mid - 5e-4).abs() < 1e-12);
        // Monotone non-increasing.
        let mut prev = f64::INFINITY;
        for step in 0..100 {
            let lr = cosine_lr(step, 100, 1e-3);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn rmsprop_single_step_hand_values() {
        let mut params = vec![param("w", &[1.0], true)];
        let mut opt = RmsProp::new(&params, 0.9, 0.9, 1e-3, 0.0);
        opt.step(&mut params, &[Some(vec![1.0])], 0.1).unwrap();
        // acc = 0.1 * 1 = 0.1; update = 0.1 * 1 / sqrt(0.1 + 1e-3).
        let expect = 1.0 - 0.1 / (0.1f64 + 1e-3).sqrt();
        assert!((params[0].value.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params_unchanged() {
        let mut params = vec![param("w", &[0.5, -0.25], true)];
        let mut opt = RmsProp::new(&params, 0.9, 0.9, 1e-3, 0.0);
        for _ in 0..3 {
            opt.step(&mut params, &[Some(vec![0.0, 0.0])], 0.1).unwrap();
        }
        assert_eq!(params[0].value.data(), &[0.5, -0.25]);
    }

    #[test]
    fn constant_gradient_moves_monotonically_against_its_sign() {
        let mut params = vec![param("w", &[0.0], true)];
        let mut opt = RmsProp::new(&params, 0.9, 0.9, 1e-3, 0.0);
        let mut prev = 0.0;
        for _ in 0..20 {
            opt.step(&mut params, &[Some(vec![1.0])], 0.01).unwrap();
            let v = params[0].value.data()[0];
            assert!(v < prev, "positive gradient must keep decreasing the weight");
            prev = v;
        }
    }

    #[test]
    fn weight_decay_applies_only_to_flagged_params() {
        let mut params = vec![param("w", &[1.0], true), param("bn.g", &[1.0], false)];
        let mut opt = RmsProp::new(&params, 0.9, 0.9, 1e-3, 0.1);
        // Zero gradients: only the decay term can move anything.
        opt.step(&mut params, &[Some(vec![0.0]), Some(vec![0.0])], 0.1).unwrap();
        assert!(params[0].value.data()[0] < 1.0);
        assert_eq!(params[1].value.data()[0], 1.0);
    }

    #[test]
    fn nan_gradient_aborts_with_param_name() {
        let mut params = vec![param("stem.conv.w", &[1.0], true)];
        let mut opt = RmsProp::new(&params, 0.9, 0.9, 1e-3, 0.0);
        let err = opt.step(&mut params, &[Some(vec![f64::NAN])], 0.1).unwrap_err();
        assert!(err.to_string().contains("stem.conv.w"));
    }

    #[test]
    fn ema_matches_closed_form_for_constant_params() {
        let params = vec![param("w", &[2.0], true)];
        let mut shadow = vec![Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.0]).unwrap()];
        let decay = 0.9;
        let k = 17;
        for _ in 0..k {
            ema_update(&mut shadow, &params, decay);
        }
        // shadow_k = p + (shadow_0 - p) * decay^k
        let expect = 2.0 + (0.0 - 2.0) * decay.powi(k);
        assert!((shadow[0].data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn ema_decay_zero_copies_params() {
        let params = vec![param("w", &[0.125, -3.5], true)];
        let mut shadow = vec![Tensor::zeros(Shape::new(1, 2, 1, 1))];
        ema_update(&mut shadow, &params, 0.0);
        assert_eq!(shadow[0].data(), params[0].value.data());
    }
}
