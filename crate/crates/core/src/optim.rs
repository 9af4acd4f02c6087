//! Adam with bias correction and the three-phase learning-rate schedule
//! (linear warmup, constant, linear decay).

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper<F> {
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
}

impl<F: Real> Default for AdamHyper<F> {
    fn default() -> Self {
        AdamHyper {
            beta1: F::of(0.9),
            beta2: F::of(0.999),
            eps: F::of(1e-8),
        }
    }
}

/// First/second-moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
}

impl<F: Real> AdamSlot<F> {
    pub fn zeros(len: usize) -> Self {
        AdamSlot {
            m: vec![F::zero(); len],
            v: vec![F::zero(); len],
        }
    }
}

/// One bias-corrected Adam update over a flat parameter slice. `t` is the
/// 1-based step count after this update.
pub fn adam_update<F: Real>(
    param: &mut [F],
    grad: &[F],
    slot: &mut AdamSlot<F>,
    t: u64,
    lr: F,
    hp: &AdamHyper<F>,
) -> Result<()> {
    if grad.len() != param.len() || slot.m.len() != param.len() || slot.v.len() != param.len() {
        return Err(Error::Shape(format!(
            "adam buffers disagree: param {}, grad {}, m {}, v {}",
            param.len(),
            grad.len(),
            slot.m.len(),
            slot.v.len()
        )));
    }
    debug_assert!(t >= 1);
    let one = F::one();
    let bc1 = one - hp.beta1.powi(t as i32);
    let bc2 = one - hp.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        slot.m[i] = hp.beta1 * slot.m[i] + (one - hp.beta1) * g;
        slot.v[i] = hp.beta2 * slot.v[i] + (one - hp.beta2) * g * g;
        let m_hat = slot.m[i] / bc1;
        let v_hat = slot.v[i] / bc2;
        param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

/// Three-phase schedule over `total_steps`: linear ramp from 0 across the
/// warmup fraction, constant at `base_lr` through the stable fraction, then
/// linear decay to 0 across the final fraction. Continuous at both
/// boundaries; `lr(0) = 0` whenever a warmup phase exists.
pub fn lr_at(
    step: u64,
    total_steps: u64,
    base_lr: f64,
    warmup_frac: f64,
    stable_frac: f64,
    decay_frac: f64,
) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Config(format!(
            "step {step} out of range for {total_steps} total steps"
        )));
    }
    let sum = warmup_frac + stable_frac + decay_frac;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "schedule fractions sum to {sum}, expected 1"
        )));
    }
    let warmup_steps = (total_steps as f64 * warmup_frac).round() as u64;
    let decay_steps = (total_steps as f64 * decay_frac).round() as u64;
    let decay_start = total_steps - decay_steps;
    if step < warmup_steps {
        Ok(base_lr * step as f64 / warmup_steps as f64)
    } else if step < decay_start {
        Ok(base_lr)
    } else {
        Ok(base_lr * (total_steps - step) as f64 / decay_steps as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FRACS: (f64, f64, f64) = (0.05, 0.75, 0.20);

    fn lr(step: u64) -> f64 {
        lr_at(step, 1000, 5e-4, FRACS.0, FRACS.1, FRACS.2).unwrap()
    }

    #[test]
    fn schedule_worked_values() {
        // midpoint of the 50-step warmup
        assert!((lr(25) - 2.5e-4).abs() < 1e-18);
        // stable phase
        assert_eq!(lr(400), 5e-4);
        // midpoint of the 200-step decay
        assert!((lr(900) - 2.5e-4).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_continuous_and_bounded() {
        let mut prev = lr(0);
        assert_eq!(prev, 0.0);
        let mut max = prev;
        for step in 1..1000 {
            let cur = lr(step);
            assert!((cur - prev).abs() < 5e-4 / 40.0, "jump at {step}");
            max = max.max(cur);
            prev = cur;
        }
        assert_eq!(max, 5e-4);
        // zero at the final boundary: the would-be value at step == total
        assert!(lr(999) > 0.0);
        assert!((lr(999) - 5e-4 / 200.0).abs() < 1e-18);
    }

    #[test]
    fn schedule_rejects_out_of_range_and_bad_fractions() {
        assert!(lr_at(1000, 1000, 5e-4, 0.05, 0.75, 0.20).is_err());
        assert!(lr_at(0, 1000, 5e-4, 0.1, 0.75, 0.20).is_err());
    }

    #[test]
    fn adam_zero_gradients_leave_parameters_unchanged() {
        let mut p = vec![1.0f64, -2.0, 3.0];
        let g = vec![0.0; 3];
        let mut slot = AdamSlot::zeros(3);
        let hp = AdamHyper::default();
        for t in 1..=5 {
            adam_update(&mut p, &g, &mut slot, t, 0.1, &hp).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_single_scalar_matches_hand_recurrence() {
        let mut p = vec![0.0f64];
        let g = vec![1.0f64];
        let mut slot = AdamSlot::zeros(1);
        let hp = AdamHyper::<f64>::default();
        adam_update(&mut p, &g, &mut slot, 1, 0.1, &hp).unwrap();
        // m=0.1, v=0.001; m_hat=1, v_hat=1 -> update = -0.1/(1+1e-8)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-12, "{} vs {expected}", p[0]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = vec![0.5f32, -0.25];
            let mut slot = AdamSlot::zeros(2);
            let hp = AdamHyper::default();
            for t in 1..=20 {
                let g = vec![(t as f32).sin(), (t as f32).cos()];
                adam_update(&mut p, &g, &mut slot, t, 1e-2, &hp).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
