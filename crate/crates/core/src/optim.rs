//! Per-coefficient RMSProp / SGD with sparse row updates and the
//! learning-rate schedules used for training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::GradientBuffer;
use crate::grid::{Row, RowRemap, ROW_LEN};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// Log-linear decay from `lr_init` to `lr_final` over `total_steps`, then flat.
    Exponential {
        lr_init: f64,
        lr_final: f64,
        total_steps: u64,
    },
    /// Exponential decay multiplied by a sine-eased warm-up rising from
    /// `delay_mult` to 1 over `delay_steps` (the Mip-NeRF schedule).
    DelayedExponential {
        lr_init: f64,
        lr_final: f64,
        total_steps: u64,
        delay_steps: u64,
        delay_mult: f64,
    },
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        let log_lerp = |init: f64, fin: f64, total: u64| {
            let t = if total == 0 {
                1.0
            } else {
                (step as f64 / total as f64).clamp(0.0, 1.0)
            };
            (init.ln() * (1.0 - t) + fin.ln() * t).exp()
        };
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Exponential {
                lr_init,
                lr_final,
                total_steps,
            } => log_lerp(lr_init, lr_final, total_steps),
            LrSchedule::DelayedExponential {
                lr_init,
                lr_final,
                total_steps,
                delay_steps,
                delay_mult,
            } => {
                let delay = if delay_steps > 0 {
                    let s = (step as f64 / delay_steps as f64).clamp(0.0, 1.0);
                    delay_mult + (1.0 - delay_mult) * (0.5 * std::f64::consts::PI * s).sin()
                } else {
                    1.0
                };
                delay * log_lerp(lr_init, lr_final, total_steps)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Constant { lr } => lr > 0.0 && lr.is_finite(),
            LrSchedule::Exponential { lr_init, lr_final, .. } => {
                lr_final > 0.0 && lr_init >= lr_final && lr_init.is_finite()
            }
            LrSchedule::DelayedExponential {
                lr_init,
                lr_final,
                delay_mult,
                ..
            } => {
                lr_final > 0.0
                    && lr_init >= lr_final
                    && lr_init.is_finite()
                    && delay_mult > 0.0
                    && delay_mult <= 1.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid learning-rate schedule {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimMethod {
    #[default]
    Rmsprop,
    Sgd,
}

/// Running second moments, one per stored scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub second_moment: Vec<Row<T>>,
    pub decay: T,
    pub eps: T,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(rows: usize, decay: T, eps: T) -> Self {
        Self {
            second_moment: vec![[T::zero(); ROW_LEN]; rows],
            decay,
            eps,
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.second_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.second_moment.is_empty()
    }

    /// Follows a prune's row compaction.
    pub fn remap(&mut self, remap: &RowRemap) {
        let mut next = vec![[T::zero(); ROW_LEN]; remap.new_len()];
        for (old, row) in self.second_moment.iter().enumerate() {
            if let Some(n) = remap.get(old) {
                next[n] = *row;
            }
        }
        self.second_moment = next;
    }

    /// Discards all moments, e.g. after resampling onto a new lattice.
    pub fn reset(&mut self, rows: usize) {
        self.second_moment = vec![[T::zero(); ROW_LEN]; rows];
    }
}

#[inline]
pub(crate) fn update_scalar<T: Scalar>(
    method: OptimMethod,
    param: &mut T,
    g: T,
    v: &mut T,
    lr: T,
    decay: T,
    eps: T,
) {
    match method {
        OptimMethod::Sgd => *param -= lr * g,
        OptimMethod::Rmsprop => {
            *v = decay * *v + (T::one() - decay) * g * g;
            *param -= lr * g / (v.sqrt() + eps);
        }
    }
}

/// Applies one update to every row touched in `grads`; other rows and their
/// moments are left as they are.
pub fn step<T: Scalar>(
    rows: &mut [Row<T>],
    grads: &GradientBuffer<T>,
    state: &mut OptimState<T>,
    lr_sigma: T,
    lr_sh: T,
    method: OptimMethod,
) -> Result<()> {
    if grads.len() != rows.len() || state.len() != rows.len() {
        return Err(Error::Contract(format!(
            "row-id mismatch: grid has {} rows, gradients {}, optimizer state {}",
            rows.len(),
            grads.len(),
            state.len()
        )));
    }
    let (decay, eps) = (state.decay, state.eps);
    for &r in grads.touched() {
        let r = r as usize;
        let g = grads.row(r);
        let v = &mut state.second_moment[r];
        let p = &mut rows[r];
        for k in 0..ROW_LEN {
            let lr = if k == 0 { lr_sigma } else { lr_sh };
            update_scalar(method, &mut p[k], g[k], &mut v[k], lr, decay, eps);
        }
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sigma_schedule() -> LrSchedule {
        LrSchedule::DelayedExponential {
            lr_init: 30.0,
            lr_final: 0.05,
            total_steps: 250_000,
            delay_steps: 15_000,
            delay_mult: 0.01,
        }
    }

    #[test]
    fn schedule_endpoints() {
        assert!((sigma_schedule().lr_at(250_000) - 0.05).abs() < 1e-12);
        let sh = LrSchedule::Exponential {
            lr_init: 0.01,
            lr_final: 5e-6,
            total_steps: 250_000,
        };
        assert!((sh.lr_at(0) - 0.01).abs() < 1e-15);
        assert!((sh.lr_at(125_000) - (0.01f64 * 5e-6).sqrt()).abs() < 1e-12);
        assert!((sh.lr_at(400_000) - 5e-6).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant { lr: 0.3 }.lr_at(77), 0.3);
    }

    #[test]
    fn delay_ramp_starts_at_mult() {
        let s = sigma_schedule();
        assert!((s.lr_at(0) - 0.3).abs() < 1e-12);
        let undelayed = LrSchedule::Exponential {
            lr_init: 30.0,
            lr_final: 0.05,
            total_steps: 250_000,
        };
        assert!((s.lr_at(15_000) - undelayed.lr_at(15_000)).abs() < 1e-12);
        assert!(s.lr_at(7_500) < undelayed.lr_at(7_500));
    }

    #[test]
    fn validate_rejects_increasing_schedule() {
        let s = LrSchedule::Exponential {
            lr_init: 0.1,
            lr_final: 1.0,
            total_steps: 10,
        };
        assert!(s.validate().is_err());
        assert!(sigma_schedule().validate().is_ok());
    }

    #[test]
    fn zero_gradient_leaves_everything() {
        let mut rows = vec![[1.0f64; ROW_LEN]; 3];
        let before = rows.clone();
        let gb = GradientBuffer::new(3);
        let mut st = OptimState::new(3, 0.95, 1e-8);
        st.second_moment[1][4] = 0.5;
        let st_before = st.second_moment.clone();
        step(&mut rows, &gb, &mut st, 1.0, 1.0, OptimMethod::Rmsprop).unwrap();
        assert_eq!(rows, before);
        assert_eq!(st.second_moment, st_before);
    }

    #[test]
    fn sgd_single_update() {
        let mut rows = vec![[1.0f64; ROW_LEN]];
        let mut gb = GradientBuffer::new(1);
        gb.add(0, 0, 0.5);
        let mut st = OptimState::new(1, 0.95, 1e-8);
        step(&mut rows, &gb, &mut st, 0.1, 0.1, OptimMethod::Sgd).unwrap();
        assert!((rows[0][0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_recurrence_converges() {
        // Scalar oracle: v_n = 1 - 0.95^n, update_n = lr / (sqrt(v_n) + eps).
        let mut rows = vec![[0.0f64; ROW_LEN]];
        let mut st = OptimState::new(1, 0.95, 1e-8);
        let mut gb = GradientBuffer::new(1);
        let lr = 0.01;
        let mut prev = 0.0;
        for n in 1..=400 {
            gb.clear();
            gb.add(0, 0, 1.0);
            step(&mut rows, &gb, &mut st, lr, lr, OptimMethod::Rmsprop).unwrap();
            let v_oracle = 1.0 - 0.95f64.powi(n);
            assert!((st.second_moment[0][0] - v_oracle).abs() < 1e-12);
            let upd = prev - rows[0][0];
            assert!((upd - lr / (v_oracle.sqrt() + 1e-8)).abs() < 1e-12);
            prev = rows[0][0];
        }
        assert!((st.second_moment[0][0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn mismatch_is_error() {
        let mut rows = vec![[0.0f64; ROW_LEN]; 2];
        let gb = GradientBuffer::new(3);
        let mut st = OptimState::new(2, 0.95, 1e-8);
        assert!(step(&mut rows, &gb, &mut st, 1.0, 1.0, OptimMethod::Sgd).is_err());
    }

    #[test]
    fn rmsprop_quadratic_with_delayed_schedule() {
        // minimize (x - 3)^2 from x = 0
        let sched = LrSchedule::DelayedExponential {
            lr_init: 0.1,
            lr_final: 1e-4,
            total_steps: 1000,
            delay_steps: 100,
            delay_mult: 0.01,
        };
        let mut rows = vec![[0.0f64; ROW_LEN]];
        let mut st = OptimState::new(1, 0.95, 1e-8);
        let mut gb = GradientBuffer::new(1);
        for s in 0..1000 {
            gb.clear();
            gb.add(0, 0, 2.0 * (rows[0][0] - 3.0));
            let lr = sched.lr_at(s);
            step(&mut rows, &gb, &mut st, lr, lr, OptimMethod::Rmsprop).unwrap();
            assert!(rows[0][0].is_finite());
        }
        assert!((rows[0][0] - 3.0).abs() < 1e-3, "x = {}", rows[0][0]);
    }
}
