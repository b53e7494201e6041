//! SGD with momentum and a cosine-annealing warm-restarts schedule.

use crate::error::{CoreError, Result};
use crate::params::ParamSet;
use crate::tensor::Real;
use std::f64::consts::PI;

/// Schedule and momentum settings plus the mutable step state.
///
/// The learning rate at `t` steps into the current period `T_i` is
/// `lr_min + 0.5 * (lr_max - lr_min) * (1 + cos(pi * t / T_i))`, so `t = 0`
/// yields `lr_max` and `t = T_i` yields `lr_min`. After the `lr_min` step
/// the counter restarts and the period grows by `period_multiplier`.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    period_multiplier: f64,
    current_period: f64,
    steps_in_period: u64,
    step_counter: u64,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(
        lr_max: f64,
        lr_min: f64,
        restart_period: u64,
        period_multiplier: f64,
        momentum: f64,
    ) -> Result<Self> {
        if restart_period == 0 {
            return Err(CoreError::config("restart_period must be positive"));
        }
        if period_multiplier < 1.0 {
            return Err(CoreError::config("period_multiplier must be >= 1"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(CoreError::config("momentum must be in [0, 1)"));
        }
        if lr_min > lr_max {
            return Err(CoreError::config("lr_min must not exceed lr_max"));
        }
        Ok(OptimizerState {
            lr_max,
            lr_min,
            momentum,
            period_multiplier,
            current_period: restart_period as f64,
            steps_in_period: 0,
            step_counter: 0,
            velocity: Vec::new(),
        })
    }

    /// The effective learning rate for the upcoming step.
    pub fn learning_rate(&self) -> f64 {
        let phase = (self.steps_in_period as f64 / self.current_period).min(1.0);
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * phase).cos())
    }

    pub fn step_counter(&self) -> u64 {
        self.step_counter
    }

    fn advance(&mut self) {
        self.step_counter += 1;
        self.steps_in_period += 1;
        if self.steps_in_period as f64 > self.current_period {
            self.steps_in_period = 0;
            self.current_period *= self.period_multiplier;
        }
    }

    /// One momentum-SGD update: `v <- momentum * v + g; p <- p - lr * v`.
    /// Returns the learning rate that was applied.
    pub fn sgd_step(&mut self, params: &mut ParamSet<T>, grads: &[Vec<T>]) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(CoreError::contract(format!(
                "got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
        }
        let lr = self.learning_rate();
        let lr_t = T::from_f64(lr);
        let mom = T::from_f64(self.momentum);
        for i in 0..params.len() {
            let p = params.entry_mut(i);
            if p.value.len() != grads[i].len() {
                return Err(CoreError::contract(format!(
                    "parameter `{}`: gradient length {} does not match {}",
                    p.name,
                    grads[i].len(),
                    p.value.len()
                )));
            }
            let vel = &mut self.velocity[i];
            for ((v, &g), w) in vel.iter_mut().zip(&grads[i]).zip(p.value.iter_mut()) {
                *v = mom * *v + g;
                if lr != 0.0 {
                    *w -= lr_t * *v;
                }
            }
        }
        self.advance();
        Ok(lr)
    }
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for v in g {
            let x = v.as_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(lr_max: f64, period: u64) -> OptimizerState<f64> {
        OptimizerState::new(lr_max, 0.0, period, 2.0, 0.0).unwrap()
    }

    #[test]
    fn schedule_hits_max_mid_and_min() {
        let mut s = OptimizerState::<f64>::new(1.0, 0.2, 4, 2.0, 0.0).unwrap();
        assert!((s.learning_rate() - 1.0).abs() < 1e-15); // t = 0
        s.advance();
        s.advance();
        assert!((s.learning_rate() - 0.6).abs() < 1e-15); // t = T/2
        s.advance();
        s.advance();
        assert!((s.learning_rate() - 0.2).abs() < 1e-15); // t = T
    }

    #[test]
    fn period_doubles_after_restart() {
        let mut s = state(1.0, 2);
        for _ in 0..3 {
            s.advance(); // t = 0,1,2 served; restart
        }
        assert_eq!(s.steps_in_period, 0);
        assert!((s.current_period - 4.0).abs() < 1e-15);
        // the doubled period reaches lr/2 at t = 2 now
        s.advance();
        s.advance();
        assert!((s.learning_rate() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_restart_period_is_config_error() {
        assert!(OptimizerState::<f64>::new(1.0, 0.0, 0, 2.0, 0.9).is_err());
    }

    #[test]
    fn plain_sgd_step_matches_hand_math() {
        let mut params: ParamSet<f64> = ParamSet::new();
        params.push("p", vec![1], vec![1.0]).unwrap();
        let mut s = state(0.1, 100);
        s.sgd_step(&mut params, &[vec![2.0]]).unwrap();
        assert!((params.entry(0).value[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates_over_two_steps() {
        let mut params: ParamSet<f64> = ParamSet::new();
        params.push("p", vec![1], vec![0.0]).unwrap();
        // large period so the lr stays at lr_max for both steps
        let mut s = OptimizerState::<f64>::new(0.1, 0.1, 1_000_000, 1.0, 0.9).unwrap();
        s.sgd_step(&mut params, &[vec![1.0]]).unwrap();
        s.sgd_step(&mut params, &[vec![1.0]]).unwrap();
        assert!((params.entry(0).value[0] - (-0.29)).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params: ParamSet<f64> = ParamSet::new();
        params.push("p", vec![2], vec![3.0, -4.0]).unwrap();
        let mut s = state(0.5, 10);
        s.sgd_step(&mut params, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(params.entry(0).value, vec![3.0, -4.0]);
    }

    #[test]
    fn lr_stays_within_bounds_over_many_steps() {
        let mut s = OptimizerState::<f64>::new(0.002, 0.0001, 3, 1.5, 0.0).unwrap();
        for _ in 0..500 {
            let lr = s.learning_rate();
            assert!(lr >= 0.0001 - 1e-15 && lr <= 0.002 + 1e-15);
            s.advance();
        }
    }
}
