use serde::{Deserialize, Serialize};

use super::real::Real;
use super::tensor::Tensor;
use super::NumericsError;

/// Lookahead wrapped around SGD with optional (Nesterov) momentum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookaheadConfig {
    /// Inner steps between slow-weight synchronisations.
    pub k: usize,
    /// Slow-weight interpolation factor.
    pub alpha: f64,
    pub momentum: f64,
    pub nesterov: bool,
}

impl Default for LookaheadConfig {
    fn default() -> Self {
        LookaheadConfig {
            k: 5,
            alpha: 0.5,
            momentum: 0.9,
            nesterov: true,
        }
    }
}

impl LookaheadConfig {
    pub fn validate(&self) -> Result<(), NumericsError> {
        if self.k == 0 {
            return Err(NumericsError::InvalidOptimizer("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(NumericsError::InvalidOptimizer(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NumericsError::InvalidOptimizer(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// Slow weights and momentum buffers; the live parameters are the fast weights.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: LookaheadConfig,
    slow: Vec<Vec<T>>,
    velocity: Vec<Vec<T>>,
    counter: usize,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>], config: LookaheadConfig) -> Result<Self, NumericsError> {
        config.validate()?;
        Ok(OptimizerState {
            config,
            slow: params.iter().map(|p| p.data().to_vec()).collect(),
            velocity: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            counter: 0,
        })
    }

    /// Rebuilds a state from serialized buffers.
    pub fn from_parts(config: LookaheadConfig, slow: Vec<Vec<T>>, velocity: Vec<Vec<T>>, counter: usize) -> Result<Self, NumericsError> {
        config.validate()?;
        if slow.len() != velocity.len() || counter >= config.k {
            return Err(NumericsError::InvalidOptimizer("inconsistent optimizer buffers".into()));
        }
        Ok(OptimizerState {
            config,
            slow,
            velocity,
            counter,
        })
    }

    pub fn slow(&self) -> &[Vec<T>] {
        &self.slow
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Inner steps taken since the last synchronisation, in `[0, k)`.
    pub fn counter(&self) -> usize {
        self.counter
    }

    /// One inner SGD step on `params` (the fast weights) with per-parameter rates;
    /// every `k`-th call interpolates the slow weights toward the fast ones and resets
    /// the fast weights to the result.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>], lrs: &[f64]) -> Result<(), NumericsError> {
        if params.len() != self.slow.len() || grads.len() != params.len() || lrs.len() != params.len() {
            return Err(NumericsError::Shape {
                op: "sgd_lookahead_step",
                detail: format!(
                    "{} params, {} grads, {} rates for {} slots",
                    params.len(),
                    grads.len(),
                    lrs.len(),
                    self.slow.len()
                ),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.slow[i].len() {
                return Err(NumericsError::Shape {
                    op: "sgd_lookahead_step",
                    detail: format!("parameter {i}: {:?} vs {} gradient values", p.shape(), g.len()),
                });
            }
        }
        let mu = T::lit(self.config.momentum);
        for ((p, g), (v, &lr)) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut().zip(lrs)) {
            let lr = T::lit(lr);
            let w = p.data_mut();
            if self.config.momentum == 0.0 {
                for (wi, gi) in w.iter_mut().zip(g) {
                    *wi -= lr * *gi;
                }
                continue;
            }
            for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi + *gi;
                let update = if self.config.nesterov { *gi + mu * *vi } else { *vi };
                *wi -= lr * update;
            }
        }
        self.counter += 1;
        if self.counter == self.config.k {
            self.counter = 0;
            let alpha = T::lit(self.config.alpha);
            let keep = T::one() - alpha;
            for (p, s) in params.iter_mut().zip(self.slow.iter_mut()) {
                for (fast, slow) in p.data_mut().iter_mut().zip(s.iter_mut()) {
                    *slow = keep * *slow + alpha * *fast;
                    *fast = *slow;
                }
            }
        }
        Ok(())
    }
}
