//! Task loss, the sparsity constraint and its multipliers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{sigmoid, softplus, Real};

/// Summed binary cross-entropy on logits and its per-example gradient
/// `sigmoid(logit) - y`.
pub fn logloss_batch<T: Real>(logits: &[T], labels: &[u8]) -> Result<(f64, Vec<T>)> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!("{} logits for {} labels", logits.len(), labels.len())));
    }
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&x, &y)| {
            // -ln sigmoid(x) = softplus(-x), -ln(1 - sigmoid(x)) = softplus(x)
            if y == 1 {
                loss += softplus(-x).f64();
                sigmoid(x) - T::one()
            } else {
                loss += softplus(x).f64();
                sigmoid(x)
            }
        })
        .collect();
    Ok((loss, grad))
}

/// Lagrangian state for the retained-fraction constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintState {
    pub lambda: f64,
    pub phi: f64,
    /// Fraction of fields to prune.
    pub tau: f64,
    pub multiplier_lr: f64,
    /// Penalize `mean(z) - tau` literally instead of `mean(z) - (1 - tau)`.
    #[serde(default)]
    pub literal_target: bool,
}

impl ConstraintState {
    pub fn new(tau: f64, multiplier_lr: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::Config(format!("tau must be in [0, 1), got {tau}")));
        }
        if !(multiplier_lr > 0.0 && multiplier_lr.is_finite()) {
            return Err(Error::Config(format!("multiplier_lr must be positive, got {multiplier_lr}")));
        }
        Ok(Self {
            lambda: 0.0,
            phi: 0.0,
            tau,
            multiplier_lr,
            literal_target: false,
        })
    }

    /// Target mean of the mask.
    pub fn target(&self) -> f64 {
        if self.literal_target {
            self.tau
        } else {
            1.0 - self.tau
        }
    }

    pub fn gap(&self, mean_z: f64) -> f64 {
        mean_z - self.target()
    }
}

/// `lambda * g + phi * g^2` with `g = mean(z) - target`, and its gradient
/// `(lambda + 2 phi g) / m`, identical for every entry.
pub fn constraint_loss<T: Real>(z: &[T], state: &ConstraintState) -> Result<(f64, Vec<T>)> {
    if z.is_empty() {
        return Err(Error::Shape("empty mask".into()));
    }
    let m = z.len() as f64;
    let mean = z.iter().map(|v| v.f64()).sum::<f64>() / m;
    let g = state.gap(mean);
    let loss = state.lambda * g + state.phi * g * g;
    let d = T::of((state.lambda + 2.0 * state.phi * g) / m);
    Ok((loss, vec![d; z.len()]))
}

pub fn total_loss(task: f64, constraint: f64) -> f64 {
    task + constraint
}

/// Dual ascent: `lambda += lr * g`, `phi = max(0, phi + lr * g^2)`.
pub fn update_multipliers(state: &ConstraintState, mean_z: f64) -> ConstraintState {
    let g = state.gap(mean_z);
    ConstraintState {
        lambda: state.lambda + state.multiplier_lr * g,
        phi: (state.phi + state.multiplier_lr * g * g).max(0.0),
        ..*state
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub task_loss: f64,
    pub constraint_loss: f64,
    pub total: f64,
    pub mean_z: f64,
}

impl LossReport {
    pub fn new(task_loss: f64, constraint_loss: f64, mean_z: f64) -> Self {
        Self {
            task_loss,
            constraint_loss,
            total: total_loss(task_loss, constraint_loss),
            mean_z,
        }
    }
}
