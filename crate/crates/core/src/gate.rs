//! Hard-concrete field gates.
//!
//! For noise `u ~ U(0,1)` the gate is
//!
//! ```text
//! s  = sigmoid((ln(u / (1 - u)) + log_alpha) / beta)
//! s' = s * (zeta - gamma) + gamma
//! z  = min(1, max(0, s'))
//! ```
//!
//! Stretching to `[gamma, zeta]` before clamping puts point masses at
//! exactly 0 and 1. The learnable parameter is `log_alpha`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Open01};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{sigmoid, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConstants {
    /// Temperature.
    pub beta: f64,
    /// Upper stretch bound, > 1.
    pub zeta: f64,
    /// Lower stretch bound, < 0.
    pub gamma: f64,
    /// Mean of the alpha initialization.
    pub mu: f64,
    /// Variance of the alpha initialization.
    pub sigma2: f64,
}

impl Default for GateConstants {
    fn default() -> Self {
        Self {
            beta: 0.83,
            zeta: 1.1,
            gamma: -0.1,
            mu: 0.5,
            sigma2: 0.0625,
        }
    }
}

impl GateConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.gamma < 0.0 && self.zeta > 1.0 && self.sigma2 >= 0.0)
            || !self.mu.is_finite()
        {
            return Err(Error::Config(format!(
                "invalid gate constants: need beta > 0, gamma < 0 < 1 < zeta, sigma2 >= 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<T> {
    pub log_alpha: Vec<T>,
    pub constants: GateConstants,
}

/// One stochastic draw of the mask plus what the backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSample<T> {
    pub z: Vec<T>,
    pub u: Vec<T>,
    pub s: Vec<T>,
    pub s_bar: Vec<T>,
}

impl<T: Real> GateParams<T> {
    /// `log_alpha_j = ln(max(a_j, 0.01))` with `a_j ~ Normal(mu, sigma2)`.
    pub fn init(m: usize, seed: u64, constants: GateConstants) -> Result<Self> {
        constants.validate()?;
        if m == 0 {
            return Err(Error::Config("gate needs at least one field".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(constants.mu, constants.sigma2.sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        let log_alpha = (0..m)
            .map(|_| T::of(normal.sample(&mut rng).max(0.01).ln()))
            .collect();
        Ok(Self { log_alpha, constants })
    }

    pub fn from_log_alpha(log_alpha: Vec<T>, constants: GateConstants) -> Result<Self> {
        constants.validate()?;
        if log_alpha.is_empty() || log_alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("log_alpha must be nonempty and finite".into()));
        }
        Ok(Self { log_alpha, constants })
    }

    pub fn len(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_alpha.is_empty()
    }

    fn stretch(&self, s: T) -> T {
        let c = &self.constants;
        s * T::of(c.zeta - c.gamma) + T::of(c.gamma)
    }

    /// Hard-concrete sample for the given noise, every `u_j` in (0, 1).
    pub fn sample(&self, u: &[T]) -> Result<MaskSample<T>> {
        if u.len() != self.len() {
            return Err(Error::Shape(format!("{} noise values for {} gates", u.len(), self.len())));
        }
        if let Some(bad) = u.iter().find(|&&x| !(x > T::zero() && x < T::one())) {
            return Err(Error::Domain(format!("noise {bad} outside the open interval (0, 1)")));
        }
        let inv_beta = T::one() / T::of(self.constants.beta);
        let s: Vec<T> = u
            .iter()
            .zip(&self.log_alpha)
            .map(|(&u, &la)| sigmoid(((u / (T::one() - u)).ln() + la) * inv_beta))
            .collect();
        let s_bar: Vec<T> = s.iter().map(|&v| self.stretch(v)).collect();
        let z = s_bar.iter().map(|&v| clamp01(v)).collect();
        Ok(MaskSample {
            z,
            u: u.to_vec(),
            s,
            s_bar,
        })
    }

    /// Noise-free mask: the sample at `u = 0.5`.
    pub fn deterministic_mask(&self) -> Vec<T> {
        let inv_beta = T::one() / T::of(self.constants.beta);
        self.log_alpha
            .iter()
            .map(|&la| clamp01(self.stretch(sigmoid(la * inv_beta))))
            .collect()
    }

    /// Reparameterized `dL/dlog_alpha` at fixed noise. Zero wherever the
    /// clamp is active.
    pub fn mask_grad(&self, sample: &MaskSample<T>, dz: &[T]) -> Result<Vec<T>> {
        if sample.z.len() != self.len() || dz.len() != self.len() {
            return Err(Error::Shape("mask gradient length mismatch".into()));
        }
        let scale = T::of((self.constants.zeta - self.constants.gamma) / self.constants.beta);
        Ok(sample
            .s_bar
            .iter()
            .zip(&sample.s)
            .zip(dz)
            .map(|((&sb, &s), &g)| {
                if sb > T::zero() && sb < T::one() {
                    g * scale * s * (T::one() - s)
                } else {
                    T::zero()
                }
            })
            .collect())
    }
}

fn clamp01<T: Real>(x: T) -> T {
    x.max(T::zero()).min(T::one())
}

/// Draws `m` noise values strictly inside (0, 1) at precision `T`.
pub fn draw_noise<T: Real, R: Rng>(rng: &mut R, m: usize) -> Vec<T> {
    (0..m)
        .map(|_| loop {
            let u: f64 = Open01.sample(rng);
            let t = T::of(u);
            if t > T::zero() && t < T::one() {
                break t;
            }
        })
        .collect()
}

/// Mean of the mask, the expected fraction of active fields.
pub fn expected_active_fraction<T: Real>(z: &[T]) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::Shape("empty mask".into()));
    }
    Ok(z.iter().map(|v| v.f64()).sum::<f64>() / z.len() as f64)
}
