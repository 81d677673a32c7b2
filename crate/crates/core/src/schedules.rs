//! Diffusion schedules `(sigma, alpha)` and the derived flow coefficients.
//!
//! The working convention is variance exploding (`alpha == 1`) with a
//! log-linear noise level `sigma(s) = sigma_min * exp(c2 * s)`,
//! `c2 = ln(sigma_max / sigma_min)`. General normalized schedules exist so
//! that the coefficient algebra can be exercised with `alpha != 1`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smooth signal/noise pair on `[0, 1]` with `sigma(1) = alpha(0) = 1` and
/// `alpha(1) = sigma(0) = 0`.
pub trait NormalizedSchedule: Send + Sync + fmt::Debug {
    fn sigma(&self, s: f64) -> f64;
    fn sigma_dot(&self, s: f64) -> f64;
    fn alpha(&self, s: f64) -> f64;
    fn alpha_dot(&self, s: f64) -> f64;
}

/// `alpha = 1 - s`, `sigma = s`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearInterpolant;

impl NormalizedSchedule for LinearInterpolant {
    fn sigma(&self, s: f64) -> f64 {
        s
    }
    fn sigma_dot(&self, _s: f64) -> f64 {
        1.0
    }
    fn alpha(&self, s: f64) -> f64 {
        1.0 - s
    }
    fn alpha_dot(&self, _s: f64) -> f64 {
        -1.0
    }
}

/// `alpha = cos(pi s / 2)`, `sigma = sin(pi s / 2)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrigonometricInterpolant;

impl NormalizedSchedule for TrigonometricInterpolant {
    fn sigma(&self, s: f64) -> f64 {
        (std::f64::consts::FRAC_PI_2 * s).sin()
    }
    fn sigma_dot(&self, s: f64) -> f64 {
        std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * s).cos()
    }
    fn alpha(&self, s: f64) -> f64 {
        (std::f64::consts::FRAC_PI_2 * s).cos()
    }
    fn alpha_dot(&self, s: f64) -> f64 {
        -std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * s).sin()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    LogLinearVe,
    GeneralNormalized,
}

#[derive(Clone)]
pub enum DiffusionSchedule {
    LogLinearVe { sigma_min: f64, sigma_max: f64 },
    GeneralNormalized(Arc<dyn NormalizedSchedule>),
}

impl fmt::Debug for DiffusionSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiffusionSchedule::LogLinearVe { sigma_min, sigma_max } => f
                .debug_struct("LogLinearVe")
                .field("sigma_min", sigma_min)
                .field("sigma_max", sigma_max)
                .finish(),
            DiffusionSchedule::GeneralNormalized(inner) => {
                f.debug_tuple("GeneralNormalized").field(inner).finish()
            }
        }
    }
}

/// Coefficients of the ideal flow at a fixed time.
///
/// `v = gamma1 * score + gamma2 * x = c1 * E[X0 | X_s = x] + c2 * x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleCoefficients {
    pub c1: f64,
    pub c2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

fn check_time(s: f64) -> Result<()> {
    if (0.0..=1.0).contains(&s) {
        Ok(())
    } else {
        Err(Error::Domain(s))
    }
}

impl DiffusionSchedule {
    pub fn log_linear(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min.is_finite() && sigma_min > 0.0) {
            return Err(Error::InvalidSchedule(format!(
                "sigma_min must be positive, got {sigma_min}"
            )));
        }
        if !(sigma_max.is_finite() && sigma_max >= sigma_min) {
            return Err(Error::InvalidSchedule(format!(
                "sigma_max must be finite and >= sigma_min, got {sigma_max}"
            )));
        }
        Ok(DiffusionSchedule::LogLinearVe { sigma_min, sigma_max })
    }

    /// Wraps a normalized schedule after checking its boundary values.
    pub fn general(inner: Arc<dyn NormalizedSchedule>) -> Result<Self> {
        let tol = 1e-12;
        let checks = [
            ("sigma(1) = 1", inner.sigma(1.0) - 1.0),
            ("alpha(0) = 1", inner.alpha(0.0) - 1.0),
            ("alpha(1) = 0", inner.alpha(1.0)),
            ("sigma(0) = 0", inner.sigma(0.0)),
        ];
        for (name, residual) in checks {
            if residual.abs() > tol {
                return Err(Error::InvalidSchedule(format!(
                    "boundary condition {name} violated by {residual:e}"
                )));
            }
        }
        Ok(DiffusionSchedule::GeneralNormalized(inner))
    }

    pub fn kind(&self) -> ScheduleKind {
        match self {
            DiffusionSchedule::LogLinearVe { .. } => ScheduleKind::LogLinearVe,
            DiffusionSchedule::GeneralNormalized(_) => ScheduleKind::GeneralNormalized,
        }
    }

    /// True for the variance-exploding convention `alpha == 1`.
    pub fn is_ve(&self) -> bool {
        matches!(self, DiffusionSchedule::LogLinearVe { .. })
    }

    /// `c2 = ln(sigma_max / sigma_min)` for log-linear schedules.
    pub fn log_rate(&self) -> Option<f64> {
        match *self {
            DiffusionSchedule::LogLinearVe { sigma_min, sigma_max } => {
                Some((sigma_max / sigma_min).ln())
            }
            DiffusionSchedule::GeneralNormalized(_) => None,
        }
    }

    pub fn sigma(&self, s: f64) -> Result<f64> {
        check_time(s)?;
        Ok(match self {
            DiffusionSchedule::LogLinearVe { sigma_min, sigma_max } => {
                sigma_min * ((sigma_max / sigma_min).ln() * s).exp()
            }
            DiffusionSchedule::GeneralNormalized(inner) => inner.sigma(s),
        })
    }

    pub fn sigma_dot(&self, s: f64) -> Result<f64> {
        check_time(s)?;
        Ok(match self {
            DiffusionSchedule::LogLinearVe { sigma_min, sigma_max } => {
                let rate = (sigma_max / sigma_min).ln();
                rate * sigma_min * (rate * s).exp()
            }
            DiffusionSchedule::GeneralNormalized(inner) => inner.sigma_dot(s),
        })
    }

    pub fn alpha(&self, s: f64) -> Result<f64> {
        check_time(s)?;
        Ok(match self {
            DiffusionSchedule::LogLinearVe { .. } => 1.0,
            DiffusionSchedule::GeneralNormalized(inner) => inner.alpha(s),
        })
    }

    pub fn alpha_dot(&self, s: f64) -> Result<f64> {
        check_time(s)?;
        Ok(match self {
            DiffusionSchedule::LogLinearVe { .. } => 0.0,
            DiffusionSchedule::GeneralNormalized(inner) => inner.alpha_dot(s),
        })
    }

    pub fn coefficients(&self, s: f64) -> Result<ScheduleCoefficients> {
        let sigma = self.sigma(s)?;
        let sigma_dot = self.sigma_dot(s)?;
        let alpha = self.alpha(s)?;
        let alpha_dot = self.alpha_dot(s)?;
        if sigma == 0.0 {
            return Err(Error::SingularSchedule {
                coefficient: "c2",
                s,
                reason: "sigma(s) = 0",
            });
        }
        let c2 = sigma_dot / sigma;
        let c1 = alpha_dot - c2 * alpha;
        if self.is_ve() {
            return Ok(ScheduleCoefficients {
                c1,
                c2,
                gamma1: -sigma_dot * sigma,
                gamma2: 0.0,
            });
        }
        // trigonometric alpha(1) evaluates to ~6e-17 rather than 0
        if alpha.abs() <= 1e-12 {
            return Err(Error::SingularSchedule {
                coefficient: "gamma1",
                s,
                reason: "alpha(s) = 0",
            });
        }
        let gamma2 = alpha_dot / alpha;
        Ok(ScheduleCoefficients {
            c1,
            c2,
            gamma1: gamma2 * sigma * sigma - sigma_dot * sigma,
            gamma2,
        })
    }

    /// Maps a VE schedule to normalized form via `x -> x / (1 + sigma(s))`,
    /// returning `(alpha_eff, sigma_eff)`.
    pub fn normalized_pair(&self, s: f64) -> Result<(f64, f64)> {
        let sigma = self.sigma(s)?;
        let alpha = self.alpha(s)?;
        let scale = 1.0 / (alpha + sigma);
        Ok((alpha * scale, sigma * scale))
    }
}

/// Default distance kept from the endpoints of `[0, 1]` for a grid of
/// `steps` steps.
pub fn default_margin(steps: usize) -> f64 {
    0.5 / steps.max(1) as f64
}

/// `points` uniformly spaced times on `[margin, 1 - margin]`, increasing.
pub fn interior_grid(points: usize, margin: f64) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => {
            let lo = margin;
            let hi = 1.0 - margin;
            let h = (hi - lo) / (points - 1) as f64;
            (0..points).map(|k| lo + h * k as f64).collect()
        }
    }
}
