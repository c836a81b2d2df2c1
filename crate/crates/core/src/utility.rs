//! Alpha-fair utility of a hit probability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this hit probability the log utility switches to its Taylor series about 1.
pub const LOG_SMOOTHING_BELOW: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilitySpec {
    pub alpha: f64,
    #[serde(default = "default_taylor_order")]
    pub taylor_order: u32,
}

fn default_taylor_order() -> u32 {
    30
}

impl Default for UtilitySpec {
    fn default() -> Self {
        Self::proportional()
    }
}

impl UtilitySpec {
    pub fn new(alpha: f64) -> Result<Self> {
        let u = Self {
            alpha,
            taylor_order: default_taylor_order(),
        };
        u.validate()?;
        Ok(u)
    }

    pub fn proportional() -> Self {
        Self {
            alpha: 1.0,
            taylor_order: default_taylor_order(),
        }
    }

    pub fn offloading() -> Self {
        Self {
            alpha: 0.0,
            taylor_order: default_taylor_order(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::param(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.taylor_order == 0 {
            return Err(Error::param("taylor_order must be >= 1"));
        }
        Ok(())
    }

    fn is_log(&self) -> bool {
        self.alpha == 1.0
    }

    /// Utility with the smoothed logarithm near zero; finite for `p = 0` when alpha is 1.
    pub fn value(&self, p: f64) -> Result<f64> {
        check_prob(p)?;
        if self.is_log() && p < LOG_SMOOTHING_BELOW {
            return Ok(taylor_log(p, self.taylor_order));
        }
        Ok(self.value_unchecked(p))
    }

    /// Utility without smoothing, consistent with [`UtilitySpec::derivatives`].
    pub fn value_exact(&self, p: f64) -> Result<f64> {
        check_prob(p)?;
        Ok(self.value_unchecked(p))
    }

    fn value_unchecked(&self, p: f64) -> f64 {
        if self.is_log() {
            p.ln()
        } else {
            p.powf(1.0 - self.alpha) / (1.0 - self.alpha)
        }
    }

    /// `(psi', psi'')` with respect to the hit probability.
    pub fn derivatives(&self, p: f64) -> Result<(f64, f64)> {
        check_prob(p)?;
        if p == 0.0 {
            return Err(Error::Domain("utility derivative is undefined at p = 0".into()));
        }
        let a = self.alpha;
        if a == 0.0 {
            return Ok((1.0, 0.0));
        }
        let d1 = p.powf(-a);
        Ok((d1, -a * d1 / p))
    }

    /// Inverse of `psi'`; only defined for alpha > 0.
    pub fn inverse_derivative(&self, y: f64) -> Result<f64> {
        if self.alpha == 0.0 {
            return Err(Error::Domain("psi' is constant for alpha = 0".into()));
        }
        if !(y > 0.0) {
            return Err(Error::Domain(format!("psi' takes positive values, got {y}")));
        }
        Ok(y.powf(-1.0 / self.alpha))
    }

    /// Value of the smoothed log utility at zero hit probability.
    pub fn log_floor(&self) -> f64 {
        taylor_log(0.0, self.taylor_order)
    }
}

pub fn psi(p: f64, u: &UtilitySpec) -> Result<f64> {
    u.value(p)
}

pub fn psi_derivatives(p: f64, u: &UtilitySpec) -> Result<(f64, f64)> {
    u.derivatives(p)
}

/// `log p ~ -sum_{n=1}^{order} (1-p)^n / n`.
fn taylor_log(p: f64, order: u32) -> f64 {
    let q = 1.0 - p;
    let mut term = 1.0;
    let mut sum = 0.0;
    for n in 1..=order {
        term *= q;
        sum -= term / n as f64;
    }
    sum
}

fn check_prob(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Domain(format!("hit probability {p} outside [0, 1]")))
    }
}
