//! Canonical-link exponential family kernels.
//!
//! A family is described by its cumulant function ψ, so that the density of a
//! response with natural parameter θ is proportional to `exp(θ y - ψ(θ))`.
//! The first derivative of ψ is the conditional mean and the second is the
//! variance function. The base measure never enters estimation and is not
//! represented.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{OsmacError, Result};

/// Largest Poisson mean we are willing to sample from.
const MAX_POISSON_MEAN: f64 = 1e15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// ψ(θ) = e^θ, log link.
    Poisson,
    /// ψ(θ) = log(1 + e^θ), logit link.
    Bernoulli,
    /// ψ(θ) = θ²/2, identity link, unit dispersion.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivOrder {
    First,
    Second,
    Third,
}

impl TryFrom<u8> for DerivOrder {
    type Error = OsmacError;

    fn try_from(order: u8) -> Result<Self> {
        match order {
            1 => Ok(DerivOrder::First),
            2 => Ok(DerivOrder::Second),
            3 => Ok(DerivOrder::Third),
            other => Err(OsmacError::InvalidParameter(format!(
                "derivative order must be 1, 2 or 3, got {other}"
            ))),
        }
    }
}

fn check_finite(theta: f64) -> Result<()> {
    if theta.is_finite() {
        Ok(())
    } else {
        Err(OsmacError::Domain(format!("natural parameter {theta} is not finite")))
    }
}

/// Logistic sigmoid evaluated without overflow for either sign of `theta`.
#[inline]
pub(crate) fn sigmoid(theta: f64) -> f64 {
    if theta >= 0.0 {
        1.0 / (1.0 + (-theta).exp())
    } else {
        let e = theta.exp();
        e / (1.0 + e)
    }
}

impl Family {
    /// Cumulant function ψ(θ).
    pub fn psi(self, theta: f64) -> Result<f64> {
        check_finite(theta)?;
        Ok(self.psi_unchecked(theta))
    }

    /// Derivative of ψ of the requested order.
    pub fn psi_deriv(self, theta: f64, order: DerivOrder) -> Result<f64> {
        check_finite(theta)?;
        Ok(match order {
            DerivOrder::First => self.mean(theta),
            DerivOrder::Second => self.variance(theta),
            DerivOrder::Third => self.third(theta),
        })
    }

    #[inline]
    pub(crate) fn psi_unchecked(self, theta: f64) -> f64 {
        match self {
            Family::Poisson => theta.exp(),
            Family::Bernoulli => {
                // log(1 + e^θ) = θ + log(1 + e^{-θ}) for θ > 0
                if theta > 0.0 {
                    theta + (-theta).exp().ln_1p()
                } else {
                    theta.exp().ln_1p()
                }
            }
            Family::Gaussian => 0.5 * theta * theta,
        }
    }

    /// ψ̇(θ), the conditional mean.
    #[inline]
    pub fn mean(self, theta: f64) -> f64 {
        match self {
            Family::Poisson => theta.exp(),
            Family::Bernoulli => sigmoid(theta),
            Family::Gaussian => theta,
        }
    }

    /// ψ̈(θ), the variance function.
    #[inline]
    pub fn variance(self, theta: f64) -> f64 {
        match self {
            Family::Poisson => theta.exp(),
            Family::Bernoulli => {
                let s = sigmoid(theta);
                s * (1.0 - s)
            }
            Family::Gaussian => 1.0,
        }
    }

    #[inline]
    fn third(self, theta: f64) -> f64 {
        match self {
            Family::Poisson => theta.exp(),
            Family::Bernoulli => {
                let s = sigmoid(theta);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            Family::Gaussian => 0.0,
        }
    }

    /// Draw one response with natural parameter `theta`.
    pub fn sample_response<R: Rng + ?Sized>(self, theta: f64, rng: &mut R) -> Result<f64> {
        check_finite(theta)?;
        match self {
            Family::Poisson => {
                let lambda = theta.exp();
                if !lambda.is_finite() || lambda > MAX_POISSON_MEAN {
                    return Err(OsmacError::Domain(format!(
                        "Poisson mean exp({theta}) is not representable"
                    )));
                }
                if lambda == 0.0 {
                    return Ok(0.0);
                }
                let dist = Poisson::new(lambda)
                    .map_err(|e| OsmacError::Domain(format!("Poisson({lambda}): {e}")))?;
                Ok(dist.sample(rng))
            }
            Family::Bernoulli => {
                let dist = Bernoulli::new(sigmoid(theta))
                    .map_err(|e| OsmacError::Domain(format!("Bernoulli: {e}")))?;
                Ok(if dist.sample(rng) { 1.0 } else { 0.0 })
            }
            Family::Gaussian => {
                let dist = Normal::new(theta, 1.0)
                    .map_err(|e| OsmacError::Domain(format!("Normal: {e}")))?;
                Ok(dist.sample(rng))
            }
        }
    }

    /// Whether `y` lies in the support of the family.
    pub fn in_support(self, y: f64) -> bool {
        match self {
            Family::Poisson => y >= 0.0 && y.fract() == 0.0 && y.is_finite(),
            Family::Bernoulli => y == 0.0 || y == 1.0,
            Family::Gaussian => y.is_finite(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Poisson => "poisson",
            Family::Bernoulli => "bernoulli",
            Family::Gaussian => "gaussian",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = OsmacError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "poisson" => Ok(Family::Poisson),
            "bernoulli" | "binomial" | "logistic" => Ok(Family::Bernoulli),
            "gaussian" | "normal" | "linear" => Ok(Family::Gaussian),
            other => Err(OsmacError::InvalidParameter(format!("unknown family '{other}'"))),
        }
    }
}
