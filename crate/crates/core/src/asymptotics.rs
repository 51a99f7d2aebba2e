//! Proportional-limit (`p / n -> gamma > 1`) estimation risk.
//!
//! The limiting variance factor `s*` is the `z -> 0` value of the Stieltjes
//! transform of the limiting spectrum of `X X^T / n`; it solves
//! `1 - 1/gamma = int 1 / (1 + tau s) dH(tau)`, where `H` is the limiting
//! spectrum of `Sigma`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::compensated_sum;
use crate::models::FeatureModel;

pub const DEFAULT_TOL: f64 = 1e-12;
pub const MAX_BISECTIONS: usize = 200;
/// Relative widening of the analytic bracket before bisection.
const BRACKET_SLACK: f64 = 1e-6;

/// Discrete spectral measure `H = sum_i w_i delta_{tau_i}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumMeasure {
    atoms: Vec<(f64, f64)>,
    support_min: f64,
    support_max: f64,
    mean: f64,
}

impl SpectrumMeasure {
    /// `atoms` are `(tau, weight)` pairs; weights must sum to one.
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidParameter(
                "spectrum measure needs at least one atom".into(),
            ));
        }
        for &(tau, w) in &atoms {
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "atom location must be positive, got {tau}"
                )));
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "atom weight must be positive, got {w}"
                )));
            }
        }
        let total = compensated_sum(atoms.iter().map(|a| a.1));
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("atom weights sum to {total}, not 1")));
        }
        let support_min = atoms.iter().map(|a| a.0).fold(f64::INFINITY, f64::min);
        let support_max = atoms.iter().map(|a| a.0).fold(0.0, f64::max);
        let mean = compensated_sum(atoms.iter().map(|(t, w)| t * w));
        Ok(Self {
            atoms,
            support_min,
            support_max,
            mean,
        })
    }

    pub fn point_mass(tau: f64) -> Result<Self> {
        Self::new(vec![(tau, 1.0)])
    }

    /// Equal weight on each value, e.g. the eigenvalues of a covariance.
    pub fn uniform(values: &[f64]) -> Result<Self> {
        let w = 1.0 / values.len().max(1) as f64;
        Self::new(values.iter().map(|&v| (v, w)).collect())
    }

    pub fn from_features(features: &FeatureModel) -> Result<Self> {
        Self::uniform(features.eigenvalues())
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    /// `c_H`.
    pub fn support_min(&self) -> f64 {
        self.support_min
    }

    /// `C_H`.
    pub fn support_max(&self) -> f64 {
        self.support_max
    }

    /// `mu_H`.
    pub fn mean(&self) -> f64 {
        self.mean
    }
}

/// Config-file form of a spectrum: parallel lists of locations and weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSpec {
    pub locations: Vec<f64>,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

impl SpectrumSpec {
    pub fn build(&self) -> Result<SpectrumMeasure> {
        match &self.weights {
            None => SpectrumMeasure::uniform(&self.locations),
            Some(w) if w.len() == self.locations.len() => {
                SpectrumMeasure::new(self.locations.iter().copied().zip(w.iter().copied()).collect())
            }
            Some(w) => Err(Error::DimensionError(format!(
                "{} locations but {} weights",
                self.locations.len(),
                w.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AsymptoticResult {
    pub gamma: f64,
    pub s_star: f64,
    pub limit_risk: f64,
    pub kappa2: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SStarBounds {
    /// `C_H^{-1} / (gamma - 1)`.
    pub lower: f64,
    /// `c_H^{-1} / (gamma - 1)`.
    pub upper: f64,
    /// `mu_H^{-1} / (gamma - 1)`.
    pub tight_lower: f64,
}

/// `int 1 / (1 + tau s) dH(tau)`.
pub fn stieltjes_rhs(h: &SpectrumMeasure, s: f64) -> Result<f64> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "s must be positive and finite, got {s}"
        )));
    }
    Ok(rhs_unchecked(h, s))
}

fn rhs_unchecked(h: &SpectrumMeasure, s: f64) -> f64 {
    compensated_sum(h.atoms.iter().map(|(tau, w)| w / (1.0 + tau * s)))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 1.0) || !gamma.is_finite() {
        return Err(Error::InvalidRegime(format!(
            "overparameterized limit needs gamma > 1, got {gamma}"
        )));
    }
    Ok(())
}

pub fn s_star_bounds(h: &SpectrumMeasure, gamma: f64) -> Result<SStarBounds> {
    check_gamma(gamma)?;
    let iso = 1.0 / (gamma - 1.0);
    Ok(SStarBounds {
        lower: iso / h.support_max,
        upper: iso / h.support_min,
        tight_lower: iso / h.mean,
    })
}

/// Bisection for `s*` on the analytic bracket `[tight_lower, upper]`.
pub fn solve_s_star(h: &SpectrumMeasure, gamma: f64, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let bounds = s_star_bounds(h, gamma)?;
    let target = 1.0 - 1.0 / gamma;
    let residual = |s: f64| rhs_unchecked(h, s) - target;

    let mut lo = bounds.tight_lower * (1.0 - BRACKET_SLACK);
    let mut hi = bounds.upper * (1.0 + BRACKET_SLACK);
    let mut best = (f64::INFINITY, lo);
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let r = residual(mid);
        if r.abs() < best.0 {
            best = (r.abs(), mid);
        }
        if r.abs() < tol || hi - lo <= 4.0 * f64::EPSILON * mid {
            break;
        }
        // The residual is decreasing in s.
        if r > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best.1.clamp(bounds.tight_lower, bounds.upper))
}

/// `R_E -> r2 (1 - 1/gamma) + s* kappa2`.
pub fn limit_estimation_risk(r2: f64, kappa2: f64, gamma: f64, h: &SpectrumMeasure) -> Result<AsymptoticResult> {
    if !(r2 >= 0.0) || !(kappa2 >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "r2 and kappa2 must be non-negative, got ({r2}, {kappa2})"
        )));
    }
    let s_star = solve_s_star(h, gamma, DEFAULT_TOL)?;
    Ok(AsymptoticResult {
        gamma,
        s_star,
        limit_risk: r2 * (1.0 - 1.0 / gamma) + s_star * kappa2,
        kappa2,
        r2,
    })
}

/// Isotropic variance limit `omega2 / (gamma - 1)`.
pub fn isotropic_variance_limit(omega2: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(omega2 / (gamma - 1.0))
}

/// Bias limit `r2 (1 - 1/gamma)`.
pub fn bias_limit(r2: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(r2 * (1.0 - 1.0 / gamma))
}
