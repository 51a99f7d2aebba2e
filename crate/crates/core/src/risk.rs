//! Expected risks over designs, noise and coefficients.
//!
//! Two routes are kept side by side for every variance term:
//!
//! * the Monte Carlo route averages the conditional variance over design
//!   draws (in closed form, or with the literal nested estimator that refits
//!   on `n_eps` noise draws per design);
//! * the factorized route multiplies the exact `Tr(Omega) / n` by a design
//!   factor whose expectation over `X` is itself estimated on the same
//!   design draws.
//!
//! Design draws depend only on `(seed, replicate, Sigma, n)`, never on the
//! noise model, so factorized values for two noise models with the same
//! trace come out identical.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{var_from_pinv, Target};
use crate::linalg::{compensated_sum, frobenius_inner, frobenius_norm_sq, full_row_rank_pinv, Matrix};
use crate::models::{FeatureModel, NoiseCovariance};
use crate::sampler::{sample_noise_matrix, DesignSampler, GaussianDesign, RandomStream};

/// Substream tags under the experiment seed.
pub mod streams {
    pub const DESIGN: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const BETA: u64 = 3;
    pub const FEATURES: u64 = 4;
    pub const GRID: u64 = 5;
}

/// Maximum redraws of a single rank-deficient design before giving up.
const MAX_ATTEMPTS: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceEstimator {
    /// `||S X^+ T||_F^2` per design.
    #[default]
    ClosedForm,
    /// Trace of the empirical covariance of `beta_hat` over `n_eps` refits.
    EmpiricalCov,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_x: usize,
    pub n_eps: usize,
    pub n_beta: usize,
    pub seed: u64,
    #[serde(default)]
    pub estimator: VarianceEstimator,
}

impl McConfig {
    pub fn new(n_x: usize, n_eps: usize, n_beta: usize, seed: u64) -> Self {
        Self {
            n_x,
            n_eps,
            n_beta,
            seed,
            estimator: VarianceEstimator::ClosedForm,
        }
    }

    pub fn with_estimator(mut self, estimator: VarianceEstimator) -> Self {
        self.estimator = estimator;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("n_x", self.n_x), ("n_eps", self.n_eps), ("n_beta", self.n_beta)] {
            if v < 2 {
                return Err(Error::InvalidParameter(format!("{name} must be at least 2, got {v}")));
            }
        }
        Ok(())
    }

    /// Root stream all Monte Carlo substreams derive from.
    pub fn root(&self) -> RandomStream {
        RandomStream::new(self.seed, 0)
    }
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimate: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        let mean = compensated_sum(values.iter().copied()) / n as f64;
        let std_error = if n > 1 {
            let ss = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean)));
            (ss / (n - 1) as f64 / n as f64).sqrt()
        } else {
            f64::NAN
        };
        Self {
            estimate: mean,
            std_error,
        }
    }

    pub fn scaled(self, factor: f64) -> Self {
        Self {
            estimate: self.estimate * factor,
            std_error: self.std_error * factor.abs(),
        }
    }

    /// `|a - b| / sqrt(se_a^2 + se_b^2)`.
    pub fn z_distance(&self, other: &Estimate) -> f64 {
        let se = self.std_error.hypot(other.std_error);
        (self.estimate - other.estimate).abs() / se
    }

    /// `|a - value| / se_a`.
    pub fn z_from(&self, value: f64) -> f64 {
        (self.estimate - value).abs() / self.std_error
    }
}

/// Factorized variance `(Tr(Omega)/n) * E_X[factor]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoryVariance {
    pub value: f64,
    pub std_error: f64,
    pub trace_over_n: f64,
    /// The design expectation: `E_X[Tr((X^T X)^+ Sigma)]` for prediction,
    /// `E_X[Tr(Lambda^+)] / p` with `Lambda = eig(X X^T / p)` for estimation.
    pub design_factor: Estimate,
}

impl TheoryVariance {
    pub fn as_estimate(&self) -> Estimate {
        Estimate {
            estimate: self.value,
            std_error: self.std_error,
        }
    }
}

/// `N_X` design draws with their pseudoinverses and design factors.
#[derive(Debug, Clone)]
pub struct DesignBank {
    n: usize,
    p: usize,
    designs: Vec<Matrix>,
    pinvs: Vec<Matrix>,
    pred_factors: Vec<f64>,
    est_factors: Vec<f64>,
    resampled: usize,
}

/// `Tr((X^T X)^+ Sigma) = <X^+, Sigma X^+>_F`.
pub(crate) fn weighted_pinv_trace(pinv: &Matrix, features: &FeatureModel) -> f64 {
    if features.is_isotropic() {
        frobenius_norm_sq(pinv)
    } else {
        frobenius_inner(pinv, &(features.sigma() * pinv)).max(0.0)
    }
}

/// `Tr(Lambda^+) / p` from the spectrum of `X X^T / p`.
pub(crate) fn gram_inverse_trace(x: &Matrix) -> Result<f64> {
    let p = x.ncols() as f64;
    let gram = x * x.transpose() / p;
    let spectrum = crate::linalg::esd(&gram)?;
    let floor = spectrum.eigenvalues.last().copied().unwrap_or(0.0) * crate::linalg::DEFAULT_RANK_TOL;
    Ok(spectrum.inverse_moment(floor) * spectrum.normalization as f64 / p)
}

/// Draws the `n_x` design replicates and maps each `(index, X, X^+)` through
/// `f`, in parallel, returning results in replicate order together with the
/// number of rank-deficient draws that were replaced.
pub fn for_each_design<T, F>(
    sampler: &dyn DesignSampler,
    features: &FeatureModel,
    n: usize,
    cfg: &McConfig,
    f: F,
) -> Result<(Vec<T>, usize)>
where
    T: Send,
    F: Fn(usize, &Matrix, &Matrix) -> Result<T> + Sync,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::InvalidParameter("n must be positive".into()));
    }
    let base = cfg.root().substream(streams::DESIGN);
    let draws: Vec<Result<(T, usize)>> = (0..cfg.n_x)
        .into_par_iter()
        .map(|i| {
            let replicate = base.substream(i as u64);
            for attempt in 0..MAX_ATTEMPTS {
                let mut rng = replicate.substream(attempt);
                let x = sampler.sample(n, features, &mut rng);
                match full_row_rank_pinv(&x) {
                    Ok(pinv) => return Ok((f(i, &x, &pinv)?, attempt as usize)),
                    Err(Error::RankDeficient { .. }) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::ResampleLimit {
                resampled: MAX_ATTEMPTS as usize,
                requested: 1,
            })
        })
        .collect();
    let mut out = Vec::with_capacity(cfg.n_x);
    let mut resampled = 0;
    for d in draws {
        let (value, retries) = d?;
        out.push(value);
        resampled += retries;
    }
    if resampled as f64 > 0.01 * cfg.n_x as f64 {
        return Err(Error::ResampleLimit {
            resampled,
            requested: cfg.n_x,
        });
    }
    Ok((out, resampled))
}

impl DesignBank {
    pub fn draw(features: &FeatureModel, n: usize, cfg: &McConfig) -> Result<Self> {
        Self::draw_with(&GaussianDesign, features, n, cfg)
    }

    pub fn draw_with(sampler: &dyn DesignSampler, features: &FeatureModel, n: usize, cfg: &McConfig) -> Result<Self> {
        let (draws, resampled) = for_each_design(sampler, features, n, cfg, |_, x, pinv| {
            let pred = weighted_pinv_trace(pinv, features);
            let est = gram_inverse_trace(x)?;
            Ok((x.clone(), pinv.clone(), pred, est))
        })?;
        let mut bank = Self {
            n,
            p: features.p(),
            designs: Vec::with_capacity(cfg.n_x),
            pinvs: Vec::with_capacity(cfg.n_x),
            pred_factors: Vec::with_capacity(cfg.n_x),
            est_factors: Vec::with_capacity(cfg.n_x),
            resampled,
        };
        for (x, pinv, pred, est) in draws {
            bank.designs.push(x);
            bank.pinvs.push(pinv);
            bank.pred_factors.push(pred);
            bank.est_factors.push(est);
        }
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.designs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.designs.is_empty()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn designs(&self) -> &[Matrix] {
        &self.designs
    }

    pub fn pinvs(&self) -> &[Matrix] {
        &self.pinvs
    }

    /// Number of rank-deficient draws that were replaced.
    pub fn resampled(&self) -> usize {
        self.resampled
    }

    /// Per-design `Tr((X^T X)^+ Sigma)` (prediction) or `Tr(Lambda^+)/p` (estimation).
    pub fn design_factors(&self, target: Target) -> &[f64] {
        match target {
            Target::Prediction => &self.pred_factors,
            Target::Estimation => &self.est_factors,
        }
    }

    fn check(&self, features: &FeatureModel, noise: &NoiseCovariance) -> Result<()> {
        if noise.n() != self.n {
            return Err(Error::DimensionError(format!(
                "noise model has n = {}, designs have n = {}",
                noise.n(),
                self.n
            )));
        }
        if features.p() != self.p {
            return Err(Error::DimensionError(format!(
                "feature model has p = {}, designs have p = {}",
                features.p(),
                self.p
            )));
        }
        Ok(())
    }

    /// Conditional variances, one per design, by the requested estimator.
    /// `noise_stream` seeds the per-design noise draws of the nested estimator.
    pub fn conditional_variances(
        &self,
        features: &FeatureModel,
        noise: &NoiseCovariance,
        cfg: &McConfig,
        target: Target,
        noise_stream: &RandomStream,
    ) -> Result<Vec<f64>> {
        self.check(features, noise)?;
        let weight = match target {
            Target::Prediction => Some(features),
            Target::Estimation => None,
        };
        let values = (0..self.len())
            .into_par_iter()
            .map(|i| match cfg.estimator {
                VarianceEstimator::ClosedForm => var_from_pinv(&self.pinvs[i], noise, weight),
                VarianceEstimator::EmpiricalCov => {
                    let mut rng = noise_stream.substream(i as u64);
                    nested_variance(&self.designs[i], &self.pinvs[i], noise, weight, cfg.n_eps, &mut rng)
                }
            })
            .collect();
        Ok(values)
    }

    pub fn mc_variance(
        &self,
        features: &FeatureModel,
        noise: &NoiseCovariance,
        cfg: &McConfig,
        target: Target,
        noise_stream: &RandomStream,
    ) -> Result<Estimate> {
        let values = self.conditional_variances(features, noise, cfg, target, noise_stream)?;
        Ok(Estimate::from_samples(&values))
    }

    pub fn theory_variance(&self, noise: &NoiseCovariance, target: Target) -> Result<TheoryVariance> {
        if noise.n() != self.n {
            return Err(Error::DimensionError(format!(
                "noise model has n = {}, designs have n = {}",
                noise.n(),
                self.n
            )));
        }
        let design_factor = Estimate::from_samples(self.design_factors(target));
        let trace_over_n = noise.trace_over_n();
        Ok(TheoryVariance {
            value: trace_over_n * design_factor.estimate,
            std_error: trace_over_n * design_factor.std_error,
            trace_over_n,
            design_factor,
        })
    }
}

/// Literal nested estimator: refit on `n_eps` responses `y_j = X beta + eps_j`
/// and take the trace of the (unbiased) empirical covariance of `beta_hat`,
/// weighted by `Sigma` for prediction.
pub(crate) fn nested_variance(
    x: &Matrix,
    pinv: &Matrix,
    noise: &NoiseCovariance,
    weight: Option<&FeatureModel>,
    n_eps: usize,
    rng: &mut RandomStream,
) -> f64 {
    let beta = rng.gaussian_vector(x.ncols()) / (x.ncols() as f64).sqrt();
    let mut responses = sample_noise_matrix(noise, n_eps, rng);
    let signal = x * beta;
    for mut col in responses.column_iter_mut() {
        col += &signal;
    }
    let mut fits = pinv * responses;
    let mean = fits.column_mean();
    for mut col in fits.column_iter_mut() {
        col -= &mean;
    }
    let weighted = match weight {
        Some(f) => f.apply_sqrt(&fits),
        None => fits,
    };
    frobenius_norm_sq(&weighted) / (n_eps - 1) as f64
}

fn check_model_dims(features: &FeatureModel, noise: &NoiseCovariance, n: usize) -> Result<()> {
    if noise.n() != n {
        return Err(Error::DimensionError(format!(
            "noise model has n = {}, requested n = {n}",
            noise.n()
        )));
    }
    if features.p() < 1 {
        return Err(Error::InvalidParameter("p must be positive".into()));
    }
    Ok(())
}

/// Monte Carlo estimate of `E_X[Var_A(beta_hat | X)]`, `A = Sigma` or `I`.
pub fn mc_expected_variance(
    features: &FeatureModel,
    noise: &NoiseCovariance,
    n: usize,
    cfg: &McConfig,
    target: Target,
) -> Result<Estimate> {
    check_model_dims(features, noise, n)?;
    let bank = DesignBank::draw(features, n, cfg)?;
    bank.mc_variance(features, noise, cfg, target, &cfg.root().substream(streams::NOISE))
}

/// `(Tr(Omega)/n) E_X[Tr((X^T X)^+ Sigma)]` for prediction and
/// `(1/(n p)) Tr(Omega) E_X[Tr(Lambda^+)]` for estimation, with the design
/// expectation estimated over `n_x` draws.
pub fn theory_expected_variance(
    features: &FeatureModel,
    noise: &NoiseCovariance,
    n: usize,
    cfg: &McConfig,
    target: Target,
) -> Result<TheoryVariance> {
    check_model_dims(features, noise, n)?;
    DesignBank::draw(features, n, cfg)?.theory_variance(noise, target)
}

/// `r2 (p - n) / p`.
pub fn theory_bias2(r2_weighted: f64, n: usize, p: usize) -> Result<f64> {
    if p < n {
        return Err(Error::InvalidRegime(format!(
            "bias formula needs p >= n, got n = {n}, p = {p}"
        )));
    }
    if p == 0 {
        return Err(Error::InvalidParameter("p must be positive".into()));
    }
    Ok(r2_weighted * (p - n) as f64 / p as f64)
}

fn check_overparameterized(n: usize, p: usize) -> Result<()> {
    if p <= n {
        return Err(Error::InvalidRegime(format!(
            "bias Monte Carlo needs p > n, got n = {n}, p = {p}"
        )));
    }
    Ok(())
}

impl DesignBank {
    /// Per-design average of the conditional squared bias over `n_beta`
    /// random-effects draws.
    pub fn bias2_per_design(
        &self,
        features: &FeatureModel,
        r2: f64,
        cfg: &McConfig,
        target: Target,
        beta_stream: &RandomStream,
    ) -> Result<Vec<f64>> {
        if !(r2 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "signal strength must be positive, got {r2}"
            )));
        }
        if features.p() != self.p {
            return Err(Error::DimensionError("feature model does not match designs".into()));
        }
        let p = self.p;
        let values = (0..self.len())
            .into_par_iter()
            .map(|i| {
                let mut rng = beta_stream.substream(i as u64);
                let mut w = rng.gaussian_matrix(p, cfg.n_beta) * (r2 / p as f64).sqrt();
                let weighted_prior = target == Target::Prediction && !features.is_isotropic();
                if weighted_prior {
                    w = features.inv_sqrt() * w;
                }
                let x = &self.designs[i];
                let resid = &w - &self.pinvs[i] * (x * &w);
                let resid = if weighted_prior { features.sqrt() * resid } else { resid };
                frobenius_norm_sq(&resid) / cfg.n_beta as f64
            })
            .collect();
        Ok(values)
    }

    /// `E_beta[bias^2 | X]` computed exactly for each design.
    pub fn exact_bias2_per_design(&self, features: &FeatureModel, r2: f64, target: Target) -> Result<Vec<f64>> {
        self.designs
            .par_iter()
            .map(|x| crate::estimator::expected_bias2_given_x(x, features, r2, target))
            .collect()
    }
}

/// Monte Carlo estimate of the expected squared bias under the
/// random-effects prior (`E[beta beta^T] = r2 I / p` for estimation,
/// `E[S beta (S beta)^T] = r2 I / p` for prediction).
pub fn mc_expected_bias2(
    features: &FeatureModel,
    n: usize,
    p: usize,
    r2: f64,
    cfg: &McConfig,
    target: Target,
) -> Result<Estimate> {
    check_overparameterized(n, p)?;
    if features.p() != p {
        return Err(Error::DimensionError(format!(
            "feature model has p = {}, requested {p}",
            features.p()
        )));
    }
    let bank = DesignBank::draw(features, n, cfg)?;
    let values = bank.bias2_per_design(features, r2, cfg, target, &cfg.root().substream(streams::BETA))?;
    Ok(Estimate::from_samples(&values))
}

/// Bias/variance decomposition of both risks, Monte Carlo against the
/// closed-form expressions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskReport {
    pub n: usize,
    pub p: usize,
    pub r2: f64,
    pub r_sigma2: f64,
    pub trace_omega_over_n: f64,
    pub mc_var_pred: Estimate,
    pub mc_var_est: Estimate,
    pub theory_var_pred: TheoryVariance,
    pub theory_var_est: TheoryVariance,
    pub mc_bias2_pred: Estimate,
    pub mc_bias2_est: Estimate,
    pub theory_bias2_pred: f64,
    pub theory_bias2_est: f64,
    pub resampled: usize,
}

impl RiskReport {
    pub fn theory_risk_pred(&self) -> f64 {
        self.theory_bias2_pred + self.theory_var_pred.value
    }

    pub fn theory_risk_est(&self) -> f64 {
        self.theory_bias2_est + self.theory_var_est.value
    }

    pub fn mc_risk_pred(&self) -> f64 {
        self.mc_bias2_pred.estimate + self.mc_var_pred.estimate
    }

    pub fn mc_risk_est(&self) -> f64 {
        self.mc_bias2_est.estimate + self.mc_var_est.estimate
    }

    /// Flat `(column, value)` view in a fixed order.
    pub fn columns(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("n", self.n as f64),
            ("p", self.p as f64),
            ("r2", self.r2),
            ("r_sigma2", self.r_sigma2),
            ("trace_omega_over_n", self.trace_omega_over_n),
            ("mc_var_pred", self.mc_var_pred.estimate),
            ("mc_var_pred_se", self.mc_var_pred.std_error),
            ("theory_var_pred", self.theory_var_pred.value),
            ("theory_var_pred_se", self.theory_var_pred.std_error),
            ("mc_var_est", self.mc_var_est.estimate),
            ("mc_var_est_se", self.mc_var_est.std_error),
            ("theory_var_est", self.theory_var_est.value),
            ("theory_var_est_se", self.theory_var_est.std_error),
            ("mc_bias2_pred", self.mc_bias2_pred.estimate),
            ("mc_bias2_pred_se", self.mc_bias2_pred.std_error),
            ("theory_bias2_pred", self.theory_bias2_pred),
            ("mc_bias2_est", self.mc_bias2_est.estimate),
            ("mc_bias2_est_se", self.mc_bias2_est.std_error),
            ("theory_bias2_est", self.theory_bias2_est),
            ("theory_risk_pred", self.theory_risk_pred()),
            ("theory_risk_est", self.theory_risk_est()),
            ("resampled", self.resampled as f64),
        ]
    }
}

pub fn full_report(
    features: &FeatureModel,
    noise: &NoiseCovariance,
    n: usize,
    p: usize,
    r2: f64,
    r_sigma2: f64,
    cfg: &McConfig,
) -> Result<RiskReport> {
    check_model_dims(features, noise, n)?;
    check_overparameterized(n, p)?;
    if features.p() != p {
        return Err(Error::DimensionError(format!(
            "feature model has p = {}, requested {p}",
            features.p()
        )));
    }
    let bank = DesignBank::draw(features, n, cfg)?;
    let root = cfg.root();
    let noise_stream = root.substream(streams::NOISE);
    let beta_stream = root.substream(streams::BETA);
    let bias = |r: f64, target: Target| -> Result<Estimate> {
        Ok(Estimate::from_samples(&bank.bias2_per_design(
            features,
            r,
            cfg,
            target,
            &beta_stream.substream(target as u64),
        )?))
    };
    Ok(RiskReport {
        n,
        p,
        r2,
        r_sigma2,
        trace_omega_over_n: noise.trace_over_n(),
        mc_var_pred: bank.mc_variance(features, noise, cfg, Target::Prediction, &noise_stream)?,
        mc_var_est: bank.mc_variance(features, noise, cfg, Target::Estimation, &noise_stream)?,
        theory_var_pred: bank.theory_variance(noise, Target::Prediction)?,
        theory_var_est: bank.theory_variance(noise, Target::Estimation)?,
        mc_bias2_pred: bias(r_sigma2, Target::Prediction)?,
        mc_bias2_est: bias(r2, Target::Estimation)?,
        theory_bias2_pred: theory_bias2(r_sigma2, n, p)?,
        theory_bias2_est: theory_bias2(r2, n, p)?,
        resampled: bank.resampled(),
    })
}
