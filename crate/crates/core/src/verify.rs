//! End-to-end invariant checks, reported as JSON.

use serde::Serialize;

use crate::asymptotics::{s_star_bounds, solve_s_star, stieltjes_rhs, SpectrumMeasure, DEFAULT_TOL};
use crate::config::{ExperimentConfig, Fault};
use crate::error::Result;
use crate::estimator::{alignment_matrix, var_pred_conditional, Target};
use crate::linalg::{max_abs, min_norm_solve, pseudo_inverse, Matrix, DEFAULT_RANK_TOL};
use crate::models::{build_ar1, build_clustered, ClusterGroup, FeatureModel, NoiseCovariance};
use crate::risk::{mc_expected_bias2, DesignBank, Estimate, McConfig};
use crate::sampler::{gaussian_design, haar_orthogonal_with, HaarMethod, RandomStream};

/// Stream tag for the verification suite.
const VERIFY: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub observed: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    /// Pass iff `|observed - expected| <= tolerance`.
    fn near(name: &'static str, observed: f64, expected: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed: (observed - expected).abs() <= tolerance,
            observed,
            expected,
            tolerance,
            detail: detail.into(),
        }
    }

    /// Pass iff `observed <= tolerance`; `expected` is the ideal value.
    fn at_most(name: &'static str, observed: f64, expected: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed: observed <= tolerance,
            observed,
            expected,
            tolerance,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub fault: Fault,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn run_verify(cfg: &ExperimentConfig) -> Result<VerifyReport> {
    let root = RandomStream::new(cfg.seed, VERIFY);
    let s = &cfg.verify;
    let method = match s.fault {
        Fault::None => HaarMethod::SignFixed,
        Fault::PlainQr => HaarMethod::PlainQr,
    };
    let mut checks = Vec::new();
    checks.push(penrose(&mut root.substream(1), 10 * s.instances));
    checks.push(min_norm(&mut root.substream(2), s.instances / 10 + 1, 1000));
    checks.extend(alignment(&mut root.substream(3), s.instances)?);
    checks.push(haar_average_gamma(&mut root.substream(4), s.rotations, method)?);
    checks.extend(haar_marginals(&mut root.substream(5), s.rotations, method));
    checks.extend(trace_only(cfg.seed)?);
    checks.extend(bias(cfg.seed)?);
    checks.extend(stieltjes(&mut root.substream(8), 2 * s.instances)?);
    Ok(VerifyReport {
        seed: cfg.seed,
        fault: s.fault,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

fn random_matrix(rng: &mut RandomStream) -> Matrix {
    let rows = 1 + (rng.uniform() * 8.0) as usize;
    let cols = 1 + (rng.uniform() * 8.0) as usize;
    if rng.uniform() < 0.3 {
        let k = 1 + (rng.uniform() * rows.min(cols) as f64) as usize;
        rng.gaussian_matrix(rows, k) * rng.gaussian_matrix(k, cols)
    } else {
        rng.gaussian_matrix(rows, cols)
    }
}

/// Worst relative violation of the four Penrose conditions.
pub fn penrose_error(a: &Matrix, g: &Matrix) -> f64 {
    let rel = |m: Matrix, scale: &Matrix| m.norm() / scale.norm().max(f64::MIN_POSITIVE);
    let ag = a * g;
    let ga = g * a;
    [
        rel(&ag * a - a, a),
        rel(&ga * g - g, g),
        rel(&ag - ag.transpose(), &ag),
        rel(&ga - ga.transpose(), &ga),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn penrose(rng: &mut RandomStream, count: usize) -> Check {
    let mut worst = 0.0_f64;
    for _ in 0..count {
        let a = random_matrix(rng);
        let g = pseudo_inverse(&a, DEFAULT_RANK_TOL).expect("finite input");
        worst = worst.max(penrose_error(&a, &g));
    }
    Check::at_most(
        "penrose",
        worst,
        0.0,
        1e-8,
        format!("{count} random matrices, some rank deficient"),
    )
}

fn min_norm(rng: &mut RandomStream, instances: usize, perturbations: usize) -> Check {
    let mut worst = f64::INFINITY;
    for _ in 0..instances {
        let n = 2 + (rng.uniform() * 6.0) as usize;
        let p = n + 1 + (rng.uniform() * 8.0) as usize;
        let x = rng.gaussian_matrix(n, p);
        let y = rng.gaussian_vector(n);
        let beta = min_norm_solve(&x, &y).expect("matching dimensions");
        let pinv = pseudo_inverse(&x, DEFAULT_RANK_TOL).expect("finite input");
        let null = Matrix::identity(p, p) - &pinv * &x;
        for _ in 0..perturbations {
            let delta = &null * rng.gaussian_vector(p);
            let gap = (&beta + delta).norm_squared() - beta.norm_squared();
            worst = worst.min(gap);
        }
    }
    Check::at_most(
        "min_norm_optimality",
        (-worst).max(0.0),
        0.0,
        1e-10,
        "largest norm decrease over null-space perturbations (negated)",
    )
}

fn random_instance(rng: &mut RandomStream) -> Result<(Matrix, FeatureModel, NoiseCovariance)> {
    let n = 2 + (rng.uniform() * 7.0) as usize;
    let p = n + 1 + (rng.uniform() * 10.0) as usize;
    let features = FeatureModel::haar_spectrum_scaled(p, p as f64, rng)?;
    let x = gaussian_design(n, &features, rng);
    let noise = if rng.uniform() < 0.5 {
        build_ar1(n, 0.2 + rng.uniform(), 1.8 * rng.uniform() - 0.9)?
    } else {
        let first = 1 + (rng.uniform() * (n - 1) as f64) as usize;
        build_clustered(&[
            ClusterGroup::new(first, 0.5 + rng.uniform(), 0.3 * rng.uniform()),
            ClusterGroup::new(n - first, 0.5 + rng.uniform(), 0.3 * rng.uniform()),
        ])?
    };
    Ok((x, features, noise))
}

fn alignment(rng: &mut RandomStream, count: usize) -> Result<Vec<Check>> {
    let mut defect = 0.0_f64;
    let mut recon = 0.0_f64;
    for _ in 0..count {
        let (x, features, noise) = random_instance(rng)?;
        let g = alignment_matrix(&x, &features, &noise)?;
        defect = defect.max(g.stochasticity_defect());
        let direct = var_pred_conditional(&x, &noise, &features)?;
        recon = recon.max((g.contract() - direct).abs() / direct);
    }
    Ok(vec![
        Check::at_most(
            "gamma_doubly_stochastic",
            defect,
            0.0,
            1e-8,
            format!("{count} instances"),
        ),
        Check::at_most(
            "gamma_reconstruction",
            recon,
            0.0,
            1e-6,
            format!("relative error of lambda^T Gamma lambda against ||S X^+ T||_F^2, {count} instances"),
        ),
    ])
}

fn haar_average_gamma(rng: &mut RandomStream, rotations: usize, method: HaarMethod) -> Result<Check> {
    let (n, p) = (5, 10);
    let features = FeatureModel::haar_spectrum_scaled(p, p as f64, rng)?;
    let x = gaussian_design(n, &features, rng);
    let noise = build_ar1(n, 1.0, 0.7)?;
    let mut mean = Matrix::zeros(n, n);
    for _ in 0..rotations {
        let o = haar_orthogonal_with(n, rng, method);
        mean += alignment_matrix(&(o * &x), &features, &noise)?.gamma;
    }
    mean /= rotations as f64;
    let dev = max_abs(&mean.add_scalar(-1.0 / n as f64));
    Ok(Check::at_most(
        "haar_average_gamma",
        dev,
        0.0,
        5.0 / (rotations as f64).sqrt(),
        format!("max entrywise |mean Gamma(OX) - J/n| over {rotations} rotations, n = {n}"),
    ))
}

fn haar_marginals(rng: &mut RandomStream, draws: usize, method: HaarMethod) -> Vec<Check> {
    let n = 4;
    let nd = draws as f64;
    let mut first = vec![0.0; n];
    let mut positive = 0usize;
    let mut scalar_positive = 0usize;
    for _ in 0..draws {
        let q = haar_orthogonal_with(n, rng, method);
        for (i, f) in first.iter_mut().enumerate() {
            *f += q[(i, 0)] / nd;
        }
        if q.determinant() > 0.0 {
            positive += 1;
        }
        if haar_orthogonal_with(1, rng, method)[(0, 0)] > 0.0 {
            scalar_positive += 1;
        }
    }
    let worst = first.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let frac = positive as f64 / nd;
    let chi2 = (2.0 * scalar_positive as f64 - nd).powi(2) / nd;
    vec![
        Check::at_most(
            "haar_first_column_mean",
            worst,
            0.0,
            4.0 / (n as f64 * nd).sqrt(),
            format!("max |mean Q_i1| over {draws} draws, n = {n}; tolerance 4 standard errors"),
        ),
        Check::near(
            "haar_determinant_balance",
            frac,
            0.5,
            4.0 * 0.5 / nd.sqrt(),
            format!("fraction of det Q > 0 over {draws} draws"),
        ),
        Check::at_most(
            "haar_scalar_sign",
            chi2,
            0.0,
            10.828,
            format!("chi-square of sign balance for n = 1 over {draws} draws (p = 0.001)"),
        ),
    ]
}

fn trace_only(seed: u64) -> Result<Vec<Check>> {
    let (n, p) = (10, 20);
    let features = FeatureModel::haar_spectrum_scaled(p, p as f64, &mut RandomStream::new(seed, VERIFY).substream(6))?;
    let cfg = McConfig::new(200, 2, 2, seed);
    let bank = DesignBank::draw(&features, n, &cfg)?;
    let noise_stream = RandomStream::new(seed, VERIFY).substream(7);
    let pairs = [
        ("ar1", build_ar1(n, 1.0, 0.0)?, build_ar1(n, 0.75, 0.25_f64.sqrt())?),
        (
            "clustered",
            build_clustered(&[ClusterGroup::new(5, 2.0, 0.05), ClusterGroup::new(5, 2.0, 0.3)])?,
            build_clustered(&[ClusterGroup::new(5, 3.0, 0.01), ClusterGroup::new(5, 1.0, 0.2)])?,
        ),
    ];
    let mut theory_gap = 0.0_f64;
    let mut mc_z = 0.0_f64;
    let mut fact_z = 0.0_f64;
    for (_, a, b) in &pairs {
        for target in [Target::Prediction, Target::Estimation] {
            let ta = bank.theory_variance(a, target)?;
            let tb = bank.theory_variance(b, target)?;
            theory_gap = theory_gap.max((ta.value - tb.value).abs() / ta.value);
            let ma = bank.mc_variance(&features, a, &cfg, target, &noise_stream)?;
            let mb = bank.mc_variance(&features, b, &cfg, target, &noise_stream)?;
            mc_z = mc_z.max(ma.z_distance(&mb));
            fact_z = fact_z
                .max(ma.z_distance(&ta.as_estimate()))
                .max(mb.z_distance(&tb.as_estimate()));
        }
    }
    Ok(vec![
        Check::at_most(
            "trace_only_theory",
            theory_gap,
            0.0,
            1e-12,
            "relative theory gap between equal-trace noise models (ar1 and clustered pairs)",
        ),
        Check::at_most(
            "trace_only_mc",
            mc_z,
            0.0,
            3.0,
            "combined-SE distance between equal-trace MC estimates",
        ),
        Check::at_most(
            "variance_factorization",
            fact_z,
            0.0,
            3.0,
            "combined-SE distance between MC and factorized variance",
        ),
    ])
}

fn bias(seed: u64) -> Result<Vec<Check>> {
    let (n, p) = (10, 20);
    let cfg = McConfig::new(20, 2, 2_000, seed);
    let aniso = FeatureModel::haar_spectrum_scaled(p, p as f64, &mut RandomStream::new(seed, VERIFY).substream(9))?;
    let est = mc_expected_bias2(&aniso, n, p, 1.0, &cfg, Target::Estimation)?;
    let iso = mc_expected_bias2(&FeatureModel::isotropic(p), n, p, 1.0, &cfg, Target::Prediction)?;

    let bank = DesignBank::draw(&aniso, n, &cfg)?;
    let stream = RandomStream::new(seed, VERIFY).substream(10);
    let mc = bank.bias2_per_design(&aniso, 1.0, &cfg, Target::Prediction, &stream)?;
    let exact = bank.exact_bias2_per_design(&aniso, 1.0, Target::Prediction)?;
    let diffs: Vec<f64> = mc.iter().zip(&exact).map(|(a, b)| a - b).collect();
    let paired = Estimate::from_samples(&diffs);

    Ok(vec![
        Check::at_most(
            "bias_estimation",
            est.z_from(0.5),
            0.0,
            3.0,
            format!("{est:?} against r2 (p - n) / p = 0.5"),
        ),
        Check::at_most(
            "bias_prediction_isotropic",
            iso.z_from(0.5),
            0.0,
            3.0,
            format!("{iso:?} against 0.5 with Sigma = I"),
        ),
        Check::at_most(
            "bias_prediction_conditional",
            paired.z_from(0.0),
            0.0,
            3.0,
            "MC against the exact beta-average given X, anisotropic Sigma (z of paired difference)",
        ),
    ])
}

fn stieltjes(rng: &mut RandomStream, cases: usize) -> Result<Vec<Check>> {
    let iso = solve_s_star(&SpectrumMeasure::point_mass(1.0)?, 2.0, DEFAULT_TOL)?;
    let mut residual = 0.0_f64;
    let mut order = 0.0_f64;
    for _ in 0..cases {
        let k = 1 + (rng.uniform() * 6.0) as usize;
        let raw: Vec<(f64, f64)> = (0..k)
            .map(|_| (0.1 + 4.9 * rng.uniform(), 0.01 + rng.uniform()))
            .collect();
        let total: f64 = raw.iter().map(|a| a.1).sum();
        let h = SpectrumMeasure::new(raw.into_iter().map(|(t, w)| (t, w / total)).collect())?;
        let gamma = 1.05 + 19.0 * rng.uniform();
        let s = solve_s_star(&h, gamma, DEFAULT_TOL)?;
        residual = residual.max((stieltjes_rhs(&h, s)? - (1.0 - 1.0 / gamma)).abs());
        let b = s_star_bounds(&h, gamma)?;
        let slack = 1e-12 * b.upper;
        let violation = (b.lower - b.tight_lower).max(b.tight_lower - s).max(s - b.upper);
        order = order.max(violation - slack);
    }
    Ok(vec![
        Check::near("stieltjes_isotropic", iso, 1.0, 1e-10, "H = delta_1, gamma = 2"),
        Check::at_most(
            "stieltjes_residual",
            residual,
            0.0,
            1e-10,
            format!("{cases} random (H, gamma)"),
        ),
        Check::at_most(
            "stieltjes_bounds",
            order.max(0.0),
            0.0,
            0.0,
            format!("C_H^-1 <= mu_H^-1 <= (gamma - 1) s* <= c_H^-1 on {cases} random (H, gamma)"),
        ),
    ])
}
