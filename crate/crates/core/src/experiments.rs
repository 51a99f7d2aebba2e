//! Grid sweeps behind the command-line experiments.
//!
//! Every sweep draws its designs once per `(seed, n, p)` and shares them
//! across grid points; grid point `k` owns noise substream `k`. Rows come
//! out in grid order whatever the thread count.

use rayon::prelude::*;

use crate::config::{Experiment, ExperimentConfig};
use crate::error::{Error, Result};
use crate::estimator::{var_from_pinv, Target};
use crate::linalg::frobenius_norm_sq;
use crate::models::{build_ar1, build_clustered, FeatureModel, NoiseCovariance};
use crate::results::ResultTable;
use crate::risk::{
    for_each_design, gram_inverse_trace, nested_variance, streams, theory_bias2, weighted_pinv_trace, DesignBank,
    Estimate, McConfig, VarianceEstimator,
};
use crate::sampler::{GaussianDesign, RandomStream};

pub const VARIANCE_COLUMNS: [&str; 9] = [
    "trace_over_n",
    "mc_var_pred",
    "mc_var_pred_se",
    "theory_var_pred",
    "theory_var_pred_se",
    "mc_var_est",
    "mc_var_est_se",
    "theory_var_est",
    "theory_var_est_se",
];

pub const AR1_COLUMNS: [&str; 11] = [
    "sigma2",
    "rho2",
    "trace_over_n",
    "mc_var_pred",
    "mc_var_pred_se",
    "theory_var_pred",
    "theory_var_pred_se",
    "mc_var_est",
    "mc_var_est_se",
    "theory_var_est",
    "theory_var_est_se",
];

pub const CLUSTER_COLUMNS: [&str; 13] = [
    "sigma2_1",
    "sigma2_2",
    "rho_1",
    "rho_2",
    "trace_over_n",
    "mc_var_pred",
    "mc_var_pred_se",
    "theory_var_pred",
    "theory_var_pred_se",
    "mc_var_est",
    "mc_var_est_se",
    "theory_var_est",
    "theory_var_est_se",
];

pub const DESCENT_COLUMNS: [&str; 17] = [
    "gamma",
    "p",
    "trace_level",
    "mc_var_pred",
    "mc_var_pred_se",
    "theory_var_pred",
    "theory_var_pred_se",
    "mc_var_est",
    "mc_var_est_se",
    "theory_var_est",
    "theory_var_est_se",
    "theory_bias2",
    "theory_risk_pred",
    "theory_risk_est",
    "mc_risk_est",
    "iso_reference",
    "resampled",
];

/// The feature covariance for dimension `p` under the config's seed.
pub fn build_features(cfg: &ExperimentConfig, p: usize) -> Result<FeatureModel> {
    let mut rng = RandomStream::new(cfg.seed, 0)
        .substream(streams::FEATURES)
        .substream(p as u64);
    cfg.features.build(p, &mut rng)
}

fn require(cfg: &ExperimentConfig, want: Experiment) -> Result<()> {
    match cfg.experiment {
        Some(e) if e != want => Err(Error::Config(format!("experiment: expected {want}, config is for {e}"))),
        _ => Ok(()),
    }
}

/// One row of variance columns for a noise model on shared designs.
fn variance_row(
    bank: &DesignBank,
    features: &FeatureModel,
    noise: &NoiseCovariance,
    mc: &McConfig,
    noise_stream: &RandomStream,
) -> Result<Vec<f64>> {
    let mc_pred = bank.mc_variance(features, noise, mc, Target::Prediction, noise_stream)?;
    let mc_est = bank.mc_variance(features, noise, mc, Target::Estimation, noise_stream)?;
    let th_pred = bank.theory_variance(noise, Target::Prediction)?;
    let th_est = bank.theory_variance(noise, Target::Estimation)?;
    Ok(vec![
        noise.trace_over_n(),
        mc_pred.estimate,
        mc_pred.std_error,
        th_pred.value,
        th_pred.std_error,
        mc_est.estimate,
        mc_est.std_error,
        th_est.value,
        th_est.std_error,
    ])
}

fn sweep<F>(cfg: &ExperimentConfig, columns: &[&str], points: usize, point: F) -> Result<ResultTable>
where
    F: Fn(usize) -> Result<(Vec<f64>, NoiseCovariance)> + Sync,
{
    let features = build_features(cfg, cfg.p)?;
    let mc = cfg.mc_config();
    let bank = DesignBank::draw(&features, cfg.n, &mc)?;
    let noise_base = mc.root().substream(streams::NOISE);
    let rows: Vec<Result<Vec<f64>>> = (0..points)
        .into_par_iter()
        .map(|k| {
            let (mut prefix, noise) = point(k)?;
            prefix.extend(variance_row(
                &bank,
                &features,
                &noise,
                &mc,
                &noise_base.substream(k as u64),
            )?);
            Ok(prefix)
        })
        .collect();
    let mut table = ResultTable::new(columns);
    for row in rows {
        table.push_row(row?);
    }
    table.header_line(format!("resampled designs: {}", bank.resampled()));
    Ok(table)
}

/// AR(1) grid over `(sigma^2, rho^2)`, `sigma^2` outermost.
pub fn run_ar1_sweep(cfg: &ExperimentConfig) -> Result<ResultTable> {
    require(cfg, Experiment::Ar1Sweep)?;
    let grid = &cfg.ar1;
    let m = grid.rho2.len();
    sweep(cfg, &AR1_COLUMNS, grid.sigma2.len() * m, |k| {
        let (s2, r2) = (grid.sigma2[k / m], grid.rho2[k % m]);
        let noise = build_ar1(cfg.n, s2, r2.sqrt())
            .map_err(|e| Error::Config(format!("ar1 grid point {k} (sigma2 = {s2}, rho2 = {r2}): {e}")))?;
        Ok((vec![s2, r2], noise))
    })
}

fn cluster_point(cfg: &ExperimentConfig, k: usize, rho: [f64; 2]) -> Result<(Vec<f64>, NoiseCovariance)> {
    let c = &cfg.cluster;
    let m = c.sigma2_2.len();
    let (s1, s2) = (c.sigma2_1[k / m], c.sigma2_2[k % m]);
    let noise = build_clustered(&c.groups(s1, s2, rho)).map_err(|e| {
        Error::Config(format!(
            "cluster grid point {k} (sigma2_1 = {s1}, sigma2_2 = {s2}): {e}"
        ))
    })?;
    Ok((vec![s1, s2, rho[0], rho[1]], noise))
}

/// Two-cluster grid over `(sigma_1^2, sigma_2^2)` with fixed `rho_g`.
pub fn run_cluster_sweep(cfg: &ExperimentConfig) -> Result<ResultTable> {
    require(cfg, Experiment::ClusterSweep)?;
    let c = &cfg.cluster;
    sweep(cfg, &CLUSTER_COLUMNS, c.sigma2_1.len() * c.sigma2_2.len(), |k| {
        cluster_point(cfg, k, c.rho)
    })
}

/// The random `rho_g ~ Uniform[0, rho_max]` used at grid point `k`.
pub fn offdiag_rho(cfg: &ExperimentConfig, k: usize) -> [f64; 2] {
    let c = &cfg.cluster;
    let mut rng = RandomStream::new(c.rho_seed.unwrap_or(cfg.seed), streams::GRID).substream(k as u64);
    [c.rho_max * rng.uniform(), c.rho_max * rng.uniform()]
}

/// The cluster grid with a fresh random `rho_g` at every point.
pub fn run_offdiag_study(cfg: &ExperimentConfig) -> Result<ResultTable> {
    require(cfg, Experiment::OffdiagStudy)?;
    let c = &cfg.cluster;
    sweep(cfg, &CLUSTER_COLUMNS, c.sigma2_1.len() * c.sigma2_2.len(), |k| {
        cluster_point(cfg, k, offdiag_rho(cfg, k))
    })
}

struct DescentReplicate {
    pred_factor: f64,
    est_factor: f64,
    /// `(var_pred, var_est)` per trace level.
    levels: Vec<(f64, f64)>,
}

/// Variance and bias curves along `gamma = p / n` with `Omega = omega^2 I`.
pub fn run_descent_curve(cfg: &ExperimentConfig) -> Result<ResultTable> {
    require(cfg, Experiment::DescentCurve)?;
    let d = &cfg.descent;
    let n = cfg.n;
    let mc = cfg.mc_config();
    let noise_base = mc.root().substream(streams::NOISE);
    let mut table = ResultTable::new(&DESCENT_COLUMNS);
    for (gi, &gamma) in d.gammas.iter().enumerate() {
        let p = (n as f64 * gamma).round() as usize;
        let features = build_features(cfg, p)?;
        let noises = d
            .trace_levels
            .iter()
            .map(|&w| NoiseCovariance::isotropic(n, w))
            .collect::<Result<Vec<_>>>()?;
        let point_stream = noise_base.substream(gi as u64);
        let (reps, resampled) = for_each_design(&GaussianDesign, &features, n, &mc, |i, x, pinv| {
            let pred_factor = weighted_pinv_trace(pinv, &features);
            let est_factor = gram_inverse_trace(x)?;
            let levels = match mc.estimator {
                VarianceEstimator::ClosedForm => {
                    let pred = if features.is_isotropic() {
                        frobenius_norm_sq(pinv)
                    } else {
                        var_from_pinv(pinv, &NoiseCovariance::isotropic(n, 1.0)?, Some(&features))
                    };
                    let est = frobenius_norm_sq(pinv);
                    d.trace_levels.iter().map(|&w| (w * pred, w * est)).collect()
                }
                VarianceEstimator::EmpiricalCov => noises
                    .iter()
                    .enumerate()
                    .map(|(l, noise)| {
                        let mut rng = point_stream.substream(l as u64).substream(i as u64);
                        let pred = nested_variance(x, pinv, noise, Some(&features), mc.n_eps, &mut rng);
                        let mut rng = point_stream.substream(l as u64).substream(i as u64);
                        let est = nested_variance(x, pinv, noise, None, mc.n_eps, &mut rng);
                        (pred, est)
                    })
                    .collect(),
            };
            Ok(DescentReplicate {
                pred_factor,
                est_factor,
                levels,
            })
        })?;
        let pred_factor = Estimate::from_samples(&reps.iter().map(|r| r.pred_factor).collect::<Vec<_>>());
        let est_factor = Estimate::from_samples(&reps.iter().map(|r| r.est_factor).collect::<Vec<_>>());
        let bias = theory_bias2(d.r2, n, p)?;
        for (l, &w) in d.trace_levels.iter().enumerate() {
            let mc_pred = Estimate::from_samples(&reps.iter().map(|r| r.levels[l].0).collect::<Vec<_>>());
            let mc_est = Estimate::from_samples(&reps.iter().map(|r| r.levels[l].1).collect::<Vec<_>>());
            let th_pred = pred_factor.scaled(w);
            let th_est = est_factor.scaled(w);
            table.push_row(vec![
                gamma,
                p as f64,
                w,
                mc_pred.estimate,
                mc_pred.std_error,
                th_pred.estimate,
                th_pred.std_error,
                mc_est.estimate,
                mc_est.std_error,
                th_est.estimate,
                th_est.std_error,
                bias,
                bias + th_pred.estimate,
                bias + th_est.estimate,
                bias + mc_est.estimate,
                w / (gamma - 1.0),
                resampled as f64,
            ]);
        }
    }
    Ok(table)
}

/// Run whichever sweep the config names.
pub fn run(cfg: &ExperimentConfig) -> Result<ResultTable> {
    match cfg.experiment()? {
        Experiment::Ar1Sweep => run_ar1_sweep(cfg),
        Experiment::ClusterSweep => run_cluster_sweep(cfg),
        Experiment::OffdiagStudy => run_offdiag_study(cfg),
        Experiment::DescentCurve => run_descent_curve(cfg),
        Experiment::Verify => Err(Error::Config(
            "experiment: verify produces a report, not a table".into(),
        )),
    }
}

/// Header block: tool version, seed, timestamp, then the full config.
pub fn header_block(cfg: &ExperimentConfig, tool: &str, timestamp: &str) -> Vec<String> {
    vec![
        tool.to_string(),
        format!("seed: {}", cfg.seed),
        format!("timestamp: {timestamp}"),
        format!("config:\n{}", cfg.to_toml().trim_end()),
    ]
}
