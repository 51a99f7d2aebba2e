//! Experiment configuration files (TOML) and command-line overrides.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ClusterGroup, FeatureSpec};
use crate::risk::{McConfig, VarianceEstimator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Ar1Sweep,
    ClusterSweep,
    DescentCurve,
    OffdiagStudy,
    Verify,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::Ar1Sweep,
        Experiment::ClusterSweep,
        Experiment::DescentCurve,
        Experiment::OffdiagStudy,
        Experiment::Verify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Ar1Sweep => "ar1_sweep",
            Experiment::ClusterSweep => "cluster_sweep",
            Experiment::DescentCurve => "descent_curve",
            Experiment::OffdiagStudy => "offdiag_study",
            Experiment::Verify => "verify",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        let key = name.replace('-', "_");
        Self::ALL.into_iter().find(|e| e.name() == key)
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn tenths(start: usize, end: usize) -> Vec<f64> {
    (start..=end).map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ar1Grid {
    #[serde(default = "Ar1Grid::default_sigma2")]
    pub sigma2: Vec<f64>,
    /// Squared autocorrelations; the sweep uses `rho = sqrt(rho2)`.
    #[serde(default = "Ar1Grid::default_rho2")]
    pub rho2: Vec<f64>,
}

impl Ar1Grid {
    fn default_sigma2() -> Vec<f64> {
        tenths(1, 10)
    }

    fn default_rho2() -> Vec<f64> {
        tenths(0, 9)
    }
}

impl Default for Ar1Grid {
    fn default() -> Self {
        Self {
            sigma2: Self::default_sigma2(),
            rho2: Self::default_rho2(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterGrid {
    #[serde(default = "ClusterGrid::default_sizes")]
    pub sizes: [usize; 2],
    /// Within-cluster covariances `(rho_1, rho_2)`.
    #[serde(default = "ClusterGrid::default_rho")]
    pub rho: [f64; 2],
    #[serde(default = "ClusterGrid::default_sigma2")]
    pub sigma2_1: Vec<f64>,
    #[serde(default = "ClusterGrid::default_sigma2")]
    pub sigma2_2: Vec<f64>,
    /// Off-diagonal study: `rho_g ~ Uniform[0, rho_max]` per grid point.
    #[serde(default = "ClusterGrid::default_rho_max")]
    pub rho_max: f64,
    /// Seed for the random `rho_g` draws; the experiment seed when absent.
    #[serde(default)]
    pub rho_seed: Option<u64>,
}

impl ClusterGrid {
    fn default_sizes() -> [usize; 2] {
        [5, 15]
    }

    fn default_rho() -> [f64; 2] {
        [0.05, 0.05]
    }

    fn default_sigma2() -> Vec<f64> {
        tenths(1, 10)
    }

    fn default_rho_max() -> f64 {
        0.05
    }

    pub fn groups(&self, sigma2_1: f64, sigma2_2: f64, rho: [f64; 2]) -> [ClusterGroup; 2] {
        [
            ClusterGroup::new(self.sizes[0], sigma2_1, rho[0]),
            ClusterGroup::new(self.sizes[1], sigma2_2, rho[1]),
        ]
    }
}

impl Default for ClusterGrid {
    fn default() -> Self {
        Self {
            sizes: Self::default_sizes(),
            rho: Self::default_rho(),
            sigma2_1: Self::default_sigma2(),
            sigma2_2: Self::default_sigma2(),
            rho_max: Self::default_rho_max(),
            rho_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescentGrid {
    #[serde(default = "DescentGrid::default_gammas")]
    pub gammas: Vec<f64>,
    /// Noise levels `omega^2` for `Omega = omega^2 I`.
    #[serde(default = "DescentGrid::default_levels")]
    pub trace_levels: Vec<f64>,
    #[serde(default = "DescentGrid::default_r2")]
    pub r2: f64,
}

impl DescentGrid {
    fn default_gammas() -> Vec<f64> {
        vec![1.5, 2.0, 3.0, 4.0, 6.0, 10.0, 20.0, 50.0, 100.0]
    }

    fn default_levels() -> Vec<f64> {
        vec![1.0, 2.0, 4.0]
    }

    fn default_r2() -> f64 {
        1.0
    }
}

impl Default for DescentGrid {
    fn default() -> Self {
        Self {
            gammas: Self::default_gammas(),
            trace_levels: Self::default_levels(),
            r2: Self::default_r2(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    #[default]
    None,
    /// Replace the sign-fixed Haar sampler with unnormalized Householder QR.
    PlainQr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySettings {
    #[serde(default = "VerifySettings::default_instances")]
    pub instances: usize,
    #[serde(default = "VerifySettings::default_rotations")]
    pub rotations: usize,
    #[serde(default)]
    pub fault: Fault,
}

impl VerifySettings {
    fn default_instances() -> usize {
        100
    }

    fn default_rotations() -> usize {
        2000
    }
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            instances: Self::default_instances(),
            rotations: Self::default_rotations(),
            fault: Fault::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    #[serde(default = "McSection::default_count")]
    pub n_x: usize,
    #[serde(default = "McSection::default_count")]
    pub n_eps: usize,
    #[serde(default = "McSection::default_count")]
    pub n_beta: usize,
    #[serde(default)]
    pub estimator: VarianceEstimator,
}

impl McSection {
    fn default_count() -> usize {
        100
    }
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            n_x: 100,
            n_eps: 100,
            n_beta: 100,
            estimator: VarianceEstimator::ClosedForm,
        }
    }
}

fn default_features() -> FeatureSpec {
    FeatureSpec::HaarSpectrum {
        seed: None,
        scale: None,
        unit_mean: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<Experiment>,
    #[serde(default)]
    pub seed: u64,
    pub n: usize,
    /// Ignored by `descent_curve`, which sets `p = round(n * gamma)`.
    #[serde(default)]
    pub p: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_path: Option<PathBuf>,
    #[serde(default = "default_features")]
    pub features: FeatureSpec,
    #[serde(default)]
    pub mc: McSection,
    #[serde(default)]
    pub ar1: Ar1Grid,
    #[serde(default)]
    pub cluster: ClusterGrid,
    #[serde(default)]
    pub descent: DescentGrid,
    #[serde(default)]
    pub verify: VerifySettings,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub experiment: Option<Experiment>,
    pub seed: Option<u64>,
    pub output_path: Option<PathBuf>,
    pub n_x: Option<usize>,
    pub n_eps: Option<usize>,
    pub empirical_cov: bool,
}

impl ExperimentConfig {
    /// Parse and validate. Errors name the offending field and, where it can
    /// be found, the line.
    pub fn from_toml(source: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(source).map_err(|e| {
            let line = e.span().map(|s| line_of(source, s.start));
            match line {
                Some(l) => Error::Config(format!("line {l}: {}", e.message())),
                None => Error::Config(e.message().to_string()),
            }
        })?;
        cfg.validate().map_err(|e| locate(source, e))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config always serializes")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        match (self.experiment, o.experiment) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config(format!(
                    "experiment: config file is for {a}, command line asked for {b}"
                )))
            }
            (_, Some(b)) => self.experiment = Some(b),
            _ => {}
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.output_path {
            self.output_path = Some(p.clone());
        }
        if let Some(v) = o.n_x {
            self.mc.n_x = v;
        }
        if let Some(v) = o.n_eps {
            self.mc.n_eps = v;
        }
        if o.empirical_cov {
            self.mc.estimator = VarianceEstimator::EmpiricalCov;
        }
        self.validate()
    }

    pub fn experiment(&self) -> Result<Experiment> {
        self.experiment
            .ok_or_else(|| Error::Config("experiment: not set in the file or on the command line".into()))
    }

    pub fn mc_config(&self) -> McConfig {
        McConfig {
            n_x: self.mc.n_x,
            n_eps: self.mc.n_eps,
            n_beta: self.mc.n_beta,
            seed: self.seed,
            estimator: self.mc.estimator,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: String| Error::Config(format!("{name}: {msg}"));
        if self.n == 0 {
            return Err(field("n", "must be positive".into()));
        }
        for (name, v) in [
            ("mc.n_x", self.mc.n_x),
            ("mc.n_eps", self.mc.n_eps),
            ("mc.n_beta", self.mc.n_beta),
        ] {
            if v < 2 {
                return Err(field(name, format!("must be at least 2, got {v}")));
            }
        }
        let Some(experiment) = self.experiment else {
            return Ok(());
        };
        let needs_p = matches!(
            experiment,
            Experiment::Ar1Sweep | Experiment::ClusterSweep | Experiment::OffdiagStudy
        );
        if needs_p && self.p <= self.n {
            return Err(field("p", format!("must exceed n = {}, got {}", self.n, self.p)));
        }
        match experiment {
            Experiment::Ar1Sweep => {
                nonempty("ar1.sigma2", &self.ar1.sigma2)?;
                nonempty("ar1.rho2", &self.ar1.rho2)?;
                for (i, &s) in self.ar1.sigma2.iter().enumerate() {
                    if !(s > 0.0 && s.is_finite()) {
                        return Err(field(&format!("ar1.sigma2[{i}]"), format!("must be positive, got {s}")));
                    }
                }
                for (i, &r) in self.ar1.rho2.iter().enumerate() {
                    if !(0.0..1.0).contains(&r) {
                        return Err(field(&format!("ar1.rho2[{i}]"), format!("must lie in [0, 1), got {r}")));
                    }
                }
            }
            Experiment::ClusterSweep | Experiment::OffdiagStudy => {
                let c = &self.cluster;
                if c.sizes.iter().sum::<usize>() != self.n {
                    return Err(field(
                        "cluster.sizes",
                        format!("group sizes {:?} must add up to n = {}", c.sizes, self.n),
                    ));
                }
                nonempty("cluster.sigma2_1", &c.sigma2_1)?;
                nonempty("cluster.sigma2_2", &c.sigma2_2)?;
                if !(c.rho_max >= 0.0 && c.rho_max.is_finite()) {
                    return Err(field(
                        "cluster.rho_max",
                        format!("must be non-negative, got {}", c.rho_max),
                    ));
                }
                let rho_hi = if experiment == Experiment::OffdiagStudy {
                    [c.rho_max, c.rho_max]
                } else {
                    c.rho
                };
                for (i, &s1) in c.sigma2_1.iter().enumerate() {
                    for (j, &s2) in c.sigma2_2.iter().enumerate() {
                        for g in c.groups(s1, s2, rho_hi) {
                            crate::models::build_clustered(&[g]).map_err(|e| {
                                field("cluster", format!("grid point (sigma2_1[{i}], sigma2_2[{j}]): {e}"))
                            })?;
                        }
                    }
                }
            }
            Experiment::DescentCurve => {
                let d = &self.descent;
                nonempty("descent.gammas", &d.gammas)?;
                nonempty("descent.trace_levels", &d.trace_levels)?;
                for (i, &g) in d.gammas.iter().enumerate() {
                    if !(g > 1.0 && g <= 100.0) {
                        return Err(field(
                            &format!("descent.gammas[{i}]"),
                            format!("must lie in (1, 100], got {g}"),
                        ));
                    }
                    let p = (self.n as f64 * g).round() as usize;
                    if p <= self.n {
                        return Err(field(
                            &format!("descent.gammas[{i}]"),
                            format!("gives p = {p} <= n = {}", self.n),
                        ));
                    }
                }
                for (i, &w) in d.trace_levels.iter().enumerate() {
                    if !(w > 0.0 && w.is_finite()) {
                        return Err(field(
                            &format!("descent.trace_levels[{i}]"),
                            format!("must be positive, got {w}"),
                        ));
                    }
                }
                if !(d.r2 > 0.0 && d.r2.is_finite()) {
                    return Err(field("descent.r2", format!("must be positive, got {}", d.r2)));
                }
            }
            Experiment::Verify => {
                if self.verify.instances < 2 {
                    return Err(field("verify.instances", "must be at least 2".into()));
                }
                if self.verify.rotations < 2 {
                    return Err(field("verify.rotations", "must be at least 2".into()));
                }
            }
        }
        Ok(())
    }
}

fn nonempty(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Config(format!("{name}: grid must not be empty")));
    }
    Ok(())
}

fn line_of(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

/// Prefix a validation error with the line of the field it names.
fn locate(source: &str, err: Error) -> Error {
    let Error::Config(msg) = err else { return err };
    let path = msg.split(':').next().unwrap_or_default();
    let path: String = path.chars().take_while(|&c| c != '[').collect();
    let (section, key) = match path.split_once('.') {
        Some((s, k)) => (Some(s), k),
        None => (None, path.as_str()),
    };
    let mut current: Option<String> = None;
    for (i, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = Some(name.trim().to_string());
            continue;
        }
        let Some((k, _)) = line.split_once('=') else { continue };
        let k = k.trim();
        let here = current.as_deref();
        let matches = match section {
            Some(s) => (here == Some(s) && k == key) || (here.is_none() && k == format!("{s}.{key}")),
            None => here.is_none() && k == key,
        };
        if matches {
            return Error::Config(format!("line {}: {msg}", i + 1));
        }
    }
    Error::Config(msg)
}
