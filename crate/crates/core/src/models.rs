//! Structured covariance models: regression-error covariances `Omega`
//! (isotropic, AR(1), clustered, explicit) and feature covariances `Sigma`.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_finite, compensated_sum, Matrix, SymmetricSpectrum, Vector};
use crate::sampler::{haar_orthogonal, RandomStream};

/// One equicorrelated block of a clustered error covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterGroup {
    pub size: usize,
    /// Diagonal entry `sigma_g^2`.
    pub sigma2: f64,
    /// Off-diagonal covariance `rho_g` inside the block.
    pub rho: f64,
}

impl ClusterGroup {
    pub fn new(size: usize, sigma2: f64, rho: f64) -> Self {
        Self { size, sigma2, rho }
    }

    /// An equicorrelated block is PD iff `-sigma2/(size-1) < rho < sigma2`.
    fn check(&self, index: usize) -> Result<()> {
        if self.size == 0 {
            return Err(Error::InvalidParameter(format!("group {index} is empty")));
        }
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() || !self.rho.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "group {index}: need finite sigma2 > 0 and finite rho, got ({}, {})",
                self.sigma2, self.rho
            )));
        }
        if self.size > 1 {
            let lower = -self.sigma2 / (self.size - 1) as f64;
            if !(self.rho > lower && self.rho < self.sigma2) {
                return Err(Error::NotSpd {
                    group: Some(index),
                    detail: format!(
                        "rho = {} outside ({lower}, {}) for a block of size {}",
                        self.rho, self.sigma2, self.size
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Serializable description of an error covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    Isotropic { sigma2: f64 },
    Ar1 { sigma2: f64, rho: f64 },
    Clustered { groups: Vec<ClusterGroup> },
    Explicit { matrix: Vec<Vec<f64>> },
}

impl NoiseSpec {
    /// Realize the covariance for `n` observations.
    pub fn build(&self, n: usize) -> Result<NoiseCovariance> {
        let cov = match self {
            NoiseSpec::Isotropic { sigma2 } => NoiseCovariance::isotropic(n, *sigma2)?,
            NoiseSpec::Ar1 { sigma2, rho } => build_ar1(n, *sigma2, *rho)?,
            NoiseSpec::Clustered { groups } => build_clustered(groups)?,
            NoiseSpec::Explicit { matrix } => NoiseCovariance::explicit(rows_to_matrix(matrix)?)?,
        };
        if cov.n() != n {
            return Err(Error::DimensionError(format!(
                "noise model has {} observations, experiment has n = {n}",
                cov.n()
            )));
        }
        Ok(cov)
    }
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::DimensionError(
            "explicit matrix must be a non-empty rectangle".into(),
        ));
    }
    Ok(Matrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Error covariance `Omega` with its spectrum and lazily built square root.
#[derive(Debug, Clone)]
pub struct NoiseCovariance {
    spec: NoiseSpec,
    omega: Matrix,
    spectrum: SymmetricSpectrum,
    sqrt: OnceLock<Matrix>,
}

impl NoiseCovariance {
    fn from_matrix(spec: NoiseSpec, omega: Matrix) -> Result<Self> {
        check_finite(&omega, "noise covariance")?;
        let spectrum = SymmetricSpectrum::of(&omega)?;
        if !spectrum.is_positive_definite() {
            return Err(Error::not_spd(format!(
                "noise covariance eigenvalues span [{:e}, {:e}]",
                spectrum.values.last().unwrap(),
                spectrum.values[0]
            )));
        }
        Ok(Self {
            spec,
            omega,
            spectrum,
            sqrt: OnceLock::new(),
        })
    }

    pub fn isotropic(n: usize, sigma2: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("n must be positive".into()));
        }
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sigma2 must be positive, got {sigma2}"
            )));
        }
        Self::from_matrix(NoiseSpec::Isotropic { sigma2 }, Matrix::identity(n, n) * sigma2)
    }

    pub fn explicit(omega: Matrix) -> Result<Self> {
        let rows = omega.row_iter().map(|r| r.iter().copied().collect()).collect();
        Self::from_matrix(NoiseSpec::Explicit { matrix: rows }, omega)
    }

    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.omega.nrows()
    }

    pub fn omega(&self) -> &Matrix {
        &self.omega
    }

    /// `T = Omega^{1/2}`, symmetric.
    pub fn sqrt(&self) -> &Matrix {
        self.sqrt.get_or_init(|| self.spectrum.apply(f64::sqrt))
    }

    /// Eigenvalues of `Omega`, descending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.spectrum.values
    }

    /// Eigenvectors of `Omega` (equivalently of `T`), paired with
    /// [`eigenvalues`](Self::eigenvalues).
    pub fn eigenvectors(&self) -> &Matrix {
        &self.spectrum.vectors
    }

    pub fn trace(&self) -> f64 {
        compensated_sum(self.omega.diagonal().iter().copied())
    }

    /// `Tr(Omega) / n`, the only feature of `Omega` the expected variances see.
    pub fn trace_over_n(&self) -> f64 {
        self.trace() / self.n() as f64
    }
}

/// Stationary AR(1) errors: `Omega_ij = sigma2 rho^|i-j| / (1 - rho^2)`.
pub fn build_ar1(n: usize, sigma2: f64, rho: f64) -> Result<NoiseCovariance> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be positive".into()));
    }
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidParameter(format!("AR(1) needs |rho| < 1, got {rho}")));
    }
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "sigma2 must be positive, got {sigma2}"
        )));
    }
    let denom = 1.0 - rho * rho;
    let omega = Matrix::from_fn(n, n, |i, j| sigma2 * rho.powi(i.abs_diff(j) as i32) / denom);
    NoiseCovariance::from_matrix(NoiseSpec::Ar1 { sigma2, rho }, omega)
}

/// Block-diagonal errors, one equicorrelated block per group.
pub fn build_clustered(groups: &[ClusterGroup]) -> Result<NoiseCovariance> {
    if groups.is_empty() {
        return Err(Error::InvalidParameter(
            "clustered model needs at least one group".into(),
        ));
    }
    for (g, group) in groups.iter().enumerate() {
        group.check(g)?;
    }
    let n: usize = groups.iter().map(|g| g.size).sum();
    let mut omega = Matrix::zeros(n, n);
    let mut start = 0;
    for g in groups {
        for i in start..start + g.size {
            for j in start..start + g.size {
                omega[(i, j)] = if i == j { g.sigma2 } else { g.rho };
            }
        }
        start += g.size;
    }
    NoiseCovariance::from_matrix(
        NoiseSpec::Clustered {
            groups: groups.to_vec(),
        },
        omega,
    )
}

pub fn trace_over_n(noise: &NoiseCovariance) -> f64 {
    noise.trace_over_n()
}

/// Serializable description of a feature covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSpec {
    Isotropic,
    /// `Sigma = U D U^T` with `U` Haar and `d_i = |z_i| / sum |z_j|`, times
    /// `scale` (or times `p` when `unit_mean` is set, giving mean eigenvalue 1).
    HaarSpectrum {
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        scale: Option<f64>,
        #[serde(default)]
        unit_mean: bool,
    },
    Explicit {
        matrix: Vec<Vec<f64>>,
    },
}

impl FeatureSpec {
    /// Realize for dimension `p`. `rng` is used when the spec carries no seed.
    pub fn build(&self, p: usize, rng: &mut RandomStream) -> Result<FeatureModel> {
        let model = match self {
            FeatureSpec::Isotropic => FeatureModel::isotropic(p),
            FeatureSpec::HaarSpectrum { seed, scale, unit_mean } => {
                let scale = match (scale, unit_mean) {
                    (Some(_), true) => {
                        return Err(Error::InvalidParameter(
                            "give either scale or unit_mean, not both".into(),
                        ))
                    }
                    (Some(s), false) => *s,
                    (None, true) => p as f64,
                    (None, false) => 1.0,
                };
                match seed {
                    Some(s) => FeatureModel::haar_spectrum_scaled(p, scale, &mut RandomStream::new(*s, 0))?,
                    None => FeatureModel::haar_spectrum_scaled(p, scale, rng)?,
                }
            }
            FeatureSpec::Explicit { matrix } => FeatureModel::explicit(rows_to_matrix(matrix)?)?,
        };
        if model.p() != p {
            return Err(Error::DimensionError(format!(
                "feature model has dimension {}, experiment has p = {p}",
                model.p()
            )));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureKind {
    Isotropic,
    HaarRotatedSpectrum { seed: u64, stream_id: u64, scale: f64 },
    Explicit,
}

/// Feature covariance `Sigma` with `S = Sigma^{1/2}`.
///
/// The isotropic model never materializes its `p x p` matrices unless asked.
#[derive(Debug, Clone)]
pub struct FeatureModel {
    kind: FeatureKind,
    p: usize,
    /// Descending.
    eigenvalues: Vec<f64>,
    eigenvectors: Option<Matrix>,
    sigma: OnceLock<Matrix>,
    sqrt: OnceLock<Matrix>,
    inv_sqrt: OnceLock<Matrix>,
}

impl FeatureModel {
    pub fn isotropic(p: usize) -> Self {
        assert!(p >= 1, "feature dimension must be positive");
        Self {
            kind: FeatureKind::Isotropic,
            p,
            eigenvalues: vec![1.0; p],
            eigenvectors: None,
            sigma: OnceLock::new(),
            sqrt: OnceLock::new(),
            inv_sqrt: OnceLock::new(),
        }
    }

    pub fn haar_spectrum(p: usize, rng: &mut RandomStream) -> Self {
        Self::haar_spectrum_scaled(p, 1.0, rng).expect("unit scale is valid")
    }

    pub fn haar_spectrum_scaled(p: usize, scale: f64, rng: &mut RandomStream) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidParameter("p must be positive".into()));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidParameter(format!("scale must be positive, got {scale}")));
        }
        let (seed, stream_id) = (rng.seed(), rng.stream_id());
        let u = haar_orthogonal(p, rng);
        let d = loop {
            let z: Vec<f64> = (0..p).map(|_| rng.standard_normal().abs()).collect();
            let total = compensated_sum(z.iter().copied());
            let d: Vec<f64> = z.iter().map(|v| v / total).collect();
            if d.iter().all(|&v| v >= 1e-300) {
                break d;
            }
        };
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&i, &j| d[j].total_cmp(&d[i]));
        let mut vectors = Matrix::zeros(p, p);
        let mut values = Vec::with_capacity(p);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &u.column(src));
            values.push(d[src] * scale);
        }
        let spectrum = SymmetricSpectrum { values, vectors };
        let sigma = spectrum.apply(|l| l);
        let sqrt = spectrum.apply(f64::sqrt);
        let SymmetricSpectrum { values, vectors } = spectrum;
        Ok(Self {
            kind: FeatureKind::HaarRotatedSpectrum { seed, stream_id, scale },
            p,
            eigenvalues: values,
            eigenvectors: Some(vectors),
            sigma: OnceLock::from(sigma),
            sqrt: OnceLock::from(sqrt),
            inv_sqrt: OnceLock::new(),
        })
    }

    pub fn explicit(sigma: Matrix) -> Result<Self> {
        check_finite(&sigma, "feature covariance")?;
        let spectrum = SymmetricSpectrum::of(&sigma)?;
        if !spectrum.is_positive_definite() {
            return Err(Error::not_spd("feature covariance is not positive definite"));
        }
        let sqrt = spectrum.apply(f64::sqrt);
        Ok(Self {
            kind: FeatureKind::Explicit,
            p: sigma.nrows(),
            eigenvalues: spectrum.values,
            eigenvectors: Some(spectrum.vectors),
            sigma: OnceLock::from(sigma),
            sqrt: OnceLock::from(sqrt),
            inv_sqrt: OnceLock::new(),
        })
    }

    pub fn kind(&self) -> &FeatureKind {
        &self.kind
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn is_isotropic(&self) -> bool {
        self.kind == FeatureKind::Isotropic
    }

    /// Eigenvalues of `Sigma`, descending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn trace(&self) -> f64 {
        compensated_sum(self.eigenvalues.iter().copied())
    }

    pub fn sigma(&self) -> &Matrix {
        self.sigma.get_or_init(|| Matrix::identity(self.p, self.p))
    }

    pub fn sqrt(&self) -> &Matrix {
        self.sqrt.get_or_init(|| Matrix::identity(self.p, self.p))
    }

    pub fn inv_sqrt(&self) -> &Matrix {
        self.inv_sqrt.get_or_init(|| match &self.eigenvectors {
            None => Matrix::identity(self.p, self.p),
            Some(v) => SymmetricSpectrum {
                values: self.eigenvalues.clone(),
                vectors: v.clone(),
            }
            .apply(|l| 1.0 / l.sqrt()),
        })
    }

    /// `S m`, skipping the product for the identity.
    pub fn apply_sqrt(&self, m: &Matrix) -> Matrix {
        if self.is_isotropic() {
            m.clone()
        } else {
            self.sqrt() * m
        }
    }

    /// `S v`, skipping the product for the identity.
    pub fn apply_sqrt_vec(&self, v: &Vector) -> Vector {
        if self.is_isotropic() {
            v.clone()
        } else {
            self.sqrt() * v
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{esd, trace};

    #[test]
    fn ar1_white_noise_is_identity() {
        let c = build_ar1(3, 1.0, 0.0).unwrap();
        assert_eq!(c.omega(), &Matrix::identity(3, 3));
    }

    #[test]
    fn ar1_two_by_two() {
        let c = build_ar1(2, 1.0, 0.5).unwrap();
        let want = Matrix::from_row_slice(2, 2, &[4.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 4.0 / 3.0]);
        assert_eq!(c.omega(), &want);
    }

    #[test]
    fn ar1_level_set_trace() {
        let c = build_ar1(50, 0.75, 0.5).unwrap();
        assert!((c.trace_over_n() - 1.0).abs() < 1e-15);
        let c = build_ar1(7, 0.5, 0.5_f64.sqrt()).unwrap();
        assert!((c.trace_over_n() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn ar1_rejects_unit_root() {
        assert!(matches!(build_ar1(4, 1.0, 1.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(build_ar1(4, 1.0, -1.2), Err(Error::InvalidParameter(_))));
        assert!(matches!(build_ar1(4, 0.0, 0.2), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn clustered_examples() {
        let c = build_clustered(&[ClusterGroup::new(3, 1.0, 0.0)]).unwrap();
        assert_eq!(c.omega(), &Matrix::identity(3, 3));

        let c = build_clustered(&[ClusterGroup::new(5, 1.0, 0.05), ClusterGroup::new(15, 1.0, 0.05)]).unwrap();
        assert_eq!(c.n(), 20);
        assert!((c.trace_over_n() - 1.0).abs() < 1e-15);

        let c = build_clustered(&[ClusterGroup::new(2, 1.0, 0.3), ClusterGroup::new(2, 2.0, -0.5)]).unwrap();
        let want = Matrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.3, 0.0, 0.0, 0.3, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, -0.5, 0.0, 0.0, -0.5, 2.0,
            ],
        );
        assert_eq!(c.omega(), &want);
        // Blocks: 1 +- 0.3 and 2 -+ 0.5.
        let mut eig = c.eigenvalues().to_vec();
        eig.sort_by(f64::total_cmp);
        for (got, want) in eig.iter().zip([0.7, 1.3, 1.5, 2.5]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn clustered_rejects_indefinite_block() {
        let err = build_clustered(&[ClusterGroup::new(2, 1.0, 0.1), ClusterGroup::new(4, 1.0, -0.5)]).unwrap_err();
        assert!(matches!(err, Error::NotSpd { group: Some(1), .. }), "{err}");
        let err = build_clustered(&[ClusterGroup::new(3, 1.0, 1.0)]).unwrap_err();
        assert!(matches!(err, Error::NotSpd { group: Some(0), .. }));
        // Singleton blocks accept any rho.
        assert!(build_clustered(&[ClusterGroup::new(1, 1.0, 5.0)]).is_ok());
    }

    #[test]
    fn trace_over_n_examples() {
        assert_eq!(NoiseCovariance::isotropic(4, 2.0).unwrap().trace_over_n(), 2.0);
        let c = build_ar1(10, 0.5, 0.5_f64.sqrt()).unwrap();
        assert!((c.trace_over_n() - 1.0).abs() < 1e-14);
        let c = build_clustered(&[ClusterGroup::new(5, 1.0, 0.01), ClusterGroup::new(15, 3.0, 0.2)]).unwrap();
        assert!((c.trace_over_n() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn clustered_trace_ignores_rho() {
        let a = build_clustered(&[ClusterGroup::new(5, 1.3, 0.0), ClusterGroup::new(15, 0.7, 0.0)]).unwrap();
        let b = build_clustered(&[ClusterGroup::new(5, 1.3, 0.04), ClusterGroup::new(15, 0.7, 0.031)]).unwrap();
        assert_eq!(a.trace(), b.trace());
    }

    #[test]
    fn noise_sqrt_squares_back() {
        let c = build_clustered(&[ClusterGroup::new(3, 2.0, 0.5), ClusterGroup::new(2, 1.0, -0.2)]).unwrap();
        let t = c.sqrt();
        assert!((t * t - c.omega()).amax() < 1e-12);
    }

    #[test]
    fn explicit_noise_must_be_pd() {
        let bad = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(NoiseCovariance::explicit(bad), Err(Error::NotSpd { .. })));
    }

    #[test]
    fn haar_spectrum_single_feature() {
        let f = FeatureModel::haar_spectrum(1, &mut RandomStream::new(0, 0));
        assert!((f.sigma()[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn haar_spectrum_properties() {
        let f = FeatureModel::haar_spectrum(100, &mut RandomStream::new(17, 0));
        assert!((trace(f.sigma()) - 1.0).abs() < 1e-12);
        assert!((f.trace() - 1.0).abs() < 1e-12);
        let e = esd(f.sigma()).unwrap();
        assert!(e.eigenvalues[0] > 0.0);
        let mut want = f.eigenvalues().to_vec();
        want.reverse();
        for (a, b) in e.eigenvalues.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
        let s = f.sqrt();
        assert!((s * s - f.sigma()).amax() < 1e-12);
        let si = f.inv_sqrt();
        assert!((s * si - Matrix::identity(100, 100)).amax() < 1e-8);
    }

    #[test]
    fn haar_spectrum_is_reproducible() {
        let a = FeatureModel::haar_spectrum(20, &mut RandomStream::new(5, 2));
        let b = FeatureModel::haar_spectrum(20, &mut RandomStream::new(5, 2));
        assert_eq!(a.sigma(), b.sigma());
        assert_eq!(a.eigenvalues(), b.eigenvalues());
    }

    #[test]
    fn unit_mean_scaling() {
        let spec = FeatureSpec::HaarSpectrum {
            seed: Some(3),
            scale: None,
            unit_mean: true,
        };
        let f = spec.build(40, &mut RandomStream::new(0, 0)).unwrap();
        assert!((f.trace() / 40.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn specs_round_trip_through_toml() {
        let noise = NoiseSpec::Clustered {
            groups: vec![ClusterGroup::new(5, 1.0, 0.05), ClusterGroup::new(15, 2.0, 0.05)],
        };
        let text = toml::to_string(&noise).unwrap();
        assert_eq!(toml::from_str::<NoiseSpec>(&text).unwrap(), noise);

        let ar: NoiseSpec = toml::from_str("kind = \"ar1\"\nsigma2 = 0.75\nrho = 0.5\n").unwrap();
        assert_eq!(ar, NoiseSpec::Ar1 { sigma2: 0.75, rho: 0.5 });
        assert!(ar.build(3).is_ok());
        assert!(matches!(noise.build(7), Err(Error::DimensionError(_))));
    }
}
