//! Conditional-on-X quantities for the minimum-norm interpolator
//! `beta_hat = X^+ y`: variance and bias components of the prediction and
//! estimation risks, and the alignment matrix `Gamma(X)` between the right
//! singular vectors of `S X^+` and the eigenvectors of `Omega^{1/2}`.

use crate::error::{Error, Result};
use crate::linalg::{compensated_sum, frobenius_norm_sq, full_row_rank_pinv, min_norm_solve, svd_thin, Matrix, Vector};
use crate::models::{FeatureModel, NoiseCovariance};

/// Which risk a quantity belongs to: prediction weights by `Sigma`,
/// estimation by the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Prediction,
    Estimation,
}

/// Weight matrix `A` in `||v||_A^2`.
#[derive(Debug, Clone, Copy)]
pub enum BiasWeight<'a> {
    Identity,
    Features(&'a FeatureModel),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalRisk {
    pub var_pred: f64,
    pub var_est: f64,
    pub bias2_pred: f64,
    pub bias2_est: f64,
}

impl ConditionalRisk {
    pub fn prediction_risk(&self) -> f64 {
        self.bias2_pred + self.var_pred
    }

    pub fn estimation_risk(&self) -> f64 {
        self.bias2_est + self.var_est
    }
}

pub fn fit(x: &Matrix, y: &Vector) -> Result<Vector> {
    min_norm_solve(x, y)
}

fn check_dims(x: &Matrix, noise: Option<&NoiseCovariance>, features: Option<&FeatureModel>) -> Result<()> {
    if let Some(noise) = noise {
        if noise.n() != x.nrows() {
            return Err(Error::DimensionError(format!(
                "design has {} rows, noise model has n = {}",
                x.nrows(),
                noise.n()
            )));
        }
    }
    if let Some(features) = features {
        if features.p() != x.ncols() {
            return Err(Error::DimensionError(format!(
                "design has {} columns, feature model has p = {}",
                x.ncols(),
                features.p()
            )));
        }
    }
    Ok(())
}

/// `||S X^+ T||_F^2` given a precomputed `X^+`.
pub(crate) fn var_from_pinv(pinv: &Matrix, noise: &NoiseCovariance, features: Option<&FeatureModel>) -> f64 {
    let pt = pinv * noise.sqrt();
    match features {
        Some(f) if !f.is_isotropic() => frobenius_norm_sq(&(f.sqrt() * pt)),
        _ => frobenius_norm_sq(&pt),
    }
}

/// `Var_Sigma(beta_hat | X) = Tr(X^+ Omega X^+^T Sigma) = ||S X^+ T||_F^2`.
pub fn var_pred_conditional(x: &Matrix, noise: &NoiseCovariance, features: &FeatureModel) -> Result<f64> {
    check_dims(x, Some(noise), Some(features))?;
    let pinv = full_row_rank_pinv(x)?;
    Ok(var_from_pinv(&pinv, noise, Some(features)))
}

/// `Var(beta_hat | X) = ||X^+ T||_F^2`.
pub fn var_est_conditional(x: &Matrix, noise: &NoiseCovariance) -> Result<f64> {
    check_dims(x, Some(noise), None)?;
    let pinv = full_row_rank_pinv(x)?;
    Ok(var_from_pinv(&pinv, noise, None))
}

/// `(I - X^+ X) beta`, the component of `beta` the interpolator cannot see.
pub(crate) fn null_component(pinv: &Matrix, x: &Matrix, beta: &Vector) -> Vector {
    beta - pinv * (x * beta)
}

fn weighted_norm_sq(v: &Vector, weight: BiasWeight<'_>) -> f64 {
    let w = match weight {
        BiasWeight::Identity => v.clone(),
        BiasWeight::Features(f) => f.apply_sqrt_vec(v),
    };
    compensated_sum(w.iter().map(|a| a * a))
}

/// `||(I - Sigma_hat^+ Sigma_hat) beta||_A^2` with the null-space projector
/// taken exactly from the pseudoinverse.
pub fn bias2_conditional(x: &Matrix, beta: &Vector, weight: BiasWeight<'_>) -> Result<f64> {
    if beta.len() != x.ncols() {
        return Err(Error::DimensionError(format!(
            "beta has length {}, design has {} columns",
            beta.len(),
            x.ncols()
        )));
    }
    if let BiasWeight::Features(f) = weight {
        check_dims(x, None, Some(f))?;
    }
    let pinv = crate::linalg::pseudo_inverse(x, crate::linalg::DEFAULT_RANK_TOL)?;
    Ok(weighted_norm_sq(&null_component(&pinv, x, beta), weight).max(0.0))
}

/// Conditional bias integrated exactly over the random-effects prior.
///
/// Estimation (`E[beta beta^T] = r2 I / p`): `(r2 / p) Tr(P)` with `P` the
/// null-space projector. Prediction (`E[S beta (S beta)^T] = r2 I / p`):
/// `(r2 / p) ||S P S^{-1}||_F^2`, which only reduces to `r2 (p - rank) / p`
/// when `P` commutes with `Sigma`.
pub fn expected_bias2_given_x(x: &Matrix, features: &FeatureModel, r2: f64, target: Target) -> Result<f64> {
    check_dims(x, None, Some(features))?;
    let p = x.ncols();
    let pinv = crate::linalg::pseudo_inverse(x, crate::linalg::DEFAULT_RANK_TOL)?;
    let proj = Matrix::identity(p, p) - &pinv * x;
    let value = match target {
        Target::Estimation => crate::linalg::trace(&proj),
        Target::Prediction if features.is_isotropic() => crate::linalg::trace(&proj),
        Target::Prediction => frobenius_norm_sq(&(features.sqrt() * proj * features.inv_sqrt())),
    };
    Ok(r2 / p as f64 * value)
}

/// All four conditional components for one `(X, beta)`.
pub fn conditional_risk(
    x: &Matrix,
    beta: &Vector,
    noise: &NoiseCovariance,
    features: &FeatureModel,
) -> Result<ConditionalRisk> {
    check_dims(x, Some(noise), Some(features))?;
    let pinv = full_row_rank_pinv(x)?;
    let resid = null_component(&pinv, x, beta);
    Ok(ConditionalRisk {
        var_pred: var_from_pinv(&pinv, noise, Some(features)),
        var_est: var_from_pinv(&pinv, noise, None),
        bias2_pred: weighted_norm_sq(&resid, BiasWeight::Features(features)),
        bias2_est: weighted_norm_sq(&resid, BiasWeight::Identity),
    })
}

/// `Gamma(X)` with the spectra it is contracted against.
#[derive(Debug, Clone)]
pub struct AlignmentMatrix {
    /// `gamma[(i, j)] = <v_i, u_j>^2`.
    pub gamma: Matrix,
    /// `lambda((X^T X)^+ Sigma)`: the `n` nonzero eigenvalues, descending.
    pub design_spectrum: Vec<f64>,
    /// `lambda(Omega)`, descending.
    pub noise_spectrum: Vec<f64>,
}

impl AlignmentMatrix {
    /// `lambda((X^T X)^+ Sigma)^T Gamma lambda(Omega)`.
    pub fn contract(&self) -> f64 {
        let n = self.gamma.nrows();
        compensated_sum(
            (0..n).flat_map(|i| {
                (0..n).map(move |j| self.design_spectrum[i] * self.gamma[(i, j)] * self.noise_spectrum[j])
            }),
        )
    }

    /// Largest deviation of a row or column sum from one.
    pub fn stochasticity_defect(&self) -> f64 {
        let rows = self.gamma.row_iter().map(|r| (r.sum() - 1.0).abs());
        let cols = self.gamma.column_iter().map(|c| (c.sum() - 1.0).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }
}

pub fn alignment_matrix(x: &Matrix, features: &FeatureModel, noise: &NoiseCovariance) -> Result<AlignmentMatrix> {
    check_dims(x, Some(noise), Some(features))?;
    let pinv = full_row_rank_pinv(x)?;
    let b = features.apply_sqrt(&pinv);
    let f = svd_thin(&b)?;
    let n = x.nrows();
    let gamma = f.v.transpose() * noise.eigenvectors();
    Ok(AlignmentMatrix {
        gamma: gamma.map(|g| g * g),
        design_spectrum: f.singular_values.iter().take(n).map(|s| s * s).collect(),
        noise_spectrum: noise.eigenvalues().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{pseudo_inverse, trace, DEFAULT_RANK_TOL};
    use crate::models::{build_ar1, build_clustered, ClusterGroup};
    use crate::sampler::{gaussian_design, haar_orthogonal, sample_noise_matrix, RandomStream};

    fn setup(n: usize, p: usize, seed: u64) -> (Matrix, FeatureModel, NoiseCovariance) {
        let features = FeatureModel::haar_spectrum_scaled(p, p as f64, &mut RandomStream::new(seed, 1)).unwrap();
        let x = gaussian_design(n, &features, &mut RandomStream::new(seed, 2));
        let noise = build_ar1(n, 0.8, 0.6).unwrap();
        (x, features, noise)
    }

    #[test]
    fn fit_examples() {
        let y = Vector::from_vec(vec![0.3, -1.0]);
        assert!((fit(&Matrix::identity(2, 2), &y).unwrap() - &y).amax() < 1e-15);
        let b = fit(&Matrix::from_row_slice(1, 2, &[1.0, 1.0]), &Vector::from_vec(vec![2.0])).unwrap();
        assert!((b - Vector::from_vec(vec![1.0, 1.0])).amax() < 1e-14);
        let (x, _, _) = setup(6, 11, 1);
        let y = RandomStream::new(3, 3).gaussian_vector(6);
        assert!((&x * fit(&x, &y).unwrap() - y).amax() < 1e-8);
    }

    #[test]
    fn isotropic_variance_is_pinv_trace() {
        let (x, _, _) = setup(5, 9, 2);
        let iso = FeatureModel::isotropic(9);
        let white = NoiseCovariance::isotropic(5, 1.0).unwrap();
        let v = var_pred_conditional(&x, &white, &iso).unwrap();
        let want = trace(&(&x * x.transpose()).try_inverse().unwrap());
        assert!((v - want).abs() < 1e-10 * want);

        let s2 = NoiseCovariance::isotropic(5, 2.5).unwrap();
        assert!((var_est_conditional(&x, &s2).unwrap() - 2.5 * want).abs() < 1e-10 * want);
    }

    #[test]
    fn orthonormal_rows_give_n() {
        let (x, _, _) = setup(4, 10, 3);
        let q = svd_thin(&x).unwrap().v.transpose();
        let white = NoiseCovariance::isotropic(4, 1.0).unwrap();
        assert!((var_pred_conditional(&q, &white, &FeatureModel::isotropic(10)).unwrap() - 4.0).abs() < 1e-10);
        assert!((var_est_conditional(&q, &white).unwrap() - 4.0).abs() < 1e-10);
    }

    #[test]
    fn var_pred_matches_trace_formula() {
        let (x, features, noise) = setup(5, 8, 4);
        let pinv = pseudo_inverse(&x, DEFAULT_RANK_TOL).unwrap();
        let direct = trace(&(&pinv * noise.omega() * pinv.transpose() * features.sigma()));
        let v = var_pred_conditional(&x, &noise, &features).unwrap();
        assert!((v - direct).abs() < 1e-8 * direct);
    }

    #[test]
    fn var_est_equals_var_pred_with_identity_weight() {
        let (x, _, noise) = setup(6, 13, 5);
        let a = var_est_conditional(&x, &noise).unwrap();
        let b = var_pred_conditional(&x, &noise, &FeatureModel::isotropic(13)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn variance_matches_noise_monte_carlo() {
        // Oracle: empirical covariance of beta_hat over many noise draws.
        let (x, features, noise) = setup(5, 8, 6);
        let draws = 100_000;
        let beta = RandomStream::new(1, 9).gaussian_vector(8);
        let eps = sample_noise_matrix(&noise, draws, &mut RandomStream::new(6, 7));
        let mut ys = eps;
        let signal = &x * &beta;
        for mut c in ys.column_iter_mut() {
            c += &signal;
        }
        let pinv = pseudo_inverse(&x, DEFAULT_RANK_TOL).unwrap();
        let fits = &pinv * ys;
        let mean = fits.column_mean();
        let check = |weight: &dyn Fn(&Vector) -> Vector, target: f64| {
            let w: Vec<f64> = fits
                .column_iter()
                .map(|c| weight(&(c - &mean)).norm_squared())
                .collect();
            let m = compensated_sum(w.iter().copied()) / (draws - 1) as f64;
            let var = w.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (draws - 1) as f64;
            let se = (var / draws as f64).sqrt();
            assert!((m - target).abs() < 3.0 * se, "mc {m} +- {se} vs {target}");
        };
        let vp = var_pred_conditional(&x, &noise, &features).unwrap();
        check(&|v| features.sqrt() * v, vp);
        let ve = var_est_conditional(&x, &noise).unwrap();
        check(&|v| v.clone(), ve);
    }

    #[test]
    fn variance_requires_full_row_rank() {
        let (mut x, features, noise) = setup(4, 7, 7);
        let r = x.row(1).into_owned();
        x.set_row(3, &r);
        assert!(matches!(
            var_pred_conditional(&x, &noise, &features),
            Err(Error::RankDeficient { rank: 3, expected: 4 })
        ));
        assert!(matches!(
            var_est_conditional(&x, &noise),
            Err(Error::RankDeficient { .. })
        ));
        assert!(matches!(
            alignment_matrix(&x, &features, &noise),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn bias_vanishes_without_null_space() {
        let mut rng = RandomStream::new(8, 0);
        let x = rng.gaussian_matrix(9, 4);
        let beta = rng.gaussian_vector(4);
        assert!(bias2_conditional(&x, &beta, BiasWeight::Identity).unwrap() < 1e-20);

        let x = rng.gaussian_matrix(3, 7);
        let beta = x.transpose() * rng.gaussian_vector(3);
        assert!(bias2_conditional(&x, &beta, BiasWeight::Identity).unwrap() < 1e-20);
    }

    #[test]
    fn bias_is_pythagorean_remainder() {
        let mut rng = RandomStream::new(9, 0);
        let x = rng.gaussian_matrix(4, 7);
        let beta = rng.gaussian_vector(7);
        // Row-space projector from an orthonormal basis (Gram-Schmidt via QR).
        let q = x.transpose().qr().q();
        let projected = &q * (q.transpose() * &beta);
        let want = beta.norm_squared() - projected.norm_squared();
        let got = bias2_conditional(&x, &beta, BiasWeight::Identity).unwrap();
        assert!((got - want).abs() < 1e-8);
    }

    #[test]
    fn expected_bias_matches_prior_average() {
        let (x, features, _) = setup(4, 9, 10);
        let mut rng = RandomStream::new(10, 5);
        let draws = 20_000;
        for target in [Target::Estimation, Target::Prediction] {
            let exact = expected_bias2_given_x(&x, &features, 1.0, target).unwrap();
            let vals: Vec<f64> = (0..draws)
                .map(|_| match target {
                    Target::Estimation => {
                        let b = crate::sampler::sample_beta(9, 1.0, &mut rng).unwrap();
                        bias2_conditional(&x, &b, BiasWeight::Identity).unwrap()
                    }
                    Target::Prediction => {
                        let b = crate::sampler::sample_beta_weighted(&features, 1.0, &mut rng).unwrap();
                        bias2_conditional(&x, &b, BiasWeight::Features(&features)).unwrap()
                    }
                })
                .collect();
            let m = vals.iter().sum::<f64>() / draws as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (draws - 1) as f64).sqrt();
            assert!(
                (m - exact).abs() < 3.0 * sd / (draws as f64).sqrt(),
                "{target:?}: {m} vs {exact}"
            );
        }
        let est = expected_bias2_given_x(&x, &features, 1.0, Target::Estimation).unwrap();
        assert!((est - 5.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn alignment_is_doubly_stochastic_and_reconstructs() {
        for seed in 0..20 {
            let (x, features, _) = setup(5, 9, 100 + seed);
            let noise = build_clustered(&[ClusterGroup::new(2, 1.5, 0.4), ClusterGroup::new(3, 0.7, 0.1)]).unwrap();
            let a = alignment_matrix(&x, &features, &noise).unwrap();
            assert!(a.stochasticity_defect() < 1e-8);
            assert!(a.gamma.iter().all(|&g| (0.0..=1.0 + 1e-12).contains(&g)));
            let v = var_pred_conditional(&x, &noise, &features).unwrap();
            assert!((a.contract() - v).abs() < 1e-6 * v);
        }
    }

    #[test]
    fn alignment_with_white_noise_is_pinv_trace() {
        let (x, features, _) = setup(5, 9, 11);
        let white = NoiseCovariance::isotropic(5, 1.0).unwrap();
        let a = alignment_matrix(&x, &features, &white).unwrap();
        let t = crate::linalg::trace_weighted_pinv(&x, features.sigma()).unwrap();
        assert!((a.contract() - t).abs() < 1e-8 * t);
    }

    #[test]
    fn aligned_design_gives_identity_gamma() {
        let n = 4;
        let noise = build_ar1(n, 1.0, 0.5).unwrap();
        let ut = noise.eigenvectors().clone();
        // Right singular vectors of X^+ are the left singular vectors of X,
        // ordered by ascending singular value of X.
        let v = haar_orthogonal(7, &mut RandomStream::new(12, 0))
            .columns(0, n)
            .into_owned();
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let x = &ut * d * v.transpose();
        let a = alignment_matrix(&x, &FeatureModel::isotropic(7), &noise).unwrap();
        assert!((a.gamma - Matrix::identity(n, n)).amax() < 1e-10);
    }

    #[test]
    fn white_noise_variance_is_rotation_invariant() {
        let (x, features, _) = setup(5, 10, 13);
        let white = NoiseCovariance::isotropic(5, 1.0).unwrap();
        let base = var_pred_conditional(&x, &white, &features).unwrap();
        let mut rng = RandomStream::new(13, 1);
        for _ in 0..10 {
            let o = haar_orthogonal(5, &mut rng);
            let v = var_pred_conditional(&(&o * &x), &white, &features).unwrap();
            assert!((v - base).abs() < 1e-8 * base);
        }
    }

    #[test]
    fn conditional_risk_assembles_components() {
        let (x, features, noise) = setup(5, 9, 14);
        let beta = RandomStream::new(14, 2).gaussian_vector(9);
        let r = conditional_risk(&x, &beta, &noise, &features).unwrap();
        assert!((r.var_pred - var_pred_conditional(&x, &noise, &features).unwrap()).abs() < 1e-12 * r.var_pred);
        assert!((r.bias2_est - bias2_conditional(&x, &beta, BiasWeight::Identity).unwrap()).abs() < 1e-10);
        assert!((r.bias2_pred - bias2_conditional(&x, &beta, BiasWeight::Features(&features)).unwrap()).abs() < 1e-10);
        assert_eq!(r.estimation_risk(), r.bias2_est + r.var_est);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (x, features, _) = setup(5, 9, 15);
        let wrong = build_ar1(6, 1.0, 0.1).unwrap();
        assert!(matches!(
            var_pred_conditional(&x, &wrong, &features),
            Err(Error::DimensionError(_))
        ));
        let beta = Vector::zeros(3);
        assert!(matches!(
            bias2_conditional(&x, &beta, BiasWeight::Identity),
            Err(Error::DimensionError(_))
        ));
    }
}
