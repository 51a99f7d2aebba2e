//! Dense linear-algebra kernel.
//!
//! Factorizations come from `nalgebra`; everything the risk formulas consume
//! (rank decisions, pseudoinverses, square roots, reductions) goes through
//! this module so that tolerances are decided in one place.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative rank tolerance: a singular value is zero when it is at most
/// `rank_tol * s_max * max(rows, cols)`.
pub const DEFAULT_RANK_TOL: f64 = 1e-12;

/// Absolute-relative tolerance used by symmetry checks.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Thin singular value decomposition `a = u * diag(s) * v^T`.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// `rows x k` with orthonormal columns, `k = min(rows, cols)`.
    pub u: Matrix,
    /// Descending, non-negative.
    pub singular_values: Vec<f64>,
    /// `cols x k` with orthonormal columns.
    pub v: Matrix,
    pub numerical_rank: usize,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (j, s) in self.singular_values.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.v.transpose()
    }
}

/// Empirical spectral distribution of a symmetric matrix: mass
/// `1 / normalization` on each eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDistribution {
    /// Sorted ascending.
    pub eigenvalues: Vec<f64>,
    pub normalization: usize,
}

impl SpectralDistribution {
    /// `F(s) = #{i : lambda_i <= s} / normalization`.
    pub fn cdf(&self, s: f64) -> f64 {
        let count = self.eigenvalues.partition_point(|&l| l <= s);
        count as f64 / self.normalization as f64
    }

    pub fn mean(&self) -> f64 {
        compensated_sum(self.eigenvalues.iter().copied()) / self.normalization as f64
    }

    /// `int 1/s dF(s)`, skipping eigenvalues at or below `floor`.
    pub fn inverse_moment(&self, floor: f64) -> f64 {
        compensated_sum(self.eigenvalues.iter().filter(|&&l| l > floor).map(|l| 1.0 / l)) / self.normalization as f64
    }
}

/// Neumaier's compensated summation.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn frobenius_norm_sq(a: &Matrix) -> f64 {
    compensated_sum(a.iter().map(|x| x * x))
}

pub fn trace(a: &Matrix) -> f64 {
    compensated_sum(a.diagonal().iter().copied())
}

/// `sum_ij a_ij b_ij`, i.e. `Tr(a^T b)`.
pub fn frobenius_inner(a: &Matrix, b: &Matrix) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    compensated_sum(a.iter().zip(b.iter()).map(|(x, y)| x * y))
}

pub fn max_abs(a: &Matrix) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub(crate) fn check_finite(a: &Matrix, what: &str) -> Result<()> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::InvalidMatrix(format!("{what} has an empty dimension")));
    }
    if let Some(bad) = a.iter().find(|x| !x.is_finite()) {
        return Err(Error::InvalidMatrix(format!("{what} has non-finite entry {bad}")));
    }
    Ok(())
}

fn symmetry_defect(a: &Matrix) -> Result<f64> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionError(format!(
            "expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    Ok(worst)
}

pub(crate) fn check_symmetric(a: &Matrix) -> Result<()> {
    let defect = symmetry_defect(a)?;
    if defect > SYMMETRY_TOL * max_abs(a).max(1.0) {
        return Err(Error::NotSymmetric { asymmetry: defect });
    }
    Ok(())
}

fn rank_threshold(s_max: f64, rows: usize, cols: usize, rank_tol: f64) -> f64 {
    rank_tol * s_max * rows.max(cols) as f64
}

pub fn svd_thin(a: &Matrix) -> Result<SvdFactors> {
    svd_with_tol(a, DEFAULT_RANK_TOL)
}

/// Relative reconstruction error above which a nalgebra SVD is rejected.
const SVD_CHECK_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 80;

/// Unsorted thin factors `(u, s, v)` with `a = u diag(s) v^T`.
fn raw_svd(a: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let s: Vec<f64> = svd.singular_values.iter().copied().collect();
    let mut us = u.clone();
    for (j, sj) in s.iter().enumerate() {
        us.column_mut(j).scale_mut(*sj);
    }
    let err = (us * v.transpose() - a).norm();
    let scale = a.norm();
    if err.is_finite() && err <= SVD_CHECK_TOL * scale.max(f64::MIN_POSITIVE) {
        return (u, s, v);
    }
    // nalgebra's bidiagonal QR occasionally misses on rank-deficient input.
    jacobi_svd(a)
}

/// One-sided Jacobi SVD on the tall orientation of `a`.
fn jacobi_svd(a: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let tall = a.nrows() >= a.ncols();
    let mut b = if tall { a.clone() } else { a.transpose() };
    let k = b.ncols();
    let mut w = Matrix::identity(k, k);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let alpha = b.column(p).norm_squared();
                let beta = b.column(q).norm_squared();
                let gamma = b.column(p).dot(&b.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = c * t;
                for m in [&mut b, &mut w] {
                    for i in 0..m.nrows() {
                        let (x, y) = (m[(i, p)], m[(i, q)]);
                        m[(i, p)] = c * x - sn * y;
                        m[(i, q)] = sn * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let s: Vec<f64> = (0..k).map(|j| b.column(j).norm()).collect();
    let s_max = s.iter().copied().fold(0.0, f64::max);
    let mut left = Matrix::zeros(b.nrows(), k);
    let mut basis = Vec::new();
    for (j, &sj) in s.iter().enumerate() {
        if sj > f64::EPSILON * s_max * k as f64 && sj > 0.0 {
            left.set_column(j, &(b.column(j) / sj));
            basis.push(j);
        }
    }
    complete_orthonormal(&mut left, &basis);
    if tall {
        (left, s, w)
    } else {
        (w, s, left)
    }
}

/// Fill the columns of `q` not listed in `filled` with an orthonormal
/// completion of the listed ones.
fn complete_orthonormal(q: &mut Matrix, filled: &[usize]) {
    let (rows, cols) = q.shape();
    if filled.len() == cols {
        return;
    }
    let mut basis: Vec<Vector> = filled.iter().map(|&j| q.column(j).into_owned()).collect();
    let mut candidates = (0..rows).map(|i| {
        let mut e = Vector::zeros(rows);
        e[i] = 1.0;
        e
    });
    for j in (0..cols).filter(|j| !filled.contains(j)) {
        for mut e in candidates.by_ref() {
            for _ in 0..2 {
                for b in &basis {
                    let d = b.dot(&e);
                    e.axpy(-d, b, 1.0);
                }
            }
            let norm = e.norm();
            if norm > 0.5 {
                e /= norm;
                q.set_column(j, &e);
                basis.push(e);
                break;
            }
        }
    }
}

fn svd_with_tol(a: &Matrix, rank_tol: f64) -> Result<SvdFactors> {
    check_finite(a, "svd input")?;
    let (rows, cols) = a.shape();
    let (u, values, v) = raw_svd(a);
    let k = rows.min(cols);

    // Neither path promises an order; sort descending and permute the
    // vectors with the values.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));

    let mut su = Matrix::zeros(rows, k);
    let mut sv = Matrix::zeros(cols, k);
    let mut s = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        su.set_column(dst, &u.column(src));
        sv.set_column(dst, &v.column(src));
        s.push(values[src].max(0.0));
    }
    let s_max = s.first().copied().unwrap_or(0.0);
    let threshold = rank_threshold(s_max, rows, cols, rank_tol);
    let numerical_rank = if s_max == 0.0 {
        0
    } else {
        s.iter().filter(|&&x| x > threshold).count()
    };
    Ok(SvdFactors {
        u: su,
        singular_values: s,
        v: sv,
        numerical_rank,
    })
}

/// Numerical rank under the default tolerance.
pub fn numerical_rank(a: &Matrix) -> Result<usize> {
    Ok(svd_thin(a)?.numerical_rank)
}

/// Moore–Penrose inverse from the thin SVD, truncating singular values
/// at the rank threshold.
pub fn pseudo_inverse(a: &Matrix, rank_tol: f64) -> Result<Matrix> {
    if !(rank_tol >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "rank_tol must be >= 0, got {rank_tol}"
        )));
    }
    let f = svd_with_tol(a, rank_tol)?;
    Ok(pinv_from_svd(&f, a.nrows(), a.ncols()))
}

pub(crate) fn pinv_from_svd(f: &SvdFactors, rows: usize, cols: usize) -> Matrix {
    let r = f.numerical_rank;
    if r == 0 {
        return Matrix::zeros(cols, rows);
    }
    let mut v = f.v.columns(0, r).into_owned();
    for j in 0..r {
        v.column_mut(j).scale_mut(1.0 / f.singular_values[j]);
    }
    v * f.u.columns(0, r).transpose()
}

/// `argmin { ||b|| : x b = y }` in the least-squares sense, i.e. `x^+ y`.
pub fn min_norm_solve(x: &Matrix, y: &Vector) -> Result<Vector> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionError(format!(
            "design has {} rows but response has length {}",
            x.nrows(),
            y.len()
        )));
    }
    Ok(pseudo_inverse(x, DEFAULT_RANK_TOL)? * y)
}

/// Symmetric eigendecomposition with eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct SymmetricSpectrum {
    pub values: Vec<f64>,
    /// Column `i` pairs with `values[i]`.
    pub vectors: Matrix,
}

impl SymmetricSpectrum {
    pub fn of(m: &Matrix) -> Result<Self> {
        check_finite(m, "symmetric input")?;
        check_symmetric(m)?;
        let sym = (m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let n = m.nrows();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let mut vectors = Matrix::zeros(n, n);
        let mut values = Vec::with_capacity(n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
            values.push(eig.eigenvalues[src]);
        }
        Ok(Self { values, vectors })
    }

    /// `V f(D) V^T`, symmetrized.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let mut scaled = self.vectors.clone();
        for (j, &l) in self.values.iter().enumerate() {
            scaled.column_mut(j).scale_mut(f(l));
        }
        let out = scaled * self.vectors.transpose();
        (&out + out.transpose()) * 0.5
    }

    pub fn is_positive_definite(&self) -> bool {
        let max = self.values.first().copied().unwrap_or(0.0);
        let min = self.values.last().copied().unwrap_or(0.0);
        max > 0.0 && min > 1e-12 * max
    }
}

/// Symmetric square root through the eigendecomposition.
pub fn spd_sqrt(m: &Matrix) -> Result<Matrix> {
    let spec = SymmetricSpectrum::of(m).map_err(|e| match e {
        Error::NotSymmetric { asymmetry } => {
            Error::not_spd(format!("input is not symmetric (asymmetry {asymmetry:e})"))
        }
        other => other,
    })?;
    let min = spec.values.last().copied().unwrap_or(0.0);
    if !(min > 0.0) {
        return Err(Error::not_spd(format!("smallest eigenvalue {min:e} is not positive")));
    }
    Ok(spec.apply(f64::sqrt))
}

pub fn esd(a: &Matrix) -> Result<SpectralDistribution> {
    let mut eigenvalues = SymmetricSpectrum::of(a)?.values;
    eigenvalues.reverse();
    Ok(SpectralDistribution {
        normalization: eigenvalues.len(),
        eigenvalues,
    })
}

/// `Tr((x^T x)^+ sigma)` for a full-row-rank design.
pub fn trace_weighted_pinv(x: &Matrix, sigma: &Matrix) -> Result<f64> {
    if sigma.nrows() != x.ncols() || sigma.ncols() != x.ncols() {
        return Err(Error::DimensionError(format!(
            "weight is {}x{} but design has {} columns",
            sigma.nrows(),
            sigma.ncols(),
            x.ncols()
        )));
    }
    let pinv = full_row_rank_pinv(x)?;
    // (X^T X)^+ = X^+ X^+^T, so the trace is <X^+, sigma X^+>_F.
    let weighted = sigma * &pinv;
    Ok(frobenius_inner(&pinv, &weighted).max(0.0))
}

/// Pseudoinverse of `x`, failing unless `rank(x) = rows(x)`.
pub fn full_row_rank_pinv(x: &Matrix) -> Result<Matrix> {
    let f = svd_thin(x)?;
    if f.numerical_rank < x.nrows() {
        return Err(Error::RankDeficient {
            rank: f.numerical_rank,
            expected: x.nrows(),
        });
    }
    Ok(pinv_from_svd(&f, x.nrows(), x.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn svd_identity_and_diagonal() {
        let f = svd_thin(&Matrix::identity(3, 3)).unwrap();
        assert_eq!(f.singular_values, vec![1.0, 1.0, 1.0]);
        assert_eq!(f.numerical_rank, 3);

        let d = Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let f = svd_thin(&d).unwrap();
        assert!((f.singular_values[0] - 3.0).abs() < 1e-14);
        assert!((f.singular_values[1] - 2.0).abs() < 1e-14);
        for m in [&f.u, &f.v] {
            assert!((m[(0, 0)].abs()).abs() < 1e-14 && (m[(0, 1)].abs() - 1.0).abs() < 1e-14);
        }
        assert!(rel_err(&f.reconstruct(), &d) < 1e-14);
    }

    #[test]
    fn svd_random_wide_reconstructs() {
        let a = gaussian(4, 6, 7);
        let f = svd_thin(&a).unwrap();
        assert_eq!(f.numerical_rank, 4);
        assert!(rel_err(&f.reconstruct(), &a) < 1e-10);
        assert!(f.singular_values.windows(2).all(|w| w[0] >= w[1]));
        let utu = f.u.transpose() * &f.u;
        let vtv = f.v.transpose() * &f.v;
        assert!((utu - Matrix::identity(4, 4)).amax() < 1e-10);
        assert!((vtv - Matrix::identity(4, 4)).amax() < 1e-10);
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut a = Matrix::identity(2, 2);
        a[(1, 0)] = f64::NAN;
        assert!(matches!(svd_thin(&a), Err(Error::InvalidMatrix(_))));
    }

    #[test]
    fn pinv_examples() {
        let a = Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let p = pseudo_inverse(&a, DEFAULT_RANK_TOL).unwrap();
        assert!((p - Matrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.25])).amax() < 1e-15);

        let z = Matrix::zeros(3, 5);
        let p = pseudo_inverse(&z, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(p.shape(), (5, 3));
        assert_eq!(p.amax(), 0.0);

        let r1 = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let p = pseudo_inverse(&r1, DEFAULT_RANK_TOL).unwrap();
        assert!((&p - &r1 / 25.0).amax() < 1e-14);
        // Penrose conditions.
        assert!((&r1 * &p * &r1 - &r1).amax() < 1e-12);
        assert!((&p * &r1 * &p - &p).amax() < 1e-12);
        let ap = &r1 * &p;
        let pa = &p * &r1;
        assert!((&ap - ap.transpose()).amax() < 1e-12);
        assert!((&pa - pa.transpose()).amax() < 1e-12);
    }

    #[test]
    fn pinv_rejects_negative_tolerance() {
        assert!(pseudo_inverse(&Matrix::identity(2, 2), -1.0).is_err());
    }

    #[test]
    fn min_norm_solve_examples() {
        let y = Vector::from_vec(vec![1.0, -2.0, 3.5]);
        let b = min_norm_solve(&Matrix::identity(3, 3), &y).unwrap();
        assert!((b - &y).amax() < 1e-15);

        let x = Matrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = min_norm_solve(&x, &Vector::from_vec(vec![2.0])).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-14 && (b[1] - 1.0).abs() < 1e-14);

        let err = min_norm_solve(&x, &Vector::zeros(2)).unwrap_err();
        assert!(matches!(err, Error::DimensionError(_)));
    }

    #[test]
    fn min_norm_beats_null_space_perturbations() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let x = gaussian(3, 6, 11);
        let y = gaussian(3, 1, 12).column(0).into_owned();
        let b = min_norm_solve(&x, &y).unwrap();
        assert!((&x * &b - &y).amax() < 1e-8);
        let proj = Matrix::identity(6, 6) - pseudo_inverse(&x, DEFAULT_RANK_TOL).unwrap() * &x;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let base = b.norm();
        for _ in 0..1000 {
            let z = Vector::from_fn(6, |_, _| StandardNormal.sample(&mut rng));
            let other = &b + &proj * z;
            assert!((&x * &other - &y).amax() < 1e-8);
            assert!(base <= other.norm() + 1e-12);
        }
    }

    #[test]
    fn spd_sqrt_examples() {
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![4.0, 9.0]));
        let r = spd_sqrt(&d).unwrap();
        assert!((r - Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 3.0]))).amax() < 1e-14);
        assert!((spd_sqrt(&Matrix::identity(4, 4)).unwrap() - Matrix::identity(4, 4)).amax() < 1e-14);

        // AR(1), sigma2 = 1, rho = 0.5, n = 4.
        let omega = Matrix::from_fn(4, 4, |i, j| 0.5_f64.powi((i as i32 - j as i32).abs()) / 0.75);
        let r = spd_sqrt(&omega).unwrap();
        assert!((&r - r.transpose()).amax() == 0.0);
        assert!((&r * &r - &omega).amax() < 1e-8);
    }

    #[test]
    fn spd_sqrt_rejects_bad_input() {
        let asym = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(spd_sqrt(&asym), Err(Error::NotSpd { .. })));
        let indef = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(spd_sqrt(&indef), Err(Error::NotSpd { .. })));
    }

    #[test]
    fn esd_examples() {
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![3.0, 1.0, 2.0]));
        let e = esd(&d).unwrap();
        for (got, want) in e.eigenvalues.iter().zip([1.0, 2.0, 3.0]) {
            assert!((got - want).abs() < 1e-14);
        }
        let e = esd(&Matrix::identity(5, 5)).unwrap();
        assert_eq!(e.cdf(0.999), 0.0);
        assert_eq!(e.cdf(1.0 + 1e-12), 1.0);

        let x = gaussian(6, 10, 3);
        let w = &x * x.transpose() / 6.0;
        let e = esd(&w).unwrap();
        assert!((e.mean() - trace(&(&x * x.transpose())) / 36.0).abs() < 1e-10);

        let asym = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(esd(&asym), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn esd_cdf_is_monotone() {
        let x = gaussian(5, 9, 21);
        let e = esd(&(&x * x.transpose())).unwrap();
        let mut last = 0.0;
        for k in -10..200 {
            let c = e.cdf(k as f64 * 0.5);
            assert!(c >= last);
            last = c;
        }
        assert_eq!(e.cdf(f64::NEG_INFINITY), 0.0);
        assert_eq!(e.cdf(f64::INFINITY), 1.0);
    }

    #[test]
    fn trace_weighted_pinv_examples() {
        let x = gaussian(4, 9, 5);
        let t = trace_weighted_pinv(&x, &Matrix::identity(9, 9)).unwrap();
        let inv = (&x * x.transpose()).try_inverse().unwrap();
        assert!((t - trace(&inv)).abs() < 1e-10 * t);

        // Orthonormal rows.
        let q = svd_thin(&x).unwrap().v.transpose();
        let t = trace_weighted_pinv(&q, &Matrix::identity(9, 9)).unwrap();
        assert!((t - 4.0).abs() < 1e-10);

        // Against ||S X^+||_F^2.
        let x = gaussian(5, 10, 8);
        let g = gaussian(10, 10, 9);
        let sigma = &g * g.transpose() + Matrix::identity(10, 10) * 0.1;
        let s = spd_sqrt(&sigma).unwrap();
        let direct = frobenius_norm_sq(&(&s * pseudo_inverse(&x, DEFAULT_RANK_TOL).unwrap()));
        let t = trace_weighted_pinv(&x, &sigma).unwrap();
        assert!((t - direct).abs() < 1e-8 * direct);
    }

    #[test]
    fn trace_weighted_pinv_needs_full_row_rank() {
        let mut x = gaussian(3, 5, 1);
        let row = x.row(0).into_owned();
        x.set_row(2, &row);
        let err = trace_weighted_pinv(&x, &Matrix::identity(5, 5)).unwrap_err();
        assert_eq!(err, Error::RankDeficient { rank: 2, expected: 3 });
    }

    #[test]
    fn compensated_sum_recovers_cancellation() {
        let vals = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(vals), 2.0);
    }

    #[test]
    #[allow(clippy::excessive_precision)]
    fn rank_deficient_svd_reconstructs() {
        // nalgebra's SVD returns factors that miss this rank-2 matrix by 1e-2.
        let a = Matrix::from_row_slice(
            5,
            4,
            &[
                2.55424837486337664,
                -2.54359109038263798,
                2.35259940259556632,
                1.47767771121918834,
                -0.18793289436501287,
                -0.41265366674714565,
                -1.13120479412028052,
                -0.62492019636401297,
                0.99049535698049329,
                -2.04647490564894818,
                -0.78109608269600628,
                -0.33932725361522420,
                -0.78611930652322715,
                2.80266897701827666,
                2.50236453067899633,
                1.28350755262563565,
                0.21192230477548432,
                -0.72896214255919600,
                -0.63212640996823855,
                -0.32313132857852361,
            ],
        );
        let f = svd_thin(&a).unwrap();
        assert!((f.reconstruct() - &a).norm() < 1e-12 * a.norm());
        assert!((f.u.transpose() * &f.u - Matrix::identity(4, 4)).amax() < 1e-12);
        assert!((f.v.transpose() * &f.v - Matrix::identity(4, 4)).amax() < 1e-12);
        let g = pseudo_inverse(&a, DEFAULT_RANK_TOL).unwrap();
        assert!((&a * &g * &a - &a).norm() < 1e-12 * a.norm());
    }

    #[test]
    fn jacobi_matches_nalgebra_on_generic_input() {
        let mut rng = crate::sampler::RandomStream::new(5, 5);
        for (r, c) in [(3, 7), (7, 3), (6, 6), (1, 4)] {
            let a = rng.gaussian_matrix(r, c);
            let (u, s, v) = jacobi_svd(&a);
            let mut us = u.clone();
            for (j, sj) in s.iter().enumerate() {
                us.column_mut(j).scale_mut(*sj);
            }
            assert!((us * v.transpose() - &a).norm() < 1e-12 * a.norm());
            let mut js = s.clone();
            js.sort_by(|x, y| y.total_cmp(x));
            let ns = svd_thin(&a).unwrap().singular_values;
            for (x, y) in js.iter().zip(&ns) {
                assert!((x - y).abs() < 1e-12 * ns[0]);
            }
        }
    }
}
