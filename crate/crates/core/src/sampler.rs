//! Seeded generation of every stochastic object: Haar rotations, Gaussian
//! designs, correlated noise and random-effects coefficients.
//!
//! Reproducibility rests on [`RandomStream`]: a ChaCha generator keyed by
//! `(seed, stream_id)`. Parallel work never shares a stream; it derives
//! independent substreams with [`RandomStream::substream`].

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::models::{FeatureModel, NoiseCovariance};

#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Child stream determined only by `(seed, stream_id, index)`; the
    /// parent's position is irrelevant.
    pub fn substream(&self, index: u64) -> RandomStream {
        let id = splitmix64(self.stream_id ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)));
        RandomStream::new(self.seed, id)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn uniform(&mut self) -> f64 {
        use rand::Rng;
        self.rng.random::<f64>()
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        // Filled row by row so the draw order does not depend on storage layout.
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.standard_normal();
            }
        }
        m
    }

    pub fn gaussian_vector(&mut self, len: usize) -> Vector {
        Vector::from_fn(len, |_, _| self.standard_normal())
    }
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// How the orthogonal factor is extracted from a Gaussian matrix.
///
/// Only `SignFixed` yields Haar measure. `PlainQr` is the unnormalized
/// Householder factor in the LAPACK sign convention (`R_jj = -sign(pivot) * norm`,
/// no reflector on the last column) and exists as a negative control for
/// the verification suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HaarMethod {
    #[default]
    SignFixed,
    PlainQr,
}

pub fn haar_orthogonal(n: usize, rng: &mut RandomStream) -> Matrix {
    haar_orthogonal_with(n, rng, HaarMethod::SignFixed)
}

pub fn haar_orthogonal_with(n: usize, rng: &mut RandomStream, method: HaarMethod) -> Matrix {
    assert!(n >= 1, "orthogonal dimension must be positive");
    let g = rng.gaussian_matrix(n, n);
    match method {
        HaarMethod::SignFixed => {
            let qr = g.qr();
            let mut q = qr.q();
            let r = qr.r();
            for j in 0..n {
                if r[(j, j)] < 0.0 {
                    q.column_mut(j).neg_mut();
                }
            }
            q
        }
        HaarMethod::PlainQr => householder_q(g),
    }
}

fn householder_q(mut a: Matrix) -> Matrix {
    let n = a.nrows();
    let mut q = Matrix::identity(n, n);
    for k in 0..n.saturating_sub(1) {
        let x = a.view((k, k), (n - k, 1)).clone_owned();
        let norm = x.norm();
        if norm == 0.0 {
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x;
        v[0] -= alpha;
        let vn = v.norm();
        if vn == 0.0 {
            continue;
        }
        v /= vn;
        let mut block = a.view_mut((k, k), (n - k, n - k));
        let w = v.transpose() * &block;
        block -= &v * w * 2.0;
        let mut qcols = q.view_mut((0, k), (n, n - k));
        let u = &qcols * &v;
        qcols -= u * v.transpose() * 2.0;
    }
    q
}

/// Source of left-spherical design matrices.
pub trait DesignSampler: Sync {
    fn sample(&self, n: usize, features: &FeatureModel, rng: &mut RandomStream) -> Matrix;
}

/// Rows i.i.d. `N(0, Sigma)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussianDesign;

impl DesignSampler for GaussianDesign {
    fn sample(&self, n: usize, features: &FeatureModel, rng: &mut RandomStream) -> Matrix {
        gaussian_design(n, features, rng)
    }
}

/// `x_i = S z_i` with `z_i` standard normal; since `S` is symmetric the
/// design is `Z S`.
pub fn gaussian_design(n: usize, features: &FeatureModel, rng: &mut RandomStream) -> Matrix {
    let z = rng.gaussian_matrix(n, features.p());
    if features.is_isotropic() {
        z
    } else {
        z * features.sqrt()
    }
}

/// `eps = T z`, so `Cov(eps) = Omega`.
pub fn sample_noise(noise: &NoiseCovariance, rng: &mut RandomStream) -> Vector {
    let z = rng.gaussian_vector(noise.n());
    noise.sqrt() * z
}

/// `n_draws` noise vectors as the columns of an `n x n_draws` matrix.
pub fn sample_noise_matrix(noise: &NoiseCovariance, n_draws: usize, rng: &mut RandomStream) -> Matrix {
    let mut z = Matrix::zeros(noise.n(), n_draws);
    for j in 0..n_draws {
        for i in 0..noise.n() {
            z[(i, j)] = rng.standard_normal();
        }
    }
    noise.sqrt() * z
}

fn check_r2(r2: f64) -> Result<()> {
    if !(r2 > 0.0) || !r2.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "signal strength must be positive, got {r2}"
        )));
    }
    Ok(())
}

/// `beta ~ N(0, (r2 / p) I)`, so `E[beta beta^T] = r2 I / p`.
pub fn sample_beta(p: usize, r2: f64, rng: &mut RandomStream) -> Result<Vector> {
    check_r2(r2)?;
    let scale = (r2 / p as f64).sqrt();
    Ok(rng.gaussian_vector(p) * scale)
}

/// `beta = S^{-1} w` with `w ~ N(0, (r_sigma2 / p) I)`, so that
/// `E[S beta (S beta)^T] = r_sigma2 I / p`.
pub fn sample_beta_weighted(features: &FeatureModel, r_sigma2: f64, rng: &mut RandomStream) -> Result<Vector> {
    let w = sample_beta(features.p(), r_sigma2, rng)?;
    if features.is_isotropic() {
        Ok(w)
    } else {
        Ok(features.inv_sqrt() * w)
    }
}

/// One simulation draw `y = X beta + eps`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Matrix,
    pub beta: Vector,
    pub eps: Vector,
    pub y: Vector,
}

impl Dataset {
    pub fn draw(features: &FeatureModel, noise: &NoiseCovariance, r2: f64, rng: &mut RandomStream) -> Result<Self> {
        let n = noise.n();
        let x = gaussian_design(n, features, rng);
        let beta = sample_beta(features.p(), r2, rng)?;
        let eps = sample_noise(noise, rng);
        let y = &x * &beta + &eps;
        Ok(Self { x, beta, eps, y })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_overparameterized(&self) -> bool {
        self.n() < self.p()
    }
}
