//! Stationary Gaussian AR(P) processes parametrized by partial autocorrelations.
//!
//! A process `A_t = φ₁A_{t−1} + … + φ_P A_{t−P} + e_t` with `e_t ~ N(0, σ²)` is
//! stationary exactly when every partial autocorrelation lies in (−1, 1). The
//! Durbin–Levinson recursion maps between the two parametrizations.
//!
//! `σ²` is always the *innovation* variance; the marginal variance is
//! `σ² / Π(1 − ρ_k²)`.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::seeded_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArError {
    #[error("partial autocorrelation {index} = {value} is outside (-1, 1)")]
    InvalidPacf { index: usize, value: f64 },
    #[error("AR coefficients are not stationary (implied pacf {value} at lag {lag})")]
    NonStationaryAr { lag: usize, value: f64 },
    #[error("innovation variance must be positive and finite, got {0}")]
    InvalidVariance(f64),
    #[error("covariance of length {0} is not numerically positive definite")]
    NotPositiveDefinite(usize),
    #[error("series length must be at least 1")]
    EmptySeries,
}

/// Partial autocorrelations `ρ₁..ρ_P`, each strictly inside (−1, 1).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PacfVector(Vec<f64>);

impl PacfVector {
    pub fn new(rho: Vec<f64>) -> Result<Self, ArError> {
        for (index, &value) in rho.iter().enumerate() {
            if !(value.is_finite() && value.abs() < 1.0) {
                return Err(ArError::InvalidPacf { index, value });
            }
        }
        Ok(Self(rho))
    }

    pub fn zeros(order: usize) -> Self {
        Self(vec![0.0; order])
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Replaces one element; the caller keeps it inside (−1, 1).
    pub(crate) fn set(&mut self, k: usize, value: f64) {
        debug_assert!(value.abs() < 1.0);
        self.0[k] = value;
    }

    /// `Π(1 − ρ_k²)`: the innovation variance of a unit-marginal process.
    pub fn innovation_fraction(&self) -> f64 {
        self.0.iter().map(|r| 1.0 - r * r).product()
    }
}

impl TryFrom<Vec<f64>> for PacfVector {
    type Error = ArError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        PacfVector::new(v)
    }
}

impl From<PacfVector> for Vec<f64> {
    fn from(p: PacfVector) -> Self {
        p.0
    }
}

/// Forward Durbin–Levinson: `φ_{k,k} = ρ_k`, `φ_{k,j} = φ_{k−1,j} − ρ_k φ_{k−1,k−j}`.
pub fn pacf_to_ar(rho: &PacfVector) -> Vec<f64> {
    let mut phi: Vec<f64> = Vec::with_capacity(rho.order());
    for &r in rho.as_slice() {
        let prev = phi.clone();
        let k = prev.len();
        for j in 0..k {
            phi[j] = prev[j] - r * prev[k - 1 - j];
        }
        phi.push(r);
    }
    phi
}

/// Inverse Durbin–Levinson recursion.
pub fn ar_to_pacf(phi: &[f64]) -> Result<PacfVector, ArError> {
    let p = phi.len();
    let mut rho = vec![0.0; p];
    let mut cur = phi.to_vec();
    for k in (1..=p).rev() {
        let r = cur[k - 1];
        if !(r.is_finite() && r.abs() < 1.0) {
            return Err(ArError::NonStationaryAr { lag: k, value: r });
        }
        rho[k - 1] = r;
        let denom = (1.0 - r) * (1.0 + r);
        let next: Vec<f64> = (0..k - 1).map(|j| (cur[j] + r * cur[k - 2 - j]) / denom).collect();
        cur = next;
    }
    PacfVector::new(rho)
}

/// Autocorrelations `r(0..n)` of the stationary process with the given pacf.
pub fn autocorrelations(rho: &PacfVector, n: usize) -> Vec<f64> {
    let p = rho.order();
    let mut r = vec![0.0; n.max(1)];
    r[0] = 1.0;
    let mut phi: Vec<f64> = Vec::with_capacity(p);
    let mut v = 1.0;
    for k in 1..n {
        if k <= p {
            let rk = rho.as_slice()[k - 1];
            let pred: f64 = (1..k).map(|j| phi[j - 1] * r[k - j]).sum();
            r[k] = pred + rk * v;
            let prev = phi.clone();
            for j in 0..k - 1 {
                phi[j] = prev[j] - rk * prev[k - 2 - j];
            }
            phi.push(rk);
            v *= 1.0 - rk * rk;
        } else {
            if phi.len() < p {
                // Lags not yet reached by the series still enter the recursion.
                phi = pacf_to_ar(rho);
            }
            r[k] = (1..=p).map(|j| phi[j - 1] * r[k - j]).sum();
        }
    }
    r.truncate(n);
    r
}

/// A validated AR specification: coefficients, their pacf, innovation variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArSpec {
    pacf: PacfVector,
    phi: Vec<f64>,
    sigma2: f64,
}

impl ArSpec {
    pub fn new(phi: Vec<f64>, sigma2: f64) -> Result<Self, ArError> {
        let pacf = ar_to_pacf(&phi)?;
        Self::from_pacf(pacf, sigma2)
    }

    pub fn from_pacf(pacf: PacfVector, sigma2: f64) -> Result<Self, ArError> {
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(ArError::InvalidVariance(sigma2));
        }
        let phi = pacf_to_ar(&pacf);
        Ok(Self { pacf, phi, sigma2 })
    }

    pub fn white_noise(sigma2: f64) -> Result<Self, ArError> {
        Self::from_pacf(PacfVector::default(), sigma2)
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn pacf(&self) -> &PacfVector {
        &self.pacf
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// `γ(0)`.
    pub fn marginal_variance(&self) -> f64 {
        self.sigma2 / self.pacf.innovation_fraction()
    }

    pub fn autocovariances(&self, n: usize) -> Vec<f64> {
        let g0 = self.marginal_variance();
        autocorrelations(&self.pacf, n).into_iter().map(|r| r * g0).collect()
    }
}

fn toeplitz(acv: &[f64]) -> DMatrix<f64> {
    let n = acv.len();
    DMatrix::from_fn(n, n, |i, j| acv[i.abs_diff(j)])
}

/// Covariance of `n` consecutive values of the stationary process.
pub fn stationary_covariance(spec: &ArSpec, n: usize) -> Result<DMatrix<f64>, ArError> {
    if n == 0 {
        return Err(ArError::EmptySeries);
    }
    Ok(toeplitz(&spec.autocovariances(n)))
}

/// Cholesky-factored correlation structure of a unit-innovation AR process
/// over a fixed length. Scaling by an innovation variance is applied at use.
#[derive(Debug, Clone)]
pub struct ArCorrelation {
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl ArCorrelation {
    pub fn new(pacf: &PacfVector, n: usize) -> Result<Self, ArError> {
        if n == 0 {
            return Err(ArError::EmptySeries);
        }
        let g0 = 1.0 / pacf.innovation_fraction();
        if !g0.is_finite() {
            return Err(ArError::NotPositiveDefinite(n));
        }
        let acv: Vec<f64> = autocorrelations(pacf, n).into_iter().map(|r| r * g0).collect();
        let chol = Cholesky::new(toeplitz(&acv)).ok_or(ArError::NotPositiveDefinite(n))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(ArError::NotPositiveDefinite(n));
        }
        Ok(Self { chol, log_det })
    }

    pub fn len(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `ln det Γ` for the unit-innovation covariance `Γ`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `xᵀ Γ⁻¹ x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let b = DVector::from_column_slice(x);
        let l = self.chol.l_dirty();
        let z = l.solve_lower_triangular(&b).expect("Cholesky factor has a positive diagonal");
        z.norm_squared()
    }

    /// `Γ⁻¹`.
    pub fn precision(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let l = self.chol.l();
        &l * l.transpose()
    }

    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Gaussian log-density of `x` under covariance `sigma2 · Γ`.
    pub fn log_density(&self, x: &[f64], sigma2: f64) -> f64 {
        let n = x.len() as f64;
        -0.5 * (n * (2.0 * PI * sigma2).ln() + self.log_det + self.quad_form(x) / sigma2)
    }

    /// One draw with covariance `sigma2 · Γ`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, sigma2: f64) -> Vec<f64> {
        let n = self.len();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = self.chol.l_dirty().lower_triangle() * z * sigma2.sqrt();
        x.iter().copied().collect()
    }
}

/// Mean-zero Gaussian log-density of a length-n stretch of the process.
pub fn log_density(x: &[f64], spec: &ArSpec) -> Result<f64, ArError> {
    let corr = ArCorrelation::new(spec.pacf(), x.len())?;
    Ok(corr.log_density(x, spec.sigma2()))
}

/// Exact draw of `n` consecutive values from the stationary process: the first
/// `min(n, P)` values jointly from the stationary law, the rest by recursion.
pub fn sample(spec: &ArSpec, n: usize, seed: u64) -> Result<Vec<f64>, ArError> {
    let mut rng = seeded_rng(seed);
    sample_with(spec, n, &mut rng)
}

pub fn sample_with<R: Rng + ?Sized>(spec: &ArSpec, n: usize, rng: &mut R) -> Result<Vec<f64>, ArError> {
    let p = spec.phi().len();
    let head = n.min(p.max(1));
    let corr = ArCorrelation::new(spec.pacf(), head)?;
    let mut x = corr.sample(rng, spec.sigma2());
    let sd = spec.sigma2().sqrt();
    x.reserve(n - head);
    for t in head..n {
        let pred: f64 = (1..=p).map(|j| spec.phi()[j - 1] * x[t - j]).sum();
        let e: f64 = rng.sample(StandardNormal);
        x.push(pred + sd * e);
    }
    Ok(x)
}
