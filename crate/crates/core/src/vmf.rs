//! The von Mises–Fisher distribution on S².

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::UnitVector3;
use crate::rng::seeded_rng;

/// `ln(1 / 4π)`: the log-density of the uniform law on S².
pub const LOG_UNIFORM_DENSITY: f64 = -2.531_024_246_969_290_7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VmfError {
    #[error("concentration must be finite and non-negative, got {0}")]
    InvalidKappa(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VmfParams {
    pub mu: UnitVector3,
    pub kappa: f64,
}

impl VmfParams {
    pub fn new(mu: UnitVector3, kappa: f64) -> Result<Self, VmfError> {
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(VmfError::InvalidKappa(kappa));
        }
        Ok(Self { mu, kappa })
    }

    pub fn log_density(&self, x: &UnitVector3) -> f64 {
        log_density(x, self)
    }

    /// Draws one point using the closed-form inverse CDF of `w = μᵀx`.
    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> UnitVector3 {
        let u: f64 = rng.random();
        let psi = Uniform::new(0.0, 2.0 * PI).expect("valid range").sample(rng);
        let w = sample_cosine(self.kappa, u);
        let s = (1.0 - w * w).max(0.0).sqrt();
        let (e1, e2) = orthonormal_complement(self.mu.as_vector());
        let v = self.mu.as_vector() * w + (e1 * psi.cos() + e2 * psi.sin()) * s;
        UnitVector3::from_vector(v).expect("vMF draw is a unit vector")
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<UnitVector3> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }
}

/// `ln C₃(κ) = ln κ − κ − ln 2π − ln(1 − e^{−2κ})`.
pub fn log_normalizer_3(kappa: f64) -> f64 {
    if kappa < 1e-12 {
        // ln(κ / (1 − e^{−2κ})) = −ln 2 + κ + O(κ²); the κ terms cancel.
        return LOG_UNIFORM_DENSITY;
    }
    kappa.ln() - kappa - (2.0 * PI).ln() - (-(-2.0 * kappa).exp_m1()).ln()
}

/// Log-density with respect to surface measure on S².
pub fn log_density(x: &UnitVector3, p: &VmfParams) -> f64 {
    log_density_from_cosine(p.mu.dot(x), p.kappa)
}

/// Log-density written in terms of the cosine `μᵀx`.
pub fn log_density_from_cosine(cosine: f64, kappa: f64) -> f64 {
    if kappa < 1e-12 {
        return LOG_UNIFORM_DENSITY;
    }
    kappa.ln() - (2.0 * PI).ln() - (-(-2.0 * kappa).exp_m1()).ln() + kappa * (cosine - 1.0)
}

/// Mean of `μᵀx`, `coth κ − 1/κ`.
pub fn mean_cosine(kappa: f64) -> f64 {
    if kappa < 1e-4 {
        return kappa / 3.0;
    }
    1.0 / kappa.tanh() - 1.0 / kappa
}

/// Inverse CDF of the cosine: `w = 1 + κ⁻¹ ln(u + (1 − u) e^{−2κ})`.
fn sample_cosine(kappa: f64, u: f64) -> f64 {
    if kappa < 1e-12 {
        return 2.0 * u - 1.0;
    }
    let w = 1.0 + ((1.0 - u) * (-2.0 * kappa).exp_m1()).ln_1p() / kappa;
    w.clamp(-1.0, 1.0)
}

/// Two unit vectors completing `mu` to a right-handed orthonormal frame.
fn orthonormal_complement(mu: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if mu.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = (helper - mu * mu.dot(&helper)).normalize();
    let e2 = mu.cross(&e1);
    (e1, e2)
}

/// Deterministic batch of `n` draws from a seed.
pub fn sample(p: &VmfParams, n: usize, seed: u64) -> Vec<UnitVector3> {
    let mut rng = seeded_rng(seed);
    p.sample_n(&mut rng, n)
}
