//! Bijective link between S² and ℝ²: spherical angles followed by a scaled
//! logit on each angle.
//!
//! The scaled logit `logit((θ + π) / 2π)` equals `2·atanh(θ / π)`, and its
//! inverse is `π·tanh(θ̃ / 2)`. Both forms are used here because they keep full
//! relative precision near the seam at θ = ±π and the poles.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::UnitVector3;

/// Default clamp applied to the scaled logit arguments.
pub const LINK_EPS: f64 = 1e-10;

/// Azimuth in (−π, π] and elevation in [−π/2, π/2].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalAngles {
    pub theta: f64,
    pub phi: f64,
}

/// Unbounded link-space coordinates `(θ̃, φ̃)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LinkedCoords {
    pub theta_tilde: f64,
    pub phi_tilde: f64,
}

impl LinkedCoords {
    pub fn new(theta_tilde: f64, phi_tilde: f64) -> Self {
        Self { theta_tilde, phi_tilde }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.theta_tilde, self.phi_tilde]
    }

    pub fn from_array(a: [f64; 2]) -> Self {
        Self::new(a[0], a[1])
    }
}

/// Two-argument arctangent with `atan2(0, 0) = 0`.
fn atan2_or_zero(y: f64, x: f64) -> f64 {
    if y == 0.0 && x == 0.0 {
        0.0
    } else {
        y.atan2(x)
    }
}

pub fn cart_to_angles(v: &UnitVector3) -> SphericalAngles {
    let z = v.z().clamp(-1.0, 1.0);
    let mut theta = atan2_or_zero(v.y(), v.x());
    // atan2 returns −π for (x<0, y=−0); fold onto the half-open range.
    if theta <= -PI {
        theta = PI;
    }
    let phi = atan2_or_zero(z, (1.0 - z * z).max(0.0).sqrt());
    SphericalAngles { theta, phi }
}

pub fn angles_to_cart(a: &SphericalAngles) -> UnitVector3 {
    let (st, ct) = a.theta.sin_cos();
    let (sp, cp) = a.phi.sin_cos();
    let v = Vector3::new(cp * ct, cp * st, sp);
    UnitVector3::from_vector(v).expect("spherical angles map to a unit vector")
}

/// `logit((u + 1) / 2)` for `u` in [−1, 1], with the argument clamped to
/// `[eps, 1 − eps]`.
fn scaled_logit(u: f64, eps: f64) -> f64 {
    let bound = 1.0 - 2.0 * eps;
    2.0 * u.clamp(-bound, bound).atanh()
}

pub fn link(v: &UnitVector3) -> LinkedCoords {
    link_with_eps(v, LINK_EPS)
}

pub fn link_with_eps(v: &UnitVector3, eps: f64) -> LinkedCoords {
    let a = cart_to_angles(v);
    angles_to_link(&a, eps)
}

fn angles_to_link(a: &SphericalAngles, eps: f64) -> LinkedCoords {
    LinkedCoords { theta_tilde: scaled_logit(a.theta / PI, eps), phi_tilde: scaled_logit(a.phi / FRAC_PI_2, eps) }
}

pub fn link_to_angles(c: &LinkedCoords) -> SphericalAngles {
    SphericalAngles { theta: PI * (0.5 * c.theta_tilde).tanh(), phi: FRAC_PI_2 * (0.5 * c.phi_tilde).tanh() }
}

pub fn inverse_link(c: &LinkedCoords) -> UnitVector3 {
    angles_to_cart(&link_to_angles(c))
}

/// Inverse link as a raw vector together with its partial derivatives with
/// respect to `θ̃` and `φ̃`.
pub(crate) fn inverse_link_with_jacobian(c: &LinkedCoords) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let tt = (0.5 * c.theta_tilde).tanh();
    let tp = (0.5 * c.phi_tilde).tanh();
    let theta = PI * tt;
    let phi = FRAC_PI_2 * tp;
    let dtheta = 0.5 * PI * (1.0 - tt * tt);
    let dphi = 0.25 * PI * (1.0 - tp * tp);
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    let x = Vector3::new(cp * ct, cp * st, sp);
    let dx_dtheta = Vector3::new(-cp * st, cp * ct, 0.0) * dtheta;
    let dx_dphi = Vector3::new(-sp * ct, -sp * st, cp) * dphi;
    (x, dx_dtheta, dx_dphi)
}

/// Scaled logit of one azimuth and `p − 2` elevations, for points on S^{p−1}.
pub fn general_p_link(theta: f64, phis: &[f64]) -> Vec<f64> {
    std::iter::once(scaled_logit(theta / PI, LINK_EPS))
        .chain(phis.iter().map(|&phi| scaled_logit(phi / FRAC_PI_2, LINK_EPS)))
        .collect()
}
