//! Unit vectors on S², separation angles, Cayley-parametrized rotations and
//! the tangent-normal decomposition.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this norm the tangential part of a decomposition is treated as zero.
pub const DEGENERATE_TOL: f64 = 1e-9;

/// Determinant of `I + Q` below which the inverse Cayley map is refused.
const CAYLEY_SINGULAR_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("cannot normalize vector with norm {0:e}")]
    ZeroVector(f64),
    #[error("non-finite vector component")]
    NonFinite,
    #[error("rotation has an eigenvalue at -1 (det(I+Q) = {0:e}); no Cayley parameters exist")]
    RotationAtCayleySingularity(f64),
}

/// A point on the unit sphere S².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 3]", try_from = "[f64; 3]")]
pub struct UnitVector3(Vector3<f64>);

impl UnitVector3 {
    /// Normalizes `(x, y, z)`; fails for (numerically) zero or non-finite input.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        Self::from_vector(Vector3::new(x, y, z))
    }

    pub fn from_vector(v: Vector3<f64>) -> Result<Self, GeometryError> {
        if !v.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let n = v.norm();
        if n < 1e-300 {
            return Err(GeometryError::ZeroVector(n));
        }
        Ok(Self(v / n))
    }

    /// Wraps a vector the caller guarantees is already unit length.
    pub(crate) fn from_unit_unchecked(v: Vector3<f64>) -> Self {
        Self(v)
    }

    pub fn x_axis() -> Self {
        Self(Vector3::x())
    }

    pub fn y_axis() -> Self {
        Self(Vector3::y())
    }

    pub fn z_axis() -> Self {
        Self(Vector3::z())
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }

    pub fn y(&self) -> f64 {
        self.0.y
    }

    pub fn z(&self) -> f64 {
        self.0.z
    }

    pub fn as_vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.0.x, self.0.y, self.0.z]
    }

    pub fn dot(&self, other: &UnitVector3) -> f64 {
        self.0.dot(&other.0)
    }

    pub fn neg(&self) -> UnitVector3 {
        UnitVector3(-self.0)
    }

    /// Applies a rotation; the result is re-normalized to absorb rounding.
    pub fn rotate(&self, q: &Rotation3) -> UnitVector3 {
        let v = q.matrix() * self.0;
        UnitVector3(v / v.norm())
    }

    /// Applies the transpose (inverse) of a rotation.
    pub fn rotate_inverse(&self, q: &Rotation3) -> UnitVector3 {
        let v = q.matrix().tr_mul(&self.0);
        UnitVector3(v / v.norm())
    }
}

impl From<UnitVector3> for [f64; 3] {
    fn from(u: UnitVector3) -> Self {
        u.to_array()
    }
}

impl TryFrom<[f64; 3]> for UnitVector3 {
    type Error = GeometryError;

    fn try_from(a: [f64; 3]) -> Result<Self, Self::Error> {
        UnitVector3::new(a[0], a[1], a[2])
    }
}

/// Angle in `[0, π]` between two unit vectors.
pub fn separation_angle(u: &UnitVector3, v: &UnitVector3) -> f64 {
    u.dot(v).clamp(-1.0, 1.0).acos()
}

/// An element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3(Matrix3<f64>);

impl Rotation3 {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix without checking orthogonality.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Right-handed rotation by `angle` radians about a (normalized) axis.
    pub fn from_axis_angle(axis: &UnitVector3, angle: f64) -> Self {
        let k = skew(axis.as_vector());
        Self(Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos()))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Rotation3 {
        Rotation3(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation3) -> Rotation3 {
        Rotation3(self.0 * other.0)
    }

    /// Largest absolute entry of `QᵀQ − I`.
    pub fn orthogonality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).abs().max()
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }
}

/// Unconstrained coordinates of a rotation under the Cayley map.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CayleyParams {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

impl CayleyParams {
    pub fn new(a1: f64, a2: f64, a3: f64) -> Self {
        Self { a1, a2, a3 }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.a1, self.a2, self.a3]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn is_finite(&self) -> bool {
        self.a1.is_finite() && self.a2.is_finite() && self.a3.is_finite()
    }

    /// The skew-symmetric generator `[0 a1 a2; −a1 0 a3; −a2 −a3 0]`.
    pub fn skew_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            0.0, self.a1, self.a2, //
            -self.a1, 0.0, self.a3, //
            -self.a2, -self.a3, 0.0,
        )
    }

    /// Derivative of the skew generator with respect to parameter `k`.
    pub(crate) fn skew_basis(k: usize) -> Matrix3<f64> {
        let mut p = [0.0; 3];
        p[k] = 1.0;
        CayleyParams::from_array(p).skew_matrix()
    }
}

/// Cayley map `Q = (I − A)(I + A)⁻¹`.
pub fn cayley_to_rotation(p: &CayleyParams) -> Rotation3 {
    let a = p.skew_matrix();
    let i = Matrix3::identity();
    // I + A with A skew-symmetric has determinant 1 + |a|² > 0.
    let inv = (i + a).try_inverse().expect("I + A is invertible for skew-symmetric A");
    Rotation3((i - a) * inv)
}

/// Partial derivatives `∂Q/∂a_k` for k = 1, 2, 3.
pub fn cayley_jacobian(p: &CayleyParams) -> [Matrix3<f64>; 3] {
    let a = p.skew_matrix();
    let i = Matrix3::identity();
    let inv = (i + a).try_inverse().expect("I + A is invertible");
    let q = (i - a) * inv;
    // d[(I−A)(I+A)⁻¹] = −dA (I+A)⁻¹ − Q dA (I+A)⁻¹ = −(I + Q) dA (I+A)⁻¹
    std::array::from_fn(|k| -(i + q) * CayleyParams::skew_basis(k) * inv)
}

/// Inverse Cayley map `A = (I − Q)(I + Q)⁻¹`.
pub fn rotation_to_cayley(q: &Rotation3) -> Result<CayleyParams, GeometryError> {
    let i = Matrix3::identity();
    let ipq = i + q.matrix();
    let det = ipq.determinant();
    if det.abs() < CAYLEY_SINGULAR_TOL {
        return Err(GeometryError::RotationAtCayleySingularity(det));
    }
    let inv = ipq.try_inverse().ok_or(GeometryError::RotationAtCayleySingularity(det))?;
    let a = (i - q.matrix()) * inv;
    // Average the mirrored entries to return the nearest skew-symmetric generator.
    Ok(CayleyParams::new(0.5 * (a[(0, 1)] - a[(1, 0)]), 0.5 * (a[(0, 2)] - a[(2, 0)]), 0.5 * (a[(1, 2)] - a[(2, 1)])))
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v.z, v.y, //
        v.z, 0.0, -v.x, //
        -v.y, v.x, 0.0,
    )
}

/// Decomposition of `target` into a component along `base` and a unit
/// deviation direction orthogonal to it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TangentNormalResult {
    /// Deviation direction; `None` when target is colinear with base.
    pub r: Option<UnitVector3>,
    /// Norm of the component orthogonal to base (sine of the separation).
    pub m: f64,
    /// Signed cosine of the separation.
    pub t: f64,
}

impl TangentNormalResult {
    pub fn is_degenerate(&self) -> bool {
        self.r.is_none()
    }
}

/// Tangent-normal decomposition of `target` about `base`.
///
/// Not symmetric: swapping the arguments changes the deviation direction.
pub fn tangent_normal(base: &UnitVector3, target: &UnitVector3) -> TangentNormalResult {
    let b = base.as_vector();
    let x = target.as_vector();
    let t = b.dot(x).clamp(-1.0, 1.0);
    let normal = x - b * t;
    let m = normal.norm();
    if m < DEGENERATE_TOL {
        return TangentNormalResult { r: None, m, t };
    }
    // Remove any residual component along base left by rounding.
    let n = normal - b * b.dot(&normal);
    let r = UnitVector3::from_unit_unchecked(n / n.norm());
    TangentNormalResult { r: Some(r), m, t }
}
