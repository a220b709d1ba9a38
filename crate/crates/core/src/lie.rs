//! SE(3) rigid transforms and their se(3) twist coordinates.
//!
//! Twists are ordered `(v, w)`: translational part first, rotational (axis-angle) part
//! second. Rotations are stored as unit quaternions and renormalized after every
//! composition, so long chains stay orthonormal.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this rotation angle the closed-form coefficients switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Logarithms are refused when the rotation angle is within this distance of pi.
pub const LOG_SINGULARITY_EPS: f64 = 1e-6;

/// An element of se(3).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    /// Translational part (meters).
    pub v: Vector3<f64>,
    /// Rotational part, axis times angle (radians).
    pub w: Vector3<f64>,
}

impl Twist {
    pub fn new(v: Vector3<f64>, w: Vector3<f64>) -> Self {
        Twist { v, w }
    }

    pub fn zero() -> Self {
        Twist::default()
    }

    /// Builds a twist from `[vx, vy, vz, wx, wy, wz]`.
    pub fn from_array(a: [f64; 6]) -> Self {
        Twist {
            v: Vector3::new(a[0], a[1], a[2]),
            w: Vector3::new(a[3], a[4], a[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.v.x, self.v.y, self.v.z, self.w.x, self.w.y, self.w.z]
    }

    #[inline]
    pub fn component(&self, i: usize) -> f64 {
        if i < 3 {
            self.v[i]
        } else {
            self.w[i - 3]
        }
    }

    #[inline]
    pub fn component_mut(&mut self, i: usize) -> &mut f64 {
        if i < 3 {
            &mut self.v[i]
        } else {
            &mut self.w[i - 3]
        }
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().chain(self.w.iter()).all(|c| c.is_finite())
    }

    /// Sum of absolute values of the six components.
    pub fn l1_norm(&self) -> f64 {
        self.v.iter().chain(self.w.iter()).map(|c| c.abs()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.v
            .iter()
            .chain(self.w.iter())
            .fold(0.0f64, |m, c| m.max(c.abs()))
    }

    pub fn dot(&self, other: &Twist) -> f64 {
        self.v.dot(&other.v) + self.w.dot(&other.w)
    }

    pub fn exp(&self) -> Result<RigidTransform> {
        exp(self)
    }
}

impl Add for Twist {
    type Output = Twist;
    fn add(self, rhs: Twist) -> Twist {
        Twist::new(self.v + rhs.v, self.w + rhs.w)
    }
}

impl AddAssign for Twist {
    fn add_assign(&mut self, rhs: Twist) {
        self.v += rhs.v;
        self.w += rhs.w;
    }
}

impl Sub for Twist {
    type Output = Twist;
    fn sub(self, rhs: Twist) -> Twist {
        Twist::new(self.v - rhs.v, self.w - rhs.w)
    }
}

impl Neg for Twist {
    type Output = Twist;
    fn neg(self) -> Twist {
        Twist::new(-self.v, -self.w)
    }
}

impl Mul<f64> for Twist {
    type Output = Twist;
    fn mul(self, s: f64) -> Twist {
        Twist::new(self.v * s, self.w * s)
    }
}

/// An element of SE(3): `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        RigidTransform::new(UnitQuaternion::identity(), t)
    }

    /// Builds a transform from a rotation matrix that must already be orthonormal
    /// (checked to 1e-9).
    pub fn from_matrix(r: &Matrix3<f64>, t: Vector3<f64>) -> Result<Self> {
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !err.is_finite() || err > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "rotation matrix is not orthonormal (|R^T R - I| = {err:e})"
            )));
        }
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
        Ok(RigidTransform::new(
            UnitQuaternion::from_rotation_matrix(&rot),
            t,
        ))
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Rotation angle in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        let q = self.rotation.quaternion();
        2.0 * q.imag().norm().atan2(q.w.abs())
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let q = self.rotation.quaternion() * other.rotation.quaternion();
        RigidTransform {
            rotation: UnitQuaternion::new_normalize(q),
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let inv = self.rotation.inverse();
        RigidTransform {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    #[inline]
    pub fn act(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn log(&self) -> Result<Twist> {
        log(self)
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|c| c.is_finite())
            && self
                .rotation
                .quaternion()
                .coords
                .iter()
                .all(|c| c.is_finite())
    }

    /// Largest componentwise difference of the 3x4 matrices.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        let dr = (self.rotation_matrix() - other.rotation_matrix())
            .abs()
            .max();
        let dt = (self.translation - other.translation).abs().max();
        dr.max(dt)
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Exponential map se(3) -> SE(3): Rodrigues rotation and left-Jacobian translation.
pub fn exp(xi: &Twist) -> Result<RigidTransform> {
    if !xi.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite twist {xi:?}")));
    }
    let theta2 = xi.w.norm_squared();
    let theta = theta2.sqrt();
    // sin(theta/2)/theta, (1 - cos)/theta^2, (theta - sin)/theta^3
    let (half_sinc, b, c) = if theta < SMALL_ANGLE {
        (
            0.5 - theta2 / 48.0,
            0.5 - theta2 / 24.0,
            1.0 / 6.0 - theta2 / 120.0,
        )
    } else {
        let s = (0.5 * theta).sin();
        (
            s / theta,
            2.0 * s * s / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let q = Quaternion::from_parts((0.5 * theta).cos(), xi.w * half_sinc);
    let wx = skew(&xi.w);
    let v = Matrix3::identity() + wx * b + wx * wx * c;
    Ok(RigidTransform {
        rotation: UnitQuaternion::new_normalize(q),
        translation: v * xi.v,
    })
}

/// Logarithm SE(3) -> se(3) with rotation angle in `[0, pi)`.
///
/// Fails with [`Error::NearSingular`] when the angle is within
/// [`LOG_SINGULARITY_EPS`] of pi.
pub fn log(t: &RigidTransform) -> Result<Twist> {
    if !t.is_finite() {
        return Err(Error::InvalidArgument("non-finite transform".into()));
    }
    let mut q = *t.rotation.quaternion();
    if q.w < 0.0 {
        q = -q;
    }
    let n = q.imag().norm();
    let theta = 2.0 * n.atan2(q.w);
    if theta > std::f64::consts::PI - LOG_SINGULARITY_EPS {
        return Err(Error::NearSingular {
            angle: theta,
            eps: LOG_SINGULARITY_EPS,
        });
    }
    let scale = if n > 0.0 { theta / n } else { 2.0 / q.w };
    let w = q.imag() * scale;
    let theta2 = theta * theta;
    let d = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / theta2
    };
    let wx = skew(&w);
    let v_inv = Matrix3::identity() - wx * 0.5 + wx * wx * d;
    Ok(Twist::new(v_inv * t.translation, w))
}
