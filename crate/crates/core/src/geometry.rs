//! Quaternion and rotation algebra, plus the spherical measurement mapping.
//!
//! Quaternions follow the Hamilton convention, scalar first when laid out as
//! a 4-vector `[w, x, y, z]`, and represent the world-from-body rotation.
//! Orientation perturbations are applied on the right (body frame):
//! `q_true = q ⊗ Exp(φ)`.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Matrix4x3, Quaternion, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

pub type Quat = UnitQuaternion<f64>;
/// Axis-angle rotation vector in radians.
pub type RotVec = Vector3<f64>;

/// Below this angle the exponential and logarithm switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Quaternion coefficients as `[w, x, y, z]`.
pub fn quat_coeffs(q: &Quat) -> Vector4<f64> {
    Vector4::new(q.w, q.i, q.j, q.k)
}

/// Raw (not necessarily unit) quaternion product on `[w, x, y, z]` 4-vectors.
pub fn quat_mul_coeffs(a: &Vector4<f64>, b: &Vector4<f64>) -> Vector4<f64> {
    quat_left_matrix_coeffs(a) * b
}

pub fn quat_from_coeffs(c: &Vector4<f64>) -> Quat {
    UnitQuaternion::new_normalize(Quaternion::new(c[0], c[1], c[2], c[3]))
}

pub fn quat_exp(v: &RotVec) -> Quat {
    let theta = v.norm();
    let (w, s) = if theta < SMALL_ANGLE {
        (1.0 - theta * theta / 8.0, 0.5 - theta * theta / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    UnitQuaternion::new_normalize(Quaternion::new(w, s * v.x, s * v.y, s * v.z))
}

/// Logarithm map, returning a rotation vector with norm at most π.
///
/// The double cover is resolved by flipping to `w ≥ 0`; at exactly `w = 0`
/// the first nonzero vector component is made positive.
pub fn quat_log(q: &Quat) -> RotVec {
    let mut c = quat_coeffs(q);
    let flip = c[0] < 0.0
        || (c[0] == 0.0
            && c.fixed_rows::<3>(1)
                .iter()
                .find(|x| **x != 0.0)
                .is_some_and(|x| *x < 0.0));
    if flip {
        c = -c;
    }
    let u = Vector3::new(c[1], c[2], c[3]);
    let n = u.norm();
    if n < SMALL_ANGLE {
        // atan2(n, w) ≈ n / w for tiny n
        return u * (2.0 / c[0]) * (1.0 - n * n / (3.0 * c[0] * c[0]));
    }
    let theta = 2.0 * n.atan2(c[0]);
    u * (theta / n)
}

fn quat_left_matrix_coeffs(q: &Vector4<f64>) -> Matrix4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

fn quat_right_matrix_coeffs(q: &Vector4<f64>) -> Matrix4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, z, -y, //
        y, -z, w, x, //
        z, y, -x, w,
    )
}

/// `[q]_L` such that `[q]_L · p = q ⊗ p`.
pub fn quat_left_matrix(q: &Quat) -> Matrix4<f64> {
    quat_left_matrix_coeffs(&quat_coeffs(q))
}

/// `[q]_R` such that `[q]_R · p = p ⊗ q`.
pub fn quat_right_matrix(q: &Quat) -> Matrix4<f64> {
    quat_right_matrix_coeffs(&quat_coeffs(q))
}

/// Jacobian of `Exp(ν)` (as `[w, x, y, z]`) with respect to `ν`.
pub fn quat_exp_jacobian(v: &RotVec) -> Matrix4x3<f64> {
    let theta = v.norm();
    let mut j = Matrix4x3::zeros();
    if theta < SMALL_ANGLE {
        j.row_mut(0).copy_from(&(-0.25 * v.transpose()));
        let block = Matrix3::identity() * (0.5 - theta * theta / 48.0) - v * v.transpose() / 24.0;
        j.fixed_view_mut::<3, 3>(1, 0).copy_from(&block);
        return j;
    }
    let half = 0.5 * theta;
    let (sh, ch) = half.sin_cos();
    let s = sh / theta;
    let ds = (0.5 * ch * theta - sh) / (theta * theta);
    let dir = v / theta;
    j.row_mut(0).copy_from(&(-0.5 * sh * dir.transpose()));
    let block = Matrix3::identity() * s + v * dir.transpose() * ds;
    j.fixed_view_mut::<3, 3>(1, 0).copy_from(&block);
    j
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `∂(R(q)·v)/∂q` for the quadratic form of the rotation, 3×4 over `[w, x, y, z]`.
pub fn rotate_point_jacobian(q: &Quat, v: &Vector3<f64>) -> Matrix3x4<f64> {
    rotate_point_jacobian_coeffs(&quat_coeffs(q), v)
}

fn rotate_point_jacobian_coeffs(c: &Vector4<f64>, v: &Vector3<f64>) -> Matrix3x4<f64> {
    let w = c[0];
    let u = Vector3::new(c[1], c[2], c[3]);
    let mut j = Matrix3x4::zeros();
    j.column_mut(0).copy_from(&(2.0 * (w * v + u.cross(v))));
    let du = 2.0 * (Matrix3::identity() * u.dot(v) + u * v.transpose() - v * u.transpose() - w * skew(v));
    j.fixed_view_mut::<3, 3>(0, 1).copy_from(&du);
    j
}

/// `∂(R(q)ᵀ·v)/∂q`, 3×4 over `[w, x, y, z]`.
pub fn rotate_point_inverse_jacobian(q: &Quat, v: &Vector3<f64>) -> Matrix3x4<f64> {
    let c = quat_coeffs(q);
    let conj = Vector4::new(c[0], -c[1], -c[2], -c[3]);
    let mut j = rotate_point_jacobian_coeffs(&conj, v);
    for col in 1..4 {
        let neg = -j.column(col);
        j.column_mut(col).copy_from(&neg);
    }
    j
}

/// Right Jacobian of SO(3): `Exp(φ + dφ) ≈ Exp(φ) Exp(J_r(φ) dφ)`.
pub fn so3_right_jacobian(phi: &RotVec) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-5 {
        return Matrix3::identity() - 0.5 * k + k * k / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() - (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * k * k
}

/// A radar return position in sensor spherical coordinates.
///
/// Elevation is measured from the sensor xy-plane, azimuth from +x towards +y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphericalCoord {
    pub range: f64,
    pub azimuth: f64,
    pub elevation: f64,
}

impl SphericalCoord {
    pub fn new(range: f64, azimuth: f64, elevation: f64) -> Self {
        Self { range, azimuth, elevation }
    }

    pub fn is_valid(&self) -> bool {
        self.range.is_finite()
            && self.range > 0.0
            && self.azimuth.is_finite()
            && self.elevation.abs() < std::f64::consts::FRAC_PI_2
    }

    pub fn to_cartesian(&self) -> Vector3<f64> {
        spherical_to_cartesian(self)
    }

    /// Inverse mapping; azimuth in (-π, π].
    pub fn from_cartesian(p: &Vector3<f64>) -> Self {
        let range = p.norm();
        let azimuth = p.y.atan2(p.x);
        let elevation = (p.z / range).asin();
        Self { range, azimuth, elevation }
    }

    /// Unit line-of-sight vector.
    pub fn direction(&self) -> Vector3<f64> {
        let (sa, ca) = self.azimuth.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        Vector3::new(ce * ca, ce * sa, se)
    }
}

pub fn spherical_to_cartesian(s: &SphericalCoord) -> Vector3<f64> {
    s.direction() * s.range
}

/// `Γ = ∂(x, y, z)/∂(r, a, e)`.
pub fn spherical_jacobian(s: &SphericalCoord) -> Matrix3<f64> {
    let r = s.range;
    let (sa, ca) = s.azimuth.sin_cos();
    let (se, ce) = s.elevation.sin_cos();
    Matrix3::new(
        ce * ca, -r * ce * sa, -r * se * ca, //
        ce * sa, r * ce * ca, -r * se * sa, //
        se, 0.0, r * ce,
    )
}

/// Rigid transform from the radar frame into the body (IMU) frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extrinsics {
    pub rotation: Quat,
    pub translation: Vector3<f64>,
}

impl Default for Extrinsics {
    fn default() -> Self {
        Self { rotation: Quat::identity(), translation: Vector3::zeros() }
    }
}

impl Extrinsics {
    pub fn to_body(&self, p_radar: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_radar + self.translation
    }
}
