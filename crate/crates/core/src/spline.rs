//! Uniform cubic B-spline trajectory over a four-knot window.
//!
//! Translation is a plain B-spline over four control points. Orientation is a
//! cumulative B-spline: a lagged anchor quaternion followed by four exponential
//! factors of blended rotation increments,
//! `q(t) = q_lag ⊗ Exp(λ₀δ₀) ⊗ Exp(λ₁δ₁) ⊗ Exp(λ₂δ₂) ⊗ Exp(λ₃δ₃)`.
//! A window with first knot `t₀` and spacing `Δt` is evaluated on the segment
//! `[t₀ + 2Δt, t₀ + 3Δt)`.

use nalgebra::{Matrix3, Matrix4, Matrix4x3, SMatrix, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    quat_exp, quat_exp_jacobian, quat_left_matrix, quat_right_matrix, rotate_point_inverse_jacobian, Quat, RotVec,
};

/// Translation basis matrix; row `k` gives the weight of control point `k` as a cubic in `u`.
pub const BASIS: [[f64; 4]; 4] = [
    [1.0 / 6.0, -3.0 / 6.0, 3.0 / 6.0, -1.0 / 6.0],
    [4.0 / 6.0, 0.0, -6.0 / 6.0, 3.0 / 6.0],
    [1.0 / 6.0, 3.0 / 6.0, 3.0 / 6.0, -3.0 / 6.0],
    [0.0, 0.0, 0.0, 1.0 / 6.0],
];

/// Cumulative blending matrix for the orientation increments.
pub const CUMULATIVE_BASIS: [[f64; 4]; 4] = [
    [1.0, 0.0, 0.0, 0.0],
    [5.0 / 6.0, 3.0 / 6.0, -3.0 / 6.0, 1.0 / 6.0],
    [1.0 / 6.0, 3.0 / 6.0, 3.0 / 6.0, -2.0 / 6.0],
    [0.0, 0.0, 0.0, 1.0 / 6.0],
];

const BOUNDARY_SLACK: f64 = 1e-9;

pub type TranslationJacobian = SMatrix<f64, 3, 12>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("time {t} outside active segment [{start}, {end})")]
    OutOfWindow { t: f64, start: f64, end: f64 },
}

/// Basis weights and their time derivatives at one normalized time `u`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BasisWeights {
    pub u: f64,
    pub m: [f64; 4],
    /// per second
    pub dm: [f64; 4],
    /// per second²
    pub ddm: [f64; 4],
    pub lambda: [f64; 4],
    pub dlambda: [f64; 4],
    pub ddlambda: [f64; 4],
}

fn apply(matrix: &[[f64; 4]; 4], powers: [f64; 4]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (o, row) in out.iter_mut().zip(matrix) {
        *o = row.iter().zip(powers).map(|(a, b)| a * b).sum();
    }
    out
}

/// Evaluates the blending weights at `u ∈ [0, 1)` for knot spacing `dt`.
///
/// Panics if `u` is outside the unit interval or `dt` is not positive.
pub fn basis(u: f64, dt: f64) -> BasisWeights {
    assert!((0.0..1.0).contains(&u), "normalized time {u} outside [0, 1)");
    assert!(dt > 0.0, "knot spacing must be positive");
    let p0 = [1.0, u, u * u, u * u * u];
    let p1 = [0.0, 1.0 / dt, 2.0 * u / dt, 3.0 * u * u / dt];
    let p2 = [0.0, 0.0, 2.0 / (dt * dt), 6.0 * u / (dt * dt)];
    BasisWeights {
        u,
        m: apply(&BASIS, p0),
        dm: apply(&BASIS, p1),
        ddm: apply(&BASIS, p2),
        lambda: apply(&CUMULATIVE_BASIS, p0),
        dlambda: apply(&CUMULATIVE_BASIS, p1),
        ddlambda: apply(&CUMULATIVE_BASIS, p2),
    }
}

/// `B = [m₀I, m₁I, m₂I, m₃I]` for an arbitrary weight row.
pub fn stacked_identity(weights: &[f64; 4]) -> TranslationJacobian {
    let mut b = TranslationJacobian::zeros();
    for (k, w) in weights.iter().enumerate() {
        b.fixed_view_mut::<3, 3>(0, 3 * k).copy_from(&(Matrix3::identity() * *w));
    }
    b
}

/// Jacobian of the spline translation with respect to the stacked control points.
pub fn translation_jacobian(u: f64) -> TranslationJacobian {
    stacked_identity(&basis(u, 1.0).m)
}

/// The active four-knot window of the spline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineWindow {
    /// Time of the oldest active knot, seconds.
    pub first_knot: f64,
    /// Knot spacing, seconds.
    pub dt: f64,
    pub translations: [Vector3<f64>; 4],
    pub increments: [RotVec; 4],
    /// Orientation preceding the first increment.
    pub lagged: Quat,
}

impl SplineWindow {
    pub fn constant(first_knot: f64, dt: f64, position: Vector3<f64>, orientation: Quat) -> Self {
        Self {
            first_knot,
            dt,
            translations: [position; 4],
            increments: [Vector3::zeros(); 4],
            lagged: orientation,
        }
    }

    pub fn knot_times(&self) -> [f64; 4] {
        std::array::from_fn(|k| self.first_knot + k as f64 * self.dt)
    }

    pub fn segment_start(&self) -> f64 {
        self.first_knot + 2.0 * self.dt
    }

    pub fn segment_end(&self) -> f64 {
        self.first_knot + 3.0 * self.dt
    }

    /// Normalized segment time; knot-boundary round-off is absorbed symmetrically so that
    /// consecutive windows tile the time axis without gaps or overlap.
    pub fn normalized_time(&self, t: f64) -> Result<f64, SplineError> {
        let start = self.segment_start();
        let u = (t - start) / self.dt;
        if (-BOUNDARY_SLACK..1.0 - BOUNDARY_SLACK).contains(&u) {
            Ok(u.max(0.0))
        } else {
            Err(SplineError::OutOfWindow { t, start, end: self.segment_end() })
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        self.normalized_time(t).is_ok()
    }

    pub fn stacked_translations(&self) -> SMatrix<f64, 12, 1> {
        let mut v = SMatrix::<f64, 12, 1>::zeros();
        for (k, c) in self.translations.iter().enumerate() {
            v.fixed_rows_mut::<3>(3 * k).copy_from(c);
        }
        v
    }

    pub fn eval_translation(&self, t: f64) -> Result<Vector3<f64>, SplineError> {
        let w = basis(self.normalized_time(t)?, self.dt);
        Ok(self.blend(&w.m))
    }

    pub fn eval_velocity(&self, t: f64) -> Result<Vector3<f64>, SplineError> {
        let w = basis(self.normalized_time(t)?, self.dt);
        Ok(self.blend(&w.dm))
    }

    pub fn eval_acceleration(&self, t: f64) -> Result<Vector3<f64>, SplineError> {
        let w = basis(self.normalized_time(t)?, self.dt);
        Ok(self.blend(&w.ddm))
    }

    pub fn eval_orientation(&self, t: f64) -> Result<Quat, SplineError> {
        Ok(self.sample(t)?.orientation)
    }

    /// Body-frame angular velocity, rad/s.
    pub fn eval_angular_velocity(&self, t: f64) -> Result<Vector3<f64>, SplineError> {
        Ok(self.sample(t)?.angular_velocity)
    }

    /// Quaternion-space Jacobians of `q(t)`: one 4×3 block per increment and the 4×4 block
    /// for the lagged quaternion.
    pub fn orientation_jacobians(&self, t: f64) -> Result<([Matrix4x3<f64>; 4], Matrix4<f64>), SplineError> {
        let s = self.sample(t)?;
        Ok((s.dq_dincrement, s.dq_dlagged))
    }

    fn blend(&self, w: &[f64; 4]) -> Vector3<f64> {
        self.translations.iter().zip(w).map(|(c, w)| c * *w).sum()
    }

    /// Evaluates pose, derivatives and Jacobians at `t` in one pass.
    pub fn sample(&self, t: f64) -> Result<SplineSample, SplineError> {
        let weights = basis(self.normalized_time(t)?, self.dt);
        Ok(SplineSample::new(self, weights))
    }
}

/// Everything the measurement models need about the trajectory at one instant.
#[derive(Clone, Debug)]
pub struct SplineSample {
    pub weights: BasisWeights,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    pub orientation: Quat,
    pub rotation: Matrix3<f64>,
    pub angular_velocity: Vector3<f64>,
    /// `∂q/∂δ_j` as 4×3 blocks.
    pub dq_dincrement: [Matrix4x3<f64>; 4],
    /// `∂q/∂q_lag`.
    pub dq_dlagged: Matrix4<f64>,
    /// `∂ω/∂δ_j` as 3×3 blocks.
    pub domega_dincrement: [Matrix3<f64>; 4],
}

impl SplineSample {
    fn new(window: &SplineWindow, weights: BasisWeights) -> Self {
        let factors: [Quat; 4] = std::array::from_fn(|k| quat_exp(&(window.increments[k] * weights.lambda[k])));

        // prefix[k] = q_lag ⊗ A₀ ⊗ … ⊗ A_{k-1}; suffix[k] = A_{k+1} ⊗ … ⊗ A₃
        let mut prefix = [window.lagged; 5];
        for k in 0..4 {
            prefix[k + 1] = prefix[k] * factors[k];
        }
        let mut suffix = [Quat::identity(); 4];
        for k in (0..3).rev() {
            suffix[k] = factors[k + 1] * suffix[k + 1];
        }
        let orientation = prefix[4];
        let product = factors[0] * suffix[0];

        let dq_dincrement = std::array::from_fn(|j| {
            let nu = window.increments[j] * weights.lambda[j];
            quat_left_matrix(&prefix[j]) * quat_right_matrix(&suffix[j]) * quat_exp_jacobian(&nu) * weights.lambda[j]
        });
        let dq_dlagged = quat_right_matrix(&product);

        // ω_k = R(A_k)ᵀ ω_{k-1} + λ̇_k δ_k, differentiated forward in k.
        let mut omega = Vector3::zeros();
        let mut domega = [Matrix3::zeros(); 4];
        for k in 0..4 {
            let rt = factors[k].to_rotation_matrix().into_inner().transpose();
            for d in domega.iter_mut() {
                *d = rt * *d;
            }
            let nu = window.increments[k] * weights.lambda[k];
            domega[k] += rotate_point_inverse_jacobian(&factors[k], &omega) * quat_exp_jacobian(&nu) * weights.lambda[k]
                + Matrix3::identity() * weights.dlambda[k];
            omega = rt * omega + window.increments[k] * weights.dlambda[k];
        }

        Self {
            position: window.blend(&weights.m),
            velocity: window.blend(&weights.dm),
            acceleration: window.blend(&weights.ddm),
            rotation: orientation.to_rotation_matrix().into_inner(),
            orientation,
            angular_velocity: omega,
            dq_dincrement,
            dq_dlagged,
            domega_dincrement: domega,
            weights,
        }
    }

    pub fn translation_jacobian(&self) -> TranslationJacobian {
        stacked_identity(&self.weights.m)
    }

    pub fn velocity_jacobian(&self) -> TranslationJacobian {
        stacked_identity(&self.weights.dm)
    }

    pub fn acceleration_jacobian(&self) -> TranslationJacobian {
        stacked_identity(&self.weights.ddm)
    }

    pub fn orientation_coeffs(&self) -> Vector4<f64> {
        crate::geometry::quat_coeffs(&self.orientation)
    }
}
