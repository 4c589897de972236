//! Pose and point uncertainty propagation.
//!
//! Control-point covariances are pushed through the spline to a pose
//! covariance at any time in the active segment, then compounded with the
//! radar's spherical noise into a world-frame covariance for every return.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Matrix4x3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::filter::{FilterState, INCREMENT, TRANSLATION};
use crate::geometry::{quat_left_matrix, skew, spherical_jacobian, Extrinsics, Quat, SphericalCoord};
use crate::spline::{SplineError, SplineSample, SplineWindow};

/// One-sigma radar noise in spherical coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorNoise {
    /// meters
    pub range: f64,
    /// radians
    pub azimuth: f64,
    /// radians
    pub elevation: f64,
}

impl Default for SensorNoise {
    fn default() -> Self {
        Self { range: 0.1, azimuth: 1f64.to_radians(), elevation: 1f64.to_radians() }
    }
}

/// How much of the uncertainty chain feeds point covariances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMode {
    /// Pose and measurement uncertainty.
    #[default]
    Full,
    /// Measurement uncertainty only; the pose is treated as exact.
    MeasurementOnly,
    /// Every point gets the same isotropic covariance `σ_r² I`.
    Disabled,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseCovariance {
    pub translation: Matrix3<f64>,
    /// Quaternion-space covariance (rank ≤ 3).
    pub quaternion: Matrix4<f64>,
    /// Right-perturbation rotation-vector covariance.
    pub rotation: Matrix3<f64>,
}

impl PoseCovariance {
    pub fn zero() -> Self {
        Self { translation: Matrix3::zeros(), quaternion: Matrix4::zeros(), rotation: Matrix3::zeros() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldPointCovariance {
    pub cov: Matrix3<f64>,
    pub trace: f64,
}

impl WorldPointCovariance {
    pub fn new(cov: Matrix3<f64>) -> Self {
        let cov = 0.5 * (cov + cov.transpose());
        Self { trace: cov.trace(), cov }
    }
}

/// `Σ (m_k)² Σ_k`.
pub fn translation_covariance_weighted(m: &[f64; 4], knot_covs: &[Matrix3<f64>; 4]) -> Matrix3<f64> {
    m.iter().zip(knot_covs).fold(Matrix3::zeros(), |acc, (w, c)| acc + c * (w * w))
}

/// Translation covariance from independent knot covariances.
pub fn translation_covariance(
    w: &SplineWindow,
    knot_covs: &[Matrix3<f64>; 4],
    t: f64,
) -> Result<Matrix3<f64>, SplineError> {
    let u = w.normalized_time(t)?;
    Ok(translation_covariance_weighted(&crate::spline::basis(u, w.dt).m, knot_covs))
}

/// `J P Jᵀ` with the 3×12 translation Jacobian and a full 12×12 covariance,
/// including cross-knot correlations.
pub fn translation_covariance_block(sample: &SplineSample, p12: &SMatrix<f64, 12, 12>) -> Matrix3<f64> {
    let j = sample.translation_jacobian();
    j * p12 * j.transpose()
}

/// Tangent lift `∂(q ⊗ Exp(φ))/∂φ` at `φ = 0`.
pub fn tangent_lift(q: &Quat) -> Matrix4x3<f64> {
    let mut half = Matrix4x3::zeros();
    half.fixed_view_mut::<3, 3>(1, 0).copy_from(&(Matrix3::identity() * 0.5));
    quat_left_matrix(q) * half
}

/// `∂Log(q̄⁻¹ ⊗ q)/∂q` at `q = q̄`.
pub fn rotvec_from_quat_jacobian(q: &Quat) -> Matrix3x4<f64> {
    let mut sel = Matrix3x4::zeros();
    sel.fixed_view_mut::<3, 3>(0, 1).copy_from(&(Matrix3::identity() * 2.0));
    sel * quat_left_matrix(&q.inverse())
}

pub fn quat_cov_to_rotvec_cov(q: &Quat, sigma_q: &Matrix4<f64>) -> Matrix3<f64> {
    let j = rotvec_from_quat_jacobian(q);
    let c = j * sigma_q * j.transpose();
    0.5 * (c + c.transpose())
}

pub fn rotvec_cov_to_quat_cov(q: &Quat, sigma: &Matrix3<f64>) -> Matrix4<f64> {
    let l = tangent_lift(q);
    l * sigma * l.transpose()
}

/// Quaternion-space orientation covariance at a sampled time.
pub fn orientation_covariance_at(
    sample: &SplineSample,
    lagged: &Quat,
    increment_covs: &[Matrix3<f64>; 4],
    lagged_cov: &Matrix3<f64>,
) -> Matrix4<f64> {
    let mut acc = Matrix4::zeros();
    for (j, c) in sample.dq_dincrement.iter().zip(increment_covs) {
        acc += j * c * j.transpose();
    }
    let lifted = rotvec_cov_to_quat_cov(lagged, lagged_cov);
    acc += sample.dq_dlagged * lifted * sample.dq_dlagged.transpose();
    0.5 * (acc + acc.transpose())
}

pub fn orientation_covariance(
    w: &SplineWindow,
    increment_covs: &[Matrix3<f64>; 4],
    lagged_cov: &Matrix3<f64>,
    t: f64,
) -> Result<Matrix4<f64>, SplineError> {
    let sample = w.sample(t)?;
    Ok(orientation_covariance_at(&sample, &w.lagged, increment_covs, lagged_cov))
}

/// Pose covariance at `t` from the filter's marginal block covariances.
pub fn pose_covariance(state: &FilterState, t: f64) -> Result<PoseCovariance, SplineError> {
    let w = state.window();
    let sample = w.sample(t)?;
    Ok(pose_covariance_at(state, &sample))
}

pub fn pose_covariance_at(state: &FilterState, sample: &SplineSample) -> PoseCovariance {
    let knot_covs = std::array::from_fn(|k| state.block_cov(TRANSLATION + 3 * k));
    let inc_covs = std::array::from_fn(|k| state.block_cov(INCREMENT + 3 * k));
    let translation = translation_covariance_weighted(&sample.weights.m, &knot_covs);
    let quaternion = orientation_covariance_at(sample, &state.lagged, &inc_covs, &state.lagged_cov);
    let rotation = quat_cov_to_rotvec_cov(&sample.orientation, &quaternion);
    PoseCovariance { translation: 0.5 * (translation + translation.transpose()), quaternion, rotation }
}

/// `Γ diag(σ_r², σ_a², σ_e²) Γᵀ` in the radar frame.
pub fn measurement_covariance(s: &SphericalCoord, noise: &SensorNoise) -> Matrix3<f64> {
    let g = spherical_jacobian(s);
    let d = Matrix3::from_diagonal(&Vector3::new(
        noise.range.powi(2),
        noise.azimuth.powi(2),
        noise.elevation.powi(2),
    ));
    let c = g * d * g.transpose();
    0.5 * (c + c.transpose())
}

/// World-frame covariance of a return at body-frame position `body_point`.
///
/// `rotation` is the body-to-world rotation at the return's timestamp and
/// `radar_cov` the radar-frame measurement covariance.
pub fn world_point_covariance(
    pose: &PoseCovariance,
    rotation: &Matrix3<f64>,
    extrinsics: &Extrinsics,
    body_point: &Vector3<f64>,
    radar_cov: &Matrix3<f64>,
) -> WorldPointCovariance {
    let r_ir = extrinsics.rotation.to_rotation_matrix().into_inner();
    let body_cov = r_ir * radar_cov * r_ir.transpose();
    let lever = rotation * skew(body_point);
    WorldPointCovariance::new(
        pose.translation + lever * pose.rotation * lever.transpose() + rotation * body_cov * rotation.transpose(),
    )
}

/// Point covariance under the chosen [`UncertaintyMode`].
pub fn point_covariance(
    mode: UncertaintyMode,
    pose: &PoseCovariance,
    rotation: &Matrix3<f64>,
    extrinsics: &Extrinsics,
    measurement: &SphericalCoord,
    noise: &SensorNoise,
) -> WorldPointCovariance {
    match mode {
        UncertaintyMode::Disabled => WorldPointCovariance::new(Matrix3::identity() * noise.range.powi(2)),
        UncertaintyMode::MeasurementOnly => world_point_covariance(
            &PoseCovariance::zero(),
            rotation,
            extrinsics,
            &Vector3::zeros(),
            &measurement_covariance(measurement, noise),
        ),
        UncertaintyMode::Full => world_point_covariance(
            pose,
            rotation,
            extrinsics,
            &extrinsics.to_body(&measurement.to_cartesian()),
            &measurement_covariance(measurement, noise),
        ),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::{quat_exp, quat_log};
    use crate::spline::tests::random_window;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd3(rng: &mut ChaCha8Rng, scale: f64) -> Matrix3<f64> {
        let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        (a * a.transpose() + Matrix3::identity() * 0.1) * scale
    }

    fn is_sym_psd(m: &Matrix3<f64>) -> bool {
        let sym = (m - m.transpose()).norm() <= 1e-12 * m.norm().max(1e-300);
        sym && m.symmetric_eigen().eigenvalues.min() >= -1e-9 * m.trace().abs()
    }

    #[test]
    fn equal_knot_covariances_at_segment_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_window(&mut rng);
        let s = random_spd3(&mut rng, 1.0);
        let c = translation_covariance(&w, &[s; 4], w.segment_start()).unwrap();
        assert!((c - s * 0.5).norm() < 1e-12 * s.norm());
    }

    #[test]
    fn single_knot_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_window(&mut rng);
        let s = random_spd3(&mut rng, 1.0);
        let t = w.segment_start() + 0.3 * w.dt;
        let m = crate::spline::basis(0.3, w.dt).m;
        let z = Matrix3::zeros();
        let c = translation_covariance(&w, &[z, z, s, z], t).unwrap();
        assert!((c - s * m[2] * m[2]).norm() < 1e-12 * s.norm());
    }

    #[test]
    fn block_form_matches_summed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_window(&mut rng);
        let covs: [Matrix3<f64>; 4] = std::array::from_fn(|_| random_spd3(&mut rng, 1.0));
        let mut p12 = SMatrix::<f64, 12, 12>::zeros();
        for (k, c) in covs.iter().enumerate() {
            p12.fixed_view_mut::<3, 3>(3 * k, 3 * k).copy_from(c);
        }
        for u in [0.0, 0.25, 0.5, 0.99] {
            let t = w.segment_start() + u * w.dt;
            let sample = w.sample(t).unwrap();
            let a = translation_covariance_block(&sample, &p12);
            let b = translation_covariance(&w, &covs, t).unwrap();
            assert!((a - b).norm() <= 1e-12 * b.norm());
        }
    }

    #[test]
    fn zero_orientation_inputs_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random_window(&mut rng);
        let z = Matrix3::zeros();
        let c = orientation_covariance(&w, &[z; 4], &z, w.segment_start() + 0.01).unwrap();
        assert_eq!(c, Matrix4::zeros());
        assert_eq!(quat_cov_to_rotvec_cov(&w.lagged, &Matrix4::zeros()), Matrix3::zeros());
    }

    #[test]
    fn single_increment_identity_window_scales_by_lambda_squared() {
        let w = SplineWindow::constant(0.0, 0.1, Vector3::zeros(), Quat::identity());
        let s = Matrix3::from_diagonal(&Vector3::new(1e-4, 2e-4, 3e-4));
        let z = Matrix3::zeros();
        let u = 0.4;
        let t = w.segment_start() + u * w.dt;
        let lambda = crate::spline::basis(u, w.dt).lambda;
        for k in 1..4 {
            let mut covs = [z; 4];
            covs[k] = s;
            let c = orientation_covariance(&w, &covs, &z, t).unwrap();
            let expected = rotvec_cov_to_quat_cov(&Quat::identity(), &s) * lambda[k].powi(2);
            assert!((c - expected).norm() < 1e-15, "k={k}");
        }
    }

    #[test]
    fn lift_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let q = quat_exp(&Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)));
            let s = random_spd3(&mut rng, 1e-4);
            let back = quat_cov_to_rotvec_cov(&q, &rotvec_cov_to_quat_cov(&q, &s));
            assert!((back - s).norm() < 1e-14);
        }
    }

    #[test]
    fn measurement_covariance_on_x_axis() {
        let n = SensorNoise { range: 0.1, azimuth: 0.02, elevation: 0.03 };
        let c = measurement_covariance(&SphericalCoord::new(1.0, 0.0, 0.0), &n);
        let expected = Matrix3::from_diagonal(&Vector3::new(0.01, 0.0004, 0.0009));
        assert!((c - expected).norm() < 1e-15);
        let c2 = measurement_covariance(&SphericalCoord::new(2.0, 0.0, 0.0), &n);
        assert!((c2[(0, 0)] - c[(0, 0)]).abs() < 1e-15);
        assert!((c2[(1, 1)] - 4.0 * c[(1, 1)]).abs() < 1e-15);
        assert!((c2[(2, 2)] - 4.0 * c[(2, 2)]).abs() < 1e-15);
    }

    #[test]
    fn world_covariance_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = quat_exp(&Vector3::new(0.2, 0.4, -1.0)).to_rotation_matrix().into_inner();
        let m = random_spd3(&mut rng, 1e-3);
        let c = world_point_covariance(&PoseCovariance::zero(), &r, &Extrinsics::default(), &Vector3::new(3.0, 1.0, 0.0), &m);
        assert!((c.cov - r * m * r.transpose()).norm() < 1e-15);

        let pose = PoseCovariance {
            translation: random_spd3(&mut rng, 1e-3),
            quaternion: Matrix4::zeros(),
            rotation: random_spd3(&mut rng, 1e-3),
        };
        let c = world_point_covariance(&pose, &r, &Extrinsics::default(), &Vector3::zeros(), &m);
        assert!((c.cov - (pose.translation + r * m * r.transpose())).norm() < 1e-15);
        assert!((c.trace - c.cov.trace()).abs() < 1e-15);
    }

    #[test]
    fn disabled_mode_is_isotropic() {
        let n = SensorNoise::default();
        let c = point_covariance(
            UncertaintyMode::Disabled,
            &PoseCovariance::zero(),
            &Matrix3::identity(),
            &Extrinsics::default(),
            &SphericalCoord::new(50.0, 0.3, 0.1),
            &n,
        );
        assert!((c.cov - Matrix3::identity() * 0.01).norm() < 1e-15);
    }

    fn sample_cov(samples: &[Vector3<f64>]) -> Matrix3<f64> {
        let n = samples.len() as f64;
        let mean = samples.iter().fold(Vector3::zeros(), |a, s| a + s) / n;
        samples.iter().fold(Matrix3::zeros(), |a, s| a + (s - mean) * (s - mean).transpose()) / (n - 1.0)
    }

    fn rel(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    fn mvn(rng: &mut ChaCha8Rng, chol: &Matrix3<f64>) -> Vector3<f64> {
        use rand_distr::{Distribution, StandardNormal};
        let z = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        chol * z
    }

    #[test]
    fn monte_carlo_measurement_covariance() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = SensorNoise { range: 0.05, azimuth: 0.5f64.to_radians(), elevation: 0.5f64.to_radians() };
        let s = SphericalCoord::new(20.0, 0.4, 0.1);
        let nr = Normal::new(0.0, noise.range).unwrap();
        let na = Normal::new(0.0, noise.azimuth).unwrap();
        let ne = Normal::new(0.0, noise.elevation).unwrap();
        let samples: Vec<_> = (0..100_000)
            .map(|_| {
                SphericalCoord::new(s.range + nr.sample(&mut rng), s.azimuth + na.sample(&mut rng), s.elevation + ne.sample(&mut rng))
                    .to_cartesian()
            })
            .collect();
        let e = rel(&sample_cov(&samples), &measurement_covariance(&s, &noise));
        assert!(e < 0.05, "{e}");
    }

    #[test]
    fn monte_carlo_orientation_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = random_window(&mut rng);
        let covs: [Matrix3<f64>; 4] = std::array::from_fn(|_| random_spd3(&mut rng, 1e-4));
        let lag_cov = random_spd3(&mut rng, 1e-4);
        let t = w.segment_start() + 0.6 * w.dt;
        let q_mean = w.eval_orientation(t).unwrap();
        let chols: Vec<_> = covs.iter().map(|c| c.cholesky().unwrap().l()).collect();
        let lag_chol = lag_cov.cholesky().unwrap().l();
        let samples: Vec<_> = (0..100_000)
            .map(|_| {
                let mut p = w.clone();
                for (k, c) in chols.iter().enumerate() {
                    p.increments[k] += mvn(&mut rng, c);
                }
                p.lagged *= quat_exp(&mvn(&mut rng, &lag_chol));
                quat_log(&(q_mean.inverse() * p.eval_orientation(t).unwrap()))
            })
            .collect();
        let propagated = quat_cov_to_rotvec_cov(&q_mean, &orientation_covariance(&w, &covs, &lag_cov, t).unwrap());
        let e = rel(&sample_cov(&samples), &propagated);
        assert!(e < 0.05, "{e}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn outputs_symmetric_psd(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_window(&mut rng);
            let covs: [Matrix3<f64>; 4] = std::array::from_fn(|_| random_spd3(&mut rng, 1e-3));
            let icovs: [Matrix3<f64>; 4] = std::array::from_fn(|_| random_spd3(&mut rng, 1e-4));
            let lag = random_spd3(&mut rng, 1e-4);
            let t = w.segment_start() + rng.random_range(0.0..1.0) * w.dt * 0.999;
            let sample = w.sample(t).unwrap();
            let tc = translation_covariance(&w, &covs, t).unwrap();
            let qc = orientation_covariance(&w, &icovs, &lag, t).unwrap();
            let rc = quat_cov_to_rotvec_cov(&sample.orientation, &qc);
            prop_assert!(is_sym_psd(&tc));
            prop_assert!(is_sym_psd(&rc));
            let qe = DMatrix::from_column_slice(4, 4, qc.as_slice()).symmetric_eigen();
            prop_assert!(qe.eigenvalues.min() >= -1e-9 * qc.trace());
            let s = SphericalCoord::new(rng.random_range(1.0..80.0), rng.random_range(-1.5..1.5), rng.random_range(-0.5..0.5));
            let mc = measurement_covariance(&s, &SensorNoise::default());
            prop_assert!(is_sym_psd(&mc));
            let pose = PoseCovariance { translation: tc, quaternion: qc, rotation: rc };
            let wc = world_point_covariance(&pose, &sample.rotation, &Extrinsics::default(), &s.to_cartesian(), &mc);
            prop_assert!(is_sym_psd(&wc.cov));
            prop_assert!(wc.trace >= 0.0);
        }

        #[test]
        fn world_covariance_monotone(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = quat_exp(&Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0))).to_rotation_matrix().into_inner();
            let pose = PoseCovariance {
                translation: random_spd3(&mut rng, 1e-3),
                quaternion: Matrix4::zeros(),
                rotation: random_spd3(&mut rng, 1e-4),
            };
            let p = Vector3::from_fn(|_, _| rng.random_range(-20.0..20.0));
            let m = random_spd3(&mut rng, 1e-3);
            let base = world_point_covariance(&pose, &r, &Extrinsics::default(), &p, &m).trace;
            let bump = random_spd3(&mut rng, 1e-4);
            let mut inflated = pose;
            match rng.random_range(0..3) {
                0 => inflated.translation += bump,
                1 => inflated.rotation += bump,
                _ => {}
            }
            let m2 = if rng.random_bool(0.5) { m + bump } else { m };
            let after = world_point_covariance(&inflated, &r, &Extrinsics::default(), &p, &m2).trace;
            prop_assert!(after >= base - 1e-15);
        }
    }
}
