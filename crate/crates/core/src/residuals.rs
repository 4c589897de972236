//! Measurement models: point-to-plane, point-to-distribution, Doppler,
//! gyroscope and gravity direction.
//!
//! Every builder returns a [`ResidualBlock`] with `residual = z − h(x)` and the
//! Jacobian `∂h/∂x` over the full 30-entry state.

use nalgebra::{DMatrix, DVector, Matrix3, RowSVector, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::filter::{ResidualBlock, ResidualSource, ACCEL_BIAS, GYRO_BIAS, INCREMENT, STATE_DIM, TRANSLATION};
use crate::geometry::{rotate_point_inverse_jacobian, rotate_point_jacobian, skew, Extrinsics};
use crate::localizability::sorted_eigen;
use crate::spline::SplineSample;
use crate::submap::MapPoint;

pub type StateRow = RowSVector<f64, STATE_DIM>;
pub type PointJacobian = SMatrix<f64, 3, STATE_DIM>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualParams {
    /// Map admission threshold on `tr(Σ_Wp)`, m².
    pub tau_u: f64,
    /// Plane reliability threshold on `tr(Σ_pl)`, m².
    pub tau_pl: f64,
    /// Maximum RMS point-to-plane distance of the neighbors, m.
    pub plane_rms_max: f64,
    pub rcs_floor: f64,
    pub rcs_weight_max: f64,
    /// m/s
    pub sigma_doppler: f64,
    /// rad/s
    pub sigma_gyro: f64,
    /// Standard deviation of `1 − cos` for the gravity residual.
    pub sigma_gravity: f64,
    /// Gravity residuals are skipped when `‖g(t)‖` is at most this, m/s².
    pub gravity_min: f64,
    /// `+1` when positive Doppler means the target recedes.
    pub doppler_sign: f64,
}

impl Default for ResidualParams {
    fn default() -> Self {
        Self {
            tau_u: 0.5,
            tau_pl: 0.05,
            plane_rms_max: 0.2,
            rcs_floor: 0.5,
            rcs_weight_max: 2.0,
            sigma_doppler: 0.1,
            sigma_gyro: 0.01,
            sigma_gravity: 0.3,
            gravity_min: 1.0,
            doppler_sign: 1.0,
        }
    }
}

/// Relative weights of the plane and distribution routes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvWeights {
    pub plane: f64,
    pub distribution: f64,
}

impl EnvWeights {
    pub fn new(n_plane: usize, n_distribution: usize) -> Self {
        let total = n_plane + n_distribution;
        if total == 0 {
            log::warn!("no plane or distribution correspondences; using equal environment weights");
            return Self { plane: 0.5, distribution: 0.5 };
        }
        let plane = n_plane as f64 / total as f64;
        Self { plane, distribution: n_distribution as f64 / total as f64 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaneFit {
    pub normal: Vector3<f64>,
    pub point: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub reliable: bool,
    pub rms: f64,
    /// Per-neighbor combination weights, summing to one.
    pub weights: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum PlaneFitError {
    #[error("need at least three neighbors, got {0}")]
    TooFewNeighbors(usize),
    #[error("neighbors are collinear")]
    Degenerate,
}

/// Uncertainty-derived weights `(τ_u − trᵢ) / Σⱼ (τ_u − trⱼ)`.
///
/// Falls back to uniform weights when no neighbor lies below `τ_u`.
pub fn uncertainty_weights(traces: &[f64], tau_u: f64) -> Vec<f64> {
    let raw: Vec<f64> = traces.iter().map(|t| (tau_u - t).max(0.0)).collect();
    let sum: f64 = raw.iter().sum();
    if sum <= 0.0 {
        return vec![1.0 / traces.len() as f64; traces.len()];
    }
    raw.iter().map(|r| r / sum).collect()
}

pub fn fit_plane(neighbors: &[MapPoint], params: &ResidualParams) -> Result<PlaneFit, PlaneFitError> {
    if neighbors.len() < 3 {
        return Err(PlaneFitError::TooFewNeighbors(neighbors.len()));
    }
    let traces: Vec<f64> = neighbors.iter().map(|p| p.trace).collect();
    let weights = uncertainty_weights(&traces, params.tau_u);
    let centroid = neighbors.iter().zip(&weights).fold(Vector3::zeros(), |acc, (p, w)| acc + p.position * *w);
    let mut scatter = Matrix3::zeros();
    for (p, w) in neighbors.iter().zip(&weights) {
        let d = p.position - centroid;
        scatter += d * d.transpose() * *w;
    }
    let eig = sorted_eigen(&scatter);
    if eig.values[1].max(0.0).sqrt() < 1e-9 {
        return Err(PlaneFitError::Degenerate);
    }
    let normal = eig.vectors.column(0).into_owned();
    let covariance = neighbors.iter().zip(&weights).fold(Matrix3::zeros(), |acc, (p, w)| acc + p.cov * (w * w));
    let rms = (neighbors.iter().map(|p| normal.dot(&(p.position - centroid)).powi(2)).sum::<f64>()
        / neighbors.len() as f64)
        .sqrt();
    let reliable = covariance.trace() <= params.tau_pl && rms < params.plane_rms_max;
    Ok(PlaneFit { normal, point: centroid, covariance, reliable, rms, weights })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RcsDistribution {
    pub centroid: Vector3<f64>,
    pub mean_rcs: f64,
    pub rcs: Vec<f64>,
}

/// RCS-weighted centroid of the neighbors; uniform weights if any RCS is non-positive.
pub fn fit_distribution(neighbors: &[MapPoint]) -> RcsDistribution {
    assert!(!neighbors.is_empty(), "distribution needs at least one neighbor");
    let rcs: Vec<f64> = neighbors.iter().map(|p| p.rcs).collect();
    let n = neighbors.len() as f64;
    let mean_rcs = rcs.iter().sum::<f64>() / n;
    let centroid = if rcs.iter().all(|r| *r > 0.0) {
        let total: f64 = rcs.iter().sum();
        neighbors.iter().fold(Vector3::zeros(), |acc, p| acc + p.position * (p.rcs / total))
    } else {
        neighbors.iter().fold(Vector3::zeros(), |acc, p| acc + p.position) / n
    };
    RcsDistribution { centroid, mean_rcs, rcs }
}

pub fn rcs_weight(mean_rcs: f64, rcs: f64, params: &ResidualParams) -> f64 {
    (1.0 / (mean_rcs - rcs).abs().max(params.rcs_floor)).min(params.rcs_weight_max)
}

/// A radar return mapped into the world frame at the current linearization point.
#[derive(Clone, Debug)]
pub struct WorldPoint {
    /// Return position in the body frame.
    pub body: Vector3<f64>,
    pub world: Vector3<f64>,
    /// `∂world/∂x`.
    pub jacobian: PointJacobian,
}

pub fn world_point(sample: &SplineSample, extrinsics: &Extrinsics, radar_point: &Vector3<f64>) -> WorldPoint {
    let body = extrinsics.to_body(radar_point);
    let world = sample.position + sample.rotation * body;
    let mut jacobian = PointJacobian::zeros();
    jacobian.fixed_view_mut::<3, 12>(0, TRANSLATION).copy_from(&sample.translation_jacobian());
    let drot = rotate_point_jacobian(&sample.orientation, &body);
    for (j, dq) in sample.dq_dincrement.iter().enumerate() {
        jacobian.fixed_view_mut::<3, 3>(0, INCREMENT + 3 * j).copy_from(&(drot * dq));
    }
    WorldPoint { body, world, jacobian }
}

fn row_to_dmatrix(row: &StateRow) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, STATE_DIM, row.as_slice())
}

/// Point-to-plane residual, weighted by the plane route's environment weight.
pub fn plane_residual(point: &WorldPoint, plane: &PlaneFit, point_cov: &Matrix3<f64>, weight: f64) -> ResidualBlock {
    let n = &plane.normal;
    let h = weight * n.dot(&(point.world - plane.point));
    let jac = n.transpose() * point.jacobian * weight;
    let var = (n.transpose() * plane.covariance * n)[(0, 0)] + (n.transpose() * point_cov * n)[(0, 0)];
    ResidualBlock::scalar(-h, row_to_dmatrix(&jac), var, ResidualSource::Plane)
}

/// Point-to-centroid distance residual; `None` when the point sits on the centroid.
pub fn distribution_residual(
    point: &WorldPoint,
    dist: &RcsDistribution,
    point_cov: &Matrix3<f64>,
    point_rcs: f64,
    weight: f64,
    params: &ResidualParams,
) -> Option<ResidualBlock> {
    let diff = point.world - dist.centroid;
    let distance = diff.norm();
    if distance < 1e-9 {
        return None;
    }
    let d = diff / distance;
    let scale = weight * rcs_weight(dist.mean_rcs, point_rcs, params);
    let jac = d.transpose() * point.jacobian * scale;
    let var = (d.transpose() * point_cov * d)[(0, 0)];
    Some(ResidualBlock::scalar(-scale * distance, row_to_dmatrix(&jac), var, ResidualSource::Distribution))
}

/// Predicted Doppler of a static target along radar-frame unit direction `direction`.
pub fn predicted_doppler(
    sample: &SplineSample,
    extrinsics: &Extrinsics,
    direction: &Vector3<f64>,
    params: &ResidualParams,
) -> (f64, StateRow) {
    let d_body = extrinsics.rotation * direction;
    let rt = sample.rotation.transpose();
    let body_velocity = rt * sample.velocity + sample.angular_velocity.cross(&extrinsics.translation);
    let s = -params.doppler_sign;
    let h = s * d_body.dot(&body_velocity);

    let mut jac = StateRow::zeros();
    let dv_dt = rt * sample.velocity_jacobian();
    jac.fixed_columns_mut::<12>(TRANSLATION).copy_from(&(d_body.transpose() * dv_dt * s));
    let drot = rotate_point_inverse_jacobian(&sample.orientation, &sample.velocity);
    let lever = -skew(&extrinsics.translation);
    for j in 0..4 {
        let block = drot * sample.dq_dincrement[j] + lever * sample.domega_dincrement[j];
        jac.fixed_columns_mut::<3>(INCREMENT + 3 * j).copy_from(&(d_body.transpose() * block * s));
    }
    (h, jac)
}

pub fn doppler_residual(
    sample: &SplineSample,
    extrinsics: &Extrinsics,
    direction: &Vector3<f64>,
    measured: f64,
    params: &ResidualParams,
) -> ResidualBlock {
    let (h, jac) = predicted_doppler(sample, extrinsics, direction, params);
    ResidualBlock::scalar(measured - h, row_to_dmatrix(&jac), params.sigma_doppler.powi(2), ResidualSource::Doppler)
}

pub fn gyro_residual(
    sample: &SplineSample,
    gyro_bias: &Vector3<f64>,
    measured: &Vector3<f64>,
    params: &ResidualParams,
) -> ResidualBlock {
    let h = sample.angular_velocity + gyro_bias;
    let mut jac = SMatrix::<f64, 3, STATE_DIM>::zeros();
    for j in 0..4 {
        jac.fixed_view_mut::<3, 3>(0, INCREMENT + 3 * j).copy_from(&sample.domega_dincrement[j]);
    }
    jac.fixed_view_mut::<3, 3>(0, GYRO_BIAS).copy_from(&Matrix3::identity());
    ResidualBlock {
        residual: DVector::from_column_slice((measured - h).as_slice()),
        jacobian: DMatrix::from_column_slice(3, STATE_DIM, jac.as_slice()),
        covariance: DMatrix::identity(3, 3) * params.sigma_gyro.powi(2),
        source: ResidualSource::Gyro,
    }
}

/// Gravity estimate `R(â − b_a) − ẗ` and its Jacobian.
pub fn gravity_estimate(sample: &SplineSample, accel_bias: &Vector3<f64>, accel: &Vector3<f64>) -> (Vector3<f64>, PointJacobian) {
    let f = accel - accel_bias;
    let g = sample.rotation * f - sample.acceleration;
    let mut jac = PointJacobian::zeros();
    jac.fixed_view_mut::<3, 12>(0, TRANSLATION).copy_from(&(-sample.acceleration_jacobian()));
    let drot = rotate_point_jacobian(&sample.orientation, &f);
    for (j, dq) in sample.dq_dincrement.iter().enumerate() {
        jac.fixed_view_mut::<3, 3>(0, INCREMENT + 3 * j).copy_from(&(drot * dq));
    }
    jac.fixed_view_mut::<3, 3>(0, ACCEL_BIAS).copy_from(&(-sample.rotation));
    (g, jac)
}

/// `1 − cos∠(g(t), up)`; `None` if the estimated specific force is too small.
pub fn gravity_residual(
    sample: &SplineSample,
    accel_bias: &Vector3<f64>,
    accel: &Vector3<f64>,
    up: &Vector3<f64>,
    params: &ResidualParams,
) -> Option<ResidualBlock> {
    let (g, dg) = gravity_estimate(sample, accel_bias, accel);
    let norm = g.norm();
    if norm <= params.gravity_min {
        return None;
    }
    let g_hat = g / norm;
    let up = up.normalize();
    let h = 1.0 - g_hat.dot(&up);
    let dh_dg = -(up.transpose() * (Matrix3::identity() - g_hat * g_hat.transpose())) / norm;
    let jac = dh_dg * dg;
    Some(ResidualBlock::scalar(-h, row_to_dmatrix(&jac), params.sigma_gravity.powi(2), ResidualSource::Gravity))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::filter::{FilterState, InitialStd};
    use crate::geometry::{quat_exp, Quat, SphericalCoord};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_state(rng: &mut ChaCha8Rng) -> FilterState {
        let mut s = FilterState::at_rest(10.2, 0.1, Vector3::zeros(), Quat::identity(), &InitialStd::default());
        for i in 0..STATE_DIM {
            let scale = if i < INCREMENT { 3.0 } else if i < ACCEL_BIAS { 0.3 } else { 0.05 };
            s.x[i] = rng.random_range(-1.0..1.0) * scale;
        }
        s.lagged = quat_exp(&Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)));
        s
    }

    pub(crate) fn random_extrinsics(rng: &mut ChaCha8Rng) -> Extrinsics {
        Extrinsics {
            rotation: quat_exp(&Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5))),
            translation: Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5)),
        }
    }

    pub(crate) fn map_point(p: Vector3<f64>, trace: f64, rcs: f64) -> MapPoint {
        MapPoint::new(p, Matrix3::identity() * (trace / 3.0), rcs, 0)
    }

    fn mid_time(s: &FilterState, rng: &mut ChaCha8Rng) -> f64 {
        let w = s.window();
        w.segment_start() + rng.random_range(0.05..0.95) * w.dt
    }

    /// Central differences of `h` over all state entries.
    pub(crate) fn fd_jacobian(s: &FilterState, rows: usize, h: impl Fn(&FilterState) -> DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(rows, STATE_DIM);
        for i in 0..STATE_DIM {
            let step = 1e-6 * s.x[i].abs().max(1.0);
            let mut a = s.clone();
            let mut b = s.clone();
            a.x[i] += step;
            b.x[i] -= step;
            let col = (h(&a) - h(&b)) / (2.0 * step);
            j.set_column(i, &col);
        }
        j
    }

    pub(crate) fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-8)
    }

    fn scalar(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn env_weight_examples() {
        assert_eq!(EnvWeights::new(10, 10), EnvWeights { plane: 0.5, distribution: 0.5 });
        assert_eq!(EnvWeights::new(0, 4), EnvWeights { plane: 0.0, distribution: 1.0 });
        assert_eq!(EnvWeights::new(30, 10), EnvWeights { plane: 0.75, distribution: 0.25 });
        assert_eq!(EnvWeights::new(0, 0), EnvWeights { plane: 0.5, distribution: 0.5 });
    }

    #[test]
    fn coplanar_equal_covariances() {
        let cov = Matrix3::from_diagonal(&Vector3::new(0.01, 0.02, 0.005));
        let pts: Vec<_> = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (0.5, 0.3)]
            .iter()
            .map(|(x, y)| MapPoint::new(Vector3::new(*x, *y, 0.0), cov, 10.0, 0))
            .collect();
        let fit = fit_plane(&pts, &ResidualParams::default()).unwrap();
        for w in &fit.weights {
            assert!((w - 0.2).abs() < 1e-15);
        }
        assert!((fit.covariance - cov / 5.0).norm() < 1e-15);
        assert!((fit.normal.z.abs() - 1.0).abs() < 1e-12);
        assert!(fit.reliable);
        assert!(fit.rms < 1e-12);
    }

    #[test]
    fn near_threshold_neighbor_gets_no_weight() {
        let tau = ResidualParams::default().tau_u;
        let w = uncertainty_weights(&[0.1, 0.1, 0.1, 0.1, tau - 1e-12], tau);
        assert!(w[4] < 1e-10);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_neighbors_rejected() {
        let pts: Vec<_> = (0..5).map(|i| map_point(Vector3::new(i as f64, 2.0 * i as f64, 0.0), 0.01, 1.0)).collect();
        assert_eq!(fit_plane(&pts, &ResidualParams::default()), Err(PlaneFitError::Degenerate));
    }

    #[test]
    fn rough_neighbors_unreliable() {
        let pts: Vec<_> = [0.0, 1.0, 0.0, 1.0, 0.5]
            .iter()
            .zip([0.0, 0.0, 1.0, 1.0, 0.5])
            .zip([0.0, 0.0, 0.0, 0.0, 1.0])
            .map(|((x, y), z)| map_point(Vector3::new(*x, y, z), 0.001, 1.0))
            .collect();
        let fit = fit_plane(&pts, &ResidualParams::default()).unwrap();
        assert!(!fit.reliable);
    }

    #[test]
    fn rcs_weighted_centroid_and_fallback() {
        let pts = vec![map_point(Vector3::new(0.0, 0.0, 0.0), 0.01, 1.0), map_point(Vector3::new(4.0, 0.0, 0.0), 0.01, 3.0)];
        let d = fit_distribution(&pts);
        assert!((d.centroid - Vector3::new(3.0, 0.0, 0.0)).norm() < 1e-15);
        assert_eq!(d.mean_rcs, 2.0);
        let pts = vec![map_point(Vector3::new(0.0, 0.0, 0.0), 0.01, -1.0), map_point(Vector3::new(4.0, 0.0, 0.0), 0.01, 3.0)];
        assert!((fit_distribution(&pts).centroid - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn rcs_weight_cap() {
        let p = ResidualParams::default();
        assert_eq!(rcs_weight(5.0, 5.0, &p), 2.0);
        assert_eq!(rcs_weight(5.0, 1.0, &p), 0.25);
    }

    #[test]
    fn plane_residual_zero_on_plane_and_linear_along_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_state(&mut rng);
        let t = mid_time(&s, &mut rng);
        let sample = s.window().sample(t).unwrap();
        let ext = Extrinsics::default();
        let radar = Vector3::new(5.0, 1.0, 0.5);
        let wp = world_point(&sample, &ext, &radar);
        let plane = PlaneFit {
            normal: Vector3::new(0.0, 0.6, 0.8),
            point: wp.world,
            covariance: Matrix3::identity() * 1e-3,
            reliable: true,
            rms: 0.0,
            weights: vec![],
        };
        let r = plane_residual(&wp, &plane, &Matrix3::zeros(), 1.0);
        assert!(r.residual[0].abs() < 1e-12);
        let mut moved = s.clone();
        for k in 0..4 {
            let mut t = moved.x.fixed_rows_mut::<3>(3 * k);
            t += plane.normal * 0.7;
        }
        let wp2 = world_point(&moved.window().sample(t).unwrap(), &ext, &radar);
        let r2 = plane_residual(&wp2, &plane, &Matrix3::zeros(), 1.0);
        assert!((r2.residual[0] + 0.7).abs() < 1e-12);
    }

    #[test]
    fn distribution_residual_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_state(&mut rng);
        let sample = s.window().sample(mid_time(&s, &mut rng)).unwrap();
        let wp = world_point(&sample, &Extrinsics::default(), &Vector3::new(3.0, 0.0, 0.0));
        let dir = Vector3::new(1.0, 2.0, 2.0) / 3.0;
        let dist = RcsDistribution { centroid: wp.world - dir * 0.01, mean_rcs: 4.0, rcs: vec![4.0] };
        let p = ResidualParams::default();
        let r = distribution_residual(&wp, &dist, &Matrix3::identity(), 3.0, 1.0, &p).unwrap();
        assert!((r.residual[0] + 0.01).abs() < 1e-12);
        let on_top = RcsDistribution { centroid: wp.world, mean_rcs: 4.0, rcs: vec![4.0] };
        assert!(distribution_residual(&wp, &on_top, &Matrix3::identity(), 3.0, 1.0, &p).is_none());
    }

    #[test]
    fn doppler_static_and_forward() {
        let p = ResidualParams::default();
        let s = FilterState::at_rest(1.0, 0.1, Vector3::new(1.0, 2.0, 3.0), quat_exp(&Vector3::new(0.1, 0.2, 0.3)), &InitialStd::default());
        let sample = s.window().sample(1.05).unwrap();
        let dir = SphericalCoord::new(1.0, 0.7, 0.2).direction();
        let (h, _) = predicted_doppler(&sample, &Extrinsics::default(), &dir, &p);
        assert!(h.abs() < 1e-12);

        // Constant forward velocity along body x, identity orientation.
        let mut s = FilterState::at_rest(1.0, 0.1, Vector3::zeros(), Quat::identity(), &InitialStd::default());
        for k in 0..4 {
            s.x[3 * k] = 2.0 * 0.1 * k as f64;
        }
        let sample = s.window().sample(1.03).unwrap();
        let (h, _) = predicted_doppler(&sample, &Extrinsics::default(), &Vector3::x(), &p);
        assert!((h + 2.0).abs() < 1e-12);
        let r = doppler_residual(&sample, &Extrinsics::default(), &Vector3::x(), -2.0, &p);
        assert!(r.residual[0].abs() < 1e-12);
    }

    #[test]
    fn gyro_bias_shift() {
        let s = FilterState::at_rest(1.0, 0.1, Vector3::zeros(), Quat::identity(), &InitialStd::default());
        let sample = s.window().sample(1.02).unwrap();
        let p = ResidualParams::default();
        let r = gyro_residual(&sample, &Vector3::zeros(), &Vector3::zeros(), &p);
        assert_eq!(r.residual.norm(), 0.0);
        let b = Vector3::new(0.01, -0.02, 0.03);
        let r = gyro_residual(&sample, &b, &Vector3::zeros(), &p);
        assert!((r.residual - DVector::from_column_slice((-b).as_slice())).norm() < 1e-15);
    }

    #[test]
    fn gravity_aligned_and_opposed() {
        let s = FilterState::at_rest(1.0, 0.1, Vector3::zeros(), Quat::identity(), &InitialStd::default());
        let sample = s.window().sample(1.02).unwrap();
        let p = ResidualParams::default();
        let up = Vector3::z();
        let r = gravity_residual(&sample, &Vector3::zeros(), &Vector3::new(0.0, 0.0, 9.81), &up, &p).unwrap();
        assert!(r.residual[0].abs() < 1e-15);
        let r = gravity_residual(&sample, &Vector3::zeros(), &Vector3::new(0.0, 0.0, -9.81), &up, &p).unwrap();
        assert!((r.residual[0] + 2.0).abs() < 1e-15);
        assert!(gravity_residual(&sample, &Vector3::zeros(), &Vector3::new(0.0, 0.0, 0.5), &up, &p).is_none());
    }

    fn scene_plane(rng: &mut ChaCha8Rng) -> PlaneFit {
        PlaneFit {
            normal: Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize(),
            point: Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)),
            covariance: Matrix3::identity() * 1e-3,
            reliable: true,
            rms: 0.0,
            weights: vec![],
        }
    }

    pub(crate) fn check_all_jacobians(seed: u64) -> [f64; 5] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_state(&mut rng);
        let t = mid_time(&s, &mut rng);
        let ext = random_extrinsics(&mut rng);
        let p = ResidualParams::default();
        let radar = SphericalCoord::new(rng.random_range(2.0..40.0), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3));
        let radar_p = radar.to_cartesian();
        let plane = scene_plane(&mut rng);
        let cov = Matrix3::identity() * 0.01;

        let eval = |st: &FilterState| st.window().sample(t).unwrap();
        let sample = eval(&s);

        let plane_h = |st: &FilterState| scalar(-plane_residual(&world_point(&eval(st), &ext, &radar_p), &plane, &cov, 0.7).residual[0]);
        let plane_an = plane_residual(&world_point(&sample, &ext, &radar_p), &plane, &cov, 0.7).jacobian;
        let e_plane = rel_err(&plane_an, &fd_jacobian(&s, 1, plane_h));

        let dist = RcsDistribution {
            centroid: world_point(&sample, &ext, &radar_p).world + Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            mean_rcs: 5.0,
            rcs: vec![5.0],
        };
        let dist_h = |st: &FilterState| {
            scalar(-distribution_residual(&world_point(&eval(st), &ext, &radar_p), &dist, &cov, 3.0, 0.4, &p).unwrap().residual[0])
        };
        let dist_an = distribution_residual(&world_point(&sample, &ext, &radar_p), &dist, &cov, 3.0, 0.4, &p).unwrap().jacobian;
        let e_dist = rel_err(&dist_an, &fd_jacobian(&s, 1, dist_h));

        let dir = radar.direction();
        let dop_h = |st: &FilterState| scalar(predicted_doppler(&eval(st), &ext, &dir, &p).0);
        let dop_an = doppler_residual(&sample, &ext, &dir, 0.0, &p).jacobian;
        let e_dop = rel_err(&dop_an, &fd_jacobian(&s, 1, dop_h));

        let gyro_h = |st: &FilterState| {
            let sm = eval(st);
            DVector::from_column_slice((sm.angular_velocity + st.gyro_bias()).as_slice())
        };
        let gyro_an = gyro_residual(&sample, &s.gyro_bias(), &Vector3::zeros(), &p).jacobian;
        let e_gyro = rel_err(&gyro_an, &fd_jacobian(&s, 3, gyro_h));

        let accel = Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0)) + Vector3::new(0.0, 0.0, 9.81);
        let up = Vector3::z();
        let grav = |st: &FilterState| gravity_residual(&eval(st), &st.accel_bias(), &accel, &up, &p);
        let e_grav = match grav(&s) {
            Some(block) => rel_err(&block.jacobian, &fd_jacobian(&s, 1, |st| scalar(-grav(st).unwrap().residual[0]))),
            None => 0.0,
        };
        [e_plane, e_dist, e_dop, e_gyro, e_grav]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn jacobians_match_finite_differences(seed in 0u64..1_000_000) {
            let e = check_all_jacobians(seed);
            for (i, v) in e.iter().enumerate().take(4) {
                prop_assert!(*v < 1e-5, "model {i}: {v}");
            }
            prop_assert!(e[4] < 1e-4, "gravity: {}", e[4]);
        }

        #[test]
        fn plane_residual_invariant_to_plane_sample(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_state(&mut rng);
            let sample = s.window().sample(mid_time(&s, &mut rng)).unwrap();
            let wp = world_point(&sample, &Extrinsics::default(), &Vector3::new(4.0, -1.0, 0.3));
            let plane = scene_plane(&mut rng);
            let a = plane.normal.cross(&Vector3::x()).normalize();
            let mut shifted = plane.clone();
            shifted.point += a * rng.random_range(-10.0..10.0);
            let r1 = plane_residual(&wp, &plane, &Matrix3::zeros(), 1.0).residual[0];
            let r2 = plane_residual(&wp, &shifted, &Matrix3::zeros(), 1.0).residual[0];
            prop_assert!((r1 - r2).abs() < 1e-12 * (1.0 + r1.abs()) * 10.0);
        }

        #[test]
        fn eq28_weights_convex(traces in proptest::collection::vec(0.0..0.49f64, 1..8)) {
            let w = uncertainty_weights(&traces, 0.5);
            prop_assert!(w.iter().all(|v| *v >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn rigid_motion_equivariance(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_state(&mut rng);
            let t = mid_time(&s, &mut rng);
            let ext = random_extrinsics(&mut rng);
            let p = ResidualParams::default();
            let q = quat_exp(&Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)));
            let shift = Vector3::from_fn(|_, _| rng.random_range(-20.0..20.0));
            let rot = q.to_rotation_matrix().into_inner();
            let mut moved = s.clone();
            for k in 0..4 {
                let tk = moved.x.fixed_rows::<3>(3 * k).into_owned();
                moved.x.fixed_rows_mut::<3>(3 * k).copy_from(&(rot * tk + shift));
            }
            moved.lagged = q * s.lagged;
            let plane = scene_plane(&mut rng);
            let moved_plane = PlaneFit { normal: rot * plane.normal, point: rot * plane.point + shift, ..plane.clone() };
            let radar_p = Vector3::new(7.0, 2.0, -0.5);
            let dist = RcsDistribution { centroid: plane.point, mean_rcs: 2.0, rcs: vec![2.0] };
            let moved_dist = RcsDistribution { centroid: moved_plane.point, ..dist.clone() };
            let a = s.window().sample(t).unwrap();
            let b = moved.window().sample(t).unwrap();
            let wa = world_point(&a, &ext, &radar_p);
            let wb = world_point(&b, &ext, &radar_p);
            let cov = Matrix3::zeros();
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * (1.0 + x.abs());
            prop_assert!(close(plane_residual(&wa, &plane, &cov, 1.0).residual[0], plane_residual(&wb, &moved_plane, &cov, 1.0).residual[0]));
            prop_assert!(close(
                distribution_residual(&wa, &dist, &cov, 1.0, 1.0, &p).unwrap().residual[0],
                distribution_residual(&wb, &moved_dist, &cov, 1.0, 1.0, &p).unwrap().residual[0]
            ));
            let dir = radar_p.normalize();
            prop_assert!(close(predicted_doppler(&a, &ext, &dir, &p).0, predicted_doppler(&b, &ext, &dir, &p).0));
            let ga = gyro_residual(&a, &s.gyro_bias(), &Vector3::zeros(), &p).residual;
            let gb = gyro_residual(&b, &s.gyro_bias(), &Vector3::zeros(), &p).residual;
            prop_assert!((ga - gb).norm() < 1e-9);
        }
    }
}
