//! Radar scan preprocessing: Doppler ego-velocity, dynamic-point removal and
//! ego-velocity stabilization.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::SphericalCoord;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarPoint {
    /// Acquisition time, seconds.
    pub time: f64,
    pub coord: SphericalCoord,
    /// Radial velocity, m/s.
    pub doppler: f64,
    /// dBsm
    pub rcs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarScan {
    pub id: u64,
    pub points: Vec<RadarPoint>,
}

impl RadarScan {
    /// Earliest point time, or `None` for an empty scan.
    pub fn start_time(&self) -> Option<f64> {
        self.points.iter().map(|p| p.time).min_by(f64::total_cmp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarParams {
    pub ransac_iterations: usize,
    /// Inlier threshold on the Doppler residual, m/s.
    pub ransac_threshold: f64,
    pub min_inliers: usize,
    /// Dynamic-point gate, m/s.
    pub dynamic_gate: f64,
    /// Largest accepted ego-velocity change between scans, m/s.
    pub max_jump: f64,
    /// Returns closer than this are discarded, m.
    pub min_range: f64,
    pub doppler_sign: f64,
    pub seed: u64,
}

impl Default for RadarParams {
    fn default() -> Self {
        Self {
            ransac_iterations: 100,
            ransac_threshold: 0.25,
            min_inliers: 10,
            dynamic_gate: 0.5,
            max_jump: 2.0,
            min_range: 0.5,
            doppler_sign: 1.0,
            seed: 0,
        }
    }
}

/// Radar-frame velocity estimated from Doppler.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoVelocity {
    pub velocity: Vector3<f64>,
    pub inliers: usize,
    pub valid: bool,
    /// The previous estimate was substituted.
    pub reused: bool,
}

impl EgoVelocity {
    pub fn invalid() -> Self {
        Self { velocity: Vector3::zeros(), inliers: 0, valid: false, reused: false }
    }
}

/// Doppler predicted for a static target along unit `direction` when the radar moves with `v`.
pub fn static_doppler(direction: &Vector3<f64>, v: &Vector3<f64>, sign: f64) -> f64 {
    -sign * direction.dot(v)
}

fn least_squares(points: &[RadarPoint], idx: impl Iterator<Item = usize>, sign: f64) -> Option<Vector3<f64>> {
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for i in idx {
        let d = points[i].coord.direction();
        ata += d * d.transpose();
        atb += d * (-sign * points[i].doppler);
    }
    let chol = ata.cholesky()?;
    let eig_min = ata.symmetric_eigen().eigenvalues.min();
    (eig_min > 1e-9 * ata.trace()).then(|| chol.solve(&atb))
}

/// RANSAC fit of `doppler = −sign · dᵀv` followed by least squares on the consensus set.
pub fn estimate_ego_velocity(points: &[RadarPoint], params: &RadarParams, scan_seed: u64) -> EgoVelocity {
    if points.len() < 3 {
        return EgoVelocity::invalid();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ scan_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let sign = params.doppler_sign;
    let inliers_of = |v: &Vector3<f64>| -> Vec<usize> {
        (0..points.len())
            .filter(|&i| (points[i].doppler - static_doppler(&points[i].coord.direction(), v, sign)).abs() <= params.ransac_threshold)
            .collect()
    };
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..params.ransac_iterations {
        let pick = sample(&mut rng, points.len(), 3);
        let Some(v) = least_squares(points, pick.iter(), sign) else { continue };
        let inl = inliers_of(&v);
        if inl.len() > best.len() {
            best = inl;
        }
    }
    if best.len() < 3 {
        return EgoVelocity::invalid();
    }
    let Some(v) = least_squares(points, best.iter().copied(), sign) else {
        return EgoVelocity::invalid();
    };
    let inliers = inliers_of(&v);
    let v = least_squares(points, inliers.iter().copied(), sign).unwrap_or(v);
    EgoVelocity { velocity: v, inliers: inliers.len(), valid: inliers.len() >= params.min_inliers, reused: false }
}

/// Keeps points whose Doppler agrees with a static world within `gate`.
pub fn filter_dynamic(points: &[RadarPoint], ego: &EgoVelocity, gate: f64, sign: f64) -> Vec<RadarPoint> {
    if !ego.valid {
        log::warn!("invalid ego-velocity; dynamic filtering skipped");
        return points.to_vec();
    }
    points
        .iter()
        .filter(|p| (p.doppler - static_doppler(&p.coord.direction(), &ego.velocity, sign)).abs() <= gate)
        .copied()
        .collect()
}

/// Falls back to `previous` when `current` is invalid or jumps by more than `max_jump`.
pub fn stabilize_ego(current: &EgoVelocity, previous: &EgoVelocity, max_jump: f64) -> EgoVelocity {
    if !previous.valid {
        return *current;
    }
    if !current.valid || (current.velocity - previous.velocity).norm() > max_jump {
        return EgoVelocity { reused: true, ..*previous };
    }
    *current
}

/// Range gate followed by ego-velocity estimation, stabilization and dynamic removal.
pub fn preprocess(
    points: &[RadarPoint],
    previous: &EgoVelocity,
    params: &RadarParams,
    scan_seed: u64,
) -> (Vec<RadarPoint>, EgoVelocity) {
    let ranged: Vec<RadarPoint> =
        points.iter().filter(|p| p.coord.is_valid() && p.coord.range > params.min_range).copied().collect();
    let raw = estimate_ego_velocity(&ranged, params, scan_seed);
    let ego = stabilize_ego(&raw, previous, params.max_jump);
    (filter_dynamic(&ranged, &ego, params.dynamic_gate, params.doppler_sign), ego)
}
