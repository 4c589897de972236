//! Trajectory accuracy: ATE after rigid alignment and RPE over fixed path lengths.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::io::TrajectoryPoint;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("only {0} poses could be associated; at least 10 are required")]
    TooFewPoses(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Rigid SE(3) Umeyama alignment of estimate onto ground truth.
    Se3,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Association tolerance, s.
    pub max_time_diff: f64,
    pub alignment: Alignment,
    /// Path length of RPE segments, m.
    pub segment_length: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { max_time_diff: 0.01, alignment: Alignment::Se3, segment_length: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// RMSE of position error, m.
    pub ate: f64,
    /// RMSE of relative translation error per segment length, m/m.
    pub rpe_t: f64,
    /// RMSE of relative rotation error per segment length, deg/m.
    pub rpe_r: f64,
    pub poses: usize,
    pub segments: usize,
}

/// Nearest-timestamp pairs `(est index, gt index)` within `max_dt`; both inputs time-sorted.
pub fn associate(est: &[TrajectoryPoint], gt: &[TrajectoryPoint], max_dt: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut j = 0;
    for (i, e) in est.iter().enumerate() {
        while j + 1 < gt.len() && (gt[j + 1].time - e.time).abs() <= (gt[j].time - e.time).abs() {
            j += 1;
        }
        if let Some(g) = gt.get(j) {
            if (g.time - e.time).abs() <= max_dt {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Rotation and translation minimizing `Σ‖dst − (R src + t)‖²`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> (Rotation3<f64>, Vector3<f64>) {
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = Rotation3::from_matrix_unchecked(u * s * v_t);
    (r, mu_d - r * mu_s)
}

pub fn evaluate(est: &[TrajectoryPoint], gt: &[TrajectoryPoint], opts: &EvalOptions) -> Result<Metrics, EvalError> {
    let pairs = associate(est, gt, opts.max_time_diff);
    if pairs.len() < 10 {
        return Err(EvalError::TooFewPoses(pairs.len()));
    }
    let e_pos: Vec<_> = pairs.iter().map(|&(i, _)| est[i].position).collect();
    let g_pos: Vec<_> = pairs.iter().map(|&(_, j)| gt[j].position).collect();
    let (r, t) = match opts.alignment {
        Alignment::Se3 => umeyama(&e_pos, &g_pos),
        Alignment::None => (Rotation3::identity(), Vector3::zeros()),
    };
    let ate = (e_pos.iter().zip(&g_pos).map(|(e, g)| (r * e + t - g).norm_squared()).sum::<f64>() / pairs.len() as f64).sqrt();

    let mut length = vec![0.0; pairs.len()];
    for k in 1..pairs.len() {
        length[k] = length[k - 1] + (g_pos[k] - g_pos[k - 1]).norm();
    }
    let (mut sum_t, mut sum_r, mut segments) = (0.0, 0.0, 0usize);
    let mut j = 0;
    for i in 0..pairs.len() {
        j = j.max(i);
        while j < pairs.len() && length[j] - length[i] < opts.segment_length {
            j += 1;
        }
        if j == pairs.len() {
            break;
        }
        let rel = |p: &TrajectoryPoint, q: &TrajectoryPoint| {
            let inv = p.orientation.inverse();
            (inv * q.orientation, inv * (q.position - p.position))
        };
        let (eq, et) = rel(&est[pairs[i].0], &est[pairs[j].0]);
        let (gq, gt_) = rel(&gt[pairs[i].1], &gt[pairs[j].1]);
        // Error of the estimated relative motion expressed in the ground-truth segment frame.
        let err_q: UnitQuaternion<f64> = gq.inverse() * eq;
        let err_t = gq.inverse() * (et - gt_);
        sum_t += err_t.norm_squared();
        sum_r += err_q.angle().to_degrees().powi(2);
        segments += 1;
    }
    let (rpe_t, rpe_r) = if segments == 0 {
        (0.0, 0.0)
    } else {
        let n = segments as f64;
        ((sum_t / n).sqrt() / opts.segment_length, (sum_r / n).sqrt() / opts.segment_length)
    };
    Ok(Metrics { ate, rpe_t, rpe_r, poses: pairs.len(), segments })
}
