//! Iterated extended Kalman filter over the spline state.
//!
//! State layout (30 entries):
//!
//! | range    | content                                      |
//! |----------|----------------------------------------------|
//! | `0..12`  | translation control points `t₀ t₁ t₂ t₃`     |
//! | `12..24` | orientation increments `δ₀ δ₁ δ₂ δ₃`          |
//! | `24..27` | accelerometer bias                           |
//! | `27..30` | gyroscope bias                               |
//!
//! The lagged quaternion anchoring the orientation spline lives outside the
//! vector, together with its rotation-vector covariance.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::geometry::{quat_exp, so3_right_jacobian, Quat};
use crate::localizability::ConstraintMatrix;
use crate::spline::SplineWindow;

pub const STATE_DIM: usize = 30;
pub const TRANSLATION: usize = 0;
pub const INCREMENT: usize = 12;
pub const ACCEL_BIAS: usize = 24;
pub const GYRO_BIAS: usize = 27;
/// Offset of the newest translation control point.
pub const NEWEST_TRANSLATION: usize = 9;
/// Offset of the newest orientation increment.
pub const NEWEST_INCREMENT: usize = 21;

/// Which measurement model produced a residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualSource {
    Plane,
    Distribution,
    Doppler,
    Gyro,
    Gravity,
    /// Anything else, e.g. toy problems in tests.
    Generic,
}

/// One measurement: `residual = z − h(x)`, its Jacobian `∂h/∂x` and noise covariance.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub residual: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub source: ResidualSource,
}

impl ResidualBlock {
    pub fn scalar(residual: f64, jacobian: DMatrix<f64>, variance: f64, source: ResidualSource) -> Self {
        debug_assert_eq!(jacobian.nrows(), 1);
        Self {
            residual: DVector::from_element(1, residual),
            jacobian,
            covariance: DMatrix::from_element(1, 1, variance),
            source,
        }
    }

    pub fn dim(&self) -> usize {
        self.residual.len()
    }

    /// `R⁻¹`, or `None` when the covariance is not positive definite.
    fn information(&self) -> Option<DMatrix<f64>> {
        if self.dim() == 1 {
            let v = self.covariance[(0, 0)];
            return (v > 0.0 && v.is_finite()).then(|| DMatrix::from_element(1, 1, 1.0 / v));
        }
        self.covariance.clone().cholesky().map(|c| c.inverse())
    }
}

/// Process noise standard deviations applied at each knot advance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessNoise {
    /// meters, on the newly spawned translation control point
    pub translation: f64,
    /// radians, on the newly spawned orientation increment
    pub increment: f64,
    pub accel_bias: f64,
    pub gyro_bias: f64,
}

impl Default for ProcessNoise {
    fn default() -> Self {
        Self { translation: 0.05, increment: 0.01, accel_bias: 1e-3, gyro_bias: 1e-4 }
    }
}

/// Linear knot-advance model `x ← A x`, `P ← A P Aᵀ + Q`.
#[derive(Clone, Debug)]
pub struct ProcessModel {
    pub transition: DMatrix<f64>,
    pub noise: DMatrix<f64>,
}

impl ProcessModel {
    pub fn new(noise: &ProcessNoise) -> Self {
        let mut a = DMatrix::zeros(STATE_DIM, STATE_DIM);
        let mut put = |row: usize, col: usize, v: f64| {
            for d in 0..3 {
                a[(row * 3 + d, col * 3 + d)] = v;
            }
        };
        // Translation: shift, newest = 2·t_{i-1} − t_{i-3}.
        put(0, 1, 1.0);
        put(1, 2, 1.0);
        put(2, 3, 1.0);
        put(3, 0, -1.0);
        put(3, 2, 2.0);
        // Increments: shift, newest = δ_{i-2}.
        put(4, 5, 1.0);
        put(5, 6, 1.0);
        put(6, 7, 1.0);
        put(7, 5, 1.0);
        put(8, 8, 1.0);
        put(9, 9, 1.0);

        let mut q = DMatrix::zeros(STATE_DIM, STATE_DIM);
        for d in 0..3 {
            q[(NEWEST_TRANSLATION + d, NEWEST_TRANSLATION + d)] = noise.translation.powi(2);
            q[(NEWEST_INCREMENT + d, NEWEST_INCREMENT + d)] = noise.increment.powi(2);
            q[(ACCEL_BIAS + d, ACCEL_BIAS + d)] = noise.accel_bias.powi(2);
            q[(GYRO_BIAS + d, GYRO_BIAS + d)] = noise.gyro_bias.powi(2);
        }
        Self { transition: a, noise: q }
    }
}

/// Spline state, covariance and the lagged orientation anchor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
    pub lagged: Quat,
    /// Rotation-vector covariance of the lagged quaternion (right perturbation).
    pub lagged_cov: Matrix3<f64>,
    /// Index of the newest knot.
    pub knot_index: i64,
    /// Time of the oldest active knot.
    pub first_knot: f64,
    pub dt: f64,
}

impl FilterState {
    /// A window at rest at `position`/`orientation` whose active segment starts at `start_time`.
    pub fn at_rest(
        start_time: f64,
        dt: f64,
        position: Vector3<f64>,
        orientation: Quat,
        initial_std: &InitialStd,
    ) -> Self {
        let mut x = DVector::zeros(STATE_DIM);
        for k in 0..4 {
            x.fixed_rows_mut::<3>(TRANSLATION + 3 * k).copy_from(&position);
        }
        let mut p = DMatrix::zeros(STATE_DIM, STATE_DIM);
        for d in 0..12 {
            p[(TRANSLATION + d, TRANSLATION + d)] = initial_std.translation.powi(2);
            p[(INCREMENT + d, INCREMENT + d)] = initial_std.increment.powi(2);
        }
        for d in 0..3 {
            p[(ACCEL_BIAS + d, ACCEL_BIAS + d)] = initial_std.accel_bias.powi(2);
            p[(GYRO_BIAS + d, GYRO_BIAS + d)] = initial_std.gyro_bias.powi(2);
        }
        Self {
            x,
            p,
            lagged: orientation,
            lagged_cov: Matrix3::zeros(),
            knot_index: 3,
            first_knot: start_time - 2.0 * dt,
            dt,
        }
    }

    pub fn accel_bias(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(ACCEL_BIAS).into_owned()
    }

    pub fn gyro_bias(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(GYRO_BIAS).into_owned()
    }

    pub fn set_gyro_bias(&mut self, b: &Vector3<f64>) {
        self.x.fixed_rows_mut::<3>(GYRO_BIAS).copy_from(b);
    }

    pub fn set_accel_bias(&mut self, b: &Vector3<f64>) {
        self.x.fixed_rows_mut::<3>(ACCEL_BIAS).copy_from(b);
    }

    /// Time of the newest knot, the (exclusive) end of the active segment.
    pub fn newest_knot_time(&self) -> f64 {
        self.first_knot + 3.0 * self.dt
    }

    pub fn window(&self) -> SplineWindow {
        state_to_window(self)
    }

    /// 3×3 marginal covariance of the block starting at `offset`.
    pub fn block_cov(&self, offset: usize) -> Matrix3<f64> {
        self.p.fixed_view::<3, 3>(offset, offset).into_owned()
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().all(|v| v.is_finite()) && self.p.iter().all(|v| v.is_finite())
    }
}

/// Initial one-sigma values for the diagonal prior covariance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialStd {
    pub translation: f64,
    pub increment: f64,
    pub accel_bias: f64,
    pub gyro_bias: f64,
}

impl Default for InitialStd {
    fn default() -> Self {
        Self { translation: 0.01, increment: 0.01, accel_bias: 0.05, gyro_bias: 0.005 }
    }
}

pub fn state_to_window(s: &FilterState) -> SplineWindow {
    SplineWindow {
        first_knot: s.first_knot,
        dt: s.dt,
        translations: std::array::from_fn(|k| s.x.fixed_rows::<3>(TRANSLATION + 3 * k).into_owned()),
        increments: std::array::from_fn(|k| s.x.fixed_rows::<3>(INCREMENT + 3 * k).into_owned()),
        lagged: s.lagged,
    }
}

/// Writes a window's control points back into `s`, leaving biases and covariance untouched.
pub fn window_to_state(w: &SplineWindow, s: &mut FilterState) {
    for k in 0..4 {
        s.x.fixed_rows_mut::<3>(TRANSLATION + 3 * k).copy_from(&w.translations[k]);
        s.x.fixed_rows_mut::<3>(INCREMENT + 3 * k).copy_from(&w.increments[k]);
    }
    s.lagged = w.lagged;
    s.first_knot = w.first_knot;
    s.dt = w.dt;
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let t = p.transpose();
    *p += t;
    *p *= 0.5;
}

/// Advances the spline by one knot.
///
/// The oldest increment is folded into the lagged quaternion and its marginal
/// covariance composed, to first order, into the lagged covariance.
pub fn predict(s: &FilterState, model: &ProcessModel) -> FilterState {
    let folded = s.x.fixed_rows::<3>(INCREMENT).into_owned();
    let folded_cov = s.block_cov(INCREMENT);
    let rot_t = quat_exp(&folded).to_rotation_matrix().into_inner().transpose();
    let jr = so3_right_jacobian(&folded);

    let a = &model.transition;
    let mut p = a * &s.p * a.transpose() + &model.noise;
    symmetrize(&mut p);
    FilterState {
        x: a * &s.x,
        p,
        lagged: s.lagged * quat_exp(&folded),
        lagged_cov: rot_t * s.lagged_cov * rot_t.transpose() + jr * folded_cov * jr.transpose(),
        knot_index: s.knot_index + 1,
        first_knot: s.first_knot + s.dt,
        dt: s.dt,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateOptions {
    /// Stop once the projected increment norm falls below this.
    pub epsilon: f64,
    pub max_iters: usize,
}

impl Default for UpdateOptions {
    fn default() -> Self {
        Self { epsilon: 1e-4, max_iters: 10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateStatus {
    Converged,
    MaxIterations,
    /// No residuals were supplied; the state is unchanged.
    NoResiduals,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub status: UpdateStatus,
    /// Number of increments computed.
    pub iterations: usize,
    /// Whether a normal matrix needed diagonal loading.
    pub regularized: bool,
    /// MAP objective at each linearization point.
    pub objective: Vec<f64>,
    pub residual_count: usize,
}

/// Result of the dimension-generic iterated update.
#[derive(Clone, Debug)]
pub struct IteratedSolution {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
    pub report: UpdateReport,
}

struct Normal {
    info: DMatrix<f64>,
    grad: DVector<f64>,
    data_cost: f64,
    rows: usize,
}

fn accumulate(blocks: &[ResidualBlock], n: usize) -> Normal {
    let mut info = DMatrix::zeros(n, n);
    let mut grad = DVector::zeros(n);
    let mut data_cost = 0.0;
    let mut rows = 0;
    for b in blocks {
        let Some(w) = b.information() else {
            log::warn!("dropping {:?} residual with non-positive covariance", b.source);
            continue;
        };
        rows += b.dim();
        if b.dim() == 1 {
            let wi = w[(0, 0)];
            let h = b.jacobian.row(0).transpose();
            info.ger(wi, &h, &h, 1.0);
            grad.axpy(wi * b.residual[0], &h, 1.0);
            data_cost += wi * b.residual[0] * b.residual[0];
        } else {
            let htw = b.jacobian.transpose() * &w;
            info.gemm(1.0, &htw, &b.jacobian, 1.0);
            grad.gemv(1.0, &htw, &b.residual, 1.0);
            data_cost += (b.residual.transpose() * &w * &b.residual)[(0, 0)];
        }
    }
    Normal { info, grad, data_cost, rows }
}

/// Inverse of a symmetric positive (semi)definite matrix, loading the diagonal when needed.
fn spd_inverse(m: &DMatrix<f64>, regularized: &mut bool) -> DMatrix<f64> {
    if let Some(c) = m.clone().cholesky() {
        return c.inverse();
    }
    *regularized = true;
    let n = m.nrows();
    let scale = (m.trace() / n as f64).abs().max(1e-12);
    let mut load = 1e-12 * scale;
    loop {
        let loaded = m + DMatrix::identity(n, n) * load;
        if let Some(c) = loaded.cholesky() {
            log::warn!("normal matrix regularized with diagonal load {load:e}");
            return c.inverse();
        }
        load *= 100.0;
    }
}

/// Iterated update in information form on an arbitrary-dimension state.
///
/// Each iteration relinearizes through `assemble`, computes
/// `δx = Λ⁻¹ (Hᵀ R⁻¹ r − P⁻¹ (x_j − x̄))` with `Λ = Hᵀ R⁻¹ H + P⁻¹`,
/// which is algebraically the gain form `K r − (I − K H)(x_j − x̄)`, passes the
/// increment through `project`, and stops when `‖δx‖ < ε`.
/// The posterior covariance is `(I − K H) P = Λ⁻¹` at the last linearization.
pub fn iterate_map<A, Pr>(
    prior_x: &DVector<f64>,
    prior_p: &DMatrix<f64>,
    mut assemble: A,
    project: Pr,
    opts: &UpdateOptions,
) -> IteratedSolution
where
    A: FnMut(&DVector<f64>) -> Vec<ResidualBlock>,
    Pr: Fn(&mut DVector<f64>),
{
    let n = prior_x.len();
    let mut regularized = false;
    let prior_info = spd_inverse(prior_p, &mut regularized);
    let mut x = prior_x.clone();
    let mut objective = Vec::new();
    let mut posterior = prior_p.clone();
    let mut iterations = 0;
    let mut residual_count = 0;

    let status = loop {
        let blocks = assemble(&x);
        if blocks.is_empty() {
            if iterations == 0 {
                log::warn!("iterated update called without residuals; state unchanged");
                return IteratedSolution {
                    x,
                    p: prior_p.clone(),
                    report: UpdateReport {
                        status: UpdateStatus::NoResiduals,
                        iterations: 0,
                        regularized,
                        objective,
                        residual_count: 0,
                    },
                };
            }
            break UpdateStatus::Converged;
        }
        let normal = accumulate(&blocks, n);
        residual_count = normal.rows;
        let offset = &x - prior_x;
        let prior_term = &prior_info * &offset;
        let cost = 0.5 * (normal.data_cost + offset.dot(&prior_term));
        if let Some(last) = objective.last() {
            if cost > *last * (1.0 + 1e-12) + 1e-300 {
                log::debug!("MAP objective increased from {last:e} to {cost:e}");
            }
        }
        objective.push(cost);

        let lambda = normal.info + &prior_info;
        let lambda_inv = spd_inverse(&lambda, &mut regularized);
        let mut dx = &lambda_inv * (normal.grad - prior_term);
        project(&mut dx);
        posterior = lambda_inv;
        x += &dx;
        iterations += 1;
        if dx.norm() < opts.epsilon {
            break UpdateStatus::Converged;
        }
        if iterations >= opts.max_iters {
            break UpdateStatus::MaxIterations;
        }
    };
    let posterior = constrained_posterior(&posterior, prior_p, &project);
    IteratedSolution {
        x,
        p: posterior,
        report: UpdateReport { status, iterations, regularized, objective, residual_count },
    }
}

/// Covariance of the update actually applied when increments pass through `project` (matrix `Π`).
/// With applied gain `ΠK` the Joseph form reduces to `A + M (P⁻ − A) Mᵀ`, `M = I − Π`, where `A`
/// is the unconstrained posterior; discarded directions keep their prior variance and the
/// cross-covariances stay consistent.
fn constrained_posterior<Pr: Fn(&mut DVector<f64>)>(
    posterior: &DMatrix<f64>,
    prior: &DMatrix<f64>,
    project: &Pr,
) -> DMatrix<f64> {
    let n = posterior.nrows();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut col = DVector::zeros(n);
        col[j] = 1.0;
        project(&mut col);
        col = -col;
        col[j] += 1.0;
        m.set_column(j, &col);
    }
    let mut p = if m.iter().all(|v| *v == 0.0) {
        posterior.clone()
    } else {
        posterior + &m * (prior - posterior) * m.transpose()
    };
    symmetrize(&mut p);
    p
}

/// Projects the newest knot's 6-DoF increment `[δt_new, δδ_new]` onto the null space of `c`.
pub fn project_newest_knot(dx: &mut DVector<f64>, c: &ConstraintMatrix) {
    if c.is_empty() {
        return;
    }
    let mut sub = Vector6::zeros();
    sub.fixed_rows_mut::<3>(0).copy_from(&dx.fixed_rows::<3>(NEWEST_TRANSLATION));
    sub.fixed_rows_mut::<3>(3).copy_from(&dx.fixed_rows::<3>(NEWEST_INCREMENT));
    let projected = c.project(&sub);
    dx.fixed_rows_mut::<3>(NEWEST_TRANSLATION).copy_from(&projected.fixed_rows::<3>(0));
    dx.fixed_rows_mut::<3>(NEWEST_INCREMENT).copy_from(&projected.fixed_rows::<3>(3));
}

/// Localizability-constrained iterated update of the spline state.
///
/// `assemble` receives each linearization point as a full [`FilterState`].
pub fn iterated_update<A>(
    s: &FilterState,
    mut assemble: A,
    constraints: &ConstraintMatrix,
    opts: &UpdateOptions,
) -> (FilterState, UpdateReport)
where
    A: FnMut(&FilterState) -> Vec<ResidualBlock>,
{
    let mut scratch = s.clone();
    let solution = iterate_map(
        &s.x,
        &s.p,
        |x| {
            scratch.x.copy_from(x);
            assemble(&scratch)
        },
        |dx| project_newest_knot(dx, constraints),
        opts,
    );
    let mut out = s.clone();
    out.x = solution.x;
    out.p = solution.p;
    (out, solution.report)
}
