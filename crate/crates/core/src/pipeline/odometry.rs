//! The odometry loop: one constrained iterated update per spline knot.
//!
//! For each knot interval `[t_{i-1}, t_i)` the driver gathers the IMU samples and
//! radar returns stamped inside it, removes dynamic returns, associates every
//! static return with the submap, derives the degenerate directions from the
//! plane correspondences, runs the iterated update and finally inserts the
//! returns into the map with their posterior world-frame covariance.

use nalgebra::{DVector, Matrix3, UnitQuaternion, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{
    iterate_map, predict, FilterState, ProcessModel, ResidualBlock, ResidualSource, UpdateReport, UpdateStatus, INCREMENT,
    TRANSLATION,
};
use crate::geometry::{quat_exp, Extrinsics, Quat, SphericalCoord};
use crate::localizability::{analyze, ConstraintMatrix, LocalizabilityParams, PointNormal};
use crate::pipeline::config::{ConfigError, ConstraintScope, PipelineConfig};
use crate::pipeline::io::{ImuSample, TrajectoryPoint};
use crate::radar::{preprocess, EgoVelocity, RadarParams, RadarPoint, RadarScan};
use crate::residuals::{
    distribution_residual, doppler_residual, fit_distribution, fit_plane, gravity_residual, gyro_residual, plane_residual,
    world_point, EnvWeights, PlaneFit, RcsDistribution, ResidualParams,
};
use crate::spline::{SplineSample, SplineWindow};
use crate::submap::{InsertReport, MapPoint, MapSnapshot, Submap};
use crate::uncertainty::{point_covariance, pose_covariance_at, SensorNoise, UncertaintyMode};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("filter diverged at t = {time:.3} s: {reason}")]
    Divergence { time: f64, reason: String },
    #[error("no {stream} data for {knots} knots before t = {time:.3} s; checkpoint available")]
    StreamGap { time: f64, stream: &'static str, knots: usize, checkpoint: Box<Checkpoint>, partial: Box<RunOutput> },
}

impl RunError {
    /// Process exit code: 2 input or configuration, 3 divergence, 4 stream gap.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Input(_) => 2,
            RunError::Divergence { .. } => 3,
            RunError::StreamGap { .. } => 4,
        }
    }
}

/// Everything needed to continue a run after an abort.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub state: FilterState,
    pub map: Vec<MapPoint>,
    pub ego: EgoVelocity,
    pub knots: usize,
    pub last_output: f64,
}

/// Per-knot diagnostics record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KnotDiagnostics {
    pub knot: i64,
    /// End of the knot interval, s.
    pub time: f64,
    pub status: String,
    pub iterations: usize,
    pub regularized: bool,
    pub radar_returns: usize,
    pub static_returns: usize,
    pub ego_valid: bool,
    pub ego_reused: bool,
    pub n_plane: usize,
    pub n_distribution: usize,
    pub n_unmatched: usize,
    pub n_doppler: usize,
    pub n_gyro: usize,
    pub n_gravity: usize,
    pub constrained_axes: Vec<usize>,
    pub map: InsertReport,
    pub pruned: usize,
    pub map_size: usize,
    pub covariance_trace: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    /// Poses at knot times and radar frame times, strictly increasing.
    pub trajectory: Vec<TrajectoryPoint>,
    pub map: Vec<MapPoint>,
    pub diagnostics: Vec<KnotDiagnostics>,
    pub final_state: Option<FilterState>,
}

/// A map correspondence for one radar return.
#[derive(Clone, Debug)]
enum Correspondence {
    Plane(PlaneFit),
    Distribution(RcsDistribution),
}

/// A static radar return prepared for one update.
#[derive(Clone, Debug)]
struct Return {
    time: f64,
    coord: SphericalCoord,
    /// Cartesian position in the radar frame.
    radar: Vector3<f64>,
    direction: Vector3<f64>,
    doppler: f64,
    rcs: f64,
    /// World-frame covariance at the prior.
    cov: Matrix3<f64>,
}

/// Settings derived once from the configuration.
struct Settings {
    config: PipelineConfig,
    model: ProcessModel,
    residual: ResidualParams,
    radar: RadarParams,
    noise: SensorNoise,
    loc: LocalizabilityParams,
    extrinsics: Extrinsics,
}

impl Settings {
    fn new(config: &PipelineConfig) -> Result<Self, RunError> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            model: ProcessModel::new(&config.filter.process_noise),
            residual: config.residual_params(),
            radar: config.radar_params(),
            noise: config.sensor_noise(),
            loc: config.localizability_params(),
            extrinsics: config.extrinsics(),
        })
    }

    fn mode(&self) -> UncertaintyMode {
        self.config.uncertainty.mode
    }
}

fn check_streams(radar: &[RadarScan], imu: &[ImuSample]) -> Result<(), RunError> {
    let mut last = f64::NEG_INFINITY;
    for p in radar.iter().flat_map(|s| &s.points) {
        if !(p.time >= last) {
            return Err(RunError::Input(format!("radar timestamps not sorted at t = {}", p.time)));
        }
        last = p.time;
    }
    if imu.windows(2).any(|w| !(w[1].time > w[0].time)) {
        return Err(RunError::Input("IMU timestamps not strictly increasing".into()));
    }
    if imu.is_empty() || radar.iter().all(|s| s.points.is_empty()) {
        return Err(RunError::Input("both radar and IMU streams must be non-empty".into()));
    }
    Ok(())
}

/// Gravity-aligned orientation (zero yaw) and gyro bias from a static IMU window.
pub fn initialize_from_imu(imu: &[ImuSample], duration: f64) -> Result<(Quat, Vector3<f64>, f64), RunError> {
    let t0 = imu.first().map(|s| s.time).ok_or_else(|| RunError::Input("empty IMU stream".into()))?;
    let window: Vec<&ImuSample> = imu.iter().filter(|s| s.time <= t0 + duration).collect();
    let n = window.len() as f64;
    let accel = window.iter().map(|s| s.accel).sum::<Vector3<f64>>() / n;
    let gyro = window.iter().map(|s| s.gyro).sum::<Vector3<f64>>() / n;
    if accel.norm() < 1e-6 {
        return Err(RunError::Input("initialization window has no specific force".into()));
    }
    let q = UnitQuaternion::rotation_between(&accel, &Vector3::z()).unwrap_or_else(|| {
        // Upside down: any half turn about a horizontal axis.
        UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI)
    });
    Ok((q, gyro, t0 + duration))
}

/// Runs odometry over complete streams.
pub fn run(config: &PipelineConfig, radar: &[RadarScan], imu: &[ImuSample]) -> Result<RunOutput, RunError> {
    let settings = Settings::new(config)?;
    check_streams(radar, imu)?;
    let dt = config.spline.dt;
    let (orientation, gyro_bias, init_end) = initialize_from_imu(imu, config.init.duration)?;
    let start = (init_end / dt - 1e-9).ceil() * dt;
    let mut state = FilterState::at_rest(start, dt, Vector3::zeros(), orientation, &config.filter.initial_std);
    state.set_gyro_bias(&gyro_bias);

    let mut driver = Driver::new(settings, state);
    driver.seed_map(radar.iter().flat_map(|s| &s.points).filter(|p| p.time < start));
    driver.run(radar, imu, false)
}

/// Continues from a checkpoint; knots without data directly after it are bridged by prediction.
pub fn resume(
    config: &PipelineConfig,
    checkpoint: &Checkpoint,
    radar: &[RadarScan],
    imu: &[ImuSample],
) -> Result<RunOutput, RunError> {
    let settings = Settings::new(config)?;
    check_streams(radar, imu)?;
    if (checkpoint.state.dt - config.spline.dt).abs() > 1e-12 {
        return Err(RunError::Input("checkpoint knot spacing differs from configuration".into()));
    }
    let mut driver = Driver::new(settings, checkpoint.state.clone());
    driver.map.insert_with_replacement(checkpoint.map.iter().cloned());
    driver.ego = checkpoint.ego;
    driver.knots = checkpoint.knots;
    driver.last_output = checkpoint.last_output;
    driver.run(radar, imu, true)
}

struct Driver {
    s: Settings,
    state: FilterState,
    map: Submap,
    ego: EgoVelocity,
    knots: usize,
    last_output: f64,
    out: RunOutput,
}

impl Driver {
    fn new(s: Settings, state: FilterState) -> Self {
        let map = Submap::new(s.config.submap_params());
        Self { s, state, map, ego: EgoVelocity::invalid(), knots: 0, last_output: f64::NEG_INFINITY, out: RunOutput::default() }
    }

    /// Inserts returns recorded before the first knot at the initial pose.
    fn seed_map<'a>(&mut self, points: impl Iterator<Item = &'a RadarPoint>) {
        let start = self.state.window().segment_start();
        let sample = self.state.window().sample(start).expect("segment start is inside the window");
        let pose = pose_covariance_at(&self.state, &sample);
        let candidates: Vec<MapPoint> = points
            .filter(|p| p.coord.is_valid() && p.coord.range > self.s.radar.min_range)
            .map(|p| {
                let wp = world_point(&sample, &self.s.extrinsics, &p.coord.to_cartesian());
                let cov =
                    point_covariance(self.s.mode(), &pose, &sample.rotation, &self.s.extrinsics, &p.coord, &self.s.noise);
                MapPoint::new(wp.world, cov.cov, p.rcs, 0)
            })
            .collect();
        self.map.insert_with_replacement(candidates);
    }

    fn run(mut self, radar: &[RadarScan], imu: &[ImuSample], mut bridging: bool) -> Result<RunOutput, RunError> {
        let points: Vec<(u64, RadarPoint)> = radar.iter().flat_map(|s| s.points.iter().map(move |p| (s.id, *p))).collect();
        let frame_times: Vec<f64> = radar.iter().filter_map(|s| s.start_time()).collect();
        let stop = points.last().map_or(f64::NEG_INFINITY, |p| p.1.time).min(imu.last().map_or(f64::NEG_INFINITY, |s| s.time));
        let (mut ri, mut ii, mut fi) = (0, 0, 0);
        let (mut radar_gap, mut imu_gap) = (0usize, 0usize);
        let mut last_good = None;
        let max_gap = self.s.config.runtime.max_gap_knots;

        loop {
            let window = self.state.window();
            let (t0, t1) = (window.segment_start(), window.segment_end());
            if t0 > stop {
                break;
            }
            while ri < points.len() && points[ri].1.time < t0 {
                ri += 1;
            }
            while ii < imu.len() && imu[ii].time < t0 {
                ii += 1;
            }
            let r_end = ri + points[ri..].iter().take_while(|p| window.contains(p.1.time)).count();
            let i_end = ii + imu[ii..].iter().take_while(|s| window.contains(s.time)).count();
            let seg_points: Vec<RadarPoint> = points[ri..r_end].iter().map(|p| p.1).collect();
            let seg_imu = &imu[ii..i_end];
            ri = r_end;
            ii = i_end;

            radar_gap = if seg_points.is_empty() { radar_gap + 1 } else { 0 };
            imu_gap = if seg_imu.is_empty() { imu_gap + 1 } else { 0 };
            if bridging && (radar_gap > 0 || imu_gap > 0) {
                radar_gap = 0;
                imu_gap = 0;
            } else {
                bridging = false;
            }
            if radar_gap > max_gap || imu_gap > max_gap {
                let stream = if radar_gap > max_gap { "radar" } else { "IMU" };
                let (state, ego, knots, last_output) = last_good.unwrap_or_else(|| {
                    (self.state.clone(), self.ego, self.knots, self.last_output)
                });
                let checkpoint = Checkpoint { state, map: self.map.points().cloned().collect(), ego, knots, last_output };
                self.out.trajectory.retain(|p| p.time <= checkpoint.last_output);
                self.out.diagnostics.retain(|d| d.time <= checkpoint.last_output + 1e-9);
                self.out.map = checkpoint.map.clone();
                self.out.final_state = Some(self.state.clone());
                return Err(RunError::StreamGap {
                    time: t1,
                    stream,
                    knots: radar_gap.max(imu_gap),
                    checkpoint: Box::new(checkpoint),
                    partial: Box::new(self.out),
                });
            }
            let complete = radar_gap == 0 && imu_gap == 0;

            let diag = self.step(&window, &seg_points, seg_imu)?;
            self.out.diagnostics.push(diag);

            // Poses at radar frame times inside the finished interval, then at the closing knot.
            let updated = self.state.window();
            while fi < frame_times.len() && frame_times[fi] < t1 {
                let t = frame_times[fi];
                fi += 1;
                if t >= t0 {
                    if let Ok(s) = updated.sample(t) {
                        self.push_pose(t, &s);
                    }
                }
            }
            self.state = predict(&self.state, &self.s.model);
            let next = self.state.window();
            let knot_time = next.segment_start();
            if let Ok(s) = next.sample(knot_time) {
                self.push_pose(knot_time, &s);
            }
            self.knots += 1;
            if complete {
                last_good = Some((self.state.clone(), self.ego, self.knots, self.last_output));
            }
        }
        self.out.map = self.map.points().cloned().collect();
        self.out.final_state = Some(self.state);
        Ok(self.out)
    }

    fn push_pose(&mut self, t: f64, s: &SplineSample) {
        if t > self.last_output + 1e-9 {
            self.out.trajectory.push(TrajectoryPoint { time: t, position: s.position, orientation: s.orientation });
            self.last_output = t;
        }
    }

    /// One knot: preprocess, associate, constrain, update, map.
    fn step(&mut self, window: &SplineWindow, seg_points: &[RadarPoint], imu: &[ImuSample]) -> Result<KnotDiagnostics, RunError> {
        let cfg = &self.s.config;
        let mut diag = KnotDiagnostics { knot: self.state.knot_index, time: window.segment_end(), ..Default::default() };
        diag.radar_returns = seg_points.len();

        let (static_points, ego) = if seg_points.is_empty() {
            (Vec::new(), self.ego)
        } else {
            preprocess(seg_points, &self.ego, &self.s.radar, self.state.knot_index as u64)
        };
        if !seg_points.is_empty() {
            self.ego = ego;
        }
        diag.static_returns = static_points.len();
        diag.ego_valid = ego.valid;
        diag.ego_reused = ego.reused;

        let prior = &self.state;
        let returns: Vec<Return> = static_points
            .iter()
            .map(|p| {
                let sample = window.sample(p.time).expect("return inside the segment");
                let pose = pose_covariance_at(prior, &sample);
                let cov = point_covariance(self.s.mode(), &pose, &sample.rotation, &self.s.extrinsics, &p.coord, &self.s.noise);
                Return {
                    time: p.time,
                    coord: p.coord,
                    radar: p.coord.to_cartesian(),
                    direction: p.coord.direction(),
                    doppler: p.doppler,
                    rcs: p.rcs,
                    cov: cov.cov,
                }
            })
            .collect();

        let snapshot = self.map.snapshot();
        let constraints = if cfg.localizability.enabled && !returns.is_empty() {
            let (c, report) = self.constraints(window, &returns, &snapshot);
            diag.constrained_axes = report;
            c
        } else {
            Vec::new()
        };

        let imu_samples: Vec<&ImuSample> = imu.iter().collect();
        let ctx = Assembly { s: &self.s, returns: &returns, imu: &imu_samples, snapshot: &snapshot };
        let mut counts = Counts::default();
        let opts = cfg.update_options();
        let mut scratch = self.state.clone();
        let solution = iterate_map(
            &self.state.x,
            &self.state.p,
            |x| {
                scratch.x.copy_from(x);
                let (blocks, c) = ctx.assemble(&scratch);
                counts = c;
                blocks
            },
            |dx| project(dx, &constraints),
            &opts,
        );
        self.state.x = solution.x;
        self.state.p = solution.p;
        let report: UpdateReport = solution.report;

        diag.status = match report.status {
            UpdateStatus::Converged => "converged",
            UpdateStatus::MaxIterations => "max_iterations",
            UpdateStatus::NoResiduals => "no_residuals",
        }
        .into();
        diag.iterations = report.iterations;
        diag.regularized = report.regularized;
        diag.n_plane = counts.plane;
        diag.n_distribution = counts.distribution;
        diag.n_unmatched = counts.unmatched;
        diag.n_doppler = counts.doppler;
        diag.n_gyro = counts.gyro;
        diag.n_gravity = counts.gravity;

        let trace = self.state.p.trace();
        if !self.state.is_finite() || !trace.is_finite() {
            return Err(RunError::Divergence { time: diag.time, reason: "non-finite state or covariance".into() });
        }
        if trace > cfg.runtime.divergence_trace {
            return Err(RunError::Divergence { time: diag.time, reason: format!("covariance trace {trace:.3e}") });
        }
        diag.covariance_trace = trace;

        // Map with posterior uncertainty.
        let posterior = self.state.window();
        let candidates: Vec<MapPoint> = returns
            .iter()
            .map(|r| {
                let sample = posterior.sample(r.time).expect("return inside the segment");
                let pose = pose_covariance_at(&self.state, &sample);
                let wp = world_point(&sample, &self.s.extrinsics, &r.radar);
                let cov = point_covariance(self.s.mode(), &pose, &sample.rotation, &self.s.extrinsics, &r.coord, &self.s.noise);
                MapPoint::new(wp.world, cov.cov, r.rcs, 0)
            })
            .collect();
        diag.map = self.map.insert_with_replacement(candidates);
        if cfg.map.prune_every > 0 && self.knots.is_multiple_of(cfg.map.prune_every) {
            let center = posterior.eval_translation(posterior.segment_start()).unwrap_or_else(|_| Vector3::zeros());
            diag.pruned = self.map.prune_outside(&center);
        }
        diag.map_size = self.map.len();
        Ok(diag)
    }

    /// Plane correspondences at the prior give the degenerate directions.
    /// Returns one constraint per knot that is projected, in its local frame.
    fn constraints(
        &self,
        window: &SplineWindow,
        returns: &[Return],
        snapshot: &MapSnapshot,
    ) -> (Vec<(usize, ConstraintMatrix)>, Vec<usize>) {
        let pairs: Vec<PointNormal> = returns
            .par_iter()
            .filter_map(|r| {
                let sample = window.sample(r.time).ok()?;
                let wp = world_point(&sample, &self.s.extrinsics, &r.radar);
                match associate(snapshot, &wp.world, &self.s)? {
                    Correspondence::Plane(pl) => Some(PointNormal { point: wp.world - sample.position, normal: pl.normal }),
                    Correspondence::Distribution(_) => None,
                }
            })
            .collect();
        let (c_world, report) = analyze(&pairs, &self.s.loc);
        if c_world.is_empty() {
            return (Vec::new(), report.constrained_axes);
        }
        let knots: Vec<usize> = match self.s.config.localizability.scope {
            ConstraintScope::NewestKnot => vec![3],
            ConstraintScope::AllKnots => vec![0, 1, 2, 3],
        };
        let out = knots
            .into_iter()
            .map(|k| {
                // Orientation just before increment k enters the product.
                let mut q = window.lagged;
                for d in &window.increments[..k] {
                    q *= quat_exp(d);
                }
                (k, c_world.with_rotation_frame(&q.to_rotation_matrix().into_inner()))
            })
            .collect();
        (out, report.constrained_axes)
    }
}

/// Removes the constrained components of each listed knot's 6-DoF increment.
fn project(dx: &mut DVector<f64>, constraints: &[(usize, ConstraintMatrix)]) {
    for (k, c) in constraints {
        let (ti, qi) = (TRANSLATION + 3 * k, INCREMENT + 3 * k);
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&dx.fixed_rows::<3>(ti));
        v.fixed_rows_mut::<3>(3).copy_from(&dx.fixed_rows::<3>(qi));
        let p = c.project(&v);
        dx.fixed_rows_mut::<3>(ti).copy_from(&p.fixed_rows::<3>(0));
        dx.fixed_rows_mut::<3>(qi).copy_from(&p.fixed_rows::<3>(3));
    }
}

/// kNN association: plane route if the neighbors form a reliable plane, distribution route otherwise.
fn associate(snapshot: &MapSnapshot, world: &Vector3<f64>, s: &Settings) -> Option<Correspondence> {
    let cfg = &s.config.residuals;
    let knn = snapshot.knn(world, cfg.knn);
    if knn.short || knn.neighbors.last().is_none_or(|n| n.dist2 > cfg.max_neighbor_distance.powi(2)) {
        return None;
    }
    let neighbors: Vec<MapPoint> = knn.neighbors.into_iter().map(|n| n.point).collect();
    match fit_plane(&neighbors, &s.residual) {
        Ok(pl) if pl.reliable => Some(Correspondence::Plane(pl)),
        _ if cfg.use_distribution => Some(Correspondence::Distribution(fit_distribution(&neighbors))),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Counts {
    plane: usize,
    distribution: usize,
    unmatched: usize,
    doppler: usize,
    gyro: usize,
    gravity: usize,
}

/// Inputs shared by every relinearization of one update.
struct Assembly<'a> {
    s: &'a Settings,
    returns: &'a [Return],
    imu: &'a [&'a ImuSample],
    snapshot: &'a MapSnapshot,
}

impl Assembly<'_> {
    fn assemble(&self, state: &FilterState) -> (Vec<ResidualBlock>, Counts) {
        let cfg = &self.s.config.residuals;
        let params = &self.s.residual;
        let window = state.window();
        let matched: Vec<(SplineSample, Option<Correspondence>)> = self
            .returns
            .par_iter()
            .map(|r| {
                let sample = window.sample(r.time).expect("return inside the segment");
                let wp = world_point(&sample, &self.s.extrinsics, &r.radar);
                let c = associate(self.snapshot, &wp.world, self.s);
                (sample, c)
            })
            .collect();
        let mut counts = Counts::default();
        for (_, c) in &matched {
            match c {
                Some(Correspondence::Plane(_)) => counts.plane += 1,
                Some(Correspondence::Distribution(_)) => counts.distribution += 1,
                None => counts.unmatched += 1,
            }
        }
        let env = EnvWeights::new(counts.plane, counts.distribution);

        let mut blocks: Vec<ResidualBlock> = matched
            .par_iter()
            .zip(self.returns.par_iter())
            .filter_map(|((sample, c), r)| {
                let wp = world_point(sample, &self.s.extrinsics, &r.radar);
                match c.as_ref()? {
                    Correspondence::Plane(pl) => {
                        let b = plane_residual(&wp, pl, &r.cov, env.plane);
                        let z = b.residual[0] / (env.plane * b.covariance[(0, 0)].sqrt());
                        (z.abs() <= cfg.plane_gate).then_some(b)
                    }
                    Correspondence::Distribution(d) => distribution_residual(&wp, d, &r.cov, r.rcs, env.distribution, params),
                }
            })
            .collect();
        if cfg.use_doppler {
            let before = blocks.len();
            blocks.extend(
                matched
                    .iter()
                    .zip(self.returns)
                    .map(|((sample, _), r)| doppler_residual(sample, &self.s.extrinsics, &r.direction, r.doppler, params)),
            );
            counts.doppler = blocks.len() - before;
        }
        if cfg.use_gyro || cfg.use_gravity {
            let (bg, ba) = (state.gyro_bias(), state.accel_bias());
            let up = Vector3::z();
            for m in self.imu {
                let sample = window.sample(m.time).expect("IMU sample inside the segment");
                if cfg.use_gyro {
                    blocks.push(gyro_residual(&sample, &bg, &m.gyro, params));
                    counts.gyro += 1;
                }
                if cfg.use_gravity {
                    if let Some(b) = gravity_residual(&sample, &ba, &m.accel, &up, params) {
                        blocks.push(b);
                        counts.gravity += 1;
                    }
                }
            }
        }
        debug_assert!(blocks.iter().all(|b| b.source != ResidualSource::Generic));
        (blocks, counts)
    }
}
