//! Synthetic scenarios: a ground-truth spline, a box-and-scatterer scene, and
//! the radar and IMU streams a sensor rig would record while following it.

use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{quat_log, Extrinsics, Quat, SphericalCoord};
use crate::pipeline::io::{ImuSample, TrajectoryPoint};
use crate::radar::{RadarPoint, RadarScan};
use crate::spline::{SplineSample, SplineWindow};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("radar frame at t = {0:.3} s sees no landmarks")]
    NoLandmarks(f64),
    #[error("time {0} is outside the ground-truth spline")]
    OutOfRange(f64),
}

/// Cubic B-spline ground truth on the knot grid `origin + k·dt`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruth {
    pub origin: f64,
    pub dt: f64,
    pub positions: Vec<Vector3<f64>>,
    pub orientations: Vec<Quat>,
}

impl GroundTruth {
    /// Samples control points from a pose function at every knot time.
    pub fn from_fn(origin: f64, dt: f64, knots: usize, pose: impl Fn(f64) -> (Vector3<f64>, Quat)) -> Self {
        let (positions, orientations) = (0..knots).map(|k| pose(origin + k as f64 * dt)).unzip();
        Self { origin, dt, positions, orientations }
    }

    /// First time with a complete window.
    pub fn start_time(&self) -> f64 {
        self.origin + 3.0 * self.dt
    }

    /// End of the last segment (exclusive).
    pub fn end_time(&self) -> f64 {
        self.origin + (self.positions.len() as f64 - 1.0) * self.dt
    }

    /// The four-knot window whose active segment contains `t`.
    pub fn window(&self, t: f64) -> Result<SplineWindow, SimError> {
        if !(t >= self.start_time() && t < self.end_time()) {
            return Err(SimError::OutOfRange(t));
        }
        let last = self.positions.len() - 4;
        let k = ((t - self.origin) / self.dt).floor() as usize;
        let mut j = k.saturating_sub(2).clamp(1, last);
        // Round-off in the division can land one knot off; defer to the window's own test.
        for _ in 0..2 {
            let w = self.window_at(j);
            if w.contains(t) {
                break;
            }
            if t < w.segment_start() {
                j = (j - 1).max(1);
            } else {
                j = (j + 1).min(last);
            }
        }
        Ok(self.window_at(j))
    }

    fn window_at(&self, j: usize) -> SplineWindow {
        let q = &self.orientations;
        SplineWindow {
            first_knot: self.origin + j as f64 * self.dt,
            dt: self.dt,
            translations: [0, 1, 2, 3].map(|m| self.positions[j + m]),
            increments: [0, 1, 2, 3].map(|m| quat_log(&(q[j + m - 1].inverse() * q[j + m]))),
            lagged: q[j - 1],
        }
    }

    pub fn sample(&self, t: f64) -> Result<SplineSample, SimError> {
        self.window(t)?.sample(t).map_err(|_| SimError::OutOfRange(t))
    }

    pub fn pose(&self, t: f64) -> Result<TrajectoryPoint, SimError> {
        let s = self.sample(t)?;
        Ok(TrajectoryPoint { time: t, position: s.position, orientation: s.orientation })
    }

    /// Poses at a fixed rate over `[from, to]`.
    pub fn trajectory(&self, from: f64, to: f64, rate: f64) -> Vec<TrajectoryPoint> {
        let n = ((to - from) * rate).floor() as usize;
        (0..=n).filter_map(|i| self.pose(from + i as f64 / rate).ok()).collect()
    }
}

/// Axis-aligned box. Rays hit the inner faces when `inside`, the outer ones otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSurface {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    pub inside: bool,
    pub rcs: f64,
}

impl BoxSurface {
    /// Distance along unit ray `dir` from `origin` to the first visible face.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let mut near = f64::NEG_INFINITY;
        let mut far = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let t1 = (self.min[a] - origin[a]) / dir[a];
            let t2 = (self.max[a] - origin[a]) / dir[a];
            near = near.max(t1.min(t2));
            far = far.min(t1.max(t2));
        }
        if near > far {
            return None;
        }
        let t = if self.inside { far } else { near };
        (t > 1e-9 && t.is_finite()).then_some(t)
    }

    /// Distance from `p` to the nearest face plane it lies on, for on-surface checks.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..3 {
            let within = (0..3).filter(|&b| b != a).all(|b| p[b] >= self.min[b] - 1e-9 && p[b] <= self.max[b] + 1e-9);
            if within {
                best = best.min((p[a] - self.min[a]).abs()).min((p[a] - self.max[a]).abs());
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub position: Vector3<f64>,
    pub rcs: f64,
}

/// A target moving at constant velocity; returns come from a small cluster around it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mover {
    pub start: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub rcs: f64,
}

impl Mover {
    pub fn position(&self, t: f64) -> Vector3<f64> {
        self.start + self.velocity * t
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub boxes: Vec<BoxSurface>,
    pub scatterers: Vec<Scatterer>,
    pub movers: Vec<Mover>,
}

impl Scene {
    /// A 40 × 28 × 5.5 m hall with pillars and isolated reflectors away from the
    /// central 24 × 14 m driving area.
    pub fn hall(seed: u64) -> Self {
        let mut boxes = vec![BoxSurface {
            min: Vector3::new(-20.0, -14.0, -1.5),
            max: Vector3::new(20.0, 14.0, 4.0),
            inside: true,
            rcs: 5.0,
        }];
        for (x, y) in [(-14.0, -9.0), (14.0, -9.0), (-14.0, 9.0), (14.0, 9.0), (0.0, 10.0), (0.0, -10.0), (16.0, 0.0), (-16.0, 0.0)] {
            boxes.push(BoxSurface {
                min: Vector3::new(x - 0.4, y - 0.4, -1.5),
                max: Vector3::new(x + 0.4, y + 0.4, 4.0),
                inside: false,
                rcs: 12.0,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE4E);
        let mut scatterers = Vec::new();
        while scatterers.len() < 60 {
            let p: Vector3<f64> = Vector3::new(rng.random_range(-19.0..19.0), rng.random_range(-13.0..13.0), rng.random_range(-1.0..3.5));
            let clear = p.x.abs() > 12.5 || p.y.abs() > 7.5;
            let off_pillars = boxes[1..].iter().all(|b| (0..2).any(|a| p[a] < b.min[a] - 0.3 || p[a] > b.max[a] + 0.3));
            if clear && off_pillars {
                scatterers.push(Scatterer { position: p, rcs: rng.random_range(15.0..25.0) });
            }
        }
        Self { boxes, scatterers, movers: Vec::new() }
    }

    /// A straight featureless tunnel along +x, 6 m wide and 4.5 m tall.
    pub fn tunnel(length: f64) -> Self {
        Self {
            boxes: vec![BoxSurface {
                min: Vector3::new(-20.0, -3.0, -1.5),
                max: Vector3::new(length, 3.0, 3.0),
                inside: true,
                rcs: 5.0,
            }],
            scatterers: Vec::new(),
            movers: Vec::new(),
        }
    }

    /// A single wall facing the origin at `x = distance`.
    pub fn wall(distance: f64) -> Self {
        Self {
            boxes: vec![BoxSurface {
                min: Vector3::new(distance, -50.0, -50.0),
                max: Vector3::new(distance + 1.0, 50.0, 50.0),
                inside: false,
                rcs: 5.0,
            }],
            scatterers: Vec::new(),
            movers: Vec::new(),
        }
    }

    /// Nearest surface hit along a unit ray, with its RCS.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        self.boxes
            .iter()
            .filter_map(|b| b.intersect(origin, dir).map(|t| (t, b.rcs)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Distance from `p` to the closest surface or scatterer.
    pub fn distance_to_landmark(&self, p: &Vector3<f64>) -> f64 {
        let surfaces = self.boxes.iter().map(|b| b.surface_distance(p));
        let points = self.scatterers.iter().map(|s| (s.position - p).norm());
        surfaces.chain(points).fold(f64::INFINITY, f64::min)
    }
}

/// Shape of the ground-truth path after the rest period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathKind {
    Stationary { yaw: f64 },
    /// `x = a sin(2πs/T)`, `y = b sin(4πs/T)`, `z = c sin(2πs/T)`, heading along the path.
    FigureEight { a: f64, b: f64, c: f64, period: f64 },
    /// Straight line along +x at `speed` m/s.
    Straight { speed: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimNoise {
    pub range: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub doppler: f64,
    pub rcs: f64,
    pub gyro: f64,
    pub accel: f64,
    /// Bias random-walk densities, per √s.
    pub gyro_bias_walk: f64,
    pub accel_bias_walk: f64,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
}

impl Default for SimNoise {
    fn default() -> Self {
        Self {
            range: 0.05,
            azimuth_deg: 0.5,
            elevation_deg: 0.5,
            doppler: 0.05,
            rcs: 1.0,
            gyro: 0.005,
            accel: 0.05,
            gyro_bias_walk: 1e-4,
            accel_bias_walk: 1e-3,
            gyro_bias: Vector3::new(0.002, -0.003, 0.001),
            accel_bias: Vector3::new(0.02, -0.01, 0.03),
        }
    }
}

impl SimNoise {
    pub fn zero() -> Self {
        Self {
            range: 0.0,
            azimuth_deg: 0.0,
            elevation_deg: 0.0,
            doppler: 0.0,
            rcs: 0.0,
            gyro: 0.0,
            accel: 0.0,
            gyro_bias_walk: 0.0,
            accel_bias_walk: 0.0,
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub seed: u64,
    /// Stream length, s.
    pub duration: f64,
    /// Initial stationary period, s.
    pub rest: f64,
    /// Smooth speed-up after the rest period, s.
    pub ramp: f64,
    pub path: PathKind,
    /// Roll and pitch oscillation amplitude, rad.
    pub wobble: f64,
    pub scene: Scene,
    /// Ground-truth knot spacing, s.
    pub dt: f64,
    pub radar_rate: f64,
    pub imu_rate: f64,
    pub returns_per_frame: usize,
    /// Spread of return timestamps within a frame, s.
    pub frame_duration: f64,
    pub azimuth_fov_deg: f64,
    pub elevation_fov_deg: f64,
    pub max_range: f64,
    /// Detection probability of a visible scatterer per frame.
    pub scatterer_detection: f64,
    /// Fraction of surface returns replaced by multipath ghosts.
    pub outlier_fraction: f64,
    /// Returns per visible mover per frame.
    pub mover_returns: usize,
    pub gravity: f64,
    pub noise: SimNoise,
    pub extrinsics: Extrinsics,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self::figure_eight(0)
    }
}

impl ScenarioSpec {
    /// 60 s figure-eight through a pillared hall.
    pub fn figure_eight(seed: u64) -> Self {
        Self {
            seed,
            duration: 60.0,
            rest: 1.0,
            ramp: 3.0,
            path: PathKind::FigureEight { a: 10.0, b: 5.0, c: 0.3, period: 30.0 },
            wobble: 0.02,
            scene: Scene::hall(seed),
            dt: 0.1,
            radar_rate: 10.0,
            imu_rate: 100.0,
            returns_per_frame: 200,
            frame_duration: 0.05,
            azimuth_fov_deg: 60.0,
            elevation_fov_deg: 15.0,
            max_range: 60.0,
            scatterer_detection: 0.5,
            outlier_fraction: 0.0,
            mover_returns: 0,
            gravity: 9.81,
            noise: SimNoise::default(),
            extrinsics: Extrinsics::default(),
        }
    }

    /// Straight drive down a featureless tunnel: translation along the axis is unobservable from geometry.
    pub fn tunnel(seed: u64) -> Self {
        Self {
            duration: 30.0,
            path: PathKind::Straight { speed: 2.0 },
            scene: Scene::tunnel(200.0),
            ..Self::figure_eight(seed)
        }
    }

    pub fn stationary(seed: u64) -> Self {
        Self { duration: 10.0, path: PathKind::Stationary { yaw: 0.3 }, wobble: 0.0, ..Self::figure_eight(seed) }
    }

    pub fn with_noise(mut self, noise: SimNoise) -> Self {
        self.noise = noise;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Invalid(m.into()));
        if !(self.duration > 0.0) {
            return bad("duration must be positive");
        }
        if !(self.rest >= 0.0 && self.ramp >= 0.0) {
            return bad("rest and ramp must be non-negative");
        }
        if !(self.dt > 0.0 && self.radar_rate > 0.0 && self.imu_rate > 0.0) {
            return bad("dt and rates must be positive");
        }
        if self.imu_rate < self.radar_rate {
            return bad("imu_rate must be at least radar_rate");
        }
        if self.returns_per_frame == 0 {
            return bad("returns_per_frame must be positive");
        }
        if !(self.frame_duration >= 0.0 && self.frame_duration < 1.0 / self.radar_rate) {
            return bad("frame_duration must be shorter than the frame period");
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) || !(0.0..=1.0).contains(&self.scatterer_detection) {
            return bad("fractions must lie in [0, 1]");
        }
        if !(self.max_range > 0.0) {
            return bad("max_range must be positive");
        }
        if self.scene.boxes.is_empty() && self.scene.scatterers.is_empty() {
            return Err(SimError::NoLandmarks(0.0));
        }
        Ok(())
    }

    /// Path parameter after the rest period, with a velocity ramp that is smooth at both ends.
    fn progress(&self, t: f64) -> f64 {
        let tau = t - self.rest;
        if tau <= 0.0 {
            0.0
        } else if tau < self.ramp {
            0.5 * tau - self.ramp / (2.0 * PI) * (PI * tau / self.ramp).sin()
        } else {
            tau - 0.5 * self.ramp
        }
    }

    fn path_point(&self, s: f64) -> (Vector3<f64>, Vector3<f64>) {
        match self.path {
            PathKind::Stationary { yaw } => (Vector3::zeros(), Vector3::new(yaw.cos(), yaw.sin(), 0.0)),
            PathKind::FigureEight { a, b, c, period } => {
                let w = 2.0 * PI / period;
                let p = Vector3::new(a * (w * s).sin(), b * (2.0 * w * s).sin(), c * (w * s).sin());
                let d = Vector3::new(a * w * (w * s).cos(), 2.0 * b * w * (2.0 * w * s).cos(), 0.0);
                (p, d)
            }
            PathKind::Straight { speed } => (Vector3::new(speed * s, 0.0, 0.0), Vector3::x()),
        }
    }

    fn control_pose(&self, t: f64) -> (Vector3<f64>, Quat) {
        let s = self.progress(t);
        let (p, d) = self.path_point(s);
        let yaw = d.y.atan2(d.x);
        let roll = self.wobble * (2.0 * PI * s / 7.0).sin();
        let pitch = self.wobble * (2.0 * PI * s / 11.0).sin();
        (p, UnitQuaternion::from_euler_angles(roll, pitch, yaw))
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let origin = -4.0 * self.dt;
        let knots = ((self.duration - origin) / self.dt).ceil() as usize + 4;
        GroundTruth::from_fn(origin, self.dt, knots, |t| self.control_pose(t))
    }

    pub fn generate(&self) -> Result<Scenario, SimError> {
        self.validate()?;
        let truth = self.ground_truth();
        let radar = self.radar_stream(&truth)?;
        let imu = self.imu_stream(&truth)?;
        Ok(Scenario { spec: self.clone(), truth, radar, imu })
    }

    fn radar_stream(&self, truth: &GroundTruth) -> Result<Vec<RadarScan>, SimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let gauss = |s: f64| Normal::new(0.0, s.max(0.0)).expect("finite std");
        let (nr, na, ne, nd, nc) = (
            gauss(self.noise.range),
            gauss(self.noise.azimuth_deg.to_radians()),
            gauss(self.noise.elevation_deg.to_radians()),
            gauss(self.noise.doppler),
            gauss(self.noise.rcs),
        );
        let az_fov = self.azimuth_fov_deg.to_radians();
        let el_fov = self.elevation_fov_deg.to_radians();
        let frames = (self.duration * self.radar_rate).floor() as u64;
        let mut scans = Vec::new();
        for id in 0..frames {
            let t0 = id as f64 / self.radar_rate;
            if t0 + self.frame_duration > self.duration {
                break;
            }
            let rig = RigState::at(truth, &self.extrinsics, t0)?;
            let scat: Vec<&Scatterer> = self
                .scene
                .scatterers
                .iter()
                .filter(|s| self.visible(&rig, &s.position, az_fov, el_fov))
                .collect();
            let movers: Vec<&Mover> = self
                .scene
                .movers
                .iter()
                .filter(|m| self.visible(&rig, &m.position(t0), az_fov, el_fov))
                .collect();

            // Decide the return mix for the frame, then assign timestamps in order.
            enum Kind<'a> {
                Surface,
                Ghost,
                Point(&'a Scatterer),
                Moving(&'a Mover, Vector3<f64>),
            }
            let n = self.returns_per_frame;
            let mut kinds: Vec<Kind> = Vec::with_capacity(n);
            for s in &scat {
                if kinds.len() < n / 4 && rng.random::<f64>() < self.scatterer_detection {
                    kinds.push(Kind::Point(s));
                }
            }
            for m in &movers {
                for _ in 0..self.mover_returns {
                    if kinds.len() < n / 2 {
                        let jitter = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(0.0..1.0));
                        kinds.push(Kind::Moving(m, jitter));
                    }
                }
            }
            while kinds.len() < n {
                let ghost = rng.random::<f64>() < self.outlier_fraction;
                kinds.push(if ghost { Kind::Ghost } else { Kind::Surface });
            }

            let mut points = Vec::with_capacity(n);
            for (i, kind) in kinds.iter().enumerate() {
                let t = t0 + self.frame_duration * i as f64 / n as f64;
                let rig = RigState::at(truth, &self.extrinsics, t)?;
                let (coord, target_velocity, rcs) = match kind {
                    Kind::Surface | Kind::Ghost => {
                        let mut hit = None;
                        for _ in 0..20 {
                            let c = SphericalCoord::new(1.0, rng.random_range(-az_fov..az_fov), rng.random_range(-el_fov..el_fov));
                            if let Some((range, rcs)) = self.scene.cast(&rig.origin, &(rig.to_world * c.direction())) {
                                if range <= self.max_range {
                                    hit = Some((SphericalCoord::new(range, c.azimuth, c.elevation), rcs));
                                    break;
                                }
                            }
                        }
                        let Some((mut coord, rcs)) = hit else { continue };
                        if matches!(kind, Kind::Ghost) {
                            coord.range = rng.random_range(coord.range..coord.range * 2.0 + 5.0).min(self.max_range);
                            (coord, Vector3::zeros(), rcs - 10.0)
                        } else {
                            (coord, Vector3::zeros(), rcs)
                        }
                    }
                    Kind::Point(s) => (rig.observe(&s.position), Vector3::zeros(), s.rcs),
                    Kind::Moving(m, jitter) => (rig.observe(&(m.position(t) + jitter)), m.velocity, m.rcs),
                };
                let doppler = -(rig.to_world * coord.direction()).dot(&(rig.velocity - target_velocity));
                let measured = SphericalCoord::new(
                    coord.range + nr.sample(&mut rng),
                    coord.azimuth + na.sample(&mut rng),
                    coord.elevation + ne.sample(&mut rng),
                );
                points.push(RadarPoint { time: t, coord: measured, doppler: doppler + nd.sample(&mut rng), rcs: rcs + nc.sample(&mut rng) });
            }
            if points.is_empty() {
                return Err(SimError::NoLandmarks(t0));
            }
            scans.push(RadarScan { id, points });
        }
        Ok(scans)
    }

    fn visible(&self, rig: &RigState, target: &Vector3<f64>, az_fov: f64, el_fov: f64) -> bool {
        let c = rig.observe(target);
        if c.range > self.max_range || c.range < 0.5 || c.azimuth.abs() > az_fov || c.elevation.abs() > el_fov {
            return false;
        }
        let dir = (target - rig.origin) / c.range;
        self.scene.cast(&rig.origin, &dir).is_none_or(|(d, _)| d > c.range)
    }

    fn imu_stream(&self, truth: &GroundTruth) -> Result<Vec<ImuSample>, SimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x1A0_C0FF_EE00);
        let gauss = |s: f64| Normal::new(0.0, s.max(0.0)).expect("finite std");
        let (ng, na) = (gauss(self.noise.gyro), gauss(self.noise.accel));
        let step = 1.0 / self.imu_rate;
        let (wg, wa) = (gauss(self.noise.gyro_bias_walk * step.sqrt()), gauss(self.noise.accel_bias_walk * step.sqrt()));
        let mut bg = self.noise.gyro_bias;
        let mut ba = self.noise.accel_bias;
        let n = (self.duration * self.imu_rate).floor() as usize;
        let mut out = Vec::with_capacity(n + 1);
        let g = Vector3::new(0.0, 0.0, self.gravity);
        let mut draw = |d: &Normal<f64>| Vector3::new(d.sample(&mut rng), d.sample(&mut rng), d.sample(&mut rng));
        for i in 0..=n {
            let t = i as f64 * step;
            let s = truth.sample(t)?;
            let gyro = s.angular_velocity + bg + draw(&ng);
            let accel = s.rotation.transpose() * (s.acceleration + g) + ba + draw(&na);
            out.push(ImuSample { time: t, gyro, accel });
            bg += draw(&wg);
            ba += draw(&wa);
        }
        Ok(out)
    }
}

/// Radar pose and velocity in the world at one instant.
struct RigState {
    origin: Vector3<f64>,
    /// Radar-to-world rotation.
    to_world: nalgebra::Matrix3<f64>,
    /// Radar origin velocity in the world frame.
    velocity: Vector3<f64>,
}

impl RigState {
    fn at(truth: &GroundTruth, ext: &Extrinsics, t: f64) -> Result<Self, SimError> {
        let s = truth.sample(t)?;
        let r_ir = ext.rotation.to_rotation_matrix().into_inner();
        Ok(Self {
            origin: s.position + s.rotation * ext.translation,
            to_world: s.rotation * r_ir,
            velocity: s.velocity + s.rotation * s.angular_velocity.cross(&ext.translation),
        })
    }

    fn observe(&self, world: &Vector3<f64>) -> SphericalCoord {
        SphericalCoord::from_cartesian(&(self.to_world.transpose() * (world - self.origin)))
    }
}

/// Generated streams together with their ground truth.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub truth: GroundTruth,
    pub radar: Vec<RadarScan>,
    pub imu: Vec<ImuSample>,
}

impl Scenario {
    /// Ground-truth poses at the given times; times outside the spline are skipped.
    pub fn truth_at(&self, times: impl IntoIterator<Item = f64>) -> Vec<TrajectoryPoint> {
        times.into_iter().filter_map(|t| self.truth.pose(t).ok()).collect()
    }
}
