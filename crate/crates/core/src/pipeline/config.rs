//! Pipeline configuration: TOML file, defaults and dotted-key overrides.

use std::path::Path;

use nalgebra::{Quaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{InitialStd, ProcessNoise, UpdateOptions};
use crate::geometry::{Extrinsics, Quat};
use crate::localizability::LocalizabilityParams;
use crate::radar::RadarParams;
use crate::residuals::ResidualParams;
use crate::submap::SubmapParams;
use crate::uncertainty::{SensorNoise, UncertaintyMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid override `{0}`: expected key=value")]
    Override(String),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplineConfig {
    /// Knot spacing, seconds.
    pub dt: f64,
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self { dt: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub process_noise: ProcessNoise,
    pub initial_std: InitialStd,
}

impl Default for FilterConfig {
    fn default() -> Self {
        let o = UpdateOptions::default();
        Self {
            epsilon: o.epsilon,
            max_iters: o.max_iters,
            process_noise: ProcessNoise::default(),
            initial_std: InitialStd::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintScope {
    /// Project only the newest knot's 6-DoF increment.
    #[default]
    NewestKnot,
    /// Project every knot's 6-DoF increment.
    AllKnots,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizabilityConfig {
    pub enabled: bool,
    pub eta: f64,
    pub n_min: usize,
    pub scope: ConstraintScope,
}

impl Default for LocalizabilityConfig {
    fn default() -> Self {
        let p = LocalizabilityParams::default();
        Self { enabled: true, eta: p.eta, n_min: p.n_min, scope: ConstraintScope::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyConfig {
    pub mode: UncertaintyMode,
    /// m
    pub range_std: f64,
    pub azimuth_std_deg: f64,
    pub elevation_std_deg: f64,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        let n = SensorNoise::default();
        Self {
            mode: UncertaintyMode::Full,
            range_std: n.range,
            azimuth_std_deg: n.azimuth.to_degrees(),
            elevation_std_deg: n.elevation.to_degrees(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualConfig {
    pub tau_pl: f64,
    pub plane_rms_max: f64,
    pub rcs_floor: f64,
    pub rcs_weight_max: f64,
    pub doppler_std: f64,
    pub gyro_std: f64,
    pub gravity_std: f64,
    pub gravity_min: f64,
    /// Neighbors per map association.
    pub knn: usize,
    /// Associations whose farthest neighbor exceeds this are discarded, m.
    pub max_neighbor_distance: f64,
    /// Plane correspondences whose normalized residual exceeds this many sigmas are discarded.
    pub plane_gate: f64,
    pub use_distribution: bool,
    pub use_doppler: bool,
    pub use_gyro: bool,
    pub use_gravity: bool,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        let p = ResidualParams::default();
        Self {
            tau_pl: p.tau_pl,
            plane_rms_max: p.plane_rms_max,
            rcs_floor: p.rcs_floor,
            rcs_weight_max: p.rcs_weight_max,
            doppler_std: p.sigma_doppler,
            gyro_std: p.sigma_gyro,
            gravity_std: p.sigma_gravity,
            gravity_min: p.gravity_min,
            knn: 5,
            max_neighbor_distance: 1.0,
            plane_gate: 5.0,
            use_distribution: true,
            use_doppler: true,
            use_gyro: true,
            use_gravity: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadarConfig {
    pub ransac_iterations: usize,
    pub ransac_threshold: f64,
    pub min_inliers: usize,
    pub dynamic_gate: f64,
    pub max_jump: f64,
    pub min_range: f64,
    /// `1` if positive Doppler means receding, `-1` if approaching.
    pub doppler_sign: f64,
    pub seed: u64,
}

impl Default for RadarConfig {
    fn default() -> Self {
        let p = RadarParams::default();
        Self {
            ransac_iterations: p.ransac_iterations,
            ransac_threshold: p.ransac_threshold,
            min_inliers: p.min_inliers,
            dynamic_gate: p.dynamic_gate,
            max_jump: p.max_jump,
            min_range: p.min_range,
            doppler_sign: p.doppler_sign,
            seed: p.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub tau_u: f64,
    pub r_replace: f64,
    pub window_radius: f64,
    pub imbalance: f64,
    pub deleted_fraction: f64,
    /// Knots between map window prunes.
    pub prune_every: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        let p = SubmapParams::default();
        Self {
            tau_u: p.tau_u,
            r_replace: p.r_replace,
            window_radius: p.window_radius,
            imbalance: p.imbalance,
            deleted_fraction: p.deleted_fraction,
            prune_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtrinsicsConfig {
    /// Radar-to-body rotation as `[w, x, y, z]`.
    pub rotation: [f64; 4],
    /// Radar origin in the body frame, m.
    pub translation: [f64; 3],
}

impl Default for ExtrinsicsConfig {
    fn default() -> Self {
        Self { rotation: [1.0, 0.0, 0.0, 0.0], translation: [0.0; 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Static IMU period used for gravity and gyro-bias initialization, s.
    pub duration: f64,
    /// m/s²
    pub gravity: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { duration: 0.5, gravity: 9.81 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Consecutive knots without measurements before aborting.
    pub max_gap_knots: usize,
    /// Covariance trace above which the filter is declared diverged.
    pub divergence_trace: f64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self { max_gap_knots: 5, divergence_trace: 1e6 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub spline: SplineConfig,
    pub filter: FilterConfig,
    pub localizability: LocalizabilityConfig,
    pub uncertainty: UncertaintyConfig,
    pub residuals: ResidualConfig,
    pub radar: RadarConfig,
    pub map: MapConfig,
    pub extrinsics: ExtrinsicsConfig,
    pub init: InitConfig,
    pub runtime: RuntimeConfig,
}

fn check(ok: bool, field: &str, message: impl FnOnce() -> String) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::Invalid { field: field.to_string(), message: message() })
    }
}

fn positive(v: f64, field: &str) -> Result<(), ConfigError> {
    check(v.is_finite() && v > 0.0, field, || format!("must be positive and finite, got {v}"))
}

fn non_negative(v: f64, field: &str) -> Result<(), ConfigError> {
    check(v.is_finite() && v >= 0.0, field, || format!("must be non-negative and finite, got {v}"))
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    /// Loads `path` (or defaults) and applies `key=value` overrides with dotted keys.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let base = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        base.with_overrides(overrides)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, ConfigError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut value = toml::Value::try_from(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
            set_dotted(&mut value, key.trim(), parse_scalar(raw.trim()))?;
        }
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        positive(self.spline.dt, "spline.dt")?;
        positive(self.filter.epsilon, "filter.epsilon")?;
        check(self.filter.max_iters >= 1, "filter.max_iters", || "must be at least 1".into())?;
        let pn = &self.filter.process_noise;
        non_negative(pn.translation, "filter.process_noise.translation")?;
        non_negative(pn.increment, "filter.process_noise.increment")?;
        non_negative(pn.accel_bias, "filter.process_noise.accel_bias")?;
        non_negative(pn.gyro_bias, "filter.process_noise.gyro_bias")?;
        let is = &self.filter.initial_std;
        positive(is.translation, "filter.initial_std.translation")?;
        positive(is.increment, "filter.initial_std.increment")?;
        positive(is.accel_bias, "filter.initial_std.accel_bias")?;
        positive(is.gyro_bias, "filter.initial_std.gyro_bias")?;
        let l = &self.localizability;
        check((0.0..=1.0).contains(&l.eta), "localizability.eta", || format!("must lie in [0, 1], got {}", l.eta))?;
        let u = &self.uncertainty;
        positive(u.range_std, "uncertainty.range_std")?;
        positive(u.azimuth_std_deg, "uncertainty.azimuth_std_deg")?;
        positive(u.elevation_std_deg, "uncertainty.elevation_std_deg")?;
        let r = &self.residuals;
        positive(r.tau_pl, "residuals.tau_pl")?;
        positive(r.plane_rms_max, "residuals.plane_rms_max")?;
        positive(r.rcs_floor, "residuals.rcs_floor")?;
        positive(r.rcs_weight_max, "residuals.rcs_weight_max")?;
        positive(r.doppler_std, "residuals.doppler_std")?;
        positive(r.gyro_std, "residuals.gyro_std")?;
        positive(r.gravity_std, "residuals.gravity_std")?;
        non_negative(r.gravity_min, "residuals.gravity_min")?;
        check(r.knn >= 3, "residuals.knn", || format!("must be at least 3, got {}", r.knn))?;
        positive(r.max_neighbor_distance, "residuals.max_neighbor_distance")?;
        positive(r.plane_gate, "residuals.plane_gate")?;
        let rd = &self.radar;
        check(rd.ransac_iterations >= 1, "radar.ransac_iterations", || "must be at least 1".into())?;
        positive(rd.ransac_threshold, "radar.ransac_threshold")?;
        check(rd.min_inliers >= 3, "radar.min_inliers", || format!("must be at least 3, got {}", rd.min_inliers))?;
        check(rd.dynamic_gate > 0.0, "radar.dynamic_gate", || format!("must be positive, got {}", rd.dynamic_gate))?;
        positive(rd.max_jump, "radar.max_jump")?;
        non_negative(rd.min_range, "radar.min_range")?;
        check(rd.doppler_sign == 1.0 || rd.doppler_sign == -1.0, "radar.doppler_sign", || {
            format!("must be 1 or -1, got {}", rd.doppler_sign)
        })?;
        let m = &self.map;
        positive(m.tau_u, "map.tau_u")?;
        positive(m.r_replace, "map.r_replace")?;
        positive(m.window_radius, "map.window_radius")?;
        check(m.imbalance > 0.5 && m.imbalance < 1.0, "map.imbalance", || {
            format!("must lie in (0.5, 1), got {}", m.imbalance)
        })?;
        check(m.deleted_fraction > 0.0 && m.deleted_fraction < 1.0, "map.deleted_fraction", || {
            format!("must lie in (0, 1), got {}", m.deleted_fraction)
        })?;
        check(m.prune_every >= 1, "map.prune_every", || "must be at least 1".into())?;
        let q = self.extrinsics.rotation;
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        check((qn - 1.0).abs() < 1e-6, "extrinsics.rotation", || format!("must be a unit quaternion, norm is {qn}"))?;
        check(self.extrinsics.translation.iter().all(|v| v.is_finite()), "extrinsics.translation", || {
            "must be finite".into()
        })?;
        non_negative(self.init.duration, "init.duration")?;
        positive(self.init.gravity, "init.gravity")?;
        check(self.runtime.max_gap_knots >= 1, "runtime.max_gap_knots", || "must be at least 1".into())?;
        positive(self.runtime.divergence_trace, "runtime.divergence_trace")?;
        Ok(())
    }

    pub fn update_options(&self) -> UpdateOptions {
        UpdateOptions { epsilon: self.filter.epsilon, max_iters: self.filter.max_iters }
    }

    pub fn localizability_params(&self) -> LocalizabilityParams {
        LocalizabilityParams { eta: self.localizability.eta, n_min: self.localizability.n_min }
    }

    pub fn sensor_noise(&self) -> SensorNoise {
        SensorNoise {
            range: self.uncertainty.range_std,
            azimuth: self.uncertainty.azimuth_std_deg.to_radians(),
            elevation: self.uncertainty.elevation_std_deg.to_radians(),
        }
    }

    pub fn residual_params(&self) -> ResidualParams {
        let r = &self.residuals;
        ResidualParams {
            tau_u: self.map.tau_u,
            tau_pl: r.tau_pl,
            plane_rms_max: r.plane_rms_max,
            rcs_floor: r.rcs_floor,
            rcs_weight_max: r.rcs_weight_max,
            sigma_doppler: r.doppler_std,
            sigma_gyro: r.gyro_std,
            sigma_gravity: r.gravity_std,
            gravity_min: r.gravity_min,
            doppler_sign: self.radar.doppler_sign,
        }
    }

    pub fn radar_params(&self) -> RadarParams {
        let r = &self.radar;
        RadarParams {
            ransac_iterations: r.ransac_iterations,
            ransac_threshold: r.ransac_threshold,
            min_inliers: r.min_inliers,
            dynamic_gate: r.dynamic_gate,
            max_jump: r.max_jump,
            min_range: r.min_range,
            doppler_sign: r.doppler_sign,
            seed: r.seed,
        }
    }

    pub fn submap_params(&self) -> SubmapParams {
        let m = &self.map;
        SubmapParams {
            tau_u: m.tau_u,
            r_replace: m.r_replace,
            window_radius: m.window_radius,
            imbalance: m.imbalance,
            deleted_fraction: m.deleted_fraction,
        }
    }

    pub fn extrinsics(&self) -> Extrinsics {
        let [w, x, y, z] = self.extrinsics.rotation;
        Extrinsics {
            rotation: Quat::from_quaternion(Quaternion::new(w, x, y, z)),
            translation: Vector3::from(self.extrinsics.translation),
        }
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let unknown = || ConfigError::Invalid { field: key.to_string(), message: "unknown configuration key".into() };
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(unknown)?;
        if i + 1 == parts.len() {
            let slot = table.get_mut(*part).ok_or_else(unknown)?;
            // Integers given for float fields are widened.
            *slot = match (&*slot, value) {
                (toml::Value::Float(_), toml::Value::Integer(n)) => toml::Value::Float(n as f64),
                (_, v) => v,
            };
            return Ok(());
        }
        cur = table.get_mut(*part).ok_or_else(unknown)?;
    }
    Err(unknown())
}
