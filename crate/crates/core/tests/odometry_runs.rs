//! End-to-end runs against the generator as oracle.

use rio_core::pipeline::config::PipelineConfig;
use rio_core::pipeline::eval::{evaluate, EvalOptions};
use rio_core::pipeline::io::{read_imu_file, read_radar_file, read_trajectory_file, write_imu_file, write_radar_file, write_trajectory_file};
use rio_core::pipeline::odometry::{resume, run, RunError};
use rio_core::pipeline::sim::{ScenarioSpec, SimNoise};
use rio_core::uncertainty::UncertaintyMode;

/// Radar sigmas matched to noise-free data; planes only.
fn matched_config() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.uncertainty.range_std = 1e-6;
    c.uncertainty.azimuth_std_deg = 1e-6;
    c.uncertainty.elevation_std_deg = 1e-6;
    c.residuals.plane_rms_max = 1e-6;
    c.residuals.use_distribution = false;
    c
}

/// A platform at rest: tight prior and small process noise.
fn resting_config() -> PipelineConfig {
    let mut c = matched_config();
    c.filter.initial_std.translation = 1e-6;
    c.filter.initial_std.increment = 1e-6;
    c.filter.process_noise.translation = 1e-5;
    c.filter.process_noise.increment = 1e-5;
    c
}

#[test]
fn zero_noise_stationary_is_exact() {
    let spec = ScenarioSpec::stationary(0).with_noise(SimNoise::zero());
    let sc = spec.generate().unwrap();
    let out = run(&resting_config(), &sc.radar, &sc.imu).unwrap();
    let gt = sc.truth.trajectory(0.0, spec.duration, 100.0);
    let m = evaluate(&out.trajectory, &gt, &EvalOptions::default()).unwrap();
    assert!(m.ate < 1e-6, "ATE {}", m.ate);
}

#[test]
fn zero_noise_figure_eight_is_exact() {
    let spec = ScenarioSpec::figure_eight(0).with_noise(SimNoise::zero());
    let sc = spec.generate().unwrap();
    let mut c = matched_config();
    c.localizability.enabled = false;
    c.uncertainty.mode = UncertaintyMode::MeasurementOnly;
    c.residuals.doppler_std = 1e-6;
    c.residuals.gyro_std = 1e-6;
    c.filter.epsilon = 1e-10;
    c.filter.max_iters = 30;
    let out = run(&c, &sc.radar, &sc.imu).unwrap();
    let gt = sc.truth.trajectory(0.0, spec.duration, 100.0);
    let m = evaluate(&out.trajectory, &gt, &EvalOptions::default()).unwrap();
    assert!(out.trajectory.last().unwrap().time > 59.0);
    assert!(m.ate < 1e-3, "ATE {}", m.ate);
}

#[test]
fn estimates_never_read_future_measurements() {
    let spec = ScenarioSpec { duration: 12.0, ..ScenarioSpec::figure_eight(3) };
    let sc = spec.generate().unwrap();
    let cut = 8.0;
    let radar: Vec<_> = sc
        .radar
        .iter()
        .map(|s| rio_core::radar::RadarScan { points: s.points.iter().filter(|p| p.time < cut).copied().collect(), ..s.clone() })
        .filter(|s| !s.points.is_empty())
        .collect();
    let imu: Vec<_> = sc.imu.iter().filter(|s| s.time < cut).copied().collect();
    let config = PipelineConfig::default();
    let full = run(&config, &sc.radar, &sc.imu).unwrap();
    let truncated = run(&config, &radar, &imu).unwrap();
    let shared: Vec<_> = truncated.trajectory.iter().filter(|p| p.time <= cut - 0.1).collect();
    assert!(shared.len() > 50);
    for p in shared {
        let q = full.trajectory.iter().find(|q| q.time == p.time).expect("same output times");
        assert_eq!(p, q);
    }
}

#[test]
fn file_round_trip_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ScenarioSpec { duration: 10.0, ..ScenarioSpec::figure_eight(5) };
    let sc = spec.generate().unwrap();
    let (radar_path, imu_path, traj_path) = (dir.path().join("radar.csv"), dir.path().join("imu.csv"), dir.path().join("traj.txt"));
    write_radar_file(&radar_path, &sc.radar).unwrap();
    write_imu_file(&imu_path, &sc.imu).unwrap();
    let radar = read_radar_file(&radar_path).unwrap();
    let imu = read_imu_file(&imu_path).unwrap();

    let out = run(&PipelineConfig::default(), &radar, &imu).unwrap();
    write_trajectory_file(&traj_path, &out.trajectory).unwrap();
    let est = read_trajectory_file(&traj_path).unwrap();
    assert_eq!(est.len(), out.trajectory.len());
    assert!(est.windows(2).all(|w| w[1].time > w[0].time));
    let gt = sc.truth.trajectory(0.0, spec.duration, 100.0);
    let m = evaluate(&est, &gt, &EvalOptions::default()).unwrap();
    assert!(m.ate < 0.1, "ATE {}", m.ate);
}

#[test]
fn resumed_run_continues_after_gap() {
    let spec = ScenarioSpec { duration: 8.0, ..ScenarioSpec::figure_eight(7) };
    let mut sc = spec.generate().unwrap();
    sc.radar.retain(|s| !(4.0..5.0).contains(&s.start_time().unwrap()));
    let config = PipelineConfig::default();
    let err = run(&config, &sc.radar, &sc.imu).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    let RunError::StreamGap { checkpoint, partial, .. } = err else { panic!("expected a stream gap") };
    assert!(partial.trajectory.last().unwrap().time <= checkpoint.last_output);
    let rest = resume(&config, &checkpoint, &sc.radar, &sc.imu).unwrap();
    assert!(rest.trajectory.first().unwrap().time > checkpoint.last_output);
    assert!(rest.trajectory.last().unwrap().time > 7.5);
    let mut joined = partial.trajectory.clone();
    joined.extend(rest.trajectory);
    let gt = sc.truth.trajectory(0.0, spec.duration, 100.0);
    let m = evaluate(&joined, &gt, &EvalOptions::default()).unwrap();
    assert!(m.ate < 0.5, "ATE {}", m.ate);
}

#[test]
fn non_monotone_input_is_rejected() {
    let spec = ScenarioSpec { duration: 3.0, ..ScenarioSpec::stationary(0) };
    let mut sc = spec.generate().unwrap();
    sc.imu.swap(10, 11);
    let err = run(&PipelineConfig::default(), &sc.radar, &sc.imu).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
