//! Round trips of the text formats.

use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rio_core::geometry::{Quat, SphericalCoord};
use rio_core::pipeline::io::{read_imu, read_radar, read_trajectory, write_imu, write_map_text, write_radar, write_trajectory, ImuSample, TrajectoryPoint};
use rio_core::radar::{RadarPoint, RadarScan};
use rio_core::submap::MapPoint;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(1.0)
}

proptest! {
    #[test]
    fn radar_scans_round_trip(frames in proptest::collection::vec(proptest::collection::vec((0.0..0.05f64, 0.5..200.0f64, -1.5..1.5f64, -0.7..0.7f64, -30.0..30.0f64, -20.0..40.0f64), 1..20), 1..6)) {
        let scans: Vec<RadarScan> = frames
            .iter()
            .enumerate()
            .map(|(i, pts)| {
                let mut points: Vec<RadarPoint> = pts
                    .iter()
                    .map(|&(dt, range, azimuth, elevation, doppler, rcs)| RadarPoint { time: 1000.0 + i as f64 * 0.1 + dt, coord: SphericalCoord::new(range, azimuth, elevation), doppler, rcs })
                    .collect();
                points.sort_by(|a, b| a.time.total_cmp(&b.time));
                RadarScan { id: i as u64, points }
            })
            .collect();
        let mut buf = Vec::new();
        write_radar(&mut buf, &scans).unwrap();
        let back = read_radar(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), scans.len());
        for (a, b) in scans.iter().zip(&back) {
            prop_assert_eq!(a.id, b.id);
            prop_assert_eq!(a.points.len(), b.points.len());
            for (p, q) in a.points.iter().zip(&b.points) {
                prop_assert!(close(p.time, q.time) && close(p.coord.range, q.coord.range) && close(p.coord.azimuth, q.coord.azimuth));
                prop_assert!(close(p.coord.elevation, q.coord.elevation) && close(p.doppler, q.doppler) && close(p.rcs, q.rcs));
            }
        }
    }

    #[test]
    fn imu_and_trajectory_round_trip(n in 2usize..50, seed in any::<u64>()) {
        let f = |i: usize, k: u64| ((seed.wrapping_mul(k + 1) ^ i as u64) % 10_007) as f64 / 97.0 - 50.0;
        let imu: Vec<ImuSample> = (0..n)
            .map(|i| ImuSample { time: 5.0 + i as f64 * 0.01, gyro: Vector3::new(f(i, 1), f(i, 2), f(i, 3)) * 0.01, accel: Vector3::new(f(i, 4), f(i, 5), f(i, 6)) })
            .collect();
        let mut buf = Vec::new();
        write_imu(&mut buf, &imu).unwrap();
        let back = read_imu(buf.as_slice()).unwrap();
        for (a, b) in imu.iter().zip(&back) {
            prop_assert!(close(a.time, b.time) && (a.gyro - b.gyro).amax() <= 1e-9 && (a.accel - b.accel).amax() <= 1e-9);
        }
        let traj: Vec<TrajectoryPoint> = imu
            .iter()
            .map(|s| TrajectoryPoint { time: s.time, position: s.accel, orientation: Quat::from_scaled_axis(s.gyro) })
            .collect();
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &traj).unwrap();
        let back = read_trajectory(buf.as_slice()).unwrap();
        for (a, b) in traj.iter().zip(&back) {
            prop_assert!(close(a.time, b.time) && (a.position - b.position).amax() <= 1e-9);
            prop_assert!(a.orientation.angle_to(&b.orientation) < 1e-8);
        }
    }
}

#[test]
fn trajectory_rows_are_time_position_then_xyzw() {
    let q = Quat::from_scaled_axis(Vector3::new(0.1, 0.2, 0.3));
    let mut buf = Vec::new();
    write_trajectory(&mut buf, &[TrajectoryPoint { time: 1.5, position: Vector3::new(1.0, 2.0, 3.0), orientation: q }]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let row: Vec<f64> = text.lines().find(|l| !l.starts_with('#')).unwrap().split(' ').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row.len(), 8);
    assert_eq!(&row[..4], &[1.5, 1.0, 2.0, 3.0]);
    let c = q.coords;
    for (got, want) in row[4..].iter().zip([c.x, c.y, c.z, c.w]) {
        assert!((got - want).abs() < 1e-9);
    }
}

#[test]
fn map_export_has_one_row_per_point() {
    let pts: Vec<MapPoint> = (0..37).map(|i| MapPoint::new(Vector3::new(i as f64, 0.0, 1.0), Matrix3::identity() * 0.01, 3.0, i)).collect();
    let mut buf = Vec::new();
    write_map_text(&mut buf, &pts).unwrap();
    let rows = String::from_utf8(buf).unwrap().lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, pts.len());
}
