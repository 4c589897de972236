//! Stream, trajectory and map file formats.
//!
//! * radar: CSV `scan_id,point_time_s,range_m,azimuth_rad,elevation_rad,doppler_mps,rcs_dbsm`
//! * IMU: CSV `time_s,wx,wy,wz,ax,ay,az`
//! * trajectory: space-separated `t tx ty tz qx qy qz qw`
//! * map: space-separated `x y z trace rcs`, or binary little-endian PLY

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Quaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Quat, SphericalCoord};
use crate::radar::{RadarPoint, RadarScan};
use crate::submap::MapPoint;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn open(path: &Path) -> Result<BufReader<File>, IoError> {
    File::open(path).map(BufReader::new).map_err(|source| IoError::File { path: path.display().to_string(), source })
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    File::create(path).map(BufWriter::new).map_err(|source| IoError::File { path: path.display().to_string(), source })
}

fn csv_error(e: csv::Error) -> IoError {
    let line = e.position().map_or(0, |p| p.line());
    IoError::Parse { line, message: e.to_string() }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub time: f64,
    /// rad/s
    pub gyro: Vector3<f64>,
    /// Specific force, m/s².
    pub accel: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub time: f64,
    pub position: Vector3<f64>,
    pub orientation: Quat,
}

#[derive(Serialize, Deserialize)]
struct RadarRow {
    scan_id: u64,
    point_time_s: f64,
    range_m: f64,
    azimuth_rad: f64,
    elevation_rad: f64,
    doppler_mps: f64,
    rcs_dbsm: f64,
}

#[derive(Serialize, Deserialize)]
struct ImuRow {
    time_s: f64,
    wx: f64,
    wy: f64,
    wz: f64,
    ax: f64,
    ay: f64,
    az: f64,
}

/// Reads radar scans. Rows must be grouped by scan and non-decreasing in time.
pub fn read_radar<R: Read>(reader: R) -> Result<Vec<RadarScan>, IoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut scans: Vec<RadarScan> = Vec::new();
    let mut last_time = f64::NEG_INFINITY;
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let mut record = csv::StringRecord::new();
    while rdr.read_record(&mut record).map_err(csv_error)? {
        let line = record.position().map_or(0, |p| p.line());
        let row: RadarRow = record.deserialize(Some(&headers)).map_err(|e| IoError::Parse { line, message: e.to_string() })?;
        let values = [row.point_time_s, row.range_m, row.azimuth_rad, row.elevation_rad, row.doppler_mps, row.rcs_dbsm];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(IoError::Parse { line, message: "non-finite value".into() });
        }
        if row.point_time_s < last_time {
            return Err(IoError::Parse {
                line,
                message: format!("timestamp {} precedes previous {}", row.point_time_s, last_time),
            });
        }
        last_time = row.point_time_s;
        let point = RadarPoint {
            time: row.point_time_s,
            coord: SphericalCoord::new(row.range_m, row.azimuth_rad, row.elevation_rad),
            doppler: row.doppler_mps,
            rcs: row.rcs_dbsm,
        };
        match scans.last_mut() {
            Some(s) if s.id == row.scan_id => s.points.push(point),
            Some(s) if s.id > row.scan_id => {
                return Err(IoError::Parse { line, message: format!("scan id {} after {}", row.scan_id, s.id) });
            }
            _ => scans.push(RadarScan { id: row.scan_id, points: vec![point] }),
        }
    }
    Ok(scans)
}

pub fn write_radar<W: Write>(writer: W, scans: &[RadarScan]) -> Result<(), IoError> {
    let mut w = BufWriter::new(writer);
    writeln!(w, "scan_id,point_time_s,range_m,azimuth_rad,elevation_rad,doppler_mps,rcs_dbsm")?;
    for s in scans {
        for p in &s.points {
            writeln!(
                w,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                s.id, p.time, p.coord.range, p.coord.azimuth, p.coord.elevation, p.doppler, p.rcs
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads IMU samples; timestamps must be strictly increasing.
pub fn read_imu<R: Read>(reader: R) -> Result<Vec<ImuSample>, IoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out: Vec<ImuSample> = Vec::new();
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let mut record = csv::StringRecord::new();
    while rdr.read_record(&mut record).map_err(csv_error)? {
        let line = record.position().map_or(0, |p| p.line());
        let r: ImuRow = record.deserialize(Some(&headers)).map_err(|e| IoError::Parse { line, message: e.to_string() })?;
        let s = ImuSample { time: r.time_s, gyro: Vector3::new(r.wx, r.wy, r.wz), accel: Vector3::new(r.ax, r.ay, r.az) };
        if !s.time.is_finite() || s.gyro.iter().chain(s.accel.iter()).any(|v| !v.is_finite()) {
            return Err(IoError::Parse { line, message: "non-finite value".into() });
        }
        if let Some(prev) = out.last() {
            if s.time <= prev.time {
                return Err(IoError::Parse { line, message: format!("timestamp {} not after {}", s.time, prev.time) });
            }
        }
        out.push(s);
    }
    Ok(out)
}

pub fn write_imu<W: Write>(writer: W, samples: &[ImuSample]) -> Result<(), IoError> {
    let mut w = BufWriter::new(writer);
    writeln!(w, "time_s,wx,wy,wz,ax,ay,az")?;
    for s in samples {
        writeln!(
            w,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            s.time, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trajectory<W: Write>(writer: W, traj: &[TrajectoryPoint]) -> Result<(), IoError> {
    let mut w = BufWriter::new(writer);
    for p in traj {
        let q = p.orientation.quaternion();
        writeln!(
            w,
            "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            p.time, p.position.x, p.position.y, p.position.z, q.i, q.j, q.k, q.w
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `t tx ty tz qx qy qz qw` lines; `#` starts a comment.
pub fn read_trajectory<R: Read>(reader: R) -> Result<Vec<TrajectoryPoint>, IoError> {
    let mut out: Vec<TrajectoryPoint> = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let lineno = i as u64 + 1;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let v: Vec<f64> = body
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| IoError::Parse { line: lineno, message: e.to_string() })?;
        if v.len() != 8 {
            return Err(IoError::Parse { line: lineno, message: format!("expected 8 fields, got {}", v.len()) });
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(IoError::Parse { line: lineno, message: "quaternion is not unit".into() });
        }
        if let Some(prev) = out.last() {
            if v[0] <= prev.time {
                return Err(IoError::Parse { line: lineno, message: format!("timestamp {} not after {}", v[0], prev.time) });
            }
        }
        out.push(TrajectoryPoint {
            time: v[0],
            position: Vector3::new(v[1], v[2], v[3]),
            orientation: Quat::from_quaternion(q),
        });
    }
    Ok(out)
}

pub fn write_map_text<'a, W: Write>(writer: W, points: impl IntoIterator<Item = &'a MapPoint>) -> Result<(), IoError> {
    let mut w = BufWriter::new(writer);
    for p in points {
        writeln!(w, "{:.6} {:.6} {:.6} {:.6e} {:.3}", p.position.x, p.position.y, p.position.z, p.trace, p.rcs)?;
    }
    w.flush()?;
    Ok(())
}

/// Binary little-endian PLY with `x y z trace rcs` double properties.
pub fn write_map_ply<W: Write>(writer: W, points: &[MapPoint]) -> Result<(), IoError> {
    let mut w = BufWriter::new(writer);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nproperty double trace\nproperty double rcs\nend_header\n",
        points.len()
    )?;
    for p in points {
        for v in [p.position.x, p.position.y, p.position.z, p.trace, p.rcs] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_radar_file(path: &Path) -> Result<Vec<RadarScan>, IoError> {
    read_radar(open(path)?)
}

pub fn write_radar_file(path: &Path, scans: &[RadarScan]) -> Result<(), IoError> {
    write_radar(create(path)?, scans)
}

pub fn read_imu_file(path: &Path) -> Result<Vec<ImuSample>, IoError> {
    read_imu(open(path)?)
}

pub fn write_imu_file(path: &Path, samples: &[ImuSample]) -> Result<(), IoError> {
    write_imu(create(path)?, samples)
}

pub fn read_trajectory_file(path: &Path) -> Result<Vec<TrajectoryPoint>, IoError> {
    read_trajectory(open(path)?)
}

pub fn write_trajectory_file(path: &Path, traj: &[TrajectoryPoint]) -> Result<(), IoError> {
    write_trajectory(create(path)?, traj)
}

pub fn write_map_text_file(path: &Path, points: &[MapPoint]) -> Result<(), IoError> {
    write_map_text(create(path)?, points)
}

pub fn write_map_ply_file(path: &Path, points: &[MapPoint]) -> Result<(), IoError> {
    write_map_ply(create(path)?, points)
}

/// Writes one JSON object per line.
pub fn write_jsonl<W: Write, T: Serialize>(writer: W, records: &[T]) -> Result<(), IoError> {
    let mut w = BufWriter::new(writer);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl_file<T: Serialize>(path: &Path, records: &[T]) -> Result<(), IoError> {
    write_jsonl(create(path)?, records)
}
