//! On-disk formats. Line-oriented JSON for sensor logs and per-frame
//! records, TUM-style text for trajectories. Every file starts with a
//! version header; floats are written in shortest-round-trip form, so a
//! read/write cycle preserves values exactly.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::backend::Landmark;
use crate::eval::Trajectory;
use crate::geometry::PoseSE2;
use crate::orientation::ImuSample;
use crate::preprocess::LaserScan;
use crate::{Error, Result};

pub const FORMAT_VERSION_LINE: &str = "format_version: 1";
const TUM_VERSION_LINE: &str = "# format_version: 1";

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Write lines atomically: temp file in the same directory, then rename.
fn write_atomic(path: &Path, content: &str) -> Result<()> {
    let tmp = path.with_extension("tmp.part");
    {
        let mut f = BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(content.as_bytes())?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_versioned_lines(path: &Path) -> Result<Vec<String>> {
    let file = std::fs::File::open(path)?;
    let mut lines = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        lines.push(line?);
    }
    match lines.first().map(|s| s.trim()) {
        Some(FORMAT_VERSION_LINE) => Ok(lines.split_off(1)),
        Some(other) => Err(parse_err(path, 1, format!("bad version header: {other}"))),
        None => Err(parse_err(path, 1, "empty file")),
    }
}

// ---- scan log -------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ScanHeader {
    beam_count: usize,
}

#[derive(Serialize, Deserialize)]
struct ScanRecord {
    t: f64,
    angle_min: f64,
    angle_inc: f64,
    range_min: f64,
    range_max: f64,
    /// Misses (non-finite ranges) are stored as null.
    ranges: Vec<Option<f64>>,
}

pub fn write_scan_log(path: &Path, scans: &[LaserScan]) -> Result<()> {
    let mut out = String::from(FORMAT_VERSION_LINE);
    out.push('\n');
    let beam_count = scans.first().map(|s| s.ranges.len()).unwrap_or(0);
    out.push_str(&serde_json::to_string(&ScanHeader { beam_count }).unwrap());
    out.push('\n');
    for scan in scans {
        let rec = ScanRecord {
            t: scan.timestamp,
            angle_min: scan.angle_min,
            angle_inc: scan.angle_increment,
            range_min: scan.range_min,
            range_max: scan.range_max,
            ranges: scan
                .ranges
                .iter()
                .map(|r| if r.is_finite() { Some(*r) } else { None })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&rec).unwrap());
        out.push('\n');
    }
    write_atomic(path, &out)
}

pub fn read_scan_log(path: &Path) -> Result<Vec<LaserScan>> {
    let lines = read_versioned_lines(path)?;
    let mut iter = lines.iter().enumerate();
    let header: ScanHeader = match iter.next() {
        Some((_, line)) => serde_json::from_str(line)
            .map_err(|e| parse_err(path, 2, format!("bad scan header: {e}")))?,
        None => return Err(parse_err(path, 2, "missing scan header")),
    };
    let mut scans = Vec::new();
    for (i, line) in iter {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScanRecord = serde_json::from_str(line)
            .map_err(|e| parse_err(path, i + 2, format!("bad scan record: {e}")))?;
        if rec.ranges.len() != header.beam_count {
            return Err(parse_err(
                path,
                i + 2,
                format!(
                    "scan has {} ranges, header says {}",
                    rec.ranges.len(),
                    header.beam_count
                ),
            ));
        }
        scans.push(LaserScan {
            timestamp: rec.t,
            angle_min: rec.angle_min,
            angle_increment: rec.angle_inc,
            range_min: rec.range_min,
            range_max: rec.range_max,
            ranges: rec
                .ranges
                .into_iter()
                .map(|r| r.unwrap_or(f64::INFINITY))
                .collect(),
        });
    }
    Ok(scans)
}

// ---- imu log --------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ImuRecord {
    t: f64,
    ax: f64,
    ay: f64,
    az: f64,
    gx: f64,
    gy: f64,
    gz: f64,
    mx: Option<f64>,
    my: Option<f64>,
    mz: Option<f64>,
}

pub fn write_imu_log(path: &Path, samples: &[ImuSample]) -> Result<()> {
    let mut out = String::from(FORMAT_VERSION_LINE);
    out.push('\n');
    for s in samples {
        let rec = ImuRecord {
            t: s.timestamp,
            ax: s.accel.x,
            ay: s.accel.y,
            az: s.accel.z,
            gx: s.gyro.x,
            gy: s.gyro.y,
            gz: s.gyro.z,
            mx: s.mag.map(|m| m.x),
            my: s.mag.map(|m| m.y),
            mz: s.mag.map(|m| m.z),
        };
        out.push_str(&serde_json::to_string(&rec).unwrap());
        out.push('\n');
    }
    write_atomic(path, &out)
}

pub fn read_imu_log(path: &Path) -> Result<Vec<ImuSample>> {
    let lines = read_versioned_lines(path)?;
    let mut samples = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImuRecord = serde_json::from_str(line)
            .map_err(|e| parse_err(path, i + 2, format!("bad imu record: {e}")))?;
        let mag = match (rec.mx, rec.my, rec.mz) {
            (Some(x), Some(y), Some(z)) => Some(Vector3::new(x, y, z)),
            _ => None,
        };
        samples.push(ImuSample {
            timestamp: rec.t,
            accel: Vector3::new(rec.ax, rec.ay, rec.az),
            gyro: Vector3::new(rec.gx, rec.gy, rec.gz),
            mag,
        });
    }
    Ok(samples)
}

// ---- trajectory (TUM text) -------------------------------------------------

/// `t x y z qx qy qz qw` per line; planar poses embed z = 0 and a
/// yaw-only quaternion. The version header is a `#` comment so external
/// TUM tooling still reads the file.
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut out = String::from(TUM_VERSION_LINE);
    out.push('\n');
    for (t, pose) in &traj.poses {
        let q = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), pose.theta);
        out.push_str(&format!(
            "{} {} {} 0 {} {} {} {}\n",
            t, pose.x, pose.y, q.i, q.j, q.k, q.w
        ));
    }
    write_atomic(path, &out)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let file = std::fs::File::open(path)?;
    let mut poses = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(parse_err(
                path,
                i + 1,
                format!("trajectory line needs 8 fields, found {}", fields.len()),
            ));
        }
        let vals: Vec<f64> = fields
            .iter()
            .enumerate()
            .map(|(fi, s)| {
                s.parse::<f64>()
                    .map_err(|_| parse_err(path, i + 1, format!("bad field {fi}: {s}")))
            })
            .collect::<Result<_>>()?;
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            vals[7], vals[4], vals[5], vals[6],
        ));
        let (_, _, yaw) = q.euler_angles();
        poses.push((vals[0], PoseSE2::new(vals[1], vals[2], yaw)));
    }
    Ok(Trajectory::new(poses))
}

// ---- landmark map ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LandmarkRecord {
    id: u64,
    x: f64,
    y: f64,
    r: f64,
    dynamic: bool,
}

pub fn write_landmarks(path: &Path, landmarks: &[Landmark]) -> Result<()> {
    let mut out = String::from(FORMAT_VERSION_LINE);
    out.push('\n');
    for l in landmarks {
        let rec = LandmarkRecord {
            id: l.id,
            x: l.center.0,
            y: l.center.1,
            r: l.radius,
            dynamic: l.dynamic,
        };
        out.push_str(&serde_json::to_string(&rec).unwrap());
        out.push('\n');
    }
    write_atomic(path, &out)
}

/// Landmarks reload as bare records (id, center, radius, dynamic flag).
pub fn read_landmarks(path: &Path) -> Result<Vec<(u64, (f64, f64), f64, bool)>> {
    let lines = read_versioned_lines(path)?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: LandmarkRecord = serde_json::from_str(line)
            .map_err(|e| parse_err(path, i + 2, format!("bad landmark record: {e}")))?;
        out.push((rec.id, (rec.x, rec.y), rec.r, rec.dynamic));
    }
    Ok(out)
}

// ---- per-frame object records (labels / preliminary / detections) ----------

#[derive(Serialize, Deserialize)]
struct ObjectsRecord {
    t: f64,
    /// Slots of (cx, cy, r); absent slots use the (0, 0, -1) sentinel.
    objects: Vec<(f64, f64, f64)>,
}

pub fn write_object_frames(path: &Path, frames: &[(f64, Vec<(f64, f64, f64)>)]) -> Result<()> {
    let mut out = String::from(FORMAT_VERSION_LINE);
    out.push('\n');
    for (t, objects) in frames {
        let rec = ObjectsRecord {
            t: *t,
            objects: objects.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).unwrap());
        out.push('\n');
    }
    write_atomic(path, &out)
}

pub fn read_object_frames(path: &Path) -> Result<Vec<(f64, Vec<(f64, f64, f64)>)>> {
    let lines = read_versioned_lines(path)?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ObjectsRecord = serde_json::from_str(line)
            .map_err(|e| parse_err(path, i + 2, format!("bad objects record: {e}")))?;
        out.push((rec.t, rec.objects));
    }
    Ok(out)
}

// ---- orientation log ---------------------------------------------------

#[derive(Serialize, Deserialize)]
struct OrientationRecord {
    t: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    qw: f64,
}

pub fn write_orientation_log(path: &Path, rows: &[(f64, UnitQuaternion<f64>)]) -> Result<()> {
    let mut out = String::from(FORMAT_VERSION_LINE);
    out.push('\n');
    for (t, q) in rows {
        let rec = OrientationRecord {
            t: *t,
            qx: q.i,
            qy: q.j,
            qz: q.k,
            qw: q.w,
        };
        out.push_str(&serde_json::to_string(&rec).unwrap());
        out.push('\n');
    }
    write_atomic(path, &out)
}

pub fn read_orientation_log(path: &Path) -> Result<Vec<(f64, UnitQuaternion<f64>)>> {
    let lines = read_versioned_lines(path)?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: OrientationRecord = serde_json::from_str(line)
            .map_err(|e| parse_err(path, i + 2, format!("bad orientation record: {e}")))?;
        out.push((
            rec.t,
            UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                rec.qw, rec.qx, rec.qy, rec.qz,
            )),
        ));
    }
    Ok(out)
}

// ---- point map (plain text) -------------------------------------------

pub fn write_point_map(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    let mut out = String::from(TUM_VERSION_LINE);
    out.push('\n');
    for (x, y) in points {
        out.push_str(&format!("{} {}\n", x, y));
    }
    write_atomic(path, &out)
}

pub fn read_point_map(path: &Path) -> Result<Vec<(f64, f64)>> {
    let file = std::fs::File::open(path)?;
    let mut points = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(parse_err(path, i + 1, "point line needs 2 fields"));
        }
        let x = fields[0]
            .parse()
            .map_err(|_| parse_err(path, i + 1, format!("bad x: {}", fields[0])))?;
        let y = fields[1]
            .parse()
            .map_err(|_| parse_err(path, i + 1, format!("bad y: {}", fields[1])))?;
        points.push((x, y));
    }
    Ok(points)
}

// ---- timing / error-series CSV ------------------------------------------

pub fn write_timing_csv(path: &Path, rows: &[(f64, f64, f64, f64, f64)]) -> Result<()> {
    let mut out = String::from("t,odometry_ms,detect_ms,fuse_ms,total_ms\n");
    for (t, a, b, c, d) in rows {
        out.push_str(&format!("{},{},{},{},{}\n", t, a, b, c, d));
    }
    write_atomic(path, &out)
}

pub fn read_timing_csv(path: &Path) -> Result<Vec<(f64, f64, f64, f64, f64)>> {
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(path, i + 1, format!("bad csv value: {s}")))
            })
            .collect::<Result<_>>()?;
        if fields.len() != 5 {
            return Err(parse_err(path, i + 1, "timing row needs 5 values"));
        }
        rows.push((fields[0], fields[1], fields[2], fields[3], fields[4]));
    }
    Ok(rows)
}

pub fn write_error_series_csv(path: &Path, rows: &[(f64, f64)]) -> Result<()> {
    let mut out = String::from("t,error_m\n");
    for (t, e) in rows {
        out.push_str(&format!("{},{}\n", t, e));
    }
    write_atomic(path, &out)
}
