//! TUM trajectory text format: `timestamp tx ty tz qx qy qz qw` per line,
//! space separated, nine decimals.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::Pose;

#[derive(Debug, Error)]
pub enum TumError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{poses} poses but {stamps} timestamps")]
    LengthMismatch { poses: usize, stamps: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct StampedPose {
    pub timestamp: f64,
    pub pose: Pose,
}

/// Formats poses (camera-in-world) as TUM text.
pub fn format_tum(poses: &[Pose], timestamps: &[f64]) -> Result<String, TumError> {
    if poses.len() != timestamps.len() {
        return Err(TumError::LengthMismatch {
            poses: poses.len(),
            stamps: timestamps.len(),
        });
    }
    let mut out = String::with_capacity(poses.len() * 96);
    for (pose, ts) in poses.iter().zip(timestamps) {
        let t = pose.translation();
        let q = pose.quaternion().into_inner();
        // canonical hemisphere so equal rotations print identically
        let q = if q.w < 0.0 { -q } else { q };
        writeln!(
            out,
            "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            ts, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )
        .expect("writing to a String cannot fail");
    }
    Ok(out.replace("-0.000000000", "0.000000000"))
}

pub fn write_tum(path: &Path, poses: &[Pose], timestamps: &[f64]) -> Result<(), TumError> {
    std::fs::write(path, format_tum(poses, timestamps)?)?;
    Ok(())
}

/// Parses TUM text; blank lines and `#` comments are skipped.
pub fn parse_tum(text: &str) -> Result<Vec<StampedPose>, TumError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<Result<_, _>>()
            .map_err(|e| TumError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
        if vals.len() != 8 {
            return Err(TumError::Parse {
                line: i + 1,
                reason: format!("expected 8 fields, found {}", vals.len()),
            });
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if !(q.norm() > 1e-9) {
            return Err(TumError::Parse {
                line: i + 1,
                reason: "zero quaternion".into(),
            });
        }
        out.push(StampedPose {
            timestamp: vals[0],
            pose: Pose::from_quaternion(
                &UnitQuaternion::from_quaternion(q),
                Vector3::new(vals[1], vals[2], vals[3]),
            ),
        });
    }
    Ok(out)
}

pub fn read_tum(path: &Path) -> Result<Vec<StampedPose>, TumError> {
    parse_tum(&std::fs::read_to_string(path)?)
}
