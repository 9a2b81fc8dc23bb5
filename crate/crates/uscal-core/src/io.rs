//! File formats and ingestion: acquisition files (tracked needle + US
//! detections per record), calibration results, phantom validation records,
//! and the CSV emitted by the experiment harness.
//!
//! Files are versioned JSON with explicit units in the header. Floats are
//! written in their shortest round-trippable form, so finite values survive
//! a write/read cycle bit-exactly.

use crate::calib2d::Acquisition2D;
use crate::calib3d::Acquisition3D;
use crate::geometry::{Line3, Point3, Similarity, LINE_EPS};
use crate::sim::TrialReport;
use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: &str = "uscal/1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// Includes line/column context from the JSON parser.
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported file version {found:?}, expected {FORMAT_VERSION:?}")]
    UnsupportedVersion { found: String },
    #[error("record {index}: {reason}")]
    InvariantViolation { index: usize, reason: String },
}

/// Probe kind tag carried by acquisition and phantom files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeKind {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitsHeader {
    /// Unit of tracked coordinates (needle endpoints, poses).
    pub tracked: String,
    /// Unit of scan-frame detections.
    pub us: String,
}

impl Default for UnitsHeader {
    fn default() -> Self {
        UnitsHeader {
            tracked: "mm".to_string(),
            us: "us-unit".to_string(),
        }
    }
}

/// Rigid transform from the probe-marker frame M to the fixed tracker frame
/// O, as reported by the tracking system for one acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingPose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl TrackingPose {
    pub fn identity() -> Self {
        TrackingPose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    fn from_record(q_wxyz: [f64; 4], t: [f64; 3], index: usize) -> Result<Self, IoError> {
        let q = Quaternion::new(q_wxyz[0], q_wxyz[1], q_wxyz[2], q_wxyz[3]);
        let norm = q.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(IoError::InvariantViolation {
                index,
                reason: format!("pose quaternion norm {norm} is not 1"),
            });
        }
        Ok(TrackingPose {
            rotation: UnitQuaternion::from_quaternion(q),
            translation: Vector3::from(t),
        })
    }

    /// Maps a point measured in the tracker frame O into the marker frame M.
    pub fn to_marker(&self, p_tracker: Point3) -> Point3 {
        self.rotation.inverse() * (p_tracker - self.translation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record3 {
    /// Needle endpoints in the tracker frame O (mm).
    pub needle_o: [[f64; 3]; 2],
    /// Probe marker pose T_{M->O}: quaternion (w, x, y, z) and translation.
    pub pose_q_wxyz: [f64; 4],
    pub pose_t_mm: [f64; 3],
    /// Two points sampled from the scanned needle line (US units).
    pub us_points: [[f64; 3]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record2 {
    pub needle_o: [[f64; 3]; 2],
    pub pose_q_wxyz: [f64; 4],
    pub pose_t_mm: [f64; 3],
    /// Image-point detection of the needle cross-section (US units).
    pub us_point: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionFile<R> {
    pub version: String,
    pub units: UnitsHeader,
    pub probe: ProbeKind,
    pub records: Vec<R>,
}

pub type AcquisitionFile3 = AcquisitionFile<Record3>;
pub type AcquisitionFile2 = AcquisitionFile<Record2>;

fn check_header<R>(file: &AcquisitionFile<R>, expected: ProbeKind) -> Result<(), IoError> {
    if file.version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion {
            found: file.version.clone(),
        });
    }
    if file.probe != expected {
        return Err(IoError::InvariantViolation {
            index: 0,
            reason: format!("probe kind {:?} does not match the requested mode", file.probe),
        });
    }
    if file.units.tracked != "mm" {
        return Err(IoError::InvariantViolation {
            index: 0,
            reason: format!("unsupported tracked units {:?}", file.units.tracked),
        });
    }
    if file.records.is_empty() {
        return Err(IoError::InvariantViolation {
            index: 0,
            reason: "file contains no records".to_string(),
        });
    }
    Ok(())
}

fn needle_line(rec_needle: &[[f64; 3]; 2], pose: &TrackingPose, index: usize) -> Result<Line3, IoError> {
    let p0 = pose.to_marker(Vector3::from(rec_needle[0]));
    let p1 = pose.to_marker(Vector3::from(rec_needle[1]));
    Line3::new(p0, p1).map_err(|_| IoError::InvariantViolation {
        index,
        reason: format!("needle endpoints are closer than {LINE_EPS} mm"),
    })
}

/// Maps every record into the marker frame: needle endpoints go through the
/// inverse of T_{M->O}, US detections pass through unchanged.
pub fn ingest_3d(file: &AcquisitionFile3) -> Result<Vec<Acquisition3D>, IoError> {
    check_header(file, ProbeKind::ThreeD)?;
    let mut out = Vec::with_capacity(file.records.len());
    for (index, rec) in file.records.iter().enumerate() {
        let pose = TrackingPose::from_record(rec.pose_q_wxyz, rec.pose_t_mm, index)?;
        let line = needle_line(&rec.needle_o, &pose, index)?;
        let acq = Acquisition3D::new(
            line,
            Vector3::from(rec.us_points[0]),
            Vector3::from(rec.us_points[1]),
        )
        .map_err(|e| IoError::InvariantViolation {
            index,
            reason: e.to_string(),
        })?;
        out.push(acq);
    }
    Ok(out)
}

pub fn ingest_2d(file: &AcquisitionFile2) -> Result<Vec<Acquisition2D>, IoError> {
    check_header(file, ProbeKind::TwoD)?;
    let mut out = Vec::with_capacity(file.records.len());
    for (index, rec) in file.records.iter().enumerate() {
        let pose = TrackingPose::from_record(rec.pose_q_wxyz, rec.pose_t_mm, index)?;
        let line = needle_line(&rec.needle_o, &pose, index)?;
        let acq = Acquisition2D::new(line, Vector2::from(rec.us_point)).map_err(|e| {
            IoError::InvariantViolation {
                index,
                reason: e.to_string(),
            }
        })?;
        out.push(acq);
    }
    Ok(out)
}

/// Serializes marker-frame acquisitions with identity poses; the inverse of
/// `ingest_3d`, bit-exact for finite values.
pub fn emit_3d(acqs: &[Acquisition3D]) -> AcquisitionFile3 {
    AcquisitionFile {
        version: FORMAT_VERSION.to_string(),
        units: UnitsHeader::default(),
        probe: ProbeKind::ThreeD,
        records: acqs
            .iter()
            .map(|a| Record3 {
                needle_o: [a.tracked_line.p0().into(), a.tracked_line.p1().into()],
                pose_q_wxyz: [1.0, 0.0, 0.0, 0.0],
                pose_t_mm: [0.0; 3],
                us_points: [a.us_points.0.into(), a.us_points.1.into()],
            })
            .collect(),
    }
}

pub fn emit_2d(acqs: &[Acquisition2D]) -> AcquisitionFile2 {
    AcquisitionFile {
        version: FORMAT_VERSION.to_string(),
        units: UnitsHeader::default(),
        probe: ProbeKind::TwoD,
        records: acqs
            .iter()
            .map(|a| Record2 {
                needle_o: [a.tracked_line.p0().into(), a.tracked_line.p1().into()],
                pose_q_wxyz: [1.0, 0.0, 0.0, 0.0],
                pose_t_mm: [0.0; 3],
                us_point: a.us_point.into(),
            })
            .collect(),
    }
}

/// Calibration result: the similarity plus consensus statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub version: String,
    pub probe: ProbeKind,
    pub solver: String,
    pub seed: u64,
    pub threshold_mm: f64,
    pub quaternion_wxyz: [f64; 4],
    pub translation_mm: [f64; 3],
    pub scale: f64,
    pub inlier_mask: Vec<bool>,
    pub inlier_count: usize,
    pub mean_inlier_residual_mm: f64,
    pub iterations_used: usize,
    pub refined: bool,
}

/// Reconstructs the similarity from a calibration file, validating the
/// quaternion and scale invariants.
pub fn similarity_from_calibration(file: &CalibrationFile) -> Result<Similarity, IoError> {
    if file.version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion {
            found: file.version.clone(),
        });
    }
    let q = Quaternion::new(
        file.quaternion_wxyz[0],
        file.quaternion_wxyz[1],
        file.quaternion_wxyz[2],
        file.quaternion_wxyz[3],
    );
    let norm = q.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
        return Err(IoError::InvariantViolation {
            index: 0,
            reason: format!("calibration quaternion norm {norm} is not 1"),
        });
    }
    if !file.scale.is_finite() || file.scale <= 0.0 {
        return Err(IoError::InvariantViolation {
            index: 0,
            reason: format!("calibration scale {} is not positive", file.scale),
        });
    }
    Ok(Similarity::new(
        UnitQuaternion::from_quaternion(q),
        Vector3::from(file.translation_mm),
        file.scale,
    ))
}

pub fn calibration_from_similarity(
    sim: &Similarity,
    probe: ProbeKind,
    solver: &str,
    seed: u64,
    threshold_mm: f64,
    inlier_mask: Vec<bool>,
    mean_inlier_residual_mm: f64,
    iterations_used: usize,
) -> CalibrationFile {
    let q = sim.rotation.into_inner();
    CalibrationFile {
        version: FORMAT_VERSION.to_string(),
        probe,
        solver: solver.to_string(),
        seed,
        threshold_mm,
        quaternion_wxyz: [q.w, q.i, q.j, q.k],
        translation_mm: sim.translation.into(),
        scale: sim.scale,
        inlier_count: inlier_mask.iter().filter(|&&b| b).count(),
        inlier_mask,
        mean_inlier_residual_mm,
        iterations_used,
        refined: true,
    }
}

/// One cross-wire phantom observation: the wire crossing measured in the
/// scan frame and the same physical point measured by the tracker in frame O.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomRecord3 {
    pub us_point: [f64; 3],
    pub point_o: [f64; 3],
    pub pose_q_wxyz: [f64; 4],
    pub pose_t_mm: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomRecord2 {
    pub us_point: [f64; 2],
    pub point_o: [f64; 3],
    pub pose_q_wxyz: [f64; 4],
    pub pose_t_mm: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomFile<R> {
    pub version: String,
    pub units: UnitsHeader,
    pub probe: ProbeKind,
    pub records: Vec<R>,
}

pub type PhantomFile3 = PhantomFile<PhantomRecord3>;
pub type PhantomFile2 = PhantomFile<PhantomRecord2>;

/// (scan-frame point, marker-frame point) pairs ready for the PRA metric.
pub fn phantom_pairs_3d(file: &PhantomFile3) -> Result<Vec<(Point3, Point3)>, IoError> {
    if file.version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion {
            found: file.version.clone(),
        });
    }
    file.records
        .iter()
        .enumerate()
        .map(|(index, rec)| {
            let pose = TrackingPose::from_record(rec.pose_q_wxyz, rec.pose_t_mm, index)?;
            Ok((
                Vector3::from(rec.us_point),
                pose.to_marker(Vector3::from(rec.point_o)),
            ))
        })
        .collect()
}

pub fn phantom_pairs_2d(file: &PhantomFile2) -> Result<Vec<(Point3, Point3)>, IoError> {
    if file.version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion {
            found: file.version.clone(),
        });
    }
    file.records
        .iter()
        .enumerate()
        .map(|(index, rec)| {
            let pose = TrackingPose::from_record(rec.pose_q_wxyz, rec.pose_t_mm, index)?;
            Ok((
                Vector3::new(rec.us_point[0], rec.us_point[1], 0.0),
                pose.to_marker(Vector3::from(rec.point_o)),
            ))
        })
        .collect()
}

/// Peeks at the `probe` field so callers can dispatch without a mode flag.
pub fn peek_probe_kind(path: &Path) -> Result<ProbeKind, IoError> {
    #[derive(Deserialize)]
    struct Header {
        probe: ProbeKind,
    }
    let text = std::fs::read_to_string(path)?;
    let header: Header = serde_json::from_str(&text)?;
    Ok(header.probe)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Trial table in the simulate command's CSV layout.
pub fn write_trials_csv<W: Write>(trials: &[TrialReport], mut w: W) -> std::io::Result<()> {
    writeln!(w, "method,N,trial,rot_err_rad,trans_err_mm,scale_err,failed")?;
    for t in trials {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            t.method, t.n_used, t.trial, t.rot_err_rad, t.trans_err_mm, t.scale_err, t.failed
        )?;
    }
    Ok(())
}

/// Per-record PRA table for the validate command.
pub fn write_pra_csv<W: Write>(pra_mm: &[f64], mut w: W) -> std::io::Result<()> {
    writeln!(w, "record,pra_mm")?;
    for (i, v) in pra_mm.iter().enumerate() {
        writeln!(w, "{i},{v}")?;
    }
    Ok(())
}
