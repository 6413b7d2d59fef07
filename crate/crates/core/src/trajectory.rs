//! TUM-format trajectories, rigid alignment and absolute trajectory error.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::landmarks::KeyframeId;

/// Association window used by the TUM benchmark tools (seconds).
pub const DEFAULT_ASSOCIATION_TOLERANCE: f64 = 0.02;

/// One line of a TUM file: camera-to-world translation and rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub timestamp: f64,
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl TrajectoryRecord {
    /// Record of a world-to-camera pose.
    pub fn from_pose(timestamp: f64, pose: &Pose) -> Self {
        let c2w = pose.inverse();
        Self {
            timestamp,
            translation: c2w.translation,
            rotation: c2w.quaternion(),
        }
    }

    /// World-to-camera pose of this record.
    pub fn to_pose(&self) -> Pose {
        Pose::from_quaternion(&self.rotation, self.translation).inverse()
    }
}

pub type Trajectory = Vec<TrajectoryRecord>;

/// Keyframe poses as a trajectory stamped with their ids (seconds).
pub fn trajectory_from_poses(poses: &BTreeMap<KeyframeId, Pose>) -> Trajectory {
    poses
        .iter()
        .map(|(id, p)| TrajectoryRecord::from_pose(*id as f64, p))
        .collect()
}

/// Parses `timestamp tx ty tz qx qy qz qw` lines. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_trajectory(text: &str) -> Result<Trajectory> {
    let mut out: Trajectory = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(Error::Parse {
                line: n,
                message: format!("expected 8 fields, found {}", fields.len()),
            });
        }
        let mut v = [0.0; 8];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f.parse::<f64>().map_err(|e| Error::Parse {
                line: n,
                message: format!("'{f}': {e}"),
            })?;
            if !slot.is_finite() {
                return Err(Error::Parse {
                    line: n,
                    message: format!("non-finite value '{f}'"),
                });
            }
        }
        if let Some(prev) = out.last() {
            if v[0] <= prev.timestamp {
                return Err(Error::Parse {
                    line: n,
                    message: format!("timestamp {} not after {}", v[0], prev.timestamp),
                });
            }
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        let norm = q.norm();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::Parse {
                line: n,
                message: format!("quaternion norm {norm} is not 1"),
            });
        }
        let rotation = if (norm - 1.0).abs() > 1e-6 {
            log::warn!("line {n}: renormalizing quaternion with norm {norm}");
            UnitQuaternion::from_quaternion(q)
        } else {
            UnitQuaternion::new_unchecked(q)
        };
        out.push(TrajectoryRecord {
            timestamp: v[0],
            translation: Vector3::new(v[1], v[2], v[3]),
            rotation,
        });
    }
    Ok(out)
}

/// Writes one record per line with 17 significant digits and `\n` endings.
pub fn write_trajectory(records: &[TrajectoryRecord]) -> String {
    let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for r in records {
        let q = r.rotation.quaternion();
        let vals = [
            r.timestamp,
            r.translation.x,
            r.translation.y,
            r.translation.z,
            q.i,
            q.j,
            q.k,
            q.w,
        ];
        let line: Vec<String> = vals.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }
}

/// Least-squares `R, t` minimizing `sum |R est_i + t - ref_i|^2`, with the
/// per-pair residual norms after alignment.
pub fn umeyama_align(estimated: &[Vector3<f64>], reference: &[Vector3<f64>]) -> Result<(RigidTransform, Vec<f64>)> {
    if estimated.len() != reference.len() {
        return Err(Error::InvalidArgument(format!(
            "{} estimated vs {} reference positions",
            estimated.len(),
            reference.len()
        )));
    }
    let n = estimated.len();
    if n < 3 {
        return Err(Error::AlignmentDegenerate(format!("{n} pairs, need at least 3")));
    }
    let mean = |v: &[Vector3<f64>]| v.iter().fold(Vector3::zeros(), |a, b| a + b) / n as f64;
    let (me, mr) = (mean(estimated), mean(reference));
    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (e, r) in estimated.iter().zip(reference) {
        cov += (r - mr) * (e - me).transpose();
        spread += (e - me) * (e - me).transpose();
    }
    let sv = spread.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::AlignmentDegenerate("positions are collinear".into()));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * vt;
    let t = RigidTransform {
        rotation,
        translation: mr - rotation * me,
    };
    let residuals = estimated
        .iter()
        .zip(reference)
        .map(|(e, r)| (t.apply(e) - r).norm())
        .collect();
    Ok((t, residuals))
}

/// Index pairs `(estimated, reference)` matched greedily by smallest time
/// difference within `tolerance`; each record is used at most once. Sorted
/// by estimated index.
pub fn associate(
    estimated: &[TrajectoryRecord],
    reference: &[TrajectoryRecord],
    tolerance: f64,
) -> Vec<(usize, usize)> {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (i, e) in estimated.iter().enumerate() {
        // reference timestamps are sorted, so scan the window only
        let lo = reference.partition_point(|r| r.timestamp < e.timestamp - tolerance);
        for (j, r) in reference.iter().enumerate().skip(lo) {
            if r.timestamp > e.timestamp + tolerance {
                break;
            }
            cands.push(((e.timestamp - r.timestamp).abs(), i, j));
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_e = vec![false; estimated.len()];
    let mut used_r = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in cands {
        if !used_e[i] && !used_r[j] {
            used_e[i] = true;
            used_r[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort();
    pairs
}

/// Per-pair translational error after alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedErrors {
    pub transform: RigidTransform,
    /// `(reference timestamp, aligned estimate - reference)`.
    pub errors: Vec<(f64, Vector3<f64>)>,
}

impl AlignedErrors {
    pub fn rmse(&self) -> f64 {
        let s: f64 = self.errors.iter().map(|(_, e)| e.norm_squared()).sum();
        (s / self.errors.len() as f64).sqrt()
    }
}

pub fn aligned_errors(
    estimated: &[TrajectoryRecord],
    reference: &[TrajectoryRecord],
    tolerance: f64,
) -> Result<AlignedErrors> {
    let pairs = associate(estimated, reference, tolerance);
    if pairs.len() < 3 {
        return Err(Error::InsufficientAssociations {
            found: pairs.len(),
            needed: 3,
        });
    }
    let e: Vec<Vector3<f64>> = pairs.iter().map(|(i, _)| estimated[*i].translation).collect();
    let r: Vec<Vector3<f64>> = pairs.iter().map(|(_, j)| reference[*j].translation).collect();
    let (transform, _) = umeyama_align(&e, &r)?;
    let errors = pairs
        .iter()
        .zip(e.iter().zip(&r))
        .map(|((_, j), (e, r))| (reference[*j].timestamp, transform.apply(e) - r))
        .collect();
    Ok(AlignedErrors { transform, errors })
}

/// Translational RMSE after SE(3) alignment (meters).
pub fn ate_rmse(estimated: &[TrajectoryRecord], reference: &[TrajectoryRecord], tolerance: f64) -> Result<f64> {
    Ok(aligned_errors(estimated, reference, tolerance)?.rmse())
}
