//! Versioned JSON problem files and deterministic JSON emission.
//!
//! Every float is written with 17 significant digits so that a file read back
//! and written again is byte-identical.

use std::io;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::graph::{EdgeId, FactorGraph};
use crate::landmarks::{
    KeyframeId, LandmarkId, LineLandmark, LineObservation, NoiseModel, PointLandmark, PointObservation,
};
use crate::robust::Losses;
use crate::solver::SolveOptions;
use crate::synthetic::{GroundTruth, SceneConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Pretty JSON with every `f64` as `{:.16e}`.
pub struct FixedPrecisionFormatter<'a>(PrettyFormatter<'a>);

impl Default for FixedPrecisionFormatter<'_> {
    fn default() -> Self {
        Self(PrettyFormatter::with_indent(b"  "))
    }
}

impl Formatter for FixedPrecisionFormatter<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            write!(w, "{value:.16e}")
        } else {
            w.write_all(b"null")
        }
    }
    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }
    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Serializes `value` as pretty JSON with fixed float precision and a
/// trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedPrecisionFormatter::default());
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(|e| Error::Serialization(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    pub id: KeyframeId,
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl PoseEntry {
    pub fn new(id: KeyframeId, p: &Pose) -> Self {
        let r = &p.rotation;
        Self {
            id,
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }

    pub fn pose(&self) -> Result<Pose> {
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        Pose::new(r, Vector3::from(self.translation))
            .map_err(|e| Error::InvalidGraph(format!("keyframe {}: {e}", self.id)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosesSection {
    pub free: Vec<PoseEntry>,
    pub fixed: Vec<PoseEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarksSection {
    pub points: Vec<PointLandmark>,
    pub lines: Vec<LineLandmark>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationsSection {
    pub point: Vec<PointObservation>,
    pub line: Vec<LineObservation>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSection {
    pub options: SolveOptions,
    pub losses: Losses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueLineEntry {
    pub id: LandmarkId,
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
    pub guidance_points: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSection {
    pub poses: Vec<PoseEntry>,
    pub points: Vec<PointLandmark>,
    pub lines: Vec<TrueLineEntry>,
    #[serde(default)]
    pub outliers: Vec<EdgeId>,
}

impl TruthSection {
    pub fn from_truth(t: &GroundTruth) -> Self {
        Self {
            poses: t.poses.iter().map(|(id, p)| PoseEntry::new(*id, p)).collect(),
            points: t
                .points
                .iter()
                .map(|(id, x)| PointLandmark { id: *id, position: *x })
                .collect(),
            lines: t
                .lines
                .iter()
                .map(|(id, l)| TrueLineEntry {
                    id: *id,
                    start: l.start,
                    end: l.end,
                    guidance_points: l.guidance_points.clone(),
                })
                .collect(),
            outliers: t.outliers.clone(),
        }
    }

    pub fn poses(&self) -> Result<std::collections::BTreeMap<KeyframeId, Pose>> {
        self.poses.iter().map(|e| Ok((e.id, e.pose()?))).collect()
    }
}

/// On-disk problem: current estimates, measurements, solver settings and
/// optionally the generating configuration and ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    pub schema_version: u32,
    pub intrinsics: CameraIntrinsics,
    pub noise: NoiseModel,
    pub poses: PosesSection,
    pub landmarks: LandmarksSection,
    pub observations: ObservationsSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<TruthSection>,
}

impl ProblemFile {
    pub fn from_graph(graph: &FactorGraph, solver: SolverSection) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            intrinsics: graph.intrinsics,
            noise: graph.noise,
            poses: PosesSection {
                free: graph.free_poses.iter().map(|(id, p)| PoseEntry::new(*id, p)).collect(),
                fixed: graph.fixed_poses.iter().map(|(id, p)| PoseEntry::new(*id, p)).collect(),
            },
            landmarks: LandmarksSection {
                points: graph.point_landmarks.values().cloned().collect(),
                lines: graph.line_landmarks.values().cloned().collect(),
            },
            observations: ObservationsSection {
                point: graph.sorted_point_edges().into_iter().cloned().collect(),
                line: graph.sorted_line_edges().into_iter().cloned().collect(),
            },
            solver,
            scene: None,
            ground_truth: None,
        }
    }

    /// Rebuilds the graph. Duplicate ids are rejected here; structural checks
    /// are left to [`FactorGraph::validate`].
    pub fn to_graph(&self) -> Result<FactorGraph> {
        let mut g = FactorGraph::new(self.intrinsics, self.noise);
        for (section, target) in [
            (&self.poses.free, &mut g.free_poses),
            (&self.poses.fixed, &mut g.fixed_poses),
        ] {
            for e in section {
                if target.insert(e.id, e.pose()?).is_some() {
                    return Err(Error::InvalidGraph(format!("duplicate keyframe id {}", e.id)));
                }
            }
        }
        for p in &self.landmarks.points {
            if g.point_landmarks.insert(p.id, p.clone()).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate point landmark id {}", p.id)));
            }
        }
        for l in &self.landmarks.lines {
            if g.line_landmarks.insert(l.id, l.clone()).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate line landmark id {}", l.id)));
            }
        }
        g.point_edges = self.observations.point.clone();
        g.line_edges = self.observations.line.clone();
        Ok(g)
    }

    pub fn to_json(&self) -> Result<String> {
        to_json_string(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Serialization(format!(
                    "unsupported schema version {v}, expected {SCHEMA_VERSION}"
                )))
            }
            None => return Err(Error::Serialization("missing schema_version".into())),
        }
        serde_json::from_value(value).map_err(|e| Error::Serialization(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Selector;
    use crate::synthetic::generate;

    fn sample() -> ProblemFile {
        let c = SceneConfig {
            seed: 7,
            points: 10,
            lines: 3,
            ..Default::default()
        };
        let (g, t) = generate(&c).unwrap();
        let mut p = ProblemFile::from_graph(&g, SolverSection::default());
        p.scene = Some(c);
        p.ground_truth = Some(TruthSection::from_truth(&t));
        p
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let p = sample();
        let a = p.to_json().unwrap();
        let q = ProblemFile::from_json(&a).unwrap();
        assert_eq!(q, p);
        assert_eq!(q.to_json().unwrap(), a);
        q.to_graph().unwrap().validate(Selector::Both).unwrap();
    }

    #[test]
    fn floats_use_17_digits() {
        let s = to_json_string(&vec![0.1f64, 1.0, -2.5]).unwrap();
        assert!(s.contains("1.0000000000000001e-1"), "{s}");
        assert!(s.contains("1.0000000000000000e0"));
        assert!(s.contains("-2.5000000000000000e0"));
        let back: Vec<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, vec![0.1, 1.0, -2.5]);
    }

    #[test]
    fn schema_version_checked() {
        let mut v: serde_json::Value = serde_json::from_str(&sample().to_json().unwrap()).unwrap();
        v["schema_version"] = serde_json::json!(99);
        assert!(matches!(
            ProblemFile::from_json(&v.to_string()),
            Err(Error::Serialization(_))
        ));
        v.as_object_mut().unwrap().remove("schema_version");
        assert!(matches!(
            ProblemFile::from_json(&v.to_string()),
            Err(Error::Serialization(_))
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut p = sample();
        let dup = p.landmarks.points[0].clone();
        p.landmarks.points.push(dup);
        assert!(matches!(p.to_graph(), Err(Error::InvalidGraph(_))));
    }
}
