//! Local bundle-adjustment problem: free and fixed keyframes, point and line
//! landmarks, and their observation edges.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::landmarks::{
    guidance_residual, point_observation_covariance, point_residual, KeyframeId, LandmarkId, LineLandmark,
    LineObservation, NoiseModel, PointLandmark, PointObservation,
};

/// Which landmark families enter a problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    Points,
    Lines,
    Both,
}

impl Selector {
    pub fn points(self) -> bool {
        matches!(self, Selector::Points | Selector::Both)
    }

    pub fn lines(self) -> bool {
        matches!(self, Selector::Lines | Selector::Both)
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Selector::Points => "points",
            Selector::Lines => "lines",
            Selector::Both => "both",
        })
    }
}

impl std::str::FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "points" => Ok(Selector::Points),
            "lines" => Ok(Selector::Lines),
            "both" => Ok(Selector::Both),
            other => Err(Error::InvalidArgument(format!("unknown selector '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Point,
    Line,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeId {
    pub kind: EdgeKind,
    pub keyframe_id: KeyframeId,
    pub landmark_id: LandmarkId,
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            EdgeKind::Point => "point",
            EdgeKind::Line => "line",
        };
        write!(f, "{k}(kf={}, lm={})", self.keyframe_id, self.landmark_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorGraph {
    pub intrinsics: CameraIntrinsics,
    pub noise: NoiseModel,
    pub free_poses: BTreeMap<KeyframeId, Pose>,
    pub fixed_poses: BTreeMap<KeyframeId, Pose>,
    pub point_landmarks: BTreeMap<LandmarkId, PointLandmark>,
    pub line_landmarks: BTreeMap<LandmarkId, LineLandmark>,
    pub point_edges: Vec<PointObservation>,
    pub line_edges: Vec<LineObservation>,
}

/// Block-diagonal covariance of a stacked residual.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagonal {
    pub blocks: Vec<DMatrix<f64>>,
}

impl BlockDiagonal {
    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.nrows()).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        let mut o = 0;
        for b in &self.blocks {
            let k = b.nrows();
            m.view_mut((o, o), (k, k)).copy_from(b);
            o += k;
        }
        m
    }
}

/// Stacked residual of the selected edges in canonical order.
#[derive(Debug, Clone)]
pub struct AssembledResidual {
    pub residual: DVector<f64>,
    pub covariance: BlockDiagonal,
    pub edges: Vec<EdgeId>,
    /// Edges left out because a landmark was behind the camera.
    pub dropped: Vec<EdgeId>,
}

impl FactorGraph {
    pub fn new(intrinsics: CameraIntrinsics, noise: NoiseModel) -> Self {
        Self {
            intrinsics,
            noise,
            free_poses: BTreeMap::new(),
            fixed_poses: BTreeMap::new(),
            point_landmarks: BTreeMap::new(),
            line_landmarks: BTreeMap::new(),
            point_edges: Vec::new(),
            line_edges: Vec::new(),
        }
    }

    pub fn pose(&self, id: KeyframeId) -> Option<&Pose> {
        self.free_poses.get(&id).or_else(|| self.fixed_poses.get(&id))
    }

    pub fn is_free(&self, id: KeyframeId) -> bool {
        self.free_poses.contains_key(&id)
    }

    pub fn all_poses(&self) -> BTreeMap<KeyframeId, Pose> {
        let mut all = self.fixed_poses.clone();
        all.extend(self.free_poses.iter().map(|(k, v)| (*k, *v)));
        all
    }

    /// Point edges in canonical (keyframe, landmark) order.
    pub fn sorted_point_edges(&self) -> Vec<&PointObservation> {
        let mut e: Vec<_> = self.point_edges.iter().collect();
        e.sort_by_key(|o| (o.keyframe_id, o.landmark_id));
        e
    }

    pub fn sorted_line_edges(&self) -> Vec<&LineObservation> {
        let mut e: Vec<_> = self.line_edges.iter().collect();
        e.sort_by_key(|o| (o.keyframe_id, o.landmark_id));
        e
    }

    pub fn has_edges(&self, selector: Selector) -> bool {
        (selector.points() && !self.point_edges.is_empty()) || (selector.lines() && !self.line_edges.is_empty())
    }

    /// Removes every trace of the line family.
    pub fn without_lines(&self) -> Self {
        let mut g = self.clone();
        g.line_landmarks.clear();
        g.line_edges.clear();
        g
    }

    /// Structural checks: references, id uniqueness, observation counts and
    /// that every free pose reaches a fixed pose through shared landmarks.
    pub fn validate(&self, selector: Selector) -> Result<()> {
        self.intrinsics.validate()?;
        for (id, p) in self.free_poses.iter().chain(self.fixed_poses.iter()) {
            p.validate()
                .map_err(|e| Error::InvalidGraph(format!("keyframe {id}: {e}")))?;
        }
        if let Some(id) = self.free_poses.keys().find(|k| self.fixed_poses.contains_key(k)) {
            return Err(Error::InvalidGraph(format!("keyframe {id} is both free and fixed")));
        }
        if let Some(id) = self
            .point_landmarks
            .keys()
            .find(|k| self.line_landmarks.contains_key(k))
        {
            return Err(Error::InvalidGraph(format!(
                "landmark id {id} used by a point and a line"
            )));
        }
        for (id, p) in &self.point_landmarks {
            if p.id != *id || !p.position.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidGraph(format!("point landmark {id} malformed")));
            }
        }
        for (id, l) in &self.line_landmarks {
            if l.id != *id || l.guidance_points.len() < 2 {
                return Err(Error::InvalidGraph(format!("line landmark {id} malformed")));
            }
        }

        let mut seen = BTreeSet::new();
        for o in &self.point_edges {
            let id = EdgeId {
                kind: EdgeKind::Point,
                keyframe_id: o.keyframe_id,
                landmark_id: o.landmark_id,
            };
            if self.pose(o.keyframe_id).is_none() || !self.point_landmarks.contains_key(&o.landmark_id) {
                return Err(Error::InvalidGraph(format!(
                    "{id} references a missing keyframe or landmark"
                )));
            }
            if !(o.depth > 0.0) || !o.u.is_finite() || !o.v.is_finite() {
                return Err(Error::InvalidEdge(id, format!("bad measurement (depth {})", o.depth)));
            }
            if !seen.insert(id) {
                return Err(Error::InvalidGraph(format!("duplicate edge {id}")));
            }
        }
        for o in &self.line_edges {
            let id = EdgeId {
                kind: EdgeKind::Line,
                keyframe_id: o.keyframe_id,
                landmark_id: o.landmark_id,
            };
            if self.pose(o.keyframe_id).is_none() || !self.line_landmarks.contains_key(&o.landmark_id) {
                return Err(Error::InvalidGraph(format!(
                    "{id} references a missing keyframe or landmark"
                )));
            }
            o.validate().map_err(|e| Error::InvalidEdge(id, e.to_string()))?;
            if !seen.insert(id) {
                return Err(Error::InvalidGraph(format!("duplicate edge {id}")));
            }
        }

        // landmarks need a depth edge or two views
        if selector.lines() {
            let mut views: BTreeMap<LandmarkId, usize> = BTreeMap::new();
            for o in &self.line_edges {
                *views.entry(o.landmark_id).or_default() += 1;
            }
            for id in self.line_landmarks.keys() {
                let n = views.get(id).copied().unwrap_or(0);
                if n > 0 && n < 2 {
                    return Err(Error::InvalidGraph(format!(
                        "line landmark {id} observed by {n} keyframe"
                    )));
                }
            }
        }

        if !self.has_edges(selector) {
            return Err(Error::EmptyProblem(selector.to_string()));
        }
        self.check_gauge(selector)
    }

    fn check_gauge(&self, selector: Selector) -> Result<()> {
        // bipartite keyframe/landmark adjacency over the selected families
        let mut kf_to_lm: BTreeMap<KeyframeId, Vec<(EdgeKind, LandmarkId)>> = BTreeMap::new();
        let mut lm_to_kf: BTreeMap<(EdgeKind, LandmarkId), Vec<KeyframeId>> = BTreeMap::new();
        if selector.points() {
            for o in &self.point_edges {
                kf_to_lm
                    .entry(o.keyframe_id)
                    .or_default()
                    .push((EdgeKind::Point, o.landmark_id));
                lm_to_kf
                    .entry((EdgeKind::Point, o.landmark_id))
                    .or_default()
                    .push(o.keyframe_id);
            }
        }
        if selector.lines() {
            for o in &self.line_edges {
                kf_to_lm
                    .entry(o.keyframe_id)
                    .or_default()
                    .push((EdgeKind::Line, o.landmark_id));
                lm_to_kf
                    .entry((EdgeKind::Line, o.landmark_id))
                    .or_default()
                    .push(o.keyframe_id);
            }
        }
        let isolated: Vec<String> = self
            .free_poses
            .keys()
            .filter(|k| !kf_to_lm.contains_key(k))
            .map(|k| format!("pose {k} (no edges)"))
            .collect();
        if !isolated.is_empty() {
            return Err(Error::GaugeDeficiency { variables: isolated });
        }
        let mut reached: BTreeSet<KeyframeId> = BTreeSet::new();
        let mut queue: VecDeque<KeyframeId> = self
            .fixed_poses
            .keys()
            .filter(|k| kf_to_lm.contains_key(k))
            .copied()
            .collect();
        reached.extend(queue.iter().copied());
        while let Some(kf) = queue.pop_front() {
            for lm in kf_to_lm.get(&kf).into_iter().flatten() {
                for other in &lm_to_kf[lm] {
                    if reached.insert(*other) {
                        queue.push_back(*other);
                    }
                }
            }
        }
        let floating: Vec<String> = self
            .free_poses
            .keys()
            .filter(|k| !reached.contains(k))
            .map(|k| format!("pose {k} (not connected to a fixed keyframe)"))
            .collect();
        if floating.is_empty() {
            Ok(())
        } else {
            Err(Error::GaugeDeficiency { variables: floating })
        }
    }

    /// Stacks the selected residuals, point edges first, each family sorted
    /// by keyframe then landmark id, with the matching block covariance.
    pub fn assemble_residual(&self, selector: Selector) -> Result<AssembledResidual> {
        if !self.has_edges(selector) {
            return Err(Error::EmptyProblem(selector.to_string()));
        }
        let mut parts: Vec<DVector<f64>> = Vec::new();
        let mut blocks = Vec::new();
        let mut edges = Vec::new();
        let mut dropped = Vec::new();
        if selector.points() {
            for o in self.sorted_point_edges() {
                let id = EdgeId {
                    kind: EdgeKind::Point,
                    keyframe_id: o.keyframe_id,
                    landmark_id: o.landmark_id,
                };
                let pose = self
                    .pose(o.keyframe_id)
                    .ok_or_else(|| Error::InvalidGraph(format!("{id}")))?;
                let lm = &self.point_landmarks[&o.landmark_id];
                match point_residual(pose, &self.intrinsics, lm, o) {
                    Ok(r) => {
                        parts.push(DVector::from_column_slice(r.as_slice()));
                        let c = point_observation_covariance(&self.intrinsics, o, &self.noise)?;
                        blocks.push(DMatrix::from_column_slice(3, 3, c.as_slice()));
                        edges.push(id);
                    }
                    Err(Error::BehindCamera { .. }) => dropped.push(id),
                    Err(e) => return Err(e),
                }
            }
        }
        if selector.lines() {
            let var = self.noise.sigma_line * self.noise.sigma_line;
            for o in self.sorted_line_edges() {
                let id = EdgeId {
                    kind: EdgeKind::Line,
                    keyframe_id: o.keyframe_id,
                    landmark_id: o.landmark_id,
                };
                let pose = self
                    .pose(o.keyframe_id)
                    .ok_or_else(|| Error::InvalidGraph(format!("{id}")))?;
                let line = &self.line_landmarks[&o.landmark_id];
                match guidance_residual(pose, &self.intrinsics, line, o) {
                    Ok(r) => {
                        let n = r.len();
                        parts.push(r);
                        blocks.push(DMatrix::identity(n, n) * var);
                        edges.push(id);
                    }
                    Err(Error::BehindCamera { .. }) => dropped.push(id),
                    Err(e) => return Err(e),
                }
            }
        }
        let total = parts.iter().map(|p| p.len()).sum();
        let mut residual = DVector::zeros(total);
        let mut o = 0;
        for p in parts {
            residual.rows_mut(o, p.len()).copy_from(&p);
            o += p.len();
        }
        Ok(AssembledResidual {
            residual,
            covariance: BlockDiagonal { blocks },
            edges,
            dropped,
        })
    }
}
