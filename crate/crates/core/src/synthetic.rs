//! Synthetic RGB-D scenes: keyframe trajectories, point landmarks and 3D
//! line segments, with noisy observations and initial estimates.
//!
//! Randomness is split into independent ChaCha streams (geometry, point
//! noise, line noise, guidance depth, initial poses, outliers) so that runs
//! differing only in guidance count or selector see the same draws.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, Tangent};
use crate::graph::{EdgeId, EdgeKind, FactorGraph};
use crate::landmarks::{
    normalize_line, sample_guidance_points, KeyframeId, LandmarkId, LineLandmark, LineObservation, NoiseModel,
    PointLandmark, PointObservation,
};

const MAX_ATTEMPTS: usize = 1000;

const STREAM_GEOMETRY: u64 = 0;
const STREAM_POINT_NOISE: u64 = 1;
const STREAM_LINE_NOISE: u64 = 2;
const STREAM_GUIDANCE_DEPTH: u64 = 3;
const STREAM_INIT_POSES: u64 = 4;
const STREAM_OUTLIERS: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gauss<R: Rng>(rng: &mut R, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    sigma * z
}

fn gauss3<R: Rng>(rng: &mut R, sigma: f64) -> Vector3<f64> {
    Vector3::new(gauss(rng, sigma), gauss(rng, sigma), gauss(rng, sigma))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    /// Arc around the workspace, looking at its center.
    #[default]
    Orbit,
    /// Forward motion toward the workspace.
    Corridor,
    /// Perturbed steps with jittered look-at targets.
    RandomWalk,
}

impl std::str::FromStr for TrajectoryKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orbit" => Ok(Self::Orbit),
            "corridor" => Ok(Self::Corridor),
            "random-walk" => Ok(Self::RandomWalk),
            _ => Err(Error::InvalidArgument(format!("unknown trajectory '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub seed: u64,
    pub free_keyframes: usize,
    pub fixed_keyframes: usize,
    pub points: usize,
    pub lines: usize,
    pub guidance: usize,
    /// Half extents of the landmark box centered at the origin (meters).
    pub workspace: [f64; 3],
    pub trajectory: TrajectoryKind,
    /// Angle covered by an orbit (radians).
    pub orbit_arc: f64,
    pub orbit_radius: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub intrinsics: CameraIntrinsics,
    pub noise: NoiseModel,
    /// Multiplier on the depth sigma used to initialize guidance points.
    pub line_depth_noise_scale: f64,
    pub outlier_fraction: f64,
    pub min_observations: usize,
    pub depth_range: [f64; 2],
    /// Minimum projected segment length for a line to count as seen (pixels).
    pub min_line_pixels: f64,
    pub init_translation_sigma: f64,
    pub init_rotation_sigma: f64,
    /// Emit exact measurements; the estimator's noise model is unchanged.
    pub noise_free: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            free_keyframes: 4,
            fixed_keyframes: 2,
            points: 60,
            lines: 15,
            guidance: crate::landmarks::DEFAULT_GUIDANCE_COUNT,
            workspace: [1.5, 1.5, 1.5],
            trajectory: TrajectoryKind::Orbit,
            orbit_arc: 60f64.to_radians(),
            orbit_radius: 4.0,
            image_width: 640,
            image_height: 480,
            intrinsics: CameraIntrinsics {
                fx: 517.0,
                fy: 517.0,
                cx: 318.6,
                cy: 255.3,
                baseline: 0.08,
                z_min: crate::geometry::DEFAULT_Z_MIN,
            },
            noise: NoiseModel::default(),
            line_depth_noise_scale: 1.0,
            outlier_fraction: 0.0,
            min_observations: 3,
            depth_range: [0.4, 8.0],
            min_line_pixels: 20.0,
            init_translation_sigma: 0.02,
            init_rotation_sigma: 0.01,
            noise_free: false,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.free_keyframes < 1 {
            return bad("need at least one free keyframe".into());
        }
        if self.fixed_keyframes < 1 {
            return bad("need at least one fixed keyframe".into());
        }
        if self.guidance < 2 {
            return bad(format!("guidance count must be >= 2, got {}", self.guidance));
        }
        if self.points + self.lines < 1 {
            return bad("need at least one landmark".into());
        }
        if !(0.0..=0.5).contains(&self.outlier_fraction) {
            return bad(format!("outlier fraction {} outside [0, 0.5]", self.outlier_fraction));
        }
        if self.min_observations < 2 {
            return bad("min observations must be >= 2".into());
        }
        if self.min_observations > self.free_keyframes + self.fixed_keyframes {
            return bad(format!(
                "min observations {} exceeds the {} keyframes",
                self.min_observations,
                self.free_keyframes + self.fixed_keyframes
            ));
        }
        if !(self.depth_range[0] > 0.0 && self.depth_range[1] > self.depth_range[0]) {
            return bad(format!("bad depth range {:?}", self.depth_range));
        }
        if self.workspace.iter().any(|w| !(*w > 0.0)) {
            return bad(format!("bad workspace {:?}", self.workspace));
        }
        if !(self.line_depth_noise_scale >= 0.0)
            || !(self.init_translation_sigma >= 0.0)
            || !(self.init_rotation_sigma >= 0.0)
        {
            return bad("noise scales must be >= 0".into());
        }
        self.intrinsics.validate()?;
        self.noise.validate(self.depth_range[0], self.depth_range[1])
    }

    pub fn keyframe_count(&self) -> usize {
        self.free_keyframes + self.fixed_keyframes
    }

    /// Keyframe ids in time order: fixed keyframes are the oldest.
    pub fn keyframes_in_time_order(&self) -> Vec<KeyframeId> {
        let m = self.free_keyframes as u64;
        let d = self.fixed_keyframes as u64;
        (m..m + d).chain(0..m).collect()
    }

    fn in_image(&self, uv: &Vector2<f64>) -> bool {
        uv.x >= 0.0 && uv.y >= 0.0 && uv.x <= self.image_width as f64 - 1.0 && uv.y <= self.image_height as f64 - 1.0
    }

    fn sees(&self, pose: &Pose, x: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
        let xc = pose.transform(x);
        if xc.z < self.depth_range[0] || xc.z > self.depth_range[1] {
            return None;
        }
        let uv = self.intrinsics.project(&xc).ok()?;
        self.in_image(&uv).then_some((uv, xc.z))
    }
}

/// A 3D segment of the true scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueLine {
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
    /// Keyframe whose observation seeds the guidance points.
    pub anchor: KeyframeId,
    pub guidance_points: Vec<Vector3<f64>>,
}

/// Noise-free scene geometry shared by every noise realization.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub poses: BTreeMap<KeyframeId, Pose>,
    pub points: BTreeMap<LandmarkId, Vector3<f64>>,
    pub point_views: BTreeMap<LandmarkId, Vec<KeyframeId>>,
    pub lines: BTreeMap<LandmarkId, TrueLine>,
    pub line_views: BTreeMap<LandmarkId, Vec<KeyframeId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub poses: BTreeMap<KeyframeId, Pose>,
    pub points: BTreeMap<LandmarkId, Vector3<f64>>,
    pub lines: BTreeMap<LandmarkId, TrueLine>,
    /// Noise-free measurements, one per edge.
    pub point_measurements: Vec<PointObservation>,
    pub line_measurements: Vec<LineObservation>,
    #[serde(default)]
    pub outliers: Vec<EdgeId>,
}

/// Camera looking from `center` at `target` with world `+z` up.
pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>) -> Result<Pose> {
    let z = (target - center).normalize();
    let up = Vector3::z();
    let down = -up + z * z.dot(&up);
    if down.norm() < 1e-9 {
        return Err(Error::InvalidArgument("look direction parallel to up".into()));
    }
    let y = down.normalize();
    let x = y.cross(&z);
    let r = nalgebra::Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Pose::new(r, -r * center)
}

fn trajectory(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Pose>> {
    let n = config.keyframe_count();
    let origin = Vector3::zeros();
    let r = config.orbit_radius;
    let frac = |i: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
    (0..n)
        .map(|i| match config.trajectory {
            TrajectoryKind::Orbit => {
                let a = -std::f64::consts::FRAC_PI_2 + config.orbit_arc * (frac(i) - 0.5);
                let c = Vector3::new(r * a.cos(), r * a.sin(), 0.3 * (2.0 * frac(i) - 1.0));
                look_at(&c, &origin)
            }
            TrajectoryKind::Corridor => {
                let c = Vector3::new(0.2 * (frac(i) - 0.5), -r - 1.0 + 1.5 * frac(i), 0.1);
                look_at(&c, &Vector3::new(0.0, 0.0, 0.0))
            }
            TrajectoryKind::RandomWalk => {
                let a = -std::f64::consts::FRAC_PI_2 + config.orbit_arc * (frac(i) - 0.5);
                let c = Vector3::new(r * a.cos(), r * a.sin(), 0.0) + gauss3(rng, 0.2);
                look_at(&c, &gauss3(rng, 0.3))
            }
        })
        .collect()
}

fn uniform_in_box<R: Rng>(rng: &mut R, half: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(-half[0]..=half[0]),
        rng.random_range(-half[1]..=half[1]),
        rng.random_range(-half[2]..=half[2]),
    )
}

fn line_direction<R: Rng>(rng: &mut R) -> Vector3<f64> {
    if rng.random::<f64>() < 0.8 {
        let axis = rng.random_range(0..3usize);
        let mut d = Vector3::zeros();
        d[axis] = 1.0;
        (d + gauss3(rng, 0.05)).normalize()
    } else {
        loop {
            let d = gauss3(rng, 1.0);
            if d.norm() > 1e-6 {
                return d.normalize();
            }
        }
    }
}

/// Point on segment `a`-`b` (camera frame) whose projection is the pixel at
/// fraction `t` between the projections of `a` and `b`.
fn perspective_point(a: &Vector3<f64>, b: &Vector3<f64>, t: f64) -> Vector3<f64> {
    let mu = t * a.z / (b.z - t * (b.z - a.z));
    a + (b - a) * mu
}

/// Samples the noise-free geometry.
pub fn build_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = stream(config.seed, STREAM_GEOMETRY);
    let order = config.keyframes_in_time_order();
    let poses: BTreeMap<KeyframeId, Pose> = order.iter().copied().zip(trajectory(config, &mut rng)?).collect();
    let free: Vec<KeyframeId> = (0..config.free_keyframes as u64).collect();
    let observers =
        |views: &[KeyframeId]| views.len() >= config.min_observations && views.iter().any(|k| free.contains(k));

    let mut points = BTreeMap::new();
    let mut point_views = BTreeMap::new();
    for id in 0..config.points as u64 {
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let x = uniform_in_box(&mut rng, &config.workspace);
            let views: Vec<KeyframeId> = order
                .iter()
                .copied()
                .filter(|k| config.sees(&poses[k], &x).is_some())
                .collect();
            if observers(&views) {
                found = Some((x, views));
                break;
            }
        }
        let (x, views) = found.ok_or_else(|| {
            Error::GenerationFailure(format!(
                "point {id}: no position seen by {} keyframes in {MAX_ATTEMPTS} attempts",
                config.min_observations
            ))
        })?;
        points.insert(id, x);
        point_views.insert(id, views);
    }

    let mut lines = BTreeMap::new();
    let mut line_views = BTreeMap::new();
    for j in 0..config.lines as u64 {
        let id = config.points as u64 + j;
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let mid = uniform_in_box(&mut rng, &config.workspace);
            let len = rng.random_range(0.3..=2.0);
            let dir = line_direction(&mut rng);
            let (a, b) = (mid - dir * (0.5 * len), mid + dir * (0.5 * len));
            let views: Vec<KeyframeId> = order
                .iter()
                .copied()
                .filter(|k| match (config.sees(&poses[k], &a), config.sees(&poses[k], &b)) {
                    (Some((pa, _)), Some((pb, _))) => (pa - pb).norm() >= config.min_line_pixels,
                    _ => false,
                })
                .collect();
            if observers(&views) {
                found = Some((a, b, views));
                break;
            }
        }
        let (a, b, views) = found.ok_or_else(|| {
            Error::GenerationFailure(format!(
                "line {id}: no segment seen by {} keyframes in {MAX_ATTEMPTS} attempts",
                config.min_observations
            ))
        })?;
        let anchor = views[0];
        let pa = &poses[&anchor];
        let (ca, cb) = (pa.transform(&a), pa.transform(&b));
        let inv = pa.inverse();
        let guidance_points = (0..config.guidance)
            .map(|s| inv.transform(&perspective_point(&ca, &cb, s as f64 / (config.guidance - 1) as f64)))
            .collect();
        lines.insert(
            id,
            TrueLine {
                start: a,
                end: b,
                anchor,
                guidance_points,
            },
        );
        line_views.insert(id, views);
    }

    let scene = Scene {
        config: config.clone(),
        poses,
        points,
        point_views,
        lines,
        line_views,
    };
    scene.check_coverage()?;
    Ok(scene)
}

impl Scene {
    fn check_coverage(&self) -> Result<()> {
        let mut seen: BTreeMap<KeyframeId, usize> = BTreeMap::new();
        let mut shared = false;
        for views in self.point_views.values().chain(self.line_views.values()) {
            for k in views {
                *seen.entry(*k).or_default() += 1;
            }
            let free = views.iter().any(|k| *k < self.config.free_keyframes as u64);
            let fixed = views.iter().any(|k| *k >= self.config.free_keyframes as u64);
            shared |= free && fixed;
        }
        for k in self.poses.keys() {
            if *k < self.config.free_keyframes as u64 && !seen.contains_key(k) {
                return Err(Error::GenerationFailure(format!("free keyframe {k} observes nothing")));
            }
        }
        if !shared {
            return Err(Error::GenerationFailure(
                "fixed keyframes share no landmark with free keyframes".into(),
            ));
        }
        Ok(())
    }

    /// Noisy observations and initial estimates for noise seed `seed`.
    pub fn observe(&self, seed: u64) -> Result<(FactorGraph, GroundTruth)> {
        let c = &self.config;
        let k = &c.intrinsics;
        let noise = &c.noise;
        let m = c.free_keyframes as u64;
        let mut graph = FactorGraph::new(*k, *noise);

        let mut init_rng = stream(seed, STREAM_INIT_POSES);
        for (id, pose) in &self.poses {
            if *id < m {
                let delta = Tangent::new(
                    gauss3(&mut init_rng, c.init_translation_sigma),
                    gauss3(&mut init_rng, c.init_rotation_sigma),
                );
                graph.free_poses.insert(*id, pose.retract_left(&delta));
            } else {
                graph.fixed_poses.insert(*id, *pose);
            }
        }
        let init = graph.all_poses();

        let mut rng = stream(seed, STREAM_POINT_NOISE);
        let scale = if c.noise_free { 0.0 } else { 1.0 };
        let sigma_p = noise.pixel_sigma() * scale;
        let mut point_truth = Vec::new();
        for (id, x) in &self.points {
            let mut first = None;
            for kf in &self.point_views[id] {
                let xc = self.poses[kf].transform(x);
                let uv = k.project(&xc)?;
                point_truth.push(PointObservation {
                    keyframe_id: *kf,
                    landmark_id: *id,
                    u: uv.x,
                    v: uv.y,
                    depth: xc.z,
                });
                let sd = noise.depth_sigma(xc.z) * scale;
                let depth = positive_draw(&mut rng, xc.z, sd);
                let obs = PointObservation {
                    keyframe_id: *kf,
                    landmark_id: *id,
                    u: uv.x + gauss(&mut rng, sigma_p),
                    v: uv.y + gauss(&mut rng, sigma_p),
                    depth,
                };
                if first.is_none() {
                    first = Some(obs.clone());
                }
                graph.point_edges.push(obs);
            }
            let o = first.expect("point has views");
            let xc = k.back_project(&o.pixel(), o.depth)?;
            graph.point_landmarks.insert(
                *id,
                PointLandmark {
                    id: *id,
                    position: init[&o.keyframe_id].inverse().transform(&xc),
                },
            );
        }

        let mut line_rng = stream(seed, STREAM_LINE_NOISE);
        let mut depth_rng = stream(seed, STREAM_GUIDANCE_DEPTH);
        let mut line_truth = Vec::new();
        let sigma_line = noise.sigma_line * scale;
        for (id, line) in &self.lines {
            let mut anchor_obs = None;
            for kf in &self.line_views[id] {
                let p = &self.poses[kf];
                let a = k.project(&p.transform(&line.start))?;
                let b = k.project(&p.transform(&line.end))?;
                line_truth.push(LineObservation::from_endpoints(*kf, *id, a, b)?);
                let na = a + Vector2::new(gauss(&mut line_rng, sigma_line), gauss(&mut line_rng, sigma_line));
                let nb = b + Vector2::new(gauss(&mut line_rng, sigma_line), gauss(&mut line_rng, sigma_line));
                let obs = LineObservation::from_endpoints(*kf, *id, na, nb)?;
                if *kf == line.anchor {
                    anchor_obs = Some(obs.clone());
                }
                graph.line_edges.push(obs);
            }
            let o = anchor_obs.expect("anchor observes its line");
            let pa = &self.poses[&line.anchor];
            let samples = sample_guidance_points(&o.start, &o.end, line.guidance_points.len())?;
            let inv = init[&line.anchor].inverse();
            let mut guidance_points = Vec::with_capacity(samples.len());
            for (uv, g) in samples.iter().zip(&line.guidance_points) {
                let z = pa.transform(g).z;
                let sd = noise.depth_sigma(z) * c.line_depth_noise_scale * scale;
                let depth = positive_draw(&mut depth_rng, z, sd);
                guidance_points.push(inv.transform(&k.back_project(uv, depth)?));
            }
            graph.line_landmarks.insert(
                *id,
                LineLandmark {
                    id: *id,
                    guidance_points,
                },
            );
        }

        let mut truth = GroundTruth {
            poses: self.poses.clone(),
            points: self.points.clone(),
            lines: self.lines.clone(),
            point_measurements: point_truth,
            line_measurements: line_truth,
            outliers: Vec::new(),
        };
        if c.outlier_fraction > 0.0 {
            truth.outliers = inject_outliers(&mut graph, c, c.outlier_fraction, seed)?;
        }
        Ok((graph, truth))
    }
}

impl GroundTruth {
    /// Graph at the true state carrying the noise-free measurements.
    pub fn to_graph(&self, config: &SceneConfig) -> Result<FactorGraph> {
        let mut g = FactorGraph::new(config.intrinsics, config.noise);
        for (id, p) in &self.poses {
            if *id < config.free_keyframes as u64 {
                g.free_poses.insert(*id, *p);
            } else {
                g.fixed_poses.insert(*id, *p);
            }
        }
        for (id, x) in &self.points {
            g.point_landmarks.insert(*id, PointLandmark { id: *id, position: *x });
        }
        for (id, l) in &self.lines {
            g.line_landmarks.insert(
                *id,
                LineLandmark::new(
                    *id,
                    l.guidance_points.clone(),
                    1e-9 * (1.0 + l.start.norm() + l.end.norm()),
                )?,
            );
        }
        g.point_edges = self.point_measurements.clone();
        g.line_edges = self.line_measurements.clone();
        Ok(g)
    }
}

fn positive_draw<R: Rng>(rng: &mut R, mean: f64, sigma: f64) -> f64 {
    loop {
        let d = mean + gauss(rng, sigma);
        if d > 0.0 {
            return d;
        }
    }
}

/// Generates a scene and one noise realization from `config.seed`.
pub fn generate(config: &SceneConfig) -> Result<(FactorGraph, GroundTruth)> {
    build_scene(config)?.observe(config.seed)
}

/// Replaces `round(fraction * edges)` edges with gross errors: point pixels
/// drawn uniformly over the image, line coefficients from a random segment.
/// Returns the corrupted edge ids in canonical order.
pub fn inject_outliers(graph: &mut FactorGraph, config: &SceneConfig, fraction: f64, seed: u64) -> Result<Vec<EdgeId>> {
    if !(0.0..=0.5).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "outlier fraction {fraction} outside [0, 0.5]"
        )));
    }
    let ids: Vec<EdgeId> = graph
        .sorted_point_edges()
        .iter()
        .map(|o| EdgeId {
            kind: EdgeKind::Point,
            keyframe_id: o.keyframe_id,
            landmark_id: o.landmark_id,
        })
        .chain(graph.sorted_line_edges().iter().map(|o| EdgeId {
            kind: EdgeKind::Line,
            keyframe_id: o.keyframe_id,
            landmark_id: o.landmark_id,
        }))
        .collect();
    let count = (fraction * ids.len() as f64).round() as usize;
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut rng = stream(seed, STREAM_OUTLIERS);
    let chosen = rand::seq::index::sample(&mut rng, ids.len(), count).into_vec();
    let mut chosen_ids: Vec<EdgeId> = chosen.iter().map(|i| ids[*i]).collect();
    chosen_ids.sort();
    let (w, h) = (config.image_width as f64 - 1.0, config.image_height as f64 - 1.0);
    for id in &chosen_ids {
        match id.kind {
            EdgeKind::Point => {
                let o = graph
                    .point_edges
                    .iter_mut()
                    .find(|o| o.keyframe_id == id.keyframe_id && o.landmark_id == id.landmark_id)
                    .expect("edge exists");
                o.u = rng.random_range(0.0..=w);
                o.v = rng.random_range(0.0..=h);
            }
            EdgeKind::Line => {
                let o = graph
                    .line_edges
                    .iter_mut()
                    .find(|o| o.keyframe_id == id.keyframe_id && o.landmark_id == id.landmark_id)
                    .expect("edge exists");
                loop {
                    let a = Vector2::new(rng.random_range(0.0..=w), rng.random_range(0.0..=h));
                    let b = Vector2::new(rng.random_range(0.0..=w), rng.random_range(0.0..=h));
                    if (a - b).norm() >= config.min_line_pixels {
                        o.start = a;
                        o.end = b;
                        o.coefficients = normalize_line(&a, &b)?;
                        break;
                    }
                }
            }
        }
    }
    Ok(chosen_ids)
}
