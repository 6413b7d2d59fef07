//! Landmarks, RGB-D and line observations, the measurement noise model and
//! the residuals built from them.

use nalgebra::{DVector, Matrix3, Matrix3x6, RowVector3, RowVector6, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{camera_point_pose_jacobian, CameraIntrinsics, Pose};

pub type KeyframeId = u64;
pub type LandmarkId = u64;

/// Minimum endpoint separation for a line observation (pixels).
pub const DEFAULT_DEGENERATE_EPS: f64 = 1e-9;
/// Collinearity tolerance for guidance points at creation (meters).
pub const DEFAULT_COLLINEARITY_TOL: f64 = 1e-9;
/// Guidance points sampled per line unless configured otherwise.
pub const DEFAULT_GUIDANCE_COUNT: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointLandmark {
    pub id: LandmarkId,
    pub position: Vector3<f64>,
}

/// A map line carried as `N >= 2` independent 3D guidance points. The first
/// and last points are the segment endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineLandmark {
    pub id: LandmarkId,
    pub guidance_points: Vec<Vector3<f64>>,
}

impl LineLandmark {
    /// Checks `N >= 2` and that every point lies within `tol` of the line
    /// through the endpoints. Collinearity is not enforced afterwards.
    pub fn new(id: LandmarkId, guidance_points: Vec<Vector3<f64>>, tol: f64) -> Result<Self> {
        if guidance_points.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "line {id} needs at least 2 guidance points, got {}",
                guidance_points.len()
            )));
        }
        let a = guidance_points[0];
        let b = guidance_points[guidance_points.len() - 1];
        let dir = b - a;
        let len = dir.norm();
        if len <= tol {
            return Err(Error::InvalidArgument(format!("line {id} has coincident endpoints")));
        }
        let dir = dir / len;
        for (s, p) in guidance_points.iter().enumerate() {
            let off = (p - a) - dir * dir.dot(&(p - a));
            if off.norm() > tol {
                return Err(Error::InvalidArgument(format!(
                    "line {id}: guidance point {s} is {:e} m off the segment",
                    off.norm()
                )));
            }
        }
        Ok(Self { id, guidance_points })
    }

    pub fn guidance_count(&self) -> usize {
        self.guidance_points.len()
    }

    pub fn endpoints(&self) -> (Vector3<f64>, Vector3<f64>) {
        (
            self.guidance_points[0],
            self.guidance_points[self.guidance_points.len() - 1],
        )
    }
}

/// RGB-D measurement of a point landmark: pixel plus depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointObservation {
    pub keyframe_id: KeyframeId,
    pub landmark_id: LandmarkId,
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl PointObservation {
    pub fn pixel(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }
}

/// Observed 2D line segment with its normalized coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineObservation {
    pub keyframe_id: KeyframeId,
    pub landmark_id: LandmarkId,
    pub start: Vector2<f64>,
    pub end: Vector2<f64>,
    pub coefficients: Vector3<f64>,
}

impl LineObservation {
    pub fn from_endpoints(
        keyframe_id: KeyframeId,
        landmark_id: LandmarkId,
        start: Vector2<f64>,
        end: Vector2<f64>,
    ) -> Result<Self> {
        let coefficients = normalize_line(&start, &end)?;
        Ok(Self {
            keyframe_id,
            landmark_id,
            start,
            end,
            coefficients,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.coefficients;
        let n = (l.x * l.x + l.y * l.y).sqrt();
        if (n - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "line coefficients not normalized: |(a,b)| = {n}"
            )));
        }
        for p in [&self.start, &self.end] {
            let d = point_line_signed_distance(l, &Vector3::new(p.x, p.y, 1.0));
            if d.abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "endpoint {p:?} is {d:e} px off its line"
                )));
            }
        }
        Ok(())
    }
}

/// Quadratic depth noise `sigma_d(d) = k0 + k1 d + k2 d^2` (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthNoise {
    pub k0: f64,
    pub k1: f64,
    pub k2: f64,
}

impl DepthNoise {
    /// `a + b (d - d0)^2` expanded into polynomial coefficients.
    pub fn centered(a: f64, b: f64, d0: f64) -> Self {
        Self {
            k0: a + b * d0 * d0,
            k1: -2.0 * b * d0,
            k2: b,
        }
    }

    pub fn sigma(&self, d: f64) -> f64 {
        self.k0 + self.k1 * d + self.k2 * d * d
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            k0: self.k0 * s,
            k1: self.k1 * s,
            k2: self.k2 * s,
        }
    }
}

/// Measurement noise assumed by the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Pixel standard deviation at pyramid level 0.
    pub sigma_p: f64,
    /// Pyramid level of the features; the pixel sigma is `sigma_p * 1.2^level`.
    #[serde(default)]
    pub pyramid_level: u32,
    pub depth: DepthNoise,
    pub sigma_line: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_p: 1.0,
            pyramid_level: 0,
            depth: DepthNoise::centered(0.0012, 0.0019, 0.4),
            sigma_line: 1.0,
        }
    }
}

impl NoiseModel {
    pub fn pixel_sigma(&self) -> f64 {
        self.sigma_p * 1.2f64.powi(self.pyramid_level as i32)
    }

    pub fn depth_sigma(&self, d: f64) -> f64 {
        self.depth.sigma(d)
    }

    /// Rejects models whose point or line covariance would be singular for
    /// depths in `[d_min, d_max]`.
    pub fn validate(&self, d_min: f64, d_max: f64) -> Result<()> {
        if !(self.pixel_sigma() > 0.0) {
            return Err(Error::InvalidNoiseModel(format!(
                "sigma_p = {} must be > 0",
                self.sigma_p
            )));
        }
        if !(self.sigma_line > 0.0) {
            return Err(Error::InvalidNoiseModel(format!(
                "sigma_line = {} must be > 0",
                self.sigma_line
            )));
        }
        // quadratic: check both ends and the vertex
        let mut probes = vec![d_min, d_max];
        if self.depth.k2 != 0.0 {
            let vertex = -self.depth.k1 / (2.0 * self.depth.k2);
            if vertex > d_min && vertex < d_max {
                probes.push(vertex);
            }
        }
        for d in probes {
            let s = self.depth_sigma(d);
            if !(s > 0.0) {
                return Err(Error::InvalidNoiseModel(format!("sigma_d({d}) = {s} must be > 0")));
            }
        }
        Ok(())
    }
}

/// Normalized coefficients `l = (a, b, c)` with `a^2 + b^2 = 1` of the line
/// through two pixels. The first of `(a, b)` that is nonzero is positive.
pub fn normalize_line(p: &Vector2<f64>, q: &Vector2<f64>) -> Result<Vector3<f64>> {
    if (p - q).norm() <= DEFAULT_DEGENERATE_EPS {
        return Err(Error::DegenerateLine(DEFAULT_DEGENERATE_EPS));
    }
    let l0 = Vector3::new(p.x, p.y, 1.0).cross(&Vector3::new(q.x, q.y, 1.0));
    normalize_coefficients(&l0)
}

/// Scales raw homogeneous line coefficients to the normalized form.
pub fn normalize_coefficients(l0: &Vector3<f64>) -> Result<Vector3<f64>> {
    let n = (l0.x * l0.x + l0.y * l0.y).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateLine(DEFAULT_DEGENERATE_EPS));
    }
    let mut l = l0 / n;
    let lead = if l.x.abs() > 1e-12 { l.x } else { l.y };
    if lead < 0.0 {
        l = -l;
    }
    Ok(l)
}

/// `l^T P` for a homogeneous pixel `P = (x, y, 1)`.
pub fn point_line_signed_distance(l: &Vector3<f64>, p: &Vector3<f64>) -> f64 {
    l.dot(p)
}

/// Sum of squared endpoint distances to the observed line.
pub fn endpoint_line_error(l: &Vector3<f64>, p: &Vector3<f64>, q: &Vector3<f64>) -> f64 {
    let dp = point_line_signed_distance(l, p);
    let dq = point_line_signed_distance(l, q);
    dp * dp + dq * dq
}

/// `n` evenly spaced pixels from `p` to `q`, both included.
pub fn sample_guidance_points(p: &Vector2<f64>, q: &Vector2<f64>, n: usize) -> Result<Vec<Vector2<f64>>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("guidance count must be >= 2, got {n}")));
    }
    if (p - q).norm() <= DEFAULT_DEGENERATE_EPS {
        return Err(Error::DegenerateLine(DEFAULT_DEGENERATE_EPS));
    }
    let denom = (n - 1) as f64;
    Ok((0..n)
        .map(|s| {
            let t = s as f64 / denom;
            p + (q - p) * t
        })
        .collect())
}

/// `[u, v, u - fx b / d]`.
pub fn rgbd_point_parameterization(k: &CameraIntrinsics, obs: &PointObservation) -> Result<Vector3<f64>> {
    if !(obs.depth > 0.0) {
        return Err(Error::InvalidDepth(obs.depth));
    }
    Ok(Vector3::new(obs.u, obs.v, obs.u - k.fx_baseline() / obs.depth))
}

/// Covariance of the `[u, v, u_r]` parameterization propagated from
/// independent pixel and depth noise.
pub fn point_observation_covariance(
    k: &CameraIntrinsics,
    obs: &PointObservation,
    noise: &NoiseModel,
) -> Result<Matrix3<f64>> {
    if !(obs.depth > 0.0) {
        return Err(Error::InvalidDepth(obs.depth));
    }
    let sp = noise.pixel_sigma();
    let sd = noise.depth_sigma(obs.depth);
    if !(sp > 0.0) {
        return Err(Error::InvalidNoiseModel(format!("pixel sigma {sp} must be > 0")));
    }
    if !(sd > 0.0) {
        return Err(Error::InvalidNoiseModel(format!(
            "sigma_d({}) = {sd} must be > 0",
            obs.depth
        )));
    }
    let g = k.fx_baseline() / (obs.depth * obs.depth);
    let j = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, g);
    let c = Matrix3::from_diagonal(&Vector3::new(sp * sp, sp * sp, sd * sd));
    Ok(j * c * j.transpose())
}

/// Predicted `[u, v, u_r]` of a camera-frame point.
pub fn predict_rgbd(k: &CameraIntrinsics, xc: &Vector3<f64>) -> Result<Vector3<f64>> {
    let uv = k.project(xc)?;
    Ok(Vector3::new(uv.x, uv.y, uv.x - k.fx_baseline() / xc.z))
}

fn predict_rgbd_jacobian(k: &CameraIntrinsics, xc: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let jp = k.projection_jacobian(xc)?;
    let iz2 = 1.0 / (xc.z * xc.z);
    let mut j = Matrix3::zeros();
    j.fixed_view_mut::<2, 3>(0, 0).copy_from(&jp);
    j[(2, 0)] = jp[(0, 0)];
    j[(2, 2)] = jp[(0, 2)] + k.fx_baseline() * iz2;
    Ok(j)
}

/// Residual of an RGB-D point edge: predicted minus observed `[u, v, u_r]`.
pub fn point_residual(
    pose: &Pose,
    k: &CameraIntrinsics,
    landmark: &PointLandmark,
    obs: &PointObservation,
) -> Result<Vector3<f64>> {
    let xc = pose.transform(&landmark.position);
    Ok(predict_rgbd(k, &xc)? - rgbd_point_parameterization(k, obs)?)
}

/// Point residual with its Jacobians with respect to the left pose
/// perturbation and the landmark position.
pub fn point_residual_jacobians(
    pose: &Pose,
    k: &CameraIntrinsics,
    position: &Vector3<f64>,
    obs: &PointObservation,
) -> Result<(Vector3<f64>, Matrix3x6<f64>, Matrix3<f64>)> {
    let xc = pose.transform(position);
    let r = predict_rgbd(k, &xc)? - rgbd_point_parameterization(k, obs)?;
    let jc = predict_rgbd_jacobian(k, &xc)?;
    Ok((r, jc * camera_point_pose_jacobian(&xc), jc * pose.rotation))
}

/// Signed distance of one projected guidance point to the observed line.
pub fn guidance_component(pose: &Pose, k: &CameraIntrinsics, point: &Vector3<f64>, l: &Vector3<f64>) -> Result<f64> {
    let uv = k.project(&pose.transform(point))?;
    Ok(point_line_signed_distance(l, &Vector3::new(uv.x, uv.y, 1.0)))
}

/// One guidance component with Jacobians (1x6 pose, 1x3 point).
pub fn guidance_component_jacobians(
    pose: &Pose,
    k: &CameraIntrinsics,
    point: &Vector3<f64>,
    l: &Vector3<f64>,
) -> Result<(f64, RowVector6<f64>, RowVector3<f64>)> {
    let xc = pose.transform(point);
    let uv = k.project(&xc)?;
    let r = l.x * uv.x + l.y * uv.y + l.z;
    let jp = k.projection_jacobian(&xc)?;
    let jc: RowVector3<f64> = RowVector3::new(l.x, l.y, 0.0).fixed_columns::<2>(0) * jp;
    Ok((r, jc * camera_point_pose_jacobian(&xc), jc * pose.rotation))
}

/// Stacked signed distances of all guidance points of `line` to the observed
/// line. If any guidance point is behind the camera the whole edge is invalid.
pub fn guidance_residual(
    pose: &Pose,
    k: &CameraIntrinsics,
    line: &LineLandmark,
    obs: &LineObservation,
) -> Result<DVector<f64>> {
    let mut r = DVector::zeros(line.guidance_count());
    for (s, p) in line.guidance_points.iter().enumerate() {
        r[s] = guidance_component(pose, k, p, &obs.coefficients)?;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k500() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 0.08).unwrap()
    }

    fn h(x: f64, y: f64) -> Vector3<f64> {
        Vector3::new(x, y, 1.0)
    }

    #[test]
    fn normalize_line_examples() {
        let l = normalize_line(&Vector2::new(0.0, 0.0), &Vector2::new(1.0, 0.0)).unwrap();
        assert_eq!(l, Vector3::new(0.0, 1.0, 0.0));
        let l = normalize_line(&Vector2::new(0.0, 0.0), &Vector2::new(0.0, 1.0)).unwrap();
        assert_eq!(l, Vector3::new(1.0, 0.0, 0.0));
        assert!(matches!(
            normalize_line(&Vector2::new(0.0, 0.0), &Vector2::new(0.0, 0.0)),
            Err(Error::DegenerateLine(_))
        ));
    }

    #[test]
    fn signed_distance_examples() {
        assert_eq!(
            point_line_signed_distance(&Vector3::new(0.0, 1.0, 0.0), &h(5.0, 3.0)),
            3.0
        );
        assert_eq!(
            point_line_signed_distance(&Vector3::new(0.0, 1.0, 0.0), &h(5.0, 0.0)),
            0.0
        );
        assert_eq!(
            point_line_signed_distance(&Vector3::new(1.0, 0.0, -2.0), &h(5.0, 7.0)),
            3.0
        );
    }

    #[test]
    fn endpoint_error_examples() {
        let l = Vector3::new(0.0, 1.0, 0.0);
        assert_eq!(endpoint_line_error(&l, &h(0.0, 2.0), &h(1.0, -1.0)), 5.0);
        assert_eq!(endpoint_line_error(&l, &h(0.0, 0.0), &h(7.0, 0.0)), 0.0);
        let e = 0.5;
        let near = endpoint_line_error(&l, &h(0.0, 1.0), &h(1.0, e));
        let far = endpoint_line_error(&l, &h(0.0, 3.0), &h(1.0, e));
        assert_eq!(near, 1.0 + e * e);
        assert_eq!(far, 9.0 + e * e);
    }

    #[test]
    fn guidance_sampling() {
        let p = Vector2::new(0.0, 0.0);
        let q = Vector2::new(2.0, 0.0);
        assert_eq!(sample_guidance_points(&p, &q, 2).unwrap(), vec![p, q]);
        assert_eq!(
            sample_guidance_points(&p, &q, 3).unwrap(),
            vec![p, Vector2::new(1.0, 0.0), q]
        );
        assert!(matches!(
            sample_guidance_points(&p, &q, 1),
            Err(Error::InvalidArgument(_))
        ));
        assert_eq!(DEFAULT_GUIDANCE_COUNT, 5);
    }

    fn obs(u: f64, v: f64, d: f64) -> PointObservation {
        PointObservation {
            keyframe_id: 0,
            landmark_id: 0,
            u,
            v,
            depth: d,
        }
    }

    #[test]
    fn rgbd_parameterization_examples() {
        let k = k500();
        assert_eq!(
            rgbd_point_parameterization(&k, &obs(320.0, 240.0, 2.0)).unwrap(),
            Vector3::new(320.0, 240.0, 300.0)
        );
        let far = rgbd_point_parameterization(&k, &obs(320.0, 240.0, 1e12)).unwrap();
        assert!((far.z - 320.0).abs() < 1e-9);
        let near = rgbd_point_parameterization(&k, &obs(320.0, 240.0, 0.04)).unwrap();
        assert!((near.z + 680.0).abs() < 1e-9);
        assert!(matches!(
            rgbd_point_parameterization(&k, &obs(1.0, 1.0, 0.0)),
            Err(Error::InvalidDepth(_))
        ));
    }

    #[test]
    fn observation_covariance_closed_form() {
        let k = k500();
        let mut noise = NoiseModel {
            sigma_p: 1.0,
            pyramid_level: 0,
            depth: DepthNoise {
                k0: 0.01,
                k1: 0.0,
                k2: 0.0,
            },
            sigma_line: 1.0,
        };
        let o = obs(300.0, 200.0, 2.0);
        let c = point_observation_covariance(&k, &o, &noise).unwrap();
        let g: f64 = 500.0 * 0.08 / 4.0;
        let expected = Matrix3::new(1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0 + g * g * 1e-4);
        assert!((c - expected).norm() < 1e-12);
        assert!((c[(2, 2)] - 1.01).abs() < 1e-12);

        noise.depth = DepthNoise {
            k0: 0.0,
            k1: 0.0,
            k2: 0.0,
        };
        assert!(matches!(
            point_observation_covariance(&k, &o, &noise),
            Err(Error::InvalidNoiseModel(_))
        ));
        assert!(noise.validate(0.4, 8.0).is_err());
    }

    #[test]
    fn default_noise_model() {
        let n = NoiseModel::default();
        assert!((n.depth_sigma(0.4) - 0.0012).abs() < 1e-15);
        assert!((n.depth_sigma(2.4) - (0.0012 + 0.0019 * 4.0)).abs() < 1e-15);
        assert_eq!(n.pixel_sigma(), 1.0);
        let n2 = NoiseModel { pyramid_level: 2, ..n };
        assert!((n2.pixel_sigma() - 1.44).abs() < 1e-15);
        n.validate(0.4, 8.0).unwrap();
    }

    #[test]
    fn point_residual_examples() {
        let k = k500();
        let o = obs(345.0, 190.0, 2.0);
        let p = k.back_project(&o.pixel(), 2.0).unwrap();
        let lm = PointLandmark { id: 0, position: p };
        let r = point_residual(&Pose::identity(), &k, &lm, &o).unwrap();
        assert!(r.norm() < 1e-12);

        let o = obs(320.0, 240.0, 2.0);
        let lm = PointLandmark {
            id: 0,
            position: Vector3::new(0.01, 0.0, 2.0),
        };
        let r = point_residual(&Pose::identity(), &k, &lm, &o).unwrap();
        assert!((r.x - 2.5).abs() < 1e-12);
        assert!(r.y.abs() < 1e-12);
        assert!((r.z - 2.5).abs() < 1e-12);
    }

    #[test]
    fn guidance_residual_examples() {
        let k = k500();
        let obs = LineObservation::from_endpoints(0, 0, Vector2::new(0.0, 0.0), Vector2::new(10.0, 0.0)).unwrap();
        let line = LineLandmark::new(0, vec![Vector3::new(1.0, 1.0, 2.0), Vector3::new(2.0, 1.0, 2.0)], 1e-9).unwrap();
        let r = guidance_residual(&Pose::identity(), &k, &line, &obs).unwrap();
        assert!((r[0] - 490.0).abs() < 1e-12);

        // points that project onto y = 240
        let obs = LineObservation::from_endpoints(0, 0, Vector2::new(0.0, 240.0), Vector2::new(600.0, 240.0)).unwrap();
        let line = LineLandmark::new(
            0,
            (0..4).map(|s| Vector3::new(-1.0 + s as f64 * 0.5, 0.0, 3.0)).collect(),
            1e-9,
        )
        .unwrap();
        let r = guidance_residual(&Pose::identity(), &k, &line, &obs).unwrap();
        assert!(r.norm() < 1e-12);
    }

    #[test]
    fn guidance_behind_camera_invalidates_edge() {
        let k = k500();
        let obs = LineObservation::from_endpoints(0, 0, Vector2::new(0.0, 0.0), Vector2::new(10.0, 0.0)).unwrap();
        let line = LineLandmark::new(
            0,
            vec![
                Vector3::new(0.0, 0.0, 2.0),
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(0.0, 0.0, -2.0),
            ],
            1e-9,
        )
        .unwrap();
        assert!(matches!(
            guidance_residual(&Pose::identity(), &k, &line, &obs),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn line_landmark_validation() {
        assert!(LineLandmark::new(1, vec![Vector3::zeros()], 1e-9).is_err());
        let bent = vec![
            Vector3::zeros(),
            Vector3::new(0.5, 0.1, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
        ];
        assert!(LineLandmark::new(1, bent, 1e-9).is_err());
    }
}
