//! Linearization of the selected edges into block normal equations and the
//! Schur-complement elimination of landmark blocks.
//!
//! The full system is
//!
//! ```text
//! [ H_A   H_B ] [dp]     [g_p]
//! [ H_B^T H_C ] [dl] = - [g_l]
//! ```
//!
//! where `H_C` is block diagonal in 3x3 landmark blocks. Eliminating `dl`
//! leaves `(H_A - H_B H_C^-1 H_B^T) dp = -(g_p - H_B H_C^-1 g_l)`.

use std::collections::BTreeMap;

use nalgebra::{
    Cholesky, DMatrix, DVector, Matrix3, Matrix3x6, Matrix6x3, RowVector3, RowVector6, SymmetricEigen, Vector3,
};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{EdgeId, EdgeKind, FactorGraph, Selector};
use crate::landmarks::{
    guidance_component_jacobians, point_observation_covariance, point_residual_jacobians, KeyframeId, LandmarkId,
};
use crate::robust::Losses;

pub const POSE_DIM: usize = 6;

/// One 3D landmark variable of the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LandmarkSlot {
    Point(LandmarkId),
    Guidance { line: LandmarkId, index: usize },
}

impl std::fmt::Display for LandmarkSlot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LandmarkSlot::Point(id) => write!(f, "point landmark {id}"),
            LandmarkSlot::Guidance { line, index } => write!(f, "guidance point {index} of line {line}"),
        }
    }
}

/// Variable ordering: free poses by keyframe id, then point landmarks by id,
/// then guidance points by (line id, index). Only landmarks touched by a
/// selected edge enter the state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLayout {
    pub poses: Vec<KeyframeId>,
    pub landmarks: Vec<LandmarkSlot>,
    pose_index: BTreeMap<KeyframeId, usize>,
    landmark_index: BTreeMap<LandmarkSlot, usize>,
}

impl StateLayout {
    pub fn new(graph: &FactorGraph, selector: Selector) -> Self {
        let poses: Vec<KeyframeId> = graph.free_poses.keys().copied().collect();
        let mut slots = std::collections::BTreeSet::new();
        if selector.points() {
            for o in &graph.point_edges {
                slots.insert(LandmarkSlot::Point(o.landmark_id));
            }
        }
        if selector.lines() {
            for o in &graph.line_edges {
                if let Some(l) = graph.line_landmarks.get(&o.landmark_id) {
                    for index in 0..l.guidance_count() {
                        slots.insert(LandmarkSlot::Guidance {
                            line: o.landmark_id,
                            index,
                        });
                    }
                }
            }
        }
        let landmarks: Vec<LandmarkSlot> = slots.into_iter().collect();
        let pose_index = poses.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let landmark_index = landmarks.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        Self {
            poses,
            landmarks,
            pose_index,
            landmark_index,
        }
    }

    pub fn pose_dim(&self) -> usize {
        POSE_DIM * self.poses.len()
    }

    pub fn state_dim(&self) -> usize {
        self.pose_dim() + 3 * self.landmarks.len()
    }

    pub fn pose_slot(&self, kf: KeyframeId) -> Option<usize> {
        self.pose_index.get(&kf).copied()
    }

    pub fn landmark_slot(&self, slot: &LandmarkSlot) -> Option<usize> {
        self.landmark_index.get(slot).copied()
    }

    /// Human-readable name of pose-block coordinate `i`.
    pub fn pose_coordinate_name(&self, i: usize) -> String {
        const AXES: [&str; 6] = ["tx", "ty", "tz", "rx", "ry", "rz"];
        format!("pose {} {}", self.poses[i / POSE_DIM], AXES[i % POSE_DIM])
    }
}

/// Whitened rows of one edge that touch a single landmark. Point edges give
/// one group of three rows; line edges give one single-row group per
/// guidance point. Unused rows are zero.
#[derive(Debug, Clone)]
pub struct RowGroup {
    pub rows: usize,
    pub residual: Vector3<f64>,
    pub pose_jacobian: Matrix3x6<f64>,
    pub landmark_jacobian: Matrix3<f64>,
    pub landmark: usize,
}

#[derive(Debug, Clone)]
pub struct EdgeLinearization {
    pub id: EdgeId,
    pub pose: Option<usize>,
    pub groups: Vec<RowGroup>,
    /// Unweighted `r^T Sigma^-1 r`.
    pub chi2: f64,
    pub dim: usize,
}

fn whiten3(cov: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let chol = Cholesky::new(*cov)
        .ok_or_else(|| Error::InvalidNoiseModel("observation covariance not positive definite".into()))?;
    let l = chol.l();
    l.try_inverse()
        .ok_or_else(|| Error::InvalidNoiseModel("observation covariance not invertible".into()))
}

/// Residual and whitened Jacobians of every selected edge, in canonical
/// order. Edges with a landmark behind the camera come back as `Err` in the
/// second list.
pub fn linearize_edges(
    graph: &FactorGraph,
    layout: &StateLayout,
    selector: Selector,
) -> Result<(Vec<EdgeLinearization>, Vec<EdgeId>)> {
    let k = &graph.intrinsics;
    let mut out: Vec<Result<EdgeLinearization>> = Vec::new();
    if selector.points() {
        let edges = graph.sorted_point_edges();
        let lin: Vec<Result<EdgeLinearization>> = edges
            .par_iter()
            .map(|o| {
                let id = EdgeId {
                    kind: EdgeKind::Point,
                    keyframe_id: o.keyframe_id,
                    landmark_id: o.landmark_id,
                };
                let pose = graph
                    .pose(o.keyframe_id)
                    .ok_or_else(|| Error::InvalidGraph(format!("{id}")))?;
                let lm = graph
                    .point_landmarks
                    .get(&o.landmark_id)
                    .ok_or_else(|| Error::InvalidGraph(format!("{id}")))?;
                let (r, jp, jl) = point_residual_jacobians(pose, k, &lm.position, o)?;
                let cov = point_observation_covariance(k, o, &graph.noise)?;
                let w = whiten3(&cov)?;
                let rw = w * r;
                let landmark = layout
                    .landmark_slot(&LandmarkSlot::Point(o.landmark_id))
                    .expect("layout covers selected edges");
                Ok(EdgeLinearization {
                    id,
                    pose: layout.pose_slot(o.keyframe_id),
                    chi2: rw.norm_squared(),
                    dim: 3,
                    groups: vec![RowGroup {
                        rows: 3,
                        residual: rw,
                        pose_jacobian: w * jp,
                        landmark_jacobian: w * jl,
                        landmark,
                    }],
                })
            })
            .collect();
        out.extend(lin);
    }
    if selector.lines() {
        let inv_sigma = 1.0 / graph.noise.sigma_line;
        if !inv_sigma.is_finite() || !(graph.noise.sigma_line > 0.0) {
            return Err(Error::InvalidNoiseModel(format!(
                "sigma_line = {} must be > 0",
                graph.noise.sigma_line
            )));
        }
        let edges = graph.sorted_line_edges();
        let lin: Vec<Result<EdgeLinearization>> = edges
            .par_iter()
            .map(|o| {
                let id = EdgeId {
                    kind: EdgeKind::Line,
                    keyframe_id: o.keyframe_id,
                    landmark_id: o.landmark_id,
                };
                let pose = graph
                    .pose(o.keyframe_id)
                    .ok_or_else(|| Error::InvalidGraph(format!("{id}")))?;
                let line = graph
                    .line_landmarks
                    .get(&o.landmark_id)
                    .ok_or_else(|| Error::InvalidGraph(format!("{id}")))?;
                let mut groups = Vec::with_capacity(line.guidance_count());
                let mut chi2 = 0.0;
                for (s, p) in line.guidance_points.iter().enumerate() {
                    let (r, jp, jl) = guidance_component_jacobians(pose, k, p, &o.coefficients)?;
                    let mut g = RowGroup {
                        rows: 1,
                        residual: Vector3::zeros(),
                        pose_jacobian: Matrix3x6::zeros(),
                        landmark_jacobian: Matrix3::zeros(),
                        landmark: layout
                            .landmark_slot(&LandmarkSlot::Guidance {
                                line: o.landmark_id,
                                index: s,
                            })
                            .expect("layout covers selected edges"),
                    };
                    g.residual[0] = r * inv_sigma;
                    g.pose_jacobian.row_mut(0).copy_from(&(jp * inv_sigma));
                    g.landmark_jacobian.row_mut(0).copy_from(&(jl * inv_sigma));
                    chi2 += g.residual[0] * g.residual[0];
                    groups.push(g);
                }
                Ok(EdgeLinearization {
                    id,
                    pose: layout.pose_slot(o.keyframe_id),
                    chi2,
                    dim: line.guidance_count(),
                    groups,
                })
            })
            .collect();
        out.extend(lin);
    }
    let mut valid = Vec::with_capacity(out.len());
    let mut dropped = Vec::new();
    for (i, r) in out.into_iter().enumerate() {
        match r {
            Ok(e) => valid.push(e),
            Err(Error::BehindCamera { .. }) => dropped.push(edge_id_at(graph, selector, i)),
            Err(e) => return Err(e),
        }
    }
    Ok((valid, dropped))
}

fn edge_id_at(graph: &FactorGraph, selector: Selector, i: usize) -> EdgeId {
    let np = if selector.points() { graph.point_edges.len() } else { 0 };
    if i < np {
        let o = graph.sorted_point_edges()[i];
        EdgeId {
            kind: EdgeKind::Point,
            keyframe_id: o.keyframe_id,
            landmark_id: o.landmark_id,
        }
    } else {
        let o = graph.sorted_line_edges()[i - np];
        EdgeId {
            kind: EdgeKind::Line,
            keyframe_id: o.keyframe_id,
            landmark_id: o.landmark_id,
        }
    }
}

/// Information of one landmark and its coupling to the free poses.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkBlock {
    pub hessian: Matrix3<f64>,
    pub gradient: Vector3<f64>,
    /// `H_B` blocks keyed by pose slot.
    pub coupling: BTreeMap<usize, Matrix6x3<f64>>,
}

impl LandmarkBlock {
    fn zero() -> Self {
        Self {
            hessian: Matrix3::zeros(),
            gradient: Vector3::zeros(),
            coupling: BTreeMap::new(),
        }
    }
}

/// Block normal equations `J^T W J`, `J^T W r` with `W` the (robust-weighted)
/// inverse observation covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub pose_hessian: DMatrix<f64>,
    pub pose_gradient: DVector<f64>,
    pub landmarks: Vec<LandmarkBlock>,
}

impl NormalEquations {
    pub fn num_poses(&self) -> usize {
        self.pose_gradient.len() / POSE_DIM
    }

    /// Accumulates the edges in the given order with per-edge weights.
    pub fn accumulate(layout: &StateLayout, edges: &[EdgeLinearization], weights: &[f64]) -> Self {
        let n = layout.pose_dim();
        let mut ne = Self {
            pose_hessian: DMatrix::zeros(n, n),
            pose_gradient: DVector::zeros(n),
            landmarks: vec![LandmarkBlock::zero(); layout.landmarks.len()],
        };
        for (e, &w) in edges.iter().zip(weights) {
            for g in &e.groups {
                let lb = &mut ne.landmarks[g.landmark];
                let jl = g.landmark_jacobian;
                lb.hessian += w * jl.transpose() * jl;
                lb.gradient += w * jl.transpose() * g.residual;
                if let Some(p) = e.pose {
                    let jp = g.pose_jacobian;
                    let o = POSE_DIM * p;
                    let mut hpp = ne.pose_hessian.fixed_view_mut::<6, 6>(o, o);
                    hpp += w * jp.transpose() * jp;
                    let mut gp = ne.pose_gradient.fixed_rows_mut::<6>(o);
                    gp += w * jp.transpose() * g.residual;
                    *lb.coupling.entry(p).or_insert_with(Matrix6x3::zeros) += w * jp.transpose() * jl;
                }
            }
        }
        ne
    }

    pub fn gradient_inf_norm(&self) -> f64 {
        let gp = self.pose_gradient.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        self.landmarks
            .iter()
            .flat_map(|l| l.gradient.iter())
            .fold(gp, |m, v| m.max(v.abs()))
    }

    /// Dense `(H, g)` over the full state.
    pub fn to_dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let np = self.pose_gradient.len();
        let n = np + 3 * self.landmarks.len();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        h.view_mut((0, 0), (np, np)).copy_from(&self.pose_hessian);
        g.rows_mut(0, np).copy_from(&self.pose_gradient);
        for (i, lb) in self.landmarks.iter().enumerate() {
            let o = np + 3 * i;
            h.fixed_view_mut::<3, 3>(o, o).copy_from(&lb.hessian);
            g.fixed_rows_mut::<3>(o).copy_from(&lb.gradient);
            for (p, c) in &lb.coupling {
                h.fixed_view_mut::<6, 3>(POSE_DIM * p, o).copy_from(c);
                h.fixed_view_mut::<3, 6>(o, POSE_DIM * p).copy_from(&c.transpose());
            }
        }
        (h, g)
    }

    /// Eliminates the landmark blocks. `damping` adds `damping * diag(H)` to
    /// every diagonal block before elimination.
    pub fn reduce(
        &self,
        damping: f64,
        inversion: LandmarkInversion,
        labels: &dyn Fn(usize) -> String,
    ) -> Result<ReducedSystem> {
        let n = self.pose_gradient.len();
        let mut matrix = self.pose_hessian.clone();
        if damping > 0.0 {
            for i in 0..n {
                matrix[(i, i)] += damping * self.pose_hessian[(i, i)].max(f64::MIN_POSITIVE);
            }
        }
        let mut rhs = -self.pose_gradient.clone();
        let mut context = Vec::with_capacity(self.landmarks.len());
        for (i, lb) in self.landmarks.iter().enumerate() {
            let mut hc = lb.hessian;
            if damping > 0.0 {
                for d in 0..3 {
                    hc[(d, d)] += damping * lb.hessian[(d, d)].max(f64::MIN_POSITIVE);
                }
            }
            let hinv = invert_landmark_block(&hc, inversion).map_err(|_| Error::SingularLandmark(labels(i)))?;
            let coupling: Vec<(usize, Matrix6x3<f64>)> = lb.coupling.iter().map(|(p, c)| (*p, *c)).collect();
            // rhs += H_B H_C^-1 g_l
            let hinv_g = hinv * lb.gradient;
            for (p, c) in &coupling {
                let mut r = rhs.fixed_rows_mut::<6>(POSE_DIM * p);
                r += c * hinv_g;
            }
            // matrix -= H_B H_C^-1 H_B^T
            for (pa, ca) in &coupling {
                let left = ca * hinv;
                for (pb, cb) in &coupling {
                    let mut blk = matrix.fixed_view_mut::<6, 6>(POSE_DIM * pa, POSE_DIM * pb);
                    blk -= left * cb.transpose();
                }
            }
            context.push(BackSubstitution {
                hessian_inverse: hinv,
                gradient: lb.gradient,
                coupling,
            });
        }
        Ok(ReducedSystem { matrix, rhs, context })
    }
}

/// How singular or ill-conditioned 3x3 landmark blocks are inverted.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LandmarkInversion {
    /// Eigen-decomposition; eigenvalues below `rel_tol * max` are treated as
    /// unobservable and dropped (Moore-Penrose inverse).
    PseudoInverse { rel_tol: f64 },
    /// Adds `1e-12 I` when the condition number exceeds `1e12`.
    Regularized,
    /// Plain inverse; singular blocks are an error.
    Strict,
}

impl Default for LandmarkInversion {
    fn default() -> Self {
        LandmarkInversion::PseudoInverse { rel_tol: 1e-10 }
    }
}

pub fn invert_landmark_block(h: &Matrix3<f64>, inversion: LandmarkInversion) -> Result<Matrix3<f64>> {
    let sym = 0.5 * (h + h.transpose());
    match inversion {
        LandmarkInversion::PseudoInverse { rel_tol } => {
            let eig = SymmetricEigen::new(sym);
            let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
            let mut inv = Matrix3::zeros();
            if max <= 0.0 {
                return Ok(inv);
            }
            for i in 0..3 {
                let l = eig.eigenvalues[i];
                if l > rel_tol * max {
                    let v = eig.eigenvectors.column(i);
                    inv += v * v.transpose() / l;
                }
            }
            Ok(inv)
        }
        LandmarkInversion::Regularized => {
            let eig = SymmetricEigen::new(sym);
            let max = eig.eigenvalues.max();
            let min = eig.eigenvalues.min();
            let mut m = sym;
            if min <= 0.0 || max / min > 1e12 {
                log::warn!("ill-conditioned landmark block (eigenvalues {min:e}..{max:e}); adding 1e-12 I");
                m += Matrix3::identity() * 1e-12;
            }
            m.try_inverse()
                .ok_or_else(|| Error::SingularLandmark("landmark block".into()))
        }
        LandmarkInversion::Strict => Cholesky::new(sym)
            .map(|c| c.inverse())
            .ok_or_else(|| Error::SingularLandmark("landmark block".into())),
    }
}

#[derive(Debug, Clone)]
pub struct BackSubstitution {
    pub hessian_inverse: Matrix3<f64>,
    pub gradient: Vector3<f64>,
    pub coupling: Vec<(usize, Matrix6x3<f64>)>,
}

/// Pose-only system left after eliminating landmarks.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub context: Vec<BackSubstitution>,
}

impl ReducedSystem {
    /// Solves for the pose step; `None` if the reduced matrix is not
    /// positive definite.
    pub fn solve_poses(&self) -> Option<DVector<f64>> {
        if self.matrix.nrows() == 0 {
            return Some(DVector::zeros(0));
        }
        let sym = 0.5 * (&self.matrix + self.matrix.transpose());
        Cholesky::new(sym).map(|c| c.solve(&self.rhs))
    }

    /// Landmark steps from a pose step.
    pub fn back_substitute(&self, pose_step: &DVector<f64>) -> Vec<Vector3<f64>> {
        self.context
            .iter()
            .map(|c| {
                let mut rhs = c.gradient;
                for (p, cp) in &c.coupling {
                    rhs += cp.transpose() * pose_step.fixed_rows::<6>(POSE_DIM * p);
                }
                -(c.hessian_inverse * rhs)
            })
            .collect()
    }

    /// Full step `(poses, landmarks)` stacked in state order.
    pub fn solve(&self) -> Option<DVector<f64>> {
        let dp = self.solve_poses()?;
        let dl = self.back_substitute(&dp);
        let mut x = DVector::zeros(dp.len() + 3 * dl.len());
        x.rows_mut(0, dp.len()).copy_from(&dp);
        for (i, d) in dl.iter().enumerate() {
            x.fixed_rows_mut::<3>(dp.len() + 3 * i).copy_from(d);
        }
        Some(x)
    }
}

/// Reduced pose information from whitened rows without forming landmark
/// normal blocks. For each landmark the pose rows are projected onto the
/// orthogonal complement of its landmark columns, which equals the
/// pseudo-inverse Schur complement. Singular values with
/// `s^2 <= rel_tol * s_max^2` count as unobservable.
pub fn reduced_information_sqrt(layout: &StateLayout, edges: &[EdgeLinearization], rel_tol: f64) -> DMatrix<f64> {
    let mut rows: Vec<Vec<(Option<usize>, RowVector6<f64>, RowVector3<f64>)>> =
        vec![Vec::new(); layout.landmarks.len()];
    for e in edges {
        for g in &e.groups {
            for r in 0..g.rows {
                rows[g.landmark].push((
                    e.pose,
                    g.pose_jacobian.row(r).into_owned(),
                    g.landmark_jacobian.row(r).into_owned(),
                ));
            }
        }
    }
    let parts: Vec<(Vec<usize>, DMatrix<f64>)> = rows
        .par_iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let mut poses: Vec<usize> = r.iter().filter_map(|(p, _, _)| *p).collect();
            poses.sort_unstable();
            poses.dedup();
            let mut jp = DMatrix::zeros(r.len(), POSE_DIM * poses.len());
            let mut jx = DMatrix::zeros(r.len(), 3);
            for (i, (p, a, b)) in r.iter().enumerate() {
                if let Some(p) = p {
                    let c = poses.binary_search(p).expect("pose collected");
                    jp.view_mut((i, POSE_DIM * c), (1, POSE_DIM)).copy_from(a);
                }
                jx.row_mut(i).copy_from(b);
            }
            let svd = jx.svd(true, false);
            let u = svd.u.expect("left singular vectors");
            let smax = svd.singular_values.max();
            for (k, s) in svd.singular_values.iter().enumerate() {
                if smax > 0.0 && s * s > rel_tol * smax * smax {
                    let uk = u.column(k);
                    let proj = uk.transpose() * &jp;
                    jp -= uk * proj;
                }
            }
            (poses, jp.transpose() * &jp)
        })
        .collect();
    let n = layout.pose_dim();
    let mut s = DMatrix::zeros(n, n);
    for (poses, block) in parts {
        for (a, pa) in poses.iter().enumerate() {
            for (b, pb) in poses.iter().enumerate() {
                let mut dst = s.fixed_view_mut::<6, 6>(POSE_DIM * pa, POSE_DIM * pb);
                dst += block.fixed_view::<6, 6>(POSE_DIM * a, POSE_DIM * b);
            }
        }
    }
    s
}

/// Schur reduction of a dense normal system whose landmark part (everything
/// after `pose_dim`) is block diagonal in 3x3 blocks.
pub fn schur_reduce(
    h: &DMatrix<f64>,
    b: &DVector<f64>,
    pose_dim: usize,
    inversion: LandmarkInversion,
) -> Result<ReducedSystem> {
    let n = h.nrows();
    if h.ncols() != n || b.len() != n || pose_dim > n || (n - pose_dim) % 3 != 0 || pose_dim % POSE_DIM != 0 {
        return Err(Error::InvalidArgument(format!(
            "schur_reduce: H is {}x{}, b has {}, pose_dim {pose_dim}",
            h.nrows(),
            h.ncols(),
            b.len()
        )));
    }
    let nl = (n - pose_dim) / 3;
    for i in 0..nl {
        for j in 0..nl {
            if i != j
                && h.view((pose_dim + 3 * i, pose_dim + 3 * j), (3, 3))
                    .iter()
                    .any(|v| *v != 0.0)
            {
                return Err(Error::InvalidArgument(format!(
                    "schur_reduce: landmark blocks {i} and {j} are coupled"
                )));
            }
        }
    }
    let ne = NormalEquations {
        pose_hessian: h.view((0, 0), (pose_dim, pose_dim)).into_owned(),
        pose_gradient: b.rows(0, pose_dim).into_owned(),
        landmarks: (0..nl)
            .map(|i| {
                let o = pose_dim + 3 * i;
                let mut coupling = BTreeMap::new();
                for p in 0..pose_dim / POSE_DIM {
                    let c: Matrix6x3<f64> = h.fixed_view::<6, 3>(POSE_DIM * p, o).into_owned();
                    if c.iter().any(|v| *v != 0.0) {
                        coupling.insert(p, c);
                    }
                }
                LandmarkBlock {
                    hessian: h.fixed_view::<3, 3>(o, o).into_owned(),
                    gradient: b.fixed_rows::<3>(o).into_owned(),
                    coupling,
                }
            })
            .collect(),
    };
    ne.reduce(0.0, inversion, &|i| format!("landmark block {i}"))
}

/// Names the pose coordinates dominating the near-null space of a reduced
/// information matrix. Eigenvalues are compared with `rel_tol` times the
/// larger of `scale` and the largest eigenvalue.
pub fn null_space_report(matrix: &DMatrix<f64>, layout: &StateLayout, rel_tol: f64, scale: f64) -> Vec<String> {
    let sym = 0.5 * (matrix + matrix.transpose());
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().fold(scale, |m, v| m.max(v.abs()));
    let mut out = Vec::new();
    for i in 0..eig.eigenvalues.len() {
        if eig.eigenvalues[i] <= rel_tol * max {
            let v = eig.eigenvectors.column(i);
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|a, b| v[*b].abs().total_cmp(&v[*a].abs()).then(a.cmp(b)));
            let names: Vec<String> = idx
                .iter()
                .take(3)
                .filter(|j| v[**j].abs() > 1e-3)
                .map(|j| layout.pose_coordinate_name(*j))
                .collect();
            out.push(format!(
                "eigenvalue {:e} along [{}]",
                eig.eigenvalues[i],
                names.join(", ")
            ));
        }
    }
    out
}

/// Linearizes the selected edges and accumulates normal equations. With
/// `losses = None` all weights are 1 (plain Gaussian information).
pub fn build_normal_equations(
    graph: &FactorGraph,
    layout: &StateLayout,
    selector: Selector,
    losses: Option<&Losses>,
) -> Result<(NormalEquations, Vec<EdgeLinearization>, Vec<EdgeId>)> {
    let (edges, dropped) = linearize_edges(graph, layout, selector)?;
    let weights = robust_weights(&edges, losses);
    Ok((NormalEquations::accumulate(layout, &edges, &weights), edges, dropped))
}

pub fn robust_weights(edges: &[EdgeLinearization], losses: Option<&Losses>) -> Vec<f64> {
    edges
        .iter()
        .map(|e| match losses {
            None => 1.0,
            Some(l) => {
                let loss = match e.id.kind {
                    EdgeKind::Point => l.point,
                    EdgeKind::Line => l.line,
                };
                loss.evaluate(e.chi2.sqrt()).1
            }
        })
        .collect()
}
