//! Levenberg-Marquardt over free poses and landmarks with landmark
//! elimination, robustified by iteratively reweighted least squares.

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::geometry::Tangent;
use crate::graph::{EdgeId, FactorGraph, Selector};
use crate::robust::Losses;
use crate::schur::{
    build_normal_equations, linearize_edges, null_space_report, robust_weights, EdgeLinearization, LandmarkInversion,
    LandmarkSlot, NormalEquations, StateLayout, POSE_DIM,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    pub max_iterations: usize,
    /// Initial damping; `0` runs plain Gauss-Newton until a step is rejected.
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub lambda_max: f64,
    /// Infinity norm of the gradient of the weighted cost.
    pub gradient_tolerance: f64,
    /// Relative decrease of the robust cost.
    pub cost_tolerance: f64,
    /// Step norm relative to the state norm.
    pub step_tolerance: f64,
    pub landmark_inversion: LandmarkInversion,
    /// Chi-square quantile for post-solve outlier labelling.
    pub outlier_confidence: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.5,
            lambda_max: 1e10,
            gradient_tolerance: 1e-8,
            cost_tolerance: 1e-10,
            step_tolerance: 1e-12,
            landmark_inversion: LandmarkInversion::default(),
            outlier_confidence: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Gradient,
    CostChange,
    StepSize,
    MaxIterations,
    DampingLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub selector: Selector,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Unweighted `sum r^T Sigma^-1 r` at the returned estimate.
    pub final_chi2: f64,
    /// Robust cost after the initial evaluation and each accepted step.
    pub cost_trace: Vec<f64>,
    pub converged: bool,
    pub termination: Termination,
    pub final_lambda: f64,
    pub outlier_edges: Vec<EdgeId>,
    /// Edges removed at the start because a landmark was behind the camera.
    pub dropped_edges: Vec<EdgeId>,
    /// Smallest eigenvalue of the undamped reduced pose information at the
    /// returned estimate.
    pub min_reduced_eigenvalue: f64,
}

fn robust_cost(edges: &[EdgeLinearization], losses: &Losses) -> f64 {
    edges
        .iter()
        .map(|e| {
            let loss = match e.id.kind {
                crate::graph::EdgeKind::Point => losses.point,
                crate::graph::EdgeKind::Line => losses.line,
            };
            loss.evaluate(e.chi2.sqrt()).0
        })
        .sum()
}

/// Applies a stacked state step to a copy of the graph.
pub fn apply_step(graph: &FactorGraph, layout: &StateLayout, step: &DVector<f64>) -> FactorGraph {
    let mut out = graph.clone();
    for (i, kf) in layout.poses.iter().enumerate() {
        let d = step.fixed_rows::<6>(POSE_DIM * i).into_owned();
        let pose = out.free_poses.get_mut(kf).expect("layout pose exists");
        *pose = pose.retract_left(&Tangent(d));
    }
    let o = layout.pose_dim();
    for (i, slot) in layout.landmarks.iter().enumerate() {
        let d: Vector3<f64> = step.fixed_rows::<3>(o + 3 * i).into_owned();
        match slot {
            LandmarkSlot::Point(id) => {
                out.point_landmarks
                    .get_mut(id)
                    .expect("layout landmark exists")
                    .position += d;
            }
            LandmarkSlot::Guidance { line, index } => {
                out.line_landmarks
                    .get_mut(line)
                    .expect("layout line exists")
                    .guidance_points[*index] += d;
            }
        }
    }
    out
}

fn state_norm(graph: &FactorGraph, layout: &StateLayout) -> f64 {
    let mut s = 0.0;
    for kf in &layout.poses {
        s += graph.free_poses[kf].translation.norm_squared();
    }
    for slot in &layout.landmarks {
        let p = match slot {
            LandmarkSlot::Point(id) => graph.point_landmarks[id].position,
            LandmarkSlot::Guidance { line, index } => graph.line_landmarks[line].guidance_points[*index],
        };
        s += p.norm_squared();
    }
    s.sqrt()
}

/// Post-solve chi-square gate per edge dimension.
pub fn gate_outliers(edges: &[EdgeLinearization], confidence: f64) -> Vec<EdgeId> {
    let mut cache: Vec<(usize, f64)> = Vec::new();
    let mut out = Vec::new();
    for e in edges {
        let thr = match cache.iter().find(|(d, _)| *d == e.dim) {
            Some((_, t)) => *t,
            None => {
                let t = ChiSquared::new(e.dim as f64)
                    .map(|c| c.inverse_cdf(confidence))
                    .unwrap_or(f64::INFINITY);
                cache.push((e.dim, t));
                t
            }
        };
        if e.chi2 > thr {
            out.push(e.id);
        }
    }
    out
}

/// Minimizes the robust cost of the selected edges over free poses and the
/// landmarks they observe. Fixed poses and unselected landmarks are not
/// touched.
pub fn solve(
    graph: &FactorGraph,
    selector: Selector,
    losses: &Losses,
    options: &SolveOptions,
) -> Result<(FactorGraph, SolveReport)> {
    graph.validate(selector)?;
    let layout = StateLayout::new(graph, selector);

    // Edges invalid at the start are dropped for the whole solve.
    let (_, dropped) = linearize_edges(graph, &layout, selector)?;
    let mut work = graph.clone();
    if !dropped.is_empty() {
        log::warn!("dropping {} edges with landmarks behind the camera", dropped.len());
        work.point_edges.retain(|o| {
            !dropped.iter().any(|d| {
                d.kind == crate::graph::EdgeKind::Point
                    && d.keyframe_id == o.keyframe_id
                    && d.landmark_id == o.landmark_id
            })
        });
        work.line_edges.retain(|o| {
            !dropped.iter().any(|d| {
                d.kind == crate::graph::EdgeKind::Line
                    && d.keyframe_id == o.keyframe_id
                    && d.landmark_id == o.landmark_id
            })
        });
        work.validate(selector)?;
    }
    let layout = StateLayout::new(&work, selector);
    let labels = |i: usize| layout.landmarks[i].to_string();

    let (mut normal, mut edges, _) = build_normal_equations(&work, &layout, selector, Some(losses))?;
    let mut cost = robust_cost(&edges, losses);
    let initial_cost = cost;
    let mut trace = vec![cost];

    // gauge check on the undamped reduced system
    let reduced = normal.reduce(0.0, options.landmark_inversion, &labels)?;
    if reduced.solve_poses().is_none() {
        let dirs = null_space_report(&reduced.matrix, &layout, 1e-12, 0.0);
        let mut vars: Vec<String> = dirs;
        if vars.is_empty() {
            vars.push("reduced pose system is not positive definite".into());
        }
        return Err(Error::GaugeDeficiency { variables: vars });
    }

    let mut lambda = options.lambda_init;
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;
    'outer: while iterations < options.max_iterations {
        if normal.gradient_inf_norm() <= options.gradient_tolerance {
            termination = Termination::Gradient;
            break;
        }
        iterations += 1;
        loop {
            let reduced = normal.reduce(lambda, options.landmark_inversion, &labels)?;
            let step = reduced.solve();
            let accepted = match step {
                None => None,
                Some(step) => {
                    let xn = state_norm(&work, &layout);
                    if step.norm() <= options.step_tolerance * (xn + options.step_tolerance) {
                        termination = Termination::StepSize;
                        break 'outer;
                    }
                    let candidate = apply_step(&work, &layout, &step);
                    match linearize_edges(&candidate, &layout, selector) {
                        Ok((cand_edges, cand_dropped)) if cand_dropped.is_empty() => {
                            let c = robust_cost(&cand_edges, losses);
                            if c < cost {
                                Some((candidate, cand_edges, c))
                            } else {
                                None
                            }
                        }
                        Ok(_) | Err(Error::BehindCamera { .. }) => None,
                        Err(e) => return Err(e),
                    }
                }
            };
            match accepted {
                Some((candidate, cand_edges, c)) => {
                    let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
                    work = candidate;
                    let weights = robust_weights(&cand_edges, Some(losses));
                    normal = NormalEquations::accumulate(&layout, &cand_edges, &weights);
                    edges = cand_edges;
                    cost = c;
                    trace.push(c);
                    lambda *= options.lambda_down;
                    if rel <= options.cost_tolerance {
                        termination = Termination::CostChange;
                        break 'outer;
                    }
                    break;
                }
                None => {
                    lambda = if lambda == 0.0 {
                        1e-6
                    } else {
                        lambda * options.lambda_up
                    };
                    if lambda > options.lambda_max {
                        termination = Termination::DampingLimit;
                        break 'outer;
                    }
                }
            }
        }
    }
    if termination == Termination::MaxIterations && normal.gradient_inf_norm() <= options.gradient_tolerance {
        termination = Termination::Gradient;
    }

    let final_chi2 = edges.iter().map(|e| e.chi2).sum();
    let min_reduced_eigenvalue = {
        let r = normal.reduce(0.0, options.landmark_inversion, &labels)?;
        if r.matrix.nrows() == 0 {
            f64::INFINITY
        } else {
            let sym = 0.5 * (&r.matrix + r.matrix.transpose());
            nalgebra::SymmetricEigen::new(sym).eigenvalues.min()
        }
    };
    let outlier_edges = gate_outliers(&edges, options.outlier_confidence);

    // carry the estimates back onto the caller's graph, keeping dropped edges
    let mut out = graph.clone();
    out.free_poses = work.free_poses;
    out.point_landmarks = work.point_landmarks;
    out.line_landmarks = work.line_landmarks;

    let converged = matches!(
        termination,
        Termination::Gradient | Termination::CostChange | Termination::StepSize
    );
    Ok((
        out,
        SolveReport {
            selector,
            iterations,
            initial_cost,
            final_cost: cost,
            final_chi2,
            cost_trace: trace,
            converged,
            termination,
            final_lambda: lambda,
            outlier_edges,
            dropped_edges: dropped,
            min_reduced_eigenvalue,
        },
    ))
}
