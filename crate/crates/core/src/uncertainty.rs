//! First-order pose covariance of the maximum-likelihood estimate and the
//! information-additivity certificate for disjoint landmark families.
//!
//! All quantities use plain inverse observation covariances as weights (no
//! robust reweighting) and are evaluated at whatever estimate the graph
//! currently holds; compare families only at a common linearization point.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{FactorGraph, Selector};
use crate::schur::{
    build_normal_equations, null_space_report, reduced_information_sqrt, LandmarkInversion, StateLayout,
};

/// Smallest eigenvalue, relative to the largest, for an information matrix to
/// count as positive definite.
pub const PD_REL_TOL: f64 = 1e-10;

/// How landmarks enter the pose information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LandmarkTreatment {
    /// Landmarks are estimated jointly and marginalized (Schur complement).
    #[default]
    Estimated,
    /// Landmarks are known; only `H_A` remains.
    Fixed,
}

/// Reduced pose information `H_A - H_B H_C^+ H_B^T` over the free poses.
#[derive(Debug, Clone)]
pub struct PoseInformation {
    pub layout: StateLayout,
    pub matrix: DMatrix<f64>,
    /// Largest eigenvalue of the pose Hessian before elimination. Definiteness
    /// is judged against it, so elimination roundoff does not count as
    /// information.
    pub scale: f64,
}

pub fn pose_information(graph: &FactorGraph, selector: Selector) -> Result<PoseInformation> {
    pose_information_with(
        graph,
        selector,
        LandmarkTreatment::Estimated,
        LandmarkInversion::default(),
    )
}

pub fn pose_information_with(
    graph: &FactorGraph,
    selector: Selector,
    landmarks: LandmarkTreatment,
    inversion: LandmarkInversion,
) -> Result<PoseInformation> {
    if !graph.has_edges(selector) {
        return Err(Error::EmptyProblem(selector.to_string()));
    }
    // Pose slots cover every free pose so that families share one layout.
    let layout = StateLayout::new(graph, selector);
    let (normal, edges, dropped) = build_normal_equations(graph, &layout, selector, None)?;
    if !dropped.is_empty() {
        log::warn!("{} edges behind the camera left out of the covariance", dropped.len());
    }
    let matrix = match (landmarks, inversion) {
        (LandmarkTreatment::Fixed, _) => normal.pose_hessian.clone(),
        (LandmarkTreatment::Estimated, LandmarkInversion::PseudoInverse { rel_tol }) => {
            reduced_information_sqrt(&layout, &edges, rel_tol)
        }
        (LandmarkTreatment::Estimated, _) => {
            normal
                .reduce(0.0, inversion, &|i| layout.landmarks[i].to_string())?
                .matrix
        }
    };
    Ok(PoseInformation {
        scale: eigenvalues_desc(&normal.pose_hessian).first().copied().unwrap_or(0.0),
        matrix: symmetrize(&matrix),
        layout,
    })
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Eigenvalues of the symmetrized matrix, largest first.
pub fn eigenvalues_desc(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

fn is_positive_definite(info: &PoseInformation) -> (bool, f64, f64) {
    let ev = eigenvalues_desc(&info.matrix);
    let max = ev.first().copied().unwrap_or(0.0);
    let min = ev.last().copied().unwrap_or(0.0);
    let scale = max.max(info.scale);
    (max > 0.0 && min > PD_REL_TOL * scale, min, max)
}

fn invert_information(info: &PoseInformation, what: &str) -> Result<DMatrix<f64>> {
    let (pd, min, max) = is_positive_definite(info);
    if !pd {
        let mut dirs = vec![format!("{what}: information eigenvalues span {min:e}..{max:e}")];
        dirs.extend(null_space_report(&info.matrix, &info.layout, PD_REL_TOL, info.scale));
        return Err(Error::UnderconstrainedPose { directions: dirs });
    }
    let chol = nalgebra::Cholesky::new(info.matrix.clone()).ok_or_else(|| Error::UnderconstrainedPose {
        directions: vec![format!("{what}: Cholesky failed")],
    })?;
    Ok(symmetrize(&chol.inverse()))
}

/// Covariance of the free poses, `(H_A - H_B H_C^-1 H_B^T)^-1`, ordered by
/// keyframe id with `(rho, phi)` per pose.
pub fn pose_covariance(graph: &FactorGraph, selector: Selector) -> Result<DMatrix<f64>> {
    let info = pose_information(graph, selector)?;
    invert_information(&info, &selector.to_string())
}

/// Relative Frobenius residual of `S_g - S_h - S_f` where `S` are the
/// reduced pose informations (inverse covariances) of the three problems.
pub fn additivity_residual(graph: &FactorGraph) -> Result<f64> {
    let (h, f, g) = family_informations(graph)?;
    Ok(additivity_from(&h.matrix, &f.matrix, &g.matrix))
}

fn additivity_from(h: &DMatrix<f64>, f: &DMatrix<f64>, g: &DMatrix<f64>) -> f64 {
    (g - h - f).norm() / g.norm()
}

fn family_informations(graph: &FactorGraph) -> Result<(PoseInformation, PoseInformation, PoseInformation)> {
    let h = pose_information(graph, Selector::Points)?;
    let f = pose_information(graph, Selector::Lines)?;
    let g = pose_information(graph, Selector::Both)?;
    Ok((h, f, g))
}

/// Dense matrix serialized as an array of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CovarianceMatrix(#[serde(with = "matrix_rows")] pub DMatrix<f64>);

mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != m) {
            return Err(serde::de::Error::custom("ragged matrix"));
        }
        Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
    }
}

/// Pose covariances of the point-only (`h`), line-only (`f`) and joint (`g`)
/// problems with their spectra and the theorem checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub keyframes: Vec<u64>,
    #[serde(with = "matrix_rows")]
    pub c_h: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub c_f: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub c_g: DMatrix<f64>,
    pub eigenvalues_h: Vec<f64>,
    pub eigenvalues_f: Vec<f64>,
    pub eigenvalues_g: Vec<f64>,
    /// `|C_g^-1 - C_h^-1 - C_f^-1|_F / |C_g^-1|_F`.
    pub additivity_residual: f64,
    /// `lambda_i(C_h) - lambda_i(C_g)`, eigenvalues sorted descending.
    pub margins_h: Vec<f64>,
    /// `lambda_i(C_f) - lambda_i(C_g)`.
    pub margins_f: Vec<f64>,
    pub min_margin: f64,
    /// Smallest margin divided by the matching eigenvalue of `C_g`.
    pub min_relative_margin: f64,
    pub min_eigenvalue_h: f64,
    pub min_eigenvalue_f: f64,
    /// Every margin strictly positive.
    pub strict_ordering: bool,
}

/// Computes `C_h`, `C_f`, `C_g` at the graph's current estimate and checks
/// `C_g^-1 = C_h^-1 + C_f^-1` and the per-index eigenvalue ordering.
///
/// Fails with [`Error::CertificateInapplicable`] if either family alone
/// leaves a pose direction unconstrained, since strict ordering then has no
/// basis.
pub fn theorem_certificate(graph: &FactorGraph) -> Result<CovarianceReport> {
    let (h, f, g) = family_informations(graph)?;
    let additivity = additivity_from(&h.matrix, &f.matrix, &g.matrix);
    let (h_pd, h_min, _) = is_positive_definite(&h);
    if !h_pd {
        return Err(Error::CertificateInapplicable(format!(
            "C_h singular (min information eigenvalue {h_min:e}); additivity residual {additivity:e}"
        )));
    }
    let (f_pd, f_min, _) = is_positive_definite(&f);
    if !f_pd {
        return Err(Error::CertificateInapplicable(format!(
            "C_f singular (min information eigenvalue {f_min:e}); additivity residual {additivity:e}"
        )));
    }
    let c_h = invert_information(&h, "points")?;
    let c_f = invert_information(&f, "lines")?;
    let c_g = invert_information(&g, "both")?;
    let eh = eigenvalues_desc(&c_h);
    let ef = eigenvalues_desc(&c_f);
    let eg = eigenvalues_desc(&c_g);
    let margins_h: Vec<f64> = eh.iter().zip(&eg).map(|(a, b)| a - b).collect();
    let margins_f: Vec<f64> = ef.iter().zip(&eg).map(|(a, b)| a - b).collect();
    let min_margin = margins_h.iter().chain(&margins_f).fold(f64::INFINITY, |m, v| m.min(*v));
    let min_relative_margin = margins_h
        .iter()
        .zip(&eg)
        .chain(margins_f.iter().zip(&eg))
        .map(|(m, e)| m / e)
        .fold(f64::INFINITY, f64::min);
    Ok(CovarianceReport {
        keyframes: g.layout.poses.clone(),
        min_eigenvalue_h: *eh.last().unwrap_or(&0.0),
        min_eigenvalue_f: *ef.last().unwrap_or(&0.0),
        strict_ordering: min_margin > 0.0,
        c_h,
        c_f,
        c_g,
        eigenvalues_h: eh,
        eigenvalues_f: ef,
        eigenvalues_g: eg,
        additivity_residual: additivity,
        margins_h,
        margins_f,
        min_margin,
        min_relative_margin,
    })
}
