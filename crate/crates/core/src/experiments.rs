//! Seeded repeated-trial studies on synthetic scenes: paired selector
//! comparisons and the guidance-count sweep.

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};
use crate::geometry::log;
use crate::graph::{FactorGraph, Selector};
use crate::robust::Losses;
use crate::solver::{solve, SolveOptions};
use crate::synthetic::{build_scene, generate, GroundTruth, SceneConfig};
use crate::uncertainty::{pose_covariance, CovarianceMatrix};

/// Seed of repetition `index` under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index + 1);
    rng.next_u64()
}

/// RMS distance between estimated and true camera centers of the free
/// keyframes. The fixed keyframes pin the gauge, so no alignment is applied.
pub fn translation_rmse(estimate: &FactorGraph, truth: &GroundTruth) -> f64 {
    let sq: f64 = estimate
        .free_poses
        .iter()
        .map(|(id, p)| (p.inverse().translation - truth.poses[id].inverse().translation).norm_squared())
        .sum();
    (sq / estimate.free_poses.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub rmse: f64,
    pub converged: bool,
    pub iterations: usize,
    pub outliers_flagged: usize,
}

/// Solves one generated problem. A failed solve counts as not converged with
/// the initial-estimate error.
pub fn run_trial(
    graph: &FactorGraph,
    truth: &GroundTruth,
    selector: Selector,
    losses: &Losses,
    options: &SolveOptions,
) -> TrialOutcome {
    match solve(graph, selector, losses, options) {
        Ok((g, rep)) => TrialOutcome {
            seed: 0,
            rmse: translation_rmse(&g, truth),
            converged: rep.converged,
            iterations: rep.iterations,
            outliers_flagged: rep.outlier_edges.len(),
        },
        Err(e) => {
            log::warn!("trial failed: {e}");
            TrialOutcome {
                seed: 0,
                rmse: translation_rmse(graph, truth),
                converged: false,
                iterations: 0,
                outliers_flagged: 0,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub points: Vec<TrialOutcome>,
    pub both: Vec<TrialOutcome>,
    pub mean_points: f64,
    pub mean_both: f64,
    /// Pairs where `both` is strictly better.
    pub wins: usize,
    /// Pairs where `points` is strictly better.
    pub losses: usize,
    /// One-sided sign-test p-value for `both` better than `points`.
    pub sign_test_p: f64,
}

/// `P(X >= wins)` for `X ~ Binomial(wins + losses, 1/2)`; ties are dropped.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = (wins + losses) as u64;
    if n == 0 {
        return 1.0;
    }
    if wins == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, n).expect("valid binomial");
    1.0 - b.cdf(wins as u64 - 1)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Runs `selector=points` and `selector=both` on the same problem for each
/// of `repetitions` seeds derived from `master_seed`.
pub fn paired_comparison(
    config: &SceneConfig,
    repetitions: usize,
    master_seed: u64,
    losses: &Losses,
    options: &SolveOptions,
) -> Result<PairedComparison> {
    let pairs: Vec<Result<(TrialOutcome, TrialOutcome)>> = (0..repetitions as u64)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(master_seed, i);
            let c = SceneConfig { seed, ..config.clone() };
            let (g, t) = generate(&c)?;
            let mut p = run_trial(&g, &t, Selector::Points, losses, options);
            let mut b = run_trial(&g, &t, Selector::Both, losses, options);
            p.seed = seed;
            b.seed = seed;
            Ok((p, b))
        })
        .collect();
    let mut points = Vec::with_capacity(repetitions);
    let mut both = Vec::with_capacity(repetitions);
    for r in pairs {
        let (p, b) = r?;
        points.push(p);
        both.push(b);
    }
    let wins = points.iter().zip(&both).filter(|(p, b)| b.rmse < p.rmse).count();
    let losses_n = points.iter().zip(&both).filter(|(p, b)| b.rmse > p.rmse).count();
    Ok(PairedComparison {
        mean_points: mean(points.iter().map(|t| t.rmse)),
        mean_both: mean(both.iter().map(|t| t.rmse)),
        sign_test_p: sign_test_p(wins, losses_n),
        wins,
        losses: losses_n,
        points,
        both,
    })
}

/// One row of the guidance sweep. `guidance = 0` is the points-only baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub guidance: usize,
    pub mean_rmse: f64,
    pub std_rmse: f64,
    pub convergence_rate: f64,
    pub trials: Vec<TrialOutcome>,
}

/// For each guidance count, solves `repetitions` problems whose seeds depend
/// only on `master_seed` and the repetition index, so rows are paired.
pub fn sweep_guidance(
    config: &SceneConfig,
    counts: &[usize],
    repetitions: usize,
    master_seed: u64,
    losses: &Losses,
    options: &SolveOptions,
) -> Result<Vec<SweepRow>> {
    counts
        .iter()
        .map(|&n| {
            let trials: Vec<Result<TrialOutcome>> = (0..repetitions as u64)
                .into_par_iter()
                .map(|i| {
                    let seed = derive_seed(master_seed, i);
                    let (guidance, selector) = if n == 0 {
                        (2, Selector::Points)
                    } else {
                        (n, Selector::Both)
                    };
                    let c = SceneConfig {
                        seed,
                        guidance,
                        ..config.clone()
                    };
                    let (g, t) = generate(&c)?;
                    let mut o = run_trial(&g, &t, selector, losses, options);
                    o.seed = seed;
                    Ok(o)
                })
                .collect();
            let trials = trials.into_iter().collect::<Result<Vec<_>>>()?;
            let m = mean(trials.iter().map(|t| t.rmse));
            let var = if trials.len() > 1 {
                trials.iter().map(|t| (t.rmse - m).powi(2)).sum::<f64>() / (trials.len() - 1) as f64
            } else {
                0.0
            };
            Ok(SweepRow {
                guidance: n,
                mean_rmse: m,
                std_rmse: var.sqrt(),
                convergence_rate: trials.iter().filter(|t| t.converged).count() as f64 / trials.len().max(1) as f64,
                trials,
            })
        })
        .collect()
}

/// Stacked left-tangent errors `log(T_est T_true^-1)` of the free poses.
pub fn pose_errors(estimate: &FactorGraph, truth: &GroundTruth) -> DVector<f64> {
    let mut e = DVector::zeros(6 * estimate.free_poses.len());
    for (i, (id, p)) in estimate.free_poses.iter().enumerate() {
        let d = log(&p.compose(&truth.poses[id].inverse()));
        e.fixed_rows_mut::<6>(6 * i).copy_from(&d.0);
    }
    e
}

/// Fraction of failed trials above which a Monte Carlo run is flagged.
pub const NONCONVERGENCE_FLAG: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub selector: Selector,
    pub trials: usize,
    pub converged_trials: usize,
    /// More than 5% of trials failed; they are excluded from the statistics.
    pub flagged: bool,
    pub empirical: CovarianceMatrix,
    pub analytic: CovarianceMatrix,
    /// `|empirical - analytic|_F / |analytic|_F`.
    pub discrepancy: f64,
    /// Mean over converged trials of the free-pose translation RMSE.
    pub mean_rmse: f64,
    /// Same scenes and noise solved with points only, when `selector` is not
    /// already points.
    pub mean_rmse_points_only: Option<f64>,
}

/// Solves `trials` noise realizations of the scene of `config` and compares
/// the second moment of the pose errors about ground truth with the analytic
/// covariance at ground truth. Trial `i` draws its noise from
/// `derive_seed(master_seed, i)`.
pub fn monte_carlo_covariance(
    config: &SceneConfig,
    trials: usize,
    master_seed: u64,
    selector: Selector,
    losses: &Losses,
    options: &SolveOptions,
) -> Result<MonteCarloReport> {
    if trials < 100 {
        return Err(Error::InvalidArgument(format!(
            "Monte Carlo needs >= 100 trials, got {trials}"
        )));
    }
    let scene = build_scene(config)?;
    let (_, truth) = scene.observe(config.seed)?;
    let truth_graph = truth.to_graph(config)?;
    let analytic = pose_covariance(&truth_graph, selector)?;
    let compare = selector != Selector::Points;
    type Trial = Option<(DVector<f64>, f64, Option<f64>)>;
    let runs: Vec<Result<Trial>> = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let (g, t) = scene.observe(derive_seed(master_seed, i))?;
            let solved = match solve(&g, selector, losses, options) {
                Ok((est, rep)) if rep.converged => (pose_errors(&est, &t), translation_rmse(&est, &t)),
                Ok(_) | Err(_) => return Ok(None),
            };
            let points = if compare {
                solve(&g, Selector::Points, losses, options)
                    .ok()
                    .map(|(est, _)| translation_rmse(&est, &t))
            } else {
                None
            };
            Ok(Some((solved.0, solved.1, points)))
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<Trial>>>()?;
    let ok: Vec<_> = runs.iter().flatten().collect();
    let n = analytic.nrows();
    let mut second = DMatrix::zeros(n, n);
    for (e, _, _) in &ok {
        second += e * e.transpose();
    }
    let used = ok.len();
    if used == 0 {
        return Err(Error::InvalidArgument("no Monte Carlo trial converged".into()));
    }
    let empirical = second / used as f64;
    let failed = trials - used;
    let flagged = failed as f64 > NONCONVERGENCE_FLAG * trials as f64;
    if flagged {
        log::warn!("{failed} of {trials} Monte Carlo trials did not converge");
    }
    let points: Vec<f64> = ok.iter().filter_map(|(_, _, p)| *p).collect();
    Ok(MonteCarloReport {
        selector,
        trials,
        converged_trials: used,
        flagged,
        discrepancy: (&empirical - &analytic).norm() / analytic.norm(),
        mean_rmse: mean(ok.iter().map(|(_, r, _)| *r)),
        mean_rmse_points_only: compare.then(|| mean(points.into_iter())),
        empirical: CovarianceMatrix(empirical),
        analytic: CovarianceMatrix(analytic),
    })
}
