use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use guidance_ba::experiments::{monte_carlo_covariance, sweep_guidance, translation_rmse};
use guidance_ba::problem_file::{to_json_string, ProblemFile, SolverSection, TruthSection, SCHEMA_VERSION};
use guidance_ba::synthetic::{generate, GroundTruth};
use guidance_ba::trajectory::{aligned_errors, parse_trajectory, trajectory_from_poses, write_trajectory};
use guidance_ba::uncertainty::theorem_certificate;
use guidance_ba::{solve, Error, FactorGraph, Losses, Selector, SolveOptions};

use crate::args::*;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_GAUGE: i32 = 3;
pub const EXIT_NONCONVERGENCE: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            code: EXIT_IO,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::GaugeDeficiency { .. } | Error::UnderconstrainedPose { .. } | Error::CertificateInapplicable(_) => {
                EXIT_GAUGE
            }
            _ => EXIT_VALIDATION,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn merge(base: &mut Value, overlay: Value, prefix: &str) -> CliResult<()> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| CliError::validation(format!("unknown config key '{prefix}{k}'")))?;
                if slot.is_object() {
                    merge(slot, v, &format!("{prefix}{k}."))?;
                } else {
                    *slot = v;
                }
            }
            Ok(())
        }
        _ => Err(CliError::validation("config file must hold a JSON object")),
    }
}

/// Overlays the keys of a JSON config file on the parsed flags.
pub fn apply_config<T: Serialize + DeserializeOwned>(args: T, config: Option<&Path>) -> CliResult<T> {
    let Some(path) = config else { return Ok(args) };
    let overlay: Value =
        serde_json::from_str(&read(path)?).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    let mut base = serde_json::to_value(&args).map_err(|e| CliError::validation(e.to_string()))?;
    merge(&mut base, overlay, "")?;
    serde_json::from_value(base).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

fn require_seed(seed: Option<u64>) -> CliResult<u64> {
    seed.ok_or_else(|| CliError::validation("--seed is required"))
}

fn parse_loss(name: &str) -> CliResult<Losses> {
    match name {
        "pseudo-huber" => Ok(Losses::default()),
        "quadratic" => Ok(Losses::quadratic()),
        _ => Err(CliError::validation(format!("unknown loss '{name}'"))),
    }
}

fn parse_selector(name: &str) -> CliResult<Selector> {
    Ok(name.parse::<Selector>()?)
}

fn solver_settings(args: &SolverArgs, section: &SolverSection) -> CliResult<(Selector, Losses, SolveOptions)> {
    let selector = parse_selector(&args.selector)?;
    let losses = match &args.loss {
        Some(l) => parse_loss(l)?,
        None => section.losses,
    };
    let mut options = section.options;
    if let Some(n) = args.max_iterations {
        options.max_iterations = n;
    }
    Ok((selector, losses, options))
}

#[derive(Serialize)]
struct Versioned<'a, T: Serialize> {
    schema_version: u32,
    tool_version: &'a str,
    #[serde(flatten)]
    body: T,
}

fn versioned<T: Serialize>(body: T) -> CliResult<String> {
    Ok(to_json_string(&Versioned {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION"),
        body,
    })?)
}

pub fn version_json() -> String {
    format!(
        "{{\"name\":\"guidance-ba\",\"version\":\"{}\",\"schema_version\":{SCHEMA_VERSION}}}",
        env!("CARGO_PKG_VERSION")
    )
}

pub fn generate_cmd(args: GenerateArgs) -> CliResult<()> {
    let config_path = args.config.clone();
    let args = apply_config(args, config_path.as_deref())?;
    let seed = require_seed(args.scene.seed)?;
    let config = args.scene.scene_config(seed).map_err(CliError::validation)?;
    let (graph, truth) = generate(&config)?;
    let mut file = ProblemFile::from_graph(&graph, SolverSection::default());
    file.scene = Some(config);
    file.ground_truth = Some(TruthSection::from_truth(&truth));
    write(&args.output, &file.to_json()?)?;
    println!(
        "wrote {}: {} free, {} fixed keyframes, {} point and {} line edges",
        args.output.display(),
        graph.free_poses.len(),
        graph.fixed_poses.len(),
        graph.point_edges.len(),
        graph.line_edges.len()
    );
    Ok(())
}

fn load_problem(path: &Path) -> CliResult<ProblemFile> {
    Ok(ProblemFile::from_json(&read(path)?)?)
}

fn truth_of(file: &ProblemFile) -> CliResult<Option<GroundTruth>> {
    let Some(t) = &file.ground_truth else {
        return Ok(None);
    };
    Ok(Some(GroundTruth {
        poses: t.poses()?,
        points: Default::default(),
        lines: Default::default(),
        point_measurements: Vec::new(),
        line_measurements: Vec::new(),
        outliers: t.outliers.clone(),
    }))
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    report: &'a guidance_ba::SolveReport,
    /// RMS camera-center error of the free keyframes vs. ground truth.
    translation_rmse: Option<f64>,
    /// Ground-truth outliers flagged by the post-solve gate.
    outliers_recovered: Option<usize>,
    outliers_injected: Option<usize>,
}

pub fn solve_cmd(args: SolveArgs) -> CliResult<()> {
    let config_path = args.config.clone();
    let args = apply_config(args, config_path.as_deref())?;
    let file = load_problem(&args.problem)?;
    let graph = file.to_graph()?;
    let (selector, losses, options) = solver_settings(&args.solver, &file.solver)?;
    let (solved, report) = solve(&graph, selector, &losses, &options)?;
    let truth = truth_of(&file)?;
    let out = SolveOutput {
        report: &report,
        translation_rmse: truth.as_ref().map(|t| translation_rmse(&solved, t)),
        outliers_recovered: truth
            .as_ref()
            .map(|t| t.outliers.iter().filter(|o| report.outlier_edges.contains(o)).count()),
        outliers_injected: truth.as_ref().map(|t| t.outliers.len()),
    };
    let traj = args.out_dir.join(format!("trajectory_{selector}.txt"));
    let rep = args.out_dir.join(format!("report_{selector}.json"));
    write(&traj, &write_trajectory(&trajectory_from_poses(&solved.all_poses())))?;
    write(&rep, &versioned(out)?)?;
    println!(
        "{}: {} iterations, cost {:.6e} -> {:.6e}, {:?}",
        if report.converged { "converged" } else { "not converged" },
        report.iterations,
        report.initial_cost,
        report.final_cost,
        report.termination
    );
    if !report.converged {
        return Err(CliError {
            code: EXIT_NONCONVERGENCE,
            message: format!("solver stopped without converging ({:?})", report.termination),
        });
    }
    Ok(())
}

fn graph_at_truth(file: &ProblemFile, graph: &FactorGraph) -> CliResult<FactorGraph> {
    let t = file
        .ground_truth
        .as_ref()
        .ok_or_else(|| CliError::validation("problem file has no ground truth"))?;
    let mut g = graph.clone();
    for (id, p) in t.poses()? {
        if let Some(slot) = g.free_poses.get_mut(&id).or_else(|| g.fixed_poses.get_mut(&id)) {
            *slot = p;
        }
    }
    for p in &t.points {
        if let Some(slot) = g.point_landmarks.get_mut(&p.id) {
            slot.position = p.position;
        }
    }
    for l in &t.lines {
        if let Some(slot) = g.line_landmarks.get_mut(&l.id) {
            if slot.guidance_points.len() != l.guidance_points.len() {
                return Err(CliError::validation(format!(
                    "line {} guidance count differs from ground truth",
                    l.id
                )));
            }
            slot.guidance_points = l.guidance_points.clone();
        }
    }
    Ok(g)
}

#[derive(Serialize)]
struct UncertaintyOutput<'a> {
    linearized_at: &'a str,
    #[serde(flatten)]
    report: guidance_ba::uncertainty::CovarianceReport,
}

pub fn uncertainty_cmd(args: UncertaintyArgs) -> CliResult<()> {
    let config_path = args.config.clone();
    let args = apply_config(args, config_path.as_deref())?;
    let file = load_problem(&args.problem)?;
    let graph = file.to_graph()?;
    graph.validate(Selector::Both)?;
    let graph = match args.linearize_at.as_str() {
        "estimate" => graph,
        "truth" => graph_at_truth(&file, &graph)?,
        other => {
            return Err(CliError::validation(format!(
                "--linearize-at must be estimate or truth, got '{other}'"
            )))
        }
    };
    let report = theorem_certificate(&graph)?;
    println!("additivity_residual {:.3e}", report.additivity_residual);
    println!(
        "min_margin {:.3e} min_relative_margin {:.3e} strict_ordering {}",
        report.min_margin, report.min_relative_margin, report.strict_ordering
    );
    write(
        &args.output,
        &versioned(UncertaintyOutput {
            linearized_at: &args.linearize_at,
            report,
        })?,
    )
}

pub fn montecarlo_cmd(args: MonteCarloArgs) -> CliResult<()> {
    let config_path = args.config.clone();
    let args = apply_config(args, config_path.as_deref())?;
    let seed = require_seed(args.scene.seed)?;
    let config = args.scene.scene_config(seed).map_err(CliError::validation)?;
    let section = SolverSection {
        options: SolveOptions::default(),
        losses: Losses::quadratic(),
    };
    let (selector, losses, options) = solver_settings(&args.solver, &section)?;
    let report = monte_carlo_covariance(&config, args.trials, seed, selector, &losses, &options)?;
    println!(
        "{} of {} trials converged, discrepancy {:.4}",
        report.converged_trials, report.trials, report.discrepancy
    );
    write(&args.output, &versioned(&report)?)?;
    if report.flagged {
        return Err(CliError {
            code: EXIT_NONCONVERGENCE,
            message: format!("{} trials did not converge", report.trials - report.converged_trials),
        });
    }
    Ok(())
}

pub fn sweep_cmd(args: SweepArgs) -> CliResult<()> {
    let config_path = args.config.clone();
    let args = apply_config(args, config_path.as_deref())?;
    let seed = require_seed(args.scene.seed)?;
    if args.guidance_list.contains(&1) {
        return Err(CliError::validation(
            "guidance count 1 is invalid (use 0 for points only, or >= 2)",
        ));
    }
    let config = args.scene.scene_config(seed).map_err(CliError::validation)?;
    config.validate()?;
    let losses = parse_loss(&args.loss)?;
    let rows = sweep_guidance(
        &config,
        &args.guidance_list,
        args.repetitions,
        seed,
        &losses,
        &SolveOptions::default(),
    )?;
    let mut csv = String::from("guidance,mean_ate,std_ate,convergence_rate\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{:.16e},{:.16e},{:.16e}",
            r.guidance, r.mean_rmse, r.std_rmse, r.convergence_rate
        );
        println!(
            "N={:<3} mean {:.6} m  std {:.6} m  converged {:.2}",
            r.guidance, r.mean_rmse, r.std_rmse, r.convergence_rate
        );
    }
    write(&args.output, &csv)
}

pub fn evaluate_cmd(args: EvaluateArgs) -> CliResult<()> {
    let config_path = args.config.clone();
    let args = apply_config(args, config_path.as_deref())?;
    let est = parse_trajectory(&read(&args.estimated)?)?;
    let reference = parse_trajectory(&read(&args.reference)?)?;
    let aligned = aligned_errors(&est, &reference, args.tolerance)?;
    println!("{:.6}", aligned.rmse());
    if let Some(path) = &args.per_axis {
        let mut csv = String::from("timestamp,ex,ey,ez\n");
        for (t, e) in &aligned.errors {
            let _ = writeln!(csv, "{t:.16e},{:.16e},{:.16e},{:.16e}", e.x, e.y, e.z);
        }
        write(path, &csv)?;
    }
    Ok(())
}
