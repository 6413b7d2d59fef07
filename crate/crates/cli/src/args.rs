use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use guidance_ba::synthetic::{SceneConfig, TrajectoryKind};

#[derive(Debug, Parser)]
#[command(
    name = "guidance-ba",
    about = "Point and line-guidance bundle adjustment with pose covariance analysis",
    disable_version_flag = true
)]
pub struct Cli {
    /// Print name, version and schema version as JSON and exit.
    #[arg(long, global = true)]
    pub version: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic problem file.
    Generate(GenerateArgs),
    /// Solve a problem file and write the trajectory and a report.
    Solve(SolveArgs),
    /// Pose covariances and the additivity/ordering certificate.
    Uncertainty(UncertaintyArgs),
    /// Empirical vs. analytic pose covariance over repeated noise draws.
    Montecarlo(MonteCarloArgs),
    /// Pose error as a function of the guidance count.
    SweepGuidance(SweepArgs),
    /// ATE between two TUM trajectories.
    Evaluate(EvaluateArgs),
}

/// Scene flags shared by the generating commands. Keys of a `--config` file
/// use the same names with underscores.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SceneArgs {
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of point landmarks.
    #[arg(long, default_value_t = 60)]
    pub points: usize,
    /// Number of line landmarks.
    #[arg(long, default_value_t = 15)]
    pub lines: usize,
    /// Guidance points per line.
    #[arg(long, default_value_t = 5)]
    pub guidance: usize,
    /// Free keyframes.
    #[arg(long = "free", default_value_t = 4)]
    pub free: usize,
    /// Fixed keyframes.
    #[arg(long = "fixed", default_value_t = 2)]
    pub fixed: usize,
    /// orbit, corridor or random-walk.
    #[arg(long, default_value = "orbit")]
    pub trajectory: String,
    /// Pixel sigma at pyramid level 0.
    #[arg(long, default_value_t = 1.0)]
    pub sigma_p: f64,
    /// Line endpoint sigma (pixels).
    #[arg(long, default_value_t = 1.0)]
    pub sigma_line: f64,
    /// Scale on the depth noise used to initialize guidance points.
    #[arg(long, default_value_t = 1.0)]
    pub line_depth_noise_scale: f64,
    /// Fraction of edges replaced by outliers.
    #[arg(long, default_value_t = 0.0)]
    pub outliers: f64,
    #[arg(long, default_value_t = 3)]
    pub min_observations: usize,
    /// Emit exact measurements.
    #[arg(long)]
    pub noise_free: bool,
    /// Initial pose translation noise (meters).
    #[arg(long, default_value_t = 0.02)]
    pub init_translation_sigma: f64,
    /// Initial pose rotation noise (radians).
    #[arg(long, default_value_t = 0.01)]
    pub init_rotation_sigma: f64,
}

impl SceneArgs {
    pub fn scene_config(&self, seed: u64) -> Result<SceneConfig, String> {
        let trajectory: TrajectoryKind = self.trajectory.parse().map_err(|e: guidance_ba::Error| e.to_string())?;
        let mut c = SceneConfig {
            seed,
            free_keyframes: self.free,
            fixed_keyframes: self.fixed,
            points: self.points,
            lines: self.lines,
            guidance: self.guidance,
            trajectory,
            line_depth_noise_scale: self.line_depth_noise_scale,
            outlier_fraction: self.outliers,
            min_observations: self.min_observations,
            noise_free: self.noise_free,
            init_translation_sigma: self.init_translation_sigma,
            init_rotation_sigma: self.init_rotation_sigma,
            ..SceneConfig::default()
        };
        c.noise.sigma_p = self.sigma_p;
        c.noise.sigma_line = self.sigma_line;
        Ok(c)
    }
}

/// Solver flags shared by the solving commands.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SolverArgs {
    /// points, lines or both.
    #[arg(long, default_value = "both")]
    pub selector: String,
    /// pseudo-huber or quadratic. Defaults to the problem file's losses.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub scene: SceneArgs,
    /// Output problem file.
    #[arg(short = 'o', long)]
    pub output: PathBuf,
    /// JSON file whose keys override the flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SolveArgs {
    /// Problem file.
    pub problem: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    /// Directory for trajectory_<selector>.txt and report_<selector>.json.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct UncertaintyArgs {
    /// Problem file.
    pub problem: PathBuf,
    /// Linearize at the current estimate or at the file's ground truth.
    #[arg(long, default_value = "estimate")]
    pub linearize_at: String,
    /// Report file; stdout gets a summary.
    #[arg(short = 'o', long, default_value = "uncertainty.json")]
    pub output: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MonteCarloArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 2000)]
    pub trials: usize,
    #[arg(short = 'o', long, default_value = "montecarlo.json")]
    pub output: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub scene: SceneArgs,
    /// Comma-separated guidance counts; 0 is the points-only baseline.
    #[arg(long, default_value = "0,2,3,5,9,15", value_delimiter = ',')]
    pub guidance_list: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    pub repetitions: usize,
    /// pseudo-huber or quadratic.
    #[arg(long, default_value = "pseudo-huber")]
    pub loss: String,
    #[arg(short = 'o', long, default_value = "sweep.csv")]
    pub output: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Estimated trajectory (TUM format).
    pub estimated: PathBuf,
    /// Reference trajectory (TUM format).
    pub reference: PathBuf,
    /// Association window (seconds).
    #[arg(long, default_value_t = 0.02)]
    pub tolerance: f64,
    /// Optional per-pose error CSV.
    #[arg(long)]
    pub per_axis: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}
