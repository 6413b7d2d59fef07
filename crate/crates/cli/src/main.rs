mod args;
mod commands;

use clap::{CommandFactory, Parser};

use args::{Cli, Command};
use commands::CliError;

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Some(Command::Generate(a)) => commands::generate_cmd(a),
        Some(Command::Solve(a)) => commands::solve_cmd(a),
        Some(Command::Uncertainty(a)) => commands::uncertainty_cmd(a),
        Some(Command::Montecarlo(a)) => commands::montecarlo_cmd(a),
        Some(Command::SweepGuidance(a)) => commands::sweep_cmd(a),
        Some(Command::Evaluate(a)) => commands::evaluate_cmd(a),
        None => {
            let _ = Cli::command().print_help();
            Err(CliError::validation("no command given"))
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.version {
        println!("{}", commands::version_json());
        return;
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}
