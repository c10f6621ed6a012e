mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "erefl", version, about = "Blind early-reflection delay and DoA estimation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML configuration; defaults are used for anything not set.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker threads for campaigns (0 = all cores).
    #[arg(long, global = true, env = "EREFL_WORKERS", default_value_t = 0)]
    pub workers: usize,
    /// Directory for cached focusing operators.
    #[arg(long, global = true, env = "EREFL_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Print stage runtimes and record them in the manifest.
    #[arg(long, global = true)]
    pub timings: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the configured scene: array signals and ground truth.
    Simulate(commands::SimulateArgs),
    /// Run the detector on a recording and dump raw candidates.
    Detect(commands::DetectArgs),
    /// Cluster candidates and score the estimates against ground truth.
    Evaluate(commands::EvaluateArgs),
    /// Monte Carlo campaign over the room presets.
    Campaign(commands::CampaignArgs),
    /// Binned analysis tables from finished campaigns.
    Bins(commands::BinsArgs),
    /// Statistical RIR, optionally with estimated delays and DoAs.
    Synth(commands::SynthArgs),
    /// Listening-test scene end to end with both arrays.
    Demo(commands::DemoArgs),
}

fn exit_code(category: &str) -> u8 {
    match category {
        "config" => 2,
        "input" | "format" => 3,
        "io" => 4,
        "geometry" | "infeasible" | "decay" => 5,
        "campaign" => 6,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let g = cli.global;
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&g, &a),
        Command::Detect(a) => commands::detect(&g, &a),
        Command::Evaluate(a) => commands::evaluate(&g, &a),
        Command::Campaign(a) => commands::campaign(&g, &a),
        Command::Bins(a) => commands::bins(&g, &a),
        Command::Synth(a) => commands::synth(&g, &a),
        Command::Demo(a) => commands::demo(&g, &a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = commands::category(&e);
            eprintln!("error [{category}]: {e:#}");
            ExitCode::from(exit_code(category))
        }
    }
}
