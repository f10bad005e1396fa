use std::path::PathBuf;
use std::process::ExitCode;

use carfollow::error::{Error, Result};
use carfollow::harness::{self, ExperimentKind, ExperimentSpec, Inputs};
use carfollow::Case;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "carfollow", version, about = "Car-following control experiments: DDPG training and DP baselines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a DDPG agent.
    Train(Common),
    /// Solve the discretized DP baseline and roll it out.
    DpSolve {
        #[command(flatten)]
        common: Common,
        /// Reuse previously written tables instead of solving.
        #[arg(long)]
        tables: Option<PathBuf>,
    },
    /// Greedy rollout of a trained actor on its own case.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// DP trajectory CSV to compare against.
        #[arg(long)]
        dp: Option<PathBuf>,
    },
    /// Greedy rollout of a trained actor on another case.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare a DRL and a DP trajectory CSV.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        drl: PathBuf,
        #[arg(long)]
        dp: PathBuf,
    },
    /// Summarize finished run directories.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario case, 1 to 4.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    case: Option<u8>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config layered over the case defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Total environment steps for training.
    #[arg(long)]
    steps: Option<usize>,
    /// Multiplier on DP grid resolution.
    #[arg(long)]
    grid_scale: Option<f64>,
    /// Leaf override, `key.path=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

impl Common {
    fn spec(self, kind: ExperimentKind, inputs: Inputs) -> Result<ExperimentSpec> {
        let mut spec = ExperimentSpec::new(kind, self.out);
        spec.case = self.case.map(Case::try_from).transpose()?;
        spec.seed = self.seed;
        spec.config_file = self.config;
        spec.steps = self.steps;
        spec.grid_scale = self.grid_scale;
        spec.overrides = self
            .overrides
            .iter()
            .map(|s| harness::parse_override(s))
            .collect::<Result<_>>()?;
        spec.inputs = inputs;
        spec.progress = !self.quiet;
        Ok(spec)
    }
}

fn build(cmd: Command) -> Result<ExperimentSpec> {
    match cmd {
        Command::Train(c) => c.spec(ExperimentKind::Train, Inputs::default()),
        Command::DpSolve { common, tables } => common.spec(
            ExperimentKind::DpSolve,
            Inputs {
                dp_tables: tables,
                ..Inputs::default()
            },
        ),
        Command::Evaluate { common, checkpoint, dp } => common.spec(
            ExperimentKind::Evaluate,
            Inputs {
                checkpoint: Some(checkpoint),
                dp_csv: dp,
                ..Inputs::default()
            },
        ),
        Command::Transfer { common, checkpoint } => {
            if common.case.is_none() {
                return Err(Error::InvalidConfig("transfer requires --case for the target".into()));
            }
            common.spec(
                ExperimentKind::Transfer,
                Inputs {
                    checkpoint: Some(checkpoint),
                    ..Inputs::default()
                },
            )
        }
        Command::Compare { common, drl, dp } => common.spec(
            ExperimentKind::Compare,
            Inputs {
                drl_csv: Some(drl),
                dp_csv: Some(dp),
                ..Inputs::default()
            },
        ),
        Command::Report { common, runs } => common.spec(
            ExperimentKind::Report,
            Inputs {
                report_dirs: runs,
                ..Inputs::default()
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match build(cli.command).and_then(|spec| harness::run_experiment(&spec)) {
        Ok(manifest) => {
            println!("{}", serde_json::to_string(&manifest.files).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
