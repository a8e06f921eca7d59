use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ipl::commands::{
    cmd_ablate, cmd_adapt, cmd_gen, cmd_source, cmd_sweep, resolve_config, PREDICTIONS_FILE,
};
use ipl::config::Profile;
use ipl::experiment::SweepParam;

/// Source-free domain adaptation by iterative pseudo-labeling.
#[derive(Parser, Debug)]
#[command(name = "ipl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// office, office-home, visda or custom.
    #[arg(long)]
    profile: Option<Profile>,

    /// Overrides the seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,

    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic source/target pair.
    Gen(Common),
    /// Train the source model and export target predictions.
    Source {
        #[command(flatten)]
        common: Common,
        /// Directory written by `gen`.
        #[arg(long, default_value = "data")]
        data: PathBuf,
    },
    /// Adapt to the target from exported predictions only.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Predictions file; defaults to `<out>/predictions.csv`.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Re-run adaptation over a list of values for one threshold.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Compare loss combinations across seeds.
    Ablate(Common),
}

fn run(cli: Cli) -> ipl::Result<Vec<PathBuf>> {
    let config = |c: &Common| resolve_config(c.config.as_deref(), c.profile, c.seed);
    match cli.command {
        Command::Gen(c) => cmd_gen(&config(&c)?, &c.out),
        Command::Source { common, data } => cmd_source(&config(&common)?, &data, &common.out),
        Command::Adapt {
            common,
            data,
            predictions,
        } => {
            let predictions = predictions.unwrap_or_else(|| common.out.join(PREDICTIONS_FILE));
            cmd_adapt(
                &config(&common)?,
                &data,
                Path::new(&predictions),
                &common.out,
            )
        }
        Command::Sweep {
            common,
            param,
            values,
        } => cmd_sweep(&config(&common)?, param, &values, &common.out),
        Command::Ablate(c) => cmd_ablate(&config(&c)?, &c.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(written) => {
            for path in written {
                println!("{}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
