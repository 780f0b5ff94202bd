use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mctdd::cli::{cmd_channel_table, cmd_sweep, cmd_trial, cmd_validate, Overrides};
use mctdd::config::{parse_config, TrialConfig};

#[derive(Parser)]
#[command(name = "mctdd", version, about = "Relay-assisted molecular drug delivery simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep the one-hop threshold grid against the no-relay baseline.
    Sweep(OutArgs),
    /// Run one trial at a single threshold and dump its delivery ledger.
    Trial {
        #[command(flatten)]
        args: OutArgs,
        #[arg(long, default_value_t = 30.0)]
        eta: f64,
    },
    /// Write analytic and particle channel tables for one deployment.
    ChannelTable(OutArgs),
    /// Run the oracle checks; exits nonzero if any fails.
    Validate(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML config; omitted keys take the default deployment values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<u64>,
    #[arg(long)]
    walkers: Option<u64>,
    /// Use the reduced repetition count.
    #[arg(long)]
    fast: bool,
}

#[derive(Args)]
struct OutArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl CommonArgs {
    fn load(&self) -> mctdd::Result<TrialConfig> {
        let base = match &self.config {
            Some(p) => parse_config(p)?,
            None => TrialConfig::default(),
        };
        Overrides {
            seed: self.seed,
            repetitions: self.reps,
            walkers: self.walkers,
            fast: self.fast,
        }
        .apply(base)
    }
}

fn report(out: &Path, files: &[PathBuf]) {
    eprintln!("wrote {} file(s) to {}", files.len() + 1, out.display());
}

fn run(cli: Cli) -> mctdd::Result<bool> {
    match cli.command {
        Command::Sweep(a) => {
            let cfg = a.common.load()?;
            let (summary, manifest) = cmd_sweep(&cfg, &a.out)?;
            println!(
                "best eta {} delivers {:.1} vs baseline {:.1}",
                summary.best_eta, summary.best_n_tot, summary.baseline.mean
            );
            report(&a.out, &manifest.outputs);
        }
        Command::Trial { args, eta } => {
            let cfg = args.common.load()?;
            let (result, _, manifest) = cmd_trial(&cfg, eta, &args.out)?;
            println!(
                "clusters {:?}, N_tot {} at slot {}",
                result.cluster_sizes, result.n_tot, result.eval_slot
            );
            report(&args.out, &manifest.outputs);
        }
        Command::ChannelTable(a) => {
            let cfg = a.common.load()?;
            let manifest = cmd_channel_table(&cfg, &a.out)?;
            report(&a.out, &manifest.outputs);
        }
        Command::Validate(a) => {
            let cfg = a.load()?;
            let checks = cmd_validate(&cfg)?;
            for c in &checks {
                println!("{c}");
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
