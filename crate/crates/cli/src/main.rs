use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sens_core::experiment::{
    self, ExperimentConfig, ExperimentKind, Overrides, RunOptions, MANIFEST_FILE,
};
use sens_core::Error;

#[derive(Parser)]
#[command(
    name = "sens",
    version,
    about = "Hidden-width sweeps and one-vs-all ensembles of tiny networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file and/or flags.
    Run {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Continue an interrupted run in this directory.
        #[arg(long, value_name = "RUN_DIR")]
        resume: Option<PathBuf>,
    },
    /// Re-run a recorded manifest and check every output file byte for byte.
    Replay {
        /// A manifest.json, or the run directory holding one.
        manifest: PathBuf,
        /// Write the replay under this directory instead of the recorded one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the fully resolved configuration without running anything.
    Config {
        #[command(flatten)]
        flags: ConfigFlags,
    },
}

#[derive(Args)]
struct ConfigFlags {
    /// TOML config; flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// synthetic-sweep, layer-size-sweep, ova-binary or ova-ensemble.
    #[arg(long)]
    experiment: Option<String>,
    /// synthetic, mnist or cifar10.
    #[arg(long)]
    dataset: Option<String>,
    /// Comma-separated hidden widths.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Train on the first N stratified training samples.
    #[arg(long)]
    subset: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let experiment = self
            .experiment
            .as_deref()
            .map(str::parse::<ExperimentKind>)
            .transpose()?;
        let mut cfg = match (&self.config, experiment) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(kind)) => ExperimentConfig::for_kind(kind),
            (None, None) => return Err(Error::Config("give --config or --experiment".into())),
        };
        cfg.apply(&Overrides {
            experiment,
            dataset: self.dataset.clone(),
            hidden: self.hidden.clone(),
            trials: self.trials,
            seed: self.seed,
            out: self.out.clone(),
            epochs: self.epochs,
            learning_rate: self.lr,
            batch_size: self.batch,
            subset: self.subset,
            jobs: self.jobs,
        })?;
        cfg.resolved()
    }
}

fn execute(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Config { flags } => {
            print!("{}", flags.resolve()?.to_toml_string());
            Ok(0)
        }
        Command::Run { flags, resume } => {
            let cfg = flags.resolve()?;
            let outcome = experiment::run(cfg, &RunOptions { resume })?;
            println!("run directory: {}", outcome.dir.display());
            for f in &outcome.manifest.files {
                println!("  {}  {}", &f.sha256[..12], f.path);
            }
            if outcome.diverged() {
                for d in &outcome.manifest.divergences {
                    eprintln!("diverged: {d}");
                }
                return Ok(3);
            }
            Ok(0)
        }
        Command::Replay { manifest, out } => {
            let path = if manifest.is_dir() {
                manifest.join(MANIFEST_FILE)
            } else {
                manifest
            };
            let report = experiment::replay(&path, out)?;
            println!("replay directory: {}", report.outcome.dir.display());
            if report.mismatches.is_empty() {
                println!(
                    "all {} files reproduced exactly",
                    report.outcome.manifest.files.len()
                );
                Ok(0)
            } else {
                for m in &report.mismatches {
                    eprintln!("mismatch: {m}");
                }
                Ok(2)
            }
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
