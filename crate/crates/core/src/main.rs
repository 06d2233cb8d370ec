use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use sinus_mil::pipeline::{self, ConfigError, Overrides, PipelineConfig, Stage};

/// Multiple-instance ensembling pipeline for 3D region-of-interest anomaly
/// classification.
///
/// Exit status: 0 on success, 1 for invalid configuration or arguments,
/// 2 when a stage fails.
#[derive(Parser, Debug)]
#[command(name = "sinus-mil", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate a synthetic phantom cohort
    Phantom,
    /// Rigidly register every subject onto the fixed volume
    Register,
    /// Fit the per-side Gaussian centroid model from annotations
    FitCentroids,
    /// Extract N instances of size P per included sinus
    Extract,
    /// Patient-level stratified test split and validation folds
    Split,
    /// Train one network per fold
    Train,
    /// Score the test split and ensemble per (subject, side)
    Predict,
    /// Compute AUPRC and F1 per fold
    Evaluate,
    /// Cross-validate over the N and P grids
    Sweep,
    /// Render metric tables and plot-ready series
    Report,
}

impl Command {
    fn stage(self) -> Stage {
        match self {
            Command::Phantom => Stage::Phantom,
            Command::Register => Stage::Register,
            Command::FitCentroids => Stage::FitCentroids,
            Command::Extract => Stage::Extract,
            Command::Split => Stage::Split,
            Command::Train => Stage::Train,
            Command::Predict => Stage::Predict,
            Command::Evaluate => Stage::Evaluate,
            Command::Sweep => Stage::Sweep,
            Command::Report => Stage::Report,
        }
    }
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Instances per sinus
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Crop edge length in registered voxels
    #[arg(long, global = true)]
    patch_size: Option<usize>,
    #[arg(long, global = true)]
    folds: Option<usize>,
    /// Score one ensemble per (subject, side)
    #[arg(long, global = true, overrides_with = "no_ensemble")]
    ensemble: bool,
    /// Score every instance on its own
    #[arg(long, global = true, overrides_with = "ensemble")]
    no_ensemble: bool,
    #[arg(long, global = true, value_parser = ["full", "tiny"])]
    network: Option<String>,
    /// Output directory; each stage writes to its own subdirectory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training epochs
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Suppress progress messages
    #[arg(long, short, global = true)]
    quiet: bool,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            n: self.n,
            patch_size: self.patch_size,
            folds: self.folds,
            ensembled: match (self.ensemble, self.no_ensemble) {
                (true, _) => Some(true),
                (_, true) => Some(false),
                _ => None,
            },
            network: self.network.clone(),
            out: self.out.clone(),
            epochs: self.epochs,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let cfg = match PipelineConfig::resolve(cli.common.config.as_deref(), &cli.common.overrides()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if cfg.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    let quiet = cli.common.quiet;
    let log = move |m: &str| {
        if !quiet {
            eprintln!("{m}");
        }
    };
    match pipeline::run(cli.command.stage(), &cfg, &log) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
