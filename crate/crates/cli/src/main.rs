use std::env;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use csi4cast_cli::commands::{cmd_evaluate, cmd_generate, cmd_report, cmd_train};
use csi4cast_cli::config::RunConfig;
use csi4cast_cli::DATA_DIR_ENV;

#[derive(Parser)]
#[command(name = "csi4cast", version, about = "CSI prediction workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Run seed; every output is a deterministic function of config and seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Worker threads; 0 picks the machine default.
    #[arg(long, default_value_t = 0)]
    jobs: usize,

    /// Input directory; falls back to $CSI4CAST_DATA_DIR.
    #[arg(long)]
    data: Option<PathBuf>,

    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Expand the scenario grid into dataset files plus a manifest.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train the configured model on a generated track.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score checkpoints plus the persistence baseline over a track.
    Evaluate {
        #[command(flatten)]
        common: Common,

        /// Directory holding the .ckpt files to score.
        #[arg(long)]
        models: PathBuf,
    },
    /// Turn evaluation CSVs into curve and distribution tables.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(RunConfig::parse(&text)?)
        }
        None => Ok(RunConfig::default()),
    }
}

fn data_dir(common: &Common) -> Result<PathBuf> {
    if let Some(dir) = &common.data {
        return Ok(dir.clone());
    }
    if let Some(dir) = env::var_os(DATA_DIR_ENV) {
        return Ok(PathBuf::from(dir));
    }
    bail!("no input directory: pass --data or set {DATA_DIR_ENV}");
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    common.out.clone().map(Ok).unwrap_or_else(|| data_dir(common))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Generate { common }
        | Command::Train { common }
        | Command::Evaluate { common, .. }
        | Command::Report { common } => common,
    };
    if common.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(common.jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let cfg = load_config(&common.config)?;

    match &cli.command {
        Command::Generate { common } => {
            let out = out_dir(common)?;
            let summary = cmd_generate(&cfg, common.seed, &out)?;
            println!(
                "wrote {} dataset files ({} samples each) to {}",
                summary.files,
                summary.samples_per_scenario,
                out.display()
            );
        }
        Command::Train { common } => {
            let data = data_dir(common)?;
            let out = common
                .out
                .clone()
                .context("train needs --out for the checkpoint and history")?;
            let outcome = cmd_train(&cfg, common.seed, &data, &out)?;
            println!(
                "trained {} epochs, best validation nmse {:.6}, checkpoint {}",
                outcome.epochs_run,
                outcome.best_val_nmse,
                outcome.checkpoint.display()
            );
        }
        Command::Evaluate { common, models } => {
            let data = data_dir(common)?;
            let out = common.out.clone().context("evaluate needs --out for the CSV tables")?;
            let outcome = cmd_evaluate(&cfg, common.seed, &data, models, &out)?;
            println!(
                "evaluated {} models over {} scenarios into {}",
                outcome.models.len(),
                outcome.scenarios,
                out.display()
            );
        }
        Command::Report { common } => {
            let eval_dir = data_dir(common)?;
            let out = common.out.clone().context("report needs --out for its tables")?;
            let outcome = cmd_report(&cfg, &eval_dir, &out)?;
            println!("report files: {}", outcome.files.join(", "));
        }
    }
    Ok(())
}
