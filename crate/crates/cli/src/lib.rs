//! Command-line front end: each subcommand is one resumable pipeline stage
//! writing artifacts under `--out`.

pub mod config;
mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use wemoe_bench::BenchError;

pub use config::{ConfigFile, Settings, UsageError};
pub use stages::{fingerprint, StagePaths};

#[derive(Debug, Parser)]
#[command(name = "wemoe", version, about = "Model merging workbench: task arithmetic, WEMoE and E-WEMoE on a small ViT")]
pub struct Cli {
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Scalar type for all computation.
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    pub precision: Option<String>,
    /// `key=value` file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the shared base on the generic task.
    Pretrain {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Fine-tune one expert per task from the base.
    Finetune {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Write task vectors (expert minus base).
    Taskvec,
    /// Merge the experts statically or by up-scaling to WEMoE.
    Merge {
        /// weight-averaging, task-arithmetic, mlp-only, att-and-mlp or entire-block
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Router depth (0, 1 or 2).
        #[arg(long)]
        lfc: Option<usize>,
        /// Fraction of dictionary entries pruned by magnitude.
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        shared_router: bool,
    },
    /// Adapt the routers of the merged model by entropy minimization.
    Tta {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Images per task per step.
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Run the merge benchmark and write accuracy tables.
    Eval {
        /// standard, generalization or robustness
        #[arg(long)]
        protocol: Option<String>,
        #[arg(long)]
        methods: Option<String>,
        /// Task indices merged under the generalization protocol.
        #[arg(long)]
        seen: Option<String>,
        #[arg(long)]
        unseen: Option<String>,
        /// Comma-separated `kind@severity` list.
        #[arg(long)]
        corruptions: Option<String>,
        #[arg(long)]
        adapt_on_clean: bool,
    },
    /// Drift, magnitude and routing analyses. No flag means all of them.
    Analyze {
        #[arg(long)]
        drift: bool,
        #[arg(long)]
        magnitudes: bool,
        #[arg(long)]
        routing: bool,
        #[arg(long)]
        firstchoice: bool,
        /// Layers for the routing summaries; default every layer.
        #[arg(long)]
        layers: Option<String>,
    },
    /// Two-task loss landscape over a grid of task-vector coefficients.
    Landscape {
        /// Two task indices, `i,j`.
        #[arg(long)]
        pair: Option<String>,
        /// Points per axis.
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long, allow_negative_numbers = true)]
        min: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        max: Option<f64>,
    },
}

impl Cli {
    /// Folds the flags over the configuration file.
    pub fn settings(&self) -> anyhow::Result<Settings> {
        let file = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let mut s = Settings::new(file);
        s.flag("seed", self.seed);
        s.flag("precision", self.precision.clone());
        s.flag("out", self.out.as_ref().map(|p| p.display().to_string()));
        match &self.command {
            Command::Pretrain { epochs, lr } => {
                s.flag("pretrain_epochs", *epochs);
                s.flag("pretrain_lr", *lr);
            }
            Command::Finetune { epochs, lr } => {
                s.flag("finetune_epochs", *epochs);
                s.flag("finetune_lr", *lr);
            }
            Command::Taskvec => {}
            Command::Merge {
                strategy,
                lambda,
                lfc,
                rho,
                shared_router,
            } => {
                s.flag("strategy", strategy.clone());
                s.flag("lambda", *lambda);
                s.flag("lfc", *lfc);
                s.flag("rho", *rho);
                s.switch("shared_router", *shared_router);
            }
            Command::Tta { steps, lr, batch } => {
                s.flag("steps", *steps);
                s.flag("lr", *lr);
                s.flag("batch", *batch);
            }
            Command::Eval {
                protocol,
                methods,
                seen,
                unseen,
                corruptions,
                adapt_on_clean,
            } => {
                s.flag("protocol", protocol.clone());
                s.flag("methods", methods.clone());
                s.flag("seen", seen.clone());
                s.flag("unseen", unseen.clone());
                s.flag("corruptions", corruptions.clone());
                s.switch("adapt_on_clean", *adapt_on_clean);
            }
            Command::Analyze { layers, .. } => s.flag("layers", layers.clone()),
            Command::Landscape { pair, grid, min, max } => {
                s.flag("pair", pair.clone());
                s.flag("grid", *grid);
                s.flag("grid_min", *min);
                s.flag("grid_max", *max);
            }
        }
        Ok(s)
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run_cli<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let settings = cli.settings()?;
    match settings.raw("precision") {
        "f32" => stages::dispatch::<f32>(&cli.command, &settings),
        "f64" => stages::dispatch::<f64>(&cli.command, &settings),
        other => Err(UsageError(format!("precision must be f32 or f64, got `{other}`")).into()),
    }
}

/// 1 usage, 2 data, 3 numerical failure.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(b) = cause.downcast_ref::<BenchError>() {
            return match b {
                _ if b.is_numerical() => 3,
                BenchError::Core(c) => core_code(c),
                BenchError::Unknown { .. } | BenchError::Protocol(_) | BenchError::Spec(_) | BenchError::TooManyClasses { .. } => 1,
                BenchError::Io(_) | BenchError::Csv(_) => 2,
            };
        }
        if let Some(c) = cause.downcast_ref::<wemoe_core::Error>() {
            return core_code(c);
        }
    }
    2
}

fn core_code(e: &wemoe_core::Error) -> i32 {
    match e {
        _ if e.is_numerical() => 3,
        wemoe_core::Error::Config(_) => 1,
        _ => 2,
    }
}
