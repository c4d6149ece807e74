//! `simba` command-line interface.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use simba_core::simstudy::Method;

#[derive(Parser)]
#[command(name = "simba", version, about = "Bayesian image-on-scalar regression with low-rank GP priors")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Plain-text key = value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides output.dir.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Extra key=value settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Args, Clone, Debug)]
pub struct DataArgs {
    /// N×V response CSV, or a directory of per-participant images.
    #[arg(long)]
    pub responses: PathBuf,
    /// Covariate CSV with a header row.
    #[arg(long)]
    pub covariates: PathBuf,
    /// Mask text file, NIfTI mask or coordinate CSV.
    #[arg(long)]
    pub layout: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Writes simulated datasets and truth maps for every configured scenario.
    Simulate {
        /// Replicates written per scenario.
        #[arg(long, default_value_t = 1)]
        replicates: usize,
    },
    /// Chooses the basis size by leave-one-out prediction error.
    SelectBasis {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Fits one method and writes effect maps plus sampler output.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        /// simba-gibbs, simba-vi, glm or bml; overrides inference.backend.
        #[arg(long)]
        method: Option<Method>,
        /// Basis size; overrides basis.l.
        #[arg(long)]
        l: Option<usize>,
    },
    /// Recomputes effect maps from a fit directory under the current level and threshold.
    Summarize {
        /// Directory written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        /// Layout of the fitted data.
        #[arg(long)]
        layout: PathBuf,
    },
    /// Convergence table and posterior predictive check for a fit directory.
    Diagnose {
        #[arg(long)]
        fit: PathBuf,
        /// Data for the predictive check; omitted means R-hat only.
        #[command(flatten)]
        data: Option<DataArgs>,
        /// Replicated datasets in the predictive check.
        #[arg(long, default_value_t = 150)]
        replicates: usize,
    },
    /// Scores maps against a truth, runs the simulation study, or compares sites.
    Evaluate {
        /// Truth map file written by `simulate`.
        #[arg(long, requires = "maps")]
        truth: Option<PathBuf>,
        #[arg(long)]
        maps: Option<PathBuf>,
        /// Run the full simulation study from the configuration.
        #[arg(long, conflicts_with_all = ["truth", "maps", "sites"])]
        study: bool,
        /// Methods for the study (comma separated).
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        /// Site directories, each holding responses.csv, covariates.csv and a layout.
        #[arg(long, num_args = 2.., conflicts_with_all = ["truth", "maps"])]
        sites: Vec<PathBuf>,
    },
    /// Renders effect maps to PPM images and grid CSVs.
    Render {
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        /// Covariate name or index; all covariates when omitted.
        #[arg(long)]
        covariate: Option<String>,
        /// Slice index along the last axis of 3-D grids.
        #[arg(long, default_value_t = 0)]
        slice: usize,
    },
}

fn init_threads() {
    if let Some(n) = std::env::var("SIMBA_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not set thread count: {e}");
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    init_threads();
    let cli = Cli::parse();
    let common = cli.common;
    let result = match cli.command {
        Command::Simulate { replicates } => commands::simulate(&common, replicates),
        Command::SelectBasis { data } => commands::select_basis(&common, &data),
        Command::Fit { data, method, l } => commands::fit(&common, &data, method, l),
        Command::Summarize { fit, layout } => commands::summarize(&common, &fit, &layout),
        Command::Diagnose { fit, data, replicates } => commands::diagnose(&common, &fit, data.as_ref(), replicates),
        Command::Evaluate { truth, maps, study, methods, sites } => {
            commands::evaluate(&common, truth.as_deref(), maps.as_deref(), study, &methods, &sites)
        }
        Command::Render { maps, layout, covariate, slice } => {
            commands::render(&common, &maps, &layout, covariate.as_deref(), slice)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
