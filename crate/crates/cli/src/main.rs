//! `bsq` — one binary for the whole boundary-squeeze pipeline: target
//! generation, training, evaluation, kernel sweeps, branch ablations, and
//! visualization.
//!
//! Exit codes are part of the contract: 0 on success, 2 when an input file
//! cannot be read or parsed, 3 when a configuration is structurally invalid,
//! 4 when training diverges numerically. Every command is deterministic for
//! a fixed config and seed, and every command that produces files writes a
//! config echo into its output directory. The environment variable
//! `BSQ_THREADS` caps the worker-thread count.

mod commands;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use bsq_core::Error;

#[derive(Parser)]
#[command(name = "bsq", version, about = "Boundary-squeeze segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate squeeze supervision targets from a mask file.
    ///
    /// Reads a binary P5 PGM (nonzero pixels are foreground) or a polygon
    /// JSON document, derives the mask/boundary/contraction/expansion
    /// targets, and writes each as both PGM and BSQT.
    GenGt {
        /// Input mask: P5 PGM or polygon JSON.
        #[arg(long)]
        mask: PathBuf,
        /// Squeeze kernel size; must be odd.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a JSON run configuration.
    ///
    /// Generates the configured synthetic dataset, fits the model on its
    /// 80% split, and writes the dataset, the checkpoint, a per-step loss
    /// CSV, and a config echo into the output directory.
    Train {
        /// Run configuration; every field has a default, unknown keys are
        /// rejected.
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    ///
    /// Prints an aggregate metric table; with --out also writes the full
    /// report as JSON and CSV.
    Eval {
        /// Checkpoint directory (holds manifest.json and tensor files).
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory written by `bsq train`.
        #[arg(long)]
        data: PathBuf,
        /// Directory for report.json / report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run configuration supplying the evaluation tolerances.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate across squeeze kernel sizes.
    ///
    /// Regenerates the dataset for each kernel size (the supervision
    /// targets depend on it) and reports metrics averaged over seeds.
    SweepK {
        /// Base run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Kernel sizes to sweep.
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,9")]
        values: Vec<usize>,
        /// Training seeds to average over.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Output directory; defaults to <out_dir>/sweep.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate branch subsets on one shared dataset.
    Ablate {
        /// Base run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Branch subset such as "seg" or "seg,con,exp"; repeatable, one
        /// trained variant per occurrence. Defaults to the ladder
        /// seg / seg,con,exp / seg,bnd,con,exp.
        #[arg(long, value_parser = commands::parse_branch_set)]
        branches: Vec<commands::BranchVariant>,
        /// Training seeds to average over.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Output directory; defaults to <out_dir>/ablation.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render flow fields and a PCA view of the boundary feature.
    ///
    /// Runs the checkpoint on one dataset sample and writes the predicted
    /// mask, the contraction/expansion flows as color wheels, and a
    /// three-component PCA projection of the boundary feature. Checkpoints
    /// without a boundary branch produce only the mask rasters.
    Viz {
        /// Checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory written by `bsq train`.
        #[arg(long)]
        data: PathBuf,
        /// Sample index within the dataset.
        #[arg(long)]
        sample: usize,
        /// Output directory.
        #[arg(long, default_value = "viz")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> bsq_core::Result<()> {
    commands::init_thread_pool()?;
    match cli.command {
        Command::GenGt { mask, k, out } => commands::gen_gt(&mask, k, &out),
        Command::Train { config, out } => commands::train(&config, out.as_deref()),
        Command::Eval { ckpt, data, out, config } => {
            commands::eval(&ckpt, &data, out.as_deref(), config.as_deref())
        }
        Command::SweepK { config, values, seeds, out } => {
            commands::sweep_k(config.as_deref(), &values, &seeds, out.as_deref())
        }
        Command::Ablate { config, branches, seeds, out } => {
            commands::ablate(config.as_deref(), &branches, &seeds, out.as_deref())
        }
        Command::Viz { ckpt, data, sample, out } => commands::viz(&ckpt, &data, sample, &out),
    }
}

/// Map error classes onto the documented exit codes. Unreadable or
/// unparsable inputs exit 2, structurally invalid configuration exits 3,
/// numerical failure exits 4; anything pointing at an internal bug exits 1.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Parse { .. } | Error::Io { .. } | Error::DegeneratePolygon(_) => 2,
        // JSON that does not parse is bad input; JSON that parses but does
        // not fit the schema is bad configuration.
        Error::Json(e) => match e.classify() {
            serde_json::error::Category::Data => 3,
            _ => 2,
        },
        Error::Config(_)
        | Error::InvalidKernel(_)
        | Error::MissingSlot(_)
        | Error::ShapeMismatch { .. }
        | Error::ChannelMismatch { .. }
        | Error::LabelOutOfRange { .. } => 3,
        Error::Diverged { .. } | Error::NonFinite(_) => 4,
        Error::BackwardTwice | Error::NotScalar => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        // Ignore write failures here: a closed stderr must not turn a clean
        // error exit into a panic.
        use std::io::Write as _;
        let mut stderr = std::io::stderr();
        let _ = writeln!(stderr, "error: {err}");
        let mut source = std::error::Error::source(&err);
        while let Some(cause) = source {
            let _ = writeln!(stderr, "  caused by: {cause}");
            source = cause.source();
        }
        std::process::exit(exit_code(&err));
    }
}
