//! `hyperfc`: train, evaluate and interrogate hypergraph models over
//! functional-connectivity matrices.
//!
//! Every subcommand reads one strict JSON config (`--config`), applies any
//! flag overrides last-wins, and writes reports carrying a reproducibility
//! header into `--out`. Exit codes: 0 success, 1 usage/config error, 2
//! data/format error, 3 numerical failure.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hyperfc::ReadoutKind;
use hyperfc_cli::config::Overrides;
use hyperfc_cli::{commands, exit_code};

#[derive(Parser)]
#[command(
    name = "hyperfc",
    version,
    about = "Hypergraph learning on functional-connectivity matrices"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct IoArgs {
    /// Strict JSON config file; unknown keys are rejected
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory that receives reports and artifacts
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReadoutArg {
    Mlp,
    Mean,
    Max,
}

impl From<ReadoutArg> for ReadoutKind {
    fn from(arg: ReadoutArg) -> Self {
        match arg {
            ReadoutArg::Mlp => ReadoutKind::Mlp,
            ReadoutArg::Mean => ReadoutKind::Mean,
            ReadoutArg::Max => ReadoutKind::Max,
        }
    }
}

#[derive(Args, Default)]
struct ModelOverrideArgs {
    /// Override the seed from the config file
    #[arg(long)]
    seed: Option<u64>,
    /// Override the hyperedge size k
    #[arg(long)]
    k: Option<usize>,
    /// Override the number of convolution layers (widths repeat the last
    /// configured hidden dimension)
    #[arg(long)]
    layers: Option<usize>,
    /// Override the readout kind
    #[arg(long, value_enum)]
    readout: Option<ReadoutArg>,
}

impl ModelOverrideArgs {
    fn into_overrides(self) -> Overrides {
        Overrides {
            seed: self.seed,
            k: self.k,
            layers: self.layers,
            readout: self.readout.map(ReadoutKind::from),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic FC dataset with a planted class effect
    Synth {
        #[command(flatten)]
        io: IoArgs,
        /// Override the generation seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Import ROI time-series CSVs as an FC dataset
    #[command(name = "import-ts")]
    ImportTs {
        #[command(flatten)]
        io: IoArgs,
    },
    /// Train one model on a dataset
    Train {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        overrides: ModelOverrideArgs,
    },
    /// Evaluate a checkpoint on a dataset
    Eval {
        #[command(flatten)]
        io: IoArgs,
    },
    /// Cross-validate with stratified k-fold or leave-one-site-out folds
    Cv {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        overrides: ModelOverrideArgs,
        /// Parallel fold workers (results are identical for any value)
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Sweep one hyperparameter axis, cross-validating each setting
    Ablate {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        overrides: ModelOverrideArgs,
        /// Parallel fold workers (results are identical for any value)
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Export ROI attention rankings and hyperedge patterns for a checkpoint
    Interpret {
        #[command(flatten)]
        io: IoArgs,
    },
    /// Verify analytic gradients of the full model against finite differences
    Gradcheck {
        #[command(flatten)]
        io: IoArgs,
        /// Override the instance seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the hyperedge size k
        #[arg(long)]
        k: Option<usize>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help and --version land here too; those exit 0.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            std::process::exit(code);
        }
    };

    let started = Instant::now();
    let (name, result) = match cli.command {
        Command::Synth { io, seed } => {
            let overrides = Overrides { seed, ..Overrides::default() };
            ("synth", commands::synth(io.config.as_deref(), &io.out, &overrides))
        }
        Command::ImportTs { io } => ("import-ts", commands::import_ts(io.config.as_deref(), &io.out)),
        Command::Train { io, overrides } => (
            "train",
            commands::train_cmd(io.config.as_deref(), &io.out, &overrides.into_overrides()),
        ),
        Command::Eval { io } => ("eval", commands::eval_cmd(io.config.as_deref(), &io.out)),
        Command::Cv { io, overrides, jobs } => (
            "cv",
            commands::cv_cmd(io.config.as_deref(), &io.out, &overrides.into_overrides(), jobs),
        ),
        Command::Ablate { io, overrides, jobs } => (
            "ablate",
            commands::ablate_cmd(io.config.as_deref(), &io.out, &overrides.into_overrides(), jobs),
        ),
        Command::Interpret { io } => {
            ("interpret", commands::interpret_cmd(io.config.as_deref(), &io.out))
        }
        Command::Gradcheck { io, seed, k } => {
            let overrides = Overrides { seed, k, ..Overrides::default() };
            ("gradcheck", commands::gradcheck_cmd(io.config.as_deref(), &io.out, &overrides))
        }
    };
    eprintln!("[hyperfc] {name} took {:.2}s", started.elapsed().as_secs_f64());

    if let Err(err) = result {
        eprintln!("hyperfc {name}: {err}");
        std::process::exit(exit_code(&err));
    }
}
