//! Command-line surface: synthesize data, train (full or transfer
//! variants), evaluate, predict, and run the feature-ablation study.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 IO or file
//! format error, 4 numerical abort (non-finite loss).

mod commands;
mod config;

use clap::{Parser, Subcommand, ValueEnum};
use segkit_core::SegError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "segkit", version, about = "Encoder-decoder pixel-wise labelling kit")]
struct Cli {
    /// Worker threads; 1 guarantees bit-reproducible runs across machines
    /// with identical FP hardware. Falls back to SEGKIT_THREADS, then to the
    /// core count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Variant {
    /// Fresh initialization, full modular schedule.
    R,
    /// Frozen body from a checkpoint plus a new hidden-layer soft-max head.
    SM,
    /// Frozen body from a checkpoint; only the deepest pair trains.
    L4,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes dataset.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network (optionally a transfer variant from a checkpoint).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        variant: Option<Variant>,
        /// Source checkpoint, required for SM and L4.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a manifest and report metrics.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional config override (LCN preprocessing).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for metrics.csv and summary.json; stdout only if absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Palette for class names in the report.
        #[arg(long)]
        palette: Option<PathBuf>,
    },
    /// Predict labels for one image and render them.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        palette: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Decode predictions from the top-N feature maps at a layer.
    Ablate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        topn: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        palette: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Maximum dataset rows rendered into each panel.
        #[arg(long, default_value_t = 6)]
        samples: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("SEGKIT_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(t) = threads {
        if t == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(3);
        }
    }
    let result = match cli.command {
        Command::Synth { config, out } => commands::synth(&config, &out),
        Command::Train {
            config,
            variant,
            from,
            out,
        } => commands::train(&config, variant, from.as_deref(), &out),
        Command::Eval {
            ckpt,
            data,
            config,
            out,
            palette,
        } => commands::eval(&ckpt, &data, config.as_deref(), out.as_deref(), palette.as_deref()),
        Command::Predict {
            ckpt,
            image,
            out,
            palette,
            config,
        } => commands::predict(&ckpt, &image, &out, palette.as_deref(), config.as_deref()),
        Command::Ablate {
            ckpt,
            data,
            layer,
            topn,
            out,
            palette,
            config,
            samples,
        } => commands::ablate(
            &ckpt,
            &data,
            layer,
            topn,
            &out,
            palette.as_deref(),
            config.as_deref(),
            samples,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &SegError) -> u8 {
    match e {
        SegError::Config(_) | SegError::Shape { .. } | SegError::Data(_) => 2,
        SegError::Io(_) | SegError::Parse { .. } | SegError::Corrupt(_) => 3,
        SegError::Numerical(_) | SegError::StaleTrace(_) => 4,
    }
}
