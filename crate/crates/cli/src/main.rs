//! `fmtembed`: generate the synthetic suite, train encoders, embed, evaluate and report.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 malformed data,
//! 3 numeric failure (non-finite loss or failed gradient check).

mod artifacts;
mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fmtembed::encoder::{EncoderError, Variant};
use fmtembed::io::IoError;
use fmtembed::trainer::TrainError;

use commands::{EvalArgs, NumericFailure};
use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "fmtembed", version, about = "Format-specific document embeddings on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Training profile: desk or paper.
    #[arg(long)]
    profile: Option<String>,
    /// Seed for corpus, training and probes.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config key, e.g. `--set train.peak_lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let ov = Overrides { profile: self.profile.clone(), seed: self.seed, sets: self.sets.clone() };
        config::load(self.config.as_deref(), &ov)
    }
}

#[derive(Args)]
struct EvalPaths {
    /// Directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Directory written by embed.
    #[arg(long)]
    embeddings: PathBuf,
    /// Second embedding directory; the two are averaged row by row.
    #[arg(long)]
    ensemble: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
    /// Report label (defaults to the embedding directory name).
    #[arg(long)]
    label: Option<String>,
}

impl EvalPaths {
    fn args(&self) -> EvalArgs<'_> {
        EvalArgs {
            data: &self.data,
            embeddings: &self.embeddings,
            ensemble: self.ensemble.as_deref(),
            out: &self.out,
            label: self.label.as_deref(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, training tasks and evaluation suite.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train an encoder variant (pretraining a shared base unless one is given).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Existing base checkpoint to start from.
        #[arg(long)]
        base: Option<PathBuf>,
        /// CLS_ONLY, CTRL, ADAPTER, PALS or FUSION (overrides encoder.variant).
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Write one embedding file per control code for every document and query.
    Embed {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Score embeddings on every evaluation task.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        paths: EvalPaths,
        /// Also compute the format × control-code matrix.
        #[arg(long)]
        cross: bool,
    },
    /// Score each format's sampled task under every control code.
    CrossEval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        paths: EvalPaths,
    },
    /// Finite-difference checks of the autodiff primitives and losses.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Operations per random composite graph.
        #[arg(long, default_value_t = 10)]
        max_ops: usize,
        /// Write a JSON summary here.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Render a saved report.json or cross.json.
    Report {
        input: PathBuf,
        #[arg(long)]
        csv: bool,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<NumericFailure>() {
            return 3;
        }
        if let Some(t) = cause.downcast_ref::<TrainError>() {
            return match t {
                TrainError::NonFinite { .. } => 3,
                TrainError::Config(_) | TrainError::Encoder(EncoderError::Config(_)) => 1,
                _ => 2,
            };
        }
        if let Some(io) = cause.downcast_ref::<IoError>() {
            return match io {
                IoError::Io { .. } => 1,
                IoError::Format { .. } => 2,
            };
        }
        if let Some(enc) = cause.downcast_ref::<EncoderError>() {
            return match enc {
                EncoderError::Config(_) | EncoderError::Io(_) => 1,
                _ => 2,
            };
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let path = |c: &ConfigArgs| c.config.clone();
    match cli.command {
        Command::GenData { cfg, out } => commands::gen_data(&cfg.load()?, path(&cfg).as_deref(), &out),
        Command::Train { cfg, data, out, base, variant } => {
            let mut rc = cfg.load()?;
            if let Some(v) = variant {
                rc.suite.encoder.variant = v;
            }
            commands::train(&rc, path(&cfg).as_deref(), &data, &out, base.as_deref())
        }
        Command::Embed { cfg, data, checkpoint, out } => {
            commands::embed(&cfg.load()?, path(&cfg).as_deref(), &data, &checkpoint, &out)
        }
        Command::Eval { cfg, paths, cross } => commands::eval(&cfg.load()?, path(&cfg).as_deref(), &paths.args(), cross),
        Command::CrossEval { cfg, paths } => commands::cross_eval(&cfg.load()?, path(&cfg).as_deref(), &paths.args()),
        Command::GradCheck { seeds, max_ops, out } => commands::grad_check(seeds, max_ops, out.as_deref()),
        Command::Report { input, csv, out } => commands::report(&input, csv, out.as_deref().map(Path::new)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
