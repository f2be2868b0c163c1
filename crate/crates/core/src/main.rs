use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;

use pecad::cli::{self, RunConfig, Target, EXIT_ERROR, EXIT_OK, EXIT_PE};
use pecad::dataset::{SliceLabel, Split};

#[derive(Debug, Parser)]
#[command(name = "pecad", version, about = "PE detection pipeline: synth, split, train, eval, triage")]
struct Args {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TrainTarget {
    Drn,
    Mixnet,
    Fpnet,
    Segmenter,
}

impl From<TrainTarget> for Target {
    fn from(t: TrainTarget) -> Self {
        match t {
            TrainTarget::Drn => Target::Drn,
            TrainTarget::Mixnet => Target::Mixnet,
            TrainTarget::Fpnet => Target::FpNet,
            TrainTarget::Segmenter => Target::Segmenter,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EvalSplit {
    Val,
    Test,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a phantom cohort and its manifest.
    Synth {
        #[arg(long)]
        pe: Option<usize>,
        #[arg(long)]
        non_pe: Option<usize>,
    },
    /// Assign manifest patients to TRAIN/VAL/TEST.
    Split,
    /// Train one model and write its checkpoint.
    Train {
        #[arg(value_enum)]
        target: TrainTarget,
    },
    /// Score all four pipeline variants on a split.
    Eval {
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
    },
    /// Run the pipeline on one volume. Exit 2 = PE, 0 = non-PE, 1 = error.
    Triage { volume: PathBuf },
}

fn run(args: Args) -> pecad::Result<u8> {
    let mut config = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(dir) = args.output_dir {
        config.output_dir = dir;
    }
    match args.command {
        Command::Synth { pe, non_pe } => {
            if let Some(n) = pe {
                config.phantom.n_pe = n;
            }
            if let Some(n) = non_pe {
                config.phantom.n_non_pe = n;
            }
            config.validate()?;
            println!("{}", cli::cmd_synth(&config)?.display());
        }
        Command::Split => {
            config.validate()?;
            println!("{}", cli::cmd_split(&config)?.display());
        }
        Command::Train { target } => {
            config.validate()?;
            println!("{}", cli::cmd_train(&config, target.into())?.display());
        }
        Command::Eval { split } => {
            config.validate()?;
            let split = match split {
                EvalSplit::Val => Split::Val,
                EvalSplit::Test => Split::Test,
            };
            println!("{}", cli::cmd_eval(&config, split)?.display());
        }
        Command::Triage { volume } => {
            config.validate()?;
            let (report, path) = cli::cmd_triage(&config, &volume)?;
            println!("{}", path.display());
            return Ok(if report.verdict == SliceLabel::Pe { EXIT_PE } else { EXIT_OK });
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap's own usage-error status (2) would read as a PE verdict
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_ERROR } else { EXIT_OK });
        }
    };
    match run(args) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            eprintln!("pecad: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
