use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use onerec::harness::commands::{self as cmd, RunContext};
use onerec::{Error, Result};

#[derive(Parser)]
#[command(name = "onerec", version, about = "Desk-scale single-stage generative recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Root seed; overrides the configuration file.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML configuration; defaults to <out>/config.toml, then built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory holding all artifacts.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Overwrite a run directory with a different configuration and accept
    /// checkpoints written under another configuration.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Clone)]
struct ModelArg {
    /// `seed`, `aligned`, or a checkpoint path.
    #[arg(long, default_value = "seed")]
    model: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic catalog, users and interaction logs.
    Simulate(Common),
    /// Fit the residual k-means codebooks and assign semantic IDs.
    FitTokenizer(Common),
    /// Train the seed generator with next-token prediction.
    TrainSeed(Common),
    /// Train the session reward model on the logs.
    TrainRm(Common),
    /// Iterative preference alignment from the seed checkpoint.
    AlignIpa {
        #[command(flatten)]
        common: Common,
        /// Also write every preference pair to pairs.tsv.
        #[arg(long)]
        dump_pairs: bool,
    },
    /// Reward-model and true-value evaluation on held-out users.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Mean per-level entropy of the decoding distribution.
    EntropyReport {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Held-out loss across model widths.
    SweepScaling(Common),
    /// Alignment outcome across DPO ratios.
    SweepRdpo(Common),
    /// Beam-search sessions for held-out users.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Append reward-model scores to generated sessions.
    Score(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Simulate(c)
            | Command::FitTokenizer(c)
            | Command::TrainSeed(c)
            | Command::TrainRm(c)
            | Command::SweepScaling(c)
            | Command::SweepRdpo(c)
            | Command::Score(c) => c,
            Command::AlignIpa { common, .. }
            | Command::Evaluate { common, .. }
            | Command::EntropyReport { common, .. }
            | Command::Generate { common, .. } => common,
        }
    }
}

fn run(command: Command) -> Result<()> {
    let c = command.common().clone();
    if c.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(c.threads)
            .build_global()
            .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
    }
    let ctx = RunContext::resolve(&c.out, c.config.as_deref(), c.seed, c.force)?;
    let line = |s: &str| println!("{s}");
    let summary = match &command {
        Command::Simulate(_) => cmd::simulate(&ctx)?,
        Command::FitTokenizer(_) => cmd::fit_tokenizer_cmd(&ctx)?,
        Command::TrainSeed(_) => cmd::train_seed(&ctx, |step, loss| {
            if step % 100 == 0 {
                println!("step {step}: train NTP loss {loss:.4}");
            }
        })?,
        Command::TrainRm(_) => cmd::train_rm(&ctx)?,
        Command::AlignIpa { dump_pairs, .. } => cmd::align_ipa(&ctx, *dump_pairs)?,
        Command::Evaluate { model, .. } => cmd::evaluate(&ctx, &model.model)?,
        Command::EntropyReport { model, .. } => {
            let (s, decreasing) = cmd::entropy(&ctx, &model.model)?;
            if !decreasing {
                eprintln!("warning: level-1 entropy does not exceed last-level entropy");
            }
            s
        }
        Command::SweepScaling(_) => cmd::sweep_scaling(&ctx, line)?,
        Command::SweepRdpo(_) => cmd::sweep_rdpo(&ctx, line)?,
        Command::Generate { model, .. } => cmd::generate(&ctx, &model.model)?,
        Command::Score(_) => cmd::score(&ctx)?,
    };
    println!("{summary}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
