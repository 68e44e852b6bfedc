//! `echoprobe` command line: drives the pipeline stage by stage against an
//! output directory.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing upstream
//! artifact, 4 numerical failure, 1 anything else (including an output
//! directory locked by another run).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use echoprobe_cli::config::RunConfig;
use echoprobe_cli::io::{LockHeld, OutLock, Paths};
use echoprobe_cli::pipeline;
use echoprobe_core::error::Error;

#[derive(Debug, Parser)]
#[command(
    name = "echoprobe",
    about = "Synthetic multi-turn recall experiments on an instrumented toy transformer",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct CommonArgs {
    /// Path to a run configuration JSON file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory holding all pipeline artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the acting stage's primary seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
struct GenArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of event classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Comma-separated context lengths, e.g. `2,4,8,16`.
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    /// Trials per (class-set, length, kind) cell.
    #[arg(long)]
    per_cell: Option<usize>,
    /// Anchor mixing ratio in [0, 1).
    #[arg(long)]
    mix: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the main evaluation corpus.
    Gen(GenArgs),
    /// Build the training corpus and train the model.
    Train(CommonArgs),
    /// Run the model over the corpus and store traces and outcomes.
    Capture(CommonArgs),
    /// Layer-wise linear probing of stored traces.
    Probe(CommonArgs),
    /// Failed-versus-success representation similarity.
    Cka(CommonArgs),
    /// Decoding-row attention statistics.
    Attn(CommonArgs),
    /// Donor-state patching experiments.
    Patch(CommonArgs),
    /// Attention-mask edit experiments.
    Mask(CommonArgs),
    /// Assemble stored artifacts into the final report.
    Report(CommonArgs),
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Gen(a) => &a.common,
            Command::Train(c)
            | Command::Capture(c)
            | Command::Probe(c)
            | Command::Cka(c)
            | Command::Attn(c)
            | Command::Patch(c)
            | Command::Mask(c)
            | Command::Report(c) => c,
        }
    }

}

/// Applies CLI overrides to the loaded configuration. `--seed` retargets
/// only the acting stage's primary seed.
fn apply_overrides(cfg: &mut RunConfig, cmd: &Command) {
    let common = cmd.common();
    if let Some(seed) = common.seed {
        match cmd {
            Command::Gen(_) => cfg.corpus.master_seed = seed,
            Command::Train(_) => cfg.train.seed = seed,
            Command::Probe(_) => cfg.probe.random_state = seed,
            Command::Cka(_) => cfg.cka.seed = seed,
            Command::Attn(_) => cfg.attn.seed = seed,
            Command::Patch(_) | Command::Mask(_) => cfg.interventions.seed = seed,
            Command::Capture(_) | Command::Report(_) => {}
        }
    }
    if let Command::Gen(g) = cmd {
        if let Some(classes) = g.classes {
            cfg.corpus.classes = classes;
        }
        if let Some(lengths) = &g.lengths {
            cfg.corpus.lengths = lengths.clone();
        }
        if let Some(per_cell) = g.per_cell {
            cfg.corpus.per_cell = per_cell;
        }
        if let Some(mix) = g.mix {
            cfg.corpus.mix_ratio = mix;
        }
    }
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(raw) = std::env::var("ECHOPROBE_THREADS") {
        let threads: usize = raw
            .parse()
            .map_err(|_| Error::config(format!("ECHOPROBE_THREADS must be a positive integer, got `{raw}`")))?;
        if threads == 0 {
            return Err(Error::config("ECHOPROBE_THREADS must be a positive integer, got `0`").into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<String> {
    init_threads()?;
    let common = cli.command.common().clone();
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    apply_overrides(&mut cfg, &cli.command);
    let paths = Paths::new(&common.out);
    let _lock = OutLock::acquire(&paths.out)?;
    let summary = match &cli.command {
        Command::Gen(_) => pipeline::stage_gen(&cfg, &paths)?,
        Command::Train(_) => pipeline::stage_train(&cfg, &paths)?,
        Command::Capture(_) => pipeline::stage_capture(&cfg, &paths)?,
        Command::Probe(_) => pipeline::stage_probe(&cfg, &paths)?,
        Command::Cka(_) => pipeline::stage_cka(&cfg, &paths)?,
        Command::Attn(_) => pipeline::stage_attn(&cfg, &paths)?,
        Command::Patch(_) => pipeline::stage_patch(&cfg, &paths)?,
        Command::Mask(_) => pipeline::stage_mask(&cfg, &paths)?,
        Command::Report(_) => pipeline::stage_report(&cfg, &paths)?,
    };
    Ok(summary)
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<LockHeld>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) | Some(Error::UnsatisfiableCell { .. }) => 2,
        Some(Error::MissingArtifact { .. }) => 3,
        Some(Error::Numeric(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
