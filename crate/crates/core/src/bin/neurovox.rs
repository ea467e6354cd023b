use clap::{Args, Parser, Subcommand, ValueEnum};
use neurovox_core::cli::{self, CliError, CliResult, Overrides, Profile, RunConfig};
use neurovox_core::experiment::Arch;
use std::path::PathBuf;
use std::process::ExitCode;

/// Speech decoding from intracranial recordings: data, training,
/// evaluation and synthesis.
///
/// Every subcommand writes into a fresh run directory named by timestamp
/// and configuration hash, with a `run.json` manifest echoing the resolved
/// configuration. NEUROVOX_THREADS caps the worker threads; RUST_LOG sets
/// log verbosity.
#[derive(Parser)]
#[command(name = "neurovox", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Seq2seq,
    Densenet,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Seq2seq => Arch::Seq2Seq,
            ArchArg::Densenet => Arch::DenseNet,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
        }
    }
}

#[derive(Args)]
struct Common {
    /// JSON configuration; keys override the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Size profile the configuration starts from [default: desk].
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    /// Parent of the run directory.
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct Seed {
    /// Seed for initialisation, data generation and permutations.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Model {
    /// Architecture to train.
    #[arg(long, value_enum)]
    arch: Option<ArchArg>,
    /// Neural context on each side of a window, in ms.
    #[arg(long)]
    padding_ms: Option<f64>,
}

#[derive(Args)]
struct Runs {
    /// Number of consecutive seeds, starting at --seed.
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Args)]
struct Recording {
    /// Session manifest (JSON) of the recording.
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic recording with known ground truth.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seed: Seed,
    },
    /// Extract standardised high-gamma features and log-mel targets.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        recording: Recording,
    },
    /// Train one model per seed and score it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        recording: Recording,
        #[command(flatten)]
        seed: Seed,
        #[command(flatten)]
        model: Model,
        #[command(flatten)]
        runs: Runs,
    },
    /// Score a checkpoint on one split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        recording: Recording,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to score.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Predict the test split and vocode it to a WAV file.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seed: Seed,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Session manifest (JSON) or bare neural file (SGV1).
        #[arg(long)]
        input: PathBuf,
        /// File name of the WAV inside the run directory.
        #[arg(long, default_value = "synthesized.wav")]
        out: String,
    },
    /// Test MSE across context paddings with paired tests.
    AblatePadding {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        recording: Recording,
        #[command(flatten)]
        seed: Seed,
        #[command(flatten)]
        model: Model,
        #[command(flatten)]
        runs: Runs,
    },
    /// Validation r across training-set fractions.
    AblateSize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        recording: Recording,
        #[command(flatten)]
        seed: Seed,
        #[command(flatten)]
        model: Model,
        #[command(flatten)]
        runs: Runs,
    },
    /// Grid search of the learning rate on the validation split.
    LrSearch {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        recording: Recording,
        #[command(flatten)]
        seed: Seed,
        #[command(flatten)]
        model: Model,
    },
    /// Test whether the neural channels carry the audio itself.
    ContaminationCheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        recording: Recording,
        #[command(flatten)]
        seed: Seed,
    },
    /// Mean attention matrix of a seq2seq checkpoint over one split.
    AttentionPlot {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        recording: Recording,
        /// Checkpoint written by `train --arch seq2seq`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to average over.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

fn resolve(common: &Common, seed: Option<&Seed>, model: Option<&Model>, runs: Option<&Runs>) -> CliResult<RunConfig> {
    let o = Overrides {
        profile: common.profile.map(|p| match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }),
        seed: seed.and_then(|s| s.seed),
        arch: model.and_then(|m| m.arch).map(Arch::from),
        padding_ms: model.and_then(|m| m.padding_ms),
        runs: runs.and_then(|r| r.runs),
    };
    RunConfig::resolve(common.config.as_deref(), &o)
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("NEUROVOX_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("NEUROVOX_THREADS={v} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn dispatch(cmd: Command) -> CliResult<PathBuf> {
    init_threads()?;
    match cmd {
        Command::SynthData { common, seed } => {
            let rc = resolve(&common, Some(&seed), None, None)?;
            cli::synth_data(&rc, &common.out_dir)
        }
        Command::Preprocess { common, recording } => {
            let rc = resolve(&common, None, None, None)?;
            cli::preprocess(&rc, &recording.manifest, &common.out_dir)
        }
        Command::Train { common, recording, seed, model, runs } => {
            let rc = resolve(&common, Some(&seed), Some(&model), Some(&runs))?;
            cli::train(&rc, &recording.manifest, &common.out_dir)
        }
        Command::Evaluate { common, recording, checkpoint, split } => {
            let rc = resolve(&common, None, None, None)?;
            cli::evaluate(&rc, &checkpoint, &recording.manifest, split.name(), &common.out_dir)
        }
        Command::Synthesize { common, seed, checkpoint, input, out } => {
            let rc = resolve(&common, Some(&seed), None, None)?;
            cli::synthesize(&rc, &checkpoint, &input, &out, &common.out_dir)
        }
        Command::AblatePadding { common, recording, seed, model, runs } => {
            let rc = resolve(&common, Some(&seed), Some(&model), Some(&runs))?;
            cli::ablate_padding(&rc, &recording.manifest, &common.out_dir)
        }
        Command::AblateSize { common, recording, seed, model, runs } => {
            let rc = resolve(&common, Some(&seed), Some(&model), Some(&runs))?;
            cli::ablate_size(&rc, &recording.manifest, &common.out_dir)
        }
        Command::LrSearch { common, recording, seed, model } => {
            let rc = resolve(&common, Some(&seed), Some(&model), None)?;
            cli::lr_search(&rc, &recording.manifest, &common.out_dir)
        }
        Command::ContaminationCheck { common, recording, seed } => {
            let rc = resolve(&common, Some(&seed), None, None)?;
            cli::contamination_check(&rc, &recording.manifest, &common.out_dir)
        }
        Command::AttentionPlot { common, recording, checkpoint, split } => {
            let rc = resolve(&common, None, None, None)?;
            cli::attention_plot(&rc, &checkpoint, &recording.manifest, split.name(), &common.out_dir)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("neurovox: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
