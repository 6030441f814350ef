mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::UsageError;

#[derive(Debug, Parser)]
#[command(
    name = "mfse",
    version,
    about = "Average-velocity flow speech enhancement toolkit"
)]
struct Cli {
    /// Root for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic paired corpus and its manifests.
    GenCorpus(GenCorpusArgs),
    /// Train a field network on a generated corpus.
    Train(TrainArgs),
    /// Enhance one file or every noisy file of a manifest.
    Enhance(EnhanceArgs),
    /// Run the analytic-oracle self-check suite.
    Verify(VerifyArgs),
    /// Quality and real-time factor versus NFE.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long, default_value = "corpus")]
    pub out: PathBuf,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Utterance length in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "corpus")]
    pub corpus: PathBuf,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this step; the learning-rate schedule still spans `--steps`.
    #[arg(long)]
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Displacement,
    Euler,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Single noisy WAV file.
    #[arg(
        long,
        conflicts_with = "manifest",
        required_unless_present = "manifest"
    )]
    pub input: Option<PathBuf>,
    /// JSON-lines manifest; clean references enable metrics.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output WAV for `--input`, output directory for `--manifest`.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub nfe: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MutationArg {
    None,
    FlipSign,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Only the sub-second checks.
    #[arg(long)]
    pub quick: bool,
    #[arg(long, hide = true, value_enum, default_value = "none")]
    pub mutate: MutationArg,
    #[arg(long, default_value = "verify_report.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "corpus/test.jsonl")]
    pub manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 5, 10, 20])]
    pub nfe: Vec<usize>,
    /// Utterances scored per NFE.
    #[arg(long, default_value_t = 4)]
    pub utterances: usize,
    /// Timed runs per RTF measurement (at least 10).
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long, default_value = "bench")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
