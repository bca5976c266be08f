use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(name = "dfmed", version, about = "Dual-flow medical dialogue: corpus, training, evaluation and chat")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic KG, corpus and oracle record.
    GenCorpus(GenCorpusArgs),
    /// Train the dual-flow model and write a checkpoint.
    TrainFlow(TrainFlowArgs),
    /// Fit per-act thresholds on the validation split.
    Calibrate(CalibrateArgs),
    /// Train the response generator guided by a frozen flow checkpoint.
    TrainGen(TrainGenArgs),
    /// Evaluate checkpoints on the test split.
    Eval(EvalArgs),
    /// Print per-turn scores, act probabilities and gate statistics.
    Inspect(InspectArgs),
    /// Turn-by-turn consultation on stdin.
    Chat(ChatArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat JSON config of training/flow/generator/corpus fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct FlowAblations {
    #[arg(long)]
    pub no_act_flow: bool,
    #[arg(long)]
    pub no_entity_flow: bool,
    #[arg(long)]
    pub no_interweave: bool,
    #[arg(long)]
    pub no_e2a: bool,
    #[arg(long)]
    pub no_a2e: bool,
    /// Named ablation: no-act-flow, no-entity-flow, no-flow, no-interweave,
    /// no-e2a, no-a2e or no-guidance. Repeatable.
    #[arg(long = "ablate", value_name = "NAME")]
    pub ablate: Vec<String>,
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory (kg.tsv, corpus.jsonl, oracle.json).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_dialogues: Option<usize>,
    #[arg(long)]
    pub n_entities: Option<usize>,
    #[arg(long)]
    pub degree: Option<usize>,
    #[arg(long)]
    pub p_hop: Option<f64>,
    #[arg(long)]
    pub min_rounds: Option<usize>,
    #[arg(long)]
    pub max_rounds: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainOverrides {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Validation examples scored per epoch (generator only).
    #[arg(long)]
    pub valid_limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainFlowArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corpus directory written by gen-corpus.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
    #[arg(long)]
    pub topk: Option<usize>,
    #[command(flatten)]
    pub ablations: FlowAblations,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Flow checkpoint, updated in place.
    #[arg(long)]
    pub flow: PathBuf,
    /// Comma-separated thresholds (default 0.05, 0.10, ..., 0.95).
    #[arg(long, value_delimiter = ',')]
    pub threshold_grid: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct TrainGenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Frozen flow checkpoint providing the entity guidance.
    #[arg(long)]
    pub flow: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
    #[arg(long)]
    pub no_guidance: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub flow: PathBuf,
    #[arg(long)]
    pub gen: Option<PathBuf>,
    #[arg(long)]
    pub topk: Option<usize>,
    /// EvalReport JSON output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Prediction dump (JSONL).
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub no_guidance: bool,
    #[command(flatten)]
    pub ablations: FlowAblations,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub flow: PathBuf,
    #[arg(long)]
    pub gen: Option<PathBuf>,
    /// Dialogue id (default: first test dialogue).
    #[arg(long)]
    pub dialogue: Option<String>,
    /// Candidates printed per turn.
    #[arg(long, default_value_t = 5)]
    pub show: usize,
}

#[derive(Args, Debug)]
pub struct ChatArgs {
    /// Knowledge graph TSV (or a gen-corpus directory).
    #[arg(long)]
    pub kg: PathBuf,
    #[arg(long)]
    pub flow: PathBuf,
    #[arg(long)]
    pub gen: Option<PathBuf>,
    #[arg(long)]
    pub topk: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    let f64_mode = std::env::var("DFMED_F64").is_ok_and(|v| v == "1");
    let res = match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(a),
        Command::TrainFlow(a) if f64_mode => commands::train_flow::<f64>(a, true),
        Command::TrainFlow(a) => commands::train_flow::<f32>(a, false),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::TrainGen(a) if f64_mode => commands::train_gen::<f64>(a, true),
        Command::TrainGen(a) => commands::train_gen::<f32>(a, false),
        Command::Eval(a) => commands::eval(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Chat(a) => commands::chat(a, std::io::stdin().lock(), std::io::stdout().lock()),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
