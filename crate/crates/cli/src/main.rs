//! `coral`: tokenizer training, data preparation, training, evaluation,
//! generation, terminal chat and HTTP serving.
//!
//! Exit codes: 0 success, 1 usage, 2 bad or missing input, 3 runtime failure.

mod commands;
mod repl;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use coral_core::data::Split;
use coral_core::{DecodeConfig, Strategy};

#[derive(Debug, Parser)]
#[command(name = "coral", version, about = "Empathetic multi-turn dialogue model")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, env = "CORAL_SEED")]
    seed: Option<u64>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus in the EmpatheticDialogues CSV layout.
    SynthData(SynthArgs),
    /// Train a byte-level BPE vocabulary on the turns of a dialogue CSV.
    TokenizerTrain(TokenizerArgs),
    /// Segment dialogues into context windows and write JSON-lines examples.
    DataPrepare(PrepareArgs),
    /// Fine-tune a model on prepared examples.
    Train(TrainArgs),
    /// Report perplexity and BLEU for a checkpoint.
    Eval(EvalArgs),
    /// Generate one reply to the given context turns.
    Generate(GenerateArgs),
    /// Chat with a checkpoint in the terminal.
    Chat(ChatArgs),
    /// Serve the chat API over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, env = "CORAL_CSV")]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    dialogues: usize,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    min_turns: u64,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    max_turns: u64,
}

#[derive(Debug, Args)]
struct TokenizerArgs {
    #[arg(long, env = "CORAL_CSV")]
    csv: PathBuf,
    #[arg(long, env = "CORAL_VOCAB")]
    out: PathBuf,
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(259..))]
    vocab_size: u64,
    /// Fit on one split only.
    #[arg(long)]
    split: Option<Split>,
}

#[derive(Debug, Args)]
struct PrepareArgs {
    #[arg(long, env = "CORAL_CSV")]
    csv: PathBuf,
    #[arg(long, env = "CORAL_VOCAB")]
    vocab: PathBuf,
    /// Number of context turns before each response.
    #[arg(long, env = "CORAL_WINDOW", default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    window: u64,
    #[arg(long, env = "CORAL_EXAMPLES")]
    out: PathBuf,
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u64).range(2..))]
    max_seq_len: u64,
    #[arg(long)]
    split: Option<Split>,
    /// File of terms, one per line; dialogues containing any are dropped.
    #[arg(long)]
    blocklist: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, env = "CORAL_EXAMPLES")]
    examples: PathBuf,
    #[arg(long, env = "CORAL_VOCAB")]
    vocab: PathBuf,
    /// TOML file with optional `[model]` and `[train]` tables.
    #[arg(long, env = "CORAL_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "CORAL_CKPT")]
    out: PathBuf,
    /// Also write `<out>.epoch<N>` after every epoch.
    #[arg(long)]
    epoch_checkpoints: bool,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long, env = "CORAL_CKPT")]
    ckpt: PathBuf,
    #[arg(long, env = "CORAL_VOCAB")]
    vocab: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Greedy,
    TopK,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
}

impl DecodeArgs {
    fn resolve(&self, default: Strategy, seed: Option<u64>) -> DecodeConfig {
        let base = DecodeConfig::default();
        DecodeConfig {
            strategy: match self.strategy {
                Some(StrategyArg::Greedy) => Strategy::Greedy,
                Some(StrategyArg::TopK) => Strategy::TopK,
                None => default,
            },
            top_k: self.top_k.unwrap_or(base.top_k),
            temperature: self.temperature.unwrap_or(base.temperature),
            max_new_tokens: self.max_new_tokens.unwrap_or(base.max_new_tokens),
            seed: seed.unwrap_or(base.seed),
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, env = "CORAL_EXAMPLES")]
    examples: PathBuf,
    /// Where to write the JSON report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Evaluate only the first N examples.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// A context turn, oldest first. Repeat for more turns.
    #[arg(long = "turn", required = true)]
    turns: Vec<String>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Debug, Args)]
struct ChatArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, env = "CORAL_WINDOW", default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    window: u64,
    /// Print the decoded model context before every reply.
    #[arg(long)]
    debug_context: bool,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, env = "CORAL_HOST", default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    #[arg(long, env = "CORAL_PORT", default_value_t = 8080, value_parser = clap::value_parser!(u16).range(1..))]
    port: u16,
    #[arg(long, env = "CORAL_WINDOW", default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    window: u64,
    #[arg(long, default_value_t = 1024, value_parser = clap::value_parser!(u64).range(1..))]
    max_sessions: u64,
    /// Idle time in seconds before a session is dropped.
    #[arg(long, default_value_t = 1800)]
    session_ttl: u64,
    /// Browser origin allowed to call the API. Repeatable.
    #[arg(long = "cors-origin", env = "CORAL_CORS_ORIGINS", value_delimiter = ',', default_value = "http://localhost:5173")]
    cors_origins: Vec<String>,
    #[command(flatten)]
    decode: DecodeArgs,
}

/// A failed command: message for stderr plus the process exit code.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn usage(message: impl ToString) -> Self {
        Self { code: 1, message: message.to_string() }
    }

    pub fn data(message: impl ToString) -> Self {
        Self { code: 2, message: message.to_string() }
    }

    pub fn runtime(message: impl ToString) -> Self {
        Self { code: 3, message: message.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            eprint!("{rendered}");
            if !rendered.contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();

    let seed = cli.seed;
    let result = match cli.command {
        Command::SynthData(a) => commands::synth_data(a, seed),
        Command::TokenizerTrain(a) => commands::tokenizer_train(a),
        Command::DataPrepare(a) => commands::data_prepare(a),
        Command::Train(a) => commands::train(a, seed),
        Command::Eval(a) => commands::eval(a, seed),
        Command::Generate(a) => commands::generate(a, seed),
        Command::Chat(a) => commands::chat(a, seed),
        Command::Serve(a) => commands::serve(a, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
