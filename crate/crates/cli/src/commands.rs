use std::fs::File;
use std::io::{self, BufWriter};
use std::path::Path;
use std::time::Duration;

use coral_core::checkpoint::CheckpointError;
use coral_core::data::{self, filter_split, ingest_csv, prepare_examples, Blocklist, DataError, Dialogue, Split};
use coral_core::metrics::evaluate;
use coral_core::synthetic::{write_csv, SyntheticCorpus};
use coral_core::train::{CheckpointKind, TrainError};
use coral_core::{train_bpe, DecoderWeights, ModelConfig, Strategy, TrainConfig, Vocabulary};
use coral_service::{LoadedModel, ServiceConfig, ServiceError};
use serde::Deserialize;

use crate::{
    ChatArgs, EvalArgs, Failure, GenerateArgs, ModelArgs, PrepareArgs, ServeArgs, SynthArgs, TokenizerArgs,
    TrainArgs,
};

fn require(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::data(format!("no such file: {}", path.display())))
    }
}

fn data_error(e: DataError) -> Failure {
    match e {
        DataError::Io(e) => Failure::runtime(e),
        other => Failure::data(other),
    }
}

fn write_failed(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::runtime(format!("cannot write {}: {e}", path.display()))
}

fn load_vocab(path: &Path) -> Result<Vocabulary, Failure> {
    require(path)?;
    Vocabulary::load(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn load_dialogues(csv: &Path, split: Option<Split>, blocklist: Option<&Blocklist>) -> Result<Vec<Dialogue>, Failure> {
    require(csv)?;
    let report = ingest_csv(csv, blocklist).map_err(data_error)?;
    if report.skipped_rows + report.incomplete_dialogues + report.blocked_dialogues > 0 {
        eprintln!(
            "skipped {} rows, {} incomplete and {} blocked dialogues",
            report.skipped_rows, report.incomplete_dialogues, report.blocked_dialogues
        );
    }
    Ok(match split {
        Some(s) => filter_split(report.dialogues, s),
        None => report.dialogues,
    })
}

fn load_model(args: &ModelArgs) -> Result<LoadedModel, Failure> {
    require(&args.ckpt)?;
    require(&args.vocab)?;
    LoadedModel::from_files(&args.ckpt, &args.vocab).map_err(|e| match &e {
        ServiceError::Io(_)
        | ServiceError::Checkpoint {
            source: CheckpointError::Io(_),
            ..
        } => Failure::runtime(e),
        _ => Failure::data(e),
    })
}

pub fn synth_data(args: SynthArgs, seed: Option<u64>) -> Result<(), Failure> {
    if args.min_turns > args.max_turns {
        return Err(Failure::usage("--min-turns exceeds --max-turns"));
    }
    let corpus = SyntheticCorpus {
        dialogues: args.dialogues,
        min_turns: args.min_turns as usize,
        max_turns: args.max_turns as usize,
        seed: seed.unwrap_or(0),
    }
    .generate();
    let file = File::create(&args.out).map_err(|e| write_failed(&args.out, e))?;
    write_csv(&corpus, BufWriter::new(file)).map_err(|e| write_failed(&args.out, e))?;
    println!("dialogues: {}", corpus.len());
    Ok(())
}

pub fn tokenizer_train(args: TokenizerArgs) -> Result<(), Failure> {
    let dialogues = load_dialogues(&args.csv, args.split, None)?;
    let texts: Vec<&str> = dialogues.iter().flat_map(|d| d.turns.iter().map(|t| t.text.as_str())).collect();
    let trained = train_bpe(&texts, args.vocab_size as usize).map_err(Failure::data)?;
    if !trained.reached_target {
        eprintln!("corpus ran out of repeated pairs before {} tokens", args.vocab_size);
    }
    trained.vocab.save(&args.out).map_err(|e| write_failed(&args.out, e))?;
    println!("vocab: {} tokens", trained.vocab.len());
    Ok(())
}

pub fn data_prepare(args: PrepareArgs) -> Result<(), Failure> {
    let vocab = load_vocab(&args.vocab)?;
    let blocklist = match &args.blocklist {
        Some(p) => {
            require(p)?;
            Some(Blocklist::load(p).map_err(data_error)?)
        }
        None => None,
    };
    let dialogues = load_dialogues(&args.csv, args.split, blocklist.as_ref())?;
    let report = prepare_examples(&dialogues, args.window as usize, &vocab, args.max_seq_len as usize);
    data::save_jsonl(&report.examples, &args.out).map_err(|e| write_failed(&args.out, e))?;
    println!("examples: {}", report.examples.len());
    if report.discarded + report.truncated_context + report.truncated_response > 0 {
        eprintln!(
            "discarded {}, context truncated in {}, response truncated in {}",
            report.discarded, report.truncated_context, report.truncated_response
        );
    }
    Ok(())
}

/// `[model]` table: a preset plus optional overrides. The vocabulary size
/// always comes from the vocabulary file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    preset: Option<String>,
    n_layers: Option<usize>,
    n_heads: Option<usize>,
    d_model: Option<usize>,
    d_ff: Option<usize>,
    max_seq_len: Option<usize>,
    dropout_rate: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelSection,
    train: TrainConfig,
}

impl ModelSection {
    fn resolve(&self, vocab_size: usize) -> Result<ModelConfig, Failure> {
        let preset = self.preset.as_deref().unwrap_or("toy");
        let base = ModelConfig::preset(preset, vocab_size)
            .ok_or_else(|| Failure::data(format!("unknown model preset {preset:?}")))?;
        let cfg = ModelConfig {
            n_layers: self.n_layers.unwrap_or(base.n_layers),
            n_heads: self.n_heads.unwrap_or(base.n_heads),
            d_model: self.d_model.unwrap_or(base.d_model),
            d_ff: self.d_ff.unwrap_or(base.d_ff),
            vocab_size,
            max_seq_len: self.max_seq_len.unwrap_or(base.max_seq_len),
            dropout_rate: self.dropout_rate.unwrap_or(base.dropout_rate),
        };
        cfg.validate().map_err(Failure::data)?;
        Ok(cfg)
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    require(path)?;
    let text = std::fs::read_to_string(path).map_err(Failure::runtime)?;
    toml::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

pub fn train(args: TrainArgs, seed: Option<u64>) -> Result<(), Failure> {
    let mut run = load_run_config(args.config.as_deref())?;
    if let Some(s) = seed {
        run.train.seed = s;
    }
    let vocab = load_vocab(&args.vocab)?;
    require(&args.examples)?;
    let examples = data::load_training_examples(&args.examples, &vocab).map_err(data_error)?;
    let model = run.model.resolve(vocab.len())?;
    let weights = DecoderWeights::init(model, run.train.seed).map_err(Failure::data)?;
    eprintln!(
        "training {} parameters on {} examples",
        weights.num_params(),
        examples.len()
    );

    let out = args.out.clone();
    let mut seen = 0;
    let on_checkpoint = |kind: CheckpointKind, ckpt: &coral_core::Checkpoint| {
        if let CheckpointKind::Epoch(epoch) = kind {
            let losses = &ckpt.loss_history[seen..];
            seen = ckpt.loss_history.len();
            let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
            eprintln!("epoch {epoch}: {} steps, mean loss {mean:.4}", losses.len());
            if args.epoch_checkpoints {
                let path = out.with_extension(format!("epoch{epoch}"));
                ckpt.save(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            }
        }
        Ok(())
    };
    let ckpt = match coral_core::train::train(weights, &examples, &run.train, Some(vocab.content_hash()), on_checkpoint) {
        Ok(c) => c,
        Err(TrainError::Config(m)) => return Err(Failure::data(m)),
        Err(TrainError::NonFiniteLoss { step, loss, last_good }) => {
            last_good.save(&args.out).map_err(|e| write_failed(&args.out, e))?;
            return Err(Failure::runtime(format!(
                "loss became {loss} at step {step}; last good checkpoint written to {}",
                args.out.display()
            )));
        }
        Err(e) => return Err(Failure::runtime(e)),
    };
    ckpt.save(&args.out).map_err(|e| write_failed(&args.out, e))?;
    println!("steps: {}", ckpt.step);
    if let Some(last) = ckpt.loss_history.last() {
        println!("final loss: {last:.6}");
    }
    Ok(())
}

pub fn eval(args: EvalArgs, seed: Option<u64>) -> Result<(), Failure> {
    let model = load_model(&args.model)?;
    require(&args.examples)?;
    let mut examples = data::load_training_examples(&args.examples, &model.vocab).map_err(data_error)?;
    if let Some(n) = args.limit {
        examples.truncate(n);
    }
    let decode = args.decode.resolve(Strategy::Greedy, seed);
    let report = evaluate(&*model.weights, &examples, &decode, model.vocab.end_of_text()).map_err(Failure::runtime)?;
    if let Some(path) = &args.report {
        std::fs::write(path, report.to_json() + "\n").map_err(|e| write_failed(path, e))?;
    }
    print!("{report}");
    Ok(())
}

pub fn generate(args: GenerateArgs, seed: Option<u64>) -> Result<(), Failure> {
    let model = load_model(&args.model)?;
    let decode = args.decode.resolve(Strategy::TopK, seed);
    let context = data::arrange_texts(args.turns.iter().map(String::as_str), &model.vocab);
    let ids = coral_core::generate(&*model.weights, &context, &decode, model.vocab.end_of_text())
        .map_err(Failure::runtime)?;
    println!("{}", model.vocab.decode(&ids).map_err(Failure::runtime)?);
    Ok(())
}

pub fn chat(args: ChatArgs, seed: Option<u64>) -> Result<(), Failure> {
    let model = load_model(&args.model)?;
    let decode = args.decode.resolve(Strategy::TopK, seed);
    decode.validate(model.vocab.len()).map_err(Failure::usage)?;
    let options = crate::repl::ReplOptions {
        window: args.window as usize,
        decode,
        debug_context: args.debug_context,
        prompt: io::IsTerminal::is_terminal(&io::stdin()),
    };
    let stdin = io::stdin().lock();
    let stdout = io::stdout().lock();
    crate::repl::run(stdin, stdout, &model, &options).map_err(Failure::runtime)
}

pub fn serve(args: ServeArgs, seed: Option<u64>) -> Result<(), Failure> {
    require(&args.model.ckpt)?;
    require(&args.model.vocab)?;
    let config = ServiceConfig {
        host: args.host,
        port: args.port,
        checkpoint_path: args.model.ckpt.clone(),
        vocab_path: args.model.vocab.clone(),
        context_window: args.window as usize,
        decode: args.decode.resolve(Strategy::TopK, seed),
        max_sessions: args.max_sessions as usize,
        session_ttl: Duration::from_secs(args.session_ttl),
        cors_origins: args.cors_origins.into_iter().filter(|o| !o.is_empty()).collect(),
    };
    config.validate().map_err(Failure::usage)?;
    let runtime = tokio::runtime::Runtime::new().map_err(Failure::runtime)?;
    runtime.block_on(coral_service::serve(config)).map_err(|e| match e {
        ServiceError::Checkpoint { .. } | ServiceError::Vocabulary { .. } | ServiceError::VocabularyMismatch { .. } => {
            Failure::data(e)
        }
        ServiceError::Config(_) => Failure::usage(e),
        ServiceError::Io(_) => Failure::runtime(e),
    })
}
