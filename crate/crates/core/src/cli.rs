//! Command-line front end: training, evaluation, question generation, a
//! terminal chat and the HTTP service.

use std::io::{self, BufRead, Write};
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::bleu::corpus_bleu;
use crate::chatbot::{dialogue_vocabulary, ChatbotConfig, ChatbotModel};
use crate::data::{load_dialogue_pairs, load_feature_grid, load_question_dataset_with_grids, pseudo_encoder, save_feature_grid};
use crate::dialogue::{ActionKind, BotAction, Event, Models, Photo, Session, PSEUDO_GRID_ROWS};
use crate::service::{load_models, now_millis, serve, ServiceConfig};
use crate::train::{fine_tune, train, AdamConfig, TrainConfig};
use crate::vocab::tokenize;
use crate::vqg::{question_vocabulary, VqgConfig, VqgModel};

#[derive(Debug, Parser)]
#[command(name = "elisabot", version, about = "Reminiscence dialogue engine")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the question generator on a question dataset.
    TrainVqg(TrainVqgArgs),
    /// Train the feedback chatbot, optionally followed by a fine-tuning phase.
    TrainChatbot(TrainChatbotArgs),
    /// Corpus BLEU-4 of generated (or given) questions against a dataset.
    EvalBleu(EvalBleuArgs),
    /// Rank questions for one photo.
    GenQuestions(GenQuestionsArgs),
    /// Run a session in the terminal.
    Chat(ChatArgs),
    /// Serve sessions over HTTP.
    Serve(ServiceConfig),
    /// Write a deterministic stand-in feature grid for a photo id.
    PseudoFeatures(PseudoFeaturesArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 5.0)]
    pub clip_norm: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train without dropout.
    #[arg(long)]
    pub no_dropout: bool,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_steps: self.steps,
            max_epochs: self.epochs,
            clip_norm: self.clip_norm,
            seed: self.seed,
            adam: AdamConfig {
                learning_rate: self.lr,
                ..AdamConfig::default()
            },
            dropout: !self.no_dropout,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainVqgArgs {
    /// JSONL question dataset.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub embedding_dim: usize,
    #[arg(long, default_value_t = 512)]
    pub lstm_dim: usize,
    #[arg(long, default_value_t = 512)]
    pub attention_dim: usize,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    #[arg(long, default_value_t = 7)]
    pub beam_width: usize,
    #[arg(long, default_value_t = 5)]
    pub outputs_per_image: usize,
    #[arg(long, default_value_t = 6)]
    pub max_question_len: usize,
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct TrainChatbotArgs {
    /// JSONL dialogue pairs for the first phase.
    #[arg(long, required_unless_present = "from")]
    pub dataset: Option<PathBuf>,
    /// Start from an existing chatbot checkpoint instead of training from scratch.
    #[arg(long, conflicts_with = "dataset")]
    pub from: Option<PathBuf>,
    /// Second corpus to fine-tune on after the first phase.
    #[arg(long)]
    pub fine_tune: Option<PathBuf>,
    /// Steps for the fine-tuning phase (defaults to --steps).
    #[arg(long)]
    pub fine_tune_steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 500)]
    pub embedding_dim: usize,
    #[arg(long, default_value_t = 0.25)]
    pub dropout: f64,
    #[arg(long, default_value_t = 12)]
    pub max_reply_len: usize,
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct EvalBleuArgs {
    /// Reference dataset (JSONL question records).
    #[arg(long)]
    pub dataset: PathBuf,
    /// VQG checkpoint whose top-ranked question is the candidate.
    #[arg(long, required_unless_present = "candidates")]
    pub checkpoint: Option<PathBuf>,
    /// Text file with one candidate per dataset record, instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub candidates: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenQuestionsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Feature-grid file of the photo.
    #[arg(long, required_unless_present = "pseudo_id")]
    pub features: Option<PathBuf>,
    /// Pseudo-encode this photo id instead of reading features.
    #[arg(long, conflicts_with = "features")]
    pub pseudo_id: Option<String>,
    #[arg(long, default_value_t = PSEUDO_GRID_ROWS)]
    pub rows: usize,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub outputs: Option<usize>,
    /// Print JSON instead of one line per question.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long, env = "ELISA_VQG_CHECKPOINT")]
    pub vqg_checkpoint: PathBuf,
    #[arg(long, env = "ELISA_CHATBOT_CHECKPOINT")]
    pub chatbot_checkpoint: PathBuf,
    /// Photos as `id` or `id=features.feat`.
    #[arg(long = "photo", required = true, num_args = 1..)]
    pub photos: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PseudoFeaturesArgs {
    #[arg(long)]
    pub id: String,
    #[arg(long, default_value_t = PSEUDO_GRID_ROWS)]
    pub rows: usize,
    #[arg(long, default_value_t = 2048)]
    pub cols: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    init_logging(cli.verbose);
    match cli.command {
        Command::TrainVqg(a) => train_vqg(a),
        Command::TrainChatbot(a) => train_chatbot(a),
        Command::EvalBleu(a) => eval_bleu(a),
        Command::GenQuestions(a) => gen_questions(a),
        Command::Chat(a) => chat(a),
        Command::Serve(config) => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(config))
        }
        Command::PseudoFeatures(a) => {
            let grid = pseudo_encoder(&a.id, a.rows, a.cols)?;
            save_feature_grid(&grid, &a.out)?;
            Ok(())
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        2 => tracing::Level::DEBUG,
        _ => tracing::Level::TRACE,
    };
    let _ = tracing_subscriber::fmt().with_max_level(level).with_writer(io::stderr).try_init();
}

fn train_vqg(a: TrainVqgArgs) -> anyhow::Result<()> {
    let data = load_question_dataset_with_grids(&a.dataset).with_context(|| format!("loading {}", a.dataset.display()))?;
    let Some((_, first)) = data.first() else {
        bail!("dataset {} is empty", a.dataset.display());
    };
    let questions: Vec<&String> = data.iter().flat_map(|(r, _)| &r.questions).collect();
    let vocab = question_vocabulary(&questions, a.min_count)?;
    let config = VqgConfig {
        annotation_dim: first.cols(),
        attention_dim: a.attention_dim,
        embedding_dim: a.embedding_dim,
        lstm_dim: a.lstm_dim,
        dropout: a.dropout,
        beam_width: a.beam_width,
        outputs_per_image: a.outputs_per_image,
        max_question_len: a.max_question_len,
    };
    let mut model = VqgModel::new(config, vocab, a.train.seed)?;
    let examples: Vec<_> = data.iter().flat_map(|(r, g)| model.examples_for(g, &r.questions)).collect();
    let report = train(&mut model, &examples, &a.train.config())?;
    model.save(&a.out)?;
    println!(
        "{}",
        json!({
            "checkpoint": a.out,
            "examples": examples.len(),
            "vocabulary": model.vocab.len(),
            "steps": report.steps(),
            "final_loss": report.final_loss(),
        })
    );
    Ok(())
}

fn train_chatbot(a: TrainChatbotArgs) -> anyhow::Result<()> {
    let train_config = a.train.config();
    let mut summary = serde_json::Map::new();
    let mut model = match (&a.from, &a.dataset) {
        (Some(from), _) => ChatbotModel::load(from).with_context(|| format!("loading {}", from.display()))?,
        (None, Some(dataset)) => {
            let pairs = load_dialogue_pairs(dataset).with_context(|| format!("loading {}", dataset.display()))?;
            let config = ChatbotConfig {
                hidden_dim: a.hidden_dim,
                embedding_dim: a.embedding_dim,
                dropout: a.dropout,
                max_reply_len: a.max_reply_len,
                ..ChatbotConfig::default()
            };
            let mut model = ChatbotModel::new(config, dialogue_vocabulary(&pairs, a.min_count)?, a.train.seed)?;
            let examples = pairs.iter().map(|p| model.example(p)).collect::<crate::Result<Vec<_>>>()?;
            let report = train(&mut model, &examples, &train_config)?;
            summary.insert("steps".into(), json!(report.steps()));
            summary.insert("final_loss".into(), json!(report.final_loss()));
            model
        }
        (None, None) => bail!("either --dataset or --from is required"),
    };
    if let Some(path) = &a.fine_tune {
        let pairs = load_dialogue_pairs(path).with_context(|| format!("loading {}", path.display()))?;
        let before = model.corpus_loss(&pairs)?;
        let config = TrainConfig {
            max_steps: a.fine_tune_steps.unwrap_or(train_config.max_steps),
            ..train_config
        };
        let report = fine_tune(&mut model, &pairs, &config)?;
        let after = model.corpus_loss(&pairs)?;
        summary.insert(
            "fine_tune".into(),
            json!({"steps": report.steps(), "loss_before": before, "loss_after": after}),
        );
    }
    model.save(&a.out)?;
    summary.insert("checkpoint".into(), json!(a.out));
    summary.insert("vocabulary".into(), json!(model.vocab.len()));
    println!("{}", serde_json::Value::Object(summary));
    Ok(())
}

fn eval_bleu(a: EvalBleuArgs) -> anyhow::Result<()> {
    let data = load_question_dataset_with_grids(&a.dataset).with_context(|| format!("loading {}", a.dataset.display()))?;
    let references: Vec<Vec<Vec<String>>> = data
        .iter()
        .map(|(r, _)| r.questions.iter().map(|q| tokenize(q)).collect())
        .collect();
    let candidates: Vec<Vec<String>> = match (&a.checkpoint, &a.candidates) {
        (Some(ck), _) => {
            let model = VqgModel::load(ck).with_context(|| format!("loading {}", ck.display()))?;
            data.iter()
                .map(|(_, g)| {
                    let best = model.beam_search(g)?.into_iter().next();
                    Ok(best.map(|q| tokenize(&q.text)).unwrap_or_default())
                })
                .collect::<crate::Result<_>>()?
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let lines: Vec<Vec<String>> = text.lines().map(tokenize).collect();
            if lines.len() != references.len() {
                bail!("{} candidates for {} dataset records", lines.len(), references.len());
            }
            lines
        }
        (None, None) => bail!("either --checkpoint or --candidates is required"),
    };
    let report = corpus_bleu(&candidates, &references)?;
    let mut value = serde_json::to_value(&report)?;
    value["score_100"] = json!(report.score_100());
    println!("{value}");
    Ok(())
}

fn gen_questions(a: GenQuestionsArgs) -> anyhow::Result<()> {
    let model = VqgModel::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let grid = match (&a.features, &a.pseudo_id) {
        (Some(path), _) => load_feature_grid(path).with_context(|| format!("loading {}", path.display()))?,
        (None, Some(id)) => pseudo_encoder(id, a.rows, model.config.annotation_dim)?,
        (None, None) => bail!("either --features or --pseudo-id is required"),
    };
    let width = a.beam_width.unwrap_or(model.config.beam_width);
    let n = a.outputs.unwrap_or(model.config.outputs_per_image.min(width));
    let questions = model.beam_search_with(&grid, width, n)?;
    let mut out = io::stdout().lock();
    if a.json {
        let rows: Vec<_> = questions
            .iter()
            .map(|q| json!({"text": q.text, "log_prob": q.log_prob, "score": q.score}))
            .collect();
        writeln!(out, "{}", serde_json::Value::Array(rows))?;
    } else {
        for (rank, q) in questions.iter().enumerate() {
            writeln!(out, "{}\t{:.4}\t{}", rank + 1, q.score, q.text)?;
        }
    }
    Ok(())
}

fn parse_photo(arg: &str) -> Photo {
    match arg.split_once('=') {
        Some((id, path)) => Photo::with_features(id, path),
        None => Photo::new(arg),
    }
}

fn print_actions(out: &mut impl Write, actions: &[BotAction]) -> io::Result<()> {
    for a in actions {
        match a.kind {
            ActionKind::ShowPhoto => writeln!(out, "[photo {}] {}", a.photo.as_deref().unwrap_or("?"), a.text)?,
            _ => writeln!(out, "elisabot> {}", a.text)?,
        }
    }
    out.flush()
}

fn chat(a: ChatArgs) -> anyhow::Result<()> {
    let (vqg, chatbot) = load_models(&a.vqg_checkpoint, &a.chatbot_checkpoint)?;
    let photos = a.photos.iter().map(|p| parse_photo(p)).collect();
    let mut session = Session::new("terminal", photos, a.seed, Models::new(vqg, chatbot))?;
    let mut out = io::stdout().lock();
    writeln!(out, "Type /start to begin; /yes, /change and /exit are available.")?;
    for line in io::stdin().lock().lines() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let actions = session.handle_event(&Event::text(text, now_millis()))?;
        print_actions(&mut out, &actions)?;
        if session.is_ended() {
            break;
        }
    }
    Ok(())
}

/// Shared handle for embedding the CLI, e.g. `elisabot::cli::main()`.
pub fn main() -> std::process::ExitCode {
    match run(Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

