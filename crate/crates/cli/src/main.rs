use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mpdqa::corpus::{assemble, build_vocab, generate_synthetic, load_corpus, save_corpus, Limits, SynthSpec, Vocabulary};
use mpdqa::decode::ParsePrediction;
use mpdqa::eval::evaluate;
use mpdqa::objective::Mode;
use mpdqa::pipeline::{parse_example, predict_corpus};
use mpdqa::train::{train, Checkpoint, TrainConfig};
use serde_json::Value;

/// Joint question answering and discourse parsing for multi-party dialogue.
#[derive(Parser)]
#[command(name = "mpdqa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best checkpoint.
    Train(Box<TrainArgs>),
    /// Score prediction files against a gold corpus.
    Eval(EvalArgs),
    /// Predict answers (and trees) for a corpus.
    Predict(PredictArgs),
    /// Predict discourse trees only.
    Parse(PredictArgs),
    /// Write a synthetic corpus.
    GenSynth(SynthArgs),
    /// Print an assembled example.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus (JSON).
    #[arg(long)]
    train: PathBuf,
    /// Development corpus used for model selection; the training set is used when absent.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Where the best checkpoint goes.
    #[arg(long)]
    out: PathBuf,
    /// Line-delimited JSON metric log; stderr when absent.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also save the state after the last epoch here.
    #[arg(long)]
    last: Option<PathBuf>,
    /// JSON file with any subset of the training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Vocabulary file (one token per line) instead of building one.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<f64>,
    #[arg(long)]
    qa_weight: Option<f64>,
    /// joint, qa-only or dp-only.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    dp_dropout: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    tau: Option<f64>,
    #[arg(long)]
    max_answer_tokens: Option<usize>,
    #[arg(long)]
    strict_eq3_averaging: bool,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    min_count: Option<usize>,
    #[arg(long)]
    max_seq: Option<usize>,
    #[arg(long)]
    max_utterances: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ff: Option<usize>,
    #[arg(long)]
    max_positions: Option<usize>,
    /// Set any configuration field by dotted path, e.g. `encoder.attention_dropout=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Answers: a `{qa_id: text}` map, or a file written by `predict`.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    gold: PathBuf,
    /// Trees: a `{dialogue_id: tree}` map, or a file written by `predict`/`parse`.
    #[arg(long)]
    parse: Option<PathBuf>,
    /// Print an aligned table instead of JSON.
    #[arg(long)]
    table: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the checkpoint's no-answer threshold.
    #[arg(long, allow_hyphen_values = true)]
    tau: Option<f64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    dialogues: Option<usize>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with generator settings.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    data: PathBuf,
    /// Question id; the first question of the corpus when absent.
    #[arg(long)]
    qa_id: Option<String>,
    /// Take the vocabulary from this checkpoint instead of building it from `data`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    max_seq: Option<usize>,
    /// Print the full example as JSON.
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MPDQA_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run_train(*a),
        Command::Eval(a) => run_eval(a),
        Command::Predict(a) => run_predict(a, true),
        Command::Parse(a) => run_predict(a, false),
        Command::GenSynth(a) => run_synth(a),
        Command::Inspect(a) => run_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Sets `root.a.b.c = value`, parsing `value` as JSON and falling back to a string.
fn set_path(root: &mut Value, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("--set expects KEY=VALUE, got {assignment:?}");
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let map = node
            .as_object_mut()
            .with_context(|| format!("--set {key}: {part} is not inside an object"))?;
        if k + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut value = match &a.config {
        Some(p) => read_json(p)?,
        None => Value::Object(Default::default()),
    };
    for s in &a.set {
        set_path(&mut value, s)?;
    }
    let mut c: TrainConfig = serde_json::from_value(value).context("invalid training configuration")?;
    c.seed = a.seed;
    macro_rules! over {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = a.$flag.clone() { c.$($field).+ = v; })*
        };
    }
    over!(
        lr => learning_rate, epochs => epochs, batch_size => batch_size, lambda => lambda,
        qa_weight => qa_weight, mode => mode, dp_dropout => dp_dropout, tau => tau,
        max_answer_tokens => max_answer_tokens, warmup_steps => warmup_steps, clip_norm => clip_norm,
        min_count => min_count, max_seq => limits.max_seq, max_utterances => limits.max_utterances,
        hidden => encoder.hidden_size, layers => encoder.num_layers, heads => encoder.num_attention_heads,
        ff => encoder.feedforward_size, max_positions => encoder.max_positions,
    );
    if a.strict_eq3_averaging {
        c.strict_eq3_averaging = true;
    }
    c.validate()?;
    Ok(c)
}

fn run_train(a: TrainArgs) -> Result<()> {
    let config = train_config(&a)?;
    let train_set = load_corpus(&a.train)?;
    let dev_set = a.dev.as_deref().map(load_corpus).transpose()?;
    let vocab = a.vocab.as_deref().map(Vocabulary::load).transpose()?;
    let mut log: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stderr()),
    };
    let outcome = train::<f64>(config, &train_set, dev_set.as_deref(), vocab, &mut *log)?;
    log.flush()?;
    outcome.best.save(&a.out)?;
    if let Some(p) = &a.last {
        outcome.last.checkpoint().save(p)?;
    }
    eprintln!(
        "best epoch {} (eval loss {:.6}) saved to {}",
        outcome.best_epoch,
        outcome.best_loss,
        a.out.display()
    );
    Ok(())
}

/// Accepts either a bare map or an object holding the map under `field`.
fn prediction_map<V: serde::de::DeserializeOwned>(value: Value, field: &str) -> Result<BTreeMap<String, V>> {
    let inner = match value {
        Value::Object(mut m) if m.contains_key(field) => m.remove(field).unwrap_or_default(),
        other => other,
    };
    serde_json::from_value(inner).with_context(|| format!("expected a map of {field}"))
}

fn run_eval(a: EvalArgs) -> Result<()> {
    if a.pred.is_none() && a.parse.is_none() {
        bail!("nothing to evaluate: pass --pred and/or --parse");
    }
    let gold = load_corpus(&a.gold)?;
    let answers = a
        .pred
        .as_deref()
        .map(|p| prediction_map::<String>(read_json(p)?, "answers"))
        .transpose()?;
    let parses = a
        .parse
        .as_deref()
        .map(|p| prediction_map::<ParsePrediction>(read_json(p)?, "parses"))
        .transpose()?;
    let report = evaluate(&gold, answers.as_ref(), parses.as_ref())?;
    if a.table {
        print!("{}", report.to_table());
    } else {
        println!("{}", report.to_json()?);
    }
    Ok(())
}

fn run_predict(a: PredictArgs, answers: bool) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model::<f64>()?;
    let vocab = ck.vocabulary()?;
    let config = &ck.header.train_config;
    let mut decode = config.decode();
    if let Some(t) = a.tau {
        decode.tau = t;
    }
    let corpus = load_corpus(&a.data)?;
    if answers {
        let preds = predict_corpus(&model, &vocab, &corpus, config.limits, decode)?;
        write_json(&a.out, &preds)
    } else {
        let mut parses = BTreeMap::new();
        for d in &corpus {
            let ex = parse_example(d, &vocab, config.limits)?;
            parses.insert(d.id.clone(), model.predict(&ex, decode)?.1);
        }
        write_json(&a.out, &serde_json::json!({ "parses": parses }))
    }
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => serde_json::from_value(read_json(p)?).context("invalid generator settings")?,
        None => SynthSpec::default(),
    };
    if let Some(n) = a.dialogues {
        spec.dialogues = n;
    }
    let corpus = generate_synthetic(&spec, a.seed)?;
    save_corpus(&a.out, &corpus)?;
    Ok(())
}

fn run_inspect(a: InspectArgs) -> Result<()> {
    let corpus = load_corpus(&a.data)?;
    let vocab = match &a.checkpoint {
        Some(p) => Checkpoint::load(p)?.vocabulary()?,
        None => build_vocab(&corpus, 1),
    };
    let mut limits = Limits::default();
    if let Some(m) = a.max_seq {
        limits.max_seq = m;
    }
    let found = corpus
        .iter()
        .flat_map(|d| d.qas.iter().map(move |q| (d, q)))
        .find(|(_, q)| a.qa_id.as_ref().is_none_or(|id| &q.id == id));
    let Some((dialogue, qa)) = found else {
        bail!("no question {} in {}", a.qa_id.as_deref().unwrap_or("(any)"), a.data.display());
    };
    let ex = assemble(dialogue, qa, &vocab, limits)?;
    let mut out = io::stdout().lock();
    if a.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&ex)?)?;
        return Ok(());
    }
    writeln!(out, "question {} in dialogue {} ({} tokens)", ex.qa_id, ex.dialogue_id, ex.len())?;
    for (i, tok) in ex.tokens.iter().enumerate() {
        let mut marks = Vec::new();
        if let Some(u) = ex.sep_positions.iter().position(|&p| p == i) {
            marks.push(format!("sep of utterance {u}"));
        }
        if i == ex.start_label {
            marks.push("start".into());
        }
        if i == ex.end_label {
            marks.push("end".into());
        }
        let id = ex.token_ids[i];
        let seg = ex.segment_ids[i];
        writeln!(out, "{i:>4}  {tok:<20} id={id:<6} seg={seg}  {}", marks.join(", "))?;
    }
    for u in 0..ex.utterance_count {
        let head = ex.head_labels[u].map_or("-".to_string(), |h| format!("{h:?}"));
        let rel = ex.relation_labels[u].map_or("-", |r| r.name());
        writeln!(out, "utterance {u}: head {head}, relation {rel}")?;
    }
    writeln!(
        out,
        "unanswerable={} truncated={} answer_truncated={}",
        ex.unanswerable, ex.truncated, ex.answer_truncated
    )?;
    Ok(())
}
