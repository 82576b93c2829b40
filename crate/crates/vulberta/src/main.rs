//! Pipeline command-line interface. Each stage reads and writes files, so
//! any stage can be re-run in isolation:
//! extract -> train-tokenizer -> encode -> pretrain -> finetune -> evaluate
//! -> predict.
//!
//! Logs go to stderr; data goes to stdout or to `--out` paths. Exit codes:
//! 0 success, 1 validation error, 2 runtime failure.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Ix2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use vulberta::heads::{frozen_embeddings, init_cnn_params, init_mlp_head, CnnConfig};
use vulberta::ingest::{extract_functions, DatasetFormat, DatasetSchema, Sample};
use vulberta::lexer::{lex_stripped, strip_comments};
use vulberta::metrics::report_csv_row;
use vulberta::model::checkpoint::{load_checkpoint, params_from_tensors};
use vulberta::model::{init_encoder_params, ModelConfig, ParamSet};
use vulberta::tokenizer::{
    encode, load_vocab, save_vocab, tokenize, train_bpe, vocab_checksum, EncodedSeq, Vocab,
    DEFAULT_MAX_SIZE,
};
use vulberta::train::{
    evaluate_detailed, finetune, predict_probs, pretrain, Head, TrainConfig, PRETRAIN_MAX_LEN,
};
use vulberta::{Error, Result};

#[derive(Parser)]
#[command(name = "vulberta", version, about = "C/C++ function-level vulnerability detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract function definitions from C/C++ sources into a JSONL corpus.
    Extract(ExtractArgs),
    /// Train the BPE tokenizer on an extracted corpus.
    TrainTokenizer(TrainTokenizerArgs),
    /// Encode a corpus into fixed-length id sequences.
    Encode(EncodeArgs),
    /// Pre-train the encoder with masked-language modeling.
    Pretrain(PretrainArgs),
    /// Fine-tune a classifier on a labeled encoded dataset.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned checkpoint on an encoded test split.
    Evaluate(EvaluateArgs),
    /// Classify functions from a source file or stdin.
    Predict(PredictArgs),
}

#[derive(Args)]
struct ExtractArgs {
    /// Source file or directory (searched recursively for C/C++ files).
    #[arg(long)]
    input: PathBuf,
    /// Output JSONL path; one `{"code", "label", "origin"}` object per function.
    #[arg(long)]
    out: PathBuf,
    /// Label attached to every extracted function.
    #[arg(long, default_value_t = 0)]
    label: usize,
}

#[derive(Args)]
struct TrainTokenizerArgs {
    /// Corpus JSONL with a `code` field per line.
    #[arg(long)]
    input: PathBuf,
    /// Output vocabulary JSON path.
    #[arg(long)]
    out: PathBuf,
    /// Vocabulary size cap.
    #[arg(long, default_value_t = DEFAULT_MAX_SIZE)]
    max_size: usize,
}

#[derive(Args)]
struct EncodeArgs {
    /// Corpus JSONL with `code` (and optional `label`) fields.
    #[arg(long)]
    input: PathBuf,
    /// Trained vocabulary JSON.
    #[arg(long)]
    vocab: PathBuf,
    /// Output JSONL of encoded sequences.
    #[arg(long)]
    out: PathBuf,
    /// Sequence length (tokens beyond it are truncated).
    #[arg(long, default_value_t = PRETRAIN_MAX_LEN)]
    max_len: usize,
}

#[derive(Args, Clone)]
struct TrainOverrides {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    mask_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    early_stop_patience: Option<usize>,
    #[arg(long)]
    valid_fraction: Option<f64>,
    #[arg(long)]
    scheduler_factor: Option<f64>,
    #[arg(long)]
    scheduler_patience: Option<usize>,
    #[arg(long)]
    min_lr: Option<f64>,
    /// Comma-separated per-class loss weights.
    #[arg(long, value_delimiter = ',')]
    class_weights: Option<Vec<f64>>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                }
            };
        }
        set!(lr);
        set!(max_steps);
        set!(max_epochs);
        set!(batch_size);
        set!(seed);
        set!(checkpoint_every);
        set!(max_len);
        set!(mask_rate);
        set!(weight_decay);
        set!(eval_every);
        set!(early_stop_patience);
        set!(valid_fraction);
        if let Some(v) = self.scheduler_factor {
            cfg.scheduler.factor = v;
        }
        if let Some(v) = self.scheduler_patience {
            cfg.scheduler.patience = v;
        }
        if let Some(v) = self.min_lr {
            cfg.scheduler.min_lr = v;
        }
        if let Some(w) = &self.class_weights {
            cfg.class_weights = Some(w.clone());
        }
    }
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 768)]
    hidden: usize,
    #[arg(long, default_value_t = 12)]
    layers: usize,
    #[arg(long, default_value_t = 12)]
    heads: usize,
    #[arg(long, default_value_t = 3072)]
    ffn: usize,
    #[arg(long, default_value_t = PRETRAIN_MAX_LEN + 2)]
    max_positions: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 2)]
    n_classes: usize,
}

impl ModelArgs {
    fn to_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            ffn: self.ffn,
            max_positions: self.max_positions,
            dropout: self.dropout,
            n_classes: self.n_classes,
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    /// Training configuration JSON; fields mirror the train config exactly.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Encoded corpus JSONL (from `encode`).
    #[arg(long)]
    input: PathBuf,
    /// Vocabulary the corpus was encoded with.
    #[arg(long)]
    vocab: PathBuf,
    /// Output directory for checkpoints and the train log.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Encoded labeled training split.
    #[arg(long)]
    train: PathBuf,
    /// Encoded labeled validation split.
    #[arg(long)]
    valid: PathBuf,
    /// Pre-trained encoder checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Head to attach: `mlp` (fine-tunes the encoder too) or `cnn`
    /// (trains only the head on frozen embeddings).
    #[arg(long, default_value = "mlp")]
    head: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Fine-tuned classifier checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Encoded labeled test split.
    #[arg(long)]
    input: PathBuf,
    /// Report JSON output path.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-sample probability JSONL (`{id, label, score}`).
    #[arg(long)]
    probs: Option<PathBuf>,
    /// Also write a one-row CSV summary next to the report.
    #[arg(long, default_value_t = false)]
    csv: bool,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

#[derive(Args)]
struct PredictArgs {
    /// Fine-tuned classifier checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary for encoding.
    #[arg(long)]
    vocab: PathBuf,
    /// C/C++ source file; stdin when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = PRETRAIN_MAX_LEN)]
    max_len: usize,
}

/// One encoded-corpus line.
#[derive(Serialize, Deserialize)]
struct EncodedRecord {
    ids: Vec<u32>,
    attention_mask: Vec<u8>,
    true_len: usize,
    #[serde(default)]
    label: usize,
}

impl EncodedRecord {
    fn from_seq(seq: &EncodedSeq, label: usize) -> Self {
        EncodedRecord {
            ids: seq.ids.clone(),
            attention_mask: seq.attention_mask.clone(),
            true_len: seq.true_len,
            label,
        }
    }

    fn into_pair(self) -> (EncodedSeq, usize) {
        (
            EncodedSeq {
                ids: self.ids,
                attention_mask: self.attention_mask,
                true_len: self.true_len,
            },
            self.label,
        )
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Extract(a) => cmd_extract(a),
        Command::TrainTokenizer(a) => cmd_train_tokenizer(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
    };
    if let Err(e) = result {
        log::error!("{e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Input(_)
        | Error::Dataset(_)
        | Error::Parse { .. }
        | Error::Integrity(_) => 1,
        _ => 2,
    }
}

fn is_c_source(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("c" | "cc" | "cpp" | "cxx" | "h" | "hh" | "hpp")
    )
}

fn collect_sources(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if root.is_file() {
        out.push(root.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(root)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_sources(&path, out)?;
        } else if is_c_source(&path) {
            out.push(path);
        }
    }
    Ok(())
}

fn cmd_extract(args: ExtractArgs) -> Result<()> {
    if !args.input.exists() {
        return Err(Error::Input(format!("{} does not exist", args.input.display())));
    }
    let mut sources = Vec::new();
    collect_sources(&args.input, &mut sources)?;
    if sources.is_empty() {
        return Err(Error::Input(format!(
            "no C/C++ sources under {}",
            args.input.display()
        )));
    }
    let mut writer = BufWriter::new(fs::File::create(&args.out)?);
    let mut count = 0usize;
    for path in &sources {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        for code in extract_functions(&text) {
            let sample = Sample {
                code,
                label: args.label,
                origin: Some(path.display().to_string()),
            };
            serde_json::to_writer(&mut writer, &sample)?;
            writeln!(writer)?;
            count += 1;
        }
    }
    writer.flush()?;
    log::info!("extracted {count} functions from {} files", sources.len());
    Ok(())
}

fn load_corpus(path: &Path) -> Result<Vec<Sample>> {
    let schema = DatasetSchema::new(DatasetFormat::Jsonl, usize::MAX);
    let (samples, skipped) = vulberta::ingest::load_dataset(path, &schema)?;
    if skipped > 0 {
        log::warn!("skipped {skipped} invalid records in {}", path.display());
    }
    Ok(samples)
}

fn cmd_train_tokenizer(args: TrainTokenizerArgs) -> Result<()> {
    let samples = load_corpus(&args.input)?;
    let corpus = samples.iter().map(|s| lex_stripped(&strip_comments(&s.code)));
    let vocab = train_bpe(corpus, args.max_size)?;
    save_vocab(&vocab, &args.out)?;
    log::info!(
        "trained vocabulary with {} entries ({} merges)",
        vocab.len(),
        vocab.merges().len()
    );
    Ok(())
}

fn encode_code(code: &str, vocab: &Vocab, max_len: usize) -> Result<EncodedSeq> {
    let tokens = lex_stripped(&strip_comments(code));
    let subwords = tokenize(&tokens, vocab);
    encode(&subwords, vocab, max_len)
}

/// Cache key for an encoded corpus: input bytes, vocabulary identity and
/// sequence length together determine the output bytes.
fn encode_cache_key(input: &[u8], vocab: &Vocab, max_len: usize) -> String {
    let mut hasher = Sha256::new();
    hasher.update(input);
    hasher.update(vocab_checksum(vocab).as_bytes());
    hasher.update(max_len.to_le_bytes());
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_encode(args: EncodeArgs) -> Result<()> {
    let vocab = load_vocab(&args.vocab)?;
    let raw = fs::read(&args.input)?;

    let cache_path = std::env::var_os("VULBERTA_CACHE").map(|dir| {
        PathBuf::from(dir).join(format!(
            "encode-{}.jsonl",
            encode_cache_key(&raw, &vocab, args.max_len)
        ))
    });
    if let Some(cached) = &cache_path {
        if cached.exists() {
            fs::copy(cached, &args.out)?;
            log::info!("reused cached encoding {}", cached.display());
            return Ok(());
        }
    }

    let samples = load_corpus(&args.input)?;
    let mut writer = BufWriter::new(fs::File::create(&args.out)?);
    for sample in &samples {
        let seq = encode_code(&sample.code, &vocab, args.max_len)?;
        serde_json::to_writer(&mut writer, &EncodedRecord::from_seq(&seq, sample.label))?;
        writeln!(writer)?;
    }
    writer.flush()?;
    drop(writer);
    log::info!("encoded {} sequences at length {}", samples.len(), args.max_len);

    if let Some(cached) = &cache_path {
        if let Some(dir) = cached.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::copy(&args.out, cached)?;
    }
    Ok(())
}

fn load_encoded(path: &Path) -> Result<Vec<(EncodedSeq, usize)>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EncodedRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(record.into_pair());
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("{}: no encoded sequences", path.display())));
    }
    Ok(out)
}

/// defaults < config file < flags, with unknown config fields rejected.
fn resolve_train_config(
    defaults: TrainConfig,
    config_path: Option<&Path>,
    overrides: &TrainOverrides,
) -> Result<TrainConfig> {
    let mut cfg = match config_path {
        None => defaults,
        Some(path) => {
            let mut base = serde_json::to_value(&defaults)?;
            let file: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge_json(&mut base, file);
            serde_json::from_value(base)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn merge_json(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(base), serde_json::Value::Object(patch)) => {
            for (k, v) in patch {
                match base.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_json(slot, v),
                    _ => {
                        base.insert(k, v);
                    }
                }
            }
        }
        (base, patch) => *base = patch,
    }
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let tcfg = resolve_train_config(
        TrainConfig::pretrain_defaults(),
        args.config.as_deref(),
        &args.overrides,
    )?;
    let vocab = load_vocab(&args.vocab)?;
    let model_cfg = args.model.to_config(vocab.len());
    model_cfg.validate()?;
    let corpus: Vec<EncodedSeq> = load_encoded(&args.input)?
        .into_iter()
        .map(|(seq, _)| seq)
        .collect();
    let checksum = vocab_checksum(&vocab);
    let log_path = args.out.join("train_log.jsonl");
    fs::create_dir_all(&args.out)?;
    let outcome = pretrain(
        &model_cfg,
        &tcfg,
        &corpus,
        &checksum,
        &args.out,
        args.resume.as_deref(),
        Some(&log_path),
    )?;
    log::info!(
        "pre-training finished after {} steps; final checkpoint {}",
        outcome.records.last().map_or(0, |r| r.step),
        outcome.checkpoint.display()
    );
    println!("{}", outcome.checkpoint.display());
    Ok(())
}

/// Inverse-frequency class weights: N / (n_classes * count_c).
fn weights_from_labels(data: &[(EncodedSeq, usize)], n_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; n_classes];
    for (_, label) in data {
        counts[*label] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Dataset(format!("class {missing} absent from training split")));
    }
    let n = data.len() as f64;
    Ok(counts
        .iter()
        .map(|&c| n / (n_classes as f64 * c as f64))
        .collect())
}

fn cmd_finetune(args: FinetuneArgs) -> Result<()> {
    let mut tcfg = resolve_train_config(
        TrainConfig::finetune_defaults(),
        args.config.as_deref(),
        &args.overrides,
    )?;
    let (meta, tensors) = load_checkpoint(&args.checkpoint)?;
    let mut model_cfg = meta.config.clone();
    let train_data = load_encoded(&args.train)?;
    let valid_data = load_encoded(&args.valid)?;
    let data_len = train_data[0].0.max_len();
    if tcfg.class_weights.is_none() {
        tcfg.class_weights = Some(weights_from_labels(&train_data, model_cfg.n_classes)?);
        log::info!("computed class weights {:?}", tcfg.class_weights.as_ref().unwrap());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let template = init_encoder_params(&model_cfg, &mut rng)?;
    let mut encoder_params = params_from_tensors(&template, &tensors)?;

    let head = match args.head.as_str() {
        "mlp" => Head::Mlp,
        "cnn" => {
            let embeddings = frozen_embeddings(
                encoder_params.get("tok_emb"),
                &meta.vocab_checksum,
                &meta.vocab_checksum,
            )?;
            let ccfg = CnnConfig {
                emb_dim: model_cfg.hidden,
                n_classes: model_cfg.n_classes,
                ..CnnConfig::defaults(model_cfg.n_classes)
            };
            Head::Cnn {
                cfg: ccfg,
                embeddings,
                source_checksum: checkpoint_hash(&args.checkpoint)?,
            }
        }
        other => return Err(Error::Config(format!("unknown head kind {other}"))),
    };
    // longer fine-tuning inputs than the checkpoint was trained on: grow
    // the position table by copying rows, then keep training them
    if head.uses_encoder() && model_cfg.max_positions < data_len {
        log::info!(
            "extending position embeddings from {} to {data_len}",
            model_cfg.max_positions
        );
        vulberta::model::extend_position_embeddings(&mut encoder_params, &mut model_cfg, data_len);
    }

    fs::create_dir_all(&args.out)?;
    let log_path = args.out.join("train_log.jsonl");
    let outcome = finetune(
        &model_cfg,
        &tcfg,
        &encoder_params,
        &head,
        &train_data,
        &valid_data,
        &meta.vocab_checksum,
        &args.out,
        Some(&log_path),
    )?;
    log::info!(
        "best validation metric {:.2} at epoch {}",
        outcome.best_metric,
        outcome.best_epoch
    );
    println!("{}", outcome.checkpoint.display());
    Ok(())
}

fn checkpoint_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Rebuild (config, parameters, head) from a fine-tuned checkpoint.
fn load_classifier(path: &Path) -> Result<(ModelConfig, ParamSet, Head, String)> {
    let (meta, tensors) = load_checkpoint(path)?;
    let head_kind = meta
        .trainer
        .get("head")
        .and_then(|v| v.as_str())
        .ok_or_else(|| {
            Error::Checkpoint(format!(
                "{}: not a classifier checkpoint (no head recorded)",
                path.display()
            ))
        })?
        .to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    match head_kind.as_str() {
        "mlp" => {
            let mut template = init_encoder_params(&meta.config, &mut rng)?;
            template.extend(init_mlp_head(&meta.config, &mut rng));
            let params = params_from_tensors(&template, &tensors)?;
            Ok((meta.config, params, Head::Mlp, meta.vocab_checksum))
        }
        "cnn" => {
            let ccfg: CnnConfig = serde_json::from_value(
                meta.trainer
                    .get("cnn_config")
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint("cnn checkpoint missing cnn_config".into()))?,
            )?;
            let template = init_cnn_params(&ccfg, &mut rng)?;
            let params = params_from_tensors(&template, &tensors)?;
            let embeddings = tensors
                .iter()
                .find(|(n, _)| n == "frozen.tok_emb")
                .ok_or_else(|| Error::Checkpoint("cnn checkpoint missing frozen embeddings".into()))?
                .1
                .view()
                .into_dimensionality::<Ix2>()
                .map_err(|_| Error::Checkpoint("frozen embeddings must be 2-D".into()))?
                .to_owned();
            let source_checksum = meta
                .trainer
                .get("source_checksum")
                .and_then(|v| v.as_str())
                .unwrap_or_default()
                .to_string();
            Ok((
                meta.config,
                params,
                Head::Cnn {
                    cfg: ccfg,
                    embeddings,
                    source_checksum,
                },
                meta.vocab_checksum,
            ))
        }
        other => Err(Error::Checkpoint(format!("unknown head kind {other}"))),
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let (model_cfg, params, head, _) = load_classifier(&args.checkpoint)?;
    let data = load_encoded(&args.input)?;
    let (report, probs, _) =
        evaluate_detailed(&model_cfg, &params, &head, &data, args.batch_size, None)?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(&args.out, json + "\n")?;
    if let Some(probs_path) = &args.probs {
        let mut writer = BufWriter::new(fs::File::create(probs_path)?);
        for (id, ((_, label), p)) in data.iter().zip(&probs).enumerate() {
            let score = if model_cfg.n_classes == 2 {
                p[1]
            } else {
                p.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            };
            serde_json::to_writer(
                &mut writer,
                &serde_json::json!({"id": id, "label": label, "score": score}),
            )?;
            writeln!(writer)?;
        }
        writer.flush()?;
    }
    if args.csv {
        let csv_path = args.out.with_extension("csv");
        fs::write(&csv_path, report_csv_row(&report))?;
    }
    log::info!(
        "accuracy {:.2} f1 {:.2} weighted-f1 {:.2} mcc {:.2}",
        report.accuracy,
        report.f1,
        report.weighted_f1,
        report.mcc
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let (model_cfg, params, head, classifier_vocab_checksum) = load_classifier(&args.checkpoint)?;
    let vocab = load_vocab(&args.vocab)?;
    if vocab_checksum(&vocab) != classifier_vocab_checksum {
        return Err(Error::Integrity(
            "vocabulary does not match the one the classifier was trained with".into(),
        ));
    }
    let source = match &args.input {
        Some(path) => fs::read_to_string(path)?,
        None => {
            let mut buf = String::new();
            std::io::stdin().read_to_string(&mut buf)?;
            buf
        }
    };
    let mut functions = extract_functions(&source);
    if functions.is_empty() {
        // treat free-standing snippets as a single function body
        functions.push(source);
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, code) in functions.iter().enumerate() {
        let seq = encode_code(code, &vocab, args.max_len)?;
        let probs = predict_probs(&model_cfg, &params, &head, std::slice::from_ref(&seq))?;
        let row: Vec<f64> = probs.row(0).to_vec();
        serde_json::to_writer(
            &mut out,
            &serde_json::json!({"function": i, "probabilities": row}),
        )?;
        writeln!(out)?;
    }
    Ok(())
}
