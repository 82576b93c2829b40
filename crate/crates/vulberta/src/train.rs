//! Optimization and the pre-training / fine-tuning loops: decoupled weight
//! decay Adam, reduce-on-plateau scheduling, early stopping, checkpointing
//! with exact resume.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayD, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{cnn_logits, init_cnn_params, init_mlp_head, mlp_logits, CnnConfig};
use crate::metrics::{eval_report, EvalReport};
use crate::model::checkpoint::{load_checkpoint, params_from_tensors, save_checkpoint, CheckpointMeta};
use crate::model::{
    apply_masking, bind_params, collect_grads, encoder_forward, init_encoder_params, mlm_loss,
    Mode, ModelConfig, ParamSet,
};
use crate::tape::Tape;
use crate::tokenizer::EncodedSeq;

pub const PRETRAIN_MAX_LEN: usize = 512;
pub const FINETUNE_MAX_LEN: usize = 1024;
pub const MAX_PRETRAIN_STEPS: usize = 500_000;

/// Reduce-on-plateau settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            factor: 0.1,
            patience: 2,
            min_lr: 1e-8,
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has
/// failed to improve for `patience` consecutive evaluations, then resets
/// its patience counter. The rate never rises and never drops below
/// `min_lr`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReduceOnPlateau {
    cfg: SchedulerConfig,
    best: f64,
    bad: usize,
}

impl ReduceOnPlateau {
    pub fn new(cfg: SchedulerConfig) -> Self {
        ReduceOnPlateau {
            cfg,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Feed one evaluation of the monitored loss; adjusts `lr` in place and
    /// reports whether a reduction happened.
    pub fn observe(&mut self, loss: f64, lr: &mut f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.bad = 0;
            return false;
        }
        self.bad += 1;
        if self.bad >= self.cfg.patience {
            self.bad = 0;
            let reduced = (*lr * self.cfg.factor).max(self.cfg.min_lr);
            if reduced < *lr {
                *lr = reduced;
                return true;
            }
        }
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// Training hyperparameters for both phases. A config file mirrors these
/// fields; the CLI can override each one with a flag of the same name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub lr: f64,
    pub max_steps: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub scheduler: SchedulerConfig,
    pub class_weights: Option<Vec<f64>>,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub max_len: usize,
    pub mask_rate: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
    pub early_stop_patience: usize,
    pub valid_fraction: f64,
}

impl TrainConfig {
    pub fn pretrain_defaults() -> Self {
        TrainConfig {
            phase: Phase::Pretrain,
            lr: 1e-4,
            max_steps: 10_000,
            max_epochs: 0,
            batch_size: 16,
            scheduler: SchedulerConfig::default(),
            class_weights: None,
            seed: 0,
            checkpoint_every: 1000,
            max_len: PRETRAIN_MAX_LEN,
            mask_rate: 0.15,
            weight_decay: 0.01,
            eval_every: 200,
            early_stop_patience: 0,
            valid_fraction: 0.01,
        }
    }

    pub fn finetune_defaults() -> Self {
        TrainConfig {
            phase: Phase::Finetune,
            lr: 3e-5,
            max_steps: 0,
            max_epochs: 10,
            batch_size: 16,
            scheduler: SchedulerConfig::default(),
            class_weights: None,
            seed: 0,
            checkpoint_every: 0,
            max_len: FINETUNE_MAX_LEN,
            mask_rate: 0.15,
            weight_decay: 0.01,
            eval_every: 0,
            early_stop_patience: 3,
            valid_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        match self.phase {
            Phase::Pretrain => {
                if self.max_steps == 0 || self.max_steps > MAX_PRETRAIN_STEPS {
                    return Err(Error::Config(format!(
                        "max_steps must be in 1..={MAX_PRETRAIN_STEPS}, got {}",
                        self.max_steps
                    )));
                }
                if !(0.0..1.0).contains(&self.mask_rate) || self.mask_rate == 0.0 {
                    return Err(Error::Config(format!(
                        "mask_rate must be in (0,1), got {}",
                        self.mask_rate
                    )));
                }
                if !(0.0..0.5).contains(&self.valid_fraction) {
                    return Err(Error::Config(format!(
                        "valid_fraction must be in [0,0.5), got {}",
                        self.valid_fraction
                    )));
                }
                if self.eval_every == 0 {
                    return Err(Error::Config("eval_every must be positive for pre-training".into()));
                }
            }
            Phase::Finetune => {
                if self.max_epochs == 0 {
                    return Err(Error::Config("max_epochs must be positive".into()));
                }
            }
        }
        if self.scheduler.factor <= 0.0 || self.scheduler.factor >= 1.0 {
            return Err(Error::Config(format!(
                "scheduler factor must be in (0,1), got {}",
                self.scheduler.factor
            )));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay. Moment buffers follow the parameter
/// order of the set they were created for.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, params: &ParamSet) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect(),
        }
    }

    /// One update. Errors if any parameter is non-finite afterwards.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &[ArrayD<f64>]) -> Result<()> {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let g = &grads[i];
            self.m[i].zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            self.v[i].zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let lr = self.lr;
            let wd = self.weight_decay;
            let eps = self.eps;
            ndarray::Zip::from(&mut *p)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
        }
        if !params.all_finite() {
            return Err(Error::Diverged {
                step: self.step as usize,
                msg: "non-finite parameter after optimizer step".into(),
                last_checkpoint: None,
            });
        }
        Ok(())
    }

    /// Moment buffers as named tensors for checkpointing.
    pub fn state_tensors(&self, params: &ParamSet) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (i, (name, _)) in params.iter().enumerate() {
            out.push((format!("opt.m.{name}"), self.m[i].clone()));
            out.push((format!("opt.v.{name}"), self.v[i].clone()));
        }
        out
    }

    pub fn restore_state(
        &mut self,
        params: &ParamSet,
        tensors: &[(String, ArrayD<f64>)],
        step: u64,
    ) -> Result<()> {
        for (i, (name, _)) in params.iter().enumerate() {
            for (prefix, buf) in [("opt.m.", &mut self.m), ("opt.v.", &mut self.v)] {
                let key = format!("{prefix}{name}");
                let found = tensors
                    .iter()
                    .find(|(n, _)| *n == key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))?;
                buf[i] = found.1.clone();
            }
        }
        self.step = step;
        Ok(())
    }
}

/// One log record; `epoch` is set only by fine-tuning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<u64>,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_metric: Option<f64>,
    pub wall_time: f64,
}

/// In-memory log with optional JSONL sink.
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    sink: Option<std::io::BufWriter<std::fs::File>>,
    started: Instant,
}

impl TrainLog {
    pub fn new(path: Option<&Path>) -> Result<Self> {
        let sink = match path {
            Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
            None => None,
        };
        Ok(TrainLog {
            records: Vec::new(),
            sink,
            started: Instant::now(),
        })
    }

    pub fn elapsed(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    pub fn push(&mut self, record: TrainRecord) -> Result<()> {
        if let Some(sink) = &mut self.sink {
            use std::io::Write;
            serde_json::to_writer(&mut *sink, &record)?;
            writeln!(sink)?;
            sink.flush()?;
        }
        self.records.push(record);
        Ok(())
    }
}

/// Serialized training state, stored in the checkpoint header so a run can
/// resume exactly: optimizer counters, scheduler state and the RNG.
#[derive(Debug, Serialize, Deserialize)]
struct TrainerState {
    train_config: TrainConfig,
    lr: f64,
    opt_step: u64,
    scheduler: ReduceOnPlateau,
    rng: ChaCha8Rng,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub params: ParamSet,
    pub records: Vec<TrainRecord>,
    pub checkpoint: PathBuf,
}

fn uniform_batch(seqs: &[EncodedSeq], max_len: usize) -> Result<()> {
    if seqs.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    if let Some(bad) = seqs.iter().find(|s| s.max_len() != max_len) {
        return Err(Error::Input(format!(
            "sequence encoded at length {} but training expects {max_len}",
            bad.max_len()
        )));
    }
    Ok(())
}

/// Average MLM loss over a held-out stream, deterministic for a given
/// evaluation seed so resumed runs reproduce it exactly.
fn mlm_validation_loss(
    cfg: &ModelConfig,
    params: &ParamSet,
    seqs: &[EncodedSeq],
    tcfg: &TrainConfig,
    eval_seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in seqs.chunks(tcfg.batch_size) {
        let mut masked = Vec::with_capacity(chunk.len());
        let mut plans = Vec::with_capacity(chunk.len());
        for seq in chunk {
            let (m, p) = apply_masking(seq, cfg.vocab_size, tcfg.mask_rate, &mut rng)?;
            masked.push(m);
            plans.push(p);
        }
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, params);
        let loss = mlm_loss(&mut tape, &bound, cfg, &masked, &plans, &mut Mode::Eval)?;
        total += tape.scalar(loss);
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Pre-train with masked-language modeling. A `valid_fraction` slice of the
/// corpus (at least one sequence) is held out as the validation stream that
/// drives the plateau scheduler. Checkpoints are written every
/// `checkpoint_every` steps plus once at the end, and carry optimizer and
/// RNG state so `resume` reproduces the uninterrupted run exactly.
pub fn pretrain(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    corpus: &[EncodedSeq],
    vocab_checksum: &str,
    out_dir: &Path,
    resume: Option<&Path>,
    log_path: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    if tcfg.phase != Phase::Pretrain {
        return Err(Error::Config("pretrain requires phase = pretrain".into()));
    }
    uniform_batch(corpus, tcfg.max_len)?;
    std::fs::create_dir_all(out_dir)?;

    // held-out validation stream: seeded shuffle, then at least one sequence
    let mut split_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, split_rng.gen_range(0..=i));
    }
    let n_valid = ((corpus.len() as f64 * tcfg.valid_fraction).floor() as usize)
        .max(1)
        .min(corpus.len().saturating_sub(1).max(1));
    let valid: Vec<EncodedSeq> = order[..n_valid].iter().map(|&i| corpus[i].clone()).collect();
    let train_idx: Vec<usize> = if corpus.len() == 1 {
        vec![0]
    } else {
        order[n_valid..].to_vec()
    };

    let mut params;
    let mut opt;
    let mut scheduler;
    let mut rng;
    let mut start_step: u64 = 0;
    let mut metric_history: Vec<f64>;
    match resume {
        Some(path) => {
            let (meta, tensors) = load_checkpoint(path)?;
            if meta.config != *cfg {
                return Err(Error::Checkpoint(
                    "checkpoint model config does not match requested config".into(),
                ));
            }
            if meta.vocab_checksum != vocab_checksum {
                return Err(Error::Integrity(format!(
                    "checkpoint vocabulary checksum {} does not match {}",
                    meta.vocab_checksum, vocab_checksum
                )));
            }
            let template =
                init_encoder_params(cfg, &mut ChaCha8Rng::seed_from_u64(tcfg.seed ^ INIT_SALT))?;
            params = params_from_tensors(&template, &tensors)?;
            let state: TrainerState = serde_json::from_value(meta.trainer.clone())?;
            opt = AdamW::new(state.lr, tcfg.weight_decay, &params);
            opt.restore_state(&params, &tensors, state.opt_step)?;
            scheduler = state.scheduler;
            rng = state.rng;
            start_step = meta.step;
            metric_history = meta.metric_history;
        }
        None => {
            params = init_encoder_params(cfg, &mut ChaCha8Rng::seed_from_u64(tcfg.seed ^ INIT_SALT))?;
            opt = AdamW::new(tcfg.lr, tcfg.weight_decay, &params);
            scheduler = ReduceOnPlateau::new(tcfg.scheduler.clone());
            rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(1));
            metric_history = Vec::new();
        }
    }

    let mut log = TrainLog::new(log_path)?;
    let mut last_checkpoint: Option<PathBuf> = resume.map(Path::to_path_buf);

    for step in start_step + 1..=tcfg.max_steps as u64 {
        let mut masked = Vec::with_capacity(tcfg.batch_size);
        let mut plans = Vec::with_capacity(tcfg.batch_size);
        for _ in 0..tcfg.batch_size {
            let seq = &corpus[train_idx[rng.gen_range(0..train_idx.len())]];
            let (m, p) = apply_masking(seq, cfg.vocab_size, tcfg.mask_rate, &mut rng)?;
            masked.push(m);
            plans.push(p);
        }
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let loss = mlm_loss(&mut tape, &bound, cfg, &masked, &plans, &mut Mode::Train(&mut rng))?;
        let loss_value = tape.scalar(loss);
        if !loss_value.is_finite() {
            return Err(Error::Diverged {
                step: step as usize,
                msg: format!("loss is {loss_value}"),
                last_checkpoint,
            });
        }
        let grads = tape.backward(loss);
        let grads = collect_grads(&grads, &bound, &params);
        opt.apply(&mut params, &grads).map_err(|e| match e {
            Error::Diverged { step, msg, .. } => Error::Diverged {
                step,
                msg,
                last_checkpoint: last_checkpoint.clone(),
            },
            other => other,
        })?;

        let mut valid_loss = None;
        if step % tcfg.eval_every as u64 == 0 {
            let vl = mlm_validation_loss(cfg, &params, &valid, tcfg, tcfg.seed ^ step)?;
            scheduler.observe(vl, &mut opt.lr);
            metric_history.push(vl);
            valid_loss = Some(vl);
        }
        log.push(TrainRecord {
            step,
            epoch: None,
            lr: opt.lr,
            train_loss: loss_value,
            valid_loss,
            valid_metric: None,
            wall_time: log.elapsed(),
        })?;

        let at_end = step == tcfg.max_steps as u64;
        if at_end || (tcfg.checkpoint_every > 0 && step % tcfg.checkpoint_every as u64 == 0) {
            let path = out_dir.join(format!("pretrain-step{step}.ckpt"));
            let state = TrainerState {
                train_config: tcfg.clone(),
                lr: opt.lr,
                opt_step: opt.step,
                scheduler: scheduler.clone(),
                rng: rng.clone(),
            };
            let meta = CheckpointMeta {
                config: cfg.clone(),
                step,
                epoch: 0,
                metric_history: metric_history.clone(),
                vocab_checksum: vocab_checksum.to_string(),
                trainer: serde_json::to_value(&state)?,
            };
            let mut tensors: Vec<(String, ArrayD<f64>)> =
                params.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
            tensors.extend(opt.state_tensors(&params));
            save_checkpoint(&path, &meta, &tensors)?;
            last_checkpoint = Some(path);
        }
    }

    Ok(PretrainOutcome {
        params,
        records: log.records,
        checkpoint: last_checkpoint.expect("final checkpoint always written"),
    })
}

/// The classifier attached during fine-tuning. The CNN variant carries the
/// frozen embedding table plus the checksum of the checkpoint it came from.
pub enum Head {
    Mlp,
    Cnn {
        cfg: CnnConfig,
        embeddings: Array2<f64>,
        source_checksum: String,
    },
}

impl Head {
    pub fn uses_encoder(&self) -> bool {
        matches!(self, Head::Mlp)
    }

    fn init_params(&self, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet> {
        match self {
            Head::Mlp => Ok(init_mlp_head(cfg, rng)),
            Head::Cnn { cfg: ccfg, .. } => init_cnn_params(ccfg, rng),
        }
    }

    fn logits(
        &self,
        tape: &mut Tape,
        bound: &crate::model::BoundParams,
        cfg: &ModelConfig,
        batch: &[EncodedSeq],
        mode: &mut Mode,
    ) -> Result<crate::tape::VarId> {
        match self {
            Head::Mlp => {
                let t_len = batch[0].max_len();
                let hidden = encoder_forward(tape, bound, cfg, batch, mode)?;
                Ok(mlp_logits(tape, bound, cfg, hidden, batch.len(), t_len, mode))
            }
            Head::Cnn {
                cfg: ccfg,
                embeddings,
                ..
            } => cnn_logits(tape, bound, ccfg, embeddings, batch, mode),
        }
    }
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub params: ParamSet,
    pub records: Vec<TrainRecord>,
    pub best_epoch: u64,
    pub best_metric: f64,
    pub checkpoint: PathBuf,
}

/// Fine-tune a classifier. For the MLP head the whole encoder trains with
/// the head; for the CNN head only the head trains on frozen embeddings.
/// Keeps the epoch with the best validation F1 (binary) or weighted F1
/// (multi-class), and stops after `early_stop_patience` epochs without
/// improvement.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    encoder_params: &ParamSet,
    head: &Head,
    train_data: &[(EncodedSeq, usize)],
    valid_data: &[(EncodedSeq, usize)],
    vocab_checksum: &str,
    out_dir: &Path,
    log_path: Option<&Path>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    if tcfg.phase != Phase::Finetune {
        return Err(Error::Config("finetune requires phase = finetune".into()));
    }
    if train_data.is_empty() || valid_data.is_empty() {
        return Err(Error::Input("train and validation splits must be non-empty".into()));
    }
    if let Some(w) = &tcfg.class_weights {
        if w.len() != cfg.n_classes {
            return Err(Error::Config(format!(
                "{} class weights for {} classes",
                w.len(),
                cfg.n_classes
            )));
        }
    }
    for (seq, label) in train_data.iter().chain(valid_data) {
        if *label >= cfg.n_classes {
            return Err(Error::Dataset(format!(
                "label {label} out of range for {} classes",
                cfg.n_classes
            )));
        }
        if seq.max_len() != train_data[0].0.max_len() {
            return Err(Error::Input("ragged dataset".into()));
        }
    }
    std::fs::create_dir_all(out_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(2));
    let mut params = ParamSet::new();
    if head.uses_encoder() {
        for (name, value) in encoder_params.iter() {
            params.push(name, value.clone());
        }
    }
    params.extend(head.init_params(cfg, &mut rng)?);

    let mut opt = AdamW::new(tcfg.lr, tcfg.weight_decay, &params);
    let mut scheduler = ReduceOnPlateau::new(tcfg.scheduler.clone());
    let mut log = TrainLog::new(log_path)?;

    let mut best_metric = f64::NEG_INFINITY;
    let mut best_epoch = 0u64;
    let mut best_params = params.clone();
    let mut bad_epochs = 0usize;
    let mut metric_history = Vec::new();
    let mut global_step = 0u64;

    for epoch in 1..=tcfg.max_epochs as u64 {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<EncodedSeq> = chunk.iter().map(|&i| train_data[i].0.clone()).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| train_data[i].1).collect();
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &params);
            let logits = head.logits(&mut tape, &bound, cfg, &batch, &mut Mode::Train(&mut rng))?;
            let loss =
                tape.cross_entropy(logits, &targets, tcfg.class_weights.as_deref());
            let loss_value = tape.scalar(loss);
            global_step += 1;
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    step: global_step as usize,
                    msg: format!("loss is {loss_value}"),
                    last_checkpoint: None,
                });
            }
            let grads = tape.backward(loss);
            let grads = collect_grads(&grads, &bound, &params);
            opt.apply(&mut params, &grads)?;
            epoch_loss += loss_value;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;

        let (report, valid_loss) = evaluate_with_loss(cfg, &params, head, valid_data, tcfg)?;
        let metric = if cfg.n_classes == 2 { report.f1 } else { report.weighted_f1 };
        scheduler.observe(valid_loss, &mut opt.lr);
        metric_history.push(metric);
        log.push(TrainRecord {
            step: global_step,
            epoch: Some(epoch),
            lr: opt.lr,
            train_loss,
            valid_loss: Some(valid_loss),
            valid_metric: Some(metric),
            wall_time: log.elapsed(),
        })?;

        if metric > best_metric {
            best_metric = metric;
            best_epoch = epoch;
            best_params = params.clone();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if tcfg.early_stop_patience > 0 && bad_epochs >= tcfg.early_stop_patience {
                log::info!("early stop after epoch {epoch}: no improvement for {bad_epochs} epochs");
                break;
            }
        }
    }

    let path = out_dir.join("finetune-best.ckpt");
    let trainer = match head {
        Head::Mlp => serde_json::json!({"head": "mlp", "train_config": tcfg}),
        Head::Cnn { cfg: ccfg, source_checksum, .. } => serde_json::json!({
            "head": "cnn",
            "cnn_config": ccfg,
            "source_checksum": source_checksum,
            "train_config": tcfg,
        }),
    };
    let meta = CheckpointMeta {
        config: cfg.clone(),
        step: global_step,
        epoch: best_epoch,
        metric_history,
        vocab_checksum: vocab_checksum.to_string(),
        trainer,
    };
    let mut tensors: Vec<(String, ArrayD<f64>)> =
        best_params.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
    if let Head::Cnn { embeddings, .. } = head {
        tensors.push(("frozen.tok_emb".to_string(), embeddings.clone().into_dyn()));
    }
    save_checkpoint(&path, &meta, &tensors)?;

    Ok(FinetuneOutcome {
        params: best_params,
        records: log.records,
        best_epoch,
        best_metric,
        checkpoint: path,
    })
}

/// Class probabilities for a batch, deterministic (no dropout).
pub fn predict_probs(
    cfg: &ModelConfig,
    params: &ParamSet,
    head: &Head,
    batch: &[EncodedSeq],
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let logits = head.logits(&mut tape, &bound, cfg, batch, &mut Mode::Eval)?;
    let probs = tape.softmax_rows(logits);
    Ok(tape
        .value(probs)
        .view()
        .into_dimensionality::<Ix2>()
        .expect("2-D probabilities")
        .to_owned())
}

fn evaluate_with_loss(
    cfg: &ModelConfig,
    params: &ParamSet,
    head: &Head,
    data: &[(EncodedSeq, usize)],
    tcfg: &TrainConfig,
) -> Result<(EvalReport, f64)> {
    let (report, _, loss) = evaluate_detailed(cfg, params, head, data, tcfg.batch_size, tcfg.class_weights.as_deref())?;
    Ok((report, loss))
}

/// Evaluate a classifier: metrics report, per-sample class probabilities
/// and the mean (optionally class-weighted) loss.
pub fn evaluate_detailed(
    cfg: &ModelConfig,
    params: &ParamSet,
    head: &Head,
    data: &[(EncodedSeq, usize)],
    batch_size: usize,
    class_weights: Option<&[f64]>,
) -> Result<(EvalReport, Vec<Vec<f64>>, f64)> {
    if data.is_empty() {
        return Err(Error::Input("empty evaluation split".into()));
    }
    let mut labels = Vec::with_capacity(data.len());
    let mut predictions = Vec::with_capacity(data.len());
    let mut scores = Vec::with_capacity(data.len());
    let mut all_probs = Vec::with_capacity(data.len());
    let mut total_loss = 0.0;
    let mut batches = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<EncodedSeq> = chunk.iter().map(|(s, _)| s.clone()).collect();
        let targets: Vec<usize> = chunk.iter().map(|(_, l)| *l).collect();
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, params);
        let logits = head.logits(&mut tape, &bound, cfg, &batch, &mut Mode::Eval)?;
        let loss = tape.cross_entropy(logits, &targets, class_weights);
        total_loss += tape.scalar(loss);
        batches += 1;
        let probs = tape.softmax_rows(logits);
        let probs = tape.value2(probs);
        for (row, &label) in probs.rows().into_iter().zip(&targets) {
            let mut argmax = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[argmax] {
                    argmax = c;
                }
            }
            labels.push(label);
            predictions.push(argmax);
            if cfg.n_classes == 2 {
                scores.push(row[1]);
            }
            all_probs.push(row.to_vec());
        }
    }
    let score_opt = if cfg.n_classes == 2 { Some(scores.as_slice()) } else { None };
    let report = eval_report(&labels, &predictions, score_opt, cfg.n_classes)?;
    Ok((report, all_probs, total_loss / batches as f64))
}

// decorrelates the init RNG stream from the data/masking stream
const INIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::PAD_ID;
    use ndarray::arr1;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 24,
            hidden: 8,
            layers: 1,
            heads: 2,
            ffn: 16,
            max_positions: 16,
            dropout: 0.0,
            n_classes: 2,
        }
    }

    fn seq(ids: &[u32], max_len: usize) -> EncodedSeq {
        let true_len = ids.len();
        let mut ids = ids.to_vec();
        ids.resize(max_len, PAD_ID);
        let mut mask = vec![1u8; true_len];
        mask.resize(max_len, 0);
        EncodedSeq { ids, attention_mask: mask, true_len }
    }

    fn toy_corpus(n: usize, max_len: usize, vocab: u32, seed: u64) -> Vec<EncodedSeq> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.gen_range(4..max_len - 1);
                let mut ids = vec![0u32];
                for _ in 0..len {
                    ids.push(rng.gen_range(5..vocab));
                }
                ids.push(2);
                seq(&ids, max_len)
            })
            .collect()
    }

    #[test]
    fn adamw_single_step_matches_manual() {
        let mut params = ParamSet::new();
        params.push("w", arr1(&[1.0, -2.0]).into_dyn());
        let mut opt = AdamW::new(0.1, 0.01, &params);
        let grad = arr1(&[0.5, -0.3]).into_dyn();
        opt.apply(&mut params, std::slice::from_ref(&grad)).unwrap();
        // step 1: mhat = g, vhat = g^2, update = lr*(g/(|g|+eps) + wd*p)
        for (i, &p0) in [1.0f64, -2.0].iter().enumerate() {
            let g = grad.as_slice().unwrap()[i];
            let expected = p0 - 0.1 * (g / (g.abs() + 1e-8) + 0.01 * p0);
            let got = params.get("w").as_slice().unwrap()[i];
            assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        }
    }

    #[test]
    fn adamw_detects_nonfinite() {
        let mut params = ParamSet::new();
        params.push("w", arr1(&[1.0]).into_dyn());
        let mut opt = AdamW::new(0.1, 0.0, &params);
        let grad = arr1(&[f64::NAN]).into_dyn();
        assert!(matches!(
            opt.apply(&mut params, std::slice::from_ref(&grad)),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn scheduler_reduction_sequence() {
        // non-improving stream after the first evaluation: reductions land
        // at evaluations 3 and 5 with patience 2
        let mut sched = ReduceOnPlateau::new(SchedulerConfig {
            factor: 0.1,
            patience: 2,
            min_lr: 1e-9,
        });
        let mut lr = 1.0;
        let mut seen = Vec::new();
        for _ in 0..5 {
            sched.observe(2.0, &mut lr);
            seen.push(lr);
        }
        assert_eq!(seen, vec![1.0, 1.0, 0.1, 0.1, 0.010000000000000002]);
    }

    #[test]
    fn scheduler_respects_min_lr_and_never_raises() {
        let mut sched = ReduceOnPlateau::new(SchedulerConfig {
            factor: 0.1,
            patience: 1,
            min_lr: 1e-3,
        });
        let mut lr = 0.01;
        let mut prev = lr;
        for _ in 0..10 {
            sched.observe(1.0, &mut lr);
            assert!(lr <= prev);
            assert!(lr >= 1e-3);
            prev = lr;
        }
        assert_eq!(lr, 1e-3);
    }

    #[test]
    fn scheduler_improvement_resets_patience() {
        let mut sched = ReduceOnPlateau::new(SchedulerConfig {
            factor: 0.5,
            patience: 2,
            min_lr: 0.0,
        });
        let mut lr = 1.0;
        for loss in [5.0, 4.0, 4.5, 3.0, 3.5, 3.6] {
            sched.observe(loss, &mut lr);
        }
        // bad evals: 4.5 (1), 3.5 (1), 3.6 (2) -> one reduction at the end
        assert_eq!(lr, 0.5);
    }

    fn tiny_pretrain_cfg(steps: usize, checkpoint_every: usize) -> TrainConfig {
        TrainConfig {
            max_steps: steps,
            batch_size: 4,
            lr: 1e-3,
            checkpoint_every,
            max_len: 12,
            eval_every: 10,
            valid_fraction: 0.05,
            seed: 7,
            ..TrainConfig::pretrain_defaults()
        }
    }

    #[test]
    fn pretrain_loss_decreases() {
        let cfg = toy_cfg();
        let corpus = toy_corpus(40, 12, 24, 1);
        let dir = tempfile::tempdir().unwrap();
        let out = pretrain(&cfg, &tiny_pretrain_cfg(60, 0), &corpus, "vsum", dir.path(), None, None)
            .unwrap();
        let first: f64 = out.records[..5].iter().map(|r| r.train_loss).sum::<f64>() / 5.0;
        let last: f64 = out.records[55..].iter().map(|r| r.train_loss).sum::<f64>() / 5.0;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        assert!(out.checkpoint.exists());
    }

    #[test]
    fn pretrain_resume_matches_uninterrupted() {
        let cfg = toy_cfg();
        let corpus = toy_corpus(30, 12, 24, 2);
        let dir_a = tempfile::tempdir().unwrap();
        let full =
            pretrain(&cfg, &tiny_pretrain_cfg(20, 10), &corpus, "vsum", dir_a.path(), None, None)
                .unwrap();

        let dir_b = tempfile::tempdir().unwrap();
        let half =
            pretrain(&cfg, &tiny_pretrain_cfg(10, 10), &corpus, "vsum", dir_b.path(), None, None)
                .unwrap();
        let resumed = pretrain(
            &cfg,
            &tiny_pretrain_cfg(20, 10),
            &corpus,
            "vsum",
            dir_b.path(),
            Some(&half.checkpoint),
            None,
        )
        .unwrap();

        for ((n1, v1), (n2, v2)) in full.params.iter().zip(resumed.params.iter()) {
            assert_eq!(n1, n2);
            let diff = (v1 - v2).iter().fold(0.0f64, |m, &d| m.max(d.abs()));
            assert!(diff < 1e-9, "parameter {n1} differs by {diff}");
        }
        // resumed log covers steps 11..20 and matches the tail of the full run
        assert_eq!(resumed.records.len(), 10);
        for (r, f) in resumed.records.iter().zip(&full.records[10..]) {
            assert_eq!(r.step, f.step);
            assert!((r.train_loss - f.train_loss).abs() < 1e-9);
        }
    }

    #[test]
    fn pretrain_rejects_vocab_mismatch_on_resume() {
        let cfg = toy_cfg();
        let corpus = toy_corpus(20, 12, 24, 3);
        let dir = tempfile::tempdir().unwrap();
        let out = pretrain(&cfg, &tiny_pretrain_cfg(10, 10), &corpus, "aaa", dir.path(), None, None)
            .unwrap();
        let err = pretrain(
            &cfg,
            &tiny_pretrain_cfg(20, 10),
            &corpus,
            "bbb",
            dir.path(),
            Some(&out.checkpoint),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    fn separable_dataset(n: usize, max_len: usize) -> Vec<(EncodedSeq, usize)> {
        // class 1 sequences contain token 20, class 0 sequences token 10
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let marker = if label == 1 { 20 } else { 10 };
                let mut ids = vec![0u32];
                for _ in 0..rng.gen_range(3..max_len - 2) {
                    ids.push(marker);
                }
                ids.push(2);
                (seq(&ids, max_len), label)
            })
            .collect()
    }

    #[test]
    fn finetune_mlp_learns_separable_data() {
        let cfg = toy_cfg();
        let data = separable_dataset(16, 12);
        let tcfg = TrainConfig {
            lr: 3e-3,
            max_epochs: 20,
            early_stop_patience: 0,
            batch_size: 4,
            max_len: 12,
            seed: 1,
            ..TrainConfig::finetune_defaults()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let encoder = init_encoder_params(&cfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = finetune(
            &cfg,
            &tcfg,
            &encoder,
            &Head::Mlp,
            &data,
            &data,
            "vsum",
            dir.path(),
            None,
        )
        .unwrap();
        assert!(out.best_metric > 90.0, "best F1 {}", out.best_metric);
        assert!(out.checkpoint.exists());
    }

    #[test]
    fn finetune_cnn_trains_head_only() {
        let cfg = toy_cfg();
        let data = separable_dataset(16, 12);
        let ccfg = CnnConfig {
            emb_dim: 8,
            kernel_sizes: vec![2, 3],
            filters: 6,
            dense: vec![8],
            n_classes: 2,
            dropout: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let encoder = init_encoder_params(&cfg, &mut rng).unwrap();
        let embeddings = crate::heads::frozen_embeddings(encoder.get("tok_emb"), "v", "v").unwrap();
        let head = Head::Cnn {
            cfg: ccfg,
            embeddings,
            source_checksum: "src".to_string(),
        };
        let tcfg = TrainConfig {
            lr: 2e-2,
            max_epochs: 20,
            early_stop_patience: 0,
            batch_size: 4,
            max_len: 12,
            seed: 2,
            ..TrainConfig::finetune_defaults()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = finetune(&cfg, &tcfg, &encoder, &head, &data, &data, "v", dir.path(), None)
            .unwrap();
        assert!(out.best_metric > 90.0, "best F1 {}", out.best_metric);
        // only head parameters in the trained set
        assert!(!out.params.contains("tok_emb"));
        assert!(out.params.contains("cnn.conv2.w"));
    }

    #[test]
    fn uniform_class_weights_match_unweighted() {
        let cfg = toy_cfg();
        let data = separable_dataset(8, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let encoder = init_encoder_params(&cfg, &mut rng).unwrap();
        let base = TrainConfig {
            lr: 1e-3,
            max_epochs: 2,
            batch_size: 4,
            max_len: 12,
            seed: 3,
            ..TrainConfig::finetune_defaults()
        };
        let weighted = TrainConfig {
            class_weights: Some(vec![1.0, 1.0]),
            ..base.clone()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = finetune(&cfg, &base, &encoder, &Head::Mlp, &data, &data, "v", dir_a.path(), None)
            .unwrap();
        let b =
            finetune(&cfg, &weighted, &encoder, &Head::Mlp, &data, &data, "v", dir_b.path(), None)
                .unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert!((ra.train_loss - rb.train_loss).abs() < 1e-9);
        }
    }

    #[test]
    fn finetune_nan_encoder_diverges() {
        let cfg = toy_cfg();
        let data = separable_dataset(8, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut encoder = init_encoder_params(&cfg, &mut rng).unwrap();
        encoder.get_mut("tok_emb")[[7, 0]] = f64::NAN;
        let tcfg = TrainConfig {
            max_epochs: 1,
            batch_size: 4,
            max_len: 12,
            ..TrainConfig::finetune_defaults()
        };
        let dir = tempfile::tempdir().unwrap();
        let err = finetune(&cfg, &tcfg, &encoder, &Head::Mlp, &data, &data, "v", dir.path(), None)
            .unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    #[test]
    fn predict_probs_rows_sum_to_one() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut params = init_encoder_params(&cfg, &mut rng).unwrap();
        params.extend(init_mlp_head(&cfg, &mut rng));
        let batch = vec![seq(&[0, 7, 2], 12), seq(&[0, 20, 20, 2], 12)];
        let probs = predict_probs(&cfg, &params, &Head::Mlp, &batch).unwrap();
        for row in probs.rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn config_validation() {
        let mut t = TrainConfig::pretrain_defaults();
        t.max_steps = MAX_PRETRAIN_STEPS + 1;
        assert!(t.validate().is_err());
        let mut t = TrainConfig::finetune_defaults();
        t.lr = 0.0;
        assert!(t.validate().is_err());
        assert!(TrainConfig::pretrain_defaults().validate().is_ok());
        assert!(TrainConfig::finetune_defaults().validate().is_ok());
    }
}
