//! RoBERTa-style transformer encoder with token/position embeddings and a
//! masked-language-modeling head, desk scale, exact gradients via [`crate::tape`].

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayD, Ix2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tokenizer::{EncodedSeq, FIRST_NON_RESERVED_ID, MASK_ID};

pub mod checkpoint;

const NEG_ATTN: f64 = -1e30;
const INIT_STD: f64 = 0.02;

/// Transformer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub n_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.layers == 0 {
            return Err(Error::Config("hidden/layers/heads must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden ({}) must be divisible by heads ({})",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Reference base configuration (~125M parameters with a 50k vocabulary).
    pub fn base(vocab_size: usize, n_classes: usize) -> Self {
        ModelConfig {
            vocab_size,
            hidden: 768,
            layers: 12,
            heads: 12,
            ffn: 3072,
            max_positions: 514,
            dropout: 0.1,
            n_classes,
        }
    }

    pub fn medium(vocab_size: usize, n_classes: usize) -> Self {
        ModelConfig {
            hidden: 512,
            layers: 8,
            heads: 8,
            ffn: 2048,
            ..Self::base(vocab_size, n_classes)
        }
    }

    pub fn small(vocab_size: usize, n_classes: usize) -> Self {
        ModelConfig {
            hidden: 256,
            layers: 4,
            heads: 4,
            ffn: 1024,
            ..Self::base(vocab_size, n_classes)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, ArrayD<f64>)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        &self.entries[self.index[name]].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        let i = self.index[name];
        &mut self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count by brute-force enumeration.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    /// Merge another parameter set into this one (e.g. a classification head
    /// on top of encoder parameters).
    pub fn extend(&mut self, other: ParamSet) {
        for (name, value) in other.entries {
            self.push(&name, value);
        }
    }
}

/// Parameters bound onto a tape as leaves, addressable by name.
pub struct BoundParams {
    vars: HashMap<String, VarId>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> VarId {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }
}

/// Insert every parameter tensor as a tape leaf.
pub fn bind_params(tape: &mut Tape, params: &ParamSet) -> BoundParams {
    let mut vars = HashMap::new();
    for (name, value) in params.iter() {
        vars.insert(name.to_string(), tape.leaf(value.clone()));
    }
    BoundParams { vars }
}

/// Read the gradient of each parameter out of a completed backward pass.
pub fn collect_grads(
    tape_grads: &[ArrayD<f64>],
    bound: &BoundParams,
    params: &ParamSet,
) -> Vec<ArrayD<f64>> {
    params
        .iter()
        .map(|(name, _)| tape_grads[bound.var(name).index()].clone())
        .collect()
}

pub(crate) fn normal_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ArrayD<f64> {
    let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng)).into_dyn()
}

pub(crate) fn zeros1(n: usize) -> ArrayD<f64> {
    Array1::<f64>::zeros(n).into_dyn()
}

fn ones1(n: usize) -> ArrayD<f64> {
    Array1::<f64>::ones(n).into_dyn()
}

/// Initialize encoder plus MLM-head parameters. The MLM output projection is
/// tied to the token embeddings; only its bias is a separate tensor.
pub fn init_encoder_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    p.push("tok_emb", normal_init(rng, cfg.vocab_size, cfg.hidden));
    p.push("pos_emb", normal_init(rng, cfg.max_positions, cfg.hidden));
    for l in 0..cfg.layers {
        for proj in ["wq", "wk", "wv", "wo"] {
            p.push(&format!("layer{l}.attn.{proj}"), normal_init(rng, cfg.hidden, cfg.hidden));
            p.push(&format!("layer{l}.attn.{proj}_bias"), zeros1(cfg.hidden));
        }
        p.push(&format!("layer{l}.ln1.gamma"), ones1(cfg.hidden));
        p.push(&format!("layer{l}.ln1.beta"), zeros1(cfg.hidden));
        p.push(&format!("layer{l}.ffn.w1"), normal_init(rng, cfg.hidden, cfg.ffn));
        p.push(&format!("layer{l}.ffn.b1"), zeros1(cfg.ffn));
        p.push(&format!("layer{l}.ffn.w2"), normal_init(rng, cfg.ffn, cfg.hidden));
        p.push(&format!("layer{l}.ffn.b2"), zeros1(cfg.hidden));
        p.push(&format!("layer{l}.ln2.gamma"), ones1(cfg.hidden));
        p.push(&format!("layer{l}.ln2.beta"), zeros1(cfg.hidden));
    }
    p.push("mlm.dense.w", normal_init(rng, cfg.hidden, cfg.hidden));
    p.push("mlm.dense.b", zeros1(cfg.hidden));
    p.push("mlm.ln.gamma", ones1(cfg.hidden));
    p.push("mlm.ln.beta", zeros1(cfg.hidden));
    p.push("mlm.bias", zeros1(cfg.vocab_size));
    Ok(p)
}

/// Closed-form trainable parameter count for the encoder with tied MLM head.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let h = cfg.hidden;
    let per_layer = 4 * (h * h + h)             // q, k, v, o projections
        + 2 * (2 * h)                            // two layer norms
        + (h * cfg.ffn + cfg.ffn)                // ffn in
        + (cfg.ffn * h + h); // ffn out
    cfg.vocab_size * h                           // token embeddings
        + cfg.max_positions * h                  // position embeddings
        + cfg.layers * per_layer
        + (h * h + h)                            // mlm transform dense
        + 2 * h                                  // mlm layer norm
        + cfg.vocab_size // mlm decoder bias (weights tied)
}

/// Forward mode: training enables dropout driven by the given RNG.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

pub(crate) fn dropout(tape: &mut Tape, x: VarId, rate: f64, mode: &mut Mode) -> VarId {
    match mode {
        Mode::Train(rng) if rate > 0.0 => {
            let shape = tape.value(x).raw_dim();
            let keep = 1.0 - rate;
            let mask =
                ArrayD::from_shape_fn(shape, |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
            let m = tape.leaf(mask);
            tape.mul(x, m)
        }
        _ => x,
    }
}

/// Run the encoder over a batch. Returns the hidden states as a single
/// `[batch * max_len, hidden]` node, row-major by sequence.
///
/// Standard post-layer-norm order: embeddings, then per layer multi-head
/// self-attention with padding mask, residual, layer norm, GELU FFN,
/// residual, layer norm. Attention-masked positions contribute `-1e30` to
/// attention logits.
pub fn encoder_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    batch: &[EncodedSeq],
    mode: &mut Mode,
) -> Result<VarId> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let t_len = batch[0].max_len();
    if t_len > cfg.max_positions {
        return Err(Error::Config(format!(
            "sequence length {} exceeds max_positions {}",
            t_len, cfg.max_positions
        )));
    }
    for seq in batch {
        if seq.max_len() != t_len {
            return Err(Error::Input("ragged batch".into()));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocab_size {}",
                cfg.vocab_size
            )));
        }
    }
    let b = batch.len();
    let rows: Vec<usize> = batch
        .iter()
        .flat_map(|s| s.ids.iter().map(|&id| id as usize))
        .collect();
    let tok = tape.gather_rows(bound.var("tok_emb"), rows);
    let pos_rows: Vec<usize> = (0..b).flat_map(|_| 0..t_len).collect();
    let pos = tape.gather_rows(bound.var("pos_emb"), pos_rows);
    let mut x = tape.add(tok, pos);
    x = dropout(tape, x, cfg.dropout, mode);

    // additive attention masks, one [t, t] constant per sequence
    let attn_masks: Vec<ArrayD<f64>> = batch
        .iter()
        .map(|seq| {
            Array2::from_shape_fn((t_len, t_len), |(_, j)| {
                if seq.attention_mask[j] == 1 {
                    0.0
                } else {
                    NEG_ATTN
                }
            })
            .into_dyn()
        })
        .collect();

    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    for l in 0..cfg.layers {
        let name = |s: &str| format!("layer{l}.{s}");
        let q = linear(tape, x, bound, &name("attn.wq"), &name("attn.wq_bias"));
        let k = linear(tape, x, bound, &name("attn.wk"), &name("attn.wk_bias"));
        let v = linear(tape, x, bound, &name("attn.wv"), &name("attn.wv_bias"));

        let dh = cfg.head_dim();
        let mut seq_outputs = Vec::with_capacity(b);
        for bi in 0..b {
            let row_range = bi * t_len..(bi + 1) * t_len;
            let mut head_outputs = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let col_range = h * dh..(h + 1) * dh;
                let qs = tape.slice2d(q, row_range.clone(), col_range.clone());
                let ks = tape.slice2d(k, row_range.clone(), col_range.clone());
                let vs = tape.slice2d(v, row_range.clone(), col_range.clone());
                let kt = tape.transpose(ks);
                let logits = tape.matmul(qs, kt);
                let scaled = tape.scale(logits, scale);
                let masked = tape.add_const(scaled, &attn_masks[bi]);
                let probs = tape.softmax_rows(masked);
                let ctx = tape.matmul(probs, vs);
                head_outputs.push(ctx);
            }
            seq_outputs.push(tape.concat_cols(&head_outputs));
        }
        let ctx = tape.concat_rows(&seq_outputs);
        let mut attn_out = linear(tape, ctx, bound, &name("attn.wo"), &name("attn.wo_bias"));
        attn_out = dropout(tape, attn_out, cfg.dropout, mode);
        let res1 = tape.add(x, attn_out);
        let ln1 = tape.layer_norm(res1, bound.var(&name("ln1.gamma")), bound.var(&name("ln1.beta")));

        let ff1 = linear(tape, ln1, bound, &name("ffn.w1"), &name("ffn.b1"));
        let act = tape.gelu(ff1);
        let mut ff2 = linear(tape, act, bound, &name("ffn.w2"), &name("ffn.b2"));
        ff2 = dropout(tape, ff2, cfg.dropout, mode);
        let res2 = tape.add(ln1, ff2);
        x = tape.layer_norm(res2, bound.var(&name("ln2.gamma")), bound.var(&name("ln2.beta")));
    }
    Ok(x)
}

fn linear(tape: &mut Tape, x: VarId, bound: &BoundParams, w: &str, b: &str) -> VarId {
    let m = tape.matmul(x, bound.var(w));
    tape.add(m, bound.var(b))
}

/// How one selected position was altered during masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Replacement {
    MaskToken,
    RandomToken(u32),
    Unchanged,
}

/// Record of a masking pass over one sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskingPlan {
    pub positions: Vec<usize>,
    pub replacements: Vec<Replacement>,
    pub originals: Vec<u32>,
}

/// Select each eligible (non-reserved, non-padding) position independently
/// with probability `rate`; replace 80% with `<mask>`, 10% with a uniform
/// random non-reserved token, leave 10% unchanged.
pub fn apply_masking(
    seq: &EncodedSeq,
    vocab_size: usize,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(EncodedSeq, MaskingPlan)> {
    if !(0.0..1.0).contains(&rate) || rate == 0.0 {
        return Err(Error::Config(format!("mask rate must be in (0,1), got {rate}")));
    }
    let mut masked = seq.clone();
    let mut plan = MaskingPlan::default();
    for p in 0..seq.true_len {
        let id = seq.ids[p];
        if id < FIRST_NON_RESERVED_ID {
            continue;
        }
        if rng.gen::<f64>() >= rate {
            continue;
        }
        let roll = rng.gen::<f64>();
        let replacement = if roll < 0.8 {
            masked.ids[p] = MASK_ID;
            Replacement::MaskToken
        } else if roll < 0.9 {
            let random =
                rng.gen_range(FIRST_NON_RESERVED_ID..vocab_size as u32);
            masked.ids[p] = random;
            Replacement::RandomToken(random)
        } else {
            Replacement::Unchanged
        };
        plan.positions.push(p);
        plan.replacements.push(replacement);
        plan.originals.push(id);
    }
    Ok((masked, plan))
}

/// Mean cross-entropy over masked positions. Returns the scalar loss node;
/// if no position is masked in the whole batch the loss is a constant zero
/// with zero gradient.
pub fn mlm_loss(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    masked_batch: &[EncodedSeq],
    plans: &[MaskingPlan],
    mode: &mut Mode,
) -> Result<VarId> {
    if masked_batch.len() != plans.len() {
        return Err(Error::Input("one masking plan per sequence required".into()));
    }
    let hidden = encoder_forward(tape, bound, cfg, masked_batch, mode)?;
    let t_len = masked_batch[0].max_len();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (bi, plan) in plans.iter().enumerate() {
        for (&p, &orig) in plan.positions.iter().zip(&plan.originals) {
            rows.push(bi * t_len + p);
            targets.push(orig as usize);
        }
    }
    if rows.is_empty() {
        log::warn!("no masked positions in batch; mlm loss defined as 0");
        return Ok(tape.leaf(ndarray::arr0(0.0).into_dyn()));
    }
    let picked = tape.gather_rows(hidden, rows);
    let dense = linear(tape, picked, bound, "mlm.dense.w", "mlm.dense.b");
    let act = tape.gelu(dense);
    let normed = tape.layer_norm(act, bound.var("mlm.ln.gamma"), bound.var("mlm.ln.beta"));
    let emb_t = tape.transpose(bound.var("tok_emb"));
    let logits = tape.matmul(normed, emb_t);
    let logits = tape.add(logits, bound.var("mlm.bias"));
    Ok(tape.cross_entropy(logits, &targets, None))
}

/// Extend position embeddings to a longer maximum by copying existing rows
/// cyclically; training then continues on the copies.
pub fn extend_position_embeddings(params: &mut ParamSet, cfg: &mut ModelConfig, new_max_positions: usize) {
    if new_max_positions <= cfg.max_positions {
        return;
    }
    let old = params
        .get("pos_emb")
        .view()
        .into_dimensionality::<Ix2>()
        .expect("pos_emb 2-D")
        .to_owned();
    let mut extended = Array2::zeros((new_max_positions, old.ncols()));
    for i in 0..new_max_positions {
        extended.row_mut(i).assign(&old.row(i % old.nrows()));
    }
    *params.get_mut("pos_emb") = extended.into_dyn();
    cfg.max_positions = new_max_positions;
}
