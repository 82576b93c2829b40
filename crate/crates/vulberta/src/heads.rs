//! Classification heads: an MLP over the encoder's first-position hidden
//! state, and a TextCNN over frozen pre-trained token embeddings.

use ndarray::{Array2, ArrayD, Ix2};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{BoundParams, Mode, ModelConfig, ParamSet};
use crate::tape::{Tape, VarId};
use crate::tokenizer::{EncodedSeq, PAD_ID};

/// Initialize MLP head parameters: dense `hidden -> hidden` with tanh, then
/// a projection to `n_classes` logits.
pub fn init_mlp_head(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = ParamSet::new();
    p.push("head.dense.w", super::model::normal_init(rng, cfg.hidden, cfg.hidden));
    p.push("head.dense.b", super::model::zeros1(cfg.hidden));
    p.push("head.out.w", super::model::normal_init(rng, cfg.hidden, cfg.n_classes));
    p.push("head.out.b", super::model::zeros1(cfg.n_classes));
    p
}

pub fn mlp_head_count(cfg: &ModelConfig) -> usize {
    cfg.hidden * cfg.hidden + cfg.hidden + cfg.hidden * cfg.n_classes + cfg.n_classes
}

/// Classification logits from encoder output. `hidden` is the
/// `[batch * t_len, hidden]` encoder output; the head reads the first
/// position of each sequence (the `<s>` token).
pub fn mlp_logits(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    hidden: VarId,
    batch_size: usize,
    t_len: usize,
    mode: &mut Mode,
) -> VarId {
    let first_rows: Vec<usize> = (0..batch_size).map(|b| b * t_len).collect();
    let cls = tape.gather_rows(hidden, first_rows);
    let d = tape.matmul(cls, bound.var("head.dense.w"));
    let d = tape.add(d, bound.var("head.dense.b"));
    let mut a = tape.tanh(d);
    a = super::model::dropout(tape, a, cfg.dropout, mode);
    let out = tape.matmul(a, bound.var("head.out.w"));
    tape.add(out, bound.var("head.out.b"))
}

/// TextCNN hyperparameters. Defaults follow the reference setup: kernel
/// widths 3, 4 and 5 with 200 filters each over 768-dimensional embeddings,
/// then dense layers 600 -> 256 -> 128 -> `n_classes`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CnnConfig {
    pub emb_dim: usize,
    pub kernel_sizes: Vec<usize>,
    pub filters: usize,
    pub dense: Vec<usize>,
    pub n_classes: usize,
    pub dropout: f64,
}

impl CnnConfig {
    pub fn defaults(n_classes: usize) -> Self {
        CnnConfig {
            emb_dim: 768,
            kernel_sizes: vec![3, 4, 5],
            filters: 200,
            dense: vec![256, 128],
            n_classes,
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_sizes.is_empty() || self.filters == 0 || self.emb_dim == 0 {
            return Err(Error::Config("cnn head needs kernels, filters and embeddings".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn pooled_dim(&self) -> usize {
        self.kernel_sizes.len() * self.filters
    }
}

/// Initialize CNN head parameters. Convolution over a width-`k` window is a
/// dense map from the flattened `k * emb_dim` window, so its weight tensor
/// is `[k * emb_dim, filters]`.
pub fn init_cnn_params(cfg: &CnnConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    for &k in &cfg.kernel_sizes {
        p.push(&format!("cnn.conv{k}.w"), super::model::normal_init(rng, k * cfg.emb_dim, cfg.filters));
        p.push(&format!("cnn.conv{k}.b"), super::model::zeros1(cfg.filters));
    }
    let mut dims = vec![cfg.pooled_dim()];
    dims.extend(&cfg.dense);
    dims.push(cfg.n_classes);
    for (i, pair) in dims.windows(2).enumerate() {
        p.push(&format!("cnn.dense{i}.w"), super::model::normal_init(rng, pair[0], pair[1]));
        p.push(&format!("cnn.dense{i}.b"), super::model::zeros1(pair[1]));
    }
    Ok(p)
}

/// Closed-form trainable parameter count of the CNN head. The frozen
/// embedding matrix is excluded: it is not trained.
pub fn cnn_count_params(cfg: &CnnConfig) -> usize {
    let conv: usize = cfg
        .kernel_sizes
        .iter()
        .map(|&k| k * cfg.emb_dim * cfg.filters + cfg.filters)
        .sum();
    let mut dims = vec![cfg.pooled_dim()];
    dims.extend(&cfg.dense);
    dims.push(cfg.n_classes);
    let dense: usize = dims.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
    conv + dense
}

/// Build the frozen embedding table for the CNN head from pre-trained token
/// embeddings. The `<pad>` row is zeroed so padding contributes nothing to
/// convolution windows. The vocabulary checksum stored with the embeddings
/// must match the vocabulary used for encoding.
pub fn frozen_embeddings(
    tok_emb: &ArrayD<f64>,
    stored_vocab_checksum: &str,
    expected_vocab_checksum: &str,
) -> Result<Array2<f64>> {
    if stored_vocab_checksum != expected_vocab_checksum {
        return Err(Error::Integrity(format!(
            "embedding vocabulary checksum {stored_vocab_checksum} does not match \
             encoding vocabulary checksum {expected_vocab_checksum}"
        )));
    }
    let mut emb = tok_emb
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Input("token embeddings must be 2-D".into()))?
        .to_owned();
    emb.row_mut(PAD_ID as usize).fill(0.0);
    Ok(emb)
}

/// CNN head forward pass: embed each sequence with the frozen table, run
/// each convolution as `im2col(x) @ w + b`, ReLU, max-pool over time, concat
/// the pooled features, then the dense stack with ReLU between layers.
///
/// The embedding lookup enters the tape as a constant, so no gradient flows
/// into the embedding table by construction.
pub fn cnn_logits(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &CnnConfig,
    embeddings: &Array2<f64>,
    batch: &[EncodedSeq],
    mode: &mut Mode,
) -> Result<VarId> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if embeddings.ncols() != cfg.emb_dim {
        return Err(Error::Config(format!(
            "embedding table has {} columns but head expects {}",
            embeddings.ncols(),
            cfg.emb_dim
        )));
    }
    let t_len = batch[0].max_len();
    let max_k = *cfg.kernel_sizes.iter().max().expect("non-empty kernels");
    if t_len < max_k {
        return Err(Error::Input(format!(
            "sequence length {t_len} shorter than widest kernel {max_k}"
        )));
    }

    let mut pooled_rows = Vec::with_capacity(batch.len());
    for seq in batch {
        if seq.max_len() != t_len {
            return Err(Error::Input("ragged batch".into()));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= embeddings.nrows()) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for embedding table with {} rows",
                embeddings.nrows()
            )));
        }
        let mut per_kernel = Vec::with_capacity(cfg.kernel_sizes.len());
        for &k in &cfg.kernel_sizes {
            let windows = t_len - k + 1;
            let mut cols = Array2::zeros((windows, k * cfg.emb_dim));
            for w in 0..windows {
                for j in 0..k {
                    let row = embeddings.row(seq.ids[w + j] as usize);
                    cols.slice_mut(ndarray::s![w, j * cfg.emb_dim..(j + 1) * cfg.emb_dim])
                        .assign(&row);
                }
            }
            let x = tape.leaf2(cols);
            let conv = tape.matmul(x, bound.var(&format!("cnn.conv{k}.w")));
            let conv = tape.add(conv, bound.var(&format!("cnn.conv{k}.b")));
            let act = tape.relu(conv);
            per_kernel.push(tape.max_cols(act));
        }
        pooled_rows.push(tape.concat_cols(&per_kernel));
    }
    let mut x = tape.concat_rows(&pooled_rows);
    x = super::model::dropout(tape, x, cfg.dropout, mode);
    let n_dense = cfg.dense.len() + 1;
    for i in 0..n_dense {
        let m = tape.matmul(x, bound.var(&format!("cnn.dense{i}.w")));
        x = tape.add(m, bound.var(&format!("cnn.dense{i}.b")));
        if i + 1 < n_dense {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bind_params, encoder_forward, init_encoder_params};
    use ndarray::arr2;
    use rand::SeedableRng;

    fn toy_model_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            hidden: 8,
            layers: 1,
            heads: 2,
            ffn: 16,
            max_positions: 16,
            dropout: 0.0,
            n_classes: 2,
        }
    }

    fn toy_cnn_cfg() -> CnnConfig {
        CnnConfig {
            emb_dim: 6,
            kernel_sizes: vec![2, 3],
            filters: 4,
            dense: vec![5],
            n_classes: 2,
            dropout: 0.0,
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

    #[test]
    fn default_cnn_trainable_count() {
        let cfg = CnnConfig::defaults(2);
        assert_eq!(cnn_count_params(&cfg), 2_030_810);
    }

    #[test]
    fn cnn_count_matches_enumeration() {
        let cfg = toy_cnn_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = init_cnn_params(&cfg, &mut rng).unwrap();
        assert_eq!(params.total_scalars(), cnn_count_params(&cfg));
    }

    #[test]
    fn mlp_count_matches_enumeration() {
        let cfg = toy_model_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = init_mlp_head(&cfg, &mut rng);
        assert_eq!(params.total_scalars(), mlp_head_count(&cfg));
    }

    #[test]
    fn mlp_logits_shape_and_determinism() {
        let cfg = toy_model_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = init_encoder_params(&cfg, &mut rng).unwrap();
        params.extend(init_mlp_head(&cfg, &mut rng));
        let batch = vec![seq(&[0, 7, 2], 8), seq(&[0, 9, 10, 2], 8)];
        let run = || {
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &params);
            let h = encoder_forward(&mut tape, &bound, &cfg, &batch, &mut Mode::Eval).unwrap();
            let logits = mlp_logits(&mut tape, &bound, &cfg, h, 2, 8, &mut Mode::Eval);
            tape.value2(logits).to_owned()
        };
        let a = run();
        assert_eq!(a.shape(), &[2, 2]);
        assert_eq!(a, run());
    }

    #[test]
    fn cnn_pooling_is_translation_invariant() {
        // the same token pattern at different offsets inside padding pools
        // to identical features, because pad embeddings are zero
        let cfg = toy_cnn_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = init_cnn_params(&cfg, &mut rng).unwrap();
        let emb = Array2::from_shape_fn((20, 6), |(i, j)| ((i * 7 + j) as f64 * 0.13).sin());
        let mut emb = emb;
        emb.row_mut(PAD_ID as usize).fill(0.0);

        let mut a = seq(&[], 12);
        a.ids[2] = 7;
        a.ids[3] = 9;
        a.ids[4] = 11;
        let mut b = seq(&[], 12);
        b.ids[6] = 7;
        b.ids[7] = 9;
        b.ids[8] = 11;

        let run = |s: &EncodedSeq| {
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &params);
            let logits =
                cnn_logits(&mut tape, &bound, &cfg, &emb, &[s.clone()], &mut Mode::Eval).unwrap();
            tape.value2(logits).to_owned()
        };
        let la = run(&a);
        let lb = run(&b);
        for c in 0..2 {
            assert!((la[[0, c]] - lb[[0, c]]).abs() < 1e-9);
        }
    }

    #[test]
    fn cnn_matches_manual_single_kernel() {
        let cfg = CnnConfig {
            emb_dim: 3,
            kernel_sizes: vec![2],
            filters: 2,
            dense: vec![],
            n_classes: 2,
            dropout: 0.0,
        };
        let mut p = ParamSet::new();
        p.push(
            "cnn.conv2.w",
            arr2(&[
                [0.1, -0.2],
                [0.3, 0.4],
                [-0.5, 0.6],
                [0.7, -0.8],
                [0.9, 0.1],
                [-0.2, 0.3],
            ])
            .into_dyn(),
        );
        p.push("cnn.conv2.b", ndarray::arr1(&[0.05, -0.05]).into_dyn());
        p.push("cnn.dense0.w", arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn());
        p.push("cnn.dense0.b", ndarray::arr1(&[0.0, 0.0]).into_dyn());
        let emb = arr2(&[
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0],
            [1.0, 2.0, 3.0],
            [4.0, 5.0, 6.0],
        ]);
        let s = EncodedSeq {
            ids: vec![2, 3, 2],
            attention_mask: vec![1, 1, 1],
            true_len: 3,
        };
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &p);
        let logits = cnn_logits(&mut tape, &bound, &cfg, &emb, &[s], &mut Mode::Eval).unwrap();
        let got = tape.value2(logits).to_owned();

        // two windows: [e2 e3] and [e3 e2]; conv, relu, max over windows
        let w = p.get("cnn.conv2.w").view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let windows = [
            [1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            [4.0, 5.0, 6.0, 1.0, 2.0, 3.0],
        ];
        let mut expected = [f64::NEG_INFINITY; 2];
        for win in &windows {
            for f in 0..2 {
                let mut v = if f == 0 { 0.05 } else { -0.05 };
                for (i, &x) in win.iter().enumerate() {
                    v += x * w[[i, f]];
                }
                expected[f] = expected[f].max(v.max(0.0));
            }
        }
        for f in 0..2 {
            assert!((got[[0, f]] - expected[f]).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_embeddings_checksum_enforced() {
        let emb = ArrayD::zeros(vec![10, 4]);
        assert!(frozen_embeddings(&emb, "aaa", "bbb").is_err());
        let ok = frozen_embeddings(&emb, "aaa", "aaa").unwrap();
        assert_eq!(ok.nrows(), 10);
    }

    #[test]
    fn frozen_embeddings_zero_pad_row() {
        let emb = ArrayD::from_elem(vec![10, 4], 1.5);
        let table = frozen_embeddings(&emb, "x", "x").unwrap();
        assert!(table.row(PAD_ID as usize).iter().all(|&v| v == 0.0));
        assert!(table.row(0).iter().all(|&v| v == 1.5));
    }

    #[test]
    fn cnn_rejects_short_sequences() {
        let cfg = toy_cnn_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = init_cnn_params(&cfg, &mut rng).unwrap();
        let emb = Array2::zeros((20, 6));
        let s = seq(&[0, 2], 2);
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        assert!(cnn_logits(&mut tape, &bound, &cfg, &emb, &[s], &mut Mode::Eval).is_err());
    }

    #[test]
    fn cnn_embedding_gradient_is_zero_by_construction() {
        // the embedding lookup is a tape constant; check that a backward
        // pass assigns gradient only to head parameters
        let cfg = toy_cnn_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = init_cnn_params(&cfg, &mut rng).unwrap();
        let emb = Array2::from_shape_fn((20, 6), |(i, j)| ((i + j) as f64 * 0.21).cos());
        let s = seq(&[0, 7, 9, 11, 2], 8);
        let mut tape = Tape::new();
        let emb_leaf = tape.leaf2(emb.clone());
        let bound = bind_params(&mut tape, &params);
        let logits = cnn_logits(&mut tape, &bound, &cfg, &emb, &[s], &mut Mode::Eval).unwrap();
        let loss = tape.cross_entropy(logits, &[1], None);
        let grads = tape.backward(loss);
        assert!(grads[emb_leaf.index()].iter().all(|&g| g == 0.0));
        let w_grad = &grads[bound.var("cnn.dense0.w").index()];
        assert!(w_grad.iter().any(|&g| g != 0.0));
    }
}
