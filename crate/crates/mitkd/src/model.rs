//! Pre-norm transformer encoder with task heads.
//!
//! The encoder exposes its per-layer post-projection query/key/value tensors,
//! which is the raw material for relation distillation. All forward passes run
//! through a [`Tape`], so the same code path serves inference and training.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.hidden_size == 0
            || self.num_heads == 0
            || self.ffn_size == 0
            || self.max_seq_len == 0
        {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::config(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.vocab_size < 5 {
            return Err(Error::config(
                "vocab_size must cover the 4 special tokens plus content",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    SequenceClassification,
    MaskedTokenPrediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadInfo {
    pub kind: HeadKind,
    pub output_dim: usize,
}

/// Named parameter collection with deterministic (lexicographic) iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor.with_grad());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Bitwise equality of all values, ignoring gradients.
    pub fn same_values(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.iter().zip(other.iter()).all(|((na, ta), (nb, tb))| {
                na == nb && ta.shape() == tb.shape() && ta.data() == tb.data()
            })
    }
}

/// Parameter names bound onto a tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Bind every parameter. With `trainable` false the leaves are frozen and
    /// can never receive gradient.
    pub fn bind_all(tape: &mut Tape, params: &ParamSet, trainable: bool) -> Self {
        Self::bind_filtered(tape, params, trainable, |_| true)
    }

    pub fn bind_filtered(
        tape: &mut Tape,
        params: &ParamSet,
        trainable: bool,
        keep: impl Fn(&str) -> bool,
    ) -> Self {
        let mut vars = BTreeMap::new();
        for (name, tensor) in params.iter() {
            if keep(name) {
                let var = if trainable {
                    tape.leaf(tensor)
                } else {
                    tape.frozen(tensor)
                };
                vars.insert(name.clone(), var);
            }
        }
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter {name} not bound")))
    }

    /// Gradients accumulated by the last backward pass, keyed by name.
    /// Parameters that received no gradient are absent.
    pub fn collect_grads(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            if let Some(g) = tape.grad(*var) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}

/// A batch of equal-length sequences, flattened row-major as `[B·L]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub seq_len: usize,
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn single(ids: &[usize], mask: &[bool]) -> Result<Self> {
        if ids.len() != mask.len() || ids.is_empty() {
            return Err(Error::contract("Batch::single: ids/mask length mismatch"));
        }
        Ok(Batch {
            seq_len: ids.len(),
            ids: ids.to_vec(),
            mask: mask.to_vec(),
        })
    }

    /// Stack sequences, padding shorter ones with `pad_id` (mask false).
    pub fn from_sequences(seqs: &[Vec<usize>], pad_id: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::contract("Batch::from_sequences: empty batch"));
        }
        let seq_len = seqs.iter().map(Vec::len).max().unwrap();
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut mask = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            ids.extend_from_slice(s);
            mask.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(pad_id, seq_len - s.len()));
            mask.extend(std::iter::repeat_n(false, seq_len - s.len()));
        }
        Ok(Batch { seq_len, ids, mask })
    }

    pub fn size(&self) -> usize {
        self.ids.len() / self.seq_len
    }
}

/// Post-projection, pre-attention internals of one layer for one sequence.
#[derive(Debug, Clone)]
pub struct LayerInternals {
    pub layer_index: usize,
    /// `[num_heads, seq_len, head_dim]`
    pub queries: Tensor,
    pub keys: Tensor,
    pub values: Tensor,
}

/// Tape handles to one layer's internals for a whole batch.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub layer_index: usize,
    /// `[B·H, L, head_dim]`
    pub queries: Var,
    pub keys: Var,
    pub values: Var,
    /// `[B·H, L, L]` attention probabilities actually used by this layer.
    pub probs: Var,
}

/// Result of a batched encoder forward on a tape.
#[derive(Debug)]
pub struct EncoderVars {
    /// `[B·L, hidden]` final hidden states.
    pub hidden: Var,
    pub layers: Vec<LayerVars>,
}

/// A batch prepared for masked-language-model training.
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    pub batch: Batch,
    /// Flat row indices into `[B·L]` where predictions are scored.
    pub target_positions: Vec<usize>,
    pub target_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub heads: BTreeMap<String, HeadInfo>,
}

pub fn init_model(config: &ModelConfig, seed: u64) -> Result<EncoderModel> {
    EncoderModel::init(config, seed)
}

impl EncoderModel {
    /// Weights are Normal(0, 0.02), biases and norm biases 0, norm gains 1;
    /// fully determined by the seed. The masked-token head (decoder tied to
    /// the input embedding, plus a vocab bias) is attached from the start.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let d = config.hidden_size;
        let mut params = ParamSet::default();
        params.insert(
            "embed.token",
            Tensor::randn(vec![config.vocab_size, d], INIT_STD, &mut rng),
        );
        params.insert(
            "embed.pos",
            Tensor::randn(vec![config.max_seq_len, d], INIT_STD, &mut rng),
        );
        for i in 0..config.num_layers {
            let p = format!("layer{i:02}");
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert(
                    format!("{p}.attn.{w}"),
                    Tensor::randn(vec![d, d], INIT_STD, &mut rng),
                );
            }
            for b in ["bq", "bk", "bv", "bo"] {
                params.insert(format!("{p}.attn.{b}"), Tensor::zeros(vec![d]));
            }
            for ln in ["ln1", "ln2"] {
                params.insert(format!("{p}.{ln}.gain"), Tensor::full(vec![d], 1.0));
                params.insert(format!("{p}.{ln}.bias"), Tensor::zeros(vec![d]));
            }
            params.insert(
                format!("{p}.ffn.w1"),
                Tensor::randn(vec![d, config.ffn_size], INIT_STD, &mut rng),
            );
            params.insert(format!("{p}.ffn.b1"), Tensor::zeros(vec![config.ffn_size]));
            params.insert(
                format!("{p}.ffn.w2"),
                Tensor::randn(vec![config.ffn_size, d], INIT_STD, &mut rng),
            );
            params.insert(format!("{p}.ffn.b2"), Tensor::zeros(vec![d]));
        }
        params.insert("final_norm.gain", Tensor::full(vec![d], 1.0));
        params.insert("final_norm.bias", Tensor::zeros(vec![d]));
        // Masked-token head: transform, then a decoder tied to the input
        // embedding plus a vocab bias.
        params.insert(
            "mlm.dense",
            Tensor::randn(vec![d, d], INIT_STD, &mut rng),
        );
        params.insert("mlm.dense_bias", Tensor::zeros(vec![d]));
        params.insert("mlm.ln.gain", Tensor::full(vec![d], 1.0));
        params.insert("mlm.ln.bias", Tensor::zeros(vec![d]));
        params.insert("mlm.bias", Tensor::zeros(vec![config.vocab_size]));

        let mut heads = BTreeMap::new();
        heads.insert(
            "mlm".to_string(),
            HeadInfo {
                kind: HeadKind::MaskedTokenPrediction,
                output_dim: config.vocab_size,
            },
        );
        Ok(EncoderModel {
            config: config.clone(),
            params,
            heads,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Attach a fresh classification head over the CLS position.
    pub fn add_classification_head(&mut self, name: &str, n_classes: usize, seed: u64) -> Result<()> {
        if n_classes < 2 {
            return Err(Error::config(format!(
                "classification head {name} needs output_dim >= 2, got {n_classes}"
            )));
        }
        let mut rng = Rng::new(seed);
        self.params.insert(
            format!("head.{name}.w"),
            Tensor::randn(vec![self.config.hidden_size, n_classes], INIT_STD, &mut rng),
        );
        self.params
            .insert(format!("head.{name}.b"), Tensor::zeros(vec![n_classes]));
        self.heads.insert(
            name.to_string(),
            HeadInfo {
                kind: HeadKind::SequenceClassification,
                output_dim: n_classes,
            },
        );
        Ok(())
    }

    pub fn remove_head(&mut self, name: &str) {
        self.heads.remove(name);
        self.params.remove_prefix(&format!("head.{name}."));
    }

    /// Drop every classification head, keeping only the encoder and the
    /// masked-token head. Used when handing a model to distillation.
    pub fn strip_classification_heads(&mut self) {
        let names: Vec<String> = self
            .heads
            .iter()
            .filter(|(_, info)| info.kind == HeadKind::SequenceClassification)
            .map(|(n, _)| n.clone())
            .collect();
        for n in names {
            self.remove_head(&n);
        }
    }

    /// Batched encoder forward on an existing tape. `dropout` enables
    /// inverted dropout at the configured rate; pass `None` for evaluation
    /// and distillation.
    pub fn forward_batch_on(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        batch: &Batch,
        capture_internals: bool,
        dropout: Option<&mut Rng>,
    ) -> Result<EncoderVars> {
        let cfg = &self.config;
        if batch.seq_len > cfg.max_seq_len {
            return Err(Error::contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq_len, cfg.max_seq_len
            )));
        }
        let b = batch.size();
        let l = batch.seq_len;

        let tok_table = bound.var("embed.token")?;
        let pos_table = bound.var("embed.pos")?;
        let tok = tape.embedding_lookup(tok_table, &batch.ids)?;
        let pos_ids: Vec<usize> = (0..b * l).map(|i| i % l).collect();
        let pos = tape.embedding_lookup(pos_table, &pos_ids)?;
        let x = tape.add(tok, pos)?;
        self.forward_embedded_on(tape, bound, x, batch, capture_internals, dropout)
    }

    /// Encoder stack above the embedding sum: everything here is
    /// permutation-equivariant over sequence positions.
    pub fn forward_embedded_on(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        embedded: Var,
        batch: &Batch,
        capture_internals: bool,
        mut dropout: Option<&mut Rng>,
    ) -> Result<EncoderVars> {
        let cfg = &self.config;
        let b = batch.size();
        let l = batch.seq_len;
        let (h, dh) = (cfg.num_heads, cfg.head_dim());
        let mut x = self.maybe_dropout(tape, embedded, &mut dropout)?;

        // Attention entry mask: key j of sequence b is visible iff unpadded.
        let all_visible = batch.mask.iter().all(|&m| m);
        let attn_mask: Option<Vec<bool>> = if all_visible {
            None
        } else {
            let mut m = vec![false; b * h * l * l];
            for bi in 0..b {
                for hi in 0..h {
                    for i in 0..l {
                        let base = ((bi * h + hi) * l + i) * l;
                        for j in 0..l {
                            m[base + j] = batch.mask[bi * l + j];
                        }
                    }
                }
            }
            Some(m)
        };

        let mut layers = Vec::new();
        for li in 0..cfg.num_layers {
            let p = format!("layer{li:02}");
            let ln1_g = bound.var(&format!("{p}.ln1.gain"))?;
            let ln1_b = bound.var(&format!("{p}.ln1.bias"))?;
            let normed = tape.layer_norm(x, ln1_g, ln1_b)?;

            let proj = |tape: &mut Tape, w: &str, bias: &str| -> Result<Var> {
                let wv = bound.var(&format!("{p}.attn.{w}"))?;
                let bv = bound.var(&format!("{p}.attn.{bias}"))?;
                let y = tape.matmul(normed, wv)?;
                tape.add_bias(y, bv)
            };
            let q = proj(tape, "wq", "bq")?;
            let k = proj(tape, "wk", "bk")?;
            let v = proj(tape, "wv", "bv")?;

            let qh = tape.split_heads(q, b, l, h, dh)?;
            let kh = tape.split_heads(k, b, l, h, dh)?;
            let vh = tape.split_heads(v, b, l, h, dh)?;

            let scores = tape.bmm_nt(qh, kh)?;
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let probs = tape.softmax_rows(scaled, attn_mask.as_deref())?;
            let ctx = tape.bmm(probs, vh)?;
            let merged = tape.merge_heads(ctx, b, l, h, dh)?;

            let wo = bound.var(&format!("{p}.attn.wo"))?;
            let bo = bound.var(&format!("{p}.attn.bo"))?;
            let attn_out = tape.matmul(merged, wo)?;
            let attn_out = tape.add_bias(attn_out, bo)?;
            let attn_out = self.maybe_dropout(tape, attn_out, &mut dropout)?;
            x = tape.add(x, attn_out)?;

            let ln2_g = bound.var(&format!("{p}.ln2.gain"))?;
            let ln2_b = bound.var(&format!("{p}.ln2.bias"))?;
            let fnormed = tape.layer_norm(x, ln2_g, ln2_b)?;
            let w1 = bound.var(&format!("{p}.ffn.w1"))?;
            let b1 = bound.var(&format!("{p}.ffn.b1"))?;
            let w2 = bound.var(&format!("{p}.ffn.w2"))?;
            let b2 = bound.var(&format!("{p}.ffn.b2"))?;
            let f = tape.matmul(fnormed, w1)?;
            let f = tape.add_bias(f, b1)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2)?;
            let f = tape.add_bias(f, b2)?;
            let f = self.maybe_dropout(tape, f, &mut dropout)?;
            x = tape.add(x, f)?;

            if capture_internals {
                layers.push(LayerVars {
                    layer_index: li,
                    queries: qh,
                    keys: kh,
                    values: vh,
                    probs,
                });
            }
        }

        let fin_g = bound.var("final_norm.gain")?;
        let fin_b = bound.var("final_norm.bias")?;
        let hidden = tape.layer_norm(x, fin_g, fin_b)?;
        Ok(EncoderVars { hidden, layers })
    }

    fn maybe_dropout(
        &self,
        tape: &mut Tape,
        x: Var,
        dropout: &mut Option<&mut Rng>,
    ) -> Result<Var> {
        let rate = self.config.dropout_rate;
        match dropout {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let scales: Vec<f64> = (0..tape.numel(x))
                    .map(|_| if rng.chance(rate) { 0.0 } else { keep })
                    .collect();
                tape.dropout(x, scales)
            }
            _ => Ok(x),
        }
    }

    /// Single-sequence forward in evaluation mode (no dropout, no gradient).
    /// Returns `[seq_len, hidden]` states and, when requested, the exact
    /// per-layer internals used by attention.
    pub fn forward(
        &self,
        token_ids: &[usize],
        attention_mask: &[bool],
        capture_internals: bool,
    ) -> Result<(Tensor, Vec<LayerInternals>)> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind_all(&mut tape, &self.params, false);
        let batch = Batch::single(token_ids, attention_mask)?;
        let out = self.forward_batch_on(&mut tape, &bound, &batch, capture_internals, None)?;
        let hidden = tape.to_tensor(out.hidden);
        let internals = out
            .layers
            .iter()
            .map(|lv| LayerInternals {
                layer_index: lv.layer_index,
                queries: tape.to_tensor(lv.queries),
                keys: tape.to_tensor(lv.keys),
                values: tape.to_tensor(lv.values),
            })
            .collect();
        Ok((hidden, internals))
    }

    /// Masked-LM loss on a tape: mean cross-entropy over masked positions
    /// only, with the decoder tied to the input embedding.
    pub fn mlm_loss_on(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        hidden: Var,
        masked: &MaskedBatch,
    ) -> Result<Var> {
        if masked.target_positions.is_empty() {
            return Err(Error::contract("mlm_loss: batch has zero masked positions"));
        }
        let rows = tape.gather_rows(hidden, &masked.target_positions)?;
        let dense = bound.var("mlm.dense")?;
        let dense_bias = bound.var("mlm.dense_bias")?;
        let h = tape.matmul(rows, dense)?;
        let h = tape.add_bias(h, dense_bias)?;
        let h = tape.gelu(h);
        let ln_g = bound.var("mlm.ln.gain")?;
        let ln_b = bound.var("mlm.ln.bias")?;
        let h = tape.layer_norm(h, ln_g, ln_b)?;
        let table = bound.var("embed.token")?;
        let logits = tape.matmul_nt(h, table)?;
        let bias = bound.var("mlm.bias")?;
        let logits = tape.add_bias(logits, bias)?;
        tape.cross_entropy(logits, &masked.target_ids)
    }

    /// Evaluation-mode MLM loss value.
    pub fn mlm_loss(&self, masked: &MaskedBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind_all(&mut tape, &self.params, false);
        let out = self.forward_batch_on(&mut tape, &bound, &masked.batch, false, None)?;
        let loss = self.mlm_loss_on(&mut tape, &bound, out.hidden, masked)?;
        Ok(tape.to_tensor(loss))
    }

    /// Classification logits for a batch from the CLS position's final state.
    pub fn classification_logits_on(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        hidden: Var,
        head_name: &str,
        batch: &Batch,
    ) -> Result<Var> {
        let info = self
            .heads
            .get(head_name)
            .ok_or_else(|| Error::contract(format!("unknown head {head_name}")))?;
        if info.kind != HeadKind::SequenceClassification {
            return Err(Error::contract(format!(
                "head {head_name} is not a classification head"
            )));
        }
        let cls_rows: Vec<usize> = (0..batch.size()).map(|bi| bi * batch.seq_len).collect();
        let cls = tape.gather_rows(hidden, &cls_rows)?;
        let w = bound.var(&format!("head.{head_name}.w"))?;
        let bias = bound.var(&format!("head.{head_name}.b"))?;
        let logits = tape.matmul(cls, w)?;
        tape.add_bias(logits, bias)
    }

    /// Class-probability vector for one sequence (evaluation mode).
    pub fn classify(
        &self,
        head_name: &str,
        token_ids: &[usize],
        attention_mask: &[bool],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind_all(&mut tape, &self.params, false);
        let batch = Batch::single(token_ids, attention_mask)?;
        let out = self.forward_batch_on(&mut tape, &bound, &batch, false, None)?;
        let logits = self.classification_logits_on(&mut tape, &bound, out.hidden, head_name, &batch)?;
        let probs = tape.softmax_rows(logits, None)?;
        Ok(tape.value(probs).to_vec())
    }

    /// Batch argmax predictions for one classification head (evaluation mode).
    pub fn predict_classes(&self, head_name: &str, batch: &Batch) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind_all(&mut tape, &self.params, false);
        let out = self.forward_batch_on(&mut tape, &bound, batch, false, None)?;
        let logits = self.classification_logits_on(&mut tape, &bound, out.hidden, head_name, batch)?;
        let vals = tape.value(logits);
        let classes = self.heads[head_name].output_dim;
        Ok((0..batch.size())
            .map(|bi| {
                let row = &vals[bi * classes..(bi + 1) * classes];
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect())
    }
}
