//! Task-agnostic distillation by self-attention relation matching.
//!
//! One teacher layer and one student layer each yield per-relation-head
//! query-query, key-key and value-value relation distributions; the student
//! minimizes teacher→student KL over the unlabeled corpus. The code path is
//! the same function for every teacher variant — the teacher is the only
//! experimental variable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::PAD_ID;
use crate::error::{Error, Result};
use crate::model::{Batch, BoundParams, EncoderModel, LayerInternals, LayerVars, ModelConfig};
use crate::mtl::{BatchCursor, TeacherVariant};
use crate::optim::{lr_schedule, AdamOptimizer, DEFAULT_WEIGHT_DECAY};
use crate::rng::derive_seed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationType {
    QQ,
    KK,
    VV,
}

impl RelationType {
    pub fn all() -> [RelationType; 3] {
        [RelationType::QQ, RelationType::KK, RelationType::VV]
    }

    pub fn label(&self) -> &'static str {
        match self {
            RelationType::QQ => "qq",
            RelationType::KK => "kk",
            RelationType::VV => "vv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Number of relation heads A_r; must divide both hidden sizes.
    pub relation_heads: usize,
    /// Layer to read on the teacher side; defaults to the last layer.
    pub teacher_layer: Option<usize>,
    /// Layer to read on the student side; defaults to the last layer.
    pub student_layer: Option<usize>,
    pub relation_types: Vec<RelationType>,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            relation_heads: 8,
            teacher_layer: None,
            student_layer: None,
            relation_types: RelationType::all().to_vec(),
            steps: 6000,
            batch_size: 16,
            peak_lr: 1e-3,
        }
    }
}

impl DistillConfig {
    pub fn validate_for(&self, teacher: &ModelConfig, student: &ModelConfig) -> Result<()> {
        if self.relation_heads == 0
            || teacher.hidden_size % self.relation_heads != 0
            || student.hidden_size % self.relation_heads != 0
        {
            return Err(Error::config(format!(
                "relation_heads {} must divide teacher hidden {} and student hidden {}",
                self.relation_heads, teacher.hidden_size, student.hidden_size
            )));
        }
        if let Some(l) = self.teacher_layer {
            if l >= teacher.num_layers {
                return Err(Error::config(format!(
                    "teacher_layer {l} out of range for {} layers",
                    teacher.num_layers
                )));
            }
        }
        if let Some(l) = self.student_layer {
            if l >= student.num_layers {
                return Err(Error::config(format!(
                    "student_layer {l} out of range for {} layers",
                    student.num_layers
                )));
            }
        }
        if self.relation_types.is_empty() {
            return Err(Error::config("relation_types must not be empty"));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("distillation steps and batch size must be >= 1"));
        }
        Ok(())
    }
}

/// Row-stochastic relation matrices of one layer for one sequence.
#[derive(Debug, Clone)]
pub struct RelationSet {
    /// Per relation type: `[A_r, L, L]`.
    pub relations: BTreeMap<RelationType, Tensor>,
    /// Token mask; PAD rows and columns are excluded from all losses.
    pub mask: Vec<bool>,
}

/// Tape handles to relation matrices for a whole batch.
#[derive(Debug)]
pub struct RelationVars {
    /// Per relation type: `[B·A_r, L, L]`.
    pub relations: Vec<(RelationType, Var)>,
    pub batch: usize,
    pub seq_len: usize,
    pub relation_heads: usize,
}

/// Re-split one layer's concatenated Q/K/V into `a_r` relation heads and form
/// scaled dot-product relation distributions, masking PAD key positions.
#[allow(clippy::too_many_arguments)]
pub fn extract_relations_on(
    tape: &mut Tape,
    layer: &LayerVars,
    batch: usize,
    seq_len: usize,
    num_heads: usize,
    head_dim: usize,
    a_r: usize,
    token_mask: &[bool],
    types: &[RelationType],
) -> Result<RelationVars> {
    let hidden = num_heads * head_dim;
    if hidden % a_r != 0 {
        return Err(Error::config(format!(
            "relation_heads {a_r} must divide hidden size {hidden}"
        )));
    }
    let d_r = hidden / a_r;
    // Entry mask over [B·A_r, L, L]: key j visible iff token j is unpadded.
    let all_visible = token_mask.iter().all(|&m| m);
    let entry_mask: Option<Vec<bool>> = if all_visible {
        None
    } else {
        let mut m = vec![false; batch * a_r * seq_len * seq_len];
        for b in 0..batch {
            for ar in 0..a_r {
                for i in 0..seq_len {
                    let base = ((b * a_r + ar) * seq_len + i) * seq_len;
                    for j in 0..seq_len {
                        m[base + j] = token_mask[b * seq_len + j];
                    }
                }
            }
        }
        Some(m)
    };

    let mut relations = Vec::with_capacity(types.len());
    for ty in types {
        let source = match ty {
            RelationType::QQ => layer.queries,
            RelationType::KK => layer.keys,
            RelationType::VV => layer.values,
        };
        // [B·H, L, dh] -> [B·L, hidden] -> [B·A_r, L, d_r]
        let concat = tape.merge_heads(source, batch, seq_len, num_heads, head_dim)?;
        let resplit = tape.split_heads(concat, batch, seq_len, a_r, d_r)?;
        let scores = tape.bmm_nt(resplit, resplit)?;
        let scaled = tape.scale(scores, 1.0 / (d_r as f64).sqrt());
        let probs = tape.softmax_rows(scaled, entry_mask.as_deref())?;
        relations.push((*ty, probs));
    }
    Ok(RelationVars {
        relations,
        batch,
        seq_len,
        relation_heads: a_r,
    })
}

/// Sum over enabled relation types of the mean KL over relation heads and
/// unmasked query positions. The teacher side must be constant (frozen).
pub fn relation_kl_on(
    tape: &mut Tape,
    teacher: &RelationVars,
    student: &RelationVars,
    token_mask: &[bool],
) -> Result<Var> {
    if teacher.batch != student.batch
        || teacher.seq_len != student.seq_len
        || teacher.relation_heads != student.relation_heads
    {
        return Err(Error::contract(format!(
            "relation sets disagree: batch {}x{}, seq {}x{}, heads {}x{}",
            teacher.batch, student.batch, teacher.seq_len, student.seq_len,
            teacher.relation_heads, student.relation_heads
        )));
    }
    let t_types: Vec<RelationType> = teacher.relations.iter().map(|(t, _)| *t).collect();
    let s_types: Vec<RelationType> = student.relations.iter().map(|(t, _)| *t).collect();
    if t_types != s_types {
        return Err(Error::contract(format!(
            "relation sets enable different types: {t_types:?} vs {s_types:?}"
        )));
    }
    // Query rows at PAD positions are excluded from the mean.
    let (b, l, a_r) = (teacher.batch, teacher.seq_len, teacher.relation_heads);
    let all_visible = token_mask.iter().all(|&m| m);
    let row_mask: Option<Vec<bool>> = if all_visible {
        None
    } else {
        let mut m = vec![false; b * a_r * l];
        for bi in 0..b {
            for ar in 0..a_r {
                for i in 0..l {
                    m[(bi * a_r + ar) * l + i] = token_mask[bi * l + i];
                }
            }
        }
        Some(m)
    };
    let mut total: Option<Var> = None;
    for ((_, t_var), (_, s_var)) in teacher.relations.iter().zip(&student.relations) {
        let kl = tape.kl_divergence_rows(*t_var, *s_var, row_mask.as_deref())?;
        total = Some(match total {
            None => kl,
            Some(acc) => tape.add(acc, kl)?,
        });
    }
    Ok(total.expect("relation_types is non-empty"))
}

/// Spec-level single-sequence extraction: relation matrices as values.
pub fn extract_relations(
    internals: &LayerInternals,
    a_r: usize,
    mask: &[bool],
) -> Result<RelationSet> {
    let shape = internals.queries.shape().to_vec();
    let (num_heads, seq_len, head_dim) = (shape[0], shape[1], shape[2]);
    if mask.len() != seq_len {
        return Err(Error::ShapeMismatch {
            op: "extract_relations",
            lhs: vec![seq_len],
            rhs: vec![mask.len()],
        });
    }
    let mut tape = Tape::new();
    let mut layer = LayerVars {
        layer_index: internals.layer_index,
        queries: tape.frozen(&internals.queries),
        keys: tape.frozen(&internals.keys),
        values: tape.frozen(&internals.values),
        probs: tape.scalar(0.0), // unused here
    };
    layer.probs = layer.queries;
    let vars = extract_relations_on(
        &mut tape,
        &layer,
        1,
        seq_len,
        num_heads,
        head_dim,
        a_r,
        mask,
        &RelationType::all(),
    )?;
    let mut relations = BTreeMap::new();
    for (ty, var) in vars.relations {
        let tensor = Tensor::new(
            vec![a_r, seq_len, seq_len],
            tape.value(var).to_vec(),
        )?;
        relations.insert(ty, tensor);
    }
    Ok(RelationSet {
        relations,
        mask: mask.to_vec(),
    })
}

/// Spec-level relation KL between two per-sequence relation sets.
pub fn relation_kl(teacher: &RelationSet, student: &RelationSet) -> Result<Tensor> {
    let t_types: Vec<RelationType> = teacher.relations.keys().copied().collect();
    let s_types: Vec<RelationType> = student.relations.keys().copied().collect();
    if t_types != s_types || teacher.mask != student.mask {
        return Err(Error::contract(
            "relation sets disagree on types or mask".to_string(),
        ));
    }
    let mut tape = Tape::new();
    let mut total: Option<Var> = None;
    for ty in &t_types {
        let t = &teacher.relations[ty];
        let s = &student.relations[ty];
        if t.shape() != s.shape() {
            return Err(Error::ShapeMismatch {
                op: "relation_kl",
                lhs: t.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let a_r = t.shape()[0];
        let l = t.shape()[1];
        let row_mask: Vec<bool> = (0..a_r * l).map(|r| teacher.mask[r % l]).collect();
        let tv = tape.frozen(t);
        let sv = tape.frozen(s);
        let kl = tape.kl_divergence_rows(tv, sv, Some(&row_mask))?;
        total = Some(match total {
            None => kl,
            Some(acc) => tape.add(acc, kl)?,
        });
    }
    let total = total.ok_or_else(|| Error::contract("no relation types enabled"))?;
    Ok(tape.to_tensor(total))
}

/// A distilled student with the provenance of the teacher it came from.
#[derive(Debug, Clone)]
pub struct DistilledStudent {
    pub provenance: crate::mtl::VariantKind,
    pub model: EncoderModel,
    /// Relation-KL training loss per step.
    pub step_losses: Vec<f64>,
}

/// Distill a freshly initialized student from the teacher variant.
pub fn distill(
    teacher: &TeacherVariant,
    student_config: &ModelConfig,
    corpus: &[Vec<usize>],
    config: &DistillConfig,
    seed: u64,
) -> Result<DistilledStudent> {
    let student = EncoderModel::init(student_config, derive_seed(seed, "student-init"))?;
    distill_into(teacher, student, corpus, config, seed)
}

/// Distillation core shared by every teacher variant: iterate batches of raw
/// (unmasked) corpus sequences, forward both models with internals captured,
/// minimize the relation KL with Adam under the warmup/decay schedule.
pub fn distill_into(
    teacher: &TeacherVariant,
    mut student: EncoderModel,
    corpus: &[Vec<usize>],
    config: &DistillConfig,
    seed: u64,
) -> Result<DistilledStudent> {
    config.validate_for(&teacher.model.config, &student.config)?;
    if corpus.len() < config.batch_size {
        return Err(Error::config(format!(
            "corpus has {} sequences, distillation batch size is {}",
            corpus.len(),
            config.batch_size
        )));
    }
    let t_layer = config.teacher_layer.unwrap_or(teacher.model.config.num_layers - 1);
    let s_layer = config.student_layer.unwrap_or(student.config.num_layers - 1);

    let mut cursor = BatchCursor::new(corpus.len(), derive_seed(seed, "distill-batches"));
    let mut optimizer = AdamOptimizer::new(DEFAULT_WEIGHT_DECAY);
    let mut step_losses = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let idx = cursor.next_indices(config.batch_size);
        let seqs: Vec<Vec<usize>> = idx.iter().map(|&i| corpus[i].clone()).collect();
        let batch = Batch::from_sequences(&seqs, PAD_ID)?;

        let mut tape = Tape::new();
        let (loss, s_bound) = distill_step_loss(
            &mut tape, &teacher.model, &student, &batch, t_layer, s_layer, config,
        )?;
        tape.backward(loss)?;
        // Gradients land only on the student: the teacher is bound frozen.
        let grads = s_bound.collect_grads(&tape);
        let lr = lr_schedule(step as u64, config.steps as u64, config.peak_lr)?;
        optimizer.step(&mut student.params, &grads, lr)?;
        step_losses.push(tape.value(loss)[0]);
    }
    Ok(DistilledStudent {
        provenance: teacher.kind,
        model: student,
        step_losses,
    })
}

/// Forward both models on one batch and return the relation-KL loss var plus
/// the student's (trainable) parameter binding.
fn distill_step_loss(
    tape: &mut Tape,
    teacher: &EncoderModel,
    student: &EncoderModel,
    batch: &Batch,
    t_layer: usize,
    s_layer: usize,
    config: &DistillConfig,
) -> Result<(Var, BoundParams)> {
    let b = batch.size();
    let l = batch.seq_len;

    let t_bound = BoundParams::bind_all(tape, &teacher.params, false);
    let t_out = teacher.forward_batch_on(tape, &t_bound, batch, true, None)?;
    let t_rel = extract_relations_on(
        tape,
        &t_out.layers[t_layer],
        b,
        l,
        teacher.config.num_heads,
        teacher.config.head_dim(),
        config.relation_heads,
        &batch.mask,
        &config.relation_types,
    )?;

    let s_bound = BoundParams::bind_all(tape, &student.params, true);
    let s_out = student.forward_batch_on(tape, &s_bound, batch, true, None)?;
    let s_rel = extract_relations_on(
        tape,
        &s_out.layers[s_layer],
        b,
        l,
        student.config.num_heads,
        student.config.head_dim(),
        config.relation_heads,
        &batch.mask,
        &config.relation_types,
    )?;

    let loss = relation_kl_on(tape, &t_rel, &s_rel, &batch.mask)?;
    Ok((loss, s_bound))
}

/// Mean relation KL between teacher and student over a fixed probe set, in
/// evaluation mode (no gradients, no updates).
pub fn relation_kl_probe(
    teacher: &TeacherVariant,
    student: &EncoderModel,
    probe: &[Vec<usize>],
    config: &DistillConfig,
) -> Result<f64> {
    config.validate_for(&teacher.model.config, &student.config)?;
    let t_layer = config.teacher_layer.unwrap_or(teacher.model.config.num_layers - 1);
    let s_layer = config.student_layer.unwrap_or(student.config.num_layers - 1);
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in probe.chunks(config.batch_size) {
        let batch = Batch::from_sequences(chunk, PAD_ID)?;
        let mut tape = Tape::new();
        let (loss, _) = distill_step_loss(
            &mut tape, &teacher.model, student, &batch, t_layer, s_layer, config,
        )?;
        total += tape.value(loss)[0];
        batches += 1;
    }
    Ok(total / batches as f64)
}
