//! Teacher preparation engines for the three paradigms under comparison:
//! plain pretraining hand-off (vanilla), single-task finetuning, and
//! multi-task finetuning with loss scaling and temperature-based task
//! sampling. The downstream distillation recipe is identical for all three;
//! the teacher is the only experimental variable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{mask_tokens, DatasetSplit, TaskSpec, Vocab};
use crate::error::{Error, Result};
use crate::model::{Batch, BoundParams, EncoderModel, MaskedBatch};
use crate::optim::{lr_schedule, AdamOptimizer, DEFAULT_WEIGHT_DECAY};
use crate::rng::{derive_seed, Rng};
use crate::tape::{Tape, Var};

/// Steps / batch size / peak learning rate of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainBudget {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossScaling {
    Log2Classes,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtlConfig {
    pub tasks: Vec<TaskSpec>,
    pub sampling_temperature: f64,
    pub loss_scaling: LossScaling,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
}

impl MtlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sampling_temperature <= 0.0 {
            return Err(Error::config("sampling temperature must be > 0"));
        }
        if self.steps == 0 {
            return Err(Error::config("mtl steps must be >= 1"));
        }
        if self.tasks.is_empty() {
            return Err(Error::config("mtl task list is empty"));
        }
        Ok(())
    }
}

/// Which teacher-preparation paradigm produced a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantKind {
    Vanilla,
    SingleTask,
    Mtl,
    /// A larger vanilla teacher, used by the teacher-size ablation.
    VanillaLarge,
}

impl VariantKind {
    pub fn label(&self) -> &'static str {
        match self {
            VariantKind::Vanilla => "vanilla",
            VariantKind::SingleTask => "single-task",
            VariantKind::Mtl => "mtl",
            VariantKind::VanillaLarge => "vanilla-large",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(VariantKind::Vanilla),
            "single-task" => Ok(VariantKind::SingleTask),
            "mtl" => Ok(VariantKind::Mtl),
            "vanilla-large" => Ok(VariantKind::VanillaLarge),
            other => Err(Error::config(format!(
                "unknown variant {other}; expected vanilla|single-task|mtl|vanilla-large"
            ))),
        }
    }

    pub fn all() -> [VariantKind; 4] {
        [
            VariantKind::Vanilla,
            VariantKind::SingleTask,
            VariantKind::Mtl,
            VariantKind::VanillaLarge,
        ]
    }
}

/// A prepared teacher together with its provenance. The kind travels with
/// every artifact distilled from this model.
#[derive(Debug, Clone)]
pub struct TeacherVariant {
    pub kind: VariantKind,
    pub model: EncoderModel,
}

/// pᵢ ∝ nᵢ^(1/τ), normalized. τ = 1 is size-proportional; τ → ∞ tends to
/// uniform.
pub fn task_sampling_distribution(train_sizes: &[usize], temperature: f64) -> Result<Vec<f64>> {
    if temperature <= 0.0 {
        return Err(Error::config(format!(
            "sampling temperature must be > 0, got {temperature}"
        )));
    }
    if train_sizes.is_empty() || train_sizes.contains(&0) {
        return Err(Error::config("all task sizes must be >= 1"));
    }
    let weights: Vec<f64> = train_sizes
        .iter()
        .map(|&n| (n as f64).powf(1.0 / temperature))
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Divide a task loss by log₂ of its class count, so binary tasks keep unit
/// scale and wider heads do not dominate the shared encoder.
pub fn scale_loss(tape: &mut Tape, loss: Var, n_classes: usize) -> Result<Var> {
    Ok(tape.scale(loss, scale_loss_factor(n_classes)?))
}

pub fn scale_loss_factor(n_classes: usize) -> Result<f64> {
    if n_classes < 2 {
        return Err(Error::contract(format!(
            "scale_loss requires n_classes >= 2, got {n_classes}"
        )));
    }
    Ok(1.0 / (n_classes as f64).log2())
}

/// Deterministic cyclic batch order over a dataset: a seeded shuffle that
/// reshuffles each time the cursor wraps.
pub(crate) struct BatchCursor {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchCursor {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut order: Vec<usize> = (0..len).collect();
        rng.shuffle(&mut order);
        BatchCursor { order, pos: 0, rng }
    }

    pub fn next_indices(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Attach one fresh classification head per task, named after the task.
pub fn attach_task_heads(model: &mut EncoderModel, tasks: &[TaskSpec], seed: u64) -> Result<()> {
    for task in tasks {
        model.add_classification_head(
            &task.name,
            task.n_classes,
            derive_seed(seed, &format!("head-{}", task.name)),
        )?;
    }
    Ok(())
}

/// Masked-LM pretraining over the unlabeled corpus. Dropout stays off; it is
/// reserved for the finetuning/MTL stages. Returns per-step losses.
pub fn pretrain_mlm(
    model: &mut EncoderModel,
    corpus: &[Vec<usize>],
    vocab: &Vocab,
    budget: &TrainBudget,
    seed: u64,
) -> Result<Vec<f64>> {
    if corpus.len() < budget.batch_size {
        return Err(Error::config(format!(
            "corpus has {} sequences, batch size is {}",
            corpus.len(),
            budget.batch_size
        )));
    }
    let mut cursor = BatchCursor::new(corpus.len(), derive_seed(seed, "pretrain-batches"));
    let mut optimizer = AdamOptimizer::new(DEFAULT_WEIGHT_DECAY);
    let mut losses = Vec::with_capacity(budget.steps);
    for step in 0..budget.steps {
        let idx = cursor.next_indices(budget.batch_size);
        let masked = build_masked_batch(corpus, &idx, vocab, derive_seed(seed, &format!("mask-{step}")))?;
        let mut tape = Tape::new();
        let bound = BoundParams::bind_all(&mut tape, &model.params, true);
        let out = model.forward_batch_on(&mut tape, &bound, &masked.batch, false, None)?;
        let loss = model.mlm_loss_on(&mut tape, &bound, out.hidden, &masked)?;
        tape.backward(loss)?;
        let grads = bound.collect_grads(&tape);
        let lr = lr_schedule(step as u64, budget.steps as u64, budget.peak_lr)?;
        optimizer.step(&mut model.params, &grads, lr)?;
        losses.push(tape.value(loss)[0]);
    }
    Ok(losses)
}

/// Stack corpus sequences into one batch and apply MLM corruption to each,
/// re-drawing any batch that would end up with zero masked positions.
pub fn build_masked_batch(
    corpus: &[Vec<usize>],
    indices: &[usize],
    vocab: &Vocab,
    seed: u64,
) -> Result<MaskedBatch> {
    let seq_len = corpus[indices[0]].len();
    let mut ids = Vec::with_capacity(indices.len() * seq_len);
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (row, &i) in indices.iter().enumerate() {
        let (masked, pos, tgt) = mask_tokens(&corpus[i], vocab, derive_seed(seed, &format!("seq-{row}")));
        if masked.len() != seq_len {
            return Err(Error::contract("MLM batches require equal-length sequences"));
        }
        ids.extend_from_slice(&masked);
        positions.extend(pos.iter().map(|p| row * seq_len + p));
        targets.extend_from_slice(&tgt);
    }
    if positions.is_empty() {
        // Vanishingly rare at the default rate; fall back to masking the
        // first content position of the first sequence.
        let seq = &corpus[indices[0]];
        positions.push(1);
        targets.push(seq[1]);
        ids[1] = crate::corpus::MASK_ID;
    }
    let mask = vec![true; ids.len()];
    Ok(MaskedBatch {
        batch: Batch { seq_len, ids, mask },
        target_positions: positions,
        target_ids: targets,
    })
}

/// Multi-task finetuning: each step samples one task from the size/temperature
/// distribution, draws a homogeneous batch, and updates the shared encoder
/// plus that task's head only. Heads must already be attached. Returns the
/// finetuned model (heads retained) and per-step `(task_index, loss)` pairs.
pub fn mtl_train(
    teacher: &EncoderModel,
    config: &MtlConfig,
    train_data: &[DatasetSplit],
    seed: u64,
) -> Result<(EncoderModel, Vec<(usize, f64)>)> {
    config.validate()?;
    if train_data.len() != config.tasks.len() {
        return Err(Error::config(format!(
            "mtl_train: {} tasks but {} datasets",
            config.tasks.len(),
            train_data.len()
        )));
    }
    for task in &config.tasks {
        if !teacher.heads.contains_key(&task.name) {
            return Err(Error::config(format!(
                "mtl_train: task {} has no attached head",
                task.name
            )));
        }
    }
    let sizes: Vec<usize> = train_data.iter().map(DatasetSplit::len).collect();
    let probs = task_sampling_distribution(&sizes, config.sampling_temperature)?;

    let mut model = teacher.clone();
    let mut sampler = Rng::new(derive_seed(seed, "mtl-task-sampler"));
    let mut dropout_rng = Rng::new(derive_seed(seed, "mtl-dropout"));
    let mut cursors: Vec<BatchCursor> = (0..config.tasks.len())
        .map(|i| BatchCursor::new(train_data[i].len(), derive_seed(seed, &format!("mtl-order-{i}"))))
        .collect();
    let mut optimizer = AdamOptimizer::new(DEFAULT_WEIGHT_DECAY);
    let mut trace = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let ti = sampler.categorical(&probs);
        let task = &config.tasks[ti];
        let idx = cursors[ti].next_indices(config.batch_size);
        let (batch, labels) = batch_of(&train_data[ti], &idx)?;

        let mut tape = Tape::new();
        let head_prefix = format!("head.{}.", task.name);
        let bound = BoundParams::bind_filtered(&mut tape, &model.params, true, |name| {
            !name.starts_with("head.") || name.starts_with(&head_prefix)
        });
        let out = model.forward_batch_on(&mut tape, &bound, &batch, false, Some(&mut dropout_rng))?;
        let logits = model.classification_logits_on(&mut tape, &bound, out.hidden, &task.name, &batch)?;
        let mut loss = tape.cross_entropy(logits, &labels)?;
        if config.loss_scaling == LossScaling::Log2Classes {
            loss = scale_loss(&mut tape, loss, task.n_classes)?;
        }
        tape.backward(loss)?;
        let grads = bound.collect_grads(&tape);
        let lr = lr_schedule(step as u64, config.steps as u64, config.peak_lr)?;
        optimizer.step(&mut model.params, &grads, lr)?;
        trace.push((ti, tape.value(loss)[0]));
    }
    Ok((model, trace))
}

/// Single-task finetuning of the teacher: the multi-task engine restricted to
/// one task, with loss scaling off.
pub fn single_task_train(
    teacher: &EncoderModel,
    spec: &TaskSpec,
    train: &DatasetSplit,
    budget: &TrainBudget,
    seed: u64,
) -> Result<(EncoderModel, Vec<(usize, f64)>)> {
    let config = MtlConfig {
        tasks: vec![spec.clone()],
        sampling_temperature: 1.0,
        loss_scaling: LossScaling::None,
        steps: budget.steps,
        batch_size: budget.batch_size,
        peak_lr: budget.peak_lr,
    };
    mtl_train(teacher, &config, std::slice::from_ref(train), seed)
}

pub(crate) fn batch_of(split: &DatasetSplit, indices: &[usize]) -> Result<(Batch, Vec<usize>)> {
    let seqs: Vec<Vec<usize>> = indices
        .iter()
        .map(|&i| split.examples[i].token_ids.clone())
        .collect();
    let labels: Vec<usize> = indices.iter().map(|&i| split.examples[i].label).collect();
    let batch = Batch::from_sequences(&seqs, crate::corpus::PAD_ID)?;
    Ok((batch, labels))
}

/// Accuracy of a classification head over a split (evaluation mode).
pub fn dev_accuracy(model: &EncoderModel, head: &str, split: &DatasetSplit) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in split.examples.chunks(64) {
        let seqs: Vec<Vec<usize>> = chunk.iter().map(|e| e.token_ids.clone()).collect();
        let batch = Batch::from_sequences(&seqs, crate::corpus::PAD_ID)?;
        let preds = model.predict_classes(head, &batch)?;
        correct += preds
            .iter()
            .zip(chunk)
            .filter(|(p, e)| **p == e.label)
            .count();
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Per-task dev accuracies of a multi-task teacher, keyed by task name.
pub fn teacher_dev_accuracies(
    model: &EncoderModel,
    tasks: &[TaskSpec],
    dev_data: &[DatasetSplit],
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (task, dev) in tasks.iter().zip(dev_data) {
        out.insert(task.name.clone(), dev_accuracy(model, &task.name, dev)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_suite, generate_corpus, generate_task, MarkovChain, SuiteConfig, TaskFamily};
    use crate::model::ModelConfig;

    #[test]
    fn sampling_distribution_proportional_at_tau_one() {
        let p = task_sampling_distribution(&[100, 900], 1.0).unwrap();
        assert!((p[0] - 0.1).abs() < 1e-12);
        assert!((p[1] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn sampling_distribution_tau_half_squares_sizes() {
        let p = task_sampling_distribution(&[100, 900], 0.5).unwrap();
        assert!((p[0] - 1.0 / 82.0).abs() < 1e-12);
        assert!((p[1] - 81.0 / 82.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_distribution_equal_sizes_is_uniform() {
        for tau in [0.3, 1.0, 7.5] {
            let p = task_sampling_distribution(&[512, 512, 512], tau).unwrap();
            for v in &p {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_distribution_sums_to_one_and_is_monotone() {
        let mut rng = Rng::new(2);
        for _ in 0..50 {
            let sizes: Vec<usize> = (0..5).map(|_| 1 + rng.below(5000)).collect();
            let tau = 0.25 + rng.uniform() * 4.0;
            let p = task_sampling_distribution(&sizes, tau).unwrap();
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for i in 0..5 {
                for j in 0..5 {
                    if sizes[i] > sizes[j] {
                        assert!(p[i] > p[j], "not monotone: {sizes:?} {p:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn sampling_distribution_rejects_bad_temperature() {
        assert!(task_sampling_distribution(&[10, 10], 0.0).is_err());
        assert!(task_sampling_distribution(&[10, 10], -1.0).is_err());
    }

    #[test]
    fn scale_loss_values() {
        assert!((scale_loss_factor(2).unwrap() - 1.0).abs() < 1e-15);
        assert!((scale_loss_factor(8).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(scale_loss_factor(1).is_err());
    }

    #[test]
    fn scale_loss_preserves_gradient_direction() {
        // Positive scalar multiple: scaled gradient is the unscaled gradient
        // times the same positive factor.
        let mut tape = Tape::new();
        let t = crate::tensor::Tensor::new(vec![1, 3], vec![0.3, -0.7, 1.2])
            .unwrap()
            .with_grad();
        let v = tape.leaf(&t);
        let sq = tape.matmul_nt(v, v).unwrap();
        let raw = tape.sum(sq);
        tape.backward(raw).unwrap();
        let g_raw = tape.grad(v).unwrap().to_vec();

        let mut tape2 = Tape::new();
        let v2 = tape2.leaf(&t);
        let sq2 = tape2.matmul_nt(v2, v2).unwrap();
        let raw2 = tape2.sum(sq2);
        let scaled = scale_loss(&mut tape2, raw2, 8).unwrap();
        tape2.backward(scaled).unwrap();
        let g_scaled = tape2.grad(v2).unwrap().to_vec();
        for (a, b) in g_raw.iter().zip(&g_scaled) {
            assert!((b * 3.0 - a).abs() < 1e-12, "direction not preserved");
        }
    }

    #[test]
    fn observed_sampling_frequencies_match_distribution() {
        let sizes = [400usize, 1200, 150, 2400];
        let probs = task_sampling_distribution(&sizes, 1.0).unwrap();
        let mut rng = Rng::new(derive_seed(9, "mtl-task-sampler"));
        let mut counts = [0usize; 4];
        let n = 5000;
        for _ in 0..n {
            counts[rng.categorical(&probs)] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(&probs)
            .map(|(&c, &p)| (c as f64 / n as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.03, "total variation {tv}");
    }

    fn tiny_world() -> (MarkovChain, Vocab, Vec<Vec<usize>>) {
        let vocab = Vocab::default();
        let chain = MarkovChain::from_seed(vocab.content_symbols, 50);
        let corpus = generate_corpus(&chain, &vocab, 50, 256, 16);
        (chain, vocab, corpus)
    }

    fn tiny_model(vocab: &Vocab, seed: u64) -> EncoderModel {
        EncoderModel::init(
            &ModelConfig {
                num_layers: 1,
                hidden_size: 16,
                num_heads: 2,
                ffn_size: 32,
                max_seq_len: 16,
                vocab_size: vocab.size(),
                dropout_rate: 0.1,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn untrained_mlm_loss_is_near_log_vocab() {
        let (_, vocab, corpus) = tiny_world();
        let model = tiny_model(&vocab, 3);
        let masked = build_masked_batch(&corpus, &(0..32).collect::<Vec<_>>(), &vocab, 1).unwrap();
        let loss = model.mlm_loss(&masked).unwrap().item();
        let baseline = (vocab.size() as f64).ln();
        assert!(
            (loss - baseline).abs() / baseline < 0.15,
            "untrained loss {loss} vs ln V {baseline}"
        );
    }

    #[test]
    fn pretraining_reduces_mlm_loss() {
        let (_, vocab, corpus) = tiny_world();
        let mut model = tiny_model(&vocab, 4);
        let budget = TrainBudget { steps: 200, batch_size: 8, peak_lr: 2e-3 };
        let losses = pretrain_mlm(&mut model, &corpus, &vocab, &budget, 7).unwrap();
        let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(
            tail < head - 0.05,
            "loss did not decrease: first {head:.3} last {tail:.3}"
        );
    }

    #[test]
    fn model_overfits_one_repeated_sequence() {
        let vocab = Vocab::default();
        let chain = MarkovChain::from_seed(vocab.content_symbols, 51);
        let seq = generate_corpus(&chain, &vocab, 52, 1, 16).pop().unwrap();
        let corpus: Vec<Vec<usize>> = vec![seq; 16];
        let mut model = EncoderModel::init(
            &ModelConfig {
                num_layers: 2,
                hidden_size: 32,
                num_heads: 4,
                ffn_size: 128,
                max_seq_len: 16,
                vocab_size: vocab.size(),
                dropout_rate: 0.1,
            },
            5,
        )
        .unwrap();
        let budget = TrainBudget { steps: 600, batch_size: 8, peak_lr: 2e-3 };
        pretrain_mlm(&mut model, &corpus, &vocab, &budget, 8).unwrap();
        // Fixed mask, evaluation mode: the memorized tokens must be recovered.
        let masked = build_masked_batch(&corpus, &[0, 1, 2, 3], &vocab, 99).unwrap();
        let loss = model.mlm_loss(&masked).unwrap().item();
        assert!(loss < 0.1, "memorization loss {loss}");
    }

    #[test]
    fn single_task_equals_mtl_with_one_task() {
        let (chain, vocab, _) = tiny_world();
        let spec = TaskSpec {
            name: "t0".into(),
            family: TaskFamily::SymbolParity { symbol: 1, modulus: 2 },
            n_classes: 2,
            domain_tag: "in.parity".into(),
            seed: 31,
        };
        let (train, _) = generate_task(&chain, &vocab, 16, &spec, 64, 8).unwrap();
        let mut teacher = tiny_model(&vocab, 6);
        attach_task_heads(&mut teacher, std::slice::from_ref(&spec), 77).unwrap();
        let budget = TrainBudget { steps: 30, batch_size: 4, peak_lr: 1e-3 };

        let (a, _) = single_task_train(&teacher, &spec, &train, &budget, 13).unwrap();
        let cfg = MtlConfig {
            tasks: vec![spec.clone()],
            sampling_temperature: 1.0,
            loss_scaling: LossScaling::Log2Classes, // binary task: factor is exactly 1
            steps: 30,
            batch_size: 4,
            peak_lr: 1e-3,
        };
        let (b, _) = mtl_train(&teacher, &cfg, std::slice::from_ref(&train), 13).unwrap();
        assert!(a.params.same_values(&b.params), "trajectories diverged");
    }

    #[test]
    fn mtl_step_touches_only_its_task_head() {
        let (chain, vocab, _) = tiny_world();
        let mk = |name: &str, sym: usize, seed: u64| TaskSpec {
            name: name.into(),
            family: TaskFamily::SymbolParity { symbol: sym, modulus: 2 },
            n_classes: 2,
            domain_tag: "in.parity".into(),
            seed,
        };
        let tasks: Vec<TaskSpec> = (0..4).map(|i| mk(&format!("t{i}"), i, 31 + i as u64)).collect();
        let data: Vec<DatasetSplit> = tasks
            .iter()
            .map(|t| generate_task(&chain, &vocab, 16, t, 64, 8).unwrap().0)
            .collect();
        let mut teacher = tiny_model(&vocab, 9);
        attach_task_heads(&mut teacher, &tasks, 78).unwrap();

        // Three draws over four tasks: at least one head is never sampled.
        let cfg = MtlConfig {
            tasks: tasks.clone(),
            sampling_temperature: 1.0,
            loss_scaling: LossScaling::Log2Classes,
            steps: 3,
            batch_size: 4,
            peak_lr: 1e-3,
        };
        let (trained, trace) = mtl_train(&teacher, &cfg, &data, 21).unwrap();
        // The step-0 learning rate is 0 (warmup ramp start), so only tasks
        // sampled at steps >= 1 are expected to move.
        let moved: std::collections::BTreeSet<usize> =
            trace.iter().skip(1).map(|(ti, _)| *ti).collect();
        for (ti, task) in tasks.iter().enumerate() {
            let name = format!("head.{}.w", task.name);
            let before = teacher.params.get(&name).unwrap().data();
            let after = trained.params.get(&name).unwrap().data();
            if moved.contains(&ti) {
                assert_ne!(before, after, "sampled head {} did not move", task.name);
            } else {
                assert_eq!(before, after, "unsampled head {} changed", task.name);
            }
        }
        assert!(!moved.is_empty(), "degenerate trace");
    }

    #[test]
    fn mtl_requires_attached_heads() {
        let (chain, vocab, _) = tiny_world();
        let spec = TaskSpec {
            name: "t0".into(),
            family: TaskFamily::SymbolParity { symbol: 1, modulus: 2 },
            n_classes: 2,
            domain_tag: "in.parity".into(),
            seed: 31,
        };
        let (train, _) = generate_task(&chain, &vocab, 16, &spec, 16, 4).unwrap();
        let teacher = tiny_model(&vocab, 6); // no heads attached
        let cfg = MtlConfig {
            tasks: vec![spec],
            sampling_temperature: 1.0,
            loss_scaling: LossScaling::Log2Classes,
            steps: 1,
            batch_size: 4,
            peak_lr: 1e-3,
        };
        let err = mtl_train(&teacher, &cfg, &[train], 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn mtl_training_is_seed_deterministic() {
        let (chain, vocab, _) = tiny_world();
        let spec = TaskSpec {
            name: "t0".into(),
            family: TaskFamily::PairSubsequence { first: 1, second: 2 },
            n_classes: 2,
            domain_tag: "in.pair".into(),
            seed: 35,
        };
        let (train, _) = generate_task(&chain, &vocab, 16, &spec, 64, 8).unwrap();
        let mut teacher = tiny_model(&vocab, 10);
        attach_task_heads(&mut teacher, std::slice::from_ref(&spec), 79).unwrap();
        let budget = TrainBudget { steps: 20, batch_size: 4, peak_lr: 1e-3 };
        let (a, _) = single_task_train(&teacher, &spec, &train, &budget, 5).unwrap();
        let (b, _) = single_task_train(&teacher, &spec, &train, &budget, 5).unwrap();
        assert!(a.params.same_values(&b.params));
    }

    #[test]
    fn finetuned_teacher_beats_majority_baseline_smoke() {
        // Scaled-down smoke run: a pretrained teacher finetuned on a small
        // suite clears the majority floor by a clear margin on each task.
        let vocab = Vocab::default();
        let chain = MarkovChain::from_seed(vocab.content_symbols, 60);
        let corpus = generate_corpus(&chain, &vocab, 61, 512, 16);
        let suite_cfg = SuiteConfig { in_family: 2, out_family: 1, train_size: 256, dev_size: 128 };
        let suite = build_suite(&chain, &vocab, 16, &suite_cfg, 62).unwrap();
        let mut teacher = EncoderModel::init(
            &ModelConfig {
                num_layers: 2,
                hidden_size: 32,
                num_heads: 4,
                ffn_size: 128,
                max_seq_len: 16,
                vocab_size: vocab.size(),
                dropout_rate: 0.1,
            },
            63,
        )
        .unwrap();
        pretrain_mlm(
            &mut teacher,
            &corpus,
            &vocab,
            &TrainBudget { steps: 150, batch_size: 8, peak_lr: 1e-3 },
            64,
        )
        .unwrap();
        attach_task_heads(&mut teacher, &suite.in_family, 65).unwrap();
        let mut train_data = Vec::new();
        let mut dev_data = Vec::new();
        for t in &suite.in_family {
            let (train, dev) =
                generate_task(&chain, &vocab, 16, t, suite_cfg.train_size, suite_cfg.dev_size).unwrap();
            train_data.push(train);
            dev_data.push(dev);
        }
        let cfg = MtlConfig {
            tasks: suite.in_family.clone(),
            sampling_temperature: 1.0,
            loss_scaling: LossScaling::Log2Classes,
            steps: 500,
            batch_size: 8,
            peak_lr: 5e-4,
        };
        let (trained, _) = mtl_train(&teacher, &cfg, &train_data, 66).unwrap();
        for (task, dev) in suite.in_family.iter().zip(&dev_data) {
            let acc = dev_accuracy(&trained, &task.name, dev).unwrap();
            let floor = dev.majority_prior(task.n_classes);
            assert!(
                acc >= floor + 0.10,
                "task {} acc {acc:.3} floor {floor:.3}",
                task.name
            );
        }
    }
}
