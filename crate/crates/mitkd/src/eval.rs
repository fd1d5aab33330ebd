//! Student finetuning and the three-way evaluation protocol: in-domain,
//! out-domain, and low-resource, with multi-seed aggregation and variant
//! comparison. Protocol cells are independent; each one deep-copies its
//! student, so results are identical whether cells run serially or in
//! parallel.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{generate_task, subsample, DatasetSplit, MarkovChain, TaskSpec, TaskSuite, Vocab};
use crate::error::{Error, Result};
use crate::model::{BoundParams, EncoderModel};
use crate::mtl::{batch_of, dev_accuracy, BatchCursor};
use crate::optim::{lr_schedule, AdamOptimizer, DEFAULT_WEIGHT_DECAY};
use crate::rng::{derive_seed, Rng};
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneHparams {
    pub epochs: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
}

impl Default for FinetuneHparams {
    fn default() -> Self {
        FinetuneHparams {
            epochs: vec![3, 5],
            batch_sizes: vec![16, 32],
            learning_rates: vec![1e-4, 3e-4, 1e-3],
        }
    }
}

impl FinetuneHparams {
    pub fn validate(&self) -> Result<()> {
        if self.epochs.is_empty() || self.batch_sizes.is_empty() || self.learning_rates.is_empty() {
            return Err(Error::config("finetune hparam grids must be non-empty"));
        }
        Ok(())
    }

    /// Grid points in canonical order (epochs, then batch, then lr).
    pub fn grid(&self) -> Vec<SelectedHparams> {
        let mut out = Vec::new();
        for &e in &self.epochs {
            for &b in &self.batch_sizes {
                for &lr in &self.learning_rates {
                    out.push(SelectedHparams { epochs: e, batch_size: b, learning_rate: lr });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectedHparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Protocol {
    InDomain,
    OutDomain,
    LowResource { fraction: f64 },
}

impl Protocol {
    pub fn label(&self) -> String {
        match self {
            Protocol::InDomain => "in-domain".to_string(),
            Protocol::OutDomain => "out-domain".to_string(),
            Protocol::LowResource { fraction } => format!("low-resource({fraction})"),
        }
    }
}

/// One finetuning outcome: a (variant, task, fraction, seed) protocol cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub student_provenance: String,
    pub task: String,
    pub protocol: Protocol,
    pub fraction: f64,
    pub seed: u64,
    pub dev_accuracy: f64,
    pub selected_hparams: SelectedHparams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub protocol: String,
    /// Mean dev accuracy over all cells of this (variant, protocol).
    pub mean: f64,
    /// Standard deviation over per-seed means (seed-level noise).
    pub sd: f64,
    pub cells: usize,
}

/// Aggregates per (variant × protocol), the variant ordering by out-domain
/// mean, and the raw run results the aggregates are recomputable from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub ordering: Vec<String>,
    pub results: Vec<RunResult>,
}

impl Summary {
    /// Build aggregates from raw results; the mean over cells and the sd over
    /// per-seed means.
    pub fn from_results(results: Vec<RunResult>) -> Result<Summary> {
        if results.is_empty() {
            return Err(Error::contract("cannot summarize zero run results"));
        }
        let mut groups: BTreeMap<(String, String), Vec<&RunResult>> = BTreeMap::new();
        for r in &results {
            groups
                .entry((r.student_provenance.clone(), r.protocol.label()))
                .or_default()
                .push(r);
        }
        let mut rows = Vec::new();
        for ((variant, protocol), cells) in &groups {
            let mean = cells.iter().map(|r| r.dev_accuracy).sum::<f64>() / cells.len() as f64;
            let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
            for r in cells {
                by_seed.entry(r.seed).or_default().push(r.dev_accuracy);
            }
            let seed_means: Vec<f64> = by_seed
                .values()
                .map(|v| v.iter().sum::<f64>() / v.len() as f64)
                .collect();
            let sd = sd_over(&seed_means);
            rows.push(SummaryRow {
                variant: variant.clone(),
                protocol: protocol.clone(),
                mean,
                sd,
                cells: cells.len(),
            });
        }
        let mut variants: Vec<String> = rows
            .iter()
            .map(|r| r.variant.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let out_mean = |v: &str| {
            rows.iter()
                .find(|r| r.variant == v && r.protocol == "out-domain")
                .map_or(f64::NEG_INFINITY, |r| r.mean)
        };
        variants.sort_by(|a, b| out_mean(b).partial_cmp(&out_mean(a)).unwrap());
        Ok(Summary { rows, ordering: variants, results })
    }

    pub fn mean_of(&self, variant: &str, protocol: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.protocol == protocol)
            .map(|r| r.mean)
    }

    pub fn sd_of(&self, variant: &str, protocol: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.protocol == protocol)
            .map(|r| r.sd)
    }

    /// Recompute every row from the stored raw results and compare.
    pub fn verify_aggregates(&self) -> Result<()> {
        let rebuilt = Summary::from_results(self.results.clone())?;
        for (a, b) in self.rows.iter().zip(&rebuilt.rows) {
            if a.variant != b.variant
                || a.protocol != b.protocol
                || (a.mean - b.mean).abs() > 1e-12
                || (a.sd - b.sd).abs() > 1e-12
                || a.cells != b.cells
            {
                return Err(Error::contract(format!(
                    "summary row {}/{} does not match its raw results",
                    a.variant, a.protocol
                )));
            }
        }
        Ok(())
    }
}

fn sd_over(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    var.sqrt()
}

/// Train a fresh classification head (and the whole encoder) on one split.
fn train_classifier(
    model: &mut EncoderModel,
    task: &TaskSpec,
    train: &DatasetSplit,
    hp: &SelectedHparams,
    seed: u64,
) -> Result<()> {
    let steps_per_epoch = train.len().div_ceil(hp.batch_size);
    let total_steps = (hp.epochs * steps_per_epoch) as u64;
    let mut cursor = BatchCursor::new(train.len(), derive_seed(seed, "finetune-order"));
    let mut dropout_rng = Rng::new(derive_seed(seed, "finetune-dropout"));
    let mut optimizer = AdamOptimizer::new(DEFAULT_WEIGHT_DECAY);
    let head_prefix = format!("head.{}.", task.name);
    for step in 0..total_steps {
        let idx = cursor.next_indices(hp.batch_size.min(train.len()));
        let (batch, labels) = batch_of(train, &idx)?;
        let mut tape = Tape::new();
        let bound = BoundParams::bind_filtered(&mut tape, &model.params, true, |name| {
            !name.starts_with("head.") || name.starts_with(&head_prefix)
        });
        let out = model.forward_batch_on(&mut tape, &bound, &batch, false, Some(&mut dropout_rng))?;
        let logits =
            model.classification_logits_on(&mut tape, &bound, out.hidden, &task.name, &batch)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        tape.backward(loss)?;
        let grads = bound.collect_grads(&tape);
        let lr = lr_schedule(step, total_steps, hp.learning_rate)?;
        optimizer.step(&mut model.params, &grads, lr)?;
    }
    Ok(())
}

/// Grid-search finetuning of a (head-free) student on one task, selecting by
/// dev accuracy. Deterministic in (student, task, hparams, seed); grid ties
/// resolve to the earlier grid point.
#[allow(clippy::too_many_arguments)]
pub fn finetune_student(
    student: &EncoderModel,
    variant_label: &str,
    task: &TaskSpec,
    train: &DatasetSplit,
    dev: &DatasetSplit,
    hparams: &FinetuneHparams,
    protocol: Protocol,
    fraction: f64,
    seed: u64,
) -> Result<RunResult> {
    hparams.validate()?;
    if student.heads.contains_key(&task.name) {
        return Err(Error::contract(format!(
            "student already has a head for task {}; finetuning attaches a fresh one",
            task.name
        )));
    }
    let mut best: Option<(f64, SelectedHparams)> = None;
    for hp in hparams.grid() {
        let mut candidate = student.clone();
        candidate.add_classification_head(&task.name, task.n_classes, derive_seed(seed, "head"))?;
        train_classifier(&mut candidate, task, train, &hp, seed)?;
        let acc = dev_accuracy(&candidate, &task.name, dev)?;
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, hp));
        }
    }
    let (dev_acc, selected) = best.expect("grid is non-empty");
    Ok(RunResult {
        student_provenance: variant_label.to_string(),
        task: task.name.clone(),
        protocol,
        fraction,
        seed,
        dev_accuracy: dev_acc,
        selected_hparams: selected,
    })
}

/// Everything the protocol needs to materialize task data.
pub struct EvalContext<'a> {
    pub chain: &'a MarkovChain,
    pub vocab: &'a Vocab,
    pub seq_len: usize,
    pub suite: &'a TaskSuite,
    pub train_size: usize,
    pub dev_size: usize,
}

/// The full protocol grid: every variant × task × fraction × seed. Cells with
/// fraction 1.0 report as in-domain or out-domain according to the task's
/// family side; cells with fraction < 1.0 report as low-resource.
pub struct ProtocolPlan {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub hparams: FinetuneHparams,
    /// Worker threads for protocol cells (1 = fully serial).
    pub threads: usize,
}

#[derive(Clone)]
struct Cell {
    variant: String,
    task: TaskSpec,
    fraction: f64,
    seed: u64,
}

/// Run the evaluation protocol. `mtl_task_names` is the task list of the MTL
/// teacher in this experiment, re-checked here against the out-family suite
/// (out-domain hygiene). `on_result` observes each cell in deterministic
/// order after all cells complete.
pub fn run_protocol(
    students: &BTreeMap<String, EncoderModel>,
    ctx: &EvalContext<'_>,
    plan: &ProtocolPlan,
    mtl_task_names: &[String],
    mut on_result: impl FnMut(&RunResult),
) -> Result<Summary> {
    plan.hparams.validate()?;
    if students.is_empty() {
        return Err(Error::config("run_protocol: no students supplied"));
    }
    if plan.fractions.is_empty() || plan.seeds.is_empty() {
        return Err(Error::config("run_protocol: fractions and seeds must be non-empty"));
    }
    // Fair comparison: all students share one architecture.
    let first = students.values().next().unwrap();
    for (name, model) in students {
        if model.config != first.config {
            return Err(Error::config(format!(
                "fair-comparison violation: student {name} has a different ModelConfig"
            )));
        }
        if model.heads.iter().any(|(_, h)| h.kind == crate::model::HeadKind::SequenceClassification) {
            return Err(Error::config(format!(
                "student {name} arrives with classification heads attached"
            )));
        }
    }
    // Out-domain hygiene: no out-family task may appear in the MTL mixture.
    for t in &ctx.suite.out_family {
        if mtl_task_names.contains(&t.name) {
            return Err(Error::config(format!(
                "out-domain hygiene violation: task {} was used in MTL",
                t.name
            )));
        }
    }

    // Task data is generated once per task and shared read-only.
    let mut data: BTreeMap<String, (DatasetSplit, DatasetSplit)> = BTreeMap::new();
    for task in ctx.suite.all_tasks() {
        let (train, dev) =
            generate_task(ctx.chain, ctx.vocab, ctx.seq_len, task, ctx.train_size, ctx.dev_size)?;
        data.insert(task.name.clone(), (train, dev));
    }

    let mut cells = Vec::new();
    for variant in students.keys() {
        for task in ctx.suite.all_tasks() {
            for &fraction in &plan.fractions {
                for &seed in &plan.seeds {
                    cells.push(Cell {
                        variant: variant.clone(),
                        task: task.clone(),
                        fraction,
                        seed,
                    });
                }
            }
        }
    }

    let run_cell = |cell: &Cell| -> Result<RunResult> {
        let student = &students[&cell.variant];
        let (train_full, dev) = &data[&cell.task.name];
        let train = if cell.fraction < 1.0 {
            subsample(
                train_full,
                cell.fraction,
                derive_seed(cell.seed, &format!("subsample-{}", cell.task.name)),
            )?
        } else {
            train_full.clone()
        };
        let protocol = if cell.fraction < 1.0 {
            Protocol::LowResource { fraction: cell.fraction }
        } else if ctx.suite.is_out_family(&cell.task.name) {
            Protocol::OutDomain
        } else {
            Protocol::InDomain
        };
        finetune_student(
            student,
            &cell.variant,
            &cell.task,
            &train,
            dev,
            &plan.hparams,
            protocol,
            cell.fraction,
            derive_seed(cell.seed, &format!("cell-{}-{}", cell.variant, cell.task.name)),
        )
    };

    let results: Vec<RunResult> = if plan.threads <= 1 {
        let mut out = Vec::with_capacity(cells.len());
        for cell in &cells {
            out.push(run_cell(cell)?);
        }
        out
    } else {
        // Round-robin cells over scoped workers; slot indexing keeps the
        // output order identical to the serial path.
        let mut slots: Vec<Option<Result<RunResult>>> = Vec::new();
        slots.resize_with(cells.len(), || None);
        let threads = plan.threads.min(cells.len());
        let slot_refs: Vec<_> = slots.iter_mut().collect();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (worker, chunk) in partition_slots(slot_refs, threads).into_iter().enumerate() {
                let cells = &cells;
                let run_cell = &run_cell;
                handles.push(scope.spawn(move || {
                    for (index, slot) in chunk {
                        *slot = Some(run_cell(&cells[index]));
                    }
                    let _ = worker;
                }));
            }
            for h in handles {
                h.join().expect("protocol worker panicked");
            }
        });
        let mut out = Vec::with_capacity(cells.len());
        for slot in slots {
            out.push(slot.expect("all cells filled")?);
        }
        out
    };

    // Seed accounting: the full grid, exactly.
    let expected = students.len() * ctx.suite.all_tasks().count() * plan.fractions.len() * plan.seeds.len();
    if results.len() != expected {
        return Err(Error::contract(format!(
            "seed accounting violation: {} results, expected {}",
            results.len(),
            expected
        )));
    }
    for r in &results {
        on_result(r);
    }
    Summary::from_results(results)
}

fn partition_slots<T>(slots: Vec<T>, workers: usize) -> Vec<Vec<(usize, T)>> {
    let mut chunks: Vec<Vec<(usize, T)>> = (0..workers).map(|_| Vec::new()).collect();
    for (i, slot) in slots.into_iter().enumerate() {
        chunks[i % workers].push((i, slot));
    }
    chunks
}

/// One pairwise comparison between two variants under one protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub variant_a: String,
    pub variant_b: String,
    pub protocol: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub difference: f64,
    pub pooled_sd: f64,
    /// False when |difference| fits within one pooled standard deviation.
    pub conclusive: bool,
}

/// Pairwise mean differences with pooled seed-level standard deviations;
/// differences smaller than one pooled sd are flagged inconclusive.
pub fn compare_variants(summary: &Summary) -> Result<Vec<ComparisonEntry>> {
    if summary.ordering.len() < 2 {
        return Err(Error::contract("compare_variants needs at least two variants"));
    }
    let protocols: Vec<String> = summary
        .rows
        .iter()
        .map(|r| r.protocol.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut out = Vec::new();
    for (i, a) in summary.ordering.iter().enumerate() {
        for b in summary.ordering.iter().skip(i + 1) {
            for protocol in &protocols {
                let (Some(ma), Some(mb)) = (summary.mean_of(a, protocol), summary.mean_of(b, protocol))
                else {
                    continue;
                };
                let sa = summary.sd_of(a, protocol).unwrap_or(0.0);
                let sb = summary.sd_of(b, protocol).unwrap_or(0.0);
                let pooled = ((sa * sa + sb * sb) / 2.0).sqrt();
                let difference = ma - mb;
                out.push(ComparisonEntry {
                    variant_a: a.clone(),
                    variant_b: b.clone(),
                    protocol: protocol.clone(),
                    mean_a: ma,
                    mean_b: mb,
                    difference,
                    pooled_sd: pooled,
                    conclusive: difference.abs() > pooled,
                });
            }
        }
    }
    Ok(out)
}
