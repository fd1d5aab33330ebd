//! Config-driven experiment pipeline: pretrain, prepare teachers, distill,
//! evaluate, report. One experiment directory per config hash; stage outputs
//! live in stage-named subdirectories so all teacher variants coexist.

pub mod checkpoint;
pub mod metrics;
pub mod report;

use std::collections::BTreeMap;
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    assert_suite_hygiene, build_suite, generate_corpus, generate_task, DatasetSplit, MarkovChain,
    SuiteConfig, TaskSuite, Vocab,
};
use crate::distill::{distill, relation_kl_probe, DistillConfig};
use crate::error::{Error, Result};
use crate::eval::{
    EvalContext, FinetuneHparams, ProtocolPlan, RunResult, Summary,
};
use crate::model::{EncoderModel, ModelConfig};
use crate::mtl::{
    attach_task_heads, mtl_train, pretrain_mlm, single_task_train, teacher_dev_accuracies,
    LossScaling, MtlConfig, TeacherVariant, TrainBudget, VariantKind,
};
use crate::rng::derive_seed;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use metrics::{hash_json_value, read_metrics, MetricsRecord, MetricsWriter};

/// Environment variable overriding the configured output directory.
pub const OUT_DIR_ENV: &str = "MITKD_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub num_sequences: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleTaskConfig {
    /// Index into the in-family task list used as the single source task.
    pub task_index: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtlStageConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub sampling_temperature: f64,
    pub loss_scaling: LossScaling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStageConfig {
    pub fractions: Vec<f64>,
    pub num_seeds: usize,
    pub hparams: FinetuneHparams,
}

/// Declarative description of one full experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<String>,
    pub corpus: CorpusConfig,
    pub suite: SuiteConfig,
    pub teacher: ModelConfig,
    /// Larger vanilla teacher for the teacher-size ablation; required when
    /// the variant list contains `vanilla-large`.
    pub teacher_large: Option<ModelConfig>,
    pub student: ModelConfig,
    pub pretrain: TrainBudget,
    pub single_task: SingleTaskConfig,
    pub mtl: MtlStageConfig,
    pub distill: DistillConfig,
    pub eval: EvalStageConfig,
    /// Teacher variants to prepare, distill and evaluate.
    pub variants: Vec<String>,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("cannot parse {}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn variant_kinds(&self) -> Result<Vec<VariantKind>> {
        self.variants.iter().map(|s| VariantKind::from_label(s)).collect()
    }

    /// Cross-module validation of every constraint the stages rely on; runs
    /// before any stage.
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        if let Some(large) = &self.teacher_large {
            large.validate()?;
        }
        if self.corpus.num_sequences == 0 || self.corpus.seq_len < 3 {
            return Err(Error::config("corpus must have sequences of length >= 3"));
        }
        let vocab = Vocab::default();
        for (name, cfg) in [("teacher", Some(&self.teacher)), ("student", Some(&self.student)), ("teacher_large", self.teacher_large.as_ref())] {
            let Some(cfg) = cfg else { continue };
            if cfg.vocab_size != vocab.size() {
                return Err(Error::config(format!(
                    "{name} vocab_size {} does not match the vocabulary ({})",
                    cfg.vocab_size,
                    vocab.size()
                )));
            }
            if cfg.max_seq_len < self.corpus.seq_len {
                return Err(Error::config(format!(
                    "{name} max_seq_len {} is shorter than corpus sequences ({})",
                    cfg.max_seq_len, self.corpus.seq_len
                )));
            }
        }
        let kinds = self.variant_kinds()?;
        if kinds.is_empty() {
            return Err(Error::config("variant list is empty"));
        }
        if kinds.contains(&VariantKind::VanillaLarge) && self.teacher_large.is_none() {
            return Err(Error::config(
                "variant vanilla-large requires a teacher_large model config",
            ));
        }
        // Relation-head divisibility against every participating model.
        self.distill.validate_for(&self.teacher, &self.student)?;
        if let Some(large) = &self.teacher_large {
            self.distill.validate_for(large, &self.student)?;
        }
        if self.mtl.sampling_temperature <= 0.0 {
            return Err(Error::config("mtl sampling_temperature must be > 0"));
        }
        if self.mtl.steps == 0 || self.pretrain.steps == 0 || self.single_task.steps == 0 {
            return Err(Error::config("stage step budgets must be >= 1"));
        }
        if self.single_task.task_index >= self.suite.in_family {
            return Err(Error::config(format!(
                "single_task.task_index {} out of range for {} in-family tasks",
                self.single_task.task_index, self.suite.in_family
            )));
        }
        if self.suite.in_family == 0 || self.suite.out_family == 0 {
            return Err(Error::config("suite needs both in-family and out-family tasks"));
        }
        for f in &self.eval.fractions {
            if !(*f > 0.0 && *f <= 1.0) {
                return Err(Error::config(format!("eval fraction {f} outside (0, 1]")));
            }
        }
        if self.eval.num_seeds == 0 {
            return Err(Error::config("eval.num_seeds must be >= 1"));
        }
        self.eval.hparams.validate()?;
        // Suite construction is deterministic; hygiene is asserted here so an
        // invalid config never starts a stage.
        let chain = MarkovChain::from_seed(vocab.content_symbols, self.seed);
        let suite = build_suite(&chain, &vocab, self.corpus.seq_len, &self.suite, self.seed)?;
        assert_suite_hygiene(&suite)?;
        Ok(())
    }
}

/// Deterministic world derived from the config: vocabulary, Markov chain,
/// corpus, task suite.
pub struct World {
    pub vocab: Vocab,
    pub chain: MarkovChain,
    pub corpus: Vec<Vec<usize>>,
    pub suite: TaskSuite,
}

/// A validated experiment rooted at `<output>/exp-<config hash>/`.
#[derive(Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: String,
    pub dir: PathBuf,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let hash = hash_json_value(&config);
        let base = std::env::var(OUT_DIR_ENV)
            .ok()
            .or_else(|| config.output_dir.clone())
            .unwrap_or_else(|| "runs".to_string());
        let dir = PathBuf::from(base).join(format!("exp-{hash}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let config_copy = dir.join("config.json");
        let rendered = serde_json::to_string_pretty(&config)?;
        std::fs::write(&config_copy, rendered).map_err(|e| Error::io(&config_copy, e))?;
        Ok(Experiment { config, hash, dir })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Experiment::new(ExperimentConfig::from_file(path)?)
    }

    pub fn world(&self) -> Result<World> {
        let vocab = Vocab::default();
        let chain = MarkovChain::from_seed(vocab.content_symbols, self.config.seed);
        let corpus = generate_corpus(
            &chain,
            &vocab,
            self.config.seed,
            self.config.corpus.num_sequences,
            self.config.corpus.seq_len,
        );
        let suite = build_suite(
            &chain,
            &vocab,
            self.config.corpus.seq_len,
            &self.config.suite,
            self.config.seed,
        )?;
        Ok(World { vocab, chain, corpus, suite })
    }

    fn metrics(&self) -> MetricsWriter {
        MetricsWriter::new(&self.dir.join("metrics.jsonl"), &self.hash)
    }

    pub fn pretrain_path(&self, large: bool) -> PathBuf {
        self.dir
            .join("pretrain")
            .join(if large { "large.bin" } else { "base.bin" })
    }

    pub fn teacher_path(&self, kind: VariantKind) -> PathBuf {
        self.dir.join(format!("teacher-{}", kind.label())).join("model.bin")
    }

    pub fn student_path(&self, kind: VariantKind) -> PathBuf {
        self.dir.join(format!("student-{}", kind.label())).join("model.bin")
    }

    pub fn results_path(&self) -> PathBuf {
        self.dir.join("eval").join("run_results.jsonl")
    }

    pub fn report_txt_path(&self) -> PathBuf {
        self.dir.join("report").join("report.txt")
    }

    pub fn report_csv_path(&self) -> PathBuf {
        self.dir.join("report").join("results.csv")
    }

    /// Pretrain the base teacher (and the larger one when configured) on the
    /// unlabeled corpus.
    pub fn stage_pretrain(&self) -> Result<()> {
        let world = self.world()?;
        let metrics = self.metrics();
        let mut jobs = vec![(false, self.config.teacher.clone())];
        if let Some(large) = &self.config.teacher_large {
            jobs.push((true, large.clone()));
        }
        for (is_large, model_config) in jobs {
            let stage = if is_large { "pretrain-large" } else { "pretrain" };
            let mut model = EncoderModel::init(
                &model_config,
                derive_seed(self.config.seed, &format!("{stage}-init")),
            )?;
            let losses = pretrain_mlm(
                &mut model,
                &world.corpus,
                &world.vocab,
                &self.config.pretrain,
                derive_seed(self.config.seed, stage),
            )?;
            for (step, loss) in losses.iter().enumerate() {
                if step % 100 == 0 || step + 1 == losses.len() {
                    metrics.emit(stage, step as u64, metrics::one("mlm_loss", *loss))?;
                }
            }
            save_checkpoint(&model, None, &self.pretrain_path(is_large))?;
        }
        Ok(())
    }

    fn in_family_data(&self, world: &World) -> Result<(Vec<DatasetSplit>, Vec<DatasetSplit>)> {
        let mut train = Vec::new();
        let mut dev = Vec::new();
        for task in &world.suite.in_family {
            let (tr, dv) = generate_task(
                &world.chain,
                &world.vocab,
                self.config.corpus.seq_len,
                task,
                self.config.suite.train_size,
                self.config.suite.dev_size,
            )?;
            train.push(tr);
            dev.push(dv);
        }
        Ok((train, dev))
    }

    /// Produce the teacher for one variant from the pretrained checkpoint.
    pub fn stage_prepare_teacher(&self, kind: VariantKind) -> Result<()> {
        let world = self.world()?;
        let metrics = self.metrics();
        let base_path = self.pretrain_path(kind == VariantKind::VanillaLarge);
        let (base, _) = load_checkpoint(&base_path)?;
        let label = kind.label();
        let model = match kind {
            // Plain hand-off: the pretrained model is the vanilla teacher.
            VariantKind::Vanilla | VariantKind::VanillaLarge => base,
            VariantKind::SingleTask => {
                let (train_data, dev_data) = self.in_family_data(&world)?;
                let idx = self.config.single_task.task_index;
                let spec = world.suite.in_family[idx].clone();
                let mut teacher = base;
                attach_task_heads(
                    &mut teacher,
                    std::slice::from_ref(&spec),
                    derive_seed(self.config.seed, "single-task-heads"),
                )?;
                let budget = TrainBudget {
                    steps: self.config.single_task.steps,
                    batch_size: self.config.single_task.batch_size,
                    peak_lr: self.config.single_task.peak_lr,
                };
                // Catastrophic-forgetting probe: MLM loss on a fixed batch
                // before and after the task finetuning, recorded not asserted.
                let probe = crate::mtl::build_masked_batch(
                    &world.corpus,
                    &(0..32.min(world.corpus.len())).collect::<Vec<_>>(),
                    &world.vocab,
                    derive_seed(self.config.seed, "forgetting-probe"),
                )?;
                let mlm_before = teacher.mlm_loss(&probe)?.item();
                let (trained, trace) = single_task_train(
                    &teacher,
                    &spec,
                    &train_data[idx],
                    &budget,
                    derive_seed(self.config.seed, "single-task"),
                )?;
                let mlm_after = trained.mlm_loss(&probe)?.item();
                let mut forgetting = metrics::one("mlm_loss_before", mlm_before);
                forgetting.insert("mlm_loss_after".into(), mlm_after);
                metrics.emit("single-task-forgetting-probe", 0, forgetting)?;
                for (step, (_, loss)) in trace.iter().enumerate() {
                    if step % 100 == 0 || step + 1 == trace.len() {
                        metrics.emit("single-task", step as u64, metrics::one("loss", *loss))?;
                    }
                }
                let acc = teacher_dev_accuracies(
                    &trained,
                    std::slice::from_ref(&spec),
                    std::slice::from_ref(&dev_data[idx]),
                )?;
                metrics.emit(
                    "single-task",
                    trace.len() as u64,
                    acc.iter()
                        .map(|(k, v)| (format!("dev_acc.{k}"), *v))
                        .collect(),
                )?;
                trained
            }
            VariantKind::Mtl => {
                let (train_data, dev_data) = self.in_family_data(&world)?;
                let mut teacher = base;
                attach_task_heads(
                    &mut teacher,
                    &world.suite.in_family,
                    derive_seed(self.config.seed, "mtl-heads"),
                )?;
                let mtl_config = MtlConfig {
                    tasks: world.suite.in_family.clone(),
                    sampling_temperature: self.config.mtl.sampling_temperature,
                    loss_scaling: self.config.mtl.loss_scaling,
                    steps: self.config.mtl.steps,
                    batch_size: self.config.mtl.batch_size,
                    peak_lr: self.config.mtl.peak_lr,
                };
                let (trained, trace) = mtl_train(
                    &teacher,
                    &mtl_config,
                    &train_data,
                    derive_seed(self.config.seed, "mtl"),
                )?;
                for (step, (task, loss)) in trace.iter().enumerate() {
                    if step % 100 == 0 || step + 1 == trace.len() {
                        let mut m = metrics::one("loss", *loss);
                        m.insert("task_index".into(), *task as f64);
                        metrics.emit("mtl", step as u64, m)?;
                    }
                }
                let accs =
                    teacher_dev_accuracies(&trained, &world.suite.in_family, &dev_data)?;
                metrics.emit(
                    "mtl",
                    trace.len() as u64,
                    accs.iter()
                        .map(|(k, v)| (format!("dev_acc.{k}"), *v))
                        .collect(),
                )?;
                trained
            }
        };
        save_checkpoint(&model, Some(label), &self.teacher_path(kind))?;
        Ok(())
    }

    /// Distill the student for one variant from its prepared teacher. The
    /// distillation recipe is the same function for every variant.
    pub fn stage_distill(&self, kind: VariantKind) -> Result<()> {
        let world = self.world()?;
        let metrics = self.metrics();
        let (mut teacher_model, _) = load_checkpoint(&self.teacher_path(kind))?;
        // Teachers run in evaluation mode during distillation; retained
        // classification heads are irrelevant to the relation loss.
        teacher_model.strip_classification_heads();
        let teacher = TeacherVariant { kind, model: teacher_model };
        let out = distill(
            &teacher,
            &self.config.student,
            &world.corpus,
            &self.config.distill,
            derive_seed(self.config.seed, &format!("distill-{}", kind.label())),
        )?;
        let stage = format!("distill-{}", kind.label());
        for (step, loss) in out.step_losses.iter().enumerate() {
            if step % 100 == 0 || step + 1 == out.step_losses.len() {
                metrics.emit(&stage, step as u64, metrics::one("relation_kl", *loss))?;
            }
        }
        let probe: Vec<Vec<usize>> = world.corpus[..self.config.distill.batch_size.min(world.corpus.len())].to_vec();
        let probe_kl = relation_kl_probe(&teacher, &out.model, &probe, &self.config.distill)?;
        metrics.emit(
            &stage,
            out.step_losses.len() as u64,
            metrics::one("relation_kl_probe_final", probe_kl),
        )?;
        save_checkpoint(&out.model, Some(kind.label()), &self.student_path(kind))?;
        Ok(())
    }

    /// Run the evaluation protocol over every configured variant's student.
    pub fn stage_evaluate(&self, threads: usize) -> Result<Summary> {
        let world = self.world()?;
        let mut students = BTreeMap::new();
        for kind in self.config.variant_kinds()? {
            let path = self.student_path(kind);
            let (mut model, provenance) = load_checkpoint(&path)?;
            // Provenance travels with the checkpoint and must match the
            // variant directory it was loaded from.
            if provenance.as_deref() != Some(kind.label()) {
                return Err(Error::contract(format!(
                    "student at {} carries provenance {:?}, expected {}",
                    path.display(),
                    provenance,
                    kind.label()
                )));
            }
            model.strip_classification_heads();
            students.insert(kind.label().to_string(), model);
        }
        let ctx = EvalContext {
            chain: &world.chain,
            vocab: &world.vocab,
            seq_len: self.config.corpus.seq_len,
            suite: &world.suite,
            train_size: self.config.suite.train_size,
            dev_size: self.config.suite.dev_size,
        };
        let plan = ProtocolPlan {
            fractions: self.config.eval.fractions.clone(),
            seeds: (0..self.config.eval.num_seeds)
                .map(|i| derive_seed(self.config.seed, &format!("eval-seed-{i}")))
                .collect(),
            hparams: self.config.eval.hparams.clone(),
            threads,
        };
        let mtl_tasks: Vec<String> = world
            .suite
            .in_family
            .iter()
            .map(|t| t.name.clone())
            .collect();
        let summary = crate::eval::run_protocol(&students, &ctx, &plan, &mtl_tasks, |_| {})?;

        let path = self.results_path();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for r in &summary.results {
            let line = serde_json::to_string(r)?;
            writeln!(file, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        let metrics = self.metrics();
        for row in &summary.rows {
            let mut m = metrics::one("mean", row.mean);
            m.insert("sd".into(), row.sd);
            m.insert("cells".into(), row.cells as f64);
            metrics.emit(&format!("eval.{}.{}", row.variant, row.protocol), 0, m)?;
        }
        Ok(summary)
    }

    pub fn load_results(&self) -> Result<Vec<RunResult>> {
        let path = self.results_path();
        if !path.exists() {
            return Err(Error::MissingPrerequisite { path });
        }
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }

    /// Re-aggregate the persisted run results, re-check the aggregation and
    /// hygiene invariants, and render the CSV and plain-text report.
    pub fn stage_report(&self) -> Result<Summary> {
        // Refuse mixed config hashes in the metrics stream.
        let records = read_metrics(&self.dir.join("metrics.jsonl"))?;
        if let Some(bad) = records.iter().find(|r| r.config_hash != self.hash) {
            return Err(Error::contract(format!(
                "metrics stream mixes config hashes ({} and {})",
                bad.config_hash, self.hash
            )));
        }
        let results = self.load_results()?;
        let summary = Summary::from_results(results)?;
        summary.verify_aggregates()?;
        // Seed accounting re-check.
        let expected = self.config.variants.len()
            * (self.config.suite.in_family + self.config.suite.out_family)
            * self.config.eval.fractions.len()
            * self.config.eval.num_seeds;
        if summary.results.len() != expected {
            return Err(Error::contract(format!(
                "seed accounting violation in report: {} results, expected {expected}",
                summary.results.len()
            )));
        }
        // Majority-class floors for the flagging pass.
        let world = self.world()?;
        let mut floors = BTreeMap::new();
        for task in world.suite.all_tasks() {
            let (_, dev) = generate_task(
                &world.chain,
                &world.vocab,
                self.config.corpus.seq_len,
                task,
                self.config.suite.train_size,
                self.config.suite.dev_size,
            )?;
            floors.insert(task.name.clone(), dev.majority_prior(task.n_classes));
        }
        report::write_results_csv(&summary, &self.report_csv_path())?;
        report::render_report(&summary, &floors, &self.report_txt_path())?;
        Ok(summary)
    }

    /// All stages in order. Metrics restart from a clean file.
    pub fn run_all(&self, threads: usize) -> Result<Summary> {
        self.metrics().truncate()?;
        self.stage_pretrain()?;
        for kind in self.config.variant_kinds()? {
            self.stage_prepare_teacher(kind)?;
        }
        for kind in self.config.variant_kinds()? {
            self.stage_distill(kind)?;
        }
        self.stage_evaluate(threads)?;
        self.stage_report()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(out_dir: &Path) -> ExperimentConfig {
        let model = |layers: usize, hidden: usize| ModelConfig {
            num_layers: layers,
            hidden_size: hidden,
            num_heads: 2,
            ffn_size: hidden * 4,
            max_seq_len: 12,
            vocab_size: 68,
            dropout_rate: 0.1,
        };
        ExperimentConfig {
            seed: 404,
            output_dir: Some(out_dir.to_string_lossy().into_owned()),
            corpus: CorpusConfig { num_sequences: 128, seq_len: 12 },
            suite: SuiteConfig { in_family: 2, out_family: 1, train_size: 64, dev_size: 32 },
            teacher: model(2, 16),
            teacher_large: Some(model(3, 24)),
            student: model(1, 8),
            pretrain: TrainBudget { steps: 30, batch_size: 8, peak_lr: 1e-3 },
            single_task: SingleTaskConfig { task_index: 0, steps: 20, batch_size: 8, peak_lr: 5e-4 },
            mtl: MtlStageConfig {
                steps: 25,
                batch_size: 8,
                peak_lr: 5e-4,
                sampling_temperature: 1.0,
                loss_scaling: LossScaling::Log2Classes,
            },
            distill: DistillConfig {
                relation_heads: 4,
                teacher_layer: None,
                student_layer: None,
                relation_types: crate::distill::RelationType::all().to_vec(),
                steps: 30,
                batch_size: 8,
                peak_lr: 1e-3,
            },
            eval: EvalStageConfig {
                fractions: vec![0.5, 1.0],
                num_seeds: 2,
                hparams: FinetuneHparams {
                    epochs: vec![1],
                    batch_sizes: vec![16],
                    learning_rates: vec![1e-3],
                },
            },
            variants: vec![
                "vanilla".into(),
                "single-task".into(),
                "mtl".into(),
                "vanilla-large".into(),
            ],
        }
    }

    #[test]
    fn config_validation_names_the_violated_constraint() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path());
        config.distill.relation_heads = 3; // divides neither hidden size
        let err = Experiment::new(config).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("relation_heads"), "{err}");

        let mut config = tiny_config(dir.path());
        config.variants = vec!["vanilla-large".into()];
        config.teacher_large = None;
        let err = Experiment::new(config).unwrap_err();
        assert!(err.to_string().contains("teacher_large"), "{err}");
    }

    #[test]
    fn hash_is_stable_and_field_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let a = tiny_config(dir.path());
        let mut b = a.clone();
        assert_eq!(hash_json_value(&a), hash_json_value(&b));
        b.seed += 1;
        assert_ne!(hash_json_value(&a), hash_json_value(&b));
        let mut c = a.clone();
        c.eval.fractions = vec![0.5];
        assert_ne!(hash_json_value(&a), hash_json_value(&c));
    }

    #[test]
    fn stages_require_their_prerequisites() {
        let dir = tempfile::tempdir().unwrap();
        let exp = Experiment::new(tiny_config(dir.path())).unwrap();
        let err = exp.stage_prepare_teacher(VariantKind::Mtl).unwrap_err();
        assert!(matches!(err, Error::MissingPrerequisite { .. }), "{err}");
        let err = exp.stage_distill(VariantKind::Mtl).unwrap_err();
        assert!(matches!(err, Error::MissingPrerequisite { .. }), "{err}");
        let err = exp.stage_evaluate(1).unwrap_err();
        assert!(matches!(err, Error::MissingPrerequisite { .. }), "{err}");
        let err = exp.stage_report().unwrap_err();
        assert!(matches!(err, Error::MissingPrerequisite { .. }), "{err}");
    }

    #[test]
    fn run_all_produces_checkpoints_results_and_report() {
        let dir = tempfile::tempdir().unwrap();
        let exp = Experiment::new(tiny_config(dir.path())).unwrap();
        let summary = exp.run_all(1).unwrap();
        // 4 variants × 3 tasks × 2 fractions × 2 seeds
        assert_eq!(summary.results.len(), 48);
        for kind in exp.config.variant_kinds().unwrap() {
            assert!(exp.teacher_path(kind).exists());
            assert!(exp.student_path(kind).exists());
        }
        assert!(exp.report_txt_path().exists());
        assert!(exp.report_csv_path().exists());
        let csv = std::fs::read_to_string(exp.report_csv_path()).unwrap();
        assert_eq!(csv.lines().count(), 48 + 1);
        // Provenance recorded in each student checkpoint matches its variant.
        for kind in exp.config.variant_kinds().unwrap() {
            let (_, provenance) = load_checkpoint(&exp.student_path(kind)).unwrap();
            assert_eq!(provenance.as_deref(), Some(kind.label()));
        }
    }

    #[test]
    fn rerunning_a_stage_from_checkpoints_reproduces_downstream_results() {
        let dir = tempfile::tempdir().unwrap();
        let exp = Experiment::new(tiny_config(dir.path())).unwrap();
        exp.run_all(1).unwrap();
        let first = std::fs::read(exp.student_path(VariantKind::Mtl)).unwrap();
        let first_results = std::fs::read_to_string(exp.results_path()).unwrap();
        // Re-run distillation and evaluation from persisted checkpoints.
        exp.stage_distill(VariantKind::Mtl).unwrap();
        let second = std::fs::read(exp.student_path(VariantKind::Mtl)).unwrap();
        assert_eq!(first, second, "distill stage is not reproducible");
        exp.stage_evaluate(1).unwrap();
        let second_results = std::fs::read_to_string(exp.results_path()).unwrap();
        assert_eq!(first_results, second_results, "evaluate stage is not reproducible");
    }
}
