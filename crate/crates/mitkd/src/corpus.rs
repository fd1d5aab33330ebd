//! Deterministic synthetic corpus and task generation.
//!
//! The unlabeled corpus is drawn from a first-order Markov chain over content
//! symbols whose transition matrix derives from the experiment seed and stays
//! fixed for the whole experiment. Classification tasks are parameterized
//! rule families over the same symbol stream, partitioned into an in-family
//! suite (available for multi-task finetuning) and an out-family suite that is
//! held out from every teacher.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const MASK_ID: usize = 3;
pub const NUM_SPECIALS: usize = 4;

pub const MASK_RATE: f64 = 0.15;
/// Rejection-sampling budget per requested example.
const ATTEMPTS_PER_EXAMPLE: usize = 2000;

/// Symbol table: 4 reserved specials (ids 0-3) followed by content symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub content_symbols: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab { content_symbols: 64 }
    }
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.content_symbols + NUM_SPECIALS
    }

    /// Token id of content symbol `s` (0-based).
    pub fn content_id(&self, s: usize) -> usize {
        debug_assert!(s < self.content_symbols);
        NUM_SPECIALS + s
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIALS
    }

    /// Inverse of `content_id`; None for specials.
    pub fn symbol_of(&self, id: usize) -> Option<usize> {
        (id >= NUM_SPECIALS && id < self.size()).then(|| id - NUM_SPECIALS)
    }
}

/// First-order Markov chain over content symbols.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    pub num_symbols: usize,
    /// Row-stochastic transitions, `[num_symbols × num_symbols]`.
    transitions: Vec<f64>,
    /// Stationary distribution; also the initial-symbol distribution.
    stationary: Vec<f64>,
}

impl MarkovChain {
    /// Each symbol gets four strongly preferred successors (weights 8:4:2:1
    /// carrying 85% of the mass) on top of uniform smoothing, so sequences
    /// have local structure a small model can actually learn while every
    /// transition stays possible.
    pub fn from_seed(num_symbols: usize, seed: u64) -> Self {
        let mut rng = Rng::new(derive_seed(seed, "markov-chain"));
        let smoothing = 0.15 / num_symbols as f64;
        let weights = [8.0, 4.0, 2.0, 1.0];
        let weight_sum: f64 = weights.iter().sum();
        let mut transitions = vec![0.0; num_symbols * num_symbols];
        for r in 0..num_symbols {
            let row = &mut transitions[r * num_symbols..(r + 1) * num_symbols];
            row.iter_mut().for_each(|v| *v = smoothing);
            let mut successors = Vec::with_capacity(weights.len());
            while successors.len() < weights.len() {
                let s = rng.below(num_symbols);
                if !successors.contains(&s) {
                    successors.push(s);
                }
            }
            for (s, w) in successors.into_iter().zip(weights) {
                row[s] += 0.85 * w / weight_sum;
            }
        }
        let stationary = power_iteration(&transitions, num_symbols, 200);
        MarkovChain {
            num_symbols,
            transitions,
            stationary,
        }
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    /// Sample `len` content symbols; the first symbol follows the stationary
    /// distribution.
    pub fn sample(&self, len: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut current = rng.categorical(&self.stationary);
        out.push(current);
        for _ in 1..len {
            let row = &self.transitions[current * self.num_symbols..(current + 1) * self.num_symbols];
            current = rng.categorical(row);
            out.push(current);
        }
        out
    }
}

fn power_iteration(transitions: &[f64], k: usize, iters: usize) -> Vec<f64> {
    let mut pi = vec![1.0 / k as f64; k];
    let mut next = vec![0.0; k];
    for _ in 0..iters {
        next.iter_mut().for_each(|v| *v = 0.0);
        for (i, &p) in pi.iter().enumerate() {
            for j in 0..k {
                next[j] += p * transitions[i * k + j];
            }
        }
        std::mem::swap(&mut pi, &mut next);
    }
    pi
}

/// Unlabeled corpus: `num_sequences` sequences of exactly `seq_len` tokens,
/// each framed `CLS <content> SEP`. Deterministic in the seed.
pub fn generate_corpus(
    chain: &MarkovChain,
    vocab: &Vocab,
    seed: u64,
    num_sequences: usize,
    seq_len: usize,
) -> Vec<Vec<usize>> {
    assert!(seq_len >= 3, "seq_len must fit CLS + content + SEP");
    let mut rng = Rng::new(derive_seed(seed, "corpus"));
    (0..num_sequences)
        .map(|_| frame_sequence(&chain.sample(seq_len - 2, &mut rng), vocab))
        .collect()
}

fn frame_sequence(content: &[usize], vocab: &Vocab) -> Vec<usize> {
    let mut ids = Vec::with_capacity(content.len() + 2);
    ids.push(CLS_ID);
    ids.extend(content.iter().map(|&s| vocab.content_id(s)));
    ids.push(SEP_ID);
    ids
}

/// Content symbols of a framed sequence (drops specials).
pub fn content_of(ids: &[usize], vocab: &Vocab) -> Vec<usize> {
    ids.iter().filter_map(|&id| vocab.symbol_of(id)).collect()
}

// ── Task families ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskFamily {
    /// Label 1 iff the contiguous symbol pattern occurs.
    PatternPresence { pattern: Vec<usize> },
    /// Label = count(symbol) mod modulus.
    SymbolParity { symbol: usize, modulus: usize },
    /// Label 1 iff strictly more tokens from `lex_a` than from `lex_b`.
    LexiconMajority { lex_a: Vec<usize>, lex_b: Vec<usize> },
    /// Label 1 iff some occurrence of `first` precedes some occurrence of `second`.
    PairSubsequence { first: usize, second: usize },
}

impl TaskFamily {
    pub fn name(&self) -> &'static str {
        match self {
            TaskFamily::PatternPresence { .. } => "pattern-presence",
            TaskFamily::SymbolParity { .. } => "symbol-parity",
            TaskFamily::LexiconMajority { .. } => "lexicon-majority",
            TaskFamily::PairSubsequence { .. } => "pair-subsequence",
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            TaskFamily::SymbolParity { modulus, .. } => *modulus,
            _ => 2,
        }
    }

    /// The labeling rule, evaluated on content symbols.
    pub fn label(&self, content: &[usize]) -> usize {
        match self {
            TaskFamily::PatternPresence { pattern } => {
                usize::from(content.windows(pattern.len()).any(|w| w == pattern.as_slice()))
            }
            TaskFamily::SymbolParity { symbol, modulus } => {
                content.iter().filter(|&&s| s == *symbol).count() % modulus
            }
            TaskFamily::LexiconMajority { lex_a, lex_b } => {
                let a = content.iter().filter(|s| lex_a.contains(s)).count();
                let b = content.iter().filter(|s| lex_b.contains(s)).count();
                usize::from(a > b)
            }
            TaskFamily::PairSubsequence { first, second } => {
                let mut seen_first = false;
                for &s in content {
                    if seen_first && s == *second {
                        return 1;
                    }
                    if s == *first {
                        seen_first = true;
                    }
                }
                0
            }
        }
    }
}

/// Parameterized synthetic classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub family: TaskFamily,
    pub n_classes: usize,
    pub domain_tag: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub token_ids: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Train,
    Dev,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub examples: Vec<Example>,
    pub role: Role,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Fraction of the most common label — the majority-class accuracy floor.
    pub fn majority_prior(&self, n_classes: usize) -> f64 {
        let mut counts = vec![0usize; n_classes];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        *counts.iter().max().unwrap() as f64 / self.len() as f64
    }

    /// One example per line: space-separated token ids, a tab, the label.
    pub fn export(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for ex in &self.examples {
            let ids: Vec<String> = ex.token_ids.iter().map(usize::to_string).collect();
            writeln!(f, "{}\t{}", ids.join(" "), ex.label).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Draw labeled examples from the corpus chain, rejection-sampled to exact
/// class balance (sizes divide up per class, remainder to lower classes).
/// Train and dev use disjoint generator streams derived from the spec seed.
pub fn generate_task(
    chain: &MarkovChain,
    vocab: &Vocab,
    seq_len: usize,
    spec: &TaskSpec,
    train_size: usize,
    dev_size: usize,
) -> Result<(DatasetSplit, DatasetSplit)> {
    if train_size < spec.n_classes || dev_size < spec.n_classes {
        return Err(Error::config(format!(
            "task {}: split sizes must be >= n_classes {}",
            spec.name, spec.n_classes
        )));
    }
    let train = generate_split(chain, vocab, seq_len, spec, train_size, Role::Train)?;
    let dev = generate_split(chain, vocab, seq_len, spec, dev_size, Role::Dev)?;
    Ok((train, dev))
}

fn generate_split(
    chain: &MarkovChain,
    vocab: &Vocab,
    seq_len: usize,
    spec: &TaskSpec,
    size: usize,
    role: Role,
) -> Result<DatasetSplit> {
    let label = match role {
        Role::Train => "train",
        Role::Dev => "dev",
    };
    let mut rng = Rng::new(derive_seed(spec.seed, label));
    let mut quota = vec![size / spec.n_classes; spec.n_classes];
    for c in 0..size % spec.n_classes {
        quota[c] += 1;
    }
    let mut examples = Vec::with_capacity(size);
    let budget = size.saturating_mul(ATTEMPTS_PER_EXAMPLE);
    for _ in 0..budget {
        if examples.len() == size {
            break;
        }
        let content = chain.sample(seq_len - 2, &mut rng);
        let y = spec.family.label(&content);
        debug_assert!(y < spec.n_classes);
        if quota[y] > 0 {
            quota[y] -= 1;
            examples.push(Example {
                token_ids: frame_sequence(&content, vocab),
                label: y,
            });
        }
    }
    if examples.len() < size {
        return Err(Error::Generation(format!(
            "task {} ({label}): could not balance labels within {budget} attempts; \
             missing per-class counts {quota:?}",
            spec.name
        )));
    }
    Ok(DatasetSplit { examples, role })
}

/// Seeded shuffle, then the first `max(1, floor(n·fraction))` examples.
pub fn subsample(split: &DatasetSplit, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!(
            "subsample fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let n = split.len();
    let take = std::cmp::max(1, (n as f64 * fraction).floor() as usize);
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(derive_seed(seed, "subsample")).shuffle(&mut order);
    let examples = order[..take]
        .iter()
        .map(|&i| split.examples[i].clone())
        .collect();
    Ok(DatasetSplit {
        examples,
        role: split.role,
    })
}

/// Standard masked-LM corruption at [`MASK_RATE`].
pub fn mask_tokens(sequence: &[usize], vocab: &Vocab, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    mask_tokens_with_rate(sequence, vocab, seed, MASK_RATE)
}

/// Each content position is independently selected with probability `rate`;
/// of the selected: 80% become MASK, 10% a random content symbol, 10% stay
/// unchanged. Specials (CLS/SEP/PAD/MASK) are never selected.
pub fn mask_tokens_with_rate(
    sequence: &[usize],
    vocab: &Vocab,
    seed: u64,
    rate: f64,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut rng = Rng::new(derive_seed(seed, "mlm-mask"));
    let mut masked = sequence.to_vec();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (i, &id) in sequence.iter().enumerate() {
        if Vocab::is_special(id) {
            continue;
        }
        if rate > 0.0 && rng.chance(rate) {
            positions.push(i);
            targets.push(id);
            let u = rng.uniform();
            if u < 0.8 {
                masked[i] = MASK_ID;
            } else if u < 0.9 {
                masked[i] = vocab.content_id(rng.below(vocab.content_symbols));
            }
        }
    }
    (masked, positions, targets)
}

// ── Task suite construction ─────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub in_family: usize,
    pub out_family: usize,
    pub train_size: usize,
    pub dev_size: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            in_family: 8,
            out_family: 4,
            train_size: 2000,
            dev_size: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub in_family: Vec<TaskSpec>,
    pub out_family: Vec<TaskSpec>,
}

impl TaskSuite {
    pub fn task(&self, name: &str) -> Option<&TaskSpec> {
        self.in_family
            .iter()
            .chain(&self.out_family)
            .find(|t| t.name == name)
    }

    pub fn all_tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.in_family.iter().chain(&self.out_family)
    }

    pub fn is_out_family(&self, name: &str) -> bool {
        self.out_family.iter().any(|t| t.name == name)
    }
}

/// Tracks parameters already claimed by constructed tasks, so out-family
/// parameters stay disjoint from every in-family parameter.
#[derive(Debug, Default)]
struct ParamLedger {
    patterns: Vec<Vec<usize>>,
    parity_symbols: Vec<usize>,
    lexicon_symbols: Vec<usize>,
    pairs: Vec<(usize, usize)>,
}

/// Build the task suite. Family parameters are proposed at random and kept
/// only when a probe sample shows every class reachable at a workable rate;
/// out-family parameters are additionally required to be disjoint from all
/// in-family parameters.
pub fn build_suite(
    chain: &MarkovChain,
    vocab: &Vocab,
    seq_len: usize,
    cfg: &SuiteConfig,
    seed: u64,
) -> Result<TaskSuite> {
    let mut rng = Rng::new(derive_seed(seed, "suite"));
    let probe: Vec<Vec<usize>> = {
        let mut prng = Rng::new(derive_seed(seed, "suite-probe"));
        (0..768).map(|_| chain.sample(seq_len - 2, &mut prng)).collect()
    };
    let mut ledger = ParamLedger::default();
    let mut in_family = Vec::new();
    for i in 0..cfg.in_family {
        let family = propose_family(chain, vocab, &probe, i % 4, i, &mut ledger, &mut rng)?;
        in_family.push(make_spec(format!("in{i}"), family, "in", seed, i as u64));
    }
    let mut out_family = Vec::new();
    for i in 0..cfg.out_family {
        let family = propose_family(chain, vocab, &probe, i % 4, cfg.in_family + i, &mut ledger, &mut rng)?;
        out_family.push(make_spec(
            format!("out{i}"),
            family,
            "out",
            seed,
            (cfg.in_family + i) as u64,
        ));
    }
    let suite = TaskSuite { in_family, out_family };
    assert_suite_hygiene(&suite)?;
    Ok(suite)
}

fn make_spec(name: String, family: TaskFamily, side: &str, seed: u64, index: u64) -> TaskSpec {
    let n_classes = family.n_classes();
    let domain_tag = format!("{side}.{}", family.name());
    let task_seed = derive_seed(seed, &format!("task-{index}"));
    TaskSpec {
        name,
        family,
        n_classes,
        domain_tag,
        seed: task_seed,
    }
}

fn class_rates(family: &TaskFamily, probe: &[Vec<usize>]) -> Vec<f64> {
    let mut counts = vec![0usize; family.n_classes()];
    for content in probe {
        counts[family.label(content)] += 1;
    }
    counts
        .iter()
        .map(|&c| c as f64 / probe.len() as f64)
        .collect()
}

fn feasible(family: &TaskFamily, probe: &[Vec<usize>], min_rate: f64) -> bool {
    class_rates(family, probe).iter().all(|&r| r >= min_rate)
}

fn propose_family(
    chain: &MarkovChain,
    vocab: &Vocab,
    probe: &[Vec<usize>],
    kind: usize,
    task_index: usize,
    ledger: &mut ParamLedger,
    rng: &mut Rng,
) -> Result<TaskFamily> {
    let k = vocab.content_symbols;
    let mut min_rate: f64 = 0.12;
    for attempt in 0..4000 {
        if attempt > 0 && attempt % 400 == 0 {
            min_rate = (min_rate / 2.0).max(0.02);
        }
        let candidate = match kind {
            0 => {
                // Walk the chain's preferred successors so the pattern
                // actually occurs. Pattern lengths alternate 3, 2, 3, ... so
                // the suite spans both bigram and trigram detection.
                let len = if ledger.patterns.len() % 2 == 0 { 3 } else { 2 };
                let mut pattern = vec![rng.categorical(chain.stationary())];
                while pattern.len() < len {
                    let prev = *pattern.last().unwrap();
                    let row = &chain.transitions[prev * k..(prev + 1) * k];
                    pattern.push(rng.categorical(row));
                }
                TaskFamily::PatternPresence { pattern }
            }
            1 => {
                let symbol = rng.categorical(chain.stationary());
                // Second parity task of the suite counts modulo 3.
                let modulus = if task_index % 8 == 5 { 3 } else { 2 };
                TaskFamily::SymbolParity { symbol, modulus }
            }
            2 => {
                let mut symbols: Vec<usize> = (0..k).collect();
                rng.shuffle(&mut symbols);
                let available: Vec<usize> = symbols
                    .into_iter()
                    .filter(|s| !ledger.lexicon_symbols.contains(s))
                    .collect();
                if available.len() < 20 {
                    return Err(Error::Generation(
                        "not enough symbols left for a disjoint lexicon task".into(),
                    ));
                }
                TaskFamily::LexiconMajority {
                    lex_a: available[..10].to_vec(),
                    lex_b: available[10..20].to_vec(),
                }
            }
            _ => {
                let first = rng.categorical(chain.stationary());
                let second = rng.categorical(chain.stationary());
                if first == second {
                    continue;
                }
                TaskFamily::PairSubsequence { first, second }
            }
        };
        if !feasible(&candidate, probe, min_rate) {
            continue;
        }
        match &candidate {
            TaskFamily::PatternPresence { pattern } => {
                if ledger.patterns.contains(pattern) {
                    continue;
                }
                ledger.patterns.push(pattern.clone());
            }
            TaskFamily::SymbolParity { symbol, .. } => {
                if ledger.parity_symbols.contains(symbol) {
                    continue;
                }
                ledger.parity_symbols.push(*symbol);
            }
            TaskFamily::LexiconMajority { lex_a, lex_b } => {
                ledger.lexicon_symbols.extend(lex_a.iter().copied());
                ledger.lexicon_symbols.extend(lex_b.iter().copied());
            }
            TaskFamily::PairSubsequence { first, second } => {
                if ledger.pairs.contains(&(*first, *second)) {
                    continue;
                }
                ledger.pairs.push((*first, *second));
            }
        }
        return Ok(candidate);
    }
    Err(Error::Generation(format!(
        "no feasible parameters found for task family kind {kind}"
    )))
}

/// In-family and out-family parameter sets must not intersect.
pub fn assert_suite_hygiene(suite: &TaskSuite) -> Result<()> {
    let mut in_params = ParamLedger::default();
    for t in &suite.in_family {
        match &t.family {
            TaskFamily::PatternPresence { pattern } => in_params.patterns.push(pattern.clone()),
            TaskFamily::SymbolParity { symbol, .. } => in_params.parity_symbols.push(*symbol),
            TaskFamily::LexiconMajority { lex_a, lex_b } => {
                in_params.lexicon_symbols.extend(lex_a.iter().copied());
                in_params.lexicon_symbols.extend(lex_b.iter().copied());
            }
            TaskFamily::PairSubsequence { first, second } => {
                in_params.pairs.push((*first, *second));
            }
        }
    }
    for t in &suite.out_family {
        let clash = match &t.family {
            TaskFamily::PatternPresence { pattern } => in_params.patterns.contains(pattern),
            TaskFamily::SymbolParity { symbol, .. } => in_params.parity_symbols.contains(symbol),
            TaskFamily::LexiconMajority { lex_a, lex_b } => lex_a
                .iter()
                .chain(lex_b)
                .any(|s| in_params.lexicon_symbols.contains(s)),
            TaskFamily::PairSubsequence { first, second } => {
                in_params.pairs.contains(&(*first, *second))
            }
        };
        if clash {
            return Err(Error::config(format!(
                "suite hygiene violation: out-family task {} shares parameters with the in-family suite",
                t.name
            )));
        }
        // Duplicate names would silently merge results downstream.
        if suite.in_family.iter().any(|i| i.name == t.name) {
            return Err(Error::config(format!("duplicate task name {}", t.name)));
        }
    }
    Ok(())
}
