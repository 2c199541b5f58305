//! Probing harness: joint multi-task training of one encoder with small
//! classifier heads, evaluation, checkpointing, and the experiment matrix.
//!
//! Five probing tasks read the encoder's final states. Sentence-level tasks
//! (voice, tense, top-level structure) classify the mean-pooled states;
//! token-level tasks (smallest covering constituent, part of speech)
//! classify each position. All heads train together with one summed task
//! loss plus the weighted phrase-tag loss.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{encoder_forward, init_model, EncoderOutput, ModelConfig, ModelError};
use crate::objectives::{total_loss, LossBreakdown, Vocabulary, DEFAULT_TAG_LAMBDA};
use crate::params::{BoundParams, ParamStore, Parameter};
use crate::partition::{syntactic_partition, GranularitySpec};
use crate::phrase::InteractionKind;
use crate::tensor::{seeded_rng, uniform_init, Tape, TensorId};
use crate::treebank::LabeledExample;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training diverged at epoch {epoch} step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("{0}")]
    Data(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
}

// ── Tasks ────────────────────────────────────────────────────────────────

/// The five probing tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    Voice,
    Tense,
    #[serde(rename = "TSS")]
    Tss,
    #[serde(rename = "SPC")]
    Spc,
    #[serde(rename = "POS")]
    Pos,
}

pub const ALL_TASKS: [Task; 5] = [Task::Voice, Task::Tense, Task::Tss, Task::Spc, Task::Pos];

impl Task {
    /// Token-level tasks classify every position; the rest classify the
    /// whole sentence.
    pub fn is_token_level(&self) -> bool {
        matches!(self, Task::Spc | Task::Pos)
    }

    /// Gold labels of one example: one per token, or a single sentence
    /// label.
    pub fn gold<'a>(&self, ex: &'a LabeledExample) -> Vec<&'a str> {
        match self {
            Task::Voice => vec![&ex.labels.voice],
            Task::Tense => vec![&ex.labels.tense],
            Task::Tss => vec![&ex.labels.tss],
            Task::Spc => ex.labels.spc.iter().map(String::as_str).collect(),
            Task::Pos => ex.labels.pos.iter().map(String::as_str).collect(),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Task::Voice => "Voice",
            Task::Tense => "Tense",
            Task::Tss => "TSS",
            Task::Spc => "SPC",
            Task::Pos => "POS",
        };
        write!(f, "{s}")
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "Voice" => Ok(Task::Voice),
            "Tense" => Ok(Task::Tense),
            "TSS" => Ok(Task::Tss),
            "SPC" => Ok(Task::Spc),
            "POS" => Ok(Task::Pos),
            _ => Err(format!("bad task {s:?}: expected Voice, Tense, TSS, SPC, or POS")),
        }
    }
}

// ── Variants ─────────────────────────────────────────────────────────────

/// Preset encoder variants compared by the experiment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "ngram")]
    NGram,
    #[serde(rename = "syntactic")]
    Syntactic,
    #[serde(rename = "syntactic-interaction")]
    SyntacticInteraction,
}

pub const ALL_VARIANTS: [Variant; 4] =
    [Variant::Base, Variant::NGram, Variant::Syntactic, Variant::SyntacticInteraction];

impl Variant {
    pub fn granularities(&self) -> Vec<GranularitySpec> {
        match self {
            Variant::Base => vec![GranularitySpec::WordLevel],
            Variant::NGram => vec![
                GranularitySpec::WordLevel,
                GranularitySpec::NGram(2),
                GranularitySpec::NGram(3),
                GranularitySpec::NGram(4),
            ],
            Variant::Syntactic | Variant::SyntacticInteraction => vec![
                GranularitySpec::WordLevel,
                GranularitySpec::SyntacticLayer(1),
                GranularitySpec::SyntacticLayer(2),
                GranularitySpec::SyntacticLayer(3),
            ],
        }
    }

    pub fn interaction(&self) -> InteractionKind {
        match self {
            Variant::SyntacticInteraction => InteractionKind::OrderedNeuronsChain,
            _ => InteractionKind::None,
        }
    }

    /// Overwrites the granularity-related fields of `config`.
    pub fn apply(&self, config: &mut ModelConfig) {
        config.granularities = self.granularities();
        config.interaction = self.interaction();
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Base => "base",
            Variant::NGram => "ngram",
            Variant::Syntactic => "syntactic",
            Variant::SyntacticInteraction => "syntactic-interaction",
        };
        write!(f, "{s}")
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "base" => Ok(Variant::Base),
            "ngram" => Ok(Variant::NGram),
            "syntactic" => Ok(Variant::Syntactic),
            "syntactic-interaction" => Ok(Variant::SyntacticInteraction),
            _ => Err(format!(
                "bad variant {s:?}: expected base, ngram, syntactic, or syntactic-interaction"
            )),
        }
    }
}

// ── Model assembly ───────────────────────────────────────────────────────

/// A trained (or trainable) encoder with its classifier heads and every
/// vocabulary needed to map raw examples to indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub token_vocab: Vocabulary,
    pub tag_vocab: Vocabulary,
    pub task_vocabs: BTreeMap<Task, Vocabulary>,
    pub tasks: Vec<Task>,
    pub tag_lambda: f64,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    #[serde(flatten)]
    model: ProbeModel,
}

pub fn save_checkpoint(model: &ProbeModel, path: &Path) -> Result<(), CheckpointError> {
    let file = File::create(path)?;
    let wrapper = CheckpointFile { format_version: CHECKPOINT_VERSION, model: model.clone() };
    serde_json::to_writer(BufWriter::new(file), &wrapper)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ProbeModel, CheckpointError> {
    let file = File::open(path)?;
    let wrapper: CheckpointFile = serde_json::from_reader(BufReader::new(file))?;
    if wrapper.format_version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(wrapper.format_version));
    }
    Ok(wrapper.model)
}

fn task_head_params(
    store: &mut ParamStore,
    task: Task,
    d_model: usize,
    classes: usize,
    rng: &mut impl Rng,
) {
    let p = format!("head.{task}");
    store.insert_tensor(&format!("{p}.w1"), uniform_init(d_model, d_model, rng));
    store.insert(&format!("{p}.b1"), Parameter::zeros(vec![d_model]));
    store.insert_tensor(&format!("{p}.w2"), uniform_init(d_model, classes, rng));
    store.insert(&format!("{p}.b2"), Parameter::zeros(vec![classes]));
}

/// Builds vocabularies from the train split and initializes the encoder
/// plus one classifier head per task. `base.vocab_size` and
/// `base.tag_vocab` are derived from the data, everything else is taken
/// from `base` as given.
pub fn build_probe_model(
    base: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[LabeledExample],
) -> Result<ProbeModel, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::Data("train split is empty".into()));
    }
    if cfg.tasks.is_empty() {
        return Err(TrainError::Data("no tasks configured".into()));
    }
    let token_vocab =
        Vocabulary::build(train_set.iter().flat_map(|ex| ex.tokens.iter().map(String::as_str)));
    let mut task_vocabs = BTreeMap::new();
    for &task in &cfg.tasks {
        let vocab = Vocabulary::build(train_set.iter().flat_map(|ex| task.gold(ex).into_iter()));
        task_vocabs.insert(task, vocab);
    }

    let syn_layers: Vec<usize> = base
        .granularities
        .iter()
        .filter_map(|g| match g {
            GranularitySpec::SyntacticLayer(k) => Some(*k),
            _ => None,
        })
        .collect();
    let tag_vocab = Vocabulary::build(train_set.iter().flat_map(|ex| {
        syn_layers.iter().flat_map(|&k| syntactic_partition(&ex.tree, k).tags.unwrap_or_default())
    }));

    let mut config = base.clone();
    config.vocab_size = token_vocab.len();
    config.tag_vocab = if syn_layers.is_empty() { 0 } else { tag_vocab.len() };

    let mut rng = seeded_rng(cfg.seed);
    let mut params = init_model(&config, &mut rng)?;
    for &task in &cfg.tasks {
        task_head_params(&mut params, task, config.d_model, task_vocabs[&task].len(), &mut rng);
    }
    Ok(ProbeModel {
        config,
        params,
        token_vocab,
        tag_vocab,
        task_vocabs,
        tasks: cfg.tasks.clone(),
        tag_lambda: cfg.tag_lambda,
    })
}

// ── Forward ──────────────────────────────────────────────────────────────

/// Everything one forward pass produces for one example.
pub struct ExampleForward {
    pub encoder: EncoderOutput,
    pub losses: LossBreakdown,
    /// Per-task logits: `[1, C]` for sentence tasks, `[T, C]` for token
    /// tasks.
    pub task_logits: BTreeMap<Task, TensorId>,
}

fn head_logits(tape: &mut Tape, bound: &BoundParams, task: Task, states: TensorId) -> TensorId {
    let p = format!("head.{task}");
    let input = if task.is_token_level() { states } else { tape.mean_over_axis(states, 0) };
    let a = tape.matmul(input, bound.id(&format!("{p}.w1")));
    let a = tape.add_bias(a, bound.id(&format!("{p}.b1")));
    let a = tape.relu(a);
    let a = tape.matmul(a, bound.id(&format!("{p}.w2")));
    tape.add_bias(a, bound.id(&format!("{p}.b2")))
}

/// Encodes one example and assembles its joint loss: summed task cross
/// entropies (token tasks averaged per token) plus the weighted tag loss.
pub fn forward_example(
    tape: &mut Tape,
    bound: &BoundParams,
    model: &ProbeModel,
    ex: &LabeledExample,
) -> Result<ExampleForward, ModelError> {
    let ids: Vec<usize> = ex.tokens.iter().map(|t| model.token_vocab.id(t)).collect();
    let encoder = encoder_forward(tape, bound, &model.config, &ids, Some(&ex.tree))?;

    let mut task_logits = BTreeMap::new();
    let mut task_sum: Option<TensorId> = None;
    for &task in &model.tasks {
        let logits = head_logits(tape, bound, task, encoder.states);
        task_logits.insert(task, logits);
        let vocab = &model.task_vocabs[&task];
        let targets: Vec<usize> = task.gold(ex).iter().map(|l| vocab.id(l)).collect();
        let ce = tape.cross_entropy_from_logits(logits, &targets);
        let ce =
            if task.is_token_level() { tape.scale(ce, 1.0 / targets.len() as f64) } else { ce };
        task_sum = Some(match task_sum {
            Some(sum) => tape.add(sum, ce),
            None => ce,
        });
    }
    let task = task_sum.expect("at least one task");
    let losses = total_loss(tape, task, &encoder.tag_outputs, &model.tag_vocab, model.tag_lambda);
    Ok(ExampleForward { encoder, losses, task_logits })
}

// ── Optimizer ────────────────────────────────────────────────────────────

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm: f64 = grads.values().flat_map(|g| g.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }
    norm
}

/// One SGD step: `param -= lr * grad`.
pub fn sgd_step(store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64) {
    for (name, grad) in grads {
        let param = store.get_mut(name);
        assert_eq!(param.data.len(), grad.len(), "gradient size mismatch for {name:?}");
        for (p, g) in param.data.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }
}

// ── Training ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tasks: Vec<Task>,
    pub epochs: usize,
    /// Initial learning rate; decays linearly to zero over all steps.
    pub lr: f64,
    /// Token budget per batch; every batch holds at least one sentence.
    pub batch_tokens: usize,
    pub tag_lambda: f64,
    pub seed: u64,
    pub clip_norm: f64,
    /// Evaluate on the validation split every this many epochs (0 = only
    /// after the final epoch).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tasks: ALL_TASKS.to_vec(),
            epochs: 6,
            lr: 0.2,
            batch_tokens: 256,
            tag_lambda: DEFAULT_TAG_LAMBDA,
            seed: 0,
            clip_norm: 1.0,
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_total_loss: f64,
    pub mean_task_loss: f64,
    pub mean_tag_loss: f64,
    pub valid_accuracy: Option<BTreeMap<Task, f64>>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ProbeModel,
    /// Mean per-sentence training loss of each epoch.
    pub epoch_mean_losses: Vec<f64>,
    pub metrics: Vec<EpochMetrics>,
}

fn plan_batches(
    order: &mut [usize],
    lengths: &[usize],
    batch_tokens: usize,
    rng: &mut impl Rng,
) -> Vec<Vec<usize>> {
    order.shuffle(rng);
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut tokens = 0;
    for &idx in order.iter() {
        if !current.is_empty() && tokens + lengths[idx] > batch_tokens {
            batches.push(std::mem::take(&mut current));
            tokens = 0;
        }
        tokens += lengths[idx];
        current.push(idx);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Trains a fresh model on `train_set` with plain SGD, linear learning-rate
/// decay, and global gradient clipping. Gradients accumulate over the
/// sentences of a token-budget batch and are averaged by sentence count.
pub fn train(
    base: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[LabeledExample],
    valid_set: &[LabeledExample],
) -> Result<TrainOutcome, TrainError> {
    let mut model = build_probe_model(base, cfg, train_set)?;
    let lengths: Vec<usize> = train_set.iter().map(|ex| ex.tokens.len()).collect();

    let mut shuffle_rng = seeded_rng(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let plans: Vec<Vec<Vec<usize>>> = (0..cfg.epochs)
        .map(|_| plan_batches(&mut order, &lengths, cfg.batch_tokens, &mut shuffle_rng))
        .collect();
    let total_steps: usize = plans.iter().map(Vec::len).sum();

    let mut step = 0usize;
    let mut epoch_mean_losses = Vec::with_capacity(cfg.epochs);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for (epoch, plan) in plans.iter().enumerate() {
        let mut epoch_total = 0.0;
        let mut epoch_task = 0.0;
        let mut epoch_tag = 0.0;
        let mut epoch_sentences = 0usize;
        for batch in plan {
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for &idx in batch {
                let ex = &train_set[idx];
                let mut tape = Tape::new();
                let bound = model.params.bind(&mut tape);
                let fwd = forward_example(&mut tape, &bound, &model, ex)?;
                let loss = tape.data(fwd.losses.total)[0];
                if !loss.is_finite() {
                    return Err(TrainError::Diverged { epoch, step, loss });
                }
                epoch_total += loss;
                epoch_task += tape.data(fwd.losses.task)[0];
                epoch_tag += fwd.losses.tag.map_or(0.0, |t| tape.data(t)[0]);
                epoch_sentences += 1;
                tape.backward(fwd.losses.total);
                for (name, grad) in bound.grads(&tape) {
                    grads
                        .entry(name)
                        .and_modify(|acc| {
                            for (a, g) in acc.iter_mut().zip(&grad) {
                                *a += g;
                            }
                        })
                        .or_insert(grad);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.values_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            let lr = cfg.lr * (1.0 - step as f64 / total_steps as f64);
            sgd_step(&mut model.params, &grads, lr);
            step += 1;
        }

        let mean_total = epoch_total / epoch_sentences as f64;
        epoch_mean_losses.push(mean_total);
        let last = epoch + 1 == cfg.epochs;
        let eval_now = !valid_set.is_empty()
            && (last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0));
        let valid_accuracy = if eval_now { Some(evaluate(&model, valid_set)?) } else { None };
        metrics.push(EpochMetrics {
            epoch,
            mean_total_loss: mean_total,
            mean_task_loss: epoch_task / epoch_sentences as f64,
            mean_tag_loss: epoch_tag / epoch_sentences as f64,
            valid_accuracy,
        });
    }
    Ok(TrainOutcome { model, epoch_mean_losses, metrics })
}

// ── Evaluation ───────────────────────────────────────────────────────────

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy per task: micro-averaged over tokens for token-level tasks,
/// over sentences otherwise. Gold labels unseen in training count against
/// the model (they map to the unknown index).
pub fn evaluate(
    model: &ProbeModel,
    data: &[LabeledExample],
) -> Result<BTreeMap<Task, f64>, ModelError> {
    let mut correct: BTreeMap<Task, usize> = BTreeMap::new();
    let mut total: BTreeMap<Task, usize> = BTreeMap::new();
    for ex in data {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let fwd = forward_example(&mut tape, &bound, model, ex)?;
        for (&task, &logits) in &fwd.task_logits {
            let vocab = &model.task_vocabs[&task];
            let gold = task.gold(ex);
            let rows = tape.data(logits).chunks(vocab.len());
            for (row, label) in rows.zip(&gold) {
                if argmax(row) == vocab.id(label) {
                    *correct.entry(task).or_default() += 1;
                }
                *total.entry(task).or_default() += 1;
            }
        }
    }
    let token_count: usize = data.iter().map(|ex| ex.tokens.len()).sum();
    let mut accuracy = BTreeMap::new();
    for &task in &model.tasks {
        let t = total.get(&task).copied().unwrap_or(0);
        let expected = if task.is_token_level() { token_count } else { data.len() };
        assert_eq!(t, expected, "{task}: evaluated {t} predictions, expected {expected}");
        let c = correct.get(&task).copied().unwrap_or(0);
        accuracy.insert(task, if t == 0 { 0.0 } else { c as f64 / t as f64 });
    }
    Ok(accuracy)
}

// ── Experiment matrix ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig { variants: ALL_VARIANTS.to_vec(), seeds: vec![1, 2, 3] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    /// Held-out (test split) accuracy per task.
    pub accuracy: BTreeMap<Task, f64>,
    pub epoch_mean_losses: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub runs: BTreeMap<u64, RunReport>,
    /// Seeds whose run failed, with the error text.
    pub failures: BTreeMap<u64, String>,
    pub mean: BTreeMap<Task, f64>,
    pub min: BTreeMap<Task, f64>,
    pub max: BTreeMap<Task, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixReport {
    pub tasks: Vec<Task>,
    pub variants: Vec<VariantReport>,
}

/// Wall-clock seconds per job, keyed `variant/seed`. Kept out of
/// [`MatrixReport`] so reports of identical runs stay byte-identical.
pub type MatrixTimings = BTreeMap<String, f64>;

type SeedOutcome = (u64, Result<RunReport, String>);
type TimedOutcome = (Result<RunReport, String>, f64);

fn aggregate(variant: Variant, tasks: &[Task], results: Vec<SeedOutcome>) -> VariantReport {
    let mut runs = BTreeMap::new();
    let mut failures = BTreeMap::new();
    for (seed, result) in results {
        match result {
            Ok(run) => {
                runs.insert(seed, run);
            }
            Err(message) => {
                failures.insert(seed, message);
            }
        }
    }
    let mut mean = BTreeMap::new();
    let mut min = BTreeMap::new();
    let mut max = BTreeMap::new();
    if !runs.is_empty() {
        for &task in tasks {
            let values: Vec<f64> = runs.values().map(|r| r.accuracy[&task]).collect();
            mean.insert(task, values.iter().sum::<f64>() / values.len() as f64);
            min.insert(task, values.iter().copied().fold(f64::INFINITY, f64::min));
            max.insert(task, values.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
    }
    VariantReport { variant, runs, failures, mean, min, max }
}

/// Trains and evaluates every (variant, seed) pair on shared splits, in
/// parallel up to the machine's available parallelism. A failing run is
/// recorded under its variant and does not abort the rest. Results
/// aggregate in configuration order, so the report is independent of
/// scheduling.
pub fn run_matrix(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    matrix: &MatrixConfig,
    train_set: &[LabeledExample],
    valid_set: &[LabeledExample],
    test_set: &[LabeledExample],
) -> (MatrixReport, MatrixTimings) {
    let jobs: Vec<(Variant, u64)> =
        matrix.variants.iter().flat_map(|&v| matrix.seeds.iter().map(move |&s| (v, s))).collect();
    let slots: Mutex<Vec<Option<TimedOutcome>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let workers =
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(jobs.len()).max(1);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let (variant, seed) = jobs[i];
                let started = Instant::now();
                let mut config = base.clone();
                variant.apply(&mut config);
                let mut cfg = train_cfg.clone();
                cfg.seed = seed;
                let result = train(&config, &cfg, train_set, valid_set)
                    .map_err(|e| e.to_string())
                    .and_then(|outcome| {
                        let accuracy =
                            evaluate(&outcome.model, test_set).map_err(|e| e.to_string())?;
                        Ok(RunReport {
                            seed,
                            accuracy,
                            epoch_mean_losses: outcome.epoch_mean_losses,
                        })
                    });
                let elapsed = started.elapsed().as_secs_f64();
                slots.lock().unwrap()[i] = Some((result, elapsed));
            });
        }
    });

    let outcomes = slots.into_inner().unwrap();
    let mut timings = MatrixTimings::new();
    let mut per_variant: BTreeMap<usize, Vec<SeedOutcome>> = BTreeMap::new();
    for ((variant, seed), outcome) in jobs.iter().zip(outcomes) {
        let (result, secs) = outcome.expect("every job ran");
        timings.insert(format!("{variant}/{seed}"), secs);
        let variant_idx = matrix.variants.iter().position(|v| v == variant).unwrap();
        per_variant.entry(variant_idx).or_default().push((*seed, result));
    }
    let variants = matrix
        .variants
        .iter()
        .enumerate()
        .map(|(idx, &v)| {
            aggregate(v, &train_cfg.tasks, per_variant.remove(&idx).unwrap_or_default())
        })
        .collect();
    (MatrixReport { tasks: train_cfg.tasks.clone(), variants }, timings)
}

/// Fixed-width text table of the matrix results: one mean/min/max row
/// triple per variant, one column per task plus the cross-task average.
pub fn render_report(report: &MatrixReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<24}{:>6}", "Model", "Stat"));
    for task in &report.tasks {
        out.push_str(&format!("{:>9}", task.to_string()));
    }
    out.push_str(&format!("{:>9}\n", "Avg"));
    for variant in &report.variants {
        for (stat, values) in
            [("mean", &variant.mean), ("min", &variant.min), ("max", &variant.max)]
        {
            out.push_str(&format!("{:<24}{:>6}", variant.variant.to_string(), stat));
            if values.is_empty() {
                out.push_str(&format!("{:>9}\n", "failed"));
                continue;
            }
            let mut sum = 0.0;
            for task in &report.tasks {
                let v = values[task];
                sum += v;
                out.push_str(&format!("{:>9.4}", v));
            }
            out.push_str(&format!("{:>9.4}\n", sum / report.tasks.len() as f64));
        }
        for (seed, message) in &variant.failures {
            out.push_str(&format!(
                "{:<24}  seed {seed} failed: {message}\n",
                variant.variant.to_string()
            ));
        }
    }
    out
}
