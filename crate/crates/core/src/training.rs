//! Two-stage optimization: Stage-I representation learning over the mixed
//! code-changes / masked-fragment stream, parameter transfer, Stage-II
//! message generation fine-tuning, and the single-phase hybrid objective.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Category, CommitRecord, TokenizedCommit, Vocabulary};
use crate::decode::{generate_batch, DecodeConfig};
use crate::metrics;
use crate::model::{
    gradients, init_parameters, Batch, GradStore, ModelConfig, ModelError, ParameterStore,
    StageTag,
};
use crate::rng::{self, salt};
use crate::tasks::{build_stage_one_dataset, MaskPolicy, TaskError, TaskKind};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("parameter/gradient/moment arrays are not aligned: {0}")]
    ShapeMismatch(String),
    #[error("expected a {expected:?} store, got {found:?}")]
    WrongStageTag { expected: StageTag, found: StageTag },
    #[error("label fraction {fraction} of {total} training pairs selects nothing")]
    NoLabels { fraction: f64, total: usize },
    #[error("non-finite loss at {stage} step {step}")]
    NumericFailure { stage: String, step: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub warmup_steps: u64,
    /// Multiplier on the inverse-square-root schedule.
    pub lr_factor: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// When set, the stage runs exactly this many optimizer steps, cycling
    /// through epochs as needed; the epoch count is then ignored.
    pub steps_stage1: Option<u64>,
    pub steps_stage2: Option<u64>,
    pub label_fraction: f64,
    pub mask_rate: f64,
    pub icsm_enabled: bool,
    pub hybrid: bool,
    /// Weight of the Stage-I addend in hybrid mode.
    pub hybrid_stage1_weight: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Validation sentences decoded after every Stage-II epoch (0 disables).
    pub validation_sample: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            warmup_steps: 4000,
            lr_factor: 1.0,
            epochs_stage1: 1,
            epochs_stage2: 1,
            steps_stage1: None,
            steps_stage2: None,
            label_fraction: 1.0,
            mask_rate: 0.5,
            icsm_enabled: false,
            hybrid: false,
            hybrid_stage1_weight: 1.0,
            seed: 0,
            adam: AdamConfig::default(),
            validation_sample: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.warmup_steps == 0 {
            return fail("warmup_steps must be at least 1".into());
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return fail(format!("label fraction {} outside (0, 1]", self.label_fraction));
        }
        MaskPolicy::new(self.mask_rate, self.seed)?;
        Ok(())
    }
}

/// `d_model^-0.5 * min(t^-0.5, t * warmup^-1.5)`.
pub fn lr_at_step(step: u64, d_model: usize, warmup: u64) -> f64 {
    let t = step.max(1) as f64;
    (d_model as f64).powf(-0.5) * t.powf(-0.5).min(t * (warmup as f64).powf(-1.5))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ParameterStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut ParameterStore,
    grads: &GradStore,
    state: &mut OptimizerState,
    lr: f64,
    adam: &AdamConfig,
) -> Result<(), TrainError> {
    let n = params.tensors.len();
    if grads.tensors.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(TrainError::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} moments",
            n,
            grads.tensors.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.tensors.iter().zip(&grads.tensors).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() || p.len() != state.v[i].len() {
            return Err(TrainError::ShapeMismatch(p.name.clone()));
        }
    }
    state.t += 1;
    let c1 = 1.0 - adam.beta1.powi(state.t as i32);
    let c2 = 1.0 - adam.beta2.powi(state.t as i32);
    for (i, (p, g)) in params.tensors.iter_mut().zip(&grads.tensors).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.data.len() {
            let gj = g.data[j];
            m[j] = adam.beta1 * m[j] + (1.0 - adam.beta1) * gj;
            v[j] = adam.beta2 * v[j] + (1.0 - adam.beta2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p.data[j] -= lr * mhat / (vhat.sqrt() + adam.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    StageOne,
    StageTwo,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchTask {
    ChangesPrediction,
    MaskedFragment,
    InStatementMask,
    Message,
}

impl From<TaskKind> for BatchTask {
    fn from(t: TaskKind) -> Self {
        match t {
            TaskKind::ChangesPrediction => BatchTask::ChangesPrediction,
            TaskKind::MaskedFragment => BatchTask::MaskedFragment,
            TaskKind::InStatementMask => BatchTask::InStatementMask,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub step: u64,
    pub epoch: u64,
    pub task: BatchTask,
    pub lr: f64,
    /// Optimized value: token-mean loss of the batch (hybrid: the sum of
    /// the two addends).
    pub loss: f64,
    /// Summed token loss of the batch.
    pub loss_sum: f64,
    pub tokens: usize,
    pub batch_size: usize,
    /// Hybrid only: weighted Stage-I addend and the Stage-II addend.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stage1_part: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stage2_part: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: u64,
    pub steps: u64,
    /// Number of commits `|C|` the objective is normalized by.
    pub commits: usize,
    /// Summed losses per task over the epoch.
    pub task_sums: BTreeMap<String, f64>,
    /// `(L_a + L_b [+ L_3]) / |C|` in Stage I, `L_II` otherwise.
    pub objective: f64,
    /// Per-commit means of the code-changes and masked-fragment terms;
    /// absent when the category has no commits.
    pub mean_changes: Option<f64>,
    pub mean_masked: Option<f64>,
    pub mean_token_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub valid_bleu4: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// Append-only training trace.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            _ => None,
        })
    }

    pub fn extend(&mut self, other: TrainingLog) {
        self.records.extend(other.records);
    }

    pub fn last_step_loss(&self) -> Option<f64> {
        self.steps().last().map(|s| s.loss)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        std::fs::write(path, buf)
    }
}

fn task_key(t: BatchTask) -> &'static str {
    match t {
        BatchTask::ChangesPrediction => "changes_prediction",
        BatchTask::MaskedFragment => "masked_fragment",
        BatchTask::InStatementMask => "in_statement_mask",
        BatchTask::Message => "message",
    }
}

struct Example {
    source: Vec<u32>,
    target: Vec<u32>,
}

fn make_batch(examples: &[&Example], cfg: &ModelConfig) -> Batch {
    let pairs: Vec<(&[u32], &[u32])> = examples
        .iter()
        .map(|e| (e.source.as_slice(), e.target.as_slice()))
        .collect();
    Batch::from_pairs(&pairs, cfg.max_len, cfg.max_len - 2)
}

fn dropout_key(seed: u64, salt: u64, step: u64) -> u64 {
    rng::stream(seed, &[salt, step]).next_u64()
}

struct PlannedBatch {
    task: BatchTask,
    batch: Batch,
}

/// Stage-I batches of one epoch: homogeneous in task, shuffled within each
/// task, then interleaved by a seeded shuffle of the batch order.
fn stage_one_epoch(
    commits: &[TokenizedCommit],
    vocab: &Vocabulary,
    model: &ModelConfig,
    cfg: &TrainConfig,
    epoch: u64,
) -> Result<Vec<PlannedBatch>, TrainError> {
    let policy = MaskPolicy::new(cfg.mask_rate, cfg.seed)?;
    let samples = build_stage_one_dataset(commits, &policy, cfg.icsm_enabled, epoch);
    let mut by_task: BTreeMap<u8, (TaskKind, Vec<Example>)> = BTreeMap::new();
    for s in samples {
        let key = s.task as u8;
        by_task.entry(key).or_insert_with(|| (s.task, Vec::new())).1.push(Example {
            source: vocab.encode(&s.source),
            target: vocab.encode(&s.target),
        });
    }
    let mut planned = Vec::new();
    for (key, (task, examples)) in &by_task {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[salt::STAGE1_ORDER, epoch, *key as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            planned.push(PlannedBatch {
                task: (*task).into(),
                batch: make_batch(&refs, model),
            });
        }
    }
    planned.shuffle(&mut rng::stream(cfg.seed, &[salt::STAGE1_ORDER, epoch, u64::MAX]));
    Ok(planned)
}

fn check_finite(loss: f64, phase: &str, step: u64) -> Result<(), TrainError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NumericFailure {
            stage: phase.to_string(),
            step,
        })
    }
}

pub fn train_stage_one(
    commits: &[TokenizedCommit],
    vocab: &Vocabulary,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ParameterStore, TrainingLog), TrainError> {
    cfg.validate()?;
    let mut params = init_parameters(model, cfg.seed)?;
    let mut opt = OptimizerState::new(&params);
    let mut log = TrainingLog::default();
    let n_explicit = commits
        .iter()
        .filter(|c| c.category == Category::ExplicitChange)
        .count();
    let n_implicit = commits.len() - n_explicit;
    let eps = model.label_smoothing;
    let mut step = 0u64;
    let mut epoch = 0u64;
    loop {
        let done = match cfg.steps_stage1 {
            Some(cap) => step >= cap,
            None => epoch as usize >= cfg.epochs_stage1,
        };
        if done || commits.is_empty() {
            break;
        }
        let batches = stage_one_epoch(commits, vocab, model, cfg, epoch)?;
        if batches.is_empty() {
            break;
        }
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut tokens = 0usize;
        let epoch_start = step;
        for pb in &batches {
            if cfg.steps_stage1.is_some_and(|cap| step >= cap) {
                break;
            }
            step += 1;
            let lr = cfg.lr_factor * lr_at_step(step, model.d_model, cfg.warmup_steps);
            let dk = dropout_key(cfg.seed, salt::DROPOUT_STAGE1, step);
            let (stats, grads) = gradients(&params, &pb.batch, eps, Some(dk))?;
            check_finite(stats.mean, "stage1", step)?;
            adam_step(&mut params, &grads, &mut opt, lr, &cfg.adam)?;
            *sums.entry(task_key(pb.task).into()).or_default() += stats.sum;
            tokens += stats.tokens;
            log.records.push(LogRecord::Step(StepRecord {
                phase: Phase::StageOne,
                step,
                epoch,
                task: pb.task,
                lr,
                loss: stats.mean,
                loss_sum: stats.sum,
                tokens: stats.tokens,
                batch_size: pb.batch.len(),
                stage1_part: None,
                stage2_part: None,
            }));
        }
        let total: f64 = sums.values().sum();
        let get = |k: &str| sums.get(k).copied().unwrap_or(0.0);
        log.records.push(LogRecord::Epoch(EpochRecord {
            phase: Phase::StageOne,
            epoch,
            steps: step - epoch_start,
            commits: commits.len(),
            objective: total / commits.len() as f64,
            mean_changes: (n_explicit > 0).then(|| get("changes_prediction") / n_explicit as f64),
            mean_masked: (n_implicit > 0).then(|| get("masked_fragment") / n_implicit as f64),
            mean_token_loss: if tokens > 0 { total / tokens as f64 } else { 0.0 },
            task_sums: sums,
            valid_bleu4: None,
        }));
        epoch += 1;
    }
    params.stage = StageTag::StageI;
    params.step = step;
    Ok((params, log))
}

/// Copies every array bit-exact into a fresh Stage-II store; the step
/// counter restarts so fine-tuning gets its own warmup.
pub fn transfer_parameters(stage1: &ParameterStore) -> Result<ParameterStore, TrainError> {
    if stage1.stage != StageTag::StageI {
        return Err(TrainError::WrongStageTag {
            expected: StageTag::StageI,
            found: stage1.stage,
        });
    }
    let mut out = stage1.clone();
    out.stage = StageTag::StageII;
    out.step = 0;
    Ok(out)
}

/// Indices of the labeled subset: a seeded permutation's prefix, so smaller
/// fractions select subsets of larger ones.
pub fn label_subset(total: usize, fraction: f64, seed: u64) -> Result<Vec<usize>, TrainError> {
    let k = (fraction * total as f64).round() as usize;
    if k == 0 {
        return Err(TrainError::NoLabels { fraction, total });
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng::stream(seed, &[salt::LABEL_SUBSET]));
    let mut chosen = order[..k.min(total)].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

fn message_examples(
    records: &[CommitRecord],
    vocab: &Vocabulary,
    subset: &[usize],
) -> Vec<Example> {
    subset
        .iter()
        .map(|&i| Example {
            source: vocab.encode(&records[i].diff_tokens),
            target: vocab.encode(&records[i].msg_tokens),
        })
        .collect()
}

fn stage_two_epoch(examples: &[Example], model: &ModelConfig, cfg: &TrainConfig, epoch: u64) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, &[salt::STAGE2_ORDER, epoch]));
    order
        .chunks(cfg.batch_size)
        .map(|chunk| {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            make_batch(&refs, model)
        })
        .collect()
}

/// Validation split used for per-epoch BLEU snapshots.
#[derive(Clone, Copy)]
pub struct Validation<'a> {
    pub records: &'a [CommitRecord],
    pub vocab: &'a Vocabulary,
}

fn validation_bleu(
    params: &ParameterStore,
    valid: Option<Validation<'_>>,
    sample: usize,
) -> Option<f64> {
    let v = valid?;
    if sample == 0 || v.records.is_empty() {
        return None;
    }
    let records = &v.records[..sample.min(v.records.len())];
    let sources: Vec<Vec<u32>> = records
        .iter()
        .map(|r| v.vocab.encode(&r.diff_tokens))
        .collect();
    let outputs = generate_batch(params, &sources, &DecodeConfig::default()).ok()?;
    let candidates: Vec<Vec<String>> = outputs
        .iter()
        .map(|ids| v.vocab.decode(ids).unwrap_or_default())
        .collect();
    let references: Vec<Vec<String>> = records.iter().map(|r| r.msg_tokens.clone()).collect();
    metrics::corpus_bleu4(&candidates, &references).ok()
}

/// Fine-tunes `init` (a transferred Stage-I store, or a scratch store for
/// the no-pretraining ablation) on diff -> message pairs.
pub fn train_stage_two(
    records: &[CommitRecord],
    vocab: &Vocabulary,
    init: ParameterStore,
    cfg: &TrainConfig,
    valid: Option<Validation<'_>>,
) -> Result<(ParameterStore, TrainingLog), TrainError> {
    cfg.validate()?;
    if init.stage == StageTag::StageI {
        return Err(TrainError::WrongStageTag {
            expected: StageTag::StageII,
            found: init.stage,
        });
    }
    let model = init.config;
    let subset = label_subset(records.len(), cfg.label_fraction, cfg.seed)?;
    let examples = message_examples(records, vocab, &subset);
    let mut params = init;
    let mut opt = OptimizerState::new(&params);
    let mut log = TrainingLog::default();
    let eps = model.label_smoothing;
    let mut step = 0u64;
    let mut epoch = 0u64;
    loop {
        let done = match cfg.steps_stage2 {
            Some(cap) => step >= cap,
            None => epoch as usize >= cfg.epochs_stage2,
        };
        if done {
            break;
        }
        let mut sum = 0.0;
        let mut tokens = 0usize;
        let epoch_start = step;
        for batch in stage_two_epoch(&examples, &model, cfg, epoch) {
            if cfg.steps_stage2.is_some_and(|cap| step >= cap) {
                break;
            }
            step += 1;
            let lr = cfg.lr_factor * lr_at_step(step, model.d_model, cfg.warmup_steps);
            let dk = dropout_key(cfg.seed, salt::DROPOUT_STAGE2, step);
            let (stats, grads) = gradients(&params, &batch, eps, Some(dk))?;
            check_finite(stats.mean, "stage2", step)?;
            adam_step(&mut params, &grads, &mut opt, lr, &cfg.adam)?;
            sum += stats.sum;
            tokens += stats.tokens;
            log.records.push(LogRecord::Step(StepRecord {
                phase: Phase::StageTwo,
                step,
                epoch,
                task: BatchTask::Message,
                lr,
                loss: stats.mean,
                loss_sum: stats.sum,
                tokens: stats.tokens,
                batch_size: batch.len(),
                stage1_part: None,
                stage2_part: None,
            }));
        }
        log.records.push(LogRecord::Epoch(EpochRecord {
            phase: Phase::StageTwo,
            epoch,
            steps: step - epoch_start,
            commits: examples.len(),
            task_sums: BTreeMap::from([("message".to_string(), sum)]),
            objective: sum / examples.len() as f64,
            mean_changes: None,
            mean_masked: None,
            mean_token_loss: if tokens > 0 { sum / tokens as f64 } else { 0.0 },
            valid_bleu4: validation_bleu(&params, valid, cfg.validation_sample),
        }));
        epoch += 1;
    }
    params.stage = StageTag::StageII;
    params.step = step;
    Ok((params, log))
}

/// Stage I, transfer, Stage II.
pub fn train_two_stage(
    commits: &[TokenizedCommit],
    records: &[CommitRecord],
    vocab: &Vocabulary,
    model: &ModelConfig,
    cfg: &TrainConfig,
    valid: Option<Validation<'_>>,
) -> Result<(ParameterStore, TrainingLog), TrainError> {
    let (stage1, mut log) = train_stage_one(commits, vocab, model, cfg)?;
    let init = transfer_parameters(&stage1)?;
    let (params, log2) = train_stage_two(records, vocab, init, cfg, valid)?;
    log.extend(log2);
    Ok((params, log))
}

/// Stage II from random initialization (no representation learning).
pub fn train_scratch_stage_two(
    records: &[CommitRecord],
    vocab: &Vocabulary,
    model: &ModelConfig,
    cfg: &TrainConfig,
    valid: Option<Validation<'_>>,
) -> Result<(ParameterStore, TrainingLog), TrainError> {
    let init = init_parameters(model, cfg.seed)?;
    train_stage_two(records, vocab, init, cfg, valid)
}

/// Single-phase training on the summed objective: every step pairs one
/// Stage-I batch with one Stage-II batch. The Stage-II side follows exactly
/// the batch order, dropout streams and schedule of scratch Stage-II
/// training with the same seed.
pub fn train_hybrid(
    commits: &[TokenizedCommit],
    records: &[CommitRecord],
    vocab: &Vocabulary,
    model: &ModelConfig,
    cfg: &TrainConfig,
    valid: Option<Validation<'_>>,
) -> Result<(ParameterStore, TrainingLog), TrainError> {
    cfg.validate()?;
    let mut params = init_parameters(model, cfg.seed)?;
    let subset = label_subset(records.len(), cfg.label_fraction, cfg.seed)?;
    let examples = message_examples(records, vocab, &subset);
    let mut opt = OptimizerState::new(&params);
    let mut log = TrainingLog::default();
    let eps = model.label_smoothing;
    let w1 = cfg.hybrid_stage1_weight;

    let mut s1_epoch = 0u64;
    let mut s1_queue: Vec<PlannedBatch> = Vec::new();
    let mut s1_exhausted = commits.is_empty();
    let mut next_stage_one = |queue: &mut Vec<PlannedBatch>| -> Result<Option<PlannedBatch>, TrainError> {
        if s1_exhausted {
            return Ok(None);
        }
        if queue.is_empty() {
            let mut fresh = stage_one_epoch(commits, vocab, model, cfg, s1_epoch)?;
            s1_epoch += 1;
            if fresh.is_empty() {
                s1_exhausted = true;
                return Ok(None);
            }
            fresh.reverse();
            *queue = fresh;
        }
        Ok(queue.pop())
    };

    let mut step = 0u64;
    let mut epoch = 0u64;
    loop {
        let done = match cfg.steps_stage2 {
            Some(cap) => step >= cap,
            None => epoch as usize >= cfg.epochs_stage2,
        };
        if done {
            break;
        }
        let mut sum1 = 0.0;
        let mut sum2 = 0.0;
        let mut tokens = 0usize;
        let epoch_start = step;
        for batch in stage_two_epoch(&examples, model, cfg, epoch) {
            if cfg.steps_stage2.is_some_and(|cap| step >= cap) {
                break;
            }
            step += 1;
            let lr = cfg.lr_factor * lr_at_step(step, model.d_model, cfg.warmup_steps);
            let dk2 = dropout_key(cfg.seed, salt::DROPOUT_STAGE2, step);
            let (stats2, mut grads) = gradients(&params, &batch, eps, Some(dk2))?;
            let mut part1 = 0.0;
            let mut task = BatchTask::Message;
            if let Some(pb) = next_stage_one(&mut s1_queue)? {
                let dk1 = dropout_key(cfg.seed, salt::DROPOUT_STAGE1, step);
                let (stats1, grads1) = gradients(&params, &pb.batch, eps, Some(dk1))?;
                part1 = w1 * stats1.mean;
                sum1 += stats1.sum;
                task = pb.task;
                // a zero weight leaves the Stage-II gradient untouched
                if w1 != 0.0 {
                    grads.add_scaled(&grads1, w1);
                }
            }
            let total = part1 + stats2.mean;
            check_finite(total, "hybrid", step)?;
            adam_step(&mut params, &grads, &mut opt, lr, &cfg.adam)?;
            sum2 += stats2.sum;
            tokens += stats2.tokens;
            log.records.push(LogRecord::Step(StepRecord {
                phase: Phase::Hybrid,
                step,
                epoch,
                task,
                lr,
                loss: total,
                loss_sum: stats2.sum,
                tokens: stats2.tokens,
                batch_size: batch.len(),
                stage1_part: Some(part1),
                stage2_part: Some(stats2.mean),
            }));
        }
        log.records.push(LogRecord::Epoch(EpochRecord {
            phase: Phase::Hybrid,
            epoch,
            steps: step - epoch_start,
            commits: examples.len(),
            task_sums: BTreeMap::from([
                ("stage1".to_string(), sum1),
                ("message".to_string(), sum2),
            ]),
            objective: sum2 / examples.len() as f64,
            mean_changes: None,
            mean_masked: None,
            mean_token_loss: if tokens > 0 { sum2 / tokens as f64 } else { 0.0 },
            valid_bleu4: validation_bleu(&params, valid, cfg.validation_sample),
        }));
        epoch += 1;
    }
    params.stage = StageTag::StageII;
    params.step = step;
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NamedTensor;

    fn scalar_store(v: f64) -> ParameterStore {
        let mut p = init_parameters(&ModelConfig::desk(10), 0).unwrap();
        p.tensors = vec![NamedTensor {
            name: "x".into(),
            shape: vec![1],
            data: vec![v],
        }];
        p
    }

    #[test]
    fn schedule_reference_values() {
        let at_warmup = lr_at_step(4000, 512, 4000);
        let first = lr_at_step(1, 512, 4000);
        let want_warmup = 1.0 / (512f64.sqrt() * 4000f64.sqrt());
        let want_first = 1.0 / (512f64.sqrt() * 4000f64.powf(1.5));
        assert!((at_warmup / want_warmup - 1.0).abs() < 1e-12);
        assert!((first / want_first - 1.0).abs() < 1e-12);
        assert!((at_warmup - 6.988e-4).abs() < 5e-8);
        assert!((first - 1.747e-7).abs() < 5e-11);
        assert!(lr_at_step(3999, 512, 4000) < at_warmup);
        assert!(lr_at_step(4001, 512, 4000) < at_warmup);
    }

    #[test]
    fn schedule_rises_then_decays() {
        for t in 1..100 {
            assert!(lr_at_step(t, 64, 100) < lr_at_step(t + 1, 64, 100));
        }
        for t in 100..300 {
            assert!(lr_at_step(t, 64, 100) > lr_at_step(t + 1, 64, 100));
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = scalar_store(0.7);
        let g = GradStore::zeros_like(&p);
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &g, &mut s, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p.tensors[0].data[0], 0.7);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let adam = AdamConfig::default();
        let mut p = scalar_store(0.0);
        let mut g = GradStore::zeros_like(&p);
        g.tensors[0].data[0] = 1.0;
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &g, &mut s, 0.1, &adam).unwrap();
        // m = 0.1, v = 0.02; bias corrected both become exactly g and g^2
        let mhat = (1.0 - adam.beta1) / (1.0 - adam.beta1);
        let vhat = (1.0 - adam.beta2) / (1.0 - adam.beta2);
        let want = -0.1 * mhat / (vhat.sqrt() + adam.eps);
        assert!((p.tensors[0].data[0] - want).abs() < 1e-15);
        assert!((p.tensors[0].data[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn adam_rejects_misaligned_arrays() {
        let mut p = scalar_store(0.0);
        let g = GradStore { tensors: vec![] };
        let mut s = OptimizerState::new(&p);
        assert!(matches!(
            adam_step(&mut p, &g, &mut s, 0.1, &AdamConfig::default()),
            Err(TrainError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn label_subsets_are_nested_and_sized() {
        let all = label_subset(1000, 1.0, 3).unwrap();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        let half = label_subset(1000, 0.5, 3).unwrap();
        assert_eq!(half.len(), 500);
        assert_eq!(half, label_subset(1000, 0.5, 3).unwrap());
        let quarter = label_subset(1000, 0.25, 3).unwrap();
        assert!(quarter.iter().all(|i| half.binary_search(i).is_ok()));
        assert!(matches!(label_subset(3, 0.1, 3), Err(TrainError::NoLabels { .. })));
    }

    #[test]
    fn transfer_requires_stage_one() {
        let p = init_parameters(&ModelConfig::desk(10), 0).unwrap();
        assert!(matches!(
            transfer_parameters(&p),
            Err(TrainError::WrongStageTag { .. })
        ));
        let mut s1 = p.clone();
        s1.stage = StageTag::StageI;
        s1.step = 77;
        let s2 = transfer_parameters(&s1).unwrap();
        assert_eq!(s2.stage, StageTag::StageII);
        assert_eq!(s2.step, 0);
        assert_eq!(s2.tensors, s1.tensors);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.label_fraction = 0.0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            mask_rate: 1.2,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
