//! The training loop and everything around it: normalization, batched
//! epochs, evaluation, simple baselines, and hyperparameter selection.
//!
//! Values are z-scored per channel with statistics fitted on the train
//! split only; predictions are mapped back to raw units before any
//! reported MSE, so validation and test numbers are comparable across
//! normalizations.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TaskInstance;
use crate::graph::{observation_graph, squared_error, ts2graph, Answer};
use crate::model::batch::{forward_batch, BatchGraph};
use crate::model::{
    forward, forward_no_target, ChannelStats, Checkpoint, ModelConfig, ModelError, ModelParams,
};
use crate::numerics::{adam_step, AdamState, Tape, Tensor};
use crate::training::{Scheduler, SchedulerDecision, TrainConfig, TrainingError};

/// Fits per-channel mean and standard deviation over the observed
/// values of the observation parts. Channels without observations get
/// mean 0 and std 1; the std is floored to keep division sane.
pub fn fit_channel_stats(tasks: &[TaskInstance], channel_count: usize) -> ChannelStats {
    let mut sum = vec![0.0; channel_count];
    let mut sum_sq = vec![0.0; channel_count];
    let mut count = vec![0usize; channel_count];
    for t in tasks {
        for e in &t.series.events {
            for (c, v) in e.values.iter().enumerate() {
                if let Some(v) = v {
                    sum[c] += v;
                    sum_sq[c] += v * v;
                    count[c] += 1;
                }
            }
        }
    }
    let mut mean = vec![0.0; channel_count];
    let mut std = vec![1.0; channel_count];
    for c in 0..channel_count {
        if count[c] == 0 {
            continue;
        }
        let n = count[c] as f64;
        mean[c] = sum[c] / n;
        let var = (sum_sq[c] / n - mean[c] * mean[c]).max(0.0);
        std[c] = var.sqrt().max(1e-6);
    }
    ChannelStats { mean, std }
}

/// Z-scores every observed value and answer with the given statistics.
pub fn normalize_tasks(tasks: &[TaskInstance], stats: &ChannelStats) -> Vec<TaskInstance> {
    tasks
        .iter()
        .map(|t| {
            let mut t = t.clone();
            for e in &mut t.series.events {
                for (c, v) in e.values.iter_mut().enumerate() {
                    if let Some(v) = v {
                        *v = (*v - stats.mean[c]) / stats.std[c];
                    }
                }
            }
            for (item, v) in t.query.items.iter().zip(t.answer.0.iter_mut()) {
                *v = (*v - stats.mean[item.channel]) / stats.std[item.channel];
            }
            t
        })
        .collect()
}

/// One pre-assembled batch: the union graph, the normalized targets,
/// per-row loss weights giving each instance equal total weight, and
/// what is needed to report raw-unit errors.
struct PreparedBatch {
    bg: BatchGraph,
    instance_count: usize,
    targets: Tensor,
    weights: Tensor,
    query_channels: Vec<usize>,
    raw_answers: Vec<f64>,
}

fn prepare_batches(
    normalized: &[TaskInstance],
    raw: &[TaskInstance],
    ablation: bool,
    batch_size: usize,
) -> Result<Vec<PreparedBatch>, TrainingError> {
    let mut batches = Vec::new();
    for (chunk, raw_chunk) in normalized.chunks(batch_size).zip(raw.chunks(batch_size)) {
        let graphs = chunk
            .iter()
            .map(|t| {
                if ablation {
                    observation_graph(&t.series)
                } else {
                    ts2graph(&t.series, &t.query)
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let graph_refs: Vec<_> = graphs.iter().collect();
        let bg = if ablation {
            let queries: Vec<_> = chunk.iter().map(|t| &t.query).collect();
            BatchGraph::new_ablation(&graph_refs, &queries)?
        } else {
            BatchGraph::new(&graph_refs)?
        };
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        let mut query_channels = Vec::new();
        let mut raw_answers = Vec::new();
        for (t, r) in chunk.iter().zip(raw_chunk) {
            let q = t.answer.0.len();
            targets.extend_from_slice(&t.answer.0);
            weights.extend(std::iter::repeat(1.0 / (chunk.len() * q) as f64).take(q));
            query_channels.extend(t.query.items.iter().map(|i| i.channel));
            raw_answers.extend_from_slice(&r.answer.0);
        }
        let rows = targets.len();
        batches.push(PreparedBatch {
            bg,
            instance_count: chunk.len(),
            targets: Tensor::matrix(rows, 1, targets).map_err(ModelError::from)?,
            weights: Tensor::matrix(rows, 1, weights).map_err(ModelError::from)?,
            query_channels,
            raw_answers,
        });
    }
    Ok(batches)
}

/// Mean over batch instances of the per-instance normalized MSE.
fn batch_loss(
    tape: &Tape,
    preds: &Tensor,
    batch: &PreparedBatch,
) -> Result<Tensor, TrainingError> {
    let diff = tape.sub(preds, &batch.targets)?;
    let sq = tape.mul(&diff, &diff)?;
    let weighted = tape.mul(&sq, &batch.weights)?;
    Ok(tape.sum(&weighted)?)
}

/// Sum over the batch's instances of their raw-unit MSE.
fn batch_raw_error(preds: &[f64], batch: &PreparedBatch, stats: &ChannelStats) -> f64 {
    let mut total = 0.0;
    for &(start, len) in batch.bg.query_ranges() {
        let mut sq = 0.0;
        for row in start..start + len {
            let c = batch.query_channels[row];
            let raw_pred = preds[row] * stats.std[c] + stats.mean[c];
            let d = raw_pred - batch.raw_answers[row];
            sq += d * d;
        }
        total += sq / len as f64;
    }
    total
}

fn forward_preds(
    batch: &PreparedBatch,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<f64>, TrainingError> {
    let tape = Tape::new();
    let preds = forward_batch(&tape, &batch.bg, params, cfg)?;
    Ok(preds.data().to_vec())
}

/// One epoch's summary line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Normalized-unit training loss.
    pub train_mse: f64,
    /// Raw-unit validation MSE.
    pub val_mse: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Everything a single fold's training produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    /// Raw-unit test MSE, filled in by the cross-validation driver.
    pub test_mse: Option<f64>,
    pub mean_epoch_seconds: f64,
    pub mean_batch_seconds: f64,
}

/// Cross-validation summary, serialized as the run's report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub version: u32,
    pub label: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub folds: Vec<FoldReport>,
    pub test_mse_mean: f64,
    pub test_mse_std: f64,
}

pub const REPORT_VERSION: u32 = 1;

/// Resumable snapshot of an in-flight fold, written after every epoch.
#[derive(Serialize, Deserialize)]
pub struct TrainSession {
    pub epoch: usize,
    pub scheduler: Scheduler,
    pub adam: AdamState,
    pub current: Checkpoint,
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_val_mse: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    /// Set when early stopping fired, so a resume does not train on.
    #[serde(default)]
    pub stopped: bool,
}

impl TrainSession {
    pub fn save(&self, path: &Path) -> Result<(), TrainingError> {
        let json = serde_json::to_string(self).map_err(ModelError::from)?;
        std::fs::write(path, json).map_err(ModelError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainingError> {
        let json = std::fs::read_to_string(path).map_err(ModelError::from)?;
        Ok(serde_json::from_str(&json).map_err(ModelError::from)?)
    }
}

/// A trained fold: best-validation parameters, the normalization fitted
/// on this fold's train split, and the epoch log.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub stats: ChannelStats,
    pub report: FoldReport,
}

/// Trains on one fold's train split, tracking validation after every
/// epoch and returning the parameters of the best-validation epoch.
///
/// `resume` continues a fold from a persisted [`TrainSession`];
/// `persist` writes the session after each epoch so an interrupted run
/// can pick up where it stopped.
pub fn train_fold(
    train: &[TaskInstance],
    val: &[TaskInstance],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    resume: Option<TrainSession>,
    persist: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainingError> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if train.is_empty() {
        return Err(TrainingError::EmptySet("train"));
    }
    if val.is_empty() {
        return Err(TrainingError::EmptySet("validation"));
    }

    let stats = fit_channel_stats(train, model_cfg.channel_count);
    let train_norm = normalize_tasks(train, &stats);
    let val_norm = normalize_tasks(val, &stats);
    let ablation = model_cfg.ablation_no_target_edges;
    let batches = prepare_batches(&train_norm, train, ablation, train_cfg.batch_size)?;
    let val_batches = prepare_batches(&val_norm, val, ablation, train_cfg.batch_size)?;

    let (mut params, mut adam, mut scheduler, mut best, mut best_epoch, mut best_val, mut records, start_epoch) =
        match resume {
            Some(sess) => (
                sess.current.to_params()?,
                sess.adam,
                sess.scheduler,
                sess.best.to_params()?,
                sess.best_epoch,
                sess.best_val_mse,
                sess.epochs,
                if sess.stopped {
                    train_cfg.max_epochs
                } else {
                    sess.epoch
                },
            ),
            None => {
                let params = ModelParams::init(model_cfg, train_cfg.seed)?;
                let sizes: Vec<usize> =
                    params.named_tensors().iter().map(|(_, t)| t.len()).collect();
                let adam = AdamState::new(&sizes);
                let scheduler = Scheduler::from_config(train_cfg);
                let best = params.clone();
                (params, adam, scheduler, best, 0, None, Vec::new(), 0)
            }
        };

    let mut batch_seconds = Vec::new();
    for epoch in start_epoch..train_cfg.max_epochs {
        let epoch_start = Instant::now();
        let lr = scheduler.lr();
        let mut train_loss_sum = 0.0;
        for batch in &batches {
            let batch_start = Instant::now();
            let tape = Tape::new();
            let watched = params.watch(&tape);
            let preds = forward_batch(&tape, &batch.bg, &watched, model_cfg)?;
            let loss = batch_loss(&tape, &preds, batch)?;
            let loss_value = loss.item()?;
            if !loss_value.is_finite() {
                return Err(TrainingError::Divergence {
                    epoch: epoch + 1,
                    detail: format!("loss is {loss_value}"),
                });
            }
            train_loss_sum += loss_value * batch.instance_count as f64;
            let grads = tape.backward(&loss)?;
            let grad_bufs: Vec<Vec<f64>> = watched
                .named_tensors()
                .iter()
                .map(|(_, t)| match grads.get(t) {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; t.len()],
                })
                .collect();
            let grad_refs: Vec<&[f64]> = grad_bufs.iter().map(|g| g.as_slice()).collect();
            let mut named = params.named_tensors_mut();
            let mut tensors: Vec<&mut Tensor> = named.iter_mut().map(|(_, t)| &mut **t).collect();
            adam_step(&mut adam, &mut tensors, &grad_refs, lr).map_err(|e| {
                TrainingError::Divergence {
                    epoch: epoch + 1,
                    detail: e.to_string(),
                }
            })?;
            batch_seconds.push(batch_start.elapsed().as_secs_f64());
        }
        let train_mse = train_loss_sum / train.len() as f64;

        let mut val_error = 0.0;
        for batch in &val_batches {
            let preds = forward_preds(batch, &params, model_cfg)?;
            val_error += batch_raw_error(&preds, batch, &stats);
        }
        let val_mse = val_error / val.len() as f64;
        if !val_mse.is_finite() {
            return Err(TrainingError::Divergence {
                epoch: epoch + 1,
                detail: format!("validation MSE is {val_mse}"),
            });
        }

        let record = EpochRecord {
            epoch: epoch + 1,
            train_mse,
            val_mse,
            lr,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        records.push(record);

        let decision = scheduler.observe(val_mse);
        if decision == SchedulerDecision::Improved {
            best = params.clone();
            best_epoch = epoch + 1;
            best_val = Some(val_mse);
        }
        if let Some(path) = persist {
            TrainSession {
                epoch: epoch + 1,
                scheduler: scheduler.clone(),
                adam: adam.clone(),
                current: Checkpoint::from_params(model_cfg, &params, train_cfg.seed, Some(stats.clone())),
                best: Checkpoint::from_params(model_cfg, &best, train_cfg.seed, Some(stats.clone())),
                best_epoch,
                best_val_mse: best_val,
                epochs: records.clone(),
                stopped: decision == SchedulerDecision::Stop,
            }
            .save(path)?;
        }
        if decision == SchedulerDecision::Stop {
            break;
        }
    }

    let mean_epoch_seconds = if records.is_empty() {
        0.0
    } else {
        records.iter().map(|r| r.seconds).sum::<f64>() / records.len() as f64
    };
    let mean_batch_seconds = if batch_seconds.is_empty() {
        0.0
    } else {
        batch_seconds.iter().sum::<f64>() / batch_seconds.len() as f64
    };
    let best_val_mse = best_val.unwrap_or(f64::MAX);
    Ok(TrainOutcome {
        params: best,
        stats,
        report: FoldReport {
            epochs: records,
            best_epoch,
            best_val_mse,
            test_mse: None,
            mean_epoch_seconds,
            mean_batch_seconds,
        },
    })
}

/// Raw-unit MSE of the model over a task set, each instance weighted
/// equally, computed over padded batches.
pub fn evaluate(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    stats: &ChannelStats,
    tasks: &[TaskInstance],
    batch_size: usize,
) -> Result<f64, TrainingError> {
    if tasks.is_empty() {
        return Err(TrainingError::EmptySet("evaluation"));
    }
    let normalized = normalize_tasks(tasks, stats);
    let batches = prepare_batches(
        &normalized,
        tasks,
        model_cfg.ablation_no_target_edges,
        batch_size,
    )?;
    let mut total = 0.0;
    for batch in &batches {
        let preds = forward_preds(batch, params, model_cfg)?;
        total += batch_raw_error(&preds, batch, stats);
    }
    Ok(total / tasks.len() as f64)
}

/// Same metric as [`evaluate`], via the per-instance forward pass with
/// exact-size neighborhoods. Used to pin batching equivalence.
pub fn evaluate_unbatched(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    stats: &ChannelStats,
    tasks: &[TaskInstance],
) -> Result<f64, TrainingError> {
    if tasks.is_empty() {
        return Err(TrainingError::EmptySet("evaluation"));
    }
    let normalized = normalize_tasks(tasks, stats);
    let mut total = 0.0;
    for (t, raw) in normalized.iter().zip(tasks) {
        let pred = if model_cfg.ablation_no_target_edges {
            forward_no_target(&t.series, &t.query, params, model_cfg)?
        } else {
            forward(&t.series, &t.query, params, model_cfg)?
        };
        let raw_pred: Vec<f64> = pred
            .0
            .iter()
            .zip(&t.query.items)
            .map(|(v, item)| v * stats.std[item.channel] + stats.mean[item.channel])
            .collect();
        total += squared_error(&Answer(raw_pred), &raw.answer)?;
    }
    Ok(total / tasks.len() as f64)
}

/// Predicts each queried channel's most recent observed value; channels
/// never observed in the series fall back to the train-split mean.
pub fn baseline_carry_forward(tasks: &[TaskInstance], stats: &ChannelStats) -> f64 {
    let mut total = 0.0;
    for t in tasks {
        let mut sq = 0.0;
        for (item, target) in t.query.items.iter().zip(&t.answer.0) {
            let last = t
                .series
                .events
                .iter()
                .rev()
                .find_map(|e| e.values[item.channel]);
            let pred = last.unwrap_or(stats.mean[item.channel]);
            let d = pred - target;
            sq += d * d;
        }
        total += sq / t.answer.0.len() as f64;
    }
    total / tasks.len() as f64
}

/// Predicts the train-split mean of the queried channel.
pub fn baseline_train_mean(tasks: &[TaskInstance], stats: &ChannelStats) -> f64 {
    let mut total = 0.0;
    for t in tasks {
        let mut sq = 0.0;
        for (item, target) in t.query.items.iter().zip(&t.answer.0) {
            let d = stats.mean[item.channel] - target;
            sq += d * d;
        }
        total += sq / t.answer.0.len() as f64;
    }
    total / tasks.len() as f64
}

const LAYER_GRID: [usize; 4] = [1, 2, 3, 4];
const HEAD_GRID: [usize; 3] = [1, 2, 4];
const HIDDEN_GRID: [usize; 5] = [16, 32, 64, 128, 256];

/// Samples `count` distinct configurations from the hyperparameter
/// grids, keeping the template's channel count and ablation flag.
pub fn sample_search_space(template: &ModelConfig, count: usize, seed: u64) -> Vec<ModelConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = Vec::new();
    let space = LAYER_GRID.len() * HEAD_GRID.len() * HIDDEN_GRID.len();
    while seen.len() < count.min(space) {
        let cfg = ModelConfig {
            layer_count: LAYER_GRID[rng.gen_range(0..LAYER_GRID.len())],
            head_count: HEAD_GRID[rng.gen_range(0..HEAD_GRID.len())],
            hidden_dim: HIDDEN_GRID[rng.gen_range(0..HIDDEN_GRID.len())],
            ..template.clone()
        };
        if !seen.contains(&cfg) {
            seen.push(cfg);
        }
    }
    seen
}

/// Returns the index of the candidate with the lowest score, first
/// sampled winning ties, together with all scores.
pub fn select_hyperparameters_with(
    candidates: &[ModelConfig],
    mut eval: impl FnMut(&ModelConfig) -> Result<f64, TrainingError>,
) -> Result<(usize, Vec<f64>), TrainingError> {
    if candidates.is_empty() {
        return Err(TrainingError::EmptySet("candidate"));
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for cfg in candidates {
        scores.push(eval(cfg)?);
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    Ok((best, scores))
}

/// Full selection: sample candidates, train each on fold 0, pick the
/// best validation MSE.
pub fn select_hyperparameters(
    tasks: &[TaskInstance],
    template: &ModelConfig,
    train_cfg: &TrainConfig,
    mut on_candidate: impl FnMut(&ModelConfig, f64),
) -> Result<(ModelConfig, Vec<f64>), TrainingError> {
    let plan = crate::training::make_splits(tasks.len(), train_cfg)?;
    let fold = &plan.folds[0];
    let train: Vec<TaskInstance> = fold.train.iter().map(|&i| tasks[i].clone()).collect();
    let val: Vec<TaskInstance> = fold.validation.iter().map(|&i| tasks[i].clone()).collect();
    let candidates = sample_search_space(template, train_cfg.hyper_samples, train_cfg.seed);
    let (best, scores) = select_hyperparameters_with(&candidates, |cfg| {
        let outcome = train_fold(&train, &val, cfg, train_cfg, None, None, |_| {})?;
        on_candidate(cfg, outcome.report.best_val_mse);
        Ok(outcome.report.best_val_mse)
    })?;
    Ok((candidates[best].clone(), scores))
}

/// Progress of a cross-validation run, persisted so an interrupted run
/// can skip finished folds.
#[derive(Serialize, Deserialize)]
pub struct CvState {
    pub version: u32,
    pub label: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub completed: Vec<FoldReport>,
    pub best_val_mse: Option<f64>,
}

/// Trains every fold with the given configuration and aggregates the
/// raw-unit test MSE across folds. Returns the report together with the
/// parameters and normalization of the fold with the best validation
/// MSE.
pub fn run_cv(
    tasks: &[TaskInstance],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    label: &str,
    mut on_epoch: impl FnMut(usize, &EpochRecord),
) -> Result<(TrainReport, ModelParams, ChannelStats), TrainingError> {
    run_cv_resumable(tasks, model_cfg, train_cfg, label, None, false, |f, r| {
        on_epoch(f, r)
    })
}

/// [`run_cv`] with optional persistence: when `state_dir` is given, the
/// cross-validation progress, the in-flight fold session, and the
/// best-so-far checkpoint are written after every epoch and fold, and
/// `resume` picks the run up from those files.
pub fn run_cv_resumable(
    tasks: &[TaskInstance],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    label: &str,
    state_dir: Option<&Path>,
    resume: bool,
    mut on_epoch: impl FnMut(usize, &EpochRecord),
) -> Result<(TrainReport, ModelParams, ChannelStats), TrainingError> {
    let plan = crate::training::make_splits(tasks.len(), train_cfg)?;
    let state_path = state_dir.map(|d| d.join("cv_state.json"));
    let session_path = state_dir.map(|d| d.join("session.json"));
    let best_path = state_dir.map(|d| d.join("best_model.json"));

    let (mut folds, mut best_val, session) = if resume {
        let path = state_path
            .as_ref()
            .ok_or_else(|| TrainingError::InvalidConfig("resume needs a state directory".into()))?;
        let json = std::fs::read_to_string(path).map_err(ModelError::from)?;
        let state: CvState = serde_json::from_str(&json).map_err(ModelError::from)?;
        if state.model != *model_cfg || state.train != *train_cfg {
            return Err(TrainingError::InvalidConfig(
                "persisted run used a different configuration".into(),
            ));
        }
        let session = match session_path.as_ref() {
            Some(p) if p.exists() => Some(TrainSession::load(p)?),
            _ => None,
        };
        (state.completed, state.best_val_mse, session)
    } else {
        (Vec::new(), None, None)
    };
    let mut session = session;
    let mut best_mem: Option<(ModelParams, ChannelStats)> = None;

    let start_fold = folds.len();
    for fi in start_fold..plan.folds.len() {
        let fold = &plan.folds[fi];
        let train: Vec<TaskInstance> = fold.train.iter().map(|&i| tasks[i].clone()).collect();
        let val: Vec<TaskInstance> = fold.validation.iter().map(|&i| tasks[i].clone()).collect();
        let test: Vec<TaskInstance> = fold.test.iter().map(|&i| tasks[i].clone()).collect();
        let outcome = train_fold(
            &train,
            &val,
            model_cfg,
            train_cfg,
            session.take(),
            session_path.as_deref(),
            |r| on_epoch(fi, r),
        )?;
        let test_mse = evaluate(
            &outcome.params,
            model_cfg,
            &outcome.stats,
            &test,
            train_cfg.batch_size,
        )?;
        let mut report = outcome.report;
        report.test_mse = Some(test_mse);
        if best_val.map_or(true, |v| report.best_val_mse < v) {
            best_val = Some(report.best_val_mse);
            if let Some(p) = best_path.as_ref() {
                Checkpoint::from_params(
                    model_cfg,
                    &outcome.params,
                    train_cfg.seed,
                    Some(outcome.stats.clone()),
                )
                .save(p)?;
            }
            best_mem = Some((outcome.params, outcome.stats));
        }
        folds.push(report);
        if let Some(p) = state_path.as_ref() {
            let state = CvState {
                version: REPORT_VERSION,
                label: label.to_string(),
                model: model_cfg.clone(),
                train: train_cfg.clone(),
                completed: folds.clone(),
                best_val_mse: best_val,
            };
            let json = serde_json::to_string(&state).map_err(ModelError::from)?;
            std::fs::write(p, json).map_err(ModelError::from)?;
        }
        if let Some(p) = session_path.as_ref() {
            let _ = std::fs::remove_file(p);
        }
    }

    // the global best can predate a resume, in which case it is only on
    // disk as the persisted best checkpoint
    let (params, stats) = match best_mem {
        Some(b) => b,
        None => {
            let p = best_path.as_ref().ok_or_else(|| {
                TrainingError::InvalidConfig("no fold produced parameters".into())
            })?;
            let ckpt = Checkpoint::load(p)?;
            let stats = ckpt.normalization.clone().ok_or_else(|| {
                TrainingError::InvalidConfig("checkpoint is missing normalization stats".into())
            })?;
            (ckpt.to_params()?, stats)
        }
    };

    let scores: Vec<f64> = folds.iter().filter_map(|f| f.test_mse).collect();
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok((
        TrainReport {
            version: REPORT_VERSION,
            label: label.to_string(),
            model: model_cfg.clone(),
            train: train_cfg.clone(),
            folds,
            test_mse_mean: mean,
            test_mse_std: var.sqrt(),
        },
        params,
        stats,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, make_tasks, Horizon, SyntheticSpec, TaskWindow};

    fn small_tasks(count: usize, seed: u64) -> Vec<TaskInstance> {
        let spec = SyntheticSpec {
            instance_count: count,
            channel_count: 3,
            events_min: 6,
            events_max: 10,
            sparsity: 0.3,
            noise_std: 0.0,
            seed,
            ..SyntheticSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let w = TaskWindow {
            observe_until: spec.window,
            horizon: Horizon::Steps(spec.horizon_steps),
        };
        let (tasks, skipped) = make_tasks(&ds, &w).unwrap();
        assert_eq!(skipped, 0);
        tasks
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            layer_count: 2,
            head_count: 1,
            hidden_dim: 8,
            channel_count: 3,
            ablation_no_target_edges: false,
        }
    }

    #[test]
    fn channel_stats_come_from_observed_values_only() {
        let tasks = small_tasks(4, 1);
        let stats = fit_channel_stats(&tasks, 3);
        for c in 0..3 {
            assert!(stats.std[c] > 0.0);
            assert!(stats.mean[c].is_finite());
        }
        let normalized = normalize_tasks(&tasks, &stats);
        let renorm = fit_channel_stats(&normalized, 3);
        for c in 0..3 {
            assert!(renorm.mean[c].abs() < 1e-9);
            assert!((renorm.std[c] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batched_evaluation_matches_the_per_instance_route() {
        let tasks = small_tasks(7, 2);
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let stats = fit_channel_stats(&tasks, 3);
        let batched = evaluate(&params, &cfg, &stats, &tasks, 3).unwrap();
        let unbatched = evaluate_unbatched(&params, &cfg, &stats, &tasks).unwrap();
        assert!(
            (batched - unbatched).abs() < 1e-9,
            "batched {batched} vs unbatched {unbatched}"
        );
    }

    #[test]
    fn training_reduces_the_loss_and_returns_the_best_epoch() {
        let tasks = small_tasks(8, 3);
        let (train, val) = tasks.split_at(6);
        let cfg = small_cfg();
        let train_cfg = TrainConfig {
            max_epochs: 40,
            batch_size: 4,
            lr: 0.01,
            ..TrainConfig::default()
        };
        let outcome =
            train_fold(train, val, &cfg, &train_cfg, None, None, |_| {}).unwrap();
        let first = outcome.report.epochs.first().unwrap().train_mse;
        let last = outcome.report.epochs.last().unwrap().train_mse;
        assert!(last < first, "no progress: {first} -> {last}");
        assert!(outcome.report.best_val_mse.is_finite());
        let best = outcome
            .report
            .epochs
            .iter()
            .map(|r| r.val_mse)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(outcome.report.best_val_mse, best);
    }

    #[test]
    fn resumed_training_matches_an_uninterrupted_run() {
        let tasks = small_tasks(6, 4);
        let (train, val) = tasks.split_at(4);
        let cfg = small_cfg();
        let base = TrainConfig {
            batch_size: 4,
            lr: 0.01,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let session_path = dir.path().join("session.json");

        let short = TrainConfig {
            max_epochs: 3,
            ..base.clone()
        };
        train_fold(train, val, &cfg, &short, None, Some(&session_path), |_| {}).unwrap();
        let session = TrainSession::load(&session_path).unwrap();
        assert_eq!(session.epoch, 3);

        let full = TrainConfig {
            max_epochs: 6,
            ..base.clone()
        };
        let resumed =
            train_fold(train, val, &cfg, &full, Some(session), None, |_| {}).unwrap();
        let straight = train_fold(train, val, &cfg, &full, None, None, |_| {}).unwrap();
        assert_eq!(resumed.report.epochs.len(), 6);
        for (a, b) in resumed
            .params
            .named_tensors()
            .iter()
            .zip(straight.params.named_tensors())
        {
            assert_eq!(a.1.data(), b.1.data(), "tensor {} differs", a.0);
        }
        for (a, b) in resumed.report.epochs.iter().zip(&straight.report.epochs) {
            assert_eq!(a.train_mse, b.train_mse);
            assert_eq!(a.val_mse, b.val_mse);
        }
    }

    #[test]
    fn carry_forward_is_exact_on_constant_channels() {
        let tasks = small_tasks(5, 5);
        let stats = fit_channel_stats(&tasks, 3);
        let mut constant = tasks.clone();
        for t in &mut constant {
            for e in &mut t.series.events {
                for v in e.values.iter_mut().flatten() {
                    *v = 2.5;
                }
            }
            for v in &mut t.answer.0 {
                *v = 2.5;
            }
        }
        assert_eq!(baseline_carry_forward(&constant, &stats), 0.0);
        let mean_mse = baseline_train_mean(&constant, &stats);
        assert!(mean_mse > 0.0);
    }

    #[test]
    fn selection_takes_the_argmin_and_breaks_ties_first() {
        let cfgs: Vec<ModelConfig> = [(1, 16), (2, 16), (3, 16)]
            .iter()
            .map(|&(l, h)| ModelConfig {
                layer_count: l,
                head_count: 1,
                hidden_dim: h,
                channel_count: 3,
                ablation_no_target_edges: false,
            })
            .collect();
        let scores = [0.5, 0.2, 0.2];
        let mut it = scores.iter();
        let (best, out) = select_hyperparameters_with(&cfgs, |_| Ok(*it.next().unwrap())).unwrap();
        assert_eq!(best, 1);
        assert_eq!(out, scores);
        let (only, _) = select_hyperparameters_with(&cfgs[..1], |_| Ok(1.0)).unwrap();
        assert_eq!(only, 0);
    }

    #[test]
    fn sampled_search_space_is_distinct_and_on_grid() {
        let template = small_cfg();
        let a = sample_search_space(&template, 5, 7);
        let b = sample_search_space(&template, 5, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        for (i, cfg) in a.iter().enumerate() {
            assert!(LAYER_GRID.contains(&cfg.layer_count));
            assert!(HEAD_GRID.contains(&cfg.head_count));
            assert!(HIDDEN_GRID.contains(&cfg.hidden_dim));
            assert_eq!(cfg.channel_count, template.channel_count);
            assert!(!a[..i].contains(cfg));
        }
    }
}
