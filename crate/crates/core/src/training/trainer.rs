use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::objective::{total_loss, TrainSample};
use super::optimizer::{Optimizer, OptimizerConfig};
use super::{DemoDirection, LossBreakdown, LossWeights, Phase, PhaseSchedule, PhaseTracker, TrainingError};
use crate::corpus::{AnnotationRecord, ProfileMap, RatingScale};
use crate::model::{Model, ModelError, Noise, SampleKey, TextEmbeddingStore};
use crate::seed;

/// A held-out example scored on the rating scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub key: SampleKey,
    pub rating: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    /// Base weights; load, orthogonality and variance are replaced by the active phase.
    pub weights: LossWeights,
    pub schedule: PhaseSchedule,
    #[serde(default)]
    pub demo_direction: DemoDirection,
    /// Clip dev predictions to this scale before scoring.
    #[serde(default)]
    pub clip: Option<RatingScale>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        self.optimizer.validate(true)?;
        self.weights.validate()?;
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch-mean loss components.
    pub loss: LossBreakdown,
    pub phase: Phase,
    pub running_load_std: f64,
    pub dev_mae: Option<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub tau_ab: f64,
    pub tau_bc: f64,
    pub ema_decay: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub final_phase: Phase,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainingLog,
    /// Wall-clock seconds per epoch; kept outside the log so logs stay reproducible.
    pub epoch_seconds: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        let improved = match self.best {
            None => true,
            Some((_, b)) => metric < b,
        };
        if improved {
            self.best = Some((epoch, metric));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision { improved, stop: self.stale >= self.patience }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }
}

fn keys<'a, I>(
    model: &Model,
    store: &TextEmbeddingStore,
    records: I,
    profiles: &ProfileMap,
) -> Result<Vec<(SampleKey, &'a AnnotationRecord)>, TrainingError>
where
    I: IntoIterator<Item = &'a AnnotationRecord>,
{
    records
        .into_iter()
        .map(|r| {
            let profile = profiles.get(&r.annotator_id).ok_or_else(|| TrainingError::MissingProfile(r.annotator_id.clone()))?;
            Ok((model.sample_key(store, &r.instance_id, &r.annotator_id, profile)?, r))
        })
        .collect()
}

/// Resolves records into unit-weight samples with normalized targets.
pub fn prepare_training<'a, I>(
    model: &Model,
    store: &TextEmbeddingStore,
    records: I,
    profiles: &ProfileMap,
) -> Result<Vec<TrainSample>, TrainingError>
where
    I: IntoIterator<Item = &'a AnnotationRecord>,
{
    Ok(keys(model, store, records, profiles)?
        .into_iter()
        .map(|(key, r)| TrainSample { key, target: model.normalizer.normalize(r.rating), weight: 1.0 })
        .collect())
}

pub fn prepare_eval<'a, I>(
    model: &Model,
    store: &TextEmbeddingStore,
    records: I,
    profiles: &ProfileMap,
) -> Result<Vec<EvalSample>, TrainingError>
where
    I: IntoIterator<Item = &'a AnnotationRecord>,
{
    Ok(keys(model, store, records, profiles)?.into_iter().map(|(key, r)| EvalSample { key, rating: r.rating }).collect())
}

/// Mean absolute error of evaluation-mode predictions.
pub fn evaluation_mae(
    model: &Model,
    store: &TextEmbeddingStore,
    samples: &[EvalSample],
    clip: Option<&RatingScale>,
) -> Result<f64, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyInput("evaluation set"));
    }
    let mut total = 0.0;
    for s in samples {
        let emb = model.embed_key(store, &s.key, Noise::Mean);
        let mut p = model.forward(&emb.input)?.1.prediction;
        if let Some(scale) = clip {
            p = scale.clip(p);
        }
        total += (p - s.rating).abs();
    }
    Ok(total / samples.len() as f64)
}

/// Minibatch training with phase-scheduled auxiliary weights and early stopping
/// on dev MAE. Returns the best-dev checkpoint when a dev set is given.
pub fn train(
    mut model: Model,
    store: &TextEmbeddingStore,
    train_set: &[TrainSample],
    dev_set: &[EvalSample],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainingError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainingError::EmptyBatch);
    }
    let opt_cfg = &config.optimizer;
    let mut optimizer = Optimizer::new(opt_cfg, model.layout.total, model.layout.gate_range());
    let mut tracker = PhaseTracker::default();
    let mut stopper = EarlyStopping::new(opt_cfg.patience);
    let mut best_params: Option<Vec<f64>> = None;
    let mut epochs = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut sample_counter: u64 = 0;
    let mut step = 0usize;
    let mut grads = model.gradient_buffer();

    for epoch in 1..=opt_cfg.max_epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive_indexed(opt_cfg.seed, seed::SHUFFLE, epoch as u64)));
        let mut batches = Vec::new();
        for chunk in order.chunks(opt_cfg.batch_size) {
            step += 1;
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let noise: Vec<Noise> = (0..batch.len())
                .map(|k| Noise::Seeded(seed::derive_indexed(opt_cfg.seed, seed::NOISE, sample_counter + k as u64)))
                .collect();
            sample_counter += batch.len() as u64;
            let weights = config.weights.with_phase(config.schedule.weights(tracker.phase));
            grads.fill(0.0);
            let breakdown = total_loss(&model, store, &batch, &noise, &weights, config.demo_direction, tracker.phase, Some(&mut grads))
                .map_err(|e| match e {
                    TrainingError::Model(ModelError::NonFinite(what)) => TrainingError::Diverged { epoch, step, detail: what },
                    other => other,
                })?;
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainingError::Diverged { epoch, step, detail: "non-finite gradient".into() });
            }
            optimizer.step(&mut model.params, &mut grads);
            if model.params.iter().any(|p| !p.is_finite()) {
                return Err(TrainingError::Diverged { epoch, step, detail: "non-finite parameters".into() });
            }
            tracker.observe(&config.schedule, breakdown.load_std);
            batches.push(breakdown);
        }
        let mut loss = LossBreakdown::mean(&batches).expect("at least one batch per epoch");
        loss.active_phase = tracker.phase;
        let dev_mae = if dev_set.is_empty() {
            None
        } else {
            Some(evaluation_mae(&model, store, dev_set, config.clip.as_ref()).map_err(|e| match e {
                ModelError::NonFinite(what) => TrainingError::Diverged { epoch, step, detail: what },
                other => other.into(),
            })?)
        };
        epochs.push(EpochRecord {
            epoch,
            loss,
            phase: tracker.phase,
            running_load_std: tracker.running.unwrap_or(0.0),
            dev_mae,
            steps: batches.len(),
        });
        epoch_seconds.push(started.elapsed().as_secs_f64());
        if let Some(mae) = dev_mae {
            let decision = stopper.observe(epoch, mae);
            if decision.improved {
                best_params = Some(model.params.clone());
            }
            if decision.stop {
                stopped_early = epoch < opt_cfg.max_epochs;
                break;
            }
        }
    }
    if let Some(p) = best_params {
        model.params = p;
    }
    let log = TrainingLog {
        tau_ab: config.schedule.tau_ab,
        tau_bc: config.schedule.tau_bc,
        ema_decay: config.schedule.ema_decay,
        epochs,
        best_epoch: stopper.best_epoch(),
        stopped_early,
        final_phase: tracker.phase,
    };
    Ok(TrainOutcome { model, log, epoch_seconds })
}
