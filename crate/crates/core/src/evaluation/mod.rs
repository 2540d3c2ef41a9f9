//! Prediction metrics, per-group bootstrap breakdowns, seen/unseen annotator
//! analysis and trivial baselines.

mod groups;
mod metrics;

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotationRecord, RatingScale};
use crate::seed;

pub use groups::{
    compare_systems, error_density_correlation, group_counts, group_mae_with_bootstrap, GroupReport, SubgroupComparison,
    SubgroupMae, SystemComparison, Verdict, CONFIDENCE, DEFAULT_N_BOOT, MIN_N_BOOT,
};
pub use metrics::{emd_1d, histogram, mae, pearson_r, prediction_correlation, Correlation};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("not a probability vector")]
    NotADistribution,
    #[error("no profile for annotator '{0}'")]
    MissingProfile(String),
    #[error("value '{value}' is not in the vocabulary of '{category}'")]
    UnknownValue { category: String, value: String },
    #[error("n_boot = {n_boot} is below the minimum of {min}")]
    TooFewReplicates { n_boot: usize, min: usize },
    #[error("no reference prediction for ({instance_id}, {annotator_id})")]
    Unpaired { instance_id: String, annotator_id: String },
    #[error("non-finite prediction for ({instance_id}, {annotator_id})")]
    NonFinite { instance_id: String, annotator_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub instance_id: String,
    pub annotator_id: String,
    pub predicted: f64,
    pub actual: f64,
}

impl PredictionRecord {
    pub fn new(instance_id: impl Into<String>, annotator_id: impl Into<String>, predicted: f64, actual: f64) -> Self {
        Self { instance_id: instance_id.into(), annotator_id: annotator_id.into(), predicted, actual }
    }

    pub fn abs_error(&self) -> f64 {
        (self.predicted - self.actual).abs()
    }
}

/// Checks finiteness and clips predictions to the scale when `clip` is set.
pub fn prepare_predictions(
    mut records: Vec<PredictionRecord>,
    scale: &RatingScale,
    clip: bool,
) -> Result<Vec<PredictionRecord>, EvalError> {
    for r in records.iter_mut() {
        if !r.predicted.is_finite() || !r.actual.is_finite() {
            return Err(EvalError::NonFinite { instance_id: r.instance_id.clone(), annotator_id: r.annotator_id.clone() });
        }
        if clip {
            r.predicted = scale.clip(r.predicted);
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDistribution {
    pub instance_id: String,
    pub n: usize,
    pub mean_predicted: f64,
    pub mean_actual: f64,
    /// Shares of ratings per scale point; predictions are rounded to the nearest point.
    pub predicted: Vec<f64>,
    pub actual: Vec<f64>,
    pub emd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionMetrics {
    pub n_annotations: usize,
    pub n_instances: usize,
    pub annotation_mae: f64,
    /// MAE of per-instance mean predictions against per-instance mean ratings.
    pub instance_mae: f64,
    pub instance_pearson: Correlation,
    pub mean_emd: f64,
    pub instances: Vec<InstanceDistribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub overall: Option<DistributionMetrics>,
    pub seen: Option<DistributionMetrics>,
    pub unseen: Option<DistributionMetrics>,
    pub seen_empty: bool,
    pub unseen_empty: bool,
}

pub fn distribution_metrics(records: &[PredictionRecord], scale: &RatingScale) -> Result<DistributionMetrics, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty("predictions"));
    }
    let mut by_instance: BTreeMap<&str, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        by_instance.entry(r.instance_id.as_str()).or_default().push(r);
    }
    let n_points = scale.points().len();
    let mut instances = Vec::with_capacity(by_instance.len());
    for (id, recs) in by_instance {
        let n = recs.len() as f64;
        let preds: Vec<f64> = recs.iter().map(|r| r.predicted).collect();
        let acts: Vec<f64> = recs.iter().map(|r| r.actual).collect();
        let predicted = histogram(&preds, n_points, |v| scale.bin(v));
        let actual = histogram(&acts, n_points, |v| scale.bin(v));
        let emd = emd_1d(&predicted, &actual)?;
        instances.push(InstanceDistribution {
            instance_id: id.to_string(),
            n: recs.len(),
            mean_predicted: preds.iter().sum::<f64>() / n,
            mean_actual: acts.iter().sum::<f64>() / n,
            predicted,
            actual,
            emd,
        });
    }
    let k = instances.len() as f64;
    let means_p: Vec<f64> = instances.iter().map(|i| i.mean_predicted).collect();
    let means_a: Vec<f64> = instances.iter().map(|i| i.mean_actual).collect();
    let instance_pearson = if instances.len() < 2 {
        Correlation { r: 0.0, degenerate: true }
    } else {
        pearson_r(&means_p, &means_a)?
    };
    Ok(DistributionMetrics {
        n_annotations: records.len(),
        n_instances: instances.len(),
        annotation_mae: mae(records)?,
        instance_mae: means_p.iter().zip(&means_a).map(|(p, a)| (p - a).abs()).sum::<f64>() / k,
        instance_pearson,
        mean_emd: instances.iter().map(|i| i.emd).sum::<f64>() / k,
        instances,
    })
}

/// Metrics overall and split by whether the annotator appeared in training.
pub fn seen_unseen_split_eval(
    records: &[PredictionRecord],
    train_annotators: &BTreeSet<String>,
    scale: &RatingScale,
) -> Result<DistributionReport, EvalError> {
    let (seen, unseen): (Vec<PredictionRecord>, Vec<PredictionRecord>) =
        records.iter().cloned().partition(|r| train_annotators.contains(&r.annotator_id));
    let part = |rs: &[PredictionRecord]| if rs.is_empty() { Ok(None) } else { distribution_metrics(rs, scale).map(Some) };
    Ok(DistributionReport {
        overall: part(records)?,
        seen: part(&seen)?,
        unseen: part(&unseen)?,
        seen_empty: seen.is_empty(),
        unseen_empty: unseen.is_empty(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Random,
    Mean,
}

/// Trivial predictions for `targets`: the train-split mean, or uniform draws
/// over the discrete scale points.
pub fn baseline_predict(
    kind: BaselineKind,
    train: &[AnnotationRecord],
    targets: &[AnnotationRecord],
    scale: &RatingScale,
    seed: u64,
) -> Result<Vec<PredictionRecord>, EvalError> {
    match kind {
        BaselineKind::Mean => {
            if train.is_empty() {
                return Err(EvalError::Empty("train split"));
            }
            let mean = train.iter().map(|r| r.rating).sum::<f64>() / train.len() as f64;
            Ok(targets.iter().map(|r| PredictionRecord::new(&r.instance_id, &r.annotator_id, mean, r.rating)).collect())
        }
        BaselineKind::Random => {
            let points = scale.points();
            let mut rng = seed::stream(seed, seed::BASELINE);
            Ok(targets
                .iter()
                .map(|r| PredictionRecord::new(&r.instance_id, &r.annotator_id, points[rng.random_range(0..points.len())], r.rating))
                .collect())
        }
    }
}

/// One row of a system × dataset summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSummary {
    pub system: String,
    pub dataset: String,
    pub n: usize,
    pub mae: f64,
    pub pearson: Correlation,
}

impl SystemSummary {
    pub fn compute(system: &str, dataset: &str, records: &[PredictionRecord]) -> Result<Self, EvalError> {
        let pearson =
            if records.len() < 2 { Correlation { r: 0.0, degenerate: true } } else { prediction_correlation(records)? };
        Ok(Self { system: system.into(), dataset: dataset.into(), n: records.len(), mae: mae(records)?, pearson })
    }

    pub const CSV_HEADER: [&'static str; 6] = ["system", "dataset", "n", "mae", "pearson_r", "r_degenerate"];

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.system.clone(),
            self.dataset.clone(),
            self.n.to_string(),
            format!("{:.6}", self.mae),
            format!("{:.6}", self.pearson.r),
            self.pearson.degenerate.to_string(),
        ]
    }
}
