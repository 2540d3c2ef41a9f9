//! Combining human and synthetic annotations in training: pretrain-then-finetune,
//! unweighted mixing, and per-sample weights built from persona alignment,
//! cluster trustworthiness and cluster prevalence.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{one_hot, AnnotationRecord, CorpusSchema, ProfileMap};
use crate::evaluation::PredictionRecord;
use crate::kmeans::{KMeans, KMeansError};
use crate::model::{Model, TextEmbeddingStore};
use crate::seed;
use crate::synthesis::WeightComponents;
use crate::training::{train, EvalSample, TrainConfig, TrainSample, TrainingError, TrainingLog};

pub const DEFAULT_EPSILON_A: f64 = 1e-3;
pub const DEFAULT_W_MIN: f64 = 0.01;
pub const DEFAULT_W_MAX: f64 = 100.0;
pub const DEFAULT_CLUSTERS: usize = 8;
pub const DEFAULT_TRUST_FLOOR: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum BlendError {
    #[error("persona '{0}' shares no demographic group with human annotations")]
    NoOverlap(String),
    #[error("unknown persona '{0}'")]
    UnknownPersona(String),
    #[error("invalid cluster count {k} for {profiles} annotators")]
    InvalidK { k: usize, profiles: usize },
    #[error("weight component {name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("invalid blend plan: {0}")]
    InvalidPlan(String),
    #[error("pretraining needs synthetic data")]
    EmptySynthetic,
    #[error("no weight for synthetic annotation ({instance_id}, {persona_id})")]
    MissingWeight { instance_id: String, persona_id: String },
    #[error(transparent)]
    KMeans(#[from] KMeansError),
    #[error(transparent)]
    Training(#[from] TrainingError),
}

/// Persona fidelity: mean over its demographic groups of the MAE between its
/// synthetic ratings and the group's mean human rating per instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScore {
    pub fidelity_error: f64,
    pub groups: usize,
    pub alignment: f64,
}

pub fn alignment_from_fidelity(fidelity_error: f64, epsilon: f64) -> f64 {
    1.0 / (fidelity_error + epsilon)
}

/// Per-instance human rating means for every (category, value) group.
#[derive(Debug, Clone, Default)]
pub struct GroupMeans {
    sums: BTreeMap<(String, String, String), (f64, usize)>,
}

impl GroupMeans {
    pub fn new(human: &[AnnotationRecord], profiles: &ProfileMap, schema: &CorpusSchema) -> Self {
        let mut sums: BTreeMap<(String, String, String), (f64, usize)> = BTreeMap::new();
        for r in human.iter().filter(|r| !r.is_synthetic) {
            let Some(p) = profiles.get(&r.annotator_id) else { continue };
            for c in &schema.categories {
                let e = sums.entry((r.instance_id.clone(), c.name.clone(), p.value(&c.name).to_string())).or_default();
                e.0 += r.rating;
                e.1 += 1;
            }
        }
        Self { sums }
    }

    pub fn mean(&self, instance: &str, category: &str, value: &str) -> Option<f64> {
        self.sums
            .get(&(instance.to_string(), category.to_string(), value.to_string()))
            .map(|(s, n)| s / *n as f64)
    }
}

/// Alignment of every persona that has synthetic ratings.
pub fn alignment_scores(
    synthetic: &[AnnotationRecord],
    persona_profiles: &ProfileMap,
    means: &GroupMeans,
    schema: &CorpusSchema,
    epsilon: f64,
) -> Result<BTreeMap<String, AlignmentScore>, BlendError> {
    let mut per_persona: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
    for s in synthetic {
        per_persona.entry(s.annotator_id.as_str()).or_default().push(s);
    }
    let mut out = BTreeMap::new();
    for (persona, records) in per_persona {
        let profile = persona_profiles.get(persona).ok_or_else(|| BlendError::UnknownPersona(persona.to_string()))?;
        let mut group_maes = Vec::new();
        for c in &schema.categories {
            let value = profile.value(&c.name);
            let errors: Vec<f64> = records
                .iter()
                .filter_map(|r| means.mean(&r.instance_id, &c.name, value).map(|m| (r.rating - m).abs()))
                .collect();
            if !errors.is_empty() {
                group_maes.push(errors.iter().sum::<f64>() / errors.len() as f64);
            }
        }
        if group_maes.is_empty() {
            return Err(BlendError::NoOverlap(persona.to_string()));
        }
        let fidelity_error = group_maes.iter().sum::<f64>() / group_maes.len() as f64;
        out.insert(
            persona.to_string(),
            AlignmentScore { fidelity_error, groups: group_maes.len(), alignment: alignment_from_fidelity(fidelity_error, epsilon) },
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaCluster {
    pub id: usize,
    /// Real annotators assigned to the cluster.
    pub members: Vec<String>,
    pub centroid: Vec<f64>,
    pub n_annotations: usize,
    pub prevalence: f64,
    pub trustworthiness: f64,
}

/// Demographic clusters of real annotators; personas are placed by nearest centroid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaClustering {
    pub clusters: Vec<PersonaCluster>,
    feature_mean: Vec<f64>,
    feature_sd: Vec<f64>,
}

impl PersonaClustering {
    fn features(&self, schema: &CorpusSchema, attributes: &indexmap::IndexMap<String, String>) -> Vec<f64> {
        one_hot(schema, attributes)
            .into_iter()
            .zip(self.feature_mean.iter().zip(&self.feature_sd))
            .map(|(x, (m, s))| if *s > 1e-12 { (x - m) / s } else { 0.0 })
            .collect()
    }

    /// Index into `clusters` of the nearest centroid.
    pub fn assign(&self, schema: &CorpusSchema, attributes: &indexmap::IndexMap<String, String>) -> usize {
        let x = self.features(schema, attributes);
        let centroids: Vec<Vec<f64>> = self.clusters.iter().map(|c| c.centroid.clone()).collect();
        crate::kmeans::nearest_centroid(&centroids, &x)
    }

    /// Sets T(c) to the reference model's MAE on each cluster's members,
    /// falling back to the global MAE for clusters without predictions and
    /// never going below `floor`.
    pub fn set_trustworthiness(&mut self, predictions: &[PredictionRecord], floor: f64) {
        let member_of: BTreeMap<&str, usize> =
            self.clusters.iter().enumerate().flat_map(|(i, c)| c.members.iter().map(move |m| (m.as_str(), i))).collect();
        let mut sums = vec![(0.0, 0usize); self.clusters.len()];
        let mut global = (0.0, 0usize);
        for p in predictions {
            global.0 += p.abs_error();
            global.1 += 1;
            if let Some(&c) = member_of.get(p.annotator_id.as_str()) {
                sums[c].0 += p.abs_error();
                sums[c].1 += 1;
            }
        }
        let global_mae = if global.1 > 0 { global.0 / global.1 as f64 } else { 1.0 };
        for (c, (s, n)) in self.clusters.iter_mut().zip(sums) {
            let mae = if n > 0 { s / n as f64 } else { global_mae };
            c.trustworthiness = mae.max(floor);
        }
    }
}

/// k-means on standardized demographic one-hots of annotators with real
/// annotations. Prevalence is each cluster's share of real annotations;
/// trustworthiness starts at 1 until [`PersonaClustering::set_trustworthiness`].
/// Clusters left empty by k-means are dropped.
pub fn cluster_personas(
    human: &[AnnotationRecord],
    profiles: &ProfileMap,
    schema: &CorpusSchema,
    k: usize,
    seed: u64,
) -> Result<PersonaClustering, BlendError> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in human.iter().filter(|r| !r.is_synthetic && profiles.contains_key(&r.annotator_id)) {
        *counts.entry(r.annotator_id.as_str()).or_default() += 1;
    }
    let annotators: Vec<&str> = counts.keys().copied().collect();
    if k == 0 || k > annotators.len() {
        return Err(BlendError::InvalidK { k, profiles: annotators.len() });
    }
    let raw: Vec<Vec<f64>> = annotators.iter().map(|a| one_hot(schema, &profiles[*a].attributes)).collect();
    let width = raw[0].len();
    let n = raw.len() as f64;
    let feature_mean: Vec<f64> = (0..width).map(|j| raw.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let feature_sd: Vec<f64> = (0..width)
        .map(|j| (raw.iter().map(|r| (r[j] - feature_mean[j]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    let mut clustering = PersonaClustering { clusters: Vec::new(), feature_mean, feature_sd };
    let points: Vec<Vec<f64>> = annotators.iter().map(|a| clustering.features(schema, &profiles[*a].attributes)).collect();
    let km = KMeans::fit(&points, k, seed::derive(seed, seed::CLUSTER), 100)?;

    let total: usize = counts.values().sum();
    let mut members = vec![Vec::new(); k];
    for (a, &c) in annotators.iter().zip(&km.assignments) {
        members[c].push(a.to_string());
    }
    for (c, m) in members.into_iter().enumerate() {
        if m.is_empty() {
            continue;
        }
        let n_annotations: usize = m.iter().map(|a| counts[a.as_str()]).sum();
        clustering.clusters.push(PersonaCluster {
            id: clustering.clusters.len(),
            members: m,
            centroid: km.centroids[c].clone(),
            n_annotations,
            prevalence: n_annotations as f64 / total as f64,
            trustworthiness: 1.0,
        });
    }
    Ok(clustering)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for WeightBounds {
    fn default() -> Self {
        Self { min: DEFAULT_W_MIN, max: DEFAULT_W_MAX }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWeight {
    pub alignment: f64,
    pub trustworthiness: f64,
    pub prevalence: f64,
    /// A / (T·P) before clipping.
    pub raw: f64,
    pub weight: f64,
}

impl SyntheticWeight {
    /// Real annotations always carry unit weight.
    pub const REAL: SyntheticWeight =
        SyntheticWeight { alignment: 1.0, trustworthiness: 1.0, prevalence: 1.0, raw: 1.0, weight: 1.0 };
}

pub fn weight(alignment: f64, trustworthiness: f64, prevalence: f64, bounds: WeightBounds) -> Result<SyntheticWeight, BlendError> {
    for (name, value) in [("A", alignment), ("T", trustworthiness), ("P", prevalence)] {
        if !(value > 0.0 && value.is_finite()) {
            return Err(BlendError::NonPositive { name, value });
        }
    }
    let raw = alignment / (trustworthiness * prevalence);
    Ok(SyntheticWeight { alignment, trustworthiness, prevalence, raw, weight: raw.clamp(bounds.min, bounds.max) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub instance_id: String,
    pub persona_id: String,
    pub cluster: usize,
    pub weight: SyntheticWeight,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub bounds: WeightBounds,
    pub rows: Vec<WeightRow>,
}

impl WeightTable {
    pub const CSV_HEADER: [&'static str; 8] =
        ["instance_id", "persona_id", "cluster", "alignment", "trustworthiness", "prevalence", "raw_weight", "weight"];

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.instance_id.clone(),
                    r.persona_id.clone(),
                    r.cluster.to_string(),
                    format!("{}", r.weight.alignment),
                    format!("{}", r.weight.trustworthiness),
                    format!("{}", r.weight.prevalence),
                    format!("{}", r.weight.raw),
                    format!("{}", r.weight.weight),
                ]
            })
            .collect()
    }

    pub fn lookup(&self) -> BTreeMap<(&str, &str), f64> {
        self.rows.iter().map(|r| ((r.instance_id.as_str(), r.persona_id.as_str()), r.weight.weight)).collect()
    }

    pub fn components(&self) -> Vec<WeightComponents> {
        self.rows
            .iter()
            .map(|r| WeightComponents {
                alignment: r.weight.alignment,
                trustworthiness: r.weight.trustworthiness,
                prevalence: r.weight.prevalence,
                raw: r.weight.raw,
                weight: r.weight.weight,
                cluster: r.cluster,
            })
            .collect()
    }

    pub fn summary(&self) -> Option<WeightSummary> {
        WeightSummary::of(self.rows.iter().map(|r| r.weight.weight), self.bounds)
    }
}

/// One row per synthetic annotation, in input order.
pub fn weight_table(
    synthetic: &[AnnotationRecord],
    persona_profiles: &ProfileMap,
    alignment: &BTreeMap<String, AlignmentScore>,
    clustering: &PersonaClustering,
    schema: &CorpusSchema,
    bounds: WeightBounds,
) -> Result<WeightTable, BlendError> {
    let mut rows = Vec::with_capacity(synthetic.len());
    for s in synthetic {
        let profile =
            persona_profiles.get(&s.annotator_id).ok_or_else(|| BlendError::UnknownPersona(s.annotator_id.clone()))?;
        let a = alignment.get(&s.annotator_id).ok_or_else(|| BlendError::NoOverlap(s.annotator_id.clone()))?;
        let c = clustering.assign(schema, &profile.attributes);
        let cluster = &clustering.clusters[c];
        rows.push(WeightRow {
            instance_id: s.instance_id.clone(),
            persona_id: s.annotator_id.clone(),
            cluster: cluster.id,
            weight: weight(a.alignment, cluster.trustworthiness, cluster.prevalence, bounds)?,
        });
    }
    Ok(WeightTable { bounds, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub n: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
    pub clipped_low: usize,
    pub clipped_high: usize,
    pub bounds: WeightBounds,
}

impl WeightSummary {
    pub fn of<I: IntoIterator<Item = f64>>(weights: I, bounds: WeightBounds) -> Option<Self> {
        let mut w: Vec<f64> = weights.into_iter().collect();
        if w.is_empty() {
            return None;
        }
        w.sort_by(f64::total_cmp);
        let n = w.len();
        let median = if n % 2 == 1 { w[n / 2] } else { (w[n / 2 - 1] + w[n / 2]) / 2.0 };
        Some(Self {
            n,
            min: w[0],
            max: w[n - 1],
            mean: w.iter().sum::<f64>() / n as f64,
            median,
            clipped_low: w.iter().filter(|&&x| x <= bounds.min).count(),
            clipped_high: w.iter().filter(|&&x| x >= bounds.max).count(),
            bounds,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendStrategy {
    PtFt,
    Unweighted,
    Weighted,
}

impl BlendStrategy {
    pub fn name(self) -> &'static str {
        match self {
            BlendStrategy::PtFt => "pt_ft",
            BlendStrategy::Unweighted => "unweighted",
            BlendStrategy::Weighted => "weighted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendPlan {
    pub strategy: BlendStrategy,
    /// Required for `weighted` only.
    pub weights: Option<WeightTable>,
    /// Epoch budgets, required for `pt_ft` only.
    pub pretrain_epochs: Option<usize>,
    pub finetune_epochs: Option<usize>,
}

impl BlendPlan {
    pub fn pt_ft(pretrain_epochs: usize, finetune_epochs: usize) -> Self {
        Self { strategy: BlendStrategy::PtFt, weights: None, pretrain_epochs: Some(pretrain_epochs), finetune_epochs: Some(finetune_epochs) }
    }

    pub fn unweighted() -> Self {
        Self { strategy: BlendStrategy::Unweighted, weights: None, pretrain_epochs: None, finetune_epochs: None }
    }

    pub fn weighted(table: WeightTable) -> Self {
        Self { strategy: BlendStrategy::Weighted, weights: Some(table), pretrain_epochs: None, finetune_epochs: None }
    }

    pub fn validate(&self) -> Result<(), BlendError> {
        let budgets = self.pretrain_epochs.is_some() || self.finetune_epochs.is_some();
        match self.strategy {
            BlendStrategy::PtFt if self.pretrain_epochs.is_none() || self.finetune_epochs.is_none() => {
                Err(BlendError::InvalidPlan("pt_ft needs pretrain and finetune epoch budgets".into()))
            }
            BlendStrategy::PtFt if self.weights.is_some() => Err(BlendError::InvalidPlan("pt_ft takes no weight table".into())),
            BlendStrategy::Weighted if self.weights.is_none() => {
                Err(BlendError::InvalidPlan("weighted needs a weight table".into()))
            }
            BlendStrategy::Unweighted if self.weights.is_some() => {
                Err(BlendError::InvalidPlan("unweighted takes no weight table".into()))
            }
            BlendStrategy::Unweighted | BlendStrategy::Weighted if budgets => {
                Err(BlendError::InvalidPlan("epoch budgets apply to pt_ft only".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlendStage {
    pub name: &'static str,
    pub n_samples: usize,
    pub log: TrainingLog,
}

#[derive(Debug, Clone)]
pub struct BlendOutcome {
    pub model: Model,
    pub stages: Vec<BlendStage>,
    pub weight_summary: Option<WeightSummary>,
}

/// Builds the weighted training set: real samples keep weight 1, synthetic
/// samples take their table weight, zero-weight samples are dropped.
pub fn weighted_union(
    real: &[TrainSample],
    synthetic: &[TrainSample],
    synthetic_records: &[AnnotationRecord],
    table: &WeightTable,
) -> Result<Vec<TrainSample>, BlendError> {
    let lookup = table.lookup();
    let mut out: Vec<TrainSample> = real.iter().map(|s| TrainSample { weight: 1.0, ..s.clone() }).collect();
    for (s, r) in synthetic.iter().zip(synthetic_records) {
        let w = *lookup.get(&(r.instance_id.as_str(), r.annotator_id.as_str())).ok_or_else(|| BlendError::MissingWeight {
            instance_id: r.instance_id.clone(),
            persona_id: r.annotator_id.clone(),
        })?;
        if w > 0.0 {
            out.push(TrainSample { weight: w, ..s.clone() });
        }
    }
    Ok(out)
}

/// Trains on real and synthetic samples according to `plan`. `synthetic` and
/// `synthetic_records` are parallel; records supply the weight-table keys.
pub fn blend_train(
    model: Model,
    store: &TextEmbeddingStore,
    real: &[TrainSample],
    synthetic: &[TrainSample],
    synthetic_records: &[AnnotationRecord],
    dev: &[EvalSample],
    plan: &BlendPlan,
    config: &TrainConfig,
) -> Result<BlendOutcome, BlendError> {
    plan.validate()?;
    if synthetic.len() != synthetic_records.len() {
        return Err(BlendError::InvalidPlan("synthetic samples and records differ in length".into()));
    }
    let unit = |set: &[TrainSample]| -> Vec<TrainSample> { set.iter().map(|s| TrainSample { weight: 1.0, ..s.clone() }).collect() };
    match plan.strategy {
        BlendStrategy::PtFt => {
            if synthetic.is_empty() {
                return Err(BlendError::EmptySynthetic);
            }
            let mut model = model;
            let mut stages = Vec::new();
            for (name, set, epochs) in [
                ("pretrain", unit(synthetic), plan.pretrain_epochs.unwrap_or(0)),
                ("finetune", unit(real), plan.finetune_epochs.unwrap_or(0)),
            ] {
                if epochs == 0 {
                    continue;
                }
                let mut cfg = config.clone();
                cfg.optimizer.max_epochs = epochs;
                let out = train(model, store, &set, dev, &cfg)?;
                model = out.model;
                stages.push(BlendStage { name, n_samples: set.len(), log: out.log });
            }
            Ok(BlendOutcome { model, stages, weight_summary: None })
        }
        BlendStrategy::Unweighted => {
            let mut set = unit(real);
            set.extend(unit(synthetic));
            let out = train(model, store, &set, dev, config)?;
            Ok(BlendOutcome {
                model: out.model,
                stages: vec![BlendStage { name: "unweighted", n_samples: set.len(), log: out.log }],
                weight_summary: None,
            })
        }
        BlendStrategy::Weighted => {
            let table = plan.weights.as_ref().expect("validated");
            let set = weighted_union(real, synthetic, synthetic_records, table)?;
            let summary = WeightSummary::of(set[real.len()..].iter().map(|s| s.weight), table.bounds);
            let out = train(model, store, &set, dev, config)?;
            Ok(BlendOutcome {
                model: out.model,
                stages: vec![BlendStage { name: "weighted", n_samples: set.len(), log: out.log }],
                weight_summary: summary,
            })
        }
    }
}

#[cfg(test)]
mod tests;
