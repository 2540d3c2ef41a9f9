//! Post-hoc analysis of which experts serve which demographic subgroups.

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{one_hot, one_hot_labels, AnnotationRecord, CorpusSchema, ProfileMap};
use crate::model::{Model, ModelError, Noise, TextEmbeddingStore};
use crate::ridge::{RidgeError, StandardizedRidge};
use crate::training::symmetric_kl;

#[derive(Debug, Error)]
pub enum SpecializationError {
    #[error("no routing traces")]
    Empty,
    #[error("no profile for annotator '{0}'")]
    MissingProfile(String),
    #[error("usage vectors have inconsistent lengths")]
    Ragged,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ridge(#[from] RidgeError),
}

/// Evaluation-mode routing of one annotation: the selected experts' shares,
/// renormalized to sum to 1, zero elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub instance_id: String,
    pub annotator_id: String,
    pub usage: Vec<f64>,
}

pub fn routing_traces(
    model: &Model,
    store: &TextEmbeddingStore,
    records: &[AnnotationRecord],
    profiles: &ProfileMap,
) -> Result<Vec<RoutingTrace>, SpecializationError> {
    records
        .iter()
        .map(|r| {
            let profile = profiles.get(&r.annotator_id).ok_or_else(|| SpecializationError::MissingProfile(r.annotator_id.clone()))?;
            let sample = model.embed_sample(store, &r.instance_id, &r.annotator_id, profile, Noise::Mean)?;
            let decision = model.route(&sample.input)?;
            let mut usage = decision.selected_mass();
            let total: f64 = usage.iter().sum();
            usage.iter_mut().for_each(|u| *u /= total);
            Ok(RoutingTrace { instance_id: r.instance_id.clone(), annotator_id: r.annotator_id.clone(), usage })
        })
        .collect()
}

/// Mean expert usage per subgroup of one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupUsage {
    pub category: String,
    pub distributions: IndexMap<String, Vec<f64>>,
    pub counts: IndexMap<String, usize>,
}

/// One [`GroupUsage`] per category, subgroups in vocabulary order; subgroups
/// without traces are omitted.
pub fn group_usage(
    traces: &[RoutingTrace],
    profiles: &ProfileMap,
    schema: &CorpusSchema,
) -> Result<Vec<GroupUsage>, SpecializationError> {
    let e = traces.first().ok_or(SpecializationError::Empty)?.usage.len();
    let mut out = Vec::new();
    for cat in &schema.categories {
        let mut sums: IndexMap<String, Vec<f64>> = cat.vocabulary().into_iter().map(|v| (v, vec![0.0; e])).collect();
        let mut counts: IndexMap<String, usize> = sums.keys().map(|k| (k.clone(), 0)).collect();
        for t in traces {
            if t.usage.len() != e {
                return Err(SpecializationError::Ragged);
            }
            let p = profiles.get(&t.annotator_id).ok_or_else(|| SpecializationError::MissingProfile(t.annotator_id.clone()))?;
            let value = p.value(&cat.name);
            if let Some(acc) = sums.get_mut(value) {
                acc.iter_mut().zip(&t.usage).for_each(|(a, u)| *a += u);
                counts[value] += 1;
            }
        }
        let distributions = sums
            .into_iter()
            .filter(|(v, _)| counts[v] > 0)
            .map(|(v, s)| {
                let total: f64 = s.iter().sum();
                (v, s.iter().map(|x| x / total).collect())
            })
            .collect();
        counts.retain(|_, c| *c > 0);
        out.push(GroupUsage { category: cat.name.clone(), distributions, counts });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecializationScore {
    pub category: String,
    /// Mean symmetric KL over unordered subgroup pairs.
    pub raw: f64,
    /// `raw / ln K`; 0 when there is a single expert.
    pub normalized: f64,
    pub n_pairs: usize,
}

pub fn within_group_score(usage: &GroupUsage) -> SpecializationScore {
    let dists: Vec<&Vec<f64>> = usage.distributions.values().collect();
    let mut total = 0.0;
    let mut n_pairs = 0;
    for i in 0..dists.len() {
        for j in (i + 1)..dists.len() {
            total += symmetric_kl(dists[i], dists[j]);
            n_pairs += 1;
        }
    }
    let raw = if n_pairs == 0 { 0.0 } else { total / n_pairs as f64 };
    let k = dists.first().map_or(0, |d| d.len());
    let normalized = if k > 1 { raw / (k as f64).ln() } else { 0.0 };
    SpecializationScore { category: usage.category.clone(), raw, normalized, n_pairs }
}

pub const SCORE_HEADER: [&str; 4] = ["category", "raw_kl", "normalized", "n_pairs"];

pub fn score_rows(scores: &[SpecializationScore]) -> Vec<Vec<String>> {
    scores
        .iter()
        .map(|s| vec![s.category.clone(), format!("{:.6}", s.raw), format!("{:.6}", s.normalized), s.n_pairs.to_string()])
        .collect()
}

/// Per-subgroup usage rows, each renormalized to sum to 1.
pub fn usage_heatmap_rows(usage: &GroupUsage) -> Vec<(String, Vec<f64>)> {
    usage
        .distributions
        .iter()
        .map(|(v, d)| {
            let total: f64 = d.iter().sum();
            let row = if total > 0.0 { d.iter().map(|x| x / total).collect() } else { d.clone() };
            (v.clone(), row)
        })
        .collect()
}

/// Long-format table: category, subgroup, expert, share.
pub fn usage_heatmap_export(usage: &GroupUsage) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (value, row) in usage_heatmap_rows(usage) {
        for (j, share) in row.iter().enumerate() {
            rows.push(vec![usage.category.clone(), value.clone(), format!("expert_{j}"), format!("{share:.6}")]);
        }
    }
    rows
}

pub const HEATMAP_HEADER: [&str; 4] = ["category", "subgroup", "expert", "share"];

/// Ridge coefficients of expert usage on demographic one-hot features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossGroupMap {
    pub features: Vec<String>,
    pub experts: Vec<String>,
    /// `coefficients[feature][expert]`.
    pub coefficients: Vec<Vec<f64>>,
    /// Heatmap orderings from average-linkage clustering on correlation distance.
    pub row_order: Vec<usize>,
    pub column_order: Vec<usize>,
}

impl CrossGroupMap {
    pub const HEADER: [&'static str; 5] = ["feature", "expert", "coefficient", "row_rank", "column_rank"];

    /// Long-format rows with each cell's position in the clustered ordering.
    pub fn rows(&self) -> Vec<Vec<String>> {
        let rank = |order: &[usize], i: usize| order.iter().position(|&x| x == i).unwrap_or(i);
        let mut out = Vec::new();
        for (fi, f) in self.features.iter().enumerate() {
            for (ej, e) in self.experts.iter().enumerate() {
                out.push(vec![
                    f.clone(),
                    e.clone(),
                    format!("{:.6}", self.coefficients[fi][ej]),
                    rank(&self.row_order, fi).to_string(),
                    rank(&self.column_order, ej).to_string(),
                ]);
            }
        }
        out
    }
}

pub fn cross_group_map(
    traces: &[RoutingTrace],
    profiles: &ProfileMap,
    schema: &CorpusSchema,
    ridge_penalty: f64,
) -> Result<CrossGroupMap, SpecializationError> {
    let e = traces.first().ok_or(SpecializationError::Empty)?.usage.len();
    let width = schema.one_hot_width();
    let mut design = Vec::with_capacity(traces.len() * width);
    for t in traces {
        if t.usage.len() != e {
            return Err(SpecializationError::Ragged);
        }
        let p = profiles.get(&t.annotator_id).ok_or_else(|| SpecializationError::MissingProfile(t.annotator_id.clone()))?;
        design.extend(one_hot(schema, &p.attributes));
    }
    let x = DMatrix::from_row_slice(traces.len(), width, &design);
    let mut coefficients = vec![vec![0.0; e]; width];
    for j in 0..e {
        let y = DVector::from_iterator(traces.len(), traces.iter().map(|t| t.usage[j]));
        let fit = StandardizedRidge::fit(&x, &y, ridge_penalty)?;
        for (f, row) in coefficients.iter_mut().enumerate() {
            row[j] = fit.coefficients[f];
        }
    }
    let columns: Vec<Vec<f64>> = (0..e).map(|j| coefficients.iter().map(|r| r[j]).collect()).collect();
    Ok(CrossGroupMap {
        features: one_hot_labels(schema),
        experts: (0..e).map(|j| format!("expert_{j}")).collect(),
        row_order: cluster_order(&coefficients),
        column_order: cluster_order(&columns),
        coefficients,
    })
}

/// `1 − r`, with constant vectors treated as uncorrelated.
fn correlation_distance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 1.0;
    }
    1.0 - (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Leaf order of an average-linkage dendrogram.
pub fn cluster_order(vectors: &[Vec<f64>]) -> Vec<usize> {
    let n = vectors.len();
    if n < 2 {
        return (0..n).collect();
    }
    let mut condensed = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            condensed.push(correlation_distance(&vectors[i], &vectors[j]));
        }
    }
    let dendrogram = kodama::linkage(&mut condensed, n, kodama::Method::Average);
    // cluster ids ≥ n refer to earlier merge steps
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for step in dendrogram.steps() {
        let mut merged = members[step.cluster1].clone();
        merged.extend(members[step.cluster2].iter().copied());
        members.push(merged);
    }
    members.pop().unwrap_or_default()
}
