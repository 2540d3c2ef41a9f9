use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{pearson_r, Correlation};
use super::{EvalError, PredictionRecord};
use crate::corpus::{CorpusSchema, ProfileMap};
use crate::seed;

pub const DEFAULT_N_BOOT: usize = 1000;
pub const MIN_N_BOOT: usize = 100;
pub const CONFIDENCE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupMae {
    pub category: String,
    pub value: String,
    pub n: usize,
    /// `None` when the subgroup has no annotations (`empty` is set).
    pub mae: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub empty: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Better,
    Worse,
    Equivalent,
}

/// Paired bootstrap comparison of two systems on one subgroup; `mae_diff` is
/// system minus reference, so negative means the system is more accurate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupComparison {
    pub category: String,
    pub value: String,
    pub n: usize,
    pub mae_diff: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemComparison {
    pub reference: String,
    pub subgroups: Vec<SubgroupComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub system: String,
    pub n_boot: usize,
    pub seed: u64,
    pub total: usize,
    pub subgroups: Vec<SubgroupMae>,
    #[serde(default)]
    pub comparisons: Vec<SystemComparison>,
}

impl GroupReport {
    pub fn subgroup(&self, category: &str, value: &str) -> Option<&SubgroupMae> {
        self.subgroups.iter().find(|s| s.category == category && s.value == value)
    }

    pub const CSV_HEADER: [&'static str; 8] = ["system", "category", "subgroup", "n", "mae", "ci_low", "ci_high", "empty"];

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        self.subgroups
            .iter()
            .map(|s| {
                vec![
                    self.system.clone(),
                    s.category.clone(),
                    s.value.clone(),
                    s.n.to_string(),
                    opt(s.mae),
                    opt(s.ci_low),
                    opt(s.ci_high),
                    s.empty.to_string(),
                ]
            })
            .collect()
    }

    pub const PLOT_HEADER: [&'static str; 5] = ["system", "category", "subgroup", "stat", "value"];

    /// Long-format rows (one statistic per row) for external plotting.
    pub fn plot_rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for s in &self.subgroups {
            let mut push = |stat: &str, v: String| {
                rows.push(vec![self.system.clone(), s.category.clone(), s.value.clone(), stat.into(), v]);
            };
            push("n", s.n.to_string());
            for (name, v) in [("mae", s.mae), ("ci_low", s.ci_low), ("ci_high", s.ci_high)] {
                if let Some(v) = v {
                    push(name, format!("{v:.6}"));
                }
            }
        }
        for c in &self.comparisons {
            for s in &c.subgroups {
                let verdict = format!("{:?}", s.verdict).to_lowercase();
                rows.push(vec![self.system.clone(), s.category.clone(), s.value.clone(), format!("vs:{}", c.reference), verdict]);
            }
        }
        rows
    }
}

/// Records in canonical order so resampling does not depend on input order.
fn canonical(records: &[PredictionRecord]) -> Vec<&PredictionRecord> {
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        (a.instance_id.as_str(), a.annotator_id.as_str())
            .cmp(&(b.instance_id.as_str(), b.annotator_id.as_str()))
            .then(a.predicted.total_cmp(&b.predicted))
            .then(a.actual.total_cmp(&b.actual))
    });
    sorted
}

fn subgroup_seed(master: u64, category: &str, value: &str) -> u64 {
    seed::derive(seed::derive(master, seed::BOOTSTRAP), &format!("{category}={value}"))
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Means of `n_boot` resamples (with replacement) of each column of `values`.
/// Every replicate draws one index vector shared by all columns.
fn bootstrap_means(columns: &[&[f64]], n_boot: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = columns[0].len();
    let replicates: Vec<Vec<f64>> = (0..n_boot)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(seed::derive_indexed(seed, "replicate", r as u64));
            let mut sums = vec![0.0; columns.len()];
            for _ in 0..n {
                let i = rng.random_range(0..n);
                for (s, c) in sums.iter_mut().zip(columns) {
                    *s += c[i];
                }
            }
            sums.iter().map(|s| s / n as f64).collect()
        })
        .collect();
    (0..columns.len()).map(|c| replicates.iter().map(|r| r[c]).collect()).collect()
}

fn percentile_interval(mut samples: Vec<f64>) -> (f64, f64) {
    samples.sort_by(f64::total_cmp);
    let tail = (1.0 - CONFIDENCE) / 2.0;
    (quantile(&samples, tail), quantile(&samples, 1.0 - tail))
}

fn members<'a>(
    records: &[&'a PredictionRecord],
    profiles: &ProfileMap,
    schema: &CorpusSchema,
) -> Result<BTreeMap<(usize, usize), Vec<&'a PredictionRecord>>, EvalError> {
    let mut out: BTreeMap<(usize, usize), Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        let profile = profiles.get(&r.annotator_id).ok_or_else(|| EvalError::MissingProfile(r.annotator_id.clone()))?;
        for (ci, cat) in schema.categories.iter().enumerate() {
            let vi = cat
                .value_index(profile.value(&cat.name))
                .ok_or_else(|| EvalError::UnknownValue { category: cat.name.clone(), value: profile.value(&cat.name).into() })?;
            out.entry((ci, vi)).or_default().push(r);
        }
    }
    Ok(out)
}

/// Per-subgroup MAE with 95% percentile bootstrap intervals.
pub fn group_mae_with_bootstrap(
    system: &str,
    predictions: &[PredictionRecord],
    profiles: &ProfileMap,
    schema: &CorpusSchema,
    n_boot: usize,
    seed: u64,
) -> Result<GroupReport, EvalError> {
    if n_boot < MIN_N_BOOT {
        return Err(EvalError::TooFewReplicates { n_boot, min: MIN_N_BOOT });
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty("predictions"));
    }
    let sorted = canonical(predictions);
    let groups = members(&sorted, profiles, schema)?;
    let mut subgroups = Vec::new();
    for (ci, cat) in schema.categories.iter().enumerate() {
        for (vi, value) in cat.vocabulary().into_iter().enumerate() {
            let recs = groups.get(&(ci, vi)).map(Vec::as_slice).unwrap_or(&[]);
            if recs.is_empty() {
                subgroups.push(SubgroupMae { category: cat.name.clone(), value, n: 0, mae: None, ci_low: None, ci_high: None, empty: true });
                continue;
            }
            let errors: Vec<f64> = recs.iter().map(|r| r.abs_error()).collect();
            let mean = errors.iter().sum::<f64>() / errors.len() as f64;
            let boots = bootstrap_means(&[&errors], n_boot, subgroup_seed(seed, &cat.name, &value)).remove(0);
            let (lo, hi) = percentile_interval(boots);
            subgroups.push(SubgroupMae {
                category: cat.name.clone(),
                value,
                n: recs.len(),
                mae: Some(mean),
                ci_low: Some(lo.min(mean)),
                ci_high: Some(hi.max(mean)),
                empty: false,
            });
        }
    }
    Ok(GroupReport { system: system.into(), n_boot, seed, total: predictions.len(), subgroups, comparisons: Vec::new() })
}

/// Paired bootstrap of the per-subgroup MAE difference between `system` and
/// `reference`, matched on (instance, annotator). A difference interval that
/// excludes zero marks the system better or worse at the 5% level.
pub fn compare_systems(
    system: &[PredictionRecord],
    reference: &[PredictionRecord],
    reference_name: &str,
    profiles: &ProfileMap,
    schema: &CorpusSchema,
    n_boot: usize,
    seed: u64,
) -> Result<SystemComparison, EvalError> {
    if n_boot < MIN_N_BOOT {
        return Err(EvalError::TooFewReplicates { n_boot, min: MIN_N_BOOT });
    }
    let by_key: HashMap<(&str, &str), &PredictionRecord> =
        reference.iter().map(|r| ((r.instance_id.as_str(), r.annotator_id.as_str()), r)).collect();
    let sorted = canonical(system);
    let groups = members(&sorted, profiles, schema)?;
    let mut subgroups = Vec::new();
    for ((ci, vi), recs) in groups {
        let cat = &schema.categories[ci];
        let value = cat.vocabulary()[vi].clone();
        let mut a = Vec::with_capacity(recs.len());
        let mut b = Vec::with_capacity(recs.len());
        for r in recs {
            let other = by_key
                .get(&(r.instance_id.as_str(), r.annotator_id.as_str()))
                .ok_or_else(|| EvalError::Unpaired { instance_id: r.instance_id.clone(), annotator_id: r.annotator_id.clone() })?;
            a.push(r.abs_error());
            b.push(other.abs_error());
        }
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let mean = diff.iter().sum::<f64>() / diff.len() as f64;
        let boots = bootstrap_means(&[&diff], n_boot, subgroup_seed(seed, &cat.name, &value)).remove(0);
        let below = boots.iter().filter(|d| **d <= 0.0).count() as f64 / n_boot as f64;
        let above = boots.iter().filter(|d| **d >= 0.0).count() as f64 / n_boot as f64;
        let p_value = (2.0 * below.min(above)).min(1.0);
        let (lo, hi) = percentile_interval(boots);
        let verdict = if hi < 0.0 {
            Verdict::Better
        } else if lo > 0.0 {
            Verdict::Worse
        } else {
            Verdict::Equivalent
        };
        subgroups.push(SubgroupComparison {
            category: cat.name.clone(),
            value,
            n: diff.len(),
            mae_diff: mean,
            ci_low: lo,
            ci_high: hi,
            p_value,
            verdict,
        });
    }
    Ok(SystemComparison { reference: reference_name.into(), subgroups })
}

/// Pearson r between subgroup MAE and subgroup annotation counts, over
/// subgroups present in both.
pub fn error_density_correlation(
    report: &GroupReport,
    counts: &BTreeMap<(String, String), usize>,
) -> Result<Correlation, EvalError> {
    let mut errs = Vec::new();
    let mut ns = Vec::new();
    for s in &report.subgroups {
        if let (Some(m), Some(c)) = (s.mae, counts.get(&(s.category.clone(), s.value.clone()))) {
            errs.push(m);
            ns.push(*c as f64);
        }
    }
    pearson_r(&errs, &ns)
}

/// Annotation counts per (category, value).
pub fn group_counts<'a, I>(
    annotator_ids: I,
    profiles: &ProfileMap,
    schema: &CorpusSchema,
) -> Result<BTreeMap<(String, String), usize>, EvalError>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut out = BTreeMap::new();
    for id in annotator_ids {
        let p = profiles.get(id).ok_or_else(|| EvalError::MissingProfile(id.to_string()))?;
        for c in &schema.categories {
            *out.entry((c.name.clone(), p.value(&c.name).to_string())).or_insert(0) += 1;
        }
    }
    Ok(out)
}
