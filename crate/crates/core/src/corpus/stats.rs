use std::collections::{BTreeMap, BTreeSet};

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{group_ratings, one_hot, AnnotationRecord, Corpus, CorpusError, CorpusSchema, ProfileMap, RatingScale};
use crate::ridge::StandardizedRidge;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMetric {
    #[default]
    Interval,
    Nominal,
}

/// Krippendorff's α over instances (units) with at least two ratings.
///
/// Uses the pairable-value form of the coincidence-matrix definition:
/// `α = 1 − (n − 1) · Σ_u Σ_{i≠j} δ(v_ui, v_uj) / (m_u − 1) / Σ_{i≠j} δ(v_i, v_j)`
/// where the last sum runs over all pairable values. When every pairable value is
/// identical both disagreements vanish and α is reported as 1.
pub fn krippendorff_alpha(records: &[AnnotationRecord], metric: AlphaMetric) -> Result<f64, CorpusError> {
    let units: Vec<Vec<f64>> = group_ratings(records).into_values().filter(|v| v.len() >= 2).collect();
    if units.len() < 2 {
        return Err(CorpusError::InsufficientPairs);
    }
    let all: Vec<f64> = units.iter().flatten().copied().collect();
    let n = all.len() as f64;
    let observed: f64 = units.iter().map(|u| pairwise_disagreement(u, metric) / (u.len() as f64 - 1.0)).sum();
    let expected = pairwise_disagreement(&all, metric);
    if expected <= 0.0 {
        return Ok(if observed <= 0.0 { 1.0 } else { f64::NEG_INFINITY });
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}

/// Σ over ordered pairs i ≠ j of δ(v_i, v_j).
fn pairwise_disagreement(values: &[f64], metric: AlphaMetric) -> f64 {
    let m = values.len() as f64;
    match metric {
        AlphaMetric::Interval => {
            let mean = values.iter().sum::<f64>() / m;
            let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
            // Σ_{i≠j} (v_i − v_j)² = 2 m Σ (v_i − v̄)²
            2.0 * m * ss
        }
        AlphaMetric::Nominal => {
            let mut counts: BTreeMap<u64, f64> = BTreeMap::new();
            for v in values {
                *counts.entry(v.to_bits()).or_default() += 1.0;
            }
            m * m - counts.values().map(|c| c * c).sum::<f64>()
        }
    }
}

/// Mean over instances of the entropy of the per-instance rating histogram.
/// Ratings are binned to the nearest integer scale point; `base` is the log base.
pub fn mean_entropy(records: &[AnnotationRecord], scale: &RatingScale, base: f64) -> Result<f64, CorpusError> {
    let grouped = group_ratings(records);
    if grouped.is_empty() {
        return Err(CorpusError::Empty);
    }
    let bins = scale.points().len();
    let log_base = base.ln();
    let total: f64 = grouped
        .values()
        .map(|ratings| {
            let mut counts = vec![0.0; bins];
            for r in ratings {
                counts[scale.bin(*r)] += 1.0;
            }
            let n = ratings.len() as f64;
            -counts.iter().filter(|c| **c > 0.0).map(|c| (c / n) * (c / n).ln()).sum::<f64>() / log_base
        })
        .sum();
    Ok(total / grouped.len() as f64)
}

/// Mean over instances with ≥2 ratings of the sample standard deviation.
pub fn mean_instance_sd(records: &[AnnotationRecord]) -> Option<f64> {
    let sds: Vec<f64> = group_ratings(records)
        .into_values()
        .filter(|v| v.len() >= 2)
        .map(|v| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect();
    (!sds.is_empty()).then(|| sds.iter().sum::<f64>() / sds.len() as f64)
}

/// Per-category demographic signal: the L2 norm of that category's coefficient
/// block in a ridge regression from standardized one-hot demographics to ratings.
pub fn demographic_signal(
    records: &[AnnotationRecord],
    profiles: &ProfileMap,
    schema: &CorpusSchema,
    ridge_penalty: f64,
) -> Result<IndexMap<String, f64>, CorpusError> {
    if records.is_empty() {
        return Err(CorpusError::Empty);
    }
    let width = schema.one_hot_width();
    let mut design = Vec::with_capacity(records.len() * width);
    for r in records {
        let profile = profiles.get(&r.annotator_id).ok_or_else(|| CorpusError::MissingProfile(r.annotator_id.clone()))?;
        design.extend(one_hot(schema, &profile.attributes));
    }
    let x = DMatrix::from_row_slice(records.len(), width, &design);
    let y = DVector::from_iterator(records.len(), records.iter().map(|r| r.rating));
    let fit = StandardizedRidge::fit(&x, &y, ridge_penalty)?;

    let mut out = IndexMap::new();
    let mut offset = 0;
    for c in &schema.categories {
        let w = c.vocabulary().len();
        let norm = fit.coefficients.rows(offset, w).norm();
        out.insert(c.name.clone(), norm);
        offset += w;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatisticsOptions {
    pub alpha_metric: AlphaMetric,
    pub entropy_base: f64,
    pub ridge_penalty: f64,
}

impl Default for StatisticsOptions {
    fn default() -> Self {
        Self { alpha_metric: AlphaMetric::Interval, entropy_base: std::f64::consts::E, ridge_penalty: 1.0 }
    }
}

/// Dataset-level summary with one field per statistics-table column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStatistics {
    pub dataset: String,
    pub n_instances: usize,
    pub n_annotators: usize,
    pub n_annotations: usize,
    pub n_combinations: usize,
    pub avg_annotators_per_instance: f64,
    /// `None` when fewer than two instances carry two or more ratings.
    pub krippendorff_alpha: Option<f64>,
    pub mean_entropy: f64,
    pub mean_instance_sd: Option<f64>,
    pub demographic_signal: IndexMap<String, f64>,
}

impl CorpusStatistics {
    pub fn compute(corpus: &Corpus, options: &StatisticsOptions) -> Result<Self, CorpusError> {
        let records = &corpus.records;
        if records.is_empty() {
            return Err(CorpusError::Empty);
        }
        let n_instances = corpus.instance_ids().len();
        let annotators = corpus.annotator_ids();
        let combos: BTreeSet<Vec<String>> = annotators
            .iter()
            .filter_map(|a| corpus.profiles.get(*a))
            .map(|p| p.combination(&corpus.schema))
            .collect();
        let krippendorff_alpha = match krippendorff_alpha(records, options.alpha_metric) {
            Ok(a) => Some(a),
            Err(CorpusError::InsufficientPairs) => None,
            Err(e) => return Err(e),
        };
        let demographic_signal = demographic_signal(records, &corpus.profiles, &corpus.schema, options.ridge_penalty)?;
        Ok(Self {
            dataset: corpus.schema.name.clone(),
            n_instances,
            n_annotators: annotators.len(),
            n_annotations: records.len(),
            n_combinations: combos.len(),
            avg_annotators_per_instance: records.len() as f64 / n_instances as f64,
            krippendorff_alpha,
            mean_entropy: mean_entropy(records, &corpus.schema.rating_scale, options.entropy_base)?,
            mean_instance_sd: mean_instance_sd(records),
            demographic_signal,
        })
    }

    pub const CSV_HEADER: [&'static str; 9] =
        ["dataset", "n_inst", "n_ann", "n_anns", "n_combos", "avg_per_inst", "iaa_alpha", "mean_entropy", "mean_sd"];

    pub fn csv_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        vec![
            self.dataset.clone(),
            self.n_instances.to_string(),
            self.n_annotators.to_string(),
            self.n_annotations.to_string(),
            self.n_combinations.to_string(),
            format!("{:.6}", self.avg_annotators_per_instance),
            opt(self.krippendorff_alpha),
            format!("{:.6}", self.mean_entropy),
            opt(self.mean_instance_sd),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AnnotatorProfile;
    use proptest::prelude::*;

    fn rec(i: &str, a: &str, r: f64) -> AnnotationRecord {
        AnnotationRecord::new(i, a, r)
    }

    /// Builds the value-by-value coincidence matrix explicitly and evaluates α from it.
    fn alpha_from_coincidence_matrix(units: &[Vec<f64>], delta2: impl Fn(f64, f64) -> f64) -> f64 {
        let mut values: Vec<f64> = units.iter().flatten().copied().collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        values.dedup();
        let idx = |v: f64| values.iter().position(|x| *x == v).unwrap();
        let k = values.len();
        let mut o = vec![vec![0.0; k]; k];
        for u in units.iter().filter(|u| u.len() >= 2) {
            let m = u.len() as f64;
            for (i, a) in u.iter().enumerate() {
                for (j, b) in u.iter().enumerate() {
                    if i != j {
                        o[idx(*a)][idx(*b)] += 1.0 / (m - 1.0);
                    }
                }
            }
        }
        let n_c: Vec<f64> = o.iter().map(|row| row.iter().sum()).collect();
        let n: f64 = n_c.iter().sum();
        let mut d_o = 0.0;
        let mut d_e = 0.0;
        for c in 0..k {
            for kk in 0..k {
                let d = delta2(values[c], values[kk]);
                d_o += o[c][kk] * d;
                d_e += n_c[c] * n_c[kk] * d;
            }
        }
        1.0 - (d_o / n) / (d_e / (n * (n - 1.0)))
    }

    fn four_instance_fixture() -> (Vec<AnnotationRecord>, Vec<Vec<f64>>) {
        let units = vec![vec![1.0, 2.0, 2.0], vec![3.0, 3.0], vec![4.0, 5.0, 4.0, 3.0], vec![1.0, 1.0]];
        let mut recs = Vec::new();
        for (i, u) in units.iter().enumerate() {
            for (a, r) in u.iter().enumerate() {
                recs.push(rec(&format!("i{i}"), &format!("a{a}"), *r));
            }
        }
        (recs, units)
    }

    #[test]
    fn alpha_perfect_agreement_is_one() {
        let recs = vec![rec("i1", "a", 2.0), rec("i1", "b", 2.0), rec("i2", "a", 4.0), rec("i2", "b", 4.0)];
        assert_eq!(krippendorff_alpha(&recs, AlphaMetric::Interval).unwrap(), 1.0);
        assert_eq!(krippendorff_alpha(&recs, AlphaMetric::Nominal).unwrap(), 1.0);
    }

    #[test]
    fn alpha_matches_coincidence_matrix() {
        let (recs, units) = four_instance_fixture();
        let interval = alpha_from_coincidence_matrix(&units, |a, b| (a - b) * (a - b));
        let nominal = alpha_from_coincidence_matrix(&units, |a, b| if a == b { 0.0 } else { 1.0 });
        assert!((krippendorff_alpha(&recs, AlphaMetric::Interval).unwrap() - interval).abs() < 1e-9);
        assert!((krippendorff_alpha(&recs, AlphaMetric::Nominal).unwrap() - nominal).abs() < 1e-9);
    }

    #[test]
    fn alpha_needs_two_pairable_units() {
        let recs = vec![rec("i1", "a", 2.0), rec("i1", "b", 3.0), rec("i2", "a", 4.0)];
        assert!(matches!(krippendorff_alpha(&recs, AlphaMetric::Interval), Err(CorpusError::InsufficientPairs)));
    }

    #[test]
    fn entropy_cases() {
        let scale = RatingScale::new(1.0, 5.0, true);
        let e = std::f64::consts::E;
        let same = vec![rec("i", "a", 3.0), rec("i", "b", 3.0)];
        assert_eq!(mean_entropy(&same, &scale, e).unwrap(), 0.0);
        let halves = vec![rec("i", "a", 1.0), rec("i", "b", 1.0), rec("i", "c", 2.0), rec("i", "d", 2.0)];
        assert!((mean_entropy(&halves, &scale, e).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((mean_entropy(&halves, &scale, 2.0).unwrap() - 1.0).abs() < 1e-12);
        let uniform: Vec<_> = (1..=5).map(|v| rec("i", &format!("a{v}"), v as f64)).collect();
        assert!((mean_entropy(&uniform, &scale, e).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!(matches!(mean_entropy(&[], &scale, e), Err(CorpusError::Empty)));
    }

    fn signal_fixture(shift: f64) -> (Vec<AnnotationRecord>, ProfileMap, CorpusSchema) {
        let schema = CorpusSchema::from_toml_str(
            r#"
[rating_scale]
min = -100
max = 100
discrete = false
[[categories]]
name = "group"
values = ["x", "y"]
[[categories]]
name = "noise"
values = ["p", "q"]
"#,
        )
        .unwrap();
        let mut profiles = ProfileMap::new();
        let mut recs = Vec::new();
        for a in 0..40 {
            let g = if a % 2 == 0 { "x" } else { "y" };
            let n = if (a / 2) % 2 == 0 { "p" } else { "q" };
            let id = format!("a{a}");
            profiles.insert(id.clone(), AnnotatorProfile::new(id.clone(), [("group", g), ("noise", n)]));
            for i in 0..5 {
                // small deterministic jitter uncorrelated with either category
                let jitter = (((a * 31 + i * 17) % 11) as f64 - 5.0) * 0.05;
                let base = 3.0 + jitter + if g == "x" { shift } else { 0.0 };
                recs.push(rec(&format!("i{i}"), &id, base));
            }
        }
        (recs, profiles, schema)
    }

    #[test]
    fn signal_zero_for_constant_ratings() {
        let (mut recs, profiles, schema) = signal_fixture(0.0);
        for r in &mut recs {
            r.rating = 2.0;
        }
        let sig = demographic_signal(&recs, &profiles, &schema, 1.0).unwrap();
        assert!(sig.values().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn shifted_category_has_largest_signal() {
        let (recs, profiles, schema) = signal_fixture(2.0);
        let sig = demographic_signal(&recs, &profiles, &schema, 1.0).unwrap();
        assert!(sig["group"] > sig["noise"]);
        assert!(sig["group"] > 0.5);
    }

    #[test]
    fn signal_scales_with_ratings_and_ignores_order() {
        let (recs, profiles, schema) = signal_fixture(2.0);
        let base = demographic_signal(&recs, &profiles, &schema, 1.0).unwrap();
        let scaled: Vec<_> = recs.iter().map(|r| rec(&r.instance_id, &r.annotator_id, -3.0 * r.rating)).collect();
        let s2 = demographic_signal(&scaled, &profiles, &schema, 1.0).unwrap();
        let mut rev = recs.clone();
        rev.reverse();
        let s3 = demographic_signal(&rev, &profiles, &schema, 1.0).unwrap();
        for k in base.keys() {
            assert!((s2[k] - 3.0 * base[k]).abs() < 1e-9);
            assert!((s3[k] - base[k]).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn alpha_invariant_to_relabeling_and_order(
            ratings in proptest::collection::vec(1u8..=5, 12),
            rot in 0usize..12,
        ) {
            let recs: Vec<_> = ratings.iter().enumerate()
                .map(|(k, r)| rec(&format!("i{}", k / 3), &format!("a{}", k % 3), *r as f64)).collect();
            let base = krippendorff_alpha(&recs, AlphaMetric::Interval);
            prop_assume!(base.as_ref().map(|a| a.is_finite()).unwrap_or(false));
            let mut shuffled: Vec<_> = recs.iter()
                .map(|r| rec(&r.instance_id, &format!("renamed-{}", r.annotator_id), r.rating)).collect();
            shuffled.rotate_left(rot);
            let other = krippendorff_alpha(&shuffled, AlphaMetric::Interval).unwrap();
            prop_assert!((base.unwrap() - other).abs() < 1e-12);
        }
    }
}
