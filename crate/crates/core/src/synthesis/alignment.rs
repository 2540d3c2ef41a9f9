use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SynthesisError;
use crate::corpus::{AnnotationRecord, CorpusSchema, ProfileMap};
use crate::evaluation::pearson_r;

/// What a synthetic rating is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    /// Mean human rating of the matching group on the same instance.
    #[default]
    GroupMean,
    /// Every individual human rating from the matching group on the same instance.
    Individual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub system: String,
    /// `overall` compares full demographic combinations.
    pub category: String,
    pub value: String,
    pub n: usize,
    pub mae: f64,
    /// `None` below two pairs.
    pub pearson: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub mode: AlignmentMode,
    pub overall: AlignmentRow,
    pub groups: Vec<AlignmentRow>,
}

impl AlignmentReport {
    pub const CSV_HEADER: [&'static str; 6] = ["system", "category", "value", "n", "mae", "pearson_r"];

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        std::iter::once(&self.overall)
            .chain(&self.groups)
            .map(|r| {
                vec![
                    r.system.clone(),
                    r.category.clone(),
                    r.value.clone(),
                    r.n.to_string(),
                    format!("{:.6}", r.mae),
                    r.pearson.map(|p| format!("{p:.6}")).unwrap_or_default(),
                ]
            })
            .collect()
    }
}

const OVERALL: &str = "overall";

/// MAE and Pearson r of synthetic ratings against human ratings of the persona's
/// demographic group: the full combination for the overall row, one category
/// value for each group row.
pub fn alignment_report(
    system: &str,
    synthetic: &[AnnotationRecord],
    persona_profiles: &ProfileMap,
    human: &[AnnotationRecord],
    human_profiles: &ProfileMap,
    schema: &CorpusSchema,
    mode: AlignmentMode,
) -> Result<AlignmentReport, SynthesisError> {
    // (instance, category, value) -> human ratings; category OVERALL keys the joined combination
    let mut humans: BTreeMap<(&str, String, String), Vec<f64>> = BTreeMap::new();
    for r in human.iter().filter(|r| !r.is_synthetic) {
        let Some(p) = human_profiles.get(&r.annotator_id) else { continue };
        for (cat, val) in group_keys(p, schema) {
            humans.entry((r.instance_id.as_str(), cat, val)).or_default().push(r.rating);
        }
    }

    let mut pairs: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in synthetic {
        let Some(p) = persona_profiles.get(&s.annotator_id) else {
            return Err(SynthesisError::UnknownPersona(s.annotator_id.clone()));
        };
        for (cat, val) in group_keys(p, schema) {
            let Some(ratings) = humans.get(&(s.instance_id.as_str(), cat.clone(), val.clone())) else { continue };
            let key = if cat == OVERALL { (cat, OVERALL.to_string()) } else { (cat, val) };
            let entry = pairs.entry(key).or_default();
            match mode {
                AlignmentMode::GroupMean => {
                    entry.0.push(s.rating);
                    entry.1.push(ratings.iter().sum::<f64>() / ratings.len() as f64);
                }
                AlignmentMode::Individual => {
                    for &h in ratings {
                        entry.0.push(s.rating);
                        entry.1.push(h);
                    }
                }
            }
        }
    }

    let row = |cat: &str, val: &str, (xs, ys): &(Vec<f64>, Vec<f64>)| AlignmentRow {
        system: system.to_string(),
        category: cat.to_string(),
        value: val.to_string(),
        n: xs.len(),
        mae: xs.iter().zip(ys).map(|(x, y)| (x - y).abs()).sum::<f64>() / xs.len() as f64,
        pearson: pearson_r(xs, ys).ok().map(|c| c.r),
    };
    let overall_key = (OVERALL.to_string(), OVERALL.to_string());
    let overall = pairs.get(&overall_key).map(|p| row(OVERALL, OVERALL, p)).ok_or(SynthesisError::EmptyOverlap)?;
    let mut groups = Vec::new();
    for cat in &schema.categories {
        for val in cat.vocabulary() {
            if let Some(p) = pairs.get(&(cat.name.clone(), val.clone())) {
                groups.push(row(&cat.name, &val, p));
            }
        }
    }
    Ok(AlignmentReport { mode, overall, groups })
}

fn group_keys(p: &crate::corpus::AnnotatorProfile, schema: &CorpusSchema) -> Vec<(String, String)> {
    let combo = p.combination(schema);
    let mut keys = vec![(OVERALL.to_string(), combo.join("\u{1f}"))];
    keys.extend(schema.categories.iter().zip(combo).map(|(c, v)| (c.name.clone(), v)));
    keys
}
