//! Annotation data model: records, annotator profiles, ingestion, instance-level
//! splits, rating normalization and corpus statistics.

mod ingest;
mod schema;
mod split;
mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use ingest::{ingest, parse_annotations, parse_profiles, write_annotations};
pub use schema::{CorpusSchema, DemographicCategory, RatingScale, TextSource, UNDISCLOSED};
pub use split::{split, Split, SplitAssignment};
pub use stats::{
    demographic_signal, krippendorff_alpha, mean_entropy, mean_instance_sd, AlphaMetric, CorpusStatistics,
    StatisticsOptions,
};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: rating {rating} outside scale [{min}, {max}]")]
    RatingOutOfScale { line: usize, rating: f64, min: f64, max: f64 },
    #[error("line {line}: rating {rating} is not an integer on a discrete scale")]
    NonIntegralRating { line: usize, rating: f64 },
    #[error("line {line}: unknown value '{value}' for category '{category}'")]
    UnknownDemographicValue { line: usize, category: String, value: String },
    #[error("line {line}: duplicate annotation for instance '{instance_id}' by annotator '{annotator_id}'")]
    DuplicateAnnotation { line: usize, instance_id: String, annotator_id: String },
    #[error("line {line}: conflicting profile for annotator '{annotator_id}'")]
    ConflictingProfile { line: usize, annotator_id: String },
    #[error("annotator '{0}' has annotations but no profile")]
    MissingProfile(String),
    #[error("split fractions must be three positive reals summing to 1, got {0:?}")]
    InvalidFractions([f64; 3]),
    #[error("corpus is empty")]
    Empty,
    #[error("need at least two instances with two or more ratings to compute agreement")]
    InsufficientPairs,
    #[error("ratings have zero variance; cannot normalize")]
    DegenerateRatings,
    #[error(transparent)]
    Ridge(#[from] crate::ridge::RidgeError),
}

/// One (instance, annotator, rating) judgment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub instance_id: String,
    pub annotator_id: String,
    pub rating: f64,
    #[serde(default)]
    pub is_synthetic: bool,
}

impl AnnotationRecord {
    pub fn new(instance_id: impl Into<String>, annotator_id: impl Into<String>, rating: f64) -> Self {
        Self { instance_id: instance_id.into(), annotator_id: annotator_id.into(), rating, is_synthetic: false }
    }
}

/// An annotator's demographic attributes, keyed by category in schema order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorProfile {
    pub annotator_id: String,
    pub attributes: IndexMap<String, String>,
}

impl AnnotatorProfile {
    pub fn new<K: Into<String>, V: Into<String>>(
        annotator_id: impl Into<String>,
        attributes: impl IntoIterator<Item = (K, V)>,
    ) -> Self {
        Self {
            annotator_id: annotator_id.into(),
            attributes: attributes.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
        }
    }

    pub fn value(&self, category: &str) -> &str {
        self.attributes.get(category).map(String::as_str).unwrap_or(UNDISCLOSED)
    }

    /// Attribute values in schema order; identifies the demographic combination.
    pub fn combination(&self, schema: &CorpusSchema) -> Vec<String> {
        schema.categories.iter().map(|c| self.value(&c.name).to_string()).collect()
    }
}

/// One-hot row for a profile over every category's vocabulary, schema order.
pub fn one_hot(schema: &CorpusSchema, attributes: &IndexMap<String, String>) -> Vec<f64> {
    let mut row = Vec::with_capacity(schema.one_hot_width());
    for c in &schema.categories {
        let vocab = c.vocabulary();
        let value = attributes.get(&c.name).map(String::as_str).unwrap_or(UNDISCLOSED);
        row.extend(vocab.iter().map(|v| if v == value { 1.0 } else { 0.0 }));
    }
    row
}

/// Column labels matching [`one_hot`], formatted `category=value`.
pub fn one_hot_labels(schema: &CorpusSchema) -> Vec<String> {
    schema
        .categories
        .iter()
        .flat_map(|c| c.vocabulary().into_iter().map(move |v| format!("{}={}", c.name, v)))
        .collect()
}

pub type ProfileMap = IndexMap<String, AnnotatorProfile>;

/// Ingested annotations, profiles and any inline instance text.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub schema: CorpusSchema,
    pub records: Vec<AnnotationRecord>,
    pub profiles: ProfileMap,
    pub texts: BTreeMap<String, String>,
}

impl Corpus {
    pub fn new(schema: CorpusSchema, records: Vec<AnnotationRecord>, profiles: ProfileMap) -> Self {
        Self { schema, records, profiles, texts: BTreeMap::new() }
    }

    pub fn instance_ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.instance_id.as_str()).collect()
    }

    pub fn annotator_ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.annotator_id.as_str()).collect()
    }

    /// Ratings grouped per instance, instances in sorted order.
    pub fn ratings_by_instance(&self) -> BTreeMap<&str, Vec<f64>> {
        group_ratings(&self.records)
    }

    pub fn records_in<'a>(&'a self, assignment: &'a SplitAssignment, which: Split) -> impl Iterator<Item = &'a AnnotationRecord> + 'a {
        self.records.iter().filter(move |r| assignment.get(&r.instance_id) == Some(which))
    }
}

pub(crate) fn group_ratings(records: &[AnnotationRecord]) -> BTreeMap<&str, Vec<f64>> {
    let mut map: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records {
        map.entry(r.instance_id.as_str()).or_default().push(r.rating);
    }
    map
}

/// z-score normalization fitted on training-split human ratings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingNormalizer {
    pub mean: f64,
    pub std_dev: f64,
}

impl RatingNormalizer {
    pub fn fit<I: IntoIterator<Item = f64>>(ratings: I) -> Result<Self, CorpusError> {
        let values: Vec<f64> = ratings.into_iter().collect();
        if values.is_empty() {
            return Err(CorpusError::Empty);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std_dev = var.sqrt();
        if !(std_dev > 1e-12) {
            return Err(CorpusError::DegenerateRatings);
        }
        Ok(Self { mean, std_dev })
    }

    pub fn identity() -> Self {
        Self { mean: 0.0, std_dev: 1.0 }
    }

    pub fn normalize(&self, rating: f64) -> f64 {
        (rating - self.mean) / self.std_dev
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std_dev + self.mean
    }
}
