use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CorpusError;

/// Reserved attribute value for missing or withheld demographics.
pub const UNDISCLOSED: &str = "undisclosed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingScale {
    pub min: f64,
    pub max: f64,
    #[serde(default = "default_true")]
    pub discrete: bool,
}

fn default_true() -> bool {
    true
}

impl RatingScale {
    pub fn new(min: f64, max: f64, discrete: bool) -> Self {
        Self { min, max, discrete }
    }

    pub fn contains(&self, rating: f64) -> bool {
        rating.is_finite() && rating >= self.min && rating <= self.max
    }

    pub fn clip(&self, rating: f64) -> f64 {
        rating.clamp(self.min, self.max)
    }

    /// Integer grid points `min, min+1, …, max` used for distributions and entropy.
    pub fn points(&self) -> Vec<f64> {
        let lo = self.min.ceil() as i64;
        let hi = self.max.floor() as i64;
        (lo..=hi).map(|v| v as f64).collect()
    }

    /// Index of the nearest grid point.
    pub fn bin(&self, rating: f64) -> usize {
        let pts = self.points();
        let idx = (self.clip(rating) - pts[0]).round();
        (idx.max(0.0) as usize).min(pts.len() - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicCategory {
    pub name: String,
    pub values: Vec<String>,
}

impl DemographicCategory {
    /// Vocabulary including the reserved undisclosed value (appended when absent).
    pub fn vocabulary(&self) -> Vec<String> {
        let mut v = self.values.clone();
        if !v.iter().any(|x| x == UNDISCLOSED) {
            v.push(UNDISCLOSED.to_string());
        }
        v
    }

    pub fn value_index(&self, value: &str) -> Option<usize> {
        if let Some(i) = self.values.iter().position(|v| v == value) {
            return Some(i);
        }
        (value == UNDISCLOSED).then_some(self.values.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    #[default]
    Inline,
    Store,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSchema {
    #[serde(default)]
    pub name: String,
    pub rating_scale: RatingScale,
    pub categories: Vec<DemographicCategory>,
    #[serde(default)]
    pub text_source: TextSource,
    /// Raw values that are read as [`UNDISCLOSED`].
    #[serde(default)]
    pub undisclosed_aliases: Vec<String>,
    /// Map out-of-vocabulary values to [`UNDISCLOSED`] instead of failing.
    #[serde(default)]
    pub map_unknown_to_undisclosed: bool,
}

impl CorpusSchema {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let s = &self.rating_scale;
        if !(s.min.is_finite() && s.max.is_finite() && s.min < s.max) {
            return Err(CorpusError::InvalidSchema(format!(
                "rating scale bounds must satisfy min < max (got {}..{})",
                s.min, s.max
            )));
        }
        if s.points().len() < 2 {
            return Err(CorpusError::InvalidSchema("rating scale must span at least two integer points".into()));
        }
        if self.categories.is_empty() {
            return Err(CorpusError::InvalidSchema("at least one demographic category is required".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.categories {
            if !seen.insert(c.name.as_str()) {
                return Err(CorpusError::InvalidSchema(format!("duplicate category '{}'", c.name)));
            }
            if c.values.is_empty() {
                return Err(CorpusError::InvalidSchema(format!("category '{}' has an empty vocabulary", c.name)));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CorpusError> {
        let schema: Self = toml::from_str(text).map_err(|e| CorpusError::InvalidSchema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_json_str(text: &str) -> Result<Self, CorpusError> {
        let schema: Self = serde_json::from_str(text).map_err(|e| CorpusError::InvalidSchema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    /// Reads a TOML or JSON schema, chosen by extension.
    pub fn load(path: &std::path::Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text),
            _ => Self::from_toml_str(&text),
        }
    }

    pub fn category(&self, name: &str) -> Option<&DemographicCategory> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn category_names(&self) -> Vec<&str> {
        self.categories.iter().map(|c| c.name.as_str()).collect()
    }

    /// Total width of the one-hot demographic encoding (undisclosed columns included).
    pub fn one_hot_width(&self) -> usize {
        self.categories.iter().map(|c| c.vocabulary().len()).sum()
    }

    /// Hex SHA-256 over the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Resolves a raw attribute value against one category's vocabulary.
    pub fn resolve_value(&self, category: &DemographicCategory, raw: Option<&str>) -> Result<String, String> {
        let Some(raw) = raw else { return Ok(UNDISCLOSED.to_string()) };
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed == UNDISCLOSED || self.undisclosed_aliases.iter().any(|a| a == trimmed) {
            return Ok(UNDISCLOSED.to_string());
        }
        if category.values.iter().any(|v| v == trimmed) {
            return Ok(trimmed.to_string());
        }
        if self.map_unknown_to_undisclosed {
            Ok(UNDISCLOSED.to_string())
        } else {
            Err(trimmed.to_string())
        }
    }
}
