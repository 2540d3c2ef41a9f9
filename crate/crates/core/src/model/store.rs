use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use super::ModelError;

/// Precomputed text embeddings keyed by instance id; every vector has dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingStore {
    dim: usize,
    vectors: IndexMap<String, Vec<f64>>,
}

impl TextEmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self { dim, vectors: IndexMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, instance_id: impl Into<String>, vector: Vec<f64>) -> Result<(), ModelError> {
        let id = instance_id.into();
        if vector.len() != self.dim {
            return Err(ModelError::DimensionMismatch { what: format!("text embedding for '{id}'"), expected: self.dim, got: vector.len() });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(format!("text embedding for '{id}'")));
        }
        self.vectors.insert(id, vector);
        Ok(())
    }

    pub fn get(&self, instance_id: &str) -> Result<&[f64], ModelError> {
        self.vectors.get(instance_id).map(Vec::as_slice).ok_or_else(|| ModelError::MissingTextEmbedding(instance_id.to_string()))
    }

    pub fn index_of(&self, instance_id: &str) -> Option<usize> {
        self.vectors.get_index_of(instance_id)
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.vectors[index]
    }

    pub fn contains(&self, instance_id: &str) -> bool {
        self.vectors.contains_key(instance_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Parses the tab-separated store format: a `dim<TAB>t` header line, then
    /// `instance_id<TAB>v1<TAB>…<TAB>vt` per instance.
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| ModelError::StoreFormat { line: 1, message: "missing header".into() })?;
        let dim = header
            .strip_prefix("dim\t")
            .and_then(|d| d.trim().parse::<usize>().ok())
            .filter(|d| *d > 0)
            .ok_or_else(|| ModelError::StoreFormat { line: 1, message: "header must be 'dim<TAB><positive integer>'".into() })?;
        let mut store = Self::new(dim);
        for (idx, line) in lines {
            let mut fields = line.split('\t');
            let id = fields.next().unwrap_or_default().to_string();
            let values: Result<Vec<f64>, _> = fields.map(|f| f.trim().parse::<f64>()).collect();
            let values = values.map_err(|e| ModelError::StoreFormat { line: idx + 1, message: e.to_string() })?;
            if values.len() != dim {
                return Err(ModelError::StoreFormat { line: idx + 1, message: format!("expected {dim} values, found {}", values.len()) });
            }
            store.insert(id, values)?;
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("dim\t{}\n", self.dim);
        for (id, v) in &self.vectors {
            out.push_str(id);
            for x in v {
                let _ = write!(out, "\t{x}");
            }
            out.push('\n');
        }
        out
    }

    /// Signed feature-hashing bag of lower-cased word unigrams, L2-normalized.
    /// A deterministic stand-in when no encoder output is available.
    pub fn hashed<'a, I>(dim: usize, texts: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut store = Self::new(dim);
        for (id, text) in texts {
            let mut v = vec![0.0; dim];
            for token in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
                let digest = Sha256::digest(token.to_lowercase().as_bytes());
                let bucket = u64::from_le_bytes(digest[..8].try_into().unwrap()) as usize % dim;
                let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
                v[bucket] += sign;
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
            store.vectors.insert(id.to_string(), v);
        }
        store
    }
}
