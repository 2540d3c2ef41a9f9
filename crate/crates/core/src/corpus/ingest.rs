use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use indexmap::IndexMap;
use serde_json::{Map, Value};

use super::{AnnotationRecord, AnnotatorProfile, Corpus, CorpusError, CorpusSchema, ProfileMap};

/// Reads an annotation file and a profile file (one JSON object per line each)
/// and validates both against `schema`.
pub fn ingest(annotations: &Path, profiles: &Path, schema: &CorpusSchema) -> Result<Corpus, CorpusError> {
    schema.validate()?;
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|source| CorpusError::Io { path: p.to_path_buf(), source });
    let (records, texts) = parse_annotations(&read(annotations)?, schema)?;
    let profiles = parse_profiles(&read(profiles)?, schema)?;
    for r in &records {
        if !profiles.contains_key(&r.annotator_id) {
            return Err(CorpusError::MissingProfile(r.annotator_id.clone()));
        }
    }
    let mut corpus = Corpus::new(schema.clone(), records, profiles);
    corpus.texts = texts;
    Ok(corpus)
}

fn parse_object(line: &str, lineno: usize) -> Result<Map<String, Value>, CorpusError> {
    match serde_json::from_str::<Value>(line) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CorpusError::Malformed { line: lineno, message: "expected a JSON object".into() }),
        Err(e) => Err(CorpusError::Malformed { line: lineno, message: e.to_string() }),
    }
}

fn id_field(obj: &Map<String, Value>, key: &str, lineno: usize) -> Result<String, CorpusError> {
    match obj.get(key) {
        Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        _ => Err(CorpusError::Malformed { line: lineno, message: format!("missing or empty '{key}'") }),
    }
}

/// Parses annotation lines. Returns records plus inline instance text.
pub fn parse_annotations(
    text: &str,
    schema: &CorpusSchema,
) -> Result<(Vec<AnnotationRecord>, BTreeMap<String, String>), CorpusError> {
    let scale = &schema.rating_scale;
    let mut records = Vec::new();
    let mut texts = BTreeMap::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let obj = parse_object(line, lineno)?;
        let instance_id = id_field(&obj, "instance_id", lineno)?;
        let annotator_id = id_field(&obj, "annotator_id", lineno)?;
        let rating = obj
            .get("rating")
            .and_then(Value::as_f64)
            .ok_or_else(|| CorpusError::Malformed { line: lineno, message: "missing numeric 'rating'".into() })?;
        if !scale.contains(rating) {
            return Err(CorpusError::RatingOutOfScale { line: lineno, rating, min: scale.min, max: scale.max });
        }
        if scale.discrete && rating.fract() != 0.0 {
            return Err(CorpusError::NonIntegralRating { line: lineno, rating });
        }
        let is_synthetic = obj.get("is_synthetic").and_then(Value::as_bool).unwrap_or(false);
        if !is_synthetic && !seen.insert((instance_id.clone(), annotator_id.clone())) {
            return Err(CorpusError::DuplicateAnnotation { line: lineno, instance_id, annotator_id });
        }
        if let Some(Value::String(t)) = obj.get("text") {
            texts.entry(instance_id.clone()).or_insert_with(|| t.clone());
        }
        records.push(AnnotationRecord { instance_id, annotator_id, rating, is_synthetic });
    }
    Ok((records, texts))
}

/// Parses profile lines; identical repeats collapse, conflicting repeats fail.
pub fn parse_profiles(text: &str, schema: &CorpusSchema) -> Result<ProfileMap, CorpusError> {
    let mut profiles: ProfileMap = IndexMap::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let obj = parse_object(line, lineno)?;
        let annotator_id = id_field(&obj, "annotator_id", lineno)?;
        let mut attributes = IndexMap::new();
        for cat in &schema.categories {
            let raw = match obj.get(&cat.name) {
                None | Some(Value::Null) => None,
                Some(Value::String(s)) => Some(s.clone()),
                Some(Value::Number(n)) => Some(n.to_string()),
                Some(Value::Bool(b)) => Some(b.to_string()),
                Some(_) => {
                    return Err(CorpusError::Malformed {
                        line: lineno,
                        message: format!("category '{}' must be a scalar", cat.name),
                    })
                }
            };
            let value = schema.resolve_value(cat, raw.as_deref()).map_err(|value| {
                CorpusError::UnknownDemographicValue { line: lineno, category: cat.name.clone(), value }
            })?;
            attributes.insert(cat.name.clone(), value);
        }
        let profile = AnnotatorProfile { annotator_id: annotator_id.clone(), attributes };
        match profiles.get(&annotator_id) {
            Some(existing) if existing != &profile => {
                return Err(CorpusError::ConflictingProfile { line: lineno, annotator_id });
            }
            Some(_) => {}
            None => {
                profiles.insert(annotator_id, profile);
            }
        }
    }
    Ok(profiles)
}

/// Serializes records in the annotation line format.
pub fn write_annotations(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}
