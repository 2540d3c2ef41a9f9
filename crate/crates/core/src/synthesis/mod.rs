//! Persona-prompted synthetic annotation: persona pools, generation plans,
//! prompt templates with strict response parsing, provider access with caching
//! and retries, and alignment of synthetic ratings with human ones.

mod alignment;
mod generate;
mod plan;
mod prompt;

use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CorpusSchema, ProfileMap, UNDISCLOSED};

pub use alignment::{alignment_report, AlignmentMode, AlignmentReport, AlignmentRow};
pub use generate::{
    generate, persona_profiles_jsonl, synthetic_jsonl, CachedResponse, GenerationFailure, GenerationOptions,
    GenerationOutcome, Provider, ProviderError, ResponseCache, RetryPolicy, StubFailure, StubProvider,
    SyntheticAnnotation, WeightComponents,
};
pub use plan::{plan_generation, ClusterParams, GenerationPlan, GenerationStrategy, PlanEntry};
pub use prompt::{
    parse_response, render_prompt, render_response, DecodingParams, ParseError, ParseErrorKind, ParsedResponse,
    ProviderRequest, ResponseFormat, Template, TemplateId, TemplateStore, PCC_QUALITIES,
};

#[derive(Debug, thiserror::Error)]
pub enum SynthesisError {
    #[error("no profiles to build personas from")]
    NoProfiles,
    #[error("unknown template '{0}'")]
    MissingTemplate(String),
    #[error("template '{0}' lacks the {{demographics}} slot")]
    MissingSlot(String),
    #[error("attribute '{category}' value '{value}' cannot be placed in a prompt")]
    AttributeNotSerializable { category: String, value: String },
    #[error("no text for instance '{0}'")]
    MissingText(String),
    #[error("unknown persona '{0}'")]
    UnknownPersona(String),
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("no overlap between synthetic personas and human annotator groups")]
    EmptyOverlap,
    #[error(transparent)]
    KMeans(#[from] crate::kmeans::KMeansError),
    #[error("cannot access {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

/// A synthetic annotator standing in for one observed demographic combination.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub persona_id: String,
    pub attributes: IndexMap<String, String>,
    /// Attribute values in schema order, the real combination this persona copies.
    pub combination: Vec<String>,
    /// Number of real annotators with this combination.
    pub frequency: usize,
}

impl Persona {
    pub fn id_for(combination: &[String]) -> String {
        let mut h = Sha256::new();
        for v in combination {
            h.update((v.len() as u64).to_le_bytes());
            h.update(v.as_bytes());
        }
        format!("persona-{}", &hex::encode(h.finalize())[..12])
    }

    pub fn profile(&self) -> crate::corpus::AnnotatorProfile {
        crate::corpus::AnnotatorProfile { annotator_id: self.persona_id.clone(), attributes: self.attributes.clone() }
    }

    pub fn value(&self, category: &str) -> &str {
        self.attributes.get(category).map(String::as_str).unwrap_or(UNDISCLOSED)
    }
}

/// One persona per distinct observed demographic combination, sorted by combination.
pub fn build_persona_pool(profiles: &ProfileMap, schema: &CorpusSchema) -> Result<Vec<Persona>, SynthesisError> {
    if profiles.is_empty() {
        return Err(SynthesisError::NoProfiles);
    }
    let mut counts: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    for p in profiles.values() {
        *counts.entry(p.combination(schema)).or_default() += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(combination, frequency)| {
            let attributes =
                schema.categories.iter().zip(&combination).map(|(c, v)| (c.name.clone(), v.clone())).collect();
            Persona { persona_id: Persona::id_for(&combination), attributes, combination, frequency }
        })
        .collect())
}

/// Natural-language description of a persona for the `{demographics}` slot.
/// Undisclosed attributes are left out.
pub fn describe(persona: &Persona) -> Result<String, SynthesisError> {
    let mut parts = Vec::new();
    for (category, value) in &persona.attributes {
        if value.contains(['{', '}', '\n', '\r']) || category.contains(['{', '}', '\n', '\r']) {
            return Err(SynthesisError::AttributeNotSerializable { category: category.clone(), value: value.clone() });
        }
        if value != UNDISCLOSED {
            parts.push(format!("{}: {}", category.replace('_', " "), value));
        }
    }
    if parts.is_empty() {
        return Ok("an annotator who did not disclose any demographic information".to_string());
    }
    Ok(parts.join(", "))
}
