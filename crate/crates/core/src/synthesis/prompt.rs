use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{describe, Persona, SynthesisError};

pub const PCC_QUALITIES: [&str; 3] =
    ["Encourages you to share your opinions", "Is supportive of you", "Gives thorough and clear information"];

const DEMOGRAPHICS_SLOT: &str = "{demographics}";
const TEXT_SLOT: &str = "{text}";

/// The shipped dataset templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Safety,
    Politeness,
    Offensiveness,
    Toxicity,
    Pcc,
}

impl TemplateId {
    pub const ALL: [TemplateId; 5] =
        [TemplateId::Safety, TemplateId::Politeness, TemplateId::Offensiveness, TemplateId::Toxicity, TemplateId::Pcc];

    pub fn name(self) -> &'static str {
        match self {
            TemplateId::Safety => "safety",
            TemplateId::Politeness => "politeness",
            TemplateId::Offensiveness => "offensiveness",
            TemplateId::Toxicity => "toxicity",
            TemplateId::Pcc => "pcc",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }

    fn text(self) -> &'static str {
        match self {
            TemplateId::Safety => include_str!("../../templates/safety.txt"),
            TemplateId::Politeness => include_str!("../../templates/politeness.txt"),
            TemplateId::Offensiveness => include_str!("../../templates/offensiveness.txt"),
            TemplateId::Toxicity => include_str!("../../templates/toxicity.txt"),
            TemplateId::Pcc => include_str!("../../templates/pcc.txt"),
        }
    }

    pub fn format(self) -> ResponseFormat {
        match self {
            TemplateId::Safety => ResponseFormat::Single { min: 1, max: 3 },
            TemplateId::Pcc => ResponseFormat::Qualities {
                names: PCC_QUALITIES.iter().map(|s| s.to_string()).collect(),
                min: 1,
                max: 5,
            },
            _ => ResponseFormat::Single { min: 1, max: 5 },
        }
    }

    pub fn template(self) -> Template {
        Template::new(self.name(), self.text(), self.format()).expect("shipped template has its slot")
    }
}

/// What a response must contain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ResponseFormat {
    /// One `[Explanation]:::[Rating]` answer.
    Single { min: i64, max: i64 },
    /// One answer line per named quality, aggregated by their mean.
    Qualities { names: Vec<String>, min: i64, max: i64 },
}

impl ResponseFormat {
    pub fn bounds(&self) -> (i64, i64) {
        match self {
            ResponseFormat::Single { min, max } | ResponseFormat::Qualities { min, max, .. } => (*min, *max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub name: String,
    pub text: String,
    pub format: ResponseFormat,
}

impl Template {
    pub fn new(name: &str, text: &str, format: ResponseFormat) -> Result<Self, SynthesisError> {
        if !text.contains(DEMOGRAPHICS_SLOT) {
            return Err(SynthesisError::MissingSlot(name.to_string()));
        }
        Ok(Self { name: name.to_string(), text: text.to_string(), format })
    }
}

/// Named templates; starts with the shipped set and can load overrides from disk.
#[derive(Debug, Clone)]
pub struct TemplateStore {
    templates: BTreeMap<String, Template>,
}

impl Default for TemplateStore {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateStore {
    pub fn builtin() -> Self {
        Self { templates: TemplateId::ALL.iter().map(|t| (t.name().to_string(), t.template())).collect() }
    }

    pub fn get(&self, name: &str) -> Result<&Template, SynthesisError> {
        self.templates.get(name).ok_or_else(|| SynthesisError::MissingTemplate(name.to_string()))
    }

    pub fn insert(&mut self, template: Template) {
        self.templates.insert(template.name.clone(), template);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    /// Replaces the text of a known template with `<dir>/<name>.txt` where such a file exists.
    pub fn load_overrides(&mut self, dir: &Path) -> Result<usize, SynthesisError> {
        let mut loaded = 0;
        let names: Vec<String> = self.templates.keys().cloned().collect();
        for name in names {
            let path = dir.join(format!("{name}.txt"));
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|source| SynthesisError::Io { path, source })?;
            let format = self.templates[&name].format.clone();
            self.insert(Template::new(&name, &text, format)?);
            loaded += 1;
        }
        Ok(loaded)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self { temperature: 0.7, max_tokens: 512 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderRequest {
    pub template: String,
    pub persona_id: String,
    pub instance_id: String,
    pub persona_description: String,
    pub system: String,
    pub user: String,
    pub params: DecodingParams,
    pub format: ResponseFormat,
}

pub fn render_prompt(
    template: &Template,
    persona: &Persona,
    instance_id: &str,
    text: &str,
    params: DecodingParams,
) -> Result<ProviderRequest, SynthesisError> {
    let description = describe(persona)?;
    let system = template.text.replace(DEMOGRAPHICS_SLOT, &description).replace(TEXT_SLOT, text);
    Ok(ProviderRequest {
        template: template.name.clone(),
        persona_id: persona.persona_id.clone(),
        instance_id: instance_id.to_string(),
        persona_description: description,
        system,
        user: text.to_string(),
        params,
        format: template.format.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedResponse {
    /// Scale rating; the mean of `item_ratings` for multi-quality formats.
    pub rating: f64,
    pub item_ratings: Vec<i64>,
    pub explanations: Vec<String>,
}

impl ParsedResponse {
    pub fn explanation(&self) -> String {
        self.explanations.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseErrorKind {
    MissingSeparator,
    MalformedRating(String),
    OutOfScale { rating: i64, min: i64, max: i64 },
    MissingQuality(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("unparseable response ({kind:?})")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub raw: String,
}

pub fn parse_response(raw: &str, format: &ResponseFormat) -> Result<ParsedResponse, ParseError> {
    let fail = |kind| ParseError { kind, raw: raw.to_string() };
    let (min, max) = format.bounds();
    match format {
        ResponseFormat::Single { .. } => {
            let (explanation, rating) = parse_answer(raw, min, max).map_err(fail)?;
            Ok(ParsedResponse { rating: rating as f64, item_ratings: vec![rating], explanations: vec![explanation] })
        }
        ResponseFormat::Qualities { names, .. } => {
            let mut ratings = Vec::with_capacity(names.len());
            let mut explanations = Vec::with_capacity(names.len());
            for name in names {
                let rest = raw
                    .lines()
                    .find_map(|line| quality_remainder(line, name))
                    .ok_or_else(|| fail(ParseErrorKind::MissingQuality(name.clone())))?;
                let (e, r) = parse_answer(rest, min, max).map_err(fail)?;
                ratings.push(r);
                explanations.push(e);
            }
            let rating = ratings.iter().sum::<i64>() as f64 / ratings.len() as f64;
            Ok(ParsedResponse { rating, item_ratings: ratings, explanations })
        }
    }
}

/// Splits at the last `:::`; the tail must be a bracketed integer and nothing else.
fn parse_answer(text: &str, min: i64, max: i64) -> Result<(String, i64), ParseErrorKind> {
    let at = text.rfind(":::").ok_or(ParseErrorKind::MissingSeparator)?;
    let tail = text[at + 3..].trim();
    let inner = tail
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| ParseErrorKind::MalformedRating(tail.to_string()))?
        .trim();
    let rating: i64 = inner.parse().map_err(|_| ParseErrorKind::MalformedRating(tail.to_string()))?;
    if rating < min || rating > max {
        return Err(ParseErrorKind::OutOfScale { rating, min, max });
    }
    Ok((clean_explanation(&text[..at]), rating))
}

fn clean_explanation(text: &str) -> String {
    let mut t = text.trim();
    if let Some(inner) = t.strip_prefix('[').and_then(|x| x.strip_suffix(']')) {
        t = inner.trim();
    }
    t.trim_matches(|c| matches!(c, '"' | '\u{201c}' | '\u{201d}')).trim().to_string()
}

/// If `line` starts with the quality name (after list markers and emphasis),
/// returns what follows the name's colon.
fn quality_remainder<'a>(line: &'a str, name: &str) -> Option<&'a str> {
    let body = line.trim_start_matches(|c: char| {
        c.is_whitespace() || c.is_ascii_digit() || matches!(c, '-' | '*' | '#' | '.' | ')' | '\u{2022}')
    });
    let head = body.get(..name.len())?;
    if !head.eq_ignore_ascii_case(name) {
        return None;
    }
    let rest = body[name.len()..].trim_start_matches(['*', ' ']);
    rest.strip_prefix(':')
}

/// Produces a well-formed response carrying `ratings`, one per answer slot.
pub fn render_response(format: &ResponseFormat, ratings: &[i64], explanation: &str) -> String {
    match format {
        ResponseFormat::Single { .. } => format!("\"{explanation}\":::[{}]", ratings[0]),
        ResponseFormat::Qualities { names, .. } => names
            .iter()
            .zip(ratings)
            .map(|(n, r)| format!("{n}: {explanation}:::[{r}]"))
            .collect::<Vec<_>>()
            .join("\n"),
    }
}
