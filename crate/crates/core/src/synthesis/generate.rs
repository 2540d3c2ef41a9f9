use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::prompt::{parse_response, render_prompt, render_response, DecodingParams, ParseError, ProviderRequest, Template};
use super::{GenerationPlan, Persona, SynthesisError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited")]
    RateLimited,
    #[error("provider failure: {0}")]
    Permanent(String),
}

impl ProviderError {
    pub fn retryable(&self) -> bool {
        matches!(self, ProviderError::Timeout | ProviderError::RateLimited)
    }
}

/// A chat-completion backend.
pub trait Provider: Send + Sync {
    /// Provider and model identifier recorded with every annotation.
    fn id(&self) -> String;
    fn complete(&self, request: &ProviderRequest) -> Result<String, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StubFailure {
    /// Fails every time.
    Permanent,
    /// Times out this many times, then answers.
    Transient(usize),
    /// Answers with text that does not parse.
    Garbage,
}

/// Offline provider answering from a rating table, falling back to a hash of
/// (persona, instance). Every response is well formed unless a failure is injected.
#[derive(Debug, Default)]
pub struct StubProvider {
    ratings: HashMap<(String, String), Vec<i64>>,
    failures: HashMap<(String, String), StubFailure>,
    attempts: Mutex<HashMap<(String, String), usize>>,
    requests: AtomicUsize,
}

impl StubProvider {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fixed answer slots (one per quality for multi-quality formats).
    pub fn with_rating(mut self, persona_id: &str, instance_id: &str, ratings: Vec<i64>) -> Self {
        self.ratings.insert((persona_id.to_string(), instance_id.to_string()), ratings);
        self
    }

    pub fn with_failure(mut self, persona_id: &str, instance_id: &str, failure: StubFailure) -> Self {
        self.failures.insert((persona_id.to_string(), instance_id.to_string()), failure);
        self
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    fn hashed(request: &ProviderRequest, slot: usize) -> i64 {
        let (min, max) = request.format.bounds();
        let mut h = Sha256::new();
        h.update(request.persona_id.as_bytes());
        h.update([0]);
        h.update(request.instance_id.as_bytes());
        h.update((slot as u64).to_le_bytes());
        let d = h.finalize();
        let v = u64::from_le_bytes(d[..8].try_into().expect("eight bytes"));
        min + (v % (max - min + 1) as u64) as i64
    }
}

impl Provider for StubProvider {
    fn id(&self) -> String {
        "stub".to_string()
    }

    fn complete(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let key = (request.persona_id.clone(), request.instance_id.clone());
        match self.failures.get(&key) {
            Some(StubFailure::Permanent) => return Err(ProviderError::Permanent("injected".into())),
            Some(StubFailure::Garbage) => return Ok("I would rather not say.".into()),
            Some(StubFailure::Transient(n)) => {
                let mut attempts = self.attempts.lock().expect("attempt counter");
                let seen = attempts.entry(key.clone()).or_default();
                *seen += 1;
                if *seen <= *n {
                    return Err(ProviderError::Timeout);
                }
            }
            None => {}
        }
        let slots = match &request.format {
            super::ResponseFormat::Single { .. } => 1,
            super::ResponseFormat::Qualities { names, .. } => names.len(),
        };
        let ratings = self
            .ratings
            .get(&key)
            .cloned()
            .unwrap_or_else(|| (0..slots).map(|s| Self::hashed(request, s)).collect());
        Ok(render_response(&request.format, &ratings, "Stub rationale."))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_delay_ms: 500, max_delay_ms: 8_000 }
    }
}

impl RetryPolicy {
    /// Exponential backoff before attempt `attempt` (1-based; none before the first).
    pub fn delay(&self, attempt: usize) -> Duration {
        if attempt <= 1 {
            return Duration::ZERO;
        }
        let factor = 1u64.checked_shl((attempt - 2) as u32).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub provider: String,
    pub raw: String,
}

/// Parsed-successfully responses keyed by a digest of everything that shapes
/// the request. Optionally mirrored to one file per key in a directory.
#[derive(Debug, Default)]
pub struct ResponseCache {
    entries: RwLock<HashMap<String, CachedResponse>>,
    dir: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: &Path) -> Result<Self, SynthesisError> {
        std::fs::create_dir_all(dir).map_err(|source| SynthesisError::Io { path: dir.to_path_buf(), source })?;
        Ok(Self { entries: RwLock::default(), dir: Some(dir.to_path_buf()) })
    }

    pub fn key(request: &ProviderRequest, persona: &Persona, provider: &str) -> String {
        let attributes: BTreeMap<&String, &String> = persona.attributes.iter().collect();
        let canonical = serde_json::json!({
            "template": request.template,
            "system": request.system,
            "persona": persona.persona_id,
            "attributes": attributes,
            "instance": request.instance_id,
            "text": request.user,
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_tokens,
            "provider": provider,
        });
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }

    pub fn get(&self, key: &str) -> Option<CachedResponse> {
        if let Some(hit) = self.entries.read().expect("cache lock").get(key) {
            return Some(hit.clone());
        }
        let path = self.dir.as_ref()?.join(format!("{key}.json"));
        let loaded: CachedResponse = serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()?;
        self.entries.write().expect("cache lock").insert(key.to_string(), loaded.clone());
        Some(loaded)
    }

    pub fn put(&self, key: &str, value: CachedResponse) -> Result<(), SynthesisError> {
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{key}.json"));
            let tmp = dir.join(format!(".{key}.tmp{}", std::process::id()));
            let body = serde_json::to_string(&value).expect("cache entry serializes");
            std::fs::write(&tmp, body)
                .and_then(|_| std::fs::rename(&tmp, &path))
                .map_err(|source| SynthesisError::Io { path, source })?;
        }
        self.entries.write().expect("cache lock").insert(key.to_string(), value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Filled by the blending module.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightComponents {
    pub alignment: f64,
    pub trustworthiness: f64,
    pub prevalence: f64,
    pub raw: f64,
    pub weight: f64,
    pub cluster: usize,
}

/// One synthetic rating, serialized in the annotation line format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAnnotation {
    pub instance_id: String,
    /// The persona id.
    pub annotator_id: String,
    pub rating: f64,
    pub is_synthetic: bool,
    pub explanation: String,
    pub raw_response: String,
    pub provider: String,
    pub template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<WeightComponents>,
}

impl SyntheticAnnotation {
    pub fn record(&self) -> crate::corpus::AnnotationRecord {
        crate::corpus::AnnotationRecord {
            instance_id: self.instance_id.clone(),
            annotator_id: self.annotator_id.clone(),
            rating: self.rating,
            is_synthetic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub instance_id: String,
    pub persona_id: String,
    pub attempts: usize,
    pub error: String,
    /// Last unparseable response, if any.
    pub raw: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutcome {
    pub annotations: Vec<SyntheticAnnotation>,
    pub failures: Vec<GenerationFailure>,
    pub requests_issued: usize,
    pub cache_hits: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationOptions {
    pub params: DecodingParams,
    pub retry: RetryPolicy,
    /// Concurrent provider calls.
    pub parallelism: usize,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self { params: DecodingParams::default(), retry: RetryPolicy::default(), parallelism: 4 }
    }
}

enum Attempt {
    Done(SyntheticAnnotation, usize, bool),
    Failed(GenerationFailure, usize),
}

/// Runs every planned (instance, persona) pair. Output keeps plan order;
/// pairs that still fail after retries are reported in `failures`.
pub fn generate(
    plan: &GenerationPlan,
    template: &Template,
    personas: &[Persona],
    texts: &BTreeMap<String, String>,
    provider: &dyn Provider,
    cache: &ResponseCache,
    options: &GenerationOptions,
) -> Result<GenerationOutcome, SynthesisError> {
    let by_id: HashMap<&str, &Persona> = personas.iter().map(|p| (p.persona_id.as_str(), p)).collect();
    let mut requests = Vec::with_capacity(plan.total_requests());
    for (instance, persona_id) in plan.pairs() {
        let persona = *by_id.get(persona_id).ok_or_else(|| SynthesisError::UnknownPersona(persona_id.to_string()))?;
        let text = texts.get(instance).ok_or_else(|| SynthesisError::MissingText(instance.to_string()))?;
        requests.push((render_prompt(template, persona, instance, text, options.params)?, persona));
    }
    if options.retry.max_attempts == 0 {
        return Err(SynthesisError::InvalidParams("retry.max_attempts must be at least 1".into()));
    }
    let provider_id = provider.id();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.parallelism.max(1))
        .build()
        .map_err(|e| SynthesisError::InvalidParams(e.to_string()))?;
    let results: Vec<Result<Attempt, SynthesisError>> = pool.install(|| {
        requests.par_iter().map(|(req, persona)| run_one(req, persona, provider, &provider_id, cache, options)).collect()
    });

    let mut outcome = GenerationOutcome::default();
    for r in results {
        match r? {
            Attempt::Done(a, issued, hit) => {
                outcome.requests_issued += issued;
                outcome.cache_hits += usize::from(hit);
                outcome.annotations.push(a);
            }
            Attempt::Failed(f, issued) => {
                outcome.requests_issued += issued;
                outcome.failures.push(f);
            }
        }
    }
    Ok(outcome)
}

fn run_one(
    req: &ProviderRequest,
    persona: &Persona,
    provider: &dyn Provider,
    provider_id: &str,
    cache: &ResponseCache,
    options: &GenerationOptions,
) -> Result<Attempt, SynthesisError> {
    let key = ResponseCache::key(req, persona, provider_id);
    let annotation = |raw: String, parsed: super::ParsedResponse| SyntheticAnnotation {
        instance_id: req.instance_id.clone(),
        annotator_id: persona.persona_id.clone(),
        rating: parsed.rating,
        is_synthetic: true,
        explanation: parsed.explanation(),
        raw_response: raw,
        provider: provider_id.to_string(),
        template: req.template.clone(),
        weight: None,
    };
    if let Some(hit) = cache.get(&key) {
        if let Ok(parsed) = parse_response(&hit.raw, &req.format) {
            return Ok(Attempt::Done(annotation(hit.raw, parsed), 0, true));
        }
    }
    let mut issued = 0;
    let mut last_error = String::new();
    let mut last_raw = None;
    for attempt in 1..=options.retry.max_attempts {
        std::thread::sleep(options.retry.delay(attempt));
        issued += 1;
        match provider.complete(req) {
            Ok(raw) => match parse_response(&raw, &req.format) {
                Ok(parsed) => {
                    cache.put(&key, CachedResponse { provider: provider_id.to_string(), raw: raw.clone() })?;
                    return Ok(Attempt::Done(annotation(raw, parsed), issued, false));
                }
                Err(ParseError { kind, raw }) => {
                    last_error = format!("unparseable response: {kind:?}");
                    last_raw = Some(raw);
                }
            },
            Err(e) => {
                last_error = e.to_string();
                if !e.retryable() {
                    break;
                }
            }
        }
    }
    Ok(Attempt::Failed(
        GenerationFailure {
            instance_id: req.instance_id.clone(),
            persona_id: persona.persona_id.clone(),
            attempts: issued,
            error: last_error,
            raw: last_raw,
        },
        issued,
    ))
}

pub fn synthetic_jsonl(annotations: &[SyntheticAnnotation]) -> String {
    let mut out = String::new();
    for a in annotations {
        out.push_str(&serde_json::to_string(a).expect("annotation serializes"));
        out.push('\n');
    }
    out
}

/// Persona profiles in the flat profile line format.
pub fn persona_profiles_jsonl(personas: &[Persona]) -> String {
    let mut out = String::new();
    for p in personas {
        let mut obj = serde_json::Map::new();
        obj.insert("annotator_id".into(), p.persona_id.clone().into());
        for (k, v) in &p.attributes {
            obj.insert(k.clone(), v.clone().into());
        }
        out.push_str(&serde_json::Value::Object(obj).to_string());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_annotations, parse_profiles, AnnotationRecord, AnnotatorProfile, Corpus, ProfileMap};
    use crate::synthesis::{build_persona_pool, plan_generation, GenerationStrategy, TemplateId};

    struct Fixture {
        corpus: Corpus,
        pool: Vec<Persona>,
        plan: GenerationPlan,
        texts: BTreeMap<String, String>,
    }

    /// Ten (instance, persona) pairs under one_x.
    fn fixture() -> Fixture {
        let schema = crate::synthesis::tests::schema();
        let combos = [("Man", "18-29"), ("Woman", "30-49"), ("Man", "50+"), ("Woman", "18-29")];
        let mut profiles = ProfileMap::new();
        for (i, (g, a)) in combos.iter().enumerate() {
            let id = format!("h{i}");
            profiles.insert(id.clone(), AnnotatorProfile::new(id, [("gender", *g), ("age", *a)]));
        }
        let mut records = Vec::new();
        for (inst, n) in [(0, 3), (1, 2), (2, 4), (3, 1)] {
            for k in 0..n {
                records.push(AnnotationRecord::new(format!("i{inst}"), format!("h{k}"), 3.0));
            }
        }
        let texts = (0..4).map(|i| (format!("i{i}"), format!("text number {i}"))).collect();
        let corpus = Corpus::new(schema, records, profiles);
        let pool = build_persona_pool(&corpus.profiles, &corpus.schema).unwrap();
        let plan = plan_generation(&corpus, &pool, GenerationStrategy::OneX, 5).unwrap();
        assert_eq!(plan.total_requests(), 10);
        Fixture { corpus, pool, plan, texts }
    }

    fn fast() -> GenerationOptions {
        GenerationOptions { retry: RetryPolicy { max_attempts: 3, base_delay_ms: 0, max_delay_ms: 0 }, ..Default::default() }
    }

    #[test]
    fn stub_table_is_echoed_in_plan_order() {
        let f = fixture();
        let mut stub = StubProvider::new();
        for (i, p) in f.plan.pairs() {
            stub = stub.with_rating(p, i, vec![(i.len() + p.len()) as i64 % 5 + 1]);
        }
        let t = TemplateId::Toxicity.template();
        let out = generate(&f.plan, &t, &f.pool, &f.texts, &stub, &ResponseCache::in_memory(), &fast()).unwrap();
        assert!(out.failures.is_empty());
        let pairs: Vec<(&str, &str)> = f.plan.pairs().collect();
        assert_eq!(out.annotations.len(), pairs.len());
        for (a, (i, p)) in out.annotations.iter().zip(pairs) {
            assert_eq!((a.instance_id.as_str(), a.annotator_id.as_str()), (i, p));
            assert_eq!(a.rating, ((i.len() + p.len()) as i64 % 5 + 1) as f64);
            assert!(a.is_synthetic);
            assert_eq!(a.provider, "stub");
        }
    }

    #[test]
    fn cache_hit_issues_no_requests() {
        let f = fixture();
        let t = TemplateId::Politeness.template();
        let cache = ResponseCache::in_memory();
        let stub = StubProvider::new();
        let first = generate(&f.plan, &t, &f.pool, &f.texts, &stub, &cache, &fast()).unwrap();
        assert_eq!(first.requests_issued, 10);
        let fresh = StubProvider::new();
        let second = generate(&f.plan, &t, &f.pool, &f.texts, &fresh, &cache, &fast()).unwrap();
        assert_eq!(fresh.requests(), 0);
        assert_eq!(second.requests_issued, 0);
        assert_eq!(second.cache_hits, 10);
        assert_eq!(first.annotations, second.annotations);

        let other = GenerationOptions { params: DecodingParams { temperature: 0.2, ..Default::default() }, ..fast() };
        generate(&f.plan, &t, &f.pool, &f.texts, &fresh, &cache, &other).unwrap();
        assert_eq!(fresh.requests(), 10, "changed decoding params miss the cache");
    }

    #[test]
    fn disk_cache_survives_reload() {
        let f = fixture();
        let t = TemplateId::Safety.template();
        let dir = tempfile::tempdir().unwrap();
        let stub = StubProvider::new();
        generate(&f.plan, &t, &f.pool, &f.texts, &stub, &ResponseCache::on_disk(dir.path()).unwrap(), &fast()).unwrap();
        let reloaded = ResponseCache::on_disk(dir.path()).unwrap();
        let fresh = StubProvider::new();
        let out = generate(&f.plan, &t, &f.pool, &f.texts, &fresh, &reloaded, &fast()).unwrap();
        assert_eq!(fresh.requests(), 0);
        assert!(out.annotations.iter().all(|a| (1.0..=3.0).contains(&a.rating)));
    }

    #[test]
    fn failures_are_recorded_and_retried() {
        let f = fixture();
        let pairs: Vec<(String, String)> = f.plan.pairs().map(|(i, p)| (i.to_string(), p.to_string())).collect();
        let stub = StubProvider::new()
            .with_failure(&pairs[0].1, &pairs[0].0, StubFailure::Permanent)
            .with_failure(&pairs[1].1, &pairs[1].0, StubFailure::Transient(2))
            .with_failure(&pairs[2].1, &pairs[2].0, StubFailure::Garbage);
        let t = TemplateId::Offensiveness.template();
        let out = generate(&f.plan, &t, &f.pool, &f.texts, &stub, &ResponseCache::in_memory(), &fast()).unwrap();
        assert_eq!(out.annotations.len(), 8);
        assert_eq!(out.failures.len(), 2);
        assert_eq!(out.failures[0].attempts, 1, "permanent errors are not retried");
        assert_eq!(out.failures[1].attempts, 3);
        assert_eq!(out.failures[1].raw.as_deref(), Some("I would rather not say."));
        // 1 permanent + 3 transient + 3 garbage + 7 clean
        assert_eq!(out.requests_issued, 14);
        assert_eq!(stub.requests(), 14);
    }

    #[test]
    fn one_permanent_failure_in_ten() {
        let f = fixture();
        let (i, p) = f.plan.pairs().nth(4).unwrap();
        let stub = StubProvider::new().with_failure(p, i, StubFailure::Permanent);
        let t = TemplateId::Toxicity.template();
        let out = generate(&f.plan, &t, &f.pool, &f.texts, &stub, &ResponseCache::in_memory(), &fast()).unwrap();
        assert_eq!((out.annotations.len(), out.failures.len()), (9, 1));
    }

    #[test]
    fn pcc_ratings_are_quality_means() {
        let f = fixture();
        let (i, p) = f.plan.pairs().next().unwrap();
        let stub = StubProvider::new().with_rating(p, i, vec![4, 3, 5]);
        let t = TemplateId::Pcc.template();
        let out = generate(&f.plan, &t, &f.pool, &f.texts, &stub, &ResponseCache::in_memory(), &fast()).unwrap();
        assert!((out.annotations[0].rating - 4.0).abs() < 1e-12);
    }

    #[test]
    fn missing_text_is_an_error() {
        let mut f = fixture();
        f.texts.remove("i2");
        let t = TemplateId::Toxicity.template();
        let r = generate(&f.plan, &t, &f.pool, &f.texts, &StubProvider::new(), &ResponseCache::in_memory(), &fast());
        assert!(matches!(r, Err(SynthesisError::MissingText(_))));
    }

    #[test]
    fn output_files_ingest() {
        let f = fixture();
        let t = TemplateId::Toxicity.template();
        let out =
            generate(&f.plan, &t, &f.pool, &f.texts, &StubProvider::new(), &ResponseCache::in_memory(), &fast()).unwrap();
        let (records, _) = parse_annotations(&synthetic_jsonl(&out.annotations), &f.corpus.schema).unwrap();
        assert_eq!(records.len(), 10);
        assert!(records.iter().all(|r| r.is_synthetic));
        let profiles = parse_profiles(&persona_profiles_jsonl(&f.pool), &f.corpus.schema).unwrap();
        assert_eq!(profiles.len(), f.pool.len());
        assert_eq!(profiles[&f.pool[0].persona_id].attributes, f.pool[0].attributes);
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy { max_attempts: 5, base_delay_ms: 100, max_delay_ms: 250 };
        let d: Vec<u128> = (1..=4).map(|a| p.delay(a).as_millis()).collect();
        assert_eq!(d, vec![0, 100, 200, 250]);
    }

    #[test]
    fn cache_keys_distinguish_inputs() {
        let f = fixture();
        let t = TemplateId::Toxicity.template();
        let params = DecodingParams::default();
        let a = render_prompt(&t, &f.pool[0], "i0", "x", params).unwrap();
        let b = render_prompt(&t, &f.pool[1], "i0", "x", params).unwrap();
        let c = render_prompt(&t, &f.pool[0], "i1", "x", params).unwrap();
        let d = render_prompt(&TemplateId::Politeness.template(), &f.pool[0], "i0", "x", params).unwrap();
        let keys: std::collections::BTreeSet<String> = [(&a, 0), (&b, 1), (&c, 0), (&d, 0)]
            .iter()
            .map(|(r, p)| ResponseCache::key(r, &f.pool[*p], "stub"))
            .chain([ResponseCache::key(&a, &f.pool[0], "other")])
            .collect();
        assert_eq!(keys.len(), 5);
    }
}
