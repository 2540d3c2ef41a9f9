//! Demographic-aware mixture of experts: Bayesian annotator and demographic
//! embeddings concatenated with a text embedding, a linear softmax gate with hard
//! top-k selection, feed-forward experts mixed sparsely, and a linear head.
//!
//! All trainable tensors live in one flat `Vec<f64>` addressed through
//! [`Layout`], so optimizers and gradient checks can treat them uniformly.

mod embedding;
mod network;
mod routing;
mod store;

use std::collections::HashMap;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatorProfile, CorpusSchema, RatingNormalizer};
use crate::seed;

pub use embedding::{kl_to_standard_normal, reparameterize, GaussianEmbedding};
pub use network::{Activation, ExpertPool, ExpertWeights, MixOutput, SampleUpstream};
pub use routing::{expert_usage, mixing_weights, route, softmax, top_k, GateParameters, MixingMode, RoutingDecision};
pub use store::TextEmbeddingStore;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("top-k must satisfy 1 <= k <= {experts}, got {k}")]
    InvalidTopK { k: usize, experts: usize },
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch { what: String, expected: usize, got: usize },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("no text embedding for instance '{0}'")]
    MissingTextEmbedding(String),
    #[error("unknown value '{value}' for demographic category '{category}'")]
    UnknownDemographicValue { category: String, value: String },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("text embedding store line {line}: {message}")]
    StoreFormat { line: usize, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Expert count; defaults to the number of demographic categories.
    pub n_experts: Option<usize>,
    pub top_k: usize,
    pub annotator_dim: usize,
    pub demographic_dim: usize,
    pub expert_hidden: usize,
    pub expert_output: usize,
    pub activation: Activation,
    pub mixing: MixingMode,
    pub init_mean_scale: f64,
    pub init_log_variance: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_experts: None,
            top_k: 2,
            annotator_dim: 32,
            demographic_dim: 16,
            expert_hidden: 32,
            expert_output: 16,
            activation: Activation::Tanh,
            mixing: MixingMode::Renormalized,
            init_mean_scale: 0.1,
            init_log_variance: -4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertOffsets {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub text_dim: usize,
    pub annotator_dim: usize,
    pub demographic_dim: usize,
    pub input_dim: usize,
    pub n_experts: usize,
    pub expert_hidden: usize,
    pub expert_output: usize,
    pub n_annotators: usize,
    /// Vocabulary size per category (undisclosed included).
    pub category_sizes: Vec<usize>,
    /// First demographic-table row of each category.
    pub category_rows: Vec<usize>,
    pub gate_w: usize,
    pub gate_b: usize,
    pub experts: Vec<ExpertOffsets>,
    pub head_w: usize,
    pub head_b: usize,
    pub ann_mean: usize,
    pub ann_log_var: usize,
    pub demo_mean: usize,
    pub demo_log_var: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(
        text_dim: usize,
        annotator_dim: usize,
        demographic_dim: usize,
        category_sizes: Vec<usize>,
        n_experts: usize,
        expert_hidden: usize,
        expert_output: usize,
        n_annotators: usize,
    ) -> Self {
        let input_dim = text_dim + annotator_dim + demographic_dim * category_sizes.len();
        let mut cursor = 0;
        let mut take = |n: usize| {
            let at = cursor;
            cursor += n;
            at
        };
        let gate_w = take(n_experts * input_dim);
        let gate_b = take(n_experts);
        let experts = (0..n_experts)
            .map(|_| ExpertOffsets {
                w1: take(expert_hidden * input_dim),
                b1: take(expert_hidden),
                w2: take(expert_output * expert_hidden),
                b2: take(expert_output),
            })
            .collect();
        let head_w = take(expert_output);
        let head_b = take(1);
        let ann_mean = take(n_annotators * annotator_dim);
        let ann_log_var = take(n_annotators * annotator_dim);
        let demo_rows: usize = category_sizes.iter().sum();
        let demo_mean = take(demo_rows * demographic_dim);
        let demo_log_var = take(demo_rows * demographic_dim);
        let total = cursor;
        let mut category_rows = Vec::with_capacity(category_sizes.len());
        let mut row = 0;
        for s in &category_sizes {
            category_rows.push(row);
            row += s;
        }
        Self {
            text_dim,
            annotator_dim,
            demographic_dim,
            input_dim,
            n_experts,
            expert_hidden,
            expert_output,
            n_annotators,
            category_sizes,
            category_rows,
            gate_w,
            gate_b,
            experts,
            head_w,
            head_b,
            ann_mean,
            ann_log_var,
            demo_mean,
            demo_log_var,
            total,
        }
    }

    /// Gate weight and bias, contiguous.
    pub fn gate_range(&self) -> std::ops::Range<usize> {
        self.gate_w..self.gate_b + self.n_experts
    }

    pub fn n_categories(&self) -> usize {
        self.category_sizes.len()
    }

    pub fn annotator_mean(&self, row: usize) -> std::ops::Range<usize> {
        let at = self.ann_mean + row * self.annotator_dim;
        at..at + self.annotator_dim
    }

    pub fn annotator_log_var(&self, row: usize) -> std::ops::Range<usize> {
        let at = self.ann_log_var + row * self.annotator_dim;
        at..at + self.annotator_dim
    }

    pub fn demographic_mean(&self, row: usize) -> std::ops::Range<usize> {
        let at = self.demo_mean + row * self.demographic_dim;
        at..at + self.demographic_dim
    }

    pub fn demographic_log_var(&self, row: usize) -> std::ops::Range<usize> {
        let at = self.demo_log_var + row * self.demographic_dim;
        at..at + self.demographic_dim
    }

    /// Human-readable tensor names with their ranges, for diagnostics and gradient checks.
    pub fn tensors(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let e = self.n_experts;
        let mut out = vec![
            ("gate.weight".to_string(), self.gate_w..self.gate_w + e * self.input_dim),
            ("gate.bias".to_string(), self.gate_b..self.gate_b + e),
        ];
        for (j, x) in self.experts.iter().enumerate() {
            out.push((format!("expert{j}.w1"), x.w1..x.b1));
            out.push((format!("expert{j}.b1"), x.b1..x.w2));
            out.push((format!("expert{j}.w2"), x.w2..x.b2));
            out.push((format!("expert{j}.b2"), x.b2..x.b2 + self.expert_output));
        }
        out.push(("head.weight".into(), self.head_w..self.head_b));
        out.push(("head.bias".into(), self.head_b..self.head_b + 1));
        out.push(("annotator.mean".into(), self.ann_mean..self.ann_log_var));
        out.push(("annotator.log_var".into(), self.ann_log_var..self.demo_mean));
        out.push(("demographic.mean".into(), self.demo_mean..self.demo_log_var));
        out.push(("demographic.log_var".into(), self.demo_log_var..self.total));
        out
    }
}

/// Concatenated model input `[e_text; e_ann; e_demo]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub x: Vec<f64>,
}

/// Noise used for the reparameterized embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Noise {
    /// Evaluation mode: posterior means.
    Mean,
    /// Training mode: standard-normal draws from a seeded stream.
    Seeded(u64),
}

/// Resolved table rows for one (instance, annotator) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleKey {
    pub text_row: usize,
    /// `None` routes to the default annotator embedding.
    pub annotator_row: Option<usize>,
    /// Global demographic-table row per category.
    pub demographic_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSample {
    pub input: ModelInput,
    pub key: SampleKey,
    pub annotator_eps: Vec<f64>,
    pub demographic_eps: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<f64>,
    /// Annotator id → row in the annotator table.
    pub annotators: IndexMap<String, usize>,
    /// Category name and vocabulary, schema order.
    pub categories: Vec<(String, Vec<String>)>,
    /// Embedding for annotators without a table row; fixed at construction.
    pub default_annotator: GaussianEmbedding,
    pub normalizer: RatingNormalizer,
    pub schema_fingerprint: String,
    pub seed: u64,
}

pub const CHECKPOINT_FORMAT: &str = "dissent-checkpoint/v1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    model: Model,
}

impl Model {
    pub fn new<'a, I>(
        config: &ModelConfig,
        schema: &CorpusSchema,
        annotator_ids: I,
        text_dim: usize,
        normalizer: RatingNormalizer,
        seed: u64,
    ) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let n_experts = config.n_experts.unwrap_or(schema.categories.len());
        if n_experts == 0 {
            return Err(ModelError::InvalidConfig("at least one expert is required".into()));
        }
        if config.top_k == 0 || config.top_k > n_experts {
            return Err(ModelError::InvalidTopK { k: config.top_k, experts: n_experts });
        }
        if text_dim == 0 || config.expert_hidden == 0 || config.expert_output == 0 {
            return Err(ModelError::InvalidConfig("text, hidden and output dimensions must be positive".into()));
        }
        let mut annotators = IndexMap::new();
        for id in annotator_ids {
            let next = annotators.len();
            annotators.entry(id.to_string()).or_insert(next);
        }
        let categories: Vec<(String, Vec<String>)> =
            schema.categories.iter().map(|c| (c.name.clone(), c.vocabulary())).collect();
        let layout = Layout::new(
            text_dim,
            config.annotator_dim,
            config.demographic_dim,
            categories.iter().map(|(_, v)| v.len()).collect(),
            n_experts,
            config.expert_hidden,
            config.expert_output,
            annotators.len(),
        );

        let mut rng = seed::stream(seed, seed::INIT);
        let mut params = vec![0.0; layout.total];
        let fill = |params: &mut [f64], range: std::ops::Range<usize>, scale: f64, rng: &mut seed::StreamRng| {
            for v in &mut params[range] {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
        };
        let d = layout.input_dim;
        fill(&mut params, layout.gate_w..layout.gate_b, 1.0 / (d as f64).sqrt(), &mut rng);
        for x in &layout.experts {
            fill(&mut params, x.w1..x.b1, 1.0 / (d as f64).sqrt(), &mut rng);
            fill(&mut params, x.w2..x.b2, 1.0 / (config.expert_hidden as f64).sqrt(), &mut rng);
        }
        fill(&mut params, layout.head_w..layout.head_b, 1.0 / (config.expert_output as f64).sqrt(), &mut rng);
        fill(&mut params, layout.ann_mean..layout.ann_log_var, config.init_mean_scale, &mut rng);
        fill(&mut params, layout.demo_mean..layout.demo_log_var, config.init_mean_scale, &mut rng);
        params[layout.ann_log_var..layout.demo_mean].fill(config.init_log_variance);
        params[layout.demo_log_var..layout.total].fill(config.init_log_variance);
        let default_annotator =
            GaussianEmbedding::random(config.annotator_dim, config.init_mean_scale, config.init_log_variance, &mut rng);

        Ok(Self {
            config: config.clone(),
            layout,
            params,
            annotators,
            categories,
            default_annotator,
            normalizer,
            schema_fingerprint: schema.fingerprint(),
            seed,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.layout.n_experts
    }

    pub fn top_k(&self) -> usize {
        self.config.top_k
    }

    pub fn gate(&self) -> GateParameters<'_> {
        let l = &self.layout;
        GateParameters { weight: &self.params[l.gate_w..l.gate_b], bias: &self.params[l.gate_b..l.gate_b + l.n_experts] }
    }

    pub fn pool(&self) -> ExpertPool<'_> {
        ExpertPool::from_layout(&self.layout, &self.params, self.config.activation)
    }

    pub fn annotator_embedding(&self, annotator_id: &str) -> GaussianEmbedding {
        match self.annotators.get(annotator_id) {
            Some(&row) => GaussianEmbedding::new(
                self.params[self.layout.annotator_mean(row)].to_vec(),
                self.params[self.layout.annotator_log_var(row)].to_vec(),
            ),
            None => self.default_annotator.clone(),
        }
    }

    pub fn demographic_embedding(&self, category: &str, value: &str) -> Option<GaussianEmbedding> {
        let (ci, (_, vocab)) = self.categories.iter().enumerate().find(|(_, (n, _))| n == category)?;
        let row = self.layout.category_rows[ci] + vocab.iter().position(|v| v == value)?;
        Some(GaussianEmbedding::new(
            self.params[self.layout.demographic_mean(row)].to_vec(),
            self.params[self.layout.demographic_log_var(row)].to_vec(),
        ))
    }

    /// Resolves table rows; unknown annotators map to the default embedding.
    pub fn sample_key(
        &self,
        store: &TextEmbeddingStore,
        instance_id: &str,
        annotator_id: &str,
        profile: &AnnotatorProfile,
    ) -> Result<SampleKey, ModelError> {
        if store.dim() != self.layout.text_dim {
            return Err(ModelError::DimensionMismatch { what: "text embedding store".into(), expected: self.layout.text_dim, got: store.dim() });
        }
        let text_row = store.index_of(instance_id).ok_or_else(|| ModelError::MissingTextEmbedding(instance_id.to_string()))?;
        let mut demographic_rows = Vec::with_capacity(self.categories.len());
        for (ci, (name, vocab)) in self.categories.iter().enumerate() {
            let value = profile.value(name);
            let idx = vocab
                .iter()
                .position(|v| v == value)
                .ok_or_else(|| ModelError::UnknownDemographicValue { category: name.clone(), value: value.to_string() })?;
            demographic_rows.push(self.layout.category_rows[ci] + idx);
        }
        Ok(SampleKey { text_row, annotator_row: self.annotators.get(annotator_id).copied(), demographic_rows })
    }

    /// Builds `[e_text; e_ann; e_demo]` for one (instance, annotator) pair.
    pub fn embed_sample(
        &self,
        store: &TextEmbeddingStore,
        instance_id: &str,
        annotator_id: &str,
        profile: &AnnotatorProfile,
        noise: Noise,
    ) -> Result<EmbeddedSample, ModelError> {
        let key = self.sample_key(store, instance_id, annotator_id, profile)?;
        Ok(self.embed_key(store, &key, noise))
    }

    pub fn embed_key(&self, store: &TextEmbeddingStore, key: &SampleKey, noise: Noise) -> EmbeddedSample {
        let l = &self.layout;
        let (ann_eps, demo_eps) = match noise {
            Noise::Mean => (vec![0.0; l.annotator_dim], vec![vec![0.0; l.demographic_dim]; key.demographic_rows.len()]),
            Noise::Seeded(s) => {
                let mut rng = seed::rng(s);
                let mut draw = |n: usize| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>();
                let a = draw(l.annotator_dim);
                let d = key.demographic_rows.iter().map(|_| draw(l.demographic_dim)).collect();
                (a, d)
            }
        };
        let mut x = Vec::with_capacity(l.input_dim);
        x.extend_from_slice(store.row(key.text_row));
        match key.annotator_row {
            Some(row) => x.extend(reparameterize(&self.params[l.annotator_mean(row)], &self.params[l.annotator_log_var(row)], &ann_eps)),
            None => x.extend(self.default_annotator.sample_with(&ann_eps)),
        }
        for (row, eps) in key.demographic_rows.iter().zip(&demo_eps) {
            x.extend(reparameterize(&self.params[l.demographic_mean(*row)], &self.params[l.demographic_log_var(*row)], eps));
        }
        EmbeddedSample { input: ModelInput { x }, key: key.clone(), annotator_eps: ann_eps, demographic_eps: demo_eps }
    }

    pub fn route(&self, x: &ModelInput) -> Result<RoutingDecision, ModelError> {
        route(self.gate(), &x.x, self.config.top_k, self.config.mixing)
    }

    /// Route then mix; the returned prediction is on the rating scale.
    pub fn forward(&self, x: &ModelInput) -> Result<(RoutingDecision, MixOutput), ModelError> {
        let decision = self.route(x)?;
        let out = self.pool().forward(&decision, x, &self.normalizer)?;
        Ok((decision, out))
    }

    /// Evaluation-mode rating prediction.
    pub fn predict(
        &self,
        store: &TextEmbeddingStore,
        instance_id: &str,
        annotator_id: &str,
        profile: &AnnotatorProfile,
    ) -> Result<f64, ModelError> {
        let sample = self.embed_sample(store, instance_id, annotator_id, profile, Noise::Mean)?;
        Ok(self.forward(&sample.input)?.1.prediction)
    }

    /// Accumulates `∂L/∂θ` for one sample into `grads`, given the upstream
    /// gradients of the batch loss with respect to the sample's output, expert
    /// outputs, gate probabilities and gate scores.
    pub fn backward_sample(
        &self,
        sample: &EmbeddedSample,
        decision: &RoutingDecision,
        mix: &MixOutput,
        upstream: &SampleUpstream,
        grads: &mut [f64],
    ) {
        let l = &self.layout;
        let dx = self.pool().backward(decision, &sample.input, mix, upstream, self.gate(), l, self.config.mixing, grads);
        let ann = &dx[l.text_dim..l.text_dim + l.annotator_dim];
        if let Some(row) = sample.key.annotator_row {
            accumulate_reparam(&self.params, grads, l.annotator_mean(row), l.annotator_log_var(row), ann, &sample.annotator_eps);
        }
        let mut at = l.text_dim + l.annotator_dim;
        for (row, eps) in sample.key.demographic_rows.iter().zip(&sample.demographic_eps) {
            let d = &dx[at..at + l.demographic_dim];
            accumulate_reparam(&self.params, grads, l.demographic_mean(*row), l.demographic_log_var(*row), d, eps);
            at += l.demographic_dim;
        }
    }

    pub fn gradient_buffer(&self) -> Vec<f64> {
        vec![0.0; self.layout.total]
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json()).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&Checkpoint { format: CHECKPOINT_FORMAT.into(), model: self.clone() }).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let cp: Checkpoint = serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if cp.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unsupported format '{}'", cp.format)));
        }
        if cp.model.params.len() != cp.model.layout.total {
            return Err(ModelError::Checkpoint("parameter vector does not match layout".into()));
        }
        Ok(cp.model)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks that a checkpoint was built for this schema.
    pub fn check_schema(&self, schema: &CorpusSchema) -> Result<(), ModelError> {
        if self.schema_fingerprint != schema.fingerprint() {
            return Err(ModelError::Checkpoint("schema fingerprint mismatch".into()));
        }
        Ok(())
    }

    /// Rows of the annotator table keyed by id, for inspection.
    pub fn annotator_rows(&self) -> HashMap<&str, usize> {
        self.annotators.iter().map(|(k, v)| (k.as_str(), *v)).collect()
    }
}

/// Backpropagates through `z = μ + exp(½ log σ²) ⊙ ε`.
fn accumulate_reparam(
    params: &[f64],
    grads: &mut [f64],
    mean: std::ops::Range<usize>,
    log_var: std::ops::Range<usize>,
    upstream: &[f64],
    eps: &[f64],
) {
    for (i, (g, e)) in upstream.iter().zip(eps).enumerate() {
        grads[mean.start + i] += g;
        if *e != 0.0 {
            let lv = params[log_var.start + i];
            grads[log_var.start + i] += g * e * 0.5 * (0.5 * lv).exp();
        }
    }
}
