//! Layered run configuration: built-in defaults, then a dataset preset, then
//! the config file, then command-line overrides.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use dissent_core::corpus::{AlphaMetric, Split};
use dissent_core::model::{Activation, MixingMode, ModelConfig};
use dissent_core::synthesis::{AlignmentMode, TemplateId};
use dissent_core::training::{
    preset_table, DemoDirection, HyperParameters, OptimizerKind, DEFAULT_EMA_DECAY, DEFAULT_TAU_AB, DEFAULT_TAU_BC,
    PRESET_NAMES,
};

use crate::error::{CliError, Result};

pub const COMMANDS: [&str; 9] = [
    "ingest",
    "stats",
    "split",
    "train",
    "evaluate",
    "analyze-experts",
    "generate-synthetic",
    "blend-train",
    "report",
];

const CORPUS: &[&str] =
    &["ingest", "stats", "split", "train", "evaluate", "analyze-experts", "generate-synthetic", "blend-train"];
const SPLITTING: &[&str] = &["split", "train", "evaluate", "analyze-experts", "generate-synthetic", "blend-train"];
const SPLIT_READERS: &[&str] = &["train", "evaluate", "analyze-experts", "generate-synthetic", "blend-train"];
const EMBEDDING: &[&str] = &["train", "evaluate", "analyze-experts", "blend-train"];
const FITTING: &[&str] = &["train", "blend-train"];
const SYNTH: &[&str] = &["generate-synthetic"];
const BLEND: &[&str] = &["blend-train"];

/// A configuration key, its description and the subcommands that read it.
pub struct KeySpec {
    pub key: &'static str,
    pub help: &'static str,
    pub commands: &'static [&'static str],
}

const fn k(key: &'static str, help: &'static str, commands: &'static [&'static str]) -> KeySpec {
    KeySpec { key, help, commands }
}

pub const KEYS: &[KeySpec] = &[
    k("seed", "master seed; every random stream derives from it", SPLITTING),
    k("preset", "dataset preset supplying the [hyper] table", FITTING),
    k("output.dir", "directory receiving artifacts and manifest.json", &COMMANDS),
    k("data.schema", "corpus schema file (TOML or JSON)", CORPUS),
    k("data.annotations", "annotation lines (JSON per line)", CORPUS),
    k("data.profiles", "annotator profile lines (JSON per line)", CORPUS),
    k("data.embeddings", "text embedding store; hashed bag-of-words from inline text when unset", EMBEDDING),
    k("data.text_dim", "dimension of the hashed text embedding", EMBEDDING),
    k("data.split", "split.json from `split`; recomputed from seed when unset", SPLIT_READERS),
    k("data.checkpoint", "trained model checkpoint", &["evaluate", "analyze-experts"]),
    k("data.reference_checkpoint", "real-data checkpoint defining trustworthiness (weighted blend)", BLEND),
    k("data.synthetic", "synthetic annotation lines from `generate-synthetic`", BLEND),
    k("data.persona_profiles", "persona profile lines from `generate-synthetic`", BLEND),
    k("split.fractions", "train/dev/test instance fractions", SPLITTING),
    k("statistics.alpha_metric", "Krippendorff distance: interval | nominal", &["stats"]),
    k("statistics.entropy_base", "logarithm base of the rating entropy", &["stats"]),
    k("statistics.ridge_penalty", "ridge penalty of the demographic-signal fit", &["stats"]),
    k("model.n_experts", "expert count; number of demographic categories when unset", FITTING),
    k("model.annotator_dim", "annotator embedding dimension", FITTING),
    k("model.demographic_dim", "per-category demographic embedding dimension", FITTING),
    k("model.expert_hidden", "expert hidden width", FITTING),
    k("model.expert_output", "expert output width", FITTING),
    k("model.activation", "expert activation: tanh | identity", FITTING),
    k("model.mixing", "expert mixing: renormalized | raw", FITTING),
    k("model.init_mean_scale", "std of initial embedding means", FITTING),
    k("model.init_log_variance", "initial embedding log-variance", FITTING),
    k("hyper.learning_rate_gate", "gate learning rate", FITTING),
    k("hyper.learning_rate_main", "learning rate of all other parameters", FITTING),
    k("hyper.topk_experts", "experts selected per sample", FITTING),
    k("hyper.demographic_emb_w", "demographic embedding KL weight", FITTING),
    k("hyper.annotator_emb_w", "annotator embedding KL weight", FITTING),
    k("hyper.demographic_specialization_w", "demographic specialization weight", FITTING),
    k("hyper.load_loss_w_phaseA", "load balance weight, phase A", FITTING),
    k("hyper.load_loss_w_phaseB", "load balance weight, phase B", FITTING),
    k("hyper.load_loss_w_phaseC", "load balance weight, phase C", FITTING),
    k("hyper.orthogonal_loss_w_phaseA", "orthogonality weight, phase A", FITTING),
    k("hyper.orthogonal_loss_w_phaseB", "orthogonality weight, phase B", FITTING),
    k("hyper.orthogonal_loss_w_phaseC", "orthogonality weight, phase C", FITTING),
    k("hyper.variance_loss_w_phaseA", "gate variance weight, phase A", FITTING),
    k("hyper.variance_loss_w_phaseB", "gate variance weight, phase B", FITTING),
    k("hyper.variance_loss_w_phaseC", "gate variance weight, phase C", FITTING),
    k("optimizer.kind", "sgd | adam", FITTING),
    k("optimizer.max_epochs", "epoch budget", FITTING),
    k("optimizer.patience", "early-stopping patience on dev MAE", FITTING),
    k("optimizer.batch_size", "minibatch size", FITTING),
    k("optimizer.momentum", "SGD momentum", FITTING),
    k("optimizer.adam_beta1", "Adam first-moment decay", FITTING),
    k("optimizer.adam_beta2", "Adam second-moment decay", FITTING),
    k("optimizer.adam_epsilon", "Adam denominator epsilon", FITTING),
    k("optimizer.max_grad_norm", "global gradient-norm clip; 0 disables", FITTING),
    k("schedule.tau_ab", "load-std threshold for phase A to B", FITTING),
    k("schedule.tau_bc", "load-std threshold for phase B to C", FITTING),
    k("schedule.ema_decay", "decay of the running load std", FITTING),
    k("training.demo_direction", "demographic specialization term: minimize | maximize", FITTING),
    k("evaluation.split", "split scored by `evaluate`: train | dev | test", &["evaluate"]),
    k("evaluation.clip", "clip predictions to the rating scale", &["train", "evaluate", "blend-train"]),
    k("evaluation.n_boot", "bootstrap replicates for subgroup intervals", &["evaluate"]),
    k("analysis.split", "split whose routing is analyzed: train | dev | test", &["analyze-experts"]),
    k("analysis.ridge_penalty", "ridge penalty of the cross-group map", &["analyze-experts"]),
    k("synthesis.template", "prompt template name", SYNTH),
    k("synthesis.templates_dir", "directory of <template>.txt overrides", SYNTH),
    k("synthesis.strategy", "half_x | one_x | fill | cluster", SYNTH),
    k("synthesis.max_per_instance", "fill target; observed maximum when unset", SYNTH),
    k("synthesis.clusters", "k-means clusters of the cluster strategy", SYNTH),
    k("synthesis.representatives", "representative annotators (cluster strategy)", SYNTH),
    k("synthesis.disagreers", "disagreeing annotators (cluster strategy)", SYNTH),
    k("synthesis.per_instance", "fixed per-instance quota (cluster strategy)", SYNTH),
    k("synthesis.max_iter", "k-means iteration cap (cluster strategy)", SYNTH),
    k("synthesis.temperature", "decoding temperature", SYNTH),
    k("synthesis.max_tokens", "decoding token limit", SYNTH),
    k("synthesis.max_attempts", "attempts per request", SYNTH),
    k("synthesis.base_delay_ms", "first retry backoff", SYNTH),
    k("synthesis.max_delay_ms", "backoff cap", SYNTH),
    k("synthesis.parallelism", "concurrent provider calls", SYNTH),
    k("synthesis.cache_dir", "response cache directory; in-memory when unset", SYNTH),
    k("synthesis.alignment_mode", "group_mean | individual", SYNTH),
    k("synthesis.max_failure_rate", "failed share of requests tolerated before exit code 3", SYNTH),
    k("provider.kind", "stub (offline) | openai (chat-completions API)", SYNTH),
    k("provider.endpoint", "chat-completions URL", SYNTH),
    k("provider.model", "model name sent to the provider", SYNTH),
    k("provider.api_key_env", "environment variable holding the API key", SYNTH),
    k("provider.requests_per_minute", "client-side rate limit; 0 disables", SYNTH),
    k("provider.timeout_secs", "per-request timeout", SYNTH),
    k("blend.strategy", "pt_ft | unweighted | weighted", BLEND),
    k("blend.clusters", "persona clusters for trustworthiness and prevalence", BLEND),
    k("blend.w_min", "lower weight clip", BLEND),
    k("blend.w_max", "upper weight clip", BLEND),
    k("blend.epsilon", "additive epsilon of the alignment score", BLEND),
    k("blend.trust_floor", "lower bound on cluster trustworthiness", BLEND),
    k("blend.pretrain_epochs", "synthetic-only epochs (pt_ft)", BLEND),
    k("blend.finetune_epochs", "real-only epochs (pt_ft)", BLEND),
    k("report.runs", "run directories to collate", &["report"]),
];

pub fn keys_for(command: &str) -> impl Iterator<Item = &'static KeySpec> + '_ {
    KEYS.iter().filter(move |s| s.commands.contains(&command))
}

/// Text appended to a subcommand's `--help`.
pub fn keys_help(command: &str) -> String {
    let mut out = String::from("Configuration keys (set in --config or with --set KEY=VALUE):\n");
    let width = keys_for(command).map(|s| s.key.len()).max().unwrap_or(0);
    for s in keys_for(command) {
        out.push_str(&format!("  {:width$}  {}\n", s.key, s.help));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("dissent-out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub schema: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub profiles: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub text_dim: usize,
    pub split: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub reference_checkpoint: Option<PathBuf>,
    pub synthetic: Option<PathBuf>,
    pub persona_profiles: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            schema: None,
            annotations: None,
            profiles: None,
            embeddings: None,
            text_dim: 64,
            split: None,
            checkpoint: None,
            reference_checkpoint: None,
            synthetic: None,
            persona_profiles: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub fractions: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { fractions: [0.8, 0.1, 0.1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatisticsConfig {
    pub alpha_metric: AlphaMetric,
    pub entropy_base: f64,
    pub ridge_penalty: f64,
}

impl Default for StatisticsConfig {
    fn default() -> Self {
        Self { alpha_metric: AlphaMetric::Interval, entropy_base: std::f64::consts::E, ridge_penalty: 1.0 }
    }
}

/// Model architecture without `top_k`, which comes from `hyper.topk_experts`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_experts: Option<usize>,
    pub annotator_dim: usize,
    pub demographic_dim: usize,
    pub expert_hidden: usize,
    pub expert_output: usize,
    pub activation: Activation,
    pub mixing: MixingMode,
    pub init_mean_scale: f64,
    pub init_log_variance: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            n_experts: m.n_experts,
            annotator_dim: m.annotator_dim,
            demographic_dim: m.demographic_dim,
            expert_hidden: m.expert_hidden,
            expert_output: m.expert_output,
            activation: m.activation,
            mixing: m.mixing,
            init_mean_scale: m.init_mean_scale,
            init_log_variance: m.init_log_variance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub max_grad_norm: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let o = dissent_core::training::OptimizerConfig::default();
        Self {
            kind: o.kind,
            max_epochs: o.max_epochs,
            patience: o.patience,
            batch_size: o.batch_size,
            momentum: o.momentum,
            adam_beta1: o.adam_beta1,
            adam_beta2: o.adam_beta2,
            adam_epsilon: o.adam_epsilon,
            max_grad_norm: o.max_grad_norm.unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub tau_ab: f64,
    pub tau_bc: f64,
    pub ema_decay: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { tau_ab: DEFAULT_TAU_AB, tau_bc: DEFAULT_TAU_BC, ema_decay: DEFAULT_EMA_DECAY }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub demo_direction: DemoDirection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub split: Split,
    pub clip: bool,
    pub n_boot: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { split: Split::Test, clip: true, n_boot: dissent_core::evaluation::DEFAULT_N_BOOT }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub split: Split,
    pub ridge_penalty: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self { split: Split::Test, ridge_penalty: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    HalfX,
    OneX,
    Fill,
    Cluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSection {
    pub template: String,
    pub templates_dir: Option<PathBuf>,
    pub strategy: StrategyName,
    pub max_per_instance: Option<usize>,
    pub clusters: usize,
    pub representatives: usize,
    pub disagreers: usize,
    pub per_instance: Option<usize>,
    pub max_iter: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_attempts: usize,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub parallelism: usize,
    pub cache_dir: Option<PathBuf>,
    pub alignment_mode: AlignmentMode,
    pub max_failure_rate: f64,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        let c = dissent_core::synthesis::ClusterParams::default();
        let o = dissent_core::synthesis::GenerationOptions::default();
        Self {
            template: TemplateId::Offensiveness.name().to_string(),
            templates_dir: None,
            strategy: StrategyName::OneX,
            max_per_instance: None,
            clusters: c.clusters,
            representatives: c.representatives,
            disagreers: c.disagreers,
            per_instance: c.per_instance,
            max_iter: c.max_iter,
            temperature: o.params.temperature,
            max_tokens: o.params.max_tokens,
            max_attempts: o.retry.max_attempts,
            base_delay_ms: o.retry.base_delay_ms,
            max_delay_ms: o.retry.max_delay_ms,
            parallelism: o.parallelism,
            cache_dir: None,
            alignment_mode: AlignmentMode::GroupMean,
            max_failure_rate: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Stub,
    Openai,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: String,
    pub requests_per_minute: u32,
    pub timeout_secs: u64,
}

impl Default for ProviderSection {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Stub,
            endpoint: None,
            model: None,
            api_key_env: "DISSENT_API_KEY".into(),
            requests_per_minute: 0,
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendName {
    PtFt,
    Unweighted,
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlendSection {
    pub strategy: BlendName,
    pub clusters: usize,
    pub w_min: f64,
    pub w_max: f64,
    pub epsilon: f64,
    pub trust_floor: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
}

impl Default for BlendSection {
    fn default() -> Self {
        use dissent_core::blending as b;
        Self {
            strategy: BlendName::Weighted,
            clusters: b::DEFAULT_CLUSTERS,
            w_min: b::DEFAULT_W_MIN,
            w_max: b::DEFAULT_W_MAX,
            epsilon: b::DEFAULT_EPSILON_A,
            trust_floor: b::DEFAULT_TRUST_FLOOR,
            pretrain_epochs: 20,
            finetune_epochs: 20,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub runs: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub preset: Option<String>,
    pub output: OutputConfig,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub statistics: StatisticsConfig,
    pub model: ModelSection,
    pub hyper: Option<HyperParameters>,
    pub optimizer: OptimizerSection,
    pub schedule: ScheduleSection,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
    pub analysis: AnalysisSection,
    pub synthesis: SynthesisSection,
    pub provider: ProviderSection,
    pub blend: BlendSection,
    pub report: ReportSection,
}

impl Config {
    pub fn hyper(&self) -> &HyperParameters {
        self.hyper.as_ref().expect("validated configs that fit models carry hyperparameters")
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_experts: m.n_experts,
            top_k: self.hyper.as_ref().map_or(ModelConfig::default().top_k, |h| h.topk_experts),
            annotator_dim: m.annotator_dim,
            demographic_dim: m.demographic_dim,
            expert_hidden: m.expert_hidden,
            expert_output: m.expert_output,
            activation: m.activation,
            mixing: m.mixing,
            init_mean_scale: m.init_mean_scale,
            init_log_variance: m.init_log_variance,
        }
    }
}

/// Command-line layer: generic `KEY=VALUE` overrides plus the dedicated flags.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub set: Vec<String>,
}

/// A resolved configuration and the merged table it came from.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: Config,
    pub table: Table,
}

fn merge(base: &mut Table, over: Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

fn set_path(table: &mut Table, path: &str, value: Value) -> std::result::Result<(), String> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| format!("{path}: empty key"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| format!("{path}: '{p}' is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn remove_path(table: &mut Table, path: &str) {
    match path.split_once('.') {
        None => {
            table.remove(path);
        }
        Some((head, rest)) => {
            if let Some(Value::Table(t)) = table.get_mut(head) {
                remove_path(t, rest);
            }
        }
    }
}

/// Parses the right-hand side of `--set`; bare words become strings.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn leaves(table: &Table, prefix: &str, out: &mut Vec<(String, Value)>) {
    for (key, value) in table {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match value {
            Value::Table(t) if !KEYS.iter().any(|s| s.key == path) => leaves(t, &path, out),
            v => out.push((path, v.clone())),
        }
    }
}

fn lookup<'a>(table: &'a Table, path: &str) -> Option<&'a Value> {
    let mut parts = path.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn hyper_names() -> Vec<String> {
    preset_table(PRESET_NAMES[0]).expect("bundled preset").keys().cloned().collect()
}

/// Resolves the configuration for `command`. Every problem found is reported
/// in one validation error, one line per offending key.
pub fn resolve(command: &str, file: Option<&std::path::Path>, overrides: &Overrides) -> Result<Resolved> {
    let mut issues: Vec<String> = Vec::new();
    let file_table = match file {
        None => Table::new(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<Table>().map_err(|e| CliError::validation(format!("config {}: {e}", p.display())))?
        }
    };
    let mut cli_table = Table::new();
    for item in &overrides.set {
        match item.split_once('=') {
            Some((key, raw)) => {
                if let Err(e) = set_path(&mut cli_table, key.trim(), parse_value(raw.trim())) {
                    issues.push(e);
                }
            }
            None => issues.push(format!("--set {item}: expected KEY=VALUE")),
        }
    }
    if let Some(p) = &overrides.preset {
        cli_table.insert("preset".into(), Value::String(p.clone()));
    }
    if let Some(s) = overrides.seed {
        let _ = set_path(&mut cli_table, "seed", Value::Integer(s as i64));
    }
    if let Some(o) = &overrides.out {
        let _ = set_path(&mut cli_table, "output.dir", Value::String(o.display().to_string()));
    }

    let preset_name = lookup(&cli_table, "preset").or_else(|| lookup(&file_table, "preset")).cloned();
    let mut table = Table::try_from(Config::default()).expect("defaults serialize");
    match preset_name {
        Some(Value::String(name)) => match preset_table(&name) {
            Some(hyper) => {
                table.insert("preset".into(), Value::String(name));
                table.insert("hyper".into(), Value::Table(hyper));
            }
            None => issues.push(format!("preset: unknown preset '{name}' (expected one of {})", PRESET_NAMES.join(", "))),
        },
        Some(other) => issues.push(format!("preset: expected a string, got {}", other.type_str())),
        None => {}
    }
    let base = table.clone();
    merge(&mut table, file_table);
    merge(&mut table, cli_table);

    let mut present = Vec::new();
    leaves(&table, "", &mut present);
    present.retain(|(key, _)| {
        let known = KEYS.iter().any(|s| s.key == key);
        if !known {
            issues.push(format!("{key}: unknown configuration key"));
            remove_path(&mut table, key);
        }
        known
    });

    // ill-typed keys are reported, then reset to their defaults so the remaining keys still get checked
    let config = match Config::deserialize(Value::Table(table.clone())) {
        Ok(c) => c,
        Err(whole) => {
            let bad = probe_keys(&present, &mut issues);
            for key in &bad {
                match lookup(&base, key) {
                    Some(v) => {
                        let _ = set_path(&mut table, key, v.clone());
                    }
                    None => remove_path(&mut table, key),
                }
            }
            match Config::deserialize(Value::Table(table.clone())) {
                Ok(c) if !bad.is_empty() => c,
                _ => {
                    issues.push(whole.to_string());
                    return Err(CliError::validation(issues.join("\n")));
                }
            }
        }
    };
    check(command, &config, &table, &mut issues);
    if issues.is_empty() {
        Ok(Resolved { config, table })
    } else {
        Err(CliError::validation(issues.join("\n")))
    }
}

/// Deserializes each key on its own to name every ill-typed value.
fn probe_keys(present: &[(String, Value)], issues: &mut Vec<String>) -> Vec<String> {
    let mut bad = Vec::new();
    let hyper_base = preset_table(PRESET_NAMES[0]).expect("bundled preset");
    for (key, value) in present {
        let result = if let Some(name) = key.strip_prefix("hyper.") {
            let mut h = hyper_base.clone();
            h.insert(name.to_string(), value.clone());
            HyperParameters::deserialize(Value::Table(h)).map(|_| ())
        } else {
            let mut t = Table::new();
            let _ = set_path(&mut t, key, value.clone());
            Config::deserialize(Value::Table(t)).map(|_| ())
        };
        if let Err(e) = result {
            let msg = e.to_string();
            let msg = msg.lines().rfind(|l| !l.trim().is_empty()).unwrap_or("invalid value").trim();
            issues.push(format!("{key}: {msg}"));
            bad.push(key.clone());
        }
    }
    bad
}

fn check(command: &str, c: &Config, table: &Table, issues: &mut Vec<String>) {
    let consumed = |key: &str| KEYS.iter().any(|s| s.key == key && s.commands.contains(&command));
    let mut bad = |key: &str, ok: bool, msg: &str| {
        if consumed(key) && !ok {
            issues.push(format!("{key}: {msg}"));
        }
    };
    let pos = |v: f64| v > 0.0 && v.is_finite();
    let unit = |v: f64| (0.0..1.0).contains(&v);

    for key in ["data.schema", "data.annotations", "data.profiles"] {
        bad(key, lookup(table, key).is_some(), "required");
    }
    if matches!(command, "evaluate" | "analyze-experts") {
        bad("data.checkpoint", c.data.checkpoint.is_some(), "required");
    }
    if command == "blend-train" {
        bad("data.synthetic", c.data.synthetic.is_some(), "required");
        bad("data.persona_profiles", c.data.persona_profiles.is_some(), "required");
        if c.blend.strategy == BlendName::Weighted {
            bad("data.reference_checkpoint", c.data.reference_checkpoint.is_some(), "required by the weighted strategy");
        }
    }
    if command == "report" {
        bad("report.runs", !c.report.runs.is_empty(), "at least one run directory is required");
    }

    let f = c.split.fractions;
    bad(
        "split.fractions",
        f.iter().all(|x| pos(*x)) && (f.iter().sum::<f64>() - 1.0).abs() < 1e-9,
        "three positive fractions summing to 1",
    );
    bad("data.text_dim", c.data.text_dim > 0, "must be positive");
    bad("statistics.entropy_base", pos(c.statistics.entropy_base) && c.statistics.entropy_base != 1.0, "must be positive and not 1");
    bad("statistics.ridge_penalty", pos(c.statistics.ridge_penalty), "must be positive");

    let m = &c.model;
    bad("model.n_experts", m.n_experts != Some(0), "must be positive");
    for (key, v) in [
        ("model.annotator_dim", m.annotator_dim),
        ("model.demographic_dim", m.demographic_dim),
        ("model.expert_hidden", m.expert_hidden),
        ("model.expert_output", m.expert_output),
    ] {
        bad(key, v > 0, "must be positive");
    }
    bad("model.init_mean_scale", m.init_mean_scale >= 0.0 && m.init_mean_scale.is_finite(), "must be finite and non-negative");
    bad("model.init_log_variance", m.init_log_variance.is_finite(), "must be finite");

    if consumed("hyper.topk_experts") {
        match &c.hyper {
            None => {
                for name in hyper_names() {
                    bad(&format!("hyper.{name}"), false, "required (choose a preset or set it)");
                }
            }
            Some(h) => {
                bad("hyper.learning_rate_gate", h.learning_rate_gate >= 0.0 && h.learning_rate_gate.is_finite(), "must be finite and non-negative");
                bad("hyper.learning_rate_main", pos(h.learning_rate_main), "must be positive");
                bad("hyper.topk_experts", h.topk_experts > 0, "must be positive");
                if let Some(e) = m.n_experts {
                    bad("hyper.topk_experts", h.topk_experts <= e, "must not exceed model.n_experts");
                }
                let t = Table::try_from(h).expect("hyperparameters serialize");
                for (name, v) in &t {
                    if let Some(x) = v.as_float() {
                        if !name.starts_with("learning_rate") {
                            bad(&format!("hyper.{name}"), x >= 0.0 && x.is_finite(), "must be finite and non-negative");
                        }
                    }
                }
            }
        }
    }

    let o = &c.optimizer;
    bad("optimizer.max_epochs", o.max_epochs > 0, "must be positive");
    bad("optimizer.patience", o.patience > 0, "must be positive");
    bad("optimizer.batch_size", o.batch_size > 0, "must be positive");
    bad("optimizer.momentum", unit(o.momentum), "must lie in [0, 1)");
    bad("optimizer.adam_beta1", unit(o.adam_beta1), "must lie in [0, 1)");
    bad("optimizer.adam_beta2", unit(o.adam_beta2), "must lie in [0, 1)");
    bad("optimizer.adam_epsilon", pos(o.adam_epsilon), "must be positive");
    bad("optimizer.max_grad_norm", o.max_grad_norm >= 0.0 && o.max_grad_norm.is_finite(), "must be finite and non-negative");
    bad("schedule.tau_ab", pos(c.schedule.tau_ab), "must be positive");
    bad("schedule.tau_bc", pos(c.schedule.tau_bc), "must be positive");
    bad("schedule.ema_decay", unit(c.schedule.ema_decay), "must lie in [0, 1)");

    bad("evaluation.n_boot", c.evaluation.n_boot >= dissent_core::evaluation::MIN_N_BOOT, "must be at least 100");
    bad("analysis.ridge_penalty", pos(c.analysis.ridge_penalty), "must be positive");

    let s = &c.synthesis;
    let known_template = TemplateId::from_name(&s.template).is_some();
    bad("synthesis.template", known_template, "unknown template");
    bad("synthesis.max_per_instance", s.max_per_instance != Some(0), "must be positive");
    bad("synthesis.clusters", s.clusters > 0, "must be positive");
    bad("synthesis.max_iter", s.max_iter > 0, "must be positive");
    bad("synthesis.per_instance", s.per_instance != Some(0), "must be positive");
    bad("synthesis.temperature", s.temperature >= 0.0 && s.temperature.is_finite(), "must be finite and non-negative");
    bad("synthesis.max_tokens", s.max_tokens > 0, "must be positive");
    bad("synthesis.max_attempts", s.max_attempts > 0, "must be positive");
    bad("synthesis.parallelism", s.parallelism > 0, "must be positive");
    bad("synthesis.max_failure_rate", (0.0..=1.0).contains(&s.max_failure_rate), "must lie in [0, 1]");
    if c.provider.kind == ProviderKind::Openai {
        bad("provider.endpoint", c.provider.endpoint.is_some(), "required by the openai provider");
        bad("provider.model", c.provider.model.is_some(), "required by the openai provider");
    }
    bad("provider.timeout_secs", c.provider.timeout_secs > 0, "must be positive");

    let b = &c.blend;
    bad("blend.clusters", b.clusters > 0, "must be positive");
    bad("blend.w_min", pos(b.w_min), "must be positive");
    bad("blend.w_max", pos(b.w_max) && b.w_max >= b.w_min, "must be positive and at least blend.w_min");
    bad("blend.epsilon", pos(b.epsilon), "must be positive");
    bad("blend.trust_floor", pos(b.trust_floor), "must be positive");
}
