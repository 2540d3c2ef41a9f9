use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

use dissent_core::blending::{
    alignment_scores, blend_train, cluster_personas, weight_table, BlendPlan, GroupMeans, WeightBounds, WeightSummary,
    WeightTable,
};
use dissent_core::corpus::{
    parse_annotations, parse_profiles, split, AnnotationRecord, Corpus, CorpusError, CorpusSchema, CorpusStatistics,
    ProfileMap, RatingNormalizer, RatingScale, Split, SplitAssignment, StatisticsOptions,
};
use dissent_core::evaluation::{
    baseline_predict, compare_systems, error_density_correlation, group_counts, group_mae_with_bootstrap,
    prepare_predictions, seen_unseen_split_eval, BaselineKind, GroupReport, PredictionRecord, SystemSummary,
};
use dissent_core::model::{Model, TextEmbeddingStore};
use dissent_core::specialization::{
    cross_group_map, group_usage, routing_traces, score_rows, usage_heatmap_export, within_group_score, CrossGroupMap,
    HEATMAP_HEADER, SCORE_HEADER,
};
use dissent_core::synthesis::{
    alignment_report, build_persona_pool, generate, persona_profiles_jsonl, plan_generation, synthetic_jsonl,
    AlignmentReport, ClusterParams, DecodingParams, GenerationOptions, GenerationStrategy, Provider, ResponseCache,
    RetryPolicy, StubProvider, SynthesisError, TemplateStore,
};
use dissent_core::training::{prepare_eval, prepare_training, train, OptimizerConfig, TrainConfig, TrainingLog};

use crate::config::{BlendName, Config, ProviderKind, StrategyName};
use crate::error::{CliError, Result};
use crate::provider::HttpProvider;
use crate::run::Run;

pub fn dispatch(command: &str, cfg: &Config, run: &mut Run) -> Result<()> {
    match command {
        "ingest" => ingest(cfg, run),
        "stats" => stats(cfg, run),
        "split" => split_cmd(cfg, run),
        "train" => train_cmd(cfg, run),
        "evaluate" => evaluate(cfg, run),
        "analyze-experts" => analyze(cfg, run),
        "generate-synthetic" => generate_synthetic(cfg, run),
        "blend-train" => blend(cfg, run),
        "report" => report(cfg, run),
        other => Err(CliError::validation(format!("unknown command '{other}'"))),
    }
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| CliError::validation(format!("{key}: required")))
}

fn parse_schema(text: &str, path: &Path) -> Result<CorpusSchema> {
    Ok(match path.extension().and_then(|e| e.to_str()) {
        Some("json") => CorpusSchema::from_json_str(text)?,
        _ => CorpusSchema::from_toml_str(text)?,
    })
}

/// Ingestion with every input file digested into the manifest.
pub fn load_corpus(cfg: &Config, run: &mut Run) -> Result<Corpus> {
    let schema_path = required(&cfg.data.schema, "data.schema")?;
    let schema = parse_schema(&run.read("schema", schema_path)?, schema_path)?;
    let annotations = run.read("annotations", required(&cfg.data.annotations, "data.annotations")?)?;
    let profiles = run.read("profiles", required(&cfg.data.profiles, "data.profiles")?)?;
    let (records, texts) =
        parse_annotations(&annotations, &schema).map_err(|e| CliError::validation(format!("data.annotations: {e}")))?;
    let profiles = parse_profiles(&profiles, &schema).map_err(|e| CliError::validation(format!("data.profiles: {e}")))?;
    if let Some(r) = records.iter().find(|r| !profiles.contains_key(&r.annotator_id)) {
        return Err(CorpusError::MissingProfile(r.annotator_id.clone()).into());
    }
    let mut corpus = Corpus::new(schema, records, profiles);
    corpus.texts = texts;
    Ok(corpus)
}

fn load_split(cfg: &Config, run: &mut Run, corpus: &Corpus) -> Result<SplitAssignment> {
    let assignment = match &cfg.data.split {
        Some(path) => {
            let text = run.read("split", path)?;
            serde_json::from_str::<SplitAssignment>(&text)
                .map_err(|e| CliError::validation(format!("data.split: {}: {e}", path.display())))?
        }
        None => split(&corpus.records, cfg.seed, cfg.split.fractions)?,
    };
    if let Some(missing) = corpus.instance_ids().into_iter().find(|i| assignment.get(i).is_none()) {
        return Err(CliError::validation(format!("data.split: instance '{missing}' is not assigned to a split")));
    }
    Ok(assignment)
}

fn load_store(cfg: &Config, run: &mut Run, corpus: &Corpus) -> Result<TextEmbeddingStore> {
    match &cfg.data.embeddings {
        Some(path) => Ok(TextEmbeddingStore::parse(&run.read("embeddings", path)?)?),
        None if corpus.texts.is_empty() => {
            Err(CliError::validation("data.embeddings: required when annotations carry no inline text"))
        }
        None => {
            run.note(format!("text embeddings: hashed bag of words, dimension {}", cfg.data.text_dim));
            Ok(TextEmbeddingStore::hashed(cfg.data.text_dim, corpus.texts.iter().map(|(k, v)| (k.as_str(), v.as_str()))))
        }
    }
}

fn load_model(run: &mut Run, name: &str, path: &Path, schema: &CorpusSchema) -> Result<Model> {
    let model = Model::from_json(&run.read(name, path)?)?;
    model.check_schema(schema)?;
    Ok(model)
}

pub fn train_config(cfg: &Config, scale: &RatingScale) -> TrainConfig {
    let h = cfg.hyper();
    let o = &cfg.optimizer;
    let optimizer = OptimizerConfig {
        lr_gate: h.learning_rate_gate,
        lr_main: h.learning_rate_main,
        max_epochs: o.max_epochs,
        patience: o.patience,
        batch_size: o.batch_size,
        seed: cfg.seed,
        kind: o.kind,
        momentum: o.momentum,
        adam_beta1: o.adam_beta1,
        adam_beta2: o.adam_beta2,
        adam_epsilon: o.adam_epsilon,
        max_grad_norm: (o.max_grad_norm > 0.0).then_some(o.max_grad_norm),
    };
    let mut schedule = h.schedule();
    schedule.tau_ab = cfg.schedule.tau_ab;
    schedule.tau_bc = cfg.schedule.tau_bc;
    schedule.ema_decay = cfg.schedule.ema_decay;
    TrainConfig {
        optimizer,
        weights: h.loss_weights(),
        schedule,
        demo_direction: cfg.training.demo_direction,
        clip: cfg.evaluation.clip.then(|| scale.clone()),
    }
}

fn in_split(corpus: &Corpus, assignment: &SplitAssignment, which: Split) -> Vec<AnnotationRecord> {
    corpus.records_in(assignment, which).cloned().collect()
}

fn profile_lines(profiles: &ProfileMap) -> String {
    let mut out = String::new();
    for p in profiles.values() {
        let mut obj = serde_json::Map::new();
        obj.insert("annotator_id".into(), p.annotator_id.clone().into());
        for (k, v) in &p.attributes {
            obj.insert(k.clone(), v.clone().into());
        }
        out.push_str(&serde_json::Value::Object(obj).to_string());
        out.push('\n');
    }
    out
}

fn ingest(cfg: &Config, run: &mut Run) -> Result<()> {
    let corpus = load_corpus(cfg, run)?;
    let mut lines = String::new();
    let mut texted = BTreeSet::new();
    for r in &corpus.records {
        let mut v = serde_json::to_value(r).expect("record serializes");
        if let Some(t) = corpus.texts.get(&r.instance_id) {
            if texted.insert(r.instance_id.as_str()) {
                v["text"] = t.clone().into();
            }
        }
        lines.push_str(&v.to_string());
        lines.push('\n');
    }
    run.write("annotations.jsonl", lines.as_bytes())?;
    run.write("profiles.jsonl", profile_lines(&corpus.profiles).as_bytes())?;
    run.write_json(
        "corpus.json",
        &serde_json::json!({
            "dataset": corpus.schema.name,
            "schema_fingerprint": corpus.schema.fingerprint(),
            "n_instances": corpus.instance_ids().len(),
            "n_annotators": corpus.annotator_ids().len(),
            "n_profiles": corpus.profiles.len(),
            "n_annotations": corpus.records.len(),
            "n_instances_with_text": corpus.texts.len(),
        }),
    )?;
    Ok(())
}

fn stats(cfg: &Config, run: &mut Run) -> Result<()> {
    let corpus = load_corpus(cfg, run)?;
    let s = &cfg.statistics;
    let options = StatisticsOptions { alpha_metric: s.alpha_metric, entropy_base: s.entropy_base, ridge_penalty: s.ridge_penalty };
    let st = CorpusStatistics::compute(&corpus, &options)?;
    run.write_json("stats.json", &st)?;
    run.write_csv("stats.csv", &CorpusStatistics::CSV_HEADER, &[st.csv_row()])?;
    let rows: Vec<Vec<String>> = st.demographic_signal.iter().map(|(c, v)| vec![c.clone(), format!("{v:.6}")]).collect();
    run.write_csv("demographic_signal.csv", &["category", "signal"], &rows)?;
    Ok(())
}

fn split_cmd(cfg: &Config, run: &mut Run) -> Result<()> {
    let corpus = load_corpus(cfg, run)?;
    let assignment = split(&corpus.records, cfg.seed, cfg.split.fractions)?;
    for which in [Split::Train, Split::Dev, Split::Test] {
        run.count(&format!("{which:?}_instances").to_lowercase(), assignment.count(which) as f64);
    }
    run.count("annotator_overlap_pct", assignment.annotator_overlap_pct);
    run.write_json("split.json", &assignment)?;
    Ok(())
}

fn train_cmd(cfg: &Config, run: &mut Run) -> Result<()> {
    let corpus = load_corpus(cfg, run)?;
    let assignment = load_split(cfg, run, &corpus)?;
    let store = load_store(cfg, run, &corpus)?;
    let train_recs = in_split(&corpus, &assignment, Split::Train);
    let dev_recs = in_split(&corpus, &assignment, Split::Dev);
    if train_recs.is_empty() {
        return Err(CliError::validation("train split has no annotations"));
    }
    let normalizer = RatingNormalizer::fit(train_recs.iter().map(|r| r.rating))?;
    let model = Model::new(
        &cfg.model_config(),
        &corpus.schema,
        train_recs.iter().map(|r| r.annotator_id.as_str()),
        store.dim(),
        normalizer,
        cfg.seed,
    )?;
    let train_set = prepare_training(&model, &store, &train_recs, &corpus.profiles)?;
    let dev_set = prepare_eval(&model, &store, &dev_recs, &corpus.profiles)?;
    let out = train(model, &store, &train_set, &dev_set, &train_config(cfg, &corpus.schema.rating_scale))?;
    run.count("train_annotations", train_set.len() as f64);
    run.count("dev_annotations", dev_set.len() as f64);
    run.count("epochs", out.log.epochs.len() as f64);
    run.timing("epoch_seconds", out.epoch_seconds);
    run.write("model.json", out.model.to_json().as_bytes())?;
    run.write_json("training_log.json", &out.log)?;
    run.write_json("split.json", &assignment)?;
    Ok(())
}

fn predict_all(model: &Model, store: &TextEmbeddingStore, records: &[AnnotationRecord], profiles: &ProfileMap) -> Result<Vec<PredictionRecord>> {
    records
        .iter()
        .map(|r| {
            let profile = profiles.get(&r.annotator_id).ok_or_else(|| CorpusError::MissingProfile(r.annotator_id.clone()))?;
            let p = model.predict(store, &r.instance_id, &r.annotator_id, profile)?;
            Ok(PredictionRecord::new(&r.instance_id, &r.annotator_id, p, r.rating))
        })
        .collect()
}

const COMPARISON_HEADER: [&str; 10] =
    ["system", "reference", "category", "subgroup", "n", "mae_diff", "ci_low", "ci_high", "p_value", "verdict"];

fn evaluate(cfg: &Config, run: &mut Run) -> Result<()> {
    let corpus = load_corpus(cfg, run)?;
    let assignment = load_split(cfg, run, &corpus)?;
    let store = load_store(cfg, run, &corpus)?;
    let model = load_model(run, "checkpoint", required(&cfg.data.checkpoint, "data.checkpoint")?, &corpus.schema)?;
    let (schema, scale, clip) = (&corpus.schema, &corpus.schema.rating_scale, cfg.evaluation.clip);
    let targets = in_split(&corpus, &assignment, cfg.evaluation.split);
    if targets.is_empty() {
        return Err(CliError::validation(format!("evaluation.split: the {:?} split has no annotations", cfg.evaluation.split)));
    }
    let train_recs = in_split(&corpus, &assignment, Split::Train);

    let model_preds = prepare_predictions(predict_all(&model, &store, &targets, &corpus.profiles)?, scale, clip)?;
    let mean = prepare_predictions(baseline_predict(BaselineKind::Mean, &train_recs, &targets, scale, cfg.seed)?, scale, clip)?;
    let random = baseline_predict(BaselineKind::Random, &train_recs, &targets, scale, cfg.seed)?;
    let systems = [("dem_moe", &model_preds), ("mean", &mean), ("random", &random)];

    let mut summary = Vec::new();
    let mut prediction_rows = Vec::new();
    let mut reports: Vec<GroupReport> = Vec::new();
    let mut comparison_rows = Vec::new();
    for (name, preds) in systems {
        summary.push(SystemSummary::compute(name, &schema.name, preds)?.csv_row());
        for p in preds.iter() {
            prediction_rows.push(vec![
                name.to_string(),
                p.instance_id.clone(),
                p.annotator_id.clone(),
                p.predicted.to_string(),
                p.actual.to_string(),
            ]);
        }
        let mut report = group_mae_with_bootstrap(name, preds, &corpus.profiles, schema, cfg.evaluation.n_boot, cfg.seed)?;
        if name != "mean" {
            let cmp = compare_systems(preds, &mean, "mean", &corpus.profiles, schema, cfg.evaluation.n_boot, cfg.seed)?;
            for s in &cmp.subgroups {
                comparison_rows.push(vec![
                    name.to_string(),
                    cmp.reference.clone(),
                    s.category.clone(),
                    s.value.clone(),
                    s.n.to_string(),
                    format!("{:.6}", s.mae_diff),
                    format!("{:.6}", s.ci_low),
                    format!("{:.6}", s.ci_high),
                    format!("{:.6}", s.p_value),
                    format!("{:?}", s.verdict).to_lowercase(),
                ]);
            }
            report.comparisons.push(cmp);
        }
        reports.push(report);
    }
    run.write_csv("summary.csv", &SystemSummary::CSV_HEADER, &summary)?;
    run.write_csv("predictions.csv", &["system", "instance_id", "annotator_id", "predicted", "actual"], &prediction_rows)?;
    let group_rows: Vec<Vec<String>> = reports.iter().flat_map(|r| r.csv_rows()).collect();
    run.write_csv("groups.csv", &GroupReport::CSV_HEADER, &group_rows)?;
    let plot_rows: Vec<Vec<String>> = reports.iter().flat_map(|r| r.plot_rows()).collect();
    run.write_csv("groups_plot.csv", &GroupReport::PLOT_HEADER, &plot_rows)?;
    run.write_csv("comparisons.csv", &COMPARISON_HEADER, &comparison_rows)?;

    let train_annotators: BTreeSet<String> = model.annotators.keys().cloned().collect();
    let distribution = seen_unseen_split_eval(&model_preds, &train_annotators, scale)?;
    run.write_json("distribution.json", &distribution)?;

    let counts = group_counts(train_recs.iter().map(|r| r.annotator_id.as_str()), &corpus.profiles, schema)?;
    let density = match error_density_correlation(&reports[0], &counts) {
        Ok(c) => serde_json::to_value(c).expect("correlation serializes"),
        Err(e) => {
            run.note(format!("error-density correlation unavailable: {e}"));
            serde_json::Value::Null
        }
    };
    run.write_json("error_density.json", &density)?;
    run.count("evaluated_annotations", targets.len() as f64);
    Ok(())
}

fn analyze(cfg: &Config, run: &mut Run) -> Result<()> {
    let corpus = load_corpus(cfg, run)?;
    let assignment = load_split(cfg, run, &corpus)?;
    let store = load_store(cfg, run, &corpus)?;
    let model = load_model(run, "checkpoint", required(&cfg.data.checkpoint, "data.checkpoint")?, &corpus.schema)?;
    let records = in_split(&corpus, &assignment, cfg.analysis.split);
    if records.is_empty() {
        return Err(CliError::validation(format!("analysis.split: the {:?} split has no annotations", cfg.analysis.split)));
    }
    let traces = routing_traces(&model, &store, &records, &corpus.profiles)?;
    let usage = group_usage(&traces, &corpus.profiles, &corpus.schema)?;
    let scores: Vec<_> = usage.iter().map(within_group_score).collect();
    run.write_csv("specialization.csv", &SCORE_HEADER, &score_rows(&scores))?;
    let heat: Vec<Vec<String>> = usage.iter().flat_map(usage_heatmap_export).collect();
    run.write_csv("usage_heatmap.csv", &HEATMAP_HEADER, &heat)?;
    let map = cross_group_map(&traces, &corpus.profiles, &corpus.schema, cfg.analysis.ridge_penalty)?;
    run.write_csv("cross_group.csv", &CrossGroupMap::HEADER, &map.rows())?;
    run.write_json("usage.json", &usage)?;
    Ok(())
}

fn provider(cfg: &Config) -> Result<Box<dyn Provider>> {
    let p = &cfg.provider;
    match p.kind {
        ProviderKind::Stub => Ok(Box::new(StubProvider::new())),
        ProviderKind::Openai => {
            let key = std::env::var(&p.api_key_env)
                .map_err(|_| CliError::provider(format!("environment variable {} is not set", p.api_key_env)))?;
            Ok(Box::new(HttpProvider::new(
                p.endpoint.as_deref().expect("validated"),
                p.model.as_deref().expect("validated"),
                Some(key),
                Duration::from_secs(p.timeout_secs),
                p.requests_per_minute,
            )))
        }
    }
}

fn generate_synthetic(cfg: &Config, run: &mut Run) -> Result<()> {
    let corpus = load_corpus(cfg, run)?;
    let assignment = load_split(cfg, run, &corpus)?;
    // personas and plans see training instances only
    let records = in_split(&corpus, &assignment, Split::Train);
    if records.is_empty() {
        return Err(CliError::validation("train split has no annotations"));
    }
    let annotators: BTreeSet<&str> = records.iter().map(|r| r.annotator_id.as_str()).collect();
    let profiles: ProfileMap =
        corpus.profiles.iter().filter(|(id, _)| annotators.contains(id.as_str())).map(|(k, v)| (k.clone(), v.clone())).collect();
    let texts = corpus.texts.iter().filter(|(id, _)| assignment.get(id) == Some(Split::Train)).map(|(k, v)| (k.clone(), v.clone())).collect();
    let mut train_corpus = Corpus::new(corpus.schema.clone(), records, profiles);
    train_corpus.texts = texts;
    let schema = &train_corpus.schema;

    let s = &cfg.synthesis;
    let pool = build_persona_pool(&train_corpus.profiles, schema)?;
    let strategy = match s.strategy {
        StrategyName::HalfX => GenerationStrategy::HalfX,
        StrategyName::OneX => GenerationStrategy::OneX,
        StrategyName::Fill => GenerationStrategy::Fill { max_per_instance: s.max_per_instance },
        StrategyName::Cluster => GenerationStrategy::Cluster(ClusterParams {
            clusters: s.clusters,
            representatives: s.representatives,
            disagreers: s.disagreers,
            per_instance: s.per_instance,
            max_iter: s.max_iter,
        }),
    };
    let plan = plan_generation(&train_corpus, &pool, strategy, cfg.seed)?;
    let mut templates = TemplateStore::builtin();
    if let Some(dir) = &s.templates_dir {
        let n = templates.load_overrides(dir)?;
        run.note(format!("{n} template override(s) loaded from {}", dir.display()));
    }
    let template = templates.get(&s.template)?.clone();
    let (lo, hi) = template.format.bounds();
    if !(schema.rating_scale.contains(lo as f64) && schema.rating_scale.contains(hi as f64)) {
        return Err(CliError::validation(format!(
            "synthesis.template: '{}' answers on {lo}..{hi}, outside the corpus rating scale {}..{}",
            s.template, schema.rating_scale.min, schema.rating_scale.max
        )));
    }
    let provider = provider(cfg)?;
    let cache = match &s.cache_dir {
        Some(dir) => ResponseCache::on_disk(dir)?,
        None => ResponseCache::in_memory(),
    };
    let options = GenerationOptions {
        params: DecodingParams { temperature: s.temperature, max_tokens: s.max_tokens },
        retry: RetryPolicy { max_attempts: s.max_attempts, base_delay_ms: s.base_delay_ms, max_delay_ms: s.max_delay_ms },
        parallelism: s.parallelism,
    };
    let outcome = generate(&plan, &template, &pool, &train_corpus.texts, provider.as_ref(), &cache, &options)?;

    run.write("synthetic.jsonl", synthetic_jsonl(&outcome.annotations).as_bytes())?;
    run.write("personas.jsonl", persona_profiles_jsonl(&pool).as_bytes())?;
    run.write_json("plan.json", &plan)?;
    let mut failures = String::new();
    for f in &outcome.failures {
        failures.push_str(&serde_json::to_string(f).expect("failure serializes"));
        failures.push('\n');
    }
    run.write("failures.jsonl", failures.as_bytes())?;
    run.count("personas", pool.len() as f64);
    run.count("planned_requests", plan.total_requests() as f64);
    run.count("annotations", outcome.annotations.len() as f64);
    run.count("failures", outcome.failures.len() as f64);
    run.count("requests_issued", outcome.requests_issued as f64);
    run.count("cache_hits", outcome.cache_hits as f64);

    let synthetic: Vec<AnnotationRecord> = outcome.annotations.iter().map(|a| a.record()).collect();
    let persona_profiles: ProfileMap = pool.iter().map(|p| (p.persona_id.clone(), p.profile())).collect();
    match alignment_report(&provider.id(), &synthetic, &persona_profiles, &train_corpus.records, &train_corpus.profiles, schema, s.alignment_mode) {
        Ok(report) => {
            run.write_csv("alignment.csv", &AlignmentReport::CSV_HEADER, &report.csv_rows())?;
            run.write_json("alignment.json", &report)?;
        }
        Err(SynthesisError::EmptyOverlap) => run.note("alignment skipped: no synthetic rating shares a group with human ratings"),
        Err(e) => return Err(e.into()),
    }

    let planned = plan.total_requests();
    if planned > 0 {
        let rate = outcome.failures.len() as f64 / planned as f64;
        if rate > s.max_failure_rate {
            return Err(CliError::provider(format!(
                "{} of {planned} requests failed ({:.1}% > synthesis.max_failure_rate); see failures.jsonl",
                outcome.failures.len(),
                100.0 * rate
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct StageLog<'a> {
    name: &'a str,
    n_samples: usize,
    log: &'a TrainingLog,
}

#[derive(Serialize)]
struct BlendLog<'a> {
    strategy: &'a str,
    n_real: usize,
    n_synthetic: usize,
    stages: Vec<StageLog<'a>>,
    weight_summary: Option<WeightSummary>,
}

fn blend(cfg: &Config, run: &mut Run) -> Result<()> {
    let corpus = load_corpus(cfg, run)?;
    let assignment = load_split(cfg, run, &corpus)?;
    let store = load_store(cfg, run, &corpus)?;
    let schema = &corpus.schema;
    let synth_text = run.read("synthetic", required(&cfg.data.synthetic, "data.synthetic")?)?;
    let (mut synthetic, _) = parse_annotations(&synth_text, schema)
        .map_err(|e| CliError::validation(format!("data.synthetic: {e}")))?;
    synthetic.iter_mut().for_each(|r| r.is_synthetic = true);
    let persona_text = run.read("persona_profiles", required(&cfg.data.persona_profiles, "data.persona_profiles")?)?;
    let persona_profiles =
        parse_profiles(&persona_text, schema).map_err(|e| CliError::validation(format!("data.persona_profiles: {e}")))?;
    if let Some(r) = synthetic.iter().find(|r| !persona_profiles.contains_key(&r.annotator_id)) {
        return Err(CliError::validation(format!("data.synthetic: persona '{}' has no profile", r.annotator_id)));
    }
    let train_recs = in_split(&corpus, &assignment, Split::Train);
    let dev_recs = in_split(&corpus, &assignment, Split::Dev);
    if train_recs.is_empty() {
        return Err(CliError::validation("train split has no annotations"));
    }
    let normalizer = RatingNormalizer::fit(train_recs.iter().map(|r| r.rating))?;
    let annotators = train_recs.iter().chain(&synthetic).map(|r| r.annotator_id.as_str());
    let model = Model::new(&cfg.model_config(), schema, annotators, store.dim(), normalizer, cfg.seed)?;
    let real = prepare_training(&model, &store, &train_recs, &corpus.profiles)?;
    let synth_set = prepare_training(&model, &store, &synthetic, &persona_profiles)?;
    let dev = prepare_eval(&model, &store, &dev_recs, &corpus.profiles)?;

    let b = &cfg.blend;
    let plan = match b.strategy {
        BlendName::PtFt => BlendPlan::pt_ft(b.pretrain_epochs, b.finetune_epochs),
        BlendName::Unweighted => BlendPlan::unweighted(),
        BlendName::Weighted => {
            let table = weights(cfg, run, &corpus, &train_recs, &dev_recs, &store, &synthetic, &persona_profiles)?;
            run.write_csv("weights.csv", &WeightTable::CSV_HEADER, &table.csv_rows())?;
            BlendPlan::weighted(table)
        }
    };
    let config = train_config(cfg, &schema.rating_scale);
    let outcome = blend_train(model, &store, &real, &synth_set, &synthetic, &dev, &plan, &config)?;
    run.write("model.json", outcome.model.to_json().as_bytes())?;
    let log = BlendLog {
        strategy: plan.strategy.name(),
        n_real: real.len(),
        n_synthetic: synth_set.len(),
        stages: outcome.stages.iter().map(|s| StageLog { name: s.name, n_samples: s.n_samples, log: &s.log }).collect(),
        weight_summary: outcome.weight_summary,
    };
    run.write_json("blend_log.json", &log)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn weights(
    cfg: &Config,
    run: &mut Run,
    corpus: &Corpus,
    train_recs: &[AnnotationRecord],
    dev_recs: &[AnnotationRecord],
    store: &TextEmbeddingStore,
    synthetic: &[AnnotationRecord],
    persona_profiles: &ProfileMap,
) -> Result<WeightTable> {
    let (b, schema) = (&cfg.blend, &corpus.schema);
    let means = GroupMeans::new(train_recs, &corpus.profiles, schema);
    let alignment = alignment_scores(synthetic, persona_profiles, &means, schema, b.epsilon)?;
    let mut clustering = cluster_personas(train_recs, &corpus.profiles, schema, b.clusters, cfg.seed)?;
    let path = required(&cfg.data.reference_checkpoint, "data.reference_checkpoint")?;
    let reference = load_model(run, "reference_checkpoint", path, schema)?;
    let trust_recs = if dev_recs.is_empty() {
        run.note("trustworthiness measured on the train split: dev split is empty");
        train_recs
    } else {
        dev_recs
    };
    let preds = prepare_predictions(predict_all(&reference, store, trust_recs, &corpus.profiles)?, &schema.rating_scale, cfg.evaluation.clip)?;
    clustering.set_trustworthiness(&preds, b.trust_floor);
    run.write_json("clusters.json", &clustering.clusters)?;
    Ok(weight_table(synthetic, persona_profiles, &alignment, &clustering, schema, WeightBounds { min: b.w_min, max: b.w_max })?)
}

type Table = (Vec<String>, Vec<Vec<String>>);

fn read_csv(path: &Path) -> Result<Option<Table>> {
    if !path.exists() {
        return Ok(None);
    }
    let err = |e: csv::Error| CliError::validation(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let header = r.headers().map_err(err)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(err)?.iter().map(str::to_string).collect());
    }
    Ok(Some((header, rows)))
}

fn markdown_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = format!("| {} |\n|{}\n", header.join(" | "), " --- |".repeat(header.len()));
    for r in rows {
        out.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    out
}

/// Artifact tables collated across runs, keyed by file name.
const COLLATED: [(&str, &str); 5] = [
    ("summary.csv", "Systems"),
    ("stats.csv", "Dataset statistics"),
    ("specialization.csv", "Expert specialization"),
    ("alignment.csv", "Synthetic alignment"),
    ("comparisons.csv", "Subgroup comparisons"),
];

fn report(cfg: &Config, run: &mut Run) -> Result<()> {
    let mut runs = Vec::new();
    let mut tables: BTreeMap<&str, (Vec<String>, Vec<Vec<String>>)> = BTreeMap::new();
    for (i, dir) in cfg.report.runs.iter().enumerate() {
        let label = dir.display().to_string();
        let manifest: serde_json::Value = serde_json::from_str(&run.read(&format!("run{i}.manifest"), &dir.join(crate::run::MANIFEST))?)
            .map_err(|e| CliError::validation(format!("report.runs: {}: {e}", dir.display())))?;
        let field = |k: &str| manifest.get(k).and_then(|v| v.as_str()).unwrap_or("").to_string();
        runs.push(vec![label.clone(), field("command"), field("status"), field("artifact_version")]);
        for (file, _) in COLLATED {
            if let Some((header, rows)) = read_csv(&dir.join(file))? {
                let entry = tables.entry(file).or_insert_with(|| (std::iter::once("run".to_string()).chain(header.clone()).collect(), Vec::new()));
                if entry.0[1..] != header[..] {
                    return Err(CliError::validation(format!("{}: columns differ from other runs", dir.join(file).display())));
                }
                entry.1.extend(rows.into_iter().map(|r| std::iter::once(label.clone()).chain(r).collect()));
            }
        }
    }
    let run_header: Vec<String> = ["run", "command", "status", "artifact_version"].map(String::from).to_vec();
    run.write_csv("runs.csv", &run_header, &runs)?;
    let mut md = String::from("# Run report\n\n## Runs\n\n");
    md.push_str(&markdown_table(&run_header, &runs));
    for (file, title) in COLLATED {
        if let Some((header, rows)) = tables.get(file) {
            run.write_csv(file, header, rows)?;
            md.push_str(&format!("\n## {title}\n\n"));
            md.push_str(&markdown_table(header, rows));
        }
    }
    run.write("report.md", md.as_bytes())?;
    Ok(())
}
