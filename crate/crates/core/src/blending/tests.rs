use super::*;
use crate::corpus::AnnotatorProfile;
use crate::model::{ModelConfig, Noise};
use crate::training::objective::tests::fixture;
use crate::training::{total_loss, DemoDirection, LossWeights, OptimizerConfig, Phase, PhaseSchedule};
use proptest::prelude::*;

fn schema() -> CorpusSchema {
    crate::synthesis::tests::schema()
}

fn profiles(rows: &[(&str, &str, &str)]) -> ProfileMap {
    rows.iter()
        .map(|(id, g, a)| (id.to_string(), AnnotatorProfile::new(*id, [("gender", *g), ("age", *a)])))
        .collect()
}

#[test]
fn weight_examples() {
    let b = WeightBounds::default();
    assert!((weight(2.0, 0.5, 0.25, b).unwrap().weight - 16.0).abs() < 1e-12);
    assert_eq!(weight(1.0, 1.0, 1.0, b).unwrap().weight, 1.0);
    assert!((alignment_from_fidelity(0.5, DEFAULT_EPSILON_A) - 1.0 / 0.501).abs() < 1e-12);
    assert!((alignment_from_fidelity(0.5, DEFAULT_EPSILON_A) - 1.996).abs() < 1e-3);
    let perfect = alignment_from_fidelity(0.0, DEFAULT_EPSILON_A);
    assert!((perfect - 1000.0).abs() < 1e-9);
    let w = weight(perfect, 1.0, 1.0, b).unwrap();
    assert_eq!((w.raw, w.weight), (perfect, 100.0));
    assert_eq!(weight(1e-9, 10.0, 1.0, b).unwrap().weight, 0.01);
    assert!(matches!(weight(1.0, 0.0, 1.0, b), Err(BlendError::NonPositive { name: "T", .. })));
    assert!(matches!(weight(-1.0, 1.0, 1.0, b), Err(BlendError::NonPositive { name: "A", .. })));
    assert!(matches!(weight(1.0, 1.0, f64::NAN, b), Err(BlendError::NonPositive { name: "P", .. })));
    assert_eq!(SyntheticWeight::REAL.weight, 1.0);
}

proptest! {
    #[test]
    fn weight_is_homogeneous(a in 0.01f64..100.0, t in 0.01f64..10.0, p in 0.01f64..1.0) {
        let b = WeightBounds::default();
        let w = weight(a, t, p, b).unwrap().raw;
        prop_assert!((weight(2.0 * a, t, p, b).unwrap().raw - 2.0 * w).abs() <= 1e-9 * w);
        prop_assert!((weight(a, 2.0 * t, p, b).unwrap().raw - w / 2.0).abs() <= 1e-9 * w);
        prop_assert!((weight(a, t, 2.0 * p, b).unwrap().raw - w / 2.0).abs() <= 1e-9 * w);
    }

    #[test]
    fn ranking_survives_scaling_fidelity(
        rows in proptest::collection::vec((0.01f64..3.0, 0.05f64..2.0, 0.01f64..1.0), 2..20),
        c in 0.1f64..10.0,
    ) {
        let b = WeightBounds { min: 0.0, max: f64::INFINITY };
        let order = |scale: f64| {
            let w: Vec<f64> = rows
                .iter()
                .map(|(f, t, p)| weight(alignment_from_fidelity(scale * f, 0.0), *t, *p, b).unwrap().raw)
                .collect();
            let mut idx: Vec<usize> = (0..w.len()).collect();
            idx.sort_by(|&i, &j| w[i].total_cmp(&w[j]).then(i.cmp(&j)));
            idx
        };
        prop_assert_eq!(order(1.0), order(c));
    }
}

#[test]
fn fidelity_averages_group_maes() {
    let s = schema();
    let hp = profiles(&[("h1", "Woman", "50+"), ("h2", "Man", "18-29")]);
    let human = vec![AnnotationRecord::new("i0", "h1", 3.0), AnnotationRecord::new("i0", "h2", 2.6)];
    let pp = profiles(&[("p", "Woman", "18-29")]);
    let synth = vec![AnnotationRecord::new("i0", "p", 3.4)];
    let means = GroupMeans::new(&human, &hp, &s);
    let a = alignment_scores(&synth, &pp, &means, &s, DEFAULT_EPSILON_A).unwrap();
    assert_eq!(a["p"].groups, 2);
    assert!((a["p"].fidelity_error - 0.6).abs() < 1e-12);
    assert!((a["p"].alignment - 1.0 / 0.601).abs() < 1e-9);

    let matched = vec![AnnotationRecord::new("i0", "p", 3.0)];
    let hp2 = profiles(&[("h1", "Woman", "18-29")]);
    let means2 = GroupMeans::new(&human[..1], &hp2, &s);
    let a = alignment_scores(&matched, &pp, &means2, &s, DEFAULT_EPSILON_A).unwrap();
    assert_eq!(a["p"].fidelity_error, 0.0);
    assert!((a["p"].alignment - 1000.0).abs() < 1e-9);

    let stray = vec![AnnotationRecord::new("elsewhere", "p", 3.0)];
    assert!(matches!(alignment_scores(&stray, &pp, &means, &s, 1e-3), Err(BlendError::NoOverlap(_))));
}

fn two_group_corpus() -> (Vec<AnnotationRecord>, ProfileMap) {
    let mut rows = Vec::new();
    for i in 0..6 {
        rows.push((format!("m{i}"), "Man", "18-29"));
        rows.push((format!("w{i}"), "Woman", "50+"));
    }
    let p: ProfileMap = rows
        .iter()
        .map(|(id, g, a)| (id.clone(), AnnotatorProfile::new(id.clone(), [("gender", *g), ("age", *a)])))
        .collect();
    let mut records = Vec::new();
    for (k, id) in p.keys().enumerate() {
        // men annotate three items each, women one
        let n = if id.starts_with('m') { 3 } else { 1 };
        for j in 0..n {
            records.push(AnnotationRecord::new(format!("i{}", (k + j) % 5), id.clone(), 3.0));
        }
    }
    (records, p)
}

#[test]
fn clusters_recover_separated_groups() {
    let s = schema();
    let (records, p) = two_group_corpus();
    let c = cluster_personas(&records, &p, &s, 2, 4).unwrap();
    assert_eq!(c.clusters.len(), 2);
    for cl in &c.clusters {
        let first = cl.members[0].chars().next().unwrap();
        assert!(cl.members.iter().all(|m| m.starts_with(first)));
        let expected = if first == 'm' { 18.0 / 24.0 } else { 6.0 / 24.0 };
        assert!((cl.prevalence - expected).abs() < 1e-12);
    }
    assert!((c.clusters.iter().map(|x| x.prevalence).sum::<f64>() - 1.0).abs() < 1e-9);

    let persona = &profiles(&[("p", "Woman", "50+")])["p"];
    let idx = c.assign(&s, &persona.attributes);
    assert!(c.clusters[idx].members[0].starts_with('w'));

    let one = cluster_personas(&records, &p, &s, 1, 4).unwrap();
    assert_eq!(one.clusters.len(), 1);
    assert_eq!(one.clusters[0].prevalence, 1.0);

    assert!(matches!(cluster_personas(&records, &p, &s, 0, 4), Err(BlendError::InvalidK { .. })));
    assert!(matches!(cluster_personas(&records, &p, &s, 13, 4), Err(BlendError::InvalidK { .. })));
}

#[test]
fn trustworthiness_uses_member_mae_with_fallback_and_floor() {
    let s = schema();
    let (records, p) = two_group_corpus();
    let mut c = cluster_personas(&records, &p, &s, 2, 4).unwrap();
    let men = c.clusters.iter().position(|x| x.members[0].starts_with('m')).unwrap();
    let preds = vec![
        PredictionRecord::new("i0", "m0", 3.5, 3.0),
        PredictionRecord::new("i1", "m1", 2.0, 3.0),
    ];
    c.set_trustworthiness(&preds, 1e-3);
    assert!((c.clusters[men].trustworthiness - 0.75).abs() < 1e-12);
    assert!((c.clusters[1 - men].trustworthiness - 0.75).abs() < 1e-12, "global fallback");
    c.set_trustworthiness(&[PredictionRecord::new("i0", "m0", 3.0, 3.0)], 1e-3);
    assert_eq!(c.clusters[men].trustworthiness, 1e-3);
}

#[test]
fn weight_table_composes_components() {
    let s = schema();
    let (records, p) = two_group_corpus();
    let mut c = cluster_personas(&records, &p, &s, 2, 4).unwrap();
    c.set_trustworthiness(&[PredictionRecord::new("i0", "m0", 3.5, 3.0), PredictionRecord::new("i0", "w0", 4.0, 3.0)], 1e-3);
    let pp = profiles(&[("pm", "Man", "18-29"), ("pw", "Woman", "50+")]);
    let synth = vec![AnnotationRecord::new("i0", "pm", 3.5), AnnotationRecord::new("i1", "pw", 2.0)];
    let means = GroupMeans::new(&records, &p, &s);
    let a = alignment_scores(&synth, &pp, &means, &s, DEFAULT_EPSILON_A).unwrap();
    let table = weight_table(&synth, &pp, &a, &c, &s, WeightBounds::default()).unwrap();
    assert_eq!(table.rows.len(), 2);
    for (row, persona) in table.rows.iter().zip(["pm", "pw"]) {
        let cl = &c.clusters[row.cluster];
        let expected = a[persona].alignment / (cl.trustworthiness * cl.prevalence);
        assert!((row.weight.raw - expected).abs() < 1e-9);
    }
    // pm: A = 1/0.501, T = 0.5, P = 0.75
    assert!((table.rows[0].weight.weight - (1.0 / 0.501) / 0.375).abs() < 1e-9);
    assert_eq!(table.csv_rows()[0].len(), WeightTable::CSV_HEADER.len());
    let summary = table.summary().unwrap();
    assert_eq!(summary.n, 2);
}

#[test]
fn plan_fields_match_strategy() {
    assert!(BlendPlan::pt_ft(1, 1).validate().is_ok());
    assert!(BlendPlan::unweighted().validate().is_ok());
    assert!(BlendPlan::weighted(WeightTable::default()).validate().is_ok());
    let mut p = BlendPlan::pt_ft(1, 1);
    p.finetune_epochs = None;
    assert!(p.validate().is_err());
    let mut p = BlendPlan::unweighted();
    p.weights = Some(WeightTable::default());
    assert!(p.validate().is_err());
    let mut p = BlendPlan::weighted(WeightTable::default());
    p.pretrain_epochs = Some(2);
    assert!(p.validate().is_err());
    let p = BlendPlan { strategy: BlendStrategy::Weighted, weights: None, pretrain_epochs: None, finetune_epochs: None };
    assert!(p.validate().is_err());
}

fn small() -> ModelConfig {
    ModelConfig { n_experts: Some(2), top_k: 2, annotator_dim: 4, demographic_dim: 4, expert_hidden: 6, expert_output: 4, ..Default::default() }
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerConfig { lr_gate: 0.002, lr_main: 0.005, max_epochs: epochs, batch_size: 4, seed: 3, ..Default::default() },
        weights: LossWeights { annotator: 0.001, identity: 0.0001, demo_specialization: 0.01, ..LossWeights::zero() },
        schedule: PhaseSchedule::constant(0.2, 0.05, 0.1),
        demo_direction: DemoDirection::Minimize,
        clip: None,
    }
}

struct Split {
    f: crate::training::objective::tests::Fixture,
    real: Vec<TrainSample>,
    synth: Vec<TrainSample>,
    records: Vec<AnnotationRecord>,
}

fn split() -> Split {
    let f = fixture(small(), 24, 11);
    let unit: Vec<TrainSample> = f.batch.iter().map(|s| TrainSample { weight: 1.0, ..s.clone() }).collect();
    let real = unit[..16].to_vec();
    let synth = unit[16..].to_vec();
    let records = (0..synth.len()).map(|i| AnnotationRecord::new(format!("s{i}"), format!("p{i}"), 3.0)).collect();
    Split { f, real, synth, records }
}

fn table(records: &[AnnotationRecord], w: impl Fn(usize) -> f64) -> WeightTable {
    WeightTable {
        bounds: WeightBounds { min: 0.0, max: 100.0 },
        rows: records
            .iter()
            .enumerate()
            .map(|(i, r)| WeightRow {
                instance_id: r.instance_id.clone(),
                persona_id: r.annotator_id.clone(),
                cluster: 0,
                weight: SyntheticWeight { weight: w(i), raw: w(i), ..SyntheticWeight::REAL },
            })
            .collect(),
    }
}

fn loss_trace(o: &BlendOutcome) -> Vec<u64> {
    o.stages.iter().flat_map(|s| s.log.epochs.iter().map(|e| e.loss.mse.to_bits())).collect()
}

#[test]
fn unit_weights_match_unweighted_bitwise() {
    let s = split();
    let cfg = config(4);
    let a = blend_train(s.f.model.clone(), &s.f.store, &s.real, &s.synth, &s.records, &[], &BlendPlan::unweighted(), &cfg).unwrap();
    let b = blend_train(
        s.f.model.clone(),
        &s.f.store,
        &s.real,
        &s.synth,
        &s.records,
        &[],
        &BlendPlan::weighted(table(&s.records, |_| 1.0)),
        &cfg,
    )
    .unwrap();
    assert_eq!(loss_trace(&a), loss_trace(&b));
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(b.weight_summary.unwrap().mean, 1.0);
}

#[test]
fn zero_weights_reproduce_real_only_training() {
    let s = split();
    let cfg = config(4);
    let blended = blend_train(
        s.f.model.clone(),
        &s.f.store,
        &s.real,
        &s.synth,
        &s.records,
        &[],
        &BlendPlan::weighted(table(&s.records, |_| 0.0)),
        &cfg,
    )
    .unwrap();
    let real_only = train(s.f.model.clone(), &s.f.store, &s.real, &[], &cfg).unwrap();
    let trace: Vec<u64> = real_only.log.epochs.iter().map(|e| e.loss.total.to_bits()).collect();
    let blended_trace: Vec<u64> = blended.stages[0].log.epochs.iter().map(|e| e.loss.total.to_bits()).collect();
    assert_eq!(trace, blended_trace);
    assert_eq!(real_only.model.params, blended.model.params);
}

#[test]
fn real_samples_keep_unit_weight() {
    let s = split();
    for w in [0.0, 0.3, 7.0] {
        let set = weighted_union(&s.real, &s.synth, &s.records, &table(&s.records, |i| w * (i + 1) as f64)).unwrap();
        assert!(set[..s.real.len()].iter().all(|x| x.weight == 1.0));
        assert_eq!(&set[..s.real.len()].iter().map(|x| &x.key).collect::<Vec<_>>(), &s.real.iter().map(|x| &x.key).collect::<Vec<_>>());
    }
    let missing = weighted_union(&s.real, &s.synth, &s.records, &WeightTable::default());
    assert!(matches!(missing, Err(BlendError::MissingWeight { .. })));
}

#[test]
fn doubled_weight_equals_duplicate_sample() {
    let s = split();
    let zero = LossWeights::zero();
    let base = TrainSample { weight: 1.0, ..s.synth[0].clone() };
    let other = TrainSample { weight: 1.0, ..s.real[0].clone() };
    let doubled = vec![TrainSample { weight: 2.0, ..base.clone() }, other.clone()];
    let duplicated = vec![base.clone(), base, other];
    let mse_sum = |batch: &[TrainSample]| {
        let noise = vec![Noise::Mean; batch.len()];
        let b = total_loss(&s.f.model, &s.f.store, batch, &noise, &zero, DemoDirection::Minimize, Phase::A, None).unwrap();
        b.mse * batch.len() as f64
    };
    assert!((mse_sum(&doubled) - mse_sum(&duplicated)).abs() < 1e-12);
}

#[test]
fn pt_ft_stages() {
    let s = split();
    let cfg = config(3);
    let pretrain_only = blend_train(s.f.model.clone(), &s.f.store, &s.real, &s.synth, &s.records, &[], &BlendPlan::pt_ft(3, 0), &cfg).unwrap();
    let direct = train(s.f.model.clone(), &s.f.store, &s.synth, &[], &cfg).unwrap();
    assert_eq!(pretrain_only.model.params, direct.model.params);
    assert_eq!(pretrain_only.stages.len(), 1);

    let both = blend_train(s.f.model.clone(), &s.f.store, &s.real, &s.synth, &s.records, &[], &BlendPlan::pt_ft(3, 2), &cfg).unwrap();
    assert_eq!(both.stages.iter().map(|x| (x.name, x.log.epochs.len())).collect::<Vec<_>>(), vec![("pretrain", 3), ("finetune", 2)]);
    let mut ft = cfg.clone();
    ft.optimizer.max_epochs = 2;
    let manual = train(direct.model, &s.f.store, &s.real, &[], &ft).unwrap();
    assert_eq!(both.model.params, manual.model.params);

    let empty = blend_train(s.f.model.clone(), &s.f.store, &s.real, &[], &[], &[], &BlendPlan::pt_ft(1, 1), &cfg);
    assert!(matches!(empty, Err(BlendError::EmptySynthetic)));
}
