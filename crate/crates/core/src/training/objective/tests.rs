use super::*;
use crate::corpus::{AnnotatorProfile, CorpusSchema, RatingNormalizer};
use crate::model::{MixingMode, ModelConfig};
use crate::training::{demo_specialization_loss, symmetric_kl};

pub(crate) fn schema() -> CorpusSchema {
    CorpusSchema::from_toml_str(
        r#"
[rating_scale]
min = 1
max = 5
[[categories]]
name = "gender"
values = ["man", "woman"]
[[categories]]
name = "age"
values = ["young", "old"]
"#,
    )
    .unwrap()
}

pub(crate) struct Fixture {
    pub model: Model,
    pub store: TextEmbeddingStore,
    pub batch: Vec<TrainSample>,
}

pub(crate) fn fixture(config: ModelConfig, n: usize, seed: u64) -> Fixture {
    let mut store = TextEmbeddingStore::new(8);
    for t in 0..6 {
        store.insert(format!("t{t}"), (0..8).map(|v| ((v * 7 + t * 3) % 11) as f64 / 5.0 - 1.0).collect()).unwrap();
    }
    let ids: Vec<String> = (0..6).map(|a| format!("a{a}")).collect();
    let model = Model::new(&config, &schema(), ids.iter().map(String::as_str), 8, RatingNormalizer::identity(), seed).unwrap();
    let genders = ["man", "woman", "undisclosed"];
    let ages = ["young", "old"];
    let batch = (0..n)
        .map(|i| {
            let a = i % 6;
            let profile = AnnotatorProfile::new(ids[a].clone(), [("gender", genders[a % 3]), ("age", ages[a % 2])]);
            let key = model.sample_key(&store, &format!("t{}", i % 6), &ids[a], &profile).unwrap();
            TrainSample { key, target: ((i * 5) % 7) as f64 / 3.0 - 1.0, weight: 1.0 + (i % 3) as f64 * 0.25 }
        })
        .collect();
    Fixture { model, store, batch }
}

fn small(n_experts: usize, k: usize) -> ModelConfig {
    ModelConfig {
        n_experts: Some(n_experts),
        top_k: k,
        annotator_dim: 4,
        demographic_dim: 4,
        expert_hidden: 6,
        expert_output: 4,
        init_mean_scale: 0.5,
        init_log_variance: -1.0,
        ..Default::default()
    }
}

fn all_weights() -> LossWeights {
    LossWeights { annotator: 0.3, identity: 0.2, load: 0.5, orthogonality: 0.1, variance: 0.4, demo_specialization: 0.7 }
}

fn noise(n: usize) -> Vec<Noise> {
    (0..n).map(|i| Noise::Seeded(1000 + i as u64)).collect()
}

fn loss_at(f: &Fixture, params: &[f64], w: &LossWeights, dir: DemoDirection) -> f64 {
    let mut m = f.model.clone();
    m.params.copy_from_slice(params);
    total_loss(&m, &f.store, &f.batch, &noise(f.batch.len()), w, dir, Phase::A, None).unwrap().total
}

fn check_gradients(f: &Fixture, w: &LossWeights, dir: DemoDirection) {
    let n = f.batch.len();
    let mut grads = f.model.gradient_buffer();
    total_loss(&f.model, &f.store, &f.batch, &noise(n), w, dir, Phase::A, Some(&mut grads)).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (name, range) in f.model.layout.tensors() {
        for p in range {
            let mut plus = f.model.params.clone();
            let mut minus = f.model.params.clone();
            plus[p] += h;
            minus[p] -= h;
            let numeric = (loss_at(f, &plus, w, dir) - loss_at(f, &minus, w, dir)) / (2.0 * h);
            let analytic = grads[p];
            let err = (analytic - numeric).abs();
            assert!(
                err <= 1e-3 * analytic.abs().max(numeric.abs()) + 1e-8,
                "{name}[{p}]: analytic {analytic} numeric {numeric}"
            );
            worst = worst.max(err);
        }
    }
    assert!(grads.iter().any(|g| *g != 0.0));
}

#[test]
fn gradients_match_finite_differences_dense_routing() {
    let f = fixture(small(2, 2), 16, 3);
    check_gradients(&f, &all_weights(), DemoDirection::Minimize);
}

#[test]
fn gradients_match_finite_differences_sparse_routing() {
    let mut cfg = small(3, 2);
    cfg.mixing = MixingMode::Renormalized;
    let f = fixture(cfg, 12, 5);
    check_gradients(&f, &all_weights(), DemoDirection::Minimize);
    let mut raw = small(3, 1);
    raw.mixing = MixingMode::Raw;
    let f = fixture(raw, 12, 6);
    check_gradients(&f, &all_weights(), DemoDirection::Maximize);
}

#[test]
fn each_component_gradient_matches_alone() {
    let f = fixture(small(3, 2), 10, 9);
    let base = LossWeights::zero();
    for set in [
        |w: &mut LossWeights| w.annotator = 1.0,
        |w: &mut LossWeights| w.identity = 1.0,
        |w: &mut LossWeights| w.load = 1.0,
        |w: &mut LossWeights| w.orthogonality = 1.0,
        |w: &mut LossWeights| w.variance = 1.0,
        |w: &mut LossWeights| w.demo_specialization = 1.0,
    ] {
        let mut w = base;
        set(&mut w);
        check_gradients(&f, &w, DemoDirection::Minimize);
    }
}

#[test]
fn all_zero_configuration_has_zero_total() {
    let mut f = fixture(small(2, 2), 6, 1);
    let l = f.model.layout.clone();
    let p = &mut f.model.params;
    // constant gate scores, zero-KL embeddings, orthogonal expert outputs
    p[l.gate_range()].fill(0.0);
    p[l.ann_mean..l.total].fill(0.0);
    for (j, x) in l.experts.iter().enumerate() {
        p[x.w2..x.b2].fill(0.0);
        p[x.b2..x.b2 + l.expert_output].fill(0.0);
        p[x.b2 + j] = 1.0 + j as f64;
    }
    let noise = vec![Noise::Mean; f.batch.len()];
    for s in f.batch.iter_mut() {
        let emb = f.model.embed_key(&f.store, &s.key, Noise::Mean);
        s.target = f.model.forward(&emb.input).unwrap().1.output;
    }
    let w = all_weights();
    let b = total_loss(&f.model, &f.store, &f.batch, &noise, &w, DemoDirection::Minimize, Phase::A, None).unwrap();
    assert_eq!(b.mse, 0.0);
    assert_eq!(b.kl_annotator, 0.0);
    assert_eq!(b.kl_demographic, 0.0);
    assert_eq!(b.load_std, 0.0);
    assert_eq!(b.orthogonality, 0.0);
    assert_eq!(b.variance, 0.0);
    assert!(b.demo_specialization.abs() < 1e-15);
    assert!(b.total.abs() < 1e-15);
}

#[test]
fn zero_weights_collapse_to_mse() {
    let f = fixture(small(3, 2), 9, 2);
    let b = total_loss(&f.model, &f.store, &f.batch, &noise(9), &LossWeights::zero(), DemoDirection::Minimize, Phase::B, None)
        .unwrap();
    assert_eq!(b.total, b.mse);
    assert_eq!(b.active_phase, Phase::B);
}

#[test]
fn two_sample_total_matches_component_oracle() {
    let f = fixture(small(3, 2), 2, 4);
    let w = all_weights();
    let noise = vec![Noise::Mean, Noise::Mean];
    let b = total_loss(&f.model, &f.store, &f.batch, &noise, &w, DemoDirection::Minimize, Phase::A, None).unwrap();

    let m = &f.model;
    let l = &m.layout;
    let traced: Vec<_> = f
        .batch
        .iter()
        .map(|s| m.forward(&m.embed_key(&f.store, &s.key, Noise::Mean).input).unwrap())
        .collect();
    let mse = f.batch.iter().zip(&traced).map(|(s, (_, o))| s.weight * (o.output - s.target).powi(2)).sum::<f64>() / 2.0;
    let kl = |mean: &[f64], lv: &[f64]| -> f64 {
        mean.iter().zip(lv).map(|(u, v)| 0.5 * (u * u + v.exp() - 1.0 - v)).sum()
    };
    let kl_ann = f
        .batch
        .iter()
        .map(|s| {
            let r = s.key.annotator_row.unwrap();
            kl(&m.params[l.annotator_mean(r)], &m.params[l.annotator_log_var(r)])
        })
        .sum::<f64>()
        / 2.0;
    let kl_demo = f
        .batch
        .iter()
        .flat_map(|s| s.key.demographic_rows.iter())
        .map(|&r| kl(&m.params[l.demographic_mean(r)], &m.params[l.demographic_log_var(r)]))
        .sum::<f64>()
        / 2.0;
    let mut counts = [0.0; 3];
    for (d, _) in &traced {
        for &j in &d.selected {
            counts[j] += d.probabilities[j];
        }
    }
    let mean_c = counts.iter().sum::<f64>() / 3.0;
    let ratios: Vec<f64> = counts.iter().map(|c| (c / mean_c).min(1.0)).collect();
    let rm = ratios.iter().sum::<f64>() / 3.0;
    let load = (ratios.iter().map(|r| (r - rm).powi(2)).sum::<f64>() / 3.0).sqrt();
    let mut orth = 0.0;
    for (_, o) in &traced {
        let outs = &o.expert_outputs;
        for a in 0..outs.len() {
            for c in 0..outs.len() {
                if a != c {
                    let ab: f64 = outs[a].iter().zip(&outs[c]).map(|(x, y)| x * y).sum();
                    let bb: f64 = outs[c].iter().map(|y| y * y).sum();
                    orth += ab / (bb + 1e-8);
                }
            }
        }
    }
    let mut var = 0.0;
    for j in 0..3 {
        let s0 = traced[0].0.scores[j];
        let s1 = traced[1].0.scores[j];
        let mean = (s0 + s1) / 2.0;
        var += (s0 - mean).powi(2) + (s1 - mean).powi(2);
    }
    var = -var / 6.0;
    // both samples differ in gender and age (a0: man/young, a1: woman/old)
    let usage = |d: &crate::model::RoutingDecision| -> Vec<f64> {
        let mass: f64 = d.selected.iter().map(|&j| d.probabilities[j]).sum();
        (0..3).map(|j| if d.selected.contains(&j) { d.probabilities[j] / mass } else { 0.0 }).collect()
    };
    let demo = 2.0 * symmetric_kl(&usage(&traced[0].0), &usage(&traced[1].0));

    let expected = mse
        + w.annotator * kl_ann
        + w.identity * kl_demo
        + w.load * load
        + w.orthogonality * orth
        + w.variance * var
        + w.demo_specialization * demo;
    assert!((b.mse - mse).abs() < 1e-12);
    assert!((b.kl_annotator - kl_ann).abs() < 1e-12);
    assert!((b.kl_demographic - kl_demo).abs() < 1e-12);
    assert!((b.load_std - load).abs() < 1e-12);
    assert!((b.orthogonality - orth).abs() < 1e-9);
    assert!((b.variance - var).abs() < 1e-12);
    assert!((b.demo_specialization - demo).abs() < 1e-12);
    assert!((b.total - expected).abs() < 1e-9);
}

#[test]
fn demo_step_reduces_symmetric_kl() {
    let mut f = fixture(small(2, 2), 8, 12);
    // one category with two observed subgroups: man/young vs woman/old only
    f.batch.retain(|s| s.key.demographic_rows[0] != 2);
    let noise = vec![Noise::Mean; f.batch.len()];
    // targets equal current outputs so the MSE gradient vanishes at this point
    for s in f.batch.iter_mut() {
        let emb = f.model.embed_key(&f.store, &s.key, Noise::Mean);
        s.target = f.model.forward(&emb.input).unwrap().1.output;
    }
    let w = LossWeights { demo_specialization: 1.0, ..LossWeights::zero() };
    let mut grads = f.model.gradient_buffer();
    let before = total_loss(&f.model, &f.store, &f.batch, &noise, &w, DemoDirection::Minimize, Phase::A, Some(&mut grads))
        .unwrap();
    assert!(before.demo_specialization > 0.0);
    let mut stepped = f.model.clone();
    for (p, g) in stepped.params.iter_mut().zip(&grads) {
        *p -= 0.05 * g;
    }
    let after = total_loss(&stepped, &f.store, &f.batch, &noise, &w, DemoDirection::Minimize, Phase::A, None).unwrap();
    assert!(after.demo_specialization < before.demo_specialization);
}

#[test]
fn weight_zero_samples_do_not_touch_mse() {
    let mut f = fixture(small(2, 2), 4, 8);
    let w = LossWeights::zero();
    f.batch[2].weight = 0.0;
    let b1 = total_loss(&f.model, &f.store, &f.batch, &noise(4), &w, DemoDirection::Minimize, Phase::A, None).unwrap();
    f.batch[2].target += 100.0;
    let b2 = total_loss(&f.model, &f.store, &f.batch, &noise(4), &w, DemoDirection::Minimize, Phase::A, None).unwrap();
    assert_eq!(b1.mse, b2.mse);
}

#[test]
fn demo_loss_is_sum_over_categories() {
    let groups = vec![vec![vec![0.5, 0.5], vec![0.9, 0.1]], vec![vec![0.2, 0.8], vec![0.2, 0.8]]];
    assert!((demo_specialization_loss(&groups) - symmetric_kl(&[0.5, 0.5], &[0.9, 0.1])).abs() < 1e-15);
}

#[test]
fn rejects_empty_batch_and_noise_mismatch() {
    let f = fixture(small(2, 2), 3, 8);
    let w = LossWeights::zero();
    assert!(matches!(
        total_loss(&f.model, &f.store, &[], &[], &w, DemoDirection::Minimize, Phase::A, None),
        Err(TrainingError::EmptyBatch)
    ));
    assert!(total_loss(&f.model, &f.store, &f.batch, &noise(2), &w, DemoDirection::Minimize, Phase::A, None).is_err());
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
    #[test]
    fn total_is_permutation_invariant(perm_seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        let f = fixture(small(3, 2), 10, 21);
        let n = noise(10);
        let w = all_weights();
        let base = total_loss(&f.model, &f.store, &f.batch, &n, &w, DemoDirection::Minimize, Phase::A, None).unwrap();
        let mut order: Vec<usize> = (0..10).collect();
        order.shuffle(&mut crate::seed::rng(perm_seed));
        let batch: Vec<TrainSample> = order.iter().map(|&i| f.batch[i].clone()).collect();
        let noise: Vec<Noise> = order.iter().map(|&i| n[i]).collect();
        let shuffled = total_loss(&f.model, &f.store, &batch, &noise, &w, DemoDirection::Minimize, Phase::A, None).unwrap();
        proptest::prop_assert!((base.total - shuffled.total).abs() <= 1e-12 * base.total.abs().max(1.0));
    }
}
