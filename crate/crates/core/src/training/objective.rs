use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::losses::{demo_category_with_grad, load_std_with_grad, orthogonality_sample, variance_with_grad};
use super::{DemoDirection, LossBreakdown, LossWeights, Phase, TrainingError};
use crate::model::{kl_to_standard_normal, Model, ModelError, Noise, SampleKey, SampleUpstream, TextEmbeddingStore};

/// One training example: resolved table rows, z-normalized target and MSE weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub key: SampleKey,
    pub target: f64,
    pub weight: f64,
}

/// Evaluates the batch objective. When `grads` is given, `∂total/∂θ` is
/// accumulated into it.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    model: &Model,
    store: &TextEmbeddingStore,
    batch: &[TrainSample],
    noise: &[Noise],
    weights: &LossWeights,
    direction: DemoDirection,
    phase: Phase,
    grads: Option<&mut [f64]>,
) -> Result<LossBreakdown, TrainingError> {
    if batch.is_empty() {
        return Err(TrainingError::EmptyBatch);
    }
    if noise.len() != batch.len() {
        return Err(TrainingError::InvalidConfig("one noise source is required per sample".into()));
    }
    let l = &model.layout;
    let e = l.n_experts;
    let b = batch.len() as f64;

    let mut samples = Vec::with_capacity(batch.len());
    let mut decisions = Vec::with_capacity(batch.len());
    let mut mixes = Vec::with_capacity(batch.len());
    for (s, n) in batch.iter().zip(noise) {
        let emb = model.embed_key(store, &s.key, *n);
        let (d, m) = model.forward(&emb.input)?;
        samples.push(emb);
        decisions.push(d);
        mixes.push(m);
    }

    let mut up: Vec<SampleUpstream> = decisions
        .iter()
        .map(|d| SampleUpstream {
            d_output: 0.0,
            d_expert_outputs: vec![vec![0.0; l.expert_output]; d.selected.len()],
            d_probabilities: vec![0.0; e],
            d_scores: vec![0.0; e],
        })
        .collect();

    let mut mse = 0.0;
    for (i, s) in batch.iter().enumerate() {
        let r = mixes[i].output - s.target;
        mse += s.weight * r * r;
        up[i].d_output = 2.0 * s.weight * r / b;
    }
    mse /= b;

    let params = &model.params;
    let mut kl_ann = 0.0;
    let mut kl_demo = 0.0;
    for s in batch {
        kl_ann += match s.key.annotator_row {
            Some(row) => kl_to_standard_normal(&params[l.annotator_mean(row)], &params[l.annotator_log_var(row)]),
            None => model.default_annotator.kl_to_standard_normal(),
        };
        for &row in &s.key.demographic_rows {
            kl_demo += kl_to_standard_normal(&params[l.demographic_mean(row)], &params[l.demographic_log_var(row)]);
        }
    }
    kl_ann /= b;
    kl_demo /= b;

    // soft load counts from selected probability mass
    let mut counts = vec![0.0; e];
    for d in &decisions {
        for &j in &d.selected {
            counts[j] += d.probabilities[j];
        }
    }
    let (load_std, d_counts) = load_std_with_grad(&counts)?;
    for (i, d) in decisions.iter().enumerate() {
        for &j in &d.selected {
            up[i].d_probabilities[j] += weights.load * d_counts[j];
        }
    }

    let mut orth = 0.0;
    for (i, m) in mixes.iter().enumerate() {
        let mut g = vec![vec![0.0; l.expert_output]; m.expert_outputs.len()];
        orth += orthogonality_sample(&m.expert_outputs, Some(&mut g));
        for (dst, src) in up[i].d_expert_outputs.iter_mut().zip(&g) {
            for (a, v) in dst.iter_mut().zip(src) {
                *a += weights.orthogonality * v;
            }
        }
    }

    let scores: Vec<Vec<f64>> = decisions.iter().map(|d| d.scores.clone()).collect();
    let (variance, d_scores) = variance_with_grad(&scores);
    for (u, g) in up.iter_mut().zip(&d_scores) {
        for (a, v) in u.d_scores.iter_mut().zip(g) {
            *a += weights.variance * v;
        }
    }

    let demo_scale = direction.sign() * weights.demo_specialization;
    let mut demo = 0.0;
    for ci in 0..l.n_categories() {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in batch.iter().enumerate() {
            groups.entry(s.key.demographic_rows[ci]).or_default().push(i);
        }
        if groups.len() < 2 {
            continue;
        }
        let members: Vec<&Vec<usize>> = groups.values().collect();
        let mut unnorm = Vec::with_capacity(members.len());
        for idx in &members {
            let mut u = vec![0.0; e];
            for &i in idx.iter() {
                for &j in &decisions[i].selected {
                    u[j] += decisions[i].probabilities[j];
                }
            }
            unnorm.push(u);
        }
        let totals: Vec<f64> = unnorm.iter().map(|u| u.iter().sum()).collect();
        let dists: Vec<Vec<f64>> = unnorm.iter().zip(&totals).map(|(u, t)| u.iter().map(|v| v / t).collect()).collect();
        let (value, d_dist) = demo_category_with_grad(&dists);
        demo += value;
        if demo_scale == 0.0 {
            continue;
        }
        for (g, idx) in members.iter().enumerate() {
            let n = totals[g];
            let inner: f64 = d_dist[g].iter().zip(&unnorm[g]).map(|(dp, u)| dp * u).sum();
            let d_u: Vec<f64> = d_dist[g].iter().map(|dp| dp / n - inner / (n * n)).collect();
            for &i in idx.iter() {
                for &j in &decisions[i].selected {
                    up[i].d_probabilities[j] += demo_scale * d_u[j];
                }
            }
        }
    }

    let mut breakdown = LossBreakdown {
        mse,
        kl_annotator: kl_ann,
        kl_demographic: kl_demo,
        load_std,
        orthogonality: orth,
        variance,
        demo_specialization: demo,
        total: 0.0,
        active_phase: phase,
    };
    breakdown.total = breakdown.weighted_total(weights, direction);
    if !breakdown.total.is_finite() {
        return Err(ModelError::NonFinite("batch loss".into()).into());
    }

    if let Some(grads) = grads {
        if grads.len() != l.total {
            return Err(ModelError::DimensionMismatch { what: "gradient buffer".into(), expected: l.total, got: grads.len() }.into());
        }
        for i in 0..batch.len() {
            model.backward_sample(&samples[i], &decisions[i], &mixes[i], &up[i], grads);
        }
        let kl = |mean: std::ops::Range<usize>, log_var: std::ops::Range<usize>, scale: f64, grads: &mut [f64]| {
            for (k, p) in mean.enumerate() {
                grads[p] += scale * params[p];
                let lv = log_var.start + k;
                grads[lv] += scale * 0.5 * (params[lv].exp() - 1.0);
            }
        };
        for s in batch {
            if weights.annotator != 0.0 {
                if let Some(row) = s.key.annotator_row {
                    kl(l.annotator_mean(row), l.annotator_log_var(row), weights.annotator / b, grads);
                }
            }
            if weights.identity != 0.0 {
                for &row in &s.key.demographic_rows {
                    kl(l.demographic_mean(row), l.demographic_log_var(row), weights.identity / b, grads);
                }
            }
        }
    }
    Ok(breakdown)
}

#[cfg(test)]
pub(crate) mod tests;
