use serde::{Deserialize, Serialize};

use super::ModelError;

/// How selected experts are weighted when their outputs are mixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingMode {
    /// `p_j / Σ_{i∈I_k} p_i`, summing to one over the selected set.
    #[default]
    Renormalized,
    /// The raw softmax probability `p_j`.
    Raw,
}

/// Gate weights `W_s` (row-major, one row per expert) and bias `b`.
#[derive(Debug, Clone, Copy)]
pub struct GateParameters<'a> {
    pub weight: &'a [f64],
    pub bias: &'a [f64],
}

impl GateParameters<'_> {
    pub fn n_experts(&self) -> usize {
        self.bias.len()
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let dim = x.len();
        self.bias
            .iter()
            .enumerate()
            .map(|(j, b)| b + self.weight[j * dim..(j + 1) * dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// Selected expert indices, highest probability first.
    pub selected: Vec<usize>,
    /// Mixing weight for each entry of `selected`.
    pub weights: Vec<f64>,
}

impl RoutingDecision {
    pub fn n_experts(&self) -> usize {
        self.probabilities.len()
    }

    /// Probability mass on the selected experts, zero elsewhere.
    pub fn selected_mass(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.probabilities.len()];
        for &j in &self.selected {
            m[j] = self.probabilities[j];
        }
        m
    }
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Indices of the `k` largest values, largest first; ties go to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn mixing_weights(probabilities: &[f64], selected: &[usize], mode: MixingMode) -> Vec<f64> {
    match mode {
        MixingMode::Raw => selected.iter().map(|&j| probabilities[j]).collect(),
        MixingMode::Renormalized => {
            let total: f64 = selected.iter().map(|&j| probabilities[j]).sum();
            selected.iter().map(|&j| probabilities[j] / total).collect()
        }
    }
}

/// `s = W_s x + b`, `p = softmax(s)`, hard top-k selection.
pub fn route(gate: GateParameters<'_>, x: &[f64], k: usize, mode: MixingMode) -> Result<RoutingDecision, ModelError> {
    let e = gate.n_experts();
    if k == 0 || k > e {
        return Err(ModelError::InvalidTopK { k, experts: e });
    }
    if gate.weight.len() != e * x.len() {
        return Err(ModelError::DimensionMismatch { what: "gate weight".into(), expected: e * x.len(), got: gate.weight.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("model input".into()));
    }
    let scores = gate.scores(x);
    let probabilities = softmax(&scores);
    let selected = top_k(&probabilities, k);
    let weights = mixing_weights(&probabilities, &selected, mode);
    Ok(RoutingDecision { scores, probabilities, selected, weights })
}

/// Aggregate expert usage: selected probability mass summed over decisions, normalized to one.
pub fn expert_usage(decisions: &[RoutingDecision]) -> Result<Vec<f64>, ModelError> {
    let first = decisions.first().ok_or(ModelError::EmptyInput("routing decisions"))?;
    let mut usage = vec![0.0; first.n_experts()];
    for d in decisions {
        for &j in &d.selected {
            usage[j] += d.probabilities[j];
        }
    }
    let total: f64 = usage.iter().sum();
    usage.iter_mut().for_each(|u| *u /= total);
    Ok(usage)
}
