use serde::{Deserialize, Serialize};

use super::routing::{GateParameters, MixingMode, RoutingDecision};
use super::{Layout, ModelError, ModelInput};
use crate::corpus::RatingNormalizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Self::Tanh => v.tanh(),
            Self::Identity => v,
        }
    }

    /// Derivative expressed through the activation value.
    fn derivative_from_output(self, u: f64) -> f64 {
        match self {
            Self::Tanh => 1.0 - u * u,
            Self::Identity => 1.0,
        }
    }
}

/// One expert `f(x) = W2 · act(W1 x + b1) + b2`.
#[derive(Debug, Clone, Copy)]
pub struct ExpertWeights<'a> {
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
}

impl ExpertWeights<'_> {
    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn output(&self) -> usize {
        self.b2.len()
    }

    /// Returns (hidden activations, output vector).
    pub fn forward(&self, x: &[f64], activation: Activation) -> (Vec<f64>, Vec<f64>) {
        let d = x.len();
        let u: Vec<f64> = (0..self.hidden())
            .map(|i| activation.apply(self.b1[i] + dot(&self.w1[i * d..(i + 1) * d], x)))
            .collect();
        let h = self.hidden();
        let o = (0..self.output()).map(|i| self.b2[i] + dot(&self.w2[i * h..(i + 1) * h], &u)).collect();
        (u, o)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Experts plus the shared linear regression head.
#[derive(Debug, Clone)]
pub struct ExpertPool<'a> {
    pub experts: Vec<ExpertWeights<'a>>,
    pub head_weight: &'a [f64],
    pub head_bias: f64,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixOutput {
    /// Denormalized rating prediction.
    pub prediction: f64,
    /// Head output on the normalized scale.
    pub output: f64,
    /// Mixed hidden vector `h = Σ w_j f_j(x)`.
    pub mixed: Vec<f64>,
    /// `f_j(x)` for each selected expert, in selection order.
    pub expert_outputs: Vec<Vec<f64>>,
    pub expert_activations: Vec<Vec<f64>>,
}

/// Gradients of a batch loss with respect to one sample's intermediate values.
/// Empty vectors mean zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleUpstream {
    pub d_output: f64,
    pub d_expert_outputs: Vec<Vec<f64>>,
    pub d_probabilities: Vec<f64>,
    pub d_scores: Vec<f64>,
}

impl<'a> ExpertPool<'a> {
    pub fn from_layout(layout: &Layout, params: &'a [f64], activation: Activation) -> Self {
        let experts = layout
            .experts
            .iter()
            .map(|x| ExpertWeights {
                w1: &params[x.w1..x.b1],
                b1: &params[x.b1..x.w2],
                w2: &params[x.w2..x.b2],
                b2: &params[x.b2..x.b2 + layout.expert_output],
            })
            .collect();
        Self { experts, head_weight: &params[layout.head_w..layout.head_b], head_bias: params[layout.head_b], activation }
    }

    pub fn forward(&self, decision: &RoutingDecision, x: &ModelInput, normalizer: &RatingNormalizer) -> Result<MixOutput, ModelError> {
        if decision.n_experts() != self.experts.len() {
            return Err(ModelError::DimensionMismatch {
                what: "routing decision".into(),
                expected: self.experts.len(),
                got: decision.n_experts(),
            });
        }
        let mut mixed = vec![0.0; self.head_weight.len()];
        let mut expert_outputs = Vec::with_capacity(decision.selected.len());
        let mut expert_activations = Vec::with_capacity(decision.selected.len());
        for (&j, &w) in decision.selected.iter().zip(&decision.weights) {
            let (u, o) = self.experts[j].forward(&x.x, self.activation);
            for (m, v) in mixed.iter_mut().zip(&o) {
                *m += w * v;
            }
            expert_outputs.push(o);
            expert_activations.push(u);
        }
        let output = self.head_bias + dot(self.head_weight, &mixed);
        if !output.is_finite() {
            return Err(ModelError::NonFinite("expert mixture output".into()));
        }
        Ok(MixOutput { prediction: normalizer.denormalize(output), output, mixed, expert_outputs, expert_activations })
    }

    /// Backpropagates one sample through head, mixing, gate and experts,
    /// accumulating parameter gradients and returning `∂L/∂x`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward(
        &self,
        decision: &RoutingDecision,
        input: &ModelInput,
        mix: &MixOutput,
        up: &SampleUpstream,
        gate: GateParameters<'_>,
        layout: &Layout,
        mixing: MixingMode,
        grads: &mut [f64],
    ) -> Vec<f64> {
        let x = &input.x;
        let d = x.len();
        let e = self.experts.len();
        let mut dx = vec![0.0; d];

        // head
        let dh: Vec<f64> = self.head_weight.iter().map(|w| up.d_output * w).collect();
        for (i, h) in mix.mixed.iter().enumerate() {
            grads[layout.head_w + i] += up.d_output * h;
        }
        grads[layout.head_b] += up.d_output;

        // mixing weights
        let dg: Vec<f64> = mix.expert_outputs.iter().map(|o| dot(o, &dh)).collect();
        let mut dp = if up.d_probabilities.is_empty() { vec![0.0; e] } else { up.d_probabilities.clone() };
        let p = &decision.probabilities;
        match mixing {
            MixingMode::Raw => {
                for (a, &j) in decision.selected.iter().enumerate() {
                    dp[j] += dg[a];
                }
            }
            MixingMode::Renormalized => {
                let s: f64 = decision.selected.iter().map(|&j| p[j]).sum();
                let weighted: f64 = decision.selected.iter().zip(&dg).map(|(&j, g)| g * p[j]).sum();
                for (a, &j) in decision.selected.iter().enumerate() {
                    dp[j] += dg[a] / s - weighted / (s * s);
                }
            }
        }

        // softmax and gate
        let inner = dot(&dp, p);
        for j in 0..e {
            let mut ds = p[j] * (dp[j] - inner);
            if !up.d_scores.is_empty() {
                ds += up.d_scores[j];
            }
            if ds == 0.0 {
                continue;
            }
            let row = layout.gate_w + j * d;
            for i in 0..d {
                grads[row + i] += ds * x[i];
                dx[i] += ds * gate.weight[j * d + i];
            }
            grads[layout.gate_b + j] += ds;
        }

        // experts
        let hidden = layout.expert_hidden;
        for (a, &j) in decision.selected.iter().enumerate() {
            let w = decision.weights[a];
            let mut d_out: Vec<f64> = dh.iter().map(|v| w * v).collect();
            if let Some(extra) = up.d_expert_outputs.get(a) {
                for (o, v) in d_out.iter_mut().zip(extra) {
                    *o += v;
                }
            }
            let off = &layout.experts[j];
            let ex = &self.experts[j];
            let u = &mix.expert_activations[a];
            let mut du = vec![0.0; hidden];
            for (oi, g) in d_out.iter().enumerate() {
                grads[off.b2 + oi] += g;
                for hi in 0..hidden {
                    grads[off.w2 + oi * hidden + hi] += g * u[hi];
                    du[hi] += g * ex.w2[oi * hidden + hi];
                }
            }
            for hi in 0..hidden {
                let da = du[hi] * self.activation.derivative_from_output(u[hi]);
                if da == 0.0 {
                    continue;
                }
                grads[off.b1 + hi] += da;
                let row = off.w1 + hi * d;
                for i in 0..d {
                    grads[row + i] += da * x[i];
                    dx[i] += da * ex.w1[hi * d + i];
                }
            }
        }
        dx
    }
}
