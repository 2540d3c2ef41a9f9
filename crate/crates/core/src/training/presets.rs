use serde::{Deserialize, Serialize};

use super::{LossWeights, OptimizerConfig, PhaseSchedule, DEFAULT_EMA_DECAY, DEFAULT_TAU_AB, DEFAULT_TAU_BC};

/// Tuned hyperparameters under their config-file key names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParameters {
    pub learning_rate_gate: f64,
    pub learning_rate_main: f64,
    pub topk_experts: usize,
    pub demographic_emb_w: f64,
    pub annotator_emb_w: f64,
    pub demographic_specialization_w: f64,
    #[serde(rename = "load_loss_w_phaseA")]
    pub load_loss_w_phase_a: f64,
    #[serde(rename = "load_loss_w_phaseB")]
    pub load_loss_w_phase_b: f64,
    #[serde(rename = "load_loss_w_phaseC")]
    pub load_loss_w_phase_c: f64,
    #[serde(rename = "orthogonal_loss_w_phaseA")]
    pub orthogonal_loss_w_phase_a: f64,
    #[serde(rename = "orthogonal_loss_w_phaseB")]
    pub orthogonal_loss_w_phase_b: f64,
    #[serde(rename = "orthogonal_loss_w_phaseC")]
    pub orthogonal_loss_w_phase_c: f64,
    #[serde(rename = "variance_loss_w_phaseA")]
    pub variance_loss_w_phase_a: f64,
    #[serde(rename = "variance_loss_w_phaseB")]
    pub variance_loss_w_phase_b: f64,
    #[serde(rename = "variance_loss_w_phaseC")]
    pub variance_loss_w_phase_c: f64,
}

pub const PRESET_NAMES: [&str; 5] = ["offensiveness", "politeness", "safety", "pcc", "toxicity"];

fn preset_text(name: &str) -> Option<&'static str> {
    Some(match name {
        "offensiveness" => include_str!("../../presets/offensiveness.toml"),
        "politeness" => include_str!("../../presets/politeness.toml"),
        "safety" => include_str!("../../presets/safety.toml"),
        "pcc" => include_str!("../../presets/pcc.toml"),
        "toxicity" => include_str!("../../presets/toxicity.toml"),
        _ => return None,
    })
}

/// Raw preset table, for layering under user config.
pub fn preset_table(name: &str) -> Option<toml::Table> {
    preset_text(name).map(|t| t.parse().expect("bundled preset parses"))
}

pub fn preset(name: &str) -> Option<HyperParameters> {
    preset_text(name).map(|t| toml::from_str(t).expect("bundled preset parses"))
}

impl HyperParameters {
    /// Base loss weights, with phase-A values for the scheduled terms.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            annotator: self.annotator_emb_w,
            identity: self.demographic_emb_w,
            load: self.load_loss_w_phase_a,
            orthogonality: self.orthogonal_loss_w_phase_a,
            variance: self.variance_loss_w_phase_a,
            demo_specialization: self.demographic_specialization_w,
        }
    }

    pub fn schedule(&self) -> PhaseSchedule {
        PhaseSchedule {
            load: [self.load_loss_w_phase_a, self.load_loss_w_phase_b, self.load_loss_w_phase_c],
            orthogonality: [self.orthogonal_loss_w_phase_a, self.orthogonal_loss_w_phase_b, self.orthogonal_loss_w_phase_c],
            variance: [self.variance_loss_w_phase_a, self.variance_loss_w_phase_b, self.variance_loss_w_phase_c],
            tau_ab: DEFAULT_TAU_AB,
            tau_bc: DEFAULT_TAU_BC,
            ema_decay: DEFAULT_EMA_DECAY,
        }
    }

    pub fn apply_rates(&self, optimizer: &mut OptimizerConfig) {
        optimizer.lr_gate = self.learning_rate_gate;
        optimizer.lr_main = self.learning_rate_main;
    }
}
