//! Composite training objective, phase schedule, optimizer and training loop.

mod losses;
pub(crate) mod objective;
mod optimizer;
mod presets;
mod trainer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;

pub use losses::{
    demo_category_with_grad, demo_specialization_loss, kl_divergence, kl_to_standard_normal, load_std_loss,
    load_std_with_grad, orthogonality_loss, orthogonality_sample, symmetric_kl, variance_loss, variance_with_grad,
    ORTHOGONALITY_EPS, USAGE_SMOOTHING,
};
pub use objective::{total_loss, TrainSample};
pub use optimizer::{Optimizer, OptimizerConfig, OptimizerKind};
pub use presets::{preset, preset_table, HyperParameters, PRESET_NAMES};
pub use trainer::{
    evaluation_mae, prepare_eval, prepare_training, train, EarlyStopping, EpochRecord, EvalSample, StopDecision,
    TrainConfig, TrainOutcome, TrainingLog,
};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("expert load counts are all zero")]
    ZeroLoad,
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
    #[error("no profile for annotator '{0}'")]
    MissingProfile(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Loss-term weights in effect for one step. The load, orthogonality and
/// variance weights come from the active phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub annotator: f64,
    pub identity: f64,
    pub load: f64,
    pub orthogonality: f64,
    pub variance: f64,
    pub demo_specialization: f64,
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { annotator: 0.0, identity: 0.0, load: 0.0, orthogonality: 0.0, variance: 0.0, demo_specialization: 0.0 }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        let all = [self.annotator, self.identity, self.load, self.orthogonality, self.variance, self.demo_specialization];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TrainingError::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn with_phase(mut self, phase: PhaseWeights) -> Self {
        self.load = phase.load;
        self.orthogonality = phase.orthogonality;
        self.variance = phase.variance;
        self
    }
}

/// Direction applied to the subgroup symmetric-KL term. `Minimize` adds it
/// with a positive weight as in the printed objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoDirection {
    #[default]
    Minimize,
    Maximize,
}

impl DemoDirection {
    pub fn sign(self) -> f64 {
        match self {
            DemoDirection::Minimize => 1.0,
            DemoDirection::Maximize => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseWeights {
    pub load: f64,
    pub orthogonality: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    /// Per-phase weights, indexed A, B, C.
    pub load: [f64; 3],
    pub orthogonality: [f64; 3],
    pub variance: [f64; 3],
    pub tau_ab: f64,
    pub tau_bc: f64,
    /// Decay of the moving average of batch load std.
    pub ema_decay: f64,
}

pub const DEFAULT_TAU_AB: f64 = 0.3;
pub const DEFAULT_TAU_BC: f64 = 0.15;
pub const DEFAULT_EMA_DECAY: f64 = 0.9;

impl PhaseSchedule {
    pub fn constant(load: f64, orthogonality: f64, variance: f64) -> Self {
        Self {
            load: [load; 3],
            orthogonality: [orthogonality; 3],
            variance: [variance; 3],
            tau_ab: DEFAULT_TAU_AB,
            tau_bc: DEFAULT_TAU_BC,
            ema_decay: DEFAULT_EMA_DECAY,
        }
    }

    pub fn weights(&self, phase: Phase) -> PhaseWeights {
        let i = phase.index();
        PhaseWeights { load: self.load[i], orthogonality: self.orthogonality[i], variance: self.variance[i] }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        if !(self.tau_ab > 0.0 && self.tau_bc > 0.0) || !self.tau_ab.is_finite() || !self.tau_bc.is_finite() {
            return Err(TrainingError::InvalidConfig("phase thresholds must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(TrainingError::InvalidConfig("ema_decay must lie in [0, 1)".into()));
        }
        let all = self.load.iter().chain(&self.orthogonality).chain(&self.variance);
        if all.into_iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TrainingError::InvalidConfig("phase weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Advances at most one phase given the running load std.
pub fn phase_step(schedule: &PhaseSchedule, current: Phase, running_load_std: f64) -> (Phase, PhaseWeights) {
    let next = match current {
        Phase::A if running_load_std < schedule.tau_ab => Phase::B,
        Phase::B if running_load_std < schedule.tau_bc => Phase::C,
        p => p,
    };
    (next, schedule.weights(next))
}

/// Keeps the moving average of batch load std and the active phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTracker {
    pub phase: Phase,
    pub running: Option<f64>,
}

impl Default for PhaseTracker {
    fn default() -> Self {
        Self { phase: Phase::A, running: None }
    }
}

impl PhaseTracker {
    /// Folds one batch value into the average and returns the phase for the next step.
    pub fn observe(&mut self, schedule: &PhaseSchedule, batch_load_std: f64) -> Phase {
        let r = match self.running {
            None => batch_load_std,
            Some(prev) => schedule.ema_decay * prev + (1.0 - schedule.ema_decay) * batch_load_std,
        };
        self.running = Some(r);
        self.phase = phase_step(schedule, self.phase, r).0;
        self.phase
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub kl_annotator: f64,
    pub kl_demographic: f64,
    pub load_std: f64,
    pub orthogonality: f64,
    pub variance: f64,
    pub demo_specialization: f64,
    pub total: f64,
    pub active_phase: Phase,
}

impl LossBreakdown {
    /// Recomputes the weighted sum from the components.
    pub fn weighted_total(&self, w: &LossWeights, direction: DemoDirection) -> f64 {
        self.mse
            + w.annotator * self.kl_annotator
            + w.identity * self.kl_demographic
            + w.load * self.load_std
            + w.orthogonality * self.orthogonality
            + w.variance * self.variance
            + direction.sign() * w.demo_specialization * self.demo_specialization
    }

    fn components(&self) -> [f64; 8] {
        [
            self.mse,
            self.kl_annotator,
            self.kl_demographic,
            self.load_std,
            self.orthogonality,
            self.variance,
            self.demo_specialization,
            self.total,
        ]
    }

    /// Field-wise mean, taking the phase of the last entry.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let last = items.last()?;
        let mut acc = [0.0; 8];
        for b in items {
            for (a, v) in acc.iter_mut().zip(b.components()) {
                *a += v;
            }
        }
        let n = items.len() as f64;
        let [mse, kl_annotator, kl_demographic, load_std, orthogonality, variance, demo_specialization, total] =
            acc.map(|v| v / n);
        Some(LossBreakdown {
            mse,
            kl_annotator,
            kl_demographic,
            load_std,
            orthogonality,
            variance,
            demo_specialization,
            total,
            active_phase: last.active_phase,
        })
    }
}
