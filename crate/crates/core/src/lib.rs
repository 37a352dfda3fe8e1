//! EDGE-GRPO on a tabular token policy.
//!
//! GRPO with entropy-driven advantages and guided error correction, small
//! enough to train with exact gradients on synthetic arithmetic chains.
//!
//! - [`policy`]: tabular softmax policy, sampling, scoring, ascent steps
//! - [`tasks`]: question generator and rule verifier
//! - [`advantage`]: group-relative and entropy-driven advantages
//! - [`entropy`]: response entropy, RCM, calibration fractions
//! - [`gec`]: guided error correction and forced reflection
//! - [`trainer`]: rollout, clipped surrogate and its gradient, training loop
//! - [`analytics`]: response-log analysis and metrics export

pub mod advantage;
pub mod analytics;
pub mod entropy;
pub mod error;
pub mod gec;
pub mod metrics;
pub mod policy;
pub mod tasks;
pub mod trainer;
pub mod vocab;

pub use advantage::{
    advantage_variance, entropy_driven_advantages, group_advantages, scaled_entropies,
    AdvantageVector,
};
pub use entropy::{calibration_fractions, rcm, response_entropy, CalibrationStats, EntropyRecord};
pub use error::{Error, Result};
pub use gec::{CorrectedResponse, GecAction, GecConfig, RolloutSettings};
pub use metrics::{GecCounts, MetricsRecord};
pub use policy::{Context, Gradient, PolicyParams, SampledResponse, ScoredSequence};
pub use tasks::{generate_question, verify, QuestionInstance, TaskMix, TaskSpec, Verdict};
pub use trainer::{train, Mode, RunSummary, TrainConfig, Trainer};
pub use vocab::{Token, TokenSeq, Vocab};
