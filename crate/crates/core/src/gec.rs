//! Guided error correction.
//!
//! Every incorrect response in a training group independently draws one of
//! three interventions:
//!
//! | action                | default prob | result                                              |
//! |-----------------------|--------------|-----------------------------------------------------|
//! | `PromptRegenerate`    | 0.50         | response ++ reflection prompt ++ fresh continuation |
//! | `AnswerInjection`     | 0.25         | response ++ reflection prompt ++ `<ans> gt <eos>`   |
//! | `SolutionReplacement` | 0.25         | the question's reference trace                      |
//!
//! Corrected sequences are rescored under the current policy, so the stored
//! old log-probabilities of injected or replaced tokens equal the current
//! ones and their importance ratio starts at exactly 1.
//!
//! [`forced_reflection`] is the evaluation-side primitive: append one of four
//! reflection prompts to a wrong answer and let the policy continue.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, SampledResponse, ScoredSequence};
use crate::tasks::{verify_with, QuestionInstance, RewardRule, Verdict};
use crate::vocab::{
    Token, TokenSeq, ANSWER_MARK, EOS, REFLECT_CHECK, REFLECT_HMM, REFLECT_WAIT, REFLECT_WRONG,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GecAction {
    PromptRegenerate,
    AnswerInjection,
    SolutionReplacement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OldLogprobSource {
    GenerationTime,
    RescoredAtInjection,
}

/// "Wait!", "Hmm", "Let's check it again!", "Something is wrong here."
pub const REFLECTION_PROMPTS: [&[Token]; 4] = [
    &[REFLECT_WAIT],
    &[REFLECT_HMM],
    &[REFLECT_CHECK],
    &[REFLECT_WRONG],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GecConfig {
    pub p_regenerate: f64,
    pub p_inject: f64,
    pub p_replace: f64,
    pub reflection_prompt: TokenSeq,
}

impl Default for GecConfig {
    fn default() -> Self {
        GecConfig {
            p_regenerate: 0.5,
            p_inject: 0.25,
            p_replace: 0.25,
            reflection_prompt: REFLECTION_PROMPTS[0].to_vec(),
        }
    }
}

impl GecConfig {
    /// Regenerate-only correction, i.e. forced reflection on every wrong answer.
    pub fn forced_reflection_only(&self) -> Self {
        GecConfig {
            p_regenerate: 1.0,
            p_inject: 0.0,
            p_replace: 0.0,
            reflection_prompt: self.reflection_prompt.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_regenerate, self.p_inject, self.p_replace];
        if ps.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid(format!(
                "GEC probabilities must be finite and nonnegative, got {ps:?}"
            )));
        }
        let total: f64 = ps.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "GEC probabilities must sum to 1, got {total}"
            )));
        }
        Ok(())
    }

    /// Maps a uniform draw `u ∈ [0, 1)` onto an action by cumulative
    /// probability.
    pub fn action_for(&self, u: f64) -> GecAction {
        if u < self.p_regenerate {
            GecAction::PromptRegenerate
        } else if u < self.p_regenerate + self.p_inject {
            GecAction::AnswerInjection
        } else {
            GecAction::SolutionReplacement
        }
    }
}

pub fn sample_action<R: Rng + ?Sized>(config: &GecConfig, rng: &mut R) -> GecAction {
    config.action_for(rng.gen::<f64>())
}

/// Sampling settings shared by rollouts and corrections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSettings {
    pub temperature: f64,
    /// Cap on prompt plus response length.
    pub max_len: usize,
    pub reward: RewardRule,
}

impl RolloutSettings {
    /// Response budget left after `prompt`.
    fn budget(&self, prompt: &[Token]) -> Result<usize> {
        match self.max_len.checked_sub(prompt.len()) {
            Some(b) if b > 0 => Ok(b),
            _ => Err(Error::invalid(format!(
                "prompt of {} tokens leaves no room under max_len {}",
                prompt.len(),
                self.max_len
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectedResponse {
    /// Final tokens with per-token log-probabilities and distributions.
    pub response: ScoredSequence,
    /// `None` for an untouched on-policy response.
    pub provenance: Option<GecAction>,
    pub old_logprob_source: OldLogprobSource,
    pub verdict: Verdict,
}

impl CorrectedResponse {
    pub fn original(response: SampledResponse, verdict: Verdict) -> Self {
        CorrectedResponse {
            response,
            provenance: None,
            old_logprob_source: OldLogprobSource::GenerationTime,
            verdict,
        }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.response.tokens
    }
}

/// Applies `action` to an incorrect response. The final sequence is scored
/// under `policy` at the sampling temperature.
pub fn apply<R: Rng + ?Sized>(
    action: GecAction,
    incorrect: &SampledResponse,
    question: &QuestionInstance,
    policy: &PolicyParams,
    config: &GecConfig,
    settings: &RolloutSettings,
    rng: &mut R,
) -> Result<CorrectedResponse> {
    let before = verify_with(question, &incorrect.tokens, settings.reward);
    if before.correct {
        return Err(Error::AlreadyCorrect(before.reward));
    }
    let (tokens, source) = match action {
        GecAction::PromptRegenerate => {
            let mut tokens = incorrect.tokens.clone();
            tokens.extend_from_slice(&config.reflection_prompt);
            let continuation = continue_after(policy, question, &tokens, settings, rng)?;
            tokens.extend_from_slice(&continuation.tokens);
            (tokens, OldLogprobSource::GenerationTime)
        }
        GecAction::AnswerInjection => {
            let mut tokens = incorrect.tokens.clone();
            tokens.extend_from_slice(&config.reflection_prompt);
            tokens.extend([ANSWER_MARK, question.ground_truth, EOS]);
            (tokens, OldLogprobSource::RescoredAtInjection)
        }
        GecAction::SolutionReplacement => (
            question.reference_solution.clone(),
            OldLogprobSource::RescoredAtInjection,
        ),
    };
    let response = policy.score_sequence(&question.prompt, &tokens, settings.temperature)?;
    let verdict = verify_with(question, &tokens, settings.reward);
    Ok(CorrectedResponse {
        response,
        provenance: Some(action),
        old_logprob_source: source,
        verdict,
    })
}

/// Samples a continuation of `question.prompt ++ partial` with a fresh
/// response budget.
fn continue_after<R: Rng + ?Sized>(
    policy: &PolicyParams,
    question: &QuestionInstance,
    partial: &[Token],
    settings: &RolloutSettings,
    rng: &mut R,
) -> Result<SampledResponse> {
    let budget = settings.budget(&question.prompt)?;
    let mut prefix = question.prompt.clone();
    prefix.extend_from_slice(partial);
    let max_len = prefix.len() + budget;
    policy.sample_response(&prefix, settings.temperature, max_len, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionAttempt {
    /// `incorrect ++ prompt ++ continuation`.
    pub tokens: TokenSeq,
    pub continuation: SampledResponse,
    pub verdict: Verdict,
}

/// Appends reflection prompt `prompt_id` to an incorrect response and lets
/// the policy continue. Temperature 0 decodes greedily.
pub fn forced_reflection<R: Rng + ?Sized>(
    policy: &PolicyParams,
    question: &QuestionInstance,
    incorrect: &[Token],
    prompt_id: usize,
    settings: &RolloutSettings,
    rng: &mut R,
) -> Result<ReflectionAttempt> {
    let prompt = REFLECTION_PROMPTS.get(prompt_id).ok_or_else(|| {
        Error::invalid(format!(
            "reflection prompt id must be 0..{}, got {prompt_id}",
            REFLECTION_PROMPTS.len()
        ))
    })?;
    let before = verify_with(question, incorrect, settings.reward);
    if before.correct {
        return Err(Error::AlreadyCorrect(before.reward));
    }
    let mut tokens = incorrect.to_vec();
    tokens.extend_from_slice(prompt);
    let continuation = continue_after(policy, question, &tokens, settings, rng)?;
    tokens.extend_from_slice(&continuation.tokens);
    let verdict = verify_with(question, &tokens, settings.reward);
    Ok(ReflectionAttempt {
        tokens,
        continuation,
        verdict,
    })
}
