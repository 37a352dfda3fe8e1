//! The EDGE-GRPO training loop.
//!
//! One step draws one question, samples a group of `G` responses, runs
//! guided error correction on the wrong ones (in modes that use it),
//! computes group-relative advantages (entropy-scaled in EDA modes) and takes
//! one exact-gradient ascent step on the clipped surrogate
//!
//! ```text
//! J = 1/G Σ_i 1/|o_i| Σ_t [ min(ρ_it A_i, clip(ρ_it, 1-ε, 1+ε) A_i) - β KL_t ]
//! ```
//!
//! with `β = 0` by default. There is a single optimizer pass per rollout, so
//! the old policy is the rollout-time policy and every ratio starts at 1.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::{advantage_variance, group_advantages, AdvantageVector};
use crate::entropy::response_entropy;
use crate::error::{Error, Result};
use crate::gec::{self, CorrectedResponse, GecAction, GecConfig, RolloutSettings};
use crate::metrics::{GecCounts, MetricsRecord, MetricsWriter};
use crate::policy::{log_softmax_at, softmax_with_temperature, Gradient, PolicyParams};
use crate::tasks::{verify_with, QuestionInstance, RewardRule, TaskMix, TaskSpec};
use crate::vocab::{Vocab, DEFAULT_DIGITS};

/// Individual entropies are floored here before scaling so that a fully
/// deterministic member cannot divide by zero.
const MEMBER_ENTROPY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Vanilla,
    ForceR,
    ForceREda,
    Edge,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Vanilla, Mode::ForceR, Mode::ForceREda, Mode::Edge];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::ForceR => "force-r",
            Mode::ForceREda => "force-r-eda",
            Mode::Edge => "edge",
        }
    }

    pub fn uses_eda(self) -> bool {
        matches!(self, Mode::ForceREda | Mode::Edge)
    }

    /// Correction config in effect for this mode, if any.
    pub fn gec(self, base: &GecConfig) -> Option<GecConfig> {
        match self {
            Mode::Vanilla => None,
            Mode::ForceR | Mode::ForceREda => Some(base.forced_reflection_only()),
            Mode::Edge => Some(base.clone()),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown mode {s:?} (expected vanilla, force-r, force-r-eda or edge)"
                ))
            })
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub steps: usize,
    pub group_size: usize,
    pub temperature: f64,
    pub clip_eps: f64,
    pub lr: f64,
    pub kl_beta: f64,
    /// Cap on prompt plus response tokens.
    pub max_len: usize,
    pub context_order: usize,
    pub digits: u32,
    pub task: TaskMix,
    /// Held-out evaluation mix; defaults to `task`.
    pub eval_task: Option<TaskMix>,
    pub eval_questions: usize,
    /// Evaluate every this many steps (0: only before and after training).
    pub eval_every: usize,
    pub gec: GecConfig,
    pub reward: RewardRule,
    /// Record per-step wall-clock milliseconds in the metrics.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Edge,
            seed: 0,
            steps: 1500,
            group_size: 8,
            temperature: 1.0,
            clip_eps: 0.2,
            lr: 4.0,
            kl_beta: 0.0,
            max_len: 20,
            context_order: 2,
            digits: DEFAULT_DIGITS,
            task: TaskSpec::easy().into(),
            eval_task: None,
            eval_questions: 200,
            eval_every: 100,
            gec: GecConfig::default(),
            reward: RewardRule::default(),
            record_timing: true,
        }
    }
}

impl TrainConfig {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.digits)
    }

    pub fn settings(&self) -> RolloutSettings {
        RolloutSettings {
            temperature: self.temperature,
            max_len: self.max_len,
            reward: self.reward,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vocab = self.vocab()?;
        if self.group_size < 2 {
            return Err(Error::GroupTooSmall(self.group_size));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be finite and > 0, got {}",
                self.temperature
            )));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::invalid(format!(
                "clip_eps must lie in (0, 1), got {}",
                self.clip_eps
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::invalid(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(self.kl_beta.is_finite() && self.kl_beta >= 0.0) {
            return Err(Error::invalid(format!(
                "kl_beta must be >= 0, got {}",
                self.kl_beta
            )));
        }
        self.task.validate(&vocab)?;
        let eval = self.eval_mix();
        eval.validate(&vocab)?;
        let longest = self.task.longest_prompt().max(eval.longest_prompt());
        if self.max_len <= longest {
            return Err(Error::invalid(format!(
                "max_len {} leaves no room after a {longest}-token prompt",
                self.max_len
            )));
        }
        if self.mode.gec(&self.gec).is_some() {
            self.gec.validate()?;
            vocab.check(&self.gec.reflection_prompt)?;
        }
        Ok(())
    }

    pub fn eval_mix(&self) -> &TaskMix {
        self.eval_task.as_ref().unwrap_or(&self.task)
    }
}

/// One question's responses after correction.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRollout {
    pub question: QuestionInstance,
    pub members: Vec<CorrectedResponse>,
    pub rewards: Vec<f64>,
    /// Rewards of the uncorrected samples.
    pub raw_rewards: Vec<f64>,
    /// Per-member, per-token log-probabilities under the rollout policy.
    pub old_logprobs: Vec<Vec<f64>>,
    /// Per-member token-averaged entropy of the final sequence.
    pub entropies: Vec<f64>,
}

impl GroupRollout {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn gec_counts(&self) -> GecCounts {
        let mut c = GecCounts::default();
        for m in &self.members {
            match m.provenance {
                None => c.untouched += 1,
                Some(GecAction::PromptRegenerate) => c.regenerated += 1,
                Some(GecAction::AnswerInjection) => c.injected += 1,
                Some(GecAction::SolutionReplacement) => c.replaced += 1,
            }
        }
        c
    }
}

/// Mixes a seed with stream coordinates (splitmix64 finalizer).
fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F).rotate_left(29);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples `group_size` responses to `question` and, when `gec` is given,
/// corrects each wrong one. Every member draws from its own stream seeded by
/// `rng`, so members are independent of each other's lengths.
pub fn rollout_group<R: Rng + ?Sized>(
    policy: &PolicyParams,
    question: &QuestionInstance,
    group_size: usize,
    gec: Option<&GecConfig>,
    settings: &RolloutSettings,
    rng: &mut R,
) -> Result<GroupRollout> {
    if group_size < 2 {
        return Err(Error::GroupTooSmall(group_size));
    }
    let seeds: Vec<u64> = (0..group_size).map(|_| rng.gen()).collect();
    let mut members = Vec::with_capacity(group_size);
    let mut raw_rewards = Vec::with_capacity(group_size);
    for seed in seeds {
        let mut member_rng = ChaCha8Rng::seed_from_u64(seed);
        let sampled = policy.sample_response(
            &question.prompt,
            settings.temperature,
            settings.max_len,
            &mut member_rng,
        )?;
        let verdict = verify_with(question, &sampled.tokens, settings.reward);
        raw_rewards.push(verdict.reward);
        let member = match gec {
            Some(cfg) if !verdict.correct => {
                let action = gec::sample_action(cfg, &mut member_rng);
                gec::apply(
                    action,
                    &sampled,
                    question,
                    policy,
                    cfg,
                    settings,
                    &mut member_rng,
                )?
            }
            _ => CorrectedResponse::original(sampled, verdict),
        };
        members.push(member);
    }
    let rewards = members.iter().map(|m| m.verdict.reward).collect();
    let old_logprobs = members
        .iter()
        .map(|m| m.response.per_token_logprob.clone())
        .collect();
    let entropies = members
        .iter()
        .map(|m| response_entropy(&m.response.per_token_dist))
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupRollout {
        question: question.clone(),
        members,
        rewards,
        raw_rewards,
        old_logprobs,
        entropies,
    })
}

/// Base advantages, entropy-scaled when `eda` is set. The flag in the
/// second slot reports the degenerate-entropy guard.
pub fn compute_advantages(group: &GroupRollout, eda: bool) -> Result<(AdvantageVector, bool)> {
    let base = group_advantages(&group.rewards)?;
    if !eda {
        return Ok((base, false));
    }
    let floored: Vec<f64> = group
        .entropies
        .iter()
        .map(|&p| p.max(MEMBER_ENTROPY_FLOOR))
        .collect();
    base.with_entropies(&floored)
}

/// Reference policy and weight for the optional KL penalty.
#[derive(Debug, Clone, Copy)]
pub struct KlPenalty<'a> {
    pub reference: &'a PolicyParams,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SurrogateStats {
    pub objective: f64,
    /// Fraction of tokens whose ratio sits in the flat (clipped) region.
    pub clip_fraction: f64,
}

fn check_group(group: &GroupRollout, adv: &[f64]) -> Result<()> {
    if adv.len() != group.len() {
        return Err(Error::LengthMismatch {
            what: "advantages vs group members",
            left: adv.len(),
            right: group.len(),
        });
    }
    for (m, old) in group.members.iter().zip(&group.old_logprobs) {
        if old.len() != m.response.len() {
            return Err(Error::LengthMismatch {
                what: "old log-probabilities vs tokens",
                left: old.len(),
                right: m.response.len(),
            });
        }
        if m.response.is_empty() {
            return Err(Error::EmptyInput("group member has no tokens"));
        }
    }
    Ok(())
}

fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

/// Walks every token of the group once, returning the objective and,
/// if requested, its exact gradient.
fn surrogate_pass(
    group: &GroupRollout,
    adv: &[f64],
    clip_eps: f64,
    policy: &PolicyParams,
    kl: Option<KlPenalty<'_>>,
    mut grad: Option<&mut Gradient>,
) -> Result<SurrogateStats> {
    check_group(group, adv)?;
    let g = group.len() as f64;
    let width = policy.vocab().size();
    let mut objective = 0.0;
    let (mut clipped, mut total_tokens) = (0usize, 0usize);

    for ((member, old), &a) in group.members.iter().zip(&group.old_logprobs).zip(adv) {
        let tokens = &member.response.tokens;
        let temperature = member.response.temperature;
        let weight = 1.0 / (g * tokens.len() as f64);
        let contexts = policy.contexts_for(&group.question.prompt, tokens);
        let mut member_sum = 0.0;
        for ((ctx, &token), &old_lp) in contexts.iter().zip(tokens).zip(old) {
            let logits = policy.logits(ctx);
            let lp = log_softmax_at(&logits, temperature, token);
            let ratio = (lp - old_lp).exp();
            if !ratio.is_finite() {
                return Err(Error::NonFinite("importance ratio"));
            }
            let clipped_ratio = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
            let unclipped = ratio * a;
            let term = unclipped.min(clipped_ratio * a);
            let active =
                (a > 0.0 && ratio <= 1.0 + clip_eps) || (a < 0.0 && ratio >= 1.0 - clip_eps);
            if a != 0.0 && !active {
                clipped += 1;
            }
            total_tokens += 1;
            member_sum += term;

            let needs_dist = grad.is_some() || kl.is_some();
            let dist = if needs_dist {
                softmax_with_temperature(&logits, temperature)
            } else {
                Vec::new()
            };
            let kl_term = kl.map(|k| {
                let reference = softmax_with_temperature(&k.reference.logits(ctx), temperature);
                let d = kl_divergence(&dist, &reference);
                (k.beta, reference, d)
            });
            if let Some((beta, _, d)) = &kl_term {
                member_sum -= beta * d;
            }

            if let Some(grad) = grad.as_deref_mut() {
                let row = grad.row_mut(ctx, width);
                if active {
                    // d/dz_m [ρ A] = ρ A (δ_jm - p_m) / T
                    let coef = weight * unclipped / temperature;
                    for (m, (r, p)) in row.iter_mut().zip(&dist).enumerate() {
                        let delta = if m == token as usize { 1.0 } else { 0.0 };
                        *r += coef * (delta - p);
                    }
                }
                if let Some((beta, reference, d)) = &kl_term {
                    // d/dz_m KL(p||q) = p_m (ln p_m - ln q_m - KL) / T
                    let coef = weight * beta / temperature;
                    for ((r, &p), &q) in row.iter_mut().zip(&dist).zip(reference) {
                        if p > 0.0 {
                            *r -= coef * p * (p.ln() - q.ln() - d);
                        }
                    }
                }
            }
        }
        objective += member_sum / tokens.len() as f64;
    }
    Ok(SurrogateStats {
        objective: objective / g,
        clip_fraction: if total_tokens == 0 {
            0.0
        } else {
            clipped as f64 / total_tokens as f64
        },
    })
}

/// Clipped surrogate objective of `group` under `policy`, using the
/// group's stored old log-probabilities.
pub fn surrogate_objective(
    group: &GroupRollout,
    adv: &[f64],
    clip_eps: f64,
    policy: &PolicyParams,
    kl: Option<KlPenalty<'_>>,
) -> Result<f64> {
    Ok(surrogate_pass(group, adv, clip_eps, policy, kl, None)?.objective)
}

/// Exact gradient of [`surrogate_objective`] with respect to every logit
/// row the group touches. Tokens in the flat clipped region contribute
/// nothing.
pub fn surrogate_gradient(
    group: &GroupRollout,
    adv: &[f64],
    clip_eps: f64,
    policy: &PolicyParams,
    kl: Option<KlPenalty<'_>>,
) -> Result<(Gradient, SurrogateStats)> {
    let mut grad = Gradient::new();
    let stats = surrogate_pass(group, adv, clip_eps, policy, kl, Some(&mut grad))?;
    Ok((grad, stats))
}

/// Greedy-decoding accuracy on `questions`.
pub fn greedy_accuracy(
    policy: &PolicyParams,
    questions: &[QuestionInstance],
    max_len: usize,
) -> Result<f64> {
    if questions.is_empty() {
        return Err(Error::EmptyInput("evaluation questions"));
    }
    // greedy decoding never consumes randomness
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut correct = 0usize;
    for q in questions {
        let r = policy.sample_response(&q.prompt, 0.0, max_len, &mut rng)?;
        if verify_with(q, &r.tokens, RewardRule::default()).correct {
            correct += 1;
        }
    }
    Ok(correct as f64 / questions.len() as f64)
}

/// Everything one update produced.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub group: GroupRollout,
    pub advantages: AdvantageVector,
    pub gradient: Gradient,
    pub record: MetricsRecord,
}

const QUESTION_STREAM: u64 = 1;
const ROLLOUT_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

pub struct Trainer {
    config: TrainConfig,
    vocab: Vocab,
    policy: PolicyParams,
    reference: PolicyParams,
    gec: Option<GecConfig>,
    eval_set: Vec<QuestionInstance>,
    question_rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let vocab = config.vocab()?;
        let policy = PolicyParams::new(vocab, config.context_order);
        Self::with_policy(config, policy)
    }

    /// Starts from given parameters (which also serve as the KL reference).
    pub fn with_policy(config: TrainConfig, policy: PolicyParams) -> Result<Self> {
        config.validate()?;
        let vocab = config.vocab()?;
        if policy.vocab() != vocab {
            return Err(Error::invalid("policy vocabulary differs from config"));
        }
        let mut eval_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, EVAL_STREAM, 0));
        let eval_set =
            config
                .eval_mix()
                .sample_set(&vocab, config.eval_questions, &mut eval_rng)?;
        Ok(Trainer {
            gec: config.mode.gec(&config.gec),
            question_rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, QUESTION_STREAM, 0)),
            reference: policy.clone(),
            policy,
            vocab,
            eval_set,
            config,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn policy(&self) -> &PolicyParams {
        &self.policy
    }

    pub fn eval_set(&self) -> &[QuestionInstance] {
        &self.eval_set
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn evaluate(&self) -> Result<f64> {
        if self.eval_set.is_empty() {
            return Ok(0.0);
        }
        greedy_accuracy(&self.policy, &self.eval_set, self.config.max_len)
    }

    fn kl(&self) -> Option<KlPenalty<'_>> {
        (self.config.kl_beta > 0.0).then_some(KlPenalty {
            reference: &self.reference,
            beta: self.config.kl_beta,
        })
    }

    /// Runs one rollout-and-update on a freshly drawn question.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let question = self
            .config
            .task
            .sample(&self.vocab, &mut self.question_rng)?;
        self.step_on(&question)
    }

    /// Runs one rollout-and-update on a given question.
    pub fn step_on(&mut self, question: &QuestionInstance) -> Result<StepOutcome> {
        let step = self.step;
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, ROLLOUT_STREAM, step as u64));
        let settings = self.config.settings();
        let group = rollout_group(
            &self.policy,
            question,
            self.config.group_size,
            self.gec.as_ref(),
            &settings,
            &mut rng,
        )?;
        let (advantages, entropy_guard) = compute_advantages(&group, self.config.mode.uses_eda())?;
        let (gradient, stats) = surrogate_gradient(
            &group,
            &advantages.entropy_scaled,
            self.config.clip_eps,
            &self.policy,
            self.kl(),
        )?;
        if !stats.objective.is_finite() || !gradient.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        self.policy.apply_gradient(&gradient, self.config.lr)?;
        self.step += 1;

        let g = group.len() as f64;
        let record = MetricsRecord {
            step,
            mean_reward: group.rewards.iter().sum::<f64>() / g,
            advantage_variance: advantage_variance(&advantages.entropy_scaled)?,
            base_advantage_variance: advantage_variance(&advantages.base)?,
            mean_entropy: group.entropies.iter().sum::<f64>() / g,
            collapsed_group: advantages.collapsed,
            pre_gec_collapsed: group.raw_rewards.iter().all(|&r| r == group.raw_rewards[0]),
            entropy_guard,
            gec_counts: group.gec_counts(),
            objective: stats.objective,
            clip_fraction: stats.clip_fraction,
            eval_accuracy: None,
            wall_ms: None,
        };
        Ok(StepOutcome {
            group,
            advantages,
            gradient,
            record,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub steps: usize,
    pub initial_eval_accuracy: f64,
    pub final_eval_accuracy: f64,
    /// Run mean of the per-step advantage variance.
    pub mean_advantage_variance: f64,
    pub collapsed_fraction: f64,
    pub metrics_path: PathBuf,
    pub policy_path: PathBuf,
}

pub fn metrics_file_name(mode: Mode) -> String {
    format!("metrics-{}.jsonl", mode.name())
}

pub fn policy_file_name(mode: Mode) -> String {
    format!("policy-{}.txt", mode.name())
}

/// Full training run. Writes `metrics-<mode>.jsonl` and the final policy
/// snapshot `policy-<mode>.txt` into `out_dir`.
pub fn train(config: &TrainConfig, out_dir: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut trainer = Trainer::new(config.clone())?;
    let metrics_path = out_dir.join(metrics_file_name(config.mode));
    let policy_path = out_dir.join(policy_file_name(config.mode));
    let mut writer = MetricsWriter::create(&metrics_path)?;

    let initial = trainer.evaluate()?;
    let mut last_eval = initial;
    let (mut var_sum, mut collapsed) = (0.0, 0usize);
    for step in 0..config.steps {
        let started = Instant::now();
        let mut record = trainer.step()?.record;
        let done = step + 1;
        if (config.eval_every > 0 && done % config.eval_every == 0) || done == config.steps {
            last_eval = trainer.evaluate()?;
            record.eval_accuracy = Some(last_eval);
        }
        if config.record_timing {
            record.wall_ms = Some(started.elapsed().as_millis() as u64);
        }
        var_sum += record.advantage_variance;
        collapsed += record.collapsed_group as usize;
        writer.append(&record)?;
    }
    let metrics_path = writer.finish()?;
    trainer.policy().save(&policy_path)?;
    let n = config.steps.max(1) as f64;
    Ok(RunSummary {
        mode: config.mode,
        seed: config.seed,
        steps: config.steps,
        initial_eval_accuracy: initial,
        final_eval_accuracy: last_eval,
        mean_advantage_variance: var_sum / n,
        collapsed_fraction: collapsed as f64 / n,
        metrics_path,
        policy_path,
    })
}
