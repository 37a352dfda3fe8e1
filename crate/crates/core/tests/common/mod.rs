//! Test-only oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use edge_grpo::gec::{GecConfig, RolloutSettings, REFLECTION_PROMPTS};
use edge_grpo::policy::{Context, Gradient, PolicyParams};
use edge_grpo::tasks::{generate_question, QuestionInstance, RewardRule, TaskSpec};
use edge_grpo::trainer::{
    compute_advantages, rollout_group, surrogate_objective, GroupRollout, KlPenalty, Mode,
};
use edge_grpo::vocab::{Token, Vocab, ANSWER_MARK, EOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn settings(temperature: f64) -> RolloutSettings {
    RolloutSettings {
        temperature,
        max_len: 20,
        reward: RewardRule::default(),
    }
}

pub fn question(spec: &TaskSpec, seed: u64) -> QuestionInstance {
    generate_question(
        spec,
        &Vocab::default(),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap()
}

fn force(p: &mut PolicyParams, q: &QuestionInstance, recent: Vec<Token>, token: Token) {
    let mut row = vec![0.0; p.vocab().size()];
    row[token as usize] = 60.0;
    p.set_logits(
        Context {
            question: q.prompt.clone(),
            recent,
        },
        row,
    )
    .unwrap();
}

/// Deterministically answers `q` with a wrong digit, before and after any
/// reflection prompt.
pub fn always_wrong(questions: &[&QuestionInstance]) -> PolicyParams {
    let vocab = Vocab::default();
    let mut p = PolicyParams::new(vocab, 2);
    for q in questions {
        let wrong = if q.ground_truth == vocab.digit(0) {
            vocab.digit(1)
        } else {
            vocab.digit(0)
        };
        force(&mut p, q, vec![], ANSWER_MARK);
        force(&mut p, q, vec![ANSWER_MARK], wrong);
        force(&mut p, q, vec![ANSWER_MARK, wrong], EOS);
        for prompt in REFLECTION_PROMPTS {
            force(&mut p, q, vec![EOS, prompt[0]], ANSWER_MARK);
            force(&mut p, q, vec![prompt[0], ANSWER_MARK], wrong);
        }
    }
    p
}

/// Deterministically emits `<ans> answer <eos>`.
pub fn always_correct(q: &QuestionInstance) -> PolicyParams {
    let mut p = PolicyParams::new(Vocab::default(), 2);
    force(&mut p, q, vec![], ANSWER_MARK);
    force(&mut p, q, vec![ANSWER_MARK], q.ground_truth);
    force(&mut p, q, vec![ANSWER_MARK, q.ground_truth], EOS);
    p
}

/// A gradient-check instance: a real rollout under `mode`, re-keyed onto a
/// random policy, with stored old log-probabilities shifted so the ratios
/// land in chosen regimes away from the clip kinks.
pub struct Instance {
    pub policy: PolicyParams,
    pub group: GroupRollout,
    pub adv: Vec<f64>,
    pub clip_eps: f64,
    pub reference: Option<(PolicyParams, f64)>,
}

impl Instance {
    pub fn kl(&self) -> Option<KlPenalty<'_>> {
        self.reference.as_ref().map(|(reference, beta)| KlPenalty {
            reference,
            beta: *beta,
        })
    }
}

/// `regime` 0: ratios inside the trust region; 1: ratios spread over both
/// clipped sides.
pub fn random_instance(seed: u64, mode: Mode, regime: usize, with_kl: bool) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocab::default();
    let spec = TaskSpec::new(rng.gen_range(1..=3), 10, &[edge_grpo::tasks::Op::Add]);
    let q = question(&spec, rng.gen());
    let temperature = rng.gen_range(0.5..1.5);
    let settings = RolloutSettings {
        temperature,
        max_len: 16,
        reward: RewardRule::default(),
    };
    let group_size = rng.gen_range(2..=6);
    let uniform = PolicyParams::new(vocab, 2);
    let gec = mode.gec(&GecConfig::default());
    let mut group =
        rollout_group(&uniform, &q, group_size, gec.as_ref(), &settings, &mut rng).unwrap();
    // give every member a distinct entropy profile under the random policy
    let mut policy = PolicyParams::new(vocab, 2);
    for m in &group.members {
        for ctx in policy.contexts_for(&q.prompt, &m.response.tokens) {
            let row = (0..vocab.size())
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect();
            policy.set_logits(ctx, row).unwrap();
        }
    }
    for (i, m) in group.members.iter_mut().enumerate() {
        m.response = policy
            .score_sequence(&q.prompt, &m.response.tokens, temperature)
            .unwrap();
        group.entropies[i] = edge_grpo::response_entropy(&m.response.per_token_dist).unwrap();
    }
    // a group that collapsed would zero out the surrogate; force a split
    if group.rewards.iter().all(|&r| r == group.rewards[0]) {
        group.rewards[0] = 1.0 - group.rewards[0];
    }
    let (adv, _) = compute_advantages(&group, mode.uses_eda()).unwrap();
    let clip_eps = 0.2;
    group.old_logprobs = group
        .members
        .iter()
        .map(|m| {
            m.response
                .per_token_logprob
                .iter()
                .map(|lp| {
                    let ratio: f64 = match regime {
                        0 => rng.gen_range(0.85..1.15),
                        _ => match rng.gen_range(0..3) {
                            0 => rng.gen_range(0.3..0.75),
                            1 => rng.gen_range(0.85..1.15),
                            _ => rng.gen_range(1.25..2.5),
                        },
                    };
                    lp - ratio.ln()
                })
                .collect()
        })
        .collect();
    let reference = with_kl.then(|| {
        let mut r = PolicyParams::new(vocab, 2);
        for (ctx, row) in policy.contexts() {
            let noisy = row.iter().map(|z| z + rng.gen_range(-1.0..1.0)).collect();
            r.set_logits(ctx.clone(), noisy).unwrap();
        }
        (r, rng.gen_range(0.01..0.5))
    });
    Instance {
        policy,
        group,
        adv: adv.entropy_scaled,
        clip_eps,
        reference,
    }
}

/// Central finite differences of the surrogate objective over every entry of
/// every row in `rows`.
pub fn finite_difference(inst: &Instance, rows: &[Context], h: f64) -> Gradient {
    let mut out = Gradient::new();
    let objective = |p: &PolicyParams| {
        let kl = inst.reference.as_ref().map(|(reference, beta)| KlPenalty {
            reference,
            beta: *beta,
        });
        surrogate_objective(&inst.group, &inst.adv, inst.clip_eps, p, kl).unwrap()
    };
    for ctx in rows {
        let base = inst.policy.logits(ctx);
        let mut fd = vec![0.0; base.len()];
        for m in 0..base.len() {
            let mut plus = inst.policy.clone();
            let mut row = base.clone();
            row[m] += h;
            plus.set_logits(ctx.clone(), row).unwrap();
            let mut minus = inst.policy.clone();
            let mut row = base.clone();
            row[m] -= h;
            minus.set_logits(ctx.clone(), row).unwrap();
            fd[m] = (objective(&plus) - objective(&minus)) / (2.0 * h);
        }
        out.insert(ctx.clone(), fd);
    }
    out
}

/// `max |a - n| / max(max |n|, 1e-8)` over the union of rows.
pub fn relative_error(analytic: &Gradient, numeric: &Gradient) -> f64 {
    let mut diff = 0.0_f64;
    for (ctx, n) in numeric.iter() {
        let zeros = vec![0.0; n.len()];
        let a = analytic.get(ctx).unwrap_or(&zeros);
        for (x, y) in a.iter().zip(n) {
            diff = diff.max((x - y).abs());
        }
    }
    for (ctx, a) in analytic.iter() {
        if numeric.get(ctx).is_none() {
            diff = diff.max(a.iter().fold(0.0_f64, |m, x| m.max(x.abs())));
        }
    }
    diff / numeric.max_abs().max(1e-8)
}

/// Every context the group's tokens are scored in.
pub fn touched_rows(inst: &Instance) -> Vec<Context> {
    let mut rows: Vec<Context> = inst
        .group
        .members
        .iter()
        .flat_map(|m| {
            inst.policy
                .contexts_for(&inst.group.question.prompt, &m.response.tokens)
        })
        .collect();
    rows.sort();
    rows.dedup();
    rows
}
