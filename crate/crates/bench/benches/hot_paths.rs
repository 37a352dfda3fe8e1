use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use edge_grpo::gec::{GecConfig, RolloutSettings};
use edge_grpo::tasks::{RewardRule, TaskSpec};
use edge_grpo::trainer::{compute_advantages, rollout_group, surrogate_gradient};
use edge_grpo::{group_advantages, Mode, TrainConfig, Trainer};
use edge_grpo_bench::{question, uniform_policy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn settings() -> RolloutSettings {
    RolloutSettings {
        temperature: 1.0,
        max_len: 20,
        reward: RewardRule::default(),
    }
}

fn policy_benches(c: &mut Criterion) {
    let policy = uniform_policy();
    let q = question(&TaskSpec::new(3, 10, &[edge_grpo::tasks::Op::Add]), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("sample_response", |b| {
        b.iter(|| {
            policy
                .sample_response(black_box(&q.prompt), 1.0, 20, &mut rng)
                .unwrap()
        })
    });
    c.bench_function("score_sequence", |b| {
        b.iter(|| {
            policy
                .score_sequence(black_box(&q.prompt), black_box(&q.reference_solution), 1.0)
                .unwrap()
        })
    });
}

fn group_benches(c: &mut Criterion) {
    let policy = uniform_policy();
    let q = question(&TaskSpec::easy(), 2);
    let gec = GecConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("rollout_group_g8_gec", |b| {
        b.iter(|| rollout_group(&policy, &q, 8, Some(&gec), &settings(), &mut rng).unwrap())
    });

    let group = rollout_group(&policy, &q, 8, Some(&gec), &settings(), &mut rng).unwrap();
    let (adv, _) = compute_advantages(&group, true).unwrap();
    c.bench_function("surrogate_gradient_g8", |b| {
        b.iter(|| {
            surrogate_gradient(black_box(&group), &adv.entropy_scaled, 0.2, &policy, None).unwrap()
        })
    });

    let rewards = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
    c.bench_function("group_advantages_g8", |b| {
        b.iter(|| group_advantages(black_box(&rewards)).unwrap())
    });
}

fn trainer_benches(c: &mut Criterion) {
    let mut trainer = Trainer::new(TrainConfig {
        mode: Mode::Edge,
        eval_questions: 0,
        ..TrainConfig::default()
    })
    .unwrap();
    c.bench_function("trainer_step_edge", |b| b.iter(|| trainer.step().unwrap()));
}

criterion_group!(benches, policy_benches, group_benches, trainer_benches);
criterion_main!(benches);
