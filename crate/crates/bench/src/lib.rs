//! Fixtures shared by the criterion benches.

use edge_grpo::tasks::{generate_question, QuestionInstance, TaskSpec};
use edge_grpo::{PolicyParams, Vocab};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn question(spec: &TaskSpec, seed: u64) -> QuestionInstance {
    generate_question(
        spec,
        &Vocab::default(),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .expect("valid spec")
}

pub fn uniform_policy() -> PolicyParams {
    PolicyParams::new(Vocab::default(), 2)
}
