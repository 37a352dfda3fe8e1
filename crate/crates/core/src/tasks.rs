//! Synthetic modular-arithmetic chains with step-by-step reference traces
//! and a rule verifier.
//!
//! A chain `a o1 b o2 c` is evaluated left to right, reducing by the modulus
//! after every step. The prompt is `<bos> a o1 b o2 c =`; the reference trace
//! lists every intermediate value and closes with `<ans> value <eos>`.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::vocab::{
    Token, TokenSeq, Vocab, ANSWER_MARK, BOS, EOS, OP_ADD, OP_MUL, OP_SUB, QUERY_END,
};

/// Reward added when a response emits an answer mark, if enabled.
pub const FORMAT_BONUS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    pub fn apply(self, a: u32, b: u32, modulus: u32) -> u32 {
        let (a, b, m) = (a as u64, b as u64, modulus as u64);
        let v = match self {
            Op::Add => (a + b) % m,
            Op::Sub => (a + m - b % m) % m,
            Op::Mul => (a * b) % m,
        };
        v as u32
    }

    pub fn token(self) -> Token {
        match self {
            Op::Add => OP_ADD,
            Op::Sub => OP_SUB,
            Op::Mul => OP_MUL,
        }
    }

    fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub chain_length: usize,
    pub modulus: u32,
    pub ops: Vec<Op>,
}

impl TaskSpec {
    pub fn new(chain_length: usize, modulus: u32, ops: &[Op]) -> Self {
        let mut ops = ops.to_vec();
        ops.sort();
        ops.dedup();
        TaskSpec {
            chain_length,
            modulus,
            ops,
        }
    }

    /// Single-step addition mod 10.
    pub fn easy() -> Self {
        TaskSpec::new(1, 10, &[Op::Add])
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.chain_length == 0 {
            return Err(Error::invalid("chain_length must be >= 1"));
        }
        if self.modulus < 2 {
            return Err(Error::invalid(format!(
                "modulus must be >= 2, got {}",
                self.modulus
            )));
        }
        if self.modulus > vocab.digits() {
            return Err(Error::invalid(format!(
                "modulus {} exceeds the {} digit tokens of the vocabulary",
                self.modulus,
                vocab.digits()
            )));
        }
        if self.ops.is_empty() {
            return Err(Error::invalid("op set must not be empty"));
        }
        Ok(())
    }

    /// Prompt length in tokens (`<bos>`, operands, operators, `=`).
    pub fn prompt_len(&self) -> usize {
        2 * self.chain_length + 3
    }

    /// Reference trace length in tokens.
    pub fn reference_len(&self) -> usize {
        self.chain_length + 2
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ops: String = self.ops.iter().map(|o| o.symbol()).collect();
        write!(f, "chain{}-mod{}-{}", self.chain_length, self.modulus, ops)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionInstance {
    pub id: String,
    #[serde(rename = "prompt_tokens")]
    pub prompt: TokenSeq,
    pub ground_truth: Token,
    #[serde(rename = "reference_tokens")]
    pub reference_solution: TokenSeq,
    pub spec: TaskSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub reward: f64,
    pub correct: bool,
    pub extracted: Option<Token>,
    pub has_answer_mark: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardRule {
    /// Add [`FORMAT_BONUS`] whenever an answer mark is present.
    #[serde(default)]
    pub format_bonus: bool,
}

impl RewardRule {
    pub fn max_reward(&self) -> f64 {
        if self.format_bonus {
            1.0 + FORMAT_BONUS
        } else {
            1.0
        }
    }
}

pub fn generate_question<R: Rng + ?Sized>(
    spec: &TaskSpec,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<QuestionInstance> {
    spec.validate(vocab)?;
    let m = spec.modulus;
    let mut operands = Vec::with_capacity(spec.chain_length + 1);
    let mut ops = Vec::with_capacity(spec.chain_length);
    operands.push(rng.gen_range(0..m));
    for _ in 0..spec.chain_length {
        ops.push(spec.ops[rng.gen_range(0..spec.ops.len())]);
        operands.push(rng.gen_range(0..m));
    }

    let mut prompt = vec![BOS, vocab.digit(operands[0])];
    let mut id = operands[0].to_string();
    let mut reference = Vec::with_capacity(spec.reference_len());
    let mut value = operands[0];
    for (i, (&op, &b)) in ops.iter().zip(&operands[1..]).enumerate() {
        prompt.push(op.token());
        prompt.push(vocab.digit(b));
        id.push(op.symbol());
        id.push_str(&b.to_string());
        value = op.apply(value, b, m);
        if i + 1 < spec.chain_length {
            reference.push(vocab.digit(value));
        }
    }
    prompt.push(QUERY_END);
    id.push_str(&format!(" mod {m}"));
    let answer = vocab.digit(value);
    reference.extend([ANSWER_MARK, answer, EOS]);

    Ok(QuestionInstance {
        id,
        prompt,
        ground_truth: answer,
        reference_solution: reference,
        spec: spec.clone(),
    })
}

/// Binary correctness reward. Never fails: malformed responses score 0.
pub fn verify(question: &QuestionInstance, tokens: &[Token]) -> Verdict {
    verify_with(question, tokens, RewardRule::default())
}

pub fn verify_with(question: &QuestionInstance, tokens: &[Token], rule: RewardRule) -> Verdict {
    let last_mark = tokens.iter().rposition(|&t| t == ANSWER_MARK);
    let extracted = last_mark.and_then(|i| tokens.get(i + 1).copied());
    let correct = extracted == Some(question.ground_truth);
    let has_answer_mark = last_mark.is_some();
    let mut reward = if correct { 1.0 } else { 0.0 };
    if rule.format_bonus && has_answer_mark {
        reward += FORMAT_BONUS;
    }
    Verdict {
        reward,
        correct,
        extracted,
        has_answer_mark,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSpec {
    #[serde(flatten)]
    pub spec: TaskSpec,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

/// Weighted blend of task specs; each question draws its spec first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskMix {
    pub components: Vec<WeightedSpec>,
}

impl From<TaskSpec> for TaskMix {
    fn from(spec: TaskSpec) -> Self {
        TaskMix {
            components: vec![WeightedSpec { spec, weight: 1.0 }],
        }
    }
}

impl TaskMix {
    pub fn new(components: Vec<(TaskSpec, f64)>) -> Self {
        TaskMix {
            components: components
                .into_iter()
                .map(|(spec, weight)| WeightedSpec { spec, weight })
                .collect(),
        }
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::invalid("task mix is empty"));
        }
        for c in &self.components {
            c.spec.validate(vocab)?;
            if !(c.weight.is_finite() && c.weight >= 0.0) {
                return Err(Error::invalid(format!(
                    "task weight must be finite and >= 0, got {}",
                    c.weight
                )));
            }
        }
        if self.components.iter().map(|c| c.weight).sum::<f64>() <= 0.0 {
            return Err(Error::invalid("task weights sum to zero"));
        }
        Ok(())
    }

    pub fn longest_prompt(&self) -> usize {
        self.components
            .iter()
            .map(|c| c.spec.prompt_len())
            .max()
            .unwrap_or(0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, vocab: &Vocab, rng: &mut R) -> Result<QuestionInstance> {
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        let mut u = rng.gen::<f64>() * total;
        let mut chosen = &self.components[self.components.len() - 1].spec;
        for c in &self.components {
            if u < c.weight {
                chosen = &c.spec;
                break;
            }
            u -= c.weight;
        }
        generate_question(chosen, vocab, rng)
    }

    pub fn sample_set<R: Rng + ?Sized>(
        &self,
        vocab: &Vocab,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<QuestionInstance>> {
        (0..n).map(|_| self.sample(vocab, rng)).collect()
    }
}

/// Fraction of `samples` sampled responses (cycling through `questions`)
/// that verify as correct.
pub fn success_rate<R: Rng + ?Sized>(
    policy: &PolicyParams,
    questions: &[QuestionInstance],
    temperature: f64,
    max_len: usize,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if questions.is_empty() || samples == 0 {
        return Err(Error::EmptyInput("questions or samples"));
    }
    let mut hits = 0usize;
    for i in 0..samples {
        let q = &questions[i % questions.len()];
        let r = policy.sample_response(&q.prompt, temperature, max_len, rng)?;
        if verify(q, &r.tokens).correct {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples as f64)
}

pub fn write_jsonl(path: &Path, questions: &[QuestionInstance]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for q in questions {
        serde_json::to_writer(&mut w, q)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<QuestionInstance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let q: QuestionInstance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(q);
    }
    Ok(out)
}
