//! Tabular autoregressive token policy with closed-form gradients.
//!
//! The next-token distribution at position `t` is `Softmax(logits[ctx] / T)`
//! where `ctx` is the question (the stream up to and including the first
//! [`QUERY_END`]) plus the last `order` tokens generated after it. Contexts
//! that were never updated read as all-zero logits, i.e. the uniform
//! distribution.
//!
//! `max_len` follows the usual generate-API convention: it caps the total
//! length of prefix plus continuation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Token, TokenSeq, Vocab, BOS, EOS, QUERY_END};

pub const DEFAULT_ORDER: usize = 2;

const SNAPSHOT_MAGIC: &str = "edge-grpo-policy/1";

/// Conditioning key of one next-token distribution.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Context {
    pub question: TokenSeq,
    pub recent: TokenSeq,
}

impl Context {
    /// Context for predicting `stream[stream.len()]` given `stream`.
    pub fn of(stream: &[Token], order: usize) -> Context {
        match stream.iter().position(|&t| t == QUERY_END) {
            Some(q) => {
                let answer = &stream[q + 1..];
                let start = answer.len().saturating_sub(order);
                Context {
                    question: stream[..=q].to_vec(),
                    recent: answer[start..].to_vec(),
                }
            }
            None => Context {
                question: stream.to_vec(),
                recent: Vec::new(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    vocab: Vocab,
    order: usize,
    logits: BTreeMap<Context, Vec<f64>>,
}

/// Token sequence with the per-token distributions it was sampled from or
/// scored under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSequence {
    pub tokens: TokenSeq,
    pub per_token_logprob: Vec<f64>,
    pub per_token_dist: Vec<Vec<f64>>,
    pub temperature: f64,
}

pub type SampledResponse = ScoredSequence;

impl ScoredSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Sparse gradient over logit rows, keyed like [`PolicyParams`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    rows: BTreeMap<Context, Vec<f64>>,
}

impl Gradient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn row_mut(&mut self, ctx: &Context, width: usize) -> &mut Vec<f64> {
        if !self.rows.contains_key(ctx) {
            self.rows.insert(ctx.clone(), vec![0.0; width]);
        }
        self.rows.get_mut(ctx).expect("row just inserted")
    }

    pub fn insert(&mut self, ctx: Context, row: Vec<f64>) {
        self.rows.insert(ctx, row);
    }

    pub fn get(&self, ctx: &Context) -> Option<&[f64]> {
        self.rows.get(ctx).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Context, &[f64])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.rows
            .values()
            .flatten()
            .fold(0.0_f64, |m, g| m.max(g.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.rows.values().flatten().all(|g| g.is_finite())
    }

    pub fn accumulate(&mut self, other: &Gradient) {
        for (ctx, row) in &other.rows {
            let dst = self.row_mut(ctx, row.len());
            for (d, g) in dst.iter_mut().zip(row) {
                *d += g;
            }
        }
    }
}

/// `Softmax(logits / temperature)`. Temperature 0 yields the one-hot argmax
/// (lowest id wins ties).
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = i;
            }
        }
        let mut out = vec![0.0; logits.len()];
        out[best] = 1.0;
        return out;
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Log of the `Softmax(logits / temperature)` entry for `token`, computed
/// without going through the normalized probability.
pub fn log_softmax_at(logits: &[f64], temperature: f64, token: Token) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .sum::<f64>()
        .ln();
    (logits[token as usize] - max) / temperature - lse
}

fn check_temperature(temperature: f64, allow_zero: bool) -> Result<()> {
    if !temperature.is_finite() {
        return Err(Error::NonFinite("temperature"));
    }
    if temperature < 0.0 || (!allow_zero && temperature == 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be {}, got {temperature}",
            if allow_zero { ">= 0" } else { "> 0" }
        )));
    }
    Ok(())
}

impl PolicyParams {
    pub fn new(vocab: Vocab, order: usize) -> Self {
        PolicyParams {
            vocab,
            order,
            logits: BTreeMap::new(),
        }
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of contexts with stored (non-default) logits.
    pub fn num_contexts(&self) -> usize {
        self.logits.len()
    }

    pub fn contexts(&self) -> impl Iterator<Item = (&Context, &[f64])> {
        self.logits.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// Logits at `ctx`; unseen contexts are all zero.
    pub fn logits(&self, ctx: &Context) -> Vec<f64> {
        self.logits
            .get(ctx)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.vocab.size()])
    }

    pub fn set_logits(&mut self, ctx: Context, row: Vec<f64>) -> Result<()> {
        if row.len() != self.vocab.size() {
            return Err(Error::LengthMismatch {
                what: "logit row vs vocabulary",
                left: row.len(),
                right: self.vocab.size(),
            });
        }
        if !row.iter().all(|z| z.is_finite()) {
            return Err(Error::NonFinite("logit row"));
        }
        self.logits.insert(ctx, row);
        Ok(())
    }

    pub fn distribution(&self, ctx: &Context, temperature: f64) -> Vec<f64> {
        softmax_with_temperature(&self.logits(ctx), temperature)
    }

    /// Contexts seen by each token of `tokens` when it follows `prefix`.
    pub fn contexts_for(&self, prefix: &[Token], tokens: &[Token]) -> Vec<Context> {
        let mut stream = prefix.to_vec();
        stream.reserve(tokens.len());
        tokens
            .iter()
            .map(|&t| {
                let ctx = Context::of(&stream, self.order);
                stream.push(t);
                ctx
            })
            .collect()
    }

    /// Autoregressive sampling from `Softmax(logits / temperature)`; with
    /// temperature 0 this is greedy decoding. The recorded distributions are
    /// exactly the ones sampled from.
    pub fn sample_response<R: Rng + ?Sized>(
        &self,
        prefix: &[Token],
        temperature: f64,
        max_len: usize,
        rng: &mut R,
    ) -> Result<SampledResponse> {
        if max_len == 0 {
            return Err(Error::invalid("max_len must be positive"));
        }
        check_temperature(temperature, true)?;
        if prefix.first() != Some(&BOS) {
            return Err(Error::invalid(
                "prefix must be non-empty and start with BOS",
            ));
        }
        self.vocab.check(prefix)?;
        if prefix.len() >= max_len {
            return Err(Error::invalid(format!(
                "prefix of {} tokens leaves no room under max_len {max_len}",
                prefix.len()
            )));
        }

        let mut stream = prefix.to_vec();
        let mut out = ScoredSequence {
            tokens: Vec::new(),
            per_token_logprob: Vec::new(),
            per_token_dist: Vec::new(),
            temperature,
        };
        while stream.len() < max_len {
            let ctx = Context::of(&stream, self.order);
            let dist = self.distribution(&ctx, temperature);
            let token = if temperature == 0.0 {
                dist.iter().position(|&p| p == 1.0).unwrap_or(0) as Token
            } else {
                draw(&dist, rng)
            };
            out.per_token_logprob.push(dist[token as usize].ln());
            out.per_token_dist.push(dist);
            out.tokens.push(token);
            stream.push(token);
            if token == EOS {
                break;
            }
        }
        Ok(out)
    }

    /// Per-token distributions and log-probabilities of `tokens` following
    /// `prefix`. Pure.
    pub fn score_sequence(
        &self,
        prefix: &[Token],
        tokens: &[Token],
        temperature: f64,
    ) -> Result<ScoredSequence> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence to score"));
        }
        check_temperature(temperature, false)?;
        self.vocab.check(prefix)?;
        self.vocab.check(tokens)?;

        let contexts = self.contexts_for(prefix, tokens);
        let mut out = ScoredSequence {
            tokens: tokens.to_vec(),
            per_token_logprob: Vec::with_capacity(tokens.len()),
            per_token_dist: Vec::with_capacity(tokens.len()),
            temperature,
        };
        for (ctx, &token) in contexts.iter().zip(tokens) {
            let dist = self.distribution(ctx, temperature);
            out.per_token_logprob.push(dist[token as usize].ln());
            out.per_token_dist.push(dist);
        }
        Ok(out)
    }

    /// Ascent step `logits += lr * grad`. Rows absent from `grad` are left
    /// untouched; the step is rejected as a whole if any entry is non-finite.
    pub fn apply_gradient(&mut self, grad: &Gradient, lr: f64) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::invalid(format!(
                "learning rate must be >= 0, got {lr}"
            )));
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let width = self.vocab.size();
        for (_, row) in grad.iter() {
            if row.len() != width {
                return Err(Error::LengthMismatch {
                    what: "gradient row vs vocabulary",
                    left: row.len(),
                    right: width,
                });
            }
        }
        if lr == 0.0 {
            return Ok(());
        }
        for (ctx, row) in grad.iter() {
            if row.iter().all(|&g| g == 0.0) {
                continue;
            }
            let dst = self
                .logits
                .entry(ctx.clone())
                .or_insert_with(|| vec![0.0; width]);
            for (z, g) in dst.iter_mut().zip(row) {
                *z += lr * g;
            }
        }
        Ok(())
    }

    /// Text table: a header line, then one row per stored context.
    /// Floats are written in shortest round-trip form, so a reload is
    /// bit-identical.
    pub fn to_snapshot(&self) -> String {
        let mut out = format!(
            "{SNAPSHOT_MAGIC} digits={} order={}\n",
            self.vocab.digits(),
            self.order
        );
        for (ctx, row) in &self.logits {
            out.push_str(&join_tokens(&ctx.question));
            out.push('|');
            out.push_str(&join_tokens(&ctx.recent));
            out.push('\t');
            for (i, z) in row.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{z:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: "<snapshot>".into(),
            line,
            message,
        };
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(SNAPSHOT_MAGIC) {
            return Err(parse_err(1, format!("expected {SNAPSHOT_MAGIC} header")));
        }
        let mut digits = None;
        let mut order = None;
        for field in fields {
            match field.split_once('=') {
                Some(("digits", v)) => digits = v.parse::<u32>().ok(),
                Some(("order", v)) => order = v.parse::<usize>().ok(),
                _ => return Err(parse_err(1, format!("unexpected header field {field:?}"))),
            }
        }
        let (Some(digits), Some(order)) = (digits, order) else {
            return Err(parse_err(1, "header needs digits= and order=".into()));
        };
        let mut params = PolicyParams::new(Vocab::new(digits)?, order);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if line.is_empty() {
                continue;
            }
            let (key, row) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(lineno, "missing tab separator".into()))?;
            let (question, recent) = key
                .split_once('|')
                .ok_or_else(|| parse_err(lineno, "missing '|' in context key".into()))?;
            let ctx = Context {
                question: split_tokens(question).map_err(|m| parse_err(lineno, m))?,
                recent: split_tokens(recent).map_err(|m| parse_err(lineno, m))?,
            };
            let row = row
                .split(' ')
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| parse_err(lineno, e.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            params.vocab.check(&ctx.question)?;
            params.vocab.check(&ctx.recent)?;
            params.set_logits(ctx, row)?;
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_snapshot()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_snapshot(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }
}

/// Functional form of [`PolicyParams::apply_gradient`]; the input is left
/// as it was.
pub fn apply_gradient(params: &PolicyParams, grad: &Gradient, lr: f64) -> Result<PolicyParams> {
    let mut next = params.clone();
    next.apply_gradient(grad, lr)?;
    Ok(next)
}

fn draw<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> Token {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as Token;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0) as Token
}

fn join_tokens(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(Token::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn split_tokens(s: &str) -> std::result::Result<TokenSeq, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.parse::<Token>()
                .map_err(|e| format!("bad token {t:?}: {e}"))
        })
        .collect()
}
