//! Token-averaged policy entropy, the relative confidence metric and
//! sample-level calibration fractions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyRecord {
    pub response_id: String,
    /// Nats per token.
    pub entropy: f64,
    pub correct: bool,
    pub temperature: f64,
}

impl EntropyRecord {
    pub fn new(
        response_id: impl Into<String>,
        entropy: f64,
        correct: bool,
        temperature: f64,
    ) -> Self {
        EntropyRecord {
            response_id: response_id.into(),
            entropy,
            correct,
            temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    /// Correct responses with entropy strictly above the pooled mean.
    pub frac_correct_above_mean: f64,
    /// Incorrect responses with entropy strictly below the pooled mean.
    pub frac_incorrect_below_mean: f64,
    pub mean_entropy: f64,
    pub n_correct: usize,
    pub n_incorrect: usize,
}

/// Shannon entropy of one distribution, with `0 log 0 = 0`.
pub fn token_entropy(dist: &[f64]) -> f64 {
    -dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// `-(1/T) Σ_t Σ_j p_tj ln p_tj` over the `T` next-token distributions of a
/// response.
pub fn response_entropy<D: AsRef<[f64]>>(dists: &[D]) -> Result<f64> {
    if dists.is_empty() {
        return Err(Error::EmptyInput("response has no tokens"));
    }
    let mut total = 0.0;
    for dist in dists {
        let dist = dist.as_ref();
        if let Some(p) = dist.iter().find(|&&p| p < -1e-9 || !p.is_finite()) {
            return Err(Error::invalid(format!("invalid probability {p}")));
        }
        let mass: f64 = dist.iter().sum();
        if (mass - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "distribution sums to {mass}, expected 1"
            )));
        }
        total += token_entropy(dist);
    }
    // clamp the -0.0 / tiny negative rounding of all-one-hot inputs
    Ok((total / dists.len() as f64).max(0.0))
}

fn class_means(records: &[EntropyRecord]) -> (Option<f64>, Option<f64>, f64) {
    let (mut sc, mut nc, mut sw, mut nw) = (0.0, 0usize, 0.0, 0usize);
    for r in records {
        if r.correct {
            sc += r.entropy;
            nc += 1;
        } else {
            sw += r.entropy;
            nw += 1;
        }
    }
    let pooled = (sc + sw) / (nc + nw) as f64;
    (
        (nc > 0).then(|| sc / nc as f64),
        (nw > 0).then(|| sw / nw as f64),
        pooled,
    )
}

/// Relative confidence metric: `(mean_correct - mean_wrong) / mean_all`,
/// the denominator pooling every record. Negative means the policy is more
/// confident (lower entropy) when it is right.
pub fn rcm(records: &[EntropyRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("entropy records"));
    }
    let (correct, wrong, pooled) = class_means(records);
    let (Some(correct), Some(wrong)) = (correct, wrong) else {
        return Err(Error::invalid(
            "RCM needs at least one correct and one incorrect record",
        ));
    };
    rcm_from_means(correct, wrong, pooled)
}

/// RCM from already-aggregated class means and average entropy.
pub fn rcm_from_means(correct: f64, wrong: f64, average: f64) -> Result<f64> {
    if average == 0.0 {
        return Err(Error::invalid("RCM undefined: mean entropy is zero"));
    }
    Ok((correct - wrong) / average)
}

pub fn calibration_fractions(records: &[EntropyRecord]) -> Result<CalibrationStats> {
    if records.is_empty() {
        return Err(Error::EmptyInput("entropy records"));
    }
    let (_, _, mean) = class_means(records);
    let (mut n_correct, mut n_incorrect, mut above, mut below) = (0, 0, 0, 0);
    for r in records {
        if r.correct {
            n_correct += 1;
            if r.entropy > mean {
                above += 1;
            }
        } else {
            n_incorrect += 1;
            if r.entropy < mean {
                below += 1;
            }
        }
    }
    let ratio = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    Ok(CalibrationStats {
        frac_correct_above_mean: ratio(above, n_correct),
        frac_incorrect_below_mean: ratio(below, n_incorrect),
        mean_entropy: mean,
        n_correct,
        n_incorrect,
    })
}
