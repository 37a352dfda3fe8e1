//! Group-relative advantages and their entropy-driven rescaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean-entropy floor below which entropy scaling is skipped.
pub const ENTROPY_MEAN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageVector {
    /// `(r_i - mean) / std` with population std.
    pub base: Vec<f64>,
    /// `base_i / scaled_entropy_i`; equals `base` until entropy scaling runs.
    pub entropy_scaled: Vec<f64>,
    /// All rewards were identical.
    pub collapsed: bool,
}

impl AdvantageVector {
    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    /// Fills `entropy_scaled` from per-response entropies. Returns whether
    /// the degenerate all-ones guard fired.
    pub fn with_entropies(mut self, entropies: &[f64]) -> Result<(Self, bool)> {
        let scaled = scaled_entropies(entropies)?;
        self.entropy_scaled = entropy_driven_advantages(&self.base, &scaled.values)?;
        Ok((self, scaled.degenerate))
    }
}

/// Output of [`scaled_entropies`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledEntropies {
    pub values: Vec<f64>,
    /// Mean entropy was at or below [`ENTROPY_MEAN_EPS`]; `values` is all ones.
    pub degenerate: bool,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

pub fn group_advantages(rewards: &[f64]) -> Result<AdvantageVector> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    if !rewards.iter().all(|r| r.is_finite()) {
        return Err(Error::NonFinite("rewards"));
    }
    let first = rewards[0];
    if rewards.iter().all(|&r| r == first) {
        let zeros = vec![0.0; rewards.len()];
        return Ok(AdvantageVector {
            base: zeros.clone(),
            entropy_scaled: zeros,
            collapsed: true,
        });
    }
    let m = mean(rewards);
    let std = population_variance(rewards).sqrt();
    let base: Vec<f64> = rewards.iter().map(|r| (r - m) / std).collect();
    Ok(AdvantageVector {
        entropy_scaled: base.clone(),
        base,
        collapsed: false,
    })
}

/// `P_i / mean(P)`, or all ones when the mean entropy is (near) zero.
pub fn scaled_entropies(entropies: &[f64]) -> Result<ScaledEntropies> {
    if entropies.is_empty() {
        return Err(Error::EmptyInput("entropies"));
    }
    if !entropies.iter().all(|p| p.is_finite()) {
        return Err(Error::NonFinite("entropies"));
    }
    if let Some(p) = entropies.iter().find(|&&p| p < 0.0) {
        return Err(Error::invalid(format!("negative entropy {p}")));
    }
    let m = mean(entropies);
    if m <= ENTROPY_MEAN_EPS {
        return Ok(ScaledEntropies {
            values: vec![1.0; entropies.len()],
            degenerate: true,
        });
    }
    Ok(ScaledEntropies {
        values: entropies.iter().map(|p| p / m).collect(),
        degenerate: false,
    })
}

/// `A_i / P̂_i`. A scaled entropy of exactly zero (a deterministic response
/// in a group whose mean entropy is positive) is rejected.
pub fn entropy_driven_advantages(base: &[f64], scaled: &[f64]) -> Result<Vec<f64>> {
    if base.len() != scaled.len() {
        return Err(Error::LengthMismatch {
            what: "advantages vs scaled entropies",
            left: base.len(),
            right: scaled.len(),
        });
    }
    if let Some(p) = scaled.iter().find(|&&p| p.is_nan() || p <= 0.0) {
        return Err(Error::invalid(format!(
            "scaled entropy must be positive, got {p}"
        )));
    }
    Ok(base.iter().zip(scaled).map(|(a, p)| a / p).collect())
}

/// Population variance of the final advantages within one group.
pub fn advantage_variance(adv: &[f64]) -> Result<f64> {
    if adv.len() < 2 {
        return Err(Error::GroupTooSmall(adv.len()));
    }
    if !adv.iter().all(|a| a.is_finite()) {
        return Err(Error::NonFinite("advantages"));
    }
    Ok(population_variance(adv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn collapsed_group_is_all_zero() {
        let a = group_advantages(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(a.collapsed);
        assert_eq!(a.base, vec![0.0; 4]);
        assert_eq!(a.entropy_scaled, vec![0.0; 4]);
        let (a, _) = a.with_entropies(&[0.1, 3.0, 0.7, 2.0]).unwrap();
        assert_eq!(a.entropy_scaled, vec![0.0; 4]);
    }

    #[test]
    fn one_correct_of_four() {
        let a = group_advantages(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(!a.collapsed);
        assert!(close(&a.base, &[1.7321, -0.5774, -0.5774, -0.5774], 1e-4));
        assert_eq!(group_advantages(&[1.0, 0.0]).unwrap().base, vec![1.0, -1.0]);
    }

    #[test]
    fn rejects_small_or_bad_groups() {
        assert!(matches!(
            group_advantages(&[1.0]),
            Err(Error::GroupTooSmall(1))
        ));
        assert!(group_advantages(&[1.0, f64::NAN]).is_err());
        assert!(advantage_variance(&[0.3]).is_err());
    }

    #[test]
    fn scaled_entropy_examples() {
        assert_eq!(scaled_entropies(&[1.0; 4]).unwrap().values, vec![1.0; 4]);
        assert!(close(
            &scaled_entropies(&[0.8, 1.2, 0.4, 1.6]).unwrap().values,
            &[0.8, 1.2, 0.4, 1.6],
            1e-12
        ));
        assert!(close(
            &scaled_entropies(&[2.0, 4.0]).unwrap().values,
            &[0.6667, 1.3333],
            1e-4
        ));
        let guard = scaled_entropies(&[0.0, 1e-9]).unwrap();
        assert!(guard.degenerate);
        assert_eq!(guard.values, vec![1.0, 1.0]);
        assert!(scaled_entropies(&[-0.1, 1.0]).is_err());
    }

    #[test]
    fn entropy_driven_examples() {
        let got =
            entropy_driven_advantages(&[1.7321, -0.5774, -0.5774, -0.5774], &[0.8, 1.2, 0.4, 1.6])
                .unwrap();
        assert!(close(&got, &[2.1651, -0.4812, -1.4434, -0.3609], 1e-4));
        assert_eq!(
            entropy_driven_advantages(&[1.0, -1.0], &[0.5, 2.0]).unwrap(),
            vec![2.0, -0.5]
        );
        assert!(entropy_driven_advantages(&[1.0, -1.0], &[0.5, 0.0]).is_err());
        assert!(entropy_driven_advantages(&[1.0], &[0.5, 1.0]).is_err());
    }

    #[test]
    fn variance_examples() {
        assert_eq!(advantage_variance(&[0.0; 5]).unwrap(), 0.0);
        assert_eq!(advantage_variance(&[1.0, -1.0]).unwrap(), 1.0);
        assert_eq!(advantage_variance(&[2.0, -0.5]).unwrap(), 1.5625);
    }

    proptest! {
        #[test]
        fn base_is_standardized(rewards in proptest::collection::vec(0.0f64..1.0, 2..16)) {
            let a = group_advantages(&rewards).unwrap();
            if !a.collapsed {
                prop_assert!(mean(&a.base).abs() < 1e-9);
                prop_assert!((population_variance(&a.base).sqrt() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn eda_preserves_sign_and_separates(
            bits in proptest::collection::vec(any::<bool>(), 2..12),
            entropies in proptest::collection::vec(0.01f64..3.0, 12),
        ) {
            let rewards: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let g = rewards.len();
            let (a, degenerate) = group_advantages(&rewards)
                .unwrap()
                .with_entropies(&entropies[..g])
                .unwrap();
            prop_assert!(!degenerate);
            let scaled = scaled_entropies(&entropies[..g]).unwrap().values;
            prop_assert!((mean(&scaled) - 1.0).abs() < 1e-9);
            for i in 0..g {
                prop_assert_eq!(a.base[i].signum(), a.entropy_scaled[i].signum());
                for j in 0..g {
                    let same = a.base[i] == a.base[j] && a.base[i] != 0.0;
                    if same && (entropies[i] - entropies[j]).abs() > 1e-9 {
                        prop_assert!(a.entropy_scaled[i] != a.entropy_scaled[j]);
                    }
                }
            }
            // lowest-entropy positive response gets the largest advantage among positives
            let best = (0..g)
                .filter(|&i| a.base[i] > 0.0)
                .min_by(|&i, &j| entropies[i].partial_cmp(&entropies[j]).unwrap());
            if let Some(best) = best {
                for i in (0..g).filter(|&i| a.base[i] > 0.0) {
                    prop_assert!(a.entropy_scaled[best] >= a.entropy_scaled[i]);
                }
            }
        }
    }
}
