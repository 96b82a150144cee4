//! Regularization and step-size sequences `alpha_k`, `gamma_k` and checks of
//! the four conditions the convergence result places on them.
//!
//! Iterations are counted from `k = 1`; the power law is singular at 0.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Any pair of positive sequences indexed from `k = 1`.
pub trait StepSequence: Send + Sync {
    fn alpha(&self, k: u64) -> f64;
    fn gamma(&self, k: u64) -> f64;
}

/// `alpha_k = alpha_bar * k^-c1`, `gamma_k = gamma_bar * k^-c2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub alpha_bar: f64,
    pub gamma_bar: f64,
    pub c1: f64,
    pub c2: f64,
}

impl StepSchedule {
    pub fn new(alpha_bar: f64, gamma_bar: f64, c1: f64, c2: f64) -> Result<Self> {
        if !(alpha_bar > 0.0 && gamma_bar > 0.0) || !alpha_bar.is_finite() || !gamma_bar.is_finite()
        {
            return Err(Error::InvalidSchedule(format!(
                "alpha_bar and gamma_bar must be positive, got {alpha_bar}, {gamma_bar}"
            )));
        }
        if !(c1 >= 0.0 && c2 >= 0.0) || !c1.is_finite() || !c2.is_finite() {
            return Err(Error::InvalidSchedule(format!(
                "exponents must be finite and nonnegative, got {c1}, {c2}"
            )));
        }
        Ok(Self {
            alpha_bar,
            gamma_bar,
            c1,
            c2,
        })
    }

    /// The schedule used in the experiments: 0.1, 0.01, 0.3, 0.52.
    pub fn reference() -> Self {
        Self {
            alpha_bar: 0.1,
            gamma_bar: 0.01,
            c1: 0.3,
            c2: 0.52,
        }
    }

    /// `(alpha_k, gamma_k)`; `k = 0` is rejected.
    pub fn step(&self, k: u64) -> Result<(f64, f64)> {
        if k == 0 {
            return Err(Error::InvalidSchedule(
                "iterations are indexed from k = 1".into(),
            ));
        }
        Ok((self.alpha(k), self.gamma(k)))
    }

    /// `0 < c1 < c2` and `c1 + c2 < 1`.
    pub fn is_valid_family(&self) -> bool {
        0.0 < self.c1 && self.c1 < self.c2 && self.c1 + self.c2 < 1.0
    }

    /// `c2 > 1/2`, which makes the noise contribution to `sigma_k` summable.
    pub fn summable_sigma(&self) -> bool {
        self.c2 > 0.5
    }
}

impl StepSequence for StepSchedule {
    fn alpha(&self, k: u64) -> f64 {
        self.alpha_bar * (k as f64).powf(-self.c1)
    }

    fn gamma(&self, k: u64) -> f64 {
        self.gamma_bar * (k as f64).powf(-self.c2)
    }
}

type SeqFn = dyn Fn(u64) -> f64 + Send + Sync;

/// User-supplied sequences, validated numerically over a finite horizon.
#[derive(Clone)]
pub struct CustomSchedule {
    pub name: String,
    alpha: Arc<SeqFn>,
    gamma: Arc<SeqFn>,
}

impl CustomSchedule {
    pub fn new(
        name: impl Into<String>,
        alpha: impl Fn(u64) -> f64 + Send + Sync + 'static,
        gamma: impl Fn(u64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            alpha: Arc::new(alpha),
            gamma: Arc::new(gamma),
        }
    }
}

impl fmt::Debug for CustomSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomSchedule").field("name", &self.name).finish()
    }
}

impl StepSequence for CustomSchedule {
    fn alpha(&self, k: u64) -> f64 {
        (self.alpha)(k)
    }

    fn gamma(&self, k: u64) -> f64 {
        (self.gamma)(k)
    }
}

/// Either the built-in power law or a custom pair of sequences.
#[derive(Debug, Clone)]
pub enum Schedule {
    PowerLaw(StepSchedule),
    Custom(CustomSchedule),
}

impl Schedule {
    pub fn power_law(&self) -> Option<&StepSchedule> {
        match self {
            Schedule::PowerLaw(s) => Some(s),
            Schedule::Custom(_) => None,
        }
    }
}

impl From<StepSchedule> for Schedule {
    fn from(s: StepSchedule) -> Self {
        Schedule::PowerLaw(s)
    }
}

impl From<CustomSchedule> for Schedule {
    fn from(s: CustomSchedule) -> Self {
        Schedule::Custom(s)
    }
}

impl StepSequence for Schedule {
    fn alpha(&self, k: u64) -> f64 {
        match self {
            Schedule::PowerLaw(s) => s.alpha(k),
            Schedule::Custom(s) => s.alpha(k),
        }
    }

    fn gamma(&self, k: u64) -> f64 {
        match self {
            Schedule::PowerLaw(s) => s.gamma(k),
            Schedule::Custom(s) => s.gamma(k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of [`validate`] for the four step-size conditions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidityReport {
    pub horizon: u64,
    /// (1) sum gamma_k alpha_k = inf, (2) gamma_k / alpha_k -> 0,
    /// (3) alpha_k -> 0, (4) (alpha_{k-1} - alpha_k) / (gamma_k alpha_k^2) -> 0.
    pub conditions: [ConditionCheck; 4],
    /// Whether `sigma_k` is summable (`c2 > 1/2` for the power law).
    pub summable_sigma: Option<bool>,
}

impl ValidityReport {
    pub fn all_passed(&self) -> bool {
        self.conditions.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.conditions
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name)
            .collect()
    }
}

/// `(alpha_{k-1} - alpha_k) / (gamma_k alpha_k^2)` for `k >= 2`.
pub fn drift_term(seq: &dyn StepSequence, k: u64) -> f64 {
    let (a_prev, a, g) = (seq.alpha(k - 1), seq.alpha(k), seq.gamma(k));
    (a_prev - a) / (g * a * a)
}

/// Local power-law exponent `q` of a positive sequence near the horizon,
/// assuming `t_k ~ k^-q` (so `q > 0` means decay).
fn local_decay_exponent(t: impl Fn(u64) -> f64, horizon: u64) -> f64 {
    let half = (horizon / 2).max(2);
    let (a, b) = (t(half), t(horizon));
    if a <= 0.0 || b <= 0.0 {
        return if b == 0.0 { f64::INFINITY } else { 0.0 };
    }
    -(b / a).ln() / (horizon as f64 / half as f64).ln()
}

/// Checks the four step-size conditions. The power law is decided by its
/// exponents, with condition (4) also confirmed numerically over the tail
/// of the horizon; custom sequences are judged from their behavior near
/// the horizon.
pub fn validate(schedule: &Schedule, horizon: u64) -> Result<ValidityReport> {
    if horizon < 10 {
        return Err(Error::InvalidSchedule(format!(
            "validation horizon must be >= 10, got {horizon}"
        )));
    }
    let seq: &dyn StepSequence = schedule;
    let tail_decreasing = {
        let start = (horizon / 2).max(2);
        let stride = ((horizon - start) / 1000).max(1);
        let mut prev = f64::INFINITY;
        let mut ok = true;
        let mut k = start;
        while k <= horizon {
            let t = drift_term(seq, k);
            if t > prev * (1.0 + 1e-12) {
                ok = false;
                break;
            }
            prev = t;
            k += stride;
        }
        ok
    };
    let drift_end = drift_term(seq, horizon);
    match schedule {
        Schedule::PowerLaw(s) => {
            let (c1, c2) = (s.c1, s.c2);
            let exponent = c1 + c2 - 1.0;
            let c4 = c1 == 0.0 || (exponent < 0.0 && tail_decreasing);
            Ok(ValidityReport {
                horizon,
                conditions: [
                    ConditionCheck {
                        name: "sum gamma*alpha diverges",
                        passed: c1 + c2 <= 1.0,
                        detail: format!("gamma_k alpha_k ~ k^-{:.4}", c1 + c2),
                    },
                    ConditionCheck {
                        name: "gamma/alpha -> 0",
                        passed: c2 > c1,
                        detail: format!("gamma_k / alpha_k ~ k^{:.4}", c1 - c2),
                    },
                    ConditionCheck {
                        name: "alpha -> 0",
                        passed: c1 > 0.0,
                        detail: format!("alpha_k ~ k^-{c1:.4}"),
                    },
                    ConditionCheck {
                        name: "drift term -> 0",
                        passed: c4,
                        detail: format!(
                            "term ~ k^{exponent:.4}, value {drift_end:.3e} at k = {horizon}, tail decreasing: {tail_decreasing}"
                        ),
                    },
                ],
                summable_sigma: Some(s.summable_sigma()),
            })
        }
        Schedule::Custom(_) => {
            let q_prod = local_decay_exponent(|k| seq.alpha(k) * seq.gamma(k), horizon);
            let q_ratio = local_decay_exponent(|k| seq.gamma(k) / seq.alpha(k), horizon);
            let q_alpha = local_decay_exponent(|k| seq.alpha(k), horizon);
            let q_drift = local_decay_exponent(|k| drift_term(seq, k).abs(), horizon);
            let drift_vanishes = drift_end == 0.0 || (q_drift > 1e-3 && tail_decreasing);
            Ok(ValidityReport {
                horizon,
                conditions: [
                    ConditionCheck {
                        name: "sum gamma*alpha diverges",
                        passed: q_prod <= 1.0 + 1e-6,
                        detail: format!("local exponent {q_prod:.4}"),
                    },
                    ConditionCheck {
                        name: "gamma/alpha -> 0",
                        passed: q_ratio > 1e-3,
                        detail: format!("local exponent {q_ratio:.4}"),
                    },
                    ConditionCheck {
                        name: "alpha -> 0",
                        passed: q_alpha > 1e-3,
                        detail: format!("local exponent {q_alpha:.4}"),
                    },
                    ConditionCheck {
                        name: "drift term -> 0",
                        passed: drift_vanishes,
                        detail: format!(
                            "local exponent {q_drift:.4}, value {drift_end:.3e} at k = {horizon}"
                        ),
                    },
                ],
                summable_sigma: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_schedule_first_step() {
        let s = StepSchedule::reference();
        assert_eq!(s.step(1).unwrap(), (0.1, 0.01));
    }

    #[test]
    fn reference_schedule_at_100() {
        // 100^-0.3 = 10^-0.6, 100^-0.52 = 10^-1.04
        let (a, g) = StepSchedule::reference().step(100).unwrap();
        assert!((a - 0.1 * 10f64.powf(-0.6)).abs() < 1e-16);
        assert!((g - 0.01 * 10f64.powf(-1.04)).abs() < 1e-17);
        assert!((a - 0.025118864315095794).abs() < 1e-15);
    }

    #[test]
    fn zero_index_rejected() {
        assert!(StepSchedule::reference().step(0).is_err());
    }

    #[test]
    fn zero_exponent_is_constant_and_invalid() {
        let s = StepSchedule::new(0.1, 0.01, 0.0, 0.52).unwrap();
        assert_eq!(s.step(1000).unwrap().0, 0.1);
        let report = validate(&s.into(), 1000).unwrap();
        assert!(!report.conditions[2].passed);
    }

    #[test]
    fn reference_schedule_passes_all_conditions() {
        let report = validate(&StepSchedule::reference().into(), 100_000).unwrap();
        assert!(report.all_passed(), "{report:?}");
        assert_eq!(report.summable_sigma, Some(true));
    }

    #[test]
    fn swapped_exponents_fail_ratio_condition() {
        let s = StepSchedule::new(0.1, 0.01, 0.5, 0.4).unwrap();
        let report = validate(&s.into(), 1000).unwrap();
        assert_eq!(report.failures(), vec!["gamma/alpha -> 0"]);
    }

    #[test]
    fn large_exponent_sum_fails_divergence() {
        let s = StepSchedule::new(0.1, 0.01, 0.3, 0.8).unwrap();
        let report = validate(&s.into(), 1000).unwrap();
        assert!(!report.conditions[0].passed);
        assert!(report.conditions[1].passed);
    }

    #[test]
    fn short_horizon_rejected() {
        assert!(validate(&StepSchedule::reference().into(), 9).is_err());
    }

    #[test]
    fn custom_sequence_matches_power_law_verdict() {
        let custom = CustomSchedule::new(
            "power",
            |k| 0.1 * (k as f64).powf(-0.3),
            |k| 0.01 * (k as f64).powf(-0.52),
        );
        let report = validate(&Schedule::Custom(custom), 100_000).unwrap();
        assert!(report.all_passed(), "{report:?}");

        let constant = CustomSchedule::new("flat", |_| 0.1, |_| 0.01);
        let report = validate(&Schedule::Custom(constant), 1000).unwrap();
        assert!(!report.conditions[1].passed);
        assert!(!report.conditions[2].passed);
    }

    #[test]
    fn drift_term_follows_asymptote() {
        // c1 / (alpha_bar gamma_bar) * k^(c1 + c2 - 1)
        let s = StepSchedule::reference();
        let t3 = drift_term(&s, 1_000);
        let t6 = drift_term(&s, 1_000_000);
        assert!(t6 < t3);
        let asym = 300.0 * 1e6f64.powf(-0.18);
        assert!((t6 / asym - 1.0).abs() < 1e-5, "{t6} vs {asym}");
    }
}
