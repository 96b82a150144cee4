//! Convergence-theory quantities: the sequence terms of the error recursion,
//! the zeta-function bound on the summed `sigma_k`, the expected-error bound,
//! the probabilistic convergence estimate and the privacy trade-off.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::Norm;
use crate::privacy::{NoiseSet, SensitivityBundle};
use crate::schedule::{StepSchedule, StepSequence};
use crate::solver::SaddleMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub l_g: f64,
    /// Bound on `||xi_k||`, taken as `sup_{z in Z} ||z||`.
    pub m_xi: f64,
    pub d_z: f64,
    /// Bound on `E ||w(k)||^2`.
    pub k_w: f64,
    pub theta: f64,
}

/// Default contraction constant; see [`theta_thresholds`].
pub const DEFAULT_THETA: f64 = 0.5;

impl AnalysisConfig {
    pub fn new(l_g: f64, m_xi: f64, d_z: f64, k_w: f64, theta: f64) -> Result<Self> {
        let cfg = Self {
            l_g,
            m_xi,
            d_z,
            k_w,
            theta,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.l_g, self.m_xi, self.d_z];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("L_G, M_xi and D_z must be positive: {self:?}")));
        }
        if !(self.k_w >= 0.0 && self.k_w.is_finite()) {
            return Err(Error::Config(format!("K_w must be nonnegative, got {}", self.k_w)));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Config(format!("theta must lie in (0, 1), got {}", self.theta)));
        }
        Ok(())
    }

    /// Geometry from the problem, `L_G` supplied (see
    /// [`SaddleMap::estimate_lipschitz`]) and `K_w` from the channels.
    pub fn from_problem(map: &SaddleMap, noise: &NoiseSet, l_g: f64, noisy_dual: bool) -> Result<Self> {
        Self::new(
            l_g,
            map.sup_norm(),
            map.diameter(),
            noise_second_moment(map, noise, noisy_dual),
            DEFAULT_THETA,
        )
    }

    pub fn without_noise(mut self) -> Self {
        self.k_w = 0.0;
        self
    }
}

/// `E ||w||^2` bound: `E ||w_i^T mu||^2 = n_i v_i ||mu||_2^2 <= n_i v_i R^2`
/// per agent, plus `m v_g` for the multiplier channel.
pub fn noise_second_moment(map: &SaddleMap, noise: &NoiseSet, noisy_dual: bool) -> f64 {
    if noise.is_empty() {
        return 0.0;
    }
    let r = map.dual_set().radius();
    let primal: f64 = noise
        .blocks
        .iter()
        .map(|c| c.cols as f64 * c.distribution.variance())
        .sum();
    let dual = if noisy_dual {
        map.m() as f64 * noise.g_variance()
    } else {
        0.0
    };
    r * r * primal + dual
}

/// `a_k = 1 - gamma_k alpha_k - (gamma_k / alpha_k) L_G^2 - 2 gamma_k L_G`;
/// the required bound is `theta <= a_k` from some index on.
pub fn contraction_margin(l_g: f64, alpha: f64, gamma: f64) -> f64 {
    1.0 - gamma * alpha - gamma / alpha * l_g * l_g - 2.0 * gamma * l_g
}

/// Indices from the convergence argument, as reals since they can exceed `u64`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// First `k` with `a_k >= 0`, i.e. `theta_k <= 1 - gamma_k alpha_k`.
    pub m: f64,
    /// First `k` with `a_k >= theta`, from which `tau_k = gamma_k alpha_k theta` is valid.
    pub m_theta: f64,
    /// First `k` with `alpha_bar gamma_bar k^-(c1 + c2) <= 1`.
    pub m_hat: f64,
}

fn first_index(pred: impl Fn(f64) -> bool) -> f64 {
    if pred(1.0) {
        return 1.0;
    }
    let mut hi = 2.0f64;
    while !pred(hi) {
        hi *= 2.0;
        if !hi.is_finite() {
            return f64::INFINITY;
        }
    }
    let mut lo = hi / 2.0;
    while hi - lo > 1.0 && hi - lo > 1e-12 * hi {
        let mid = (0.5 * (lo + hi)).floor();
        if mid <= lo || mid >= hi {
            break;
        }
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Thresholds of the convergence argument for a power-law schedule.
pub fn theta_thresholds(cfg: &AnalysisConfig, s: &StepSchedule) -> Thresholds {
    let at = |k: f64| {
        let (a, g) = (s.alpha_bar * k.powf(-s.c1), s.gamma_bar * k.powf(-s.c2));
        contraction_margin(cfg.l_g, a, g)
    };
    Thresholds {
        m: first_index(|k| at(k) >= 0.0),
        m_theta: first_index(|k| at(k) >= cfg.theta),
        m_hat: first_index(|k| s.alpha_bar * s.gamma_bar * k.powf(-(s.c1 + s.c2)) <= 1.0),
    }
}

/// `theta_k`, `rho_k`, `tau_k`, `sigma_k` at a single `k` (`rho_1 = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Terms {
    pub k: u64,
    pub theta_k: f64,
    pub rho: f64,
    pub tau: f64,
    pub sigma: f64,
}

pub fn terms_at(cfg: &AnalysisConfig, schedule: &dyn StepSequence, k: u64) -> Terms {
    let (a, g) = (schedule.alpha(k), schedule.gamma(k));
    let ga = g * a;
    let theta_k = 1.0 - ga * (2.0 - ga - g / a * cfg.l_g * cfg.l_g - 2.0 * g * cfg.l_g);
    let rho = if k >= 2 {
        let d = (schedule.alpha(k - 1) - a) / a;
        cfg.m_xi * cfg.m_xi * d * d * (1.0 + ga) / ga
    } else {
        0.0
    };
    Terms {
        k,
        theta_k,
        rho,
        tau: ga * cfg.theta,
        sigma: theta_k * rho + g * g * cfg.k_w,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceTerms {
    /// Entry `j` holds the terms for `k = j + 1`.
    pub terms: Vec<Terms>,
}

impl SequenceTerms {
    pub fn get(&self, k: u64) -> Option<&Terms> {
        k.checked_sub(1).and_then(|j| self.terms.get(j as usize))
    }

    /// `sigma_k / tau_k`.
    pub fn ratio(&self, k: u64) -> Option<f64> {
        self.get(k).map(|t| t.sigma / t.tau)
    }
}

pub fn sequence_terms(
    cfg: &AnalysisConfig,
    schedule: &dyn StepSequence,
    k_max: u64,
) -> Result<SequenceTerms> {
    if k_max < 2 {
        return Err(Error::Config(format!("k_max must be at least 2, got {k_max}")));
    }
    Ok(SequenceTerms {
        terms: (1..=k_max).map(|k| terms_at(cfg, schedule, k)).collect(),
    })
}

const ZETA_TERMS: u64 = 1_000_000;

/// Riemann zeta for real `p > 1`: compensated partial sum over `n < 10^6`
/// plus an Euler-Maclaurin tail from `10^6`.
pub fn zeta(p: f64) -> Result<f64> {
    if !(p > 1.0) || !p.is_finite() {
        return Err(Error::Domain(format!("zeta diverges for p = {p}")));
    }
    let n = ZETA_TERMS as f64;
    let tail = n.powf(1.0 - p) / (p - 1.0) + 0.5 * n.powf(-p) + p * n.powf(-p - 1.0) / 12.0
        - p * (p + 1.0) * (p + 2.0) * n.powf(-p - 3.0) / 720.0;
    let (mut sum, mut comp) = (tail, 0.0f64);
    for k in (1..ZETA_TERMS).rev() {
        let t = (k as f64).powf(-p);
        let s = sum + t;
        comp += if sum.abs() >= t { (sum - s) + t } else { (t - s) + sum };
        sum = s;
    }
    Ok(sum + comp)
}

/// How the drift part of the summed bound is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DriftScaling {
    /// Multiply the drift terms by `M_xi^2`, matching `rho_k`.
    #[default]
    Scaled,
    /// The drift terms without the `M_xi^2` factor.
    Unscaled,
}

/// `gamma_bar^2 K_w zeta(2 c2) + s [2 c1^2 zeta(2 - c1 - c2) + 2 (c1^3 + c1^2) zeta(3 - c1 - c2)] / (alpha_bar gamma_bar)`
/// with `s = M_xi^2` or `1`; an approximation of `sum_k sigma_k`.
pub fn sigma_total_bound(cfg: &AnalysisConfig, s: &StepSchedule, scaling: DriftScaling) -> Result<f64> {
    let (c1, c2) = (s.c1, s.c2);
    if !(2.0 * c2 > 1.0 && c1 + c2 < 1.0) {
        return Err(Error::Domain(format!(
            "summed sigma bound needs c2 > 1/2 and c1 + c2 < 1, got c1 = {c1}, c2 = {c2}"
        )));
    }
    let ag = s.alpha_bar * s.gamma_bar;
    let scale = match scaling {
        DriftScaling::Scaled => cfg.m_xi * cfg.m_xi,
        DriftScaling::Unscaled => 1.0,
    };
    let noise = if cfg.k_w > 0.0 {
        s.gamma_bar * s.gamma_bar * cfg.k_w * zeta(2.0 * c2)?
    } else {
        0.0
    };
    let drift = 2.0 * c1 * c1 / ag * zeta(2.0 - (c1 + c2))?
        + 2.0 * (c1 * c1 * c1 + c1 * c1) / ag * zeta(3.0 - (c1 + c2))?;
    Ok(noise + scale * drift)
}

/// Bound on `sum_{j >= from_k} sigma_j`: the summed bound minus the exact
/// `sigma_1 .. sigma_{from_k - 1}`. Can be negative where the approximation fails.
pub fn sigma_tail_bound(cfg: &AnalysisConfig, s: &StepSchedule, from_k: u64) -> Result<f64> {
    sigma_tail_bound_with(cfg, s, from_k, DriftScaling::default())
}

pub fn sigma_tail_bound_with(
    cfg: &AnalysisConfig,
    s: &StepSchedule,
    from_k: u64,
    scaling: DriftScaling,
) -> Result<f64> {
    let total = sigma_total_bound(cfg, s, scaling)?;
    let partial: f64 = (1..from_k.max(1)).map(|k| terms_at(cfg, s, k).sigma).sum();
    Ok(total - partial)
}

const NUMERIC_TAIL_TERMS: u64 = 1_000_000;

/// `sum_{j >= from_k} sigma_j` from exact terms over the next 10^6 indices
/// plus the integral of the leading power laws
/// `M_xi^2 c1^2 / (alpha_bar gamma_bar) j^(c1 + c2 - 2)` and `gamma_bar^2 K_w j^(-2 c2)` beyond.
pub fn sigma_tail_numeric(cfg: &AnalysisConfig, s: &StepSchedule, from_k: u64) -> Result<f64> {
    let (c1, c2) = (s.c1, s.c2);
    if !(2.0 * c2 > 1.0 && c1 + c2 < 1.0) {
        return Err(Error::Domain(format!(
            "sigma is not summable for c1 = {c1}, c2 = {c2}"
        )));
    }
    let start = from_k.max(1);
    let end = start + NUMERIC_TAIL_TERMS;
    let mut sum = 0.0;
    for k in (start..end).rev() {
        sum += terms_at(cfg, s, k).sigma;
    }
    let j = end as f64 - 0.5;
    let drift = cfg.m_xi * cfg.m_xi * c1 * c1 / (s.alpha_bar * s.gamma_bar)
        * j.powf(c1 + c2 - 1.0)
        / (1.0 - c1 - c2);
    let noise = s.gamma_bar * s.gamma_bar * cfg.k_w * j.powf(1.0 - 2.0 * c2) / (2.0 * c2 - 1.0);
    Ok(sum + drift + noise)
}

/// Expected-error bounds `E_1 .. E_{k_max}` for the recursion
/// `E_{k+1} = (1 - tau_k) E_k + sigma_k`, `E_1 = D_z^2`, from its closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundPath {
    pub values: Vec<f64>,
    /// Steps where `tau_k` fell outside (0, 1) and was clipped.
    pub clipped: u64,
}

impl ErrorBoundPath {
    pub fn at(&self, k: u64) -> Option<f64> {
        k.checked_sub(1).and_then(|j| self.values.get(j as usize)).copied()
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `E_k = P_{k-1} (D_z^2 + sum_{m < k} sigma_m / P_m)` with
/// `P_j = prod_{n <= j} (1 - tau_n)`, evaluated with log products and
/// log-sum-exp so neither factor overflows.
pub fn expected_error_path(
    cfg: &AnalysisConfig,
    schedule: &dyn StepSequence,
    k_max: u64,
) -> Result<ErrorBoundPath> {
    if k_max < 1 {
        return Err(Error::Config("k_max must be at least 1".into()));
    }
    let mut values = Vec::with_capacity(k_max as usize);
    let mut log_p = 0.0f64;
    let mut log_s = 2.0 * cfg.d_z.ln();
    let mut clipped = 0;
    values.push(cfg.d_z * cfg.d_z);
    for k in 1..k_max {
        let t = terms_at(cfg, schedule, k);
        let mut tau = t.tau;
        if !(tau > 0.0 && tau < 1.0) {
            clipped += 1;
            tau = tau.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
        }
        log_p += (-tau).ln_1p();
        if t.sigma > 0.0 {
            log_s = log_add(log_s, t.sigma.ln() - log_p);
        }
        values.push((log_p + log_s).exp());
    }
    Ok(ErrorBoundPath { values, clipped })
}

pub fn expected_error_bound(cfg: &AnalysisConfig, schedule: &dyn StepSequence, k: u64) -> Result<f64> {
    let path = expected_error_path(cfg, schedule, k)?;
    Ok(path.values[k as usize - 1])
}

/// Source of `sum_{j >= k} sigma_j` in [`convergence_probability_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TailMethod {
    /// The summed zeta bound minus the exact early terms ([`sigma_tail_bound`]).
    #[default]
    Summed,
    /// [`sigma_tail_numeric`].
    Numeric,
}

/// `1 - (E_k + tail_k) / eps_ball`; negative values mean the bound is vacuous.
/// `e_k` overrides the analytic `E_k` (for example with an observed value).
pub fn convergence_probability(
    cfg: &AnalysisConfig,
    s: &StepSchedule,
    eps_ball: f64,
    k: u64,
    e_k: Option<f64>,
) -> Result<f64> {
    convergence_probability_with(cfg, s, eps_ball, k, e_k, TailMethod::Summed)
}

pub fn convergence_probability_with(
    cfg: &AnalysisConfig,
    s: &StepSchedule,
    eps_ball: f64,
    k: u64,
    e_k: Option<f64>,
    method: TailMethod,
) -> Result<f64> {
    if !(eps_ball > 0.0) {
        return Err(Error::Domain(format!("eps_ball must be positive, got {eps_ball}")));
    }
    let e = match e_k {
        Some(v) => v,
        None => expected_error_bound(cfg, s, k)?,
    };
    let tail = match method {
        TailMethod::Summed => sigma_tail_bound(cfg, s, k)?,
        TailMethod::Numeric => sigma_tail_numeric(cfg, s, k)?,
    };
    Ok(1.0 - (e + tail) / eps_ball)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub epsilon: f64,
    pub k_w: f64,
    pub penalty: f64,
}

/// `W`: the noise second-moment bound of the Laplace mechanism at `epsilon = 1`,
/// with per-entry variance `2 Delta_1^2`.
pub fn laplace_w(
    sensitivities: &SensitivityBundle,
    m: usize,
    block_dims: &[usize],
    radius: f64,
    noisy_dual: bool,
) -> Result<f64> {
    if sensitivities.norm != Norm::L1 {
        return Err(Error::InvalidPolicy("the trade-off uses 1-norm sensitivities".into()));
    }
    check_len(block_dims.len(), sensitivities.delta_blocks.len(), "sensitivity blocks")?;
    let primal: f64 = block_dims
        .iter()
        .zip(&sensitivities.delta_blocks)
        .map(|(&n, d)| n as f64 * 2.0 * d * d)
        .sum();
    let dual = if noisy_dual {
        m as f64 * 2.0 * sensitivities.delta_g * sensitivities.delta_g
    } else {
        0.0
    };
    Ok(radius * radius * primal + dual)
}

/// `(epsilon, W / epsilon^2, gamma_1^2 W / epsilon^2)` for each `epsilon`.
pub fn tradeoff_curve(
    schedule: &dyn StepSequence,
    w: f64,
    epsilons: &[f64],
) -> Result<Vec<TradeoffPoint>> {
    let g1 = schedule.gamma(1);
    epsilons
        .iter()
        .map(|&e| {
            if !(e > 0.0) {
                return Err(Error::Domain(format!("epsilon must be positive, got {e}")));
            }
            let k_w = w / (e * e);
            Ok(TradeoffPoint {
                epsilon: e,
                k_w,
                penalty: g1 * g1 * k_w,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Report {
    /// `tau_k` in [0, 1], `sum tau_k >= ln 100` and `sigma / tau` smaller at
    /// the end than at the start.
    pub hypotheses_hold: bool,
    pub tau_sum: f64,
    pub initial: f64,
    pub final_mean: f64,
    /// Empirical means at ten evenly spaced checkpoints.
    pub checkpoints: Vec<f64>,
    pub decayed: bool,
}

impl Lemma2Report {
    pub fn passed(&self) -> bool {
        self.hypotheses_hold && self.decayed
    }
}

/// Simulates `v_{k+1} = (1 - tau_k) v_k + sigma_k u_k` with `u_k ~ U[0, 1]`
/// from `v_0 = 1` and checks that the mean falls below 1% of `v_0`.
pub fn lemma2_monte_carlo_check(
    tau: &[f64],
    sigma: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Lemma2Report> {
    check_len(tau.len(), sigma.len(), "sigma sequence")?;
    if tau.is_empty() || trials == 0 {
        return Err(Error::Config("need a nonempty horizon and at least one trial".into()));
    }
    let horizon = tau.len();
    let tau_sum: f64 = tau.iter().sum();
    let ratio = |j: usize| {
        if tau[j] > 0.0 {
            sigma[j] / tau[j]
        } else {
            f64::INFINITY
        }
    };
    let hypotheses_hold = tau.iter().all(|t| (0.0..=1.0).contains(t))
        && sigma.iter().all(|s| *s >= 0.0)
        && tau_sum >= 100f64.ln()
        && ratio(horizon - 1) < ratio(0);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = (horizon / 10).max(1);
    let mut sums = vec![0.0; horizon.div_ceil(step)];
    let mut final_sum = 0.0;
    for _ in 0..trials {
        let mut v = 1.0f64;
        for j in 0..horizon {
            v = (1.0 - tau[j]) * v + sigma[j] * rng.random::<f64>();
            if (j + 1) % step == 0 {
                sums[(j + 1) / step - 1] += v;
            }
        }
        final_sum += v;
    }
    let checkpoints: Vec<f64> = sums
        .iter()
        .take(horizon / step)
        .map(|s| s / trials as f64)
        .collect();
    let final_mean = final_sum / trials as f64;
    Ok(Lemma2Report {
        hypotheses_hold,
        tau_sum,
        initial: 1.0,
        final_mean,
        checkpoints,
        decayed: final_mean < 0.01,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub k: u64,
    pub observed: f64,
    pub bound: f64,
}

impl Checkpoint {
    pub fn holds(&self) -> bool {
        self.observed <= self.bound
    }
}

/// Pairs observed squared errors `(k, ||z(k) - z_0||^2)` with `E_k`.
pub fn compare_observed(
    cfg: &AnalysisConfig,
    schedule: &dyn StepSequence,
    observed: &[(u64, f64)],
) -> Result<Vec<Checkpoint>> {
    let k_max = observed.iter().map(|(k, _)| *k).max().unwrap_or(1).max(1);
    let path = expected_error_path(cfg, schedule, k_max)?;
    Ok(observed
        .iter()
        .map(|&(k, observed)| Checkpoint {
            k,
            observed,
            bound: path.at(k.max(1)).expect("k within path"),
        })
        .collect())
}

/// One CSV row per `k`: `k, theta_k, rho_k, tau_k, sigma_k, bound_k`.
pub fn write_terms_csv(
    path: &Path,
    terms: &SequenceTerms,
    bounds: &ErrorBoundPath,
    every: u64,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["k", "theta_k", "rho_k", "tau_k", "sigma_k", "bound_k"])?;
    let every = every.max(1);
    for t in &terms.terms {
        if t.k % every != 0 && t.k != 1 {
            continue;
        }
        let b = bounds.at(t.k).map(|v| format!("{v:e}")).unwrap_or_default();
        w.write_record([
            t.k.to_string(),
            format!("{:e}", t.theta_k),
            format!("{:e}", t.rho),
            format!("{:e}", t.tau),
            format!("{:e}", t.sigma),
            b,
        ])?;
    }
    w.flush()?;
    Ok(())
}
