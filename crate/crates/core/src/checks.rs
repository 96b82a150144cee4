//! Randomized property suites over the built-in problems, shared by the
//! `check` command and the acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::lemma2_monte_carlo_check;
use crate::error::Result;
use crate::geometry::{project_box, project_dual, EnsembleState};
use crate::linalg::{dist2, dot};
use crate::privacy::{
    q_function, q_inverse, calibrate, NoiseChannel, NoiseDistribution, PrivacyPolicy, SensitivityBundle,
};
use crate::problem::{check_convexity, check_gradients, ProblemSpec};
use crate::schedule::StepSchedule;
use crate::solver::{monotonicity_violation, solve, solve_with_noise, SaddleMap, SolverConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self {
            name,
            passed,
            detail,
        }
    }
}

/// Idempotence, non-expansiveness and the variational inequality
/// `(v - p)^T (y - p) <= 0` for projections onto the boxes and the dual set.
pub fn projection_suite(map: &SaddleMap, samples: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bx = map.spec().full_box();
    let set = map.dual_set();
    let spread = |rng: &mut ChaCha8Rng, len: usize, scale: f64| -> Vec<f64> {
        (0..len).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect()
    };
    let xs = 3.0 * bx.max_norm().max(1.0);
    let ms = 3.0 * set.radius();
    let mut worst_idem: f64 = 0.0;
    let mut worst_expand: f64 = 0.0;
    let mut worst_vi: f64 = 0.0;
    for _ in 0..samples {
        let (u, v) = (spread(&mut rng, bx.dim(), xs), spread(&mut rng, bx.dim(), xs));
        let (pu, pv) = (project_box(&u, &bx), project_box(&v, &bx));
        worst_idem = worst_idem.max(dist2(&project_box(&pu, &bx), &pu));
        worst_expand = worst_expand.max(dist2(&pu, &pv) - dist2(&u, &v));
        let y = bx.sample(&mut rng);
        let d: Vec<f64> = u.iter().zip(&pu).map(|(a, b)| a - b).collect();
        let e: Vec<f64> = y.iter().zip(&pu).map(|(a, b)| a - b).collect();
        worst_vi = worst_vi.max(dot(&d, &e));

        let (a, b) = (spread(&mut rng, set.m(), ms), spread(&mut rng, set.m(), ms));
        let (pa, pb) = (project_dual(&a, set), project_dual(&b, set));
        let scale = 1.0 + set.radius();
        worst_idem = worst_idem.max(dist2(&project_dual(&pa, set), &pa) / scale);
        worst_expand = worst_expand.max((dist2(&pa, &pb) - dist2(&a, &b)) / scale);
        let y = map.sample(&mut rng).mu;
        let d: Vec<f64> = a.iter().zip(&pa).map(|(p, q)| p - q).collect();
        let e: Vec<f64> = y.iter().zip(&pa).map(|(p, q)| p - q).collect();
        worst_vi = worst_vi.max(dot(&d, &e) / (scale * scale));
    }
    let tol = 1e-9;
    CheckOutcome::new(
        "projections",
        worst_idem <= tol && worst_expand <= tol && worst_vi <= tol,
        format!(
            "{samples} samples: idempotence {worst_idem:.2e}, expansion {worst_expand:.2e}, variational {worst_vi:.2e}"
        ),
    )
}

pub fn monotonicity_suite(map: &SaddleMap, pairs: usize, seed: u64) -> CheckOutcome {
    let worst = monotonicity_violation(map, pairs, seed);
    CheckOutcome::new(
        "G monotone",
        worst <= 1e-12,
        format!("{pairs} pairs, worst normalized violation {worst:.2e}"),
    )
}

pub fn gradient_suite(spec: &ProblemSpec, samples: usize, seed: u64) -> Result<CheckOutcome> {
    let rep = check_gradients(spec, samples, seed)?;
    let worst_obj = rep.objective_errors.iter().cloned().fold(0.0, f64::max);
    Ok(CheckOutcome::new(
        "finite differences",
        rep.passed(),
        format!(
            "worst relative error: objectives {worst_obj:.2e}, Jacobian {:.2e} (tolerance {:.0e})",
            rep.jacobian_error, rep.tolerance
        ),
    ))
}

pub fn convexity_suite(spec: &ProblemSpec, samples: usize, seed: u64) -> CheckOutcome {
    let rep = check_convexity(spec, samples, seed);
    CheckOutcome::new("convexity", rep.passed(), format!("{samples} midpoint samples"))
}

/// Zero-scale channels must reproduce the exact iteration bit for bit.
pub fn zero_variance_suite(map: &SaddleMap, iterations: u64, seed: u64) -> Result<CheckOutcome> {
    let dims: Vec<usize> = (0..map.spec().num_agents())
        .map(|i| map.spec().block(i).len())
        .collect();
    let mut cfg = SolverConfig::new(StepSchedule::reference(), iterations);
    cfg.kkt_every = Some(iterations.div_ceil(10).max(1));
    let exact = solve(map, &cfg, None, seed, None)?;
    let mut same = true;
    for (policy, norm) in [
        (PrivacyPolicy::laplace(1.0, 1.0)?, crate::linalg::Norm::L1),
        (PrivacyPolicy::gaussian(1.0, 0.1, 1.0)?, crate::linalg::Norm::L2),
    ] {
        let zero = SensitivityBundle::new(norm, 0.0, vec![0.0; dims.len()])?;
        let noise = calibrate(&policy, &zero, map.m(), &dims)?;
        let noisy = solve_with_noise(map, &cfg, &noise, seed, None)?;
        same &= bitwise_equal(&exact.final_state, &noisy.final_state)
            && exact.records.len() == noisy.records.len()
            && exact
                .records
                .iter()
                .zip(&noisy.records)
                .all(|(a, b)| a.k == b.k && opt_bits(a.kkt_residual) == opt_bits(b.kkt_residual));
    }
    Ok(CheckOutcome::new(
        "zero-variance reduction",
        same,
        format!("{iterations} iterations, Laplace and Gaussian channels at scale 0"),
    ))
}

fn opt_bits(v: Option<f64>) -> Option<u64> {
    v.map(f64::to_bits)
}

pub fn bitwise_equal(a: &EnsembleState, b: &EnsembleState) -> bool {
    let bits = |z: &EnsembleState| -> Vec<u64> { z.x.iter().chain(&z.mu).map(|v| v.to_bits()).collect() };
    bits(a) == bits(b)
}

pub fn q_round_trip_suite(samples: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        // log-uniform over (1e-12, 1) plus the symmetric upper half
        let d = 10f64.powf(-12.0 * rng.random::<f64>());
        let d = if rng.random::<bool>() { d } else { 1.0 - 0.5 * d };
        if d > 0.0 && d < 1.0 {
            let err = (q_function(q_inverse(d).expect("delta in range")) - d).abs();
            worst = worst.max(err);
        }
    }
    CheckOutcome::new(
        "Q round trip",
        worst <= 1e-12,
        format!("{samples} samples, worst |Q(Q^-1(d)) - d| = {worst:.2e}"),
    )
}

/// Empirical mean within 4 standard errors and variance within 2% over 10^6 draws.
pub fn noise_moment_suite(seed: u64) -> CheckOutcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for distribution in [
        NoiseDistribution::Laplace { scale: 5.771 },
        NoiseDistribution::Normal { std_dev: 10.06 },
    ] {
        let ch = NoiseChannel {
            distribution,
            rows: 100,
            cols: 100,
            stream: 7,
        };
        let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
        for k in 1..=100 {
            for v in ch.draw(seed, k) {
                s += v;
                s2 += v * v;
                n += 1.0;
            }
        }
        let mean = s / n;
        let var = s2 / n - mean * mean;
        let nominal = distribution.variance();
        let z = mean / (nominal / n).sqrt();
        let rel = var / nominal - 1.0;
        ok &= z.abs() < 4.0 && rel.abs() < 0.02;
        lines.push(format!("{distribution:?}: mean {z:+.2} SE, variance {:+.2}%", 100.0 * rel));
    }
    CheckOutcome::new("noise moments", ok, lines.join("; "))
}

pub fn lemma2_suite(seed: u64) -> Result<CheckOutcome> {
    let h = 10_000;
    let tau: Vec<f64> = (1..=h).map(|k| 1.0 / k as f64).collect();
    let sigma: Vec<f64> = (1..=h).map(|k| 1.0 / (k as f64).powi(2)).collect();
    let rep = lemma2_monte_carlo_check(&tau, &sigma, 10_000, seed)?;
    Ok(CheckOutcome::new(
        "Lemma 2 Monte Carlo",
        rep.passed(),
        format!("tau = 1/k, sigma = 1/k^2: mean {:.2e} after {h} steps", rep.final_mean),
    ))
}

/// Every suite at full size on the given problem.
pub fn run_all(map: &SaddleMap, seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        projection_suite(map, 10_000, seed),
        monotonicity_suite(map, 10_000, seed),
        gradient_suite(map.spec(), 200, seed)?,
        convexity_suite(map.spec(), 1000, seed),
        zero_variance_suite(map, 2000, seed)?,
        q_round_trip_suite(10_000, seed),
        noise_moment_suite(seed),
        lemma2_suite(seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::build_scalar_problem;

    #[test]
    fn scalar_suites_pass() {
        let map = SaddleMap::from_spec(build_scalar_problem()).unwrap();
        assert!(projection_suite(&map, 500, 1).passed);
        assert!(monotonicity_suite(&map, 500, 1).passed);
        assert!(zero_variance_suite(&map, 200, 1).unwrap().passed);
        assert!(q_round_trip_suite(500, 1).passed);
    }
}
