//! Acceptance criteria for the library, one PASS/FAIL line each.
//! Built with `harness = false` so the lines are printed on every run.

use std::process::ExitCode;
use std::time::Instant;

use rayon::prelude::*;

use privcloud::analysis::{
    compare_observed, expected_error_path, laplace_w, sequence_terms, sigma_total_bound,
    terms_at, tradeoff_curve, AnalysisConfig, DriftScaling,
};
use privcloud::checks::{self, bitwise_equal};
use privcloud::cloudsim::{simulate, SimOptions};
use privcloud::privacy::{kappa, NoiseDistribution, NoiseSet, PrivacyPolicy, SensitivityBundle};
use privcloud::problem::{build_reference_problem, build_scalar_problem};
use privcloud::schedule::StepSchedule;
use privcloud::solver::{
    compute_reference, solve, ReferenceOptions, ReferenceSolution, RunTrace, SaddleMap,
    SolverConfig,
};
use privcloud::{Norm, Result};

struct Outcome {
    id: u32,
    title: &'static str,
    passed: bool,
    lines: Vec<String>,
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Agreement to `sig` significant figures in the sense of numpy's
/// `assert_approx_equal`: both values scaled by the decade of `want` differ
/// by less than `10^-(sig-1)`.
fn agrees(got: f64, want: f64, sig: i32) -> bool {
    let decade = 10f64.powf(want.abs().log10().floor());
    ((got - want) / decade).abs() < 10f64.powi(1 - sig)
}

/// Rounds to `sig` significant figures (for display).
fn sig(v: f64, sig: i32) -> f64 {
    let e = v.abs().log10().floor() as i32;
    let f = 10f64.powi(sig - 1 - e);
    (v * f).round() / f
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn laplace_scale(d: &NoiseDistribution) -> f64 {
    match *d {
        NoiseDistribution::Laplace { scale } => scale,
        NoiseDistribution::Normal { std_dev } => std_dev,
    }
}

fn criterion_1() -> Result<Outcome> {
    let spec = build_reference_problem();
    let noise = NoiseSet::for_problem(&spec, &PrivacyPolicy::laplace(2f64.ln(), 1.0)?)?;
    let b1 = &noise.blocks[0].distribution;
    let g = &noise.g.as_ref().expect("dual channel").distribution;
    let got = [laplace_scale(b1), b1.variance(), laplace_scale(g), g.variance()];
    let want = [5.771, 66.60, 57.45, 6600.0];
    let passed = got.iter().zip(&want).all(|(a, b)| agrees(*a, *b, 4));
    Ok(Outcome {
        id: 1,
        title: "Laplace calibration",
        passed,
        lines: vec![format!(
            "agent 1 scale {:.4} var {:.4}; w_g scale {:.4} var {:.2} (display 4 s.f.: {:?})",
            got[0], got[1], got[2], got[3], got.map(|v| sig(v, 4))
        )],
    })
}

fn criterion_2() -> Result<Outcome> {
    let spec = build_reference_problem();
    let (eps, delta) = (2f64.ln(), 0.01);
    let k = kappa(delta, eps)?;
    let noise = NoiseSet::for_problem(&spec, &PrivacyPolicy::gaussian(eps, delta, 1.0)?)?;
    let vars = noise.block_variances();
    let mut distinct: Vec<f64> = vars.iter().map(|v| sig(*v, 4)).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let g = noise.g_variance();
    // agents 1, 6 and 8 carry the wider constraint blocks
    let table = vars.iter().enumerate().all(|(i, v)| {
        let want = if matches!(i, 0 | 5 | 7) { 101.3 } else { 50.66 };
        agrees(*v, want, 4)
    });
    let passed = (k - 3.559).abs() <= 1e-3 && table && rel(g, 4.073e4) <= 0.005;
    Ok(Outcome {
        id: 2,
        title: "Gaussian calibration",
        passed,
        lines: vec![format!(
            "kappa {k:.5}; block variances {distinct:?}; w_g variance {g:.1}"
        )],
    })
}

fn criterion_3(map: &SaddleMap, z0: &ReferenceSolution, secs: f64) -> Outcome {
    let x = z0.x0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mu = z0.mu0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let passed = z0.kkt_residual <= 1e-4 && rel(x, 13.19) <= 0.01 && rel(mu, 2.169) <= 0.02 && secs <= 120.0;
    Outcome {
        id: 3,
        title: "reference solution",
        passed,
        lines: vec![format!(
            "kkt {:.2e}, |x0| {x:.4}, |mu0| {mu:.4}, R {:.4}, n = {}, {secs:.1} s",
            z0.kkt_residual,
            map.dual_set().radius(),
            map.n()
        )],
    }
}

fn private_runs(
    map: &SaddleMap,
    z0: &ReferenceSolution,
    policy: &PrivacyPolicy,
    seeds: std::ops::Range<u64>,
) -> Result<Vec<RunTrace>> {
    let mut cfg = SolverConfig::new(StepSchedule::reference(), 100_000);
    cfg.record_every = 10_000;
    seeds
        .into_par_iter()
        .map(|seed| solve(map, &cfg, Some(policy), seed, Some(z0)))
        .collect()
}

fn x_err(t: &RunTrace, k: u64) -> f64 {
    t.at(k).and_then(|r| r.x_error).expect("error column recorded")
}

fn criterion_4(map: &SaddleMap, z0: &ReferenceSolution) -> Result<Outcome> {
    let start = Instant::now();
    let runs = private_runs(map, z0, &PrivacyPolicy::laplace(2f64.ln(), 1.0)?, 0..10)?;
    let secs = start.elapsed().as_secs_f64();
    let mid = median(runs.iter().map(|t| x_err(t, 50_000)).collect());
    let fin = median(runs.iter().map(|t| x_err(t, 100_000)).collect());
    Ok(Outcome {
        id: 4,
        title: "epsilon-DP end to end",
        passed: (0.05..=1.5).contains(&fin) && mid > fin && secs <= 300.0,
        lines: vec![format!(
            "10 seeds: median |x - x0| {mid:.4} at 5e4, {fin:.4} at 1e5 ({secs:.1} s)"
        )],
    })
}

fn criterion_5(map: &SaddleMap, z0: &ReferenceSolution) -> Result<Outcome> {
    let start = Instant::now();
    let runs = private_runs(map, z0, &PrivacyPolicy::gaussian(2f64.ln(), 0.01, 1.0)?, 0..10)?;
    let secs = start.elapsed().as_secs_f64();
    let fin = median(runs.iter().map(|t| x_err(t, 100_000)).collect());
    let mu = median(
        runs.iter()
            .map(|t| t.final_record().mu_error.expect("error column recorded"))
            .collect(),
    );
    Ok(Outcome {
        id: 5,
        title: "(epsilon, delta)-DP end to end",
        passed: (0.3..=4.0).contains(&fin) && (0.1..=2.5).contains(&mu) && secs <= 300.0,
        lines: vec![format!(
            "10 seeds: median final |x - x0| {fin:.4}, |mu - mu0| {mu:.4} ({secs:.1} s)"
        )],
    })
}

fn same_trace(a: &RunTrace, b: &RunTrace) -> bool {
    let bits = |v: Option<f64>| v.map(f64::to_bits);
    a.records.len() == b.records.len()
        && a.records.iter().zip(&b.records).all(|(p, q)| {
            p.k == q.k
                && bits(p.x_error) == bits(q.x_error)
                && bits(p.mu_error) == bits(q.mu_error)
                && bits(p.kkt_residual) == bits(q.kkt_residual)
        })
        && bitwise_equal(&a.final_state, &b.final_state)
}

fn criterion_6(map: &SaddleMap, z0: &ReferenceSolution) -> Result<Outcome> {
    let policies = [
        ("noise-free", None),
        ("Laplace", Some(PrivacyPolicy::laplace(2f64.ln(), 1.0)?)),
        ("Gaussian", Some(PrivacyPolicy::gaussian(2f64.ln(), 0.01, 1.0)?)),
    ];
    let mut cfg = SolverConfig::new(StepSchedule::reference(), 1000);
    cfg.kkt_every = Some(100);
    let mut lines = Vec::new();
    let mut passed = true;
    for (name, policy) in &policies {
        let mut ok = true;
        for seed in [1, 2, 3] {
            let a = solve(map, &cfg, policy.as_ref(), seed, Some(z0))?;
            let (b, _) = simulate(map, &cfg, policy.as_ref(), seed, 1000, Some(z0), SimOptions::default())?;
            ok &= same_trace(&a, &b);
        }
        passed &= ok;
        lines.push(format!("{name}: seeds 1-3 {}", if ok { "identical" } else { "DIFFER" }));
    }
    Ok(Outcome {
        id: 6,
        title: "ensemble and cloud equivalence",
        passed,
        lines,
    })
}

fn criterion_7() -> Result<Outcome> {
    let map = SaddleMap::from_spec(build_scalar_problem())?;
    let dist = |t: &RunTrace| ((t.final_state.x[0] - 1.0).powi(2) + (t.final_state.mu[0] - 2.0).powi(2)).sqrt();
    let fast = StepSchedule::new(0.01, 0.5, 0.45, 0.5)?;
    let run = solve(&map, &SolverConfig::new(fast, 100_000), None, 0, None)?;
    let reference = solve(&map, &SolverConfig::new(StepSchedule::reference(), 100_000), None, 0, None)?;
    let d = dist(&run);
    Ok(Outcome {
        id: 7,
        title: "analytic KKT oracle",
        passed: d <= 1e-3,
        lines: vec![
            format!(
                "schedule (0.01, 0.5, 0.45, 0.5), 1e5 iterations: x = {:.6}, mu = {:.6}, distance {d:.2e}",
                run.final_state.x[0], run.final_state.mu[0]
            ),
            format!(
                "note: default schedule after 1e5 iterations sits at distance {:.2e} (regularization bias ~3 alpha_k)",
                dist(&reference)
            ),
        ],
    })
}

fn criterion_8(map: &SaddleMap) -> Result<Outcome> {
    let results = checks::run_all(map, 2024)?;
    Ok(Outcome {
        id: 8,
        title: "property suites",
        passed: results.iter().all(|c| c.passed),
        lines: results
            .iter()
            .map(|c| format!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail))
            .collect(),
    })
}

/// Direct recursion `E_{k+1} = (1 - tau_k) E_k + sigma_k`, independent of
/// the log-space closed form in the library.
fn direct_recursion(cfg: &AnalysisConfig, s: &StepSchedule, k_max: u64) -> Vec<f64> {
    let mut e = cfg.d_z * cfg.d_z;
    let mut out = vec![e];
    for k in 1..k_max {
        let t = terms_at(cfg, s, k);
        e = (1.0 - t.tau) * e + t.sigma;
        out.push(e);
    }
    out
}

fn criterion_9(map: &SaddleMap, l_g: f64) -> Result<Outcome> {
    let s = StepSchedule::reference();
    let noise = NoiseSet::for_problem(map.spec(), &PrivacyPolicy::laplace(2f64.ln(), 1.0)?)?;
    let noisy = AnalysisConfig::from_problem(map, &noise, l_g, true)?;
    let clean = noisy.without_noise();
    let mut lines = Vec::new();

    let terms = sequence_terms(&noisy, &s, 1_000_000)?;
    let r3 = terms.ratio(1000).unwrap();
    let r6 = terms.ratio(1_000_000).unwrap();
    let decreasing = (1000..1_000_000).all(|k| terms.ratio(k + 1).unwrap() < terms.ratio(k).unwrap());
    let ratio_ok = decreasing && r6 < 0.1 * r3;
    lines.push(format!(
        "sigma/tau (Laplace K_w = {:.4e}): {r3:.4e} at 1e3, {r6:.4e} at 1e6, ratio {:.4}, monotone {decreasing}",
        noisy.k_w,
        r6 / r3
    ));
    let clean_terms = sequence_terms(&clean, &s, 1_000_000)?;
    lines.push(format!(
        "note: with K_w = 0 the same ratio is {:.4}",
        clean_terms.ratio(1_000_000).unwrap() / clean_terms.ratio(1000).unwrap()
    ));

    let total = sigma_total_bound(&noisy, &s, DriftScaling::Scaled)?;
    let total_ok = total.is_finite();
    lines.push(format!("summed sigma bound {total:.4e}"));

    let k_max = 100_000;
    let mut worst: f64 = 0.0;
    for cfg in [&clean, &noisy] {
        let path = expected_error_path(cfg, &s, k_max)?;
        let oracle = direct_recursion(cfg, &s, k_max);
        for (a, b) in path.values.iter().zip(&oracle) {
            worst = worst.max(rel(*a, *b));
        }
    }
    let recursion_ok = worst <= 1e-10;
    lines.push(format!("closed form vs direct recursion to k = 1e5: worst relative gap {worst:.2e}"));

    let sens = SensitivityBundle::from_spec(map.spec(), 1.0, Norm::L1)?;
    let dims: Vec<usize> = (0..map.spec().num_agents()).map(|i| map.spec().block(i).len()).collect();
    let w = laplace_w(&sens, map.m(), &dims, map.dual_set().radius(), true)?;
    let curve = tradeoff_curve(&s, w, &[0.1, 2f64.ln(), 3f64.ln()])?;
    let base = curve[0].penalty * 0.01;
    let law = curve
        .iter()
        .map(|p| rel(p.penalty * p.epsilon * p.epsilon, base))
        .fold(0.0, f64::max);
    let law_ok = law <= 1e-14;
    lines.push(format!("trade-off penalty * eps^2 spread {law:.1e}"));

    Ok(Outcome {
        id: 9,
        title: "analysis consistency",
        passed: ratio_ok && total_ok && recursion_ok && law_ok,
        lines,
    })
}

fn criterion_10(map: &SaddleMap, z0: &ReferenceSolution, l_g: f64, trends: bool) -> Result<Outcome> {
    let s = StepSchedule::reference();
    let cfg = AnalysisConfig::from_problem(map, &NoiseSet::empty(), l_g, true)?;
    let mut sc = SolverConfig::new(s, 100_000);
    sc.record_every = 100;
    let run = solve(map, &sc, None, 0, Some(z0))?;
    let observed: Vec<(u64, f64)> = [100, 1000, 10_000, 100_000]
        .iter()
        .map(|&k| {
            let r = run.at(k).expect("checkpoint recorded");
            (k, r.x_error.unwrap().powi(2) + r.mu_error.unwrap().powi(2))
        })
        .collect();
    let points = compare_observed(&cfg, &s, &observed)?;
    let mut lines: Vec<String> = points
        .iter()
        .map(|p| format!("k = {}: observed {:.4e} <= bound {:.4e}: {}", p.k, p.observed, p.bound, p.holds()))
        .collect();
    lines.push(format!("trend checks of criteria 4 and 5 passed: {trends}"));
    Ok(Outcome {
        id: 10,
        title: "asymptotic claim (finite-horizon substitute)",
        passed: trends && points.iter().all(|p| p.holds()),
        lines,
    })
}

fn run() -> Result<Vec<Outcome>> {
    let mut out = vec![criterion_1()?, criterion_2()?];
    let map = SaddleMap::from_spec(build_reference_problem())?;
    let start = Instant::now();
    let z0 = compute_reference(&map, &ReferenceOptions::default())?;
    out.push(criterion_3(&map, &z0, start.elapsed().as_secs_f64()));
    out.push(criterion_4(&map, &z0)?);
    out.push(criterion_5(&map, &z0)?);
    out.push(criterion_6(&map, &z0)?);
    out.push(criterion_7()?);
    out.push(criterion_8(&map)?);
    let l_g = map.estimate_lipschitz(20_000, 1);
    out.push(criterion_9(&map, l_g)?);
    let trends = out[3].passed && out[4].passed;
    out.push(criterion_10(&map, &z0, l_g, trends)?);
    Ok(out)
}

fn main() -> ExitCode {
    let outcomes = match run() {
        Ok(o) => o,
        Err(e) => {
            println!("FAIL acceptance aborted: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut failed = 0;
    for o in &outcomes {
        println!("{} criterion {:>2}: {}", if o.passed { "PASS" } else { "FAIL" }, o.id, o.title);
        for l in &o.lines {
            println!("        {l}");
        }
        failed += usize::from(!o.passed);
    }
    println!("{} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
