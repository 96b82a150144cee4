use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use privcloud::analysis::{
    compare_observed, convergence_probability_with, expected_error_path, laplace_w,
    noise_second_moment, sequence_terms, sigma_tail_bound, sigma_tail_numeric, sigma_total_bound,
    theta_thresholds, tradeoff_curve, write_terms_csv, AnalysisConfig, Checkpoint, DriftScaling,
    TailMethod, Thresholds, TradeoffPoint,
};
use privcloud::checks::{self, CheckOutcome};
use privcloud::cloudsim::{simulate, write_event_log, SimOptions};
use privcloud::privacy::SensitivityBundle;
use privcloud::problem::ProblemConfig;
use privcloud::solver::{
    compute_reference, kkt_residual, solve, ReferenceSolution, RunTrace, SaddleMap, TraceMetadata,
    TraceRecord,
};
use privcloud::Norm;

use crate::config::{Mode, RunConfig};
use crate::NumericFailure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFile {
    pub config_hash: String,
    pub problem: ProblemConfig,
    pub x0_norm: f64,
    pub mu0_norm: f64,
    pub solution: ReferenceSolution,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn build_map(cfg: &RunConfig) -> anyhow::Result<SaddleMap> {
    Ok(SaddleMap::from_spec(cfg.problem.build()?)?)
}

pub fn cmd_reference(cfg: &RunConfig) -> anyhow::Result<ReferenceFile> {
    cfg.validate(Mode::Reference)?;
    if cfg.policy.build()?.is_active() {
        bail!("the reference is computed noise-free; remove the privacy policy");
    }
    let map = build_map(cfg)?;
    info!(
        "computing reference: {} regularized iterations, refinement to {:e}",
        cfg.reference.iterations, cfg.reference.refine_tol
    );
    let z0 = compute_reference(&map, &cfg.reference_options())?;
    if !z0.within(cfg.reference.tolerance) {
        return Err(NumericFailure(format!(
            "reference residual {:e} exceeds tolerance {:e} (regularized phase reached {:e})",
            z0.kkt_residual, cfg.reference.tolerance, z0.regularized_kkt
        ))
        .into());
    }
    let file = ReferenceFile {
        config_hash: cfg.hash(),
        problem: cfg.problem.clone(),
        x0_norm: norm(&z0.x0),
        mu0_norm: norm(&z0.mu0),
        solution: z0,
    };
    let path = cfg.reference_path();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    write_json(&path, &file)?;
    println!(
        "reference written to {}: kkt {:.3e}, |x0| {:.6}, |mu0| {:.6}, R {:.6}",
        path.display(),
        file.solution.kkt_residual,
        file.x0_norm,
        file.mu0_norm,
        file.solution.radius
    );
    Ok(file)
}

/// Loads the reference if present; a missing file is a warning, a file for
/// another problem is an error.
pub fn load_reference(cfg: &RunConfig, map: &SaddleMap) -> anyhow::Result<Option<ReferenceSolution>> {
    let path = cfg.reference_path();
    if !path.exists() {
        warn!(
            "no reference at {}; error columns will be omitted",
            path.display()
        );
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    let file: ReferenceFile =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if file.problem != cfg.problem || file.solution.x0.len() != map.n() || file.solution.mu0.len() != map.m() {
        bail!("reference {} was computed for a different problem", path.display());
    }
    Ok(Some(file.solution))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Some(Self {
            median,
            min: v[0],
            max: v[n - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub iterations: u64,
    pub initial_x_error: Option<f64>,
    pub midpoint_k: u64,
    pub midpoint_x_error: Option<f64>,
    pub final_x_error: Option<f64>,
    pub final_mu_error: Option<f64>,
    pub final_kkt_residual: f64,
    pub wall_time_secs: f64,
    pub trace: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub midpoint_x_error: Option<Stats>,
    pub final_x_error: Option<Stats>,
    pub final_mu_error: Option<Stats>,
    pub final_kkt_residual: Option<Stats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub mode: Mode,
    pub iterations: u64,
    pub seeds: Vec<SeedSummary>,
    pub aggregate: Aggregate,
}

fn trace_stem(seed: u64) -> String {
    format!("trace_seed{seed}")
}

/// Last recorded row at or before `k`.
fn row_at_or_before(records: &[TraceRecord], k: u64) -> &TraceRecord {
    let i = records.partition_point(|r| r.k <= k);
    &records[i.saturating_sub(1)]
}

fn run_seed(
    cfg: &RunConfig,
    mode: Mode,
    map: &SaddleMap,
    reference: Option<&ReferenceSolution>,
    seed: u64,
    out: &Path,
) -> anyhow::Result<SeedSummary> {
    let policy = cfg.policy.build()?;
    let solver = cfg.solver_config();
    let start = Instant::now();
    let stem = trace_stem(seed);
    let mut trace = match mode {
        Mode::Solve => solve(map, &solver, Some(&policy), seed, reference)?,
        Mode::Cloudsim => {
            let opts = SimOptions {
                debug: false,
                keep_logs: cfg.simulate.event_log,
            };
            let (trace, logs) = simulate(map, &solver, Some(&policy), seed, cfg.iterations, reference, opts)?;
            if cfg.simulate.event_log {
                write_event_log(&logs, &out.join(format!("events_seed{seed}.jsonl")))?;
            }
            trace
        }
        _ => unreachable!("only solve and cloudsim produce traces"),
    };
    let wall_time_secs = start.elapsed().as_secs_f64();
    let hash = cfg.hash();
    let extra = &mut trace.metadata.extra;
    extra.insert("config_hash".into(), hash.clone().into());
    extra.insert("mode".into(), serde_json::to_value(mode)?);
    extra.insert("config".into(), serde_json::to_value(cfg)?);
    let csv = out.join(format!("{stem}.csv"));
    trace.write_csv_annotated(&csv, Some(&format!("config_hash={hash} seed={seed}")))?;
    trace.write_metadata(&out.join(format!("{stem}.meta.json")))?;

    let mid = row_at_or_before(&trace.records, trace.metadata.iterations / 2);
    let last = trace.final_record();
    Ok(SeedSummary {
        seed,
        iterations: trace.metadata.iterations,
        initial_x_error: trace.records[0].x_error,
        midpoint_k: mid.k,
        midpoint_x_error: mid.x_error,
        final_x_error: last.x_error,
        final_mu_error: last.mu_error,
        final_kkt_residual: kkt_residual(&trace.final_state, map),
        wall_time_secs,
        trace: csv,
    })
}

pub fn cmd_run(cfg: &RunConfig, mode: Mode) -> anyhow::Result<RunSummary> {
    cfg.validate(mode)?;
    let map = build_map(cfg)?;
    let reference = load_reference(cfg, &map)?;
    let out = cfg.output_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    info!("{mode:?}: {} seeds x {} iterations", cfg.seeds.len(), cfg.iterations);
    let seeds = cfg
        .seeds
        .par_iter()
        .map(|&s| run_seed(cfg, mode, &map, reference.as_ref(), s, &out))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let pick = |f: fn(&SeedSummary) -> Option<f64>| -> Vec<f64> { seeds.iter().filter_map(f).collect() };
    let kkt: Vec<f64> = seeds.iter().map(|s| s.final_kkt_residual).collect();
    let summary = RunSummary {
        config_hash: cfg.hash(),
        mode,
        iterations: cfg.iterations,
        aggregate: Aggregate {
            midpoint_x_error: Stats::of(&pick(|s| s.midpoint_x_error)),
            final_x_error: Stats::of(&pick(|s| s.final_x_error)),
            final_mu_error: Stats::of(&pick(|s| s.final_mu_error)),
            final_kkt_residual: Stats::of(&kkt),
        },
        seeds,
    };
    write_json(&out.join("run_summary.json"), &summary)?;
    for s in &summary.seeds {
        println!(
            "seed {:>4}: x error {} -> {} -> {}, mu error {}, kkt {:.3e} ({:.2} s)",
            s.seed,
            fmt_opt(s.initial_x_error),
            fmt_opt(s.midpoint_x_error),
            fmt_opt(s.final_x_error),
            fmt_opt(s.final_mu_error),
            s.final_kkt_residual,
            s.wall_time_secs
        );
    }
    if let Some(st) = summary.aggregate.final_x_error {
        println!(
            "final x error over {} seeds: median {:.4}, min {:.4}, max {:.4}",
            summary.seeds.len(),
            st.median,
            st.min,
            st.max
        );
    }
    Ok(summary)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceCheckpoints {
    pub seed: u64,
    pub checkpoints: Vec<Checkpoint>,
    pub all_hold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub config_hash: String,
    pub traces: Vec<PathBuf>,
    pub analysis: AnalysisConfig,
    pub thresholds: Thresholds,
    pub k_max: u64,
    pub ratio_at_1e3: Option<f64>,
    pub ratio_at_k_max: f64,
    /// `None` when the schedule makes the sum diverge.
    pub sigma_total_bound: Option<f64>,
    pub tail_from: u64,
    pub sigma_tail_summed: Option<f64>,
    pub sigma_tail_numeric: Option<f64>,
    pub eps_ball: f64,
    pub probability_summed: Option<f64>,
    pub probability_numeric: Option<f64>,
    pub bound_at_k_max: f64,
    pub clipped_steps: u64,
    pub tradeoff: Vec<TradeoffPoint>,
    pub observed: Vec<TraceCheckpoints>,
}

fn default_traces(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".meta.json"))
        .collect();
    v.sort();
    Ok(v)
}

fn csv_for(meta: &Path) -> PathBuf {
    let s = meta.to_string_lossy();
    PathBuf::from(format!("{}.csv", s.trim_end_matches(".meta.json")))
}

pub fn cmd_analyze(cfg: &RunConfig) -> anyhow::Result<AnalysisSummary> {
    cfg.validate(Mode::Analyze)?;
    let a = &cfg.analysis;
    let map = build_map(cfg)?;
    let out = cfg.output_dir();
    let metas = if a.traces.is_empty() {
        default_traces(&out)?
    } else {
        a.traces.iter().map(|p| crate::config::resolve_path(p)).collect()
    };
    if metas.is_empty() {
        bail!("no traces found in {}", out.display());
    }
    let mut loaded = Vec::new();
    for m in &metas {
        let meta: TraceMetadata = serde_json::from_str(&fs::read_to_string(m).with_context(|| format!("reading {}", m.display()))?)
            .with_context(|| format!("parsing {}", m.display()))?;
        if meta.schedule != Some(cfg.schedule) {
            bail!(
                "trace {} was produced with schedule {:?}, analysis configured for {:?}",
                m.display(),
                meta.schedule,
                cfg.schedule
            );
        }
        let records = RunTrace::read_csv(&csv_for(m))?;
        loaded.push((meta, records));
    }
    let noise = &loaded[0].0.noise;
    let noisy_dual = loaded[0].0.noisy_dual;
    if loaded.iter().any(|(m, _)| &m.noise != noise || m.noisy_dual != noisy_dual) {
        bail!("traces mix privacy settings; analyze them separately");
    }

    let l_g = match a.l_g {
        Some(l) => l,
        None => map.estimate_lipschitz(a.lipschitz_samples, a.lipschitz_seed),
    };
    let acfg = AnalysisConfig::new(
        l_g,
        map.sup_norm(),
        map.diameter(),
        noise_second_moment(&map, noise, noisy_dual),
        a.theta,
    )?;
    let trace_k = loaded.iter().map(|(m, _)| m.iterations).max().unwrap_or(1);
    let k_max = a.k_max.unwrap_or(trace_k.max(cfg.iterations)).max(2);
    let s = cfg.schedule;
    let terms = sequence_terms(&acfg, &s, k_max)?;
    let path = expected_error_path(&acfg, &s, k_max)?;
    fs::create_dir_all(&out)?;
    write_terms_csv(&out.join("analysis_terms.csv"), &terms, &path, a.csv_every)?;

    let summable = 2.0 * s.c2 > 1.0 && s.c1 + s.c2 < 1.0;
    let tail_from = a.tail_from.max(1);
    let opt = |r: privcloud::Result<f64>| if summable { r.ok() } else { None };
    let sens = SensitivityBundle::from_spec(
        map.spec(),
        loaded[0].0.policy.map(|p| p.adjacency_bound).unwrap_or(1.0),
        Norm::L1,
    )?;
    let dims: Vec<usize> = (0..map.spec().num_agents()).map(|i| map.spec().block(i).len()).collect();
    let w = laplace_w(&sens, map.m(), &dims, map.dual_set().radius(), noisy_dual)?;

    let mut observed = Vec::new();
    let mut join = csv::Writer::from_path(out.join("observed_vs_bound.csv"))?;
    join.write_record(["seed", "k", "x_error", "mu_error", "squared_error", "bound"])?;
    for (meta, records) in &loaded {
        if records.iter().any(|r| r.x_error.is_none() || r.mu_error.is_none()) {
            warn!("trace for seed {} has no error columns; skipped in the comparison", meta.seed);
            continue;
        }
        for r in records.iter().filter(|r| r.k >= 1 && r.k <= k_max) {
            let (x, mu) = (r.x_error.unwrap(), r.mu_error.unwrap());
            join.write_record([
                meta.seed.to_string(),
                r.k.to_string(),
                format!("{x:e}"),
                format!("{mu:e}"),
                format!("{:e}", x * x + mu * mu),
                format!("{:e}", path.at(r.k).unwrap()),
            ])?;
        }
        let pts: Vec<(u64, f64)> = a
            .checkpoints
            .iter()
            .filter_map(|&k| records.iter().find(|r| r.k == k))
            .map(|r| (r.k, r.x_error.unwrap().powi(2) + r.mu_error.unwrap().powi(2)))
            .collect();
        let checkpoints = compare_observed(&acfg, &s, &pts)?;
        observed.push(TraceCheckpoints {
            seed: meta.seed,
            all_hold: checkpoints.iter().all(|c| c.holds()),
            checkpoints,
        });
    }
    join.flush()?;

    let summary = AnalysisSummary {
        config_hash: cfg.hash(),
        traces: metas,
        analysis: acfg,
        thresholds: theta_thresholds(&acfg, &s),
        k_max,
        ratio_at_1e3: terms.ratio(1000),
        ratio_at_k_max: terms.ratio(k_max).expect("k_max in range"),
        sigma_total_bound: opt(sigma_total_bound(&acfg, &s, DriftScaling::Scaled)),
        tail_from,
        sigma_tail_summed: opt(sigma_tail_bound(&acfg, &s, tail_from)),
        sigma_tail_numeric: opt(sigma_tail_numeric(&acfg, &s, tail_from)),
        eps_ball: a.eps_ball,
        probability_summed: opt(convergence_probability_with(&acfg, &s, a.eps_ball, tail_from, None, TailMethod::Summed)),
        probability_numeric: opt(convergence_probability_with(&acfg, &s, a.eps_ball, tail_from, None, TailMethod::Numeric)),
        bound_at_k_max: path.at(k_max).expect("k_max in range"),
        clipped_steps: path.clipped,
        tradeoff: tradeoff_curve(&s, w, &a.tradeoff_epsilons)?,
        observed,
    };
    write_json(&out.join("analysis_summary.json"), &summary)?;
    println!(
        "L_G {:.4}, K_w {:.4e}, thresholds M {:.3e} M_theta {:.3e} M_hat {:.3e}",
        acfg.l_g, acfg.k_w, summary.thresholds.m, summary.thresholds.m_theta, summary.thresholds.m_hat
    );
    println!(
        "sigma/tau {} at 1e3, {:.4e} at {k_max}; summed sigma bound {}",
        fmt_sci(summary.ratio_at_1e3),
        summary.ratio_at_k_max,
        fmt_sci(summary.sigma_total_bound)
    );
    for t in &summary.observed {
        println!("seed {:>4}: observed below bound at all checkpoints: {}", t.seed, t.all_hold);
    }
    let by_eps: BTreeMap<String, f64> = summary
        .tradeoff
        .iter()
        .map(|p| (format!("{:.4}", p.epsilon), p.penalty))
        .collect();
    println!("trade-off penalties: {by_eps:?}");
    Ok(summary)
}

fn fmt_sci(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4e}")).unwrap_or_else(|| "n/a".into())
}

pub fn cmd_check(cfg: &RunConfig, seed: u64) -> anyhow::Result<Vec<CheckOutcome>> {
    let map = build_map(cfg)?;
    let results = checks::run_all(&map, seed)?;
    for c in &results {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let out = cfg.output_dir();
    fs::create_dir_all(&out)?;
    write_json(&out.join("check_report.json"), &results)?;
    Ok(results)
}
