//! The saddle-point map `G` and the regularized projection iteration, in its
//! exact and privatized forms.
//!
//! The per-agent pieces ([`agent_payload`], [`agent_primal_step`],
//! [`dual_step`]) are the only arithmetic used for an update, both here and
//! in `cloudsim`, which keeps the two executions bitwise identical.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::{
    compute_dual_radius, project_box_in_place, project_dual_in_place, DualSet, EnsembleState,
};
use crate::linalg::{all_finite, dist2, dot, norm2};
use crate::privacy::{NoiseSet, PrivacyPolicy, SensitivityBundle};
use crate::problem::{BoxSet, ProblemSpec};
use crate::schedule::{Schedule, StepSchedule, StepSequence};

/// `G(z) = (f_x(x) + g_x(x)^T mu, -g(x))` over `Z = X x M`.
#[derive(Debug, Clone)]
pub struct SaddleMap {
    spec: ProblemSpec,
    dual_set: DualSet,
}

/// `f_x`, `g` and the row-major Jacobian `g_x` at one primal point.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub grad_f: Vec<f64>,
    pub g: Vec<f64>,
    pub jacobian: Vec<f64>,
}

impl SaddleMap {
    pub fn new(spec: ProblemSpec, dual_set: DualSet) -> Result<Self> {
        check_len(spec.m(), dual_set.m(), "dual set")?;
        Ok(Self { spec, dual_set })
    }

    /// Uses the Slater-derived dual radius.
    pub fn from_spec(spec: ProblemSpec) -> Result<Self> {
        let set = compute_dual_radius(&spec)?;
        Self::new(spec, set)
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn dual_set(&self) -> &DualSet {
        &self.dual_set
    }

    pub fn n(&self) -> usize {
        self.spec.n()
    }

    pub fn m(&self) -> usize {
        self.spec.m()
    }

    pub fn evaluate(&self, x: &[f64]) -> Evaluation {
        let c = self.spec.constraint();
        let mut grad_f = vec![0.0; self.n()];
        for (i, obj) in self.spec.objectives().iter().enumerate() {
            obj.gradient(&x[self.spec.block(i)], &mut grad_f[self.spec.block(i)]);
        }
        Evaluation {
            grad_f,
            g: c.eval(x),
            jacobian: c.jacobian(x),
        }
    }

    pub fn eval(&self, z: &EnsembleState) -> EnsembleState {
        let (n, m) = (self.n(), self.m());
        let e = self.evaluate(&z.x);
        let mut lx = e.grad_f;
        for r in 0..m {
            let row = &e.jacobian[r * n..(r + 1) * n];
            for (o, a) in lx.iter_mut().zip(row) {
                *o += a * z.mu[r];
            }
        }
        EnsembleState::new(lx, e.g.iter().map(|v| -v).collect())
    }

    /// `L(x, mu) = f(x) + mu^T g(x)`.
    pub fn lagrangian(&self, x: &[f64], mu: &[f64]) -> f64 {
        self.spec.objective(x) + dot(mu, &self.spec.constraint().eval(x))
    }

    pub fn project(&self, z: &mut EnsembleState) {
        for (i, bx) in self.spec.boxes().iter().enumerate() {
            project_box_in_place(&mut z.x[self.spec.block(i)], bx);
        }
        project_dual_in_place(&mut z.mu, &self.dual_set);
    }

    pub fn contains(&self, z: &EnsembleState, tol: f64) -> bool {
        let bx = self.spec.full_box();
        z.x.iter()
            .zip(bx.lower().iter().zip(bx.upper()))
            .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
            && self.dual_set.contains(&z.mu, tol)
    }

    /// `sup_{z in Z} ||z||`: the farthest box corner together with `R`.
    pub fn sup_norm(&self) -> f64 {
        let xb = self.spec.full_box().max_norm();
        (xb * xb + self.dual_set.max_norm().powi(2)).sqrt()
    }

    pub fn diameter(&self) -> f64 {
        let dx = self.spec.full_box().diameter();
        (dx * dx + self.dual_set.diameter().powi(2)).sqrt()
    }

    /// A point of `Z`: uniform over the boxes, uniform over the capped orthant.
    pub fn sample(&self, rng: &mut impl Rng) -> EnsembleState {
        let x = self.spec.full_box().sample(rng);
        let m = self.m();
        let e: Vec<f64> = (0..=m)
            .map(|_| -(1.0 - rng.random::<f64>()).ln())
            .collect();
        let total: f64 = e.iter().sum();
        let r = self.dual_set.radius();
        let mu = e[..m].iter().map(|v| r * v / total).collect();
        EnsembleState::new(x, mu)
    }

    /// Sampled lower bound on the 2-norm Lipschitz constant of `G` over `Z`,
    /// mixing global pairs with short displacements.
    pub fn estimate_lipschitz(&self, samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = self.diameter();
        let mut best: f64 = 0.0;
        for s in 0..samples {
            let a = self.sample(&mut rng);
            let b = if s % 2 == 0 {
                self.sample(&mut rng)
            } else {
                let h = 1e-4 * width;
                let mut b = a.clone();
                for v in b.x.iter_mut().chain(b.mu.iter_mut()) {
                    *v += h * (2.0 * rng.random::<f64>() - 1.0);
                }
                self.project(&mut b);
                b
            };
            let d = a.distance(&b);
            if d > 0.0 {
                best = best.max(self.eval(&a).distance(&self.eval(&b)) / d);
            }
        }
        best
    }
}

/// `g_{x_i}^T mu` for an `m x n_i` row-major block, summed over rows in order.
pub fn agent_payload(block: &[f64], cols: usize, mu: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, &w) in mu.iter().enumerate() {
        let row = &block[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * w;
        }
    }
    out
}

/// `Pi_{X_i}[x_i - gamma (grad_f + payload + alpha x_i)]`.
pub fn agent_primal_step(
    x_i: &[f64],
    payload: &[f64],
    alpha: f64,
    gamma: f64,
    grad_f: &[f64],
    bx: &BoxSet,
) -> Vec<f64> {
    let mut out: Vec<f64> = x_i
        .iter()
        .zip(payload)
        .zip(grad_f)
        .map(|((x, p), d)| x - gamma * (d + p + alpha * x))
        .collect();
    project_box_in_place(&mut out, bx);
    out
}

/// `Pi_M[mu + gamma (g_hat - alpha mu)]`.
pub fn dual_step(mu: &[f64], g_hat: &[f64], alpha: f64, gamma: f64, set: &DualSet) -> Vec<f64> {
    let mut out: Vec<f64> = mu
        .iter()
        .zip(g_hat)
        .map(|(u, g)| u + gamma * (g - alpha * u))
        .collect();
    project_dual_in_place(&mut out, set);
    out
}

/// Noise realized in one privatized step: `w_s = w_x^T mu` and `w_g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub w_s: Vec<f64>,
    pub w_g: Vec<f64>,
}

fn check_state(z: &EnsembleState, k: u64, what: &'static str) -> Result<()> {
    if all_finite(&z.x) && all_finite(&z.mu) {
        Ok(())
    } else {
        Err(Error::NonFinite { iteration: k, what })
    }
}

/// One step of the exact iteration.
pub fn step_deterministic(
    z: &EnsembleState,
    map: &SaddleMap,
    alpha: f64,
    gamma: f64,
    k: u64,
) -> Result<EnsembleState> {
    step_inner(z, map, alpha, gamma, k, None).map(|(z, _)| z)
}

/// Settings for the privatized step: channels, master seed, and whether the
/// multiplier update uses the noisy `g_hat` or the exact `g`.
#[derive(Debug, Clone, Copy)]
pub struct PrivateStep<'a> {
    pub noise: &'a NoiseSet,
    pub seed: u64,
    pub noisy_dual: bool,
}

/// One step of the privatized iteration at timestep `k`.
pub fn step_private(
    z: &EnsembleState,
    map: &SaddleMap,
    alpha: f64,
    gamma: f64,
    private: PrivateStep<'_>,
    k: u64,
) -> Result<(EnsembleState, NoiseRecord)> {
    let (z, rec) = step_inner(z, map, alpha, gamma, k, Some(private))?;
    Ok((z, rec.expect("private step records its noise")))
}

fn step_inner(
    z: &EnsembleState,
    map: &SaddleMap,
    alpha: f64,
    gamma: f64,
    k: u64,
    private: Option<PrivateStep<'_>>,
) -> Result<(EnsembleState, Option<NoiseRecord>)> {
    let spec = map.spec();
    check_len(spec.n(), z.x.len(), "primal state")?;
    check_len(spec.m(), z.mu.len(), "dual state")?;
    let c = spec.constraint();
    let m = spec.m();
    let g = c.eval(&z.x);
    let jac = c.jacobian(&z.x);
    let mut next_x = vec![0.0; spec.n()];
    let mut w_s = vec![0.0; spec.n()];
    let active = private.filter(|p| !p.noise.is_empty());
    for (i, obj) in spec.objectives().iter().enumerate() {
        let cols = spec.block(i);
        let x_i = &z.x[cols.clone()];
        let mut grad = vec![0.0; cols.len()];
        obj.gradient(x_i, &mut grad);
        let mut block = c.block(&jac, i);
        if let Some(p) = active {
            let w = p.noise.blocks[i].draw(p.seed, k);
            for (b, v) in block.iter_mut().zip(&w) {
                *b += v;
            }
            w_s[cols.clone()].copy_from_slice(&agent_payload(&w, cols.len(), &z.mu));
        }
        let payload = agent_payload(&block, cols.len(), &z.mu);
        let x_new = agent_primal_step(x_i, &payload, alpha, gamma, &grad, &spec.boxes()[i]);
        next_x[cols].copy_from_slice(&x_new);
    }
    let mut w_g = vec![0.0; m];
    let mut g_hat = g;
    if let Some(p) = active {
        if let Some(ch) = &p.noise.g {
            w_g = ch.draw(p.seed, k);
            if p.noisy_dual {
                for (a, v) in g_hat.iter_mut().zip(&w_g) {
                    *a += v;
                }
            }
        }
    }
    let next = EnsembleState::new(
        next_x,
        dual_step(&z.mu, &g_hat, alpha, gamma, map.dual_set()),
    );
    check_state(&next, k, "iterate after projection")?;
    let record = private.map(|_| NoiseRecord { w_s, w_g });
    Ok((next, record))
}

/// Natural-map residual `||z - Pi_Z[z - G(z)]||`.
pub fn kkt_residual(z: &EnsembleState, map: &SaddleMap) -> f64 {
    let gz = map.eval(z);
    natural_residual(z, &gz, map)
}

fn natural_residual(z: &EnsembleState, gz: &EnsembleState, map: &SaddleMap) -> f64 {
    let mut p = EnsembleState::new(
        z.x.iter().zip(&gz.x).map(|(a, b)| a - b).collect(),
        z.mu.iter().zip(&gz.mu).map(|(a, b)| a - b).collect(),
    );
    map.project(&mut p);
    z.distance(&p)
}

/// Iteration controls for [`solve`].
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub schedule: Schedule,
    pub max_iters: u64,
    /// Noise-free runs stop once `||z(k+1) - z(k)|| <= fixed_point_tol`.
    pub fixed_point_tol: f64,
    /// Record every iterate up to `dense_until`, then every `record_every`-th.
    pub record_every: u64,
    pub dense_until: u64,
    /// Evaluate the KKT residual at recorded iterates that are multiples of this.
    pub kkt_every: Option<u64>,
    pub noisy_dual: bool,
    pub initial: Option<EnsembleState>,
}

impl SolverConfig {
    pub fn new(schedule: impl Into<Schedule>, max_iters: u64) -> Self {
        Self {
            schedule: schedule.into(),
            max_iters,
            fixed_point_tol: 0.0,
            record_every: 1,
            dense_until: 0,
            kkt_every: None,
            noisy_dual: true,
            initial: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if self.record_every < 1 {
            return Err(Error::Config("record_every must be at least 1".into()));
        }
        if !(self.fixed_point_tol >= 0.0) {
            return Err(Error::Config("fixed_point_tol must be nonnegative".into()));
        }
        if self.kkt_every == Some(0) {
            return Err(Error::Config("kkt_every must be at least 1".into()));
        }
        if let Some(s) = self.schedule.power_law() {
            StepSchedule::new(s.alpha_bar, s.gamma_bar, s.c1, s.c2)?;
        }
        Ok(())
    }

    fn records(&self, k: u64) -> bool {
        k <= self.dense_until || k.is_multiple_of(self.record_every)
    }
}

/// One row of a trace; error columns are present when a reference was given.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: u64,
    pub x_error: Option<f64>,
    pub mu_error: Option<f64>,
    pub kkt_residual: Option<f64>,
}

/// Run description stored next to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub seed: u64,
    pub iterations: u64,
    pub converged: bool,
    pub radius: f64,
    pub schedule: Option<StepSchedule>,
    pub max_iters: u64,
    pub record_every: u64,
    pub dense_until: u64,
    pub fixed_point_tol: f64,
    pub noisy_dual: bool,
    pub policy: Option<PrivacyPolicy>,
    pub sensitivities: Option<SensitivityBundle>,
    pub noise: NoiseSet,
    pub reference_kkt: Option<f64>,
    /// Free-form entries supplied by the caller (for example a config hash).
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    pub final_state: EnsembleState,
    pub metadata: TraceMetadata,
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

fn parse_field(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Config(format!("bad numeric field {s:?}")))
}

impl RunTrace {
    pub fn final_record(&self) -> &TraceRecord {
        self.records.last().expect("a trace holds at least k = 0")
    }

    /// The recorded row for iterate `k`, if any.
    pub fn at(&self, k: u64) -> Option<&TraceRecord> {
        self.records
            .binary_search_by_key(&k, |r| r.k)
            .ok()
            .map(|i| &self.records[i])
    }

    /// CSV with columns `k, x_error, mu_error, kkt_residual` (blank when absent).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.write_csv_annotated(path, None)
    }

    /// [`write_csv`](Self::write_csv) preceded by a `# ...` comment line,
    /// which [`read_csv`](Self::read_csv) skips.
    pub fn write_csv_annotated(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        let mut file = BufWriter::new(File::create(path)?);
        if let Some(c) = comment {
            writeln!(file, "# {c}")?;
        }
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["k", "x_error", "mu_error", "kkt_residual"])?;
        for r in &self.records {
            w.write_record([
                r.k.to_string(),
                opt_field(r.x_error),
                opt_field(r.mu_error),
                opt_field(r.kkt_residual),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<TraceRecord>> {
        let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
        let mut out = Vec::new();
        for row in rd.records() {
            let row = row?;
            let field = |i: usize| row.get(i).unwrap_or("");
            out.push(TraceRecord {
                k: field(0)
                    .parse()
                    .map_err(|_| Error::Config(format!("bad iteration index {:?}", field(0))))?,
                x_error: parse_field(field(1))?,
                mu_error: parse_field(field(2))?,
                kkt_residual: parse_field(field(3))?,
            });
        }
        Ok(out)
    }

    pub fn write_metadata(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &self.metadata)?;
        writeln!(w)?;
        Ok(())
    }
}

/// Runs the iteration from `z(0)` (default all zeros). With a noise-free
/// policy (or `None`) this is the exact iteration; otherwise every step is
/// privatized with channels calibrated from the problem's constants.
pub fn solve(
    map: &SaddleMap,
    config: &SolverConfig,
    policy: Option<&PrivacyPolicy>,
    seed: u64,
    reference: Option<&ReferenceSolution>,
) -> Result<RunTrace> {
    let policy = policy.filter(|p| p.is_active());
    let noise = match policy {
        Some(p) => {
            p.validate()?;
            NoiseSet::for_problem(map.spec(), p)?
        }
        None => NoiseSet::empty(),
    };
    let sensitivities = match policy {
        Some(p) => Some(SensitivityBundle::from_spec(
            map.spec(),
            p.adjacency_bound,
            p.norm,
        )?),
        None => None,
    };
    let mut trace = solve_with_noise(map, config, &noise, seed, reference)?;
    trace.metadata.policy = policy.copied();
    trace.metadata.sensitivities = sensitivities;
    Ok(trace)
}

/// Per-iterate bookkeeping shared by [`solve_with_noise`] and `cloudsim`.
#[derive(Debug)]
pub struct TraceRecorder<'a> {
    map: &'a SaddleMap,
    config: &'a SolverConfig,
    reference: Option<&'a ReferenceSolution>,
    records: Vec<TraceRecord>,
    limit: f64,
}

impl<'a> TraceRecorder<'a> {
    pub fn new(
        map: &'a SaddleMap,
        config: &'a SolverConfig,
        reference: Option<&'a ReferenceSolution>,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(r) = reference {
            check_len(map.n(), r.x0.len(), "reference primal")?;
            check_len(map.m(), r.mu0.len(), "reference dual")?;
        }
        Ok(Self {
            map,
            config,
            reference,
            records: Vec::new(),
            limit: 10.0 * map.diameter().max(map.sup_norm()),
        })
    }

    pub fn initial_state(&self) -> Result<EnsembleState> {
        let z = self
            .config
            .initial
            .clone()
            .unwrap_or_else(|| EnsembleState::zeros(self.map.n(), self.map.m()));
        check_len(self.map.n(), z.x.len(), "initial primal state")?;
        check_len(self.map.m(), z.mu.len(), "initial dual state")?;
        Ok(z)
    }

    /// Divergence guard plus the row for `z(k)` when the cadence asks for it.
    pub fn observe(&mut self, k: u64, z: &EnsembleState, last: bool) -> Result<()> {
        let norm = z.norm();
        if !(norm <= self.limit) {
            return Err(Error::Divergence {
                iteration: k,
                norm,
                limit: self.limit,
            });
        }
        if !(k == 0 || last || self.config.records(k)) {
            return Ok(());
        }
        let (x_error, mu_error) = match self.reference {
            Some(r) => (Some(dist2(&z.x, &r.x0)), Some(dist2(&z.mu, &r.mu0))),
            None => (None, None),
        };
        let kkt = self
            .config
            .kkt_every
            .filter(|e| k.is_multiple_of(*e) || last)
            .map(|_| kkt_residual(z, self.map));
        self.records.push(TraceRecord {
            k,
            x_error,
            mu_error,
            kkt_residual: kkt,
        });
        Ok(())
    }

    pub fn finish(
        self,
        final_state: EnsembleState,
        iterations: u64,
        converged: bool,
        noise: &NoiseSet,
        seed: u64,
    ) -> RunTrace {
        RunTrace {
            records: self.records,
            final_state,
            metadata: TraceMetadata {
                seed,
                iterations,
                converged,
                radius: self.map.dual_set().radius(),
                schedule: self.config.schedule.power_law().copied(),
                max_iters: self.config.max_iters,
                record_every: self.config.record_every,
                dense_until: self.config.dense_until,
                fixed_point_tol: self.config.fixed_point_tol,
                noisy_dual: self.config.noisy_dual,
                policy: None,
                sensitivities: None,
                noise: noise.clone(),
                reference_kkt: self.reference.map(|r| r.kkt_residual),
                extra: Default::default(),
            },
        }
    }
}

/// [`solve`] with explicitly supplied channels.
pub fn solve_with_noise(
    map: &SaddleMap,
    config: &SolverConfig,
    noise: &NoiseSet,
    seed: u64,
    reference: Option<&ReferenceSolution>,
) -> Result<RunTrace> {
    let mut rec = TraceRecorder::new(map, config, reference)?;
    let mut z = rec.initial_state()?;
    rec.observe(0, &z, false)?;
    let private = PrivateStep {
        noise,
        seed,
        noisy_dual: config.noisy_dual,
    };
    let mut converged = false;
    let mut k = 0;
    while k < config.max_iters {
        k += 1;
        let (alpha, gamma) = (config.schedule.alpha(k), config.schedule.gamma(k));
        let next = if noise.is_empty() {
            step_deterministic(&z, map, alpha, gamma, k)?
        } else {
            step_private(&z, map, alpha, gamma, private, k)?.0
        };
        let moved = next.distance(&z);
        z = next;
        converged = noise.is_empty() && moved <= config.fixed_point_tol;
        rec.observe(k, &z, converged || k == config.max_iters)?;
        if converged {
            break;
        }
    }
    Ok(rec.finish(z, k, converged, noise, seed))
}

/// `z_0 = (x_0, mu_0)` with the residual it was accepted at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSolution {
    pub x0: Vec<f64>,
    pub mu0: Vec<f64>,
    pub kkt_residual: f64,
    pub radius: f64,
    /// Best residual reached by the regularized iteration alone.
    pub regularized_kkt: f64,
    pub regularized_iterations: u64,
    pub refine_iterations: u64,
}

impl ReferenceSolution {
    pub fn state(&self) -> EnsembleState {
        EnsembleState::new(self.x0.clone(), self.mu0.clone())
    }

    pub fn within(&self, tolerance: f64) -> bool {
        self.kkt_residual <= tolerance
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceOptions {
    pub schedule: StepSchedule,
    pub iterations: u64,
    pub kkt_every: u64,
    /// Extragradient refinement stops at this residual or after `refine_max_iters`.
    pub refine_tol: f64,
    pub refine_max_iters: u64,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        Self {
            schedule: StepSchedule::reference(),
            iterations: 1_000_000,
            kkt_every: 100,
            refine_tol: 1e-9,
            refine_max_iters: 5_000_000,
        }
    }
}

/// Long noise-free regularized run keeping the iterate of smallest residual,
/// then extragradient with backtracking on the unregularized problem. The
/// regularized iterates carry an `O(alpha_k)` bias, which the second phase
/// removes.
pub fn compute_reference(map: &SaddleMap, opts: &ReferenceOptions) -> Result<ReferenceSolution> {
    let mut z = EnsembleState::zeros(map.n(), map.m());
    let mut best = (kkt_residual(&z, map), z.clone());
    for k in 1..=opts.iterations {
        let (a, g) = opts.schedule.step(k)?;
        z = step_deterministic(&z, map, a, g, k)?;
        if k % opts.kkt_every == 0 || k == opts.iterations {
            let r = kkt_residual(&z, map);
            if r < best.0 {
                best = (r, z.clone());
            }
        }
    }
    let regularized_kkt = best.0;
    let (z, kkt, refine_iterations) =
        extragradient(map, best.1.clone(), opts.refine_tol, opts.refine_max_iters)?;
    let (z, kkt) = if kkt <= regularized_kkt {
        (z, kkt)
    } else {
        (best.1, regularized_kkt)
    };
    Ok(ReferenceSolution {
        x0: z.x,
        mu0: z.mu,
        kkt_residual: kkt,
        radius: map.dual_set().radius(),
        regularized_kkt,
        regularized_iterations: opts.iterations,
        refine_iterations,
    })
}

/// Projected extragradient with a backtracked step: `gamma ||G(z) - G(y)||`
/// is kept below `0.9 ||z - y||`, and the step grows slowly after each
/// accepted iteration.
pub fn extragradient(
    map: &SaddleMap,
    start: EnsembleState,
    tol: f64,
    max_iters: u64,
) -> Result<(EnsembleState, f64, u64)> {
    let shifted = |z: &EnsembleState, d: &EnsembleState, step: f64| {
        let mut y = EnsembleState::new(
            z.x.iter().zip(&d.x).map(|(a, b)| a - step * b).collect(),
            z.mu.iter().zip(&d.mu).map(|(a, b)| a - step * b).collect(),
        );
        map.project(&mut y);
        y
    };
    let mut z = start;
    let mut gamma = 1.0;
    let mut gz = map.eval(&z);
    let mut res = natural_residual(&z, &gz, map);
    let mut it = 0;
    while res > tol && it < max_iters {
        it += 1;
        let (y, gy) = loop {
            let y = shifted(&z, &gz, gamma);
            let gy = map.eval(&y);
            let lhs = gamma * gz.distance(&gy);
            if lhs <= 0.9 * z.distance(&y) || gamma < 1e-14 {
                break (y, gy);
            }
            gamma *= 0.5;
        };
        if y == z {
            break;
        }
        z = shifted(&z, &gy, gamma);
        if !(all_finite(&z.x) && all_finite(&z.mu)) {
            return Err(Error::NonFinite {
                iteration: it,
                what: "extragradient iterate",
            });
        }
        gz = map.eval(&z);
        res = natural_residual(&z, &gz, map);
        gamma *= 1.05;
    }
    Ok((z, res, it))
}

/// Largest value of `||G(a) - G(b)||^2`-normalized gap `-(G(a)-G(b))^T(a-b)`
/// over sampled pairs; nonpositive for a monotone map.
pub fn monotonicity_violation(map: &SaddleMap, pairs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..pairs {
        let (a, b) = (map.sample(&mut rng), map.sample(&mut rng));
        let (ga, gb) = (map.eval(&a), map.eval(&b));
        let inner: f64 = ga
            .stacked()
            .iter()
            .zip(gb.stacked())
            .zip(a.stacked().iter().zip(b.stacked()))
            .map(|((p, q), (s, t))| (p - q) * (s - t))
            .sum();
        let scale = norm2(&ga.stacked()).max(norm2(&gb.stacked())).max(1.0) * a.distance(&b).max(1.0);
        worst = worst.max(-inner / scale);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{build_reference_problem, build_scalar_problem};

    fn scalar_map() -> SaddleMap {
        SaddleMap::from_spec(build_scalar_problem()).unwrap()
    }

    #[test]
    fn scalar_single_step_by_hand() {
        let map = scalar_map();
        let z = EnsembleState::zeros(1, 1);
        let next = step_deterministic(&z, &map, 0.0, 0.1, 1).unwrap();
        assert_eq!(next.x, vec![0.0]);
        assert!((next.mu[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn saddle_point_is_fixed_without_regularization() {
        let map = scalar_map();
        let z = EnsembleState::new(vec![1.0], vec![2.0]);
        assert_eq!(step_deterministic(&z, &map, 0.0, 0.05, 1).unwrap(), z);
        assert!(kkt_residual(&z, &map) <= 1e-10);
    }

    #[test]
    fn residual_at_origin_of_reference_problem() {
        let map = SaddleMap::from_spec(build_reference_problem()).unwrap();
        assert!(kkt_residual(&EnsembleState::zeros(20, 6), &map) > 1.0);
    }

    #[test]
    fn null_agent_step() {
        let bx = BoxSet::cube(2, -1.0, 1.0).unwrap();
        let x = [0.3, -0.2];
        assert_eq!(agent_primal_step(&x, &[0.0; 2], 0.0, 0.5, &[0.0; 2], &bx), x.to_vec());
        let out = agent_primal_step(&x, &[10.0, -10.0], 0.0, 0.5, &[0.0; 2], &bx);
        assert_eq!(out, vec![-1.0, 1.0]);
    }

    #[test]
    fn ensemble_step_matches_agent_steps() {
        let map = SaddleMap::from_spec(build_reference_problem()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let z = map.sample(&mut rng);
            let (a, g) = (0.05, 0.003);
            let ens = step_deterministic(&z, &map, a, g, 1).unwrap();
            let e = map.evaluate(&z.x);
            let mut x = Vec::new();
            for i in 0..10 {
                let cols = map.spec().block(i);
                let block = map.spec().constraint().block(&e.jacobian, i);
                let p = agent_payload(&block, 2, &z.mu);
                x.extend(agent_primal_step(
                    &z.x[cols.clone()],
                    &p,
                    a,
                    g,
                    &e.grad_f[cols],
                    &map.spec().boxes()[i],
                ));
            }
            assert_eq!(ens.x, x);
            // compare with the stacked form Pi_Z[z - gamma (G(z) + alpha z)]
            let gz = map.eval(&z);
            let mut p = EnsembleState::new(
                z.x.iter().zip(&gz.x).map(|(v, d)| v - g * (d + a * v)).collect(),
                z.mu.iter().zip(&gz.mu).map(|(v, d)| v - g * (d + a * v)).collect(),
            );
            map.project(&mut p);
            assert!(p.distance(&ens) < 1e-12);
        }
    }

    #[test]
    fn zero_multiplier_annihilates_noise() {
        let map = SaddleMap::from_spec(build_reference_problem()).unwrap();
        let policy = PrivacyPolicy::laplace(std::f64::consts::LN_2, 1.0).unwrap();
        let noise = NoiseSet::for_problem(map.spec(), &policy).unwrap();
        let z = EnsembleState::new(vec![1.0; 20], vec![0.0; 6]);
        let private = PrivateStep {
            noise: &noise,
            seed: 1,
            noisy_dual: true,
        };
        let (_, rec) = step_private(&z, &map, 0.1, 0.01, private, 1).unwrap();
        assert!(rec.w_s.iter().all(|v| *v == 0.0));
        assert!(rec.w_g.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn rejects_non_finite_state() {
        let map = scalar_map();
        let z = EnsembleState::new(vec![f64::NAN], vec![0.0]);
        assert!(matches!(
            step_deterministic(&z, &map, 0.1, 0.1, 7),
            Err(Error::NonFinite { iteration: 7, .. })
        ));
    }

    #[test]
    fn divergence_guard_trips_on_bad_start() {
        let map = scalar_map();
        let mut cfg = SolverConfig::new(StepSchedule::reference(), 10);
        cfg.initial = Some(EnsembleState::new(vec![1e6], vec![0.0]));
        assert!(matches!(
            solve(&map, &cfg, None, 0, None),
            Err(Error::Divergence { iteration: 0, .. })
        ));
    }

    #[test]
    fn config_validation() {
        let map = scalar_map();
        let cfg = SolverConfig::new(StepSchedule::reference(), 0);
        assert!(solve(&map, &cfg, None, 0, None).is_err());
        let mut cfg = SolverConfig::new(StepSchedule::reference(), 5);
        cfg.record_every = 0;
        assert!(solve(&map, &cfg, None, 0, None).is_err());
    }

    #[test]
    fn fixed_point_stop() {
        let map = scalar_map();
        let mut cfg = SolverConfig::new(StepSchedule::new(0.01, 0.5, 0.45, 0.5).unwrap(), 1_000_000);
        cfg.fixed_point_tol = 1e-9;
        let trace = solve(&map, &cfg, None, 0, None).unwrap();
        assert!(trace.metadata.converged);
        assert!(trace.metadata.iterations < 1_000_000);
    }

    #[test]
    fn trace_csv_round_trip() {
        let map = scalar_map();
        let reference = ReferenceSolution {
            x0: vec![1.0],
            mu0: vec![2.0],
            kkt_residual: 0.0,
            radius: map.dual_set().radius(),
            regularized_kkt: 0.0,
            regularized_iterations: 0,
            refine_iterations: 0,
        };
        let mut cfg = SolverConfig::new(StepSchedule::reference(), 50);
        cfg.record_every = 10;
        cfg.kkt_every = Some(20);
        let trace = solve(&map, &cfg, None, 0, Some(&reference)).unwrap();
        let ks: Vec<u64> = trace.records.iter().map(|r| r.k).collect();
        assert_eq!(ks, vec![0, 10, 20, 30, 40, 50]);
        assert!(trace.at(20).unwrap().kkt_residual.is_some());
        assert!(trace.at(10).unwrap().kkt_residual.is_none());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        trace.write_csv(&path).unwrap();
        let back = RunTrace::read_csv(&path).unwrap();
        assert_eq!(back, trace.records);
        trace.write_metadata(&dir.path().join("t.json")).unwrap();
    }

    #[test]
    fn sampled_points_lie_in_z() {
        let map = SaddleMap::from_spec(build_reference_problem()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let z = map.sample(&mut rng);
            assert!(map.contains(&z, 1e-9));
        }
    }

    #[test]
    fn scalar_lipschitz_estimate() {
        // G(x, mu) = (2x - mu, x - 1): operator norm of [[2, -1], [1, 0]]
        let l = scalar_map().estimate_lipschitz(2000, 3);
        // largest singular value: sqrt of the top eigenvalue of [[5, -2], [-2, 1]]
        let svmax = 1.0 + 2f64.sqrt();
        assert!(l <= svmax + 1e-9 && l > 0.95 * svmax, "{l} vs {svmax}");
    }
}
