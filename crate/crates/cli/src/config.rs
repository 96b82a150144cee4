use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use privcloud::privacy::{Mechanism, PrivacyPolicy};
use privcloud::problem::ProblemConfig;
use privcloud::schedule::StepSchedule;
use privcloud::solver::{ReferenceOptions, SolverConfig};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_VAR: &str = "PRIVCLOUD_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Reference,
    Solve,
    Cloudsim,
    Analyze,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub mechanism: Mechanism,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default = "one")]
    pub adjacency_bound: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            mechanism: Mechanism::None,
            epsilon: None,
            delta: None,
            adjacency_bound: 1.0,
        }
    }
}

impl PolicyConfig {
    pub fn build(&self) -> anyhow::Result<PrivacyPolicy> {
        let eps = || self.epsilon.context("policy.epsilon is required for this mechanism");
        Ok(match self.mechanism {
            Mechanism::None => PrivacyPolicy::none(),
            Mechanism::Laplace => {
                if self.delta.is_some_and(|d| d != 0.0) {
                    bail!("policy.delta must be absent or 0 for the Laplace mechanism");
                }
                PrivacyPolicy::laplace(eps()?, self.adjacency_bound)?
            }
            Mechanism::Gaussian => PrivacyPolicy::gaussian(
                eps()?,
                self.delta.context("policy.delta is required for the Gaussian mechanism")?,
                self.adjacency_bound,
            )?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Recording {
    /// Every iterate up to here, then every `record_every`-th.
    pub dense_until: u64,
    pub record_every: u64,
    pub kkt_every: Option<u64>,
}

impl Default for Recording {
    fn default() -> Self {
        Self {
            dense_until: 1000,
            record_every: 10,
            kkt_every: Some(100),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceConfig {
    /// Defaults to `<output_dir>/reference.json`.
    pub path: Option<PathBuf>,
    pub iterations: u64,
    pub kkt_every: u64,
    pub tolerance: f64,
    pub refine_tol: f64,
    pub refine_max_iters: u64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        let d = ReferenceOptions::default();
        Self {
            path: None,
            iterations: d.iterations,
            kkt_every: d.kkt_every,
            tolerance: 1e-4,
            refine_tol: d.refine_tol,
            refine_max_iters: d.refine_max_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Trace metadata files; defaults to every `*.meta.json` in the output directory.
    pub traces: Vec<PathBuf>,
    pub theta: f64,
    pub lipschitz_samples: usize,
    pub lipschitz_seed: u64,
    /// Overrides the sampled `L_G`.
    pub l_g: Option<f64>,
    /// Horizon of the sequence-term table (defaults to `iterations`).
    pub k_max: Option<u64>,
    pub csv_every: u64,
    pub tail_from: u64,
    pub eps_ball: f64,
    pub tradeoff_epsilons: Vec<f64>,
    pub checkpoints: Vec<u64>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            traces: Vec::new(),
            theta: privcloud::analysis::DEFAULT_THETA,
            lipschitz_samples: 20_000,
            lipschitz_seed: 1,
            l_g: None,
            k_max: None,
            csv_every: 100,
            tail_from: 1000,
            eps_ball: 1.0,
            tradeoff_epsilons: vec![0.1, 2f64.ln(), 3f64.ln()],
            checkpoints: vec![100, 1000, 10_000, 100_000],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    /// Write a JSONL message log per seed.
    pub event_log: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub problem: ProblemConfig,
    #[serde(default = "StepSchedule::reference")]
    pub schedule: StepSchedule,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "yes")]
    pub noisy_dual: bool,
    #[serde(default)]
    pub recording: Recording,
    #[serde(default)]
    pub reference: ReferenceConfig,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub simulate: SimulateSection,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn default_iterations() -> u64 {
    100_000
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

fn default_output() -> PathBuf {
    PathBuf::from("output")
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("every field has a default")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self, mode: Mode) -> anyhow::Result<()> {
        if let Some(m) = self.mode {
            if m != mode {
                bail!("config declares mode {m:?} but the command runs {mode:?}");
            }
        }
        self.problem.build()?;
        let s = StepSchedule::new(
            self.schedule.alpha_bar,
            self.schedule.gamma_bar,
            self.schedule.c1,
            self.schedule.c2,
        )?;
        if !s.is_valid_family() {
            bail!("schedule exponents need 0 < c1 < c2 and c1 + c2 < 1, got c1 = {}, c2 = {}", s.c1, s.c2);
        }
        self.policy.build()?;
        if matches!(mode, Mode::Solve | Mode::Cloudsim) {
            if self.iterations == 0 {
                bail!("iterations must be at least 1");
            }
            if self.seeds.is_empty() {
                bail!("at least one seed is required");
            }
            let mut s = self.seeds.clone();
            s.sort_unstable();
            s.dedup();
            if s.len() != self.seeds.len() {
                bail!("seeds must be distinct");
            }
            self.solver_config().validate()?;
        }
        if mode == Mode::Reference && !(self.reference.tolerance > 0.0) {
            bail!("reference.tolerance must be positive");
        }
        if mode == Mode::Analyze {
            let a = &self.analysis;
            if !(a.theta > 0.0 && a.theta < 1.0) {
                bail!("analysis.theta must lie in (0, 1)");
            }
            if !(a.eps_ball > 0.0) {
                bail!("analysis.eps_ball must be positive");
            }
            if a.tradeoff_epsilons.iter().any(|e| !(*e > 0.0)) {
                bail!("analysis.tradeoff_epsilons must be positive");
            }
        }
        Ok(())
    }

    pub fn solver_config(&self) -> SolverConfig {
        let mut c = SolverConfig::new(self.schedule, self.iterations);
        c.dense_until = self.recording.dense_until;
        c.record_every = self.recording.record_every;
        c.kkt_every = self.recording.kkt_every;
        c.noisy_dual = self.noisy_dual;
        c
    }

    pub fn reference_options(&self) -> ReferenceOptions {
        ReferenceOptions {
            schedule: self.schedule,
            iterations: self.reference.iterations,
            kkt_every: self.reference.kkt_every,
            refine_tol: self.reference.refine_tol,
            refine_max_iters: self.reference.refine_max_iters,
        }
    }

    /// Relative paths are placed under `$PRIVCLOUD_OUTPUT_ROOT` when it is set.
    pub fn output_dir(&self) -> PathBuf {
        resolve_path(&self.output_dir)
    }

    pub fn reference_path(&self) -> PathBuf {
        match &self.reference.path {
            Some(p) => resolve_path(p),
            None => self.output_dir().join("reference.json"),
        }
    }

    /// SHA-256 of the canonical JSON form of the parsed configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

pub fn resolve_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}
