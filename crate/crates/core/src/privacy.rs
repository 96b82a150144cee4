//! Adjacency, sensitivities and the Laplace and Gaussian mechanisms.
//!
//! Noise is addressed by `(master seed, stream id, timestep)`: every draw
//! reseeds a ChaCha20 stream and jumps to the word offset of `k`, so samples
//! can be regenerated in any order or on any thread.

use rand::distr::{Distribution, Open01};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{check_len, Error, Result};
use crate::linalg::Norm;
use crate::problem::ProblemSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Laplace,
    Gaussian,
    None,
}

/// Mechanism family with its `(epsilon, delta)` target, adjacency bound `B`
/// and the norm defining adjacency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyPolicy {
    pub mechanism: Mechanism,
    pub epsilon: f64,
    #[serde(default)]
    pub delta: f64,
    #[serde(default = "default_bound")]
    pub adjacency_bound: f64,
    pub norm: Norm,
}

fn default_bound() -> f64 {
    1.0
}

impl PrivacyPolicy {
    pub fn laplace(epsilon: f64, adjacency_bound: f64) -> Result<Self> {
        let p = Self {
            mechanism: Mechanism::Laplace,
            epsilon,
            delta: 0.0,
            adjacency_bound,
            norm: Norm::L1,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn gaussian(epsilon: f64, delta: f64, adjacency_bound: f64) -> Result<Self> {
        let p = Self {
            mechanism: Mechanism::Gaussian,
            epsilon,
            delta,
            adjacency_bound,
            norm: Norm::L2,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn none() -> Self {
        Self {
            mechanism: Mechanism::None,
            epsilon: f64::INFINITY,
            delta: 0.0,
            adjacency_bound: 1.0,
            norm: Norm::L1,
        }
    }

    pub fn is_active(&self) -> bool {
        self.mechanism != Mechanism::None
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidPolicy(msg));
        match self.mechanism {
            Mechanism::None => return Ok(()),
            Mechanism::Laplace => {
                if self.norm != Norm::L1 {
                    return bad("Laplace mechanism requires the 1-norm".into());
                }
                if self.delta != 0.0 {
                    return bad(format!("Laplace mechanism needs delta = 0, got {}", self.delta));
                }
            }
            Mechanism::Gaussian => {
                if self.norm != Norm::L2 {
                    return bad("Gaussian mechanism requires the 2-norm".into());
                }
                if !(self.delta > 0.0 && self.delta < 0.5) {
                    return bad(format!("Gaussian delta must lie in (0, 1/2), got {}", self.delta));
                }
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive and finite, got {}", self.epsilon));
        }
        if !(self.adjacency_bound > 0.0 && self.adjacency_bound.is_finite()) {
            return bad(format!(
                "adjacency bound must be positive and finite, got {}",
                self.adjacency_bound
            ));
        }
        Ok(())
    }
}

/// `Delta_p g = K^g_p B` and `Delta_p g_{x_i} = K^i_p B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityBundle {
    pub norm: Norm,
    pub delta_g: f64,
    pub delta_blocks: Vec<f64>,
}

impl SensitivityBundle {
    pub fn new(norm: Norm, delta_g: f64, delta_blocks: Vec<f64>) -> Result<Self> {
        if !(delta_g >= 0.0) || delta_blocks.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::InvalidPolicy("sensitivities must be nonnegative".into()));
        }
        Ok(Self {
            norm,
            delta_g,
            delta_blocks,
        })
    }

    pub fn from_spec(spec: &ProblemSpec, adjacency_bound: f64, norm: Norm) -> Result<Self> {
        let c = spec.constraint();
        Self::new(
            norm,
            c.lipschitz_g().get(norm) * adjacency_bound,
            c.lipschitz_blocks()
                .iter()
                .map(|k| k.get(norm) * adjacency_bound)
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseDistribution {
    Laplace { scale: f64 },
    Normal { std_dev: f64 },
}

impl NoiseDistribution {
    pub fn variance(&self) -> f64 {
        match *self {
            NoiseDistribution::Laplace { scale } => 2.0 * scale * scale,
            NoiseDistribution::Normal { std_dev } => std_dev * std_dev,
        }
    }

    fn is_degenerate(&self) -> bool {
        match *self {
            NoiseDistribution::Laplace { scale } => scale == 0.0,
            NoiseDistribution::Normal { std_dev } => std_dev == 0.0,
        }
    }
}

/// One i.i.d. noise source shaped `rows x cols` (row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseChannel {
    pub distribution: NoiseDistribution,
    pub rows: usize,
    pub cols: usize,
    pub stream: u64,
}

impl NoiseChannel {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn draw(&self, master_seed: u64, k: u64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.draw_into(master_seed, k, &mut out);
        out
    }

    /// Fills `out` with the sample for timestep `k`. A zero-scale channel
    /// yields exact zeros.
    pub fn draw_into(&self, master_seed: u64, k: u64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len());
        if self.distribution.is_degenerate() {
            out.fill(0.0);
            return;
        }
        let mut rng = stream_rng(master_seed, self.stream, k);
        match self.distribution {
            NoiseDistribution::Laplace { scale } => {
                for v in out.iter_mut() {
                    let u: f64 = Open01.sample(&mut rng);
                    *v = laplace_inverse_cdf(u, scale);
                }
            }
            NoiseDistribution::Normal { std_dev } => {
                for v in out.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = std_dev * z;
                }
            }
        }
    }
}

/// Generator positioned at `(stream, k)`; each timestep owns 2^32 words.
pub fn stream_rng(master_seed: u64, stream: u64, k: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng.set_word_pos((k as u128) << 32);
    rng
}

/// `u` in (0, 1) mapped to `Lap(0, scale)`.
pub fn laplace_inverse_cdf(u: f64, scale: f64) -> f64 {
    let v = u - 0.5;
    -scale * v.signum() * (1.0 - 2.0 * v.abs()).ln()
}

/// Calibrated channels: one `m x n_i` channel per agent Jacobian block and
/// one length-`m` channel for `g`. Empty in noise-free mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct NoiseSet {
    pub blocks: Vec<NoiseChannel>,
    pub g: Option<NoiseChannel>,
}

impl NoiseSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty() && self.g.is_none()
    }

    pub fn for_problem(spec: &ProblemSpec, policy: &PrivacyPolicy) -> Result<Self> {
        if !policy.is_active() {
            return Ok(Self::empty());
        }
        let sens = SensitivityBundle::from_spec(spec, policy.adjacency_bound, policy.norm)?;
        let dims: Vec<usize> = (0..spec.num_agents()).map(|i| spec.block(i).len()).collect();
        calibrate(policy, &sens, spec.m(), &dims)
    }

    /// Per-entry variances of the block channels and of the `g` channel.
    pub fn block_variances(&self) -> Vec<f64> {
        self.blocks.iter().map(|c| c.distribution.variance()).collect()
    }

    pub fn g_variance(&self) -> f64 {
        self.g.as_ref().map_or(0.0, |c| c.distribution.variance())
    }
}

/// Scale the mechanism noise to the sensitivities: `b = Delta_1 / epsilon`
/// for Laplace and `sigma = kappa(delta, epsilon) Delta_2` for Gaussian.
pub fn calibrate(
    policy: &PrivacyPolicy,
    sensitivities: &SensitivityBundle,
    m: usize,
    block_dims: &[usize],
) -> Result<NoiseSet> {
    policy.validate()?;
    if !policy.is_active() {
        return Ok(NoiseSet::empty());
    }
    if policy.norm != sensitivities.norm {
        return Err(Error::InvalidPolicy(format!(
            "policy uses the {}-norm but sensitivities use the {}-norm",
            policy.norm.index(),
            sensitivities.norm.index()
        )));
    }
    check_len(
        block_dims.len(),
        sensitivities.delta_blocks.len(),
        "sensitivity blocks",
    )?;
    let to_dist: Box<dyn Fn(f64) -> NoiseDistribution> = match policy.mechanism {
        Mechanism::Laplace => {
            let eps = policy.epsilon;
            Box::new(move |d| NoiseDistribution::Laplace { scale: d / eps })
        }
        Mechanism::Gaussian => {
            let k = kappa(policy.delta, policy.epsilon)?;
            Box::new(move |d| NoiseDistribution::Normal { std_dev: k * d })
        }
        Mechanism::None => unreachable!(),
    };
    let blocks = block_dims
        .iter()
        .zip(&sensitivities.delta_blocks)
        .enumerate()
        .map(|(i, (&cols, &d))| NoiseChannel {
            distribution: to_dist(d),
            rows: m,
            cols,
            stream: i as u64,
        })
        .collect();
    let g = NoiseChannel {
        distribution: to_dist(sensitivities.delta_g),
        rows: m,
        cols: 1,
        stream: block_dims.len() as u64,
    };
    Ok(NoiseSet {
        blocks,
        g: Some(g),
    })
}

/// Gaussian tail probability `P(Z > y)`.
pub fn q_function(y: f64) -> f64 {
    0.5 * erfc(y / std::f64::consts::SQRT_2)
}

/// `K_delta` with `q_function(K_delta) = delta`, by bisection.
pub fn q_inverse(delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("q_inverse needs delta in (0, 1), got {delta}")));
    }
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if q_function(mid) > delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (ql, qh) = (q_function(lo), q_function(hi));
    Ok(if (ql - delta).abs() <= (qh - delta).abs() { lo } else { hi })
}

/// `(K_delta + sqrt(K_delta^2 + 2 epsilon)) / (2 epsilon)`.
pub fn kappa(delta: f64, epsilon: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 0.5) {
        return Err(Error::Domain(format!("kappa needs delta in (0, 1/2), got {delta}")));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Domain(format!("kappa needs epsilon > 0, got {epsilon}")));
    }
    let k = q_inverse(delta)?;
    Ok((k + (k * k + 2.0 * epsilon).sqrt()) / (2.0 * epsilon))
}

/// Whether two truncated signals (one vector per timestep) are within `bound`
/// in the stacked `norm`.
pub fn adjacency(x1: &[Vec<f64>], x2: &[Vec<f64>], bound: f64, norm: Norm) -> Result<bool> {
    check_len(x1.len(), x2.len(), "signal length")?;
    let mut acc = 0.0;
    for (a, b) in x1.iter().zip(x2) {
        check_len(a.len(), b.len(), "signal dimension")?;
        let d = norm.of_diff(a, b);
        acc += match norm {
            Norm::L1 => d,
            Norm::L2 => d * d,
        };
    }
    let dist = match norm {
        Norm::L1 => acc,
        Norm::L2 => acc.sqrt(),
    };
    Ok(dist <= bound)
}
