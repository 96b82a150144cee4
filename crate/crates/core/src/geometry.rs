//! Euclidean projections onto the primal boxes, the capped dual orthant
//! `M = { mu >= 0 : ||mu||_1 <= R }` and their product `Z = X x M`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::problem::{BoxSet, ProblemSpec};

/// The capped nonnegative orthant `{ mu >= 0, ||mu||_1 <= radius }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualSet {
    m: usize,
    radius: f64,
}

impl DualSet {
    pub fn new(m: usize, radius: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidDualSet("dimension must be >= 1".into()));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidDualSet(format!(
                "radius must be positive and finite, got {radius}"
            )));
        }
        Ok(Self { m, radius })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn contains(&self, mu: &[f64], tol: f64) -> bool {
        mu.len() == self.m
            && mu.iter().all(|v| *v >= 0.0)
            && mu.iter().sum::<f64>() <= self.radius + tol
    }

    /// Largest Euclidean norm of a member (attained at a vertex `R e_j`).
    pub fn max_norm(&self) -> f64 {
        self.radius
    }

    /// Euclidean diameter: distance between two distinct vertices, or `R` when `m = 1`.
    pub fn diameter(&self) -> f64 {
        if self.m == 1 {
            self.radius
        } else {
            self.radius * std::f64::consts::SQRT_2
        }
    }
}

/// Primal-dual point `z = (x, mu)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleState {
    pub x: Vec<f64>,
    pub mu: Vec<f64>,
}

impl EnsembleState {
    pub fn new(x: Vec<f64>, mu: Vec<f64>) -> Self {
        Self { x, mu }
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            x: vec![0.0; n],
            mu: vec![0.0; m],
        }
    }

    pub fn norm(&self) -> f64 {
        self.x
            .iter()
            .chain(&self.mu)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn distance(&self, other: &EnsembleState) -> f64 {
        self.x
            .iter()
            .zip(&other.x)
            .chain(self.mu.iter().zip(&other.mu))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// `x` followed by `mu` as one vector.
    pub fn stacked(&self) -> Vec<f64> {
        self.x.iter().chain(&self.mu).copied().collect()
    }
}

/// Componentwise clamp into `bx`.
pub fn project_box(point: &[f64], bx: &BoxSet) -> Vec<f64> {
    let mut out = point.to_vec();
    project_box_in_place(&mut out, bx);
    out
}

pub fn project_box_in_place(point: &mut [f64], bx: &BoxSet) {
    for (v, (l, u)) in point.iter_mut().zip(bx.lower().iter().zip(bx.upper())) {
        *v = v.clamp(*l, *u);
    }
}

/// Exact Euclidean projection onto `{ mu >= 0, ||mu||_1 <= R }`.
pub fn project_dual(point: &[f64], set: &DualSet) -> Vec<f64> {
    let mut out = point.to_vec();
    project_dual_in_place(&mut out, set);
    out
}

pub fn project_dual_in_place(mu: &mut [f64], set: &DualSet) {
    for v in mu.iter_mut() {
        *v = v.max(0.0);
    }
    let total: f64 = mu.iter().sum();
    if total <= set.radius {
        return;
    }
    let theta = simplex_threshold(mu, set.radius);
    for v in mu.iter_mut() {
        *v = (*v - theta).max(0.0);
    }
    // Rounding in the subtraction can leave the sum a few ulps above R.
    let total: f64 = mu.iter().sum();
    if total > set.radius {
        let scale = set.radius / total;
        for v in mu.iter_mut() {
            *v *= scale;
        }
    }
}

/// The unique `theta >= 0` with `sum_j max(v_j - theta, 0) = radius`, for
/// nonnegative `v` whose sum exceeds `radius`.
fn simplex_threshold(v: &[f64], radius: f64) -> f64 {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, s) in sorted.iter().enumerate() {
        cumulative += s;
        let candidate = (cumulative - radius) / (j + 1) as f64;
        if *s > candidate {
            theta = candidate;
        } else {
            break;
        }
    }
    theta.max(0.0)
}

/// Blockwise projection onto `Z = X_1 x ... x X_N x M`.
pub fn project_ensemble(
    state: &EnsembleState,
    spec: &ProblemSpec,
    set: &DualSet,
) -> Result<EnsembleState> {
    check_len(spec.n(), state.x.len(), "primal state")?;
    check_len(spec.m(), state.mu.len(), "dual state")?;
    check_len(spec.m(), set.m(), "dual set")?;
    let mut out = state.clone();
    for (i, bx) in spec.boxes().iter().enumerate() {
        project_box_in_place(&mut out.x[spec.block(i)], bx);
    }
    project_dual_in_place(&mut out.mu, set);
    Ok(out)
}

/// Options for [`compute_dual_radius_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualRadiusOptions {
    /// Stop once the projected-gradient step length drops below this.
    pub tolerance: f64,
    pub max_iters: usize,
    /// Use this radius instead, provided it is at least the computed bound.
    pub radius_override: Option<f64>,
}

impl Default for DualRadiusOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iters: 100_000,
            radius_override: None,
        }
    }
}

/// Smallest radius handed to [`DualSet::new`] when the Slater point already
/// minimizes `f` over `X` and the bound collapses to zero.
const MIN_RADIUS: f64 = 1e-12;

/// Builds `M` from the Slater bound `R = (f(x_bar) - f(x*)) / min_j(-g_j(x_bar))`.
pub fn compute_dual_radius(spec: &ProblemSpec) -> Result<DualSet> {
    compute_dual_radius_with(spec, &DualRadiusOptions::default())
}

pub fn compute_dual_radius_with(spec: &ProblemSpec, opts: &DualRadiusOptions) -> Result<DualSet> {
    let margin = spec.slater_margin();
    if !(margin > 0.0) {
        return Err(Error::SlaterViolation(margin));
    }
    let x_star = minimize_over_boxes(spec, opts.tolerance, opts.max_iters);
    let gap = spec.objective(spec.slater_point()) - spec.objective(&x_star);
    let bound = (gap / margin).max(MIN_RADIUS);
    let radius = match opts.radius_override {
        Some(r) if r < bound => {
            return Err(Error::InvalidDualSet(format!(
                "radius override {r} is below the Slater bound {bound}"
            )))
        }
        Some(r) => r,
        None => bound,
    };
    DualSet::new(spec.m(), radius)
}

/// `argmin_{x in X} f(x)`, agent by agent, by projected gradient descent
/// with backtracking.
pub fn minimize_over_boxes(spec: &ProblemSpec, tolerance: f64, max_iters: usize) -> Vec<f64> {
    let mut x = vec![0.0; spec.n()];
    for (i, (obj, bx)) in spec.objectives().iter().zip(spec.boxes()).enumerate() {
        let mut xi = bx.midpoint();
        let mut grad = vec![0.0; xi.len()];
        let mut step = 1.0;
        for _ in 0..max_iters {
            obj.gradient(&xi, &mut grad);
            let fx = obj.value(&xi);
            step *= 2.0;
            let (next, moved) = loop {
                let cand: Vec<f64> = xi.iter().zip(&grad).map(|(v, g)| v - step * g).collect();
                let cand = project_box(&cand, bx);
                let diff: Vec<f64> = cand.iter().zip(&xi).map(|(a, b)| a - b).collect();
                let lin: f64 = diff.iter().zip(&grad).map(|(d, g)| d * g).sum();
                let sq: f64 = diff.iter().map(|d| d * d).sum();
                if obj.value(&cand) <= fx + lin + sq / (2.0 * step) + 1e-15 * fx.abs()
                    || step < 1e-300
                {
                    break (cand, sq.sqrt());
                }
                step *= 0.5;
            };
            xi = next;
            if moved / step <= tolerance || moved == 0.0 {
                break;
            }
        }
        x[spec.block(i)].copy_from_slice(&xi);
    }
    x
}
