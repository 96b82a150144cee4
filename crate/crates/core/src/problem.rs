//! Constrained multi-agent problems: per-agent objectives on boxes coupled
//! through a shared convex constraint map `g(x) <= 0`.
//!
//! Objectives and constraints are supplied as value/derivative pairs through
//! the [`Objective`] and [`ConstraintMap`] traits. A handful of primitive
//! terms (linear, quadratic distance, quartic distance, norm-squared sums)
//! cover the built-in instances and the configuration-file format.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{dot, Norm};

/// Relative tolerance used by the finite-difference gradient checks.
pub const GRADIENT_TOLERANCE: f64 = 1e-5;

/// A convex, continuously differentiable per-agent objective.
pub trait Objective: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
}

/// `c^T x + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearObjective {
    pub coeffs: Vec<f64>,
    #[serde(default)]
    pub offset: f64,
}

impl Objective for LinearObjective {
    fn dim(&self) -> usize {
        self.coeffs.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        dot(&self.coeffs, x) + self.offset
    }

    fn gradient(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.coeffs);
    }
}

/// `||x - center||^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticDistance {
    pub center: Vec<f64>,
}

impl Objective for QuadraticDistance {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.center)
            .map(|(a, c)| (a - c) * (a - c))
            .sum()
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for ((o, a), c) in out.iter_mut().zip(x).zip(&self.center) {
            *o = 2.0 * (a - c);
        }
    }
}

/// `||x - center||^4`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarticDistance {
    pub center: Vec<f64>,
}

impl Objective for QuarticDistance {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let sq: f64 = x
            .iter()
            .zip(&self.center)
            .map(|(a, c)| (a - c) * (a - c))
            .sum();
        sq * sq
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let sq: f64 = x
            .iter()
            .zip(&self.center)
            .map(|(a, c)| (a - c) * (a - c))
            .sum();
        for ((o, a), c) in out.iter_mut().zip(x).zip(&self.center) {
            *o = 4.0 * sq * (a - c);
        }
    }
}

type ValueFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// Objective built from a pair of closures.
#[derive(Clone)]
pub struct FnObjective {
    dim: usize,
    value: Arc<ValueFn>,
    grad: Arc<GradFn>,
}

impl FnObjective {
    pub fn new(
        dim: usize,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            value: Arc::new(value),
            grad: Arc::new(grad),
        }
    }
}

impl fmt::Debug for FnObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnObjective").field("dim", &self.dim).finish()
    }
}

impl Objective for FnObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        (self.grad)(x, out)
    }
}

/// Agent `i`'s objective `f_i` together with its optional gradient Lipschitz constant.
#[derive(Debug, Clone)]
pub struct ObjectiveTerm {
    pub agent_id: usize,
    pub func: Arc<dyn Objective>,
    pub lipschitz_grad: Option<f64>,
}

impl ObjectiveTerm {
    pub fn new(agent_id: usize, func: impl Objective + 'static) -> Self {
        Self {
            agent_id,
            func: Arc::new(func),
            lipschitz_grad: None,
        }
    }

    pub fn with_lipschitz(mut self, l: f64) -> Self {
        self.lipschitz_grad = Some(l);
        self
    }

    pub fn dim(&self) -> usize {
        self.func.dim()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.func.value(x)
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        self.func.gradient(x, out)
    }
}

/// Axis-aligned box `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_len(lower.len(), upper.len(), "box bounds")?;
        if lower.is_empty() {
            return Err(Error::InvalidProblem("box must have dimension >= 1".into()));
        }
        for (j, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !l.is_finite() || !u.is_finite() || l > u {
                return Err(Error::InvalidProblem(format!(
                    "box component {j}: need finite lower <= upper, got [{l}, {u}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    /// Cartesian product of boxes, in order.
    pub fn product(boxes: &[BoxSet]) -> Self {
        let lower = boxes.iter().flat_map(|b| b.lower.iter().copied()).collect();
        let upper = boxes.iter().flat_map(|b| b.upper.iter().copied()).collect();
        Self { lower, upper }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    /// Largest Euclidean norm of a point in the box (attained at a corner).
    pub fn max_norm(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| l.abs().max(u.abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Euclidean diameter (length of the main diagonal).
    pub fn diameter(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| (u - l) * (u - l))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_degenerate(&self) -> bool {
        self.lower.iter().zip(&self.upper).all(|(l, u)| l == u)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| if l == u { *l } else { rng.random_range(*l..=*u) })
            .collect()
    }
}

/// A convex `C^1` constraint map `g: R^n -> R^m` with its Jacobian.
pub trait ConstraintMap: Send + Sync + fmt::Debug {
    fn num_constraints(&self) -> usize;
    fn num_vars(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);
    /// Row-major `m x n` Jacobian: `out[j * n + c] = d g_j / d x_c`.
    fn jacobian(&self, x: &[f64], out: &mut [f64]);
}

/// One addend of a [`ConstraintRow`]. Indices are 0-based positions in the
/// stacked state vector `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowTerm {
    /// `coeff * ||x[start .. start + len]||^2`
    SquaredNorm {
        start: usize,
        len: usize,
        #[serde(default = "one")]
        coeff: f64,
    },
    /// `coeff * x[index]^2`
    Square {
        index: usize,
        #[serde(default = "one")]
        coeff: f64,
    },
    /// `coeff * x[index]`
    Linear { index: usize, coeff: f64 },
}

fn one() -> f64 {
    1.0
}

/// `g_j(x) = constant + sum(terms)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRow {
    pub constant: f64,
    pub terms: Vec<RowTerm>,
}

/// Constraint map whose rows are sums of weighted squares and linear terms.
/// Every row is convex as long as the quadratic coefficients are nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSumConstraint {
    n: usize,
    rows: Vec<ConstraintRow>,
}

impl QuadraticSumConstraint {
    pub fn new(n: usize, rows: Vec<ConstraintRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidProblem("need at least one constraint".into()));
        }
        for (j, row) in rows.iter().enumerate() {
            for t in &row.terms {
                let (end, coeff, quadratic) = match *t {
                    RowTerm::SquaredNorm { start, len, coeff } => (start + len, coeff, true),
                    RowTerm::Square { index, coeff } => (index + 1, coeff, true),
                    RowTerm::Linear { index, coeff } => (index + 1, coeff, false),
                };
                if end > n {
                    return Err(Error::InvalidProblem(format!(
                        "constraint {j}: term index out of range for n = {n}"
                    )));
                }
                if quadratic && coeff < 0.0 {
                    return Err(Error::InvalidProblem(format!(
                        "constraint {j}: negative quadratic coefficient makes g_j nonconvex"
                    )));
                }
            }
        }
        Ok(Self { n, rows })
    }

    pub fn rows(&self) -> &[ConstraintRow] {
        &self.rows
    }

    /// Diagonal Hessian coefficients: `h[j][c]` is the coefficient of `x_c^2` in row `j`.
    fn square_coeffs(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|row| {
                let mut h = vec![0.0; self.n];
                for t in &row.terms {
                    match *t {
                        RowTerm::SquaredNorm { start, len, coeff } => {
                            for hc in &mut h[start..start + len] {
                                *hc += coeff;
                            }
                        }
                        RowTerm::Square { index, coeff } => h[index] += coeff,
                        RowTerm::Linear { .. } => {}
                    }
                }
                h
            })
            .collect()
    }

    /// Exact Lipschitz constant of the flattened Jacobian block for the
    /// columns in `cols`, with the same `p`-norm on input and output.
    pub fn block_lipschitz(&self, cols: Range<usize>, norm: Norm) -> f64 {
        let h = self.square_coeffs();
        cols.map(|c| {
            let col: Vec<f64> = h.iter().map(|row| 2.0 * row[c]).collect();
            norm.of(&col)
        })
        .fold(0.0, f64::max)
    }

    /// Upper bound on the Lipschitz constant of `g` over `domain`: the
    /// supremum of the induced norm of the Jacobian (`p = 1`) or of its
    /// Frobenius norm (`p = 2`).
    pub fn lipschitz_bound(&self, domain: &BoxSet, norm: Norm) -> f64 {
        let m = self.rows.len();
        let mut entry_max = vec![0.0; m * self.n];
        for (j, row) in self.rows.iter().enumerate() {
            let mut quad = vec![0.0; self.n];
            let mut lin = vec![0.0; self.n];
            for t in &row.terms {
                match *t {
                    RowTerm::SquaredNorm { start, len, coeff } => {
                        for q in &mut quad[start..start + len] {
                            *q += coeff;
                        }
                    }
                    RowTerm::Square { index, coeff } => quad[index] += coeff,
                    RowTerm::Linear { index, coeff } => lin[index] += coeff,
                }
            }
            for c in 0..self.n {
                let reach = domain.lower()[c].abs().max(domain.upper()[c].abs());
                entry_max[j * self.n + c] = 2.0 * quad[c] * reach + lin[c].abs();
            }
        }
        match norm {
            Norm::L1 => (0..self.n)
                .map(|c| (0..m).map(|j| entry_max[j * self.n + c]).sum::<f64>())
                .fold(0.0, f64::max),
            Norm::L2 => entry_max.iter().map(|e| e * e).sum::<f64>().sqrt(),
        }
    }
}

impl ConstraintMap for QuadraticSumConstraint {
    fn num_constraints(&self) -> usize {
        self.rows.len()
    }

    fn num_vars(&self) -> usize {
        self.n
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(&self.rows) {
            let mut v = row.constant;
            for t in &row.terms {
                v += match *t {
                    RowTerm::SquaredNorm { start, len, coeff } => {
                        coeff * x[start..start + len].iter().map(|a| a * a).sum::<f64>()
                    }
                    RowTerm::Square { index, coeff } => coeff * x[index] * x[index],
                    RowTerm::Linear { index, coeff } => coeff * x[index],
                };
            }
            *o = v;
        }
    }

    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (j, row) in self.rows.iter().enumerate() {
            let r = &mut out[j * self.n..(j + 1) * self.n];
            for t in &row.terms {
                match *t {
                    RowTerm::SquaredNorm { start, len, coeff } => {
                        for c in start..start + len {
                            r[c] += 2.0 * coeff * x[c];
                        }
                    }
                    RowTerm::Square { index, coeff } => r[index] += 2.0 * coeff * x[index],
                    RowTerm::Linear { index, coeff } => r[index] += coeff,
                }
            }
        }
    }
}

type ConstraintEvalFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// Constraint map built from closures.
#[derive(Clone)]
pub struct FnConstraint {
    m: usize,
    n: usize,
    eval: Arc<ConstraintEvalFn>,
    jac: Arc<ConstraintEvalFn>,
}

impl FnConstraint {
    pub fn new(
        m: usize,
        n: usize,
        eval: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        jac: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            m,
            n,
            eval: Arc::new(eval),
            jac: Arc::new(jac),
        }
    }
}

impl fmt::Debug for FnConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnConstraint")
            .field("m", &self.m)
            .field("n", &self.n)
            .finish()
    }
}

impl ConstraintMap for FnConstraint {
    fn num_constraints(&self) -> usize {
        self.m
    }

    fn num_vars(&self) -> usize {
        self.n
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.eval)(x, out)
    }

    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        (self.jac)(x, out)
    }
}

/// Lipschitz constants for the 1- and 2-norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormConstants {
    pub l1: f64,
    pub l2: f64,
}

impl NormConstants {
    pub fn get(&self, norm: Norm) -> f64 {
        match norm {
            Norm::L1 => self.l1,
            Norm::L2 => self.l2,
        }
    }
}

/// The coupling constraint together with its agent block structure and the
/// Lipschitz constants `K^g_p` (of `g`) and `K^i_p` (of each block `g_{x_i}`).
#[derive(Debug, Clone)]
pub struct ConstraintFunction {
    map: Arc<dyn ConstraintMap>,
    agent_blocks: Vec<Range<usize>>,
    lipschitz_g: NormConstants,
    lipschitz_blocks: Vec<NormConstants>,
}

impl ConstraintFunction {
    pub fn new(
        map: impl ConstraintMap + 'static,
        agent_blocks: Vec<Range<usize>>,
        lipschitz_g: NormConstants,
        lipschitz_blocks: Vec<NormConstants>,
    ) -> Result<Self> {
        let n = map.num_vars();
        let mut next = 0;
        for (i, b) in agent_blocks.iter().enumerate() {
            if b.start != next || b.end <= b.start {
                return Err(Error::InvalidProblem(format!(
                    "agent block {i} ({b:?}) does not continue the partition at column {next}"
                )));
            }
            next = b.end;
        }
        if next != n {
            return Err(Error::InvalidProblem(format!(
                "agent blocks cover {next} columns, constraint has n = {n}"
            )));
        }
        check_len(agent_blocks.len(), lipschitz_blocks.len(), "block Lipschitz constants")?;
        let all = std::iter::once(&lipschitz_g).chain(&lipschitz_blocks);
        for k in all {
            if !(k.l1 >= 0.0 && k.l2 >= 0.0 && k.l1.is_finite() && k.l2.is_finite()) {
                return Err(Error::InvalidProblem(format!(
                    "Lipschitz constants must be finite and nonnegative, got {k:?}"
                )));
            }
        }
        Ok(Self {
            map: Arc::new(map),
            agent_blocks,
            lipschitz_g,
            lipschitz_blocks,
        })
    }

    pub fn m(&self) -> usize {
        self.map.num_constraints()
    }

    pub fn n(&self) -> usize {
        self.map.num_vars()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m()];
        self.map.eval(x, &mut out);
        out
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        self.map.eval(x, out)
    }

    pub fn jacobian(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m() * self.n()];
        self.map.jacobian(x, &mut out);
        out
    }

    pub fn jacobian_into(&self, x: &[f64], out: &mut [f64]) {
        self.map.jacobian(x, out)
    }

    /// Block `g_{x_i}(x)` as a row-major `m x n_i` matrix.
    pub fn block(&self, jacobian: &[f64], agent: usize) -> Vec<f64> {
        let n = self.n();
        let cols = self.agent_blocks[agent].clone();
        (0..self.m())
            .flat_map(|j| jacobian[j * n + cols.start..j * n + cols.end].iter().copied())
            .collect()
    }

    pub fn agent_blocks(&self) -> &[Range<usize>] {
        &self.agent_blocks
    }

    pub fn lipschitz_g(&self) -> NormConstants {
        self.lipschitz_g
    }

    pub fn lipschitz_blocks(&self) -> &[NormConstants] {
        &self.lipschitz_blocks
    }
}

/// A full problem instance: objectives, boxes, constraint and Slater point.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    objectives: Vec<ObjectiveTerm>,
    boxes: Vec<BoxSet>,
    constraint: ConstraintFunction,
    slater_point: Vec<f64>,
}

impl ProblemSpec {
    pub fn new(
        objectives: Vec<ObjectiveTerm>,
        boxes: Vec<BoxSet>,
        constraint: ConstraintFunction,
        slater_point: Vec<f64>,
    ) -> Result<Self> {
        if objectives.is_empty() {
            return Err(Error::InvalidProblem("need at least one agent".into()));
        }
        check_len(objectives.len(), boxes.len(), "boxes per agent")?;
        check_len(
            objectives.len(),
            constraint.agent_blocks().len(),
            "constraint agent blocks",
        )?;
        for (i, ((obj, bx), block)) in objectives
            .iter()
            .zip(&boxes)
            .zip(constraint.agent_blocks())
            .enumerate()
        {
            if obj.agent_id != i {
                return Err(Error::InvalidProblem(format!(
                    "objective at position {i} carries agent id {}",
                    obj.agent_id
                )));
            }
            check_len(block.len(), obj.dim(), "objective dimension")?;
            check_len(block.len(), bx.dim(), "box dimension")?;
        }
        check_len(constraint.n(), slater_point.len(), "Slater point")?;
        let spec = Self {
            objectives,
            boxes,
            constraint,
            slater_point,
        };
        if !spec.full_box().contains(&spec.slater_point) {
            return Err(Error::InvalidProblem("Slater point lies outside X".into()));
        }
        let margin = spec.slater_margin();
        if !(margin > 0.0) {
            return Err(Error::SlaterViolation(margin));
        }
        Ok(spec)
    }

    pub fn num_agents(&self) -> usize {
        self.objectives.len()
    }

    pub fn n(&self) -> usize {
        self.constraint.n()
    }

    pub fn m(&self) -> usize {
        self.constraint.m()
    }

    pub fn objectives(&self) -> &[ObjectiveTerm] {
        &self.objectives
    }

    pub fn boxes(&self) -> &[BoxSet] {
        &self.boxes
    }

    pub fn constraint(&self) -> &ConstraintFunction {
        &self.constraint
    }

    pub fn slater_point(&self) -> &[f64] {
        &self.slater_point
    }

    pub fn block(&self, agent: usize) -> Range<usize> {
        self.constraint.agent_blocks()[agent].clone()
    }

    pub fn full_box(&self) -> BoxSet {
        BoxSet::product(&self.boxes)
    }

    /// `min_j -g_j(slater_point)`.
    pub fn slater_margin(&self) -> f64 {
        self.constraint
            .eval(&self.slater_point)
            .iter()
            .map(|g| -g)
            .fold(f64::INFINITY, f64::min)
    }

    /// Ensemble objective `f(x) = sum_i f_i(x_i)`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        self.objectives
            .iter()
            .zip(self.constraint.agent_blocks())
            .map(|(o, b)| o.value(&x[b.clone()]))
            .sum()
    }

    /// Stacked gradient `f_x(x)`.
    pub fn objective_gradient_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, b) in self.objectives.iter().zip(self.constraint.agent_blocks()) {
            o.gradient(&x[b.clone()], &mut out[b.clone()]);
        }
    }

    pub fn objective_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        self.objective_gradient_into(x, &mut out);
        out
    }
}

/// The ten-agent, six-constraint instance used in the experiments. Agents
/// are 0-based here: `x_{i,j}` of the write-up is `x[2 * (i - 1) + (j - 1)]`.
/// Lipschitz constants are the tabulated ones; the Slater point is the origin.
pub fn build_reference_problem() -> ProblemSpec {
    let mut objectives = Vec::with_capacity(10);
    let lin = |offset: f64| LinearObjective {
        coeffs: vec![1.0, 1.0],
        offset,
    };
    let quad = |c: [f64; 2]| QuadraticDistance { center: c.to_vec() };
    let quart = |c: [f64; 2]| QuarticDistance { center: c.to_vec() };
    objectives.push(ObjectiveTerm::new(0, lin(0.0)).with_lipschitz(0.0));
    objectives.push(ObjectiveTerm::new(1, quad([0.0, 0.0])).with_lipschitz(2.0));
    objectives.push(ObjectiveTerm::new(2, quad([-7.0, 7.0])).with_lipschitz(2.0));
    objectives.push(ObjectiveTerm::new(3, lin(-16.0)).with_lipschitz(0.0));
    objectives.push(ObjectiveTerm::new(4, quart([-3.0, -3.0])));
    objectives.push(ObjectiveTerm::new(5, lin(-20.0)).with_lipschitz(0.0));
    objectives.push(ObjectiveTerm::new(6, lin(20.0)).with_lipschitz(0.0));
    objectives.push(ObjectiveTerm::new(7, quad([-7.0, 0.0])).with_lipschitz(2.0));
    objectives.push(ObjectiveTerm::new(8, lin(-6.0)).with_lipschitz(0.0));
    objectives.push(ObjectiveTerm::new(9, quart([0.0, 8.0])));

    let map = reference_constraint_map();
    let blocks: Vec<Range<usize>> = (0..10).map(|i| 2 * i..2 * i + 2).collect();
    let wide = NormConstants {
        l1: 4.0,
        l2: 8f64.sqrt(),
    };
    let narrow = NormConstants { l1: 2.0, l2: 2.0 };
    let lipschitz_blocks = (0..10)
        .map(|i| if matches!(i, 0 | 5 | 7) { wide } else { narrow })
        .collect();
    let constraint = ConstraintFunction::new(
        map,
        blocks,
        NormConstants {
            l1: 39.82,
            l2: 56.71,
        },
        lipschitz_blocks,
    )
    .expect("reference blocks partition the columns");
    let boxes = (0..10)
        .map(|_| BoxSet::cube(2, -10.0, 10.0).expect("valid box"))
        .collect();
    ProblemSpec::new(objectives, boxes, constraint, vec![0.0; 20])
        .expect("reference problem satisfies its invariants")
}

/// The six rows of the reference coupling constraint over `x in R^20`.
pub fn reference_constraint_map() -> QuadraticSumConstraint {
    let sq = |agent: usize| RowTerm::SquaredNorm {
        start: 2 * agent,
        len: 2,
        coeff: 1.0,
    };
    let square = |index: usize| RowTerm::Square { index, coeff: 1.0 };
    let linear = |index: usize| RowTerm::Linear { index, coeff: 1.0 };
    let row = |constant: f64, terms: Vec<RowTerm>| ConstraintRow { constant, terms };
    let rows = vec![
        row(-10.0, vec![sq(0), sq(1), sq(2)]),
        row(-50.0, vec![sq(3), sq(4), sq(5)]),
        row(-50.0, vec![sq(6), sq(7), sq(8)]),
        row(-50.0, vec![square(0), linear(8), square(18)]),
        row(-20.0, vec![square(7), linear(12), linear(17)]),
        row(-30.0, vec![sq(7), sq(5)]),
    ];
    QuadraticSumConstraint::new(20, rows).expect("reference constraint is well formed")
}

/// One agent, `f(x) = x^2`, `g(x) = 1 - x <= 0`, `X = [-10, 10]`, Slater point 5.
/// Its saddle point is `(x, mu) = (1, 2)`.
pub fn build_scalar_problem() -> ProblemSpec {
    let map = QuadraticSumConstraint::new(
        1,
        vec![ConstraintRow {
            constant: 1.0,
            terms: vec![RowTerm::Linear {
                index: 0,
                coeff: -1.0,
            }],
        }],
    )
    .expect("valid constraint");
    let constraint = ConstraintFunction::new(
        map,
        vec![0..1],
        NormConstants { l1: 1.0, l2: 1.0 },
        vec![NormConstants { l1: 0.0, l2: 0.0 }],
    )
    .expect("valid blocks");
    ProblemSpec::new(
        vec![ObjectiveTerm::new(0, QuadraticDistance { center: vec![0.0] }).with_lipschitz(2.0)],
        vec![BoxSet::cube(1, -10.0, 10.0).expect("valid box")],
        constraint,
        vec![5.0],
    )
    .expect("scalar problem satisfies its invariants")
}

/// Sampled lower bound on the `p`-norm Lipschitz constant of `f` over `domain`.
///
/// Half of the `samples` pairs are drawn independently over the box, the
/// other half as short random displacements around a sampled point, which
/// probes the local derivative. A degenerate domain yields 0.
pub fn estimate_lipschitz<F>(
    f: F,
    domain: &BoxSet,
    norm: Norm,
    samples: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if samples < 2 {
        return Err(Error::Domain(format!("need at least 2 samples, got {samples}")));
    }
    if domain.is_degenerate() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths: Vec<f64> = domain
        .lower()
        .iter()
        .zip(domain.upper())
        .map(|(l, u)| u - l)
        .collect();
    let mut best: f64 = 0.0;
    for s in 0..samples {
        let a = domain.sample(&mut rng);
        let b = if s % 2 == 0 {
            domain.sample(&mut rng)
        } else {
            let mut b = a.clone();
            for ((bc, w), (l, u)) in b
                .iter_mut()
                .zip(&widths)
                .zip(domain.lower().iter().zip(domain.upper()))
            {
                let step = 1e-3 * w * rng.random_range(-1.0..=1.0);
                *bc = (*bc + step).clamp(*l, *u);
            }
            b
        };
        let dx = norm.of_diff(&a, &b);
        if dx <= 0.0 {
            continue;
        }
        let dy = norm.of_diff(&f(&a), &f(&b));
        best = best.max(dy / dx);
    }
    Ok(best)
}

/// Largest finite-difference mismatches found by [`check_gradients`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientReport {
    /// Max relative error of `grad f_i`, one entry per agent.
    pub objective_errors: Vec<f64>,
    /// Max relative error over all Jacobian entries of `g`.
    pub jacobian_error: f64,
    pub tolerance: f64,
    /// Names of functions whose error exceeds `tolerance`.
    pub flagged: Vec<String>,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn fd_step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

/// Compares every `grad f_i` and the Jacobian of `g` against central
/// differences at `samples` uniformly drawn points of `X`.
pub fn check_gradients(spec: &ProblemSpec, samples: usize, seed: u64) -> Result<GradientReport> {
    if samples == 0 {
        return Err(Error::Domain("need at least 1 sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full = spec.full_box();
    let (n, m) = (spec.n(), spec.m());
    let mut objective_errors = vec![0.0f64; spec.num_agents()];
    let mut jacobian_error = 0.0f64;
    for _ in 0..samples {
        let x = full.sample(&mut rng);
        for (i, obj) in spec.objectives().iter().enumerate() {
            let xi = x[spec.block(i)].to_vec();
            let mut grad = vec![0.0; xi.len()];
            obj.gradient(&xi, &mut grad);
            let mut probe = xi.clone();
            for c in 0..xi.len() {
                let h = fd_step(xi[c]);
                probe[c] = xi[c] + h;
                let up = obj.value(&probe);
                probe[c] = xi[c] - h;
                let down = obj.value(&probe);
                probe[c] = xi[c];
                let fd = (up - down) / (2.0 * h);
                objective_errors[i] = objective_errors[i].max(rel_err(grad[c], fd));
            }
        }
        let jac = spec.constraint().jacobian(&x);
        let mut probe = x.clone();
        for c in 0..n {
            let h = fd_step(x[c]);
            probe[c] = x[c] + h;
            let up = spec.constraint().eval(&probe);
            probe[c] = x[c] - h;
            let down = spec.constraint().eval(&probe);
            probe[c] = x[c];
            for j in 0..m {
                let fd = (up[j] - down[j]) / (2.0 * h);
                jacobian_error = jacobian_error.max(rel_err(jac[j * n + c], fd));
            }
        }
    }
    let mut flagged: Vec<String> = objective_errors
        .iter()
        .enumerate()
        .filter(|(_, e)| **e > GRADIENT_TOLERANCE)
        .map(|(i, _)| format!("grad f_{i}"))
        .collect();
    if jacobian_error > GRADIENT_TOLERANCE {
        flagged.push("jacobian g".into());
    }
    Ok(GradientReport {
        objective_errors,
        jacobian_error,
        tolerance: GRADIENT_TOLERANCE,
        flagged,
    })
}

/// Midpoint-convexity violations found by [`check_convexity`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexityReport {
    /// Largest `f(l a + (1-l) b) - (l f(a) + (1-l) f(b))` per agent.
    pub objective_gaps: Vec<f64>,
    /// Same quantity for each constraint row.
    pub constraint_gaps: Vec<f64>,
    pub flagged: Vec<String>,
}

impl ConvexityReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Probabilistic convexity spot-check of every `f_i` and `g_j` over `X`.
pub fn check_convexity(spec: &ProblemSpec, samples: usize, seed: u64) -> ConvexityReport {
    const SLACK: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full = spec.full_box();
    let mut objective_gaps = vec![f64::NEG_INFINITY; spec.num_agents()];
    let mut constraint_gaps = vec![f64::NEG_INFINITY; spec.m()];
    for _ in 0..samples {
        let a = full.sample(&mut rng);
        let b = full.sample(&mut rng);
        let lam: f64 = rng.random();
        let mid: Vec<f64> = a
            .iter()
            .zip(&b)
            .map(|(p, q)| lam * p + (1.0 - lam) * q)
            .collect();
        for (i, obj) in spec.objectives().iter().enumerate() {
            let r = spec.block(i);
            let fa = obj.value(&a[r.clone()]);
            let fb = obj.value(&b[r.clone()]);
            let fm = obj.value(&mid[r]);
            let scale = fa.abs().max(fb.abs()).max(1.0);
            objective_gaps[i] = objective_gaps[i].max((fm - lam * fa - (1.0 - lam) * fb) / scale);
        }
        let (ga, gb, gm) = (
            spec.constraint().eval(&a),
            spec.constraint().eval(&b),
            spec.constraint().eval(&mid),
        );
        for j in 0..spec.m() {
            let scale = ga[j].abs().max(gb[j].abs()).max(1.0);
            constraint_gaps[j] =
                constraint_gaps[j].max((gm[j] - lam * ga[j] - (1.0 - lam) * gb[j]) / scale);
        }
    }
    let mut flagged = Vec::new();
    for (i, g) in objective_gaps.iter().enumerate() {
        if *g > SLACK {
            flagged.push(format!("f_{i}"));
        }
    }
    for (j, g) in constraint_gaps.iter().enumerate() {
        if *g > SLACK {
            flagged.push(format!("g_{j}"));
        }
    }
    ConvexityReport {
        objective_gaps,
        constraint_gaps,
        flagged,
    }
}

/// Serializable problem description: a named built-in or a composition of
/// primitive terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProblemConfig {
    Builtin { name: String },
    Custom(CustomProblem),
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig::Builtin {
            name: "reference10".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveConfig {
    Linear {
        coeffs: Vec<f64>,
        #[serde(default)]
        offset: f64,
    },
    QuadraticDistance { center: Vec<f64> },
    FourthPowerDistance { center: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub lipschitz_grad: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomProblem {
    pub agents: Vec<AgentConfig>,
    pub constraints: Vec<ConstraintRow>,
    pub slater_point: Vec<f64>,
    /// `K^g_p`; derived from the box geometry when omitted.
    #[serde(default)]
    pub lipschitz_g: Option<NormConstants>,
    /// `K^i_p`; derived exactly from the quadratic coefficients when omitted.
    #[serde(default)]
    pub lipschitz_blocks: Option<Vec<NormConstants>>,
}

impl ProblemConfig {
    pub fn build(&self) -> Result<ProblemSpec> {
        match self {
            ProblemConfig::Builtin { name } => match name.as_str() {
                "reference10" => Ok(build_reference_problem()),
                "scalar" => Ok(build_scalar_problem()),
                other => Err(Error::Config(format!("unknown built-in problem {other:?}"))),
            },
            ProblemConfig::Custom(c) => c.build(),
        }
    }
}

impl CustomProblem {
    pub fn build(&self) -> Result<ProblemSpec> {
        let mut objectives = Vec::with_capacity(self.agents.len());
        let mut boxes = Vec::with_capacity(self.agents.len());
        let mut blocks = Vec::with_capacity(self.agents.len());
        let mut start = 0;
        for (i, a) in self.agents.iter().enumerate() {
            let bx = BoxSet::new(a.lower.clone(), a.upper.clone())?;
            let term = match &a.objective {
                ObjectiveConfig::Linear { coeffs, offset } => ObjectiveTerm::new(
                    i,
                    LinearObjective {
                        coeffs: coeffs.clone(),
                        offset: *offset,
                    },
                ),
                ObjectiveConfig::QuadraticDistance { center } => ObjectiveTerm::new(
                    i,
                    QuadraticDistance {
                        center: center.clone(),
                    },
                ),
                ObjectiveConfig::FourthPowerDistance { center } => ObjectiveTerm::new(
                    i,
                    QuarticDistance {
                        center: center.clone(),
                    },
                ),
            };
            check_len(bx.dim(), term.dim(), "agent objective vs box")?;
            let term = match a.lipschitz_grad {
                Some(l) => term.with_lipschitz(l),
                None => term,
            };
            blocks.push(start..start + bx.dim());
            start += bx.dim();
            objectives.push(term);
            boxes.push(bx);
        }
        let map = QuadraticSumConstraint::new(start, self.constraints.clone())?;
        let full = BoxSet::product(&boxes);
        let lipschitz_g = self.lipschitz_g.unwrap_or_else(|| NormConstants {
            l1: map.lipschitz_bound(&full, Norm::L1),
            l2: map.lipschitz_bound(&full, Norm::L2),
        });
        let lipschitz_blocks = match &self.lipschitz_blocks {
            Some(v) => v.clone(),
            None => blocks
                .iter()
                .map(|b| NormConstants {
                    l1: map.block_lipschitz(b.clone(), Norm::L1),
                    l2: map.block_lipschitz(b.clone(), Norm::L2),
                })
                .collect(),
        };
        let constraint = ConstraintFunction::new(map, blocks, lipschitz_g, lipschitz_blocks)?;
        ProblemSpec::new(objectives, boxes, constraint, self.slater_point.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_constraint_at_origin() {
        let spec = build_reference_problem();
        assert_eq!(
            spec.constraint().eval(&[0.0; 20]),
            vec![-10.0, -50.0, -50.0, -50.0, -20.0, -30.0]
        );
        assert_eq!(spec.slater_margin(), 10.0);
    }

    #[test]
    fn reference_lipschitz_constants() {
        let spec = build_reference_problem();
        let c = spec.constraint();
        assert_eq!(c.lipschitz_g().l1, 39.82);
        assert_eq!(c.lipschitz_g().l2, 56.71);
        assert_eq!(c.lipschitz_blocks()[0].l1, 4.0);
        assert_eq!(c.lipschitz_blocks()[0].l2, 8f64.sqrt());
        assert_eq!(c.lipschitz_blocks()[1].l1, 2.0);
    }

    #[test]
    fn exact_block_constants_match_table_except_agent_four() {
        let spec = build_reference_problem();
        let map = reference_constraint_map();
        for i in 0..10 {
            let table = spec.constraint().lipschitz_blocks()[i];
            let l1 = map.block_lipschitz(2 * i..2 * i + 2, Norm::L1);
            let l2 = map.block_lipschitz(2 * i..2 * i + 2, Norm::L2);
            if i == 3 {
                // x_{4,2} enters both g_2 and g_5, so the exact constant is 4 / sqrt(8).
                assert_eq!(l1, 4.0);
                assert!((l2 - 8f64.sqrt()).abs() < 1e-15);
            } else {
                assert_eq!(l1, table.l1, "agent {i}");
                assert!((l2 - table.l2).abs() < 1e-15, "agent {i}");
            }
        }
        // the tabulated K^g_1 sits just under the induced-norm supremum of 40
        assert_eq!(map.lipschitz_bound(&spec.full_box(), Norm::L1), 40.0);
    }

    #[test]
    fn box_rejects_inverted_bounds() {
        assert!(BoxSet::new(vec![1.0], vec![0.0]).is_err());
        assert!(BoxSet::new(vec![0.0, 0.0], vec![1.0]).is_err());
        assert!(BoxSet::new(vec![0.0], vec![0.0]).is_ok());
    }

    #[test]
    fn slater_violation_is_rejected() {
        let map = QuadraticSumConstraint::new(
            1,
            vec![ConstraintRow {
                constant: 1.0,
                terms: vec![RowTerm::Linear { index: 0, coeff: -1.0 }],
            }],
        )
        .unwrap();
        let c = ConstraintFunction::new(
            map,
            vec![0..1],
            NormConstants { l1: 1.0, l2: 1.0 },
            vec![NormConstants { l1: 0.0, l2: 0.0 }],
        )
        .unwrap();
        let err = ProblemSpec::new(
            vec![ObjectiveTerm::new(0, QuadraticDistance { center: vec![0.0] })],
            vec![BoxSet::cube(1, -10.0, 10.0).unwrap()],
            c,
            vec![1.0],
        )
        .unwrap_err();
        assert!(matches!(err, Error::SlaterViolation(_)));
    }

    #[test]
    fn blocks_must_partition_columns() {
        let map = QuadraticSumConstraint::new(
            3,
            vec![ConstraintRow { constant: -1.0, terms: vec![] }],
        )
        .unwrap();
        let k = NormConstants { l1: 0.0, l2: 0.0 };
        assert!(ConstraintFunction::new(map.clone(), vec![0..1, 2..3], k, vec![k, k]).is_err());
        assert!(ConstraintFunction::new(map.clone(), vec![0..1, 1..2], k, vec![k, k]).is_err());
        assert!(ConstraintFunction::new(map, vec![0..1, 1..3], k, vec![k, k]).is_ok());
    }

    #[test]
    fn lipschitz_of_identity_and_scaling() {
        let square = BoxSet::cube(2, -1.0, 1.0).unwrap();
        let est = estimate_lipschitz(|x| x.to_vec(), &square, Norm::L2, 200, 3).unwrap();
        assert!(est > 0.0 && est <= 1.0 + 1e-12);
        assert!((est - 1.0).abs() < 1e-9);

        let unit = BoxSet::cube(1, 0.0, 1.0).unwrap();
        let est = estimate_lipschitz(|x| vec![2.0 * x[0]], &unit, Norm::L1, 100, 4).unwrap();
        assert!((est - 2.0).abs() < 1e-9);
    }

    #[test]
    fn lipschitz_degenerate_domain_and_sample_floor() {
        let point = BoxSet::new(vec![1.0, 2.0], vec![1.0, 2.0]).unwrap();
        assert_eq!(
            estimate_lipschitz(|x| x.to_vec(), &point, Norm::L1, 10, 0).unwrap(),
            0.0
        );
        let square = BoxSet::cube(2, -1.0, 1.0).unwrap();
        assert!(estimate_lipschitz(|x| x.to_vec(), &square, Norm::L1, 1, 0).is_err());
    }

    #[test]
    fn reference_gradients_agree_with_finite_differences() {
        let report = check_gradients(&build_reference_problem(), 100, 11).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.jacobian_error < 1e-5);
    }

    fn single_agent(obj: impl Objective + 'static) -> ProblemSpec {
        let map = QuadraticSumConstraint::new(
            1,
            vec![ConstraintRow { constant: -1.0, terms: vec![] }],
        )
        .unwrap();
        let c = ConstraintFunction::new(
            map,
            vec![0..1],
            NormConstants { l1: 0.0, l2: 0.0 },
            vec![NormConstants { l1: 0.0, l2: 0.0 }],
        )
        .unwrap();
        ProblemSpec::new(
            vec![ObjectiveTerm::new(0, obj)],
            vec![BoxSet::cube(1, -2.0, 2.0).unwrap()],
            c,
            vec![0.0],
        )
        .unwrap()
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let spec = single_agent(FnObjective::new(1, |x| x[0] * x[0], |_, g| g[0] = 0.0));
        let report = check_gradients(&spec, 10, 1).unwrap();
        assert!(!report.passed());
        assert_eq!(report.flagged, vec!["grad f_0".to_string()]);
    }

    #[test]
    fn constant_objective_passes() {
        let spec = single_agent(FnObjective::new(1, |_| 3.5, |_, g| g[0] = 0.0));
        assert!(check_gradients(&spec, 10, 1).unwrap().passed());
    }

    #[test]
    fn reference_problem_is_convex_on_samples() {
        let report = check_convexity(&build_reference_problem(), 2000, 5);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn concave_objective_fails_convexity_check() {
        let spec = single_agent(FnObjective::new(1, |x| -x[0] * x[0], |x, g| g[0] = -2.0 * x[0]));
        assert!(!check_convexity(&spec, 200, 2).passed());
    }

    #[test]
    fn custom_config_reproduces_reference_values() {
        let toml_like = CustomProblem {
            agents: vec![AgentConfig {
                lower: vec![-10.0],
                upper: vec![10.0],
                objective: ObjectiveConfig::QuadraticDistance { center: vec![0.0] },
                lipschitz_grad: None,
            }],
            constraints: vec![ConstraintRow {
                constant: 1.0,
                terms: vec![RowTerm::Linear { index: 0, coeff: -1.0 }],
            }],
            slater_point: vec![5.0],
            lipschitz_g: None,
            lipschitz_blocks: None,
        };
        let spec = toml_like.build().unwrap();
        assert_eq!(spec.constraint().eval(&[5.0]), vec![-4.0]);
        assert_eq!(spec.constraint().lipschitz_g().l1, 1.0);
        assert_eq!(spec.constraint().lipschitz_blocks()[0].l1, 0.0);
    }
}
