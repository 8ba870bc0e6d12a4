//! Selection of the free barrier parameters (eta, r, D, gamma profiles) by a
//! penalty-weighted pattern search, with the per-switch witness states
//! eliminated analytically: the barrier is concave in the state, so the
//! superlevel-set constraints at switch left-limits are evaluated at the
//! concave maximizer found by `inner_max` and become pure functions of the
//! outer variables.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::barrier::{
    BarrierError, BarrierTerm, BarrierTermSpec, CompositeBarrier, GammaFn, MaskSide,
};

/// Margin by which strict inequalities must clear their bound.
const STRICT_MARGIN: f64 = 1e-6;
/// Padding used when parameterizing points inside open intervals.
const INTERIOR_PAD: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error("predicate `{label}` is not satisfiable (h_opt = {h_opt} < 0)")]
    Unsatisfiable { label: String, h_opt: f64 },
    #[error(
        "no robustness level is reachable: `{label}` must hold from t = 0 but h(x0) = {h_at_x0}{}",
        if *.required > 0.0 { format!(" < required r = {}", .required) } else { String::new() }
    )]
    EmptyRobustnessInterval {
        label: String,
        h_at_x0: f64,
        required: f64,
    },
    #[error("x0 has dimension {found}, terms expect {expected}")]
    DimensionMismatch { found: usize, expected: usize },
    #[error("inner maximization at t = {t} did not converge (value spread {spread})")]
    InnerMaxDiverged { t: f64, spread: f64 },
    #[error("gain selection needs chi > 0")]
    ChiRequired,
    #[error("gain selection needs a feasible synthesis result")]
    NotFeasible,
}

/// Whether to maximize the robustness level or verify a fixed one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SynthesisMode {
    MaximizeR,
    Feasibility { r: f64 },
}

/// Search box for the outer variables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchBounds {
    pub eta: (f64, f64),
    pub state_bound: (f64, f64),
    /// `gamma_0 = h(x0) - offset`, searched inside this offset range, which
    /// keeps the start-value bound strict by construction.
    pub gamma0_offset: (f64, f64),
}

impl SearchBounds {
    /// Bounds derived from the problem geometry: the state-bound radius must
    /// comfortably contain the initial state and every predicate target.
    pub fn defaults_for(specs: &[BarrierTermSpec], x0: &DVector<f64>) -> Self {
        let mut scale = x0.norm().max(1.0);
        for spec in specs {
            if let crate::stl::PredicateKind::Ball { offset, radius, .. } = &spec.predicate.kind {
                scale = scale.max(offset.norm() + radius);
            }
        }
        Self {
            eta: (2.0, 60.0),
            state_bound: (1.5 * scale, 6.0 * scale),
            gamma0_offset: (0.1, 4.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisProblem {
    pub term_specs: Vec<BarrierTermSpec>,
    pub x0: DVector<f64>,
    pub chi: f64,
    pub mode: SynthesisMode,
    pub bounds: SearchBounds,
    pub restarts: usize,
    pub seed: u64,
}

impl SynthesisProblem {
    pub fn new(
        term_specs: Vec<BarrierTermSpec>,
        x0: DVector<f64>,
        chi: f64,
        mode: SynthesisMode,
    ) -> Self {
        let bounds = SearchBounds::defaults_for(&term_specs, &x0);
        Self {
            term_specs,
            x0,
            chi,
            mode,
            bounds,
            restarts: 32,
            seed: 0,
        }
    }
}

/// One named constraint slack; nonnegative means satisfied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSlack {
    pub name: String,
    pub slack: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub entries: Vec<ConstraintSlack>,
}

impl ConstraintReport {
    fn push(&mut self, name: impl Into<String>, slack: f64) {
        self.entries.push(ConstraintSlack {
            name: name.into(),
            slack,
        });
    }

    pub fn min_slack(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.slack)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn feasible(&self) -> bool {
        self.min_slack() >= -1e-9
    }

    pub fn worst(&self) -> Option<&ConstraintSlack> {
        self.entries
            .iter()
            .min_by(|a, b| a.slack.partial_cmp(&b.slack).unwrap())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub eta: f64,
    pub r: f64,
    pub state_bound: f64,
    pub gamma_0: Vec<f64>,
    pub gamma_inf: Vec<f64>,
    /// Concave maximizers at the left limit of each deadline switch,
    /// witnessing that the superlevel sets stay nonempty.
    pub xi: Vec<DVector<f64>>,
    pub kappa: f64,
    pub epsilon_margin: f64,
    pub feasible: bool,
    pub report: ConstraintReport,
}

impl SynthesisResult {
    /// Instantiates the barrier this parameter set describes.
    pub fn barrier(&self, specs: &[BarrierTermSpec]) -> Result<CompositeBarrier, BarrierError> {
        let terms: Vec<BarrierTerm> = specs
            .iter()
            .zip(self.gamma_0.iter().zip(&self.gamma_inf))
            .map(|(spec, (&g0, &ginf))| {
                Ok(BarrierTerm {
                    predicate: spec.predicate.clone(),
                    gamma: GammaFn::new(g0, ginf, spec.t_star)?,
                    deadline: spec.deadline,
                    origin: spec.origin,
                })
            })
            .collect::<Result<_, BarrierError>>()?;
        let dim = specs.first().map(|s| s.predicate.dim).unwrap_or(0);
        CompositeBarrier::new(terms, self.eta, self.state_bound, dim)
    }
}

struct InnerBudget {
    rounds: usize,
    step_floor: f64,
    random_starts: usize,
    /// Keep only the centroid of ball centers as a start instead of every
    /// center, and skip the agreement check: the pattern search needs speed,
    /// the final verification re-runs thoroughly.
    reduced: bool,
}

const THOROUGH: InnerBudget = InnerBudget {
    rounds: 120,
    step_floor: 1e-9,
    random_starts: 4,
    reduced: false,
};
const FAST: InnerBudget = InnerBudget {
    rounds: 40,
    step_floor: 1e-5,
    random_starts: 1,
    reduced: true,
};

/// Barrier at a frozen instant under a fixed mask, flattened into plain
/// slices so the maximization loop runs without allocating.
struct FrozenTerm {
    /// Row-major `rows x n` map of a ball term; empty for affine terms.
    map: Vec<f64>,
    rows: usize,
    offset: Vec<f64>,
    /// Affine weights; empty for ball terms.
    weights: Vec<f64>,
    /// `radius - gamma(t)` for balls, `beta - gamma(t)` for affine terms.
    constant: f64,
}

struct FrozenBarrier {
    terms: Vec<FrozenTerm>,
    eta: f64,
    state_bound: f64,
    n: usize,
    values: Vec<f64>,
    residual: Vec<f64>,
}

impl FrozenBarrier {
    fn build(barrier: &CompositeBarrier, t: f64, mask: &[bool]) -> Self {
        let n = barrier.group_dim;
        let mut terms = Vec::new();
        let mut max_rows = 1;
        for (term, &active) in barrier.terms.iter().zip(mask) {
            if !active {
                continue;
            }
            let gamma = term.gamma.eval(t);
            match &term.predicate.kind {
                crate::stl::PredicateKind::Ball { map, offset, radius } => {
                    max_rows = max_rows.max(map.nrows());
                    terms.push(FrozenTerm {
                        map: map.transpose().as_slice().to_vec(),
                        rows: map.nrows(),
                        offset: offset.as_slice().to_vec(),
                        weights: Vec::new(),
                        constant: radius - gamma,
                    });
                }
                crate::stl::PredicateKind::Affine { weights, offset } => {
                    terms.push(FrozenTerm {
                        map: Vec::new(),
                        rows: 0,
                        offset: Vec::new(),
                        weights: weights.as_slice().to_vec(),
                        constant: offset - gamma,
                    });
                }
            }
        }
        let values = vec![0.0; terms.len() + 1];
        FrozenBarrier {
            terms,
            eta: barrier.eta,
            state_bound: barrier.state_bound,
            n,
            values,
            residual: vec![0.0; max_rows],
        }
    }

    fn term_values(&mut self, x: &[f64]) {
        let n = self.n;
        for (k, term) in self.terms.iter().enumerate() {
            self.values[k] = if term.rows > 0 {
                let mut sq = 0.0;
                for row in 0..term.rows {
                    let mut y = term.offset[row];
                    let map_row = &term.map[row * n..(row + 1) * n];
                    for j in 0..n {
                        y += map_row[j] * x[j];
                    }
                    sq += y * y;
                }
                term.constant - sq.sqrt()
            } else {
                let mut y = term.constant;
                for j in 0..n {
                    y += term.weights[j] * x[j];
                }
                y
            };
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        *self.values.last_mut().unwrap() = self.state_bound - norm;
    }

    fn eval(&mut self, x: &[f64]) -> f64 {
        self.term_values(x);
        let m = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let sum: f64 = self.values.iter().map(|&v| (-self.eta * (v - m)).exp()).sum();
        m - sum.ln() / self.eta
    }

    /// Value, gradient, and Hessian at `x`. The Hessian of the smoothed
    /// minimum is `sum w_l H_l - eta (sum w_l g_l g_l^T - g g^T)` with
    /// softmin weights `w_l`; ball terms contribute the norm curvature
    /// `-L^T (I - yy^T/|y|^2) L / |y|`, affine terms none. The curvature
    /// factor is clamped near ball centers, where the compass pass takes
    /// over anyway.
    fn eval_hess(
        &mut self,
        x: &[f64],
        grad: &mut [f64],
        hess: &mut nalgebra::DMatrix<f64>,
    ) -> f64 {
        let n = self.n;
        self.term_values(x);
        let m = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut sum = 0.0;
        for v in &self.values {
            sum += (-self.eta * (v - m)).exp();
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        hess.fill(0.0);
        let mut term_grad = vec![0.0; n];
        let mut rank1 = nalgebra::DMatrix::<f64>::zeros(n, n);
        for (k, term) in self.terms.iter().enumerate() {
            let w = (-self.eta * (self.values[k] - m)).exp() / sum;
            if w == 0.0 {
                continue;
            }
            term_grad.iter_mut().for_each(|g| *g = 0.0);
            if term.rows > 0 {
                let mut sq = 0.0;
                for row in 0..term.rows {
                    let mut y = term.offset[row];
                    let map_row = &term.map[row * n..(row + 1) * n];
                    for j in 0..n {
                        y += map_row[j] * x[j];
                    }
                    self.residual[row] = y;
                    sq += y * y;
                }
                let norm = sq.sqrt().max(1e-6);
                for row in 0..term.rows {
                    let map_row = &term.map[row * n..(row + 1) * n];
                    let y = self.residual[row] / norm;
                    for j in 0..n {
                        term_grad[j] -= y * map_row[j];
                    }
                }
                // -L^T L / |y| plus the rank-one correction along y.
                for row in 0..term.rows {
                    let map_row = &term.map[row * n..(row + 1) * n];
                    for i in 0..n {
                        for j in 0..n {
                            hess[(i, j)] -= w * map_row[i] * map_row[j] / norm;
                        }
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        hess[(i, j)] += w * term_grad[i] * term_grad[j] / norm;
                    }
                }
            } else {
                term_grad.copy_from_slice(&term.weights);
            }
            for i in 0..n {
                grad[i] += w * term_grad[i];
                for j in 0..n {
                    rank1[(i, j)] += w * term_grad[i] * term_grad[j];
                }
            }
        }
        let w_bound = (-self.eta * (self.values[self.terms.len()] - m)).exp() / sum;
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if w_bound != 0.0 && norm > 1e-9 {
            let norm = norm.max(1e-6);
            for i in 0..n {
                let gi = -x[i] / norm;
                grad[i] += w_bound * gi;
                for j in 0..n {
                    let gj = -x[j] / norm;
                    let eye = if i == j { 1.0 } else { 0.0 };
                    hess[(i, j)] -= w_bound * (eye - gi * gj) / norm;
                    rank1[(i, j)] += w_bound * gi * gj;
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                hess[(i, j)] -= self.eta * (rank1[(i, j)] - grad[i] * grad[j]);
            }
        }
        m - sum.ln() / self.eta
    }

    /// Value and gradient at `x`; `grad` must have length `n`.
    fn eval_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.term_values(x);
        let m = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut sum = 0.0;
        for v in &self.values {
            sum += (-self.eta * (v - m)).exp();
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let n = self.n;
        for (k, term) in self.terms.iter().enumerate() {
            let w = (-self.eta * (self.values[k] - m)).exp() / sum;
            if w == 0.0 {
                continue;
            }
            if term.rows > 0 {
                let mut sq = 0.0;
                for row in 0..term.rows {
                    let mut y = term.offset[row];
                    let map_row = &term.map[row * n..(row + 1) * n];
                    for j in 0..n {
                        y += map_row[j] * x[j];
                    }
                    self.residual[row] = y;
                    sq += y * y;
                }
                let norm = sq.sqrt();
                if norm > 1e-9 {
                    let scale = w / norm;
                    for row in 0..term.rows {
                        let map_row = &term.map[row * n..(row + 1) * n];
                        let y = self.residual[row];
                        for j in 0..n {
                            grad[j] -= scale * y * map_row[j];
                        }
                    }
                }
            } else {
                for j in 0..n {
                    grad[j] += w * term.weights[j];
                }
            }
        }
        let w_bound = (-self.eta * (self.values[self.terms.len()] - m)).exp() / sum;
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if w_bound != 0.0 && norm > 1e-9 {
            for j in 0..n {
                grad[j] -= w_bound * x[j] / norm;
            }
        }
        m - sum.ln() / self.eta
    }
}

/// Maximizes the concave map `x -> b(x, t)` by multi-start gradient ascent
/// with backtracking, followed by a compass polish that handles the norm
/// kinks of ball predicates. All starts must agree on the maximum value,
/// certifying the concave maximum.
pub fn inner_max(
    barrier: &CompositeBarrier,
    t: f64,
    side: MaskSide,
) -> Result<(DVector<f64>, f64), SynthesisError> {
    inner_max_with(barrier, t, side, &THOROUGH)
}

fn inner_max_with(
    barrier: &CompositeBarrier,
    t: f64,
    side: MaskSide,
    budget: &InnerBudget,
) -> Result<(DVector<f64>, f64), SynthesisError> {
    let mask = barrier.mask(t, side);
    let n = barrier.group_dim;
    let mut centers: Vec<DVector<f64>> = Vec::new();
    for (term, &active) in barrier.terms.iter().zip(&mask) {
        if !active {
            continue;
        }
        if let crate::stl::PredicateKind::Ball { map, offset, .. } = &term.predicate.kind {
            let svd = map.clone().svd(true, true);
            if let Ok(center) = svd.solve(&(-offset), 1e-12) {
                centers.push(center);
            }
        }
    }
    let mut starts: Vec<DVector<f64>> = vec![DVector::zeros(n)];
    if !centers.is_empty() {
        // Centroid of the ball centers, often close to the balanced optimum.
        let centroid = centers.iter().fold(DVector::zeros(n), |acc, s| acc + s)
            / centers.len() as f64;
        starts.push(centroid);
    }
    if !budget.reduced {
        starts.extend(centers);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xB0F);
    for _ in 0..budget.random_starts {
        let point =
            DVector::from_fn(n, |_, _| rng.gen_range(-0.4..0.4) * barrier.state_bound);
        starts.push(point);
    }

    let mut frozen = FrozenBarrier::build(barrier, t, &mask);
    let mut results: Vec<(Vec<f64>, f64)> = Vec::with_capacity(starts.len());
    let mut optimizer = AscentScratch::new(n);
    for start in starts {
        let mut x: Vec<f64> = start.as_slice().to_vec();
        let mut fx = frozen.eval(&x);
        // Alternate conjugate-gradient ascent (fast on the smooth, possibly
        // ridge-like softmin surface) with compass passes that cross the
        // norm kinks of ball predicates, until neither makes progress.
        let (max_phases, max_sweeps) = if budget.reduced { (2, 60) } else { (60, 400) };
        for _ in 0..max_phases {
            fx = optimizer.newton_ascent(&mut frozen, &mut x, fx, budget.rounds);
            let improved = optimizer.compass(
                &mut frozen,
                &mut x,
                &mut fx,
                budget.step_floor,
                max_sweeps,
            );
            if !improved {
                break;
            }
        }
        results.push((x, fx));
    }

    let (best_idx, best_value) = results
        .iter()
        .enumerate()
        .map(|(i, (_, f))| (i, *f))
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap();
    if !budget.reduced {
        let worst = results
            .iter()
            .map(|(_, f)| *f)
            .fold(f64::INFINITY, f64::min);
        let spread = best_value - worst;
        if spread > 1e-6 {
            return Err(SynthesisError::InnerMaxDiverged { t, spread });
        }
    }
    Ok((
        DVector::from_row_slice(&results[best_idx].0),
        best_value,
    ))
}

/// Reusable buffers for the per-start maximization.
struct AscentScratch {
    grad: Vec<f64>,
    dir: Vec<f64>,
    probe: Vec<f64>,
    hess: nalgebra::DMatrix<f64>,
}

impl AscentScratch {
    fn new(n: usize) -> Self {
        Self {
            grad: vec![0.0; n],
            dir: vec![0.0; n],
            probe: vec![0.0; n],
            hess: nalgebra::DMatrix::zeros(n, n),
        }
    }

    /// Damped Newton ascent with a backtracking line search. The objective
    /// is concave, so the negated Hessian is positive semidefinite and the
    /// regularized Newton direction is an ascent direction; it resolves the
    /// strongly anisotropic ridges the smoothed minimum develops at large
    /// eta, where first-order steps crawl.
    fn newton_ascent(
        &mut self,
        frozen: &mut FrozenBarrier,
        x: &mut Vec<f64>,
        mut fx: f64,
        max_iters: usize,
    ) -> f64 {
        let n = x.len();
        for _ in 0..max_iters {
            let value = frozen.eval_hess(x, &mut self.grad, &mut self.hess);
            fx = fx.max(value);
            let gn: f64 = self.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if gn <= 1e-12 {
                break;
            }
            let mut neg_hess = -&self.hess;
            let ridge = 1e-9 * (1.0 + neg_hess.diagonal().amax());
            for i in 0..n {
                neg_hess[(i, i)] += ridge;
            }
            let g = nalgebra::DVector::from_row_slice(&self.grad);
            let newton = neg_hess.lu().solve(&g);
            let mut use_gradient = true;
            if let Some(d) = newton {
                let slope: f64 = d.iter().zip(&self.grad).map(|(d, g)| d * g).sum();
                if slope > 1e-14 * d.norm() * gn {
                    self.dir.copy_from_slice(d.as_slice());
                    use_gradient = false;
                }
            }
            if use_gradient {
                self.dir.copy_from_slice(&self.grad);
            }
            let slope: f64 = self.dir.iter().zip(&self.grad).map(|(d, g)| d * g).sum();
            let mut a = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                for j in 0..n {
                    self.probe[j] = x[j] + a * self.dir[j];
                }
                let ft = frozen.eval(&self.probe);
                if ft >= fx + 1e-4 * a * slope {
                    x.copy_from_slice(&self.probe);
                    accepted = ft > fx + 1e-15;
                    fx = ft;
                    break;
                }
                a *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        fx
    }

    /// Shrinking compass pass over the coordinate axes and the gradient
    /// direction; returns whether anything improved. Sweeps are capped:
    /// sustained progress is the ascent phase's job, the compass only has to
    /// cross kinks and certify stationarity at the step floor.
    fn compass(
        &mut self,
        frozen: &mut FrozenBarrier,
        x: &mut [f64],
        fx: &mut f64,
        floor: f64,
        max_sweeps: usize,
    ) -> bool {
        let n = x.len();
        let mut step = 1e-2 * x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
        let mut improved_any = false;
        let mut sweeps = 0;
        while step > floor && sweeps < max_sweeps {
            sweeps += 1;
            frozen.eval_grad(x, &mut self.grad);
            let gn = self.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            let mut improved = false;
            if gn > 1e-14 {
                for j in 0..n {
                    self.probe[j] = x[j] + step * self.grad[j] / gn;
                }
                let ft = frozen.eval(&self.probe);
                if ft > *fx {
                    x.copy_from_slice(&self.probe);
                    *fx = ft;
                    improved = true;
                }
            }
            if !improved {
                'axes: for j in 0..n {
                    for dir in [1.0, -1.0] {
                        self.probe.copy_from_slice(x);
                        self.probe[j] += dir * step;
                        let ft = frozen.eval(&self.probe);
                        if ft > *fx {
                            x.copy_from_slice(&self.probe);
                            *fx = ft;
                            improved = true;
                            break 'axes;
                        }
                    }
                }
            }
            if improved {
                improved_any = true;
            } else {
                step *= 0.5;
            }
        }
        improved_any
    }
}

/// Outer decision point decoded from the raw search vector.
#[derive(Clone)]
struct OuterPoint {
    eta: f64,
    state_bound: f64,
    r: f64,
    gamma_0: Vec<f64>,
    gamma_inf: Vec<f64>,
    /// Penalty from degenerate gamma_inf intervals.
    interval_penalty: f64,
}

struct SearchSpace {
    lo: Vec<f64>,
    hi: Vec<f64>,
    h_at_x0: Vec<f64>,
    h_opt_eff: Vec<f64>,
    fixed_r: Option<f64>,
    p: usize,
}

impl SearchSpace {
    fn build(problem: &SynthesisProblem) -> Result<Self, SynthesisError> {
        let p = problem.term_specs.len();
        if p == 0 {
            return Err(BarrierError::NoTerms.into());
        }
        let dim = problem.term_specs[0].predicate.dim;
        if problem.x0.len() != dim {
            return Err(SynthesisError::DimensionMismatch {
                found: problem.x0.len(),
                expected: dim,
            });
        }
        let d_cap = problem.bounds.state_bound.1;
        let mut h_at_x0 = Vec::with_capacity(p);
        let mut h_opt_eff = Vec::with_capacity(p);
        for spec in &problem.term_specs {
            if spec.predicate.h_opt < 0.0 {
                return Err(SynthesisError::Unsatisfiable {
                    label: spec.predicate.label.clone(),
                    h_opt: spec.predicate.h_opt,
                });
            }
            h_at_x0.push(spec.predicate.eval(&problem.x0));
            h_opt_eff.push(spec.predicate.h_opt_within(d_cap));
        }
        // Terms that must hold from t = 0 cap the reachable robustness at
        // their start value.
        let fixed_r = match problem.mode {
            SynthesisMode::Feasibility { r } => Some(r),
            SynthesisMode::MaximizeR => None,
        };
        let mut r_cap = f64::INFINITY;
        for (spec, (&h0, &hopt)) in problem
            .term_specs
            .iter()
            .zip(h_at_x0.iter().zip(&h_opt_eff))
        {
            let cap = if spec.t_star == 0.0 { h0 } else { hopt };
            r_cap = r_cap.min(cap);
            if spec.t_star == 0.0 {
                let required = fixed_r.unwrap_or(0.0);
                if h0 <= 0.0 || (required > 0.0 && h0 < required) {
                    return Err(SynthesisError::EmptyRobustnessInterval {
                        label: spec.predicate.label.clone(),
                        h_at_x0: h0,
                        required,
                    });
                }
            }
        }
        if let Some(r) = fixed_r {
            if r <= 0.0 || r >= r_cap + 1e-12 && r_cap.is_finite() {
                return Err(SynthesisError::EmptyRobustnessInterval {
                    label: "r".into(),
                    h_at_x0: r_cap,
                    required: r,
                });
            }
        }

        let b = &problem.bounds;
        let mut lo = vec![b.eta.0, b.state_bound.0];
        let mut hi = vec![b.eta.1, b.state_bound.1];
        if fixed_r.is_none() {
            let r_hi = if r_cap.is_finite() {
                (r_cap - INTERIOR_PAD).max(2e-3)
            } else {
                d_cap
            };
            lo.push(1e-3);
            hi.push(r_hi);
        }
        for _ in 0..p {
            lo.push(b.gamma0_offset.0);
            hi.push(b.gamma0_offset.1);
        }
        for _ in 0..p {
            lo.push(0.01);
            hi.push(0.99);
        }
        Ok(Self {
            lo,
            hi,
            h_at_x0,
            h_opt_eff,
            fixed_r,
            p,
        })
    }

    fn dims(&self) -> usize {
        self.lo.len()
    }

    fn decode(&self, x: &[f64]) -> OuterPoint {
        let eta = x[0];
        let state_bound = x[1];
        let (r, rest) = match self.fixed_r {
            Some(r) => (r, &x[2..]),
            None => (x[2], &x[3..]),
        };
        let offsets = &rest[..self.p];
        let fracs = &rest[self.p..];
        let mut gamma_0 = Vec::with_capacity(self.p);
        let mut gamma_inf = Vec::with_capacity(self.p);
        let mut interval_penalty = 0.0;
        for l in 0..self.p {
            let g0 = self.h_at_x0[l] - offsets[l];
            let floor = r.max(g0) + INTERIOR_PAD;
            let ceil = self.h_opt_eff[l] - INTERIOR_PAD;
            let ginf = if ceil > floor {
                floor + fracs[l] * (ceil - floor)
            } else {
                interval_penalty += floor - ceil;
                floor
            };
            gamma_0.push(g0);
            gamma_inf.push(ginf.max(g0));
        }
        OuterPoint {
            eta,
            state_bound,
            r,
            gamma_0,
            gamma_inf,
            interval_penalty,
        }
    }
}

fn build_barrier(
    specs: &[BarrierTermSpec],
    point: &OuterPoint,
) -> Result<CompositeBarrier, BarrierError> {
    let terms: Vec<BarrierTerm> = specs
        .iter()
        .enumerate()
        .map(|(l, spec)| {
            Ok(BarrierTerm {
                predicate: spec.predicate.clone(),
                gamma: GammaFn::new(point.gamma_0[l], point.gamma_inf[l], spec.t_star)?,
                deadline: spec.deadline,
                origin: spec.origin,
            })
        })
        .collect::<Result<_, BarrierError>>()?;
    CompositeBarrier::new(
        terms,
        point.eta,
        point.state_bound,
        specs[0].predicate.dim,
    )
}

/// Squared-hinge penalty of the superlevel-set constraints.
fn penalty(problem: &SynthesisProblem, point: &OuterPoint, budget: &InnerBudget) -> f64 {
    let mut pen = point.interval_penalty;
    let barrier = match build_barrier(&problem.term_specs, point) {
        Ok(b) => b,
        Err(_) => return 1e9,
    };
    let b0 = barrier.eval(&problem.x0, 0.0);
    let start_violation = (problem.chi - b0).max(0.0);
    pen += start_violation * start_violation;
    for s in barrier.deadline_switches() {
        match inner_max_with(&barrier, s, MaskSide::LeftLimit, budget) {
            Ok((_, m)) => {
                let violation = (problem.chi - m).max(0.0);
                pen += violation * violation;
            }
            Err(_) => pen += 10.0,
        }
    }
    pen
}

fn merit(problem: &SynthesisProblem, point: &OuterPoint, budget: &InnerBudget) -> f64 {
    let pen = penalty(problem, point, budget);
    let objective = match problem.mode {
        SynthesisMode::MaximizeR => -point.r,
        SynthesisMode::Feasibility { .. } => 0.0,
    };
    pen * 1e6 + objective
}

/// Coordinate pattern search inside a box; derivative-free and deterministic.
fn pattern_search(
    f: &dyn Fn(&[f64]) -> f64,
    start: Vec<f64>,
    lo: &[f64],
    hi: &[f64],
    eval_budget: usize,
) -> (Vec<f64>, f64) {
    let n = start.len();
    let mut x = start;
    let mut fx = f(&x);
    let mut evals = 1usize;
    let mut steps: Vec<f64> = (0..n).map(|i| 0.25 * (hi[i] - lo[i])).collect();
    let tol: Vec<f64> = (0..n).map(|i| 1e-4 * (hi[i] - lo[i])).collect();
    loop {
        let mut improved = false;
        for i in 0..n {
            for dir in [1.0, -1.0] {
                let cand = (x[i] + dir * steps[i]).clamp(lo[i], hi[i]);
                if cand == x[i] {
                    continue;
                }
                let mut xt = x.clone();
                xt[i] = cand;
                let ft = f(&xt);
                evals += 1;
                if ft < fx - 1e-12 {
                    x = xt;
                    fx = ft;
                    improved = true;
                    break;
                }
                if evals >= eval_budget {
                    return (x, fx);
                }
            }
        }
        if !improved {
            let mut all_small = true;
            for i in 0..n {
                steps[i] *= 0.5;
                if steps[i] > tol[i] {
                    all_small = false;
                }
            }
            if all_small {
                return (x, fx);
            }
        }
        if evals >= eval_budget {
            return (x, fx);
        }
    }
}

/// Solves the parameter-selection program by multi-start pattern search.
///
/// In `MaximizeR` mode the robustness level is a search variable; in
/// `Feasibility` mode it is fixed and only the superlevel-set and bound
/// constraints are enforced. Restart results merge deterministically (best
/// merit, then lowest restart index), so a fixed seed reproduces the result
/// bit for bit.
pub fn synthesize(problem: &SynthesisProblem) -> Result<SynthesisResult, SynthesisError> {
    let space = SearchSpace::build(problem)?;
    let n = space.dims();
    let restarts = problem.restarts.max(1);
    let budget = 40 * n;

    let outcomes: Vec<(Vec<f64>, f64)> = (0..restarts)
        .into_par_iter()
        .map(|restart| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                problem.seed ^ (restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let start: Vec<f64> = (0..n)
                .map(|i| rng.gen_range(space.lo[i]..=space.hi[i]))
                .collect();
            let objective =
                |x: &[f64]| merit(problem, &space.decode(x), &FAST);
            pattern_search(&objective, start, &space.lo, &space.hi, budget)
        })
        .collect();

    let (best_x, _) = outcomes
        .into_iter()
        .enumerate()
        .min_by(|(ia, (_, fa)), (ib, (_, fb))| {
            fa.partial_cmp(fb).unwrap().then(ia.cmp(ib))
        })
        .map(|(_, out)| out)
        .unwrap();

    let point = space.decode(&best_x);
    let mut result = SynthesisResult {
        eta: point.eta,
        r: point.r,
        state_bound: point.state_bound,
        gamma_0: point.gamma_0.clone(),
        gamma_inf: point.gamma_inf.clone(),
        xi: Vec::new(),
        kappa: 0.0,
        epsilon_margin: 0.01,
        feasible: false,
        report: ConstraintReport::default(),
    };
    let barrier = build_barrier(&problem.term_specs, &point)?;
    for s in barrier.deadline_switches() {
        if let Ok((x_star, _)) = inner_max(&barrier, s, MaskSide::LeftLimit) {
            result.xi.push(x_star);
        }
    }
    result.report = verify_candidate(&result, problem);
    result.feasible = result.report.feasible();
    if result.feasible && problem.chi > 0.0 {
        if let Ok(kappa) = select_kappa(&result, problem, result.epsilon_margin) {
            result.kappa = kappa;
        }
    }
    Ok(result)
}

/// Recomputes every constraint of a candidate with fresh inner maximizations
/// and reports the slack of each; never fails.
pub fn verify_candidate(result: &SynthesisResult, problem: &SynthesisProblem) -> ConstraintReport {
    let mut report = ConstraintReport::default();
    let r = result.r;
    report.push("eta_positive", result.eta - STRICT_MARGIN);
    report.push("r_positive", r - STRICT_MARGIN);
    report.push("state_bound_positive", result.state_bound - STRICT_MARGIN);
    let barrier = match result.barrier(&problem.term_specs) {
        Ok(b) => b,
        Err(e) => {
            report.push(format!("barrier_construction({e})"), f64::NEG_INFINITY);
            return report;
        }
    };
    report.push(
        "superlevel_at_start",
        barrier.eval(&problem.x0, 0.0) - problem.chi,
    );
    for s in barrier.deadline_switches() {
        match inner_max(&barrier, s, MaskSide::LeftLimit) {
            Ok((_, m)) => report.push(
                format!("superlevel_before_switch_{s}"),
                m - problem.chi,
            ),
            Err(e) => report.push(format!("superlevel_before_switch_{s}({e})"), f64::NEG_INFINITY),
        }
    }
    for (l, spec) in problem.term_specs.iter().enumerate() {
        let h0 = spec.predicate.eval(&problem.x0);
        let label = &spec.predicate.label;
        report.push(
            format!("gamma0_below_start_value[{label}]"),
            h0 - result.gamma_0[l] - STRICT_MARGIN,
        );
        report.push(
            format!("gamma_inf_above_floor[{label}]"),
            result.gamma_inf[l] - r.max(result.gamma_0[l]) - STRICT_MARGIN,
        );
        report.push(
            format!("gamma_inf_below_h_opt[{label}]"),
            spec.predicate.h_opt - result.gamma_inf[l] - STRICT_MARGIN,
        );
    }
    report
}

/// Selects the linear class-K gain `kappa` so the rate condition holds with
/// margin `epsilon_margin` wherever the barrier gradient vanishes.
///
/// The time slope of the composite at the concave maximizer is bounded below
/// by `zeta = -exp(-eta chi) Delta_max / exp(-eta b_max)` where `Delta_max`
/// is the steepest gamma slope and `b_max` bounds every term value from
/// above; `kappa = (epsilon_margin - zeta) / chi` then suffices. Term values
/// are bounded through the state-bound radius, which keeps the bound finite
/// for affine predicates.
pub fn select_kappa(
    result: &SynthesisResult,
    problem: &SynthesisProblem,
    epsilon_margin: f64,
) -> Result<f64, SynthesisError> {
    if problem.chi <= 0.0 {
        return Err(SynthesisError::ChiRequired);
    }
    if !result.feasible {
        return Err(SynthesisError::NotFeasible);
    }
    let mut delta_max = 0.0f64;
    let mut b_max = result.state_bound;
    for (l, spec) in problem.term_specs.iter().enumerate() {
        if spec.t_star > 0.0 {
            delta_max =
                delta_max.max((result.gamma_inf[l] - result.gamma_0[l]) / spec.t_star);
        }
        b_max = b_max.max(spec.predicate.h_opt_within(result.state_bound) - result.gamma_0[l]);
    }
    let zeta = -delta_max * (result.eta * (b_max - problem.chi)).exp();
    let zeta = if zeta.is_finite() { zeta } else { -1e100 };
    Ok((epsilon_margin - zeta) / problem.chi)
}
