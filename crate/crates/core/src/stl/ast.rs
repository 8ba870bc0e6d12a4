//! AST for the supported STL fragment: conjunctions of predicates under a
//! single layer of bounded always / eventually / until operators, joined by
//! top-level conjunction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt;

use super::StlError;

/// Closed time window `[a, b]` attached to a temporal operator.
///
/// Requires `0 <= a <= b < inf` and `b > 0`: a window ending at zero would
/// make satisfaction depend on the initial condition alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub a: f64,
    pub b: f64,
}

impl Interval {
    pub fn new(a: f64, b: f64) -> Result<Self, StlError> {
        if !(a.is_finite() && b.is_finite()) || a < 0.0 || a > b || b <= 0.0 {
            return Err(StlError::InvalidInterval { a, b });
        }
        Ok(Self { a, b })
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.a, self.b)
    }
}

/// One signed term of a vector expression in the concrete syntax.
///
/// `Slice` names a contiguous block of the stacked group state and
/// contributes an identity block to the linear map of a ball predicate (or
/// carries a placed weight block for affine predicates). `Lit` is a constant
/// vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum VecTerm {
    Slice {
        name: String,
        start: usize,
        len: usize,
    },
    /// A literal weight block placed at a named slice (affine form only).
    Placed {
        name: String,
        start: usize,
        weights: DVector<f64>,
    },
    Lit(DVector<f64>),
}

/// A signed sum of vector terms, kept alongside the compiled predicate so
/// formulas can be printed back in the syntax they were written in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VecExpr {
    pub terms: Vec<(bool, VecTerm)>, // (negated, term)
}

impl fmt::Display for VecExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (neg, term)) in self.terms.iter().enumerate() {
            if i == 0 {
                if *neg {
                    write!(f, "-")?;
                }
            } else {
                write!(f, " {} ", if *neg { "-" } else { "+" })?;
            }
            match term {
                VecTerm::Slice { name, .. } => write!(f, "{name}")?,
                VecTerm::Placed { name, weights, .. } => {
                    write!(f, "{name}:{}", fmt_vector(weights))?
                }
                VecTerm::Lit(v) => write!(f, "{}", fmt_vector(v))?,
            }
        }
        Ok(())
    }
}

fn fmt_vector(v: &DVector<f64>) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    format!("[{}]", parts.join(","))
}

/// Concrete shape of a predicate function `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PredicateKind {
    /// `h(x) = w^T x + beta`.
    Affine { weights: DVector<f64>, offset: f64 },
    /// `h(x) = radius - ||L x + offset||`.
    Ball {
        map: DMatrix<f64>,
        offset: DVector<f64>,
        radius: f64,
    },
}

/// A concave predicate function over the stacked group state, together with
/// its supremum `h_opt` and the surface expression it was written as.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub kind: PredicateKind,
    /// Supremum of `h` over the state space; predicates with `h_opt < 0` are
    /// unsatisfiable and rejected during scenario validation.
    pub h_opt: f64,
    pub label: String,
    pub expr: VecExpr,
    /// Scalar argument from the surface syntax: radius for balls, offset for
    /// affine predicates.
    pub scalar: f64,
    pub dim: usize,
}

impl Predicate {
    /// Ball predicate `h(x) = radius - ||map x + offset||` with an explicit
    /// surface expression (used by the parser).
    pub fn ball_from_expr(
        map: DMatrix<f64>,
        offset: DVector<f64>,
        radius: f64,
        expr: VecExpr,
    ) -> Self {
        let dim = map.ncols();
        Self {
            kind: PredicateKind::Ball { map, offset, radius },
            h_opt: radius,
            label: String::new(),
            expr,
            scalar: radius,
            dim,
        }
    }

    /// Affine predicate `h(x) = weights^T x + offset`.
    pub fn affine(weights: DVector<f64>, offset: f64) -> Self {
        let expr = VecExpr {
            terms: vec![(false, VecTerm::Lit(weights.clone()))],
        };
        Self::affine_from_expr(weights, offset, expr)
    }

    /// Affine predicate with an explicit surface expression (parser form).
    pub fn affine_from_expr(weights: DVector<f64>, offset: f64, expr: VecExpr) -> Self {
        let dim = weights.len();
        let h_opt = if weights.iter().all(|w| *w == 0.0) {
            offset
        } else {
            f64::INFINITY
        };
        Self {
            kind: PredicateKind::Affine { weights, offset },
            h_opt,
            label: String::new(),
            expr,
            scalar: offset,
            dim,
        }
    }

    /// Full-state ball `h(x) = radius - ||x - center||` (the implicit-center
    /// form of the surface syntax).
    pub fn centered_ball(center: DVector<f64>, radius: f64) -> Self {
        let dim = center.len();
        let expr = VecExpr {
            terms: vec![(false, VecTerm::Lit(center.clone()))],
        };
        Self::ball_from_expr(DMatrix::identity(dim, dim), -center, radius, expr)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Evaluates the predicate function at `x`.
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match &self.kind {
            PredicateKind::Affine { weights, offset } => weights.dot(x) + offset,
            PredicateKind::Ball { map, offset, radius } => radius - (map * x + offset).norm(),
        }
    }

    /// Gradient of `h` at `x`. The ball gradient is taken as zero within a
    /// 1e-9 radius of the center, where the predicate is strictly satisfied
    /// and any subgradient leaves the controller constraint inactive.
    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            PredicateKind::Affine { weights, .. } => weights.clone(),
            PredicateKind::Ball { map, offset, .. } => {
                let y = map * x + offset;
                let n = y.norm();
                if n <= 1e-9 {
                    DVector::zeros(x.len())
                } else {
                    -(map.transpose() * y) / n
                }
            }
        }
    }

    /// Supremum of `h` over the ball `||x|| <= cap`, used where `h_opt` is
    /// unbounded (affine predicates over the whole space).
    pub fn h_opt_within(&self, cap: f64) -> f64 {
        match &self.kind {
            PredicateKind::Affine { weights, offset } => {
                (weights.norm() * cap + offset).min(self.h_opt)
            }
            PredicateKind::Ball { .. } => self.h_opt,
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PredicateKind::Ball { .. } => write!(f, "ball({}, {})", self.expr, self.scalar),
            PredicateKind::Affine { .. } => write!(f, "affine({}, {})", self.expr, self.scalar),
        }
    }
}

/// Non-temporal formula: a conjunction of predicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoolFormula {
    pub conjuncts: Vec<Predicate>,
}

impl BoolFormula {
    pub fn new(conjuncts: Vec<Predicate>) -> Result<Self, StlError> {
        if conjuncts.is_empty() {
            return Err(StlError::EmptyConjunction);
        }
        Ok(Self { conjuncts })
    }
}

impl fmt::Display for BoolFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.conjuncts.iter().enumerate() {
            if i > 0 {
                write!(f, " & ")?;
            }
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

/// Temporal formula of the supported fragment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Formula {
    Always(Interval, BoolFormula),
    Eventually(Interval, BoolFormula),
    Until(Interval, BoolFormula, BoolFormula),
    And(Box<Formula>, Box<Formula>),
}

impl Formula {
    /// Latest relative deadline referenced by the formula; a signal must
    /// cover `[t, t + horizon]` to be monitored at `t`.
    pub fn horizon(&self) -> f64 {
        match self {
            Formula::Always(iv, _) | Formula::Eventually(iv, _) | Formula::Until(iv, _, _) => iv.b,
            Formula::And(l, r) => l.horizon().max(r.horizon()),
        }
    }

    /// All predicates appearing in the formula, left to right.
    pub fn predicates(&self) -> Vec<&Predicate> {
        match self {
            Formula::Always(_, psi) | Formula::Eventually(_, psi) => psi.conjuncts.iter().collect(),
            Formula::Until(_, lhs, rhs) => {
                lhs.conjuncts.iter().chain(rhs.conjuncts.iter()).collect()
            }
            Formula::And(l, r) => {
                let mut v = l.predicates();
                v.extend(r.predicates());
                v
            }
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::Always(iv, psi) => write!(f, "G{iv}({psi})"),
            Formula::Eventually(iv, psi) => write!(f, "F{iv}({psi})"),
            Formula::Until(iv, lhs, rhs) => write!(f, "{lhs} U{iv} {rhs}"),
            Formula::And(l, r) => write!(f, "{l} && {r}"),
        }
    }
}

/// A sampled signal: strictly increasing sample instants with one state
/// vector per instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    times: Vec<f64>,
    values: Vec<DVector<f64>>,
    dim: usize,
}

impl Signal {
    pub fn new(times: Vec<f64>, values: Vec<DVector<f64>>) -> Result<Self, StlError> {
        if times.len() != values.len() || times.len() < 2 {
            return Err(StlError::InvalidSignal(
                "need at least two samples with matching instants".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(StlError::InvalidSignal(
                "sample instants must be strictly increasing".into(),
            ));
        }
        let dim = values[0].len();
        if dim == 0 || values.iter().any(|v| v.len() != dim) {
            return Err(StlError::InvalidSignal(
                "all samples must share one positive dimension".into(),
            ));
        }
        Ok(Self { times, values, dim })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Value at `tau`, exact on sample hits and linearly interpolated in
    /// between. `tau` must lie within the sampled span.
    pub fn value_at(&self, tau: f64) -> DVector<f64> {
        debug_assert!(tau >= self.start() && tau <= self.end());
        match self.times.binary_search_by(|t| t.partial_cmp(&tau).unwrap()) {
            Ok(i) => self.values[i].clone(),
            Err(i) => {
                // times[i-1] < tau < times[i]
                let (t0, t1) = (self.times[i - 1], self.times[i]);
                let lam = (tau - t0) / (t1 - t0);
                &self.values[i - 1] + (&self.values[i] - &self.values[i - 1]) * lam
            }
        }
    }

    /// The evaluation instants a temporal window `[lo, hi]` quantifies over:
    /// every sample instant inside the window plus the two interpolated
    /// endpoints. The window must lie within the sampled span.
    pub fn window_instants(&self, lo: f64, hi: f64) -> Vec<f64> {
        let mut out = Vec::new();
        out.push(lo);
        for &t in &self.times {
            if t > lo && t < hi {
                out.push(t);
            }
        }
        if hi > lo {
            out.push(hi);
        }
        out
    }
}
