//! Compilation of formulas into time-varying barrier terms
//! `b_l(x,t) = -gamma_l(t) + h_l(x)`, the switching schedule that retires
//! terms at their deadlines, and the smoothed conjunction
//! `b(x,t) = -(1/eta) ln( sum_l o_l(t) exp(-eta b_l(x,t)) )`
//! together with its gradients.
//!
//! The smoothed conjunction under-approximates the minimum of the active
//! terms for every `eta > 0`, so `b >= 0` forces every active `b_l >= 0`.
//! A state-bound term `D - ||x||` is always active and keeps superlevel sets
//! compact.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

use crate::stl::{Formula, Predicate};

#[derive(Debug, Error)]
pub enum BarrierError {
    #[error("predicate `{label}` has dimension {found}, group state has {expected}")]
    DimensionMismatch {
        label: String,
        found: usize,
        expected: usize,
    },
    #[error("gamma must be non-decreasing: gamma_inf {gamma_inf} < gamma_0 {gamma_0}")]
    GammaDecreasing { gamma_0: f64, gamma_inf: f64 },
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("need at least one barrier term")]
    NoTerms,
}

/// Piecewise-linear time profile: climbs from `gamma_0` at `t = 0` to
/// `gamma_inf` at `t = t_star` and stays there. `t_star = 0` pins the profile
/// at `gamma_inf` for all `t >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaFn {
    pub gamma_0: f64,
    pub gamma_inf: f64,
    pub t_star: f64,
}

impl GammaFn {
    pub fn new(gamma_0: f64, gamma_inf: f64, t_star: f64) -> Result<Self, BarrierError> {
        if gamma_inf < gamma_0 {
            return Err(BarrierError::GammaDecreasing { gamma_0, gamma_inf });
        }
        if t_star < 0.0 {
            return Err(BarrierError::NonPositive {
                name: "t_star",
                value: t_star,
            });
        }
        Ok(Self {
            gamma_0,
            gamma_inf,
            t_star,
        })
    }

    pub fn eval(&self, t: f64) -> f64 {
        if t < self.t_star {
            (self.gamma_inf - self.gamma_0) / self.t_star * t + self.gamma_0
        } else {
            self.gamma_inf
        }
    }

    /// Slope of the profile, taken as the right derivative at the kink.
    pub fn rate(&self, t: f64) -> f64 {
        if t < self.t_star {
            (self.gamma_inf - self.gamma_0) / self.t_star
        } else {
            0.0
        }
    }
}

/// Which operator a barrier term was generated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TermOrigin {
    Always,
    Eventually,
    UntilLeft,
    UntilRight,
}

/// A barrier term before its gamma parameters are chosen: the predicate, the
/// critical time by which it must hold, and the deadline at which it is
/// removed from the composite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierTermSpec {
    pub predicate: Predicate,
    pub t_star: f64,
    pub deadline: f64,
    pub origin: TermOrigin,
}

/// A fully parameterized barrier term `b_l(x,t) = -gamma_l(t) + h_l(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierTerm {
    pub predicate: Predicate,
    pub gamma: GammaFn,
    pub deadline: f64,
    pub origin: TermOrigin,
}

impl BarrierTerm {
    pub fn eval(&self, x: &DVector<f64>, t: f64) -> f64 {
        self.predicate.eval(x) - self.gamma.eval(t)
    }
}

/// Maps a formula of the fragment onto barrier term specifications:
/// one term per predicate per temporal operator.
///
/// Always terms must hold from the start of their window (`t* = a`);
/// eventually terms by the end (`t* = b`); an until contributes terms for its
/// right operand with `t* = b` and terms for its left operand that hold from
/// time zero until the pinned satisfaction instant (`t* = 0`, deadline `b`).
/// Top-level conjunction concatenates.
pub fn decompose(formula: &Formula, group_dim: usize) -> Result<Vec<BarrierTermSpec>, BarrierError> {
    let mut specs = Vec::new();
    collect_specs(formula, group_dim, &mut specs)?;
    Ok(specs)
}

fn check_dim(pred: &Predicate, group_dim: usize) -> Result<(), BarrierError> {
    if pred.dim != group_dim {
        return Err(BarrierError::DimensionMismatch {
            label: pred.label.clone(),
            found: pred.dim,
            expected: group_dim,
        });
    }
    Ok(())
}

fn collect_specs(
    formula: &Formula,
    group_dim: usize,
    out: &mut Vec<BarrierTermSpec>,
) -> Result<(), BarrierError> {
    match formula {
        Formula::Always(iv, psi) => {
            for p in &psi.conjuncts {
                check_dim(p, group_dim)?;
                out.push(BarrierTermSpec {
                    predicate: p.clone(),
                    t_star: iv.a,
                    deadline: iv.b,
                    origin: TermOrigin::Always,
                });
            }
        }
        Formula::Eventually(iv, psi) => {
            for p in &psi.conjuncts {
                check_dim(p, group_dim)?;
                out.push(BarrierTermSpec {
                    predicate: p.clone(),
                    t_star: iv.b,
                    deadline: iv.b,
                    origin: TermOrigin::Eventually,
                });
            }
        }
        Formula::Until(iv, lhs, rhs) => {
            // The existential instant is pinned to the window end, so the
            // left operand must hold on [0, b] and the right operand by b.
            for p in &lhs.conjuncts {
                check_dim(p, group_dim)?;
                out.push(BarrierTermSpec {
                    predicate: p.clone(),
                    t_star: 0.0,
                    deadline: iv.b,
                    origin: TermOrigin::UntilLeft,
                });
            }
            for p in &rhs.conjuncts {
                check_dim(p, group_dim)?;
                out.push(BarrierTermSpec {
                    predicate: p.clone(),
                    t_star: iv.b,
                    deadline: iv.b,
                    origin: TermOrigin::UntilRight,
                });
            }
        }
        Formula::And(l, r) => {
            collect_specs(l, group_dim, out)?;
            collect_specs(r, group_dim, out)?;
        }
    }
    Ok(())
}

fn switch_times_from(timings: impl Iterator<Item = (f64, f64, bool)>) -> Vec<f64> {
    let mut times: Vec<f64> = Vec::new();
    let mut max_deadline = 0.0f64;
    for (t_star, deadline, is_always) in timings {
        max_deadline = max_deadline.max(deadline);
        times.push(deadline);
        if is_always && t_star > 0.0 {
            times.push(t_star);
        }
    }
    times.retain(|&t| t > 0.0 && t <= max_deadline);
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup();
    times
}

/// Modified switching sequence of a term set: the sorted distinct union of
/// all deadlines and the critical times of always terms (interior slope
/// kinks), restricted to `(0, max deadline]`.
pub fn switching_times(specs: &[BarrierTermSpec]) -> Result<Vec<f64>, BarrierError> {
    if specs.is_empty() {
        return Err(BarrierError::NoTerms);
    }
    Ok(switch_times_from(specs.iter().map(|s| {
        (s.t_star, s.deadline, s.origin == TermOrigin::Always)
    })))
}

/// Whether a mask is taken right-continuous at `t` (the post-switch active
/// set) or as the left limit (the pre-switch active set).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSide {
    Value,
    LeftLimit,
}

/// The smoothed conjunction of active barrier terms plus the always-active
/// state-bound term `D - ||x||`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeBarrier {
    pub terms: Vec<BarrierTerm>,
    pub eta: f64,
    /// Radius `D` of the state-bound term.
    pub state_bound: f64,
    pub switch_times: Vec<f64>,
    pub group_dim: usize,
}

impl CompositeBarrier {
    pub fn new(
        terms: Vec<BarrierTerm>,
        eta: f64,
        state_bound: f64,
        group_dim: usize,
    ) -> Result<Self, BarrierError> {
        if terms.is_empty() {
            return Err(BarrierError::NoTerms);
        }
        if eta <= 0.0 {
            return Err(BarrierError::NonPositive {
                name: "eta",
                value: eta,
            });
        }
        if state_bound <= 0.0 {
            return Err(BarrierError::NonPositive {
                name: "state_bound",
                value: state_bound,
            });
        }
        for term in &terms {
            check_dim(&term.predicate, group_dim)?;
            if term.deadline <= 0.0 {
                return Err(BarrierError::NonPositive {
                    name: "deadline",
                    value: term.deadline,
                });
            }
            GammaFn::new(term.gamma.gamma_0, term.gamma.gamma_inf, term.gamma.t_star)?;
        }
        let switch_times = switch_times_from(terms.iter().map(|term| {
            (
                term.gamma.t_star,
                term.deadline,
                term.origin == TermOrigin::Always,
            )
        }));
        Ok(Self {
            terms,
            eta,
            state_bound,
            switch_times,
            group_dim,
        })
    }

    /// Distinct instants at which some term is removed, ascending.
    pub fn deadline_switches(&self) -> Vec<f64> {
        let mut d: Vec<f64> = self.terms.iter().map(|t| t.deadline).collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        d.dedup();
        d
    }

    pub fn last_switch(&self) -> f64 {
        self.switch_times.last().copied().unwrap_or(0.0)
    }

    /// Active mask at `t`: one bit per term plus a trailing bit for the
    /// state-bound term, which never retires. A term is active while
    /// `t < deadline`; exactly at the deadline the post-switch mask applies.
    pub fn active_mask(&self, t: f64) -> Vec<bool> {
        self.mask(t, MaskSide::Value)
    }

    pub fn mask(&self, t: f64, side: MaskSide) -> Vec<bool> {
        let mut bits: Vec<bool> = self
            .terms
            .iter()
            .map(|term| match side {
                MaskSide::Value => t < term.deadline,
                MaskSide::LeftLimit => t <= term.deadline,
            })
            .collect();
        bits.push(true);
        bits
    }

    /// Values of every term at `(x, t)`, state bound last, ignoring the mask.
    fn raw_values(&self, x: &DVector<f64>, t: f64) -> Vec<f64> {
        let mut values: Vec<f64> = self.terms.iter().map(|term| term.eval(x, t)).collect();
        values.push(self.state_bound - x.norm());
        values
    }

    pub fn eval(&self, x: &DVector<f64>, t: f64) -> f64 {
        self.eval_masked(x, t, &self.active_mask(t))
    }

    pub fn eval_masked(&self, x: &DVector<f64>, t: f64, mask: &[bool]) -> f64 {
        let values = self.raw_values(x, t);
        masked_softmin(&values, mask, self.eta)
    }

    pub fn grad_x(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        self.grad_x_masked(x, t, &self.active_mask(t))
    }

    pub fn grad_x_masked(&self, x: &DVector<f64>, t: f64, mask: &[bool]) -> DVector<f64> {
        let values = self.raw_values(x, t);
        let weights = masked_softmin_weights(&values, mask, self.eta);
        let mut grad = DVector::zeros(self.group_dim);
        for (term, &w) in self.terms.iter().zip(&weights) {
            if w != 0.0 {
                grad += term.predicate.grad(x) * w;
            }
        }
        let w_bound = weights[self.terms.len()];
        let n = x.norm();
        if w_bound != 0.0 && n > 1e-9 {
            grad -= x * (w_bound / n);
        }
        grad
    }

    pub fn partial_t(&self, x: &DVector<f64>, t: f64) -> f64 {
        self.partial_t_masked(x, t, &self.active_mask(t))
    }

    pub fn partial_t_masked(&self, x: &DVector<f64>, t: f64, mask: &[bool]) -> f64 {
        let values = self.raw_values(x, t);
        let weights = masked_softmin_weights(&values, mask, self.eta);
        self.terms
            .iter()
            .zip(&weights)
            .map(|(term, &w)| -w * term.gamma.rate(t))
            .sum()
    }

    /// Contiguous block of the state gradient belonging to one agent.
    pub fn slice_gradient(&self, x: &DVector<f64>, t: f64, range: Range<usize>) -> DVector<f64> {
        assert!(
            range.end <= self.group_dim,
            "slice {range:?} outside group state of dimension {}",
            self.group_dim
        );
        let grad = self.grad_x(x, t);
        DVector::from_iterator(range.len(), grad.as_slice()[range].iter().copied())
    }
}

/// Numerically stable smoothed minimum over the masked entries:
/// `m - (1/eta) ln( sum exp(-eta (v - m)) )` with `m` the masked minimum.
/// At least one mask bit must be set.
pub fn masked_softmin(values: &[f64], mask: &[bool], eta: f64) -> f64 {
    debug_assert_eq!(values.len(), mask.len());
    let m = masked_min(values, mask);
    let sum: f64 = values
        .iter()
        .zip(mask)
        .filter(|(_, &on)| on)
        .map(|(&v, _)| (-eta * (v - m)).exp())
        .sum();
    m - sum.ln() / eta
}

/// Softmin weights of the masked entries (zero on masked-out entries); the
/// weights sum to one and concentrate on the minimum as `eta` grows.
pub fn masked_softmin_weights(values: &[f64], mask: &[bool], eta: f64) -> Vec<f64> {
    debug_assert_eq!(values.len(), mask.len());
    let m = masked_min(values, mask);
    let raw: Vec<f64> = values
        .iter()
        .zip(mask)
        .map(|(&v, &on)| if on { (-eta * (v - m)).exp() } else { 0.0 })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

fn masked_min(values: &[f64], mask: &[bool]) -> f64 {
    values
        .iter()
        .zip(mask)
        .filter(|(_, &on)| on)
        .map(|(&v, _)| v)
        .fold(f64::INFINITY, f64::min)
}
