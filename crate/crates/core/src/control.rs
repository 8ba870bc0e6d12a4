//! Decentralized per-agent controllers.
//!
//! Each agent solves `min u^T u  s.t.  a^T u >= beta` where `a` projects the
//! agent's barrier-gradient slice through its input map and `beta` budgets
//! that agent's share of the required barrier rate plus a disturbance margin.
//! With a single linear constraint the minimizer is the closed-form
//! projection `u = max(0, beta) a / ||a||^2`, so no iterative solver runs in
//! the loop.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

use crate::barrier::CompositeBarrier;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(
        "infeasible step for agent `{agent}` at t={t}: zero gradient slice with required rate {required}"
    )]
    Infeasible { agent: String, t: f64, required: f64 },
    #[error("input map of agent `{agent}` loses row rank (smallest singular value {sigma_min})")]
    RankDeficientInputMap { agent: String, sigma_min: f64 },
    #[error("agent `{0}` is not a member of the group")]
    NotAMember(String),
}

/// Drift term `f_i(x_i, t)` described by data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Drift {
    Zero,
    Constant { value: DVector<f64> },
    /// `f(x) = matrix * x`.
    Linear { matrix: DMatrix<f64> },
}

/// Input map `g_i(x_i, t)` described by data; must have full row rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InputMap {
    Identity,
    Matrix { matrix: DMatrix<f64> },
}

/// One agent's dynamics `x_i' = f_i(x_i,t) + g_i(x_i,t) u_i + c_i(x,t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentModel {
    pub id: String,
    pub state_dim: usize,
    pub input_dim: usize,
    pub drift: Drift,
    pub input_map: InputMap,
}

impl AgentModel {
    pub fn single_integrator(id: impl Into<String>, dim: usize) -> Self {
        Self {
            id: id.into(),
            state_dim: dim,
            input_dim: dim,
            drift: Drift::Zero,
            input_map: InputMap::Identity,
        }
    }

    pub fn drift_at(&self, x: &DVector<f64>, _t: f64) -> DVector<f64> {
        match &self.drift {
            Drift::Zero => DVector::zeros(self.state_dim),
            Drift::Constant { value } => value.clone(),
            Drift::Linear { matrix } => matrix * x,
        }
    }

    pub fn input_map_at(&self, _x: &DVector<f64>, _t: f64) -> DMatrix<f64> {
        match &self.input_map {
            InputMap::Identity => DMatrix::identity(self.state_dim, self.input_dim),
            InputMap::Matrix { matrix } => matrix.clone(),
        }
    }

    /// Full-row-rank check on the input map, with a numerical floor on the
    /// smallest singular value.
    pub fn validate_input_map(&self, x: &DVector<f64>, t: f64) -> Result<(), ControlError> {
        let g = self.input_map_at(x, t);
        let wide = g.nrows() <= g.ncols();
        let sigma = g.svd(false, false).singular_values;
        let sigma_min = sigma.iter().cloned().fold(f64::INFINITY, f64::min);
        if !wide || sigma_min < 1e-9 {
            return Err(ControlError::RankDeficientInputMap {
                agent: self.id.clone(),
                sigma_min,
            });
        }
        Ok(())
    }
}

/// A set of agents bound to one barrier over their stacked state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGroup {
    pub name: String,
    pub agent_ids: Vec<String>,
    pub barrier: CompositeBarrier,
    /// Disturbance bound the controllers provision against.
    pub c_bound: f64,
    /// Linear class-K gain: `alpha(chi) = kappa * chi`.
    pub kappa: f64,
    /// Index range of each agent's block inside the stacked group state,
    /// positionally matching `agent_ids`.
    pub state_layout: Vec<Range<usize>>,
}

impl TaskGroup {
    pub fn member_index(&self, agent_id: &str) -> Result<usize, ControlError> {
        self.agent_ids
            .iter()
            .position(|id| id == agent_id)
            .ok_or_else(|| ControlError::NotAMember(agent_id.to_string()))
    }

    pub fn group_dim(&self) -> usize {
        self.barrier.group_dim
    }
}

/// Required barrier-rate budget `omega = d b/d t + kappa * b` at `(x, t)`.
pub fn omega(group: &TaskGroup, x_bar: &DVector<f64>, t: f64) -> f64 {
    group.barrier.partial_t(x_bar, t) + group.kappa * group.barrier.eval(x_bar, t)
}

/// Per-agent load-sharing weights: each agent carries the fraction of the
/// rate budget proportional to the 1-norm of its gradient slice; if the whole
/// gradient vanishes every agent carries the full budget.
///
/// The largest weight is nudged so the weights sum to one exactly, which the
/// summed per-agent conditions rely on.
pub fn load_share(group: &TaskGroup, x_bar: &DVector<f64>, t: f64) -> Vec<f64> {
    let grad = group.barrier.grad_x(x_bar, t);
    let norms: Vec<f64> = group
        .state_layout
        .iter()
        .map(|range| grad.as_slice()[range.clone()].iter().map(|g| g.abs()).sum())
        .collect();
    let total: f64 = norms.iter().sum();
    if total == 0.0 {
        return vec![1.0; norms.len()];
    }
    let mut weights: Vec<f64> = norms.iter().map(|n| n / total).collect();
    let imax = norms
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    for _ in 0..4 {
        let sum: f64 = weights.iter().sum();
        if sum == 1.0 {
            break;
        }
        weights[imax] -= sum - 1.0;
    }
    weights
}

/// Constraint data of one agent's program: `a^T u >= beta`.
fn constraint_data(
    agent: &AgentModel,
    group: &TaskGroup,
    x_bar: &DVector<f64>,
    t: f64,
) -> Result<(DVector<f64>, f64, f64), ControlError> {
    let idx = group.member_index(&agent.id)?;
    let range = group.state_layout[idx].clone();
    let slice = group.barrier.slice_gradient(x_bar, t, range.clone());
    let x_i = DVector::from_iterator(range.len(), x_bar.as_slice()[range].iter().copied());
    let g = agent.input_map_at(&x_i, t);
    let f = agent.drift_at(&x_i, t);
    let a = g.transpose() * &slice;
    let share = load_share(group, x_bar, t)[idx];
    let slice_norm1: f64 = slice.iter().map(|v| v.abs()).sum();
    let beta = -slice.dot(&f) - share * omega(group, x_bar, t) + slice_norm1 * group.c_bound;
    let scale = group.barrier.grad_x(x_bar, t).norm().max(1.0);
    Ok((a, beta, scale))
}

/// Closed-form minimizer of `u^T u` under a single linear constraint
/// `a^T u >= beta`: zero when the constraint is slack, otherwise the
/// projection `beta a / ||a||^2`.
pub fn min_norm_input(a: &DVector<f64>, beta: f64) -> DVector<f64> {
    let nn = a.norm_squared();
    if beta <= 0.0 || nn == 0.0 {
        DVector::zeros(a.len())
    } else {
        a * (beta / nn)
    }
}

/// The agent's control input at `(x_bar, t)`.
///
/// When the gradient slice vanishes the constraint degenerates: it is
/// trivially satisfied when the remaining budget `beta` is non-positive
/// (zero input is optimal) and infeasible otherwise, which signals a
/// misconfigured rate gain rather than a solvable program.
pub fn agent_input(
    agent: &AgentModel,
    group: &TaskGroup,
    x_bar: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>, ControlError> {
    let (a, beta, scale) = constraint_data(agent, group, x_bar, t)?;
    if a.norm() <= 1e-12 * scale {
        if beta <= 0.0 {
            return Ok(DVector::zeros(agent.input_dim));
        }
        return Err(ControlError::Infeasible {
            agent: agent.id.clone(),
            t,
            required: beta,
        });
    }
    Ok(min_norm_input(&a, beta))
}

/// Analytic feasible (not minimal) control law used as a boundedness and
/// feasibility oracle: cancels the drift and pushes along the sign pattern
/// of the gradient slice with gain `c_bound`. Requires a nonzero slice.
pub fn feasible_fallback(
    agent: &AgentModel,
    group: &TaskGroup,
    x_bar: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>, ControlError> {
    let idx = group.member_index(&agent.id)?;
    let range = group.state_layout[idx].clone();
    let slice = group.barrier.slice_gradient(x_bar, t, range.clone());
    let x_i = DVector::from_iterator(range.len(), x_bar.as_slice()[range].iter().copied());
    let g = agent.input_map_at(&x_i, t);
    let f = agent.drift_at(&x_i, t);
    let gram = &g * g.transpose();
    let inv = gram
        .clone()
        .try_inverse()
        .ok_or_else(|| ControlError::RankDeficientInputMap {
            agent: agent.id.clone(),
            sigma_min: 0.0,
        })?;
    let v = slice.map(|s| s.signum() * group.c_bound);
    Ok(g.transpose() * inv * (v - f))
}

/// Slack of the group-level barrier condition under the stacked inputs:
/// nonnegative slack certifies that the per-agent conditions added up to the
/// group condition at this instant.
pub fn centralized_check(
    group: &TaskGroup,
    agents: &[&AgentModel],
    x_bar: &DVector<f64>,
    t: f64,
    inputs: &[DVector<f64>],
) -> f64 {
    let grad = group.barrier.grad_x(x_bar, t);
    let mut drive = 0.0;
    for ((agent, range), u) in agents.iter().zip(&group.state_layout).zip(inputs) {
        let slice = DVector::from_iterator(
            range.len(),
            grad.as_slice()[range.clone()].iter().copied(),
        );
        let x_i = DVector::from_iterator(
            range.len(),
            x_bar.as_slice()[range.clone()].iter().copied(),
        );
        let f = agent.drift_at(&x_i, t);
        let g = agent.input_map_at(&x_i, t);
        drive += slice.dot(&(f + g * u));
    }
    let grad_norm1: f64 = grad.iter().map(|v| v.abs()).sum();
    let b = group.barrier.eval(x_bar, t);
    drive + group.barrier.partial_t(x_bar, t) + group.kappa * b - grad_norm1 * group.c_bound
}
