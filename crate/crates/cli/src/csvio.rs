//! Trajectory CSV: one row per simulation step with columns
//! `t, x_<agent>_<i>.., u_<agent>_<i>.., b_<group>.., slack_<group>..`.

use anyhow::{bail, Context, Result};
use nalgebra::DVector;
use std::fmt::Write as _;
use std::path::Path;

use stlcbf::sim::{Trajectory, World};
use stlcbf::stl::Signal;

pub fn write_trajectory(world: &World, traj: &Trajectory, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push('t');
    for agent in &world.agents {
        for i in 0..agent.state_dim {
            write!(out, ",x_{}_{i}", agent.id)?;
        }
    }
    for agent in &world.agents {
        for i in 0..agent.input_dim {
            write!(out, ",u_{}_{i}", agent.id)?;
        }
    }
    for group in &world.groups {
        write!(out, ",b_{}", group.name)?;
    }
    for group in &world.groups {
        write!(out, ",slack_{}", group.name)?;
    }
    out.push('\n');
    for step in 0..traj.times.len() {
        write!(out, "{}", traj.times[step])?;
        for states in &traj.states[step] {
            for value in states.iter() {
                write!(out, ",{value}")?;
            }
        }
        for inputs in &traj.inputs[step] {
            for value in inputs.iter() {
                write!(out, ",{value}")?;
            }
        }
        for value in &traj.barrier_values[step] {
            write!(out, ",{value}")?;
        }
        for value in &traj.slacks[step] {
            write!(out, ",{value}")?;
        }
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// A trajectory read back from CSV, with the agent and group structure
/// recovered from the header.
#[derive(Debug, Clone)]
pub struct TrajectoryTable {
    pub times: Vec<f64>,
    pub agent_ids: Vec<String>,
    /// `states[step][agent]`.
    pub states: Vec<Vec<DVector<f64>>>,
    pub inputs: Vec<Vec<DVector<f64>>>,
    pub group_names: Vec<String>,
    pub barriers: Vec<Vec<f64>>,
    pub slacks: Vec<Vec<f64>>,
}

impl TrajectoryTable {
    /// Stacked signal of the named agents, in the given order.
    pub fn stacked_signal(&self, agent_ids: &[String]) -> Result<Signal> {
        let indices: Vec<usize> = agent_ids
            .iter()
            .map(|id| {
                self.agent_ids
                    .iter()
                    .position(|a| a == id)
                    .with_context(|| format!("trajectory lacks agent `{id}`"))
            })
            .collect::<Result<_>>()?;
        let values: Vec<DVector<f64>> = self
            .states
            .iter()
            .map(|row| {
                let mut stacked = Vec::new();
                for &idx in &indices {
                    stacked.extend_from_slice(row[idx].as_slice());
                }
                DVector::from_vec(stacked)
            })
            .collect();
        Ok(Signal::new(self.times.clone(), values)?)
    }

    /// Signal over every agent in file order.
    pub fn full_signal(&self) -> Result<Signal> {
        self.stacked_signal(&self.agent_ids.clone())
    }
}

pub fn read_trajectory(path: &Path) -> Result<TrajectoryTable> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("empty trajectory file")?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.first() != Some(&"t") {
        bail!("trajectory header must start with `t`");
    }

    // Recover the layout: contiguous runs of x_<id>_<i>, u_<id>_<i>,
    // b_<group>, slack_<group>.
    let mut agent_ids: Vec<String> = Vec::new();
    let mut state_dims: Vec<usize> = Vec::new();
    let mut input_dims: Vec<usize> = Vec::new();
    let mut group_names: Vec<String> = Vec::new();
    for column in &columns[1..] {
        if let Some(rest) = column.strip_prefix("x_") {
            let (id, _) = rest.rsplit_once('_').context("bad state column")?;
            if agent_ids.last().map(String::as_str) != Some(id) {
                agent_ids.push(id.to_string());
                state_dims.push(0);
            }
            *state_dims.last_mut().unwrap() += 1;
        } else if let Some(rest) = column.strip_prefix("u_") {
            let (id, _) = rest.rsplit_once('_').context("bad input column")?;
            let idx = agent_ids
                .iter()
                .position(|a| a == id)
                .context("input column for unknown agent")?;
            if input_dims.len() <= idx {
                input_dims.resize(idx + 1, 0);
            }
            input_dims[idx] += 1;
        } else if let Some(name) = column.strip_prefix("slack_") {
            if !group_names.iter().any(|g| g == name) {
                bail!("slack column `{name}` without matching barrier column");
            }
        } else if let Some(name) = column.strip_prefix("b_") {
            group_names.push(name.to_string());
        } else {
            bail!("unrecognized column `{column}`");
        }
    }
    if input_dims.len() != agent_ids.len() {
        input_dims.resize(agent_ids.len(), 0);
    }

    let mut table = TrajectoryTable {
        times: Vec::new(),
        agent_ids,
        states: Vec::new(),
        inputs: Vec::new(),
        group_names,
        barriers: Vec::new(),
        slacks: Vec::new(),
    };
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(|f| {
            f.parse::<f64>()
                .with_context(|| format!("line {}: bad number `{f}`", lineno + 2))
        });
        let mut next = || fields.next().context("row too short").and_then(|v| v);
        table.times.push(next()?);
        let mut row_states = Vec::with_capacity(table.agent_ids.len());
        for &dim in &state_dims {
            let mut x = DVector::zeros(dim);
            for i in 0..dim {
                x[i] = next()?;
            }
            row_states.push(x);
        }
        table.states.push(row_states);
        let mut row_inputs = Vec::with_capacity(table.agent_ids.len());
        for &dim in &input_dims {
            let mut u = DVector::zeros(dim);
            for i in 0..dim {
                u[i] = next()?;
            }
            row_inputs.push(u);
        }
        table.inputs.push(row_inputs);
        let n_groups = table.group_names.len();
        table
            .barriers
            .push((0..n_groups).map(|_| next()).collect::<Result<_>>()?);
        table
            .slacks
            .push((0..n_groups).map(|_| next()).collect::<Result<_>>()?);
    }
    if table.times.len() < 2 {
        bail!("trajectory has fewer than two rows");
    }
    Ok(table)
}
