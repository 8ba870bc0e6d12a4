//! Scenario files: the JSON description of agents, task groups, coupling,
//! disturbance, timing, and synthesis settings, plus the parameter file that
//! carries synthesis results to the simulator.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

use crate::barrier::{decompose, switching_times, BarrierError, CompositeBarrier};
use crate::control::{AgentModel, Drift, InputMap, TaskGroup};
use crate::sim::{Coupling, DisturbanceSpec, Timing, World};
use crate::stl::{parse_formula, Formula, SliceEnv, StlError};
use crate::synthesis::{
    SearchBounds, SynthesisError, SynthesisMode, SynthesisProblem, SynthesisResult,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("in group `{group}`: {source}")]
    Formula {
        group: String,
        #[source]
        source: StlError,
    },
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<Drift>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_map: Option<InputMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_dim: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub id: String,
    pub dim: usize,
    /// Defaults to a single integrator.
    #[serde(default)]
    pub dynamics: DynamicsSpec,
    pub x0: Vec<f64>,
}

impl AgentSpec {
    pub fn model(&self) -> AgentModel {
        AgentModel {
            id: self.id.clone(),
            state_dim: self.dim,
            input_dim: self.dynamics.input_dim.unwrap_or(self.dim),
            drift: self.dynamics.drift.clone().unwrap_or(Drift::Zero),
            input_map: self.dynamics.input_map.clone().unwrap_or(InputMap::Identity),
        }
    }
}

/// A named block of one agent's state, addressable from formulas.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceSpec {
    pub agent: String,
    #[serde(default)]
    pub start: usize,
    pub len: usize,
}

/// Either an explicit gain or `"auto"` (derived from the gain certificate,
/// which needs `chi > 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KappaSpec {
    Value(f64),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

impl Default for KappaSpec {
    fn default() -> Self {
        KappaSpec::Auto(AutoTag::Auto)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub name: String,
    pub agents: Vec<String>,
    pub formula: String,
    #[serde(default)]
    pub slices: BTreeMap<String, SliceSpec>,
    #[serde(default)]
    pub constants: BTreeMap<String, Vec<f64>>,
    /// Disturbance bound the controllers provision against.
    pub c: f64,
    #[serde(default)]
    pub chi: f64,
    #[serde(default)]
    pub kappa: KappaSpec,
    #[serde(default = "default_epsilon_margin")]
    pub epsilon_margin: f64,
}

fn default_epsilon_margin() -> f64 {
    0.01
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSpec {
    pub mode: SynthesisMode,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<SearchBounds>,
    /// Initial states assumed during synthesis when they differ from the
    /// simulated initial states (e.g. recovery studies).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub agent_x0: BTreeMap<String, Vec<f64>>,
}

fn default_restarts() -> usize {
    32
}

impl Default for SynthesisSpec {
    fn default() -> Self {
        Self {
            mode: SynthesisMode::MaximizeR,
            restarts: default_restarts(),
            seed: 0,
            bounds: None,
            agent_x0: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub agents: Vec<AgentSpec>,
    pub groups: Vec<GroupSpec>,
    #[serde(default = "default_coupling")]
    pub coupling: Coupling,
    pub disturbance: DisturbanceSpec,
    pub timing: Timing,
    #[serde(default)]
    pub synthesis: SynthesisSpec,
}

fn default_coupling() -> Coupling {
    Coupling::None
}

impl Scenario {
    pub fn from_str(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    fn agent(&self, id: &str) -> Option<&AgentSpec> {
        self.agents.iter().find(|a| a.id == id)
    }

    /// Stacked state dimension of a group, agents in declared order.
    pub fn group_dim(&self, group: &GroupSpec) -> usize {
        group
            .agents
            .iter()
            .filter_map(|id| self.agent(id))
            .map(|a| a.dim)
            .sum()
    }

    /// Name bindings of a group: declared slices plus declared constants.
    pub fn group_env(&self, group: &GroupSpec) -> Result<SliceEnv, ScenarioError> {
        let dim = self.group_dim(group);
        let mut env = SliceEnv::new(dim);
        let mut offsets: BTreeMap<&str, usize> = BTreeMap::new();
        let mut offset = 0;
        for id in &group.agents {
            let agent = self
                .agent(id)
                .ok_or_else(|| invalid(format!("group `{}` names unknown agent `{id}`", group.name)))?;
            offsets.insert(id.as_str(), offset);
            offset += agent.dim;
        }
        let wrap = |source: StlError| ScenarioError::Formula {
            group: group.name.clone(),
            source,
        };
        for (name, slice) in &group.slices {
            let agent = self.agent(&slice.agent).ok_or_else(|| {
                invalid(format!(
                    "slice `{name}` references unknown agent `{}`",
                    slice.agent
                ))
            })?;
            let base = offsets.get(slice.agent.as_str()).ok_or_else(|| {
                invalid(format!(
                    "slice `{name}` references `{}`, which is not in group `{}`",
                    slice.agent, group.name
                ))
            })?;
            if slice.start + slice.len > agent.dim {
                return Err(invalid(format!(
                    "slice `{name}` spans {}..{} but agent `{}` has dimension {}",
                    slice.start,
                    slice.start + slice.len,
                    slice.agent,
                    agent.dim
                )));
            }
            env.add_slice(name.clone(), base + slice.start, slice.len)
                .map_err(wrap)?;
        }
        for (name, value) in &group.constants {
            env.add_constant(name.clone(), DVector::from_row_slice(value))
                .map_err(wrap)?;
        }
        Ok(env)
    }

    pub fn group_formula(&self, group: &GroupSpec) -> Result<Formula, ScenarioError> {
        let env = self.group_env(group)?;
        parse_formula(&group.formula, &env).map_err(|source| ScenarioError::Formula {
            group: group.name.clone(),
            source,
        })
    }

    /// Stacked initial state of a group; `for_synthesis` applies the
    /// per-agent synthesis overrides.
    pub fn group_x0(&self, group: &GroupSpec, for_synthesis: bool) -> DVector<f64> {
        let mut x = Vec::new();
        for id in &group.agents {
            let agent = self.agent(id).unwrap();
            let values = if for_synthesis {
                self.synthesis.agent_x0.get(id).unwrap_or(&agent.x0)
            } else {
                &agent.x0
            };
            x.extend_from_slice(values);
        }
        DVector::from_vec(x)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut ids = std::collections::BTreeSet::new();
        for agent in &self.agents {
            if !ids.insert(agent.id.clone()) {
                return Err(invalid(format!("duplicate agent id `{}`", agent.id)));
            }
            if agent.dim == 0 || agent.x0.len() != agent.dim {
                return Err(invalid(format!(
                    "agent `{}`: x0 must have the declared dimension {}",
                    agent.id, agent.dim
                )));
            }
            let model = agent.model();
            let x0 = DVector::from_row_slice(&agent.x0);
            model
                .validate_input_map(&x0, 0.0)
                .map_err(|e| invalid(e.to_string()))?;
        }
        for (id, x0) in &self.synthesis.agent_x0 {
            let agent = self
                .agent(id)
                .ok_or_else(|| invalid(format!("synthesis x0 for unknown agent `{id}`")))?;
            if x0.len() != agent.dim {
                return Err(invalid(format!(
                    "synthesis x0 for `{id}` must have dimension {}",
                    agent.dim
                )));
            }
        }
        let mut grouped = std::collections::BTreeSet::new();
        for group in &self.groups {
            if group.agents.is_empty() {
                return Err(invalid(format!("group `{}` has no agents", group.name)));
            }
            for id in &group.agents {
                if self.agent(id).is_none() {
                    return Err(invalid(format!(
                        "group `{}` names unknown agent `{id}`",
                        group.name
                    )));
                }
                if !grouped.insert(id.clone()) {
                    return Err(invalid(format!(
                        "agent `{id}` appears in more than one group"
                    )));
                }
            }
            if group.c < 0.0 || group.chi < 0.0 {
                return Err(invalid(format!(
                    "group `{}`: c and chi must be nonnegative",
                    group.name
                )));
            }
            match group.kappa {
                KappaSpec::Value(k) if k <= 0.0 => {
                    return Err(invalid(format!(
                        "group `{}`: kappa must be positive",
                        group.name
                    )))
                }
                KappaSpec::Auto(_) if group.chi <= 0.0 => {
                    return Err(invalid(format!(
                        "group `{}`: kappa = auto needs chi > 0",
                        group.name
                    )))
                }
                _ => {}
            }
            if self.disturbance.bound > group.c {
                return Err(invalid(format!(
                    "disturbance bound {} exceeds group `{}` budget c = {}",
                    self.disturbance.bound, group.name, group.c
                )));
            }
            let formula = self.group_formula(group)?;
            for pred in formula.predicates() {
                if pred.h_opt < 0.0 {
                    return Err(invalid(format!(
                        "group `{}`: predicate `{}` is not satisfiable (h_opt = {})",
                        group.name, pred.label, pred.h_opt
                    )));
                }
            }
            let specs = decompose(&formula, self.group_dim(group))?;
            let switches = switching_times(&specs)?;
            if let Some(&last) = switches.last() {
                if self.timing.horizon < last {
                    return Err(invalid(format!(
                        "horizon {} ends before group `{}` finishes switching at {last}",
                        self.timing.horizon, group.name
                    )));
                }
            }
        }
        if self.timing.sim_dt <= 0.0
            || self.timing.control_rate <= 0.0
            || self.timing.horizon <= 0.0
        {
            return Err(invalid("timing values must be positive"));
        }
        if self.timing.sim_dt > 1.0 / self.timing.control_rate + 1e-12 {
            return Err(invalid("sim_dt must not exceed the control period"));
        }
        Ok(())
    }

    /// The parameter-selection problem of one group.
    pub fn synthesis_problem(&self, group: &GroupSpec) -> Result<SynthesisProblem, ScenarioError> {
        let formula = self.group_formula(group)?;
        let dim = self.group_dim(group);
        let specs = decompose(&formula, dim)?;
        let x0 = self.group_x0(group, true);
        let mut problem = SynthesisProblem::new(specs, x0, group.chi, self.synthesis.mode);
        if let Some(bounds) = self.synthesis.bounds {
            problem.bounds = bounds;
        }
        problem.restarts = self.synthesis.restarts;
        problem.seed = self.synthesis.seed;
        Ok(problem)
    }

    /// Assembles the closed-loop world from synthesized group parameters.
    pub fn build_world(&self, params: &ParamsFile) -> Result<World, ScenarioError> {
        let mut groups = Vec::with_capacity(self.groups.len());
        for spec in &self.groups {
            let group_params = params
                .groups
                .iter()
                .find(|g| g.name == spec.name)
                .ok_or_else(|| invalid(format!("parameter file lacks group `{}`", spec.name)))?;
            let kappa = match spec.kappa {
                KappaSpec::Value(k) => k,
                KappaSpec::Auto(_) => group_params.result.kappa,
            };
            if kappa <= 0.0 {
                return Err(invalid(format!(
                    "group `{}`: resolved kappa must be positive (synthesis reported {kappa})",
                    spec.name
                )));
            }
            let mut layout = Vec::new();
            let mut offset = 0;
            for id in &spec.agents {
                let dim = self.agent(id).unwrap().dim;
                layout.push(offset..offset + dim);
                offset += dim;
            }
            groups.push(TaskGroup {
                name: spec.name.clone(),
                agent_ids: spec.agents.clone(),
                barrier: group_params.barrier.clone(),
                c_bound: spec.c,
                kappa,
                state_layout: layout,
            });
        }
        Ok(World {
            agents: self.agents.iter().map(|a| a.model()).collect(),
            initial_states: self
                .agents
                .iter()
                .map(|a| DVector::from_row_slice(&a.x0))
                .collect(),
            groups,
            coupling: self.coupling,
            disturbance: self.disturbance,
            timing: self.timing,
        })
    }
}

/// Synthesized parameters for one group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupParams {
    pub name: String,
    pub result: SynthesisResult,
    pub barrier: CompositeBarrier,
}

/// The parameter file written by synthesis and consumed by simulation;
/// bound to the scenario file contents by hash so stale parameters are
/// rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsFile {
    pub scenario_sha256: String,
    pub groups: Vec<GroupParams>,
}

impl ParamsFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_scenario(formula: &str) -> String {
        format!(
            r#"{{
                "agents": [{{"id": "a1", "dim": 2, "x0": [5.0, 5.0]}}],
                "groups": [{{
                    "name": "g1",
                    "agents": ["a1"],
                    "formula": "{formula}",
                    "c": 0.0,
                    "chi": 0.0,
                    "kappa": 1.0
                }}],
                "disturbance": {{"bound": 0.0, "seed": 7}},
                "timing": {{"sim_dt": 0.002, "control_rate": 50.0, "horizon": 10.0}},
                "synthesis": {{"mode": {{"type": "feasibility", "r": 0.25}}, "restarts": 4, "seed": 1}}
            }}"#
        )
    }

    #[test]
    fn loads_and_validates_minimal_scenario() {
        let scenario = Scenario::from_str(&minimal_scenario("G[7.5,10](ball([0,0], 5))")).unwrap();
        assert_eq!(scenario.agents.len(), 1);
        let group = &scenario.groups[0];
        assert_eq!(scenario.group_dim(group), 2);
        let problem = scenario.synthesis_problem(group).unwrap();
        assert_eq!(problem.term_specs.len(), 1);
    }

    #[test]
    fn unsatisfiable_predicate_rejected() {
        let err = Scenario::from_str(&minimal_scenario("G[7.5,10](ball([0,0], -5))")).unwrap_err();
        assert!(err.to_string().contains("not satisfiable"), "{err}");
    }

    #[test]
    fn horizon_must_cover_switching() {
        let text = minimal_scenario("G[7.5,20](ball([0,0], 5))");
        let err = Scenario::from_str(&text).unwrap_err();
        assert!(err.to_string().contains("horizon"), "{err}");
    }

    #[test]
    fn kappa_auto_needs_positive_chi() {
        let mut doc: serde_json::Value =
            serde_json::from_str(&minimal_scenario("G[7.5,10](ball([0,0], 5))")).unwrap();
        doc["groups"][0]["kappa"] = serde_json::json!("auto");
        let err = Scenario::from_str(&doc.to_string()).unwrap_err();
        assert!(err.to_string().contains("chi > 0"), "{err}");
        doc["groups"][0]["chi"] = serde_json::json!(0.05);
        assert!(Scenario::from_str(&doc.to_string()).is_ok());
    }

    #[test]
    fn agents_cannot_join_two_groups() {
        let text = r#"{
            "agents": [{"id": "a1", "dim": 1, "x0": [0.5]}],
            "groups": [
                {"name": "g1", "agents": ["a1"], "formula": "F[0,1](affine([1],0))", "c": 0.0, "kappa": 1.0},
                {"name": "g2", "agents": ["a1"], "formula": "F[0,1](affine([1],0))", "c": 0.0, "kappa": 1.0}
            ],
            "disturbance": {"bound": 0.0, "seed": 0},
            "timing": {"sim_dt": 0.002, "control_rate": 50.0, "horizon": 2.0}
        }"#;
        let err = Scenario::from_str(text).unwrap_err();
        assert!(err.to_string().contains("more than one group"), "{err}");
    }

    #[test]
    fn slices_resolve_into_stacked_state() {
        let text = r#"{
            "agents": [
                {"id": "r1", "dim": 2, "x0": [0.0, 0.0]},
                {"id": "r2", "dim": 2, "x0": [1.0, 0.0]}
            ],
            "groups": [{
                "name": "team",
                "agents": ["r1", "r2"],
                "formula": "G[1,2](ball(p1 - p2 + px, 0.33))",
                "slices": {
                    "p1": {"agent": "r1", "len": 2},
                    "p2": {"agent": "r2", "len": 2}
                },
                "constants": {"px": [0.8, 0.0]},
                "c": 1.0,
                "kappa": 1.0
            }],
            "disturbance": {"bound": 0.5, "seed": 0},
            "timing": {"sim_dt": 0.002, "control_rate": 50.0, "horizon": 5.0}
        }"#;
        let scenario = Scenario::from_str(text).unwrap();
        let group = &scenario.groups[0];
        let formula = scenario.group_formula(group).unwrap();
        let x0 = scenario.group_x0(group, false);
        // h = 0.33 - ||p1 - p2 + px|| = 0.33 - ||(-0.2, 0)||
        let h = formula.predicates()[0].eval(&x0);
        assert!((h - (0.33 - 0.2)).abs() < 1e-12);
    }

    #[test]
    fn synthesis_x0_override_applies_only_to_synthesis() {
        let mut text: serde_json::Value =
            serde_json::from_str(&minimal_scenario("G[7.5,10](ball([0,0], 5))")).unwrap();
        text["synthesis"]["agent_x0"] = serde_json::json!({"a1": [1.0, 1.0]});
        let scenario = Scenario::from_str(&text.to_string()).unwrap();
        let group = &scenario.groups[0];
        assert_eq!(
            scenario.group_x0(group, true),
            DVector::from_row_slice(&[1.0, 1.0])
        );
        assert_eq!(
            scenario.group_x0(group, false),
            DVector::from_row_slice(&[5.0, 5.0])
        );
    }
}
