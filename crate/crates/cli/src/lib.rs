//! Command implementations behind the `stlcbf` binary: parameter synthesis,
//! closed-loop simulation, trajectory monitoring, and plotting. Each command
//! returns its process exit code so the binary stays a thin wrapper.

pub mod csvio;
pub mod svg;

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

use stlcbf::scenario::{GroupParams, ParamsFile, Scenario};
use stlcbf::sim::Trajectory;
use stlcbf::stl::{eval_robust, parse_formula, SliceEnv, StlError};
use stlcbf::synthesis::synthesize;

pub use csvio::{read_trajectory, write_trajectory, TrajectoryTable};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::new(), |mut acc, byte| {
            let _ = write!(acc, "{byte:02x}");
            acc
        })
}

#[derive(Debug)]
pub struct SynthOutcome {
    pub exit_code: i32,
    pub params: Option<ParamsFile>,
}

/// Synthesizes barrier parameters for every group and writes the parameter
/// file. Exit 0 when every group is feasible, 1 when some group is not,
/// 2 (via error) on invalid scenarios.
pub fn cmd_synth(
    scenario_path: &Path,
    out_path: &Path,
    feasibility: Option<f64>,
) -> Result<SynthOutcome> {
    let bytes = std::fs::read(scenario_path)
        .with_context(|| format!("reading {}", scenario_path.display()))?;
    let mut scenario = Scenario::from_str(std::str::from_utf8(&bytes)?)?;
    if let Some(r) = feasibility {
        scenario.synthesis.mode = stlcbf::synthesis::SynthesisMode::Feasibility { r };
    }
    let mut groups = Vec::new();
    let mut all_feasible = true;
    for spec in &scenario.groups {
        let problem = scenario.synthesis_problem(spec)?;
        let result = synthesize(&problem)?;
        println!(
            "group {}: feasible={} r={:.6} eta={:.4} D={:.4} kappa={:.6}",
            spec.name, result.feasible, result.r, result.eta, result.state_bound, result.kappa
        );
        for entry in &result.report.entries {
            println!("  slack {:>12.3e}  {}", entry.slack, entry.name);
        }
        all_feasible &= result.feasible;
        let barrier = result.barrier(&problem.term_specs)?;
        groups.push(GroupParams {
            name: spec.name.clone(),
            result,
            barrier,
        });
    }
    if !all_feasible {
        eprintln!("synthesis infeasible; parameter file not written");
        return Ok(SynthOutcome {
            exit_code: 1,
            params: None,
        });
    }
    let params = ParamsFile {
        scenario_sha256: sha256_hex(&bytes),
        groups,
    };
    params.save(out_path)?;
    println!("parameters written to {}", out_path.display());
    Ok(SynthOutcome {
        exit_code: 0,
        params: Some(params),
    })
}

/// Per-run summary written next to the trajectory CSV.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Summary {
    /// Smallest robustness level across groups, from the parameter file.
    pub r: f64,
    /// Robustness of the conjunction of all group formulas at t = 0.
    pub rho_at_0: f64,
    pub min_b_after_recovery: Option<f64>,
    pub recovery_time: Option<f64>,
    pub infeasible_steps: usize,
    pub seed: u64,
}

#[derive(Debug)]
pub struct SimulateOutcome {
    pub exit_code: i32,
    pub summary: Option<Summary>,
}

pub fn summary_path(out_path: &Path) -> std::path::PathBuf {
    out_path.with_extension("summary.json")
}

/// Runs the closed loop and writes the trajectory CSV plus a summary JSON.
/// Exit 0 on a clean run, 1 on an aborted run, 2 on stale parameters.
pub fn cmd_simulate(
    scenario_path: &Path,
    params_path: &Path,
    out_path: &Path,
    seed: Option<u64>,
) -> Result<SimulateOutcome> {
    let bytes = std::fs::read(scenario_path)
        .with_context(|| format!("reading {}", scenario_path.display()))?;
    let scenario = Scenario::from_str(std::str::from_utf8(&bytes)?)?;
    let params = ParamsFile::load(params_path)?;
    if params.scenario_sha256 != sha256_hex(&bytes) {
        eprintln!(
            "parameter file was synthesized from a different scenario (hash mismatch); \
             re-run synth"
        );
        return Ok(SimulateOutcome {
            exit_code: 2,
            summary: None,
        });
    }
    let world = scenario.build_world(&params)?;
    let traj = match world.run(seed) {
        Ok(traj) => traj,
        Err(e) => {
            eprintln!("simulation aborted: {e}");
            return Ok(SimulateOutcome {
                exit_code: 1,
                summary: None,
            });
        }
    };
    write_trajectory(&world, &traj, out_path)?;
    let summary = build_summary(&scenario, &params, &traj)?;
    std::fs::write(
        summary_path(out_path),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "simulated {}s at dt={}s: rho(0)={:.6} min_b_after_recovery={:?} infeasible_steps={}",
        world.timing.horizon,
        world.timing.sim_dt,
        summary.rho_at_0,
        summary.min_b_after_recovery,
        summary.infeasible_steps
    );
    println!("trajectory written to {}", out_path.display());
    Ok(SimulateOutcome {
        exit_code: 0,
        summary: Some(summary),
    })
}

fn build_summary(
    scenario: &Scenario,
    params: &ParamsFile,
    traj: &Trajectory,
) -> Result<Summary> {
    let mut rho = f64::INFINITY;
    let mut recovery: Option<f64> = Some(0.0);
    let mut min_b: Option<f64> = Some(f64::INFINITY);
    for (gidx, spec) in scenario.groups.iter().enumerate() {
        let formula = scenario.group_formula(spec)?;
        let signal = group_signal(scenario, spec, traj)?;
        rho = rho.min(eval_robust(&formula, &signal, 0.0)?);
        match traj.recovery_time(gidx) {
            Some(t_rec) => {
                recovery = recovery.map(|t| t.max(t_rec));
                min_b = min_b.map(|b| b.min(traj.min_barrier_after(gidx, t_rec)));
            }
            None => {
                recovery = None;
                min_b = None;
            }
        }
    }
    Ok(Summary {
        r: params
            .groups
            .iter()
            .map(|g| g.result.r)
            .fold(f64::INFINITY, f64::min),
        rho_at_0: rho,
        min_b_after_recovery: min_b,
        recovery_time: recovery,
        infeasible_steps: traj.infeasible_steps(),
        seed: traj.seed,
    })
}

/// Stacked signal of one group straight from an in-memory trajectory.
fn group_signal(
    scenario: &Scenario,
    spec: &stlcbf::scenario::GroupSpec,
    traj: &Trajectory,
) -> Result<stlcbf::stl::Signal> {
    let indices: Vec<usize> = spec
        .agents
        .iter()
        .map(|id| {
            scenario
                .agents
                .iter()
                .position(|a| &a.id == id)
                .context("unknown agent")
        })
        .collect::<Result<_>>()?;
    let values: Vec<nalgebra::DVector<f64>> = traj
        .states
        .iter()
        .map(|row| {
            let mut stacked = Vec::new();
            for &idx in &indices {
                stacked.extend_from_slice(row[idx].as_slice());
            }
            nalgebra::DVector::from_vec(stacked)
        })
        .collect();
    Ok(stlcbf::stl::Signal::new(traj.times.clone(), values)?)
}

/// What to monitor a trajectory against.
pub enum MonitorSource {
    /// Group formulas from a scenario file.
    Scenario(std::path::PathBuf),
    /// A bare formula over the full stacked state in file order.
    Formula(String),
}

#[derive(Debug)]
pub struct MonitorOutcome {
    pub exit_code: i32,
    pub rhos: Vec<(String, f64)>,
    pub conjunction: f64,
}

/// Evaluates robust satisfaction of the formulas on a logged trajectory at
/// time `at`. Exit 0 when the conjunction is strictly positive, 1 when not,
/// 2 when the trajectory does not cover the monitoring horizon.
pub fn cmd_monitor(traj_path: &Path, source: MonitorSource, at: f64) -> Result<MonitorOutcome> {
    let table = read_trajectory(traj_path)?;
    let mut rhos: Vec<(String, f64)> = Vec::new();
    let mut horizon_short = false;
    let mut check = |name: String, formula: &stlcbf::stl::Formula,
                     signal: &stlcbf::stl::Signal|
     -> Result<()> {
        match eval_robust(formula, signal, at) {
            Ok(rho) => {
                rhos.push((name, rho));
                Ok(())
            }
            Err(e @ StlError::HorizonExceeded { .. }) => {
                eprintln!("{name}: {e}");
                horizon_short = true;
                Ok(())
            }
            Err(e) => bail!(e),
        }
    };
    match source {
        MonitorSource::Scenario(path) => {
            let scenario = Scenario::load(&path)?;
            for spec in &scenario.groups {
                let formula = scenario.group_formula(spec)?;
                let signal = table.stacked_signal(&spec.agents)?;
                check(spec.name.clone(), &formula, &signal)?;
            }
        }
        MonitorSource::Formula(text) => {
            let signal = table.full_signal()?;
            let env = SliceEnv::new(signal.dim());
            let formula = parse_formula(&text, &env)?;
            check("formula".into(), &formula, &signal)?;
        }
    }
    if horizon_short {
        return Ok(MonitorOutcome {
            exit_code: 2,
            rhos,
            conjunction: f64::NAN,
        });
    }
    let conjunction = rhos.iter().map(|(_, r)| *r).fold(f64::INFINITY, f64::min);
    for (name, rho) in &rhos {
        println!("rho[{name}] = {rho:.6}");
    }
    println!("rho[conjunction] = {conjunction:.6}");
    Ok(MonitorOutcome {
        exit_code: if conjunction > 0.0 { 0 } else { 1 },
        rhos,
        conjunction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Barrier,
    Paths,
    Inputs,
}

/// Renders a static SVG of the requested trajectory view.
pub fn cmd_plot(traj_path: &Path, out_path: &Path, kind: PlotKind) -> Result<i32> {
    let table = read_trajectory(traj_path)?;
    match kind {
        PlotKind::Barrier => {
            let series: Vec<svg::Series> = table
                .group_names
                .iter()
                .enumerate()
                .map(|(g, name)| svg::Series {
                    label: format!("b[{name}]"),
                    points: table
                        .times
                        .iter()
                        .zip(&table.barriers)
                        .map(|(&t, bs)| (t, bs[g]))
                        .collect(),
                })
                .collect();
            svg::line_chart("barrier evolution", "t [s]", "b(x(t), t)", &series, out_path)?;
        }
        PlotKind::Paths => {
            let series: Vec<svg::Series> = table
                .agent_ids
                .iter()
                .enumerate()
                .map(|(idx, id)| {
                    if table.states[0][idx].len() < 2 {
                        bail!("agent `{id}` has no planar position to plot");
                    }
                    Ok(svg::Series {
                        label: id.clone(),
                        points: table
                            .states
                            .iter()
                            .map(|row| (row[idx][0], row[idx][1]))
                            .collect(),
                    })
                })
                .collect::<Result<_>>()?;
            svg::path_chart("agent paths", &series, out_path)?;
        }
        PlotKind::Inputs => {
            let mut series = Vec::new();
            for (idx, id) in table.agent_ids.iter().enumerate() {
                for component in 0..table.inputs[0][idx].len() {
                    series.push(svg::Series {
                        label: format!("u[{id}][{component}]"),
                        points: table
                            .times
                            .iter()
                            .zip(&table.inputs)
                            .map(|(&t, row)| (t, row[idx][component]))
                            .collect(),
                    });
                }
            }
            svg::line_chart("control inputs", "t [s]", "u(t)", &series, out_path)?;
        }
    }
    println!("plot written to {}", out_path.display());
    Ok(0)
}
