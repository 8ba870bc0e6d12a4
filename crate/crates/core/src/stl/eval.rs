//! Boolean and robust semantics over sampled signals.
//!
//! Temporal windows quantify over the sample instants falling inside the
//! window plus the two interpolated window endpoints. This keeps the monitor
//! purely sample-based while bounding the discretization error of the
//! underlying continuous-time semantics.

use super::ast::{BoolFormula, Formula, Signal};
use super::StlError;

fn check_span(formula: &Formula, signal: &Signal, t: f64) -> Result<(), StlError> {
    let needed = t + formula.horizon();
    if t < signal.start() || needed > signal.end() + 1e-12 {
        return Err(StlError::HorizonExceeded {
            needed,
            span_start: signal.start(),
            span_end: signal.end(),
        });
    }
    Ok(())
}

fn rho_psi(psi: &BoolFormula, signal: &Signal, tau: f64) -> f64 {
    let x = signal.value_at(tau);
    psi.conjuncts
        .iter()
        .map(|p| p.eval(&x))
        .fold(f64::INFINITY, f64::min)
}

fn sat_psi(psi: &BoolFormula, signal: &Signal, tau: f64) -> bool {
    let x = signal.value_at(tau);
    psi.conjuncts.iter().all(|p| p.eval(&x) >= 0.0)
}

/// Robustness degree of `formula` over `signal` at time `t`.
pub fn eval_robust(formula: &Formula, signal: &Signal, t: f64) -> Result<f64, StlError> {
    check_span(formula, signal, t)?;
    eval_robust_unchecked(formula, signal, t)
}

fn eval_robust_unchecked(formula: &Formula, signal: &Signal, t: f64) -> Result<f64, StlError> {
    let rho = match formula {
        Formula::Always(iv, psi) => {
            let instants = signal.window_instants(t + iv.a, t + iv.b);
            if instants.is_empty() {
                return Err(StlError::EmptyWindow { lo: t + iv.a, hi: t + iv.b });
            }
            instants
                .iter()
                .map(|&tau| rho_psi(psi, signal, tau))
                .fold(f64::INFINITY, f64::min)
        }
        Formula::Eventually(iv, psi) => {
            let instants = signal.window_instants(t + iv.a, t + iv.b);
            if instants.is_empty() {
                return Err(StlError::EmptyWindow { lo: t + iv.a, hi: t + iv.b });
            }
            instants
                .iter()
                .map(|&tau| rho_psi(psi, signal, tau))
                .fold(f64::NEG_INFINITY, f64::max)
        }
        Formula::Until(iv, lhs, rhs) => {
            let instants = signal.window_instants(t + iv.a, t + iv.b);
            if instants.is_empty() {
                return Err(StlError::EmptyWindow { lo: t + iv.a, hi: t + iv.b });
            }
            let mut best = f64::NEG_INFINITY;
            for &tau in &instants {
                let rho_rhs = rho_psi(rhs, signal, tau);
                let rho_lhs = signal
                    .window_instants(t, tau)
                    .iter()
                    .map(|&u| rho_psi(lhs, signal, u))
                    .fold(f64::INFINITY, f64::min);
                best = best.max(rho_rhs.min(rho_lhs));
            }
            best
        }
        Formula::And(l, r) => eval_robust_unchecked(l, signal, t)?
            .min(eval_robust_unchecked(r, signal, t)?),
    };
    Ok(rho)
}

/// Boolean satisfaction of `formula` over `signal` at time `t`, evaluated by
/// its own recursion rather than by the sign of the robustness degree.
pub fn eval_boolean(formula: &Formula, signal: &Signal, t: f64) -> Result<bool, StlError> {
    check_span(formula, signal, t)?;
    eval_boolean_unchecked(formula, signal, t)
}

fn eval_boolean_unchecked(formula: &Formula, signal: &Signal, t: f64) -> Result<bool, StlError> {
    let sat = match formula {
        Formula::Always(iv, psi) => signal
            .window_instants(t + iv.a, t + iv.b)
            .iter()
            .all(|&tau| sat_psi(psi, signal, tau)),
        Formula::Eventually(iv, psi) => signal
            .window_instants(t + iv.a, t + iv.b)
            .iter()
            .any(|&tau| sat_psi(psi, signal, tau)),
        Formula::Until(iv, lhs, rhs) => signal
            .window_instants(t + iv.a, t + iv.b)
            .iter()
            .any(|&tau| {
                sat_psi(rhs, signal, tau)
                    && signal
                        .window_instants(t, tau)
                        .iter()
                        .all(|&u| sat_psi(lhs, signal, u))
            }),
        Formula::And(l, r) => {
            eval_boolean_unchecked(l, signal, t)? && eval_boolean_unchecked(r, signal, t)?
        }
    };
    Ok(sat)
}
