//! Structural properties of the monitor: conjunction as exact minimum,
//! soundness of the robustness sign, and print/parse round trips.

use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stlcbf::stl::{
    eval_boolean, eval_robust, parse_formula, BoolFormula, Formula, Interval, Predicate, Signal,
    SliceEnv,
};

fn v(entries: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(entries)
}

fn ramp_signal(rng: &mut ChaCha8Rng, dim: usize, samples: usize, span: f64) -> Signal {
    let times: Vec<f64> = (0..samples)
        .map(|i| i as f64 * span / (samples - 1) as f64)
        .collect();
    let values: Vec<DVector<f64>> = times
        .iter()
        .map(|_| DVector::from_fn(dim, |_, _| rng.gen_range(-3.0..3.0)))
        .collect();
    Signal::new(times, values).unwrap()
}

fn random_psi(rng: &mut ChaCha8Rng, dim: usize) -> BoolFormula {
    let n = rng.gen_range(1..=2);
    let conjuncts = (0..n)
        .map(|_| {
            if rng.gen_bool(0.5) {
                let w = DVector::from_fn(dim, |_, _| rng.gen_range(-2.0..2.0));
                Predicate::affine(w, rng.gen_range(-2.0..2.0))
            } else {
                let center = DVector::from_fn(dim, |_, _| rng.gen_range(-2.0..2.0));
                Predicate::centered_ball(center, rng.gen_range(0.5..3.0))
            }
        })
        .collect();
    BoolFormula::new(conjuncts).unwrap()
}

fn random_temporal(rng: &mut ChaCha8Rng, dim: usize, max_b: f64) -> Formula {
    let a = rng.gen_range(0.0..max_b / 2.0);
    let b = rng.gen_range(a.max(0.1)..max_b);
    let iv = Interval::new(a, b).unwrap();
    match rng.gen_range(0..3) {
        0 => Formula::Always(iv, random_psi(rng, dim)),
        1 => Formula::Eventually(iv, random_psi(rng, dim)),
        _ => Formula::Until(iv, random_psi(rng, dim), random_psi(rng, dim)),
    }
}

fn random_formula(rng: &mut ChaCha8Rng, dim: usize, max_b: f64) -> Formula {
    if rng.gen_bool(0.4) {
        Formula::And(
            Box::new(random_temporal(rng, dim, max_b)),
            Box::new(random_temporal(rng, dim, max_b)),
        )
    } else {
        random_temporal(rng, dim, max_b)
    }
}

#[test]
fn conjunction_is_exact_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..300 {
        let dim = rng.gen_range(1..=3);
        let signal = ramp_signal(&mut rng, dim, 12, 6.0);
        let f1 = random_temporal(&mut rng, dim, 5.0);
        let f2 = random_temporal(&mut rng, dim, 5.0);
        let both = Formula::And(Box::new(f1.clone()), Box::new(f2.clone()));
        let r1 = eval_robust(&f1, &signal, 0.0).unwrap();
        let r2 = eval_robust(&f2, &signal, 0.0).unwrap();
        let r = eval_robust(&both, &signal, 0.0).unwrap();
        assert_eq!(r, r1.min(r2));
    }
}

#[test]
fn robustness_sign_is_sound_for_boolean_semantics() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut positive = 0;
    let mut negative = 0;
    for _ in 0..500 {
        let dim = rng.gen_range(1..=3);
        let signal = ramp_signal(&mut rng, dim, 15, 8.0);
        let formula = random_formula(&mut rng, dim, 6.0);
        let rho = eval_robust(&formula, &signal, 0.0).unwrap();
        let sat = eval_boolean(&formula, &signal, 0.0).unwrap();
        if rho > 1e-9 {
            positive += 1;
            assert!(sat, "rho = {rho} > 0 must imply satisfaction: {formula}");
        } else if rho < -1e-9 {
            negative += 1;
            assert!(!sat, "rho = {rho} < 0 must imply violation: {formula}");
        }
    }
    assert!(positive > 20 && negative > 20, "generator too one-sided");
}

#[test]
fn printed_formulas_reparse_structurally_equal() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let env = SliceEnv::new(2);
    for _ in 0..200 {
        let formula = random_formula(&mut rng, 2, 6.0);
        let printed = formula.to_string();
        let reparsed = parse_formula(&printed, &env)
            .unwrap_or_else(|e| panic!("`{printed}` failed to reparse: {e}"));
        // Parsing assigns fresh labels; compare everything else.
        let mut relabelled = formula.clone();
        strip_labels(&mut relabelled);
        let mut reparsed_stripped = reparsed;
        strip_labels(&mut reparsed_stripped);
        assert_eq!(relabelled, reparsed_stripped, "`{printed}`");
    }
}

fn strip_labels(formula: &mut Formula) {
    match formula {
        Formula::Always(_, psi) | Formula::Eventually(_, psi) => {
            psi.conjuncts.iter_mut().for_each(|p| p.label.clear())
        }
        Formula::Until(_, lhs, rhs) => {
            lhs.conjuncts.iter_mut().for_each(|p| p.label.clear());
            rhs.conjuncts.iter_mut().for_each(|p| p.label.clear());
        }
        Formula::And(l, r) => {
            strip_labels(l);
            strip_labels(r);
        }
    }
}

proptest! {
    /// Window endpoints are always part of the evaluation instants, so a
    /// formula over a constant signal reduces to the predicate value.
    #[test]
    fn constant_signal_reduces_to_predicate(
        value in -5.0f64..5.0,
        a in 0.0f64..3.0,
        width in 0.1f64..3.0,
    ) {
        let signal = Signal::new(
            vec![0.0, 10.0],
            vec![v(&[value]), v(&[value])],
        ).unwrap();
        let iv = Interval::new(a, a + width).unwrap();
        let psi = BoolFormula::new(vec![Predicate::affine(v(&[1.0]), 0.0)]).unwrap();
        let g = Formula::Always(iv, psi.clone());
        let f = Formula::Eventually(iv, psi);
        prop_assert_eq!(eval_robust(&g, &signal, 0.0).unwrap(), value);
        prop_assert_eq!(eval_robust(&f, &signal, 0.0).unwrap(), value);
    }
}
