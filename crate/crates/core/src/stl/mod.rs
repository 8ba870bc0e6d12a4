//! STL fragment: AST, concrete-syntax parser, and monitoring semantics.

mod ast;
mod eval;
mod parser;

pub use ast::{BoolFormula, Formula, Interval, Predicate, PredicateKind, Signal, VecExpr, VecTerm};
pub use eval::{eval_boolean, eval_robust};
pub use parser::{parse_formula, SliceEnv};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StlError {
    #[error("parse error at byte {position}: {message}")]
    Parse { message: String, position: usize },
    #[error("invalid interval [{a},{b}]: need 0 <= a <= b and b > 0")]
    InvalidInterval { a: f64, b: f64 },
    #[error("a predicate conjunction needs at least one predicate")]
    EmptyConjunction,
    #[error("invalid signal: {0}")]
    InvalidSignal(String),
    #[error("slice `{name}` at {start}..{} exceeds group dimension {group_dim}", start + len)]
    InvalidSlice {
        name: String,
        start: usize,
        len: usize,
        group_dim: usize,
    },
    #[error("name `{0}` declared twice")]
    DuplicateName(String),
    #[error("monitoring horizon {needed} outside the sampled span [{span_start}, {span_end}]")]
    HorizonExceeded {
        needed: f64,
        span_start: f64,
        span_end: f64,
    },
    #[error("no evaluation instants inside window [{lo}, {hi}]")]
    EmptyWindow { lo: f64, hi: f64 },
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn v(entries: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(entries)
    }

    fn constant_signal(value: &[f64], end: f64) -> Signal {
        Signal::new(vec![0.0, end], vec![v(value), v(value)]).unwrap()
    }

    #[test]
    fn parses_always_ball_with_literal_center() {
        let env = SliceEnv::new(2);
        let f = parse_formula("G[7.5,10](ball([0,0], 5))", &env).unwrap();
        match &f {
            Formula::Always(iv, psi) => {
                assert_eq!((iv.a, iv.b), (7.5, 10.0));
                assert_eq!(psi.conjuncts.len(), 1);
                let p = &psi.conjuncts[0];
                assert_eq!(p.h_opt, 5.0);
                assert_eq!(p.eval(&v(&[0.0, 0.0])), 5.0);
                assert_eq!(p.eval(&v(&[3.0, 4.0])), 0.0);
            }
            other => panic!("expected Always, got {other:?}"),
        }
    }

    #[test]
    fn parses_eventually_affine() {
        let env = SliceEnv::new(1);
        let f = parse_formula("F[0,1](affine([1],0))", &env).unwrap();
        match &f {
            Formula::Eventually(iv, psi) => {
                assert_eq!((iv.a, iv.b), (0.0, 1.0));
                assert_eq!(psi.conjuncts[0].eval(&v(&[2.5])), 2.5);
            }
            other => panic!("expected Eventually, got {other:?}"),
        }
    }

    #[test]
    fn rejects_reversed_interval() {
        let env = SliceEnv::new(1);
        let err = parse_formula("G[2,1](affine([1],0))", &env).unwrap_err();
        assert!(matches!(err, StlError::InvalidInterval { a, b } if a == 2.0 && b == 1.0));
    }

    #[test]
    fn rejects_zero_deadline_interval() {
        let env = SliceEnv::new(1);
        let err = parse_formula("F[0,0](affine([1],0))", &env).unwrap_err();
        assert!(matches!(err, StlError::InvalidInterval { .. }));
    }

    #[test]
    fn rejects_fragment_violations() {
        let env = SliceEnv::new(1);
        for text in [
            "G[0,1](G[0,1](affine([1],0)))",
            "G[0,1](affine([1],0)) || F[0,1](affine([1],0))",
            "!G[0,1](affine([1],0))",
        ] {
            assert!(
                matches!(parse_formula(text, &env), Err(StlError::Parse { .. })),
                "`{text}` should be rejected"
            );
        }
    }

    #[test]
    fn parses_named_slices_and_constants() {
        let mut env = SliceEnv::new(6);
        env.add_slice("p1", 0, 2).unwrap();
        env.add_slice("p2", 2, 2).unwrap();
        env.add_constant("px", v(&[0.8, 0.0])).unwrap();
        let f = parse_formula("G[15,90](ball(p1 + px - p2, 0.33))", &env).unwrap();
        let p = &f.predicates()[0];
        // h = 0.33 - ||p1 + px - p2||
        let x = v(&[0.0, 0.0, 0.8, 0.0, 1.0, 1.0]);
        assert!((p.eval(&x) - 0.33).abs() < 1e-12);
        let x = v(&[0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        assert!((p.eval(&x) - (0.33 - 0.8)).abs() < 1e-12);
    }

    #[test]
    fn until_operands_stay_boolean() {
        let env = SliceEnv::new(1);
        let f = parse_formula("affine([1],0) U[1,2] affine([-1],3)", &env).unwrap();
        match f {
            Formula::Until(iv, lhs, rhs) => {
                assert_eq!((iv.a, iv.b), (1.0, 2.0));
                assert_eq!(lhs.conjuncts.len(), 1);
                assert_eq!(rhs.conjuncts.len(), 1);
            }
            other => panic!("expected Until, got {other:?}"),
        }
        assert!(parse_formula("G[0,1](affine([1],0)) U[1,2] affine([1],0)", &env).is_err());
    }

    #[test]
    fn robust_constant_signal_ball_boundary() {
        let env = SliceEnv::new(2);
        let f = parse_formula("G[0,1](ball([0,0], 5))", &env).unwrap();
        let s = constant_signal(&[3.0, 4.0], 2.0);
        assert_eq!(eval_robust(&f, &s, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn robust_eventually_over_ramp() {
        // s(t) = t sampled at {0, 0.5, 1, 1.5, 2}; best value of x - 1.2 in
        // the window [0, 1] is at the right endpoint.
        let times = vec![0.0, 0.5, 1.0, 1.5, 2.0];
        let values = times.iter().map(|&t| v(&[t])).collect();
        let s = Signal::new(times, values).unwrap();
        let env = SliceEnv::new(1);
        let f = parse_formula("F[0,1](affine([1],-1.2))", &env).unwrap();
        let rho = eval_robust(&f, &s, 0.0).unwrap();
        assert!((rho - (-0.2)).abs() < 1e-12);
    }

    #[test]
    fn boolean_matches_examples() {
        let env = SliceEnv::new(2);
        let f = parse_formula("G[0,1](ball([0,0], 5))", &env).unwrap();
        let inside = constant_signal(&[0.0, 0.0], 2.0);
        let outside = constant_signal(&[10.0, 0.0], 2.0);
        assert!(eval_boolean(&f, &inside, 0.0).unwrap());
        assert!(!eval_boolean(&f, &outside, 0.0).unwrap());
    }

    #[test]
    fn horizon_violation_reported() {
        let env = SliceEnv::new(1);
        let f = parse_formula("G[0,5](affine([1],0))", &env).unwrap();
        let s = constant_signal(&[1.0], 2.0);
        assert!(matches!(
            eval_robust(&f, &s, 0.0),
            Err(StlError::HorizonExceeded { .. })
        ));
    }

    #[test]
    fn print_parse_round_trip() {
        let mut env = SliceEnv::new(4);
        env.add_slice("p1", 0, 2).unwrap();
        env.add_slice("p2", 2, 2).unwrap();
        env.add_constant("px", v(&[0.8, 0.0])).unwrap();
        for text in [
            "G[7.5,10](ball([0,0,0,0], 5))",
            "G[15,90](ball(p1 + px - p2, 0.33)) && F[0,1](affine(p1:[1,0] - p2:[0,1], -0.25))",
            "ball(p1 - p2, 1) & affine([1,0,0,0], 0.5) U[1,2] ball(p2, 0.125)",
        ] {
            let f = parse_formula(text, &env).unwrap();
            let printed = f.to_string();
            let reparsed = parse_formula(&printed, &env)
                .unwrap_or_else(|e| panic!("reparse of `{printed}` failed: {e}"));
            // Labels are assigned in parse order and match; compare whole trees.
            assert_eq!(f, reparsed, "round trip through `{printed}`");
        }
    }

    #[test]
    fn robust_sign_implies_boolean() {
        // Randomized cross-check of the soundness link on ramp signals.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let env = SliceEnv::new(1);
        for _ in 0..200 {
            let a: f64 = rng.gen_range(0.0..1.0);
            let b: f64 = a + rng.gen_range(0.1..1.5);
            let w: f64 = rng.gen_range(-2.0..2.0);
            let beta: f64 = rng.gen_range(-2.0..2.0);
            let op = rng.gen_range(0..2);
            let text = if op == 0 {
                format!("G[{a},{b}](affine([{w}],{beta}))")
            } else {
                format!("F[{a},{b}](affine([{w}],{beta}))")
            };
            let f = parse_formula(&text, &env).unwrap();
            let times: Vec<f64> = (0..10).map(|i| i as f64 * 0.35).collect();
            let values = times.iter().map(|_| v(&[rng.gen_range(-3.0..3.0)])).collect();
            let s = Signal::new(times, values).unwrap();
            let rho = eval_robust(&f, &s, 0.0).unwrap();
            let sat = eval_boolean(&f, &s, 0.0).unwrap();
            if rho > 1e-12 {
                assert!(sat, "{text}: rho={rho} but boolean false");
            }
            if rho < -1e-12 {
                assert!(!sat, "{text}: rho={rho} but boolean true");
            }
        }
    }
}
