//! Semantic properties of the composite barrier: under-approximation of the
//! minimum, nonnegativity transfer, concavity in the state, monotonicity in
//! time, and agreement of the analytic gradients with central differences.

use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stlcbf::barrier::{
    masked_softmin, BarrierTerm, CompositeBarrier, GammaFn, MaskSide, TermOrigin,
};
use stlcbf::stl::Predicate;

fn random_barrier(rng: &mut ChaCha8Rng, dim: usize) -> CompositeBarrier {
    let n_terms = rng.gen_range(2..=5);
    let terms: Vec<BarrierTerm> = (0..n_terms)
        .map(|_| {
            let predicate = if rng.gen_bool(0.5) {
                let w = DVector::from_fn(dim, |_, _| rng.gen_range(-2.0..2.0));
                Predicate::affine(w, rng.gen_range(-2.0..2.0))
            } else {
                let center = DVector::from_fn(dim, |_, _| rng.gen_range(-2.0..2.0));
                Predicate::centered_ball(center, rng.gen_range(0.5..3.0))
            };
            let g0 = rng.gen_range(-4.0..0.0);
            let ginf = g0 + rng.gen_range(0.0..3.0);
            let t_star = rng.gen_range(0.0..6.0);
            BarrierTerm {
                predicate,
                gamma: GammaFn::new(g0, ginf, t_star).unwrap(),
                deadline: rng.gen_range(2.0..10.0),
                origin: if rng.gen_bool(0.5) {
                    TermOrigin::Always
                } else {
                    TermOrigin::Eventually
                },
            }
        })
        .collect();
    let eta = rng.gen_range(1.0..25.0);
    let d = rng.gen_range(10.0..50.0);
    CompositeBarrier::new(terms, eta, d, dim).unwrap()
}

/// Distance from the nearest gamma kink, term deadline, ball center, or the
/// state-space origin; gradient checks stay away from all of them.
fn kink_distance(barrier: &CompositeBarrier, x: &DVector<f64>, t: f64) -> f64 {
    let mut dist = f64::INFINITY;
    for term in &barrier.terms {
        if term.gamma.t_star > 0.0 {
            dist = dist.min((t - term.gamma.t_star).abs());
        }
        dist = dist.min((t - term.deadline).abs());
        if let stlcbf::stl::PredicateKind::Ball { map, offset, .. } = &term.predicate.kind {
            dist = dist.min((map * x + offset).norm());
        }
    }
    dist.min(x.norm())
}

#[test]
fn composite_under_approximates_active_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..500 {
        let dim = rng.gen_range(1..=4);
        let barrier = random_barrier(&mut rng, dim);
        let x = DVector::from_fn(dim, |_, _| rng.gen_range(-4.0..4.0));
        let t = rng.gen_range(0.0..12.0);
        let mask = barrier.active_mask(t);
        let value = barrier.eval(&x, t);
        let mut min = barrier.state_bound - x.norm();
        for (term, &on) in barrier.terms.iter().zip(&mask) {
            if on {
                min = min.min(term.eval(&x, t));
            }
        }
        assert!(value <= min + 1e-12);
        if value >= 0.0 {
            for (term, &on) in barrier.terms.iter().zip(&mask) {
                assert!(!on || term.eval(&x, t) >= 0.0, "nonnegativity must transfer");
            }
        }
    }
}

#[test]
fn composite_is_concave_in_the_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..300 {
        let dim = rng.gen_range(1..=4);
        let barrier = random_barrier(&mut rng, dim);
        let x1 = DVector::from_fn(dim, |_, _| rng.gen_range(-4.0..4.0));
        let x2 = DVector::from_fn(dim, |_, _| rng.gen_range(-4.0..4.0));
        let lam: f64 = rng.gen_range(0.0..1.0);
        let t = rng.gen_range(0.0..12.0);
        let mix = &x1 * lam + &x2 * (1.0 - lam);
        let lhs = barrier.eval(&mix, t);
        let rhs = lam * barrier.eval(&x1, t) + (1.0 - lam) * barrier.eval(&x2, t);
        assert!(lhs >= rhs - 1e-9, "concavity violated: {lhs} < {rhs}");
    }
}

#[test]
fn value_is_non_increasing_between_switches() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..300 {
        let dim = rng.gen_range(1..=3);
        let barrier = random_barrier(&mut rng, dim);
        let x = DVector::from_fn(dim, |_, _| rng.gen_range(-3.0..3.0));
        // Pick an interval between consecutive switch times.
        let mut boundaries = vec![0.0];
        boundaries.extend(barrier.switch_times.iter().copied());
        let k = rng.gen_range(0..boundaries.len() - 1);
        let (lo, hi) = (boundaries[k], boundaries[k + 1]);
        let t1 = rng.gen_range(lo..hi);
        let t2 = rng.gen_range(t1..hi);
        assert!(barrier.eval(&x, t2) <= barrier.eval(&x, t1) + 1e-12);
    }
}

#[test]
fn deadline_switches_never_shrink_the_superlevel_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..300 {
        let dim = rng.gen_range(1..=3);
        let barrier = random_barrier(&mut rng, dim);
        let x = DVector::from_fn(dim, |_, _| rng.gen_range(-3.0..3.0));
        for s in barrier.deadline_switches() {
            let before = barrier.eval_masked(&x, s, &barrier.mask(s, MaskSide::LeftLimit));
            let after = barrier.eval(&x, s);
            assert!(after >= before - 1e-12, "value must jump up at {s}");
        }
    }
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let mut checked = 0;
    while checked < 200 {
        let dim = rng.gen_range(1..=4);
        let barrier = random_barrier(&mut rng, dim);
        let x = DVector::from_fn(dim, |_, _| rng.gen_range(-4.0..4.0));
        let t = rng.gen_range(0.05..12.0);
        if kink_distance(&barrier, &x, t) < 1e-3 {
            continue;
        }
        checked += 1;

        // Relative tolerance 1e-5 with an absolute floor covering the f64
        // cancellation noise of central differences at step 1e-6.
        let close = |analytic: f64, fd: f64| {
            (analytic - fd).abs() <= 1e-8 + 1e-5 * analytic.abs().max(fd.abs())
        };
        let grad = barrier.grad_x(&x, t);
        for i in 0..dim {
            let scale = x[i].abs().max(1.0);
            let h = 1e-6 * scale;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (barrier.eval(&xp, t) - barrier.eval(&xm, t)) / (2.0 * h);
            assert!(close(grad[i], fd), "grad[{i}] = {} vs fd {fd}", grad[i]);
        }

        let ht = 1e-6 * t.max(1.0);
        let fd_t = (barrier.eval(&x, t + ht) - barrier.eval(&x, t - ht)) / (2.0 * ht);
        let dt = barrier.partial_t(&x, t);
        assert!(close(dt, fd_t), "partial_t {dt} vs fd {fd_t}");
    }
}

proptest! {
    #[test]
    fn softmin_bounded_by_min_and_tightens_with_eta(
        values in proptest::collection::vec(-10.0f64..10.0, 1..8),
        eta in 0.5f64..100.0,
    ) {
        let mask = vec![true; values.len()];
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let s = masked_softmin(&values, &mask, eta);
        prop_assert!(s <= min + 1e-12);
        let tighter = masked_softmin(&values, &mask, eta * 5.0);
        prop_assert!(min - tighter <= min - s + 1e-12);
    }

    #[test]
    fn softmin_gap_is_at_most_log_count_over_eta(
        values in proptest::collection::vec(-10.0f64..10.0, 1..8),
        eta in 0.5f64..100.0,
    ) {
        let mask = vec![true; values.len()];
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let s = masked_softmin(&values, &mask, eta);
        prop_assert!(min - s <= (values.len() as f64).ln() / eta + 1e-12);
    }
}
