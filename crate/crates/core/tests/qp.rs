mod common;

use dic_core::qp::{self, kkt_residuals, QpProblem, QpStatus, SolverSettings};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn solve(p: &QpProblem) -> qp::QpSolution {
    qp::solve(p, &SolverSettings::default(), None).unwrap()
}

#[test]
fn projection_onto_half_line() {
    // min x^2 s.t. x >= 1
    let mut p = QpProblem::new(1);
    p.add_quadratic(0, 0, 2.0);
    p.add_ineq(&[(0, 1.0)], 1.0, f64::INFINITY);
    let sol = solve(&p);
    assert_eq!(sol.status, QpStatus::Optimal);
    assert!((sol.x[0] - 1.0).abs() < 1e-6, "{:?}", sol.x);
    assert!((sol.y_ineq[0] + 2.0).abs() < 1e-5);
}

fn symmetric_example() -> QpProblem {
    // min (x-3)^2 + (y-3)^2 s.t. x + y = 2, x, y >= 0
    let mut p = QpProblem::new(2);
    p.add_quadratic(0, 0, 2.0);
    p.add_quadratic(1, 1, 2.0);
    p.linear = vec![-6.0, -6.0];
    p.add_eq(&[(0, 1.0), (1, 1.0)], 2.0);
    p.add_ineq(&[(0, 1.0)], 0.0, f64::INFINITY);
    p.add_ineq(&[(1, 1.0)], 0.0, f64::INFINITY);
    p
}

#[test]
fn equality_with_symmetry() {
    let p = symmetric_example();
    let sol = solve(&p);
    assert_eq!(sol.status, QpStatus::Optimal);
    assert!((sol.x[0] - 1.0).abs() < 1e-6 && (sol.x[1] - 1.0).abs() < 1e-6, "{:?}", sol.x);
    // Hand KKT point: 2(x - 3) + y = 0 gives y = 4, bounds inactive.
    let exact = kkt_residuals(&p, &[1.0, 1.0], &[4.0], &[0.0, 0.0]);
    assert!(exact.max() <= 1e-9);
    assert!(kkt_residuals(&p, &sol.x, &sol.y_eq, &sol.y_ineq).max() <= 1e-5);
}

#[test]
fn suboptimal_point_has_only_dual_residual() {
    let p = symmetric_example();
    let r = kkt_residuals(&p, &[2.0, 0.0], &[0.0], &[0.0, 0.0]);
    assert_eq!(r.primal, 0.0);
    assert!(r.dual > 0.0);
}

#[test]
fn matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..40 {
        let n = rng.random_range(2..=20);
        let meq = rng.random_range(0..=2.min(n - 1));
        let mineq = rng.random_range(0..=10);
        let (p, _) = common::random_qp(&mut rng, n, meq, mineq);
        let oracle = common::brute_force(&p).expect("oracle found no KKT point");
        let sol = solve(&p);
        assert_eq!(sol.status, QpStatus::Optimal, "case {case}");
        let gap = (sol.objective - oracle.objective).abs();
        assert!(gap <= 1e-5 * (1.0 + oracle.objective.abs()), "case {case}: {} vs {}", sol.objective, oracle.objective);
        for (a, b) in sol.x.iter().zip(&oracle.x) {
            assert!((a - b).abs() <= 1e-4 * (1.0 + b.abs()), "case {case}: {:?} vs {:?}", sol.x, oracle.x);
        }
    }
}

#[test]
fn optimum_beats_random_feasible_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let (p, x0) = common::random_qp(&mut rng, 15, 2, 8);
        let sol = solve(&p);
        assert_eq!(sol.status, QpStatus::Optimal);
        let slack = 1e-5 * (1.0 + sol.objective.abs());
        for x in common::random_feasible_points(&mut rng, &p, &x0, 100) {
            assert!(sol.objective <= p.objective(&x) + slack);
        }
    }
}

#[test]
fn duality_gap_closes() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let (p, _) = common::random_qp(&mut rng, 12, 1, 6);
        let sol = solve(&p);
        assert_eq!(sol.status, QpStatus::Optimal);
        let gap = common::duality_gap(&p, &sol.x, &sol.y_eq, &sol.y_ineq);
        assert!(gap.abs() <= 1e-5 * (1.0 + sol.objective.abs()), "gap {gap}");
    }
}

#[test]
fn warm_start_keeps_the_solution() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let settings = SolverSettings { polish: false, ..Default::default() };
    for _ in 0..10 {
        let (p, _) = common::random_qp(&mut rng, 20, 2, 10);
        let cold = qp::solve(&p, &settings, None).unwrap();
        let warm = qp::solve(&p, &settings, Some(&cold.warm_start())).unwrap();
        assert_eq!(warm.status, QpStatus::Optimal);
        assert!(warm.iterations <= cold.iterations, "{} > {}", warm.iterations, cold.iterations);
        assert!((warm.objective - cold.objective).abs() <= 1e-5 * (1.0 + cold.objective.abs()));
    }
}

#[test]
fn detects_primal_infeasibility() {
    let mut p = QpProblem::new(2);
    p.add_quadratic(0, 0, 1.0);
    p.add_ineq(&[(0, 1.0), (1, 1.0)], 2.0, f64::INFINITY);
    p.add_ineq(&[(0, 1.0), (1, 1.0)], f64::NEG_INFINITY, 1.0);
    let sol = solve(&p);
    assert_eq!(sol.status, QpStatus::Infeasible);
    let cert = sol.certificate.expect("certificate");
    assert!(cert[0] < 0.0 && cert[1] > 0.0, "{cert:?}");

    let mut p = QpProblem::new(2);
    p.add_eq(&[(0, 1.0), (1, 1.0)], 1.0);
    p.add_eq(&[(0, 1.0), (1, 1.0)], 2.0);
    assert_eq!(solve(&p).status, QpStatus::Infeasible);
}

#[test]
fn iteration_limit_returns_last_iterate() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (p, _) = common::random_qp(&mut rng, 20, 2, 10);
    let settings = SolverSettings { max_iter: 3, polish: false, ..Default::default() };
    let sol = qp::solve(&p, &settings, None).unwrap();
    assert_eq!(sol.status, QpStatus::MaxIter);
    assert_eq!(sol.iterations, 3);
    assert_eq!(sol.x.len(), 20);
}

#[test]
fn repeated_solves_are_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (p, _) = common::random_qp(&mut rng, 30, 3, 10);
    let a = solve(&p);
    let b = solve(&p);
    assert_eq!(a, b);
}

#[test]
fn text_export_round_trips_through_a_file() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (p, _) = common::random_qp(&mut rng, 8, 1, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.qp");
    qp::io::export(&p, &path).unwrap();
    let back = qp::io::import(&path).unwrap();
    assert_eq!(back, p);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn solutions_certify_themselves(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=25);
        let meq = rng.random_range(0..=3.min(n - 1));
        let mineq = rng.random_range(0..=12);
        let (p, _) = common::random_qp(&mut rng, n, meq, mineq);
        let sol = solve(&p);
        prop_assert_eq!(sol.status, QpStatus::Optimal);
        prop_assert!(kkt_residuals(&p, &sol.x, &sol.y_eq, &sol.y_ineq).max() <= 1e-5);
    }

    #[test]
    fn argmin_is_invariant_to_cost_scaling(seed in any::<u64>(), exp in -3i32..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, _) = common::random_qp(&mut rng, 10, 1, 6);
        let c = 10f64.powi(exp);
        let mut scaled = p.clone();
        scaled.quadratic.entries.iter_mut().for_each(|e| e.2 *= c);
        scaled.linear.iter_mut().for_each(|v| *v *= c);
        let a = solve(&p);
        let b = solve(&scaled);
        prop_assert_eq!(b.status, QpStatus::Optimal);
        for (u, v) in a.x.iter().zip(&b.x) {
            prop_assert!((u - v).abs() <= 1e-5 * (1.0 + u.abs()), "{:?} vs {:?}", a.x, b.x);
        }
    }
}
