use nalgebra::DMatrix;
use proptest::prelude::*;

use dcmg_lmi::{solve, verify, LmiProblem, LmiSolution, MatrixExpr, Relation, SolveOutcome};

fn lyapunov(a: &DMatrix<f64>) -> LmiProblem {
    let n = a.nrows();
    let mut prob = LmiProblem::new(n, 1e-6).unwrap();
    prob.add_constraint("P>0", MatrixExpr::new(n).p_scaled(1.0), Relation::Psd, true)
        .unwrap();
    prob.add_constraint("PA+A'P<0", MatrixExpr::new(n).lyapunov(a), Relation::Nsd, true)
        .unwrap();
    prob
}

/// `-(G Gᵀ + I) + (S - Sᵀ)`: Hurwitz for every G and S.
fn stable(n: usize, g: &[f64], s: &[f64]) -> DMatrix<f64> {
    let g = DMatrix::from_row_slice(n, n, &g[..n * n]);
    let s = DMatrix::from_row_slice(n, n, &s[..n * n]);
    -(&g * g.transpose() + DMatrix::identity(n, n)) + (&s - s.transpose())
}

fn entries() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, 16)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stable_matrices_certify(n in 1usize..=4, g in entries(), s in entries()) {
        let a = stable(n, &g, &s);
        let prob = lyapunov(&a);
        let SolveOutcome::Feasible(sol) = solve(&prob, 1e-9, 150).unwrap() else {
            panic!("stable matrix not certified");
        };
        prop_assert!(verify(&prob, &sol).unwrap().passes(1e-9));
    }

    #[test]
    fn unstable_matrices_never_certify(n in 1usize..=4, g in entries(), s in entries(), shift in 0.1..5.0f64) {
        // Move the rightmost eigenvalue into the right half plane.
        let a = stable(n, &g, &s);
        let alpha = a.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        let a = a + DMatrix::identity(n, n) * (shift - alpha);
        let out = solve(&lyapunov(&a), 1e-9, 150).unwrap();
        prop_assert!(!out.is_feasible(), "{out:?}");
    }

    #[test]
    fn verdict_is_scale_invariant(n in 1usize..=3, g in entries(), s in entries(), c in 0.01..100.0f64) {
        let a = stable(n, &g, &s);
        let base = solve(&lyapunov(&a), 1e-9, 150).unwrap().is_feasible();
        let scaled = solve(&lyapunov(&(a * c)), 1e-9, 150).unwrap().is_feasible();
        prop_assert_eq!(base, scaled);
    }

    #[test]
    fn solves_are_deterministic(n in 1usize..=3, g in entries(), s in entries()) {
        let prob = lyapunov(&stable(n, &g, &s));
        let first = solve(&prob, 1e-9, 150).unwrap();
        let second = solve(&prob, 1e-9, 150).unwrap();
        match (first, second) {
            (SolveOutcome::Feasible(x), SolveOutcome::Feasible(y)) => prop_assert_eq!(x.p, y.p),
            (x, y) => prop_assert!(false, "{x:?} / {y:?}"),
        }
    }
}

#[test]
fn verifier_reports_shifted_witness() {
    let a = DMatrix::from_row_slice(2, 2, &[-1.0, 3.0, 0.0, -2.0]);
    let mut prob = LmiProblem::new(2, 1e-6).unwrap();
    prob.add_constraint("P<=I", MatrixExpr::new(2).p_scaled(1.0).constant_identity(-1.0), Relation::Nsd, false)
        .unwrap();
    prob.add_constraint("PA+A'P<0", MatrixExpr::new(2).lyapunov(&a), Relation::Nsd, true)
        .unwrap();
    let SolveOutcome::Feasible(sol) = solve(&prob, 1e-9, 150).unwrap() else {
        panic!("expected a witness");
    };
    let top = sol.p.clone().symmetric_eigenvalues().max();
    let shifted = LmiSolution::candidate(&sol.p + DMatrix::identity(2, 2) * 10.0, vec![]);
    let rep = verify(&prob, &shifted).unwrap();
    let bound = &rep.constraints[0];
    assert!((bound.violation - (top + 9.0)).abs() < 1e-9, "{rep:?}");
}

#[test]
fn zero_witness_fails_strict_positivity_by_the_margin() {
    let prob = lyapunov(&DMatrix::from_row_slice(1, 1, &[-1.0]));
    let rep = verify(&prob, &LmiSolution::candidate(DMatrix::zeros(1, 1), vec![])).unwrap();
    assert!((rep.max_violation - 1e-6).abs() < 1e-15);
}
