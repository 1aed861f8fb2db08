//! Independent re-evaluation of a candidate point against every constraint.
//!
//! Nothing here touches solver state: each constraint expression is evaluated
//! from scratch and its extreme eigenvalue taken with a dense symmetric
//! eigensolver.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::LmiError;
use crate::problem::{LmiProblem, LmiSolution, Relation, Sign};

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintResidual {
    pub label: String,
    /// Amount by which the constraint (including its margin) is violated.
    /// Negative values are slack.
    pub violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub constraints: Vec<ConstraintResidual>,
    pub max_violation: f64,
}

impl ResidualReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_violation <= tol
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn extreme_eigenvalues(m: &DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 1 {
        return (m[(0, 0)], m[(0, 0)]);
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Evaluates every constraint (and every sign restriction) of `problem` at
/// `candidate`.
pub fn verify(problem: &LmiProblem, candidate: &LmiSolution) -> Result<ResidualReport, LmiError> {
    let n = problem.dim();
    if candidate.p.nrows() != n || candidate.p.ncols() != n {
        return Err(LmiError::ShapeMismatch {
            what: "candidate P".into(),
            expected: n,
            found: candidate.p.nrows(),
        });
    }
    if candidate.scalars.len() != problem.scalars().len() {
        return Err(LmiError::ShapeMismatch {
            what: "candidate scalars".into(),
            expected: problem.scalars().len(),
            found: candidate.scalars.len(),
        });
    }
    let eps = problem.margin();
    let p = symmetrize(&candidate.p);
    let mut out = Vec::with_capacity(problem.constraints().len() + problem.scalars().len());
    for c in problem.constraints() {
        let value = c.expr.evaluate(&p, &candidate.scalars);
        let (lo, hi) = extreme_eigenvalues(&value);
        let base = match c.relation {
            Relation::Nsd => hi,
            Relation::Psd => -lo,
        };
        let violation = if c.strict { base + eps } else { base };
        out.push(ConstraintResidual {
            label: c.label.clone(),
            violation,
        });
    }
    for (var, x) in problem.scalars().iter().zip(&candidate.scalars) {
        let violation = match var.sign {
            Sign::Free => continue,
            Sign::Positive => eps - x,
            Sign::NonNegative => -x,
        };
        out.push(ConstraintResidual {
            label: format!("sign({})", var.name),
            violation,
        });
    }
    let max_violation = if out.is_empty() {
        0.0
    } else {
        out.iter().map(|r| r.violation).fold(f64::NEG_INFINITY, f64::max)
    };
    Ok(ResidualReport {
        constraints: out,
        max_violation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::MatrixExpr;

    #[test]
    fn zero_p_against_strict_positivity_reports_margin() {
        let eps = 1e-3;
        let mut prob = LmiProblem::new(3, eps).unwrap();
        prob.add_constraint("P>0", MatrixExpr::new(3).p_scaled(1.0), Relation::Psd, true)
            .unwrap();
        let cand = LmiSolution::candidate(DMatrix::zeros(3, 3), vec![]);
        let rep = verify(&prob, &cand).unwrap();
        assert!((rep.max_violation - eps).abs() < 1e-15);
    }

    #[test]
    fn shifted_p_against_fixed_upper_bound() {
        // P ⪯ t·I with t = 2 held constant; P = 2I is tight, P + 10I violates by 10.
        let mut prob = LmiProblem::new(2, 1e-6).unwrap();
        let expr = MatrixExpr::new(2).p_scaled(1.0).constant_identity(-2.0);
        prob.add_constraint("P<=tI", expr, Relation::Nsd, false).unwrap();
        let tight = LmiSolution::candidate(DMatrix::identity(2, 2) * 2.0, vec![]);
        assert!(verify(&prob, &tight).unwrap().max_violation.abs() < 1e-12);
        let shifted = LmiSolution::candidate(DMatrix::identity(2, 2) * 12.0, vec![]);
        let rep = verify(&prob, &shifted).unwrap();
        assert!((rep.max_violation - 10.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let prob = LmiProblem::new(2, 1e-6).unwrap();
        let cand = LmiSolution::candidate(DMatrix::zeros(3, 3), vec![]);
        assert!(matches!(
            verify(&prob, &cand),
            Err(LmiError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn sign_restrictions_are_checked() {
        let mut prob = LmiProblem::new(1, 0.5).unwrap();
        prob.add_scalar("g", Sign::Positive);
        prob.add_scalar("h", Sign::NonNegative);
        let cand = LmiSolution::candidate(DMatrix::zeros(1, 1), vec![0.25, -1.0]);
        let rep = verify(&prob, &cand).unwrap();
        assert_eq!(rep.constraints.len(), 2);
        assert!((rep.constraints[0].violation - 0.25).abs() < 1e-15);
        assert!((rep.max_violation - 1.0).abs() < 1e-15);
    }
}
