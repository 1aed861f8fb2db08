//! Problem description: a symmetric decision matrix `P`, a handful of scalar
//! decision variables, and a list of affine matrix inequalities in both.

use nalgebra::DMatrix;

use crate::error::LmiError;

/// Index of a scalar decision variable inside an [`LmiProblem`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScalarId(pub usize);

/// Sign restriction attached to a scalar variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Free,
    /// `x > 0`, enforced with the problem's strictness margin.
    Positive,
    /// `x >= 0`.
    NonNegative,
}

#[derive(Debug, Clone)]
pub struct ScalarVar {
    pub name: String,
    pub sign: Sign,
}

/// Relation of a constraint expression to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    /// expression ⪰ 0
    Psd,
    /// expression ⪯ 0
    Nsd,
}

/// Coefficient multiplying a scalar variable inside a matrix expression.
#[derive(Debug, Clone)]
pub enum Coef {
    Identity(f64),
    Matrix(DMatrix<f64>),
}

impl Coef {
    pub fn to_matrix(&self, size: usize) -> DMatrix<f64> {
        match self {
            Coef::Identity(c) => DMatrix::identity(size, size) * *c,
            Coef::Matrix(m) => m.clone(),
        }
    }
}

/// Affine symmetric matrix expression
/// `P·M + Mᵀ·P + Σ xⱼ·Sⱼ + C₀`.
///
/// Every term is symmetric by construction: the `P` part is always the
/// symmetrised product, and the scalar coefficients and constant are checked
/// when the constraint is added to a problem.
#[derive(Debug, Clone)]
pub struct MatrixExpr {
    size: usize,
    lyapunov: Option<DMatrix<f64>>,
    scalar_terms: Vec<(ScalarId, Coef)>,
    constant: Option<DMatrix<f64>>,
}

impl MatrixExpr {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            lyapunov: None,
            scalar_terms: Vec::new(),
            constant: None,
        }
    }

    /// Adds `P·M + Mᵀ·P`. Repeated calls accumulate, since the map is linear in `M`.
    pub fn lyapunov(mut self, m: &DMatrix<f64>) -> Self {
        self.lyapunov = Some(match self.lyapunov.take() {
            Some(acc) => acc + m,
            None => m.clone(),
        });
        self
    }

    /// Adds `c·P`.
    pub fn p_scaled(self, c: f64) -> Self {
        let half = DMatrix::identity(self.size, self.size) * (0.5 * c);
        self.lyapunov(&half)
    }

    /// Adds `c·x·I`.
    pub fn scalar_identity(mut self, var: ScalarId, c: f64) -> Self {
        self.scalar_terms.push((var, Coef::Identity(c)));
        self
    }

    /// Adds `x·S`.
    pub fn scalar_matrix(mut self, var: ScalarId, s: DMatrix<f64>) -> Self {
        self.scalar_terms.push((var, Coef::Matrix(s)));
        self
    }

    pub fn constant(mut self, c: DMatrix<f64>) -> Self {
        self.constant = Some(match self.constant.take() {
            Some(acc) => acc + c,
            None => c,
        });
        self
    }

    /// Adds `c·I`.
    pub fn constant_identity(self, c: f64) -> Self {
        let n = self.size;
        self.constant(DMatrix::identity(n, n) * c)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn lyapunov_term(&self) -> Option<&DMatrix<f64>> {
        self.lyapunov.as_ref()
    }

    pub fn scalar_terms(&self) -> &[(ScalarId, Coef)] {
        &self.scalar_terms
    }

    pub fn constant_term(&self) -> Option<&DMatrix<f64>> {
        self.constant.as_ref()
    }

    /// Evaluates the expression at a candidate point.
    pub fn evaluate(&self, p: &DMatrix<f64>, scalars: &[f64]) -> DMatrix<f64> {
        let n = self.size;
        let mut out = match &self.constant {
            Some(c) => c.clone(),
            None => DMatrix::zeros(n, n),
        };
        if let Some(m) = &self.lyapunov {
            let pm = p * m;
            out += &pm;
            out += pm.transpose();
        }
        for (var, coef) in &self.scalar_terms {
            let x = scalars[var.0];
            match coef {
                Coef::Identity(c) => {
                    for i in 0..n {
                        out[(i, i)] += c * x;
                    }
                }
                Coef::Matrix(s) => out += s * x,
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct LmiConstraint {
    pub label: String,
    pub expr: MatrixExpr,
    pub relation: Relation,
    pub strict: bool,
}

/// A finite conjunction of affine matrix inequalities over `(P, x)`.
#[derive(Debug, Clone)]
pub struct LmiProblem {
    dim: usize,
    scalars: Vec<ScalarVar>,
    constraints: Vec<LmiConstraint>,
    margin: f64,
    objective: Option<Vec<(ScalarId, f64)>>,
}

const SYMMETRY_TOL: f64 = 1e-12;

fn check_symmetric(label: &str, m: &DMatrix<f64>, size: usize) -> Result<(), LmiError> {
    if m.nrows() != size || m.ncols() != size {
        return Err(LmiError::ShapeMismatch {
            what: format!("term of constraint '{label}'"),
            expected: size,
            found: m.nrows().max(m.ncols()),
        });
    }
    let scale = m.amax().max(1.0);
    for i in 0..size {
        for j in (i + 1)..size {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(LmiError::NonSymmetric {
                    label: label.to_string(),
                });
            }
        }
    }
    Ok(())
}

impl LmiProblem {
    /// `margin` is the ε used to encode strict inequalities as `⪰ εI`.
    pub fn new(dim: usize, margin: f64) -> Result<Self, LmiError> {
        if dim == 0 {
            return Err(LmiError::EmptyProblem);
        }
        if !(margin > 0.0 && margin.is_finite()) {
            return Err(LmiError::InvalidMargin(margin));
        }
        Ok(Self {
            dim,
            scalars: Vec::new(),
            constraints: Vec::new(),
            margin,
            objective: None,
        })
    }

    pub fn add_scalar(&mut self, name: impl Into<String>, sign: Sign) -> ScalarId {
        self.scalars.push(ScalarVar {
            name: name.into(),
            sign,
        });
        ScalarId(self.scalars.len() - 1)
    }

    pub fn add_constraint(
        &mut self,
        label: impl Into<String>,
        expr: MatrixExpr,
        relation: Relation,
        strict: bool,
    ) -> Result<(), LmiError> {
        let label = label.into();
        let size = expr.size();
        if size == 0 {
            return Err(LmiError::ShapeMismatch {
                what: format!("constraint '{label}'"),
                expected: 1,
                found: 0,
            });
        }
        if let Some(m) = expr.lyapunov_term() {
            if size != self.dim || m.nrows() != self.dim || m.ncols() != self.dim {
                return Err(LmiError::ShapeMismatch {
                    what: format!("P-term of constraint '{label}'"),
                    expected: self.dim,
                    found: m.nrows(),
                });
            }
        }
        for (var, coef) in expr.scalar_terms() {
            if var.0 >= self.scalars.len() {
                return Err(LmiError::UnknownScalar(var.0));
            }
            if let Coef::Matrix(s) = coef {
                check_symmetric(&label, s, size)?;
            }
        }
        if let Some(c) = expr.constant_term() {
            check_symmetric(&label, c, size)?;
        }
        self.constraints.push(LmiConstraint {
            label,
            expr,
            relation,
            strict,
        });
        Ok(())
    }

    /// Linear objective over the scalar variables (minimised). Only consulted
    /// after feasibility has been established.
    pub fn set_objective(&mut self, terms: Vec<(ScalarId, f64)>) -> Result<(), LmiError> {
        for (v, _) in &terms {
            if v.0 >= self.scalars.len() {
                return Err(LmiError::UnknownScalar(v.0));
            }
        }
        self.objective = Some(terms);
        Ok(())
    }

    pub fn clear_objective(&mut self) {
        self.objective = None;
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn scalars(&self) -> &[ScalarVar] {
        &self.scalars
    }

    pub fn constraints(&self) -> &[LmiConstraint] {
        &self.constraints
    }

    pub fn objective(&self) -> Option<&[(ScalarId, f64)]> {
        self.objective.as_deref()
    }

    pub fn has_strict(&self) -> bool {
        self.constraints.iter().any(|c| c.strict)
            || self.scalars.iter().any(|s| s.sign == Sign::Positive)
    }

    pub fn objective_value(&self, scalars: &[f64]) -> Option<f64> {
        self.objective
            .as_ref()
            .map(|terms| terms.iter().map(|(v, c)| c * scalars[v.0]).sum())
    }
}

/// A candidate or verified point `(P, x)`.
#[derive(Debug, Clone)]
pub struct LmiSolution {
    pub p: DMatrix<f64>,
    pub scalars: Vec<f64>,
    /// Worst residual over all constraints after the margin is applied;
    /// non-positive means every constraint holds with the required margin.
    pub max_violation: f64,
    pub objective_value: Option<f64>,
    pub iterations: usize,
}

impl LmiSolution {
    /// Unverified candidate; `max_violation` is filled in by [`crate::verify`].
    pub fn candidate(p: DMatrix<f64>, scalars: Vec<f64>) -> Self {
        Self {
            p,
            scalars,
            max_violation: f64::NAN,
            objective_value: None,
            iterations: 0,
        }
    }

    pub fn scalar(&self, id: ScalarId) -> f64 {
        self.scalars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lyapunov_terms_accumulate() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 3.0]);
        let e = MatrixExpr::new(2).lyapunov(&a).lyapunov(&a);
        let p = DMatrix::identity(2, 2);
        let v = e.evaluate(&p, &[]);
        let expected = (&a + a.transpose()) * 2.0;
        assert!((v - expected).amax() < 1e-15);
    }

    #[test]
    fn rejects_nonsymmetric_coefficient() {
        let mut prob = LmiProblem::new(2, 1e-6).unwrap();
        let x = prob.add_scalar("x", Sign::Free);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let err = prob
            .add_constraint("bad", MatrixExpr::new(2).scalar_matrix(x, s), Relation::Psd, false)
            .unwrap_err();
        assert!(matches!(err, LmiError::NonSymmetric { .. }));
    }

    #[test]
    fn rejects_bad_margin_and_dim() {
        assert!(LmiProblem::new(0, 1e-6).is_err());
        assert!(LmiProblem::new(2, 0.0).is_err());
        assert!(LmiProblem::new(2, -1.0).is_err());
    }

    #[test]
    fn p_term_must_match_dim() {
        let mut prob = LmiProblem::new(3, 1e-6).unwrap();
        let m = DMatrix::identity(2, 2);
        let err = prob
            .add_constraint("p", MatrixExpr::new(2).lyapunov(&m), Relation::Nsd, true)
            .unwrap_err();
        assert!(matches!(err, LmiError::ShapeMismatch { .. }));
    }
}
