//! Infeasible-start primal-dual interior point method (HKM direction with a
//! Mehrotra predictor-corrector) specialised to LMIs whose only matrix-valued
//! decision variable enters as `P·M + Mᵀ·P`.
//!
//! The LMI problem is posed in standard dual form
//!
//! ```text
//!   maximise  bᵀy   s.t.  Z = F₀ + Σ yᵢ Fᵢ ⪰ 0     (block diagonal)
//! ```
//!
//! with `y = [upper triangle of P, scalars, margin s]`. For a feasibility
//! question the objective is the margin `s` that every strict constraint must
//! clear; a bounded normalisation box on `P` and the scalars keeps both the
//! primal and the dual strictly feasible so the method always has a
//! well-defined optimum. Homogeneous problems lose nothing by the box.
//!
//! The Schur complement `Mᵢⱼ = tr(Fᵢ X Fⱼ Z⁻¹)` is never formed from explicit
//! basis matrices: the `P` basis element `E_ab` maps to a rank-four matrix
//! built from unit vectors and rows of `M`, so every entry is a sum of
//! products of entries of `X`, `M X`, `M X Mᵀ` and the same for `Z⁻¹`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::LmiError;
use crate::problem::{Coef, LmiProblem, LmiSolution, Relation, Sign};
use crate::verify::verify;

#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Acceptance tolerance on the verified violation of a returned witness.
    pub tol: f64,
    pub max_iter: usize,
    /// Normalisation box `-p_bound·I ⪯ P ⪯ p_bound·I`.
    pub p_bound: f64,
    /// Normalisation box `|x| ≤ scalar_bound` on every scalar.
    pub scalar_bound: f64,
    /// Relative duality gap / infeasibility at which the method stops.
    pub gap_tol: f64,
    /// Stop as soon as an iterate verifies, or the dual bound proves the
    /// margin unattainable.
    pub early_exit: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 120,
            p_bound: 1.0,
            scalar_bound: 1e3,
            gap_tol: 1e-9,
            early_exit: true,
        }
    }
}

impl SolveOptions {
    fn validate(&self) -> Result<(), LmiError> {
        if !(self.tol > 0.0) {
            return Err(LmiError::InvalidOption(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(LmiError::InvalidOption("max_iter must be >= 1".into()));
        }
        if !(self.p_bound > 0.0) || !(self.scalar_bound > 0.0) {
            return Err(LmiError::InvalidOption("normalisation bounds must be > 0".into()));
        }
        if !(self.gap_tol > 0.0) {
            return Err(LmiError::InvalidOption("gap_tol must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Infeasibility {
    /// Upper bound on the best attainable margin inside the normalisation box.
    pub margin_upper_bound: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct Inconclusive {
    pub iterations: usize,
    pub best_margin: f64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub enum SolveOutcome {
    Feasible(LmiSolution),
    Infeasible(Infeasibility),
    Inconclusive(Inconclusive),
}

impl SolveOutcome {
    pub fn is_feasible(&self) -> bool {
        matches!(self, SolveOutcome::Feasible(_))
    }
}

/// Decides feasibility of `problem`. `tol` bounds the verified violation of
/// any returned witness; `max_iter` caps interior point iterations.
pub fn solve(problem: &LmiProblem, tol: f64, max_iter: usize) -> Result<SolveOutcome, LmiError> {
    solve_with(
        problem,
        &SolveOptions {
            tol,
            max_iter,
            ..SolveOptions::default()
        },
    )
}

thread_local! {
    static SOLVES: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Number of [`solve_with`] calls made on the current thread.
pub fn solve_count() -> u64 {
    SOLVES.with(|c| c.get())
}

pub fn solve_with(problem: &LmiProblem, opts: &SolveOptions) -> Result<SolveOutcome, LmiError> {
    SOLVES.with(|c| c.set(c.get() + 1));
    opts.validate()?;
    let form = StdForm::phase_one(problem, opts);
    let run = Ipm::new(&form, opts).run(problem, opts, true)?;
    let outcome = match run {
        IpmResult::Witness(sol) => SolveOutcome::Feasible(sol),
        IpmResult::Converged { y, upper, iterations } => {
            let margin = form.margin_index.map(|i| y[i]).unwrap_or(0.0);
            if upper < form.threshold {
                SolveOutcome::Infeasible(Infeasibility {
                    margin_upper_bound: upper,
                    iterations,
                })
            } else {
                let mut cand = form.candidate(&y);
                cand.iterations = iterations;
                let rep = verify(problem, &cand)?;
                if rep.passes(opts.tol) {
                    cand.max_violation = rep.max_violation;
                    SolveOutcome::Feasible(cand)
                } else {
                    SolveOutcome::Inconclusive(Inconclusive {
                        iterations,
                        best_margin: margin,
                        reason: format!(
                            "converged witness fails verification (violation {:.3e})",
                            rep.max_violation
                        ),
                    })
                }
            }
        }
        IpmResult::Certified { upper, iterations } => SolveOutcome::Infeasible(Infeasibility {
            margin_upper_bound: upper,
            iterations,
        }),
        IpmResult::Stalled { y, iterations, reason } => SolveOutcome::Inconclusive(Inconclusive {
            iterations,
            best_margin: form.margin_index.map(|i| y[i]).unwrap_or(f64::NAN),
            reason,
        }),
    };
    match (outcome, problem.objective()) {
        (SolveOutcome::Feasible(sol), Some(_)) => Ok(SolveOutcome::Feasible(refine_objective(
            problem, opts, sol,
        )?)),
        (SolveOutcome::Feasible(mut sol), None) => {
            sol.objective_value = None;
            Ok(SolveOutcome::Feasible(sol))
        }
        (other, _) => Ok(other),
    }
}

/// Second phase: minimise the objective with strict constraints held at the
/// margin. Falls back to the phase-one witness if anything goes wrong.
fn refine_objective(
    problem: &LmiProblem,
    opts: &SolveOptions,
    fallback: LmiSolution,
) -> Result<LmiSolution, LmiError> {
    let mut fallback = fallback;
    fallback.objective_value = problem.objective_value(&fallback.scalars);
    let form = StdForm::phase_two(problem, opts);
    let run = match Ipm::new(&form, opts).run(problem, opts, false) {
        Ok(r) => r,
        Err(_) => return Ok(fallback),
    };
    let (y, iterations) = match run {
        IpmResult::Converged { y, iterations, .. } => (y, iterations),
        _ => return Ok(fallback),
    };
    let mut cand = form.candidate(&y);
    cand.iterations = fallback.iterations + iterations;
    let rep = verify(problem, &cand)?;
    if rep.passes(opts.tol) {
        cand.max_violation = rep.max_violation;
        cand.objective_value = problem.objective_value(&cand.scalars);
        Ok(cand)
    } else {
        Ok(fallback)
    }
}

/// One diagonal block `F₀ + (P·M + Mᵀ·P) + Σ yⱼ Sⱼ` of the standard form.
struct Block {
    size: usize,
    lyap: Option<DMatrix<f64>>,
    terms: Vec<(usize, Coef)>,
    f0: DMatrix<f64>,
}

impl Block {
    fn linear_part(&self, pairs: &[(usize, usize)], dim: usize, y: &DVector<f64>) -> DMatrix<f64> {
        let n = self.size;
        let mut out = DMatrix::zeros(n, n);
        if let Some(m) = &self.lyap {
            let p = unpack_p(pairs, dim, y);
            let pm = &p * m;
            out += &pm;
            out += pm.transpose();
        }
        for (idx, coef) in &self.terms {
            let v = y[*idx];
            if v == 0.0 {
                continue;
            }
            match coef {
                Coef::Identity(c) => {
                    for i in 0..n {
                        out[(i, i)] += c * v;
                    }
                }
                Coef::Matrix(s) => out += s * v,
            }
        }
        out
    }

    /// Adds `⟨Fᵢ, W⟩` for every variable `i` touching this block into `out`.
    fn adjoint_into(&self, pairs: &[(usize, usize)], w: &DMatrix<f64>, out: &mut DVector<f64>) {
        if let Some(m) = &self.lyap {
            let mw = m * w;
            for (k, &(a, b)) in pairs.iter().enumerate() {
                // (M W + W Mᵀ)_{ab} = (MW)_{ab} + (MW)_{ba}
                let yab = mw[(a, b)] + mw[(b, a)];
                out[k] += if a == b { yab } else { 2.0 * yab };
            }
        }
        for (idx, coef) in &self.terms {
            out[*idx] += coef_inner(coef, w);
        }
    }
}

fn coef_inner(coef: &Coef, w: &DMatrix<f64>) -> f64 {
    match coef {
        Coef::Identity(c) => c * w.trace(),
        Coef::Matrix(s) => s.dot(w),
    }
}

fn unpack_p(pairs: &[(usize, usize)], dim: usize, y: &DVector<f64>) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(dim, dim);
    for (k, &(a, b)) in pairs.iter().enumerate() {
        p[(a, b)] = y[k];
        p[(b, a)] = y[k];
    }
    p
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

struct StdForm {
    dim: usize,
    pairs: Vec<(usize, usize)>,
    n_scalars: usize,
    m: usize,
    blocks: Vec<Block>,
    b: DVector<f64>,
    margin_index: Option<usize>,
    /// Margin value that separates feasible from infeasible.
    threshold: f64,
    /// Per-variable bound on |yᵢ| over the normalised feasible set.
    y_bounds: DVector<f64>,
}

impl StdForm {
    fn layout(problem: &LmiProblem) -> (usize, Vec<(usize, usize)>, usize) {
        let dim = problem.dim();
        let mut pairs = Vec::with_capacity(dim * (dim + 1) / 2);
        for a in 0..dim {
            for b in a..dim {
                pairs.push((a, b));
            }
        }
        let n_scalars = problem.scalars().len();
        (dim, pairs, n_scalars)
    }

    fn user_block(problem: &LmiProblem, idx: usize, m_p: usize) -> Block {
        let c = &problem.constraints()[idx];
        let sign = match c.relation {
            Relation::Psd => 1.0,
            Relation::Nsd => -1.0,
        };
        let n = c.expr.size();
        let f0 = c
            .expr
            .constant_term()
            .map(|m| m * sign)
            .unwrap_or_else(|| DMatrix::zeros(n, n));
        let lyap = c.expr.lyapunov_term().map(|m| m * sign);
        let terms = c
            .expr
            .scalar_terms()
            .iter()
            .map(|(v, coef)| {
                let coef = match coef {
                    Coef::Identity(x) => Coef::Identity(x * sign),
                    Coef::Matrix(s) => Coef::Matrix(s * sign),
                };
                (m_p + v.0, coef)
            })
            .collect();
        Block {
            size: n,
            lyap,
            terms,
            f0: sym(&f0),
        }
    }

    fn normalisation_blocks(&self, opts: &SolveOptions, problem: &LmiProblem) -> Vec<Block> {
        let dim = self.dim;
        let m_p = self.pairs.len();
        let half = DMatrix::identity(dim, dim) * 0.5;
        let bound_i = DMatrix::identity(dim, dim) * opts.p_bound;
        let mut out = vec![
            Block {
                size: dim,
                lyap: Some(-&half),
                terms: vec![],
                f0: bound_i.clone(),
            },
            Block {
                size: dim,
                lyap: Some(half),
                terms: vec![],
                f0: bound_i,
            },
        ];
        for (j, var) in problem.scalars().iter().enumerate() {
            let one = |c: f64| Block {
                size: 1,
                lyap: None,
                terms: vec![(m_p + j, Coef::Identity(c))],
                f0: DMatrix::from_element(1, 1, opts.scalar_bound),
            };
            out.push(one(-1.0));
            if var.sign == Sign::Free {
                out.push(one(1.0));
            }
        }
        out
    }

    fn phase_one(problem: &LmiProblem, opts: &SolveOptions) -> Self {
        let (dim, pairs, n_scalars) = Self::layout(problem);
        let m_p = pairs.len();
        let any_strict = problem.has_strict();
        let margin_index = m_p + n_scalars;
        let m = margin_index + 1;
        let mut blocks = Vec::new();
        let mut f0_scale: f64 = 1.0;
        for (i, c) in problem.constraints().iter().enumerate() {
            let mut blk = Self::user_block(problem, i, m_p);
            f0_scale = f0_scale.max(blk.f0.amax());
            if c.strict || !any_strict {
                blk.terms.push((margin_index, Coef::Identity(-1.0)));
            }
            blocks.push(blk);
        }
        for (j, var) in problem.scalars().iter().enumerate() {
            let mut terms = vec![(m_p + j, Coef::Identity(1.0))];
            match var.sign {
                Sign::Free => continue,
                Sign::Positive => terms.push((margin_index, Coef::Identity(-1.0))),
                Sign::NonNegative if !any_strict => {
                    terms.push((margin_index, Coef::Identity(-1.0)))
                }
                Sign::NonNegative => {}
            }
            blocks.push(Block {
                size: 1,
                lyap: None,
                terms,
                f0: DMatrix::zeros(1, 1),
            });
        }
        let s_cap = 1.0;
        let s_floor = 10.0 * f0_scale;
        // s ≤ s_cap and s ≥ -s_floor
        blocks.push(Block {
            size: 1,
            lyap: None,
            terms: vec![(margin_index, Coef::Identity(-1.0))],
            f0: DMatrix::from_element(1, 1, s_cap),
        });
        blocks.push(Block {
            size: 1,
            lyap: None,
            terms: vec![(margin_index, Coef::Identity(1.0))],
            f0: DMatrix::from_element(1, 1, s_floor),
        });
        let mut b = DVector::zeros(m);
        b[margin_index] = 1.0;
        let threshold = if any_strict { problem.margin() } else { -opts.tol };
        let mut form = Self {
            dim,
            pairs,
            n_scalars,
            m,
            blocks,
            b,
            margin_index: Some(margin_index),
            threshold,
            y_bounds: DVector::from_fn(m, |i, _| {
                if i < m_p {
                    opts.p_bound
                } else if i < margin_index {
                    opts.scalar_bound
                } else {
                    s_cap.max(s_floor)
                }
            }),
        };
        let norm = form.normalisation_blocks(opts, problem);
        form.blocks.extend(norm);
        form
    }

    fn phase_two(problem: &LmiProblem, opts: &SolveOptions) -> Self {
        let (dim, pairs, n_scalars) = Self::layout(problem);
        let m_p = pairs.len();
        let m = m_p + n_scalars;
        let eps = problem.margin();
        let mut blocks = Vec::new();
        for (i, c) in problem.constraints().iter().enumerate() {
            let mut blk = Self::user_block(problem, i, m_p);
            if c.strict {
                for d in 0..blk.size {
                    blk.f0[(d, d)] -= eps;
                }
            }
            blocks.push(blk);
        }
        for (j, var) in problem.scalars().iter().enumerate() {
            let shift = match var.sign {
                Sign::Free => continue,
                Sign::Positive => -eps,
                Sign::NonNegative => 0.0,
            };
            blocks.push(Block {
                size: 1,
                lyap: None,
                terms: vec![(m_p + j, Coef::Identity(1.0))],
                f0: DMatrix::from_element(1, 1, shift),
            });
        }
        let mut b = DVector::zeros(m);
        if let Some(obj) = problem.objective() {
            for (v, c) in obj {
                b[m_p + v.0] -= c;
            }
        }
        let mut form = Self {
            dim,
            pairs,
            n_scalars,
            m,
            blocks,
            b,
            margin_index: None,
            threshold: f64::NEG_INFINITY,
            y_bounds: DVector::from_fn(m, |i, _| if i < m_p { opts.p_bound } else { opts.scalar_bound }),
        };
        let norm = form.normalisation_blocks(opts, problem);
        form.blocks.extend(norm);
        form
    }

    fn candidate(&self, y: &DVector<f64>) -> LmiSolution {
        let p = unpack_p(&self.pairs, self.dim, y);
        let m_p = self.pairs.len();
        let scalars = (0..self.n_scalars).map(|j| y[m_p + j]).collect();
        LmiSolution::candidate(p, scalars)
    }

    fn total_size(&self) -> usize {
        self.blocks.iter().map(|b| b.size).sum()
    }
}

enum IpmResult {
    /// An iterate passed independent verification.
    Witness(LmiSolution),
    Converged {
        y: DVector<f64>,
        upper: f64,
        iterations: usize,
    },
    /// The dual bound proved the margin threshold unattainable.
    Certified { upper: f64, iterations: usize },
    Stalled {
        y: DVector<f64>,
        iterations: usize,
        reason: String,
    },
}

struct Scratch {
    g: DMatrix<f64>,
    h: DMatrix<f64>,
    mg: DMatrix<f64>,
    mgm: DMatrix<f64>,
    mh: DMatrix<f64>,
    mhm: DMatrix<f64>,
}

struct Ipm<'a> {
    form: &'a StdForm,
    x: Vec<DMatrix<f64>>,
    z: Vec<DMatrix<f64>>,
    y: DVector<f64>,
}

fn cholesky_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.nrows() == 1 {
        let v = m[(0, 0)];
        return (v > 0.0).then(|| DMatrix::from_element(1, 1, 1.0 / v));
    }
    m.clone().cholesky().map(|c| c.inverse())
}

/// Largest α with `x + α·dx ⪰ 0` (∞ when unbounded), or `None` if `x` is not positive definite.
fn max_step(x: &DMatrix<f64>, dx: &DMatrix<f64>) -> Option<f64> {
    if x.nrows() == 1 {
        let (v, d) = (x[(0, 0)], dx[(0, 0)]);
        if v <= 0.0 {
            return None;
        }
        return Some(if d < 0.0 { -v / d } else { f64::INFINITY });
    }
    let chol = x.clone().cholesky()?;
    let l = chol.l();
    let t = l.solve_lower_triangular(dx)?;
    let w = l.solve_lower_triangular(&t.transpose())?;
    let lo = sym(&w)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    Some(if lo < 0.0 { -1.0 / lo } else { f64::INFINITY })
}

fn near_optimal(pinf: f64, dinf: f64, gap: f64) -> bool {
    pinf < 1e-5 && dinf < 1e-6 && gap < 1e-6
}

fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b)
}

impl<'a> Ipm<'a> {
    fn new(form: &'a StdForm, _opts: &SolveOptions) -> Self {
        let m_p = form.pairs.len();
        let mut x = Vec::with_capacity(form.blocks.len());
        let mut z = Vec::with_capacity(form.blocks.len());
        for blk in &form.blocks {
            let n = blk.size as f64;
            let mut a_norm: f64 = 0.0;
            if let Some(m) = &blk.lyap {
                a_norm = a_norm.max(2.0 * m.norm());
            }
            for (_, c) in &blk.terms {
                let nrm = match c {
                    Coef::Identity(v) => v.abs() * n.sqrt(),
                    Coef::Matrix(s) => s.norm(),
                };
                a_norm = a_norm.max(nrm);
            }
            let b_max = form.b.amax();
            let zeta = 10f64.max(n.sqrt()).max(n * (1.0 + b_max) / (1.0 + a_norm));
            let eta = 10f64.max(n.sqrt()).max(a_norm).max(blk.f0.norm());
            x.push(DMatrix::identity(blk.size, blk.size) * zeta);
            z.push(DMatrix::identity(blk.size, blk.size) * eta);
        }
        let _ = m_p;
        Self {
            form,
            x,
            z,
            y: DVector::zeros(form.m),
        }
    }

    fn dual_residuals(&self) -> Vec<DMatrix<f64>> {
        let f = self.form;
        f.blocks
            .par_iter()
            .zip(self.z.par_iter())
            .map(|(blk, z)| &blk.f0 + blk.linear_part(&f.pairs, f.dim, &self.y) - z)
            .collect()
    }

    fn adjoint(&self, ws: &[DMatrix<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.form.m);
        for (blk, w) in self.form.blocks.iter().zip(ws) {
            blk.adjoint_into(&self.form.pairs, w, &mut out);
        }
        out
    }

    fn schur(&self, hs: &[DMatrix<f64>]) -> DMatrix<f64> {
        let f = self.form;
        let m = f.m;
        let m_p = f.pairs.len();
        let scratch: Vec<Option<Scratch>> = f
            .blocks
            .par_iter()
            .zip(self.x.par_iter())
            .zip(hs.par_iter())
            .map(|((blk, x), h)| {
                blk.lyap.as_ref().map(|mm| {
                    let g = sym(x);
                    let mg = mm * &g;
                    let mgm = &mg * mm.transpose();
                    let mh = mm * h;
                    let mhm = &mh * mm.transpose();
                    Scratch {
                        g,
                        h: h.clone(),
                        mg,
                        mgm,
                        mh,
                        mhm,
                    }
                })
            })
            .collect();

        let mut schur = DMatrix::<f64>::zeros(m, m);
        let pairs = &f.pairs;
        let n = f.dim;
        // P–P part, lower triangle, one column per task.
        schur
            .as_mut_slice()
            .par_chunks_mut(m)
            .enumerate()
            .filter(|(k1, _)| *k1 < m_p)
            .for_each(|(k1, col)| {
                let (a, b) = pairs[k1];
                for s in scratch.iter().flatten() {
                    let g = s.g.as_slice();
                    let h = s.h.as_slice();
                    let mg = s.mg.as_slice();
                    let mgm = s.mgm.as_slice();
                    let mh = s.mh.as_slice();
                    let mhm = s.mhm.as_slice();
                    let at = |i: usize, j: usize| i + j * n;
                    let t = |p: usize, q: usize, r: usize, u: usize| -> f64 {
                        mg[at(q, r)] * mh[at(u, p)]
                            + mgm[at(q, u)] * h[at(r, p)]
                            + g[at(p, r)] * mhm[at(u, q)]
                            + mg[at(u, p)] * mh[at(q, r)]
                    };
                    for (k2, &(c, d)) in pairs.iter().enumerate().skip(k1) {
                        let mut v = t(a, b, c, d);
                        if c != d {
                            v += t(a, b, d, c);
                        }
                        if a != b {
                            v += t(b, a, c, d);
                            if c != d {
                                v += t(b, a, d, c);
                            }
                        }
                        col[k2] += v;
                    }
                }
            });

        // Scalar columns: Mᵢⱼ = ⟨Fᵢ, sym(X Sⱼ Z⁻¹)⟩.
        for ((blk, x), h) in f.blocks.iter().zip(&self.x).zip(hs) {
            for (j, coef) in &blk.terms {
                let w = match coef {
                    Coef::Identity(c) => sym(&(x * h)) * *c,
                    Coef::Matrix(s) => sym(&(x * s * h)),
                };
                let mut colv = DVector::zeros(m);
                blk.adjoint_into(pairs, &w, &mut colv);
                for i in 0..m {
                    if i >= m_p || colv[i] != 0.0 {
                        if i < m_p {
                            schur[(*j, i)] += colv[i];
                            schur[(i, *j)] += colv[i];
                        } else {
                            schur[(i, *j)] += colv[i];
                        }
                    }
                }
            }
        }
        // Mirror the P–P lower triangle.
        for c in 0..m_p {
            for r in (c + 1)..m_p {
                schur[(c, r)] = schur[(r, c)];
            }
        }
        schur
    }

    fn factor(schur: DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let diag_max = schur.diagonal().amax().max(1e-300);
        if let Some(c) = schur.clone().cholesky() {
            return Some(c);
        }
        for k in [1e-14, 1e-12, 1e-10] {
            let mut s = schur.clone();
            for i in 0..s.nrows() {
                s[(i, i)] += k * diag_max;
            }
            if let Some(c) = s.cholesky() {
                return Some(c);
            }
        }
        None
    }

    fn directions(
        &self,
        chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
        rp: &DVector<f64>,
        rd: &[DMatrix<f64>],
        hs: &[DMatrix<f64>],
        rc_h: &[DMatrix<f64>],
    ) -> (DVector<f64>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let f = self.form;
        // rhs = ℱ*(sym(Rc Z⁻¹ − X Rd Z⁻¹)) − Rp
        let ws: Vec<DMatrix<f64>> = self
            .x
            .par_iter()
            .zip(rd.par_iter())
            .zip(hs.par_iter())
            .zip(rc_h.par_iter())
            .map(|(((x, rdb), h), rch)| sym(&(rch - x * rdb * h)))
            .collect();
        let rhs = self.adjoint(&ws) - rp;
        let dy = chol.solve(&rhs);
        let dz: Vec<DMatrix<f64>> = f
            .blocks
            .par_iter()
            .zip(rd.par_iter())
            .map(|(blk, rdb)| blk.linear_part(&f.pairs, f.dim, &dy) + rdb)
            .collect();
        // ΔX = sym((Rc − X ΔZ) Z⁻¹) = sym(Rc Z⁻¹ − X ΔZ Z⁻¹)
        let dx: Vec<DMatrix<f64>> = self
            .x
            .par_iter()
            .zip(dz.par_iter())
            .zip(hs.par_iter())
            .zip(rc_h.par_iter())
            .map(|(((x, dzb), h), rch)| sym(&(rch - x * dzb * h)))
            .collect();
        (dy, dx, dz)
    }

    fn step_lengths(&self, dx: &[DMatrix<f64>], dz: &[DMatrix<f64>]) -> Option<(f64, f64)> {
        let ap: Option<Vec<f64>> = self
            .x
            .par_iter()
            .zip(dx.par_iter())
            .map(|(x, d)| max_step(x, d))
            .collect();
        let ad: Option<Vec<f64>> = self
            .z
            .par_iter()
            .zip(dz.par_iter())
            .map(|(z, d)| max_step(z, d))
            .collect();
        let ap = ap?.into_iter().fold(f64::INFINITY, f64::min);
        let ad = ad?.into_iter().fold(f64::INFINITY, f64::min);
        Some((ap, ad))
    }

    fn breakdown(&self, it: usize, pinf: f64, dinf: f64, gap: f64, upper: f64) -> Result<IpmResult, LmiError> {
        if near_optimal(pinf, dinf, gap) {
            return Ok(IpmResult::Converged {
                y: self.y.clone(),
                upper,
                iterations: it,
            });
        }
        Err(LmiError::NumericalBreakdown {
            iterations: it,
            reason: "step length computation failed".into(),
        })
    }

    fn run(
        mut self,
        problem: &LmiProblem,
        opts: &SolveOptions,
        margin_phase: bool,
    ) -> Result<IpmResult, LmiError> {
        let f = self.form;
        let n_tot = f.total_size() as f64;
        let b_norm = f.b.norm();
        let f0_norm = f
            .blocks
            .iter()
            .map(|b| b.f0.norm_squared())
            .sum::<f64>()
            .sqrt();
        let mut last_upper = f64::INFINITY;
        let mut best_pinf = f64::INFINITY;
        for it in 0..opts.max_iter {
            let hs: Option<Vec<DMatrix<f64>>> = self.z.par_iter().map(cholesky_inverse).collect();
            let Some(hs) = hs else {
                return Err(LmiError::NumericalBreakdown {
                    iterations: it,
                    reason: "dual slack lost positive definiteness".into(),
                });
            };
            let rd = self.dual_residuals();
            let rp = -&f.b - self.adjoint(&self.x);
            let xz: f64 = self.x.iter().zip(&self.z).map(|(x, z)| inner(x, z)).sum();
            let mu = xz / n_tot;
            let pobj: f64 = f.blocks.iter().zip(&self.x).map(|(b, x)| inner(&b.f0, x)).sum();
            let dobj = f.b.dot(&self.y);
            let pinf = rp.norm() / (1.0 + b_norm);
            let dinf = rd.iter().map(|r| r.norm_squared()).sum::<f64>().sqrt() / (1.0 + f0_norm);
            let gap = xz / (1.0 + pobj.abs() + dobj.abs());
            if !(mu.is_finite() && pinf.is_finite() && dinf.is_finite()) {
                return Err(LmiError::NumericalBreakdown {
                    iterations: it,
                    reason: "non-finite iterate".into(),
                });
            }

            // Weak duality inside the box: bᵀy ≤ ⟨F₀, X⟩ + Σ |Rpᵢ|·|yᵢ|.
            let upper = pobj + rp.iter().zip(f.y_bounds.iter()).map(|(r, b)| r.abs() * b).sum::<f64>();
            last_upper = last_upper.min(upper);
            let settled = gap < opts.gap_tol && dinf < opts.gap_tol;
            let stuck = pinf > best_pinf && pinf < 1e-5;
            best_pinf = best_pinf.min(pinf);
            if margin_phase && opts.early_exit {
                if upper < f.threshold {
                    return Ok(IpmResult::Certified {
                        upper,
                        iterations: it,
                    });
                }
                if let Some(mi) = f.margin_index {
                    if self.y[mi] > f.threshold && it > 0 {
                        let mut cand = f.candidate(&self.y);
                        cand.iterations = it;
                        let rep = verify(problem, &cand)?;
                        if rep.max_violation <= 0.0 {
                            cand.max_violation = rep.max_violation;
                            return Ok(IpmResult::Witness(cand));
                        }
                    }
                }
            }
            // A primal residual that stops improving once the gap has closed
            // is rounding noise in the Schur solve, not progress.
            if settled && (pinf < opts.gap_tol || stuck) {
                return Ok(IpmResult::Converged {
                    y: self.y.clone(),
                    upper: last_upper.min(pobj),
                    iterations: it,
                });
            }

            let schur = self.schur(&hs);
            let Some(chol) = Self::factor(schur) else {
                if near_optimal(pinf, dinf, gap) {
                    return Ok(IpmResult::Converged {
                        y: self.y.clone(),
                        upper: last_upper.min(pobj),
                        iterations: it,
                    });
                }
                return Err(LmiError::NumericalBreakdown {
                    iterations: it,
                    reason: "Schur complement is not positive definite".into(),
                });
            };

            // Predictor: Rc Z⁻¹ = −X.
            let rc_h_aff: Vec<DMatrix<f64>> = self.x.iter().map(|x| -x).collect();
            let (dy_a, dx_a, dz_a) = self.directions(&chol, &rp, &rd, &hs, &rc_h_aff);
            let Some((ap_a, ad_a)) = self.step_lengths(&dx_a, &dz_a) else {
                return self.breakdown(it, pinf, dinf, gap, last_upper.min(pobj));
            };
            let ap_a = ap_a.min(1.0);
            let ad_a = ad_a.min(1.0);
            let mu_aff: f64 = self
                .x
                .iter()
                .zip(&dx_a)
                .zip(self.z.iter().zip(&dz_a))
                .map(|((x, dx), (z, dz))| inner(&(x + dx * ap_a), &(z + dz * ad_a)))
                .sum::<f64>()
                / n_tot;
            let sigma = (mu_aff / mu).max(0.0).powi(3).min(1.0);
            let _ = dy_a;

            // Corrector: Rc Z⁻¹ = σμZ⁻¹ − X − ΔXa ΔZa Z⁻¹.
            let rc_h: Vec<DMatrix<f64>> = self
                .x
                .par_iter()
                .zip(hs.par_iter())
                .zip(dx_a.par_iter().zip(dz_a.par_iter()))
                .map(|((x, h), (dx, dz))| h * (sigma * mu) - x - dx * dz * h)
                .collect();
            let (dy, dx, dz) = self.directions(&chol, &rp, &rd, &hs, &rc_h);
            let Some((ap, ad)) = self.step_lengths(&dx, &dz) else {
                return self.breakdown(it, pinf, dinf, gap, last_upper.min(pobj));
            };
            let tau = 0.9 + 0.09 * ap_a.min(ad_a);
            let ap = (tau * ap).min(1.0);
            let ad = (tau * ad).min(1.0);
            if ap < 1e-12 && ad < 1e-12 {
                return Ok(IpmResult::Stalled {
                    y: self.y.clone(),
                    iterations: it,
                    reason: "step lengths collapsed".into(),
                });
            }
            for (x, d) in self.x.iter_mut().zip(&dx) {
                *x += d * ap;
                *x = sym(x);
            }
            for (z, d) in self.z.iter_mut().zip(&dz) {
                *z += d * ad;
                *z = sym(z);
            }
            self.y += dy * ad;
        }
        Ok(IpmResult::Stalled {
            y: self.y.clone(),
            iterations: opts.max_iter,
            reason: "iteration cap reached".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::MatrixExpr;

    fn lyapunov_problem(a: &DMatrix<f64>, eps: f64) -> LmiProblem {
        let n = a.nrows();
        let mut prob = LmiProblem::new(n, eps).unwrap();
        prob.add_constraint("P>0", MatrixExpr::new(n).p_scaled(1.0), Relation::Psd, true)
            .unwrap();
        prob.add_constraint("PA+A'P<0", MatrixExpr::new(n).lyapunov(a), Relation::Nsd, true)
            .unwrap();
        prob
    }

    #[test]
    fn stable_matrix_has_lyapunov_witness() {
        let a = DMatrix::from_row_slice(3, 3, &[-1.0, 4.0, 0.0, 0.0, -2.0, 1.0, 0.5, 0.0, -3.0]);
        let prob = lyapunov_problem(&a, 1e-6);
        let out = solve(&prob, 1e-9, 100).unwrap();
        let SolveOutcome::Feasible(sol) = out else {
            panic!("expected feasible, got {out:?}")
        };
        let rep = verify(&prob, &sol).unwrap();
        assert!(rep.max_violation <= 1e-9);
    }

    #[test]
    fn unstable_matrix_is_infeasible() {
        let a = DMatrix::from_row_slice(2, 2, &[0.1, 1.0, 0.0, -1.0]);
        let prob = lyapunov_problem(&a, 1e-6);
        let out = solve(&prob, 1e-9, 100).unwrap();
        assert!(matches!(out, SolveOutcome::Infeasible(_)), "{out:?}");
    }

    #[test]
    fn schur_matches_explicit_basis() {
        // Compare the structured Schur assembly with tr(Fᵢ X Fⱼ Z⁻¹) built
        // from explicit basis matrices.
        let n = 3;
        let a = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let mut prob = LmiProblem::new(n, 1e-6).unwrap();
        let g = prob.add_scalar("g", Sign::Positive);
        prob.add_constraint(
            "c",
            MatrixExpr::new(n).lyapunov(&a).scalar_identity(g, 1.0),
            Relation::Nsd,
            false,
        )
        .unwrap();
        let opts = SolveOptions::default();
        let form = StdForm::phase_one(&prob, &opts);
        let mut ipm = Ipm::new(&form, &opts);
        for (k, x) in ipm.x.iter_mut().enumerate() {
            let s = x.nrows();
            let r = DMatrix::from_fn(s, s, |i, j| ((i + 2 * j + k) % 4) as f64 * 0.1);
            *x = &r * r.transpose() + DMatrix::identity(s, s);
        }
        let hs: Vec<DMatrix<f64>> = ipm.z.iter().map(|z| cholesky_inverse(z).unwrap()).collect();
        let fast = ipm.schur(&hs);
        let m = form.m;
        let basis = |i: usize, blk: &Block| -> DMatrix<f64> {
            let mut e = DVector::zeros(m);
            e[i] = 1.0;
            blk.linear_part(&form.pairs, form.dim, &e)
        };
        let mut slow = DMatrix::zeros(m, m);
        for (bi, blk) in form.blocks.iter().enumerate() {
            for i in 0..m {
                let fi = basis(i, blk);
                for j in 0..m {
                    let fj = basis(j, blk);
                    slow[(i, j)] += (&fi * &ipm.x[bi] * &fj * &hs[bi]).trace();
                }
            }
        }
        assert!((fast - slow).amax() < 1e-10);
    }
}
