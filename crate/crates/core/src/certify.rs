//! Robust stability checks over an [`UncertaintyBox`].
//!
//! Three sufficient conditions are offered, in decreasing cost:
//!
//! * [`Method::Lemma1`]: one common Lyapunov matrix for every vertex of the
//!   polytope (`2^loads` LMIs).
//! * [`Method::Lemma2`]: Lyapunov decrease at the critical corner `Ā` with a
//!   norm margin `2·t·δ̄_max < γ` covering every other vertex.
//! * [`Method::Prop1`]: the same corner LMI, but the margin is split per load
//!   through `δ̄_k·G_k ⪰ (γ_k − η_k)·I` with `G_k = P·D_k + D_k·P`.
//!
//! Every problem is solved on `Ā / ‖Ā‖₂` and the returned witness is checked
//! again in physical units on sampled vertices before a certificate is issued.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use dcmg_lmi::{
    solve_with, verify, LmiError, LmiProblem, LmiSolution, MatrixExpr, Relation, ScalarId, Sign,
    SolveOptions, SolveOutcome,
};
use nalgebra::{Complex, DMatrix};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::uncertainty::{UncertaintyBox, UncertaintyError, DEFAULT_VERTEX_CAP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lemma1,
    Lemma2,
    Prop1,
    Corollary1,
    #[serde(rename = "oracle")]
    VertexOracle,
}

impl Method {
    pub const SOLVERS: [Method; 3] = [Method::Lemma1, Method::Lemma2, Method::Prop1];

    pub fn name(self) -> &'static str {
        match self {
            Method::Lemma1 => "lemma1",
            Method::Lemma2 => "lemma2",
            Method::Prop1 => "prop1",
            Method::Corollary1 => "corollary1",
            Method::VertexOracle => "oracle",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lemma1" => Ok(Method::Lemma1),
            "lemma2" => Ok(Method::Lemma2),
            "prop1" => Ok(Method::Prop1),
            "oracle" => Ok(Method::VertexOracle),
            other => Err(format!("unknown method '{other}'")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertifyError {
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error("problem construction: {0}")]
    Lmi(#[from] LmiError),
    #[error("{0:?} is not a solver-backed method")]
    NotASolver(Method),
}

#[derive(Debug, Clone)]
pub struct CertifyOptions {
    /// Strictness margin, relative to `‖Ā‖₂`.
    pub eps: f64,
    /// Verification tolerance on the normalised problem.
    pub tol: f64,
    pub max_iter: usize,
    pub vertex_cap: usize,
    /// Vertices sampled for post-solve checks (all of them when fewer exist).
    pub samples: usize,
    pub seed: u64,
    /// Run the secondary objective after feasibility is settled.
    pub objective: bool,
    /// Hurwitz threshold `Re λ < −hurwitz_rel·‖Ā‖₂`.
    pub hurwitz_rel: f64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            tol: 1e-9,
            max_iter: 150,
            vertex_cap: DEFAULT_VERTEX_CAP,
            samples: 64,
            seed: 0,
            objective: false,
            hurwitz_rel: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub label: String,
    pub violation: f64,
}

/// Outcome of one post-solve property check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub samples: usize,
    /// Smallest slack seen; positive means the property held everywhere sampled.
    pub worst_slack: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub method: Method,
    /// Lyapunov matrix, scale-free.
    pub p: Option<DMatrix<f64>>,
    /// Multipliers in physical units (1/s), except `t`.
    pub scalars: BTreeMap<String, f64>,
    pub max_violation: f64,
    pub residuals: Vec<Residual>,
    pub checks: Vec<Check>,
    pub box_digest: String,
    /// Digest of `A` and the uncertain rows only; survives a change of bounds.
    pub matrix_digest: String,
    /// Digest of the box originally solved, for reused certificates.
    pub origin_digest: Option<String>,
    pub delta_lo: Vec<f64>,
    pub delta_hi: Vec<f64>,
    /// `‖Ā‖₂` used for normalisation.
    pub scale: f64,
    pub margin: f64,
    pub objective: Option<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NotCertified {
    /// The solver bounded the attainable margin below `eps`.
    Infeasible { margin_upper_bound: f64 },
    Inconclusive(String),
    /// A witness was found but failed re-verification.
    Numerical(String),
}

impl NotCertified {
    pub fn is_inconclusive(&self) -> bool {
        matches!(self, NotCertified::Inconclusive(_))
    }

    pub fn describe(&self) -> String {
        match self {
            NotCertified::Infeasible { margin_upper_bound } => {
                format!("infeasible (margin bound {margin_upper_bound:.3e})")
            }
            NotCertified::Inconclusive(r) => format!("inconclusive: {r}"),
            NotCertified::Numerical(r) => format!("numerical: {r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Certified(Certificate),
    NotCertified(NotCertified),
}

impl Verdict {
    pub fn is_certified(&self) -> bool {
        matches!(self, Verdict::Certified(_))
    }

    pub fn certificate(&self) -> Option<&Certificate> {
        match self {
            Verdict::Certified(c) => Some(c),
            Verdict::NotCertified(_) => None,
        }
    }
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().iter().cloned().fold(0.0, f64::max)
}

pub fn rightmost_eigenvalue(m: &DMatrix<f64>) -> Complex<f64> {
    m.complex_eigenvalues()
        .iter()
        .cloned()
        .fold(Complex::new(f64::NEG_INFINITY, 0.0), |acc, z| if z.re > acc.re { z } else { acc })
}

fn selector(dim: usize, row: usize, scale: f64) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(dim, dim);
    d[(row, row)] = scale;
    d
}

/// Problem builder output: the LMI problem plus scalar handles and their
/// physical rescaling factors.
struct Formulation {
    problem: LmiProblem,
    /// (name, id, factor) with physical value = factor · normalised value.
    scalars: Vec<(String, ScalarId, f64)>,
    scale: f64,
}

fn scale_of(bx: &UncertaintyBox) -> f64 {
    let s = spectral_norm(bx.a_bar());
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

fn positive_p(problem: &mut LmiProblem, n: usize) -> Result<(), LmiError> {
    problem.add_constraint("P > 0", MatrixExpr::new(n).p_scaled(1.0), Relation::Psd, true)
}

fn lemma1_problem(bx: &UncertaintyBox, opts: &CertifyOptions) -> Result<Formulation, CertifyError> {
    let s = scale_of(bx);
    let n = bx.dim();
    let mut problem = LmiProblem::new(n, opts.eps)?;
    positive_p(&mut problem, n)?;
    for (j, v) in bx.vertices(opts.vertex_cap)?.enumerate() {
        problem.add_constraint(
            format!("vertex {j}"),
            MatrixExpr::new(n).lyapunov(&(v / s)),
            Relation::Nsd,
            true,
        )?;
    }
    Ok(Formulation {
        problem,
        scalars: vec![],
        scale: s,
    })
}

fn lemma2_problem(bx: &UncertaintyBox, opts: &CertifyOptions) -> Result<Formulation, CertifyError> {
    let s = scale_of(bx);
    let n = bx.dim();
    let mut problem = LmiProblem::new(n, opts.eps)?;
    let g = problem.add_scalar("gamma", Sign::Positive);
    let t = problem.add_scalar("t", Sign::Positive);
    positive_p(&mut problem, n)?;
    problem.add_constraint(
        "PA + A'P <= -gamma I",
        MatrixExpr::new(n).lyapunov(&(bx.a_bar() / s)).scalar_identity(g, 1.0),
        Relation::Nsd,
        false,
    )?;
    problem.add_constraint(
        "P <= t I",
        MatrixExpr::new(n).p_scaled(1.0).scalar_identity(t, -1.0),
        Relation::Nsd,
        false,
    )?;
    problem.add_constraint(
        "2 t dmax < gamma",
        MatrixExpr::new(1)
            .scalar_identity(t, 2.0 * bx.delta_max() / s)
            .scalar_identity(g, -1.0),
        Relation::Nsd,
        true,
    )?;
    problem.set_objective(vec![(t, 1.0), (g, -1.0)])?;
    Ok(Formulation {
        problem,
        scalars: vec![("gamma".into(), g, s), ("t".into(), t, 1.0)],
        scale: s,
    })
}

fn prop1_problem(bx: &UncertaintyBox, opts: &CertifyOptions) -> Result<Formulation, CertifyError> {
    let s = scale_of(bx);
    let n = bx.dim();
    let loads = bx.loads();
    let mut problem = LmiProblem::new(n, opts.eps)?;
    let gammas: Vec<ScalarId> = (0..loads)
        .map(|k| problem.add_scalar(format!("gamma{}", k + 1), Sign::Positive))
        .collect();
    let etas: Vec<ScalarId> = (0..loads)
        .map(|k| problem.add_scalar(format!("eta{}", k + 1), Sign::Positive))
        .collect();
    positive_p(&mut problem, n)?;
    // γ₀ = Σ η_k is substituted directly.
    let mut corner = MatrixExpr::new(n).lyapunov(&(bx.a_bar() / s));
    for &e in &etas {
        corner = corner.scalar_identity(e, 1.0);
    }
    problem.add_constraint("PA + A'P <= -gamma0 I", corner, Relation::Nsd, false)?;
    for (k, &row) in bx.rows().iter().enumerate() {
        let m = selector(n, row, bx.delta_hi()[k] / s);
        problem.add_constraint(
            format!("dG{} >= (gamma{} - eta{}) I", k + 1, k + 1, k + 1),
            MatrixExpr::new(n)
                .lyapunov(&m)
                .scalar_identity(gammas[k], -1.0)
                .scalar_identity(etas[k], 1.0),
            Relation::Psd,
            false,
        )?;
    }
    problem.set_objective(gammas.iter().map(|&g| (g, -1.0)).collect())?;
    let mut scalars = Vec::new();
    for k in 0..loads {
        scalars.push((format!("gamma{}", k + 1), gammas[k], s));
    }
    for k in 0..loads {
        scalars.push((format!("eta{}", k + 1), etas[k], s));
    }
    Ok(Formulation { problem, scalars, scale: s })
}

fn formulate(method: Method, bx: &UncertaintyBox, opts: &CertifyOptions) -> Result<Formulation, CertifyError> {
    match method {
        Method::Lemma1 => lemma1_problem(bx, opts),
        Method::Lemma2 => lemma2_problem(bx, opts),
        Method::Prop1 => prop1_problem(bx, opts),
        other => Err(CertifyError::NotASolver(other)),
    }
}

/// Deterministic vertex sample: everything when small, otherwise both
/// extreme corners plus seeded draws.
pub fn sample_vertices(bx: &UncertaintyBox, samples: usize, seed: u64) -> Vec<u64> {
    let loads = bx.loads().min(63);
    let total = 1u64 << loads;
    if total <= samples.max(2) as u64 {
        return (0..total).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0, total - 1];
    while out.len() < samples.max(2) {
        out.push(rng.random_range(0..total));
    }
    out
}

fn symmetric_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let ev = sym.symmetric_eigenvalues();
    let lo = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// `Q_j = Σ (δ̄_k − δ_jk) G_k` for vertex `j`.
fn q_matrix(bx: &UncertaintyBox, p: &DMatrix<f64>, j: u64) -> DMatrix<f64> {
    let n = bx.dim();
    let mut delta = DMatrix::zeros(n, n);
    for (k, &row) in bx.rows().iter().enumerate() {
        delta[(row, row)] = bx.delta_hi()[k] - bx.vertex_delta(j, k);
    }
    let pd = p * &delta;
    &pd + pd.transpose()
}

fn g_matrix(p: &DMatrix<f64>, row: usize) -> DMatrix<f64> {
    let n = p.nrows();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        g[(i, row)] += p[(i, row)];
        g[(row, i)] += p[(row, i)];
    }
    g
}

fn post_checks(
    method: Method,
    bx: &UncertaintyBox,
    p: &DMatrix<f64>,
    scalars: &BTreeMap<String, f64>,
    scale: f64,
    opts: &CertifyOptions,
) -> Vec<Check> {
    let idx = sample_vertices(bx, opts.samples, opts.seed);
    let count = idx.len();
    let lyap: Vec<f64> = idx
        .par_iter()
        .map(|&j| {
            let a = bx.vertex(j);
            let pa = p * &a;
            -symmetric_extremes(&(&pa + pa.transpose())).1 / scale
        })
        .collect();
    let mut checks = vec![summarise("vertex Lyapunov decrease", &lyap)];
    match method {
        Method::Lemma2 => {
            let gamma = scalars["gamma"];
            let slack: Vec<f64> = idx
                .par_iter()
                .map(|&j| (gamma - spectral_norm(&q_matrix(bx, p, j))) / scale)
                .collect();
            checks.push(summarise("|Q_j| < gamma", &slack));
        }
        Method::Prop1 => {
            let gamma0 = scalars["gamma0"];
            let gmins: Vec<f64> = bx
                .rows()
                .iter()
                .map(|&r| symmetric_extremes(&g_matrix(p, r)).0)
                .collect();
            let pairs: Vec<(f64, f64)> = idx
                .par_iter()
                .map(|&j| {
                    let qmin = symmetric_extremes(&q_matrix(bx, p, j)).0;
                    let weyl: f64 = (0..bx.loads())
                        .map(|k| (bx.delta_hi()[k] - bx.vertex_delta(j, k)) * gmins[k])
                        .sum();
                    let tol = 1e-9 * (1.0 + weyl.abs() + qmin.abs());
                    ((qmin + gamma0) / scale, (qmin - weyl + tol) / scale)
                })
                .collect();
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            checks.push(summarise("min eig Q_j > -gamma0", &a));
            checks.push(summarise("Weyl lower bound", &b));
        }
        _ => {}
    }
    debug_assert!(checks.iter().all(|c| c.samples == count));
    checks
}

fn summarise(name: &str, slack: &[f64]) -> Check {
    let worst = slack.iter().cloned().fold(f64::INFINITY, f64::min);
    Check {
        name: name.to_string(),
        samples: slack.len(),
        worst_slack: worst,
        passed: worst > 0.0,
    }
}

/// Builds the certificate for a verified solution, or downgrades it.
fn issue(
    method: Method,
    bx: &UncertaintyBox,
    form: &Formulation,
    sol: LmiSolution,
    opts: &CertifyOptions,
) -> Result<Verdict, CertifyError> {
    let report = verify(&form.problem, &sol)?;
    if !report.passes(opts.tol) {
        return Ok(Verdict::NotCertified(NotCertified::Numerical(format!(
            "witness violates constraints by {:.3e}",
            report.max_violation
        ))));
    }
    let mut scalars = BTreeMap::new();
    for (name, id, factor) in &form.scalars {
        scalars.insert(name.clone(), sol.scalar(*id) * factor);
    }
    if method == Method::Prop1 {
        let g0: f64 = (0..bx.loads()).map(|k| scalars[&format!("eta{}", k + 1)]).sum();
        scalars.insert("gamma0".into(), g0);
    }
    let p = (&sol.p + sol.p.transpose()) * 0.5;
    let checks = post_checks(method, bx, &p, &scalars, form.scale, opts);
    if let Some(bad) = checks.iter().find(|c| !c.passed) {
        return Ok(Verdict::NotCertified(NotCertified::Numerical(format!(
            "post-check '{}' failed (slack {:.3e})",
            bad.name, bad.worst_slack
        ))));
    }
    let objective = sol.objective_value.map(|v| v * form.scale);
    Ok(Verdict::Certified(Certificate {
        method,
        p: Some(p),
        scalars,
        max_violation: report.max_violation,
        residuals: report
            .constraints
            .into_iter()
            .map(|r| Residual {
                label: r.label,
                violation: r.violation,
            })
            .collect(),
        checks,
        box_digest: bx.digest(),
        matrix_digest: bx.matrix_digest(),
        origin_digest: None,
        delta_lo: bx.delta_lo().to_vec(),
        delta_hi: bx.delta_hi().to_vec(),
        scale: form.scale,
        margin: opts.eps,
        objective,
        iterations: sol.iterations,
    }))
}

fn solve_options(opts: &CertifyOptions) -> SolveOptions {
    SolveOptions {
        tol: opts.tol,
        max_iter: opts.max_iter,
        ..SolveOptions::default()
    }
}

fn run(method: Method, bx: &UncertaintyBox, opts: &CertifyOptions) -> Result<Verdict, CertifyError> {
    let mut form = formulate(method, bx, opts)?;
    if !opts.objective {
        form.problem.clear_objective();
    }
    let outcome = match solve_with(&form.problem, &solve_options(opts)) {
        Ok(o) => o,
        Err(LmiError::NumericalBreakdown { iterations, reason }) => {
            return Ok(Verdict::NotCertified(NotCertified::Inconclusive(format!(
                "solver breakdown after {iterations} iterations: {reason}"
            ))))
        }
        Err(e) => return Err(e.into()),
    };
    match outcome {
        SolveOutcome::Feasible(sol) => issue(method, bx, &form, sol, opts),
        SolveOutcome::Infeasible(inf) => Ok(Verdict::NotCertified(NotCertified::Infeasible {
            margin_upper_bound: inf.margin_upper_bound,
        })),
        SolveOutcome::Inconclusive(inc) => Ok(Verdict::NotCertified(NotCertified::Inconclusive(
            format!("{} after {} iterations", inc.reason, inc.iterations),
        ))),
    }
}

pub fn check_lemma1(bx: &UncertaintyBox, opts: &CertifyOptions) -> Result<Verdict, CertifyError> {
    run(Method::Lemma1, bx, opts)
}

pub fn check_lemma2(bx: &UncertaintyBox, opts: &CertifyOptions) -> Result<Verdict, CertifyError> {
    run(Method::Lemma2, bx, opts)
}

pub fn check_prop1(bx: &UncertaintyBox, opts: &CertifyOptions) -> Result<Verdict, CertifyError> {
    run(Method::Prop1, bx, opts)
}

/// Dispatches to one of the solver-backed checks.
pub fn certify(method: Method, bx: &UncertaintyBox, opts: &CertifyOptions) -> Result<Verdict, CertifyError> {
    run(method, bx, opts)
}

/// Re-checks an existing certificate's witness against another box without
/// solving. Returns the refreshed certificate if it still holds.
pub fn reuse_witness(
    cert: &Certificate,
    bx: &UncertaintyBox,
    opts: &CertifyOptions,
) -> Result<Option<Certificate>, CertifyError> {
    let Some(p) = &cert.p else {
        return Ok(None);
    };
    if p.nrows() != bx.dim() {
        return Ok(None);
    }
    let form = formulate(cert.method, bx, opts)?;
    let mut values = vec![0.0; form.problem.scalars().len()];
    for (name, id, factor) in &form.scalars {
        match cert.scalars.get(name) {
            Some(v) => values[id.0] = v / factor,
            None => return Ok(None),
        }
    }
    let mut cand = LmiSolution::candidate(p.clone(), values);
    cand.iterations = 0;
    match issue(cert.method, bx, &form, cand, opts)? {
        Verdict::Certified(c) => Ok(Some(c)),
        Verdict::NotCertified(_) => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleVerdict {
    AllHurwitz { rightmost: f64, vertices: u64 },
    UnstableVertex { index: u64, eigenvalue: Complex<f64> },
}

impl OracleVerdict {
    pub fn all_hurwitz(&self) -> bool {
        matches!(self, OracleVerdict::AllHurwitz { .. })
    }
}

/// Exhaustive eigenvalue check of every vertex.
pub fn vertex_oracle(bx: &UncertaintyBox, opts: &CertifyOptions) -> Result<OracleVerdict, CertifyError> {
    let count = bx.vertices(opts.vertex_cap)?.len() as u64;
    let threshold = -opts.hurwitz_rel * spectral_norm(bx.a_bar());
    let eigs: Vec<Complex<f64>> = (0..count)
        .into_par_iter()
        .map(|j| rightmost_eigenvalue(&bx.vertex(j)))
        .collect();
    if let Some(j) = eigs.iter().position(|z| !(z.re < threshold)) {
        return Ok(OracleVerdict::UnstableVertex {
            index: j as u64,
            eigenvalue: eigs[j],
        });
    }
    let rightmost = eigs.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    Ok(OracleVerdict::AllHurwitz {
        rightmost,
        vertices: count,
    })
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertificateError {
    #[error("certificate JSON: {0}")]
    Json(String),
    #[error("certificate P: {0}")]
    Matrix(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CertificateJson {
    method: Method,
    dim: usize,
    /// Row-major little-endian f64, base64.
    #[serde(default)]
    p: Option<String>,
    scalars: BTreeMap<String, f64>,
    max_violation: f64,
    residuals: Vec<Residual>,
    checks: Vec<Check>,
    box_digest: String,
    matrix_digest: String,
    #[serde(default)]
    origin_digest: Option<String>,
    delta_lo: Vec<f64>,
    delta_hi: Vec<f64>,
    scale: f64,
    margin: f64,
    #[serde(default)]
    objective: Option<f64>,
    iterations: usize,
}

const MAX_CERT_DIM: usize = 4096;

pub fn encode_matrix(m: &DMatrix<f64>) -> String {
    let mut bytes = Vec::with_capacity(m.len() * 8);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            bytes.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    B64.encode(bytes)
}

pub fn decode_matrix(text: &str, dim: usize) -> Result<DMatrix<f64>, CertificateError> {
    let bad = |s: String| CertificateError::Matrix(s);
    if dim == 0 || dim > MAX_CERT_DIM {
        return Err(bad(format!("dimension {dim} outside 1..={MAX_CERT_DIM}")));
    }
    let bytes = B64.decode(text.trim()).map_err(|e| bad(e.to_string()))?;
    let expected = dim * dim * 8;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let mut m = DMatrix::zeros(dim, dim);
    for (idx, chunk) in bytes.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        if !v.is_finite() {
            return Err(bad(format!("non-finite entry at {idx}")));
        }
        m[(idx / dim, idx % dim)] = v;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    for i in 0..dim {
        for j in (i + 1)..dim {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return Err(bad(format!("not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(m)
}

impl Certificate {
    pub fn dim(&self) -> usize {
        self.p.as_ref().map(|p| p.nrows()).unwrap_or(0)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let raw = CertificateJson {
            method: self.method,
            dim: self.dim(),
            p: self.p.as_ref().map(encode_matrix),
            scalars: self.scalars.clone(),
            max_violation: self.max_violation,
            residuals: self.residuals.clone(),
            checks: self.checks.clone(),
            box_digest: self.box_digest.clone(),
            matrix_digest: self.matrix_digest.clone(),
            origin_digest: self.origin_digest.clone(),
            delta_lo: self.delta_lo.clone(),
            delta_hi: self.delta_hi.clone(),
            scale: self.scale,
            margin: self.margin,
            objective: self.objective,
            iterations: self.iterations,
        };
        serde_json::to_value(raw).expect("certificate serialises")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("certificate serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, CertificateError> {
        let raw: CertificateJson =
            serde_json::from_str(text).map_err(|e| CertificateError::Json(e.to_string()))?;
        if raw.delta_lo.len() != raw.delta_hi.len() {
            return Err(CertificateError::Json("delta_lo and delta_hi differ in length".into()));
        }
        let p = match (&raw.method, &raw.p) {
            (Method::VertexOracle, None) => None,
            (Method::VertexOracle, Some(_)) => {
                return Err(CertificateError::Json("oracle certificates carry no P".into()))
            }
            (_, Some(text)) => Some(decode_matrix(text, raw.dim)?),
            (_, None) => return Err(CertificateError::Json("missing P".into())),
        };
        Ok(Self {
            method: raw.method,
            p,
            scalars: raw.scalars,
            max_violation: raw.max_violation,
            residuals: raw.residuals,
            checks: raw.checks,
            box_digest: raw.box_digest,
            matrix_digest: raw.matrix_digest,
            origin_digest: raw.origin_digest,
            delta_lo: raw.delta_lo,
            delta_hi: raw.delta_hi,
            scale: raw.scale,
            margin: raw.margin,
            objective: raw.objective,
            iterations: raw.iterations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_box(a: f64, delta: f64) -> UncertaintyBox {
        UncertaintyBox::uniform(DMatrix::from_element(1, 1, -a), vec![0], delta).unwrap()
    }

    #[test]
    fn degenerate_box_matches_hurwitz() {
        let stable = UncertaintyBox::uniform(
            DMatrix::from_row_slice(2, 2, &[-1.0, 5.0, 0.0, -2.0]),
            vec![1],
            0.0,
        )
        .unwrap();
        for m in Method::SOLVERS {
            assert!(certify(m, &stable, &CertifyOptions::default()).unwrap().is_certified(), "{m:?}");
        }
        let unstable = scalar_box(-0.5, 0.0);
        assert!(!check_lemma1(&unstable, &CertifyOptions::default()).unwrap().is_certified());
    }

    #[test]
    fn lemma2_hand_witness_case() {
        // Ā = −I (4 states), δ̄_max = 0.25 on one row: A = −I − 0.25 D.
        let mut a = -DMatrix::identity(4, 4);
        a[(3, 3)] -= 0.25;
        let bx = UncertaintyBox::uniform(a, vec![3], 0.25).unwrap();
        assert_eq!(bx.a_bar(), &-DMatrix::identity(4, 4));
        let v = check_lemma2(&bx, &CertifyOptions::default()).unwrap();
        let c = v.certificate().expect("certified");
        assert!(2.0 * c.scalars["t"] * 0.25 < c.scalars["gamma"]);
    }

    #[test]
    fn scalar_oracle_sign_flip() {
        let opts = CertifyOptions::default();
        assert!(vertex_oracle(&scalar_box(5.5, 5.0), &opts).unwrap().all_hurwitz());
        assert!(!vertex_oracle(&scalar_box(5.5, 6.0), &opts).unwrap().all_hurwitz());
    }

    #[test]
    fn certificate_round_trip() {
        let bx = scalar_box(3.0, 1.0);
        let v = check_prop1(&bx, &CertifyOptions::default()).unwrap();
        let c = v.certificate().unwrap();
        let back = Certificate::from_json(&c.to_json()).unwrap();
        assert_eq!(&back, c);
    }

    #[test]
    fn decode_rejects_bad_lengths() {
        assert!(decode_matrix("AAAA", 1).is_err());
        assert!(decode_matrix("", 0).is_err());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert!(decode_matrix(&encode_matrix(&m), 2).is_err());
    }
}
