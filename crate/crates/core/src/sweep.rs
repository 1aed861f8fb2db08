//! Uniform-δ threshold search and the operational power/voltage bounds.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::certify::{certify, reuse_witness, Certificate, CertifyError, CertifyOptions, Method, Verdict};
use crate::uncertainty::{UncertaintyBox, UncertaintyError};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("{0} is not a sweepable method")]
    Method(Method),
    #[error("step must be finite and > 0, got {0}")]
    Step(f64),
    #[error("start must be finite and >= 0, got {0}")]
    Start(f64),
    #[error("inconclusive solve at delta = {at} ({reason}); certified up to {certified:?}")]
    Inconclusive {
        at: f64,
        reason: String,
        certified: Option<f64>,
        history: Vec<Probe>,
    },
    #[error("no failing delta found up to {0}")]
    Unbounded(f64),
    #[error(transparent)]
    Certify(#[from] CertifyError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// `start, start + step, …` until the first failure.
    Increment,
    /// Doubling to bracket the first failure, then bisection on the step grid.
    /// Agrees with `Increment` whenever verdicts are monotone in δ.
    Bracket,
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub start: f64,
    pub step: f64,
    /// Give up once δ exceeds this without a failure.
    pub limit: f64,
    pub mode: SearchMode,
    /// Bisect inside `[δ̄ᵘ, δ̄ᵘ + step]` down to this width.
    pub refine: Option<f64>,
    /// Try the previous certificate before solving.
    pub reuse: bool,
    pub certify: CertifyOptions,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            start: 1.0,
            step: 1.0,
            limit: 1e5,
            mode: SearchMode::Increment,
            refine: None,
            reuse: true,
            certify: CertifyOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Probe {
    pub delta: f64,
    pub certified: bool,
    /// Certified by re-checking an earlier witness, without a solve.
    pub reused: bool,
    pub detail: String,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub method: Method,
    /// Largest certified δ on the step grid; 0 when nothing certifies.
    pub delta_u: f64,
    pub first_failure: f64,
    pub probes: Vec<Probe>,
    pub refinement: Option<[f64; 2]>,
    pub solves: usize,
    #[serde(skip)]
    pub certificate: Option<Certificate>,
}

impl SweepResult {
    /// Mean wall time over probes that needed a solve.
    pub fn mean_solve_seconds(&self) -> f64 {
        let (sum, count) = self
            .probes
            .iter()
            .filter(|p| !p.reused)
            .fold((0.0, 0usize), |(s, c), p| (s + p.seconds, c + 1));
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

struct Search<'a> {
    a: &'a DMatrix<f64>,
    rows: &'a [usize],
    method: Method,
    cfg: &'a SweepConfig,
    probes: Vec<Probe>,
    last_cert: Option<Certificate>,
    best: Option<(f64, Certificate)>,
    solves: usize,
}

impl Search<'_> {
    fn probe(&mut self, delta: f64) -> Result<bool, SweepError> {
        let bx = UncertaintyBox::uniform(self.a.clone(), self.rows.to_vec(), delta)?;
        let clock = Instant::now();
        if self.cfg.reuse {
            if let Some(prev) = &self.last_cert {
                if let Some(cert) = reuse_witness(prev, &bx, &self.cfg.certify)? {
                    self.record(delta, true, true, "reused witness".into(), clock, Some(cert));
                    return Ok(true);
                }
            }
        }
        self.solves += 1;
        match certify(self.method, &bx, &self.cfg.certify)? {
            Verdict::Certified(cert) => {
                let detail = format!("certified ({} iterations)", cert.iterations);
                self.record(delta, true, false, detail, clock, Some(cert));
                Ok(true)
            }
            Verdict::NotCertified(nc) if nc.is_inconclusive() => {
                self.record(delta, false, false, nc.describe(), clock, None);
                Err(SweepError::Inconclusive {
                    at: delta,
                    reason: nc.describe(),
                    certified: self.best.as_ref().map(|b| b.0),
                    history: std::mem::take(&mut self.probes),
                })
            }
            Verdict::NotCertified(nc) => {
                self.record(delta, false, false, nc.describe(), clock, None);
                Ok(false)
            }
        }
    }

    fn record(
        &mut self,
        delta: f64,
        certified: bool,
        reused: bool,
        detail: String,
        clock: Instant,
        cert: Option<Certificate>,
    ) {
        self.probes.push(Probe {
            delta,
            certified,
            reused,
            detail,
            seconds: clock.elapsed().as_secs_f64(),
        });
        if let Some(c) = cert {
            if self.best.as_ref().is_none_or(|b| delta > b.0) {
                self.best = Some((delta, c.clone()));
            }
            self.last_cert = Some(c);
        }
    }
}

/// Largest uniform `δ̄ₖ = δ` (with `δ̲ₖ = 0`) certified by `method`.
pub fn line_search_delta_u(
    a: &DMatrix<f64>,
    rows: &[usize],
    method: Method,
    cfg: &SweepConfig,
) -> Result<SweepResult, SweepError> {
    if !Method::SOLVERS.contains(&method) {
        return Err(SweepError::Method(method));
    }
    if !(cfg.step > 0.0 && cfg.step.is_finite()) {
        return Err(SweepError::Step(cfg.step));
    }
    if !(cfg.start >= 0.0 && cfg.start.is_finite()) {
        return Err(SweepError::Start(cfg.start));
    }
    let mut s = Search {
        a,
        rows,
        method,
        cfg,
        probes: Vec::new(),
        last_cert: None,
        best: None,
        solves: 0,
    };
    let at = |i: u64| cfg.start + i as f64 * cfg.step;
    // Index of the first failing grid point.
    let fail: u64 = match cfg.mode {
        SearchMode::Increment => {
            let mut i = 0;
            while s.probe(at(i))? {
                i += 1;
                if at(i) > cfg.limit {
                    return Err(SweepError::Unbounded(cfg.limit));
                }
            }
            i
        }
        SearchMode::Bracket => {
            let mut lo: Option<u64> = None;
            let mut hi = 0;
            while s.probe(at(hi))? {
                lo = Some(hi);
                hi = if hi == 0 { 1 } else { hi * 2 };
                if at(hi) > cfg.limit {
                    return Err(SweepError::Unbounded(cfg.limit));
                }
            }
            match lo {
                None => hi,
                Some(mut lo) => {
                    while hi - lo > 1 {
                        let mid = lo + (hi - lo) / 2;
                        if s.probe(at(mid))? {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    hi
                }
            }
        }
    };
    let first_failure = at(fail);
    let delta_u = if fail == 0 { 0.0 } else { at(fail - 1) };
    let refinement = match cfg.refine {
        Some(width) if width > 0.0 && fail > 0 => {
            let (mut lo, mut hi) = (delta_u, first_failure);
            while hi - lo > width {
                let mid = 0.5 * (lo + hi);
                if s.probe(mid)? {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Some([lo, hi])
        }
        _ => None,
    };
    let certificate = s
        .best
        .filter(|(d, _)| *d >= delta_u && fail > 0)
        .map(|(_, c)| c);
    Ok(SweepResult {
        method,
        delta_u,
        first_failure,
        probes: s.probes,
        refinement,
        solves: s.solves,
        certificate,
    })
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundsError {
    #[error("{name} must be finite and >= 0, got {value}")]
    Negative { name: &'static str, value: f64 },
    #[error("{name} must be > 0, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("delta_u = 0 admits no finite voltage bound")]
    NoFiniteBound,
}

fn non_negative(name: &'static str, value: f64) -> Result<(), BoundsError> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(BoundsError::Negative { name, value })
    }
}

fn positive(name: &'static str, value: f64) -> Result<(), BoundsError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(BoundsError::NonPositive { name, value })
    }
}

/// `δ̄ᵘ · C_l · v_min²`.
pub fn max_certifiable_power(delta_u: f64, c_l: f64, v_min: f64) -> Result<f64, BoundsError> {
    non_negative("delta_u", delta_u)?;
    positive("c_l", c_l)?;
    non_negative("v_min", v_min)?;
    Ok(delta_u * c_l * v_min * v_min)
}

/// `sqrt(p_max / (C_l · δ̄ᵘ))`.
pub fn min_certifiable_voltage(delta_u: f64, c_l: f64, p_max: f64) -> Result<f64, BoundsError> {
    non_negative("delta_u", delta_u)?;
    positive("c_l", c_l)?;
    non_negative("p_max", p_max)?;
    if delta_u == 0.0 {
        return Err(BoundsError::NoFiniteBound);
    }
    Ok((p_max / (c_l * delta_u)).sqrt())
}
