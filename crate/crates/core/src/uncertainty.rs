//! Interval bounds on the CPL linearisation terms and the resulting polytope
//! of system matrices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::certify::{Certificate, Method};
use crate::model::{MicrogridSpec, SystemMatrices};

pub const DEFAULT_VERTEX_CAP: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UncertaintyError {
    #[error("bus {bus}: v_e_min = 0 with p_max = {p_max} W gives an unbounded interval")]
    ZeroVoltage { bus: usize, p_max: f64 },
    #[error("{loads} uncertain loads exceed the vertex cap of {cap}")]
    CapExceeded { loads: usize, cap: usize },
    #[error("interval {index}: need 0 <= lo <= hi and finite, got [{lo}, {hi}]")]
    BadInterval { index: usize, lo: f64, hi: f64 },
    #[error("uncertain row {row} is outside a {dim}x{dim} matrix")]
    BadRow { row: usize, dim: usize },
    #[error("{0}")]
    Length(String),
    #[error("boxes are built on different system matrices")]
    MatrixMismatch,
    #[error("certificate of kind {0:?} cannot be reused")]
    NotReusable(Method),
}

/// `A + Σ δ_k D_k` with `δ_k ∈ [lo_k, hi_k]`, where `D_k` selects diagonal entry `rows[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyBox {
    a: DMatrix<f64>,
    rows: Vec<usize>,
    delta_lo: Vec<f64>,
    delta_hi: Vec<f64>,
    a_bar: DMatrix<f64>,
    delta_max: f64,
}

/// Per-load interval from the power and steady-state voltage ranges.
pub fn delta_bounds(spec: &MicrogridSpec, m: &SystemMatrices) -> Result<UncertaintyBox, UncertaintyError> {
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for k in spec.load_buses() {
        let b = &spec.buses[k];
        if b.p_max > 0.0 && b.v_e_min <= 0.0 {
            return Err(UncertaintyError::ZeroVoltage {
                bus: k + 1,
                p_max: b.p_max,
            });
        }
        let l = if b.p_min == 0.0 {
            0.0
        } else {
            b.p_min / (b.c_l * b.v_e_max * b.v_e_max)
        };
        let h = if b.p_max == 0.0 {
            0.0
        } else {
            b.p_max / (b.c_l * b.v_e_min * b.v_e_min)
        };
        lo.push(l);
        hi.push(h);
    }
    UncertaintyBox::new(m.a.clone(), m.layout.v_l_rows(), lo, hi)
}

impl UncertaintyBox {
    pub fn new(
        a: DMatrix<f64>,
        rows: Vec<usize>,
        delta_lo: Vec<f64>,
        delta_hi: Vec<f64>,
    ) -> Result<Self, UncertaintyError> {
        let dim = a.nrows();
        if a.ncols() != dim {
            return Err(UncertaintyError::Length(format!("A is {}x{}", a.nrows(), a.ncols())));
        }
        if delta_lo.len() != rows.len() || delta_hi.len() != rows.len() {
            return Err(UncertaintyError::Length(format!(
                "{} rows but {} lower and {} upper bounds",
                rows.len(),
                delta_lo.len(),
                delta_hi.len()
            )));
        }
        for &r in &rows {
            if r >= dim {
                return Err(UncertaintyError::BadRow { row: r, dim });
            }
        }
        for (i, (&l, &h)) in delta_lo.iter().zip(&delta_hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && 0.0 <= l && l <= h) {
                return Err(UncertaintyError::BadInterval { index: i, lo: l, hi: h });
            }
        }
        let mut a_bar = a.clone();
        for (&r, &h) in rows.iter().zip(&delta_hi) {
            a_bar[(r, r)] += h;
        }
        let delta_max = delta_hi.iter().cloned().fold(0.0, f64::max);
        Ok(Self {
            a,
            rows,
            delta_lo,
            delta_hi,
            a_bar,
            delta_max,
        })
    }

    /// Box with `δ_k ∈ [0, delta]` on every uncertain row.
    pub fn uniform(a: DMatrix<f64>, rows: Vec<usize>, delta: f64) -> Result<Self, UncertaintyError> {
        let k = rows.len();
        Self::new(a, rows, vec![0.0; k], vec![delta; k])
    }

    /// Same matrix and rows, new bounds.
    pub fn with_bounds(&self, lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, UncertaintyError> {
        Self::new(self.a.clone(), self.rows.clone(), lo, hi)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn a_bar(&self) -> &DMatrix<f64> {
        &self.a_bar
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn delta_lo(&self) -> &[f64] {
        &self.delta_lo
    }

    pub fn delta_hi(&self) -> &[f64] {
        &self.delta_hi
    }

    pub fn delta_max(&self) -> f64 {
        self.delta_max
    }

    pub fn loads(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn vertex_count(&self) -> u128 {
        1u128 << self.rows.len().min(127)
    }

    /// Vertex `j`: bit `k` of `j` picks `hi_k` (set) or `lo_k` (clear).
    pub fn vertex(&self, j: u64) -> DMatrix<f64> {
        let mut m = self.a.clone();
        for (k, &r) in self.rows.iter().enumerate() {
            m[(r, r)] += self.vertex_delta(j, k);
        }
        m
    }

    pub fn vertex_delta(&self, j: u64, k: usize) -> f64 {
        if (j >> k) & 1 == 1 {
            self.delta_hi[k]
        } else {
            self.delta_lo[k]
        }
    }

    /// Lazily enumerates all `2^loads` vertices; fails above `cap` loads.
    pub fn vertices(&self, cap: usize) -> Result<Vertices<'_>, UncertaintyError> {
        if self.rows.len() > cap || self.rows.len() >= 64 {
            return Err(UncertaintyError::CapExceeded {
                loads: self.rows.len(),
                cap,
            });
        }
        Ok(Vertices {
            bx: self,
            next: 0,
            end: 1u64 << self.rows.len(),
        })
    }

    /// SHA-256 over dimensions, uncertain rows, bounds and the matrix `A`.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim() as u64).to_le_bytes());
        h.update((self.rows.len() as u64).to_le_bytes());
        for &r in &self.rows {
            h.update((r as u64).to_le_bytes());
        }
        for v in self.delta_lo.iter().chain(&self.delta_hi) {
            h.update(v.to_le_bytes());
        }
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                h.update(self.a[(i, j)].to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// SHA-256 over `A` and the uncertain rows, ignoring the bounds.
    pub fn matrix_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim() as u64).to_le_bytes());
        for &r in &self.rows {
            h.update((r as u64).to_le_bytes());
        }
        for v in self.a.iter() {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }

    pub fn summary(&self) -> BoxSummary {
        BoxSummary {
            delta_lo: self.delta_lo.clone(),
            delta_hi: self.delta_hi.clone(),
            delta_max: self.delta_max,
            digest: self.digest(),
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSummary {
    pub delta_lo: Vec<f64>,
    pub delta_hi: Vec<f64>,
    pub delta_max: f64,
    pub digest: String,
}

pub struct Vertices<'a> {
    bx: &'a UncertaintyBox,
    next: u64,
    end: u64,
}

impl Iterator for Vertices<'_> {
    type Item = DMatrix<f64>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.end {
            return None;
        }
        let m = self.bx.vertex(self.next);
        self.next += 1;
        Some(m)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.end - self.next) as usize;
        (left, Some(left))
    }
}

impl ExactSizeIterator for Vertices<'_> {}

#[derive(Debug, Clone, PartialEq)]
pub enum Recheck {
    Certified(Certificate),
    MustResolve { loads: Vec<usize> },
}

/// Reuses a Lemma-2 or Prop-1 certificate for `new` without solving, valid
/// whenever no upper bound grew. Lower bounds are unconstrained.
pub fn corollary_recheck(
    old: &UncertaintyBox,
    new: &UncertaintyBox,
    cert: &Certificate,
) -> Result<Recheck, UncertaintyError> {
    if old.a != new.a || old.rows != new.rows {
        return Err(UncertaintyError::MatrixMismatch);
    }
    if !matches!(cert.method, Method::Lemma2 | Method::Prop1 | Method::Corollary1) {
        return Err(UncertaintyError::NotReusable(cert.method));
    }
    let grown: Vec<usize> = old
        .delta_hi
        .iter()
        .zip(&new.delta_hi)
        .enumerate()
        .filter(|(_, (o, n))| n > o)
        .map(|(k, _)| k)
        .collect();
    if !grown.is_empty() {
        return Ok(Recheck::MustResolve { loads: grown });
    }
    let mut c = cert.clone();
    c.method = Method::Corollary1;
    c.box_digest = new.digest();
    c.delta_lo = new.delta_lo.clone();
    c.delta_hi = new.delta_hi.clone();
    c.origin_digest = Some(cert.origin_digest.clone().unwrap_or_else(|| old.digest()));
    Ok(Recheck::Certified(c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{assemble, uniform_bus};
    use approx::assert_relative_eq;

    fn one_bus() -> (MicrogridSpec, SystemMatrices) {
        let spec = MicrogridSpec::new("one", vec![uniform_bus(0.2)], vec![]).unwrap();
        let m = assemble(&spec);
        (spec, m)
    }

    #[test]
    fn table_bounds() {
        let (spec, m) = one_bus();
        let bx = delta_bounds(&spec, &m).unwrap();
        assert_relative_eq!(bx.delta_hi()[0], 20000.0 / (0.0007 * 360.0 * 360.0), max_relative = 1e-14);
        assert_relative_eq!(bx.delta_hi()[0], 220.46, epsilon = 0.01);
        assert_relative_eq!(bx.delta_lo()[0], 36.89, epsilon = 0.01);
    }

    #[test]
    fn zero_lower_power() {
        let mut bus = uniform_bus(0.2);
        bus.p_min = 0.0;
        let spec = MicrogridSpec::new("one", vec![bus], vec![]).unwrap();
        let bx = delta_bounds(&spec, &assemble(&spec)).unwrap();
        assert_eq!(bx.delta_lo()[0], 0.0);
    }

    #[test]
    fn vertex_enumeration() {
        let a = -DMatrix::identity(4, 4);
        let bx = UncertaintyBox::new(a, vec![2, 3], vec![0.0, 1.0], vec![2.0, 3.0]).unwrap();
        let vs: Vec<_> = bx.vertices(20).unwrap().collect();
        assert_eq!(vs.len(), 4);
        let mut max = vs[0].clone();
        for v in &vs {
            max = max.zip_map(v, f64::max);
        }
        assert_eq!(&max, bx.a_bar());
        assert!(bx.vertices(1).is_err());
    }

    #[test]
    fn degenerate_interval_vertices_equal_a_bar() {
        let bx = UncertaintyBox::new(-DMatrix::identity(1, 1), vec![0], vec![0.5], vec![0.5]).unwrap();
        for v in bx.vertices(20).unwrap() {
            assert_eq!(&v, bx.a_bar());
        }
    }

    #[test]
    fn rejects_inverted_interval() {
        assert!(UncertaintyBox::new(DMatrix::zeros(2, 2), vec![1], vec![2.0], vec![1.0]).is_err());
    }
}
