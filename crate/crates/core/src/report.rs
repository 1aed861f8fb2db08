//! Deterministic JSON reports.

use serde::Serialize;
use serde_json::{Map, Number, Value};
use sha2::{Digest, Sha256};

use crate::certify::{rightmost_eigenvalue, spectral_norm, Method, NotCertified, Verdict};
use crate::model::{MicrogridSpec, SystemMatrices};
use crate::uncertainty::{hex, BoxSummary, UncertaintyBox};

pub const SIGNIFICANT_DIGITS: usize = 12;

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Rounds a float to [`SIGNIFICANT_DIGITS`] significant digits.
pub fn round_sig(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, v).parse().unwrap_or(v)
}

/// Rounds every float in place; object keys are already sorted since
/// `serde_json::Map` is ordered.
pub fn canonicalize(value: &mut Value) {
    match value {
        Value::Number(n) if n.is_f64() => {
            let v = n.as_f64().expect("f64 number");
            if let Some(r) = Number::from_f64(round_sig(v)) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(canonicalize),
        Value::Object(map) => map.values_mut().for_each(canonicalize),
        _ => {}
    }
}

/// Pretty JSON with rounded floats and a trailing newline.
pub fn to_canonical_json<T: Serialize>(value: &T) -> String {
    let mut v = serde_json::to_value(value).expect("report types serialize");
    canonicalize(&mut v);
    let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
    s.push('\n');
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct MatrixSummary {
    pub buses: usize,
    pub states: usize,
    pub sources: usize,
    pub loads: usize,
    pub lines: usize,
    pub spectral_abscissa_a: f64,
    pub spectral_abscissa_a_bar: f64,
    pub norm_a_bar: f64,
}

impl MatrixSummary {
    pub fn new(spec: &MicrogridSpec, m: &SystemMatrices, bx: &UncertaintyBox) -> Self {
        Self {
            buses: spec.n(),
            states: m.layout.dim(),
            sources: spec.source_buses().len(),
            loads: spec.load_buses().len(),
            lines: spec.lines.len(),
            spectral_abscissa_a: rightmost_eigenvalue(&m.a).re,
            spectral_abscissa_a_bar: rightmost_eigenvalue(bx.a_bar()).re,
            norm_a_bar: spectral_norm(bx.a_bar()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Certified,
    NotCertified,
    Inconclusive,
}

impl Status {
    pub fn of(verdict: &Verdict) -> Self {
        match verdict {
            Verdict::Certified(_) => Status::Certified,
            Verdict::NotCertified(NotCertified::Inconclusive(_)) => Status::Inconclusive,
            Verdict::NotCertified(_) => Status::NotCertified,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodReport {
    pub method: Method,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certificate: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

impl MethodReport {
    pub fn new(method: Method, verdict: &Verdict, seconds: Option<f64>) -> Self {
        let (detail, certificate) = match verdict {
            Verdict::Certified(c) => (None, Some(c.to_json_value())),
            Verdict::NotCertified(nc) => (Some(nc.describe()), None),
        };
        Self {
            method,
            status: Status::of(verdict),
            detail,
            certificate,
            seconds,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub name: String,
    pub input_digest: String,
    pub matrices: MatrixSummary,
    #[serde(rename = "box")]
    pub uncertainty: BoxSummary,
    pub verdicts: Vec<MethodReport>,
    #[serde(skip_serializing_if = "Map::is_empty")]
    pub extra: Map<String, Value>,
}

impl AnalysisReport {
    /// Certified if any method certified, inconclusive if none did and at
    /// least one was inconclusive.
    pub fn overall(&self) -> Status {
        if self.verdicts.iter().any(|v| v.status == Status::Certified) {
            Status::Certified
        } else if self.verdicts.iter().any(|v| v.status == Status::Inconclusive) {
            Status::Inconclusive
        } else {
            Status::NotCertified
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounds_to_twelve_digits() {
        assert_eq!(round_sig(1.0 / 3.0), 0.333333333333);
        assert_eq!(round_sig(220.4648526077098), 220.464852608);
        assert_eq!(round_sig(0.0), 0.0);
        let mut v = serde_json::json!({"b": [2.0000000000001], "a": 1});
        canonicalize(&mut v);
        assert_eq!(v.to_string(), r#"{"a":1,"b":[2.0]}"#);
    }
}
