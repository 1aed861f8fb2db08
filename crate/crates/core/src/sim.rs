//! Fixed-step RK4 integration of the nonlinear model under scripted loads.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equilibrium::{solve_equilibrium, EquilibriumError};
use crate::model::{assemble, MicrogridSpec, StateKind, SystemMatrices};

pub const DEFAULT_DT: f64 = 1e-5;
pub const BLOWUP: f64 = 1e6;
pub const V_FLOOR: f64 = 1.0;
/// Powers may exceed `p_max` by this factor inside a profile.
pub const GUARD_BAND: f64 = 1.5;
/// Deviations below this fraction of `‖x_e‖` are treated as roundoff.
pub const NOISE_FLOOR: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("profile syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("profile: {0}")]
    Profile(String),
    #[error("invalid dt {0}: must be finite and > 0")]
    Dt(f64),
    #[error("invalid t_end {0}: must be finite and >= 0")]
    TEnd(f64),
    #[error("record stride must be >= 1")]
    Stride,
    #[error("ripple {0} must lie in [0, 1)")]
    Ripple(f64),
    #[error("initial state has length {found}, expected {expected}")]
    InitLength { expected: usize, found: usize },
    #[error("initial CPL voltage at state {0} is not positive")]
    InitVoltage(usize),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Knot {
    pub t: f64,
    pub p: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLoad {
    bus: usize,
    knot: Vec<Knot>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProfile {
    #[serde(default)]
    ripple: Option<f64>,
    #[serde(default)]
    seed: Option<u64>,
    load: Vec<RawLoad>,
}

/// Piecewise-linear power schedule per load bus (0-based keys).
#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfile {
    n: usize,
    schedules: BTreeMap<usize, Vec<Knot>>,
    /// Suggested ripple and seed carried by a profile file.
    pub ripple: Option<f64>,
    pub seed: Option<u64>,
}

fn interpolate(knots: &[Knot], t: f64) -> f64 {
    let first = knots[0];
    let last = knots[knots.len() - 1];
    if t <= first.t {
        return first.p;
    }
    if t >= last.t {
        return last.p;
    }
    let i = knots.partition_point(|k| k.t <= t);
    let (a, b) = (knots[i - 1], knots[i]);
    if b.t == a.t {
        return b.p;
    }
    a.p + (b.p - a.p) * (t - a.t) / (b.t - a.t)
}

impl LoadProfile {
    pub fn new(spec: &MicrogridSpec, schedules: BTreeMap<usize, Vec<Knot>>) -> Result<Self, SimError> {
        let bad = |msg: String| Err(SimError::Profile(msg));
        for (&k, knots) in &schedules {
            let Some(bus) = spec.buses.get(k) else {
                return bad(format!("bus {} does not exist", k + 1));
            };
            if !bus.has_load {
                return bad(format!("bus {} has no load", k + 1));
            }
            if knots.is_empty() {
                return bad(format!("bus {}: no knots", k + 1));
            }
            let cap = GUARD_BAND * bus.p_max;
            for (i, kn) in knots.iter().enumerate() {
                if !kn.t.is_finite() || !kn.p.is_finite() {
                    return bad(format!("bus {}: non-finite knot {}", k + 1, i + 1));
                }
                if kn.p < 0.0 || kn.p > cap {
                    return bad(format!("bus {}: power {} outside [0, {}]", k + 1, kn.p, cap));
                }
                if i > 0 && kn.t < knots[i - 1].t {
                    return bad(format!("bus {}: knots not time-sorted", k + 1));
                }
            }
        }
        for k in spec.load_buses() {
            if !schedules.contains_key(&k) {
                return bad(format!("load at bus {} has no schedule", k + 1));
            }
        }
        Ok(Self {
            n: spec.n(),
            schedules,
            ripple: None,
            seed: None,
        })
    }

    /// Same constant power on every load.
    pub fn constant(spec: &MicrogridSpec, p: f64) -> Result<Self, SimError> {
        Self::uniform(spec, &[Knot { t: 0.0, p }])
    }

    pub fn uniform(spec: &MicrogridSpec, knots: &[Knot]) -> Result<Self, SimError> {
        let schedules = spec.load_buses().into_iter().map(|k| (k, knots.to_vec())).collect();
        Self::new(spec, schedules)
    }

    /// Linear ramp from `p0` to `p1` over `[0, duration]`.
    pub fn ramp(spec: &MicrogridSpec, p0: f64, p1: f64, duration: f64) -> Result<Self, SimError> {
        Self::uniform(spec, &[Knot { t: 0.0, p: p0 }, Knot { t: duration, p: p1 }])
    }

    /// Per-bus powers at time `t`; zero where there is no load.
    pub fn power_at(&self, t: f64) -> Vec<f64> {
        let mut p = vec![0.0; self.n];
        for (&k, knots) in &self.schedules {
            p[k] = interpolate(knots, t);
        }
        p
    }

    /// Time of the last knot over all loads.
    pub fn horizon(&self) -> f64 {
        self.schedules
            .values()
            .filter_map(|k| k.last())
            .map(|k| k.t)
            .fold(0.0, f64::max)
    }

    pub fn fill_power(&self, t: f64, p: &mut [f64]) {
        for (&k, knots) in &self.schedules {
            p[k] = interpolate(knots, t);
        }
    }
}

/// Parses `[[load]] bus = k` with `[[load.knot]] t, p` (1-based buses) and
/// optional top-level `ripple` and `seed`.
pub fn parse_profile(text: &str, spec: &MicrogridSpec) -> Result<LoadProfile, SimError> {
    let raw: RawProfile = toml::from_str(text)?;
    let mut schedules = BTreeMap::new();
    for load in raw.load {
        if load.bus == 0 || load.bus > spec.n() {
            return Err(SimError::Profile(format!("bus {} out of range 1..={}", load.bus, spec.n())));
        }
        if schedules.insert(load.bus - 1, load.knot).is_some() {
            return Err(SimError::Profile(format!("bus {} listed twice", load.bus)));
        }
    }
    let mut profile = LoadProfile::new(spec, schedules)?;
    profile.ripple = raw.ripple;
    profile.seed = raw.seed;
    Ok(profile)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimOptions {
    pub dt: f64,
    pub t_end: f64,
    /// Keep every `stride`-th step in the trace (the last step is always kept).
    pub stride: usize,
    pub blowup: f64,
    pub v_floor: f64,
    /// Relative amplitude of seeded, per-step uniform load ripple; zero
    /// reproduces the profile exactly.
    pub ripple: f64,
    pub seed: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            t_end: 1.0,
            stride: 100,
            blowup: BLOWUP,
            v_floor: V_FLOOR,
            ripple: 0.0,
            seed: 0,
        }
    }
}

impl SimOptions {
    fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::Dt(self.dt));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(SimError::TEnd(self.t_end));
        }
        if self.stride == 0 {
            return Err(SimError::Stride);
        }
        if !(0.0..1.0).contains(&self.ripple) {
            return Err(SimError::Ripple(self.ripple));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Divergence {
    pub time: f64,
    /// Per-bus scheduled load powers at the onset, ripple excluded.
    pub power: Vec<f64>,
    pub state: usize,
    pub cause: DivergenceCause,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceCause {
    Blowup,
    VoltageFloor,
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub labels: Vec<String>,
    pub t: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub p: Vec<Vec<f64>>,
    pub divergence: Option<Divergence>,
    pub steps: usize,
}

impl Trace {
    pub fn last(&self) -> &DVector<f64> {
        self.x.last().expect("trace has the initial sample")
    }

    /// Writes `t, <state labels>, p_1..p_n`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut out = csv::Writer::from_writer(w);
        let n = self.p.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend(self.labels.iter().cloned());
        header.extend((1..=n).map(|k| format!("p_{k}")));
        out.write_record(&header)?;
        for ((t, x), p) in self.t.iter().zip(&self.x).zip(&self.p) {
            let mut row = Vec::with_capacity(header.len());
            row.push(format!("{t:.9e}"));
            row.extend(x.iter().map(|v| format!("{v:.12e}")));
            row.extend(p.iter().map(|v| format!("{v:.12e}")));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Row-compressed copy of `A` plus the constant input `B v_ref`; `A` has only
/// a few entries per row, so this is far cheaper than a dense product.
struct Rhs {
    rows: Vec<Vec<(usize, f64)>>,
    u: DVector<f64>,
    cpl: Vec<(usize, usize, f64)>,
}

impl Rhs {
    fn new(spec: &MicrogridSpec, m: &SystemMatrices) -> Self {
        let dim = m.layout.dim();
        let rows = (0..dim)
            .map(|i| {
                (0..dim)
                    .filter(|&j| m.a[(i, j)] != 0.0)
                    .map(|j| (j, m.a[(i, j)]))
                    .collect()
            })
            .collect();
        let u = &m.b * spec.v_ref();
        let cpl = (0..spec.n())
            .filter_map(|k| {
                m.layout
                    .index(StateKind::LoadVoltage, k)
                    .map(|row| (row, k, m.c[(row, k)]))
            })
            .collect();
        Self { rows, u, cpl }
    }

    fn eval(&self, p: &[f64], x: &DVector<f64>, out: &mut DVector<f64>) {
        for (i, row) in self.rows.iter().enumerate() {
            out[i] = self.u[i] + row.iter().map(|&(j, a)| a * x[j]).sum::<f64>();
        }
        for &(row, k, c) in &self.cpl {
            out[row] -= c * p[k] / x[row];
        }
    }
}

pub fn simulate(
    spec: &MicrogridSpec,
    profile: &LoadProfile,
    x0: &DVector<f64>,
    opts: &SimOptions,
) -> Result<Trace, SimError> {
    opts.validate()?;
    let m = assemble(spec);
    let dim = m.layout.dim();
    if x0.len() != dim {
        return Err(SimError::InitLength {
            expected: dim,
            found: x0.len(),
        });
    }
    let v_rows = m.layout.v_l_rows();
    if let Some(&r) = v_rows.iter().find(|&&r| !(x0[r] > 0.0)) {
        return Err(SimError::InitVoltage(r));
    }
    let rhs = Rhs::new(spec, &m);
    let steps = (opts.t_end / opts.dt).round() as usize;
    let n = spec.n();
    let mut trace = Trace {
        labels: m.layout.labels(),
        t: vec![0.0],
        x: vec![x0.clone()],
        p: vec![profile.power_at(0.0)],
        divergence: None,
        steps: 0,
    };
    let mut x = x0.clone();
    let (mut k1, mut k2, mut k3, mut k4) = (
        DVector::zeros(dim),
        DVector::zeros(dim),
        DVector::zeros(dim),
        DVector::zeros(dim),
    );
    let mut tmp = DVector::zeros(dim);
    let (mut p0, mut ph, mut p1) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let h = opts.dt;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for step in 0..steps {
        let t = step as f64 * h;
        profile.fill_power(t, &mut p0);
        profile.fill_power(t + 0.5 * h, &mut ph);
        profile.fill_power(t + h, &mut p1);
        if opts.ripple > 0.0 {
            // one factor per load for the whole step keeps the stage inputs consistent
            for k in 0..n {
                let f = 1.0 + opts.ripple * rng.random_range(-1.0..=1.0);
                p0[k] *= f;
                ph[k] *= f;
                p1[k] *= f;
            }
        }
        rhs.eval(&p0, &x, &mut k1);
        tmp.copy_from(&x);
        tmp.axpy(0.5 * h, &k1, 1.0);
        rhs.eval(&ph, &tmp, &mut k2);
        tmp.copy_from(&x);
        tmp.axpy(0.5 * h, &k2, 1.0);
        rhs.eval(&ph, &tmp, &mut k3);
        tmp.copy_from(&x);
        tmp.axpy(h, &k3, 1.0);
        rhs.eval(&p1, &tmp, &mut k4);
        x.axpy(h / 6.0, &k1, 1.0);
        x.axpy(h / 3.0, &k2, 1.0);
        x.axpy(h / 3.0, &k3, 1.0);
        x.axpy(h / 6.0, &k4, 1.0);
        let t1 = (step + 1) as f64 * h;
        trace.steps = step + 1;
        let cause = x.iter().enumerate().find_map(|(i, v)| {
            if !v.is_finite() {
                Some((i, DivergenceCause::NonFinite))
            } else if v.abs() > opts.blowup {
                Some((i, DivergenceCause::Blowup))
            } else {
                None
            }
        });
        let cause = cause.or_else(|| {
            v_rows
                .iter()
                .find(|&&r| x[r] <= opts.v_floor)
                .map(|&r| (r, DivergenceCause::VoltageFloor))
        });
        let last = step + 1 == steps;
        if cause.is_some() || (step + 1) % opts.stride == 0 || last {
            trace.t.push(t1);
            trace.x.push(x.clone());
            trace.p.push(p1.clone());
        }
        if let Some((state, cause)) = cause {
            trace.divergence = Some(Divergence {
                time: t1,
                power: profile.power_at(t1),
                state,
                cause,
            });
            break;
        }
    }
    Ok(trace)
}

/// Ramp scenario started from the equilibrium at the profile's initial power.
pub fn simulate_from_equilibrium(
    spec: &MicrogridSpec,
    profile: &LoadProfile,
    opts: &SimOptions,
) -> Result<Trace, SimError> {
    let eq = solve_equilibrium(spec, &profile.power_at(0.0), None)?;
    simulate(spec, profile, &eq.x_e, opts)
}

#[derive(Debug, Clone)]
pub struct StepResponse {
    pub trace: Trace,
    pub x_e: DVector<f64>,
    /// Fitted `−d/dt ln ‖x − x_e‖` of the deviation envelope; negative means
    /// growth. `None` when the deviation never leaves the noise floor.
    pub decay_rate: Option<f64>,
}

/// Least-squares slope of `ln(max deviation)` over equal windows.
pub fn envelope_decay(t: &[f64], dev: &[f64]) -> Option<f64> {
    const WINDOWS: usize = 20;
    if t.len() < 2 * WINDOWS {
        let pts: Vec<(f64, f64)> = t
            .iter()
            .zip(dev)
            .filter(|(_, &d)| d > 0.0)
            .map(|(&t, &d)| (t, d.ln()))
            .collect();
        return slope(&pts).map(|s| -s);
    }
    let chunk = t.len() / WINDOWS;
    let pts: Vec<(f64, f64)> = (0..WINDOWS)
        .filter_map(|w| {
            let range = w * chunk..((w + 1) * chunk).min(t.len());
            let (i, d) = range
                .map(|i| (i, dev[i]))
                .max_by(|a, b| a.1.total_cmp(&b.1))?;
            (d > 0.0).then(|| (t[i], d.ln()))
        })
        .collect();
    slope(&pts).map(|s| -s)
}

fn slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn step_response(
    spec: &MicrogridSpec,
    p: &[f64],
    perturbation: &DVector<f64>,
    opts: &SimOptions,
) -> Result<StepResponse, SimError> {
    let eq = solve_equilibrium(spec, p, None)?;
    if perturbation.len() != eq.x_e.len() {
        return Err(SimError::InitLength {
            expected: eq.x_e.len(),
            found: perturbation.len(),
        });
    }
    let mut schedules = BTreeMap::new();
    for k in spec.load_buses() {
        schedules.insert(k, vec![Knot { t: 0.0, p: p[k] }]);
    }
    let profile = LoadProfile::new(spec, schedules)?;
    let x0 = &eq.x_e + perturbation;
    let trace = simulate(spec, &profile, &x0, opts)?;
    let dev: Vec<f64> = trace.x.iter().map(|x| (x - &eq.x_e).norm()).collect();
    let floor = NOISE_FLOOR * eq.x_e.norm();
    let decay_rate = if dev.iter().all(|&d| d <= floor) {
        None
    } else {
        let (t, d): (Vec<f64>, Vec<f64>) = trace
            .t
            .iter()
            .zip(&dev)
            .filter(|(_, &d)| d > floor)
            .map(|(&t, &d)| (t, d))
            .unzip();
        envelope_decay(&t, &d)
    };
    Ok(StepResponse {
        trace,
        x_e: eq.x_e,
        decay_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{uniform_bus, Line};

    fn two_bus() -> MicrogridSpec {
        MicrogridSpec::new(
            "two",
            vec![uniform_bus(0.2), uniform_bus(0.2)],
            vec![Line { from: 0, to: 1, r: 1.0 }],
        )
        .unwrap()
    }

    #[test]
    fn interpolation_clamps() {
        let k = [Knot { t: 1.0, p: 10.0 }, Knot { t: 3.0, p: 20.0 }];
        assert_eq!(interpolate(&k, 0.0), 10.0);
        assert_eq!(interpolate(&k, 2.0), 15.0);
        assert_eq!(interpolate(&k, 9.0), 20.0);
    }

    #[test]
    fn profile_validation() {
        let spec = two_bus();
        let ok = "[[load]]\nbus = 1\n[[load.knot]]\nt = 0.0\np = 5000.0\n[[load]]\nbus = 2\n[[load.knot]]\nt = 0.0\np = 5000.0\n";
        assert!(parse_profile(ok, &spec).is_ok());
        let missing = "[[load]]\nbus = 1\n[[load.knot]]\nt = 0.0\np = 5000.0\n";
        assert!(parse_profile(missing, &spec).is_err());
        let too_big = ok.replace("p = 5000.0\n[[load]]", "p = 40000.0\n[[load]]");
        assert!(parse_profile(&too_big, &spec).is_err());
        let unsorted = "[[load]]\nbus = 1\n[[load.knot]]\nt = 1.0\np = 1.0\n[[load.knot]]\nt = 0.5\np = 1.0\n[[load]]\nbus = 2\n[[load.knot]]\nt = 0.0\np = 0.0\n";
        assert!(parse_profile(unsorted, &spec).is_err());
        assert!(parse_profile("[[load]]\nbus = 1\nextra = 2\n", &spec).is_err());
    }

    #[test]
    fn rejects_bad_dt() {
        let spec = two_bus();
        let prof = LoadProfile::constant(&spec, 0.0).unwrap();
        let eq = solve_equilibrium(&spec, &[0.0, 0.0], None).unwrap();
        for dt in [0.0, -1e-5, f64::NAN] {
            let opts = SimOptions { dt, ..Default::default() };
            assert!(matches!(simulate(&spec, &prof, &eq.x_e, &opts), Err(SimError::Dt(_))));
        }
    }

    #[test]
    fn equilibrium_is_invariant() {
        let spec = two_bus();
        let prof = LoadProfile::constant(&spec, 0.0).unwrap();
        let eq = solve_equilibrium(&spec, &[0.0, 0.0], None).unwrap();
        let opts = SimOptions { t_end: 0.05, ..Default::default() };
        let tr = simulate(&spec, &prof, &eq.x_e, &opts).unwrap();
        assert!(tr.divergence.is_none());
        let dev = (tr.last() - &eq.x_e).amax();
        assert!(dev < 1e-6, "deviation {dev}");
    }

    #[test]
    fn zero_perturbation_has_no_rate() {
        let spec = two_bus();
        let dim = assemble(&spec).layout.dim();
        let opts = SimOptions { t_end: 0.01, ..Default::default() };
        let r = step_response(&spec, &[0.0, 0.0], &DVector::zeros(dim), &opts).unwrap();
        assert_eq!(r.decay_rate, None);
    }

    #[test]
    fn csv_header_and_rows() {
        let spec = two_bus();
        let prof = LoadProfile::constant(&spec, 1000.0).unwrap();
        let x0 = simulate_from_equilibrium(&spec, &prof, &SimOptions { t_end: 1e-4, stride: 5, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        x0.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(header, "t,i_s1,i_s2,i_l1,i_l2,v_b1,v_b2,v_l1,v_l2,p_1,p_2");
        assert_eq!(text.lines().count(), 1 + x0.t.len());
        assert_eq!(x0.t.len(), 3);
    }
}
