//! Netlists and state-space assembly.
//!
//! Each bus carries an optional droop-controlled voltage source behind an RL
//! branch and an optional constant power load behind an RLC filter. Buses are
//! joined by resistive lines. The state vector is ordered
//! `[i_s; i_l; v_b; v_l]`; states of absent devices are left out entirely,
//! so a bus without a load has neither an `i_l` nor a `v_l` entry.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("netlist syntax: {0}")]
    Syntax(String),
    #[error("bus {bus}: {param} {reason}")]
    InvalidBus {
        bus: usize,
        param: &'static str,
        reason: String,
    },
    #[error("line {line} ({from}-{to}): {reason}")]
    InvalidLine {
        line: usize,
        from: usize,
        to: usize,
        reason: String,
    },
    #[error("netlist has no buses")]
    NoBuses,
    #[error("network is disconnected: bus {0} is unreachable from bus 1")]
    Disconnected(usize),
    #[error("control gain for bus {bus} must be > 0, got {value}")]
    NonPositiveGain { bus: usize, value: f64 },
    #[error("{what}: expected length {expected}, found {found}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
}

fn default_true() -> bool {
    true
}

/// Electrical parameters of one bus, SI units throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusParams {
    pub r_s: f64,
    #[serde(rename = "L_s")]
    pub l_s: f64,
    pub r_l: f64,
    #[serde(rename = "L_l")]
    pub l_l: f64,
    #[serde(rename = "C_b")]
    pub c_b: f64,
    #[serde(rename = "C_l")]
    pub c_l: f64,
    pub d: f64,
    pub v_ref: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub v_e_min: f64,
    pub v_e_max: f64,
    #[serde(default = "default_true")]
    pub has_source: bool,
    #[serde(default = "default_true")]
    pub has_load: bool,
}

impl BusParams {
    fn validate(&self, bus: usize) -> Result<(), ModelError> {
        let bad = |param: &'static str, reason: String| ModelError::InvalidBus { bus, param, reason };
        let fields = [
            ("r_s", self.r_s),
            ("L_s", self.l_s),
            ("r_l", self.r_l),
            ("L_l", self.l_l),
            ("C_b", self.c_b),
            ("C_l", self.c_l),
            ("d", self.d),
            ("v_ref", self.v_ref),
            ("p_min", self.p_min),
            ("p_max", self.p_max),
            ("v_e_min", self.v_e_min),
            ("v_e_max", self.v_e_max),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(bad(name, format!("must be finite, got {v}")));
            }
        }
        for (name, v) in [("L_s", self.l_s), ("L_l", self.l_l), ("C_b", self.c_b), ("C_l", self.c_l)] {
            if v <= 0.0 {
                return Err(bad(name, format!("must be > 0, got {v}")));
            }
        }
        for (name, v) in [("r_s", self.r_s), ("r_l", self.r_l), ("d", self.d)] {
            if v < 0.0 {
                return Err(bad(name, format!("must be >= 0, got {v}")));
            }
        }
        if self.p_min < 0.0 {
            return Err(bad("p_min", format!("must be >= 0, got {}", self.p_min)));
        }
        if self.p_max < self.p_min {
            return Err(bad("p_max", format!("must be >= p_min ({}), got {}", self.p_min, self.p_max)));
        }
        if self.v_e_min < 0.0 {
            return Err(bad("v_e_min", format!("must be >= 0, got {}", self.v_e_min)));
        }
        if self.v_e_max < self.v_e_min {
            return Err(bad(
                "v_e_max",
                format!("must be >= v_e_min ({}), got {}", self.v_e_min, self.v_e_max),
            ));
        }
        if self.has_load && self.p_max > 0.0 && self.v_e_min <= 0.0 {
            return Err(bad("v_e_min", "must be > 0 when p_max > 0".into()));
        }
        Ok(())
    }
}

/// Undirected resistive line between two buses (0-based indices).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicrogridSpec {
    pub name: String,
    pub buses: Vec<BusParams>,
    pub lines: Vec<Line>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLine {
    from: i64,
    to: i64,
    r: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetlist {
    name: String,
    #[serde(default)]
    bus: Vec<BusParams>,
    #[serde(default)]
    line: Vec<RawLine>,
}

/// Parses and validates a TOML netlist. Line endpoints are 1-based in the file.
pub fn parse_netlist(text: &str) -> Result<MicrogridSpec, ModelError> {
    let raw: RawNetlist = toml::from_str(text).map_err(|e| ModelError::Syntax(e.to_string()))?;
    let n = raw.bus.len();
    let mut lines = Vec::with_capacity(raw.line.len());
    for (i, l) in raw.line.iter().enumerate() {
        let bad = |reason: String| ModelError::InvalidLine {
            line: i + 1,
            from: l.from.max(0) as usize,
            to: l.to.max(0) as usize,
            reason,
        };
        let in_range = |v: i64| v >= 1 && (v as u64) <= n as u64;
        if !in_range(l.from) || !in_range(l.to) {
            return Err(bad(format!("endpoint outside 1..={n}")));
        }
        lines.push(Line {
            from: (l.from - 1) as usize,
            to: (l.to - 1) as usize,
            r: l.r,
        });
    }
    MicrogridSpec::new(raw.name, raw.bus, lines)
}

impl MicrogridSpec {
    pub fn new(name: impl Into<String>, buses: Vec<BusParams>, lines: Vec<Line>) -> Result<Self, ModelError> {
        let spec = Self {
            name: name.into(),
            buses,
            lines,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.buses.len();
        if n == 0 {
            return Err(ModelError::NoBuses);
        }
        for (k, b) in self.buses.iter().enumerate() {
            b.validate(k + 1)?;
        }
        let mut seen = BTreeSet::new();
        for (i, l) in self.lines.iter().enumerate() {
            let bad = |reason: String| ModelError::InvalidLine {
                line: i + 1,
                from: l.from + 1,
                to: l.to + 1,
                reason,
            };
            if l.from >= n || l.to >= n {
                return Err(bad(format!("endpoint outside 1..={n}")));
            }
            if l.from == l.to {
                return Err(bad("self-loop".into()));
            }
            if !(l.r.is_finite() && l.r > 0.0) {
                return Err(bad(format!("resistance must be > 0, got {}", l.r)));
            }
            if !seen.insert((l.from.min(l.to), l.from.max(l.to))) {
                return Err(bad("duplicate line".into()));
            }
        }
        let adj = self.neighbours();
        let mut reached = vec![false; n];
        let mut queue = VecDeque::from([0]);
        reached[0] = true;
        while let Some(k) = queue.pop_front() {
            for &(j, _) in &adj[k] {
                if !reached[j] {
                    reached[j] = true;
                    queue.push_back(j);
                }
            }
        }
        if let Some(k) = reached.iter().position(|r| !r) {
            return Err(ModelError::Disconnected(k + 1));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.buses.len()
    }

    /// Neighbour lists `(bus, r)` per bus.
    pub fn neighbours(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.buses.len()];
        for l in &self.lines {
            adj[l.from].push((l.to, l.r));
            adj[l.to].push((l.from, l.r));
        }
        adj
    }

    /// 0/1 adjacency matrix of the network graph.
    pub fn adjacency(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut w = DMatrix::zeros(n, n);
        for l in &self.lines {
            w[(l.from, l.to)] = 1.0;
            w[(l.to, l.from)] = 1.0;
        }
        w
    }

    pub fn load_buses(&self) -> Vec<usize> {
        (0..self.n()).filter(|&k| self.buses[k].has_load).collect()
    }

    pub fn source_buses(&self) -> Vec<usize> {
        (0..self.n()).filter(|&k| self.buses[k].has_source).collect()
    }

    pub fn v_ref(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.buses.iter().map(|b| b.v_ref))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StateKind {
    SourceCurrent,
    LoadCurrent,
    BusVoltage,
    LoadVoltage,
}

impl StateKind {
    fn prefix(self) -> &'static str {
        match self {
            StateKind::SourceCurrent => "i_s",
            StateKind::LoadCurrent => "i_l",
            StateKind::BusVoltage => "v_b",
            StateKind::LoadVoltage => "v_l",
        }
    }
}

/// Where each `(kind, bus)` state lives in the state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLayout {
    n: usize,
    slots: Vec<[Option<usize>; 4]>,
    order: Vec<(StateKind, usize)>,
}

const KINDS: [StateKind; 4] = [
    StateKind::SourceCurrent,
    StateKind::LoadCurrent,
    StateKind::BusVoltage,
    StateKind::LoadVoltage,
];

impl StateLayout {
    pub fn new(spec: &MicrogridSpec) -> Self {
        let n = spec.n();
        let mut slots = vec![[None; 4]; n];
        let mut order = Vec::new();
        for (ki, kind) in KINDS.iter().enumerate() {
            for (k, bus) in spec.buses.iter().enumerate() {
                let present = match kind {
                    StateKind::SourceCurrent => bus.has_source,
                    StateKind::LoadCurrent | StateKind::LoadVoltage => bus.has_load,
                    StateKind::BusVoltage => true,
                };
                if present {
                    slots[k][ki] = Some(order.len());
                    order.push((*kind, k));
                }
            }
        }
        Self { n, slots, order }
    }

    pub fn index(&self, kind: StateKind, bus: usize) -> Option<usize> {
        let ki = KINDS.iter().position(|k| *k == kind).expect("known kind");
        self.slots.get(bus).and_then(|s| s[ki])
    }

    pub fn dim(&self) -> usize {
        self.order.len()
    }

    pub fn buses(&self) -> usize {
        self.n
    }

    /// `(kind, bus)` for each state index.
    pub fn states(&self) -> &[(StateKind, usize)] {
        &self.order
    }

    /// Rows of the `v_l` states, in load-bus order.
    pub fn v_l_rows(&self) -> Vec<usize> {
        (0..self.n)
            .filter_map(|k| self.index(StateKind::LoadVoltage, k))
            .collect()
    }

    /// Column labels such as `i_s1` or `v_l9` (1-based bus numbers).
    pub fn labels(&self) -> Vec<String> {
        self.order
            .iter()
            .map(|(kind, k)| format!("{}{}", kind.prefix(), k + 1))
            .collect()
    }
}

/// `ẋ = A x + B v_ref + C h(p, x)` with `h_k = −p_k / v_lk`.
#[derive(Debug, Clone)]
pub struct SystemMatrices {
    pub a0: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub layout: StateLayout,
}

impl SystemMatrices {
    /// Constant power injection term `C h(p, x)`; buses without a load ignore `p`.
    pub fn cpl_term(&self, p: &[f64], x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.layout.dim());
        for k in 0..self.layout.buses() {
            if let Some(row) = self.layout.index(StateKind::LoadVoltage, k) {
                out[row] = -self.c[(row, k)] * p[k] / x[row];
            }
        }
        out
    }

    /// Right-hand side of the nonlinear dynamics.
    pub fn rhs(&self, v_ref: &DVector<f64>, p: &[f64], x: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * v_ref + self.cpl_term(p, x)
    }
}

/// Builds the closed-loop model from a validated netlist.
pub fn assemble(spec: &MicrogridSpec) -> SystemMatrices {
    let layout = StateLayout::new(spec);
    let dim = layout.dim();
    let n = spec.n();
    let mut a0 = DMatrix::zeros(dim, dim);
    let mut b = DMatrix::zeros(dim, n);
    let mut c = DMatrix::zeros(dim, n);
    let mut droop = DMatrix::zeros(dim, dim);
    let ix = |kind, k| layout.index(kind, k);
    for (k, bus) in spec.buses.iter().enumerate() {
        let vb = ix(StateKind::BusVoltage, k).expect("every bus has v_b");
        if let Some(is) = ix(StateKind::SourceCurrent, k) {
            a0[(is, is)] = -bus.r_s / bus.l_s;
            a0[(is, vb)] = -1.0 / bus.l_s;
            a0[(vb, is)] = 1.0 / bus.c_b;
            b[(is, k)] = 1.0 / bus.l_s;
            droop[(is, is)] = bus.d / bus.l_s;
        }
        if let (Some(il), Some(vl)) = (ix(StateKind::LoadCurrent, k), ix(StateKind::LoadVoltage, k)) {
            a0[(il, vb)] = 1.0 / bus.l_l;
            a0[(il, il)] = -bus.r_l / bus.l_l;
            a0[(il, vl)] = -1.0 / bus.l_l;
            a0[(vb, il)] = -1.0 / bus.c_b;
            a0[(vl, il)] = 1.0 / bus.c_l;
            c[(vl, k)] = 1.0 / bus.c_l;
        }
    }
    for l in &spec.lines {
        for (k, j) in [(l.from, l.to), (l.to, l.from)] {
            let vk = ix(StateKind::BusVoltage, k).expect("v_b");
            let vj = ix(StateKind::BusVoltage, j).expect("v_b");
            let g = 1.0 / (spec.buses[k].c_b * l.r);
            a0[(vk, vk)] -= g;
            a0[(vk, vj)] += g;
        }
    }
    let a = &a0 - droop;
    SystemMatrices { a0, a, b, c, layout }
}

/// Droop model augmented with distributed voltage regulation
/// `v̇ = diag(g) W (v_b* − v_b)`, where `v` (one entry per source bus)
/// replaces `v_ref` as the source input.
#[derive(Debug, Clone)]
pub struct AugmentedSystem {
    pub gains: Vec<f64>,
    pub w: DMatrix<f64>,
    pub v_b_star: DVector<f64>,
    /// Linear part over `[v; x]`.
    pub a: DMatrix<f64>,
    /// Constant input `[diag(g) W v_b*; 0]`.
    pub input: DVector<f64>,
    pub base: SystemMatrices,
    /// Source bus of each `v` state.
    pub v_buses: Vec<usize>,
}

impl AugmentedSystem {
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn offset(&self) -> usize {
        self.v_buses.len()
    }

    /// Rows of the `v_l` states inside the augmented state vector.
    pub fn v_l_rows(&self) -> Vec<usize> {
        let off = self.offset();
        self.base.layout.v_l_rows().into_iter().map(|r| r + off).collect()
    }
}

/// `w` defaults to the 0/1 adjacency matrix when `None`.
pub fn assemble_distributed(
    spec: &MicrogridSpec,
    gains: &[f64],
    v_b_star: &DVector<f64>,
    w: Option<DMatrix<f64>>,
) -> Result<AugmentedSystem, ModelError> {
    let n = spec.n();
    if gains.len() != n {
        return Err(ModelError::Length {
            what: "gain vector",
            expected: n,
            found: gains.len(),
        });
    }
    if v_b_star.len() != n {
        return Err(ModelError::Length {
            what: "v_b* vector",
            expected: n,
            found: v_b_star.len(),
        });
    }
    let w = w.unwrap_or_else(|| spec.adjacency());
    if w.nrows() != n || w.ncols() != n {
        return Err(ModelError::Length {
            what: "weight matrix",
            expected: n,
            found: w.nrows(),
        });
    }
    let v_buses = spec.source_buses();
    for &k in &v_buses {
        if !(gains[k] > 0.0) {
            return Err(ModelError::NonPositiveGain {
                bus: k + 1,
                value: gains[k],
            });
        }
    }
    let base = assemble(spec);
    let m = v_buses.len();
    let dim = m + base.layout.dim();
    let mut a = DMatrix::zeros(dim, dim);
    let mut input = DVector::zeros(dim);
    a.view_mut((m, m), (base.layout.dim(), base.layout.dim())).copy_from(&base.a);
    for (row, &k) in v_buses.iter().enumerate() {
        for j in 0..n {
            let wkj = gains[k] * w[(k, j)];
            if wkj == 0.0 {
                continue;
            }
            let vb = base.layout.index(StateKind::BusVoltage, j).expect("v_b");
            a[(row, m + vb)] -= wkj;
            input[row] += wkj * v_b_star[j];
        }
        // source input column of bus k now driven by the state v_k
        for r in 0..base.layout.dim() {
            a[(m + r, row)] = base.b[(r, k)];
        }
    }
    Ok(AugmentedSystem {
        gains: gains.to_vec(),
        w,
        v_b_star: v_b_star.clone(),
        a,
        input,
        base,
        v_buses,
    })
}

/// Uniform-bus netlist helper used by examples and tests.
pub fn uniform_bus(d: f64) -> BusParams {
    BusParams {
        r_s: 0.05,
        l_s: 0.9e-3,
        r_l: 0.05,
        l_l: 0.9e-3,
        c_b: 0.75e-3,
        c_l: 0.7e-3,
        d,
        v_ref: 400.0,
        p_min: 5e3,
        p_max: 20e3,
        v_e_min: 360.0,
        v_e_max: 440.0,
        has_source: true,
        has_load: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single(d: f64) -> MicrogridSpec {
        MicrogridSpec::new("one", vec![uniform_bus(d)], vec![]).unwrap()
    }

    #[test]
    fn single_bus_entries() {
        let m = assemble(&single(0.2));
        assert_relative_eq!(m.a[(0, 0)], -277.777_777_777_777_8, max_relative = 1e-12);
        assert_relative_eq!(m.a[(0, 2)], -1111.111_111_111_111, max_relative = 1e-12);
        assert_relative_eq!(m.b[(0, 0)], 1111.111_111_111_111, max_relative = 1e-12);
        assert_relative_eq!(m.c[(3, 0)], 1428.571_428_571_428_6, max_relative = 1e-12);
    }

    #[test]
    fn zero_droop_leaves_a0() {
        let m = assemble(&single(0.0));
        assert_eq!(m.a, m.a0);
    }

    #[test]
    fn absent_devices_drop_states() {
        let mut src = uniform_bus(0.2);
        src.has_load = false;
        let mut load = uniform_bus(0.2);
        load.has_source = false;
        let spec = MicrogridSpec::new("pair", vec![src, load], vec![Line { from: 0, to: 1, r: 1.0 }]).unwrap();
        let m = assemble(&spec);
        assert_eq!(m.layout.dim(), 5);
        assert_eq!(m.layout.labels(), ["i_s1", "i_l2", "v_b1", "v_b2", "v_l2"]);
        assert_eq!(m.layout.v_l_rows(), vec![4]);
        assert_eq!(m.c.column(0).amax(), 0.0);
    }

    #[test]
    fn distributed_two_bus() {
        let spec = MicrogridSpec::new(
            "two",
            vec![uniform_bus(0.2), uniform_bus(0.2)],
            vec![Line { from: 0, to: 1, r: 1.0 }],
        )
        .unwrap();
        let star = DVector::from_vec(vec![400.0, 400.0]);
        let aug = assemble_distributed(&spec, &[1.0, 1.0], &star, None).unwrap();
        let vb2 = 2 + aug.base.layout.index(StateKind::BusVoltage, 1).unwrap();
        let vb1 = 2 + aug.base.layout.index(StateKind::BusVoltage, 0).unwrap();
        assert_eq!(aug.a[(0, vb2)], -1.0);
        assert_eq!(aug.a[(0, vb1)], 0.0);
        assert_eq!(aug.input[0], 400.0);
    }

    #[test]
    fn distributed_rejects_zero_gain() {
        let spec = single(0.2);
        let star = DVector::from_vec(vec![400.0]);
        assert!(assemble_distributed(&spec, &[0.0], &star, None).is_err());
        let aug = assemble_distributed(&spec, &[1.0], &star, None).unwrap();
        assert!(aug.a.row(0).iter().all(|v| *v == 0.0));
    }
}
