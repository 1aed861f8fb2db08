//! Steady states `A x + B v_ref + C h(p, x) = 0` by damped Newton.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::{assemble, BusParams, MicrogridSpec, StateKind, SystemMatrices};

pub const MAX_NEWTON_ITER: usize = 50;
pub const NEWTON_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquilibriumError {
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("singular Jacobian at iteration {iterations}")]
    SingularJacobian { iterations: usize, iterate: Vec<f64> },
    #[error("power vector has length {found}, expected {expected}")]
    PowerLength { expected: usize, found: usize },
    #[error("initial state has length {found}, expected {expected}")]
    InitLength { expected: usize, found: usize },
    #[error("no real equilibrium: discriminant {0:.6e} < 0")]
    NegativeDiscriminant(f64),
    #[error("samples must be >= 1")]
    NoSamples,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    pub x_e: DVector<f64>,
    pub p: Vec<f64>,
    /// CPL voltages in load-bus order.
    pub v_l_e: Vec<f64>,
    pub feasible: bool,
    /// `‖F(x_e)‖∞` relative to the magnitude of the terms of `F`.
    pub residual: f64,
    pub iterations: usize,
}

fn relative_residual(m: &SystemMatrices, v_ref: &DVector<f64>, p: &[f64], x: &DVector<f64>) -> (DVector<f64>, f64) {
    let ax = &m.a * x;
    let bv = &m.b * v_ref;
    let ch = m.cpl_term(p, x);
    let f = &ax + &bv + &ch;
    let scale = ax.amax().max(bv.amax()).max(ch.amax()).max(f64::MIN_POSITIVE);
    let r = f.amax() / scale;
    (f, r)
}

fn jacobian(m: &SystemMatrices, p: &[f64], x: &DVector<f64>) -> DMatrix<f64> {
    let mut j = m.a.clone();
    for k in 0..m.layout.buses() {
        if let Some(row) = m.layout.index(StateKind::LoadVoltage, k) {
            j[(row, row)] += m.c[(row, k)] * p[k] / (x[row] * x[row]);
        }
    }
    j
}

/// Flat start: every `v_l` at its bus's `v_ref`, loads linearised as
/// constant current sinks, one linear solve for the rest.
pub fn flat_start(spec: &MicrogridSpec, m: &SystemMatrices, p: &[f64]) -> DVector<f64> {
    let v_ref = spec.v_ref();
    let mut x = DVector::zeros(m.layout.dim());
    for (idx, &(kind, k)) in m.layout.states().iter().enumerate() {
        if matches!(kind, StateKind::BusVoltage | StateKind::LoadVoltage) {
            x[idx] = spec.buses[k].v_ref;
        }
    }
    let rhs = -(&m.b * &v_ref + m.cpl_term(p, &x));
    match m.a.clone().lu().solve(&rhs) {
        Some(sol) if sol.iter().all(|v| v.is_finite()) => {
            // keep the guessed CPL voltages if the linear solve sends them negative
            let rows = m.layout.v_l_rows();
            if rows.iter().all(|&r| sol[r] > 0.0) {
                sol
            } else {
                x
            }
        }
        _ => x,
    }
}

pub fn solve_equilibrium(
    spec: &MicrogridSpec,
    p: &[f64],
    init: Option<&DVector<f64>>,
) -> Result<Equilibrium, EquilibriumError> {
    let m = assemble(spec);
    solve_with_matrices(spec, &m, p, init)
}

pub fn solve_with_matrices(
    spec: &MicrogridSpec,
    m: &SystemMatrices,
    p: &[f64],
    init: Option<&DVector<f64>>,
) -> Result<Equilibrium, EquilibriumError> {
    let n = spec.n();
    if p.len() != n {
        return Err(EquilibriumError::PowerLength {
            expected: n,
            found: p.len(),
        });
    }
    let dim = m.layout.dim();
    let mut x = match init {
        Some(x0) if x0.len() != dim => {
            return Err(EquilibriumError::InitLength {
                expected: dim,
                found: x0.len(),
            })
        }
        Some(x0) => x0.clone(),
        None => flat_start(spec, m, p),
    };
    let v_ref = spec.v_ref();
    let rows = m.layout.v_l_rows();
    let (mut f, mut res) = relative_residual(m, &v_ref, p, &x);
    let mut iterations = 0;
    while res > NEWTON_TOL {
        if iterations == MAX_NEWTON_ITER {
            return Err(EquilibriumError::NoConvergence {
                iterations,
                residual: res,
            });
        }
        iterations += 1;
        let j = jacobian(m, p, &x);
        let Some(dx) = j.lu().solve(&(-&f)) else {
            return Err(EquilibriumError::SingularJacobian {
                iterations,
                iterate: x.iter().cloned().collect(),
            });
        };
        // Backtracking on ‖F‖², keeping every CPL voltage positive.
        let f2 = f.norm_squared();
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &x + &dx * alpha;
            if rows.iter().all(|&r| trial[r] > 0.0) {
                let (ft, rt) = relative_residual(m, &v_ref, p, &trial);
                if ft.norm_squared() <= (1.0 - 1e-4 * alpha) * f2 || rt <= NEWTON_TOL {
                    x = trial;
                    f = ft;
                    res = rt;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(EquilibriumError::NoConvergence {
                iterations,
                residual: res,
            });
        }
    }
    // One undamped polishing step: near the root it costs little and takes
    // the iterate well below the stopping tolerance.
    if let Some(dx) = jacobian(m, p, &x).lu().solve(&(-&f)) {
        let trial = &x + dx;
        if rows.iter().all(|&r| trial[r] > 0.0) {
            let (_, rt) = relative_residual(m, &v_ref, p, &trial);
            if rt <= res {
                x = trial;
                res = rt;
            }
        }
    }
    let v_l_e: Vec<f64> = rows.iter().map(|&r| x[r]).collect();
    let feasible = spec
        .load_buses()
        .iter()
        .zip(&v_l_e)
        .all(|(&k, &v)| spec.buses[k].v_e_min <= v && v <= spec.buses[k].v_e_max);
    Ok(Equilibrium {
        x_e: x,
        p: p.to_vec(),
        v_l_e,
        feasible,
        residual: res,
        iterations,
    })
}

/// One root of the single-bus quadratic `R i² − v_ref i + p = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BusRoot {
    pub current: f64,
    pub v_l: f64,
}

/// Both steady states of an isolated bus, high-voltage root first. With zero
/// series resistance the quadratic degenerates and a single root is returned.
pub fn single_bus_oracle(bus: &BusParams, p: f64) -> Result<Vec<BusRoot>, EquilibriumError> {
    let r = bus.r_s + bus.d + bus.r_l;
    let v = bus.v_ref;
    if r == 0.0 {
        let i = p / v;
        return Ok(vec![BusRoot { current: i, v_l: v }]);
    }
    let disc = v * v - 4.0 * r * p;
    if disc < 0.0 {
        return Err(EquilibriumError::NegativeDiscriminant(disc));
    }
    let sq = disc.sqrt();
    // Cancellation-free pair: i₁·i₂ = p/R.
    let big = (v + sq) / (2.0 * r);
    let small = 2.0 * p / (v + sq);
    Ok(vec![
        BusRoot {
            current: small,
            v_l: v - r * small,
        },
        BusRoot {
            current: big,
            v_l: v - r * big,
        },
    ])
}

#[derive(Debug, Clone)]
pub struct ProbeSample {
    pub p: Vec<f64>,
    pub result: Result<Equilibrium, EquilibriumError>,
}

impl ProbeSample {
    pub fn feasible(&self) -> bool {
        matches!(&self.result, Ok(e) if e.feasible)
    }
}

/// Seeded Latin-hypercube samples of the load powers, each solved from the
/// flat start. Buses without a load get `p = 0`.
pub fn feasible_set_probe(
    spec: &MicrogridSpec,
    samples: usize,
    seed: u64,
) -> Result<Vec<ProbeSample>, EquilibriumError> {
    if samples == 0 {
        return Err(EquilibriumError::NoSamples);
    }
    let n = spec.n();
    let loads = spec.load_buses();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![vec![0.0; n]; samples];
    for &k in &loads {
        let b = &spec.buses[k];
        let mut strata: Vec<usize> = (0..samples).collect();
        strata.shuffle(&mut rng);
        for (s, point) in strata.iter().zip(points.iter_mut()) {
            let u = (*s as f64 + rng.random::<f64>()) / samples as f64;
            point[k] = b.p_min + u * (b.p_max - b.p_min);
        }
    }
    let m = assemble(spec);
    Ok(points
        .into_par_iter()
        .map(|p| {
            let result = solve_with_matrices(spec, &m, &p, None);
            ProbeSample { p, result }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{uniform_bus, Line};
    use approx::assert_relative_eq;

    #[test]
    fn quadratic_roots() {
        let bus = uniform_bus(0.2);
        let roots = single_bus_oracle(&bus, 15e3).unwrap();
        assert_relative_eq!(roots[0].current, 38.61, epsilon = 1e-2);
        assert_relative_eq!(roots[1].current, 1294.7, epsilon = 5e-2);
        assert_relative_eq!(roots[0].v_l, 388.42, epsilon = 1e-2);
        let zero = single_bus_oracle(&bus, 0.0).unwrap();
        assert_eq!(zero[0].current, 0.0);
        assert_relative_eq!(zero[1].current, 400.0 / 0.3, max_relative = 1e-14);
        assert!(single_bus_oracle(&bus, 134e3).is_err());
    }

    #[test]
    fn newton_hits_high_voltage_root() {
        let spec = MicrogridSpec::new("one", vec![uniform_bus(0.2)], vec![]).unwrap();
        let eq = solve_equilibrium(&spec, &[15e3], None).unwrap();
        let roots = single_bus_oracle(&spec.buses[0], 15e3).unwrap();
        assert_relative_eq!(eq.v_l_e[0], roots[0].v_l, max_relative = 1e-9);
        assert!(eq.feasible);
    }

    #[test]
    fn zero_load_is_linear() {
        let spec = MicrogridSpec::new(
            "two",
            vec![uniform_bus(0.2), uniform_bus(0.1)],
            vec![Line { from: 0, to: 1, r: 1.0 }],
        )
        .unwrap();
        let eq = solve_equilibrium(&spec, &[0.0, 0.0], None).unwrap();
        let m = assemble(&spec);
        for k in 0..2 {
            let il = m.layout.index(StateKind::LoadCurrent, k).unwrap();
            let vb = m.layout.index(StateKind::BusVoltage, k).unwrap();
            let vl = m.layout.index(StateKind::LoadVoltage, k).unwrap();
            assert!(eq.x_e[il].abs() < 1e-9);
            assert_relative_eq!(eq.x_e[vl], eq.x_e[vb], max_relative = 1e-12);
        }
    }

    #[test]
    fn probe_degenerate_interval() {
        let mut bus = uniform_bus(0.2);
        bus.p_min = 15e3;
        bus.p_max = 15e3;
        let spec = MicrogridSpec::new("one", vec![bus], vec![]).unwrap();
        let out = feasible_set_probe(&spec, 5, 1).unwrap();
        assert!(out.iter().all(|s| s.p[0] == 15e3 && s.feasible()));
    }

    #[test]
    fn probe_flags_voltage_floor() {
        let mut bus = uniform_bus(0.2);
        bus.v_e_min = 395.0;
        let spec = MicrogridSpec::new("one", vec![bus], vec![]).unwrap();
        let out = feasible_set_probe(&spec, 20, 3).unwrap();
        assert!(out.iter().any(|s| !s.feasible()));
    }
}
