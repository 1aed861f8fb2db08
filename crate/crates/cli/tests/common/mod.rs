#![allow(dead_code)]

use std::path::PathBuf;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dcmg_core::model::{parse_netlist, uniform_bus, BusParams, Line, MicrogridSpec};

pub fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

pub fn load(name: &str) -> MicrogridSpec {
    let text = std::fs::read_to_string(scenario(name)).expect("scenario file");
    parse_netlist(&text).expect("scenario parses")
}

fn log_uniform(rng: &mut ChaCha8Rng, centre: f64, spread: f64) -> f64 {
    centre * (rng.random_range(-1.0..=1.0) * spread.ln()).exp()
}

/// Connected grid with parameters log-uniform within a factor `spread` of
/// the uniform bus and line values.
pub fn random_grid(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> MicrogridSpec {
    let base = uniform_bus(0.2);
    let buses: Vec<BusParams> = (0..n)
        .map(|_| {
            // Loads from a few hundred watts up to the nominal rating.
            let p_max = log_uniform(rng, base.p_max, spread) * 10f64.powf(-rng.random_range(0.0..1.5));
            let v_e_min = log_uniform(rng, 360.0, 1.1).min(430.0);
            BusParams {
                r_s: log_uniform(rng, base.r_s, spread),
                l_s: log_uniform(rng, base.l_s, spread),
                r_l: log_uniform(rng, base.r_l, spread),
                l_l: log_uniform(rng, base.l_l, spread),
                c_b: log_uniform(rng, base.c_b, spread),
                c_l: log_uniform(rng, base.c_l, spread),
                d: log_uniform(rng, 0.15, spread * 1.5),
                v_ref: 400.0,
                p_min: p_max * rng.random_range(0.0..0.5),
                p_max,
                v_e_min,
                v_e_max: 440.0,
                has_source: true,
                has_load: true,
            }
        })
        .collect();
    let mut lines = Vec::new();
    for k in 1..n {
        lines.push(Line {
            from: rng.random_range(0..k),
            to: k,
            r: log_uniform(rng, 1.0, spread),
        });
    }
    if n == 3 && rng.random_bool(0.5) && !lines.iter().any(|l| l.from == 1 && l.to == 2) {
        lines.push(Line {
            from: 1,
            to: 2,
            r: log_uniform(rng, 1.0, spread),
        });
    }
    MicrogridSpec::new(format!("random-{n}"), buses, lines).expect("random grid is valid")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
