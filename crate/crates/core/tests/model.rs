use nalgebra::DMatrix;
use proptest::prelude::*;

use dcmg_core::model::{assemble, parse_netlist, uniform_bus, BusParams, Line, MicrogridSpec, StateKind};

fn bus(d: f64, r_s: f64, c_b: f64, has_source: bool, has_load: bool) -> BusParams {
    BusParams {
        d,
        r_s,
        c_b,
        has_source,
        has_load,
        ..uniform_bus(0.2)
    }
}

prop_compose! {
    fn grid()(n in 2usize..=5)(
        params in prop::collection::vec((0.0..1.0f64, 0.01..0.2f64, 1e-4..1e-3f64, 0u8..3), n),
        parents in prop::collection::vec(0usize..100, n - 1),
        rs in prop::collection::vec(0.1..2.0f64, n - 1),
    ) -> MicrogridSpec {
        let buses = params
            .iter()
            .map(|&(d, r_s, c_b, kind)| bus(d, r_s, c_b, kind != 1, kind != 2))
            .collect();
        let lines = (1..=parents.len())
            .map(|k| Line { from: parents[k - 1] % k, to: k, r: rs[k - 1] })
            .collect();
        MicrogridSpec::new("prop", buses, lines).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relabelling_buses_permutes_states(spec in grid(), shift in 1usize..5) {
        let n = spec.n();
        let perm: Vec<usize> = (0..n).map(|k| (k + shift) % n).collect();
        let mut buses = spec.buses.clone();
        for (k, b) in spec.buses.iter().enumerate() {
            buses[perm[k]] = b.clone();
        }
        let lines = spec
            .lines
            .iter()
            .map(|l| Line { from: perm[l.from], to: perm[l.to], r: l.r })
            .collect();
        let moved = MicrogridSpec::new("moved", buses, lines).unwrap();
        let (m, mm) = (assemble(&spec), assemble(&moved));
        let map = |i: usize| {
            let (kind, k) = m.layout.states()[i];
            mm.layout.index(kind, perm[k]).unwrap()
        };
        let dim = m.layout.dim();
        for i in 0..dim {
            for j in 0..dim {
                prop_assert_eq!(m.a[(i, j)], mm.a[(map(i), map(j))]);
            }
        }
    }

    #[test]
    fn line_couplings_conserve_charge(spec in grid()) {
        // Σ_k C_b,k · (line part of v̇_b,k) vanishes for any voltage vector.
        let m = assemble(&spec);
        let mut lines_only = spec.clone();
        for b in &mut lines_only.buses {
            b.has_source = false;
            b.has_load = false;
        }
        let ml = assemble(&lines_only);
        for j in 0..spec.n() {
            let col: f64 = (0..spec.n()).map(|k| spec.buses[k].c_b * ml.a0[(k, j)]).sum();
            prop_assert!(col.abs() < 1e-9, "column {j}: {col}");
        }
        prop_assert_eq!(m.layout.dim(), spec.buses.iter().map(|b| 1 + b.has_source as usize + 2 * b.has_load as usize).sum::<usize>());
    }

    #[test]
    fn droop_only_touches_source_current_diagonals(spec in grid()) {
        let m = assemble(&spec);
        let diff: DMatrix<f64> = &m.a0 - &m.a;
        for (i, &(kind, k)) in m.layout.states().iter().enumerate() {
            for j in 0..m.layout.dim() {
                let expected = if i == j && kind == StateKind::SourceCurrent {
                    spec.buses[k].d / spec.buses[k].l_s
                } else {
                    0.0
                };
                prop_assert!((diff[(i, j)] - expected).abs() <= 1e-12 * expected.abs().max(1.0));
            }
        }
    }
}

#[test]
fn netlist_lines_are_one_based() {
    let text = r#"
name = "pair"
[[bus]]
r_s = 0.05
L_s = 0.9e-3
r_l = 0.05
L_l = 0.9e-3
C_b = 0.75e-3
C_l = 0.7e-3
d = 0.2
v_ref = 400.0
p_min = 5000.0
p_max = 20000.0
v_e_min = 360.0
v_e_max = 440.0
[[bus]]
r_s = 0.05
L_s = 0.9e-3
r_l = 0.05
L_l = 0.9e-3
C_b = 0.75e-3
C_l = 0.7e-3
d = 0.2
v_ref = 400.0
p_min = 5000.0
p_max = 20000.0
v_e_min = 360.0
v_e_max = 440.0
[[line]]
from = 1
to = 2
r = 0.5
"#;
    let spec = parse_netlist(text).unwrap();
    assert_eq!(spec.lines, vec![Line { from: 0, to: 1, r: 0.5 }]);
    assert!(parse_netlist(&text.replace("to = 2", "to = 3")).is_err());
    assert!(parse_netlist(&text.replace("r = 0.5", "r = -0.5")).is_err());
    assert!(parse_netlist(&text.replace("d = 0.2", "d = 0.2\nbogus = 1")).is_err());
}
