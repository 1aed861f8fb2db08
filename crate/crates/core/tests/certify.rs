use proptest::prelude::*;

use dcmg_core::certify::{certify, vertex_oracle, Certificate, CertifyOptions, Method, Verdict};
use dcmg_core::model::{assemble, uniform_bus, Line, MicrogridSpec};
use dcmg_core::sweep::{line_search_delta_u, SearchMode, SweepConfig};
use dcmg_core::uncertainty::{delta_bounds, UncertaintyBox};

fn pair(d: f64, r: f64) -> MicrogridSpec {
    MicrogridSpec::new(
        "pair",
        vec![uniform_bus(d), uniform_bus(d)],
        vec![Line { from: 0, to: 1, r }],
    )
    .unwrap()
}

#[test]
fn certificate_json_round_trips() {
    let spec = pair(0.2, 1.0);
    let bx = delta_bounds(&spec, &assemble(&spec)).unwrap();
    let opts = CertifyOptions::default();
    for method in Method::SOLVERS {
        if let Verdict::Certified(c) = certify(method, &bx, &opts).unwrap() {
            let back = Certificate::from_json(&c.to_json()).unwrap();
            assert_eq!(back.to_json(), c.to_json(), "{method}");
            assert_eq!(back.method, c.method);
        }
    }
}

#[test]
fn corrupted_certificates_are_rejected() {
    let spec = pair(0.2, 1.0);
    let bx = delta_bounds(&spec, &assemble(&spec)).unwrap();
    let Verdict::Certified(c) = certify(Method::Prop1, &bx, &CertifyOptions::default()).unwrap() else {
        panic!("pair should certify");
    };
    let mut v = c.to_json_value();
    v["P"]["data"] = "AAAA".into();
    assert!(Certificate::from_json(&v.to_string()).is_err());
    assert!(Certificate::from_json("{}").is_err());
}

#[test]
fn certified_pair_passes_the_oracle() {
    let spec = pair(0.2, 1.0);
    let bx = delta_bounds(&spec, &assemble(&spec)).unwrap();
    let opts = CertifyOptions::default();
    assert!(vertex_oracle(&bx, &opts).unwrap().all_hurwitz());
    assert!(certify(Method::Lemma1, &bx, &opts).unwrap().is_certified());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn bracket_search_matches_increment(d in 0.05..0.5f64, r in 0.3..2.0f64) {
        let m = assemble(&pair(d, r));
        let rows = m.layout.v_l_rows();
        for method in [Method::Lemma2, Method::Prop1] {
            let inc = SweepConfig { step: 5.0, ..SweepConfig::default() };
            let br = SweepConfig { mode: SearchMode::Bracket, ..inc.clone() };
            let a = line_search_delta_u(&m.a, &rows, method, &inc).unwrap();
            let b = line_search_delta_u(&m.a, &rows, method, &br).unwrap();
            prop_assert_eq!(a.delta_u, b.delta_u, "{}", method);
        }
    }

    #[test]
    fn shrinking_the_box_keeps_certification(d in 0.1..0.5f64, scale in 0.1..1.0f64) {
        let spec = pair(d, 1.0);
        let bx = delta_bounds(&spec, &assemble(&spec)).unwrap();
        let opts = CertifyOptions::default();
        if certify(Method::Prop1, &bx, &opts).unwrap().is_certified() {
            let hi: Vec<f64> = bx.delta_hi().iter().map(|h| h * scale).collect();
            let lo: Vec<f64> = bx.delta_lo().iter().zip(&hi).map(|(l, h)| l.min(*h)).collect();
            let small: UncertaintyBox = bx.with_bounds(lo, hi).unwrap();
            prop_assert!(certify(Method::Prop1, &small, &opts).unwrap().is_certified());
        }
    }
}
