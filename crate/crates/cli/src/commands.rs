use std::fs;
use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Map, Value};

use dcmg_core::certify::{certify, vertex_oracle, Certificate, CertifyOptions, Method, OracleVerdict, Verdict};
use dcmg_core::equilibrium::{feasible_set_probe, solve_equilibrium};
use dcmg_core::model::{assemble, parse_netlist, MicrogridSpec, SystemMatrices};
use dcmg_core::report::{digest_bytes, to_canonical_json, AnalysisReport, MatrixSummary, MethodReport, Status};
use dcmg_core::sim::{parse_profile, simulate_from_equilibrium, SimOptions};
use dcmg_core::sweep::{line_search_delta_u, max_certifiable_power, min_certifiable_voltage, SearchMode, SweepConfig};
use dcmg_core::uncertainty::{corollary_recheck, delta_bounds, Recheck, UncertaintyBox};

use crate::error::{CliError, EXIT_INCONCLUSIVE, EXIT_NOT_CERTIFIED, EXIT_OK};
use crate::{MethodArg, ModeArg, SolverArgs};

fn read(path: &str) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_string(),
        source,
    })
}

struct Loaded {
    text: String,
    spec: MicrogridSpec,
    m: SystemMatrices,
}

fn load(path: &str) -> Result<Loaded, CliError> {
    let text = read(path)?;
    let spec = parse_netlist(&text).map_err(|source| CliError::Netlist {
        path: path.to_string(),
        source,
    })?;
    let m = assemble(&spec);
    Ok(Loaded { text, spec, m })
}

fn emit(out: Option<&str>, body: &str) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, body).map_err(|source| CliError::Io {
            path: path.to_string(),
            source,
        }),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(body.as_bytes())
                .map_err(|source| CliError::Io {
                    path: "<stdout>".into(),
                    source,
                })
        }
    }
}

fn methods(arg: MethodArg) -> Vec<Method> {
    match arg {
        MethodArg::Lemma1 => vec![Method::Lemma1],
        MethodArg::Lemma2 => vec![Method::Lemma2],
        MethodArg::Prop1 => vec![Method::Prop1],
        // cheapest first
        MethodArg::All => vec![Method::Prop1, Method::Lemma2, Method::Lemma1],
    }
}

fn certify_options(s: &SolverArgs, objective: bool) -> Result<CertifyOptions, CliError> {
    if !(s.tol > 0.0 && s.tol.is_finite()) {
        return Err(CliError::Param(format!("--tol must be > 0, got {}", s.tol)));
    }
    if !(s.eps_margin > 0.0 && s.eps_margin.is_finite()) {
        return Err(CliError::Param(format!("--eps-margin must be > 0, got {}", s.eps_margin)));
    }
    if s.max_iter == 0 {
        return Err(CliError::Param("--max-iter must be >= 1".into()));
    }
    Ok(CertifyOptions {
        eps: s.eps_margin,
        tol: s.tol,
        max_iter: s.max_iter,
        vertex_cap: s.vertex_cap,
        samples: s.samples,
        seed: s.seed,
        objective,
        ..CertifyOptions::default()
    })
}

fn options_json(o: &CertifyOptions) -> Value {
    json!({
        "eps_margin": o.eps,
        "tol": o.tol,
        "max_iter": o.max_iter,
        "vertex_cap": o.vertex_cap,
        "samples": o.samples,
        "seed": o.seed,
        "objective": o.objective,
    })
}

fn oracle_json(v: &OracleVerdict) -> Value {
    match v {
        OracleVerdict::AllHurwitz { rightmost, vertices } => json!({
            "all_hurwitz": true,
            "rightmost": rightmost,
            "vertices": vertices,
        }),
        OracleVerdict::UnstableVertex { index, eigenvalue } => json!({
            "all_hurwitz": false,
            "vertex": index,
            "eigenvalue": [eigenvalue.re, eigenvalue.im],
        }),
    }
}

fn exit_for(status: Status) -> ExitCode {
    ExitCode::from(match status {
        Status::Certified => EXIT_OK,
        Status::NotCertified => EXIT_NOT_CERTIFIED,
        Status::Inconclusive => EXIT_INCONCLUSIVE,
    })
}

pub struct CheckArgs {
    pub netlist: String,
    pub method: MethodArg,
    pub solver: SolverArgs,
    pub oracle: bool,
    pub objective: bool,
    pub recheck: Option<String>,
    pub timing: bool,
    pub out: Option<String>,
}

fn recheck_report(path: &str, bx: &UncertaintyBox) -> Result<MethodReport, CliError> {
    let cert = Certificate::from_json(&read(path)?).map_err(|source| CliError::Certificate {
        path: path.to_string(),
        source,
    })?;
    if cert.matrix_digest != bx.matrix_digest() {
        return Err(CliError::Input(format!(
            "{path}: certificate was issued for a different system matrix"
        )));
    }
    let old = bx.with_bounds(cert.delta_lo.clone(), cert.delta_hi.clone())?;
    Ok(match corollary_recheck(&old, bx, &cert)? {
        Recheck::Certified(c) => MethodReport::new(Method::Corollary1, &Verdict::Certified(c), None),
        Recheck::MustResolve { loads } => {
            let loads: Vec<usize> = loads.iter().map(|&k| k + 1).collect();
            MethodReport {
                method: Method::Corollary1,
                status: Status::NotCertified,
                detail: Some(format!("must re-solve: upper bound grew on loads {loads:?}")),
                certificate: None,
                seconds: None,
            }
        }
    })
}

pub fn check(args: &CheckArgs) -> Result<ExitCode, CliError> {
    let Loaded { text, spec, m } = load(&args.netlist)?;
    let opts = certify_options(&args.solver, args.objective)?;
    let bx = delta_bounds(&spec, &m)?;
    let mut verdicts = Vec::new();
    if let Some(path) = &args.recheck {
        verdicts.push(recheck_report(path, &bx)?);
    } else {
        for method in methods(args.method) {
            let clock = Instant::now();
            let verdict = certify(method, &bx, &opts)?;
            let seconds = args.timing.then(|| clock.elapsed().as_secs_f64());
            verdicts.push(MethodReport::new(method, &verdict, seconds));
        }
    }
    let mut extra = Map::new();
    extra.insert("options".into(), options_json(&opts));
    if args.oracle {
        extra.insert("oracle".into(), oracle_json(&vertex_oracle(&bx, &opts)?));
    }
    let report = AnalysisReport {
        name: spec.name.clone(),
        input_digest: digest_bytes(text.as_bytes()),
        matrices: MatrixSummary::new(&spec, &m, &bx),
        uncertainty: bx.summary(),
        verdicts,
        extra,
    };
    emit(args.out.as_deref(), &to_canonical_json(&report))?;
    Ok(exit_for(report.overall()))
}

#[allow(clippy::too_many_arguments)]
pub fn simulate(
    netlist: &str,
    profile_path: &str,
    t_end: Option<f64>,
    dt: f64,
    stride: usize,
    ripple: Option<f64>,
    seed: Option<u64>,
    out: Option<&str>,
) -> Result<ExitCode, CliError> {
    let Loaded { spec, .. } = load(netlist)?;
    let profile = parse_profile(&read(profile_path)?, &spec).map_err(|source| CliError::Profile {
        path: profile_path.to_string(),
        source,
    })?;
    let opts = SimOptions {
        dt,
        t_end: t_end.unwrap_or_else(|| profile.horizon()),
        stride,
        ripple: ripple.or(profile.ripple).unwrap_or(0.0),
        seed: seed.or(profile.seed).unwrap_or(0),
        ..SimOptions::default()
    };
    let trace = simulate_from_equilibrium(&spec, &profile, &opts)?;
    let loads = spec.load_buses();
    let summary = match &trace.divergence {
        Some(d) => json!({
            "diverged": true,
            "onset_time": d.time,
            "onset_power": loads.iter().map(|&k| d.power[k]).collect::<Vec<_>>(),
            "state": trace.labels[d.state],
            "cause": d.cause,
            "steps": trace.steps,
        }),
        None => json!({
            "diverged": false,
            "t_end": opts.t_end,
            "steps": trace.steps,
        }),
    };
    let mut value = summary;
    dcmg_core::report::canonicalize(&mut value);
    let line = format!("{value}\n");
    match out {
        Some(path) => {
            let file = fs::File::create(path).map_err(|source| CliError::Io {
                path: path.to_string(),
                source,
            })?;
            trace.write_csv(std::io::BufWriter::new(file))?;
            emit(None, &line)?;
        }
        None => {
            trace.write_csv(std::io::stdout().lock())?;
            eprint!("{line}");
        }
    }
    Ok(ExitCode::from(EXIT_OK))
}

pub struct SweepArgs {
    pub netlist: String,
    pub method: MethodArg,
    pub refine: Option<f64>,
    pub mode: ModeArg,
    pub start: f64,
    pub step: f64,
    pub limit: f64,
    pub reuse: bool,
    pub history: bool,
    pub timing: bool,
    pub solver: SolverArgs,
    pub out: Option<String>,
}

#[derive(Serialize)]
struct SweepRow {
    method: Method,
    delta_u: f64,
    first_failure: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    refinement: Option<[f64; 2]>,
    solves: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_solve_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    probes: Option<Value>,
}

pub fn sweep(args: &SweepArgs) -> Result<ExitCode, CliError> {
    let Loaded { text, spec, m } = load(&args.netlist)?;
    if let Some(w) = args.refine {
        if !(w > 0.0 && w.is_finite()) {
            return Err(CliError::Param(format!("--refine must be > 0, got {w}")));
        }
    }
    let cfg = SweepConfig {
        start: args.start,
        step: args.step,
        limit: args.limit,
        mode: match args.mode {
            ModeArg::Increment => SearchMode::Increment,
            ModeArg::Bracket => SearchMode::Bracket,
        },
        refine: args.refine,
        reuse: args.reuse,
        certify: certify_options(&args.solver, false)?,
    };
    let rows = m.layout.v_l_rows();
    let mut table = Vec::new();
    for method in methods(args.method) {
        let r = line_search_delta_u(&m.a, &rows, method, &cfg)?;
        table.push(SweepRow {
            method,
            delta_u: r.delta_u,
            first_failure: r.first_failure,
            refinement: r.refinement,
            solves: r.solves,
            mean_solve_seconds: args.timing.then(|| r.mean_solve_seconds()),
            probes: args.history.then(|| {
                let mut v = serde_json::to_value(&r.probes).expect("probes serialize");
                if args.timing {
                    if let Value::Array(items) = &mut v {
                        for (item, p) in items.iter_mut().zip(&r.probes) {
                            item["seconds"] = json!(p.seconds);
                        }
                    }
                }
                v
            }),
        });
    }
    let report = json!({
        "name": spec.name,
        "input_digest": digest_bytes(text.as_bytes()),
        "mode": cfg.mode,
        "start": cfg.start,
        "step": cfg.step,
        "options": options_json(&cfg.certify),
        "rows": table,
    });
    emit(args.out.as_deref(), &to_canonical_json(&report))?;
    Ok(ExitCode::from(EXIT_OK))
}

pub fn bounds(delta_u: f64, cl: f64, vmin: Option<f64>, pmax: Option<f64>) -> Result<ExitCode, CliError> {
    let report = match (vmin, pmax) {
        (Some(v), _) => json!({
            "delta_u": delta_u,
            "c_l": cl,
            "v_min": v,
            "max_certifiable_power": max_certifiable_power(delta_u, cl, v)?,
        }),
        (None, Some(p)) => json!({
            "delta_u": delta_u,
            "c_l": cl,
            "p_max": p,
            "min_certifiable_voltage": min_certifiable_voltage(delta_u, cl, p)?,
        }),
        (None, None) => return Err(CliError::Param("one of --vmin or --pmax is required".into())),
    };
    emit(None, &to_canonical_json(&report))?;
    Ok(ExitCode::from(EXIT_OK))
}

pub fn equilibrium(
    netlist: &str,
    p: Option<f64>,
    powers: Option<Vec<f64>>,
    out: Option<&str>,
) -> Result<ExitCode, CliError> {
    let Loaded { spec, m, .. } = load(netlist)?;
    let p = match (p, powers) {
        (_, Some(v)) => v,
        (Some(u), None) => {
            let mut v = vec![0.0; spec.n()];
            for k in spec.load_buses() {
                v[k] = u;
            }
            v
        }
        (None, None) => return Err(CliError::Param("one of --p or --powers is required".into())),
    };
    let eq = solve_equilibrium(&spec, &p, None)?;
    let states: Vec<Value> = m
        .layout
        .labels()
        .into_iter()
        .zip(eq.x_e.iter())
        .map(|(label, v)| json!({"state": label, "value": v}))
        .collect();
    let report = json!({
        "name": spec.name,
        "p": eq.p,
        "states": states,
        "v_l_e": eq.v_l_e,
        "feasible": eq.feasible,
        "residual": eq.residual,
        "iterations": eq.iterations,
    });
    emit(out, &to_canonical_json(&report))?;
    Ok(ExitCode::from(EXIT_OK))
}

pub fn probe(netlist: &str, samples: usize, seed: u64, all: bool, out: Option<&str>) -> Result<ExitCode, CliError> {
    let Loaded { spec, .. } = load(netlist)?;
    let results = feasible_set_probe(&spec, samples, seed)?;
    let feasible = results.iter().filter(|s| s.feasible()).count();
    let failed = results.iter().filter(|s| s.result.is_err()).count();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in &results {
        if let Ok(e) = &s.result {
            for &v in &e.v_l_e {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    let mut report = json!({
        "name": spec.name,
        "samples": samples,
        "seed": seed,
        "feasible": feasible,
        "infeasible": samples - feasible - failed,
        "failed": failed,
    });
    if failed < samples {
        report["v_l_range"] = json!([lo, hi]);
    }
    if all {
        let items: Vec<Value> = results
            .iter()
            .map(|s| match &s.result {
                Ok(e) => json!({"p": s.p, "v_l_e": e.v_l_e, "feasible": e.feasible}),
                Err(err) => json!({"p": s.p, "error": err.to_string()}),
            })
            .collect();
        report["results"] = Value::Array(items);
    }
    emit(out, &to_canonical_json(&report))?;
    Ok(ExitCode::from(EXIT_OK))
}
