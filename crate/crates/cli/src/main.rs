use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod error;

use error::CliError;

/// Robust stability analysis for DC microgrids with uncertain constant power loads.
#[derive(Debug, Parser)]
#[command(name = "dcmg", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Lemma1,
    Lemma2,
    Prop1,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Increment,
    Bracket,
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    /// Verification tolerance on the normalised problem.
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    /// Strictness margin relative to the spectral norm of the critical matrix.
    #[arg(long = "eps-margin", default_value_t = 1e-6)]
    pub eps_margin: f64,
    #[arg(long, default_value_t = 150)]
    pub max_iter: usize,
    /// Seed for vertex sampling in post-solve checks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Maximum number of uncertain loads for vertex enumeration.
    #[arg(long, default_value_t = 20)]
    pub vertex_cap: usize,
    /// Vertices sampled by the post-solve checks.
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Certify the netlist's uncertainty box.
    Check {
        netlist: String,
        #[arg(long, value_enum, default_value = "all")]
        method: MethodArg,
        #[command(flatten)]
        solver: SolverArgs,
        /// Also run the exhaustive vertex eigenvalue oracle.
        #[arg(long)]
        oracle: bool,
        /// Run the secondary objective once feasible.
        #[arg(long)]
        objective: bool,
        /// Re-certify with a saved Lemma 2 / Prop 1 certificate, no solve.
        #[arg(long, value_name = "CERT_JSON")]
        recheck: Option<String>,
        /// Include wall-clock timings in the report.
        #[arg(long)]
        timing: bool,
        #[arg(long)]
        out: Option<String>,
    },
    /// Integrate the nonlinear model under a load profile.
    Simulate {
        netlist: String,
        #[arg(long)]
        profile: String,
        /// End time in seconds (default: last profile knot).
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long, default_value_t = 1e-5)]
        dt: f64,
        /// Keep every n-th step in the trace.
        #[arg(long, default_value_t = 100)]
        stride: usize,
        /// Relative amplitude of seeded per-step load ripple (overrides the profile).
        #[arg(long)]
        ripple: Option<f64>,
        /// Ripple seed (overrides the profile).
        #[arg(long)]
        seed: Option<u64>,
        /// Trace CSV destination (default: stdout, summary goes to stderr).
        #[arg(long)]
        out: Option<String>,
    },
    /// Largest uniform delta certified by each method.
    Sweep {
        netlist: String,
        #[arg(long, value_enum, default_value = "all")]
        method: MethodArg,
        /// Bisection width inside the final step.
        #[arg(long)]
        refine: Option<f64>,
        #[arg(long, value_enum, default_value = "increment")]
        mode: ModeArg,
        #[arg(long, default_value_t = 1.0)]
        start: f64,
        #[arg(long, default_value_t = 1.0)]
        step: f64,
        #[arg(long, default_value_t = 1e5)]
        limit: f64,
        /// Solve every probe instead of re-checking the previous witness first.
        #[arg(long)]
        no_reuse: bool,
        /// Include the probe history.
        #[arg(long)]
        history: bool,
        #[arg(long)]
        timing: bool,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long)]
        out: Option<String>,
    },
    /// Operational power or voltage bound from a certified threshold.
    Bounds {
        #[arg(long = "delta-u")]
        delta_u: f64,
        #[arg(long)]
        cl: f64,
        #[arg(long, conflicts_with = "pmax", required_unless_present = "pmax")]
        vmin: Option<f64>,
        #[arg(long)]
        pmax: Option<f64>,
    },
    /// Steady state for given load powers.
    Equilibrium {
        netlist: String,
        /// Uniform load power in W.
        #[arg(long, conflicts_with = "powers", required_unless_present = "powers")]
        p: Option<f64>,
        /// Comma-separated per-bus powers in W.
        #[arg(long, value_delimiter = ',')]
        powers: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Latin-hypercube probe of equilibria over the power box.
    Probe {
        netlist: String,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Include every sample in the report.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        out: Option<String>,
    },
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Param("--jobs must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Param(e.to_string()))?;
    }
    match cli.command {
        Command::Check {
            netlist,
            method,
            solver,
            oracle,
            objective,
            recheck,
            timing,
            out,
        } => commands::check(&commands::CheckArgs {
            netlist,
            method,
            solver,
            oracle,
            objective,
            recheck,
            timing,
            out,
        }),
        Command::Simulate {
            netlist,
            profile,
            t_end,
            dt,
            stride,
            ripple,
            seed,
            out,
        } => commands::simulate(&netlist, &profile, t_end, dt, stride, ripple, seed, out.as_deref()),
        Command::Sweep {
            netlist,
            method,
            refine,
            mode,
            start,
            step,
            limit,
            no_reuse,
            history,
            timing,
            solver,
            out,
        } => commands::sweep(&commands::SweepArgs {
            netlist,
            method,
            refine,
            mode,
            start,
            step,
            limit,
            reuse: !no_reuse,
            history,
            timing,
            solver,
            out,
        }),
        Command::Bounds {
            delta_u,
            cl,
            vmin,
            pmax,
        } => commands::bounds(delta_u, cl, vmin, pmax),
        Command::Equilibrium {
            netlist,
            p,
            powers,
            out,
        } => commands::equilibrium(&netlist, p, powers, out.as_deref()),
        Command::Probe {
            netlist,
            samples,
            seed,
            all,
            out,
        } => commands::probe(&netlist, samples, seed, all, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { error::EXIT_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("dcmg: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
