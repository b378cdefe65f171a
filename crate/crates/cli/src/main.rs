//! `chopt`: optimal control of the convective Cahn-Hilliard system.
//!
//! Subcommands: `forward`, `optimize`, `pod-build`, `benchmark`, `check`.
//! Exit codes: 0 success, 2 configuration error, 3 solver failure,
//! 4 line-search failure, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chopt_core::run::{self, ModelKind, RunConfig};
use chopt_core::Error;

#[derive(Parser)]
#[command(
    name = "chopt",
    about = "Adjoint-based optimal control of the convective Cahn-Hilliard system with a POD/DEIM reduced-order layer",
    version
)]
struct Cli {
    /// TOML configuration file; defaults reproduce the reference experiment.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "chopt-out")]
    out: PathBuf,

    /// Worker threads for the linear algebra backend (1 = deterministic).
    /// Overrides the CHOPT_THREADS environment variable.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the state system forward in time and write trajectory artifacts.
    Forward {
        /// Optional control history CSV (as written by `optimize`); zero control otherwise.
        #[arg(long)]
        control: Option<PathBuf>,
    },
    /// Run projected gradient descent with the chosen model.
    Optimize {
        /// Which model evaluates cost and gradient: fom, rom or rom-deim.
        #[arg(long, default_value = "fom")]
        model: String,
    },
    /// Build and persist the POD basis and DEIM data.
    PodBuild,
    /// Time the four optimization variants and the offline phase.
    Benchmark,
    /// Run the invariant check suite and print one line per check.
    Check,
    /// Print the default configuration as TOML.
    PrintConfig,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parse { .. } => 2,
        Error::NewtonDiverged { .. } | Error::Factorization(_) | Error::CflViolation { .. } => 3,
        Error::LineSearchFailed { .. } => 4,
        _ => 1,
    }
}

fn load_config(path: &Option<PathBuf>) -> chopt_core::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn real_main() -> chopt_core::Result<u8> {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("CHOPT_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(1);
    chopt_core::init_threads(threads);
    match &cli.command {
        Command::Forward { control } => {
            let cfg = load_config(&cli.config)?;
            let u = match control {
                Some(p) => Some(chopt_core::io::read_control_csv(p)?),
                None => None,
            };
            run::run_forward(&cfg, u, &cli.out)?;
            println!("forward solve finished; artifacts in {}", cli.out.display());
            Ok(0)
        }
        Command::Optimize { model } => {
            let cfg = load_config(&cli.config)?;
            let kind: ModelKind = model.parse()?;
            let outcome = run::run_optimize(&cfg, kind, &cli.out)?;
            for r in &outcome.records {
                let step = r.step.map(|s| format!("{s}")).unwrap_or_default();
                println!(
                    "k = {:2}  J = {:>12.6e}  |J'| = {:>12.6e}  s = {step}",
                    r.k, r.cost, r.grad_norm
                );
            }
            println!(
                "model cost {:.6e}; full-order cost at returned control {:.6e}",
                outcome.model_cost.total(),
                outcome.full_cost.total()
            );
            match outcome.reason {
                chopt_core::optim::StopReason::Converged => {
                    println!("stopping criterion reached");
                    Ok(0)
                }
                chopt_core::optim::StopReason::MaxIterations => {
                    println!("iteration cap reached");
                    Ok(0)
                }
                chopt_core::optim::StopReason::LineSearchFailed => {
                    eprintln!("line search failed; best iterate written");
                    Ok(4)
                }
            }
        }
        Command::PodBuild => {
            let cfg = load_config(&cli.config)?;
            let basis = run::run_pod_build(&cfg, &cli.out)?;
            println!(
                "basis with {} modes on a mesh with {} vertices written to {}",
                basis.ell(),
                basis.mesh.n_vertices(),
                cli.out.display()
            );
            if basis.truncated > 0 {
                eprintln!(
                    "warning: {} requested modes beyond the numerical rank were dropped",
                    basis.truncated
                );
            }
            Ok(0)
        }
        Command::Benchmark => {
            let cfg = load_config(&cli.config)?;
            let report = run::run_benchmark(&cfg, &cli.out)?;
            println!("phase            uniform_fe  adaptive_fe       pod   pod_deim  (seconds)");
            println!(
                "optimization     {:>10.3} {:>12.3} {:>9.3} {:>10.4}",
                report.uniform_fe.optimization,
                report.adaptive_fe.optimization,
                report.pod.optimization,
                report.pod_deim.optimization
            );
            println!(
                "state solve      {:>10.3} {:>12.3} {:>9.3} {:>10.4}",
                report.uniform_fe.state_solve,
                report.adaptive_fe.state_solve,
                report.pod.state_solve,
                report.pod_deim.state_solve
            );
            println!(
                "adjoint solve    {:>10.3} {:>12.3} {:>9.3} {:>10.4}",
                report.uniform_fe.adjoint_solve,
                report.adaptive_fe.adjoint_solve,
                report.pod.adjoint_solve,
                report.pod_deim.adjoint_solve
            );
            println!(
                "offline: interpolation {:.3} s, basis {:.3} s, deim {:.3} s",
                report.offline_interpolation, report.offline_basis, report.offline_deim
            );
            Ok(0)
        }
        Command::Check => {
            let mut all_pass = true;
            for c in run::run_check() {
                let status = if c.pass { "PASS" } else { "FAIL" };
                println!("{status}  {}  {}", c.name, c.detail);
                all_pass &= c.pass;
            }
            Ok(if all_pass { 0 } else { 3 })
        }
        Command::PrintConfig => {
            print!("{}", RunConfig::default().to_toml());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
