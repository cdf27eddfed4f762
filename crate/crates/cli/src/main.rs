use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hyperbolic_backstepping::experiment::{
    load_config, run_experiment, CaseSelection, CoefficientSpec, ExperimentConfig, Mode, Summary,
};
use hyperbolic_backstepping::Error;

#[derive(Parser)]
#[command(
    name = "backstep",
    version,
    about = "Bilateral backstepping control of 2x2 hyperbolic systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the kernel equations and write kernels.csv and gains.csv.
    Kernels(Common),
    /// Simulate the plant (open and/or closed loop per the config, both by default).
    Simulate(Common),
    /// Run the built-in example profile in open and closed loop.
    PaperExample(Common),
    /// Compare the simulated target system against its reference on three grids.
    TargetCheck(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment file; without it the built-in example profile is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// auto, 1, 2 or 3.
    #[arg(long)]
    case: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Plant grid nodes (odd).
    #[arg(long)]
    nx: Option<usize>,
    /// Kernel grid nodes per direction.
    #[arg(long)]
    nw: Option<usize>,
    #[arg(long)]
    cfl: Option<f64>,
    #[arg(long = "t-final")]
    t_final: Option<f64>,
    /// Picard and Volterra tolerance.
    #[arg(long)]
    tol: Option<f64>,
}

fn build_config(command: &Command) -> hyperbolic_backstepping::Result<ExperimentConfig> {
    let (common, mode) = match command {
        Command::Kernels(c) => (c, Some(Mode::KernelsOnly)),
        Command::Simulate(c) => (c, None),
        Command::PaperExample(c) => (c, Some(Mode::Both)),
        Command::TargetCheck(c) => (c, Some(Mode::TargetCheck)),
    };
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::new(Mode::Both, CoefficientSpec::Example),
    };
    if let Command::PaperExample(_) = command {
        cfg.coefficients = CoefficientSpec::Example;
    }
    cfg.mode = match mode {
        Some(m) => m,
        None if matches!(cfg.mode, Mode::OpenLoop | Mode::ClosedLoop) => cfg.mode,
        None => Mode::Both,
    };
    if let Some(c) = &common.case {
        cfg.case = CaseSelection::parse(c)?;
    }
    if let Some(o) = &common.out {
        cfg.output = o.clone();
    }
    if let Some(n) = common.nx {
        cfg.grid.n_x = n;
    }
    if let Some(n) = common.nw {
        cfg.grid.n_w = n;
        cfg.grid.n_s = n;
    }
    if let Some(c) = common.cfl {
        cfg.simulation.cfl = c;
    }
    if let Some(t) = common.t_final {
        cfg.simulation.t_final = t;
    }
    if let Some(t) = common.tol {
        cfg.tolerances.picard = t;
        cfg.tolerances.volterra = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::InvalidResolution(_)
        | Error::CaseMismatch { .. }
        | Error::MixedSignSpeeds { .. }
        | Error::NonPositiveSpeed { .. }
        | Error::LengthMismatch(_)
        | Error::CflViolation { .. }
        | Error::NonzeroDiagonalCoupling { .. } => 2,
        Error::NoConvergence { .. } => 3,
        _ => 1,
    }
}

fn report(s: &Summary, out: &std::path::Path) {
    println!(
        "case {} ({:?}), margin {:.3e}, Tf = {:.6}",
        s.case, s.case_name, s.classification_margin, s.tf
    );
    if let Some(k) = &s.kernel {
        println!(
            "kernels: {} iterations, residual sup {:.3e} l2 {:.3e}, bound {} (margin {:.3e})",
            k.iterations,
            k.final_residual,
            k.residual_l2,
            if k.bound_passed { "ok" } else { "FAILED" },
            k.bound_margin
        );
    }
    for (name, l) in [("open loop", &s.open_loop), ("closed loop", &s.closed_loop)] {
        if let Some(l) = l {
            let settle = l
                .settling_time
                .map_or_else(|| "not reached".to_string(), |t| format!("{t:.4}"));
            println!(
                "{name}: final relative L2 {:.3e}, 1% settling {settle}",
                l.final_relative_l2
            );
        }
    }
    if let Some(tc) = &s.target_check {
        println!(
            "target check ({}, {} at t = {:.4}):",
            tc.reference, tc.metric, tc.time
        );
        for (n, e) in tc.grids.iter().zip(&tc.errors) {
            println!("  n_x = {n:4}  error {e:.3e}");
        }
        let orders: Vec<String> = tc
            .observed_orders
            .iter()
            .map(|o| format!("{o:.3}"))
            .collect();
        println!("  observed orders {}", orders.join(", "));
    }
    for w in &s.warnings {
        println!("warning: {w}");
    }
    println!("artifacts in {}", out.display());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = build_config(&cli.command).and_then(|cfg| run_experiment(&cfg).map(|r| (cfg, r)));
    match result {
        Ok((cfg, run)) => {
            report(&run.summary, &cfg.output);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
