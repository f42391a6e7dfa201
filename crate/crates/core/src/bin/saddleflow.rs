use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use saddleflow::experiments::{
    self, certificate_report, ExperimentConfig, ExperimentKind, RunReport,
};
use saddleflow::flow::Gains;

#[derive(Parser)]
#[command(
    name = "saddleflow",
    version,
    about = "PID saddle-point flow experiments and certificates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Random-QP convergence study
    Qp(RunArgs),
    /// Noisy bilevel study
    Bilevel(RunArgs),
    /// Closed-form certificate for given spectral bounds, as JSON
    Certificate(CertArgs),
    /// Sampled log-norm and LMI checks on generated QPs
    Verify {
        #[command(flatten)]
        run: RunArgs,
        /// States sampled per instance and gains triple
        #[arg(long)]
        samples: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; study defaults are used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    trajectories: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    /// Constraint noise bound W
    #[arg(long)]
    noise_bound: Option<f64>,
}

#[derive(Args)]
struct CertArgs {
    #[arg(long)]
    rho: f64,
    #[arg(long)]
    lsmooth: f64,
    #[arg(long)]
    amin: f64,
    #[arg(long)]
    amax: f64,
    #[arg(long)]
    kp: f64,
    #[arg(long)]
    ki: f64,
    #[arg(long)]
    kd: f64,
}

fn load(
    kind: ExperimentKind,
    args: &RunArgs,
) -> Result<ExperimentConfig, experiments::ExperimentError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if kind == ExperimentKind::Bilevel => ExperimentConfig::bilevel_default(args.seed),
        None => ExperimentConfig::qp_default(args.seed),
    };
    cfg.kind = kind;
    cfg = cfg.with_seed(args.seed);
    if let Some(dir) = &args.output {
        cfg.output_dir = dir.clone();
    }
    if let Some(t) = args.trajectories {
        cfg.trajectories = t;
    }
    if let Some(dt) = args.dt {
        cfg.integrator.dt = dt;
    }
    if let Some(h) = args.horizon {
        cfg.integrator.horizon = h;
    }
    if let Some(w) = args.noise_bound {
        cfg.integrator.noise_bound = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(report: &RunReport, cfg: &ExperimentConfig) {
    for run in &report.runs {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6e}"));
        println!(
            "{:<22} c = {:<13} worst log-norm = {:<13} terminal mean = {}",
            run.label,
            fmt(run.rate),
            fmt(run.worst_lognorm),
            fmt(run.terminal.map(|t| t.mean)),
        );
    }
    for f in &report.failures {
        eprintln!("FAILED: {f}");
    }
    println!("report: {}", cfg.output_dir.join("report.json").display());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Certificate(a) => {
            let gains = Gains {
                kp: a.kp,
                ki: a.ki,
                kd: a.kd,
            };
            match certificate_report(a.rho, a.lsmooth, a.amin, a.amax, &gains) {
                Ok(r) => {
                    println!(
                        "{}",
                        serde_json::to_string_pretty(&r).expect("serializable")
                    );
                    return if r.holds {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    };
                }
                Err(e) => Err(e),
            }
        }
        Command::Qp(args) => {
            load(ExperimentKind::Qp, &args).and_then(|cfg| Ok((experiments::run(&cfg)?, cfg)))
        }
        Command::Bilevel(args) => {
            load(ExperimentKind::Bilevel, &args).and_then(|cfg| Ok((experiments::run(&cfg)?, cfg)))
        }
        Command::Verify { run, samples } => {
            load(ExperimentKind::Verify, &run).and_then(|mut cfg| {
                cfg.samples = samples;
                cfg.validate()?;
                Ok((experiments::run(&cfg)?, cfg))
            })
        }
    };
    match outcome {
        Ok((report, cfg)) => {
            print_report(&report, &cfg);
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
