use std::path::PathBuf;
use std::process::ExitCode;

use bmp_cli::catalog;
use bmp_cli::config::parse_config;
use bmp_cli::experiment::{run_experiment, spot_check, RunOptions, Status};
use clap::{Parser, Subcommand};

/// Simulation and verification experiments for supercritical branching Markov processes.
#[derive(Parser)]
#[command(name = "bmpsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the built-in model families.
    List,
    /// Show the parameter schema and conditions of a model family.
    Describe { name: String },
    /// Run an experiment and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: `output.dir` from the config, else results/<config name>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        replicas: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        /// Dump the event logs of the first N replicas (default 1).
        #[arg(long, num_args = 0..=1, default_missing_value = "1")]
        dump_trajectories: Option<usize>,
    },
    /// Recompute reported numbers from the per-replica CSVs of a finished run.
    SpotCheck {
        #[arg(long)]
        out: PathBuf,
    },
}

const USAGE_ERROR: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::List => {
            print!("{}", catalog::list_models());
            ExitCode::SUCCESS
        }
        Command::Describe { name } => match catalog::describe_model(&name) {
            Some(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            None => {
                eprintln!("unknown model family '{name}'; known: {}", catalog::FAMILIES.join(", "));
                ExitCode::from(USAGE_ERROR)
            }
        },
        Command::Run { config, out, replicas, seed, threads, dump_trajectories } => {
            let mut cfg = match parse_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(USAGE_ERROR);
                }
            };
            if let Some(n) = replicas {
                if n < 64 {
                    eprintln!("error: --replicas must be at least 64");
                    return ExitCode::from(USAGE_ERROR);
                }
                cfg.simulation.replicas = n;
            }
            if let Some(s) = seed {
                cfg.simulation.seed = s;
            }
            if threads == Some(0) {
                eprintln!("error: --threads must be at least 1");
                return ExitCode::from(USAGE_ERROR);
            }
            let out_dir = out.or_else(|| cfg.output.dir.clone()).unwrap_or_else(|| {
                let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
                PathBuf::from("results").join(stem)
            });
            let opts = RunOptions { out_dir: out_dir.clone(), threads, dump_trajectories: dump_trajectories.unwrap_or(0) };
            match run_experiment(&cfg, &opts) {
                Ok(report) => {
                    println!("model       {}", report.model);
                    println!("lambda      {:.10}", report.lambda);
                    println!("rho         {:.10} (raw gap {:.10})", report.rho, report.raw_gap);
                    println!("regime      {:?}{}", report.regime.kind, if report.regime_overridden { " (override)" } else { "" });
                    println!("replicas    {} kept of {}, horizon {}", report.kept, report.replicas, report.horizon);
                    for f in &report.functions {
                        if let (Some(s), Some(se)) = (f.sigma2, f.sigma2_se) {
                            println!("sigma2[{}]   {s:.5} +- {se:.5}", f.name);
                        }
                    }
                    for v in &report.verdicts {
                        println!("{:<12} {:<18} {:<14} {}", v.status.as_str(), v.check, v.subject, v.detail);
                    }
                    println!("report      {}", report.report_hash);
                    println!("artifacts   {}", out_dir.display());
                    if report.verdicts.iter().any(|v| v.status == Status::Fail) {
                        ExitCode::from(1)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(USAGE_ERROR)
                }
            }
        }
        Command::SpotCheck { out } => match spot_check(&out) {
            Ok(checks) => {
                let mut ok = true;
                for c in &checks {
                    ok &= c.agrees;
                    println!("{:<5} {:<32} reported {:<24e} recomputed {:e}", if c.agrees { "ok" } else { "DIFF" }, c.quantity, c.reported, c.recomputed);
                }
                if ok {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(USAGE_ERROR)
            }
        },
    }
}
