use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fei_cli::{
    cmd_fedsim, cmd_solve, cmd_sweep, FedOptions, SolveOptions, SweepParam, DEFAULT_SEED,
};
use fei_core::Mode;

#[derive(Parser)]
#[command(
    name = "fei",
    version,
    about = "Upload-energy and edge-utilization optimizer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one scenario with the distributed solver.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// joint, lb-only or ub-only (default: the config's mode)
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve once per value of one parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// compute_cap, energy_budget or gamma
        #[arg(long)]
        param: SweepParam,
        /// Ascending, comma separated.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Federated training with the volumes of a previous solve.
    Fedsim {
        #[arg(long)]
        config: PathBuf,
        /// allocation.csv written by `solve`
        #[arg(long)]
        alloc: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        rounds: usize,
        #[arg(long, default_value_t = 1.0)]
        participation: f64,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: fei_core::Error| e.to_string())
}

fn main() -> ExitCode {
    // exit status 2 is reserved for a solve that did not converge
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Solve {
            config,
            mode,
            eta,
            max_iter,
            seed,
            out,
        } => {
            let opts = SolveOptions {
                mode,
                eta,
                max_iter,
                seed,
            };
            cmd_solve(&config, &opts, &out).map(|r| {
                let s = &r.summary;
                for w in &s.warnings {
                    eprintln!("warning: {w}");
                }
                println!(
                    "{} after {} iterations: objective {:.6e}, cost {:.6e}, energy {:.6e}",
                    if s.converged {
                        "converged"
                    } else {
                        "not converged"
                    },
                    s.iterations,
                    s.objective,
                    s.cost,
                    s.energy
                );
                r.exit_code()
            })
        }
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => cmd_sweep(&config, param, &values, &out).map(|rows| {
            for r in rows
                .iter()
                .filter_map(|r| r.error.as_ref().map(|e| (r.value, e)))
            {
                eprintln!("value {}: {}", r.0, r.1);
            }
            println!("{} rows written", rows.len());
            0
        }),
        Command::Fedsim {
            config,
            alloc,
            rounds,
            participation,
            lr,
            seed,
            out,
        } => {
            let opts = FedOptions {
                rounds,
                participation,
                learning_rate: lr,
                seed,
            };
            cmd_fedsim(&config, alloc.as_deref(), &opts, &out).map(|curve| {
                if let Some(last) = curve.last() {
                    println!(
                        "round {}: loss {:.6}, accuracy {:.4}",
                        last.round, last.loss, last.accuracy
                    );
                }
                0
            })
        }
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
