//! `phnn` — data generation, linear estimation, training and reporting.
//!
//! Exit codes: 0 success, 1 usage/configuration/IO error, 2 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use phnn_core::error::Error;
use phnn_core::experiments::{
    cmd_generate, cmd_linest, cmd_report, cmd_sweep, cmd_train, output_root, ExperimentConfig, Layout,
};
use phnn_core::phnn_model::Mode;

#[derive(Parser, Debug)]
#[command(name = "phnn", version, about = "Port-Hamiltonian neural network identification")]
struct Cli {
    /// JSON experiment configuration (defaults are used when omitted)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; takes precedence over PHNN_OUT and the configuration
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective configuration as JSON
    Config,
    /// Simulate the mass-spring-damper chain and write the 8 records
    Generate {
        #[arg(long)]
        snr: Option<f64>,
    },
    /// Estimate the linear port-Hamiltonian model
    Linest {
        /// Train the constant-matrix model instead of the subspace + KYP route
        #[arg(long)]
        direct: bool,
    },
    /// Train one model
    Train {
        #[arg(long)]
        mode: Mode,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        pretrain_iterations: Option<usize>,
    },
    /// nn-linear-init over all configured SNRs and seeds
    Sweep {
        /// Use seeds 1..=N instead of the configured list
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        snrs: Option<Vec<f64>>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Aggregate completed runs into figure tables
    Report,
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let root = cli.out.clone().unwrap_or_else(|| output_root(&cfg));
    let layout = Layout::new(root);
    match cli.command {
        Command::Config => println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes")),
        Command::Generate { snr } => {
            if let Some(snr) = snr {
                cfg.msd.snr_db = snr;
            }
            let m = cmd_generate(&cfg, &layout)?;
            println!(
                "wrote {} records to {} (config {})",
                m.records.len(),
                layout.data_dir().display(),
                &m.config_hash[..12]
            );
        }
        Command::Linest { direct } => {
            let r = cmd_linest(&cfg, &layout, direct)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&r.passivity).expect("report serializes")
            );
            println!("validation NRMSE from zero state: {:.4e}", r.val_nrmse_zero_state);
        }
        Command::Train {
            mode,
            seed,
            iterations,
            pretrain_iterations,
        } => {
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            if let Some(n) = pretrain_iterations {
                cfg.train.pretrain_iterations = n;
            }
            let s = cmd_train(&cfg, &layout, mode, seed)?;
            println!(
                "{mode} seed {seed}: test NRMSE {:.4e}, best val {:.4e} at iteration {}",
                s.test_nrmse, s.best_val_nrmse, s.best_iter
            );
        }
        Command::Sweep {
            seeds,
            snrs,
            iterations,
        } => {
            if let Some(n) = seeds {
                cfg.seeds = (1..=n).collect();
            }
            if let Some(s) = snrs {
                cfg.snrs = s;
            }
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            println!(
                "{:>8} {:>12} {:>12} {:>12} {:>6}",
                "SNR", "mean", "min", "floor", "fail"
            );
            for r in cmd_sweep(&cfg, &layout)? {
                println!(
                    "{:>8} {:>12.4e} {:>12.4e} {:>12.4e} {:>6}",
                    r.snr_db,
                    r.mean,
                    r.min,
                    r.noise_floor,
                    r.failures.len()
                );
            }
        }
        Command::Report => {
            let r = cmd_report(&layout, &cfg.modes)?;
            for (mode, b) in &r.boxplot {
                println!(
                    "{mode:>15}: n={} median {:.4e} mean {:.4e} std {:.4e}",
                    b.n, b.median, b.mean, b.std
                );
            }
            for m in &r.missing {
                eprintln!("missing runs: {m}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
