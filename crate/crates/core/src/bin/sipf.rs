use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sipf::experiment::{parse_config, run_experiment, run_identity, write_error_record, ExperimentConfig, SolverKind};
use sipf::sipf::GradMMode;
use sipf::Error;

#[derive(Parser)]
#[command(version, about = "Particle-field, finite-difference and radial simulations of tumor invasion")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// TOML or JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's `output`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    grad_m: Option<GradArg>,
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Verb {
    /// Run the configured solver.
    Run,
    /// Measure the configured methods against the radial reference.
    Compare,
    /// Run the configured sweep.
    Sweep,
    /// Integral identity time series.
    Identity,
}

#[derive(ValueEnum, Clone, Copy)]
enum GradArg {
    Paper,
    Spectral,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => parse_config(&std::fs::read_to_string(p)?)?,
        None => ExperimentConfig::new(SolverKind::Sipf),
    };
    match cli.verb {
        Verb::Compare => cfg.solver = SolverKind::Compare,
        Verb::Sweep => cfg.solver = SolverKind::Sweep,
        Verb::Run | Verb::Identity => {}
    }
    if let Some(s) = cli.seed {
        cfg.params.seed = s;
    }
    if let Some(g) = cli.grad_m {
        cfg.grad_m = match g {
            GradArg::Paper => GradMMode::Paper,
            GradArg::Spectral => GradMMode::Spectral,
        };
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let fallback = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let result = load(&cli).and_then(|cfg| {
        let out = cli.out.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("out"));
        if let Some(n) = cfg.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        let outcome = match cli.verb {
            Verb::Identity => run_identity(&cfg, &out)?,
            _ => run_experiment(&cfg, &out)?,
        };
        for row in &outcome.report.rows {
            println!("{}: rel. L2 error {:.4e} ({:.1} s)", row.label, row.error, row.runtime);
        }
        if let Some(s) = outcome.slope {
            println!("fitted slope {s:.4}");
        }
        for (label, series) in &outcome.identities {
            if let Some(p) = series.last() {
                println!("{label}: int m error {:.3e} at t = {}", p.error_m(), p.t);
            }
        }
        println!("wrote {}", out.join("manifest.json").display());
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let rec = serde_json::json!({ "status": "error", "kind": e.kind(), "message": e.to_string() });
            eprintln!("{rec}");
            let _ = write_error_record(&fallback, &e);
            ExitCode::FAILURE
        }
    }
}
