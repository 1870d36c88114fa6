use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use resdgp_harness::config::{ExperimentConfig, ExperimentKind};
use resdgp_harness::experiments::{
    run_bayesopt, run_embed_regression, run_gradcheck, run_synthetic_regression, run_vectorfield_regression,
};
use resdgp_harness::report::emit_report;
use resdgp_harness::{HarnessError, Result};

#[derive(Parser)]
#[command(name = "resdgp", version, about = "Residual deep Gaussian processes on spheres")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Regression on the singular benchmark function over a sweep of sizes and depths.
    RegressSynthetic(Common),
    /// Tangent vector-field regression from a `lat,lon,u,v` CSV.
    RegressVectorfield {
        #[command(flatten)]
        common: Common,
        /// Training CSV; overrides `data.csv`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Bayesian optimisation with a shallow-then-deep surrogate schedule.
    Bayesopt(Common),
    /// Regression on Euclidean inputs embedded into a sphere.
    EmbedRegress {
        #[command(flatten)]
        common: Common,
        /// `x1,…,xd,y` CSV; overrides `data.csv`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Analytic ELBO gradient against central finite differences.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics.json, config.toml and CSV tables.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(kind: ExperimentKind, common: &Common, csv: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default_for(kind),
    };
    if cfg.kind != kind {
        return Err(HarnessError::Config(format!(
            "{} config passed to the {} command",
            cfg.kind.name(),
            kind.name()
        )));
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    if csv.is_some() {
        cfg.data.csv = csv;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<PathBuf> {
    let (cfg, runner): (ExperimentConfig, fn(&ExperimentConfig) -> Result<_>) = match cli.command {
        Command::RegressSynthetic(c) => (load(ExperimentKind::Synthetic, &c, None)?, run_synthetic_regression),
        Command::RegressVectorfield { common, csv } => (load(ExperimentKind::Vectorfield, &common, csv)?, run_vectorfield_regression),
        Command::Bayesopt(c) => (load(ExperimentKind::Bayesopt, &c, None)?, run_bayesopt),
        Command::EmbedRegress { common, csv } => (load(ExperimentKind::Embed, &common, csv)?, run_embed_regression),
        Command::Gradcheck(c) => (load(ExperimentKind::Gradcheck, &c, None)?, run_gradcheck),
    };
    let out = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-seed{}", cfg.kind.name(), cfg.seed)));
    let report = runner(&cfg)?;
    emit_report(&report, &out)?;
    for key in ["nlpd", "mse", "max_relative_error", "final_log_regret"] {
        if let Some(v) = report.metrics.get(key) {
            let text = v.to_string();
            if text.len() <= 200 {
                println!("{key}: {text}");
            }
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            println!("wrote {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
