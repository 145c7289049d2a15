use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;
use stdr_core::config::{parse_methods, ExperimentConfig};
use stdr_core::experiment;

/// Monte Carlo comparison of doubly robust treatment effect estimators on
/// synthetic longitudinal data with latent states.
#[derive(Debug, Parser)]
#[command(name = "stdr", version)]
struct Args {
    /// TOML experiment configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of replications (overrides the config).
    #[arg(long)]
    replications: Option<usize>,
    /// Comma-separated methods: proposed, ipw_only, outcome_only, cbps_scad_static, mtgcn_only.
    #[arg(long)]
    methods: Option<String>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    /// Tiny preset for smoke tests; a --config file takes precedence.
    #[arg(long)]
    quick: bool,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

fn build_config(args: &Args) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, args.quick) {
        (Some(path), _) => ExperimentConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?,
        (None, true) => ExperimentConfig::quick(),
        (None, false) => ExperimentConfig::default(),
    };
    if let Some(o) = &args.output {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.replications {
        cfg.replications = r;
    }
    if let Some(m) = &args.methods {
        cfg.methods = parse_methods(m)?;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let cfg = build_config(&args)?;
    if args.print_config {
        print!("{}", cfg.to_toml_string()?);
        return Ok(());
    }
    let out = experiment::run(&cfg).context("experiment failed")?;
    print!("{}", out.table.to_text());
    if !out.failures.is_empty() {
        eprintln!("{} method runs failed; see manifest.json", out.failures.len());
    }
    println!("results written to {}", out.output_dir.display());
    Ok(())
}
