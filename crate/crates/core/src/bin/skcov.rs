use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use skcov::experiment::{run, Engine, ExperimentConfig, Kind};
use skcov::mcmc::ChainConfig;

/// Run a seeded ensemble experiment and write report.json and table.csv.
///
/// Exits with 0 when every configured check passes, 1 when some check
/// fails and 2 on errors.
#[derive(Parser, Debug)]
#[command(name = "skcov", version)]
struct Cli {
    /// identities | residual-sweep | opnorm-sweep | critical-scan |
    /// lowtemp-scan | deriv-check | mcmc-validate (optional with --config)
    kind: Option<Kind>,
    #[arg(long, value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    beta_list: Option<Vec<f64>>,
    #[arg(long)]
    samples: Option<usize>,
    /// exact | mcmc
    #[arg(long)]
    engine: Option<Engine>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    sweeps: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    ladder: Option<Vec<f64>>,
    /// Near-critical schedule constant for critical-scan.
    #[arg(long)]
    kappa: Option<f64>,
    /// Write exact summaries of the first K instances per grid point.
    #[arg(long, value_name = "K")]
    dump_instances: Option<usize>,
    /// JSON experiment config; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn build_config(cli: Cli) -> Result<ExperimentConfig, String> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .map_err(|e| format!("{}: {e}", path.display()))?
        }
        None => {
            let kind = cli
                .kind
                .ok_or("an experiment kind or --config is required")?;
            ExperimentConfig::new(kind, vec![8, 12, 16], vec![0.5], 200)
        }
    };
    if let Some(k) = cli.kind {
        cfg.kind = k;
    }
    if let Some(v) = cli.n_list {
        cfg.n_list = v;
    }
    if let Some(v) = cli.beta_list {
        cfg.beta_list = v;
    }
    if let Some(v) = cli.samples {
        cfg.samples = v;
    }
    if let Some(v) = cli.engine {
        cfg.engine = v;
    }
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = cli.out {
        cfg.out = Some(v);
    }
    if let Some(v) = cli.dump_instances {
        cfg.dump_instances = v;
    }
    if let Some(v) = cli.kappa {
        cfg.near_critical_kappa = Some(v);
    }
    let chain_flags = cli.sweeps.is_some()
        || cli.burnin.is_some()
        || cli.replicas.is_some()
        || cli.ladder.is_some();
    if chain_flags {
        let mut chain = cfg
            .chain
            .take()
            .unwrap_or_else(|| ChainConfig::new(cli.sweeps.unwrap_or(20_000), 0));
        if let Some(s) = cli.sweeps {
            chain.sweeps = s;
            if cli.burnin.is_none() {
                chain.burn_in_sweeps = s / 10;
            }
        }
        if let Some(b) = cli.burnin {
            chain.burn_in_sweeps = b;
        }
        if let Some(r) = cli.replicas {
            chain.replicas = r;
        }
        if let Some(l) = cli.ladder {
            chain.ladder = Some(l);
        }
        cfg.chain = Some(chain);
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cfg = match build_config(Cli::parse()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let report = match run(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            return ExitCode::from(2);
        }
    };
    for check in &report.checks {
        let tag = if check.passed { "PASS" } else { "FAIL" };
        println!("{tag} {}: {}", check.name, check.detail);
    }
    if let Some(dir) = &cfg.out {
        println!("wrote {}", dir.display());
    }
    println!(
        "{} rows, {} checks, {:.2}s",
        report.rows.len(),
        report.checks.len(),
        report.wall_clock_secs
    );
    if report.all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
