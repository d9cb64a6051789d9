use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fcgl_core::harness::{export, mean_std, run_experiment, ExperimentConfig, Method, MetricsReport};

#[derive(Parser)]
#[command(name = "fcgl", version, about = "Federated continual graph learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method over the configured seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Run the configured method once per value of one config key.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. `1,2,4`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Run the full method and its four ablations.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run_seeds(cfg: &ExperimentConfig) -> Result<Vec<MetricsReport>> {
    cfg.seeds
        .iter()
        .map(|&seed| {
            let report = run_experiment(cfg, seed).with_context(|| format!("{} seed {seed}", cfg.method))?;
            log::info!("{} seed {seed}: AM {:.4} FM {:?}", cfg.method, report.am, report.fm);
            Ok(report)
        })
        .collect()
}

fn write(reports: &[MetricsReport], out: &Path) -> Result<()> {
    let paths = export(reports, out).with_context(|| format!("writing results to {}", out.display()))?;
    println!("wrote {}, {} and {}", paths.results.display(), paths.summary.display(), paths.log.display());
    Ok(())
}

fn fmt_mean(values: &[f64]) -> String {
    if values.is_empty() {
        return "n/a".into();
    }
    let (m, s) = mean_std(values);
    format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s)
}

fn print_summary(label: &str, reports: &[MetricsReport]) {
    let am: Vec<f64> = reports.iter().map(|r| r.am).collect();
    let fm: Vec<f64> = reports.iter().filter_map(|r| r.fm).collect();
    println!("{label:<24} AM {:<16} FM {}", fmt_mean(&am), fmt_mean(&fm));
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            method,
            out,
        } => {
            let mut cfg = load(&config)?;
            if let Some(seed) = seed {
                cfg.seeds = vec![seed];
            }
            if let Some(name) = method {
                cfg.method = Method::parse(&name)?;
            }
            let reports = run_seeds(&cfg)?;
            print_summary(cfg.method.name(), &reports);
            write(&reports, &out)
        }
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => {
            let base = load(&config)?;
            for value in &values {
                let mut cfg = base.clone();
                cfg.set(&param, value).with_context(|| format!("setting {param} = {value}"))?;
                let reports = run_seeds(&cfg)?;
                print_summary(&format!("{param}={value}"), &reports);
                write(&reports, &out.join(format!("{param}={value}")))?;
            }
            Ok(())
        }
        Command::Ablate { config, out } => {
            let base = load(&config)?;
            if base.seeds.is_empty() {
                bail!("config lists no seeds");
            }
            let mut all = Vec::new();
            for method in Method::ABLATIONS {
                let cfg = ExperimentConfig { method, ..base.clone() };
                let reports = run_seeds(&cfg)?;
                print_summary(method.name(), &reports);
                all.extend(reports);
            }
            write(&all, &out)
        }
    }
}
