use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};
use ridgeless::config::{Experiment, ExperimentConfig, Fault, Overrides};
use ridgeless::experiments;
use ridgeless::verify::run_verify;
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FaultArg {
    PlainQr,
}

/// Risk sweeps for minimum-norm interpolation under correlated noise.
#[derive(Debug, Parser)]
#[command(name = "riskcli", version)]
struct Cli {
    /// ar1_sweep, cluster_sweep, descent_curve, offdiag_study or verify.
    #[arg(value_parser = parse_experiment)]
    experiment: Experiment,

    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,

    #[arg(long)]
    seed: Option<u64>,

    /// Output file; stdout when neither this nor `output_path` is set.
    #[arg(long)]
    out: Option<PathBuf>,

    #[arg(long = "n-x")]
    n_x: Option<usize>,

    #[arg(long = "n-eps")]
    n_eps: Option<usize>,

    /// Use the nested refit estimator for conditional variances.
    #[arg(long)]
    empirical_cov: bool,

    /// Worker threads (default: all cores).
    #[arg(long, env = "RISKCLI_THREADS")]
    threads: Option<usize>,

    /// Inject a known fault into verify.
    #[arg(long, value_enum, hide = true)]
    fault: Option<FaultArg>,
}

fn parse_experiment(s: &str) -> std::result::Result<Experiment, String> {
    Experiment::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Experiment::ALL.iter().map(|e| e.name()).collect();
        format!("unknown experiment {s:?}; expected one of {}", names.join(", "))
    })
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&cli.config).with_context(|| format!("reading {}", cli.config.display()))?;
    let mut cfg = ExperimentConfig::from_toml(&text).with_context(|| format!("in {}", cli.config.display()))?;
    cfg.apply(&Overrides {
        experiment: Some(cli.experiment),
        seed: cli.seed,
        output_path: cli.out.clone(),
        n_x: cli.n_x,
        n_eps: cli.n_eps,
        empirical_cov: cli.empirical_cov,
    })?;
    if let Some(FaultArg::PlainQr) = cli.fault {
        if cli.experiment != Experiment::Verify {
            bail!("--fault only applies to verify");
        }
        cfg.verify.fault = Fault::PlainQr;
    }
    Ok(cfg)
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => std::io::stdout()
            .lock()
            .write_all(text.as_bytes())
            .context("writing to stdout"),
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load(cli)?;
    if let Some(t) = cli.threads {
        if t == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("starting the worker pool")?;
    }
    let out = cfg.output_path.as_deref();

    if cli.experiment == Experiment::Verify {
        let report = run_verify(&cfg)?;
        let json = report.to_json();
        println!("{json}");
        if let Some(p) = out {
            emit(Some(p), &format!("{json}\n"))?;
        }
        for c in report.failures() {
            eprintln!(
                "FAILED {}: observed {:e}, expected {:e}, tolerance {:e} ({})",
                c.name, c.observed, c.expected, c.tolerance, c.detail
            );
        }
        return Ok(report.passed);
    }

    let mut table = experiments::run(&cfg)?;
    let timestamp = OffsetDateTime::now_utc()
        .format(&Rfc3339)
        .context("formatting timestamp")?;
    let tool = format!("riskcli {}", env!("CARGO_PKG_VERSION"));
    let mut header = experiments::header_block(&cfg, &tool, &timestamp);
    header.append(&mut table.header);
    table.header = header;
    emit(out, &table.to_csv())?;
    if let Some(p) = out {
        eprintln!("wrote {} rows to {}", table.rows.len(), p.display());
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
