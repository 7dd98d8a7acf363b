use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use effham_core::effham::CriticalTriple;
use effham_core::error::LabError;
use effham_core::lab::{
    emit_report, read_records, run_cell, run_concentration, run_criticality_convergence, run_effham_table, run_eig,
    run_env, run_hj1d_homogenization, run_lambda_bar, run_monotonicity_suite, ExperimentConfig, RunRecord,
};

/// Principal eigenvalues, cell problems and effective Hamiltonians for
/// weakly coupled elliptic systems.
#[derive(Parser)]
#[command(name = "effham-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample realizations, validate the standing assumptions, dump binaries.
    Env(Common),
    /// Scaled principal eigenvalues along an ε ladder.
    Eig {
        #[command(flatten)]
        common: Common,
        /// Comma-separated ε values (default: the config ladder).
        #[arg(long, value_delimiter = ',')]
        eps: Vec<f64>,
    },
    /// Discounted cell problems.
    Cell {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        delta: Vec<f64>,
        /// Slopes (taken along the first axis in 2D).
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        p: Vec<f64>,
        #[arg(long)]
        mu: Option<f64>,
    },
    /// Tabulate H̄(·, μ).
    Effham {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        pmax: Option<f64>,
        #[arg(long)]
        dp: Option<f64>,
    },
    /// Critical value, concentration slope and flatness.
    LambdaBar(Common),
    Criticality(Staged),
    Concentration(Staged),
    Monotonicity(Common),
    Hj1d(Common),
    /// Rebuild summary.json from the records in a directory.
    Report {
        /// Directory holding `<id>.json` records (default: --out).
        #[arg(long)]
        records: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: `output` from the config, else `effham-out`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    plots: bool,
}

#[derive(Args, Clone)]
struct Staged {
    #[command(flatten)]
    common: Common,
    /// A `lambda-bar` record to take the critical triple from instead of
    /// recomputing it.
    #[arg(long)]
    critical: Option<PathBuf>,
}

fn load(common: &Common) -> Result<ExperimentConfig, LabError> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| LabError::Config("--config is required".into()))?;
    let cfg = ExperimentConfig::from_file(path)?.with_seeds(common.seeds.clone());
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: Option<&ExperimentConfig>) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output.as_ref().map(|o| c.base_dir.join(o))))
        .unwrap_or_else(|| PathBuf::from("effham-out"))
}

fn load_critical(path: &Path) -> Result<CriticalTriple, LabError> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::Io {
        path: path.into(),
        source: e,
    })?;
    let rec: RunRecord =
        serde_json::from_str(&text).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
    rec.critical
        .ok_or_else(|| LabError::Config(format!("{} carries no critical triple", path.display())))
}

fn finish(records: &[RunRecord], common: &Common, cfg: Option<&ExperimentConfig>) -> Result<bool, LabError> {
    let out = out_dir(common, cfg);
    let summary = emit_report(records, &out, common.plots)?;
    for rec in records {
        println!("{} ({})", rec.id, rec.experiment);
        for v in &rec.verdicts {
            println!("  {v}");
        }
        for n in &rec.notes {
            println!("  note: {n}");
        }
    }
    println!("wrote {}", out.join("summary.json").display());
    Ok(summary.passed())
}

fn dispatch(cli: Cli) -> Result<bool, LabError> {
    match cli.command {
        Command::Env(common) => {
            let cfg = load(&common)?;
            let out = out_dir(&common, Some(&cfg));
            let rec = run_env(&cfg, Some(&out))?;
            finish(&[rec], &common, Some(&cfg))
        }
        Command::Eig { common, eps } => {
            let cfg = load(&common)?;
            let rec = run_eig(&cfg, (!eps.is_empty()).then_some(&eps[..]))?;
            finish(&[rec], &common, Some(&cfg))
        }
        Command::Cell { common, delta, p, mu } => {
            let mut cfg = load(&common)?;
            if !delta.is_empty() {
                cfg.tools.deltas = delta;
            }
            if !p.is_empty() {
                cfg.tools.p = p;
            }
            if let Some(mu) = mu {
                cfg.tools.mu = mu;
            }
            let rec = run_cell(&cfg)?;
            finish(&[rec], &common, Some(&cfg))
        }
        Command::Effham { common, mu, pmax, dp } => {
            let mut cfg = load(&common)?;
            cfg.tools.mu = mu.unwrap_or(cfg.tools.mu);
            cfg.tools.p_max = pmax.unwrap_or(cfg.tools.p_max);
            cfg.tools.dp = dp.unwrap_or(cfg.tools.dp);
            let rec = run_effham_table(&cfg)?;
            finish(&[rec], &common, Some(&cfg))
        }
        Command::LambdaBar(common) => {
            let cfg = load(&common)?;
            let rec = run_lambda_bar(&cfg)?;
            let out = out_dir(&common, Some(&cfg));
            let ok = finish(std::slice::from_ref(&rec), &common, Some(&cfg))?;
            let triple = rec.critical.as_ref().expect("lambda-bar records carry a triple");
            let path = out.join(format!("{}_critical.json", cfg.id));
            let json = serde_json::to_string_pretty(&triple.to_json()).expect("json");
            std::fs::write(&path, json).map_err(|e| LabError::Io { path: path.clone(), source: e })?;
            println!("{}", triple.to_json());
            Ok(ok)
        }
        Command::Criticality(Staged { common, critical }) => {
            let cfg = load(&common)?;
            let triple = critical.as_deref().map(load_critical).transpose()?;
            let rec = run_criticality_convergence(&cfg, triple.as_ref())?;
            finish(&[rec], &common, Some(&cfg))
        }
        Command::Concentration(Staged { common, critical }) => {
            let cfg = load(&common)?;
            let triple = critical.as_deref().map(load_critical).transpose()?;
            let rec = run_concentration(&cfg, triple.as_ref())?;
            finish(&[rec], &common, Some(&cfg))
        }
        Command::Monotonicity(common) => {
            let cfg = load(&common)?;
            let rec = run_monotonicity_suite(&cfg)?;
            finish(&[rec], &common, Some(&cfg))
        }
        Command::Hj1d(common) => {
            let cfg = load(&common)?;
            let (rec, _) = run_hj1d_homogenization(&cfg)?;
            finish(&[rec], &common, Some(&cfg))
        }
        Command::Report { records, common } => {
            let cfg = common.config.as_ref().map(|_| load(&common)).transpose()?;
            let dir = records.unwrap_or_else(|| out_dir(&common, cfg.as_ref()));
            let recs = read_records(&dir)?;
            finish(&recs, &common, cfg.as_ref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
