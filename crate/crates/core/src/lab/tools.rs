//! Single-stage runs behind the `env`, `eig`, `cell`, `effham` and
//! `lambda-bar` subcommands. Each produces an ordinary run record.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use super::{cell, max_increase, realization_for, Comparison, ExperimentConfig, Profile, RunRecord, Table, Verdict};
use crate::cell::{collapse_gap, lipschitz_seminorm, solve_delta_problem, CellOptions};
use crate::effham::{compute_lambda_bar, convexity_report, fit_length, tabulate, torus_length, Estimator};
use crate::eig::{epsilon_eigenvalue, EigenOptions};
use crate::env::{sample_realization, validate_assumptions};
use crate::error::{LabError, Result};

/// Samples one realization per seed on the outer domain, validates the
/// standing assumptions and (optionally) writes binary dumps into `dump_dir`.
pub fn run_env(cfg: &ExperimentConfig, dump_dir: Option<&Path>) -> Result<RunRecord> {
    let start = Instant::now();
    cfg.check()?;
    let spec = cfg.environment()?;
    let d = spec.dimension;
    let outer = cfg.outer_domain(d)?;
    let eps_min = *cfg.eps.last().expect("checked");
    let mut rec = RunRecord::new(&cfg.id, "env", &spec, &cfg.seeds);
    let mut table = Table::new(&["seed", "length", "h", "nodes", "failing_assumptions", "worst_margin"]);
    let mut failing_total = 0usize;
    if let Some(dir) = dump_dir {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    for &seed in &cfg.seeds {
        let field = realization_for(&spec, seed, &outer, eps_min, cfg.h_micro)?;
        let report = validate_assumptions(&field)?;
        let failing = report.failing();
        for name in &failing {
            rec.notes.push(format!("seed {seed}: assumption {name} fails"));
        }
        failing_total += failing.len();
        let worst = report.margins.iter().map(|m| m.margin).fold(f64::INFINITY, f64::min);
        let grid = field.grid();
        table.push(vec![
            seed.to_string(),
            cell(field.length),
            cell(field.h),
            grid.node_count().to_string(),
            failing.len().to_string(),
            cell(worst),
        ]);
        if let Some(dir) = dump_dir {
            field.write_binary(&dir.join(format!("{}_seed{seed}.bin", cfg.id)))?;
        }
    }
    rec.table = table;
    rec.verdicts.push(Verdict::check("assumptions-hold", failing_total as f64, Comparison::Le, 0.0));
    rec.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(rec)
}

/// `λ₁(ε⁻¹U)` per seed along an ε ladder (the config ladder unless overridden).
pub fn run_eig(cfg: &ExperimentConfig, eps: Option<&[f64]>) -> Result<RunRecord> {
    let start = Instant::now();
    cfg.check()?;
    let spec = cfg.environment()?;
    let ladder = eps.unwrap_or(&cfg.eps).to_vec();
    if ladder.is_empty() || ladder.iter().any(|e| !(*e > 0.0)) {
        return Err(LabError::Config("ε list must be non-empty and positive".into()));
    }
    let d = spec.dimension;
    let outer = cfg.outer_domain(d)?;
    let eps_min = ladder.iter().copied().fold(f64::INFINITY, f64::min);
    let opts = EigenOptions {
        scheme: cfg.schedule.scheme,
        ..EigenOptions::default()
    };
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let field = realization_for(&spec, seed, &outer, eps_min, cfg.h_micro)?;
            ladder
                .iter()
                .map(|&e| epsilon_eigenvalue(&field, &outer, e, cfg.h_micro, &opts))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rec = RunRecord::new(&cfg.id, "eig", &spec, &cfg.seeds);
    let mut table = Table::new(&["eps", "lambda", "residual", "iterations", "seed"]);
    let mut worst = f64::NEG_INFINITY;
    // order by decreasing ε so the monotonicity check reads left to right
    let mut order: Vec<usize> = (0..ladder.len()).collect();
    order.sort_by(|&a, &b| ladder[b].total_cmp(&ladder[a]));
    for (seed, pairs) in cfg.seeds.iter().zip(&per_seed) {
        for (e, pair) in ladder.iter().zip(pairs) {
            table.push(vec![
                cell(*e),
                cell(pair.lambda),
                cell(pair.residual),
                pair.iterations.to_string(),
                seed.to_string(),
            ]);
        }
        let ordered: Vec<f64> = order.iter().map(|&k| pairs[k].lambda).collect();
        if ordered.len() >= 2 {
            worst = worst.max(max_increase(&ordered));
        }
        rec.profiles.push(Profile {
            label: format!("lambda seed={seed}"),
            x: order.iter().map(|&k| ladder[k]).collect(),
            y: ordered,
        });
    }
    rec.table = table;
    if worst > f64::NEG_INFINITY {
        rec.verdicts.push(Verdict::check(
            "eps-monotonicity",
            worst,
            Comparison::Le,
            cfg.tolerances.monotonicity,
        ));
    }
    rec.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(rec)
}

/// Discounted cell problems on the `tools.deltas × tools.p × seeds` grid.
/// In two dimensions each `p` is taken along the first axis.
pub fn run_cell(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let start = Instant::now();
    cfg.check()?;
    let spec = cfg.environment()?;
    let tools = &cfg.tools;
    if tools.deltas.is_empty() || tools.p.is_empty() {
        return Err(LabError::Config("tools.deltas and tools.p must be non-empty".into()));
    }
    let sched = &cfg.schedule;
    let opts = CellOptions {
        k_torus: sched.k_torus,
        scheme: sched.scheme,
        ..CellOptions::default()
    };
    let mut jobs = Vec::new();
    for &delta in &tools.deltas {
        let length = match tools.length {
            Some(l) => fit_length(&spec, l, sched.h)?,
            None => torus_length(&spec, delta, sched.k_torus * sched.torus_factor, sched.h)?,
        };
        let opts = CellOptions {
            k_torus: opts.k_torus.min(length * delta),
            ..opts.clone()
        };
        for &seed in &cfg.seeds {
            let field = sample_realization(&spec, seed, length, sched.h)?;
            for &p in &tools.p {
                jobs.push((delta, seed, p, field.clone(), opts.clone()));
            }
        }
    }
    let rows = jobs
        .par_iter()
        .map(|(delta, seed, p, field, opts)| {
            let sol = solve_delta_problem(field, *delta, [*p, 0.0], tools.mu, opts)?;
            Ok(vec![
                cell(*delta),
                cell(*p),
                cell(tools.mu),
                seed.to_string(),
                cell(sol.delta_v_at_origin()),
                cell(sol.mean_delta_v()),
                cell(collapse_gap(&sol)),
                cell(lipschitz_seminorm(&sol)),
                cell(sol.residual),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rec = RunRecord::new(&cfg.id, "cell", &spec, &cfg.seeds);
    let mut table = Table::new(&[
        "delta",
        "p",
        "mu",
        "seed",
        "delta_v_at_0",
        "torus_mean_delta_v",
        "collapse_gap",
        "lipschitz",
        "residual",
    ]);
    for r in rows {
        table.push(r);
    }
    let worst = table.column("residual").expect("column").into_iter().fold(0.0, f64::max);
    rec.table = table;
    rec.verdicts.push(Verdict::check("cell-residual", worst, Comparison::Le, 1e-6));
    rec.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(rec)
}

/// Tabulated `H̄(·, μ)` on `[-p_max, p_max]^d` with a convexity verdict.
pub fn run_effham_table(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let start = Instant::now();
    cfg.check()?;
    let spec = cfg.environment()?;
    let est = Estimator::new(&spec, &cfg.schedule)?;
    let tools = &cfg.tools;
    let table = tabulate(&est, tools.mu, tools.p_max, tools.dp)?;
    let d = spec.dimension;
    let mut rec = RunRecord::new(&cfg.id, "effham", &spec, &cfg.schedule.seeds);
    let mut columns: Vec<&str> = ["p1", "p2"][..d].to_vec();
    columns.extend(["mu", "value", "spread", "flag"]);
    let mut out = Table::new(&columns);
    for s in &table.samples {
        let mut row: Vec<String> = s.p[..d].iter().map(|v| cell(*v)).collect();
        row.extend([cell(s.mu), cell(s.value), cell(s.spread), s.flagged.to_string()]);
        out.push(row);
    }
    let flagged = table.samples.iter().filter(|s| s.flagged).count();
    if flagged > 0 {
        rec.notes.push(format!("{flagged} samples exceed the ergodicity budget"));
    }
    if d == 1 {
        rec.profiles.push(Profile {
            label: format!("Hbar mu={}", tools.mu),
            x: table.axis.clone(),
            y: table.values(),
        });
    }
    let conv = convexity_report(&table);
    rec.notes.push(format!(
        "convexity: {} triples, min defect {:.3e}, tolerance {:.3e}",
        conv.triples_checked, conv.min_defect, conv.tolerance
    ));
    rec.table = out;
    rec.verdicts.push(Verdict::check(
        "convexity-violations",
        conv.violations.len() as f64,
        Comparison::Le,
        0.0,
    ));
    rec.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(rec)
}

/// `(λ̄, θ̄, flatness)` of the configured environment.
pub fn run_lambda_bar(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let start = Instant::now();
    cfg.check()?;
    let spec = cfg.environment()?;
    let est = Estimator::new(&spec, &cfg.schedule)?;
    let triple = compute_lambda_bar(&est, &cfg.lambda_bar)?;
    let d = spec.dimension;
    let mut rec = RunRecord::new(&cfg.id, "lambda-bar", &spec, &cfg.schedule.seeds);
    let mut columns = vec!["lambda_bar"];
    columns.extend(&["theta1", "theta2"][..d]);
    columns.extend(["flatness_gap", "grid_step", "tol_root"]);
    let mut table = Table::new(&columns);
    let mut row = vec![cell(triple.lambda_bar)];
    row.extend(triple.theta().iter().map(|v| cell(*v)));
    row.extend([cell(triple.flatness_gap), cell(triple.grid_step), cell(triple.tol_root)]);
    table.push(row);
    rec.table = table;
    rec.critical = Some(triple);
    rec.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(rec)
}
