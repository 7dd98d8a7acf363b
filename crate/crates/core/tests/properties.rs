//! Property tests for the standing invariants of each pipeline stage.

use effham_core::cell::{mean_gradient, solve_delta_problem, CellOptions};
use effham_core::discretize::{assemble_mass, assemble_system, Grid};
use effham_core::effham::{mu_slope_check, Estimator, Schedule};
use effham_core::eig::{epsilon_eigenvalue, hopf_cole, Domain, EigenOptions};
use effham_core::env::{sample_realization, shift_field, validate_assumptions, EnvironmentSpec};
use effham_core::lab::{Comparison, Verdict};
use effham_core::linalg::Factorization;
use proptest::prelude::*;

fn checkerboard(groups: usize, drift: f64) -> EnvironmentSpec {
    let coupling = if groups == 1 {
        "[[0.0]]".to_string()
    } else {
        "[[1.0, -1.0], [-1.0, 1.0]]".to_string()
    };
    EnvironmentSpec::from_toml_str(&format!(
        r#"
dimension = 1
groups = {groups}
kind = "checkerboard"
ellipticity = {{ min = 0.5, max = 2.5 }}
diffusion = {{ mean = 1.5, amplitude = 0.5 }}
drift = {{ mean = [{drift}], amplitude = 0.3 }}
coupling = {{ c_min = 0.5, matrix = {coupling} }}
lipschitz = {{ bound = 100.0 }}
checkerboard = {{ cell = 1.0, law = "binary" }}
"#
    ))
    .unwrap()
}

fn constant(a: f64, b: f64, groups: usize) -> EnvironmentSpec {
    let coupling = if groups == 1 { "[[0.0]]" } else { "[[1.0, -1.0], [-1.0, 1.0]]" };
    EnvironmentSpec::from_toml_str(&format!(
        r#"
dimension = 1
groups = {groups}
kind = "constant"
ellipticity = {{ min = 0.25, max = 4.0 }}
diffusion = {{ mean = {a} }}
drift = {{ mean = [{b}] }}
coupling = {{ c_min = 0.5, matrix = {coupling} }}
lipschitz = {{ bound = 10.0 }}
"#
    ))
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn shifting_preserves_validity(seed in 0u64..1000, z in 0i64..64) {
        let f = sample_realization(&checkerboard(2, 0.5), seed, 8.0, 0.125).unwrap();
        let shifted = shift_field(&f, [z, 0]);
        prop_assert_eq!(
            validate_assumptions(&shifted).unwrap().pass,
            validate_assumptions(&f).unwrap().pass
        );
    }

    #[test]
    fn shifted_operator_is_inverse_positive(seed in 0u64..1000, rhs_seed in 0u64..1000) {
        let f = sample_realization(&checkerboard(2, 1.0), seed, 4.0, 0.25).unwrap();
        let grid = Grid::torus(1, f.n, f.h).unwrap();
        let op = assemble_system(&f, &grid).unwrap();
        let mass = assemble_mass(&f, &grid).unwrap();
        let defect = op.matrix.row_sums().iter().fold(0.0f64, |m, r| m.max(-r));
        let shift = defect / f.spec.coupling.c_min + 1.0;
        let shifted = op.matrix.add_scaled(&mass.matrix, shift);
        let n = shifted.dim();
        // sparse non-negative right-hand side
        let rhs: Vec<f64> = (0..n)
            .map(|i| if (i as u64).wrapping_mul(2654435761).wrapping_add(rhs_seed) % 5 == 0 { 1.0 } else { 0.0 })
            .collect();
        prop_assume!(rhs.iter().any(|v| *v > 0.0));
        let x = Factorization::new(&shifted).unwrap().solve(&rhs).unwrap();
        prop_assert!(x.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn eigenfunctions_are_positive_and_monotone_in_eps(seed in 0u64..1000) {
        let spec = checkerboard(2, 1.0);
        let f = sample_realization(&spec, seed, 32.0, 0.125).unwrap();
        let dom = Domain::interval(0.0, 1.0);
        let opts = EigenOptions::default();
        let mut last = f64::INFINITY;
        for eps in [0.2, 0.1, 0.05] {
            let pair = epsilon_eigenvalue(&f, &dom, eps, 0.125, &opts).unwrap();
            prop_assert!(pair.phi.iter().all(|v| *v > 0.0));
            prop_assert!(pair.lambda <= last + 1e-8, "{} after {}", pair.lambda, last);
            last = pair.lambda;
        }
    }

    #[test]
    fn constant_fields_give_algebraic_solutions(
        a in 0.5f64..2.0, b in -1.0f64..1.0, p in -2.0f64..2.0, mu in 0.0f64..1.0, delta in 0.2f64..1.0,
    ) {
        let spec = constant(a, b, 2);
        let f = sample_realization(&spec, 0, 16.0, 0.5).unwrap();
        let sol = solve_delta_problem(&f, delta, [p, 0.0], mu, &CellOptions { k_torus: 1.0, ..Default::default() }).unwrap();
        // identical groups with zero-row-sum coupling: v is constant and δv = −(a p² + b p + μ)
        let expected = -(a * p * p + b * p + mu) / delta;
        for v in &sol.v {
            prop_assert!((v - expected).abs() <= 1e-9 * (1.0 + expected.abs()), "{} vs {}", v, expected);
        }
    }

    #[test]
    fn comparison_probe_from_offset_guesses(seed in 0u64..1000, p in -1.0f64..1.0) {
        let f = sample_realization(&checkerboard(2, 0.5), seed, 8.0, 0.125).unwrap();
        let base = CellOptions { k_torus: 1.0, ..Default::default() };
        let sol = solve_delta_problem(&f, 0.5, [p, 0.0], 0.2, &base).unwrap();
        for off in [-10.0, 10.0] {
            let init: Vec<f64> = sol.v.iter().map(|v| v + off).collect();
            let other = solve_delta_problem(&f, 0.5, [p, 0.0], 0.2, &CellOptions { initial: Some(init), ..base.clone() }).unwrap();
            let gap = sol.v.iter().zip(&other.v).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            prop_assert!(gap <= 1e-8, "gap {}", gap);
        }
    }

    #[test]
    fn cell_solutions_respect_bounds_mean_gradient_and_mu_order(seed in 0u64..1000, p in -1.5f64..1.5) {
        let f = sample_realization(&checkerboard(2, 0.5), seed, 8.0, 0.125).unwrap();
        let opts = CellOptions { k_torus: 1.0, ..Default::default() };
        let lo = solve_delta_problem(&f, 0.25, [p, 0.0], 0.1, &opts).unwrap();
        let hi = solve_delta_problem(&f, 0.25, [p, 0.0], 0.6, &opts).unwrap();
        for sol in [&lo, &hi] {
            let (a, b) = sol.delta_bounds;
            prop_assert!(sol.v.iter().all(|v| sol.delta * v >= a - 1e-9 && sol.delta * v <= b + 1e-9));
            prop_assert!(mean_gradient(sol).unwrap().iter().all(|g| g.abs() <= 1e-12));
        }
        prop_assert!(lo.v.iter().zip(&hi.v).all(|(x, y)| y <= &(x + 1e-10)));
    }

    #[test]
    fn verdicts_are_recomputable(observed in -10.0f64..10.0, threshold in -10.0f64..10.0, k in 0usize..4) {
        let op = [Comparison::Le, Comparison::Lt, Comparison::Ge, Comparison::Gt][k];
        let v = Verdict::check("p", observed, op, threshold);
        let back: Verdict = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        prop_assert_eq!(back.recompute(), v.pass);
        let skipped: Verdict = serde_json::from_str(&serde_json::to_string(&Verdict::skipped("s", "flat")).unwrap()).unwrap();
        prop_assert!(skipped.recompute() && skipped.observed.is_nan());
    }
}

#[test]
fn checkerboard_ensemble_mean_matches_law() {
    let spec = checkerboard(1, 0.0);
    // node at a cell centre, away from the mollified ramps
    let values: Vec<f64> = (0..240)
        .map(|seed| sample_realization(&spec, seed, 4.0, 0.125).unwrap().samples.a(0, 4).xx)
        .collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    assert!((mean - 1.5).abs() <= 3.0 * se, "mean {mean}, se {se}");
}

#[test]
fn quasiperiodic_window_averages_settle() {
    let spec = EnvironmentSpec::from_toml_str(
        r#"
dimension = 1
groups = 1
kind = "quasiperiodic"
ellipticity = { min = 0.5, max = 2.5 }
diffusion = { mean = 1.5, amplitude = 0.8 }
coupling = { c_min = 0.5, matrix = [[0.0]] }
lipschitz = { bound = 50.0 }
quasiperiodic = { frequencies = [1.0, 1.4142135623730951] }
"#,
    )
    .unwrap();
    let f = sample_realization(&spec, 0, 1024.0, 0.125).unwrap();
    let vals: Vec<f64> = (0..f.n).map(|i| f.samples.a(0, i).xx).collect();
    let global = vals.iter().sum::<f64>() / vals.len() as f64;
    let mut prefix = vec![0.0];
    for v in &vals {
        prefix.push(prefix.last().unwrap() + v);
    }
    let starts: Vec<usize> = (0..100).map(|k| (k * 7919 * 13) % f.n).collect();
    let sup = |r: f64| {
        let w = (r / f.h) as usize;
        starts
            .iter()
            .map(|&s| {
                let s = s.min(f.n - w);
                ((prefix[s + w] - prefix[s]) / w as f64 - global).abs()
            })
            .fold(0.0, f64::max)
    };
    let devs: Vec<f64> = [4.0, 8.0, 16.0, 32.0].iter().map(|&r| sup(r)).collect();
    assert!(devs.windows(2).all(|w| w[1] < w[0]), "{devs:?}");
}

#[test]
fn group_logs_collapse_at_rate_eps() {
    let spec = checkerboard(2, 0.5);
    let f = sample_realization(&spec, 3, 64.0, 0.0625).unwrap();
    let dom = Domain::interval(0.0, 1.0);
    let ratios: Vec<f64> = [0.1, 0.05, 0.025]
        .iter()
        .map(|&eps| {
            let pair = epsilon_eigenvalue(&f, &dom, eps, 0.0625, &EigenOptions::default()).unwrap();
            let lc = hopf_cole(&pair).unwrap();
            let mut spread: f64 = 0.0;
            for i in 0..lc.nodes {
                let x = lc.positions[i][0];
                if (1.0 / 3.0..=2.0 / 3.0).contains(&x) {
                    spread = spread.max((lc.group(0)[i] - lc.group(1)[i]).abs());
                }
            }
            spread / eps
        })
        .collect();
    // spread/ε must not grow along the ladder
    assert!(ratios.iter().all(|r| *r <= 2.0 * ratios[0]), "{ratios:?}");
}

#[test]
fn hamiltonian_grows_in_mu_with_bounded_slope() {
    let spec = checkerboard(2, 0.5);
    let sched = Schedule {
        deltas: vec![0.4, 0.2],
        seeds: vec![0, 1],
        h: 0.125,
        ..Schedule::default()
    };
    let est = Estimator::new(&spec, &sched).unwrap();
    let report = mu_slope_check(&est, &[[-0.5, 0.0], [0.0, 0.0], [0.5, 0.0]], (0.0, 0.5)).unwrap();
    assert!(report.pass, "{report:?}");
    for p in [-1.0, 0.0, 1.0] {
        let s = est.estimate([p, 0.0], 0.3).unwrap();
        assert!(s.envelope_margin() >= 0.0, "{s:?}");
    }
}
