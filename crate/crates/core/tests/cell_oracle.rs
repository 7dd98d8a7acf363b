//! Discounted cell problem against an explicit time march on one period.
//!
//! For one group with `A(y) = 1.5 + 0.5 sin 2πy`, `b = 0`, `c = 0`, `μ = 0` the
//! solution on any torus of integer side is 1-periodic, so it can be obtained
//! independently by marching `v_t = A v'' − A (p + v')² − δ v` to steady state
//! on the unit cell.

use std::f64::consts::PI;

use effham_core::cell::{solve_delta_problem, CellOptions};
use effham_core::env::{sample_realization, EnvironmentSpec};

const SPEC: &str = r#"
dimension = 1
groups = 1
kind = "periodic"
ellipticity = { min = 0.5, max = 2.5 }
diffusion = { mean = 1.5, amplitude = 0.5 }
coupling = { c_min = 0.5, matrix = [[0.0]] }
lipschitz = { bound = 20.0 }
"#;

fn diffusion(y: f64) -> f64 {
    1.5 + 0.5 * (2.0 * PI * y).sin()
}

/// Forward Euler with central differences; returns `δ v(0)`.
fn explicit_march(n: usize, delta: f64, p: f64) -> f64 {
    let h = 1.0 / n as f64;
    let a: Vec<f64> = (0..n).map(|i| diffusion(i as f64 * h)).collect();
    let dt = 0.2 * h * h / 2.0;
    let mut v = vec![-p * p * 1.5 / delta; n];
    let mut next = v.clone();
    for _ in 0..10_000_000 {
        let mut change: f64 = 0.0;
        for i in 0..n {
            let (l, r) = (v[(i + n - 1) % n], v[(i + 1) % n]);
            let lap = (r - 2.0 * v[i] + l) / (h * h);
            let grad = p + (r - l) / (2.0 * h);
            let rate = a[i] * lap - a[i] * grad * grad - delta * v[i];
            next[i] = v[i] + dt * rate;
            change = change.max(rate.abs());
        }
        std::mem::swap(&mut v, &mut next);
        if change < 1e-10 {
            break;
        }
    }
    delta * v[0]
}

#[test]
fn periodic_cell_matches_explicit_march() {
    let spec = EnvironmentSpec::from_toml_str(SPEC).unwrap();
    let (delta, p) = (0.1, 1.0);
    let reference = explicit_march(64, delta, p);
    let mut errors = Vec::new();
    for h in [1.0 / 16.0, 1.0 / 32.0] {
        let field = sample_realization(&spec, 0, 100.0, h).unwrap();
        assert_eq!(field.samples.c[0], 0.0);
        let sol = solve_delta_problem(&field, delta, [p, 0.0], 0.0, &CellOptions::default()).unwrap();
        // periodicity of the discrete solution
        let per = (1.0 / h) as usize;
        let wrap = (0..sol.nodes() - per).map(|i| (sol.v[i] - sol.v[i + per]).abs()).fold(0.0, f64::max);
        assert!(wrap * delta < 1e-9, "solution is not 1-periodic: {wrap}");
        errors.push((sol.delta_v_at_origin() - reference).abs());
    }
    assert!(errors[1] <= 1e-3, "{errors:?} (reference {reference})");
    assert!(errors[1] < errors[0], "{errors:?}");
}
