//! Pointwise checks of the structural assumptions on a sampled field.

use serde::{Deserialize, Serialize};

use super::field::FieldSamples;
use super::spec::{EnvironmentSpec, MAX_GROUPS};
use crate::error::{LabError, Result};

pub const ELLIPTICITY: &str = "ellipticity";
pub const DIAGONAL_DOMINANCE: &str = "diagonal-dominance";
pub const FULL_COUPLING: &str = "full-coupling";
pub const WEIGHTS: &str = "weights";
pub const BOUNDS: &str = "lipschitz-bounds";

/// Slack of one assumption: non-negative means satisfied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionMargin {
    pub assumption: String,
    pub margin: f64,
    pub worst_node: Option<usize>,
    /// Nodes where the assumption fails (capped).
    pub offending_nodes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub pass: bool,
    pub margins: Vec<AssumptionMargin>,
}

impl ValidationReport {
    pub fn margin(&self, assumption: &str) -> Option<&AssumptionMargin> {
        self.margins.iter().find(|m| m.assumption == assumption)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.margins
            .iter()
            .filter(|m| m.margin < 0.0)
            .map(|m| m.assumption.as_str())
            .collect()
    }
}

const MAX_REPORTED: usize = 32;

struct Tracker {
    name: &'static str,
    margin: f64,
    worst: Option<usize>,
    offending: Vec<usize>,
}

impl Tracker {
    fn new(name: &'static str) -> Self {
        Tracker {
            name,
            margin: f64::INFINITY,
            worst: None,
            offending: Vec::new(),
        }
    }

    fn see(&mut self, node: usize, value: f64) {
        if value < self.margin {
            self.margin = value;
            self.worst = Some(node);
        }
        if value < 0.0 && self.offending.len() < MAX_REPORTED && self.offending.last() != Some(&node) {
            self.offending.push(node);
        }
    }

    fn finish(self) -> Option<AssumptionMargin> {
        if self.margin.is_infinite() {
            return None;
        }
        Some(AssumptionMargin {
            assumption: self.name.to_string(),
            margin: self.margin,
            worst_node: self.worst,
            offending_nodes: self.offending,
        })
    }
}

/// Checks the field against the bounds declared in `spec`.
pub fn validate_samples(
    s: &FieldSamples,
    n_per_axis: usize,
    h: f64,
    spec: &EnvironmentSpec,
) -> Result<ValidationReport> {
    let m = s.groups;
    if m > MAX_GROUPS {
        return Err(LabError::UnsupportedSize(format!("{m} groups")));
    }
    let d = s.dim;
    let (lam, big_lam) = (spec.ellipticity.min, spec.ellipticity.max);
    let c_min = spec.coupling.c_min;

    let mut ellip = Tracker::new(ELLIPTICITY);
    let mut diag = Tracker::new(DIAGONAL_DOMINANCE);
    let mut coupled = Tracker::new(FULL_COUPLING);
    let mut weights = Tracker::new(WEIGHTS);
    let mut bounds = Tracker::new(BOUNDS);

    for i in 0..s.nodes {
        for g in 0..m {
            let (lo, hi) = s.a(g, i).eig_range(d);
            ellip.see(i, (lo - lam).min(big_lam - hi));
        }
        for r in 0..m {
            let mut row_c = 0.0;
            let mut row_s = 0.0;
            for col in 0..m {
                let (c, w) = (s.c(i, r, col), s.sigma(i, r, col));
                row_c += c;
                row_s += w;
                if col != r {
                    diag.see(i, -c);
                    weights.see(i, w);
                }
            }
            diag.see(i, row_c);
            weights.see(i, row_s - c_min);
        }
        if m >= 2 {
            // subsets containing group 0 enumerate each unordered partition once
            for mask in 0..(1u32 << (m - 1)) {
                let set: u32 = (mask << 1) | 1;
                if set == (1u32 << m) - 1 {
                    continue;
                }
                let inside = |g: usize| set & (1 << g) != 0;
                let mut forward = f64::NEG_INFINITY;
                let mut backward = f64::NEG_INFINITY;
                for a in 0..m {
                    for b in 0..m {
                        if inside(a) && !inside(b) {
                            forward = forward.max(-s.c(i, a, b));
                        } else if !inside(a) && inside(b) {
                            backward = backward.max(-s.c(i, a, b));
                        }
                    }
                }
                coupled.see(i, forward.min(backward) - c_min);
            }
        }
    }

    // sup + Lipschitz seminorm of every scalar coefficient channel
    let nodes = s.nodes;
    let neighbour = |i: usize, k: usize| -> usize {
        let (x, y) = (i % n_per_axis, i / n_per_axis);
        if k == 0 {
            (x + 1) % n_per_axis + n_per_axis * y
        } else {
            x + n_per_axis * ((y + 1) % n_per_axis)
        }
    };
    let mut channels: Vec<Box<dyn Fn(usize) -> f64 + '_>> = Vec::new();
    for g in 0..m {
        channels.push(Box::new(move |i| s.a(g, i).xx));
        if d == 2 {
            channels.push(Box::new(move |i| s.a(g, i).xy));
            channels.push(Box::new(move |i| s.a(g, i).yy));
        }
        for k in 0..d {
            channels.push(Box::new(move |i| s.b(g, i)[k]));
        }
        for col in 0..m {
            channels.push(Box::new(move |i| s.c(i, g, col)));
            channels.push(Box::new(move |i| s.sigma(i, g, col)));
        }
    }
    let mut worst_norm = 0.0_f64;
    let mut worst_node = 0;
    for ch in &channels {
        let mut sup = 0.0_f64;
        let mut lip = 0.0_f64;
        let mut lip_node = 0;
        for i in 0..nodes {
            let v = ch(i);
            sup = sup.max(v.abs());
            for k in 0..d {
                let q = (ch(neighbour(i, k)) - v).abs() / h;
                if q > lip {
                    lip = q;
                    lip_node = i;
                }
            }
        }
        if sup + lip > worst_norm {
            worst_norm = sup + lip;
            worst_node = lip_node;
        }
    }
    bounds.see(worst_node, spec.lipschitz.bound - worst_norm);

    let margins: Vec<AssumptionMargin> = [ellip, diag, coupled, weights, bounds]
        .into_iter()
        .filter_map(Tracker::finish)
        .collect();
    Ok(ValidationReport {
        pass: margins.iter().all(|m| m.margin >= 0.0),
        margins,
    })
}
