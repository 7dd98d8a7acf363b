//! Sampled coefficient fields on a periodic grid.

use std::f64::consts::PI;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{CellLaw, EnvironmentSpec, Kind};
use super::validate::{validate_samples, ValidationReport};
use crate::discretize::Grid;
use crate::error::{LabError, Result};
use crate::numerics::{as_integer, euclid, SymMat};

/// Nodal coefficient values.
///
/// Layout: `a` and `b` are group-major (`group * nodes + node`); `c` and
/// `sigma` are node-major blocks (`node * m * m + row * m + col`).
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSamples {
    pub dim: usize,
    pub groups: usize,
    pub nodes: usize,
    pub a: Vec<SymMat>,
    pub b: Vec<[f64; 2]>,
    pub c: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl FieldSamples {
    pub fn constant(
        dim: usize,
        nodes: usize,
        a: &[SymMat],
        b: &[[f64; 2]],
        c: &[Vec<f64>],
        sigma: &[Vec<f64>],
    ) -> FieldSamples {
        let m = a.len();
        let block_c: Vec<f64> = c.iter().flatten().copied().collect();
        let block_s: Vec<f64> = sigma.iter().flatten().copied().collect();
        FieldSamples {
            dim,
            groups: m,
            nodes,
            a: (0..m).flat_map(|g| std::iter::repeat(a[g]).take(nodes)).collect(),
            b: (0..m).flat_map(|g| std::iter::repeat(b[g]).take(nodes)).collect(),
            c: (0..nodes).flat_map(|_| block_c.iter().copied()).collect(),
            sigma: (0..nodes).flat_map(|_| block_s.iter().copied()).collect(),
        }
    }

    #[inline]
    pub fn a(&self, group: usize, node: usize) -> SymMat {
        self.a[group * self.nodes + node]
    }

    #[inline]
    pub fn b(&self, group: usize, node: usize) -> [f64; 2] {
        self.b[group * self.nodes + node]
    }

    #[inline]
    pub fn c(&self, node: usize, row: usize, col: usize) -> f64 {
        let m = self.groups;
        self.c[node * m * m + row * m + col]
    }

    #[inline]
    pub fn sigma(&self, node: usize, row: usize, col: usize) -> f64 {
        let m = self.groups;
        self.sigma[node * m * m + row * m + col]
    }

    fn gather(&self, node_of: impl Fn(usize) -> Vec<(usize, f64)>, nodes: usize) -> FieldSamples {
        let m = self.groups;
        let mm = m * m;
        let mut out = FieldSamples {
            dim: self.dim,
            groups: m,
            nodes,
            a: vec![SymMat::default(); m * nodes],
            b: vec![[0.0; 2]; m * nodes],
            c: vec![0.0; mm * nodes],
            sigma: vec![0.0; mm * nodes],
        };
        for i in 0..nodes {
            for (src, w) in node_of(i) {
                for g in 0..m {
                    let (dst_idx, src_idx) = (g * nodes + i, g * self.nodes + src);
                    out.a[dst_idx] = out.a[dst_idx].add(&self.a[src_idx].scale(w));
                    for k in 0..2 {
                        out.b[dst_idx][k] += w * self.b[src_idx][k];
                    }
                }
                for e in 0..mm {
                    out.c[i * mm + e] += w * self.c[src * mm + e];
                    out.sigma[i * mm + e] += w * self.sigma[src * mm + e];
                }
            }
        }
        out
    }
}

/// Structural constants of a sampled field.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FieldConstants {
    pub ellipticity_min: f64,
    pub ellipticity_max: f64,
    pub c_min: f64,
    /// Generic constant dominating drift, weight row sums and coupling row sums (at least 1).
    pub big_c: f64,
    pub drift_sup: f64,
}

impl FieldConstants {
    pub fn of(samples: &FieldSamples, c_min: f64) -> FieldConstants {
        let d = samples.dim;
        let m = samples.groups;
        let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
        for a in &samples.a {
            let (l, u) = a.eig_range(d);
            lo = lo.min(l);
            hi = hi.max(u);
        }
        let drift_sup = samples.b.iter().map(|b| euclid(*b, d)).fold(0.0, f64::max);
        let mut rows = 0.0_f64;
        for i in 0..samples.nodes {
            for r in 0..m {
                let sc: f64 = (0..m).map(|s| samples.c(i, r, s)).sum();
                let ss: f64 = (0..m).map(|s| samples.sigma(i, r, s)).sum();
                rows = rows.max(sc).max(ss);
            }
        }
        FieldConstants {
            ellipticity_min: lo,
            ellipticity_max: hi,
            c_min,
            big_c: 1f64.max(drift_sup).max(rows),
            drift_sup,
        }
    }
}

/// One realization of an environment on a periodic grid of side `length`.
#[derive(Clone, Debug)]
pub struct CoefficientField {
    pub spec: EnvironmentSpec,
    pub seed: u64,
    pub length: f64,
    pub h: f64,
    /// Nodes per axis.
    pub n: usize,
    pub samples: FieldSamples,
    /// Quasiperiodic frequencies as actually used (snapped to multiples of `1/length`).
    pub effective_frequencies: Vec<f64>,
}

/// Deterministic per-cell random numbers: the value of a cell depends only
/// on (seed, channel, cell index), never on the torus size.
struct CellStream {
    rng: ChaCha8Rng,
}

impl CellStream {
    fn new(seed: u64, channel: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(channel);
        CellStream { rng }
    }

    fn uniform(&mut self, cell: u64) -> f64 {
        self.rng.set_word_pos(2 * cell as u128);
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

fn cantor(i: u64, j: u64) -> u64 {
    (i + j) * (i + j + 1) / 2 + j
}

/// Draws a realization of `spec` on a torus of side `length` with spacing `h`.
pub fn sample_realization(
    spec: &EnvironmentSpec,
    seed: u64,
    length: f64,
    h: f64,
) -> Result<CoefficientField> {
    spec.check()?;
    let n = as_integer(length / h).ok_or_else(|| {
        LabError::RejectedInput(format!("torus side {length} is not a multiple of h = {h}"))
    })?;
    if n % 2 != 0 || n < 4 {
        return Err(LabError::RejectedInput(format!(
            "torus side / h = {n} must be an even integer ≥ 4"
        )));
    }
    if spec.kind == Kind::Checkerboard {
        let cell = spec.checkerboard.as_ref().map(|c| c.cell).unwrap_or(1.0);
        if as_integer(length / cell).is_none() {
            return Err(LabError::RejectedInput(format!(
                "torus side {length} is not a multiple of the cell size {cell}"
            )));
        }
    }
    let d = spec.dimension;
    let m = spec.groups;
    let nodes = if d == 1 { n } else { n * n };
    let coords = |i: usize| -> [usize; 2] { [i % n, if d == 1 { 0 } else { i / n }] };

    let effective_frequencies: Vec<f64> = match (&spec.kind, &spec.quasiperiodic) {
        (Kind::Quasiperiodic, Some(q)) => q
            .frequencies
            .iter()
            .map(|f| {
                let k = (f.value() * length).round();
                let k = if k == 0.0 { 1.0 } else { k };
                k / length
            })
            .collect(),
        _ => Vec::new(),
    };

    // modulation in [-1, 1] for a given channel at a node
    let modulation = |channel: u64| -> Vec<f64> {
        match spec.kind {
            Kind::Constant => vec![0.0; nodes],
            Kind::Periodic => {
                let p = spec.period();
                (0..nodes)
                    .map(|i| {
                        let c = coords(i);
                        (0..d)
                            .map(|k| (2.0 * PI * c[k] as f64 * h / p).sin())
                            .sum::<f64>()
                            / d as f64
                    })
                    .collect()
            }
            Kind::Quasiperiodic => {
                let count = (effective_frequencies.len() * d) as f64;
                (0..nodes)
                    .map(|i| {
                        let c = coords(i);
                        let mut s = 0.0;
                        for w in &effective_frequencies {
                            for k in 0..d {
                                s += (2.0 * PI * w * c[k] as f64 * h).sin();
                            }
                        }
                        s / count
                    })
                    .collect()
            }
            Kind::Checkerboard => {
                let cb = spec.checkerboard.as_ref().expect("checked");
                let mut stream = CellStream::new(seed, channel);
                (0..nodes)
                    .map(|i| {
                        let c = coords(i);
                        let cell_of = |k: usize| ((c[k] as f64 * h) / cb.cell + 1e-9).floor() as u64;
                        let idx = if d == 1 {
                            cell_of(0)
                        } else {
                            cantor(cell_of(0), cell_of(1))
                        };
                        let u = stream.uniform(idx);
                        match cb.law {
                            CellLaw::Binary => {
                                if u < 0.5 {
                                    -1.0
                                } else {
                                    1.0
                                }
                            }
                            CellLaw::Uniform => 2.0 * u - 1.0,
                        }
                    })
                    .collect()
            }
        }
    };

    let mm = m * m;
    let mut samples = FieldSamples {
        dim: d,
        groups: m,
        nodes,
        a: Vec::with_capacity(m * nodes),
        b: Vec::with_capacity(m * nodes),
        c: Vec::new(),
        sigma: Vec::new(),
    };
    let shear = spec.diffusion.shear;
    for g in 0..m {
        let xi = modulation(g as u64);
        let (mean, amp) = (spec.diffusion_mean(g), spec.diffusion_amplitude(g));
        samples.a.extend(xi.iter().map(|x| {
            let v = mean + amp * x;
            SymMat {
                xx: v,
                xy: if d == 2 { shear } else { 0.0 },
                yy: v,
            }
        }));
    }
    for g in 0..m {
        let mut axis: Vec<Vec<f64>> = Vec::new();
        for k in 0..d {
            let xi = if spec.drift.amplitude != 0.0 {
                modulation((m + 2 * g + k) as u64)
            } else {
                vec![0.0; nodes]
            };
            axis.push(
                xi.iter()
                    .map(|x| spec.drift.mean.get(g, k) + spec.drift.amplitude * x)
                    .collect(),
            );
        }
        samples.b.extend((0..nodes).map(|i| {
            let mut v = [0.0; 2];
            for k in 0..d {
                v[k] = axis[k][i];
            }
            v
        }));
    }
    let cmean = spec.coupling_mean();
    let smean = spec.sigma_mean();
    samples.c = (0..nodes)
        .flat_map(|_| cmean.iter().flatten().copied())
        .collect();
    samples.sigma = (0..nodes)
        .flat_map(|_| smean.iter().flatten().copied())
        .collect();
    for g in 0..m {
        if spec.coupling.amplitude != 0.0 {
            let xi = modulation((3 * m + g) as u64);
            for i in 0..nodes {
                samples.c[i * mm + g * m + g] += spec.coupling.amplitude * xi[i];
            }
        }
        if spec.coupling.sigma_amplitude != 0.0 {
            let xi = modulation((4 * m + g) as u64);
            for i in 0..nodes {
                samples.sigma[i * mm + g * m + g] += spec.coupling.sigma_amplitude * xi[i];
            }
        }
    }

    let field = CoefficientField {
        spec: spec.clone(),
        seed,
        length,
        h,
        n,
        samples,
        effective_frequencies,
    };
    let report = field.validate()?;
    if let Some(bad) = report.margins.iter().find(|m| m.margin < 0.0) {
        return Err(LabError::consistency(
            &bad.assumption,
            format!(
                "generated field has margin {:.3e} at node {:?}",
                bad.margin, bad.worst_node
            ),
        ));
    }
    Ok(field)
}

impl CoefficientField {
    pub fn dim(&self) -> usize {
        self.spec.dimension
    }

    pub fn groups(&self) -> usize {
        self.spec.groups
    }

    /// The torus grid the field lives on.
    pub fn grid(&self) -> Grid {
        Grid::torus(self.dim(), self.n, self.h).expect("field grids are valid")
    }

    pub fn constants(&self) -> FieldConstants {
        FieldConstants::of(&self.samples, self.spec.coupling.c_min)
    }

    pub fn validate(&self) -> Result<ValidationReport> {
        validate_samples(&self.samples, self.n, self.h, &self.spec)
    }

    /// Coefficients at the nodes of `grid`, by periodic multilinear interpolation.
    pub fn sample_on(&self, grid: &Grid) -> Result<FieldSamples> {
        if grid.dim != self.dim() {
            return Err(LabError::RejectedInput("grid and field dimensions differ".into()));
        }
        if grid.is_torus()
            && grid.counts[0] == self.n
            && (grid.h - self.h).abs() <= 1e-14 * self.h
            && grid.origin == [0.0; 2]
        {
            return Ok(self.samples.clone());
        }
        let d = self.dim();
        let n = self.n;
        let h = self.h;
        let weights = |node: usize| -> Vec<(usize, f64)> {
            let y = grid.position(node);
            let mut per_axis = [[(0usize, 1.0), (0usize, 0.0)]; 2];
            for k in 0..d {
                let t = y[k] / h;
                let mut i0 = t.floor();
                let mut frac = t - i0;
                if frac > 1.0 - 1e-10 {
                    i0 += 1.0;
                    frac = 0.0;
                } else if frac < 1e-10 {
                    frac = 0.0;
                }
                let i0 = (i0 as i64).rem_euclid(n as i64) as usize;
                per_axis[k] = [(i0, 1.0 - frac), ((i0 + 1) % n, frac)];
            }
            let mut out = Vec::with_capacity(4);
            if d == 1 {
                for &(i, w) in &per_axis[0] {
                    if w != 0.0 {
                        out.push((i, w));
                    }
                }
            } else {
                for &(i, wi) in &per_axis[0] {
                    for &(j, wj) in &per_axis[1] {
                        if wi * wj != 0.0 {
                            out.push((i + n * j, wi * wj));
                        }
                    }
                }
            }
            out
        };
        Ok(self.samples.gather(weights, grid.node_count()))
    }

    /// Dumps header (d, m, L, h, seed) and node arrays, little-endian.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_binary_to(&mut w).map_err(|e| LabError::io(path, e))?;
        w.flush().map_err(|e| LabError::io(path, e))
    }

    fn write_binary_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let s = &self.samples;
        let d = s.dim;
        w.write_u32::<LittleEndian>(d as u32)?;
        w.write_u32::<LittleEndian>(s.groups as u32)?;
        w.write_f64::<LittleEndian>(self.length)?;
        w.write_f64::<LittleEndian>(self.h)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        for a in &s.a {
            for i in 0..d {
                for j in 0..d {
                    w.write_f64::<LittleEndian>(a.get(i, j))?;
                }
            }
        }
        for b in &s.b {
            for &v in b.iter().take(d) {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        for &v in s.c.iter().chain(&s.sigma) {
            w.write_f64::<LittleEndian>(v)?;
        }
        Ok(())
    }

    /// Reads back a dump; returns `(length, h, seed, samples)`.
    pub fn read_binary(path: &Path) -> Result<(f64, f64, u64, FieldSamples)> {
        let file = std::fs::File::open(path).map_err(|e| LabError::io(path, e))?;
        let mut r = BufReader::new(file);
        Self::read_binary_from(&mut r).map_err(|e| LabError::io(path, e))
    }

    fn read_binary_from<R: Read>(r: &mut R) -> std::io::Result<(f64, f64, u64, FieldSamples)> {
        let d = r.read_u32::<LittleEndian>()? as usize;
        let m = r.read_u32::<LittleEndian>()? as usize;
        let length = r.read_f64::<LittleEndian>()?;
        let h = r.read_f64::<LittleEndian>()?;
        let seed = r.read_u64::<LittleEndian>()?;
        let n = (length / h).round() as usize;
        let nodes = if d == 1 { n } else { n * n };
        let mut a = Vec::with_capacity(m * nodes);
        for _ in 0..m * nodes {
            let mut e = [[0.0; 2]; 2];
            for row in e.iter_mut().take(d) {
                for v in row.iter_mut().take(d) {
                    *v = r.read_f64::<LittleEndian>()?;
                }
            }
            a.push(SymMat {
                xx: e[0][0],
                xy: e[0][1],
                yy: if d == 1 { e[0][0] } else { e[1][1] },
            });
        }
        let mut b = Vec::with_capacity(m * nodes);
        for _ in 0..m * nodes {
            let mut v = [0.0; 2];
            for x in v.iter_mut().take(d) {
                *x = r.read_f64::<LittleEndian>()?;
            }
            b.push(v);
        }
        let mut read_block = || -> std::io::Result<Vec<f64>> {
            (0..m * m * nodes).map(|_| r.read_f64::<LittleEndian>()).collect()
        };
        let c = read_block()?;
        let sigma = read_block()?;
        Ok((
            length,
            h,
            seed,
            FieldSamples {
                dim: d,
                groups: m,
                nodes,
                a,
                b,
                c,
                sigma,
            },
        ))
    }
}

/// Translates the realization by an integer number of grid steps.
pub fn shift_field(field: &CoefficientField, z: [i64; 2]) -> CoefficientField {
    let grid = field.grid();
    let nodes = grid.node_count();
    let samples = field
        .samples
        .gather(|i| vec![(grid.offset(i, z).expect("torus"), 1.0)], nodes);
    CoefficientField {
        samples,
        ..field.clone()
    }
}
