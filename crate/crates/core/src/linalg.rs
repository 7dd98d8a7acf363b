//! Sparse matrices and the direct / iterative solvers behind every
//! linear solve in the crate.
//!
//! Direct solves reorder with reverse Cuthill–McKee and run a banded LU with
//! partial pivoting; the grid operators here are narrow after reordering, so
//! this is both exact and cheap. Very large systems switch to BiCGSTAB with an
//! ILU(0) preconditioner.

use std::collections::VecDeque;
use std::io::Write;

use crate::error::{LabError, Result};
use crate::numerics::{dot, norm2};

/// Above this many unknowns solves go through the Krylov path.
pub const DIRECT_SIZE_LIMIT: usize = 200_000;
/// Band storage cap (entries) before falling back to Krylov.
const BAND_STORAGE_LIMIT: usize = 150_000_000;
/// Relative residual demanded of every accepted solve.
pub const SOLVE_TOLERANCE: f64 = 1e-10;

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

/// Accumulates `(row, col, value)` entries; duplicates are summed.
#[derive(Clone, Debug)]
pub struct TripletBuilder {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(n: usize) -> Self {
        TripletBuilder {
            n,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(n: usize, cap: usize) -> Self {
        TripletBuilder {
            n,
            entries: Vec::with_capacity(cap),
        }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.n && col < self.n);
        self.entries.push((row, col, value));
    }

    pub fn build(mut self) -> SparseMatrix {
        self.entries
            .sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let n = self.n;
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in self.entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }
}

impl SparseMatrix {
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut b = TripletBuilder::with_capacity(n, triplets.len());
        for &(r, c, v) in triplets {
            b.push(r, c, v);
        }
        b.build()
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[a..b]
            .iter()
            .copied()
            .zip(self.values[a..b].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        match self.col_idx[a..b].binary_search(&j) {
            Ok(k) => self.values[a + k],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n)
            .flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v)))
            .collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            *yi = s;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, other: &SparseMatrix, s: f64) -> SparseMatrix {
        assert_eq!(self.n, other.n);
        let mut b = TripletBuilder::with_capacity(self.n, self.nnz() + other.nnz());
        for (i, j, v) in self.triplets() {
            b.push(i, j, v);
        }
        for (i, j, v) in other.triplets() {
            b.push(i, j, s * v);
        }
        b.build()
    }

    /// Z-matrix test: non-positive off-diagonal, positive diagonal.
    pub fn is_z_matrix(&self) -> bool {
        (0..self.n).all(|i| {
            self.row(i)
                .all(|(j, v)| if i == j { v > 0.0 } else { v <= 0.0 })
        })
    }

    /// Writes `row col value` lines with round-trip precision.
    pub fn write_coo<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "% {} {} {}", self.n, self.n, self.nnz())?;
        for (i, j, v) in self.triplets() {
            writeln!(w, "{} {} {:.16e}", i, j, v)?;
        }
        Ok(())
    }

    fn permuted(&self, perm: &[usize], inv: &[usize]) -> SparseMatrix {
        // new row k is old row perm[k]; old column j goes to inv[j]
        let mut b = TripletBuilder::with_capacity(self.n, self.nnz());
        for (k, &old) in perm.iter().enumerate() {
            for (j, v) in self.row(old) {
                b.push(k, inv[j], v);
            }
        }
        b.build()
    }
}

/// Reverse Cuthill–McKee ordering on the symmetrised sparsity pattern.
/// Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &SparseMatrix) -> Vec<usize> {
    let n = a.n;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for (j, _) in a.row(i) {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    for list in adj.iter_mut() {
        list.sort_unstable();
        list.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    let bfs_last = |start: usize, visited_base: &[bool]| -> (usize, usize) {
        // returns (farthest node, eccentricity) within the component
        let mut dist = vec![usize::MAX; n];
        let mut q = VecDeque::new();
        dist[start] = 0;
        q.push_back(start);
        let mut far = (start, 0);
        while let Some(u) = q.pop_front() {
            let du = dist[u];
            if du > far.1 || (du == far.1 && degree[u] < degree[far.0]) {
                far = (u, du);
            }
            for &w in &adj[u] {
                if !visited_base[w] && dist[w] == usize::MAX {
                    dist[w] = du + 1;
                    q.push_back(w);
                }
            }
        }
        far
    };

    while order.len() < n {
        let seed = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| degree[i])
            .unwrap();
        // pseudo-peripheral start: a couple of eccentricity sweeps
        let mut start = seed;
        let mut ecc = bfs_last(start, &visited).1;
        for _ in 0..4 {
            let (far, _) = bfs_last(start, &visited);
            let e = bfs_last(far, &visited).1;
            if e <= ecc {
                break;
            }
            ecc = e;
            start = far;
        }
        visited[start] = true;
        let mut q = VecDeque::from([start]);
        while let Some(u) = q.pop_front() {
            order.push(u);
            let mut next: Vec<usize> = adj[u].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| degree[w]);
            for w in next {
                visited[w] = true;
                q.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Lower and upper bandwidth.
pub fn bandwidths(a: &SparseMatrix) -> (usize, usize) {
    let mut kl = 0;
    let mut ku = 0;
    for i in 0..a.n {
        for (j, _) in a.row(i) {
            if i > j {
                kl = kl.max(i - j);
            } else {
                ku = ku.max(j - i);
            }
        }
    }
    (kl, ku)
}

/// Banded LU with partial pivoting, column-major band storage in the layout
/// of LAPACK's `gbtrf` (`kl` extra rows hold pivoting fill).
#[derive(Clone, Debug)]
struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    ab: Vec<f64>,
    ipiv: Vec<usize>,
    pivot_ratio: f64,
}

impl BandLu {
    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        // A(i, j) lives at row kl + ku + i - j of column j
        (self.kl + self.ku + i - j) + j * self.ldab
    }

    fn factor(a: &SparseMatrix, kl: usize, ku: usize) -> Result<BandLu> {
        let n = a.n;
        let ldab = 2 * kl + ku + 1;
        let mut lu = BandLu {
            n,
            kl,
            ku,
            ldab,
            ab: vec![0.0; ldab * n],
            ipiv: vec![0; n],
            pivot_ratio: 1.0,
        };
        for i in 0..n {
            for (j, v) in a.row(i) {
                let k = lu.idx(i, j);
                lu.ab[k] = v;
            }
        }
        let kv = kl + ku;
        let mut ju = 0usize;
        let mut pmax = 0.0_f64;
        let mut pmin = f64::INFINITY;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let col = j * ldab;
            let mut jp = 0;
            let mut best = lu.ab[col + kv].abs();
            for t in 1..=km {
                let v = lu.ab[col + kv + t].abs();
                if v > best {
                    best = v;
                    jp = t;
                }
            }
            lu.ipiv[j] = j + jp;
            if best == 0.0 || !best.is_finite() {
                return Err(LabError::SolverBreakdown {
                    condition: f64::INFINITY,
                    detail: format!("zero or non-finite pivot in column {j}"),
                });
            }
            pmax = pmax.max(best);
            pmin = pmin.min(best);
            ju = ju.max((j + ku + jp).min(n - 1));
            if jp != 0 {
                for c in j..=ju {
                    let a1 = lu.idx(j, c);
                    let a2 = lu.idx(j + jp, c);
                    lu.ab.swap(a1, a2);
                }
            }
            let piv = lu.ab[col + kv];
            for t in 1..=km {
                lu.ab[col + kv + t] /= piv;
            }
            for c in (j + 1)..=ju {
                let ujc = lu.ab[lu.idx(j, c)];
                if ujc == 0.0 {
                    continue;
                }
                let base = c * ldab + kv - (c - j);
                for t in 1..=km {
                    let l = lu.ab[col + kv + t];
                    lu.ab[base + t] -= l * ujc;
                }
            }
        }
        lu.pivot_ratio = pmax / pmin;
        Ok(lu)
    }

    fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        let kv = self.kl + self.ku;
        for j in 0..n {
            let p = self.ipiv[j];
            if p != j {
                b.swap(j, p);
            }
            let km = self.kl.min(n - 1 - j);
            let bj = b[j];
            if bj != 0.0 {
                let col = j * self.ldab + kv;
                for t in 1..=km {
                    b[j + t] -= self.ab[col + t] * bj;
                }
            }
        }
        for j in (0..n).rev() {
            let col = j * self.ldab;
            b[j] /= self.ab[col + kv];
            let bj = b[j];
            if bj != 0.0 {
                let lo = j.saturating_sub(kv);
                for i in lo..j {
                    b[i] -= self.ab[col + kv + i - j] * bj;
                }
            }
        }
    }
}

/// Incomplete LU with zero fill, stored on the matrix pattern.
#[derive(Clone, Debug)]
struct Ilu0 {
    a: SparseMatrix,
    diag_pos: Vec<usize>,
}

impl Ilu0 {
    fn new(a: &SparseMatrix) -> Result<Ilu0> {
        let mut f = a.clone();
        let n = f.n;
        let mut diag_pos = vec![usize::MAX; n];
        for i in 0..n {
            for k in f.row_ptr[i]..f.row_ptr[i + 1] {
                if f.col_idx[k] == i {
                    diag_pos[i] = k;
                }
            }
            if diag_pos[i] == usize::MAX {
                return Err(LabError::SolverBreakdown {
                    condition: f64::INFINITY,
                    detail: format!("missing diagonal in row {i}"),
                });
            }
        }
        let mut pos = vec![usize::MAX; n];
        for i in 0..n {
            let (ra, rb) = (f.row_ptr[i], f.row_ptr[i + 1]);
            for k in ra..rb {
                pos[f.col_idx[k]] = k;
            }
            for k in ra..rb {
                let j = f.col_idx[k];
                if j >= i {
                    break;
                }
                let d = f.values[diag_pos[j]];
                if d == 0.0 {
                    return Err(LabError::SolverBreakdown {
                        condition: f64::INFINITY,
                        detail: format!("zero ILU pivot in row {j}"),
                    });
                }
                let l = f.values[k] / d;
                f.values[k] = l;
                for kk in (diag_pos[j] + 1)..f.row_ptr[j + 1] {
                    let c = f.col_idx[kk];
                    let p = pos[c];
                    if p != usize::MAX && p >= ra && p < rb {
                        f.values[p] -= l * f.values[kk];
                    }
                }
            }
            for k in ra..rb {
                pos[f.col_idx[k]] = usize::MAX;
            }
        }
        Ok(Ilu0 { a: f, diag_pos })
    }

    fn apply(&self, r: &[f64]) -> Vec<f64> {
        let f = &self.a;
        let n = f.n;
        let mut y = r.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in f.row_ptr[i]..self.diag_pos[i] {
                s -= f.values[k] * y[f.col_idx[k]];
            }
            y[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (self.diag_pos[i] + 1)..f.row_ptr[i + 1] {
                s -= f.values[k] * y[f.col_idx[k]];
            }
            y[i] = s / f.values[self.diag_pos[i]];
        }
        y
    }
}

#[derive(Clone, Debug)]
enum Engine {
    Band {
        perm: Vec<usize>,
        lu: BandLu,
    },
    Krylov(Ilu0),
}

/// A reusable solver for one matrix.
#[derive(Clone, Debug)]
pub struct Factorization {
    matrix: SparseMatrix,
    engine: Engine,
}

impl Factorization {
    pub fn new(a: &SparseMatrix) -> Result<Factorization> {
        let n = a.n;
        if n == 0 {
            return Err(LabError::RejectedInput("empty system".into()));
        }
        if n <= DIRECT_SIZE_LIMIT {
            let perm = reverse_cuthill_mckee(a);
            let mut inv = vec![0; n];
            for (k, &p) in perm.iter().enumerate() {
                inv[p] = k;
            }
            let pa = a.permuted(&perm, &inv);
            let (kl, ku) = bandwidths(&pa);
            if (2 * kl + ku + 1).saturating_mul(n) <= BAND_STORAGE_LIMIT {
                let lu = BandLu::factor(&pa, kl, ku)?;
                if lu.pivot_ratio > 1e15 {
                    return Err(LabError::SolverBreakdown {
                        condition: lu.pivot_ratio,
                        detail: "matrix is numerically singular".into(),
                    });
                }
                return Ok(Factorization {
                    matrix: a.clone(),
                    engine: Engine::Band { perm, lu },
                });
            }
        }
        Ok(Factorization {
            matrix: a.clone(),
            engine: Engine::Krylov(Ilu0::new(a)?),
        })
    }

    /// Max/min pivot magnitude for the direct path (a cheap conditioning proxy).
    pub fn condition_estimate(&self) -> f64 {
        match &self.engine {
            Engine::Band { lu, .. } => lu.pivot_ratio,
            Engine::Krylov(_) => f64::NAN,
        }
    }

    fn direct(&self, perm: &[usize], lu: &BandLu, rhs: &[f64]) -> Vec<f64> {
        let mut pb: Vec<f64> = perm.iter().map(|&p| rhs[p]).collect();
        lu.solve_in_place(&mut pb);
        let mut x = vec![0.0; rhs.len()];
        for (k, &p) in perm.iter().enumerate() {
            x[p] = pb[k];
        }
        x
    }

    /// Solves and returns `(x, relative residual)`; no tolerance is enforced.
    pub fn solve_with_residual(&self, rhs: &[f64]) -> Result<(Vec<f64>, f64)> {
        let bnorm = norm2(rhs);
        if bnorm == 0.0 {
            return Ok((vec![0.0; rhs.len()], 0.0));
        }
        match &self.engine {
            Engine::Band { perm, lu } => {
                let mut x = self.direct(perm, lu, rhs);
                let mut res = residual(&self.matrix, &x, rhs);
                let mut rel = norm2(&res) / bnorm;
                for _ in 0..3 {
                    if rel <= SOLVE_TOLERANCE * 1e-2 || !rel.is_finite() {
                        break;
                    }
                    let dx = self.direct(perm, lu, &res);
                    let cand: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
                    let r2 = residual(&self.matrix, &cand, rhs);
                    let rel2 = norm2(&r2) / bnorm;
                    if rel2 >= rel {
                        break;
                    }
                    x = cand;
                    res = r2;
                    rel = rel2;
                }
                if !rel.is_finite() {
                    return Err(LabError::SolverBreakdown {
                        condition: lu.pivot_ratio,
                        detail: "non-finite solution".into(),
                    });
                }
                Ok((x, rel))
            }
            Engine::Krylov(ilu) => bicgstab(&self.matrix, ilu, rhs, SOLVE_TOLERANCE * 0.1, 5000),
        }
    }

    /// Solves to relative residual `≤ 1e-10`.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let (x, rel) = self.solve_with_residual(rhs)?;
        if rel > SOLVE_TOLERANCE {
            return Err(LabError::SolverBreakdown {
                condition: self.condition_estimate(),
                detail: format!("relative residual {rel:.3e} above {SOLVE_TOLERANCE:.0e}"),
            });
        }
        Ok(x)
    }
}

fn residual(a: &SparseMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    let ax = a.mul_vec(x);
    b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect()
}

fn bicgstab(
    a: &SparseMatrix,
    m: &Ilu0,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, f64)> {
    let n = b.len();
    let bnorm = norm2(b);
    let mut x = m.apply(b);
    let mut r = residual(a, &x, b);
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut rel = norm2(&r) / bnorm;
    for it in 0..max_iter {
        if rel <= tol {
            return Ok((x, rel));
        }
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < 1e-300 {
            return Err(LabError::SolverBreakdown {
                condition: f64::NAN,
                detail: format!("BiCGSTAB breakdown at iteration {it}"),
            });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let phat = m.apply(&p);
        a.mul_vec_into(&phat, &mut v);
        alpha = rho / dot(&r_hat, &v);
        let s: Vec<f64> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
        let shat = m.apply(&s);
        let t = a.mul_vec(&shat);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] = s[i] - omega * t[i];
        }
        rel = norm2(&r) / bnorm;
        if !rel.is_finite() || omega == 0.0 {
            return Err(LabError::SolverBreakdown {
                condition: f64::NAN,
                detail: format!("BiCGSTAB stagnated at iteration {it}"),
            });
        }
    }
    let r = residual(a, &x, b);
    let rel = norm2(&r) / bnorm;
    if rel <= SOLVE_TOLERANCE {
        Ok((x, rel))
    } else {
        Err(LabError::Convergence {
            iterations: max_iter,
            residual: rel,
            detail: "BiCGSTAB".into(),
        })
    }
}

/// One-shot solve of `a x = rhs` to relative residual `≤ 1e-10`.
pub fn solve_linear(a: &SparseMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    if rhs.len() != a.dim() {
        return Err(LabError::RejectedInput(format!(
            "right-hand side has length {} for a system of size {}",
            rhs.len(),
            a.dim()
        )));
    }
    Factorization::new(a)?.solve(rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dominant(n: usize, nnz_per_row: usize, seed: u64) -> SparseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::new();
        for i in 0..n {
            let mut off = 0.0;
            for _ in 0..nnz_per_row {
                let j = rng.random_range(0..n);
                if j != i {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    off += v.abs();
                    t.push((i, j, v));
                }
            }
            t.push((i, i, off + 0.5));
        }
        SparseMatrix::from_triplets(n, &t)
    }

    #[test]
    fn duplicates_are_summed() {
        let a = SparseMatrix::from_triplets(2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 0, -1.0)]);
        assert_eq!(a.get(0, 0), 3.0);
        assert_eq!(a.get(1, 0), -1.0);
        assert_eq!(a.get(1, 1), 0.0);
        assert_eq!(a.nnz(), 2);
    }

    #[test]
    fn direct_solve_random_dominant() {
        let a = random_dominant(300, 4, 7);
        let x_true: Vec<f64> = (0..300).map(|i| (i as f64).cos()).collect();
        let b = a.mul_vec(&x_true);
        let x = solve_linear(&a, &b).unwrap();
        let r = residual(&a, &x, &b);
        assert!(norm2(&r) / norm2(&b) <= 1e-10);
    }

    #[test]
    fn pivoting_handles_zero_diagonal() {
        let a = SparseMatrix::from_triplets(3, &[(0, 1, 1.0), (1, 0, 1.0), (2, 2, 2.0), (1, 2, 1.0)]);
        let x = solve_linear(&a, &[1.0, 2.0, 4.0]).unwrap();
        assert!((x[0]).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14 && (x[2] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn singular_matrix_reports_breakdown() {
        let a = SparseMatrix::from_triplets(2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]);
        match solve_linear(&a, &[1.0, 1.0]) {
            Err(LabError::SolverBreakdown { condition, .. }) => assert!(condition > 1e10),
            other => panic!("expected breakdown, got {other:?}"),
        }
    }

    #[test]
    fn krylov_path_agrees_with_direct() {
        let a = random_dominant(400, 3, 11);
        let b: Vec<f64> = (0..400).map(|i| 1.0 + (i % 7) as f64).collect();
        let ilu = Ilu0::new(&a).unwrap();
        let (xk, rel) = bicgstab(&a, &ilu, &b, 1e-12, 1000).unwrap();
        assert!(rel <= 1e-12);
        let xd = solve_linear(&a, &b).unwrap();
        for (p, q) in xk.iter().zip(&xd) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn rcm_narrows_a_shuffled_ring() {
        let n = 200;
        // ring with a scrambled numbering
        let label = |i: usize| (i * 37) % n;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((label(i), label(i), 3.0));
            t.push((label(i), label((i + 1) % n), -1.0));
            t.push((label((i + 1) % n), label(i), -1.0));
        }
        let a = SparseMatrix::from_triplets(n, &t);
        let perm = reverse_cuthill_mckee(&a);
        let mut inv = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            inv[p] = k;
        }
        let (kl, ku) = bandwidths(&a.permuted(&perm, &inv));
        assert!(kl <= 2 && ku <= 2, "bandwidths {kl} {ku}");
    }

    #[test]
    fn coo_export_round_trips_values() {
        let a = SparseMatrix::from_triplets(2, &[(0, 0, 1.0 / 3.0), (1, 0, -2.5e-17)]);
        let mut buf = Vec::new();
        a.write_coo(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let parsed: Vec<(usize, usize, f64)> = text
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split_whitespace().collect();
                (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
            })
            .collect();
        assert_eq!(SparseMatrix::from_triplets(2, &parsed), a);
    }
}
