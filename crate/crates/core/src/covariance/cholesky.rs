//! Envelope (profile) Cholesky factorization under a reverse Cuthill-McKee
//! ordering. Fill is confined to the envelope of the permuted matrix, which
//! for grid- and lane-structured covariances is a narrow band.

use std::collections::VecDeque;

use nalgebra::DMatrix;

use super::SparseSymMatrix;
use crate::error::{Error, Result};

/// `P A Pᵀ = L Lᵀ` with `L` lower triangular, stored row by row from the
/// first structural nonzero of each row up to the diagonal.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    n: usize,
    /// `perm[new] = old`.
    perm: Vec<usize>,
    first: Vec<usize>,
    start: Vec<usize>,
    values: Vec<f64>,
}

impl SpdFactor {
    pub fn new(a: &SparseSymMatrix) -> Result<Self> {
        SpdFactor::with_jitter(a, 0.0)
    }

    /// Factorizes `A + jitter·I`.
    pub fn with_jitter(a: &SparseSymMatrix, jitter: f64) -> Result<Self> {
        let perm = reverse_cuthill_mckee(a);
        SpdFactor::with_ordering(a, perm, jitter)
    }

    pub fn with_ordering(a: &SparseSymMatrix, perm: Vec<usize>, jitter: f64) -> Result<Self> {
        let n = a.dim();
        if perm.len() != n {
            return Err(Error::DimensionMismatch {
                context: "ordering length",
                expected: n,
                actual: perm.len(),
            });
        }
        let mut inv = vec![usize::MAX; n];
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || inv[old] != usize::MAX {
                return Err(Error::InvalidArgument("ordering is not a permutation".into()));
            }
            inv[old] = new;
        }

        let mut first = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            first[new] = a
                .row(old)
                .map(|(j, _)| inv[j])
                .filter(|&j| j <= new)
                .min()
                .unwrap_or(new)
                .min(new);
        }
        let mut start = Vec::with_capacity(n + 1);
        start.push(0usize);
        for i in 0..n {
            start.push(start[i] + (i - first[i] + 1));
        }
        let mut values = vec![0.0; start[n]];
        for (new, &old) in perm.iter().enumerate() {
            for (j, v) in a.row(old) {
                let jn = inv[j];
                if jn <= new {
                    values[start[new] + jn - first[new]] += v;
                }
            }
            values[start[new + 1] - 1] += jitter;
        }

        for i in 0..n {
            let (done, rest) = values.split_at_mut(start[i]);
            let row_i = &mut rest[..start[i + 1] - start[i]];
            let fi = first[i];
            for j in fi..i {
                let fj = first[j];
                let row_j = &done[start[j]..start[j + 1]];
                let f = fi.max(fj);
                let s = dot(&row_i[f - fi..j - fi], &row_j[f - fj..j - fj]);
                let ljj = row_j[j - fj];
                row_i[j - fi] = (row_i[j - fi] - s) / ljj;
            }
            let off = &row_i[..i - fi];
            let d = row_i[i - fi] - dot(off, off);
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    pivot: perm[i],
                    value: d,
                });
            }
            row_i[i - fi] = d.sqrt();
        }

        Ok(SpdFactor {
            n,
            perm,
            first,
            start,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored entries of `L`.
    pub fn envelope_size(&self) -> usize {
        self.values.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.values[self.start[i]..self.start[i + 1]]
    }

    /// Solves `L y = b` in place (permuted space).
    fn forward(&self, y: &mut [f64]) {
        for i in 0..self.n {
            let fi = self.first[i];
            let row = self.row(i);
            let s = dot(&row[..i - fi], &y[fi..i]);
            y[i] = (y[i] - s) / row[i - fi];
        }
    }

    /// Solves `Lᵀ x = y` in place (permuted space).
    fn backward(&self, x: &mut [f64]) {
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let row = self.row(i);
            x[i] /= row[i - fi];
            let xi = x[i];
            for (xj, l) in x[fi..i].iter_mut().zip(&row[..i - fi]) {
                *xj -= l * xi;
            }
        }
    }

    /// `A⁻¹ b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n, "right-hand side length");
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        self.forward(&mut y);
        self.backward(&mut y);
        let mut x = vec![0.0; self.n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// Column-wise `A⁻¹ B`.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for c in 0..b.ncols() {
            let col: Vec<f64> = b.column(c).iter().copied().collect();
            out.set_column(c, &nalgebra::DVector::from_vec(self.solve(&col)));
        }
        out
    }

    /// `F z` with `F = Pᵀ L P`, so `F Fᵀ = A`: a draw with covariance `A`
    /// when `z` is standard normal. For diagonal `A` this is `√A z`.
    pub fn mul_factor(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.n, "noise vector length");
        let pz: Vec<f64> = self.perm.iter().map(|&old| z[old]).collect();
        let mut x = vec![0.0; self.n];
        for i in 0..self.n {
            let fi = self.first[i];
            x[self.perm[i]] = dot(self.row(i), &pz[fi..=i]);
        }
        x
    }

    /// `F⁻ᵀ z`, which equals `A⁻¹ F z`.
    pub fn solve_factor_transpose(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.n, "noise vector length");
        let mut y: Vec<f64> = self.perm.iter().map(|&old| z[old]).collect();
        self.backward(&mut y);
        let mut x = vec![0.0; self.n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// `log det A`.
    pub fn log_det(&self) -> f64 {
        (0..self.n)
            .map(|i| 2.0 * self.row(i)[i - self.first[i]].ln())
            .sum()
    }
}

pub fn spd_solve(a: &SparseSymMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.dim() {
        return Err(Error::DimensionMismatch {
            context: "spd_solve right-hand side",
            expected: a.dim(),
            actual: b.len(),
        });
    }
    Ok(SpdFactor::new(a)?.solve(b))
}

pub fn spd_factor_sample(a: &SparseSymMatrix, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != a.dim() {
        return Err(Error::DimensionMismatch {
            context: "spd_factor_sample noise",
            expected: a.dim(),
            actual: z.len(),
        });
    }
    Ok(SpdFactor::new(a)?.mul_factor(z))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Reverse Cuthill-McKee ordering of the sparsity graph, component by
/// component, each started from a pseudo-peripheral node. Ties are broken by
/// node index so the ordering is deterministic.
pub fn reverse_cuthill_mckee(a: &SparseSymMatrix) -> Vec<usize> {
    let n = a.dim();
    let degree: Vec<usize> = (0..n)
        .map(|i| a.row(i).filter(|&(j, _)| j != i).count())
        .collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&i| (degree[i], i));

    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        let root = pseudo_peripheral(a, &degree, seed, &visited);
        let begin = order.len();
        visited[root] = true;
        order.push(root);
        let mut head = begin;
        let mut nbrs = Vec::new();
        while head < order.len() {
            let v = order[head];
            head += 1;
            nbrs.clear();
            nbrs.extend(a.row(v).map(|(j, _)| j).filter(|&j| !visited[j]));
            nbrs.sort_by_key(|&j| (degree[j], j));
            for &j in &nbrs {
                visited[j] = true;
                order.push(j);
            }
        }
    }
    order.reverse();
    order
}

fn pseudo_peripheral(a: &SparseSymMatrix, degree: &[usize], seed: usize, blocked: &[bool]) -> usize {
    let mut root = seed;
    let (mut ecc, mut last) = bfs_last_level(a, root, blocked);
    for _ in 0..8 {
        let candidate = *last
            .iter()
            .min_by_key(|&&v| (degree[v], v))
            .expect("non-empty level");
        let (e, l) = bfs_last_level(a, candidate, blocked);
        if e <= ecc {
            break;
        }
        root = candidate;
        ecc = e;
        last = l;
    }
    root
}

fn bfs_last_level(a: &SparseSymMatrix, root: usize, blocked: &[bool]) -> (usize, Vec<usize>) {
    let mut level = vec![usize::MAX; a.dim()];
    level[root] = 0;
    let mut queue = VecDeque::from([root]);
    let mut depth = 0;
    let mut last = vec![root];
    while let Some(v) = queue.pop_front() {
        for (j, _) in a.row(v) {
            if level[j] == usize::MAX && !blocked[j] {
                level[j] = level[v] + 1;
                if level[j] > depth {
                    depth = level[j];
                    last.clear();
                }
                last.push(j);
                queue.push_back(j);
            }
        }
    }
    (depth, last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, density: f64, seed: u64) -> SparseSymMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = vec![Vec::new(); n];
        let mut diag = vec![1.0; n];
        for i in 0..n {
            for j in 0..i {
                if rng.random::<f64>() < density {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    rows[i].push((j, v));
                    rows[j].push((i, v));
                    diag[i] += v.abs();
                    diag[j] += v.abs();
                }
            }
        }
        for (i, d) in diag.into_iter().enumerate() {
            rows[i].push((i, d));
        }
        SparseSymMatrix::from_rows(n, rows).unwrap()
    }

    fn max_abs(v: &[f64]) -> f64 {
        v.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    #[test]
    fn identity_and_diagonal() {
        let b = vec![1.0, -2.0, 3.5];
        assert_eq!(spd_solve(&SparseSymMatrix::identity(3), &b).unwrap(), b);
        let two = SparseSymMatrix::from_diagonal(&[2.0]);
        assert!((spd_solve(&two, &[4.0]).unwrap()[0] - 2.0).abs() < 1e-15);
        assert_eq!(spd_factor_sample(&SparseSymMatrix::identity(3), &b).unwrap(), b);
        let four = SparseSymMatrix::from_diagonal(&[4.0; 3]);
        assert_eq!(spd_factor_sample(&four, &b).unwrap(), vec![2.0, -4.0, 7.0]);
    }

    #[test]
    fn matches_dense_cholesky() {
        let a = random_spd(50, 0.1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = spd_solve(&a, &b).unwrap();
        let dense = a.to_dense().cholesky().unwrap();
        let oracle = dense.solve(&nalgebra::DVector::from_vec(b.clone()));
        for (u, v) in x.iter().zip(oracle.iter()) {
            assert!((u - v).abs() <= 1e-8 * v.abs().max(1e-8 * max_abs(&x)).max(1e-12));
        }
        let ax = a.mul_vec(&x);
        let resid: Vec<f64> = ax.iter().zip(&b).map(|(p, q)| p - q).collect();
        assert!(max_abs(&resid) / max_abs(&b) <= 1e-10);
    }

    #[test]
    fn factor_reproduces_matrix() {
        let a = random_spd(30, 0.2, 8);
        let f = SpdFactor::new(&a).unwrap();
        let n = a.dim();
        let mut pl = DMatrix::zeros(n, n);
        for k in 0..n {
            let mut e = vec![0.0; n];
            e[k] = 1.0;
            pl.set_column(k, &nalgebra::DVector::from_vec(f.mul_factor(&e)));
        }
        let rebuilt = &pl * pl.transpose();
        assert!((rebuilt - a.to_dense()).amax() < 1e-12);
        let logdet = a.to_dense().cholesky().unwrap().l().diagonal().iter().map(|d| 2.0 * d.ln()).sum::<f64>();
        assert!((f.log_det() - logdet).abs() < 1e-9);
    }

    #[test]
    fn solve_factor_transpose_composes_to_inverse() {
        let a = random_spd(25, 0.2, 9);
        let f = SpdFactor::new(&a).unwrap();
        let z: Vec<f64> = (0..25).map(|i| (i as f64).sin()).collect();
        let lhs = f.solve_factor_transpose(&z);
        let rhs = f.solve(&f.mul_factor(&z));
        for (u, v) in lhs.iter().zip(&rhs) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn indefinite_matrix_reports_pivot() {
        let a = SparseSymMatrix::from_triplets(
            2,
            [(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)],
        )
        .unwrap();
        let err = SpdFactor::new(&a).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }));
        assert!(err.to_string().contains("not positive definite"));
    }

    #[test]
    fn rcm_is_a_permutation_and_shrinks_band_on_a_path() {
        // Path graph with scrambled labels.
        let n = 40;
        let label = |i: usize| (i * 17) % n;
        let mut rows = vec![Vec::new(); n];
        for i in 0..n {
            rows[label(i)].push((label(i), 4.0));
            if i + 1 < n {
                rows[label(i)].push((label(i + 1), -1.0));
                rows[label(i + 1)].push((label(i), -1.0));
            }
        }
        let a = SparseSymMatrix::from_rows(n, rows).unwrap();
        let perm = reverse_cuthill_mckee(&a);
        let mut seen = perm.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let f = SpdFactor::new(&a).unwrap();
        assert_eq!(f.envelope_size(), 2 * n - 1);
    }

    #[test]
    fn deterministic_factorization() {
        let a = random_spd(40, 0.1, 21);
        let b: Vec<f64> = (0..40).map(|i| i as f64).collect();
        assert_eq!(spd_solve(&a, &b).unwrap(), spd_solve(&a, &b).unwrap());
    }
}
