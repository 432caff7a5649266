use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Symmetric sparse matrix in compressed-row form with both triangles stored.
/// Column indices are sorted within each row.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSymMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseSymMatrix {
    /// Builds from per-row `(col, value)` lists. Duplicate columns within a
    /// row are summed. Symmetry is checked to a relative tolerance of 1e-12.
    pub fn from_rows(n: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if rows.len() != n {
            return Err(Error::DimensionMismatch {
                context: "sparse matrix rows",
                expected: n,
                actual: rows.len(),
            });
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for mut row in rows {
            row.sort_unstable_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                if c >= n {
                    return Err(Error::InvalidArgument(format!(
                        "column {c} out of range for dimension {n}"
                    )));
                }
                if last == Some(c) {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(cols.len());
        }
        let m = SparseSymMatrix {
            n,
            row_ptr,
            cols,
            vals,
        };
        m.check_symmetric()?;
        Ok(m)
    }

    pub fn from_triplets(n: usize, triplets: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut rows = vec![Vec::new(); n];
        for (i, j, v) in triplets {
            if i >= n {
                return Err(Error::InvalidArgument(format!(
                    "row {i} out of range for dimension {n}"
                )));
            }
            rows[i].push((j, v));
        }
        SparseSymMatrix::from_rows(n, rows)
    }

    pub fn identity(n: usize) -> Self {
        SparseSymMatrix::from_diagonal(&vec![1.0; n])
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SparseSymMatrix {
            n: d.len(),
            row_ptr: (0..=d.len()).collect(),
            cols: (0..d.len()).collect(),
            vals: d.to_vec(),
        }
    }

    /// Keeps entries with `|a_ij| > drop_tol`, plus the full diagonal.
    pub fn from_dense(a: &DMatrix<f64>, drop_tol: f64) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "square matrix",
                expected: n,
                actual: a.ncols(),
            });
        }
        let rows = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| i == j || a[(i, j)].abs() > drop_tol)
                    .map(|j| (j, a[(i, j)]))
                    .collect()
            })
            .collect();
        SparseSymMatrix::from_rows(n, rows)
    }

    fn check_symmetric(&self) -> Result<()> {
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                if j <= i {
                    continue;
                }
                let w = self.get(j, i);
                if (v - w).abs() > 1e-12 * v.abs().max(w.abs()).max(f64::MIN_POSITIVE) {
                    return Err(Error::InvalidArgument(format!(
                        "matrix is not symmetric at ({i}, {j}): {v} vs {w}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    /// Entry `(i, j)`, zero when not stored.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(pos) => self.vals[r.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.n);
        (0..self.n)
            .map(|i| self.row(i).map(|(j, a)| a * v[j]).sum())
            .collect()
    }

    /// `self + diag(d)`; diagonal entries are inserted when missing.
    pub fn add_diagonal(&self, d: &[f64]) -> Result<Self> {
        if d.len() != self.n {
            return Err(Error::DimensionMismatch {
                context: "diagonal shift",
                expected: self.n,
                actual: d.len(),
            });
        }
        let rows = (0..self.n)
            .map(|i| {
                let mut row: Vec<(usize, f64)> = self.row(i).collect();
                row.push((i, d[i]));
                row
            })
            .collect();
        SparseSymMatrix::from_rows(self.n, rows)
    }

    pub fn scaled(&self, s: f64) -> Self {
        SparseSymMatrix {
            vals: self.vals.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                a[(i, j)] = v;
            }
        }
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_sum_and_lookup() {
        let m = SparseSymMatrix::from_triplets(
            2,
            [(0, 0, 1.0), (0, 0, 1.0), (0, 1, 0.5), (1, 0, 0.5), (1, 1, 3.0)],
        )
        .unwrap();
        assert_eq!(m.get(0, 0), 2.0);
        assert_eq!(m.get(1, 0), 0.5);
        assert_eq!(m.nnz(), 4);
        assert_eq!(m.mul_vec(&[1.0, 2.0]), vec![3.0, 6.5]);
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        assert!(SparseSymMatrix::from_triplets(2, [(0, 1, 1.0), (1, 0, 2.0)]).is_err());
        assert!(SparseSymMatrix::from_triplets(2, [(0, 1, 1.0)]).is_err());
    }

    #[test]
    fn add_diagonal_inserts_missing_entries() {
        let m = SparseSymMatrix::from_triplets(2, [(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let s = m.add_diagonal(&[2.0, 3.0]).unwrap();
        assert_eq!(s.to_dense(), DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]));
    }
}
