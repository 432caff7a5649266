//! Spherical covariance model, sparse covariance assembly and SPD solves.
//!
//! Distances are measured in centered/scaled coordinates (see
//! [`ScalingSpec`]), so a single scalar range covers the along-track versus
//! cross-track anisotropy of the data.

mod circulant;
mod cholesky;
mod sparse;

use serde::{Deserialize, Serialize};

pub use circulant::CirculantSampler;
pub use cholesky::{reverse_cuthill_mckee, spd_factor_sample, spd_solve, SpdFactor};
pub use sparse::SparseSymMatrix;

use crate::error::{Error, Result};
use crate::field_model::{IncidenceMap, ProcessGrid, ScalingSpec};

/// Diagonal jitter, relative to the sill, applied when factorizing a pure
/// process covariance.
pub const PROCESS_JITTER: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceParams {
    /// Support radius, in scaled coordinate units.
    pub range: f64,
    /// Variance of the spatial field.
    pub sill: f64,
    /// Variance of the white measurement noise.
    pub nugget: f64,
}

impl CovarianceParams {
    pub fn new(range: f64, sill: f64, nugget: f64) -> Result<Self> {
        let p = CovarianceParams { range, sill, nugget };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.range > 0.0 && self.range.is_finite()) {
            return Err(Error::InvalidArgument(format!("range must be positive, got {}", self.range)));
        }
        if !(self.sill > 0.0 && self.sill.is_finite()) {
            return Err(Error::InvalidArgument(format!("sill must be positive, got {}", self.sill)));
        }
        if !(self.nugget >= 0.0 && self.nugget.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "nugget must be non-negative, got {}",
                self.nugget
            )));
        }
        Ok(())
    }
}

pub fn spherical_cov(h: f64, params: &CovarianceParams) -> Result<f64> {
    if !(h >= 0.0) {
        return Err(Error::InvalidArgument(format!("distance must be non-negative, got {h}")));
    }
    Ok(spherical(h, params.range, params.sill))
}

#[inline]
pub(crate) fn spherical(h: f64, range: f64, sill: f64) -> f64 {
    if h >= range {
        return 0.0;
    }
    let t = h / range;
    sill * (1.0 - 1.5 * t + 0.5 * t * t * t)
}

/// Read access to a symmetric covariance matrix, row by row.
pub trait CovarianceOperator: Sync {
    fn dim(&self) -> usize;

    /// Calls `f(col, value)` for every structurally nonzero entry of row `k`.
    fn for_each_in_row(&self, k: usize, f: &mut dyn FnMut(usize, f64));

    fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|k| {
                let mut s = 0.0;
                self.for_each_in_row(k, &mut |l, c| s += c * v[l]);
                s
            })
            .collect()
    }

    /// `A u` for a vector given by its nonzero entries.
    fn mul_sparse(&self, nonzeros: &[(usize, f64)]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for &(k, u) in nonzeros {
            self.for_each_in_row(k, &mut |l, c| out[l] += c * u);
        }
        out
    }
}

impl CovarianceOperator for SparseSymMatrix {
    fn dim(&self) -> usize {
        SparseSymMatrix::dim(self)
    }

    fn for_each_in_row(&self, k: usize, f: &mut dyn FnMut(usize, f64)) {
        for (l, v) in self.row(k) {
            f(l, v);
        }
    }

    fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        SparseSymMatrix::mul_vec(self, v)
    }
}

/// Stationary spherical covariance on a regular grid, stored as the stencil
/// of offsets inside the range. Memory is independent of the grid size.
#[derive(Clone, Debug)]
pub struct GridCovariance {
    grid: ProcessGrid,
    params: CovarianceParams,
    /// `(di, dj, value)` sorted by `(dj, di)`.
    stencil: Vec<(isize, isize, f64)>,
}

impl GridCovariance {
    pub fn new(grid: &ProcessGrid, params: &CovarianceParams, scaling: &ScalingSpec) -> Result<Self> {
        params.validate()?;
        let sx = grid.dx / scaling.x_halfrange;
        let sy = grid.dy / scaling.y_halfrange;
        let wx = ((params.range / sx).ceil() as isize).min(grid.nx as isize - 1);
        let wy = ((params.range / sy).ceil() as isize).min(grid.ny as isize - 1);
        let mut stencil = Vec::new();
        for dj in -wy..=wy {
            for di in -wx..=wx {
                let h = (di as f64 * sx).hypot(dj as f64 * sy);
                let v = spherical(h, params.range, params.sill);
                if h < params.range && v > 0.0 {
                    stencil.push((di, dj, v));
                }
            }
        }
        Ok(GridCovariance {
            grid: *grid,
            params: *params,
            stencil,
        })
    }

    pub fn grid(&self) -> &ProcessGrid {
        &self.grid
    }

    pub fn params(&self) -> &CovarianceParams {
        &self.params
    }

    pub fn stencil(&self) -> &[(isize, isize, f64)] {
        &self.stencil
    }

    pub fn to_sparse(&self) -> SparseSymMatrix {
        let rows = (0..self.grid.len())
            .map(|k| {
                let mut row = Vec::with_capacity(self.stencil.len());
                self.for_each_in_row(k, &mut |l, v| row.push((l, v)));
                row
            })
            .collect();
        SparseSymMatrix::from_rows(self.grid.len(), rows).expect("stencil is symmetric")
    }
}

impl CovarianceOperator for GridCovariance {
    fn dim(&self) -> usize {
        self.grid.len()
    }

    fn for_each_in_row(&self, k: usize, f: &mut dyn FnMut(usize, f64)) {
        let (i, j) = self.grid.ij(k);
        let (nx, ny) = (self.grid.nx as isize, self.grid.ny as isize);
        for &(di, dj, v) in &self.stencil {
            let (ii, jj) = (i as isize + di, j as isize + dj);
            if ii >= 0 && ii < nx && jj >= 0 && jj < ny {
                f(jj as usize * self.grid.nx + ii as usize, v);
            }
        }
    }
}

/// `Σ` over grid nodes: entries beyond the range are absent.
pub fn process_covariance(
    grid: &ProcessGrid,
    params: &CovarianceParams,
    scaling: &ScalingSpec,
) -> Result<SparseSymMatrix> {
    Ok(GridCovariance::new(grid, params, scaling)?.to_sparse())
}

/// `Σ_y = H Σ Hᵀ + nugget·I`.
pub fn observation_covariance(
    h: &IncidenceMap,
    sigma: &dyn CovarianceOperator,
    nugget: f64,
) -> Result<SparseSymMatrix> {
    observation_covariance_with(h, sigma, &vec![nugget; h.rows()])
}

/// `Σ_y = H Σ Hᵀ + diag(nuggets)`.
pub fn observation_covariance_with(
    h: &IncidenceMap,
    sigma: &dyn CovarianceOperator,
    nuggets: &[f64],
) -> Result<SparseSymMatrix> {
    if h.cols() != sigma.dim() {
        return Err(Error::DimensionMismatch {
            context: "observation covariance (incidence columns vs process dimension)",
            expected: sigma.dim(),
            actual: h.cols(),
        });
    }
    if nuggets.len() != h.rows() {
        return Err(Error::DimensionMismatch {
            context: "observation covariance nuggets",
            expected: h.rows(),
            actual: nuggets.len(),
        });
    }
    if let Some(bad) = nuggets.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("nugget must be non-negative, got {bad}")));
    }
    let (offsets, obs) = h.rows_by_node();
    let rows = (0..h.rows())
        .map(|r| {
            let mut row = Vec::new();
            sigma.for_each_in_row(h.node_of(r), &mut |l, v| {
                for &s in &obs[offsets[l]..offsets[l + 1]] {
                    row.push((s, v));
                }
            });
            row.push((r, nuggets[r]));
            row
        })
        .collect();
    SparseSymMatrix::from_rows(h.rows(), rows)
}

/// Factorizes a pure process covariance with the fixed relative jitter.
pub fn factor_process_covariance(sigma: &SparseSymMatrix, sill: f64) -> Result<SpdFactor> {
    SpdFactor::with_jitter(sigma, PROCESS_JITTER * sill)
}
