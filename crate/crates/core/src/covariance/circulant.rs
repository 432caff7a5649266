//! Exact sampling of stationary grid fields by circulant embedding.
//!
//! The covariance stencil is wrapped onto a torus large enough that no two
//! stencil offsets alias and every in-grid offset keeps its true value. The
//! circulant matrix is then `F* Λ F / N` with `Λ` the DFT of the wrapped
//! stencil, i.e. the lattice spectral density, which is non-negative for a
//! valid covariance. `F Λ^{1/2} z / √N` is a square-root factor of the
//! embedding; restricting it to the grid gives draws with covariance `Σ`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::GridCovariance;
use crate::error::{Error, Result};

pub struct CirculantSampler {
    nx: usize,
    ny: usize,
    px: usize,
    py: usize,
    scaled_sqrt_eig: Vec<f64>,
    fft_x: Arc<dyn Fft<f64>>,
    fft_y: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for CirculantSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CirculantSampler")
            .field("grid", &(self.nx, self.ny))
            .field("embedding", &(self.px, self.py))
            .finish()
    }
}

impl CirculantSampler {
    pub fn new(cov: &GridCovariance) -> Result<Self> {
        let grid = cov.grid();
        let (nx, ny) = (grid.nx, grid.ny);
        let wx = cov.stencil().iter().map(|s| s.0.unsigned_abs()).max().unwrap_or(0);
        let wy = cov.stencil().iter().map(|s| s.1.unsigned_abs()).max().unwrap_or(0);
        let px = next_fast_len((nx + wx).max(2 * wx + 1));
        let py = next_fast_len((ny + wy).max(2 * wy + 1));

        let mut planner = FftPlanner::new();
        let fft_x = planner.plan_fft_forward(px);
        let fft_y = planner.plan_fft_forward(py);

        let mut wrapped = vec![Complex::new(0.0, 0.0); px * py];
        for &(di, dj, v) in cov.stencil() {
            let i = di.rem_euclid(px as isize) as usize;
            let j = dj.rem_euclid(py as isize) as usize;
            wrapped[j * px + i].re += v;
        }
        fft2(&mut wrapped, px, py, fft_x.as_ref(), fft_y.as_ref());

        let max_eig = wrapped.iter().map(|c| c.re).fold(0.0f64, f64::max);
        let min_eig = wrapped.iter().map(|c| c.re).fold(f64::INFINITY, f64::min);
        if min_eig < -1e-8 * max_eig {
            let pivot = wrapped
                .iter()
                .position(|c| c.re == min_eig)
                .unwrap_or(0);
            return Err(Error::NotPositiveDefinite {
                pivot,
                value: min_eig,
            });
        }
        let norm = ((px * py) as f64).sqrt();
        let scaled_sqrt_eig = wrapped.iter().map(|c| c.re.max(0.0).sqrt() / norm).collect();

        Ok(CirculantSampler {
            nx,
            ny,
            px,
            py,
            scaled_sqrt_eig,
            fft_x,
            fft_y,
        })
    }

    /// Torus size `(px, py)`.
    pub fn embedding(&self) -> (usize, usize) {
        (self.px, self.py)
    }

    /// Two independent draws from one complex transform.
    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let mut buf: Vec<Complex<f64>> = self
            .scaled_sqrt_eig
            .iter()
            .map(|&s| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex::new(s * re, s * im)
            })
            .collect();
        fft2(&mut buf, self.px, self.py, self.fft_x.as_ref(), self.fft_y.as_ref());
        let m = self.nx * self.ny;
        let mut a = Vec::with_capacity(m);
        let mut b = Vec::with_capacity(m);
        for j in 0..self.ny {
            for c in &buf[j * self.px..j * self.px + self.nx] {
                a.push(c.re);
                b.push(c.im);
            }
        }
        (a, b)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.sample_pair(rng).0
    }
}

fn fft2(data: &mut [Complex<f64>], px: usize, py: usize, fx: &dyn Fft<f64>, fy: &dyn Fft<f64>) {
    for row in data.chunks_exact_mut(px) {
        fx.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); py];
    for i in 0..px {
        for j in 0..py {
            col[j] = data[j * px + i];
        }
        fy.process(&mut col);
        for j in 0..py {
            data[j * px + i] = col[j];
        }
    }
}

/// Smallest `n' ≥ n` of the form `2^a 3^b 5^c`.
fn next_fast_len(n: usize) -> usize {
    let mut candidate = n.max(1);
    loop {
        let mut r = candidate;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return candidate;
        }
        candidate += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::CovarianceParams;
    use crate::field_model::{build_grid, ScalingSpec};
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fast_lengths() {
        assert_eq!(next_fast_len(7), 8);
        assert_eq!(next_fast_len(11), 12);
        assert_eq!(next_fast_len(97), 100);
        assert_eq!(next_fast_len(1), 1);
    }

    #[test]
    fn embedding_is_large_enough() {
        let g = build_grid(0.0, 300.0, 0.0, 15.0, 0.5, 0.5).unwrap();
        let cov = GridCovariance::new(&g, &CovarianceParams::new(0.3, 1.0, 0.0).unwrap(), &ScalingSpec::from_grid(&g)).unwrap();
        let s = CirculantSampler::new(&cov).unwrap();
        let (px, py) = s.embedding();
        assert!(px >= g.nx + 90 && py >= g.ny + 5);
    }

    #[test]
    fn draws_have_the_grid_covariance() {
        let g = build_grid(0.0, 5.0, 0.0, 3.0, 1.0, 1.0).unwrap();
        let scaling = ScalingSpec::from_grid(&g);
        let cov = GridCovariance::new(&g, &CovarianceParams::new(1.2, 1.5, 0.0).unwrap(), &scaling).unwrap();
        let sampler = CirculantSampler::new(&cov).unwrap();
        let m = g.len();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut acc = DMatrix::<f64>::zeros(m, m);
        let pairs = 50_000;
        for _ in 0..pairs {
            let (a, b) = sampler.sample_pair(&mut rng);
            let a = DVector::from_vec(a);
            let b = DVector::from_vec(b);
            acc += &a * a.transpose() + &b * b.transpose();
        }
        acc /= (2 * pairs) as f64;
        let truth = cov.to_sparse().to_dense();
        let worst = (&acc - &truth).amax();
        assert!(worst < 0.05 * 1.5, "max deviation {worst}");
        for i in 0..m {
            assert!((acc[(i, i)] - 1.5).abs() < 0.05 * 1.5);
        }
    }
}
