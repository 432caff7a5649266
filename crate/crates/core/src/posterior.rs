//! Posterior draws of `β_t` and `α_t`, field-image assembly and thresholding.
//!
//! `β_t ~ N(β̂_t, (XᵀΣ_y⁻¹X)⁻¹)` is sampled through a dense `p × p` Cholesky
//! factor. `α_t ~ N(α̂_t, V_α)` with
//! `V_α = ΣHᵀ(Σ_y⁻¹ − Σ_y⁻¹X(XᵀΣ_y⁻¹X)⁻¹XᵀΣ_y⁻¹)HΣ` is sampled without forming
//! `V_α`: with `w = Σ_y⁻¹y*`, `y* ~ N(0, Σ_y)`, the vector
//! `ΣHᵀ(w − Σ_y⁻¹X(XᵀΣ_y⁻¹X)⁻¹Xᵀw)` has covariance exactly `V_α`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backfit::{LayerModel, SequentialFit};
use crate::covariance::{CovarianceOperator, SpdFactor};
use crate::error::{Error, Result};
use crate::field_model::{IncidenceMap, Layer, ProcessGrid};

pub const DEFAULT_SAMPLE_COUNT: usize = 500;

/// `(XᵀΣ_y⁻¹X)⁻¹`.
pub fn beta_posterior_cov(x: &DMatrix<f64>, sigma_y: &SpdFactor) -> Result<DMatrix<f64>> {
    if x.nrows() != sigma_y.dim() {
        return Err(Error::DimensionMismatch {
            context: "beta posterior design rows",
            expected: sigma_y.dim(),
            actual: x.nrows(),
        });
    }
    let gram = x.transpose() * sigma_y.solve_matrix(x);
    let chol = gram.cholesky().ok_or(Error::Singular("XᵀΣ_y⁻¹X"))?;
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Dense `V_α`. Meant for small grids and checks; sampling never forms it.
pub fn alpha_posterior_cov(
    sigma: &dyn CovarianceOperator,
    h: &IncidenceMap,
    sigma_y: &SpdFactor,
    x: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if h.cols() != sigma.dim() || h.rows() != sigma_y.dim() || x.nrows() != h.rows() {
        return Err(Error::DimensionMismatch {
            context: "alpha posterior operands",
            expected: h.rows(),
            actual: x.nrows(),
        });
    }
    let m = sigma.dim();
    let n = h.rows();
    // B = H Σ, n × m.
    let mut b = DMatrix::zeros(n, m);
    for r in 0..n {
        sigma.for_each_in_row(h.node_of(r), &mut |l, v| b[(r, l)] = v);
    }
    let sb = sigma_y.solve_matrix(&b);
    let sx = sigma_y.solve_matrix(x);
    let gram = x.transpose() * &sx;
    let g = gram.cholesky().ok_or(Error::Singular("XᵀΣ_y⁻¹X"))?;
    let proj = sx.transpose() * &b;
    let v = b.transpose() * &sb - proj.transpose() * g.solve(&proj);
    Ok((&v + v.transpose()) * 0.5)
}

/// `V_α` as an operator on one layer model.
pub struct AlphaPosterior<'a> {
    model: &'a LayerModel,
}

impl<'a> AlphaPosterior<'a> {
    pub fn new(model: &'a LayerModel) -> Result<Self> {
        model.gls_gram()?;
        Ok(AlphaPosterior { model })
    }

    /// `(Σ_y⁻¹ − Σ_y⁻¹X G XᵀΣ_y⁻¹) w` when `w` is given pre-solved as `Σ_y⁻¹ w`.
    fn project(&self, solved: Vec<f64>, raw: &[f64]) -> Vec<f64> {
        let sx = self.model.sy_inv_x();
        let g = self.model.gls_gram().expect("checked in new");
        let xtw = sx.transpose() * DVector::from_column_slice(raw);
        let coef = g.solve(&xtw);
        let corr = sx * coef;
        solved.iter().zip(corr.iter()).map(|(a, b)| a - b).collect()
    }

    /// `V_α v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let h = self.model.incidence();
        let sv = self.model.process().mul_vec(v);
        let hsv = h.apply(&sv);
        let solved = self.model.obs_factor().solve(&hsv);
        let r = self.project(solved, &hsv);
        self.model.lift(&r)
    }

    /// A zero-mean draw with covariance `V_α`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.model.n_obs();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let w = self.model.obs_factor().solve_factor_transpose(&z);
        let sx = self.model.sy_inv_x();
        let g = self.model.gls_gram().expect("checked in new");
        let xtw = self.model.design().transpose() * DVector::from_column_slice(&w);
        let corr = sx * g.solve(&xtw);
        let wp: Vec<f64> = w.iter().zip(corr.iter()).map(|(a, b)| a - b).collect();
        self.model.lift(&wp)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingMode {
    #[default]
    Posterior,
    /// Zero spread: every draw equals the point estimate.
    PointEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSample {
    pub index: u64,
    pub layers: Vec<Layer>,
    pub beta: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
}

struct LayerSampler<'a> {
    beta_hat: &'a [f64],
    alpha_hat: &'a [f64],
    beta_factor: DMatrix<f64>,
    alpha: AlphaPosterior<'a>,
}

/// Draws posterior samples for every layer of a fit, independently per layer.
pub struct PosteriorSampler<'a> {
    fit: &'a SequentialFit,
    layers: Vec<LayerSampler<'a>>,
    seed: u64,
    mode: SamplingMode,
}

impl<'a> PosteriorSampler<'a> {
    pub fn new(models: &[&'a LayerModel], fit: &'a SequentialFit, seed: u64, mode: SamplingMode) -> Result<Self> {
        if models.len() != fit.estimates.len() {
            return Err(Error::DimensionMismatch {
                context: "layer models vs fitted layers",
                expected: fit.estimates.len(),
                actual: models.len(),
            });
        }
        let layers = models
            .iter()
            .zip(&fit.estimates)
            .zip(&fit.layers)
            .map(|((model, est), layer)| {
                let build = || -> Result<LayerSampler<'a>> {
                    let cov = beta_posterior_cov(model.design(), model.obs_factor())?;
                    let beta_factor = cov.cholesky().ok_or(Error::Singular("beta posterior covariance"))?.unpack();
                    if est.alpha_hat.len() != model.n_nodes() {
                        return Err(Error::DimensionMismatch {
                            context: "alpha estimate length",
                            expected: model.n_nodes(),
                            actual: est.alpha_hat.len(),
                        });
                    }
                    Ok(LayerSampler {
                        beta_hat: &est.beta_hat,
                        alpha_hat: &est.alpha_hat,
                        beta_factor,
                        alpha: AlphaPosterior::new(model)?,
                    })
                };
                build().map_err(|e| e.in_layer(layer.index()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PosteriorSampler { fit, layers, seed, mode })
    }

    pub fn fit(&self) -> &SequentialFit {
        self.fit
    }

    /// The `index`-th draw. Each (index, layer) pair has its own random
    /// stream, so draws can be generated in any order or in parallel, and a
    /// layer's draws do not depend on which other layers are fitted.
    pub fn draw(&self, index: u64) -> PosteriorSample {
        assert!(index < 1 << 62, "sample index too large");
        let mut beta = Vec::with_capacity(self.layers.len());
        let mut alpha = Vec::with_capacity(self.layers.len());
        for (ls, layer) in self.layers.iter().zip(&self.fit.layers) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream((index << 2) | u64::from(layer.index()));
            match self.mode {
                SamplingMode::PointEstimate => {
                    beta.push(ls.beta_hat.to_vec());
                    alpha.push(ls.alpha_hat.to_vec());
                }
                SamplingMode::Posterior => {
                    let p = ls.beta_hat.len();
                    let z = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
                    let db = &ls.beta_factor * z;
                    beta.push(ls.beta_hat.iter().zip(db.iter()).map(|(a, b)| a + b).collect());
                    let da = ls.alpha.sample(&mut rng);
                    alpha.push(ls.alpha_hat.iter().zip(&da).map(|(a, b)| a + b).collect());
                }
            }
        }
        PosteriorSample {
            index,
            layers: self.fit.layers.clone(),
            beta,
            alpha,
        }
    }
}

/// `count` draws with indices `0..count`.
pub fn draw_samples(
    models: &[&LayerModel],
    fit: &SequentialFit,
    count: usize,
    seed: u64,
) -> Result<Vec<PosteriorSample>> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let sampler = PosteriorSampler::new(models, fit, seed, SamplingMode::Posterior)?;
    Ok(collect_draws(&sampler, count))
}

#[cfg(feature = "parallel")]
fn collect_draws(sampler: &PosteriorSampler<'_>, count: usize) -> Vec<PosteriorSample> {
    use rayon::prelude::*;
    (0..count as u64).into_par_iter().map(|i| sampler.draw(i)).collect()
}

#[cfg(not(feature = "parallel"))]
fn collect_draws(sampler: &PosteriorSampler<'_>, count: usize) -> Vec<PosteriorSample> {
    (0..count as u64).map(|i| sampler.draw(i)).collect()
}

/// A process-level field on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldImage {
    pub grid: ProcessGrid,
    pub layer: Layer,
    pub values: Vec<f64>,
    /// The constant subtracted by [`apply_threshold`], if any.
    pub threshold: Option<f64>,
}

impl FieldImage {
    pub fn new(grid: ProcessGrid, layer: Layer, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                context: "field image values",
                expected: grid.len(),
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("field image has non-finite values".into()));
        }
        Ok(FieldImage {
            grid,
            layer,
            values,
            threshold: None,
        })
    }

    pub fn is_thresholded(&self) -> bool {
        self.threshold.is_some()
    }
}

/// `X_grid β_t + Σ_{k≤t} c^{t-k} α_k` for the layer at position `t` of
/// `layers`. Every layer below `layers[t]` must be present when `c > 0`.
pub fn assemble_field(
    grid: &ProcessGrid,
    grid_design: &DMatrix<f64>,
    layers: &[Layer],
    betas: &[Vec<f64>],
    alphas: &[Vec<f64>],
    t: usize,
    c: f64,
) -> Result<FieldImage> {
    if t >= layers.len() || t >= betas.len() || t >= alphas.len() {
        return Err(Error::InvalidArgument(format!("no estimates for layer position {t}")));
    }
    let layer = layers[t];
    if c != 0.0 {
        for idx in 1..layer.index() {
            if !layers[..t].iter().any(|l| l.index() == idx) {
                return Err(Error::InvalidArgument(format!(
                    "layer {} needs the field of earlier layer {idx}",
                    layer.index()
                )));
            }
        }
    }
    if grid_design.nrows() != grid.len() {
        return Err(Error::DimensionMismatch {
            context: "grid design rows",
            expected: grid.len(),
            actual: grid_design.nrows(),
        });
    }
    let mut values: Vec<f64> = (grid_design * DVector::from_column_slice(&betas[t])).iter().copied().collect();
    for k in 0..=t {
        let w = c.powi(i32::from(layer.index()) - i32::from(layers[k].index()));
        if alphas[k].len() != grid.len() {
            return Err(Error::DimensionMismatch {
                context: "alpha length",
                expected: grid.len(),
                actual: alphas[k].len(),
            });
        }
        if w != 0.0 {
            for (v, a) in values.iter_mut().zip(&alphas[k]) {
                *v += w * a;
            }
        }
    }
    FieldImage::new(*grid, layer, values)
}

/// Field images of every layer from the point estimates.
pub fn point_estimate_fields(fit: &SequentialFit, grid: &ProcessGrid, grid_design: &DMatrix<f64>) -> Result<Vec<FieldImage>> {
    let betas: Vec<Vec<f64>> = fit.estimates.iter().map(|e| e.beta_hat.clone()).collect();
    let alphas: Vec<Vec<f64>> = fit.estimates.iter().map(|e| e.alpha_hat.clone()).collect();
    (0..fit.layers.len())
        .map(|t| assemble_field(grid, grid_design, &fit.layers, &betas, &alphas, t, fit.c))
        .collect()
}

/// Field images of every layer from one posterior draw.
pub fn sample_fields(sample: &PosteriorSample, c: f64, grid: &ProcessGrid, grid_design: &DMatrix<f64>) -> Result<Vec<FieldImage>> {
    (0..sample.layers.len())
        .map(|t| assemble_field(grid, grid_design, &sample.layers, &sample.beta, &sample.alpha, t, c))
        .collect()
}

/// Subtracts `threshold`, so negative values mark soft areas.
pub fn apply_threshold(image: FieldImage, threshold: f64) -> Result<FieldImage> {
    if image.is_thresholded() {
        return Err(Error::AlreadyThresholded(image.layer.index()));
    }
    if !threshold.is_finite() {
        return Err(Error::InvalidArgument(format!("threshold must be finite, got {threshold}")));
    }
    let values = image.values.iter().map(|v| v - threshold).collect();
    Ok(FieldImage {
        values,
        threshold: Some(threshold),
        ..image
    })
}
