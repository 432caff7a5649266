//! Spatial backfitting for one layer and the sequential multi-layer driver.
//!
//! For a layer `y = Xβ + Hα + ε` with known covariance parameters, the
//! backfitting loop alternates a least-squares step for `β` on the partial
//! residual `y - Hα̂` and a kriging step `α̂ = Σ Hᵀ Σ_y⁻¹ (y - Xβ̂)`. Its fixed
//! point solves the mixed-model equations, so `β̂` equals the GLS estimate
//! `(XᵀΣ_y⁻¹X)⁻¹XᵀΣ_y⁻¹y` and `α̂` the corresponding kriging predictor.
//!
//! The `β` iteration is affine in a space of dimension `p`, so Anderson mixing
//! over the last `p + 1` iterates reaches the fixed point in a handful of
//! sweeps even when the smoother and the covariates overlap strongly.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{observation_covariance_with, CovarianceOperator, CovarianceParams, SpdFactor};
use crate::error::{Error, Result};
use crate::field_model::{IncidenceMap, Layer};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Acceleration {
    None,
    Anderson { depth: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackfitOptions {
    /// Sup-norm bound on the change of `(β̂, α̂)` between sweeps.
    pub tolerance: f64,
    pub max_iter: usize,
    pub acceleration: Acceleration,
}

impl Default for BackfitOptions {
    fn default() -> Self {
        BackfitOptions {
            tolerance: 1e-8,
            max_iter: 500,
            acceleration: Acceleration::Anderson { depth: 7 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEstimate {
    pub beta_hat: Vec<f64>,
    pub alpha_hat: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_delta: f64,
}

/// Everything about one layer that does not depend on the response: the
/// covariate design at observation locations, the incidence map, the process
/// covariance and the factorized observation covariance.
pub struct LayerModel {
    design: DMatrix<f64>,
    incidence: IncidenceMap,
    process: Arc<dyn CovarianceOperator + Send>,
    params: CovarianceParams,
    nuggets: Vec<f64>,
    obs_factor: SpdFactor,
    /// `Σ_y⁻¹ X`.
    sy_inv_x: DMatrix<f64>,
    /// Cholesky factor of `Xᵀ Σ_y⁻¹ X`, when `X` has full column rank.
    gls_gram: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl std::fmt::Debug for LayerModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LayerModel")
            .field("n", &self.design.nrows())
            .field("p", &self.design.ncols())
            .field("m", &self.incidence.cols())
            .field("params", &self.params)
            .finish()
    }
}

impl LayerModel {
    pub fn new(
        design: DMatrix<f64>,
        incidence: IncidenceMap,
        process: Arc<dyn CovarianceOperator + Send>,
        params: CovarianceParams,
    ) -> Result<Self> {
        let nuggets = vec![params.nugget; incidence.rows()];
        LayerModel::with_nuggets(design, incidence, process, params, nuggets)
    }

    /// Per-observation noise variances, used when rows come from several
    /// layers with different measurement noise.
    pub fn with_nuggets(
        design: DMatrix<f64>,
        incidence: IncidenceMap,
        process: Arc<dyn CovarianceOperator + Send>,
        params: CovarianceParams,
        nuggets: Vec<f64>,
    ) -> Result<Self> {
        if design.nrows() != incidence.rows() {
            return Err(Error::DimensionMismatch {
                context: "design rows vs incidence rows",
                expected: incidence.rows(),
                actual: design.nrows(),
            });
        }
        let sy = observation_covariance_with(&incidence, process.as_ref(), &nuggets)?;
        let obs_factor = SpdFactor::new(&sy)?;
        let sy_inv_x = obs_factor.solve_matrix(&design);
        let gram = design.transpose() * &sy_inv_x;
        let gls_gram = symmetric_cholesky(gram);
        Ok(LayerModel {
            design,
            incidence,
            process,
            params,
            nuggets,
            obs_factor,
            sy_inv_x,
            gls_gram,
        })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn incidence(&self) -> &IncidenceMap {
        &self.incidence
    }

    pub fn process(&self) -> &dyn CovarianceOperator {
        self.process.as_ref()
    }

    pub fn process_arc(&self) -> Arc<dyn CovarianceOperator + Send> {
        Arc::clone(&self.process)
    }

    pub fn params(&self) -> &CovarianceParams {
        &self.params
    }

    pub fn nuggets(&self) -> &[f64] {
        &self.nuggets
    }

    /// Factorization of `Σ_y = H Σ Hᵀ + diag(nuggets)`.
    pub fn obs_factor(&self) -> &SpdFactor {
        &self.obs_factor
    }

    pub fn sy_inv_x(&self) -> &DMatrix<f64> {
        &self.sy_inv_x
    }

    pub(crate) fn gls_gram(&self) -> Result<&nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        self.gls_gram.as_ref().ok_or(Error::Singular("XᵀΣ_y⁻¹X"))
    }

    pub fn n_obs(&self) -> usize {
        self.design.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.incidence.cols()
    }

    /// GLS estimate `(XᵀΣ_y⁻¹X)⁻¹XᵀΣ_y⁻¹y` using the cached factors.
    pub fn gls(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_len(y, "gls response")?;
        let rhs = self.sy_inv_x.transpose() * DVector::from_column_slice(y);
        Ok(self.gls_gram()?.solve(&rhs).iter().copied().collect())
    }

    /// Kriging step `Σ Hᵀ Σ_y⁻¹ r`.
    pub fn krige(&self, residual: &[f64]) -> Result<Vec<f64>> {
        self.check_len(residual, "kriging residual")?;
        let w = self.obs_factor.solve(residual);
        Ok(self.lift(&w))
    }

    /// `Σ Hᵀ w` for an observation-level vector `w`.
    pub(crate) fn lift(&self, w: &[f64]) -> Vec<f64> {
        self.process.mul_sparse(&aggregate_by_node(&self.incidence, w))
    }

    fn check_len(&self, v: &[f64], context: &'static str) -> Result<()> {
        if v.len() != self.n_obs() {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.n_obs(),
                actual: v.len(),
            });
        }
        Ok(())
    }

    /// Weighted least squares with weights `1/nugget` when the nuggets differ,
    /// plain least squares otherwise. This is GLS under the covariance of `y`
    /// given the spatial field.
    fn conditional_ls(&self, y: &[f64]) -> Result<Vec<f64>> {
        let homoscedastic = self.nuggets.windows(2).all(|w| w[0] == w[1]);
        let weights: Option<Vec<f64>> = if homoscedastic {
            None
        } else {
            Some(
                self.nuggets
                    .iter()
                    .map(|&s| if s > 0.0 { 1.0 / s } else { 0.0 })
                    .collect(),
            )
        };
        weighted_least_squares(&self.design, weights.as_deref(), y)
    }
}

/// `Hᵀ w` as a list of node contributions.
pub(crate) fn aggregate_by_node(h: &IncidenceMap, w: &[f64]) -> Vec<(usize, f64)> {
    let mut pairs: Vec<(usize, f64)> = h.nodes().iter().copied().zip(w.iter().copied()).collect();
    pairs.sort_by_key(|&(k, _)| k);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(pairs.len());
    for (k, v) in pairs {
        match out.last_mut() {
            Some(last) if last.0 == k => last.1 += v,
            _ => out.push((k, v)),
        }
    }
    out
}

fn symmetric_cholesky(a: DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let scale = a.diagonal().amax();
    if !(scale > 0.0) {
        return None;
    }
    let chol = a.cholesky()?;
    // Reject numerically singular systems rather than returning garbage.
    let d = chol.l_dirty().diagonal();
    let ratio = d.min() / d.max();
    (ratio * ratio > 1e-14).then_some(chol)
}

pub fn weighted_least_squares(x: &DMatrix<f64>, weights: Option<&[f64]>, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            context: "least-squares response",
            expected: x.nrows(),
            actual: y.len(),
        });
    }
    let mut wx = x.clone();
    let mut wy = DVector::from_column_slice(y);
    if let Some(w) = weights {
        for (r, &wr) in w.iter().enumerate() {
            wx.row_mut(r).scale_mut(wr);
            wy[r] *= wr;
        }
    }
    let gram = x.transpose() * &wx;
    let rhs = x.transpose() * wy;
    let chol = symmetric_cholesky(gram).ok_or(Error::Singular("least squares"))?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

/// `β̂ = (XᵀΣ_y⁻¹X)⁻¹XᵀΣ_y⁻¹y`, with `Σ_y` given by its factorization.
pub fn gls_beta(x: &DMatrix<f64>, sigma_y: &SpdFactor, y: &[f64]) -> Result<Vec<f64>> {
    if x.nrows() != sigma_y.dim() || y.len() != sigma_y.dim() {
        return Err(Error::DimensionMismatch {
            context: "gls_beta",
            expected: sigma_y.dim(),
            actual: if x.nrows() != sigma_y.dim() { x.nrows() } else { y.len() },
        });
    }
    let sx = sigma_y.solve_matrix(x);
    let gram = x.transpose() * &sx;
    let rhs = sx.transpose() * DVector::from_column_slice(y);
    let chol = symmetric_cholesky(gram).ok_or(Error::Singular("XᵀΣ_y⁻¹X"))?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

/// `α̂ = Σ Hᵀ Σ_y⁻¹ r`.
pub fn krige_alpha(
    sigma: &dyn CovarianceOperator,
    h: &IncidenceMap,
    sigma_y: &SpdFactor,
    residual: &[f64],
) -> Result<Vec<f64>> {
    if h.cols() != sigma.dim() {
        return Err(Error::DimensionMismatch {
            context: "krige_alpha process dimension",
            expected: sigma.dim(),
            actual: h.cols(),
        });
    }
    if h.rows() != sigma_y.dim() || residual.len() != sigma_y.dim() {
        return Err(Error::DimensionMismatch {
            context: "krige_alpha observation dimension",
            expected: sigma_y.dim(),
            actual: residual.len(),
        });
    }
    let w = sigma_y.solve(residual);
    Ok(sigma.mul_sparse(&aggregate_by_node(h, &w)))
}

struct Anderson {
    depth: usize,
    xs: VecDeque<Vec<f64>>,
    gs: VecDeque<Vec<f64>>,
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Anderson {
            depth,
            xs: VecDeque::new(),
            gs: VecDeque::new(),
        }
    }

    fn step(&mut self, x: &[f64], g: &[f64]) -> Vec<f64> {
        self.xs.push_back(x.to_vec());
        self.gs.push_back(g.to_vec());
        while self.xs.len() > self.depth + 1 {
            self.xs.pop_front();
            self.gs.pop_front();
        }
        let k = self.xs.len() - 1;
        if k == 0 {
            return g.to_vec();
        }
        let p = x.len();
        let f = |i: usize| -> DVector<f64> {
            DVector::from_iterator(p, self.gs[i].iter().zip(&self.xs[i]).map(|(a, b)| a - b))
        };
        let fk = f(k);
        let mut df = DMatrix::zeros(p, k);
        let mut dg = DMatrix::zeros(p, k);
        for i in 0..k {
            df.set_column(i, &(f(i + 1) - f(i)));
            let gi = DVector::from_column_slice(&self.gs[i]);
            let gn = DVector::from_column_slice(&self.gs[i + 1]);
            dg.set_column(i, &(gn - gi));
        }
        let svd = df.svd(true, true);
        let eps = 1e-12 * svd.singular_values.amax();
        let Ok(gamma) = svd.solve(&fk, eps) else {
            return g.to_vec();
        };
        let next = DVector::from_column_slice(g) - dg * gamma;
        if next.iter().all(|v| v.is_finite()) {
            next.iter().copied().collect()
        } else {
            self.xs.clear();
            self.gs.clear();
            g.to_vec()
        }
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Backfits one layer against `y - offset`.
pub fn backfit_layer(
    model: &LayerModel,
    y: &[f64],
    offset: &[f64],
    opts: &BackfitOptions,
) -> Result<LayerEstimate> {
    model.check_len(y, "backfit response")?;
    model.check_len(offset, "backfit offset")?;
    if !(opts.tolerance > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let target: Vec<f64> = y.iter().zip(offset).map(|(a, b)| a - b).collect();
    let x = model.design();
    let h = model.incidence();

    let mut beta = weighted_least_squares(x, None, &target)?;
    let mut alpha = vec![0.0; model.n_nodes()];
    let mut anderson = match opts.acceleration {
        Acceleration::Anderson { depth } if depth > 0 => Some(Anderson::new(depth)),
        _ => None,
    };

    let mut delta = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iter.max(1) {
        iterations += 1;
        let fitted = model.design_apply(&beta);
        let resid: Vec<f64> = target.iter().zip(&fitted).map(|(a, b)| a - b).collect();
        let alpha_new = model.krige(&resid)?;
        let h_alpha = h.apply(&alpha_new);
        let partial: Vec<f64> = target.iter().zip(&h_alpha).map(|(a, b)| a - b).collect();
        let g = model.conditional_ls(&partial)?;
        let beta_new = match anderson.as_mut() {
            Some(acc) => acc.step(&beta, &g),
            None => g,
        };
        delta = sup_diff(&beta_new, &beta).max(sup_diff(&alpha_new, &alpha));
        beta = beta_new;
        alpha = alpha_new;
        if delta <= opts.tolerance {
            break;
        }
    }
    Ok(LayerEstimate {
        beta_hat: beta,
        alpha_hat: alpha,
        iterations,
        converged: delta <= opts.tolerance,
        final_delta: delta,
    })
}

impl LayerModel {
    pub fn design_apply(&self, beta: &[f64]) -> Vec<f64> {
        (&self.design * DVector::from_column_slice(beta))
            .iter()
            .copied()
            .collect()
    }
}

/// Data and model for one layer of a sequential fit.
#[derive(Debug)]
pub struct LayerInput {
    pub layer: Layer,
    pub model: LayerModel,
    pub y: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequentialOptions {
    /// Carryover coefficient, in `[0, 1)`.
    pub c: f64,
    pub backfit: BackfitOptions,
    /// One extra pass that re-estimates each layer using the later layers'
    /// data as additional (down-weighted) observations of its field.
    pub outer_sweep: bool,
}

impl Default for SequentialOptions {
    fn default() -> Self {
        SequentialOptions {
            c: 0.5,
            backfit: BackfitOptions::default(),
            outer_sweep: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequentialFit {
    pub c: f64,
    pub layers: Vec<Layer>,
    pub estimates: Vec<LayerEstimate>,
    /// Carryover offsets `Σ_{k<t} c^{t-k} H_t α̂_k` used for each layer.
    pub offsets: Vec<Vec<f64>>,
    pub params: Vec<CovarianceParams>,
}

impl SequentialFit {
    pub fn position(&self, layer: Layer) -> Option<usize> {
        self.layers.iter().position(|&l| l == layer)
    }
}

fn carryover_weight(c: f64, later: Layer, earlier: Layer) -> f64 {
    c.powi(i32::from(later.index()) - i32::from(earlier.index()))
}

fn validate_inputs(inputs: &[LayerInput], c: f64) -> Result<()> {
    if !(0.0..1.0).contains(&c) {
        return Err(Error::InvalidArgument(format!("carryover c must lie in [0, 1), got {c}")));
    }
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no layers to fit".into()));
    }
    if inputs.windows(2).any(|w| w[0].layer >= w[1].layer) {
        return Err(Error::InvalidArgument("layers must be in increasing order".into()));
    }
    let m = inputs[0].model.n_nodes();
    if let Some(bad) = inputs.iter().find(|i| i.model.n_nodes() != m) {
        return Err(Error::DimensionMismatch {
            context: "layers must share one process grid",
            expected: m,
            actual: bad.model.n_nodes(),
        });
    }
    Ok(())
}

fn offset_for(inputs: &[LayerInput], estimates: &[LayerEstimate], t: usize, c: f64, skip: Option<usize>) -> Vec<f64> {
    let input = &inputs[t];
    let mut offset = vec![0.0; input.model.n_obs()];
    for (k, est) in estimates.iter().enumerate().take(t) {
        if Some(k) == skip {
            continue;
        }
        let w = carryover_weight(c, input.layer, inputs[k].layer);
        if w == 0.0 {
            continue;
        }
        for (o, &node) in offset.iter_mut().zip(input.model.incidence().nodes()) {
            *o += w * est.alpha_hat[node];
        }
    }
    offset
}

/// Forward-conditioned sequential backfitting: layer `t` is fitted with the
/// earlier layers' fields as a fixed carryover offset.
pub fn sequential_backfit(inputs: &[LayerInput], opts: &SequentialOptions) -> Result<SequentialFit> {
    validate_inputs(inputs, opts.c)?;
    let mut estimates: Vec<LayerEstimate> = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let offset = offset_for(inputs, &estimates, t, opts.c, None);
        let est = backfit_layer(&inputs[t].model, &inputs[t].y, &offset, &opts.backfit)
            .map_err(|e| e.in_layer(inputs[t].layer.index()))?;
        estimates.push(est);
    }
    if opts.outer_sweep {
        outer_sweep(inputs, &mut estimates, opts)?;
    }
    let offsets = (0..inputs.len())
        .map(|t| offset_for(inputs, &estimates, t, opts.c, None))
        .collect();
    Ok(SequentialFit {
        c: opts.c,
        layers: inputs.iter().map(|i| i.layer).collect(),
        estimates,
        offsets,
        params: inputs.iter().map(|i| *i.model.params()).collect(),
    })
}

/// One block Gauss-Seidel pass over the joint model: layer `t` is refitted
/// from its own rows plus the later layers' partial residuals, which observe
/// `c^{s-t} α_t` and are rescaled accordingly.
fn outer_sweep(inputs: &[LayerInput], estimates: &mut [LayerEstimate], opts: &SequentialOptions) -> Result<()> {
    let c = opts.c;
    for t in 0..inputs.len() {
        let own = &inputs[t];
        let offset = offset_for(inputs, estimates, t, c, None);
        let mut rows_y: Vec<f64> = own.y.iter().zip(&offset).map(|(a, b)| a - b).collect();
        let mut nuggets = own.model.nuggets().to_vec();
        let mut maps = vec![own.model.incidence().clone()];
        let p = own.model.design().ncols();
        let mut design_rows = vec![own.model.design().clone()];

        if c > 0.0 {
            for s in t + 1..inputs.len() {
                let later = &inputs[s];
                let w = carryover_weight(c, later.layer, own.layer);
                let mut resid: Vec<f64> = later
                    .y
                    .iter()
                    .zip(later.model.design_apply(&estimates[s].beta_hat))
                    .map(|(a, b)| a - b)
                    .collect();
                let other = offset_for(inputs, estimates, s, c, Some(t));
                for ((r, o), &node) in resid.iter_mut().zip(&other).zip(later.model.incidence().nodes()) {
                    *r = (*r - o - estimates[s].alpha_hat[node]) / w;
                }
                rows_y.extend(resid);
                nuggets.extend(later.model.nuggets().iter().map(|v| v / (w * w)));
                maps.push(later.model.incidence().clone());
                design_rows.push(DMatrix::zeros(later.model.n_obs(), p));
            }
        }

        let n_total = rows_y.len();
        let mut design = DMatrix::zeros(n_total, p);
        let mut r0 = 0;
        for block in &design_rows {
            design.rows_mut(r0, block.nrows()).copy_from(block);
            r0 += block.nrows();
        }
        let refs: Vec<&IncidenceMap> = maps.iter().collect();
        let stacked = LayerModel::with_nuggets(
            design,
            IncidenceMap::stack(&refs)?,
            own.model.process_arc(),
            *own.model.params(),
            nuggets,
        )
        .map_err(|e| e.in_layer(own.layer.index()))?;
        estimates[t] = backfit_layer(&stacked, &rows_y, &vec![0.0; n_total], &opts.backfit)
            .map_err(|e| e.in_layer(own.layer.index()))?;
    }
    Ok(())
}

/// Summed squared observation residuals `Σ_t ‖y_t - X_tβ̂_t - Σ_k c^{t-k}H_tα̂_k‖²`.
pub fn observation_rss(inputs: &[LayerInput], fit: &SequentialFit) -> f64 {
    inputs
        .iter()
        .enumerate()
        .map(|(t, input)| {
            let xb = input.model.design_apply(&fit.estimates[t].beta_hat);
            let ha = input.model.incidence().apply(&fit.estimates[t].alpha_hat);
            input
                .y
                .iter()
                .zip(&xb)
                .zip(&ha)
                .zip(&fit.offsets[t])
                .map(|(((y, a), b), o)| (y - a - b - o).powi(2))
                .sum::<f64>()
        })
        .sum()
}

/// Fits every candidate `c` and keeps the one with the smallest observation
/// residual sum of squares. Returns the best fit and the `(c, rss)` profile.
pub fn profile_carryover(
    inputs: &[LayerInput],
    candidates: &[f64],
    opts: &SequentialOptions,
) -> Result<(SequentialFit, Vec<(f64, f64)>)> {
    let mut best: Option<(SequentialFit, f64)> = None;
    let mut profile = Vec::with_capacity(candidates.len());
    for &c in candidates {
        let fit = sequential_backfit(inputs, &SequentialOptions { c, ..*opts })?;
        let rss = observation_rss(inputs, &fit);
        profile.push((c, rss));
        if best.as_ref().is_none_or(|(_, r)| rss < *r) {
            best = Some((fit, rss));
        }
    }
    let (fit, _) = best.ok_or_else(|| Error::InvalidArgument("no carryover candidates".into()))?;
    Ok((fit, profile))
}

/// `{0.0, 0.1, …, 0.9}`.
pub fn default_carryover_grid() -> Vec<f64> {
    (0..10).map(|i| f64::from(i) / 10.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::GridCovariance;
    use crate::field_model::{build_grid, build_incidence_points, design_row, ProcessGrid, ScalingSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Problem {
        grid: ProcessGrid,
        model: LayerModel,
        y: Vec<f64>,
    }

    fn problem(seed: u64, n: usize, params: CovarianceParams) -> Problem {
        let grid = build_grid(0.0, 9.0, 0.0, 4.0, 1.0, 1.0).unwrap();
        let scaling = ScalingSpec::from_grid(&grid);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(0.0..9.0), rng.random_range(0.0..4.0)))
            .collect();
        let h = build_incidence_points(&pts, &grid).unwrap();
        let mut x = DMatrix::zeros(n, 6);
        for (r, &(px, py)) in pts.iter().enumerate() {
            let dir = (r % 2) as f64;
            x.row_mut(r).copy_from_slice(&design_row(px, py, dir, &scaling));
        }
        let cov = GridCovariance::new(&grid, &params, &scaling).unwrap();
        let y = (0..n).map(|r| 3.0 + x[(r, 1)] + rng.random_range(-2.0..2.0)).collect();
        let model = LayerModel::new(x, h, Arc::new(cov), params).unwrap();
        Problem { grid, model, y }
    }

    fn dense_oracle(p: &Problem, y: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let cov = GridCovariance::new(&p.grid, p.model.params(), &ScalingSpec::from_grid(&p.grid)).unwrap();
        let sigma = cov.to_sparse().to_dense();
        let h = p.model.incidence().to_dense();
        let n = h.nrows();
        let sy = &h * &sigma * h.transpose() + DMatrix::identity(n, n) * p.model.params().nugget;
        let sy_inv = sy.try_inverse().unwrap();
        let x = p.model.design();
        let yv = DVector::from_column_slice(y);
        let beta = (x.transpose() * &sy_inv * x).try_inverse().unwrap() * x.transpose() * &sy_inv * &yv;
        let alpha = &sigma * h.transpose() * &sy_inv * (yv - x * &beta);
        (beta, alpha)
    }

    fn params() -> CovarianceParams {
        CovarianceParams::new(0.8, 2.0, 0.5).unwrap()
    }

    #[test]
    fn fixed_point_matches_joint_gls_and_kriging() {
        let p = problem(1, 60, params());
        let est = backfit_layer(&p.model, &p.y, &vec![0.0; 60], &BackfitOptions::default()).unwrap();
        assert!(est.converged);
        let (beta, alpha) = dense_oracle(&p, &p.y);
        for (a, b) in est.beta_hat.iter().zip(beta.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        for (a, b) in est.alpha_hat.iter().zip(alpha.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let gls = gls_beta(p.model.design(), p.model.obs_factor(), &p.y).unwrap();
        for (a, b) in gls.iter().zip(beta.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn plain_iteration_reaches_the_same_point() {
        let p = problem(2, 50, CovarianceParams::new(0.5, 1.0, 1.0).unwrap());
        let opts = BackfitOptions {
            tolerance: 1e-10,
            max_iter: 20_000,
            acceleration: Acceleration::None,
        };
        let plain = backfit_layer(&p.model, &p.y, &vec![0.0; 50], &opts).unwrap();
        assert!(plain.converged);
        let (beta, _) = dense_oracle(&p, &p.y);
        for (a, b) in plain.beta_hat.iter().zip(beta.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let fast = backfit_layer(&p.model, &p.y, &vec![0.0; 50], &BackfitOptions::default()).unwrap();
        assert!(fast.iterations <= plain.iterations);
    }

    #[test]
    fn offset_is_subtracted() {
        let p = problem(3, 40, params());
        let offset: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).sin()).collect();
        let shifted: Vec<f64> = p.y.iter().zip(&offset).map(|(a, b)| a - b).collect();
        let opts = BackfitOptions::default();
        let a = backfit_layer(&p.model, &p.y, &offset, &opts).unwrap();
        let b = backfit_layer(&p.model, &shifted, &vec![0.0; 40], &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pure_trend_with_negligible_field_stops_early() {
        let p = problem(4, 40, CovarianceParams::new(0.8, 1e-12, 1.0).unwrap());
        let beta0 = [1.0, -2.0, 0.5, 0.1, 0.0, 0.3];
        let y = p.model.design_apply(&beta0);
        let est = backfit_layer(&p.model, &y, &vec![0.0; 40], &BackfitOptions::default()).unwrap();
        assert!(est.converged && est.iterations <= 2);
        for (a, b) in est.beta_hat.iter().zip(beta0) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn kriging_matches_dense_formula() {
        let p = problem(5, 30, params());
        let r: Vec<f64> = (0..30).map(|i| (i as f64).cos()).collect();
        let got = krige_alpha(p.model.process(), p.model.incidence(), p.model.obs_factor(), &r).unwrap();
        assert_eq!(got, p.model.krige(&r).unwrap());
        assert!(krige_alpha(p.model.process(), p.model.incidence(), p.model.obs_factor(), &r[..5]).is_err());
    }

    #[test]
    fn rank_deficient_design_is_reported() {
        let p = problem(6, 30, params());
        let mut x = p.model.design().clone();
        let col = x.column(1).clone_owned();
        x.set_column(2, &col);
        assert!(matches!(weighted_least_squares(&x, None, &p.y), Err(Error::Singular(_))));
    }

    fn two_layers(c_true: f64) -> Vec<LayerInput> {
        let a = problem(7, 50, params());
        let b = problem(8, 50, params());
        let carried: Vec<f64> = b.model.incidence().nodes().iter().map(|&k| (k as f64 * 0.2).sin()).collect();
        let y_b = b.y.iter().zip(&carried).map(|(y, v)| y + c_true * v).collect();
        vec![
            LayerInput { layer: Layer::Subsurface, model: a.model, y: a.y },
            LayerInput { layer: Layer::Subgrade, model: b.model, y: y_b },
        ]
    }

    #[test]
    fn zero_carryover_fits_layers_independently() {
        let inputs = two_layers(0.0);
        let opts = SequentialOptions { c: 0.0, ..Default::default() };
        let fit = sequential_backfit(&inputs, &opts).unwrap();
        for (t, input) in inputs.iter().enumerate() {
            let solo = backfit_layer(&input.model, &input.y, &vec![0.0; 50], &opts.backfit).unwrap();
            assert_eq!(fit.estimates[t], solo);
            assert!(fit.offsets[t].iter().all(|&o| o == 0.0));
        }
        let swept = sequential_backfit(&inputs, &SequentialOptions { outer_sweep: true, ..opts }).unwrap();
        for t in 0..2 {
            for (a, b) in swept.estimates[t].beta_hat.iter().zip(&fit.estimates[t].beta_hat) {
                assert!((a - b).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn second_layer_uses_first_layer_field_as_offset() {
        let inputs = two_layers(0.5);
        let fit = sequential_backfit(&inputs, &SequentialOptions::default()).unwrap();
        let expected: Vec<f64> = inputs[1]
            .model
            .incidence()
            .nodes()
            .iter()
            .map(|&k| 0.5 * fit.estimates[0].alpha_hat[k])
            .collect();
        assert_eq!(fit.offsets[1], expected);
        let direct = backfit_layer(&inputs[1].model, &inputs[1].y, &expected, &BackfitOptions::default()).unwrap();
        assert_eq!(direct, fit.estimates[1]);
    }

    #[test]
    fn invalid_sequential_inputs() {
        let mut inputs = two_layers(0.0);
        assert!(sequential_backfit(&inputs, &SequentialOptions { c: 1.0, ..Default::default() }).is_err());
        assert!(sequential_backfit(&[], &SequentialOptions::default()).is_err());
        inputs.swap(0, 1);
        assert!(sequential_backfit(&inputs, &SequentialOptions::default()).is_err());
    }

    #[test]
    fn profile_returns_smallest_rss() {
        let inputs = two_layers(0.4);
        let grid = default_carryover_grid();
        let (fit, profile) = profile_carryover(&inputs, &grid, &SequentialOptions::default()).unwrap();
        assert_eq!(profile.len(), 10);
        let min = profile.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        assert_eq!(observation_rss(&inputs, &fit), min);
    }

    #[test]
    fn anderson_solves_affine_map_quickly() {
        let mut acc = Anderson::new(3);
        let map = |x: &[f64]| vec![0.9 * x[0] + 0.05 * x[1] + 1.0, -0.2 * x[0] + 0.95 * x[1] - 0.5];
        let mut x = vec![0.0, 0.0];
        for _ in 0..5 {
            let g = map(&x);
            x = acc.step(&x, &g);
        }
        let fixed = map(&x);
        assert!(sup_diff(&fixed, &x) < 1e-9);
    }
}
