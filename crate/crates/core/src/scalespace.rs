//! Multiresolution scale-space analysis of posterior field samples.
//!
//! Each sample `z` is smoothed at several levels, `S_λ z = (I + λQ)⁻¹ z` with
//! `Q` the 4-neighbour grid Laplacian and `S_∞ z` the global mean. Features are
//! read off either from the sign of each smooth or from the differences of
//! consecutive smooths, and a node is credibly positive or negative when that
//! sign is stable across the posterior samples.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::covariance::{SparseSymMatrix, SpdFactor};
use crate::error::{Error, Result};
use crate::field_model::{Layer, ProcessGrid};
use crate::posterior::FieldImage;

/// Smoothing level, in grid-cell units.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub enum Lambda {
    Finite(f64),
    Infinite,
}

impl Lambda {
    pub fn is_infinite(self) -> bool {
        matches!(self, Lambda::Infinite)
    }
}

impl fmt::Display for Lambda {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lambda::Finite(v) => write!(f, "{v}"),
            Lambda::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Lambda {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if matches!(t.to_ascii_lowercase().as_str(), "inf" | "infinity" | "∞") {
            return Ok(Lambda::Infinite);
        }
        let v: f64 = t
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("invalid smoothing level {s:?}")))?;
        if v.is_infinite() && v > 0.0 {
            Ok(Lambda::Infinite)
        } else if v.is_finite() && v >= 0.0 {
            Ok(Lambda::Finite(v))
        } else {
            Err(Error::InvalidArgument(format!("smoothing level must be >= 0, got {s:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Sign of `S_λ z`.
    #[default]
    SmoothSign,
    /// Sign of `S_{λ_i} z − S_{λ_{i+1}} z`.
    Detail,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::SmoothSign => "smooth_sign",
            Mode::Detail => "detail",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "smooth_sign" => Ok(Mode::SmoothSign),
            "detail" => Ok(Mode::Detail),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode {other:?} (expected smooth_sign or detail)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmootherSpec {
    pub lambdas: Vec<Lambda>,
    pub level: f64,
    pub mode: Mode,
    /// Joint credibility over all nodes of a map instead of per node.
    pub simultaneous: bool,
}

impl Default for SmootherSpec {
    fn default() -> Self {
        SmootherSpec {
            lambdas: default_lambdas(),
            level: 0.95,
            mode: Mode::SmoothSign,
            simultaneous: false,
        }
    }
}

pub fn default_lambdas() -> Vec<Lambda> {
    vec![
        Lambda::Finite(8.0),
        Lambda::Finite(16.0),
        Lambda::Finite(1000.0),
        Lambda::Infinite,
    ]
}

impl SmootherSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(Error::InvalidArgument("at least one smoothing level is required".into()));
        }
        for l in &self.lambdas {
            if let Lambda::Finite(v) = l {
                if !(v.is_finite() && *v >= 0.0) {
                    return Err(Error::InvalidArgument(format!("smoothing level must be >= 0, got {v}")));
                }
            }
        }
        if self.lambdas.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument("smoothing levels must be strictly increasing".into()));
        }
        if !(self.level > 0.5 && self.level < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "credibility level must lie in (0.5, 1), got {}",
                self.level
            )));
        }
        Ok(())
    }
}

/// `Q = D − A` for the 4-neighbour adjacency of the grid.
pub fn build_penalty(grid: &ProcessGrid) -> SparseSymMatrix {
    let (nx, ny) = (grid.nx, grid.ny);
    let rows = (0..grid.len())
        .map(|k| {
            let (i, j) = grid.ij(k);
            let mut row = Vec::with_capacity(5);
            let mut deg = 0.0;
            let mut link = |l: usize| {
                row.push((l, -1.0));
                deg += 1.0;
            };
            if i > 0 {
                link(k - 1);
            }
            if i + 1 < nx {
                link(k + 1);
            }
            if j > 0 {
                link(k - nx);
            }
            if j + 1 < ny {
                link(k + nx);
            }
            row.push((k, deg));
            row
        })
        .collect();
    SparseSymMatrix::from_rows(grid.len(), rows).expect("Laplacian is symmetric")
}

/// Factorizations of `I + λQ` for a fixed grid and list of levels, shared
/// read-only across samples.
#[derive(Debug)]
pub struct SmootherBank {
    grid: ProcessGrid,
    lambdas: Vec<Lambda>,
    factors: Vec<Option<SpdFactor>>,
}

impl SmootherBank {
    pub fn new(grid: &ProcessGrid, lambdas: &[Lambda]) -> Result<Self> {
        let q = build_penalty(grid);
        let factors = lambdas
            .iter()
            .map(|&l| match l {
                Lambda::Finite(v) if v > 0.0 => {
                    let a = q.scaled(v).add_diagonal(&vec![1.0; grid.len()])?;
                    SpdFactor::new(&a).map(Some)
                }
                Lambda::Finite(v) if v == 0.0 => Ok(None),
                Lambda::Infinite => Ok(None),
                Lambda::Finite(v) => Err(Error::InvalidArgument(format!("smoothing level must be >= 0, got {v}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SmootherBank {
            grid: *grid,
            lambdas: lambdas.to_vec(),
            factors,
        })
    }

    pub fn grid(&self) -> &ProcessGrid {
        &self.grid
    }

    pub fn lambdas(&self) -> &[Lambda] {
        &self.lambdas
    }

    /// `S_λ z` for the level at `index`. The mean is removed before solving
    /// and added back, which keeps constants exact.
    pub fn smooth_values(&self, z: &[f64], index: usize) -> Vec<f64> {
        assert_eq!(z.len(), self.grid.len(), "field length");
        let mean = mean(z);
        self.smooth_centered(z, mean, index)
    }

    fn smooth_centered(&self, z: &[f64], mean: f64, index: usize) -> Vec<f64> {
        match (&self.lambdas[index], &self.factors[index]) {
            (Lambda::Infinite, _) => vec![mean; z.len()],
            (_, None) => z.to_vec(),
            (_, Some(f)) => {
                let centered: Vec<f64> = z.iter().map(|v| v - mean).collect();
                f.solve(&centered).into_iter().map(|v| v + mean).collect()
            }
        }
    }

    pub fn decompose(&self, z: &[f64]) -> DetailStack {
        assert_eq!(z.len(), self.grid.len(), "field length");
        let mean = mean(z);
        DetailStack {
            lambdas: self.lambdas.clone(),
            smooths: (0..self.lambdas.len()).map(|i| self.smooth_centered(z, mean, i)).collect(),
            mean,
        }
    }
}

fn mean(z: &[f64]) -> f64 {
    if z.is_empty() {
        0.0
    } else {
        z.iter().sum::<f64>() / z.len() as f64
    }
}

/// `S_λ z` as a new image; the threshold flag is carried over.
pub fn smooth(z: &FieldImage, lambda: Lambda) -> Result<FieldImage> {
    let bank = SmootherBank::new(&z.grid, &[lambda])?;
    Ok(FieldImage {
        values: bank.smooth_values(&z.values, 0),
        ..z.clone()
    })
}

/// All smooths of one field plus its mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetailStack {
    pub lambdas: Vec<Lambda>,
    pub smooths: Vec<Vec<f64>>,
    pub mean: f64,
}

impl DetailStack {
    /// Component read at level `index`: the smooth itself in smooth-sign
    /// mode, otherwise the detail band ending at that level. The last band
    /// is `S_∞ z` when the last level is infinite and `S_{λ_k} z − S_∞ z`
    /// otherwise, in which case the mean is left over as a separate part.
    pub fn component(&self, index: usize, mode: Mode) -> Vec<f64> {
        let s = &self.smooths[index];
        match mode {
            Mode::SmoothSign => s.clone(),
            Mode::Detail => {
                if index + 1 < self.smooths.len() {
                    s.iter().zip(&self.smooths[index + 1]).map(|(a, b)| a - b).collect()
                } else if self.lambdas[index].is_infinite() {
                    s.clone()
                } else {
                    s.iter().map(|a| a - self.mean).collect()
                }
            }
        }
    }

    /// Detail bands for every level.
    pub fn details(&self) -> Vec<Vec<f64>> {
        (0..self.smooths.len()).map(|i| self.component(i, Mode::Detail)).collect()
    }

    /// Whether the detail bands leave a separate mean part.
    pub fn has_separate_mean(&self) -> bool {
        !self.lambdas.last().is_some_and(|l| l.is_infinite())
    }
}

/// `decompose` for a single image.
pub fn decompose(z: &FieldImage, spec: &SmootherSpec) -> Result<DetailStack> {
    spec.validate()?;
    Ok(SmootherBank::new(&z.grid, &spec.lambdas)?.decompose(&z.values))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CredState {
    CredNegative,
    Undecided,
    CredPositive,
}

impl CredState {
    pub fn code(self) -> i8 {
        match self {
            CredState::CredNegative => -1,
            CredState::Undecided => 0,
            CredState::CredPositive => 1,
        }
    }

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            -1 => Some(CredState::CredNegative),
            0 => Some(CredState::Undecided),
            1 => Some(CredState::CredPositive),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CredibilityMap {
    pub grid: ProcessGrid,
    pub layer: Option<Layer>,
    pub lambda: Lambda,
    pub mode: Mode,
    pub level: f64,
    pub simultaneous: bool,
    pub states: Vec<CredState>,
}

impl CredibilityMap {
    pub fn count(&self, state: CredState) -> usize {
        self.states.iter().filter(|&&s| s == state).count()
    }

    pub fn codes(&self) -> Vec<f64> {
        self.states.iter().map(|s| f64::from(s.code())).collect()
    }
}

/// Values within this fraction of the component's largest magnitude count
/// as exactly zero, so that rounding noise on flat components has no sign.
const ZERO_BAND: f64 = 1e-12;

fn zero_band(v: &[f64]) -> f64 {
    ZERO_BAND * v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Per-node sign counts of one component across samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SignCounter {
    pos: Vec<u32>,
    neg: Vec<u32>,
    samples: u32,
}

impl SignCounter {
    pub fn new(n: usize) -> Self {
        SignCounter {
            pos: vec![0; n],
            neg: vec![0; n],
            samples: 0,
        }
    }

    pub fn add(&mut self, component: &[f64]) {
        assert_eq!(component.len(), self.pos.len(), "component length");
        let eps = zero_band(component);
        for ((p, n), &v) in self.pos.iter_mut().zip(self.neg.iter_mut()).zip(component) {
            if v > eps {
                *p += 1;
            } else if v < -eps {
                *n += 1;
            }
        }
        self.samples += 1;
    }

    pub fn merge(&mut self, other: &SignCounter) {
        for (a, b) in self.pos.iter_mut().zip(&other.pos) {
            *a += b;
        }
        for (a, b) in self.neg.iter_mut().zip(&other.neg) {
            *a += b;
        }
        self.samples += other.samples;
    }

    pub fn samples(&self) -> usize {
        self.samples as usize
    }

    /// Fraction of samples with a positive component, per node.
    pub fn positive_fraction(&self) -> Vec<f64> {
        let n = f64::from(self.samples.max(1));
        self.pos.iter().map(|&p| f64::from(p) / n).collect()
    }

    pub fn states(&self, level: f64) -> Vec<CredState> {
        let n = f64::from(self.samples.max(1));
        self.pos
            .iter()
            .zip(&self.neg)
            .map(|(&p, &q)| {
                if f64::from(p) / n >= level {
                    CredState::CredPositive
                } else if f64::from(q) / n >= level {
                    CredState::CredNegative
                } else {
                    CredState::Undecided
                }
            })
            .collect()
    }
}

/// Running per-node mean and variance.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentAccumulator {
    mean: Vec<f64>,
    m2: Vec<f64>,
    samples: u64,
}

impl MomentAccumulator {
    pub fn new(n: usize) -> Self {
        MomentAccumulator {
            mean: vec![0.0; n],
            m2: vec![0.0; n],
            samples: 0,
        }
    }

    pub fn add(&mut self, v: &[f64]) {
        self.samples += 1;
        let k = self.samples as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(v) {
            let d = x - *m;
            *m += d / k;
            *s += d * (x - *m);
        }
    }

    pub fn merge(&mut self, other: &MomentAccumulator) {
        if other.samples == 0 {
            return;
        }
        let (na, nb) = (self.samples as f64, other.samples as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * nb / n;
            self.m2[i] += other.m2[i] + d * d * na * nb / n;
        }
        self.samples += other.samples;
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sd(&self) -> Vec<f64> {
        let d = (self.samples.max(2) - 1) as f64;
        self.m2.iter().map(|s| (s / d).sqrt()).collect()
    }

    pub fn samples(&self) -> usize {
        self.samples as usize
    }
}

/// Largest standardized deviation `max_k |z_k − mean_k| / sd_k` of one sample.
pub fn max_standardized_deviation(v: &[f64], mean: &[f64], sd: &[f64]) -> f64 {
    let floor = zero_band(sd);
    v.iter()
        .zip(mean)
        .zip(sd)
        .filter(|(_, &s)| s > floor)
        .map(|((x, m), s)| (x - m).abs() / s)
        .fold(0.0, f64::max)
}

/// Simultaneous states: with `q` the `level` quantile of the per-sample
/// maximal standardized deviations, a node is credible when the band
/// `mean ± q·sd` excludes zero. Such bands hold jointly for a `level`
/// fraction of the samples.
pub fn simultaneous_states(mean: &[f64], sd: &[f64], max_devs: &[f64], level: f64) -> Vec<CredState> {
    let mut sorted = max_devs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = if sorted.is_empty() {
        f64::INFINITY
    } else {
        let idx = ((level * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
        sorted[idx]
    };
    let eps = zero_band(mean);
    mean.iter()
        .zip(sd)
        .map(|(&m, &s)| {
            let half = q * s;
            if m - half > eps {
                CredState::CredPositive
            } else if m + half < -eps {
                CredState::CredNegative
            } else {
                CredState::Undecided
            }
        })
        .collect()
}

fn check_stacks(samples: &[DetailStack], index: usize) -> Result<()> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("credibility needs at least 2 samples".into()));
    }
    let first = &samples[0];
    if index >= first.lambdas.len() {
        return Err(Error::InvalidArgument(format!("no smoothing level at index {index}")));
    }
    for s in samples {
        if s.lambdas != first.lambdas {
            return Err(Error::InvalidArgument("samples use different smoothing levels".into()));
        }
        if s.smooths[0].len() != first.smooths[0].len() {
            return Err(Error::DimensionMismatch {
                context: "sample grid size",
                expected: first.smooths[0].len(),
                actual: s.smooths[0].len(),
            });
        }
    }
    Ok(())
}

/// Credibility map for the level at `index` from in-memory stacks.
pub fn credibility(
    grid: &ProcessGrid,
    samples: &[DetailStack],
    index: usize,
    level: f64,
    mode: Mode,
    simultaneous: bool,
) -> Result<CredibilityMap> {
    check_stacks(samples, index)?;
    if samples[0].smooths[0].len() != grid.len() {
        return Err(Error::DimensionMismatch {
            context: "sample grid size",
            expected: grid.len(),
            actual: samples[0].smooths[0].len(),
        });
    }
    let n = grid.len();
    let states = if simultaneous {
        let mut moments = MomentAccumulator::new(n);
        for s in samples {
            moments.add(&s.component(index, mode));
        }
        let sd = moments.sd();
        let devs: Vec<f64> = samples
            .iter()
            .map(|s| max_standardized_deviation(&s.component(index, mode), moments.mean(), &sd))
            .collect();
        simultaneous_states(moments.mean(), &sd, &devs, level)
    } else {
        let mut counter = SignCounter::new(n);
        for s in samples {
            counter.add(&s.component(index, mode));
        }
        counter.states(level)
    };
    Ok(CredibilityMap {
        grid: *grid,
        layer: None,
        lambda: samples[0].lambdas[index],
        mode,
        level,
        simultaneous,
        states,
    })
}

/// Streaming accumulator for every (layer, level) map of one analysis.
/// Pointwise maps need one pass over the samples; simultaneous maps need a
/// second pass over the same samples after [`ScaleSpaceAccumulator::begin_second_pass`].
#[derive(Clone, Debug)]
pub struct ScaleSpaceAccumulator {
    grid: ProcessGrid,
    layers: Vec<Layer>,
    spec: SmootherSpec,
    counters: Vec<SignCounter>,
    moments: Vec<MomentAccumulator>,
    /// Per map, `(sample index, max deviation)`.
    deviations: Vec<Vec<(u64, f64)>>,
    second_pass: bool,
}

impl ScaleSpaceAccumulator {
    pub fn new(grid: &ProcessGrid, layers: &[Layer], spec: &SmootherSpec) -> Result<Self> {
        spec.validate()?;
        let maps = layers.len() * spec.lambdas.len();
        Ok(ScaleSpaceAccumulator {
            grid: *grid,
            layers: layers.to_vec(),
            spec: spec.clone(),
            counters: vec![SignCounter::new(grid.len()); maps],
            moments: vec![MomentAccumulator::new(grid.len()); maps],
            deviations: vec![Vec::new(); maps],
            second_pass: false,
        })
    }

    pub fn needs_second_pass(&self) -> bool {
        self.spec.simultaneous && !self.second_pass
    }

    pub fn begin_second_pass(&mut self) {
        self.second_pass = true;
    }

    /// Adds one sample's stacks, one per layer in the accumulator's order.
    pub fn add(&mut self, index: u64, stacks: &[DetailStack]) {
        assert_eq!(stacks.len(), self.layers.len(), "one stack per layer");
        let nl = self.spec.lambdas.len();
        for (t, stack) in stacks.iter().enumerate() {
            for i in 0..nl {
                let comp = stack.component(i, self.spec.mode);
                let slot = t * nl + i;
                if !self.spec.simultaneous {
                    self.counters[slot].add(&comp);
                } else if !self.second_pass {
                    self.moments[slot].add(&comp);
                } else {
                    let sd = self.moments[slot].sd();
                    let d = max_standardized_deviation(&comp, self.moments[slot].mean(), &sd);
                    self.deviations[slot].push((index, d));
                }
            }
        }
    }

    /// Combines with an accumulator that saw a disjoint set of samples.
    /// Merging moment sums is exact up to rounding, so parallel first passes
    /// should merge in a fixed order.
    pub fn merge(&mut self, other: ScaleSpaceAccumulator) {
        for (a, b) in self.counters.iter_mut().zip(&other.counters) {
            a.merge(b);
        }
        if !self.second_pass {
            for (a, b) in self.moments.iter_mut().zip(&other.moments) {
                a.merge(b);
            }
        }
        for (a, b) in self.deviations.iter_mut().zip(other.deviations) {
            a.extend(b);
        }
    }

    /// An empty copy sharing the first-pass moments, for parallel second passes.
    pub fn fork(&self) -> Self {
        ScaleSpaceAccumulator {
            counters: vec![SignCounter::new(self.grid.len()); self.counters.len()],
            deviations: vec![Vec::new(); self.deviations.len()],
            moments: if self.second_pass {
                self.moments.clone()
            } else {
                vec![MomentAccumulator::new(self.grid.len()); self.moments.len()]
            },
            ..self.clone()
        }
    }

    pub fn finish(mut self) -> Vec<CredibilityMap> {
        let nl = self.spec.lambdas.len();
        let mut out = Vec::with_capacity(self.counters.len());
        for (t, &layer) in self.layers.iter().enumerate() {
            for i in 0..nl {
                let slot = t * nl + i;
                let states = if self.spec.simultaneous {
                    self.deviations[slot].sort_by_key(|d| d.0);
                    let devs: Vec<f64> = self.deviations[slot].iter().map(|d| d.1).collect();
                    let m = &self.moments[slot];
                    simultaneous_states(m.mean(), &m.sd(), &devs, self.spec.level)
                } else {
                    self.counters[slot].states(self.spec.level)
                };
                out.push(CredibilityMap {
                    grid: self.grid,
                    layer: Some(layer),
                    lambda: self.spec.lambdas[i],
                    mode: self.spec.mode,
                    level: self.spec.level,
                    simultaneous: self.spec.simultaneous,
                    states,
                });
            }
        }
        out
    }
}

/// Credibility maps for every layer and level, ordered layer-major.
/// `samples[s][t]` is sample `s` of the layer at position `t`.
pub fn analyze(samples: &[Vec<FieldImage>], spec: &SmootherSpec, allow_unthresholded: bool) -> Result<Vec<CredibilityMap>> {
    spec.validate()?;
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("scale-space analysis needs at least 2 samples".into()));
    }
    let first = &samples[0];
    if first.is_empty() {
        return Err(Error::InvalidArgument("samples contain no layers".into()));
    }
    let grid = first[0].grid;
    let layers: Vec<Layer> = first.iter().map(|img| img.layer).collect();
    for sample in samples {
        if sample.len() != layers.len() {
            return Err(Error::DimensionMismatch {
                context: "layers per sample",
                expected: layers.len(),
                actual: sample.len(),
            });
        }
        for (img, &layer) in sample.iter().zip(&layers) {
            if img.layer != layer || img.grid != grid {
                return Err(Error::InvalidArgument("samples disagree on layer order or grid".into()));
            }
            if !allow_unthresholded && !img.is_thresholded() {
                return Err(Error::NotThresholded(layer.index()));
            }
        }
    }
    let bank = SmootherBank::new(&grid, &spec.lambdas)?;
    let mut acc = ScaleSpaceAccumulator::new(&grid, &layers, spec)?;
    let stacks: Vec<Vec<DetailStack>> = samples
        .iter()
        .map(|s| s.iter().map(|img| bank.decompose(&img.values)).collect())
        .collect();
    for (i, s) in stacks.iter().enumerate() {
        acc.add(i as u64, s);
    }
    if acc.needs_second_pass() {
        acc.begin_second_pass();
        for (i, s) in stacks.iter().enumerate() {
            acc.add(i as u64, s);
        }
    }
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_model::build_grid;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(nx: usize, ny: usize) -> ProcessGrid {
        ProcessGrid::new(0.0, 0.0, 1.0, 1.0, nx, ny).unwrap()
    }

    fn random_field(m: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m).map(|_| rng.random_range(-3.0..5.0)).collect()
    }

    #[test]
    fn penalty_is_a_laplacian() {
        let q = build_penalty(&grid(2, 1));
        assert_eq!(q.to_dense(), DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        let g = grid(5, 4);
        let q = build_penalty(&g);
        for i in 0..g.len() {
            assert_eq!(q.row(i).map(|(_, v)| v).sum::<f64>(), 0.0);
        }
        let eig = q.to_dense().symmetric_eigenvalues();
        assert!(eig.min() > -1e-12);
        assert_eq!(q.get(0, 0), 2.0);
        assert_eq!(q.get(6, 6), 4.0);
    }

    #[test]
    fn smoother_limits_and_constants() {
        let g = grid(6, 5);
        let bank = SmootherBank::new(&g, &[Lambda::Finite(0.0), Lambda::Finite(3.0), Lambda::Infinite]).unwrap();
        let z = random_field(g.len(), 1);
        assert_eq!(bank.smooth_values(&z, 0), z);
        let m = z.iter().sum::<f64>() / z.len() as f64;
        assert!(bank.smooth_values(&z, 2).iter().all(|&v| v == m));
        let c = vec![7.25; g.len()];
        for i in 0..3 {
            assert!(bank.smooth_values(&c, i).iter().all(|&v| (v - 7.25).abs() < 1e-12));
        }
    }

    #[test]
    fn smooth_solves_the_penalized_system() {
        let g = grid(7, 3);
        let z = random_field(g.len(), 2);
        let bank = SmootherBank::new(&g, &[Lambda::Finite(2.5)]).unwrap();
        let s = bank.smooth_values(&z, 0);
        let a = build_penalty(&g).to_dense() * 2.5 + DMatrix::identity(g.len(), g.len());
        let back = a * nalgebra::DVector::from_vec(s);
        for (x, y) in back.iter().zip(&z) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn telescoping_with_and_without_infinite_level() {
        let g = grid(10, 10);
        let z = random_field(g.len(), 3);
        for lambdas in [default_lambdas(), vec![Lambda::Finite(1.0), Lambda::Finite(4.0)]] {
            let stack = SmootherBank::new(&g, &lambdas).unwrap().decompose(&z);
            let mut total = vec![if stack.has_separate_mean() { stack.mean } else { 0.0 }; g.len()];
            for d in stack.details() {
                for (t, v) in total.iter_mut().zip(d) {
                    *t += v;
                }
            }
            for (t, s) in total.iter().zip(&stack.smooths[0]) {
                assert!((t - s).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_infinite_level_is_the_mean() {
        let g = grid(4, 4);
        let z = random_field(g.len(), 4);
        let stack = SmootherBank::new(&g, &[Lambda::Infinite]).unwrap().decompose(&z);
        assert_eq!(stack.details().len(), 1);
        assert!(stack.details()[0].iter().all(|&v| v == stack.mean));
        let c = SmootherBank::new(&g, &default_lambdas()).unwrap().decompose(&vec![3.0; g.len()]);
        for d in &c.details()[..3] {
            assert!(d.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn smoothing_energy_decreases() {
        let g = grid(12, 8);
        let z = random_field(g.len(), 5);
        let q = build_penalty(&g);
        let levels: Vec<Lambda> = [0.0, 0.5, 2.0, 8.0, 50.0].map(Lambda::Finite).to_vec();
        let bank = SmootherBank::new(&g, &levels).unwrap();
        let energy: Vec<f64> = (0..levels.len())
            .map(|i| {
                let s = bank.smooth_values(&z, i);
                s.iter().zip(q.mul_vec(&s)).map(|(a, b)| a * b).sum()
            })
            .collect();
        assert!(energy.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn spec_validation_and_parsing() {
        assert!(SmootherSpec::default().validate().is_ok());
        let bad = SmootherSpec { lambdas: vec![Lambda::Finite(16.0), Lambda::Finite(8.0)], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SmootherSpec { level: 0.5, ..Default::default() };
        assert!(bad.validate().is_err());
        assert_eq!("inf".parse::<Lambda>().unwrap(), Lambda::Infinite);
        assert_eq!("8".parse::<Lambda>().unwrap(), Lambda::Finite(8.0));
        assert!("-1".parse::<Lambda>().is_err());
        assert_eq!("detail".parse::<Mode>().unwrap(), Mode::Detail);
        assert!("wavelet".parse::<Mode>().is_err());
    }

    fn stacks(g: &ProcessGrid, n: usize, shift: f64) -> Vec<DetailStack> {
        let bank = SmootherBank::new(g, &default_lambdas()).unwrap();
        (0..n)
            .map(|s| {
                let z: Vec<f64> = random_field(g.len(), 100 + s as u64).iter().map(|v| v + shift).collect();
                bank.decompose(&z)
            })
            .collect()
    }

    #[test]
    fn sign_counts_and_levels() {
        let g = grid(3, 1);
        let mk = |v: [f64; 3]| DetailStack { lambdas: vec![Lambda::Finite(0.0)], smooths: vec![v.to_vec()], mean: 0.0 };
        let samples: Vec<DetailStack> = (0..20)
            .map(|i| mk([1.0, -1.0, if i % 2 == 0 { 1.0 } else { -1.0 }]))
            .collect();
        let map = credibility(&g, &samples, 0, 0.95, Mode::SmoothSign, false).unwrap();
        assert_eq!(map.states, vec![CredState::CredPositive, CredState::CredNegative, CredState::Undecided]);
        assert!(credibility(&g, &samples[..1], 0, 0.95, Mode::SmoothSign, false).is_err());
    }

    #[test]
    fn detail_maps_ignore_additive_constants() {
        let g = grid(9, 7);
        let a = stacks(&g, 40, 0.0);
        let b = stacks(&g, 40, 123.5);
        for i in 0..3 {
            for sim in [false, true] {
                let ma = credibility(&g, &a, i, 0.8, Mode::Detail, sim).unwrap();
                let mb = credibility(&g, &b, i, 0.8, Mode::Detail, sim).unwrap();
                assert_eq!(ma.states, mb.states);
            }
        }
    }

    #[test]
    fn permutation_invariance() {
        let g = grid(6, 6);
        let a = stacks(&g, 30, 1.0);
        let mut b = a.clone();
        b.reverse();
        for i in 0..4 {
            let ma = credibility(&g, &a, i, 0.9, Mode::SmoothSign, false).unwrap();
            let mb = credibility(&g, &b, i, 0.9, Mode::SmoothSign, false).unwrap();
            assert_eq!(ma.states, mb.states);
        }
    }

    #[test]
    fn simultaneous_is_no_looser_than_pointwise_on_gaussian_noise() {
        let g = grid(10, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal = rand_distr::StandardNormal;
        let samples: Vec<DetailStack> = (0..400)
            .map(|_| {
                let z: Vec<f64> = (0..g.len()).map(|k| (k % 10) as f64 - 4.5 + rng.sample::<f64, _>(normal) * 0.5).collect();
                DetailStack { lambdas: vec![Lambda::Finite(0.0)], smooths: vec![z], mean: 0.0 }
            })
            .collect();
        let p = credibility(&g, &samples, 0, 0.95, Mode::SmoothSign, false).unwrap();
        let s = credibility(&g, &samples, 0, 0.95, Mode::SmoothSign, true).unwrap();
        let flagged = |m: &CredibilityMap| m.states.len() - m.count(CredState::Undecided);
        assert!(flagged(&s) <= flagged(&p));
        assert!(s.count(CredState::CredPositive) > 0 && s.count(CredState::CredNegative) > 0);
    }

    #[test]
    fn analyze_checks_thresholds_and_labels_maps() {
        let g = build_grid(0.0, 4.0, 0.0, 3.0, 1.0, 1.0).unwrap();
        let mk = |layer, seed, th: bool| {
            let img = FieldImage::new(g, layer, random_field(g.len(), seed)).unwrap();
            if th {
                crate::posterior::apply_threshold(img, 0.0).unwrap()
            } else {
                img
            }
        };
        let spec = SmootherSpec { lambdas: vec![Lambda::Finite(8.0), Lambda::Infinite], ..Default::default() };
        let samples: Vec<Vec<FieldImage>> = (0..5)
            .map(|s| vec![mk(Layer::Subsurface, s, true), mk(Layer::Subgrade, 50 + s, true)])
            .collect();
        let maps = analyze(&samples, &spec, false).unwrap();
        assert_eq!(maps.len(), 4);
        assert_eq!(maps[1].layer, Some(Layer::Subsurface));
        assert_eq!(maps[1].lambda, Lambda::Infinite);
        assert_eq!(maps[2].layer, Some(Layer::Subgrade));
        assert_eq!(maps[2].lambda, Lambda::Finite(8.0));

        let raw: Vec<Vec<FieldImage>> = (0..5).map(|s| vec![mk(Layer::Base, s, false)]).collect();
        assert!(matches!(analyze(&raw, &spec, false), Err(Error::NotThresholded(3))));
        assert_eq!(analyze(&raw, &spec, true).unwrap().len(), 2);

        let sim = SmootherSpec { simultaneous: true, ..spec };
        let maps = analyze(&samples, &sim, false).unwrap();
        assert!(maps.iter().all(|m| m.simultaneous));
    }

    #[test]
    fn accumulator_merge_matches_single_pass() {
        let g = grid(5, 5);
        let spec = SmootherSpec::default();
        let all = stacks(&g, 12, 0.5);
        let mut one = ScaleSpaceAccumulator::new(&g, &[Layer::Base], &spec).unwrap();
        for (i, s) in all.iter().enumerate() {
            one.add(i as u64, std::slice::from_ref(s));
        }
        let mut left = ScaleSpaceAccumulator::new(&g, &[Layer::Base], &spec).unwrap();
        let mut right = left.fork();
        for (i, s) in all.iter().enumerate() {
            let target = if i < 5 { &mut left } else { &mut right };
            target.add(i as u64, std::slice::from_ref(s));
        }
        left.merge(right);
        assert_eq!(one.finish(), left.finish());
    }
}
