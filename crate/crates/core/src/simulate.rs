//! Synthetic layered roller data with known ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariance::{CirculantSampler, CovarianceParams, GridCovariance};
use crate::error::{Error, Result};
use crate::field_model::{
    build_grid, design_row, grid_design, DatasetMap, Layer, LayerDataset, ProcessGrid, RmvRecord, ScalingSpec,
    DESIGN_COLUMNS,
};
use crate::posterior::{assemble_field, FieldImage};

/// Deterministic perturbation added to one layer's true field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PlantedFeature {
    /// Adds `depth` at every node within `radius` of the center.
    Disc {
        layer: Layer,
        x: f64,
        y: f64,
        radius: f64,
        depth: f64,
    },
    /// Rises linearly from 0 at `x_start` to `amplitude` at
    /// `x_start + length`, constant outside that span.
    Ramp {
        layer: Layer,
        x_start: f64,
        length: f64,
        amplitude: f64,
    },
}

impl PlantedFeature {
    pub fn layer(&self) -> Layer {
        match *self {
            PlantedFeature::Disc { layer, .. } | PlantedFeature::Ramp { layer, .. } => layer,
        }
    }

    pub fn value_at(&self, x: f64, y: f64) -> f64 {
        match *self {
            PlantedFeature::Disc { x: cx, y: cy, radius, depth, .. } => {
                if (x - cx).hypot(y - cy) <= radius {
                    depth
                } else {
                    0.0
                }
            }
            PlantedFeature::Ramp { x_start, length, amplitude, .. } => {
                amplitude * ((x - x_start) / length).clamp(0.0, 1.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub cell: String,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub dx: f64,
    pub dy: f64,
    pub lanes: usize,
    /// Distance between lane centerlines; `None` spreads the lanes evenly
    /// over the width.
    pub lane_spacing: Option<f64>,
    /// Along-track distance between consecutive measurements.
    pub interval: f64,
    /// Half-width of the uniform coordinate jitter; `None` uses a quarter
    /// of the grid spacing.
    pub jitter: Option<f64>,
    pub c: f64,
    pub layers: Vec<Layer>,
    pub params: Vec<CovarianceParams>,
    pub betas: Vec<[f64; DESIGN_COLUMNS]>,
    pub threshold: f64,
    /// Direction covariate used for the true field images.
    pub direction_value: f64,
    pub features: Vec<PlantedFeature>,
    pub seed: u64,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        let params = CovarianceParams {
            range: 0.3,
            sill: 4.0,
            nugget: 1.0,
        };
        SimulationSpec {
            cell: "1".into(),
            x_min: 0.0,
            x_max: 300.0,
            y_min: 0.0,
            y_max: 15.0,
            dx: 0.5,
            dy: 0.5,
            lanes: 6,
            lane_spacing: None,
            interval: 1.0,
            jitter: None,
            c: 0.5,
            layers: Layer::ALL.to_vec(),
            params: vec![params; 3],
            betas: vec![
                [30.0, 2.0, 0.5, -1.0, 0.5, 0.8],
                [33.0, 1.5, -0.5, 0.5, -0.5, 0.6],
                [36.0, -1.0, 0.3, 1.0, 0.2, 0.4],
            ],
            threshold: 20.0,
            direction_value: 0.5,
            features: Vec::new(),
            seed: 1,
        }
    }
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.lanes == 0 {
            return bad("lanes must be at least 1".into());
        }
        if !(self.interval > 0.0) {
            return bad(format!("along-track interval must be positive, got {}", self.interval));
        }
        if let Some(s) = self.lane_spacing {
            if !(s > 0.0) {
                return bad(format!("lane spacing must be positive, got {s}"));
            }
        }
        if let Some(j) = self.jitter {
            if !(j >= 0.0) {
                return bad(format!("jitter must be non-negative, got {j}"));
            }
        }
        if !(0.0..1.0).contains(&self.c) {
            return bad(format!("carryover c must lie in [0, 1), got {}", self.c));
        }
        if self.layers.is_empty() || self.layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad("layers must be non-empty and strictly increasing".into());
        }
        if self.params.len() != self.layers.len() || self.betas.len() != self.layers.len() {
            return bad("need one set of covariance parameters and one beta per layer".into());
        }
        for p in &self.params {
            p.validate()?;
        }
        if !(self.x_max > self.x_min && self.y_max > self.y_min) {
            return bad("simulation extent is empty".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<ProcessGrid> {
        build_grid(self.x_min, self.x_max, self.y_min, self.y_max, self.dx, self.dy)
    }

    pub fn scaling(&self) -> Result<ScalingSpec> {
        Ok(ScalingSpec::from_grid(&self.grid()?))
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

const FIELD_STREAM: u64 = 1;
const PASS_STREAM: u64 = 100;
const NOISE_STREAM: u64 = 200;

/// True `α_t` per layer at process level, planted features included.
pub fn simulate_fields(spec: &SimulationSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let grid = spec.grid()?;
    let scaling = ScalingSpec::from_grid(&grid);
    spec.layers
        .iter()
        .zip(&spec.params)
        .map(|(&layer, params)| {
            let cov = GridCovariance::new(&grid, params, &scaling)?;
            let sampler = CirculantSampler::new(&cov).map_err(|e| e.in_layer(layer.index()))?;
            let mut alpha = sampler.sample(&mut spec.rng(FIELD_STREAM + u64::from(layer.index())));
            for f in spec.features.iter().filter(|f| f.layer() == layer) {
                for (k, a) in alpha.iter_mut().enumerate() {
                    let (x, y) = grid.xy(k);
                    *a += f.value_at(x, y);
                }
            }
            Ok(alpha)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassPoint {
    pub x: f64,
    pub y: f64,
    pub direction: u8,
}

/// Boustrophedon passes per layer: lane `j` runs left to right (direction 0)
/// when `j` is even and right to left otherwise.
pub fn simulate_passes(spec: &SimulationSpec) -> Result<Vec<Vec<PassPoint>>> {
    spec.validate()?;
    let width = spec.y_max - spec.y_min;
    let spacing = spec.lane_spacing.unwrap_or(width / spec.lanes as f64);
    let jitter = spec.jitter.unwrap_or(0.25 * spec.dx.min(spec.dy));
    let steps = ((spec.x_max - spec.x_min) / spec.interval * (1.0 + 1e-12)).floor() as usize;
    let xs: Vec<f64> = (0..=steps).map(|i| spec.x_min + i as f64 * spec.interval).collect();

    Ok(spec
        .layers
        .iter()
        .map(|layer| {
            let mut rng = spec.rng(PASS_STREAM + u64::from(layer.index()));
            let mut points = Vec::with_capacity(spec.lanes * xs.len());
            for j in 0..spec.lanes {
                let y_lane = spec.y_min + (j as f64 + 0.5) * spacing;
                let direction = (j % 2) as u8;
                let order: Box<dyn Iterator<Item = &f64>> = if direction == 0 {
                    Box::new(xs.iter())
                } else {
                    Box::new(xs.iter().rev())
                };
                for &x in order {
                    let (jx, jy) = if jitter > 0.0 {
                        (rng.random_range(-jitter..=jitter), rng.random_range(-jitter..=jitter))
                    } else {
                        (0.0, 0.0)
                    };
                    points.push(PassPoint {
                        x: (x + jx).clamp(spec.x_min, spec.x_max),
                        y: (y_lane + jy).clamp(spec.y_min, spec.y_max),
                        direction,
                    });
                }
            }
            points
        })
        .collect())
}

/// `y_t = X_t β_t + Σ_{k≤t} c^{t-k} H_t α_k + ε_t` at the pass locations.
pub fn simulate_observations(
    spec: &SimulationSpec,
    fields: &[Vec<f64>],
    passes: &[Vec<PassPoint>],
) -> Result<DatasetMap> {
    spec.validate()?;
    if fields.len() != spec.layers.len() || passes.len() != spec.layers.len() {
        return Err(Error::DimensionMismatch {
            context: "simulated layers",
            expected: spec.layers.len(),
            actual: fields.len().min(passes.len()),
        });
    }
    let grid = spec.grid()?;
    let scaling = ScalingSpec::from_grid(&grid);
    let mut out = DatasetMap::new();
    for (t, &layer) in spec.layers.iter().enumerate() {
        let mut rng = spec.rng(NOISE_STREAM + u64::from(layer.index()));
        let sd = spec.params[t].nugget.sqrt();
        let mut records = Vec::with_capacity(passes[t].len());
        for p in &passes[t] {
            let node = grid.nearest_node(p.x, p.y).ok_or_else(|| {
                Error::InvalidArgument(format!("pass point ({}, {}) is off the grid", p.x, p.y))
            })?;
            let row = design_row(p.x, p.y, f64::from(p.direction), &scaling);
            let mut v: f64 = row.iter().zip(&spec.betas[t]).map(|(a, b)| a * b).sum();
            for k in 0..=t {
                let w = spec.c.powi(i32::from(layer.index()) - i32::from(spec.layers[k].index()));
                v += w * fields[k][node];
            }
            let e: f64 = rng.sample(StandardNormal);
            v += sd * e;
            records.push(RmvRecord::new(spec.cell.clone(), layer, p.x, p.y, p.direction, v)?);
        }
        out.insert((spec.cell.clone(), layer), LayerDataset::new(records)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationTruth {
    pub grid: ProcessGrid,
    pub alpha: Vec<Vec<f64>>,
    /// `X_grid β_t + Σ_{k≤t} c^{t-k} α_k`, not thresholded.
    pub fields: Vec<FieldImage>,
    pub datasets: DatasetMap,
}

pub fn simulate(spec: &SimulationSpec) -> Result<SimulationTruth> {
    let grid = spec.grid()?;
    let alpha = simulate_fields(spec)?;
    let passes = simulate_passes(spec)?;
    let datasets = simulate_observations(spec, &alpha, &passes)?;
    let xg = grid_design(&grid, &ScalingSpec::from_grid(&grid), spec.direction_value).matrix;
    let betas: Vec<Vec<f64>> = spec.betas.iter().map(|b| b.to_vec()).collect();
    let fields = (0..spec.layers.len())
        .map(|t| assemble_field(&grid, &xg, &spec.layers, &betas, &alpha, t, spec.c))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulationTruth {
        grid,
        alpha,
        fields,
        datasets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimulationSpec {
        SimulationSpec {
            x_max: 20.0,
            y_max: 6.0,
            ..Default::default()
        }
    }

    #[test]
    fn lanes_and_directions() {
        let spec = SimulationSpec { jitter: Some(0.0), ..Default::default() };
        let passes = simulate_passes(&spec).unwrap();
        let lane_ys: Vec<f64> = passes[0].iter().step_by(301).map(|p| p.y).collect();
        assert_eq!(lane_ys, vec![1.25, 3.75, 6.25, 8.75, 11.25, 13.75]);
        assert_eq!(passes[0].len(), 6 * 301);
        for (j, lane) in passes[0].chunks(301).enumerate() {
            assert!(lane.iter().all(|p| p.direction == (j % 2) as u8));
            let ascending = lane[1].x > lane[0].x;
            assert_eq!(ascending, j % 2 == 0);
        }
    }

    #[test]
    fn one_lane_full_interval() {
        let spec = SimulationSpec { lanes: 1, interval: 300.0, ..Default::default() };
        let p = &simulate_passes(&spec).unwrap()[0];
        assert!(p.len() >= 2);
        assert!(p.iter().all(|q| q.direction == 0));
    }

    #[test]
    fn jitter_makes_layers_differ_and_stays_bounded() {
        let spec = small();
        let passes = simulate_passes(&spec).unwrap();
        assert_ne!(passes[0], passes[1]);
        let j = 0.125;
        let ideal = simulate_passes(&SimulationSpec { jitter: Some(0.0), ..small() }).unwrap();
        for (a, b) in passes[2].iter().zip(&ideal[2]) {
            assert!((a.x - b.x).abs() <= j + 1e-12 && (a.y - b.y).abs() <= j + 1e-12);
        }
    }

    #[test]
    fn noiseless_observations_are_the_field() {
        let mut spec = small();
        spec.c = 0.0;
        spec.betas = vec![[0.0; 6]; 3];
        for p in &mut spec.params {
            p.nugget = 0.0;
        }
        let fields = simulate_fields(&spec).unwrap();
        let passes = simulate_passes(&spec).unwrap();
        let data = simulate_observations(&spec, &fields, &passes).unwrap();
        let grid = spec.grid().unwrap();
        for (t, layer) in Layer::ALL.iter().enumerate() {
            for r in data[&("1".to_string(), *layer)].records() {
                let k = grid.nearest_node(r.x, r.y).unwrap();
                assert_eq!(r.value, fields[t][k]);
            }
        }
    }

    #[test]
    fn disc_is_added_exactly() {
        let base = small();
        let disc = PlantedFeature::Disc { layer: Layer::Subgrade, x: 10.0, y: 3.0, radius: 2.0, depth: -5.0 };
        let with = SimulationSpec { features: vec![disc], ..base.clone() };
        let a = simulate_fields(&base).unwrap();
        let b = simulate_fields(&with).unwrap();
        let grid = base.grid().unwrap();
        for k in 0..grid.len() {
            let (x, y) = grid.xy(k);
            let inside = (x - 10.0).hypot(y - 3.0) <= 2.0;
            assert_eq!(b[1][k], a[1][k] + if inside { -5.0 } else { 0.0 });
            assert_eq!(a[0][k], b[0][k]);
        }
    }

    #[test]
    fn vanishing_sill_gives_vanishing_field() {
        let mut spec = small();
        for p in &mut spec.params {
            p.sill = 1e-14;
        }
        assert!(simulate_fields(&spec).unwrap().iter().flatten().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = simulate(&small()).unwrap();
        let b = simulate(&small()).unwrap();
        assert_eq!(a, b);
        let c = simulate(&SimulationSpec { seed: 2, ..small() }).unwrap();
        assert_ne!(a.datasets, c.datasets);
    }

    #[test]
    fn ramp_profile() {
        let r = PlantedFeature::Ramp { layer: Layer::Base, x_start: 100.0, length: 75.0, amplitude: 6.0 };
        assert_eq!(r.value_at(50.0, 1.0), 0.0);
        assert_eq!(r.value_at(137.5, 1.0), 3.0);
        assert_eq!(r.value_at(250.0, 1.0), 6.0);
    }

    #[test]
    fn invalid_specs() {
        assert!(simulate_fields(&SimulationSpec { lanes: 0, ..small() }).is_err());
        assert!(simulate_fields(&SimulationSpec { c: 1.0, ..small() }).is_err());
        assert!(simulate_fields(&SimulationSpec { interval: 0.0, ..small() }).is_err());
    }
}
