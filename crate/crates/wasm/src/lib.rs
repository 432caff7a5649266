//! Browser demo: simulate a short stretch of road, fit the layered model,
//! then explore smooths and credibility maps interactively.

use terrafit::config::RunConfig;
use terrafit::field_model::{Layer, ProcessGrid};
use terrafit::pipeline::{fit_cell, prepare_cell, DrawSource, FitReport, SampleSource};
use terrafit::posterior::{apply_threshold, point_estimate_fields};
use terrafit::render::{render, Palette};
use terrafit::scalespace::{credibility, CredState, Lambda, Mode, SmootherBank};
use terrafit::simulate::{simulate, PlantedFeature};
use terrafit::{Error, Result};
use wasm_bindgen::prelude::*;

/// Everything the page needs, computed once per simulated site.
pub struct Site {
    pub grid: ProcessGrid,
    pub report: FitReport,
    /// Thresholded point-estimate field per layer.
    pub fields: Vec<Vec<f64>>,
    /// `samples[s][t]`: thresholded field of layer `t` in draw `s`.
    pub samples: Vec<Vec<Vec<f64>>>,
}

fn layer_position(site: &Site, layer: u8) -> Result<usize> {
    Layer::from_index(layer)
        .and_then(|l| site.report.fit.position(l))
        .ok_or_else(|| Error::InvalidArgument(format!("no layer {layer}")))
}

fn lambda_of(value: f64) -> Lambda {
    if value.is_infinite() {
        Lambda::Infinite
    } else {
        Lambda::Finite(value)
    }
}

impl Site {
    /// A 60 m × 15 m site with a soft disc planted in the base layer, centred
    /// on the second lane.
    pub fn build(seed: u64, disc_depth: f64, samples: usize) -> Result<Site> {
        let mut cfg = RunConfig::parse("sim_length = 60\nx_min = 0\nx_max = 60\ny_min = 0\ny_max = 15\n")?;
        cfg.seed = seed;
        cfg.samples = samples.max(2);
        if disc_depth != 0.0 {
            cfg.features.push(PlantedFeature::Disc {
                layer: Layer::Base,
                x: 30.0,
                y: 6.25,
                radius: 5.0,
                depth: disc_depth,
            });
        }
        let truth = simulate(&cfg.simulation_spec())?;
        let problem = prepare_cell(&cfg, &cfg.sim_cell, &truth.datasets)?;
        let report = fit_cell(&cfg, &problem)?;
        let fields = point_estimate_fields(&report.fit, &problem.grid, &problem.grid_design)?
            .into_iter()
            .map(|f| apply_threshold(f, cfg.threshold).map(|f| f.values))
            .collect::<Result<Vec<_>>>()?;
        let source = DrawSource::new(&problem.models(), &report, cfg.seed, cfg.samples)?;
        let samples = (0..cfg.samples as u64).map(|i| source.fields(i)).collect::<Result<Vec<_>>>()?;
        Ok(Site {
            grid: problem.grid,
            report,
            fields,
            samples,
        })
    }

    pub fn smooth(&self, layer: u8, lambda: f64) -> Result<Vec<f64>> {
        let t = layer_position(self, layer)?;
        let bank = SmootherBank::new(&self.grid, &[lambda_of(lambda)])?;
        Ok(bank.smooth_values(&self.fields[t], 0))
    }

    /// Tri-state codes (−1, 0, +1) at one smoothing level. In detail mode
    /// the level is contrasted with the overall mean.
    pub fn credibility(&self, layer: u8, lambda: f64, detail: bool, level: f64) -> Result<Vec<CredState>> {
        let t = layer_position(self, layer)?;
        let lambda = lambda_of(lambda);
        let lambdas = if lambda.is_infinite() { vec![lambda] } else { vec![lambda, Lambda::Infinite] };
        let bank = SmootherBank::new(&self.grid, &lambdas)?;
        let stacks: Vec<_> = self.samples.iter().map(|s| bank.decompose(&s[t])).collect();
        let mode = if detail { Mode::Detail } else { Mode::SmoothSign };
        Ok(credibility(&self.grid, &stacks, 0, level, mode, false)?.states)
    }
}

fn rgba(grid: &ProcessGrid, values: &[f64]) -> Result<Vec<u8>> {
    let raster = render(grid, values, Palette::Diverging, 1)?;
    Ok(raster.pixels.iter().flat_map(|p| [p[0], p[1], p[2], 255]).collect())
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    site: Site,
}

#[wasm_bindgen]
impl Demo {
    /// Simulates and fits a new site. `disc_depth` of 0 plants nothing.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, disc_depth: f64, samples: usize) -> std::result::Result<Demo, JsError> {
        Site::build(seed, disc_depth, samples).map(|site| Demo { site }).map_err(js)
    }

    pub fn width(&self) -> usize {
        self.site.grid.nx
    }

    pub fn height(&self) -> usize {
        self.site.grid.ny
    }

    pub fn summary(&self) -> String {
        let fit = &self.site.report.fit;
        let mut s = format!("c = {}, {} draws\n", fit.c, self.site.samples.len());
        for (layer, est) in fit.layers.iter().zip(&fit.estimates) {
            let beta: Vec<String> = est.beta_hat.iter().map(|b| format!("{b:.2}")).collect();
            s += &format!("layer {} ({}): beta [{}], {} iterations\n", layer.index(), layer.name(), beta.join(", "), est.iterations);
        }
        s
    }

    /// Estimated field minus the threshold, as RGBA rows (north first).
    pub fn field_rgba(&self, layer: u8) -> std::result::Result<Vec<u8>, JsError> {
        let t = layer_position(&self.site, layer).map_err(js)?;
        rgba(&self.site.grid, &self.site.fields[t]).map_err(js)
    }

    /// Smooth of the estimated field; a negative `lambda` means infinity.
    pub fn smooth_rgba(&self, layer: u8, lambda: f64) -> std::result::Result<Vec<u8>, JsError> {
        let lambda = if lambda < 0.0 { f64::INFINITY } else { lambda };
        let values = self.site.smooth(layer, lambda).map_err(js)?;
        rgba(&self.site.grid, &values).map_err(js)
    }

    /// Credibility map: red soft, blue hard, white undecided.
    pub fn credibility_rgba(&self, layer: u8, lambda: f64, detail: bool, level: f64) -> std::result::Result<Vec<u8>, JsError> {
        let lambda = if lambda < 0.0 { f64::INFINITY } else { lambda };
        let states = self.site.credibility(layer, lambda, detail, level).map_err(js)?;
        let codes: Vec<f64> = states.iter().map(|s| f64::from(s.code())).collect();
        rgba(&self.site.grid, &codes).map_err(js)
    }
}
