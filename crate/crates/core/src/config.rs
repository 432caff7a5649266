//! Run configuration: a plain `key = value` file with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::backfit::{Acceleration, BackfitOptions};
use crate::covariance::CovarianceParams;
use crate::error::{Error, Result};
use crate::field_model::{Layer, DESIGN_COLUMNS};
use crate::scalespace::{default_lambdas, Lambda, Mode, SmootherSpec};
use crate::simulate::{PlantedFeature, SimulationSpec};

/// Split of one cell's subsurface records into two cells at an `x` boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsurfaceSplit {
    pub source_cell: String,
    pub boundary: f64,
    pub cell_below: String,
    pub cell_above: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub inputs: Vec<PathBuf>,
    pub cells: Option<Vec<String>>,
    /// Layers to analyze; `None` takes every layer present.
    pub layers: Option<Vec<Layer>>,
    pub split: Option<SubsurfaceSplit>,
    pub dx: f64,
    pub dy: f64,
    /// `[x_min, x_max, y_min, y_max]`; `None` uses each cell's data extent.
    pub extent: Option<[f64; 4]>,
    pub params: [CovarianceParams; 3],
    pub c: f64,
    pub profile_c: bool,
    pub outer_sweep: bool,
    pub tolerance: f64,
    pub max_iter: usize,
    pub anderson_depth: usize,
    pub threshold: f64,
    pub samples: usize,
    pub seed: u64,
    pub lambdas: Vec<Lambda>,
    pub level: f64,
    pub mode: Mode,
    pub simultaneous: bool,
    pub direction_value: f64,
    pub output: PathBuf,
    pub persist_samples: bool,
    pub render: bool,
    pub pixel_scale: usize,
    pub sim_cell: String,
    pub sim_length: f64,
    pub sim_width: f64,
    pub lanes: usize,
    pub interval: f64,
    pub jitter: Option<f64>,
    pub betas: [[f64; DESIGN_COLUMNS]; 3],
    pub features: Vec<PlantedFeature>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sim = SimulationSpec::default();
        RunConfig {
            inputs: Vec::new(),
            cells: None,
            layers: None,
            split: None,
            dx: 0.5,
            dy: 0.5,
            extent: None,
            params: [sim.params[0], sim.params[1], sim.params[2]],
            c: 0.5,
            profile_c: false,
            outer_sweep: false,
            tolerance: 1e-8,
            max_iter: 500,
            anderson_depth: 7,
            threshold: 20.0,
            samples: 500,
            seed: 1,
            lambdas: default_lambdas(),
            level: 0.95,
            mode: Mode::SmoothSign,
            simultaneous: false,
            direction_value: 0.5,
            output: PathBuf::from("out"),
            persist_samples: false,
            render: true,
            pixel_scale: 2,
            sim_cell: sim.cell.clone(),
            sim_length: sim.x_max - sim.x_min,
            sim_width: sim.y_max - sim.y_min,
            lanes: sim.lanes,
            interval: sim.interval,
            jitter: None,
            betas: [sim.betas[0], sim.betas[1], sim.betas[2]],
            features: Vec::new(),
        }
    }
}

fn config_err(line: usize, key: &str, message: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: key {key:?}: {message}"))
}

fn parse_f64(line: usize, key: &str, v: &str) -> Result<f64> {
    let x: f64 = v.parse().map_err(|_| config_err(line, key, format!("invalid number {v:?}")))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(config_err(line, key, "value must be finite"))
    }
}

fn parse_list(line: usize, key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|t| parse_f64(line, key, t.trim())).collect()
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(config_err(line, key, format!("expected true or false, got {v:?}"))),
    }
}

fn parse_usize(line: usize, key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| config_err(line, key, format!("invalid count {v:?}")))
}

fn parse_layer(line: usize, key: &str, v: &str) -> Result<Layer> {
    v.parse::<u8>()
        .ok()
        .and_then(Layer::from_index)
        .ok_or_else(|| config_err(line, key, format!("invalid layer {v:?}")))
}

const REPEATABLE: [&str; 2] = ["disc", "ramp"];

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        let mut split: [Option<String>; 4] = Default::default();
        let mut extent: [Option<f64>; 4] = [None; 4];

        for (idx, raw) in text.lines().enumerate() {
            let n = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {n}: expected `key = value`, got {content:?}")))?;
            let (key, v) = (key.trim(), value.trim());
            if !REPEATABLE.contains(&key) && !seen.insert(key.to_string()) {
                return Err(config_err(n, key, "given more than once"));
            }
            let layer_param = |prefix: &str| -> Option<usize> {
                key.strip_prefix(prefix)
                    .and_then(|s| s.strip_prefix('_'))
                    .and_then(|s| s.parse::<u8>().ok())
                    .and_then(Layer::from_index)
                    .map(|l| usize::from(l.index()) - 1)
            };
            match key {
                "input" => {
                    cfg.inputs = v.split(',').map(|s| PathBuf::from(s.trim())).filter(|p| !p.as_os_str().is_empty()).collect()
                }
                "cell" => cfg.cells = Some(v.split(',').map(|s| s.trim().to_string()).collect()),
                "layers" => {
                    let mut list = v.split(',').map(|t| parse_layer(n, key, t.trim())).collect::<Result<Vec<_>>>()?;
                    list.sort();
                    list.dedup();
                    cfg.layers = Some(list);
                }
                "split_cell" => split[0] = Some(v.to_string()),
                "cell_boundary" => split[1] = Some(parse_f64(n, key, v)?.to_string()),
                "cell_below" => split[2] = Some(v.to_string()),
                "cell_above" => split[3] = Some(v.to_string()),
                "dx" => cfg.dx = parse_f64(n, key, v)?,
                "dy" => cfg.dy = parse_f64(n, key, v)?,
                "x_min" => extent[0] = Some(parse_f64(n, key, v)?),
                "x_max" => extent[1] = Some(parse_f64(n, key, v)?),
                "y_min" => extent[2] = Some(parse_f64(n, key, v)?),
                "y_max" => extent[3] = Some(parse_f64(n, key, v)?),
                // Applied below, after every shared value is known.
                "range" | "sill" | "nugget" => {}
                "c" => cfg.c = parse_f64(n, key, v)?,
                "profile_c" => cfg.profile_c = parse_bool(n, key, v)?,
                "outer_sweep" => cfg.outer_sweep = parse_bool(n, key, v)?,
                "tolerance" => cfg.tolerance = parse_f64(n, key, v)?,
                "max_iter" => cfg.max_iter = parse_usize(n, key, v)?,
                "anderson_depth" => cfg.anderson_depth = parse_usize(n, key, v)?,
                "threshold" => cfg.threshold = parse_f64(n, key, v)?,
                "samples" => cfg.samples = parse_usize(n, key, v)?,
                "seed" => cfg.seed = v.parse().map_err(|_| config_err(n, key, format!("invalid seed {v:?}")))?,
                "lambdas" => {
                    cfg.lambdas = v
                        .split(',')
                        .map(|t| t.parse::<Lambda>().map_err(|e| config_err(n, key, e)))
                        .collect::<Result<_>>()?
                }
                "level" => cfg.level = parse_f64(n, key, v)?,
                "mode" => cfg.mode = v.parse().map_err(|e| config_err(n, key, e))?,
                "simultaneous" => cfg.simultaneous = parse_bool(n, key, v)?,
                "direction_value" => cfg.direction_value = parse_f64(n, key, v)?,
                "output" => cfg.output = PathBuf::from(v),
                "persist_samples" => cfg.persist_samples = parse_bool(n, key, v)?,
                "render" => cfg.render = parse_bool(n, key, v)?,
                "pixel_scale" => cfg.pixel_scale = parse_usize(n, key, v)?,
                "sim_cell" => cfg.sim_cell = v.to_string(),
                "sim_length" => cfg.sim_length = parse_f64(n, key, v)?,
                "sim_width" => cfg.sim_width = parse_f64(n, key, v)?,
                "lanes" => cfg.lanes = parse_usize(n, key, v)?,
                "interval" => cfg.interval = parse_f64(n, key, v)?,
                "jitter" => cfg.jitter = Some(parse_f64(n, key, v)?),
                "disc" => {
                    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                    if parts.len() != 5 {
                        return Err(config_err(n, key, "expected layer,x,y,radius,depth"));
                    }
                    cfg.features.push(PlantedFeature::Disc {
                        layer: parse_layer(n, key, parts[0])?,
                        x: parse_f64(n, key, parts[1])?,
                        y: parse_f64(n, key, parts[2])?,
                        radius: parse_f64(n, key, parts[3])?,
                        depth: parse_f64(n, key, parts[4])?,
                    });
                }
                "ramp" => {
                    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                    if parts.len() != 4 {
                        return Err(config_err(n, key, "expected layer,x_start,length,amplitude"));
                    }
                    cfg.features.push(PlantedFeature::Ramp {
                        layer: parse_layer(n, key, parts[0])?,
                        x_start: parse_f64(n, key, parts[1])?,
                        length: parse_f64(n, key, parts[2])?,
                        amplitude: parse_f64(n, key, parts[3])?,
                    });
                }
                _ => {
                    if let Some(t) = layer_param("beta") {
                        let list = parse_list(n, key, v)?;
                        cfg.betas[t] = list
                            .try_into()
                            .map_err(|_| config_err(n, key, format!("expected {DESIGN_COLUMNS} values")))?;
                    } else if layer_param("range").is_none() && layer_param("sill").is_none() && layer_param("nugget").is_none() {
                        return Err(Error::Config(format!("line {n}: unknown key {key:?}")));
                    }
                }
            }
        }

        // Covariance parameters: shared keys first, then per-layer overrides.
        for (idx, raw) in text.lines().enumerate() {
            let content = raw.split('#').next().unwrap_or("").trim();
            let Some((key, v)) = content.split_once('=') else { continue };
            let (key, v) = (key.trim(), v.trim());
            let value = || parse_f64(idx + 1, key, v);
            match key {
                "range" => {
                    let x = value()?;
                    cfg.params.iter_mut().for_each(|p| p.range = x);
                }
                "sill" => {
                    let x = value()?;
                    cfg.params.iter_mut().for_each(|p| p.sill = x);
                }
                "nugget" => {
                    let x = value()?;
                    cfg.params.iter_mut().for_each(|p| p.nugget = x);
                }
                _ => {}
            }
        }
        for (idx, raw) in text.lines().enumerate() {
            let content = raw.split('#').next().unwrap_or("").trim();
            let Some((key, v)) = content.split_once('=') else { continue };
            let (key, v) = (key.trim(), v.trim());
            for (name, field) in [("range", 0), ("sill", 1), ("nugget", 2)] {
                if let Some(t) = key
                    .strip_prefix(name)
                    .and_then(|s| s.strip_prefix('_'))
                    .and_then(|s| s.parse::<u8>().ok())
                    .and_then(Layer::from_index)
                {
                    let x = parse_f64(idx + 1, key, v)?;
                    let p = &mut cfg.params[usize::from(t.index()) - 1];
                    match field {
                        0 => p.range = x,
                        1 => p.sill = x,
                        _ => p.nugget = x,
                    }
                }
            }
        }

        match extent {
            [None, None, None, None] => {}
            [Some(a), Some(b), Some(c), Some(d)] => cfg.extent = Some([a, b, c, d]),
            _ => return Err(Error::Config("x_min, x_max, y_min and y_max must be given together".into())),
        }
        match split {
            [None, None, None, None] => {}
            [Some(src), Some(b), Some(lo), Some(hi)] => {
                cfg.split = Some(SubsurfaceSplit {
                    source_cell: src,
                    boundary: b.parse().expect("validated above"),
                    cell_below: lo,
                    cell_above: hi,
                })
            }
            _ => {
                return Err(Error::Config(
                    "split_cell, cell_boundary, cell_below and cell_above must be given together".into(),
                ))
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Re-checks every value against the library's own invariants.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        for (t, p) in self.params.iter().enumerate() {
            p.validate()
                .map_err(|e| Error::Config(format!("layer {} covariance parameters: {e}", t + 1)))?;
        }
        if !(self.dx > 0.0 && self.dy > 0.0) {
            return err(format!("grid spacing must be positive, got dx={} dy={}", self.dx, self.dy));
        }
        if let Some([a, b, c, d]) = self.extent {
            if !(b > a && d > c) {
                return err("grid extent is empty".into());
            }
        }
        if !(0.0..1.0).contains(&self.c) {
            return err(format!("c must lie in [0, 1), got {}", self.c));
        }
        if !(self.tolerance > 0.0) || self.max_iter == 0 {
            return err("tolerance must be positive and max_iter at least 1".into());
        }
        if self.samples < 2 {
            return err(format!("samples must be at least 2, got {}", self.samples));
        }
        self.smoother_spec()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.direction_value) {
            return err(format!("direction_value must lie in [0, 1], got {}", self.direction_value));
        }
        self.simulation_spec()
            .validate()
            .map_err(|e| Error::Config(format!("simulation settings: {e}")))?;
        Ok(())
    }

    pub fn smoother_spec(&self) -> SmootherSpec {
        SmootherSpec {
            lambdas: self.lambdas.clone(),
            level: self.level,
            mode: self.mode,
            simultaneous: self.simultaneous,
        }
    }

    pub fn backfit_options(&self) -> BackfitOptions {
        BackfitOptions {
            tolerance: self.tolerance,
            max_iter: self.max_iter,
            acceleration: if self.anderson_depth == 0 {
                Acceleration::None
            } else {
                Acceleration::Anderson { depth: self.anderson_depth }
            },
        }
    }

    pub fn simulation_spec(&self) -> SimulationSpec {
        SimulationSpec {
            cell: self.sim_cell.clone(),
            x_min: 0.0,
            x_max: self.sim_length,
            y_min: 0.0,
            y_max: self.sim_width,
            dx: self.dx,
            dy: self.dy,
            lanes: self.lanes,
            lane_spacing: None,
            interval: self.interval,
            jitter: self.jitter,
            c: self.c,
            layers: Layer::ALL.to_vec(),
            params: self.params.to_vec(),
            betas: self.betas.to_vec(),
            threshold: self.threshold,
            direction_value: self.direction_value,
            features: self.features.clone(),
            seed: self.seed,
        }
    }

    /// Every setting, one `key = value` per line in a fixed order. Parsing
    /// this text gives back an equal configuration.
    pub fn to_canonical(&self) -> String {
        let mut s = String::new();
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if !self.inputs.is_empty() {
            kv("input", self.inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","));
        }
        if let Some(cells) = &self.cells {
            kv("cell", cells.join(","));
        }
        if let Some(layers) = &self.layers {
            kv("layers", layers.iter().map(|l| l.index().to_string()).collect::<Vec<_>>().join(","));
        }
        if let Some(sp) = &self.split {
            kv("split_cell", sp.source_cell.clone());
            kv("cell_boundary", sp.boundary.to_string());
            kv("cell_below", sp.cell_below.clone());
            kv("cell_above", sp.cell_above.clone());
        }
        kv("dx", self.dx.to_string());
        kv("dy", self.dy.to_string());
        if let Some([a, b, c, d]) = self.extent {
            kv("x_min", a.to_string());
            kv("x_max", b.to_string());
            kv("y_min", c.to_string());
            kv("y_max", d.to_string());
        }
        for (t, p) in self.params.iter().enumerate() {
            kv(&format!("range_{}", t + 1), p.range.to_string());
            kv(&format!("sill_{}", t + 1), p.sill.to_string());
            kv(&format!("nugget_{}", t + 1), p.nugget.to_string());
        }
        kv("c", self.c.to_string());
        kv("profile_c", self.profile_c.to_string());
        kv("outer_sweep", self.outer_sweep.to_string());
        kv("tolerance", self.tolerance.to_string());
        kv("max_iter", self.max_iter.to_string());
        kv("anderson_depth", self.anderson_depth.to_string());
        kv("threshold", self.threshold.to_string());
        kv("samples", self.samples.to_string());
        kv("seed", self.seed.to_string());
        kv("lambdas", self.lambdas.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","));
        kv("level", self.level.to_string());
        kv("mode", self.mode.to_string());
        kv("simultaneous", self.simultaneous.to_string());
        kv("direction_value", self.direction_value.to_string());
        kv("output", self.output.display().to_string());
        kv("persist_samples", self.persist_samples.to_string());
        kv("render", self.render.to_string());
        kv("pixel_scale", self.pixel_scale.to_string());
        kv("sim_cell", self.sim_cell.clone());
        kv("sim_length", self.sim_length.to_string());
        kv("sim_width", self.sim_width.to_string());
        kv("lanes", self.lanes.to_string());
        kv("interval", self.interval.to_string());
        if let Some(j) = self.jitter {
            kv("jitter", j.to_string());
        }
        for (t, b) in self.betas.iter().enumerate() {
            kv(&format!("beta_{}", t + 1), list(b));
        }
        for f in &self.features {
            match *f {
                PlantedFeature::Disc { layer, x, y, radius, depth } => {
                    kv("disc", format!("{},{x},{y},{radius},{depth}", layer.index()))
                }
                PlantedFeature::Ramp { layer, x_start, length, amplitude } => {
                    kv("ramp", format!("{},{x_start},{length},{amplitude}", layer.index()))
                }
            }
        }
        s
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_canonical().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = RunConfig::parse("# nothing\n\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.samples, 500);
        assert_eq!(cfg.threshold, 20.0);
        assert_eq!(cfg.lambdas, default_lambdas());
    }

    #[test]
    fn shared_and_layer_parameters() {
        let cfg = RunConfig::parse("nugget_2 = 0.5\nsill = 3\nrange = 0.2 # comment\nnugget = 2\n").unwrap();
        assert_eq!(cfg.params[0].nugget, 2.0);
        assert_eq!(cfg.params[1].nugget, 0.5);
        assert!(cfg.params.iter().all(|p| p.sill == 3.0 && p.range == 0.2));
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        let e = RunConfig::parse("treshold = 20\n").unwrap_err();
        assert!(e.to_string().contains("treshold"));
        assert!(RunConfig::parse("c = 0.1\nc = 0.2\n").is_err());
        assert!(RunConfig::parse("c = 1.5\n").is_err());
        assert!(RunConfig::parse("mode = wavelet\n").is_err());
        assert!(RunConfig::parse("x_min = 0\n").is_err());
        assert!(RunConfig::parse("no equals sign\n").is_err());
        assert!(RunConfig::parse("beta_1 = 1,2,3\n").is_err());
    }

    #[test]
    fn canonical_round_trip() {
        let text = "input = a.csv,b.csv\ncell = 27\nlayers = 3,1\nsplit_cell = 99\ncell_boundary = 150\ncell_below = 28\ncell_above = 27\n\
                    x_min = 0\nx_max = 300\ny_min = 0\ny_max = 15\nlambdas = 4, 9, inf\nmode = detail\n\
                    disc = 2,100,7.5,5,-3\nramp = 3,50,75,4\ndisc = 1,10,2,1,-1\njitter = 0\nbeta_2 = 1,2,3,4,5,6\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.features.len(), 3);
        assert_eq!(cfg.split.as_ref().unwrap().boundary, 150.0);
        let again = RunConfig::parse(&cfg.to_canonical()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
