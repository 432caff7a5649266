//! Staged runs over files: simulate, fit, sample, scale space, render.
//!
//! Every stage reads what the previous one wrote, so stages can be run on
//! their own. Posterior draws are a pure function of the fit and the seed,
//! so later stages regenerate them unless a samples file was persisted.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::backfit::{
    default_carryover_grid, profile_carryover, sequential_backfit, LayerInput, LayerModel, SequentialFit,
    SequentialOptions,
};
use crate::config::{sha256_hex, RunConfig};
use crate::covariance::GridCovariance;
use crate::error::{Error, Result};
use crate::field_model::{
    build_design, build_grid, build_incidence, grid_design, load_rmv_csv, write_rmv_csv, DatasetMap, Layer,
    LayerDataset, ProcessGrid, Scaling, ScalingSpec,
};
use crate::gridio::{read_grid_csv, write_grid_csv};
use crate::posterior::{apply_threshold, point_estimate_fields, sample_fields, PosteriorSampler, SamplingMode};
use crate::render::{render, write_raster_with_legend, Palette};
use crate::scalespace::{CredibilityMap, DetailStack, Lambda, MomentAccumulator, ScaleSpaceAccumulator, SmootherBank};
use crate::simulate::simulate;

/// Samples per work unit. Fixed, so results do not depend on thread count.
const CHUNK: usize = 10;
/// Work units in flight between ordered merges.
const WAVE: usize = 8;

const SAMPLES_MAGIC: &[u8; 8] = b"TFSAMP1\n";

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cell_dir(cfg: &RunConfig, cell: &str) -> PathBuf {
    cfg.output.join(format!("cell_{cell}"))
}

pub fn lambda_tag(lambda: Lambda) -> String {
    lambda.to_string()
}

// ---------------------------------------------------------------- simulate

/// Writes one RMV CSV and one truth grid per layer; returns the paths.
pub fn run_simulate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let spec = cfg.simulation_spec();
    let truth = simulate(&spec)?;
    create_dir(&cfg.output)?;
    let mut written = Vec::new();
    for ((cell, layer), ds) in &truth.datasets {
        let path = cfg.output.join(format!("rmv_cell{cell}_layer{}.csv", layer.index()));
        write_rmv_csv(&path, [ds])?;
        written.push(path);
    }
    for field in &truth.fields {
        let path = cfg.output.join(format!("truth_cell{}_layer{}.csv", spec.cell, field.layer.index()));
        write_grid_csv(&path, &truth.grid, &field.values)?;
        written.push(path);
    }
    Ok(written)
}

// ---------------------------------------------------------------- inputs

fn input_files(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    if cfg.inputs.is_empty() {
        return Err(Error::Config("no input files: set `input`".into()));
    }
    let mut files = Vec::new();
    for p in &cfg.inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
                    name.starts_with("rmv_") && name.ends_with(".csv")
                })
                .collect();
            if found.is_empty() {
                return Err(Error::Config(format!("input directory {} holds no rmv_*.csv files", p.display())));
            }
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

/// Loads and merges every input file, then applies the subsurface split.
pub fn load_inputs(cfg: &RunConfig) -> Result<DatasetMap> {
    let mut records: BTreeMap<(String, Layer), Vec<_>> = BTreeMap::new();
    for path in input_files(cfg)? {
        for (key, ds) in load_rmv_csv(&path)? {
            records.entry(key).or_default().extend_from_slice(ds.records());
        }
    }
    if let Some(split) = &cfg.split {
        let key = (split.source_cell.clone(), Layer::Subsurface);
        let source = records.remove(&key).ok_or_else(|| {
            Error::Config(format!("split_cell {:?} has no subsurface records", split.source_cell))
        })?;
        for (cell, below) in [(&split.cell_below, true), (&split.cell_above, false)] {
            let part: Vec<_> = source
                .iter()
                .filter(|r| (r.x < split.boundary) == below)
                .map(|r| {
                    let mut r = r.clone();
                    r.cell = cell.clone();
                    r
                })
                .collect();
            if part.is_empty() {
                continue;
            }
            let slot = records.entry((cell.clone(), Layer::Subsurface)).or_default();
            if !slot.is_empty() {
                return Err(Error::Config(format!("cell {cell:?} already has subsurface records")));
            }
            *slot = part;
        }
    }
    records
        .into_iter()
        .map(|(key, recs)| Ok((key, LayerDataset::new(recs)?)))
        .collect()
}

pub fn select_cells(cfg: &RunConfig, data: &DatasetMap) -> Result<Vec<String>> {
    let present: Vec<String> = {
        let mut v: Vec<String> = data.keys().map(|(c, _)| c.clone()).collect();
        v.dedup();
        v
    };
    match &cfg.cells {
        None => Ok(present),
        Some(wanted) => {
            for c in wanted {
                if !present.contains(c) {
                    return Err(Error::Config(format!("cell {c:?} not found in the input data")));
                }
            }
            Ok(wanted.clone())
        }
    }
}

/// Everything needed to fit and sample one cell.
pub struct CellProblem {
    pub cell: String,
    pub grid: ProcessGrid,
    pub scaling: ScalingSpec,
    pub inputs: Vec<LayerInput>,
    pub grid_design: DMatrix<f64>,
}

impl CellProblem {
    pub fn layers(&self) -> Vec<Layer> {
        self.inputs.iter().map(|i| i.layer).collect()
    }

    pub fn models(&self) -> Vec<&LayerModel> {
        self.inputs.iter().map(|i| &i.model).collect()
    }
}

pub fn prepare_cell(cfg: &RunConfig, cell: &str, data: &DatasetMap) -> Result<CellProblem> {
    let datasets: Vec<&LayerDataset> = data
        .iter()
        .filter(|((c, l), _)| c == cell && cfg.layers.as_ref().is_none_or(|ls| ls.contains(l)))
        .map(|(_, ds)| ds)
        .collect();
    if datasets.is_empty() {
        return Err(Error::Config(format!("cell {cell:?} has no data for the selected layers")));
    }
    if let Some(wanted) = &cfg.layers {
        if let Some(l) = wanted.iter().find(|l| !datasets.iter().any(|d| d.layer() == **l)) {
            return Err(Error::Config(format!("cell {cell:?} has no data for layer {}", l.index())));
        }
    }
    let [x0, x1, y0, y1] = match cfg.extent {
        Some(e) => e,
        None => datasets.iter().fold(
            [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY],
            |[a, b, c, d], ds| {
                let (p, q, r, s) = ds.bounding_box();
                [a.min(p), b.max(q), c.min(r), d.max(s)]
            },
        ),
    };
    let grid = build_grid(x0, x1, y0, y1, cfg.dx, cfg.dy)?;
    let scaling = ScalingSpec::from_grid(&grid);
    let mut inputs = Vec::with_capacity(datasets.len());
    for ds in datasets {
        let layer = ds.layer();
        let build = || -> Result<LayerInput> {
            let params = cfg.params[usize::from(layer.index()) - 1];
            let incidence = build_incidence(ds, &grid)?;
            let design = build_design(ds, Scaling::Fixed(scaling))?.matrix;
            let process = Arc::new(GridCovariance::new(&grid, &params, &scaling)?);
            let model = LayerModel::new(design, incidence, process, params)?;
            Ok(LayerInput {
                layer,
                model,
                y: ds.values(),
            })
        };
        inputs.push(build().map_err(|e| e.in_layer(layer.index()))?);
    }
    let grid_design = grid_design(&grid, &scaling, cfg.direction_value).matrix;
    Ok(CellProblem {
        cell: cell.to_string(),
        grid,
        scaling,
        inputs,
        grid_design,
    })
}

// ---------------------------------------------------------------- fit

/// Persisted result of the fit stage for one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub cell: String,
    pub grid: ProcessGrid,
    pub scaling: ScalingSpec,
    pub direction_value: f64,
    pub threshold: f64,
    pub fit: SequentialFit,
    /// `(c, residual sum of squares)` when `c` was profiled.
    pub profile: Vec<(f64, f64)>,
}

pub fn fit_cell(cfg: &RunConfig, problem: &CellProblem) -> Result<FitReport> {
    let opts = SequentialOptions {
        c: cfg.c,
        backfit: cfg.backfit_options(),
        outer_sweep: cfg.outer_sweep,
    };
    let (fit, profile) = if cfg.profile_c {
        profile_carryover(&problem.inputs, &default_carryover_grid(), &opts)?
    } else {
        (sequential_backfit(&problem.inputs, &opts)?, Vec::new())
    };
    Ok(FitReport {
        cell: problem.cell.clone(),
        grid: problem.grid,
        scaling: problem.scaling,
        direction_value: cfg.direction_value,
        threshold: cfg.threshold,
        fit,
        profile,
    })
}

pub fn write_fit(cfg: &RunConfig, report: &FitReport) -> Result<()> {
    let dir = cell_dir(cfg, &report.cell);
    create_dir(&dir)?;
    let path = dir.join("fit.json");
    let json = serde_json::to_string_pretty(report).map_err(|source| Error::Json { path: path.clone(), source })?;
    write_text(&path, &(json + "\n"))?;
    let fields = point_estimate_fields(&report.fit, &report.grid, &grid_design(&report.grid, &report.scaling, report.direction_value).matrix)?;
    for field in fields {
        let field = apply_threshold(field, report.threshold)?;
        let stem = dir.join(format!("field_layer{}", field.layer.index()));
        write_grid_csv(stem.with_extension("csv"), &field.grid, &field.values)?;
        if cfg.render {
            let raster = render(&field.grid, &field.values, Palette::Diverging, cfg.pixel_scale)?;
            write_raster_with_legend(&raster, &stem)?;
        }
    }
    Ok(())
}

pub fn read_fit(cfg: &RunConfig, cell: &str) -> Result<FitReport> {
    let path = cell_dir(cfg, cell).join("fit.json");
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|source| Error::Json { path, source })
}

/// Fits every selected cell and writes `fit.json` and the estimated fields.
pub fn run_fit(cfg: &RunConfig) -> Result<Vec<FitReport>> {
    let data = load_inputs(cfg)?;
    let mut out = Vec::new();
    for cell in select_cells(cfg, &data)? {
        let problem = prepare_cell(cfg, &cell, &data)?;
        let report = fit_cell(cfg, &problem)?;
        write_fit(cfg, &report)?;
        out.push(report);
    }
    Ok(out)
}

// ---------------------------------------------------------------- streaming

/// Runs `add` over sample indices `0..count` in fixed chunks, merging the
/// chunk accumulators in index order.
fn stream<A: Send>(
    count: usize,
    make: impl Fn() -> A + Sync,
    add: impl Fn(&mut A, u64) -> Result<()> + Sync,
    mut merge: impl FnMut(A) -> Result<()>,
) -> Result<()> {
    let chunks: Vec<(usize, usize)> = (0..count).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(count))).collect();
    let work = |&(s, e): &(usize, usize)| -> Result<A> {
        let mut acc = make();
        for i in s..e {
            add(&mut acc, i as u64)?;
        }
        Ok(acc)
    };
    for wave in chunks.chunks(WAVE) {
        #[cfg(feature = "parallel")]
        let done: Vec<Result<A>> = {
            use rayon::prelude::*;
            wave.par_iter().map(work).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let done: Vec<Result<A>> = wave.iter().map(work).collect();
        for acc in done {
            merge(acc?)?;
        }
    }
    Ok(())
}

/// Thresholded field values of every layer for sample `index`.
pub trait SampleSource: Sync {
    fn layers(&self) -> &[Layer];
    fn grid(&self) -> &ProcessGrid;
    fn count(&self) -> usize;
    fn fields(&self, index: u64) -> Result<Vec<Vec<f64>>>;
}

/// Regenerates draws from a fit.
pub struct DrawSource<'a> {
    sampler: PosteriorSampler<'a>,
    report: &'a FitReport,
    grid_design: DMatrix<f64>,
    count: usize,
}

impl<'a> DrawSource<'a> {
    pub fn new(models: &[&'a LayerModel], report: &'a FitReport, seed: u64, count: usize) -> Result<Self> {
        Ok(DrawSource {
            sampler: PosteriorSampler::new(models, &report.fit, seed, SamplingMode::Posterior)?,
            report,
            grid_design: grid_design(&report.grid, &report.scaling, report.direction_value).matrix,
            count,
        })
    }
}

impl SampleSource for DrawSource<'_> {
    fn layers(&self) -> &[Layer] {
        &self.report.fit.layers
    }

    fn grid(&self) -> &ProcessGrid {
        &self.report.grid
    }

    fn count(&self) -> usize {
        self.count
    }

    fn fields(&self, index: u64) -> Result<Vec<Vec<f64>>> {
        let sample = self.sampler.draw(index);
        sample_fields(&sample, self.report.fit.c, &self.report.grid, &self.grid_design)?
            .into_iter()
            .map(|f| apply_threshold(f, self.report.threshold).map(|f| f.values))
            .collect()
    }
}

/// Reads draws from a persisted samples file.
pub struct StoredSource {
    path: PathBuf,
    grid: ProcessGrid,
    layers: Vec<Layer>,
    count: usize,
}

const SAMPLES_HEADER: u64 = 8 + 3 * 8;

impl StoredSource {
    pub fn open(path: &Path, grid: ProcessGrid, layers: Vec<Layer>) -> Result<Self> {
        let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut head = [0u8; SAMPLES_HEADER as usize];
        f.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
        let word = |i: usize| u64::from_le_bytes(head[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes"));
        if &head[..8] != SAMPLES_MAGIC || word(1) as usize != layers.len() || word(2) as usize != grid.len() {
            return Err(Error::InvalidArgument(format!("{} does not match the fitted cell", path.display())));
        }
        Ok(StoredSource {
            path: path.to_path_buf(),
            grid,
            layers,
            count: word(0) as usize,
        })
    }
}

impl SampleSource for StoredSource {
    fn layers(&self) -> &[Layer] {
        &self.layers
    }

    fn grid(&self) -> &ProcessGrid {
        &self.grid
    }

    fn count(&self) -> usize {
        self.count
    }

    fn fields(&self, index: u64) -> Result<Vec<Vec<f64>>> {
        let m = self.grid.len();
        let per_sample = (self.layers.len() * m * 8) as u64;
        let mut f = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        f.seek(SeekFrom::Start(SAMPLES_HEADER + index * per_sample))
            .map_err(|e| Error::io(&self.path, e))?;
        let mut buf = vec![0u8; per_sample as usize];
        f.read_exact(&mut buf).map_err(|e| Error::io(&self.path, e))?;
        let values: Vec<f64> = buf.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        Ok(values.chunks(m).map(<[f64]>::to_vec).collect())
    }
}

/// Posterior mean and standard deviation of each thresholded layer field.
pub struct SampleSummary {
    pub layers: Vec<Layer>,
    pub mean: Vec<Vec<f64>>,
    pub sd: Vec<Vec<f64>>,
}

#[derive(Default)]
pub struct StreamRequest<'a> {
    pub summary: bool,
    pub scalespace: Option<&'a crate::scalespace::SmootherSpec>,
    pub persist: Option<&'a Path>,
}

#[derive(Default)]
pub struct StreamOutput {
    pub summary: Option<SampleSummary>,
    pub maps: Option<Vec<CredibilityMap>>,
}

struct ChunkAcc {
    moments: Vec<MomentAccumulator>,
    scale: Option<ScaleSpaceAccumulator>,
    stored: Vec<Vec<Vec<f64>>>,
}

/// One or two ordered passes over the samples of `source`.
pub fn stream_samples(source: &dyn SampleSource, req: &StreamRequest<'_>) -> Result<StreamOutput> {
    let grid = *source.grid();
    let layers = source.layers().to_vec();
    let count = source.count();
    if count < 2 {
        return Err(Error::InvalidArgument("at least 2 samples are needed".into()));
    }
    let bank = match req.scalespace {
        Some(spec) => Some(SmootherBank::new(&grid, &spec.lambdas)?),
        None => None,
    };
    let mut total_moments = vec![MomentAccumulator::new(grid.len()); layers.len()];
    let mut scale = match req.scalespace {
        Some(spec) => Some(ScaleSpaceAccumulator::new(&grid, &layers, spec)?),
        None => None,
    };
    let mut writer = match req.persist {
        Some(path) => {
            let file = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(file);
            let mut head = SAMPLES_MAGIC.to_vec();
            for v in [count as u64, layers.len() as u64, grid.len() as u64] {
                head.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&head).map_err(|e| Error::io(path, e))?;
            Some((path, w))
        }
        None => None,
    };

    let mut first = true;
    loop {
        let template = scale.as_ref().map(ScaleSpaceAccumulator::fork);
        let want_moments = first && req.summary;
        let want_store = first && writer.is_some();
        stream(
            count,
            || ChunkAcc {
                moments: if want_moments { vec![MomentAccumulator::new(grid.len()); layers.len()] } else { Vec::new() },
                scale: template.clone(),
                stored: Vec::new(),
            },
            |acc, index| {
                let fields = source.fields(index)?;
                if want_moments {
                    for (m, f) in acc.moments.iter_mut().zip(&fields) {
                        m.add(f);
                    }
                }
                if let (Some(s), Some(bank)) = (acc.scale.as_mut(), bank.as_ref()) {
                    let stacks: Vec<DetailStack> = fields.iter().map(|f| bank.decompose(f)).collect();
                    s.add(index, &stacks);
                }
                if want_store {
                    acc.stored.push(fields);
                }
                Ok(())
            },
            |acc| {
                if want_moments {
                    for (t, m) in total_moments.iter_mut().zip(&acc.moments) {
                        t.merge(m);
                    }
                }
                if let (Some(s), Some(a)) = (scale.as_mut(), acc.scale) {
                    s.merge(a);
                }
                if let Some((path, w)) = writer.as_mut() {
                    for sample in &acc.stored {
                        for v in sample.iter().flatten() {
                            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(*path, e))?;
                        }
                    }
                }
                Ok(())
            },
        )?;
        if first {
            if let Some((path, mut w)) = writer.take() {
                w.flush().map_err(|e| Error::io(path, e))?;
            }
        }
        first = false;
        match scale.as_mut() {
            Some(s) if s.needs_second_pass() => s.begin_second_pass(),
            _ => break,
        }
    }

    Ok(StreamOutput {
        summary: req.summary.then(|| SampleSummary {
            layers: layers.clone(),
            mean: total_moments.iter().map(|m| m.mean().to_vec()).collect(),
            sd: total_moments.iter().map(MomentAccumulator::sd).collect(),
        }),
        maps: scale.map(ScaleSpaceAccumulator::finish),
    })
}

fn write_summary(cfg: &RunConfig, cell: &str, grid: &ProcessGrid, summary: &SampleSummary) -> Result<()> {
    let dir = cell_dir(cfg, cell);
    for (t, layer) in summary.layers.iter().enumerate() {
        write_grid_csv(dir.join(format!("posterior_mean_layer{}.csv", layer.index())), grid, &summary.mean[t])?;
        write_grid_csv(dir.join(format!("posterior_sd_layer{}.csv", layer.index())), grid, &summary.sd[t])?;
    }
    Ok(())
}

pub fn map_stem(dir: &Path, map: &CredibilityMap) -> PathBuf {
    let layer = map.layer.map_or(0, Layer::index);
    dir.join(format!("cred_layer{layer}_lambda{}", lambda_tag(map.lambda)))
}

pub fn write_maps(cfg: &RunConfig, cell: &str, maps: &[CredibilityMap]) -> Result<Vec<PathBuf>> {
    let dir = cell_dir(cfg, cell);
    let mut written = Vec::with_capacity(maps.len());
    for map in maps {
        let stem = map_stem(&dir, map);
        let path = stem.with_extension("csv");
        write_grid_csv(&path, &map.grid, &map.codes())?;
        if cfg.render {
            let raster = render(&map.grid, &map.codes(), Palette::Diverging, cfg.pixel_scale)?;
            write_raster_with_legend(&raster, &stem)?;
        }
        written.push(path);
    }
    Ok(written)
}

/// Rebuilds the cell problem and checks it matches the persisted fit.
fn problem_for_fit(cfg: &RunConfig, data: &DatasetMap, report: &FitReport) -> Result<CellProblem> {
    let problem = prepare_cell(cfg, &report.cell, data)?;
    if problem.grid != report.grid || problem.layers() != report.fit.layers {
        return Err(Error::Config(format!(
            "cell {:?}: configuration no longer matches fit.json; rerun `fit`",
            report.cell
        )));
    }
    Ok(problem)
}

/// Draws the posterior samples of each fitted cell and writes their
/// mean and standard deviation, plus the raw draws when requested.
pub fn run_sample(cfg: &RunConfig) -> Result<Vec<SampleSummary>> {
    let data = load_inputs(cfg)?;
    let mut out = Vec::new();
    for cell in select_cells(cfg, &data)? {
        let report = read_fit(cfg, &cell)?;
        let problem = problem_for_fit(cfg, &data, &report)?;
        let source = DrawSource::new(&problem.models(), &report, cfg.seed, cfg.samples)?;
        let persist = cfg.persist_samples.then(|| cell_dir(cfg, &cell).join("samples.bin"));
        let result = stream_samples(
            &source,
            &StreamRequest {
                summary: true,
                scalespace: None,
                persist: persist.as_deref(),
            },
        )?;
        let summary = result.summary.expect("summary requested");
        write_summary(cfg, &cell, &report.grid, &summary)?;
        out.push(summary);
    }
    Ok(out)
}

/// Credibility maps from persisted samples when present, otherwise from
/// regenerated draws.
pub fn run_scalespace(cfg: &RunConfig) -> Result<Vec<(String, Vec<CredibilityMap>)>> {
    let data = load_inputs(cfg)?;
    let spec = cfg.smoother_spec();
    let mut out = Vec::new();
    for cell in select_cells(cfg, &data)? {
        let report = read_fit(cfg, &cell)?;
        let stored = cell_dir(cfg, &cell).join("samples.bin");
        let request = StreamRequest {
            summary: false,
            scalespace: Some(&spec),
            persist: None,
        };
        let result = if stored.exists() {
            let source = StoredSource::open(&stored, report.grid, report.fit.layers.clone())?;
            stream_samples(&source, &request)?
        } else {
            let problem = problem_for_fit(cfg, &data, &report)?;
            let source = DrawSource::new(&problem.models(), &report, cfg.seed, cfg.samples)?;
            stream_samples(&source, &request)?
        };
        let maps = result.maps.expect("maps requested");
        write_maps(cfg, &cell, &maps)?;
        out.push((cell, maps));
    }
    Ok(out)
}

pub struct CellResult {
    pub report: FitReport,
    pub summary: SampleSummary,
    pub maps: Vec<CredibilityMap>,
}

/// Fit, sample and scale space for every selected cell, in one streaming
/// pass over the draws of each cell.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Vec<CellResult>> {
    let data = load_inputs(cfg)?;
    let spec = cfg.smoother_spec();
    let mut out = Vec::new();
    for cell in select_cells(cfg, &data)? {
        let problem = prepare_cell(cfg, &cell, &data)?;
        let report = fit_cell(cfg, &problem)?;
        write_fit(cfg, &report)?;
        let source = DrawSource::new(&problem.models(), &report, cfg.seed, cfg.samples)?;
        let persist = cfg.persist_samples.then(|| cell_dir(cfg, &cell).join("samples.bin"));
        let result = stream_samples(
            &source,
            &StreamRequest {
                summary: true,
                scalespace: Some(&spec),
                persist: persist.as_deref(),
            },
        )?;
        let summary = result.summary.expect("summary requested");
        let maps = result.maps.expect("maps requested");
        write_summary(cfg, &cell, &report.grid, &summary)?;
        write_maps(cfg, &cell, &maps)?;
        out.push(CellResult { report, summary, maps });
    }
    Ok(out)
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Serialize)]
struct ManifestFile {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_sha256: String,
    seed: u64,
    files: Vec<ManifestFile>,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != "manifest.json") {
            out.push(path.strip_prefix(root).unwrap_or(&path).to_path_buf());
        }
    }
    Ok(())
}

/// Writes `config.used` and `manifest.json` (config hash, tool version,
/// and a hash of every file under the output directory).
pub fn write_manifest(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    create_dir(&cfg.output)?;
    write_text(&cfg.output.join("config.used"), &cfg.to_canonical())?;
    let mut files = Vec::new();
    collect_files(&cfg.output, &cfg.output, &mut files)?;
    files.sort();
    let files = files
        .into_iter()
        .map(|rel| {
            let full = cfg.output.join(&rel);
            let bytes = std::fs::read(&full).map_err(|e| Error::io(&full, e))?;
            Ok(ManifestFile {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: sha256_hex(&bytes),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        tool: "terrafit",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_sha256: cfg.hash(),
        seed: cfg.seed,
        files,
    };
    let path = cfg.output.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json { path: path.clone(), source })?;
    write_text(&path, &(json + "\n"))?;
    Ok(path)
}

// ---------------------------------------------------------------- render

/// Renders a grid CSV to `<stem>.ppm` and `<stem>.legend.txt`, next to the
/// input or inside `out_dir`.
pub fn render_grid_file(path: &Path, palette: Palette, scale: usize, out_dir: Option<&Path>) -> Result<PathBuf> {
    let (grid, values) = read_grid_csv(path)?;
    let raster = render(&grid, &values, palette, scale)?;
    let name = path.file_stem().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("grid"));
    let stem = match out_dir {
        Some(dir) => {
            create_dir(dir)?;
            dir.join(name)
        }
        None => path.with_file_name(name),
    };
    write_raster_with_legend(&raster, &stem)?;
    Ok(stem.with_extension("ppm"))
}
