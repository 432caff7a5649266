//! Observation data model: RMV records, the process-level grid, incidence maps
//! from grid nodes to observations, and the covariate design.
//!
//! Grid nodes are indexed row-major with rows running along `y`:
//! node `k = j * nx + i` sits at `(x0 + i*dx, y0 + j*dy)`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of covariate columns: intercept, x, y, x², x³, direction.
pub const DESIGN_COLUMNS: usize = 6;

/// Relative slack used when counting grid cells, so that an extent that is an
/// exact multiple of the spacing does not gain a spurious extra node.
const GRID_COUNT_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Layer {
    Subsurface = 1,
    Subgrade = 2,
    Base = 3,
}

impl Layer {
    pub const ALL: [Layer; 3] = [Layer::Subsurface, Layer::Subgrade, Layer::Base];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(index: u8) -> Option<Layer> {
        match index {
            1 => Some(Layer::Subsurface),
            2 => Some(Layer::Subgrade),
            3 => Some(Layer::Base),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Layer::Subsurface => "subsurface",
            Layer::Subgrade => "subgrade",
            Layer::Base => "base",
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// One roller measurement: location, driving direction and stiffness value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmvRecord {
    pub cell: String,
    pub layer: Layer,
    /// Meters along the driving direction.
    pub x: f64,
    /// Meters across the driving direction.
    pub y: f64,
    /// 1 for right-to-left, 0 for left-to-right.
    pub direction: u8,
    pub value: f64,
}

impl RmvRecord {
    pub fn new(
        cell: impl Into<String>,
        layer: Layer,
        x: f64,
        y: f64,
        direction: u8,
        value: f64,
    ) -> Result<Self> {
        if direction > 1 {
            return Err(Error::InvalidArgument(format!(
                "direction must be 0 or 1, got {direction}"
            )));
        }
        if !(x.is_finite() && y.is_finite() && value.is_finite()) {
            return Err(Error::InvalidArgument(
                "record coordinates and value must be finite".into(),
            ));
        }
        Ok(RmvRecord {
            cell: cell.into(),
            layer,
            x,
            y,
            direction,
            value,
        })
    }
}

/// All records of one (cell, layer) pair, in acquisition order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDataset {
    cell: String,
    layer: Layer,
    records: Vec<RmvRecord>,
}

impl LayerDataset {
    pub fn new(records: Vec<RmvRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::InvalidArgument("a layer dataset needs at least one record".into()))?;
        let (cell, layer) = (first.cell.clone(), first.layer);
        if let Some(bad) = records.iter().find(|r| r.cell != cell || r.layer != layer) {
            return Err(Error::InvalidArgument(format!(
                "record for cell {} layer {} mixed into dataset for cell {cell} layer {layer}",
                bad.cell, bad.layer
            )));
        }
        Ok(LayerDataset {
            cell,
            layer,
            records,
        })
    }

    pub fn cell(&self) -> &str {
        &self.cell
    }

    pub fn layer(&self) -> Layer {
        self.layer
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[RmvRecord] {
        &self.records
    }

    pub fn values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.value).collect()
    }

    /// `(x_min, x_max, y_min, y_max)` over the records.
    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        bounding_box(self.records.iter())
    }
}

pub(crate) fn bounding_box<'a>(records: impl Iterator<Item = &'a RmvRecord>) -> (f64, f64, f64, f64) {
    records.fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(x0, x1, y0, y1), r| (x0.min(r.x), x1.max(r.x), y0.min(r.y), y1.max(r.y)),
    )
}

/// Datasets keyed by `(cell, layer)`.
pub type DatasetMap = BTreeMap<(String, Layer), LayerDataset>;

const CSV_COLUMNS: [&str; 6] = ["cell", "layer", "x", "y", "direction", "rmv"];

pub fn load_rmv_csv(path: impl AsRef<Path>) -> Result<DatasetMap> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_rmv_csv(file, path)
}

/// Parses RMV records from any reader; `label` is used in error messages.
pub fn read_rmv_csv<R: Read>(reader: R, label: &Path) -> Result<DatasetMap> {
    let csv_err = |line: u64, message: String| Error::Csv {
        path: label.to_path_buf(),
        line,
        message,
    };

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| csv_err(1, e.to_string()))?
        .clone();
    let mut column = [0usize; 6];
    for (slot, name) in column.iter_mut().zip(CSV_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| csv_err(1, format!("missing column `{name}`")))?;
    }

    let mut grouped: BTreeMap<(String, Layer), Vec<RmvRecord>> = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |idx: usize| -> Result<&str> {
            row.get(column[idx])
                .ok_or_else(|| csv_err(line, format!("missing field `{}`", CSV_COLUMNS[idx])))
        };
        let number = |idx: usize| -> Result<f64> {
            let raw = field(idx)?;
            let v: f64 = raw
                .parse()
                .map_err(|_| csv_err(line, format!("non-numeric {} `{raw}`", CSV_COLUMNS[idx])))?;
            if !v.is_finite() {
                return Err(csv_err(line, format!("non-finite {} `{raw}`", CSV_COLUMNS[idx])));
            }
            Ok(v)
        };

        let cell = field(0)?.to_string();
        let layer_raw = field(1)?;
        let layer = layer_raw
            .parse::<u8>()
            .ok()
            .and_then(Layer::from_index)
            .ok_or_else(|| csv_err(line, format!("layer must be 1, 2 or 3, got `{layer_raw}`")))?;
        let x = number(2)?;
        let y = number(3)?;
        let dir_raw = field(4)?;
        let direction = match dir_raw {
            "0" => 0,
            "1" => 1,
            _ => {
                return Err(csv_err(
                    line,
                    format!("direction must be 0 or 1, got `{dir_raw}`"),
                ))
            }
        };
        let value = number(5)?;
        grouped
            .entry((cell.clone(), layer))
            .or_default()
            .push(RmvRecord {
                cell,
                layer,
                x,
                y,
                direction,
                value,
            });
    }

    grouped
        .into_iter()
        .map(|(key, records)| Ok((key, LayerDataset::new(records)?)))
        .collect()
}

pub fn write_rmv_csv<'a>(
    path: impl AsRef<Path>,
    datasets: impl IntoIterator<Item = &'a LayerDataset>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    write_rmv_csv_to(&mut out, datasets).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_rmv_csv_to<'a, W: Write>(
    mut w: W,
    datasets: impl IntoIterator<Item = &'a LayerDataset>,
) -> std::io::Result<()> {
    writeln!(w, "{}", CSV_COLUMNS.join(","))?;
    for ds in datasets {
        for r in ds.records() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.cell,
                r.layer.index(),
                format_sig9(r.x),
                format_sig9(r.y),
                r.direction,
                format_sig9(r.value)
            )?;
        }
    }
    Ok(())
}

/// Formats a value with at most nine significant digits, trimming trailing
/// zeros. Re-formatting a parsed output reproduces it byte for byte.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { format!("{v}") };
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-6..=15).contains(&exp) {
        return format!("{v:.8e}");
    }
    let decimals = (8 - exp).max(0) as usize;
    let mut s = format!("{v:.decimals$}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

/// Regular process-level grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessGrid {
    pub x0: f64,
    pub y0: f64,
    pub dx: f64,
    pub dy: f64,
    pub nx: usize,
    pub ny: usize,
}

impl ProcessGrid {
    pub fn new(x0: f64, y0: f64, dx: f64, dy: f64, nx: usize, ny: usize) -> Result<Self> {
        if !(dx > 0.0 && dy > 0.0) || !(dx.is_finite() && dy.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "grid spacing must be positive, got dx={dx}, dy={dy}"
            )));
        }
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid needs at least 1 node per axis, got {nx}x{ny}"
            )));
        }
        if !(x0.is_finite() && y0.is_finite()) {
            return Err(Error::InvalidArgument("grid origin must be finite".into()));
        }
        Ok(ProcessGrid {
            x0,
            y0,
            dx,
            dy,
            nx,
            ny,
        })
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x_max(&self) -> f64 {
        self.x0 + (self.nx - 1) as f64 * self.dx
    }

    pub fn y_max(&self) -> f64 {
        self.y0 + (self.ny - 1) as f64 * self.dy
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn ij(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    pub fn xy(&self, k: usize) -> (f64, f64) {
        let (i, j) = self.ij(k);
        (self.x0 + i as f64 * self.dx, self.y0 + j as f64 * self.dy)
    }

    /// Nearest node to `(x, y)`; exact ties go to the smaller node index.
    /// Points more than half a cell outside the grid return `None`.
    pub fn nearest_node(&self, x: f64, y: f64) -> Option<usize> {
        let i = nearest_axis_index((x - self.x0) / self.dx, self.nx)?;
        let j = nearest_axis_index((y - self.y0) / self.dy, self.ny)?;
        Some(self.index(i, j))
    }
}

fn nearest_axis_index(t: f64, n: usize) -> Option<usize> {
    if !t.is_finite() || t < -0.5 || t > n as f64 - 0.5 {
        return None;
    }
    // ceil(t - 1/2) rounds exact halves down, matching the tie-break rule.
    let i = (t - 0.5).ceil().max(0.0) as usize;
    Some(i.min(n - 1))
}

pub fn build_grid(x_min: f64, x_max: f64, y_min: f64, y_max: f64, dx: f64, dy: f64) -> Result<ProcessGrid> {
    if !(dx > 0.0 && dy > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "grid spacing must be positive, got dx={dx}, dy={dy}"
        )));
    }
    if !(x_max > x_min && y_max > y_min) {
        return Err(Error::InvalidArgument(format!(
            "degenerate grid extent x=[{x_min}, {x_max}], y=[{y_min}, {y_max}]"
        )));
    }
    let count = |span: f64, step: f64| ((span / step) - GRID_COUNT_SLACK).ceil() as usize + 1;
    ProcessGrid::new(
        x_min,
        y_min,
        dx,
        dy,
        count(x_max - x_min, dx),
        count(y_max - y_min, dy),
    )
}

/// Sparse 0/1 map from grid nodes to observations: one nonzero per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncidenceMap {
    cols: usize,
    node_of: Vec<usize>,
}

impl IncidenceMap {
    pub fn new(cols: usize, node_of: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = node_of.iter().find(|&&k| k >= cols) {
            return Err(Error::InvalidArgument(format!(
                "incidence column {bad} out of range for {cols} nodes"
            )));
        }
        Ok(IncidenceMap { cols, node_of })
    }

    /// Identity map: one observation at every node.
    pub fn identity(m: usize) -> Self {
        IncidenceMap {
            cols: m,
            node_of: (0..m).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.node_of.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn node_of(&self, row: usize) -> usize {
        self.node_of[row]
    }

    pub fn nodes(&self) -> &[usize] {
        &self.node_of
    }

    /// `H v` for a process-level vector `v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        self.node_of.iter().map(|&k| v[k]).collect()
    }

    /// `Hᵀ w` for an observation-level vector `w`.
    pub fn apply_transpose(&self, w: &[f64]) -> Vec<f64> {
        debug_assert_eq!(w.len(), self.rows());
        let mut out = vec![0.0; self.cols];
        for (&k, &wi) in self.node_of.iter().zip(w) {
            out[k] += wi;
        }
        out
    }

    /// Rows grouped by node: `(offsets, rows)` in CSR layout over nodes.
    pub fn rows_by_node(&self) -> (Vec<usize>, Vec<usize>) {
        let mut offsets = vec![0usize; self.cols + 1];
        for &k in &self.node_of {
            offsets[k + 1] += 1;
        }
        for k in 0..self.cols {
            offsets[k + 1] += offsets[k];
        }
        let mut fill = offsets.clone();
        let mut rows = vec![0usize; self.node_of.len()];
        for (r, &k) in self.node_of.iter().enumerate() {
            rows[fill[k]] = r;
            fill[k] += 1;
        }
        (offsets, rows)
    }

    /// Stacks the rows of several maps over the same node set.
    pub fn stack(maps: &[&IncidenceMap]) -> Result<Self> {
        let cols = maps.first().map_or(0, |m| m.cols);
        if let Some(bad) = maps.iter().find(|m| m.cols != cols) {
            return Err(Error::DimensionMismatch {
                context: "stacked incidence columns",
                expected: cols,
                actual: bad.cols,
            });
        }
        Ok(IncidenceMap {
            cols,
            node_of: maps.iter().flat_map(|m| m.node_of.iter().copied()).collect(),
        })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.rows(), self.cols);
        for (r, &k) in self.node_of.iter().enumerate() {
            h[(r, k)] = 1.0;
        }
        h
    }
}

pub fn build_incidence(dataset: &LayerDataset, grid: &ProcessGrid) -> Result<IncidenceMap> {
    let points: Vec<(f64, f64)> = dataset.records().iter().map(|r| (r.x, r.y)).collect();
    build_incidence_points(&points, grid)
}

pub fn build_incidence_points(points: &[(f64, f64)], grid: &ProcessGrid) -> Result<IncidenceMap> {
    let mut node_of = Vec::with_capacity(points.len());
    let mut outside = Vec::new();
    for (r, &(x, y)) in points.iter().enumerate() {
        match grid.nearest_node(x, y) {
            Some(k) => node_of.push(k),
            None => outside.push(r),
        }
    }
    if let Some(&first) = outside.first() {
        let (x, y) = points[first];
        return Err(Error::OutOfGrid {
            count: outside.len(),
            first_record: first,
            x,
            y,
            records: outside,
        });
    }
    Ok(IncidenceMap {
        cols: grid.len(),
        node_of,
    })
}

/// Affine map of metric coordinates onto `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    pub x_center: f64,
    pub y_center: f64,
    pub x_halfrange: f64,
    pub y_halfrange: f64,
}

impl ScalingSpec {
    pub fn new(x_center: f64, y_center: f64, x_halfrange: f64, y_halfrange: f64) -> Result<Self> {
        if !(x_halfrange > 0.0 && y_halfrange > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "scaling half-ranges must be positive, got {x_halfrange}, {y_halfrange}"
            )));
        }
        Ok(ScalingSpec {
            x_center,
            y_center,
            x_halfrange,
            y_halfrange,
        })
    }

    /// No centering or scaling: metric coordinates are used as-is.
    pub fn identity() -> Self {
        ScalingSpec {
            x_center: 0.0,
            y_center: 0.0,
            x_halfrange: 1.0,
            y_halfrange: 1.0,
        }
    }

    pub fn from_extent(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        ScalingSpec::new(
            0.5 * (x_min + x_max),
            0.5 * (y_min + y_max),
            0.5 * (x_max - x_min),
            0.5 * (y_max - y_min),
        )
    }

    /// Midpoint / half-range of the grid extent. A single-node axis uses its
    /// spacing as the half-range.
    pub fn from_grid(grid: &ProcessGrid) -> Self {
        let half = |span: f64, step: f64| if span > 0.0 { 0.5 * span } else { step };
        ScalingSpec {
            x_center: 0.5 * (grid.x0 + grid.x_max()),
            y_center: 0.5 * (grid.y0 + grid.y_max()),
            x_halfrange: half(grid.x_max() - grid.x0, grid.dx),
            y_halfrange: half(grid.y_max() - grid.y0, grid.dy),
        }
    }

    pub fn from_records<'a>(records: impl Iterator<Item = &'a RmvRecord>) -> Result<Self> {
        let (x0, x1, y0, y1) = bounding_box(records);
        if !(x1 > x0 && y1 > y0) {
            return Err(Error::InvalidArgument(
                "cannot auto-scale coordinates with zero range".into(),
            ));
        }
        ScalingSpec::from_extent(x0, x1, y0, y1)
    }

    pub fn scale_x(&self, x: f64) -> f64 {
        (x - self.x_center) / self.x_halfrange
    }

    pub fn scale_y(&self, y: f64) -> f64 {
        (y - self.y_center) / self.y_halfrange
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scaling {
    Auto,
    Fixed(ScalingSpec),
}

/// `n × 6` covariate matrix `[1, x̃, ỹ, x̃², x̃³, direction]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    pub matrix: DMatrix<f64>,
    pub scaling: ScalingSpec,
}

impl DesignMatrix {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    /// `X β`.
    pub fn apply(&self, beta: &[f64]) -> Vec<f64> {
        debug_assert_eq!(beta.len(), self.matrix.ncols());
        (0..self.matrix.nrows())
            .map(|r| {
                self.matrix
                    .row(r)
                    .iter()
                    .zip(beta)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }
}

pub fn design_row(x: f64, y: f64, direction: f64, scaling: &ScalingSpec) -> [f64; DESIGN_COLUMNS] {
    let xs = scaling.scale_x(x);
    let ys = scaling.scale_y(y);
    [1.0, xs, ys, xs * xs, xs * xs * xs, direction]
}

pub fn build_design(dataset: &LayerDataset, scaling: Scaling) -> Result<DesignMatrix> {
    let spec = match scaling {
        Scaling::Auto => ScalingSpec::from_records(dataset.records().iter())?,
        Scaling::Fixed(spec) => spec,
    };
    let n = dataset.len();
    let matrix = DMatrix::from_fn(n, DESIGN_COLUMNS, |r, c| {
        let rec = &dataset.records()[r];
        design_row(rec.x, rec.y, f64::from(rec.direction), &spec)[c]
    });
    Ok(DesignMatrix {
        matrix,
        scaling: spec,
    })
}

/// Covariates evaluated at grid nodes, with the direction column held at
/// `direction_value`.
pub fn grid_design(grid: &ProcessGrid, scaling: &ScalingSpec, direction_value: f64) -> DesignMatrix {
    let matrix = DMatrix::from_fn(grid.len(), DESIGN_COLUMNS, |k, c| {
        let (x, y) = grid.xy(k);
        design_row(x, y, direction_value, scaling)[c]
    });
    DesignMatrix {
        matrix,
        scaling: *scaling,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(cell: &str, layer: Layer, x: f64, y: f64, dir: u8, v: f64) -> RmvRecord {
        RmvRecord::new(cell, layer, x, y, dir, v).unwrap()
    }

    #[test]
    fn csv_groups_one_row_per_layer() {
        let text = "cell,layer,x,y,direction,rmv\n27,1,1.0,2.0,0,25\n27,2,1.5,2.0,1,26\n27,3,2.0,2.5,0,27\n";
        let map = read_rmv_csv(text.as_bytes(), Path::new("mem")).unwrap();
        assert_eq!(map.len(), 3);
        for layer in Layer::ALL {
            assert_eq!(map[&("27".to_string(), layer)].len(), 1);
        }
    }

    #[test]
    fn csv_rejects_bad_layer_with_line() {
        let text = "cell,layer,x,y,direction,rmv\n27,1,1,2,0,25\n27,4,1,2,0,25\n";
        let err = read_rmv_csv(text.as_bytes(), Path::new("mem")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":3:"), "{msg}");
        assert!(msg.contains("`4`"), "{msg}");
    }

    #[test]
    fn csv_rejects_bad_direction_and_numbers() {
        let bad_dir = "cell,layer,x,y,direction,rmv\n27,1,1,2,2,25\n";
        assert!(read_rmv_csv(bad_dir.as_bytes(), Path::new("mem"))
            .unwrap_err()
            .to_string()
            .contains("direction"));
        let bad_num = "cell,layer,x,y,direction,rmv\n27,1,abc,2,0,25\n";
        assert!(read_rmv_csv(bad_num.as_bytes(), Path::new("mem"))
            .unwrap_err()
            .to_string()
            .contains("non-numeric x"));
        let missing = "cell,layer,x,y,rmv\n27,1,1,2,25\n";
        assert!(read_rmv_csv(missing.as_bytes(), Path::new("mem"))
            .unwrap_err()
            .to_string()
            .contains("direction"));
    }

    #[test]
    fn csv_accepts_crlf() {
        let text = "cell,layer,x,y,direction,rmv\r\nA,2,1,2,1,25.5\r\n";
        let map = read_rmv_csv(text.as_bytes(), Path::new("mem")).unwrap();
        assert_eq!(map[&("A".to_string(), Layer::Subgrade)].records()[0].value, 25.5);
    }

    #[test]
    fn grid_counts() {
        let g = build_grid(0.0, 300.0, 0.0, 15.0, 0.5, 0.5).unwrap();
        assert_eq!((g.nx, g.ny, g.len()), (601, 31, 18_631));
        let g = build_grid(0.0, 1.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!((g.nx, g.ny, g.len()), (2, 2, 4));
        let g = build_grid(0.0, 10.0, 0.0, 10.0, 3.0, 3.0).unwrap();
        assert_eq!((g.nx, g.ny), (5, 5));
        assert!(build_grid(0.0, 1.0, 0.0, 1.0, 0.0, 1.0).is_err());
        assert!(build_grid(1.0, 1.0, 0.0, 1.0, 0.5, 0.5).is_err());
    }

    #[test]
    fn grid_covers_bounding_box() {
        let g = build_grid(0.0, 10.0, 0.0, 10.0, 3.0, 3.0).unwrap();
        assert!(g.x_max() >= 10.0 && g.y_max() >= 10.0);
    }

    #[test]
    fn incidence_exact_node_and_tie_break() {
        let g = build_grid(0.0, 3.0, 0.0, 3.0, 1.0, 1.0).unwrap();
        let h = build_incidence_points(&[(2.0, 1.0), (1.5, 1.5)], &g).unwrap();
        assert_eq!(h.node_of(0), g.index(2, 1));
        // Midpoint of nodes (1,1), (2,1), (1,2), (2,2): smallest index wins.
        assert_eq!(h.node_of(1), g.index(1, 1));
    }

    #[test]
    fn incidence_snaps_within_half_cell_and_rejects_beyond() {
        let g = build_grid(0.0, 3.0, 0.0, 3.0, 1.0, 1.0).unwrap();
        let h = build_incidence_points(&[(-0.4, 3.4)], &g).unwrap();
        assert_eq!(h.node_of(0), g.index(0, 3));
        let err = build_incidence_points(&[(1.0, 1.0), (-0.6, 1.0), (5.0, 1.0)], &g).unwrap_err();
        match err {
            Error::OutOfGrid { count, records, .. } => {
                assert_eq!(count, 2);
                assert_eq!(records, vec![1, 2]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn incidence_matches_brute_force_nearest() {
        let g = build_grid(0.0, 7.0, -2.0, 3.0, 0.7, 0.45).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<(f64, f64)> = (0..100)
            .map(|_| (rng.random_range(0.0..g.x_max()), rng.random_range(-2.0..g.y_max())))
            .collect();
        let h = build_incidence_points(&pts, &g).unwrap();
        for (r, &(x, y)) in pts.iter().enumerate() {
            let mut best = (f64::INFINITY, usize::MAX);
            for k in 0..g.len() {
                let (nx, ny) = g.xy(k);
                let d = (nx - x).hypot(ny - y);
                if d < best.0 {
                    best = (d, k);
                }
            }
            assert_eq!(h.node_of(r), best.1);
        }
        // Every row holds exactly one unit entry.
        let dense = h.to_dense();
        for r in 0..dense.nrows() {
            assert_eq!(dense.row(r).sum(), 1.0);
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        let h = IncidenceMap::new(4, vec![0, 2, 2, 3]).unwrap();
        let v = [1.0, 2.0, 3.0, 4.0];
        let w = [0.5, -1.0, 2.0, 1.0];
        let hv = h.apply(&v);
        let htw = h.apply_transpose(&w);
        let lhs: f64 = hv.iter().zip(&w).map(|(a, b)| a * b).sum();
        let rhs: f64 = htw.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
        assert_eq!(h.apply(&[1.0; 4]), vec![1.0; 4]);
    }

    #[test]
    fn design_center_maps_to_zero() {
        let ds = LayerDataset::new(vec![rec("c", Layer::Base, 150.0, 7.5, 1, 30.0)]).unwrap();
        let spec = ScalingSpec::new(150.0, 7.5, 150.0, 7.5).unwrap();
        let x = build_design(&ds, Scaling::Fixed(spec)).unwrap();
        assert_eq!(x.matrix.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn design_halfrange_scaling() {
        let ds = LayerDataset::new(vec![
            rec("c", Layer::Base, 0.0, 0.0, 0, 30.0),
            rec("c", Layer::Base, 300.0, 15.0, 1, 30.0),
        ])
        .unwrap();
        let x = build_design(&ds, Scaling::Auto).unwrap();
        assert_eq!(x.matrix[(0, 1)], -1.0);
        assert_eq!(x.matrix[(1, 1)], 1.0);
        assert_eq!(x.matrix[(0, 4)], -1.0);
    }

    #[test]
    fn design_zero_range_is_an_error() {
        let ds = LayerDataset::new(vec![
            rec("c", Layer::Base, 1.0, 1.0, 0, 30.0),
            rec("c", Layer::Base, 1.0, 1.0, 1, 30.0),
        ])
        .unwrap();
        assert!(build_design(&ds, Scaling::Auto).is_err());
    }

    #[test]
    fn design_has_full_rank_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let recs: Vec<RmvRecord> = (0..20)
            .map(|_| {
                rec(
                    "c",
                    Layer::Subgrade,
                    rng.random_range(0.0..300.0),
                    rng.random_range(0.0..15.0),
                    rng.random_range(0..2),
                    20.0,
                )
            })
            .collect();
        let ds = LayerDataset::new(recs).unwrap();
        let x = build_design(&ds, Scaling::Auto).unwrap();
        // Rank via Gaussian elimination with partial pivoting.
        let mut a = x.matrix.clone();
        let (n, p) = a.shape();
        let mut rank = 0;
        for c in 0..p {
            let piv = (rank..n).max_by(|&i, &j| a[(i, c)].abs().total_cmp(&a[(j, c)].abs())).unwrap();
            if a[(piv, c)].abs() < 1e-10 {
                continue;
            }
            a.swap_rows(rank, piv);
            for r in rank + 1..n {
                let f = a[(r, c)] / a[(rank, c)];
                for cc in c..p {
                    a[(r, cc)] -= f * a[(rank, cc)];
                }
            }
            rank += 1;
        }
        assert_eq!(rank, DESIGN_COLUMNS);
        assert!(x.matrix.column(1).iter().all(|v| v.abs() <= 1.0));
        let again = build_design(&ds, Scaling::Fixed(x.scaling)).unwrap();
        assert_eq!(again, x);
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(20.0), "20");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(-123.456789012), "-123.456789");
        assert_eq!(format_sig9(1e-9), "1.00000000e-9");
    }
}
