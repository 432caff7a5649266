//! Grid CSV files: one line `nx,ny,x0,y0,dx,dy`, then `ny` rows of `nx`
//! values, row `j` holding the nodes at `y = y0 + j·dy`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::field_model::ProcessGrid;

pub fn write_grid_csv(path: impl AsRef<Path>, grid: &ProcessGrid, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_grid_csv_to(&mut w, grid, values).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_grid_csv_to<W: Write>(w: &mut W, grid: &ProcessGrid, values: &[f64]) -> std::io::Result<()> {
    assert_eq!(values.len(), grid.len(), "grid values length");
    writeln!(w, "{},{},{},{},{},{}", grid.nx, grid.ny, grid.x0, grid.y0, grid.dx, grid.dy)?;
    let mut line = String::new();
    for row in values.chunks(grid.nx) {
        line.clear();
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            // Shortest representation that parses back to the same value.
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_grid_csv(path: impl AsRef<Path>) -> Result<(ProcessGrid, Vec<f64>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_grid_csv_from(BufReader::new(file), path)
}

pub fn read_grid_csv_from<R: Read>(reader: BufReader<R>, label: &Path) -> Result<(ProcessGrid, Vec<f64>)> {
    let fail = |message: String| Error::GridFormat {
        path: label.to_path_buf(),
        message,
    };
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| fail("empty file".into()))?
        .map_err(|e| Error::io(label, e))?;
    let fields: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    if fields.len() != 6 {
        return Err(fail(format!("header needs 6 fields nx,ny,x0,y0,dx,dy, got {}", fields.len())));
    }
    let count = |s: &str, name: &str| s.parse::<usize>().map_err(|_| fail(format!("invalid {name} {s:?}")));
    let real = |s: &str, name: &str| s.parse::<f64>().map_err(|_| fail(format!("invalid {name} {s:?}")));
    let nx = count(fields[0], "nx")?;
    let ny = count(fields[1], "ny")?;
    let grid = ProcessGrid::new(
        real(fields[2], "x0")?,
        real(fields[3], "y0")?,
        real(fields[4], "dx")?,
        real(fields[5], "dy")?,
        nx,
        ny,
    )
    .map_err(|e| fail(e.to_string()))?;

    let mut values = Vec::with_capacity(grid.len());
    let mut rows = 0;
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(label, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let start = values.len();
        for tok in line.trim().split(',') {
            let v = tok
                .trim()
                .parse::<f64>()
                .map_err(|_| fail(format!("line {}: invalid value {tok:?}", idx + 2)))?;
            values.push(v);
        }
        if values.len() - start != nx {
            return Err(fail(format!("line {}: expected {nx} values, got {}", idx + 2, values.len() - start)));
        }
        rows += 1;
    }
    if rows != ny {
        return Err(fail(format!("expected {ny} rows, got {rows}")));
    }
    Ok((grid, values))
}
