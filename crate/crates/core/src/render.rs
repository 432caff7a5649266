//! Raster output of grid values as binary PPM images.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::field_model::ProcessGrid;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Palette {
    /// Red for negative, white for zero, blue for positive, scaled by the
    /// largest magnitude.
    #[default]
    Diverging,
    /// Black at the minimum, white at the maximum.
    Grayscale,
}

impl FromStr for Palette {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "diverging" => Ok(Palette::Diverging),
            "grayscale" | "gray" => Ok(Palette::Grayscale),
            other => Err(Error::InvalidArgument(format!("unknown palette {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples, top row first.
    pub pixels: Vec<[u8; 3]>,
    pub min: f64,
    pub max: f64,
    pub palette: Palette,
}

pub const WHITE: [u8; 3] = [255, 255, 255];
pub const RED: [u8; 3] = [255, 0, 0];
pub const BLUE: [u8; 3] = [0, 0, 255];

fn lerp(a: u8, b: u8, t: f64) -> u8 {
    (f64::from(a) + (f64::from(b) - f64::from(a)) * t).round() as u8
}

fn mix(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    [lerp(a[0], b[0], t), lerp(a[1], b[1], t), lerp(a[2], b[2], t)]
}

pub fn color(v: f64, min: f64, max: f64, palette: Palette) -> [u8; 3] {
    match palette {
        Palette::Diverging => {
            let bound = min.abs().max(max.abs());
            if bound == 0.0 || v == 0.0 {
                WHITE
            } else if v < 0.0 {
                mix(WHITE, RED, (-v / bound).min(1.0))
            } else {
                mix(WHITE, BLUE, (v / bound).min(1.0))
            }
        }
        Palette::Grayscale => {
            let t = if max > min { ((v - min) / (max - min)).clamp(0.0, 1.0) } else { 0.5 };
            let g = (255.0 * t).round() as u8;
            [g, g, g]
        }
    }
}

/// One block of `scale × scale` pixels per node, with north (largest `y`)
/// at the top.
pub fn render(grid: &ProcessGrid, values: &[f64], palette: Palette, scale: usize) -> Result<Raster> {
    if values.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            context: "raster values",
            expected: grid.len(),
            actual: values.len(),
        });
    }
    let scale = scale.max(1);
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (width, height) = (grid.nx * scale, grid.ny * scale);
    let mut pixels = Vec::with_capacity(width * height);
    for r in 0..height {
        let j = grid.ny - 1 - r / scale;
        for c in 0..width {
            let i = c / scale;
            pixels.push(color(values[grid.index(i, j)], min, max, palette));
        }
    }
    Ok(Raster {
        width,
        height,
        pixels,
        min,
        max,
        palette,
    })
}

impl Raster {
    pub fn write_ppm_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        w.write_all(&bytes)
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_ppm_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn legend(&self) -> String {
        match self.palette {
            Palette::Diverging => {
                let bound = self.min.abs().max(self.max.abs());
                format!(
                    "palette diverging\nmin {}\nmax {}\nred -{bound}\nwhite 0\nblue {bound}\n",
                    self.min, self.max
                )
            }
            Palette::Grayscale => format!("palette grayscale\nmin {}\nmax {}\nblack {}\nwhite {}\n", self.min, self.max, self.min, self.max),
        }
    }

    pub fn count(&self, rgb: [u8; 3]) -> usize {
        self.pixels.iter().filter(|&&p| p == rgb).count()
    }
}

/// Writes `<stem>.ppm` and `<stem>.legend.txt`.
pub fn write_raster_with_legend(raster: &Raster, stem: &Path) -> Result<()> {
    raster.write_ppm(stem.with_extension("ppm"))?;
    let legend = stem.with_extension("legend.txt");
    std::fs::write(&legend, raster.legend()).map_err(|e| Error::io(&legend, e))
}

/// Parses a binary PPM written by [`Raster::write_ppm_to`].
pub fn read_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let bad = || Error::InvalidArgument("not a binary PPM image".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos..pos + 3 * w * h).ok_or_else(bad)?;
    Ok((w, h, data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
}
