use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::geotiff;
use crate::crs::Crs;
use crate::error::{Error, Result};

/// North-up, square-pixel geotransform shared by aligned rasters.
/// `origin_x`/`origin_y` locate the outer top-left corner of pixel (0, 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size: f64,
    pub n_rows: usize,
    pub n_cols: usize,
    pub crs_id: String,
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return Err(Error::invalid("pixel_size must be positive"));
        }
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(Error::invalid("raster dimensions must be positive"));
        }
        if !(self.origin_x.is_finite() && self.origin_y.is_finite()) {
            return Err(Error::invalid("non-finite raster origin"));
        }
        Ok(())
    }

    pub fn crs(&self) -> Result<Crs> {
        Crs::parse(&self.crs_id)
    }

    /// Map coordinates of the centre of pixel (row, col).
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.pixel_size,
            self.origin_y - (row as f64 + 0.5) * self.pixel_size,
        )
    }

    /// Pixel containing map point (x, y), if inside the extent.
    pub fn cell_at(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin_x) / self.pixel_size).floor();
        let r = ((self.origin_y - y) / self.pixel_size).floor();
        if c >= 0.0 && r >= 0.0 && (c as usize) < self.n_cols && (r as usize) < self.n_rows {
            Some((r as usize, c as usize))
        } else {
            None
        }
    }

    /// Same dimensions, CRS and pixel size, and origins within a millionth
    /// of a pixel.
    pub fn aligned_with(&self, other: &GridSpec) -> bool {
        let tol = 1e-6 * self.pixel_size;
        self.n_rows == other.n_rows
            && self.n_cols == other.n_cols
            && self.crs_id == other.crs_id
            && (self.pixel_size - other.pixel_size).abs() <= tol
            && (self.origin_x - other.origin_x).abs() <= tol
            && (self.origin_y - other.origin_y).abs() <= tol
    }
}

/// Single-band georeferenced grid of 32-bit floats, row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RasterGrid {
    pub grid: GridSpec,
    pub nodata: f32,
    pub values: Vec<f32>,
    pub semantic: String,
}

impl RasterGrid {
    pub fn new(grid: GridSpec, nodata: f32, values: Vec<f32>, semantic: impl Into<String>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(Error::invalid(format!(
                "expected {} values for a {}x{} grid, got {}",
                grid.len(),
                grid.n_rows,
                grid.n_cols,
                values.len()
            )));
        }
        let r = RasterGrid {
            grid,
            nodata,
            values,
            semantic: semantic.into(),
        };
        if let Some(v) = r.values.iter().find(|&&v| !v.is_finite() && !r.is_nodata(v)) {
            return Err(Error::invalid(format!("non-finite value {v} that is not nodata")));
        }
        Ok(r)
    }

    pub fn filled(grid: GridSpec, value: f32, nodata: f32, semantic: impl Into<String>) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, nodata, vec![value; n], semantic)
    }

    /// Replace non-finite cells with the nodata sentinel.
    pub(crate) fn from_raw(grid: GridSpec, nodata: f32, mut values: Vec<f32>, semantic: String) -> Result<Self> {
        for v in values.iter_mut() {
            if !v.is_finite() {
                *v = nodata;
            }
        }
        Self::new(grid, nodata, values, semantic)
    }

    pub fn n_rows(&self) -> usize {
        self.grid.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.grid.n_cols
    }

    pub fn is_nodata(&self, v: f32) -> bool {
        if self.nodata.is_nan() {
            v.is_nan()
        } else {
            v == self.nodata
        }
    }

    pub fn is_valid(&self, v: f32) -> bool {
        v.is_finite() && !self.is_nodata(v)
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.grid.n_cols + col]
    }

    /// Cell value if valid.
    pub fn value(&self, row: usize, col: usize) -> Option<f32> {
        let v = self.get(row, col);
        self.is_valid(v).then_some(v)
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&v| self.is_valid(v)).count()
    }

    pub fn ensure_aligned(&self, other: &RasterGrid, name: &str) -> Result<()> {
        if self.grid.aligned_with(&other.grid) {
            Ok(())
        } else {
            Err(Error::Misaligned(name.to_string()))
        }
    }

    /// Field-for-field, bit-for-bit equality (NaN payloads included).
    pub fn bit_eq(&self, other: &RasterGrid) -> bool {
        self.grid == other.grid
            && self.nodata.to_bits() == other.nodata.to_bits()
            && self.semantic == other.semantic
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// New grid on the same geotransform.
    pub fn with_values(&self, values: Vec<f32>, nodata: f32, semantic: impl Into<String>) -> Result<RasterGrid> {
        RasterGrid::new(self.grid.clone(), nodata, values, semantic)
    }
}

/// JSON header stored next to a raw little-endian float32 grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    #[serde(flatten)]
    grid: GridSpec,
    #[serde(with = "nodata_repr")]
    nodata: f32,
    #[serde(default)]
    semantic: String,
}

mod nodata_repr {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f32),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f32, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f32(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f32, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse::<f32>().map_err(serde::de::Error::custom),
        }
    }
}

fn is_geotiff(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("tif") | Some("tiff")
    )
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Load a single-band GeoTIFF (`.tif`/`.tiff`) or a raw float32 grid with a
/// JSON sidecar of the same stem.
pub fn load_raster(path: impl AsRef<Path>) -> Result<RasterGrid> {
    let path = path.as_ref();
    if is_geotiff(path) {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        return geotiff::read(BufReader::new(f)).map_err(|e| match e {
            Error::Tiff(t) => Error::invalid(format!("{}: {t}", path.display())),
            other => other,
        });
    }
    let side = sidecar_path(path);
    let header = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_slice(&header)
        .map_err(|e| Error::invalid(format!("{}: missing georeferencing ({e})", side.display())))?;
    sidecar.grid.validate()?;
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() != sidecar.grid.len() * 4 {
        return Err(Error::invalid(format!(
            "{}: {} bytes, expected {}",
            path.display(),
            bytes.len(),
            sidecar.grid.len() * 4
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    RasterGrid::from_raw(sidecar.grid, sidecar.nodata, values, sidecar.semantic)
}

/// Write a grid in the format implied by the extension (see [`load_raster`]).
pub fn write_raster(grid: &RasterGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_geotiff(path) {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        geotiff::write(grid, &mut w)?;
        return w.flush().map_err(|e| Error::io(path, e));
    }
    let sidecar = Sidecar {
        grid: grid.grid.clone(),
        nodata: grid.nodata,
        semantic: grid.semantic.clone(),
    };
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))?;
    let mut bytes = Vec::with_capacity(grid.values.len() * 4);
    for v in &grid.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
