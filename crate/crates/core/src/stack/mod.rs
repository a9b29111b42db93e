//! Co-registered feature stack: construction, sampling, persistence, and the
//! forest mask.

mod build;
mod mask;
mod ops;

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use build::{build_stack, NdviPair, StackConfig};
pub use mask::{apply_mask, build_forest_mask, ForestMask, DEFAULT_COVER_THRESHOLD_PCT};
pub use ops::{
    aspect_from_dem, band_ratio_db, coordinate_grids, disc_offsets, dn_grid_to_gamma0, dn_to_gamma0, focal_mean,
    ndvi, ndvi_value, slope_from_dem, temporal_reduce, Reducer,
};

use crate::calibration::LabeledSample;
use crate::error::{Error, Result};
use crate::ingest::{load_raster, write_raster, GridSpec, RasterGrid};

/// Nodata sentinel written into derived layers.
pub const NODATA: f32 = -9999.0;

pub const DEFAULT_SPECKLE_RADIUS_M: f64 = 50.0;

/// Layer order of the full stack. Model feature indices follow it.
pub const LAYER_NAMES: [&str; 25] = [
    "S1_VV",
    "S1_VH",
    "S1_VVVH_ratio",
    "P2_HH",
    "P2_HV",
    "P2_HVHH_ratio",
    "S2_B1",
    "S2_B2",
    "S2_B3",
    "S2_B4",
    "S2_B5",
    "S2_B6",
    "S2_B7",
    "S2_B8",
    "S2_B8A",
    "S2_B9",
    "S2_B11",
    "S2_B12",
    "NDVI_mean",
    "NDVI_max",
    "DEM",
    "SLOPE",
    "ASPECT",
    "LAT",
    "LON",
];

pub fn canonical_layer_names() -> Vec<String> {
    LAYER_NAMES.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub layers: Vec<RasterGrid>,
    pub layer_names: Vec<String>,
    pub grid: GridSpec,
}

/// Index of the layer whose geotransform the most other layers share; the
/// earliest wins ties.
fn reference_layer(layers: &[RasterGrid]) -> usize {
    let mut best = (0, 0);
    for (i, a) in layers.iter().enumerate() {
        let n = layers.iter().filter(|b| a.grid.aligned_with(&b.grid)).count();
        if n > best.1 {
            best = (i, n);
        }
    }
    best.0
}

impl FeatureStack {
    /// Stack of arbitrary uniquely named, aligned layers in the given order.
    pub fn custom(named: Vec<(String, RasterGrid)>) -> Result<FeatureStack> {
        if named.is_empty() {
            return Err(Error::invalid("stack needs at least one layer"));
        }
        let mut seen = BTreeSet::new();
        for (name, _) in &named {
            if !seen.insert(name.as_str()) {
                return Err(Error::invalid(format!("duplicate layer name `{name}`")));
            }
        }
        let (layer_names, mut layers): (Vec<String>, Vec<RasterGrid>) = named.into_iter().unzip();
        let reference = layers[reference_layer(&layers)].grid.clone();
        for (name, layer) in layer_names.iter().zip(layers.iter_mut()) {
            if !layer.grid.aligned_with(&reference) {
                return Err(Error::Misaligned(name.clone()));
            }
            layer.semantic = name.clone();
        }
        Ok(FeatureStack {
            layers,
            layer_names,
            grid: reference,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, name: &str) -> Option<&RasterGrid> {
        self.layer_names.iter().position(|n| n == name).map(|i| &self.layers[i])
    }

    /// Layer values at flat pixel index `i`; None when any layer is nodata.
    pub fn pixel(&self, i: usize, out: &mut [f64]) -> bool {
        let mut complete = true;
        for (slot, layer) in out.iter_mut().zip(&self.layers) {
            let v = layer.values[i];
            if layer.is_valid(v) {
                *slot = v as f64;
            } else {
                *slot = f64::NAN;
                complete = false;
            }
        }
        complete
    }
}

/// Order the canonical layers, rejecting missing, extra, duplicate or
/// misaligned ones.
pub fn assemble_stack(named: Vec<(String, RasterGrid)>) -> Result<FeatureStack> {
    let mut by_name: HashMap<String, RasterGrid> = HashMap::new();
    for (name, grid) in named {
        if by_name.insert(name.clone(), grid).is_some() {
            return Err(Error::invalid(format!("duplicate layer name `{name}`")));
        }
    }
    let extra: Vec<&String> = by_name.keys().filter(|k| !LAYER_NAMES.contains(&k.as_str())).collect();
    if !extra.is_empty() {
        let mut extra: Vec<&str> = extra.iter().map(|s| s.as_str()).collect();
        extra.sort();
        return Err(Error::invalid(format!("unexpected layers: {}", extra.join(", "))));
    }
    let missing: Vec<&str> = LAYER_NAMES.iter().copied().filter(|n| !by_name.contains_key(*n)).collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!("missing layers: {}", missing.join(", "))));
    }
    let ordered = LAYER_NAMES
        .iter()
        .map(|n| (n.to_string(), by_name.remove(*n).expect("checked above")))
        .collect();
    FeatureStack::custom(ordered)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackSample {
    /// One value per layer; NaN where the layer is nodata.
    pub values: Vec<f64>,
    pub complete: bool,
    pub row: usize,
    pub col: usize,
}

/// Values of the pixel containing (lat, lon), which for square pixels is
/// the pixel with the nearest centre.
pub fn sample_stack(stack: &FeatureStack, lat: f64, lon: f64) -> Result<StackSample> {
    let crs = stack.grid.crs()?;
    let (x, y) = crs.forward(lat, lon);
    let (row, col) = stack.grid.cell_at(x, y).ok_or(Error::OutsideExtent { x, y })?;
    let mut values = vec![0.0; stack.n_layers()];
    let complete = stack.pixel(row * stack.grid.n_cols + col, &mut values);
    Ok(StackSample {
        values,
        complete,
        row,
        col,
    })
}

#[derive(Debug, Clone, Default)]
pub struct FeatureAttachment {
    pub complete: Vec<LabeledSample>,
    pub incomplete: usize,
    pub outside: usize,
}

/// Fill each sample's feature vector (and slope when the stack has a SLOPE
/// layer). Samples outside the extent or touching nodata are dropped and
/// counted.
pub fn attach_features(stack: &FeatureStack, samples: Vec<LabeledSample>) -> Result<FeatureAttachment> {
    let slope_idx = stack.layer_names.iter().position(|n| n == "SLOPE");
    let sampled: Vec<Result<Option<StackSample>>> = samples
        .par_iter()
        .map(|s| match sample_stack(stack, s.lat, s.lon) {
            Ok(v) => Ok(Some(v)),
            Err(Error::OutsideExtent { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect();
    let mut out = FeatureAttachment::default();
    for (mut s, r) in samples.into_iter().zip(sampled) {
        match r? {
            None => out.outside += 1,
            Some(v) if !v.complete => out.incomplete += 1,
            Some(v) => {
                s.slope_deg = slope_idx.map(|i| v.values[i]);
                s.features = v.values;
                out.complete.push(s);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackManifest {
    pub layers: Vec<ManifestLayer>,
    pub grid: GridSpec,
}

pub const STACK_MANIFEST_FILE: &str = "stack.json";

/// Write every layer as `<name>.tif` plus `stack.json` into `out_dir`.
pub fn save_stack(stack: &FeatureStack, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut layers = Vec::new();
    for (name, grid) in stack.layer_names.iter().zip(&stack.layers) {
        let file = PathBuf::from(format!("{name}.tif"));
        write_raster(grid, out_dir.join(&file))?;
        layers.push(ManifestLayer {
            name: name.clone(),
            path: file,
        });
    }
    let manifest = StackManifest {
        layers,
        grid: stack.grid.clone(),
    };
    let path = out_dir.join(STACK_MANIFEST_FILE);
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(path)
}

/// Load a stack from its manifest (or the directory holding it). Relative
/// layer paths resolve against the manifest's directory.
pub fn load_stack(path: impl AsRef<Path>) -> Result<FeatureStack> {
    let mut path = path.as_ref().to_path_buf();
    if path.is_dir() {
        path = path.join(STACK_MANIFEST_FILE);
    }
    let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: StackManifest = serde_json::from_reader(f)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let named = manifest
        .layers
        .iter()
        .map(|l| Ok((l.name.clone(), load_raster(base.join(&l.path))?)))
        .collect::<Result<Vec<_>>>()?;
    let stack = FeatureStack::custom(named)?;
    if !stack.grid.aligned_with(&manifest.grid) {
        return Err(Error::Misaligned("stack manifest grid".into()));
    }
    Ok(stack)
}
