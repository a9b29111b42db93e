use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ops::*;
use super::{assemble_stack, FeatureStack, DEFAULT_SPECKLE_RADIUS_M};
use crate::error::{Error, Result};
use crate::ingest::{load_raster, RasterGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NdviPair {
    pub nir: PathBuf,
    pub red: PathBuf,
}

/// Input layout for [`build_stack`]. SAR lists hold one grid per date;
/// C-band grids are already in dB, L-band grids are digital numbers.
/// Relative paths resolve against the directory passed to `build_stack`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub s1_vv: Vec<PathBuf>,
    pub s1_vh: Vec<PathBuf>,
    pub p2_hh_dn: Vec<PathBuf>,
    pub p2_hv_dn: Vec<PathBuf>,
    /// Band id (`B1` … `B12`, `B8A`) to temporal-mean reflectance grid.
    pub s2_bands: BTreeMap<String, PathBuf>,
    pub ndvi_pairs: Vec<NdviPair>,
    pub dem: PathBuf,
    #[serde(default = "default_radius")]
    pub speckle_radius_m: f64,
}

fn default_radius() -> f64 {
    DEFAULT_SPECKLE_RADIUS_M
}

fn load_all(base: &Path, paths: &[PathBuf], what: &str) -> Result<Vec<RasterGrid>> {
    if paths.is_empty() {
        return Err(Error::invalid(format!("stack config has no {what} grids")));
    }
    paths.iter().map(|p| load_raster(base.join(p))).collect()
}

/// Temporal mean in dB followed by the focal speckle filter.
fn sar_layer(dates: Vec<RasterGrid>, name: &str, radius_m: f64) -> Result<RasterGrid> {
    let mean = temporal_reduce(&dates, Reducer::Mean, name)?;
    focal_mean(&mean, radius_m)
}

/// Build the full 25-layer stack from raw inputs.
pub fn build_stack(config: &StackConfig, base_dir: impl AsRef<Path>) -> Result<FeatureStack> {
    let base = base_dir.as_ref();
    let r = config.speckle_radius_m;
    let mut named: Vec<(String, RasterGrid)> = Vec::new();

    let vv = sar_layer(load_all(base, &config.s1_vv, "s1_vv")?, "S1_VV", r)?;
    let vh = sar_layer(load_all(base, &config.s1_vh, "s1_vh")?, "S1_VH", r)?;
    let vv_vh = band_ratio_db(&vv, &vh, "S1_VVVH_ratio")?;

    let to_db = |paths: &[PathBuf], what: &str, name: &str| -> Result<RasterGrid> {
        let dates = load_all(base, paths, what)?
            .iter()
            .map(|g| dn_grid_to_gamma0(g, name))
            .collect::<Result<Vec<_>>>()?;
        sar_layer(dates, name, r)
    };
    let hh = to_db(&config.p2_hh_dn, "p2_hh_dn", "P2_HH")?;
    let hv = to_db(&config.p2_hv_dn, "p2_hv_dn", "P2_HV")?;
    let hv_hh = band_ratio_db(&hv, &hh, "P2_HVHH_ratio")?;
    named.extend([
        ("S1_VV".into(), vv),
        ("S1_VH".into(), vh),
        ("S1_VVVH_ratio".into(), vv_vh),
        ("P2_HH".into(), hh),
        ("P2_HV".into(), hv),
        ("P2_HVHH_ratio".into(), hv_hh),
    ]);

    for (band, path) in &config.s2_bands {
        named.push((format!("S2_{band}"), load_raster(base.join(path))?));
    }

    if config.ndvi_pairs.is_empty() {
        return Err(Error::invalid("stack config has no ndvi_pairs"));
    }
    let ndvis = config
        .ndvi_pairs
        .iter()
        .map(|p| ndvi(&load_raster(base.join(&p.nir))?, &load_raster(base.join(&p.red))?))
        .collect::<Result<Vec<_>>>()?;
    named.push(("NDVI_mean".into(), temporal_reduce(&ndvis, Reducer::Mean, "NDVI_mean")?));
    named.push(("NDVI_max".into(), temporal_reduce(&ndvis, Reducer::Max, "NDVI_max")?));

    let dem = load_raster(base.join(&config.dem))?;
    let slope = slope_from_dem(&dem)?;
    let aspect = aspect_from_dem(&dem)?;
    let (lat, lon) = coordinate_grids(&dem.grid)?;
    named.extend([
        ("DEM".into(), dem),
        ("SLOPE".into(), slope),
        ("ASPECT".into(), aspect),
        ("LAT".into(), lat),
        ("LON".into(), lon),
    ]);
    assemble_stack(named)
}
