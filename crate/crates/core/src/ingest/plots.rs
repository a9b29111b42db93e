use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RowReject;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeRecord {
    pub plot_id: String,
    pub dbh_cm: f64,
    pub height_m: f64,
}

/// Circular field plot with its measured trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotMeasurement {
    pub plot_id: String,
    pub lat: f64,
    pub lon: f64,
    pub diameter_m: f64,
    pub trees: Vec<TreeRecord>,
    /// Mg/ha; set by [`crate::calibration::compute_plot_agb`].
    pub agb_mg_ha: Option<f64>,
}

pub const DEFAULT_PLOT_DIAMETER_M: f64 = 25.0;

impl PlotMeasurement {
    pub fn area_ha(&self) -> f64 {
        std::f64::consts::PI * (self.diameter_m / 2.0).powi(2) / 10_000.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct PlotLoad {
    pub plots: Vec<PlotMeasurement>,
    /// Rejected plot-header rows.
    pub plot_rejects: Vec<RowReject>,
    /// Rejected tree rows.
    pub tree_rejects: Vec<RowReject>,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn num(row: &csv::StringRecord, idx: usize, name: &str) -> std::result::Result<f64, String> {
    row.get(idx)
        .and_then(|s| s.trim().parse::<f64>().ok())
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("non-numeric {name}"))
}

/// Load plot headers (`plot_id,lat,lon[,diameter_m]`) and tree rows
/// (`plot_id,dbh_cm,height_m`). Trees are attached to their plot in file
/// order; `agb_mg_ha` is left unset.
pub fn load_plots(plots_path: impl AsRef<Path>, trees_path: impl AsRef<Path>) -> Result<PlotLoad> {
    let (p, t) = (plots_path.as_ref(), trees_path.as_ref());
    let pf = File::open(p).map_err(|e| Error::io(p, e))?;
    let tf = File::open(t).map_err(|e| Error::io(t, e))?;
    read_plots(pf, tf)
}

pub fn read_plots<P: Read, T: Read>(plots: P, trees: T) -> Result<PlotLoad> {
    let mut out = PlotLoad::default();
    let mut index: HashMap<String, usize> = HashMap::new();

    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(plots);
    let headers = rdr.headers()?.clone();
    let (c_id, c_lat, c_lon) = (
        column(&headers, "plot_id")?,
        column(&headers, "lat")?,
        column(&headers, "lon")?,
    );
    let c_diam = column(&headers, "diameter_m").ok();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 1;
        let parsed = row.map_err(|e| format!("malformed row: {e}")).and_then(|row| {
            let plot_id = row.get(c_id).map(|s| s.trim().to_string()).unwrap_or_default();
            if plot_id.is_empty() {
                return Err("empty plot_id".to_string());
            }
            let diameter_m = match c_diam.and_then(|c| row.get(c)).map(str::trim) {
                None | Some("") => DEFAULT_PLOT_DIAMETER_M,
                Some(_) => num(&row, c_diam.unwrap(), "diameter_m")?,
            };
            if diameter_m <= 0.0 {
                return Err("non-positive diameter_m".to_string());
            }
            Ok(PlotMeasurement {
                plot_id,
                lat: num(&row, c_lat, "lat")?,
                lon: num(&row, c_lon, "lon")?,
                diameter_m,
                trees: Vec::new(),
                agb_mg_ha: None,
            })
        });
        match parsed {
            Ok(plot) if index.contains_key(&plot.plot_id) => out.plot_rejects.push(RowReject {
                line,
                reason: format!("duplicate plot_id {}", plot.plot_id),
            }),
            Ok(plot) => {
                index.insert(plot.plot_id.clone(), out.plots.len());
                out.plots.push(plot);
            }
            Err(reason) => out.plot_rejects.push(RowReject { line, reason }),
        }
    }

    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(trees);
    let headers = rdr.headers()?.clone();
    let (c_id, c_dbh, c_h) = (
        column(&headers, "plot_id")?,
        column(&headers, "dbh_cm")?,
        column(&headers, "height_m")?,
    );
    for (i, row) in rdr.records().enumerate() {
        let line = i + 1;
        let parsed = row.map_err(|e| format!("malformed row: {e}")).and_then(|row| {
            let plot_id = row.get(c_id).map(|s| s.trim().to_string()).unwrap_or_default();
            let dbh_cm = num(&row, c_dbh, "dbh_cm")?;
            let height_m = num(&row, c_h, "height_m")?;
            if dbh_cm <= 0.0 {
                return Err("non-positive dbh_cm".to_string());
            }
            if height_m <= 0.0 {
                return Err("non-positive height_m".to_string());
            }
            let slot = *index
                .get(&plot_id)
                .ok_or_else(|| format!("unknown plot_id {plot_id}"))?;
            Ok((slot, TreeRecord { plot_id, dbh_cm, height_m }))
        });
        match parsed {
            Ok((slot, tree)) => out.plots[slot].trees.push(tree),
            Err(reason) => out.tree_rejects.push(RowReject { line, reason }),
        }
    }
    Ok(out)
}

/// Write plot headers and tree rows in the layout read by [`read_plots`].
pub fn write_plots<P: Write, T: Write>(plots: &[PlotMeasurement], plots_out: P, trees_out: T) -> Result<()> {
    let mut w = csv::Writer::from_writer(plots_out);
    w.write_record(["plot_id", "lat", "lon", "diameter_m"])?;
    for p in plots {
        w.write_record([p.plot_id.clone(), p.lat.to_string(), p.lon.to_string(), p.diameter_m.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<plots csv>", e))?;
    let mut w = csv::Writer::from_writer(trees_out);
    w.write_record(["plot_id", "dbh_cm", "height_m"])?;
    for t in plots.iter().flat_map(|p| &p.trees) {
        w.write_record([t.plot_id.clone(), t.dbh_cm.to_string(), t.height_m.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<trees csv>", e))?;
    Ok(())
}

pub fn save_plots(plots: &[PlotMeasurement], plots_path: impl AsRef<Path>, trees_path: impl AsRef<Path>) -> Result<()> {
    let (p, t) = (plots_path.as_ref(), trees_path.as_ref());
    let pf = File::create(p).map_err(|e| Error::io(p, e))?;
    let tf = File::create(t).map_err(|e| Error::io(t, e))?;
    write_plots(plots, pf, tf)
}
