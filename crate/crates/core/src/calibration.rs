//! Field-plot biomass, RH-percentile selection, and the local height→AGB
//! model used to label footprints.

use std::fs::File;
use std::ops::RangeInclusive;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::crs::haversine_m;
use crate::error::{Error, Result};
use crate::ingest::{FootprintRecord, PlotMeasurement};

/// W = 0.1355 · (D²·H)^0.817, W in kg, D in cm, H in m.
const ALLOMETRY_SCALE: f64 = 0.1355;
const ALLOMETRY_EXPONENT: f64 = 0.817;
pub const DEFAULT_MIN_DBH_CM: f64 = 5.0;

/// Aboveground biomass of one tree in kilograms.
pub fn tree_agb(dbh_cm: f64, height_m: f64) -> Result<f64> {
    if !(dbh_cm > 0.0 && height_m > 0.0) || !dbh_cm.is_finite() || !height_m.is_finite() {
        return Err(Error::invalid(format!(
            "tree_agb needs positive DBH and height, got D={dbh_cm}, H={height_m}"
        )));
    }
    Ok(ALLOMETRY_SCALE * (dbh_cm * dbh_cm * height_m).powf(ALLOMETRY_EXPONENT))
}

/// Plot AGB density in Mg/ha over trees with DBH ≥ `min_dbh_cm`.
pub fn plot_agb(plot: &PlotMeasurement, min_dbh_cm: f64) -> Result<f64> {
    if !(plot.diameter_m > 0.0) {
        return Err(Error::invalid(format!("plot {} has non-positive diameter", plot.plot_id)));
    }
    let mut kg = 0.0;
    for t in plot.trees.iter().filter(|t| t.dbh_cm >= min_dbh_cm) {
        kg += tree_agb(t.dbh_cm, t.height_m)?;
    }
    Ok(kg / 1000.0 / plot.area_ha())
}

/// Fill `agb_mg_ha` on every plot.
pub fn compute_plot_agb(plots: &mut [PlotMeasurement], min_dbh_cm: f64) -> Result<()> {
    for p in plots.iter_mut() {
        p.agb_mg_ha = Some(plot_agb(p, min_dbh_cm)?);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotMatch {
    pub plot_index: usize,
    pub footprint_index: usize,
    pub distance_m: f64,
}

/// Pair each plot with its nearest footprint within `max_distance_m`.
/// Plots with no footprint in range are left out.
pub fn match_plots(plots: &[PlotMeasurement], footprints: &[FootprintRecord], max_distance_m: f64) -> Vec<PlotMatch> {
    plots
        .iter()
        .enumerate()
        .filter_map(|(pi, p)| {
            footprints
                .iter()
                .enumerate()
                .map(|(fi, f)| (fi, haversine_m(p.lat, p.lon, f.lat, f.lon)))
                .filter(|&(_, d)| d <= max_distance_m)
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(fi, d)| PlotMatch {
                    plot_index: pi,
                    footprint_index: fi,
                    distance_m: d,
                })
        })
        .collect()
}

/// A fitted model with the plot matching and percentile choice behind it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotCalibration {
    pub model: RhAgbModel,
    /// None when the percentile was given rather than selected.
    pub selection: Option<PercentileSelection>,
    pub matches: Vec<PlotMatch>,
    pub unmatched_plots: Vec<String>,
}

/// Match plots to footprints, pick the RH percentile (unless `percentile`
/// is given) and fit the RH→AGB model. Plot AGB must already be computed.
pub fn calibrate_from_plots(
    plots: &[PlotMeasurement],
    footprints: &[FootprintRecord],
    max_distance_m: f64,
    percentile: Option<u8>,
    candidates: RangeInclusive<u8>,
    form: AllometryForm,
    region_label: &str,
) -> Result<PlotCalibration> {
    if let Some(p) = plots.iter().find(|p| p.agb_mg_ha.is_none()) {
        return Err(Error::invalid(format!("plot {} has no AGB computed", p.plot_id)));
    }
    let matches = match_plots(plots, footprints, max_distance_m);
    let selection = match percentile {
        Some(_) => None,
        None => {
            let pairs: Vec<(f64, Vec<(u8, f64)>)> = matches
                .iter()
                .map(|m| (plots[m.plot_index].agb_mg_ha.unwrap_or(0.0), footprints[m.footprint_index].rh.clone()))
                .collect();
            Some(select_rh_percentile(&pairs, candidates)?)
        }
    };
    let percentile = percentile.or(selection.as_ref().map(|s| s.percentile)).unwrap_or(98);
    let fit_pairs: Vec<(f64, f64)> = matches
        .iter()
        .filter_map(|m| {
            let rh = footprints[m.footprint_index].rh_at(percentile)?;
            Some((rh, plots[m.plot_index].agb_mg_ha?))
        })
        .collect();
    let model = fit_rh_agb(&fit_pairs, percentile, form, region_label)?;
    let matched: std::collections::BTreeSet<usize> = matches.iter().map(|m| m.plot_index).collect();
    let unmatched_plots = (0..plots.len())
        .filter(|i| !matched.contains(i))
        .map(|i| plots[i].plot_id.clone())
        .collect();
    Ok(PlotCalibration {
        model,
        selection,
        matches,
        unmatched_plots,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileCorrelation {
    pub percentile: u8,
    pub correlation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileSelection {
    pub percentile: u8,
    pub correlation: f64,
    pub table: Vec<PercentileCorrelation>,
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Pick the RH percentile whose heights correlate best (Pearson) with plot
/// AGB. Candidates missing from any plot, or with no variance, are skipped
/// and flagged in the table. Ties go to the lower percentile.
pub fn select_rh_percentile(
    pairs: &[(f64, Vec<(u8, f64)>)],
    candidates: RangeInclusive<u8>,
) -> Result<PercentileSelection> {
    if pairs.len() < 3 {
        return Err(Error::insufficient(format!(
            "percentile selection needs at least 3 plot/footprint pairs, got {}",
            pairs.len()
        )));
    }
    let agb: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let present: std::collections::BTreeSet<u8> = pairs
        .iter()
        .flat_map(|p| p.1.iter().map(|&(q, _)| q))
        .filter(|q| candidates.contains(q))
        .collect();
    let mut table = Vec::new();
    let mut best: Option<(u8, f64)> = None;
    for q in present {
        let col: Option<Vec<f64>> = pairs
            .iter()
            .map(|p| p.1.iter().find(|&&(pq, _)| pq == q).map(|&(_, h)| h))
            .collect();
        let entry = match col {
            None => PercentileCorrelation {
                percentile: q,
                correlation: None,
                skipped: Some("missing in some records".into()),
            },
            Some(col) => match pearson(&col, &agb) {
                Some(r) => {
                    if best.is_none_or(|b| r > b.1) {
                        best = Some((q, r));
                    }
                    PercentileCorrelation {
                        percentile: q,
                        correlation: Some(r),
                        skipped: None,
                    }
                }
                None => PercentileCorrelation {
                    percentile: q,
                    correlation: None,
                    skipped: Some("no variance".into()),
                },
            },
        };
        table.push(entry);
    }
    let (percentile, correlation) =
        best.ok_or_else(|| Error::insufficient("no candidate percentile has variance in both RH and AGB"))?;
    Ok(PercentileSelection {
        percentile,
        correlation,
        table,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllometryForm {
    /// AGB = a · RH^b
    Power,
    /// AGB = a + b · RH
    Linear,
}

impl FromStr for AllometryForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "power" => Ok(AllometryForm::Power),
            "linear" => Ok(AllometryForm::Linear),
            other => Err(Error::invalid(format!("unknown allometry form `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhAgbModel {
    pub rh_percentile: u8,
    pub form: AllometryForm,
    pub a: f64,
    pub b: f64,
    pub r2: f64,
    pub rmse_mg_ha: f64,
    pub n_plots: usize,
    pub region_label: String,
    /// Zero-AGB plots left out of the log-space power fit.
    #[serde(default)]
    pub zero_agb_excluded: usize,
    /// Calendar date the model was fitted (YYYY-MM-DD).
    #[serde(default)]
    pub date: String,
}

impl RhAgbModel {
    /// Model output before clamping.
    pub fn raw(&self, rh_m: f64) -> f64 {
        match self.form {
            AllometryForm::Power => self.a * rh_m.max(0.0).powf(self.b),
            AllometryForm::Linear => self.a + self.b * rh_m,
        }
    }

    pub fn predict(&self, rh_m: f64) -> f64 {
        self.raw(rh_m).max(0.0)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(f)?)
    }
}

fn linear_ls(pairs: impl Iterator<Item = (f64, f64)> + Clone) -> Option<(f64, f64)> {
    let (mut n, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs.clone() {
        n += 1.0;
        sx += x;
        sy += y;
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, y) in pairs {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    (sxx > 0.0).then(|| {
        let b = sxy / sxx;
        (my - b * mx, b)
    })
}

/// Fit AGB against RH height. The power form is fitted as a line in
/// log-log space over positive-AGB pairs; r2 and RMSE are always computed in
/// the AGB domain over every pair.
pub fn fit_rh_agb(
    pairs: &[(f64, f64)],
    percentile: u8,
    form: AllometryForm,
    region_label: &str,
) -> Result<RhAgbModel> {
    if pairs.len() < 3 {
        return Err(Error::insufficient(format!(
            "RH→AGB fit needs at least 3 pairs, got {}",
            pairs.len()
        )));
    }
    if pairs.iter().all(|p| p.1 == 0.0) {
        return Err(Error::insufficient("all plot AGB values are zero"));
    }
    let mut zero_agb_excluded = 0;
    let (a, b) = match form {
        AllometryForm::Power => {
            if let Some(p) = pairs.iter().find(|p| p.0 <= 0.0) {
                return Err(Error::invalid(format!("power form needs rh > 0, got {}", p.0)));
            }
            zero_agb_excluded = pairs.iter().filter(|p| p.1 <= 0.0).count();
            if zero_agb_excluded > 0 {
                tracing::warn!(zero_agb_excluded, "zero-AGB plots excluded from log fit");
            }
            let (ln_a, b) = linear_ls(pairs.iter().filter(|p| p.1 > 0.0).map(|p| (p.0.ln(), p.1.ln())))
                .ok_or_else(|| Error::insufficient("RH heights have no spread"))?;
            (ln_a.exp(), b)
        }
        AllometryForm::Linear => linear_ls(pairs.iter().copied())
            .ok_or_else(|| Error::insufficient("RH heights have no spread"))?,
    };
    let mut model = RhAgbModel {
        rh_percentile: percentile,
        form,
        a,
        b,
        r2: 0.0,
        rmse_mg_ha: 0.0,
        n_plots: pairs.len(),
        region_label: region_label.to_string(),
        zero_agb_excluded,
        date: chrono::Utc::now().date_naive().to_string(),
    };
    let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let y_hat: Vec<f64> = pairs.iter().map(|p| model.raw(p.0)).collect();
    let m = crate::evaluation::metrics(&y, &y_hat, "rh_agb")?;
    model.r2 = m.r2.unwrap_or(0.0);
    model.rmse_mg_ha = m.rmse;
    Ok(model)
}

/// A footprint labeled with AGB, plus its feature vector once sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub shot_id: String,
    pub lat: f64,
    pub lon: f64,
    pub agb_mg_ha: f64,
    pub features: Vec<f64>,
    pub slope_deg: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Labeling {
    pub samples: Vec<LabeledSample>,
    /// Negative model outputs clamped to zero.
    pub clamped: usize,
}

/// Convert each footprint's RH at the model percentile to AGB.
pub fn label_footprints(footprints: &[FootprintRecord], model: &RhAgbModel) -> Result<Labeling> {
    let mut out = Labeling::default();
    out.samples.reserve(footprints.len());
    for f in footprints {
        let rh = f.rh_at(model.rh_percentile).ok_or_else(|| {
            Error::invalid(format!("footprint {} has no rh{}", f.shot_id, model.rh_percentile))
        })?;
        let raw = model.raw(rh);
        if raw < 0.0 {
            out.clamped += 1;
        }
        out.samples.push(LabeledSample {
            shot_id: f.shot_id.clone(),
            lat: f.lat,
            lon: f.lon,
            agb_mg_ha: raw.max(0.0),
            features: Vec::new(),
            slope_deg: None,
        });
    }
    Ok(out)
}

const SAMPLE_FIXED_COLUMNS: [&str; 5] = ["shot_id", "lat", "lon", "agb_mg_ha", "slope_deg"];

/// Write labeled samples as CSV; feature columns follow the fixed columns.
pub fn write_samples(path: impl AsRef<Path>, samples: &[LabeledSample], feature_names: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = SAMPLE_FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(feature_names.iter().cloned());
    w.write_record(&header)?;
    for s in samples {
        let mut row = vec![
            s.shot_id.clone(),
            s.lat.to_string(),
            s.lon.to_string(),
            s.agb_mg_ha.to_string(),
            s.slope_deg.map(|v| v.to_string()).unwrap_or_default(),
        ];
        if !s.features.is_empty() {
            if s.features.len() != feature_names.len() {
                return Err(Error::invalid(format!(
                    "sample {} has {} features, header has {}",
                    s.shot_id,
                    s.features.len(),
                    feature_names.len()
                )));
            }
            row.extend(s.features.iter().map(|v| v.to_string()));
        } else {
            row.extend(std::iter::repeat_n(String::new(), feature_names.len()));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read samples written by [`write_samples`]; returns the feature names.
/// Rows with empty feature cells get an empty feature vector.
pub fn load_samples(path: impl AsRef<Path>) -> Result<(Vec<LabeledSample>, Vec<String>)> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    for (i, name) in SAMPLE_FIXED_COLUMNS.iter().enumerate() {
        if headers.get(i) != Some(name) {
            return Err(Error::MissingColumn(name.to_string()));
        }
    }
    let names: Vec<String> = headers.iter().skip(SAMPLE_FIXED_COLUMNS.len()).map(String::from).collect();
    let num = |s: &str, what: &str, line: usize| {
        s.parse::<f64>()
            .map_err(|_| Error::invalid(format!("{}: line {line}: bad {what} `{s}`", path.display())))
    };
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 1;
        let slope = match &row[4] {
            "" => None,
            s => Some(num(s, "slope_deg", line)?),
        };
        let features = if row.iter().skip(5).all(str::is_empty) {
            Vec::new()
        } else {
            row.iter()
                .skip(5)
                .map(|s| num(s, "feature", line))
                .collect::<Result<Vec<f64>>>()?
        };
        out.push(LabeledSample {
            shot_id: row[0].to_string(),
            lat: num(&row[1], "lat", line)?,
            lon: num(&row[2], "lon", line)?,
            agb_mg_ha: num(&row[3], "agb_mg_ha", line)?,
            features,
            slope_deg: slope,
        });
    }
    Ok((out, names))
}
