//! Accuracy metrics, holdout splitting, plot validation of maps, and
//! slope-stratified reports.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{PlotMeasurement, RasterGrid};

/// Slope bin lower edges in degrees; the last bin is open-ended.
pub const DEFAULT_SLOPE_BINS: [f64; 7] = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0];

/// Strata with fewer pairs than this report counts only.
const MIN_STRATUM_N: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub n: usize,
    /// None when the observations have zero variance.
    pub r2: Option<f64>,
    pub r2_undefined: bool,
    pub rmse: f64,
    /// Mean of predicted minus observed.
    pub bias: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub strata: Vec<Stratum>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub lower_deg: f64,
    /// None for the open-ended top bin.
    pub upper_deg: Option<f64>,
    pub n: usize,
    pub metrics: Option<MetricsReport>,
}

/// R² = 1 − SS_res/SS_tot, RMSE, and bias over paired observations.
pub fn metrics(y: &[f64], y_hat: &[f64], label: &str) -> Result<MetricsReport> {
    if y.len() != y_hat.len() {
        return Err(Error::invalid(format!(
            "{} observations but {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::insufficient("metrics need at least one pair"));
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let (mut ss_res, mut ss_tot, mut diff) = (0.0, 0.0, 0.0);
    for (&o, &p) in y.iter().zip(y_hat) {
        ss_res += (o - p) * (o - p);
        ss_tot += (o - mean) * (o - mean);
        diff += p - o;
    }
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Ok(MetricsReport {
        label: label.to_string(),
        n: y.len(),
        r2,
        r2_undefined: r2.is_none(),
        rmse: (ss_res / n).sqrt(),
        bias: diff / n,
        strata: Vec::new(),
    })
}

/// Seeded shuffle of 0..n, first ⌊ratio·n⌋ positions for training.
pub fn holdout_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid("holdout ratio must lie in (0, 1)"));
    }
    let n_train = (ratio * n as f64).floor() as usize;
    if n < 2 || n_train == 0 || n_train == n {
        return Err(Error::insufficient(format!("cannot split {n} samples at ratio {ratio}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

pub fn holdout_split<T: Clone>(samples: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let (train, test) = holdout_indices(samples.len(), ratio, seed)?;
    Ok((
        train.iter().map(|&i| samples[i].clone()).collect(),
        test.iter().map(|&i| samples[i].clone()).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPair {
    pub plot_id: String,
    pub observed: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotValidation {
    pub report: MetricsReport,
    pub pairs: Vec<PlotPair>,
    /// Plots on nodata pixels.
    pub excluded_nodata: usize,
    /// Plots outside the map extent.
    pub excluded_outside: usize,
}

/// Compare plot AGB with the map value of the pixel containing each plot.
pub fn validate_against_plots(map: &RasterGrid, plots: &[PlotMeasurement], label: &str) -> Result<PlotValidation> {
    let crs = map.grid.crs()?;
    let mut pairs = Vec::new();
    let (mut nodata, mut outside) = (0, 0);
    for p in plots {
        let observed = p
            .agb_mg_ha
            .ok_or_else(|| Error::invalid(format!("plot {} has no computed AGB", p.plot_id)))?;
        let (x, y) = crs.forward(p.lat, p.lon);
        match map.grid.cell_at(x, y) {
            None => outside += 1,
            Some((r, c)) => match map.value(r, c) {
                None => nodata += 1,
                Some(v) => pairs.push(PlotPair {
                    plot_id: p.plot_id.clone(),
                    observed,
                    predicted: v as f64,
                }),
            },
        }
    }
    if pairs.is_empty() {
        return Err(Error::insufficient("no plot overlaps a valid map pixel"));
    }
    let obs: Vec<f64> = pairs.iter().map(|p| p.observed).collect();
    let pred: Vec<f64> = pairs.iter().map(|p| p.predicted).collect();
    Ok(PlotValidation {
        report: metrics(&obs, &pred, label)?,
        pairs,
        excluded_nodata: nodata,
        excluded_outside: outside,
    })
}

pub fn write_pairs_csv(path: impl AsRef<Path>, pairs: &[PlotPair]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for p in pairs {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

/// Overall metrics plus one stratum per slope bin `[edge_i, edge_{i+1})`,
/// the last bin open-ended. Pairs below the first edge fall in the first bin.
pub fn slope_stratified_metrics(pairs: &[(f64, f64, f64)], bin_edges: &[f64], label: &str) -> Result<MetricsReport> {
    if bin_edges.is_empty() || bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("slope bin edges must be strictly increasing"));
    }
    let y: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let y_hat: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut report = metrics(&y, &y_hat, label)?;
    let mut groups: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); bin_edges.len()];
    for &(o, p, s) in pairs {
        let k = bin_edges.partition_point(|&e| e <= s).saturating_sub(1);
        groups[k].0.push(o);
        groups[k].1.push(p);
    }
    for (k, (o, p)) in groups.into_iter().enumerate() {
        let upper = bin_edges.get(k + 1).copied();
        let name = match upper {
            Some(u) => format!("{label} slope {}-{}", bin_edges[k], u),
            None => format!("{label} slope >{}", bin_edges[k]),
        };
        report.strata.push(Stratum {
            lower_deg: bin_edges[k],
            upper_deg: upper,
            n: o.len(),
            metrics: if o.len() >= MIN_STRATUM_N {
                Some(metrics(&o, &p, &name)?)
            } else {
                None
            },
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::GridSpec;
    use rand::{Rng, SeedableRng};

    #[test]
    fn perfect_and_offset() {
        let y = [1.0, 2.0, 3.0, 7.0];
        let m = metrics(&y, &y, "t").unwrap();
        assert_eq!((m.r2, m.rmse, m.bias), (Some(1.0), 0.0, 0.0));
        let shifted: Vec<f64> = y.iter().map(|v| v + 2.0).collect();
        let m = metrics(&y, &shifted, "t").unwrap();
        assert!((m.rmse - 2.0).abs() < 1e-12 && (m.bias - 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        let m = metrics(&[5.0, 5.0], &[4.0, 6.0], "t").unwrap();
        assert!(m.r2_undefined && m.r2.is_none());
        assert_eq!(m.rmse, 1.0);
        assert!(metrics(&[], &[], "t").is_err());
        assert!(metrics(&[1.0], &[1.0, 2.0], "t").is_err());
    }

    #[test]
    fn translation_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..100.0)).collect();
        let p: Vec<f64> = y.iter().map(|v| v + rng.random_range(-5.0..5.0)).collect();
        let a = metrics(&y, &p, "t").unwrap();
        let b = metrics(
            &y.iter().map(|v| v + 1000.0).collect::<Vec<_>>(),
            &p.iter().map(|v| v + 1000.0).collect::<Vec<_>>(),
            "t",
        )
        .unwrap();
        assert!((a.rmse - b.rmse).abs() < 1e-9 && (a.bias - b.bias).abs() < 1e-9);
        assert!(a.r2.unwrap() <= 1.0);
    }

    #[test]
    fn holdout_sizes_and_determinism() {
        let (tr, te) = holdout_indices(10, 0.6, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (6, 4));
        let (tr5, te5) = holdout_indices(5, 0.6, 3).unwrap();
        assert_eq!((tr5.len(), te5.len()), (3, 2));
        assert_eq!(holdout_indices(10, 0.6, 3).unwrap(), (tr.clone(), te.clone()));
        let mut all: Vec<usize> = tr.into_iter().chain(te).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(holdout_indices(1, 0.6, 0).is_err());
    }

    fn map(values: Vec<f32>) -> RasterGrid {
        let spec = GridSpec {
            origin_x: 500_000.0,
            origin_y: 5_000_000.0,
            pixel_size: 25.0,
            n_rows: 1,
            n_cols: values.len(),
            crs_id: "EPSG:32651".into(),
        };
        RasterGrid::new(spec, -9999.0, values, "agb").unwrap()
    }

    fn plot_at(m: &RasterGrid, col: usize, agb: f64) -> PlotMeasurement {
        let (x, y) = m.grid.cell_center(0, col);
        let (lat, lon) = m.grid.crs().unwrap().inverse(x, y);
        PlotMeasurement {
            plot_id: format!("p{col}"),
            lat,
            lon,
            diameter_m: 25.0,
            trees: vec![],
            agb_mg_ha: Some(agb),
        }
    }

    #[test]
    fn plot_validation_counts_exclusions() {
        let m = map(vec![100.0, -9999.0, 100.0]);
        let plots = vec![plot_at(&m, 0, 100.0), plot_at(&m, 1, 50.0), plot_at(&m, 2, 100.0)];
        let v = validate_against_plots(&m, &plots, "map").unwrap();
        assert_eq!(v.excluded_nodata, 1);
        assert_eq!(v.report.n, 2);
        assert!(v.report.r2_undefined);
        assert_eq!(v.report.rmse, 0.0);
        let only_void = vec![plot_at(&m, 1, 50.0)];
        assert!(validate_against_plots(&m, &only_void, "map").is_err());
    }

    #[test]
    fn strata_partition_pairs() {
        let pairs: Vec<(f64, f64, f64)> = (0..100).map(|i| (i as f64, i as f64 + 1.0, (i % 40) as f64)).collect();
        let r = slope_stratified_metrics(&pairs, &DEFAULT_SLOPE_BINS, "t").unwrap();
        assert_eq!(r.strata.len(), 7);
        assert_eq!(r.strata.iter().map(|s| s.n).sum::<usize>(), 100);
        assert_eq!(r.strata[6].upper_deg, None);
        let flat: Vec<(f64, f64, f64)> = (0..10).map(|i| (i as f64, i as f64, 2.0)).collect();
        let r = slope_stratified_metrics(&flat, &DEFAULT_SLOPE_BINS, "t").unwrap();
        assert_eq!(r.strata[0].n, 10);
        assert!(r.strata[1..].iter().all(|s| s.n == 0 && s.metrics.is_none()));
    }

    #[test]
    fn small_strata_counts_only() {
        let pairs = vec![(1.0, 1.0, 7.0), (2.0, 2.0, 7.0), (3.0, 3.5, 1.0), (4.0, 4.0, 1.0), (5.0, 5.0, 1.0)];
        let r = slope_stratified_metrics(&pairs, &DEFAULT_SLOPE_BINS, "t").unwrap();
        assert_eq!(r.strata[1].n, 2);
        assert!(r.strata[1].metrics.is_none());
        assert!(r.strata[0].metrics.is_some());
    }
}
