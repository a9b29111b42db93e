//! Backscatter-vs-canopy-height consistency screening.
//!
//! A curve γ = f(RH) is fitted in the dB domain for each polarization, and
//! footprints whose backscatter sits further than `tolerance_db` from the
//! curve (for any configured polarization) are discarded. A fit trained in
//! one region can be serialized and applied to another.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::FootprintRecord;
use crate::stack::FeatureStack;
use crate::Rejected;

pub const DEFAULT_TOLERANCE_DB: f64 = 3.0;
pub const MIN_FIT_POINTS: usize = 10;
const GN_MAX_ITER: usize = 100;
const GN_STEP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Polarization {
    HH,
    HV,
    VH,
    VV,
}

impl Polarization {
    pub const ALL: [Polarization; 4] = [Polarization::HH, Polarization::HV, Polarization::VH, Polarization::VV];

    /// Stack layer holding this polarization's backscatter.
    pub fn layer_name(&self) -> &'static str {
        match self {
            Polarization::HH => "P2_HH",
            Polarization::HV => "P2_HV",
            Polarization::VH => "S1_VH",
            Polarization::VV => "S1_VV",
        }
    }

    /// Footprint-table column carrying a pre-sampled value, e.g. `gamma_hv`.
    pub fn column_name(&self) -> String {
        format!("gamma_{}", self.to_string().to_ascii_lowercase())
    }
}

impl fmt::Display for Polarization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Polarization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "HH" => Ok(Polarization::HH),
            "HV" => Ok(Polarization::HV),
            "VH" => Ok(Polarization::VH),
            "VV" => Ok(Polarization::VV),
            other => Err(Error::invalid(format!("unknown polarization `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveForm {
    /// γ = a + b·ln(RH)
    LogLinear,
    /// γ = a − b·exp(−c·RH)
    SaturatingExp,
}

impl FromStr for CurveForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "log_linear" => Ok(CurveForm::LogLinear),
            "saturating_exp" => Ok(CurveForm::SaturatingExp),
            other => Err(Error::invalid(format!("unknown curve form `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveFit {
    pub polarization: Polarization,
    pub form: CurveForm,
    pub a: f64,
    pub b: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    pub r2: f64,
    pub rmse_db: f64,
    pub tolerance_db: f64,
    pub n_points: usize,
    /// r2 was set to 0 because the backscatter values had no variance.
    #[serde(default)]
    pub r2_degenerate: bool,
    /// The saturating fit failed and this is the log-linear fallback.
    #[serde(default)]
    pub fell_back: bool,
}

impl CurveFit {
    pub fn eval(&self, rh_m: f64) -> Result<f64> {
        match self.form {
            CurveForm::LogLinear => {
                if rh_m <= 0.0 {
                    return Err(Error::invalid(format!("log-linear curve needs rh > 0, got {rh_m}")));
                }
                Ok(self.a + self.b * rh_m.ln())
            }
            CurveForm::SaturatingExp => Ok(self.a - self.b * (-self.c.unwrap_or(0.0) * rh_m).exp()),
        }
    }

    pub fn with_tolerance(mut self, tolerance_db: f64) -> Self {
        self.tolerance_db = tolerance_db;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitStatistics {
    pub r2: f64,
    pub rmse_db: f64,
    /// Backscatter had zero variance; `r2` is the conventional 0.
    pub degenerate: bool,
}

/// Observed minus fitted backscatter, in dB.
pub fn residual_db(fit: &CurveFit, rh_m: f64, gamma_db: f64) -> Result<f64> {
    Ok(gamma_db - fit.eval(rh_m)?)
}

/// Coefficient of determination and RMSE of the backscatter values about
/// the fitted curve.
pub fn fit_statistics(pairs: &[(f64, f64)], fit: &CurveFit) -> Result<FitStatistics> {
    if pairs.is_empty() {
        return Err(Error::insufficient("no pairs"));
    }
    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for &(rh, g) in pairs {
        let r = g - fit.eval(rh)?;
        ss_res += r * r;
        ss_tot += (g - mean) * (g - mean);
    }
    let degenerate = ss_tot == 0.0;
    Ok(FitStatistics {
        r2: if degenerate { 0.0 } else { 1.0 - ss_res / ss_tot },
        rmse_db: (ss_res / n).sqrt(),
        degenerate,
    })
}

/// Least-squares line y = a + b·x; `None` when x has no spread.
fn linear_fit(xs: impl Iterator<Item = (f64, f64)> + Clone) -> Option<(f64, f64)> {
    let (mut n, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.clone() {
        n += 1.0;
        sx += x;
        sy += y;
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, y) in xs {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 {
        return None;
    }
    let b = sxy / sxx;
    Some((my - b * mx, b))
}

fn sse(pairs: &[(f64, f64)], f: impl Fn(f64) -> f64) -> f64 {
    pairs.iter().map(|&(h, g)| (g - f(h)).powi(2)).sum()
}

fn fit_log_linear(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    if let Some(&(rh, _)) = pairs.iter().find(|p| p.0 <= 0.0) {
        return Err(Error::invalid(format!("log-linear fit needs rh > 0, got {rh}")));
    }
    linear_fit(pairs.iter().map(|&(h, g)| (h.ln(), g)))
        .ok_or_else(|| Error::insufficient("rh values have no spread"))
}

/// Coarse grid over the rate `c`, each point solved for (a, b) in closed
/// form, then Gauss-Newton on all three parameters with step halving.
/// `None` on non-convergence or when the optimum leaves b > 0, c > 0.
fn fit_saturating(pairs: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    let max_h = pairs.iter().map(|p| p.0.abs()).fold(0.0, f64::max).max(1e-6);
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for k in 0..=120 {
        // rates from 0.01/max_h to 100/max_h
        let c = 10f64.powf(-2.0 + 4.0 * k as f64 / 120.0) / max_h;
        let Some((a, beta)) = linear_fit(pairs.iter().map(|&(h, g)| ((-c * h).exp(), g))) else {
            continue;
        };
        if beta >= 0.0 {
            continue;
        }
        let b = -beta;
        let s = sse(pairs, |h| a - b * (-c * h).exp());
        if best.is_none_or(|bst| s < bst.3) {
            best = Some((a, b, c, s));
        }
    }
    let (mut a, mut b, mut c, mut cost) = best?;
    let n = pairs.len();
    for _ in 0..GN_MAX_ITER {
        let mut jac = DMatrix::<f64>::zeros(n, 3);
        let mut res = DVector::<f64>::zeros(n);
        for (i, &(h, g)) in pairs.iter().enumerate() {
            let e = (-c * h).exp();
            jac[(i, 0)] = 1.0;
            jac[(i, 1)] = -e;
            jac[(i, 2)] = b * h * e;
            res[i] = g - (a - b * e);
        }
        let step = jac.svd(true, true).solve(&res, 1e-14).ok()?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let (na, nb, nc) = (a + t * step[0], b + t * step[1], c + t * step[2]);
            let s = sse(pairs, |h| na - nb * (-nc * h).exp());
            if s.is_finite() && s <= cost {
                accepted = Some((na, nb, nc, s));
                break;
            }
            t *= 0.5;
        }
        let Some((na, nb, nc, s)) = accepted else {
            // no descent direction left: already at the optimum
            return (b > 0.0 && c > 0.0).then_some((a, b, c));
        };
        let converged = [(na, a), (nb, b), (nc, c)]
            .iter()
            .all(|&(new, old)| (new - old).abs() <= GN_STEP_TOL * (1.0 + old.abs()));
        (a, b, c, cost) = (na, nb, nc, s);
        if converged {
            return (b > 0.0 && c > 0.0).then_some((a, b, c));
        }
    }
    None
}

/// Fit backscatter against canopy height. Saturating fits that fail to
/// converge within the iteration budget (or leave b, c ≤ 0) fall back to the
/// log-linear form with `fell_back` set.
pub fn fit_rh_backscatter(pairs: &[(f64, f64)], form: CurveForm, polarization: Polarization) -> Result<CurveFit> {
    if pairs.len() < MIN_FIT_POINTS {
        return Err(Error::insufficient(format!(
            "curve fit needs at least {MIN_FIT_POINTS} pairs, got {}",
            pairs.len()
        )));
    }
    if pairs.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::invalid("non-finite pair"));
    }
    let mut fit = CurveFit {
        polarization,
        form,
        a: 0.0,
        b: 0.0,
        c: None,
        r2: 0.0,
        rmse_db: 0.0,
        tolerance_db: DEFAULT_TOLERANCE_DB,
        n_points: pairs.len(),
        r2_degenerate: false,
        fell_back: false,
    };
    let saturating = match form {
        CurveForm::SaturatingExp => fit_saturating(pairs),
        CurveForm::LogLinear => None,
    };
    match saturating {
        Some((a, b, c)) => {
            fit.a = a;
            fit.b = b;
            fit.c = Some(c);
        }
        None => {
            if form == CurveForm::SaturatingExp {
                tracing::warn!(%polarization, "saturating fit failed; falling back to log-linear");
                fit.fell_back = true;
                fit.form = CurveForm::LogLinear;
            }
            let (a, b) = fit_log_linear(pairs)?;
            fit.a = a;
            fit.b = b;
        }
    }
    let stats = fit_statistics(pairs, &fit)?;
    fit.r2 = stats.r2;
    fit.rmse_db = stats.rmse_db;
    fit.r2_degenerate = stats.degenerate;
    Ok(fit)
}

/// Per-footprint backscatter samples, keyed by polarization.
pub type PolSamples = BTreeMap<Polarization, f64>;

/// Read pre-sampled backscatter from `gamma_<pol>` extra columns.
pub fn samples_from_columns(footprints: &[FootprintRecord], pols: &[Polarization]) -> Vec<PolSamples> {
    footprints
        .iter()
        .map(|r| {
            pols.iter()
                .filter_map(|p| r.extras.get(&p.column_name()).map(|&v| (*p, v)))
                .collect()
        })
        .collect()
}

/// Sample backscatter for each footprint from the matching stack layers.
/// Footprints outside the stack or on nodata get no value for that layer.
pub fn samples_from_stack(stack: &FeatureStack, footprints: &[FootprintRecord], pols: &[Polarization]) -> Result<Vec<PolSamples>> {
    let layers: Vec<(Polarization, usize)> = pols
        .iter()
        .map(|p| {
            stack
                .layer_names
                .iter()
                .position(|n| n == p.layer_name())
                .map(|i| (*p, i))
                .ok_or_else(|| Error::invalid(format!("stack has no {} layer", p.layer_name())))
        })
        .collect::<Result<_>>()?;
    let crs = stack.grid.crs()?;
    Ok(footprints
        .par_iter()
        .map(|r| {
            let (x, y) = crs.forward(r.lat, r.lon);
            let Some((row, col)) = stack.grid.cell_at(x, y) else {
                return PolSamples::new();
            };
            layers
                .iter()
                .filter_map(|&(p, i)| stack.layers[i].value(row, col).map(|v| (p, v as f64)))
                .collect()
        })
        .collect())
}

/// (RH, γ) pairs for one polarization over footprints that have both.
pub fn fit_pairs(
    footprints: &[FootprintRecord],
    samples: &[PolSamples],
    pol: Polarization,
    rh_percentile: u8,
) -> Vec<(f64, f64)> {
    footprints
        .iter()
        .zip(samples)
        .filter_map(|(r, s)| Some((r.rh_at(rh_percentile)?, *s.get(&pol)?)))
        .filter(|(h, g)| h.is_finite() && g.is_finite())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateSource {
    Columns,
    Stack,
}

/// Backscatter per footprint: from `gamma_<pol>` columns when every
/// footprint carries them, otherwise sampled from the stack.
pub fn backscatter_samples(
    stack: Option<&FeatureStack>,
    footprints: &[FootprintRecord],
    pols: &[Polarization],
) -> Result<(Vec<PolSamples>, CovariateSource)> {
    let from_columns = !footprints.is_empty()
        && footprints
            .iter()
            .all(|f| pols.iter().all(|p| f.extras.contains_key(&p.column_name())));
    if from_columns {
        return Ok((samples_from_columns(footprints, pols), CovariateSource::Columns));
    }
    match stack {
        Some(stack) => Ok((samples_from_stack(stack, footprints, pols)?, CovariateSource::Stack)),
        None => Err(Error::invalid(
            "footprints lack gamma_<pol> columns and no stack was given to sample them",
        )),
    }
}

/// Read (RH, γ dB) pairs from a CSV with `rh` and `gamma_db` columns.
pub fn load_pairs(path: impl AsRef<std::path::Path>) -> Result<Vec<(f64, f64)>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (ch, cg) = (col("rh")?, col("gamma_db")?);
    let mut out = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row?;
        let num = |i: usize| {
            row.get(i)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::invalid(format!("{}: line {}: non-numeric value", path.display(), line + 2)))
        };
        out.push((num(ch)?, num(cg)?));
    }
    Ok(out)
}

impl CurveFit {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<CurveFit> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(f)?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct BandOutcome {
    pub retained: Vec<FootprintRecord>,
    pub rejected: Vec<Rejected<FootprintRecord>>,
}

fn band_reasons(record: &FootprintRecord, samples: &PolSamples, fits: &[CurveFit], rh_percentile: u8) -> Vec<String> {
    let Some(rh) = record.rh_at(rh_percentile) else {
        return vec![format!("missing rh{rh_percentile}")];
    };
    let mut reasons = Vec::new();
    for fit in fits {
        let Some(&g) = samples.get(&fit.polarization).filter(|g| g.is_finite()) else {
            reasons.push(format!("missing covariate {}", fit.polarization));
            continue;
        };
        match residual_db(fit, rh, g) {
            Ok(r) if r.abs() <= fit.tolerance_db => {}
            Ok(r) => reasons.push(format!("outside band {} ({r:+.2} dB)", fit.polarization)),
            Err(_) => reasons.push(format!("rh{rh_percentile} outside curve domain")),
        }
    }
    reasons
}

/// Keep footprints whose backscatter lies within each fit's tolerance band
/// for every supplied fit. `samples[i]` belongs to `footprints[i]`.
pub fn filter_by_band(
    footprints: Vec<FootprintRecord>,
    samples: &[PolSamples],
    fits: &[CurveFit],
    rh_percentile: u8,
) -> Result<BandOutcome> {
    if samples.len() != footprints.len() {
        return Err(Error::invalid(format!(
            "{} sample sets for {} footprints",
            samples.len(),
            footprints.len()
        )));
    }
    let verdicts: Vec<Vec<String>> = footprints
        .par_iter()
        .zip(samples.par_iter())
        .map(|(r, s)| band_reasons(r, s, fits, rh_percentile))
        .collect();
    let mut out = BandOutcome::default();
    for (record, reasons) in footprints.into_iter().zip(verdicts) {
        if reasons.is_empty() {
            out.retained.push(record);
        } else {
            out.rejected.push(Rejected { record, reasons });
        }
    }
    Ok(out)
}
