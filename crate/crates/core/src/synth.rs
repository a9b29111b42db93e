//! Seeded synthetic worlds for tests and demos: a known AGB field, the
//! rasters and lidar shots it would produce, and field plots measured on it.
//!
//! Heights follow AGB = 0.6·H^1.7, so labeling shots with that power law
//! recovers the truth up to the RH noise. Backscatter follows saturating
//! exponentials of height; optical bands respond to a mix of linear and
//! saturating AGB terms.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::calibration::{tree_agb, AllometryForm, RhAgbModel};
use crate::error::{Error, Result};
use crate::ingest::{save_plots, write_footprints, write_raster, FootprintRecord, GridSpec, PlotMeasurement, RasterGrid, TreeRecord};
use crate::pipeline::{PipelineConfig, PipelinePaths};
use crate::sar::{CurveFit, CurveForm, PolSamples, Polarization};
use crate::stack::{focal_mean, slope_from_dem, temporal_reduce, NdviPair, Reducer, StackConfig, NODATA};

pub const TRUE_A: f64 = 0.6;
pub const TRUE_B: f64 = 1.7;

/// Hansen-style layers use this nodata value.
const MASK_NODATA: f32 = 255.0;

pub const RH_PERCENTILES: [u8; 13] = [25, 30, 40, 50, 60, 70, 75, 80, 85, 90, 95, 98, 100];

/// γ = a − b·exp(−c·H) in dB for each polarization.
pub fn true_curve(pol: Polarization) -> (f64, f64, f64) {
    match pol {
        Polarization::HV => (-10.0, 15.0, 0.07),
        Polarization::HH => (-5.0, 9.0, 0.05),
        Polarization::VH => (-14.0, 7.0, 0.10),
        Polarization::VV => (-8.0, 4.0, 0.10),
    }
}

pub fn true_backscatter(pol: Polarization, height_m: f64) -> f64 {
    let (a, b, c) = true_curve(pol);
    a - b * (-c * height_m.max(0.0)).exp()
}

/// Height giving backscatter `gamma_db` on the true curve; `None` outside
/// the curve's range.
pub fn inverse_backscatter(pol: Polarization, gamma_db: f64) -> Option<f64> {
    let (a, b, c) = true_curve(pol);
    let t = (a - gamma_db) / b;
    (t > 0.0 && t <= 1.0).then(|| -t.ln() / c)
}

pub fn height_from_agb(agb: f64) -> f64 {
    (agb.max(0.0) / TRUE_A).powf(1.0 / TRUE_B)
}

pub fn agb_from_height(h: f64) -> f64 {
    TRUE_A * h.max(0.0).powf(TRUE_B)
}

/// The RH98 power law used to build the world.
pub fn true_model() -> RhAgbModel {
    RhAgbModel {
        rh_percentile: 98,
        form: AllometryForm::Power,
        a: TRUE_A,
        b: TRUE_B,
        r2: 1.0,
        rmse_mg_ha: 0.0,
        n_plots: 0,
        region_label: "synthetic".into(),
        zero_agb_excluded: 0,
        date: String::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub n_rows: usize,
    pub n_cols: usize,
    pub pixel_size_m: f64,
    pub crs_id: String,
    pub origin_x: f64,
    pub origin_y: f64,
    /// Peak terrain amplitude on the rugged (east) side, metres.
    pub relief_m: f64,
    pub agb_max: f64,
    /// Shortest and longest wavelengths of the AGB field, metres.
    pub agb_wavelengths_m: (f64, f64),
    /// Multiplicative per-pixel AGB texture (log-normal sd).
    pub agb_texture: f64,
    pub n_footprints: usize,
    /// Probability that a shot comes from a coverage beam.
    pub coverage_beam_rate: f64,
    /// Independent failure probabilities for the other screening flags.
    pub quality_fail_rate: f64,
    pub degrade_rate: f64,
    pub low_sensitivity_rate: f64,
    pub day_rate: f64,
    /// Share of flag-failing shots whose RH is replaced by junk.
    pub corrupt_failed_rh: f64,
    /// Share of all shots given an RH inconsistent with the local HV.
    pub outlier_fraction: f64,
    pub outlier_offset_db: f64,
    /// Relative RH98 noise.
    pub rh_noise: f64,
    /// Extra RH98 noise sd per unit tan(slope), metres.
    pub rh_slope_noise_m: f64,
    pub speckle_db: f64,
    /// Amplitude of the illumination term sin(slope)·cos(aspect − look).
    pub terrain_db: f64,
    pub optical_noise: f64,
    pub n_s1_dates: usize,
    pub n_p2_dates: usize,
    pub n_ndvi_dates: usize,
    pub n_plots: usize,
    pub plot_diameter_m: f64,
    /// Plot AGB = truth + N(0, sd), floored at the plot minimum.
    pub plot_noise_sd: f64,
    pub plot_min_agb: f64,
    pub loss_patches: usize,
    pub gain_patches: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_rows: 512,
            n_cols: 512,
            pixel_size_m: 25.0,
            crs_id: "EPSG:32651".into(),
            origin_x: 400_000.0,
            origin_y: 5_000_000.0,
            relief_m: 140.0,
            agb_max: 250.0,
            agb_wavelengths_m: (1_500.0, 6_000.0),
            agb_texture: 0.08,
            n_footprints: 46_000,
            coverage_beam_rate: 0.3,
            quality_fail_rate: 0.08,
            degrade_rate: 0.05,
            low_sensitivity_rate: 0.08,
            day_rate: 0.15,
            corrupt_failed_rh: 0.7,
            outlier_fraction: 0.1,
            outlier_offset_db: 6.5,
            rh_noise: 0.05,
            rh_slope_noise_m: 1.0,
            speckle_db: 1.5,
            terrain_db: 1.0,
            optical_noise: 0.008,
            n_s1_dates: 3,
            n_p2_dates: 2,
            n_ndvi_dates: 3,
            n_plots: 42,
            plot_diameter_m: 25.0,
            plot_noise_sd: 0.0,
            plot_min_agb: 10.0,
            loss_patches: 4,
            gain_patches: 2,
        }
    }
}

impl WorldSpec {
    /// A small world for smoke tests.
    pub fn tiny() -> WorldSpec {
        WorldSpec {
            n_rows: 64,
            n_cols: 64,
            agb_wavelengths_m: (400.0, 1_200.0),
            relief_m: 60.0,
            n_footprints: 500,
            n_plots: 10,
            loss_patches: 1,
            gain_patches: 1,
            ..WorldSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rate = |v: f64| (0.0..=1.0).contains(&v);
        if self.n_rows < 8 || self.n_cols < 8 {
            return Err(Error::invalid("world must be at least 8x8 pixels"));
        }
        if !(self.pixel_size_m > 0.0) || !(self.agb_max > 0.0) || !(self.plot_diameter_m > 0.0) {
            return Err(Error::invalid("pixel size, agb_max and plot diameter must be positive"));
        }
        let (lo, hi) = self.agb_wavelengths_m;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::invalid("AGB wavelengths must be positive and ordered"));
        }
        if ![
            self.coverage_beam_rate,
            self.quality_fail_rate,
            self.degrade_rate,
            self.low_sensitivity_rate,
            self.day_rate,
            self.corrupt_failed_rh,
            self.outlier_fraction,
        ]
        .into_iter()
        .all(rate)
        {
            return Err(Error::invalid("rates and fractions must lie in [0, 1]"));
        }
        if self.n_footprints == 0 {
            return Err(Error::invalid("world needs footprints"));
        }
        if self.n_s1_dates == 0 || self.n_p2_dates == 0 || self.n_ndvi_dates == 0 {
            return Err(Error::invalid("every sensor needs at least one date"));
        }
        for v in [
            self.relief_m,
            self.agb_texture,
            self.rh_noise,
            self.rh_slope_noise_m,
            self.speckle_db,
            self.terrain_db,
            self.optical_noise,
            self.plot_noise_sd,
            self.outlier_offset_db,
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid("noise levels must be finite and non-negative"));
            }
        }
        Ok(())
    }

    fn grid(&self) -> GridSpec {
        GridSpec {
            origin_x: self.origin_x,
            origin_y: self.origin_y,
            pixel_size: self.pixel_size_m,
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            crs_id: self.crs_id.clone(),
        }
    }
}

pub const S2_BANDS: [&str; 12] = ["B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B11", "B12"];

#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub seed: u64,
    pub grid: GridSpec,
    /// True AGB, Mg/ha.
    pub truth: RasterGrid,
    pub dem: RasterGrid,
    pub slope: RasterGrid,
    /// Backscatter per date, dB.
    pub s1_vv: Vec<RasterGrid>,
    pub s1_vh: Vec<RasterGrid>,
    /// Backscatter per date as PALSAR-style digital numbers.
    pub p2_hh_dn: Vec<RasterGrid>,
    pub p2_hv_dn: Vec<RasterGrid>,
    pub s2: Vec<(String, RasterGrid)>,
    /// (nir, red) per date.
    pub ndvi: Vec<(RasterGrid, RasterGrid)>,
    pub cover2000: RasterGrid,
    pub loss_year: RasterGrid,
    pub gain: RasterGrid,
    pub footprints: Vec<FootprintRecord>,
    pub plots: Vec<PlotMeasurement>,
    pub sar_outlier_ids: BTreeSet<String>,
    pub flag_failure_ids: BTreeSet<String>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("finite non-negative sd")
}

/// Sum of randomly oriented cosines, scaled to unit variance.
struct Waves {
    terms: Vec<(f64, f64, f64)>,
}

impl Waves {
    fn new(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Waves {
        let terms = (0..n)
            .map(|_| {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / rng.random_range(lo..=hi);
                (k * theta.cos(), k * theta.sin(), rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Waves { terms }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let n = self.terms.len() as f64;
        self.terms.iter().map(|&(kx, ky, p)| (kx * x + ky * y + p).cos()).sum::<f64>() * (2.0 / n).sqrt()
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn make_grid(spec: &GridSpec, values: Vec<f32>, nodata: f32, semantic: &str) -> Result<RasterGrid> {
    RasterGrid::new(spec.clone(), nodata, values, semantic)
}

fn to_dn(gamma_db: f64) -> f32 {
    10f64.powf((gamma_db + 83.0) / 20.0) as f32
}

/// Build a world from `spec`; every random draw derives from `seed`.
pub fn make_synthetic_world(spec: &WorldSpec, seed: u64) -> Result<World> {
    spec.validate()?;
    let grid = spec.grid();
    let crs = grid.crs()?;
    let (rows, cols) = (spec.n_rows, spec.n_cols);
    let n = rows * cols;
    let centers: Vec<(f64, f64)> = (0..n).map(|i| grid.cell_center(i / cols, i % cols)).collect();
    let rel = |x: f64, y: f64| (x - spec.origin_x, spec.origin_y - y);

    // terrain: flat in the west, rugged in the east
    let mut rng = stream(seed, 1);
    let relief = Waves::new(&mut rng, 6, 700.0, 2_500.0);
    let width = cols as f64 * spec.pixel_size_m;
    let dem_values: Vec<f32> = centers
        .iter()
        .map(|&(x, y)| {
            let (u, v) = rel(x, y);
            let amp = spec.relief_m * (0.03 + 0.97 * smoothstep(u / width));
            (400.0 + amp * relief.at(u, v)) as f32
        })
        .collect();
    let dem = make_grid(&grid, dem_values, NODATA, "DEM")?;
    let slope = slope_from_dem(&dem)?;
    let aspect = crate::stack::aspect_from_dem(&dem)?;

    // AGB truth
    let mut rng = stream(seed, 2);
    let (lo, hi) = spec.agb_wavelengths_m;
    let field = Waves::new(&mut rng, 8, lo, hi);
    let texture = normal(spec.agb_texture);
    let truth_values: Vec<f32> = centers
        .iter()
        .map(|&(x, y)| {
            let (u, v) = rel(x, y);
            let f = field.at(u, v);
            let base = spec.agb_max / (1.0 + (-(1.8 * f + 0.4)).exp());
            (base * texture.sample(&mut rng).exp()).clamp(0.0, spec.agb_max * 1.2) as f32
        })
        .collect();
    let truth = make_grid(&grid, truth_values, NODATA, "AGB_truth_Mg_ha")?;
    let heights: Vec<f64> = truth.values.iter().map(|&a| height_from_agb(a as f64)).collect();
    let illum: Vec<f64> = (0..n)
        .map(|i| {
            let s = (slope.values[i] as f64).to_radians();
            let a = aspect.values[i] as f64;
            // sensor looking east
            if a < 0.0 {
                0.0
            } else {
                s.sin() * (a - 90.0).to_radians().cos()
            }
        })
        .collect();

    // SAR
    let speckle = normal(spec.speckle_db);
    let sar_dates = |pol: Polarization, dates: usize, stream_id: u64| -> Vec<Vec<f64>> {
        let mut rng = stream(seed, stream_id);
        (0..dates)
            .map(|_| {
                (0..n)
                    .map(|i| true_backscatter(pol, heights[i]) + spec.terrain_db * illum[i] + speckle.sample(&mut rng))
                    .collect()
            })
            .collect()
    };
    let db_grids = |dates: Vec<Vec<f64>>, name: &str| -> Result<Vec<RasterGrid>> {
        dates
            .into_iter()
            .map(|d| make_grid(&grid, d.into_iter().map(|v| v as f32).collect(), NODATA, name))
            .collect()
    };
    let dn_grids = |dates: Vec<Vec<f64>>, name: &str| -> Result<Vec<RasterGrid>> {
        dates
            .into_iter()
            .map(|d| make_grid(&grid, d.into_iter().map(to_dn).collect(), 0.0, name))
            .collect()
    };
    let s1_vv = db_grids(sar_dates(Polarization::VV, spec.n_s1_dates, 10), "S1_VV")?;
    let s1_vh = db_grids(sar_dates(Polarization::VH, spec.n_s1_dates, 11), "S1_VH")?;
    let hv_db = sar_dates(Polarization::HV, spec.n_p2_dates, 13);
    let hv_filtered = {
        let g = db_grids(hv_db.clone(), "P2_HV")?;
        focal_mean(&temporal_reduce(&g, Reducer::Mean, "P2_HV")?, crate::stack::DEFAULT_SPECKLE_RADIUS_M)?
    };
    let p2_hh_dn = dn_grids(sar_dates(Polarization::HH, spec.n_p2_dates, 12), "P2_HH_DN")?;
    let p2_hv_dn = dn_grids(hv_db, "P2_HV_DN")?;

    // optical
    let mut rng = stream(seed, 20);
    let onoise = normal(spec.optical_noise);
    let g_lin: Vec<f64> = truth.values.iter().map(|&a| a as f64 / spec.agb_max).collect();
    let g_sat: Vec<f64> = g_lin.iter().map(|g| 1.0 - (-3.0 * g).exp()).collect();
    let mut s2 = Vec::new();
    for band in S2_BANDS {
        let c0 = rng.random_range(0.02..0.3);
        let d = rng.random_range(0.06..0.2) * if rng.random_bool(0.6) { -1.0 } else { 1.0 };
        let w = rng.random_range(0.3..1.0);
        let values = (0..n)
            .map(|i| (c0 + d * (w * g_lin[i] + (1.0 - w) * g_sat[i]) + onoise.sample(&mut rng)).max(0.001) as f32)
            .collect();
        s2.push((band.to_string(), make_grid(&grid, values, NODATA, &format!("S2_{band}"))?));
    }
    let mut ndvi = Vec::new();
    let (nn, rn) = (normal(0.02), normal(0.01));
    for _ in 0..spec.n_ndvi_dates {
        let nir = (0..n)
            .map(|i| (0.2 + 0.25 * g_sat[i] + 0.05 * g_lin[i] + nn.sample(&mut rng)).max(0.01) as f32)
            .collect();
        let red = (0..n)
            .map(|i| (0.1 - 0.07 * g_sat[i] + rn.sample(&mut rng)).max(0.005) as f32)
            .collect();
        ndvi.push((make_grid(&grid, nir, NODATA, "NIR")?, make_grid(&grid, red, NODATA, "RED")?));
    }

    // Hansen-style cover, loss and gain
    let mut rng = stream(seed, 30);
    let cnoise = normal(8.0);
    let cover: Vec<f32> = (0..n)
        .map(|i| (100.0 * (1.0 - (-(truth.values[i] as f64) / 30.0).exp()) + cnoise.sample(&mut rng)).clamp(0.0, 100.0) as f32)
        .collect();
    let mut loss = vec![0f32; n];
    let mut gain = vec![0f32; n];
    let disk = |rng: &mut ChaCha8Rng, target: &mut Vec<f32>, value: f32| {
        let (r0, c0) = (rng.random_range(0..rows) as f64, rng.random_range(0..cols) as f64);
        let rad = rng.random_range(3.0..(rows.min(cols) as f64 / 20.0).max(4.0));
        for (i, t) in target.iter_mut().enumerate() {
            let (r, c) = ((i / cols) as f64, (i % cols) as f64);
            if (r - r0).powi(2) + (c - c0).powi(2) <= rad * rad {
                *t = value;
            }
        }
    };
    for k in 0..spec.loss_patches {
        // the last patch predates the loss window when there are several
        let year = if k + 1 == spec.loss_patches && k > 0 { 22 } else { rng.random_range(1..=21) };
        disk(&mut rng, &mut loss, year as f32);
    }
    for _ in 0..spec.gain_patches {
        disk(&mut rng, &mut gain, 1.0);
    }
    let cover2000 = make_grid(&grid, cover, MASK_NODATA, "cover2000_pct")?;
    let loss_year = make_grid(&grid, loss, MASK_NODATA, "loss_year")?;
    let gain = make_grid(&grid, gain, MASK_NODATA, "gain")?;

    // footprints
    let mut rng = stream(seed, 40);
    let rh_sd = normal(1.0);
    let jitter = 0.32 * spec.pixel_size_m;
    let mut footprints = Vec::with_capacity(spec.n_footprints);
    let mut flag_failure_ids = BTreeSet::new();
    let mut sar_outlier_ids = BTreeSet::new();
    let mut clean = Vec::new();
    for k in 0..spec.n_footprints {
        let i = rng.random_range(0..n);
        let (cx, cy) = centers[i];
        let x = cx + rng.random_range(-jitter..jitter);
        let y = cy + rng.random_range(-jitter..jitter);
        let (lat, lon) = crs.inverse(x, y);
        let shot_id = format!("{:06}", k + 1);

        let coverage = rng.random_bool(spec.coverage_beam_rate);
        let qf_fail = rng.random_bool(spec.quality_fail_rate);
        let degrade = rng.random_bool(spec.degrade_rate);
        let low_sens = rng.random_bool(spec.low_sensitivity_rate);
        let day = rng.random_bool(spec.day_rate);
        let sensitivity = if low_sens {
            // includes the boundary value, which must fail
            if rng.random_bool(0.1) {
                0.98
            } else {
                rng.random_range(0.85..0.98)
            }
        } else {
            rng.random_range(0.9801..=1.0)
        };
        let failed = coverage || qf_fail || degrade || low_sens || day;
        let beam = if coverage {
            ["BEAM0000", "BEAM0001", "BEAM0010", "BEAM0011"][rng.random_range(0..4)]
        } else {
            ["BEAM0101", "BEAM0110", "BEAM1000", "BEAM1011"][rng.random_range(0..4)]
        };

        let tan_s = (slope.values[i] as f64).to_radians().tan();
        let h = heights[i];
        let mut rh98 =
            (h * (1.0 + spec.rh_noise * rh_sd.sample(&mut rng)) + spec.rh_slope_noise_m * tan_s * rh_sd.sample(&mut rng))
                .max(0.3);
        let mut outlier = false;
        if rng.random_bool(spec.outlier_fraction) {
            let g = hv_filtered.values[i] as f64;
            let (a, b, _) = true_curve(Polarization::HV);
            let (lo, hi) = (a - b + 0.5, a - 0.5);
            let up = g + spec.outlier_offset_db;
            let down = g - spec.outlier_offset_db;
            let target = match (up <= hi, down >= lo) {
                (true, true) => {
                    if rng.random_bool(0.5) {
                        up
                    } else {
                        down
                    }
                }
                (true, false) => up,
                (false, true) => down,
                (false, false) => f64::NAN,
            };
            if let Some(h_out) = inverse_backscatter(Polarization::HV, target) {
                rh98 = h_out.max(0.3);
                outlier = true;
            }
        }
        if failed && rng.random_bool(spec.corrupt_failed_rh) {
            rh98 = rng.random_range(0.3..45.0);
        }
        // lower percentiles are noisier fractions of RH98, kept below it and
        // sorted so heights never decrease with percentile
        let mut lower: Vec<f64> = RH_PERCENTILES
            .iter()
            .filter(|&&p| p < 98)
            .map(|&p| {
                let shape = (p as f64 / 98.0).powf(0.8);
                let sd = 0.04 + 0.25 * (98.0 - p as f64) / 73.0;
                (rh98 * shape * (1.0 + sd * rh_sd.sample(&mut rng))).clamp(0.0, rh98)
            })
            .collect();
        lower.sort_by(f64::total_cmp);
        lower.push(rh98);
        lower.push(rh98 + rng.random_range(0.0..1.0));
        let rh: Vec<(u8, f64)> = RH_PERCENTILES.iter().copied().zip(lower).collect();

        if failed {
            flag_failure_ids.insert(shot_id.clone());
        }
        if outlier {
            sar_outlier_ids.insert(shot_id.clone());
        }
        if !failed && !outlier && truth.values[i] as f64 >= spec.plot_min_agb {
            clean.push(footprints.len());
        }
        footprints.push(FootprintRecord {
            shot_id,
            lat,
            lon,
            beam_id: beam.to_string(),
            power_beam: !coverage,
            quality_flag: u8::from(!qf_fail),
            degrade_flag: degrade,
            sensitivity,
            night_acquisition: !day,
            rh,
            acquisition_time: None,
            extras: BTreeMap::new(),
        });
    }

    // plots on clean footprints
    let mut rng = stream(seed, 50);
    let pnoise = normal(spec.plot_noise_sd);
    let n_plots = spec.n_plots.min(clean.len());
    let mut picked: Vec<usize> = index::sample(&mut rng, clean.len(), n_plots).into_iter().map(|j| clean[j]).collect();
    picked.sort_unstable();
    let area_ha = std::f64::consts::PI * (spec.plot_diameter_m / 2.0).powi(2) / 10_000.0;
    let mut plots = Vec::with_capacity(n_plots);
    for (k, &fi) in picked.iter().enumerate() {
        let f = &footprints[fi];
        let (fx, fy) = crs.forward(f.lat, f.lon);
        let (row, col) = grid.cell_at(fx, fy).ok_or(Error::OutsideExtent { x: fx, y: fy })?;
        let (cx, cy) = grid.cell_center(row, col);
        // a few metres toward the pixel centre, never into a neighbour
        let (lat, lon) = crs.inverse(fx + 0.2 * (cx - fx), fy + 0.2 * (cy - fy));
        let target = (truth.get(row, col) as f64 + pnoise.sample(&mut rng)).max(spec.plot_min_agb);
        let plot_id = format!("P{:03}", k + 1);
        let trees = plot_trees(&plot_id, target * area_ha * 1000.0, &mut rng)?;
        plots.push(PlotMeasurement {
            plot_id,
            lat,
            lon,
            diameter_m: spec.plot_diameter_m,
            trees,
            agb_mg_ha: None,
        });
    }

    Ok(World {
        spec: spec.clone(),
        seed,
        grid,
        truth,
        dem,
        slope,
        s1_vv,
        s1_vh,
        p2_hh_dn,
        p2_hv_dn,
        s2,
        ndvi,
        cover2000,
        loss_year,
        gain,
        footprints,
        plots,
        sar_outlier_ids,
        flag_failure_ids,
    })
}

/// Trees whose total AGB is `target_kg`: random sizes, then every DBH scaled
/// by the common factor that hits the target.
fn plot_trees(plot_id: &str, target_kg: f64, rng: &mut ChaCha8Rng) -> Result<Vec<TreeRecord>> {
    let count = (target_kg / 400.0).round().clamp(1.0, 80.0) as usize;
    let mut trees: Vec<(f64, f64)> = (0..count)
        .map(|_| {
            let d: f64 = rng.random_range(15.0..45.0);
            (d, 1.3 + 25.0 * (1.0 - (-0.04 * d).exp()))
        })
        .collect();
    let raw: f64 = trees.iter().map(|&(d, h)| tree_agb(d, h)).sum::<Result<f64>>()?;
    // W scales with DBH^(2·0.817)
    let s = (target_kg / raw).powf(1.0 / (2.0 * 0.817));
    for t in &mut trees {
        t.0 *= s;
    }
    Ok(trees
        .into_iter()
        .map(|(d, h)| TreeRecord {
            plot_id: plot_id.to_string(),
            dbh_cm: d,
            height_m: h,
        })
        .collect())
}

/// Files written by [`World::write`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldFiles {
    pub dir: PathBuf,
    pub footprints: PathBuf,
    pub plots: PathBuf,
    pub trees: PathBuf,
    pub stack_config: PathBuf,
    pub pipeline_config: PathBuf,
    pub truth: PathBuf,
    pub cover2000: PathBuf,
    pub loss_year: PathBuf,
    pub gain: PathBuf,
    pub world_info: PathBuf,
}

#[derive(Serialize)]
struct WorldInfo<'a> {
    seed: u64,
    spec: &'a WorldSpec,
    true_model: RhAgbModel,
    sar_outlier_ids: &'a BTreeSet<String>,
    flag_failure_ids: &'a BTreeSet<String>,
}

impl World {
    /// Write rasters, tables, a stack config and a ready-to-run pipeline
    /// config (output under `<dir>/run`) into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<WorldFiles> {
        let dir = dir.as_ref();
        let rdir = dir.join("rasters");
        std::fs::create_dir_all(&rdir).map_err(|e| Error::io(&rdir, e))?;
        let put = |name: String, g: &RasterGrid| -> Result<PathBuf> {
            let rel = PathBuf::from("rasters").join(name);
            write_raster(g, dir.join(&rel))?;
            Ok(rel)
        };
        let series = |prefix: &str, grids: &[RasterGrid]| -> Result<Vec<PathBuf>> {
            grids
                .iter()
                .enumerate()
                .map(|(d, g)| put(format!("{prefix}_d{}.tif", d + 1), g))
                .collect()
        };
        let mut s2_bands = BTreeMap::new();
        for (band, g) in &self.s2 {
            s2_bands.insert(band.clone(), put(format!("s2_{band}.tif"), g)?);
        }
        let mut ndvi_pairs = Vec::new();
        for (d, (nir, red)) in self.ndvi.iter().enumerate() {
            ndvi_pairs.push(NdviPair {
                nir: put(format!("nir_d{}.tif", d + 1), nir)?,
                red: put(format!("red_d{}.tif", d + 1), red)?,
            });
        }
        let stack_config = StackConfig {
            s1_vv: series("s1_vv", &self.s1_vv)?,
            s1_vh: series("s1_vh", &self.s1_vh)?,
            p2_hh_dn: series("p2_hh_dn", &self.p2_hh_dn)?,
            p2_hv_dn: series("p2_hv_dn", &self.p2_hv_dn)?,
            s2_bands,
            ndvi_pairs,
            dem: put("dem.tif".into(), &self.dem)?,
            speckle_radius_m: crate::stack::DEFAULT_SPECKLE_RADIUS_M,
        };
        let stack_path = dir.join("stack_config.json");
        std::fs::write(&stack_path, serde_json::to_vec_pretty(&stack_config)?).map_err(|e| Error::io(&stack_path, e))?;

        let cover = put("cover2000.tif".into(), &self.cover2000)?;
        let loss = put("lossyear.tif".into(), &self.loss_year)?;
        let gain = put("gain.tif".into(), &self.gain)?;
        let truth = put("truth_agb.tif".into(), &self.truth)?;

        let fp = dir.join("footprints.csv");
        write_footprints(&fp, &self.footprints)?;
        let (pp, tp) = (dir.join("plots.csv"), dir.join("trees.csv"));
        save_plots(&self.plots, &pp, &tp)?;

        let info_path = dir.join("world.json");
        let info = WorldInfo {
            seed: self.seed,
            spec: &self.spec,
            true_model: true_model(),
            sar_outlier_ids: &self.sar_outlier_ids,
            flag_failure_ids: &self.flag_failure_ids,
        };
        std::fs::write(&info_path, serde_json::to_vec_pretty(&info)?).map_err(|e| Error::io(&info_path, e))?;

        let mut config = PipelineConfig::with_paths(PipelinePaths {
            footprints: "footprints.csv".into(),
            plots: "plots.csv".into(),
            trees: "trees.csv".into(),
            stack_config: Some("stack_config.json".into()),
            stack_manifest: None,
            cover2000: Some(cover.clone()),
            loss_year: Some(loss.clone()),
            gain: Some(gain.clone()),
            output_dir: "run".into(),
        });
        config.region_label = "synthetic".into();
        let config_path = dir.join("pipeline.json");
        config.save(&config_path)?;

        Ok(WorldFiles {
            dir: dir.to_path_buf(),
            footprints: fp,
            plots: pp,
            trees: tp,
            stack_config: stack_path,
            pipeline_config: config_path,
            truth: dir.join(truth),
            cover2000: dir.join(cover),
            loss_year: dir.join(loss),
            gain: dir.join(gain),
            world_info: info_path,
        })
    }

    /// Truth value at the pixel containing a footprint.
    pub fn truth_at(&self, lat: f64, lon: f64) -> Option<f64> {
        let crs = self.grid.crs().ok()?;
        let (x, y) = crs.forward(lat, lon);
        let (r, c) = self.grid.cell_at(x, y)?;
        self.truth.value(r, c).map(f64::from)
    }
}

/// Shots with HV backscatter sampled directly on the true curve plus
/// U(−inlier_noise, inlier_noise) dB, a `fraction` of which are shifted by
/// ±`offset_db`. Returned alongside each shot's backscatter and outlier flag.
pub struct OutlierScenario {
    pub footprints: Vec<FootprintRecord>,
    pub samples: Vec<PolSamples>,
    pub is_outlier: Vec<bool>,
}

pub fn sar_outlier_set(n: usize, fraction: f64, offset_db: f64, inlier_noise_db: f64, seed: u64) -> Result<OutlierScenario> {
    if !(0.0..=1.0).contains(&fraction) || !(inlier_noise_db >= 0.0) {
        return Err(Error::invalid("fraction must lie in [0, 1] and noise be non-negative"));
    }
    let mut rng = stream(seed, 60);
    let n_out = (fraction * n as f64).round() as usize;
    let outliers: BTreeSet<usize> = index::sample(&mut rng, n, n_out).into_iter().collect();
    let mut out = OutlierScenario {
        footprints: Vec::with_capacity(n),
        samples: Vec::with_capacity(n),
        is_outlier: Vec::with_capacity(n),
    };
    for i in 0..n {
        let h: f64 = rng.random_range(0.5..40.0);
        let mut g = true_backscatter(Polarization::HV, h);
        let outlier = outliers.contains(&i);
        if outlier {
            g += if rng.random_bool(0.5) { offset_db } else { -offset_db };
        } else if inlier_noise_db > 0.0 {
            g += rng.random_range(-inlier_noise_db..=inlier_noise_db);
        }
        out.footprints.push(FootprintRecord {
            shot_id: format!("{:06}", i + 1),
            lat: 0.0,
            lon: 0.0,
            beam_id: "BEAM0101".into(),
            power_beam: true,
            quality_flag: 1,
            degrade_flag: false,
            sensitivity: 0.99,
            night_acquisition: true,
            rh: vec![(98, h)],
            acquisition_time: None,
            extras: BTreeMap::new(),
        });
        out.samples.push(BTreeMap::from([(Polarization::HV, g)]));
        out.is_outlier.push(outlier);
    }
    Ok(out)
}

/// The generating HV curve as a [`CurveFit`].
pub fn true_hv_fit(tolerance_db: f64) -> CurveFit {
    let (a, b, c) = true_curve(Polarization::HV);
    CurveFit {
        polarization: Polarization::HV,
        form: CurveForm::SaturatingExp,
        a,
        b,
        c: Some(c),
        r2: 1.0,
        rmse_db: 0.0,
        tolerance_db,
        n_points: 0,
        r2_degenerate: false,
        fell_back: false,
    }
}
