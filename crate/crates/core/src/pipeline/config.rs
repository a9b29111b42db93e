use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{AllometryForm, DEFAULT_MIN_DBH_CM};
use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_SLOPE_BINS;
use crate::ingest::ColumnMap;
use crate::learners::{LearnerKind, TrainConfig};
use crate::quality::QualityCriteria;
use crate::sar::{CurveForm, Polarization, DEFAULT_TOLERANCE_DB};
use crate::stack::{StackConfig, DEFAULT_COVER_THRESHOLD_PCT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelinePaths {
    pub footprints: PathBuf,
    pub plots: PathBuf,
    pub trees: PathBuf,
    /// Raw-input description; the stack is built during the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stack_config: Option<PathBuf>,
    /// A stack saved earlier by `build-stack`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stack_manifest: Option<PathBuf>,
    /// Forest-mask inputs; all three or none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cover2000: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_year: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SarFilterConfig {
    pub enabled: bool,
    /// Pre-fitted curve files; when empty the curves are fitted on the
    /// quality-filtered footprints.
    pub curves: Vec<PathBuf>,
    pub form: CurveForm,
    pub polarizations: Vec<Polarization>,
    pub tolerance_db: f64,
    pub rh_percentile: u8,
}

impl Default for SarFilterConfig {
    fn default() -> Self {
        SarFilterConfig {
            enabled: true,
            curves: Vec::new(),
            form: CurveForm::SaturatingExp,
            polarizations: vec![Polarization::HV, Polarization::VH],
            tolerance_db: DEFAULT_TOLERANCE_DB,
            rh_percentile: 98,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub form: AllometryForm,
    /// Skip correlation-based selection and use this percentile.
    pub percentile: Option<u8>,
    pub candidate_min: u8,
    pub candidate_max: u8,
    pub min_dbh_cm: f64,
    /// Plots farther than this from every footprint are left unmatched.
    pub match_distance_m: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            form: AllometryForm::Power,
            percentile: None,
            candidate_min: 0,
            candidate_max: 100,
            min_dbh_cm: DEFAULT_MIN_DBH_CM,
            match_distance_m: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub folds: u64,
    pub holdout: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { folds: 42, holdout: 7 }
    }
}

fn default_learners() -> Vec<LearnerKind> {
    vec![LearnerKind::RandomForest, LearnerKind::Gbdt]
}

fn default_k() -> usize {
    5
}

fn default_holdout() -> Option<f64> {
    Some(0.6)
}

fn default_threshold() -> f64 {
    DEFAULT_COVER_THRESHOLD_PCT
}

fn default_chunk_rows() -> usize {
    64
}

fn default_slope_bins() -> Vec<f64> {
    DEFAULT_SLOPE_BINS.to_vec()
}

fn default_region() -> String {
    "region".into()
}

/// Everything a full run needs. Relative paths are resolved against the
/// directory of the config file by [`PipelineConfig::load`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PipelinePaths,
    #[serde(default)]
    pub footprint_columns: ColumnMap,
    #[serde(default)]
    pub quality: QualityCriteria,
    #[serde(default)]
    pub sar_filter: SarFilterConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default = "default_learners")]
    pub learners: Vec<LearnerKind>,
    #[serde(default)]
    pub rf: TrainConfig,
    #[serde(default)]
    pub gbdt: TrainConfig,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seeds: Seeds,
    /// Train share of the extra train/test evaluation; `null` skips it.
    #[serde(default = "default_holdout")]
    pub holdout_ratio: Option<f64>,
    #[serde(default = "default_threshold")]
    pub cover_threshold_pct: f64,
    #[serde(default = "default_chunk_rows")]
    pub chunk_rows: usize,
    #[serde(default = "default_slope_bins")]
    pub slope_bins: Vec<f64>,
    #[serde(default = "default_region")]
    pub region_label: String,
}

impl PipelineConfig {
    /// Config with default settings for the given paths.
    pub fn with_paths(paths: PipelinePaths) -> PipelineConfig {
        PipelineConfig {
            paths,
            footprint_columns: ColumnMap::default(),
            quality: QualityCriteria::default(),
            sar_filter: SarFilterConfig::default(),
            calibration: CalibrationConfig::default(),
            learners: default_learners(),
            rf: TrainConfig::default(),
            gbdt: TrainConfig::default(),
            k: default_k(),
            seeds: Seeds::default(),
            holdout_ratio: default_holdout(),
            cover_threshold_pct: default_threshold(),
            chunk_rows: default_chunk_rows(),
            slope_bins: default_slope_bins(),
            region_label: default_region(),
        }
    }

    pub fn train_config(&self, kind: LearnerKind) -> &TrainConfig {
        match kind {
            LearnerKind::RandomForest => &self.rf,
            LearnerKind::Gbdt => &self.gbdt,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut c: PipelineConfig = serde_json::from_reader(f)?;
        let base = path.parent().unwrap_or(Path::new(""));
        c.resolve(base);
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    /// Make every relative path absolute with respect to `base`.
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        for path in [&mut p.footprints, &mut p.plots, &mut p.trees, &mut p.output_dir] {
            fix(path);
        }
        for path in [
            &mut p.stack_config,
            &mut p.stack_manifest,
            &mut p.cover2000,
            &mut p.loss_year,
            &mut p.gain,
        ]
        .into_iter()
        .flatten()
        {
            fix(path);
        }
        self.sar_filter.curves.iter_mut().for_each(fix);
    }

    /// Input files the run reads, in a fixed order.
    pub fn input_files(&self) -> Vec<PathBuf> {
        let p = &self.paths;
        let mut out = vec![p.footprints.clone(), p.plots.clone(), p.trees.clone()];
        out.extend(p.stack_config.iter().cloned());
        out.extend(p.stack_manifest.iter().cloned());
        out.extend([&p.cover2000, &p.loss_year, &p.gain].into_iter().flatten().cloned());
        out.extend(self.sar_filter.curves.iter().cloned());
        out
    }

    /// Check settings and that every referenced input exists. A stack config
    /// is opened so that the rasters it lists can be checked too.
    pub fn validate(&self) -> Result<()> {
        let p = &self.paths;
        match (&p.stack_config, &p.stack_manifest) {
            (Some(_), Some(_)) => return Err(Error::invalid("give stack_config or stack_manifest, not both")),
            (None, None) => return Err(Error::invalid("one of stack_config or stack_manifest is required")),
            _ => {}
        }
        let mask_paths = [&p.cover2000, &p.loss_year, &p.gain];
        let given = mask_paths.iter().filter(|m| m.is_some()).count();
        if given != 0 && given != 3 {
            return Err(Error::invalid("mask needs all of cover2000, loss_year and gain"));
        }
        for f in self.input_files() {
            if !f.exists() {
                return Err(Error::invalid(format!("input not found: {}", f.display())));
            }
        }
        if let Some(sc) = &p.stack_config {
            let config = load_stack_config(sc)?;
            let base = sc.parent().unwrap_or(Path::new(""));
            for r in stack_inputs(&config) {
                let r = base.join(r);
                if !r.exists() {
                    return Err(Error::invalid(format!("stack input not found: {}", r.display())));
                }
            }
        }
        self.quality.validate()?;
        if self.learners.is_empty() {
            return Err(Error::invalid("no learners selected"));
        }
        for kind in &self.learners {
            self.train_config(*kind).validate()?;
        }
        if self.k < 2 {
            return Err(Error::invalid("k must be at least 2"));
        }
        if let Some(r) = self.holdout_ratio {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::invalid("holdout_ratio must lie in (0, 1)"));
            }
        }
        if self.chunk_rows == 0 {
            return Err(Error::invalid("chunk_rows must be positive"));
        }
        if !(self.sar_filter.tolerance_db > 0.0) {
            return Err(Error::invalid("tolerance_db must be positive"));
        }
        if self.sar_filter.enabled && self.sar_filter.curves.is_empty() && self.sar_filter.polarizations.is_empty() {
            return Err(Error::invalid("SAR filter enabled without polarizations or curves"));
        }
        let c = &self.calibration;
        if c.candidate_min > c.candidate_max || c.candidate_max > 100 {
            return Err(Error::invalid("calibration candidate range must satisfy min <= max <= 100"));
        }
        if self.slope_bins.is_empty() || self.slope_bins.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("slope_bins must be strictly increasing"));
        }
        Ok(())
    }
}

pub(crate) fn load_stack_config(path: &Path) -> Result<StackConfig> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(f)?)
}

pub(crate) fn stack_inputs(c: &StackConfig) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = Vec::new();
    for v in [&c.s1_vv, &c.s1_vh, &c.p2_hh_dn, &c.p2_hv_dn] {
        out.extend(v.iter().cloned());
    }
    out.extend(c.s2_bands.values().cloned());
    for pair in &c.ndvi_pairs {
        out.push(pair.nir.clone());
        out.push(pair.red.clone());
    }
    out.push(c.dem.clone());
    out
}
