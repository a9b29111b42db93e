//! End-to-end batch run driven by one [`PipelineConfig`].

mod config;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{CalibrationConfig, PipelineConfig, PipelinePaths, SarFilterConfig, Seeds};

use crate::calibration::{
    calibrate_from_plots, compute_plot_agb, label_footprints, write_samples, LabeledSample, PlotCalibration,
};
use crate::ensemble::{cv_train, ensemble_maps, kfold_split, predict_map, samples_matrix};
use crate::error::{Error, Result};
use crate::evaluation::{
    holdout_indices, metrics, slope_stratified_metrics, validate_against_plots, write_pairs_csv, MetricsReport,
};
use crate::ingest::{
    load_footprints, load_plots, load_raster, write_footprints, write_raster, write_rejected_footprints,
    FootprintRecord, PlotMeasurement, RasterGrid,
};
use crate::learners::{self, LearnerKind, TrainConfig};
use crate::quality::filter_quality;
use crate::sar::{self, CurveFit, PolSamples};
use crate::stack::{
    apply_mask, attach_features, build_forest_mask, build_stack, load_stack, save_stack, FeatureStack,
};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn digest(path: impl AsRef<Path>) -> Result<FileDigest> {
    let path = path.as_ref();
    let bytes = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: sha256_file(path)?,
        bytes,
    })
}

/// Row accounting and timing of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub loaded: usize,
    pub retained: usize,
    pub rejected: usize,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, serde_json::Value>,
    #[serde(skip)]
    files: Vec<PathBuf>,
}

impl StageRecord {
    fn new(name: &str) -> StageRecord {
        StageRecord {
            name: name.to_string(),
            loaded: 0,
            retained: 0,
            rejected: 0,
            seconds: 0.0,
            notes: BTreeMap::new(),
            files: Vec::new(),
        }
    }

    fn counts(&mut self, loaded: usize, retained: usize, rejected: usize) {
        (self.loaded, self.retained, self.rejected) = (loaded, retained, rejected);
    }

    fn note(&mut self, key: &str, value: impl Serialize) {
        self.notes
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
    }

    fn wrote(&mut self, path: impl Into<PathBuf>) {
        self.files.push(path.into());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSummary {
    pub learner: LearnerKind,
    pub train_seed: u64,
    pub n_samples: usize,
    pub pooled: MetricsReport,
    pub holdout: Option<MetricsReport>,
    pub plot_validation: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    /// SHA-256 of the resolved config serialized as JSON.
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub stages: Vec<StageRecord>,
    pub outputs: Vec<FileDigest>,
    pub results: Vec<LearnerSummary>,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub total_seconds: f64,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn output_digest(&self, path: impl AsRef<Path>) -> Option<&str> {
        self.outputs
            .iter()
            .find(|o| o.path == path.as_ref())
            .map(|o| o.sha256.as_str())
    }
}

pub fn config_hash(config: &PipelineConfig) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(config)?)))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

struct Run<'a> {
    config: &'a PipelineConfig,
    out: PathBuf,
    stages: Vec<StageRecord>,
    results: Vec<LearnerSummary>,
    failed: Option<&'static str>,
}

impl Run<'_> {
    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce(&mut StageRecord) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        tracing::info!(stage = name, "stage started");
        let mut rec = StageRecord::new(name);
        let result = f(&mut rec);
        rec.seconds = start.elapsed().as_secs_f64();
        match result {
            Ok(v) => {
                tracing::info!(
                    stage = name,
                    loaded = rec.loaded,
                    retained = rec.retained,
                    rejected = rec.rejected,
                    seconds = rec.seconds,
                    "stage finished"
                );
                self.stages.push(rec);
                Ok(v)
            }
            Err(e) => {
                tracing::error!(stage = name, error = %e, "stage failed");
                self.failed = Some(name);
                // keep the record of whatever the stage wrote before failing
                self.stages.push(rec);
                Err(Error::Stage {
                    stage: name,
                    source: Box::new(e),
                })
            }
        }
    }

    fn execute(&mut self) -> Result<()> {
        let c = self.config;
        let out = self.out.clone();

        let retained = self.stage("filter_quality", |rec| {
            let load = load_footprints(&c.paths.footprints, &c.footprint_columns)?;
            let loaded = load.records.len() + load.rejects.len();
            let outcome = filter_quality(load.records, &c.quality);
            rec.counts(
                loaded,
                outcome.retained.len(),
                outcome.rejected.len() + load.rejects.len(),
            );
            rec.note("malformed_rows", load.rejects.len());
            let (kept, dropped) = (out.join("quality_retained.csv"), out.join("quality_rejected.csv"));
            write_footprints(&kept, &outcome.retained)?;
            write_rejected_footprints(&dropped, &outcome.rejected)?;
            rec.wrote(kept);
            rec.wrote(dropped);
            Ok(outcome.retained)
        })?;

        let stack = self.stage("build_stack", |rec| {
            let stack = match (&c.paths.stack_config, &c.paths.stack_manifest) {
                (Some(sc), _) => {
                    let cfg = config::load_stack_config(sc)?;
                    let stack = build_stack(&cfg, sc.parent().unwrap_or(Path::new("")))?;
                    let manifest = save_stack(&stack, out.join("stack"))?;
                    rec.wrote(&manifest);
                    for name in &stack.layer_names {
                        rec.wrote(out.join("stack").join(format!("{name}.tif")));
                    }
                    stack
                }
                (None, Some(m)) => load_stack(m)?,
                (None, None) => unreachable!("validated"),
            };
            rec.counts(stack.n_layers(), stack.n_layers(), 0);
            rec.note("grid", &stack.grid);
            Ok(stack)
        })?;

        let retained = self.stage("filter_sar", |rec| {
            let n = retained.len();
            if !c.sar_filter.enabled {
                rec.counts(n, n, 0);
                rec.note("skipped", true);
                return Ok(retained);
            }
            let fits = sar_fits(c, &stack, &retained, rec, &out)?;
            let pols: Vec<sar::Polarization> = fits.iter().map(|f| f.polarization).collect();
            let samples = covariates(&stack, &retained, &pols, rec)?;
            let outcome = sar::filter_by_band(retained, &samples, &fits, c.sar_filter.rh_percentile)?;
            rec.counts(n, outcome.retained.len(), outcome.rejected.len());
            let (kept, dropped) = (out.join("sar_retained.csv"), out.join("sar_rejected.csv"));
            write_footprints(&kept, &outcome.retained)?;
            write_rejected_footprints(&dropped, &outcome.rejected)?;
            rec.wrote(kept);
            rec.wrote(dropped);
            Ok(outcome.retained)
        })?;

        let (samples, plots) = self.stage("calibration", |rec| calibrate(c, &stack, &retained, rec, &out))?;
        drop(retained);

        let mut means: Vec<(LearnerKind, RasterGrid, RasterGrid)> = Vec::new();
        for &kind in &c.learners {
            let name = match kind {
                LearnerKind::RandomForest => "cv_random_forest",
                LearnerKind::Gbdt => "cv_gbdt",
            };
            let (mean, std, summary) = self.stage(name, |rec| cv_stage(c, kind, &stack, &samples, rec, &out))?;
            means.push((kind, mean, std));
            self.results.push(summary);
        }

        self.stage("mask", |rec| {
            let p = &c.paths;
            let (Some(cover), Some(loss), Some(gain)) = (&p.cover2000, &p.loss_year, &p.gain) else {
                rec.note("skipped", true);
                return Ok(());
            };
            let mask = build_forest_mask(
                &load_raster(cover)?,
                &load_raster(loss)?,
                &load_raster(gain)?,
                c.cover_threshold_pct,
            )?;
            if !mask.grid.grid.aligned_with(&stack.grid) {
                return Err(Error::Misaligned("forest mask inputs do not match the stack grid".into()));
            }
            let path = out.join("forest_mask.tif");
            write_raster(&mask.grid, &path)?;
            rec.wrote(path);
            let forest = mask.forest_count();
            rec.counts(mask.grid.values.len(), forest, mask.grid.values.len() - forest);
            rec.note("provenance", &mask.provenance);
            for (kind, mean, std) in &mut means {
                *mean = apply_mask(mean, &mask)?;
                *std = apply_mask(std, &mask)?;
                let dir = out.join(kind.as_str());
                for (grid, file) in [(&*mean, "mean_masked.tif"), (&*std, "std_masked.tif")] {
                    write_raster(grid, dir.join(file))?;
                    rec.wrote(dir.join(file));
                }
            }
            Ok(())
        })?;

        let validations = self.stage("evaluate", |rec| {
            rec.loaded = plots.len();
            let mut reports = Vec::new();
            for (kind, mean, _) in &means {
                let dir = out.join(kind.as_str());
                match validate_against_plots(mean, &plots, &format!("{kind} vs plots")) {
                    Ok(v) => {
                        rec.retained = v.pairs.len();
                        rec.rejected = v.excluded_nodata + v.excluded_outside;
                        let (json, csv) = (dir.join("plot_validation.json"), dir.join("plot_pairs.csv"));
                        write_json(&json, &v)?;
                        write_pairs_csv(&csv, &v.pairs)?;
                        rec.wrote(json);
                        rec.wrote(csv);
                        reports.push((*kind, v.report));
                    }
                    Err(Error::InsufficientData(msg)) => {
                        tracing::warn!(learner = %kind, %msg, "no usable plot pairs");
                        rec.note(&format!("{kind}_skipped"), msg);
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok(reports)
        })?;
        for (kind, report) in validations {
            if let Some(s) = self.results.iter_mut().find(|s| s.learner == kind) {
                s.plot_validation = Some(report);
            }
        }
        Ok(())
    }
}

/// Curves from files, or fitted here on (RH, backscatter) of the
/// quality-filtered footprints.
fn sar_fits(
    c: &PipelineConfig,
    stack: &FeatureStack,
    footprints: &[FootprintRecord],
    rec: &mut StageRecord,
    out: &Path,
) -> Result<Vec<CurveFit>> {
    let s = &c.sar_filter;
    if !s.curves.is_empty() {
        return s
            .curves
            .iter()
            .map(|p| Ok(CurveFit::load(p)?.with_tolerance(s.tolerance_db)))
            .collect();
    }
    let (samples, _) = sar::backscatter_samples(Some(stack), footprints, &s.polarizations)?;
    let mut fits = Vec::new();
    for &pol in &s.polarizations {
        let pairs = sar::fit_pairs(footprints, &samples, pol, s.rh_percentile);
        let fit = sar::fit_rh_backscatter(&pairs, s.form, pol)?.with_tolerance(s.tolerance_db);
        let path = out.join(format!("curve_{}.json", pol.to_string().to_ascii_lowercase()));
        fit.save(&path)?;
        rec.wrote(path);
        rec.note(&format!("curve_{pol}_r2"), fit.r2);
        fits.push(fit);
    }
    Ok(fits)
}

fn covariates(
    stack: &FeatureStack,
    footprints: &[FootprintRecord],
    pols: &[sar::Polarization],
    rec: &mut StageRecord,
) -> Result<Vec<PolSamples>> {
    let (samples, source) = sar::backscatter_samples(Some(stack), footprints, pols)?;
    rec.note("covariate_source", source);
    Ok(samples)
}

#[derive(Serialize)]
struct CalibrationReport<'a> {
    #[serde(flatten)]
    calibration: &'a PlotCalibration,
    plot_rejects: usize,
    tree_rejects: usize,
    labels_clamped: usize,
}

fn calibrate(
    c: &PipelineConfig,
    stack: &FeatureStack,
    footprints: &[FootprintRecord],
    rec: &mut StageRecord,
    out: &Path,
) -> Result<(Vec<LabeledSample>, Vec<PlotMeasurement>)> {
    let cal = &c.calibration;
    let load = load_plots(&c.paths.plots, &c.paths.trees)?;
    let mut plots = load.plots;
    compute_plot_agb(&mut plots, cal.min_dbh_cm)?;
    let fitted = calibrate_from_plots(
        &plots,
        footprints,
        cal.match_distance_m,
        cal.percentile,
        cal.candidate_min..=cal.candidate_max,
        cal.form,
        &c.region_label,
    )?;
    let model = &fitted.model;
    let model_path = out.join("rh_agb.json");
    model.save(&model_path)?;
    rec.wrote(model_path);

    let labeling = label_footprints(footprints, model)?;
    let attached = attach_features(stack, labeling.samples)?;
    let report = CalibrationReport {
        calibration: &fitted,
        plot_rejects: load.plot_rejects.len(),
        tree_rejects: load.tree_rejects.len(),
        labels_clamped: labeling.clamped,
    };
    let report_path = out.join("calibration.json");
    write_json(&report_path, &report)?;
    rec.wrote(report_path);
    let samples_path = out.join("labeled_samples.csv");
    write_samples(&samples_path, &attached.complete, &stack.layer_names)?;
    rec.wrote(samples_path);

    rec.counts(
        footprints.len(),
        attached.complete.len(),
        attached.incomplete + attached.outside,
    );
    rec.note("plots_matched", fitted.matches.len());
    rec.note("rh_percentile", model.rh_percentile);
    rec.note("model_a", model.a);
    rec.note("model_b", model.b);
    rec.note("model_r2", model.r2);
    Ok((attached.complete, plots))
}

/// Settings of one k-fold run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRunSettings {
    pub k: usize,
    pub fold_seed: u64,
    /// Train share of an extra train/test evaluation, if wanted.
    pub holdout_ratio: Option<f64>,
    pub holdout_seed: u64,
    pub chunk_rows: usize,
    pub slope_bins: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRunReport {
    pub learner: LearnerKind,
    pub k: usize,
    pub fold_seed: u64,
    pub train_seed: u64,
    pub holdout_seed: u64,
    pub fold_metrics: Vec<MetricsReport>,
    /// Out-of-fold metrics over all samples, with slope strata when every
    /// sample has a slope.
    pub pooled: MetricsReport,
    pub holdout: Option<MetricsReport>,
    pub feature_importance: Vec<(String, f64)>,
    /// Negative predictions clamped per fold map.
    pub clamped_pixels: Vec<usize>,
}

pub struct CvRunOutput {
    pub report: CvRunReport,
    pub mean: RasterGrid,
    pub std: RasterGrid,
    pub files: Vec<PathBuf>,
}

/// K-fold training, fold maps, ensemble mean/std and metrics, all written
/// under `dir`: `fold_<i>.json`, `fold_<i>.tif`, `mean.tif`, `std.tif`,
/// `oof.csv` and `metrics.json`.
pub fn cv_run(
    samples: &[LabeledSample],
    stack: &FeatureStack,
    kind: LearnerKind,
    train: &TrainConfig,
    settings: &CvRunSettings,
    dir: &Path,
) -> Result<CvRunOutput> {
    create_dir(dir)?;
    let mut files = Vec::new();
    let folds = kfold_split(samples.len(), settings.k, settings.fold_seed)?;
    let cv = cv_train(samples, &stack.layer_names, kind, train, &folds)?;

    let mut maps = Vec::with_capacity(settings.k);
    let mut clamped = Vec::with_capacity(settings.k);
    for (i, model) in cv.models.iter().enumerate() {
        let path = dir.join(format!("fold_{i}.json"));
        model.save(&path)?;
        files.push(path);
        let pred = predict_map(model, stack, settings.chunk_rows)?;
        let path = dir.join(format!("fold_{i}.tif"));
        write_raster(&pred.map, &path)?;
        files.push(path);
        clamped.push(pred.clamped);
        maps.push(pred.map);
    }
    let (mean, std) = ensemble_maps(&maps)?;
    for (grid, file) in [(&mean, "mean.tif"), (&std, "std.tif")] {
        write_raster(grid, dir.join(file))?;
        files.push(dir.join(file));
    }

    let y: Vec<f64> = samples.iter().map(|s| s.agb_mg_ha).collect();
    let mut pooled = cv.pooled_metrics.clone();
    let with_slope: Vec<(f64, f64, f64)> = samples
        .iter()
        .zip(&cv.oof)
        .filter_map(|(s, &p)| Some((s.agb_mg_ha, p, s.slope_deg?)))
        .collect();
    if with_slope.len() == samples.len() {
        pooled.strata = slope_stratified_metrics(&with_slope, &settings.slope_bins, &pooled.label)?.strata;
    }

    let holdout = match settings.holdout_ratio {
        Some(ratio) => {
            let (tr, te) = holdout_indices(samples.len(), ratio, settings.holdout_seed)?;
            let (x, _) = samples_matrix(samples)?;
            let ytr: Vec<f64> = tr.iter().map(|&i| y[i]).collect();
            let model = learners::train(kind, &x.select_rows(&tr), &ytr, &stack.layer_names, train)?;
            let obs: Vec<f64> = te.iter().map(|&i| y[i]).collect();
            let pred: Vec<f64> = te.iter().map(|&i| model.predict_row(x.row(i))).collect();
            Some(metrics(&obs, &pred, &format!("{kind} holdout"))?)
        }
        None => None,
    };

    let oof_path = dir.join("oof.csv");
    let mut w = csv::Writer::from_path(&oof_path)?;
    w.write_record(["shot_id", "fold", "observed", "predicted", "slope_deg"])?;
    for (i, s) in samples.iter().enumerate() {
        w.write_record([
            s.shot_id.clone(),
            folds.assignment[i].to_string(),
            s.agb_mg_ha.to_string(),
            cv.oof[i].to_string(),
            s.slope_deg.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&oof_path, e))?;
    files.push(oof_path);

    let report = CvRunReport {
        learner: kind,
        k: settings.k,
        fold_seed: settings.fold_seed,
        train_seed: train.seed,
        holdout_seed: settings.holdout_seed,
        fold_metrics: cv.fold_metrics,
        pooled,
        holdout,
        feature_importance: cv.models[0].feature_importance(),
        clamped_pixels: clamped,
    };
    let metrics_path = dir.join("metrics.json");
    write_json(&metrics_path, &report)?;
    files.push(metrics_path);
    Ok(CvRunOutput {
        report,
        mean,
        std,
        files,
    })
}

fn cv_stage(
    c: &PipelineConfig,
    kind: LearnerKind,
    stack: &FeatureStack,
    samples: &[LabeledSample],
    rec: &mut StageRecord,
    out: &Path,
) -> Result<(RasterGrid, RasterGrid, LearnerSummary)> {
    let train = c.train_config(kind);
    let settings = CvRunSettings {
        k: c.k,
        fold_seed: c.seeds.folds,
        holdout_ratio: c.holdout_ratio,
        holdout_seed: c.seeds.holdout,
        chunk_rows: c.chunk_rows,
        slope_bins: c.slope_bins.clone(),
    };
    let run = cv_run(samples, stack, kind, train, &settings, &out.join(kind.as_str()))?;
    rec.files.extend(run.files);
    let pooled = run.report.pooled;
    rec.counts(samples.len(), samples.len(), 0);
    rec.note("pooled_r2", pooled.r2);
    rec.note("pooled_rmse", pooled.rmse);
    let summary = LearnerSummary {
        learner: kind,
        train_seed: train.seed,
        n_samples: samples.len(),
        pooled: MetricsReport {
            strata: Vec::new(),
            ..pooled
        },
        holdout: run.report.holdout,
        plot_validation: None,
    };
    Ok((run.mean, run.std, summary))
}

/// Run every stage in order, writing artifacts and `run_manifest.json`
/// under the output directory. Validation problems are returned before any
/// stage runs; a failing stage aborts the run with [`Error::Stage`] after
/// the manifest (with `failed_stage` set) has been written.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunManifest> {
    config.validate()?;
    let start = Instant::now();
    let out = config.paths.output_dir.clone();
    create_dir(&out)?;

    let mut input_paths = config.input_files();
    if let Some(sc) = &config.paths.stack_config {
        let base = sc.parent().unwrap_or(Path::new(""));
        let cfg = config::load_stack_config(sc)?;
        input_paths.extend(config::stack_inputs(&cfg).into_iter().map(|p| base.join(p)));
    }
    let inputs = input_paths.iter().map(digest).collect::<Result<Vec<_>>>()?;

    let mut seeds = BTreeMap::new();
    seeds.insert("folds".to_string(), config.seeds.folds);
    seeds.insert("holdout".to_string(), config.seeds.holdout);
    for kind in &config.learners {
        seeds.insert(format!("train_{kind}"), config.train_config(*kind).seed);
    }

    let mut run = Run {
        config,
        out: out.clone(),
        stages: Vec::new(),
        results: Vec::new(),
        failed: None,
    };
    let result = run.execute();

    let mut outputs = Vec::new();
    for rec in &run.stages {
        for f in &rec.files {
            if f.exists() {
                outputs.push(digest(f)?);
            }
        }
    }
    let manifest = RunManifest {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: config_hash(config)?,
        seeds,
        inputs,
        stages: run.stages,
        outputs,
        results: run.results,
        failed_stage: run.failed.map(String::from),
        error: result.as_ref().err().map(|e| e.to_string()),
        total_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&out.join(RUN_MANIFEST_FILE), &manifest)?;
    result.map(|_| manifest)
}
