use std::fs::File;
use std::path::Path;

use agbmap_core::calibration::{
    calibrate_from_plots, compute_plot_agb, label_footprints, load_samples, write_samples, AllometryForm, LabeledSample,
    RhAgbModel,
};
use agbmap_core::ensemble::{ensemble_maps, predict_map, samples_matrix};
use agbmap_core::evaluation::{validate_against_plots, write_pairs_csv};
use agbmap_core::ingest::{load_footprints, load_plots, load_raster, write_footprints, write_raster, ColumnMap};
use agbmap_core::ingest::write_rejected_footprints;
use agbmap_core::learners::{self, ForestModel, LearnerKind, TrainConfig};
use agbmap_core::pipeline::{cv_run, run_pipeline, CvRunSettings, PipelineConfig, RUN_MANIFEST_FILE};
use agbmap_core::quality::{filter_quality, QualityCriteria};
use agbmap_core::sar::{self, CurveFit, CurveForm, Polarization};
use agbmap_core::stack::{attach_features, build_forest_mask, build_stack, load_stack, save_stack, FeatureStack, StackConfig};
use agbmap_core::synth::{make_synthetic_world, WorldSpec};
use agbmap_core::evaluation::DEFAULT_SLOPE_BINS;
use agbmap_core::{Error, Result};
use serde_json::{json, Value};

use crate::*;

pub fn dispatch(cmd: Command) -> Result<Value> {
    match cmd {
        Command::FilterQuality(a) => filter_quality_cmd(a),
        Command::FitSarCurve(a) => fit_sar_curve(a),
        Command::FilterSar(a) => filter_sar(a),
        Command::FitAllometry(a) => fit_allometry(a),
        Command::Label(a) => label(a),
        Command::BuildStack(a) => build_stack_cmd(a),
        Command::BuildMask(a) => build_mask(a),
        Command::Train(a) => train(a),
        Command::CvRun(a) => cv_run_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Ensemble(a) => ensemble(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Run(a) => run(a),
        Command::SynthWorld(a) => synth_world(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_reader(f)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    ensure_parent(path)?;
    let f = File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T> {
    s.parse()
}

fn filter_quality_cmd(a: FilterQualityArgs) -> Result<Value> {
    let mut criteria: QualityCriteria = match &a.config {
        Some(p) => read_json(p)?,
        None => QualityCriteria::default(),
    };
    if let Some(s) = a.min_sensitivity {
        criteria.min_sensitivity = s;
    }
    if a.allow_day {
        criteria.require_night = false;
    }
    if a.allow_coverage_beams {
        criteria.require_power_beam = false;
    }
    if a.allow_degraded {
        criteria.exclude_degrade = false;
    }
    criteria.validate()?;
    let columns: ColumnMap = match &a.columns {
        Some(p) => read_json(p)?,
        None => ColumnMap::default(),
    };
    let load = load_footprints(&a.input, &columns)?;
    let malformed = load.rejects.len();
    let outcome = filter_quality(load.records, &criteria);
    ensure_parent(&a.out)?;
    write_footprints(&a.out, &outcome.retained)?;
    if let Some(r) = &a.rejects {
        ensure_parent(r)?;
        write_rejected_footprints(r, &outcome.rejected)?;
    }
    Ok(json!({
        "loaded": outcome.retained.len() + outcome.rejected.len() + malformed,
        "retained": outcome.retained.len(),
        "rejected": outcome.rejected.len(),
        "malformed_rows": malformed,
        "criteria": criteria,
    }))
}

fn fit_sar_curve(a: FitSarCurveArgs) -> Result<Value> {
    let form: CurveForm = parse(&a.form)?;
    let pol: Polarization = parse(&a.polarization)?;
    if !(a.tol_db > 0.0) {
        return Err(Error::InvalidInput("tol-db must be positive".into()));
    }
    let pairs = sar::load_pairs(&a.pairs)?;
    let fit = sar::fit_rh_backscatter(&pairs, form, pol)?.with_tolerance(a.tol_db);
    ensure_parent(&a.out)?;
    fit.save(&a.out)?;
    Ok(serde_json::to_value(&fit)?)
}

fn filter_sar(a: FilterSarArgs) -> Result<Value> {
    let fits: Vec<CurveFit> = a
        .curves
        .iter()
        .map(|p| {
            let fit = CurveFit::load(p)?;
            Ok(match a.tol_db {
                Some(t) => fit.with_tolerance(t),
                None => fit,
            })
        })
        .collect::<Result<_>>()?;
    if let Some(t) = a.tol_db {
        if !(t > 0.0) {
            return Err(Error::InvalidInput("tol-db must be positive".into()));
        }
    }
    let load = load_footprints(&a.input, &ColumnMap::default())?;
    let stack = a.stack.as_deref().map(load_stack).transpose()?;
    let pols: Vec<Polarization> = fits.iter().map(|f| f.polarization).collect();
    let (samples, source) = sar::backscatter_samples(stack.as_ref(), &load.records, &pols)?;
    let n = load.records.len();
    let outcome = sar::filter_by_band(load.records, &samples, &fits, a.rh)?;
    ensure_parent(&a.out)?;
    write_footprints(&a.out, &outcome.retained)?;
    if let Some(r) = &a.rejects {
        ensure_parent(r)?;
        write_rejected_footprints(r, &outcome.rejected)?;
    }
    Ok(json!({
        "loaded": n,
        "retained": outcome.retained.len(),
        "rejected": outcome.rejected.len(),
        "covariate_source": source,
        "polarizations": pols,
    }))
}

fn fit_allometry(a: FitAllometryArgs) -> Result<Value> {
    let form: AllometryForm = parse(&a.form)?;
    let load = load_plots(&a.plots, &a.trees)?;
    let mut plots = load.plots;
    compute_plot_agb(&mut plots, a.min_dbh_cm)?;
    let fps = load_footprints(&a.footprints, &ColumnMap::default())?;
    let cal = calibrate_from_plots(&plots, &fps.records, a.match_distance_m, a.percentile, 0..=100, form, &a.region)?;
    ensure_parent(&a.out)?;
    cal.model.save(&a.out)?;
    if let Some(r) = &a.report {
        write_json(r, &cal)?;
    }
    Ok(json!({
        "model": cal.model,
        "plots_matched": cal.matches.len(),
        "plots_unmatched": cal.unmatched_plots.len(),
        "plot_rejects": load.plot_rejects.len(),
        "tree_rejects": load.tree_rejects.len(),
    }))
}

fn label(a: LabelArgs) -> Result<Value> {
    let model = RhAgbModel::load(&a.model)?;
    let load = load_footprints(&a.footprints, &ColumnMap::default())?;
    let labeling = label_footprints(&load.records, &model)?;
    let n = labeling.samples.len();
    ensure_parent(&a.out)?;
    let (written, dropped, names) = match &a.stack {
        Some(p) => {
            let stack = load_stack(p)?;
            let att = attach_features(&stack, labeling.samples)?;
            write_samples(&a.out, &att.complete, &stack.layer_names)?;
            (att.complete.len(), att.incomplete + att.outside, stack.layer_names.len())
        }
        None => {
            write_samples(&a.out, &labeling.samples, &[])?;
            (n, 0, 0)
        }
    };
    Ok(json!({
        "labeled": n,
        "written": written,
        "dropped_no_features": dropped,
        "clamped": labeling.clamped,
        "n_features": names,
    }))
}

fn build_stack_cmd(a: BuildStackArgs) -> Result<Value> {
    let config: StackConfig = read_json(&a.config)?;
    let base = a.config.parent().unwrap_or(Path::new(""));
    let stack = build_stack(&config, base)?;
    let manifest = save_stack(&stack, &a.out_dir)?;
    Ok(json!({
        "manifest": manifest,
        "layers": stack.layer_names,
        "grid": stack.grid,
    }))
}

fn build_mask(a: BuildMaskArgs) -> Result<Value> {
    let mask = build_forest_mask(
        &load_raster(&a.cover)?,
        &load_raster(&a.loss)?,
        &load_raster(&a.gain)?,
        a.threshold,
    )?;
    ensure_parent(&a.out)?;
    write_raster(&mask.grid, &a.out)?;
    Ok(json!({
        "pixels": mask.grid.values.len(),
        "forest": mask.forest_count(),
        "provenance": mask.provenance,
    }))
}

fn learner_setup(a: &LearnerArgs) -> Result<(LearnerKind, TrainConfig)> {
    let kind: LearnerKind = parse(&a.learner)?;
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n_trees {
        cfg.n_trees = n;
    }
    cfg.validate()?;
    Ok((kind, cfg))
}

/// Samples whose features match the stack layers; re-sampled from the
/// stack when the file carries none or a different layer set.
fn samples_for_stack(path: &Path, stack: &FeatureStack) -> Result<(Vec<LabeledSample>, usize)> {
    let (samples, names) = load_samples(path)?;
    if names == stack.layer_names {
        return Ok((samples, 0));
    }
    let att = attach_features(stack, samples)?;
    Ok((att.complete, att.incomplete + att.outside))
}

fn train(a: TrainArgs) -> Result<Value> {
    let (kind, cfg) = learner_setup(&a.learner)?;
    let stack = load_stack(&a.stack)?;
    let (samples, dropped) = samples_for_stack(&a.samples, &stack)?;
    let (x, y) = samples_matrix(&samples)?;
    let model = learners::train(kind, &x, &y, &stack.layer_names, &cfg)?;
    ensure_parent(&a.out)?;
    model.save(&a.out)?;
    Ok(json!({
        "learner": kind,
        "n_samples": samples.len(),
        "dropped_no_features": dropped,
        "n_trees": model.trees.len(),
        "seed": cfg.seed,
    }))
}

fn cv_run_cmd(a: CvRunArgs) -> Result<Value> {
    let (kind, cfg) = learner_setup(&a.learner)?;
    if a.chunk_rows == 0 {
        return Err(Error::InvalidInput("chunk-rows must be positive".into()));
    }
    let stack = load_stack(&a.stack)?;
    let (samples, dropped) = samples_for_stack(&a.samples, &stack)?;
    let settings = CvRunSettings {
        k: a.k,
        fold_seed: a.fold_seed,
        holdout_ratio: a.holdout_ratio,
        holdout_seed: a.holdout_seed,
        chunk_rows: a.chunk_rows,
        slope_bins: DEFAULT_SLOPE_BINS.to_vec(),
    };
    let out = cv_run(&samples, &stack, kind, &cfg, &settings, &a.out_dir)?;
    Ok(json!({
        "dropped_no_features": dropped,
        "report": out.report,
        "files": out.files,
    }))
}

fn predict(a: PredictArgs) -> Result<Value> {
    if a.chunk_rows == 0 {
        return Err(Error::InvalidInput("chunk-rows must be positive".into()));
    }
    let model = ForestModel::load(&a.model)?;
    let stack = load_stack(&a.stack)?;
    let pred = predict_map(&model, &stack, a.chunk_rows)?;
    ensure_parent(&a.out)?;
    write_raster(&pred.map, &a.out)?;
    Ok(json!({
        "pixels": pred.map.values.len(),
        "nodata_pixels": pred.nodata_pixels,
        "clamped": pred.clamped,
    }))
}

fn ensemble(a: EnsembleArgs) -> Result<Value> {
    let maps: Vec<_> = a.maps.iter().map(load_raster).collect::<Result<_>>()?;
    let (mean, std) = ensemble_maps(&maps)?;
    ensure_parent(&a.out_mean)?;
    ensure_parent(&a.out_std)?;
    write_raster(&mean, &a.out_mean)?;
    write_raster(&std, &a.out_std)?;
    Ok(json!({ "maps": maps.len(), "valid_pixels": mean.valid_count() }))
}

fn evaluate(a: EvaluateArgs) -> Result<Value> {
    let map = load_raster(&a.map)?;
    let load = load_plots(&a.plots, &a.trees)?;
    let mut plots = load.plots;
    compute_plot_agb(&mut plots, a.min_dbh_cm)?;
    let v = validate_against_plots(&map, &plots, "map vs plots")?;
    write_json(&a.out, &v)?;
    let pairs = a.pairs.clone().unwrap_or_else(|| a.out.with_extension("pairs.csv"));
    write_pairs_csv(&pairs, &v.pairs)?;
    Ok(json!({
        "report": v.report,
        "excluded_nodata": v.excluded_nodata,
        "excluded_outside": v.excluded_outside,
    }))
}

fn run(a: RunArgs) -> Result<Value> {
    let mut config = PipelineConfig::load(&a.config)?;
    if let Some(d) = a.out_dir {
        config.paths.output_dir = d;
    }
    if let Some(k) = a.k {
        config.k = k;
    }
    if let Some(s) = a.fold_seed {
        config.seeds.folds = s;
    }
    if let Some(ls) = &a.learners {
        config.learners = ls.iter().map(|s| parse(s)).collect::<Result<_>>()?;
    }
    let manifest = run_pipeline(&config)?;
    let stages: Vec<Value> = manifest
        .stages
        .iter()
        .map(|s| json!({"stage": s.name, "loaded": s.loaded, "retained": s.retained, "rejected": s.rejected}))
        .collect();
    Ok(json!({
        "manifest": config.paths.output_dir.join(RUN_MANIFEST_FILE),
        "stages": stages,
        "results": manifest.results,
        "total_seconds": manifest.total_seconds,
    }))
}

fn synth_world(a: SynthWorldArgs) -> Result<Value> {
    let spec = match (&a.spec, a.tiny) {
        (Some(p), _) => read_json::<WorldSpec>(p)?,
        (None, true) => WorldSpec::tiny(),
        (None, false) => WorldSpec::default(),
    };
    spec.validate()?;
    let world = make_synthetic_world(&spec, a.seed)?;
    let files = world.write(&a.out_dir)?;
    Ok(json!({
        "seed": a.seed,
        "footprints": world.footprints.len(),
        "plots": world.plots.len(),
        "sar_outliers": world.sar_outlier_ids.len(),
        "files": files,
    }))
}

