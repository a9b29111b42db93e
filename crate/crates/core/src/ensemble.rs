//! K-fold training, wall-to-wall prediction, and the mean / spread maps of
//! the fold ensemble.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::LabeledSample;
use crate::error::{Error, Result};
use crate::evaluation::{metrics, MetricsReport};
use crate::ingest::RasterGrid;
use crate::learners::{self, stable_mean, ForestModel, LearnerKind, Matrix, TrainConfig};
use crate::stack::{FeatureStack, NODATA};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    /// Fold index per sample.
    pub assignment: Vec<usize>,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.assignment {
            s[f] += 1;
        }
        s
    }
}

/// Seeded shuffle cut into `k` contiguous runs; sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::invalid("k must be at least 2"));
    }
    if n < k {
        return Err(Error::insufficient(format!("{n} samples cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    let (base, extra) = (n / k, n % k);
    let mut pos = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        for &i in &order[pos..pos + size] {
            assignment[i] = fold;
        }
        pos += size;
    }
    Ok(FoldAssignment { k, assignment, seed })
}

/// Feature matrix and labels of samples whose features are filled.
pub fn samples_matrix(samples: &[LabeledSample]) -> Result<(Matrix, Vec<f64>)> {
    let p = samples.first().map_or(0, |s| s.features.len());
    if p == 0 {
        return Err(Error::insufficient("samples have no features"));
    }
    let mut data = Vec::with_capacity(samples.len() * p);
    for s in samples {
        if s.features.len() != p {
            return Err(Error::invalid(format!(
                "sample {} has {} features, expected {p}",
                s.shot_id,
                s.features.len()
            )));
        }
        data.extend_from_slice(&s.features);
    }
    let y = samples.iter().map(|s| s.agb_mg_ha).collect();
    Ok((Matrix::new(samples.len(), p, data)?, y))
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub learner: LearnerKind,
    pub models: Vec<ForestModel>,
    pub fold_metrics: Vec<MetricsReport>,
    pub pooled_metrics: MetricsReport,
    /// Out-of-fold prediction for every sample, in input order.
    pub oof: Vec<f64>,
    pub folds: FoldAssignment,
}

/// Train one model per fold on the other folds and score it on its own.
pub fn cv_train(
    samples: &[LabeledSample],
    feature_names: &[String],
    learner: LearnerKind,
    config: &TrainConfig,
    folds: &FoldAssignment,
) -> Result<CvResult> {
    if folds.assignment.len() != samples.len() {
        return Err(Error::invalid("fold assignment does not match sample count"));
    }
    let (x, y) = samples_matrix(samples)?;
    if folds.fold_sizes().contains(&0) {
        return Err(Error::insufficient("a fold is empty"));
    }
    let trained: Vec<(ForestModel, Vec<usize>, Vec<f64>)> = (0..folds.k)
        .into_par_iter()
        .map(|fold| {
            let train_idx = folds.train_indices(fold);
            let test_idx = folds.test_indices(fold);
            let xt = x.select_rows(&train_idx);
            let yt: Vec<f64> = train_idx.iter().map(|&i| y[i]).collect();
            let model = learners::train(learner, &xt, &yt, feature_names, config)?;
            let pred = test_idx.iter().map(|&i| model.predict_row(x.row(i))).collect();
            Ok((model, test_idx, pred))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut oof = vec![f64::NAN; samples.len()];
    let mut models = Vec::with_capacity(folds.k);
    let mut fold_metrics = Vec::with_capacity(folds.k);
    for (fold, (model, test_idx, pred)) in trained.into_iter().enumerate() {
        let obs: Vec<f64> = test_idx.iter().map(|&i| y[i]).collect();
        fold_metrics.push(metrics(&obs, &pred, &format!("{learner} fold {fold}"))?);
        for (&i, p) in test_idx.iter().zip(pred) {
            oof[i] = p;
        }
        models.push(model);
    }
    let pooled_metrics = metrics(&y, &oof, &format!("{learner} pooled"))?;
    Ok(CvResult {
        learner,
        models,
        fold_metrics,
        pooled_metrics,
        oof,
        folds: folds.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct MapPrediction {
    pub map: RasterGrid,
    /// Negative predictions set to zero.
    pub clamped: usize,
    pub nodata_pixels: usize,
}

/// Predict every pixel, `chunk_rows` raster rows at a time. Pixels with
/// nodata in any layer stay nodata.
pub fn predict_map(model: &ForestModel, stack: &FeatureStack, chunk_rows: usize) -> Result<MapPrediction> {
    if model.feature_names != stack.layer_names {
        return Err(Error::invalid(format!(
            "model features [{}] do not match stack layers [{}]",
            model.feature_names.join(","),
            stack.layer_names.join(",")
        )));
    }
    if chunk_rows == 0 {
        return Err(Error::invalid("chunk_rows must be positive"));
    }
    let cols = stack.grid.n_cols;
    let p = stack.n_layers();
    let mut values = vec![NODATA; stack.grid.len()];
    let mut clamped = 0;
    let mut nodata_pixels = 0;
    for (chunk_idx, chunk) in values.chunks_mut(chunk_rows * cols).enumerate() {
        let offset = chunk_idx * chunk_rows * cols;
        let (c, n) = chunk
            .par_iter_mut()
            .enumerate()
            .map_init(
                || vec![0.0; p],
                |row, (j, out)| {
                    if !stack.pixel(offset + j, row) {
                        return (0usize, 1usize);
                    }
                    let v = model.predict_row(row);
                    if v < 0.0 {
                        *out = 0.0;
                        (1, 0)
                    } else {
                        *out = v as f32;
                        (0, 0)
                    }
                },
            )
            .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        clamped += c;
        nodata_pixels += n;
    }
    Ok(MapPrediction {
        map: stack.layers[0].with_values(values, NODATA, "AGB_Mg_ha")?,
        clamped,
        nodata_pixels,
    })
}

/// Per-pixel mean and population standard deviation (divide by k) over
/// fold maps; a pixel that is nodata in any map is nodata in both outputs.
pub fn ensemble_maps(maps: &[RasterGrid]) -> Result<(RasterGrid, RasterGrid)> {
    if maps.len() < 2 {
        return Err(Error::invalid("ensemble needs at least two maps"));
    }
    for (i, m) in maps.iter().enumerate().skip(1) {
        maps[0].ensure_aligned(m, &format!("fold map {i}"))?;
    }
    let k = maps.len() as f64;
    let (mean, std): (Vec<f32>, Vec<f32>) = (0..maps[0].values.len())
        .into_par_iter()
        .map(|i| {
            if maps.iter().any(|m| !m.is_valid(m.values[i])) {
                return (NODATA, NODATA);
            }
            let mu = stable_mean(maps.iter().map(|m| m.values[i] as f64));
            let var = maps.iter().map(|m| (m.values[i] as f64 - mu).powi(2)).sum::<f64>() / k;
            (mu as f32, var.sqrt() as f32)
        })
        .unzip();
    let label = format!("AGB_std_Mg_ha population k={}", maps.len());
    Ok((
        maps[0].with_values(mean, NODATA, "AGB_mean_Mg_ha")?,
        maps[0].with_values(std, NODATA, label)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::GridSpec;
    use crate::learners::Tree;
    use rand::{Rng, SeedableRng};

    #[test]
    fn fold_sizes() {
        let f = kfold_split(10, 5, 1).unwrap();
        assert_eq!(f.fold_sizes(), vec![2; 5]);
        let mut s = kfold_split(11, 5, 1).unwrap().fold_sizes();
        s.sort();
        assert_eq!(s, vec![2, 2, 2, 2, 3]);
        assert_eq!(kfold_split(11, 5, 1).unwrap(), kfold_split(11, 5, 1).unwrap());
        assert!(kfold_split(3, 5, 1).is_err());
    }

    fn sample(i: usize, features: Vec<f64>, y: f64) -> LabeledSample {
        LabeledSample {
            shot_id: format!("s{i}"),
            lat: 0.0,
            lon: 0.0,
            agb_mg_ha: y,
            features,
            slope_deg: None,
        }
    }

    #[test]
    fn constant_labels_zero_rmse() {
        let samples: Vec<LabeledSample> = (0..50).map(|i| sample(i, vec![i as f64, 1.0], 42.0)).collect();
        let names = vec!["a".to_string(), "b".to_string()];
        let folds = kfold_split(50, 5, 3).unwrap();
        let cfg = TrainConfig {
            n_trees: 5,
            ..Default::default()
        };
        for kind in [LearnerKind::Gbdt, LearnerKind::RandomForest] {
            let r = cv_train(&samples, &names, kind, &cfg, &folds).unwrap();
            assert_eq!(r.pooled_metrics.rmse, 0.0);
            assert_eq!(r.oof.len(), 50);
            assert_eq!(r.models.len(), 5);
        }
    }

    #[test]
    fn friedman_signal_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<LabeledSample> = (0..5000)
            .map(|i| {
                let x: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
                let y = 10.0 * (std::f64::consts::PI * x[0] * x[1]).sin()
                    + 20.0 * (x[2] - 0.5).powi(2)
                    + 10.0 * x[3]
                    + 5.0 * x[4]
                    + rng.random_range(-1.0..1.0);
                sample(i, x, y)
            })
            .collect();
        let names: Vec<String> = (0..5).map(|i| format!("x{i}")).collect();
        let folds = kfold_split(samples.len(), 5, 1).unwrap();
        let cfg = TrainConfig {
            n_trees: 50,
            ..Default::default()
        };
        for kind in [LearnerKind::Gbdt, LearnerKind::RandomForest] {
            let r = cv_train(&samples, &names, kind, &cfg, &folds).unwrap();
            assert!(r.pooled_metrics.r2.unwrap() >= 0.8, "{kind}: {:?}", r.pooled_metrics.r2);
        }
    }

    fn spec(rows: usize, cols: usize) -> GridSpec {
        GridSpec {
            origin_x: 400_000.0,
            origin_y: 5_000_000.0,
            pixel_size: 25.0,
            n_rows: rows,
            n_cols: cols,
            crs_id: "EPSG:32651".into(),
        }
    }

    #[test]
    fn ensemble_statistics() {
        let maps: Vec<RasterGrid> = (1..=5)
            .map(|v| RasterGrid::filled(spec(2, 2), v as f32, NODATA, "m").unwrap())
            .collect();
        let (mean, std) = ensemble_maps(&maps).unwrap();
        assert!(mean.values.iter().all(|&v| v == 3.0));
        assert!(std.values.iter().all(|&v| (v as f64 - 2f64.sqrt()).abs() < 1e-6));
        let same = vec![RasterGrid::filled(spec(2, 2), 0.1, NODATA, "m").unwrap(); 5];
        assert!(ensemble_maps(&same).unwrap().1.values.iter().all(|&v| v == 0.0));
        let mut holed = maps.clone();
        holed[2].values[1] = NODATA;
        let (m, s) = ensemble_maps(&holed).unwrap();
        assert_eq!((m.values[1], s.values[1]), (NODATA, NODATA));
        assert!(ensemble_maps(&maps[..1]).is_err());
    }

    fn const_model(v: f64, names: Vec<String>) -> ForestModel {
        ForestModel {
            format_version: crate::learners::MODEL_FORMAT_VERSION,
            kind: LearnerKind::RandomForest,
            trees: vec![Tree::leaf(v)],
            base_score: 0.0,
            learning_rate: 1.0,
            feature_names: names,
            bin_edges: vec![],
            split_gain: vec![],
            config: TrainConfig::default(),
            seed: 0,
            n_train: 0,
        }
    }

    #[test]
    fn map_prediction_rules() {
        let a = RasterGrid::new(spec(2, 2), NODATA, vec![1.0, NODATA, 3.0, 4.0], "a").unwrap();
        let stack = FeatureStack::custom(vec![("a".into(), a)]).unwrap();
        let out = predict_map(&const_model(7.0, vec!["a".into()]), &stack, 1).unwrap();
        assert_eq!(out.map.values, vec![7.0, NODATA, 7.0, 7.0]);
        assert_eq!(out.nodata_pixels, 1);
        let neg = predict_map(&const_model(-1.0, vec!["a".into()]), &stack, 2).unwrap();
        assert_eq!(neg.clamped, 3);
        assert!(predict_map(&const_model(7.0, vec!["b".into()]), &stack, 1).is_err());
    }
}
