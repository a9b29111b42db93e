//! Tree-ensemble regressors: bagged random forest and leaf-wise histogram
//! gradient boosting, sharing one model format.

pub mod binning;
mod exact;
mod forest;
mod gbdt;
mod tree;

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use exact::exact_tree_reference;
pub use forest::{bootstrap_indices, train_random_forest};
pub use gbdt::train_gbdt;
pub use tree::{Tree, TreeNode};

use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Dense row-major matrix of training or prediction features.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != n_rows * n_cols {
            return Err(Error::invalid(format!(
                "matrix {n_rows}x{n_cols} needs {} values, got {}",
                n_rows * n_cols,
                data.len()
            )));
        }
        Ok(Matrix { n_rows, n_cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
        let n_cols = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != n_cols) {
            return Err(Error::invalid(format!("ragged rows: {} vs {n_cols} columns", r.len())));
        }
        Ok(Matrix {
            n_rows: rows.len(),
            n_cols,
            data: rows.concat(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.get(i, j)).collect()
    }

    /// Rows taken in the order given by `idx`.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.n_cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            n_rows: idx.len(),
            n_cols: self.n_cols,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    RandomForest,
    Gbdt,
}

impl LearnerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LearnerKind::RandomForest => "random_forest",
            LearnerKind::Gbdt => "gbdt",
        }
    }
}

impl std::fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LearnerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_forest" | "rf" => Ok(LearnerKind::RandomForest),
            "gbdt" | "lightgbm" => Ok(LearnerKind::Gbdt),
            other => Err(Error::invalid(format!("unknown learner `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RfConfig {
    /// Features tried per split; ⌈p/3⌉ when unset.
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub bootstrap: bool,
    pub max_depth: Option<usize>,
}

impl Default for RfConfig {
    fn default() -> Self {
        RfConfig {
            mtry: None,
            min_leaf: 1,
            bootstrap: true,
            max_depth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtConfig {
    pub max_leaves: usize,
    pub learning_rate: f64,
    pub max_bins: usize,
    pub min_leaf: usize,
    pub min_gain: f64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        GbdtConfig {
            max_leaves: 31,
            learning_rate: 0.1,
            max_bins: 255,
            min_leaf: 20,
            min_gain: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_trees: usize,
    pub rf: RfConfig,
    pub gbdt: GbdtConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_trees: 100,
            rf: RfConfig::default(),
            gbdt: GbdtConfig::default(),
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let g = &self.gbdt;
        if self.rf.min_leaf == 0 || g.min_leaf == 0 {
            return Err(Error::invalid("min_leaf must be positive"));
        }
        if self.rf.mtry == Some(0) || self.rf.max_depth == Some(0) {
            return Err(Error::invalid("mtry and max_depth must be positive"));
        }
        if g.max_leaves < 2 {
            return Err(Error::invalid("max_leaves must be at least 2"));
        }
        if !(g.learning_rate > 0.0 && g.learning_rate <= 1.0) {
            return Err(Error::invalid("learning_rate must lie in (0, 1]"));
        }
        if !(2..=256).contains(&g.max_bins) {
            return Err(Error::invalid("max_bins must lie in [2, 256]"));
        }
        if !(g.min_gain >= 0.0) {
            return Err(Error::invalid("min_gain must be non-negative"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TrainConfig> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let c: TrainConfig = serde_json::from_reader(f)?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub format_version: u32,
    pub kind: LearnerKind,
    pub trees: Vec<Tree>,
    /// Mean training label for gbdt; unused by the forest.
    pub base_score: f64,
    pub learning_rate: f64,
    pub feature_names: Vec<String>,
    /// Per-feature bin upper edges (gbdt only).
    #[serde(default)]
    pub bin_edges: Vec<Vec<f64>>,
    /// Total split gain per feature, summed over trees.
    #[serde(default)]
    pub split_gain: Vec<f64>,
    pub config: TrainConfig,
    pub seed: u64,
    pub n_train: usize,
}

/// Mean that is exact when all values are equal.
pub(crate) fn stable_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut it = values;
    let Some(first) = it.next() else { return f64::NAN };
    let (mut acc, mut n) = (0.0, 1usize);
    for v in it {
        acc += v - first;
        n += 1;
    }
    first + acc / n as f64
}

impl ForestModel {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Prediction for one finite feature row.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        match self.kind {
            LearnerKind::Gbdt => {
                let mut s = 0.0;
                for t in &self.trees {
                    s += t.predict(row);
                }
                self.base_score + self.learning_rate * s
            }
            LearnerKind::RandomForest => stable_mean(self.trees.iter().map(|t| t.predict(row))),
        }
    }

    /// Row predictions; rows holding a non-finite value yield None.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<Option<f64>>> {
        if x.n_cols != self.n_features() {
            return Err(Error::invalid(format!(
                "model expects {} features, got {}",
                self.n_features(),
                x.n_cols
            )));
        }
        Ok((0..x.n_rows)
            .into_par_iter()
            .map(|i| {
                let row = x.row(i);
                row.iter().all(|v| v.is_finite()).then(|| self.predict_row(row))
            })
            .collect())
    }

    /// Copy keeping only the first `k` trees.
    pub fn truncated(&self, k: usize) -> ForestModel {
        let mut m = self.clone();
        m.trees.truncate(k);
        m
    }

    /// Split-gain share per feature, summing to 1 when any split exists.
    pub fn feature_importance(&self) -> Vec<(String, f64)> {
        let total: f64 = self.split_gain.iter().sum();
        self.feature_names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let g = self.split_gain.get(i).copied().unwrap_or(0.0);
                (n.clone(), if total > 0.0 { g / total } else { 0.0 })
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ForestModel> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let m: ForestModel = serde_json::from_reader(BufReader::new(f))?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "model format version {} is not supported",
                m.format_version
            )));
        }
        if m.trees.iter().any(|t| !t.is_well_formed(m.n_features())) {
            return Err(Error::invalid("model contains a malformed tree"));
        }
        Ok(m)
    }
}

pub(crate) fn check_training_data(x: &Matrix, y: &[f64], feature_names: &[String]) -> Result<()> {
    if x.n_rows != y.len() {
        return Err(Error::invalid(format!("{} rows but {} labels", x.n_rows, y.len())));
    }
    if x.n_rows < 2 {
        return Err(Error::insufficient("training needs at least 2 samples"));
    }
    if x.n_cols == 0 {
        return Err(Error::invalid("training needs at least one feature"));
    }
    if feature_names.len() != x.n_cols {
        return Err(Error::invalid(format!(
            "{} feature names for {} columns",
            feature_names.len(),
            x.n_cols
        )));
    }
    if x.data.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("training data contains non-finite values"));
    }
    Ok(())
}

/// Row order sorted by (features…, label). Both learners train on this
/// order, so the fitted model does not depend on input row order.
pub(crate) fn canonical_order(x: &Matrix, y: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.n_rows).collect();
    idx.sort_by(|&a, &b| {
        x.row(a)
            .iter()
            .zip(x.row(b))
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or_else(|| y[a].total_cmp(&y[b]))
    });
    idx
}

pub fn train(
    kind: LearnerKind,
    x: &Matrix,
    y: &[f64],
    feature_names: &[String],
    config: &TrainConfig,
) -> Result<ForestModel> {
    match kind {
        LearnerKind::RandomForest => train_random_forest(x, y, feature_names, config),
        LearnerKind::Gbdt => train_gbdt(x, y, feature_names, config),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkEntry {
    pub learner: LearnerKind,
    pub seconds: f64,
    pub n_trees: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub n_rows: usize,
    pub n_cols: usize,
    pub seed: u64,
    pub threads: usize,
    pub entries: Vec<BenchmarkEntry>,
}

impl BenchmarkReport {
    pub fn seconds(&self, kind: LearnerKind) -> Option<f64> {
        self.entries.iter().find(|e| e.learner == kind).map(|e| e.seconds)
    }
}

/// Wall-clock training time of each learner on the same data and thread pool.
pub fn benchmark_training(
    x: &Matrix,
    y: &[f64],
    feature_names: &[String],
    learners: &[LearnerKind],
    config: &TrainConfig,
) -> Result<BenchmarkReport> {
    let mut entries = Vec::new();
    for &kind in learners {
        let start = Instant::now();
        let model = train(kind, x, y, feature_names, config)?;
        let seconds = start.elapsed().as_secs_f64();
        tracing::info!(learner = %kind, seconds, trees = model.trees.len(), "benchmark");
        entries.push(BenchmarkEntry {
            learner: kind,
            seconds,
            n_trees: model.trees.len(),
        });
    }
    Ok(BenchmarkReport {
        n_rows: x.n_rows,
        n_cols: x.n_cols,
        seed: config.seed,
        threads: rayon::current_num_threads(),
        entries,
    })
}
