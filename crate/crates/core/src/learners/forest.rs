//! Bagged CART regression forest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::binning::midpoint;
use super::tree::{Tree, TreeNode};
use super::{canonical_order, check_training_data, stable_mean, ForestModel, LearnerKind, Matrix, TrainConfig};
use super::MODEL_FORMAT_VERSION;
use crate::error::Result;

const REL_GAIN_FLOOR: f64 = 1e-12;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn tree_rng(seed: u64, tree: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(tree as u64)))
}

/// Bootstrap row positions drawn for tree `tree` (positions refer to the
/// canonically sorted training rows).
pub fn bootstrap_indices(seed: u64, tree: usize, n: usize) -> Vec<u32> {
    let mut rng = tree_rng(seed, tree);
    draw_bootstrap(&mut rng, n)
}

fn draw_bootstrap(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..n) as u32).collect()
}

struct Builder<'a> {
    x: &'a Matrix,
    y: &'a [f64],
    mtry: usize,
    min_leaf: usize,
    max_depth: usize,
    pairs: Vec<(f64, f64)>,
    features: Vec<usize>,
    split_gain: Vec<f64>,
}

struct Best {
    feature: usize,
    threshold: f64,
    score: f64,
}

impl Builder<'_> {
    fn leaf_value(&self, rows: &[u32]) -> f64 {
        stable_mean(rows.iter().map(|&i| self.y[i as usize]))
    }

    fn find_split(&mut self, rows: &[u32], rng: &mut ChaCha8Rng) -> Option<Best> {
        let n = rows.len();
        let total: f64 = rows.iter().map(|&i| self.y[i as usize]).sum();
        let parent = total * total / n as f64;
        let p = self.features.len();
        let mut best: Option<Best> = None;
        let mut evaluated = 0;
        // draw features without replacement until mtry non-constant ones
        // have been scanned
        for k in 0..p {
            if evaluated == self.mtry {
                break;
            }
            let j = rng.random_range(k..p);
            self.features.swap(k, j);
            let f = self.features[k];
            self.pairs.clear();
            self.pairs
                .extend(rows.iter().map(|&i| (self.x.get(i as usize, f), self.y[i as usize])));
            self.pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            if self.pairs[0].0 == self.pairs[n - 1].0 {
                continue;
            }
            evaluated += 1;
            let mut sl = 0.0;
            for m in 0..n - 1 {
                sl += self.pairs[m].1;
                if self.pairs[m].0 == self.pairs[m + 1].0 {
                    continue;
                }
                let nl = m + 1;
                let nr = n - nl;
                if nl < self.min_leaf {
                    continue;
                }
                if nr < self.min_leaf {
                    break;
                }
                let sr = total - sl;
                let children = sl * sl / nl as f64 + sr * sr / nr as f64;
                let gain = children - parent;
                if gain > REL_GAIN_FLOOR * (children + parent) && best.as_ref().is_none_or(|b| children > b.score) {
                    best = Some(Best {
                        feature: f,
                        threshold: midpoint(self.pairs[m].0, self.pairs[m + 1].0),
                        score: children,
                    });
                }
            }
        }
        if let Some(b) = &best {
            self.split_gain[b.feature] += b.score - parent;
        }
        best
    }

    fn build(&mut self, rows: &mut [u32], rng: &mut ChaCha8Rng) -> Tree {
        let mut nodes = vec![TreeNode::Leaf { value: 0.0 }];
        // (node, start, end, depth)
        let mut stack = vec![(0usize, 0usize, rows.len(), 0usize)];
        while let Some((node, start, end, depth)) = stack.pop() {
            let r = &mut rows[start..end];
            let first = self.y[r[0] as usize];
            let pure = r.iter().all(|&i| self.y[i as usize] == first);
            let split = if pure || r.len() < 2 * self.min_leaf || depth >= self.max_depth {
                None
            } else {
                self.find_split(r, rng)
            };
            let Some(b) = split else {
                nodes[node] = TreeNode::Leaf {
                    value: self.leaf_value(r),
                };
                continue;
            };
            let mut w = 0;
            for k in 0..r.len() {
                if self.x.get(r[k] as usize, b.feature) <= b.threshold {
                    r.swap(w, k);
                    w += 1;
                }
            }
            let (l, rn) = (nodes.len(), nodes.len() + 1);
            nodes[node] = TreeNode::Split {
                feature: b.feature as u32,
                threshold: b.threshold,
                left: l as u32,
                right: rn as u32,
            };
            nodes.push(TreeNode::Leaf { value: 0.0 });
            nodes.push(TreeNode::Leaf { value: 0.0 });
            stack.push((rn, start + w, end, depth + 1));
            stack.push((l, start, start + w, depth + 1));
        }
        Tree { nodes }
    }
}

pub fn train_random_forest(
    x: &Matrix,
    y: &[f64],
    feature_names: &[String],
    config: &TrainConfig,
) -> Result<ForestModel> {
    config.validate()?;
    check_training_data(x, y, feature_names)?;
    let order = canonical_order(x, y);
    let x = x.select_rows(&order);
    let y: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let n = y.len();
    let p = x.n_cols;
    let rf = &config.rf;
    let mtry = rf.mtry.unwrap_or(p.div_ceil(3)).clamp(1, p);
    let max_depth = rf.max_depth.unwrap_or(usize::MAX);

    let built: Vec<(Tree, Vec<f64>)> = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_rng(config.seed, t);
            let mut rows = if rf.bootstrap {
                draw_bootstrap(&mut rng, n)
            } else {
                (0..n as u32).collect()
            };
            let mut b = Builder {
                x: &x,
                y: &y,
                mtry,
                min_leaf: rf.min_leaf,
                max_depth,
                pairs: Vec::with_capacity(n),
                features: (0..p).collect(),
                split_gain: vec![0.0; p],
            };
            let tree = b.build(&mut rows, &mut rng);
            (tree, b.split_gain)
        })
        .collect();
    let mut split_gain = vec![0.0; p];
    let mut trees = Vec::with_capacity(built.len());
    for (t, g) in built {
        for (a, b) in split_gain.iter_mut().zip(g) {
            *a += b;
        }
        trees.push(t);
    }
    Ok(ForestModel {
        format_version: MODEL_FORMAT_VERSION,
        kind: LearnerKind::RandomForest,
        trees,
        base_score: 0.0,
        learning_rate: 1.0,
        feature_names: feature_names.to_vec(),
        bin_edges: Vec::new(),
        split_gain,
        config: config.clone(),
        seed: config.seed,
        n_train: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|i| format!("f{i}")).collect()
    }

    fn data(n: usize, p: usize, seed: u64) -> (Matrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let y = rows.iter().map(|r| 3.0 * r[0] + r[p - 1] * r[0]).collect();
        (Matrix::from_rows(&rows).unwrap(), y)
    }

    fn small(n_trees: usize) -> TrainConfig {
        TrainConfig {
            n_trees,
            ..Default::default()
        }
    }

    #[test]
    fn constant_labels_exact() {
        let (x, _) = data(80, 4, 1);
        let y = vec![0.7; 80];
        let m = train_random_forest(&x, &y, &names(4), &small(25)).unwrap();
        assert!(m.predict(&x).unwrap().iter().all(|p| *p == Some(0.7)));
    }

    #[test]
    fn interpolates_single_feature() {
        let x = Matrix::from_rows(&(0..50).map(|i| vec![i as f64 / 50.0]).collect::<Vec<_>>()).unwrap();
        let y: Vec<f64> = (0..50).map(|i| i as f64 / 50.0).collect();
        let mut cfg = small(100);
        cfg.rf.mtry = Some(1);
        let m = train_random_forest(&x, &y, &names(1), &cfg).unwrap();
        let pred: Vec<f64> = m.predict(&x).unwrap().into_iter().map(Option::unwrap).collect();
        assert!(crate::evaluation::metrics(&y, &pred, "t").unwrap().r2.unwrap() >= 0.95);
    }

    #[test]
    fn deterministic_by_seed() {
        let (x, y) = data(200, 5, 2);
        let a = train_random_forest(&x, &y, &names(5), &small(10)).unwrap();
        let b = train_random_forest(&x, &y, &names(5), &small(10)).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_ne!(bootstrap_indices(1, 0, 100), bootstrap_indices(2, 0, 100));
        assert_ne!(bootstrap_indices(1, 0, 100), bootstrap_indices(1, 1, 100));
    }

    #[test]
    fn predictions_within_label_range() {
        let (x, y) = data(300, 3, 3);
        let m = train_random_forest(&x, &y, &names(3), &small(20)).unwrap();
        let (lo, hi) = y.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let row: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..2.0)).collect();
            let p = m.predict_row(&row);
            assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
        }
    }

    #[test]
    fn row_order_does_not_matter() {
        let (x, y) = data(150, 3, 4);
        let a = train_random_forest(&x, &y, &names(3), &small(8)).unwrap();
        let perm: Vec<usize> = (0..150).map(|i| (i * 7) % 150).collect();
        let xp = x.select_rows(&perm);
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let b = train_random_forest(&xp, &yp, &names(3), &small(8)).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn depth_limit_respected() {
        let (x, y) = data(200, 3, 5);
        let mut cfg = small(3);
        cfg.rf.max_depth = Some(1);
        let m = train_random_forest(&x, &y, &names(3), &cfg).unwrap();
        assert!(m.trees.iter().all(|t| t.nodes.len() <= 3));
    }
}
