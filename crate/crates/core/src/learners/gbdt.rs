//! Leaf-wise histogram gradient boosting with squared-error loss. With unit
//! hessians the split gain reduces to the variance gain
//! G_L²/n_L + G_R²/n_R − G²/n.

use super::binning::{bin_index, compute_bin_edges};
use super::tree::{Tree, TreeNode};
use super::{canonical_order, check_training_data, stable_mean, ForestModel, LearnerKind, Matrix, TrainConfig};
use super::MODEL_FORMAT_VERSION;
use crate::error::Result;

/// Splits whose gain is below this fraction of the children's G²/n terms
/// are rounding noise, not structure.
const REL_GAIN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default)]
struct BinStat {
    sum: f64,
    count: u32,
}

#[derive(Debug, Clone, Copy)]
struct SplitChoice {
    feature: usize,
    bin: usize,
    gain: f64,
    left_count: usize,
}

struct Leaf {
    start: usize,
    end: usize,
    node: usize,
    hist: Vec<BinStat>,
    best: Option<SplitChoice>,
}

struct Binned {
    /// Row-major bin codes, n × p.
    codes: Vec<u8>,
    n_features: usize,
    offsets: Vec<usize>,
    n_bins: Vec<usize>,
    total_bins: usize,
}

impl Binned {
    fn new(x: &Matrix, edges: &[Vec<f64>]) -> Binned {
        let p = x.n_cols;
        let n_bins: Vec<usize> = edges.iter().map(|e| e.len() + 1).collect();
        let mut offsets = Vec::with_capacity(p);
        let mut total = 0;
        for &b in &n_bins {
            offsets.push(total);
            total += b;
        }
        let codes = x
            .data
            .chunks_exact(p)
            .flat_map(|row| row.iter().zip(edges).map(|(&v, e)| bin_index(e, v)))
            .collect();
        Binned {
            codes,
            n_features: p,
            offsets,
            n_bins,
            total_bins: total,
        }
    }

    fn histogram(&self, rows: &[u32], grad: &[f64]) -> Vec<BinStat> {
        let p = self.n_features;
        let mut hist = vec![BinStat::default(); self.total_bins];
        for &i in rows {
            let i = i as usize;
            let g = grad[i];
            let codes = &self.codes[i * p..(i + 1) * p];
            for (f, &c) in codes.iter().enumerate() {
                let b = &mut hist[self.offsets[f] + c as usize];
                b.sum += g;
                b.count += 1;
            }
        }
        hist
    }

    fn best_split(&self, hist: &[BinStat], min_leaf: usize, min_gain: f64) -> Option<SplitChoice> {
        let mut best: Option<SplitChoice> = None;
        for f in 0..self.n_features {
            let h = &hist[self.offsets[f]..self.offsets[f] + self.n_bins[f]];
            let (total, n) = h.iter().fold((0.0, 0usize), |(s, c), b| (s + b.sum, c + b.count as usize));
            let parent = total * total / n as f64;
            let (mut gl, mut nl) = (0.0, 0usize);
            for (b, stat) in h[..h.len() - 1].iter().enumerate() {
                gl += stat.sum;
                nl += stat.count as usize;
                if nl < min_leaf {
                    continue;
                }
                let nr = n - nl;
                if nr < min_leaf {
                    break;
                }
                let gr = total - gl;
                let children = gl * gl / nl as f64 + gr * gr / nr as f64;
                let gain = children - parent;
                if gain > min_gain && gain > REL_GAIN_FLOOR * (children + parent) && best.is_none_or(|s| gain > s.gain) {
                    best = Some(SplitChoice {
                        feature: f,
                        bin: b,
                        gain,
                        left_count: nl,
                    });
                }
            }
        }
        best
    }
}

/// Grow one tree on `grad`, returning it with each leaf's row range in
/// `rows` and its value.
fn grow_tree(
    binned: &Binned,
    edges: &[Vec<f64>],
    rows: &mut [u32],
    grad: &[f64],
    config: &TrainConfig,
    split_gain: &mut [f64],
) -> (Tree, Vec<(usize, usize, f64)>) {
    let g = &config.gbdt;
    let p = binned.n_features;
    let mut nodes = vec![TreeNode::Leaf { value: 0.0 }];
    let hist = binned.histogram(rows, grad);
    let best = binned.best_split(&hist, g.min_leaf, g.min_gain);
    let mut leaves = vec![Leaf {
        start: 0,
        end: rows.len(),
        node: 0,
        hist,
        best,
    }];
    let mut scratch: Vec<u32> = Vec::with_capacity(rows.len());
    while leaves.len() < g.max_leaves {
        let mut pick: Option<(usize, f64)> = None;
        for (li, leaf) in leaves.iter().enumerate() {
            if let Some(s) = leaf.best {
                if pick.is_none_or(|(_, gain)| s.gain > gain) {
                    pick = Some((li, s.gain));
                }
            }
        }
        let Some((li, _)) = pick else { break };
        let leaf = &mut leaves[li];
        let split = leaf.best.take().expect("picked leaf has a split");
        split_gain[split.feature] += split.gain;

        // stable partition of the leaf's rows
        scratch.clear();
        let range = &mut rows[leaf.start..leaf.end];
        let mut w = 0;
        for k in 0..range.len() {
            let i = range[k];
            if binned.codes[i as usize * p + split.feature] as usize <= split.bin {
                range[w] = i;
                w += 1;
            } else {
                scratch.push(i);
            }
        }
        range[w..].copy_from_slice(&scratch);
        debug_assert_eq!(w, split.left_count);
        let mid = leaf.start + w;

        let (left_rows, right_rows) = (&rows[leaf.start..mid], &rows[mid..leaf.end]);
        let left_smaller = left_rows.len() <= right_rows.len();
        let small = binned.histogram(if left_smaller { left_rows } else { right_rows }, grad);
        let large: Vec<BinStat> = leaf
            .hist
            .iter()
            .zip(&small)
            .map(|(p, s)| BinStat {
                sum: p.sum - s.sum,
                count: p.count - s.count,
            })
            .collect();
        let (left_hist, right_hist) = if left_smaller { (small, large) } else { (large, small) };

        let (l_node, r_node) = (nodes.len(), nodes.len() + 1);
        nodes[leaf.node] = TreeNode::Split {
            feature: split.feature as u32,
            threshold: edges[split.feature][split.bin],
            left: l_node as u32,
            right: r_node as u32,
        };
        nodes.push(TreeNode::Leaf { value: 0.0 });
        nodes.push(TreeNode::Leaf { value: 0.0 });

        let right = Leaf {
            start: mid,
            end: leaf.end,
            node: r_node,
            best: binned.best_split(&right_hist, g.min_leaf, g.min_gain),
            hist: right_hist,
        };
        leaf.end = mid;
        leaf.node = l_node;
        leaf.best = binned.best_split(&left_hist, g.min_leaf, g.min_gain);
        leaf.hist = left_hist;
        leaves.push(right);
    }
    let mut out = Vec::with_capacity(leaves.len());
    for leaf in &leaves {
        let r = &rows[leaf.start..leaf.end];
        let sum: f64 = r.iter().map(|&i| grad[i as usize]).sum();
        let value = sum / r.len() as f64;
        nodes[leaf.node] = TreeNode::Leaf { value };
        out.push((leaf.start, leaf.end, value));
    }
    (Tree { nodes }, out)
}

pub fn train_gbdt(x: &Matrix, y: &[f64], feature_names: &[String], config: &TrainConfig) -> Result<ForestModel> {
    config.validate()?;
    check_training_data(x, y, feature_names)?;
    let order = canonical_order(x, y);
    let x = x.select_rows(&order);
    let y: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let n = y.len();
    let lr = config.gbdt.learning_rate;

    let edges: Vec<Vec<f64>> = (0..x.n_cols)
        .map(|j| compute_bin_edges(&x.column(j), config.gbdt.max_bins))
        .collect();
    let binned = Binned::new(&x, &edges);
    let base_score = stable_mean(y.iter().copied());
    let mut pred = vec![base_score; n];
    let mut grad = vec![0.0; n];
    let mut rows: Vec<u32> = Vec::with_capacity(n);
    let mut split_gain = vec![0.0; x.n_cols];
    let mut trees = Vec::with_capacity(config.n_trees);
    for _ in 0..config.n_trees {
        for i in 0..n {
            grad[i] = y[i] - pred[i];
        }
        rows.clear();
        rows.extend(0..n as u32);
        let (tree, leaves) = grow_tree(&binned, &edges, &mut rows, &grad, config, &mut split_gain);
        for (start, end, value) in leaves {
            for &i in &rows[start..end] {
                pred[i as usize] += lr * value;
            }
        }
        trees.push(tree);
    }
    Ok(ForestModel {
        format_version: MODEL_FORMAT_VERSION,
        kind: LearnerKind::Gbdt,
        trees,
        base_score,
        learning_rate: lr,
        feature_names: feature_names.to_vec(),
        bin_edges: edges,
        split_gain,
        config: config.clone(),
        seed: config.seed,
        n_train: n,
    })
}
