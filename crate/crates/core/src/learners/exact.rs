//! Exhaustive-threshold leaf-wise tree used to check the histogram learner.

use super::binning::midpoint;
use super::tree::{Tree, TreeNode};
use super::Matrix;
use crate::error::{Error, Result};

const REL_GAIN_FLOOR: f64 = 1e-12;

struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

fn best_exact_split(x: &Matrix, y: &[f64], rows: &[usize], min_leaf: usize) -> Option<Candidate> {
    let mut best: Option<Candidate> = None;
    for f in 0..x.n_cols {
        let mut vals: Vec<(f64, f64)> = rows.iter().map(|&i| (x.get(i, f), y[i])).collect();
        vals.sort_by(|a, b| a.0.total_cmp(&b.0));
        // collapse equal values into (value, sum, count)
        let mut groups: Vec<(f64, f64, usize)> = Vec::new();
        for (v, t) in vals {
            match groups.last_mut() {
                Some(g) if g.0 == v => {
                    g.1 += t;
                    g.2 += 1;
                }
                _ => groups.push((v, t, 1)),
            }
        }
        let total: f64 = groups.iter().map(|g| g.1).sum();
        let n = rows.len();
        let parent = total * total / n as f64;
        let (mut gl, mut nl) = (0.0, 0);
        for k in 0..groups.len().saturating_sub(1) {
            gl += groups[k].1;
            nl += groups[k].2;
            let nr = n - nl;
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let gr = total - gl;
            let children = gl * gl / nl as f64 + gr * gr / nr as f64;
            let gain = children - parent;
            if gain > 0.0 && gain > REL_GAIN_FLOOR * (children + parent) && best.as_ref().is_none_or(|b| gain > b.gain) {
                best = Some(Candidate {
                    feature: f,
                    threshold: midpoint(groups[k].0, groups[k + 1].0),
                    gain,
                });
            }
        }
    }
    best
}

/// Greedy leaf-wise regression tree on `y` scanning every midpoint between
/// sorted distinct feature values. Growth always splits the open leaf with
/// the largest gain (earliest-created leaf on ties) until `max_leaves`.
pub fn exact_tree_reference(x: &Matrix, y: &[f64], max_leaves: usize, min_leaf: usize) -> Result<Tree> {
    if x.n_rows != y.len() || x.n_rows == 0 || x.n_cols == 0 {
        return Err(Error::invalid("exact reference needs matching, non-empty X and y"));
    }
    if min_leaf == 0 || max_leaves == 0 {
        return Err(Error::invalid("min_leaf and max_leaves must be positive"));
    }
    let mut nodes = vec![TreeNode::Leaf { value: 0.0 }];
    // (node, rows, best split)
    let all: Vec<usize> = (0..x.n_rows).collect();
    let first = best_exact_split(x, y, &all, min_leaf);
    let mut leaves: Vec<(usize, Vec<usize>, Option<Candidate>)> = vec![(0, all, first)];
    while leaves.len() < max_leaves {
        let mut pick: Option<(usize, f64)> = None;
        for (li, leaf) in leaves.iter().enumerate() {
            if let Some(c) = &leaf.2 {
                if pick.is_none_or(|p| c.gain > p.1) {
                    pick = Some((li, c.gain));
                }
            }
        }
        let Some((li, _)) = pick else { break };
        let (node, rows, cand) = std::mem::replace(&mut leaves[li], (0, Vec::new(), None));
        let c = cand.expect("picked leaf has a split");
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x.get(i, c.feature) <= c.threshold);
        let (ln, rn) = (nodes.len(), nodes.len() + 1);
        nodes[node] = TreeNode::Split {
            feature: c.feature as u32,
            threshold: c.threshold,
            left: ln as u32,
            right: rn as u32,
        };
        nodes.push(TreeNode::Leaf { value: 0.0 });
        nodes.push(TreeNode::Leaf { value: 0.0 });
        let lb = best_exact_split(x, y, &l, min_leaf);
        let rb = best_exact_split(x, y, &r, min_leaf);
        leaves[li] = (ln, l, lb);
        leaves.push((rn, r, rb));
    }
    for (node, rows, _) in leaves {
        let value = rows.iter().map(|&i| y[i]).sum::<f64>() / rows.len() as f64;
        nodes[node] = TreeNode::Leaf { value };
    }
    Ok(Tree { nodes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_target_single_leaf() {
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let t = exact_tree_reference(&x, &[4.0, 4.0, 4.0], 10, 1).unwrap();
        assert_eq!(t.nodes.len(), 1);
    }

    #[test]
    fn two_points_split_once() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let t = exact_tree_reference(&x, &[-2.0, 5.0], 10, 1).unwrap();
        assert_eq!(t.n_leaves(), 2);
        assert_eq!(t.predict(&[0.0]), -2.0);
        assert_eq!(t.predict(&[1.0]), 5.0);
    }
}
