use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TreeNode {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        value: f64,
    },
}

/// Flat node array; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TreeRepr", try_from = "TreeRepr")]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf(value: f64) -> Tree {
        Tree {
            nodes: vec![TreeNode::Leaf { value }],
        }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if row[feature as usize] <= threshold { left } else { right } as usize;
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }

    /// Every child index in range and pointing forward, features in range,
    /// thresholds finite.
    pub fn is_well_formed(&self, n_features: usize) -> bool {
        let n = self.nodes.len();
        n > 0
            && self.nodes.iter().enumerate().all(|(i, node)| match *node {
                TreeNode::Leaf { value } => value.is_finite(),
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    (feature as usize) < n_features
                        && threshold.is_finite()
                        && (left as usize) > i
                        && (right as usize) > i
                        && (left as usize) < n
                        && (right as usize) < n
                }
            })
    }
}

/// Column layout used on disk: `feature` is −1 for leaves, whose value is
/// stored in `value`; splits store their threshold there.
#[derive(Serialize, Deserialize)]
struct TreeRepr {
    feature: Vec<i32>,
    value: Vec<f64>,
    left: Vec<u32>,
    right: Vec<u32>,
}

impl From<Tree> for TreeRepr {
    fn from(t: Tree) -> TreeRepr {
        let n = t.nodes.len();
        let mut r = TreeRepr {
            feature: Vec::with_capacity(n),
            value: Vec::with_capacity(n),
            left: Vec::with_capacity(n),
            right: Vec::with_capacity(n),
        };
        for node in t.nodes {
            match node {
                TreeNode::Leaf { value } => {
                    r.feature.push(-1);
                    r.value.push(value);
                    r.left.push(0);
                    r.right.push(0);
                }
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    r.feature.push(feature as i32);
                    r.value.push(threshold);
                    r.left.push(left);
                    r.right.push(right);
                }
            }
        }
        r
    }
}

impl TryFrom<TreeRepr> for Tree {
    type Error = String;
    fn try_from(r: TreeRepr) -> Result<Tree, String> {
        let n = r.feature.len();
        if r.value.len() != n || r.left.len() != n || r.right.len() != n {
            return Err("tree columns differ in length".into());
        }
        let nodes = (0..n)
            .map(|i| {
                if r.feature[i] < 0 {
                    TreeNode::Leaf { value: r.value[i] }
                } else {
                    TreeNode::Split {
                        feature: r.feature[i] as u32,
                        threshold: r.value[i],
                        left: r.left[i],
                        right: r.right[i],
                    }
                }
            })
            .collect();
        Ok(Tree { nodes })
    }
}
