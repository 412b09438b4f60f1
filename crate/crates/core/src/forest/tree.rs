//! CART classification tree with Gini splits.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        counts: Vec<u32>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

pub(crate) struct TreeConfig {
    pub class_count: usize,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub features_per_split: usize,
}

fn gini(counts: &[u32], n: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

impl Tree {
    /// Grows a tree on `sample` (row indices, repeats allowed).
    pub(crate) fn grow<R: Rng>(
        rows: &[Vec<f64>],
        labels: &[usize],
        sample: Vec<usize>,
        config: &TreeConfig,
        rng: &mut R,
    ) -> Tree {
        let dim = rows.first().map_or(0, Vec::len);
        let mut nodes: Vec<Node> = Vec::new();
        // (node slot, indices, depth)
        let mut stack = vec![(0usize, sample, 0usize)];
        nodes.push(Node::Leaf { counts: Vec::new() });
        let mut features: Vec<usize> = (0..dim).collect();
        let mut column: Vec<(f64, usize)> = Vec::new();

        while let Some((slot, idx, depth)) = stack.pop() {
            let mut counts = vec![0u32; config.class_count];
            for &i in &idx {
                counts[labels[i]] += 1;
            }
            let n = idx.len() as u32;
            let parent = gini(&counts, n);
            let stop = parent == 0.0
                || idx.len() < config.min_samples_split
                || config.max_depth.is_some_and(|d| depth >= d);
            let best = if stop {
                None
            } else {
                features.shuffle(rng);
                Self::best_split(rows, labels, &idx, &features, config, &mut column)
            };
            match best {
                Some(b) if parent - b.impurity > 1e-12 => {
                    let (left, right): (Vec<usize>, Vec<usize>) =
                        idx.iter().partition(|&&i| rows[i][b.feature] <= b.threshold);
                    let l = nodes.len();
                    nodes.push(Node::Leaf { counts: Vec::new() });
                    nodes.push(Node::Leaf { counts: Vec::new() });
                    nodes[slot] = Node::Split {
                        feature: b.feature as u32,
                        threshold: b.threshold,
                        left: l as u32,
                        right: l as u32 + 1,
                    };
                    // right first so the left subtree is built first
                    stack.push((l + 1, right, depth + 1));
                    stack.push((l, left, depth + 1));
                }
                _ => nodes[slot] = Node::Leaf { counts },
            }
        }
        Tree { nodes }
    }

    /// Visits features in the given order, scoring at least
    /// `features_per_split` non-constant ones and continuing past that until
    /// one yields a valid partition.
    fn best_split(
        rows: &[Vec<f64>],
        labels: &[usize],
        idx: &[usize],
        features: &[usize],
        config: &TreeConfig,
        column: &mut Vec<(f64, usize)>,
    ) -> Option<BestSplit> {
        let n = idx.len() as u32;
        let mut best: Option<BestSplit> = None;
        let mut scored = 0;
        let mut left = vec![0u32; config.class_count];
        let mut right = vec![0u32; config.class_count];
        for &f in features {
            if scored >= config.features_per_split && best.is_some() {
                break;
            }
            let first = rows[idx[0]][f];
            if idx.iter().all(|&i| rows[i][f] == first) {
                continue;
            }
            scored += 1;
            column.clear();
            column.extend(idx.iter().map(|&i| (rows[i][f], labels[i])));
            column.sort_by(|a, b| a.0.total_cmp(&b.0));
            left.iter_mut().for_each(|c| *c = 0);
            right.iter_mut().for_each(|c| *c = 0);
            for &(_, y) in column.iter() {
                right[y] += 1;
            }
            for k in 0..column.len() - 1 {
                let (v, y) = column[k];
                left[y] += 1;
                right[y] -= 1;
                let next = column[k + 1].0;
                if v == next {
                    continue;
                }
                let nl = k as u32 + 1;
                let nr = n - nl;
                let impurity = (nl as f64 * gini(&left, nl) + nr as f64 * gini(&right, nr)) / n as f64;
                if best.as_ref().is_none_or(|b| impurity < b.impurity) {
                    let mut threshold = v + (next - v) / 2.0;
                    if threshold >= next {
                        threshold = v;
                    }
                    best = Some(BestSplit {
                        feature: f,
                        threshold,
                        impurity,
                    });
                }
            }
        }
        best
    }

    pub fn leaf_counts(&self, row: &[f64]) -> &[u32] {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { counts } => return counts,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => {
                    1 + go(nodes, *left as usize).max(go(nodes, *right as usize))
                }
            }
        }
        go(&self.nodes, 0)
    }
}
