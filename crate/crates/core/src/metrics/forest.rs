//! Regression forest with variance-reduction splits and impurity
//! importances.
//!
//! Each node draws its feature subset from a generator keyed by its position
//! in the tree, so a tree grown once to the deepest candidate depth and then
//! read at a shallower depth is exactly the tree that would have been grown
//! with that depth limit.

use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ForestParams {
    pub trees: usize,
    /// Features considered per split.
    pub max_features: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
struct Node {
    depth: usize,
    value: f64,
    split: Option<Split>,
}

#[derive(Clone, Debug)]
struct Split {
    feature: usize,
    threshold: f64,
    /// Weighted decrease in squared error.
    gain: f64,
    left: usize,
    right: usize,
}

#[derive(Clone, Debug)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

/// Row-major feature matrix view.
#[derive(Clone, Copy, Debug)]
pub struct Features<'a> {
    pub data: &'a [f64],
    pub cols: usize,
}

impl<'a> Features<'a> {
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols
    }

    fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

impl RegressionTree {
    pub fn fit(x: Features<'_>, y: &[f64], rows: &[usize], params: &ForestParams, tree_seed: u64) -> Self {
        let mut tree = RegressionTree { nodes: Vec::new() };
        let mut idx = rows.to_vec();
        tree.grow(x, y, &mut idx, 0, 1, params, tree_seed);
        tree
    }

    #[allow(clippy::too_many_arguments)]
    fn grow(
        &mut self,
        x: Features<'_>,
        y: &[f64],
        idx: &mut [usize],
        depth: usize,
        path: u64,
        params: &ForestParams,
        seed: u64,
    ) -> usize {
        let n = idx.len() as f64;
        let sum: f64 = idx.iter().map(|&i| y[i]).sum();
        let mean = sum / n;
        let sse: f64 = idx.iter().map(|&i| (y[i] - mean).powi(2)).sum();
        let id = self.nodes.len();
        self.nodes.push(Node {
            depth,
            value: mean,
            split: None,
        });
        if depth >= params.max_depth || idx.len() < params.min_samples_split || sse <= 1e-12 * n {
            return id;
        }

        let mut rng = Rng::stream(seed, path);
        let mut feats: Vec<usize> = (0..x.cols).collect();
        rng.shuffle(&mut feats);
        feats.truncate(params.max_features.clamp(1, x.cols));

        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = idx.to_vec();
        for &f in &feats {
            order.sort_by(|&a, &b| x.get(a, f).total_cmp(&x.get(b, f)).then(a.cmp(&b)));
            let (mut ls, mut lss) = (0.0, 0.0);
            let total_ss: f64 = order.iter().map(|&i| y[i] * y[i]).sum();
            for k in 0..order.len() - 1 {
                let v = y[order[k]];
                ls += v;
                lss += v * v;
                let (a, b) = (x.get(order[k], f), x.get(order[k + 1], f));
                if a == b {
                    continue;
                }
                let nl = (k + 1) as f64;
                let nr = n - nl;
                let rs = sum - ls;
                let rss = total_ss - lss;
                let child_sse = (lss - ls * ls / nl) + (rss - rs * rs / nr);
                let gain = sse - child_sse;
                if best.map_or(true, |(g, _, _)| gain > g) {
                    best = Some((gain, f, 0.5 * (a + b)));
                }
            }
        }
        let Some((gain, feature, threshold)) = best else {
            return id;
        };
        if gain <= 0.0 {
            return id;
        }
        let mut split_at = 0;
        for k in 0..idx.len() {
            if x.get(idx[k], feature) <= threshold {
                idx.swap(k, split_at);
                split_at += 1;
            }
        }
        let (l, r) = idx.split_at_mut(split_at);
        let left = self.grow(x, y, l, depth + 1, 2 * path, params, seed);
        let right = self.grow(x, y, r, depth + 1, 2 * path + 1, params, seed);
        self.nodes[id].split = Some(Split {
            feature,
            threshold,
            gain: gain.max(0.0),
            left,
            right,
        });
        id
    }

    /// Prediction of the tree truncated at `depth`.
    pub fn predict(&self, row: &[f64], depth: usize) -> f64 {
        let mut node = &self.nodes[0];
        while let Some(s) = &node.split {
            if node.depth >= depth {
                break;
            }
            node = &self.nodes[if row[s.feature] <= s.threshold { s.left } else { s.right }];
        }
        node.value
    }

    /// Impurity decrease per feature over splits shallower than `depth`.
    pub fn importances(&self, features: usize, depth: usize) -> Vec<f64> {
        let mut out = vec![0.0; features];
        for node in &self.nodes {
            if let Some(s) = &node.split {
                if node.depth < depth {
                    out[s.feature] += s.gain;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct RegressionForest {
    trees: Vec<RegressionTree>,
    features: usize,
}

impl RegressionForest {
    /// Bootstrap-aggregated trees fit on `rows` of `x`.
    pub fn fit(x: Features<'_>, y: &[f64], rows: &[usize], params: &ForestParams) -> Self {
        let mut rng = Rng::stream(params.seed, 40);
        let trees = (0..params.trees)
            .map(|_| {
                let tree_seed = rng.next_u64();
                let sample: Vec<usize> = (0..rows.len()).map(|_| rows[rng.below(rows.len())]).collect();
                RegressionTree::fit(x, y, &sample, params, tree_seed)
            })
            .collect();
        RegressionForest {
            trees,
            features: x.cols,
        }
    }

    pub fn predict(&self, row: &[f64], depth: usize) -> f64 {
        self.trees.iter().map(|t| t.predict(row, depth)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn mse(&self, x: Features<'_>, y: &[f64], rows: &[usize], depth: usize) -> f64 {
        rows.iter()
            .map(|&r| (self.predict(&x.data[r * x.cols..(r + 1) * x.cols], depth) - y[r]).powi(2))
            .sum::<f64>()
            / rows.len() as f64
    }

    /// Per-tree importances normalized to sum one, averaged over trees.
    pub fn importances(&self, depth: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.features];
        for t in &self.trees {
            let imp = t.importances(self.features, depth);
            let s: f64 = imp.iter().sum();
            if s > 0.0 {
                for (o, v) in out.iter_mut().zip(imp) {
                    *o += v / s;
                }
            }
        }
        let k = self.trees.len() as f64;
        out.iter_mut().for_each(|v| *v /= k);
        out
    }
}
