//! Bootstrap-aggregated CART regression trees.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Target;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Candidate features per split; `None` means `⌈√p⌉`.
    pub mtry: Option<usize>,
    /// Minimum rows per leaf; `None` means 5 for regression, 1 for probabilities.
    pub min_leaf: Option<usize>,
    pub max_depth: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 500,
            mtry: None,
            min_leaf: None,
            max_depth: None,
            bootstrap: true,
        }
    }
}

impl ForestParams {
    pub fn resolved_mtry(&self, p: usize) -> usize {
        self.mtry
            .unwrap_or_else(|| (p as f64).sqrt().ceil() as usize)
            .clamp(1, p.max(1))
    }

    pub fn resolved_min_leaf(&self, target: Target) -> usize {
        self.min_leaf
            .unwrap_or(match target {
                Target::Regression => 5,
                Target::Probability => 1,
            })
            .max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf { value: f64, rows: usize },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, x: &DMatrix<f64>, row: usize) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value, .. } => return value,
                Node::Split { feature, threshold, left, right } => {
                    at = if x[(row, feature)] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn leaves(&self) -> impl Iterator<Item = (f64, usize)> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf { value, rows } => Some((*value, *rows)),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub n_trees: usize,
    pub mtry: usize,
    pub min_leaf: usize,
    pub seed: u64,
    /// Out-of-bag prediction per training row (full-forest prediction for
    /// rows that were in every bootstrap sample).
    pub oob: Vec<f64>,
}

impl ForestModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let k = self.trees.len() as f64;
        (0..x.nrows())
            .map(|i| self.trees.iter().map(|t| t.predict_row(x, i)).sum::<f64>() / k)
            .collect()
    }
}

struct Builder<'a> {
    x: &'a DMatrix<f64>,
    t: &'a [f64],
    mtry: usize,
    min_leaf: usize,
    max_depth: usize,
}

struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
    split_at: usize,
}

impl Builder<'_> {
    fn grow<R: Rng>(&self, rows: Vec<usize>, rng: &mut R) -> Tree {
        let mut nodes = Vec::new();
        // (node slot, rows, depth)
        let mut stack = vec![(0usize, rows, 0usize)];
        nodes.push(Node::Leaf { value: 0.0, rows: 0 });
        let mut scratch: Vec<(f64, f64)> = Vec::new();
        while let Some((slot, rows, depth)) = stack.pop() {
            let n = rows.len();
            let sum: f64 = rows.iter().map(|&i| self.t[i]).sum();
            let mean = sum / n as f64;
            let constant = rows.iter().all(|&i| self.t[i] == self.t[rows[0]]);
            let split = if constant || n < 2 * self.min_leaf || depth >= self.max_depth {
                None
            } else {
                self.best_split(&rows, sum, rng, &mut scratch)
            };
            match split {
                None => nodes[slot] = Node::Leaf { value: mean, rows: n },
                Some(c) => {
                    let (left, right): (Vec<usize>, Vec<usize>) =
                        rows.iter().partition(|&&i| self.x[(i, c.feature)] <= c.threshold);
                    debug_assert_eq!(left.len(), c.split_at);
                    let l = nodes.len();
                    nodes.push(Node::Leaf { value: 0.0, rows: 0 });
                    nodes.push(Node::Leaf { value: 0.0, rows: 0 });
                    nodes[slot] = Node::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        left: l,
                        right: l + 1,
                    };
                    stack.push((l + 1, right, depth + 1));
                    stack.push((l, left, depth + 1));
                }
            }
        }
        Tree { nodes }
    }

    fn best_split<R: Rng>(&self, rows: &[usize], sum: f64, rng: &mut R, scratch: &mut Vec<(f64, f64)>) -> Option<Candidate> {
        let n = rows.len();
        let p = self.x.ncols();
        let parent = sum * sum / n as f64;
        let mut best: Option<Candidate> = None;
        for feature in sample(rng, p, self.mtry).into_iter() {
            scratch.clear();
            scratch.extend(rows.iter().map(|&i| (self.x[(i, feature)], self.t[i])));
            scratch.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            if scratch[0].0 == scratch[n - 1].0 {
                continue;
            }
            let mut left_sum = 0.0;
            for k in 0..n - 1 {
                left_sum += scratch[k].1;
                let n_left = k + 1;
                if n_left < self.min_leaf || n - n_left < self.min_leaf {
                    continue;
                }
                if scratch[k].0 == scratch[k + 1].0 {
                    continue;
                }
                let right_sum = sum - left_sum;
                let gain = left_sum * left_sum / n_left as f64 + right_sum * right_sum / (n - n_left) as f64 - parent;
                if gain > 1e-12 * (1.0 + parent.abs()) && best.as_ref().is_none_or(|b| gain > b.gain) {
                    let mut threshold = 0.5 * (scratch[k].0 + scratch[k + 1].0);
                    if threshold >= scratch[k + 1].0 {
                        threshold = scratch[k].0;
                    }
                    best = Some(Candidate { feature, threshold, gain, split_at: n_left });
                }
            }
        }
        best
    }
}

/// Random forest of variance-reduction CART trees on bootstrap samples with
/// `mtry` random candidate features per node. Deterministic given `seed`.
pub fn fit_forest(x: &DMatrix<f64>, t: &[f64], params: &ForestParams, target: Target, seed: u64) -> Result<ForestModel> {
    let n = x.nrows();
    if n != t.len() {
        return Err(Error::Validation(format!("{n} feature rows but {} targets", t.len())));
    }
    let min_leaf = params.resolved_min_leaf(target);
    if n < 2 * min_leaf.max(1) || n < 2 {
        return Err(Error::Validation(format!("forest needs at least {} rows, got {n}", 2 * min_leaf)));
    }
    if params.n_trees == 0 {
        return Err(Error::Validation("forest needs at least one tree".into()));
    }
    let p = x.ncols();
    let mtry = params.resolved_mtry(p);
    let builder = Builder {
        x,
        t,
        mtry,
        min_leaf,
        max_depth: params.max_depth.unwrap_or(usize::MAX),
    };
    let mut trees = Vec::with_capacity(params.n_trees);
    let mut oob_sum = vec![0.0; n];
    let mut oob_count = vec![0usize; n];
    for b in 0..params.n_trees {
        let mut rng = rng::stream(seed, &[rng::tag::TREE, b as u64]);
        let rows: Vec<usize> = if params.bootstrap {
            (0..n).map(|_| rng.random_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        let mut in_bag = vec![false; n];
        for &r in &rows {
            in_bag[r] = true;
        }
        let tree = if p == 0 {
            let mean = rows.iter().map(|&i| t[i]).sum::<f64>() / n as f64;
            Tree { nodes: vec![Node::Leaf { value: mean, rows: n }] }
        } else {
            builder.grow(rows, &mut rng)
        };
        for i in (0..n).filter(|&i| !in_bag[i]) {
            oob_sum[i] += tree.predict_row(x, i);
            oob_count[i] += 1;
        }
        trees.push(tree);
    }
    let mut model = ForestModel {
        trees,
        n_trees: params.n_trees,
        mtry,
        min_leaf,
        seed,
        oob: Vec::new(),
    };
    let full = model.predict(x);
    model.oob = (0..n)
        .map(|i| if oob_count[i] > 0 { oob_sum[i] / oob_count[i] as f64 } else { full[i] })
        .collect();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(n_trees: usize) -> ForestParams {
        ForestParams { n_trees, ..Default::default() }
    }

    #[test]
    fn constant_target_predicts_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(40, 3, |_, _| rng.random::<f64>());
        let f = fit_forest(&x, &[7.0; 40], &params(20), Target::Regression, 3).unwrap();
        assert!(f.predict(&x).iter().all(|&v| v == 7.0));
    }

    #[test]
    fn constant_features_give_single_leaf() {
        let x = DMatrix::from_element(20, 2, 1.5);
        let t: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let f = fit_forest(&x, &t, &params(5), Target::Regression, 3).unwrap();
        assert!(f.trees.iter().all(|tr| tr.nodes.len() == 1));
    }

    #[test]
    fn step_function_is_fitted_exactly() {
        // y = 1{x > 0}, with a gap around zero wider than either half.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<f64> = (0..100)
            .map(|i| {
                let u = 0.5 + 0.5 * rng.random::<f64>();
                if i % 2 == 0 { u } else { -u }
            })
            .collect();
        let t: Vec<f64> = xs.iter().map(|&v| f64::from(u8::from(v > 0.0))).collect();
        let x = DMatrix::from_column_slice(100, 1, &xs);
        let p = ForestParams { n_trees: 50, min_leaf: Some(1), ..Default::default() };
        let f = fit_forest(&x, &t, &p, Target::Regression, 4).unwrap();
        assert_eq!(f.predict(&x), t);
    }

    #[test]
    fn probability_predictions_in_unit_interval_and_leaf_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(200, 4, |_, _| rng.random::<f64>() - 0.5);
        let t: Vec<f64> = (0..200)
            .map(|i| f64::from(u8::from(rng.random::<f64>() < 0.5 + 0.4 * x[(i, 0)])))
            .collect();
        let f = fit_forest(&x, &t, &params(30), Target::Probability, 5).unwrap();
        assert!(f.predict(&x).iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(f.oob.iter().all(|&p| (0.0..=1.0).contains(&p)));

        let g = fit_forest(&x, &t, &params(30), Target::Regression, 5).unwrap();
        for tree in &g.trees {
            assert!(tree.leaves().all(|(_, rows)| rows >= 5));
        }
    }

    #[test]
    fn reruns_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(80, 5, |_, _| rng.random::<f64>());
        let t: Vec<f64> = (0..80).map(|i| x[(i, 1)] * 3.0 + rng.random::<f64>()).collect();
        let a = fit_forest(&x, &t, &params(25), Target::Regression, 11).unwrap();
        let b = fit_forest(&x, &t, &params(25), Target::Regression, 11).unwrap();
        assert_eq!(a, b);
        let c = fit_forest(&x, &t, &params(25), Target::Regression, 12).unwrap();
        assert_ne!(a.predict(&x), c.predict(&x));
    }
}
