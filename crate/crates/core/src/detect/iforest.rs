//! Isolation Forest.
//!
//! Each tree is grown on `b` rows drawn without replacement. A node picks a
//! feature uniformly among those not constant on its rows and a split value
//! uniformly in `[min, max)` of that feature; rows with `x <= value` go
//! left. Growth stops at a single row, at a node of identical rows, or at
//! height `ceil(log2(b))`. A leaf holding `m > 1` rows adds `c(m)` to the
//! path length.

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const EULER_GAMMA: f64 = 0.5772156649;

/// Current on-disk format of a serialized forest.
pub const FOREST_FORMAT_VERSION: u32 = 1;

/// Harmonic number estimate `ln(i) + 0.5772156649`.
fn harmonic(i: f64) -> f64 {
    i.ln() + EULER_GAMMA
}

/// Expected path length of an unsuccessful search in a binary search tree
/// of `n` nodes, `2 H(n - 1) - 2 (n - 1) / n`.
pub fn c_factor(n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::arg(format!("c(n) needs n >= 2, got {n}")));
    }
    let n = n as f64;
    Ok(2.0 * harmonic(n - 1.0) - 2.0 * (n - 1.0) / n)
}

fn leaf_adjustment(size: usize) -> f64 {
    if size < 2 {
        0.0
    } else {
        c_factor(size).expect("size >= 2")
    }
}

/// `2^(-mean_path / c(sample_size))`.
pub fn score_from_mean_path(mean_path: f64, sample_size: usize) -> Result<f64> {
    Ok((-mean_path / c_factor(sample_size)?).exp2())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        value: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        size: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationTree {
    /// Root at index 0.
    pub nodes: Vec<Node>,
}

impl IsolationTree {
    fn grow(
        data: ArrayView2<f64>,
        rows: &mut [usize],
        height_limit: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut tree = IsolationTree { nodes: Vec::new() };
        tree.grow_node(data, rows, 0, height_limit, rng);
        tree
    }

    fn grow_node(
        &mut self,
        data: ArrayView2<f64>,
        rows: &mut [usize],
        depth: usize,
        height_limit: usize,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { size: rows.len() });
        if rows.len() <= 1 || depth >= height_limit {
            return id;
        }
        let ranges: Vec<(usize, f64, f64)> = (0..data.ncols())
            .filter_map(|f| {
                let (lo, hi) =
                    rows.iter()
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                            let v = data[[r, f]];
                            (lo.min(v), hi.max(v))
                        });
                (hi > lo).then_some((f, lo, hi))
            })
            .collect();
        if ranges.is_empty() {
            return id;
        }
        let (feature, lo, hi) = ranges[rng.random_range(0..ranges.len())];
        let mut value = rng.random_range(lo..hi);
        if value >= hi {
            value = lo;
        }

        // partition in place: x <= value first
        let mut split = 0;
        for i in 0..rows.len() {
            if data[[rows[i], feature]] <= value {
                rows.swap(i, split);
                split += 1;
            }
        }
        let (left_rows, right_rows) = rows.split_at_mut(split);
        let left = self.grow_node(data, left_rows, depth + 1, height_limit, rng);
        let right = self.grow_node(data, right_rows, depth + 1, height_limit, rng);
        self.nodes[id] = Node::Split {
            feature,
            value,
            left,
            right,
        };
        id
    }

    /// Edges from the root to the leaf reached by `x`, plus `c(m)` for a
    /// leaf holding `m > 1` rows.
    pub fn path_length(&self, x: ArrayView1<f64>) -> f64 {
        let mut node = 0;
        let mut depth = 0.0;
        loop {
            match self.nodes[node] {
                Node::Split {
                    feature,
                    value,
                    left,
                    right,
                } => {
                    node = if x[feature] <= value { left } else { right };
                    depth += 1.0;
                }
                Node::Leaf { size } => return depth + leaf_adjustment(size),
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationForest {
    pub version: u32,
    pub trees: Vec<IsolationTree>,
    pub sample_size: usize,
    pub num_trees: usize,
    pub seed: u64,
    pub dim: usize,
}

impl IsolationForest {
    pub fn fit(
        data: ArrayView2<f64>,
        num_trees: usize,
        sample_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let n = data.nrows();
        if sample_size < 2 {
            return Err(Error::arg(format!(
                "isolation forest sample size must be >= 2, got {sample_size}"
            )));
        }
        if sample_size > n {
            return Err(Error::arg(format!(
                "isolation forest sample size {sample_size} exceeds the {n} available rows"
            )));
        }
        if num_trees < 1 {
            return Err(Error::arg("isolation forest needs at least one tree"));
        }
        let height_limit = (sample_size as f64).log2().ceil() as usize;
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let tree_seeds: Vec<u64> = (0..num_trees).map(|_| master.next_u64()).collect();
        let trees = tree_seeds
            .into_par_iter()
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut rows = index::sample(&mut rng, n, sample_size).into_vec();
                IsolationTree::grow(data, &mut rows, height_limit, &mut rng)
            })
            .collect();
        Ok(IsolationForest {
            version: FOREST_FORMAT_VERSION,
            trees,
            sample_size,
            num_trees,
            seed,
            dim: data.ncols(),
        })
    }

    pub fn mean_path_length(&self, x: ArrayView1<f64>) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64)
    }

    pub fn score(&self, x: ArrayView1<f64>) -> Result<f64> {
        score_from_mean_path(self.mean_path_length(x)?, self.sample_size)
    }

    pub fn score_rows(&self, matrix: ArrayView2<f64>) -> Result<Vec<f64>> {
        (0..matrix.nrows())
            .into_par_iter()
            .map(|i| self.score(matrix.row(i)))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let forest: IsolationForest = serde_json::from_str(s)?;
        if forest.version != FOREST_FORMAT_VERSION {
            return Err(Error::Version {
                expected: FOREST_FORMAT_VERSION,
                found: forest.version,
            });
        }
        Ok(forest)
    }
}

pub fn iforest_fit(
    data: ArrayView2<f64>,
    num_trees: usize,
    sample_size: usize,
    seed: u64,
) -> Result<IsolationForest> {
    IsolationForest::fit(data, num_trees, sample_size, seed)
}

pub fn iforest_score(forest: &IsolationForest, x: ArrayView1<f64>) -> Result<f64> {
    forest.score(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    #[test]
    fn c_factor_values() {
        assert_abs_diff_eq!(c_factor(2).unwrap(), 0.1544313298, epsilon = 1e-10);
        let direct = 2.0 * (255f64.ln() + 0.5772156649) - 2.0 * 255.0 / 256.0;
        assert_abs_diff_eq!(c_factor(256).unwrap(), direct, epsilon = 1e-12);
        assert_abs_diff_eq!(c_factor(256).unwrap(), 10.2445, epsilon = 5e-4);
        assert!(c_factor(1).is_err());
        assert!(c_factor(0).is_err());
    }

    #[test]
    fn c_factor_is_increasing() {
        let mut prev = c_factor(2).unwrap();
        for n in 3..=1_000_000 {
            let c = c_factor(n).unwrap();
            assert!(c > prev, "c({n}) = {c} <= {prev}");
            prev = c;
        }
    }

    #[test]
    fn c_factor_tracks_exact_harmonic_sum() {
        let exact_h: f64 = (1..=255).map(|i| 1.0 / i as f64).sum();
        let exact = 2.0 * exact_h - 2.0 * 255.0 / 256.0;
        assert!((c_factor(256).unwrap() - exact).abs() < 0.01);
    }

    #[test]
    fn score_limits() {
        let c = c_factor(64).unwrap();
        assert_eq!(score_from_mean_path(c, 64).unwrap(), 0.5);
        assert!(score_from_mean_path(1e-9, 64).unwrap() > 0.999_999);
    }

    #[test]
    fn two_points_one_split() {
        let data = array![[0.0, 1.0], [5.0, 3.0]];
        let f = IsolationForest::fit(data.view(), 1, 2, 7).unwrap();
        let tree = &f.trees[0];
        assert_eq!(tree.nodes.len(), 3);
        assert_eq!(tree.depth(), 1);
        assert_eq!(tree.path_length(data.row(0)), 1.0);
        assert_eq!(tree.path_length(data.row(1)), 1.0);
    }

    #[test]
    fn splits_stay_inside_node_range() {
        let data = Array2::from_shape_fn((200, 3), |(i, j)| ((i * 31 + j * 17) % 23) as f64);
        let f = IsolationForest::fit(data.view(), 10, 64, 11).unwrap();
        for t in &f.trees {
            let max_depth = t.depth();
            assert!(max_depth <= 6);
            for node in &t.nodes {
                if let Node::Split { feature, value, .. } = node {
                    let col = data.column(*feature);
                    let (lo, hi) = col
                        .iter()
                        .fold((f64::MAX, f64::MIN), |a, &v| (a.0.min(v), a.1.max(v)));
                    assert!(*value >= lo && *value < hi);
                }
            }
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let data = Array2::from_shape_fn((100, 2), |(i, j)| ((i * 13 + j * 7) % 19) as f64 * 0.3);
        let a = IsolationForest::fit(data.view(), 20, 32, 42).unwrap();
        let b = IsolationForest::fit(data.view(), 20, 32, 42).unwrap();
        assert_eq!(a, b);
        let back = IsolationForest::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn isolated_value_has_shortest_path() {
        let data = array![[0.0], [1.0], [2.0], [100.0]];
        let mut wins = 0;
        for seed in 0..100 {
            let f = IsolationForest::fit(data.view(), 100, 4, seed).unwrap();
            let paths: Vec<f64> = data
                .outer_iter()
                .map(|r| f.mean_path_length(r).unwrap())
                .collect();
            if paths[3] < paths[..3].iter().cloned().fold(f64::INFINITY, f64::min) {
                wins += 1;
            }
        }
        assert!(wins >= 95, "{wins}");
    }

    #[test]
    fn argument_errors() {
        let data = array![[0.0], [1.0], [2.0]];
        assert!(IsolationForest::fit(data.view(), 10, 1, 0).is_err());
        assert!(IsolationForest::fit(data.view(), 10, 4, 0).is_err());
        assert!(IsolationForest::fit(data.view(), 0, 2, 0).is_err());
        let f = IsolationForest::fit(data.view(), 3, 3, 0).unwrap();
        assert!(f.score(array![1.0, 2.0].view()).is_err());
    }
}
