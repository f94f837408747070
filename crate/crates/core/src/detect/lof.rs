//! Local Outlier Factor with exact neighborhoods.
//!
//! The neighborhood of a point holds every other point at or within its
//! k-distance, so ties can make it larger than `k`. Runs of identical
//! points drive the mean reachability distance to zero; the local
//! reachability density is capped at `1 / MIN_MEAN_REACH` instead.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use super::neighbors::KdTree;
use crate::error::{Error, Result};

pub const MIN_MEAN_REACH: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LofParams {
    pub k: usize,
}

impl LofParams {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k < 1 || self.k + 1 > n {
            return Err(Error::arg(format!(
                "LOF needs 1 <= k <= n - 1 (k = {}, n = {n})",
                self.k
            )));
        }
        Ok(())
    }
}

/// LOF fitted on a reference set; scores reference points (excluding
/// themselves) and new points against it.
#[derive(Debug, Clone)]
pub struct LofModel {
    data: Array2<f64>,
    tree: KdTree,
    k: usize,
    k_distance: Vec<f64>,
    lrd: Vec<f64>,
    scores: Vec<f64>,
}

impl LofModel {
    pub fn fit(data: ArrayView2<f64>, params: LofParams) -> Result<Self> {
        params.validate(data.nrows())?;
        let k = params.k;
        let data = data.to_owned();
        let tree = KdTree::build(data.view());
        let n = data.nrows();

        let kth_sq: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| tree.kth_sq_distance(data.view(), data.row(i), k, Some(i)))
            .collect();
        let k_distance: Vec<f64> = kth_sq.iter().map(|s| s.sqrt()).collect();

        let lrd: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let hood = tree.within(data.view(), data.row(i), kth_sq[i], Some(i));
                density(&hood, &k_distance)
            })
            .collect();

        let scores: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let hood = tree.within(data.view(), data.row(i), kth_sq[i], Some(i));
                let mean_lrd = hood.iter().map(|&(o, _)| lrd[o]).sum::<f64>() / hood.len() as f64;
                mean_lrd / lrd[i]
            })
            .collect();

        Ok(LofModel {
            data,
            tree,
            k,
            k_distance,
            lrd,
            scores,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Scores of the reference points, each computed without itself.
    pub fn training_scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn local_reachability_density(&self) -> &[f64] {
        &self.lrd
    }

    /// Scores a point that is not part of the reference set.
    pub fn score(&self, x: ArrayView1<f64>) -> Result<f64> {
        if x.len() != self.data.ncols() {
            return Err(Error::Dimension {
                expected: self.data.ncols(),
                got: x.len(),
            });
        }
        let kth = self.tree.kth_sq_distance(self.data.view(), x, self.k, None);
        let hood = self.tree.within(self.data.view(), x, kth, None);
        let own = density(&hood, &self.k_distance);
        let mean_lrd = hood.iter().map(|&(o, _)| self.lrd[o]).sum::<f64>() / hood.len() as f64;
        Ok(mean_lrd / own)
    }

    pub fn score_rows(&self, matrix: ArrayView2<f64>) -> Result<Vec<f64>> {
        (0..matrix.nrows())
            .into_par_iter()
            .map(|i| self.score(matrix.row(i)))
            .collect()
    }
}

/// Inverse mean reachability distance over a neighborhood given as
/// `(index, squared distance)` pairs.
fn density(hood: &[(usize, f64)], k_distance: &[f64]) -> f64 {
    let mean_reach = hood
        .iter()
        .map(|&(o, sq)| k_distance[o].max(sq.sqrt()))
        .sum::<f64>()
        / hood.len() as f64;
    1.0 / mean_reach.max(MIN_MEAN_REACH)
}

/// LOF of every row of `matrix` with respect to the others.
pub fn lof_scores(matrix: ArrayView2<f64>, params: LofParams) -> Result<Vec<f64>> {
    Ok(LofModel::fit(matrix, params)?.scores)
}
