//! Distance to the centroid under the inverse sample covariance.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues below this fraction of the largest one count as zero.
const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MahalanobisModel {
    pub centroid: Array1<f64>,
    /// Inverse of `covariance + ridge_eps * I`.
    pub precision: Array2<f64>,
    pub ridge_eps: f64,
}

impl MahalanobisModel {
    /// Fits centroid and precision. With `ridge_eps == 0` a rank-deficient
    /// covariance is an error rather than being silently regularized.
    pub fn fit(matrix: ArrayView2<f64>, ridge_eps: f64) -> Result<Self> {
        let (n, p) = matrix.dim();
        if n < 2 {
            return Err(Error::arg("Mahalanobis fit needs at least two rows"));
        }
        if !(ridge_eps >= 0.0) || !ridge_eps.is_finite() {
            return Err(Error::arg(format!(
                "ridge must be finite and >= 0, got {ridge_eps}"
            )));
        }
        let centroid = matrix.mean_axis(Axis(0)).expect("non-empty");
        let centered = &matrix - &centroid;
        let mut cov = centered.t().dot(&centered) / (n as f64 - 1.0);
        for j in 0..p {
            cov[[j, j]] += ridge_eps;
        }

        if p == 0 {
            return Ok(MahalanobisModel {
                centroid,
                precision: Array2::zeros((0, 0)),
                ridge_eps,
            });
        }
        let cov_na = DMatrix::from_fn(p, p, |i, j| 0.5 * (cov[[i, j]] + cov[[j, i]]));
        let eig = SymmetricEigen::new(cov_na);
        let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let min_eig = eig
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if !(min_eig > RANK_TOLERANCE * max_eig) {
            return Err(Error::Singular {
                min_eigenvalue: min_eig,
            });
        }

        let mut precision = Array2::zeros((p, p));
        for i in 0..p {
            for j in 0..=i {
                let v: f64 = (0..p)
                    .map(|k| {
                        eig.eigenvectors[(i, k)] * eig.eigenvectors[(j, k)] / eig.eigenvalues[k]
                    })
                    .sum();
                precision[[i, j]] = v;
                precision[[j, i]] = v;
            }
        }
        Ok(MahalanobisModel {
            centroid,
            precision,
            ridge_eps,
        })
    }

    pub fn dim(&self) -> usize {
        self.centroid.len()
    }

    pub fn score(&self, x: ArrayView1<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let d = &x - &self.centroid;
        let q = d.dot(&self.precision.dot(&d));
        Ok(q.max(0.0).sqrt())
    }

    pub fn score_rows(&self, matrix: ArrayView2<f64>) -> Result<Vec<f64>> {
        matrix.outer_iter().map(|row| self.score(row)).collect()
    }
}

pub fn mahalanobis_fit(matrix: ArrayView2<f64>, ridge_eps: f64) -> Result<MahalanobisModel> {
    MahalanobisModel::fit(matrix, ridge_eps)
}

pub fn mahalanobis_score(model: &MahalanobisModel, x: ArrayView1<f64>) -> Result<f64> {
    model.score(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn identity_covariance_gives_identity_precision() {
        // columns with zero mean, unit sample variance, zero covariance
        let m = array![[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
        let scale = (3.0f64 / 4.0).sqrt();
        let m = m * scale;
        let model = MahalanobisModel::fit(m.view(), 0.0).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(model.precision[[i, j]], e, epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(model.score(array![0.0, 0.0].view()).unwrap(), 0.0);
        assert_abs_diff_eq!(
            model.score(array![3.0, 4.0].view()).unwrap(),
            5.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn diagonal_covariance_by_hand() {
        // variances 4 and 1, centroid (0, 0)
        let a = 2.0 * (3.0f64 / 4.0).sqrt();
        let b = (3.0f64 / 4.0).sqrt();
        let m = array![[a, b], [a, -b], [-a, b], [-a, -b]];
        let model = MahalanobisModel::fit(m.view(), 0.0).unwrap();
        assert_abs_diff_eq!(
            model.score(array![2.0, 0.0].view()).unwrap(),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn collinear_columns_need_a_ridge() {
        let m = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0], [4.0, 8.0]];
        assert!(matches!(
            MahalanobisModel::fit(m.view(), 0.0),
            Err(Error::Singular { .. })
        ));

        let model = MahalanobisModel::fit(m.view(), 1e-6).unwrap();
        let p = &model.precision;
        assert_abs_diff_eq!(p[[0, 1]], p[[1, 0]], epsilon = 1e-10);
        let eig = SymmetricEigen::new(DMatrix::from_fn(2, 2, |i, j| p[[i, j]]));
        assert!(eig.eigenvalues.iter().all(|&l| l > 0.0 && l.is_finite()));
    }

    #[test]
    fn centroid_scores_zero_and_dimension_is_checked() {
        let m = array![[1.0, 0.0], [0.0, 2.0], [3.0, 1.0], [2.0, 5.0]];
        let model = MahalanobisModel::fit(m.view(), 0.0).unwrap();
        let c = model.centroid.clone();
        assert_abs_diff_eq!(model.score(c.view()).unwrap(), 0.0, epsilon = 1e-12);
        assert!(matches!(
            model.score(array![1.0].view()),
            Err(Error::Dimension { .. })
        ));
    }
}
