//! Rare-category pooling and logit target encoding.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OTHER: &str = "other";
pub const DEFAULT_POOL_THRESHOLD: f64 = 0.05;
pub const DEFAULT_CLAMP: f64 = 20.57;

/// Categories frequent enough in the fitting data to keep their own label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryPool {
    pub kept: BTreeSet<String>,
    pub threshold: f64,
}

impl CategoryPool {
    /// Keeps categories whose relative frequency exceeds `threshold`.
    pub fn fit<S: AsRef<str>>(column: &[S], threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::arg(format!(
                "pool threshold must lie in (0, 1), got {threshold}"
            )));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for c in column {
            *counts.entry(c.as_ref()).or_default() += 1;
        }
        let n = column.len() as f64;
        let kept = counts
            .into_iter()
            .filter(|&(_, c)| c as f64 / n > threshold)
            .map(|(k, _)| k.to_string())
            .collect();
        Ok(CategoryPool { kept, threshold })
    }

    pub fn pool<'a>(&self, label: &'a str) -> &'a str {
        if self.kept.contains(label) {
            label
        } else {
            OTHER
        }
    }

    pub fn apply<S: AsRef<str>>(&self, column: &[S]) -> Vec<String> {
        column
            .iter()
            .map(|c| self.pool(c.as_ref()).to_string())
            .collect()
    }
}

pub fn pool_rare_categories<S: AsRef<str>>(column: &[S], threshold: f64) -> Result<Vec<String>> {
    Ok(CategoryPool::fit(column, threshold)?.apply(column))
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn clamped_logit(positives: usize, total: usize, clamp: f64) -> f64 {
    logit(positives as f64 / total as f64).clamp(-clamp, clamp)
}

/// Per-category coefficient of an intercept-free logistic regression on the
/// category indicators, which is the logit of the category's positive rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEncoder {
    pub encoding: BTreeMap<String, f64>,
    /// Used for labels that had no fitting rows.
    pub fallback: f64,
    pub clamp: f64,
}

impl TargetEncoder {
    pub fn fit<S: AsRef<str>>(column: &[S], y: &[u8], clamp: f64) -> Result<Self> {
        if column.len() != y.len() {
            return Err(Error::Dimension {
                expected: column.len(),
                got: y.len(),
            });
        }
        if column.is_empty() {
            return Err(Error::arg("cannot fit a target encoder on zero rows"));
        }
        if !(clamp > 0.0) {
            return Err(Error::arg(format!("clamp must be positive, got {clamp}")));
        }
        let mut stats: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for (c, &yi) in column.iter().zip(y) {
            if yi > 1 {
                return Err(Error::arg(format!("labels must be 0 or 1, got {yi}")));
            }
            let e = stats.entry(c.as_ref()).or_default();
            e.0 += yi as usize;
            e.1 += 1;
        }
        let encoding = stats
            .iter()
            .map(|(k, &(pos, tot))| (k.to_string(), clamped_logit(pos, tot, clamp)))
            .collect();
        let positives = y.iter().map(|&v| v as usize).sum();
        Ok(TargetEncoder {
            encoding,
            fallback: clamped_logit(positives, y.len(), clamp),
            clamp,
        })
    }

    pub fn encode(&self, label: &str) -> f64 {
        self.encoding.get(label).copied().unwrap_or(self.fallback)
    }
}

pub fn fit_target_encoder<S: AsRef<str>>(
    column: &[S],
    y: &[u8],
    clamp: f64,
) -> Result<TargetEncoder> {
    TargetEncoder::fit(column, y, clamp)
}
