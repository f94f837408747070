//! Unsupervised anomaly detectors: Mahalanobis distance, Local Outlier
//! Factor, and Isolation Forest.

pub mod iforest;
pub mod lof;
pub mod mahalanobis;
pub mod neighbors;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use iforest::{c_factor, iforest_fit, iforest_score, IsolationForest};
pub use lof::{lof_scores, LofModel, LofParams};
pub use mahalanobis::{mahalanobis_fit, mahalanobis_score, MahalanobisModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Mahalanobis,
    Lof,
    #[serde(rename = "iforest")]
    IForest,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Mahalanobis, Algorithm::Lof, Algorithm::IForest];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Mahalanobis => "mahalanobis",
            Algorithm::Lof => "lof",
            Algorithm::IForest => "iforest",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mahalanobis" => Ok(Algorithm::Mahalanobis),
            "lof" => Ok(Algorithm::Lof),
            "iforest" | "if" => Ok(Algorithm::IForest),
            other => Err(crate::Error::arg(format!("unknown algorithm {other:?}"))),
        }
    }
}
