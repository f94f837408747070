//! Telematics anomaly profiles and elastic-net claim classification.
//!
//! Trip summaries are turned into eight per-trip attributes, scored by an
//! unsupervised detector either per vehicle ("routine") or across the
//! whole portfolio ("peculiarity"), and summarized into quantile features.
//! Those features join the traditional policy risk factors in a penalized
//! logistic regression.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod detect;
pub mod error;
pub mod eval;
pub mod features;
pub mod glm;
pub mod pipeline;
pub mod profile;
pub mod recipe;
pub mod synth;
pub mod trips;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/trips.md")]
    mod trips {}
    #[doc = include_str!("../../../book/src/detectors.md")]
    mod detectors {}
    #[doc = include_str!("../../../book/src/profiles.md")]
    mod profiles {}
    #[doc = include_str!("../../../book/src/recipe.md")]
    mod recipe {}
    #[doc = include_str!("../../../book/src/elastic_net.md")]
    mod elastic_net {}
    #[doc = include_str!("../../../book/src/tuning.md")]
    mod tuning {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
