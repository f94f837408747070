//! Run configuration, read from a TOML file.
//!
//! Every field is optional. A minimal file is empty; paths default to files
//! inside the output directory.
//!
//! ```toml
//! seed = 0
//! out = "run"
//! train_fraction = 0.7
//! models = ["baseline", "global_mahalanobis"]
//!
//! [data]
//! trips = "trips.csv"
//! policies = "policies.csv"
//!
//! [simulate]
//! num_vehicles = 500
//! trips_per_vehicle = [20, 40]
//!
//! [detector]
//! num_trees = 100
//! ridge_eps = 0.0
//! values = { global_lof = 20 }
//! grids = { global_lof = [5, 10, 20] }
//!
//! [enet]
//! folds = 5
//! lambdas = [1e-4, 1e-2, 1.0]
//! alphas = [0.0, 1.0]
//!
//! [recipe]
//! clamp = 20.57
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use telerisk::eval::{GridSpec, DEFAULT_FOLDS};
use telerisk::glm::SolverConfig;
use telerisk::pipeline::{DetectorChoice, FeatureSet};
use telerisk::recipe::encode::DEFAULT_CLAMP;
use telerisk::synth::SynthConfig;

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub train_fraction: f64,
    /// Model variants, `baseline` or `<scheme>_<algorithm>`.
    pub models: Vec<String>,
    pub data: DataPaths,
    pub simulate: SynthConfig,
    pub detector: DetectorSettings,
    pub enet: EnetSettings,
    pub recipe: RecipeSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: None,
            train_fraction: 0.7,
            models: FeatureSet::ALL.iter().map(|f| f.name()).collect(),
            data: DataPaths::default(),
            simulate: SynthConfig::default(),
            detector: DetectorSettings::default(),
            enet: EnetSettings::default(),
            recipe: RecipeSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub trips: Option<PathBuf>,
    pub policies: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSettings {
    pub num_trees: usize,
    pub ridge_eps: f64,
    /// Fixed hyperparameters keyed by variant name, used when no tuned
    /// value is on disk.
    pub values: BTreeMap<String, f64>,
    /// Grid overrides keyed by variant name.
    pub grids: BTreeMap<String, Vec<f64>>,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        DetectorSettings {
            num_trees: telerisk::profile::DEFAULT_NUM_TREES,
            ridge_eps: 0.0,
            values: BTreeMap::new(),
            grids: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnetSettings {
    pub folds: usize,
    pub lambdas: Option<Vec<f64>>,
    pub alphas: Option<Vec<f64>>,
    pub tol: f64,
    pub max_iter: usize,
    pub kkt_tol: f64,
}

impl Default for EnetSettings {
    fn default() -> Self {
        let solver = SolverConfig::default();
        EnetSettings {
            folds: DEFAULT_FOLDS,
            lambdas: None,
            alphas: None,
            tol: solver.tol,
            max_iter: solver.max_iter,
            kkt_tol: solver.kkt_tol,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecipeSettings {
    pub clamp: f64,
}

impl Default for RecipeSettings {
    fn default() -> Self {
        RecipeSettings {
            clamp: DEFAULT_CLAMP,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn feature_sets(&self) -> Result<Vec<FeatureSet>, CliError> {
        let mut sets = self
            .models
            .iter()
            .map(|m| m.parse::<FeatureSet>().map_err(CliError::from))
            .collect::<Result<Vec<_>, _>>()?;
        sets.sort();
        sets.dedup();
        if sets.is_empty() {
            return Err(CliError::Config("no models configured".into()));
        }
        Ok(sets)
    }

    /// Detector settings for a variant before any tuning.
    pub fn detector_choice(&self, set: FeatureSet) -> Option<DetectorChoice> {
        let FeatureSet::Telematics(scheme, algorithm) = set else {
            return None;
        };
        let mut choice = DetectorChoice::default_for(scheme, algorithm);
        if let Some(&v) = self.detector.values.get(&set.name()) {
            choice.value = v;
        }
        choice.num_trees = self.detector.num_trees;
        choice.ridge_eps = self.detector.ridge_eps;
        Some(choice)
    }

    pub fn detector_grid(&self, set: FeatureSet) -> Result<Option<GridSpec>, CliError> {
        let FeatureSet::Telematics(scheme, algorithm) = set else {
            return Ok(None);
        };
        let default = GridSpec::for_detector(scheme, algorithm);
        Ok(Some(match self.detector.grids.get(&set.name()) {
            Some(values) => GridSpec::new(default.name, values.clone())?,
            None => default,
        }))
    }

    pub fn lambdas(&self) -> Result<GridSpec, CliError> {
        Ok(match &self.enet.lambdas {
            Some(v) => GridSpec::new("lambda", v.clone())?,
            None => GridSpec::lambda(),
        })
    }

    pub fn alphas(&self) -> Result<GridSpec, CliError> {
        Ok(match &self.enet.alphas {
            Some(v) => GridSpec::new("alpha", v.clone())?,
            None => GridSpec::alpha(),
        })
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            tol: self.enet.tol,
            max_iter: self.enet.max_iter,
            kkt_tol: self.enet.kkt_tol,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c.feature_sets().unwrap().len(), 7);
        assert_eq!(c.lambdas().unwrap().len(), 50);
        assert_eq!(c.recipe.clamp, DEFAULT_CLAMP);
    }

    #[test]
    fn documented_example_parses() {
        let text = include_str!("config.rs")
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").trim_start())
            .collect::<Vec<_>>()
            .join("\n");
        let c: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(c.simulate.trips_per_vehicle, (20, 40));
        assert_eq!(c.feature_sets().unwrap().len(), 2);
        let global_lof: FeatureSet = "global_lof".parse().unwrap();
        assert_eq!(c.detector_choice(global_lof).unwrap().value, 20.0);
        assert_eq!(c.detector_grid(global_lof).unwrap().unwrap().len(), 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 1").is_err());
        let c: RunConfig = toml::from_str("models = [\"local\"]").unwrap();
        assert!(c.feature_sets().is_err());
    }
}
