//! End-to-end assembly: design tables for the seven model variants,
//! tuning, final fit on the training vehicles, and test evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detect::Algorithm;
use crate::error::{Error, Result};
use crate::eval::{
    auc, confusion_metrics, global_detector, local_detector, tune_enet, FoldPlan, GridSpec,
    TuneResult, DEFAULT_THRESHOLD,
};
use crate::features::derive_attributes;
use crate::glm::{fit, FittedClassifier, SolverConfig};
use crate::profile::{
    global_profiles, local_profiles, profile_features, telematics_feature_names, AnomalyProfile,
    ProfileFeatures, Scheme, DEFAULT_NUM_TREES,
};
use crate::recipe::{Column, FeatureTable, ImputeSpec, ImputerParams, Recipe, RecipeSpec};
use crate::trips::{group_by_vin, PolicyRecord, PortfolioSplit, TripRecord};

pub const NUMERIC_TRFS: [&str; 6] = [
    "annual_distance",
    "commute_distance",
    "conv_count_3_yrs_minor",
    "veh_age",
    "years_claim_free",
    "years_licensed",
];
pub const CATEGORICAL_TRFS: [&str; 4] = ["gender", "marital_status", "pmt_plan", "veh_use"];
pub const DISTANCE_COLUMN: &str = "distance";
pub const IMPUTED_COLUMN: &str = "commute_distance";

/// Traditional risk factors in canonical (policy file) order.
pub fn trf_names() -> Vec<&'static str> {
    vec![
        "annual_distance",
        "commute_distance",
        "conv_count_3_yrs_minor",
        "gender",
        "marital_status",
        "pmt_plan",
        "veh_age",
        "veh_use",
        "years_claim_free",
        "years_licensed",
    ]
}

/// Design table columns: risk factors, distance, then the 66 telematics
/// features when present.
pub fn design_columns(with_telematics: bool) -> Vec<String> {
    let mut cols: Vec<String> = trf_names().into_iter().map(String::from).collect();
    cols.push(DISTANCE_COLUMN.into());
    if with_telematics {
        cols.extend(telematics_feature_names());
    }
    cols
}

/// Recipe used for the claim models: commute distance is imputed from the
/// other risk factors and distance.
pub fn claim_recipe_spec(seed: u64) -> RecipeSpec {
    let predictors = trf_names()
        .into_iter()
        .filter(|&n| n != IMPUTED_COLUMN)
        .map(String::from)
        .chain(std::iter::once(DISTANCE_COLUMN.to_string()))
        .collect();
    RecipeSpec {
        impute: Some(ImputeSpec {
            target: IMPUTED_COLUMN.into(),
            predictors,
            params: ImputerParams::default(),
        }),
        seed,
        ..RecipeSpec::default()
    }
}

/// Baseline or one detector under one scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureSet {
    Baseline,
    Telematics(Scheme, Algorithm),
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 7] = [
        FeatureSet::Baseline,
        FeatureSet::Telematics(Scheme::Local, Algorithm::Mahalanobis),
        FeatureSet::Telematics(Scheme::Local, Algorithm::Lof),
        FeatureSet::Telematics(Scheme::Local, Algorithm::IForest),
        FeatureSet::Telematics(Scheme::Global, Algorithm::Mahalanobis),
        FeatureSet::Telematics(Scheme::Global, Algorithm::Lof),
        FeatureSet::Telematics(Scheme::Global, Algorithm::IForest),
    ];

    pub fn name(&self) -> String {
        match self {
            FeatureSet::Baseline => "baseline".into(),
            FeatureSet::Telematics(s, a) => format!("{s}_{a}"),
        }
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for FeatureSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("baseline") {
            return Ok(FeatureSet::Baseline);
        }
        let (scheme, algo) = s.split_once(['_', '-']).ok_or_else(|| {
            Error::arg(format!(
                "unknown model {s:?}; expected baseline or <scheme>_<algorithm>"
            ))
        })?;
        Ok(FeatureSet::Telematics(scheme.parse()?, algo.parse()?))
    }
}

/// Detector and its tuned hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorChoice {
    pub scheme: Scheme,
    pub algorithm: Algorithm,
    /// `k_frac`/`b_frac` (local) or `k`/`b` (global); unused for Mahalanobis.
    pub value: f64,
    pub num_trees: usize,
    /// Covariance ridge for Mahalanobis; zero means none.
    #[serde(default)]
    pub ridge_eps: f64,
}

impl DetectorChoice {
    /// The tuned values reported for the real portfolio, used when no
    /// tuning has been run.
    pub fn default_for(scheme: Scheme, algorithm: Algorithm) -> Self {
        let value = match (scheme, algorithm) {
            (_, Algorithm::Mahalanobis) => 0.0,
            (Scheme::Local, Algorithm::Lof) => 0.35,
            (Scheme::Local, Algorithm::IForest) => 0.85,
            (Scheme::Global, Algorithm::Lof) => 50.0,
            (Scheme::Global, Algorithm::IForest) => 400.0,
        };
        DetectorChoice {
            scheme,
            algorithm,
            value,
            num_trees: DEFAULT_NUM_TREES,
            ridge_eps: 0.0,
        }
    }
}

/// Trips, policies and the train/test split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub trips_by_vin: BTreeMap<String, Vec<TripRecord>>,
    pub policies: BTreeMap<String, PolicyRecord>,
    pub split: PortfolioSplit,
}

impl Dataset {
    pub fn new(
        trips: &[TripRecord],
        policies: &[PolicyRecord],
        split: PortfolioSplit,
    ) -> Result<Self> {
        let trips_by_vin = group_by_vin(trips);
        let policies: BTreeMap<String, PolicyRecord> = policies
            .iter()
            .map(|p| (p.vin.clone(), p.clone()))
            .collect();
        for vin in split.train_vins.iter().chain(&split.test_vins) {
            if !policies.contains_key(vin) {
                return Err(Error::Validation(format!(
                    "vehicle `{vin}` is in the split but has no policy"
                )));
            }
            if !trips_by_vin.contains_key(vin) {
                return Err(Error::Validation(format!("vehicle `{vin}` has no trips")));
            }
        }
        Ok(Dataset {
            trips_by_vin,
            policies,
            split,
        })
    }

    pub fn train_vins(&self) -> Vec<String> {
        self.split.train_vins.iter().cloned().collect()
    }

    pub fn test_vins(&self) -> Vec<String> {
        self.split.test_vins.iter().cloned().collect()
    }

    pub fn labels(&self) -> BTreeMap<String, u8> {
        self.policies
            .iter()
            .map(|(v, p)| (v.clone(), p.claim_ind))
            .collect()
    }

    pub fn train_trips(&self) -> BTreeMap<String, Vec<TripRecord>> {
        self.split
            .train_vins
            .iter()
            .map(|v| (v.clone(), self.trips_by_vin[v].clone()))
            .collect()
    }

    /// Total distance driven per vehicle.
    pub fn distance(&self) -> BTreeMap<String, f64> {
        self.trips_by_vin
            .iter()
            .map(|(v, t)| (v.clone(), t.iter().map(|x| x.distance_km).sum()))
            .collect()
    }

    /// Profiles for every vehicle in the split. Local profiles are per
    /// vehicle; the global model is fitted on training trips only and
    /// scores test trips without refitting.
    pub fn profiles(
        &self,
        choice: &DetectorChoice,
        seed: u64,
    ) -> Result<BTreeMap<String, AnomalyProfile>> {
        match choice.scheme {
            Scheme::Local => {
                let all: BTreeMap<String, Vec<TripRecord>> = self
                    .split
                    .train_vins
                    .iter()
                    .chain(&self.split.test_vins)
                    .map(|v| (v.clone(), self.trips_by_vin[v].clone()))
                    .collect();
                local_profiles(
                    &all,
                    local_detector(
                        choice.algorithm,
                        choice.value,
                        choice.num_trees,
                        choice.ridge_eps,
                    ),
                    seed,
                )
            }
            Scheme::Global => {
                let collect = |set: &std::collections::BTreeSet<String>| -> Vec<TripRecord> {
                    set.iter()
                        .flat_map(|v| self.trips_by_vin[v].iter().cloned())
                        .collect()
                };
                let train = derive_attributes(&collect(&self.split.train_vins));
                let test = derive_attributes(&collect(&self.split.test_vins));
                global_profiles(
                    &train,
                    (!test.is_empty()).then_some(&test),
                    global_detector(
                        choice.algorithm,
                        choice.value,
                        choice.num_trees,
                        choice.ridge_eps,
                    ),
                    seed,
                )
            }
        }
    }

    /// Design table rows for `vins`, plus their labels.
    pub fn design_table(
        &self,
        vins: &[String],
        telematics: Option<&BTreeMap<String, ProfileFeatures>>,
    ) -> Result<(FeatureTable, Vec<u8>)> {
        let distance = self.distance();
        design_table(vins, &self.policies, &distance, telematics)
    }
}

pub fn design_table(
    vins: &[String],
    policies: &BTreeMap<String, PolicyRecord>,
    distance: &BTreeMap<String, f64>,
    telematics: Option<&BTreeMap<String, ProfileFeatures>>,
) -> Result<(FeatureTable, Vec<u8>)> {
    let rows: Vec<&PolicyRecord> = vins
        .iter()
        .map(|v| {
            policies
                .get(v)
                .ok_or_else(|| Error::Validation(format!("vehicle `{v}` has no policy")))
        })
        .collect::<Result<_>>()?;
    let num = |f: &dyn Fn(&PolicyRecord) -> f64| rows.iter().map(|p| f(p)).collect::<Vec<f64>>();
    let cat = |f: &dyn Fn(&PolicyRecord) -> &str| {
        rows.iter()
            .map(|p| f(p).to_string())
            .collect::<Vec<String>>()
    };

    let mut t = FeatureTable::new();
    t.push_numeric("annual_distance", num(&|p| p.annual_distance))?;
    t.push_numeric(
        "commute_distance",
        num(&|p| p.commute_distance.unwrap_or(f64::NAN)),
    )?;
    t.push_numeric(
        "conv_count_3_yrs_minor",
        num(&|p| p.conv_count_3_yrs_minor as f64),
    )?;
    t.push_categorical("gender", cat(&|p| &p.gender))?;
    t.push_categorical("marital_status", cat(&|p| &p.marital_status))?;
    t.push_categorical("pmt_plan", cat(&|p| &p.pmt_plan))?;
    t.push_numeric("veh_age", num(&|p| p.veh_age))?;
    t.push_categorical("veh_use", cat(&|p| &p.veh_use))?;
    t.push_numeric("years_claim_free", num(&|p| p.years_claim_free))?;
    t.push_numeric("years_licensed", num(&|p| p.years_licensed))?;
    let d = vins
        .iter()
        .map(|v| {
            distance
                .get(v)
                .copied()
                .ok_or_else(|| Error::Validation(format!("vehicle `{v}` has no distance")))
        })
        .collect::<Result<Vec<f64>>>()?;
    t.push_numeric(DISTANCE_COLUMN, d)?;
    if let Some(features) = telematics {
        let tel = crate::profile::telematics_table(features, vins)?;
        for (name, col) in tel.names().iter().zip(tel.columns()) {
            t.push(name.clone(), col.clone())?;
        }
    }
    let y = rows.iter().map(|p| p.claim_ind).collect();
    Ok((t, y))
}

/// `vin,<columns>,claim_ind`; missing values are empty cells.
pub fn write_design_csv<W: Write>(
    writer: W,
    vins: &[String],
    table: &FeatureTable,
    y: &[u8],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["vin".to_string()];
    header.extend(table.names().iter().cloned());
    header.push("claim_ind".into());
    w.write_record(&header)?;
    for (i, vin) in vins.iter().enumerate() {
        let mut rec = vec![vin.clone()];
        for col in table.columns() {
            rec.push(match col {
                Column::Numeric(v) if v[i].is_nan() => String::new(),
                Column::Numeric(v) => v[i].to_string(),
                Column::Categorical(v) => v[i].clone(),
            });
        }
        rec.push(y[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<design writer>", e))?;
    Ok(())
}

/// A fitted claim model with its recipe and provenance of its settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub feature_set: FeatureSet,
    pub detector: Option<DetectorChoice>,
    pub feature_names: Vec<String>,
    pub recipe: Recipe,
    pub classifier: FittedClassifier,
}

impl TrainedModel {
    pub fn fit(
        feature_set: FeatureSet,
        detector: Option<DetectorChoice>,
        table: &FeatureTable,
        y: &[u8],
        recipe: &RecipeSpec,
        lambda: f64,
        alpha: f64,
        solver: &SolverConfig,
    ) -> Result<Self> {
        let (recipe, x) = recipe.fit_transform(table, y)?;
        let mut classifier = fit(x.view(), y, lambda, alpha, solver)?;
        classifier.recipe_ref = Some(format!("{}-recipe-v{}", feature_set.name(), recipe.version));
        Ok(TrainedModel {
            feature_set,
            detector,
            feature_names: table.names().to_vec(),
            recipe,
            classifier,
        })
    }

    pub fn predict(&self, table: &FeatureTable) -> Result<Vec<f64>> {
        let x = self.recipe.apply(table)?;
        self.classifier.predict_rows(x.view())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: TrainedModel = serde_json::from_str(s)?;
        if m.recipe.version != crate::recipe::RECIPE_FORMAT_VERSION {
            return Err(Error::Version {
                expected: crate::recipe::RECIPE_FORMAT_VERSION,
                found: m.recipe.version,
            });
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub model: String,
    pub auc: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

pub fn evaluate_scores(model: &str, scores: &[f64], y: &[u8]) -> Result<EvaluationRow> {
    let m = confusion_metrics(scores, y, DEFAULT_THRESHOLD)?;
    Ok(EvaluationRow {
        model: model.into(),
        auc: auc(scores, y)?,
        accuracy: m.accuracy,
        sensitivity: m.sensitivity,
        specificity: m.specificity,
    })
}

/// Metrics table with deltas against the row named `baseline` (zero for
/// the baseline itself, empty when there is no baseline row).
pub fn write_evaluation_report<W: Write>(writer: W, rows: &[EvaluationRow]) -> Result<()> {
    let base = rows.iter().find(|r| r.model == "baseline");
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "model",
        "auc",
        "accuracy",
        "sensitivity",
        "specificity",
        "delta_auc",
        "delta_accuracy",
        "delta_sensitivity",
        "delta_specificity",
    ])?;
    for r in rows {
        let mut rec = vec![
            r.model.clone(),
            r.auc.to_string(),
            r.accuracy.to_string(),
            r.sensitivity.to_string(),
            r.specificity.to_string(),
        ];
        for (v, b) in [
            (r.auc, base.map(|b| b.auc)),
            (r.accuracy, base.map(|b| b.accuracy)),
            (r.sensitivity, base.map(|b| b.sensitivity)),
            (r.specificity, base.map(|b| b.specificity)),
        ] {
            rec.push(b.map(|b| (v - b).to_string()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<report writer>", e))?;
    Ok(())
}

/// Settings shared by every variant of an end-to-end run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub folds: usize,
    pub lambdas: GridSpec,
    pub alphas: GridSpec,
    pub solver: SolverConfig,
    pub seed: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            folds: crate::eval::DEFAULT_FOLDS,
            lambdas: GridSpec::lambda(),
            alphas: GridSpec::alpha(),
            solver: SolverConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub tuning: TuneResult,
    pub model: TrainedModel,
    pub evaluation: EvaluationRow,
    pub test_scores: Vec<f64>,
}

/// Tunes `(λ, α)` by cross-validation on the training vehicles, refits on
/// all of them, and evaluates on the test vehicles.
pub fn run_variant(
    data: &Dataset,
    feature_set: FeatureSet,
    detector: Option<DetectorChoice>,
    settings: &RunSettings,
) -> Result<VariantOutcome> {
    let features = match (feature_set, detector) {
        (FeatureSet::Baseline, _) => None,
        (FeatureSet::Telematics(scheme, algorithm), choice) => {
            let choice = choice.unwrap_or_else(|| DetectorChoice::default_for(scheme, algorithm));
            if choice.scheme != scheme || choice.algorithm != algorithm {
                return Err(Error::arg(format!(
                    "detector settings do not match model {feature_set}"
                )));
            }
            Some(profile_features(&data.profiles(&choice, settings.seed)?)?)
        }
    };
    let detector = match feature_set {
        FeatureSet::Baseline => None,
        FeatureSet::Telematics(s, a) => {
            Some(detector.unwrap_or_else(|| DetectorChoice::default_for(s, a)))
        }
    };
    let train_vins = data.train_vins();
    let test_vins = data.test_vins();
    let (train_table, y_train) = data.design_table(&train_vins, features.as_ref())?;
    let (test_table, y_test) = data.design_table(&test_vins, features.as_ref())?;
    let folds = FoldPlan::new(&train_vins, settings.folds, settings.seed)?;
    let recipe = claim_recipe_spec(settings.seed);
    let tuning = tune_enet(
        &train_table,
        &y_train,
        &train_vins,
        &folds,
        &recipe,
        &settings.lambdas,
        &settings.alphas,
        &settings.solver,
    )?;
    let best = tuning.best_point().values.clone();
    let model = TrainedModel::fit(
        feature_set,
        detector,
        &train_table,
        &y_train,
        &recipe,
        best[0],
        best[1],
        &settings.solver,
    )?;
    let test_scores = model.predict(&test_table)?;
    let evaluation = evaluate_scores(&feature_set.name(), &test_scores, &y_test)?;
    Ok(VariantOutcome {
        tuning,
        model,
        evaluation,
        test_scores,
    })
}
