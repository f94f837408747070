//! The pipeline stages. Each stage reads the artifacts of earlier stages
//! from the output directory and writes its own next to them:
//!
//! | stage           | writes                                                    |
//! |-----------------|-----------------------------------------------------------|
//! | `simulate`      | `trips.csv`, `policies.csv`, `ground_truth.csv`, `split.csv` |
//! | `tune-detector` | `detectors/<model>.json`, `tuning/detector_<model>.csv`    |
//! | `profile`       | `profiles/<model>.csv`, `features/<model>.csv`             |
//! | `tune-model`    | `tuning/enet_<model>.csv`, `tuning/enet_<model>.json`      |
//! | `train`         | `models/<model>.json`                                      |
//! | `evaluate`      | `scores/<model>.csv`, `evaluation.csv`                     |
//! | `report`        | `report/roc_*.csv`, `report/coefficients_*.csv`, `report/score_density_*.csv`, `report/spearman.csv` |

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use telerisk::eval::{roc_points, spearman, tune_detector, tune_enet, FoldPlan};
use telerisk::features::{derive_attributes, ATTRIBUTE_NAMES};
use telerisk::glm::write_coefficients;
use telerisk::pipeline::{
    claim_recipe_spec, evaluate_scores, write_evaluation_report, Dataset, DetectorChoice,
    FeatureSet, TrainedModel,
};
use telerisk::profile::{
    profile_features, read_features_csv, read_profiles_csv, write_features_csv, write_profiles_csv,
    ProfileFeatures, Scheme,
};
use telerisk::recipe::{FeatureTable, RecipeSpec};
use telerisk::synth::{generate_portfolio, SynthConfig};
use telerisk::trips::{parse_policy_csv, parse_trip_csv, split_by_vin, PortfolioSplit};

use crate::config::RunConfig;
use crate::error::CliError;

/// Trips kept per model in a score-density file.
const DENSITY_SAMPLE: usize = 10_000;

type Result<T> = std::result::Result<T, CliError>;

pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct EnetChoice {
    lambda: f64,
    alpha: f64,
    mean_auc: f64,
    sd_auc: f64,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

impl Context {
    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.out.join(rel)
    }

    fn require(
        &self,
        path: PathBuf,
        stage: &'static str,
        producer: &'static str,
    ) -> Result<PathBuf> {
        if path.is_file() {
            Ok(path)
        } else {
            Err(CliError::MissingArtifact {
                stage,
                producer,
                path,
            })
        }
    }

    fn trips_path(&self) -> PathBuf {
        self.config
            .data
            .trips
            .clone()
            .unwrap_or_else(|| self.path("trips.csv"))
    }

    fn policies_path(&self) -> PathBuf {
        self.config
            .data
            .policies
            .clone()
            .unwrap_or_else(|| self.path("policies.csv"))
    }

    /// Trips, policies and the split. The split is drawn and saved on
    /// first use.
    fn dataset(&self, stage: &'static str) -> Result<Dataset> {
        let trips = parse_trip_csv(self.require(self.trips_path(), stage, "simulate")?)?;
        let policies = parse_policy_csv(self.require(self.policies_path(), stage, "simulate")?)?;
        let split_path = self.path("split.csv");
        let split = if split_path.is_file() {
            PortfolioSplit::read_csv(open(&split_path)?, self.seed)?
        } else {
            let split = split_by_vin(&policies, self.config.train_fraction, self.seed)?;
            split.write_csv(create(&split_path)?)?;
            split
        };
        Ok(Dataset::new(&trips, &policies, split)?)
    }

    fn feature_sets(&self) -> Result<Vec<FeatureSet>> {
        let mut sets = self.config.feature_sets()?;
        sets.sort_by_key(|s| FeatureSet::ALL.iter().position(|a| a == s));
        Ok(sets)
    }

    fn telematics_sets(&self) -> Result<Vec<FeatureSet>> {
        Ok(self
            .feature_sets()?
            .into_iter()
            .filter(|s| *s != FeatureSet::Baseline)
            .collect())
    }

    /// Tuned detector settings when present, configured ones otherwise.
    fn detector(&self, set: FeatureSet) -> Result<Option<DetectorChoice>> {
        let path = self.path(format!("detectors/{set}.json"));
        if path.is_file() {
            let choice = serde_json::from_str(&read_text(&path)?).map_err(telerisk::Error::from)?;
            return Ok(Some(choice));
        }
        Ok(self.config.detector_choice(set))
    }

    fn features(
        &self,
        set: FeatureSet,
        stage: &'static str,
    ) -> Result<Option<BTreeMap<String, ProfileFeatures>>> {
        if set == FeatureSet::Baseline {
            return Ok(None);
        }
        let path = self.require(self.path(format!("features/{set}.csv")), stage, "profile")?;
        Ok(Some(read_features_csv(open(&path)?)?))
    }

    fn recipe(&self) -> RecipeSpec {
        RecipeSpec {
            clamp: self.config.recipe.clamp,
            ..claim_recipe_spec(self.seed)
        }
    }

    fn folds(&self, data: &Dataset) -> Result<FoldPlan> {
        Ok(FoldPlan::new(
            &data.train_vins(),
            self.config.enet.folds,
            self.seed,
        )?)
    }

    fn design(
        &self,
        data: &Dataset,
        set: FeatureSet,
        vins: &[String],
        stage: &'static str,
    ) -> Result<(FeatureTable, Vec<u8>)> {
        let features = self.features(set, stage)?;
        Ok(data.design_table(vins, features.as_ref())?)
    }
}

pub fn simulate(ctx: &Context) -> Result<()> {
    let config = SynthConfig {
        seed: ctx.seed,
        ..ctx.config.simulate.clone()
    };
    let portfolio = generate_portfolio(&config)?;
    portfolio.write_to_dir(&ctx.out)?;
    let split = split_by_vin(&portfolio.policies, ctx.config.train_fraction, ctx.seed)?;
    split.write_csv(create(&ctx.path("split.csv"))?)?;
    info!(
        "simulated {} vehicles, {} trips",
        portfolio.policies.len(),
        portfolio.trips.len()
    );
    Ok(())
}

pub fn tune_detectors(ctx: &Context) -> Result<()> {
    let data = ctx.dataset("tune-detector")?;
    let folds = ctx.folds(&data)?;
    let labels = data.labels();
    for set in ctx.telematics_sets()? {
        let FeatureSet::Telematics(scheme, algorithm) = set else {
            continue;
        };
        let mut choice = ctx.config.detector_choice(set).expect("telematics model");
        let grid = ctx.config.detector_grid(set)?.expect("telematics model");
        if algorithm != telerisk::detect::Algorithm::Mahalanobis {
            info!("tuning {set} over {} values", grid.len());
            let result = tune_detector(
                scheme,
                algorithm,
                &grid,
                &data.trips_by_vin,
                &labels,
                &folds,
                choice.num_trees,
                ctx.seed,
            )?;
            result.write_csv(create(&ctx.path(format!("tuning/detector_{set}.csv")))?)?;
            choice.value = result.best_point().values[0];
        }
        let json = serde_json::to_string_pretty(&choice).map_err(telerisk::Error::from)?;
        write_text(&ctx.path(format!("detectors/{set}.json")), &json)?;
    }
    Ok(())
}

pub fn profile(ctx: &Context) -> Result<()> {
    let data = ctx.dataset("profile")?;
    for set in ctx.telematics_sets()? {
        let choice = ctx.detector(set)?.expect("telematics model");
        info!("profiling {set} (value {})", choice.value);
        let profiles = data.profiles(&choice, ctx.seed)?;
        write_profiles_csv(
            create(&ctx.path(format!("profiles/{set}.csv")))?,
            profiles.values(),
        )?;
        let features = profile_features(&profiles)?;
        write_features_csv(
            create(&ctx.path(format!("features/{set}.csv")))?,
            features.values(),
        )?;
    }
    Ok(())
}

pub fn tune_models(ctx: &Context) -> Result<()> {
    let data = ctx.dataset("tune-model")?;
    let vins = data.train_vins();
    let folds = ctx.folds(&data)?;
    let (lambdas, alphas) = (ctx.config.lambdas()?, ctx.config.alphas()?);
    for set in ctx.feature_sets()? {
        let (table, y) = ctx.design(&data, set, &vins, "tune-model")?;
        info!("tuning {set} over {} points", lambdas.len() * alphas.len());
        let result = tune_enet(
            &table,
            &y,
            &vins,
            &folds,
            &ctx.recipe(),
            &lambdas,
            &alphas,
            &ctx.config.solver(),
        )?;
        result.write_csv(create(&ctx.path(format!("tuning/enet_{set}.csv")))?)?;
        let best = result.best_point();
        let choice = EnetChoice {
            lambda: best.values[0],
            alpha: best.values[1],
            mean_auc: best.mean_auc,
            sd_auc: best.sd_auc,
        };
        let json = serde_json::to_string_pretty(&choice).map_err(telerisk::Error::from)?;
        write_text(&ctx.path(format!("tuning/enet_{set}.json")), &json)?;
    }
    Ok(())
}

pub fn train(ctx: &Context) -> Result<()> {
    let data = ctx.dataset("train")?;
    let vins = data.train_vins();
    for set in ctx.feature_sets()? {
        let path = ctx.require(
            ctx.path(format!("tuning/enet_{set}.json")),
            "train",
            "tune-model",
        )?;
        let choice: EnetChoice =
            serde_json::from_str(&read_text(&path)?).map_err(telerisk::Error::from)?;
        let (table, y) = ctx.design(&data, set, &vins, "train")?;
        let model = TrainedModel::fit(
            set,
            ctx.detector(set)?,
            &table,
            &y,
            &ctx.recipe(),
            choice.lambda,
            choice.alpha,
            &ctx.config.solver(),
        )?;
        info!(
            "trained {set}: lambda {:e}, alpha {}, {} nonzero",
            choice.lambda,
            choice.alpha,
            model.classifier.nonzero()
        );
        write_text(&ctx.path(format!("models/{set}.json")), &model.to_json()?)?;
    }
    Ok(())
}

fn load_model(ctx: &Context, set: FeatureSet, stage: &'static str) -> Result<TrainedModel> {
    let path = ctx.require(ctx.path(format!("models/{set}.json")), stage, "train")?;
    Ok(TrainedModel::from_json(&read_text(&path)?)?)
}

pub fn evaluate(ctx: &Context) -> Result<()> {
    let data = ctx.dataset("evaluate")?;
    let vins = data.test_vins();
    let mut rows = Vec::new();
    for set in ctx.feature_sets()? {
        let model = load_model(ctx, set, "evaluate")?;
        let (table, y) = ctx.design(&data, set, &vins, "evaluate")?;
        let scores = model.predict(&table)?;
        let mut w = csv::Writer::from_writer(create(&ctx.path(format!("scores/{set}.csv")))?);
        let path = ctx.path(format!("scores/{set}.csv"));
        let csv_err = |e: csv::Error| CliError::Core(e.into());
        w.write_record(["vin", "score", "claim_ind"])
            .map_err(csv_err)?;
        for ((vin, s), label) in vins.iter().zip(&scores).zip(&y) {
            w.write_record([vin.as_str(), &s.to_string(), &label.to_string()])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
        rows.push(evaluate_scores(&set.name(), &scores, &y)?);
    }
    write_evaluation_report(create(&ctx.path("evaluation.csv"))?, &rows)?;
    for r in &rows {
        info!("{:<20} auc {:.4}", r.model, r.auc);
    }
    Ok(())
}

fn read_scores(path: &Path) -> Result<(Vec<String>, Vec<f64>, Vec<u8>)> {
    #[derive(Deserialize)]
    struct Row {
        vin: String,
        score: f64,
        claim_ind: u8,
    }
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let (mut vins, mut scores, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for row in rdr.deserialize::<Row>() {
        let row = row.map_err(|e| CliError::Core(e.into()))?;
        vins.push(row.vin);
        scores.push(row.score);
        labels.push(row.claim_ind);
    }
    Ok((vins, scores, labels))
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let csv_err = |e: csv::Error| CliError::Core(e.into());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn report(ctx: &Context) -> Result<()> {
    let sets = ctx.feature_sets()?;
    for &set in &sets {
        let scores_path =
            ctx.require(ctx.path(format!("scores/{set}.csv")), "report", "evaluate")?;
        let (_, scores, labels) = read_scores(&scores_path)?;
        let roc: Vec<Vec<String>> = roc_points(&scores, &labels)?
            .into_iter()
            .map(|(fpr, tpr, t)| vec![fpr.to_string(), tpr.to_string(), t.to_string()])
            .collect();
        write_rows(
            &ctx.path(format!("report/roc_{set}.csv")),
            &["fpr", "tpr", "threshold"],
            &roc,
        )?;

        let model = load_model(ctx, set, "report")?;
        write_coefficients(
            create(&ctx.path(format!("report/coefficients_{set}.csv")))?,
            &model.recipe.names(),
            &model.classifier,
        )?;
    }

    let telematics: Vec<FeatureSet> = sets
        .iter()
        .copied()
        .filter(|s| *s != FeatureSet::Baseline)
        .collect();
    if telematics.is_empty() {
        return Ok(());
    }
    let data = ctx.dataset("report")?;
    let labels = data.labels();
    let trips: Vec<_> = data.trips_by_vin.values().flatten().cloned().collect();
    let attributes = derive_attributes(&trips);
    let row_of: BTreeMap<(&str, u32), usize> = attributes
        .vins
        .iter()
        .zip(&attributes.trip_ids)
        .enumerate()
        .map(|(i, (v, &t))| ((v.as_str(), t), i))
        .collect();
    let mut spearman_rows = Vec::new();
    for set in telematics {
        let path = ctx.require(ctx.path(format!("profiles/{set}.csv")), "report", "profile")?;
        let profiles = read_profiles_csv(open(&path)?)?;
        let flat: Vec<(&str, u32, f64)> = profiles
            .values()
            .flat_map(|p| {
                p.trip_ids
                    .iter()
                    .zip(&p.scores)
                    .map(move |(&t, &s)| (p.vin.as_str(), t, s))
            })
            .collect();
        let step = flat.len().div_ceil(DENSITY_SAMPLE).max(1);
        let density: Vec<Vec<String>> = flat
            .iter()
            .step_by(step)
            .map(|&(vin, trip, s)| {
                let label = labels.get(vin).map_or(String::new(), |l| l.to_string());
                vec![vin.to_string(), trip.to_string(), s.to_string(), label]
            })
            .collect();
        write_rows(
            &ctx.path(format!("report/score_density_{set}.csv")),
            &["vin", "trip_id", "score", "claim_ind"],
            &density,
        )?;

        if let FeatureSet::Telematics(Scheme::Global, _) = set {
            let rows: Vec<usize> = flat
                .iter()
                .map(|&(v, t, _)| {
                    row_of.get(&(v, t)).copied().ok_or_else(|| {
                        CliError::Core(telerisk::Error::Validation(format!(
                            "profile trip {v}/{t} is not in the trip file"
                        )))
                    })
                })
                .collect::<Result<_>>()?;
            let scores: Vec<f64> = flat.iter().map(|x| x.2).collect();
            for (j, name) in ATTRIBUTE_NAMES.iter().enumerate() {
                let column: Vec<f64> = rows
                    .iter()
                    .map(|&i| attributes.attributes[[i, j]])
                    .collect();
                let rho = spearman(&scores, &column)?;
                spearman_rows.push(vec![set.name(), name.to_string(), rho.to_string()]);
            }
        }
    }
    if !spearman_rows.is_empty() {
        write_rows(
            &ctx.path("report/spearman.csv"),
            &["model", "attribute", "spearman"],
            &spearman_rows,
        )?;
    }
    Ok(())
}
