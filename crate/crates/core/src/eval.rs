//! Classification metrics, vehicle-level folds, cross-validation with
//! in-fold preprocessing, and grid search.

use std::collections::BTreeMap;
use std::io::Write;

use log::warn;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::Algorithm;
use crate::error::{Error, Result};
use crate::features::derive_attributes;
use crate::glm::{fit_from, SolverConfig};
use crate::profile::{
    global_profiles, local_profiles, profile_features, telematics_table, GlobalDetector,
    LocalDetector, Scheme,
};
use crate::recipe::{FeatureTable, Recipe, RecipeSpec};
use crate::trips::TripRecord;

pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_labels(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::arg("labels must be 0 or 1"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::arg("scores must not be NaN"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_labels(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let ranks = midranks(scores);
    // twice the rank sum keeps every term an integer
    let twice_rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| 2.0 * r)
        .sum();
    let twice_u = twice_rank_sum - (pos * (pos + 1)) as f64;
    Ok(twice_u / (2.0 * pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Hard prediction is positive iff `score >= threshold`.
pub fn confusion_metrics(
    scores: &[f64],
    labels: &[u8],
    threshold: f64,
) -> Result<ConfusionMetrics> {
    let (pos, neg) = check_labels(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric(
            "sensitivity needs at least one positive".into(),
        ));
    }
    if neg == 0 {
        return Err(Error::UndefinedMetric(
            "specificity needs at least one negative".into(),
        ));
    }
    let (mut tp, mut tn) = (0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let pred = s >= threshold;
        match (pred, l == 1) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    Ok(ConfusionMetrics {
        accuracy: (tp + tn) as f64 / labels.len() as f64,
        sensitivity: tp as f64 / pos as f64,
        specificity: tn as f64 / neg as f64,
    })
}

/// ROC curve as `(false positive rate, true positive rate, threshold)`,
/// starting at `(0, 0)`.
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64, f64)>> {
    let (pos, neg) = check_labels(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = vec![(0.0, 0.0, f64::INFINITY)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((fp as f64 / neg as f64, tp as f64 / pos as f64, s));
    }
    Ok(out)
}

/// Pearson correlation of midranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::UndefinedMetric(
            "correlation needs two points".into(),
        ));
    }
    let (ra, rb) = (midranks(a), midranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedMetric(
            "correlation of a constant vector".into(),
        ));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Assignment of vehicles to cross-validation folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
    pub seed: u64,
}

impl FoldPlan {
    /// Shuffles the sorted vins and deals them round-robin into `k` folds.
    pub fn new<S: AsRef<str>>(vins: &[S], k: usize, seed: u64) -> Result<Self> {
        let mut sorted: Vec<String> = vins.iter().map(|v| v.as_ref().to_string()).collect();
        sorted.sort();
        sorted.dedup();
        if k < 2 || k > sorted.len() {
            return Err(Error::arg(format!(
                "need 2 <= k <= {} folds, got {k}",
                sorted.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sorted.shuffle(&mut rng);
        let assignments = sorted
            .into_iter()
            .enumerate()
            .map(|(i, v)| (v, i % k))
            .collect();
        Ok(FoldPlan {
            k,
            assignments,
            seed,
        })
    }

    pub fn fold_of(&self, vin: &str) -> Option<usize> {
        self.assignments.get(vin).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Row indices of `vins` held out in each fold.
    fn row_folds<S: AsRef<str>>(&self, vins: &[S]) -> Result<Vec<usize>> {
        vins.iter()
            .map(|v| {
                self.fold_of(v.as_ref())
                    .ok_or_else(|| Error::arg(format!("vehicle `{}` has no fold", v.as_ref())))
            })
            .collect()
    }
}

/// Named, strictly increasing list of candidate values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub name: String,
    pub values: Vec<f64>,
}

impl GridSpec {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if values.is_empty() {
            return Err(Error::arg(format!("grid `{name}` is empty")));
        }
        if values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::arg(format!(
                "grid `{name}` must be strictly increasing"
            )));
        }
        Ok(GridSpec { name, values })
    }

    fn built(name: &str, values: Vec<f64>) -> Self {
        GridSpec::new(name, values).expect("built-in grid is valid")
    }

    /// 0.05, 0.10, ..., 0.60
    pub fn k_frac() -> Self {
        Self::built("k_frac", (1..=12).map(|i| i as f64 / 20.0).collect())
    }

    /// 0.05, 0.10, ..., 1.00
    pub fn b_frac() -> Self {
        Self::built("b_frac", (1..=20).map(|i| i as f64 / 20.0).collect())
    }

    /// 5, 10, ..., 50
    pub fn global_k() -> Self {
        Self::built("k", (1..=10).map(|i| 5.0 * i as f64).collect())
    }

    /// 100, 200, ..., 1000
    pub fn global_b() -> Self {
        Self::built("b", (1..=10).map(|i| 100.0 * i as f64).collect())
    }

    /// 50 log-uniform values from 1e-10 to 1.
    pub fn lambda() -> Self {
        let values = (0..50)
            .map(|i| match i {
                0 => 1e-10,
                49 => 1.0,
                _ => 10f64.powf(-10.0 + 10.0 * i as f64 / 49.0),
            })
            .collect();
        Self::built("lambda", values)
    }

    pub fn alpha() -> Self {
        Self::built("alpha", vec![0.0, 0.25, 0.5, 0.75, 1.0])
    }

    /// The single "no parameter" point used for Mahalanobis.
    pub fn none() -> Self {
        Self::built("none", vec![0.0])
    }

    /// Default detector grid for a scheme and algorithm.
    pub fn for_detector(scheme: Scheme, algorithm: Algorithm) -> Self {
        match (scheme, algorithm) {
            (_, Algorithm::Mahalanobis) => Self::none(),
            (Scheme::Local, Algorithm::Lof) => Self::k_frac(),
            (Scheme::Local, Algorithm::IForest) => Self::b_frac(),
            (Scheme::Global, Algorithm::Lof) => Self::global_k(),
            (Scheme::Global, Algorithm::IForest) => Self::global_b(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub values: Vec<f64>,
    pub mean_auc: f64,
    pub sd_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub names: Vec<String>,
    pub points: Vec<GridPoint>,
    pub best: usize,
}

impl TuneResult {
    pub fn best_point(&self) -> &GridPoint {
        &self.points[self.best]
    }

    /// `grid_value_1[,grid_value_2],mean_auc,sd_auc`, one row per point.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = self.names.clone();
        header.extend(["mean_auc".to_string(), "sd_auc".to_string()]);
        w.write_record(&header)?;
        for p in &self.points {
            let mut rec: Vec<String> = p.values.iter().map(|v| v.to_string()).collect();
            rec.push(p.mean_auc.to_string());
            rec.push(p.sd_auc.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<tuning writer>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub lambda: f64,
    pub alpha: f64,
    pub solver: SolverConfig,
}

impl ModelSpec {
    /// Non-penalized logistic regression.
    pub fn unpenalized() -> Self {
        ModelSpec {
            lambda: 0.0,
            alpha: 0.0,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    /// AUC of the concatenated out-of-fold predictions.
    pub auc: f64,
    /// Sample standard deviation of the per-fold AUCs.
    pub sd_auc: f64,
    pub fold_aucs: Vec<f64>,
    /// Out-of-fold prediction for every row.
    pub oof: Vec<f64>,
    /// Recipe fitted on each fold's training rows.
    pub recipes: Vec<Recipe>,
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
}

struct FoldData {
    recipe: Recipe,
    x_train: Array2<f64>,
    y_train: Vec<u8>,
    x_valid: Array2<f64>,
    valid_rows: Vec<usize>,
}

fn prepare_folds(
    table: &FeatureTable,
    y: &[u8],
    row_folds: &[usize],
    k: usize,
    recipe: &RecipeSpec,
) -> Result<Vec<FoldData>> {
    (0..k)
        .into_par_iter()
        .map(|f| {
            let train_rows: Vec<usize> = (0..row_folds.len())
                .filter(|&i| row_folds[i] != f)
                .collect();
            let valid_rows: Vec<usize> = (0..row_folds.len())
                .filter(|&i| row_folds[i] == f)
                .collect();
            let y_train: Vec<u8> = train_rows.iter().map(|&i| y[i]).collect();
            let (fitted, x_train) =
                recipe.fit_transform(&table.select_rows(&train_rows), &y_train)?;
            let x_valid = fitted.apply(&table.select_rows(&valid_rows))?;
            Ok(FoldData {
                recipe: fitted,
                x_train,
                y_train,
                x_valid,
                valid_rows,
            })
        })
        .collect()
}

/// Pooled AUC of out-of-fold predictions and sd of the per-fold AUCs.
fn summarize(oof: &[f64], y: &[u8], folds: &[FoldData]) -> Result<(f64, f64, Vec<f64>)> {
    let mut fold_aucs = Vec::with_capacity(folds.len());
    for (f, fold) in folds.iter().enumerate() {
        let s: Vec<f64> = fold.valid_rows.iter().map(|&i| oof[i]).collect();
        let l: Vec<u8> = fold.valid_rows.iter().map(|&i| y[i]).collect();
        match auc(&s, &l) {
            Ok(a) => fold_aucs.push(a),
            Err(Error::UndefinedMetric(_)) => {
                warn!("fold {f} holds a single class; left out of the AUC spread")
            }
            Err(e) => return Err(e),
        }
    }
    Ok((auc(oof, y)?, sample_sd(&fold_aucs), fold_aucs))
}

fn check_rows<S: AsRef<str>>(table: &FeatureTable, y: &[u8], vins: &[S]) -> Result<()> {
    if y.len() != table.nrows() || vins.len() != table.nrows() {
        return Err(Error::Dimension {
            expected: table.nrows(),
            got: y.len().min(vins.len()),
        });
    }
    Ok(())
}

/// k-fold cross-validation. The recipe and model are refitted on the
/// training part of every fold; `table` rows correspond to `vins` and `y`.
pub fn cross_validate<S: AsRef<str>>(
    table: &FeatureTable,
    y: &[u8],
    vins: &[S],
    folds: &FoldPlan,
    recipe: &RecipeSpec,
    model: &ModelSpec,
) -> Result<CvResult> {
    check_rows(table, y, vins)?;
    let row_folds = folds.row_folds(vins)?;
    let prepared = prepare_folds(table, y, &row_folds, folds.k, recipe)?;
    let mut oof = vec![0.0; y.len()];
    for fold in &prepared {
        let fit = fit_from(
            fold.x_train.view(),
            &fold.y_train,
            model.lambda,
            model.alpha,
            &model.solver,
            None,
        )?;
        let pred = fit.predict_rows(fold.x_valid.view())?;
        for (&i, p) in fold.valid_rows.iter().zip(pred) {
            oof[i] = p;
        }
    }
    let (auc, sd_auc, fold_aucs) = summarize(&oof, y, &prepared)?;
    Ok(CvResult {
        auc,
        sd_auc,
        fold_aucs,
        oof,
        recipes: prepared.into_iter().map(|f| f.recipe).collect(),
    })
}

/// Grid search over `(λ, α)`. Each fold's recipe is fitted once; each α
/// runs a warm-started path from the largest λ down.
pub fn tune_enet<S: AsRef<str>>(
    table: &FeatureTable,
    y: &[u8],
    vins: &[S],
    folds: &FoldPlan,
    recipe: &RecipeSpec,
    lambdas: &GridSpec,
    alphas: &GridSpec,
    solver: &SolverConfig,
) -> Result<TuneResult> {
    check_rows(table, y, vins)?;
    let row_folds = folds.row_folds(vins)?;
    let prepared = prepare_folds(table, y, &row_folds, folds.k, recipe)?;
    let n = y.len();
    let nl = lambdas.len();

    // per alpha: oof predictions for every lambda
    let per_alpha: Vec<Vec<Vec<f64>>> = alphas
        .values
        .par_iter()
        .map(|&alpha| {
            let mut oof = vec![vec![0.0; n]; nl];
            for fold in &prepared {
                let mut warm: Option<Array1<f64>> = None;
                for li in (0..nl).rev() {
                    let fit = fit_from(
                        fold.x_train.view(),
                        &fold.y_train,
                        lambdas.values[li],
                        alpha,
                        solver,
                        warm.as_ref().map(|b| b.view()),
                    )?;
                    let pred = fit.predict_rows(fold.x_valid.view())?;
                    for (&i, p) in fold.valid_rows.iter().zip(pred) {
                        oof[li][i] = p;
                    }
                    warm = Some(fit.coefficients);
                }
            }
            Ok(oof)
        })
        .collect::<Result<_>>()?;

    let mut points = Vec::with_capacity(nl * alphas.len());
    for (ai, &alpha) in alphas.values.iter().enumerate() {
        for (li, &lambda) in lambdas.values.iter().enumerate() {
            let (mean_auc, sd_auc, _) = summarize(&per_alpha[ai][li], y, &prepared)?;
            points.push(GridPoint {
                values: vec![lambda, alpha],
                mean_auc,
                sd_auc,
            });
        }
    }
    // ties go to the larger lambda, then the larger alpha
    let best = (0..points.len())
        .max_by(|&a, &b| {
            let (pa, pb) = (&points[a], &points[b]);
            pa.mean_auc
                .total_cmp(&pb.mean_auc)
                .then(pa.values[0].total_cmp(&pb.values[0]))
                .then(pa.values[1].total_cmp(&pb.values[1]))
        })
        .expect("grid is non-empty");
    Ok(TuneResult {
        names: vec![lambdas.name.clone(), alphas.name.clone()],
        points,
        best,
    })
}

pub fn local_detector(
    algorithm: Algorithm,
    value: f64,
    num_trees: usize,
    ridge_eps: f64,
) -> LocalDetector {
    match algorithm {
        Algorithm::Mahalanobis => LocalDetector::Mahalanobis { ridge_eps },
        Algorithm::Lof => LocalDetector::Lof { k_frac: value },
        Algorithm::IForest => LocalDetector::IForest {
            b_frac: value,
            num_trees,
        },
    }
}

pub fn global_detector(
    algorithm: Algorithm,
    value: f64,
    num_trees: usize,
    ridge_eps: f64,
) -> GlobalDetector {
    match algorithm {
        Algorithm::Mahalanobis => GlobalDetector::Mahalanobis { ridge_eps },
        Algorithm::Lof => GlobalDetector::Lof {
            k: value.round() as usize,
        },
        Algorithm::IForest => GlobalDetector::IForest {
            b: value.round() as usize,
            num_trees,
        },
    }
}

/// Detector grid search: for every grid value, profile the training
/// vehicles, extract the 66 telematics features, and cross-validate a
/// non-penalized logistic regression on them alone. Ties go to the
/// smaller value.
#[allow(clippy::too_many_arguments)]
pub fn tune_detector(
    scheme: Scheme,
    algorithm: Algorithm,
    grid: &GridSpec,
    trips_by_vin: &BTreeMap<String, Vec<TripRecord>>,
    labels: &BTreeMap<String, u8>,
    folds: &FoldPlan,
    num_trees: usize,
    seed: u64,
) -> Result<TuneResult> {
    let vins: Vec<String> = folds.assignments.keys().cloned().collect();
    let mut train: BTreeMap<String, Vec<TripRecord>> = BTreeMap::new();
    let mut y = Vec::with_capacity(vins.len());
    for v in &vins {
        let trips = trips_by_vin
            .get(v)
            .ok_or_else(|| Error::Validation(format!("vehicle `{v}` has no trips")))?;
        train.insert(v.clone(), trips.clone());
        y.push(
            *labels
                .get(v)
                .ok_or_else(|| Error::Validation(format!("vehicle `{v}` has no label")))?,
        );
    }
    let all_trips: Vec<TripRecord> = train.values().flatten().cloned().collect();
    let global_matrix = match scheme {
        Scheme::Global => Some(derive_attributes(&all_trips)),
        Scheme::Local => None,
    };
    let recipe = RecipeSpec::default();
    let model = ModelSpec::unpenalized();

    let points: Vec<GridPoint> = grid
        .values
        .par_iter()
        .map(|&value| {
            let profiles = match scheme {
                Scheme::Local => local_profiles(
                    &train,
                    local_detector(algorithm, value, num_trees, 0.0),
                    seed,
                )?,
                Scheme::Global => global_profiles(
                    global_matrix.as_ref().expect("built for the global scheme"),
                    None,
                    global_detector(algorithm, value, num_trees, 0.0),
                    seed,
                )?,
            };
            let table = telematics_table(&profile_features(&profiles)?, &vins)?;
            let cv = cross_validate(&table, &y, &vins, folds, &recipe, &model)?;
            Ok(GridPoint {
                values: vec![value],
                mean_auc: cv.auc,
                sd_auc: cv.sd_auc,
            })
        })
        .collect::<Result<_>>()?;

    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        if p.mean_auc > points[best].mean_auc {
            best = i;
        }
    }
    Ok(TuneResult {
        names: vec![grid.name.clone()],
        points,
        best,
    })
}
