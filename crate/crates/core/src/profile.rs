//! Routine (local) and peculiarity (global) profiles, and the quantile
//! features extracted from them.
//!
//! In the local scheme every vehicle is normalized, fitted, and scored on
//! its own trips only. In the global scheme a single model is fitted on all
//! training trips and every trip, training or not, is scored against it.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use log::warn;
use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{Algorithm, IsolationForest, LofModel, LofParams, MahalanobisModel};
use crate::error::{Error, Result};
use crate::features::{
    apply_normalizer, derive_attributes, fit_normalizer, is_degenerate, mean_std, Normalizer,
    TripFeatureMatrix, ATTRIBUTE_NAMES,
};
use crate::recipe::FeatureTable;
use crate::trips::TripRecord;

pub const NUM_QUANTILES: usize = 11;
pub const NUM_INTERACTIONS: usize = NUM_QUANTILES * (NUM_QUANTILES - 1) / 2;
pub const NUM_TELEMATICS_FEATURES: usize = NUM_QUANTILES + NUM_INTERACTIONS;

/// Vehicles with fewer trips than this get a constant zero local profile.
pub const MIN_LOCAL_TRIPS: usize = 5;

/// Ridge used when a vehicle's own covariance turns out singular.
pub const LOCAL_FALLBACK_RIDGE: f64 = 1e-6;

pub const DEFAULT_NUM_TREES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Local,
    Global,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Local => "local",
            Scheme::Global => "global",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "local" => Ok(Scheme::Local),
            "global" => Ok(Scheme::Global),
            other => Err(Error::arg(format!("unknown scheme {other:?}"))),
        }
    }
}

/// A vehicle's anomaly scores, one per trip, in `trip_id` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyProfile {
    pub vin: String,
    pub scheme: Scheme,
    pub algorithm: Algorithm,
    pub trip_ids: Vec<u32>,
    pub scores: Vec<f64>,
}

/// Detector settings for the local scheme; sizes are fractions of each
/// vehicle's trip count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LocalDetector {
    Mahalanobis { ridge_eps: f64 },
    Lof { k_frac: f64 },
    IForest { b_frac: f64, num_trees: usize },
}

/// Detector settings for the global scheme; sizes are absolute trip counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GlobalDetector {
    Mahalanobis { ridge_eps: f64 },
    Lof { k: usize },
    IForest { b: usize, num_trees: usize },
}

impl LocalDetector {
    pub fn algorithm(&self) -> Algorithm {
        match self {
            LocalDetector::Mahalanobis { .. } => Algorithm::Mahalanobis,
            LocalDetector::Lof { .. } => Algorithm::Lof,
            LocalDetector::IForest { .. } => Algorithm::IForest,
        }
    }

    /// Neighborhood size for a vehicle with `n` trips.
    pub fn neighbors_for(k_frac: f64, n: usize) -> usize {
        ((k_frac * n as f64).round() as usize).max(1)
    }

    /// Per-tree sample size for a vehicle with `n` trips.
    pub fn sample_size_for(b_frac: f64, n: usize) -> usize {
        ((b_frac * n as f64).round() as usize).max(2)
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LocalDetector::Mahalanobis { ridge_eps } if !(ridge_eps >= 0.0) => {
                Err(Error::arg("ridge must be >= 0"))
            }
            LocalDetector::Lof { k_frac } if !(k_frac > 0.0 && k_frac <= 1.0) => Err(Error::arg(
                format!("k_frac must lie in (0, 1], got {k_frac}"),
            )),
            LocalDetector::IForest { b_frac, num_trees }
                if !(b_frac > 0.0 && b_frac <= 1.0) || num_trees == 0 =>
            {
                Err(Error::arg(format!(
                    "b_frac must lie in (0, 1] and trees >= 1, got {b_frac}"
                )))
            }
            _ => Ok(()),
        }
    }
}

impl GlobalDetector {
    pub fn algorithm(&self) -> Algorithm {
        match self {
            GlobalDetector::Mahalanobis { .. } => Algorithm::Mahalanobis,
            GlobalDetector::Lof { .. } => Algorithm::Lof,
            GlobalDetector::IForest { .. } => Algorithm::IForest,
        }
    }
}

/// Stable 64-bit mix of the master seed and a vehicle id, so a vehicle's
/// randomness does not depend on which other vehicles are present.
fn vehicle_seed(seed: u64, vin: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in vin.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Normalizes the non-constant attribute columns of one vehicle. Constant
/// columns carry no information within the vehicle and are dropped.
fn normalize_within(raw: ArrayView2<f64>) -> Array2<f64> {
    let keep: Vec<usize> = raw
        .axis_iter(Axis(1))
        .enumerate()
        .filter(|(_, col)| {
            let (m, s) = mean_std(col.iter());
            !is_degenerate(m, s)
        })
        .map(|(j, _)| j)
        .collect();
    let reduced = raw.select(Axis(1), &keep);
    if keep.is_empty() {
        return reduced;
    }
    let names: Vec<&str> = keep.iter().map(|&j| ATTRIBUTE_NAMES[j]).collect();
    Normalizer::fit(reduced.view(), &names)
        .and_then(|n| n.apply(reduced.view()))
        .expect("constant columns were removed")
}

/// Smallest trip count for which the local detector is run.
fn local_minimum(detector: &LocalDetector, n: usize) -> usize {
    let required = match *detector {
        LocalDetector::Mahalanobis { .. } => ATTRIBUTE_NAMES.len() + 1,
        LocalDetector::Lof { k_frac } => LocalDetector::neighbors_for(k_frac, n) + 1,
        LocalDetector::IForest { .. } => 2,
    };
    required.max(MIN_LOCAL_TRIPS)
}

fn local_scores(
    vin: &str,
    trips: &[TripRecord],
    detector: &LocalDetector,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = trips.len();
    if n < local_minimum(detector, n) {
        warn!(
            "vehicle {vin}: {n} trips is too few for local {}; using a zero profile",
            detector.algorithm()
        );
        return Ok(vec![0.0; n]);
    }
    let raw = derive_attributes(trips);
    let z = normalize_within(raw.attributes.view());
    match *detector {
        LocalDetector::Mahalanobis { ridge_eps } => {
            let model = match MahalanobisModel::fit(z.view(), ridge_eps) {
                Err(Error::Singular { .. }) => {
                    warn!("vehicle {vin}: singular trip covariance, refitting with ridge {LOCAL_FALLBACK_RIDGE}");
                    MahalanobisModel::fit(z.view(), ridge_eps.max(LOCAL_FALLBACK_RIDGE))?
                }
                other => other?,
            };
            model.score_rows(z.view())
        }
        LocalDetector::Lof { k_frac } => {
            let k = LocalDetector::neighbors_for(k_frac, n);
            Ok(LofModel::fit(z.view(), LofParams { k })?
                .training_scores()
                .to_vec())
        }
        LocalDetector::IForest { b_frac, num_trees } => {
            let b = LocalDetector::sample_size_for(b_frac, n);
            let forest = IsolationForest::fit(z.view(), num_trees, b, vehicle_seed(seed, vin))?;
            forest.score_rows(z.view())
        }
    }
}

/// Routine profiles: each vehicle fitted and scored on its own trips.
pub fn local_profiles(
    trips_by_vin: &BTreeMap<String, Vec<TripRecord>>,
    detector: LocalDetector,
    seed: u64,
) -> Result<BTreeMap<String, AnomalyProfile>> {
    detector.validate()?;
    let entries: Vec<(&String, &Vec<TripRecord>)> = trips_by_vin.iter().collect();
    let profiles: Result<Vec<AnomalyProfile>> = entries
        .par_iter()
        .map(|(vin, trips)| {
            let mut trips = trips.to_vec();
            trips.sort_by_key(|t| t.trip_id);
            let scores = local_scores(vin, &trips, &detector, seed)?;
            Ok(AnomalyProfile {
                vin: vin.to_string(),
                scheme: Scheme::Local,
                algorithm: detector.algorithm(),
                trip_ids: trips.iter().map(|t| t.trip_id).collect(),
                scores,
            })
        })
        .collect();
    Ok(profiles?.into_iter().map(|p| (p.vin.clone(), p)).collect())
}

#[derive(Debug, Clone)]
enum FittedDetector {
    Mahalanobis(MahalanobisModel),
    Lof(LofModel),
    IForest(IsolationForest),
}

/// A detector fitted once on the normalized training trips of the whole
/// portfolio.
#[derive(Debug, Clone)]
pub struct GlobalModel {
    pub normalizer: Normalizer,
    algorithm: Algorithm,
    detector: FittedDetector,
    training_scores: Vec<f64>,
}

impl GlobalModel {
    /// `train` holds raw (un-normalized) attributes.
    pub fn fit(train: &TripFeatureMatrix, detector: GlobalDetector, seed: u64) -> Result<Self> {
        let normalizer = fit_normalizer(train)?;
        let z = normalizer.apply(train.attributes.view())?;
        let n = z.nrows();
        let (fitted, training_scores) = match detector {
            GlobalDetector::Mahalanobis { ridge_eps } => {
                let m = MahalanobisModel::fit(z.view(), ridge_eps)?;
                let s = m.score_rows(z.view())?;
                (FittedDetector::Mahalanobis(m), s)
            }
            GlobalDetector::Lof { k } => {
                if k >= n {
                    return Err(Error::arg(format!(
                        "global LOF k = {k} must be below the {n} training trips"
                    )));
                }
                let m = LofModel::fit(z.view(), LofParams { k })?;
                let s = m.training_scores().to_vec();
                (FittedDetector::Lof(m), s)
            }
            GlobalDetector::IForest { b, num_trees } => {
                let f = IsolationForest::fit(z.view(), num_trees, b, seed)?;
                let s = f.score_rows(z.view())?;
                (FittedDetector::IForest(f), s)
            }
        };
        Ok(GlobalModel {
            normalizer,
            algorithm: detector.algorithm(),
            detector: fitted,
            training_scores,
        })
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    /// Scores of the training trips in fit order. LOF scores exclude each
    /// trip from its own neighborhood.
    pub fn training_scores(&self) -> &[f64] {
        &self.training_scores
    }

    /// Scores trips that were not part of the fit. `raw` is un-normalized.
    pub fn score(&self, raw: &TripFeatureMatrix) -> Result<Vec<f64>> {
        let z = self.normalizer.apply(raw.attributes.view())?;
        match &self.detector {
            FittedDetector::Mahalanobis(m) => m.score_rows(z.view()),
            FittedDetector::Lof(m) => m.score_rows(z.view()),
            FittedDetector::IForest(f) => f.score_rows(z.view()),
        }
    }
}

fn regroup(
    matrix: &TripFeatureMatrix,
    scores: &[f64],
    algorithm: Algorithm,
    out: &mut BTreeMap<String, AnomalyProfile>,
) {
    for (i, vin) in matrix.vins.iter().enumerate() {
        let p = out.entry(vin.clone()).or_insert_with(|| AnomalyProfile {
            vin: vin.clone(),
            scheme: Scheme::Global,
            algorithm,
            trip_ids: Vec::new(),
            scores: Vec::new(),
        });
        p.trip_ids.push(matrix.trip_ids[i]);
        p.scores.push(scores[i]);
    }
}

/// Peculiarity profiles. The model is fitted on `train` only; trips in
/// `others` (e.g. test vehicles) are scored against it, never refitted.
pub fn global_profiles(
    train: &TripFeatureMatrix,
    others: Option<&TripFeatureMatrix>,
    detector: GlobalDetector,
    seed: u64,
) -> Result<BTreeMap<String, AnomalyProfile>> {
    let model = GlobalModel::fit(train, detector, seed)?;
    let mut out = BTreeMap::new();
    regroup(train, model.training_scores(), model.algorithm(), &mut out);
    if let Some(others) = others {
        let scores = model.score(others)?;
        regroup(others, &scores, model.algorithm(), &mut out);
    }
    for p in out.values_mut() {
        let mut pairs: Vec<(u32, f64)> = p
            .trip_ids
            .iter()
            .copied()
            .zip(p.scores.iter().copied())
            .collect();
        pairs.sort_by_key(|&(id, _)| id);
        p.trip_ids = pairs.iter().map(|&(id, _)| id).collect();
        p.scores = pairs.iter().map(|&(_, s)| s).collect();
    }
    Ok(out)
}

/// Convenience wrapper: normalizes nothing, just re-exports the normalized
/// trip matrix for a global fit (useful for reporting).
pub fn normalized_training_matrix(train: &TripFeatureMatrix) -> Result<TripFeatureMatrix> {
    apply_normalizer(&fit_normalizer(train)?, train)
}

/// Percentile labels `q0, q10, ..., q100`.
pub fn quantile_names() -> Vec<String> {
    (0..NUM_QUANTILES).map(|i| format!("q{}", i * 10)).collect()
}

/// Interaction labels `q0_x_q10, q0_x_q20, ..., q90_x_q100`.
pub fn interaction_names() -> Vec<String> {
    let q = quantile_names();
    let mut out = Vec::with_capacity(NUM_INTERACTIONS);
    for i in 0..NUM_QUANTILES {
        for j in i + 1..NUM_QUANTILES {
            out.push(format!("{}_x_{}", q[i], q[j]));
        }
    }
    out
}

/// The 66 telematics feature names: quantiles then interactions.
pub fn telematics_feature_names() -> Vec<String> {
    let mut names = quantile_names();
    names.extend(interaction_names());
    names
}

/// 0th, 10th, ..., 100th percentiles with linear interpolation between
/// order statistics (the `(n - 1) p` rule).
pub fn extract_quantiles(scores: &[f64]) -> Result<[f64; NUM_QUANTILES]> {
    if scores.is_empty() {
        return Err(Error::arg("cannot take quantiles of an empty profile"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut q = [0.0; NUM_QUANTILES];
    for (i, slot) in q.iter_mut().enumerate() {
        let h = (n - 1) as f64 * i as f64 / 10.0;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        *slot = sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]);
    }
    // q0 and q100 are exactly min and max
    q[0] = sorted[0];
    q[NUM_QUANTILES - 1] = sorted[n - 1];
    Ok(q)
}

/// Products `q_i * q_j` for `i < j` in lexicographic order.
pub fn pairwise_interactions(quantiles: &[f64]) -> Result<Vec<f64>> {
    if quantiles.len() != NUM_QUANTILES {
        return Err(Error::Dimension {
            expected: NUM_QUANTILES,
            got: quantiles.len(),
        });
    }
    let mut out = Vec::with_capacity(NUM_INTERACTIONS);
    for i in 0..NUM_QUANTILES {
        for j in i + 1..NUM_QUANTILES {
            out.push(quantiles[i] * quantiles[j]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileFeatures {
    pub vin: String,
    pub quantiles: [f64; NUM_QUANTILES],
    pub interactions: Vec<f64>,
}

impl ProfileFeatures {
    pub fn from_profile(profile: &AnomalyProfile) -> Result<Self> {
        let quantiles = extract_quantiles(&profile.scores)?;
        Ok(ProfileFeatures {
            vin: profile.vin.clone(),
            quantiles,
            interactions: pairwise_interactions(&quantiles)?,
        })
    }

    /// Quantiles followed by interactions (66 values).
    pub fn values(&self) -> Vec<f64> {
        let mut v = self.quantiles.to_vec();
        v.extend_from_slice(&self.interactions);
        v
    }
}

pub fn profile_features(
    profiles: &BTreeMap<String, AnomalyProfile>,
) -> Result<BTreeMap<String, ProfileFeatures>> {
    profiles
        .iter()
        .map(|(vin, p)| Ok((vin.clone(), ProfileFeatures::from_profile(p)?)))
        .collect()
}

/// The 66 telematics columns for `vins`, in that row order.
pub fn telematics_table<S: AsRef<str>>(
    features: &BTreeMap<String, ProfileFeatures>,
    vins: &[S],
) -> Result<FeatureTable> {
    let rows: Vec<Vec<f64>> = vins
        .iter()
        .map(|v| {
            features
                .get(v.as_ref())
                .map(ProfileFeatures::values)
                .ok_or_else(|| {
                    Error::Validation(format!("vehicle `{}` has no profile features", v.as_ref()))
                })
        })
        .collect::<Result<_>>()?;
    let mut table = FeatureTable::new();
    for (j, name) in telematics_feature_names().into_iter().enumerate() {
        table.push_numeric(name, rows.iter().map(|r| r[j]).collect())?;
    }
    Ok(table)
}

pub fn write_profiles_csv<'a, W: Write>(
    writer: W,
    profiles: impl IntoIterator<Item = &'a AnomalyProfile>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["vin", "scheme", "algorithm", "trip_id", "score"])?;
    for p in profiles {
        for (id, s) in p.trip_ids.iter().zip(&p.scores) {
            w.write_record([
                p.vin.as_str(),
                p.scheme.as_str(),
                p.algorithm.as_str(),
                &id.to_string(),
                &s.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<profile writer>", e))?;
    Ok(())
}

pub fn read_profiles_csv<R: Read>(reader: R) -> Result<BTreeMap<String, AnomalyProfile>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out: BTreeMap<String, AnomalyProfile> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |m: &str| Error::Parse {
            line,
            message: m.to_string(),
        };
        let vin = rec.get(0).ok_or_else(|| bad("missing vin"))?.to_string();
        let scheme: Scheme = rec.get(1).ok_or_else(|| bad("missing scheme"))?.parse()?;
        let algorithm: Algorithm = rec
            .get(2)
            .ok_or_else(|| bad("missing algorithm"))?
            .parse()?;
        let trip_id: u32 = rec
            .get(3)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad trip_id"))?;
        let score: f64 = rec
            .get(4)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad score"))?;
        let p = out.entry(vin.clone()).or_insert_with(|| AnomalyProfile {
            vin,
            scheme,
            algorithm,
            trip_ids: Vec::new(),
            scores: Vec::new(),
        });
        p.trip_ids.push(trip_id);
        p.scores.push(score);
    }
    Ok(out)
}

pub fn write_features_csv<'a, W: Write>(
    writer: W,
    features: impl IntoIterator<Item = &'a ProfileFeatures>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["vin".to_string()];
    header.extend(telematics_feature_names());
    w.write_record(&header)?;
    for f in features {
        let mut rec = vec![f.vin.clone()];
        rec.extend(f.values().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<feature writer>", e))?;
    Ok(())
}

pub fn read_features_csv<R: Read>(reader: R) -> Result<BTreeMap<String, ProfileFeatures>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut expected = vec!["vin".to_string()];
    expected.extend(telematics_feature_names());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != expected {
        return Err(Error::Header {
            expected: expected.join(","),
            found: header.join(","),
        });
    }
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let values: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
        let mut quantiles = [0.0; NUM_QUANTILES];
        quantiles.copy_from_slice(&values[..NUM_QUANTILES]);
        let vin = rec[0].to_string();
        out.insert(
            vin.clone(),
            ProfileFeatures {
                vin,
                quantiles,
                interactions: values[NUM_QUANTILES..].to_vec(),
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trips::Timestamp;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_trips(vin: &str, n: usize, seed: u64) -> Vec<TripRecord> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let dep = 1_500_000_000 + rng.random_range(0..30_000_000i64);
                TripRecord {
                    vin: vin.into(),
                    trip_id: i as u32 + 1,
                    departure: Timestamp(dep),
                    arrival: Timestamp(dep + rng.random_range(60..5000)),
                    distance_km: rng.random_range(0.5..60.0),
                    max_speed_kmh: rng.random_range(20.0..130.0),
                }
            })
            .collect()
    }

    #[test]
    fn fractional_sizes() {
        assert_eq!(LocalDetector::neighbors_for(0.35, 100), 35);
        assert_eq!(LocalDetector::sample_size_for(0.85, 200), 170);
        assert_eq!(LocalDetector::neighbors_for(0.05, 4), 1);
        assert_eq!(LocalDetector::sample_size_for(0.05, 10), 2);
    }

    #[test]
    fn identical_trips_score_zero_under_mahalanobis() {
        let t = random_trips("A", 1, 1)[0].clone();
        let trips: Vec<TripRecord> = (0..20)
            .map(|i| TripRecord {
                trip_id: i + 1,
                ..t.clone()
            })
            .collect();
        let map = BTreeMap::from([("A".to_string(), trips)]);
        let p = local_profiles(&map, LocalDetector::Mahalanobis { ridge_eps: 0.0 }, 0).unwrap();
        assert!(p["A"].scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn short_vehicles_get_zero_profiles() {
        let map = BTreeMap::from([("A".to_string(), random_trips("A", 3, 2))]);
        for det in [
            LocalDetector::Mahalanobis { ridge_eps: 0.0 },
            LocalDetector::Lof { k_frac: 0.3 },
            LocalDetector::IForest {
                b_frac: 0.5,
                num_trees: 10,
            },
        ] {
            let p = local_profiles(&map, det, 0).unwrap();
            assert_eq!(p["A"].scores, vec![0.0; 3]);
        }
    }

    #[test]
    fn local_profiles_are_isolated_per_vehicle() {
        let a = random_trips("A", 60, 10);
        let b1 = random_trips("B", 40, 11);
        let b2 = random_trips("B", 55, 12);
        for det in [
            LocalDetector::Mahalanobis { ridge_eps: 0.0 },
            LocalDetector::Lof { k_frac: 0.2 },
            LocalDetector::IForest {
                b_frac: 0.5,
                num_trees: 20,
            },
        ] {
            let m1 = BTreeMap::from([("A".to_string(), a.clone()), ("B".to_string(), b1.clone())]);
            let m2 = BTreeMap::from([("A".to_string(), a.clone()), ("B".to_string(), b2.clone())]);
            let p1 = local_profiles(&m1, det, 5).unwrap();
            let p2 = local_profiles(&m2, det, 5).unwrap();
            assert_eq!(p1["A"], p2["A"]);
            assert_eq!(p1["A"].scores.len(), 60);
        }
    }

    #[test]
    fn global_profiles_cover_train_and_other_trips() {
        let mut train = random_trips("A", 80, 1);
        train.extend(random_trips("B", 70, 2));
        let test = random_trips("C", 30, 3);
        let tm = derive_attributes(&train);
        let om = derive_attributes(&test);
        let p = global_profiles(&tm, Some(&om), GlobalDetector::Lof { k: 10 }, 0).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p["C"].scores.len(), 30);
        assert!(p.values().all(|v| v.scores.iter().all(|s| s.is_finite())));
        assert!(global_profiles(&tm, None, GlobalDetector::Lof { k: 150 }, 0).is_err());
        assert!(global_profiles(
            &tm,
            None,
            GlobalDetector::IForest {
                b: 151,
                num_trees: 5
            },
            0
        )
        .is_err());
    }

    #[test]
    fn global_scoring_is_a_pure_function_of_model_and_trip() {
        let train = derive_attributes(&random_trips("A", 100, 4));
        let test = derive_attributes(&random_trips("C", 10, 5));
        let model = GlobalModel::fit(
            &train,
            GlobalDetector::IForest {
                b: 64,
                num_trees: 30,
            },
            9,
        )
        .unwrap();
        let all = model.score(&test).unwrap();
        let one = model.score(&test.filter_vins(|_| true)).unwrap();
        assert_eq!(all, one);
    }

    #[test]
    fn dense_duplicates_score_low_under_global_iforest() {
        let mut trips = random_trips("A", 300, 6);
        let base = trips[0].clone();
        for i in 0..2000 {
            trips.push(TripRecord {
                vin: "D".into(),
                trip_id: i + 1,
                ..base.clone()
            });
        }
        let m = derive_attributes(&trips);
        let p = global_profiles(
            &m,
            None,
            GlobalDetector::IForest {
                b: 256,
                num_trees: 100,
            },
            1,
        )
        .unwrap();
        let dup = p["D"].scores[0];
        let others = &p["A"].scores;
        let below = others.iter().filter(|&&s| s > dup).count();
        assert!(below as f64 >= 0.95 * others.len() as f64, "{below}");
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(extract_quantiles(&[2.5; 7]).unwrap(), [2.5; 11]);
        let v: Vec<f64> = (0..=10).map(|i| i as f64).collect();
        let q = extract_quantiles(&v).unwrap();
        for (i, x) in q.iter().enumerate() {
            assert!((x - i as f64).abs() < 1e-12);
        }
        let q = extract_quantiles(&[100.0, 1.0, 2.0]).unwrap();
        assert_eq!((q[0], q[5], q[10]), (1.0, 2.0, 100.0));
        assert!(extract_quantiles(&[]).is_err());
    }

    #[test]
    fn interaction_examples() {
        assert_eq!(pairwise_interactions(&[1.0; 11]).unwrap(), vec![1.0; 55]);
        let mut q = [3.0; 11];
        q[0] = 0.0;
        let inter = pairwise_interactions(&q).unwrap();
        assert!(inter[..10].iter().all(|&v| v == 0.0));
        let q: Vec<f64> = (1..=11).map(|i| i as f64).collect();
        let inter = pairwise_interactions(&q).unwrap();
        assert_eq!(inter[0], 2.0);
        assert_eq!(inter[54], 110.0);
        assert!(pairwise_interactions(&[1.0; 10]).is_err());
    }

    #[test]
    fn interaction_names_re_derive_ordering() {
        let names = interaction_names();
        assert_eq!(names.len(), 55);
        assert_eq!(names[0], "q0_x_q10");
        assert_eq!(names[1], "q0_x_q20");
        assert_eq!(names[54], "q90_x_q100");
        let q: Vec<f64> = (0..11).map(|i| (i as f64 + 1.0) * 1.5).collect();
        let inter = pairwise_interactions(&q).unwrap();
        for (name, v) in names.iter().zip(&inter) {
            let (a, b) = name.split_once("_x_").unwrap();
            let ia: usize = a[1..].parse::<usize>().unwrap() / 10;
            let ib: usize = b[1..].parse::<usize>().unwrap() / 10;
            assert_eq!(*v, q[ia] * q[ib]);
        }
    }

    #[test]
    fn csv_exports_round_trip() {
        let map = BTreeMap::from([("A".to_string(), random_trips("A", 30, 1))]);
        let profiles = local_profiles(&map, LocalDetector::Lof { k_frac: 0.2 }, 0).unwrap();
        let mut buf = Vec::new();
        write_profiles_csv(&mut buf, profiles.values()).unwrap();
        assert_eq!(read_profiles_csv(buf.as_slice()).unwrap(), profiles);

        let feats = profile_features(&profiles).unwrap();
        let mut buf = Vec::new();
        write_features_csv(&mut buf, feats.values()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap().split(',').count(), 67);
        assert_eq!(read_features_csv(buf.as_slice()).unwrap(), feats);
    }

    proptest! {
        #[test]
        fn quantiles_are_monotone(scores in proptest::collection::vec(-1e6f64..1e6, 1..200)) {
            let q = extract_quantiles(&scores).unwrap();
            for w in q.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(q[0], min);
            prop_assert_eq!(q[10], max);
        }
    }
}
