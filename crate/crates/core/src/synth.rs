//! Synthetic portfolios with known routine and peculiarity structure.
//!
//! Routine vehicles repeat a few tight trip templates. Other vehicles draw
//! from a population mixture of commutes, errands and weekend outings.
//! Each vehicle has a latent peculiarity in `[0, 1]`; it is the chance
//! scale of "peculiar" trips (night departures, long distance, high speed)
//! and, through `peculiarity_claim_weight`, of claims.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trips::{write_policies, write_trips, PolicyRecord, Timestamp, TripRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_vehicles: usize,
    /// Inclusive range of trips per vehicle.
    pub trips_per_vehicle: (usize, usize),
    pub fraction_routine: f64,
    pub fraction_peculiar: f64,
    /// Logit change per unit of latent peculiarity.
    pub peculiarity_claim_weight: f64,
    /// Logit change per standard deviation of the policy risk score.
    pub trf_claim_weight: f64,
    pub base_claim_rate: f64,
    pub missing_commute_rate: f64,
    /// Length of the observation window in days.
    pub days: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_vehicles: 1000,
            trips_per_vehicle: (200, 800),
            fraction_routine: 0.3,
            fraction_peculiar: 0.2,
            peculiarity_claim_weight: 5.0,
            trf_claim_weight: 0.0,
            base_claim_rate: 0.25,
            missing_commute_rate: 0.215,
            days: 365,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        if self.num_vehicles == 0 {
            return Err(Error::arg("need at least one vehicle"));
        }
        let (lo, hi) = self.trips_per_vehicle;
        if lo == 0 || lo > hi {
            return Err(Error::arg(format!(
                "bad trips-per-vehicle range ({lo}, {hi})"
            )));
        }
        if !frac(self.fraction_routine)
            || !frac(self.fraction_peculiar)
            || !frac(self.missing_commute_rate)
        {
            return Err(Error::arg("fractions must lie in [0, 1]"));
        }
        if !(self.base_claim_rate > 0.0 && self.base_claim_rate < 1.0) {
            return Err(Error::arg("base claim rate must lie in (0, 1)"));
        }
        if !self.peculiarity_claim_weight.is_finite() || !self.trf_claim_weight.is_finite() {
            return Err(Error::arg("claim weights must be finite"));
        }
        if self.days == 0 {
            return Err(Error::arg("observation window must be at least one day"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub vin: String,
    pub is_routine: bool,
    pub latent_peculiarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Portfolio {
    pub trips: Vec<TripRecord>,
    pub policies: Vec<PolicyRecord>,
    pub truth: Vec<GroundTruth>,
}

impl Portfolio {
    /// Writes `trips.csv`, `policies.csv` and `ground_truth.csv`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let create = |name: &str| {
            let path = dir.join(name);
            File::create(&path)
                .map(BufWriter::new)
                .map_err(|e| Error::io(path, e))
        };
        write_trips(create("trips.csv")?, &self.trips)?;
        write_policies(create("policies.csv")?, &self.policies)?;
        write_ground_truth(create("ground_truth.csv")?, &self.truth)
    }
}

pub fn write_ground_truth<W: Write>(writer: W, truth: &[GroundTruth]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["vin", "is_routine", "latent_peculiarity"])?;
    for t in truth {
        w.write_record([
            t.vin.as_str(),
            if t.is_routine { "1" } else { "0" },
            &t.latent_peculiarity.to_string(),
        ])?;
    }
    w.flush()
        .map_err(|e| Error::io("<ground truth writer>", e))?;
    Ok(())
}

fn vehicle_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One trip before it is placed on the calendar.
struct Draft {
    day: u32,
    second_of_day: u32,
    distance_km: f64,
    avg_speed: f64,
    max_speed: f64,
}

/// A routine vehicle's recurring trip.
struct Template {
    weekdays: Vec<u32>,
    minute: f64,
    distance_km: f64,
    avg_speed: f64,
}

fn day_with_weekday(rng: &mut ChaCha8Rng, days: u32, weekdays: &[u32]) -> u32 {
    // day 0 is a Monday
    loop {
        let d = rng.random_range(0..days);
        if weekdays.contains(&(d % 7)) || days < 7 {
            return d;
        }
    }
}

fn seconds(minute: f64) -> u32 {
    (minute * 60.0).rem_euclid(86_400.0) as u32
}

fn population_trip(rng: &mut ChaCha8Rng, days: u32) -> Draft {
    let kind: f64 = rng.random();
    let (weekdays, minute, distance, speed): (&[u32], f64, f64, f64) = if kind < 0.45 {
        let morning = rng.random_bool(0.5);
        let m = if morning {
            rng.random_range(420.0..540.0)
        } else {
            rng.random_range(960.0..1140.0)
        };
        (
            &[0, 1, 2, 3, 4],
            m,
            rng.random_range(5.0..35.0),
            rng.random_range(35.0..65.0),
        )
    } else if kind < 0.80 {
        (
            &[0, 1, 2, 3, 4, 5, 6],
            rng.random_range(540.0..1260.0),
            rng.random_range(1.0..15.0),
            rng.random_range(25.0..45.0),
        )
    } else {
        (
            &[5, 6],
            rng.random_range(600.0..1080.0),
            rng.random_range(10.0..70.0),
            rng.random_range(40.0..80.0),
        )
    };
    let day = day_with_weekday(rng, days, weekdays);
    Draft {
        day,
        second_of_day: seconds(minute),
        distance_km: distance,
        avg_speed: speed,
        max_speed: (speed * rng.random_range(1.3..1.8)).min(125.0),
    }
}

fn peculiar_trip(rng: &mut ChaCha8Rng, days: u32) -> Draft {
    let speed = rng.random_range(85.0..120.0);
    Draft {
        day: rng.random_range(0..days),
        second_of_day: seconds(rng.random_range(0.0..300.0)),
        distance_km: rng.random_range(40.0..120.0),
        avg_speed: speed,
        max_speed: speed * rng.random_range(1.35..1.6),
    }
}

fn routine_templates(rng: &mut ChaCha8Rng) -> Vec<Template> {
    let count = rng.random_range(1..=3);
    (0..count)
        .map(|_| {
            let weekend = rng.random_bool(0.25);
            let weekdays = if weekend {
                vec![rng.random_range(5..7)]
            } else {
                (0..5).collect()
            };
            Template {
                weekdays,
                minute: rng.random_range(360.0..1200.0),
                distance_km: rng.random_range(3.0..40.0),
                avg_speed: rng.random_range(30.0..65.0),
            }
        })
        .collect()
}

fn template_trip(rng: &mut ChaCha8Rng, days: u32, t: &Template) -> Draft {
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    let speed = t.avg_speed * (1.0 + 0.03 * jitter.sample(rng));
    Draft {
        day: day_with_weekday(rng, days, &t.weekdays),
        second_of_day: seconds(t.minute + 10.0 * jitter.sample(rng)),
        distance_km: (t.distance_km * (1.0 + 0.03 * jitter.sample(rng))).max(0.1),
        avg_speed: speed,
        max_speed: (speed * rng.random_range(1.35..1.45)).min(125.0),
    }
}

struct Vehicle {
    trips: Vec<TripRecord>,
    policy: PolicyRecord,
    truth: GroundTruth,
}

fn choose<'a>(rng: &mut ChaCha8Rng, options: &[(&'a str, f64)]) -> &'a str {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(label, p) in options {
        acc += p;
        if u < acc {
            return label;
        }
    }
    options.last().expect("options are non-empty").0
}

/// Policy attributes plus a risk score with mean 0 and unit variance under
/// the sampling distributions below.
fn policy_attributes(rng: &mut ChaCha8Rng, vin: &str, missing_rate: f64) -> (PolicyRecord, f64) {
    let annual: f64 = LogNormal::new(9.6, 0.4).expect("valid").sample(rng);
    let commute =
        (annual * 0.0012 + Normal::<f64>::new(0.0, 3.0).expect("valid").sample(rng)).max(0.5);
    let conv = Poisson::new(0.3).expect("valid").sample(rng) as u32;
    let gender = choose(rng, &[("M", 0.49), ("F", 0.48), ("U", 0.03)]);
    let marital = choose(
        rng,
        &[
            ("Married", 0.55),
            ("Single", 0.40),
            ("Divorced", 0.03),
            ("Widowed", 0.02),
        ],
    );
    let pmt = choose(
        rng,
        &[("Monthly", 0.60), ("Annual", 0.37), ("Quarterly", 0.03)],
    );
    let veh_use = choose(
        rng,
        &[("Commute", 0.50), ("Pleasure", 0.46), ("Business", 0.04)],
    );
    let veh_age = rng.random_range(0..=20) as f64;
    let years_licensed = rng.random_range(1.0..50.0f64).floor();
    let years_claim_free = (rng.random::<f64>() * years_licensed).floor();

    // standardized contributions; population means and sds are analytic
    let z_annual = (annual.ln() - 9.6) / 0.4;
    let z_conv = (conv as f64 - 0.3) / 0.3f64.sqrt();
    let z_lic = (years_licensed - 25.0) / (49.0 / 12f64.sqrt());
    let single = if marital == "Single" { 1.0 } else { 0.0 };
    let z_single = (single - 0.40) / (0.40f64 * 0.60).sqrt();
    let raw = 0.5 * z_annual + 0.5 * z_conv - 0.6 * z_lic + 0.37 * z_single;
    let score = raw / (0.25f64 + 0.25 + 0.36 + 0.37 * 0.37).sqrt();

    let policy = PolicyRecord {
        vin: vin.to_string(),
        annual_distance: annual.round(),
        commute_distance: if rng.random::<f64>() < missing_rate {
            None
        } else {
            Some((commute * 10.0).round() / 10.0)
        },
        conv_count_3_yrs_minor: conv,
        gender: gender.into(),
        marital_status: marital.into(),
        pmt_plan: pmt.into(),
        veh_age,
        veh_use: veh_use.into(),
        years_claim_free,
        years_licensed,
        claim_ind: 0,
    };
    (policy, score)
}

fn generate_vehicle(config: &SynthConfig, index: usize, origin: NaiveDateTime) -> Vehicle {
    let mut rng = vehicle_rng(config.seed, index);
    let vin = format!("V{:05}", index + 1);
    let is_routine = rng.random::<f64>() < config.fraction_routine;
    let is_peculiar = rng.random::<f64>() < config.fraction_peculiar;
    let latent = if is_peculiar {
        rng.random_range(0.3..1.0)
    } else {
        rng.random_range(0.0..0.02)
    };
    let (lo, hi) = config.trips_per_vehicle;
    let n = rng.random_range(lo..=hi);
    let templates = if is_routine {
        routine_templates(&mut rng)
    } else {
        Vec::new()
    };
    let peculiar_rate = 0.3 * latent;

    let mut drafts: Vec<Draft> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < peculiar_rate {
                peculiar_trip(&mut rng, config.days)
            } else if is_routine {
                let t = &templates[rng.random_range(0..templates.len())];
                template_trip(&mut rng, config.days, t)
            } else {
                population_trip(&mut rng, config.days)
            }
        })
        .collect();
    drafts.sort_by_key(|d| (d.day, d.second_of_day));

    let base = Timestamp::from_datetime(origin).0;
    let trips = drafts
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let departure = base + d.day as i64 * 86_400 + d.second_of_day as i64;
            let duration = ((d.distance_km / d.avg_speed) * 3600.0).round().max(30.0) as i64;
            TripRecord {
                vin: vin.clone(),
                trip_id: i as u32 + 1,
                departure: Timestamp(departure),
                arrival: Timestamp(departure + duration),
                distance_km: (d.distance_km * 10.0).round() / 10.0,
                max_speed_kmh: d.max_speed.round(),
            }
        })
        .collect();

    let (mut policy, risk) = policy_attributes(&mut rng, &vin, config.missing_commute_rate);
    let eta = logit(config.base_claim_rate)
        + config.peculiarity_claim_weight * latent
        + config.trf_claim_weight * risk;
    let p = 1.0 / (1.0 + (-eta).exp());
    policy.claim_ind = (rng.random::<f64>() < p) as u8;

    Vehicle {
        trips,
        policy,
        truth: GroundTruth {
            vin,
            is_routine,
            latent_peculiarity: latent,
        },
    }
}

pub fn generate_portfolio(config: &SynthConfig) -> Result<Portfolio> {
    config.validate()?;
    let origin = NaiveDate::from_ymd_opt(2017, 1, 2)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date");
    let vehicles: Vec<Vehicle> = (0..config.num_vehicles)
        .into_par_iter()
        .map(|i| generate_vehicle(config, i, origin))
        .collect();
    let mut out = Portfolio {
        trips: Vec::new(),
        policies: Vec::with_capacity(vehicles.len()),
        truth: Vec::with_capacity(vehicles.len()),
    };
    for v in vehicles {
        out.trips.extend(v.trips);
        out.policies.push(v.policy);
        out.truth.push(v.truth);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trips::{read_policies, read_trips};

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            num_vehicles: 60,
            trips_per_vehicle: (20, 40),
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn output_passes_validation() {
        let p = generate_portfolio(&small(1)).unwrap();
        let mut buf = Vec::new();
        write_trips(&mut buf, &p.trips).unwrap();
        assert_eq!(read_trips(buf.as_slice()).unwrap().len(), p.trips.len());
        let mut buf = Vec::new();
        write_policies(&mut buf, &p.policies).unwrap();
        assert_eq!(read_policies(buf.as_slice()).unwrap().len(), 60);
        assert!(p.trips.iter().all(|t| t.arrival.0 >= t.departure.0));
    }

    #[test]
    fn same_seed_same_files() {
        let dir = tempfile::tempdir().unwrap();
        generate_portfolio(&small(3))
            .unwrap()
            .write_to_dir(&dir.path().join("a"))
            .unwrap();
        generate_portfolio(&small(3))
            .unwrap()
            .write_to_dir(&dir.path().join("b"))
            .unwrap();
        for f in ["trips.csv", "policies.csv", "ground_truth.csv"] {
            let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
            let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
        let other = generate_portfolio(&small(4)).unwrap();
        assert_ne!(other.trips, generate_portfolio(&small(3)).unwrap().trips);
    }

    #[test]
    fn zero_weights_give_the_base_rate() {
        let cfg = SynthConfig {
            num_vehicles: 4000,
            trips_per_vehicle: (1, 2),
            peculiarity_claim_weight: 0.0,
            trf_claim_weight: 0.0,
            base_claim_rate: 0.2,
            ..SynthConfig::default()
        };
        let p = generate_portfolio(&cfg).unwrap();
        let rate = p.policies.iter().map(|x| x.claim_ind as f64).sum::<f64>() / 4000.0;
        // 4 binomial standard errors
        assert!(
            (rate - 0.2).abs() < 4.0 * (0.2f64 * 0.8 / 4000.0).sqrt(),
            "{rate}"
        );
    }

    #[test]
    fn peculiarity_raises_the_claim_rate() {
        let cfg = SynthConfig {
            num_vehicles: 3000,
            trips_per_vehicle: (1, 2),
            seed: 5,
            ..SynthConfig::default()
        };
        let p = generate_portfolio(&cfg).unwrap();
        let mut idx: Vec<usize> = (0..p.truth.len()).collect();
        idx.sort_by(|&a, &b| {
            p.truth[a]
                .latent_peculiarity
                .total_cmp(&p.truth[b].latent_peculiarity)
        });
        let decile = idx.len() / 10;
        let rate = |rows: &[usize]| {
            rows.iter()
                .map(|&i| p.policies[i].claim_ind as f64)
                .sum::<f64>()
                / rows.len() as f64
        };
        assert!(rate(&idx[idx.len() - decile..]) > rate(&idx[..decile]));
    }

    #[test]
    fn commute_distance_missing_rate() {
        let cfg = SynthConfig {
            num_vehicles: 5000,
            trips_per_vehicle: (1, 1),
            ..SynthConfig::default()
        };
        let p = generate_portfolio(&cfg).unwrap();
        let missing = p
            .policies
            .iter()
            .filter(|x| x.commute_distance.is_none())
            .count() as f64
            / 5000.0;
        assert!((missing - 0.215).abs() < 0.025, "{missing}");
    }

    #[test]
    fn infeasible_configs() {
        assert!(generate_portfolio(&SynthConfig {
            num_vehicles: 0,
            ..small(0)
        })
        .is_err());
        assert!(generate_portfolio(&SynthConfig {
            trips_per_vehicle: (5, 2),
            ..small(0)
        })
        .is_err());
        assert!(generate_portfolio(&SynthConfig {
            base_claim_rate: 1.0,
            ..small(0)
        })
        .is_err());
    }
}
