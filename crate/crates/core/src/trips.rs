//! Trip and policy tables: CSV ingestion, validation, and the vehicle-level
//! train/test split.
//!
//! Rows are validated eagerly while parsing so that every downstream module
//! can rely on the record invariants (`arrival >= departure`, non-negative
//! distance and speed, one policy per vehicle, ...).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDateTime, Timelike};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRIP_HEADER: [&str; 6] = [
    "vin",
    "trip_id",
    "departure",
    "arrival",
    "distance",
    "max_speed",
];

pub const POLICY_HEADER: [&str; 12] = [
    "vin",
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
    "claim_ind",
];

const DATETIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Naive local time, whole seconds since 1970-01-01 00:00:00.
///
/// The recording clock carries no timezone, so no offset is ever applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn parse(s: &str) -> Result<Self, chrono::ParseError> {
        let dt = NaiveDateTime::parse_from_str(s.trim(), DATETIME_FORMAT)?;
        Ok(Timestamp(dt.and_utc().timestamp()))
    }

    pub fn from_datetime(dt: NaiveDateTime) -> Self {
        Timestamp(dt.and_utc().timestamp())
    }

    pub fn to_datetime(self) -> NaiveDateTime {
        chrono::DateTime::from_timestamp(self.0, 0)
            .expect("timestamp within chrono range")
            .naive_utc()
    }

    /// Seconds elapsed since midnight, in `[0, 86400)`.
    pub fn seconds_of_day(self) -> u32 {
        self.to_datetime().num_seconds_from_midnight()
    }

    /// Days elapsed since the preceding Monday 00:00:00, in `[0, 7)`.
    pub fn days_since_monday(self) -> f64 {
        let dt = self.to_datetime();
        let weekday = dt.weekday().num_days_from_monday() as f64;
        weekday + dt.num_seconds_from_midnight() as f64 / 86_400.0
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_datetime().format(DATETIME_FORMAT))
    }
}

/// One key-on/key-off event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub vin: String,
    pub trip_id: u32,
    pub departure: Timestamp,
    pub arrival: Timestamp,
    pub distance_km: f64,
    pub max_speed_kmh: f64,
}

impl TripRecord {
    pub fn duration_seconds(&self) -> i64 {
        self.arrival.0 - self.departure.0
    }
}

/// Static policy and vehicle attributes plus the claim indicator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub vin: String,
    pub annual_distance: f64,
    /// The only field allowed to be missing.
    pub commute_distance: Option<f64>,
    pub conv_count_3_yrs_minor: u32,
    pub gender: String,
    pub marital_status: String,
    pub pmt_plan: String,
    pub veh_age: f64,
    pub veh_use: String,
    pub years_claim_free: f64,
    pub years_licensed: f64,
    pub claim_ind: u8,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let ok =
        found.len() == expected.len() && found.iter().zip(expected).all(|(a, b)| a.trim() == *b);
    if ok {
        Ok(())
    } else {
        Err(Error::Header {
            expected: expected.join(","),
            found: found.iter().collect::<Vec<_>>().join(","),
        })
    }
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader)
}

fn field<'a>(rec: &'a csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<&'a str> {
    rec.get(idx).map(str::trim).ok_or_else(|| Error::Parse {
        line,
        message: format!("missing field `{name}`"),
    })
}

fn parse_num<T: std::str::FromStr>(s: &str, name: &str, line: u64) -> Result<T> {
    s.parse::<T>().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse `{name}` from {s:?}"),
    })
}

pub fn parse_trip_csv(path: impl AsRef<Path>) -> Result<Vec<TripRecord>> {
    read_trips(open(path.as_ref())?)
}

/// Reads the six-column trip table. Output is sorted by `(vin, trip_id)`.
pub fn read_trips<R: Read>(reader: R) -> Result<Vec<TripRecord>> {
    let mut rdr = csv_reader(reader);
    check_header(rdr.headers()?, &TRIP_HEADER)?;

    let mut trips = Vec::new();
    let mut inverted = Vec::new();
    let mut bad_values = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != TRIP_HEADER.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", TRIP_HEADER.len(), rec.len()),
            });
        }
        let vin = field(&rec, 0, "vin", line)?.to_string();
        if vin.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty vin".into(),
            });
        }
        let trip_id: u32 = parse_num(field(&rec, 1, "trip_id", line)?, "trip_id", line)?;
        let ts = |idx: usize, name: &str| -> Result<Timestamp> {
            let raw = field(&rec, idx, name, line)?;
            Timestamp::parse(raw).map_err(|e| Error::Parse {
                line,
                message: format!("bad `{name}` {raw:?}: {e}"),
            })
        };
        let departure = ts(2, "departure")?;
        let arrival = ts(3, "arrival")?;
        let distance_km: f64 = parse_num(field(&rec, 4, "distance", line)?, "distance", line)?;
        let max_speed_kmh: f64 = parse_num(field(&rec, 5, "max_speed", line)?, "max_speed", line)?;

        if arrival < departure {
            inverted.push(format!("({vin}, {trip_id})"));
        }
        if trip_id == 0
            || !distance_km.is_finite()
            || distance_km < 0.0
            || !max_speed_kmh.is_finite()
            || max_speed_kmh < 0.0
        {
            bad_values.push(format!("({vin}, {trip_id}) at line {line}"));
        }
        trips.push(TripRecord {
            vin,
            trip_id,
            departure,
            arrival,
            distance_km,
            max_speed_kmh,
        });
    }
    if !inverted.is_empty() {
        return Err(Error::Validation(format!(
            "arrival before departure for {}",
            inverted.join(", ")
        )));
    }
    if !bad_values.is_empty() {
        return Err(Error::Validation(format!(
            "trip_id must be >= 1 and distance/max_speed finite and non-negative: {}",
            bad_values.join(", ")
        )));
    }

    trips.sort_by(|a, b| a.vin.cmp(&b.vin).then(a.trip_id.cmp(&b.trip_id)));
    let dups: Vec<String> = trips
        .windows(2)
        .filter(|w| w[0].vin == w[1].vin && w[0].trip_id == w[1].trip_id)
        .map(|w| format!("({}, {})", w[0].vin, w[0].trip_id))
        .collect();
    if !dups.is_empty() {
        return Err(Error::Validation(format!(
            "duplicate trip ids: {}",
            dups.join(", ")
        )));
    }
    Ok(trips)
}

pub fn parse_policy_csv(path: impl AsRef<Path>) -> Result<Vec<PolicyRecord>> {
    read_policies(open(path.as_ref())?)
}

/// Reads the policy table. An empty cell is `MISSING` and is accepted only
/// for `commute_distance`.
pub fn read_policies<R: Read>(reader: R) -> Result<Vec<PolicyRecord>> {
    let mut rdr = csv_reader(reader);
    check_header(rdr.headers()?, &POLICY_HEADER)?;

    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != POLICY_HEADER.len() {
            return Err(Error::Parse {
                line,
                message: format!(
                    "expected {} fields, found {}",
                    POLICY_HEADER.len(),
                    rec.len()
                ),
            });
        }
        let get = |idx: usize| -> Result<&str> {
            let name = POLICY_HEADER[idx];
            let v = field(&rec, idx, name, line)?;
            if v.is_empty() && name != "commute_distance" {
                return Err(Error::Validation(format!(
                    "line {line}: `{name}` is missing; only commute_distance may be empty"
                )));
            }
            Ok(v)
        };
        let non_negative = |idx: usize| -> Result<f64> {
            let v: f64 = parse_num(get(idx)?, POLICY_HEADER[idx], line)?;
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(format!(
                    "line {line}: `{}` must be finite and non-negative, got {v}",
                    POLICY_HEADER[idx]
                )));
            }
            Ok(v)
        };

        let vin = get(0)?.to_string();
        let commute_distance = match get(2)? {
            "" => None,
            _ => Some(non_negative(2)?),
        };
        let claim_ind = match get(11)? {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Validation(format!(
                    "line {line}: claim_ind must be 0 or 1, got {other:?}"
                )))
            }
        };
        let record = PolicyRecord {
            annual_distance: non_negative(1)?,
            commute_distance,
            conv_count_3_yrs_minor: parse_num(get(3)?, POLICY_HEADER[3], line)?,
            gender: get(4)?.to_string(),
            marital_status: get(5)?.to_string(),
            pmt_plan: get(6)?.to_string(),
            veh_age: non_negative(7)?,
            veh_use: get(8)?.to_string(),
            years_claim_free: non_negative(9)?,
            years_licensed: non_negative(10)?,
            claim_ind,
            vin,
        };
        if !seen.insert(record.vin.clone()) {
            return Err(Error::Validation(format!(
                "line {line}: duplicate vin {:?}",
                record.vin
            )));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn write_trips<W: Write>(writer: W, trips: &[TripRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRIP_HEADER)?;
    for t in trips {
        w.write_record([
            t.vin.clone(),
            t.trip_id.to_string(),
            t.departure.to_string(),
            t.arrival.to_string(),
            t.distance_km.to_string(),
            t.max_speed_kmh.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<trip writer>", e))?;
    Ok(())
}

pub fn write_policies<W: Write>(writer: W, policies: &[PolicyRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(POLICY_HEADER)?;
    for p in policies {
        w.write_record([
            p.vin.clone(),
            p.annual_distance.to_string(),
            p.commute_distance
                .map(|v| v.to_string())
                .unwrap_or_default(),
            p.conv_count_3_yrs_minor.to_string(),
            p.gender.clone(),
            p.marital_status.clone(),
            p.pmt_plan.clone(),
            p.veh_age.to_string(),
            p.veh_use.clone(),
            p.years_claim_free.to_string(),
            p.years_licensed.to_string(),
            p.claim_ind.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<policy writer>", e))?;
    Ok(())
}

/// Groups trips by vehicle, keeping each group in `trip_id` order.
pub fn group_by_vin(trips: &[TripRecord]) -> BTreeMap<String, Vec<TripRecord>> {
    let mut map: BTreeMap<String, Vec<TripRecord>> = BTreeMap::new();
    for t in trips {
        map.entry(t.vin.clone()).or_default().push(t.clone());
    }
    for v in map.values_mut() {
        v.sort_by_key(|t| t.trip_id);
    }
    map
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortfolioSplit {
    pub train_vins: BTreeSet<String>,
    pub test_vins: BTreeSet<String>,
    pub seed: u64,
}

impl PortfolioSplit {
    pub fn is_train(&self, vin: &str) -> bool {
        self.train_vins.contains(vin)
    }

    /// `vin,set` rows with `set` in {train, test}, vins in sorted order.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["vin", "set"])?;
        let mut rows: Vec<(&String, &str)> = self
            .train_vins
            .iter()
            .map(|v| (v, "train"))
            .chain(self.test_vins.iter().map(|v| (v, "test")))
            .collect();
        rows.sort();
        for (vin, set) in rows {
            w.write_record([vin.as_str(), set])?;
        }
        w.flush().map_err(|e| Error::io("<split writer>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, seed: u64) -> Result<Self> {
        let mut rdr = csv_reader(reader);
        check_header(rdr.headers()?, &["vin", "set"])?;
        let mut split = PortfolioSplit {
            train_vins: BTreeSet::new(),
            test_vins: BTreeSet::new(),
            seed,
        };
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let vin = field(&rec, 0, "vin", line)?.to_string();
            match field(&rec, 1, "set", line)? {
                "train" => split.train_vins.insert(vin),
                "test" => split.test_vins.insert(vin),
                other => {
                    return Err(Error::Parse {
                        line,
                        message: format!("unknown set {other:?}"),
                    })
                }
            };
        }
        Ok(split)
    }
}

/// Shuffles the vins with a seeded generator and assigns the first
/// `round(ratio * n)` of them to training.
pub fn split_by_vin(policies: &[PolicyRecord], ratio: f64, seed: u64) -> Result<PortfolioSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::arg(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    if policies.len() < 2 {
        return Err(Error::arg("at least two policies are required to split"));
    }
    let mut vins: Vec<&str> = policies.iter().map(|p| p.vin.as_str()).collect();
    vins.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vins.shuffle(&mut rng);
    let n_train = (ratio * vins.len() as f64).round() as usize;
    Ok(PortfolioSplit {
        train_vins: vins[..n_train].iter().map(|s| s.to_string()).collect(),
        test_vins: vins[n_train..].iter().map(|s| s.to_string()).collect(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "vin,trip_id,departure,arrival,distance,max_speed\n";

    fn policy(vin: &str) -> PolicyRecord {
        PolicyRecord {
            vin: vin.into(),
            annual_distance: 12000.0,
            commute_distance: Some(10.0),
            conv_count_3_yrs_minor: 0,
            gender: "F".into(),
            marital_status: "married".into(),
            pmt_plan: "monthly".into(),
            veh_age: 4.0,
            veh_use: "commute".into(),
            years_claim_free: 8.0,
            years_licensed: 20.0,
            claim_ind: 0,
        }
    }

    #[test]
    fn parses_table_row() {
        let csv = format!("{HEADER}A,1,2017-05-02 19:04:15,2017-05-02 19:24:24,25.0,104\n");
        let trips = read_trips(csv.as_bytes()).unwrap();
        assert_eq!(trips.len(), 1);
        let t = &trips[0];
        assert_eq!(t.vin, "A");
        assert_eq!(t.trip_id, 1);
        assert_eq!(t.distance_km, 25.0);
        assert_eq!(t.max_speed_kmh, 104.0);
        assert_eq!(t.duration_seconds(), 20 * 60 + 9);
        assert_eq!(t.departure.to_string(), "2017-05-02 19:04:15");
    }

    #[test]
    fn empty_table_is_empty() {
        assert!(read_trips(HEADER.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn arrival_before_departure_is_rejected() {
        let csv = format!("{HEADER}A,7,2017-05-02 19:04:15,2017-05-02 19:04:14,1.0,50\n");
        match read_trips(csv.as_bytes()) {
            Err(Error::Validation(msg)) => assert!(msg.contains("(A, 7)"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_row_reports_line() {
        let csv = format!(
            "{HEADER}A,1,2017-05-02 19:04:15,2017-05-02 19:24:24,25.0,104\nA,2,not a date,2017-05-02 19:24:24,1,1\n"
        );
        match read_trips(csv.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_header_is_rejected() {
        let csv = "vin,trip,departure,arrival,distance,max_speed\n";
        assert!(matches!(
            read_trips(csv.as_bytes()),
            Err(Error::Header { .. })
        ));
    }

    #[test]
    fn rows_come_back_sorted() {
        let csv = format!(
            "{HEADER}B,1,2017-03-26 11:46:07,2017-03-26 11:53:29,1.5,76\nA,2,2017-05-02 21:31:29,2017-05-02 21:31:29,6.4,66\nA,1,2017-05-02 19:04:15,2017-05-02 19:24:24,25.0,104\n"
        );
        let trips = read_trips(csv.as_bytes()).unwrap();
        let keys: Vec<_> = trips.iter().map(|t| (t.vin.as_str(), t.trip_id)).collect();
        assert_eq!(keys, vec![("A", 1), ("A", 2), ("B", 1)]);
    }

    #[test]
    fn duplicate_trip_id_is_rejected() {
        let csv = format!(
            "{HEADER}A,1,2017-05-02 19:04:15,2017-05-02 19:24:24,25.0,104\nA,1,2017-05-02 19:04:15,2017-05-02 19:24:24,25.0,104\n"
        );
        assert!(matches!(
            read_trips(csv.as_bytes()),
            Err(Error::Validation(_))
        ));
    }

    fn policy_csv(rows: &[&str]) -> String {
        let mut s = POLICY_HEADER.join(",");
        s.push('\n');
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    #[test]
    fn missing_commute_distance_is_allowed() {
        let csv = policy_csv(&["A,15000,,1,M,single,monthly,3,commute,5,10,0"]);
        let p = read_policies(csv.as_bytes()).unwrap();
        assert_eq!(p[0].commute_distance, None);
        assert_eq!(p[0].conv_count_3_yrs_minor, 1);
    }

    #[test]
    fn claim_ind_outside_binary_is_rejected() {
        let csv = policy_csv(&["A,15000,3,1,M,single,monthly,3,commute,5,10,2"]);
        assert!(matches!(
            read_policies(csv.as_bytes()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn missing_elsewhere_is_rejected() {
        let csv = policy_csv(&["A,15000,3,1,,single,monthly,3,commute,5,10,1"]);
        assert!(matches!(
            read_policies(csv.as_bytes()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn duplicate_vin_is_rejected() {
        let csv = policy_csv(&[
            "A,15000,3,1,M,single,monthly,3,commute,5,10,1",
            "A,15000,3,1,M,single,monthly,3,commute,5,10,0",
        ]);
        match read_policies(csv.as_bytes()) {
            Err(Error::Validation(msg)) => assert!(msg.contains("duplicate vin")),
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn split_sizes_match_portfolio() {
        let policies: Vec<_> = (0..4834).map(|i| policy(&format!("V{i:05}"))).collect();
        let split = split_by_vin(&policies, 0.7, 1).unwrap();
        assert_eq!(split.train_vins.len(), 3384);
        assert_eq!(split.test_vins.len(), 1450);
    }

    #[test]
    fn split_is_deterministic() {
        let policies: Vec<_> = (0..10).map(|i| policy(&format!("V{i}"))).collect();
        let a = split_by_vin(&policies, 0.7, 99).unwrap();
        let b = split_by_vin(&policies, 0.7, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train_vins.len(), 7);
    }

    #[test]
    fn minimal_split() {
        let policies = vec![policy("a"), policy("b")];
        let s = split_by_vin(&policies, 0.5, 3).unwrap();
        assert_eq!(s.train_vins.len(), 1);
        assert_eq!(s.test_vins.len(), 1);
        assert!(s.train_vins.is_disjoint(&s.test_vins));
    }

    #[test]
    fn split_rejects_bad_ratio() {
        let policies = vec![policy("a"), policy("b")];
        assert!(split_by_vin(&policies, 1.0, 0).is_err());
        assert!(split_by_vin(&policies, 0.0, 0).is_err());
    }

    #[test]
    fn split_csv_round_trip() {
        let policies: Vec<_> = (0..10).map(|i| policy(&format!("V{i}"))).collect();
        let split = split_by_vin(&policies, 0.7, 5).unwrap();
        let mut buf = Vec::new();
        split.write_csv(&mut buf).unwrap();
        assert_eq!(PortfolioSplit::read_csv(buf.as_slice(), 5).unwrap(), split);
    }

    #[test]
    fn monday_midnight_is_week_origin() {
        let ts = Timestamp::parse("2017-05-01 00:00:00").unwrap();
        assert_eq!(ts.seconds_of_day(), 0);
        assert_eq!(ts.days_since_monday(), 0.0);
    }
}
