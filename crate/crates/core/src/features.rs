//! The eight trip attributes and their z-score normalization.

use std::f64::consts::PI;
use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trips::TripRecord;

pub const ATTRIBUTE_NAMES: [&str; 8] = [
    "duration",
    "distance",
    "avg_speed",
    "max_speed",
    "time_of_day_sin",
    "time_of_day_cos",
    "time_of_week_sin",
    "time_of_week_cos",
];

pub const SECONDS_PER_DAY: f64 = 86_400.0;
pub const DAYS_PER_WEEK: f64 = 7.0;

/// Average speed divides by at least one minute so that zero-length trips
/// with a recorded distance stay finite.
pub const MIN_SPEED_DURATION_HOURS: f64 = 1.0 / 60.0;

/// Rows of trip attributes, one per trip, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct TripFeatureMatrix {
    pub vins: Vec<String>,
    pub trip_ids: Vec<u32>,
    /// `n x 8`, columns in [`ATTRIBUTE_NAMES`] order.
    pub attributes: Array2<f64>,
    /// Statistics used to normalize `attributes`; `None` while raw.
    pub normalization: Option<Normalizer>,
}

impl TripFeatureMatrix {
    pub fn len(&self) -> usize {
        self.vins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vins.is_empty()
    }

    /// Keeps the rows for which `keep(vin)` holds.
    pub fn filter_vins(&self, keep: impl Fn(&str) -> bool) -> TripFeatureMatrix {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(&self.vins[i])).collect();
        TripFeatureMatrix {
            vins: idx.iter().map(|&i| self.vins[i].clone()).collect(),
            trip_ids: idx.iter().map(|&i| self.trip_ids[i]).collect(),
            attributes: self.attributes.select(Axis(0), &idx),
            normalization: self.normalization.clone(),
        }
    }

    /// Debug dump: `vin,trip_id,<8 attribute columns>`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["vin".to_string(), "trip_id".to_string()];
        header.extend(ATTRIBUTE_NAMES.iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for (i, row) in self.attributes.outer_iter().enumerate() {
            let mut rec = vec![self.vins[i].clone(), self.trip_ids[i].to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<feature writer>", e))?;
        Ok(())
    }
}

/// Maps `value` on a cycle of length `period` to `(sin, cos)` of its angle.
pub fn encode_cyclic(value: f64, period: f64) -> Result<(f64, f64)> {
    if !(period > 0.0) || !period.is_finite() {
        return Err(Error::arg(format!(
            "cyclic period must be positive, got {period}"
        )));
    }
    let angle = 2.0 * PI * value / period;
    Ok(angle.sin_cos())
}

/// Raw (un-normalized) attributes for each trip.
///
/// Time-of-day and time-of-week come from the departure timestamp.
pub fn derive_attributes(trips: &[TripRecord]) -> TripFeatureMatrix {
    let mut attributes = Array2::zeros((trips.len(), ATTRIBUTE_NAMES.len()));
    for (mut row, trip) in attributes.outer_iter_mut().zip(trips) {
        let seconds = trip.duration_seconds() as f64;
        let hours = (seconds / 3600.0).max(MIN_SPEED_DURATION_HOURS);
        let (tod_sin, tod_cos) =
            encode_cyclic(trip.departure.seconds_of_day() as f64, SECONDS_PER_DAY)
                .expect("positive period");
        let (tow_sin, tow_cos) = encode_cyclic(trip.departure.days_since_monday(), DAYS_PER_WEEK)
            .expect("positive period");
        let values = [
            seconds / 60.0,
            trip.distance_km,
            trip.distance_km / hours,
            trip.max_speed_kmh,
            tod_sin,
            tod_cos,
            tow_sin,
            tow_cos,
        ];
        for (dst, v) in row.iter_mut().zip(values) {
            *dst = v;
        }
    }
    TripFeatureMatrix {
        vins: trips.iter().map(|t| t.vin.clone()).collect(),
        trip_ids: trips.iter().map(|t| t.trip_id).collect(),
        attributes,
        normalization: None,
    }
}

/// Column means and sample standard deviations (divisor `n - 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// Sample mean and standard deviation of a column.
pub(crate) fn mean_std<'a>(values: impl ExactSizeIterator<Item = &'a f64> + Clone) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// A column counts as constant when its spread is negligible next to its level.
pub(crate) fn is_degenerate(mean: f64, std: f64) -> bool {
    !(std > 1e-12 * mean.abs().max(1.0))
}

impl Normalizer {
    /// Fits per-column statistics. `names` labels columns in error messages.
    pub fn fit(matrix: ArrayView2<f64>, names: &[&str]) -> Result<Self> {
        if matrix.nrows() < 2 {
            return Err(Error::arg("normalization needs at least two rows"));
        }
        let mut means = Vec::with_capacity(matrix.ncols());
        let mut stds = Vec::with_capacity(matrix.ncols());
        for (j, col) in matrix.axis_iter(Axis(1)).enumerate() {
            let (mean, std) = mean_std(col.iter());
            if is_degenerate(mean, std) {
                let name = names
                    .get(j)
                    .map_or_else(|| format!("#{j}"), |s| s.to_string());
                return Err(Error::DegenerateScale(name));
            }
            means.push(mean);
            stds.push(std);
        }
        Ok(Normalizer { means, stds })
    }

    pub fn width(&self) -> usize {
        self.means.len()
    }

    pub fn apply(&self, matrix: ArrayView2<f64>) -> Result<Array2<f64>> {
        if matrix.ncols() != self.width() {
            return Err(Error::Dimension {
                expected: self.width(),
                got: matrix.ncols(),
            });
        }
        let means = Array1::from(self.means.clone());
        let stds = Array1::from(self.stds.clone());
        Ok((&matrix - &means) / &stds)
    }

    pub fn invert(&self, matrix: ArrayView2<f64>) -> Result<Array2<f64>> {
        if matrix.ncols() != self.width() {
            return Err(Error::Dimension {
                expected: self.width(),
                got: matrix.ncols(),
            });
        }
        let means = Array1::from(self.means.clone());
        let stds = Array1::from(self.stds.clone());
        Ok(&matrix * &stds + &means)
    }
}

/// Fits statistics over the eight trip attribute columns.
pub fn fit_normalizer(matrix: &TripFeatureMatrix) -> Result<Normalizer> {
    Normalizer::fit(matrix.attributes.view(), &ATTRIBUTE_NAMES)
}

pub fn apply_normalizer(
    normalizer: &Normalizer,
    matrix: &TripFeatureMatrix,
) -> Result<TripFeatureMatrix> {
    Ok(TripFeatureMatrix {
        vins: matrix.vins.clone(),
        trip_ids: matrix.trip_ids.clone(),
        attributes: normalizer.apply(matrix.attributes.view())?,
        normalization: Some(normalizer.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trips::Timestamp;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn trip(dep: &str, arr: &str, dist: f64, vmax: f64) -> TripRecord {
        TripRecord {
            vin: "A".into(),
            trip_id: 1,
            departure: Timestamp::parse(dep).unwrap(),
            arrival: Timestamp::parse(arr).unwrap(),
            distance_km: dist,
            max_speed_kmh: vmax,
        }
    }

    #[test]
    fn table_row_attributes() {
        let m = derive_attributes(&[trip(
            "2017-05-02 19:04:15",
            "2017-05-02 19:24:24",
            25.0,
            104.0,
        )]);
        let row = m.attributes.row(0);
        assert_abs_diff_eq!(row[0], 20.15, epsilon = 1e-12);
        assert_abs_diff_eq!(row[2], 25.0 / (20.15 / 60.0), epsilon = 1e-9);
        assert_abs_diff_eq!(row[2], 74.44, epsilon = 0.005);
        assert_eq!(row[3], 104.0);
        let (s, c) = encode_cyclic(68655.0, SECONDS_PER_DAY).unwrap();
        assert_eq!((row[4], row[5]), (s, c));
        let (s, c) = encode_cyclic(1.0 + 68655.0 / 86400.0, 7.0).unwrap();
        assert_eq!((row[6], row[7]), (s, c));
        let ts = Timestamp::parse("2017-05-02 19:04:15").unwrap();
        assert_eq!(ts.seconds_of_day(), 68655);
        assert_abs_diff_eq!(ts.days_since_monday(), 1.7946, epsilon = 1e-4);
    }

    #[test]
    fn zero_duration_trip_uses_one_minute_floor() {
        let m = derive_attributes(&[trip(
            "2017-05-02 21:31:29",
            "2017-05-02 21:31:29",
            6.4,
            66.0,
        )]);
        assert_eq!(m.attributes[[0, 0]], 0.0);
        assert_abs_diff_eq!(m.attributes[[0, 2]], 384.0, epsilon = 1e-9);
    }

    #[test]
    fn cyclic_reference_points() {
        let (s, c) = encode_cyclic(0.0, 86400.0).unwrap();
        assert_eq!((s, c), (0.0, 1.0));
        let (s, c) = encode_cyclic(43200.0, 86400.0).unwrap();
        assert_abs_diff_eq!(s, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c, -1.0, epsilon = 1e-12);
        let (s, c) = encode_cyclic(21600.0, 86400.0).unwrap();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c, 0.0, epsilon = 1e-12);
        assert!(encode_cyclic(1.0, 0.0).is_err());
        assert!(encode_cyclic(1.0, -3.0).is_err());
    }

    #[test]
    fn day_boundary_is_continuous() {
        let (a, b) = (
            encode_cyclic(86399.5, 86400.0).unwrap(),
            encode_cyclic(0.0, 86400.0).unwrap(),
        );
        assert!((a.0 - b.0).abs() < 1e-4 && (a.1 - b.1).abs() < 1e-4);
    }

    #[test]
    fn normalizer_statistics() {
        let m = array![[1.0], [2.0], [3.0]];
        let n = Normalizer::fit(m.view(), &["x"]).unwrap();
        assert_eq!(n.means, vec![2.0]);
        assert_eq!(n.stds, vec![1.0]);

        let n2 = Normalizer {
            means: vec![10.0],
            stds: vec![2.0],
        };
        assert_eq!(n2.apply(array![[14.0]].view()).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn constant_column_names_itself() {
        let m = array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]];
        match Normalizer::fit(m.view(), &["a", "b"]) {
            Err(Error::DegenerateScale(name)) => assert_eq!(name, "b"),
            other => panic!("expected degenerate-scale error, got {other:?}"),
        }
    }

    #[test]
    fn normalized_columns_are_standard_and_refit_is_stable() {
        let m = array![[1.0, 10.0], [4.0, -3.0], [2.5, 7.0], [9.0, 0.5]];
        let n = Normalizer::fit(m.view(), &[]).unwrap();
        let z = n.apply(m.view()).unwrap();
        let again = Normalizer::fit(z.view(), &[]).unwrap();
        for j in 0..2 {
            assert!(again.means[j].abs() < 1e-12);
            assert!((again.stds[j] - 1.0).abs() < 1e-12);
        }
        // held-out rows keep the training statistics
        let held = array![[100.0, 100.0]];
        let zh = n.apply(held.view()).unwrap();
        assert!(zh[[0, 0]].abs() > 1.0);
    }

    proptest! {
        #[test]
        fn sin_cos_on_unit_circle(value in -1e7f64..1e7, period in 1e-3f64..1e6) {
            let (s, c) = encode_cyclic(value, period).unwrap();
            prop_assert!((s * s + c * c - 1.0).abs() < 1e-12);
        }

        #[test]
        fn normalization_is_invertible(rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 3), 3..30)) {
            let n = rows.len();
            let m = Array2::from_shape_vec((n, 3), rows.concat()).unwrap();
            if let Ok(norm) = Normalizer::fit(m.view(), &[]) {
                let back = norm.invert(norm.apply(m.view()).unwrap().view()).unwrap();
                for (a, b) in back.iter().zip(m.iter()) {
                    prop_assert!((a - b).abs() < 1e-10 * b.abs().max(1.0));
                }
            }
        }

        #[test]
        fn derive_is_permutation_equivariant(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let trips: Vec<TripRecord> = (0..12).map(|i| {
                let dep = 1_500_000_000 + rng.random_range(0..10_000_000i64);
                TripRecord {
                    vin: format!("V{}", i % 3),
                    trip_id: i + 1,
                    departure: Timestamp(dep),
                    arrival: Timestamp(dep + rng.random_range(0..7200)),
                    distance_km: rng.random_range(0.0..80.0),
                    max_speed_kmh: rng.random_range(10.0..140.0),
                }
            }).collect();
            let mut perm: Vec<usize> = (0..trips.len()).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let shuffled: Vec<TripRecord> = perm.iter().map(|&i| trips[i].clone()).collect();
            let a = derive_attributes(&trips);
            let b = derive_attributes(&shuffled);
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(a.attributes.row(i), b.attributes.row(k));
            }
        }
    }
}
