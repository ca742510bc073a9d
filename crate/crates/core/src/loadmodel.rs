//! Computational load of one training round as a function of minibatch size,
//! local passes and dataset size, fitted to timing measurements.
//!
//! The model is `time = c0·(e·n/b) + c1·(e·n)`: a fixed overhead per local
//! step plus a per-sample-pass cost. It is linear in `n` for fixed `(b, e)`.

use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const TABLE_CSV: &str = include_str!("../data/table1.csv");

/// One timing/accuracy measurement of a federated training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord<T> {
    /// Samples in the local dataset.
    pub n: u32,
    pub e: u32,
    pub b: u32,
    pub acc50: T,
    pub acc200: T,
    pub time_per_round: T,
}

impl<T: Scalar> MeasurementRecord<T> {
    pub fn validate(&self) -> Result<()> {
        let location = format!("record (n={}, e={}, b={})", self.n, self.e, self.b);
        if self.b < 1 || self.n < self.b || self.e < 1 {
            return Err(Error::validation(location, "need n >= b >= 1 and e >= 1"));
        }
        for acc in [self.acc50, self.acc200] {
            if !(acc >= T::zero() && acc <= T::one()) {
                return Err(Error::validation(location, "accuracies must lie in [0, 1]"));
            }
        }
        if !(self.time_per_round > T::zero()) {
            return Err(Error::validation(location, "time_per_round must be > 0"));
        }
        Ok(())
    }

    /// Local steps per round, `e·n/b`.
    pub fn steps(&self) -> T {
        T::from(self.e).unwrap() * T::from(self.n).unwrap() / T::from(self.b).unwrap()
    }

    /// Sample passes per round, `e·n`.
    pub fn sample_passes(&self) -> T {
        T::from(self.e).unwrap() * T::from(self.n).unwrap()
    }

    /// Accuracy reached within `rounds`, using the latest measurement not after it.
    pub fn accuracy_at(&self, rounds: u32) -> Option<T> {
        match rounds {
            r if r >= 200 => Some(self.acc200),
            r if r >= 50 => Some(self.acc50),
            _ => None,
        }
    }
}

fn default_dataset_type() -> String {
    "mnist".to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadCoefficients<T> {
    /// Seconds of fixed overhead per minibatch step.
    pub c0: T,
    /// Seconds per sample pass.
    pub c1: T,
    #[serde(default = "default_dataset_type")]
    pub dataset_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requirement: Option<T>,
}

impl<T: Scalar> LoadCoefficients<T> {
    pub fn new(c0: T, c1: T) -> Self {
        Self {
            c0,
            c1,
            dataset_type: default_dataset_type(),
            requirement: None,
        }
    }

    pub fn validate(&self, location: &str) -> Result<()> {
        let ok = |v: T| v.is_finite() && v >= T::zero();
        if !ok(self.c0) || !ok(self.c1) {
            return Err(Error::validation(
                location,
                "load coefficients must be finite and >= 0",
            ));
        }
        if self.c0 == T::zero() && self.c1 == T::zero() {
            return Err(Error::validation(
                location,
                "load coefficients c0 and c1 are both zero",
            ));
        }
        Ok(())
    }
}

/// Seconds per round: `e·n·(c0/b + c1)`.
pub fn load<T: Scalar>(b: u32, e: u32, n: T, coeffs: &LoadCoefficients<T>) -> T {
    let b = T::from(b).unwrap();
    let e = T::from(e).unwrap();
    e * n * (coeffs.c0 / b + coeffs.c1)
}

/// Seconds of load per received bit for a server running `(b, e)`.
pub fn kappa<T: Scalar>(b: u32, e: u32, coeffs: &LoadCoefficients<T>, bits_per_sample: T) -> T {
    load(b, e, T::one(), coeffs) / bits_per_sample
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadFit<T> {
    pub coefficients: LoadCoefficients<T>,
    /// `|predicted − measured| / measured` per record.
    pub relative_residuals: Vec<T>,
    pub max_relative_residual: T,
    pub rms_residual: T,
}

/// Nonnegative least-squares fit of `(c0, c1)` to the records.
pub fn fit_coefficients<T: Scalar>(records: &[MeasurementRecord<T>]) -> Result<LoadFit<T>> {
    if records.len() < 2 {
        return Err(Error::Fit(format!(
            "need at least 2 records, got {}",
            records.len()
        )));
    }
    for r in records {
        r.validate()?;
    }
    let rows = records.len();
    let x = DMatrix::from_fn(rows, 2, |i, j| {
        let r = &records[i];
        if j == 0 { r.steps() } else { r.sample_passes() }.as_f64()
    });
    let y = DVector::from_iterator(rows, records.iter().map(|r| r.time_per_round.as_f64()));

    let svd = x.clone().svd(true, true);
    let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
    if !(smin > smax * 1e-10) {
        return Err(Error::Fit(
            "design is rank deficient (records collinear in (e·n/b, e·n))".into(),
        ));
    }
    let sse = |c: &DVector<f64>| (&x * c - &y).norm_squared();
    let single = |j: usize| {
        let col = x.column(j);
        let mut c = DVector::zeros(2);
        c[j] = (col.dot(&y) / col.norm_squared()).max(0.0);
        c
    };
    let unconstrained = svd
        .solve(&y, 1e-14)
        .map_err(|e| Error::Fit(e.to_string()))?;
    let best = if unconstrained.iter().all(|&c| c >= 0.0) {
        unconstrained
    } else {
        let (a, b) = (single(0), single(1));
        if sse(&a) <= sse(&b) {
            a
        } else {
            b
        }
    };

    let coefficients = LoadCoefficients::new(T::lit(best[0]), T::lit(best[1]));
    coefficients.validate("fit")?;
    let relative_residuals: Vec<T> = records
        .iter()
        .map(|r| {
            ((load(r.b, r.e, T::from(r.n).unwrap(), &coefficients) - r.time_per_round)
                / r.time_per_round)
                .abs()
        })
        .collect();
    let max_relative_residual = relative_residuals.iter().copied().fold(T::zero(), T::max);
    let rms_residual = T::lit((sse(&best) / rows as f64).sqrt());
    Ok(LoadFit {
        coefficients,
        relative_residuals,
        max_relative_residual,
        rms_residual,
    })
}

/// Reads records from CSV with header `n,e,b,acc50,acc200,time_per_round`.
pub fn read_records<T: Scalar, R: Read>(reader: R) -> Result<Vec<MeasurementRecord<T>>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let records = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<MeasurementRecord<T>>, _>>()?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

/// The shipped MNIST timing table (16 configurations).
pub fn measurement_table<T: Scalar>() -> Vec<MeasurementRecord<T>> {
    read_records(TABLE_CSV.as_bytes()).expect("shipped measurement table is valid")
}

/// Coefficients fitted to [`measurement_table`].
pub fn reference_coefficients<T: Scalar>() -> LoadCoefficients<T> {
    fit_coefficients(&measurement_table::<T>())
        .expect("shipped measurement table fits")
        .coefficients
}

fn accuracy_column<T: Scalar>(r: &MeasurementRecord<T>, round_budget: u32) -> Result<T> {
    r.accuracy_at(round_budget).ok_or_else(|| {
        Error::validation(
            "round_budget",
            format!("no accuracy measured within {round_budget} rounds"),
        )
    })
}

/// Picks the minimum-load `(b, e)` meeting accuracy `requirement` within
/// `round_budget` rounds, for the largest measured dataset size not above `n`.
pub fn select_params<T: Scalar>(
    n: u32,
    records: &[MeasurementRecord<T>],
    requirement: T,
    round_budget: u32,
) -> Result<(u32, u32)> {
    let size = records
        .iter()
        .map(|r| r.n)
        .filter(|&m| m <= n)
        .max()
        .ok_or_else(|| {
            Error::validation(
                "select_params",
                format!("no measurements at or below n = {n}"),
            )
        })?;
    let mut best: Option<(&MeasurementRecord<T>, T)> = None;
    let mut best_accuracy = T::neg_infinity();
    for r in records.iter().filter(|r| r.n == size) {
        let acc = accuracy_column(r, round_budget)?;
        best_accuracy = best_accuracy.max(acc);
        if acc < requirement {
            continue;
        }
        let better = match best {
            None => true,
            // least load, then higher accuracy, then fewer passes
            Some((cur, cur_acc)) => {
                r.time_per_round < cur.time_per_round
                    || (r.time_per_round == cur.time_per_round
                        && (acc > cur_acc || (acc == cur_acc && r.e < cur.e)))
            }
        };
        if better {
            best = Some((r, acc));
        }
    }
    best.map(|(r, _)| (r.b, r.e))
        .ok_or(Error::InfeasibleRequirement {
            requirement: requirement.as_f64(),
            best: best_accuracy.as_f64(),
        })
}

/// Smallest dataset size reaching `requirement` within `round_budget` rounds under any `(b, e)`.
pub fn min_data_for<T: Scalar>(
    requirement: T,
    round_budget: u32,
    records: &[MeasurementRecord<T>],
) -> Result<u32> {
    if records.is_empty() {
        return Err(Error::validation("min_data_for", "no measurement records"));
    }
    let mut smallest: Option<u32> = None;
    let mut best_accuracy = T::neg_infinity();
    for r in records {
        let acc = accuracy_column(r, round_budget)?;
        best_accuracy = best_accuracy.max(acc);
        if acc >= requirement {
            smallest = Some(smallest.map_or(r.n, |s| s.min(r.n)));
        }
    }
    smallest.ok_or(Error::InfeasibleRequirement {
        requirement: requirement.as_f64(),
        best: best_accuracy.as_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn table() -> Vec<MeasurementRecord<f64>> {
        measurement_table()
    }

    fn synthetic(c0: f64, c1: f64, configs: &[(u32, u32, u32)]) -> Vec<MeasurementRecord<f64>> {
        let coeffs = LoadCoefficients::new(c0, c1);
        configs
            .iter()
            .map(|&(n, e, b)| MeasurementRecord {
                n,
                e,
                b,
                acc50: 0.9,
                acc200: 0.95,
                time_per_round: load(b, e, n as f64, &coeffs),
            })
            .collect()
    }

    #[test]
    fn table_has_sixteen_rows() {
        assert_eq!(table().len(), 16);
    }

    #[test]
    fn no_data_no_load() {
        assert_eq!(load(10, 5, 0.0, &LoadCoefficients::new(0.1, 0.2)), 0.0);
    }

    #[test]
    fn two_consistent_records_recover_coefficients() {
        let recs = synthetic(2e-3, 5e-5, &[(100, 5, 10), (400, 20, 50)]);
        let fit = fit_coefficients(&recs).unwrap();
        assert_relative_eq!(fit.coefficients.c0, 2e-3, max_relative = 1e-9);
        assert_relative_eq!(fit.coefficients.c1, 5e-5, max_relative = 1e-9);
    }

    #[test]
    fn collinear_records_rejected() {
        // Same b everywhere: e·n/b and e·n are proportional.
        let recs = synthetic(1e-3, 1e-4, &[(100, 5, 10), (200, 5, 10), (400, 20, 10)]);
        assert!(matches!(fit_coefficients(&recs), Err(Error::Fit(_))));
    }

    #[test]
    fn single_record_rejected() {
        let recs = synthetic(1e-3, 1e-4, &[(100, 5, 10)]);
        assert!(fit_coefficients(&recs).is_err());
    }

    #[test]
    fn negative_slope_is_clamped() {
        // Time falls with sample passes: the unconstrained c1 would be negative.
        let mut recs = synthetic(1e-3, 0.0, &[(100, 5, 10), (400, 5, 50), (200, 20, 20)]);
        recs[1].time_per_round *= 0.5;
        let fit = fit_coefficients(&recs).unwrap();
        assert!(fit.coefficients.c0 >= 0.0 && fit.coefficients.c1 >= 0.0);
    }

    #[test]
    fn table_fit_within_ten_percent() {
        let fit = fit_coefficients(&table()).unwrap();
        assert!(
            fit.max_relative_residual <= 0.10,
            "{}",
            fit.max_relative_residual
        );
        let c = &fit.coefficients;
        assert_relative_eq!(load(10, 20, 100.0, c), 0.4772, max_relative = 0.10);
        assert_relative_eq!(load(50, 5, 400.0, c), 0.2597, max_relative = 0.10);
    }

    #[test]
    fn held_out_batch_size_predicted_within_five_percent() {
        let all = table();
        let (held, train): (Vec<_>, Vec<_>) = all.into_iter().partition(|r| r.b == 20);
        let fit = fit_coefficients(&train).unwrap();
        assert_eq!(held.len(), 4);
        for r in &held {
            let p = load(r.b, r.e, r.n as f64, &fit.coefficients);
            assert!(
                ((p - r.time_per_round) / r.time_per_round).abs() <= 0.05,
                "{r:?} -> {p}"
            );
        }
    }

    #[test]
    fn select_params_min_load() {
        assert_eq!(select_params(400, &table(), 0.99, 200).unwrap(), (10, 5));
    }

    #[test]
    fn select_params_infeasible_reports_best() {
        match select_params(100, &table(), 0.999, 200) {
            Err(Error::InfeasibleRequirement { best, .. }) => assert_relative_eq!(best, 0.9847),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn select_params_single_candidate() {
        // Only (e=20, b=10) reaches 99.1% at n = 400.
        assert_eq!(select_params(400, &table(), 0.991, 200).unwrap(), (10, 20));
    }

    #[test]
    fn select_params_rounds_n_down() {
        assert_eq!(
            select_params(399, &table(), 0.985, 200).unwrap(),
            select_params(200, &table(), 0.985, 200).unwrap()
        );
        assert!(select_params(50, &table(), 0.5, 200).is_err());
    }

    #[test]
    fn min_data_examples() {
        assert_eq!(min_data_for(0.98, 50, &table()).unwrap(), 200);
        assert_eq!(min_data_for(0.0, 50, &table()).unwrap(), 100);
        assert_eq!(min_data_for(0.97, 50, &table()).unwrap(), 100);
        assert!(matches!(
            min_data_for(0.999, 200, &table()),
            Err(Error::InfeasibleRequirement { .. })
        ));
        assert!(min_data_for(0.9, 10, &table()).is_err());
    }

    #[test]
    fn csv_round_trip_reads_header() {
        let text = "n,e,b,acc50,acc200,time_per_round\n100,5,10,0.9,0.95,0.12\n";
        let recs: Vec<MeasurementRecord<f64>> = read_records(text.as_bytes()).unwrap();
        assert_eq!(recs[0].n, 100);
        assert!(read_records::<f64, _>(
            "n,e,b,acc50,acc200,time_per_round\n5,5,10,0.9,0.9,0.1\n".as_bytes()
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn load_is_linear_in_n_and_e(b in 1u32..64, e in 1u32..32, n in 0.0..1e4f64, c0 in 0.0..1e-2f64, c1 in 1e-6..1e-3f64) {
            let c = LoadCoefficients::new(c0, c1);
            prop_assert_eq!(load(b, e, 2.0 * n, &c), 2.0 * load(b, e, n, &c));
            let doubled = load(b, 2 * e, n, &c);
            prop_assert!((doubled - 2.0 * load(b, e, n, &c)).abs() <= 4.0 * f64::EPSILON * doubled.abs());
        }

        #[test]
        fn load_non_increasing_in_batch(b in 1u32..64, e in 1u32..32, n in 0.0..1e4f64) {
            let c = LoadCoefficients::new(1e-3, 1e-4);
            prop_assert!(load(b + 1, e, n, &c) <= load(b, e, n, &c));
        }

        #[test]
        fn exact_synthetic_data_refits_exactly(c0 in 1e-4..1e-2f64, c1 in 1e-6..1e-3f64) {
            let recs = synthetic(c0, c1, &[(100, 5, 10), (200, 20, 20), (400, 5, 50), (100, 20, 50)]);
            let fit = fit_coefficients(&recs).unwrap();
            prop_assert!(fit.max_relative_residual < 1e-9);
        }

        #[test]
        fn selected_params_meet_requirement(r in 0.9..0.995f64, n in prop::sample::select(vec![100u32, 200, 400])) {
            let t = table();
            if let Ok((b, e)) = select_params(n, &t, r, 200) {
                let row = t.iter().find(|x| x.n == n && x.b == b && x.e == e).unwrap();
                prop_assert!(row.acc200 >= r);
            }
        }
    }
}
