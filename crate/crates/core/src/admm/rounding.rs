//! Turns a continuous solution into whole-bit volumes that satisfy every
//! constraint exactly.

use crate::error::{Error, Result};
use crate::problem::Problem;
use crate::scalar::Scalar;

use super::subproblem::min_energy_point;

#[derive(Clone, Debug, PartialEq)]
pub struct RoundingReport<T> {
    /// Fraction of the way from the least-energy anchor kept by the energy
    /// repair (1 when no repair was needed).
    pub repair_factor: T,
    pub floor_bits_added: usize,
    pub bits_added: usize,
}

/// Least-energy point of every `D_k`, concatenated.
pub fn energy_anchor<T: Scalar>(problem: &Problem<T>) -> Vec<T> {
    problem
        .servers
        .iter()
        .flat_map(|s| min_energy_point(s).x)
        .collect()
}

/// Fails when the data floors alone exceed the energy budget.
pub fn check_energy_floor<T: Scalar>(problem: &Problem<T>) -> Result<Vec<T>> {
    let anchor = energy_anchor(problem);
    let e = problem.energy(&anchor);
    if e > problem.energy_budget {
        return Err(Error::Infeasible(format!(
            "energy budget {} cannot cover the data floors (least energy {e})",
            problem.energy_budget
        )));
    }
    Ok(anchor)
}

/// Moves `x` towards `anchor` until the energy is at most `budget`.
fn pull_towards<T: Scalar>(problem: &Problem<T>, anchor: &[T], x: &[T], budget: T) -> (Vec<T>, T) {
    let mix = |t: T| -> Vec<T> {
        anchor
            .iter()
            .zip(x)
            .map(|(&a, &v)| a + t * (v - a))
            .collect()
    };
    if problem.energy(x) <= budget {
        return (x.to_vec(), T::one());
    }
    let (mut lo, mut hi) = (T::zero(), T::one());
    for _ in 0..200 {
        let mid = (lo + hi) * T::lit(0.5);
        if mid <= lo || mid >= hi {
            break;
        }
        if problem.energy(&mix(mid)) <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (mix(lo), lo)
}

struct Lattice<'a, T> {
    problem: &'a Problem<T>,
    server_of: Vec<usize>,
    local: Vec<usize>,
    totals: Vec<T>,
    energy: T,
}

impl<'a, T: Scalar> Lattice<'a, T> {
    fn new(problem: &'a Problem<T>, y: &[T]) -> Self {
        let mut server_of = Vec::with_capacity(y.len());
        let mut local = Vec::with_capacity(y.len());
        let mut totals = Vec::new();
        for (k, r) in problem.offsets().into_iter().enumerate() {
            totals.push(y[r.clone()].iter().copied().sum());
            for (j, _) in r.enumerate() {
                server_of.push(k);
                local.push(j);
            }
        }
        Self {
            problem,
            server_of,
            local,
            totals,
            energy: problem.energy(y),
        }
    }

    /// Energy and objective change of adding one bit at `i`, if that keeps `D_k`.
    fn step(&self, y: &[T], i: usize) -> Option<(T, T)> {
        let k = self.server_of[i];
        let j = self.local[i];
        let s = &self.problem.servers[k];
        let one = T::one();
        if y[i] + one > s.set.upper(j) || self.totals[k] + one > s.set.cap {
            return None;
        }
        let partner = if i.is_multiple_of(2) { i + 1 } else { i - 1 };
        if y[i] + y[partner] + one > s.set.pair_caps[j / 2] {
            return None;
        }
        let c = s.curve(j);
        let de = c.value(y[i] + one) - c.value(y[i]);
        let d = &s.devices[j / 2];
        let licensed = if j % 2 == 1 { d.beta } else { T::zero() };
        let df = -s.weight * s.kappa + s.gamma * (d.rho * de + licensed);
        Some((de, df))
    }

    fn add(&mut self, y: &mut [T], i: usize, de: T) {
        y[i] += T::one();
        self.totals[self.server_of[i]] += T::one();
        self.energy += de;
    }
}

/// Floors `x` to whole bits, restores the data floors with the cheapest
/// energy, then adds bits that lower the objective while feasible.
fn round<T: Scalar>(problem: &Problem<T>, x: &[T]) -> (Vec<T>, usize, usize) {
    let mut y: Vec<T> = x.iter().map(|v| v.max(T::zero()).floor()).collect();
    let mut lat = Lattice::new(problem, &y);
    let mut floor_added = 0;
    for (k, r) in problem.offsets().into_iter().enumerate() {
        let floor = problem.servers[k].set.floor.ceil();
        while lat.totals[k] < floor {
            let best = r
                .clone()
                .filter_map(|i| lat.step(&y, i).map(|(de, _)| (i, de)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite energy"));
            let Some((i, de)) = best else { break };
            lat.add(&mut y, i, de);
            floor_added += 1;
        }
    }
    let budget = problem.energy_budget;
    let limit = 4 * y.len() + 16;
    let mut added = 0;
    while added < limit {
        let best = (0..y.len())
            .filter_map(|i| lat.step(&y, i).map(|(de, df)| (i, de, df)))
            .filter(|&(_, de, df)| df < T::zero() && lat.energy + de <= budget)
            .min_by(|a, b| a.2.partial_cmp(&b.2).expect("finite objective"));
        let Some((i, de, _)) = best else { break };
        lat.add(&mut y, i, de);
        added += 1;
    }
    (y, floor_added, added)
}

/// Whole-bit allocation from a continuous point of `∩ D_k`.
pub fn finalize<T: Scalar>(problem: &Problem<T>, x: &[T]) -> Result<(Vec<T>, RoundingReport<T>)> {
    let anchor = check_energy_floor(problem)?;
    let budget = problem.energy_budget;
    let mut target = budget;
    for _ in 0..40 {
        let (pulled, factor) = pull_towards(problem, &anchor, x, target);
        let (y, floor_added, added) = round(problem, &pulled);
        let e = problem.energy(&y);
        if e <= budget && problem.violations(&y, T::zero()).is_empty() {
            return Ok((
                y,
                RoundingReport {
                    repair_factor: factor,
                    floor_bits_added: floor_added,
                    bits_added: added,
                },
            ));
        }
        let excess = (e - budget).max(budget * T::lit(1e-12));
        target -= excess * T::lit(2.0);
        if target <= problem.energy(&anchor) {
            target = problem.energy(&anchor);
        }
    }
    Err(Error::Infeasible(
        "no whole-bit allocation satisfies the energy budget and data floors".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::load_config;

    const DOC: &str = r#"{
        "tau": 1.0, "bw_ub": 200.0, "bw_lb": 150.0, "energy_budget": 0.05, "gamma": 1.0,
        "bits_per_sample": 10, "load": {"c0": 0.001, "c1": 0.0001},
        "servers": [
          {"id": 0, "compute_cap": 0.4, "data_cap_bits": 5000, "batch": 10, "passes": 5, "min_data_bits": 150,
           "devices": [
             {"id": 0, "rho": 1.0, "beta_bit": 1e-6, "gain_ub": 1.0, "gain_lb": 1.0, "noise_ub": 0.01, "noise_lb": 0.01, "access_prob": 0.5, "cap_bits": 300},
             {"id": 1, "rho": 1.0, "beta_bit": 1e-6, "gain_ub": 1.0, "gain_lb": 1.0, "noise_ub": 0.02, "noise_lb": 0.01, "access_prob": 0.7, "cap_bits": 300}]}]
    }"#;

    #[test]
    fn rounding_keeps_every_constraint() {
        let cfg = load_config::<f64>(DOC).unwrap();
        let p = Problem::from_config(&cfg).unwrap();
        let x = vec![120.7, 90.3, 150.9, 80.2];
        let (y, _) = finalize(&p, &x).unwrap();
        assert!(y.iter().all(|v| v.fract() == 0.0));
        assert!(
            p.violations(&y, 0.0).is_empty(),
            "{:?}",
            p.violations(&y, 0.0)
        );
        assert!(y.iter().sum::<f64>() >= 150.0);
    }

    #[test]
    fn floors_beyond_budget_are_reported() {
        let cfg = load_config::<f64>(
            &DOC.replace("\"energy_budget\": 0.05", "\"energy_budget\": 0.0001"),
        )
        .unwrap();
        let p = Problem::from_config(&cfg).unwrap();
        assert!(matches!(
            finalize(&p, &[10.0, 10.0, 10.0, 10.0]),
            Err(Error::Infeasible(_))
        ));
    }
}
