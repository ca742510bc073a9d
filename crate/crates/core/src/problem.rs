//! The joint allocation problem assembled from a scenario: per-server
//! objective terms, local feasible sets and the coupled energy budget.
//!
//! The decision vector interleaves `⟨n'_m, n''_m⟩` per device in global
//! device order, so server `k` owns the contiguous block `offsets()[k]`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::energy::EnergyCurve;
use crate::error::{Error, Result};
use crate::loadmodel::{self, LoadCoefficients};
use crate::scalar::Scalar;
use crate::scenario::{Mode, ScenarioConfig};

/// Device-level objective terms and box limits.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceTerms<T> {
    pub rho: T,
    /// Licensed-band price per unit volume.
    pub beta: T,
    pub ub: EnergyCurve<T>,
    pub lb: EnergyCurve<T>,
}

/// `D_k`: per-band boxes, the per-device collection cap and the server's
/// total-volume interval `[floor, cap]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalSet<T> {
    pub pair_caps: Vec<T>,
    pub ub_caps: Vec<T>,
    pub lb_caps: Vec<T>,
    pub floor: T,
    pub cap: T,
}

impl<T: Scalar> LocalSet<T> {
    pub fn devices(&self) -> usize {
        self.pair_caps.len()
    }

    pub fn dim(&self) -> usize {
        2 * self.devices()
    }

    /// Upper bound of interleaved coordinate `i`.
    pub fn upper(&self, i: usize) -> T {
        if i.is_multiple_of(2) {
            self.ub_caps[i / 2]
        } else {
            self.lb_caps[i / 2]
        }
    }

    /// Largest total volume the device caps allow.
    pub fn max_total(&self) -> T {
        (0..self.devices())
            .map(|m| self.pair_caps[m].min(self.ub_caps[m] + self.lb_caps[m]))
            .sum()
    }

    /// Largest violation of any constraint, relative to the bound's magnitude.
    pub fn violation(&self, x: &[T]) -> T {
        let rel = |excess: T, scale: T| (excess / (T::one() + scale.abs())).max(T::zero());
        let mut worst = T::zero();
        for m in 0..self.devices() {
            let (a, b) = (x[2 * m], x[2 * m + 1]);
            worst = worst
                .max(rel(-a, T::zero()))
                .max(rel(-b, T::zero()))
                .max(rel(a - self.ub_caps[m], self.ub_caps[m]))
                .max(rel(b - self.lb_caps[m], self.lb_caps[m]))
                .max(rel(a + b - self.pair_caps[m], self.pair_caps[m]));
        }
        let total: T = x.iter().copied().sum();
        worst
            .max(rel(total - self.cap, self.cap))
            .max(rel(self.floor - total, self.floor))
    }

    pub fn scaled(&self, volume: T) -> Self {
        let s = |v: &Vec<T>| v.iter().map(|&c| c / volume).collect();
        Self {
            pair_caps: s(&self.pair_caps),
            ub_caps: s(&self.ub_caps),
            lb_caps: s(&self.lb_caps),
            floor: self.floor / volume,
            cap: self.cap / volume,
        }
    }
}

/// Everything one edge server knows about its own subproblem.
///
/// `f_k(n_k) = weight·(compute_cap − kappa·Σ n_k) + gamma·(c^u_k + c^l_k)`
/// with `weight = 1/K`.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerModel<T> {
    pub index: usize,
    pub weight: T,
    pub gamma: T,
    /// Load per unit volume.
    pub kappa: T,
    pub compute_cap: T,
    pub data_cap: T,
    pub devices: Vec<DeviceTerms<T>>,
    pub set: LocalSet<T>,
}

impl<T: Scalar> ServerModel<T> {
    pub fn dim(&self) -> usize {
        2 * self.devices.len()
    }

    pub fn utilization_slack(&self, x: &[T]) -> T {
        let total: T = x.iter().copied().sum();
        self.weight * (self.compute_cap - self.kappa * total)
    }

    pub fn energy(&self, x: &[T]) -> T {
        self.devices
            .iter()
            .enumerate()
            .map(|(m, d)| d.ub.value(x[2 * m]) + d.lb.value(x[2 * m + 1]))
            .sum()
    }

    pub fn cost(&self, x: &[T]) -> T {
        self.devices
            .iter()
            .enumerate()
            .map(|(m, d)| {
                d.rho * (d.ub.value(x[2 * m]) + d.lb.value(x[2 * m + 1])) + d.beta * x[2 * m + 1]
            })
            .sum()
    }

    pub fn objective(&self, x: &[T]) -> T {
        self.utilization_slack(x) + self.gamma * self.cost(x)
    }

    /// First and second derivative of `f_k` along coordinate `i` at value `v`.
    #[inline]
    pub fn coordinate_derivatives(&self, i: usize, v: T) -> (T, T) {
        let d = &self.devices[i / 2];
        let linear = -self.weight * self.kappa;
        if i.is_multiple_of(2) {
            (
                linear + self.gamma * d.rho * d.ub.derivative(v),
                self.gamma * d.rho * d.ub.second_derivative(v),
            )
        } else {
            (
                linear + self.gamma * (d.rho * d.lb.derivative(v) + d.beta),
                self.gamma * d.rho * d.lb.second_derivative(v),
            )
        }
    }

    pub fn gradient(&self, x: &[T]) -> Vec<T> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| self.coordinate_derivatives(i, v).0)
            .collect()
    }

    pub fn curve(&self, i: usize) -> &EnergyCurve<T> {
        let d = &self.devices[i / 2];
        if i.is_multiple_of(2) {
            &d.ub
        } else {
            &d.lb
        }
    }
}

/// Unit changes between the bit-level problem and its normalized form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaling<T> {
    /// Bits per normalized volume unit.
    pub volume: T,
    /// Objective units per normalized objective unit.
    pub objective: T,
    /// Energy units per normalized energy unit.
    pub energy: T,
}

impl<T: Scalar> Scaling<T> {
    pub fn identity() -> Self {
        Self {
            volume: T::one(),
            objective: T::one(),
            energy: T::one(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParts<T> {
    pub objective: T,
    pub utilization_slack: T,
    pub cost: T,
    pub energy: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Problem<T> {
    pub servers: Vec<ServerModel<T>>,
    pub energy_budget: T,
    pub mode: Mode,
    /// How this instance relates to bit units (identity for [`Problem::from_config`]).
    pub scaling: Scaling<T>,
}

fn coefficients_for<T: Scalar>(
    cfg: &ScenarioConfig<T>,
    k: usize,
    fallback: &LoadCoefficients<T>,
) -> LoadCoefficients<T> {
    cfg.servers[k]
        .load
        .clone()
        .or_else(|| cfg.load.clone())
        .unwrap_or_else(|| fallback.clone())
}

impl<T: Scalar> Problem<T> {
    /// Builds the bit-level problem. Load coefficients come from the server,
    /// then the network, then the fitted measurement table.
    pub fn from_config(cfg: &ScenarioConfig<T>) -> Result<Self> {
        let fallback = loadmodel::reference_coefficients::<T>();
        let weight = T::one() / T::from_usize_lossy(cfg.num_servers());
        let mode = cfg.mode;
        let servers = cfg
            .servers
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let coeffs = coefficients_for(cfg, k, &fallback);
                let kappa = loadmodel::kappa(s.batch, s.passes, &coeffs, cfg.bits_per_sample);
                let compute_limit = if kappa > T::zero() {
                    s.compute_cap / kappa
                } else {
                    T::infinity()
                };
                let devices: Vec<DeviceTerms<T>> = s
                    .devices
                    .iter()
                    .map(|d| DeviceTerms {
                        rho: d.rho,
                        beta: d.beta_bit,
                        ub: EnergyCurve::unlicensed(d, cfg.tau, cfg.bw_ub),
                        lb: EnergyCurve::licensed(d, cfg.tau, cfg.bw_lb),
                    })
                    .collect();
                let set = LocalSet {
                    pair_caps: s.devices.iter().map(|d| d.cap_bits).collect(),
                    ub_caps: s
                        .devices
                        .iter()
                        .zip(&devices)
                        .map(|(d, t)| {
                            if mode.allows_ub() {
                                d.cap_bits.min(t.ub.max_bits())
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                    lb_caps: s
                        .devices
                        .iter()
                        .zip(&devices)
                        .map(|(d, t)| {
                            if mode.allows_lb() {
                                d.cap_bits.min(t.lb.max_bits())
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                    floor: s.min_data_bits,
                    cap: s.data_cap_bits.min(compute_limit),
                };
                ServerModel {
                    index: k,
                    weight,
                    gamma: cfg.gamma,
                    kappa,
                    compute_cap: s.compute_cap,
                    data_cap: s.data_cap_bits,
                    devices,
                    set,
                }
            })
            .collect();
        Ok(Self {
            servers,
            energy_budget: cfg.energy_budget,
            mode,
            scaling: Scaling::identity(),
        })
    }

    /// Static feasibility of every `D_k` (caps against floors).
    pub fn check_local_sets(&self) -> Result<()> {
        for s in &self.servers {
            if s.set.cap < s.set.floor {
                return Err(Error::Infeasible(format!(
                    "server {}: effective volume cap {} (data cap / compute limit) is below the data floor {}",
                    s.index, s.set.cap, s.set.floor
                )));
            }
            if s.set.max_total() < s.set.floor {
                return Err(Error::Infeasible(format!(
                    "server {}: device caps allow at most {} bits in this mode, below the data floor {}",
                    s.index,
                    s.set.max_total(),
                    s.set.floor
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.servers.iter().map(|s| s.dim()).sum()
    }

    pub fn offsets(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.servers
            .iter()
            .map(|s| {
                let r = start..start + s.dim();
                start = r.end;
                r
            })
            .collect()
    }

    /// Energy curves of every coordinate in interleaved order.
    pub fn curves(&self) -> Vec<EnergyCurve<T>> {
        self.servers
            .iter()
            .flat_map(|s| s.devices.iter().flat_map(|d| [d.ub, d.lb]))
            .collect()
    }

    pub fn parts(&self, x: &[T]) -> ObjectiveParts<T> {
        let mut parts = ObjectiveParts {
            objective: T::zero(),
            utilization_slack: T::zero(),
            cost: T::zero(),
            energy: T::zero(),
        };
        for (s, r) in self.servers.iter().zip(self.offsets()) {
            let xk = &x[r];
            let slack = s.utilization_slack(xk);
            let cost = s.cost(xk);
            parts.utilization_slack += slack;
            parts.cost += cost;
            parts.objective += slack + s.gamma * cost;
            parts.energy += s.energy(xk);
        }
        parts
    }

    pub fn objective(&self, x: &[T]) -> T {
        self.servers
            .iter()
            .zip(self.offsets())
            .map(|(s, r)| s.objective(&x[r]))
            .sum()
    }

    pub fn energy(&self, x: &[T]) -> T {
        self.servers
            .iter()
            .zip(self.offsets())
            .map(|(s, r)| s.energy(&x[r]))
            .sum()
    }

    pub fn gradient(&self, x: &[T]) -> Vec<T> {
        self.servers
            .iter()
            .zip(self.offsets())
            .flat_map(|(s, r)| s.gradient(&x[r]))
            .collect()
    }

    /// Human-readable list of violated constraints at relative tolerance `tol`.
    pub fn violations(&self, x: &[T], tol: T) -> Vec<String> {
        let mut out = Vec::new();
        for (s, r) in self.servers.iter().zip(self.offsets()) {
            let v = s.set.violation(&x[r]);
            if v > tol {
                out.push(format!(
                    "server {}: local constraints violated by {:e} (relative)",
                    s.index,
                    v.as_f64()
                ));
            }
        }
        let e = self.energy(x);
        if e > self.energy_budget * (T::one() + tol) {
            out.push(format!("energy {e} exceeds budget {}", self.energy_budget));
        }
        out
    }

    /// Equivalent problem in units where the largest device cap, the
    /// all-idle utilization slack and the energy budget are 1.
    pub fn normalized(&self) -> Self {
        let volume = self
            .servers
            .iter()
            .flat_map(|s| s.set.pair_caps.iter().copied())
            .fold(T::zero(), T::max);
        let volume = if volume > T::zero() { volume } else { T::one() };
        let objective = self
            .servers
            .iter()
            .map(|s| s.weight * s.compute_cap)
            .sum::<T>();
        let energy = self.energy_budget;
        let servers = self
            .servers
            .iter()
            .map(|s| ServerModel {
                index: s.index,
                weight: s.weight,
                gamma: s.gamma / objective,
                kappa: s.kappa * volume / objective,
                compute_cap: s.compute_cap / objective,
                data_cap: s.data_cap / volume,
                devices: s
                    .devices
                    .iter()
                    .map(|d| DeviceTerms {
                        rho: d.rho * energy,
                        beta: d.beta * volume,
                        ub: EnergyCurve::new(d.ub.coeff / energy, d.ub.span / volume),
                        lb: EnergyCurve::new(d.lb.coeff / energy, d.lb.span / volume),
                    })
                    .collect(),
                set: s.set.scaled(volume),
            })
            .collect();
        Self {
            servers,
            energy_budget: T::one(),
            mode: self.mode,
            scaling: Scaling {
                volume: volume * self.scaling.volume,
                objective: objective * self.scaling.objective,
                energy: energy * self.scaling.energy,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::load_config;
    use approx::assert_relative_eq;

    const DOC: &str = r#"{
        "tau": 1.0, "bw_ub": 2000.0, "bw_lb": 800.0, "energy_budget": 3.0, "gamma": 2.0,
        "bits_per_sample": 10, "load": {"c0": 0.001, "c1": 0.0001},
        "servers": [
          {"id": 0, "compute_cap": 0.4, "data_cap_bits": 5000, "batch": 10, "passes": 5, "min_data_bits": 100,
           "devices": [
             {"id": 0, "rho": 1.5, "beta_bit": 1e-4, "gain_ub": 2.0, "gain_lb": 1.0, "noise_ub": 0.1, "noise_lb": 0.2, "access_prob": 0.4, "cap_bits": 900},
             {"id": 1, "rho": 0.5, "beta_bit": 2e-4, "gain_ub": 1.0, "gain_lb": 1.0, "noise_ub": 0.1, "noise_lb": 0.1, "access_prob": 0.8, "cap_bits": 700}]},
          {"id": 1, "compute_cap": 0.9, "data_cap_bits": 3000, "batch": 20, "passes": 20,
           "devices": [
             {"id": 2, "rho": 1.0, "beta_bit": 0.0, "gain_ub": 1.0, "gain_lb": 3.0, "noise_ub": 0.3, "noise_lb": 0.1, "access_prob": 1.0, "cap_bits": 1200}]}]
    }"#;

    fn sample_point(p: &Problem<f64>) -> Vec<f64> {
        (0..p.dim()).map(|i| 37.0 + 11.0 * i as f64).collect()
    }

    #[test]
    fn kappa_and_caps_follow_load_model() {
        let cfg = load_config::<f64>(DOC).unwrap();
        let p = Problem::from_config(&cfg).unwrap();
        // e·(c0/b + c1)/bits_per_sample = 5·(1e-4 + 1e-4)/10
        assert_relative_eq!(p.servers[0].kappa, 1e-4, max_relative = 1e-12);
        assert_relative_eq!(p.servers[0].set.cap, 4000.0, max_relative = 1e-12);
        assert_eq!(p.servers[1].set.cap, 3000.0);
        assert_eq!(p.offsets(), vec![0..4, 4..6]);
    }

    #[test]
    fn normalized_problem_is_equivalent() {
        let cfg = load_config::<f64>(DOC).unwrap();
        let p = Problem::from_config(&cfg).unwrap();
        let q = p.normalized();
        let x = sample_point(&p);
        let y: Vec<f64> = x.iter().map(|v| v / q.scaling.volume).collect();
        assert_relative_eq!(
            q.objective(&y) * q.scaling.objective,
            p.objective(&x),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            q.energy(&y) * q.scaling.energy,
            p.energy(&x),
            max_relative = 1e-12
        );
        assert_relative_eq!(q.parts(&y).cost, p.parts(&x).cost, max_relative = 1e-12);
        assert_eq!(q.energy_budget, 1.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = load_config::<f64>(DOC).unwrap();
        let p = Problem::from_config(&cfg).unwrap().normalized();
        let x: Vec<f64> = (0..p.dim()).map(|i| 0.05 + 0.03 * i as f64).collect();
        let g = p.gradient(&x);
        for i in 0..x.len() {
            let h = 1e-6;
            let mut a = x.clone();
            let mut b = x.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (p.objective(&a) - p.objective(&b)) / (2.0 * h);
            assert_relative_eq!(fd, g[i], max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn lb_only_mode_zeroes_unlicensed_caps() {
        let mut cfg = load_config::<f64>(DOC).unwrap();
        cfg.mode = Mode::LbOnly;
        let p = Problem::from_config(&cfg).unwrap();
        assert!(p
            .servers
            .iter()
            .all(|s| s.set.ub_caps.iter().all(|&c| c == 0.0)));
        assert!(p.servers[0].set.lb_caps.iter().all(|&c| c > 0.0));
    }

    #[test]
    fn floor_above_compute_limit_is_infeasible() {
        let mut cfg = load_config::<f64>(DOC).unwrap();
        cfg.servers[0].compute_cap = 0.001;
        let p = Problem::from_config(&cfg).unwrap();
        assert!(matches!(p.check_local_sets(), Err(Error::Infeasible(_))));
    }
}
