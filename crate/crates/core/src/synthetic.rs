//! Seeded random scenarios for tests, benchmarks and the shipped example
//! configurations.
//!
//! Parameters are chosen so that neither the energy budget nor the caps make
//! the optimum trivial and the objective is of order one. `bit_scale`
//! shrinks every volume (caps, bandwidths, bits per sample, per-bit prices
//! scaled inversely) without changing the continuous problem, which makes
//! exhaustive lattice search affordable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::admm::rounding::energy_anchor;
use crate::error::Result;
use crate::loadmodel;
use crate::problem::Problem;
use crate::scalar::Scalar;
use crate::scenario::{DeviceParams, Mode, ScenarioConfig, ServerParams, DEFAULT_BITS_PER_SAMPLE};

/// Devices per server.
pub type Shape = Vec<usize>;

/// `K ∈ 1..=4` servers with `1..=5` devices each.
pub fn random_shape(seed: u64) -> Shape {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(9);
    let k = rng.random_range(1..=4);
    (0..k).map(|_| rng.random_range(1..=5)).collect()
}

struct Ranges {
    noise_over_gain: (f64, f64),
    compute_cap: (f64, f64),
    floor_fraction: (f64, f64),
    budget_fraction: (f64, f64),
}

fn build<T: Scalar>(seed: u64, shape: &[usize], bit_scale: f64, r: &Ranges) -> ScenarioConfig<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bps = DEFAULT_BITS_PER_SAMPLE * bit_scale;
    let (bw_ub, bw_lb) = (2.0e5 * bit_scale, 1.8e5 * bit_scale);
    let coeffs = loadmodel::reference_coefficients::<f64>();
    let (batch, passes) = (10u32, 5u32);
    let kappa = loadmodel::kappa(batch, passes, &coeffs, bps);
    let mut next = 0;
    let mut reference_energy = 0.0;
    let servers = shape
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let devices: Vec<DeviceParams<T>> = (0..m)
                .map(|_| {
                    let access: f64 = rng.random_range(0.2..0.8);
                    let ratio_ub: f64 = rng.random_range(r.noise_over_gain.0..r.noise_over_gain.1);
                    let ratio_lb: f64 = rng.random_range(r.noise_over_gain.0..r.noise_over_gain.1);
                    let samples: f64 = rng.random_range(50.0..150.0);
                    let d = DeviceParams {
                        id: next,
                        rho: T::lit(rng.random_range(0.5..2.0)),
                        beta_bit: T::lit(rng.random_range(1e-8..3e-8) / bit_scale),
                        gain_ub: T::one(),
                        gain_lb: T::one(),
                        noise_ub: T::lit(ratio_ub),
                        noise_lb: T::lit(ratio_lb),
                        access_prob: T::lit(access),
                        cap_bits: T::lit((samples * bps).round()),
                    };
                    // energy with both bands at one doubling
                    reference_energy += ratio_ub + ratio_lb;
                    next += 1;
                    d
                })
                .collect();
            let total_cap: f64 = devices.iter().map(|d| d.cap_bits.as_f64()).sum();
            let compute_cap: f64 = rng.random_range(r.compute_cap.0..r.compute_cap.1);
            let data_cap = (total_cap * rng.random_range(0.6..1.2)).round();
            let reachable = data_cap.min(compute_cap / kappa);
            let floor =
                (reachable * rng.random_range(r.floor_fraction.0..=r.floor_fraction.1)).floor();
            ServerParams {
                id: k,
                compute_cap: T::lit(compute_cap),
                data_cap_bits: T::lit(data_cap),
                batch,
                passes,
                min_data_bits: T::lit(floor),
                load: None,
                devices,
            }
        })
        .collect();
    let budget = reference_energy * rng.random_range(r.budget_fraction.0..r.budget_fraction.1);
    ScenarioConfig {
        tau: T::one(),
        bw_ub: T::lit(bw_ub),
        bw_lb: T::lit(bw_lb),
        energy_budget: T::lit(budget),
        gamma: T::one(),
        bits_per_sample: T::lit(bps),
        mode: Mode::Joint,
        load: None,
        servers,
    }
}

const SMALL: Ranges = Ranges {
    noise_over_gain: (0.001, 0.005),
    compute_cap: (0.2, 1.0),
    floor_fraction: (0.0, 0.1),
    budget_fraction: (0.3, 1.5),
};

const ANALOG: Ranges = Ranges {
    noise_over_gain: (0.0005, 0.002),
    compute_cap: (0.5, 1.0),
    floor_fraction: (0.0, 0.0),
    budget_fraction: (0.2, 0.6),
};

/// Random instance with the given devices per server.
pub fn instance_with_shape<T: Scalar>(
    seed: u64,
    shape: &[usize],
    bit_scale: f64,
) -> ScenarioConfig<T> {
    build(seed, shape, bit_scale, &SMALL)
}

/// Random instance with a random shape (see [`random_shape`]).
pub fn random_instance<T: Scalar>(seed: u64) -> ScenarioConfig<T> {
    instance_with_shape(seed, &random_shape(seed), 1.0)
}

/// Same instance as [`random_instance`] with data floors removed.
pub fn random_instance_without_floors<T: Scalar>(seed: u64, bit_scale: f64) -> ScenarioConfig<T> {
    let mut cfg: ScenarioConfig<T> = instance_with_shape(seed, &random_shape(seed), bit_scale);
    for s in &mut cfg.servers {
        s.min_data_bits = T::zero();
    }
    cfg
}

/// Four servers with ten devices each, short-range unlicensed radios and a
/// metered licensed uplink.
pub fn paper_analog<T: Scalar>(seed: u64) -> ScenarioConfig<T> {
    build(seed, &[10, 10, 10, 10], 1.0, &ANALOG)
}

/// Fixes every server's total volume (floor = cap) at 90% of the most any
/// mode can carry and raises the energy budget, if needed, to 1.2 times the
/// least energy of the neediest mode. With the volume fixed the objective
/// differs between modes only through the cost.
pub fn pin_volumes<T: Scalar>(cfg: &ScenarioConfig<T>) -> Result<ScenarioConfig<T>> {
    let modes = [Mode::Joint, Mode::LbOnly, Mode::UbOnly];
    let mut pinned = cfg.clone();
    let mut limits = vec![T::infinity(); cfg.num_servers()];
    for mode in modes {
        let mut c = cfg.clone();
        c.mode = mode;
        for (l, s) in limits.iter_mut().zip(Problem::from_config(&c)?.servers) {
            *l = l.min(s.set.cap).min(s.set.max_total());
        }
    }
    for (s, l) in pinned.servers.iter_mut().zip(limits) {
        let v = (l * T::lit(0.9)).floor();
        s.data_cap_bits = v;
        s.min_data_bits = v;
    }
    let mut needed = T::zero();
    for mode in modes {
        let mut c = pinned.clone();
        c.mode = mode;
        let p = Problem::from_config(&c)?;
        needed = needed.max(p.energy(&energy_anchor(&p)));
    }
    pinned.energy_budget = pinned.energy_budget.max(needed * T::lit(1.2));
    Ok(pinned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::Problem;

    #[test]
    fn shapes_stay_in_range() {
        for seed in 0..200 {
            let s = random_shape(seed);
            assert!((1..=4).contains(&s.len()));
            assert!(s.iter().all(|m| (1..=5).contains(m)));
        }
    }

    #[test]
    fn instances_validate_and_are_deterministic() {
        for seed in 0..30 {
            let a: ScenarioConfig<f64> = random_instance(seed);
            a.validate().unwrap();
            Problem::from_config(&a)
                .unwrap()
                .check_local_sets()
                .unwrap();
            assert_eq!(a, random_instance(seed));
        }
        paper_analog::<f64>(1).validate().unwrap();
    }

    #[test]
    fn bit_scale_preserves_the_continuous_objective() {
        let a: ScenarioConfig<f64> = instance_with_shape(4, &[2, 1], 1.0);
        let b: ScenarioConfig<f64> = instance_with_shape(4, &[2, 1], 1e-3);
        let (pa, pb) = (
            Problem::from_config(&a).unwrap(),
            Problem::from_config(&b).unwrap(),
        );
        let x: Vec<f64> = (0..pa.dim()).map(|i| 1.0e5 + 3.0e4 * i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v * 1e-3).collect();
        assert!(
            (pa.objective(&x) - pb.objective(&y)).abs() <= 1e-12 * pa.objective(&x).abs().max(1.0)
        );
        assert!((pa.energy(&x) - pb.energy(&y)).abs() <= 1e-12 * pa.energy(&x));
    }

    #[test]
    fn pinned_volumes_are_feasible_in_every_mode() {
        for seed in 0..10 {
            let cfg = pin_volumes(&random_instance::<f64>(seed)).unwrap();
            for mode in [Mode::Joint, Mode::LbOnly, Mode::UbOnly] {
                let mut c = cfg.clone();
                c.mode = mode;
                let p = Problem::from_config(&c).unwrap();
                p.check_local_sets().unwrap();
                assert!(p.servers.iter().all(|s| s.set.floor == s.set.cap));
                assert!(p.energy(&energy_anchor(&p)) <= p.energy_budget);
            }
        }
    }
}
