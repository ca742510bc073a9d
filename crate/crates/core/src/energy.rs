//! Upload energy and monetary cost on the unlicensed (UB) and licensed (LB) bands.
//!
//! Sending `n` bits within `τ` seconds over a band of bandwidth `B` at an
//! effective access share `P` takes `(σ/h)·(2^{n/(τ·B·P)} − 1)` energy units.
//! The licensed band has `P = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scenario::{Allocation, DeviceParams, ScenarioConfig, ServerParams};

/// Largest admissible `bits / (τ·B·P)`; larger volumes report [`Error::Overflow`].
pub const MAX_EXPONENT: f64 = 60.0;

/// `ν(x) = coeff · (2^{x/span} − 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyCurve<T> {
    pub coeff: T,
    pub span: T,
}

impl<T: Scalar> EnergyCurve<T> {
    pub fn new(coeff: T, span: T) -> Self {
        Self { coeff, span }
    }

    pub fn unlicensed(device: &DeviceParams<T>, tau: T, bw_ub: T) -> Self {
        Self::new(
            device.noise_ub / device.gain_ub,
            tau * bw_ub * device.access_prob,
        )
    }

    pub fn licensed(device: &DeviceParams<T>, tau: T, bw_lb: T) -> Self {
        Self::new(device.noise_lb / device.gain_lb, tau * bw_lb)
    }

    #[inline]
    fn rate(&self) -> T {
        T::LN_2() / self.span
    }

    /// Largest volume whose exponent stays within [`MAX_EXPONENT`].
    pub fn max_bits(&self) -> T {
        T::lit(MAX_EXPONENT) * self.span
    }

    /// Energy without the overflow guard; callers keep `bits <= max_bits()`.
    #[inline]
    pub fn value(&self, bits: T) -> T {
        self.coeff * (bits * self.rate()).exp_m1()
    }

    #[inline]
    pub fn derivative(&self, bits: T) -> T {
        let r = self.rate();
        self.coeff * r * (bits * r).exp()
    }

    #[inline]
    pub fn second_derivative(&self, bits: T) -> T {
        let r = self.rate();
        self.coeff * r * r * (bits * r).exp()
    }

    /// Volume at which the energy equals `energy` (inverse of [`value`](Self::value)).
    pub fn inverse(&self, energy: T) -> T {
        (energy / self.coeff).ln_1p() / self.rate()
    }

    /// Checked energy for a nonnegative volume.
    pub fn energy(&self, bits: T) -> Result<T> {
        if !(bits >= T::zero()) || !bits.is_finite() {
            return Err(Error::validation(
                "energy",
                format!("volume must be finite and >= 0 (got {bits})"),
            ));
        }
        let exponent = bits / self.span;
        if exponent > T::lit(MAX_EXPONENT) {
            return Err(Error::Overflow {
                bits: bits.as_f64(),
                exponent: exponent.as_f64(),
                limit: MAX_EXPONENT,
            });
        }
        Ok(self.value(bits))
    }
}

pub fn energy_ub<T: Scalar>(device: &DeviceParams<T>, bits: T, tau: T, bw_ub: T) -> Result<T> {
    EnergyCurve::unlicensed(device, tau, bw_ub).energy(bits)
}

pub fn energy_lb<T: Scalar>(device: &DeviceParams<T>, bits: T, tau: T, bw_lb: T) -> Result<T> {
    EnergyCurve::licensed(device, tau, bw_lb).energy(bits)
}

/// `c^u_k = Σ_m ρ_m ν^u_m(n'_m)` over the server's devices.
pub fn cost_ub<T: Scalar>(
    server: &ServerParams<T>,
    alloc: &Allocation<T>,
    cfg: &ScenarioConfig<T>,
) -> Result<T> {
    server.devices.iter().try_fold(T::zero(), |acc, d| {
        Ok(acc + d.rho * energy_ub(d, alloc.ub_bits[d.id], cfg.tau, cfg.bw_ub)?)
    })
}

/// `c^l_k = Σ_m (ρ_m ν^l_m(n''_m) + β_m n''_m)` over the server's devices.
pub fn cost_lb<T: Scalar>(
    server: &ServerParams<T>,
    alloc: &Allocation<T>,
    cfg: &ScenarioConfig<T>,
) -> Result<T> {
    server.devices.iter().try_fold(T::zero(), |acc, d| {
        let bits = alloc.lb_bits[d.id];
        Ok(acc + d.rho * energy_lb(d, bits, cfg.tau, cfg.bw_lb)? + d.beta_bit * bits)
    })
}

/// Network energy `ν = Σ_m (ν^u_m + ν^l_m)`.
pub fn total_energy<T: Scalar>(alloc: &Allocation<T>, cfg: &ScenarioConfig<T>) -> Result<T> {
    cfg.devices().try_fold(T::zero(), |acc, (_, d)| {
        Ok(acc
            + energy_ub(d, alloc.ub_bits[d.id], cfg.tau, cfg.bw_ub)?
            + energy_lb(d, alloc.lb_bits[d.id], cfg.tau, cfg.bw_lb)?)
    })
}

/// Network cost `c = Σ_k (c^u_k + c^l_k)`.
pub fn total_cost<T: Scalar>(alloc: &Allocation<T>, cfg: &ScenarioConfig<T>) -> Result<T> {
    cfg.servers.iter().try_fold(T::zero(), |acc, s| {
        Ok(acc + cost_ub(s, alloc, cfg)? + cost_lb(s, alloc, cfg)?)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceEnergy<T> {
    pub device_id: usize,
    pub server_id: usize,
    pub energy_ub: T,
    pub energy_lb: T,
    pub money_ub: T,
    pub money_lb: T,
}

impl<T: Scalar> DeviceEnergy<T> {
    pub fn money(&self) -> T {
        self.money_ub + self.money_lb
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerCost<T> {
    pub cost_ub: T,
    pub cost_lb: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown<T> {
    pub devices: Vec<DeviceEnergy<T>>,
    pub servers: Vec<ServerCost<T>>,
    pub total_energy: T,
    pub total_cost: T,
}

/// Per-device, per-server and network totals for one allocation.
pub fn breakdown<T: Scalar>(
    alloc: &Allocation<T>,
    cfg: &ScenarioConfig<T>,
) -> Result<EnergyBreakdown<T>> {
    let mut devices = Vec::with_capacity(cfg.num_devices());
    let mut servers = Vec::with_capacity(cfg.num_servers());
    for (k, s) in cfg.servers.iter().enumerate() {
        let mut cost = ServerCost {
            cost_ub: T::zero(),
            cost_lb: T::zero(),
        };
        for d in &s.devices {
            let (ub, lb) = (alloc.ub_bits[d.id], alloc.lb_bits[d.id]);
            let energy_ub = energy_ub(d, ub, cfg.tau, cfg.bw_ub)?;
            let energy_lb = energy_lb(d, lb, cfg.tau, cfg.bw_lb)?;
            let row = DeviceEnergy {
                device_id: d.id,
                server_id: k,
                energy_ub,
                energy_lb,
                money_ub: d.rho * energy_ub,
                money_lb: d.rho * energy_lb + d.beta_bit * lb,
            };
            cost.cost_ub += row.money_ub;
            cost.cost_lb += row.money_lb;
            devices.push(row);
        }
        servers.push(cost);
    }
    let total_energy = devices.iter().map(|d| d.energy_ub + d.energy_lb).sum();
    let total_cost = servers.iter().map(|s| s.cost_ub + s.cost_lb).sum();
    Ok(EnergyBreakdown {
        devices,
        servers,
        total_energy,
        total_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn device(coeff_ub: f64, coeff_lb: f64, access: f64) -> DeviceParams<f64> {
        DeviceParams {
            id: 0,
            rho: 1.0,
            beta_bit: 0.0,
            gain_ub: 1.0,
            gain_lb: 1.0,
            noise_ub: coeff_ub,
            noise_lb: coeff_lb,
            access_prob: access,
            cap_bits: 1e9,
        }
    }

    #[test]
    fn zero_volume_costs_nothing() {
        let d = device(3.0, 5.0, 0.3);
        assert_eq!(energy_ub(&d, 0.0, 1.0, 100.0).unwrap(), 0.0);
        assert_eq!(energy_lb(&d, 0.0, 1.0, 100.0).unwrap(), 0.0);
    }

    #[test]
    fn unlicensed_unit_exponent() {
        // τ·B·P = 1 · 2000 · 0.5 = 1000
        let d = device(1.0, 1.0, 0.5);
        assert_relative_eq!(
            energy_ub(&d, 1000.0, 1.0, 2000.0).unwrap(),
            1.0,
            max_relative = 1e-15
        );
    }

    #[test]
    fn unlicensed_fractional_exponent() {
        // 1e-3 · (2^1.6 − 1), 2^1.6 = 3.0314331330207961 (50-digit evaluation)
        let d = device(1e-3, 1.0, 0.5);
        let v = energy_ub(&d, 100_000.0, 1.0, 125_000.0).unwrap();
        assert_relative_eq!(v, 2.0314331330207961e-3, max_relative = 1e-14);
    }

    #[test]
    fn licensed_examples() {
        let d = device(1.0, 2.0, 1.0);
        assert_relative_eq!(
            energy_lb(&d, 500.0, 1.0, 500.0).unwrap(),
            2.0,
            max_relative = 1e-15
        );
        // 2^2.5 − 1 = 4.656_854_249_492_38
        let d = device(1.0, 1.0, 1.0);
        let v = energy_lb(&d, 2.5e4, 1.0, 1e4).unwrap();
        assert_relative_eq!(v, 4.656_854_249_492_38, max_relative = 1e-14);
    }

    #[test]
    fn licensed_band_ignores_access_probability() {
        let a = device(1.0, 1.0, 0.1);
        let b = device(1.0, 1.0, 0.9);
        assert_eq!(
            energy_lb(&a, 700.0, 1.0, 1000.0).unwrap(),
            energy_lb(&b, 700.0, 1.0, 1000.0).unwrap()
        );
    }

    #[test]
    fn overflow_is_reported() {
        let d = device(1.0, 1.0, 1.0);
        assert!(matches!(
            energy_ub(&d, 61.0, 1.0, 1.0),
            Err(Error::Overflow { .. })
        ));
        assert!(energy_ub(&d, 60.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn negative_volume_rejected() {
        let d = device(1.0, 1.0, 1.0);
        assert!(energy_lb(&d, -1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn f32_evaluation_agrees() {
        let curve = EnergyCurve::<f32>::new(1.0, 1000.0);
        assert!((curve.energy(1000.0).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn inverse_round_trips() {
        let c = EnergyCurve::new(0.3, 250.0);
        assert_relative_eq!(c.inverse(c.value(812.5)), 812.5, max_relative = 1e-12);
    }

    proptest! {
        #[test]
        fn strictly_increasing(a in 0.0..20.0f64, d in 1e-3..10.0f64, coeff in 0.01..10.0f64, span in 0.5..5.0f64) {
            let c = EnergyCurve::new(coeff, span);
            prop_assert!(c.energy(a + d).unwrap() > c.energy(a).unwrap());
        }

        #[test]
        fn midpoint_convex(a in 0.0..40.0f64, b in 0.0..40.0f64, coeff in 0.01..10.0f64, span in 0.5..5.0f64) {
            let c = EnergyCurve::new(coeff, span);
            let mid = c.value(0.5 * (a + b));
            prop_assert!(mid <= 0.5 * (c.value(a) + c.value(b)) * (1.0 + 1e-12));
        }

        #[test]
        fn lower_access_costs_more(bits in 1.0..25.0f64, p in 0.05..1.0f64, shrink in 0.1..0.99f64) {
            let hi = device(1.0, 1.0, p);
            let lo = device(1.0, 1.0, p * shrink);
            prop_assert!(energy_ub(&lo, bits, 1.0, 100.0).unwrap() > energy_ub(&hi, bits, 1.0, 100.0).unwrap());
        }

        #[test]
        fn derivative_matches_central_difference(x in 0.0..40.0f64, coeff in 0.01..10.0f64, span in 0.5..5.0f64) {
            let c = EnergyCurve::new(coeff, span);
            let h = 1e-4 * span;
            let fd = (c.value(x + h) - c.value(x - h)) / (2.0 * h);
            let exact = c.derivative(x);
            prop_assert!(((fd - exact) / exact).abs() < 1e-6);
        }
    }
}
