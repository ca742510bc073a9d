//! Problem instance data model: devices, edge servers, the network-wide
//! configuration and the per-device upload allocation.
//!
//! All volumes are carried in bits. Configuration files may give volumes in
//! samples through the `_samples` key variants; those are converted with
//! `bits_per_sample` while loading.

use std::collections::HashSet;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::loadmodel::LoadCoefficients;
use crate::scalar::Scalar;

/// Bits in one sample unless the configuration says otherwise (0.67 KB).
pub const DEFAULT_BITS_PER_SAMPLE: f64 = 5360.0;

fn default_bits_per_sample<T: Scalar>() -> T {
    T::lit(DEFAULT_BITS_PER_SAMPLE)
}

/// Which uplink bands the devices may use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Joint,
    LbOnly,
    UbOnly,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Joint, Mode::LbOnly, Mode::UbOnly];

    pub fn allows_ub(self) -> bool {
        self != Mode::LbOnly
    }

    pub fn allows_lb(self) -> bool {
        self != Mode::UbOnly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Joint => "joint",
            Mode::LbOnly => "lb-only",
            Mode::UbOnly => "ub-only",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Mode::Joint),
            "lb-only" => Ok(Mode::LbOnly),
            "ub-only" => Ok(Mode::UbOnly),
            other => Err(Error::Parse {
                field: "mode".into(),
                message: format!("unknown mode `{other}` (expected joint, lb-only or ub-only)"),
            }),
        }
    }
}

/// One IoT device: prices, channel state on both bands and its collection cap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceParams<T> {
    pub id: usize,
    /// Money per unit of energy.
    pub rho: T,
    /// Money per bit sent over the licensed band.
    pub beta_bit: T,
    pub gain_ub: T,
    pub gain_lb: T,
    pub noise_ub: T,
    pub noise_lb: T,
    /// Probability of occupying the unlicensed channel.
    pub access_prob: T,
    /// Maximum volume the device can collect in one period.
    pub cap_bits: T,
}

/// One edge server together with the devices that upload to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct ServerParams<T> {
    pub id: usize,
    /// Maximum seconds of computation per training round.
    pub compute_cap: T,
    /// Maximum volume the server can receive.
    pub data_cap_bits: T,
    pub batch: u32,
    pub passes: u32,
    #[serde(default = "T::zero")]
    pub min_data_bits: T,
    /// Overrides the network-wide load coefficients for this server.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load: Option<LoadCoefficients<T>>,
    pub devices: Vec<DeviceParams<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct ScenarioConfig<T> {
    /// Upload period in seconds.
    pub tau: T,
    pub bw_ub: T,
    pub bw_lb: T,
    /// Network-wide energy budget.
    pub energy_budget: T,
    /// Weight of the monetary cost against the utilization slack.
    pub gamma: T,
    #[serde(default = "default_bits_per_sample")]
    pub bits_per_sample: T,
    #[serde(default)]
    pub mode: Mode,
    /// Load coefficients used by servers without their own; the fitted
    /// measurement table is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load: Option<LoadCoefficients<T>>,
    pub servers: Vec<ServerParams<T>>,
}

/// Volume keys that may alternatively be given in samples.
const SAMPLE_KEYS: [(&str, &str); 3] = [
    ("data_cap_samples", "data_cap_bits"),
    ("min_data_samples", "min_data_bits"),
    ("cap_samples", "cap_bits"),
];

fn convert_sample_keys(
    obj: &mut serde_json::Map<String, Value>,
    path: &str,
    bps: f64,
) -> Result<()> {
    for (from, to) in SAMPLE_KEYS {
        if let Some(v) = obj.remove(from) {
            let field = format!("{path}.{from}");
            if obj.contains_key(to) {
                return Err(Error::Parse {
                    field,
                    message: format!("both `{from}` and `{to}` given"),
                });
            }
            let samples = v.as_f64().ok_or_else(|| Error::Parse {
                field: field.clone(),
                message: "expected a number".into(),
            })?;
            let bits = serde_json::Number::from_f64(samples * bps).ok_or_else(|| Error::Parse {
                field,
                message: "non-finite volume".into(),
            })?;
            obj.insert(to.to_string(), Value::Number(bits));
        }
    }
    Ok(())
}

fn normalize_document(doc: &mut Value) -> Result<()> {
    let root = doc.as_object_mut().ok_or_else(|| Error::Parse {
        field: "<document>".into(),
        message: "top level must be a JSON object".into(),
    })?;
    let bps = match root.get("bits_per_sample") {
        Some(v) => v.as_f64().ok_or_else(|| Error::Parse {
            field: "bits_per_sample".into(),
            message: "expected a number".into(),
        })?,
        None => DEFAULT_BITS_PER_SAMPLE,
    };
    let Some(Value::Array(servers)) = root.get_mut("servers") else {
        return Ok(());
    };
    for (k, server) in servers.iter_mut().enumerate() {
        let Some(server) = server.as_object_mut() else {
            continue;
        };
        let path = format!("servers[{k}]");
        convert_sample_keys(server, &path, bps)?;
        if let Some(Value::Array(devices)) = server.get_mut("devices") {
            for (j, device) in devices.iter_mut().enumerate() {
                if let Some(device) = device.as_object_mut() {
                    convert_sample_keys(device, &format!("{path}.devices[{j}]"), bps)?;
                }
            }
        }
    }
    Ok(())
}

/// Parses, validates and re-indexes a JSON scenario document.
pub fn load_config<T: Scalar>(source: &str) -> Result<ScenarioConfig<T>> {
    let mut doc: Value = serde_json::from_str(source).map_err(|e| Error::Parse {
        field: "<document>".into(),
        message: e.to_string(),
    })?;
    normalize_document(&mut doc)?;
    let mut cfg: ScenarioConfig<T> =
        serde_path_to_error::deserialize(doc).map_err(|e| Error::Parse {
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
    cfg.validate()?;
    cfg.reindex();
    Ok(cfg)
}

fn positive<T: Scalar>(v: T, location: &str, name: &str) -> Result<()> {
    if v.is_finite() && v > T::zero() {
        Ok(())
    } else {
        Err(Error::validation(
            location,
            format!("{name} must be finite and > 0 (got {v})"),
        ))
    }
}

fn non_negative<T: Scalar>(v: T, location: &str, name: &str) -> Result<()> {
    if v.is_finite() && v >= T::zero() {
        Ok(())
    } else {
        Err(Error::validation(
            location,
            format!("{name} must be finite and >= 0 (got {v})"),
        ))
    }
}

impl<T: Scalar> DeviceParams<T> {
    pub fn validate(&self, location: &str) -> Result<()> {
        positive(self.gain_ub, location, "gain_ub")?;
        positive(self.gain_lb, location, "gain_lb")?;
        positive(self.noise_ub, location, "noise_ub")?;
        positive(self.noise_lb, location, "noise_lb")?;
        if !(self.access_prob > T::zero() && self.access_prob <= T::one()) {
            return Err(Error::validation(
                location,
                format!("access_prob must lie in (0, 1] (got {})", self.access_prob),
            ));
        }
        non_negative(self.rho, location, "rho")?;
        non_negative(self.beta_bit, location, "beta_bit")?;
        non_negative(self.cap_bits, location, "cap_bits")
    }
}

impl<T: Scalar> ServerParams<T> {
    pub fn validate(&self, location: &str) -> Result<()> {
        positive(self.compute_cap, location, "compute_cap")?;
        positive(self.data_cap_bits, location, "data_cap_bits")?;
        non_negative(self.min_data_bits, location, "min_data_bits")?;
        if self.batch < 1 {
            return Err(Error::validation(location, "batch must be >= 1"));
        }
        if self.passes < 1 {
            return Err(Error::validation(location, "passes must be >= 1"));
        }
        if self.min_data_bits > self.data_cap_bits {
            return Err(Error::validation(
                location,
                "min_data_bits must not exceed data_cap_bits",
            ));
        }
        if self.devices.is_empty() {
            return Err(Error::validation(location, "server has no devices"));
        }
        if let Some(load) = &self.load {
            load.validate(location)?;
        }
        for (j, d) in self.devices.iter().enumerate() {
            d.validate(&format!("{location} device {} (#{j})", d.id))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }
}

impl<T: Scalar> ScenarioConfig<T> {
    pub fn validate(&self) -> Result<()> {
        positive(self.tau, "network", "tau")?;
        positive(self.bw_ub, "network", "bw_ub")?;
        positive(self.bw_lb, "network", "bw_lb")?;
        positive(self.energy_budget, "network", "energy_budget")?;
        positive(self.gamma, "network", "gamma")?;
        if !(self.bits_per_sample.is_finite() && self.bits_per_sample >= T::one()) {
            return Err(Error::validation("network", "bits_per_sample must be >= 1"));
        }
        if let Some(load) = &self.load {
            load.validate("network")?;
        }
        if self.servers.is_empty() {
            return Err(Error::validation("network", "no servers"));
        }
        let mut server_ids = HashSet::new();
        let mut device_ids = HashSet::new();
        for s in &self.servers {
            let location = format!("server {}", s.id);
            if !server_ids.insert(s.id) {
                return Err(Error::validation(location, "duplicate server id"));
            }
            s.validate(&location)?;
            for d in &s.devices {
                if !device_ids.insert(d.id) {
                    return Err(Error::validation(
                        format!("server {} device {}", s.id, d.id),
                        "device sets not disjoint",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Renumbers servers `0..K` and devices `0..M` in document order so every
    /// server owns a contiguous block of device indices.
    pub fn reindex(&mut self) {
        let mut next = 0;
        for (k, s) in self.servers.iter_mut().enumerate() {
            s.id = k;
            for d in &mut s.devices {
                d.id = next;
                next += 1;
            }
        }
    }

    pub fn num_servers(&self) -> usize {
        self.servers.len()
    }

    pub fn num_devices(&self) -> usize {
        self.servers.iter().map(|s| s.devices.len()).sum()
    }

    /// Global device index range owned by each server.
    pub fn device_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.servers
            .iter()
            .map(|s| {
                let r = start..start + s.devices.len();
                start = r.end;
                r
            })
            .collect()
    }

    /// Devices in global index order with the index of their server.
    pub fn devices(&self) -> impl Iterator<Item = (usize, &DeviceParams<T>)> {
        self.servers
            .iter()
            .enumerate()
            .flat_map(|(k, s)| s.devices.iter().map(move |d| (k, d)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

/// Upload volumes per device, indexed by global device index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Allocation<T> {
    pub ub_bits: Vec<T>,
    pub lb_bits: Vec<T>,
}

impl<T: Scalar> Allocation<T> {
    pub fn zeros(devices: usize) -> Self {
        Self {
            ub_bits: vec![T::zero(); devices],
            lb_bits: vec![T::zero(); devices],
        }
    }

    /// Splits an interleaved `⟨ub_0, lb_0, ub_1, lb_1, …⟩` vector.
    pub fn from_interleaved(v: &[T]) -> Self {
        assert!(v.len().is_multiple_of(2), "interleaved vector must have even length");
        Self {
            ub_bits: v.iter().step_by(2).copied().collect(),
            lb_bits: v.iter().skip(1).step_by(2).copied().collect(),
        }
    }

    pub fn interleaved(&self) -> Vec<T> {
        self.ub_bits
            .iter()
            .zip(&self.lb_bits)
            .flat_map(|(&u, &l)| [u, l])
            .collect()
    }

    pub fn len(&self) -> usize {
        self.ub_bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ub_bits.is_empty()
    }

    pub fn device_total(&self, m: usize) -> T {
        self.ub_bits[m] + self.lb_bits[m]
    }

    /// `n_k` for every server.
    pub fn server_totals(&self, cfg: &ScenarioConfig<T>) -> Vec<T> {
        cfg.device_ranges()
            .into_iter()
            .map(|r| r.map(|m| self.device_total(m)).sum())
            .collect()
    }

    /// Checks nonnegativity and per-device collection caps.
    pub fn validate(&self, cfg: &ScenarioConfig<T>) -> Result<()> {
        if self.len() != cfg.num_devices() || self.lb_bits.len() != self.ub_bits.len() {
            return Err(Error::validation(
                "allocation",
                "length does not match device count",
            ));
        }
        for (k, d) in cfg.devices() {
            let m = d.id;
            let location = format!("server {k} device {m}");
            non_negative(self.ub_bits[m], &location, "ub_bits")?;
            non_negative(self.lb_bits[m], &location, "lb_bits")?;
            if self.device_total(m) > d.cap_bits {
                return Err(Error::validation(
                    location,
                    "ub_bits + lb_bits exceeds cap_bits",
                ));
            }
        }
        Ok(())
    }
}

/// Coordinate selectors `(A_k, B_k)` of size `M_k × 2M_k`: `A_k` picks the
/// unlicensed volumes (odd 1-based positions) and `B_k` the licensed volumes
/// (even positions) of the interleaved server vector.
pub fn selector_matrices<T: Scalar>(server: &ServerParams<T>) -> (DMatrix<T>, DMatrix<T>) {
    let rows = server.devices.len();
    let one_at = |offset: usize| {
        DMatrix::from_fn(rows, 2 * rows, |p, q| {
            if q == 2 * p + offset {
                T::one()
            } else {
                T::zero()
            }
        })
    };
    (one_at(0), one_at(1))
}
