//! Resource allocation for federated edge intelligence: IoT devices upload
//! training data to edge servers over an unlicensed and a licensed band, and
//! the servers jointly choose upload volumes that trade monetary energy cost
//! against compute utilization under a shared energy budget.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix `f64`.

pub mod admm;
pub mod energy;
pub mod error;
pub mod fedsim;
pub mod loadmodel;
pub mod oracle;
pub mod problem;
pub mod roots;
pub mod scalar;
pub mod scenario;
pub mod synthetic;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use scenario::{load_config, Mode};

pub type ScenarioConfig = scenario::ScenarioConfig<f64>;
pub type ServerParams = scenario::ServerParams<f64>;
pub type DeviceParams = scenario::DeviceParams<f64>;
pub type Allocation = scenario::Allocation<f64>;
pub type EnergyCurve = energy::EnergyCurve<f64>;
pub type LoadCoefficients = loadmodel::LoadCoefficients<f64>;
pub type MeasurementRecord = loadmodel::MeasurementRecord<f64>;
pub type Problem = problem::Problem<f64>;
pub type AdmmOptions = admm::AdmmOptions<f64>;
pub type AdmmOutcome = admm::AdmmOutcome<f64>;
pub type SolveSummary = admm::SolveSummary<f64>;
pub type OracleResult = oracle::OracleResult<f64>;
pub type FedConfig = fedsim::FedConfig<f64>;
