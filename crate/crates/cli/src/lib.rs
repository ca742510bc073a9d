//! Scenario runner behind the `fei` binary: solves, parameter sweeps and
//! federated-learning simulations, each writing CSV/JSON artifacts to an
//! output directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fei_core::admm::{self, trace::write_jsonl};
use fei_core::energy::breakdown;
use fei_core::fedsim::{self, RoundRecord, ServerLoad};
use fei_core::{
    load_config, AdmmOptions, Allocation, FedConfig, Mode, Problem, ScenarioConfig, SolveSummary,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const SUMMARY_FILE: &str = "summary.json";
pub const ALLOCATION_FILE: &str = "allocation.csv";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const CURVE_FILE: &str = "curve.csv";
pub const DEFAULT_SEED: u64 = 42;
/// Relative slack allowed in sweep monotonicity annotations, about the
/// objective accuracy of a converged solve.
pub const MONOTONE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] fei_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{0}")]
    Usage(String),
    #[error("allocation violates the scenario: {0}")]
    Infeasible(String),
}

impl CliError {
    /// Process exit status for scripted use.
    pub fn exit_code(&self) -> i32 {
        1
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_config(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(load_config(&text)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub mode: Option<Mode>,
    pub eta: Option<f64>,
    pub max_iter: Option<usize>,
    /// The solver is deterministic; the seed is accepted so that every
    /// command shares one interface.
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            mode: None,
            eta: None,
            max_iter: None,
            seed: DEFAULT_SEED,
        }
    }
}

impl SolveOptions {
    fn admm(&self) -> AdmmOptions {
        let mut o = AdmmOptions::default();
        if let Some(eta) = self.eta {
            o.eta = eta;
        }
        if let Some(n) = self.max_iter {
            o.max_iter = n;
        }
        o
    }
}

/// One row of `allocation.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationRow {
    pub device_id: usize,
    pub server_id: usize,
    pub ub_bits: f64,
    pub lb_bits: f64,
    pub energy_ub: f64,
    pub energy_lb: f64,
    pub money: f64,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub config: ScenarioConfig,
    pub summary: SolveSummary,
    pub allocation: Allocation,
    pub rows: Vec<AllocationRow>,
}

impl SolveReport {
    /// 0 when converged, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.summary.converged {
            0
        } else {
            2
        }
    }
}

/// Fails unless `alloc` meets the energy budget, caps, floors and
/// nonnegativity of `cfg` exactly.
pub fn check_feasible(cfg: &ScenarioConfig, alloc: &Allocation) -> Result<()> {
    let p = Problem::from_config(cfg)?;
    let x = alloc.interleaved();
    let mut issues = p.violations(&x, 0.0);
    let e = p.energy(&x);
    if e > cfg.energy_budget * (1.0 + 1e-6) {
        issues.push(format!("energy {e} exceeds budget {}", cfg.energy_budget));
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(CliError::Infeasible(issues.join("; ")))
    }
}

/// Solves `cfg` in memory without writing artifacts.
pub fn solve(
    cfg: &ScenarioConfig,
    opts: &SolveOptions,
) -> Result<(admm::AdmmOutcome<f64>, Vec<AllocationRow>)> {
    let out = admm::run(cfg, &opts.admm())?;
    check_feasible(cfg, &out.allocation)?;
    let b = breakdown(&out.allocation, cfg)?;
    let rows = b
        .devices
        .iter()
        .map(|d| AllocationRow {
            device_id: d.device_id,
            server_id: d.server_id,
            ub_bits: out.allocation.ub_bits[d.device_id],
            lb_bits: out.allocation.lb_bits[d.device_id],
            energy_ub: d.energy_ub,
            energy_lb: d.energy_lb,
            money: d.money(),
        })
        .collect();
    Ok((out, rows))
}

pub fn write_allocation(path: &Path, rows: &[AllocationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_allocation(path: &Path) -> Result<Vec<AllocationRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err(path))
}

/// Runs the distributed solver and writes `summary.json`, `allocation.csv`
/// and `trace.jsonl` under `out`.
pub fn cmd_solve(config: &Path, opts: &SolveOptions, out: &Path) -> Result<SolveReport> {
    let mut cfg = read_config(config)?;
    if let Some(mode) = opts.mode {
        cfg.mode = mode;
    }
    let (outcome, rows) = solve(&cfg, opts)?;
    ensure_dir(out)?;

    let summary_path = out.join(SUMMARY_FILE);
    let mut f = create(&summary_path)?;
    serde_json::to_writer_pretty(&mut f, &outcome.summary).map_err(|e| CliError::Io {
        path: summary_path.clone(),
        source: e.into(),
    })?;
    writeln!(f)
        .and_then(|_| f.flush())
        .map_err(io_err(&summary_path))?;

    write_allocation(&out.join(ALLOCATION_FILE), &rows)?;

    let trace_path = out.join(TRACE_FILE);
    let mut t = create(&trace_path)?;
    write_jsonl(&outcome.trace, &mut t)
        .and_then(|_| t.flush())
        .map_err(io_err(&trace_path))?;

    Ok(SolveReport {
        config: cfg,
        summary: outcome.summary,
        allocation: outcome.allocation,
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    ComputeCap,
    EnergyBudget,
    Gamma,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ComputeCap => "compute_cap",
            Self::EnergyBudget => "energy_budget",
            Self::Gamma => "gamma",
        }
    }

    /// Applies `value` (to every server for `compute_cap`).
    pub fn apply(self, cfg: &mut ScenarioConfig, value: f64) {
        match self {
            Self::ComputeCap => cfg.servers.iter_mut().for_each(|s| s.compute_cap = value),
            Self::EnergyBudget => cfg.energy_budget = value,
            Self::Gamma => cfg.gamma = value,
        }
    }

    /// The quantity the sweep is expected to move monotonically, and whether
    /// it should fall (`true`) or rise as the value grows.
    ///
    /// Raising `compute_cap` adds idle capacity to the objective one for one,
    /// so that sweep tracks the objective net of `Σ compute_cap / K`. Raising
    /// `gamma` only makes every allocation dearer.
    fn tracked(self, row: &SweepRow) -> Option<(f64, bool)> {
        match self {
            Self::ComputeCap => row.net_objective.map(|v| (v, true)),
            Self::EnergyBudget => row.objective.map(|v| (v, true)),
            Self::Gamma => row.objective.map(|v| (v, false)),
        }
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "compute_cap" => Ok(Self::ComputeCap),
            "energy_budget" => Ok(Self::EnergyBudget),
            "gamma" => Ok(Self::Gamma),
            other => Err(format!(
                "unknown sweep parameter {other:?} (expected compute_cap, energy_budget or gamma)"
            )),
        }
    }
}

/// One row of `sweep.csv`. Failed sub-runs keep their value and carry the
/// error text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub objective: Option<f64>,
    pub cost: Option<f64>,
    pub utilization_slack: Option<f64>,
    pub energy: Option<f64>,
    /// Objective minus `Σ compute_cap / K`.
    pub net_objective: Option<f64>,
    pub converged: Option<bool>,
    /// Whether the tracked quantity moved in the expected direction since
    /// the previous successful row.
    pub monotone: Option<bool>,
    /// Improvement of the tracked quantity per unit of value since the
    /// previous successful row.
    pub marginal_gain: Option<f64>,
    pub error: Option<String>,
}

fn sweep_point(base: &ScenarioConfig, param: SweepParam, value: f64) -> SweepRow {
    let mut cfg = base.clone();
    param.apply(&mut cfg, value);
    let idle: f64 =
        cfg.servers.iter().map(|s| s.compute_cap).sum::<f64>() / cfg.num_servers() as f64;
    let mut row = SweepRow {
        value,
        objective: None,
        cost: None,
        utilization_slack: None,
        energy: None,
        net_objective: None,
        converged: None,
        monotone: None,
        marginal_gain: None,
        error: None,
    };
    match cfg
        .validate()
        .map_err(CliError::from)
        .and_then(|_| solve(&cfg, &SolveOptions::default()))
    {
        Ok((out, _)) => {
            let s = out.summary;
            row.objective = Some(s.objective);
            row.cost = Some(s.cost);
            row.utilization_slack = Some(s.utilization_slack);
            row.energy = Some(s.energy);
            row.net_objective = Some(s.objective - idle);
            row.converged = Some(s.converged);
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Solves the scenario once per value (in parallel) and annotates the rows
/// with monotonicity and marginal gains.
pub fn sweep(cfg: &ScenarioConfig, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    if values.iter().any(|v| !v.is_finite()) || values.windows(2).any(|w| w[1] < w[0]) {
        return Err(CliError::Usage(
            "sweep values must be finite and sorted ascending".into(),
        ));
    }
    let mut rows: Vec<SweepRow> = values
        .par_iter()
        .map(|&v| sweep_point(cfg, param, v))
        .collect();
    let mut prev: Option<(f64, f64)> = None;
    for row in &mut rows {
        let Some((tracked, falling)) = param.tracked(row) else {
            continue;
        };
        if let Some((pv, pt)) = prev {
            let gain = if falling { pt - tracked } else { tracked - pt };
            row.monotone = Some(gain >= -MONOTONE_TOLERANCE * pt.abs().max(1.0));
            if row.value > pv {
                row.marginal_gain = Some(gain / (row.value - pv));
            }
        }
        prev = Some((row.value, tracked));
    }
    Ok(rows)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Runs [`sweep`] on a config file and writes `sweep.csv`.
pub fn cmd_sweep(
    config: &Path,
    param: SweepParam,
    values: &[f64],
    out: &Path,
) -> Result<Vec<SweepRow>> {
    let cfg = read_config(config)?;
    let rows = sweep(&cfg, param, values)?;
    ensure_dir(out)?;
    write_sweep(&out.join(SWEEP_FILE), &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct FedOptions {
    pub rounds: usize,
    pub participation: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FedOptions {
    fn default() -> Self {
        Self {
            rounds: 50,
            participation: 1.0,
            learning_rate: 0.05,
            seed: DEFAULT_SEED,
        }
    }
}

/// Per-server training loads from an allocation: `n_k` in whole samples,
/// the configured batch size (capped at `n_k`) and passes. Servers that
/// received less than one sample are left out.
pub fn loads_from_allocation(
    cfg: &ScenarioConfig,
    rows: &[AllocationRow],
) -> Result<Vec<ServerLoad>> {
    let mut bits = vec![0.0; cfg.num_servers()];
    for r in rows {
        let slot = bits.get_mut(r.server_id).ok_or_else(|| {
            CliError::Usage(format!("allocation names unknown server {}", r.server_id))
        })?;
        *slot += r.ub_bits + r.lb_bits;
    }
    let loads: Vec<ServerLoad> = cfg
        .servers
        .iter()
        .zip(bits)
        .filter_map(|(s, b)| {
            let samples = (b / cfg.bits_per_sample).floor() as usize;
            (samples > 0).then(|| ServerLoad {
                samples,
                batch: (s.batch as usize).min(samples),
                passes: s.passes as usize,
            })
        })
        .collect();
    if loads.is_empty() {
        return Err(CliError::Usage(
            "allocation gives no server a whole sample".into(),
        ));
    }
    Ok(loads)
}

pub fn fed_config(loads: Vec<ServerLoad>, opts: &FedOptions) -> FedConfig {
    FedConfig {
        servers: loads,
        participation: opts.participation,
        rounds: opts.rounds,
        learning_rate: opts.learning_rate,
        seed: opts.seed,
        test_samples: 2000,
    }
}

/// Trains with the volumes of a prior solve and writes `curve.csv`.
pub fn cmd_fedsim(
    config: &Path,
    alloc: Option<&Path>,
    opts: &FedOptions,
    out: &Path,
) -> Result<Vec<RoundRecord<f64>>> {
    let cfg = read_config(config)?;
    let alloc = alloc.ok_or_else(|| {
        CliError::Usage(format!("no allocation given: run `fei solve` first and pass its {ALLOCATION_FILE} with --alloc"))
    })?;
    if !alloc.exists() {
        return Err(CliError::Usage(format!(
            "{} not found: run `fei solve` first to produce {ALLOCATION_FILE}",
            alloc.display()
        )));
    }
    let rows = read_allocation(alloc)?;
    let fed = fed_config(loads_from_allocation(&cfg, &rows)?, opts);
    let curve = fedsim::run_rounds(&fed)?.curve;
    ensure_dir(out)?;
    let path = out.join(CURVE_FILE);
    let mut f = create(&path)?;
    fedsim::write_curve(&curve, &mut f)?;
    f.flush().map_err(io_err(&path))?;
    Ok(curve)
}
