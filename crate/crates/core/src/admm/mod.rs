//! Distributed ADMM over the edge servers.
//!
//! Every iteration the servers solve their local subproblems independently
//! and report `n_k`; the coordinator projects `n + θ` onto the shared energy
//! set, updates the scaled dual and returns `(w_k, θ_k)`. Once the residuals
//! are small the continuous solution is rounded to whole bits and sent to the
//! devices.
//!
//! Internally the iteration runs on [`Problem::normalized`] so that volumes,
//! energy and objective are all of order one; every trace payload and the
//! returned allocation are in bits.

pub mod projection;
pub mod rounding;
pub mod subproblem;
pub mod trace;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loadmodel::{self, MeasurementRecord};
use crate::problem::{ObjectiveParts, Problem};
use crate::scalar::{norm2, norm2_diff, Scalar};
use crate::scenario::{Allocation, ScenarioConfig};

pub use projection::{project_energy_ball, BallProjection, EnergyBall};
pub use rounding::{finalize, RoundingReport};
pub use subproblem::{
    minimize_separable, project_local, server_update, SeparableSolution, SubproblemSpec,
};
pub use trace::{
    audit_jsonl, audit_trace, audit_trace_with_layout, AuditReport, MessageKind, Party,
    TraceMessage,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmmOptions<T> {
    pub eta: T,
    pub max_iter: usize,
    pub eps_abs: T,
    pub eps_rel: T,
    /// Residual balancing of `η`.
    pub adapt_eta: bool,
    pub record_trace: bool,
}

impl<T: Scalar> Default for AdmmOptions<T> {
    fn default() -> Self {
        Self {
            eta: T::one(),
            max_iter: 2000,
            eps_abs: T::lit(1e-6),
            eps_rel: T::lit(1e-4),
            adapt_eta: true,
            record_trace: true,
        }
    }
}

impl<T: Scalar> AdmmOptions<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > T::zero()) {
            return Err(Error::validation("options", "eta must be finite and > 0"));
        }
        if self.max_iter == 0 {
            return Err(Error::validation("options", "max_iter must be >= 1"));
        }
        if !(self.eps_abs >= T::zero() && self.eps_rel >= T::zero()) {
            return Err(Error::validation("options", "tolerances must be >= 0"));
        }
        Ok(())
    }
}

/// Iterate of the scaled-form ADMM in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmmState<T> {
    pub iter: usize,
    pub n: Vec<T>,
    pub w: Vec<T>,
    pub w_prev: Vec<T>,
    pub theta: Vec<T>,
    pub eta: T,
    pub primal_residual: T,
    pub dual_residual: T,
}

impl<T: Scalar> AdmmState<T> {
    pub fn new(dim: usize, eta: T) -> Self {
        let zeros = vec![T::zero(); dim];
        Self {
            iter: 0,
            n: zeros.clone(),
            w: zeros.clone(),
            w_prev: zeros.clone(),
            theta: zeros,
            eta,
            primal_residual: T::zero(),
            dual_residual: T::zero(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residuals<T> {
    pub primal: T,
    pub dual: T,
    pub primal_tol: T,
    pub dual_tol: T,
}

impl<T: Scalar> Residuals<T> {
    pub fn converged(&self) -> bool {
        self.primal <= self.primal_tol && self.dual <= self.dual_tol
    }

    /// How far from the stopping thresholds, as the larger ratio.
    pub fn ratio(&self) -> T {
        let r = |v: T, tol: T| if tol > T::zero() { v / tol } else { v };
        r(self.primal, self.primal_tol).max(r(self.dual, self.dual_tol))
    }
}

/// `θ + n − w`.
pub fn dual_update<T: Scalar>(theta: &[T], n: &[T], w: &[T]) -> Vec<T> {
    assert!(
        theta.len() == n.len() && n.len() == w.len(),
        "vector lengths differ"
    );
    theta
        .iter()
        .zip(n)
        .zip(w)
        .map(|((&t, &a), &b)| t + a - b)
        .collect()
}

pub fn residuals<T: Scalar>(state: &AdmmState<T>, eps_abs: T, eps_rel: T) -> Residuals<T> {
    let root = T::from_usize_lossy(state.n.len()).sqrt();
    let scaled_theta = norm2(&state.theta) * state.eta;
    Residuals {
        primal: norm2_diff(&state.n, &state.w),
        dual: state.eta * norm2_diff(&state.w, &state.w_prev),
        primal_tol: eps_abs * root + eps_rel * norm2(&state.n).max(norm2(&state.w)),
        dual_tol: eps_abs * root + eps_rel * scaled_theta,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord<T> {
    pub iter: usize,
    pub primal: T,
    pub dual: T,
    pub eta: T,
    /// Augmented Lagrangian in normalized units.
    pub lagrangian: T,
    pub subproblem_kkt: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary<T> {
    pub primal: T,
    pub dual: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary<T> {
    pub converged: bool,
    pub iterations: usize,
    pub objective: T,
    pub cost: T,
    pub utilization_slack: T,
    pub energy: T,
    pub residuals: ResidualSummary<T>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct AdmmOutcome<T> {
    pub allocation: Allocation<T>,
    /// Continuous consensus point in bits before rounding.
    pub continuous: Vec<T>,
    pub state: AdmmState<T>,
    pub history: Vec<IterationRecord<T>>,
    pub trace: Vec<TraceMessage>,
    pub summary: SolveSummary<T>,
    pub rounding: RoundingReport<T>,
    /// Iterations where the augmented Lagrangian rose by more than `1e-6`
    /// relative at unchanged `η`.
    pub lagrangian_increases: usize,
}

impl<T: Scalar> AdmmOutcome<T> {
    pub fn converged(&self) -> bool {
        self.summary.converged
    }
}

fn split<'a, T>(v: &'a [T], problem: &Problem<T>) -> Vec<&'a [T]>
where
    T: Scalar,
{
    problem.offsets().into_iter().map(|r| &v[r]).collect()
}

fn to_bits<T: Scalar>(v: &[T], scale: T) -> Vec<T> {
    v.iter().map(|&x| x * scale).collect()
}

fn augmented_lagrangian<T: Scalar>(problem: &Problem<T>, st: &AdmmState<T>) -> T {
    let half = T::lit(0.5) * st.eta;
    let pen: T =
        st.n.iter()
            .zip(&st.w)
            .zip(&st.theta)
            .map(|((&a, &b), &t)| (a - b + t) * (a - b + t) - t * t)
            .sum();
    problem.objective(&st.n) + half * pen
}

/// Evaluates a whole-bit allocation against the scenario.
pub fn evaluate<T: Scalar>(
    cfg: &ScenarioConfig<T>,
    alloc: &Allocation<T>,
) -> Result<ObjectiveParts<T>> {
    let problem = Problem::from_config(cfg)?;
    Ok(problem.parts(&alloc.interleaved()))
}

/// Runs the distributed solver.
pub fn run<T: Scalar>(cfg: &ScenarioConfig<T>, opts: &AdmmOptions<T>) -> Result<AdmmOutcome<T>> {
    opts.validate()?;
    let bits = Problem::from_config(cfg)?;
    bits.check_local_sets()?;
    rounding::check_energy_floor(&bits)?;
    let problem = bits.normalized();
    let volume = problem.scaling.volume;
    let ball = EnergyBall::from_problem(&problem);
    let offsets = problem.offsets();
    let dim = problem.dim();

    let mut st = AdmmState::new(dim, opts.eta);
    let mut history = Vec::new();
    let mut trace = Vec::new();
    let mut best: Option<(T, Vec<T>, Residuals<T>, usize)> = None;
    let mut converged = false;
    let mut last_l: Option<(T, T)> = None;
    let mut increases = 0;
    let mut last_res = residuals(&st, opts.eps_abs, opts.eps_rel);

    for it in 0..opts.max_iter {
        st.iter = it + 1;
        let w_parts = split(&st.w, &problem);
        let t_parts = split(&st.theta, &problem);
        let updates = subproblem::server_updates(&problem.servers, &w_parts, &t_parts, st.eta);
        let mut kkt = T::zero();
        for (k, (u, r)) in updates.iter().zip(&offsets).enumerate() {
            st.n[r.clone()].copy_from_slice(&u.x);
            kkt = kkt.max(u.kkt_residual);
            if opts.record_trace {
                trace.push(TraceMessage::report_n(st.iter, k, &to_bits(&u.x, volume)));
            }
        }
        if !(kkt <= T::lit(1e-6)) {
            return Err(Error::Numerical {
                context: "server subproblem".into(),
                residual: kkt.as_f64(),
                iterations: st.iter,
            });
        }

        let z: Vec<T> = st.n.iter().zip(&st.theta).map(|(&a, &t)| a + t).collect();
        st.w_prev = std::mem::replace(&mut st.w, ball.project(&z).w);
        st.theta = dual_update(&st.theta, &st.n, &st.w);
        if opts.record_trace {
            for (k, r) in offsets.iter().enumerate() {
                trace.push(TraceMessage::feedback(
                    st.iter,
                    k,
                    &to_bits(&st.w[r.clone()], volume),
                    &to_bits(&st.theta[r.clone()], volume),
                ));
            }
        }

        let res = residuals(&st, opts.eps_abs, opts.eps_rel);
        st.primal_residual = res.primal;
        st.dual_residual = res.dual;
        last_res = res;
        let lag = augmented_lagrangian(&problem, &st);
        if let Some((prev, prev_eta)) = last_l {
            if prev_eta == st.eta && lag > prev + T::lit(1e-6) * (T::one() + prev.abs()) {
                increases += 1;
            }
        }
        last_l = Some((lag, st.eta));
        history.push(IterationRecord {
            iter: st.iter,
            primal: res.primal,
            dual: res.dual,
            eta: st.eta,
            lagrangian: lag,
            subproblem_kkt: kkt,
        });
        let ratio = res.ratio();
        if best.as_ref().is_none_or(|b| ratio < b.0) {
            best = Some((ratio, st.n.clone(), res, st.iter));
        }
        if res.converged() {
            converged = true;
            break;
        }
        if opts.adapt_eta {
            let ten = T::lit(10.0);
            let two = T::lit(2.0);
            if res.primal > ten * res.dual {
                st.eta *= two;
                st.theta.iter_mut().for_each(|t| *t /= two);
            } else if res.dual > ten * res.primal {
                st.eta /= two;
                st.theta.iter_mut().for_each(|t| *t *= two);
            }
        }
    }

    let (point, res) = if converged {
        (st.n.clone(), last_res)
    } else {
        let (_, n, r, _) = best.expect("at least one iteration");
        (n, r)
    };
    let continuous = to_bits(&point, volume);
    let (rounded, report) = rounding::finalize(&bits, &continuous)?;
    let allocation = Allocation::from_interleaved(&rounded);

    if opts.record_trace {
        let final_iter = st.iter + 1;
        let mut m = 0;
        for (k, s) in bits.servers.iter().enumerate() {
            for _ in &s.devices {
                trace.push(TraceMessage::device_alloc(
                    final_iter,
                    k,
                    m,
                    allocation.ub_bits[m],
                    allocation.lb_bits[m],
                ));
                m += 1;
            }
        }
    }

    let parts = bits.parts(&rounded);
    let mut warnings = Vec::new();
    for (s, r) in bits.servers.iter().zip(bits.offsets()) {
        let total: T = rounded[r].iter().copied().sum();
        if total >= s.data_cap.floor() {
            warnings.push(format!(
                "server {}: data cap reached ({total} bits)",
                s.index
            ));
        }
    }
    warnings.extend(bits.violations(&rounded, T::lit(1e-9)));
    let summary = SolveSummary {
        converged,
        iterations: st.iter,
        objective: parts.objective,
        cost: parts.cost,
        utilization_slack: parts.utilization_slack,
        energy: parts.energy,
        residuals: ResidualSummary {
            primal: res.primal,
            dual: res.dual,
        },
        warnings,
    };
    Ok(AdmmOutcome {
        allocation,
        continuous,
        state: st,
        history,
        trace,
        summary,
        rounding: report,
        lagrangian_increases: increases,
    })
}

/// Re-selects `(b_k, e_k)` per server at the volumes of `outcome`, meeting
/// `requirement` within `round_budget` rounds; servers with no qualifying
/// row keep their parameters.
pub fn refine_training_params<T: Scalar>(
    cfg: &ScenarioConfig<T>,
    outcome: &AdmmOutcome<T>,
    records: &[MeasurementRecord<T>],
    requirement: T,
    round_budget: u32,
) -> ScenarioConfig<T> {
    let mut refined = cfg.clone();
    let totals = outcome.allocation.server_totals(cfg);
    for (s, total) in refined.servers.iter_mut().zip(totals) {
        let samples = (total / cfg.bits_per_sample)
            .floor()
            .to_u32()
            .unwrap_or(u32::MAX);
        if let Ok((b, e)) = loadmodel::select_params(samples, records, requirement, round_budget) {
            s.batch = b;
            s.passes = e;
        }
    }
    refined
}

/// [`run`], one re-selection of the training parameters, and a second run.
pub fn run_with_refinement<T: Scalar>(
    cfg: &ScenarioConfig<T>,
    opts: &AdmmOptions<T>,
    records: &[MeasurementRecord<T>],
    requirement: T,
    round_budget: u32,
) -> Result<(ScenarioConfig<T>, AdmmOutcome<T>)> {
    let first = run(cfg, opts)?;
    let refined = refine_training_params(cfg, &first, records, requirement, round_budget);
    let second = run(&refined, opts)?;
    Ok((refined, second))
}
