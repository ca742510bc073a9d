//! Centralized reference solvers for testing the distributed solver: a dense
//! primal-dual interior-point method over the full problem and an exhaustive
//! lattice search for tiny instances.
//!
//! Neither shares solver code with [`crate::admm`]; both only evaluate the
//! energy and load models through [`Problem`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::Problem;
use crate::scalar::Scalar;
use crate::scenario::{Allocation, ScenarioConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleSolver {
    InteriorPoint,
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult<T> {
    pub allocation: Allocation<T>,
    pub objective: T,
    pub solver: OracleSolver,
    /// Newton iterations, or lattice points visited.
    pub iterations: usize,
    pub grid_step: Option<T>,
    /// Relative KKT residual at the returned point (zero for the grid).
    pub kkt_residual: f64,
}

/// Largest Newton iteration count of [`solve_centralized`].
pub const MAX_NEWTON_ITER: usize = 500;
/// Guard on the number of lattice points [`grid_search`] may visit.
pub const GRID_LIMIT: f64 = 1e8;

fn to_f64<T: Scalar>(cfg: &ScenarioConfig<T>) -> ScenarioConfig<f64> {
    serde_json::from_value(serde_json::to_value(cfg).expect("config serializes"))
        .expect("config converts to f64")
}

/// Linear inequality `a·x ≤ b` with a sparse row.
struct Row {
    idx: Vec<usize>,
    coef: Vec<f64>,
    rhs: f64,
}

struct Barrier {
    problem: Problem<f64>,
    /// Free coordinate → index into the full interleaved vector.
    free: Vec<usize>,
    ineq: Vec<Row>,
    eq: Vec<Row>,
}

impl Barrier {
    fn new(problem: Problem<f64>) -> Self {
        let mut free = Vec::new();
        let mut position = vec![usize::MAX; problem.dim()];
        let mut ineq = Vec::new();
        let mut eq = Vec::new();
        for (s, r) in problem.servers.iter().zip(problem.offsets()) {
            let mut members = Vec::new();
            for j in 0..s.dim() {
                let u = s.set.upper(j);
                if u > 0.0 {
                    let p = free.len();
                    position[r.start + j] = p;
                    free.push(r.start + j);
                    members.push(p);
                    ineq.push(Row {
                        idx: vec![p],
                        coef: vec![-1.0],
                        rhs: 0.0,
                    });
                    ineq.push(Row {
                        idx: vec![p],
                        coef: vec![1.0],
                        rhs: u,
                    });
                }
            }
            for m in 0..s.devices.len() {
                let (a, b) = (position[r.start + 2 * m], position[r.start + 2 * m + 1]);
                let cap = s.set.pair_caps[m];
                if a != usize::MAX
                    && b != usize::MAX
                    && cap < s.set.upper(2 * m) + s.set.upper(2 * m + 1)
                {
                    ineq.push(Row {
                        idx: vec![a, b],
                        coef: vec![1.0, 1.0],
                        rhs: cap,
                    });
                }
            }
            let ones = vec![1.0; members.len()];
            let (floor, cap) = (s.set.floor, s.set.cap);
            if cap - floor <= 1e-12 * cap.max(1.0) {
                eq.push(Row {
                    idx: members,
                    coef: ones,
                    rhs: cap,
                });
            } else {
                if floor > 0.0 {
                    ineq.push(Row {
                        idx: members.clone(),
                        coef: ones.iter().map(|v| -v).collect(),
                        rhs: -floor,
                    });
                }
                if cap < s.set.max_total() {
                    ineq.push(Row {
                        idx: members,
                        coef: ones,
                        rhs: cap,
                    });
                }
            }
        }
        Self {
            problem,
            free,
            ineq,
            eq,
        }
    }

    fn full(&self, x: &DVector<f64>) -> Vec<f64> {
        let mut v = vec![0.0; self.problem.dim()];
        for (p, &i) in self.free.iter().enumerate() {
            v[i] = x[p];
        }
        v
    }

    fn curves(&self) -> Vec<crate::energy::EnergyCurve<f64>> {
        let all = self.problem.curves();
        self.free.iter().map(|&i| all[i]).collect()
    }

    /// Solves and returns the full point, iterations and relative KKT residual.
    fn solve(&self) -> Result<(Vec<f64>, usize, f64)> {
        let n = self.free.len();
        if n == 0 {
            return Ok((vec![0.0; self.problem.dim()], 0, 0.0));
        }
        let curves = self.curves();
        let budget = self.problem.energy_budget;
        let m_lin = self.ineq.len();
        let m = m_lin + 1;
        let p = self.eq.len();
        let grad_full = |x: &DVector<f64>| {
            let g = self.problem.gradient(&self.full(x));
            DVector::from_iterator(n, self.free.iter().map(|&i| g[i]))
        };
        let hess_f = |x: &DVector<f64>| {
            let full = self.full(x);
            let mut h = vec![0.0; n];
            for (q, &i) in self.free.iter().enumerate() {
                let (k, j) = self.locate(i);
                h[q] = self.problem.servers[k].coordinate_derivatives(j, full[i]).1;
            }
            h
        };
        let constraints = |x: &DVector<f64>| {
            let mut c = DVector::zeros(m);
            for (r, row) in self.ineq.iter().enumerate() {
                c[r] = row
                    .idx
                    .iter()
                    .zip(&row.coef)
                    .map(|(&i, &a)| a * x[i])
                    .sum::<f64>()
                    - row.rhs;
            }
            c[m_lin] = curves
                .iter()
                .zip(x.iter())
                .map(|(c, &v)| c.value(v))
                .sum::<f64>()
                / budget
                - 1.0;
            c
        };
        let mut jac = DMatrix::zeros(m, n);
        for (r, row) in self.ineq.iter().enumerate() {
            for (&i, &a) in row.idx.iter().zip(&row.coef) {
                jac[(r, i)] = a;
            }
        }
        let mut aeq = DMatrix::zeros(p, n);
        let mut beq = DVector::zeros(p);
        for (r, row) in self.eq.iter().enumerate() {
            for (&i, &a) in row.idx.iter().zip(&row.coef) {
                aeq[(r, i)] = a;
            }
            beq[r] = row.rhs;
        }

        let mut x = DVector::from_iterator(
            n,
            self.free.iter().map(|&i| {
                let (k, j) = self.locate(i);
                let set = &self.problem.servers[k].set;
                0.1 * set.upper(j).min(0.5 * set.pair_caps[j / 2])
            }),
        );
        let c0 = constraints(&x);
        // rows feasible at the start stay feasible, which keeps x inside its box
        let mut s = c0.map(|v| if -v >= 1e-3 { -v } else { 1e-3 + v.abs() });
        let mut z = DVector::from_element(m, 1.0);
        let mut y = DVector::zeros(p);
        let mut kkt = f64::INFINITY;
        let mut recent = [f64::INFINITY; 10];
        for it in 0..MAX_NEWTON_ITER {
            let g = grad_full(&x);
            let c = constraints(&x);
            for (q, cv) in curves.iter().enumerate() {
                jac[(m_lin, q)] = cv.derivative(x[q]) / budget;
            }
            let r_d = &g + jac.transpose() * &z + aeq.transpose() * &y;
            let r_p = &c + &s;
            let r_e = &aeq * &x - &beq;
            let mu = s.dot(&z) / m as f64;
            let scale = 1.0 + g.amax();
            kkt = (r_d.amax() / scale).max(r_p.amax()).max(r_e.amax()).max(mu);
            if kkt <= 1e-10 {
                return Ok((self.full(&x), it, kkt));
            }
            // roundoff floor reached
            if it >= 10 && kkt <= 1e-8 && kkt > 0.5 * recent[it % 10] {
                return Ok((self.full(&x), it, kkt));
            }
            recent[it % 10] = kkt;

            let hf = hess_f(&x);
            let mut h = DMatrix::from_diagonal(&DVector::from_vec(hf));
            for (q, cv) in curves.iter().enumerate() {
                h[(q, q)] += z[m_lin] * cv.second_derivative(x[q]) / budget;
            }
            let sigma = if mu > 1e-3 { 0.2 } else { 0.05 };
            let r_c = s.component_mul(&z).add_scalar(-sigma * mu);
            let zs = z.component_div(&s);
            let mut jw = jac.clone();
            for (r, mut row) in jw.row_iter_mut().enumerate() {
                row *= zs[r];
            }
            let kmat = &h + jac.transpose() * &jw;
            let inner = (zs.component_mul(&r_p)) - r_c.component_div(&s);
            let rhs_x = -&r_d - jac.transpose() * &inner;

            let mut big = DMatrix::zeros(n + p, n + p);
            big.view_mut((0, 0), (n, n)).copy_from(&kmat);
            big.view_mut((n, 0), (p, n)).copy_from(&aeq);
            big.view_mut((0, n), (n, p)).copy_from(&aeq.transpose());
            let mut rhs = DVector::zeros(n + p);
            rhs.rows_mut(0, n).copy_from(&rhs_x);
            rhs.rows_mut(n, p).copy_from(&(-&r_e));
            // tiny proximal term keeps the system regular when prices vanish
            let mut sol = None;
            let mut delta = 1e-12 * (1.0 + kmat.diagonal().amax());
            for _ in 0..6 {
                let mut reg = big.clone();
                for q in 0..n {
                    reg[(q, q)] += delta;
                }
                for q in n..n + p {
                    reg[(q, q)] -= delta;
                }
                sol = reg
                    .lu()
                    .solve(&rhs)
                    .filter(|v| v.iter().all(|x| x.is_finite()));
                if sol.is_some() {
                    break;
                }
                delta *= 100.0;
            }
            if sol.is_none() && kkt <= 1e-9 {
                // converged as far as the arithmetic allows
                return Ok((self.full(&x), it, kkt));
            }
            let sol = sol.ok_or_else(|| Error::Numerical {
                context: "interior-point Newton system".into(),
                residual: kkt,
                iterations: it,
            })?;
            let dx = sol.rows(0, n).into_owned();
            let dy = sol.rows(n, p).into_owned();
            let dz = zs.component_mul(&(&jac * &dx + &r_p)) - r_c.component_div(&s);
            let ds = -(&r_c + s.component_mul(&dz)).component_div(&z);

            let frac = |v: &DVector<f64>, d: &DVector<f64>| {
                v.iter()
                    .zip(d.iter())
                    .filter(|(_, &dv)| dv < 0.0)
                    .map(|(&vv, &dv)| -0.995 * vv / dv)
                    .fold(1.0f64, f64::min)
            };
            let mut ap = frac(&s, &ds);
            let ad = frac(&z, &dz);
            // keep the exponentials in range
            while ap > 1e-12 {
                let trial = &x + &dx * ap;
                let ok = curves
                    .iter()
                    .zip(trial.iter())
                    .all(|(cv, &v)| v <= 1.5 * cv.max_bits() + 1.0);
                if ok {
                    break;
                }
                ap *= 0.5;
            }
            x += &dx * ap;
            s += &ds * ap;
            z += &dz * ad;
            y += &dy * ad;
        }
        Err(Error::Numerical {
            context: "centralized interior-point solver".into(),
            residual: kkt,
            iterations: MAX_NEWTON_ITER,
        })
    }

    fn locate(&self, i: usize) -> (usize, usize) {
        let offsets = self.problem.offsets();
        let k = offsets
            .iter()
            .position(|r| r.contains(&i))
            .expect("index in range");
        (k, i - offsets[k].start)
    }
}

/// Clamps tiny excursions of a converged interior point back into the boxes.
fn clean(problem: &Problem<f64>, x: &mut [f64]) {
    for (s, r) in problem.servers.iter().zip(problem.offsets()) {
        for j in 0..s.dim() {
            x[r.start + j] = x[r.start + j].max(0.0).min(s.set.upper(j));
        }
    }
}

/// Solves the full problem centrally to a relative KKT residual of `1e-10`
/// (checked against `1e-6` in bits after unscaling).
pub fn solve_centralized<T: Scalar>(cfg: &ScenarioConfig<T>) -> Result<OracleResult<T>> {
    let cfg64 = to_f64(cfg);
    let bits = Problem::from_config(&cfg64)?;
    bits.check_local_sets()?;
    let normalized = bits.normalized();
    let volume = normalized.scaling.volume;
    let barrier = Barrier::new(normalized);
    let (mut x, iterations, kkt) = barrier.solve().map_err(|e| match e {
        Error::Numerical { residual, .. }
            if residual.is_finite()
                && barrier.problem.energy(&vec![0.0; barrier.problem.dim()]) > 1.0 =>
        {
            Error::Infeasible("instance has no feasible point".into())
        }
        other => other,
    })?;
    clean(&barrier.problem, &mut x);
    if !barrier.problem.violations(&x, 1e-9).is_empty() {
        return Err(Error::Infeasible(format!(
            "centralized solver ended outside the feasible set: {:?}",
            barrier.problem.violations(&x, 1e-9)
        )));
    }
    let x_bits: Vec<f64> = x.iter().map(|v| v * volume).collect();
    let objective = bits.objective(&x_bits);
    let conv: Vec<T> = x_bits.iter().map(|&v| T::lit(v)).collect();
    Ok(OracleResult {
        allocation: Allocation::from_interleaved(&conv),
        objective: T::lit(objective),
        solver: OracleSolver::InteriorPoint,
        iterations,
        grid_step: None,
        kkt_residual: kkt,
    })
}

/// `Σ_i sup_{[0, u_i]} |∂F/∂x_i|` in bit units: a bound on the objective
/// change when every coordinate moves by at most one unit.
pub fn lipschitz_bound<T: Scalar>(cfg: &ScenarioConfig<T>) -> Result<T> {
    let p = Problem::from_config(cfg)?;
    let mut total = T::zero();
    for s in &p.servers {
        for j in 0..s.dim() {
            let u = s.set.upper(j);
            if u > T::zero() {
                let lo = s.coordinate_derivatives(j, T::zero()).0.abs();
                let hi = s.coordinate_derivatives(j, u).0.abs();
                total += lo.max(hi);
            }
        }
    }
    Ok(total)
}

struct Choice {
    a: f64,
    b: f64,
    energy: f64,
    value: f64,
}

/// Exhaustive search over allocations whose entries are multiples of `step`
/// bits. Ties go to the lexicographically smallest interleaved vector.
pub fn grid_search<T: Scalar>(cfg: &ScenarioConfig<T>, step: T) -> Result<OracleResult<T>> {
    let step = step.as_f64();
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::validation(
            "grid_search",
            "step must be finite and > 0",
        ));
    }
    let cfg64 = to_f64(cfg);
    let p = Problem::from_config(&cfg64)?;
    let budget = p.energy_budget;
    let mut choices: Vec<Vec<Choice>> = Vec::new();
    let mut owner = Vec::new();
    let mut points = 1.0f64;
    for (k, s) in p.servers.iter().enumerate() {
        for (m, d) in s.devices.iter().enumerate() {
            let (ua, ub, cap) = (s.set.ub_caps[m], s.set.lb_caps[m], s.set.pair_caps[m]);
            let bound = ((ua.min(cap) / step).floor() + 1.0) * ((ub.min(cap) / step).floor() + 1.0);
            if points * bound > GRID_LIMIT {
                return Err(Error::GridTooLarge {
                    points: points * bound,
                    limit: GRID_LIMIT,
                });
            }
            let mut list = Vec::new();
            let mut ia = 0.0;
            while ia * step <= ua.min(cap) {
                let a = ia * step;
                let mut ib = 0.0;
                while ib * step <= ub && a + ib * step <= cap {
                    let b = ib * step;
                    let energy = d.ub.value(a) + d.lb.value(b);
                    if energy <= budget {
                        let value =
                            -s.weight * s.kappa * (a + b) + s.gamma * (d.rho * energy + d.beta * b);
                        list.push(Choice {
                            a,
                            b,
                            energy,
                            value,
                        });
                    }
                    ib += 1.0;
                }
                ia += 1.0;
            }
            points *= list.len().max(1) as f64;
            choices.push(list);
            owner.push(k);
        }
    }
    // largest volume the remaining devices of the same server can add
    let mut rest = vec![0.0; choices.len() + 1];
    for i in (0..choices.len()).rev() {
        let here = choices[i].iter().map(|c| c.a + c.b).fold(0.0, f64::max);
        let same = i + 1 < choices.len() && owner[i + 1] == owner[i];
        rest[i] = here + if same { rest[i + 1] } else { 0.0 };
    }
    let constant: f64 = p.servers.iter().map(|s| s.weight * s.compute_cap).sum();

    struct Search<'a> {
        p: &'a Problem<f64>,
        choices: &'a [Vec<Choice>],
        owner: &'a [usize],
        rest: &'a [f64],
        pick: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
        visited: usize,
    }
    impl Search<'_> {
        fn go(&mut self, i: usize, energy: f64, value: f64, server_total: f64) {
            let n = self.choices.len();
            if i == n {
                self.visited += 1;
                if self.best.as_ref().is_none_or(|b| value < b.0) {
                    self.best = Some((value, self.pick.clone()));
                }
                return;
            }
            let set = &self.p.servers[self.owner[i]].set;
            for (c_idx, c) in self.choices[i].iter().enumerate() {
                let e = energy + c.energy;
                if e > self.p.energy_budget {
                    continue;
                }
                let t = server_total + c.a + c.b;
                if t > set.cap {
                    continue;
                }
                let last = i + 1 == n || self.owner[i + 1] != self.owner[i];
                if last && t < set.floor {
                    continue;
                }
                if !last && t + self.rest[i + 1] < set.floor {
                    continue;
                }
                self.pick[i] = c_idx;
                self.go(i + 1, e, value + c.value, if last { 0.0 } else { t });
            }
        }
    }
    let mut search = Search {
        p: &p,
        choices: &choices,
        owner: &owner,
        rest: &rest,
        pick: vec![0; choices.len()],
        best: None,
        visited: 0,
    };
    search.go(0, 0.0, 0.0, 0.0);
    let (value, pick) = search.best.ok_or_else(|| {
        Error::Infeasible(format!("no feasible allocation on the {step}-bit lattice"))
    })?;
    let alloc = Allocation {
        ub_bits: pick
            .iter()
            .enumerate()
            .map(|(i, &c)| T::lit(choices[i][c].a))
            .collect(),
        lb_bits: pick
            .iter()
            .enumerate()
            .map(|(i, &c)| T::lit(choices[i][c].b))
            .collect(),
    };
    Ok(OracleResult {
        allocation: alloc,
        objective: T::lit(constant + value),
        solver: OracleSolver::Grid,
        iterations: search.visited,
        grid_step: Some(T::lit(step)),
        kkt_residual: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::load_config;
    use approx::assert_relative_eq;

    const ONE: &str = r#"{
        "tau": 1.0, "bw_ub": 4.0, "bw_lb": 3.0, "energy_budget": 1.0, "gamma": 1.0,
        "bits_per_sample": 1, "load": {"c0": 0.0, "c1": 0.01},
        "servers": [{"id": 0, "compute_cap": 1.0, "data_cap_bits": 100, "batch": 1, "passes": 1,
           "devices": [{"id": 0, "rho": 1.0, "beta_bit": 0.001, "gain_ub": 1.0, "gain_lb": 1.0,
             "noise_ub": 0.05, "noise_lb": 0.04, "access_prob": 0.5, "cap_bits": 10}]}]
    }"#;

    #[test]
    fn single_device_grid_has_at_most_66_pairs() {
        let cfg =
            load_config::<f64>(&ONE.replace("\"energy_budget\": 1.0", "\"energy_budget\": 1e9"))
                .unwrap();
        let r = grid_search(&cfg, 1.0).unwrap();
        assert_eq!(r.iterations, 66);
    }

    #[test]
    fn zero_cost_grid_takes_everything() {
        let doc = ONE
            .replace("\"rho\": 1.0", "\"rho\": 0.0")
            .replace("\"beta_bit\": 0.001", "\"beta_bit\": 0.0")
            .replace("\"energy_budget\": 1.0", "\"energy_budget\": 1e9");
        let cfg = load_config::<f64>(&doc).unwrap();
        let r = grid_search(&cfg, 1.0).unwrap();
        assert_eq!(r.allocation.device_total(0), 10.0);
        // lexicographic tie-break puts everything on the first band
        assert_eq!(r.allocation.ub_bits[0], 0.0);
    }

    #[test]
    fn continuous_dominates_lattice() {
        let cfg = load_config::<f64>(ONE).unwrap();
        let c = solve_centralized(&cfg).unwrap();
        let g = grid_search(&cfg, 1.0).unwrap();
        assert!(c.objective <= g.objective + 1e-9);
        let l = lipschitz_bound(&cfg).unwrap();
        assert!(g.objective <= c.objective + l * 1.0);
        assert!(c.kkt_residual <= 1e-6);
    }

    #[test]
    fn free_energy_and_prices_fill_to_cap() {
        let doc = ONE
            .replace("\"rho\": 1.0", "\"rho\": 0.0")
            .replace("\"beta_bit\": 0.001", "\"beta_bit\": 0.0")
            .replace("\"energy_budget\": 1.0", "\"energy_budget\": 1e12");
        let cfg = load_config::<f64>(&doc).unwrap();
        let c = solve_centralized(&cfg).unwrap();
        assert_relative_eq!(c.allocation.device_total(0), 10.0, max_relative = 1e-8);
    }

    #[test]
    fn grid_guard() {
        let cfg = load_config::<f64>(ONE).unwrap();
        assert!(matches!(
            grid_search(&cfg, 1e-7),
            Err(Error::GridTooLarge { .. })
        ));
    }
}
