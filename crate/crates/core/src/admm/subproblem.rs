//! Exact minimization of separable convex functions over a local set `D_k`.
//!
//! The constraints couple coordinates only through the per-device collection
//! cap and the server total, so the dual reduces to one scalar per device
//! (nested inside) and one scalar for the server (outer). Each coordinate
//! then solves an increasing scalar equation.

use rayon::prelude::*;

use crate::problem::{LocalSet, ServerModel};
use crate::roots::{illinois, increasing_root};
use crate::scalar::Scalar;

/// Per-server data handed to [`server_update`].
pub type SubproblemSpec<T> = ServerModel<T>;

#[derive(Clone, Debug, PartialEq)]
pub struct SeparableSolution<T> {
    pub x: Vec<T>,
    /// Multiplier of the server total constraint (positive at the cap,
    /// negative at the floor).
    pub shift: T,
    pub pair_multipliers: Vec<T>,
    /// Largest projected stationarity violation relative to the gradient scale.
    pub kkt_residual: T,
}

const MAX_ROOT_ITER: usize = 300;

struct Solver<'a, T, G> {
    set: &'a LocalSet<T>,
    grad: G,
}

impl<T: Scalar, G: Fn(usize, T) -> (T, T) + Sync> Solver<'_, T, G> {
    fn coordinate(&self, i: usize, t: T) -> T {
        let u = self.set.upper(i);
        if u <= T::zero() {
            return T::zero();
        }
        increasing_root(
            |x| {
                let (d1, d2) = (self.grad)(i, x);
                (d1 + t, d2)
            },
            T::zero(),
            u,
        )
    }

    /// Device `m` at server multiplier `t`: returns the pair and its multiplier.
    fn device(&self, m: usize, t: T) -> (T, T, T) {
        let (ia, ib) = (2 * m, 2 * m + 1);
        let a = self.coordinate(ia, t);
        let b = self.coordinate(ib, t);
        let cap = self.set.pair_caps[m];
        if a + b <= cap {
            return (a, b, T::zero());
        }
        let threshold = |i: usize| {
            if self.set.upper(i) > T::zero() {
                -(self.grad)(i, T::zero()).0
            } else {
                T::neg_infinity()
            }
        };
        let mu_hi = (threshold(ia).max(threshold(ib)) - t).max(T::zero());
        if cap <= T::zero() {
            return (T::zero(), T::zero(), mu_hi);
        }
        let excess = |mu: T| self.coordinate(ia, t + mu) + self.coordinate(ib, t + mu) - cap;
        let br = illinois(
            excess,
            T::zero(),
            a + b - cap,
            mu_hi,
            -cap,
            T::epsilon() * T::lit(4.0) * cap,
            MAX_ROOT_ITER,
        );
        let mu = br.hi;
        let (a, b) = (self.coordinate(ia, t + mu), self.coordinate(ib, t + mu));
        (a, b, mu)
    }

    fn total(&self, t: T) -> T {
        (0..self.set.devices())
            .map(|m| {
                let (a, b, _) = self.device(m, t);
                a + b
            })
            .sum()
    }

    fn assemble(&self, t: T) -> SeparableSolution<T> {
        let mut x = vec![T::zero(); self.set.dim()];
        let mut mus = vec![T::zero(); self.set.devices()];
        for m in 0..self.set.devices() {
            let (a, b, mu) = self.device(m, t);
            x[2 * m] = a;
            x[2 * m + 1] = b;
            mus[m] = mu;
        }
        let kkt = kkt_residual(self.set, &self.grad, &x, t, &mus);
        SeparableSolution {
            x,
            shift: t,
            pair_multipliers: mus,
            kkt_residual: kkt,
        }
    }

    fn solve(&self) -> SeparableSolution<T> {
        let s0 = self.total(T::zero());
        let (floor, cap) = (self.set.floor, self.set.cap);
        if s0 <= cap && s0 >= floor {
            return self.assemble(T::zero());
        }
        let active = || (0..self.set.dim()).filter(|&i| self.set.upper(i) > T::zero());
        let tol = T::epsilon() * T::lit(8.0) * (T::one() + cap.min(self.set.max_total()));
        let t = if s0 > cap {
            let t_hi = active()
                .map(|i| -(self.grad)(i, T::zero()).0)
                .fold(T::zero(), T::max);
            let br = illinois(
                |t| self.total(t) - cap,
                T::zero(),
                s0 - cap,
                t_hi,
                -cap,
                tol,
                MAX_ROOT_ITER,
            );
            br.hi
        } else {
            let t_lo = active()
                .map(|i| -(self.grad)(i, self.set.upper(i)).0)
                .fold(T::zero(), T::min);
            let s_lo = self.total(t_lo);
            let br = illinois(
                |t| self.total(t) - floor,
                t_lo,
                s_lo - floor,
                T::zero(),
                s0 - floor,
                tol,
                MAX_ROOT_ITER,
            );
            br.lo
        };
        self.assemble(t)
    }
}

/// KKT residual of `x` with multipliers `(t, mus)` for `min Σ g_i(x_i)` over `set`.
pub fn kkt_residual<T: Scalar, G: Fn(usize, T) -> (T, T)>(
    set: &LocalSet<T>,
    grad: &G,
    x: &[T],
    t: T,
    mus: &[T],
) -> T {
    let mut worst = T::zero();
    let mut scale = T::one();
    for (i, &xi) in x.iter().enumerate() {
        let u = set.upper(i);
        if u <= T::zero() {
            continue;
        }
        let g = grad(i, xi).0;
        scale = scale.max(g.abs());
        let r = g + t + mus[i / 2];
        let violation = if xi <= T::zero() {
            (-r).max(T::zero())
        } else if xi >= u {
            r.max(T::zero())
        } else {
            r.abs()
        };
        worst = worst.max(violation);
    }
    (worst / scale).max(set.violation(x))
}

/// Minimizes `Σ g_i(x_i)` over `set`. `grad(i, v)` returns `(g_i'(v), g_i''(v))`
/// and `g_i'` must be increasing on `[0, upper(i)]`.
pub fn minimize_separable<T: Scalar, G: Fn(usize, T) -> (T, T) + Sync>(
    set: &LocalSet<T>,
    grad: G,
) -> SeparableSolution<T> {
    Solver { set, grad }.solve()
}

/// Euclidean projection onto `D_k`.
pub fn project_local<T: Scalar>(set: &LocalSet<T>, z: &[T]) -> Vec<T> {
    minimize_separable(set, |i, x| (x - z[i], T::one())).x
}

/// The point of `D_k` with the least energy.
pub fn min_energy_point<T: Scalar>(spec: &SubproblemSpec<T>) -> SeparableSolution<T> {
    minimize_separable(&spec.set, |i, x| {
        let c = spec.curve(i);
        (c.derivative(x), c.second_derivative(x))
    })
}

/// Server step: `argmin_{n ∈ D_k} f_k(n) + (η/2)‖n − w_k + θ_k‖²`.
pub fn server_update<T: Scalar>(
    spec: &SubproblemSpec<T>,
    w: &[T],
    theta: &[T],
    eta: T,
) -> SeparableSolution<T> {
    minimize_separable(&spec.set, |i, x| {
        let (d1, d2) = spec.coordinate_derivatives(i, x);
        (d1 + eta * (x - w[i] + theta[i]), d2 + eta)
    })
}

/// [`server_update`] for all servers, in server order.
pub fn server_updates<T: Scalar>(
    specs: &[SubproblemSpec<T>],
    w: &[&[T]],
    theta: &[&[T]],
    eta: T,
) -> Vec<SeparableSolution<T>> {
    specs
        .par_iter()
        .enumerate()
        .map(|(k, s)| server_update(s, w[k], theta[k], eta))
        .collect()
}
