//! Bracketed scalar root finding used by the projections and subproblem solvers.

use crate::scalar::Scalar;

/// Final bracket of a sign-change search. `lo`/`hi` keep the sign of the
/// function at the original `lo`/`hi` endpoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bracket<T> {
    pub lo: T,
    pub f_lo: T,
    pub hi: T,
    pub f_hi: T,
    pub iterations: usize,
}

impl<T: Scalar> Bracket<T> {
    /// Endpoint with the smaller residual.
    pub fn best(&self) -> T {
        if self.f_lo.abs() <= self.f_hi.abs() {
            self.lo
        } else {
            self.hi
        }
    }
}

/// Illinois false position with bisection safeguard on `[lo, hi]`.
///
/// `f(lo)` and `f(hi)` must not share a strict sign. Stops when the residual
/// drops to `ftol` or the bracket collapses to adjacent floats.
pub fn illinois<T: Scalar, F: FnMut(T) -> T>(
    mut f: F,
    lo: T,
    f_lo: T,
    hi: T,
    f_hi: T,
    ftol: T,
    max_iter: usize,
) -> Bracket<T> {
    let mut b = Bracket {
        lo,
        f_lo,
        hi,
        f_hi,
        iterations: 0,
    };
    if f_lo.abs() <= ftol {
        b.hi = lo;
        b.f_hi = f_lo;
        return b;
    }
    if f_hi.abs() <= ftol {
        b.lo = hi;
        b.f_lo = f_hi;
        return b;
    }
    let lo_negative = f_lo < T::zero();
    let (mut wa, mut wb) = (f_lo, f_hi);
    let mut last = 0i8;
    let mut width = (hi - lo).abs();
    for it in 0..max_iter {
        b.iterations = it + 1;
        let (a, z) = (b.lo.min(b.hi), b.lo.max(b.hi));
        let mut x = (b.lo * wb - b.hi * wa) / (wb - wa);
        // every third step must at least halve the bracket
        if !(x > a && x < z) || (it % 3 == 2 && (z - a) > T::lit(0.5) * width) {
            x = b.lo + (b.hi - b.lo) * T::lit(0.5);
        }
        if it % 3 == 2 {
            width = z - a;
        }
        if !(x > a && x < z) {
            break;
        }
        let fx = f(x);
        if fx.abs() <= ftol {
            b.lo = x;
            b.f_lo = fx;
            b.hi = x;
            b.f_hi = fx;
            break;
        }
        if (fx < T::zero()) == lo_negative {
            b.lo = x;
            b.f_lo = fx;
            wa = fx;
            if last == -1 {
                wb *= T::lit(0.5);
            }
            last = -1;
        } else {
            b.hi = x;
            b.f_hi = fx;
            wb = fx;
            if last == 1 {
                wa *= T::lit(0.5);
            }
            last = 1;
        }
    }
    b
}

/// Root of an increasing function `h` on `[lo, hi]` by Newton steps kept
/// inside a shrinking bracket. `h` returns the value and derivative.
/// Returns `lo` when `h(lo) >= 0` and `hi` when `h(hi) <= 0`.
pub fn increasing_root<T: Scalar, H: Fn(T) -> (T, T)>(h: H, lo: T, hi: T) -> T {
    let (h_lo, _) = h(lo);
    if h_lo >= T::zero() {
        return lo;
    }
    let (h_hi, d_hi) = h(hi);
    if h_hi <= T::zero() {
        return hi;
    }
    let (mut a, mut z) = (lo, hi);
    // Convex increasing functions converge monotonically from the right.
    let mut x = hi;
    let (mut hx, mut dx) = (h_hi, d_hi);
    let tol = T::epsilon() * T::lit(4.0);
    for _ in 0..200 {
        if hx < T::zero() {
            a = x;
        } else if hx > T::zero() {
            z = x;
        } else {
            return x;
        }
        let newton = x - hx / dx;
        let next = if newton > a && newton < z && newton.is_finite() {
            newton
        } else {
            a + (z - a) * T::lit(0.5)
        };
        if (next - x).abs() <= tol * (T::one() + x.abs()) || next <= a || next >= z {
            return next.max(lo).min(hi);
        }
        x = next;
        (hx, dx) = h(x);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn illinois_finds_cubic_root() {
        let f = |x: f64| x * x * x - 2.0;
        let b = illinois(f, 0.0, -2.0, 3.0, 25.0, 1e-14, 200);
        assert_relative_eq!(b.best(), 2f64.cbrt(), max_relative = 1e-12);
        assert!(b.iterations < 60);
    }

    #[test]
    fn illinois_handles_decreasing_functions() {
        let f = |x: f64| (-x).exp() - 0.25;
        let b = illinois(f, 0.0, 0.75, 10.0, f(10.0), 0.0, 500);
        assert_relative_eq!(b.best(), 4f64.ln(), max_relative = 1e-12);
        assert!(b.f_lo >= 0.0 && b.f_hi <= 0.0);
    }

    #[test]
    fn illinois_survives_steep_exponential() {
        let f = |x: f64| (50.0 * x).exp_m1() - 1.0;
        let b = illinois(f, 0.0, -1.0, 1.0, f(1.0), 1e-13, 500);
        assert_relative_eq!(b.best(), 2f64.ln() / 50.0, max_relative = 1e-10);
    }

    #[test]
    fn newton_root_and_clamps() {
        let h = |x: f64| (x.exp() - 3.0, x.exp());
        assert_relative_eq!(
            increasing_root(h, 0.0, 5.0),
            3f64.ln(),
            max_relative = 1e-14
        );
        assert_eq!(increasing_root(h, 2.0, 5.0), 2.0);
        assert_eq!(increasing_root(h, 0.0, 1.0), 1.0);
    }

    #[test]
    fn newton_works_in_f32() {
        let h = |x: f32| (x * x - 2.0, 2.0 * x);
        assert_relative_eq!(
            increasing_root(h, 0.0f32, 2.0),
            2f32.sqrt(),
            max_relative = 1e-6
        );
    }
}
