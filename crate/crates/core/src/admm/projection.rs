//! Euclidean projection onto the shared energy set
//! `{w ≥ 0 : Σ_i ν_i(w_i) ≤ ε}`.

use crate::energy::EnergyCurve;
use crate::error::Result;
use crate::problem::Problem;
use crate::roots::{illinois, increasing_root};
use crate::scalar::Scalar;
use crate::scenario::ScenarioConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyBall<T> {
    pub curves: Vec<EnergyCurve<T>>,
    pub budget: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BallProjection<T> {
    pub w: Vec<T>,
    /// Multiplier of the energy constraint (zero when it is slack).
    pub multiplier: T,
    pub energy: T,
}

/// Relative accuracy of the energy at an active constraint.
pub const BALL_TOLERANCE: f64 = 1e-10;

impl<T: Scalar> EnergyBall<T> {
    pub fn new(curves: Vec<EnergyCurve<T>>, budget: T) -> Self {
        Self { curves, budget }
    }

    pub fn from_problem(problem: &Problem<T>) -> Self {
        Self::new(problem.curves(), problem.energy_budget)
    }

    /// The set in bit units for a scenario.
    pub fn from_config(cfg: &ScenarioConfig<T>) -> Result<Self> {
        Ok(Self::from_problem(&Problem::from_config(cfg)?))
    }

    pub fn energy(&self, w: &[T]) -> T {
        self.curves.iter().zip(w).map(|(c, &x)| c.value(x)).sum()
    }

    fn limit(&self, i: usize) -> T {
        self.curves[i].max_bits()
    }

    fn coordinate(&self, i: usize, z: T, lambda: T) -> T {
        if z <= T::zero() {
            return T::zero();
        }
        let c = &self.curves[i];
        let hi = z.min(self.limit(i));
        increasing_root(
            |w| {
                (
                    w - z + lambda * c.derivative(w),
                    T::one() + lambda * c.second_derivative(w),
                )
            },
            T::zero(),
            hi,
        )
    }

    fn at(&self, z: &[T], lambda: T) -> Vec<T> {
        z.iter()
            .enumerate()
            .map(|(i, &zi)| self.coordinate(i, zi, lambda))
            .collect()
    }

    /// Projection of `z`. Coordinates are held within the curve's exponent limit.
    pub fn project(&self, z: &[T]) -> BallProjection<T> {
        let clamped: Vec<T> = z
            .iter()
            .enumerate()
            .map(|(i, &v)| v.max(T::zero()).min(self.limit(i)))
            .collect();
        let e0 = self.energy(&clamped);
        if e0 <= self.budget {
            return BallProjection {
                w: clamped,
                multiplier: T::zero(),
                energy: e0,
            };
        }
        let lambda_hi = z
            .iter()
            .zip(&self.curves)
            .map(|(&zi, c)| zi / c.derivative(T::zero()))
            .fold(T::zero(), T::max);
        let tol = T::lit(BALL_TOLERANCE) * self.budget;
        let br = illinois(
            |l| self.energy(&self.at(z, l)) - self.budget,
            T::zero(),
            e0 - self.budget,
            lambda_hi,
            -self.budget,
            tol,
            400,
        );
        // the upper end always satisfies the budget
        let lambda = if br.f_lo.abs() <= tol { br.lo } else { br.hi };
        let w = self.at(z, lambda);
        let energy = self.energy(&w);
        BallProjection {
            w,
            multiplier: lambda,
            energy,
        }
    }
}

/// Projection of `z` onto the energy set of `ball`.
pub fn project_energy_ball<T: Scalar>(z: &[T], ball: &EnergyBall<T>) -> Vec<T> {
    ball.project(z).w
}
