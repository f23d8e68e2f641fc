//! Driving cost models and their constrained Legendre transforms.
//!
//! Each model defines a running cost `f(u, rho)` for a car driving at speed
//! `u` through local density `rho`, with the hard control constraint
//! `0 <= u <= u_max`. The backward sweep needs the transform
//!
//! ```text
//! f*(p, rho) = min_{0 <= a <= u_max} { f(a, rho) + a * p }
//! ```
//!
//! together with its minimizer `f*_p(p, rho)` (the optimal speed) and the
//! density derivative `f*_rho`. All three models are quadratic in the speed,
//! so the minimizer is the box clamp of an affine expression and the
//! transform evaluates in closed form. The minimizer is piecewise affine
//! with a kink where it meets a bound; the reported slopes use a consistent
//! one-sided subgradient: zero on the clamped side, including the boundary
//! point itself, so the linearization never flip-flops between kink branches
//! as iterates cross a bound. The envelope derivative of the transform
//! itself stays well defined throughout.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("speed {u} violates the control constraint [0, {u_max}]")]
    SpeedOutOfBounds { u: f64, u_max: f64 },
    #[error("invalid cost model: {0}")]
    Invalid(String),
}

/// Equilibrium speed profile tracked by the LWR-style cost, with its slope
/// (the Jacobian needs `U'(rho)` analytically).
#[derive(Clone)]
pub struct TrackedSpeed {
    speed: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    slope: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl TrackedSpeed {
    pub fn new(
        speed: impl Fn(f64) -> f64 + Send + Sync + 'static,
        slope: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { speed: Arc::new(speed), slope: Arc::new(slope) }
    }

    /// Greenshields profile `U(rho) = u_max * (1 - rho/rho_jam)`.
    pub fn greenshields(u_max: f64, rho_jam: f64) -> Self {
        Self::new(move |rho| u_max * (1.0 - rho / rho_jam), move |_| -u_max / rho_jam)
    }

    pub fn speed(&self, rho: f64) -> f64 {
        (self.speed)(rho)
    }

    pub fn slope(&self, rho: f64) -> f64 {
        (self.slope)(rho)
    }
}

impl fmt::Debug for TrackedSpeed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("TrackedSpeed(..)")
    }
}

/// The three running-cost models. `u_max` bounds the control, `rho_jam` sets
/// the density scale.
#[derive(Clone, Debug)]
pub enum CostModel {
    /// `f = (U(rho) - u)^2 / 2`: pure tracking of an equilibrium speed.
    LwrTracking { u_max: f64, rho_jam: f64, speed: TrackedSpeed },
    /// `f = (u/u_max)^2 / 2 - u/u_max + rho/rho_jam`: kinetic + efficiency
    /// terms plus a speed-independent congestion charge.
    Separable { u_max: f64, rho_jam: f64 },
    /// `f = (u/u_max)^2 / 2 - u/u_max + u*rho/(u_max*rho_jam)`: the
    /// congestion charge scales with the speed.
    NonSeparable { u_max: f64, rho_jam: f64 },
}

impl CostModel {
    pub fn lwr_greenshields(u_max: f64, rho_jam: f64) -> Result<Self, CostError> {
        Self::check_params(u_max, rho_jam)?;
        Ok(Self::LwrTracking { u_max, rho_jam, speed: TrackedSpeed::greenshields(u_max, rho_jam) })
    }

    pub fn separable(u_max: f64, rho_jam: f64) -> Result<Self, CostError> {
        Self::check_params(u_max, rho_jam)?;
        Ok(Self::Separable { u_max, rho_jam })
    }

    pub fn non_separable(u_max: f64, rho_jam: f64) -> Result<Self, CostError> {
        Self::check_params(u_max, rho_jam)?;
        Ok(Self::NonSeparable { u_max, rho_jam })
    }

    fn check_params(u_max: f64, rho_jam: f64) -> Result<(), CostError> {
        if !(u_max.is_finite() && u_max > 0.0) {
            return Err(CostError::Invalid(format!("u_max must be positive, got {u_max}")));
        }
        if !(rho_jam.is_finite() && rho_jam > 0.0) {
            return Err(CostError::Invalid(format!("rho_jam must be positive, got {rho_jam}")));
        }
        Ok(())
    }

    pub fn u_max(&self) -> f64 {
        match *self {
            Self::LwrTracking { u_max, .. } | Self::Separable { u_max, .. } | Self::NonSeparable { u_max, .. } => u_max,
        }
    }

    pub fn rho_jam(&self) -> f64 {
        match *self {
            Self::LwrTracking { rho_jam, .. } | Self::Separable { rho_jam, .. } | Self::NonSeparable { rho_jam, .. } => {
                rho_jam
            }
        }
    }

    /// Stable key used in configs, file names and reports.
    pub fn key(&self) -> &'static str {
        match self {
            Self::LwrTracking { .. } => "lwr",
            Self::Separable { .. } => "separable",
            Self::NonSeparable { .. } => "nonseparable",
        }
    }

    /// Running cost `f(u, rho)`. The control constraint is hard: `u` outside
    /// `[0, u_max]` is a domain error, not a clamp.
    pub fn running_cost(&self, u: f64, rho: f64) -> Result<f64, CostError> {
        if !(0.0..=self.u_max()).contains(&u) {
            return Err(CostError::SpeedOutOfBounds { u, u_max: self.u_max() });
        }
        Ok(self.running_cost_unchecked(u, rho))
    }

    fn running_cost_unchecked(&self, u: f64, rho: f64) -> f64 {
        match self {
            Self::LwrTracking { speed, .. } => {
                let d = speed.speed(rho) - u;
                0.5 * d * d
            }
            Self::Separable { u_max, rho_jam } => {
                let s = u / u_max;
                0.5 * s * s - s + rho / rho_jam
            }
            Self::NonSeparable { u_max, rho_jam } => {
                let s = u / u_max;
                0.5 * s * s - s + u * rho / (u_max * rho_jam)
            }
        }
    }

    /// Unconstrained minimizer of `f(., rho) + . * p`; the box constraint is
    /// applied by the callers.
    fn raw_speed(&self, p: f64, rho: f64) -> f64 {
        match self {
            Self::LwrTracking { speed, .. } => speed.speed(rho) - p,
            Self::Separable { u_max, .. } => u_max * (1.0 - u_max * p),
            Self::NonSeparable { u_max, rho_jam } => u_max * (1.0 - rho / rho_jam - u_max * p),
        }
    }

    /// Optimal speed `f*_p(p, rho)`: the constrained minimizer.
    pub fn optimal_speed(&self, p: f64, rho: f64) -> f64 {
        self.raw_speed(p, rho).clamp(0.0, self.u_max())
    }

    /// True when the unconstrained minimizer lies strictly inside the box;
    /// on the bounds and beyond them the minimizer slopes are zero.
    fn interior(&self, p: f64, rho: f64) -> bool {
        let raw = self.raw_speed(p, rho);
        raw > 0.0 && raw < self.u_max()
    }

    /// Constrained transform `f*(p, rho)`, evaluated as
    /// `f(a*, rho) + a* * p` at the clamped minimizer. For the tracking model
    /// this yields exactly 0.0 at `p = 0` whenever `U(rho)` is admissible.
    pub fn hamiltonian(&self, p: f64, rho: f64) -> f64 {
        let a = self.optimal_speed(p, rho);
        self.running_cost_unchecked(a, rho) + a * p
    }

    /// Myopic equilibrium speed `U(rho) = f*_p(0, rho)`.
    pub fn equilibrium_speed(&self, rho: f64) -> f64 {
        self.optimal_speed(0.0, rho)
    }

    /// `d f*_p / dp`, zero on the clamped side (bounds included).
    pub fn speed_costate_slope(&self, p: f64, rho: f64) -> f64 {
        if !self.interior(p, rho) {
            return 0.0;
        }
        match self {
            Self::LwrTracking { .. } => -1.0,
            Self::Separable { u_max, .. } | Self::NonSeparable { u_max, .. } => -u_max * u_max,
        }
    }

    /// `d f*_p / drho`, zero on the clamped side (bounds included).
    pub fn speed_density_slope(&self, p: f64, rho: f64) -> f64 {
        if !self.interior(p, rho) {
            return 0.0;
        }
        match self {
            Self::LwrTracking { speed, .. } => speed.slope(rho),
            Self::Separable { .. } => 0.0,
            Self::NonSeparable { u_max, rho_jam } => -u_max / rho_jam,
        }
    }

    /// `d f* / drho`. By the envelope theorem this is the partial density
    /// derivative of the running cost at the minimizer, valid in all clamp
    /// regimes.
    pub fn hamiltonian_density_slope(&self, p: f64, rho: f64) -> f64 {
        let a = self.optimal_speed(p, rho);
        match self {
            Self::LwrTracking { speed, .. } => (speed.speed(rho) - a) * speed.slope(rho),
            Self::Separable { rho_jam, .. } => 1.0 / rho_jam,
            Self::NonSeparable { u_max, rho_jam } => a / (u_max * rho_jam),
        }
    }
}
