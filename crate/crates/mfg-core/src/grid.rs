//! Uniform periodic space-time grid and the scalar fields living on it.
//!
//! The road is a ring of length `L` discretized into `Nx` uniform cells, the
//! horizon `[0, T]` into `Nt` uniform steps. Density and speed are cell
//! quantities, the value function is a node quantity; all three are stored as
//! `Nx`-length arrays per time level and the node/center distinction is a
//! documentation convention only, since the stencils need indexed differences
//! and nothing else. Index `j` is attributed to position `x_j = j*dx` and
//! level `n` to time `t_n = n*dt`, with periodic identification `x ~ x + L`.

use std::io::{self, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("field has {found} values, grid wants {expected}")]
    FieldLength { expected: usize, found: usize },
    #[error("time {t} outside horizon [0, {horizon}]")]
    TimeOutOfDomain { t: f64, horizon: f64 },
    #[error("fields live on different grids")]
    GridMismatch,
}

/// Uniform grid on the ring `[0, L) x [0, T]`.
///
/// Only `(L, T, Nx, Nt)` are stored; `dx = L/Nx` and `dt = T/Nt` are derived,
/// so `dx*Nx = L` and `dt*Nt = T` hold exactly in the stored representation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpaceTimeGrid {
    length: f64,
    horizon: f64,
    num_cells: usize,
    num_steps: usize,
}

impl SpaceTimeGrid {
    pub fn new(length: f64, horizon: f64, num_cells: usize, num_steps: usize) -> Result<Self, GridError> {
        if !(length.is_finite() && length > 0.0) {
            return Err(GridError::Invalid(format!("length must be positive, got {length}")));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(GridError::Invalid(format!("horizon must be positive, got {horizon}")));
        }
        if num_cells < 2 {
            return Err(GridError::Invalid(format!("need at least 2 cells, got {num_cells}")));
        }
        if num_steps < 1 {
            return Err(GridError::Invalid(format!("need at least 1 time step, got {num_steps}")));
        }
        Ok(Self { length, horizon, num_cells, num_steps })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn num_cells(&self) -> usize {
        self.num_cells
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn dx(&self) -> f64 {
        self.length / self.num_cells as f64
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.num_steps as f64
    }

    pub fn position(&self, j: usize) -> f64 {
        j as f64 * self.dx()
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt()
    }

    /// Wraps `x` into `[0, L)`. Safe against the rounding case where
    /// `rem_euclid` of a tiny negative lands exactly on `L`.
    pub fn wrap(&self, x: f64) -> f64 {
        let w = x.rem_euclid(self.length);
        if w >= self.length {
            0.0
        } else {
            w
        }
    }

    /// Number of values a field on this grid stores: `(Nt + 1) * Nx`.
    pub fn field_len(&self) -> usize {
        (self.num_steps + 1) * self.num_cells
    }
}

/// A scalar quantity sampled on every `(n, j)` grid point, periodic in space.
///
/// `final_level_derived` marks fields whose top time level is not a solver
/// unknown but was filled in from terminal data (the speed field of a solved
/// game); it is informational and does not change indexing or interpolation.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: SpaceTimeGrid,
    values: Vec<f64>,
    final_level_derived: bool,
}

impl ScalarField {
    pub fn constant(grid: SpaceTimeGrid, c: f64) -> Self {
        Self { grid, values: vec![c; grid.field_len()], final_level_derived: false }
    }

    pub fn from_fn(grid: SpaceTimeGrid, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let nx = grid.num_cells();
        let mut values = Vec::with_capacity(grid.field_len());
        for n in 0..=grid.num_steps() {
            for j in 0..nx {
                values.push(f(n, j));
            }
        }
        Self { grid, values, final_level_derived: false }
    }

    pub fn from_values(grid: SpaceTimeGrid, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.field_len() {
            return Err(GridError::FieldLength { expected: grid.field_len(), found: values.len() });
        }
        Ok(Self { grid, values, final_level_derived: false })
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, n: usize, j: usize) -> f64 {
        self.values[n * self.grid.num_cells() + j]
    }

    pub fn set_value(&mut self, n: usize, j: usize, v: f64) {
        self.values[n * self.grid.num_cells() + j] = v;
    }

    pub fn level(&self, n: usize) -> &[f64] {
        let nx = self.grid.num_cells();
        &self.values[n * nx..(n + 1) * nx]
    }

    pub fn level_mut(&mut self, n: usize) -> &mut [f64] {
        let nx = self.grid.num_cells();
        &mut self.values[n * nx..(n + 1) * nx]
    }

    pub fn final_level_derived(&self) -> bool {
        self.final_level_derived
    }

    pub fn mark_final_level_derived(&mut self) {
        self.final_level_derived = true;
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Bilinear interpolation, periodic in `x`, clamped to the sample range in
    /// `t` only up to roundoff; `t` outside `[0, T]` is a domain error.
    pub fn interpolate(&self, x: f64, t: f64) -> Result<f64, GridError> {
        let g = &self.grid;
        let slack = 1e-12 * g.horizon();
        if !t.is_finite() || t < -slack || t > g.horizon() + slack {
            return Err(GridError::TimeOutOfDomain { t, horizon: g.horizon() });
        }
        let s = (t.clamp(0.0, g.horizon())) / g.dt();
        let mut n0 = s.floor() as usize;
        if n0 >= g.num_steps() {
            n0 = g.num_steps() - 1;
        }
        let theta = (s - n0 as f64).clamp(0.0, 1.0);

        let r = g.wrap(x) / g.dx();
        let mut j0 = r.floor() as usize;
        if j0 >= g.num_cells() {
            j0 = g.num_cells() - 1;
        }
        let xi = (r - j0 as f64).clamp(0.0, 1.0);
        let j1 = (j0 + 1) % g.num_cells();

        let lo = (1.0 - xi) * self.value(n0, j0) + xi * self.value(n0, j1);
        let hi = (1.0 - xi) * self.value(n0 + 1, j0) + xi * self.value(n0 + 1, j1);
        Ok((1.0 - theta) * lo + theta * hi)
    }

    /// CSV dump with one `t,x,value` row per sample, at 13 significant digits.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "t,x,value")?;
        for n in 0..=self.grid.num_steps() {
            for j in 0..self.grid.num_cells() {
                writeln!(w, "{:.12e},{:.12e},{:.12e}", self.grid.time(n), self.grid.position(j), self.value(n, j))?;
            }
        }
        Ok(())
    }
}

/// Discrete space-time L1 distance: `sum |a - b| * dx * dt` over all
/// `(Nt + 1) * Nx` samples. Every level carries the same `dt` weight, so two
/// fields differing by a constant `c` are at distance `c * L * T * (Nt+1)/Nt`.
pub fn l1_norm(a: &ScalarField, b: &ScalarField) -> Result<f64, GridError> {
    if a.grid != b.grid {
        return Err(GridError::GridMismatch);
    }
    let w = a.grid.dx() * a.grid.dt();
    let sum: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum * w)
}

/// A full mean-field solution: density, speed and value on one grid.
///
/// The speed field's top time level is never a solver unknown; solvers fill it
/// from the terminal condition and mark it `final_level_derived`.
#[derive(Clone, Debug)]
pub struct SolutionTriple {
    pub density: ScalarField,
    pub speed: ScalarField,
    pub value: ScalarField,
}

impl SolutionTriple {
    pub fn grid(&self) -> &SpaceTimeGrid {
        self.density.grid()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(nx: usize, nt: usize) -> SpaceTimeGrid {
        SpaceTimeGrid::new(2.0, 1.0, nx, nt).unwrap()
    }

    #[test]
    fn constructor_rejects_degenerate_grids() {
        assert!(SpaceTimeGrid::new(0.0, 1.0, 4, 4).is_err());
        assert!(SpaceTimeGrid::new(1.0, -1.0, 4, 4).is_err());
        assert!(SpaceTimeGrid::new(1.0, 1.0, 1, 4).is_err());
        assert!(SpaceTimeGrid::new(1.0, 1.0, 4, 0).is_err());
        assert!(SpaceTimeGrid::new(f64::NAN, 1.0, 4, 4).is_err());
    }

    #[test]
    fn spacing_times_count_recovers_extent() {
        let g = grid(7, 13);
        assert!((g.dx() * g.num_cells() as f64 - g.length()).abs() < 1e-15);
        assert!((g.dt() * g.num_steps() as f64 - g.horizon()).abs() < 1e-15);
    }

    #[test]
    fn interpolation_is_exact_at_nodes() {
        let g = grid(8, 5);
        let f = ScalarField::from_fn(g, |n, j| (n * 31 + j * 7) as f64 * 0.125 - 1.0);
        for n in 0..=5 {
            for j in 0..8 {
                let v = f.interpolate(g.position(j), g.time(n)).unwrap();
                assert!((v - f.value(n, j)).abs() < 1e-12, "node ({n},{j})");
            }
        }
    }

    #[test]
    fn interpolation_midpoint_of_linear_ramp_is_node_mean() {
        // Periodic tent profile, linear between adjacent nodes.
        let g = grid(4, 2);
        let vals = [0.0, 1.0, 2.0, 1.0];
        let f = ScalarField::from_fn(g, |_, j| vals[j]);
        for j in 0..4 {
            let x = g.position(j) + 0.5 * g.dx();
            let want = 0.5 * (vals[j] + vals[(j + 1) % 4]);
            let got = f.interpolate(x, 0.5).unwrap();
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn interpolation_rejects_time_outside_horizon() {
        let g = grid(4, 4);
        let f = ScalarField::constant(g, 1.0);
        assert!(matches!(f.interpolate(0.3, -0.1), Err(GridError::TimeOutOfDomain { .. })));
        assert!(matches!(f.interpolate(0.3, 1.1), Err(GridError::TimeOutOfDomain { .. })));
        assert!(f.interpolate(0.3, 1.0).is_ok());
        assert!(f.interpolate(0.3, 0.0).is_ok());
    }

    #[test]
    fn l1_norm_of_identical_fields_is_zero() {
        let g = grid(16, 8);
        let f = ScalarField::from_fn(g, |n, j| (n as f64).sin() + j as f64);
        assert_eq!(l1_norm(&f, &f).unwrap(), 0.0);
    }

    #[test]
    fn l1_norm_of_constant_offset_matches_hand_sum() {
        // (Nt+1)*Nx samples, each |c| * dx * dt: c * L * T * (Nt+1)/Nt.
        let g = grid(16, 8);
        let a = ScalarField::constant(g, 0.25);
        let b = ScalarField::constant(g, 0.25 + 0.3);
        let want = 0.3 * g.length() * g.horizon() * 9.0 / 8.0;
        assert!((l1_norm(&a, &b).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn l1_norm_of_single_entry_is_weighted_difference() {
        let g = grid(16, 8);
        let a = ScalarField::constant(g, 0.0);
        let mut b = ScalarField::constant(g, 0.0);
        b.set_value(3, 5, -2.0);
        let want = 2.0 * g.dx() * g.dt();
        assert!((l1_norm(&a, &b).unwrap() - want).abs() < 1e-16);
    }

    #[test]
    fn l1_norm_rejects_grid_mismatch() {
        let a = ScalarField::constant(grid(16, 8), 0.0);
        let b = ScalarField::constant(grid(8, 8), 0.0);
        assert!(matches!(l1_norm(&a, &b), Err(GridError::GridMismatch)));
    }

    #[test]
    fn from_values_checks_length() {
        let g = grid(4, 2);
        assert!(ScalarField::from_values(g, vec![0.0; 11]).is_err());
        assert!(ScalarField::from_values(g, vec![0.0; 12]).is_ok());
    }

    #[test]
    fn csv_has_header_and_one_row_per_sample() {
        let g = grid(3, 2);
        let f = ScalarField::from_fn(g, |n, j| (n + j) as f64);
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x,value");
        assert_eq!(lines.len(), 1 + 9);
        // 13 significant digits survive the round trip.
        let first: Vec<f64> = lines[1].split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(first, vec![0.0, 0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn interpolation_is_periodic_in_x(x in -10.0f64..10.0, t in 0.0f64..1.0, k in -3i32..4) {
            let g = grid(9, 6);
            let f = ScalarField::from_fn(g, |n, j| ((n * 13 + j * 5) % 17) as f64 * 0.3 - 1.2);
            let a = f.interpolate(x, t).unwrap();
            let b = f.interpolate(x + k as f64 * g.length(), t).unwrap();
            prop_assert!((a - b).abs() < 1e-9, "a={a} b={b}");
        }

        #[test]
        fn l1_norm_is_symmetric_and_triangular(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let g = grid(6, 4);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut take = || ScalarField::from_fn(g, |_, _| rng.random_range(-2.0..2.0));
            let (a, b, c) = (take(), take(), take());
            let ab = l1_norm(&a, &b).unwrap();
            let ba = l1_norm(&b, &a).unwrap();
            let bc = l1_norm(&b, &c).unwrap();
            let ac = l1_norm(&a, &c).unwrap();
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert!(ac <= ab + bc + 1e-12);
        }
    }
}
