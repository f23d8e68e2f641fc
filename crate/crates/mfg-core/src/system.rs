//! The coupled forward-backward system in discrete form.
//!
//! Forward: the continuity equation `rho_t + (rho u)_x = 0` stepped with the
//! periodic Lax-Friedrichs scheme
//!
//! ```text
//! rho_j^{n+1} = (rho_{j-1}^n + rho_{j+1}^n)/2
//!             - dt/(2 dx) * (rho_{j+1}^n u_{j+1}^n - rho_{j-1}^n u_{j-1}^n)
//! ```
//!
//! Backward: the value equation `V_t + f*(V_x, rho) = 0` with the upwind
//! costate `p_j^{n+1} = (V_j^{n+1} - V_{j-1}^{n+1}) / dx`,
//!
//! ```text
//! (V_j^{n+1} - V_j^n)/dt + f*(p_j^{n+1}, rho_j^n) = 0,
//! u_j^n = f*_p(p_j^{n+1}, rho_j^n).
//! ```
//!
//! The unknown vector stacks all density levels `n = 0..=Nt`, then all speed
//! levels `n = 0..Nt` (the top speed level is not an unknown), then all value
//! levels `n = 0..=Nt`, each level in cell order: `(3 Nt + 2) * Nx` unknowns.
//! The residual stacks initial-density rows, continuity rows, speed
//! definition rows, value rows and terminal rows, in that order, making the
//! system square.

use std::io::{self, Write};
use std::ops::Range;
use std::sync::Arc;

use thiserror::Error;

use crate::cost::CostModel;
use crate::grid::{GridError, ScalarField, SolutionTriple, SpaceTimeGrid};
use crate::quad::{cell_average, gauss_legendre};
use crate::sparse::{CsrMatrix, Triplets};

/// Quadrature order used to turn an initial density profile into cell
/// averages. 16 points per cell resolves any profile smooth on the cell scale
/// far below the solver tolerances.
pub const INIT_QUADRATURE_POINTS: usize = 16;

/// Relative slack accepted on the CFL ratio, to keep exactly-marginal
/// configurations (`u_max * dt == dx`) legal under roundoff.
pub const CFL_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SystemError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("CFL violated: max speed {speed} * dt {dt} > dx {dx}")]
    CflViolated { speed: f64, dt: f64, dx: f64 },
    #[error("initial density: {0}")]
    InvalidInitialDensity(String),
    #[error("terminal cost is not finite at node {j}")]
    InvalidTerminalCost { j: usize },
    #[error("layout mismatch: vector has (Nx, Nt) = {found:?}, problem wants {expected:?}")]
    LayoutMismatch { expected: (usize, usize), found: (usize, usize) },
    #[error("level has {found} values, grid wants {expected}")]
    LevelLength { expected: usize, found: usize },
}

/// Initial density, kept in both forms: the profile (when known) so the
/// problem can be re-discretized on another grid, and the cell averages used
/// by the equations on this grid.
#[derive(Clone)]
enum DensityInit {
    Profile(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
    CellsOnly,
}

/// A fully specified game: grid, cost model, initial density and terminal
/// cost. Construction validates everything the equations assume, so the
/// solver can consume a `ProblemSpec` without re-checking.
#[derive(Clone)]
pub struct ProblemSpec {
    grid: SpaceTimeGrid,
    cost: CostModel,
    init: DensityInit,
    rho0_cells: Vec<f64>,
    v_term: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    v_term_nodes: Vec<f64>,
}

impl ProblemSpec {
    /// Builds a spec from an initial density profile; cell averages are taken
    /// with Gauss-Legendre quadrature per cell.
    pub fn new(
        grid: SpaceTimeGrid,
        cost: CostModel,
        rho0: impl Fn(f64) -> f64 + Send + Sync + 'static,
        v_term: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self, SystemError> {
        let rho0: Arc<dyn Fn(f64) -> f64 + Send + Sync> = Arc::new(rho0);
        let cells = profile_cells(&grid, rho0.as_ref())?;
        Self::build(grid, cost, DensityInit::Profile(rho0), cells, Arc::new(v_term))
    }

    /// Builds a spec directly from per-cell initial averages.
    pub fn from_cells(
        grid: SpaceTimeGrid,
        cost: CostModel,
        rho0_cells: Vec<f64>,
        v_term: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self, SystemError> {
        if rho0_cells.len() != grid.num_cells() {
            return Err(SystemError::LevelLength { expected: grid.num_cells(), found: rho0_cells.len() });
        }
        Self::build(grid, cost, DensityInit::CellsOnly, rho0_cells, Arc::new(v_term))
    }

    fn build(
        grid: SpaceTimeGrid,
        cost: CostModel,
        init: DensityInit,
        rho0_cells: Vec<f64>,
        v_term: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    ) -> Result<Self, SystemError> {
        for (j, &c) in rho0_cells.iter().enumerate() {
            if !c.is_finite() || c < 0.0 {
                return Err(SystemError::InvalidInitialDensity(format!("cell {j} average {c}")));
            }
        }
        let v_term_nodes: Vec<f64> = (0..grid.num_cells()).map(|j| v_term(grid.position(j))).collect();
        if let Some(j) = v_term_nodes.iter().position(|v| !v.is_finite()) {
            return Err(SystemError::InvalidTerminalCost { j });
        }
        Ok(Self { grid, cost, init, rho0_cells, v_term, v_term_nodes })
    }

    /// Same grid, cost, and terminal condition with the initial cell averages
    /// replaced. The result only knows the new averages (it cannot be
    /// re-gridded); used for families of auxiliary problems such as
    /// continuation stages.
    pub fn with_rho0_cells(&self, rho0_cells: Vec<f64>) -> Result<Self, SystemError> {
        if rho0_cells.len() != self.grid.num_cells() {
            return Err(SystemError::LevelLength { expected: self.grid.num_cells(), found: rho0_cells.len() });
        }
        Self::build(self.grid, self.cost.clone(), DensityInit::CellsOnly, rho0_cells, self.v_term.clone())
    }

    /// Same problem re-discretized on another grid. Requires the profile form
    /// of the initial density.
    pub fn on_grid(&self, grid: SpaceTimeGrid) -> Result<Self, SystemError> {
        match &self.init {
            DensityInit::Profile(f) => {
                let cells = profile_cells(&grid, f.as_ref())?;
                Self::build(grid, self.cost.clone(), DensityInit::Profile(f.clone()), cells, self.v_term.clone())
            }
            DensityInit::CellsOnly => Err(SystemError::InvalidInitialDensity(
                "initial density is only known as cell averages on the original grid".into(),
            )),
        }
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    pub fn cost(&self) -> &CostModel {
        &self.cost
    }

    pub fn rho0_cells(&self) -> &[f64] {
        &self.rho0_cells
    }

    pub fn terminal_nodes(&self) -> &[f64] {
        &self.v_term_nodes
    }

    pub fn terminal_cost(&self, x: f64) -> f64 {
        (self.v_term)(x)
    }

    pub fn layout(&self) -> SystemLayout {
        SystemLayout::new(&self.grid)
    }

    pub fn check_cfl(&self) -> CflReport {
        let ratio = self.cost.u_max() * self.grid.dt() / self.grid.dx();
        CflReport { ratio, pass: ratio <= 1.0 + CFL_SLACK }
    }
}

fn profile_cells(grid: &SpaceTimeGrid, f: &(dyn Fn(f64) -> f64 + Send + Sync)) -> Result<Vec<f64>, SystemError> {
    let (nodes, weights) = gauss_legendre(INIT_QUADRATURE_POINTS);
    let dx = grid.dx();
    Ok((0..grid.num_cells())
        .map(|j| cell_average(f, j as f64 * dx, (j + 1) as f64 * dx, &nodes, &weights))
        .collect())
}

/// CFL diagnosis for `u_max dt <= dx`.
#[derive(Clone, Copy, Debug)]
pub struct CflReport {
    pub ratio: f64,
    pub pass: bool,
}

/// One Lax-Friedrichs update of a density level under a speed level.
/// The speed bound for the CFL refusal is taken from the data itself.
pub fn lf_step(rho: &[f64], u: &[f64], grid: &SpaceTimeGrid) -> Result<Vec<f64>, SystemError> {
    let nx = grid.num_cells();
    if rho.len() != nx {
        return Err(SystemError::LevelLength { expected: nx, found: rho.len() });
    }
    if u.len() != nx {
        return Err(SystemError::LevelLength { expected: nx, found: u.len() });
    }
    let speed = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (dt, dx) = (grid.dt(), grid.dx());
    if speed * dt > dx * (1.0 + CFL_SLACK) {
        return Err(SystemError::CflViolated { speed, dt, dx });
    }
    let lam = dt / (2.0 * dx);
    Ok((0..nx).map(|j| lf_next_cell(rho, u, lam, j, nx)).collect())
}

/// The raw stencil shared by `lf_step` and the residual assembly; keeping the
/// arithmetic identical makes an exactly-stepped trajectory an exact zero of
/// the continuity rows.
#[inline]
fn lf_next_cell(rho: &[f64], u: &[f64], lam: f64, j: usize, nx: usize) -> f64 {
    let jm = (j + nx - 1) % nx;
    let jp = (j + 1) % nx;
    0.5 * (rho[jm] + rho[jp]) - lam * (rho[jp] * u[jp] - rho[jm] * u[jm])
}

/// One backward value update on a frozen density level. Returns the value
/// level at `n` and the speed level at `n` implied by the costate.
pub fn hjb_backstep(
    v_next: &[f64],
    rho: &[f64],
    cost: &CostModel,
    grid: &SpaceTimeGrid,
) -> Result<(Vec<f64>, Vec<f64>), SystemError> {
    let nx = grid.num_cells();
    if v_next.len() != nx {
        return Err(SystemError::LevelLength { expected: nx, found: v_next.len() });
    }
    if rho.len() != nx {
        return Err(SystemError::LevelLength { expected: nx, found: rho.len() });
    }
    let (dt, dx) = (grid.dt(), grid.dx());
    let mut v = vec![0.0; nx];
    let mut u = vec![0.0; nx];
    for j in 0..nx {
        let jm = (j + nx - 1) % nx;
        let p = (v_next[j] - v_next[jm]) / dx;
        v[j] = v_next[j] + dt * cost.hamiltonian(p, rho[j]);
        u[j] = cost.optimal_speed(p, rho[j]);
    }
    Ok((v, u))
}

/// Index bookkeeping for the stacked unknown vector and residual.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SystemLayout {
    nx: usize,
    nt: usize,
}

/// Which variable a flat column index refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarKind {
    Density,
    Speed,
    Value,
}

impl SystemLayout {
    pub fn new(grid: &SpaceTimeGrid) -> Self {
        Self { nx: grid.num_cells(), nt: grid.num_steps() }
    }

    pub fn from_dims(nx: usize, nt: usize) -> Self {
        Self { nx, nt }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn unknown_count(&self) -> usize {
        (3 * self.nt + 2) * self.nx
    }

    // Unknown indices. Density levels 0..=Nt, speed levels 0..Nt, value
    // levels 0..=Nt, each contiguous in j.
    pub fn rho(&self, n: usize, j: usize) -> usize {
        debug_assert!(n <= self.nt && j < self.nx);
        n * self.nx + j
    }

    pub fn speed(&self, n: usize, j: usize) -> usize {
        debug_assert!(n < self.nt && j < self.nx);
        (self.nt + 1) * self.nx + n * self.nx + j
    }

    pub fn value(&self, n: usize, j: usize) -> usize {
        debug_assert!(n <= self.nt && j < self.nx);
        (2 * self.nt + 1) * self.nx + n * self.nx + j
    }

    pub fn rho_level(&self, n: usize) -> Range<usize> {
        self.rho(n, 0)..self.rho(n, 0) + self.nx
    }

    pub fn speed_level(&self, n: usize) -> Range<usize> {
        self.speed(n, 0)..self.speed(n, 0) + self.nx
    }

    pub fn value_level(&self, n: usize) -> Range<usize> {
        self.value(n, 0)..self.value(n, 0) + self.nx
    }

    /// Decomposes a column index into (kind, level, cell).
    pub fn classify(&self, col: usize) -> (VarKind, usize, usize) {
        let nx = self.nx;
        let rho_end = (self.nt + 1) * nx;
        let speed_end = rho_end + self.nt * nx;
        if col < rho_end {
            (VarKind::Density, col / nx, col % nx)
        } else if col < speed_end {
            let c = col - rho_end;
            (VarKind::Speed, c / nx, c % nx)
        } else {
            let c = col - speed_end;
            debug_assert!(c < (self.nt + 1) * nx);
            (VarKind::Value, c / nx, c % nx)
        }
    }

    // Residual rows: initial, continuity, speed definition, value update,
    // terminal, in that order.
    pub fn row_init(&self, j: usize) -> usize {
        j
    }

    pub fn row_continuity(&self, n: usize, j: usize) -> usize {
        self.nx + n * self.nx + j
    }

    pub fn row_speed(&self, n: usize, j: usize) -> usize {
        (self.nt + 1) * self.nx + n * self.nx + j
    }

    pub fn row_hjb(&self, n: usize, j: usize) -> usize {
        (2 * self.nt + 1) * self.nx + n * self.nx + j
    }

    pub fn row_terminal(&self, j: usize) -> usize {
        (3 * self.nt + 1) * self.nx + j
    }
}

/// The stacked unknown vector. `pack`/`unpack` convert to and from field
/// form; the round trip is lossless (the derived top speed level is not
/// stored here).
#[derive(Clone, Debug)]
pub struct UnknownVector {
    layout: SystemLayout,
    pub data: Vec<f64>,
}

impl UnknownVector {
    pub fn zeros(layout: SystemLayout) -> Self {
        Self { layout, data: vec![0.0; layout.unknown_count()] }
    }

    pub fn layout(&self) -> SystemLayout {
        self.layout
    }

    pub fn pack(triple: &SolutionTriple) -> Self {
        let grid = *triple.grid();
        let layout = SystemLayout::new(&grid);
        let mut w = Self::zeros(layout);
        for n in 0..=layout.nt {
            w.data[layout.rho_level(n)].copy_from_slice(triple.density.level(n));
            w.data[layout.value_level(n)].copy_from_slice(triple.value.level(n));
        }
        for n in 0..layout.nt {
            w.data[layout.speed_level(n)].copy_from_slice(triple.speed.level(n));
        }
        w
    }

    /// Rebuilds the three fields. The top speed level is not an unknown; it
    /// is derived from the terminal value level through the costate closure
    /// `u_j = f*_p((V_j - V_{j-1})/dx, rho_j)` and flagged as such.
    pub fn unpack(&self, grid: &SpaceTimeGrid, cost: &CostModel) -> Result<SolutionTriple, SystemError> {
        let layout = SystemLayout::new(grid);
        if layout != self.layout {
            return Err(SystemError::LayoutMismatch {
                expected: (layout.nx, layout.nt),
                found: (self.layout.nx, self.layout.nt),
            });
        }
        let (nx, nt) = (layout.nx, layout.nt);
        let mut density = ScalarField::constant(*grid, 0.0);
        let mut speed = ScalarField::constant(*grid, 0.0);
        let mut value = ScalarField::constant(*grid, 0.0);
        for n in 0..=nt {
            density.level_mut(n).copy_from_slice(&self.data[layout.rho_level(n)]);
            value.level_mut(n).copy_from_slice(&self.data[layout.value_level(n)]);
        }
        for n in 0..nt {
            speed.level_mut(n).copy_from_slice(&self.data[layout.speed_level(n)]);
        }
        let dx = grid.dx();
        for j in 0..nx {
            let jm = (j + nx - 1) % nx;
            let p = (value.value(nt, j) - value.value(nt, jm)) / dx;
            let u = cost.optimal_speed(p, density.value(nt, j));
            speed.set_value(nt, j, u);
        }
        speed.mark_final_level_derived();
        Ok(SolutionTriple { density, speed, value })
    }
}

fn check_layout(w: &UnknownVector, spec: &ProblemSpec) -> Result<SystemLayout, SystemError> {
    let layout = spec.layout();
    if layout != w.layout() {
        return Err(SystemError::LayoutMismatch {
            expected: (layout.nx, layout.nt),
            found: (w.layout().nx, w.layout().nt),
        });
    }
    Ok(layout)
}

/// Full nonlinear residual `F(w)`; a mean-field equilibrium is `F(w) = 0`.
pub fn assemble_residual(w: &UnknownVector, spec: &ProblemSpec) -> Result<Vec<f64>, SystemError> {
    let l = check_layout(w, spec)?;
    let (nx, nt) = (l.nx(), l.nt());
    let grid = spec.grid();
    let (dt, dx) = (grid.dt(), grid.dx());
    let lam = dt / (2.0 * dx);
    let cost = spec.cost();
    let mut f = vec![0.0; l.unknown_count()];

    for j in 0..nx {
        f[l.row_init(j)] = w.data[l.rho(0, j)] - spec.rho0_cells()[j];
    }
    for n in 0..nt {
        let rho_n = &w.data[l.rho_level(n)];
        let u_n = &w.data[l.speed_level(n)];
        for j in 0..nx {
            f[l.row_continuity(n, j)] = w.data[l.rho(n + 1, j)] - lf_next_cell(rho_n, u_n, lam, j, nx);
        }
    }
    for n in 0..nt {
        for j in 0..nx {
            let jm = (j + nx - 1) % nx;
            let v_next_j = w.data[l.value(n + 1, j)];
            let p = (v_next_j - w.data[l.value(n + 1, jm)]) / dx;
            let rho = w.data[l.rho(n, j)];
            f[l.row_speed(n, j)] = w.data[l.speed(n, j)] - cost.optimal_speed(p, rho);
            f[l.row_hjb(n, j)] = (v_next_j - w.data[l.value(n, j)]) / dt + cost.hamiltonian(p, rho);
        }
    }
    for j in 0..nx {
        f[l.row_terminal(j)] = w.data[l.value(nt, j)] - spec.terminal_nodes()[j];
    }
    Ok(f)
}

/// The Jacobian of [`assemble_residual`] in CSR form, with the layout kept
/// alongside so downstream code can reason about blocks.
#[derive(Clone, Debug)]
pub struct SparseJacobian {
    matrix: CsrMatrix,
    layout: SystemLayout,
}

impl SparseJacobian {
    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn layout(&self) -> SystemLayout {
        self.layout
    }

    pub fn from_parts(matrix: CsrMatrix, layout: SystemLayout) -> Self {
        Self { matrix, layout }
    }
}

/// Analytic Jacobian. Optimal-speed kinks use the clamped-side convention
/// (derivative 0 at and beyond the clamp), matching the cost model.
pub fn assemble_jacobian(w: &UnknownVector, spec: &ProblemSpec) -> Result<SparseJacobian, SystemError> {
    let l = check_layout(w, spec)?;
    let (nx, nt) = (l.nx(), l.nt());
    let grid = spec.grid();
    let (dt, dx) = (grid.dt(), grid.dx());
    let lam = dt / (2.0 * dx);
    let cost = spec.cost();
    let n_unknowns = l.unknown_count();
    let mut t = Triplets::with_capacity(n_unknowns, n_unknowns, 2 * nx + 13 * nt * nx);

    for j in 0..nx {
        t.push(l.row_init(j), l.rho(0, j), 1.0);
    }
    for n in 0..nt {
        for j in 0..nx {
            let jm = (j + nx - 1) % nx;
            let jp = (j + 1) % nx;
            let row = l.row_continuity(n, j);
            t.push(row, l.rho(n + 1, j), 1.0);
            t.push(row, l.rho(n, jm), -0.5 - lam * w.data[l.speed(n, jm)]);
            t.push(row, l.rho(n, jp), -0.5 + lam * w.data[l.speed(n, jp)]);
            t.push(row, l.speed(n, jm), -lam * w.data[l.rho(n, jm)]);
            t.push(row, l.speed(n, jp), lam * w.data[l.rho(n, jp)]);
        }
    }
    for n in 0..nt {
        for j in 0..nx {
            let jm = (j + nx - 1) % nx;
            let p = (w.data[l.value(n + 1, j)] - w.data[l.value(n + 1, jm)]) / dx;
            let rho = w.data[l.rho(n, j)];

            let row = l.row_speed(n, j);
            let du_dp = cost.speed_costate_slope(p, rho);
            t.push(row, l.speed(n, j), 1.0);
            t.push(row, l.value(n + 1, j), -du_dp / dx);
            t.push(row, l.value(n + 1, jm), du_dp / dx);
            t.push(row, l.rho(n, j), -cost.speed_density_slope(p, rho));

            let row = l.row_hjb(n, j);
            let alpha = cost.optimal_speed(p, rho);
            t.push(row, l.value(n, j), -1.0 / dt);
            t.push(row, l.value(n + 1, j), 1.0 / dt + alpha / dx);
            t.push(row, l.value(n + 1, jm), -alpha / dx);
            t.push(row, l.rho(n, j), cost.hamiltonian_density_slope(p, rho));
        }
    }
    for j in 0..nx {
        t.push(l.row_terminal(j), l.value(nt, j), 1.0);
    }
    Ok(SparseJacobian { matrix: t.into_csr(), layout: l })
}

/// Debug dump of a residual vector grouped by block, as `block,index,value`.
pub fn write_residual_blocks_csv<W: Write>(f: &[f64], layout: &SystemLayout, w: &mut W) -> io::Result<()> {
    writeln!(w, "block,index,value")?;
    let (nx, nt) = (layout.nx(), layout.nt());
    let blocks: [(&str, usize, usize); 5] = [
        ("initial", 0, nx),
        ("continuity", nx, nt * nx),
        ("speed", (nt + 1) * nx, nt * nx),
        ("hjb", (2 * nt + 1) * nx, nt * nx),
        ("terminal", (3 * nt + 1) * nx, nx),
    ];
    for (name, start, len) in blocks {
        for k in 0..len {
            writeln!(w, "{name},{k},{:.12e}", f[start + k])?;
        }
    }
    Ok(())
}
