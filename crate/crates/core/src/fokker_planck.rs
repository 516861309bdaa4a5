//! Finite-volume solvers for the density of the dry state (`rho0`, on `q < b`)
//! and the rain state (`rho1`, on `q > 0`), and for the single density of the
//! spike-train limit.
//!
//! The grid is uniform with both `0` and `b` on cell faces. Fluxes use the
//! exponentially fitted (Scharfetter–Gummel) form
//! `J = (kappa/dq) [B(-P) rho_j - B(P) rho_{j+1}]`, `P = v dq / kappa`,
//! `kappa = D^2/2`, `B(x) = x / (e^x - 1)`; absorbing faces use the same form
//! over half a cell with a zero value on the face. Time stepping is backward
//! Euler. The flux leaving `rho0` at `b` enters `rho1` in the two cells next
//! to `b`, and the flux leaving `rho1` at `0` enters `rho0` in the two cells
//! next to `0`. Both transfers are solved together with the implicit step, so
//! the discrete mass is conserved up to rounding.

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Cells next to each end of the domain used for the truncation monitor.
pub const EDGE_CELLS: usize = 5;
/// Largest tolerated mass in the [`EDGE_CELLS`] outermost cells.
pub const EDGE_MASS_TOL: f64 = 1e-8;
/// Largest tolerated change of total mass in one step.
pub const STEP_MASS_TOL: f64 = 1e-8;
/// Densities below this are treated as a sign error.
pub const NEGATIVE_FLOOR: f64 = -1e-12;

/// Uniform finite-volume grid with a time step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub q_min: f64,
    pub q_max: f64,
    pub dq: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    n: usize,
    /// First cell above 0.
    i0: usize,
    /// First cell above b.
    ib: usize,
}

fn face_index(q: f64, q_min: f64, dq: f64, what: &str) -> Result<usize> {
    let x = (q - q_min) / dq;
    let k = x.round();
    if (x - k).abs() > 1e-6 || k < 0.0 {
        return Err(Error::Grid(format!("{what} = {q} is not on a cell face (q_min = {q_min}, dq = {dq})")));
    }
    Ok(k as usize)
}

impl GridSpec {
    pub fn new(q_min: f64, q_max: f64, dq: f64, dt: f64) -> Result<Self> {
        let vals = [q_min, q_max, dq, dt];
        if vals.iter().any(|v| !v.is_finite()) || !(dq > 0.0) || !(dt > 0.0) || !(q_min < q_max) {
            return Err(Error::Grid(format!(
                "need finite q_min < q_max and dq, dt > 0 (got {q_min}, {q_max}, {dq}, {dt})"
            )));
        }
        Ok(Self { q_min, q_max, dq, dt })
    }

    /// Default grid for the two-density system: `dq = b/K` with
    /// `dq ≤ min(b/200, eps D1^2 / (10 r))`, lower edge 20 stationary decay
    /// lengths `D0^2/(2m)` below 0, upper edge 20 layer widths above `b`.
    pub fn coupled_default(p: &ModelParams) -> Result<Self> {
        let p = p.validate()?;
        let layer = p.epsilon * p.d1 * p.d1 / (2.0 * p.r);
        let dq = snap_dq(p.b, (p.b / 200.0).min(0.2 * layer));
        let q_min = -snap_up(20.0 * p.d0 * p.d0 / (2.0 * p.m), dq);
        let q_max = p.b + snap_up(20.0 * layer, dq);
        Self::new(q_min, q_max, dq, default_dt(&p))
    }

    /// Default grid for the limit density: as above with `q_max = b` and
    /// `dq = b/400`.
    pub fn limit_default(p: &ModelParams) -> Result<Self> {
        let p = p.validate()?;
        let dq = p.b / 400.0;
        let q_min = -snap_up(20.0 * p.d0 * p.d0 / (2.0 * p.m), dq);
        Self::new(q_min, p.b, dq, default_dt(&p))
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    fn layout(&self, b: f64) -> Result<Layout> {
        if !(self.q_min < 0.0) || !(self.q_max >= b) {
            return Err(Error::Grid(format!(
                "domain [{}, {}] must contain [0, {b}] with q_min < 0",
                self.q_min, self.q_max
            )));
        }
        let n = face_index(self.q_max, self.q_min, self.dq, "q_max")?;
        let i0 = face_index(0.0, self.q_min, self.dq, "0")?;
        let ib = face_index(b, self.q_min, self.dq, "b")?;
        if ib < i0 + 2 {
            return Err(Error::Grid("need at least two cells between 0 and b".into()));
        }
        Ok(Layout { n, i0, ib })
    }

    pub fn n_cells(&self) -> usize {
        ((self.q_max - self.q_min) / self.dq).round() as usize
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells()).map(|j| self.q_min + (j as f64 + 0.5) * self.dq).collect()
    }
}

fn snap_dq(b: f64, target: f64) -> f64 {
    b / (b / target).ceil()
}

fn snap_up(x: f64, dq: f64) -> f64 {
    (x / dq).ceil() * dq
}

fn default_dt(p: &ModelParams) -> f64 {
    2e-3 * (p.b / p.m).min(p.b * p.b / (p.d0 * p.d0))
}

/// Snapshot of both densities on a grid. Cells outside a density's support
/// hold zeros: `rho0` vanishes above `b`, `rho1` below 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub grid: GridSpec,
    pub rho0: Vec<f64>,
    pub rho1: Vec<f64>,
    pub t: f64,
}

impl DensityField {
    pub fn zeros(grid: GridSpec) -> Self {
        let n = grid.n_cells();
        Self {
            grid,
            rho0: vec![0.0; n],
            rho1: vec![0.0; n],
            t: 0.0,
        }
    }

    /// Gaussian bump in `rho0` (cells below `b` only), normalized so the
    /// discrete mass is exactly 1.
    pub fn gaussian(grid: GridSpec, b: f64, center: f64, width: f64) -> Result<Self> {
        let lay = grid.layout(b)?;
        let mut f = Self::zeros(grid);
        let centers = grid.centers();
        for j in 0..lay.ib {
            let z = (centers[j] - center) / width;
            f.rho0[j] = (-0.5 * z * z).exp();
        }
        let mass = f.mass();
        if !(mass > 0.0) {
            return Err(Error::Grid("initial Gaussian has no mass on the grid".into()));
        }
        f.rho0.iter_mut().for_each(|v| *v /= mass);
        Ok(f)
    }

    /// Gaussian at `q0` with width `b/20`, all in the dry state.
    pub fn default_initial(p: &ModelParams, grid: GridSpec) -> Result<Self> {
        Self::gaussian(grid, p.b, p.q0, p.b / 20.0)
    }

    pub fn centers(&self) -> Vec<f64> {
        self.grid.centers()
    }

    pub fn mass0(&self) -> f64 {
        self.rho0.iter().sum::<f64>() * self.grid.dq
    }

    pub fn mass1(&self) -> f64 {
        self.rho1.iter().sum::<f64>() * self.grid.dq
    }

    pub fn mass(&self) -> f64 {
        self.mass0() + self.mass1()
    }

    /// `rho0 + rho1` per cell.
    pub fn total(&self) -> Vec<f64> {
        self.rho0.iter().zip(&self.rho1).map(|(a, b)| a + b).collect()
    }

    /// Masses held in the [`EDGE_CELLS`] outermost cells at the lower and
    /// upper end of the grid.
    pub fn edge_masses(&self) -> (f64, f64) {
        let tot = self.total();
        let k = EDGE_CELLS.min(tot.len());
        let lo: f64 = tot[..k].iter().sum();
        let hi: f64 = tot[tot.len() - k..].iter().sum();
        (lo * self.grid.dq, hi * self.grid.dq)
    }

    fn check_signs(&self) -> Result<()> {
        for (cell, &v) in self.rho0.iter().chain(&self.rho1).enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    step: 0,
                    time: self.t,
                    what: "density",
                });
            }
            if v < NEGATIVE_FLOOR {
                return Err(Error::Negative {
                    cell: cell % self.rho0.len(),
                    time: self.t,
                    value: v,
                });
            }
        }
        Ok(())
    }
}

/// Boundary fluxes: out of `rho0` through `b` and out of `rho1` through 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluxPair {
    pub f0_at_b: f64,
    pub f1_at_0: f64,
}

/// Output of a time-dependent run.
#[derive(Debug, Clone, PartialEq)]
pub struct FpTrajectory {
    pub snapshots: Vec<DensityField>,
    pub fluxes: Vec<FluxPair>,
}

impl FpTrajectory {
    pub fn last(&self) -> &DensityField {
        self.snapshots.last().expect("trajectory holds the initial state")
    }
}

fn bernoulli(x: f64) -> f64 {
    if x.abs() < 1e-10 {
        1.0 - 0.5 * x
    } else {
        x / x.exp_m1()
    }
}

/// Factored tridiagonal matrix (Thomas algorithm, no pivoting; the matrices
/// here are column diagonally dominant M-matrices).
#[derive(Debug, Clone)]
struct Tridiag {
    lower: Vec<f64>,
    upper_mod: Vec<f64>,
    denom: Vec<f64>,
}

impl Tridiag {
    fn factor(lower: Vec<f64>, diag: &[f64], upper: &[f64]) -> Self {
        let n = diag.len();
        let mut upper_mod = vec![0.0; n];
        let mut denom = vec![0.0; n];
        denom[0] = diag[0];
        upper_mod[0] = upper[0] / denom[0];
        for i in 1..n {
            denom[i] = diag[i] - lower[i] * upper_mod[i - 1];
            upper_mod[i] = if i + 1 < n { upper[i] / denom[i] } else { 0.0 };
        }
        Self {
            lower,
            upper_mod,
            denom,
        }
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = rhs.len();
        let mut x = vec![0.0; n];
        x[0] = rhs[0] / self.denom[0];
        for i in 1..n {
            x[i] = (rhs[i] - self.lower[i] * x[i - 1]) / self.denom[i];
        }
        for i in (0..n - 1).rev() {
            x[i] -= self.upper_mod[i] * x[i + 1];
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Absorbing {
    Left,
    Right,
}

/// Backward-Euler operator `I + dt L` for one density on `n` cells with
/// constant drift `v` and diffusivity `kappa`, zero flux at the free end and
/// an absorbing face at the other. Returns the factored matrix and the
/// coefficient turning the boundary-cell value into the absorbed flux.
fn implicit_operator(n: usize, v: f64, kappa: f64, dq: f64, dt: f64, absorbing: Absorbing) -> (Tridiag, f64) {
    let g = kappa / dq;
    let pe = v * dq / kappa;
    let (bm, bp) = (bernoulli(-pe), bernoulli(pe));
    let mut lower = vec![0.0; n];
    let mut diag = vec![1.0; n];
    let mut upper = vec![0.0; n];
    let s = dt / dq;
    for j in 0..n - 1 {
        diag[j] += s * g * bm;
        upper[j] -= s * g * bp;
        lower[j + 1] -= s * g * bm;
        diag[j + 1] += s * g * bp;
    }
    let coeff = match absorbing {
        Absorbing::Right => 2.0 * g * bernoulli(-0.5 * pe),
        Absorbing::Left => 2.0 * g * bernoulli(0.5 * pe),
    };
    let edge = if absorbing == Absorbing::Right { n - 1 } else { 0 };
    diag[edge] += s * coeff;
    (Tridiag::factor(lower, &diag, &upper), coeff)
}

/// Response of a field to a unit flux injected half into each of local cells
/// `k - 1` and `k` over one step.
fn injection_response(op: &Tridiag, n: usize, k: usize, dq: f64, dt: f64) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[k - 1] = 0.5 * dt / dq;
    e[k] = 0.5 * dt / dq;
    op.solve(&e)
}

fn mass_check(before: f64, after: f64, t: f64) -> Result<()> {
    if !after.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            time: t,
            what: "mass",
        });
    }
    if (after - before).abs() > STEP_MASS_TOL {
        return Err(Error::MassDrift {
            time: t,
            mass: after,
            step_change: after - before,
        });
    }
    Ok(())
}

/// `upper_free`: whether the upper grid end is a truncation edge (it is the
/// absorbing face itself for the limit density).
fn check_edges(f: &DensityField, upper_free: bool) -> Result<()> {
    let (lo, hi) = f.edge_masses();
    let e = if upper_free { lo.max(hi) } else { lo };
    if e > EDGE_MASS_TOL {
        return Err(Error::Grid(format!(
            "truncation: mass {e:.3e} in the outermost {EDGE_CELLS} cells at t = {} exceeds {EDGE_MASS_TOL:e}",
            f.t
        )));
    }
    Ok(())
}

fn check_initial(initial: &DensityField, grid: &GridSpec) -> Result<()> {
    if (initial.grid.q_min, initial.grid.q_max, initial.grid.dq) != (grid.q_min, grid.q_max, grid.dq) {
        return Err(Error::Grid("initial field lives on a different grid".into()));
    }
    if (initial.mass() - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(format!("initial mass {} is not 1", initial.mass())));
    }
    initial.check_signs()
}

/// Stepper for the two-density system.
struct CoupledStepper {
    lay: Layout,
    op0: Tridiag,
    op1: Tridiag,
    alpha: f64,
    beta: f64,
    y0: Vec<f64>,
    y1: Vec<f64>,
}

impl CoupledStepper {
    fn new(p: &ModelParams, grid: &GridSpec) -> Result<Self> {
        let lay = grid.layout(p.b)?;
        if lay.n <= lay.ib + 1 {
            return Err(Error::Grid("need at least two cells above b for the rain density".into()));
        }
        let (dq, dt) = (grid.dq, grid.dt);
        let n0 = lay.ib;
        let n1 = lay.n - lay.i0;
        let (op0, alpha) = implicit_operator(n0, p.m, 0.5 * p.d0 * p.d0, dq, dt, Absorbing::Right);
        let (op1, beta) = implicit_operator(n1, -p.rain_rate(), 0.5 * p.d1 * p.d1, dq, dt, Absorbing::Left);
        let y0 = injection_response(&op0, n0, lay.i0, dq, dt);
        let y1 = injection_response(&op1, n1, lay.ib - lay.i0, dq, dt);
        Ok(Self {
            lay,
            op0,
            op1,
            alpha,
            beta,
            y0,
            y1,
        })
    }

    fn fluxes(&self, f: &DensityField) -> FluxPair {
        FluxPair {
            f0_at_b: self.alpha * f.rho0[self.lay.ib - 1],
            f1_at_0: self.beta * f.rho1[self.lay.i0],
        }
    }

    fn step(&self, f: &mut DensityField, dt: f64) -> FluxPair {
        let Layout { i0, ib, .. } = self.lay;
        let z0 = self.op0.solve(&f.rho0[..ib]);
        let z1 = self.op1.solve(&f.rho1[i0..]);
        let (zl, yl) = (z0[ib - 1], self.y0[ib - 1]);
        let (zf, yf) = (z1[0], self.y1[0]);
        let (al, be) = (self.alpha, self.beta);
        // a: flux into b (feeds rho1), c: flux into 0 (feeds rho0)
        let a = (al * zl + al * be * yl * zf) / (1.0 - al * be * yl * yf);
        let c = be * (zf + a * yf);
        for (j, v) in f.rho0[..ib].iter_mut().enumerate() {
            *v = z0[j] + c * self.y0[j];
        }
        for (j, v) in f.rho1[i0..].iter_mut().enumerate() {
            *v = z1[j] + a * self.y1[j];
        }
        f.t += dt;
        FluxPair {
            f0_at_b: a,
            f1_at_0: c,
        }
    }
}

/// Evolves `(rho0, rho1)` from `initial` to `t_end`, keeping every
/// `output_every`-th state (the initial and final states are always kept).
pub fn solve_coupled_fp(
    params: &ModelParams,
    grid: &GridSpec,
    t_end: f64,
    initial: &DensityField,
    output_every: usize,
) -> Result<FpTrajectory> {
    let p = params.validate()?;
    let layer = p.epsilon * p.d1 * p.d1 / p.r;
    if grid.dq > 0.1 * layer * (1.0 + 1e-9) {
        return Err(Error::Grid(format!(
            "dq = {} does not resolve the boundary layer (need dq ≤ eps D1^2/(10 r) = {})",
            grid.dq,
            0.1 * layer
        )));
    }
    check_initial(initial, grid)?;
    let stepper = CoupledStepper::new(&p, grid)?;
    run(initial, true, grid, t_end, output_every, stepper.fluxes(initial), |f, dt| {
        Ok(stepper.step(f, dt))
    })
}

/// Marches the coupled system until the L1 change per unit time falls below
/// `tol`, or fails once `max_time` is reached.
pub fn solve_coupled_stationary(
    params: &ModelParams,
    grid: &GridSpec,
    initial: &DensityField,
    tol: f64,
    max_time: f64,
) -> Result<(DensityField, FluxPair)> {
    let p = params.validate()?;
    check_initial(initial, grid)?;
    let stepper = CoupledStepper::new(&p, grid)?;
    stationary(initial, true, grid, tol, max_time, |f, dt| Ok(stepper.step(f, dt)))
}

fn run(
    initial: &DensityField,
    upper_free: bool,
    grid: &GridSpec,
    t_end: f64,
    output_every: usize,
    flux0: FluxPair,
    mut step: impl FnMut(&mut DensityField, f64) -> Result<FluxPair>,
) -> Result<FpTrajectory> {
    if !(t_end > initial.t) {
        return Err(Error::Domain(format!("t_end = {t_end} must exceed the initial time {}", initial.t)));
    }
    let every = output_every.max(1);
    let n_steps = ((t_end - initial.t) / grid.dt).ceil() as usize;
    let dt = (t_end - initial.t) / n_steps as f64;
    let mut f = initial.clone();
    f.grid.dt = dt;
    let mut out = FpTrajectory {
        snapshots: vec![f.clone()],
        fluxes: vec![flux0],
    };
    let mut mass = f.mass();
    for k in 1..=n_steps {
        let flux = step(&mut f, dt)?;
        let m = f.mass();
        mass_check(mass, m, f.t).map_err(|e| with_step(e, k))?;
        mass = m;
        if k % every == 0 || k == n_steps {
            f.check_signs()?;
            check_edges(&f, upper_free)?;
            out.snapshots.push(f.clone());
            out.fluxes.push(flux);
        }
    }
    Ok(out)
}

fn with_step(e: Error, k: usize) -> Error {
    match e {
        Error::NonFinite { time, what, .. } => Error::NonFinite { step: k, time, what },
        other => other,
    }
}

fn stationary(
    initial: &DensityField,
    upper_free: bool,
    grid: &GridSpec,
    tol: f64,
    max_time: f64,
    mut step: impl FnMut(&mut DensityField, f64) -> Result<FluxPair>,
) -> Result<(DensityField, FluxPair)> {
    let dt = grid.dt;
    let mut f = initial.clone();
    let mut mass = f.mass();
    let mut k = 0;
    while f.t < max_time {
        let prev = f.clone();
        let flux = step(&mut f, dt)?;
        k += 1;
        let m = f.mass();
        mass_check(mass, m, f.t).map_err(|e| with_step(e, k))?;
        mass = m;
        let change: f64 = f
            .rho0
            .iter()
            .zip(&prev.rho0)
            .chain(f.rho1.iter().zip(&prev.rho1))
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * grid.dq
            / dt;
        if change < tol {
            f.check_signs()?;
            check_edges(&f, upper_free)?;
            return Ok((f, flux));
        }
    }
    Err(Error::Domain(format!(
        "no stationary state within t = {max_time} (tolerance {tol:e})"
    )))
}

fn check_limit_params(p: &ModelParams) -> Result<()> {
    if !(p.m >= 0.0) || !p.m.is_finite() {
        return Err(Error::InvalidParam("m ≥ 0 violated".into()));
    }
    if !(p.d0 > 0.0) || !p.d0.is_finite() {
        return Err(Error::InvalidParam("D0 > 0 violated".into()));
    }
    if !(p.b > 0.0) || !p.b.is_finite() {
        return Err(Error::InvalidParam("b > 0 violated".into()));
    }
    Ok(())
}

struct LimitStepper {
    ib: usize,
    op: Tridiag,
    alpha: f64,
    y: Vec<f64>,
}

impl LimitStepper {
    fn new(p: &ModelParams, grid: &GridSpec) -> Result<Self> {
        let lay = grid.layout(p.b)?;
        let (op, alpha) = implicit_operator(lay.ib, p.m, 0.5 * p.d0 * p.d0, grid.dq, grid.dt, Absorbing::Right);
        let y = injection_response(&op, lay.ib, lay.i0, grid.dq, grid.dt);
        Ok(Self { ib: lay.ib, op, alpha, y })
    }

    fn step(&self, f: &mut DensityField, dt: f64) -> FluxPair {
        let z = self.op.solve(&f.rho0[..self.ib]);
        let (zl, yl) = (z[self.ib - 1], self.y[self.ib - 1]);
        let a = self.alpha * zl / (1.0 - self.alpha * yl);
        for (j, v) in f.rho0[..self.ib].iter_mut().enumerate() {
            *v = z[j] + a * self.y[j];
        }
        f.t += dt;
        FluxPair {
            f0_at_b: a,
            f1_at_0: a,
        }
    }
}

fn check_limit_initial(initial: &DensityField, grid: &GridSpec, b: f64) -> Result<()> {
    check_initial(initial, grid)?;
    let ib = grid.layout(b)?.ib;
    if initial.rho1.iter().any(|&v| v != 0.0) || initial.rho0[ib..].iter().any(|&v| v != 0.0) {
        return Err(Error::Domain("limit density must be supported on (q_min, b) in rho0".into()));
    }
    Ok(())
}

/// Evolves the limit density: absorbing at `b`, with the absorbed flux
/// re-entering next to `q = 0` in the same step. Accepts `m = 0`.
pub fn solve_limit_fp(
    params: &ModelParams,
    grid: &GridSpec,
    t_end: f64,
    initial: &DensityField,
    output_every: usize,
) -> Result<FpTrajectory> {
    check_limit_params(params)?;
    check_limit_initial(initial, grid, params.b)?;
    let stepper = LimitStepper::new(params, grid)?;
    let ib = stepper.ib;
    let flux0 = FluxPair {
        f0_at_b: stepper.alpha * initial.rho0[ib - 1],
        f1_at_0: stepper.alpha * initial.rho0[ib - 1],
    };
    run(initial, false, grid, t_end, output_every, flux0, |f, dt| Ok(stepper.step(f, dt)))
}

/// Stationary limit density by time marching; see [`solve_coupled_stationary`].
pub fn solve_limit_stationary(
    params: &ModelParams,
    grid: &GridSpec,
    initial: &DensityField,
    tol: f64,
    max_time: f64,
) -> Result<(DensityField, FluxPair)> {
    check_limit_params(params)?;
    check_limit_initial(initial, grid, params.b)?;
    let stepper = LimitStepper::new(params, grid)?;
    stationary(initial, false, grid, tol, max_time, |f, dt| Ok(stepper.step(f, dt)))
}

/// First-order rain density inside `(0, b)` for small epsilon:
/// `(1/r) f0 (1 - exp(-2 r q / (D1^2 eps)))`, and zero above `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryLayerProfile {
    pub epsilon: f64,
    pub r: f64,
    pub d1: f64,
    pub b: f64,
    pub f0_at_b: f64,
}

impl BoundaryLayerProfile {
    /// Decay length `eps D1^2 / (2 r)` of the layer at `q = 0`.
    pub fn layer_width(&self) -> f64 {
        self.epsilon * self.d1 * self.d1 / (2.0 * self.r)
    }

    /// Value far from the layer, `f0 / r`.
    pub fn plateau(&self) -> f64 {
        self.f0_at_b / self.r
    }

    /// The first-order coefficient (density divided by epsilon).
    pub fn first_order(&self, q: f64) -> f64 {
        if q <= 0.0 || q > self.b {
            return 0.0;
        }
        self.plateau() * -(-q / self.layer_width()).exp_m1()
    }

    /// Approximate rain density `eps * first_order(q)`.
    pub fn density(&self, q: f64) -> f64 {
        self.epsilon * self.first_order(q)
    }

    /// Flux leaving the rain state at 0 to leading order; equals `f0_at_b`.
    pub fn f1_at_0(&self) -> f64 {
        self.f0_at_b
    }
}

pub fn boundary_layer_profile(params: &ModelParams, f0_at_b: f64) -> Result<BoundaryLayerProfile> {
    let p = params.validate()?;
    if !(f0_at_b >= 0.0) || !f0_at_b.is_finite() {
        return Err(Error::Domain(format!("boundary flux must be finite and ≥ 0 (got {f0_at_b})")));
    }
    let prof = BoundaryLayerProfile {
        epsilon: p.epsilon,
        r: p.r,
        d1: p.d1,
        b: p.b,
        f0_at_b,
    };
    if prof.layer_width() >= p.b / 10.0 {
        return Err(Error::InvalidParam(format!(
            "layer width eps D1^2/(2r) = {} must be below b/10 = {}",
            prof.layer_width(),
            p.b / 10.0
        )));
    }
    Ok(prof)
}

/// Long-run fraction of time spent raining and mean rain amount per unit
/// time, from the renewal-reward argument.
pub fn stationary_rain_fraction(params: &ModelParams) -> (f64, f64) {
    let ModelParams { m, r, epsilon, .. } = *params;
    let fraction = epsilon * m / (r + epsilon * m);
    (fraction, r * m / (r + epsilon * m))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Stationary limit density: `A e^{2mq/D0^2}` below 0 and
    /// `(1/b)(1 - e^{2m(q-b)/D0^2})` on (0, b), `A = (1 - e^{-2mb/D0^2})/b`.
    fn limit_stationary_exact(p: &ModelParams, q: f64) -> f64 {
        let k = 2.0 * p.m / (p.d0 * p.d0);
        if q < 0.0 {
            -(-k * p.b).exp_m1() / p.b * (k * q).exp()
        } else if q < p.b {
            -(k * (q - p.b)).exp_m1() / p.b
        } else {
            0.0
        }
    }

    #[test]
    fn exact_stationary_integrates_to_one() {
        let p = ModelParams::default();
        let v = crate::quad::integrate(|q| limit_stationary_exact(&p, q), -30.0, p.b, 1e-13);
        assert!((v - 1.0).abs() < 1e-10);
    }

    #[test]
    fn bernoulli_limits() {
        assert_eq!(bernoulli(0.0), 1.0);
        assert!((bernoulli(1e-3) - 1e-3 / (1e-3f64).exp_m1()).abs() < 1e-12);
        assert!((bernoulli(-50.0) - 50.0).abs() < 1e-12);
        assert!(bernoulli(800.0) >= 0.0 && bernoulli(800.0) < 1e-300);
        for x in [-3.0, -0.5, 0.2, 4.0] {
            assert!((bernoulli(-x) - bernoulli(x) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn thomas_solves() {
        let lower = vec![0.0, -1.0, -1.0, -1.0];
        let diag = [4.0, 4.0, 4.0, 4.0];
        let upper = [-1.0, -1.0, -1.0, 0.0];
        let t = Tridiag::factor(lower, &diag, &upper);
        let x = [1.0, 2.0, 3.0, 4.0];
        let rhs = [4.0 - 2.0, -1.0 + 8.0 - 3.0, -2.0 + 12.0 - 4.0, -3.0 + 16.0];
        for (a, b) in t.solve(&rhs).iter().zip(x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_layout_alignment() {
        let g = GridSpec::new(-1.0, 1.5, 0.01, 0.01).unwrap();
        let l = g.layout(1.0).unwrap();
        assert_eq!((l.n, l.i0, l.ib), (250, 100, 200));
        assert!(GridSpec::new(-1.003, 1.5, 0.01, 0.01).unwrap().layout(1.0).is_err());
        assert!(GridSpec::new(0.5, 1.5, 0.01, 0.01).unwrap().layout(1.0).is_err());
        assert!(GridSpec::new(1.0, 0.0, 0.01, 0.01).is_err());
        let d = GridSpec::coupled_default(&ModelParams::default()).unwrap();
        assert!(d.layout(1.0).is_ok());
        assert!(d.dq <= 0.1 * 0.1 + 1e-15);
    }

    #[test]
    fn coupled_requires_resolved_layer() {
        let p = ModelParams::default().with_epsilon(0.01);
        let g = GridSpec::new(-10.0, 1.2, 0.005, 0.01).unwrap();
        let init = DensityField::default_initial(&p, g).unwrap();
        assert!(matches!(solve_coupled_fp(&p, &g, 0.1, &init, 1), Err(Error::Grid(_))));
    }

    #[test]
    fn coupled_conserves_mass_and_sign() {
        let p = ModelParams::default();
        let g = GridSpec::coupled_default(&p).unwrap();
        let init = DensityField::default_initial(&p, g).unwrap();
        let traj = solve_coupled_fp(&p, &g, 3.0, &init, 50).unwrap();
        for s in &traj.snapshots {
            assert!((s.mass() - 1.0).abs() < 1e-10, "{}", s.mass());
            assert!(s.rho0.iter().chain(&s.rho1).all(|&v| v >= NEGATIVE_FLOOR));
            let lay = g.layout(p.b).unwrap();
            assert!(s.rho0[lay.ib..].iter().all(|&v| v == 0.0));
            assert!(s.rho1[..lay.i0].iter().all(|&v| v == 0.0));
        }
        assert!(traj.last().mass1() > 0.01);
        assert!(traj.fluxes.iter().all(|f| f.f0_at_b >= 0.0 && f.f1_at_0 >= 0.0));
    }

    #[test]
    fn no_coupling_when_nothing_reaches_b() {
        // m = 0 is outside the coupled model's domain; tiny drift and noise
        // with a short horizon play the same role
        let p = ModelParams {
            m: 1e-6,
            d0: 0.05,
            ..Default::default()
        };
        let g = GridSpec::new(-1.0, 1.05, 0.0025, 1e-3).unwrap();
        let init = DensityField::gaussian(g, p.b, 0.0, p.b / 20.0).unwrap();
        let traj = solve_coupled_fp(&p, &g, 0.2, &init, 10).unwrap();
        let last = traj.last();
        assert!(last.mass1() < 1e-12);
        assert!((last.mass0() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn coupled_stationary_matches_exact_solution() {
        // exact stationary state: f = 1/(b/m + b eps/r) on both boundaries,
        // rho1 = (eps f / r)(1 - exp(-2 r q/(eps D1^2))) on (0, b)
        let p = ModelParams::default().with_epsilon(0.05);
        let g = GridSpec::coupled_default(&p).unwrap().with_dt(0.02);
        let init = DensityField::default_initial(&p, g).unwrap();
        let (st, flux) = solve_coupled_stationary(&p, &g, &init, 1e-10, 200.0).unwrap();
        let f = 1.0 / (p.b / p.m + p.b * p.epsilon / p.r);
        assert!((flux.f0_at_b - f).abs() / f < 2e-3, "{} vs {f}", flux.f0_at_b);
        assert!((flux.f1_at_0 - f).abs() / f < 2e-3);
        let centers = st.centers();
        let layer = p.epsilon * p.d1 * p.d1 / (2.0 * p.r);
        for (j, &q) in centers.iter().enumerate() {
            if q > 0.0 && q < p.b - 2.0 * layer {
                let exact = p.epsilon * f / p.r * -(-q / layer).exp_m1();
                assert!((st.rho1[j] - exact).abs() < 2e-3 * p.epsilon * f / p.r + 1e-3 * exact, "q={q}");
            }
        }
        let mass1 = st.mass1();
        assert!((mass1 - p.epsilon * f * p.b / p.r).abs() / mass1 < 0.05);
    }

    #[test]
    fn limit_stationary_matches_closed_form() {
        let p = ModelParams::default();
        let g = GridSpec::limit_default(&p).unwrap().with_dt(0.02);
        let init = DensityField::gaussian(g, p.b, 0.0, p.b / 20.0).unwrap();
        let (st, flux) = solve_limit_stationary(&p, &g, &init, 1e-11, 200.0).unwrap();
        let l1: f64 = st
            .centers()
            .iter()
            .zip(&st.rho0)
            .map(|(&q, &v)| (v - limit_stationary_exact(&p, q)).abs() * g.dq)
            .sum();
        assert!(l1 < 1e-3, "{l1}");
        assert!((flux.f0_at_b - p.m / p.b).abs() < 1e-3);
    }

    #[test]
    fn limit_free_heat_kernel() {
        // no drift, mass far from both boundaries
        let p = ModelParams {
            m: 0.0,
            d0: 0.2,
            b: 1.0,
            ..Default::default()
        };
        let g = GridSpec::new(-4.0, 1.0, 0.005, 1e-3).unwrap();
        let (c, s0) = (-1.5, 0.1);
        let init = DensityField::gaussian(g, p.b, c, s0).unwrap();
        let t = 0.5;
        let traj = solve_limit_fp(&p, &g, t, &init, 1000).unwrap();
        let var = s0 * s0 + p.d0 * p.d0 * t;
        let l1: f64 = traj
            .last()
            .centers()
            .iter()
            .zip(&traj.last().rho0)
            .map(|(&q, &v)| {
                let exact = (-(q - c).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
                (v - exact).abs() * g.dq
            })
            .sum();
        assert!(l1 < 1e-3, "{l1}");
    }

    #[test]
    fn limit_rejects_mass_above_b() {
        let p = ModelParams::default();
        let g = GridSpec::new(-10.0, 1.5, 0.01, 0.01).unwrap();
        let init = DensityField::gaussian(g, p.b, 0.0, 0.1).unwrap();
        assert!(solve_limit_fp(&p, &g, 1.0, &init, 1).is_ok());
        let mut bad = init.clone();
        bad.rho1[120] = 1.0 / g.dq;
        bad.rho0.iter_mut().for_each(|v| *v = 0.0);
        assert!(solve_limit_fp(&p, &g, 1.0, &bad, 1).is_err());
    }

    #[test]
    fn truncation_monitor_fires() {
        let p = ModelParams::default();
        let g = GridSpec::new(-0.5, 1.0, 0.005, 0.01).unwrap();
        let init = DensityField::gaussian(g, p.b, 0.0, 0.05).unwrap();
        assert!(matches!(solve_limit_fp(&p, &g, 3.0, &init, 10), Err(Error::Grid(_))));
    }

    #[test]
    fn profile_values() {
        let p = ModelParams::default().with_epsilon(0.01);
        let prof = boundary_layer_profile(&p, 0.9).unwrap();
        assert_eq!(prof.first_order(0.0), 0.0);
        assert_eq!(prof.first_order(1.5), 0.0);
        assert!((prof.density(0.5) - 0.01 * 0.9).abs() < 1e-12);
        assert!((prof.first_order(prof.layer_width()) - 0.9 * (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        assert_eq!(prof.f1_at_0(), 0.9);
        assert!(boundary_layer_profile(&ModelParams::default().with_epsilon(0.5), 1.0).is_err());
        assert!(boundary_layer_profile(&p, -1.0).is_err());
    }

    #[test]
    fn rain_fraction_values() {
        let (f, rate) = stationary_rain_fraction(&ModelParams::default());
        assert!((f - 1.0 / 11.0).abs() < 1e-15);
        assert!((rate - 10.0 / 11.0).abs() < 1e-15);
        let (f, rate) = stationary_rain_fraction(&ModelParams::default().with_epsilon(1e-9));
        assert!(f < 1e-8 && (rate - 1.0).abs() < 1e-8);
        let big_r = ModelParams {
            r: 1e9,
            ..Default::default()
        };
        assert!((stationary_rain_fraction(&big_r).1 - 1.0).abs() < 1e-8);
    }
}
