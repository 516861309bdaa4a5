//! Path simulators.
//!
//! `simulate_d2` integrates the finite-rate model with Euler–Maruyama and
//! splits it into the evaporation part `E` (dry-state increments) and the
//! precipitation part `P` (rain-state increments). `simulate_limit` builds the
//! spike-train limit from `E(t) = q0 + m t + D0 W(t)`: a spike is emitted each
//! time `E` first reaches `k b`, and `q = E - b * (spikes so far)`, which makes
//! `q` teleport from `b` to 0. Both read the same Wiener increments, so a
//! [`CoupledPair`] is an exact pathwise coupling.
//!
//! Threshold crossings are located by linear interpolation inside the step.
//! The remainder of the step is then integrated in the new regime with the
//! matching share of the increment, so the regime switch happens at the
//! crossing time rather than at the next grid node.

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::path::{EventLog, PathRecord, RainEvent, RainSignal};
use crate::rng::{gaussian_increments, RngStream};

/// Uniform time grid on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimGrid {
    dt: f64,
    n_steps: usize,
    /// Brownian-bridge test for crossings missed between grid nodes.
    pub bridge_correction: bool,
}

impl SimGrid {
    /// Grid with `n = ceil(t_end / dt_max)` steps of equal length `t_end / n`.
    pub fn new(t_end: f64, dt_max: f64) -> Result<Self> {
        if !(t_end > 0.0 && dt_max > 0.0) || !t_end.is_finite() {
            return Err(Error::Grid(format!("need t_end > 0 and dt > 0, got {t_end}, {dt_max}")));
        }
        let n_steps = ((t_end / dt_max) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        Ok(Self {
            dt: t_end / n_steps as f64,
            n_steps,
            bridge_correction: false,
        })
    }

    /// Default step `1e-4 b^2 / max(D0, D1)^2`.
    pub fn default_for(p: &ModelParams) -> Result<Self> {
        Self::new(p.t_end, default_dt(p))
    }

    pub fn with_bridge_correction(mut self, on: bool) -> Self {
        self.bridge_correction = on;
        self
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn t_end(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    /// Same horizon with steps half as long.
    pub fn refined(&self) -> Self {
        Self {
            dt: 0.5 * self.dt,
            n_steps: 2 * self.n_steps,
            bridge_correction: self.bridge_correction,
        }
    }

    /// Checks `dt <= b^2 / (100 max(D0, D1)^2)` and that the grid spans `T`.
    pub fn validate_for(&self, p: &ModelParams) -> Result<()> {
        let d = p.max_noise();
        if d > 0.0 {
            let limit = p.b * p.b / (100.0 * d * d);
            if self.dt > limit * (1.0 + 1e-12) {
                return Err(Error::Grid(format!(
                    "dt = {} exceeds b^2/(100 max(D0,D1)^2) = {limit}",
                    self.dt
                )));
            }
        }
        if (self.t_end() - p.t_end).abs() > 1e-9 * p.t_end {
            return Err(Error::Grid(format!(
                "grid horizon {} does not match T = {}",
                self.t_end(),
                p.t_end
            )));
        }
        Ok(())
    }

    fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t_end()
        } else {
            k as f64 * self.dt
        }
    }
}

pub fn default_dt(p: &ModelParams) -> f64 {
    let d = p.max_noise();
    if d > 0.0 {
        1e-4 * p.b * p.b / (d * d)
    } else {
        1e-4 * p.b / p.m
    }
}

fn check_inputs(p: &ModelParams, grid: &SimGrid) -> Result<()> {
    p.validate_degenerate()?;
    grid.validate_for(p)
}

/// Bridge crossing probability for a step from `x0` to `x1`, both short of
/// `level`, with variance `var`.
fn bridge_probability(level: f64, x0: f64, x1: f64, var: f64) -> f64 {
    if var <= 0.0 {
        return 0.0;
    }
    (-2.0 * (level - x0) * (level - x1) / var).exp()
}

/// A regime switch of the finite-rate process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Switch {
    RainStart(f64),
    RainEnd(f64),
}

/// Step-by-step integrator for the finite-rate model.
///
/// Used directly when only a few functionals of the path are needed and the
/// full [`PathRecord`] would be wasteful.
#[derive(Debug, Clone)]
pub struct D2Stepper {
    m: f64,
    rate: f64,
    d0: f64,
    d1: f64,
    b: f64,
    dt: f64,
    bridge: bool,
    pub e: f64,
    pub p: f64,
    pub raining: bool,
    pub t: f64,
    step: usize,
}

impl D2Stepper {
    pub fn new(params: &ModelParams, grid: &SimGrid) -> Self {
        Self {
            m: params.m,
            rate: params.rain_rate(),
            d0: params.d0,
            d1: params.d1,
            b: params.b,
            dt: grid.dt,
            bridge: grid.bridge_correction,
            e: params.q0,
            p: 0.0,
            raining: false,
            t: 0.0,
            step: 0,
        }
    }

    pub fn q(&self) -> f64 {
        self.e + self.p
    }

    /// Advances one grid step with Wiener increment `dw`. `u` is the uniform
    /// used by the bridge test (ignored when the correction is off). Switches
    /// are reported through `on_switch` in time order.
    pub fn advance(&mut self, dw: f64, u: f64, mut on_switch: impl FnMut(Switch)) -> Result<()> {
        let t0 = self.t;
        let mut left = 1.0;
        let mut tau = t0;
        loop {
            let (drift, noise) = if self.raining {
                (-self.rate, self.d1)
            } else {
                (self.m, self.d0)
            };
            let dx = left * (drift * self.dt + noise * dw);
            let q = self.q();
            let q_new = q + dx;
            let level = if self.raining { 0.0 } else { self.b };
            let crossed = if self.raining { q_new <= level } else { q_new >= level };
            if !crossed {
                let bridged = self.bridge
                    && u < bridge_probability(level, q, q_new, noise * noise * left * self.dt);
                self.apply(dx);
                if bridged {
                    self.switch(t0 + self.dt, &mut on_switch);
                }
                break;
            }
            let theta = if dx != 0.0 { ((level - q) / dx).clamp(0.0, 1.0) } else { 1.0 };
            self.apply(theta * dx);
            tau += theta * left * self.dt;
            self.switch(tau, &mut on_switch);
            left *= 1.0 - theta;
            if left <= 0.0 {
                break;
            }
        }
        self.step += 1;
        self.t = (self.step as f64) * self.dt;
        if !self.q().is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                time: self.t,
                what: "q",
            });
        }
        Ok(())
    }

    fn apply(&mut self, dx: f64) {
        if self.raining {
            self.p += dx;
        } else {
            self.e += dx;
        }
    }

    fn switch(&mut self, at: f64, on_switch: &mut impl FnMut(Switch)) {
        on_switch(if self.raining {
            Switch::RainEnd(at)
        } else {
            Switch::RainStart(at)
        });
        self.raining = !self.raining;
    }
}

/// Draws the increments (and, with the bridge correction, one uniform per
/// step) that drive one path.
pub fn draw_noise(grid: &SimGrid, stream: &mut RngStream) -> (Vec<f64>, Option<Vec<f64>>) {
    let incs = gaussian_increments(stream, grid.n_steps, grid.dt);
    let unif = grid
        .bridge_correction
        .then(|| (0..grid.n_steps).map(|_| stream.uniform()).collect());
    (incs, unif)
}

fn uniform_at(unif: Option<&[f64]>, k: usize) -> f64 {
    unif.map_or(1.0, |u| u[k])
}

/// Euler–Maruyama path of the finite-rate model with its event log and
/// `E`/`P` split.
pub fn simulate_d2(params: &ModelParams, grid: &SimGrid, stream: &mut RngStream) -> Result<PathRecord> {
    check_inputs(params, grid)?;
    let (incs, unif) = draw_noise(grid, stream);
    d2_from_increments(params, grid, &incs, unif.as_deref())
}

/// [`simulate_d2`] driven by caller-supplied increments.
pub fn d2_from_increments(
    params: &ModelParams,
    grid: &SimGrid,
    incs: &[f64],
    unif: Option<&[f64]>,
) -> Result<PathRecord> {
    check_inputs(params, grid)?;
    if incs.len() != grid.n_steps {
        return Err(Error::Misaligned(format!(
            "{} increments for {} steps",
            incs.len(),
            grid.n_steps
        )));
    }
    let n = grid.n_steps + 1;
    let mut times = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);
    let mut e = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    let mut raining = Vec::with_capacity(n);
    let mut events = EventLog::new(params.t_end);
    let mut dry_start = 0.0;

    let mut st = D2Stepper::new(params, grid);
    let mut record = |st: &D2Stepper, k: usize| {
        times.push(grid.time(k));
        q.push(st.q());
        e.push(st.e);
        p.push(st.p);
        raining.push(st.raining);
    };
    record(&st, 0);
    for (k, &dw) in incs.iter().enumerate() {
        st.advance(dw, uniform_at(unif, k), |sw| match sw {
            Switch::RainStart(t) => events.push(RainEvent {
                dry_start,
                rain_start: t,
                rain_end: None,
            }),
            Switch::RainEnd(t) => {
                events.close_last(t);
                dry_start = t;
            }
        })?;
        record(&st, k + 1);
    }
    Ok(PathRecord {
        times,
        q,
        sigma: RainSignal::Rate {
            raining,
            rate: params.rain_rate(),
        },
        e,
        p,
        events,
    })
}

/// Final `(q, raining)` of a finite-rate path without storing it.
pub fn d2_terminal_state(params: &ModelParams, grid: &SimGrid, stream: &mut RngStream) -> Result<(f64, bool)> {
    check_inputs(params, grid)?;
    let (incs, unif) = draw_noise(grid, stream);
    let mut st = D2Stepper::new(params, grid);
    for (k, &dw) in incs.iter().enumerate() {
        st.advance(dw, uniform_at(unif.as_deref(), k), |_| {})?;
    }
    Ok((st.q(), st.raining))
}

/// Spike-train limit path.
pub fn simulate_limit(params: &ModelParams, grid: &SimGrid, stream: &mut RngStream) -> Result<PathRecord> {
    check_inputs(params, grid)?;
    let (incs, unif) = draw_noise(grid, stream);
    limit_from_increments(params, grid, &incs, unif.as_deref())
}

/// [`simulate_limit`] driven by caller-supplied increments.
pub fn limit_from_increments(
    params: &ModelParams,
    grid: &SimGrid,
    incs: &[f64],
    unif: Option<&[f64]>,
) -> Result<PathRecord> {
    check_inputs(params, grid)?;
    if incs.len() != grid.n_steps {
        return Err(Error::Misaligned(format!(
            "{} increments for {} steps",
            incs.len(),
            grid.n_steps
        )));
    }
    let b = params.b;
    let n = grid.n_steps + 1;
    let mut times = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);
    let mut e = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    let mut spikes = Vec::new();
    let mut events = EventLog::new(params.t_end);

    let mut energy = params.q0;
    let mut next_level = b;
    let mut jumped = 0.0;
    times.push(0.0);
    e.push(energy);
    p.push(0.0);
    q.push(energy);
    for (k, &dw) in incs.iter().enumerate() {
        let t0 = grid.time(k);
        let old = energy;
        energy += params.m * grid.dt + params.d0 * dw;
        if !energy.is_finite() {
            return Err(Error::NonFinite {
                step: k + 1,
                time: grid.time(k + 1),
                what: "E",
            });
        }
        let spike = |at: f64, spikes: &mut Vec<f64>, events: &mut EventLog| {
            let dry_start = spikes.last().copied().unwrap_or(0.0);
            spikes.push(at);
            events.push(RainEvent {
                dry_start,
                rain_start: at,
                rain_end: Some(at),
            });
        };
        if energy >= next_level {
            while energy >= next_level {
                let theta = ((next_level - old) / (energy - old)).clamp(0.0, 1.0);
                spike(t0 + theta * grid.dt, &mut spikes, &mut events);
                next_level += b;
                jumped -= b;
            }
        } else if grid.bridge_correction
            && uniform_at(unif, k) < bridge_probability(next_level, old, energy, params.d0 * params.d0 * grid.dt)
        {
            spike(grid.time(k + 1), &mut spikes, &mut events);
            next_level += b;
            jumped -= b;
        }
        times.push(grid.time(k + 1));
        e.push(energy);
        p.push(jumped);
        q.push(energy + jumped);
    }
    Ok(PathRecord {
        times,
        q,
        sigma: RainSignal::Spikes { times: spikes, mass: b },
        e,
        p,
        events,
    })
}

/// Finite-rate and limit paths driven by one Wiener path.
#[derive(Debug, Clone)]
pub struct CoupledPair {
    pub finite: PathRecord,
    pub limit: PathRecord,
    pub increments: Vec<f64>,
}

pub fn simulate_coupled(params: &ModelParams, grid: &SimGrid, stream: &mut RngStream) -> Result<CoupledPair> {
    check_inputs(params, grid)?;
    let (incs, unif) = draw_noise(grid, stream);
    coupled_from_increments(params, grid, incs, unif.as_deref())
}

pub fn coupled_from_increments(
    params: &ModelParams,
    grid: &SimGrid,
    increments: Vec<f64>,
    unif: Option<&[f64]>,
) -> Result<CoupledPair> {
    let finite = d2_from_increments(params, grid, &increments, unif)?;
    let limit = limit_from_increments(params, grid, &increments, unif)?;
    Ok(CoupledPair {
        finite,
        limit,
        increments,
    })
}

/// `max_k |E^eps(t_k) - E(t_k)|`.
pub fn pathwise_sup_error(pair: &CoupledPair) -> Result<f64> {
    pathwise_sup_error_until(pair, f64::INFINITY)
}

/// Sup error over the grid nodes with `t <= until`.
pub fn pathwise_sup_error_until(pair: &CoupledPair, until: f64) -> Result<f64> {
    let (a, b) = (&pair.finite, &pair.limit);
    if a.times.len() != b.times.len() || a.times.iter().zip(&b.times).any(|(x, y)| x != y) {
        return Err(Error::Misaligned("finite and limit grids differ".into()));
    }
    Ok(a.times
        .iter()
        .zip(a.e.iter().zip(&b.e))
        .take_while(|(t, _)| **t <= until)
        .map(|(_, (x, y))| (x - y).abs())
        .fold(0.0, f64::max))
}
