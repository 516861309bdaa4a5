//! First-passage laws of the dry and rain phases and the renewal process they
//! generate.
//!
//! A dry phase is the time a Brownian motion with drift `m` and noise `D0`
//! needs to climb `b`; a rain phase is the time a Brownian motion with drift
//! `r/epsilon` and noise `D1` needs to descend `b`. Both are inverse Gaussian
//! with mean `distance/drift` and shape `distance^2/noise^2`.

use std::f64::consts::{PI, SQRT_2};

use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::path::{EventLog, RainEvent};
use crate::rng::RngStream;

/// Number of s values the Chernoff bound is minimized over.
pub const TAIL_GRID_LEN: usize = 50;

/// First passage time of `drift * t + noise * W(t)` to level `distance`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstPassageLaw {
    pub drift: f64,
    pub noise: f64,
    pub distance: f64,
}

/// Raw moments `E[tau]`, `E[tau^2]`, `E[tau^4]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FptMoments {
    pub mean: f64,
    pub second: f64,
    pub fourth: f64,
}

impl FptMoments {
    pub fn variance(&self) -> f64 {
        self.second - self.mean * self.mean
    }
}

impl FirstPassageLaw {
    pub fn new(drift: f64, noise: f64, distance: f64) -> Result<Self> {
        for (name, v) in [("drift", drift), ("noise", noise), ("distance", distance)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParam(format!("{name} > 0 violated")));
            }
        }
        Ok(Self {
            drift,
            noise,
            distance,
        })
    }

    /// Law of a dry phase started from `q = 0`.
    pub fn dry(p: &ModelParams) -> Result<Self> {
        Self::new(p.m, p.d0, p.b)
    }

    /// Law of the first dry phase, started from `q0`.
    pub fn first_dry(p: &ModelParams) -> Result<Self> {
        Self::new(p.m, p.d0, p.b - p.q0)
    }

    /// Law of a rain phase at the params' epsilon.
    pub fn rain(p: &ModelParams) -> Result<Self> {
        Self::new(p.rain_rate(), p.d1, p.b)
    }

    pub fn mean(&self) -> f64 {
        self.distance / self.drift
    }

    /// Inverse-Gaussian shape parameter `distance^2 / noise^2`.
    pub fn shape(&self) -> f64 {
        (self.distance / self.noise).powi(2)
    }

    pub fn variance(&self) -> f64 {
        self.distance * self.noise * self.noise / self.drift.powi(3)
    }

    pub fn density(&self, t: f64) -> Result<f64> {
        if !(t > 0.0) {
            return Err(Error::Domain(format!("density needs t > 0, got {t}")));
        }
        let s2 = self.noise * self.noise;
        let dev = self.distance - self.drift * t;
        Ok(self.distance / (2.0 * PI * s2 * t.powi(3)).sqrt() * (-dev * dev / (2.0 * s2 * t)).exp())
    }

    /// Cumulative distribution function; 0 for `t <= 0`.
    pub fn cdf(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let mu = self.mean();
        let lam = self.shape();
        let root = (lam / t).sqrt();
        let a = root * (t / mu - 1.0);
        let c = root * (t / mu + 1.0);
        let reflected = if c < 30.0 && 2.0 * lam / mu < 700.0 {
            (2.0 * lam / mu).exp() * normal_cdf(-c)
        } else {
            (2.0 * lam / mu + ln_normal_tail(c)).exp()
        };
        (normal_cdf(a) + reflected).clamp(0.0, 1.0)
    }

    /// Location of the density maximum.
    pub fn mode(&self) -> f64 {
        let mu = self.mean();
        let k = 1.5 * mu / self.shape();
        mu * ((1.0 + k * k).sqrt() - k)
    }

    /// `E[tau]`, `E[tau^2]`, `E[tau^4]` from the inverse-Gaussian mean `mu`
    /// and shape `lambda`.
    pub fn moments(&self) -> FptMoments {
        let mu = self.mean();
        let lam = self.shape();
        FptMoments {
            mean: mu,
            second: mu * mu + mu.powi(3) / lam,
            fourth: mu.powi(4)
                + 6.0 * mu.powi(5) / lam
                + 15.0 * mu.powi(6) / (lam * lam)
                + 15.0 * mu.powi(7) / lam.powi(3),
        }
    }

    /// Laplace transform `E[exp(-s tau)]` for `s >= 0`.
    pub fn laplace(&self, s: f64) -> Result<f64> {
        if !(s >= 0.0) {
            return Err(Error::Domain(format!(
                "only the Laplace branch s >= 0 is available, got s = {s}"
            )));
        }
        Ok((-self.laplace_exponent(s)).exp())
    }

    /// `-ln E[exp(-s tau)] = (distance drift / noise^2) (sqrt(1 + 2 noise^2 s / drift^2) - 1)`.
    pub fn laplace_exponent(&self, s: f64) -> f64 {
        let s2 = self.noise * self.noise;
        let x = 2.0 * s2 * s / (self.drift * self.drift);
        // sqrt(1+x) - 1 without cancellation for small x
        let root_minus_one = x / ((1.0 + x).sqrt() + 1.0);
        self.distance * self.drift / s2 * root_minus_one
    }

    /// Exact draw (transformation with root selection, no time stepping).
    pub fn sample(&self, stream: &mut RngStream) -> f64 {
        let mu = self.mean();
        let lam = self.shape();
        let nu = stream.standard_normal();
        let y = nu * nu;
        let mu_y = mu * y;
        let large = mu + mu * mu_y / (2.0 * lam) + mu / (2.0 * lam) * (4.0 * mu_y * lam + mu_y * mu_y).sqrt();
        // the two roots multiply to mu^2
        let small = mu * mu / large;
        if stream.uniform() * (mu + small) <= mu {
            small
        } else {
            large
        }
    }

    /// A time beyond which less than `mass` probability remains, found from
    /// the exponential tail `density(t) * 2 mu^2 / lambda`.
    pub fn tail_cutoff(&self, mass: f64) -> f64 {
        let scale = 2.0 * self.mean().powi(2) / self.shape();
        let mut t = self.mean().max(self.mode());
        while self.density(t).unwrap_or(0.0) * scale > mass {
            t *= 1.25;
        }
        t
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// `ln Phi(-c)` for large positive `c` (asymptotic series).
fn ln_normal_tail(c: f64) -> f64 {
    if c < 30.0 {
        return normal_cdf(-c).ln();
    }
    let c2 = c * c;
    let series = 1.0 - 1.0 / c2 + 3.0 / (c2 * c2) - 15.0 / (c2 * c2 * c2);
    -0.5 * c2 - (c * (2.0 * PI).sqrt()).ln() + series.ln()
}

/// Rain-duration moments written directly as polynomials in epsilon:
/// mean `b eps / r`, second `b D1^2 eps^3/r^3 + b^2 eps^2/r^2`, fourth
/// `b^4 eps^4/r^4 + 6 b^3 D1^2 eps^5/r^5 + 15 b^2 D1^4 eps^6/r^6 + 15 b D1^6 eps^7/r^7`.
///
/// Valid down to `epsilon = 0`, where everything vanishes.
pub fn rain_duration_moments(b: f64, r: f64, d1: f64, epsilon: f64) -> FptMoments {
    let x = epsilon / r;
    let d2 = d1 * d1;
    FptMoments {
        mean: b * x,
        second: b * d2 * x.powi(3) + b * b * x * x,
        fourth: b.powi(4) * x.powi(4)
            + 6.0 * b.powi(3) * d2 * x.powi(5)
            + 15.0 * b * b * d2 * d2 * x.powi(6)
            + 15.0 * b * d2.powi(3) * x.powi(7),
    }
}

/// Chernoff parameter for the event-count tail bound, `0 < s < s_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailBoundParams {
    s: f64,
}

impl TailBoundParams {
    pub fn new(params: &ModelParams, s: f64) -> Result<Self> {
        let s_max = tail_s_max(params);
        if !(s > 0.0 && s < s_max) {
            return Err(Error::Domain(format!("need 0 < s < {s_max}, got s = {s}")));
        }
        Ok(Self { s })
    }

    pub fn s(&self) -> f64 {
        self.s
    }
}

/// `min{ r b / (eps D1^2), m b / D0^2 }`.
pub fn tail_s_max(p: &ModelParams) -> f64 {
    (p.r * p.b / (p.epsilon * p.d1 * p.d1)).min(p.m * p.b / (p.d0 * p.d0))
}

/// `P(N_eps(T) = n) <= exp{ s T - n (m b / D0^2)(sqrt(1 + 2 D0^2 s / m^2) - 1) }`.
///
/// Only the dry-phase Laplace factor enters, so the bound does not depend on
/// epsilon.
pub fn event_count_tail_bound(p: &ModelParams, s: TailBoundParams, n: usize) -> Result<f64> {
    let dry = FirstPassageLaw::dry(p)?;
    Ok((s.s * p.t_end - n as f64 * dry.laplace_exponent(s.s)).exp())
}

/// The pre-limit bound that keeps the rain-phase factor
/// `exp{ -n (r b/(eps D1^2)) (sqrt(1 + 2 D1^2 eps^2 s / r^2) - 1) }`.
///
/// It bounds `P(S_1 + ... + S_n <= T)`, i.e. the probability of at least `n`
/// completed dry+rain cycles.
pub fn event_count_tail_bound_sharp(p: &ModelParams, s: TailBoundParams, n: usize) -> Result<f64> {
    let dry = FirstPassageLaw::dry(p)?;
    let rain = FirstPassageLaw::rain(p)?;
    let expo = s.s * p.t_end - n as f64 * (dry.laplace_exponent(s.s) + rain.laplace_exponent(s.s));
    Ok(expo.exp())
}

/// Geometric grid of [`TAIL_GRID_LEN`] values spanning `(0, s_max)`.
pub fn tail_s_grid(p: &ModelParams) -> Vec<f64> {
    let s_max = tail_s_max(p);
    let lo = 1e-4 * s_max;
    let hi = 0.999 * s_max;
    let ratio = (hi / lo).powf(1.0 / (TAIL_GRID_LEN - 1) as f64);
    (0..TAIL_GRID_LEN).map(|k| lo * ratio.powi(k as i32)).collect()
}

/// The tail bound minimized over [`tail_s_grid`]. `sharp` selects the
/// pre-limit variant.
pub fn minimized_tail_bound(p: &ModelParams, n: usize, sharp: bool) -> Result<f64> {
    let mut best = f64::INFINITY;
    for s in tail_s_grid(p) {
        let s = TailBoundParams::new(p, s)?;
        let v = if sharp {
            event_count_tail_bound_sharp(p, s, n)?
        } else {
            event_count_tail_bound(p, s, n)?
        };
        best = best.min(v);
    }
    Ok(best)
}

/// Alternating exact dry/rain durations until the horizon is passed.
pub fn renewal_simulate_exact(p: &ModelParams, stream: &mut RngStream) -> Result<EventLog> {
    let first = FirstPassageLaw::first_dry(p)?;
    let dry = FirstPassageLaw::dry(p)?;
    let rain = FirstPassageLaw::rain(p)?;
    let mut log = EventLog::new(p.t_end);
    let mut t = 0.0;
    let mut law = first;
    loop {
        let rain_start = t + law.sample(stream);
        if rain_start > p.t_end {
            break;
        }
        let rain_end = rain_start + rain.sample(stream);
        let closed = rain_end <= p.t_end;
        log.push(RainEvent {
            dry_start: t,
            rain_start,
            rain_end: closed.then_some(rain_end),
        });
        if !closed {
            break;
        }
        t = rain_end;
        law = dry;
    }
    Ok(log)
}
