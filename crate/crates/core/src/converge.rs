//! Monte Carlo convergence experiments over an epsilon sweep.
//!
//! Every path of the sweep is a [`CoupledPair`]: the finite-rate model and the
//! spike-train limit driven by the same Wiener path. Two statistics are
//! collected per path:
//!
//! * `sup_t |E^eps(t) - E(t)|^2` (moisture convergence), and
//! * `(<sigma^eps, phi> - <sigma, phi>)^2` for each test function `phi`
//!   (rain convergence against smooth bumps).
//!
//! Path `i` uses stream `(seed, i)` at every epsilon, so the sweep points share
//! their driving noise.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::path::{PathRecord, RainSignal};
use crate::rng::{coarsen_increments, gaussian_increments, RngStream};
use crate::simulate::{coupled_from_increments, pathwise_sup_error, simulate_coupled, CoupledPair, SimGrid};
use crate::stats::MeanEstimate;

/// Smooth bump `a exp(-1 / (1 - ((t - c)/w)^2))` on `|t - c| < w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestFunction {
    pub center: f64,
    pub half_width: f64,
    pub amplitude: f64,
}

impl TestFunction {
    pub fn new(center: f64, half_width: f64, amplitude: f64) -> Result<Self> {
        if !(half_width > 0.0) || !center.is_finite() || !amplitude.is_finite() {
            return Err(Error::InvalidParam(format!(
                "bump needs w > 0 and finite c, a (c = {center}, w = {half_width}, a = {amplitude})"
            )));
        }
        Ok(Self {
            center,
            half_width,
            amplitude,
        })
    }

    /// Bumps at `(T/4, T/10)`, `(T/2, T/5)`, `(3T/4, T/10)` with unit amplitude.
    pub fn default_battery(t_end: f64) -> Vec<TestFunction> {
        [(0.25, 0.1), (0.5, 0.2), (0.75, 0.1)]
            .iter()
            .map(|&(c, w)| TestFunction {
                center: c * t_end,
                half_width: w * t_end,
                amplitude: 1.0,
            })
            .collect()
    }

    pub fn support(&self) -> (f64, f64) {
        (self.center - self.half_width, self.center + self.half_width)
    }

    /// Support must sit strictly inside `(0, t_end)`.
    pub fn check_support(&self, t_end: f64) -> Result<()> {
        let (lo, hi) = self.support();
        if lo <= 0.0 || hi >= t_end {
            return Err(Error::Domain(format!(
                "test function support [{lo}, {hi}] not inside (0, {t_end})"
            )));
        }
        Ok(())
    }

    pub fn value(&self, t: f64) -> f64 {
        let u = (t - self.center) / self.half_width;
        if u.abs() >= 1.0 {
            return 0.0;
        }
        self.amplitude * (-1.0 / (1.0 - u * u)).exp()
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let u = (t - self.center) / self.half_width;
        if u.abs() >= 1.0 {
            return 0.0;
        }
        let s = 1.0 - u * u;
        self.amplitude * (-1.0 / s).exp() * (-2.0 * u / (s * s)) / self.half_width
    }

    /// Lipschitz constant, `max |phi'|` on a dense grid of the support.
    pub fn lipschitz(&self) -> f64 {
        let (lo, hi) = self.support();
        let n = 100_000;
        (0..=n)
            .map(|i| self.derivative(lo + (hi - lo) * i as f64 / n as f64).abs())
            .fold(0.0, f64::max)
    }
}

fn simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
}

/// `int_a^b f` with one Simpson panel per piece of the grid inside `[a, b]`;
/// the end pieces are cut at `a` and `b`.
fn integrate_on_grid(times: &[f64], a: f64, b: f64, f: &impl Fn(f64) -> f64) -> f64 {
    if !(a < b) {
        return 0.0;
    }
    let mut i = times.partition_point(|&t| t <= a).saturating_sub(1);
    let mut total = 0.0;
    while i + 1 < times.len() && times[i] < b {
        let lo = times[i].max(a);
        let hi = times[i + 1].min(b);
        if hi > lo {
            total += simpson(f, lo, hi);
        }
        i += 1;
    }
    total
}

/// `<sigma^eps, phi> = (r/eps) sum_i int_{rain interval i} phi(t) dt`.
pub fn pairing_finite(path: &PathRecord, phi: &TestFunction) -> Result<f64> {
    let RainSignal::Rate { rate, .. } = &path.sigma else {
        return Err(Error::Misaligned("pairing_finite needs a finite-rate path".into()));
    };
    phi.check_support(path.events.horizon())?;
    let (lo, hi) = phi.support();
    let f = |t: f64| phi.value(t);
    let integral: f64 = path
        .events
        .rain_intervals()
        .map(|(a, b)| integrate_on_grid(&path.times, a.max(lo), b.min(hi), &f))
        .sum();
    Ok(rate * integral)
}

/// `<sigma, phi> = b sum_i phi(tau_i)` over the spike times.
pub fn pairing_limit(path: &PathRecord, phi: &TestFunction) -> Result<f64> {
    let RainSignal::Spikes { times, mass } = &path.sigma else {
        return Err(Error::Misaligned("pairing_limit needs a spike-train path".into()));
    };
    phi.check_support(path.events.horizon())?;
    Ok(mass * times.iter().map(|&t| phi.value(t)).sum::<f64>())
}

/// Least-squares line through `(ln epsilon, ln error)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn fit_rate(epsilons: &[f64], errors: &[f64]) -> Result<RateFit> {
    if epsilons.len() != errors.len() {
        return Err(Error::Fit("epsilon and error lists differ in length".into()));
    }
    if epsilons.len() < 3 {
        return Err(Error::Fit(format!("need at least 3 points, got {}", epsilons.len())));
    }
    if let Some(e) = errors.iter().chain(epsilons).find(|&&e| !(e > 0.0)) {
        return Err(Error::Fit(format!("nonpositive value {e}")));
    }
    let x: Vec<f64> = epsilons.iter().map(|e| e.ln()).collect();
    let y: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("all epsilons equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(&y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Per-epsilon mean squared errors with their fitted log-log rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub label: String,
    pub epsilons: Vec<f64>,
    pub errors: Vec<MeanEstimate>,
    pub fit: RateFit,
    /// Sweep points left out of the fit (standard error above 30% of the mean).
    pub excluded: Vec<f64>,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
}

/// Maximum relative standard error for a point to enter the fit.
pub const FIT_MAX_REL_SE: f64 = 0.3;

impl ConvergenceReport {
    fn build(label: String, epsilons: Vec<f64>, errors: Vec<MeanEstimate>, cfg: &SweepConfig) -> Result<Self> {
        let (mut fe, mut fv, mut excluded) = (Vec::new(), Vec::new(), Vec::new());
        for (&e, est) in epsilons.iter().zip(&errors) {
            if est.std_err > FIT_MAX_REL_SE * est.mean || !(est.mean > 0.0) {
                excluded.push(e);
            } else {
                fe.push(e);
                fv.push(est.mean);
            }
        }
        let fit = fit_rate(&fe, &fv)?;
        Ok(Self {
            label,
            epsilons,
            errors,
            fit,
            excluded,
            n_paths: cfg.n_paths,
            dt: cfg.dt,
            seed: cfg.seed,
        })
    }

    /// Each error is below its predecessor, allowing `k` combined standard
    /// errors of slack.
    pub fn is_decreasing(&self, k: f64) -> bool {
        self.errors
            .windows(2)
            .all(|w| w[1].mean < w[0].mean + k * w[0].std_err.hypot(w[1].std_err))
    }
}

/// Sweep settings shared by both experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// Model parameters; `epsilon` is replaced by each sweep value.
    pub params: ModelParams,
    pub epsilons: Vec<f64>,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub test_functions: Vec<TestFunction>,
    pub bridge_correction: bool,
}

impl SweepConfig {
    pub fn new(params: ModelParams, epsilons: Vec<f64>, n_paths: usize, dt: f64, seed: u64) -> Self {
        let test_functions = TestFunction::default_battery(params.t_end);
        Self {
            params,
            epsilons,
            n_paths,
            dt,
            seed,
            test_functions,
            bridge_correction: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() || self.epsilons.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::InvalidParam("epsilon sweep must be strictly decreasing".into()));
        }
        if self.n_paths < 100 {
            return Err(Error::InvalidParam(format!("n_paths ≥ 100 violated ({})", self.n_paths)));
        }
        for &e in &self.epsilons {
            self.params.with_epsilon(e).validate()?;
            self.grid()?.validate_for(&self.params.with_epsilon(e))?;
        }
        for phi in &self.test_functions {
            phi.check_support(self.params.t_end)?;
        }
        Ok(())
    }

    fn grid(&self) -> Result<SimGrid> {
        Ok(SimGrid::new(self.params.t_end, self.dt)?.with_bridge_correction(self.bridge_correction))
    }
}

/// Statistics of one coupled path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathStats {
    pub sup_sq: f64,
    pub pairing_sq: Vec<f64>,
    /// Squared pairing error against spikes placed at the finite path's own
    /// dry clock, i.e. event `k` paired with spike `k` at `onset_k - rain time so far`.
    pub aligned_pairing_sq: Vec<f64>,
    /// Fewer rain onsets than spikes in `[0, T]`.
    pub count_mismatch: bool,
}

pub fn path_stats(pair: &CoupledPair, phis: &[TestFunction]) -> Result<PathStats> {
    let sup = pathwise_sup_error(pair)?;
    let pairing_sq = phis
        .iter()
        .map(|phi| Ok((pairing_finite(&pair.finite, phi)? - pairing_limit(&pair.limit, phi)?).powi(2)))
        .collect::<Result<Vec<_>>>()?;
    let spikes = dry_clock_spikes(&pair.finite);
    let mass = match &pair.limit.sigma {
        RainSignal::Spikes { mass, .. } => *mass,
        RainSignal::Rate { .. } => return Err(Error::Misaligned("limit path carries a rate signal".into())),
    };
    let aligned_pairing_sq = phis
        .iter()
        .map(|phi| {
            let lim: f64 = spikes.iter().map(|&t| mass * phi.value(t)).sum();
            Ok((pairing_finite(&pair.finite, phi)? - lim).powi(2))
        })
        .collect::<Result<Vec<_>>>()?;
    let t = pair.finite.events.horizon();
    Ok(PathStats {
        sup_sq: sup * sup,
        pairing_sq,
        aligned_pairing_sq,
        count_mismatch: pair.finite.events.count(t) < pair.limit.events.count(t),
    })
}

/// Rain onsets of `path` with the rain time accumulated before each removed.
pub fn dry_clock_spikes(path: &PathRecord) -> Vec<f64> {
    let mut rain = 0.0;
    path.events
        .entries()
        .iter()
        .map(|e| {
            let t = e.rain_start - rain;
            rain += e.rain_duration().unwrap_or(0.0);
            t
        })
        .collect()
}

/// Outcome of a full sweep: one moisture report, one rain report per test
/// function, and the empirical count-mismatch frequency per epsilon.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub theorem1: ConvergenceReport,
    pub theorem2: Vec<ConvergenceReport>,
    /// Same as `theorem2` but with events paired on the dry clock (see
    /// [`PathStats::aligned_pairing_sq`]).
    pub aligned: Vec<ConvergenceReport>,
    pub mismatch_frequency: Vec<f64>,
}

fn ensemble(cfg: &SweepConfig, epsilon: f64) -> Result<Vec<PathStats>> {
    let params = cfg.params.with_epsilon(epsilon);
    let grid = cfg.grid()?;
    (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let pair = simulate_coupled(&params, &grid, &mut RngStream::new(cfg.seed, i))?;
            let st = path_stats(&pair, &cfg.test_functions)?;
            if !st.sup_sq.is_finite() || st.pairing_sq.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteSample {
                    epsilon,
                    seed: cfg.seed,
                    path: i,
                });
            }
            Ok(st)
        })
        .collect()
}

/// Runs both experiments on one set of coupled paths.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let n_phi = cfg.test_functions.len();
    let mut sup = Vec::new();
    let mut pairing: Vec<Vec<MeanEstimate>> = vec![Vec::new(); n_phi];
    let mut aligned: Vec<Vec<MeanEstimate>> = vec![Vec::new(); n_phi];
    let mut mismatch = Vec::new();
    for &eps in &cfg.epsilons {
        let stats = ensemble(cfg, eps)?;
        let s: Vec<f64> = stats.iter().map(|s| s.sup_sq).collect();
        sup.push(MeanEstimate::from_samples(&s));
        for (j, acc) in pairing.iter_mut().enumerate() {
            let v: Vec<f64> = stats.iter().map(|s| s.pairing_sq[j]).collect();
            acc.push(MeanEstimate::from_samples(&v));
        }
        for (j, acc) in aligned.iter_mut().enumerate() {
            let v: Vec<f64> = stats.iter().map(|s| s.aligned_pairing_sq[j]).collect();
            acc.push(MeanEstimate::from_samples(&v));
        }
        mismatch.push(stats.iter().filter(|s| s.count_mismatch).count() as f64 / stats.len() as f64);
    }
    let theorem1 = ConvergenceReport::build("sup_sq_E".into(), cfg.epsilons.clone(), sup, cfg)?;
    let theorem2 = pairing
        .into_iter()
        .zip(&cfg.test_functions)
        .map(|(errs, phi)| {
            let label = format!("pairing_sq_c{}_w{}", phi.center, phi.half_width);
            ConvergenceReport::build(label, cfg.epsilons.clone(), errs, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let aligned = aligned
        .into_iter()
        .zip(&cfg.test_functions)
        .map(|(errs, phi)| {
            let label = format!("aligned_pairing_sq_c{}_w{}", phi.center, phi.half_width);
            ConvergenceReport::build(label, cfg.epsilons.clone(), errs, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        theorem1,
        theorem2,
        aligned,
        mismatch_frequency: mismatch,
    })
}

/// Mean squared sup error of `E^eps - E` across the sweep.
pub fn theorem1_experiment(cfg: &SweepConfig) -> Result<ConvergenceReport> {
    let cfg = SweepConfig {
        test_functions: Vec::new(),
        ..cfg.clone()
    };
    Ok(run_sweep(&cfg)?.theorem1)
}

/// Mean squared pairing error for each test function across the sweep.
pub fn theorem2_experiment(cfg: &SweepConfig) -> Result<Vec<ConvergenceReport>> {
    if cfg.test_functions.is_empty() {
        return Err(Error::InvalidParam("at least one test function is required".into()));
    }
    Ok(run_sweep(cfg)?.theorem2)
}

/// Moisture and rain errors at one epsilon on grids `dt` and `dt/2` built
/// from the same Brownian path.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementCheck {
    pub coarse_sup: MeanEstimate,
    pub fine_sup: MeanEstimate,
    pub coarse_pairing: Vec<MeanEstimate>,
    pub fine_pairing: Vec<MeanEstimate>,
}

pub fn dt_refinement_check(cfg: &SweepConfig, epsilon: f64) -> Result<RefinementCheck> {
    let params = cfg.params.with_epsilon(epsilon).validate()?;
    let coarse = cfg.grid()?;
    let fine = coarse.refined();
    coarse.validate_for(&params)?;
    let pairs: Vec<(PathStats, PathStats)> = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut stream = RngStream::new(cfg.seed, i);
            let fine_incs = gaussian_increments(&mut stream, fine.n_steps(), fine.dt());
            let coarse_incs = coarsen_increments(&fine_incs);
            let f = coupled_from_increments(&params, &fine, fine_incs, None)?;
            let c = coupled_from_increments(&params, &coarse, coarse_incs, None)?;
            Ok((path_stats(&c, &cfg.test_functions)?, path_stats(&f, &cfg.test_functions)?))
        })
        .collect::<Result<_>>()?;
    let est = |sel: &dyn Fn(&(PathStats, PathStats)) -> f64| {
        MeanEstimate::from_samples(&pairs.iter().map(sel).collect::<Vec<_>>())
    };
    let n_phi = cfg.test_functions.len();
    Ok(RefinementCheck {
        coarse_sup: est(&|p| p.0.sup_sq),
        fine_sup: est(&|p| p.1.sup_sq),
        coarse_pairing: (0..n_phi).map(|j| est(&|p| p.0.pairing_sq[j])).collect(),
        fine_pairing: (0..n_phi).map(|j| est(&|p| p.1.pairing_sq[j])).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::integrate;
    use crate::simulate::{simulate_d2, simulate_limit};
    use approx::assert_relative_eq;

    fn skeleton(eps: f64) -> ModelParams {
        ModelParams {
            d0: 0.0,
            d1: 0.0,
            epsilon: eps,
            ..Default::default()
        }
    }

    #[test]
    fn bump_values() {
        let phi = TestFunction::new(5.0, 1.0, 2.0).unwrap();
        assert_relative_eq!(phi.value(5.0), 2.0 * (-1.0f64).exp());
        assert_eq!(phi.value(6.0), 0.0);
        assert_eq!(phi.value(3.9), 0.0);
        // central difference check of the derivative
        for &t in &[4.3, 4.8, 5.2, 5.9] {
            let h = 1e-6;
            let fd = (phi.value(t + h) - phi.value(t - h)) / (2.0 * h);
            assert!((fd - phi.derivative(t)).abs() < 1e-6);
        }
        assert!(phi.lipschitz() > 0.0);
    }

    #[test]
    fn support_must_be_interior() {
        assert!(TestFunction::new(0.5, 0.5, 1.0).unwrap().check_support(10.0).is_err());
        assert!(TestFunction::new(9.5, 0.5, 1.0).unwrap().check_support(10.0).is_err());
        assert!(TestFunction::new(5.0, 0.5, 1.0).unwrap().check_support(10.0).is_ok());
        for phi in TestFunction::default_battery(10.0) {
            phi.check_support(10.0).unwrap();
        }
    }

    #[test]
    fn pairing_without_rain_is_zero() {
        let p = ModelParams::default().with_horizon(0.3);
        let g = SimGrid::default_for(&p).unwrap();
        let phi = TestFunction::new(0.15, 0.1, 1.0).unwrap();
        let path = (0..200)
            .map(|i| simulate_d2(&p, &g, &mut RngStream::new(1, i)).unwrap())
            .find(|pa| pa.events.is_empty())
            .unwrap();
        assert_eq!(pairing_finite(&path, &phi).unwrap(), 0.0);
    }

    #[test]
    fn pairing_finite_skeleton_closed_form() {
        let p = skeleton(0.1);
        let g = SimGrid::new(p.t_end, 1e-4).unwrap();
        let path = simulate_d2(&p, &g, &mut RngStream::new(0, 0)).unwrap();
        let period = p.b / p.m + p.b * p.epsilon / p.r;
        for phi in TestFunction::default_battery(p.t_end) {
            let mut exact = 0.0;
            let mut start = p.b / p.m;
            while start < p.t_end {
                let end = (start + p.b * p.epsilon / p.r).min(p.t_end);
                exact += integrate(|t| phi.value(t), start, end, 1e-14);
                start += period;
            }
            exact *= p.rain_rate();
            let got = pairing_finite(&path, &phi).unwrap();
            assert!((got - exact).abs() < 1e-8, "{got} vs {exact}");
        }
    }

    #[test]
    fn pairing_limit_single_spike_and_skeleton() {
        let p = skeleton(0.1);
        let g = SimGrid::new(p.t_end, 1e-3).unwrap();
        let path = simulate_limit(&p, &g, &mut RngStream::new(0, 0)).unwrap();
        // spike at t = 5 exactly under the bump center
        let phi = TestFunction::new(5.0, 0.5, 1.0).unwrap();
        assert_relative_eq!(pairing_limit(&path, &phi).unwrap(), p.b * (-1.0f64).exp(), max_relative = 1e-6);
        for phi in TestFunction::default_battery(p.t_end) {
            let expect: f64 = (1..=10).map(|k| p.b * phi.value(k as f64 * p.b / p.m)).sum();
            assert_relative_eq!(pairing_limit(&path, &phi).unwrap(), expect, max_relative = 1e-6);
        }
        // no spikes under a narrow bump between spikes
        let gap = TestFunction::new(5.5, 0.2, 1.0).unwrap();
        assert_eq!(pairing_limit(&path, &gap).unwrap(), 0.0);
    }

    #[test]
    fn dry_clock_spikes_of_skeleton_match_limit() {
        let p = skeleton(0.1);
        let g = SimGrid::new(p.t_end, 1e-4).unwrap();
        let path = simulate_d2(&p, &g, &mut RngStream::new(0, 0)).unwrap();
        for (k, t) in dry_clock_spikes(&path).iter().enumerate() {
            assert!((t - (k + 1) as f64 * p.b / p.m).abs() < 1e-9);
        }
    }

    #[test]
    fn pairing_rejects_wrong_path_kind() {
        let p = ModelParams::default().with_horizon(1.0);
        let g = SimGrid::default_for(&p).unwrap();
        let phi = TestFunction::new(0.5, 0.2, 1.0).unwrap();
        let lim = simulate_limit(&p, &g, &mut RngStream::new(0, 0)).unwrap();
        let fin = simulate_d2(&p, &g, &mut RngStream::new(0, 0)).unwrap();
        assert!(pairing_finite(&lim, &phi).is_err());
        assert!(pairing_limit(&fin, &phi).is_err());
        let outside = TestFunction::new(0.9, 0.2, 1.0).unwrap();
        assert!(pairing_finite(&fin, &outside).is_err());
    }

    #[test]
    fn skeleton_pairing_difference_vanishes() {
        // closed form: events at k(b/m + b eps/r) vs spikes at k b/m
        let phi = TestFunction::new(5.0, 2.0, 1.0).unwrap();
        let mut prev = f64::INFINITY;
        for &eps in &crate::model::DEFAULT_SWEEP {
            let p = skeleton(eps);
            let rain = p.b * eps / p.r;
            let mut fin = 0.0;
            let mut k = 1.0;
            while k * p.b / p.m + (k - 1.0) * rain < p.t_end {
                let s = k * p.b / p.m + (k - 1.0) * rain;
                fin += integrate(|t| phi.value(t), s, (s + rain).min(p.t_end), 1e-14);
                k += 1.0;
            }
            fin *= p.rain_rate();
            let lim: f64 = (1..=10).map(|k| phi.value(k as f64)).sum::<f64>() * p.b;
            let g = SimGrid::new(p.t_end, 1e-4).unwrap();
            let pair = simulate_coupled(&p, &g, &mut RngStream::new(0, 0)).unwrap();
            let d = pairing_finite(&pair.finite, &phi).unwrap() - pairing_limit(&pair.limit, &phi).unwrap();
            assert!((d - (fin - lim)).abs() < 1e-6, "eps {eps}: {d} vs {}", fin - lim);
            assert!(d.abs() < prev);
            prev = d.abs();
        }
    }

    #[test]
    fn pairing_nonnegative_for_nonnegative_phi() {
        let p = ModelParams::default();
        let g = SimGrid::default_for(&p).unwrap();
        for i in 0..5 {
            let path = simulate_d2(&p, &g, &mut RngStream::new(2, i)).unwrap();
            for phi in TestFunction::default_battery(p.t_end) {
                assert!(pairing_finite(&path, &phi).unwrap() >= 0.0);
            }
        }
    }

    #[test]
    fn mollified_pairing_converges_to_spike_sum() {
        let p = ModelParams::default();
        let g = SimGrid::default_for(&p).unwrap();
        let path = simulate_limit(&p, &g, &mut RngStream::new(8, 0)).unwrap();
        let RainSignal::Spikes { times, mass } = &path.sigma else { unreachable!() };
        let phi = TestFunction::new(5.0, 2.0, 1.0).unwrap();
        let exact = pairing_limit(&path, &phi).unwrap();
        let mut errs = Vec::new();
        for &h in &[0.1, 0.05, 0.025] {
            // each spike smeared into a box of width h on a dense grid
            let n = 200_000;
            let dt = p.t_end / n as f64;
            let mut acc = 0.0;
            for k in 0..n {
                let t = (k as f64 + 0.5) * dt;
                let dens: f64 = times.iter().filter(|&&s| (t - s).abs() < 0.5 * h).count() as f64 * mass / h;
                acc += dens * phi.value(t) * dt;
            }
            errs.push((acc - exact).abs());
        }
        assert!(errs[1] < errs[0] && errs[2] < errs[1], "{errs:?}");
    }

    #[test]
    fn fit_rate_synthetic() {
        let eps = crate::model::DEFAULT_SWEEP.to_vec();
        let f = fit_rate(&eps, &eps).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12);
        let sq: Vec<f64> = eps.iter().map(|e| 3.0 * e * e).collect();
        let f = fit_rate(&eps, &sq).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-12);
        let mut st = RngStream::new(99, 0);
        let noisy: Vec<f64> = eps.iter().map(|e| e * (1.0 + 0.05 * st.standard_normal())).collect();
        assert!((fit_rate(&eps, &noisy).unwrap().slope - 1.0).abs() < 0.1);
    }

    #[test]
    fn fit_rate_errors() {
        assert!(fit_rate(&[0.1, 0.05], &[1.0, 0.5]).is_err());
        assert!(fit_rate(&[0.1, 0.05, 0.02], &[1.0, 0.0, 0.5]).is_err());
        assert!(fit_rate(&[0.1, 0.05, 0.02], &[1.0, -1.0, 0.5]).is_err());
    }

    #[test]
    fn sweep_config_validation() {
        let p = ModelParams::default();
        let ok = SweepConfig::new(p, vec![0.2, 0.1, 0.05], 100, 1e-4, 1);
        assert!(ok.validate().is_ok());
        let unsorted = SweepConfig::new(p, vec![0.1, 0.2, 0.05], 100, 1e-4, 1);
        assert!(unsorted.validate().is_err());
        let few = SweepConfig::new(p, vec![0.2, 0.1, 0.05], 10, 1e-4, 1);
        assert!(few.validate().is_err());
        let mut bad_phi = ok.clone();
        bad_phi.test_functions.push(TestFunction::new(9.9, 0.5, 1.0).unwrap());
        assert!(bad_phi.validate().is_err());
    }

    #[test]
    fn small_sweep_runs_and_is_reproducible() {
        let p = ModelParams::default().with_horizon(2.0);
        let mut cfg = SweepConfig::new(p, vec![0.2, 0.1, 0.05], 100, 1e-3, 7);
        cfg.test_functions = vec![TestFunction::new(1.0, 0.5, 1.0).unwrap()];
        let a = run_sweep(&cfg).unwrap();
        let b = run_sweep(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.theorem1.errors.len(), 3);
        assert_eq!(a.theorem2.len(), 1);
        assert!(a.theorem1.errors.iter().all(|e| e.mean > 0.0));
    }
}
