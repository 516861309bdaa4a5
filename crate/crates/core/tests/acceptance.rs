//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs without the libtest harness so the report is always
//! printed.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use rainlimit::cli::tail_table;
use rainlimit::converge::{run_sweep, ConvergenceReport, SweepConfig, SweepResult};
use rainlimit::fokker_planck::{
    boundary_layer_profile, solve_coupled_fp, solve_coupled_stationary, solve_limit_fp,
    solve_limit_stationary, stationary_rain_fraction, DensityField, GridSpec,
};
use rainlimit::model::DEFAULT_SWEEP;
use rainlimit::quad::integrate;
use rainlimit::renewal::{rain_duration_moments, renewal_simulate_exact, FirstPassageLaw};
use rainlimit::rng::gaussian_increments;
use rainlimit::simulate::{d2_terminal_state, simulate_d2, D2Stepper, SimGrid, Switch};
use rainlimit::stats::{ks_distance, pairwise_sum};
use rainlimit::{ModelParams, RngStream};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn c1_rain_moments() -> Outcome {
    let p = ModelParams::default();
    let law = FirstPassageLaw::rain(&p).unwrap();
    let n = 1_000_000u64;
    let chunks = 100u64;
    let sums: Vec<[f64; 3]> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut s = RngStream::new(1001, c);
            let xs: Vec<f64> = (0..n / chunks).map(|_| law.sample(&mut s)).collect();
            let pw = |k: i32| pairwise_sum(&xs.iter().map(|x| x.powi(k)).collect::<Vec<_>>());
            [pw(1), pw(2), pw(4)]
        })
        .collect();
    let tot = |k: usize| pairwise_sum(&sums.iter().map(|s| s[k]).collect::<Vec<_>>()) / n as f64;
    let (m1, m2, m4) = (tot(0), tot(1), tot(2));
    let want = rain_duration_moments(p.b, p.r, p.d1, p.epsilon);
    let (e1, e2, e4) = (rel(m1, 0.1), rel(m2, 0.011), rel(m4, want.fourth));
    outcome(
        e1 < 0.01 && e2 < 0.02 && e4 < 0.05,
        format!("mean {m1:.6} ({e1:.2e}), second {m2:.6} ({e2:.2e}), fourth {m4:.4e} vs {:.4e} ({e4:.2e})", want.fourth),
    )
}

fn c2_laplace() -> Outcome {
    let p = ModelParams::default();
    let mut worst: f64 = 0.0;
    for law in [FirstPassageLaw::dry(&p).unwrap(), FirstPassageLaw::rain(&p).unwrap()] {
        let cut = law.tail_cutoff(1e-14);
        for s in [0.1, 0.5, 1.0, 2.0] {
            let num = integrate(|t| (-s * t).exp() * law.density(t).unwrap_or(0.0), 0.0, cut, 1e-12);
            worst = worst.max((num - law.laplace(s).unwrap()).abs());
        }
    }
    outcome(worst < 1e-6, format!("max |closed form - quadrature| = {worst:.2e}"))
}

fn c3_tail_bound() -> Outcome {
    let p = ModelParams::default();
    let logs: Vec<_> = (0..100_000u64)
        .into_par_iter()
        .map(|i| renewal_simulate_exact(&p, &mut RngStream::new(303, i)).unwrap())
        .collect();
    let rows = tail_table(&p, &logs).unwrap();
    let bad: Vec<usize> = rows
        .iter()
        .filter(|r| r.frequency > 0.0 && r.frequency > r.bound)
        .map(|r| r.n)
        .collect();
    let tightest = rows
        .iter()
        .filter(|r| r.frequency > 0.0)
        .map(|r| r.frequency / r.bound)
        .fold(0.0, f64::max);
    outcome(
        bad.is_empty(),
        format!("{} counts observed, max frequency/bound = {tightest:.3}, violations at N = {bad:?}", rows.iter().filter(|r| r.frequency > 0.0).count()),
    )
}

fn c4_event_laws() -> Outcome {
    let p = ModelParams::default();
    let grid = SimGrid::new(p.t_end, 1e-4).unwrap();
    let per_path: Vec<(Option<f64>, Vec<f64>)> = (0..10_000u64)
        .into_par_iter()
        .map(|i| {
            let path = simulate_d2(&p, &grid, &mut RngStream::new(404, i)).unwrap();
            let ev = path.events.entries();
            let rains = ev
                .iter()
                .filter(|e| e.rain_start < p.t_end - 1.0)
                .filter_map(|e| e.rain_duration())
                .collect();
            (ev.first().map(|e| e.dry_duration()), rains)
        })
        .collect();
    let dry: Vec<f64> = per_path.iter().filter_map(|v| v.0).collect();
    let rain: Vec<f64> = per_path.iter().flat_map(|v| v.1.iter().copied()).collect();
    let law = FirstPassageLaw::first_dry(&p).unwrap();
    // an onset is only observed when it falls before T
    let f_t = law.cdf(p.t_end);
    let ks = ks_distance(&dry, |t| law.cdf(t) / f_t);
    let mean = pairwise_sum(&rain) / rain.len() as f64;
    let target = p.b * p.epsilon / p.r;
    let e = rel(mean, target);
    outcome(
        ks < 0.02 && e < 0.03,
        format!("KS = {ks:.4} over {} dry durations, rain mean {mean:.5} vs {target} ({e:.2e})", dry.len()),
    )
}

fn describe(rep: &ConvergenceReport) -> String {
    let errs: Vec<String> = rep
        .errors
        .iter()
        .map(|e| format!("{:.3e}±{:.1e}", e.mean, e.std_err))
        .collect();
    format!(
        "{}: slope {:.3} (r² {:.3}), decreasing {}, errors [{}]",
        rep.label,
        rep.fit.slope,
        rep.fit.r_squared,
        rep.is_decreasing(1.0),
        errs.join(", ")
    )
}

fn rate_ok(rep: &ConvergenceReport) -> bool {
    rep.is_decreasing(1.0) && (0.7..=1.3).contains(&rep.fit.slope)
}

fn sweep() -> (SweepResult, Duration) {
    let start = Instant::now();
    let cfg = SweepConfig::new(ModelParams::default(), DEFAULT_SWEEP.to_vec(), 2000, 1e-4, 42);
    (run_sweep(&cfg).unwrap(), start.elapsed())
}

fn c5_theorem1(res: &SweepResult, elapsed: Duration) -> Outcome {
    outcome(rate_ok(&res.theorem1) && within(elapsed, 1800.0), describe(&res.theorem1))
}

fn c6_theorem2(res: &SweepResult, elapsed: Duration) -> Outcome {
    let ok = res.theorem2.iter().all(rate_ok) && within(elapsed, 1800.0);
    let lines: Vec<String> = res.theorem2.iter().map(describe).collect();
    outcome(ok, lines.join("; "))
}

/// Coarse-grains FP cell masses and Monte Carlo samples onto bins of `k`
/// cells and returns the L1 distance between the two histograms.
fn histogram_l1(field: &DensityField, samples: &[f64], k: usize) -> f64 {
    let g = field.grid;
    let n = g.n_cells();
    let n_bins = n.div_ceil(k);
    let total = field.total();
    let mut fp = vec![0.0; n_bins + 1];
    for (j, v) in total.iter().enumerate() {
        fp[j / k] += v * g.dq;
    }
    let mut mc = vec![0.0; n_bins + 1];
    let w = 1.0 / samples.len() as f64;
    for &q in samples {
        let x = (q - g.q_min) / g.dq;
        // last slot collects anything outside the solver domain
        let slot = if x < 0.0 || x >= n as f64 { n_bins } else { x as usize / k };
        mc[slot] += w;
    }
    fp.iter().zip(&mc).map(|(a, b)| (a - b).abs()).sum()
}

fn c7_coupled_fp() -> Outcome {
    let p = ModelParams::default();
    let g = GridSpec::coupled_default(&p).unwrap();
    let init = DensityField::default_initial(&p, g).unwrap();
    let traj = solve_coupled_fp(&p, &g, 20.0, &init, 10).unwrap();
    let drift = traj.snapshots.iter().map(|s| (s.mass() - 1.0).abs()).fold(0.0, f64::max);
    let (stat, _) = solve_coupled_stationary(&p, &g.with_dt(0.02), &init, 1e-10, 500.0).unwrap();

    let mc_grid = SimGrid::new(p.t_end, 1e-3).unwrap().with_bridge_correction(true);
    let q: Vec<f64> = (0..100_000u64)
        .into_par_iter()
        .map(|i| d2_terminal_state(&p, &mc_grid, &mut RngStream::new(707, i)).unwrap().0)
        .collect();
    // bins of width 0.05
    let k = (0.05 / g.dq).round() as usize;
    let l1 = histogram_l1(&stat, &q, k);
    let stat_drift = (stat.mass() - 1.0).abs();
    outcome(
        drift < 1e-6 && stat_drift < 1e-6 && l1 < 0.05,
        format!("max |M(t)-1| = {drift:.1e} over {} snapshots, stationary {stat_drift:.1e}, histogram L1 = {l1:.4}", traj.snapshots.len()),
    )
}

fn c8_boundary_layer() -> Outcome {
    let p = ModelParams::default().with_epsilon(0.01);
    let g = GridSpec::coupled_default(&p).unwrap().with_dt(0.02);
    let init = DensityField::default_initial(&p, g).unwrap();
    let (stat, flux) = solve_coupled_stationary(&p, &g, &init, 1e-10, 500.0).unwrap();
    let prof = boundary_layer_profile(&p, flux.f0_at_b).unwrap();
    let lo = 2.0 * prof.layer_width();
    let sup = stat
        .centers()
        .iter()
        .zip(&stat.rho1)
        .filter(|(q, _)| **q >= lo && **q <= p.b / 2.0)
        .map(|(&q, &v)| rel(v, prof.density(q)))
        .fold(0.0, f64::max);
    let fe = rel(flux.f1_at_0, flux.f0_at_b);
    outcome(
        sup < 0.1 && fe < 0.05,
        format!("sup relative error {sup:.2e} on [{lo}, {}], flux mismatch {fe:.2e}", p.b / 2.0),
    )
}

/// Stationary density of the teleporting limit: `A e^{2mq/D0^2}` for q < 0,
/// `(1/b)(1 - e^{2m(q-b)/D0^2})` on (0, b), with `A = (1 - e^{-2mb/D0^2})/b`.
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

fn c9_limit_fp() -> Outcome {
    let p = ModelParams::default();
    let g = GridSpec::limit_default(&p).unwrap();
    let init = DensityField::gaussian(g, p.b, 0.0, p.b / 20.0).unwrap();
    let traj = solve_limit_fp(&p, &g, 10.0, &init, 10).unwrap();
    let drift = traj.snapshots.iter().map(|s| (s.mass() - 1.0).abs()).fold(0.0, f64::max);
    let (stat, _) = solve_limit_stationary(&p, &g.with_dt(0.01), &init, 1e-11, 500.0).unwrap();
    let l1: f64 = stat
        .centers()
        .iter()
        .zip(&stat.rho0)
        .map(|(&q, &v)| (v - limit_stationary_exact(&p, q)).abs() * g.dq)
        .sum();
    let stat_drift = (stat.mass() - 1.0).abs();
    outcome(
        l1 < 1e-2 && drift < 1e-6 && stat_drift < 1e-6,
        format!("L1 = {l1:.2e}, max |M(t)-1| = {drift:.1e}, stationary {stat_drift:.1e}"),
    )
}

fn c10_rain_rate() -> Outcome {
    let p = ModelParams::default().with_horizon(110.0);
    let grid = SimGrid::new(p.t_end, 1e-4).unwrap();
    let rain_time: Vec<f64> = (0..400u64)
        .into_par_iter()
        .map(|i| {
            let incs = gaussian_increments(&mut RngStream::new(1010, i), grid.n_steps(), grid.dt());
            let mut st = D2Stepper::new(&p, &grid);
            let (mut total, mut since) = (0.0, 0.0);
            for &dw in &incs {
                st.advance(dw, 1.0, |s| match s {
                    Switch::RainStart(t) => since = t,
                    Switch::RainEnd(t) => total += t - since,
                })
                .unwrap();
            }
            if st.raining {
                total += p.t_end - since;
            }
            total
        })
        .collect();
    let rate = p.rain_rate() * pairwise_sum(&rain_time) / (rain_time.len() as f64 * p.t_end);
    let (_, target) = stationary_rain_fraction(&p);
    let e = rel(rate, target);
    outcome(e < 0.02, format!("rain amount rate {rate:.5} vs {target:.5} ({e:.2e})"))
}

fn report(n: usize, name: &str, limit_s: f64, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let el = start.elapsed();
    let pass = o.pass && within(el, limit_s);
    print_line(n, name, pass, el, &o.detail);
    pass
}

fn print_line(n: usize, name: &str, pass: bool, el: Duration, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n:>2} {tag} {name} [{:.1} s]: {detail}", el.as_secs_f64());
}

fn main() {
    let mut ok = vec![
        report(1, "rain-duration moments", 10.0, c1_rain_moments),
        report(2, "Laplace transform identity", 1.0, c2_laplace),
        report(3, "event-count tail bound", 30.0, c3_tail_bound),
        report(4, "discretized event laws", 300.0, c4_event_laws),
    ];

    let (res, el) = sweep();
    let o5 = c5_theorem1(&res, el);
    print_line(5, "moisture pathwise convergence", o5.pass, el, &o5.detail);
    let o6 = c6_theorem2(&res, el);
    print_line(6, "rain pairing convergence", o6.pass, el, &o6.detail);
    for rep in &res.aligned {
        println!("             diagnostic (dry-clock pairing) {}", describe(rep));
    }
    println!("             diagnostic count-mismatch frequency {:?}", res.mismatch_frequency);
    ok.push(o5.pass);
    ok.push(o6.pass);

    ok.push(report(7, "coupled Fokker-Planck solver", 300.0, c7_coupled_fp));
    ok.push(report(8, "boundary-layer profile", 600.0, c8_boundary_layer));
    ok.push(report(9, "limit Fokker-Planck solver", f64::INFINITY, c9_limit_fp));
    ok.push(report(10, "long-run rain amount rate", 120.0, c10_rain_rate));

    let failed: Vec<usize> = ok.iter().enumerate().filter(|(_, p)| !**p).map(|(i, _)| i + 1).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        ok.len() - failed.len(),
        ok.len(),
        if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
