//! Command-line experiment runner.
//!
//! Configuration comes from (lowest to highest precedence) built-in
//! defaults, a `key = value` file given with `--config`, the
//! `RAINLIMIT_OUTPUT_DIR` environment variable (output directory only),
//! `key=value` arguments and named flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::converge::{run_sweep, theorem1_experiment, ConvergenceReport, SweepConfig};
use crate::error::{Error, Result};
use crate::fokker_planck::{
    boundary_layer_profile, solve_coupled_fp, solve_coupled_stationary, solve_limit_fp, solve_limit_stationary,
    stationary_rain_fraction, DensityField, FluxPair, GridSpec,
};
use crate::model::{ModelParams, DEFAULT_SWEEP};
use crate::path::{EventLog, PathRecord};
use crate::renewal::{minimized_tail_bound, renewal_simulate_exact};
use crate::rng::RngStream;
use crate::simulate::{default_dt, simulate_d2, simulate_limit, SimGrid};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const OUTPUT_DIR_ENV: &str = "RAINLIMIT_OUTPUT_DIR";

/// Exit status for numerical failures.
pub const EXIT_NUMERICAL: i32 = 1;
/// Exit status for usage and validation errors.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Simulate,
    Renewal,
    FokkerPlanck,
    Converge,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Renewal => "renewal",
            Command::FokkerPlanck => "fokker-planck",
            Command::Converge => "converge",
        }
    }

    fn default_n_paths(self) -> usize {
        match self {
            Command::Simulate => 1,
            Command::Renewal => 10_000,
            Command::FokkerPlanck => 1,
            Command::Converge => 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Process {
    /// Finite-epsilon model.
    Finite,
    /// Spike-train limit.
    Limit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Solver {
    Coupled,
    Limit,
}

/// Density-solver settings; `None` selects the solver's default grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeConfig {
    pub solver: Solver,
    pub dq: Option<f64>,
    pub dt: Option<f64>,
    pub q_min: Option<f64>,
    pub q_max: Option<f64>,
    pub snapshots: usize,
    pub stationary: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub command: Command,
    pub params: ModelParams,
    /// SDE time step; `None` uses the default for the parameters.
    pub dt: Option<f64>,
    pub bridge_correction: bool,
    pub sweep: Vec<f64>,
    pub n_paths: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads, 0 = one per core.
    pub threads: usize,
    /// Write every `stride`-th time step to `paths.csv`.
    pub stride: usize,
    pub process: Process,
    pub pde: PdeConfig,
    pub theorem: u8,
    pub tail_check: bool,
    /// Number of runs whose event logs go to `events.csv`.
    pub max_logged: usize,
}

impl ExperimentConfig {
    pub fn defaults(command: Command) -> Self {
        Self {
            command,
            params: ModelParams::default(),
            dt: None,
            bridge_correction: false,
            sweep: DEFAULT_SWEEP.to_vec(),
            n_paths: command.default_n_paths(),
            seed: 0,
            output_dir: PathBuf::from("out"),
            threads: 0,
            stride: 10,
            process: Process::Finite,
            pde: PdeConfig {
                solver: Solver::Coupled,
                dq: None,
                dt: None,
                q_min: None,
                q_max: None,
                snapshots: 10,
                stationary: true,
            },
            theorem: 1,
            tail_check: false,
            max_logged: 100,
        }
    }

    /// Applies one `key = value` setting; `origin` names where it came from
    /// for error messages.
    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<()> {
        let value = value.trim();
        let bad = |what: &str| Error::Config(format!("{origin}: malformed {what} `{value}` for `{key}`"));
        let float = || value.parse::<f64>().map_err(|_| bad("number"));
        let int = || value.parse::<u64>().map_err(|_| bad("integer"));
        let flag = || match value {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(bad("boolean")),
        };
        let opt_float = || {
            if value.is_empty() || value == "auto" {
                Ok(None)
            } else {
                float().map(Some)
            }
        };
        match key {
            "m" => self.params.m = float()?,
            "r" => self.params.r = float()?,
            "epsilon" => self.params.epsilon = float()?,
            "D0" | "d0" => self.params.d0 = float()?,
            "D1" | "d1" => self.params.d1 = float()?,
            "b" => self.params.b = float()?,
            "T" | "t_end" => self.params.t_end = float()?,
            "q0" => self.params.q0 = float()?,
            "dt" => self.dt = opt_float()?,
            "bridge" => self.bridge_correction = flag()?,
            "sweep" => {
                self.sweep = value
                    .split(',')
                    .map(|s| s.trim().parse::<f64>().map_err(|_| bad("epsilon list")))
                    .collect::<Result<_>>()?
            }
            "n_paths" => self.n_paths = int()? as usize,
            "seed" => self.seed = int()?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "threads" => self.threads = int()? as usize,
            "stride" => self.stride = int()? as usize,
            "process" => self.process = Process::from_str(value, false).map_err(|_| bad("process"))?,
            "solver" => self.pde.solver = Solver::from_str(value, false).map_err(|_| bad("solver"))?,
            "dq" => self.pde.dq = opt_float()?,
            "dt_pde" => self.pde.dt = opt_float()?,
            "q_min" => self.pde.q_min = opt_float()?,
            "q_max" => self.pde.q_max = opt_float()?,
            "snapshots" => self.pde.snapshots = int()? as usize,
            "stationary" => self.pde.stationary = flag()?,
            "theorem" => self.theorem = int()? as u8,
            "tail_check" => self.tail_check = flag()?,
            "max_logged" => self.max_logged = int()? as usize,
            _ => return Err(Error::Config(format!("{origin}: unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Checks every field; model parameters go through the core validation.
    pub fn validate(&self) -> Result<()> {
        match self.command {
            Command::Simulate => {
                self.params.validate_degenerate()?;
            }
            Command::FokkerPlanck if self.pde.solver == Solver::Limit => {
                self.params.validate()?;
            }
            _ => {
                self.params.validate()?;
            }
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) || !dt.is_finite() {
                return Err(Error::InvalidParam(format!("dt > 0 violated ({dt})")));
            }
        }
        if self.n_paths == 0 {
            return Err(Error::InvalidParam("n_paths ≥ 1 violated".into()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidParam("stride ≥ 1 violated".into()));
        }
        if self.command == Command::Converge {
            if !(1..=2).contains(&self.theorem) {
                return Err(Error::InvalidParam(format!("theorem must be 1 or 2 (got {})", self.theorem)));
            }
            self.sweep_config().validate()?;
        }
        if self.command == Command::FokkerPlanck && self.pde.snapshots == 0 {
            return Err(Error::InvalidParam("snapshots ≥ 1 violated".into()));
        }
        Ok(())
    }

    /// The settings as `key = value` lines accepted by [`parse_config`].
    pub fn to_config_lines(&self) -> String {
        let p = &self.params;
        let opt = |v: Option<f64>| v.map_or("auto".to_string(), fmt_f64);
        let sweep: Vec<String> = self.sweep.iter().map(|&e| fmt_f64(e)).collect();
        let mut s = String::new();
        for (k, v) in [
            ("m", fmt_f64(p.m)),
            ("r", fmt_f64(p.r)),
            ("epsilon", fmt_f64(p.epsilon)),
            ("D0", fmt_f64(p.d0)),
            ("D1", fmt_f64(p.d1)),
            ("b", fmt_f64(p.b)),
            ("T", fmt_f64(p.t_end)),
            ("q0", fmt_f64(p.q0)),
            ("dt", opt(self.dt)),
            ("bridge", self.bridge_correction.to_string()),
            ("sweep", sweep.join(",")),
            ("n_paths", self.n_paths.to_string()),
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("threads", self.threads.to_string()),
            ("stride", self.stride.to_string()),
            ("process", enum_name(self.process)),
            ("solver", enum_name(self.pde.solver)),
            ("dq", opt(self.pde.dq)),
            ("dt_pde", opt(self.pde.dt)),
            ("q_min", opt(self.pde.q_min)),
            ("q_max", opt(self.pde.q_max)),
            ("snapshots", self.pde.snapshots.to_string()),
            ("stationary", self.pde.stationary.to_string()),
            ("theorem", self.theorem.to_string()),
            ("tail_check", self.tail_check.to_string()),
            ("max_logged", self.max_logged.to_string()),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn sim_grid(&self) -> Result<SimGrid> {
        let dt = self.dt.unwrap_or_else(|| default_dt(&self.params));
        Ok(SimGrid::new(self.params.t_end, dt)?.with_bridge_correction(self.bridge_correction))
    }

    fn sweep_config(&self) -> SweepConfig {
        let dt = self.dt.unwrap_or(1e-4 * self.params.b * self.params.b / self.params.max_noise().powi(2));
        let mut cfg = SweepConfig::new(self.params, self.sweep.clone(), self.n_paths, dt, self.seed);
        cfg.bridge_correction = self.bridge_correction;
        cfg
    }

    fn pde_grid(&self) -> Result<GridSpec> {
        let p = &self.params;
        let base = match self.pde.solver {
            Solver::Coupled => GridSpec::coupled_default(p)?,
            Solver::Limit => GridSpec::limit_default(p)?,
        };
        GridSpec::new(
            self.pde.q_min.unwrap_or(base.q_min),
            self.pde.q_max.unwrap_or(base.q_max),
            self.pde.dq.unwrap_or(base.dq),
            self.pde.dt.unwrap_or(base.dt),
        )
    }
}

fn enum_name<T: ValueEnum>(v: T) -> String {
    v.to_possible_value().map(|p| p.get_name().to_string()).unwrap_or_default()
}

/// Floats are written with 17 significant digits so they re-parse exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Builds a config for `command` from an optional file, the output-directory
/// environment override and command-line `(key, value, origin)` settings.
/// Files may contain `[section]` headers; only keys outside a section or in
/// `[config]` are read, so a `summary.txt` can be fed back in.
pub fn parse_config(
    command: Command,
    file: Option<&Path>,
    env_output_dir: Option<&str>,
    overrides: &[(String, String, String)],
) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::defaults(command);
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        apply_config_text(&mut cfg, &text, &path.display().to_string())?;
    }
    if let Some(dir) = env_output_dir {
        cfg.set("output_dir", dir, OUTPUT_DIR_ENV)?;
    }
    for (k, v, origin) in overrides {
        cfg.set(k, v, origin)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_config_text(cfg: &mut ExperimentConfig, text: &str, name: &str) -> Result<()> {
    let mut active = true;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            active = &line[1..line.len() - 1] == "config";
            continue;
        }
        if !active {
            continue;
        }
        let origin = format!("{name} line {}", i + 1);
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin}: expected `key = value`")))?;
        cfg.set(k.trim(), v, &origin)?;
    }
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "rainlimit", version, about = "Rain-model simulations, density solvers and convergence experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Simulate sample paths of the finite model or its limit.
    Simulate(CommonArgs),
    /// Exact renewal runs from the first-passage laws.
    Renewal {
        #[command(flatten)]
        common: CommonArgs,
        /// Compare the event-count distribution with the exponential tail bound.
        #[arg(long)]
        tail_check: bool,
    },
    /// Evolve the state densities with the finite-volume solvers.
    FokkerPlanck {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        solver: Option<Solver>,
    },
    /// Epsilon sweep of the moisture (1) or rain (2) convergence experiment.
    Converge {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        theorem: u8,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub m: Option<String>,
    #[arg(long)]
    pub r: Option<String>,
    #[arg(long)]
    pub epsilon: Option<String>,
    #[arg(long = "d0", alias = "D0")]
    pub d0: Option<String>,
    #[arg(long = "d1", alias = "D1")]
    pub d1: Option<String>,
    #[arg(long)]
    pub b: Option<String>,
    /// Time horizon.
    #[arg(long = "t-end", alias = "T")]
    pub t_end: Option<String>,
    #[arg(long)]
    pub q0: Option<String>,
    #[arg(long)]
    pub dt: Option<String>,
    /// Comma-separated, strictly decreasing epsilon values.
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(long)]
    pub n_paths: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub output_dir: Option<String>,
    /// Worker threads, 0 = one per core.
    #[arg(long)]
    pub threads: Option<String>,
    /// Extra `key=value` settings.
    #[arg(value_name = "KEY=VALUE")]
    pub settings: Vec<String>,
}

impl CommonArgs {
    fn overrides(&self) -> Result<Vec<(String, String, String)>> {
        let mut out = Vec::new();
        for s in &self.settings {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("argument `{s}`: expected KEY=VALUE")))?;
            out.push((k.trim().to_string(), v.to_string(), format!("argument `{s}`")));
        }
        let flags = [
            ("m", "--m", &self.m),
            ("r", "--r", &self.r),
            ("epsilon", "--epsilon", &self.epsilon),
            ("D0", "--d0", &self.d0),
            ("D1", "--d1", &self.d1),
            ("b", "--b", &self.b),
            ("T", "--t-end", &self.t_end),
            ("q0", "--q0", &self.q0),
            ("dt", "--dt", &self.dt),
            ("sweep", "--sweep", &self.sweep),
            ("n_paths", "--n-paths", &self.n_paths),
            ("seed", "--seed", &self.seed),
            ("output_dir", "--output-dir", &self.output_dir),
            ("threads", "--threads", &self.threads),
        ];
        for (key, flag, v) in flags {
            if let Some(v) = v {
                out.push((key.to_string(), v.clone(), format!("flag {flag}")));
            }
        }
        Ok(out)
    }
}

/// Resolves the parsed command line into a validated config.
pub fn config_from_cli(cli: &Cli, env_output_dir: Option<&str>) -> Result<ExperimentConfig> {
    let (command, common, extra): (Command, &CommonArgs, Vec<(String, String, String)>) = match &cli.command {
        CliCommand::Simulate(c) => (Command::Simulate, c, vec![]),
        CliCommand::Renewal { common, tail_check } => {
            let extra = if *tail_check {
                vec![("tail_check".into(), "true".into(), "flag --tail-check".into())]
            } else {
                vec![]
            };
            (Command::Renewal, common, extra)
        }
        CliCommand::FokkerPlanck { common, solver } => {
            let extra = solver
                .map(|s| vec![("solver".into(), enum_name(s), "flag --solver".into())])
                .unwrap_or_default();
            (Command::FokkerPlanck, common, extra)
        }
        CliCommand::Converge { common, theorem } => (
            Command::Converge,
            common,
            vec![("theorem".into(), theorem.to_string(), "flag --theorem".into())],
        ),
    };
    let mut overrides = common.overrides()?;
    overrides.extend(extra);
    parse_config(command, common.config.as_deref(), env_output_dir, &overrides)
}

/// Entry point used by the binary; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let env_dir = std::env::var(OUTPUT_DIR_ENV).ok();
    let result = config_from_cli(&cli, env_dir.as_deref()).and_then(|cfg| run(&cfg));
    match result {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidParam(_) => EXIT_USAGE,
        _ => EXIT_NUMERICAL,
    }
}

/// Runs the experiment and returns the files written.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match cfg.command {
        Command::Simulate => run_simulate(cfg),
        Command::Renewal => run_renewal(cfg),
        Command::FokkerPlanck => run_fokker_planck(cfg),
        Command::Converge => run_converge(cfg),
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

struct Summary {
    text: String,
}

impl Summary {
    fn new(cfg: &ExperimentConfig) -> Self {
        let mut text = String::new();
        let _ = writeln!(text, "[run]\nversion = {VERSION}\ncommand = {}\n", cfg.command.name());
        let _ = writeln!(text, "[config]\n{}", cfg.to_config_lines());
        text.push_str("[results]\n");
        Self { text }
    }

    fn put(&mut self, key: &str, value: impl std::fmt::Display) {
        let _ = writeln!(self.text, "{key} = {value}");
    }

    fn write(self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("summary.txt");
        fs::write(&path, self.text)?;
        Ok(path)
    }
}

fn write_events<'a>(
    path: &Path,
    label: &str,
    logs: impl IntoIterator<Item = (usize, &'a EventLog)>,
) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([label, "i", "tau_d", "tau_r", "rain_start"]).map_err(csv_err)?;
    for (k, log) in logs {
        for (i, e) in log.entries().iter().enumerate() {
            let tau_r = e.rain_duration().unwrap_or(f64::NAN);
            w.write_record([
                k.to_string(),
                i.to_string(),
                fmt_f64(e.dry_duration()),
                fmt_f64(tau_r),
                fmt_f64(e.rain_start),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn run_simulate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let p = cfg.params;
    let grid = cfg.sim_grid()?;
    if p.d0 > 0.0 {
        grid.validate_for(&p)?;
    }
    let paths: Vec<PathRecord> = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut stream = RngStream::new(cfg.seed, i);
            match cfg.process {
                Process::Finite => simulate_d2(&p, &grid, &mut stream),
                Process::Limit => simulate_limit(&p, &grid, &mut stream),
            }
        })
        .collect::<Result<_>>()?;
    let dir = &cfg.output_dir;
    let paths_csv = dir.join("paths.csv");
    let mut w = csv_writer(&paths_csv)?;
    w.write_record(["path", "t", "q", "sigma", "E", "P"]).map_err(csv_err)?;
    for (i, path) in paths.iter().enumerate() {
        let last = path.len() - 1;
        for k in (0..path.len()).filter(|&k| k % cfg.stride == 0 || k == last) {
            w.write_record([
                i.to_string(),
                fmt_f64(path.times[k]),
                fmt_f64(path.q[k]),
                fmt_f64(path.sigma.value_at(k)),
                fmt_f64(path.e[k]),
                fmt_f64(path.p[k]),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    let events_csv = dir.join("events.csv");
    write_events(&events_csv, "path", paths.iter().map(|p| &p.events).enumerate())?;

    let mut s = Summary::new(cfg);
    s.put("dt", fmt_f64(grid.dt()));
    s.put("n_steps", grid.n_steps());
    let counts: Vec<usize> = paths.iter().map(|p| p.events.len()).collect();
    s.put("mean_rain_onsets", counts.iter().sum::<usize>() as f64 / counts.len() as f64);
    let rain_time: f64 = paths.iter().map(|p| p.events.total_rain_time()).sum::<f64>() / paths.len() as f64;
    s.put("mean_rain_time_fraction", rain_time / p.t_end);
    let dec = paths.iter().map(|x| x.decomposition_error(p.b)).fold(0.0, f64::max);
    s.put("max_decomposition_error", format!("{dec:e}"));
    Ok(vec![paths_csv, events_csv, s.write(dir)?])
}

/// Per-N empirical frequencies of the event count with the tail bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct TailRow {
    pub n: usize,
    pub frequency: f64,
    pub bound: f64,
    pub cycles_frequency: f64,
    pub sharp_bound: f64,
}

/// Tabulates `P(N(T) = n)` for onsets and completed cycles over `logs` and
/// pairs each with the minimized bounds.
pub fn tail_table(p: &ModelParams, logs: &[EventLog]) -> Result<Vec<TailRow>> {
    let counts: Vec<usize> = logs.iter().map(|l| l.count(p.t_end)).collect();
    let cycles: Vec<usize> = logs.iter().map(|l| l.completed_cycles()).collect();
    let n_max = counts.iter().chain(&cycles).copied().max().unwrap_or(0);
    let total = logs.len() as f64;
    (0..=n_max)
        .map(|n| {
            Ok(TailRow {
                n,
                frequency: counts.iter().filter(|&&c| c == n).count() as f64 / total,
                bound: minimized_tail_bound(p, n, false)?,
                cycles_frequency: cycles.iter().filter(|&&c| c == n).count() as f64 / total,
                sharp_bound: minimized_tail_bound(p, n, true)?,
            })
        })
        .collect()
}

fn run_renewal(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let p = cfg.params;
    let logs: Vec<EventLog> = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|i| renewal_simulate_exact(&p, &mut RngStream::new(cfg.seed, i)))
        .collect::<Result<_>>()?;
    let dir = &cfg.output_dir;
    let events_csv = dir.join("events.csv");
    write_events(&events_csv, "run", logs.iter().take(cfg.max_logged).enumerate())?;
    let mut files = vec![events_csv];

    let mut s = Summary::new(cfg);
    let mean = logs.iter().map(|l| l.count(p.t_end)).sum::<usize>() as f64 / logs.len() as f64;
    s.put("mean_event_count", fmt_f64(mean));
    let (fraction, rate) = stationary_rain_fraction(&p);
    s.put("renewal_rain_fraction", fmt_f64(fraction));
    s.put("renewal_rain_rate", fmt_f64(rate));
    let rain: f64 = logs.iter().map(|l| l.total_rain_time()).sum();
    s.put("empirical_rain_fraction", fmt_f64(rain / (p.t_end * logs.len() as f64)));
    if cfg.tail_check {
        let rows = tail_table(&p, &logs)?;
        let tail_csv = dir.join("tail.csv");
        let mut w = csv_writer(&tail_csv)?;
        w.write_record(["N", "frequency", "bound", "cycles_frequency", "sharp_bound"])
            .map_err(csv_err)?;
        for r in &rows {
            w.write_record([
                r.n.to_string(),
                fmt_f64(r.frequency),
                fmt_f64(r.bound),
                fmt_f64(r.cycles_frequency),
                fmt_f64(r.sharp_bound),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        let holds = rows.iter().all(|r| r.frequency <= r.bound);
        let sharp_holds = rows.iter().all(|r| r.cycles_frequency <= r.sharp_bound);
        s.put("tail_bound_holds", holds);
        s.put("sharp_tail_bound_holds", sharp_holds);
        files.push(tail_csv);
    }
    files.push(s.write(dir)?);
    Ok(files)
}

fn write_density(path: &Path, f: &DensityField) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["q", "rho0", "rho1", "t"]).map_err(csv_err)?;
    for ((q, a), b) in f.centers().iter().zip(&f.rho0).zip(&f.rho1) {
        w.write_record([fmt_f64(*q), fmt_f64(*a), fmt_f64(*b), fmt_f64(f.t)])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn run_fokker_planck(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let p = cfg.params;
    let grid = cfg.pde_grid()?;
    let init = DensityField::default_initial(&p, grid)?;
    let n_steps = (p.t_end / grid.dt).ceil() as usize;
    let every = (n_steps / cfg.pde.snapshots).max(1);
    let traj = match cfg.pde.solver {
        Solver::Coupled => solve_coupled_fp(&p, &grid, p.t_end, &init, every)?,
        Solver::Limit => solve_limit_fp(&p, &grid, p.t_end, &init, every)?,
    };
    let dir = &cfg.output_dir;
    let mut files = Vec::new();
    for (k, snap) in traj.snapshots.iter().enumerate() {
        let path = dir.join(format!("density_{k:05}.csv"));
        write_density(&path, snap)?;
        files.push(path);
    }
    let mut s = Summary::new(cfg);
    s.put("q_min", fmt_f64(grid.q_min));
    s.put("q_max", fmt_f64(grid.q_max));
    s.put("dq", fmt_f64(grid.dq));
    s.put("dt_pde", fmt_f64(grid.dt));
    let drift = traj.snapshots.iter().map(|f| (f.mass() - 1.0).abs()).fold(0.0, f64::max);
    s.put("max_mass_error", format!("{drift:e}"));
    put_fluxes(&mut s, "final", traj.fluxes.last().copied());
    if cfg.pde.stationary {
        let tol = 1e-10;
        let max_time = 1e3 * (p.b / p.m.max(f64::MIN_POSITIVE)).max(1.0);
        let (st, flux) = match cfg.pde.solver {
            Solver::Coupled => solve_coupled_stationary(&p, &grid, &init, tol, max_time)?,
            Solver::Limit => solve_limit_stationary(&p, &grid, &init, tol, max_time)?,
        };
        let path = dir.join("density_stationary.csv");
        write_density(&path, &st)?;
        files.push(path);
        put_fluxes(&mut s, "stationary", Some(flux));
        s.put("stationary_mass_rain", fmt_f64(st.mass1()));
        if cfg.pde.solver == Solver::Coupled {
            s.put("flux_mismatch", format!("{:e}", (flux.f1_at_0 - flux.f0_at_b).abs() / flux.f0_at_b));
            if let Ok(prof) = boundary_layer_profile(&p, flux.f0_at_b) {
                let lw = prof.layer_width();
                let worst = st
                    .centers()
                    .iter()
                    .zip(&st.rho1)
                    .filter(|(&q, _)| q >= 2.0 * lw && q <= 0.5 * p.b)
                    .map(|(&q, &v)| (v - prof.density(q)).abs() / prof.density(q))
                    .fold(0.0, f64::max);
                s.put("layer_profile_max_rel_error", format!("{worst:e}"));
            }
        }
    }
    files.push(s.write(dir)?);
    Ok(files)
}

fn put_fluxes(s: &mut Summary, tag: &str, f: Option<FluxPair>) {
    if let Some(f) = f {
        s.put(&format!("{tag}_f0_at_b"), fmt_f64(f.f0_at_b));
        s.put(&format!("{tag}_f1_at_0"), fmt_f64(f.f1_at_0));
    }
}

fn write_convergence(path: &Path, reports: &[&ConvergenceReport]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["measure", "epsilon", "mean_sq_error", "std_err", "n_paths"])
        .map_err(csv_err)?;
    for rep in reports {
        for (e, est) in rep.epsilons.iter().zip(&rep.errors) {
            w.write_record([
                rep.label.clone(),
                fmt_f64(*e),
                fmt_f64(est.mean),
                fmt_f64(est.std_err),
                est.n.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn put_fit(s: &mut Summary, rep: &ConvergenceReport) {
    s.put(&format!("{}_slope", rep.label), fmt_f64(rep.fit.slope));
    s.put(&format!("{}_intercept", rep.label), fmt_f64(rep.fit.intercept));
    s.put(&format!("{}_r_squared", rep.label), fmt_f64(rep.fit.r_squared));
    let ex: Vec<String> = rep.excluded.iter().map(|e| e.to_string()).collect();
    s.put(&format!("{}_excluded", rep.label), ex.join(","));
    s.put(&format!("{}_decreasing", rep.label), rep.is_decreasing(1.0));
}

fn run_converge(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let sweep = cfg.sweep_config();
    let dir = &cfg.output_dir;
    let csv_path = dir.join("convergence.csv");
    let mut s = Summary::new(cfg);
    s.put("dt", fmt_f64(sweep.dt));
    if cfg.theorem == 1 {
        let rep = theorem1_experiment(&sweep)?;
        write_convergence(&csv_path, &[&rep])?;
        put_fit(&mut s, &rep);
    } else {
        let res = run_sweep(&sweep)?;
        let reps: Vec<&ConvergenceReport> = res.theorem2.iter().chain(&res.aligned).collect();
        write_convergence(&csv_path, &reps)?;
        for rep in reps {
            put_fit(&mut s, rep);
        }
        let mm: Vec<String> = res.mismatch_frequency.iter().map(|&f| fmt_f64(f)).collect();
        s.put("count_mismatch_frequency", mm.join(","));
    }
    Ok(vec![csv_path, s.write(dir)?])
}
