//! Command-line front end.
//!
//! Every command writes CSV to `--out` and prints a one-line summary. A
//! `--config` file of `key = value` lines supplies defaults that explicit
//! flags override. Exit codes: 0 success, 1 numerical failure, 2 usage error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgAction, CommandFactory, Parser, ValueEnum};

use crate::baseline::ImplicitSolverConfig;
use crate::diagnostics::{check_suite, CheckConfig};
use crate::error::{Error, Result};
use crate::harness::{
    cpu_compare, make_scheme, ms_error, track, write_order_csv, write_timing_csv,
    write_track_csv, ConvergenceSpec, TimingSpec, TrackSpec,
};
use crate::modelzoo::example_by_name;
use crate::nls::{nls_initial, simulate_nls, NlsLattice, NlsRecipe};
use crate::noise::NoiseGrid;
use crate::project::{simulate, ProjectionConfig, SchemeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Integrate one path and write the trajectory.
    Run,
    /// Mean-square convergence order.
    Order,
    /// Single-threaded wall time per scheme and step.
    Timing,
    /// Relative invariant deviations along one path.
    Track,
    /// Stochastic cubic Schrödinger simulation.
    Nls,
    /// Gradient, symplecticity and invariant checks for an example.
    Check,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Run => "run",
            Command::Order => "order",
            Command::Timing => "timing",
            Command::Track => "track",
            Command::Nls => "nls",
            Command::Check => "check",
        }
    }
}

/// Parsed and validated command line.
#[derive(Debug, Clone, PartialEq, Parser)]
#[command(name = "stosym", version, about, args_override_self = true)]
pub struct RunConfig {
    #[arg(value_enum)]
    pub command: Command,

    /// Example system: ex1, ex2, ex3 or ex4.
    #[arg(long, default_value = "ex1")]
    pub example: String,

    /// Scheme: ses-sp-1, ses-sp-2, midpoint or sympeuler.
    #[arg(long, default_value = "ses-sp-1")]
    pub scheme: SchemeId,

    /// Comma-separated schemes for order and timing.
    /// [default: --scheme for order, ses-sp-1,ses-sp-2,midpoint for timing]
    #[arg(long, action = ArgAction::Set, value_delimiter = ',')]
    pub schemes: Vec<SchemeId>,

    /// Step size for run, track, check and nls. [default: 1e-2, nls 1e-3]
    #[arg(long)]
    pub dt: Option<f64>,

    /// Comma-separated step sizes for order and timing.
    /// [default: 2^-5..2^-8 for order, 2^-8,2^-10 for timing]
    #[arg(long, action = ArgAction::Set, value_delimiter = ',')]
    pub dt_list: Vec<f64>,

    /// Reference step for order and timing errors. [default: min(dt-list)/16]
    #[arg(long)]
    pub ref_dt: Option<f64>,

    #[arg(long, default_value_t = 1.0)]
    pub t_end: f64,

    /// Monte Carlo paths for order and timing.
    #[arg(long, default_value_t = 200)]
    pub paths: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Path index within the seed for single-path commands.
    #[arg(long, default_value_t = 0)]
    pub path: u64,

    /// Restraint constant, or a comma-separated list with one per channel.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_value = "0")]
    pub gamma: Vec<f64>,

    /// Noise intensity. [default: per example]
    #[arg(long)]
    pub c: Option<f64>,

    /// Tolerance of the projection and implicit solves.
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,

    #[arg(long, default_value_t = 50)]
    pub max_iter: usize,

    /// Output CSV. [default: <command>.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Comma-separated invariants for track. [default: all of the example]
    #[arg(long, action = ArgAction::Set, value_delimiter = ',')]
    pub invariant: Vec<String>,

    /// Worker threads for order. [default: all cores]
    #[arg(long)]
    pub threads: Option<usize>,

    /// NLS lattice spacing on [-5, 5].
    #[arg(long, default_value_t = 1.0)]
    pub h: f64,

    /// NLS noise modes.
    #[arg(long, default_value_t = 10)]
    pub modes: usize,

    /// NLS recipe: ab, ba, strang-ab or strang-ba.
    #[arg(long, default_value = "strang-ab")]
    pub recipe: NlsRecipe,

    /// Skip the projection in nls and report the copy separation instead.
    #[arg(long)]
    pub unprojected: bool,

    /// Steps per invariant run in check.
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,

    /// File of `key = value` lines; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Why parsing stopped.
#[derive(Debug)]
pub enum ParseFailure {
    /// Help or version text; exit 0.
    Info(String),
    /// Invalid input; exit 2.
    Usage(String),
}

impl RunConfig {
    fn validate(&self) -> std::result::Result<(), String> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if let Some(dt) = self.dt {
            if !positive(dt) {
                return Err(format!("--dt must be positive, got {dt}"));
            }
            if self.t_end < dt {
                return Err(format!("--t-end {} is shorter than --dt {dt}", self.t_end));
            }
        }
        if !positive(self.t_end) {
            return Err(format!("--t-end must be positive, got {}", self.t_end));
        }
        if let Some(v) = self.dt_list.iter().find(|v| !positive(**v)) {
            return Err(format!("--dt-list entries must be positive, got {v}"));
        }
        if let Some(r) = self.ref_dt.filter(|r| !positive(*r)) {
            return Err(format!("--ref-dt must be positive, got {r}"));
        }
        if self.paths == 0 {
            return Err("--paths must be at least 1".into());
        }
        if !positive(self.tol) {
            return Err(format!("--tol must be positive, got {}", self.tol));
        }
        if self.max_iter == 0 || self.steps == 0 || self.modes == 0 {
            return Err("--max-iter, --steps and --modes must be at least 1".into());
        }
        if self.threads == Some(0) {
            return Err("--threads must be at least 1".into());
        }
        if !positive(self.h) {
            return Err(format!("--h must be positive, got {}", self.h));
        }
        if self.gamma.iter().any(|g| !g.is_finite()) {
            return Err("--gamma must be finite".into());
        }
        Ok(())
    }

    fn projection(&self) -> ProjectionConfig {
        ProjectionConfig {
            tol: self.tol,
            max_iter: self.max_iter,
            ..Default::default()
        }
    }

    fn solver(&self) -> ImplicitSolverConfig {
        ImplicitSolverConfig {
            tol: self.tol,
            max_iter: self.max_iter,
            ..Default::default()
        }
    }

    fn out_path(&self) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("{}.csv", self.command.name())))
    }
}

/// Turns `key = value` lines into flags. Boolean flags take `true`/`false`.
fn config_args(text: &str) -> std::result::Result<Vec<String>, String> {
    let cmd = RunConfig::command();
    let mut args = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| format!("config line {}: expected key = value", n + 1))?;
        let key = key.replace('_', "-");
        let flag = cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| format!("config line {}: unknown key '{key}'", n + 1))?;
        if flag.get_action().takes_values() {
            args.push(format!("--{key}"));
            args.push(value.to_string());
        } else {
            match value {
                "true" => args.push(format!("--{key}")),
                "false" => {}
                _ => return Err(format!("config line {}: '{key}' takes true or false", n + 1)),
            }
        }
    }
    Ok(args)
}

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let a = a.to_string_lossy();
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Parses `argv` (program name first), merging any `--config` file.
pub fn parse_args<I, T>(argv: I) -> std::result::Result<RunConfig, ParseFailure>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let mut merged: Vec<OsString> = argv.iter().take(1).cloned().collect();
    if let Some(path) = config_path(&argv) {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| ParseFailure::Usage(format!("config {}: {e}", path.display())))?;
        merged.extend(config_args(&text).map_err(ParseFailure::Usage)?.into_iter().map(Into::into));
    }
    merged.extend(argv.iter().skip(1).cloned());
    let cfg = RunConfig::try_parse_from(merged).map_err(|e| {
        use clap::error::ErrorKind;
        match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ParseFailure::Info(e.to_string()),
            _ => ParseFailure::Usage(e.to_string()),
        }
    })?;
    cfg.validate().map_err(ParseFailure::Usage)?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| {
        Error::Io(format!("{}: {e}", path.display()))
    })?))
}

fn steps_for(t_end: f64, dt: f64) -> Result<usize> {
    let n = (t_end / dt).round();
    if n < 1.0 || ((n * dt - t_end).abs() > 1e-9 * t_end) {
        return Err(Error::InvalidArgument(format!(
            "t_end {t_end} is not a whole multiple of dt {dt}"
        )));
    }
    Ok(n as usize)
}

fn sci(v: f64) -> String {
    format!("{v:.3e}")
}

fn run_path(cfg: &RunConfig) -> Result<String> {
    let ex = example_by_name(&cfg.example, cfg.c)?;
    let model = ex.model.as_ref();
    let dt = cfg.dt.unwrap_or(1e-2);
    let steps = steps_for(cfg.t_end, dt)?;
    let scheme = make_scheme(cfg.scheme, model, &cfg.gamma, cfg.projection(), cfg.solver())?;
    let grid = NoiseGrid::build(cfg.seed, cfg.path, model.noise_channels(), 0.0, cfg.t_end, 2 * steps)?;
    let traj = simulate(&scheme, model, &ex.z0, &grid, 2, steps, &[])?;
    let d = model.dim();
    let mut w = create(&cfg.out_path())?;
    let cols: Vec<String> = (0..d)
        .map(|i| format!("x{i}"))
        .chain((0..d).map(|i| format!("y{i}")))
        .collect();
    writeln!(w, "t,{},defect", cols.join(","))?;
    for ((t, z), defect) in traj.times.iter().zip(&traj.states).zip(&traj.defect) {
        write!(w, "{t:.16e}")?;
        for v in z.x.iter().chain(&z.y) {
            write!(w, ",{v:.16e}")?;
        }
        writeln!(w, ",{defect:.16e}")?;
    }
    w.flush()?;
    let last = traj.states.last().expect("trajectory holds the initial state");
    let max_defect = traj.defect.iter().cloned().fold(0.0, f64::max);
    Ok(format!(
        "run {} {}: {steps} steps, final x={:?} y={:?}, max defect {}",
        ex.name,
        cfg.scheme,
        last.x,
        last.y,
        sci(max_defect)
    ))
}

fn run_order(cfg: &RunConfig) -> Result<String> {
    let ex = example_by_name(&cfg.example, cfg.c)?;
    let schemes = if cfg.schemes.is_empty() {
        vec![cfg.scheme]
    } else {
        cfg.schemes.clone()
    };
    let dts = if cfg.dt_list.is_empty() {
        (5..=8).map(|k| 2f64.powi(-k)).collect()
    } else {
        cfg.dt_list.clone()
    };
    let mut reports = Vec::new();
    for id in schemes {
        let mut spec = ConvergenceSpec::new(id, cfg.t_end, dts.clone(), cfg.paths, cfg.seed);
        spec.ref_dt = cfg.ref_dt;
        spec.gamma = cfg.gamma.clone();
        spec.projection = cfg.projection();
        spec.solver = cfg.solver();
        spec.threads = cfg.threads;
        reports.push(ms_error(&ex, &spec)?);
    }
    write_order_csv(&reports, create(&cfg.out_path())?)?;
    let slopes: Vec<String> = reports
        .iter()
        .map(|r| format!("{} slope {:.3}", r.scheme, r.slope))
        .collect();
    Ok(format!("order {}: {}", ex.name, slopes.join(", ")))
}

fn run_timing(cfg: &RunConfig) -> Result<String> {
    let ex = example_by_name(&cfg.example, cfg.c)?;
    let schemes = if cfg.schemes.is_empty() {
        vec![SchemeId::SesSp1, SchemeId::SesSp2, SchemeId::Midpoint]
    } else {
        cfg.schemes.clone()
    };
    let dt_list = if cfg.dt_list.is_empty() {
        vec![2f64.powi(-8), 2f64.powi(-10)]
    } else {
        cfg.dt_list.clone()
    };
    let finest = dt_list.iter().cloned().fold(f64::INFINITY, f64::min);
    let spec = TimingSpec {
        schemes,
        dt_list,
        paths: cfg.paths,
        t_end: cfg.t_end,
        seed: cfg.seed,
        gamma: cfg.gamma.clone(),
        ref_dt: Some(cfg.ref_dt.unwrap_or(finest / 16.0)),
        projection: cfg.projection(),
        solver: cfg.solver(),
    };
    let rows = cpu_compare(&ex, &spec)?;
    write_timing_csv(&rows, create(&cfg.out_path())?)?;
    let cells: Vec<String> = rows
        .iter()
        .map(|r| format!("{}@{} {:.3}s", r.scheme, r.dt, r.wall_s))
        .collect();
    Ok(format!("timing {}: {}", ex.name, cells.join(", ")))
}

fn run_track(cfg: &RunConfig) -> Result<String> {
    let ex = example_by_name(&cfg.example, cfg.c)?;
    let invariants = if cfg.invariant.is_empty() {
        ex.invariant_names().into_iter().map(String::from).collect()
    } else {
        cfg.invariant.clone()
    };
    let spec = TrackSpec {
        scheme: cfg.scheme,
        t_end: cfg.t_end,
        dt: cfg.dt.unwrap_or(1e-2),
        seed: cfg.seed,
        path: cfg.path,
        gamma: cfg.gamma.clone(),
        invariants,
        projection: cfg.projection(),
        solver: cfg.solver(),
    };
    let series = track(&ex, &spec)?;
    write_track_csv(&series, create(&cfg.out_path())?)?;
    let cells: Vec<String> = series
        .relative
        .iter()
        .map(|(n, _)| format!("{n} {}", sci(series.max_abs(n).unwrap_or(0.0))))
        .collect();
    Ok(format!(
        "track {} {}: max |relative deviation| {}",
        ex.name,
        cfg.scheme,
        cells.join(", ")
    ))
}

fn fields_path(summary: &Path) -> PathBuf {
    let stem = summary
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "nls".into());
    summary.with_file_name(format!("{stem}_fields.csv"))
}

fn run_nls(cfg: &RunConfig) -> Result<String> {
    let lattice = NlsLattice::standard(cfg.h, cfg.modes)?;
    let dt = cfg.dt.unwrap_or(1e-3);
    let steps = steps_for(cfg.t_end, dt)?;
    let fps = cfg.recipe.composition(cfg.modes).min_fine_per_step().max(2);
    let grid = NoiseGrid::build(cfg.seed, cfg.path, cfg.modes, 0.0, cfg.t_end, fps * steps)?;
    let s0 = nls_initial(&lattice);
    let run = simulate_nls(
        &lattice,
        cfg.recipe,
        &s0,
        &grid,
        fps,
        steps,
        &cfg.projection(),
        !cfg.unprojected,
    )?;
    let out = cfg.out_path();
    run.write_summary(create(&out)?)?;
    let fields = fields_path(&out);
    run.write_fields(&lattice, create(&fields)?)?;
    let max_defect = run.defect.iter().cloned().fold(0.0, f64::max);
    Ok(format!(
        "nls {}: {} nodes, {steps} steps, max relative charge drift {}, max defect {}",
        cfg.recipe,
        lattice.len(),
        sci(run.max_relative_charge_drift()),
        sci(max_defect)
    ))
}

fn run_check(cfg: &RunConfig) -> Result<(String, bool)> {
    let ex = example_by_name(&cfg.example, cfg.c)?;
    let check = CheckConfig {
        gamma: cfg.gamma.clone(),
        dt: cfg.dt.unwrap_or(1e-2),
        steps: cfg.steps,
        seed: cfg.seed,
        projection: cfg.projection().with_tol(cfg.tol.min(1e-13)),
        ..Default::default()
    };
    let items = check_suite(&ex, &check)?;
    let mut w = create(&cfg.out_path())?;
    writeln!(w, "check,value,threshold,passed")?;
    for i in &items {
        writeln!(w, "{},{:.16e},{:.16e},{}", i.name, i.value, i.threshold, i.passed)?;
    }
    w.flush()?;
    let failed: Vec<&str> = items.iter().filter(|i| !i.passed).map(|i| i.name.as_str()).collect();
    let summary = if failed.is_empty() {
        format!("check {}: {}/{} passed", ex.name, items.len(), items.len())
    } else {
        format!(
            "check {}: {}/{} passed, failed: {}",
            ex.name,
            items.len() - failed.len(),
            items.len(),
            failed.join(", ")
        )
    };
    Ok((summary, failed.is_empty()))
}

fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        1
    } else {
        2
    }
}

/// Runs a validated configuration; returns the process exit code.
pub fn dispatch(cfg: &RunConfig) -> i32 {
    let outcome = match cfg.command {
        Command::Run => run_path(cfg).map(|s| (s, true)),
        Command::Order => run_order(cfg).map(|s| (s, true)),
        Command::Timing => run_timing(cfg).map(|s| (s, true)),
        Command::Track => run_track(cfg).map(|s| (s, true)),
        Command::Nls => run_nls(cfg).map(|s| (s, true)),
        Command::Check => run_check(cfg),
    };
    match outcome {
        Ok((summary, ok)) => {
            println!("{summary}");
            if ok {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::AtPath { source, .. } | Error::AtStep { source, .. } = &e {
                if let Error::ProjectionNoConvergence { report } = source.as_ref() {
                    eprintln!("last projection report: {report:?}");
                }
            }
            exit_code(&e)
        }
    }
}

/// Parses `argv` and runs it; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match parse_args(argv) {
        Ok(cfg) => dispatch(&cfg),
        Err(ParseFailure::Info(text)) => {
            print!("{text}");
            0
        }
        Err(ParseFailure::Usage(msg)) => {
            eprintln!("{}", msg.trim_end());
            2
        }
    }
}
