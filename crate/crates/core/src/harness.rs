//! Mean-square convergence, timing and invariant tracking.
//!
//! Every path draws one noise grid at half the reference step. The reference
//! solution and each coarse solution run on coarsenings of that same grid, so
//! errors measure the discretization alone.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::diagnostics::linear_trend;
use crate::error::{Error, Result};
use crate::model::{HamiltonianModel, PhaseState};
use crate::modelzoo::ExampleSpec;
use crate::noise::NoiseGrid;
use crate::project::{simulate, ProjectionConfig, Scheme, SchemeId};
use crate::baseline::ImplicitSolverConfig;

/// Fine intervals per step on every grid the harness builds.
const FINE_PER_STEP: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceSpec {
    pub scheme: SchemeId,
    pub t_end: f64,
    pub dt_list: Vec<f64>,
    /// Defaults to min(dt_list)/16.
    pub ref_dt: Option<f64>,
    pub paths: usize,
    pub seed: u64,
    /// Restraint constants; a single value applies to every channel.
    pub gamma: Vec<f64>,
    pub projection: ProjectionConfig,
    pub solver: ImplicitSolverConfig,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl ConvergenceSpec {
    pub fn new(scheme: SchemeId, t_end: f64, dt_list: Vec<f64>, paths: usize, seed: u64) -> Self {
        ConvergenceSpec {
            scheme,
            t_end,
            dt_list,
            ref_dt: None,
            paths,
            seed,
            gamma: vec![0.0],
            projection: ProjectionConfig::default(),
            solver: ImplicitSolverConfig::default(),
            threads: None,
        }
    }

    pub fn reference_dt(&self) -> f64 {
        self.ref_dt
            .unwrap_or_else(|| self.dt_list.iter().cloned().fold(f64::INFINITY, f64::min) / 16.0)
    }

    /// Checks the grid arithmetic and returns (reference steps, coarsening factor per dt).
    pub fn layout(&self) -> Result<(usize, Vec<usize>)> {
        if self.paths < 2 {
            return Err(Error::InvalidArgument("at least two paths are needed".into()));
        }
        if self.dt_list.is_empty() {
            return Err(Error::InvalidArgument("empty dt list".into()));
        }
        let ref_dt = self.reference_dt();
        let n_ref = whole_ratio(self.t_end, ref_dt, "t_end / ref_dt")?;
        let factors = self
            .dt_list
            .iter()
            .map(|&dt| {
                let f = whole_ratio(dt, ref_dt, "dt / ref_dt")?;
                if n_ref % f != 0 {
                    return Err(Error::InvalidArgument(format!("dt {dt} does not divide t_end")));
                }
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((n_ref, factors))
    }

    fn scheme_for(&self, model: &dyn HamiltonianModel) -> Result<Scheme> {
        make_scheme(self.scheme, model, &self.gamma, self.projection, self.solver)
    }
}

pub fn make_scheme(
    id: SchemeId,
    model: &dyn HamiltonianModel,
    gamma: &[f64],
    projection: ProjectionConfig,
    solver: ImplicitSolverConfig,
) -> Result<Scheme> {
    let channels = model.noise_channels() + 1;
    let gammas = match gamma {
        [g] => vec![*g; channels],
        _ if gamma.len() == channels => gamma.to_vec(),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "expected 1 or {channels} restraint constants, got {}",
                gamma.len()
            )))
        }
    };
    Ok(Scheme::new(id, gammas)?
        .with_projection(projection)
        .with_solver(solver))
}

fn whole_ratio(a: f64, b: f64, what: &str) -> Result<usize> {
    if !(a > 0.0) || !(b > 0.0) {
        return Err(Error::InvalidArgument(format!("{what}: steps must be positive")));
    }
    let r = a / b;
    let n = r.round();
    if n < 1.0 || (r - n).abs() > 1e-9 * n {
        return Err(Error::InvalidArgument(format!("{what} = {r} is not a whole number")));
    }
    Ok(n as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderRow {
    pub dt: f64,
    pub err_x: f64,
    pub err_y: f64,
    /// √E(‖ΔX‖² + ‖ΔY‖²).
    pub err: f64,
    /// Jackknife standard error of `err`.
    pub err_se: f64,
    /// Compute time summed over paths.
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderReport {
    pub scheme: SchemeId,
    pub rows: Vec<OrderRow>,
    pub slope: f64,
    pub slope_x: f64,
    pub slope_y: f64,
    /// Slope between the coarsest and finest step.
    pub endpoint_slope: f64,
}

/// Least-squares slope of ln(err) against ln(dt).
pub fn fit_order(dts: &[f64], errs: &[f64]) -> f64 {
    let lx: Vec<f64> = dts.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = errs.iter().map(|v| v.ln()).collect();
    linear_trend(&lx, &ly).0
}

/// Leave-one-out estimate of the standard error of √mean(samples).
pub fn jackknife_rms_se(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return f64::NAN;
    }
    let total: f64 = samples.iter().sum();
    let loo: Vec<f64> = samples
        .iter()
        .map(|s| ((total - s) / (n - 1) as f64).max(0.0).sqrt())
        .collect();
    let mean = loo.iter().sum::<f64>() / n as f64;
    let ss: f64 = loo.iter().map(|v| (v - mean) * (v - mean)).sum();
    ((n - 1) as f64 / n as f64 * ss).sqrt()
}

struct PathErrors {
    sq_x: Vec<f64>,
    sq_y: Vec<f64>,
    seconds: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn run_path(
    spec: &ConvergenceSpec,
    model: &dyn HamiltonianModel,
    scheme: &Scheme,
    z0: &PhaseState,
    n_ref: usize,
    factors: &[usize],
    path: u64,
) -> Result<PathErrors> {
    let ref_dt = spec.reference_dt();
    let grid = NoiseGrid::build(
        spec.seed,
        path,
        model.noise_channels(),
        0.0,
        spec.t_end,
        n_ref * FINE_PER_STEP,
    )?;
    let at = |dt: f64| move |e: Error| Error::AtPath {
        path,
        dt,
        source: Box::new(e),
    };
    let reference = scheme
        .integrate(model, z0, &grid, FINE_PER_STEP, n_ref)
        .map_err(at(ref_dt))?;
    let mut out = PathErrors {
        sq_x: Vec::with_capacity(factors.len()),
        sq_y: Vec::with_capacity(factors.len()),
        seconds: Vec::with_capacity(factors.len()),
    };
    for (&f, &dt) in factors.iter().zip(&spec.dt_list) {
        let coarse = grid.coarsen(f)?;
        let start = Instant::now();
        let z = scheme
            .integrate(model, z0, &coarse, FINE_PER_STEP, n_ref / f)
            .map_err(at(dt))?;
        out.seconds.push(start.elapsed().as_secs_f64());
        out.sq_x.push(sq_dist(&z.x, &reference.x));
        out.sq_y.push(sq_dist(&z.y, &reference.y));
    }
    Ok(out)
}

fn in_pool<T: Send>(threads: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(job()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
            Ok(pool.install(job))
        }
    }
}

/// Root-mean-square errors against a fine-step reference of the same scheme.
pub fn ms_error(example: &ExampleSpec, spec: &ConvergenceSpec) -> Result<OrderReport> {
    let (n_ref, factors) = spec.layout()?;
    let model = example.model.as_ref();
    let scheme = spec.scheme_for(model)?;
    let per_path: Vec<Result<PathErrors>> = in_pool(spec.threads, || {
        (0..spec.paths as u64)
            .into_par_iter()
            .map(|p| run_path(spec, model, &scheme, &example.z0, n_ref, &factors, p))
            .collect()
    })?;
    let per_path: Vec<PathErrors> = per_path.into_iter().collect::<Result<_>>()?;

    let n = per_path.len() as f64;
    let mut rows = Vec::with_capacity(factors.len());
    for (k, &dt) in spec.dt_list.iter().enumerate() {
        let sx: Vec<f64> = per_path.iter().map(|p| p.sq_x[k]).collect();
        let sy: Vec<f64> = per_path.iter().map(|p| p.sq_y[k]).collect();
        let both: Vec<f64> = sx.iter().zip(&sy).map(|(a, b)| a + b).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
        rows.push(OrderRow {
            dt,
            err_x: mean(&sx).sqrt(),
            err_y: mean(&sy).sqrt(),
            err: mean(&both).sqrt(),
            err_se: jackknife_rms_se(&both),
            wall_s: per_path.iter().map(|p| p.seconds[k]).sum(),
        });
    }
    let dts: Vec<f64> = rows.iter().map(|r| r.dt).collect();
    let col = |f: fn(&OrderRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let errs = col(|r| r.err);
    let endpoint_slope = if rows.len() >= 2 {
        let (a, b) = (&rows[0], &rows[rows.len() - 1]);
        (a.err / b.err).ln() / (a.dt / b.dt).ln()
    } else {
        f64::NAN
    };
    Ok(OrderReport {
        scheme: spec.scheme,
        slope: fit_order(&dts, &errs),
        slope_x: fit_order(&dts, &col(|r| r.err_x)),
        slope_y: fit_order(&dts, &col(|r| r.err_y)),
        endpoint_slope,
        rows,
    })
}

/// Writes order reports as one CSV.
pub fn write_order_csv<W: Write>(reports: &[OrderReport], mut w: W) -> Result<()> {
    writeln!(w, "scheme,dt,err_x,err_y,err,err_se,wall_s,slope")?;
    for rep in reports {
        for r in &rep.rows {
            writeln!(
                w,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                rep.scheme, r.dt, r.err_x, r.err_y, r.err, r.err_se, r.wall_s, rep.slope
            )?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub scheme: SchemeId,
    pub dt: f64,
    pub err: f64,
    pub wall_s: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingSpec {
    pub schemes: Vec<SchemeId>,
    pub dt_list: Vec<f64>,
    pub paths: usize,
    pub t_end: f64,
    pub seed: u64,
    /// One value, or one per channel.
    pub gamma: Vec<f64>,
    /// Reference step for the error column; `None` skips errors.
    pub ref_dt: Option<f64>,
    pub projection: ProjectionConfig,
    pub solver: ImplicitSolverConfig,
}

/// Single-threaded wall time per scheme and step size on shared noise.
///
/// Noise generation and the reference solves are outside the timed region.
pub fn cpu_compare(example: &ExampleSpec, spec: &TimingSpec) -> Result<Vec<TimingRow>> {
    let model = example.model.as_ref();
    let m = model.noise_channels();
    let ref_dt = spec
        .ref_dt
        .unwrap_or_else(|| spec.dt_list.iter().cloned().fold(f64::INFINITY, f64::min));
    let n_base = whole_ratio(spec.t_end, ref_dt, "t_end / ref_dt")?;
    let grids = (0..spec.paths as u64)
        .map(|p| NoiseGrid::build(spec.seed, p, m, 0.0, spec.t_end, n_base * FINE_PER_STEP))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &id in &spec.schemes {
        let scheme = make_scheme(id, model, &spec.gamma, spec.projection, spec.solver)?;
        let references = match spec.ref_dt {
            Some(_) => Some(
                grids
                    .iter()
                    .map(|g| scheme.integrate(model, &example.z0, g, FINE_PER_STEP, n_base))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        for &dt in &spec.dt_list {
            let f = whole_ratio(dt, ref_dt, "dt / ref_dt")?;
            let steps = n_base / f;
            let coarse = grids
                .iter()
                .map(|g| g.coarsen(f))
                .collect::<Result<Vec<_>>>()?;
            let start = Instant::now();
            let finals = coarse
                .iter()
                .map(|g| scheme.integrate(model, &example.z0, g, FINE_PER_STEP, steps))
                .collect::<Result<Vec<_>>>()?;
            let wall_s = start.elapsed().as_secs_f64();
            let err = match &references {
                Some(refs) => {
                    let ms: f64 = finals
                        .iter()
                        .zip(refs)
                        .map(|(z, r)| sq_dist(&z.x, &r.x) + sq_dist(&z.y, &r.y))
                        .sum::<f64>()
                        / finals.len() as f64;
                    ms.sqrt()
                }
                None => f64::NAN,
            };
            rows.push(TimingRow {
                scheme: id,
                dt,
                err,
                wall_s,
                steps,
            });
        }
    }
    Ok(rows)
}

pub fn write_timing_csv<W: Write>(rows: &[TimingRow], mut w: W) -> Result<()> {
    writeln!(w, "scheme,dt,err,wall_s")?;
    for r in rows {
        writeln!(w, "{},{:.16e},{:.16e},{:.16e}", r.scheme, r.dt, r.err, r.wall_s)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackSpec {
    pub scheme: SchemeId,
    pub t_end: f64,
    pub dt: f64,
    pub seed: u64,
    pub path: u64,
    /// One value, or one per channel.
    pub gamma: Vec<f64>,
    pub invariants: Vec<String>,
    pub projection: ProjectionConfig,
    pub solver: ImplicitSolverConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackSeries {
    pub times: Vec<f64>,
    /// Relative deviation (I(t) − I(0))/|I(0)| per invariant.
    pub relative: Vec<(String, Vec<f64>)>,
    pub defect: Vec<f64>,
}

impl TrackSeries {
    pub fn max_abs(&self, name: &str) -> Option<f64> {
        self.relative
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.iter().fold(0.0, |m, x| f64::max(m, x.abs())))
    }
}

/// Invariant deviations and copy separation along one path.
pub fn track(example: &ExampleSpec, spec: &TrackSpec) -> Result<TrackSeries> {
    let model = example.model.as_ref();
    let steps = whole_ratio(spec.t_end, spec.dt, "t_end / dt")?;
    let trackers = spec
        .invariants
        .iter()
        .map(|n| example.tracker(n))
        .collect::<Result<Vec<_>>>()?;
    let scheme = make_scheme(spec.scheme, model, &spec.gamma, spec.projection, spec.solver)?;
    let grid = NoiseGrid::build(
        spec.seed,
        spec.path,
        model.noise_channels(),
        0.0,
        spec.t_end,
        steps * FINE_PER_STEP,
    )?;
    let traj = simulate(&scheme, model, &example.z0, &grid, FINE_PER_STEP, steps, &trackers)?;
    let relative = spec
        .invariants
        .iter()
        .map(|n| (n.clone(), traj.relative(n).unwrap_or_default()))
        .collect();
    Ok(TrackSeries {
        times: traj.times,
        relative,
        defect: traj.defect,
    })
}

pub fn write_track_csv<W: Write>(series: &TrackSeries, mut w: W) -> Result<()> {
    let names: Vec<&str> = series.relative.iter().map(|(n, _)| n.as_str()).collect();
    writeln!(w, "t,{},defect", names.join(","))?;
    for i in 0..series.times.len() {
        write!(w, "{:.16e}", series.times[i])?;
        for (_, v) in &series.relative {
            write!(w, ",{:.16e}", v[i])?;
        }
        writeln!(w, ",{:.16e}", series.defect[i])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelzoo::{make_example1, make_example3};

    #[test]
    fn two_point_slope() {
        assert!((fit_order(&[0.1, 0.01], &[0.1, 0.01]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jackknife_of_constant_samples_is_zero() {
        assert_eq!(jackknife_rms_se(&[4.0; 10]), 0.0);
        assert!(jackknife_rms_se(&[1.0, 9.0, 4.0]) > 0.0);
    }

    #[test]
    fn layout_checks() {
        let mut spec = ConvergenceSpec::new(SchemeId::SesSp1, 1.0, vec![0.25, 0.125], 4, 1);
        assert_eq!(spec.layout().unwrap(), (128, vec![32, 16]));
        spec.ref_dt = Some(0.1);
        assert!(spec.layout().is_err());
        spec.ref_dt = None;
        spec.paths = 1;
        assert!(spec.layout().is_err());
    }

    #[test]
    fn error_vanishes_at_the_reference_step() {
        let ex = make_example1(0.15).unwrap();
        for id in [SchemeId::SesSp1, SchemeId::SesSp2, SchemeId::Midpoint] {
            let mut spec = ConvergenceSpec::new(id, 0.25, vec![1.0 / 64.0, 1.0 / 256.0], 4, 3);
            spec.ref_dt = Some(1.0 / 256.0);
            spec.gamma = vec![0.01];
            let rep = ms_error(&ex, &spec).unwrap();
            assert_eq!(rep.rows[1].err, 0.0, "{id}");
            assert!(rep.rows[0].err > 0.0);
        }
    }

    #[test]
    fn reports_are_reproducible_across_thread_counts() {
        let ex = make_example1(0.15).unwrap();
        let mut spec = ConvergenceSpec::new(SchemeId::SesSp1, 0.25, vec![1.0 / 16.0, 1.0 / 32.0], 8, 9);
        spec.threads = Some(1);
        let a = ms_error(&ex, &spec).unwrap();
        spec.threads = Some(3);
        let b = ms_error(&ex, &spec).unwrap();
        let strip = |r: &OrderReport| r.rows.iter().map(|x| (x.err_x, x.err_y, x.err)).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.slope.to_bits(), b.slope.to_bits());
    }

    #[test]
    fn constant_functional_tracks_zero() {
        let mut ex = make_example1(0.1).unwrap();
        ex.invariants.push(("one", std::sync::Arc::new(|_: &PhaseState| Ok(1.0))));
        let spec = TrackSpec {
            scheme: SchemeId::SesSp1,
            t_end: 0.1,
            dt: 0.01,
            seed: 1,
            path: 0,
            gamma: vec![0.0],
            invariants: vec!["one".into()],
            projection: ProjectionConfig::default(),
            solver: ImplicitSolverConfig::default(),
        };
        let s = track(&ex, &spec).unwrap();
        assert_eq!(s.max_abs("one"), Some(0.0));
        assert_eq!(s.times.len(), 11);
        let mut bad = spec.clone();
        bad.invariants = vec!["nope".into()];
        assert!(matches!(track(&ex, &bad), Err(Error::UnknownName(_))));
    }

    #[test]
    fn timing_rows_are_positive() {
        let ex = make_example3(0.5).unwrap();
        let spec = TimingSpec {
            schemes: vec![SchemeId::SesSp1, SchemeId::Midpoint],
            dt_list: vec![1.0 / 8.0, 1.0 / 16.0],
            paths: 2,
            t_end: 0.5,
            seed: 4,
            gamma: vec![0.0],
            ref_dt: None,
            projection: ProjectionConfig::default(),
            solver: ImplicitSolverConfig::default(),
        };
        let rows = cpu_compare(&ex, &spec).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.wall_s > 0.0));
        let mut buf = Vec::new();
        write_timing_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }
}
