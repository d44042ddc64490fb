//! Symmetric projection onto the diagonal of the doubled phase space.
//!
//! A one-step map 𝓕 on (X, U, Y, V) is turned into a map on (X, Y) by
//! solving A𝓕(ξ + Aᵀλ) + 2λ = 0 for λ, where A = [I −I 0 0; 0 0 I −I]
//! and ξ is the lifted state. The result 𝓕(ξ + Aᵀλ) + Aᵀλ lies in ker(A).

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::baseline::{midpoint_step, symplectic_euler_step, ImplicitSolverConfig};
use crate::error::{check_dim, Error, Result};
use crate::model::{norm2, ExtendedState, HamiltonianModel, PhaseState};
use crate::noise::NoiseGrid;
use crate::splitflow::{CompositionRecipe, ExtendedMap, ExtendedStep};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionConfig {
    /// Stop once successive iterates differ by less than this (Euclidean norm).
    pub tol: f64,
    pub max_iter: usize,
    /// Retry with a finite-difference Newton solve when the simplified iteration fails.
    pub fallback_full_newton: bool,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            tol: 1e-12,
            max_iter: 50,
            fallback_full_newton: true,
        }
    }
}

impl ProjectionConfig {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("projection tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("projection max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProjectionReport {
    pub lambda: Vec<f64>,
    pub iterations: usize,
    pub final_delta: f64,
    /// ‖A𝓕(ξ + Aᵀλ)‖, the copy separation before correction.
    pub defect_pre: f64,
    /// ‖A𝓕(ξ + Aᵀλ) + 2λ‖, the copy separation left after correction.
    pub defect_post: f64,
    pub used_fallback: bool,
}

/// (x, y) ↦ (x, x, y, y).
pub fn lift(z: &PhaseState) -> ExtendedState {
    ExtendedState {
        x: z.x.clone(),
        u: z.x.clone(),
        y: z.y.clone(),
        v: z.y.clone(),
    }
}

/// The mean of the two copies.
pub fn restrict(s: &ExtendedState) -> PhaseState {
    let mean = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| 0.5 * (p + q)).collect();
    PhaseState {
        x: mean(&s.x, &s.u),
        y: mean(&s.y, &s.v),
    }
}

/// A·s = (x − u, y − v).
pub fn constraint(s: &ExtendedState) -> Vec<f64> {
    let mut out = vec![0.0; 2 * s.dim()];
    constraint_into(s, &mut out);
    out
}

fn constraint_into(s: &ExtendedState, out: &mut [f64]) {
    let d = s.dim();
    for i in 0..d {
        out[i] = s.x[i] - s.u[i];
        out[d + i] = s.y[i] - s.v[i];
    }
}

/// s + Aᵀλ.
pub fn shift(s: &mut ExtendedState, lambda: &[f64]) {
    let d = s.dim();
    let (lx, ly) = lambda.split_at(d);
    for i in 0..d {
        s.x[i] += lx[i];
        s.u[i] -= lx[i];
        s.y[i] += ly[i];
        s.v[i] -= ly[i];
    }
}

fn lifted_shift_into(z: &PhaseState, lambda: &[f64], out: &mut ExtendedState) {
    out.x.copy_from_slice(&z.x);
    out.u.copy_from_slice(&z.x);
    out.y.copy_from_slice(&z.y);
    out.v.copy_from_slice(&z.y);
    shift(out, lambda);
}

/// Solves λ = λ − ¼(a(λ) + 2λ) by fixed-point iteration from λ = 0, where
/// `eval(λ, out)` writes a(λ) = A𝓕(ξ + Aᵀλ) into `out`. On success the
/// last call to `eval` was made at the returned λ.
pub fn simplified_newton<F>(
    n: usize,
    mut eval: F,
    cfg: &ProjectionConfig,
    scale: f64,
) -> Result<(Vec<f64>, ProjectionReport)>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    cfg.validate()?;
    let bound = 1e6 * (1.0 + scale);
    let mut lambda = vec![0.0; n];
    let mut a_f = vec![0.0; n];
    let mut report = ProjectionReport::default();
    for k in 1..=cfg.max_iter {
        eval(&lambda, &mut a_f)?;
        let mut step_sq = 0.0;
        let mut res_sq = 0.0;
        let mut next_sq = 0.0;
        for i in 0..n {
            let r = a_f[i] + 2.0 * lambda[i];
            res_sq += r * r;
            let delta = -0.25 * r;
            step_sq += delta * delta;
            let next = lambda[i] + delta;
            next_sq += next * next;
        }
        report.iterations = k;
        report.final_delta = step_sq.sqrt();
        report.defect_pre = norm2(&a_f);
        report.defect_post = res_sq.sqrt();
        if !report.final_delta.is_finite() {
            report.lambda = lambda;
            return Err(Error::ProjectionNoConvergence {
                report: Box::new(report),
            });
        }
        if report.final_delta < cfg.tol {
            report.lambda = lambda.clone();
            return Ok((lambda, report));
        }
        for i in 0..n {
            lambda[i] -= 0.25 * (a_f[i] + 2.0 * lambda[i]);
        }
        if next_sq.sqrt() > bound {
            report.lambda = lambda;
            return Err(Error::ProjectionNoConvergence {
                report: Box::new(report),
            });
        }
    }
    report.lambda = lambda;
    Err(Error::ProjectionNoConvergence {
        report: Box::new(report),
    })
}

/// Newton's method on R(λ) = a(λ) + 2λ with a forward-difference Jacobian.
/// Same contract on `eval` as [`simplified_newton`].
fn full_newton<F>(
    n: usize,
    mut eval: F,
    cfg: &ProjectionConfig,
    scale: f64,
) -> Result<(Vec<f64>, ProjectionReport)>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let bound = 1e6 * (1.0 + scale);
    let mut lambda = vec![0.0; n];
    let mut report = ProjectionReport {
        used_fallback: true,
        ..Default::default()
    };
    let mut a_f = vec![0.0; n];
    let mut a_p = vec![0.0; n];
    for k in 1..=cfg.max_iter {
        eval(&lambda, &mut a_f)?;
        let r: Vec<f64> = a_f.iter().zip(&lambda).map(|(a, l)| a + 2.0 * l).collect();
        let mut jac = DMatrix::<f64>::zeros(n, n);
        let mut probe = lambda.clone();
        for j in 0..n {
            let h = 1e-7 * (1.0 + lambda[j].abs());
            probe[j] = lambda[j] + h;
            eval(&probe, &mut a_p)?;
            for i in 0..n {
                jac[(i, j)] = (a_p[i] + 2.0 * probe[i] - r[i]) / h;
            }
            probe[j] = lambda[j];
        }
        let delta = jac
            .lu()
            .solve(&(-DVector::from_vec(r.clone())))
            .ok_or_else(|| Error::ProjectionNoConvergence {
                report: Box::new(report.clone()),
            })?;
        report.iterations = k;
        report.final_delta = delta.norm();
        report.defect_pre = norm2(&a_f);
        report.defect_post = norm2(&r);
        if report.final_delta < cfg.tol {
            eval(&lambda, &mut a_f)?;
            report.lambda = lambda.clone();
            return Ok((lambda, report));
        }
        for (l, dl) in lambda.iter_mut().zip(delta.iter()) {
            *l += dl;
        }
        if !report.final_delta.is_finite() || norm2(&lambda) > bound {
            break;
        }
    }
    report.lambda = lambda;
    Err(Error::ProjectionNoConvergence {
        report: Box::new(report),
    })
}

/// The intermediate states of one projected step.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    /// ξ + Aᵀλ.
    pub perturbed: ExtendedState,
    /// 𝓕(ξ + Aᵀλ).
    pub mapped: ExtendedState,
    /// 𝓕(ξ + Aᵀλ) + Aᵀλ.
    pub corrected: ExtendedState,
    pub report: ProjectionReport,
}

/// Projects the extended map `map` at `z`, keeping every intermediate state.
pub fn project_extended<M: ExtendedMap + ?Sized>(
    map: &M,
    z: &PhaseState,
    cfg: &ProjectionConfig,
) -> Result<Projected> {
    let d = map.dim();
    check_dim(d, z.dim())?;
    let scale = norm2(&z.x).hypot(norm2(&z.y));
    let mut buf = lift(z);
    let mut eval = |lambda: &[f64], out: &mut [f64]| -> Result<()> {
        lifted_shift_into(z, lambda, &mut buf);
        map.apply(&mut buf)?;
        constraint_into(&buf, out);
        Ok(())
    };
    let solved = match simplified_newton(2 * d, &mut eval, cfg, scale) {
        Ok(v) => Ok(v),
        Err(Error::ProjectionNoConvergence { .. } | Error::NonFinite(_))
            if cfg.fallback_full_newton =>
        {
            full_newton(2 * d, &mut eval, cfg, scale)
        }
        Err(e) => Err(e),
    };
    let (lambda, report) = solved?;
    let mapped = buf;
    let mut perturbed = lift(z);
    shift(&mut perturbed, &lambda);
    let mut corrected = mapped.clone();
    shift(&mut corrected, &lambda);
    Ok(Projected {
        perturbed,
        mapped,
        corrected,
        report,
    })
}

/// One projected step: returns the mean of the corrected copies.
pub fn project_step<M: ExtendedMap + ?Sized>(
    map: &M,
    z: &PhaseState,
    cfg: &ProjectionConfig,
) -> Result<(PhaseState, ProjectionReport)> {
    let p = project_extended(map, z, cfg)?;
    Ok((restrict(&p.corrected), p.report))
}

/// One projected step of `recipe` at step `step` of the grid.
pub fn projection_step(
    recipe: &CompositionRecipe,
    model: &dyn HamiltonianModel,
    z: &PhaseState,
    grid: &NoiseGrid,
    fine_per_step: usize,
    step: usize,
    cfg: &ProjectionConfig,
) -> Result<(PhaseState, ProjectionReport)> {
    let map = ExtendedStep::new(recipe, model, grid, fine_per_step, step)?;
    project_step(&map, z, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeId {
    /// Projected Lie splitting.
    SesSp1,
    /// Projected Strang splitting.
    SesSp2,
    Midpoint,
    SymplecticEuler,
}

impl SchemeId {
    pub const ALL: [SchemeId; 4] = [
        SchemeId::SesSp1,
        SchemeId::SesSp2,
        SchemeId::Midpoint,
        SchemeId::SymplecticEuler,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeId::SesSp1 => "ses-sp-1",
            SchemeId::SesSp2 => "ses-sp-2",
            SchemeId::Midpoint => "midpoint",
            SchemeId::SymplecticEuler => "sympeuler",
        }
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::UnknownName(format!("scheme '{s}'")))
    }
}

#[derive(Debug, Clone)]
enum Method {
    Projected(CompositionRecipe),
    Raw(CompositionRecipe),
    Midpoint,
    SymplecticEuler,
}

/// A fully configured one-step method.
#[derive(Debug, Clone)]
pub struct Scheme {
    method: Method,
    pub projection: ProjectionConfig,
    pub solver: ImplicitSolverConfig,
}

impl Scheme {
    /// `gammas` holds one restraint constant per channel including the clock.
    pub fn new(id: SchemeId, gammas: Vec<f64>) -> Result<Self> {
        let method = match id {
            SchemeId::SesSp1 => Method::Projected(CompositionRecipe::lie(gammas)?),
            SchemeId::SesSp2 => Method::Projected(CompositionRecipe::strang(gammas)?),
            SchemeId::Midpoint => Method::Midpoint,
            SchemeId::SymplecticEuler => Method::SymplecticEuler,
        };
        Ok(Scheme {
            method,
            projection: ProjectionConfig::default(),
            solver: ImplicitSolverConfig::default(),
        })
    }

    pub fn projected(recipe: CompositionRecipe) -> Self {
        Scheme {
            method: Method::Projected(recipe),
            projection: ProjectionConfig::default(),
            solver: ImplicitSolverConfig::default(),
        }
    }

    /// The bare composition, with the copies never re-synchronized.
    pub fn raw(recipe: CompositionRecipe) -> Self {
        Scheme {
            method: Method::Raw(recipe),
            projection: ProjectionConfig::default(),
            solver: ImplicitSolverConfig::default(),
        }
    }

    pub fn with_projection(mut self, cfg: ProjectionConfig) -> Self {
        self.projection = cfg;
        self
    }

    pub fn with_solver(mut self, cfg: ImplicitSolverConfig) -> Self {
        self.solver = cfg;
        self
    }

    pub fn recipe(&self) -> Option<&CompositionRecipe> {
        match &self.method {
            Method::Projected(r) | Method::Raw(r) => Some(r),
            _ => None,
        }
    }

    pub fn is_raw(&self) -> bool {
        matches!(self.method, Method::Raw(_))
    }

    /// Fine intervals a single step must span at minimum.
    pub fn min_fine_per_step(&self) -> usize {
        self.recipe().map_or(1, |r| r.min_fine_per_step())
    }

    /// Advances `z` by step `step` of the grid.
    pub fn step(
        &self,
        model: &dyn HamiltonianModel,
        z: &PhaseState,
        grid: &NoiseGrid,
        fine_per_step: usize,
        step: usize,
    ) -> Result<(PhaseState, Option<ProjectionReport>)> {
        match &self.method {
            Method::Projected(recipe) => {
                let (z1, rep) =
                    projection_step(recipe, model, z, grid, fine_per_step, step, &self.projection)?;
                Ok((z1, Some(rep)))
            }
            Method::Raw(recipe) => {
                let s = ExtendedStep::new(recipe, model, grid, fine_per_step, step)?.map(&lift(z))?;
                Ok((restrict(&s), None))
            }
            Method::Midpoint => {
                let inc = full_step(grid, fine_per_step, step)?;
                Ok((midpoint_step(model, z, &inc, &self.solver)?, None))
            }
            Method::SymplecticEuler => {
                let inc = full_step(grid, fine_per_step, step)?;
                Ok((symplectic_euler_step(model, z, &inc, &self.solver)?, None))
            }
        }
    }

    /// Integrates `steps` steps and returns only the final state.
    pub fn integrate(
        &self,
        model: &dyn HamiltonianModel,
        z0: &PhaseState,
        grid: &NoiseGrid,
        fine_per_step: usize,
        steps: usize,
    ) -> Result<PhaseState> {
        if let Method::Raw(recipe) = &self.method {
            let mut s = lift(z0);
            for n in 0..steps {
                ExtendedStep::new(recipe, model, grid, fine_per_step, n)
                    .and_then(|m| m.apply(&mut s))
                    .map_err(|e| e.at_step(n))?;
            }
            return Ok(restrict(&s));
        }
        let mut z = z0.clone();
        for n in 0..steps {
            z = self
                .step(model, &z, grid, fine_per_step, n)
                .map_err(|e| e.at_step(n))?
                .0;
        }
        Ok(z)
    }
}

fn full_step(
    grid: &NoiseGrid,
    fine_per_step: usize,
    step: usize,
) -> Result<crate::noise::StepIncrements> {
    if fine_per_step == 0 || (step + 1) * fine_per_step > grid.n_fine() {
        return Err(Error::InvalidArgument(format!("step {step} beyond the grid")));
    }
    Ok(grid.window(step * fine_per_step, (step + 1) * fine_per_step))
}

/// A named scalar functional evaluated along a trajectory.
pub struct Tracker<'a> {
    pub name: String,
    pub eval: Box<dyn Fn(&PhaseState) -> Result<f64> + Send + Sync + 'a>,
}

impl<'a> Tracker<'a> {
    pub fn new<F>(name: &str, eval: F) -> Self
    where
        F: Fn(&PhaseState) -> Result<f64> + Send + Sync + 'a,
    {
        Tracker {
            name: name.to_string(),
            eval: Box::new(eval),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PhaseState>,
    /// One report per projected step; empty for other methods.
    pub reports: Vec<ProjectionReport>,
    /// Copy separation after each step; raw compositions carry it forward.
    pub defect: Vec<f64>,
    pub tracked: Vec<(String, Vec<f64>)>,
}

impl Trajectory {
    pub fn series(&self, name: &str) -> Option<&[f64]> {
        self.tracked
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    /// (I(t) − I(0)) / |I(0)| for a tracked series.
    pub fn relative(&self, name: &str) -> Option<Vec<f64>> {
        let s = self.series(name)?;
        let base = s[0];
        let denom = if base == 0.0 { 1.0 } else { base.abs() };
        Some(s.iter().map(|v| (v - base) / denom).collect())
    }
}

/// Runs `steps` steps from `z0`, recording states, reports and tracked series.
pub fn simulate(
    scheme: &Scheme,
    model: &dyn HamiltonianModel,
    z0: &PhaseState,
    grid: &NoiseGrid,
    fine_per_step: usize,
    steps: usize,
    trackers: &[Tracker<'_>],
) -> Result<Trajectory> {
    check_dim(model.dim(), z0.dim())?;
    let dt = grid.dt_fine() * fine_per_step as f64;
    let mut traj = Trajectory {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        reports: Vec::new(),
        defect: Vec::with_capacity(steps + 1),
        tracked: trackers
            .iter()
            .map(|t| (t.name.clone(), Vec::with_capacity(steps + 1)))
            .collect(),
    };
    let record = |traj: &mut Trajectory, t: f64, z: &PhaseState, defect: f64| -> Result<()> {
        traj.times.push(t);
        for (tr, (_, series)) in trackers.iter().zip(traj.tracked.iter_mut()) {
            series.push((tr.eval)(z)?);
        }
        traj.states.push(z.clone());
        traj.defect.push(defect);
        Ok(())
    };
    record(&mut traj, grid.t0(), z0, 0.0)?;
    let mut ext = lift(z0);
    let mut z = z0.clone();
    for n in 0..steps {
        let t = grid.t0() + (n + 1) as f64 * dt;
        let defect = match &scheme.method {
            Method::Raw(recipe) => {
                ExtendedStep::new(recipe, model, grid, fine_per_step, n)
                    .and_then(|m| m.apply(&mut ext))
                    .map_err(|e| e.at_step(n))?;
                z = restrict(&ext);
                ext.defect_norm()
            }
            _ => {
                let (z1, rep) = scheme
                    .step(model, &z, grid, fine_per_step, n)
                    .map_err(|e| e.at_step(n))?;
                z = z1;
                match rep {
                    Some(r) => {
                        let d = r.defect_post;
                        traj.reports.push(r);
                        d
                    }
                    None => 0.0,
                }
            }
        };
        record(&mut traj, t, &z, defect).map_err(|e| e.at_step(n))?;
    }
    Ok(traj)
}
