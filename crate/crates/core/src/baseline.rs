//! Implicit comparison schemes: the stochastic midpoint rule and the
//! stochastic symplectic Euler scheme with its Stratonovich correction.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::model::{HamiltonianModel, Hessian, PhaseState};
use crate::noise::StepIncrements;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImplicitSolverConfig {
    /// Max-norm residual at which Newton stops.
    pub tol: f64,
    pub max_iter: usize,
    /// Relative step of the forward-difference Jacobian.
    pub fd_step: f64,
}

impl Default for ImplicitSolverConfig {
    fn default() -> Self {
        ImplicitSolverConfig {
            tol: 1e-12,
            max_iter: 50,
            fd_step: 1e-7,
        }
    }
}

impl ImplicitSolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !(self.fd_step > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidArgument(
                "implicit solver tol, fd_step and max_iter must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves G(z) = 0 by Newton's method with a forward-difference Jacobian.
///
/// The residual floor is raised to a few ulps of the solution scale so that
/// a tolerance below roundoff does not stall the iteration.
fn newton<G>(mut z: Vec<f64>, mut residual: G, cfg: &ImplicitSolverConfig) -> Result<Vec<f64>>
where
    G: FnMut(&[f64], &mut [f64]),
{
    cfg.validate()?;
    let n = z.len();
    let mut r = vec![0.0; n];
    let mut rp = vec![0.0; n];
    let mut jac = DMatrix::<f64>::zeros(n, n);
    let mut last = f64::INFINITY;
    for _ in 0..cfg.max_iter {
        residual(&z, &mut r);
        last = max_abs(&r);
        if !last.is_finite() {
            return Err(Error::NonFinite("implicit solver residual"));
        }
        let floor = 64.0 * f64::EPSILON * (1.0 + max_abs(&z));
        if last <= cfg.tol.max(floor) {
            return Ok(z);
        }
        for j in 0..n {
            let zj = z[j];
            let h = cfg.fd_step * (1.0 + zj.abs());
            z[j] = zj + h;
            residual(&z, &mut rp);
            z[j] = zj;
            for i in 0..n {
                jac[(i, j)] = (rp[i] - r[i]) / h;
            }
        }
        let rhs = DVector::from_iterator(n, r.iter().map(|v| -v));
        let delta = jac
            .clone()
            .lu()
            .solve(&rhs)
            .ok_or(Error::SolverNoConvergence {
                iterations: 0,
                residual: last,
            })?;
        for (zi, di) in z.iter_mut().zip(delta.iter()) {
            *zi += di;
        }
    }
    residual(&z, &mut r);
    let final_res = max_abs(&r);
    if final_res <= cfg.tol.max(64.0 * f64::EPSILON * (1.0 + max_abs(&z))) {
        return Ok(z);
    }
    Err(Error::SolverNoConvergence {
        iterations: cfg.max_iter,
        residual: final_res.min(last),
    })
}

/// gx = Σ_r δ_r ∂H_r/∂X, gy = Σ_r δ_r ∂H_r/∂Y at (x, y).
fn weighted_gradient(
    model: &dyn HamiltonianModel,
    x: &[f64],
    y: &[f64],
    inc: &StepIncrements,
    gx: &mut [f64],
    gy: &mut [f64],
    tx: &mut [f64],
    ty: &mut [f64],
) {
    gx.fill(0.0);
    gy.fill(0.0);
    for (r, &delta) in inc.delta.iter().enumerate() {
        if delta == 0.0 {
            continue;
        }
        model.gradient(r, x, y, tx, ty);
        for i in 0..x.len() {
            gx[i] += delta * tx[i];
            gy[i] += delta * ty[i];
        }
    }
}

/// One step of the implicit midpoint rule with all channels evaluated at
/// the midpoint of the step.
pub fn midpoint_step(
    model: &dyn HamiltonianModel,
    z: &PhaseState,
    inc: &StepIncrements,
    cfg: &ImplicitSolverConfig,
) -> Result<PhaseState> {
    let d = model.dim();
    check_dim(d, z.dim())?;
    check_dim(model.noise_channels() + 1, inc.delta.len())?;
    if inc.is_zero() {
        return Ok(z.clone());
    }
    let mut gx = vec![0.0; d];
    let mut gy = vec![0.0; d];
    let mut tx = vec![0.0; d];
    let mut ty = vec![0.0; d];
    let mut mx = vec![0.0; d];
    let mut my = vec![0.0; d];

    // Explicit Euler predictor.
    weighted_gradient(model, &z.x, &z.y, inc, &mut gx, &mut gy, &mut tx, &mut ty);
    let mut guess = Vec::with_capacity(2 * d);
    guess.extend((0..d).map(|i| z.x[i] + gy[i]));
    guess.extend((0..d).map(|i| z.y[i] - gx[i]));

    let sol = newton(
        guess,
        |w, r| {
            let (x1, y1) = w.split_at(d);
            for i in 0..d {
                mx[i] = 0.5 * (z.x[i] + x1[i]);
                my[i] = 0.5 * (z.y[i] + y1[i]);
            }
            weighted_gradient(model, &mx, &my, inc, &mut gx, &mut gy, &mut tx, &mut ty);
            for i in 0..d {
                r[i] = x1[i] - z.x[i] - gy[i];
                r[d + i] = y1[i] - z.y[i] + gx[i];
            }
        },
        cfg,
    )?;
    Ok(PhaseState::from_flat(&sol))
}

/// Hessian blocks of H_1 by central differences of its gradient.
pub fn hessian_fd(model: &dyn HamiltonianModel, x: &[f64], y: &[f64]) -> Hessian {
    let d = x.len();
    let scale = 1.0 + x.iter().chain(y).map(|v| v * v).sum::<f64>().sqrt();
    let h = 1e-6 * scale;
    let mut out = Hessian {
        xx: vec![0.0; d * d],
        yy: vec![0.0; d * d],
        yx: vec![0.0; d * d],
    };
    let (mut gxp, mut gyp, mut gxm, mut gym) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut xp = x.to_vec();
    let mut yp = y.to_vec();
    for j in 0..d {
        xp[j] = x[j] + h;
        model.gradient(1, &xp, y, &mut gxp, &mut gyp);
        xp[j] = x[j] - h;
        model.gradient(1, &xp, y, &mut gxm, &mut gym);
        xp[j] = x[j];
        for i in 0..d {
            out.xx[i * d + j] = (gxp[i] - gxm[i]) / (2.0 * h);
            out.yx[i * d + j] = (gyp[i] - gym[i]) / (2.0 * h);
        }
        yp[j] = y[j] + h;
        model.gradient(1, x, &yp, &mut gxp, &mut gyp);
        yp[j] = y[j] - h;
        model.gradient(1, x, &yp, &mut gxm, &mut gym);
        yp[j] = y[j];
        for i in 0..d {
            out.yy[i * d + j] = (gyp[i] - gym[i]) / (2.0 * h);
        }
    }
    out
}

fn mat_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for i in 0..d {
        out[i] = (0..d).map(|j| m[i * d + j] * v[j]).sum();
    }
}

/// The correction terms of the symplectic Euler scheme at (x, y):
/// cx = −½(H_YY H_X − ½ H_YX H_Y), cy = −½(H_XX H_Y − ½ H_YX H_X), for H = H_1.
fn sympeuler_correction(
    model: &dyn HamiltonianModel,
    x: &[f64],
    y: &[f64],
    cx: &mut [f64],
    cy: &mut [f64],
) {
    let d = x.len();
    let hess = model.hessian_h1(x, y).unwrap_or_else(|| hessian_fd(model, x, y));
    let mut hx = vec![0.0; d];
    let mut hy = vec![0.0; d];
    model.gradient(1, x, y, &mut hx, &mut hy);
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    mat_vec(&hess.yy, &hx, &mut a);
    mat_vec(&hess.yx, &hy, &mut b);
    for i in 0..d {
        cx[i] = -0.5 * (a[i] - 0.5 * b[i]);
    }
    mat_vec(&hess.xx, &hy, &mut a);
    mat_vec(&hess.yx, &hx, &mut b);
    for i in 0..d {
        cy[i] = -0.5 * (a[i] - 0.5 * b[i]);
    }
}

/// One step of the symplectic Euler scheme for a single noise channel.
///
/// X_{n+1} is found implicitly with every derivative taken at (X_{n+1}, Y_n);
/// Y_{n+1} then follows explicitly.
pub fn symplectic_euler_step(
    model: &dyn HamiltonianModel,
    z: &PhaseState,
    inc: &StepIncrements,
    cfg: &ImplicitSolverConfig,
) -> Result<PhaseState> {
    if model.noise_channels() != 1 {
        return Err(Error::InvalidArgument(format!(
            "symplectic Euler needs exactly one noise channel, model has {}",
            model.noise_channels()
        )));
    }
    let d = model.dim();
    check_dim(d, z.dim())?;
    check_dim(2, inc.delta.len())?;
    if inc.is_zero() {
        return Ok(z.clone());
    }
    let dt = inc.tau();
    let mut gx = vec![0.0; d];
    let mut gy = vec![0.0; d];
    let mut tx = vec![0.0; d];
    let mut ty = vec![0.0; d];
    let mut cx = vec![0.0; d];
    let mut cy = vec![0.0; d];

    weighted_gradient(model, &z.x, &z.y, inc, &mut gx, &mut gy, &mut tx, &mut ty);
    let guess: Vec<f64> = (0..d).map(|i| z.x[i] + gy[i]).collect();
    let x1 = newton(
        guess,
        |x1, r| {
            weighted_gradient(model, x1, &z.y, inc, &mut gx, &mut gy, &mut tx, &mut ty);
            if dt != 0.0 {
                sympeuler_correction(model, x1, &z.y, &mut cx, &mut cy);
            } else {
                cx.fill(0.0);
            }
            for i in 0..d {
                r[i] = x1[i] - z.x[i] - gy[i] - cx[i] * dt;
            }
        },
        cfg,
    )?;
    weighted_gradient(model, &x1, &z.y, inc, &mut gx, &mut gy, &mut tx, &mut ty);
    if dt != 0.0 {
        sympeuler_correction(model, &x1, &z.y, &mut cx, &mut cy);
    } else {
        cy.fill(0.0);
    }
    let y1: Vec<f64> = (0..d).map(|i| z.y[i] - gx[i] + cy[i] * dt).collect();
    let out = PhaseState { x: x1, y: y1 };
    if !out.is_finite() {
        return Err(Error::NonFinite("symplectic Euler step"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ClosureModel;

    fn z(x: f64, y: f64) -> PhaseState {
        PhaseState::new(vec![x], vec![y]).unwrap()
    }

    fn oscillator() -> ClosureModel {
        ClosureModel::new(
            1,
            "osc",
            |x, y| 0.5 * (x[0] * x[0] + y[0] * y[0]),
            |x, y, gx, gy| {
                gx[0] = x[0];
                gy[0] = y[0];
            },
        )
    }

    fn bilinear_with_null_noise() -> ClosureModel {
        ClosureModel::new(
            1,
            "xy",
            |x, y| x[0] * y[0],
            |x, y, gx, gy| {
                gx[0] = y[0];
                gy[0] = x[0];
            },
        )
        .with_channel(|_, _| 0.0, |_, _, gx, gy| {
            gx[0] = 0.0;
            gy[0] = 0.0;
        })
    }

    #[test]
    fn cayley_map_at_dt_two() {
        let out = midpoint_step(
            &oscillator(),
            &z(1.0, 0.0),
            &StepIncrements::deterministic(2.0, 0),
            &ImplicitSolverConfig::default(),
        )
        .unwrap();
        assert!(out.x[0].abs() < 1e-12 && (out.y[0] + 1.0).abs() < 1e-12, "{out:?}");
    }

    #[test]
    fn zero_increments_are_identity() {
        let cfg = ImplicitSolverConfig::default();
        let z0 = z(0.3, -0.8);
        let inc = StepIncrements::new(vec![0.0]).unwrap();
        assert_eq!(midpoint_step(&oscillator(), &z0, &inc, &cfg).unwrap(), z0);
        let inc = StepIncrements::new(vec![0.0, 0.0]).unwrap();
        assert_eq!(
            symplectic_euler_step(&bilinear_with_null_noise(), &z0, &inc, &cfg).unwrap(),
            z0
        );
    }

    #[test]
    fn midpoint_preserves_circle() {
        let m = oscillator().with_channel(
            |x, y| 0.25 * (x[0] * x[0] + y[0] * y[0]),
            |x, y, gx, gy| {
                gx[0] = 0.5 * x[0];
                gy[0] = 0.5 * y[0];
            },
        );
        let cfg = ImplicitSolverConfig {
            tol: 1e-14,
            ..Default::default()
        };
        let mut s = z(0.6, 0.8);
        for k in 0..50 {
            let before = s.x[0] * s.x[0] + s.y[0] * s.y[0];
            let inc = StepIncrements::new(vec![0.05, 0.3 * ((k as f64) * 0.7).sin()]).unwrap();
            s = midpoint_step(&m, &s, &inc, &cfg).unwrap();
            let after = s.x[0] * s.x[0] + s.y[0] * s.y[0];
            assert!(((after - before) / before).abs() <= 1e-12, "{k}: {before} {after}");
        }
    }

    #[test]
    fn sympeuler_on_bilinear() {
        let out = symplectic_euler_step(
            &bilinear_with_null_noise(),
            &z(1.0, 1.0),
            &StepIncrements::new(vec![0.5, 0.0]).unwrap(),
            &ImplicitSolverConfig::default(),
        )
        .unwrap();
        assert!((out.x[0] - 2.0).abs() < 1e-12 && (out.y[0] - 0.5).abs() < 1e-12, "{out:?}");
    }

    #[test]
    fn sympeuler_requires_one_channel() {
        let inc = StepIncrements::deterministic(0.1, 0);
        let err = symplectic_euler_step(&oscillator(), &z(1.0, 0.0), &inc, &ImplicitSolverConfig::default());
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn fd_hessian_matches_analytic() {
        let m = oscillator().with_channel(
            |x, y| x[0] * x[0] * y[0],
            |x, y, gx, gy| {
                gx[0] = 2.0 * x[0] * y[0];
                gy[0] = x[0] * x[0];
            },
        );
        let h = hessian_fd(&m, &[0.7], &[-1.3]);
        assert!((h.xx[0] + 2.6).abs() < 1e-8);
        assert!(h.yy[0].abs() < 1e-8);
        assert!((h.yx[0] - 1.4).abs() < 1e-8);
    }

    #[test]
    fn halving_tolerance_barely_moves_midpoint() {
        let m = oscillator();
        let inc = StepIncrements::deterministic(0.3, 0);
        let a = ImplicitSolverConfig::default();
        let b = ImplicitSolverConfig { tol: 0.5e-12, ..a };
        let za = midpoint_step(&m, &z(1.0, 0.2), &inc, &a).unwrap();
        let zb = midpoint_step(&m, &z(1.0, 0.2), &inc, &b).unwrap();
        assert!((za.x[0] - zb.x[0]).abs() <= 1e-11 && (za.y[0] - zb.y[0]).abs() <= 1e-11);
    }
}
