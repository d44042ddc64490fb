//! Hamiltonian models, phase-space states and invariant functionals.
//!
//! A model describes the Stratonovich system
//!
//! ```text
//! dX =  Σ_r ∂H_r/∂Y (X, Y) ∘ dW_r,
//! dY = -Σ_r ∂H_r/∂X (X, Y) ∘ dW_r,      r = 0..m,  dW_0 = dt.
//! ```

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};

/// Second derivatives of a scalar field on R^d × R^d, row-major d×d blocks.
///
/// `yx[i * d + j]` is ∂²H/∂Y_i∂X_j.
#[derive(Debug, Clone, PartialEq)]
pub struct Hessian {
    pub xx: Vec<f64>,
    pub yy: Vec<f64>,
    pub yx: Vec<f64>,
}

pub trait HamiltonianModel: Send + Sync {
    /// State dimension d (X and Y are each in R^d).
    fn dim(&self) -> usize;

    /// Number of Wiener channels m; channel 0 (the clock) is not counted.
    fn noise_channels(&self) -> usize;

    fn hamiltonian(&self, r: usize, x: &[f64], y: &[f64]) -> f64;

    /// Writes ∂H_r/∂X into `gx` and ∂H_r/∂Y into `gy`.
    fn gradient(&self, r: usize, x: &[f64], y: &[f64], gx: &mut [f64], gy: &mut [f64]);

    /// Analytic second derivatives of H_1, when available.
    fn hessian_h1(&self, _x: &[f64], _y: &[f64]) -> Option<Hessian> {
        None
    }

    /// Coefficients c_r with H_r = c_r·H_0 (c_0 = 1), when the model knows them.
    fn proportionality(&self) -> Option<Vec<f64>> {
        None
    }

    fn label(&self) -> &str;
}

type ScalarField = Box<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
type GradientField = Box<dyn Fn(&[f64], &[f64], &mut [f64], &mut [f64]) + Send + Sync>;

/// A model assembled from closures; handy for small test systems.
pub struct ClosureModel {
    dim: usize,
    label: String,
    fields: Vec<(ScalarField, GradientField)>,
}

impl ClosureModel {
    /// Starts a model with the drift Hamiltonian H_0.
    pub fn new<H, G>(dim: usize, label: &str, h0: H, grad0: G) -> Self
    where
        H: Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64], &[f64], &mut [f64], &mut [f64]) + Send + Sync + 'static,
    {
        ClosureModel {
            dim,
            label: label.to_string(),
            fields: vec![(Box::new(h0), Box::new(grad0))],
        }
    }

    /// Appends the Hamiltonian of the next Wiener channel.
    pub fn with_channel<H, G>(mut self, h: H, grad: G) -> Self
    where
        H: Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64], &[f64], &mut [f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.fields.push((Box::new(h), Box::new(grad)));
        self
    }
}

impl HamiltonianModel for ClosureModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn noise_channels(&self) -> usize {
        self.fields.len() - 1
    }

    fn hamiltonian(&self, r: usize, x: &[f64], y: &[f64]) -> f64 {
        (self.fields[r].0)(x, y)
    }

    fn gradient(&self, r: usize, x: &[f64], y: &[f64], gx: &mut [f64], gy: &mut [f64]) {
        (self.fields[r].1)(x, y, gx, gy)
    }

    fn label(&self) -> &str {
        &self.label
    }
}

impl fmt::Debug for dyn HamiltonianModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HamiltonianModel")
            .field("label", &self.label())
            .field("dim", &self.dim())
            .field("noise_channels", &self.noise_channels())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl PhaseState {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        check_dim(x.len(), y.len())?;
        Ok(PhaseState { x, y })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.y).all(|v| v.is_finite())
    }

    /// (X, Y) concatenated.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.dim());
        v.extend_from_slice(&self.x);
        v.extend_from_slice(&self.y);
        v
    }

    pub fn from_flat(v: &[f64]) -> Self {
        let d = v.len() / 2;
        PhaseState {
            x: v[..d].to_vec(),
            y: v[d..].to_vec(),
        }
    }
}

/// A point (X, U, Y, V) of the doubled phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedState {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
}

impl ExtendedState {
    pub fn new(x: Vec<f64>, u: Vec<f64>, y: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let d = x.len();
        check_dim(d, u.len())?;
        check_dim(d, y.len())?;
        check_dim(d, v.len())?;
        Ok(ExtendedState { x, u, y, v })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn is_finite(&self) -> bool {
        [&self.x, &self.u, &self.y, &self.v]
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Exact equality of the two copies.
    pub fn is_on_diagonal(&self) -> bool {
        self.x == self.u && self.y == self.v
    }

    /// ‖(X − U, Y − V)‖₂.
    pub fn defect_norm(&self) -> f64 {
        let sx: f64 = self.x.iter().zip(&self.u).map(|(a, b)| (a - b) * (a - b)).sum();
        let sy: f64 = self.y.iter().zip(&self.v).map(|(a, b)| (a - b) * (a - b)).sum();
        (sx + sy).sqrt()
    }

    /// (X, U, Y, V) concatenated.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(4 * self.dim());
        for block in [&self.x, &self.u, &self.y, &self.v] {
            out.extend_from_slice(block);
        }
        out
    }

    pub fn from_flat(v: &[f64]) -> Self {
        let d = v.len() / 4;
        ExtendedState {
            x: v[..d].to_vec(),
            u: v[d..2 * d].to_vec(),
            y: v[2 * d..3 * d].to_vec(),
            v: v[3 * d..].to_vec(),
        }
    }
}

/// The functional a_xᵀX + a_yᵀY.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearInvariant {
    a_x: Vec<f64>,
    a_y: Vec<f64>,
}

impl LinearInvariant {
    pub fn new(a_x: Vec<f64>, a_y: Vec<f64>) -> Result<Self> {
        check_dim(a_x.len(), a_y.len())?;
        if a_x.iter().chain(&a_y).all(|&a| a == 0.0) {
            return Err(Error::InvalidArgument("linear invariant with zero coefficients".into()));
        }
        Ok(LinearInvariant { a_x, a_y })
    }

    pub fn a_x(&self) -> &[f64] {
        &self.a_x
    }

    pub fn a_y(&self) -> &[f64] {
        &self.a_y
    }

    pub fn eval(&self, z: &PhaseState) -> Result<f64> {
        check_dim(self.a_x.len(), z.dim())?;
        Ok(dot(&self.a_x, &z.x) + dot(&self.a_y, &z.y))
    }

    /// aᵀJ∇H_r(X,V) + aᵀJ∇H_r(U,Y) for each r, where J∇H = (∂H/∂Y, −∂H/∂X).
    ///
    /// Zero for every r means the lifted functional is conserved by the
    /// extended flows.
    pub fn extended_condition(&self, model: &dyn HamiltonianModel, s: &ExtendedState) -> Vec<f64> {
        let d = model.dim();
        let mut gx = vec![0.0; d];
        let mut gy = vec![0.0; d];
        (0..=model.noise_channels())
            .map(|r| {
                let mut total = 0.0;
                for (p, q) in [(&s.x, &s.v), (&s.u, &s.y)] {
                    model.gradient(r, p, q, &mut gx, &mut gy);
                    total += dot(&self.a_x, &gy) - dot(&self.a_y, &gx);
                }
                total
            })
            .collect()
    }
}

/// The functional ½XᵀK11X + XᵀK12Y + ½YᵀK22Y with symmetric K11, K22.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticInvariant {
    dim: usize,
    k11: Vec<f64>,
    k12: Vec<f64>,
    k22: Vec<f64>,
}

impl QuadraticInvariant {
    /// Blocks are row-major d×d.
    pub fn new(dim: usize, k11: Vec<f64>, k12: Vec<f64>, k22: Vec<f64>) -> Result<Self> {
        for block in [&k11, &k12, &k22] {
            check_dim(dim * dim, block.len())?;
        }
        for (name, block) in [("k11", &k11), ("k22", &k22)] {
            for i in 0..dim {
                for j in 0..i {
                    if block[i * dim + j] != block[j * dim + i] {
                        return Err(Error::InvalidArgument(format!("{name} is not symmetric")));
                    }
                }
            }
        }
        Ok(QuadraticInvariant { dim, k11, k12, k22 })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, z: &PhaseState) -> Result<f64> {
        check_dim(self.dim, z.dim())?;
        let d = self.dim;
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                acc += 0.5 * z.x[i] * self.k11[i * d + j] * z.x[j]
                    + z.x[i] * self.k12[i * d + j] * z.y[j]
                    + 0.5 * z.y[i] * self.k22[i * d + j] * z.y[j];
            }
        }
        Ok(acc)
    }

    /// The full 2d×2d matrix [[K11, K12], [K12ᵀ, K22]], row-major.
    pub fn dense(&self) -> Vec<f64> {
        let d = self.dim;
        let n = 2 * d;
        let mut m = vec![0.0; n * n];
        for i in 0..d {
            for j in 0..d {
                m[i * n + j] = self.k11[i * d + j];
                m[i * n + d + j] = self.k12[i * d + j];
                m[(d + j) * n + i] = self.k12[i * d + j];
                m[(d + i) * n + d + j] = self.k22[i * d + j];
            }
        }
        m
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub passed: bool,
    /// Largest |finite difference − analytic| / (1 + |analytic|) seen.
    pub worst_deviation: f64,
    /// Channel and sample point of the worst deviation.
    pub worst_channel: usize,
    pub worst_point: Option<PhaseState>,
}

/// Compares analytic gradients against central differences of H_r at
/// `samples` points drawn uniformly from [−1, 1]^{2d}.
pub fn verify_gradients(
    model: &dyn HamiltonianModel,
    samples: usize,
    fd_step: f64,
    tol: f64,
) -> Result<GradientReport> {
    if !(fd_step > 0.0) {
        return Err(Error::InvalidArgument("fd_step must be positive".into()));
    }
    let d = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut gx = vec![0.0; d];
    let mut gy = vec![0.0; d];
    let mut report = GradientReport {
        passed: true,
        worst_deviation: 0.0,
        worst_channel: 0,
        worst_point: None,
    };
    for _ in 0..samples {
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for r in 0..=model.noise_channels() {
            model.gradient(r, &x, &y, &mut gx, &mut gy);
            let mut worst = 0.0f64;
            for i in 0..2 * d {
                let (mut xp, mut yp) = (x.clone(), y.clone());
                let (mut xm, mut ym) = (x.clone(), y.clone());
                let analytic = if i < d {
                    xp[i] += fd_step;
                    xm[i] -= fd_step;
                    gx[i]
                } else {
                    yp[i - d] += fd_step;
                    ym[i - d] -= fd_step;
                    gy[i - d]
                };
                let fd = (model.hamiltonian(r, &xp, &yp) - model.hamiltonian(r, &xm, &ym))
                    / (2.0 * fd_step);
                let dev = (fd - analytic).abs() / (1.0 + analytic.abs());
                worst = if dev.is_nan() { f64::INFINITY } else { worst.max(dev) };
            }
            if report.worst_point.is_none() || worst > report.worst_deviation {
                report.worst_deviation = worst;
                report.worst_channel = r;
                report.worst_point = Some(PhaseState { x: x.clone(), y: y.clone() });
            }
        }
    }
    report.passed = report.worst_deviation <= tol;
    Ok(report)
}
