//! Multi-symplectic lattice scheme for the stochastic cubic Schrödinger
//! equation iu_t + u_xx + |u|²u = u∘Ẇ with Q-Wiener noise.
//!
//! Interior nodes carry u = P + iQ. The doubled state (Q, X, P, Y) is
//! advanced by the two explicit subflows and projected back onto X = Q,
//! Y = P with the same simplified Newton iteration as [`crate::project`].

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{check_dim, Error, Result};
use crate::model::{ExtendedState, HamiltonianModel};
use crate::noise::NoiseGrid;
use crate::project::{project_extended, ProjectionConfig, ProjectionReport};
use crate::splitflow::{CompositionRecipe, ExtendedMap, FlowId, Fraction, Stage};

#[derive(Debug, Clone, PartialEq)]
pub struct NlsLattice {
    pub x_left: f64,
    pub x_right: f64,
    pub h: f64,
    pub nodes: Vec<f64>,
    pub modes: usize,
    /// Row-major (nodes × modes) matrix of e_k(x_i) scaled by √λ_k.
    scaled_basis: Vec<f64>,
    pub lam_sqrt: Vec<f64>,
}

impl NlsLattice {
    /// Interior nodes x_i = x_left + i·h, i = 1..=n_interior.
    pub fn new(x_left: f64, x_right: f64, n_interior: usize, modes: usize) -> Result<Self> {
        if !(x_right > x_left) || !x_left.is_finite() || !x_right.is_finite() {
            return Err(Error::InvalidArgument("degenerate lattice domain".into()));
        }
        if n_interior == 0 || modes == 0 {
            return Err(Error::InvalidArgument("lattice needs at least one node and one mode".into()));
        }
        let h = (x_right - x_left) / (n_interior + 1) as f64;
        let nodes: Vec<f64> = (1..=n_interior).map(|i| x_left + i as f64 * h).collect();
        let lam_sqrt: Vec<f64> = (1..=modes).map(|k| (k as f64).powi(-3)).collect();
        let norm = 1.0 / 5f64.sqrt();
        let mut scaled_basis = Vec::with_capacity(n_interior * modes);
        for &x in &nodes {
            for (k, ls) in lam_sqrt.iter().enumerate() {
                let kk = (k + 1) as f64;
                scaled_basis.push(norm * (kk * std::f64::consts::PI * x).sin() * ls);
            }
        }
        Ok(NlsLattice {
            x_left,
            x_right,
            h,
            nodes,
            modes,
            scaled_basis,
            lam_sqrt,
        })
    }

    /// Lattice with spacing `h`; the domain length must be a multiple of it.
    pub fn with_spacing(x_left: f64, x_right: f64, h: f64, modes: usize) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::InvalidArgument("lattice spacing must be positive".into()));
        }
        let cells = (x_right - x_left) / h;
        let rounded = cells.round();
        if rounded < 2.0 || (cells - rounded).abs() > 1e-9 * cells.max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "spacing {h} does not divide [{x_left}, {x_right}] into at least two cells"
            )));
        }
        Self::new(x_left, x_right, rounded as usize - 1, modes)
    }

    /// The experiment's lattice on [−5, 5].
    pub fn standard(h: f64, modes: usize) -> Result<Self> {
        Self::with_spacing(-5.0, 5.0, h, modes)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// (D⁺u)_i = (u_{i+1} − u_i)/h with zero boundary data.
    pub fn forward_diff(&self, u: &[f64], out: &mut [f64]) {
        let n = u.len();
        for i in 0..n {
            let next = if i + 1 < n { u[i + 1] } else { 0.0 };
            out[i] = (next - u[i]) / self.h;
        }
    }

    /// (D⁻u)_i = (u_i − u_{i−1})/h with zero boundary data.
    pub fn backward_diff(&self, u: &[f64], out: &mut [f64]) {
        for i in 0..u.len() {
            let prev = if i > 0 { u[i - 1] } else { 0.0 };
            out[i] = (u[i] - prev) / self.h;
        }
    }

    /// D⁺D⁻u, the three-point Laplacian.
    pub fn laplacian(&self, u: &[f64], out: &mut [f64]) {
        let n = u.len();
        let h2 = self.h * self.h;
        for i in 0..n {
            let prev = if i > 0 { u[i - 1] } else { 0.0 };
            let next = if i + 1 < n { u[i + 1] } else { 0.0 };
            // The last row of D⁺ has no superdiagonal.
            let ahead = if i + 1 < n { next - u[i] } else { 0.0 };
            out[i] = (ahead - (u[i] - prev)) / h2;
        }
    }

    /// EΛ·dβ, the spatial noise field of one increment.
    pub fn noise_vector(&self, dbeta: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.modes, dbeta.len())?;
        Ok(self
            .scaled_basis
            .chunks(self.modes)
            .map(|row| row.iter().zip(dbeta).map(|(e, b)| e * b).sum())
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlsState {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl NlsState {
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        check_dim(q.len(), p.len())?;
        Ok(NlsState { q, p })
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.p).all(|v| v.is_finite())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.q.iter().chain(&self.p).copied().collect()
    }

    pub fn from_flat(v: &[f64]) -> Self {
        let (q, p) = v.split_at(v.len() / 2);
        NlsState {
            q: q.to_vec(),
            p: p.to_vec(),
        }
    }

    /// D⁻Q.
    pub fn b(&self, lattice: &NlsLattice) -> Vec<f64> {
        let mut out = vec![0.0; self.q.len()];
        lattice.backward_diff(&self.q, &mut out);
        out
    }

    /// D⁻P.
    pub fn theta(&self, lattice: &NlsLattice) -> Vec<f64> {
        let mut out = vec![0.0; self.p.len()];
        lattice.backward_diff(&self.p, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlsExtendedState {
    pub q: Vec<f64>,
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub y: Vec<f64>,
}

impl NlsExtendedState {
    pub fn lift(s: &NlsState) -> Self {
        NlsExtendedState {
            q: s.q.clone(),
            x: s.q.clone(),
            p: s.p.clone(),
            y: s.p.clone(),
        }
    }

    pub fn defect_norm(&self) -> f64 {
        self.q
            .iter()
            .zip(&self.x)
            .chain(self.p.iter().zip(&self.y))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// The mean of the two copies.
    pub fn restrict(&self) -> NlsState {
        let mean = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(s, t)| 0.5 * (s + t)).collect();
        NlsState {
            q: mean(&self.q, &self.x),
            p: mean(&self.p, &self.y),
        }
    }

    fn into_extended(self) -> ExtendedState {
        ExtendedState {
            x: self.q,
            u: self.x,
            y: self.p,
            v: self.y,
        }
    }

    fn from_extended(s: ExtendedState) -> Self {
        NlsExtendedState {
            q: s.x,
            x: s.u,
            p: s.y,
            y: s.v,
        }
    }
}

/// out = Ãw + (a² + b²)⊙w.
fn cubic_drift(lattice: &NlsLattice, a: &[f64], b: &[f64], w: &[f64], out: &mut [f64]) {
    lattice.laplacian(w, out);
    for i in 0..w.len() {
        out[i] += (a[i] * a[i] + b[i] * b[i]) * w[i];
    }
}

fn check_ext(lattice: &NlsLattice, s: &ExtendedState) -> Result<()> {
    check_dim(lattice.len(), s.dim())
}

fn subflow_a_in_place(lattice: &NlsLattice, s: &mut ExtendedState, tau: f64, noise: &[f64]) {
    // Q = s.x and Y = s.v are frozen.
    let n = lattice.len();
    let mut dq = vec![0.0; n];
    let mut dy = vec![0.0; n];
    cubic_drift(lattice, &s.x, &s.v, &s.x, &mut dq);
    cubic_drift(lattice, &s.x, &s.v, &s.v, &mut dy);
    for i in 0..n {
        s.y[i] += -tau * dq[i] + s.x[i] * noise[i];
        s.u[i] += tau * dy[i] - s.v[i] * noise[i];
    }
}

fn subflow_b_in_place(lattice: &NlsLattice, s: &mut ExtendedState, tau: f64, noise: &[f64]) {
    // P = s.y and X = s.u are frozen.
    let n = lattice.len();
    let mut dp = vec![0.0; n];
    let mut dx = vec![0.0; n];
    cubic_drift(lattice, &s.y, &s.u, &s.y, &mut dp);
    cubic_drift(lattice, &s.y, &s.u, &s.u, &mut dx);
    for i in 0..n {
        s.x[i] += tau * dp[i] - s.y[i] * noise[i];
        s.v[i] += -tau * dx[i] + s.u[i] * noise[i];
    }
}

/// Q and Y frozen; P and X advance over a substep of length `tau`.
pub fn subflow_a(
    lattice: &NlsLattice,
    s: &NlsExtendedState,
    tau: f64,
    dbeta: &[f64],
) -> Result<NlsExtendedState> {
    let noise = lattice.noise_vector(dbeta)?;
    let mut e = s.clone().into_extended();
    check_ext(lattice, &e)?;
    subflow_a_in_place(lattice, &mut e, tau, &noise);
    finite(NlsExtendedState::from_extended(e), "subflow a")
}

/// P and X frozen; Q and Y advance over a substep of length `tau`.
pub fn subflow_b(
    lattice: &NlsLattice,
    s: &NlsExtendedState,
    tau: f64,
    dbeta: &[f64],
) -> Result<NlsExtendedState> {
    let noise = lattice.noise_vector(dbeta)?;
    let mut e = s.clone().into_extended();
    check_ext(lattice, &e)?;
    subflow_b_in_place(lattice, &mut e, tau, &noise);
    finite(NlsExtendedState::from_extended(e), "subflow b")
}

fn finite(s: NlsExtendedState, what: &'static str) -> Result<NlsExtendedState> {
    if s.q.iter().chain(&s.x).chain(&s.p).chain(&s.y).all(|v| v.is_finite()) {
        Ok(s)
    } else {
        Err(Error::NonFinite(what))
    }
}

/// The lattice system as a stochastic Hamiltonian model in (Q, P):
/// H₀ = ½qᵀÃq + ½pᵀÃp + ¼Σ(q² + p²)², H_k = −½Σ_i (EΛ)_{ik}(q_i² + p_i²).
#[derive(Debug, Clone)]
pub struct NlsModel {
    pub lattice: NlsLattice,
}

impl HamiltonianModel for NlsModel {
    fn dim(&self) -> usize {
        self.lattice.len()
    }

    fn noise_channels(&self) -> usize {
        self.lattice.modes
    }

    fn hamiltonian(&self, r: usize, q: &[f64], p: &[f64]) -> f64 {
        let n = q.len();
        if r == 0 {
            let mut lq = vec![0.0; n];
            let mut lp = vec![0.0; n];
            self.lattice.laplacian(q, &mut lq);
            self.lattice.laplacian(p, &mut lp);
            (0..n)
                .map(|i| {
                    let rho = q[i] * q[i] + p[i] * p[i];
                    0.5 * (q[i] * lq[i] + p[i] * lp[i]) + 0.25 * rho * rho
                })
                .sum()
        } else {
            let m = self.lattice.modes;
            (0..n)
                .map(|i| -0.5 * self.lattice.scaled_basis[i * m + r - 1] * (q[i] * q[i] + p[i] * p[i]))
                .sum()
        }
    }

    fn gradient(&self, r: usize, q: &[f64], p: &[f64], gq: &mut [f64], gp: &mut [f64]) {
        if r == 0 {
            cubic_drift(&self.lattice, q, p, q, gq);
            cubic_drift(&self.lattice, q, p, p, gp);
        } else {
            let m = self.lattice.modes;
            for i in 0..q.len() {
                let e = self.lattice.scaled_basis[i * m + r - 1];
                gq[i] = -e * q[i];
                gp[i] = -e * p[i];
            }
        }
    }

    fn label(&self) -> &str {
        "nls"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlsRecipe {
    /// a then b.
    Ab,
    /// b then a.
    Ba,
    /// a½, b, a½.
    StrangAb,
    /// b½, a, b½.
    StrangBa,
}

impl NlsRecipe {
    pub const ALL: [NlsRecipe; 4] = [NlsRecipe::Ab, NlsRecipe::Ba, NlsRecipe::StrangAb, NlsRecipe::StrangBa];

    pub fn name(self) -> &'static str {
        match self {
            NlsRecipe::Ab => "ab",
            NlsRecipe::Ba => "ba",
            NlsRecipe::StrangAb => "strang-ab",
            NlsRecipe::StrangBa => "strang-ba",
        }
    }

    /// The recipe over F1 (subflow a) and F2 (subflow b).
    pub fn composition(self, modes: usize) -> CompositionRecipe {
        use FlowId::{F1, F2};
        let (outer, inner) = match self {
            NlsRecipe::Ab | NlsRecipe::StrangAb => (F1, F2),
            NlsRecipe::Ba | NlsRecipe::StrangBa => (F2, F1),
        };
        let stages = match self {
            NlsRecipe::Ab | NlsRecipe::Ba => vec![
                Stage::new(outer, Fraction::ONE),
                Stage::new(inner, Fraction::ONE),
            ],
            NlsRecipe::StrangAb | NlsRecipe::StrangBa => vec![
                Stage::new(outer, Fraction::HALF),
                Stage::new(inner, Fraction::ONE),
                Stage::new(outer, Fraction::HALF),
            ],
        };
        CompositionRecipe::new(stages, vec![0.0; modes + 1]).expect("static recipes are valid")
    }
}

impl fmt::Display for NlsRecipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NlsRecipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NlsRecipe::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::UnknownName(format!("nls recipe '{s}' (known: ab, ba, strang-ab, strang-ba)")))
    }
}

/// One unprojected step of a subflow recipe with frozen increments.
pub struct NlsStep<'a> {
    lattice: &'a NlsLattice,
    flows: Vec<(FlowId, f64, Vec<f64>)>,
}

impl<'a> NlsStep<'a> {
    /// Windows of step `step` of `grid`, which must hold one channel per mode.
    pub fn new(
        lattice: &'a NlsLattice,
        recipe: NlsRecipe,
        grid: &NoiseGrid,
        fine_per_step: usize,
        step: usize,
    ) -> Result<Self> {
        check_dim(lattice.modes, grid.channels())?;
        let comp = recipe.composition(lattice.modes);
        let incs = comp.step_increments(grid, fine_per_step, step)?;
        let flows = comp
            .stages()
            .iter()
            .zip(incs)
            .map(|(st, inc)| Ok((st.flow, inc.tau(), lattice.noise_vector(&inc.delta[1..])?)))
            .collect::<Result<_>>()?;
        Ok(NlsStep { lattice, flows })
    }
}

impl ExtendedMap for NlsStep<'_> {
    fn dim(&self) -> usize {
        self.lattice.len()
    }

    fn apply(&self, s: &mut ExtendedState) -> Result<()> {
        check_ext(self.lattice, s)?;
        for (flow, tau, noise) in &self.flows {
            match flow {
                FlowId::F1 => subflow_a_in_place(self.lattice, s, *tau, noise),
                FlowId::F2 => subflow_b_in_place(self.lattice, s, *tau, noise),
                FlowId::F3 => {}
            }
        }
        if s.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("nls composition"))
        }
    }
}

fn as_phase(s: &NlsState) -> crate::model::PhaseState {
    crate::model::PhaseState {
        x: s.q.clone(),
        y: s.p.clone(),
    }
}

/// One projected step; the grid resolves half steps (`fine_per_step` even).
pub fn nls_step(
    lattice: &NlsLattice,
    recipe: NlsRecipe,
    s: &NlsState,
    grid: &NoiseGrid,
    fine_per_step: usize,
    step: usize,
    cfg: &ProjectionConfig,
) -> Result<(NlsState, ProjectionReport)> {
    check_dim(lattice.len(), s.q.len())?;
    check_dim(lattice.len(), s.p.len())?;
    let map = NlsStep::new(lattice, recipe, grid, fine_per_step, step)?;
    let out = project_extended(&map, &as_phase(s), cfg)?;
    let ext = NlsExtendedState::from_extended(out.corrected);
    Ok((ext.restrict(), out.report))
}

/// Σ_i (P_i² + Q_i²) in index order.
pub fn charge(s: &NlsState) -> f64 {
    s.p.iter().zip(&s.q).map(|(p, q)| p * p + q * q).sum()
}

/// P = cos(2x)sech(x), Q = sin(2x)sech(x) at the interior nodes.
pub fn nls_initial(lattice: &NlsLattice) -> NlsState {
    let sech = |x: f64| 1.0 / x.cosh();
    NlsState {
        q: lattice.nodes.iter().map(|&x| (2.0 * x).sin() * sech(x)).collect(),
        p: lattice.nodes.iter().map(|&x| (2.0 * x).cos() * sech(x)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlsRun {
    pub times: Vec<f64>,
    pub states: Vec<NlsState>,
    pub charge: Vec<f64>,
    pub defect: Vec<f64>,
    pub newton_iters: Vec<usize>,
}

impl NlsRun {
    pub fn max_relative_charge_drift(&self) -> f64 {
        let c0 = self.charge[0];
        self.charge
            .iter()
            .map(|c| ((c - c0) / c0).abs())
            .fold(0.0, f64::max)
    }

    /// Long format: t, x, P, Q.
    pub fn write_fields<W: Write>(&self, lattice: &NlsLattice, mut w: W) -> Result<()> {
        writeln!(w, "t,x,P,Q")?;
        for (t, s) in self.times.iter().zip(&self.states) {
            for (i, x) in lattice.nodes.iter().enumerate() {
                writeln!(w, "{t:.16e},{x:.16e},{:.16e},{:.16e}", s.p[i], s.q[i])?;
            }
        }
        Ok(())
    }

    pub fn write_summary<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,charge,defect,newton_iters")?;
        for i in 0..self.times.len() {
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e},{}",
                self.times[i], self.charge[i], self.defect[i], self.newton_iters[i]
            )?;
        }
        Ok(())
    }
}

/// Runs `steps` steps from `s0`; with `projected = false` the copies are
/// never re-synchronized and the reported state is their mean.
pub fn simulate_nls(
    lattice: &NlsLattice,
    recipe: NlsRecipe,
    s0: &NlsState,
    grid: &NoiseGrid,
    fine_per_step: usize,
    steps: usize,
    cfg: &ProjectionConfig,
    projected: bool,
) -> Result<NlsRun> {
    let dt = grid.dt_fine() * fine_per_step as f64;
    let mut run = NlsRun {
        times: vec![grid.t0()],
        states: vec![s0.clone()],
        charge: vec![charge(s0)],
        defect: vec![0.0],
        newton_iters: vec![0],
    };
    let mut s = s0.clone();
    let mut ext = NlsExtendedState::lift(s0).into_extended();
    for n in 0..steps {
        let (next, defect, iters) = if projected {
            let (next, rep) =
                nls_step(lattice, recipe, &s, grid, fine_per_step, n, cfg).map_err(|e| e.at_step(n))?;
            (next, rep.defect_post, rep.iterations)
        } else {
            NlsStep::new(lattice, recipe, grid, fine_per_step, n)
                .and_then(|m| m.apply(&mut ext))
                .map_err(|e| e.at_step(n))?;
            let e = NlsExtendedState::from_extended(ext.clone());
            (e.restrict(), e.defect_norm(), 0)
        };
        s = next;
        run.times.push(grid.t0() + (n + 1) as f64 * dt);
        run.charge.push(charge(&s));
        run.defect.push(defect);
        run.newton_iters.push(iters);
        run.states.push(s.clone());
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::symplectic_residual_phase;
    use crate::noise::StepIncrements;
    use crate::splitflow::{flow_f1, flow_f2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn ext(q: f64, x: f64, p: f64, y: f64) -> NlsExtendedState {
        NlsExtendedState {
            q: vec![q],
            x: vec![x],
            p: vec![p],
            y: vec![y],
        }
    }

    fn unit_lattice() -> NlsLattice {
        NlsLattice::new(0.0, 2.0, 1, 1).unwrap()
    }

    #[test]
    fn lattice_geometry() {
        let l = NlsLattice::standard(1.0, 10).unwrap();
        assert_eq!(l.len(), 9);
        assert_eq!(l.nodes[0], -4.0);
        assert_eq!(l.nodes[8], 4.0);
        assert!((l.h * 10.0 - 10.0).abs() < 1e-15);
        assert!(NlsLattice::new(1.0, 1.0, 3, 1).is_err());
        assert!(NlsLattice::standard(3.0, 1).is_err());
    }

    #[test]
    fn forward_difference_rows() {
        let l = NlsLattice::new(0.0, 2.0, 3, 1).unwrap();
        assert_eq!(l.h, 0.5);
        let mut out = [0.0; 3];
        let expected = [[-2.0, 0.0, 0.0], [2.0, -2.0, 0.0], [0.0, 2.0, -2.0]];
        for (j, col) in expected.iter().enumerate() {
            let mut e = [0.0; 3];
            e[j] = 1.0;
            l.forward_diff(&e, &mut out);
            assert_eq!(&out, col);
        }
    }

    #[test]
    fn one_node_laplacian() {
        let l = unit_lattice();
        let mut out = [0.0];
        l.laplacian(&[1.0], &mut out);
        assert_eq!(out[0], -1.0);
    }

    #[test]
    fn difference_operator_identities() {
        let l = NlsLattice::new(-1.0, 1.3, 12, 3).unwrap();
        let n = l.len();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let u = random_vec(&mut rng, n);
            let w = random_vec(&mut rng, n);
            let (mut dm, mut dp) = (vec![0.0; n], vec![0.0; n]);
            l.backward_diff(&u, &mut dm);
            l.forward_diff(&w, &mut dp);
            // ⟨D⁻u, w⟩ = −⟨u, D⁺w⟩
            let lhs: f64 = dm.iter().zip(&w).map(|(a, b)| a * b).sum();
            let rhs: f64 = -u.iter().zip(&dp).map(|(a, b)| a * b).sum::<f64>();
            assert!((lhs - rhs).abs() <= 1e-14 * (1.0 + lhs.abs()) * (n as f64));
            let (mut lu, mut lw) = (vec![0.0; n], vec![0.0; n]);
            l.laplacian(&u, &mut lu);
            l.laplacian(&w, &mut lw);
            let a: f64 = lu.iter().zip(&w).map(|(x, y)| x * y).sum();
            let b: f64 = u.iter().zip(&lw).map(|(x, y)| x * y).sum();
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            // the stencil Laplacian agrees with D⁺ applied to D⁻
            let mut composed = vec![0.0; n];
            l.forward_diff(&dm, &mut composed);
            for (c, s) in composed.iter().zip(&lu) {
                assert!((c - s).abs() <= 1e-12 * c.abs().max(1.0));
            }
        }
    }

    #[test]
    fn noise_vector_values() {
        let l = NlsLattice::new(0.0, 1.0, 1, 1).unwrap();
        assert_eq!(l.nodes[0], 0.5);
        let v = l.noise_vector(&[1.0]).unwrap();
        assert!((v[0] - 0.447213595499958).abs() < 1e-12);
        assert_eq!(l.noise_vector(&[0.0]).unwrap(), vec![0.0]);
        let big = NlsLattice::new(-1.0, 1.0, 7, 4).unwrap();
        let a = [0.1, -0.3, 0.2, 0.05];
        let b = [0.4, 0.1, -0.2, 0.3];
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (va, vb, vab) = (
            big.noise_vector(&a).unwrap(),
            big.noise_vector(&b).unwrap(),
            big.noise_vector(&ab).unwrap(),
        );
        for i in 0..7 {
            assert!((va[i] + vb[i] - vab[i]).abs() < 1e-15);
        }
        assert!(big.noise_vector(&a[..2]).is_err());
    }

    #[test]
    fn subflow_hand_values() {
        let l = unit_lattice();
        let s = ext(1.0, 0.0, 0.0, 0.0);
        assert_eq!(subflow_a(&l, &s, 0.0, &[0.0]).unwrap(), s);
        let a = subflow_a(&l, &s, 0.1, &[0.0]).unwrap();
        assert_eq!(a, ext(1.0, 0.0, 0.0, 0.0));
        let a = subflow_a(&l, &ext(2.0, 0.0, 0.0, 0.0), 0.1, &[0.0]).unwrap();
        assert!((a.p[0] + 0.6).abs() < 1e-15);
        let b = subflow_b(&l, &ext(0.0, 1.0, 1.0, 0.0), 0.1, &[0.0]).unwrap();
        assert!((b.q[0] - 0.1).abs() < 1e-15 && (b.y[0] + 0.1).abs() < 1e-15);
        assert_eq!(subflow_b(&l, &s, 0.0, &[0.0]).unwrap(), s);
    }

    #[test]
    fn subflows_mirror_each_other() {
        let l = NlsLattice::new(-1.0, 1.0, 6, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let s = NlsExtendedState {
                q: random_vec(&mut rng, 6),
                x: random_vec(&mut rng, 6),
                p: random_vec(&mut rng, 6),
                y: random_vec(&mut rng, 6),
            };
            let db = random_vec(&mut rng, 3);
            let b = subflow_b(&l, &s, 0.07, &db).unwrap();
            let swapped = NlsExtendedState {
                q: s.p.clone(),
                x: s.y.clone(),
                p: s.q.clone(),
                y: s.x.clone(),
            };
            // b on (Q, X, P, Y) is a on (P, Y, Q, X) with time and noise reversed.
            let neg: Vec<f64> = db.iter().map(|v| -v).collect();
            let a = subflow_a(&l, &swapped, -0.07, &neg).unwrap();
            for i in 0..6 {
                assert!((b.q[i] - a.p[i]).abs() < 1e-14);
                assert!((b.y[i] - a.x[i]).abs() < 1e-14);
                assert_eq!(b.p[i], a.q[i]);
                assert_eq!(b.x[i], a.y[i]);
            }
        }
    }

    #[test]
    fn subflows_are_the_hamiltonian_flows() {
        let l = NlsLattice::new(-1.0, 1.0, 5, 2).unwrap();
        let model = NlsModel { lattice: l.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = NlsExtendedState {
            q: random_vec(&mut rng, 5),
            x: random_vec(&mut rng, 5),
            p: random_vec(&mut rng, 5),
            y: random_vec(&mut rng, 5),
        };
        let db = [0.2, -0.1];
        let inc = StepIncrements::new(vec![0.03, db[0], db[1]]).unwrap();
        let via_a = subflow_a(&l, &s, 0.03, &db).unwrap();
        let via_f1 = NlsExtendedState::from_extended(flow_f1(&model, &s.clone().into_extended(), &inc).unwrap());
        let via_b = subflow_b(&l, &s, 0.03, &db).unwrap();
        let via_f2 = NlsExtendedState::from_extended(flow_f2(&model, &s.clone().into_extended(), &inc).unwrap());
        for i in 0..5 {
            assert!((via_a.p[i] - via_f1.p[i]).abs() < 1e-14 && (via_a.x[i] - via_f1.x[i]).abs() < 1e-14);
            assert!((via_b.q[i] - via_f2.q[i]).abs() < 1e-14 && (via_b.y[i] - via_f2.y[i]).abs() < 1e-14);
        }
        let rep = crate::model::verify_gradients(&model, 50, 1e-5, 1e-6).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn charge_and_initial_data() {
        assert_eq!(charge(&NlsState::new(vec![0.0, 0.0], vec![3.0, 4.0]).unwrap()), 25.0);
        assert_eq!(charge(&NlsState::new(vec![0.0], vec![0.0]).unwrap()), 0.0);
        let l = NlsLattice::new(-1.0, 1.0, 1, 1).unwrap();
        let s = nls_initial(&l);
        assert_eq!((s.p[0], s.q[0]), (1.0, 0.0));
        let wide = NlsLattice::new(-5.0, 7.0, 11, 1).unwrap();
        assert_eq!(wide.nodes[9], 5.0);
        let s = nls_initial(&wide);
        assert!((s.p[9] - 0.013475282221304557 * 10f64.cos()).abs() < 1e-12);
        let fig = NlsLattice::standard(1.0, 10).unwrap();
        let c = charge(&nls_initial(&fig));
        assert!(c > 0.0);
        assert_eq!(c.to_bits(), charge(&nls_initial(&fig)).to_bits());
    }

    #[test]
    fn zero_step_is_identity() {
        let l = NlsLattice::new(-1.0, 1.0, 4, 2).unwrap();
        let s0 = nls_initial(&l);
        let map = NlsStep {
            lattice: &l,
            flows: vec![(FlowId::F1, 0.0, vec![0.0; 4]), (FlowId::F2, 0.0, vec![0.0; 4])],
        };
        let out = project_extended(&map, &as_phase(&s0), &ProjectionConfig::default()).unwrap();
        assert_eq!(out.report.lambda, vec![0.0; 8]);
        assert_eq!(NlsExtendedState::from_extended(out.corrected).restrict(), s0);
    }

    #[test]
    fn projected_step_conserves_charge_and_is_symplectic() {
        let l = NlsLattice::new(0.0, 1.0, 9, 10).unwrap();
        let grid = NoiseGrid::build(11, 0, 10, 0.0, 2e-3, 2).unwrap();
        let cfg = ProjectionConfig::default().with_tol(1e-13);
        let s0 = nls_initial(&l);
        for recipe in NlsRecipe::ALL {
            let (s1, _) = nls_step(&l, recipe, &s0, &grid, 2, 0, &cfg).unwrap();
            let rel = (charge(&s1) - charge(&s0)).abs() / charge(&s0);
            assert!(rel <= 1e-12, "{recipe}: {rel}");
        }
        let res = symplectic_residual_phase(
            |z| {
                let s = NlsState::from_flat(z);
                Ok(nls_step(&l, NlsRecipe::StrangAb, &s, &grid, 2, 0, &cfg)?.0.to_flat())
            },
            &s0.to_flat(),
            1e-5,
        )
        .unwrap();
        assert!(res <= 1e-5, "{res}");
    }

    #[test]
    fn unprojected_copies_drift_apart() {
        let l = NlsLattice::new(0.0, 1.0, 9, 10).unwrap();
        let grid = NoiseGrid::build(2, 0, 10, 0.0, 0.05, 100).unwrap();
        let cfg = ProjectionConfig::default().with_tol(1e-13);
        let s0 = nls_initial(&l);
        let raw = simulate_nls(&l, NlsRecipe::Ab, &s0, &grid, 2, 50, &cfg, false).unwrap();
        let proj = simulate_nls(&l, NlsRecipe::Ab, &s0, &grid, 2, 50, &cfg, true).unwrap();
        assert!(raw.defect[50] > 1e-6, "{}", raw.defect[50]);
        assert!(proj.defect.iter().all(|d| *d <= 4e-13));
        assert!(proj.max_relative_charge_drift() < 1e-11);
    }

    #[test]
    fn recipe_names() {
        for r in NlsRecipe::ALL {
            assert_eq!(r.name().parse::<NlsRecipe>().unwrap(), r);
        }
        assert!("abc".parse::<NlsRecipe>().is_err());
    }
}
