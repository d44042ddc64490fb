//! Exact flows of the doubled system and their compositions.
//!
//! The doubled Hamiltonians H_r(X, V) + H_r(U, Y) + γ_r(‖X−U‖² + ‖Y−V‖²)
//! split into three pieces with closed-form flows:
//!
//! * `F1` — H_r(X, V): moves U and Y, gradients taken at (X, V);
//! * `F2` — H_r(U, Y): moves X and V, gradients taken at (U, Y);
//! * `F3` — the restraint: rotates (X−U, Y−V) by Θ = 4 Σ γ_r ΔW_r and leaves
//!   X+U, Y+V alone.
//!
//! A [`CompositionRecipe`] lists stages left to right; the leftmost stage
//! acts first.

use std::cell::RefCell;
use std::fmt;

use crate::error::{check_dim, Error, Result};
use crate::model::{ExtendedState, HamiltonianModel};
use crate::noise::{NoiseGrid, StepIncrements};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlowId {
    F1,
    F2,
    F3,
}

impl FlowId {
    fn index(self) -> usize {
        match self {
            FlowId::F1 => 0,
            FlowId::F2 => 1,
            FlowId::F3 => 2,
        }
    }
}

/// A fraction num/den in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fraction {
    num: u32,
    den: u32,
}

impl Fraction {
    pub const ONE: Fraction = Fraction { num: 1, den: 1 };
    pub const HALF: Fraction = Fraction { num: 1, den: 2 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 || num > den {
            return Err(Error::InvalidArgument(format!("fraction {num}/{den} not in (0, 1]")));
        }
        let g = gcd(num as u64, den as u64) as u32;
        Ok(Fraction {
            num: num / g,
            den: den / g,
        })
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn num(self) -> u32 {
        self.num
    }

    pub fn den(self) -> u32 {
        self.den
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn lcm(a: u64, b: u64) -> u64 {
    a / gcd(a, b) * b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub flow: FlowId,
    pub fraction: Fraction,
}

impl Stage {
    pub fn new(flow: FlowId, fraction: Fraction) -> Self {
        Stage { flow, fraction }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositionRecipe {
    stages: Vec<Stage>,
    gammas: Vec<f64>,
    fuse_proportional: bool,
}

impl CompositionRecipe {
    /// `gammas[r]` is the restraint constant of channel r (r = 0 is the clock).
    pub fn new(stages: Vec<Stage>, gammas: Vec<f64>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::InvalidArgument("recipe has no stages".into()));
        }
        if gammas.is_empty() {
            return Err(Error::InvalidArgument("restraint list must include channel 0".into()));
        }
        // Rational per-family sums: Σ num_i/den_i == 1.
        let mut sums = [(0u64, 1u64); 3];
        for st in &stages {
            let (n, d) = sums[st.flow.index()];
            let (fn_, fd) = (st.fraction.num as u64, st.fraction.den as u64);
            let den = lcm(d, fd);
            let num = n * (den / d) + fn_ * (den / fd);
            let g = gcd(num, den);
            sums[st.flow.index()] = (num / g, den / g);
        }
        for (i, &(n, d)) in sums.iter().enumerate() {
            let used = stages.iter().any(|s| s.flow.index() == i);
            if used && n != d {
                return Err(Error::InvalidArgument(format!(
                    "fractions of F{} sum to {n}/{d}, not 1",
                    i + 1
                )));
            }
        }
        Ok(CompositionRecipe {
            stages,
            gammas,
            fuse_proportional: false,
        })
    }

    /// F1 ⋆ F2 ⋆ F3 with full-step increments.
    pub fn lie(gammas: Vec<f64>) -> Result<Self> {
        Self::new(
            vec![
                Stage::new(FlowId::F1, Fraction::ONE),
                Stage::new(FlowId::F2, Fraction::ONE),
                Stage::new(FlowId::F3, Fraction::ONE),
            ],
            gammas,
        )
    }

    /// F1(½) ⋆ F2(½) ⋆ F3(1) ⋆ F2(½) ⋆ F1(½).
    pub fn strang(gammas: Vec<f64>) -> Result<Self> {
        Self::new(
            vec![
                Stage::new(FlowId::F1, Fraction::HALF),
                Stage::new(FlowId::F2, Fraction::HALF),
                Stage::new(FlowId::F3, Fraction::ONE),
                Stage::new(FlowId::F2, Fraction::HALF),
                Stage::new(FlowId::F1, Fraction::HALF),
            ],
            gammas,
        )
    }

    /// Evaluate one gradient per flow when the model reports H_r = c_r·H_0.
    ///
    /// Off by default; results then differ from the per-channel sum in the
    /// last bits.
    pub fn with_fused_gradients(mut self, on: bool) -> Self {
        self.fuse_proportional = on;
        self
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    /// The same stages in reverse order.
    pub fn reversed(&self) -> Self {
        let mut out = self.clone();
        out.stages.reverse();
        out
    }

    /// Smallest number of fine intervals per step that puts every window
    /// boundary on the fine grid.
    pub fn min_fine_per_step(&self) -> usize {
        self.stages
            .iter()
            .fold(1u64, |acc, s| lcm(acc, s.fraction.den as u64)) as usize
    }

    /// Fine-interval offsets `[start, end)` within the step for each stage:
    /// the i-th occurrence of a flow takes the i-th window of that flow's
    /// fraction sequence, windows laid consecutively from t_n.
    pub fn stage_windows(&self, fine_per_step: usize) -> Result<Vec<(usize, usize)>> {
        let k = fine_per_step as u64;
        let mut cum = [(0u64, 1u64); 3];
        let mut out = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let (n, d) = cum[st.flow.index()];
            let start = n * k / d;
            let (fn_, fd) = (st.fraction.num as u64, st.fraction.den as u64);
            let den = lcm(d, fd);
            let num = n * (den / d) + fn_ * (den / fd);
            if (num * k) % den != 0 || (n * k) % d != 0 {
                return Err(Error::WindowMisaligned {
                    fraction: num as f64 / den as f64,
                    fine_per_step,
                });
            }
            out.push((start as usize, (num * k / den) as usize));
            cum[st.flow.index()] = (num, den);
        }
        Ok(out)
    }

    /// Freezes the increments of step `step` for every stage.
    pub fn step_increments(
        &self,
        grid: &NoiseGrid,
        fine_per_step: usize,
        step: usize,
    ) -> Result<Vec<StepIncrements>> {
        if (step + 1) * fine_per_step > grid.n_fine() {
            return Err(Error::InvalidArgument(format!("step {step} beyond the grid")));
        }
        let base = step * fine_per_step;
        Ok(self
            .stage_windows(fine_per_step)?
            .into_iter()
            .map(|(a, b)| grid.window(base + a, base + b))
            .collect())
    }
}

impl fmt::Display for CompositionRecipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self
            .stages
            .iter()
            .map(|s| format!("{:?}({})", s.flow, s.fraction))
            .collect();
        write!(f, "{}", names.join(" * "))
    }
}

/// Gradient buffers reused across flow applications.
pub(crate) struct FlowScratch {
    gx: Vec<f64>,
    gy: Vec<f64>,
    ax: Vec<f64>,
    ay: Vec<f64>,
}

impl FlowScratch {
    pub(crate) fn new(d: usize) -> Self {
        FlowScratch {
            gx: vec![0.0; d],
            gy: vec![0.0; d],
            ax: vec![0.0; d],
            ay: vec![0.0; d],
        }
    }
}

/// ax = Σ_r δ_r ∂H_r/∂X(p, q), ay = Σ_r δ_r ∂H_r/∂Y(p, q).
///
/// `fused` is Σ_r δ_r c_r for a model with H_r = c_r·H_0.
fn accumulate_gradients(
    model: &dyn HamiltonianModel,
    p: &[f64],
    q: &[f64],
    inc: &StepIncrements,
    fused: Option<f64>,
    sc: &mut FlowScratch,
) {
    sc.ax.fill(0.0);
    sc.ay.fill(0.0);
    if let Some(weight) = fused {
        if weight != 0.0 {
            model.gradient(0, p, q, &mut sc.gx, &mut sc.gy);
            for i in 0..p.len() {
                sc.ax[i] = weight * sc.gx[i];
                sc.ay[i] = weight * sc.gy[i];
            }
        }
        return;
    }
    for (r, &delta) in inc.delta.iter().enumerate() {
        if delta == 0.0 {
            continue;
        }
        model.gradient(r, p, q, &mut sc.gx, &mut sc.gy);
        for i in 0..p.len() {
            sc.ax[i] += sc.gx[i] * delta;
            sc.ay[i] += sc.gy[i] * delta;
        }
    }
}

fn check_increments(model: &dyn HamiltonianModel, s: &ExtendedState, inc: &StepIncrements) -> Result<()> {
    check_dim(model.dim(), s.dim())?;
    check_dim(model.noise_channels() + 1, inc.delta.len())
}

fn check_finite(s: &ExtendedState, what: &'static str) -> Result<()> {
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub(crate) fn flow_f1_in_place(
    model: &dyn HamiltonianModel,
    s: &mut ExtendedState,
    inc: &StepIncrements,
    fused: Option<f64>,
    sc: &mut FlowScratch,
) {
    accumulate_gradients(model, &s.x, &s.v, inc, fused, sc);
    for i in 0..s.dim() {
        s.u[i] += sc.ay[i];
        s.y[i] -= sc.ax[i];
    }
}

pub(crate) fn flow_f2_in_place(
    model: &dyn HamiltonianModel,
    s: &mut ExtendedState,
    inc: &StepIncrements,
    fused: Option<f64>,
    sc: &mut FlowScratch,
) {
    accumulate_gradients(model, &s.u, &s.y, inc, fused, sc);
    for i in 0..s.dim() {
        s.x[i] += sc.ay[i];
        s.v[i] -= sc.ax[i];
    }
}

pub(crate) fn flow_f3_in_place(gammas: &[f64], s: &mut ExtendedState, inc: &StepIncrements) {
    if let Some(rot) = rotation(gammas, inc) {
        rotate_in_place(s, rot);
    }
}

/// (sin Θ, cos Θ) for Θ = 4Σ_r γ_r δ_r, or `None` when Θ = 0.
fn rotation(gammas: &[f64], inc: &StepIncrements) -> Option<(f64, f64)> {
    let theta = 4.0 * gammas.iter().zip(&inc.delta).map(|(g, d)| g * d).sum::<f64>();
    (theta != 0.0).then(|| theta.sin_cos())
}

fn rotate_in_place(s: &mut ExtendedState, (sin, cos): (f64, f64)) {
    for i in 0..s.dim() {
        let (sx, sy) = (s.x[i] + s.u[i], s.y[i] + s.v[i]);
        let (dx, dy) = (s.x[i] - s.u[i], s.y[i] - s.v[i]);
        let rx = cos * dx + sin * dy;
        let ry = -sin * dx + cos * dy;
        s.x[i] = 0.5 * (sx + rx);
        s.u[i] = 0.5 * (sx - rx);
        s.y[i] = 0.5 * (sy + ry);
        s.v[i] = 0.5 * (sy - ry);
    }
}

/// Exact flow of Σ_r H_r(X, V) over one window.
pub fn flow_f1(model: &dyn HamiltonianModel, s: &ExtendedState, inc: &StepIncrements) -> Result<ExtendedState> {
    check_increments(model, s, inc)?;
    let mut out = s.clone();
    flow_f1_in_place(model, &mut out, inc, None, &mut FlowScratch::new(s.dim()));
    check_finite(&out, "flow_f1")?;
    Ok(out)
}

/// Exact flow of Σ_r H_r(U, Y) over one window.
pub fn flow_f2(model: &dyn HamiltonianModel, s: &ExtendedState, inc: &StepIncrements) -> Result<ExtendedState> {
    check_increments(model, s, inc)?;
    let mut out = s.clone();
    flow_f2_in_place(model, &mut out, inc, None, &mut FlowScratch::new(s.dim()));
    check_finite(&out, "flow_f2")?;
    Ok(out)
}

/// Exact flow of the restraint Σ_r γ_r(‖X−U‖² + ‖Y−V‖²) over one window.
pub fn flow_f3(gammas: &[f64], s: &ExtendedState, inc: &StepIncrements) -> Result<ExtendedState> {
    check_dim(gammas.len(), inc.delta.len())?;
    let mut out = s.clone();
    flow_f3_in_place(gammas, &mut out, inc);
    check_finite(&out, "flow_f3")?;
    Ok(out)
}

/// A map on the doubled phase space evaluated at frozen noise.
pub trait ExtendedMap {
    fn dim(&self) -> usize;

    fn apply(&self, s: &mut ExtendedState) -> Result<()>;

    fn map(&self, s: &ExtendedState) -> Result<ExtendedState> {
        let mut out = s.clone();
        self.apply(&mut out)?;
        Ok(out)
    }
}

/// One step of a composition recipe with its increments frozen.
pub struct ExtendedStep<'a> {
    model: &'a dyn HamiltonianModel,
    recipe: &'a CompositionRecipe,
    increments: Vec<StepIncrements>,
    drives: Vec<StageDrive>,
    scratch: RefCell<FlowScratch>,
}

/// What each stage needs from its increments, computed once per step.
#[derive(Debug, Clone, Copy)]
enum StageDrive {
    Gradient(Option<f64>),
    Rotation(Option<(f64, f64)>),
}

impl<'a> ExtendedStep<'a> {
    pub fn new(
        recipe: &'a CompositionRecipe,
        model: &'a dyn HamiltonianModel,
        grid: &NoiseGrid,
        fine_per_step: usize,
        step: usize,
    ) -> Result<Self> {
        let increments = recipe.step_increments(grid, fine_per_step, step)?;
        Self::from_increments(recipe, model, increments)
    }

    /// `increments[i]` drives stage i.
    pub fn from_increments(
        recipe: &'a CompositionRecipe,
        model: &'a dyn HamiltonianModel,
        increments: Vec<StepIncrements>,
    ) -> Result<Self> {
        check_dim(recipe.stages.len(), increments.len())?;
        let channels = model.noise_channels() + 1;
        for inc in &increments {
            check_dim(channels, inc.delta.len())?;
        }
        if recipe.stages.iter().any(|s| s.flow == FlowId::F3) {
            check_dim(channels, recipe.gammas.len())?;
        }
        let fused = if recipe.fuse_proportional {
            model.proportionality()
        } else {
            None
        };
        let drives = recipe
            .stages
            .iter()
            .zip(&increments)
            .map(|(stage, inc)| match stage.flow {
                FlowId::F3 => StageDrive::Rotation(rotation(&recipe.gammas, inc)),
                _ => StageDrive::Gradient(
                    fused
                        .as_ref()
                        .map(|c| inc.delta.iter().zip(c).map(|(d, c)| d * c).sum()),
                ),
            })
            .collect();
        Ok(ExtendedStep {
            model,
            recipe,
            increments,
            drives,
            scratch: RefCell::new(FlowScratch::new(model.dim())),
        })
    }

    pub fn increments(&self) -> &[StepIncrements] {
        &self.increments
    }
}

impl ExtendedMap for ExtendedStep<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn apply(&self, s: &mut ExtendedState) -> Result<()> {
        check_dim(self.model.dim(), s.dim())?;
        let sc = &mut *self.scratch.borrow_mut();
        let stages = self.recipe.stages.iter().zip(&self.increments).zip(&self.drives);
        for ((stage, inc), drive) in stages {
            match (stage.flow, *drive) {
                (FlowId::F1, StageDrive::Gradient(w)) => flow_f1_in_place(self.model, s, inc, w, sc),
                (FlowId::F2, StageDrive::Gradient(w)) => flow_f2_in_place(self.model, s, inc, w, sc),
                (_, StageDrive::Rotation(Some(rot))) => rotate_in_place(s, rot),
                _ => {}
            }
        }
        check_finite(s, "composed flow")
    }
}

/// Applies one step of `recipe` (leftmost stage first) at step `step` of the grid.
pub fn compose(
    recipe: &CompositionRecipe,
    model: &dyn HamiltonianModel,
    s: &ExtendedState,
    grid: &NoiseGrid,
    fine_per_step: usize,
    step: usize,
) -> Result<ExtendedState> {
    ExtendedStep::new(recipe, model, grid, fine_per_step, step)?.map(s)
}
