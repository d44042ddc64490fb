//! Finite-difference Jacobians and symplecticity residuals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baseline::ImplicitSolverConfig;
use crate::error::{Error, Result};
use crate::harness::make_scheme;
use crate::model::{verify_gradients, ExtendedState, PhaseState};
use crate::modelzoo::ExampleSpec;
use crate::noise::NoiseGrid;
use crate::project::{simulate, ProjectionConfig, SchemeId};
use crate::splitflow::ExtendedMap;

/// Row-major n×n Jacobian of `f` at `z` by central differences.
///
/// Divides by the representable width of each probe, so linear maps are
/// differentiated without step roundoff.
pub fn jacobian_fd<F>(mut f: F, z: &[f64], fd_step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if !(fd_step > 0.0) {
        return Err(Error::InvalidArgument("fd_step must be positive".into()));
    }
    let n = z.len();
    let mut jac = vec![0.0; n * n];
    let mut probe = z.to_vec();
    for j in 0..n {
        probe[j] = z[j] + fd_step;
        let hi = probe[j];
        let plus = f(&probe)?;
        probe[j] = z[j] - fd_step;
        let width = hi - probe[j];
        let minus = f(&probe)?;
        probe[j] = z[j];
        if plus.len() != n || minus.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: plus.len(),
            });
        }
        for i in 0..n {
            jac[i * n + j] = (plus[i] - minus[i]) / width;
        }
    }
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("finite-difference Jacobian"));
    }
    Ok(jac)
}

/// max |(MᵀJM − J)_{ij}| for the canonical J = [[0, I], [−I, 0]] of size n.
///
/// In (X, Y) ordering J is the matrix of dX∧dY; in (X, U, Y, V) ordering the
/// same J is the matrix of dX∧dY + dU∧dV.
pub fn canonical_symplectic_residual(jac: &[f64], n: usize) -> f64 {
    let half = n / 2;
    // (JM)_{kj}: rows k < half take M_{k+half, j}, rows k ≥ half take −M_{k−half, j}.
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..half {
                // Σ_k M_{ki} (JM)_{kj} split over the two halves.
                acc += jac[k * n + i] * jac[(k + half) * n + j];
                acc -= jac[(k + half) * n + i] * jac[k * n + j];
            }
            let target = if j == i + half {
                1.0
            } else if i == j + half {
                -1.0
            } else {
                0.0
            };
            worst = worst.max((acc - target).abs());
        }
    }
    worst
}

/// Symplecticity defect of an extended one-step map at `s`.
pub fn symplectic_residual_extended<M: ExtendedMap + ?Sized>(
    map: &M,
    s: &ExtendedState,
    fd_step: f64,
) -> Result<f64> {
    let z = s.to_flat();
    let jac = jacobian_fd(
        |p| Ok(map.map(&ExtendedState::from_flat(p))?.to_flat()),
        &z,
        fd_step,
    )?;
    Ok(canonical_symplectic_residual(&jac, z.len()))
}

/// Symplecticity defect of a map on flat (X, Y) coordinates.
pub fn symplectic_residual_phase<F>(f: F, z: &[f64], fd_step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let jac = jacobian_fd(f, z, fd_step)?;
    Ok(canonical_symplectic_residual(&jac, z.len()))
}

/// Ordinary least-squares fit y ≈ a + b·x; returns (b, standard error of b).
pub fn linear_trend(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let se = if x.len() > 2 {
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    (slope, se)
}

/// Residuals of the one-step map of `scheme` at `samples` random pairs of a
/// state near the example's initial point and a noise draw.
pub fn sampled_step_residuals(
    example: &ExampleSpec,
    scheme: SchemeId,
    gamma: &[f64],
    dt: f64,
    samples: usize,
    seed: u64,
    projection: ProjectionConfig,
    fd_step: f64,
) -> Result<Vec<f64>> {
    let model = example.model.as_ref();
    let scheme = make_scheme(scheme, model, gamma, projection, ImplicitSolverConfig::default())?;
    let fps = scheme.min_fine_per_step().max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples as u64)
        .map(|path| {
            let grid = NoiseGrid::build(seed, path, model.noise_channels(), 0.0, dt, fps)?;
            let z: Vec<f64> = example
                .z0
                .to_flat()
                .iter()
                .map(|v| v + rng.gen_range(-0.1..0.1))
                .collect();
            symplectic_residual_phase(
                |p| Ok(scheme.step(model, &PhaseState::from_flat(p), &grid, fps, 0)?.0.to_flat()),
                &z,
                fd_step,
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckConfig {
    /// Restraint constants for the symplecticity and linear-invariant runs.
    pub gamma: Vec<f64>,
    pub dt: f64,
    pub steps: usize,
    pub samples: usize,
    pub seed: u64,
    pub projection: ProjectionConfig,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            gamma: vec![0.0],
            dt: 1e-2,
            steps: 1000,
            samples: 10,
            seed: 0,
            projection: ProjectionConfig::default().with_tol(1e-13),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckItem {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl CheckItem {
    fn new(name: String, value: f64, threshold: f64) -> Self {
        CheckItem {
            name,
            value,
            threshold,
            passed: value <= threshold,
        }
    }
}

/// Gradient consistency, projected-map symplecticity and invariant drift for
/// both projected schemes. Quadratic invariants are run with γ = 0, the
/// others with the configured restraint.
pub fn check_suite(example: &ExampleSpec, cfg: &CheckConfig) -> Result<Vec<CheckItem>> {
    let model = example.model.as_ref();
    let mut items = Vec::new();
    let grad = verify_gradients(model, 50, 1e-5, 1e-6)?;
    items.push(CheckItem::new("gradient".into(), grad.worst_deviation, 1e-6));
    for id in [SchemeId::SesSp1, SchemeId::SesSp2] {
        let res = sampled_step_residuals(
            example,
            id,
            &cfg.gamma,
            cfg.dt,
            cfg.samples,
            cfg.seed,
            cfg.projection,
            1e-5,
        )?;
        let worst = res.iter().cloned().fold(0.0, f64::max);
        items.push(CheckItem::new(format!("symplectic/{id}"), worst, 1e-5));
        for name in ["linear", "quadratic", "casimir"] {
            if example.invariant(name).is_err() {
                continue;
            }
            let gamma = if name == "quadratic" { vec![0.0] } else { cfg.gamma.clone() };
            let scheme = make_scheme(id, model, &gamma, cfg.projection, ImplicitSolverConfig::default())?;
            let grid = NoiseGrid::build(
                cfg.seed,
                0,
                model.noise_channels(),
                0.0,
                cfg.dt * cfg.steps as f64,
                2 * cfg.steps,
            )?;
            let traj = simulate(&scheme, model, &example.z0, &grid, 2, cfg.steps, &[example.tracker(name)?])?;
            let drift = traj
                .relative(name)
                .unwrap_or_default()
                .iter()
                .fold(0.0, |m: f64, v| m.max(v.abs()));
            items.push(CheckItem::new(format!("{name}/{id}"), drift, 1e-9));
        }
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::StepIncrements;
    use crate::splitflow::flow_f3;

    struct Scale(f64);
    impl ExtendedMap for Scale {
        fn dim(&self) -> usize {
            1
        }
        fn apply(&self, s: &mut ExtendedState) -> Result<()> {
            for b in [&mut s.x, &mut s.u, &mut s.y, &mut s.v] {
                b.iter_mut().for_each(|v| *v *= self.0);
            }
            Ok(())
        }
    }

    struct Rotation(f64);
    impl ExtendedMap for Rotation {
        fn dim(&self) -> usize {
            1
        }
        fn apply(&self, s: &mut ExtendedState) -> Result<()> {
            // γ₀ = Θ/4 with unit clock increment.
            *s = flow_f3(&[self.0 / 4.0], s, &StepIncrements::deterministic(1.0, 0))?;
            Ok(())
        }
    }

    fn s0() -> ExtendedState {
        ExtendedState::new(vec![0.3], vec![-0.4], vec![1.1], vec![0.9]).unwrap()
    }

    #[test]
    fn identity_has_zero_residual() {
        assert_eq!(symplectic_residual_extended(&Scale(1.0), &s0(), 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn doubling_map_residual_is_three() {
        let r = symplectic_residual_extended(&Scale(2.0), &s0(), 1e-5).unwrap();
        assert!((r - 3.0).abs() < 1e-9, "{r}");
    }

    #[test]
    fn restraint_rotation_is_symplectic() {
        let r = symplectic_residual_extended(&Rotation(std::f64::consts::PI / 3.0), &s0(), 1e-5).unwrap();
        assert!(r <= 1e-9, "{r}");
    }

    #[test]
    fn non_finite_jacobian_rejected() {
        let g = |_: &[f64]| Ok(vec![f64::NAN, 0.0]);
        assert!(matches!(jacobian_fd(g, &[0.0, 0.0], 1e-5), Err(Error::NonFinite(_))));
    }

    #[test]
    fn suite_passes_on_the_quadratic_example() {
        let ex = crate::modelzoo::example_by_name("ex3", None).unwrap();
        let cfg = CheckConfig {
            steps: 100,
            samples: 3,
            ..Default::default()
        };
        let items = check_suite(&ex, &cfg).unwrap();
        assert!(items.iter().any(|i| i.name == "quadratic/ses-sp-2"));
        assert!(items.iter().all(|i| i.passed), "{items:?}");
    }

    #[test]
    fn trend_of_a_line() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let (b, se) = linear_trend(&x, &y);
        assert!((b - 2.0).abs() < 1e-14 && se < 1e-12);
    }
}
