//! The four benchmark systems with their invariants and coordinate maps.

use std::f64::consts::SQRT_2;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{HamiltonianModel, Hessian, LinearInvariant, PhaseState, QuadraticInvariant};
use crate::project::Tracker;

pub type Functional = Arc<dyn Fn(&PhaseState) -> Result<f64> + Send + Sync>;
pub type ForwardMap = Arc<dyn Fn(&PhaseState) -> Result<Vec<f64>> + Send + Sync>;
pub type InverseMap = Arc<dyn Fn(&[f64]) -> Result<PhaseState> + Send + Sync>;

/// Maps between canonical (X, Y) and the physical variables y.
#[derive(Clone)]
pub struct Transform {
    pub forward: ForwardMap,
    pub inverse: InverseMap,
}

#[derive(Clone)]
pub struct ExampleSpec {
    pub name: &'static str,
    pub model: Arc<dyn HamiltonianModel>,
    pub z0: PhaseState,
    pub invariants: Vec<(&'static str, Functional)>,
    pub transform: Option<Transform>,
    pub params: Vec<(&'static str, f64)>,
    pub linear: Option<LinearInvariant>,
    pub quadratic: Option<QuadraticInvariant>,
}

impl std::fmt::Debug for ExampleSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExampleSpec")
            .field("name", &self.name)
            .field("z0", &self.z0)
            .field("params", &self.params)
            .field(
                "invariants",
                &self.invariants.iter().map(|(n, _)| *n).collect::<Vec<_>>(),
            )
            .finish()
    }
}

impl ExampleSpec {
    pub fn invariant(&self, name: &str) -> Result<&Functional> {
        self.invariants
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, f)| f)
            .ok_or_else(|| {
                let known: Vec<_> = self.invariants.iter().map(|(n, _)| *n).collect();
                Error::UnknownName(format!(
                    "invariant '{name}' on {} (known: {})",
                    self.name,
                    known.join(", ")
                ))
            })
    }

    pub fn tracker(&self, name: &str) -> Result<Tracker<'static>> {
        let f = self.invariant(name)?.clone();
        Ok(Tracker::new(name, move |z: &PhaseState| f(z)))
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }

    pub fn invariant_names(&self) -> Vec<&'static str> {
        self.invariants.iter().map(|(n, _)| *n).collect()
    }
}

pub const EXAMPLE_NAMES: [&str; 4] = ["ex1", "ex2", "ex3", "ex4"];

/// Builds an example by registry name; `c` overrides the noise intensity.
pub fn example_by_name(name: &str, c: Option<f64>) -> Result<ExampleSpec> {
    match name {
        "ex1" => make_example1(c.unwrap_or(0.15)),
        "ex2" => make_example2(c.unwrap_or(0.5), &LotkaVolterraParams::default()),
        "ex3" => make_example3(c.unwrap_or(0.5)),
        "ex4" => make_example4(c.unwrap_or(1.0), [0.5f64.sqrt(), 0.5f64.sqrt(), 0.0]),
        _ => Err(Error::UnknownName(format!(
            "example '{name}' (known: {})",
            EXAMPLE_NAMES.join(", ")
        ))),
    }
}

fn functional<F>(f: F) -> Functional
where
    F: Fn(&PhaseState) -> Result<f64> + Send + Sync + 'static,
{
    Arc::new(f)
}

fn channel_scale(r: usize, c: f64) -> f64 {
    if r == 0 {
        1.0
    } else {
        c
    }
}

/// H₀ = ½(X² + 1)(Y² + 1), H₁ = c·H₀.
#[derive(Debug, Clone, Copy)]
pub struct Example1 {
    pub c: f64,
}

impl Example1 {
    pub fn h0(x: f64, y: f64) -> f64 {
        0.5 * (x * x + 1.0) * (y * y + 1.0)
    }
}

impl HamiltonianModel for Example1 {
    fn dim(&self) -> usize {
        1
    }

    fn noise_channels(&self) -> usize {
        1
    }

    fn hamiltonian(&self, r: usize, x: &[f64], y: &[f64]) -> f64 {
        channel_scale(r, self.c) * Self::h0(x[0], y[0])
    }

    fn gradient(&self, r: usize, x: &[f64], y: &[f64], gx: &mut [f64], gy: &mut [f64]) {
        let s = channel_scale(r, self.c);
        let (p, q) = (x[0], y[0]);
        gx[0] = s * p * (q * q + 1.0);
        gy[0] = s * (p * p + 1.0) * q;
    }

    fn hessian_h1(&self, x: &[f64], y: &[f64]) -> Option<Hessian> {
        let (p, q) = (x[0], y[0]);
        Some(Hessian {
            xx: vec![self.c * (q * q + 1.0)],
            yy: vec![self.c * (p * p + 1.0)],
            yx: vec![self.c * 2.0 * p * q],
        })
    }

    fn proportionality(&self) -> Option<Vec<f64>> {
        Some(vec![1.0, self.c])
    }

    fn label(&self) -> &str {
        "ex1"
    }
}

pub fn make_example1(c: f64) -> Result<ExampleSpec> {
    let model = Example1 { c };
    Ok(ExampleSpec {
        name: "ex1",
        model: Arc::new(model),
        z0: PhaseState::new(vec![0.0], vec![-3.0])?,
        invariants: vec![
            ("hamiltonian", functional(|z| Ok(Example1::h0(z.x[0], z.y[0])))),
            ("h1", functional(move |z| Ok(c * Example1::h0(z.x[0], z.y[0])))),
        ],
        transform: None,
        params: vec![("c", c)],
        linear: None,
        quadratic: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LotkaVolterraParams {
    pub a: f64,
    pub b: f64,
    pub v: f64,
    pub omega: f64,
    pub mu: f64,
    pub y0: [f64; 3],
}

impl Default for LotkaVolterraParams {
    fn default() -> Self {
        LotkaVolterraParams {
            a: -2.0,
            b: -1.0,
            v: -0.5,
            omega: 1.0,
            mu: 2.0,
            y0: [1.0, 1.9, 0.5],
        }
    }
}

impl LotkaVolterraParams {
    /// The Casimir level set by the initial populations.
    pub fn casimir_level(&self) -> f64 {
        let [y1, y2, y3] = self.y0;
        -y1.ln() / self.v - self.b * y2.ln() + y3.ln()
    }
}

/// Lotka–Volterra in canonical coordinates.
///
/// The source dynamics read d(X, Y) = [[0, −1], [1, 0]]∇H, so the canonical
/// Hamiltonians are H₀ = −H and H₁ = −c·H.
#[derive(Debug, Clone, Copy)]
pub struct Example2 {
    pub p: LotkaVolterraParams,
    pub level: f64,
    pub c: f64,
}

impl Example2 {
    pub fn energy(&self, x: f64, y: f64) -> f64 {
        let p = &self.p;
        p.a * p.b * (p.v * (x - self.level + p.b * y)).exp() + (-y).exp()
            - p.omega * y
            - p.a * x.exp()
            - p.mu * x
    }

    fn energy_gradient(&self, x: f64, y: f64) -> (f64, f64) {
        let p = &self.p;
        let e = (p.v * (x - self.level + p.b * y)).exp();
        (
            p.a * p.b * p.v * e - p.a * x.exp() - p.mu,
            p.a * p.b * p.v * p.b * e - (-y).exp() - p.omega,
        )
    }
}

impl HamiltonianModel for Example2 {
    fn dim(&self) -> usize {
        1
    }

    fn noise_channels(&self) -> usize {
        1
    }

    fn hamiltonian(&self, r: usize, x: &[f64], y: &[f64]) -> f64 {
        -channel_scale(r, self.c) * self.energy(x[0], y[0])
    }

    fn gradient(&self, r: usize, x: &[f64], y: &[f64], gx: &mut [f64], gy: &mut [f64]) {
        let s = -channel_scale(r, self.c);
        let (hx, hy) = self.energy_gradient(x[0], y[0]);
        gx[0] = s * hx;
        gy[0] = s * hy;
    }

    fn proportionality(&self) -> Option<Vec<f64>> {
        Some(vec![1.0, self.c])
    }

    fn label(&self) -> &str {
        "ex2"
    }
}

pub fn make_example2(c: f64, p: &LotkaVolterraParams) -> Result<ExampleSpec> {
    if p.y0.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("Lotka-Volterra y0 must be positive".into()));
    }
    if p.v == 0.0 || p.b == 0.0 {
        return Err(Error::InvalidArgument("Lotka-Volterra v and b must be nonzero".into()));
    }
    let level = p.casimir_level();
    let model = Example2 { p: *p, level, c };
    let (v, b) = (p.v, p.b);
    let forward: ForwardMap = Arc::new(move |z: &PhaseState| {
        let (x, y) = (z.x[0], z.y[0]);
        Ok(vec![(v * (x - level + b * y)).exp(), (-y).exp(), x.exp()])
    });
    let inverse: InverseMap = Arc::new(|y: &[f64]| {
        if y.len() != 3 || y.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::TransformSingular("populations must be positive".into()));
        }
        PhaseState::new(vec![y[2].ln()], vec![-y[1].ln()])
    });
    let casimir = {
        let forward = forward.clone();
        functional(move |z| {
            let y = forward(z)?;
            Ok(-y[0].ln() / v - b * y[1].ln() + y[2].ln())
        })
    };
    let energy = functional(move |z| Ok(model.energy(z.x[0], z.y[0])));
    Ok(ExampleSpec {
        name: "ex2",
        model: Arc::new(model),
        z0: PhaseState::new(vec![p.y0[2].ln()], vec![-p.y0[1].ln()])?,
        invariants: vec![("hamiltonian", energy), ("casimir", casimir)],
        transform: Some(Transform { forward, inverse }),
        params: vec![
            ("c", c),
            ("a", p.a),
            ("b", p.b),
            ("v", p.v),
            ("omega", p.omega),
            ("mu", p.mu),
            ("casimir_level", level),
        ],
        linear: None,
        quadratic: None,
    })
}

/// H₀ = exp(f·sin g) with f = (2X₁ − 3Y₁)/10, g = (X₂² + 2Y₂²)/4; H₁ = c·H₀.
#[derive(Debug, Clone, Copy)]
pub struct Example3 {
    pub c: f64,
}

impl Example3 {
    pub fn linear_part(x: &[f64], y: &[f64]) -> f64 {
        (2.0 * x[0] - 3.0 * y[0]) / 10.0
    }

    pub fn quadratic_part(x: &[f64], y: &[f64]) -> f64 {
        (x[1] * x[1] + 2.0 * y[1] * y[1]) / 4.0
    }

    pub fn h0(x: &[f64], y: &[f64]) -> f64 {
        (Self::linear_part(x, y) * Self::quadratic_part(x, y).sin()).exp()
    }
}

impl HamiltonianModel for Example3 {
    fn dim(&self) -> usize {
        2
    }

    fn noise_channels(&self) -> usize {
        1
    }

    fn hamiltonian(&self, r: usize, x: &[f64], y: &[f64]) -> f64 {
        channel_scale(r, self.c) * Self::h0(x, y)
    }

    fn gradient(&self, r: usize, x: &[f64], y: &[f64], gx: &mut [f64], gy: &mut [f64]) {
        let f = Self::linear_part(x, y);
        let (sin_g, cos_g) = Self::quadratic_part(x, y).sin_cos();
        let h = channel_scale(r, self.c) * (f * sin_g).exp();
        gx[0] = h * sin_g * 0.2;
        gy[0] = h * sin_g * -0.3;
        gx[1] = h * f * cos_g * 0.5 * x[1];
        gy[1] = h * f * cos_g * y[1];
    }

    fn proportionality(&self) -> Option<Vec<f64>> {
        Some(vec![1.0, self.c])
    }

    fn label(&self) -> &str {
        "ex3"
    }
}

pub fn make_example3(c: f64) -> Result<ExampleSpec> {
    let linear = LinearInvariant::new(vec![0.2, 0.0], vec![-0.3, 0.0])?;
    let quadratic = QuadraticInvariant::new(
        2,
        vec![0.0, 0.0, 0.0, 0.5],
        vec![0.0; 4],
        vec![0.0, 0.0, 0.0, 1.0],
    )?;
    let (lin, quad) = (linear.clone(), quadratic.clone());
    Ok(ExampleSpec {
        name: "ex3",
        model: Arc::new(Example3 { c }),
        z0: PhaseState::new(vec![-1.0, 2.0], vec![1.0, -1.0])?,
        invariants: vec![
            ("hamiltonian", functional(|z| Ok(Example3::h0(&z.x, &z.y)))),
            ("linear", functional(move |z| lin.eval(z))),
            ("quadratic", functional(move |z| quad.eval(z))),
        ],
        transform: None,
        params: vec![("c", c)],
        linear: Some(linear),
        quadratic: Some(quadratic),
    })
}

/// Rigid body in canonical coordinates (X = y₂, Y the angle in the y₁y₃-plane).
///
/// As for Lotka–Volterra the source dynamics use the transposed structure
/// matrix, so H₀ = −H and H₁ = −c·H.
#[derive(Debug, Clone, Copy)]
pub struct Example4 {
    pub inertia: [f64; 3],
    /// Half the squared norm of the angular momentum.
    pub level: f64,
    pub c: f64,
}

impl Example4 {
    pub fn default_inertia() -> [f64; 3] {
        let s = (2.0f64 / 1.51).sqrt();
        [SQRT_2 + s, SQRT_2 - 0.51 * s, 1.0]
    }

    pub fn energy(&self, x: f64, y: f64) -> f64 {
        let [i1, i2, i3] = self.inertia;
        let (s, c) = y.sin_cos();
        let w = 2.0 * self.level - x * x;
        w * c * c / (2.0 * i1) + x * x / (2.0 * i2) + w * s * s / (2.0 * i3)
    }

    fn energy_gradient(&self, x: f64, y: f64) -> (f64, f64) {
        let [i1, i2, i3] = self.inertia;
        let (s, c) = y.sin_cos();
        let w = 2.0 * self.level - x * x;
        (
            -x * (c * c / i1 + s * s / i3) + x / i2,
            w * s * c * (1.0 / i3 - 1.0 / i1),
        )
    }

    /// √(2𝒞₁ − X²), tolerating roundoff just past the boundary.
    fn radius(level: f64, x: f64) -> Result<f64> {
        let w = 2.0 * level - x * x;
        if w >= 0.0 {
            Ok(w.sqrt())
        } else if -w <= 1e-14 * 2.0 * level {
            Ok(0.0)
        } else {
            Err(Error::TransformSingular(format!(
                "X² = {} exceeds 2C₁ = {}",
                x * x,
                2.0 * level
            )))
        }
    }
}

impl HamiltonianModel for Example4 {
    fn dim(&self) -> usize {
        1
    }

    fn noise_channels(&self) -> usize {
        1
    }

    fn hamiltonian(&self, r: usize, x: &[f64], y: &[f64]) -> f64 {
        -channel_scale(r, self.c) * self.energy(x[0], y[0])
    }

    fn gradient(&self, r: usize, x: &[f64], y: &[f64], gx: &mut [f64], gy: &mut [f64]) {
        let s = -channel_scale(r, self.c);
        let (hx, hy) = self.energy_gradient(x[0], y[0]);
        gx[0] = s * hx;
        gy[0] = s * hy;
    }

    fn proportionality(&self) -> Option<Vec<f64>> {
        Some(vec![1.0, self.c])
    }

    fn label(&self) -> &str {
        "ex4"
    }
}

pub fn make_example4(c: f64, y0: [f64; 3]) -> Result<ExampleSpec> {
    let level = 0.5 * y0.iter().map(|v| v * v).sum::<f64>();
    if !(level > 0.0) {
        return Err(Error::InvalidArgument("rigid body y0 must be nonzero".into()));
    }
    let inertia = Example4::default_inertia();
    let model = Example4 { inertia, level, c };
    let forward: ForwardMap = Arc::new(move |z: &PhaseState| {
        let (x, y) = (z.x[0], z.y[0]);
        let rho = Example4::radius(level, x)?;
        Ok(vec![rho * y.cos(), x, rho * y.sin()])
    });
    let inverse: InverseMap = Arc::new(|y: &[f64]| {
        if y.len() != 3 || (y[0] == 0.0 && y[2] == 0.0) {
            return Err(Error::TransformSingular("angle undefined at y₁ = y₃ = 0".into()));
        }
        PhaseState::new(vec![y[1]], vec![y[2].atan2(y[0])])
    });
    let casimir = {
        let forward = forward.clone();
        functional(move |z| Ok(0.5 * forward(z)?.iter().map(|v| v * v).sum::<f64>()))
    };
    let kinetic = {
        let forward = forward.clone();
        functional(move |z| {
            let y = forward(z)?;
            Ok(0.5 * (y[0] * y[0] / inertia[0] + y[1] * y[1] / inertia[1] + y[2] * y[2] / inertia[2]))
        })
    };
    let energy = functional(move |z| Ok(model.energy(z.x[0], z.y[0])));
    Ok(ExampleSpec {
        name: "ex4",
        model: Arc::new(model),
        z0: PhaseState::new(vec![y0[1]], vec![(y0[2] / y0[0]).atan()])?,
        invariants: vec![("hamiltonian", energy), ("casimir", casimir), ("kinetic", kinetic)],
        transform: Some(Transform { forward, inverse }),
        params: vec![
            ("c", c),
            ("casimir_level", level),
            ("i1", inertia[0]),
            ("i2", inertia[1]),
            ("i3", inertia[2]),
        ],
        linear: None,
        quadratic: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{verify_gradients, ExtendedState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, d: usize, lo: f64, hi: f64, seed: u64) -> Vec<PhaseState> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                PhaseState::new(
                    (0..d).map(|_| rng.gen_range(lo..hi)).collect(),
                    (0..d).map(|_| rng.gen_range(lo..hi)).collect(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn example1_values() {
        let ex = make_example1(0.1).unwrap();
        let h = ex.invariant("hamiltonian").unwrap();
        assert_eq!(h(&ex.z0).unwrap(), 5.0);
        let (mut gx, mut gy) = ([0.0], [0.0]);
        ex.model.gradient(0, &ex.z0.x, &ex.z0.y, &mut gx, &mut gy);
        assert_eq!(gx[0], 0.0);
        for z in random_points(100, 1, -3.0, 3.0, 1) {
            assert_eq!(ex.model.hamiltonian(1, &z.x, &z.y), 0.1 * ex.model.hamiltonian(0, &z.x, &z.y));
        }
    }

    #[test]
    fn all_gradients_verify() {
        for name in EXAMPLE_NAMES {
            let ex = example_by_name(name, None).unwrap();
            let rep = verify_gradients(ex.model.as_ref(), 100, 1e-5, 1e-6).unwrap();
            assert!(rep.passed, "{name}: {rep:?}");
        }
    }

    #[test]
    fn example1_hessian_matches_differences() {
        let m = Example1 { c: 0.3 };
        let (x, y) = ([0.4], [-1.2]);
        let a = m.hessian_h1(&x, &y).unwrap();
        let b = crate::baseline::hessian_fd(&m, &x, &y);
        for (p, q) in [(a.xx, b.xx), (a.yy, b.yy), (a.yx, b.yx)] {
            assert!((p[0] - q[0]).abs() < 1e-7);
        }
    }

    #[test]
    fn example2_casimir_is_identically_the_level() {
        let ex = make_example2(0.5, &LotkaVolterraParams::default()).unwrap();
        let level = ex.param("casimir_level").unwrap();
        assert!((level - 0.95f64.ln()).abs() < 1e-15);
        assert!((level + 0.051293).abs() < 1e-6);
        let t = ex.transform.as_ref().unwrap();
        let y = (t.forward)(&ex.z0).unwrap();
        for (a, b) in y.iter().zip([1.0, 1.9, 0.5]) {
            assert!((a - b).abs() < 1e-12, "{y:?}");
        }
        let cas = ex.invariant("casimir").unwrap();
        for z in random_points(100, 1, -2.0, 2.0, 2) {
            assert!((cas(&z).unwrap() - level).abs() <= 1e-12);
            let back = (t.inverse)(&(t.forward)(&z).unwrap()).unwrap();
            assert!((back.x[0] - z.x[0]).abs() < 1e-12 && (back.y[0] - z.y[0]).abs() < 1e-12);
        }
        assert!(make_example2(0.5, &LotkaVolterraParams { y0: [1.0, -1.0, 1.0], ..Default::default() }).is_err());
    }

    #[test]
    fn example2_follows_source_orientation() {
        // dX = −∂H/∂Y dt in the source convention.
        let ex = make_example2(0.0, &LotkaVolterraParams::default()).unwrap();
        let m = Example2 { p: LotkaVolterraParams::default(), level: ex.param("casimir_level").unwrap(), c: 0.0 };
        let (hx, hy) = m.energy_gradient(0.3, -0.2);
        let (mut gx, mut gy) = ([0.0], [0.0]);
        ex.model.gradient(0, &[0.3], &[-0.2], &mut gx, &mut gy);
        assert_eq!((gy[0], -gx[0]), (-hy, hx));
    }

    #[test]
    fn example3_values_and_invariants() {
        let ex = make_example3(0.5).unwrap();
        assert_eq!(Example3::h0(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(Example3::linear_part(&ex.z0.x, &ex.z0.y), -0.5);
        let lin = ex.linear.as_ref().unwrap();
        assert!((lin.eval(&ex.z0).unwrap() + 0.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mut v = || (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>();
            let s = ExtendedState::new(v(), v(), v(), v()).unwrap();
            for val in lin.extended_condition(ex.model.as_ref(), &s) {
                assert!(val.abs() <= 1e-12, "{val}");
            }
        }
    }

    #[test]
    fn example4_values_and_round_trip() {
        let ex = make_example4(1.0, [0.5f64.sqrt(), 0.5f64.sqrt(), 0.0]).unwrap();
        assert!((ex.param("casimir_level").unwrap() - 0.5).abs() < 1e-15);
        assert!((ex.z0.x[0] - 0.5f64.sqrt()).abs() < 1e-15 && ex.z0.y[0] == 0.0);
        let cas = ex.invariant("casimir").unwrap();
        let kin = ex.invariant("kinetic").unwrap();
        let h = ex.invariant("hamiltonian").unwrap();
        let t = ex.transform.as_ref().unwrap();
        for z in random_points(100, 1, -0.99, 0.99, 4) {
            assert!((cas(&z).unwrap() - 0.5).abs() <= 1e-12);
            assert!((kin(&z).unwrap() - h(&z).unwrap()).abs() <= 1e-12);
            let y = (t.forward)(&z).unwrap();
            let back = (t.inverse)(&y).unwrap();
            assert!((back.x[0] - z.x[0]).abs() < 1e-12 && (back.y[0] - z.y[0]).abs() < 1e-12);
        }
        let outside = PhaseState::new(vec![1.5], vec![0.0]).unwrap();
        assert!(matches!(cas(&outside), Err(Error::TransformSingular(_))));
        let edge = PhaseState::new(vec![1.0 + 1e-16], vec![0.0]).unwrap();
        assert!(cas(&edge).is_ok());
    }

    #[test]
    fn registry() {
        assert!(example_by_name("ex5", None).is_err());
        let ex = example_by_name("ex3", Some(0.7)).unwrap();
        assert_eq!(ex.param("c"), Some(0.7));
        assert!(ex.tracker("quadratic").is_ok());
        assert!(ex.tracker("energy").is_err());
    }
}
