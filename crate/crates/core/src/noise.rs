//! Reproducible Brownian increments on a fine time grid.
//!
//! Every path draws from ChaCha8 keyed by `splitmix64` applied to
//! `(seed, path_index)`; channel `r` reads ChaCha stream `r`. Normals come
//! from Box–Muller on 53-bit uniforms, both outputs consumed in order. The
//! draw for `(seed, path_index, r, k)` therefore does not depend on how many
//! channels or paths are generated alongside it, nor on thread scheduling.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Increments over one window: `delta[0]` is the window length, `delta[r]`
/// the Brownian increment of channel `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepIncrements {
    pub delta: Vec<f64>,
}

impl StepIncrements {
    pub fn new(delta: Vec<f64>) -> Result<Self> {
        match delta.first() {
            Some(&tau) if tau >= 0.0 => Ok(StepIncrements { delta }),
            Some(_) => Err(Error::InvalidArgument("negative substep length".into())),
            None => Err(Error::InvalidArgument("empty increment vector".into())),
        }
    }

    /// Deterministic window: clock only, all noise channels zero.
    pub fn deterministic(tau: f64, m: usize) -> Self {
        let mut delta = vec![0.0; m + 1];
        delta[0] = tau;
        StepIncrements { delta }
    }

    pub fn tau(&self) -> f64 {
        self.delta[0]
    }

    pub fn channels(&self) -> usize {
        self.delta.len() - 1
    }

    pub fn is_zero(&self) -> bool {
        self.delta.iter().all(|&d| d == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseGrid {
    t0: f64,
    dt_fine: f64,
    n_fine: usize,
    /// `noise[r - 1][k]` is the increment of channel r over fine interval k.
    noise: Vec<Vec<f64>>,
    seed: u64,
    path_index: u64,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The ChaCha key for a given path.
fn path_key(seed: u64, path_index: u64) -> [u8; 32] {
    let mut p = path_index;
    let mut state = seed ^ splitmix64(&mut p);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

fn uniform53(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draws for one (seed, path, channel) stream.
pub fn standard_normals(seed: u64, path_index: u64, channel: u64, count: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::from_seed(path_key(seed, path_index));
    rng.set_stream(channel);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let u1 = 1.0 - uniform53(&mut rng);
        let u2 = uniform53(&mut rng);
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        out.push(radius * angle.cos());
        if out.len() < count {
            out.push(radius * angle.sin());
        }
    }
    out
}

impl NoiseGrid {
    /// Samples `m` independent Wiener channels on `n_fine` equal intervals of
    /// `[t0, t_end]`.
    pub fn build(
        seed: u64,
        path_index: u64,
        m: usize,
        t0: f64,
        t_end: f64,
        n_fine: usize,
    ) -> Result<Self> {
        if !(t_end > t0) || !t0.is_finite() || !t_end.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid time range [{t0}, {t_end}]")));
        }
        if n_fine == 0 {
            return Err(Error::InvalidArgument("n_fine must be at least 1".into()));
        }
        let dt_fine = (t_end - t0) / n_fine as f64;
        let scale = dt_fine.sqrt();
        let noise = (1..=m as u64)
            .map(|r| {
                let mut z = standard_normals(seed, path_index, r, n_fine);
                z.iter_mut().for_each(|v| *v *= scale);
                z
            })
            .collect();
        Ok(NoiseGrid {
            t0,
            dt_fine,
            n_fine,
            noise,
            seed,
            path_index,
        })
    }

    /// A grid with prescribed noise increments (one vector per channel).
    pub fn from_increments(t0: f64, dt_fine: f64, noise: Vec<Vec<f64>>) -> Result<Self> {
        if !(dt_fine > 0.0) {
            return Err(Error::InvalidArgument("dt_fine must be positive".into()));
        }
        let n_fine = noise.first().map_or(0, Vec::len);
        if noise.iter().any(|c| c.len() != n_fine) {
            return Err(Error::InvalidArgument("channels of unequal length".into()));
        }
        Ok(NoiseGrid {
            t0,
            dt_fine,
            n_fine,
            noise,
            seed: 0,
            path_index: 0,
        })
    }

    /// A grid with no noise channels.
    pub fn deterministic(t0: f64, dt_fine: f64, n_fine: usize) -> Result<Self> {
        if !(dt_fine > 0.0) || n_fine == 0 {
            return Err(Error::InvalidArgument("invalid deterministic grid".into()));
        }
        Ok(NoiseGrid {
            t0,
            dt_fine,
            n_fine,
            noise: Vec::new(),
            seed: 0,
            path_index: 0,
        })
    }

    pub fn channels(&self) -> usize {
        self.noise.len()
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt_fine(&self) -> f64 {
        self.dt_fine
    }

    pub fn n_fine(&self) -> usize {
        self.n_fine
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path_index(&self) -> u64 {
        self.path_index
    }

    /// Increments of channel `r`; channel 0 is the clock.
    pub fn channel(&self, r: usize) -> Vec<f64> {
        if r == 0 {
            vec![self.dt_fine; self.n_fine]
        } else {
            self.noise[r - 1].clone()
        }
    }

    /// Noise increments of channel `r ≥ 1` without copying.
    pub fn noise(&self, r: usize) -> &[f64] {
        &self.noise[r - 1]
    }

    /// Number of steps of `fine_per_step` fine intervals each.
    pub fn steps(&self, fine_per_step: usize) -> usize {
        self.n_fine / fine_per_step
    }

    /// Each coarse increment is the left-to-right sum of `factor` fine ones.
    pub fn coarsen(&self, factor: usize) -> Result<NoiseGrid> {
        if factor == 0 || self.n_fine % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "factor {factor} does not divide {} fine steps",
                self.n_fine
            )));
        }
        let noise = self
            .noise
            .iter()
            .map(|c| c.chunks_exact(factor).map(sum_in_order).collect())
            .collect();
        Ok(NoiseGrid {
            t0: self.t0,
            dt_fine: self.dt_fine * factor as f64,
            n_fine: self.n_fine / factor,
            noise,
            seed: self.seed,
            path_index: self.path_index,
        })
    }

    /// Increments over fine intervals `[start, end)`.
    pub fn window(&self, start: usize, end: usize) -> StepIncrements {
        let mut delta = Vec::with_capacity(self.noise.len() + 1);
        delta.push((end - start) as f64 * self.dt_fine);
        for c in &self.noise {
            delta.push(sum_in_order(&c[start..end]));
        }
        StepIncrements { delta }
    }

    /// Splits step `step` (of `fine_per_step` fine intervals) into consecutive
    /// windows of the given fractions.
    pub fn step_windows(
        &self,
        fine_per_step: usize,
        step: usize,
        split: &[f64],
    ) -> Result<Vec<StepIncrements>> {
        if fine_per_step == 0 {
            return Err(Error::InvalidArgument("fine_per_step must be positive".into()));
        }
        if (step + 1) * fine_per_step > self.n_fine {
            return Err(Error::InvalidArgument(format!("step {step} beyond the grid")));
        }
        if split.is_empty() || split.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::InvalidArgument("fractions must be positive".into()));
        }
        let total: f64 = split.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("fractions sum to {total}, not 1")));
        }
        let base = step * fine_per_step;
        let mut cum = 0.0;
        let mut start = 0usize;
        let mut out = Vec::with_capacity(split.len());
        for &f in split {
            cum += f;
            let pos = cum * fine_per_step as f64;
            let end = pos.round();
            if (pos - end).abs() > 1e-9 {
                return Err(Error::WindowMisaligned {
                    fraction: cum,
                    fine_per_step,
                });
            }
            let end = end as usize;
            out.push(self.window(base + start, base + end));
            start = end;
        }
        Ok(out)
    }

    /// Clips every fine noise increment to |ΔW| ≤ 2√(h·|ln h|), h = dt_fine.
    pub fn truncated(&self) -> NoiseGrid {
        let h = self.dt_fine;
        let bound = 2.0 * (h * h.ln().abs()).sqrt();
        let mut out = self.clone();
        for c in &mut out.noise {
            c.iter_mut().for_each(|v| *v = v.clamp(-bound, bound));
        }
        out
    }
}

fn sum_in_order(xs: &[f64]) -> f64 {
    let mut iter = xs.iter();
    let first = iter.next().copied().unwrap_or(0.0);
    iter.fold(first, |acc, &v| acc + v)
}
