//! Truncated cylindrical Wiener increments.
//!
//! Every increment is a pure function of `(master seed, path, step, stream)`:
//! a ChaCha8 key is derived from the seed, path and stream tag, and the step
//! selects the ChaCha stream. Paths can therefore be evaluated in any order
//! and on any number of threads with identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STREAM_W1: u64 = 1;
const STREAM_W2: u64 = 2;
const STREAM_BRIDGE: u64 = 16;

/// Identifies one Brownian path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub path_index: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64, path_index: u64) -> Self {
        SeedSpec {
            master_seed,
            path_index,
        }
    }

    fn rng(&self, stream: u64, step: u64) -> ChaCha8Rng {
        let mut state = self.master_seed ^ 0x5851_f42d_4c95_7f2d;
        state = splitmix(state ^ splitmix(self.path_index.wrapping_add(0x9e37_79b9)));
        state = splitmix(state ^ splitmix(stream.wrapping_mul(0xbf58_476d_1ce4_e5b9)));
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(step);
        rng
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Increments of the `M₁ + M₂` scalar Brownian motions over one step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseIncrement {
    pub dw1: Vec<f64>,
    pub dw2: Vec<f64>,
    pub dt: f64,
}

impl NoiseIncrement {
    pub fn zeros(m1: usize, m2: usize, dt: f64) -> Self {
        NoiseIncrement {
            dw1: vec![0.0; m1],
            dw2: vec![0.0; m2],
            dt,
        }
    }
}

/// Increments for `(seed, step)`, each entry `N(0, dt)`.
pub fn increments(seed: SeedSpec, step: u64, dt: f64, m1: usize, m2: usize) -> Result<NoiseIncrement> {
    check_dt(dt)?;
    let mut out = NoiseIncrement::zeros(m1, m2, dt);
    fill_increment(seed, step, &mut out);
    Ok(out)
}

fn fill_increment(seed: SeedSpec, step: u64, out: &mut NoiseIncrement) {
    let sd = out.dt.sqrt();
    let mut r1 = seed.rng(STREAM_W1, step);
    for w in out.dw1.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut r1);
        *w = sd * z;
    }
    let mut r2 = seed.rng(STREAM_W2, step);
    for w in out.dw2.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut r2);
        *w = sd * z;
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::param("dt", format!("must be positive, got {dt}")));
    }
    Ok(())
}

/// Anything that can hand a solver the increment for a given step.
pub trait IncrementSource: Sync {
    fn dt(&self) -> f64;

    /// Writes the increment of `step` into `out` (sized `M₁`, `M₂`).
    fn fill(&self, step: usize, out: &mut NoiseIncrement);

    fn seed(&self) -> Option<SeedSpec> {
        None
    }

    /// `(steps, M₁, M₂)` when the source is finite.
    fn shape(&self) -> Option<(usize, usize, usize)> {
        None
    }
}

/// Increments generated on the fly from a seed.
#[derive(Debug, Clone, Copy)]
pub struct SeededNoise {
    pub seed: SeedSpec,
    pub dt: f64,
}

impl SeededNoise {
    pub fn new(seed: SeedSpec, dt: f64) -> Result<Self> {
        check_dt(dt)?;
        Ok(SeededNoise { seed, dt })
    }
}

impl IncrementSource for SeededNoise {
    fn dt(&self) -> f64 {
        self.dt
    }

    fn fill(&self, step: usize, out: &mut NoiseIncrement) {
        out.dt = self.dt;
        fill_increment(self.seed, step as u64, out);
    }

    fn seed(&self) -> Option<SeedSpec> {
        Some(self.seed)
    }
}

/// A materialized Brownian path: `steps × M` increments per family.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    seed: SeedSpec,
    dt: f64,
    steps: usize,
    m1: usize,
    m2: usize,
    level: u32,
    dw1: Vec<f64>,
    dw2: Vec<f64>,
}

impl BrownianPath {
    pub fn generate(seed: SeedSpec, dt: f64, steps: usize, m1: usize, m2: usize) -> Result<Self> {
        check_dt(dt)?;
        let mut dw1 = Vec::with_capacity(steps * m1);
        let mut dw2 = Vec::with_capacity(steps * m2);
        let mut inc = NoiseIncrement::zeros(m1, m2, dt);
        for step in 0..steps {
            fill_increment(seed, step as u64, &mut inc);
            dw1.extend_from_slice(&inc.dw1);
            dw2.extend_from_slice(&inc.dw2);
        }
        Ok(BrownianPath {
            seed,
            dt,
            steps,
            m1,
            m2,
            level: 0,
            dw1,
            dw2,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn m1(&self) -> usize {
        self.m1
    }

    pub fn m2(&self) -> usize {
        self.m2
    }

    pub fn dw1(&self, step: usize) -> &[f64] {
        &self.dw1[step * self.m1..(step + 1) * self.m1]
    }

    pub fn dw2(&self, step: usize) -> &[f64] {
        &self.dw2[step * self.m2..(step + 1) * self.m2]
    }

    /// Brownian-bridge refinement to `dt/2`: each coarse increment `ΔW` splits
    /// into `ΔW/2 + √(dt/4)·Z` and the remainder.
    pub fn refine(&self) -> BrownianPath {
        let level = self.level + 1;
        let half_sd = (self.dt / 4.0).sqrt();
        let split = |coarse: &[f64], m: usize, family: u64| -> Vec<f64> {
            let mut fine = Vec::with_capacity(coarse.len() * 2);
            for step in 0..self.steps {
                let stream = STREAM_BRIDGE + 2 * level as u64 + family;
                let mut rng = self.seed.rng(stream, step as u64);
                let row = &coarse[step * m..(step + 1) * m];
                let mut first = Vec::with_capacity(m);
                let mut second = Vec::with_capacity(m);
                for &w in row {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let a = 0.5 * w + half_sd * z;
                    first.push(a);
                    second.push(w - a);
                }
                fine.extend_from_slice(&first);
                fine.extend_from_slice(&second);
            }
            fine
        };
        BrownianPath {
            seed: self.seed,
            dt: self.dt / 2.0,
            steps: self.steps * 2,
            m1: self.m1,
            m2: self.m2,
            level,
            dw1: split(&self.dw1, self.m1, 0),
            dw2: split(&self.dw2, self.m2, 1),
        }
    }

    /// Pairwise sums back to `2·dt`. Odd step counts are rejected.
    pub fn coarsen(&self) -> Result<BrownianPath> {
        if !self.steps.is_multiple_of(2) {
            return Err(Error::Precondition(format!(
                "cannot coarsen a path with {} steps",
                self.steps
            )));
        }
        let merge = |fine: &[f64], m: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(fine.len() / 2);
            for pair in fine.chunks_exact(2 * m) {
                for k in 0..m {
                    out.push(pair[k] + pair[m + k]);
                }
            }
            out
        };
        Ok(BrownianPath {
            seed: self.seed,
            dt: self.dt * 2.0,
            steps: self.steps / 2,
            m1: self.m1,
            m2: self.m2,
            level: self.level.saturating_sub(1),
            dw1: merge(&self.dw1, self.m1),
            dw2: merge(&self.dw2, self.m2),
        })
    }

    /// The same path with all increments scaled by zero (deterministic limit).
    pub fn zeroed(&self) -> BrownianPath {
        let mut out = self.clone();
        out.dw1.iter_mut().for_each(|w| *w = 0.0);
        out.dw2.iter_mut().for_each(|w| *w = 0.0);
        out
    }
}

impl IncrementSource for BrownianPath {
    fn dt(&self) -> f64 {
        self.dt
    }

    fn fill(&self, step: usize, out: &mut NoiseIncrement) {
        out.dt = self.dt;
        out.dw1.copy_from_slice(self.dw1(step));
        out.dw2.copy_from_slice(self.dw2(step));
    }

    fn seed(&self) -> Option<SeedSpec> {
        Some(self.seed)
    }

    fn shape(&self) -> Option<(usize, usize, usize)> {
        Some((self.steps, self.m1, self.m2))
    }
}
