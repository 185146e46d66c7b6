//! SplitMix64 randomness and category selection for template extraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// SplitMix64 generator. Identical seeds give identical sequences on every platform.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n) by 128-bit multiply-high. `n` must be > 0.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in the closed range [lo, hi].
    pub fn range_i64(&mut self, lo: i64, hi: i64) -> i64 {
        lo + self.below((hi - lo + 1) as u64) as i64
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller (one draw per call, two uniforms consumed).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Child generator seeded from this one's next output.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }
}

/// Which subset of the label space templates may draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    All,
    Things,
    Stuff,
    Movable,
    Stationary,
}

/// Category lists per pool for one label space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryDivision {
    pub things: Vec<u16>,
    pub stuff: Vec<u16>,
    pub movable: Vec<u16>,
    pub stationary: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryPolicy {
    pub domain_space: Vec<u16>,
    pub pool: Vec<u16>,
    pub long_tail_pool: Vec<u16>,
    pub picks_per_iteration: usize,
    pub include_long_tail: bool,
}

impl CategoryPolicy {
    pub fn new(
        domain_space: Vec<u16>,
        pool: Vec<u16>,
        long_tail_pool: Vec<u16>,
        picks_per_iteration: usize,
        include_long_tail: bool,
    ) -> Result<Self> {
        if let Some(k) = pool.iter().find(|k| !domain_space.contains(k)) {
            return Err(Error::Policy(format!("pool id {k} not in domain space")));
        }
        if let Some(k) = long_tail_pool.iter().find(|k| !domain_space.contains(k)) {
            return Err(Error::Policy(format!("long-tail id {k} not in domain space")));
        }
        Ok(Self {
            domain_space,
            pool,
            long_tail_pool,
            picks_per_iteration,
            include_long_tail,
        })
    }

    /// Builds a policy whose pool is the named subset of `division`.
    pub fn from_division(
        domain_space: Vec<u16>,
        division: &CategoryDivision,
        kind: PoolKind,
        long_tail_pool: Vec<u16>,
        picks_per_iteration: usize,
        include_long_tail: bool,
    ) -> Result<Self> {
        let pool = match kind {
            PoolKind::All => domain_space.clone(),
            PoolKind::Things => division.things.clone(),
            PoolKind::Stuff => division.stuff.clone(),
            PoolKind::Movable => division.movable.clone(),
            PoolKind::Stationary => division.stationary.clone(),
        };
        Self::new(
            domain_space,
            pool,
            long_tail_pool,
            picks_per_iteration,
            include_long_tail,
        )
    }
}

/// Draws `k` distinct entries of `candidates` without replacement (partial Fisher-Yates).
fn draw_distinct(rng: &mut Rng, mut candidates: Vec<u16>, k: usize) -> Vec<u16> {
    let k = k.min(candidates.len());
    for i in 0..k {
        let j = i + rng.below((candidates.len() - i) as u64) as usize;
        candidates.swap(i, j);
    }
    candidates.truncate(k);
    candidates
}

fn residual(pool: &[u16], exclude: &[u16]) -> Vec<u16> {
    let mut out: Vec<u16> = pool.iter().copied().filter(|k| !exclude.contains(k)).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Picks template categories uniformly without replacement from `pool \ exclude`,
/// followed (when enabled) by up to two long-tail ids drawn the same way.
pub fn pick_categories(rng: &mut Rng, policy: &CategoryPolicy, exclude: &[u16]) -> Result<Vec<u16>> {
    let candidates = residual(&policy.pool, exclude);
    if candidates.len() < policy.picks_per_iteration {
        return Err(Error::Policy(format!(
            "pool {:?} has {} ids left after excluding {:?}, need {}",
            policy.pool,
            candidates.len(),
            exclude,
            policy.picks_per_iteration
        )));
    }
    let mut picked = draw_distinct(rng, candidates, policy.picks_per_iteration);
    if policy.include_long_tail {
        let tail = residual(&policy.long_tail_pool, exclude);
        for k in draw_distinct(rng, tail, 2) {
            if !picked.contains(&k) {
                picked.push(k);
            }
        }
    }
    Ok(picked)
}
