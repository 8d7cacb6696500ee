//! Masking-ratio schedules, training-time ratio samplers, and mask application.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::{Error, Result};

/// Shape of the kept-fraction curve τ used at inference, and of the ratio
/// distribution used in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Schedule {
    #[default]
    Linear,
    Cosine,
}

impl Schedule {
    pub const ALL: [Schedule; 2] = [Schedule::Linear, Schedule::Cosine];

    pub fn name(self) -> &'static str {
        match self {
            Schedule::Linear => "linear",
            Schedule::Cosine => "cosine",
        }
    }

    /// Kept fraction τ(x) for progress `x` in [0, 1].
    pub fn tau(self, x: f64) -> f64 {
        match self {
            Schedule::Linear => x,
            Schedule::Cosine => 1.0 - (FRAC_PI_2 * x).cos(),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Schedule::Linear),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(Error::Config(format!(
                "unknown schedule {other:?}; expected linear|cosine"
            ))),
        }
    }
}

/// Number of tokens kept after iteration `t` of `total`: `floor(τ(t/T)·n)`,
/// except that the final iteration keeps all `n`.
///
/// This is the raw formula. Decoders follow [`keep_trajectory`], which also
/// guarantees at least one new reveal per iteration.
pub fn keep_count(t: usize, total: usize, n: usize, schedule: Schedule) -> Result<usize> {
    if t == 0 || t > total {
        return Err(Error::IterationOutOfRange { t, total });
    }
    if total > n {
        return Err(Error::TooManyIterations { total, n });
    }
    if t == total {
        return Ok(n);
    }
    Ok(match schedule {
        // Integer arithmetic avoids x.999... artifacts at exact multiples.
        Schedule::Linear => t * n / total,
        Schedule::Cosine => {
            let v = schedule.tau(t as f64 / total as f64) * n as f64;
            // Guard against values that are mathematically integral but land just below.
            ((v + 1e-9).floor() as usize).min(n)
        }
    })
}

/// Cumulative kept counts for t = 1..=T after applying the progress rule: every
/// iteration reveals at least one new token, and enough tokens are left for the
/// remaining iterations to do the same. Equals [`keep_count`] wherever the raw
/// formula already makes progress.
pub fn keep_trajectory(total: usize, n: usize, schedule: Schedule) -> Result<Vec<usize>> {
    if total == 0 {
        return Err(Error::IterationOutOfRange { t: 0, total });
    }
    let mut out = Vec::with_capacity(total);
    let mut prev = 0usize;
    for t in 1..=total {
        let raw = keep_count(t, total, n, schedule)?;
        let k = raw.max(prev + 1).min(n - (total - t));
        out.push(k);
        prev = k;
    }
    Ok(out)
}

/// Training mask ratio in (0, 1]. Linear draws `r` uniformly; cosine draws
/// `r = cos(π·u/2)` with `u` uniform on [0, 1), which favours heavy masking.
pub fn sample_mask_ratio<R: Rng + ?Sized>(rng: &mut R, schedule: Schedule) -> f64 {
    let u: f64 = rng.random();
    match schedule {
        Schedule::Linear => 1.0 - u,
        Schedule::Cosine => (FRAC_PI_2 * u).cos(),
    }
}

/// Number of masked positions for ratio `r`: `ceil(r·n)` clamped to [1, n].
pub fn mask_count(r: f64, n: usize) -> usize {
    ((r * n as f64).ceil() as usize).clamp(1, n)
}

/// Masked positions chosen for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub k: usize,
    /// Sorted, distinct positions.
    pub positions: Vec<usize>,
    pub r: f64,
}

impl MaskPlan {
    /// Boolean selection over `n` positions.
    pub fn selection(&self, n: usize) -> Vec<bool> {
        let mut sel = vec![false; n];
        for &p in &self.positions {
            sel[p] = true;
        }
        sel
    }
}

/// Replaces `k` uniformly chosen positions of `y` with `mask_id`.
pub fn apply_mask<R: Rng + ?Sized>(y: &[u32], k: usize, mask_id: u32, rng: &mut R) -> Result<(Vec<u32>, MaskPlan)> {
    let n = y.len();
    if k == 0 || k > n {
        return Err(Error::MaskCount { k, n });
    }
    let mut positions = index::sample(rng, n, k).into_vec();
    positions.sort_unstable();
    let mut masked = y.to_vec();
    for &p in &positions {
        masked[p] = mask_id;
    }
    let plan = MaskPlan {
        k,
        positions,
        r: k as f64 / n as f64,
    };
    Ok((masked, plan))
}

/// Samples a ratio, converts it to a count, and masks.
pub fn sample_and_mask<R: Rng + ?Sized>(
    y: &[u32],
    schedule: Schedule,
    mask_id: u32,
    rng: &mut R,
) -> Result<(Vec<u32>, MaskPlan)> {
    let r = sample_mask_ratio(rng, schedule);
    let (masked, mut plan) = apply_mask(y, mask_count(r, y.len()), mask_id, rng)?;
    plan.r = r;
    Ok((masked, plan))
}
