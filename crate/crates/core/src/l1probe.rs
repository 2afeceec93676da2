//! L1 data cache: capacity, associativity, line size and latency from gap
//! strings.
//!
//! The probe runs three loops. With `MaxAssoc + 1` locations it widens the
//! gap until the last location overflows a set (capacity). At that capacity
//! it halves the number of locations until they fit in one set again
//! (associativity). Finally it nudges the last location by growing offsets
//! until it lands in the next set (line size).

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::Prober;
use crate::refstring::build_gap_string;
use crate::timing::DETECTION_MARGIN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct L1Params {
    pub lower: usize,
    pub upper: usize,
    pub max_assoc: usize,
}

impl Default for L1Params {
    fn default() -> Self {
        L1Params { lower: 1 << 10, upper: 4 << 20, max_assoc: 16 }
    }
}

impl L1Params {
    pub fn validate(&self) -> Result<()> {
        if self.lower >= self.upper {
            return Err(Error::InvalidRange { lower: self.lower, upper: self.upper });
        }
        if !self.max_assoc.is_power_of_two() {
            return Err(Error::geometry(format!("MaxAssoc {} is not a power of two", self.max_assoc)));
        }
        Ok(())
    }
}

/// How the associativity loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssocOutcome {
    /// Found at the granularity of halving.
    Detected,
    /// Even two locations conflict: direct mapped.
    DirectMapped,
    /// `MaxAssoc + 1` locations still fit one set.
    ExceedsMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L1Report {
    pub capacity: usize,
    pub associativity: usize,
    pub linesize: usize,
    /// Cycles, rounded from the baseline.
    pub latency: u32,
    pub baseline_cycles: f64,
    pub associativity_outcome: AssocOutcome,
    /// Wall-clock seconds for the whole probe.
    pub cost: f64,
}

fn above(t: f64, baseline: f64) -> bool {
    t >= baseline + DETECTION_MARGIN
}

/// Gap sizes from `lo` to `hi`: each power-of-two step plus three evenly
/// spaced points inside the octave, keeping only multiples of `word`.
pub fn gap_schedule(lo: usize, hi: usize, word: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = lo.max(word);
    while p <= hi {
        for q in [4 * p, 5 * p, 6 * p, 7 * p] {
            let k = q / 4;
            if q % 4 == 0 && k % word == 0 && k <= hi && out.last().is_none_or(|&last| k > last) {
                out.push(k);
            }
        }
        p *= 2;
    }
    out
}

/// All-hit reference time: `G(2, LB/2, 0)`.
pub fn baseline(prober: &mut Prober<'_>, params: &L1Params) -> Result<f64> {
    let gap = params.lower / 2;
    Ok(prober.measure(|env, _| build_gap_string(2, gap, 0, env))?.min_cycles_per_access)
}

/// All-hit time of `n` locations packed inside `LB`, floored at the
/// baseline. Chains of different lengths can differ by a fraction of a cycle
/// on real cores even when every load hits.
pub fn reference(prober: &mut Prober<'_>, params: &L1Params, n: usize, baseline: f64) -> Result<f64> {
    if n <= 2 {
        return Ok(baseline);
    }
    let word = prober.env().word;
    let gap = (params.lower / n / word * word).max(word);
    let t = prober.measure(|env, _| build_gap_string(n, gap, 0, env))?.min_cycles_per_access;
    Ok(baseline.max(t))
}

/// First gap `k` at which `G(MaxAssoc + 1, k, 0)` rises above the baseline;
/// the capacity is `k * MaxAssoc`.
pub fn find_capacity(prober: &mut Prober<'_>, params: &L1Params, baseline: f64) -> Result<usize> {
    let n = params.max_assoc + 1;
    let word = prober.env().word;
    let baseline = reference(prober, params, n, baseline)?;
    for gap in gap_schedule(params.lower / params.max_assoc, params.upper / params.max_assoc, word) {
        let t = prober.measure(|env, _| build_gap_string(n, gap, 0, env))?.min_cycles_per_access;
        if above(t, baseline) {
            return Ok(gap * params.max_assoc);
        }
    }
    Err(Error::NotFound("L1 capacity"))
}

/// Halves `n` from `MaxAssoc` until `G(n + 1, capacity / n, 0)` hits; the
/// associativity is `2n`.
pub fn find_associativity(
    prober: &mut Prober<'_>,
    params: &L1Params,
    capacity: usize,
    baseline: f64,
) -> Result<(usize, AssocOutcome)> {
    let mut n = params.max_assoc;
    while n >= 1 {
        let gap = capacity / n;
        let reference = reference(prober, params, n + 1, baseline)?;
        let t = prober.measure(|env, _| build_gap_string(n + 1, gap, 0, env))?.min_cycles_per_access;
        if !above(t, reference) {
            return Ok(if n == params.max_assoc {
                (params.max_assoc, AssocOutcome::ExceedsMax)
            } else {
                (2 * n, AssocOutcome::Detected)
            });
        }
        n /= 2;
    }
    Ok((1, AssocOutcome::DirectMapped))
}

/// Smallest offset that moves the last of `assoc + 1` way-spaced locations
/// into the next set.
pub fn find_linesize(
    prober: &mut Prober<'_>,
    params: &L1Params,
    capacity: usize,
    assoc: usize,
    baseline: f64,
) -> Result<usize> {
    let env = prober.env();
    let baseline = reference(prober, params, assoc + 1, baseline)?;
    let gap = capacity / assoc;
    let mut offset = env.word;
    while offset < env.pagesize {
        let t = prober.measure(|env, _| build_gap_string(assoc + 1, gap, offset, env))?.min_cycles_per_access;
        if !above(t, baseline) {
            return Ok(offset);
        }
        offset += env.word;
    }
    Err(Error::NotFound("L1 line size"))
}

pub fn run_l1_probe(prober: &mut Prober<'_>, params: &L1Params) -> Result<L1Report> {
    params.validate()?;
    let started = Instant::now();
    let base = baseline(prober, params)?;
    let capacity = find_capacity(prober, params, base)?;
    let (associativity, outcome) = find_associativity(prober, params, capacity, base)?;
    let linesize = find_linesize(prober, params, capacity, associativity, base)?;
    Ok(L1Report {
        capacity,
        associativity,
        linesize,
        latency: base.round().max(1.0) as u32,
        baseline_cycles: base,
        associativity_outcome: outcome,
        cost: started.elapsed().as_secs_f64(),
    })
}
