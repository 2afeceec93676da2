//! TLB levels from one-line-per-page strings.
//!
//! A `T(1, k)` sweep finds suspect footprints where the time jumps. Cache
//! edges also cause jumps, but they move when the lines per page change
//! while TLB edges do not, so each suspect is re-measured with 2, 3 and 4
//! lines per page and kept only if the jump is still between the same two
//! sample points.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cacheprobe::{run_sweep, sample_points, CurveKind, ResponseCurve, SweepOptions, KB, MB};
use crate::error::{Error, Result};
use crate::probe::Prober;
use crate::refstring::build_tlb_string;

/// Lines per page used to confirm a suspect.
pub const CONFIRMING_N: [usize; 3] = [2, 3, 4];
/// A jump is at least this many cycles...
pub const JUMP_ABSOLUTE: f64 = 0.5;
/// ...and at least this fraction of the lower time.
pub const JUMP_RELATIVE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlbParams {
    pub lower: usize,
    pub upper: usize,
}

impl TlbParams {
    /// 4 pages up to 8 MiB.
    pub fn for_pagesize(pagesize: usize) -> Self {
        TlbParams { lower: 4 * pagesize, upper: 8 * MB }
    }

    pub fn validate(&self, pagesize: usize) -> Result<()> {
        if self.lower == 0 || self.lower >= self.upper {
            return Err(Error::InvalidRange { lower: self.lower, upper: self.upper });
        }
        if !self.lower.is_multiple_of(pagesize) || !self.upper.is_multiple_of(pagesize) {
            return Err(Error::geometry(format!(
                "TLB range {}..{} is not in whole pages of {pagesize}",
                self.lower, self.upper
            )));
        }
        Ok(())
    }
}

pub fn is_jump(before: f64, after: f64) -> bool {
    after - before >= JUMP_ABSOLUTE.max(JUMP_RELATIVE * before)
}

/// The sample schedule in pages, scaled to bytes.
pub fn tlb_sample_points(params: &TlbParams, pagesize: usize) -> Result<Vec<usize>> {
    params.validate(pagesize)?;
    let pages = sample_points(params.lower / pagesize * KB, params.upper / pagesize * KB)?;
    Ok(pages.into_iter().map(|p| p / KB * pagesize).collect())
}

/// `T(n, k)` over the schedule.
pub fn run_tlb_sweep(
    prober: &mut Prober<'_>,
    points: &[usize],
    n: usize,
    options: SweepOptions,
) -> Result<ResponseCurve> {
    run_sweep(prober, points, CurveKind::Tlb { lines_per_page: n }, options, |fp, env, seed| {
        build_tlb_string(n, fp, env, seed)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlbSuspect {
    /// First footprint after the jump.
    pub footprint: usize,
    /// Sample point before it.
    pub previous: usize,
    pub confirmed: bool,
    pub confirming_n: Vec<usize>,
}

/// Consecutive pairs of the curve that jump; knocked-out points take the
/// value of the nearest measured point below.
pub fn find_suspects(curve: &ResponseCurve) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut last: Option<(usize, f64)> = None;
    for p in &curve.points {
        let value = match last {
            Some((_, v)) if p.knocked_out || !p.measured() => v,
            _ => p.min_cycles,
        };
        if let Some((fp, v)) = last {
            if is_jump(v, value) {
                out.push((fp, p.footprint));
            }
        }
        last = Some((p.footprint, value));
    }
    out
}

pub fn confirm_suspect(prober: &mut Prober<'_>, previous: usize, footprint: usize) -> Result<TlbSuspect> {
    let mut confirming_n = Vec::new();
    for n in CONFIRMING_N {
        let before = prober.measure(|env, seed| build_tlb_string(n, previous, env, seed))?.min_cycles_per_access;
        let after = prober.measure(|env, seed| build_tlb_string(n, footprint, env, seed))?.min_cycles_per_access;
        if is_jump(before, after) {
            confirming_n.push(n);
        }
    }
    Ok(TlbSuspect { footprint, previous, confirmed: confirming_n.len() == CONFIRMING_N.len(), confirming_n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlbLevel {
    pub level: usize,
    /// Bytes of address space the level maps.
    pub capacity: usize,
    pub entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlbProbeResult {
    pub curve: ResponseCurve,
    pub suspects: Vec<TlbSuspect>,
    pub levels: Vec<TlbLevel>,
    pub cost: f64,
}

pub fn run_tlb_probe(prober: &mut Prober<'_>, params: &TlbParams, options: SweepOptions) -> Result<TlbProbeResult> {
    let started = Instant::now();
    let pagesize = prober.env().pagesize;
    let points = tlb_sample_points(params, pagesize)?;
    let curve = run_tlb_sweep(prober, &points, 1, options)?;
    let mut suspects = Vec::new();
    for (previous, footprint) in find_suspects(&curve) {
        suspects.push(confirm_suspect(prober, previous, footprint)?);
    }
    let levels = suspects
        .iter()
        .filter(|s| s.confirmed)
        .enumerate()
        .map(|(i, s)| TlbLevel { level: i + 1, capacity: s.previous, entries: s.previous / pagesize })
        .collect();
    Ok(TlbProbeResult { curve, suspects, levels, cost: started.elapsed().as_secs_f64() })
}
