//! Response-curve sweeps over `Range(LB, UB)` with knockout and revival.
//!
//! Each pass visits every live sample point in ascending order, builds a
//! fresh string for it and folds the time into the point's minimum. After a
//! pass, interior points whose minimum agrees with both neighbours are
//! knocked out and skipped by later passes; a point that reaches a new
//! minimum revives any knocked-out neighbour. The sweep ends when every
//! point is stable or knocked out.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::Prober;
use crate::refstring::{build_cache_string, MachineEnv, ReferenceString};
use crate::timing::{Minimum, DETECTION_MARGIN};

pub const KB: usize = 1 << 10;
pub const MB: usize = 1 << 20;

/// Sample footprints: 1, 2, 3, 4 KB, then every power of two from 4 KB with
/// three evenly spaced points inside each octave, then `upper` itself.
pub fn sample_points(lower: usize, upper: usize) -> Result<Vec<usize>> {
    if lower == 0 || lower > upper {
        return Err(Error::InvalidRange { lower, upper });
    }
    let mut points: Vec<usize> = (1..=4).map(|k| k * KB).filter(|&p| p >= lower && p <= upper).collect();
    let mut p = 4 * KB;
    while p < upper {
        for q in [4 * p, 5 * p, 6 * p, 7 * p] {
            let k = q / 4;
            if k >= lower && k < upper && points.last().is_none_or(|&last| k > last) {
                points.push(k);
            }
        }
        p *= 2;
    }
    if points.last() != Some(&upper) {
        points.push(upper);
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CurveKind {
    Cache,
    Tlb { lines_per_page: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub footprint: usize,
    /// Minimum cycles per access seen so far; infinite until measured.
    pub min_cycles: f64,
    pub runs_since_min: usize,
    pub knocked_out: bool,
    pub runs: usize,
}

impl SamplePoint {
    pub fn new(footprint: usize) -> Self {
        SamplePoint { footprint, min_cycles: f64::INFINITY, runs_since_min: 0, knocked_out: false, runs: 0 }
    }

    pub fn measured(&self) -> bool {
        self.min_cycles.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCurve {
    pub points: Vec<SamplePoint>,
    pub kind: CurveKind,
    pub total_string_runs: u64,
    /// Wall-clock seconds.
    pub cost: f64,
}

impl ResponseCurve {
    /// `footprint_bytes,cycles_per_access,knocked_out` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("footprint_bytes,cycles_per_access,knocked_out\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.footprint, p.min_cycles, u8::from(p.knocked_out));
        }
        out
    }

    /// Parses the CSV export; the header line is optional.
    pub fn from_csv(text: &str, kind: CurveKind) -> Result<Self> {
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("footprint") {
                continue;
            }
            let bad = |what: &str| Error::Parse(format!("line {}: {what}: {line:?}", lineno + 1));
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(bad("expected 3 fields"));
            }
            let footprint: usize = fields[0].parse().map_err(|_| bad("bad footprint"))?;
            let cycles: f64 = fields[1].parse().map_err(|_| bad("bad cycles"))?;
            let knocked_out = match fields[2] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("knocked_out must be 0 or 1")),
            };
            if !(cycles.is_finite() && cycles > 0.0) {
                return Err(bad("cycles must be positive"));
            }
            if points.last().is_some_and(|p: &SamplePoint| p.footprint >= footprint) {
                return Err(bad("footprints must increase"));
            }
            points.push(SamplePoint { footprint, min_cycles: cycles, runs_since_min: 0, knocked_out, runs: 0 });
        }
        Ok(ResponseCurve { points, kind, total_string_runs: 0, cost: 0.0 })
    }

    pub fn footprints(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.footprint).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepOptions {
    /// Skip points that agree with both neighbours.
    pub knockout: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { knockout: true }
    }
}

fn agree(a: f64, b: f64) -> bool {
    (a - b).abs() <= DETECTION_MARGIN
}

/// Generic stability sweep; `build` makes the string for one footprint.
pub fn run_sweep<F>(
    prober: &mut Prober<'_>,
    footprints: &[usize],
    kind: CurveKind,
    options: SweepOptions,
    mut build: F,
) -> Result<ResponseCurve>
where
    F: FnMut(usize, &MachineEnv, u64) -> Result<ReferenceString>,
{
    if footprints.is_empty() {
        return Err(Error::InvalidRange { lower: 0, upper: 0 });
    }
    let started = Instant::now();
    let runs_before = prober.string_runs();
    let stability = prober.stability();
    let window = stability.window.max(1);
    let base_cal = prober.calibration();
    let mut cals = vec![None; footprints.len()];
    let mut points: Vec<SamplePoint> = footprints.iter().map(|&f| SamplePoint::new(f)).collect();
    let mut minima = vec![Minimum::default(); footprints.len()];

    let live = |p: &SamplePoint| !p.knocked_out && (p.runs == 0 || p.runs_since_min < window);
    while points.iter().any(live) {
        for i in 0..points.len() {
            if !live(&points[i]) {
                continue;
            }
            if points[i].runs >= stability.max_runs {
                return Err(Error::BudgetExceeded { runs: points[i].runs });
            }
            let footprint = points[i].footprint;
            let cal = cals[i].unwrap_or(base_cal);
            let sample = prober.run_with(&cal, |env, seed| build(footprint, env, seed))?;
            if cals[i].is_none() {
                cals[i] = Some(base_cal.refit(sample.seconds_per_load));
            }
            let improved = minima[i].add(sample);
            let point = &mut points[i];
            point.runs += 1;
            point.min_cycles = minima[i].cycles();
            if improved {
                point.runs_since_min = 0;
                if options.knockout {
                    for j in [i.wrapping_sub(1), i + 1] {
                        if let Some(neighbour) = points.get_mut(j) {
                            if neighbour.knocked_out {
                                neighbour.knocked_out = false;
                                neighbour.runs_since_min = 0;
                            }
                        }
                    }
                }
            } else {
                point.runs_since_min += 1;
            }
        }
        if options.knockout {
            for i in 1..points.len().saturating_sub(1) {
                let (prev, cur, next) = (&points[i - 1], &points[i], &points[i + 1]);
                if !cur.knocked_out
                    && prev.measured()
                    && cur.measured()
                    && next.measured()
                    && agree(cur.min_cycles, prev.min_cycles)
                    && agree(cur.min_cycles, next.min_cycles)
                {
                    points[i].knocked_out = true;
                    points[i].runs_since_min = window;
                }
            }
        }
    }
    Ok(ResponseCurve {
        points,
        kind,
        total_string_runs: prober.string_runs() - runs_before,
        cost: started.elapsed().as_secs_f64(),
    })
}

/// Cache response curve from `C(k)` strings.
pub fn run_cache_sweep(prober: &mut Prober<'_>, footprints: &[usize], options: SweepOptions) -> Result<ResponseCurve> {
    run_sweep(prober, footprints, CurveKind::Cache, options, build_cache_string)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheParams {
    pub lower: usize,
    pub upper: usize,
}

impl Default for CacheParams {
    fn default() -> Self {
        CacheParams { lower: KB, upper: 32 * MB }
    }
}
