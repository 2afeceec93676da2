//! Levels from response curves, and the assembled hierarchy report.
//!
//! A curve is read left to right as a sequence of plateaus. The current
//! plateau is summarised by its running median `m`; a point starts a rise
//! when it and every later point lie at least `max(1, 0.15 m)` above `m`.
//! The transition is placed at the last point of the plateau. Any steep
//! ramp after the rise is skipped before the next plateau starts.

use serde::{Deserialize, Serialize};

use crate::cacheprobe::{CacheParams, ResponseCurve, SweepOptions};
use crate::error::{Error, Result};
use crate::l1probe::{L1Params, L1Report};
use crate::refstring::MachineEnv;
use crate::timing::{Stability, DETECTION_MARGIN};
use crate::tlbprobe::{TlbLevel, TlbParams, JUMP_ABSOLUTE, JUMP_RELATIVE};

pub const RISE_ABSOLUTE: f64 = 1.0;
pub const RISE_RELATIVE: f64 = 0.15;
pub const MAX_LEVELS: usize = 4;

pub fn rise_threshold(median: f64) -> f64 {
    RISE_ABSOLUTE.max(RISE_RELATIVE * median)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    /// Last footprint of the plateau.
    pub capacity: usize,
    /// Rounded plateau median, cycles.
    pub latency: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveAnalysis {
    /// At most [`MAX_LEVELS`].
    pub transitions: Vec<Transition>,
    /// Rounded median of the plateau after the last transition.
    pub final_latency: u32,
    /// Transitions found beyond the cap; non-zero asks for human review.
    pub dropped_levels: usize,
    /// Unrounded medians of the kept plateaus, final plateau last.
    #[serde(skip)]
    pub plateau_medians: Vec<f64>,
}

impl CurveAnalysis {
    /// A noise-free step curve with the same plateaus, over `footprints`.
    /// Uses the unrounded medians when present, the reported latencies
    /// otherwise.
    pub fn reconstruct(&self, footprints: &[usize]) -> Vec<(usize, f64)> {
        let level = |i: usize| match self.plateau_medians.get(i) {
            Some(&m) => m,
            None => f64::from(self.transitions.get(i).map_or(self.final_latency, |t| t.latency)),
        };
        footprints
            .iter()
            .map(|&fp| {
                let i = self.transitions.iter().position(|t| fp <= t.capacity).unwrap_or(self.transitions.len());
                (fp, level(i))
            })
            .collect()
    }
}

/// Per-point values used by the analysis. Knocked-out points take the value
/// of the nearest measured point below, or above when none is below.
pub fn effective_values(curve: &ResponseCurve) -> Result<Vec<(usize, f64)>> {
    let live = |i: usize| !curve.points[i].knocked_out && curve.points[i].measured();
    let measured = (0..curve.points.len()).filter(|&i| live(i)).count();
    if measured < 3 {
        return Err(Error::DegenerateCurve { measured });
    }
    let first = (0..curve.points.len()).find(|&i| live(i)).expect("measured points exist");
    let mut value = curve.points[first].min_cycles;
    Ok(curve
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if live(i) {
                value = p.min_cycles;
            }
            (p.footprint, value)
        })
        .collect())
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

/// Plateau segmentation over `(footprint, cycles)` pairs in increasing
/// footprint order.
pub fn analyze_values(values: &[(usize, f64)]) -> Result<CurveAnalysis> {
    if values.len() < 3 {
        return Err(Error::DegenerateCurve { measured: values.len() });
    }
    let v: Vec<f64> = values.iter().map(|&(_, t)| t).collect();
    // suffix_min[j] = min(v[j..]).
    let mut suffix_min = v.clone();
    for j in (0..v.len().saturating_sub(1)).rev() {
        suffix_min[j] = suffix_min[j].min(suffix_min[j + 1]);
    }
    let mut transitions = Vec::new();
    let mut medians = Vec::new();
    let mut plateau = vec![v[0]];
    let mut j = 1;
    while j < v.len() {
        let med = median(&plateau);
        if suffix_min[j] >= med + rise_threshold(med) {
            transitions.push(Transition { capacity: values[j - 1].0, latency: med.round() as u32 });
            medians.push(med);
            while j + 1 < v.len() && v[j + 1] >= v[j] + rise_threshold(v[j]) {
                j += 1;
            }
            plateau.clear();
        }
        plateau.push(v[j]);
        j += 1;
    }
    let final_median = median(&plateau);
    let dropped_levels = transitions.len().saturating_sub(MAX_LEVELS);
    transitions.truncate(MAX_LEVELS);
    medians.truncate(MAX_LEVELS);
    medians.push(final_median);
    Ok(CurveAnalysis {
        transitions,
        final_latency: final_median.round() as u32,
        dropped_levels,
        plateau_medians: medians,
    })
}

pub fn analyze_curve(curve: &ResponseCurve) -> Result<CurveAnalysis> {
    analyze_values(&effective_values(curve)?)
}

/// Transitions of a finished curve.
pub fn detect_transitions(curve: &ResponseCurve) -> Result<Vec<Transition>> {
    Ok(analyze_curve(curve)?.transitions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelReport {
    /// 1-based.
    pub level: usize,
    pub effective_capacity: usize,
    pub latency: u32,
}

pub fn levels_from(analysis: &CurveAnalysis) -> Vec<LevelReport> {
    analysis
        .transitions
        .iter()
        .enumerate()
        .map(|(i, t)| LevelReport { level: i + 1, effective_capacity: t.capacity, latency: t.latency })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineInfo {
    pub pagesize: usize,
    pub word: usize,
    pub l1_linesize: usize,
    pub backend: String,
}

impl MachineInfo {
    pub fn new(env: &MachineEnv, backend: impl Into<String>) -> Self {
        MachineInfo { pagesize: env.pagesize, word: env.word, l1_linesize: env.l1_linesize, backend: backend.into() }
    }
}

/// Wall-clock seconds per probe; absent when the probe did not run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Costs {
    pub l1: Option<f64>,
    pub cache: Option<f64>,
    pub tlb: Option<f64>,
    pub total: f64,
    pub string_runs: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub detection_margin: f64,
    pub rise_absolute: f64,
    pub rise_relative: f64,
    pub jump_absolute: f64,
    pub jump_relative: f64,
    pub max_levels: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            detection_margin: DETECTION_MARGIN,
            rise_absolute: RISE_ABSOLUTE,
            rise_relative: RISE_RELATIVE,
            jump_absolute: JUMP_ABSOLUTE,
            jump_relative: JUMP_RELATIVE,
            max_levels: MAX_LEVELS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub seed: u64,
    pub stability: Stability,
    pub l1: L1Params,
    pub cache: CacheParams,
    pub tlb: TlbParams,
    pub sweep: SweepOptions,
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyReport {
    pub machine: MachineInfo,
    pub l1: Option<L1Report>,
    pub cache_levels: Vec<LevelReport>,
    pub tlb_levels: Vec<TlbLevel>,
    pub costs: Costs,
    pub parameters: Parameters,
    #[serde(skip)]
    pub warnings: Vec<String>,
}

impl HierarchyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Merges probe outputs and cross-checks the first cache level against L1.
pub fn assemble_report(
    machine: MachineInfo,
    l1: Option<L1Report>,
    cache: Option<&CurveAnalysis>,
    tlb_levels: Vec<TlbLevel>,
    costs: Costs,
    parameters: Parameters,
) -> HierarchyReport {
    let mut warnings = Vec::new();
    let cache_levels = cache.map(levels_from).unwrap_or_default();
    if let Some(analysis) = cache {
        if analysis.dropped_levels > 0 {
            warnings.push(format!(
                "{} cache transitions beyond the first {MAX_LEVELS} were dropped; review the curve",
                analysis.dropped_levels
            ));
        }
    }
    if let (Some(l1), Some(first)) = (&l1, cache_levels.first()) {
        if first.effective_capacity != l1.capacity {
            warnings.push(format!(
                "first cache level {} B differs from the L1 capacity {} B",
                first.effective_capacity, l1.capacity
            ));
        }
    }
    HierarchyReport { machine, l1, cache_levels, tlb_levels, costs, parameters, warnings }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cacheprobe::{CurveKind, SamplePoint, KB, MB};
    use proptest::prelude::*;

    fn curve(values: &[(usize, f64)]) -> ResponseCurve {
        ResponseCurve {
            points: values.iter().map(|&(fp, t)| SamplePoint { min_cycles: t, ..SamplePoint::new(fp) }).collect(),
            kind: CurveKind::Cache,
            total_string_runs: 0,
            cost: 0.0,
        }
    }

    fn steps(footprints: &[usize], edges: &[(usize, f64)], tail: f64) -> Vec<(usize, f64)> {
        footprints.iter().map(|&fp| (fp, edges.iter().find(|e| fp <= e.0).map_or(tail, |e| e.1))).collect()
    }

    fn schedule() -> Vec<usize> {
        crate::cacheprobe::sample_points(KB, 16 * MB).unwrap()
    }

    #[test]
    fn flat_curve_has_no_transitions() {
        let a = analyze_values(&steps(&schedule(), &[], 50.0)).unwrap();
        assert!(a.transitions.is_empty());
        assert_eq!(a.final_latency, 50);
    }

    #[test]
    fn two_plateaus_plus_memory() {
        let a = analyze_values(&steps(&schedule(), &[(32 * KB, 3.0), (4 * MB, 15.0)], 100.0)).unwrap();
        assert_eq!(
            a.transitions,
            vec![Transition { capacity: 32 * KB, latency: 3 }, Transition { capacity: 4 * MB, latency: 15 }]
        );
        assert_eq!(a.final_latency, 100);
    }

    #[test]
    fn soft_rise_ends_the_plateau_before_the_ramp() {
        // 32 KB then a ramp from 5 MB toward memory.
        let mut values = steps(&schedule(), &[(32 * KB, 3.0)], 14.0);
        for (fp, t) in values.iter_mut() {
            if *fp > 5 * MB {
                *t = 14.0 + (*fp - 5 * MB) as f64 / MB as f64 * 8.0;
            }
        }
        let a = analyze_values(&values).unwrap();
        assert_eq!(a.transitions.iter().map(|t| t.capacity).collect::<Vec<_>>(), vec![32 * KB, 5 * MB]);
    }

    #[test]
    fn transient_spikes_are_ignored() {
        let mut values = steps(&schedule(), &[(32 * KB, 3.0)], 15.0);
        values[4].1 = 9.0;
        values[30].1 = 40.0;
        let a = analyze_values(&values).unwrap();
        assert_eq!(a.transitions, vec![Transition { capacity: 32 * KB, latency: 3 }]);
    }

    #[test]
    fn knocked_out_points_inherit_from_below() {
        let mut c = curve(&steps(&schedule(), &[(32 * KB, 3.0)], 15.0));
        for p in c.points.iter_mut().skip(1).take(10) {
            p.knocked_out = true;
            p.min_cycles = 99.0;
        }
        let values = effective_values(&c).unwrap();
        assert!(values[1..11].iter().all(|&(_, t)| t == 3.0));
        assert_eq!(detect_transitions(&c).unwrap(), vec![Transition { capacity: 32 * KB, latency: 3 }]);
    }

    #[test]
    fn degenerate_curves() {
        let c = curve(&[(KB, 3.0), (2 * KB, 3.0)]);
        assert!(matches!(detect_transitions(&c), Err(Error::DegenerateCurve { measured: 2 })));
        let mut c = curve(&steps(&schedule()[..8], &[], 3.0));
        for p in c.points.iter_mut().skip(1).take(6) {
            p.knocked_out = true;
        }
        assert!(matches!(detect_transitions(&c), Err(Error::DegenerateCurve { measured: 2 })));
    }

    #[test]
    fn level_cap() {
        let fps = schedule();
        let edges: Vec<(usize, f64)> = (0..6).map(|i| ((4 * KB) << (2 * i), 2.0 * 2f64.powi(i))).collect();
        let a = analyze_values(&steps(&fps, &edges, 500.0)).unwrap();
        assert_eq!(a.transitions.len(), MAX_LEVELS);
        assert_eq!(a.dropped_levels, 2);
    }

    #[test]
    fn report_cross_check_and_keys() {
        let a = analyze_values(&steps(&schedule(), &[(16 * KB, 3.0), (4 * MB, 15.0)], 100.0)).unwrap();
        let l1 = L1Report {
            capacity: 32 * KB,
            associativity: 8,
            linesize: 64,
            latency: 3,
            baseline_cycles: 3.0,
            associativity_outcome: crate::l1probe::AssocOutcome::Detected,
            cost: 0.1,
        };
        let params = Parameters {
            seed: 1,
            stability: Stability::default(),
            l1: L1Params::default(),
            cache: CacheParams::default(),
            tlb: TlbParams::for_pagesize(4096),
            sweep: SweepOptions::default(),
            thresholds: Thresholds::default(),
        };
        let report = assemble_report(
            MachineInfo::new(&MachineEnv::default(), "sim"),
            Some(l1),
            Some(&a),
            vec![],
            Costs::default(),
            params,
        );
        assert_eq!(report.warnings.len(), 1);
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        let mut keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["cache_levels", "costs", "l1", "machine", "parameters", "tlb_levels"]);
        let back = HierarchyReport::from_json(&report.to_json()).unwrap();
        assert_eq!(back.cache_levels, report.cache_levels);
    }

    fn step_curve() -> impl Strategy<Value = Vec<(usize, f64)>> {
        (1usize..4, 4.0f64..8.0, prop::collection::vec(1.3f64..4.0, 1..4)).prop_map(|(first, base, ratios)| {
            let fps = schedule();
            let mut edges = Vec::new();
            let mut cap = (8 * KB) << first;
            let mut lat = base;
            for r in &ratios {
                edges.push((cap, lat));
                cap <<= 2;
                lat *= r;
            }
            steps(&fps, &edges, lat)
        })
    }

    proptest! {
        #[test]
        fn idempotent_on_step_curves(values in step_curve()) {
            let a = analyze_values(&values).unwrap();
            let fps: Vec<usize> = values.iter().map(|v| v.0).collect();
            let again = analyze_values(&a.reconstruct(&fps)).unwrap();
            prop_assert_eq!(a.transitions, again.transitions);
        }

        #[test]
        fn positions_scale_invariant(values in step_curve(), scale in 1.0f64..50.0) {
            let a = analyze_values(&values).unwrap();
            let scaled: Vec<(usize, f64)> = values.iter().map(|&(fp, t)| (fp, t * scale)).collect();
            let b = analyze_values(&scaled).unwrap();
            let pos = |x: &CurveAnalysis| x.transitions.iter().map(|t| t.capacity).collect::<Vec<_>>();
            prop_assert_eq!(pos(&a), pos(&b));
        }
    }
}
