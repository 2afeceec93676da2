//! Runs a chosen set of probes against one backend and assembles the report.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{self, Costs, CurveAnalysis, HierarchyReport, MachineInfo, Parameters, Thresholds};
use crate::backend::Backend;
use crate::cacheprobe::{self, CacheParams, ResponseCurve, SweepOptions};
use crate::error::{Error, Result};
use crate::l1probe::{self, L1Params};
use crate::probe::Prober;
use crate::timing::Stability;
use crate::tlbprobe::{self, TlbParams, TlbProbeResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub seed: u64,
    pub stability: Stability,
    pub l1: L1Params,
    pub cache: CacheParams,
    /// `None` picks 4 pages to 8 MiB for the backend's page size.
    pub tlb: Option<TlbParams>,
    pub sweep: SweepOptions,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            seed: 0x6d65_6d70,
            stability: Stability::default(),
            l1: L1Params::default(),
            cache: CacheParams::default(),
            tlb: None,
            sweep: SweepOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probes {
    pub l1: bool,
    pub cache: bool,
    pub tlb: bool,
}

impl Probes {
    pub const ALL: Probes = Probes { l1: true, cache: true, tlb: true };
    pub const L1: Probes = Probes { l1: true, cache: false, tlb: false };
    pub const CACHE: Probes = Probes { l1: false, cache: true, tlb: false };
    pub const TLB: Probes = Probes { l1: false, cache: false, tlb: true };
}

/// The report plus the raw curves behind it.
#[derive(Debug, Clone)]
pub struct Characterization {
    pub report: HierarchyReport,
    pub cache_curve: Option<ResponseCurve>,
    pub cache_analysis: Option<CurveAnalysis>,
    pub tlb: Option<TlbProbeResult>,
}

pub fn characterize(backend: &mut dyn Backend, options: &ProbeOptions, probes: Probes) -> Result<Characterization> {
    let started = Instant::now();
    let mut prober = Prober::new(backend, options.stability, options.seed)?;
    let tlb_params = options.tlb.unwrap_or_else(|| TlbParams::for_pagesize(prober.env().pagesize));
    let mut costs = Costs::default();

    let mut warnings = Vec::new();
    let l1 = if probes.l1 {
        let l1_started = Instant::now();
        match l1probe::run_l1_probe(&mut prober, &options.l1) {
            Ok(report) => {
                costs.l1 = Some(report.cost);
                // Later strings stride by the measured line.
                if let Ok(env) = prober.env().with_linesize(report.linesize) {
                    prober.set_env(env);
                }
                Some(report)
            }
            // Other probes do not depend on L1 geometry.
            Err(e @ Error::NotFound(_)) if probes.cache || probes.tlb => {
                costs.l1 = Some(l1_started.elapsed().as_secs_f64());
                warnings.push(format!("L1 probe: {e}"));
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };

    let (cache_curve, cache_analysis) = if probes.cache {
        let points = cacheprobe::sample_points(options.cache.lower, options.cache.upper)?;
        let curve = cacheprobe::run_cache_sweep(&mut prober, &points, options.sweep)?;
        costs.cache = Some(curve.cost);
        let analysis = analysis::analyze_curve(&curve)?;
        (Some(curve), Some(analysis))
    } else {
        (None, None)
    };

    let tlb = if probes.tlb {
        let result = tlbprobe::run_tlb_probe(&mut prober, &tlb_params, options.sweep)?;
        costs.tlb = Some(result.cost);
        Some(result)
    } else {
        None
    };

    costs.total = started.elapsed().as_secs_f64();
    costs.string_runs = prober.string_runs();
    let machine = MachineInfo::new(&prober.env(), prober.backend_name());
    let parameters = Parameters {
        seed: options.seed,
        stability: options.stability,
        l1: options.l1,
        cache: options.cache,
        tlb: tlb_params,
        sweep: options.sweep,
        thresholds: Thresholds::default(),
    };
    let tlb_levels = tlb.as_ref().map(|t| t.levels.clone()).unwrap_or_default();
    let mut report = analysis::assemble_report(machine, l1, cache_analysis.as_ref(), tlb_levels, costs, parameters);
    warnings.append(&mut report.warnings);
    report.warnings = warnings;
    Ok(Characterization { report, cache_curve, cache_analysis, tlb })
}
