//! C ABI for memprobe.
//!
//! Every fallible call returns an [`MpStatus`]; on failure the message is
//! available from [`mp_last_error`] on the same thread until the next call.
//! Objects are opaque and owned by the caller once returned; release them
//! with the matching `*_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use memprobe::analysis::{self, HierarchyReport};
use memprobe::backend::{Backend, RealMemory, Simulated};
use memprobe::cacheprobe::{CacheParams, CurveKind, ResponseCurve};
use memprobe::characterize::{characterize, ProbeOptions, Probes};
use memprobe::refstring::build_gap_string;
use memprobe::sim::{simulate, SimConfig};
use memprobe::tlbprobe::TlbParams;
use memprobe::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidGeometry = 3,
    InvalidRange = 4,
    TimerTooCoarse = 5,
    BudgetExceeded = 6,
    AllocationFailure = 7,
    NotFound = 8,
    DegenerateCurve = 9,
    ConfigInvalid = 10,
    Parse = 11,
    Io = 12,
    OutOfBounds = 13,
    Panic = 14,
}

pub const MP_PROBE_L1: u32 = 1;
pub const MP_PROBE_CACHE: u32 = 2;
pub const MP_PROBE_TLB: u32 = 4;
pub const MP_PROBE_ALL: u32 = 7;

/// Simulated machine description.
pub struct MpSimConfig(SimConfig);

/// Probe tunables; starts at the library defaults.
pub struct MpOptions(ProbeOptions);

/// Result of a characterization run.
pub struct MpReport(HierarchyReport);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MpL1Info {
    pub capacity: usize,
    pub associativity: usize,
    pub linesize: usize,
    pub latency: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MpCacheLevel {
    pub level: usize,
    pub effective_capacity: usize,
    pub latency: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MpTlbLevel {
    pub level: usize,
    pub capacity: usize,
    pub entries: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(err: &Error) -> MpStatus {
    match err {
        Error::InvalidGeometry(_) => MpStatus::InvalidGeometry,
        Error::InvalidRange { .. } => MpStatus::InvalidRange,
        Error::TimerTooCoarse { .. } => MpStatus::TimerTooCoarse,
        Error::BudgetExceeded { .. } => MpStatus::BudgetExceeded,
        Error::AllocationFailure { .. } => MpStatus::AllocationFailure,
        Error::NotFound(_) => MpStatus::NotFound,
        Error::DegenerateCurve { .. } => MpStatus::DegenerateCurve,
        Error::ConfigInvalid(_) => MpStatus::ConfigInvalid,
        Error::Parse(_) => MpStatus::Parse,
        Error::Io(_) => MpStatus::Io,
    }
}

struct Failure(MpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MpStatus::NullArgument, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic for `mp_last_error`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MpStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            MpStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|e| Failure(MpStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn mut_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    out.write(CString::new(s.replace('\0', " ")).expect("no interior NUL").into_raw());
    Ok(())
}

/// Checks `out` before allocating so a NULL never leaks the value.
unsafe fn put_boxed<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    out.write(Box::into_raw(Box::new(value)));
    Ok(())
}

/// Message for the last failed call on this thread, or NULL after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Static NUL-terminated name of `status`.
#[no_mangle]
pub extern "C" fn mp_status_name(status: MpStatus) -> *const c_char {
    let name: &'static CStr = match status {
        MpStatus::Ok => c"ok",
        MpStatus::NullArgument => c"null argument",
        MpStatus::InvalidUtf8 => c"invalid UTF-8",
        MpStatus::InvalidGeometry => c"invalid geometry",
        MpStatus::InvalidRange => c"invalid range",
        MpStatus::TimerTooCoarse => c"timer too coarse",
        MpStatus::BudgetExceeded => c"budget exceeded",
        MpStatus::AllocationFailure => c"allocation failure",
        MpStatus::NotFound => c"not found",
        MpStatus::DegenerateCurve => c"degenerate curve",
        MpStatus::ConfigInvalid => c"invalid config",
        MpStatus::Parse => c"parse error",
        MpStatus::Io => c"I/O error",
        MpStatus::OutOfBounds => c"index out of bounds",
        MpStatus::Panic => c"internal panic",
    };
    name.as_ptr()
}

#[no_mangle]
pub extern "C" fn mp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a TOML simulator description.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mp_sim_config_from_toml(toml: *const c_char, out: *mut *mut MpSimConfig) -> MpStatus {
    guard(|| {
        let config = SimConfig::from_toml_str(str_arg(toml, "toml")?)?;
        put_boxed(out, MpSimConfig(config))
    })
}

/// Loads a TOML simulator description from a file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mp_sim_config_from_file(path: *const c_char, out: *mut *mut MpSimConfig) -> MpStatus {
    guard(|| {
        let config = SimConfig::from_file(str_arg(path, "path")?)?;
        put_boxed(out, MpSimConfig(config))
    })
}

/// # Safety
/// `config` must come from this library and not have been freed. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn mp_sim_config_free(config: *mut MpSimConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Average cycles per access of the gap string G(n, gap, offset) on the
/// simulated machine, over `traversals` laps after one warm-up lap.
///
/// # Safety
/// `config` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mp_simulate_gap(
    config: *const MpSimConfig,
    n: usize,
    gap: usize,
    offset: usize,
    traversals: usize,
    out: *mut f64,
) -> MpStatus {
    guard(|| {
        let config = &ref_arg(config, "config")?.0;
        let env = Simulated::new(config.clone())?.env();
        let rs = build_gap_string(n, gap, offset, &env)?;
        put(out, simulate(config, &rs, traversals)?)
    })
}

/// New options set to the library defaults. Never NULL.
#[no_mangle]
pub extern "C" fn mp_options_new() -> *mut MpOptions {
    Box::into_raw(Box::new(MpOptions(ProbeOptions::default())))
}

/// # Safety
/// `options` must come from this library and not have been freed. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn mp_options_free(options: *mut MpOptions) {
    if !options.is_null() {
        drop(Box::from_raw(options));
    }
}

/// # Safety
/// `options` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mp_options_set_seed(options: *mut MpOptions, seed: u64) -> MpStatus {
    guard(|| {
        mut_arg(options, "options")?.0.seed = seed;
        Ok(())
    })
}

/// Runs without a new minimum before a value is accepted, and the run cap
/// per value.
///
/// # Safety
/// `options` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mp_options_set_stability(options: *mut MpOptions, window: usize, max_runs: usize) -> MpStatus {
    guard(|| {
        if window == 0 || max_runs < window {
            return Err(Failure(
                MpStatus::InvalidRange,
                format!("window {window} must be positive and at most max_runs {max_runs}"),
            ));
        }
        let o = &mut mut_arg(options, "options")?.0;
        o.stability.window = window;
        o.stability.max_runs = max_runs;
        Ok(())
    })
}

/// Gap range and associativity cap for the L1 probe.
///
/// # Safety
/// `options` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mp_options_set_l1(
    options: *mut MpOptions,
    lower: usize,
    upper: usize,
    max_assoc: usize,
) -> MpStatus {
    guard(|| {
        let o = &mut mut_arg(options, "options")?.0;
        let mut l1 = o.l1;
        l1.lower = lower;
        l1.upper = upper;
        l1.max_assoc = max_assoc;
        l1.validate()?;
        o.l1 = l1;
        Ok(())
    })
}

/// Footprint range for the cache sweep.
///
/// # Safety
/// `options` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mp_options_set_cache_range(options: *mut MpOptions, lower: usize, upper: usize) -> MpStatus {
    guard(|| {
        if lower == 0 || lower >= upper {
            return Err(Error::InvalidRange { lower, upper }.into());
        }
        mut_arg(options, "options")?.0.cache = CacheParams { lower, upper };
        Ok(())
    })
}

/// Footprint range for the TLB sweep; both zero restores the default.
///
/// # Safety
/// `options` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mp_options_set_tlb_range(options: *mut MpOptions, lower: usize, upper: usize) -> MpStatus {
    guard(|| {
        let o = &mut mut_arg(options, "options")?.0;
        o.tlb = if lower == 0 && upper == 0 {
            None
        } else {
            if lower == 0 || lower >= upper {
                return Err(Error::InvalidRange { lower, upper }.into());
            }
            Some(TlbParams { lower, upper })
        };
        Ok(())
    })
}

/// Disabling knockout measures every sample point to stability.
///
/// # Safety
/// `options` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mp_options_set_knockout(options: *mut MpOptions, enabled: bool) -> MpStatus {
    guard(|| {
        mut_arg(options, "options")?.0.sweep.knockout = enabled;
        Ok(())
    })
}

fn probes_from(mask: u32) -> Result<Probes, Failure> {
    if mask == 0 || mask & !MP_PROBE_ALL != 0 {
        return Err(Failure(MpStatus::InvalidRange, format!("probe mask {mask:#x} is empty or has unknown bits")));
    }
    Ok(Probes { l1: mask & MP_PROBE_L1 != 0, cache: mask & MP_PROBE_CACHE != 0, tlb: mask & MP_PROBE_TLB != 0 })
}

fn run(
    backend: &mut dyn Backend,
    options: *const MpOptions,
    mask: u32,
    out: *mut *mut MpReport,
) -> Result<(), Failure> {
    let probes = probes_from(mask)?;
    let default = ProbeOptions::default();
    // SAFETY: caller contract of the exported entry points.
    let options = unsafe { options.as_ref() }.map_or(&default, |o| &o.0);
    let c = characterize(backend, options, probes)?;
    unsafe { put_boxed(out, MpReport(c.report)) }
}

/// Characterizes the simulated machine. `options` may be NULL for defaults;
/// `probes` is a mask of `MP_PROBE_*` bits.
///
/// # Safety
/// `config` must be a live handle; `options` NULL or live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mp_probe_simulated(
    config: *const MpSimConfig,
    options: *const MpOptions,
    probes: u32,
    out: *mut *mut MpReport,
) -> MpStatus {
    guard(|| {
        let mut backend = Simulated::new(ref_arg(config, "config")?.0.clone())?;
        run(&mut backend, options, probes, out)
    })
}

/// Characterizes the machine this process runs on.
///
/// # Safety
/// `options` must be NULL or live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mp_probe_host(options: *const MpOptions, probes: u32, out: *mut *mut MpReport) -> MpStatus {
    guard(|| run(&mut RealMemory::new(), options, probes, out))
}

/// Analyzes a response curve given as CSV text and returns a report holding
/// only cache levels.
///
/// # Safety
/// `csv` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mp_analyze_curve_csv(csv: *const c_char, out: *mut *mut MpReport) -> MpStatus {
    guard(|| {
        let curve = ResponseCurve::from_csv(str_arg(csv, "csv")?, CurveKind::Cache)?;
        let analysis = analysis::analyze_curve(&curve)?;
        let params = ProbeOptions::default();
        let report = analysis::assemble_report(
            analysis::MachineInfo::new(&Default::default(), "curve"),
            None,
            Some(&analysis),
            Vec::new(),
            Default::default(),
            analysis::Parameters {
                seed: params.seed,
                stability: params.stability,
                l1: params.l1,
                cache: params.cache,
                tlb: TlbParams::for_pagesize(4096),
                sweep: params.sweep,
                thresholds: Default::default(),
            },
        );
        put_boxed(out, MpReport(report))
    })
}

/// # Safety
/// `report` must come from this library and not have been freed. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn mp_report_free(report: *mut MpReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// The report as pretty JSON; release with `mp_string_free`.
///
/// # Safety
/// `report` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mp_report_to_json(report: *const MpReport, out: *mut *mut c_char) -> MpStatus {
    guard(|| put_string(out, &ref_arg(report, "report")?.0.to_json()))
}

/// `MP_STATUS_NOT_FOUND` when the L1 probe did not run or found nothing.
///
/// # Safety
/// `report` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mp_report_l1(report: *const MpReport, out: *mut MpL1Info) -> MpStatus {
    guard(|| {
        let l1 = ref_arg(report, "report")?.0.l1.as_ref().ok_or(Error::NotFound("L1 cache"))?;
        put(
            out,
            MpL1Info {
                capacity: l1.capacity,
                associativity: l1.associativity,
                linesize: l1.linesize,
                latency: l1.latency,
            },
        )
    })
}

/// Number of cache levels; 0 for a NULL report.
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mp_report_cache_level_count(report: *const MpReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.cache_levels.len())
}

/// # Safety
/// `report` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mp_report_cache_level(
    report: *const MpReport,
    index: usize,
    out: *mut MpCacheLevel,
) -> MpStatus {
    guard(|| {
        let levels = &ref_arg(report, "report")?.0.cache_levels;
        let l = levels.get(index).ok_or_else(|| out_of_bounds(index, levels.len()))?;
        put(out, MpCacheLevel { level: l.level, effective_capacity: l.effective_capacity, latency: l.latency })
    })
}

/// Number of TLB levels; 0 for a NULL report.
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mp_report_tlb_level_count(report: *const MpReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.tlb_levels.len())
}

/// # Safety
/// `report` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mp_report_tlb_level(report: *const MpReport, index: usize, out: *mut MpTlbLevel) -> MpStatus {
    guard(|| {
        let levels = &ref_arg(report, "report")?.0.tlb_levels;
        let t = levels.get(index).ok_or_else(|| out_of_bounds(index, levels.len()))?;
        put(out, MpTlbLevel { level: t.level, capacity: t.capacity, entries: t.entries })
    })
}

/// Number of warnings attached to the report; 0 for a NULL report.
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mp_report_warning_count(report: *const MpReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.warnings.len())
}

/// Copy of warning `index`; release with `mp_string_free`.
///
/// # Safety
/// `report` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mp_report_warning(report: *const MpReport, index: usize, out: *mut *mut c_char) -> MpStatus {
    guard(|| {
        let warnings = &ref_arg(report, "report")?.0.warnings;
        let w = warnings.get(index).ok_or_else(|| out_of_bounds(index, warnings.len()))?;
        put_string(out, w)
    })
}

fn out_of_bounds(index: usize, len: usize) -> Failure {
    Failure(MpStatus::OutOfBounds, format!("index {index} out of bounds for {len} entries"))
}
