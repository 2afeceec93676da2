//! The thing being measured.
//!
//! Every probe talks to a [`Backend`]: real process memory, the hierarchy
//! simulator, or a simulator wrapped with injected timing noise. Probes never
//! know which one they are driving.

use std::alloc::{self, Layout};
use std::ptr::NonNull;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};
use crate::refstring::{MachineEnv, ReferenceString};
use crate::sim::{SimConfig, Simulator};
use crate::timing::{self, CycleCalibration};

/// Largest region a reference string may occupy.
pub const DEFAULT_REGION_CAP: usize = 64 << 20;

pub trait Backend {
    /// Page size and word size of the measured machine.
    fn env(&self) -> MachineEnv;

    fn calibrate(&mut self) -> Result<CycleCalibration>;

    /// One untimed traversal of `rs`, then `loads` dependent loads between
    /// two timer reads. Returns the elapsed time in the backend's unit
    /// (seconds for real memory, cycles for the simulator).
    fn execute(&mut self, rs: &ReferenceString, loads: u64) -> Result<f64>;

    /// Cycle length measured now, for backends whose clock speed drifts.
    fn cycle_reference(&mut self) -> Option<f64> {
        None
    }

    fn describe(&self) -> String;
}

/// Page-aligned, zeroed, writable memory.
pub struct Region {
    ptr: NonNull<u8>,
    layout: Layout,
}

impl Region {
    pub fn len(&self) -> usize {
        self.layout.size()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.size() == 0
    }

    pub fn base(&self) -> usize {
        self.ptr.as_ptr() as usize
    }

    pub fn as_ptr(&self) -> *mut u8 {
        self.ptr.as_ptr()
    }
}

impl Drop for Region {
    fn drop(&mut self) {
        // SAFETY: allocated in `acquire_region` with this exact layout.
        unsafe { alloc::dealloc(self.ptr.as_ptr(), self.layout) }
    }
}

pub fn acquire_region(footprint: usize, pagesize: usize) -> Result<Region> {
    acquire_region_capped(footprint, pagesize, DEFAULT_REGION_CAP)
}

pub fn acquire_region_capped(footprint: usize, pagesize: usize, cap: usize) -> Result<Region> {
    let fail = || Error::AllocationFailure { requested: footprint, cap };
    if footprint == 0 || footprint > cap {
        return Err(fail());
    }
    let size = footprint.div_ceil(pagesize) * pagesize;
    let layout = Layout::from_size_align(size, pagesize).map_err(|_| fail())?;
    // SAFETY: layout has non-zero size.
    let ptr = unsafe { alloc::alloc_zeroed(layout) };
    let ptr = NonNull::new(ptr).ok_or_else(fail)?;
    Ok(Region { ptr, layout })
}

/// Dependent loads through real process memory.
pub struct RealMemory {
    env: MachineEnv,
}

impl RealMemory {
    pub fn new() -> Self {
        pin_from_env();
        RealMemory { env: MachineEnv::host() }
    }
}

impl Default for RealMemory {
    fn default() -> Self {
        RealMemory::new()
    }
}

/// Pins the process to the hardware thread named by `MEMPROBE_CPU`, where
/// the OS allows it. Best effort; failures are ignored.
fn pin_from_env() {
    let Some(cpu) = std::env::var("MEMPROBE_CPU").ok().and_then(|v| v.trim().parse::<usize>().ok()) else {
        return;
    };
    #[cfg(target_os = "linux")]
    // SAFETY: the cpu_set_t is fully initialised before use.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_ZERO(&mut set);
        libc::CPU_SET(cpu, &mut set);
        let _ = libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set);
    }
    #[cfg(not(target_os = "linux"))]
    let _ = cpu;
}

/// Follows the chain starting at `start` for `loads` steps.
///
/// # Safety
/// Every pointer reachable from `start` must point at another valid slot.
#[inline(never)]
unsafe fn chase(start: *const usize, loads: u64) -> *const usize {
    let mut p = start;
    let mut remaining = loads;
    while remaining >= 8 {
        p = std::ptr::read_volatile(p) as *const usize;
        p = std::ptr::read_volatile(p) as *const usize;
        p = std::ptr::read_volatile(p) as *const usize;
        p = std::ptr::read_volatile(p) as *const usize;
        p = std::ptr::read_volatile(p) as *const usize;
        p = std::ptr::read_volatile(p) as *const usize;
        p = std::ptr::read_volatile(p) as *const usize;
        p = std::ptr::read_volatile(p) as *const usize;
        remaining -= 8;
    }
    while remaining > 0 {
        p = std::ptr::read_volatile(p) as *const usize;
        remaining -= 1;
    }
    p
}

impl Backend for RealMemory {
    fn env(&self) -> MachineEnv {
        self.env
    }

    fn calibrate(&mut self) -> Result<CycleCalibration> {
        timing::calibrate_host()
    }

    fn execute(&mut self, rs: &ReferenceString, loads: u64) -> Result<f64> {
        if rs.env().word != std::mem::size_of::<usize>() {
            return Err(Error::geometry("string word size differs from the host pointer size"));
        }
        let region = acquire_region(rs.footprint(), self.env.pagesize)?;
        let base = region.base();
        let slots = rs.slots();
        for (i, &next) in rs.links().iter().enumerate() {
            let target = base + slots[next as usize];
            // SAFETY: slot offsets are word aligned and below the footprint.
            unsafe { (region.as_ptr().add(slots[i]) as *mut usize).write(target) };
        }
        let start = (base + rs.entry()) as *const usize;
        // SAFETY: the region holds a closed chain of in-region pointers.
        unsafe {
            let warm = chase(start, rs.chain_length() as u64);
            std::hint::black_box(warm);
            let begin = Instant::now();
            let end_ptr = chase(start, loads);
            let elapsed = begin.elapsed();
            std::hint::black_box(end_ptr);
            Ok(elapsed.as_secs_f64())
        }
    }

    fn cycle_reference(&mut self) -> Option<f64> {
        Some(timing::reference_cycle())
    }

    fn describe(&self) -> String {
        "real".to_string()
    }
}

/// The hierarchy simulator behind the backend contract. Time is counted in
/// simulated cycles.
#[derive(Debug, Clone)]
pub struct Simulated {
    sim: Simulator,
    label: String,
}

impl Simulated {
    pub fn new(config: SimConfig) -> Result<Self> {
        Ok(Simulated { sim: Simulator::new(config)?, label: "sim".into() })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn config(&self) -> &SimConfig {
        self.sim.config()
    }
}

impl Backend for Simulated {
    fn env(&self) -> MachineEnv {
        MachineEnv {
            pagesize: self.sim.config().pagesize,
            word: 8,
            l1_linesize: self.sim.config().cache_levels.first().map_or(64, |l| l.linesize),
        }
    }

    fn calibrate(&mut self) -> Result<CycleCalibration> {
        Ok(CycleCalibration::identity())
    }

    fn execute(&mut self, rs: &ReferenceString, loads: u64) -> Result<f64> {
        if rs.env().pagesize != self.sim.config().pagesize {
            return Err(Error::ConfigInvalid("string page size differs from the simulated page size".into()));
        }
        Ok(self.sim.run(rs, loads) as f64)
    }

    fn describe(&self) -> String {
        self.label.clone()
    }
}

/// Non-negative timing noise, expressed in backend time units per access.
pub trait NoiseSource {
    fn sample(&mut self, rs: &ReferenceString) -> f64;
}

impl<F: FnMut(&ReferenceString) -> f64> NoiseSource for F {
    fn sample(&mut self, rs: &ReferenceString) -> f64 {
        self(rs)
    }
}

/// With probability `probability` a run is disturbed by an exponentially
/// distributed per-access delay of mean `mean`.
pub struct ExpJitter {
    rng: ChaCha8Rng,
    probability: f64,
    dist: Exp<f64>,
}

impl ExpJitter {
    pub fn new(probability: f64, mean: f64, seed: u64) -> Self {
        ExpJitter {
            rng: ChaCha8Rng::seed_from_u64(seed),
            probability: probability.clamp(0.0, 1.0),
            dist: Exp::new(1.0 / mean).expect("positive jitter mean"),
        }
    }
}

impl NoiseSource for ExpJitter {
    fn sample(&mut self, _rs: &ReferenceString) -> f64 {
        if self.rng.random_bool(self.probability) {
            self.dist.sample(&mut self.rng)
        } else {
            0.0
        }
    }
}

/// Adds noise from `N` on top of another backend's timings.
pub struct Jittered<B, N> {
    inner: B,
    noise: N,
}

impl<B: Backend, N: NoiseSource> Jittered<B, N> {
    pub fn new(inner: B, noise: N) -> Self {
        Jittered { inner, noise }
    }
}

impl<B: Backend, N: NoiseSource> Backend for Jittered<B, N> {
    fn env(&self) -> MachineEnv {
        self.inner.env()
    }

    fn calibrate(&mut self) -> Result<CycleCalibration> {
        self.inner.calibrate()
    }

    fn execute(&mut self, rs: &ReferenceString, loads: u64) -> Result<f64> {
        let clean = self.inner.execute(rs, loads)?;
        let extra = self.noise.sample(rs).max(0.0);
        Ok(clean + extra * loads as f64)
    }

    fn cycle_reference(&mut self) -> Option<f64> {
        self.inner.cycle_reference()
    }

    fn describe(&self) -> String {
        format!("{}+jitter", self.inner.describe())
    }
}
