//! Cycle calibration, single runs, and the minimum-of-trials stability
//! discipline.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::refstring::ReferenceString;

/// A time counts as "above" a reference when it exceeds it by at least this
/// many cycles. Also the equality tolerance for knockout.
pub const DETECTION_MARGIN: f64 = 0.25;

pub const DEFAULT_WINDOW: usize = 25;

pub const DEFAULT_MAX_RUNS: usize = 1000;

/// One timed run must last at least this many timer ticks.
const RESOLUTION_MULTIPLE: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleCalibration {
    /// Duration of one dependent integer add.
    pub seconds_per_cycle: f64,
    pub timer_resolution: f64,
    /// Minimum loads per timed run before the per-string floor.
    pub loads_per_run: u64,
}

impl CycleCalibration {
    /// The simulator's calibration: its time unit already is the cycle.
    pub fn identity() -> Self {
        CycleCalibration { seconds_per_cycle: 1.0, timer_resolution: 0.0, loads_per_run: 0 }
    }

    /// Loads for one timed run of a string with `chain_length` slots.
    pub fn loads_for(&self, chain_length: usize) -> u64 {
        self.loads_per_run.max(2 * chain_length as u64)
    }

    /// Re-derives `loads_per_run` from an observed time per load.
    pub fn refit(&self, seconds_per_load: f64) -> Self {
        let loads = if self.timer_resolution > 0.0 && seconds_per_load > 0.0 {
            (RESOLUTION_MULTIPLE * self.timer_resolution / seconds_per_load).ceil() as u64
        } else {
            0
        };
        CycleCalibration { loads_per_run: loads, ..*self }
    }
}

/// One timed run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub seconds_per_load: f64,
    /// Cycle length observed next to the run, or the calibrated one.
    pub seconds_per_cycle: f64,
}

impl Sample {
    pub fn cycles(&self) -> f64 {
        self.seconds_per_load / self.seconds_per_cycle
    }
}

/// Running minimum over samples. Load time and cycle length are minimised
/// separately, so a clock that changes speed between runs moves both.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    seconds_per_load: f64,
    seconds_per_cycle: f64,
}

impl Default for Minimum {
    fn default() -> Self {
        Minimum { seconds_per_load: f64::INFINITY, seconds_per_cycle: f64::INFINITY }
    }
}

impl Minimum {
    /// Folds in `s`; true when the load time reached a new minimum.
    pub fn add(&mut self, s: Sample) -> bool {
        self.seconds_per_cycle = self.seconds_per_cycle.min(s.seconds_per_cycle);
        if s.seconds_per_load < self.seconds_per_load {
            self.seconds_per_load = s.seconds_per_load;
            true
        } else {
            false
        }
    }

    /// Infinite until a sample was added.
    pub fn cycles(&self) -> f64 {
        if self.seconds_per_load.is_finite() {
            self.seconds_per_load / self.seconds_per_cycle
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub min_cycles_per_access: f64,
    pub runs_taken: usize,
    pub stable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stability {
    /// Runs without a new minimum before a value is accepted.
    pub window: usize,
    /// Runs allowed for one value before giving up.
    pub max_runs: usize,
}

impl Default for Stability {
    fn default() -> Self {
        Stability { window: DEFAULT_WINDOW, max_runs: DEFAULT_MAX_RUNS }
    }
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> f64 {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        let deadline = t0 + Duration::from_millis(50);
        while t1 == t0 && t1 < deadline {
            t1 = Instant::now();
        }
        let step = t1.duration_since(t0);
        if !step.is_zero() {
            best = best.min(step);
        }
    }
    if best == Duration::MAX {
        1.0
    } else {
        best.as_secs_f64()
    }
}

#[cfg(target_arch = "x86_64")]
#[inline(never)]
fn dependent_adds(rounds: u64) -> u64 {
    let mut acc: u64 = 1;
    let step: u64 = std::hint::black_box(3);
    for _ in 0..rounds {
        // SAFETY: register-only arithmetic.
        unsafe {
            std::arch::asm!(
                "add {a}, {s}", "add {a}, {s}", "add {a}, {s}", "add {a}, {s}",
                "add {a}, {s}", "add {a}, {s}", "add {a}, {s}", "add {a}, {s}",
                a = inout(reg) acc,
                s = in(reg) step,
                options(nomem, nostack),
            );
        }
    }
    acc
}

#[cfg(target_arch = "aarch64")]
#[inline(never)]
fn dependent_adds(rounds: u64) -> u64 {
    let mut acc: u64 = 1;
    let step: u64 = std::hint::black_box(3);
    for _ in 0..rounds {
        // SAFETY: register-only arithmetic.
        unsafe {
            std::arch::asm!(
                "add {a}, {a}, {s}", "add {a}, {a}, {s}", "add {a}, {a}, {s}", "add {a}, {a}, {s}",
                "add {a}, {a}, {s}", "add {a}, {a}, {s}", "add {a}, {a}, {s}", "add {a}, {a}, {s}",
                a = inout(reg) acc,
                s = in(reg) step,
                options(nomem, nostack),
            );
        }
    }
    acc
}

#[cfg(not(any(target_arch = "x86_64", target_arch = "aarch64")))]
#[inline(never)]
fn dependent_adds(rounds: u64) -> u64 {
    let mut acc: u64 = 1;
    let step: u64 = std::hint::black_box(3);
    for _ in 0..rounds {
        for _ in 0..8 {
            acc = std::hint::black_box(acc.wrapping_add(step));
        }
    }
    acc
}

const ADDS_PER_ROUND: u64 = 8;

const REFERENCE_ROUNDS: u64 = 8192;

/// Seconds per add from one short chain; for tracking clock drift.
pub fn reference_cycle() -> f64 {
    let t = Instant::now();
    std::hint::black_box(dependent_adds(REFERENCE_ROUNDS));
    t.elapsed().as_secs_f64() / (REFERENCE_ROUNDS * ADDS_PER_ROUND) as f64
}

/// Seconds per integer add on this host, minimum of several trials.
pub fn calibrate_host() -> Result<CycleCalibration> {
    let resolution = timer_resolution();
    if resolution > 1e-3 {
        return Err(Error::TimerTooCoarse { resolution });
    }
    let target = (RESOLUTION_MULTIPLE * resolution).max(2e-3);
    let mut rounds: u64 = 1 << 16;
    loop {
        let t = Instant::now();
        std::hint::black_box(dependent_adds(rounds));
        if t.elapsed().as_secs_f64() >= target || rounds >= 1 << 34 {
            break;
        }
        rounds *= 2;
    }
    let mut best = f64::INFINITY;
    for _ in 0..7 {
        let t = Instant::now();
        std::hint::black_box(dependent_adds(rounds));
        best = best.min(t.elapsed().as_secs_f64());
    }
    let seconds_per_cycle = best / (rounds * ADDS_PER_ROUND) as f64;
    let cal = CycleCalibration { seconds_per_cycle, timer_resolution: resolution, loads_per_run: 0 };
    // Start from the optimistic one-cycle-per-load estimate.
    Ok(cal.refit(seconds_per_cycle))
}

/// One timed run of `rs`.
pub fn run_once(rs: &ReferenceString, cal: &CycleCalibration, backend: &mut dyn Backend) -> Result<Sample> {
    let loads = cal.loads_for(rs.chain_length());
    let elapsed = backend.execute(rs, loads)?;
    let seconds_per_cycle = backend.cycle_reference().unwrap_or(cal.seconds_per_cycle);
    Ok(Sample { seconds_per_load: elapsed / loads as f64, seconds_per_cycle })
}

/// Runs fresh strings from `factory` until the minimum has not moved for
/// `stability.window` runs.
pub fn measure_stable<F>(
    mut factory: F,
    cal: &CycleCalibration,
    backend: &mut dyn Backend,
    stability: Stability,
) -> Result<Measurement>
where
    F: FnMut() -> Result<ReferenceString>,
{
    let window = stability.window.max(1);
    let mut cal = *cal;
    let mut best = Minimum::default();
    let mut since_min = 0usize;
    let mut runs = 0usize;
    while runs == 0 || since_min < window {
        if runs >= stability.max_runs {
            return Err(Error::BudgetExceeded { runs });
        }
        let rs = factory()?;
        let sample = run_once(&rs, &cal, backend)?;
        if runs == 0 {
            cal = cal.refit(sample.seconds_per_load);
        }
        runs += 1;
        if best.add(sample) {
            since_min = 0;
        } else {
            since_min += 1;
        }
    }
    Ok(Measurement { min_cycles_per_access: best.cycles(), runs_taken: runs, stable: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ExpJitter, Jittered, Simulated};
    use crate::refstring::{build_gap_string, MachineEnv};
    use crate::sim::{CacheLevelConfig, SimConfig};

    fn config() -> SimConfig {
        SimConfig {
            pagesize: 4096,
            memory_latency: 100,
            cache_levels: vec![
                CacheLevelConfig { capacity: 32 << 10, associativity: 8, linesize: 64, latency: 3 },
                CacheLevelConfig { capacity: 4 << 20, associativity: 16, linesize: 64, latency: 15 },
            ],
            tlb_levels: vec![],
            mapping: Default::default(),
            inclusion: Default::default(),
            replacement: Default::default(),
        }
    }

    #[test]
    fn host_calibration_is_sane() {
        let cal = calibrate_host().unwrap();
        assert!(cal.seconds_per_cycle > 0.0 && cal.seconds_per_cycle < 1e-6, "{cal:?}");
        assert!(cal.timer_resolution <= 1e-3);
    }

    #[test]
    fn identity_calibration() {
        let mut backend = Simulated::new(config()).unwrap();
        assert_eq!(backend.calibrate().unwrap(), CycleCalibration::identity());
        assert_eq!(CycleCalibration::identity().loads_for(33), 66);
    }

    #[test]
    fn run_once_on_simulator() {
        let mut backend = Simulated::new(config()).unwrap();
        let env = MachineEnv::default();
        let cal = CycleCalibration::identity();
        let rs = build_gap_string(2, 512, 0, &env).unwrap();
        assert_eq!(run_once(&rs, &cal, &mut backend).unwrap().cycles(), 3.0);
        let rs = build_gap_string(33, 1024, 0, &env).unwrap();
        let t = run_once(&rs, &cal, &mut backend).unwrap().cycles();
        assert!((t - 207.0 / 33.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_backend_stabilises_after_window_plus_one() {
        let mut backend = Simulated::new(config()).unwrap();
        let env = MachineEnv::default();
        let cal = CycleCalibration::identity();
        for window in [1usize, 5, 25] {
            let m = measure_stable(
                || build_gap_string(2, 512, 0, &env),
                &cal,
                &mut backend,
                Stability { window, max_runs: 1000 },
            )
            .unwrap();
            assert_eq!(m.runs_taken, window + 1);
            assert!(m.stable);
            assert_eq!(m.min_cycles_per_access, 3.0);
        }
    }

    #[test]
    fn budget_is_enforced() {
        let mut counter = 0.0;
        // Strictly decreasing noise never stabilises.
        let noise = move |_: &ReferenceString| {
            counter += 1.0;
            1000.0 / counter
        };
        let mut backend = Jittered::new(Simulated::new(config()).unwrap(), noise);
        let env = MachineEnv::default();
        let err = measure_stable(
            || build_gap_string(2, 512, 0, &env),
            &CycleCalibration::identity(),
            &mut backend,
            Stability { window: 5, max_runs: 50 },
        )
        .unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { runs: 50 }));
    }

    #[test]
    fn minimum_filters_positive_jitter() {
        let env = MachineEnv::default();
        for seed in 0..20 {
            let mut backend = Jittered::new(Simulated::new(config()).unwrap(), ExpJitter::new(0.6, 2.0, seed));
            let m = measure_stable(
                || build_gap_string(2, 512, 0, &env),
                &CycleCalibration::identity(),
                &mut backend,
                Stability::default(),
            )
            .unwrap();
            assert!(m.min_cycles_per_access >= 3.0);
            assert!(m.min_cycles_per_access - 3.0 <= DETECTION_MARGIN);
        }
    }

    #[test]
    fn minimum_tracks_load_and_cycle_separately() {
        let mut m = Minimum::default();
        assert!(m.cycles().is_infinite());
        assert!(m.add(Sample { seconds_per_load: 6.0, seconds_per_cycle: 1.2 }));
        assert!(!m.add(Sample { seconds_per_load: 6.5, seconds_per_cycle: 1.0 }));
        assert_eq!(m.cycles(), 6.0);
        assert!(m.add(Sample { seconds_per_load: 5.0, seconds_per_cycle: 1.1 }));
        assert_eq!(m.cycles(), 5.0);
    }

    #[test]
    fn refit_targets_resolution_multiple() {
        let cal = CycleCalibration { seconds_per_cycle: 1e-9, timer_resolution: 1e-7, loads_per_run: 0 };
        assert_eq!(cal.refit(1e-9).loads_per_run, 100_000);
        assert_eq!(cal.refit(1e-7).loads_for(10), 1000);
        assert_eq!(cal.refit(1e-7).loads_for(1_000_000), 2_000_000);
    }
}
