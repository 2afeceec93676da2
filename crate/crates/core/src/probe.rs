use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::Backend;
use crate::error::Result;
use crate::refstring::{MachineEnv, ReferenceString};
use crate::timing::{self, CycleCalibration, Measurement, Sample, Stability};

/// Everything a probe needs: exclusive use of a backend, its calibration,
/// the stability discipline, and a seed stream for fresh strings.
pub struct Prober<'b> {
    backend: &'b mut dyn Backend,
    env: MachineEnv,
    cal: CycleCalibration,
    stability: Stability,
    seeds: ChaCha8Rng,
    string_runs: u64,
}

impl<'b> Prober<'b> {
    pub fn new(backend: &'b mut dyn Backend, stability: Stability, seed: u64) -> Result<Self> {
        let cal = backend.calibrate()?;
        let env = backend.env();
        Ok(Prober { backend, env, cal, stability, seeds: ChaCha8Rng::seed_from_u64(seed), string_runs: 0 })
    }

    pub fn env(&self) -> MachineEnv {
        self.env
    }

    pub fn set_env(&mut self, env: MachineEnv) {
        self.env = env;
    }

    pub fn calibration(&self) -> CycleCalibration {
        self.cal
    }

    pub fn stability(&self) -> Stability {
        self.stability
    }

    /// Reference strings executed so far, over all probes.
    pub fn string_runs(&self) -> u64 {
        self.string_runs
    }

    pub fn backend_name(&self) -> String {
        self.backend.describe()
    }

    pub fn next_seed(&mut self) -> u64 {
        self.seeds.next_u64()
    }

    /// Stable minimum over fresh strings from `build`.
    pub fn measure<F>(&mut self, mut build: F) -> Result<Measurement>
    where
        F: FnMut(&MachineEnv, u64) -> Result<ReferenceString>,
    {
        let env = self.env;
        let seeds = &mut self.seeds;
        let m =
            timing::measure_stable(|| build(&env, seeds.next_u64()), &self.cal, &mut *self.backend, self.stability)?;
        self.string_runs += m.runs_taken as u64;
        Ok(m)
    }

    /// One run of a freshly built string under `cal`.
    pub fn run_with<F>(&mut self, cal: &CycleCalibration, build: F) -> Result<Sample>
    where
        F: FnOnce(&MachineEnv, u64) -> Result<ReferenceString>,
    {
        let seed = self.next_seed();
        let rs = build(&self.env, seed)?;
        self.string_runs += 1;
        timing::run_once(&rs, cal, &mut *self.backend)
    }
}
