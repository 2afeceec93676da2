//! Deterministic cache/TLB hierarchy simulator.
//!
//! Cache levels are set-associative LRU. A lookup walks the levels from the
//! inside out and installs the line in every level it missed, so the
//! hierarchy stays inclusive of the fill path (back-invalidation is not
//! modelled). The first level is indexed with virtual addresses, the outer
//! levels with translated ones. TLB levels are fully associative LRU; a miss
//! in TLB level `i` costs that level's `latency` on top of the cache latency
//! (a hit in level `i + 1` after missing level `i` costs `tlb_levels[i].latency`).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refstring::ReferenceString;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheLevelConfig {
    pub capacity: usize,
    pub associativity: usize,
    pub linesize: usize,
    /// Cycles for an access that hits at this level.
    pub latency: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TlbLevelConfig {
    pub entries: usize,
    /// Extra cycles when a translation misses this level.
    pub latency: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mapping {
    #[default]
    Identity,
    /// Pseudo-random physical frame per virtual page. The seed is mixed with
    /// each reference string's seed, so every fresh string samples a new
    /// mapping.
    RandomPerPage(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inclusion {
    #[default]
    Inclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replacement {
    #[default]
    Lru,
}

/// Parametric description of a simulated memory hierarchy.
///
/// The on-disk form is TOML:
///
/// ```toml
/// pagesize = 4096
/// memory_latency = 100
/// mapping = "identity"          # or { random_per_page = 7 }
///
/// [[cache_levels]]
/// capacity = 32768
/// associativity = 8
/// linesize = 64
/// latency = 3
///
/// [[tlb_levels]]
/// entries = 64
/// latency = 30
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_pagesize")]
    pub pagesize: usize,
    pub memory_latency: u32,
    #[serde(default)]
    pub cache_levels: Vec<CacheLevelConfig>,
    #[serde(default)]
    pub tlb_levels: Vec<TlbLevelConfig>,
    #[serde(default)]
    pub mapping: Mapping,
    #[serde(default)]
    pub inclusion: Inclusion,
    #[serde(default)]
    pub replacement: Replacement,
}

fn default_pagesize() -> usize {
    4096
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ConfigInvalid(msg));
        if !self.pagesize.is_power_of_two() || self.pagesize < 512 {
            return bad(format!("pagesize {} must be a power of two >= 512", self.pagesize));
        }
        for (i, level) in self.cache_levels.iter().enumerate() {
            if level.associativity == 0 || level.linesize == 0 || !level.linesize.is_power_of_two() {
                return bad(format!("cache level {}: associativity and power-of-two linesize required", i + 1));
            }
            if level.capacity == 0 || level.capacity % (level.associativity * level.linesize) != 0 {
                return bad(format!(
                    "cache level {}: capacity {} not divisible by associativity*linesize",
                    i + 1,
                    level.capacity
                ));
            }
            if level.latency == 0 {
                return bad(format!("cache level {}: latency must be positive", i + 1));
            }
        }
        for pair in self.cache_levels.windows(2) {
            if pair[1].capacity <= pair[0].capacity || pair[1].latency <= pair[0].latency {
                return bad("cache levels must grow in capacity and latency".into());
            }
        }
        if let Some(last) = self.cache_levels.last() {
            if self.memory_latency <= last.latency {
                return bad("memory latency must exceed the last cache level".into());
            }
        } else if self.memory_latency == 0 {
            return bad("memory latency must be positive".into());
        }
        if self.tlb_levels.iter().any(|t| t.entries == 0) {
            return bad("TLB levels need at least one entry".into());
        }
        for pair in self.tlb_levels.windows(2) {
            if pair[1].entries <= pair[0].entries || pair[1].latency <= pair[0].latency {
                return bad("TLB levels must grow in entries and latency".into());
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: SimConfig = toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        SimConfig::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("SimConfig serialises to TOML")
    }

    /// Smallest latency any access can observe.
    pub fn min_latency(&self) -> u32 {
        self.cache_levels.first().map_or(self.memory_latency, |l| l.latency)
    }
}

const INVALID: u64 = u64::MAX;

#[derive(Debug, Clone)]
struct CacheState {
    sets: u64,
    ways: usize,
    line_shift: u32,
    latency: u32,
    /// Line numbers, `ways` per set, most recently used first.
    lines: Vec<u64>,
}

impl CacheState {
    fn new(cfg: &CacheLevelConfig) -> Self {
        let sets = cfg.capacity / (cfg.associativity * cfg.linesize);
        CacheState {
            sets: sets as u64,
            ways: cfg.associativity,
            line_shift: cfg.linesize.trailing_zeros(),
            latency: cfg.latency,
            lines: vec![INVALID; sets * cfg.associativity],
        }
    }

    fn reset(&mut self) {
        self.lines.fill(INVALID);
    }

    /// Returns true on a hit; installs the line on a miss.
    fn access(&mut self, addr: u64) -> bool {
        let line = addr >> self.line_shift;
        let set = (line % self.sets) as usize;
        let ways = &mut self.lines[set * self.ways..(set + 1) * self.ways];
        match ways.iter().position(|&l| l == line) {
            Some(pos) => {
                ways[..=pos].rotate_right(1);
                true
            }
            None => {
                ways.rotate_right(1);
                ways[0] = line;
                false
            }
        }
    }
}

#[derive(Debug, Clone)]
struct TlbState {
    entries: usize,
    latency: u32,
    stamp_of: HashMap<u64, u64>,
    by_stamp: BTreeMap<u64, u64>,
    clock: u64,
    last: Option<u64>,
}

impl TlbState {
    fn new(cfg: &TlbLevelConfig) -> Self {
        TlbState {
            entries: cfg.entries,
            latency: cfg.latency,
            stamp_of: HashMap::new(),
            by_stamp: BTreeMap::new(),
            clock: 0,
            last: None,
        }
    }

    fn reset(&mut self) {
        self.stamp_of.clear();
        self.by_stamp.clear();
        self.clock = 0;
        self.last = None;
    }

    fn access(&mut self, page: u64) -> bool {
        // Repeated page: already most recent, nothing changes.
        if self.last == Some(page) {
            return true;
        }
        self.last = Some(page);
        self.clock += 1;
        let stamp = self.clock;
        if let Some(old) = self.stamp_of.insert(page, stamp) {
            self.by_stamp.remove(&old);
            self.by_stamp.insert(stamp, page);
            return true;
        }
        self.by_stamp.insert(stamp, page);
        if self.stamp_of.len() > self.entries {
            if let Some((_, victim)) = self.by_stamp.pop_first() {
                self.stamp_of.remove(&victim);
            }
        }
        false
    }
}

/// Per-access cost model over a [`SimConfig`].
#[derive(Debug, Clone)]
pub struct Simulator {
    config: SimConfig,
    caches: Vec<CacheState>,
    tlbs: Vec<TlbState>,
    page_shift: u32,
    mapping_seed: Option<u64>,
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let caches = config.cache_levels.iter().map(CacheState::new).collect();
        let tlbs = config.tlb_levels.iter().map(TlbState::new).collect();
        Ok(Simulator { page_shift: config.pagesize.trailing_zeros(), caches, tlbs, mapping_seed: None, config })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Cold caches and TLBs; the physical mapping is re-derived from
    /// `string_seed`.
    pub fn reset(&mut self, string_seed: u64) {
        self.caches.iter_mut().for_each(CacheState::reset);
        self.tlbs.iter_mut().for_each(TlbState::reset);
        self.mapping_seed = match self.config.mapping {
            Mapping::Identity => None,
            Mapping::RandomPerPage(seed) => Some(mix64(seed ^ mix64(string_seed))),
        };
    }

    /// Physical address of a virtual one. Offsets within a page never change.
    pub fn translate(&self, vaddr: u64) -> u64 {
        match self.mapping_seed {
            None => vaddr,
            Some(seed) => {
                let page = vaddr >> self.page_shift;
                let frame = mix64(page ^ seed) >> 24;
                (frame << self.page_shift) | (vaddr & ((1 << self.page_shift) - 1))
            }
        }
    }

    /// Cycles for one load from `vaddr`.
    pub fn access(&mut self, vaddr: u64) -> u32 {
        let mut cycles = self.tlb_penalty(vaddr >> self.page_shift);
        let paddr = self.translate(vaddr);
        let mut hit_latency = None;
        for (i, cache) in self.caches.iter_mut().enumerate() {
            let addr = if i == 0 { vaddr } else { paddr };
            if cache.access(addr) {
                hit_latency = Some(cache.latency);
                break;
            }
        }
        cycles += hit_latency.unwrap_or(self.config.memory_latency);
        cycles
    }

    fn tlb_penalty(&mut self, page: u64) -> u32 {
        let mut penalty = 0;
        for tlb in self.tlbs.iter_mut() {
            if tlb.access(page) {
                return penalty;
            }
            penalty = tlb.latency;
        }
        penalty
    }

    /// One untimed lap of `rs` followed by `loads` timed loads; returns the
    /// total cycles of the timed part.
    pub fn run(&mut self, rs: &ReferenceString, loads: u64) -> u64 {
        self.reset(rs.seed());
        let slots = rs.slots();
        let links = rs.links();
        let mut idx = 0usize;
        for _ in 0..slots.len() {
            self.access(slots[idx] as u64);
            idx = links[idx] as usize;
        }
        let mut total = 0u64;
        for _ in 0..loads {
            total += u64::from(self.access(slots[idx] as u64));
            idx = links[idx] as usize;
        }
        total
    }
}

/// Average cycles per access over `traversals` laps of `rs`, after one
/// warm-up lap.
pub fn simulate(config: &SimConfig, rs: &ReferenceString, traversals: usize) -> Result<f64> {
    if traversals == 0 {
        return Err(Error::ConfigInvalid("need at least one timed traversal".into()));
    }
    if rs.env().pagesize != config.pagesize {
        return Err(Error::ConfigInvalid(format!(
            "string laid out for {} byte pages, simulator uses {}",
            rs.env().pagesize,
            config.pagesize
        )));
    }
    let mut sim = Simulator::new(config.clone())?;
    let loads = (traversals * rs.chain_length()) as u64;
    Ok(sim.run(rs, loads) as f64 / loads as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refstring::{build_cache_string, build_gap_string, build_tlb_string, MachineEnv};
    use proptest::prelude::*;

    fn l1(capacity: usize, assoc: usize, line: usize, latency: u32) -> CacheLevelConfig {
        CacheLevelConfig { capacity, associativity: assoc, linesize: line, latency }
    }

    fn two_level() -> SimConfig {
        SimConfig {
            pagesize: 4096,
            memory_latency: 100,
            cache_levels: vec![l1(32 << 10, 8, 64, 3), l1(4 << 20, 16, 64, 15)],
            tlb_levels: vec![],
            mapping: Mapping::Identity,
            inclusion: Inclusion::Inclusive,
            replacement: Replacement::Lru,
        }
    }

    /// Independent LRU counter: per set, a list of lines in recency order.
    fn brute_force_single_level(cfg: &CacheLevelConfig, mem: u32, order: &[usize], laps: usize) -> f64 {
        let sets = cfg.capacity / (cfg.associativity * cfg.linesize);
        let mut recency: Vec<Vec<usize>> = vec![Vec::new(); sets];
        let mut touch = |addr: usize| -> bool {
            let line = addr / cfg.linesize;
            let set = &mut recency[line % sets];
            let hit = if let Some(p) = set.iter().position(|&l| l == line) {
                set.remove(p);
                true
            } else {
                if set.len() == cfg.associativity {
                    set.remove(0);
                }
                false
            };
            set.push(line);
            hit
        };
        order.iter().for_each(|&a| {
            touch(a);
        });
        let mut total = 0u64;
        for _ in 0..laps {
            for &a in order {
                total += if touch(a) { cfg.latency as u64 } else { mem as u64 };
            }
        }
        total as f64 / (laps * order.len()) as f64
    }

    #[test]
    fn gap_33_1k_thrashes_one_set() {
        // Set 0 of a 32 KB 8-way cache receives 9 of the 33 lines; cyclic
        // LRU over 9 lines in 8 ways misses on all 9 every lap.
        let env = MachineEnv::default();
        let rs = build_gap_string(33, 1024, 0, &env).unwrap();
        let t = simulate(&two_level(), &rs, 3).unwrap();
        assert!((t - (24.0 * 3.0 + 9.0 * 15.0) / 33.0).abs() < 1e-12, "{t}");
    }

    #[test]
    fn gap_5_8k_all_hits() {
        let env = MachineEnv::default();
        let rs = build_gap_string(5, 8192, 0, &env).unwrap();
        assert_eq!(simulate(&two_level(), &rs, 3).unwrap(), 3.0);
    }

    #[test]
    fn cache_string_fitting_l1_hits() {
        let env = MachineEnv::default();
        let rs = build_cache_string(32 << 10, &env, 7).unwrap();
        assert_eq!(simulate(&two_level(), &rs, 2).unwrap(), 3.0);
    }

    #[test]
    fn cache_string_twice_l1_misses() {
        let env = MachineEnv::default();
        let rs = build_cache_string(64 << 10, &env, 7).unwrap();
        let t = simulate(&two_level(), &rs, 2).unwrap();
        assert!(t > 3.0);
        assert_eq!(t, 15.0);
    }

    #[test]
    fn tlb_string_against_entry_count() {
        let env = MachineEnv::default();
        let rs = build_tlb_string(2, 64 * 4096, &env, 3).unwrap();
        let mut config = SimConfig {
            cache_levels: vec![l1(1 << 20, 16, 64, 3)],
            tlb_levels: vec![TlbLevelConfig { entries: 64, latency: 30 }],
            ..two_level()
        };
        assert_eq!(simulate(&config, &rs, 2).unwrap(), 3.0);
        config.tlb_levels[0].entries = 32;
        assert_eq!(simulate(&config, &rs, 2).unwrap(), 33.0);
        config.tlb_levels[0].entries = 128;
        assert_eq!(simulate(&config, &rs, 2).unwrap(), 3.0);

        // 64 pages through 63 entries: every access misses.
        config.tlb_levels[0].entries = 63;
        assert_eq!(simulate(&config, &rs, 2).unwrap(), 33.0);
    }

    #[test]
    fn tlb_miss_count_per_access_is_line_count_invariant() {
        let env = MachineEnv::default();
        let config = SimConfig {
            cache_levels: vec![l1(8 << 20, 16, 64, 3)],
            tlb_levels: vec![TlbLevelConfig { entries: 48, latency: 30 }],
            ..two_level()
        };
        for pages in [32usize, 40, 48, 56, 64, 96] {
            let rates: Vec<f64> = (1..=4)
                .map(|n| {
                    let rs = build_tlb_string(n, pages * 4096, &env, 1).unwrap();
                    (simulate(&config, &rs, 2).unwrap() - 3.0) / 30.0
                })
                .collect();
            assert!(rates.iter().all(|&r| r == rates[0]), "{pages}: {rates:?}");
        }
    }

    #[test]
    fn random_mapping_keeps_page_offsets() {
        let config = SimConfig { mapping: Mapping::RandomPerPage(99), ..two_level() };
        let mut sim = Simulator::new(config).unwrap();
        sim.reset(5);
        for vaddr in [0u64, 17, 4095, 4096 + 8, 123_456, 9_999_999] {
            let p = sim.translate(vaddr);
            assert_eq!(p % 4096, vaddr % 4096);
        }
        assert_ne!(sim.translate(4096) / 4096, 1);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut config = two_level();
        config.mapping = Mapping::RandomPerPage(3);
        config.tlb_levels =
            vec![TlbLevelConfig { entries: 64, latency: 7 }, TlbLevelConfig { entries: 1024, latency: 30 }];
        let text = config.to_toml_string();
        assert_eq!(SimConfig::from_toml_str(&text).unwrap(), config);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = two_level();
        c.cache_levels[0].capacity = 1000;
        assert!(matches!(c.validate(), Err(Error::ConfigInvalid(_))));
        let mut c = two_level();
        c.cache_levels[1].latency = 2;
        assert!(c.validate().is_err());
        let mut c = two_level();
        c.memory_latency = 10;
        assert!(c.validate().is_err());
        assert!(SimConfig::from_toml_str("memory_latency = 100\nbogus = 1").is_err());
    }

    proptest! {
        #[test]
        fn single_level_matches_brute_force(
            cap_shift in 10u32..14,
            assoc_shift in 0u32..4,
            line_shift in 5u32..8,
            kb in 1usize..40,
            seed in any::<u64>(),
        ) {
            let cfg = l1(1 << cap_shift, 1 << assoc_shift, 1 << line_shift, 2);
            prop_assume!(cfg.capacity >= cfg.associativity * cfg.linesize);
            let config = SimConfig {
                cache_levels: vec![cfg],
                memory_latency: 50,
                ..two_level()
            };
            let env = MachineEnv::default();
            let rs = build_cache_string(kb * 1024, &env, seed).unwrap();
            let fast = simulate(&config, &rs, 2).unwrap();
            let slow = brute_force_single_level(&cfg, 50, &rs.access_order(), 2);
            prop_assert!((fast - slow).abs() < 1e-12);
        }

        #[test]
        fn deterministic(kb in 1usize..64, seed in any::<u64>(), map_seed in any::<u64>()) {
            let config = SimConfig { mapping: Mapping::RandomPerPage(map_seed), ..two_level() };
            let rs = build_cache_string(kb * 1024, &MachineEnv::default(), seed).unwrap();
            let a = simulate(&config, &rs, 2).unwrap();
            let b = simulate(&config, &rs, 2).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
