//! Empirical characterization of a data memory hierarchy.
//!
//! Probes time circular pointer chains ("reference strings") against a
//! [`backend::Backend`] and turn the timings into cache and TLB parameters.
//! The [`sim`] module provides a deterministic LRU hierarchy that the probes
//! can run against in place of real memory.

pub mod analysis;
pub mod backend;
pub mod cacheprobe;
pub mod characterize;
pub mod cli;
pub mod error;
pub mod l1probe;
pub mod probe;
pub mod refstring;
pub mod sim;
pub mod timing;
pub mod tlbprobe;

pub use analysis::{HierarchyReport, LevelReport};
pub use backend::{Backend, RealMemory, Simulated};
pub use characterize::ProbeOptions;
pub use error::{Error, Result};
pub use refstring::{MachineEnv, ReferenceString};
pub use sim::SimConfig;
