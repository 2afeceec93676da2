//! Reference strings: circular pointer chains laid over a page-aligned buffer.
//!
//! Three families are built here:
//!
//! * gap strings `G(n, k, o)`, which pile `n` locations into one cache set,
//! * cache strings `C(k)`, one access per L1 line per page, page-contiguous,
//! * TLB strings `T(n, k)`, `n` accesses per page over a `k` byte footprint.
//!
//! A [`ReferenceString`] only records slot offsets and the successor of each
//! slot. Backends decide how to realise it: the real backend writes absolute
//! next-slot addresses into memory, the simulator walks the offsets.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::DEFAULT_REGION_CAP;
use crate::error::{Error, Result};

/// Page and line geometry the strings are laid out against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineEnv {
    pub pagesize: usize,
    /// Bytes per pointer-sized slot.
    pub word: usize,
    /// L1 line size; 64 until the L1 probe has run.
    pub l1_linesize: usize,
}

impl Default for MachineEnv {
    fn default() -> Self {
        MachineEnv { pagesize: 4096, word: std::mem::size_of::<usize>(), l1_linesize: 64 }
    }
}

impl MachineEnv {
    pub fn new(pagesize: usize, word: usize, l1_linesize: usize) -> Result<Self> {
        if !pagesize.is_power_of_two() {
            return Err(Error::geometry(format!("pagesize {pagesize} is not a power of two")));
        }
        if word != 4 && word != 8 {
            return Err(Error::geometry(format!("word size {word} must be 4 or 8")));
        }
        if l1_linesize < word || l1_linesize > pagesize || !l1_linesize.is_power_of_two() {
            return Err(Error::geometry(format!(
                "line size {l1_linesize} must be a power of two in [{word}, {pagesize}]"
            )));
        }
        Ok(MachineEnv { pagesize, word, l1_linesize })
    }

    /// Geometry of the running host; the line size starts at the default.
    pub fn host() -> Self {
        MachineEnv { pagesize: host_pagesize(), ..MachineEnv::default() }
    }

    pub fn with_linesize(self, l1_linesize: usize) -> Result<Self> {
        MachineEnv::new(self.pagesize, self.word, l1_linesize)
    }

    pub fn lines_per_page(&self) -> usize {
        self.pagesize / self.l1_linesize
    }
}

#[cfg(unix)]
fn host_pagesize() -> usize {
    // SAFETY: sysconf has no preconditions.
    let size = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if size > 0 && (size as usize).is_power_of_two() {
        size as usize
    } else {
        4096
    }
}

#[cfg(not(unix))]
fn host_pagesize() -> usize {
    4096
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StringKind {
    Gap { n: usize, gap: usize, offset: usize },
    Cache { footprint: usize },
    Tlb { lines_per_page: usize, footprint: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceString {
    kind: StringKind,
    footprint: usize,
    /// Byte offsets, indexed by slot.
    slots: Vec<usize>,
    /// `next[i]` is the slot visited after slot `i`.
    next: Vec<u32>,
    seed: u64,
    env: MachineEnv,
}

impl ReferenceString {
    fn from_order(kind: StringKind, footprint: usize, slots: Vec<usize>, seed: u64, env: MachineEnv) -> Self {
        let n = slots.len();
        let next = (0..n).map(|i| ((i + 1) % n) as u32).collect();
        ReferenceString { kind, footprint, slots, next, seed, env }
    }

    pub fn kind(&self) -> StringKind {
        self.kind
    }

    /// Bytes of address space the buffer must cover (page multiple for
    /// gap strings, the requested footprint otherwise).
    pub fn footprint(&self) -> usize {
        self.footprint
    }

    pub fn chain_length(&self) -> usize {
        self.slots.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn env(&self) -> MachineEnv {
        self.env
    }

    /// Offset of the first slot in access order.
    pub fn entry(&self) -> usize {
        self.slots[0]
    }

    /// Slot offsets indexed by slot number.
    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    /// Successor slot numbers, parallel to [`slots`](Self::slots).
    pub fn links(&self) -> &[u32] {
        &self.next
    }

    /// Offsets in access order, starting at the entry, one full lap.
    pub fn access_order(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.slots.len());
        let mut idx = 0usize;
        for _ in 0..self.slots.len() {
            out.push(self.slots[idx]);
            idx = self.next[idx] as usize;
        }
        out
    }

    #[cfg(test)]
    pub(crate) fn relink(&mut self, from: usize, to: usize) {
        self.next[from] = to as u32;
    }
}

/// `G(n, k, o)`: slot `i` at `i * k` for `i < n - 1`, the last one at
/// `(n - 1) * k + o`, visited in address order.
pub fn build_gap_string(n: usize, gap: usize, offset: usize, env: &MachineEnv) -> Result<ReferenceString> {
    if n < 2 {
        return Err(Error::geometry(format!("gap string needs n >= 2, got {n}")));
    }
    if gap < env.word || !gap.is_multiple_of(env.word) {
        return Err(Error::geometry(format!("gap {gap} must be a positive multiple of the word size {}", env.word)));
    }
    if !offset.is_multiple_of(env.word) || offset >= env.pagesize {
        return Err(Error::geometry(format!("offset {offset} must be a word multiple below the page size")));
    }
    let span = (n - 1)
        .checked_mul(gap)
        .and_then(|s| s.checked_add(offset + env.word))
        .ok_or_else(|| Error::geometry("gap string span overflows"))?;
    if span > DEFAULT_REGION_CAP {
        return Err(Error::geometry(format!(
            "gap string spans {span} bytes, above the {DEFAULT_REGION_CAP} byte allocation limit"
        )));
    }
    let footprint = span.div_ceil(env.pagesize) * env.pagesize;
    let mut slots: Vec<usize> = (0..n).map(|i| i * gap).collect();
    slots[n - 1] += offset;
    Ok(ReferenceString::from_order(StringKind::Gap { n, gap, offset }, footprint, slots, 0, *env))
}

fn lines_in_row(footprint: usize, row: usize, env: &MachineEnv) -> usize {
    let bytes = (footprint - row * env.pagesize).min(env.pagesize);
    bytes.div_ceil(env.l1_linesize)
}

/// `C(k)`: every L1 line of every page, pages visited one at a time. Row
/// order and the order inside each row are shuffled from `seed`. A footprint
/// that does not fill its last page gets a truncated last row.
pub fn build_cache_string(footprint: usize, env: &MachineEnv, seed: u64) -> Result<ReferenceString> {
    if footprint < 2 * env.word {
        return Err(Error::geometry(format!("cache footprint {footprint} below two words")));
    }
    if !footprint.is_multiple_of(1024) {
        return Err(Error::geometry(format!("cache footprint {footprint} is not a multiple of 1 KB")));
    }
    if footprint > DEFAULT_REGION_CAP {
        return Err(Error::geometry(format!("cache footprint {footprint} above the allocation limit")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = footprint.div_ceil(env.pagesize);
    let mut row_order: Vec<usize> = (0..rows).collect();
    row_order.shuffle(&mut rng);

    let mut slots = Vec::with_capacity(footprint / env.l1_linesize + 1);
    let mut columns: Vec<usize> = Vec::with_capacity(env.lines_per_page());
    for row in row_order {
        columns.clear();
        columns.extend(0..lines_in_row(footprint, row, env));
        columns.shuffle(&mut rng);
        let base = row * env.pagesize;
        slots.extend(columns.iter().map(|c| base + c * env.l1_linesize));
    }
    Ok(ReferenceString::from_order(StringKind::Cache { footprint }, footprint, slots, seed, *env))
}

/// `T(n, k)`: `n` lines in each page of a `k` byte footprint.
///
/// For `n = 1` each page (in shuffled order) takes the next line from a
/// shuffled column set, wrapping modulo the lines per page. For `n > 1`
/// page `p` owns the `n` lines starting at line `(p * n) mod lines_per_page`;
/// the string makes `n` rounds over one shuffled page order, touching a
/// different line of each page per round, so consecutive accesses never
/// share a page (unless the footprint is a single page).
pub fn build_tlb_string(
    lines_per_page: usize,
    footprint: usize,
    env: &MachineEnv,
    seed: u64,
) -> Result<ReferenceString> {
    let lpp = env.lines_per_page();
    if lines_per_page == 0 || lines_per_page > lpp {
        return Err(Error::geometry(format!("TLB string needs 1 <= n <= {lpp} lines per page, got {lines_per_page}")));
    }
    if footprint == 0 || !footprint.is_multiple_of(env.pagesize) {
        return Err(Error::geometry(format!("TLB footprint {footprint} is not a positive multiple of the page size")));
    }
    if footprint > DEFAULT_REGION_CAP {
        return Err(Error::geometry(format!("TLB footprint {footprint} above the allocation limit")));
    }
    let pages = footprint / env.pagesize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row_order: Vec<usize> = (0..pages).collect();
    row_order.shuffle(&mut rng);
    let mut columns: Vec<usize> = (0..lpp).collect();
    columns.shuffle(&mut rng);

    let line = env.l1_linesize;
    let slots: Vec<usize> = if lines_per_page == 1 {
        row_order.iter().enumerate().map(|(i, &page)| page * env.pagesize + columns[i % lpp] * line).collect()
    } else {
        let mut slots = Vec::with_capacity(pages * lines_per_page);
        for round in 0..lines_per_page {
            for &page in &row_order {
                let column = (page * lines_per_page + round) % lpp;
                slots.push(page * env.pagesize + column * line);
            }
        }
        slots
    };
    Ok(ReferenceString::from_order(StringKind::Tlb { lines_per_page, footprint }, footprint, slots, seed, *env))
}

/// True iff the chain is one cycle through every slot and the slots sit
/// where their kind says they should.
pub fn verify_cycle(rs: &ReferenceString) -> bool {
    let n = rs.slots.len();
    if n == 0 || rs.next.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    let mut idx = 0usize;
    for _ in 0..n {
        if seen[idx] {
            return false;
        }
        seen[idx] = true;
        idx = rs.next[idx] as usize;
        if idx >= n {
            return false;
        }
    }
    if idx != 0 {
        return false;
    }

    let env = &rs.env;
    if rs.slots.iter().any(|&s| s >= rs.footprint || s % env.word != 0) {
        return false;
    }
    let order = rs.access_order();
    match rs.kind {
        StringKind::Gap { n: count, gap, offset } => {
            count == n
                && order.iter().enumerate().all(|(i, &s)| {
                    let expected = i * gap + if i == count - 1 { offset } else { 0 };
                    s == expected
                })
        }
        StringKind::Cache { footprint } => verify_cache_layout(&order, footprint, env),
        StringKind::Tlb { lines_per_page, footprint } => verify_tlb_layout(&order, lines_per_page, footprint, env),
    }
}

fn verify_cache_layout(order: &[usize], footprint: usize, env: &MachineEnv) -> bool {
    let rows = footprint.div_ceil(env.pagesize);
    let mut counts = vec![0usize; rows];
    let mut finished = vec![false; rows];
    let mut distinct = HashSet::with_capacity(order.len());
    let mut current: Option<usize> = None;
    for &s in order {
        if s % env.l1_linesize != 0 || !distinct.insert(s) {
            return false;
        }
        let page = s / env.pagesize;
        if current != Some(page) {
            if finished[page] {
                return false;
            }
            if let Some(prev) = current {
                finished[prev] = true;
            }
            current = Some(page);
        }
        counts[page] += 1;
    }
    counts.iter().enumerate().all(|(row, &c)| c == lines_in_row(footprint, row, env))
}

fn verify_tlb_layout(order: &[usize], lines_per_page: usize, footprint: usize, env: &MachineEnv) -> bool {
    let pages = footprint / env.pagesize;
    if order.len() != pages * lines_per_page {
        return false;
    }
    let mut counts = vec![0usize; pages];
    let mut distinct = HashSet::with_capacity(order.len());
    for &s in order {
        if s % env.l1_linesize != 0 || !distinct.insert(s) {
            return false;
        }
        counts[s / env.pagesize] += 1;
    }
    counts.iter().all(|&c| c == lines_per_page)
}
