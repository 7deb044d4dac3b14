//! Prefetcher oracle.
//!
//! Models an address-based prefetcher that inspects every 8-byte-aligned
//! word of resident memory and treats the value as a candidate virtual
//! address. A candidate leaks when its translation makes progress, so the
//! oracle centers on a 4-level page-walk model: level k resolves when some
//! resident page shares the top 9k bits of the 36-bit VA index with the
//! value. Two attacker models are provided:
//!
//! * `Heuristic` — the value must land within the same 4 GiB window as its
//!   storage location and the walk must resolve at least one level.
//! * `Aggressive` — any partially successful walk counts, regardless of
//!   where the word lives.
//!
//! `scan` is read-only over the memory image; the parallel version (behind
//! the `parallel` feature, on by default) splits work per page and sorts
//! findings so reports stay deterministic.

use crate::mem::{MemoryImage, LEVEL_BITS, PAGE_SIZE, PT_LEVELS, VA_BITS};
use crate::vm::{ExecTrace, StoreEvent};
use serde::Serialize;
use std::collections::HashSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DmpMode {
    Heuristic,
    Aggressive,
}

impl DmpMode {
    pub fn name(self) -> &'static str {
        match self {
            DmpMode::Heuristic => "heuristic",
            DmpMode::Aggressive => "aggressive",
        }
    }
}

/// Width of the locality window the heuristic model enforces.
pub const LOCALITY_WINDOW_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Finding {
    pub addr: u64,
    pub value: u64,
    pub walk_depth: u8,
    pub tainted: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DmpReport {
    pub mode: DmpMode,
    pub scanned: u64,
    pub findings: Vec<Finding>,
}

impl DmpReport {
    pub fn tainted_count(&self) -> usize {
        self.findings.iter().filter(|f| f.tainted).count()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "mode": self.mode.name(),
            "scanned": self.scanned,
            "findings": self.findings.iter().map(|f| serde_json::json!({
                "addr": format!("0x{:016x}", f.addr),
                "value": format!("0x{:016x}", f.value),
                "walk_depth": f.walk_depth,
                "tainted": f.tainted,
            })).collect::<Vec<_>>(),
        })
    }
}

const INDEX_BITS: u32 = PT_LEVELS * LEVEL_BITS; // 36

fn va_index(v: u64) -> u64 {
    (v >> 12) & ((1 << INDEX_BITS) - 1)
}

/// Shared-prefix sets per level, built once per scan from the resident
/// pages so each word costs O(levels).
pub struct WalkIndex {
    levels: [HashSet<u64>; PT_LEVELS as usize],
}

impl WalkIndex {
    pub fn build(mem: &MemoryImage) -> Self {
        let mut levels: [HashSet<u64>; 4] = Default::default();
        for (base, _) in mem.present_pages() {
            let idx = va_index(base);
            for k in 1..=PT_LEVELS {
                levels[(k - 1) as usize].insert(idx >> (INDEX_BITS - LEVEL_BITS * k));
            }
        }
        WalkIndex { levels }
    }

    /// Page-walk progress for a candidate value: 0 when the value is not a
    /// canonical address (translation never starts) or shares no index
    /// prefix with any resident page; otherwise the deepest level reached.
    pub fn walk_depth(&self, v: u64) -> u8 {
        if v >> VA_BITS != 0 {
            return 0;
        }
        let idx = va_index(v);
        let mut depth = 0;
        for k in 1..=PT_LEVELS {
            if self.levels[(k - 1) as usize].contains(&(idx >> (INDEX_BITS - LEVEL_BITS * k))) {
                depth = k as u8;
            } else {
                break;
            }
        }
        depth
    }
}

/// Number of page-table levels (out of 4) that resolve for value `v`
/// against the resident pages of `mem`.
pub fn page_walk(v: u64, mem: &MemoryImage) -> u8 {
    WalkIndex::build(mem).walk_depth(v)
}

fn candidate_depth(addr: u64, value: u64, mode: DmpMode, idx: &WalkIndex) -> Option<u8> {
    let depth = idx.walk_depth(value);
    if depth == 0 {
        return None;
    }
    match mode {
        DmpMode::Aggressive => Some(depth),
        DmpMode::Heuristic => {
            (value >> LOCALITY_WINDOW_BITS == addr >> LOCALITY_WINDOW_BITS).then_some(depth)
        }
    }
}

/// Would the prefetcher act on `value` found at `addr`?
pub fn is_prefetch_candidate(addr: u64, value: u64, mode: DmpMode, mem: &MemoryImage) -> bool {
    candidate_depth(addr, value, mode, &WalkIndex::build(mem)).is_some()
}

fn scan_page(
    base: u64,
    page: &crate::mem::Page,
    mode: DmpMode,
    idx: &WalkIndex,
    findings: &mut Vec<Finding>,
) {
    for off in (0..PAGE_SIZE as usize).step_by(8) {
        let value = page.word(off);
        let addr = base + off as u64;
        if let Some(depth) = candidate_depth(addr, value, mode, idx) {
            findings.push(Finding {
                addr,
                value,
                walk_depth: depth,
                tainted: page.word_tainted(off),
            });
        }
    }
}

/// Scan every resident 8-byte-aligned word, single-threaded.
pub fn scan_sequential(mem: &MemoryImage, mode: DmpMode) -> DmpReport {
    let idx = WalkIndex::build(mem);
    let mut findings = Vec::new();
    let mut scanned = 0u64;
    for (base, page) in mem.present_pages() {
        scanned += PAGE_SIZE / 8;
        scan_page(base, page, mode, &idx, &mut findings);
    }
    DmpReport { mode, scanned, findings }
}

/// Scan with one task per resident page. Findings are sorted afterwards so
/// the report is identical to the sequential one.
#[cfg(feature = "parallel")]
pub fn scan_parallel(mem: &MemoryImage, mode: DmpMode) -> DmpReport {
    use rayon::prelude::*;
    let idx = WalkIndex::build(mem);
    let pages: Vec<_> = mem.present_pages().collect();
    let scanned = pages.len() as u64 * (PAGE_SIZE / 8);
    let mut findings: Vec<Finding> = pages
        .par_iter()
        .map(|(base, page)| {
            let mut local = Vec::new();
            scan_page(*base, page, mode, &idx, &mut local);
            local
        })
        .reduce(Vec::new, |mut a, mut b| {
            a.append(&mut b);
            a
        });
    findings.sort();
    DmpReport { mode, scanned, findings }
}

/// Default scan entry point: parallel when built with the `parallel`
/// feature, sequential otherwise.
pub fn scan(mem: &MemoryImage, mode: DmpMode) -> DmpReport {
    #[cfg(feature = "parallel")]
    {
        scan_parallel(mem, mode)
    }
    #[cfg(not(feature = "parallel"))]
    {
        scan_sequential(mem, mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StoreClass {
    /// Split store with the prefix verified in both paired slots.
    InstrumentedSplit,
    /// Ordinary store of non-secret data to non-secret memory.
    PlainNonsecret,
    /// Raw store of secret-derived data, or any store into a
    /// secret-annotated region that bypassed the runtime.
    Violation,
}

pub fn classify_store(ev: &StoreEvent) -> StoreClass {
    if ev.split {
        if ev.prefix_ok {
            StoreClass::InstrumentedSplit
        } else {
            StoreClass::Violation
        }
    } else if ev.value_tainted || ev.designated_target {
        StoreClass::Violation
    } else {
        StoreClass::PlainNonsecret
    }
}

#[derive(Debug, Default, Clone, Serialize)]
pub struct StoreAudit {
    pub instrumented_split: u64,
    pub plain_nonsecret: u64,
    pub violations: Vec<StoreEvent>,
}

impl StoreAudit {
    pub fn violation_count(&self) -> usize {
        self.violations.len()
    }
}

/// Classify every store a trace performed. Transformed programs must audit
/// clean: zero violations.
pub fn audit_stores(trace: &ExecTrace) -> StoreAudit {
    let mut audit = StoreAudit::default();
    for ev in &trace.store_events {
        match classify_store(ev) {
            StoreClass::InstrumentedSplit => audit.instrumented_split += 1,
            StoreClass::PlainNonsecret => audit.plain_nonsecret += 1,
            StoreClass::Violation => audit.violations.push(*ev),
        }
    }
    audit
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_program, PolicyMode};
    use crate::mem::RangeKind;
    use crate::runtime::DEFAULT_PREFIX;
    use crate::transform::{transform_program, Policy};
    use crate::vm::{run_with_observer, AuditPoint, VmConfig};

    fn image_with_page(base: u64) -> MemoryImage {
        let mut m = MemoryImage::new();
        m.map_range(base, base + 4096, RangeKind::Heap);
        m.write_byte(base, 1, false); // materialize
        m
    }

    #[test]
    fn prefixed_word_never_walks() {
        let m = image_with_page(0x1000_0000);
        assert_eq!(page_walk(0xdead_ceef_5566_7788, &m), 0, "top bits nonzero");
    }

    #[test]
    fn mapped_address_fully_walks() {
        let m = image_with_page(0x1000_0000);
        assert_eq!(page_walk(0x1000_0008, &m), 4);
    }

    #[test]
    fn level_one_share_walks_one_level() {
        // page with level-1 index 5; candidate shares only that index
        let base = 5u64 << 39;
        let m = image_with_page(base);
        let v = base | (1 << 30);
        assert_eq!(page_walk(v, &m), 1);
        // null word: level-1 index 0, nothing mapped low
        assert_eq!(page_walk(0, &m), 0);
        assert!(!is_prefetch_candidate(base, 0, DmpMode::Aggressive, &m));
    }

    #[test]
    fn planted_pointer_is_candidate_in_both_modes() {
        let m = image_with_page(0x1000_0000);
        let addr = 0x1000_0100; // same 4 GiB window
        let v = 0x1000_0040;
        assert!(is_prefetch_candidate(addr, v, DmpMode::Heuristic, &m));
        assert!(is_prefetch_candidate(addr, v, DmpMode::Aggressive, &m));
    }

    #[test]
    fn prefixed_values_are_never_candidates() {
        let m = image_with_page(0x1000_0000);
        for s in [0u32, 1, 0x1000_0040, u32::MAX] {
            let v = crate::runtime::merge(DEFAULT_PREFIX, s);
            assert!(!is_prefetch_candidate(0x1000_0100, v, DmpMode::Heuristic, &m));
            assert!(!is_prefetch_candidate(0x1000_0100, v, DmpMode::Aggressive, &m));
        }
    }

    #[test]
    fn heuristic_needs_locality() {
        // target page far above the 4 GiB window of the storage address
        let far = 0x2_0000_0000u64;
        let m = image_with_page(far);
        let addr = 0x1000_0100;
        let mut m2 = m;
        m2.map_range(addr & !0xfff, (addr & !0xfff) + 4096, RangeKind::Heap);
        m2.write_byte(addr, 1, false);
        assert!(!is_prefetch_candidate(addr, far + 8, DmpMode::Heuristic, &m2));
        assert!(is_prefetch_candidate(addr, far + 8, DmpMode::Aggressive, &m2));
    }

    #[test]
    fn empty_image_scans_empty() {
        let m = MemoryImage::new();
        for mode in [DmpMode::Heuristic, DmpMode::Aggressive] {
            let r = scan(&m, mode);
            assert_eq!(r.scanned, 0);
            assert!(r.findings.is_empty());
        }
    }

    #[test]
    fn scan_parallel_matches_sequential() {
        let mut m = image_with_page(0x1000_0000);
        let mut rng = crate::rng::SplitMix64::new(3);
        for i in 0..2048 {
            m.write_byte(0x1000_0000 + i, rng.next_u64() as u8, i % 7 == 0);
        }
        for mode in [DmpMode::Heuristic, DmpMode::Aggressive] {
            let s = scan_sequential(&m, mode);
            #[cfg(feature = "parallel")]
            {
                let par = scan_parallel(&m, mode);
                let mut seq = s.clone();
                seq.findings.sort();
                assert_eq!(par.findings, seq.findings);
                assert_eq!(par.scanned, seq.scanned);
            }
            let _ = s;
        }
    }

    #[test]
    fn heuristic_findings_subset_of_aggressive() {
        let mut m = image_with_page(0x1000_0000);
        let mut rng = crate::rng::SplitMix64::new(11);
        for i in (0..4096).step_by(8) {
            let w = match rng.next_range(4) {
                0 => rng.next_u64(),                      // noise
                1 => 0x1000_0000 + rng.next_range(4096),  // local pointer
                2 => rng.next_range(1 << 40),             // low value
                _ => crate::runtime::merge(DEFAULT_PREFIX, rng.next_u64() as u32),
            };
            for (j, b) in w.to_le_bytes().iter().enumerate() {
                m.write_byte(0x1000_0000 + i + j as u64, *b, false);
            }
        }
        let h = scan_sequential(&m, DmpMode::Heuristic);
        let a = scan_sequential(&m, DmpMode::Aggressive);
        let aset: std::collections::HashSet<u64> = a.findings.iter().map(|f| f.addr).collect();
        for f in &h.findings {
            assert!(aset.contains(&f.addr), "heuristic finding missing from aggressive");
        }
        assert!(!a.findings.is_empty());
    }

    fn corpus_program(name: &str) -> crate::ir::Program {
        let text = std::fs::read_to_string(crate::corpus::default_dir().join(name)).unwrap();
        parse_program(&text).unwrap()
    }

    #[test]
    fn transformed_ctswap_audits_clean_at_every_point() {
        let p = corpus_program("ctswap.ir");
        let q = transform_program(
            &p,
            &Policy::new(PolicyMode::Annotated, false, DEFAULT_PREFIX).unwrap(),
        )
        .unwrap();
        let mut args = vec![0u8; 64];
        args[0] = 1;
        args[8] = 0xaa;
        args[16] = 0xbb;
        let mut points = 0;
        let trace = run_with_observer(&q, &args, &VmConfig::default(), |img, _| {
            points += 1;
            for mode in [DmpMode::Heuristic, DmpMode::Aggressive] {
                let r = scan_sequential(img, mode);
                assert_eq!(r.tainted_count(), 0, "tainted candidate under {mode:?}");
            }
        });
        assert!(trace.fault.is_none());
        assert!(points > 4, "split stores plus end");
    }

    #[test]
    fn untransformed_planted_pointer_is_found() {
        let p = corpus_program("planted_pointer.ir");
        let mut rng = crate::rng::SplitMix64::from_name("planted");
        let args = rng.bytes(64);
        let mut end_findings = (0, 0);
        let trace = run_with_observer(&p, &args, &VmConfig::default(), |img, point| {
            if point == AuditPoint::End {
                end_findings = (
                    scan_sequential(img, DmpMode::Heuristic).tainted_count(),
                    scan_sequential(img, DmpMode::Aggressive).tainted_count(),
                );
            }
        });
        assert!(trace.fault.is_none());
        assert!(end_findings.0 >= 1, "heuristic must see the planted pointer");
        assert!(end_findings.1 >= 1, "aggressive must see the planted pointer");
    }

    #[test]
    fn audit_classifies_stores() {
        let split_ok = StoreEvent {
            split: true,
            addr: 0x2000_0000,
            size: 8,
            value_tainted: true,
            designated_target: true,
            prefix_ok: true,
        };
        let plain = StoreEvent {
            split: false,
            addr: 0x1000_0000,
            size: 8,
            value_tainted: false,
            designated_target: false,
            prefix_ok: true,
        };
        let raw_secret = StoreEvent { value_tainted: true, ..plain };
        let into_designated = StoreEvent { designated_target: true, ..plain };
        assert_eq!(classify_store(&split_ok), StoreClass::InstrumentedSplit);
        assert_eq!(classify_store(&plain), StoreClass::PlainNonsecret);
        assert_eq!(classify_store(&raw_secret), StoreClass::Violation);
        assert_eq!(classify_store(&into_designated), StoreClass::Violation);
    }

    #[test]
    fn transformed_corpus_trace_has_zero_violations() {
        let p = corpus_program("memcpy32.ir");
        let q = transform_program(
            &p,
            &Policy::new(PolicyMode::AllSecret, false, DEFAULT_PREFIX).unwrap(),
        )
        .unwrap();
        let mut rng = crate::rng::SplitMix64::from_name("memcpy32");
        let args = rng.bytes(64);
        let trace = crate::vm::run(&q, &args, &VmConfig::default());
        assert!(trace.fault.is_none());
        let audit = audit_stores(&trace);
        assert_eq!(audit.violation_count(), 0);
        assert!(audit.instrumented_split > 0);
    }

    #[test]
    fn injected_raw_secret_store_is_one_violation() {
        let src = "fn main() {\n  %k = call ptr @secret_malloc(i64 8)\n  store i64 5, ptr %k, align 8\n  ret i64 0\n}\n";
        let p = parse_program(src).unwrap();
        let trace = crate::vm::run(&p, &[], &VmConfig::default());
        let audit = audit_stores(&trace);
        assert_eq!(audit.violation_count(), 1);
    }

    #[test]
    fn no_secret_stores_means_all_plain() {
        let src = "fn main() {\n  %s = alloca i64, 1, align 8\n  store i64 1, ptr %s, align 8\n  store i64 2, ptr %s, align 8\n  ret i64 0\n}\n";
        let p = parse_program(src).unwrap();
        let trace = crate::vm::run(&p, &[], &VmConfig::default());
        let audit = audit_stores(&trace);
        assert_eq!(audit.violation_count(), 0);
        assert_eq!(audit.instrumented_split, 0);
        assert_eq!(audit.plain_nonsecret, 2);
    }
}
