//! Simulated 48-bit tagged address space.
//!
//! Memory is sparse: 4 KiB pages materialize on first write. Each byte
//! carries a value, a secret-taint bit, and a written bit (reads of bytes
//! never written return zero and are counted as warnings). A registry of
//! mapped ranges — one per live allocation — drives access checks and the
//! exact byte accounting the doubling invariant relies on.

use std::collections::BTreeMap;
use thiserror::Error;

pub const PAGE_SIZE: u64 = 4096;
pub const VA_BITS: u32 = 48;
pub const PT_LEVELS: u32 = 4;
pub const LEVEL_BITS: u32 = 9;

/// User mappings start here so the null page never resolves.
pub const ARGS_BASE: u64 = 0x0001_0000;
pub const GLOBALS_BASE: u64 = 0x0010_0000;
pub const STACK_LIMIT: u64 = 0x0040_0000;
pub const STACK_TOP: u64 = 0x0080_0000;
pub const HEAP_BASE: u64 = 0x1000_0000;
pub const HEAP_END: u64 = 0x2000_0000;
pub const SECRET_HEAP_BASE: u64 = 0x2000_0000;
pub const SECRET_HEAP_END: u64 = 0x4000_0000;
pub const SHADOW_BASE: u64 = 0x4000_0000;
pub const SHADOW_END: u64 = 0x6000_0000;

pub fn page_base(addr: u64) -> u64 {
    addr & !(PAGE_SIZE - 1)
}

pub fn is_canonical(addr: u64) -> bool {
    addr >> VA_BITS == 0
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum AccessError {
    #[error("non-canonical address 0x{0:016x}")]
    NonCanonical(u64),
    #[error("unmapped address 0x{0:016x}")]
    Unmapped(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum RangeKind {
    Args,
    Globals,
    Stack,
    Heap,
    SecretHeap,
    Shadow,
}

#[derive(Debug, Clone, Copy)]
pub struct RangeInfo {
    pub end: u64,
    pub kind: RangeKind,
}

/// A materialized page: values plus per-byte taint and written bitmaps.
pub struct Page {
    pub bytes: Box<[u8; PAGE_SIZE as usize]>,
    taint: [u64; 64],
    written: [u64; 64],
}

impl Page {
    fn new() -> Self {
        Page {
            bytes: Box::new([0; PAGE_SIZE as usize]),
            taint: [0; 64],
            written: [0; 64],
        }
    }

    pub fn taint_bit(&self, off: usize) -> bool {
        self.taint[off / 64] >> (off % 64) & 1 == 1
    }

    fn set_taint(&mut self, off: usize, v: bool) {
        if v {
            self.taint[off / 64] |= 1 << (off % 64);
        } else {
            self.taint[off / 64] &= !(1 << (off % 64));
        }
    }

    pub fn written_bit(&self, off: usize) -> bool {
        self.written[off / 64] >> (off % 64) & 1 == 1
    }

    fn set_written(&mut self, off: usize) {
        self.written[off / 64] |= 1 << (off % 64);
    }

    /// Little-endian word at an 8-aligned page offset.
    pub fn word(&self, off: usize) -> u64 {
        u64::from_le_bytes(self.bytes[off..off + 8].try_into().unwrap())
    }

    /// True if any of the 8 bytes at `off` is tainted.
    pub fn word_tainted(&self, off: usize) -> bool {
        (0..8).any(|i| self.taint_bit(off + i))
    }
}

#[derive(Default)]
pub struct MemoryImage {
    pages: BTreeMap<u64, Page>,
    ranges: BTreeMap<u64, RangeInfo>,
    /// Ranges whose contents are secrets by annotation, independent of
    /// address tagging. Loads from these ranges yield tainted values.
    designated: BTreeMap<u64, u64>,
    mapped_bytes: u64,
    peak_mapped_bytes: u64,
    pub uninit_reads: u64,
    heap_next: u64,
    secret_heap_next: u64,
    shadow_next: u64,
}

impl MemoryImage {
    pub fn new() -> Self {
        MemoryImage {
            heap_next: HEAP_BASE,
            secret_heap_next: SECRET_HEAP_BASE,
            shadow_next: SHADOW_BASE,
            ..Default::default()
        }
    }

    pub fn mapped_bytes(&self) -> u64 {
        self.mapped_bytes
    }

    pub fn peak_mapped_bytes(&self) -> u64 {
        self.peak_mapped_bytes
    }

    pub fn map_range(&mut self, start: u64, end: u64, kind: RangeKind) {
        debug_assert!(start < end && is_canonical(end));
        debug_assert!(self.range_containing(start).is_none());
        self.ranges.insert(start, RangeInfo { end, kind });
        self.mapped_bytes += end - start;
        self.peak_mapped_bytes = self.peak_mapped_bytes.max(self.mapped_bytes);
    }

    /// Unmap and scrub: values, taint, and written bits all cleared so
    /// reuse of the address space is deterministic.
    pub fn unmap_range(&mut self, start: u64) {
        let Some(info) = self.ranges.remove(&start) else { return };
        self.mapped_bytes -= info.end - start;
        self.undesignate(start);
        let mut addr = start;
        while addr < info.end {
            let pb = page_base(addr);
            let chunk_end = (pb + PAGE_SIZE).min(info.end);
            if let Some(page) = self.pages.get_mut(&pb) {
                for a in addr..chunk_end {
                    let off = (a - pb) as usize;
                    page.bytes[off] = 0;
                    page.set_taint(off, false);
                    page.written[off / 64] &= !(1 << (off % 64));
                }
            }
            addr = chunk_end;
        }
    }

    pub fn range_containing(&self, addr: u64) -> Option<(u64, RangeInfo)> {
        let (&start, info) = self.ranges.range(..=addr).next_back()?;
        (addr < info.end).then_some((start, *info))
    }

    /// All `len` bytes must fall inside one mapped range.
    pub fn check_access(&self, addr: u64, len: u64) -> Result<(), AccessError> {
        if !is_canonical(addr) {
            return Err(AccessError::NonCanonical(addr));
        }
        match self.range_containing(addr) {
            Some((_, info)) if addr + len <= info.end => Ok(()),
            _ => Err(AccessError::Unmapped(addr)),
        }
    }

    pub fn designate(&mut self, start: u64, end: u64) {
        self.designated.insert(start, end);
    }

    pub fn undesignate(&mut self, start: u64) {
        self.designated.remove(&start);
    }

    pub fn is_designated(&self, addr: u64) -> bool {
        match self.designated.range(..=addr).next_back() {
            Some((_, &end)) => addr < end,
            None => false,
        }
    }

    fn page_mut(&mut self, addr: u64) -> &mut Page {
        self.pages.entry(page_base(addr)).or_insert_with(Page::new)
    }

    /// Raw byte write. Callers perform access checks.
    pub fn write_byte(&mut self, addr: u64, value: u8, taint: bool) {
        let page = self.page_mut(addr);
        let off = (addr % PAGE_SIZE) as usize;
        page.bytes[off] = value;
        page.set_taint(off, taint);
        page.set_written(off);
    }

    /// Raw byte read, counting reads of never-written bytes.
    pub fn read_byte(&mut self, addr: u64) -> (u8, bool) {
        let pb = page_base(addr);
        let off = (addr % PAGE_SIZE) as usize;
        match self.pages.get(&pb) {
            Some(page) => {
                if !page.written_bit(off) {
                    self.uninit_reads += 1;
                }
                (page.bytes[off], page.taint_bit(off))
            }
            None => {
                self.uninit_reads += 1;
                (0, false)
            }
        }
    }

    /// Side-effect-free byte view, for scanners and assertions.
    pub fn peek_byte(&self, addr: u64) -> (u8, bool) {
        let pb = page_base(addr);
        let off = (addr % PAGE_SIZE) as usize;
        match self.pages.get(&pb) {
            Some(page) => (page.bytes[off], page.taint_bit(off)),
            None => (0, false),
        }
    }

    /// Side-effect-free little-endian u64 view.
    pub fn peek_word(&self, addr: u64) -> u64 {
        let mut b = [0u8; 8];
        for (i, slot) in b.iter_mut().enumerate() {
            *slot = self.peek_byte(addr + i as u64).0;
        }
        u64::from_le_bytes(b)
    }

    pub fn write_bytes(&mut self, addr: u64, data: &[u8], taint: bool) {
        for (i, &b) in data.iter().enumerate() {
            self.write_byte(addr + i as u64, b, taint);
        }
    }

    pub fn read_bytes(&mut self, addr: u64, len: u64) -> (Vec<u8>, bool) {
        let mut out = Vec::with_capacity(len as usize);
        let mut tainted = false;
        for i in 0..len {
            let (b, t) = self.read_byte(addr + i);
            out.push(b);
            tainted |= t;
        }
        (out, tainted)
    }

    /// Materialized pages in address order. Pages never written stay
    /// absent, which keeps scans proportional to touched memory.
    pub fn present_pages(&self) -> impl Iterator<Item = (u64, &Page)> {
        self.pages.iter().map(|(&b, p)| (b, p))
    }

    pub fn present_page_count(&self) -> usize {
        self.pages.len()
    }

    pub fn alloc_heap(&mut self, size: u64) -> Option<u64> {
        let base = self.heap_next;
        let rounded = size.div_ceil(16) * 16;
        if base + rounded > HEAP_END {
            return None;
        }
        self.heap_next += rounded;
        self.map_range(base, base + size, RangeKind::Heap);
        Some(base)
    }

    pub fn alloc_secret_heap(&mut self, size: u64) -> Option<u64> {
        let base = self.secret_heap_next;
        let rounded = size.div_ceil(16) * 16;
        if base + rounded > SECRET_HEAP_END {
            return None;
        }
        self.secret_heap_next += rounded;
        self.map_range(base, base + size, RangeKind::SecretHeap);
        Some(base)
    }

    pub fn alloc_shadow(&mut self, size: u64) -> Option<u64> {
        let base = self.shadow_next;
        let rounded = size.div_ceil(16) * 16;
        if base + rounded > SHADOW_END {
            return None;
        }
        self.shadow_next += rounded;
        self.map_range(base, base + size, RangeKind::Shadow);
        Some(base)
    }
}
