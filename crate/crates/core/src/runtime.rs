//! Execution-time support for split-format secrets.
//!
//! A secret allocation of n logical bytes owns two physical regions of
//! `ceil_to_8(n)` bytes each: the original region and a shadow region. A
//! logical byte at offset `o` lives at
//!
//! ```text
//! s    = o / 4          four-byte segment index
//! half = s % 2          0 -> original region, 1 -> shadow region
//! slot = s / 2          8-byte slot within that region
//! phys = region_base + slot * 8 + (o % 4)
//! ```
//!
//! Bytes 4..8 of every slot in both regions always hold the 32-bit prefix
//! (little-endian), written once at allocation time, so every 8-byte-aligned
//! word that can contain secret bits is non-canonical from the moment the
//! allocation exists. Addresses handed to the program carry a tag in bit 63;
//! a raw dereference of a tagged address is non-canonical and faults.

use crate::mem::MemoryImage;
use std::collections::BTreeMap;
use thiserror::Error;

/// Default slot prefix. Any word `prefix:u32 || fragment:u32` has nonzero
/// bits above the 48-bit addressing range, so translation never starts.
pub const DEFAULT_PREFIX: u32 = 0xdead_ceef;

pub const TAG_BIT: u64 = 1 << 63;
const CANONICAL_MASK: u64 = 0x0000_FFFF_FFFF_FFFF;

pub fn is_secret(addr: u64) -> bool {
    addr & TAG_BIT != 0
}

pub fn set_tag(addr: u64) -> u64 {
    addr | TAG_BIT
}

pub fn clear_tag(addr: u64) -> u64 {
    addr & CANONICAL_MASK
}

pub fn ceil_to_8(n: u64) -> u64 {
    n.div_ceil(8) * 8
}

/// `prefix || segment` as one little-endian slot value.
pub fn merge(prefix: u32, segment: u32) -> u64 {
    ((prefix as u64) << 32) | segment as u64
}

/// Low 32 bits of a slot: the data fragment.
pub fn extract(word: u64) -> u32 {
    word as u32
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuntimeError {
    #[error("allocation of zero bytes")]
    ZeroSizeAllocation,
    #[error("out of simulated memory")]
    OutOfSimulatedMemory,
    #[error("double free of 0x{0:016x}")]
    DoubleFree(u64),
    #[error("0x{0:016x} is not a live secret allocation")]
    NotSecretAllocation(u64),
    #[error("no registered secret region contains 0x{0:016x}")]
    UnregisteredAddress(u64),
    #[error("frame stack underflow")]
    FrameUnderflow,
}

/// One live secret allocation: where its alternate segments live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentLayout {
    pub original_base: u64,
    pub shadow_base: u64,
    pub logical_size: u64,
}

impl SegmentLayout {
    /// Physical region size (each of the two regions).
    pub fn capacity(&self) -> u64 {
        ceil_to_8(self.logical_size)
    }

    /// Physical address of logical byte offset `o`.
    pub fn phys_addr(&self, o: u64) -> u64 {
        let seg = o / 4;
        let half = seg % 2;
        let slot = seg / 2;
        let base = if half == 0 { self.original_base } else { self.shadow_base };
        base + slot * 8 + (o % 4)
    }

    pub fn slots_per_region(&self) -> u64 {
        self.capacity() / 8
    }
}

#[derive(Debug, Clone, Copy)]
struct ShadowEntry {
    shadow_base: u64,
    logical_size: u64,
    /// Entries on the heap are freed explicitly; stack entries are released
    /// by frame pop.
    on_stack: bool,
}

/// Original-base -> shadow region table with a frame stack for the
/// push/pop discipline around functions holding secret stack slots.
#[derive(Default)]
pub struct ShadowMap {
    entries: BTreeMap<u64, ShadowEntry>,
    frames: Vec<Vec<u64>>,
}

impl ShadowMap {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.frames.len()
    }

    /// Layout for the allocation containing `addr` (untagged). Interior
    /// addresses resolve via ordered-range search.
    pub fn lookup(&self, addr: u64) -> Option<SegmentLayout> {
        let (&base, e) = self.entries.range(..=addr).next_back()?;
        let layout = SegmentLayout {
            original_base: base,
            shadow_base: e.shadow_base,
            logical_size: e.logical_size,
        };
        (addr < base + layout.capacity()).then_some(layout)
    }

    pub fn contains_base(&self, base: u64) -> bool {
        self.entries.contains_key(&base)
    }
}

/// Counters the benchmarks and the acceptance suite read.
#[derive(Debug, Default, Clone, serde::Serialize)]
pub struct RuntimeStats {
    /// Work performed inside runtime intrinsics, in abstract cost units.
    pub ticks: u64,
    /// Sum of requested secret allocation sizes.
    pub secret_logical_bytes: u64,
    /// Sum of bytes actually mapped for secret allocations (both regions).
    pub secret_physical_bytes: u64,
    pub split_stores: u64,
    pub split_loads: u64,
}

/// Runtime instance: one per executing memory image.
pub struct Runtime {
    pub prefix: u32,
    shadow: ShadowMap,
    pub stats: RuntimeStats,
}

impl Runtime {
    pub fn new(prefix: u32) -> Self {
        Runtime {
            prefix,
            shadow: ShadowMap { entries: BTreeMap::new(), frames: Vec::new() },
            stats: RuntimeStats::default(),
        }
    }

    pub fn shadow_map(&self) -> &ShadowMap {
        &self.shadow
    }

    fn tick(&mut self, n: u64) {
        self.stats.ticks += n;
    }

    /// Write the prefix into the high half of every slot of both regions.
    fn prefix_init(&mut self, mem: &mut MemoryImage, layout: SegmentLayout) {
        let p = self.prefix.to_le_bytes();
        for slot in 0..layout.slots_per_region() {
            for base in [layout.original_base, layout.shadow_base] {
                for (i, &b) in p.iter().enumerate() {
                    mem.write_byte(base + slot * 8 + 4 + i as u64, b, false);
                }
            }
        }
        self.tick(2 * layout.slots_per_region());
    }

    fn register(
        &mut self,
        mem: &mut MemoryImage,
        original_base: u64,
        logical_size: u64,
        on_stack: bool,
        base_frame: bool,
    ) -> Result<u64, RuntimeError> {
        let cap = ceil_to_8(logical_size);
        let shadow_base = mem.alloc_shadow(cap).ok_or(RuntimeError::OutOfSimulatedMemory)?;
        let layout = SegmentLayout { original_base, shadow_base, logical_size };
        self.prefix_init(mem, layout);
        mem.designate(original_base, original_base + cap);
        self.shadow.entries.insert(
            original_base,
            ShadowEntry { shadow_base, logical_size, on_stack },
        );
        if !base_frame {
            if let Some(frame) = self.shadow.frames.last_mut() {
                frame.push(original_base);
            }
        }
        self.stats.secret_logical_bytes += logical_size;
        self.stats.secret_physical_bytes += 2 * cap;
        self.tick(3);
        Ok(set_tag(original_base))
    }

    /// Heap-side secret allocation: original region plus equal shadow,
    /// both prefix-initialized; returns the tagged address.
    pub fn secret_malloc(&mut self, mem: &mut MemoryImage, size: u64) -> Result<u64, RuntimeError> {
        if size == 0 {
            return Err(RuntimeError::ZeroSizeAllocation);
        }
        let cap = ceil_to_8(size);
        let base = mem.alloc_secret_heap(cap).ok_or(RuntimeError::OutOfSimulatedMemory)?;
        self.register(mem, base, size, false, true)
    }

    pub fn secret_free(&mut self, mem: &mut MemoryImage, addr: u64) -> Result<(), RuntimeError> {
        if !is_secret(addr) {
            return Err(RuntimeError::NotSecretAllocation(addr));
        }
        let base = clear_tag(addr);
        let Some(entry) = self.shadow.entries.get(&base).copied() else {
            // distinguish "never was" from "already freed" only by liveness
            return Err(RuntimeError::DoubleFree(addr));
        };
        if entry.on_stack {
            return Err(RuntimeError::NotSecretAllocation(addr));
        }
        self.shadow.entries.remove(&base);
        mem.unmap_range(base);
        mem.unmap_range(entry.shadow_base);
        self.tick(3);
        Ok(())
    }

    /// Register a stack slot the interpreter has already carved out.
    /// The shadow region is heap-allocated; the entry is released at
    /// frame pop.
    pub fn register_stack_secret(
        &mut self,
        mem: &mut MemoryImage,
        original_base: u64,
        size: u64,
    ) -> Result<u64, RuntimeError> {
        if size == 0 {
            return Err(RuntimeError::ZeroSizeAllocation);
        }
        self.register(mem, original_base, size, true, false)
    }

    /// Register a global region; lives for the whole program.
    pub fn register_global_secret(
        &mut self,
        mem: &mut MemoryImage,
        addr: u64,
        size: u64,
    ) -> Result<(), RuntimeError> {
        if size == 0 {
            return Err(RuntimeError::ZeroSizeAllocation);
        }
        let base = clear_tag(addr);
        if self.shadow.entries.contains_key(&base) {
            return Ok(()); // idempotent: constructor may run under re-entry
        }
        self.register(mem, base, size, false, true)?;
        Ok(())
    }

    pub fn frame_push(&mut self) {
        self.shadow.frames.push(Vec::new());
        self.tick(1);
    }

    /// Release every stack secret registered in the current frame: scrub
    /// and unmap the shadow region, scrub the original stack slot.
    pub fn frame_pop(&mut self, mem: &mut MemoryImage) -> Result<(), RuntimeError> {
        let frame = self.shadow.frames.pop().ok_or(RuntimeError::FrameUnderflow)?;
        self.tick(1 + frame.len() as u64);
        for base in frame {
            if let Some(entry) = self.shadow.entries.remove(&base) {
                let cap = ceil_to_8(entry.logical_size);
                mem.unmap_range(entry.shadow_base);
                // The stack range itself is unmapped by the interpreter on
                // return; scrub its contents and drop the designation now.
                for a in base..base + cap {
                    mem.write_byte(a, 0, false);
                }
                mem.undesignate(base);
            }
        }
        Ok(())
    }

    fn lookup(&self, addr: u64) -> Result<SegmentLayout, RuntimeError> {
        self.shadow.lookup(addr).ok_or(RuntimeError::UnregisteredAddress(addr))
    }

    /// Shadow-region address paired with original-region offset `o`,
    /// rounded down to the containing slot.
    pub fn shadow_addr(&self, base: u64, o: u64) -> Result<u64, RuntimeError> {
        let layout = self.lookup(base)?;
        let off = base + o - layout.original_base;
        Ok(layout.shadow_base + (off & !7))
    }

    /// Store `bytes` at logical offset derived from the tagged address.
    /// Only data bytes (low halves) are touched; the prefix written at
    /// allocation time stays in place, and every data byte is tainted.
    pub fn split_store(
        &mut self,
        mem: &mut MemoryImage,
        addr: u64,
        bytes: &[u8],
    ) -> Result<(), RuntimeError> {
        let a = clear_tag(addr);
        let layout = self.lookup(a)?;
        let start = a - layout.original_base;
        if start + bytes.len() as u64 > layout.capacity() {
            return Err(RuntimeError::UnregisteredAddress(addr));
        }
        for (i, &b) in bytes.iter().enumerate() {
            mem.write_byte(layout.phys_addr(start + i as u64), b, true);
        }
        let segments = (start + bytes.len() as u64).div_ceil(4) - start / 4;
        self.tick(1 + 3 * segments);
        self.stats.split_stores += 1;
        Ok(())
    }

    /// Inverse of `split_store`: reassemble `len` logical bytes.
    pub fn split_load(
        &mut self,
        mem: &mut MemoryImage,
        addr: u64,
        len: u64,
    ) -> Result<(Vec<u8>, bool), RuntimeError> {
        let a = clear_tag(addr);
        let layout = self.lookup(a)?;
        let start = a - layout.original_base;
        if start + len > layout.capacity() {
            return Err(RuntimeError::UnregisteredAddress(addr));
        }
        let mut out = Vec::with_capacity(len as usize);
        for i in 0..len {
            let (b, _) = mem.read_byte(layout.phys_addr(start + i));
            out.push(b);
        }
        let segments = (start + len).div_ceil(4) - start / 4;
        self.tick(1 + 3 * segments);
        self.stats.split_loads += 1;
        // anything read out of secret storage is secret-derived
        Ok((out, true))
    }

    /// Logical view of one byte, split-aware.
    pub fn logical_read_byte(
        &mut self,
        mem: &mut MemoryImage,
        addr: u64,
    ) -> Result<(u8, bool), RuntimeError> {
        if is_secret(addr) {
            let a = clear_tag(addr);
            let layout = self.lookup(a)?;
            let o = a - layout.original_base;
            if o >= layout.capacity() {
                return Err(RuntimeError::UnregisteredAddress(addr));
            }
            self.tick(3);
            let (b, _) = mem.read_byte(layout.phys_addr(o));
            Ok((b, true))
        } else {
            self.tick(1);
            let designated = mem.is_designated(addr);
            let (b, t) = mem.read_byte(addr);
            Ok((b, t || designated))
        }
    }

    /// Split-aware single-byte write. Plain destinations take the given
    /// taint; split destinations are always tainted.
    pub fn logical_write_byte(
        &mut self,
        mem: &mut MemoryImage,
        addr: u64,
        byte: u8,
        taint: bool,
    ) -> Result<(), RuntimeError> {
        if is_secret(addr) {
            let a = clear_tag(addr);
            let layout = self.lookup(a)?;
            let o = a - layout.original_base;
            if o >= layout.capacity() {
                return Err(RuntimeError::UnregisteredAddress(addr));
            }
            self.tick(3);
            mem.write_byte(layout.phys_addr(o), byte, true);
        } else {
            self.tick(1);
            mem.write_byte(addr, byte, taint);
        }
        Ok(())
    }

    /// Reassemble `len` logical bytes into plain form. The result carries
    /// no taint: this is the declassification boundary.
    pub fn declassify_region(
        &mut self,
        mem: &mut MemoryImage,
        addr: u64,
        len: u64,
    ) -> Result<Vec<u8>, RuntimeError> {
        let mut out = Vec::with_capacity(len as usize);
        for i in 0..len {
            let (b, _) = self.logical_read_byte(mem, wrapping_add_offset(addr, i))?;
            out.push(b);
        }
        self.tick(1);
        Ok(out)
    }

    /// Write a plain buffer back into split form at a tagged address.
    pub fn classify_region(
        &mut self,
        mem: &mut MemoryImage,
        addr: u64,
        bytes: &[u8],
    ) -> Result<(), RuntimeError> {
        for (i, &b) in bytes.iter().enumerate() {
            self.logical_write_byte(mem, wrapping_add_offset(addr, i as u64), b, true)?;
        }
        self.tick(1);
        Ok(())
    }

    /// Verify the layout invariant for the allocation containing `addr`:
    /// bytes 4..8 of every slot in both regions hold the prefix.
    pub fn slots_prefixed(&self, mem: &MemoryImage, addr: u64) -> bool {
        let Some(layout) = self.shadow.lookup(clear_tag(addr)) else {
            return false;
        };
        let want = self.prefix.to_le_bytes();
        for slot in 0..layout.slots_per_region() {
            for base in [layout.original_base, layout.shadow_base] {
                for (i, &w) in want.iter().enumerate() {
                    if mem.peek_byte(base + slot * 8 + 4 + i as u64).0 != w {
                        return false;
                    }
                }
            }
        }
        true
    }
}

fn wrapping_add_offset(addr: u64, off: u64) -> u64 {
    addr.wrapping_add(off)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (MemoryImage, Runtime) {
        (MemoryImage::new(), Runtime::new(DEFAULT_PREFIX))
    }

    #[test]
    fn tag_helpers() {
        assert!(is_secret(0x8000_0000_0001_0000));
        assert!(!is_secret(0x0000_0000_0001_0000));
        assert_eq!(clear_tag(0x8000_0000_0001_0000), 0x0000_0000_0001_0000);
        assert_eq!(set_tag(0x1_0000) >> 63, 1);
    }

    #[test]
    fn merge_extract_examples() {
        assert_eq!(merge(0xdead_ceef, 0x5566_7788), 0xdead_ceef_5566_7788);
        assert_eq!(merge(0xdead_ceef, 0), 0xdead_ceef_0000_0000);
        assert_eq!(extract(merge(0xdead_ceef, 0x1122_3344)), 0x1122_3344);
    }

    #[test]
    fn secret_malloc_doubles_mapped_bytes() {
        let (mut mem, mut rt) = setup();
        let before = mem.mapped_bytes();
        let p = rt.secret_malloc(&mut mem, 32).unwrap();
        assert!(is_secret(p));
        assert_eq!(mem.mapped_bytes() - before, 64);
        assert_eq!(rt.stats.secret_logical_bytes, 32);
        assert_eq!(rt.stats.secret_physical_bytes, 64);
    }

    #[test]
    fn small_allocation_still_gets_shadow() {
        let (mut mem, mut rt) = setup();
        let before = mem.mapped_bytes();
        rt.secret_malloc(&mut mem, 4).unwrap();
        assert_eq!(mem.mapped_bytes() - before, 16, "8 original + 8 shadow");
        assert_eq!(rt.shadow_map().len(), 1);
    }

    #[test]
    fn zero_size_allocation_is_rejected() {
        let (mut mem, mut rt) = setup();
        assert_eq!(rt.secret_malloc(&mut mem, 0), Err(RuntimeError::ZeroSizeAllocation));
    }

    #[test]
    fn free_clears_map_and_double_free_fails() {
        let (mut mem, mut rt) = setup();
        let p = rt.secret_malloc(&mut mem, 16).unwrap();
        rt.secret_free(&mut mem, p).unwrap();
        assert!(rt.shadow_map().is_empty());
        assert_eq!(rt.secret_free(&mut mem, p), Err(RuntimeError::DoubleFree(p)));
        assert_eq!(
            rt.secret_free(&mut mem, 0x1234),
            Err(RuntimeError::NotSecretAllocation(0x1234))
        );
        // freed memory is no longer accessible
        assert!(mem.check_access(clear_tag(p), 8).is_err());
    }

    #[test]
    fn store64_splits_low_and_high_halves() {
        let (mut mem, mut rt) = setup();
        let p = rt.secret_malloc(&mut mem, 8).unwrap();
        rt.split_store(&mut mem, p, &0x1122_3344_5566_7788u64.to_le_bytes()).unwrap();
        let layout = rt.shadow_map().lookup(clear_tag(p)).unwrap();
        assert_eq!(mem.peek_word(layout.original_base), 0xdead_ceef_5566_7788);
        assert_eq!(mem.peek_word(layout.shadow_base), 0xdead_ceef_1122_3344);
        // exact little-endian bytes
        let orig: Vec<u8> = (0..8).map(|i| mem.peek_byte(layout.original_base + i).0).collect();
        let shad: Vec<u8> = (0..8).map(|i| mem.peek_byte(layout.shadow_base + i).0).collect();
        assert_eq!(orig, [0x88, 0x77, 0x66, 0x55, 0xef, 0xce, 0xad, 0xde]);
        assert_eq!(shad, [0x44, 0x33, 0x22, 0x11, 0xef, 0xce, 0xad, 0xde]);
        let (bytes, tainted) = rt.split_load(&mut mem, p, 8).unwrap();
        assert_eq!(u64::from_le_bytes(bytes.try_into().unwrap()), 0x1122_3344_5566_7788);
        assert!(tainted);
    }

    #[test]
    fn store32_touches_only_original_slot() {
        let (mut mem, mut rt) = setup();
        let p = rt.secret_malloc(&mut mem, 8).unwrap();
        rt.split_store(&mut mem, p, &0u32.to_le_bytes()).unwrap();
        let layout = rt.shadow_map().lookup(clear_tag(p)).unwrap();
        assert_eq!(mem.peek_word(layout.original_base), 0xdead_ceef_0000_0000);
        assert_eq!(mem.peek_word(layout.shadow_base), 0xdead_ceef_0000_0000, "prefix only");
        let (bytes, _) = rt.split_load(&mut mem, p, 4).unwrap();
        assert_eq!(bytes, vec![0; 4]);
    }

    #[test]
    fn byte_store_at_offset_five_lands_in_shadow_slot_zero() {
        let (mut mem, mut rt) = setup();
        let p = rt.secret_malloc(&mut mem, 32).unwrap();
        let layout = rt.shadow_map().lookup(clear_tag(p)).unwrap();
        // segment s = 5/4 = 1, half = 1, slot = 0, byte offset 1
        assert_eq!(layout.phys_addr(5), layout.shadow_base + 1);
        let before: Vec<u8> = (0..8).map(|i| mem.peek_byte(layout.shadow_base + i).0).collect();
        rt.split_store(&mut mem, set_tag(clear_tag(p) + 5), &[0xab]).unwrap();
        let after: Vec<u8> = (0..8).map(|i| mem.peek_byte(layout.shadow_base + i).0).collect();
        assert_eq!(after[1], 0xab);
        for i in [0usize, 2, 3, 4, 5, 6, 7] {
            assert_eq!(after[i], before[i], "byte {i} of the slot must be preserved");
        }
    }

    #[test]
    fn shadow_addr_maps_slot_pairs() {
        let (mut mem, mut rt) = setup();
        let p = rt.secret_malloc(&mut mem, 32).unwrap();
        let base = clear_tag(p);
        let layout = rt.shadow_map().lookup(base).unwrap();
        assert_eq!(rt.shadow_addr(base, 8).unwrap(), layout.shadow_base + 8);
        assert_eq!(rt.shadow_addr(base, 13).unwrap(), layout.shadow_base + 8);
        assert_eq!(rt.shadow_addr(base, 0).unwrap(), layout.shadow_base);
        assert!(rt.shadow_addr(0x42, 0).is_err());
    }

    #[test]
    fn declassify_returns_logical_bytes() {
        let (mut mem, mut rt) = setup();
        let p = rt.secret_malloc(&mut mem, 8).unwrap();
        rt.split_store(&mut mem, p, &0x1122_3344_5566_7788u64.to_le_bytes()).unwrap();
        let bytes = rt.declassify_region(&mut mem, p, 8).unwrap();
        assert_eq!(bytes, [0x88, 0x77, 0x66, 0x55, 0x44, 0x33, 0x22, 0x11]);
    }

    #[test]
    fn declassify_fresh_region_is_zero() {
        let (mut mem, mut rt) = setup();
        let p = rt.secret_malloc(&mut mem, 16).unwrap();
        assert_eq!(rt.declassify_region(&mut mem, p, 16).unwrap(), vec![0; 16]);
    }

    #[test]
    fn classify_then_declassify_roundtrips() {
        let (mut mem, mut rt) = setup();
        let p = rt.secret_malloc(&mut mem, 64).unwrap();
        let mut rng = crate::rng::SplitMix64::new(7);
        let buf = rng.bytes(64);
        rt.classify_region(&mut mem, p, &buf).unwrap();
        assert!(rt.slots_prefixed(&mem, p));
        assert_eq!(rt.declassify_region(&mut mem, p, 64).unwrap(), buf);
    }

    #[test]
    fn prefix_holds_from_allocation_onward() {
        let (mut mem, mut rt) = setup();
        let p = rt.secret_malloc(&mut mem, 40).unwrap();
        assert!(rt.slots_prefixed(&mem, p), "uninitialized secret memory is already prefixed");
        rt.split_store(&mut mem, p, &[1, 2, 3]).unwrap();
        assert!(rt.slots_prefixed(&mem, p));
    }

    #[test]
    fn frame_pop_releases_stack_entries() {
        let (mut mem, mut rt) = setup();
        rt.frame_push();
        mem.map_range(0x40_0000, 0x40_0000 + 16, crate::mem::RangeKind::Stack);
        rt.register_stack_secret(&mut mem, 0x40_0000, 16).unwrap();
        assert_eq!(rt.shadow_map().len(), 1);
        rt.frame_pop(&mut mem).unwrap();
        assert_eq!(rt.shadow_map().len(), 0);
        assert_eq!(rt.frame_pop(&mut mem), Err(RuntimeError::FrameUnderflow));
    }
}
