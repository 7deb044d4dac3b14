//! Memory-layout hardening toolchain against content-inspecting prefetchers.
//!
//! Secrets stored as plain 64-bit words can be mistaken for pointers by a
//! data memory-dependent prefetcher and leaked through the cache without the
//! program ever dereferencing them. This crate splits every secret into
//! 32-bit fragments and stores each fragment in the low half of an 8-byte
//! slot whose high half holds a fixed non-canonical prefix, so no word of
//! memory containing secret bits can ever survive address translation.
//!
//! The pipeline is organized as:
//!
//! * [`ir`] — a small SSA-style text IR: parser, validator, printer.
//! * [`transform`] — the hardening pass that rewrites loads, stores,
//!   allocations, and libc-style intrinsics.
//! * [`runtime`] — execution-time support: address tags, shadow
//!   allocations, segment merge/extract, classify/declassify.
//! * [`vm`] — a deterministic interpreter over a sparse tagged 48-bit
//!   address space with per-byte secret taint.
//! * [`dmp`] — the prefetcher oracle: page-walk model, candidate checks,
//!   whole-memory scans, and the store-coverage audit.

pub mod corpus;
pub mod dmp;
pub mod ir;
pub mod mem;
pub mod rng;
pub mod runtime;
pub mod transform;
pub mod vm;
