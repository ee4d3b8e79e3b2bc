//! A deterministic simulator for a small 32-bit guest ISA that mirrors every
//! register and memory byte in a shadow state of shared type objects, and
//! runs pluggable checkers over the resulting event stream.
//!
//! The layers, bottom up:
//!
//! - [`isa`]: instruction encoding, program images, the assembler.
//! - [`machine`]: the interpreter, guest threads, syscalls, schedulers.
//! - [`shadow`]: type objects and the propagation rules.
//! - [`checkers`]: the checker plugin trait, the four shipped checkers and
//!   the name-keyed registry.
//! - [`session`]: glue that drives a machine with shadow and checkers attached.
//! - [`report`]: warning reports, expectation manifests, the program corpus.

pub mod checkers;
pub mod isa;
pub mod machine;
pub mod report;
pub mod session;
pub mod shadow;

/// Size of guest physical memory in bytes.
pub const MEMORY_SIZE: usize = 0x1_0000;
