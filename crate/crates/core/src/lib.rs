//! Coverage-guided fuzzing of an RV32IM pipeline.
//!
//! Stimulus flows through the modules in this order: a generator emits byte
//! tokens ([`token`]), the legality filter turns them into legal
//! instructions ([`legality`]), the address sanitizer rewrites faulting memory
//! accesses using the reference emulator ([`sanitizer`], [`emulator`]), and the
//! differential checker runs the program on the instrumented pipeline and
//! the emulator in lock step ([`diff`], [`dut`]). [`campaign`] drives
//! the loop and records coverage curves.

pub mod campaign;
pub mod dataset;
pub mod diff;
pub mod dut;
pub mod emulator;
pub mod generators;
pub mod hash;
pub mod isa;
pub mod legality;
pub mod sanitizer;
pub mod num;
pub mod token;

pub use isa::{decode_word, encode_word, Format, Instruction, Reg};
pub use num::Real;

/// Single-precision instances of the scalar-generic types.
pub type CoverageVector = dut::CoverageVectorOf<f32>;
pub type DcvPoint = campaign::DcvPoint<f32>;
pub type DcvValue = campaign::DcvValue<f32>;
