//! A secure-compilation laboratory: a safe source language and an
//! assembly-like target sharing a block memory model, a compiler between
//! them, interaction and data-flow traces, a data-flow back-translation, and
//! a harness that checks the properties behind secure compilation by
//! differential execution.

pub mod asm;
pub mod backtranslation;
pub mod compiler;
pub mod harness;
pub mod memory;
pub mod program;
pub mod relations;
pub mod source;
pub mod target;
pub mod traces;

pub use memory::{BinOp, BlockId, CompId, Memory, Perm, Pointer, Value};
pub use program::{link, split, Interface, Program};
pub use source::{Expr, Outcome, SourceProgram};
pub use target::{Instr, MachProgram, RegFile, Register};
pub use traces::{DfEvent, Event};
