//! Fixed inputs shared by the benchmarks.

use seclab::compiler::compile;
use seclab::harness::{gen_mach_program, gen_source_program, gen_split, GenConfig};
use seclab::{link, MachProgram, SourceProgram};

pub const FUEL: u64 = 10_000;

pub fn config(seed: u64) -> GenConfig {
    GenConfig {
        fuel: FUEL,
        ..GenConfig::default()
    }
    .with_seed(seed)
}

pub fn mach_programs(n: u64) -> Vec<MachProgram> {
    (0..n).map(|s| gen_mach_program(&config(s))).collect()
}

pub fn source_programs(n: u64) -> Vec<SourceProgram> {
    (0..n).map(|s| gen_source_program(&config(s))).collect()
}

/// Source parts with their target contexts.
pub fn splits(n: u64) -> Vec<(SourceProgram, MachProgram)> {
    (0..n)
        .map(|s| gen_split(&config(s)))
        .map(|(_, ps, ct)| (ps, ct))
        .collect()
}

/// Whole target programs made of a context and a compiled part.
pub fn linked(n: u64) -> Vec<MachProgram> {
    splits(n)
        .iter()
        .map(|(ps, ct)| link(ct, &compile(ps)).expect("generated parts link"))
        .collect()
}
