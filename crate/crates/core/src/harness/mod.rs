//! Generators, differential checks, the recomposition monitor and the
//! end-to-end pipeline.

pub mod checks;
pub mod examples;
pub mod gen;
pub mod pipeline;
pub mod recomp;
pub mod runner;

pub use checks::{check_backtranslation, check_compiler, check_enrichment, Verdict};
pub use gen::{gen_mach_program, gen_source_program, gen_split, GenConfig, World};
pub use pipeline::{rsp_pipeline, PipelineReport};
pub use recomp::{check_recomposition, run_monitor, MonitorOptions, MonitorReport};
pub use runner::{par_map, rsp_test, with_big_stack, RspTestReport};
