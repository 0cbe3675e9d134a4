//! Hand-written scenarios: the network-library program and the temporary
//! shared-write example showing why the memory relation must take turns.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::asm;
use crate::memory::{Pointer, Value};
use crate::program::{link, MAIN_PROC};
use crate::relations::{mem_rel_naive, mem_rel_pc, mem_rel_tt, Renaming, StateView};
use crate::source::build::*;
use crate::source::SourceProgram;
use crate::target::{MachProgram, Machine};
use crate::traces::{check_safety_nowrite, remove_df, CallFilter};

use super::pipeline::{rsp_pipeline, PipelineReport};
use super::recomp::{run_monitor_observed, MonitorOptions, MonitorReport};

pub const NET_MAIN_JSON: &str = include_str!("../../programs/net_main.src.json");
/// The source part linked with [`net_source_lib`].
pub const NET_WHOLE_JSON: &str = include_str!("../../programs/net.src.json");
pub const NET_BENIGN_ASM: &str = include_str!("../../programs/net_benign.asm");
pub const NET_STASHING_ASM: &str = include_str!("../../programs/net_stashing.asm");
pub const TEMP_WRITE_P_ASM: &str = include_str!("../../programs/temp_write_p.asm");
pub const TEMP_WRITE_C1_ASM: &str = include_str!("../../programs/temp_write_c1.asm");
pub const TEMP_WRITE_C2_ASM: &str = include_str!("../../programs/temp_write_c2.asm");

pub const MAIN: usize = 0;
pub const NET: usize = 1;
/// Offset of the balance in Main's static block; the I/O buffer starts
/// right after it.
pub const BALANCE_OFF: i64 = 7;
pub const IOBUFFER_OFF: i64 = 8;
pub const IOBUFFER_LEN: usize = 1024;

pub fn balance_loc() -> Pointer {
    Pointer::data(MAIN, 0, BALANCE_OFF)
}

pub fn receive_filter() -> CallFilter {
    CallFilter {
        main: Some(MAIN),
        lib: Some(NET),
        proc: Some("receive".into()),
    }
}

/// The source program part: sets the balance, hands the buffer to the
/// library, receives, and returns the balance.
pub fn net_main() -> SourceProgram {
    let mut p = SourceProgram::default();
    let intf = p.intf.add(MAIN, "Main");
    intf.exports.insert(MAIN_PROC.into());
    intf.imports.insert((NET, "init_network".into()));
    intf.imports.insert((NET, "receive".into()));
    p.buffers.insert(
        MAIN,
        vec![Value::Int(0); IOBUFFER_OFF as usize + IOBUFFER_LEN],
    );
    p.procs.insert(
        (MAIN, MAIN_PROC.into()),
        seq_all([
            assign(local_at(BALANCE_OFF), int(100)),
            call(NET, "init_network", local_at(IOBUFFER_OFF)),
            call(NET, "receive", int(0)),
            deref(local_at(BALANCE_OFF)),
        ]),
    );
    p
}

/// A well-behaved network library written in the source language: it
/// remembers the buffer and writes two bytes into it on each receive.
pub fn net_source_lib() -> SourceProgram {
    let mut p = SourceProgram::default();
    let intf = p.intf.add(NET, "Net");
    intf.exports.insert("init_network".into());
    intf.exports.insert("receive".into());
    p.buffers.insert(NET, vec![Value::Int(0)]);
    p.procs.insert(
        (NET, "init_network".into()),
        seq(assign(local(), arg()), int(0)),
    );
    p.procs.insert(
        (NET, "receive".into()),
        seq_all([
            assign(deref(local()), int(7)),
            assign(add(deref(local()), int(1)), int(8)),
            int(2),
        ]),
    );
    p
}

fn parse_asm(text: &str) -> MachProgram {
    asm::parse(text).expect("shipped program parses")
}

pub fn net_benign() -> MachProgram {
    parse_asm(NET_BENIGN_ASM)
}

pub fn net_stashing() -> MachProgram {
    parse_asm(NET_STASHING_ASM)
}

#[derive(Debug, Serialize)]
pub struct NetReport {
    pub pipeline: PipelineReport,
    pub nowrite_t1: bool,
    pub nowrite_t_qed: bool,
}

/// Runs the pipeline for the network program against a target context and
/// evaluates nowrite on the target trace and on the explaining source trace.
pub fn check_net(ctx: &MachProgram, fuel: u64) -> NetReport {
    let pipeline = rsp_pipeline(&net_main(), ctx, fuel);
    let holds = |name| {
        pipeline
            .traces
            .get(name)
            .is_some_and(|t| check_safety_nowrite(t, balance_loc(), &receive_filter()))
    };
    let (nowrite_t1, nowrite_t_qed) = (holds("t1"), holds("t_qed"));
    NetReport {
        pipeline,
        nowrite_t1,
        nowrite_t_qed,
    }
}

pub struct TempWrite {
    pub p1: MachProgram,
    pub c1: MachProgram,
    pub c2: MachProgram,
}

pub fn temp_write_example() -> TempWrite {
    TempWrite {
        p1: parse_asm(TEMP_WRITE_P_ASM),
        c1: parse_asm(TEMP_WRITE_C1_ASM),
        c2: parse_asm(TEMP_WRITE_C2_ASM),
    }
}

#[derive(Debug, Default, Serialize)]
pub struct NaiveReport {
    pub monitor: MonitorReport,
    /// Ticks where the naive union relation fails.
    pub naive_failures: Vec<u64>,
    /// Ticks where some base memory holds 42 in the part's shared cell.
    pub ticks_holding_42: Vec<u64>,
    /// After corrupting a private cell of the part while the context runs,
    /// the program-counter-aware relation still holds...
    pub pc_accepts_private_mutation: bool,
    /// ...and the turn-taking relation rejects it.
    pub tt_rejects_private_mutation: bool,
}

impl NaiveReport {
    /// The regression this scenario documents.
    pub fn witnesses_turn_taking(&self) -> bool {
        self.monitor.ok()
            && self.monitor.finished
            && !self.naive_failures.is_empty()
            && self
                .naive_failures
                .iter()
                .all(|t| self.ticks_holding_42.contains(t))
            && self.pc_accepts_private_mutation
            && self.tt_rejects_private_mutation
    }
}

/// Monitors the recomposition of P1 with C2 against P1 ∪ C1 and P1 ∪ C2.
pub fn check_naive_relation_fails(ex: &TempWrite) -> Result<NaiveReport, String> {
    let w1 = link(&ex.p1, &ex.c1).map_err(|e| e.to_string())?;
    let w2 = link(&ex.p1, &ex.c2).map_err(|e| e.to_string())?;
    let (t1, _) = Machine::new(&w1).run(1000);
    let (t2, _) = Machine::new(&w2).run(1000);
    if crate::relations::trace_mismatch(&Renaming::Identity, &remove_df(&t1), &remove_df(&t2))
        .is_some()
    {
        return Err("the base traces are not related".into());
    }
    let part: BTreeSet<usize> = ex.p1.comp_ids();
    let opts = MonitorOptions {
        max_ticks: 10_000,
        check_naive: true,
    };
    let mut rep = NaiveReport::default();
    let shared_cell = |m: &crate::Memory| {
        let p = m.load(Pointer::data(0, 0, 1)).ok().and_then(|v| v.as_ptr());
        p.and_then(|p| m.load(p).ok())
    };
    let monitor = run_monitor_observed(
        &w1,
        &w2,
        &w2,
        &part,
        Renaming::Identity,
        Renaming::Identity,
        &opts,
        &mut |tick, params, s12, s1, s2| {
            if [s1.mem, s2.mem, s12.mem]
                .iter()
                .any(|m| shared_cell(m) == Some(Value::Int(42)))
            {
                rep.ticks_holding_42.push(tick);
            }
            if !params.in_part(s12) && !rep.pc_accepts_private_mutation && s12.depth == 1 {
                // Corrupt the private block of the part in the recomposed state.
                let priv_ptr = s12
                    .mem
                    .load(Pointer::data(0, 0, 0))
                    .ok()
                    .and_then(|v| v.as_ptr());
                if let Some(p) = priv_ptr {
                    let bad = s12
                        .mem
                        .stored(p, Value::Int(-1))
                        .expect("private block exists");
                    let v = StateView { mem: &bad, ..*s12 };
                    rep.pc_accepts_private_mutation = mem_rel_pc(params, &v, s1, s2);
                    rep.tt_rejects_private_mutation = !mem_rel_tt(params, &v, s1, s2);
                    debug_assert!(!mem_rel_naive(params, &v, s1, s2));
                }
            }
        },
    )?;
    rep.naive_failures = monitor.naive_failures.clone();
    rep.monitor = monitor;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_json_matches_builder() {
        assert_eq!(
            SourceProgram::from_json_str(NET_MAIN_JSON).unwrap(),
            net_main()
        );
    }

    #[test]
    fn shipped_programs_parse() {
        let ex = temp_write_example();
        assert!(link(&ex.p1, &ex.c1).is_ok());
        assert!(crate::compiler::compile(&net_main()).procs.len() == 1);
        assert_eq!(net_stashing().intf.comps[&NET].exports.len(), 2);
    }

    #[test]
    fn shipped_whole_program_matches_builders() {
        let whole = link(&net_source_lib(), &net_main()).unwrap();
        assert_eq!(SourceProgram::from_json_str(NET_WHOLE_JSON).unwrap(), whole);
    }

    #[test]
    fn source_net_library_is_benign() {
        let whole = link(&net_source_lib(), &net_main()).unwrap();
        assert!(crate::source::well_formed(&whole).is_empty());
        let (t, o) = crate::source::run(&whole, 10_000);
        assert_eq!(o, crate::Outcome::Done(Value::Int(100)));
        assert_eq!(t.len(), 4);
        assert!(check_safety_nowrite(&t, balance_loc(), &receive_filter()));
    }
}
