//! Data-flow back-translation: from a Mach data-flow trace to a SafeP
//! program whose components replay, event by event, the data flows each
//! component was responsible for.
//!
//! Every component's static block holds metadata: an event counter, the
//! external-call flag, one slot per machine register, and (beyond the fixed
//! part) an initialization flag, a pointer to the mirror of the target's
//! static block, and a mirror of the target's runtime block. Target block
//! `b >= 0` corresponds to source block `b + 1`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

use crate::memory::{BinOp, CompId, Memory, Perm, Pointer, Value, STACK_BLOCK, STATIC_BLOCK};
use crate::program::{ProcTable, Program};
use crate::source::build::*;
use crate::source::{Expr, Focus, SourceProgram, SourceState};
use crate::target::{initial_stack, MachProgram, RegFile, Register};
use crate::traces::DfEvent;

/// Offsets of the metadata cells in each component's static block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetadataLayout {
    pub counter_off: i64,
    pub extcall_off: i64,
    /// Offset of the slot for register index 0; the others follow.
    pub reg_base: i64,
    /// Size of the fixed part.
    pub buffer_size: i64,
    pub init_off: i64,
    pub static_mirror_off: i64,
    pub stack_mirror_off: i64,
}

pub const LAYOUT: MetadataLayout = MetadataLayout {
    counter_off: 0,
    extcall_off: 1,
    reg_base: 2,
    buffer_size: 9,
    init_off: 9,
    static_mirror_off: 10,
    stack_mirror_off: 11,
};

impl MetadataLayout {
    pub fn reg_off(&self, r: Register) -> i64 {
        self.reg_base + r.index() as i64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BacktransError {
    #[error("event {index}: constant {value} cannot be rebuilt from an immediate or a register")]
    UnknownConstant { index: usize, value: Value },
    #[error("event {index} belongs to component {comp}, which the program does not declare")]
    UnknownComponent { index: usize, comp: CompId },
    #[error("event {index}: code pointer {value} names no procedure")]
    UnknownProcedure { index: usize, value: Value },
    #[error("component {0} has no procedures")]
    NoProcedures(CompId),
}

/// A back-translated program and the dispatch expression of each component,
/// which the source run reaches exactly once per mimicked event.
pub struct BackTranslation {
    pub program: SourceProgram,
    pub dispatch: BTreeMap<CompId, Arc<Expr>>,
}

fn loc(r: Register) -> Arc<Expr> {
    local_at(LAYOUT.reg_off(r))
}

fn read(r: Register) -> Arc<Expr> {
    deref(loc(r))
}

fn set_reg(r: Register, e: Arc<Expr>) -> Arc<Expr> {
    assign(loc(r), e)
}

fn invalidate_metadata() -> Arc<Expr> {
    seq_all(
        Register::ALL[1..]
            .iter()
            .map(|r| set_reg(*r, val(Value::Error))),
    )
}

fn set_extcall(v: i64) -> Arc<Expr> {
    assign(local_at(LAYOUT.extcall_off), int(v))
}

fn offset(base: Arc<Expr>, k: i64) -> Arc<Expr> {
    if k == 0 {
        base
    } else {
        add(base, int(k))
    }
}

fn mirror_of_stack(k: i64) -> Arc<Expr> {
    local_at(LAYOUT.stack_mirror_off + k)
}

/// Rebuilds the value of a Const event.
fn expr_of_constval(
    index: usize,
    c: CompId,
    v: Value,
    prev_reg: Option<&RegFile>,
    table: &ProcTable,
) -> Result<Arc<Expr>, BacktransError> {
    Ok(match v {
        Value::Int(_) | Value::Error => val(v),
        Value::Ptr(p) if p.perm == Perm::Code => {
            let name = table
                .name(p.comp, p.block)
                .ok_or(BacktransError::UnknownProcedure { index, value: v })?;
            if p.comp != c {
                return Err(BacktransError::UnknownConstant { index, value: v });
            }
            offset(funptr(name), p.offset)
        }
        Value::Ptr(p) if p.comp == c && p.block == STATIC_BLOCK => {
            offset(deref(local_at(LAYOUT.static_mirror_off)), p.offset)
        }
        Value::Ptr(p) if p.comp == c && p.block == STACK_BLOCK => mirror_of_stack(p.offset),
        Value::Ptr(_) => {
            let r = prev_reg
                .and_then(|reg| Register::ALL.into_iter().find(|r| reg.get(*r) == v))
                .ok_or(BacktransError::UnknownConstant { index, value: v })?;
            read(r)
        }
    })
}

/// The source fragment replaying one event, without the trailing tail call.
pub fn expr_of_event(
    index: usize,
    e: &DfEvent,
    prev_reg: Option<&RegFile>,
    table: &ProcTable,
) -> Result<Arc<Expr>, BacktransError> {
    Ok(match e {
        DfEvent::Mov { r_src, r_dest, .. } => set_reg(*r_dest, read(*r_src)),
        DfEvent::Const { cur, v, r_dest, .. } => {
            set_reg(*r_dest, expr_of_constval(index, *cur, *v, prev_reg, table)?)
        }
        DfEvent::BinOp {
            op, r1, r2, r_dest, ..
        } => set_reg(*r_dest, binop(*op, read(*r1), read(*r2))),
        DfEvent::Load { r_addr, r_dest, .. } => set_reg(*r_dest, deref(read(*r_addr))),
        DfEvent::Store { r_addr, r_src, .. } => assign(read(*r_addr), read(*r_src)),
        DfEvent::Alloc { r_ptr, r_size, .. } => set_reg(*r_ptr, alloc(read(*r_size))),
        DfEvent::DfCall { callee, proc, .. } => seq_all([
            set_extcall(1),
            set_reg(Register::Com, call(*callee, proc, read(Register::Com))),
            invalidate_metadata(),
            set_extcall(0),
        ]),
        DfEvent::DfRet { .. } => seq(set_extcall(1), read(Register::Com)),
    })
}

/// Decision tree over the counter value selecting the row to replay.
fn dispatch_tree(rows: &[(i64, Arc<Expr>)]) -> Arc<Expr> {
    let counter = || deref(local_at(LAYOUT.counter_off));
    match rows {
        [] => exit(),
        [(k, row)] => if_(eq(counter(), int(*k)), row.clone(), exit()),
        _ => {
            let mid = rows.len() / 2;
            let (lo, hi) = rows.split_at(mid);
            if_(
                binop(BinOp::Le, counter(), int(lo[lo.len() - 1].0)),
                dispatch_tree(lo),
                dispatch_tree(hi),
            )
        }
    }
}

/// First-entry initialization: the static mirror and the runtime-block mirror.
fn prelude(c: CompId, target: &MachProgram) -> Arc<Expr> {
    let buf = target.buffers.get(&c).cloned().unwrap_or_default();
    let mirror = || deref(local_at(LAYOUT.static_mirror_off));
    let mut items = vec![
        assign(local_at(LAYOUT.init_off), int(1)),
        assign(
            local_at(LAYOUT.static_mirror_off),
            alloc(int(buf.len().max(1) as i64)),
        ),
    ];
    for (i, v) in buf.iter().enumerate() {
        if !matches!(v, Value::Error) {
            items.push(assign(offset(mirror(), i as i64), val(*v)));
        }
    }
    if let Some(&size) = target.stacks.get(&c) {
        for (k, v) in initial_stack(c, size).into_iter().enumerate() {
            let rhs = match v {
                Value::Error => continue,
                Value::Ptr(p) => mirror_of_stack(p.offset),
                v => val(v),
            };
            items.push(assign(mirror_of_stack(k as i64), rhs));
        }
    }
    seq_all(items)
}

fn metadata_buffer(c: CompId, target: &MachProgram) -> Vec<Value> {
    let stack = target
        .stacks
        .get(&c)
        .map(|&n| initial_stack(c, n).len())
        .unwrap_or(0);
    let mut cells = vec![Value::Error; LAYOUT.stack_mirror_off as usize + stack];
    cells[LAYOUT.counter_off as usize] = Value::Int(0);
    cells[LAYOUT.extcall_off as usize] = Value::Int(1);
    cells[LAYOUT.init_off as usize] = Value::Int(0);
    cells
}

/// Builds the program replaying `trace`. The target program supplies the
/// interface, the procedure names and the initial memory layout.
pub fn backtranslate(
    trace: &[DfEvent],
    target: &MachProgram,
) -> Result<BackTranslation, BacktransError> {
    let table = ProcTable::new(target);
    let comps = target.comp_ids();
    let mut rows: BTreeMap<CompId, Vec<(i64, Arc<Expr>)>> = BTreeMap::new();
    for (i, e) in trace.iter().enumerate() {
        let c = e.owner();
        if !comps.contains(&c) {
            return Err(BacktransError::UnknownComponent { index: i, comp: c });
        }
        let prev = i.checked_sub(1).map(|j| trace[j].reg());
        let fragment = expr_of_event(i, e, prev, &table)?;
        let list = rows.entry(c).or_default();
        let k = list.len() as i64;
        let first = table
            .names(c)
            .first()
            .ok_or(BacktransError::NoProcedures(c))?;
        let mut parts = vec![assign(local_at(LAYOUT.counter_off), int(k + 1)), fragment];
        if !matches!(e, DfEvent::DfRet { .. }) {
            parts.push(call(c, first, int(0)));
        }
        list.push((k, seq_all(parts)));
    }

    let mut program = Program {
        intf: target.intf.clone(),
        ..Program::default()
    };
    let mut dispatch = BTreeMap::new();
    for c in comps {
        let names = table.names(c);
        if names.is_empty() {
            continue;
        }
        let tree = dispatch_tree(rows.get(&c).map(Vec::as_slice).unwrap_or(&[]));
        let entry = if_(
            deref(local_at(LAYOUT.extcall_off)),
            seq_all([
                set_reg(Register::Com, arg()),
                invalidate_metadata(),
                set_extcall(0),
            ]),
            int(0),
        );
        let init = if_(deref(local_at(LAYOUT.init_off)), int(0), prelude(c, target));
        let body = seq(entry, seq(init, tree.clone()));
        for n in names {
            program.procs.insert((c, n.clone()), body.clone());
        }
        program.buffers.insert(c, metadata_buffer(c, target));
        dispatch.insert(c, tree);
    }
    Ok(BackTranslation { program, dispatch })
}

impl BackTranslation {
    /// The component whose dispatch the state is about to evaluate, if any.
    pub fn at_boundary(&self, s: &SourceState) -> Option<CompId> {
        match &s.focus {
            Focus::Expr(e) => self
                .dispatch
                .get(&s.cur)
                .filter(|d| Arc::ptr_eq(d, e))
                .map(|_| s.cur),
            Focus::Val(_) => None,
        }
    }
}

/// Correspondence between a target value and its source counterpart: data
/// blocks shift by one, and runtime-block cells live in the metadata.
pub fn value_corresponds(t: Value, s: Value) -> bool {
    match (t, s) {
        (Value::Ptr(p), Value::Ptr(q)) if p.perm == Perm::Data && p.block == STACK_BLOCK => {
            q == Pointer::data(p.comp, STATIC_BLOCK, LAYOUT.stack_mirror_off + p.offset)
        }
        (Value::Ptr(p), Value::Ptr(q)) if p.perm == Perm::Data => {
            q.perm == Perm::Data
                && q.comp == p.comp
                && q.offset == p.offset
                && q.block == p.block + 1
        }
        _ => t == s,
    }
}

/// Which part of the mimicking invariant failed at a boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MimicViolation {
    Register {
        comp: CompId,
        reg: Register,
        target: Value,
        source: Value,
    },
    Block {
        comp: CompId,
        block: i64,
        detail: String,
    },
    Counter {
        comp: CompId,
        expected: i64,
        found: Value,
    },
    Component {
        expected: CompId,
        found: CompId,
    },
}

/// Checks the state reached after replaying `trace[..n]`. `target_init` is
/// the target's initial memory, used when no event has happened yet.
pub fn check_mimicking_state(
    trace: &[DfEvent],
    n: usize,
    target_init: &Memory,
    s: &SourceState,
    main: CompId,
) -> Result<(), MimicViolation> {
    let initial_reg = RegFile::initial();
    let (reg, tmem, next) = match n.checked_sub(1).map(|i| &trace[i]) {
        Some(e) => (e.reg(), e.mem(), e.successor()),
        None => (&initial_reg, target_init, main),
    };
    if s.cur != next {
        return Err(MimicViolation::Component {
            expected: next,
            found: s.cur,
        });
    }
    let slot = |c: CompId, off: i64| {
        s.mem
            .load(Pointer::data(c, STATIC_BLOCK, off))
            .unwrap_or(Value::Error)
    };

    // (a) the register slots of the executing component
    for r in Register::ALL {
        let sv = slot(next, LAYOUT.reg_off(r));
        if !value_corresponds(reg.get(r), sv) {
            return Err(MimicViolation::Register {
                comp: next,
                reg: r,
                target: reg.get(r),
                source: sv,
            });
        }
    }

    // (c) counters
    let mut counts: BTreeMap<CompId, i64> = BTreeMap::new();
    for e in &trace[..n] {
        *counts.entry(e.owner()).or_default() += 1;
    }
    for c in s.mem.comps.keys() {
        let expected = counts.get(c).copied().unwrap_or(0);
        let found = slot(*c, LAYOUT.counter_off);
        if found != Value::Int(expected) {
            return Err(MimicViolation::Counter {
                comp: *c,
                expected,
                found,
            });
        }
    }

    // (b) memories of initialized components
    for (c, cm) in tmem.comps.iter() {
        if slot(*c, LAYOUT.init_off) != Value::Int(1) {
            continue;
        }
        let bad = |block: i64, detail: String| {
            Err(MimicViolation::Block {
                comp: *c,
                block,
                detail,
            })
        };
        let mut expected_ids: BTreeSet<i64> = BTreeSet::from([STATIC_BLOCK]);
        for (b, cells) in cm.blocks.iter() {
            if *b == STACK_BLOCK {
                let meta = s.mem.block(*c, STATIC_BLOCK);
                let mirror = |k: usize| {
                    meta.and_then(|m| m.get(LAYOUT.stack_mirror_off as usize + k))
                        .copied()
                        .unwrap_or(Value::Error)
                };
                for (k, v) in cells.iter().enumerate() {
                    let sv = mirror(k);
                    if !value_corresponds(*v, sv) {
                        return bad(*b, format!("cell {k}: {v} vs mirror {sv}"));
                    }
                }
                continue;
            }
            expected_ids.insert(b + 1);
            let Some(src) = s.mem.block(*c, b + 1) else {
                return bad(*b, "no source counterpart".into());
            };
            let size_ok = if *b == STATIC_BLOCK {
                src.len() == cells.len().max(1)
            } else {
                src.len() == cells.len()
            };
            if !size_ok {
                return bad(*b, format!("sizes {} vs {}", cells.len(), src.len()));
            }
            for (k, (v, sv)) in cells.iter().zip(src.iter()).enumerate() {
                if !value_corresponds(*v, *sv) {
                    return bad(*b, format!("cell {k}: {v} vs {sv}"));
                }
            }
        }
        let source_ids: BTreeSet<i64> = s
            .mem
            .comps
            .get(c)
            .map(|m| m.blocks.keys().copied().collect())
            .unwrap_or_default();
        if source_ids != expected_ids {
            return bad(
                STATIC_BLOCK,
                format!("source blocks {source_ids:?}, expected {expected_ids:?}"),
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::MAIN_PROC;
    use crate::source;
    use crate::target::{self, Instr};
    use crate::Outcome;

    fn halt_program() -> MachProgram {
        let mut p = MachProgram::default();
        p.intf.add(0, "Main").exports.insert(MAIN_PROC.into());
        p.procs.insert((0, MAIN_PROC.into()), vec![Instr::Halt]);
        p.buffers.insert(0, vec![Value::Int(4)]);
        p
    }

    #[test]
    fn layout_offsets_are_distinct() {
        let mut offs: Vec<i64> = Register::ALL.iter().map(|r| LAYOUT.reg_off(*r)).collect();
        offs.extend([LAYOUT.counter_off, LAYOUT.extcall_off]);
        let set: BTreeSet<i64> = offs.iter().copied().collect();
        assert_eq!(set.len(), offs.len());
        assert!(offs.iter().all(|o| *o < LAYOUT.buffer_size));
        assert_eq!(LAYOUT.reg_off(Register::Com), 2);
        assert_eq!(LAYOUT.reg_off(Register::Arg), 8);
    }

    #[test]
    fn empty_trace_exits() {
        let p = halt_program();
        let bt = backtranslate(&[], &p).unwrap();
        assert!(
            source::well_formed(&bt.program).is_empty(),
            "{:?}",
            source::well_formed(&bt.program)
        );
        let (t, o) = source::run(&bt.program, 1000);
        assert!(t.is_empty());
        assert_eq!(o, Outcome::Done(Value::Int(0)));
    }

    #[test]
    fn invalidation_clears_six_slots() {
        let e = invalidate_metadata();
        let mut n = 0;
        let mut e = e.as_ref();
        loop {
            match e {
                Expr::Seq(a, b) => {
                    assert!(!matches!(&**a, Expr::Assign(l, _) if **l == *loc(Register::Com)));
                    n += 1;
                    e = b;
                }
                _ => {
                    n += 1;
                    break;
                }
            }
        }
        assert_eq!(n, 6);
    }

    #[test]
    fn mov_row_shape() {
        let ev = DfEvent::Mov {
            mem: Memory::new(),
            reg: RegFile::initial(),
            cur: 0,
            r_src: Register::R1,
            r_dest: Register::Aux1,
        };
        let t = ProcTable::default();
        let got = expr_of_event(0, &ev, None, &t).unwrap();
        assert_eq!(got, assign(local_at(4), deref(local_at(3))));
    }

    #[test]
    fn replays_single_component_run() {
        let mut p = halt_program();
        p.procs.insert(
            (0, MAIN_PROC.into()),
            vec![
                Instr::Const(Value::Int(2), Register::R1),
                Instr::Alloc(Register::Aux1, Register::R1),
                Instr::Const(Value::Ptr(Pointer::data(0, 0, 0)), Register::Aux2),
                Instr::Load(Register::Aux2, Register::Com),
                Instr::Store(Register::Aux1, Register::Com),
                Instr::Halt,
            ],
        );
        let (t, _) = target::run(&p, 100);
        let bt = backtranslate(&t, &p).unwrap();
        let interp = source::Interp::new(&bt.program);
        let mut s = interp.initial_state().unwrap();
        let init = target::Machine::new(&p).initial_memory();
        let mut seen = 0;
        loop {
            if bt.at_boundary(&s).is_some() {
                check_mimicking_state(&t, seen, &init, &s, 0).unwrap();
                seen += 1;
            }
            match interp.step(&mut s) {
                source::Step::Silent => {}
                source::Step::Done(_) => break,
                other => panic!("{other:?}"),
            }
        }
        assert_eq!(seen, t.len() + 1);
        // Target block 1 is source block 2 and holds the static cell.
        assert_eq!(s.mem.load(Pointer::data(0, 2, 0)), Ok(Value::Int(4)));
    }

    #[test]
    fn mutated_slot_is_detected() {
        let p = halt_program();
        let bt = backtranslate(&[], &p).unwrap();
        let interp = source::Interp::new(&bt.program);
        let mut s = interp.initial_state().unwrap();
        while bt.at_boundary(&s).is_none() {
            interp.step(&mut s);
        }
        let init = target::Machine::new(&p).initial_memory();
        assert!(check_mimicking_state(&[], 0, &init, &s, 0).is_ok());
        s.mem
            .store(
                Pointer::data(0, 0, LAYOUT.reg_off(Register::R1)),
                Value::Int(1),
            )
            .unwrap();
        assert!(matches!(
            check_mimicking_state(&[], 0, &init, &s, 0),
            Err(MimicViolation::Register { .. })
        ));
    }
}
