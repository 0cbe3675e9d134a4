//! Mach: an assembly-like language with unstructured jumps, a fixed register
//! file, and a protected stack of cross-component return addresses.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::memory::{
    eval_binop, BinOp, CompId, Memory, Perm, Pointer, Value, STACK_BLOCK, STATIC_BLOCK,
};
use crate::program::{ProcTable, Program, MAIN_PROC};
use crate::source::Outcome;
use crate::traces::{DfEvent, Event};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Register {
    Com,
    R1,
    Aux1,
    Aux2,
    Sp,
    Ra,
    Arg,
}

impl Register {
    pub const ALL: [Register; 7] = [
        Register::Com,
        Register::R1,
        Register::Aux1,
        Register::Aux2,
        Register::Sp,
        Register::Ra,
        Register::Arg,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Register::Com => "COM",
            Register::R1 => "R1",
            Register::Aux1 => "AUX1",
            Register::Aux2 => "AUX2",
            Register::Sp => "SP",
            Register::Ra => "RA",
            Register::Arg => "ARG",
        }
    }

    pub fn parse(s: &str) -> Option<Register> {
        Register::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The seven machine registers, indexed by [`Register::index`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegFile(pub [Value; 7]);

impl RegFile {
    /// Every register but COM holds error.
    pub fn invalid(com: Value) -> RegFile {
        let mut r = RegFile([Value::Error; 7]);
        r.0[Register::Com.index()] = com;
        r
    }

    pub fn initial() -> RegFile {
        RegFile::invalid(Value::Int(0))
    }

    pub fn get(&self, r: Register) -> Value {
        self.0[r.index()]
    }

    pub fn set(&mut self, r: Register, v: Value) {
        self.0[r.index()] = v;
    }

    pub fn invalidate(&self) -> RegFile {
        RegFile::invalid(self.get(Register::Com))
    }
}

pub type Label = u64;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Instr {
    /// `Const v -> rd`
    Const(Value, Register),
    /// `Mov rs -> rd`
    Mov(Register, Register),
    /// `BinOp r1 op r2 -> rd`
    BinOp(BinOp, Register, Register, Register),
    Label(Label),
    PtrOfLabel(Label, Register),
    /// `Load *rp -> rd`
    Load(Register, Register),
    /// `Store *rp <- rs`
    Store(Register, Register),
    /// `Alloc rp rsize`: `rp` receives a block of `rsize` cells.
    Alloc(Register, Register),
    Bnz(Register, Label),
    Jump(Register),
    JumpFunPtr(Register),
    Jal(Label),
    Call(CompId, String),
    Return,
    Nop,
    Halt,
}

pub type MachProgram = Program<Vec<Instr>>;

/// Layout of the reserved runtime block of compiled components.
pub mod stack_layout {
    /// Saved stack pointer while another component runs.
    pub const SAVED_SP: i64 = 0;
    /// Set by a function-pointer call so that the callee skips its entry stub.
    pub const FP_FLAG: i64 = 1;
    /// First cell of the expression stack.
    pub const BASE: i64 = 2;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MachState {
    /// Return addresses of pending cross-component calls.
    pub stack: Vec<Pointer>,
    pub mem: Memory,
    pub reg: RegFile,
    pub pc: Pointer,
}

impl MachState {
    pub fn cur(&self) -> CompId {
        self.pc.comp
    }
}

/// The effect of one step, before any instrumentation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Fired {
    Silent,
    Const {
        v: Value,
        rd: Register,
    },
    Mov {
        rs: Register,
        rd: Register,
    },
    BinOp {
        op: BinOp,
        r1: Register,
        r2: Register,
        rd: Register,
    },
    Load {
        ra: Register,
        rd: Register,
    },
    Store {
        ra: Register,
        rs: Register,
    },
    Alloc {
        rp: Register,
        rs: Register,
    },
    Call {
        caller: CompId,
        callee: CompId,
        proc: String,
        arg: Value,
    },
    Ret {
        prev: CompId,
        next: CompId,
        val: Value,
    },
    Halt,
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[allow(clippy::large_enum_variant)]
pub enum MachStep {
    Silent,
    Event(DfEvent),
    Done(Value),
    Stuck(String),
}

/// Lists every reason the program cannot run; empty means runnable.
pub fn well_formed(p: &MachProgram) -> Vec<String> {
    well_formed_part(p, true)
}

pub fn well_formed_part(p: &MachProgram, whole: bool) -> Vec<String> {
    let mut out = p.structural_violations(whole);
    let table = ProcTable::new(p);
    for c in p.comp_ids() {
        let cname = p.intf.name(c);
        let mut defined = BTreeSet::new();
        for name in table.names(c) {
            for i in &p.procs[&(c, name.clone())] {
                if let Instr::Label(l) = i {
                    if !defined.insert(*l) {
                        out.push(format!("label {l} is defined twice in {cname}"));
                    }
                }
            }
        }
        for name in table.names(c) {
            for i in &p.procs[&(c, name.clone())] {
                match i {
                    Instr::PtrOfLabel(l, _) | Instr::Bnz(_, l) | Instr::Jal(l)
                        if !defined.contains(l) =>
                    {
                        out.push(format!("{cname}.{name} uses undefined label {l}"));
                    }
                    Instr::Const(v, _) => {
                        if let Some(reason) = bad_immediate(c, *v, &table) {
                            out.push(format!("{cname}.{name}: {reason}"));
                        }
                    }
                    Instr::Call(t, q) if *t == c || !p.intf.imports(c, *t, q) => {
                        out.push(format!(
                            "{cname}.{name} calls {}.{q}, which is not imported",
                            p.intf.name(*t)
                        ));
                    }
                    _ => {}
                }
            }
        }
    }
    out
}

/// Immediates may name the component's own code and its own static and
/// runtime blocks; everything else would be a forged pointer.
fn bad_immediate(c: CompId, v: Value, table: &ProcTable) -> Option<String> {
    match v {
        Value::Int(_) | Value::Error => None,
        Value::Ptr(p) if p.comp != c => {
            Some(format!("immediate {v} points into another component"))
        }
        Value::Ptr(p) if p.perm == Perm::Code && table.name(c, p.block).is_none() => {
            Some(format!("immediate {v} names no procedure"))
        }
        Value::Ptr(p)
            if p.perm == Perm::Data && p.block != STATIC_BLOCK && p.block != STACK_BLOCK =>
        {
            Some(format!("immediate {v} names a dynamic block"))
        }
        Value::Ptr(_) => None,
    }
}

/// A loaded Mach program with resolved code blocks and labels.
pub struct Machine<'p> {
    pub prog: &'p MachProgram,
    pub table: ProcTable,
    code: BTreeMap<CompId, Vec<&'p [Instr]>>,
    labels: HashMap<(CompId, Label), Pointer>,
}

impl<'p> Machine<'p> {
    pub fn new(prog: &'p MachProgram) -> Machine<'p> {
        let table = ProcTable::new(prog);
        let mut code: BTreeMap<CompId, Vec<&'p [Instr]>> = BTreeMap::new();
        let mut labels = HashMap::new();
        for ((c, _), body) in &prog.procs {
            let blocks = code.entry(*c).or_default();
            let id = blocks.len() as i64;
            for (i, instr) in body.iter().enumerate() {
                if let Instr::Label(l) = instr {
                    labels
                        .entry((*c, *l))
                        .or_insert(Pointer::code(*c, id, i as i64 + 1));
                }
            }
            blocks.push(body.as_slice());
        }
        Machine {
            prog,
            table,
            code,
            labels,
        }
    }

    pub fn fetch(&self, pc: Pointer) -> Result<&'p Instr, String> {
        if pc.perm != Perm::Code {
            return Err(format!("pc {pc} is not a code pointer"));
        }
        let body = usize::try_from(pc.block)
            .ok()
            .and_then(|b| self.code.get(&pc.comp)?.get(b).copied())
            .ok_or_else(|| format!("pc {pc} names no procedure"))?;
        usize::try_from(pc.offset)
            .ok()
            .and_then(|o| body.get(o))
            .ok_or_else(|| format!("pc {pc} is outside its procedure"))
    }

    /// Pointer to the instruction following `Label l` in the code of `comp`.
    pub fn find_label(&self, comp: CompId, l: Label) -> Option<Pointer> {
        self.labels.get(&(comp, l)).copied()
    }

    pub fn entry(&self, comp: CompId, proc: &str) -> Option<Pointer> {
        self.table
            .id(comp, proc)
            .map(|id| Pointer::code(comp, id, 0))
    }

    pub fn initial_memory(&self) -> Memory {
        let mut mem = Memory::new();
        for c in self.prog.comp_ids() {
            mem.add_component(c, self.prog.buffers.get(&c).cloned().unwrap_or_default());
            if let Some(&size) = self.prog.stacks.get(&c) {
                mem.install_block(c, STACK_BLOCK, initial_stack(c, size).into_iter().collect());
            }
        }
        mem
    }

    pub fn initial_state(&self) -> Result<MachState, String> {
        let main = self
            .prog
            .intf
            .main_comp()
            .ok_or("the program has no unique main component")?;
        let pc = self.entry(main, MAIN_PROC).ok_or("main has no body")?;
        Ok(MachState {
            stack: Vec::new(),
            mem: self.initial_memory(),
            reg: RegFile::initial(),
            pc,
        })
    }

    /// Next instruction, if the pc designates one.
    pub fn peek(&self, s: &MachState) -> Option<&'p Instr> {
        self.fetch(s.pc).ok()
    }

    /// One uninstrumented step. `Err` means no rule applies.
    pub fn step_core(&self, s: &mut MachState) -> Result<Fired, String> {
        let instr = self.fetch(s.pc)?;
        let cur = s.pc.comp;
        let next = s.pc.with_offset(s.pc.offset + 1);
        let fired = match instr {
            Instr::Nop | Instr::Label(_) => {
                s.pc = next;
                Fired::Silent
            }
            Instr::Const(v, rd) => {
                s.reg.set(*rd, *v);
                s.pc = next;
                Fired::Const { v: *v, rd: *rd }
            }
            Instr::Mov(rs, rd) => {
                s.reg.set(*rd, s.reg.get(*rs));
                s.pc = next;
                Fired::Mov { rs: *rs, rd: *rd }
            }
            Instr::BinOp(op, r1, r2, rd) => {
                let (a, b) = (s.reg.get(*r1), s.reg.get(*r2));
                let v = eval_binop(*op, a, b)
                    .ok_or_else(|| format!("{} is undefined on {a} and {b}", op.as_str()))?;
                s.reg.set(*rd, v);
                s.pc = next;
                Fired::BinOp {
                    op: *op,
                    r1: *r1,
                    r2: *r2,
                    rd: *rd,
                }
            }
            Instr::PtrOfLabel(l, rd) => {
                let v = Value::Ptr(
                    self.find_label(cur, *l)
                        .ok_or_else(|| format!("unknown label {l}"))?,
                );
                s.reg.set(*rd, v);
                s.pc = next;
                Fired::Const { v, rd: *rd }
            }
            Instr::Load(ra, rd) => {
                let Value::Ptr(p) = s.reg.get(*ra) else {
                    return Err(format!("cannot load through {}", s.reg.get(*ra)));
                };
                let v = s.mem.load(p).map_err(|e| e.to_string())?;
                s.reg.set(*rd, v);
                s.pc = next;
                Fired::Load { ra: *ra, rd: *rd }
            }
            Instr::Store(ra, rs) => {
                let Value::Ptr(p) = s.reg.get(*ra) else {
                    return Err(format!("cannot store through {}", s.reg.get(*ra)));
                };
                s.mem.store(p, s.reg.get(*rs)).map_err(|e| e.to_string())?;
                s.pc = next;
                Fired::Store { ra: *ra, rs: *rs }
            }
            Instr::Alloc(rp, rs) => {
                let Value::Int(n) = s.reg.get(*rs) else {
                    return Err(format!(
                        "allocation size {} is not an integer",
                        s.reg.get(*rs)
                    ));
                };
                let p = s.mem.alloc(cur, n).map_err(|e| e.to_string())?;
                s.reg.set(*rp, Value::Ptr(p));
                s.pc = next;
                Fired::Alloc { rp: *rp, rs: *rs }
            }
            Instr::Bnz(r, l) => match s.reg.get(*r) {
                Value::Int(0) => {
                    s.pc = next;
                    Fired::Silent
                }
                Value::Int(_) => {
                    s.pc = self
                        .find_label(cur, *l)
                        .ok_or_else(|| format!("unknown label {l}"))?;
                    Fired::Silent
                }
                v => return Err(format!("branch condition {v} is not an integer")),
            },
            Instr::Jump(r) => match s.reg.get(*r) {
                Value::Ptr(p) if p.perm == Perm::Code && p.comp == cur => {
                    s.pc = p;
                    Fired::Silent
                }
                v => return Err(format!("cannot jump to {v} from component {cur}")),
            },
            Instr::JumpFunPtr(r) => match s.reg.get(*r) {
                Value::Ptr(p) if p.perm == Perm::Code && p.comp == cur && p.offset == 0 => {
                    s.pc = p;
                    Fired::Silent
                }
                v => return Err(format!("{v} is not a function pointer of component {cur}")),
            },
            Instr::Jal(l) => {
                let target = self
                    .find_label(cur, *l)
                    .ok_or_else(|| format!("unknown label {l}"))?;
                let v = Value::Ptr(next);
                s.reg.set(Register::Ra, v);
                s.pc = target;
                Fired::Const {
                    v,
                    rd: Register::Ra,
                }
            }
            Instr::Call(c, p) => {
                if !self.prog.intf.call_allowed(cur, *c, p) {
                    return Err(format!("component {cur} may not call {c}.{p}"));
                }
                let target = self
                    .entry(*c, p)
                    .ok_or_else(|| format!("no procedure {p} in component {c}"))?;
                let arg = s.reg.get(Register::Com);
                s.stack.push(next);
                s.reg = s.reg.invalidate();
                s.pc = target;
                Fired::Call {
                    caller: cur,
                    callee: *c,
                    proc: p.clone(),
                    arg,
                }
            }
            Instr::Return => {
                let ret = *s.stack.last().ok_or("return with an empty call stack")?;
                if ret.comp == cur {
                    return Err(format!("return into the executing component {cur}"));
                }
                s.stack.pop();
                s.reg = s.reg.invalidate();
                s.pc = ret;
                Fired::Ret {
                    prev: cur,
                    next: ret.comp,
                    val: s.reg.get(Register::Com),
                }
            }
            Instr::Halt => Fired::Halt,
        };
        Ok(fired)
    }

    /// One step with data-flow instrumentation.
    pub fn step(&self, s: &mut MachState) -> MachStep {
        let cur = s.cur();
        match self.step_core(s) {
            Err(e) => MachStep::Stuck(e),
            Ok(Fired::Silent) => MachStep::Silent,
            Ok(Fired::Halt) => MachStep::Done(s.reg.get(Register::Com)),
            Ok(f) => MachStep::Event(df_event(cur, f, s)),
        }
    }

    pub fn run(&self, fuel: u64) -> (Vec<DfEvent>, Outcome) {
        match self.initial_state() {
            Ok(mut s) => self.run_from(&mut s, fuel),
            Err(e) => (Vec::new(), Outcome::Stuck(e)),
        }
    }

    pub fn run_from(&self, s: &mut MachState, fuel: u64) -> (Vec<DfEvent>, Outcome) {
        let mut trace = Vec::new();
        for _ in 0..fuel {
            match self.step(s) {
                MachStep::Silent => {}
                MachStep::Event(e) => trace.push(e),
                MachStep::Done(v) => return (trace, Outcome::Done(v)),
                MachStep::Stuck(r) => return (trace, Outcome::Stuck(r)),
            }
        }
        (trace, Outcome::OutOfFuel)
    }

    /// Runs recording only border events, straight from the call and return
    /// rules, without building data-flow events.
    pub fn run_interaction(&self, fuel: u64) -> (Vec<Event>, Outcome) {
        let mut s = match self.initial_state() {
            Ok(s) => s,
            Err(e) => return (Vec::new(), Outcome::Stuck(e)),
        };
        let mut trace = Vec::new();
        for _ in 0..fuel {
            match self.step_core(&mut s) {
                Err(e) => return (trace, Outcome::Stuck(e)),
                Ok(Fired::Halt) => return (trace, Outcome::Done(s.reg.get(Register::Com))),
                Ok(Fired::Call {
                    caller,
                    callee,
                    proc,
                    arg,
                }) => trace.push(Event::Call {
                    mem: s.mem.clone(),
                    caller,
                    callee,
                    proc,
                    arg,
                }),
                Ok(Fired::Ret { prev, next, val }) => trace.push(Event::Ret {
                    mem: s.mem.clone(),
                    prev,
                    next,
                    val,
                }),
                Ok(_) => {}
            }
        }
        (trace, Outcome::OutOfFuel)
    }
}

/// Builds the data-flow event of a fired step from the post-step state.
pub fn df_event(cur: CompId, f: Fired, s: &MachState) -> DfEvent {
    let mem = s.mem.clone();
    let reg = s.reg.clone();
    match f {
        Fired::Const { v, rd } => DfEvent::Const {
            mem,
            reg,
            cur,
            v,
            r_dest: rd,
        },
        Fired::Mov { rs, rd } => DfEvent::Mov {
            mem,
            reg,
            cur,
            r_src: rs,
            r_dest: rd,
        },
        Fired::BinOp { op, r1, r2, rd } => DfEvent::BinOp {
            mem,
            reg,
            cur,
            op,
            r1,
            r2,
            r_dest: rd,
        },
        Fired::Load { ra, rd } => DfEvent::Load {
            mem,
            reg,
            cur,
            r_addr: ra,
            r_dest: rd,
        },
        Fired::Store { ra, rs } => DfEvent::Store {
            mem,
            reg,
            cur,
            r_addr: ra,
            r_src: rs,
        },
        Fired::Alloc { rp, rs } => DfEvent::Alloc {
            mem,
            reg,
            cur,
            r_ptr: rp,
            r_size: rs,
        },
        Fired::Call {
            caller,
            callee,
            proc,
            arg,
        } => DfEvent::DfCall {
            mem,
            reg,
            caller,
            callee,
            proc,
            arg,
        },
        Fired::Ret { prev, next, val } => DfEvent::DfRet {
            mem,
            reg,
            prev,
            next,
            val,
        },
        Fired::Silent | Fired::Halt => unreachable!("silent steps have no event"),
    }
}

/// Initial contents of a compiled component's runtime block.
pub fn initial_stack(c: CompId, size: usize) -> Vec<Value> {
    let mut cells = vec![Value::Error; size.max(stack_layout::BASE as usize)];
    cells[stack_layout::SAVED_SP as usize] =
        Value::Ptr(Pointer::data(c, STACK_BLOCK, stack_layout::BASE));
    cells[stack_layout::FP_FLAG as usize] = Value::Int(0);
    cells
}

/// Runs a whole Mach program.
pub fn run(p: &MachProgram, fuel: u64) -> (Vec<DfEvent>, Outcome) {
    Machine::new(p).run(fuel)
}
