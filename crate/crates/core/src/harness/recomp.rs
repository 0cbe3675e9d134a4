//! Lockstep execution of two base runs and their recomposition.
//!
//! The recomposed run takes the program part from run 1 and the context from
//! run 2. While it executes on one side it moves in lockstep with the base
//! run that owns that side; the other base run is stepped alongside until it
//! also reaches a border instruction. At a border all three step together.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::memory::{CompId, Memory, Value};
use crate::program::link;
use crate::relations::{
    find_shift, mem_rel_border, mem_rel_naive, mem_rel_tt, rel_symmetry_check, state_rel_border,
    valren, RelParams, Renaming, StateView,
};
use crate::target::{Instr, MachProgram, MachState, MachStep, Machine, Register};
use crate::traces::{match_events, DfEvent, Event, SharedTracker};

use super::checks::{compare_runs, Verdict, COMPILED_FUEL_FACTOR};

#[derive(Clone, Debug)]
pub struct MonitorOptions {
    pub max_ticks: u64,
    /// Also evaluate the naive union relation and count where it fails.
    pub check_naive: bool,
}

impl Default for MonitorOptions {
    fn default() -> Self {
        MonitorOptions {
            max_ticks: 1_000_000,
            check_naive: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub tick: u64,
    pub borders: usize,
    pub what: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct MonitorReport {
    pub ticks: u64,
    pub borders: usize,
    /// States at which the two-sided relation was checked.
    pub checked_states: u64,
    pub violations: Vec<Violation>,
    /// Ticks at which the naive relation did not hold.
    pub naive_failures: Vec<u64>,
    pub finished: bool,
    pub result: Option<Value>,
    #[serde(skip)]
    pub t12: Vec<Event>,
    #[serde(skip)]
    pub t1: Vec<Event>,
    #[serde(skip)]
    pub t2: Vec<Event>,
}

impl MonitorReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn view(s: &MachState) -> StateView<'_> {
    StateView {
        mem: &s.mem,
        cur: s.cur(),
        depth: s.stack.len(),
        com: s.reg.get(Register::Com),
    }
}

struct Run<'p> {
    m: Machine<'p>,
    s: MachState,
    shared: SharedTracker,
    trace: Vec<Event>,
}

enum Next {
    Border,
    Halt,
    Other,
}

impl<'p> Run<'p> {
    fn new(p: &'p MachProgram) -> Result<Run<'p>, String> {
        let m = Machine::new(p);
        let s = m.initial_state()?;
        Ok(Run {
            m,
            s,
            shared: SharedTracker::new(),
            trace: Vec::new(),
        })
    }

    fn next(&self) -> Next {
        match self.m.peek(&self.s) {
            Some(Instr::Call(..) | Instr::Return) => Next::Border,
            Some(Instr::Halt) => Next::Halt,
            _ => Next::Other,
        }
    }

    fn step(&mut self) -> MachStep {
        self.m.step(&mut self.s)
    }

    /// Takes the border step and records the interaction event.
    fn border(&mut self) -> Result<Event, String> {
        match self.step() {
            MachStep::Event(e @ (DfEvent::DfCall { .. } | DfEvent::DfRet { .. })) => {
                let e = e.to_interaction().expect("border event");
                self.shared.observe(&e);
                self.trace.push(e.clone());
                Ok(e)
            }
            MachStep::Stuck(m) => Err(format!("stuck at border: {m}")),
            other => Err(format!("border instruction produced {other:?}")),
        }
    }
}

/// Runs the monitor. `p1` and `p2` are the base programs and `p12` the
/// recomposition; `part` names the components taken from `p1`.
pub fn run_monitor(
    p1: &MachProgram,
    p2: &MachProgram,
    p12: &MachProgram,
    part: &BTreeSet<CompId>,
    ren1: Renaming,
    ren2: Renaming,
    opts: &MonitorOptions,
) -> Result<MonitorReport, String> {
    run_monitor_observed(p1, p2, p12, part, ren1, ren2, opts, &mut |_, _, _, _, _| {})
}

/// Callback seeing every monitored triple, before the step is taken.
pub type Observer<'a> = dyn FnMut(u64, &RelParams, &StateView, &StateView, &StateView) + 'a;

/// [`run_monitor`] with a callback on every monitored triple.
#[allow(clippy::too_many_arguments)]
pub fn run_monitor_observed(
    p1: &MachProgram,
    p2: &MachProgram,
    p12: &MachProgram,
    part: &BTreeSet<CompId>,
    ren1: Renaming,
    ren2: Renaming,
    opts: &MonitorOptions,
    observe: &mut Observer,
) -> Result<MonitorReport, String> {
    let context: BTreeSet<CompId> = p12.comp_ids().difference(part).copied().collect();
    let mut params = RelParams::new(part.clone(), context, ren1, ren2);
    let (mut r1, mut r2, mut r12) = (Run::new(p1)?, Run::new(p2)?, Run::new(p12)?);
    let mut rep = MonitorReport::default();

    macro_rules! violation {
        ($($arg:tt)*) => {{
            rep.violations.push(Violation { tick: rep.ticks, borders: rep.borders, what: format!($($arg)*) });
            break;
        }};
    }

    let mut memo: Option<Memo> = None;
    while rep.ticks < opts.max_ticks {
        let (v12, v1, v2) = (view(&r12.s), view(&r1.s), view(&r2.s));
        rep.checked_states += 1;
        let side = |v: &StateView| if params.in_part(v) { "part" } else { "context" };
        if side(&v12) != side(&v1)
            || side(&v12) != side(&v2)
            || v12.depth != v1.depth
            || v12.depth != v2.depth
        {
            violation!(
                "control states differ: sides {}/{}/{}, depths {}/{}/{}",
                side(&v12),
                side(&v1),
                side(&v2),
                v12.depth,
                v1.depth,
                v2.depth
            );
        }
        // The memory predicates only change when a memory, the side or the
        // shared sets do.
        let fresh = memo
            .as_ref()
            .is_none_or(|m| !m.matches(&v12, &v1, &v2, params.in_part(&v12), rep.borders));
        if fresh {
            let m = Memo {
                mems: [v12.mem.clone(), v1.mem.clone(), v2.mem.clone()],
                in_part: params.in_part(&v12),
                borders: rep.borders,
                tt: mem_rel_tt(&params, &v12, &v1, &v2),
                symmetric: rel_symmetry_check(&params, &v12, &v1, &v2),
                naive: !opts.check_naive || mem_rel_naive(&params, &v12, &v1, &v2),
            };
            memo = Some(m);
        }
        let m = memo.as_ref().unwrap();
        if !m.tt {
            violation!("two-sided memory relation failed");
        }
        if !m.symmetric {
            violation!("relation is not symmetric");
        }
        if !m.naive {
            rep.naive_failures.push(rep.ticks);
        }
        observe(rep.ticks, &params, &v12, &v1, &v2);
        rep.ticks += 1;

        let in_part = params.in_part(&v12);
        let (exec, other) = if in_part {
            (&mut r1, &mut r2)
        } else {
            (&mut r2, &mut r1)
        };

        // The discarded side catches up on its own and waits at borders and
        // at its final halt.
        if matches!(other.next(), Next::Other) {
            if let MachStep::Stuck(m) = other.step() {
                violation!("a base run got stuck: {m}");
            }
        }

        match (r12.next(), exec.next()) {
            (Next::Halt, Next::Halt) => {
                let a = r12.step();
                let b = exec.step();
                match (a, b) {
                    (MachStep::Done(x), MachStep::Done(y))
                        if valren(&params_ren(&params, in_part), y, x) =>
                    {
                        rep.result = Some(x);
                        rep.finished = true;
                    }
                    (a, b) => violation!("halting differs: {a:?} vs {b:?}"),
                }
                break;
            }
            (Next::Other, Next::Other) => {
                let a = r12.step();
                let b = exec.step();
                match (&a, &b) {
                    (MachStep::Stuck(_), MachStep::Stuck(_)) => {
                        rep.finished = true;
                        break;
                    }
                    (MachStep::Stuck(x), _) | (_, MachStep::Stuck(x)) => {
                        violation!("only one run got stuck: {x}")
                    }
                    _ => {}
                }
            }
            (Next::Border, Next::Border) => {
                let other = if in_part { &r2 } else { &r1 };
                match other.next() {
                    Next::Border => {}
                    Next::Other => continue,
                    Next::Halt => violation!(
                        "a base run halted before reaching border {}",
                        rep.borders + 1
                    ),
                }
                let e12 = r12.border();
                let e1 = r1.border();
                let e2 = r2.border();
                let (e12, e1, e2) = match (e12, e1, e2) {
                    (Ok(a), Ok(b), Ok(c)) => (a, b, c),
                    (a, b, c) => violation!(
                        "border step failed: {:?} {:?} {:?}",
                        a.err(),
                        b.err(),
                        c.err()
                    ),
                };
                rep.borders += 1;
                if !match_events(&e1, &e12) || !match_events(&e2, &e12) {
                    violation!("border events do not match");
                }
                if !valren(&params.ren1, e1.value(), e12.value())
                    || !valren(&params.ren2, e2.value(), e12.value())
                {
                    violation!(
                        "border values {} / {} / {} unrelated",
                        e1.value(),
                        e2.value(),
                        e12.value()
                    );
                }
                params.shared1 = r1.shared.shared.clone();
                params.shared2 = r2.shared.shared.clone();
                params.shared12 = r12.shared.shared.clone();
                let (v12, v1, v2) = (view(&r12.s), view(&r1.s), view(&r2.s));
                if !mem_rel_border(&params, &v12, &v1, &v2) {
                    violation!("border memory relation failed after event {}", rep.borders);
                }
                if !state_rel_border(&params, &v12, &v1, &v2) {
                    violation!("border state relation failed after event {}", rep.borders);
                }
            }
            (a, b) => {
                let name = |n: &Next| match n {
                    Next::Border => "border",
                    Next::Halt => "halt",
                    Next::Other => "internal",
                };
                violation!(
                    "lockstep lost: recomposed run at {} instruction, base run at {}",
                    name(&a),
                    name(&b)
                );
            }
        }
    }
    rep.t12 = r12.trace;
    rep.t1 = r1.trace;
    rep.t2 = r2.trace;
    Ok(rep)
}

struct Memo {
    mems: [Memory; 3],
    in_part: bool,
    borders: usize,
    tt: bool,
    symmetric: bool,
    naive: bool,
}

impl Memo {
    fn matches(
        &self,
        v12: &StateView,
        v1: &StateView,
        v2: &StateView,
        in_part: bool,
        borders: usize,
    ) -> bool {
        self.in_part == in_part
            && self.borders == borders
            && self.mems[0].ptr_eq(v12.mem)
            && self.mems[1].ptr_eq(v1.mem)
            && self.mems[2].ptr_eq(v2.mem)
    }
}

fn params_ren(p: &RelParams, in_part: bool) -> Renaming {
    if in_part {
        p.ren1.clone()
    } else {
        p.ren2.clone()
    }
}

/// Recomposes `p1` with `c2` given base programs `p1 ∪ c1` and `p2 ∪ c2`.
/// Unrelated base traces make the case inapplicable rather than failing.
pub fn check_recomposition(
    p1: &MachProgram,
    c1: &MachProgram,
    p2: &MachProgram,
    c2: &MachProgram,
    fuel: u64,
) -> Result<(Verdict, MonitorReport), String> {
    let w1 = link(p1, c1).map_err(|e| format!("P1 with C1: {e}"))?;
    let w2 = link(p2, c2).map_err(|e| format!("P2 with C2: {e}"))?;
    let w12 = link(p1, c2).map_err(|e| format!("P1 with C2: {e}"))?;
    let (t1, o1) = Machine::new(&w1).run_interaction(fuel);
    let (t2, _) = Machine::new(&w2).run_interaction(fuel);
    let Some(shift) = find_shift(&t1, &t2, 8) else {
        return Ok((
            Verdict::Skip("base traces are not related by a constant shift".into()),
            MonitorReport::default(),
        ));
    };
    let k = shift.shift_of(0).unwrap_or(0);
    let part = p1.comp_ids();
    let ren1 = Renaming::PerComp {
        shifts: c2.comp_ids().into_iter().map(|c| (c, k)).collect(),
        default: 0,
    };
    let ren2 = Renaming::PerComp {
        shifts: part.iter().map(|c| (*c, -k)).collect(),
        default: 0,
    };
    let opts = MonitorOptions {
        max_ticks: fuel * COMPILED_FUEL_FACTOR,
        check_naive: false,
    };
    let rep = run_monitor(&w1, &w2, &w12, &part, ren1.clone(), ren2, &opts)?;
    if let Some(v) = rep.violations.first() {
        return Ok((Verdict::Fail(format!("tick {}: {}", v.tick, v.what)), rep));
    }
    let (t12, o12) = Machine::new(&w12).run_interaction(fuel);
    let verdict = match compare_runs(&ren1, &t1, &o1, &t12, &o12) {
        Ok(_) => Verdict::Pass,
        Err(m) => Verdict::Fail(format!("recomposed trace: {m}")),
    };
    Ok((verdict, rep))
}
