//! Interaction and data-flow events, the projection between them, shared
//! memory reachability, and trace-level safety predicates.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::memory::{BinOp, BlockId, CompId, Memory, Pointer, Value};
use crate::target::{RegFile, Register};

/// Events visible at component borders, with full memory snapshots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Event {
    Call {
        #[serde(default)]
        mem: Memory,
        caller: CompId,
        callee: CompId,
        proc: String,
        arg: Value,
    },
    Ret {
        #[serde(default)]
        mem: Memory,
        prev: CompId,
        next: CompId,
        val: Value,
    },
}

impl Event {
    pub fn mem(&self) -> &Memory {
        match self {
            Event::Call { mem, .. } | Event::Ret { mem, .. } => mem,
        }
    }

    /// The value crossing the border.
    pub fn value(&self) -> Value {
        match self {
            Event::Call { arg, .. } => *arg,
            Event::Ret { val, .. } => *val,
        }
    }

    /// Component that was executing before the event.
    pub fn source(&self) -> CompId {
        match self {
            Event::Call { caller, .. } => *caller,
            Event::Ret { prev, .. } => *prev,
        }
    }

    /// Component executing after the event.
    pub fn target(&self) -> CompId {
        match self {
            Event::Call { callee, .. } => *callee,
            Event::Ret { next, .. } => *next,
        }
    }

    pub fn is_call(&self) -> bool {
        matches!(self, Event::Call { .. })
    }
}

/// Events of data-flow traces. Register snapshots are taken after the step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DfEvent {
    DfCall {
        #[serde(default)]
        mem: Memory,
        reg: RegFile,
        caller: CompId,
        callee: CompId,
        proc: String,
        arg: Value,
    },
    DfRet {
        #[serde(default)]
        mem: Memory,
        reg: RegFile,
        prev: CompId,
        next: CompId,
        val: Value,
    },
    Const {
        #[serde(default)]
        mem: Memory,
        reg: RegFile,
        cur: CompId,
        v: Value,
        r_dest: Register,
    },
    Mov {
        #[serde(default)]
        mem: Memory,
        reg: RegFile,
        cur: CompId,
        r_src: Register,
        r_dest: Register,
    },
    BinOp {
        #[serde(default)]
        mem: Memory,
        reg: RegFile,
        cur: CompId,
        op: BinOp,
        r1: Register,
        r2: Register,
        r_dest: Register,
    },
    Load {
        #[serde(default)]
        mem: Memory,
        reg: RegFile,
        cur: CompId,
        r_addr: Register,
        r_dest: Register,
    },
    Store {
        #[serde(default)]
        mem: Memory,
        reg: RegFile,
        cur: CompId,
        r_addr: Register,
        r_src: Register,
    },
    Alloc {
        #[serde(default)]
        mem: Memory,
        reg: RegFile,
        cur: CompId,
        r_ptr: Register,
        r_size: Register,
    },
}

impl DfEvent {
    pub fn mem(&self) -> &Memory {
        match self {
            DfEvent::DfCall { mem, .. }
            | DfEvent::DfRet { mem, .. }
            | DfEvent::Const { mem, .. }
            | DfEvent::Mov { mem, .. }
            | DfEvent::BinOp { mem, .. }
            | DfEvent::Load { mem, .. }
            | DfEvent::Store { mem, .. }
            | DfEvent::Alloc { mem, .. } => mem,
        }
    }

    pub fn reg(&self) -> &RegFile {
        match self {
            DfEvent::DfCall { reg, .. }
            | DfEvent::DfRet { reg, .. }
            | DfEvent::Const { reg, .. }
            | DfEvent::Mov { reg, .. }
            | DfEvent::BinOp { reg, .. }
            | DfEvent::Load { reg, .. }
            | DfEvent::Store { reg, .. }
            | DfEvent::Alloc { reg, .. } => reg,
        }
    }

    pub fn is_border(&self) -> bool {
        matches!(self, DfEvent::DfCall { .. } | DfEvent::DfRet { .. })
    }

    /// Component responsible for emitting the event: the caller of a call,
    /// the returning component of a return, the executing one otherwise.
    pub fn owner(&self) -> CompId {
        match self {
            DfEvent::DfCall { caller, .. } => *caller,
            DfEvent::DfRet { prev, .. } => *prev,
            DfEvent::Const { cur, .. }
            | DfEvent::Mov { cur, .. }
            | DfEvent::BinOp { cur, .. }
            | DfEvent::Load { cur, .. }
            | DfEvent::Store { cur, .. }
            | DfEvent::Alloc { cur, .. } => *cur,
        }
    }

    /// Component executing right after the event.
    pub fn successor(&self) -> CompId {
        match self {
            DfEvent::DfCall { callee, .. } => *callee,
            DfEvent::DfRet { next, .. } => *next,
            _ => self.owner(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DfEvent::DfCall { .. } => "dfcall",
            DfEvent::DfRet { .. } => "dfret",
            DfEvent::Const { .. } => "const",
            DfEvent::Mov { .. } => "mov",
            DfEvent::BinOp { .. } => "binop",
            DfEvent::Load { .. } => "load",
            DfEvent::Store { .. } => "store",
            DfEvent::Alloc { .. } => "alloc",
        }
    }

    /// The interaction event of a border event.
    pub fn to_interaction(&self) -> Option<Event> {
        match self {
            DfEvent::DfCall {
                mem,
                caller,
                callee,
                proc,
                arg,
                ..
            } => Some(Event::Call {
                mem: mem.clone(),
                caller: *caller,
                callee: *callee,
                proc: proc.clone(),
                arg: *arg,
            }),
            DfEvent::DfRet {
                mem,
                prev,
                next,
                val,
                ..
            } => Some(Event::Ret {
                mem: mem.clone(),
                prev: *prev,
                next: *next,
                val: *val,
            }),
            _ => None,
        }
    }
}

/// Keeps the border events, converted to interaction events, in order.
pub fn remove_df(t: &[DfEvent]) -> Vec<Event> {
    t.iter().filter_map(DfEvent::to_interaction).collect()
}

pub type Loc = (CompId, BlockId);

/// Incremental computation of the transitively shared blocks of a trace.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SharedTracker {
    pub shared: BTreeSet<Loc>,
}

impl SharedTracker {
    pub fn new() -> SharedTracker {
        SharedTracker::default()
    }

    /// Extends the set with the event's value and everything reachable from
    /// shared blocks in the event's memory.
    pub fn observe(&mut self, e: &Event) {
        let mut todo: Vec<Loc> = self.shared.iter().copied().collect();
        if let Some(loc) = e.value().data_block() {
            if self.shared.insert(loc) {
                todo.push(loc);
            }
        }
        let mem = e.mem();
        while let Some((c, b)) = todo.pop() {
            let Some(cells) = mem.block(c, b) else {
                continue;
            };
            for v in cells.iter() {
                if let Some(loc) = v.data_block() {
                    if self.shared.insert(loc) {
                        todo.push(loc);
                    }
                }
            }
        }
    }
}

pub fn shared_blocks(t: &[Event]) -> BTreeSet<Loc> {
    let mut tr = SharedTracker::new();
    for e in t {
        tr.observe(e);
    }
    tr.shared
}

/// The shared set after each prefix `t[..=i]`.
pub fn shared_prefixes(t: &[Event]) -> Vec<BTreeSet<Loc>> {
    let mut tr = SharedTracker::new();
    t.iter()
        .map(|e| {
            tr.observe(e);
            tr.shared.clone()
        })
        .collect()
}

pub fn shared_proj(mem: &Memory, shared: &BTreeSet<Loc>) -> Memory {
    mem.filter_blocks(|c, b| shared.contains(&(c, b)))
}

pub fn private_proj(mem: &Memory, shared: &BTreeSet<Loc>) -> Memory {
    mem.filter_blocks(|c, b| !shared.contains(&(c, b)))
}

/// Same kind, same component ids, same procedure name.
pub fn match_events(e1: &Event, e2: &Event) -> bool {
    match (e1, e2) {
        (
            Event::Call {
                caller: a1,
                callee: b1,
                proc: p1,
                ..
            },
            Event::Call {
                caller: a2,
                callee: b2,
                proc: p2,
                ..
            },
        ) => a1 == a2 && b1 == b2 && p1 == p2,
        (
            Event::Ret {
                prev: a1, next: b1, ..
            },
            Event::Ret {
                prev: a2, next: b2, ..
            },
        ) => a1 == a2 && b1 == b2,
        _ => false,
    }
}

/// Index of the return matching the call at `i`, if the trace contains it.
pub fn find_matching_ret(t: &[Event], i: usize) -> Option<usize> {
    let mut depth = 0usize;
    for (j, e) in t.iter().enumerate().skip(i + 1) {
        match e {
            Event::Call { .. } => depth += 1,
            Event::Ret { .. } if depth == 0 => return Some(j),
            Event::Ret { .. } => depth -= 1,
        }
    }
    None
}

/// Filter selecting the calls a safety predicate talks about; `None` fields
/// match anything.
#[derive(Clone, Debug, Default)]
pub struct CallFilter {
    pub main: Option<CompId>,
    pub lib: Option<CompId>,
    pub proc: Option<String>,
}

impl CallFilter {
    fn selects(&self, e: &Event) -> bool {
        match e {
            Event::Call {
                caller,
                callee,
                proc,
                ..
            } => {
                self.main.is_none_or(|m| m == *caller)
                    && self.lib.is_none_or(|l| l == *callee)
                    && self.proc.as_ref().is_none_or(|p| p == proc)
            }
            Event::Ret { .. } => false,
        }
    }
}

/// Every selected call leaves the location unchanged at its matching return.
/// Calls without a return in the trace are vacuously fine.
pub fn check_safety_nowrite(t: &[Event], loc: Pointer, filter: &CallFilter) -> bool {
    nowrite_violations(t, loc, filter).is_empty()
}

/// Indices of the selected calls whose matching return sees a changed location.
pub fn nowrite_violations(t: &[Event], loc: Pointer, filter: &CallFilter) -> Vec<usize> {
    t.iter()
        .enumerate()
        .filter(|(_, e)| filter.selects(e))
        .filter_map(|(i, e)| {
            let j = find_matching_ret(t, i)?;
            (e.mem().load(loc).ok() != t[j].mem().load(loc).ok()).then_some(i)
        })
        .collect()
}

/// Checks that calls and returns nest properly.
pub fn well_bracketed(t: &[Event]) -> bool {
    let mut pending: Vec<(CompId, CompId)> = Vec::new();
    for e in t {
        match e {
            Event::Call { caller, callee, .. } => pending.push((*caller, *callee)),
            Event::Ret { prev, next, .. } => match pending.pop() {
                Some((caller, callee)) if callee == *prev && caller == *next => {}
                _ => return false,
            },
        }
    }
    true
}

pub fn df_well_bracketed(t: &[DfEvent]) -> bool {
    well_bracketed(&remove_df(t))
}

/// On-disk trace format, shared by interaction and data-flow traces.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TraceFile<E> {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub comps: BTreeMap<CompId, String>,
    pub events: Vec<E>,
}

/// A trace read from disk, of either alphabet.
#[derive(Clone, Debug)]
pub enum AnyTrace {
    Interaction(Vec<Event>),
    DataFlow(Vec<DfEvent>),
}

impl AnyTrace {
    pub fn interaction(self) -> Vec<Event> {
        match self {
            AnyTrace::Interaction(t) => t,
            AnyTrace::DataFlow(t) => remove_df(&t),
        }
    }
}

pub fn parse_trace(text: &str) -> Result<(BTreeMap<CompId, String>, AnyTrace), serde_json::Error> {
    let raw: TraceFile<serde_json::Value> = serde_json::from_str(text)?;
    let df = raw
        .events
        .first()
        .and_then(|e| e.get("kind"))
        .and_then(|k| k.as_str())
        .is_some_and(|k| k != "call" && k != "ret");
    let trace = if df {
        AnyTrace::DataFlow(
            raw.events
                .into_iter()
                .map(serde_json::from_value)
                .collect::<Result<_, _>>()?,
        )
    } else {
        AnyTrace::Interaction(
            raw.events
                .into_iter()
                .map(serde_json::from_value)
                .collect::<Result<_, _>>()?,
        )
    };
    Ok((raw.comps, trace))
}

/// Serializes a trace; `with_mem = false` drops the snapshots for reading.
pub fn trace_to_json<E: Serialize>(
    comps: &BTreeMap<CompId, String>,
    events: &[E],
    with_mem: bool,
) -> String {
    let mut v = serde_json::to_value(TraceFile {
        comps: comps.clone(),
        events: events.iter().collect::<Vec<&E>>(),
    })
    .expect("trace serializes");
    if !with_mem {
        if let Some(list) = v.get_mut("events").and_then(|e| e.as_array_mut()) {
            for e in list {
                if let Some(obj) = e.as_object_mut() {
                    obj.remove("mem");
                }
            }
        }
    }
    serde_json::to_string_pretty(&v).expect("trace serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::Pointer;

    fn mem_with(cells: &[(CompId, BlockId, Vec<Value>)]) -> Memory {
        let mut m = Memory::new();
        for (c, b, vs) in cells {
            m.install_block(*c, *b, vs.iter().copied().collect());
        }
        m
    }

    fn call(mem: Memory, arg: Value) -> Event {
        Event::Call {
            mem,
            caller: 0,
            callee: 1,
            proc: "f".into(),
            arg,
        }
    }

    fn ret(mem: Memory, val: Value) -> Event {
        Event::Ret {
            mem,
            prev: 1,
            next: 0,
            val,
        }
    }

    #[test]
    fn int_only_traces_share_nothing() {
        let m = mem_with(&[(0, 0, vec![Value::Int(1)])]);
        assert!(shared_blocks(&[call(m.clone(), Value::Int(3)), ret(m, Value::Int(4))]).is_empty());
    }

    #[test]
    fn closure_is_history_sensitive() {
        let a = Value::Ptr(Pointer::data(0, 1, 0));
        let b = Value::Ptr(Pointer::data(0, 2, 0));
        let c = Value::Ptr(Pointer::data(1, 1, 0));
        let m1 = mem_with(&[
            (0, 1, vec![b]),
            (0, 2, vec![Value::Int(0)]),
            (1, 1, vec![Value::Int(0)]),
        ]);
        let m2 = mem_with(&[
            (0, 1, vec![Value::Int(0)]),
            (0, 2, vec![c]),
            (1, 1, vec![Value::Int(0)]),
        ]);
        let t = vec![call(m1, a), ret(m2, Value::Int(0))];
        let pre = shared_prefixes(&t);
        assert_eq!(pre[0], BTreeSet::from([(0, 1), (0, 2)]));
        // B stays shared although block 1 no longer points to it.
        assert_eq!(pre[1], BTreeSet::from([(0, 1), (0, 2), (1, 1)]));
    }

    #[test]
    fn projections_partition_memory() {
        let m = mem_with(&[
            (0, 0, vec![Value::Int(1)]),
            (0, 1, vec![Value::Int(2)]),
            (1, 0, vec![]),
        ]);
        let s = BTreeSet::from([(0, 1)]);
        let sh = shared_proj(&m, &s);
        let pr = private_proj(&m, &s);
        assert_eq!(sh.block_ids(), s);
        assert!(sh.union(&pr).same_contents(&m));
        assert_eq!(shared_proj(&m, &BTreeSet::new()), Memory::new());
        assert!(private_proj(&m, &BTreeSet::new()).same_contents(&m));
    }

    #[test]
    fn remove_df_keeps_border_events() {
        let reg = RegFile::invalid(Value::Int(1));
        let m = Memory::new();
        let mk_const = || DfEvent::Const {
            mem: m.clone(),
            reg: reg.clone(),
            cur: 0,
            v: Value::Int(1),
            r_dest: Register::R1,
        };
        let mut t = Vec::new();
        for i in 0..10 {
            if i == 2 || i == 5 {
                t.push(DfEvent::DfCall {
                    mem: m.clone(),
                    reg: reg.clone(),
                    caller: 0,
                    callee: 1,
                    proc: "f".into(),
                    arg: Value::Int(i),
                });
            } else if i == 7 {
                t.push(DfEvent::DfRet {
                    mem: m.clone(),
                    reg: reg.clone(),
                    prev: 1,
                    next: 0,
                    val: Value::Int(i),
                });
            } else {
                t.push(mk_const());
            }
        }
        let it = remove_df(&t);
        assert_eq!(
            it.iter().map(Event::value).collect::<Vec<_>>(),
            vec![Value::Int(2), Value::Int(5), Value::Int(7)]
        );
        assert!(remove_df(&[mk_const()]).is_empty());
    }

    #[test]
    fn event_matching() {
        let m = Memory::new();
        let e = call(m.clone(), Value::Int(1));
        assert!(match_events(&e, &e));
        assert!(!match_events(&e, &ret(m.clone(), Value::Int(1))));
        let other = Event::Call {
            mem: m,
            caller: 0,
            callee: 2,
            proc: "f".into(),
            arg: Value::Int(1),
        };
        assert!(!match_events(&e, &other));
    }

    #[test]
    fn nowrite() {
        let loc = Pointer::data(0, 0, 0);
        let f = CallFilter {
            main: Some(0),
            lib: Some(1),
            proc: Some("f".into()),
        };
        assert!(check_safety_nowrite(&[], loc, &f));
        let m1 = mem_with(&[(0, 0, vec![Value::Int(100)])]);
        let m2 = mem_with(&[(0, 0, vec![Value::Int(0)])]);
        assert!(check_safety_nowrite(
            &[
                call(m1.clone(), Value::Int(0)),
                ret(m1.clone(), Value::Int(0))
            ],
            loc,
            &f
        ));
        assert!(!check_safety_nowrite(
            &[
                call(m1.clone(), Value::Int(0)),
                ret(m2.clone(), Value::Int(0))
            ],
            loc,
            &f
        ));
        // Unmatched calls are vacuously fine.
        assert!(check_safety_nowrite(&[call(m1, Value::Int(0))], loc, &f));
    }

    #[test]
    fn bracketing() {
        let m = Memory::new();
        assert!(well_bracketed(&[
            call(m.clone(), Value::Int(0)),
            ret(m.clone(), Value::Int(0))
        ]));
        assert!(!well_bracketed(&[ret(m, Value::Int(0))]));
    }

    #[test]
    fn json_round_trip_both_alphabets() {
        let m = mem_with(&[(0, 0, vec![Value::Int(1)])]);
        let t = vec![
            call(m.clone(), Value::Int(3)),
            ret(m.clone(), Value::Int(4)),
        ];
        let (_, back) = parse_trace(&trace_to_json(&BTreeMap::new(), &t, true)).unwrap();
        assert_eq!(back.interaction(), t);
        let df = vec![DfEvent::Mov {
            mem: m,
            reg: RegFile::invalid(Value::Int(0)),
            cur: 0,
            r_src: Register::Com,
            r_dest: Register::R1,
        }];
        let (_, back) = parse_trace(&trace_to_json(&BTreeMap::new(), &df, true)).unwrap();
        assert!(matches!(back, AnyTrace::DataFlow(ref d) if *d == df));
        let stripped = trace_to_json(&BTreeMap::new(), &df, false);
        assert!(!stripped.contains("\"mem\""));
    }
}
