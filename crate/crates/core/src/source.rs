//! SafeP: a safe expression language with components, a continuation-passing
//! small-step semantics, and interaction events at component borders.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::memory::{eval_binop, BinOp, CompId, Memory, Perm, Pointer, Value, STATIC_BLOCK};
use crate::program::{ProcTable, Program, MAIN_PROC};
use crate::traces::Event;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expr {
    Val(Value),
    Arg,
    Local,
    BinOp(BinOp, Arc<Expr>, Arc<Expr>),
    Seq(Arc<Expr>, Arc<Expr>),
    If(Arc<Expr>, Arc<Expr>, Arc<Expr>),
    Alloc(Arc<Expr>),
    Deref(Arc<Expr>),
    /// `e1 := e2`; the right-hand side is evaluated first.
    Assign(Arc<Expr>, Arc<Expr>),
    Call(CompId, String, Arc<Expr>),
    /// `*[e1](e2)`; the argument is evaluated first.
    CallPtr(Arc<Expr>, Arc<Expr>),
    FunPtr(String),
    Exit,
}

pub type SourceProgram = Program<Arc<Expr>>;

/// Smart constructors for building expression trees.
pub mod build {
    use super::*;

    pub fn int(i: i64) -> Arc<Expr> {
        Arc::new(Expr::Val(Value::Int(i)))
    }
    pub fn val(v: Value) -> Arc<Expr> {
        Arc::new(Expr::Val(v))
    }
    pub fn arg() -> Arc<Expr> {
        Arc::new(Expr::Arg)
    }
    pub fn local() -> Arc<Expr> {
        Arc::new(Expr::Local)
    }
    pub fn exit() -> Arc<Expr> {
        Arc::new(Expr::Exit)
    }
    pub fn binop(op: BinOp, a: Arc<Expr>, b: Arc<Expr>) -> Arc<Expr> {
        Arc::new(Expr::BinOp(op, a, b))
    }
    pub fn add(a: Arc<Expr>, b: Arc<Expr>) -> Arc<Expr> {
        binop(BinOp::Add, a, b)
    }
    pub fn eq(a: Arc<Expr>, b: Arc<Expr>) -> Arc<Expr> {
        binop(BinOp::Eq, a, b)
    }
    /// `local + k`
    pub fn local_at(k: i64) -> Arc<Expr> {
        if k == 0 {
            local()
        } else {
            add(local(), int(k))
        }
    }
    pub fn seq(a: Arc<Expr>, b: Arc<Expr>) -> Arc<Expr> {
        Arc::new(Expr::Seq(a, b))
    }
    /// Right-nested sequence; `Val 0` when empty.
    pub fn seq_all(items: impl IntoIterator<Item = Arc<Expr>>) -> Arc<Expr> {
        let mut items: Vec<_> = items.into_iter().collect();
        let Some(mut acc) = items.pop() else {
            return int(0);
        };
        while let Some(e) = items.pop() {
            acc = seq(e, acc);
        }
        acc
    }
    pub fn if_(c: Arc<Expr>, t: Arc<Expr>, e: Arc<Expr>) -> Arc<Expr> {
        Arc::new(Expr::If(c, t, e))
    }
    pub fn alloc(e: Arc<Expr>) -> Arc<Expr> {
        Arc::new(Expr::Alloc(e))
    }
    pub fn deref(e: Arc<Expr>) -> Arc<Expr> {
        Arc::new(Expr::Deref(e))
    }
    pub fn assign(dst: Arc<Expr>, v: Arc<Expr>) -> Arc<Expr> {
        Arc::new(Expr::Assign(dst, v))
    }
    pub fn call(c: CompId, p: &str, e: Arc<Expr>) -> Arc<Expr> {
        Arc::new(Expr::Call(c, p.to_string(), e))
    }
    pub fn callptr(f: Arc<Expr>, e: Arc<Expr>) -> Arc<Expr> {
        Arc::new(Expr::CallPtr(f, e))
    }
    pub fn funptr(p: &str) -> Arc<Expr> {
        Arc::new(Expr::FunPtr(p.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Cont {
    Stop,
    Binop1(BinOp, Arc<Expr>, Arc<Cont>),
    Binop2(BinOp, Value, Arc<Cont>),
    Seq(Arc<Expr>, Arc<Cont>),
    If(Arc<Expr>, Arc<Expr>, Arc<Cont>),
    Alloc(Arc<Cont>),
    Deref(Arc<Cont>),
    Assign1(Arc<Expr>, Arc<Cont>),
    Assign2(Value, Arc<Cont>),
    Call(CompId, String, Arc<Cont>),
    CallPtr1(Arc<Expr>, Arc<Cont>),
    CallPtr2(Value, Arc<Cont>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub comp: CompId,
    pub arg: Value,
    pub k: Arc<Cont>,
}

/// The expression under evaluation, or the value it produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Focus {
    Expr(Arc<Expr>),
    Val(Value),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceState {
    pub cur: CompId,
    pub stack: Vec<Frame>,
    pub mem: Memory,
    pub k: Arc<Cont>,
    pub focus: Focus,
    pub arg: Value,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Step {
    Silent,
    Event(Event),
    Done(Value),
    Stuck(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "outcome", content = "detail")]
pub enum Outcome {
    Done(Value),
    Stuck(String),
    OutOfFuel,
}

impl Outcome {
    pub fn is_done(&self) -> bool {
        matches!(self, Outcome::Done(_))
    }
}

fn walk(e: &Expr, f: &mut impl FnMut(&Expr)) {
    // Iterative so that very deep trees do not exhaust the stack.
    let mut todo = vec![e];
    while let Some(e) = todo.pop() {
        f(e);
        match e {
            Expr::Val(_) | Expr::Arg | Expr::Local | Expr::FunPtr(_) | Expr::Exit => {}
            Expr::BinOp(_, a, b) | Expr::Seq(a, b) | Expr::Assign(a, b) | Expr::CallPtr(a, b) => {
                todo.push(b);
                todo.push(a);
            }
            Expr::If(a, b, c) => {
                todo.push(c);
                todo.push(b);
                todo.push(a);
            }
            Expr::Alloc(a) | Expr::Deref(a) | Expr::Call(_, _, a) => todo.push(a),
        }
    }
}

/// Lists every reason the program cannot run; empty means runnable.
pub fn well_formed(p: &SourceProgram) -> Vec<String> {
    well_formed_part(p, true)
}

pub fn well_formed_part(p: &SourceProgram, whole: bool) -> Vec<String> {
    let mut out = p.structural_violations(whole);
    for ((c, name), body) in &p.procs {
        let cname = p.intf.name(*c);
        walk(body, &mut |e| match e {
            Expr::Val(v) if v.is_ptr() => {
                out.push(format!("{cname}.{name} contains a pointer literal"))
            }
            Expr::Call(t, q, _) if t == c => {
                if !p.procs.contains_key(&(*c, q.clone())) {
                    out.push(format!("{cname}.{name} calls unknown procedure {q}"));
                }
            }
            Expr::Call(t, q, _) => {
                if !p.intf.imports(*c, *t, q) {
                    out.push(format!(
                        "{cname}.{name} calls {}.{q}, which is not imported",
                        p.intf.name(*t)
                    ));
                }
            }
            Expr::FunPtr(q) if !p.procs.contains_key(&(*c, q.clone())) => {
                out.push(format!(
                    "{cname}.{name} takes the address of unknown procedure {q}"
                ));
            }
            _ => {}
        });
    }
    out
}

/// A loaded source program ready for execution.
pub struct Interp<'p> {
    pub prog: &'p SourceProgram,
    pub table: ProcTable,
}

impl<'p> Interp<'p> {
    pub fn new(prog: &'p SourceProgram) -> Interp<'p> {
        Interp {
            prog,
            table: ProcTable::new(prog),
        }
    }

    pub fn initial_memory(&self) -> Memory {
        let mut mem = Memory::new();
        for c in self.prog.comp_ids() {
            mem.add_component(c, self.prog.buffers.get(&c).cloned().unwrap_or_default());
        }
        mem
    }

    pub fn initial_state(&self) -> Result<SourceState, String> {
        let main = self
            .prog
            .intf
            .main_comp()
            .ok_or("the program has no unique main component")?;
        let body = self.prog.body(main, MAIN_PROC).ok_or("main has no body")?;
        Ok(SourceState {
            cur: main,
            stack: Vec::new(),
            mem: self.initial_memory(),
            k: Arc::new(Cont::Stop),
            focus: Focus::Expr(body.clone()),
            arg: Value::Int(0),
        })
    }

    pub fn step(&self, s: &mut SourceState) -> Step {
        let focus = std::mem::replace(&mut s.focus, Focus::Val(Value::Error));
        match focus {
            Focus::Expr(e) => self.step_expr(s, e),
            Focus::Val(v) => self.step_val(s, v),
        }
    }

    fn push_k(s: &mut SourceState, make: impl FnOnce(Arc<Cont>) -> Cont) {
        let k = std::mem::replace(&mut s.k, Arc::new(Cont::Stop));
        s.k = Arc::new(make(k));
    }

    fn step_expr(&self, s: &mut SourceState, e: Arc<Expr>) -> Step {
        match &*e {
            Expr::Val(v) => s.focus = Focus::Val(*v),
            Expr::Arg => s.focus = Focus::Val(s.arg),
            Expr::Local => s.focus = Focus::Val(Value::Ptr(Pointer::data(s.cur, STATIC_BLOCK, 0))),
            Expr::BinOp(op, e1, e2) => {
                Self::push_k(s, |k| Cont::Binop1(*op, e2.clone(), k));
                s.focus = Focus::Expr(e1.clone());
            }
            Expr::Seq(e1, e2) => {
                Self::push_k(s, |k| Cont::Seq(e2.clone(), k));
                s.focus = Focus::Expr(e1.clone());
            }
            Expr::If(e1, e2, e3) => {
                Self::push_k(s, |k| Cont::If(e2.clone(), e3.clone(), k));
                s.focus = Focus::Expr(e1.clone());
            }
            Expr::Alloc(e1) => {
                Self::push_k(s, Cont::Alloc);
                s.focus = Focus::Expr(e1.clone());
            }
            Expr::Deref(e1) => {
                Self::push_k(s, Cont::Deref);
                s.focus = Focus::Expr(e1.clone());
            }
            Expr::Assign(e1, e2) => {
                Self::push_k(s, |k| Cont::Assign1(e1.clone(), k));
                s.focus = Focus::Expr(e2.clone());
            }
            Expr::Call(c, p, e1) => {
                Self::push_k(s, |k| Cont::Call(*c, p.clone(), k));
                s.focus = Focus::Expr(e1.clone());
            }
            Expr::CallPtr(e1, e2) => {
                Self::push_k(s, |k| Cont::CallPtr1(e1.clone(), k));
                s.focus = Focus::Expr(e2.clone());
            }
            Expr::FunPtr(p) => match self.table.id(s.cur, p) {
                Some(id) => s.focus = Focus::Val(Value::Ptr(Pointer::code(s.cur, id, 0))),
                None => return Step::Stuck(format!("no procedure {p} in component {}", s.cur)),
            },
            Expr::Exit => return Step::Done(Value::Int(0)),
        }
        Step::Silent
    }

    fn step_val(&self, s: &mut SourceState, v: Value) -> Step {
        let k = std::mem::replace(&mut s.k, Arc::new(Cont::Stop));
        match &*k {
            Cont::Stop => {
                let Some(frame) = s.stack.pop() else {
                    return Step::Done(v);
                };
                s.focus = Focus::Val(v);
                s.arg = frame.arg;
                s.k = frame.k;
                if frame.comp == s.cur {
                    return Step::Silent;
                }
                let ev = Event::Ret {
                    mem: s.mem.clone(),
                    prev: s.cur,
                    next: frame.comp,
                    val: v,
                };
                s.cur = frame.comp;
                return Step::Event(ev);
            }
            Cont::Binop1(op, e2, k2) => {
                s.k = Arc::new(Cont::Binop2(*op, v, k2.clone()));
                s.focus = Focus::Expr(e2.clone());
            }
            Cont::Binop2(op, v1, k2) => match eval_binop(*op, *v1, v) {
                Some(r) => {
                    s.k = k2.clone();
                    s.focus = Focus::Val(r);
                }
                None => {
                    return Step::Stuck(format!("{} is undefined on {v1} and {v}", op.as_str()))
                }
            },
            Cont::Seq(e2, k2) => {
                s.k = k2.clone();
                s.focus = Focus::Expr(e2.clone());
            }
            Cont::If(e2, e3, k2) => {
                let branch = match v {
                    Value::Int(0) => e3,
                    Value::Int(_) => e2,
                    _ => return Step::Stuck(format!("branch condition {v} is not an integer")),
                };
                s.k = k2.clone();
                s.focus = Focus::Expr(branch.clone());
            }
            Cont::Alloc(k2) => {
                let Value::Int(n) = v else {
                    return Step::Stuck(format!("allocation size {v} is not an integer"));
                };
                match s.mem.alloc(s.cur, n) {
                    Ok(p) => {
                        s.k = k2.clone();
                        s.focus = Focus::Val(Value::Ptr(p));
                    }
                    Err(e) => return Step::Stuck(e.to_string()),
                }
            }
            Cont::Deref(k2) => {
                let Value::Ptr(p) = v else {
                    return Step::Stuck(format!("cannot dereference {v}"));
                };
                match s.mem.load(p) {
                    Ok(r) => {
                        s.k = k2.clone();
                        s.focus = Focus::Val(r);
                    }
                    Err(e) => return Step::Stuck(e.to_string()),
                }
            }
            Cont::Assign1(e1, k2) => {
                s.k = Arc::new(Cont::Assign2(v, k2.clone()));
                s.focus = Focus::Expr(e1.clone());
            }
            Cont::Assign2(stored, k2) => {
                let Value::Ptr(p) = v else {
                    return Step::Stuck(format!("cannot assign through {v}"));
                };
                if let Err(e) = s.mem.store(p, *stored) {
                    return Step::Stuck(e.to_string());
                }
                s.k = k2.clone();
                s.focus = Focus::Val(*stored);
            }
            Cont::Call(c, p, k2) => {
                let target = *c;
                let Some(body) = self.prog.body(target, p) else {
                    return Step::Stuck(format!("no procedure {p} in component {target}"));
                };
                if target != s.cur && !self.prog.intf.call_allowed(s.cur, target, p) {
                    return Step::Stuck(format!("component {} may not call {target}.{p}", s.cur));
                }
                s.stack.push(Frame {
                    comp: s.cur,
                    arg: s.arg,
                    k: k2.clone(),
                });
                s.arg = v;
                s.focus = Focus::Expr(body.clone());
                if target == s.cur {
                    return Step::Silent;
                }
                let ev = Event::Call {
                    mem: s.mem.clone(),
                    caller: s.cur,
                    callee: target,
                    proc: p.clone(),
                    arg: v,
                };
                s.cur = target;
                return Step::Event(ev);
            }
            Cont::CallPtr1(e1, k2) => {
                s.k = Arc::new(Cont::CallPtr2(v, k2.clone()));
                s.focus = Focus::Expr(e1.clone());
            }
            Cont::CallPtr2(argv, k2) => match v {
                Value::Ptr(Pointer {
                    perm: Perm::Code,
                    comp,
                    block,
                    offset: 0,
                }) if comp == s.cur => {
                    let Some(name) = self.table.name(comp, block) else {
                        return Step::Stuck(format!("{v} does not designate a procedure"));
                    };
                    s.k = Arc::new(Cont::Call(comp, name.to_string(), k2.clone()));
                    s.focus = Focus::Val(*argv);
                }
                _ => {
                    return Step::Stuck(format!(
                        "{v} is not a function pointer of component {}",
                        s.cur
                    ))
                }
            },
        }
        Step::Silent
    }

    /// Runs from the initial state, collecting interaction events.
    pub fn run(&self, fuel: u64) -> (Vec<Event>, Outcome) {
        match self.initial_state() {
            Ok(mut s) => self.run_from(&mut s, fuel),
            Err(e) => (Vec::new(), Outcome::Stuck(e)),
        }
    }

    pub fn run_from(&self, s: &mut SourceState, fuel: u64) -> (Vec<Event>, Outcome) {
        let mut trace = Vec::new();
        for _ in 0..fuel {
            match self.step(s) {
                Step::Silent => {}
                Step::Event(e) => trace.push(e),
                Step::Done(v) => return (trace, Outcome::Done(v)),
                Step::Stuck(r) => return (trace, Outcome::Stuck(r)),
            }
        }
        (trace, Outcome::OutOfFuel)
    }
}

/// Runs a whole source program.
pub fn run(p: &SourceProgram, fuel: u64) -> (Vec<Event>, Outcome) {
    Interp::new(p).run(fuel)
}

#[cfg(test)]
mod tests {
    use super::build::*;
    use super::*;
    use crate::memory::Pointer;

    fn single(body: Arc<Expr>, buffer: Vec<Value>) -> SourceProgram {
        let mut p = SourceProgram::default();
        p.intf.add(0, "Main").exports.insert("main".into());
        p.procs.insert((0, "main".into()), body);
        p.buffers.insert(0, buffer);
        p
    }

    fn eval(body: Arc<Expr>) -> Outcome {
        run(&single(body, vec![Value::Int(0); 4]), 1000).1
    }

    #[test]
    fn exit_program_is_well_formed_and_done() {
        let p = single(exit(), vec![]);
        assert!(well_formed(&p).is_empty());
        assert_eq!(run(&p, 10), (vec![], Outcome::Done(Value::Int(0))));
    }

    #[test]
    fn local_and_static_buffer() {
        assert_eq!(
            eval(local()),
            Outcome::Done(Value::Ptr(Pointer::data(0, 0, 0)))
        );
        let p = single(deref(local_at(1)), vec![Value::Int(1), Value::Int(2)]);
        assert_eq!(run(&p, 100).1, Outcome::Done(Value::Int(2)));
    }

    #[test]
    fn empty_buffer_still_allocated() {
        let p = single(exit(), vec![]);
        let s = Interp::new(&p).initial_state().unwrap();
        assert_eq!(s.mem.block_size(0, 0), Some(0));
    }

    #[test]
    fn branches_match_on_integers() {
        assert_eq!(
            eval(if_(int(1), int(10), int(20))),
            Outcome::Done(Value::Int(10))
        );
        assert_eq!(
            eval(if_(int(0), int(10), int(20))),
            Outcome::Done(Value::Int(20))
        );
        assert!(matches!(
            eval(if_(local(), int(10), int(20))),
            Outcome::Stuck(_)
        ));
    }

    #[test]
    fn assignment_evaluates_value_first() {
        // The right-hand side allocates block 1, the left-hand side block 2.
        let p = single(seq(assign(alloc(int(1)), alloc(int(2))), int(0)), vec![]);
        let i = Interp::new(&p);
        let mut s = i.initial_state().unwrap();
        let _ = i.run_from(&mut s, 1000);
        assert_eq!(s.mem.block_size(0, 1), Some(2));
        assert_eq!(
            s.mem.load(Pointer::data(0, 2, 0)),
            Ok(Value::Ptr(Pointer::data(0, 1, 0)))
        );
    }

    #[test]
    fn alloc_requires_positive_size() {
        assert!(matches!(eval(alloc(int(0))), Outcome::Stuck(_)));
        assert_eq!(
            eval(alloc(int(2))),
            Outcome::Done(Value::Ptr(Pointer::data(0, 1, 0)))
        );
    }

    #[test]
    fn pointer_literals_rejected() {
        let p = single(val(Value::Ptr(Pointer::data(0, 0, 0))), vec![]);
        assert!(!well_formed(&p).is_empty());
    }

    #[test]
    fn unimported_call_rejected() {
        let mut p = single(call(1, "f", int(0)), vec![]);
        p.intf.add(1, "Lib").exports.insert("f".into());
        p.procs.insert((1, "f".into()), int(1));
        assert!(well_formed(&p).iter().any(|m| m.contains("not imported")));
        assert!(matches!(run(&p, 100).1, Outcome::Stuck(_)));
    }

    #[test]
    fn cross_component_call_emits_events() {
        let mut p = single(call(1, "f", int(7)), vec![Value::Int(3)]);
        p.intf.add(0, "Main").imports.insert((1, "f".into()));
        p.intf.add(1, "Lib").exports.insert("f".into());
        p.procs.insert((1, "f".into()), add(arg(), int(1)));
        assert!(well_formed(&p).is_empty());
        let (t, out) = run(&p, 100);
        assert_eq!(out, Outcome::Done(Value::Int(8)));
        assert_eq!(t.len(), 2);
        assert!(
            matches!(&t[0], Event::Call { caller: 0, callee: 1, proc, arg: Value::Int(7), .. } if proc == "f")
        );
        assert!(matches!(
            &t[1],
            Event::Ret {
                prev: 1,
                next: 0,
                val: Value::Int(8),
                ..
            }
        ));
        assert_eq!(t[0].mem().load(Pointer::data(0, 0, 0)), Ok(Value::Int(3)));
    }

    #[test]
    fn internal_calls_restore_argument() {
        let mut p = single(add(call(0, "g", int(5)), arg()), vec![]);
        p.procs.insert((0, "g".into()), add(arg(), arg()));
        assert_eq!(run(&p, 100).1, Outcome::Done(Value::Int(10)));
    }

    #[test]
    fn function_pointers_call_own_procedures() {
        let mut p = single(callptr(funptr("g"), int(4)), vec![]);
        p.procs.insert((0, "g".into()), add(arg(), int(1)));
        assert_eq!(run(&p, 100).1, Outcome::Done(Value::Int(5)));
        let bad = single(callptr(add(funptr("main"), int(1)), int(4)), vec![]);
        assert!(matches!(run(&bad, 100).1, Outcome::Stuck(_)));
    }

    #[test]
    fn exit_stops_everything() {
        let mut p = single(seq(call(0, "g", int(1)), int(9)), vec![]);
        p.procs.insert((0, "g".into()), exit());
        assert_eq!(run(&p, 100).1, Outcome::Done(Value::Int(0)));
    }

    #[test]
    fn zero_fuel() {
        assert_eq!(
            run(&single(exit(), vec![]), 0),
            (vec![], Outcome::OutOfFuel)
        );
    }

    #[test]
    fn json_round_trip() {
        let p = single(
            seq(assign(local_at(1), callptr(funptr("main"), int(1))), exit()),
            vec![Value::Int(1)],
        );
        let back = SourceProgram::from_json_value(p.to_json()).unwrap();
        assert_eq!(back, p);
    }
}
