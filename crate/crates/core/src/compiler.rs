//! Single-pass code generation from SafeP to Mach.
//!
//! Expressions leave their value in COM and keep intermediates on the
//! component's runtime block, addressed through SP. Every procedure starts
//! with a stub that tells external entries (which reload SP) apart from
//! function-pointer entries (which do not); both join the internal entry,
//! which is also the target of direct calls inside the component.

use std::collections::BTreeMap;

use crate::memory::{BinOp, CompId, Pointer, Value, STACK_BLOCK, STATIC_BLOCK};
use crate::program::{ProcTable, MAIN_PROC};
use crate::source::{Expr, SourceProgram};
use crate::target::{stack_layout, Instr, Label, MachProgram, Register};

pub use crate::program::{link, split};

pub const DEFAULT_STACK_SIZE: usize = 1024;

use Register::{Arg, Aux1, Aux2, Com, Ra, Sp, R1};

/// Per-component code generation state.
pub struct CodegenCtx<'a> {
    pub comp: CompId,
    pub next_label: Label,
    procs: &'a [String],
}

impl<'a> CodegenCtx<'a> {
    pub fn new(comp: CompId, procs: &'a [String]) -> CodegenCtx<'a> {
        CodegenCtx {
            comp,
            next_label: 2 * procs.len() as Label,
            procs,
        }
    }

    fn fresh(&mut self) -> Label {
        let l = self.next_label;
        self.next_label += 1;
        l
    }

    fn proc_id(&self, name: &str) -> i64 {
        self.procs
            .binary_search_by(|n| n.as_str().cmp(name))
            .expect("procedure of this component") as i64
    }

    fn fp_label(&self, name: &str) -> Label {
        2 * self.proc_id(name) as Label
    }

    fn int_label(&self, name: &str) -> Label {
        self.fp_label(name) + 1
    }

    fn runtime(&self, cell: i64) -> Value {
        Value::Ptr(Pointer::data(self.comp, STACK_BLOCK, cell))
    }
}

fn push(out: &mut Vec<Instr>, r: Register) {
    out.push(Instr::Store(Sp, r));
    out.push(Instr::Const(Value::Int(1), Aux2));
    out.push(Instr::BinOp(BinOp::Add, Sp, Aux2, Sp));
}

fn pop(out: &mut Vec<Instr>, r: Register) {
    out.push(Instr::Const(Value::Int(1), Aux2));
    out.push(Instr::BinOp(BinOp::Sub, Sp, Aux2, Sp));
    out.push(Instr::Load(Sp, r));
}

fn jump_label(out: &mut Vec<Instr>, l: Label) {
    out.push(Instr::Const(Value::Int(1), Aux2));
    out.push(Instr::Bnz(Aux2, l));
}

/// Appends code leaving the value of `e` in COM. In tail position a call to
/// a procedure of the same component reuses the current frame.
pub fn compile_expr(ctx: &mut CodegenCtx, e: &Expr, tail: bool, out: &mut Vec<Instr>) {
    match e {
        Expr::Val(v) => out.push(Instr::Const(*v, Com)),
        Expr::Arg => out.push(Instr::Mov(Arg, Com)),
        Expr::Local => out.push(Instr::Const(
            Value::Ptr(Pointer::data(ctx.comp, STATIC_BLOCK, 0)),
            Com,
        )),
        Expr::BinOp(op, e1, e2) => {
            compile_expr(ctx, e1, false, out);
            push(out, Com);
            compile_expr(ctx, e2, false, out);
            pop(out, Aux1);
            out.push(Instr::BinOp(*op, Aux1, Com, Com));
        }
        Expr::Seq(e1, e2) => {
            compile_expr(ctx, e1, false, out);
            compile_expr(ctx, e2, tail, out);
        }
        Expr::If(e1, e2, e3) => {
            let (l_then, l_end) = (ctx.fresh(), ctx.fresh());
            compile_expr(ctx, e1, false, out);
            out.push(Instr::Bnz(Com, l_then));
            compile_expr(ctx, e3, tail, out);
            jump_label(out, l_end);
            out.push(Instr::Label(l_then));
            compile_expr(ctx, e2, tail, out);
            out.push(Instr::Label(l_end));
        }
        Expr::Alloc(e1) => {
            compile_expr(ctx, e1, false, out);
            out.push(Instr::Alloc(Com, Com));
        }
        Expr::Deref(e1) => {
            compile_expr(ctx, e1, false, out);
            out.push(Instr::Load(Com, Com));
        }
        Expr::Assign(e1, e2) => {
            compile_expr(ctx, e2, false, out);
            push(out, Com);
            compile_expr(ctx, e1, false, out);
            pop(out, Aux1);
            out.push(Instr::Store(Com, Aux1));
            out.push(Instr::Mov(Aux1, Com));
        }
        Expr::Call(c, p, e1) if *c == ctx.comp => {
            compile_expr(ctx, e1, false, out);
            if tail {
                pop(out, Ra);
                jump_label(out, ctx.int_label(p));
            } else {
                push(out, Arg);
                out.push(Instr::Jal(ctx.int_label(p)));
                pop(out, Arg);
            }
        }
        Expr::Call(c, p, e1) => {
            compile_expr(ctx, e1, false, out);
            push(out, Arg);
            out.push(Instr::Const(ctx.runtime(stack_layout::SAVED_SP), Aux1));
            out.push(Instr::Store(Aux1, Sp));
            out.push(Instr::Call(*c, p.clone()));
            out.push(Instr::Const(ctx.runtime(stack_layout::SAVED_SP), Aux1));
            out.push(Instr::Load(Aux1, Sp));
            pop(out, Arg);
        }
        Expr::CallPtr(e1, e2) => {
            let l_ret = ctx.fresh();
            compile_expr(ctx, e2, false, out);
            push(out, Com);
            compile_expr(ctx, e1, false, out);
            out.push(Instr::Mov(Com, R1));
            pop(out, Com);
            push(out, Arg);
            out.push(Instr::Const(ctx.runtime(stack_layout::FP_FLAG), Aux1));
            out.push(Instr::Const(Value::Int(1), Aux2));
            out.push(Instr::Store(Aux1, Aux2));
            out.push(Instr::PtrOfLabel(l_ret, Ra));
            out.push(Instr::JumpFunPtr(R1));
            out.push(Instr::Label(l_ret));
            pop(out, Arg);
        }
        Expr::FunPtr(p) => {
            out.push(Instr::Const(
                Value::Ptr(Pointer::code(ctx.comp, ctx.proc_id(p), 0)),
                Com,
            ));
        }
        Expr::Exit => {
            out.push(Instr::Const(Value::Int(0), Com));
            out.push(Instr::Halt);
        }
    }
}

/// Code of one procedure: entry stub, then the internal entry.
pub fn compile_proc(ctx: &mut CodegenCtx, name: &str, body: &Expr, is_main: bool) -> Vec<Instr> {
    let mut out = vec![
        Instr::Const(ctx.runtime(stack_layout::FP_FLAG), Aux1),
        Instr::Load(Aux1, Aux2),
        Instr::Bnz(Aux2, ctx.fp_label(name)),
        Instr::Const(ctx.runtime(stack_layout::SAVED_SP), Aux1),
        Instr::Load(Aux1, Sp),
        Instr::Jal(ctx.int_label(name)),
        Instr::Const(ctx.runtime(stack_layout::SAVED_SP), Aux1),
        Instr::Store(Aux1, Sp),
        if is_main { Instr::Halt } else { Instr::Return },
        Instr::Label(ctx.fp_label(name)),
        Instr::Const(Value::Int(0), Aux2),
        Instr::Store(Aux1, Aux2),
        Instr::Label(ctx.int_label(name)),
    ];
    push(&mut out, Ra);
    out.push(Instr::Mov(Com, Arg));
    compile_expr(ctx, body, true, &mut out);
    pop(&mut out, Ra);
    out.push(Instr::Jump(Ra));
    out
}

#[derive(Clone, Copy, Debug)]
pub struct CompileOptions {
    pub stack_size: usize,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            stack_size: DEFAULT_STACK_SIZE,
        }
    }
}

pub fn compile(p: &SourceProgram) -> MachProgram {
    compile_with(p, CompileOptions::default())
}

/// Compiles each component independently, so compiling parts and linking
/// them gives the same program as compiling the linked whole.
pub fn compile_with(p: &SourceProgram, opts: CompileOptions) -> MachProgram {
    let table = ProcTable::new(p);
    let mut procs = BTreeMap::new();
    for c in p.comp_ids() {
        let names = table.names(c);
        let mut ctx = CodegenCtx::new(c, names);
        let main_here = p.intf.exports(c, MAIN_PROC);
        for name in names {
            let body = &p.procs[&(c, name.clone())];
            let code = compile_proc(&mut ctx, name, body, main_here && name == MAIN_PROC);
            procs.insert((c, name.clone()), code);
        }
    }
    MachProgram {
        intf: p.intf.clone(),
        procs,
        buffers: p.buffers.clone(),
        stacks: p
            .comp_ids()
            .into_iter()
            .map(|c| (c, opts.stack_size))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::source::build::*;
    use crate::target;
    use crate::{source, Outcome};
    use std::sync::Arc;

    fn whole(main: Arc<Expr>, extra: &[(&str, Arc<Expr>)]) -> SourceProgram {
        let mut p = SourceProgram::default();
        p.intf.add(0, "Main").exports.insert(MAIN_PROC.into());
        p.procs.insert((0, MAIN_PROC.into()), main);
        for (n, b) in extra {
            p.procs.insert((0, n.to_string()), b.clone());
        }
        p.buffers.insert(0, vec![Value::Int(0); 4]);
        p
    }

    fn same_outcome(p: &SourceProgram) -> Outcome {
        let (_, so) = source::run(p, 100_000);
        let (_, to) = target::run(&compile(p), 1_000_000);
        match (&so, &to) {
            (Outcome::Stuck(_), Outcome::Stuck(_)) => {}
            _ => assert_eq!(so, to),
        }
        so
    }

    #[test]
    fn constant_is_one_instruction() {
        let mut ctx = CodegenCtx::new(0, &[]);
        let mut out = Vec::new();
        compile_expr(&mut ctx, &Expr::Val(Value::Int(3)), false, &mut out);
        assert_eq!(out, vec![Instr::Const(Value::Int(3), Com)]);
    }

    #[test]
    fn exit_runs_to_done() {
        let p = whole(exit(), &[]);
        let (t, o) = target::run(&compile(&p), 1000);
        assert_eq!(o, Outcome::Done(Value::Int(0)));
        assert!(crate::traces::remove_df(&t).is_empty());
    }

    #[test]
    fn arithmetic_and_branches() {
        assert_eq!(
            same_outcome(&whole(add(int(2), binop(BinOp::Mul, int(3), int(4))), &[])),
            Outcome::Done(Value::Int(14))
        );
        assert_eq!(
            same_outcome(&whole(if_(int(0), int(1), int(2)), &[])),
            Outcome::Done(Value::Int(2))
        );
        assert_eq!(
            same_outcome(&whole(if_(int(5), int(1), int(2)), &[])),
            Outcome::Done(Value::Int(1))
        );
        same_outcome(&whole(if_(local(), int(1), int(2)), &[]));
    }

    #[test]
    fn memory_operations() {
        let body = seq_all([
            assign(local_at(1), int(9)),
            assign(local_at(2), alloc(int(3))),
            assign(add(deref(local_at(2)), int(2)), deref(local_at(1))),
            deref(add(deref(local_at(2)), int(2))),
        ]);
        assert_eq!(
            same_outcome(&whole(body, &[])),
            Outcome::Done(Value::Int(9))
        );
    }

    #[test]
    fn internal_and_pointer_calls() {
        // fact(n) = if n then n * fact(n - 1) else 1
        let fact = if_(
            arg(),
            binop(
                BinOp::Mul,
                arg(),
                call(0, "fact", binop(BinOp::Sub, arg(), int(1))),
            ),
            int(1),
        );
        let p = whole(
            add(call(0, "fact", int(5)), callptr(funptr("fact"), int(3))),
            &[("fact", fact)],
        );
        assert_eq!(same_outcome(&p), Outcome::Done(Value::Int(126)));
    }

    #[test]
    fn tail_calls_run_in_constant_stack() {
        // count(n) = if n then count(n - 1) else 7, far deeper than the stack.
        let count = if_(
            arg(),
            call(0, "count", binop(BinOp::Sub, arg(), int(1))),
            int(7),
        );
        let p = whole(call(0, "count", int(3000)), &[("count", count)]);
        assert_eq!(same_outcome(&p), Outcome::Done(Value::Int(7)));
    }

    #[test]
    fn deep_non_tail_recursion_overflows() {
        let deep = if_(
            arg(),
            add(int(1), call(0, "deep", binop(BinOp::Sub, arg(), int(1)))),
            int(0),
        );
        let p = whole(call(0, "deep", int(5000)), &[("deep", deep)]);
        let (_, o) = target::run(&compile(&p), 10_000_000);
        assert!(matches!(o, Outcome::Stuck(_)));
    }

    #[test]
    fn output_is_deterministic_and_well_formed() {
        let fact = if_(
            arg(),
            call(0, "fact", binop(BinOp::Sub, arg(), int(1))),
            int(1),
        );
        let p = whole(call(0, "fact", int(3)), &[("fact", fact)]);
        let a = compile(&p);
        assert_eq!(a, compile(&p));
        assert!(
            target::well_formed(&a).is_empty(),
            "{:?}",
            target::well_formed(&a)
        );
        assert_eq!(a.intf, p.intf);
        assert_eq!(a.buffers, p.buffers);
    }
}
