//! Random generation of terminating, well-formed programs in both languages.
//!
//! A [`World`] fixes the components, their procedures and each procedure's
//! argument and result kind. Calls only go to procedures of higher rank, so
//! every generated program terminates. Static blocks follow a fixed layout:
//! cells 0..4 hold integers, 4..6 are stash slots for pointers, and 6..8
//! flag which slots hold a pointer.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::memory::{BinOp, CompId, Pointer, Value};
use crate::program::{Interface, MAIN_PROC};
use crate::source::build::*;
use crate::source::{Expr, SourceProgram};
use crate::target::{Instr, Label, MachProgram, Register};

pub const STATIC_SIZE: usize = 8;
pub const SHARED_SIZE: i64 = 4;
const STASH: i64 = 4;
const FLAG: i64 = 6;
const LOOP_PROC: &str = "loop";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub comps: usize,
    pub procs_per_comp: usize,
    pub max_depth: usize,
    /// Snippets per generated Mach procedure.
    pub code_len: usize,
    /// Probability that a call site passes a pointer rather than an integer.
    pub share_prob: f64,
    pub fuel: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            comps: 3,
            procs_per_comp: 3,
            max_depth: 3,
            code_len: 6,
            share_prob: 0.6,
            fuel: 10_000,
        }
    }
}

impl GenConfig {
    pub fn with_seed(&self, seed: u64) -> GenConfig {
        GenConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kind {
    Int,
    Ptr,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcSig {
    pub comp: CompId,
    pub name: String,
    pub arg: Kind,
    pub ret: Kind,
    pub rank: usize,
    pub exported: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct World {
    pub names: Vec<String>,
    pub sigs: Vec<ProcSig>,
    pub main_comp: CompId,
}

impl World {
    pub fn generate(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> World {
        let n = cfg.comps.max(1);
        let names = (0..n).map(|i| format!("C{i}")).collect();
        let main_comp = rng.random_range(0..n);
        let mut sigs = Vec::new();
        for c in 0..n {
            for j in 0..rng.random_range(1..=cfg.procs_per_comp.max(1)) {
                let kind = |rng: &mut ChaCha8Rng| {
                    if rng.random_bool(cfg.share_prob) {
                        Kind::Ptr
                    } else {
                        Kind::Int
                    }
                };
                let (arg, ret) = (kind(rng), kind(rng));
                sigs.push(ProcSig {
                    comp: c,
                    name: format!("p{j}"),
                    arg,
                    ret,
                    rank: 0,
                    exported: true,
                });
            }
            for j in 0..rng.random_range(0..=1) {
                sigs.push(ProcSig {
                    comp: c,
                    name: format!("h{j}"),
                    arg: Kind::Int,
                    ret: Kind::Int,
                    rank: 0,
                    exported: false,
                });
            }
        }
        // Random ranks behind main.
        let mut order: Vec<usize> = (0..sigs.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for (rank, i) in order.into_iter().enumerate() {
            sigs[i].rank = rank + 1;
        }
        sigs.push(ProcSig {
            comp: main_comp,
            name: MAIN_PROC.into(),
            arg: Kind::Int,
            ret: Kind::Int,
            rank: 0,
            exported: true,
        });
        sigs.sort_by_key(|s| s.rank);
        World {
            names,
            sigs,
            main_comp,
        }
    }

    pub fn comp_ids(&self) -> BTreeSet<CompId> {
        (0..self.names.len()).collect()
    }

    pub fn interface(&self) -> Interface {
        let mut intf = Interface::default();
        for (c, n) in self.names.iter().enumerate() {
            intf.add(c, n);
        }
        for s in self.sigs.iter().filter(|s| s.exported) {
            intf.comps
                .get_mut(&s.comp)
                .unwrap()
                .exports
                .insert(s.name.clone());
        }
        for s in self
            .sigs
            .iter()
            .filter(|s| s.exported && s.name != MAIN_PROC)
        {
            for c in 0..self.names.len() {
                if c != s.comp {
                    intf.comps
                        .get_mut(&c)
                        .unwrap()
                        .imports
                        .insert((s.comp, s.name.clone()));
                }
            }
        }
        intf
    }

    /// Procedures a procedure may call: exported ones of other components
    /// and any one of its own component, all of higher rank.
    pub fn callees(&self, me: &ProcSig) -> Vec<&ProcSig> {
        self.sigs
            .iter()
            .filter(|s| s.rank > me.rank && (if s.comp == me.comp { true } else { s.exported }))
            .collect()
    }

    pub fn sigs_of(&self, c: CompId) -> Vec<&ProcSig> {
        self.sigs.iter().filter(|s| s.comp == c).collect()
    }
}

fn static_buffer(rng: &mut ChaCha8Rng) -> Vec<Value> {
    let mut cells: Vec<Value> = (0..STASH)
        .map(|_| Value::Int(rng.random_range(-3..10)))
        .collect();
    cells.resize(STATIC_SIZE, Value::Int(0));
    cells
}

// ---------------------------------------------------------------- source

struct SrcGen<'a> {
    rng: &'a mut ChaCha8Rng,
    world: &'a World,
    cfg: &'a GenConfig,
    sig: &'a ProcSig,
    calls_left: usize,
    in_loop: bool,
}

impl SrcGen<'_> {
    fn chance(&mut self, p: f64) -> bool {
        self.rng.random_bool(p)
    }

    fn lit(&mut self) -> Arc<Expr> {
        int(self.rng.random_range(-5..20))
    }

    fn offset(&mut self, p: Arc<Expr>) -> Arc<Expr> {
        match self.rng.random_range(0..SHARED_SIZE) {
            0 => p,
            k => add(p, int(k)),
        }
    }

    fn callee(&mut self, ret: Option<Kind>) -> Option<ProcSig> {
        if self.calls_left == 0 || self.in_loop {
            return None;
        }
        let options: Vec<&ProcSig> = self
            .world
            .callees(self.sig)
            .into_iter()
            .filter(|s| ret.is_none_or(|k| s.ret == k))
            .collect();
        let s = (*options.choose(self.rng)?).clone();
        self.calls_left -= 1;
        Some(s)
    }

    fn call_to(&mut self, s: &ProcSig, d: usize) -> Arc<Expr> {
        let a = match s.arg {
            Kind::Int => self.int_expr(d),
            Kind::Ptr => self.ptr_expr(d),
        };
        if s.comp == self.sig.comp && !s.exported && self.chance(0.4) {
            callptr(funptr(&s.name), a)
        } else {
            call(s.comp, &s.name, a)
        }
    }

    fn int_expr(&mut self, d: usize) -> Arc<Expr> {
        let d = d.saturating_sub(1);
        match self.rng.random_range(0..10) {
            0 | 1 => self.lit(),
            2 | 3 => local_int(self.rng.random_range(0..STASH)),
            4 if self.sig.arg == Kind::Int => arg(),
            5 | 6 if d > 0 => {
                let op = *BinOp::ALL.choose(self.rng).unwrap();
                binop(op, self.int_expr(d), self.int_expr(d))
            }
            7 if d > 0 => {
                if let Some(s) = self.callee(Some(Kind::Int)) {
                    return self.call_to(&s, d);
                }
                self.lit()
            }
            8 if d > 0 => if_(self.int_expr(d), self.int_expr(d), self.int_expr(d)),
            9 if d > 0 => seq(self.stmt(d), self.int_expr(d)),
            _ => self.lit(),
        }
    }

    fn ptr_expr(&mut self, d: usize) -> Arc<Expr> {
        let d = d.saturating_sub(1);
        match self.rng.random_range(0..6) {
            0 if self.sig.arg == Kind::Ptr => arg(),
            1 if d > 0 => {
                if let Some(s) = self.callee(Some(Kind::Ptr)) {
                    return self.call_to(&s, d);
                }
                alloc(int(SHARED_SIZE))
            }
            2 if d > 0 => if_(self.int_expr(d), self.ptr_expr(d), self.ptr_expr(d)),
            3 if d > 0 => seq(self.stmt(d), self.ptr_expr(d)),
            _ if self.sig.arg == Kind::Ptr && self.chance(0.5) => arg(),
            _ => alloc(int(SHARED_SIZE)),
        }
    }

    fn stmt(&mut self, d: usize) -> Arc<Expr> {
        let d = d.saturating_sub(1);
        match self.rng.random_range(0..10) {
            0 => assign(local_at(self.rng.random_range(0..STASH)), self.int_expr(d)),
            1 => {
                let v = self.int_expr(d);
                let p = self.ptr_expr(d);
                assign(self.offset(p), v)
            }
            2 => {
                let v = self.ptr_expr(d);
                let p = self.ptr_expr(d);
                assign(self.offset(p), v)
            }
            3 => {
                let src = self.ptr_expr(d);
                let src = deref(self.offset(src));
                let p = self.ptr_expr(d);
                assign(self.offset(p), src)
            }
            4 => {
                let j = self.rng.random_range(0..2);
                seq(
                    assign(local_at(STASH + j), self.ptr_expr(d)),
                    assign(local_at(FLAG + j), int(1)),
                )
            }
            5 => {
                let j = self.rng.random_range(0..2);
                let dst = self.offset(deref(local_at(STASH + j)));
                if_(
                    deref(local_at(FLAG + j)),
                    assign(dst, self.int_expr(d)),
                    int(0),
                )
            }
            6 => match self.callee(None) {
                Some(s) => self.call_to(&s, d),
                None => self.lit(),
            },
            7 if !self.in_loop => call(self.sig.comp, LOOP_PROC, int(self.rng.random_range(0..4))),
            8 if d > 0 => if_(self.int_expr(d), self.stmt(d), self.stmt(d)),
            _ => assign(local_at(self.rng.random_range(0..STASH)), self.lit()),
        }
    }

    fn body(&mut self) -> Arc<Expr> {
        let d = self.cfg.max_depth.max(1);
        let n = self.rng.random_range(1..=3);
        let mut items: Vec<Arc<Expr>> = Vec::new();
        if self.chance(0.7) {
            if let Some(s) = self.callee(None) {
                let d = self.cfg.max_depth;
                items.push(self.call_to(&s, d));
            }
        }
        items.extend((0..n).map(|_| self.stmt(d + 1)));
        items.push(match self.sig.ret {
            Kind::Int => self.int_expr(d),
            Kind::Ptr => self.ptr_expr(d),
        });
        seq_all(items)
    }
}

fn local_int(i: i64) -> Arc<Expr> {
    deref(local_at(i))
}

/// Source procedures for the components in `comps`.
pub fn gen_source_part(
    world: &World,
    comps: &BTreeSet<CompId>,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> SourceProgram {
    let mut p = SourceProgram {
        intf: world.interface().restrict(comps),
        ..SourceProgram::default()
    };
    for &c in comps {
        p.buffers.insert(c, static_buffer(rng));
        for s in world.sigs_of(c) {
            let mut g = SrcGen {
                rng,
                world,
                cfg,
                sig: s,
                calls_left: 3,
                in_loop: false,
            };
            p.procs.insert((c, s.name.clone()), g.body());
        }
        let loop_sig = ProcSig {
            comp: c,
            name: LOOP_PROC.into(),
            arg: Kind::Int,
            ret: Kind::Int,
            rank: usize::MAX,
            exported: false,
        };
        let mut g = SrcGen {
            rng,
            world,
            cfg,
            sig: &loop_sig,
            calls_left: 0,
            in_loop: true,
        };
        let step = g.stmt(cfg.max_depth.max(1));
        let body = if_(
            binop(BinOp::Le, arg(), int(0)),
            int(0),
            seq(step, call(c, LOOP_PROC, binop(BinOp::Sub, arg(), int(1)))),
        );
        p.procs.insert((c, LOOP_PROC.into()), body);
    }
    p
}

/// A whole source program.
pub fn gen_source_program(cfg: &GenConfig) -> SourceProgram {
    let mut rng = cfg.rng();
    let world = World::generate(cfg, &mut rng);
    gen_source_part(&world, &world.comp_ids(), cfg, &mut rng)
}

// ------------------------------------------------------------------ mach

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RK {
    Int,
    Ptr,
    /// Pointer to the component's own static block, offset 0.
    Stat,
    Junk,
}

struct MachGen<'a> {
    rng: &'a mut ChaCha8Rng,
    world: &'a World,
    sig: &'a ProcSig,
    comp: CompId,
    next_label: &'a mut Label,
    code: Vec<Instr>,
    kinds: [RK; 7],
    /// Registers the current snippet may not overwrite.
    protected: Vec<Register>,
    writable: Vec<Register>,
    calls_left: usize,
    helpers: Vec<&'a ProcSig>,
    helper_labels: &'a [(String, Label)],
}

impl MachGen<'_> {
    fn kind(&self, r: Register) -> RK {
        self.kinds[r.index()]
    }

    fn set(&mut self, r: Register, k: RK) {
        self.kinds[r.index()] = k;
    }

    fn emit(&mut self, i: Instr) {
        self.code.push(i);
    }

    fn fresh_label(&mut self) -> Label {
        let l = *self.next_label;
        *self.next_label += 1;
        l
    }

    fn scratch(&mut self, avoid: &[Register]) -> Register {
        let options: Vec<Register> = self
            .writable
            .iter()
            .copied()
            .filter(|r| !avoid.contains(r) && !self.protected.contains(r))
            .collect();
        *options.choose(self.rng).expect("a free register")
    }

    fn with_kind(&mut self, k: RK) -> Option<Register> {
        let options: Vec<Register> = Register::ALL
            .into_iter()
            .filter(|r| self.kind(*r) == k)
            .collect();
        options.choose(self.rng).copied()
    }

    fn ensure_int(&mut self, avoid: &[Register]) -> Register {
        if self.rng.random_bool(0.6) {
            if let Some(r) = self.with_kind(RK::Int).filter(|r| !avoid.contains(r)) {
                return r;
            }
        }
        let r = self.scratch(avoid);
        let v = self.rng.random_range(-5..20);
        self.emit(Instr::Const(Value::Int(v), r));
        self.set(r, RK::Int);
        r
    }

    fn ensure_ptr(&mut self, avoid: &[Register]) -> Register {
        if self.rng.random_bool(0.8) {
            if let Some(r) = self.with_kind(RK::Ptr).filter(|r| !avoid.contains(r)) {
                return r;
            }
        }
        let size = self.scratch(avoid);
        self.emit(Instr::Const(Value::Int(SHARED_SIZE), size));
        self.set(size, RK::Int);
        let r = self.scratch(avoid);
        self.emit(Instr::Alloc(r, size));
        self.set(r, RK::Ptr);
        r
    }

    fn static_ptr(&mut self, avoid: &[Register]) -> Register {
        if let Some(r) = self.with_kind(RK::Stat).filter(|r| !avoid.contains(r)) {
            return r;
        }
        let r = self.scratch(avoid);
        self.emit(Instr::Const(Value::Ptr(Pointer::data(self.comp, 0, 0)), r));
        self.set(r, RK::Stat);
        r
    }

    /// A register holding `base + off`; clobbers a scratch register.
    fn addr(&mut self, base: Register, off: i64, avoid: &[Register]) -> Register {
        if off == 0 {
            return base;
        }
        let mut av = avoid.to_vec();
        av.push(base);
        let t = self.scratch(&av);
        self.emit(Instr::Const(Value::Int(off), t));
        self.emit(Instr::BinOp(BinOp::Add, base, t, t));
        self.set(t, RK::Junk);
        t
    }

    fn snippet(&mut self, allow_calls: bool, allow_control: bool) {
        match self.rng.random_range(0..14) {
            0 => {
                let r = self.scratch(&[]);
                let v = self.rng.random_range(-5..20);
                self.emit(Instr::Const(Value::Int(v), r));
                self.set(r, RK::Int);
            }
            1 => {
                let a = self.ensure_int(&[]);
                let b = self.ensure_int(&[a]);
                let rd = self.scratch(&[]);
                let op = *BinOp::ALL.choose(self.rng).unwrap();
                self.emit(Instr::BinOp(op, a, b, rd));
                self.set(rd, RK::Int);
            }
            2 => {
                let rs = *Register::ALL.choose(self.rng).unwrap();
                let rd = self.scratch(&[]);
                self.emit(Instr::Mov(rs, rd));
                let k = self.kind(rs);
                self.set(rd, k);
            }
            3 => {
                let s = self.static_ptr(&[]);
                let off = self.rng.random_range(0..STASH);
                let a = self.addr(s, off, &[]);
                let rd = self.scratch(&[]);
                self.emit(Instr::Load(a, rd));
                self.set(rd, RK::Int);
            }
            4 => {
                let v = self.ensure_int(&[]);
                let s = self.static_ptr(&[v]);
                let off = self.rng.random_range(0..STASH);
                let a = self.addr(s, off, &[v]);
                self.emit(Instr::Store(a, v));
            }
            5 => {
                self.ensure_ptr(&[]);
            }
            6 => {
                let p = self.ensure_ptr(&[]);
                let v = *Register::ALL.choose(self.rng).unwrap();
                let off = self.rng.random_range(0..SHARED_SIZE);
                let a = self.addr(p, off, &[v]);
                self.emit(Instr::Store(a, v));
            }
            7 => {
                let p = self.ensure_ptr(&[]);
                let off = self.rng.random_range(0..SHARED_SIZE);
                let a = self.addr(p, off, &[]);
                let rd = self.scratch(&[]);
                self.emit(Instr::Load(a, rd));
                self.set(rd, RK::Junk);
            }
            8 => self.stash(),
            9 if allow_control => self.use_stash(),
            10 if allow_calls => self.cross_call(),
            11 if allow_control => self.counted_loop(),
            12 if allow_control && allow_calls => self.helper_call(),
            13 if allow_control => self.forward_jump(),
            _ => self.emit(Instr::Nop),
        }
    }

    fn stash(&mut self) {
        let j = self.rng.random_range(0..2);
        let p = self.ensure_ptr(&[]);
        let s = self.static_ptr(&[p]);
        let a = self.addr(s, STASH + j, &[p]);
        self.emit(Instr::Store(a, p));
        let one = self.scratch(&[s]);
        self.emit(Instr::Const(Value::Int(1), one));
        self.set(one, RK::Int);
        let a = self.addr(s, FLAG + j, &[one]);
        self.emit(Instr::Store(a, one));
    }

    fn use_stash(&mut self) {
        let j = self.rng.random_range(0..2);
        let s = self.static_ptr(&[]);
        let a = self.addr(s, FLAG + j, &[]);
        let f = self.scratch(&[]);
        self.emit(Instr::Load(a, f));
        self.set(f, RK::Int);
        let (l_have, l_end) = (self.fresh_label(), self.fresh_label());
        self.emit(Instr::Bnz(f, l_have));
        let t = self.scratch(&[]);
        self.emit(Instr::Const(Value::Int(1), t));
        let before = {
            let mut k = self.kinds;
            k[t.index()] = RK::Int;
            k
        };
        self.emit(Instr::Bnz(t, l_end));
        self.emit(Instr::Label(l_have));
        let s = self.static_ptr(&[]);
        let a = self.addr(s, STASH + j, &[]);
        let r = self.scratch(&[]);
        self.emit(Instr::Load(a, r));
        self.set(r, RK::Ptr);
        let v = self.ensure_int(&[r]);
        let off = self.rng.random_range(0..SHARED_SIZE);
        let a = self.addr(r, off, &[v]);
        self.emit(Instr::Store(a, v));
        // The stashed pointer may be someone else's block; forget it.
        self.set(r, RK::Junk);
        self.emit(Instr::Label(l_end));
        self.merge(before);
    }

    fn merge(&mut self, other: [RK; 7]) {
        for (k, o) in self.kinds.iter_mut().zip(other) {
            if *k != o {
                *k = RK::Junk;
            }
        }
    }

    fn cross_call(&mut self) {
        if self.calls_left == 0 {
            return;
        }
        let options: Vec<&ProcSig> = self
            .world
            .callees(self.sig)
            .into_iter()
            .filter(|s| s.comp != self.comp)
            .collect();
        let Some(s) = options.choose(self.rng).copied() else {
            return;
        };
        self.calls_left -= 1;
        let r = match s.arg {
            Kind::Int => self.ensure_int(&[]),
            Kind::Ptr => self.ensure_ptr(&[]),
        };
        if r != Register::Com {
            self.emit(Instr::Mov(r, Register::Com));
        }
        self.emit(Instr::Call(s.comp, s.name.clone()));
        self.kinds = [RK::Junk; 7];
        self.set(
            Register::Com,
            if s.ret == Kind::Int { RK::Int } else { RK::Ptr },
        );
    }

    fn counted_loop(&mut self) {
        let r = self.scratch(&[]);
        let n = self.rng.random_range(1..4);
        self.emit(Instr::Const(Value::Int(n), r));
        let l = self.fresh_label();
        self.emit(Instr::Label(l));
        self.kinds = [RK::Junk; 7];
        self.set(r, RK::Int);
        self.protected.push(r);
        for _ in 0..self.rng.random_range(1..3) {
            self.snippet(false, false);
        }
        let t = self.scratch(&[]);
        self.emit(Instr::Const(Value::Int(1), t));
        self.emit(Instr::BinOp(BinOp::Sub, r, t, r));
        self.set(t, RK::Int);
        self.emit(Instr::Bnz(r, l));
        self.protected.pop();
    }

    fn helper_call(&mut self) {
        let Some(h) = self.helpers.choose(self.rng).copied() else {
            return;
        };
        if h.rank <= self.sig.rank || !self.protected.is_empty() {
            return;
        }
        let l = self
            .helper_labels
            .iter()
            .find(|(n, _)| *n == h.name)
            .map(|(_, l)| *l)
            .expect("helper label");
        self.emit(Instr::Jal(l));
        for r in HELPER_CLOBBERS.iter().chain([&Register::Ra]) {
            self.set(*r, RK::Junk);
        }
    }

    fn forward_jump(&mut self) {
        let l = self.fresh_label();
        let r = self.scratch(&[]);
        self.emit(Instr::PtrOfLabel(l, r));
        self.emit(Instr::Jump(r));
        self.set(r, RK::Junk);
        self.emit(Instr::Const(Value::Int(99), Register::Com));
        self.emit(Instr::Nop);
        self.emit(Instr::Label(l));
    }

    fn finish(&mut self, main: bool) {
        let r = match self.sig.ret {
            Kind::Int => self.ensure_int(&[]),
            Kind::Ptr => self.ensure_ptr(&[]),
        };
        if r != Register::Com {
            self.emit(Instr::Mov(r, Register::Com));
        }
        self.emit(if main { Instr::Halt } else { Instr::Return });
    }
}

const HELPER_CLOBBERS: [Register; 3] = [Register::R1, Register::Aux1, Register::Aux2];

/// Mach procedures for the components in `comps`.
pub fn gen_mach_part(
    world: &World,
    comps: &BTreeSet<CompId>,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> MachProgram {
    let mut p = MachProgram {
        intf: world.interface().restrict(comps),
        ..MachProgram::default()
    };
    for &c in comps {
        p.buffers.insert(c, static_buffer(rng));
        let sigs = world.sigs_of(c);
        let helpers: Vec<&ProcSig> = sigs.iter().copied().filter(|s| !s.exported).collect();
        let mut next_label: Label = 0;
        let helper_labels: Vec<(String, Label)> = helpers
            .iter()
            .map(|h| {
                next_label += 1;
                (h.name.clone(), next_label - 1)
            })
            .collect();
        for s in &sigs {
            let mut g = MachGen {
                rng,
                world,
                sig: s,
                comp: c,
                next_label: &mut next_label,
                code: Vec::new(),
                kinds: [RK::Junk; 7],
                protected: Vec::new(),
                writable: Register::ALL.to_vec(),
                calls_left: 3,
                helpers: helpers.clone(),
                helper_labels: &helper_labels,
            };
            if s.exported {
                g.set(
                    Register::Com,
                    if s.arg == Kind::Int { RK::Int } else { RK::Ptr },
                );
                if g.rng.random_bool(0.7) {
                    g.cross_call();
                }
                for _ in 0..g.rng.random_range(1..=cfg.code_len.max(1)) {
                    g.snippet(true, true);
                }
                g.finish(s.name == MAIN_PROC && c == world.main_comp);
            } else {
                // Leaf helpers entered by Jal: only scratch registers, then back.
                let l = helper_labels.iter().find(|(n, _)| *n == s.name).unwrap().1;
                g.emit(Instr::Label(l));
                g.writable = HELPER_CLOBBERS.to_vec();
                for _ in 0..g.rng.random_range(1..=3) {
                    g.snippet(false, false);
                }
                g.emit(Instr::Jump(Register::Ra));
            }
            let code = g.code;
            p.procs.insert((c, s.name.clone()), code);
        }
    }
    p
}

/// A program context in Mach for the components of `world` outside `part`.
pub fn gen_mach_context(
    world: &World,
    part: &BTreeSet<CompId>,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> MachProgram {
    let ctx: BTreeSet<CompId> = world.comp_ids().difference(part).copied().collect();
    gen_mach_part(world, &ctx, cfg, rng)
}

/// A whole Mach program.
pub fn gen_mach_program(cfg: &GenConfig) -> MachProgram {
    let mut rng = cfg.rng();
    let world = World::generate(cfg, &mut rng);
    gen_mach_part(&world, &world.comp_ids(), cfg, &mut rng)
}

/// A source program part and a Mach context over the same world. The part
/// gets a random nonempty proper subset of the components.
pub fn gen_split(cfg: &GenConfig) -> (World, SourceProgram, MachProgram) {
    let mut rng = cfg.rng();
    let mut world = World::generate(
        &GenConfig {
            comps: cfg.comps.max(2),
            ..cfg.clone()
        },
        &mut rng,
    );
    world.names.iter_mut().for_each(|n| n.insert(0, 'K'));
    let all: Vec<CompId> = world.comp_ids().into_iter().collect();
    let k = rng.random_range(1..all.len());
    let mut part = BTreeSet::new();
    while part.len() < k {
        part.insert(*all.choose(&mut rng).unwrap());
    }
    let ps = gen_source_part(&world, &part, cfg, &mut rng);
    let ct = gen_mach_context(&world, &part, cfg, &mut rng);
    (world, ps, ct)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{source, target};

    #[test]
    fn deterministic_per_seed() {
        let cfg = GenConfig::default();
        assert_eq!(gen_source_program(&cfg), gen_source_program(&cfg));
        assert_eq!(gen_mach_program(&cfg), gen_mach_program(&cfg));
        assert_ne!(gen_mach_program(&cfg), gen_mach_program(&cfg.with_seed(1)));
    }

    #[test]
    fn generated_programs_are_well_formed() {
        for seed in 0..100 {
            let cfg = GenConfig::default().with_seed(seed);
            let s = gen_source_program(&cfg);
            assert!(
                source::well_formed(&s).is_empty(),
                "seed {seed}: {:?}",
                source::well_formed(&s)
            );
            let m = gen_mach_program(&cfg);
            assert!(
                target::well_formed(&m).is_empty(),
                "seed {seed}: {:?}",
                target::well_formed(&m)
            );
            let (_, ps, ct) = gen_split(&cfg);
            assert!(
                source::well_formed_part(&ps, false).is_empty(),
                "seed {seed}"
            );
            assert!(
                target::well_formed_part(&ct, false).is_empty(),
                "seed {seed}"
            );
            assert!(!ps.procs.is_empty() && !ct.procs.is_empty());
        }
    }
}
