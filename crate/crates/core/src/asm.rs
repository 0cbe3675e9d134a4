//! Textual assembly for Mach programs.
//!
//! ```text
//! component Main 0
//! exports main
//! imports Net.receive
//! buffer 0 0 error
//! extern Net 1
//!
//! proc Main.main
//!     const 5 COM
//! loop:
//!     bnz COM loop
//!     halt
//! ```
//!
//! Labels written `L<n>` keep the number `n`; other names are numbered
//! per component above the numeric range.

use std::collections::HashMap;

use crate::memory::{BinOp, CompId, Perm, Pointer, Value};
use crate::program::{CompIntf, FormatError};
use crate::target::{Instr, Label, MachProgram, Register};

const NAMED_LABEL_BASE: Label = 1 << 32;

fn err(line: usize, msg: impl Into<String>) -> FormatError {
    FormatError::Syntax(format!("line {}: {}", line + 1, msg.into()))
}

pub fn parse(text: &str) -> Result<MachProgram, FormatError> {
    let lines: Vec<(usize, Vec<&str>)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            (
                i,
                l.split('#')
                    .next()
                    .unwrap_or("")
                    .split_whitespace()
                    .collect::<Vec<_>>(),
            )
        })
        .filter(|(_, w)| !w.is_empty())
        .collect();

    // Component names are needed before imports and calls can resolve.
    let mut names: HashMap<String, CompId> = HashMap::new();
    for (i, w) in &lines {
        if w[0] == "component" || w[0] == "extern" {
            let [_, name, id] = w.as_slice() else {
                return Err(err(*i, "expected `component NAME ID`"));
            };
            let id: CompId = id
                .parse()
                .map_err(|_| err(*i, format!("bad component id {id}")))?;
            names.insert(name.to_string(), id);
        }
    }
    let comp = |i: usize, name: &str| {
        names
            .get(name)
            .copied()
            .ok_or_else(|| err(i, format!("unknown component {name}")))
    };

    let mut p = MachProgram::default();
    let mut cur_comp: Option<CompId> = None;
    let mut cur_proc: Option<(CompId, String)> = None;
    let mut named: HashMap<(CompId, String), Label> = HashMap::new();
    let mut label = |c: CompId, s: &str| -> Label {
        if let Some(n) = s.strip_prefix('L').and_then(|d| d.parse::<Label>().ok()) {
            if n < NAMED_LABEL_BASE {
                return n;
            }
        }
        let next = NAMED_LABEL_BASE + named.len() as Label;
        *named.entry((c, s.to_string())).or_insert(next)
    };

    for (i, w) in &lines {
        let i = *i;
        match w[0] {
            "component" => {
                let id = comp(i, w[1])?;
                p.intf.comps.insert(
                    id,
                    CompIntf {
                        name: w[1].to_string(),
                        ..CompIntf::default()
                    },
                );
                p.buffers.insert(id, Vec::new());
                cur_comp = Some(id);
                cur_proc = None;
            }
            "extern" => {
                cur_comp = None;
                cur_proc = None;
            }
            "exports" | "imports" | "buffer" | "stack" if cur_proc.is_none() => {
                let c =
                    cur_comp.ok_or_else(|| err(i, format!("`{}` outside a component", w[0])))?;
                match w[0] {
                    "exports" => {
                        p.intf
                            .comps
                            .get_mut(&c)
                            .unwrap()
                            .exports
                            .extend(w[1..].iter().map(|s| s.to_string()));
                    }
                    "imports" => {
                        for imp in &w[1..] {
                            let (cn, pn) = imp
                                .split_once('.')
                                .ok_or_else(|| err(i, format!("bad import {imp}")))?;
                            let t = comp(i, cn)?;
                            p.intf
                                .comps
                                .get_mut(&c)
                                .unwrap()
                                .imports
                                .insert((t, pn.to_string()));
                        }
                    }
                    "buffer" => {
                        let cells = w[1..].iter().map(|s| {
                            parse_value(s).ok_or_else(|| err(i, format!("bad value {s}")))
                        });
                        p.buffers
                            .get_mut(&c)
                            .unwrap()
                            .extend(cells.collect::<Result<Vec<_>, _>>()?);
                    }
                    _ => {
                        let n = w
                            .get(1)
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| err(i, "expected `stack SIZE`"))?;
                        p.stacks.insert(c, n);
                    }
                }
            }
            "proc" => {
                let [_, full] = w.as_slice() else {
                    return Err(err(i, "expected `proc COMP.NAME`"));
                };
                let (cn, pn) = full
                    .split_once('.')
                    .ok_or_else(|| err(i, "expected `proc COMP.NAME`"))?;
                let c = comp(i, cn)?;
                let key = (c, pn.to_string());
                p.procs.entry(key.clone()).or_default();
                cur_proc = Some(key);
            }
            _ => {
                let key = cur_proc
                    .clone()
                    .ok_or_else(|| err(i, "instruction outside a procedure"))?;
                let c = key.0;
                let instr = if w.len() == 1 && w[0].ends_with(':') {
                    Instr::Label(label(c, w[0].trim_end_matches(':')))
                } else {
                    parse_instr(w, &mut |s| label(c, s), &|s| comp(i, s)).map_err(|m| err(i, m))?
                };
                p.procs.get_mut(&key).unwrap().push(instr);
            }
        }
    }
    Ok(p)
}

fn reg(s: &str) -> Result<Register, String> {
    Register::parse(s).ok_or_else(|| format!("unknown register {s}"))
}

pub fn parse_value(s: &str) -> Option<Value> {
    if s == "error" {
        return Some(Value::Error);
    }
    if let Ok(i) = s.parse() {
        return Some(Value::Int(i));
    }
    let parts: Vec<&str> = s.split(':').collect();
    let [perm, c, b, o] = parts.as_slice() else {
        return None;
    };
    let perm = Perm::parse(perm)?;
    Some(Value::Ptr(Pointer {
        perm,
        comp: c.parse().ok()?,
        block: b.parse().ok()?,
        offset: o.parse().ok()?,
    }))
}

fn parse_instr(
    w: &[&str],
    label: &mut dyn FnMut(&str) -> Label,
    comp: &dyn Fn(&str) -> Result<CompId, FormatError>,
) -> Result<Instr, String> {
    let arity = |n: usize| {
        if w.len() == n + 1 {
            Ok(())
        } else {
            Err(format!("`{}` takes {n} operands", w[0]))
        }
    };
    Ok(match w[0].to_ascii_lowercase().as_str() {
        "const" => {
            arity(2)?;
            Instr::Const(
                parse_value(w[1]).ok_or_else(|| format!("bad value {}", w[1]))?,
                reg(w[2])?,
            )
        }
        "mov" => {
            arity(2)?;
            Instr::Mov(reg(w[1])?, reg(w[2])?)
        }
        "binop" => {
            arity(4)?;
            let op = BinOp::parse(w[1]).ok_or_else(|| format!("unknown operator {}", w[1]))?;
            Instr::BinOp(op, reg(w[2])?, reg(w[3])?, reg(w[4])?)
        }
        "label" => {
            arity(1)?;
            Instr::Label(label(w[1]))
        }
        "ptroflabel" => {
            arity(2)?;
            Instr::PtrOfLabel(label(w[1]), reg(w[2])?)
        }
        "load" => {
            arity(2)?;
            Instr::Load(reg(w[1])?, reg(w[2])?)
        }
        "store" => {
            arity(2)?;
            Instr::Store(reg(w[1])?, reg(w[2])?)
        }
        "alloc" => {
            arity(2)?;
            Instr::Alloc(reg(w[1])?, reg(w[2])?)
        }
        "bnz" => {
            arity(2)?;
            Instr::Bnz(reg(w[1])?, label(w[2]))
        }
        "jump" => {
            arity(1)?;
            Instr::Jump(reg(w[1])?)
        }
        "jumpfunptr" => {
            arity(1)?;
            Instr::JumpFunPtr(reg(w[1])?)
        }
        "jal" => {
            arity(1)?;
            Instr::Jal(label(w[1]))
        }
        "call" => {
            arity(1)?;
            let (cn, pn) = w[1].split_once('.').ok_or("expected `call COMP.PROC`")?;
            Instr::Call(comp(cn).map_err(|e| e.to_string())?, pn.to_string())
        }
        "return" => Instr::Return,
        "nop" => Instr::Nop,
        "halt" => Instr::Halt,
        other => return Err(format!("unknown instruction {other}")),
    })
}

pub fn print_value(v: Value) -> String {
    match v {
        Value::Int(i) => i.to_string(),
        Value::Error => "error".into(),
        Value::Ptr(p) => format!("{}:{}:{}:{}", p.perm.as_str(), p.comp, p.block, p.offset),
    }
}

pub fn print_instr(i: &Instr, name_of: &dyn Fn(CompId) -> String) -> String {
    match i {
        Instr::Const(v, r) => format!("const {} {r}", print_value(*v)),
        Instr::Mov(a, b) => format!("mov {a} {b}"),
        Instr::BinOp(op, a, b, d) => format!("binop {} {a} {b} {d}", op.as_str()),
        Instr::Label(l) => format!("L{l}:"),
        Instr::PtrOfLabel(l, r) => format!("ptroflabel L{l} {r}"),
        Instr::Load(a, b) => format!("load {a} {b}"),
        Instr::Store(a, b) => format!("store {a} {b}"),
        Instr::Alloc(a, b) => format!("alloc {a} {b}"),
        Instr::Bnz(r, l) => format!("bnz {r} L{l}"),
        Instr::Jump(r) => format!("jump {r}"),
        Instr::JumpFunPtr(r) => format!("jumpfunptr {r}"),
        Instr::Jal(l) => format!("jal L{l}"),
        Instr::Call(c, p) => format!("call {}.{p}", name_of(*c)),
        Instr::Return => "return".into(),
        Instr::Nop => "nop".into(),
        Instr::Halt => "halt".into(),
    }
}

/// Prints a program so that [`parse`] reads it back unchanged, as long as
/// every component it refers to is named.
pub fn print(p: &MachProgram) -> String {
    let mut out = String::new();
    // Components outside the program have no recorded name.
    let name_of = |c: CompId| {
        p.intf
            .comps
            .get(&c)
            .map(|ci| ci.name.clone())
            .unwrap_or_else(|| format!("C{c}"))
    };
    for (c, ci) in &p.intf.comps {
        out.push_str(&format!("component {} {c}\n", ci.name));
        if !ci.exports.is_empty() {
            out.push_str(&format!(
                "exports {}\n",
                ci.exports.iter().cloned().collect::<Vec<_>>().join(" ")
            ));
        }
        if !ci.imports.is_empty() {
            let imps: Vec<String> = ci
                .imports
                .iter()
                .map(|(t, q)| format!("{}.{q}", name_of(*t)))
                .collect();
            out.push_str(&format!("imports {}\n", imps.join(" ")));
        }
        if let Some(cells) = p.buffers.get(c).filter(|b| !b.is_empty()) {
            let vals: Vec<String> = cells.iter().map(|v| print_value(*v)).collect();
            out.push_str(&format!("buffer {}\n", vals.join(" ")));
        }
        if let Some(n) = p.stacks.get(c) {
            out.push_str(&format!("stack {n}\n"));
        }
        out.push('\n');
    }
    let mut externs = std::collections::BTreeSet::new();
    for ci in p.intf.comps.values() {
        externs.extend(
            ci.imports
                .iter()
                .map(|(t, _)| *t)
                .filter(|t| !p.intf.comps.contains_key(t)),
        );
    }
    for body in p.procs.values() {
        externs.extend(body.iter().filter_map(|i| match i {
            Instr::Call(t, _) if !p.intf.comps.contains_key(t) => Some(*t),
            _ => None,
        }));
    }
    for t in externs {
        out.push_str(&format!("extern {} {t}\n\n", name_of(t)));
    }
    for ((c, name), body) in &p.procs {
        out.push_str(&format!("proc {}.{name}\n", name_of(*c)));
        for i in body {
            let text = print_instr(i, &name_of);
            if matches!(i, Instr::Label(_)) {
                out.push_str(&format!("{text}\n"));
            } else {
                out.push_str(&format!("    {text}\n"));
            }
        }
        out.push('\n');
    }
    out
}
