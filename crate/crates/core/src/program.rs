//! Interfaces and the program container shared by both languages, with
//! linking and splitting along component boundaries.

use std::collections::{BTreeMap, BTreeSet};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{CompId, Value};

pub const MAIN_PROC: &str = "main";

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CompIntf {
    pub name: String,
    pub exports: BTreeSet<String>,
    pub imports: BTreeSet<(CompId, String)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Interface {
    pub comps: BTreeMap<CompId, CompIntf>,
}

#[derive(Serialize, Deserialize)]
struct CompIntfRepr {
    id: CompId,
    name: String,
    #[serde(default)]
    exports: Vec<String>,
    #[serde(default)]
    imports: Vec<(CompId, String)>,
}

impl Serialize for Interface {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let list: Vec<CompIntfRepr> = self
            .comps
            .iter()
            .map(|(id, ci)| CompIntfRepr {
                id: *id,
                name: ci.name.clone(),
                exports: ci.exports.iter().cloned().collect(),
                imports: ci.imports.iter().cloned().collect(),
            })
            .collect();
        list.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Interface {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Interface, D::Error> {
        let list = Vec::<CompIntfRepr>::deserialize(d)?;
        let mut intf = Interface::default();
        for r in list {
            let ci = CompIntf {
                name: r.name,
                exports: r.exports.into_iter().collect(),
                imports: r.imports.into_iter().collect(),
            };
            if intf.comps.insert(r.id, ci).is_some() {
                return Err(serde::de::Error::custom(format!(
                    "duplicate component id {}",
                    r.id
                )));
            }
        }
        Ok(intf)
    }
}

impl Interface {
    pub fn add(&mut self, id: CompId, name: &str) -> &mut CompIntf {
        self.comps.entry(id).or_insert_with(|| CompIntf {
            name: name.to_string(),
            ..Default::default()
        })
    }

    pub fn comp_ids(&self) -> BTreeSet<CompId> {
        self.comps.keys().copied().collect()
    }

    pub fn name(&self, c: CompId) -> String {
        self.comps
            .get(&c)
            .map(|ci| ci.name.clone())
            .unwrap_or_else(|| format!("#{c}"))
    }

    pub fn lookup(&self, name: &str) -> Option<CompId> {
        self.comps
            .iter()
            .find(|(_, ci)| ci.name == name)
            .map(|(id, _)| *id)
    }

    pub fn exports(&self, c: CompId, proc: &str) -> bool {
        self.comps
            .get(&c)
            .is_some_and(|ci| ci.exports.contains(proc))
    }

    pub fn imports(&self, c: CompId, target: CompId, proc: &str) -> bool {
        self.comps
            .get(&c)
            .is_some_and(|ci| ci.imports.contains(&(target, proc.to_string())))
    }

    /// Whether `caller` may call `callee.proc` across the component border.
    pub fn call_allowed(&self, caller: CompId, callee: CompId, proc: &str) -> bool {
        caller != callee && self.imports(caller, callee, proc) && self.exports(callee, proc)
    }

    /// Components exporting the entry procedure.
    pub fn mains(&self) -> Vec<CompId> {
        self.comps
            .iter()
            .filter(|(_, ci)| ci.exports.contains(MAIN_PROC))
            .map(|(c, _)| *c)
            .collect()
    }

    pub fn main_comp(&self) -> Option<CompId> {
        match self.mains().as_slice() {
            [c] => Some(*c),
            _ => None,
        }
    }

    pub fn restrict(&self, comps: &BTreeSet<CompId>) -> Interface {
        Interface {
            comps: self
                .comps
                .iter()
                .filter(|(c, _)| comps.contains(c))
                .map(|(c, ci)| (*c, ci.clone()))
                .collect(),
        }
    }

    /// Interface discipline violations. A part may import from components
    /// it does not contain; a whole program must resolve every import.
    pub fn violations(&self, whole: bool) -> Vec<String> {
        let mut out = Vec::new();
        let mut names = BTreeSet::new();
        for (c, ci) in &self.comps {
            if !names.insert(ci.name.clone()) {
                out.push(format!("component name {} is used twice", ci.name));
            }
            for (t, p) in &ci.imports {
                if t == c {
                    out.push(format!("{} imports its own procedure {p}", ci.name));
                } else if p == MAIN_PROC {
                    out.push(format!(
                        "{} imports the entry procedure of component {t}",
                        ci.name
                    ));
                } else if let Some(ti) = self.comps.get(t) {
                    if !ti.exports.contains(p) {
                        out.push(format!(
                            "{} imports {}.{p}, which is not exported",
                            ci.name, ti.name
                        ));
                    }
                } else if whole {
                    out.push(format!(
                        "{} imports {p} from unknown component {t}",
                        ci.name
                    ));
                }
            }
        }
        if whole {
            let mains = self.mains();
            if mains.len() != 1 {
                out.push(format!(
                    "expected exactly one component exporting main, found {}",
                    mains.len()
                ));
            }
        }
        out
    }
}

/// A whole program or program part, generic over procedure bodies.
#[derive(Clone, Debug, PartialEq)]
pub struct Program<B> {
    pub intf: Interface,
    pub procs: BTreeMap<(CompId, String), B>,
    /// Initial contents of each component's static block.
    pub buffers: BTreeMap<CompId, Vec<Value>>,
    /// Size of the reserved runtime stack block, for compiled components.
    pub stacks: BTreeMap<CompId, usize>,
}

impl<B> Default for Program<B> {
    fn default() -> Self {
        Program {
            intf: Interface::default(),
            procs: BTreeMap::new(),
            buffers: BTreeMap::new(),
            stacks: BTreeMap::new(),
        }
    }
}

impl<B> Program<B> {
    /// Procedure names of `c` in canonical order; a procedure's index here is
    /// the block id of its code.
    pub fn proc_names(&self, c: CompId) -> Vec<String> {
        self.procs
            .range((c, String::new())..)
            .take_while(|((k, _), _)| *k == c)
            .map(|((_, p), _)| p.clone())
            .collect()
    }

    pub fn procedure_id(&self, c: CompId, proc: &str) -> Option<i64> {
        self.proc_names(c)
            .iter()
            .position(|p| p == proc)
            .map(|i| i as i64)
    }

    pub fn procedure_name(&self, c: CompId, id: i64) -> Option<String> {
        if id < 0 {
            return None;
        }
        self.proc_names(c).into_iter().nth(id as usize)
    }

    pub fn body(&self, c: CompId, proc: &str) -> Option<&B> {
        self.procs.get(&(c, proc.to_string()))
    }

    pub fn comp_ids(&self) -> BTreeSet<CompId> {
        self.intf.comp_ids()
    }

    /// Violations shared by both languages.
    pub fn structural_violations(&self, whole: bool) -> Vec<String> {
        let mut out = self.intf.violations(whole);
        for (c, ci) in &self.intf.comps {
            for p in &ci.exports {
                if !self.procs.contains_key(&(*c, p.clone())) {
                    out.push(format!("{}.{p} is exported but has no body", ci.name));
                }
            }
            if let Some(cells) = self.buffers.get(c) {
                if cells.iter().any(Value::is_ptr) {
                    out.push(format!("static buffer of {} contains a pointer", ci.name));
                }
            }
        }
        for (c, p) in self.procs.keys() {
            if !self.intf.comps.contains_key(c) {
                out.push(format!("procedure {p} belongs to undeclared component {c}"));
            }
        }
        for c in self.buffers.keys().chain(self.stacks.keys()) {
            if !self.intf.comps.contains_key(c) {
                out.push(format!("memory declared for undeclared component {c}"));
            }
        }
        out
    }
}

/// Precomputed procedure numbering for fast lookups during execution.
#[derive(Clone, Debug, Default)]
pub struct ProcTable {
    names: BTreeMap<CompId, Vec<String>>,
}

impl ProcTable {
    pub fn new<B>(p: &Program<B>) -> ProcTable {
        let mut names: BTreeMap<CompId, Vec<String>> = BTreeMap::new();
        for (c, name) in p.procs.keys() {
            names.entry(*c).or_default().push(name.clone());
        }
        ProcTable { names }
    }

    pub fn id(&self, c: CompId, proc: &str) -> Option<i64> {
        let list = self.names.get(&c)?;
        list.binary_search_by(|n| n.as_str().cmp(proc))
            .ok()
            .map(|i| i as i64)
    }

    pub fn name(&self, c: CompId, id: i64) -> Option<&str> {
        if id < 0 {
            return None;
        }
        self.names.get(&c)?.get(id as usize).map(String::as_str)
    }

    pub fn names(&self, c: CompId) -> &[String] {
        self.names.get(&c).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinkError {
    #[error("component {0} appears in both parts")]
    Overlap(CompId),
    #[error("component name {0} appears in both parts")]
    NameClash(String),
    #[error("{comp} imports {proc} from component {target}, which no part provides")]
    Unresolved {
        comp: String,
        target: CompId,
        proc: String,
    },
    #[error("import {comp} -> {target}.{proc} is not exported")]
    NotExported {
        comp: String,
        target: String,
        proc: String,
    },
    #[error("a linked program needs exactly one main, found {0}")]
    MainCount(usize),
}

/// Links two disjoint parts into a whole program.
pub fn link<B: Clone>(p1: &Program<B>, p2: &Program<B>) -> Result<Program<B>, LinkError> {
    let merged = union(p1, p2)?;
    for (c, ci) in &merged.intf.comps {
        for (t, p) in &ci.imports {
            match merged.intf.comps.get(t) {
                None => {
                    return Err(LinkError::Unresolved {
                        comp: ci.name.clone(),
                        target: *t,
                        proc: p.clone(),
                    })
                }
                Some(ti) if !ti.exports.contains(p) || t == c => {
                    return Err(LinkError::NotExported {
                        comp: ci.name.clone(),
                        target: ti.name.clone(),
                        proc: p.clone(),
                    })
                }
                Some(_) => {}
            }
        }
    }
    let mains = merged.intf.mains().len();
    if mains != 1 {
        return Err(LinkError::MainCount(mains));
    }
    Ok(merged)
}

/// Disjoint union without the whole-program checks.
pub fn union<B: Clone>(p1: &Program<B>, p2: &Program<B>) -> Result<Program<B>, LinkError> {
    let mut out = p1.clone();
    for (c, ci) in &p2.intf.comps {
        if out.intf.comps.contains_key(c) {
            return Err(LinkError::Overlap(*c));
        }
        if out.intf.lookup(&ci.name).is_some() {
            return Err(LinkError::NameClash(ci.name.clone()));
        }
        out.intf.comps.insert(*c, ci.clone());
    }
    out.procs
        .extend(p2.procs.iter().map(|(k, v)| (k.clone(), v.clone())));
    out.buffers
        .extend(p2.buffers.iter().map(|(k, v)| (*k, v.clone())));
    out.stacks.extend(p2.stacks.iter().map(|(k, v)| (*k, *v)));
    Ok(out)
}

/// Splits a program into the part made of `comps` and its complement.
pub fn split<B: Clone>(p: &Program<B>, comps: &BTreeSet<CompId>) -> (Program<B>, Program<B>) {
    let rest: BTreeSet<CompId> = p.comp_ids().difference(comps).copied().collect();
    (restrict(p, comps), restrict(p, &rest))
}

pub fn restrict<B: Clone>(p: &Program<B>, comps: &BTreeSet<CompId>) -> Program<B> {
    Program {
        intf: p.intf.restrict(comps),
        procs: p
            .procs
            .iter()
            .filter(|((c, _), _)| comps.contains(c))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
        buffers: p
            .buffers
            .iter()
            .filter(|(c, _)| comps.contains(c))
            .map(|(c, v)| (*c, v.clone()))
            .collect(),
        stacks: p
            .stacks
            .iter()
            .filter(|(c, _)| comps.contains(c))
            .map(|(c, v)| (*c, *v))
            .collect(),
    }
}

#[derive(Serialize, Deserialize)]
struct ProgramRepr<B> {
    intf: Interface,
    procs: BTreeMap<String, B>,
    #[serde(default)]
    buffers: BTreeMap<String, Vec<Value>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    stacks: BTreeMap<String, usize>,
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown component {0}")]
    UnknownComponent(String),
    #[error("procedure key {0} is not of the form Component.proc")]
    BadKey(String),
    #[error("{0}")]
    Syntax(String),
}

impl<B: Serialize + Clone> Program<B> {
    pub fn to_json(&self) -> serde_json::Value {
        let repr = ProgramRepr {
            intf: self.intf.clone(),
            procs: self
                .procs
                .iter()
                .map(|((c, p), b)| (format!("{}.{p}", self.intf.name(*c)), b.clone()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(c, v)| (self.intf.name(*c), v.clone()))
                .collect(),
            stacks: self
                .stacks
                .iter()
                .map(|(c, v)| (self.intf.name(*c), *v))
                .collect(),
        };
        serde_json::to_value(repr).expect("program serializes")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("program serializes")
    }
}

impl<B: DeserializeOwned> Program<B> {
    pub fn from_json_value(v: serde_json::Value) -> Result<Program<B>, FormatError> {
        let repr: ProgramRepr<B> = serde_json::from_value(v)?;
        let intf = repr.intf;
        let comp = |name: &str| {
            intf.lookup(name)
                .ok_or_else(|| FormatError::UnknownComponent(name.to_string()))
        };
        let mut procs = BTreeMap::new();
        for (key, body) in repr.procs {
            let (c, p) = key
                .split_once('.')
                .ok_or_else(|| FormatError::BadKey(key.clone()))?;
            procs.insert((comp(c)?, p.to_string()), body);
        }
        let mut buffers = BTreeMap::new();
        for (c, cells) in repr.buffers {
            buffers.insert(comp(&c)?, cells);
        }
        let mut stacks = BTreeMap::new();
        for (c, size) in repr.stacks {
            stacks.insert(comp(&c)?, size);
        }
        Ok(Program {
            intf,
            procs,
            buffers,
            stacks,
        })
    }

    /// Back-translated programs nest deeply, so the parser has no depth limit;
    /// callers should run on a large stack.
    pub fn from_json_str(s: &str) -> Result<Program<B>, FormatError> {
        let mut de = serde_json::Deserializer::from_str(s);
        de.disable_recursion_limit();
        let v = serde_json::Value::deserialize(&mut de)?;
        de.end()?;
        Program::from_json_value(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_part() -> Program<u32> {
        let mut p = Program::<u32>::default();
        p.intf.add(0, "Main").exports.insert("main".into());
        p.intf.add(0, "Main").imports.insert((1, "f".into()));
        p.intf.add(1, "Lib").exports.insert("f".into());
        p.procs.insert((0, "main".into()), 1);
        p.procs.insert((0, "helper".into()), 2);
        p.procs.insert((1, "f".into()), 3);
        p.buffers.insert(0, vec![Value::Int(1)]);
        p
    }

    #[test]
    fn procedure_ids_follow_name_order() {
        let p = two_part();
        assert_eq!(p.procedure_id(0, "helper"), Some(0));
        assert_eq!(p.procedure_id(0, "main"), Some(1));
        assert_eq!(p.procedure_id(1, "f"), Some(0));
        assert_eq!(p.procedure_name(0, 1).as_deref(), Some("main"));
        assert_eq!(p.procedure_name(0, 2), None);
    }

    #[test]
    fn split_then_link_round_trips() {
        let p = two_part();
        let (a, b) = split(&p, &BTreeSet::from([0]));
        assert_eq!(link(&a, &b).unwrap(), p);
        let (all, none) = split(&p, &p.comp_ids());
        assert_eq!(all, p);
        assert!(none.intf.comps.is_empty());
        let (e, full) = split(&p, &BTreeSet::new());
        assert!(e.procs.is_empty());
        assert_eq!(full, p);
    }

    #[test]
    fn link_errors() {
        let p = two_part();
        let (a, _) = split(&p, &BTreeSet::from([0]));
        assert!(matches!(link(&a, &a), Err(LinkError::Overlap(0))));
        assert!(matches!(
            link(&a, &Program::default()),
            Err(LinkError::Unresolved { .. })
        ));
        let (_, b) = split(&p, &BTreeSet::from([0]));
        assert!(matches!(
            link(&b, &Program::default()),
            Err(LinkError::MainCount(0))
        ));
    }

    #[test]
    fn interface_violations() {
        let mut p = two_part();
        assert!(p.structural_violations(true).is_empty());
        p.intf.add(1, "Lib").imports.insert((1, "f".into()));
        p.buffers
            .insert(1, vec![Value::Ptr(crate::memory::Pointer::data(0, 0, 0))]);
        let v = p.structural_violations(true);
        assert!(v.iter().any(|m| m.contains("its own")));
        assert!(v.iter().any(|m| m.contains("pointer")));
    }

    #[test]
    fn json_round_trip() {
        let p = two_part();
        let back = Program::<u32>::from_json_value(p.to_json()).unwrap();
        assert_eq!(back, p);
        assert!(p.to_json()["procs"].get("Main.main").is_some());
    }
}
