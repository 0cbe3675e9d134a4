//! Block renamings, relatedness of values, memories and traces, and the
//! memory relations used while monitoring recomposition.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use crate::memory::{Block, BlockId, CompId, Memory, Perm, Value, STACK_BLOCK};
use crate::traces::{match_events, Event, Loc, SharedTracker};

/// A partial injection on block ids. The reserved runtime block is never in
/// its domain or range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Renaming {
    Identity,
    Shift(i64),
    /// A constant shift per component, with a default for the others.
    PerComp {
        shifts: BTreeMap<CompId, i64>,
        default: i64,
    },
    Table(BTreeMap<Loc, BlockId>),
}

impl Renaming {
    pub fn shift_of(&self, c: CompId) -> Option<i64> {
        match self {
            Renaming::Identity => Some(0),
            Renaming::Shift(k) => Some(*k),
            Renaming::PerComp { shifts, default } => {
                Some(shifts.get(&c).copied().unwrap_or(*default))
            }
            Renaming::Table(_) => None,
        }
    }

    pub fn apply(&self, c: CompId, b: BlockId) -> Option<BlockId> {
        if b == STACK_BLOCK {
            return None;
        }
        let out = match self {
            Renaming::Table(t) => *t.get(&(c, b))?,
            _ => b + self.shift_of(c).expect("shift-like"),
        };
        (out >= 0).then_some(out)
    }

    pub fn inverse(&self) -> Renaming {
        match self {
            Renaming::Identity => Renaming::Identity,
            Renaming::Shift(k) => Renaming::Shift(-k),
            Renaming::PerComp { shifts, default } => Renaming::PerComp {
                shifts: shifts.iter().map(|(c, k)| (*c, -k)).collect(),
                default: -default,
            },
            Renaming::Table(t) => {
                Renaming::Table(t.iter().map(|((c, b), b2)| ((*c, *b2), *b)).collect())
            }
        }
    }

    /// `self` followed by `next`. Tables compose exactly; two shift-like
    /// renamings compose by adding shifts, so the result also covers blocks
    /// whose intermediate image would have been negative.
    pub fn then(&self, next: &Renaming) -> Renaming {
        match (self, next) {
            (Renaming::Table(t), _) => Renaming::Table(
                t.iter()
                    .filter_map(|((c, b), b1)| Some(((*c, *b), next.apply(*c, *b1)?)))
                    .collect(),
            ),
            (_, Renaming::Table(t)) => Renaming::Table(
                t.iter()
                    .filter_map(|((c, b1), b2)| {
                        let b = b1 - self.shift_of(*c)?;
                        (self.apply(*c, b) == Some(*b1)).then_some(((*c, b), *b2))
                    })
                    .collect(),
            ),
            _ => {
                let comps: BTreeSet<CompId> = [self, next]
                    .iter()
                    .flat_map(|r| match r {
                        Renaming::PerComp { shifts, .. } => shifts.keys().copied().collect(),
                        _ => Vec::new(),
                    })
                    .collect();
                let default = self.default_shift() + next.default_shift();
                let shifts: BTreeMap<CompId, i64> = comps
                    .into_iter()
                    .map(|c| (c, self.shift_of(c).unwrap() + next.shift_of(c).unwrap()))
                    .filter(|(_, k)| *k != default)
                    .collect();
                match (shifts.is_empty(), default) {
                    (true, 0) => Renaming::Identity,
                    (true, k) => Renaming::Shift(k),
                    _ => Renaming::PerComp { shifts, default },
                }
            }
        }
    }

    fn default_shift(&self) -> i64 {
        match self {
            Renaming::Identity | Renaming::Table(_) => 0,
            Renaming::Shift(k) => *k,
            Renaming::PerComp { default, .. } => *default,
        }
    }

    /// Parses `identity`, `shift:K`, or `comp:C=K,...;default=K`.
    pub fn parse(s: &str) -> Option<Renaming> {
        if s == "identity" {
            return Some(Renaming::Identity);
        }
        if let Some(k) = s.strip_prefix("shift:") {
            return k.parse().ok().map(Renaming::Shift);
        }
        let rest = s.strip_prefix("comp:")?;
        let mut shifts = BTreeMap::new();
        let mut default = 0;
        for item in rest.split(',').filter(|i| !i.is_empty()) {
            let (c, k) = item.split_once('=')?;
            if c == "default" {
                default = k.parse().ok()?;
            } else {
                shifts.insert(c.parse().ok()?, k.parse().ok()?);
            }
        }
        Some(Renaming::PerComp { shifts, default })
    }

    /// Reads a table as a JSON list of `[comp, block, renamed_block]`.
    pub fn table_from_json(text: &str) -> Result<Renaming, serde_json::Error> {
        let rows: Vec<(CompId, BlockId, BlockId)> = serde_json::from_str(text)?;
        Ok(Renaming::Table(
            rows.into_iter().map(|(c, b, b2)| ((c, b), b2)).collect(),
        ))
    }
}

impl fmt::Display for Renaming {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Renaming::Identity => write!(f, "identity"),
            Renaming::Shift(k) => write!(f, "shift:{k}"),
            Renaming::PerComp { shifts, default } => {
                write!(f, "comp:")?;
                for (c, k) in shifts {
                    write!(f, "{c}={k},")?;
                }
                write!(f, "default={default}")
            }
            Renaming::Table(t) => write!(f, "table({} entries)", t.len()),
        }
    }
}

/// Integers and errors must be equal, code pointers identical, and data
/// pointers agree up to the renaming of their block. Runtime-block pointers
/// only relate to themselves.
pub fn valren(ren: &Renaming, v1: Value, v2: Value) -> bool {
    match (v1, v2) {
        (Value::Int(a), Value::Int(b)) => a == b,
        (Value::Error, Value::Error) => true,
        (Value::Ptr(p), Value::Ptr(q)) if p.perm == Perm::Code || q.perm == Perm::Code => p == q,
        (Value::Ptr(p), Value::Ptr(q)) if p.block == STACK_BLOCK || q.block == STACK_BLOCK => {
            p == q
        }
        (Value::Ptr(p), Value::Ptr(q)) => {
            p.comp == q.comp && p.offset == q.offset && ren.apply(p.comp, p.block) == Some(q.block)
        }
        _ => false,
    }
}

/// Large blocks that were already found related, kept alive so that their
/// storage cannot be reused while cached.
type Verified = Vec<(Renaming, Block, Block)>;

const CACHE_MIN_LEN: usize = 64;
const CACHE_CAPACITY: usize = 512;

thread_local! {
    static VERIFIED: RefCell<HashMap<(Loc, BlockId), Verified>> = RefCell::new(HashMap::new());
}

fn blocks_related(ren: &Renaming, m1: &Memory, m2: &Memory, (c, b): Loc, b2: BlockId) -> bool {
    let (Some(x), Some(y)) = (m1.block(c, b), m2.block(c, b2)) else {
        return false;
    };
    if x.len() != y.len() {
        return false;
    }
    let compare = || x.iter().zip(y.iter()).all(|(u, v)| valren(ren, *u, *v));
    if x.len() < CACHE_MIN_LEN {
        return compare();
    }
    let key = ((c, b), b2);
    let hit = VERIFIED.with_borrow(|cache| {
        cache.get(&key).is_some_and(|es| {
            es.iter()
                .any(|(r, bx, by)| bx.ptr_eq(x) && by.ptr_eq(y) && r == ren)
        })
    });
    if hit {
        return true;
    }
    let ok = compare();
    if ok {
        VERIFIED.with_borrow_mut(|cache| {
            if cache.len() >= CACHE_CAPACITY {
                cache.clear();
            }
            let es = cache.entry(key).or_default();
            if es.len() >= 4 {
                es.remove(0);
            }
            es.push((ren.clone(), x.clone(), y.clone()));
        });
    }
    ok
}

/// Relatedness of the given blocks of `m1` with their renamed counterparts.
pub fn mem_related(ren: &Renaming, m1: &Memory, m2: &Memory, locs: &BTreeSet<Loc>) -> bool {
    locs.iter().all(|&(c, b)| match ren.apply(c, b) {
        Some(b2) => blocks_related(ren, m1, m2, (c, b), b2),
        None => false,
    })
}

/// Two whole memories are related: the renaming is a bijection between their
/// domains and every block relates. Runtime blocks are compared in place.
pub fn related_memories(ren: &Renaming, m1: &Memory, m2: &Memory) -> bool {
    let d1 = m1.block_ids();
    let d2 = m2.block_ids();
    let mut image = BTreeSet::new();
    for &(c, b) in &d1 {
        let b2 = if b == STACK_BLOCK {
            Some(b)
        } else {
            ren.apply(c, b)
        };
        let Some(b2) = b2 else { return false };
        if !blocks_related(ren, m1, m2, (c, b), b2) {
            return false;
        }
        image.insert((c, b2));
    }
    image == d2
}

/// Renames a set of locations; `None` if some location is outside the domain.
pub fn rename_locs(ren: &Renaming, locs: &BTreeSet<Loc>) -> Option<BTreeSet<Loc>> {
    locs.iter()
        .map(|&(c, b)| ren.apply(c, b).map(|b2| (c, b2)))
        .collect()
}

/// The first reason two interaction traces are unrelated.
pub fn trace_mismatch(ren: &Renaming, t1: &[Event], t2: &[Event]) -> Option<String> {
    if t1.len() != t2.len() {
        return Some(format!(
            "trace lengths differ: {} vs {}",
            t1.len(),
            t2.len()
        ));
    }
    let mut s1 = SharedTracker::new();
    let mut s2 = SharedTracker::new();
    for (i, (e1, e2)) in t1.iter().zip(t2).enumerate() {
        if !match_events(e1, e2) {
            return Some(format!("event {i}: events do not match"));
        }
        if !valren(ren, e1.value(), e2.value()) {
            return Some(format!(
                "event {i}: values {} and {} are unrelated",
                e1.value(),
                e2.value()
            ));
        }
        s1.observe(e1);
        s2.observe(e2);
        if rename_locs(ren, &s1.shared).as_ref() != Some(&s2.shared) {
            return Some(format!(
                "event {i}: shared locations {:?} and {:?} do not correspond",
                s1.shared, s2.shared
            ));
        }
        if !mem_related(ren, e1.mem(), e2.mem(), &s1.shared) {
            return Some(format!("event {i}: shared memories are unrelated"));
        }
    }
    None
}

pub fn trace_related(ren: &Renaming, t1: &[Event], t2: &[Event]) -> bool {
    trace_mismatch(ren, t1, t2).is_none()
}

/// Searches constant shifts by increasing magnitude.
pub fn find_shift(t1: &[Event], t2: &[Event], range: i64) -> Option<Renaming> {
    (0..=range)
        .flat_map(|k| if k == 0 { vec![0] } else { vec![k, -k] })
        .map(|k| {
            if k == 0 {
                Renaming::Identity
            } else {
                Renaming::Shift(k)
            }
        })
        .find(|r| trace_related(r, t1, t2))
}

/// The part of a machine state the memory relations look at.
#[derive(Clone, Copy, Debug)]
pub struct StateView<'a> {
    pub mem: &'a Memory,
    pub cur: CompId,
    /// Number of pending cross-component calls.
    pub depth: usize,
    pub com: Value,
}

/// Arguments shared by the recomposition relations: run 1 contributes the
/// program part, run 2 the context, and `ren1`/`ren2` map the base runs'
/// blocks to the recomposed run's.
#[derive(Clone, Debug)]
pub struct RelParams {
    pub part: BTreeSet<CompId>,
    pub context: BTreeSet<CompId>,
    pub ren1: Renaming,
    pub ren2: Renaming,
    pub shared12: BTreeSet<Loc>,
    pub shared1: BTreeSet<Loc>,
    pub shared2: BTreeSet<Loc>,
}

impl RelParams {
    pub fn new(
        part: BTreeSet<CompId>,
        context: BTreeSet<CompId>,
        ren1: Renaming,
        ren2: Renaming,
    ) -> RelParams {
        RelParams {
            part,
            context,
            ren1,
            ren2,
            shared12: BTreeSet::new(),
            shared1: BTreeSet::new(),
            shared2: BTreeSet::new(),
        }
    }

    /// Exchanges the roles of the program part and the context.
    pub fn swap(&self) -> RelParams {
        RelParams {
            part: self.context.clone(),
            context: self.part.clone(),
            ren1: self.ren2.clone(),
            ren2: self.ren1.clone(),
            shared12: self.shared12.clone(),
            shared1: self.shared2.clone(),
            shared2: self.shared1.clone(),
        }
    }

    pub fn in_part(&self, s: &StateView) -> bool {
        self.part.contains(&s.cur)
    }
}

/// The part's whole memory and all shared memory relate.
pub fn mem_rel_exec(
    ren: &Renaming,
    part: &BTreeSet<CompId>,
    shared_base: &BTreeSet<Loc>,
    shared_rec: &BTreeSet<Loc>,
    m_base: &Memory,
    m_rec: &Memory,
) -> bool {
    related_memories(ren, &m_base.proj_part(part), &m_rec.proj_part(part))
        && rename_locs(ren, shared_base).as_ref() == Some(shared_rec)
        && mem_related(ren, m_base, m_rec, shared_base)
}

/// Only the part's private memory relates.
pub fn mem_rel_not_exec(
    ren: &Renaming,
    part: &BTreeSet<CompId>,
    shared_base: &BTreeSet<Loc>,
    shared_rec: &BTreeSet<Loc>,
    m_base: &Memory,
    m_rec: &Memory,
) -> bool {
    let private = |m: &Memory, shared: &BTreeSet<Loc>| {
        m.filter_blocks(|c, b| part.contains(&c) && !shared.contains(&(c, b)))
    };
    related_memories(
        ren,
        &private(m_base, shared_base),
        &private(m_rec, shared_rec),
    )
}

pub fn mem_rel_tt(p: &RelParams, s12: &StateView, s1: &StateView, s2: &StateView) -> bool {
    let exec1 = || mem_rel_exec(&p.ren1, &p.part, &p.shared1, &p.shared12, s1.mem, s12.mem);
    let exec2 = || {
        mem_rel_exec(
            &p.ren2,
            &p.context,
            &p.shared2,
            &p.shared12,
            s2.mem,
            s12.mem,
        )
    };
    let not1 = || mem_rel_not_exec(&p.ren1, &p.part, &p.shared1, &p.shared12, s1.mem, s12.mem);
    let not2 = || {
        mem_rel_not_exec(
            &p.ren2,
            &p.context,
            &p.shared2,
            &p.shared12,
            s2.mem,
            s12.mem,
        )
    };
    if p.in_part(s12) {
        exec1() && not2()
    } else {
        exec2() && not1()
    }
}

pub fn mem_rel_border(p: &RelParams, s12: &StateView, s1: &StateView, s2: &StateView) -> bool {
    mem_rel_exec(&p.ren1, &p.part, &p.shared1, &p.shared12, s1.mem, s12.mem)
        && mem_rel_exec(
            &p.ren2,
            &p.context,
            &p.shared2,
            &p.shared12,
            s2.mem,
            s12.mem,
        )
}

/// Memory relation plus the control state: all three runs are on the same
/// side with the same number of pending calls.
pub fn state_rel_tt(p: &RelParams, s12: &StateView, s1: &StateView, s2: &StateView) -> bool {
    let side = p.in_part(s12);
    side == p.in_part(s1)
        && side == p.in_part(s2)
        && s12.depth == s1.depth
        && s12.depth == s2.depth
        && mem_rel_tt(p, s12, s1, s2)
}

/// Border states additionally agree on the value that just crossed.
pub fn state_rel_border(p: &RelParams, s12: &StateView, s1: &StateView, s2: &StateView) -> bool {
    state_rel_tt(p, s12, s1, s2)
        && mem_rel_border(p, s12, s1, s2)
        && valren(&p.ren1, s1.com, s12.com)
        && valren(&p.ren2, s2.com, s12.com)
}

pub fn rel_symmetry_check(p: &RelParams, s12: &StateView, s1: &StateView, s2: &StateView) -> bool {
    mem_rel_tt(p, s12, s1, s2) == mem_rel_tt(&p.swap(), s12, s2, s1)
}

/// The relation of prior work: the recomposed memory is literally the union
/// of the retained halves.
pub fn mem_rel_naive(p: &RelParams, s12: &StateView, s1: &StateView, s2: &StateView) -> bool {
    s12.mem.same_contents(
        &s1.mem
            .proj_part(&p.part)
            .union(&s2.mem.proj_part(&p.context)),
    )
}

/// A relation aware only of which side executes.
pub fn mem_rel_pc(p: &RelParams, s12: &StateView, s1: &StateView, s2: &StateView) -> bool {
    if p.in_part(s12) {
        related_memories(
            &p.ren1,
            &s1.mem.proj_part(&p.part),
            &s12.mem.proj_part(&p.part),
        )
    } else {
        related_memories(
            &p.ren2,
            &s2.mem.proj_part(&p.context),
            &s12.mem.proj_part(&p.context),
        )
    }
}
