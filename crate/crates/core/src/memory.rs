//! Block-based, component-partitioned memory shared by both languages.
//!
//! Every component owns a map from block ids to fixed-size cell arrays.
//! Block 0 is the static buffer, dynamic blocks are numbered 1, 2, ... per
//! component, and block -1 is reserved for the compiled runtime stack.
//! Blocks and maps are persistent, so cloning a [`Memory`] is cheap and
//! trace snapshots share structure with the live machine memory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub type CompId = usize;
pub type BlockId = i64;

/// The static buffer of every component.
pub const STATIC_BLOCK: BlockId = 0;
/// The reserved block holding a compiled component's runtime stack.
pub const STACK_BLOCK: BlockId = -1;

pub type Block = im::Vector<Value>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Perm {
    Data,
    Code,
}

impl Perm {
    pub fn as_str(self) -> &'static str {
        match self {
            Perm::Data => "data",
            Perm::Code => "code",
        }
    }

    pub fn parse(s: &str) -> Option<Perm> {
        match s {
            "data" | "DATA" => Some(Perm::Data),
            "code" | "CODE" => Some(Perm::Code),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pointer {
    pub perm: Perm,
    pub comp: CompId,
    pub block: BlockId,
    pub offset: i64,
}

impl Pointer {
    pub fn data(comp: CompId, block: BlockId, offset: i64) -> Pointer {
        Pointer {
            perm: Perm::Data,
            comp,
            block,
            offset,
        }
    }

    pub fn code(comp: CompId, block: BlockId, offset: i64) -> Pointer {
        Pointer {
            perm: Perm::Code,
            comp,
            block,
            offset,
        }
    }

    pub fn with_offset(self, offset: i64) -> Pointer {
        Pointer { offset, ..self }
    }

    pub fn same_block(&self, other: &Pointer) -> bool {
        self.perm == other.perm && self.comp == other.comp && self.block == other.block
    }
}

impl fmt::Display for Pointer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}({},{},{})",
            self.perm.as_str(),
            self.comp,
            self.block,
            self.offset
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Value {
    Int(i64),
    Ptr(Pointer),
    #[default]
    Error,
}

impl Value {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_ptr(&self) -> Option<Pointer> {
        match self {
            Value::Ptr(p) => Some(*p),
            _ => None,
        }
    }

    /// The (component, block) a data pointer designates.
    pub fn data_block(&self) -> Option<(CompId, BlockId)> {
        match self {
            Value::Ptr(p) if p.perm == Perm::Data => Some((p.comp, p.block)),
            _ => None,
        }
    }

    pub fn is_ptr(&self) -> bool {
        matches!(self, Value::Ptr(_))
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Ptr(p) => write!(f, "{p}"),
            Value::Error => write!(f, "error"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum TaggedValue {
    Int(i64),
    Ptr((String, CompId, BlockId, i64)),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ValueRepr {
    Tagged(TaggedValue),
    Word(String),
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let repr = match self {
            Value::Int(i) => ValueRepr::Tagged(TaggedValue::Int(*i)),
            Value::Ptr(p) => ValueRepr::Tagged(TaggedValue::Ptr((
                p.perm.as_str().to_string(),
                p.comp,
                p.block,
                p.offset,
            ))),
            Value::Error => ValueRepr::Word("error".to_string()),
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Value, D::Error> {
        match ValueRepr::deserialize(d)? {
            ValueRepr::Tagged(TaggedValue::Int(i)) => Ok(Value::Int(i)),
            ValueRepr::Tagged(TaggedValue::Ptr((perm, comp, block, offset))) => {
                let perm = Perm::parse(&perm)
                    .ok_or_else(|| D::Error::custom(format!("unknown permission {perm}")))?;
                Ok(Value::Ptr(Pointer {
                    perm,
                    comp,
                    block,
                    offset,
                }))
            }
            ValueRepr::Word(w) if w == "error" => Ok(Value::Error),
            ValueRepr::Word(w) => Err(D::Error::custom(format!("unknown value {w}"))),
        }
    }
}

/// Binary operators shared by both languages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Eq,
    Le,
}

impl BinOp {
    pub const ALL: [BinOp; 5] = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Eq, BinOp::Le];

    pub fn as_str(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Eq => "eq",
            BinOp::Le => "le",
        }
    }

    pub fn parse(s: &str) -> Option<BinOp> {
        BinOp::ALL.into_iter().find(|op| op.as_str() == s)
    }
}

/// Integer arithmetic wraps; pointer arithmetic only moves the offset.
/// `None` means no rule applies and the machine is stuck.
pub fn eval_binop(op: BinOp, a: Value, b: Value) -> Option<Value> {
    use Value::{Int, Ptr};
    match (op, a, b) {
        (BinOp::Add, Int(x), Int(y)) => Some(Int(x.wrapping_add(y))),
        (BinOp::Sub, Int(x), Int(y)) => Some(Int(x.wrapping_sub(y))),
        (BinOp::Mul, Int(x), Int(y)) => Some(Int(x.wrapping_mul(y))),
        (BinOp::Eq, Int(x), Int(y)) => Some(Int((x == y) as i64)),
        (BinOp::Le, Int(x), Int(y)) => Some(Int((x <= y) as i64)),
        (BinOp::Add, Ptr(p), Int(k)) => Some(Ptr(p.with_offset(p.offset.wrapping_add(k)))),
        (BinOp::Sub, Ptr(p), Int(k)) => Some(Ptr(p.with_offset(p.offset.wrapping_sub(k)))),
        (BinOp::Eq, Ptr(p), Ptr(q)) => Some(Int((p == q) as i64)),
        (BinOp::Sub, Ptr(p), Ptr(q)) if p.same_block(&q) => {
            Some(Int(p.offset.wrapping_sub(q.offset)))
        }
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemError {
    #[error("code pointer {0} cannot be dereferenced")]
    CodePointer(Pointer),
    #[error("component {0} has no memory")]
    UnknownComponent(CompId),
    #[error("block {block} of component {comp} is not allocated")]
    Unallocated { comp: CompId, block: BlockId },
    #[error(
        "offset {offset} is out of bounds for block {block} of component {comp} (size {size})"
    )]
    OutOfBounds {
        comp: CompId,
        block: BlockId,
        offset: i64,
        size: usize,
    },
    #[error("cannot allocate a block of size {0}")]
    BadSize(i64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentMemory {
    pub blocks: im::OrdMap<BlockId, Block>,
    pub next_dynamic: BlockId,
}

impl Default for ComponentMemory {
    fn default() -> Self {
        ComponentMemory {
            blocks: im::OrdMap::new(),
            next_dynamic: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Memory {
    pub comps: im::OrdMap<CompId, ComponentMemory>,
}

impl Memory {
    pub fn new() -> Memory {
        Memory::default()
    }

    /// Registers a component whose static block holds `cells`.
    pub fn add_component(&mut self, comp: CompId, cells: impl IntoIterator<Item = Value>) {
        let mut cm = ComponentMemory::default();
        cm.blocks.insert(STATIC_BLOCK, cells.into_iter().collect());
        self.comps.insert(comp, cm);
    }

    /// Installs a non-dynamic block (static or reserved) without touching the
    /// allocation counter.
    pub fn install_block(&mut self, comp: CompId, block: BlockId, cells: Block) {
        let cm = self.comps.entry(comp).or_default();
        cm.blocks.insert(block, cells);
    }

    pub fn has_comp(&self, comp: CompId) -> bool {
        self.comps.contains_key(&comp)
    }

    pub fn block(&self, comp: CompId, block: BlockId) -> Option<&Block> {
        self.comps.get(&comp)?.blocks.get(&block)
    }

    pub fn block_size(&self, comp: CompId, block: BlockId) -> Option<usize> {
        self.block(comp, block).map(|b| b.len())
    }

    /// All allocated locations as (component, block) pairs in canonical order.
    pub fn block_ids(&self) -> BTreeSet<(CompId, BlockId)> {
        self.comps
            .iter()
            .flat_map(|(c, cm)| cm.blocks.keys().map(move |b| (*c, *b)))
            .collect()
    }

    fn locate(&self, ptr: Pointer) -> Result<(&Block, usize), MemError> {
        if ptr.perm == Perm::Code {
            return Err(MemError::CodePointer(ptr));
        }
        let cm = self
            .comps
            .get(&ptr.comp)
            .ok_or(MemError::UnknownComponent(ptr.comp))?;
        let block = cm.blocks.get(&ptr.block).ok_or(MemError::Unallocated {
            comp: ptr.comp,
            block: ptr.block,
        })?;
        if ptr.offset < 0 || ptr.offset as usize >= block.len() {
            return Err(MemError::OutOfBounds {
                comp: ptr.comp,
                block: ptr.block,
                offset: ptr.offset,
                size: block.len(),
            });
        }
        Ok((block, ptr.offset as usize))
    }

    pub fn load(&self, ptr: Pointer) -> Result<Value, MemError> {
        let (block, idx) = self.locate(ptr)?;
        Ok(block[idx])
    }

    /// Overwrites an existing cell; never allocates.
    pub fn store(&mut self, ptr: Pointer, v: Value) -> Result<(), MemError> {
        let (_, idx) = self.locate(ptr)?;
        let cm = self.comps.get_mut(&ptr.comp).expect("located");
        let block = cm.blocks.get_mut(&ptr.block).expect("located");
        block.set(idx, v);
        Ok(())
    }

    /// Functional variant of [`Memory::store`].
    pub fn stored(&self, ptr: Pointer, v: Value) -> Result<Memory, MemError> {
        let mut m = self.clone();
        m.store(ptr, v)?;
        Ok(m)
    }

    /// Allocates a fresh block of `size` error cells in `comp`.
    pub fn alloc(&mut self, comp: CompId, size: i64) -> Result<Pointer, MemError> {
        if size <= 0 {
            return Err(MemError::BadSize(size));
        }
        let cm = self
            .comps
            .get_mut(&comp)
            .ok_or(MemError::UnknownComponent(comp))?;
        let id = cm.next_dynamic;
        cm.next_dynamic += 1;
        cm.blocks.insert(
            id,
            std::iter::repeat_n(Value::Error, size as usize).collect(),
        );
        Ok(Pointer::data(comp, id, 0))
    }

    pub fn proj_part(&self, comps: &BTreeSet<CompId>) -> Memory {
        Memory {
            comps: self
                .comps
                .iter()
                .filter(|(c, _)| comps.contains(c))
                .map(|(c, cm)| (*c, cm.clone()))
                .collect(),
        }
    }

    /// Keeps exactly the blocks satisfying `keep`.
    pub fn filter_blocks(&self, mut keep: impl FnMut(CompId, BlockId) -> bool) -> Memory {
        let mut out = Memory::new();
        for (c, cm) in self.comps.iter() {
            let blocks: im::OrdMap<BlockId, Block> = cm
                .blocks
                .iter()
                .filter(|(b, _)| keep(*c, **b))
                .map(|(b, cells)| (*b, cells.clone()))
                .collect();
            if !blocks.is_empty() {
                out.comps.insert(
                    *c,
                    ComponentMemory {
                        blocks,
                        next_dynamic: cm.next_dynamic,
                    },
                );
            }
        }
        out
    }

    /// Disjoint union; blocks of `other` win on overlap.
    pub fn union(&self, other: &Memory) -> Memory {
        let mut out = self.clone();
        for (c, cm) in other.comps.iter() {
            let entry = out.comps.entry(*c).or_default();
            for (b, cells) in cm.blocks.iter() {
                entry.blocks.insert(*b, cells.clone());
            }
            entry.next_dynamic = entry.next_dynamic.max(cm.next_dynamic);
        }
        out
    }

    /// Cheap identity test: true only if both share the same storage, which
    /// implies equal contents.
    pub fn ptr_eq(&self, other: &Memory) -> bool {
        self.comps.ptr_eq(&other.comps)
    }

    /// Compares contents only, ignoring allocation counters.
    pub fn same_contents(&self, other: &Memory) -> bool {
        let ids = self.block_ids();
        ids == other.block_ids()
            && ids
                .iter()
                .all(|(c, b)| self.block(*c, *b) == other.block(*c, *b))
    }

    /// Canonical serialization as a JSON value.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("memory serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct BlockRepr {
    size: usize,
    cells: Vec<Value>,
}

impl Serialize for Memory {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let repr: BTreeMap<String, BTreeMap<String, BlockRepr>> = self
            .comps
            .iter()
            .map(|(c, cm)| {
                let blocks = cm
                    .blocks
                    .iter()
                    .map(|(b, cells)| {
                        (
                            b.to_string(),
                            BlockRepr {
                                size: cells.len(),
                                cells: cells.iter().copied().collect(),
                            },
                        )
                    })
                    .collect();
                (c.to_string(), blocks)
            })
            .collect();
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Memory {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Memory, D::Error> {
        let repr = BTreeMap::<String, BTreeMap<String, BlockRepr>>::deserialize(d)?;
        let mut mem = Memory::new();
        for (c, blocks) in repr {
            let comp: CompId = c
                .parse()
                .map_err(|_| D::Error::custom(format!("bad component id {c}")))?;
            let mut cm = ComponentMemory::default();
            for (b, block) in blocks {
                let id: BlockId = b
                    .parse()
                    .map_err(|_| D::Error::custom(format!("bad block id {b}")))?;
                if block.size != block.cells.len() {
                    return Err(D::Error::custom(format!(
                        "block {c}:{b} size does not match its cells"
                    )));
                }
                cm.next_dynamic = cm.next_dynamic.max(id + 1);
                cm.blocks.insert(id, block.cells.into_iter().collect());
            }
            mem.comps.insert(comp, cm);
        }
        Ok(mem)
    }
}
