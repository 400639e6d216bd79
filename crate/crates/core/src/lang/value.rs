use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use super::ast::{ExprRef, Param};
use super::eval::{Env, Thunk};
use crate::store_path::StorePath;

/// What a string depends on: an output of some derivation, or a source
/// object already in the store.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StrCtx {
    Output { drv: StorePath, output: String },
    Source(StorePath),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Str {
    pub text: String,
    pub ctx: BTreeSet<StrCtx>,
}

impl Str {
    pub fn plain(text: impl Into<String>) -> Self {
        Str {
            text: text.into(),
            ctx: BTreeSet::new(),
        }
    }
}

pub type Attrs = BTreeMap<String, Thunk>;

pub struct Closure {
    pub param: Param,
    pub body: ExprRef,
    pub env: Arc<Env>,
}

#[derive(Clone)]
pub struct PrimOp {
    pub name: &'static str,
    pub arity: usize,
    pub args: Vec<Thunk>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DerivationValue {
    pub drv_path: StorePath,
    pub outputs: BTreeMap<String, StorePath>,
    /// Output this value stands for when coerced to a string.
    pub selected: String,
    pub attrs: Arc<AttrsEq>,
}

impl DerivationValue {
    pub fn selected_path(&self) -> &StorePath {
        &self.outputs[&self.selected]
    }
}

/// The attribute set a derivation was created from. Compared by identity.
pub struct AttrsEq(pub Attrs);

impl PartialEq for AttrsEq {
    fn eq(&self, other: &Self) -> bool {
        std::ptr::eq(self, other)
    }
}

impl Eq for AttrsEq {}

impl fmt::Debug for AttrsEq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.0.keys()).finish()
    }
}

#[derive(Clone)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Str(Arc<Str>),
    List(Arc<Vec<Thunk>>),
    Attrs(Arc<Attrs>),
    Closure(Arc<Closure>),
    PrimOp(Arc<PrimOp>),
    Derivation(Arc<DerivationValue>),
}

impl Value {
    pub fn str(text: impl Into<String>) -> Value {
        Value::Str(Arc::new(Str::plain(text)))
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Null => "null",
            Value::Bool(_) => "a Boolean",
            Value::Int(_) => "an integer",
            Value::Str(_) => "a string",
            Value::List(_) => "a list",
            Value::Attrs(_) => "an attribute set",
            Value::Closure(_) | Value::PrimOp(_) => "a function",
            Value::Derivation(_) => "a derivation",
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(&s.text),
            _ => None,
        }
    }

    pub fn as_derivation(&self) -> Option<&DerivationValue> {
        match self {
            Value::Derivation(d) => Some(d),
            _ => None,
        }
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => f.write_str("null"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(n) => write!(f, "{n}"),
            Value::Str(s) => write!(f, "{:?}", s.text),
            Value::List(l) => write!(f, "<list of {}>", l.len()),
            Value::Attrs(a) => f.debug_set().entries(a.keys()).finish(),
            Value::Closure(_) => f.write_str("<lambda>"),
            Value::PrimOp(p) => write!(f, "<primop {}>", p.name),
            Value::Derivation(d) => write!(f, "<derivation {}>", d.drv_path),
        }
    }
}
