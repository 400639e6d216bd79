use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pos {
    pub line: u32,
    pub col: u32,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    pub kind: ExprKind,
    pub pos: Pos,
}

pub type ExprRef = Arc<Expr>;

#[derive(Debug, Clone, PartialEq)]
pub enum StrPart {
    Lit(String),
    Interp(ExprRef),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Concat,
    Update,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    And,
    Or,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Binding {
    Value(ExprRef),
    /// `inherit name;` or `inherit (from) name;`
    Inherit(Option<ExprRef>),
    /// Built from `a.b = ...;` bindings.
    Nested(Bindings),
}

pub type Bindings = BTreeMap<String, Binding>;

#[derive(Debug, Clone, PartialEq)]
pub struct Formal {
    pub name: String,
    pub default: Option<ExprRef>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Param {
    Ident(String),
    Pattern {
        formals: Vec<Formal>,
        ellipsis: bool,
        bind: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprKind {
    Str(Vec<StrPart>),
    Int(i64),
    Bool(bool),
    Null,
    List(Vec<ExprRef>),
    AttrSet {
        bindings: Bindings,
        recursive: bool,
    },
    Lambda {
        param: Param,
        body: ExprRef,
    },
    Apply {
        func: ExprRef,
        arg: ExprRef,
    },
    Select {
        expr: ExprRef,
        path: Vec<String>,
        default: Option<ExprRef>,
    },
    HasAttr {
        expr: ExprRef,
        path: Vec<String>,
    },
    LetIn {
        bindings: Bindings,
        body: ExprRef,
    },
    If {
        cond: ExprRef,
        then: ExprRef,
        otherwise: ExprRef,
    },
    Ident(String),
    BuiltinRef(String),
    BinOp {
        op: BinOp,
        lhs: ExprRef,
        rhs: ExprRef,
    },
    Not(ExprRef),
    Neg(ExprRef),
}
