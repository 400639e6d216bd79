//! Call-by-need evaluation.
//!
//! Every lazily evaluated value is a [`Thunk`]: a cell that is forced at most
//! once, even when several evaluation threads demand it concurrently. A thread
//! that finds a thunk under evaluation by another thread waits for it; a
//! global waits-for graph turns cross-thread cycles into infinite-recursion
//! errors instead of deadlocks.
//!
//! Impurity is tracked per thunk: each forcing records which impure builtins
//! were reached, and a finished thunk replays those flags to every later
//! consumer.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::thread::{self, ThreadId};

use thiserror::Error;

use super::ast::{BinOp, Binding, Bindings, Expr, ExprKind, ExprRef, Param, Pos, StrPart};
use super::builtins;
use super::value::{Closure, DerivationValue, PrimOp, Str, StrCtx, Value};
use crate::archive::Tree;
use crate::derivation::{Derivation, DrvLookup, HashModuloCache};
use crate::store::Store;
use crate::store_path::StorePath;

pub const IMPURE_BUILTINS: [&str; 2] = ["sysVersion", "inShell"];
pub(crate) const IMPURE_SYS_VERSION: u8 = 1;
pub(crate) const IMPURE_IN_SHELL: u8 = 2;

pub(crate) fn impure_names(flags: u8) -> BTreeSet<String> {
    IMPURE_BUILTINS
        .iter()
        .enumerate()
        .filter(|(i, _)| flags & (1 << i) != 0)
        .map(|(_, n)| n.to_string())
        .collect()
}

/// Values supplied for impure builtins, and evaluation parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalConfig {
    pub sys_version: String,
    pub in_shell: bool,
    pub platform: String,
    pub max_parallel: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sys_version: "2.6".into(),
            in_shell: false,
            platform: "x86_64-linux".into(),
            max_parallel: 4,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub struct EvalError {
    pub pos: Option<Pos>,
    pub message: String,
}

impl EvalError {
    pub(crate) fn at(pos: Pos, message: impl Into<String>) -> Self {
        EvalError {
            pos: Some(pos),
            message: message.into(),
        }
    }

    pub(crate) fn msg(message: impl Into<String>) -> Self {
        EvalError {
            pos: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.pos {
            Some(p) => write!(f, "{p}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

pub type EvalResult = Result<Value, EvalError>;

// ---- environments ----

pub struct Env {
    vars: OnceLock<HashMap<String, Thunk>>,
    parent: Option<Arc<Env>>,
}

impl Env {
    pub(crate) fn root() -> Arc<Env> {
        Arc::new(Env {
            vars: OnceLock::from(HashMap::new()),
            parent: None,
        })
    }

    fn child(parent: &Arc<Env>, vars: HashMap<String, Thunk>) -> Arc<Env> {
        Arc::new(Env {
            vars: OnceLock::from(vars),
            parent: Some(parent.clone()),
        })
    }

    /// An environment whose variables are filled in after creation, so that
    /// they can refer to each other.
    fn recursive(parent: &Arc<Env>) -> Arc<Env> {
        Arc::new(Env {
            vars: OnceLock::new(),
            parent: Some(parent.clone()),
        })
    }

    fn fill(&self, vars: HashMap<String, Thunk>) {
        let _ = self.vars.set(vars);
    }

    fn lookup(&self, name: &str) -> Option<Thunk> {
        let mut env = self;
        loop {
            if let Some(t) = env.vars.get().and_then(|v| v.get(name)) {
                return Some(t.clone());
            }
            env = env.parent.as_deref()?;
        }
    }
}

// ---- thunks ----

pub type Thunk = Arc<ThunkCell>;

pub struct ThunkCell {
    state: Mutex<State>,
    done: Condvar,
}

enum State {
    Pending(Pending),
    Forcing(ThreadId),
    Done(EvalResult, u8),
}

enum Pending {
    Expr(ExprRef, Arc<Env>),
    Apply(Thunk, Thunk, Pos),
}

fn cell(state: State) -> Thunk {
    Arc::new(ThunkCell {
        state: Mutex::new(state),
        done: Condvar::new(),
    })
}

pub fn value_thunk(v: Value) -> Thunk {
    cell(State::Done(Ok(v), 0))
}

pub(crate) fn expr_thunk(e: &ExprRef, env: &Arc<Env>) -> Thunk {
    match &e.kind {
        ExprKind::Int(n) => return value_thunk(Value::Int(*n)),
        ExprKind::Bool(b) => return value_thunk(Value::Bool(*b)),
        ExprKind::Null => return value_thunk(Value::Null),
        ExprKind::Ident(name) => {
            if let Some(t) = env.lookup(name) {
                return t;
            }
        }
        _ => {}
    }
    cell(State::Pending(Pending::Expr(e.clone(), env.clone())))
}

pub(crate) fn apply_thunk(f: Thunk, arg: Thunk, pos: Pos) -> Thunk {
    cell(State::Pending(Pending::Apply(f, arg, pos)))
}

fn thunk_id(t: &Thunk) -> usize {
    Arc::as_ptr(t) as usize
}

/// waiter -> (thread it waits for, thunk it waits on)
fn waits_for() -> &'static Mutex<HashMap<ThreadId, (ThreadId, usize)>> {
    static GRAPH: OnceLock<Mutex<HashMap<ThreadId, (ThreadId, usize)>>> = OnceLock::new();
    GRAPH.get_or_init(Default::default)
}

thread_local! {
    static IMPURITY: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

pub(crate) fn impurity_push() {
    IMPURITY.with(|s| s.borrow_mut().push(0));
}

/// Pop the current frame, folding its flags into the enclosing one.
pub(crate) fn impurity_pop() -> u8 {
    IMPURITY.with(|s| {
        let mut s = s.borrow_mut();
        let flags = s.pop().unwrap_or(0);
        if let Some(top) = s.last_mut() {
            *top |= flags;
        }
        flags
    })
}

pub(crate) fn impurity_mark(flags: u8) {
    if flags == 0 {
        return;
    }
    IMPURITY.with(|s| {
        if let Some(top) = s.borrow_mut().last_mut() {
            *top |= flags;
        }
    });
}

fn infinite_recursion() -> EvalError {
    EvalError::msg("infinite recursion encountered")
}

pub(crate) fn force(ctx: &Ctx, t: &Thunk) -> EvalResult {
    let me = thread::current().id();
    let id = thunk_id(t);
    let mut st = t.state.lock().expect("thunk lock poisoned");
    let pending = loop {
        match &*st {
            State::Done(r, flags) => {
                impurity_mark(*flags);
                return r.clone();
            }
            State::Forcing(owner) if *owner == me => return Err(infinite_recursion()),
            State::Forcing(owner) => {
                let owner = *owner;
                {
                    let mut graph = waits_for().lock().expect("graph lock poisoned");
                    let mut cur = owner;
                    while let Some((next, _)) = graph.get(&cur) {
                        if *next == me {
                            graph.remove(&me);
                            return Err(infinite_recursion());
                        }
                        cur = *next;
                    }
                    graph.insert(me, (owner, id));
                }
                st = t.done.wait(st).expect("thunk lock poisoned");
            }
            State::Pending(_) => match std::mem::replace(&mut *st, State::Forcing(me)) {
                State::Pending(p) => break p,
                _ => unreachable!(),
            },
        }
    };
    drop(st);

    impurity_push();
    let result = match pending {
        Pending::Expr(e, env) => eval(ctx, &e, &env),
        Pending::Apply(f, arg, pos) => force(ctx, &f).and_then(|f| apply(ctx, f, arg, pos)),
    };
    let flags = impurity_pop();

    let mut st = t.state.lock().expect("thunk lock poisoned");
    *st = State::Done(result.clone(), flags);
    waits_for()
        .lock()
        .expect("graph lock poisoned")
        .retain(|_, (_, waited)| *waited != id);
    t.done.notify_all();
    result
}

// ---- evaluation context ----

pub(crate) struct Ctx {
    pub config: EvalConfig,
    pub store: Arc<Store>,
    pub drvs: Mutex<HashMap<StorePath, Arc<Derivation>>>,
    pub modulo: HashModuloCache,
    pub bootstrap: StorePath,
}

impl DrvLookup for Ctx {
    fn lookup_drv(&self, path: &StorePath) -> Option<Arc<Derivation>> {
        if let Some(d) = self.drvs.lock().expect("drv map poisoned").get(path) {
            return Some(d.clone());
        }
        self.store.lookup_drv(path)
    }
}

/// Host tools made available to builders, as a store object of symlinks.
pub const BOOTSTRAP_TOOLS: [&str; 22] = [
    "cat", "chmod", "cp", "cut", "env", "grep", "head", "ln", "ls", "mkdir", "mv", "od", "rm", "sed", "sh", "sleep",
    "sort", "tail", "touch", "tr", "uname", "wc",
];

pub fn bootstrap_tools_tree() -> Tree {
    Tree::dir([(
        "bin",
        Tree::dir(BOOTSTRAP_TOOLS.iter().map(|t| (*t, Tree::symlink(format!("/bin/{t}"))))),
    )])
}

/// A handle for evaluating recipe code against a store.
#[derive(Clone)]
pub struct Evaluator {
    pub(crate) ctx: Arc<Ctx>,
}

impl Evaluator {
    pub fn new(store: Arc<Store>, config: EvalConfig) -> Result<Self, EvalError> {
        let bootstrap = store
            .add_tree("bootstrap-tools", &bootstrap_tools_tree())
            .map_err(|e| EvalError::msg(format!("cannot install bootstrap tools: {e}")))?;
        Ok(Evaluator {
            ctx: Arc::new(Ctx {
                config,
                store,
                drvs: Mutex::new(HashMap::new()),
                modulo: HashModuloCache::new(),
                bootstrap,
            }),
        })
    }

    pub fn config(&self) -> &EvalConfig {
        &self.ctx.config
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.ctx.store
    }

    pub fn bootstrap_tools(&self) -> &StorePath {
        &self.ctx.bootstrap
    }

    /// Evaluate `expr` to weak head normal form with `scope` bound, returning
    /// the impure builtins it reached.
    pub fn eval_expr(
        &self,
        expr: &Expr,
        scope: &BTreeMap<String, Value>,
    ) -> Result<(Value, BTreeSet<String>), EvalError> {
        let vars = scope.iter().map(|(k, v)| (k.clone(), value_thunk(v.clone()))).collect();
        let env = Env::child(&Env::root(), vars);
        impurity_push();
        let v = eval(&self.ctx, &Arc::new(expr.clone()), &env);
        let flags = impurity_pop();
        Ok((v?, impure_names(flags)))
    }

    /// Parse and evaluate a recipe file's text. A top-level function taking
    /// a set pattern is called with an empty set.
    pub fn eval_source(&self, source: &str) -> Result<(Value, BTreeSet<String>), EvalError> {
        let expr = super::parse(source).map_err(|e| EvalError::at(e.pos, format!("expected {}", e.expected)))?;
        impurity_push();
        let v = self.eval_root(&Arc::new(expr));
        let flags = impurity_pop();
        Ok((v?, impure_names(flags)))
    }

    pub(crate) fn eval_root(&self, expr: &ExprRef) -> EvalResult {
        let v = eval(&self.ctx, expr, &Env::root())?;
        match &v {
            Value::Closure(c) if matches!(c.param, Param::Pattern { .. }) => apply(
                &self.ctx,
                v.clone(),
                value_thunk(Value::Attrs(Arc::new(BTreeMap::new()))),
                expr.pos,
            ),
            _ => Ok(v),
        }
    }

    pub fn force(&self, t: &Thunk) -> EvalResult {
        force(&self.ctx, t)
    }

    /// Select `name` from an attribute set or derivation and force it.
    pub fn select(&self, v: &Value, name: &str) -> Result<Option<Value>, EvalError> {
        match attr_of(&self.ctx, v, name) {
            Some(Some(t)) => force(&self.ctx, &t).map(Some),
            _ => Ok(None),
        }
    }

    /// Fully evaluate and coerce to a string.
    pub fn coerce_to_string(&self, v: &Value) -> Result<String, EvalError> {
        Ok(coerce_to_str(&self.ctx, v, Pos::default())?.text)
    }
}

// ---- the evaluator proper ----

fn synthetic(kind: ExprKind, pos: Pos) -> ExprRef {
    Arc::new(Expr { kind, pos })
}

/// Thunks for a binding group. `scope` is where values are evaluated,
/// `inherit_scope` where plain `inherit x;` looks `x` up.
fn binding_thunks(bindings: &Bindings, scope: &Arc<Env>, inherit_scope: &Arc<Env>, pos: Pos) -> HashMap<String, Thunk> {
    bindings
        .iter()
        .map(|(name, b)| {
            let t = match b {
                Binding::Value(e) => expr_thunk(e, scope),
                Binding::Inherit(None) => expr_thunk(&synthetic(ExprKind::Ident(name.clone()), pos), inherit_scope),
                Binding::Inherit(Some(from)) => expr_thunk(
                    &synthetic(
                        ExprKind::Select {
                            expr: from.clone(),
                            path: vec![name.clone()],
                            default: None,
                        },
                        pos,
                    ),
                    scope,
                ),
                Binding::Nested(inner) => expr_thunk(
                    &synthetic(
                        ExprKind::AttrSet {
                            bindings: inner.clone(),
                            recursive: false,
                        },
                        pos,
                    ),
                    scope,
                ),
            };
            (name.clone(), t)
        })
        .collect()
}

pub(crate) fn eval(ctx: &Ctx, e: &ExprRef, env: &Arc<Env>) -> EvalResult {
    let pos = e.pos;
    match &e.kind {
        ExprKind::Str(parts) => {
            if let [StrPart::Lit(s)] = parts.as_slice() {
                return Ok(Value::str(s.clone()));
            }
            let mut out = Str::default();
            for part in parts {
                match part {
                    StrPart::Lit(s) => out.text.push_str(s),
                    StrPart::Interp(inner) => {
                        let v = eval(ctx, inner, env)?;
                        let s = coerce_to_str(ctx, &v, inner.pos)?;
                        out.text.push_str(&s.text);
                        out.ctx.extend(s.ctx);
                    }
                }
            }
            Ok(Value::Str(Arc::new(out)))
        }
        ExprKind::Int(n) => Ok(Value::Int(*n)),
        ExprKind::Bool(b) => Ok(Value::Bool(*b)),
        ExprKind::Null => Ok(Value::Null),
        ExprKind::List(items) => Ok(Value::List(Arc::new(
            items.iter().map(|i| expr_thunk(i, env)).collect(),
        ))),
        ExprKind::AttrSet { bindings, recursive } => {
            if *recursive {
                let rec_env = Env::recursive(env);
                let vars = binding_thunks(bindings, &rec_env, env, pos);
                rec_env.fill(vars.clone());
                Ok(Value::Attrs(Arc::new(vars.into_iter().collect())))
            } else {
                let vars = binding_thunks(bindings, env, env, pos);
                Ok(Value::Attrs(Arc::new(vars.into_iter().collect())))
            }
        }
        ExprKind::LetIn { bindings, body } => {
            let rec_env = Env::recursive(env);
            let vars = binding_thunks(bindings, &rec_env, env, pos);
            rec_env.fill(vars);
            eval(ctx, body, &rec_env)
        }
        ExprKind::Lambda { param, body } => Ok(Value::Closure(Arc::new(Closure {
            param: param.clone(),
            body: body.clone(),
            env: env.clone(),
        }))),
        ExprKind::Apply { func, arg } => {
            let f = eval(ctx, func, env)?;
            apply(ctx, f, expr_thunk(arg, env), pos)
        }
        ExprKind::Select { expr, path, default } => {
            let mut v = eval(ctx, expr, env)?;
            for seg in path {
                match attr_of(ctx, &v, seg) {
                    Some(Some(t)) => v = force(ctx, &t)?,
                    missing => {
                        if let Some(d) = default {
                            return eval(ctx, d, env);
                        }
                        return Err(match missing {
                            None => EvalError::at(
                                pos,
                                format!(
                                    "value is {} while a set was expected (selecting `{seg}`)",
                                    v.type_name()
                                ),
                            ),
                            _ => EvalError::at(pos, format!("attribute `{seg}` missing")),
                        });
                    }
                }
            }
            Ok(v)
        }
        ExprKind::HasAttr { expr, path } => {
            let mut v = eval(ctx, expr, env)?;
            for seg in path {
                match attr_of(ctx, &v, seg) {
                    Some(Some(t)) => v = force(ctx, &t)?,
                    _ => return Ok(Value::Bool(false)),
                }
            }
            Ok(Value::Bool(true))
        }
        ExprKind::If { cond, then, otherwise } => match eval(ctx, cond, env)? {
            Value::Bool(true) => eval(ctx, then, env),
            Value::Bool(false) => eval(ctx, otherwise, env),
            other => Err(EvalError::at(
                cond.pos,
                format!("condition is {} while a Boolean was expected", other.type_name()),
            )),
        },
        ExprKind::Ident(name) => match env.lookup(name) {
            Some(t) => force(ctx, &t),
            None => builtins::global(ctx, name)
                .unwrap_or_else(|| Err(EvalError::at(pos, format!("undefined variable `{name}`")))),
        },
        ExprKind::BuiltinRef(name) => builtins::global(ctx, name)
            .unwrap_or_else(|| Err(EvalError::at(pos, format!("builtin `{name}` does not exist")))),
        ExprKind::BinOp { op, lhs, rhs } => binop(ctx, *op, lhs, rhs, env, pos),
        ExprKind::Not(inner) => match eval(ctx, inner, env)? {
            Value::Bool(b) => Ok(Value::Bool(!b)),
            other => Err(type_error(pos, "a Boolean", &other)),
        },
        ExprKind::Neg(inner) => match eval(ctx, inner, env)? {
            Value::Int(n) => n
                .checked_neg()
                .map(Value::Int)
                .ok_or_else(|| EvalError::at(pos, "integer overflow")),
            other => Err(type_error(pos, "an integer", &other)),
        },
    }
}

pub(crate) fn type_error(pos: Pos, expected: &str, got: &Value) -> EvalError {
    EvalError::at(
        pos,
        format!("value is {} while {expected} was expected", got.type_name()),
    )
}

/// `None` if `v` is not set-like, `Some(None)` if the attribute is absent.
pub(crate) fn attr_of(ctx: &Ctx, v: &Value, name: &str) -> Option<Option<Thunk>> {
    match v {
        Value::Attrs(a) => Some(a.get(name).cloned()),
        Value::Derivation(d) => Some(derivation_attr(ctx, d, name)),
        _ => None,
    }
}

fn derivation_attr(_ctx: &Ctx, d: &Arc<DerivationValue>, name: &str) -> Option<Thunk> {
    if d.outputs.contains_key(name) {
        let mut sel = (**d).clone();
        sel.selected = name.to_string();
        return Some(value_thunk(Value::Derivation(Arc::new(sel))));
    }
    let v = match name {
        "outPath" => Value::Str(Arc::new(derivation_string(d))),
        "drvPath" => Value::str(d.drv_path.to_string()),
        "type" => Value::str("derivation"),
        "outputName" => Value::str(d.selected.clone()),
        _ => return d.attrs.0.get(name).cloned(),
    };
    Some(value_thunk(v))
}

pub(crate) fn derivation_string(d: &DerivationValue) -> Str {
    Str {
        text: d.selected_path().to_string(),
        ctx: BTreeSet::from([StrCtx::Output {
            drv: d.drv_path.clone(),
            output: d.selected.clone(),
        }]),
    }
}

pub(crate) fn apply(ctx: &Ctx, f: Value, arg: Thunk, pos: Pos) -> EvalResult {
    match f {
        Value::Closure(c) => match &c.param {
            Param::Ident(name) => {
                let env = Env::child(&c.env, HashMap::from([(name.clone(), arg)]));
                eval(ctx, &c.body, &env)
            }
            Param::Pattern {
                formals,
                ellipsis,
                bind,
            } => {
                let attrs = match force(ctx, &arg)? {
                    Value::Attrs(a) => a,
                    other => return Err(type_error(pos, "an attribute set", &other)),
                };
                if !ellipsis {
                    if let Some(extra) = attrs.keys().find(|k| !formals.iter().any(|f| &f.name == *k)) {
                        return Err(EvalError::at(
                            pos,
                            format!("function called with unexpected argument `{extra}`"),
                        ));
                    }
                }
                let env = Env::recursive(&c.env);
                let mut vars = HashMap::new();
                for formal in formals {
                    let t = match (attrs.get(&formal.name), &formal.default) {
                        (Some(t), _) => t.clone(),
                        (None, Some(d)) => expr_thunk(d, &env),
                        (None, None) => {
                            return Err(EvalError::at(
                                pos,
                                format!("function called without required argument `{}`", formal.name),
                            ))
                        }
                    };
                    vars.insert(formal.name.clone(), t);
                }
                if let Some(b) = bind {
                    vars.insert(b.clone(), arg);
                }
                env.fill(vars);
                eval(ctx, &c.body, &env)
            }
        },
        Value::PrimOp(p) => {
            let mut args = p.args.clone();
            args.push(arg);
            if args.len() == p.arity {
                builtins::call(ctx, p.name, &args, pos)
            } else {
                Ok(Value::PrimOp(Arc::new(PrimOp {
                    name: p.name,
                    arity: p.arity,
                    args,
                })))
            }
        }
        other => Err(EvalError::at(
            pos,
            format!("attempt to call something which is {}", other.type_name()),
        )),
    }
}

/// String coercion used by interpolation, `toString` and derivation
/// attributes. Lists are joined with spaces.
pub(crate) fn coerce_to_str(ctx: &Ctx, v: &Value, pos: Pos) -> Result<Str, EvalError> {
    Ok(match v {
        Value::Str(s) => (**s).clone(),
        Value::Int(n) => Str::plain(n.to_string()),
        Value::Bool(true) => Str::plain("1"),
        Value::Bool(false) | Value::Null => Str::default(),
        Value::Derivation(d) => derivation_string(d),
        Value::List(items) => {
            let mut out = Str::default();
            for (i, t) in items.iter().enumerate() {
                let s = coerce_to_str(ctx, &force(ctx, t)?, pos)?;
                if i > 0 {
                    out.text.push(' ');
                }
                out.text.push_str(&s.text);
                out.ctx.extend(s.ctx);
            }
            out
        }
        other => {
            return Err(EvalError::at(
                pos,
                format!("cannot coerce {} to a string", other.type_name()),
            ))
        }
    })
}

fn binop(ctx: &Ctx, op: BinOp, lhs: &ExprRef, rhs: &ExprRef, env: &Arc<Env>, pos: Pos) -> EvalResult {
    let bool_of = |e: &ExprRef| match eval(ctx, e, env)? {
        Value::Bool(b) => Ok(b),
        other => Err(type_error(e.pos, "a Boolean", &other)),
    };
    match op {
        BinOp::And => return Ok(Value::Bool(bool_of(lhs)? && bool_of(rhs)?)),
        BinOp::Or => return Ok(Value::Bool(bool_of(lhs)? || bool_of(rhs)?)),
        _ => {}
    }
    let a = eval(ctx, lhs, env)?;
    let b = eval(ctx, rhs, env)?;
    let ints = |a: &Value, b: &Value| match (a, b) {
        (Value::Int(x), Value::Int(y)) => Ok((*x, *y)),
        (Value::Int(_), other) | (other, _) => Err(type_error(pos, "an integer", other)),
    };
    let overflow = || EvalError::at(pos, "integer overflow");
    match op {
        BinOp::Add => match (&a, &b) {
            (Value::Int(x), Value::Int(y)) => x.checked_add(*y).map(Value::Int).ok_or_else(overflow),
            (Value::Str(_), _) => {
                let mut s = coerce_to_str(ctx, &a, pos)?;
                let t = coerce_to_str(ctx, &b, pos)?;
                s.text.push_str(&t.text);
                s.ctx.extend(t.ctx);
                Ok(Value::Str(Arc::new(s)))
            }
            _ => Err(EvalError::at(
                pos,
                format!("cannot add {} to {}", b.type_name(), a.type_name()),
            )),
        },
        BinOp::Sub => {
            let (x, y) = ints(&a, &b)?;
            x.checked_sub(y).map(Value::Int).ok_or_else(overflow)
        }
        BinOp::Mul => {
            let (x, y) = ints(&a, &b)?;
            x.checked_mul(y).map(Value::Int).ok_or_else(overflow)
        }
        BinOp::Div => {
            let (x, y) = ints(&a, &b)?;
            if y == 0 {
                return Err(EvalError::at(pos, "division by zero"));
            }
            x.checked_div(y).map(Value::Int).ok_or_else(overflow)
        }
        BinOp::Concat => match (&a, &b) {
            (Value::List(x), Value::List(y)) => Ok(Value::List(Arc::new(x.iter().chain(y.iter()).cloned().collect()))),
            (Value::List(_), other) | (other, _) => Err(type_error(pos, "a list", other)),
        },
        BinOp::Update => match (&a, &b) {
            (Value::Attrs(x), Value::Attrs(y)) => {
                let mut merged = (**x).clone();
                merged.extend(y.iter().map(|(k, v)| (k.clone(), v.clone())));
                Ok(Value::Attrs(Arc::new(merged)))
            }
            (Value::Attrs(_), other) | (other, _) => Err(type_error(pos, "an attribute set", other)),
        },
        BinOp::Eq => Ok(Value::Bool(equal(ctx, &a, &b)?)),
        BinOp::Ne => Ok(Value::Bool(!equal(ctx, &a, &b)?)),
        BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
            let ord = match (&a, &b) {
                (Value::Int(x), Value::Int(y)) => x.cmp(y),
                (Value::Str(x), Value::Str(y)) => x.text.cmp(&y.text),
                _ => {
                    return Err(EvalError::at(
                        pos,
                        format!("cannot compare {} with {}", a.type_name(), b.type_name()),
                    ))
                }
            };
            Ok(Value::Bool(match op {
                BinOp::Lt => ord.is_lt(),
                BinOp::Le => ord.is_le(),
                BinOp::Gt => ord.is_gt(),
                _ => ord.is_ge(),
            }))
        }
        BinOp::And | BinOp::Or => unreachable!(),
    }
}

pub(crate) fn equal(ctx: &Ctx, a: &Value, b: &Value) -> Result<bool, EvalError> {
    Ok(match (a, b) {
        (Value::Null, Value::Null) => true,
        (Value::Bool(x), Value::Bool(y)) => x == y,
        (Value::Int(x), Value::Int(y)) => x == y,
        (Value::Str(x), Value::Str(y)) => x.text == y.text,
        (Value::Derivation(x), Value::Derivation(y)) => x.drv_path == y.drv_path && x.selected == y.selected,
        (Value::List(x), Value::List(y)) => {
            if x.len() != y.len() {
                return Ok(false);
            }
            for (p, q) in x.iter().zip(y.iter()) {
                if !equal(ctx, &force(ctx, p)?, &force(ctx, q)?)? {
                    return Ok(false);
                }
            }
            true
        }
        (Value::Attrs(x), Value::Attrs(y)) => {
            if !x.keys().eq(y.keys()) {
                return Ok(false);
            }
            for (p, q) in x.values().zip(y.values()) {
                if !equal(ctx, &force(ctx, p)?, &force(ctx, q)?)? {
                    return Ok(false);
                }
            }
            true
        }
        _ => false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn evaluator() -> (tempfile::TempDir, Evaluator) {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(Store::open(dir.path().join("store")).unwrap());
        let ev = Evaluator::new(store, EvalConfig::default()).unwrap();
        (dir, ev)
    }

    fn run(src: &str) -> EvalResult {
        let (_d, ev) = evaluator();
        super::super::jobs::with_big_stack(|| ev.eval_source(src).map(|(v, _)| v))
    }

    fn int(src: &str) -> i64 {
        match run(src).unwrap() {
            Value::Int(n) => n,
            other => panic!("{other:?}"),
        }
    }

    fn string(src: &str) -> String {
        run(src).unwrap().as_str().unwrap().to_string()
    }

    #[test]
    fn untaken_branch_is_never_forced() {
        assert_eq!(int("if true then 1 else 1 / 0"), 1);
        assert_eq!(int("let bad = throw \"boom\"; in 2"), 2);
    }

    #[test]
    fn sys_version_is_injected_and_recorded() {
        let (_d, ev) = evaluator();
        let (v, impure) = ev.eval_source(r#"let v = sysVersion; in "nano-${v}""#).unwrap();
        assert_eq!(v.as_str(), Some("nano-2.6"));
        assert_eq!(impure, BTreeSet::from(["sysVersion".to_string()]));

        let (_v, impure) = ev.eval_source("let v = sysVersion; in 1").unwrap();
        assert!(impure.is_empty());
    }

    #[test]
    fn builtins_attr_reaches_impure_values() {
        let (_d, ev) = evaluator();
        let (v, impure) = ev.eval_source("if builtins.inShell then 1 else 2").unwrap();
        assert!(matches!(v, Value::Int(2)));
        assert_eq!(impure, BTreeSet::from(["inShell".to_string()]));
    }

    #[test]
    fn let_bindings_are_shared_and_forced_once() {
        // `x` would be expensive to recompute; forcing it twice must reuse the result.
        let src = "let f = n: if n == 0 then 0 else 1 + f (n - 1); x = f 2000; in x + x";
        assert_eq!(int(src), 4000);
    }

    #[test]
    fn recursive_sets_and_patterns() {
        assert_eq!(int("rec { a = 1; b = a + 1; }.b"), 2);
        assert_eq!(int("({ a, b ? a * 10 }: b) { a = 4; }"), 40);
        assert_eq!(int("(args@{ a, ... }: args.c) { a = 1; c = 3; }"), 3);
        assert!(run("({ a }: a) { a = 1; b = 2; }")
            .unwrap_err()
            .message
            .contains("unexpected argument `b`"));
        assert!(run("({ a }: a) {}")
            .unwrap_err()
            .message
            .contains("required argument `a`"));
    }

    #[test]
    fn top_level_pattern_function_is_auto_called() {
        assert_eq!(int("{ x ? 5 }: x"), 5);
    }

    #[test]
    fn operators() {
        assert_eq!(int("2 + 3 * 4 - 10 / 5"), 12);
        assert_eq!(int("({ a = 1; } // { a = 2; }).a"), 2);
        assert_eq!(int("builtins.length ([ 1 2 ] ++ [ 3 ])"), 3);
        assert!(matches!(run("{ a.b = 1; } ? a.b").unwrap(), Value::Bool(true)));
        assert!(matches!(
            run("[ 1 { a = 2; } ] == [ 1 { a = 2; } ]").unwrap(),
            Value::Bool(true)
        ));
        assert!(matches!(run("\"a\" < \"b\" && !(1 > 2)").unwrap(), Value::Bool(true)));
        assert_eq!(int("{ a = 1; }.b or 7"), 7);
        assert_eq!(int("let s = { inherit x; }; x = 9; in s.x"), 9);
        assert_eq!(int("let s = { y = 4; }; t = { inherit (s) y; }; in t.y"), 4);
    }

    #[test]
    fn strings_and_coercion() {
        assert_eq!(string(r#"let n = 3; in "v${toString n}-${toString true}""#), "v3-1");
        assert_eq!(string(r#"toString [ "a" 1 null ]"#), "a 1 ");
        assert_eq!(
            string(r#"builtins.concatStringsSep "," (map (x: "x${x}") [ "1" "2" ])"#),
            "x1,x2"
        );
        assert_eq!(string("''\n  a\n    b\n''"), "a\n  b\n");
    }

    #[test]
    fn errors_carry_positions() {
        let err = run("let a = 1;\nin a + b").unwrap_err();
        assert_eq!(err.pos, Some(Pos { line: 2, col: 8 }));
        assert!(err.message.contains("undefined variable `b`"));
        let err = run("1 + \"a\"").unwrap_err();
        assert!(err.message.contains("cannot add"));
    }

    #[test]
    fn self_reference_is_infinite_recursion() {
        let err = run("let x = x + 1; in x").unwrap_err();
        assert!(err.message.contains("infinite recursion"));
    }

    #[test]
    fn concurrent_forcing_evaluates_shared_thunk_once() {
        let (_d, ev) = evaluator();
        let (v, _) = ev
            .eval_source(
                "let f = n: if n == 0 then 0 else 1 + f (n - 1); shared = f 3000; in \
                 { a = shared + 1; b = shared + 2; c = shared + 3; d = shared + 4; }",
            )
            .unwrap();
        let Value::Attrs(attrs) = v else { panic!() };
        let results: Vec<i64> = thread::scope(|s| {
            let handles: Vec<_> = attrs
                .values()
                .map(|t| {
                    let ev = &ev;
                    thread::Builder::new()
                        .stack_size(64 << 20)
                        .spawn_scoped(s, move || match ev.force(t).unwrap() {
                            Value::Int(n) => n,
                            _ => panic!(),
                        })
                        .unwrap()
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert_eq!(results, vec![3001, 3002, 3003, 3004]);
    }

    #[test]
    fn cross_thread_cycle_is_reported_not_deadlocked() {
        let (_d, ev) = evaluator();
        let (v, _) = ev
            .eval_source("let a = b + 1; b = a + 1; in { x = a; y = b; }")
            .unwrap();
        let Value::Attrs(attrs) = v else { panic!() };
        let errs: Vec<bool> = thread::scope(|s| {
            let hs: Vec<_> = attrs
                .values()
                .map(|t| {
                    let ev = &ev;
                    s.spawn(move || ev.force(t).is_err())
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert_eq!(errs, vec![true, true]);
    }
}
