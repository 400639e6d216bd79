//! The recipe language: a small, lazy, Nix-flavoured expression language
//! whose evaluation produces derivations.

pub mod ast;
mod builtins;
mod eval;
pub mod jobs;
mod lexer;
mod parser;
mod value;

use thiserror::Error;

pub use ast::{Expr, Pos};
pub use eval::{EvalConfig, EvalError, Evaluator, IMPURE_BUILTINS};
pub use jobs::{eval_job_set, job_display_name, parse_job_name, EvalTrace, Job, JobNameError, JobSetError};
pub use parser::parse;
pub use value::{DerivationValue, StrCtx, Value};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("syntax error at {pos}: expected {expected}")]
pub struct SyntaxError {
    pub pos: Pos,
    pub expected: String,
}
