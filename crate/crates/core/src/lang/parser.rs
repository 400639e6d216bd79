//! Recursive-descent parser for recipe files.
//!
//! Operator precedence, loosest first: `||`, `&&`, `== !=`, `< <= > >=`,
//! `//` (right), `!`, `+ -`, `* /`, `++` (right), `?`, unary `-`,
//! application, selection.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::ast::{BinOp, Binding, Bindings, Expr, ExprKind, ExprRef, Formal, Param, Pos, StrPart};
use super::lexer::{tokenize, StrTok, Tok, Token};
use super::SyntaxError;

pub fn parse(source: &str) -> Result<Expr, SyntaxError> {
    let tokens = tokenize(source)?;
    let mut parser = Parser { tokens, i: 0 };
    let expr = parser.expr()?;
    parser.expect(&Tok::Eof)?;
    Ok(Arc::unwrap_or_clone(expr))
}

struct Parser {
    tokens: Vec<Token>,
    i: usize,
}

fn mk(kind: ExprKind, pos: Pos) -> ExprRef {
    Arc::new(Expr { kind, pos })
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.i].tok
    }

    fn peek_at(&self, n: usize) -> &Tok {
        let idx = (self.i + n).min(self.tokens.len() - 1);
        &self.tokens[idx].tok
    }

    fn pos(&self) -> Pos {
        self.tokens[self.i].pos
    }

    fn next(&mut self) -> Token {
        let t = self.tokens[self.i].clone();
        if self.i < self.tokens.len() - 1 {
            self.i += 1;
        }
        t
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek() == tok {
            self.next();
            true
        } else {
            false
        }
    }

    fn error<T>(&self, expected: &str) -> Result<T, SyntaxError> {
        Err(SyntaxError {
            pos: self.pos(),
            expected: format!("{expected}, found {}", self.peek().describe()),
        })
    }

    fn expect(&mut self, tok: &Tok) -> Result<(), SyntaxError> {
        if self.eat(tok) {
            Ok(())
        } else {
            self.error(&tok.describe())
        }
    }

    fn expr(&mut self) -> Result<ExprRef, SyntaxError> {
        let pos = self.pos();
        match self.peek() {
            Tok::Let => {
                self.next();
                let bindings = self.bindings(&Tok::In)?;
                self.expect(&Tok::In)?;
                let body = self.expr()?;
                Ok(mk(ExprKind::LetIn { bindings, body }, pos))
            }
            Tok::If => {
                self.next();
                let cond = self.expr()?;
                self.expect(&Tok::Then)?;
                let then = self.expr()?;
                self.expect(&Tok::Else)?;
                let otherwise = self.expr()?;
                Ok(mk(ExprKind::If { cond, then, otherwise }, pos))
            }
            Tok::Ident(_) if matches!(self.peek_at(1), Tok::Colon | Tok::At) => self.lambda(),
            Tok::LBrace if self.looks_like_pattern() => self.lambda(),
            _ => self.op_or(),
        }
    }

    /// After `{`, decide between a set pattern and an attribute set.
    fn looks_like_pattern(&self) -> bool {
        match (self.peek_at(1), self.peek_at(2)) {
            (Tok::RBrace, next) => matches!(next, Tok::Colon | Tok::At),
            (Tok::Ellipsis, _) => true,
            (Tok::Ident(_), next) => matches!(next, Tok::Comma | Tok::Question | Tok::RBrace),
            _ => false,
        }
    }

    fn lambda(&mut self) -> Result<ExprRef, SyntaxError> {
        let pos = self.pos();
        let param = if let Tok::Ident(name) = self.peek().clone() {
            self.next();
            if self.eat(&Tok::At) {
                let (formals, ellipsis) = self.formals()?;
                Param::Pattern {
                    formals,
                    ellipsis,
                    bind: Some(name),
                }
            } else {
                Param::Ident(name)
            }
        } else {
            let (formals, ellipsis) = self.formals()?;
            let bind = if self.eat(&Tok::At) {
                match self.next().tok {
                    Tok::Ident(n) => Some(n),
                    _ => return self.error("identifier after `@`"),
                }
            } else {
                None
            };
            Param::Pattern {
                formals,
                ellipsis,
                bind,
            }
        };
        self.expect(&Tok::Colon)?;
        let body = self.expr()?;
        Ok(mk(ExprKind::Lambda { param, body }, pos))
    }

    fn formals(&mut self) -> Result<(Vec<Formal>, bool), SyntaxError> {
        self.expect(&Tok::LBrace)?;
        let mut formals: Vec<Formal> = Vec::new();
        let mut ellipsis = false;
        loop {
            match self.peek().clone() {
                Tok::RBrace => {
                    self.next();
                    break;
                }
                Tok::Ellipsis => {
                    self.next();
                    ellipsis = true;
                    self.expect(&Tok::RBrace)?;
                    break;
                }
                Tok::Ident(name) => {
                    if formals.iter().any(|f| f.name == name) {
                        return self.error(&format!("a formal other than duplicate `{name}`"));
                    }
                    self.next();
                    let default = if self.eat(&Tok::Question) {
                        Some(self.expr()?)
                    } else {
                        None
                    };
                    formals.push(Formal { name, default });
                    if !self.eat(&Tok::Comma) {
                        self.expect(&Tok::RBrace)?;
                        break;
                    }
                }
                _ => return self.error("formal parameter name"),
            }
        }
        Ok((formals, ellipsis))
    }

    fn binary_left(
        &mut self,
        next: fn(&mut Self) -> Result<ExprRef, SyntaxError>,
        ops: &[(Tok, BinOp)],
    ) -> Result<ExprRef, SyntaxError> {
        let mut lhs = next(self)?;
        loop {
            let Some(op) = ops.iter().find(|(t, _)| t == self.peek()).map(|(_, o)| *o) else {
                return Ok(lhs);
            };
            let pos = self.pos();
            self.next();
            let rhs = next(self)?;
            lhs = mk(ExprKind::BinOp { op, lhs, rhs }, pos);
        }
    }

    fn binary_none(
        &mut self,
        next: fn(&mut Self) -> Result<ExprRef, SyntaxError>,
        ops: &[(Tok, BinOp)],
    ) -> Result<ExprRef, SyntaxError> {
        let lhs = next(self)?;
        let Some(op) = ops.iter().find(|(t, _)| t == self.peek()).map(|(_, o)| *o) else {
            return Ok(lhs);
        };
        let pos = self.pos();
        self.next();
        let rhs = next(self)?;
        Ok(mk(ExprKind::BinOp { op, lhs, rhs }, pos))
    }

    fn binary_right(
        &mut self,
        next: fn(&mut Self) -> Result<ExprRef, SyntaxError>,
        tok: Tok,
        op: BinOp,
    ) -> Result<ExprRef, SyntaxError> {
        let lhs = next(self)?;
        if self.peek() != &tok {
            return Ok(lhs);
        }
        let pos = self.pos();
        self.next();
        let rhs = self.binary_right(next, tok, op)?;
        Ok(mk(ExprKind::BinOp { op, lhs, rhs }, pos))
    }

    fn op_or(&mut self) -> Result<ExprRef, SyntaxError> {
        self.binary_left(Self::op_and, &[(Tok::OrOr, BinOp::Or)])
    }

    fn op_and(&mut self) -> Result<ExprRef, SyntaxError> {
        self.binary_left(Self::op_eq, &[(Tok::AndAnd, BinOp::And)])
    }

    fn op_eq(&mut self) -> Result<ExprRef, SyntaxError> {
        self.binary_none(Self::op_cmp, &[(Tok::EqEq, BinOp::Eq), (Tok::NotEq, BinOp::Ne)])
    }

    fn op_cmp(&mut self) -> Result<ExprRef, SyntaxError> {
        self.binary_none(
            Self::op_update,
            &[
                (Tok::Lt, BinOp::Lt),
                (Tok::Le, BinOp::Le),
                (Tok::Gt, BinOp::Gt),
                (Tok::Ge, BinOp::Ge),
            ],
        )
    }

    fn op_update(&mut self) -> Result<ExprRef, SyntaxError> {
        self.binary_right(Self::op_not, Tok::Update, BinOp::Update)
    }

    fn op_not(&mut self) -> Result<ExprRef, SyntaxError> {
        if self.peek() == &Tok::Bang {
            let pos = self.pos();
            self.next();
            let inner = self.op_not()?;
            return Ok(mk(ExprKind::Not(inner), pos));
        }
        self.op_add()
    }

    fn op_add(&mut self) -> Result<ExprRef, SyntaxError> {
        self.binary_left(Self::op_mul, &[(Tok::Plus, BinOp::Add), (Tok::Minus, BinOp::Sub)])
    }

    fn op_mul(&mut self) -> Result<ExprRef, SyntaxError> {
        self.binary_left(Self::op_concat, &[(Tok::Star, BinOp::Mul), (Tok::Slash, BinOp::Div)])
    }

    fn op_concat(&mut self) -> Result<ExprRef, SyntaxError> {
        self.binary_right(Self::op_has_attr, Tok::Concat, BinOp::Concat)
    }

    fn op_has_attr(&mut self) -> Result<ExprRef, SyntaxError> {
        let mut expr = self.op_neg()?;
        while self.peek() == &Tok::Question {
            let pos = self.pos();
            self.next();
            let path = self.attr_path()?;
            expr = mk(ExprKind::HasAttr { expr, path }, pos);
        }
        Ok(expr)
    }

    fn op_neg(&mut self) -> Result<ExprRef, SyntaxError> {
        if self.peek() == &Tok::Minus {
            let pos = self.pos();
            self.next();
            let inner = self.op_neg()?;
            return Ok(mk(ExprKind::Neg(inner), pos));
        }
        self.application()
    }

    fn starts_atom(&self) -> bool {
        matches!(
            self.peek(),
            Tok::Ident(_)
                | Tok::Int(_)
                | Tok::Str(_)
                | Tok::LParen
                | Tok::LBracket
                | Tok::LBrace
                | Tok::Rec
                | Tok::True
                | Tok::False
                | Tok::Null
        )
    }

    fn application(&mut self) -> Result<ExprRef, SyntaxError> {
        let mut func = self.select()?;
        while self.starts_atom() {
            let pos = self.pos();
            let arg = self.select()?;
            func = mk(ExprKind::Apply { func, arg }, pos);
        }
        Ok(func)
    }

    fn select(&mut self) -> Result<ExprRef, SyntaxError> {
        let pos = self.pos();
        let atom = self.atom()?;
        if self.peek() != &Tok::Dot {
            return Ok(atom);
        }
        self.next();
        let path = self.attr_path()?;
        if let (ExprKind::Ident(name), [single]) = (&atom.kind, path.as_slice()) {
            if name == "builtins" && self.peek() != &Tok::Or {
                return Ok(mk(ExprKind::BuiltinRef(single.clone()), pos));
            }
        }
        let default = if self.eat(&Tok::Or) { Some(self.select()?) } else { None };
        Ok(mk(
            ExprKind::Select {
                expr: atom,
                path,
                default,
            },
            pos,
        ))
    }

    fn attr_name(&mut self) -> Result<String, SyntaxError> {
        match self.peek().clone() {
            Tok::Ident(n) => {
                self.next();
                Ok(n)
            }
            // Keywords are valid attribute names after `.` and in bindings.
            Tok::Or => {
                self.next();
                Ok("or".into())
            }
            Tok::Str(parts) => match parts.as_slice() {
                [] => {
                    self.next();
                    Ok(String::new())
                }
                [StrTok::Lit(s)] => {
                    let s = s.clone();
                    self.next();
                    Ok(s)
                }
                _ => self.error("static attribute name (interpolated names are not supported)"),
            },
            _ => self.error("attribute name"),
        }
    }

    fn attr_path(&mut self) -> Result<Vec<String>, SyntaxError> {
        let mut path = vec![self.attr_name()?];
        while self.peek() == &Tok::Dot {
            self.next();
            path.push(self.attr_name()?);
        }
        Ok(path)
    }

    fn atom(&mut self) -> Result<ExprRef, SyntaxError> {
        let pos = self.pos();
        let tok = self.next();
        let kind = match tok.tok {
            Tok::Ident(name) => ExprKind::Ident(name),
            Tok::Int(n) => ExprKind::Int(n),
            Tok::True => ExprKind::Bool(true),
            Tok::False => ExprKind::Bool(false),
            Tok::Null => ExprKind::Null,
            Tok::Str(parts) => ExprKind::Str(self.string_parts(parts)?),
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect(&Tok::RParen)?;
                return Ok(inner);
            }
            Tok::LBracket => {
                let mut items = Vec::new();
                while self.peek() != &Tok::RBracket {
                    if self.peek() == &Tok::Eof {
                        return self.error("`]`");
                    }
                    items.push(self.select()?);
                }
                self.next();
                ExprKind::List(items)
            }
            Tok::LBrace => {
                let bindings = self.bindings(&Tok::RBrace)?;
                self.expect(&Tok::RBrace)?;
                ExprKind::AttrSet {
                    bindings,
                    recursive: false,
                }
            }
            Tok::Rec => {
                self.expect(&Tok::LBrace)?;
                let bindings = self.bindings(&Tok::RBrace)?;
                self.expect(&Tok::RBrace)?;
                ExprKind::AttrSet {
                    bindings,
                    recursive: true,
                }
            }
            _ => {
                self.i -= 1;
                return self.error("expression");
            }
        };
        Ok(mk(kind, pos))
    }

    fn string_parts(&mut self, parts: Vec<StrTok>) -> Result<Vec<StrPart>, SyntaxError> {
        parts
            .into_iter()
            .map(|p| match p {
                StrTok::Lit(s) => Ok(StrPart::Lit(s)),
                StrTok::Interp(mut tokens) => {
                    let end = tokens.last().map(|t| t.pos).unwrap_or(self.pos());
                    tokens.push(Token {
                        tok: Tok::Eof,
                        pos: end,
                    });
                    let mut sub = Parser { tokens, i: 0 };
                    let e = sub.expr()?;
                    sub.expect(&Tok::Eof)?;
                    Ok(StrPart::Interp(e))
                }
            })
            .collect()
    }

    fn bindings(&mut self, end: &Tok) -> Result<Bindings, SyntaxError> {
        let mut bindings: Bindings = BTreeMap::new();
        while self.peek() != end {
            let pos = self.pos();
            if self.eat(&Tok::Inherit) {
                let from = if self.eat(&Tok::LParen) {
                    let e = self.expr()?;
                    self.expect(&Tok::RParen)?;
                    Some(e)
                } else {
                    None
                };
                while self.peek() != &Tok::Semi {
                    let name = self.attr_name()?;
                    if bindings.contains_key(&name) {
                        return Err(duplicate(pos, &name));
                    }
                    bindings.insert(name, Binding::Inherit(from.clone()));
                }
                self.next();
                continue;
            }
            let path = self.attr_path()?;
            self.expect(&Tok::Assign)?;
            let value = self.expr()?;
            self.expect(&Tok::Semi)?;
            insert_path(&mut bindings, &path, value, pos)?;
        }
        Ok(bindings)
    }
}

fn duplicate(pos: Pos, name: &str) -> SyntaxError {
    SyntaxError {
        pos,
        expected: format!("unique attribute name (`{name}` is defined twice)"),
    }
}

fn insert_path(bindings: &mut Bindings, path: &[String], value: ExprRef, pos: Pos) -> Result<(), SyntaxError> {
    let (first, rest) = path.split_first().expect("attr path is non-empty");
    if rest.is_empty() {
        if bindings.contains_key(first) {
            return Err(duplicate(pos, first));
        }
        bindings.insert(first.clone(), Binding::Value(value));
        return Ok(());
    }
    match bindings
        .entry(first.clone())
        .or_insert_with(|| Binding::Nested(BTreeMap::new()))
    {
        Binding::Nested(inner) => insert_path(inner, rest, value, pos),
        _ => Err(duplicate(pos, first)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kind(src: &str) -> ExprKind {
        parse(src).unwrap().kind
    }

    #[test]
    fn set_pattern_header() {
        match kind("{ stdenv, fetchFile, ncurses }: stdenv") {
            ExprKind::Lambda {
                param:
                    Param::Pattern {
                        formals,
                        ellipsis,
                        bind,
                    },
                ..
            } => {
                let names: Vec<_> = formals.iter().map(|f| f.name.as_str()).collect();
                assert_eq!(names, ["stdenv", "fetchFile", "ncurses"]);
                assert!(!ellipsis);
                assert!(bind.is_none());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_set() {
        assert_eq!(
            kind("{}"),
            ExprKind::AttrSet {
                bindings: BTreeMap::new(),
                recursive: false
            }
        );
    }

    #[test]
    fn quoted_dotted_name() {
        match kind(r#"{ "b.c" = 1; }"#) {
            ExprKind::AttrSet { bindings, .. } => {
                assert_eq!(bindings.len(), 1);
                assert!(bindings.contains_key("b.c"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nested_binding_paths_merge() {
        match kind("{ a.b = 1; a.c = 2; }") {
            ExprKind::AttrSet { bindings, .. } => match &bindings["a"] {
                Binding::Nested(inner) => assert_eq!(inner.len(), 2),
                other => panic!("{other:?}"),
            },
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_attribute_is_a_syntax_error() {
        let err = parse("{ a = 1; a = 2; }").unwrap_err();
        assert!(err.expected.contains("defined twice"));
        assert_eq!(err.pos.line, 1);
    }

    #[test]
    fn syntax_error_reports_position_and_expectation() {
        let err = parse("let x = 1;\n in { y = ; }").unwrap_err();
        assert_eq!(err.pos, Pos { line: 2, col: 11 });
        assert!(err.expected.contains("expression"), "{}", err.expected);
    }

    #[test]
    fn empty_pattern_vs_empty_set() {
        assert!(matches!(kind("{}: 1"), ExprKind::Lambda { .. }));
        assert!(matches!(kind("{ ... }: 1"), ExprKind::Lambda { .. }));
        assert!(matches!(kind("args@{ a ? 1, ... }: a"), ExprKind::Lambda { .. }));
    }

    #[test]
    fn select_with_default_and_builtins() {
        assert!(matches!(kind("x.a.b or 3"), ExprKind::Select { default: Some(_), .. }));
        assert_eq!(kind("builtins.toString"), ExprKind::BuiltinRef("toString".into()));
    }

    #[test]
    fn application_binds_tighter_than_operators() {
        match kind("f x + g y") {
            ExprKind::BinOp {
                op: BinOp::Add,
                lhs,
                rhs,
            } => {
                assert!(matches!(lhs.kind, ExprKind::Apply { .. }));
                assert!(matches!(rhs.kind, ExprKind::Apply { .. }));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn let_rec_if_and_inherit() {
        assert!(matches!(kind("let a = 1; in a"), ExprKind::LetIn { .. }));
        assert!(matches!(
            kind("rec { a = 1; b = a; }"),
            ExprKind::AttrSet { recursive: true, .. }
        ));
        match kind("{ inherit a b; inherit (s) c; }") {
            ExprKind::AttrSet { bindings, .. } => {
                assert_eq!(bindings.len(), 3);
                assert!(matches!(bindings["c"], Binding::Inherit(Some(_))));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(kind("if true then 1 else 2"), ExprKind::If { .. }));
    }
}
