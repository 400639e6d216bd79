//! Tokenizer. Strings are lexed into literal and interpolation parts, the
//! latter holding their own token streams.

use super::ast::Pos;
use super::SyntaxError;

#[derive(Debug, Clone, PartialEq)]
pub enum StrTok {
    Lit(String),
    Interp(Vec<Token>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Ident(String),
    Int(i64),
    Str(Vec<StrTok>),
    Let,
    In,
    Rec,
    If,
    Then,
    Else,
    Inherit,
    Or,
    True,
    False,
    Null,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    LParen,
    RParen,
    Semi,
    Colon,
    Comma,
    Dot,
    Assign,
    At,
    Question,
    Ellipsis,
    Update,
    Concat,
    Plus,
    Minus,
    Star,
    Slash,
    EqEq,
    NotEq,
    Lt,
    Le,
    Gt,
    Ge,
    AndAnd,
    OrOr,
    Bang,
    Eof,
}

impl Tok {
    pub fn describe(&self) -> String {
        match self {
            Tok::Ident(n) => format!("identifier `{n}`"),
            Tok::Int(n) => format!("integer {n}"),
            Tok::Str(_) => "string".into(),
            Tok::Eof => "end of input".into(),
            other => format!("`{}`", punct_text(other)),
        }
    }
}

fn punct_text(t: &Tok) -> &'static str {
    match t {
        Tok::Let => "let",
        Tok::In => "in",
        Tok::Rec => "rec",
        Tok::If => "if",
        Tok::Then => "then",
        Tok::Else => "else",
        Tok::Inherit => "inherit",
        Tok::Or => "or",
        Tok::True => "true",
        Tok::False => "false",
        Tok::Null => "null",
        Tok::LBrace => "{",
        Tok::RBrace => "}",
        Tok::LBracket => "[",
        Tok::RBracket => "]",
        Tok::LParen => "(",
        Tok::RParen => ")",
        Tok::Semi => ";",
        Tok::Colon => ":",
        Tok::Comma => ",",
        Tok::Dot => ".",
        Tok::Assign => "=",
        Tok::At => "@",
        Tok::Question => "?",
        Tok::Ellipsis => "...",
        Tok::Update => "//",
        Tok::Concat => "++",
        Tok::Plus => "+",
        Tok::Minus => "-",
        Tok::Star => "*",
        Tok::Slash => "/",
        Tok::EqEq => "==",
        Tok::NotEq => "!=",
        Tok::Lt => "<",
        Tok::Le => "<=",
        Tok::Gt => ">",
        Tok::Ge => ">=",
        Tok::AndAnd => "&&",
        Tok::OrOr => "||",
        Tok::Bang => "!",
        _ => "?",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub tok: Tok,
    pub pos: Pos,
}

pub fn tokenize(source: &str) -> Result<Vec<Token>, SyntaxError> {
    let mut lexer = Lexer {
        chars: source.chars().collect(),
        i: 0,
        line: 1,
        col: 1,
    };
    let mut tokens = lexer.tokens(false)?;
    tokens.push(Token {
        tok: Tok::Eof,
        pos: lexer.pos(),
    });
    Ok(tokens)
}

struct Lexer {
    chars: Vec<char>,
    i: usize,
    line: u32,
    col: u32,
}

impl Lexer {
    fn pos(&self) -> Pos {
        Pos {
            line: self.line,
            col: self.col,
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.i).copied()
    }

    fn peek_at(&self, n: usize) -> Option<char> {
        self.chars.get(self.i + n).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.get(self.i).copied()?;
        self.i += 1;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn error<T>(&self, expected: impl Into<String>) -> Result<T, SyntaxError> {
        Err(SyntaxError {
            pos: self.pos(),
            expected: expected.into(),
        })
    }

    fn skip_trivia(&mut self) -> Result<(), SyntaxError> {
        loop {
            match self.peek() {
                Some(c) if c.is_whitespace() => {
                    self.bump();
                }
                Some('#') => {
                    while self.peek().is_some_and(|c| c != '\n') {
                        self.bump();
                    }
                }
                Some('/') if self.peek_at(1) == Some('*') => {
                    self.bump();
                    self.bump();
                    loop {
                        match self.peek() {
                            None => return self.error("end of comment `*/`"),
                            Some('*') if self.peek_at(1) == Some('/') => {
                                self.bump();
                                self.bump();
                                break;
                            }
                            _ => {
                                self.bump();
                            }
                        }
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    /// Lex until end of input or, inside an interpolation, the matching `}`.
    fn tokens(&mut self, in_interp: bool) -> Result<Vec<Token>, SyntaxError> {
        let mut out = Vec::new();
        let mut depth = 0usize;
        loop {
            self.skip_trivia()?;
            let pos = self.pos();
            let Some(c) = self.peek() else {
                if in_interp {
                    return self.error("`}` closing interpolation");
                }
                return Ok(out);
            };
            let tok = match c {
                '{' => {
                    depth += 1;
                    self.bump();
                    Tok::LBrace
                }
                '}' => {
                    if in_interp && depth == 0 {
                        self.bump();
                        return Ok(out);
                    }
                    depth = depth.saturating_sub(1);
                    self.bump();
                    Tok::RBrace
                }
                '"' => {
                    self.bump();
                    Tok::Str(self.string_body()?)
                }
                '\'' if self.peek_at(1) == Some('\'') => {
                    self.bump();
                    self.bump();
                    Tok::Str(self.indented_body()?)
                }
                c if c.is_ascii_digit() => {
                    let mut text = String::new();
                    while let Some(d) = self.peek().filter(|d| d.is_ascii_digit()) {
                        text.push(d);
                        self.bump();
                    }
                    match text.parse() {
                        Ok(n) => Tok::Int(n),
                        Err(_) => return self.error("integer within 64-bit range"),
                    }
                }
                c if c.is_ascii_alphabetic() || c == '_' => {
                    let mut text = String::new();
                    while let Some(d) = self
                        .peek()
                        .filter(|d| d.is_ascii_alphanumeric() || matches!(d, '_' | '\'' | '-'))
                    {
                        text.push(d);
                        self.bump();
                    }
                    keyword(&text).unwrap_or(Tok::Ident(text))
                }
                _ => self.punct()?,
            };
            out.push(Token { tok, pos });
        }
    }

    fn punct(&mut self) -> Result<Tok, SyntaxError> {
        let c = self.peek().unwrap_or('\0');
        let next = self.peek_at(1);
        let (tok, len) = match (c, next) {
            ('.', Some('.')) if self.peek_at(2) == Some('.') => (Tok::Ellipsis, 3),
            ('/', Some('/')) => (Tok::Update, 2),
            ('+', Some('+')) => (Tok::Concat, 2),
            ('=', Some('=')) => (Tok::EqEq, 2),
            ('!', Some('=')) => (Tok::NotEq, 2),
            ('<', Some('=')) => (Tok::Le, 2),
            ('>', Some('=')) => (Tok::Ge, 2),
            ('&', Some('&')) => (Tok::AndAnd, 2),
            ('|', Some('|')) => (Tok::OrOr, 2),
            ('[', _) => (Tok::LBracket, 1),
            (']', _) => (Tok::RBracket, 1),
            ('(', _) => (Tok::LParen, 1),
            (')', _) => (Tok::RParen, 1),
            (';', _) => (Tok::Semi, 1),
            (':', _) => (Tok::Colon, 1),
            (',', _) => (Tok::Comma, 1),
            ('.', _) => (Tok::Dot, 1),
            ('=', _) => (Tok::Assign, 1),
            ('@', _) => (Tok::At, 1),
            ('?', _) => (Tok::Question, 1),
            ('+', _) => (Tok::Plus, 1),
            ('-', _) => (Tok::Minus, 1),
            ('*', _) => (Tok::Star, 1),
            ('/', _) => (Tok::Slash, 1),
            ('<', _) => (Tok::Lt, 1),
            ('>', _) => (Tok::Gt, 1),
            ('!', _) => (Tok::Bang, 1),
            _ => return self.error(format!("a token (found `{c}`)")),
        };
        for _ in 0..len {
            self.bump();
        }
        Ok(tok)
    }

    fn interpolation(&mut self) -> Result<StrTok, SyntaxError> {
        // Caller consumed `${`.
        Ok(StrTok::Interp(self.tokens(true)?))
    }

    fn string_body(&mut self) -> Result<Vec<StrTok>, SyntaxError> {
        let mut parts = Vec::new();
        let mut lit = String::new();
        loop {
            match self.peek() {
                None => return self.error("closing `\"`"),
                Some('"') => {
                    self.bump();
                    break;
                }
                Some('\\') => {
                    self.bump();
                    match self.bump() {
                        Some('n') => lit.push('\n'),
                        Some('t') => lit.push('\t'),
                        Some('r') => lit.push('\r'),
                        Some(other) => lit.push(other),
                        None => return self.error("escaped character"),
                    }
                }
                Some('$') if self.peek_at(1) == Some('{') => {
                    self.bump();
                    self.bump();
                    if !lit.is_empty() {
                        parts.push(StrTok::Lit(std::mem::take(&mut lit)));
                    }
                    parts.push(self.interpolation()?);
                }
                Some(c) => {
                    lit.push(c);
                    self.bump();
                }
            }
        }
        if !lit.is_empty() {
            parts.push(StrTok::Lit(lit));
        }
        Ok(parts)
    }

    /// `''...''` strings: common leading indentation is stripped, a
    /// whitespace-only first line is dropped.
    fn indented_body(&mut self) -> Result<Vec<StrTok>, SyntaxError> {
        // Each raw part: literal text or interpolation.
        let mut raw: Vec<StrTok> = Vec::new();
        let mut lit = String::new();
        loop {
            match self.peek() {
                None => return self.error("closing `''`"),
                Some('\'') if self.peek_at(1) == Some('\'') => match self.peek_at(2) {
                    Some('\'') => {
                        self.bump();
                        self.bump();
                        self.bump();
                        lit.push_str("''");
                    }
                    Some('$') => {
                        self.bump();
                        self.bump();
                        self.bump();
                        lit.push('$');
                    }
                    Some('\\') => {
                        self.bump();
                        self.bump();
                        self.bump();
                        match self.bump() {
                            Some('n') => lit.push('\n'),
                            Some('t') => lit.push('\t'),
                            Some('r') => lit.push('\r'),
                            Some(c) => lit.push(c),
                            None => return self.error("escaped character"),
                        }
                    }
                    _ => {
                        self.bump();
                        self.bump();
                        break;
                    }
                },
                Some('$') if self.peek_at(1) == Some('{') => {
                    self.bump();
                    self.bump();
                    raw.push(StrTok::Lit(std::mem::take(&mut lit)));
                    raw.push(self.interpolation()?);
                }
                Some(c) => {
                    lit.push(c);
                    self.bump();
                }
            }
        }
        raw.push(StrTok::Lit(lit));
        Ok(strip_indentation(raw))
    }
}

/// Remove the minimum indentation of non-blank lines from every line.
/// Interpolations count as non-whitespace content.
fn strip_indentation(raw: Vec<StrTok>) -> Vec<StrTok> {
    // Flatten to a sequence of (is_interp, text-or-index) per character run
    // while tracking line starts.
    #[derive(Clone)]
    enum Item {
        Char(char),
        Interp(Vec<Token>),
    }
    let mut items: Vec<Item> = Vec::new();
    for part in raw {
        match part {
            StrTok::Lit(s) => items.extend(s.chars().map(Item::Char)),
            StrTok::Interp(t) => items.push(Item::Interp(t)),
        }
    }
    let mut lines: Vec<Vec<Item>> = vec![Vec::new()];
    for item in items {
        let newline = matches!(item, Item::Char('\n'));
        lines.last_mut().expect("non-empty").push(item);
        if newline {
            lines.push(Vec::new());
        }
    }
    let is_blank = |line: &Vec<Item>| {
        line.iter()
            .all(|i| matches!(i, Item::Char(c) if *c == ' ' || *c == '\t' || *c == '\n'))
    };
    if lines.len() > 1 && is_blank(&lines[0]) {
        lines.remove(0);
    }
    let indent = lines
        .iter()
        .filter(|l| !is_blank(l))
        .map(|l| l.iter().take_while(|i| matches!(i, Item::Char(' '))).count())
        .min()
        .unwrap_or(0);
    let last = lines.len() - 1;
    let mut parts = Vec::new();
    let mut lit = String::new();
    for (n, line) in lines.into_iter().enumerate() {
        let skip = if n == last && is_blank(&line) {
            line.len()
        } else {
            indent.min(line.iter().take_while(|i| matches!(i, Item::Char(' '))).count())
        };
        for item in line.into_iter().skip(skip) {
            match item {
                Item::Char(c) => lit.push(c),
                Item::Interp(t) => {
                    if !lit.is_empty() {
                        parts.push(StrTok::Lit(std::mem::take(&mut lit)));
                    }
                    parts.push(StrTok::Interp(t));
                }
            }
        }
    }
    if !lit.is_empty() {
        parts.push(StrTok::Lit(lit));
    }
    parts
}

fn keyword(text: &str) -> Option<Tok> {
    Some(match text {
        "let" => Tok::Let,
        "in" => Tok::In,
        "rec" => Tok::Rec,
        "if" => Tok::If,
        "then" => Tok::Then,
        "else" => Tok::Else,
        "inherit" => Tok::Inherit,
        "or" => Tok::Or,
        "true" => Tok::True,
        "false" => Tok::False,
        "null" => Tok::Null,
        _ => return None,
    })
}
