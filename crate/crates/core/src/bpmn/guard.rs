//! Guard expressions on exclusive-gateway flows.
//!
//! Grammar, loosest to tightest:
//!
//! ```text
//! or      := and  (("||" | "or")  and)*
//! and     := not  (("&&" | "and") not)*
//! not     := ("!" | "not") not | cmp
//! cmp     := operand (("==" | "!=" | "<" | "<=" | ">" | ">=") operand)?
//! operand := number | string | "true" | "false" | path | "(" or ")"
//! path    := ident "." ident
//! ```
//!
//! Paths name `dataObject.metaKey`. Guards only ever see the small metadata
//! map attached to a data object version; document bytes stay off-chain.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum GuardExpr {
    Lit(Literal),
    Path(Vec<String>),
    Cmp {
        left: Box<GuardExpr>,
        op: CmpOp,
        right: Box<GuardExpr>,
    },
    And(Box<GuardExpr>, Box<GuardExpr>),
    Or(Box<GuardExpr>, Box<GuardExpr>),
    Not(Box<GuardExpr>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Literal {
    Number(f64),
    Str(String),
    Bool(bool),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GuardError {
    /// `offset` is the 1-based byte position of the offending token; end of
    /// input reports `len + 1`.
    #[error("guard syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("missing field {0}")]
    MissingField(String),
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
}

/// Metadata lookup for guard evaluation.
pub trait DataContext {
    fn metadata(&self, data_object: &str) -> Option<&Map<String, Value>>;
}

impl DataContext for BTreeMap<String, Map<String, Value>> {
    fn metadata(&self, data_object: &str) -> Option<&Map<String, Value>> {
        self.get(data_object)
    }
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Str(String),
    Ident(String),
    Dot,
    LParen,
    RParen,
    Cmp(CmpOp),
    AndOp,
    OrOp,
    NotOp,
    True,
    False,
    End,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn err(at: usize, message: impl Into<String>) -> GuardError {
        GuardError::Syntax {
            offset: at + 1,
            message: message.into(),
        }
    }

    fn tokens(mut self) -> Result<Vec<(usize, Tok)>, GuardError> {
        let mut out = Vec::new();
        loop {
            let (at, tok) = self.next_token()?;
            let end = tok == Tok::End;
            out.push((at, tok));
            if end {
                return Ok(out);
            }
        }
    }

    fn next_token(&mut self) -> Result<(usize, Tok), GuardError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        let Some(&c) = bytes.get(start) else {
            return Ok((start, Tok::End));
        };
        let peek = bytes.get(start + 1).copied();
        let two = |s: &mut Self, t: Tok| {
            s.pos += 2;
            Ok((start, t))
        };
        let one = |s: &mut Self, t: Tok| {
            s.pos += 1;
            Ok((start, t))
        };
        match (c, peek) {
            (b'=', Some(b'=')) => two(self, Tok::Cmp(CmpOp::Eq)),
            (b'!', Some(b'=')) => two(self, Tok::Cmp(CmpOp::Ne)),
            (b'<', Some(b'=')) => two(self, Tok::Cmp(CmpOp::Le)),
            (b'>', Some(b'=')) => two(self, Tok::Cmp(CmpOp::Ge)),
            (b'&', Some(b'&')) => two(self, Tok::AndOp),
            (b'|', Some(b'|')) => two(self, Tok::OrOp),
            (b'<', _) => one(self, Tok::Cmp(CmpOp::Lt)),
            (b'>', _) => one(self, Tok::Cmp(CmpOp::Gt)),
            (b'!', _) => one(self, Tok::NotOp),
            (b'(', _) => one(self, Tok::LParen),
            (b')', _) => one(self, Tok::RParen),
            (b'.', _) => one(self, Tok::Dot),
            (b'"', _) => self.string(start),
            (b'-', _) | (b'0'..=b'9', _) => self.number(start),
            (c, _) if c.is_ascii_alphabetic() || c == b'_' => {
                while self.pos < bytes.len() && (bytes[self.pos].is_ascii_alphanumeric() || bytes[self.pos] == b'_') {
                    self.pos += 1;
                }
                let word = &self.src[start..self.pos];
                let tok = match word {
                    "true" => Tok::True,
                    "false" => Tok::False,
                    "and" => Tok::AndOp,
                    "or" => Tok::OrOp,
                    "not" => Tok::NotOp,
                    _ => Tok::Ident(word.to_string()),
                };
                Ok((start, tok))
            }
            _ => Err(Self::err(start, format!("unexpected character {:?}", c as char))),
        }
    }

    fn string(&mut self, start: usize) -> Result<(usize, Tok), GuardError> {
        let mut out = String::new();
        let mut chars = self.src[start + 1..].char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '"' => {
                    self.pos = start + 1 + i + 1;
                    return Ok((start, Tok::Str(out)));
                }
                '\\' => match chars.next() {
                    Some((_, '"')) => out.push('"'),
                    Some((_, '\\')) => out.push('\\'),
                    Some((_, 'n')) => out.push('\n'),
                    Some((_, 't')) => out.push('\t'),
                    Some((j, other)) => return Err(Self::err(start + 1 + j, format!("unknown escape \\{other}"))),
                    None => break,
                },
                c => out.push(c),
            }
        }
        Err(Self::err(self.src.len(), "unterminated string"))
    }

    fn number(&mut self, start: usize) -> Result<(usize, Tok), GuardError> {
        let bytes = self.src.as_bytes();
        let mut end = start;
        if bytes[end] == b'-' {
            end += 1;
        }
        let digits = |mut i: usize| {
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            i
        };
        let int_end = digits(end);
        if int_end == end {
            return Err(Self::err(end, "expected digit"));
        }
        end = int_end;
        if end < bytes.len() && bytes[end] == b'.' && bytes.get(end + 1).is_some_and(u8::is_ascii_digit) {
            end = digits(end + 1);
        }
        if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
            let mut exp = end + 1;
            if exp < bytes.len() && (bytes[exp] == b'+' || bytes[exp] == b'-') {
                exp += 1;
            }
            let exp_end = digits(exp);
            if exp_end == exp {
                return Err(Self::err(exp, "expected exponent digits"));
            }
            end = exp_end;
        }
        self.pos = end;
        let value: f64 = self.src[start..end]
            .parse()
            .map_err(|_| Self::err(start, "invalid number"))?;
        Ok((start, Tok::Num(value)))
    }
}

// ---------------------------------------------------------------------------
// Parser

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].1
    }

    fn bump(&mut self) -> Tok {
        let tok = self.toks[self.at].1.clone();
        if tok != Tok::End {
            self.at += 1;
        }
        tok
    }

    fn error(&self, message: impl Into<String>) -> GuardError {
        Lexer::err(self.toks[self.at].0, message)
    }

    fn or(&mut self) -> Result<GuardExpr, GuardError> {
        let mut left = self.and()?;
        while *self.peek() == Tok::OrOp {
            self.bump();
            let right = self.and()?;
            left = GuardExpr::Or(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn and(&mut self) -> Result<GuardExpr, GuardError> {
        let mut left = self.not()?;
        while *self.peek() == Tok::AndOp {
            self.bump();
            let right = self.not()?;
            left = GuardExpr::And(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn not(&mut self) -> Result<GuardExpr, GuardError> {
        if *self.peek() == Tok::NotOp {
            self.bump();
            return Ok(GuardExpr::Not(Box::new(self.not()?)));
        }
        self.cmp()
    }

    fn cmp(&mut self) -> Result<GuardExpr, GuardError> {
        let left = self.operand()?;
        if let Tok::Cmp(op) = *self.peek() {
            self.bump();
            let right = self.operand()?;
            return Ok(GuardExpr::Cmp {
                left: Box::new(left),
                op,
                right: Box::new(right),
            });
        }
        Ok(left)
    }

    fn operand(&mut self) -> Result<GuardExpr, GuardError> {
        match self.peek().clone() {
            Tok::Num(n) => {
                self.bump();
                Ok(GuardExpr::Lit(Literal::Number(n)))
            }
            Tok::Str(s) => {
                self.bump();
                Ok(GuardExpr::Lit(Literal::Str(s)))
            }
            Tok::True => {
                self.bump();
                Ok(GuardExpr::Lit(Literal::Bool(true)))
            }
            Tok::False => {
                self.bump();
                Ok(GuardExpr::Lit(Literal::Bool(false)))
            }
            Tok::Ident(head) => {
                self.bump();
                if *self.peek() != Tok::Dot {
                    return Err(self.error("expected '.' in field path"));
                }
                self.bump();
                let Tok::Ident(key) = self.peek().clone() else {
                    return Err(self.error("expected field name after '.'"));
                };
                self.bump();
                Ok(GuardExpr::Path(vec![head, key]))
            }
            Tok::LParen => {
                self.bump();
                let inner = self.or()?;
                if *self.peek() != Tok::RParen {
                    return Err(self.error("expected ')'"));
                }
                self.bump();
                Ok(inner)
            }
            Tok::End => Err(self.error("unexpected end of input")),
            other => Err(self.error(format!("unexpected token {other:?}"))),
        }
    }
}

/// Parse guard text into an expression tree.
pub fn parse_guard(text: &str) -> Result<GuardExpr, GuardError> {
    if text.trim().is_empty() {
        return Err(GuardError::Syntax {
            offset: text.len() + 1,
            message: "empty guard".into(),
        });
    }
    let toks = Lexer { src: text, pos: 0 }.tokens()?;
    let mut parser = Parser { toks, at: 0 };
    let expr = parser.or()?;
    if *parser.peek() != Tok::End {
        return Err(parser.error("trailing input"));
    }
    Ok(expr)
}

// ---------------------------------------------------------------------------
// Printing

fn is_operand(e: &GuardExpr) -> bool {
    matches!(e, GuardExpr::Lit(_) | GuardExpr::Path(_))
}

fn is_atom(e: &GuardExpr) -> bool {
    is_operand(e) || matches!(e, GuardExpr::Cmp { .. })
}

struct Wrapped<'a>(&'a GuardExpr, bool);

impl fmt::Display for Wrapped<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.1 {
            write!(f, "({})", self.0)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Number(n) => write!(f, "{n}"),
            Literal::Bool(b) => write!(f, "{b}"),
            Literal::Str(s) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    match c {
                        '"' => f.write_str("\\\"")?,
                        '\\' => f.write_str("\\\\")?,
                        '\n' => f.write_str("\\n")?,
                        '\t' => f.write_str("\\t")?,
                        c => write!(f, "{c}")?,
                    }
                }
                f.write_str("\"")
            }
        }
    }
}

/// Prints a form that [`parse_guard`] maps back to the same tree.
impl fmt::Display for GuardExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GuardExpr::Lit(l) => write!(f, "{l}"),
            GuardExpr::Path(p) => write!(f, "{}", p.join(".")),
            GuardExpr::Cmp { left, op, right } => write!(
                f,
                "{} {} {}",
                Wrapped(left, !is_operand(left)),
                op.symbol(),
                Wrapped(right, !is_operand(right))
            ),
            GuardExpr::And(l, r) => {
                write!(f, "{} && {}", Wrapped(l, !is_atom(l)), Wrapped(r, !is_atom(r)))
            }
            GuardExpr::Or(l, r) => {
                write!(f, "{} || {}", Wrapped(l, !is_atom(l)), Wrapped(r, !is_atom(r)))
            }
            GuardExpr::Not(inner) => write!(f, "!{}", Wrapped(inner, !is_operand(inner))),
        }
    }
}

// ---------------------------------------------------------------------------
// Evaluation

fn lookup(path: &[String], ctx: &dyn DataContext) -> Result<Literal, GuardError> {
    let full = path.join(".");
    let [object, key] = path else {
        return Err(GuardError::MissingField(full));
    };
    let value = ctx
        .metadata(object)
        .and_then(|m| m.get(key))
        .ok_or_else(|| GuardError::MissingField(full.clone()))?;
    match value {
        Value::Bool(b) => Ok(Literal::Bool(*b)),
        Value::String(s) => Ok(Literal::Str(s.clone())),
        Value::Number(n) => n
            .as_f64()
            .map(Literal::Number)
            .ok_or_else(|| GuardError::TypeMismatch(format!("{full} is not a finite number"))),
        _ => Err(GuardError::TypeMismatch(format!("{full} is not a primitive value"))),
    }
}

fn kind(l: &Literal) -> &'static str {
    match l {
        Literal::Number(_) => "number",
        Literal::Str(_) => "string",
        Literal::Bool(_) => "boolean",
    }
}

fn value(e: &GuardExpr, ctx: &dyn DataContext) -> Result<Literal, GuardError> {
    match e {
        GuardExpr::Lit(l) => Ok(l.clone()),
        GuardExpr::Path(p) => lookup(p, ctx),
        GuardExpr::Cmp { left, op, right } => {
            let (l, r) = (value(left, ctx)?, value(right, ctx)?);
            let ord = match (&l, &r) {
                (Literal::Number(a), Literal::Number(b)) => a.partial_cmp(b),
                (Literal::Str(a), Literal::Str(b)) => Some(a.cmp(b)),
                (Literal::Bool(a), Literal::Bool(b)) => {
                    if !matches!(op, CmpOp::Eq | CmpOp::Ne) {
                        return Err(GuardError::TypeMismatch(format!(
                            "operator {} is not defined on booleans",
                            op.symbol()
                        )));
                    }
                    Some(a.cmp(b))
                }
                _ => {
                    return Err(GuardError::TypeMismatch(format!(
                        "cannot compare {} with {}",
                        kind(&l),
                        kind(&r)
                    )))
                }
            };
            let Some(ord) = ord else {
                return Ok(Literal::Bool(matches!(op, CmpOp::Ne)));
            };
            let holds = match op {
                CmpOp::Eq => ord.is_eq(),
                CmpOp::Ne => ord.is_ne(),
                CmpOp::Lt => ord.is_lt(),
                CmpOp::Le => ord.is_le(),
                CmpOp::Gt => ord.is_gt(),
                CmpOp::Ge => ord.is_ge(),
            };
            Ok(Literal::Bool(holds))
        }
        GuardExpr::And(l, r) => Ok(Literal::Bool(truth(l, ctx)? && truth(r, ctx)?)),
        GuardExpr::Or(l, r) => Ok(Literal::Bool(truth(l, ctx)? || truth(r, ctx)?)),
        GuardExpr::Not(inner) => Ok(Literal::Bool(!truth(inner, ctx)?)),
    }
}

fn truth(e: &GuardExpr, ctx: &dyn DataContext) -> Result<bool, GuardError> {
    match value(e, ctx)? {
        Literal::Bool(b) => Ok(b),
        other => Err(GuardError::TypeMismatch(format!(
            "expected boolean, found {}",
            kind(&other)
        ))),
    }
}

/// Evaluate a guard against data-object metadata.
pub fn eval_guard(guard: &GuardExpr, ctx: &dyn DataContext) -> Result<bool, GuardError> {
    truth(guard, ctx)
}

impl GuardExpr {
    /// Data object names referenced by paths in this guard.
    pub fn referenced_objects(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.walk(&mut |e| {
            if let GuardExpr::Path(p) = e {
                if let Some(head) = p.first() {
                    out.push(head.as_str());
                }
            }
        });
        out
    }

    fn walk<'a>(&'a self, f: &mut impl FnMut(&'a GuardExpr)) {
        f(self);
        match self {
            GuardExpr::Cmp { left, right, .. } => {
                left.walk(f);
                right.walk(f);
            }
            GuardExpr::And(l, r) | GuardExpr::Or(l, r) => {
                l.walk(f);
                r.walk(f);
            }
            GuardExpr::Not(inner) => inner.walk(f),
            GuardExpr::Lit(_) | GuardExpr::Path(_) => {}
        }
    }
}
