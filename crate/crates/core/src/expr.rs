//! A small expression language for trait functions.
//!
//! Rates, selection functions `alpha`, weight functions `V` and test
//! functions are written as strings in one variable `x`, e.g.
//! `"-1/(e-1) + x"` or `"piecewise(0, 0.5, 2*x)"`.
//!
//! Grammar (precedence low to high):
//!
//! ```text
//! expr    := term (("+" | "-") term)*
//! term    := unary (("*" | "/") unary)*
//! unary   := "-" unary | power
//! power   := atom ("^" unary)?
//! atom    := number | "x" | "e" | "pi" | call | "(" expr ")"
//! call    := name "(" expr ("," expr)* ")"
//! ```
//!
//! Functions: `exp`, `log`, `sqrt`, `abs`, `sin`, `cos` (one argument),
//! `min` and `max` (two or more arguments), and
//! `piecewise(v0, b1, v1, ..., bn, vn)`, which evaluates to `v0` for
//! `x < b1`, to `vk` for `bk <= x < b(k+1)`, and to `vn` for `x >= bn`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("expression parse error at byte {position}: {message}")]
pub struct ParseError {
    pub position: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func1 {
    Exp,
    Log,
    Sqrt,
    Abs,
    Sin,
    Cos,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    Var,
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func1, Box<Node>),
    Min(Vec<Node>),
    Max(Vec<Node>),
    Piecewise(Vec<Node>),
}

impl Node {
    fn eval(&self, x: f64) -> f64 {
        match self {
            Node::Const(c) => *c,
            Node::Var => x,
            Node::Neg(a) => -a.eval(x),
            Node::Add(a, b) => a.eval(x) + b.eval(x),
            Node::Sub(a, b) => a.eval(x) - b.eval(x),
            Node::Mul(a, b) => a.eval(x) * b.eval(x),
            Node::Div(a, b) => a.eval(x) / b.eval(x),
            Node::Pow(a, b) => {
                let base = a.eval(x);
                match b.as_ref() {
                    Node::Const(c) if c.fract() == 0.0 && c.abs() < 64.0 => base.powi(*c as i32),
                    other => base.powf(other.eval(x)),
                }
            }
            Node::Call(f, a) => {
                let v = a.eval(x);
                match f {
                    Func1::Exp => v.exp(),
                    Func1::Log => v.ln(),
                    Func1::Sqrt => v.sqrt(),
                    Func1::Abs => v.abs(),
                    Func1::Sin => v.sin(),
                    Func1::Cos => v.cos(),
                }
            }
            Node::Min(args) => args.iter().map(|a| a.eval(x)).fold(f64::INFINITY, f64::min),
            Node::Max(args) => args.iter().map(|a| a.eval(x)).fold(f64::NEG_INFINITY, f64::max),
            Node::Piecewise(args) => {
                let mut value = &args[0];
                for pair in args[1..].chunks(2) {
                    if x >= pair[0].eval(x) {
                        value = &pair[1];
                    } else {
                        break;
                    }
                }
                value.eval(x)
            }
        }
    }

    fn is_constant(&self) -> bool {
        match self {
            Node::Const(_) => true,
            Node::Var => false,
            Node::Neg(a) | Node::Call(_, a) => a.is_constant(),
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) | Node::Pow(a, b) => {
                a.is_constant() && b.is_constant()
            }
            Node::Min(v) | Node::Max(v) | Node::Piecewise(v) => v.iter().all(Node::is_constant),
        }
    }
}

/// A parsed function of one real variable `x`.
///
/// Keeps its source text so that configurations round-trip unchanged.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Expr {
    source: String,
    root: Node,
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self, ParseError> {
        let mut parser = Parser { src: source.as_bytes(), pos: 0 };
        let root = parser.expr()?;
        parser.skip_ws();
        if parser.pos != parser.src.len() {
            return Err(parser.error("unexpected trailing input"));
        }
        Ok(Self { source: source.trim().to_string(), root })
    }

    /// Constant expression `c`.
    pub fn constant(c: f64) -> Self {
        Self { source: format!("{c:?}"), root: Node::Const(c) }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.root.eval(x)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// True when the expression does not depend on `x`.
    pub fn is_constant(&self) -> bool {
        self.root.is_constant()
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl TryFrom<String> for Expr {
    type Error = ParseError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Expr::parse(&s)
    }
}

impl From<Expr> for String {
    fn from(e: Expr) -> String {
        e.source
    }
}

impl std::str::FromStr for Expr {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Expr::parse(s)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: impl Into<String>) -> ParseError {
        ParseError { position: self.pos, message: message.into() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), ParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.error(format!("expected '{}'", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(b'-') {
                lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat(b'/') {
                lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Node, ParseError> {
        if self.eat(b'-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.eat(b'+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ParseError> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let exponent = self.unary()?;
            return Ok(Node::Pow(Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ParseError> {
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(b')')?;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.identifier(),
            Some(c) => Err(self.error(format!("unexpected character '{}'", c as char))),
        }
    }

    fn number(&mut self) -> Result<Node, ParseError> {
        let start = self.pos;
        let bytes = self.src;
        let mut end = start;
        while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
            end += 1;
        }
        if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
            let mut probe = end + 1;
            if probe < bytes.len() && (bytes[probe] == b'+' || bytes[probe] == b'-') {
                probe += 1;
            }
            if probe < bytes.len() && bytes[probe].is_ascii_digit() {
                end = probe;
                while end < bytes.len() && bytes[end].is_ascii_digit() {
                    end += 1;
                }
            }
        }
        let text = std::str::from_utf8(&bytes[start..end]).expect("ascii");
        let value: f64 = text.parse().map_err(|_| self.error(format!("invalid number '{text}'")))?;
        self.pos = end;
        Ok(Node::Const(value))
    }

    fn identifier(&mut self) -> Result<Node, ParseError> {
        let start = self.pos;
        while self.pos < self.src.len() && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_') {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        match name {
            "x" => return Ok(Node::Var),
            "e" => return Ok(Node::Const(std::f64::consts::E)),
            "pi" => return Ok(Node::Const(std::f64::consts::PI)),
            _ => {}
        }
        let name_pos = start;
        if !self.eat(b'(') {
            return Err(ParseError { position: name_pos, message: format!("unknown identifier '{name}'") });
        }
        let mut args = vec![self.expr()?];
        while self.eat(b',') {
            args.push(self.expr()?);
        }
        self.expect(b')')?;
        let arity_error = |expected: &str| ParseError {
            position: name_pos,
            message: format!("function '{name}' expects {expected} argument(s), got {}", args.len()),
        };
        let one = |f: Func1, mut args: Vec<Node>| Node::Call(f, Box::new(args.pop().unwrap()));
        match name {
            "exp" | "log" | "sqrt" | "abs" | "sin" | "cos" => {
                if args.len() != 1 {
                    return Err(arity_error("1"));
                }
                let f = match name {
                    "exp" => Func1::Exp,
                    "log" => Func1::Log,
                    "sqrt" => Func1::Sqrt,
                    "abs" => Func1::Abs,
                    "sin" => Func1::Sin,
                    _ => Func1::Cos,
                };
                Ok(one(f, args))
            }
            "min" | "max" => {
                if args.len() < 2 {
                    return Err(arity_error("at least 2"));
                }
                Ok(if name == "min" { Node::Min(args) } else { Node::Max(args) })
            }
            "piecewise" => {
                if args.len() % 2 == 0 {
                    return Err(arity_error("an odd number of"));
                }
                Ok(Node::Piecewise(args))
            }
            _ => Err(ParseError { position: name_pos, message: format!("unknown function '{name}'") }),
        }
    }
}
