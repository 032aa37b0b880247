//! Arithmetic expression language for Hamiltonians, Lagrangians and section
//! components.
//!
//! Grammar (see `docs/grammar.ebnf`):
//!
//! ```text
//! expr    = term   { ("+" | "-") term } ;
//! term    = unary  { ("*" | "/") unary } ;
//! unary   = "-" unary | power ;
//! power   = primary [ "^" unary ] ;
//! primary = number | variable | func "(" expr ")" | "(" expr ")" ;
//! ```
//!
//! Variables are `q{i}`, `p{A}_{i}` (Hamiltonian side) and `v{i}_{A}`
//! (Lagrangian side), all indices 1-based.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::scalars::{DomainError, Scalar, ScalarFn};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("parse error at byte {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

impl ParseError {
    fn new(offset: usize, message: impl Into<String>) -> Self {
        Self {
            offset,
            message: message.into(),
        }
    }
}

/// Which coordinates an expression may reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    /// Only the base coordinates `q{i}`.
    Base,
    /// `q{i}` and the momenta `p{A}_{i}` of the k-covelocity bundle.
    Hamiltonian,
    /// `q{i}` and the velocities `v{i}_{A}` of the k-velocity bundle.
    Lagrangian,
}

/// Coordinate naming for an `n`-dimensional base with `k` parameters.
///
/// Index layout: `q1..qn` occupy `0..n`; fiber coordinates follow in
/// A-major order, so `p{A}_{i}` and `v{i}_{A}` both sit at
/// `n + (A-1)*n + (i-1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CoordEnv {
    pub n: usize,
    pub k: usize,
    pub side: Side,
}

impl CoordEnv {
    pub fn new(n: usize, k: usize, side: Side) -> Self {
        assert!(n >= 1 && k >= 1, "dimensions must be positive");
        Self { n, k, side }
    }

    pub fn len(&self) -> usize {
        match self.side {
            Side::Base => self.n,
            _ => self.n + self.n * self.k,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of `p{A}_{i}` / `v{i}_{A}` (0-based `a`, `i`).
    pub fn fiber_index(&self, a: usize, i: usize) -> usize {
        self.n + a * self.n + i
    }

    pub fn name(&self, index: usize) -> String {
        if index < self.n {
            return format!("q{}", index + 1);
        }
        let f = index - self.n;
        let (a, i) = (f / self.n + 1, f % self.n + 1);
        match self.side {
            Side::Lagrangian => format!("v{i}_{a}"),
            _ => format!("p{a}_{i}"),
        }
    }

    pub fn names(&self) -> Vec<String> {
        (0..self.len()).map(|i| self.name(i)).collect()
    }

    /// Resolves a coordinate name, or explains why it is not one.
    pub fn resolve(&self, name: &str) -> Result<usize, String> {
        let (head, rest) = name.split_at(1.min(name.len()));
        let parse_index = |s: &str| -> Option<usize> {
            if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || s.starts_with('0') {
                return None;
            }
            s.parse().ok()
        };
        let check = |v: usize, max: usize, what: &str| -> Result<usize, String> {
            if v > max {
                Err(format!("{what} index {v} out of range 1..={max} in '{name}'"))
            } else {
                Ok(v - 1)
            }
        };
        match head {
            "q" => {
                let i = parse_index(rest).ok_or_else(|| format!("unknown identifier '{name}'"))?;
                check(i, self.n, "coordinate")
            }
            "p" | "v" => {
                let wanted = if head == "p" {
                    Side::Hamiltonian
                } else {
                    Side::Lagrangian
                };
                let (first, second) = rest
                    .split_once('_')
                    .and_then(|(a, b)| Some((parse_index(a)?, parse_index(b)?)))
                    .ok_or_else(|| format!("unknown identifier '{name}'"))?;
                if self.side != wanted {
                    return Err(format!("'{name}' is not a coordinate of this expression"));
                }
                let (a, i) = if head == "p" { (first, second) } else { (second, first) };
                let a = check(a, self.k, "parameter")?;
                let i = check(i, self.n, "coordinate")?;
                Ok(self.fiber_index(a, i))
            }
            _ => Err(format!("unknown identifier '{name}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    /// Resolved index into the [`CoordEnv`].
    Var(usize),
    Neg(Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

/// A parsed expression bound to its coordinate environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Ast {
    root: Node,
    env: CoordEnv,
}

impl Ast {
    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn env(&self) -> &CoordEnv {
        &self.env
    }

    /// The constant expression `c`.
    pub fn constant(c: f64, env: CoordEnv) -> Self {
        Self {
            root: Node::Num(c),
            env,
        }
    }

    /// Evaluates over any scalar type; `values` must match the environment.
    pub fn eval<S: Scalar>(&self, values: &[S]) -> Result<S, Error> {
        if values.len() != self.env.len() {
            return Err(Error::Shape(format!(
                "expression expects {} coordinates, got {}",
                self.env.len(),
                values.len()
            )));
        }
        Ok(self.eval_at(values)?)
    }

    /// Names of the coordinates referenced by the expression.
    pub fn free_vars(&self) -> BTreeSet<String> {
        self.free_indices().into_iter().map(|i| self.env.name(i)).collect()
    }

    pub fn free_indices(&self) -> BTreeSet<usize> {
        fn walk(node: &Node, out: &mut BTreeSet<usize>) {
            match node {
                Node::Num(_) => {}
                Node::Var(i) => {
                    out.insert(*i);
                }
                Node::Neg(a) | Node::Call(_, a) => walk(a, out),
                Node::Binary(_, a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
            }
        }
        let mut out = BTreeSet::new();
        walk(&self.root, &mut out);
        out
    }

    /// True when every referenced coordinate is a base coordinate `q{i}`.
    pub fn depends_on_base_only(&self) -> bool {
        self.free_indices().iter().all(|&i| i < self.env.n)
    }
}

fn eval_node<S: Scalar>(node: &Node, values: &[S]) -> Result<S, DomainError> {
    Ok(match node {
        Node::Num(c) => S::constant(*c),
        Node::Var(i) => values[*i].clone(),
        Node::Neg(a) => -eval_node(a, values)?,
        Node::Binary(op, a, b) => {
            let a = eval_node(a, values)?;
            let b = eval_node(b, values)?;
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => a.try_div(b)?,
                BinOp::Pow => a.try_pow(b)?,
            }
        }
        Node::Call(f, a) => {
            let a = eval_node(a, values)?;
            match f {
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Exp => a.exp(),
                Func::Log => a.try_ln()?,
                Func::Sqrt => a.try_sqrt()?,
            }
        }
    })
}

impl ScalarFn for Ast {
    fn eval_at<S: Scalar>(&self, x: &[S]) -> Result<S, DomainError> {
        assert_eq!(x.len(), self.env.len(), "coordinate vector length");
        let out = eval_node(&self.root, x)?;
        if !out.all_finite() {
            return Err(DomainError::NonFinite { index: None });
        }
        Ok(out)
    }
}

// Binding strength used by the printer.
const PREC_ADD: u8 = 1;
const PREC_MUL: u8 = 2;
const PREC_NEG: u8 = 3;
const PREC_POW: u8 = 4;
const PREC_ATOM: u8 = 5;

fn precedence(node: &Node) -> u8 {
    match node {
        Node::Num(_) | Node::Var(_) | Node::Call(..) => PREC_ATOM,
        Node::Neg(_) => PREC_NEG,
        Node::Binary(BinOp::Add | BinOp::Sub, ..) => PREC_ADD,
        Node::Binary(BinOp::Mul | BinOp::Div, ..) => PREC_MUL,
        Node::Binary(BinOp::Pow, ..) => PREC_POW,
    }
}

struct Printer<'a> {
    node: &'a Node,
    env: &'a CoordEnv,
}

impl Printer<'_> {
    fn child<'b>(&'b self, node: &'b Node) -> Printer<'b> {
        Printer { node, env: self.env }
    }

    fn write_child(&self, f: &mut fmt::Formatter<'_>, node: &Node, parens: bool) -> fmt::Result {
        if parens {
            write!(f, "({})", self.child(node))
        } else {
            write!(f, "{}", self.child(node))
        }
    }
}

impl fmt::Display for Printer<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Node::Num(c) => write!(f, "{c}"),
            Node::Var(i) => f.write_str(&self.env.name(*i)),
            Node::Neg(a) => {
                f.write_str("-")?;
                self.write_child(f, a, precedence(a) < PREC_NEG)
            }
            Node::Call(func, a) => write!(f, "{}({})", func.name(), self.child(a)),
            Node::Binary(op, a, b) => {
                let p = precedence(self.node);
                let (left_parens, right_parens) = if *op == BinOp::Pow {
                    (precedence(a) <= PREC_POW, precedence(b) < PREC_NEG)
                } else {
                    (precedence(a) < p, precedence(b) <= p)
                };
                self.write_child(f, a, left_parens)?;
                let spaced = matches!(op, BinOp::Add | BinOp::Sub);
                if spaced {
                    write!(f, " {} ", op.symbol())?;
                } else {
                    f.write_str(op.symbol())?;
                }
                self.write_child(f, b, right_parens)
            }
        }
    }
}

impl fmt::Display for Ast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        Printer {
            node: &self.root,
            env: &self.env,
        }
        .fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
    End,
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Num(c) => format!("number {c}"),
        Tok::Ident(s) => format!("identifier '{s}'"),
        Tok::Op(c) => format!("'{c}'"),
        Tok::LParen => "'('".into(),
        Tok::RParen => "')'".into(),
        Tok::Comma => "','".into(),
        Tok::End => "end of input".into(),
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let c = bytes[pos];
        let start = pos;
        match c {
            b' ' | b'\t' | b'\r' | b'\n' => {
                pos += 1;
                continue;
            }
            b'+' | b'-' | b'*' | b'/' | b'^' => {
                out.push((Tok::Op(c as char), start));
                pos += 1;
            }
            b'(' => {
                out.push((Tok::LParen, start));
                pos += 1;
            }
            b')' => {
                out.push((Tok::RParen, start));
                pos += 1;
            }
            b',' => {
                out.push((Tok::Comma, start));
                pos += 1;
            }
            b'0'..=b'9' | b'.' => {
                let digits = |p: &mut usize| {
                    let s = *p;
                    while *p < bytes.len() && bytes[*p].is_ascii_digit() {
                        *p += 1;
                    }
                    *p - s
                };
                let mut mantissa = digits(&mut pos);
                if pos < bytes.len() && bytes[pos] == b'.' {
                    pos += 1;
                    mantissa += digits(&mut pos);
                }
                if mantissa == 0 {
                    return Err(ParseError::new(start, "malformed number"));
                }
                if pos < bytes.len() && (bytes[pos] == b'e' || bytes[pos] == b'E') {
                    pos += 1;
                    if pos < bytes.len() && (bytes[pos] == b'+' || bytes[pos] == b'-') {
                        pos += 1;
                    }
                    if digits(&mut pos) == 0 {
                        return Err(ParseError::new(pos, "exponent requires digits"));
                    }
                }
                let text = &src[start..pos];
                let value: f64 = text
                    .parse()
                    .map_err(|_| ParseError::new(start, format!("malformed number '{text}'")))?;
                if !value.is_finite() {
                    return Err(ParseError::new(start, format!("number '{text}' overflows")));
                }
                out.push((Tok::Num(value), start));
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while pos < bytes.len() && (bytes[pos].is_ascii_alphanumeric() || bytes[pos] == b'_') {
                    pos += 1;
                }
                out.push((Tok::Ident(src[start..pos].to_string()), start));
            }
            _ => {
                let ch = src[start..].chars().next().unwrap_or('?');
                return Err(ParseError::new(start, format!("unexpected character '{ch}'")));
            }
        }
    }
    out.push((Tok::End, src.len()));
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    env: &'a CoordEnv,
}

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn unexpected(&self) -> ParseError {
        let tok = self.peek();
        let mut msg = format!("unexpected {}", describe(tok));
        if matches!(tok, Tok::Ident(_) | Tok::Num(_) | Tok::LParen) && self.pos > 0 {
            msg.push_str(" (implicit multiplication is not supported)");
        }
        ParseError::new(self.offset(), msg)
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Op('+') => BinOp::Add,
                Tok::Op('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Op('*') => BinOp::Mul,
                Tok::Op('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node, ParseError> {
        if *self.peek() == Tok::Op('-') {
            self.bump();
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ParseError> {
        let base = self.primary()?;
        if *self.peek() == Tok::Op('^') {
            self.bump();
            let exponent = self.unary()?;
            return Ok(Node::Binary(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn expect_close(&mut self, open_at: usize) -> Result<(), ParseError> {
        match self.peek() {
            Tok::RParen => {
                self.bump();
                Ok(())
            }
            Tok::End => Err(ParseError::new(
                self.offset(),
                format!("unbalanced parentheses: '(' at byte {open_at} is never closed"),
            )),
            _ => Err(self.unexpected()),
        }
    }

    fn primary(&mut self) -> Result<Node, ParseError> {
        let (tok, at) = self.bump();
        match tok {
            Tok::Num(c) => Ok(Node::Num(c)),
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect_close(at)?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                if let Some(func) = Func::from_name(&name) {
                    if *self.peek() != Tok::LParen {
                        return Err(ParseError::new(
                            at,
                            format!("function '{name}' requires a parenthesized argument"),
                        ));
                    }
                    let (_, open_at) = self.bump();
                    if *self.peek() == Tok::RParen {
                        return Err(ParseError::new(
                            self.offset(),
                            format!("function '{name}' takes exactly one argument, got none"),
                        ));
                    }
                    let arg = self.expr()?;
                    if *self.peek() == Tok::Comma {
                        return Err(ParseError::new(
                            self.offset(),
                            format!("function '{name}' takes exactly one argument"),
                        ));
                    }
                    self.expect_close(open_at)?;
                    return Ok(Node::Call(func, Box::new(arg)));
                }
                let index = self.env.resolve(&name).map_err(|m| ParseError::new(at, m))?;
                Ok(Node::Var(index))
            }
            Tok::RParen => Err(ParseError::new(at, "unbalanced parentheses: unexpected ')'")),
            Tok::End => Err(ParseError::new(at, "unexpected end of input, expected an operand")),
            other => Err(ParseError::new(
                at,
                format!("unexpected {}, expected an operand", describe(&other)),
            )),
        }
    }
}

/// Parses `src` against `env`.
pub fn parse(src: &str, env: CoordEnv) -> Result<Ast, ParseError> {
    if src.trim().is_empty() {
        return Err(ParseError::new(0, "empty expression"));
    }
    let toks = lex(src)?;
    let mut parser = Parser {
        toks,
        pos: 0,
        env: &env,
    };
    let root = parser.expr()?;
    match parser.peek() {
        Tok::End => Ok(Ast { root, env }),
        Tok::RParen => Err(ParseError::new(
            parser.offset(),
            "unbalanced parentheses: unexpected ')'",
        )),
        _ => Err(parser.unexpected()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalars::{grad, Dual1};

    fn ham(n: usize, k: usize) -> CoordEnv {
        CoordEnv::new(n, k, Side::Hamiltonian)
    }

    fn eval_real(src: &str, env: CoordEnv, x: &[f64]) -> f64 {
        parse(src, env).unwrap().eval(x).unwrap()
    }

    #[test]
    fn names_resolve_with_index_order() {
        let h = ham(3, 2);
        assert_eq!(h.resolve("p2_3"), Ok(h.fiber_index(1, 2)));
        let l = CoordEnv::new(3, 2, Side::Lagrangian);
        assert_eq!(l.resolve("v3_2"), Ok(l.fiber_index(1, 2)));
        assert_eq!(l.name(l.fiber_index(1, 2)), "v3_2");
        assert!(h.resolve("p3_1").is_err());
        assert!(h.resolve("q4").is_err());
        assert!(h.resolve("q01").is_err());
        assert!(h.resolve("v1_1").is_err());
        let names = h.names();
        let unique: BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn single_variable() {
        let ast = parse("q1", ham(1, 1)).unwrap();
        assert_eq!(ast.root(), &Node::Var(0));
    }

    #[test]
    fn power_is_right_associative() {
        assert_eq!(eval_real("2^3^2", ham(1, 1), &[0.0, 0.0]), 512.0);
    }

    #[test]
    fn unary_minus_binds_looser_than_power() {
        assert_eq!(eval_real("-2^2", ham(1, 1), &[0.0, 0.0]), -4.0);
        assert_eq!(eval_real("2^-1", ham(1, 1), &[0.0, 0.0]), 0.5);
        assert_eq!(eval_real("8/4/2", ham(1, 1), &[0.0, 0.0]), 1.0);
        assert_eq!(eval_real("1-2-3", ham(1, 1), &[0.0, 0.0]), -4.0);
    }

    #[test]
    fn string_hamiltonian() {
        let env = ham(1, 2);
        let ast = parse("0.5*(p1_1^2/4 - p2_1^2)", env).unwrap();
        assert_eq!(ast.eval(&[0.0, 2.0, 1.0]).unwrap(), 0.0);
        let g = grad(&ast, &[0.0, 2.0, 1.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.5, -1.0]);

        // seeding only p1_1
        let x = [Dual1::constant(0.0), Dual1::variable(2.0, 0, 1), Dual1::constant(1.0)];
        let out = ast.eval(&x).unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(out.partial(0), 0.5);
    }

    #[test]
    fn evaluates_products() {
        assert_eq!(eval_real("q1*q1", CoordEnv::new(1, 1, Side::Base), &[3.0]), 9.0);
    }

    #[test]
    fn free_variables() {
        let env = ham(2, 1);
        let names = |s: &str| parse(s, env).unwrap().free_vars();
        assert_eq!(names("q1+1"), BTreeSet::from(["q1".to_string()]));
        assert_eq!(
            names("sin(p1_1)*q2"),
            BTreeSet::from(["p1_1".to_string(), "q2".to_string()])
        );
        assert!(names("3.5").is_empty());
    }

    #[test]
    fn zero_seed_values_agree_exactly() {
        let env = ham(2, 2);
        let ast = parse("exp(q1)*sin(p2_1) - sqrt(q2^2+1)/log(2+p1_2^2) + q1^q2", env).unwrap();
        let x = [0.3, 1.7, -0.2, 0.9, 1.1, -0.6];
        let real = ast.eval(&x).unwrap();
        let duals: Vec<Dual1<f64>> = x.iter().map(|&v| Dual1::constant(v)).collect();
        assert_eq!(ast.eval(&duals).unwrap().value, real);
    }

    #[test]
    fn errors_carry_offsets() {
        let env = ham(1, 1);
        let err = |s: &str| parse(s, env).unwrap_err();
        assert_eq!(err("2q1").offset, 1);
        assert_eq!(err("(1+2").offset, 4);
        assert_eq!(err("1+2)").offset, 3);
        assert_eq!(err("x+1").offset, 0);
        assert_eq!(err("sin(1,2)").offset, 5);
        assert_eq!(err("1 $ 2").offset, 2);
        assert_eq!(err("").offset, 0);
        assert_eq!(err("q1 + p2_1").offset, 5);
    }

    #[test]
    fn printing_reparses_to_same_tree() {
        let env = ham(2, 2);
        for src in [
            "-(q1+q2)^2",
            "(-q1)^2",
            "q1-(q2-p1_1)",
            "q1/(q2*p1_2)",
            "(2^3)^2",
            "2^-q1^2",
            "--q1",
            "sqrt(1e-7 + p2_2)",
        ] {
            let a = parse(src, env).unwrap();
            let printed = a.to_string();
            let b = parse(&printed, env).unwrap();
            assert_eq!(a, b, "{src} -> {printed}");
        }
    }
}
