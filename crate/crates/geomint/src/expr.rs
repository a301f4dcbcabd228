//! Scalar expression trees over named real variables.
//!
//! Expressions are immutable after construction and carry no global
//! state, so they can be shared and evaluated from concurrent callers.
//! Construction goes through smart constructors that perform constant
//! folding and the 0/1 identities — nothing more, so derivative trees
//! stay predictable.
//!
//! Grammar accepted by [`parse`]:
//!
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := base ('^' factor)?
//! base   := NUMBER | IDENT | IDENT '(' expr ')' | '(' expr ')' | '-' base
//! ```

use std::collections::{BTreeSet, HashMap};
use std::fmt;

/// Unary operations. `Neg` is spelled `-` in the grammar; the rest are
/// function calls `name(arg)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
        }
    }

    fn from_function_name(name: &str) -> Option<Self> {
        match name {
            "sin" => Some(UnaryOp::Sin),
            "cos" => Some(UnaryOp::Cos),
            "exp" => Some(UnaryOp::Exp),
            "log" => Some(UnaryOp::Log),
            "sqrt" => Some(UnaryOp::Sqrt),
            _ => None,
        }
    }
}

/// Binary operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

/// An immutable expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Constant(f64),
    Variable(String),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn constant(c: f64) -> Expr {
        Expr::Constant(c)
    }

    pub fn variable(name: impl Into<String>) -> Expr {
        let name = name.into();
        debug_assert!(is_identifier(&name), "invalid variable name '{name}'");
        Expr::Variable(name)
    }

    /// Sum with constant folding and the `0 + x` identity.
    pub fn add(a: Expr, b: Expr) -> Expr {
        match (a, b) {
            (Expr::Constant(x), Expr::Constant(y)) => Expr::Constant(x + y),
            (Expr::Constant(c), b) if c == 0.0 => b,
            (a, Expr::Constant(c)) if c == 0.0 => a,
            // collect nested constants: c1 + (c2 + e) -> (c1+c2) + e
            (Expr::Constant(c1), Expr::Binary(BinaryOp::Add, l, r)) => match *l {
                Expr::Constant(c2) => Expr::add(Expr::Constant(c1 + c2), *r),
                l => Expr::Binary(BinaryOp::Add, Box::new(Expr::Constant(c1)), Box::new(Expr::Binary(BinaryOp::Add, Box::new(l), r))),
            },
            (a, b) => Expr::Binary(BinaryOp::Add, Box::new(a), Box::new(b)),
        }
    }

    /// Difference with constant folding, `x - 0`, and `0 - x -> -x`.
    pub fn sub(a: Expr, b: Expr) -> Expr {
        match (a, b) {
            (Expr::Constant(x), Expr::Constant(y)) => Expr::Constant(x - y),
            (a, Expr::Constant(c)) if c == 0.0 => a,
            (Expr::Constant(c), b) if c == 0.0 => Expr::neg(b),
            (a, b) => Expr::Binary(BinaryOp::Sub, Box::new(a), Box::new(b)),
        }
    }

    /// Product with constant folding and the `0 * x` / `1 * x` identities.
    pub fn mul(a: Expr, b: Expr) -> Expr {
        match (a, b) {
            (Expr::Constant(x), Expr::Constant(y)) => Expr::Constant(x * y),
            (Expr::Constant(c), _) | (_, Expr::Constant(c)) if c == 0.0 => Expr::Constant(0.0),
            (Expr::Constant(c), b) if c == 1.0 => b,
            (a, Expr::Constant(c)) if c == 1.0 => a,
            (Expr::Constant(c), b) if c == -1.0 => Expr::neg(b),
            (a, Expr::Constant(c)) if c == -1.0 => Expr::neg(a),
            // collect nested constants: c1 * (c2 * e) -> (c1*c2) * e
            (Expr::Constant(c1), Expr::Binary(BinaryOp::Mul, l, r)) => match *l {
                Expr::Constant(c2) => Expr::mul(Expr::Constant(c1 * c2), *r),
                l => Expr::Binary(BinaryOp::Mul, Box::new(Expr::Constant(c1)), Box::new(Expr::Binary(BinaryOp::Mul, Box::new(l), r))),
            },
            (a, Expr::Constant(c)) => Expr::mul(Expr::Constant(c), a),
            (a, b) => Expr::Binary(BinaryOp::Mul, Box::new(a), Box::new(b)),
        }
    }

    /// Quotient with constant folding and the `x / 1` identity.
    pub fn div(a: Expr, b: Expr) -> Expr {
        match (a, b) {
            (Expr::Constant(x), Expr::Constant(y)) if y != 0.0 => Expr::Constant(x / y),
            (a, Expr::Constant(c)) if c == 1.0 => a,
            (Expr::Constant(c), b) if c == 0.0 => {
                // 0 / e -> 0; division-by-zero at runtime is the caller's
                // problem only when the numerator survives
                let _ = b;
                Expr::Constant(0.0)
            }
            (a, b) => Expr::Binary(BinaryOp::Div, Box::new(a), Box::new(b)),
        }
    }

    /// Power with constant folding and the `x^0` / `x^1` identities.
    pub fn pow(a: Expr, b: Expr) -> Expr {
        match (a, b) {
            (Expr::Constant(x), Expr::Constant(y)) => {
                let v = x.powf(y);
                if v.is_finite() {
                    Expr::Constant(v)
                } else {
                    Expr::Binary(BinaryOp::Pow, Box::new(Expr::Constant(x)), Box::new(Expr::Constant(y)))
                }
            }
            (_, Expr::Constant(c)) if c == 0.0 => Expr::Constant(1.0),
            (a, Expr::Constant(c)) if c == 1.0 => a,
            (a, b) => Expr::Binary(BinaryOp::Pow, Box::new(a), Box::new(b)),
        }
    }

    pub fn neg(a: Expr) -> Expr {
        match a {
            Expr::Constant(c) => Expr::Constant(-c),
            Expr::Unary(UnaryOp::Neg, inner) => *inner,
            a => Expr::Unary(UnaryOp::Neg, Box::new(a)),
        }
    }

    pub fn unary(op: UnaryOp, a: Expr) -> Expr {
        if op == UnaryOp::Neg {
            return Expr::neg(a);
        }
        Expr::Unary(op, Box::new(a))
    }

    pub fn sin(a: Expr) -> Expr {
        Expr::unary(UnaryOp::Sin, a)
    }

    pub fn cos(a: Expr) -> Expr {
        Expr::unary(UnaryOp::Cos, a)
    }

    pub fn exp(a: Expr) -> Expr {
        Expr::unary(UnaryOp::Exp, a)
    }

    pub fn log(a: Expr) -> Expr {
        Expr::unary(UnaryOp::Log, a)
    }

    pub fn sqrt(a: Expr) -> Expr {
        Expr::unary(UnaryOp::Sqrt, a)
    }

    /// True exactly for the folded zero constant.
    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Constant(c) if *c == 0.0)
    }

    /// The set of variable names appearing in the tree, sorted.
    pub fn free_variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_variables(&mut out);
        out
    }

    fn collect_variables(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Constant(_) => {}
            Expr::Variable(name) => {
                out.insert(name.clone());
            }
            Expr::Unary(_, a) => a.collect_variables(out),
            Expr::Binary(_, a, b) => {
                a.collect_variables(out);
                b.collect_variables(out);
            }
        }
    }
}

/// True for `[A-Za-z_][A-Za-z0-9_]*`.
pub fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Variable bindings for evaluation. Must be total over the free
/// variables of the expression being evaluated.
#[derive(Debug, Clone, Default)]
pub struct Binding {
    values: HashMap<String, f64>,
}

impl Binding {
    pub fn new() -> Binding {
        Binding::default()
    }

    pub fn from_pairs<I, S>(pairs: I) -> Binding
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut b = Binding::new();
        for (name, value) in pairs {
            b.set(name, value);
        }
        b
    }

    pub fn set(&mut self, name: impl Into<String>, value: f64) -> &mut Self {
        self.values.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }
}

/// Evaluation failure: an unbound variable or a domain error.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    Unbound(String),
    /// log of a non-positive value, sqrt of a negative, division by zero,
    /// or a non-finite intermediate (overflow, 0^negative, ...).
    Domain { op: String, detail: String },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::Unbound(name) => write!(f, "unbound variable '{name}'"),
            EvalError::Domain { op, detail } => write!(f, "domain error in {op}: {detail}"),
        }
    }
}

impl std::error::Error for EvalError {}

fn domain_err(op: &str, detail: String) -> EvalError {
    EvalError::Domain { op: op.to_string(), detail }
}

/// IEEE-double evaluation of the tree under `b`.
pub fn eval(e: &Expr, b: &Binding) -> Result<f64, EvalError> {
    let v = eval_inner(e, b)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(domain_err("evaluation", format!("non-finite result {v}")))
    }
}

fn eval_inner(e: &Expr, b: &Binding) -> Result<f64, EvalError> {
    match e {
        Expr::Constant(c) => Ok(*c),
        Expr::Variable(name) => b.get(name).ok_or_else(|| EvalError::Unbound(name.clone())),
        Expr::Unary(op, a) => {
            let x = eval_inner(a, b)?;
            match op {
                UnaryOp::Neg => Ok(-x),
                UnaryOp::Sin => Ok(x.sin()),
                UnaryOp::Cos => Ok(x.cos()),
                UnaryOp::Exp => Ok(x.exp()),
                UnaryOp::Log => {
                    if x <= 0.0 {
                        Err(domain_err("log", format!("argument {x} is not positive")))
                    } else {
                        Ok(x.ln())
                    }
                }
                UnaryOp::Sqrt => {
                    if x < 0.0 {
                        Err(domain_err("sqrt", format!("argument {x} is negative")))
                    } else {
                        Ok(x.sqrt())
                    }
                }
            }
        }
        Expr::Binary(op, a, bb) => {
            let x = eval_inner(a, b)?;
            let y = eval_inner(bb, b)?;
            match op {
                BinaryOp::Add => Ok(x + y),
                BinaryOp::Sub => Ok(x - y),
                BinaryOp::Mul => Ok(x * y),
                BinaryOp::Div => {
                    if y == 0.0 {
                        Err(domain_err("division", "division by zero".to_string()))
                    } else {
                        Ok(x / y)
                    }
                }
                BinaryOp::Pow => {
                    let v = x.powf(y);
                    if v.is_nan() {
                        Err(domain_err("pow", format!("{x}^{y} is undefined over the reals")))
                    } else {
                        Ok(v)
                    }
                }
            }
        }
    }
}

/// Exact partial derivative of `e` with respect to `v`, constant-folded.
///
/// `a^b` with non-constant exponent differentiates through the exp/log
/// identity, so it is only valid where `a > 0` — same domain as its
/// evaluation.
pub fn diff(e: &Expr, v: &str) -> Expr {
    match e {
        Expr::Constant(_) => Expr::Constant(0.0),
        Expr::Variable(name) => {
            if name == v {
                Expr::Constant(1.0)
            } else {
                Expr::Constant(0.0)
            }
        }
        Expr::Unary(op, a) => {
            let da = diff(a, v);
            if da.is_zero() {
                return Expr::Constant(0.0);
            }
            match op {
                UnaryOp::Neg => Expr::neg(da),
                UnaryOp::Sin => Expr::mul(Expr::cos((**a).clone()), da),
                UnaryOp::Cos => Expr::neg(Expr::mul(Expr::sin((**a).clone()), da)),
                UnaryOp::Exp => Expr::mul(Expr::exp((**a).clone()), da),
                UnaryOp::Log => Expr::div(da, (**a).clone()),
                UnaryOp::Sqrt => Expr::div(da, Expr::mul(Expr::Constant(2.0), Expr::sqrt((**a).clone()))),
            }
        }
        Expr::Binary(op, a, b) => {
            let da = diff(a, v);
            let db = diff(b, v);
            match op {
                BinaryOp::Add => Expr::add(da, db),
                BinaryOp::Sub => Expr::sub(da, db),
                BinaryOp::Mul => Expr::add(
                    Expr::mul(da, (**b).clone()),
                    Expr::mul((**a).clone(), db),
                ),
                BinaryOp::Div => {
                    // (a/b)' = (a'b - ab') / b^2
                    if db.is_zero() {
                        Expr::div(da, (**b).clone())
                    } else {
                        Expr::div(
                            Expr::sub(Expr::mul(da, (**b).clone()), Expr::mul((**a).clone(), db)),
                            Expr::pow((**b).clone(), Expr::Constant(2.0)),
                        )
                    }
                }
                BinaryOp::Pow => {
                    if let Expr::Constant(c) = **b {
                        // (a^c)' = c * a^(c-1) * a'
                        Expr::mul(
                            Expr::Constant(c),
                            Expr::mul(Expr::pow((**a).clone(), Expr::Constant(c - 1.0)), da),
                        )
                    } else {
                        // a^b = exp(b log a):
                        // (a^b)' = a^b * (b' log a + b a'/a)
                        Expr::mul(
                            e.clone(),
                            Expr::add(
                                Expr::mul(db, Expr::log((**a).clone())),
                                Expr::mul((**b).clone(), Expr::div(da, (**a).clone())),
                            ),
                        )
                    }
                }
            }
        }
    }
}

/// Matrix of partials: entry `(i, j) = diff(es[i], vs[j])`.
pub fn jacobian(es: &[Expr], vs: &[&str]) -> Vec<Vec<Expr>> {
    es.iter()
        .map(|e| vs.iter().map(|v| diff(e, v)).collect())
        .collect()
}

/// Replace every occurrence of `var` by `replacement`, re-folding along
/// the way.
pub fn substitute(e: &Expr, var: &str, replacement: &Expr) -> Expr {
    match e {
        Expr::Constant(c) => Expr::Constant(*c),
        Expr::Variable(name) => {
            if name == var {
                replacement.clone()
            } else {
                Expr::Variable(name.clone())
            }
        }
        Expr::Unary(op, a) => Expr::unary(*op, substitute(a, var, replacement)),
        Expr::Binary(op, a, b) => {
            let a = substitute(a, var, replacement);
            let b = substitute(b, var, replacement);
            match op {
                BinaryOp::Add => Expr::add(a, b),
                BinaryOp::Sub => Expr::sub(a, b),
                BinaryOp::Mul => Expr::mul(a, b),
                BinaryOp::Div => Expr::div(a, b),
                BinaryOp::Pow => Expr::pow(a, b),
            }
        }
    }
}

// ---------------------------------------------------------------------
// Printing
// ---------------------------------------------------------------------

// Precedence levels used by the printer: additive 1, multiplicative 2,
// power 3, atoms 4. '^' is right-associative.
fn precedence(e: &Expr) -> u8 {
    match e {
        Expr::Constant(c) if *c < 0.0 => 1,
        Expr::Constant(_) | Expr::Variable(_) => 4,
        Expr::Unary(UnaryOp::Neg, _) => 1,
        Expr::Unary(..) => 4,
        Expr::Binary(BinaryOp::Add | BinaryOp::Sub, ..) => 1,
        Expr::Binary(BinaryOp::Mul | BinaryOp::Div, ..) => 2,
        Expr::Binary(BinaryOp::Pow, ..) => 3,
    }
}

fn fmt_child(f: &mut fmt::Formatter<'_>, child: &Expr, min_prec: u8) -> fmt::Result {
    if precedence(child) < min_prec {
        write!(f, "({child})")
    } else {
        write!(f, "{child}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Constant(c) => write!(f, "{c}"),
            Expr::Variable(name) => write!(f, "{name}"),
            // '-' binds tighter than '^' in the grammar ("-x^2" is
            // "(-x)^2"), so any non-atomic child needs parentheses
            Expr::Unary(UnaryOp::Neg, a) => {
                write!(f, "-")?;
                fmt_child(f, a, 4)
            }
            Expr::Unary(op, a) => write!(f, "{}({a})", op.name()),
            Expr::Binary(op, a, b) => match op {
                BinaryOp::Add => {
                    fmt_child(f, a, 1)?;
                    write!(f, " + ")?;
                    fmt_child(f, b, 2)
                }
                BinaryOp::Sub => {
                    fmt_child(f, a, 1)?;
                    write!(f, " - ")?;
                    fmt_child(f, b, 2)
                }
                BinaryOp::Mul => {
                    fmt_child(f, a, 2)?;
                    write!(f, "*")?;
                    fmt_child(f, b, 3)
                }
                BinaryOp::Div => {
                    fmt_child(f, a, 2)?;
                    write!(f, "/")?;
                    fmt_child(f, b, 3)
                }
                BinaryOp::Pow => {
                    fmt_child(f, a, 4)?;
                    write!(f, "^")?;
                    // '^' is right-associative: a^b^c = a^(b^c)
                    fmt_child(f, b, 3)
                }
            },
        }
    }
}

// ---------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------

/// Parse failure with the byte offset where it happened.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at offset {}", self.message, self.offset)
    }
}

impl std::error::Error for ParseError {}

struct Parser<'a> {
    input: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(input: &'a str) -> Self {
        Parser { input, pos: 0 }
    }

    fn error(&self, message: impl Into<String>) -> ParseError {
        ParseError { offset: self.pos, message: message.into() }
    }

    fn peek(&self) -> Option<char> {
        self.input[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_whitespace(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.bump();
        }
    }

    /// Consume `c` if it is next (after whitespace).
    fn eat(&mut self, c: char) -> bool {
        self.skip_whitespace();
        if self.peek() == Some(c) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn parse_expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_term()?;
        loop {
            self.skip_whitespace();
            match self.peek() {
                Some('+') => {
                    self.bump();
                    let rhs = self.parse_term()?;
                    lhs = Expr::add(lhs, rhs);
                }
                Some('-') => {
                    self.bump();
                    let rhs = self.parse_term()?;
                    lhs = Expr::sub(lhs, rhs);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn parse_term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_factor()?;
        loop {
            self.skip_whitespace();
            match self.peek() {
                Some('*') => {
                    self.bump();
                    let rhs = self.parse_factor()?;
                    lhs = Expr::mul(lhs, rhs);
                }
                Some('/') => {
                    self.bump();
                    let rhs = self.parse_factor()?;
                    lhs = Expr::div(lhs, rhs);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn parse_factor(&mut self) -> Result<Expr, ParseError> {
        let base = self.parse_base()?;
        if self.eat('^') {
            let exponent = self.parse_factor()?;
            Ok(Expr::pow(base, exponent))
        } else {
            Ok(base)
        }
    }

    fn parse_base(&mut self) -> Result<Expr, ParseError> {
        self.skip_whitespace();
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some('-') => {
                self.bump();
                Ok(Expr::neg(self.parse_base()?))
            }
            Some('(') => {
                self.bump();
                let inner = self.parse_expr()?;
                self.skip_whitespace();
                if !self.eat(')') {
                    return Err(self.error("expected ')'"));
                }
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => self.parse_number(),
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {
                let start = self.pos;
                let name = self.parse_ident();
                if self.eat('(') {
                    let op = UnaryOp::from_function_name(&name).ok_or(ParseError {
                        offset: start,
                        message: format!("unknown function '{name}'"),
                    })?;
                    let arg = self.parse_expr()?;
                    self.skip_whitespace();
                    if !self.eat(')') {
                        return Err(self.error("expected ')'"));
                    }
                    Ok(Expr::unary(op, arg))
                } else {
                    Ok(Expr::Variable(name))
                }
            }
            Some(c) => Err(self.error(format!("unexpected character '{c}'"))),
        }
    }

    fn parse_ident(&mut self) -> String {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == '_') {
            self.bump();
        }
        self.input[start..self.pos].to_string()
    }

    fn parse_number(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.bump();
        }
        if self.peek() == Some('.') {
            self.bump();
            while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                self.bump();
            }
        }
        // exponent part, only when followed by digits (or sign + digits)
        if matches!(self.peek(), Some('e') | Some('E')) {
            let mark = self.pos;
            self.bump();
            if matches!(self.peek(), Some('+') | Some('-')) {
                self.bump();
            }
            if matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                    self.bump();
                }
            } else {
                self.pos = mark;
            }
        }
        let text = &self.input[start..self.pos];
        text.parse::<f64>().map(Expr::Constant).map_err(|_| ParseError {
            offset: start,
            message: format!("invalid number '{text}'"),
        })
    }
}

/// Parse an infix expression. Round-trip `parse(print(e))` is
/// semantics-preserving.
pub fn parse(text: &str) -> Result<Expr, ParseError> {
    let mut p = Parser::new(text);
    let e = p.parse_expr()?;
    p.skip_whitespace();
    if p.pos != text.len() {
        return Err(p.error("trailing input"));
    }
    Ok(e)
}
