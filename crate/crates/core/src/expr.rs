//! Expression language for vector fields `f(x, u)` and Lyapunov candidates `V(x, y)`.
//!
//! Variables are `x<i>` and `y<i>` (first and second state argument, `1 <= i <= n`)
//! and `u<i>` and `v<i>` (first and second input argument, `1 <= i <= m`).
//!
//! ```text
//! expr     := term (('+' | '-') term)*
//! term     := unary (('*' | '/') unary)*
//! unary    := '-' unary | power
//! power    := atom ('^' exponent)*
//! exponent := '-' exponent | atom
//! atom     := number | variable | func '(' expr ')' | '(' expr ')'
//! func     := exp | log | sin | cos | tanh | sqrt | abs
//! ```
//!
//! Binary operators are left-associative within a tier, including `^`.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("variable `{name}` out of range (declared dimension {dim})")]
    DimensionOutOfRange { name: String, dim: usize },
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("domain error: {op} of {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("non-finite value produced by `{0}`")]
    NonFinite(String),
    #[error("cannot differentiate `{0}`: abs is not smooth")]
    NonSmooth(String),
    #[error("cannot differentiate `{0}`: exponent depends on a variable")]
    VariableExponent(String),
}

/// Which argument slot a variable refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VarKind {
    /// First state argument `x`.
    X,
    /// Second state argument `y` (the primed state).
    Y,
    /// First input argument `u`.
    U,
    /// Second input argument `v` (the primed input).
    V,
}

impl VarKind {
    fn prefix(self) -> char {
        match self {
            VarKind::X => 'x',
            VarKind::Y => 'y',
            VarKind::U => 'u',
            VarKind::V => 'v',
        }
    }
}

/// A variable reference; `index` is zero-based, printed one-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    pub kind: VarKind,
    pub index: usize,
}

impl Var {
    pub fn new(kind: VarKind, index: usize) -> Self {
        Var { kind, index }
    }

    pub fn x(index: usize) -> Self {
        Var::new(VarKind::X, index)
    }

    pub fn y(index: usize) -> Self {
        Var::new(VarKind::Y, index)
    }

    pub fn u(index: usize) -> Self {
        Var::new(VarKind::U, index)
    }

    pub fn v(index: usize) -> Self {
        Var::new(VarKind::V, index)
    }

    /// Parses a name such as `x3` without any dimension check.
    pub fn from_name(name: &str) -> Option<Var> {
        let mut chars = name.chars();
        let kind = match chars.next()? {
            'x' => VarKind::X,
            'y' => VarKind::Y,
            'u' => VarKind::U,
            'v' => VarKind::V,
            _ => return None,
        };
        let digits = chars.as_str();
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
            return None;
        }
        let one_based: usize = digits.parse().ok()?;
        Some(Var::new(kind, one_based - 1))
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind.prefix(), self.index + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sin,
    Cos,
    Tanh,
    Sqrt,
    Abs,
}

impl UnaryOp {
    fn func_name(self) -> Option<&'static str> {
        Some(match self {
            UnaryOp::Neg => return None,
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Abs => "abs",
        })
    }

    fn from_func_name(name: &str) -> Option<UnaryOp> {
        Some(match name {
            "exp" => UnaryOp::Exp,
            "log" => UnaryOp::Log,
            "sin" => UnaryOp::Sin,
            "cos" => UnaryOp::Cos,
            "tanh" => UnaryOp::Tanh,
            "sqrt" => UnaryOp::Sqrt,
            "abs" => UnaryOp::Abs,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

/// Parsed expression tree. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

/// Declared dimensions used to validate variable indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    /// State dimension (bounds `x<i>` and `y<i>`).
    pub n: usize,
    /// Input dimension (bounds `u<i>` and `v<i>`).
    pub m: usize,
}

impl Dims {
    pub fn new(n: usize, m: usize) -> Self {
        Dims { n, m }
    }
}

/// Values for the four argument slots. Missing entries are unbound.
#[derive(Debug, Clone, Copy, Default)]
pub struct Env<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub u: &'a [f64],
    pub v: &'a [f64],
}

impl<'a> Env<'a> {
    pub fn new(x: &'a [f64], y: &'a [f64], u: &'a [f64], v: &'a [f64]) -> Self {
        Env { x, y, u, v }
    }

    pub fn get(&self, var: Var) -> Option<f64> {
        let slot = match var.kind {
            VarKind::X => self.x,
            VarKind::Y => self.y,
            VarKind::U => self.u,
            VarKind::V => self.v,
        };
        slot.get(var.index).copied()
    }
}

/// Parses `text`, checking every variable against `dims`.
pub fn parse(text: &str, dims: Dims) -> Result<Expr, ExprError> {
    let mut parser = Parser::new(text, dims)?;
    let expr = parser.expr()?;
    match parser.peek() {
        Token::End => Ok(expr),
        tok => Err(parser.error(format!("unexpected {}", tok.describe()))),
    }
}

impl Expr {
    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn var(v: Var) -> Expr {
        Expr::Var(v)
    }

    fn is_const(&self, c: f64) -> bool {
        matches!(self, Expr::Const(k) if *k == c)
    }

    /// Evaluates against `env`. Any non-finite intermediate is an error.
    pub fn eval(&self, env: &Env<'_>) -> Result<f64, ExprError> {
        let value = match self {
            Expr::Const(c) => *c,
            Expr::Var(v) => env.get(*v).ok_or_else(|| ExprError::Unbound(v.to_string()))?,
            Expr::Unary(op, arg) => {
                let a = arg.eval(env)?;
                match op {
                    UnaryOp::Neg => -a,
                    UnaryOp::Exp => a.exp(),
                    UnaryOp::Log => {
                        if a <= 0.0 {
                            return Err(ExprError::Domain { op: "log", value: a });
                        }
                        a.ln()
                    }
                    UnaryOp::Sin => a.sin(),
                    UnaryOp::Cos => a.cos(),
                    UnaryOp::Tanh => a.tanh(),
                    UnaryOp::Sqrt => {
                        if a < 0.0 {
                            return Err(ExprError::Domain { op: "sqrt", value: a });
                        }
                        a.sqrt()
                    }
                    UnaryOp::Abs => a.abs(),
                }
            }
            Expr::Binary(op, lhs, rhs) => {
                let a = lhs.eval(env)?;
                let b = rhs.eval(env)?;
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                    BinOp::Pow => pow(a, b),
                }
            }
        };
        if value.is_finite() {
            Ok(value)
        } else {
            Err(ExprError::NonFinite(self.to_string()))
        }
    }

    /// Evaluates with bindings given by name, e.g. `{"x1": 2.0}`.
    pub fn eval_map(&self, bindings: &HashMap<String, f64>) -> Result<f64, ExprError> {
        let mut slots: [Vec<f64>; 4] = Default::default();
        let mut bound: [Vec<bool>; 4] = Default::default();
        for (name, value) in bindings {
            let var = Var::from_name(name).ok_or_else(|| ExprError::UnknownVariable(name.clone()))?;
            let k = var.kind as usize;
            if slots[k].len() <= var.index {
                slots[k].resize(var.index + 1, 0.0);
                bound[k].resize(var.index + 1, false);
            }
            slots[k][var.index] = *value;
            bound[k][var.index] = true;
        }
        let mut missing = None;
        self.visit_vars(&mut |v| {
            let k = v.kind as usize;
            if missing.is_none() && !bound[k].get(v.index).copied().unwrap_or(false) {
                missing = Some(v);
            }
        });
        if let Some(v) = missing {
            return Err(ExprError::Unbound(v.to_string()));
        }
        self.eval(&Env::new(&slots[0], &slots[1], &slots[2], &slots[3]))
    }

    pub fn visit_vars(&self, f: &mut impl FnMut(Var)) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(v) => f(*v),
            Expr::Unary(_, a) => a.visit_vars(f),
            Expr::Binary(_, a, b) => {
                a.visit_vars(f);
                b.visit_vars(f);
            }
        }
    }

    /// Sorted, deduplicated variables.
    pub fn variables(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.visit_vars(&mut |v| out.push(v));
        out.sort();
        out.dedup();
        out
    }

    pub fn uses_kind(&self, kind: VarKind) -> bool {
        let mut found = false;
        self.visit_vars(&mut |v| found |= v.kind == kind);
        found
    }

    pub fn contains_abs(&self) -> bool {
        match self {
            Expr::Const(_) | Expr::Var(_) => false,
            Expr::Unary(UnaryOp::Abs, _) => true,
            Expr::Unary(_, a) => a.contains_abs(),
            Expr::Binary(_, a, b) => a.contains_abs() || b.contains_abs(),
        }
    }

    fn is_variable_free(&self) -> bool {
        let mut free = true;
        self.visit_vars(&mut |_| free = false);
        free
    }

    /// Replaces every variable by the expression `f` returns for it.
    pub fn substitute(&self, f: &impl Fn(Var) -> Expr) -> Expr {
        match self {
            Expr::Const(c) => Expr::Const(*c),
            Expr::Var(v) => f(*v),
            Expr::Unary(op, a) => Expr::Unary(*op, Box::new(a.substitute(f))),
            Expr::Binary(op, a, b) => Expr::Binary(*op, Box::new(a.substitute(f)), Box::new(b.substitute(f))),
        }
    }

    /// Exact symbolic partial derivative with light simplification.
    pub fn diff(&self, var: Var) -> Result<Expr, ExprError> {
        Ok(match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(v) => Expr::Const(if *v == var { 1.0 } else { 0.0 }),
            Expr::Unary(op, a) => {
                let da = a.diff(var)?;
                if da.is_const(0.0) && *op != UnaryOp::Abs {
                    return Ok(Expr::Const(0.0));
                }
                let a = (**a).clone();
                match op {
                    UnaryOp::Neg => neg(da),
                    UnaryOp::Exp => mul(Expr::Unary(UnaryOp::Exp, Box::new(a)), da),
                    UnaryOp::Log => div(da, a),
                    UnaryOp::Sin => mul(Expr::Unary(UnaryOp::Cos, Box::new(a)), da),
                    UnaryOp::Cos => neg(mul(Expr::Unary(UnaryOp::Sin, Box::new(a)), da)),
                    UnaryOp::Tanh => {
                        let t = Expr::Unary(UnaryOp::Tanh, Box::new(a));
                        mul(sub(Expr::Const(1.0), powc(t, 2.0)), da)
                    }
                    UnaryOp::Sqrt => div(da, mul(Expr::Const(2.0), Expr::Unary(UnaryOp::Sqrt, Box::new(a)))),
                    UnaryOp::Abs => {
                        if da.is_const(0.0) {
                            return Ok(Expr::Const(0.0));
                        }
                        return Err(ExprError::NonSmooth(self.to_string()));
                    }
                }
            }
            Expr::Binary(op, a, b) => match op {
                BinOp::Add => add(a.diff(var)?, b.diff(var)?),
                BinOp::Sub => sub(a.diff(var)?, b.diff(var)?),
                BinOp::Mul => {
                    let (da, db) = (a.diff(var)?, b.diff(var)?);
                    add(mul(da, (**b).clone()), mul((**a).clone(), db))
                }
                BinOp::Div => {
                    let (da, db) = (a.diff(var)?, b.diff(var)?);
                    if db.is_const(0.0) {
                        div(da, (**b).clone())
                    } else {
                        div(
                            sub(mul(da, (**b).clone()), mul((**a).clone(), db)),
                            powc((**b).clone(), 2.0),
                        )
                    }
                }
                BinOp::Pow => {
                    if !b.is_variable_free() {
                        return Err(ExprError::VariableExponent(self.to_string()));
                    }
                    let da = a.diff(var)?;
                    if da.is_const(0.0) {
                        return Ok(Expr::Const(0.0));
                    }
                    let exponent = (**b).clone();
                    let lowered = match &exponent {
                        Expr::Const(c) => Expr::Const(c - 1.0),
                        e => sub(e.clone(), Expr::Const(1.0)),
                    };
                    mul(mul(exponent, pow_expr((**a).clone(), lowered)), da)
                }
            },
        })
    }
}

fn pow(a: f64, b: f64) -> f64 {
    if b == b.trunc() && b.abs() <= i32::MAX as f64 {
        a.powi(b as i32)
    } else {
        a.powf(b)
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(c) if c == 0.0 => Expr::Const(0.0),
        Expr::Unary(UnaryOp::Neg, inner) => *inner,
        a => Expr::Unary(UnaryOp::Neg, Box::new(a)),
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (a, b) if b.is_const(0.0) => a,
        (a, b) if a.is_const(0.0) => b,
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
        (a, b) => Expr::Binary(BinOp::Add, Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (a, b) if b.is_const(0.0) => a,
        (a, b) if a.is_const(0.0) => neg(b),
        (Expr::Const(x), Expr::Const(y)) if x >= y => Expr::Const(x - y),
        (a, b) => Expr::Binary(BinOp::Sub, Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (a, b) if a.is_const(0.0) || b.is_const(0.0) => Expr::Const(0.0),
        (a, b) if a.is_const(1.0) => b,
        (a, b) if b.is_const(1.0) => a,
        (Expr::Const(x), Expr::Const(y)) if x * y >= 0.0 => Expr::Const(x * y),
        (a, b) => Expr::Binary(BinOp::Mul, Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (a, _) if a.is_const(0.0) => Expr::Const(0.0),
        (a, b) if b.is_const(1.0) => a,
        (a, b) => Expr::Binary(BinOp::Div, Box::new(a), Box::new(b)),
    }
}

fn pow_expr(base: Expr, exponent: Expr) -> Expr {
    if exponent.is_const(1.0) {
        base
    } else if exponent.is_const(0.0) {
        Expr::Const(1.0)
    } else {
        Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exponent))
    }
}

fn powc(base: Expr, c: f64) -> Expr {
    pow_expr(base, Expr::Const(c))
}

// ---------------------------------------------------------------------------
// Printing
// ---------------------------------------------------------------------------

const PREC_ADD: u8 = 1;
const PREC_MUL: u8 = 2;
const PREC_NEG: u8 = 3;
const PREC_POW: u8 = 4;
const PREC_ATOM: u8 = 5;

impl Expr {
    fn precedence(&self) -> u8 {
        match self {
            Expr::Const(c) if c.is_sign_negative() => PREC_NEG,
            Expr::Const(_) | Expr::Var(_) => PREC_ATOM,
            Expr::Unary(UnaryOp::Neg, _) => PREC_NEG,
            Expr::Unary(_, _) => PREC_ATOM,
            Expr::Binary(BinOp::Add | BinOp::Sub, _, _) => PREC_ADD,
            Expr::Binary(BinOp::Mul | BinOp::Div, _, _) => PREC_MUL,
            Expr::Binary(BinOp::Pow, _, _) => PREC_POW,
        }
    }

    fn write_wrapped(&self, f: &mut fmt::Formatter<'_>, wrap: bool) -> fmt::Result {
        if wrap {
            write!(f, "({self})")
        } else {
            write!(f, "{self}")
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => {
                if c.is_sign_negative() {
                    write!(f, "-{}", -c)
                } else {
                    write!(f, "{c}")
                }
            }
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Unary(UnaryOp::Neg, a) => {
                f.write_str("-")?;
                a.write_wrapped(f, a.precedence() < PREC_NEG)
            }
            Expr::Unary(op, a) => write!(f, "{}({a})", op.func_name().unwrap_or("?")),
            Expr::Binary(BinOp::Pow, base, exponent) => {
                base.write_wrapped(f, base.precedence() < PREC_POW)?;
                f.write_str("^")?;
                exponent.write_wrapped(f, exponent.precedence() < PREC_ATOM)
            }
            Expr::Binary(op, a, b) => {
                let prec = self.precedence();
                a.write_wrapped(f, a.precedence() < prec)?;
                write!(f, "{}", op.symbol())?;
                b.write_wrapped(f, b.precedence() <= prec)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    End,
}

impl Token {
    fn describe(&self) -> String {
        match self {
            Token::Num(n) => format!("number {n}"),
            Token::Ident(s) => format!("identifier `{s}`"),
            Token::Op(c) => format!("`{c}`"),
            Token::LParen => "`(`".to_string(),
            Token::RParen => "`)`".to_string(),
            Token::End => "end of input".to_string(),
        }
    }
}

fn tokenize(text: &str) -> Result<Vec<(Token, usize)>, ExprError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == '.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let lit = &text[start..i];
            let value: f64 = lit.parse().map_err(|_| ExprError::Syntax {
                pos: start,
                msg: format!("malformed number `{lit}`"),
            })?;
            out.push((Token::Num(value), start));
        } else if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((Token::Ident(text[start..i].to_string()), start));
        } else {
            let tok = match c {
                '+' | '-' | '*' | '/' | '^' => Token::Op(c),
                '(' => Token::LParen,
                ')' => Token::RParen,
                _ => {
                    return Err(ExprError::Syntax {
                        pos: start,
                        msg: format!("unexpected character `{c}`"),
                    })
                }
            };
            out.push((tok, start));
            i += c.len_utf8();
        }
    }
    out.push((Token::End, text.len()));
    Ok(out)
}

struct Parser {
    tokens: Vec<(Token, usize)>,
    cursor: usize,
    dims: Dims,
}

impl Parser {
    fn new(text: &str, dims: Dims) -> Result<Self, ExprError> {
        if text.trim().is_empty() {
            return Err(ExprError::Syntax {
                pos: 0,
                msg: "empty expression".to_string(),
            });
        }
        Ok(Parser {
            tokens: tokenize(text)?,
            cursor: 0,
            dims,
        })
    }

    fn peek(&self) -> &Token {
        &self.tokens[self.cursor].0
    }

    fn pos(&self) -> usize {
        self.tokens[self.cursor].1
    }

    fn bump(&mut self) -> Token {
        let tok = self.tokens[self.cursor].0.clone();
        if self.cursor + 1 < self.tokens.len() {
            self.cursor += 1;
        }
        tok
    }

    fn error(&self, msg: String) -> ExprError {
        ExprError::Syntax { pos: self.pos(), msg }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        while let Token::Op(c @ ('+' | '-')) = *self.peek() {
            self.bump();
            let rhs = self.term()?;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while let Token::Op(c @ ('*' | '/')) = *self.peek() {
            self.bump();
            let rhs = self.unary()?;
            let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if *self.peek() == Token::Op('-') {
            self.bump();
            return Ok(Expr::Unary(UnaryOp::Neg, Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let mut base = self.atom()?;
        while *self.peek() == Token::Op('^') {
            self.bump();
            let exponent = self.exponent()?;
            base = Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exponent));
        }
        Ok(base)
    }

    fn exponent(&mut self) -> Result<Expr, ExprError> {
        if *self.peek() == Token::Op('-') {
            self.bump();
            return Ok(Expr::Unary(UnaryOp::Neg, Box::new(self.exponent()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        let pos = self.pos();
        match self.bump() {
            Token::Num(n) => Ok(Expr::Const(n)),
            Token::LParen => {
                let inner = self.expr()?;
                self.expect_rparen()?;
                Ok(inner)
            }
            Token::Ident(name) => {
                if let Some(op) = UnaryOp::from_func_name(&name) {
                    if *self.peek() != Token::LParen {
                        return Err(self.error(format!("expected `(` after `{name}`")));
                    }
                    self.bump();
                    let arg = self.expr()?;
                    self.expect_rparen()?;
                    return Ok(Expr::Unary(op, Box::new(arg)));
                }
                let var = Var::from_name(&name).ok_or_else(|| ExprError::UnknownVariable(name.clone()))?;
                let dim = match var.kind {
                    VarKind::X | VarKind::Y => self.dims.n,
                    VarKind::U | VarKind::V => self.dims.m,
                };
                if var.index >= dim {
                    return Err(ExprError::DimensionOutOfRange { name, dim });
                }
                Ok(Expr::Var(var))
            }
            tok => Err(ExprError::Syntax {
                pos,
                msg: format!("expected operand, found {}", tok.describe()),
            }),
        }
    }

    fn expect_rparen(&mut self) -> Result<(), ExprError> {
        match self.peek() {
            Token::RParen => {
                self.bump();
                Ok(())
            }
            tok => Err(self.error(format!("expected `)`, found {}", tok.describe()))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(text: &str, n: usize, m: usize) -> Expr {
        parse(text, Dims::new(n, m)).unwrap()
    }

    fn c(v: f64) -> Box<Expr> {
        Box::new(Expr::Const(v))
    }

    fn var(v: Var) -> Box<Expr> {
        Box::new(Expr::Var(v))
    }

    #[test]
    fn parses_sum_of_scaled_input() {
        let e = p("x1 + 2*u1", 1, 1);
        let want = Expr::Binary(
            BinOp::Add,
            var(Var::x(0)),
            Box::new(Expr::Binary(BinOp::Mul, c(2.0), var(Var::u(0)))),
        );
        assert_eq!(e, want);
    }

    #[test]
    fn parses_squared_difference() {
        let e = p("(exp(x1)-exp(y1))^2", 1, 0);
        let diff = Expr::Binary(
            BinOp::Sub,
            Box::new(Expr::Unary(UnaryOp::Exp, var(Var::x(0)))),
            Box::new(Expr::Unary(UnaryOp::Exp, var(Var::y(0)))),
        );
        assert_eq!(e, Expr::Binary(BinOp::Pow, Box::new(diff), c(2.0)));
    }

    #[test]
    fn precedence_and_associativity() {
        // -x^2 is -(x^2)
        assert_eq!(
            p("-x1^2", 1, 0),
            Expr::Unary(UnaryOp::Neg, Box::new(Expr::Binary(BinOp::Pow, var(Var::x(0)), c(2.0))))
        );
        // a-b-c is (a-b)-c
        let e = p("x1-x2-x3", 3, 0);
        match e {
            Expr::Binary(BinOp::Sub, lhs, rhs) => {
                assert_eq!(*rhs, Expr::Var(Var::x(2)));
                assert!(matches!(*lhs, Expr::Binary(BinOp::Sub, _, _)));
            }
            other => panic!("unexpected {other:?}"),
        }
        // 2^3^2 is (2^3)^2 = 64
        assert_eq!(p("2^3^2", 0, 0).eval(&Env::default()).unwrap(), 64.0);
        assert_eq!(p("2^-1", 0, 0).eval(&Env::default()).unwrap(), 0.5);
        assert_eq!(p("-2*3", 0, 0).eval(&Env::default()).unwrap(), -6.0);
    }

    #[test]
    fn trailing_operator_is_syntax_error_at_end() {
        let err = parse("x1 +", Dims::new(1, 0)).unwrap_err();
        assert_eq!(
            err,
            ExprError::Syntax {
                pos: 4,
                msg: "expected operand, found end of input".to_string()
            }
        );
    }

    #[test]
    fn rejects_bad_variables() {
        assert!(matches!(
            parse("z1", Dims::new(1, 0)),
            Err(ExprError::UnknownVariable(_))
        ));
        assert!(matches!(
            parse("x2", Dims::new(1, 0)),
            Err(ExprError::DimensionOutOfRange { dim: 1, .. })
        ));
        assert!(matches!(
            parse("u1", Dims::new(1, 0)),
            Err(ExprError::DimensionOutOfRange { dim: 0, .. })
        ));
        assert!(matches!(parse("x0", Dims::new(1, 0)), Err(ExprError::UnknownVariable(_))));
        assert!(matches!(parse("  ", Dims::new(1, 0)), Err(ExprError::Syntax { .. })));
        assert!(matches!(parse("(x1", Dims::new(1, 0)), Err(ExprError::Syntax { .. })));
        assert!(matches!(parse("x1 $ 2", Dims::new(1, 0)), Err(ExprError::Syntax { pos: 3, .. })));
    }

    #[test]
    fn eval_examples() {
        let mut b = HashMap::new();
        b.insert("u1".to_string(), 0.3);
        let v = p("-1 + u1", 1, 1).eval_map(&b).unwrap();
        assert!((v - (-0.7)).abs() < 1e-15);

        let mut b = HashMap::new();
        b.insert("x1".to_string(), 0.0);
        assert_eq!(p("exp(x1)", 1, 0).eval_map(&b).unwrap(), 1.0);

        let mut b = HashMap::new();
        b.insert("x1".to_string(), 2.0);
        assert_eq!(
            p("x1*y1", 1, 0).eval_map(&b).unwrap_err(),
            ExprError::Unbound("y1".to_string())
        );
    }

    #[test]
    fn eval_reports_domain_and_nonfinite() {
        let env = Env::new(&[-1.0], &[], &[], &[]);
        assert!(matches!(p("log(x1)", 1, 0).eval(&env), Err(ExprError::Domain { op: "log", .. })));
        assert!(matches!(p("sqrt(x1)", 1, 0).eval(&env), Err(ExprError::Domain { op: "sqrt", .. })));
        assert!(matches!(p("1/(x1+1)", 1, 0).eval(&env), Err(ExprError::NonFinite(_))));
        assert!(matches!(p("exp(1000*x1*x1)", 1, 0).eval(&env), Err(ExprError::NonFinite(_))));
    }

    #[test]
    fn diff_examples() {
        let x1 = Var::x(0);
        assert_eq!(p("x1^2", 1, 0).diff(x1).unwrap().to_string(), "2*x1");
        assert_eq!(
            p("(exp(x1)-exp(y1))^2", 1, 0).diff(x1).unwrap().to_string(),
            "2*(exp(x1)-exp(y1))*exp(x1)"
        );
        assert_eq!(p("x1^2", 1, 0).diff(Var::y(0)).unwrap(), Expr::Const(0.0));
    }

    #[test]
    fn diff_rejects_abs_and_variable_exponents() {
        assert!(matches!(p("abs(x1)", 1, 0).diff(Var::x(0)), Err(ExprError::NonSmooth(_))));
        assert!(matches!(p("x1^x1", 1, 0).diff(Var::x(0)), Err(ExprError::VariableExponent(_))));
        // abs of something independent of the variable is fine
        assert_eq!(p("abs(y1)*x1", 1, 0).diff(Var::x(0)).unwrap().to_string(), "abs(y1)");
        // constant-expression exponents are allowed
        let d = p("x1^(1/2)", 1, 0).diff(Var::x(0)).unwrap();
        let v = d.eval(&Env::new(&[4.0], &[], &[], &[])).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
    }

    #[test]
    fn printer_round_trips() {
        for text in [
            "x1 + 2*u1",
            "-x1^2",
            "(-x1)^2",
            "x1-(x2-x3)",
            "x1/(x2*x3)",
            "2^3^2",
            "2^(3^2)",
            "x1^-2",
            "--x1",
            "-(x1+x2)*x3",
            "sqrt(abs(x1))*tanh(y2)-cos(v1)/sin(u2)",
            "1e-7*x1 + 3.25",
        ] {
            let e = p(text, 3, 2);
            let printed = e.to_string();
            assert_eq!(parse(&printed, Dims::new(3, 2)).unwrap(), e, "{text} -> {printed}");
        }
    }

    #[test]
    fn substitute_renames_variables() {
        let e = p("-x1 + u1", 1, 1);
        let shifted = e.substitute(&|v| match v.kind {
            VarKind::X => Expr::Var(Var::x(v.index + 1)),
            _ => Expr::Var(Var::v(v.index)),
        });
        assert_eq!(shifted.to_string(), "-x2+v1");
    }
}
