//! Expression trees for integrand and endpoint functions.
//!
//! Expressions are parsed from the problem-file grammar, printed back in a
//! canonical form, differentiated symbolically and evaluated either against a
//! named environment ([`VarEnv`]) or, on hot paths, through a [`BoundExpr`]
//! whose variables were resolved to slot indices once.
//!
//! Grammar precedence, loosest first: `+ -`, `* /`, unary `-`, `^`
//! (right-associative). Function calls: `sin cos exp log tanh abs` (one
//! argument) and `min max pow` (two arguments).

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown function `{name}` at line {line}, column {column}")]
    UnknownFunction {
        name: String,
        line: usize,
        column: usize,
    },
    #[error("no binding for variable `{0}`")]
    MissingBinding(String),
    #[error("undeclared variable `{0}`")]
    Undeclared(String),
    #[error("domain error: {func}({arg})")]
    Domain { func: &'static str, arg: f64 },
    #[error("evaluation produced NaN")]
    NotANumber,
    #[error("derivative of `{func}` with respect to `{var}` is not defined (nonsmooth)")]
    Nonsmooth { func: &'static str, var: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Tanh,
    Abs,
    Min,
    Max,
    Pow,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Tanh => "tanh",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
            Func::Pow => "pow",
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "tanh" => Func::Tanh,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            "pow" => Func::Pow,
            _ => return None,
        })
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max | Func::Pow => 2,
            _ => 1,
        }
    }

    fn is_nonsmooth(self) -> bool {
        matches!(self, Func::Abs | Func::Min | Func::Max)
    }

    fn apply(self, args: &[f64]) -> f64 {
        match self {
            Func::Sin => args[0].sin(),
            Func::Cos => args[0].cos(),
            Func::Exp => args[0].exp(),
            Func::Log => args[0].ln(),
            Func::Tanh => args[0].tanh(),
            Func::Abs => args[0].abs(),
            Func::Min => args[0].min(args[1]),
            Func::Max => args[0].max(args[1]),
            Func::Pow => args[0].powf(args[1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Const(f64),
    Var(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Named variable bindings for [`Expr::eval`].
pub type VarEnv = HashMap<String, f64>;

pub fn parse(text: &str) -> Result<Expr, ExprError> {
    let tokens = tokenize(text)?;
    let mut parser = Parser { tokens, pos: 0 };
    let expr = parser.expr()?;
    match parser.peek() {
        Token { kind: TokKind::End, .. } => Ok(expr),
        tok => Err(tok.error("unexpected token")),
    }
}

// Smart constructors. Only constant folding and 0/1 elimination.

pub fn constant(v: f64) -> Expr {
    Expr::Const(v)
}

pub fn var(name: &str) -> Expr {
    Expr::Var(name.to_string())
}

pub fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(c) => Expr::Const(-c),
        a => Expr::Neg(Box::new(a)),
    }
}

#[allow(clippy::redundant_guards)] // float guards, not literal patterns
pub fn add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
        (Expr::Const(x), b) if x == 0.0 => b,
        (a, Expr::Const(y)) if y == 0.0 => a,
        (a, b) => Expr::Add(Box::new(a), Box::new(b)),
    }
}

#[allow(clippy::redundant_guards)]
pub fn sub(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
        (a, Expr::Const(y)) if y == 0.0 => a,
        (Expr::Const(x), b) if x == 0.0 => neg(b),
        (a, b) => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

#[allow(clippy::redundant_guards)]
pub fn mul(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
        (Expr::Const(x), _) | (_, Expr::Const(x)) if x == 0.0 => Expr::Const(0.0),
        (Expr::Const(x), b) if x == 1.0 => b,
        (a, Expr::Const(y)) if y == 1.0 => a,
        (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

#[allow(clippy::redundant_guards)]
pub fn div(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) if y != 0.0 => Expr::Const(x / y),
        (Expr::Const(x), _) if x == 0.0 => Expr::Const(0.0),
        (a, Expr::Const(y)) if y == 1.0 => a,
        (a, b) => Expr::Div(Box::new(a), Box::new(b)),
    }
}

#[allow(clippy::redundant_guards)]
pub fn pow(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) if x.powf(y).is_finite() => Expr::Const(x.powf(y)),
        (_, Expr::Const(y)) if y == 0.0 => Expr::Const(1.0),
        (a, Expr::Const(y)) if y == 1.0 => a,
        (a, b) => Expr::Pow(Box::new(a), Box::new(b)),
    }
}

pub fn call(f: Func, args: Vec<Expr>) -> Expr {
    if args.iter().all(|a| matches!(a, Expr::Const(_))) {
        let vals: Vec<f64> = args
            .iter()
            .map(|a| match a {
                Expr::Const(c) => *c,
                _ => unreachable!(),
            })
            .collect();
        let v = f.apply(&vals);
        if v.is_finite() {
            return Expr::Const(v);
        }
    }
    Expr::Call(f, args)
}

impl Expr {
    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    pub fn variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(v) => {
                out.insert(v.clone());
            }
            Expr::Neg(a) => a.collect_vars(out),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.collect_vars(out)),
        }
    }

    pub fn depends_on(&self, name: &str) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(v) => v == name,
            Expr::Neg(a) => a.depends_on(name),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b) => a.depends_on(name) || b.depends_on(name),
            Expr::Call(_, args) => args.iter().any(|a| a.depends_on(name)),
        }
    }

    pub fn depends_on_any<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> bool {
        names.into_iter().any(|n| self.depends_on(n))
    }

    /// Replaces every occurrence of `name` by `with`. No simplification.
    pub fn substitute(&self, name: &str, with: &Expr) -> Expr {
        self.map_vars(&|v| (v == name).then(|| with.clone()))
    }

    /// Simultaneous renaming, e.g. swapping `t` and `tau`.
    pub fn rename(&self, pairs: &[(&str, &str)]) -> Expr {
        self.map_vars(&|v| {
            pairs
                .iter()
                .find(|(from, _)| *from == v)
                .map(|(_, to)| Expr::Var(to.to_string()))
        })
    }

    fn map_vars(&self, f: &dyn Fn(&str) -> Option<Expr>) -> Expr {
        let bx = |e: &Expr| Box::new(e.map_vars(f));
        match self {
            Expr::Const(c) => Expr::Const(*c),
            Expr::Var(v) => f(v).unwrap_or_else(|| Expr::Var(v.clone())),
            Expr::Neg(a) => Expr::Neg(bx(a)),
            Expr::Add(a, b) => Expr::Add(bx(a), bx(b)),
            Expr::Sub(a, b) => Expr::Sub(bx(a), bx(b)),
            Expr::Mul(a, b) => Expr::Mul(bx(a), bx(b)),
            Expr::Div(a, b) => Expr::Div(bx(a), bx(b)),
            Expr::Pow(a, b) => Expr::Pow(bx(a), bx(b)),
            Expr::Call(func, args) => Expr::Call(*func, args.iter().map(|a| a.map_vars(f)).collect()),
        }
    }

    /// Exact symbolic derivative with respect to `var`.
    pub fn diff(&self, wrt: &str) -> Result<Expr, ExprError> {
        if !self.depends_on(wrt) {
            return Ok(Expr::Const(0.0));
        }
        Ok(match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(v) => Expr::Const(if v == wrt { 1.0 } else { 0.0 }),
            Expr::Neg(a) => neg(a.diff(wrt)?),
            Expr::Add(a, b) => add(a.diff(wrt)?, b.diff(wrt)?),
            Expr::Sub(a, b) => sub(a.diff(wrt)?, b.diff(wrt)?),
            Expr::Mul(a, b) => add(
                mul(a.diff(wrt)?, (**b).clone()),
                mul((**a).clone(), b.diff(wrt)?),
            ),
            Expr::Div(a, b) => div(
                sub(
                    mul(a.diff(wrt)?, (**b).clone()),
                    mul((**a).clone(), b.diff(wrt)?),
                ),
                pow((**b).clone(), Expr::Const(2.0)),
            ),
            Expr::Pow(a, b) => diff_pow(a, b, wrt)?,
            Expr::Call(f, args) => {
                if f.is_nonsmooth() {
                    return Err(ExprError::Nonsmooth {
                        func: f.name(),
                        var: wrt.to_string(),
                    });
                }
                let a = &args[0];
                let da = a.diff(wrt)?;
                match f {
                    Func::Sin => mul(da, call(Func::Cos, vec![a.clone()])),
                    Func::Cos => neg(mul(da, call(Func::Sin, vec![a.clone()]))),
                    Func::Exp => mul(da, call(Func::Exp, vec![a.clone()])),
                    Func::Log => div(da, a.clone()),
                    Func::Tanh => mul(
                        da,
                        sub(
                            Expr::Const(1.0),
                            pow(call(Func::Tanh, vec![a.clone()]), Expr::Const(2.0)),
                        ),
                    ),
                    Func::Pow => diff_pow(&args[0], &args[1], wrt)?,
                    Func::Abs | Func::Min | Func::Max => unreachable!(),
                }
            }
        })
    }

    pub fn eval(&self, env: &VarEnv) -> Result<f64, ExprError> {
        let v = self.eval_checked(env)?;
        if v.is_nan() {
            return Err(ExprError::NotANumber);
        }
        Ok(v)
    }

    fn eval_checked(&self, env: &VarEnv) -> Result<f64, ExprError> {
        Ok(match self {
            Expr::Const(c) => *c,
            Expr::Var(v) => *env
                .get(v)
                .ok_or_else(|| ExprError::MissingBinding(v.clone()))?,
            Expr::Neg(a) => -a.eval_checked(env)?,
            Expr::Add(a, b) => a.eval_checked(env)? + b.eval_checked(env)?,
            Expr::Sub(a, b) => a.eval_checked(env)? - b.eval_checked(env)?,
            Expr::Mul(a, b) => a.eval_checked(env)? * b.eval_checked(env)?,
            Expr::Div(a, b) => a.eval_checked(env)? / b.eval_checked(env)?,
            Expr::Pow(a, b) => checked_pow(a.eval_checked(env)?, b.eval_checked(env)?)?,
            Expr::Call(f, args) => {
                let vals = args
                    .iter()
                    .map(|a| a.eval_checked(env))
                    .collect::<Result<Vec<_>, _>>()?;
                match f {
                    Func::Log if vals[0] <= 0.0 => {
                        return Err(ExprError::Domain {
                            func: "log",
                            arg: vals[0],
                        })
                    }
                    Func::Pow => checked_pow(vals[0], vals[1])?,
                    _ => f.apply(&vals),
                }
            }
        })
    }

    /// Resolves variable names against `layout`.
    pub fn bind(&self, layout: &Layout) -> Result<BoundExpr, ExprError> {
        Ok(BoundExpr(self.bind_node(layout)?))
    }

    fn bind_node(&self, layout: &Layout) -> Result<Node, ExprError> {
        let bx = |e: &Expr| -> Result<Box<Node>, ExprError> { Ok(Box::new(e.bind_node(layout)?)) };
        Ok(match self {
            Expr::Const(c) => Node::Const(*c),
            Expr::Var(v) => Node::Slot(
                layout
                    .slot(v)
                    .ok_or_else(|| ExprError::Undeclared(v.clone()))?,
            ),
            Expr::Neg(a) => Node::Neg(bx(a)?),
            Expr::Add(a, b) => Node::Bin(BinOp::Add, bx(a)?, bx(b)?),
            Expr::Sub(a, b) => Node::Bin(BinOp::Sub, bx(a)?, bx(b)?),
            Expr::Mul(a, b) => Node::Bin(BinOp::Mul, bx(a)?, bx(b)?),
            Expr::Div(a, b) => Node::Bin(BinOp::Div, bx(a)?, bx(b)?),
            Expr::Pow(a, b) => Node::Bin(BinOp::Pow, bx(a)?, bx(b)?),
            Expr::Call(f, args) if f.arity() == 1 => Node::Call1(*f, bx(&args[0])?),
            Expr::Call(f, args) => Node::Call2(*f, bx(&args[0])?, bx(&args[1])?),
        })
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(_) => 3,
            Expr::Const(c) if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) => 3,
            Expr::Pow(..) => 4,
            _ => 5,
        }
    }
}

fn diff_pow(a: &Expr, b: &Expr, wrt: &str) -> Result<Expr, ExprError> {
    if !b.depends_on(wrt) {
        // d(a^c) = c*a^(c-1)*a'
        Ok(mul(
            mul(b.clone(), pow(a.clone(), sub(b.clone(), Expr::Const(1.0)))),
            a.diff(wrt)?,
        ))
    } else if !a.depends_on(wrt) {
        Ok(mul(
            mul(pow(a.clone(), b.clone()), call(Func::Log, vec![a.clone()])),
            b.diff(wrt)?,
        ))
    } else {
        Ok(mul(
            pow(a.clone(), b.clone()),
            add(
                mul(b.diff(wrt)?, call(Func::Log, vec![a.clone()])),
                div(mul(b.clone(), a.diff(wrt)?), a.clone()),
            ),
        ))
    }
}

fn checked_pow(base: f64, exp: f64) -> Result<f64, ExprError> {
    if base < 0.0 && exp.fract() != 0.0 {
        return Err(ExprError::Domain {
            func: "pow",
            arg: base,
        });
    }
    Ok(base.powf(exp))
}

fn fmt_const(c: f64, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if c.is_sign_negative() && c != 0.0 {
        write!(f, "-")?;
    }
    let a = c.abs();
    if a.fract() == 0.0 && a < 1e15 {
        write!(f, "{}", a as i64)
    } else {
        write!(f, "{}", a)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // `min_left`/`min_right`: minimum child precedence printed without parentheses.
        let child = |f: &mut fmt::Formatter<'_>, e: &Expr, min: u8| -> fmt::Result {
            if e.precedence() < min {
                write!(f, "({})", e)
            } else {
                write!(f, "{}", e)
            }
        };
        match self {
            Expr::Const(c) => fmt_const(*c, f),
            Expr::Var(v) => write!(f, "{}", v),
            Expr::Neg(a) => {
                write!(f, "-")?;
                child(f, a, 3)
            }
            Expr::Add(a, b) | Expr::Sub(a, b) => {
                child(f, a, 1)?;
                write!(f, "{}", if matches!(self, Expr::Add(..)) { " + " } else { " - " })?;
                child(f, b, 2)
            }
            Expr::Mul(a, b) | Expr::Div(a, b) => {
                child(f, a, 2)?;
                write!(f, "{}", if matches!(self, Expr::Mul(..)) { "*" } else { "/" })?;
                child(f, b, 3)
            }
            Expr::Pow(a, b) => {
                child(f, a, 5)?;
                write!(f, "^")?;
                child(f, b, 3)
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{}", a)?;
                }
                write!(f, ")")
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Slot-bound evaluation

/// Ordered variable names; a name's position is its slot index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Layout {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Layout {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Layout {
        let mut layout = Layout::default();
        for n in names {
            layout.push(n.into());
        }
        layout
    }

    pub fn push(&mut self, name: String) -> usize {
        if let Some(&i) = self.index.get(&name) {
            return i;
        }
        let i = self.names.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        i
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    Slot(usize),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call1(Func, Box<Node>),
    Call2(Func, Box<Node>, Box<Node>),
}

impl Node {
    fn eval(&self, slots: &[f64]) -> f64 {
        match self {
            Node::Const(c) => *c,
            Node::Slot(i) => slots[*i],
            Node::Neg(a) => -a.eval(slots),
            Node::Bin(op, a, b) => {
                let (x, y) = (a.eval(slots), b.eval(slots));
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                    BinOp::Pow => pow_f(x, y),
                }
            }
            Node::Call1(f, a) => {
                let x = a.eval(slots);
                match f {
                    Func::Log if x <= 0.0 => f64::NAN,
                    _ => f.apply(&[x]),
                }
            }
            Node::Call2(Func::Pow, a, b) => pow_f(a.eval(slots), b.eval(slots)),
            Node::Call2(f, a, b) => f.apply(&[a.eval(slots), b.eval(slots)]),
        }
    }
}

fn pow_f(x: f64, y: f64) -> f64 {
    if y == 2.0 {
        x * x
    } else {
        x.powf(y)
    }
}

/// An expression whose variables are slot indices of a [`Layout`].
/// Domain errors surface as NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundExpr(Node);

impl BoundExpr {
    pub fn constant(c: f64) -> BoundExpr {
        BoundExpr(Node::Const(c))
    }

    #[inline]
    pub fn eval(&self, slots: &[f64]) -> f64 {
        self.0.eval(slots)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.0, Node::Const(c) if c == 0.0)
    }
}

// ---------------------------------------------------------------------------
// Tokenizer and recursive-descent parser

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    Num(f64),
    Ident(String),
    Op(char),
    End,
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokKind,
    line: usize,
    column: usize,
}

impl Token {
    fn error(&self, message: &str) -> ExprError {
        let found = match &self.kind {
            TokKind::Num(n) => format!("number {}", n),
            TokKind::Ident(s) => format!("`{}`", s),
            TokKind::Op(c) => format!("`{}`", c),
            TokKind::End => "end of input".to_string(),
        };
        ExprError::Syntax {
            line: self.line,
            column: self.column,
            message: format!("{}, found {}", message, found),
        }
    }
}

fn tokenize(text: &str) -> Result<Vec<Token>, ExprError> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let (mut line, mut column) = (1usize, 1usize);
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, column);
        if c == '\n' {
            line += 1;
            column = 1;
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            column += 1;
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v = s.parse::<f64>().map_err(|_| ExprError::Syntax {
                line: tl,
                column: tc,
                message: format!("malformed number `{}`", s),
            })?;
            column += i - start;
            tokens.push(Token {
                kind: TokKind::Num(v),
                line: tl,
                column: tc,
            });
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            column += i - start;
            tokens.push(Token {
                kind: TokKind::Ident(chars[start..i].iter().collect()),
                line: tl,
                column: tc,
            });
            continue;
        }
        if "+-*/^(),".contains(c) {
            tokens.push(Token {
                kind: TokKind::Op(c),
                line: tl,
                column: tc,
            });
            column += 1;
            i += 1;
            continue;
        }
        return Err(ExprError::Syntax {
            line: tl,
            column: tc,
            message: format!("unexpected character `{}`", c),
        });
    }
    tokens.push(Token {
        kind: TokKind::End,
        line,
        column,
    });
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn eat(&mut self, op: char) -> bool {
        if self.peek().kind == TokKind::Op(op) {
            self.next();
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat('-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat('/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat('-') {
            Ok(Expr::Neg(Box::new(self.unary()?)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.primary()?;
        if self.eat('^') {
            Ok(Expr::Pow(Box::new(base), Box::new(self.unary()?)))
        } else {
            Ok(base)
        }
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        let tok = self.next();
        match tok.kind {
            TokKind::Num(v) => Ok(Expr::Const(v)),
            TokKind::Ident(ref name) => {
                if self.peek().kind != TokKind::Op('(') {
                    return Ok(Expr::Var(name.clone()));
                }
                let func = Func::from_name(name).ok_or_else(|| ExprError::UnknownFunction {
                    name: name.clone(),
                    line: tok.line,
                    column: tok.column,
                })?;
                self.next();
                let mut args = vec![self.expr()?];
                while self.eat(',') {
                    args.push(self.expr()?);
                }
                if !self.eat(')') {
                    return Err(self.peek().error("expected `)`"));
                }
                if args.len() != func.arity() {
                    return Err(ExprError::Syntax {
                        line: tok.line,
                        column: tok.column,
                        message: format!(
                            "`{}` takes {} argument(s), got {}",
                            func.name(),
                            func.arity(),
                            args.len()
                        ),
                    });
                }
                Ok(Expr::Call(func, args))
            }
            TokKind::Op('(') => {
                let e = self.expr()?;
                if !self.eat(')') {
                    return Err(self.peek().error("expected `)`"));
                }
                Ok(e)
            }
            _ => Err(tok.error("expected a number, variable, function call or `(`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Expr {
        parse(s).unwrap()
    }

    fn env(pairs: &[(&str, f64)]) -> VarEnv {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn parses_with_precedence() {
        assert_eq!(
            p("x^2 + u"),
            Expr::Add(
                Box::new(Expr::Pow(Box::new(var("x")), Box::new(Expr::Const(2.0)))),
                Box::new(var("u"))
            )
        );
        let e = p("-(x^2+u^2)");
        match &e {
            Expr::Neg(inner) => assert!(matches!(**inner, Expr::Add(..))),
            other => panic!("unexpected {:?}", other),
        }
        assert_eq!(e.to_string(), "-(x^2 + u^2)");
        // unary minus binds looser than ^
        assert_eq!(p("-x^2"), Expr::Neg(Box::new(p("x^2"))));
        // ^ is right-associative
        assert_eq!(p("2^3^2").eval(&VarEnv::new()).unwrap(), 512.0);
        assert_eq!(p("1 - 2 - 3").eval(&VarEnv::new()).unwrap(), -4.0);
        assert_eq!(p("8 / 2 / 2").eval(&VarEnv::new()).unwrap(), 2.0);
    }

    #[test]
    fn syntax_error_is_located() {
        match parse("x*") {
            Err(ExprError::Syntax { line, column, .. }) => assert_eq!((line, column), (1, 3)),
            other => panic!("expected syntax error, got {:?}", other),
        }
        assert!(matches!(parse("foo(x)"), Err(ExprError::UnknownFunction { .. })));
        assert!(matches!(parse("min(x)"), Err(ExprError::Syntax { .. })));
        assert!(matches!(parse("(x + 1"), Err(ExprError::Syntax { .. })));
    }

    #[test]
    fn derivatives() {
        assert_eq!(p("x^2+u").diff("x").unwrap().to_string(), "2*x");
        assert_eq!(p("sin(a*t)").diff("a").unwrap().to_string(), "t*cos(a*t)");
        assert_eq!(p("c").diff("x").unwrap(), Expr::Const(0.0));
        assert_eq!(p("3").diff("x").unwrap(), Expr::Const(0.0));
        assert!(matches!(p("abs(x)").diff("x"), Err(ExprError::Nonsmooth { .. })));
        // nonsmooth subtrees not involving the variable are fine
        assert_eq!(p("abs(u) + x").diff("x").unwrap(), Expr::Const(1.0));
    }

    #[test]
    fn evaluation() {
        assert_eq!(p("x^2+u").eval(&env(&[("x", 2.0), ("u", 1.0)])).unwrap(), 5.0);
        assert_eq!(p("exp(0)").eval(&VarEnv::new()).unwrap(), 1.0);
        assert!(matches!(
            p("log(x)").eval(&env(&[("x", -1.0)])),
            Err(ExprError::Domain { func: "log", .. })
        ));
        assert_eq!(
            p("x + y").eval(&env(&[("x", 1.0)])),
            Err(ExprError::MissingBinding("y".into()))
        );
        assert_eq!(p("max(x, 2) + min(x, 2)").eval(&env(&[("x", 5.0)])).unwrap(), 7.0);
    }

    #[test]
    fn bound_matches_named_eval() {
        let e = p("x*sin(u) - tanh(a)/2 + pow(x, 3)");
        let layout = Layout::new(["x", "u", "a"]);
        let b = e.bind(&layout).unwrap();
        let named = e.eval(&env(&[("x", 0.3), ("u", -1.2), ("a", 2.0)])).unwrap();
        assert_eq!(b.eval(&[0.3, -1.2, 2.0]), named);
        assert!(matches!(p("y").bind(&layout), Err(ExprError::Undeclared(_))));
    }

    #[test]
    fn substitution_and_rename() {
        let e = p("x*t - tau");
        assert_eq!(e.rename(&[("t", "tau"), ("tau", "t")]).to_string(), "x*tau - t");
        assert_eq!(e.substitute("x", &p("y + 1")).to_string(), "(y + 1)*t - tau");
    }

    #[test]
    fn printing_parenthesizes_where_needed() {
        for s in ["(x - y) - z", "x - (y - z)", "x/(y*z)", "(x^2)^3", "(-x)^2", "x^-y", "-(a*b)", "2*-x"] {
            let e = p(s);
            assert_eq!(p(&e.to_string()), e, "round trip of {}", s);
        }
    }
}
