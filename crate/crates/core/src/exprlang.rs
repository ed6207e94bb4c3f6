//! Small arithmetic expression language for defining drift/diffusion entries
//! and test functions in config files, with forward-mode dual-number
//! differentiation for first and second derivatives.
//!
//! Grammar (EBNF, also in `docs/exprlang.md`):
//!
//! ```text
//! expr   := term (("+" | "-") term)*
//! term   := factor (("*" | "/") factor)*
//! factor := "-" factor | power
//! power  := atom ("^" factor)?          (right-associative)
//! atom   := NUMBER | VAR | FUNC "(" expr ("," expr)* ")" | "(" expr ")"
//! VAR    := "x"INT | "u"INT             (1-based, within declared dims)
//! FUNC   := sin | cos | exp | log | sqrt | pow | tanh | abs
//! NUMBER := digits ["." digits] [("e"|"E") ["+"|"-"] digits]
//! ```
//!
//! Unary minus applies to a whole power, so `-x1^2` is `-(x1^2)`. `pow(a,b)`
//! and `a^b` are the same node. Whitespace is ignored. Errors render as
//! `line:col: message` with 1-based positions.
//!
//! There are no conditionals or loops, so every expression is smooth wherever
//! it is defined; `abs` is the single non-smooth primitive and is rejected in
//! any position that gets differentiated.

use std::fmt;
use std::sync::Arc;

use crate::numerics::Mat;

/// Hard cap on AST depth.
pub const MAX_DEPTH: usize = 256;

/// Declared variable dimensions: `n` state variables `x1..xn` and `k`
/// control variables `u1..uk`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub k: usize,
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Position of an error in the source text, kept as a byte offset plus
/// precomputed 1-based line/column for rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pos {
    pub offset: usize,
    pub line: usize,
    pub col: usize,
}

impl Pos {
    fn locate(source: &str, offset: usize) -> Pos {
        let mut line = 1;
        let mut col = 1;
        for (i, ch) in source.char_indices() {
            if i >= offset {
                break;
            }
            if ch == '\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
        }
        Pos { offset, line, col }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExprError {
    #[error("{}:{}: syntax error: expected {expected}, found {found}", pos.line, pos.col)]
    Syntax {
        pos: Pos,
        expected: String,
        found: String,
    },
    #[error("{}:{}: unknown identifier `{name}` ({valid})", pos.line, pos.col)]
    UnknownIdentifier {
        pos: Pos,
        name: String,
        valid: String,
    },
    #[error("{}:{}: variable index in `{name}` overflows the declared dimensions", pos.line, pos.col)]
    DimensionOverflow { pos: Pos, name: String },
    #[error("{}:{}: expression nesting exceeds depth {MAX_DEPTH}", pos.line, pos.col)]
    DepthExceeded { pos: Pos },
    #[error("{}:{}: {what}", pos.line, pos.col)]
    Domain { pos: Pos, what: String },
    #[error("{}:{}: `abs` is not allowed in differentiated expressions", pos.line, pos.col)]
    AbsNotDifferentiable { pos: Pos },
}

// ---------------------------------------------------------------------------
// AST
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Tanh,
    Abs,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Tanh => "tanh",
            Func::Abs => "abs",
        }
    }
}

#[derive(Debug, Clone)]
enum NodeKind {
    Num(f64),
    /// 0-based state variable index.
    X(usize),
    /// 0-based control variable index.
    U(usize),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

#[derive(Debug, Clone)]
struct Node {
    kind: NodeKind,
    offset: usize,
}

impl Node {
    fn structural_eq(&self, other: &Node) -> bool {
        match (&self.kind, &other.kind) {
            (NodeKind::Num(a), NodeKind::Num(b)) => a == b,
            (NodeKind::X(a), NodeKind::X(b)) => a == b,
            (NodeKind::U(a), NodeKind::U(b)) => a == b,
            (NodeKind::Neg(a), NodeKind::Neg(b)) => a.structural_eq(b),
            (NodeKind::Bin(op_a, la, ra), NodeKind::Bin(op_b, lb, rb)) => {
                op_a == op_b && la.structural_eq(lb) && ra.structural_eq(rb)
            }
            (NodeKind::Call(fa, aa), NodeKind::Call(fb, ab)) => fa == fb && aa.structural_eq(ab),
            _ => false,
        }
    }

    fn contains_abs(&self) -> Option<usize> {
        match &self.kind {
            NodeKind::Call(Func::Abs, _) => Some(self.offset),
            NodeKind::Call(_, a) | NodeKind::Neg(a) => a.contains_abs(),
            NodeKind::Bin(_, l, r) => l.contains_abs().or_else(|| r.contains_abs()),
            _ => None,
        }
    }
}

/// A parsed expression together with its source text (kept for error
/// positions) and declared dimensions.
#[derive(Debug, Clone)]
pub struct Expr {
    source: Arc<str>,
    dims: Dims,
    root: Node,
}

impl PartialEq for Expr {
    /// Structural equality; source offsets and formatting are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.root.structural_eq(&other.root)
    }
}

impl Expr {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Byte offset of the first `abs` call, if any.
    pub fn abs_offset(&self) -> Option<usize> {
        self.root.contains_abs()
    }

    fn pos(&self, offset: usize) -> Pos {
        Pos::locate(&self.source, offset)
    }
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser<'s> {
    src: &'s str,
    bytes: &'s [u8],
    pos: usize,
    dims: Dims,
}

/// Parses `source` against the declared dimensions.
pub fn parse(source: &str, dims: Dims) -> Result<Expr, ExprError> {
    let mut p = Parser {
        src: source,
        bytes: source.as_bytes(),
        pos: 0,
        dims,
    };
    p.skip_ws();
    if p.pos >= p.bytes.len() {
        return Err(p.syntax_err(p.pos, "an expression", "end of input"));
    }
    let root = p.expr(0)?;
    p.skip_ws();
    if p.pos < p.bytes.len() {
        let found = p.describe_here();
        return Err(p.syntax_err(p.pos, "end of input", &found));
    }
    Ok(Expr {
        source: Arc::from(source),
        dims,
        root,
    })
}

impl<'s> Parser<'s> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && (self.bytes[self.pos] as char).is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn describe_here(&self) -> String {
        match self.peek() {
            Some(b) => format!("`{}`", b as char),
            None => "end of input".into(),
        }
    }

    fn syntax_err(&self, offset: usize, expected: &str, found: &str) -> ExprError {
        ExprError::Syntax {
            pos: Pos::locate(self.src, offset),
            expected: expected.into(),
            found: found.into(),
        }
    }

    fn check_depth(&self, depth: usize) -> Result<(), ExprError> {
        if depth > MAX_DEPTH {
            Err(ExprError::DepthExceeded {
                pos: Pos::locate(self.src, self.pos),
            })
        } else {
            Ok(())
        }
    }

    fn expr(&mut self, depth: usize) -> Result<Node, ExprError> {
        self.check_depth(depth)?;
        let mut lhs = self.term(depth + 1)?;
        loop {
            self.skip_ws();
            let offset = self.pos;
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    let rhs = self.term(depth + 1)?;
                    lhs = Node {
                        kind: NodeKind::Bin(BinOp::Add, Box::new(lhs), Box::new(rhs)),
                        offset,
                    };
                }
                Some(b'-') => {
                    self.pos += 1;
                    let rhs = self.term(depth + 1)?;
                    lhs = Node {
                        kind: NodeKind::Bin(BinOp::Sub, Box::new(lhs), Box::new(rhs)),
                        offset,
                    };
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self, depth: usize) -> Result<Node, ExprError> {
        self.check_depth(depth)?;
        let mut lhs = self.factor(depth + 1)?;
        loop {
            self.skip_ws();
            let offset = self.pos;
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    let rhs = self.factor(depth + 1)?;
                    lhs = Node {
                        kind: NodeKind::Bin(BinOp::Mul, Box::new(lhs), Box::new(rhs)),
                        offset,
                    };
                }
                Some(b'/') => {
                    self.pos += 1;
                    let rhs = self.factor(depth + 1)?;
                    lhs = Node {
                        kind: NodeKind::Bin(BinOp::Div, Box::new(lhs), Box::new(rhs)),
                        offset,
                    };
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self, depth: usize) -> Result<Node, ExprError> {
        self.check_depth(depth)?;
        self.skip_ws();
        if self.peek() == Some(b'-') {
            let offset = self.pos;
            self.pos += 1;
            let inner = self.factor(depth + 1)?;
            return Ok(Node {
                kind: NodeKind::Neg(Box::new(inner)),
                offset,
            });
        }
        self.power(depth + 1)
    }

    fn power(&mut self, depth: usize) -> Result<Node, ExprError> {
        self.check_depth(depth)?;
        let base = self.atom(depth + 1)?;
        self.skip_ws();
        if self.peek() == Some(b'^') {
            let offset = self.pos;
            self.pos += 1;
            // right-associative; the exponent may carry its own unary minus
            let exponent = self.factor(depth + 1)?;
            return Ok(Node {
                kind: NodeKind::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)),
                offset,
            });
        }
        Ok(base)
    }

    fn atom(&mut self, depth: usize) -> Result<Node, ExprError> {
        self.check_depth(depth)?;
        self.skip_ws();
        let offset = self.pos;
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr(depth + 1)?;
                self.skip_ws();
                if self.peek() != Some(b')') {
                    let found = self.describe_here();
                    return Err(self.syntax_err(self.pos, "`)`", &found));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(offset),
            Some(c) if c.is_ascii_alphabetic() => self.identifier(offset, depth),
            _ => {
                let found = self.describe_here();
                Err(self.syntax_err(offset, "a number, variable, function or `(`", &found))
            }
        }
    }

    fn number(&mut self, offset: usize) -> Result<Node, ExprError> {
        let mut end = self.pos;
        while end < self.bytes.len() && (self.bytes[end].is_ascii_digit() || self.bytes[end] == b'.')
        {
            end += 1;
        }
        if end < self.bytes.len() && (self.bytes[end] == b'e' || self.bytes[end] == b'E') {
            let mut exp_end = end + 1;
            if exp_end < self.bytes.len() && (self.bytes[exp_end] == b'+' || self.bytes[exp_end] == b'-')
            {
                exp_end += 1;
            }
            let digits_start = exp_end;
            while exp_end < self.bytes.len() && self.bytes[exp_end].is_ascii_digit() {
                exp_end += 1;
            }
            if exp_end == digits_start {
                return Err(self.syntax_err(end, "exponent digits", "malformed number"));
            }
            end = exp_end;
        }
        let text = &self.src[self.pos..end];
        let value: f64 = text
            .parse()
            .map_err(|_| self.syntax_err(offset, "a number", &format!("`{text}`")))?;
        self.pos = end;
        Ok(Node {
            kind: NodeKind::Num(value),
            offset,
        })
    }

    fn identifier(&mut self, offset: usize, depth: usize) -> Result<Node, ExprError> {
        let mut end = self.pos;
        while end < self.bytes.len()
            && (self.bytes[end].is_ascii_alphanumeric() || self.bytes[end] == b'_')
        {
            end += 1;
        }
        let name = self.src[self.pos..end].to_string();
        self.pos = end;
        self.skip_ws();

        if self.peek() == Some(b'(') {
            // function call
            let func = match name.as_str() {
                "sin" => Some(Func::Sin),
                "cos" => Some(Func::Cos),
                "exp" => Some(Func::Exp),
                "log" => Some(Func::Log),
                "sqrt" => Some(Func::Sqrt),
                "tanh" => Some(Func::Tanh),
                "abs" => Some(Func::Abs),
                "pow" => None, // handled below as a binary node
                _ => {
                    return Err(ExprError::UnknownIdentifier {
                        pos: Pos::locate(self.src, offset),
                        name,
                        valid: "known functions: sin, cos, exp, log, sqrt, pow, tanh, abs".into(),
                    })
                }
            };
            self.pos += 1; // consume '('
            let first = self.expr(depth + 1)?;
            self.skip_ws();
            let node = if let Some(f) = func {
                if self.peek() == Some(b',') {
                    let found = self.describe_here();
                    return Err(self.syntax_err(self.pos, &format!("`)` ({} takes one argument)", f.name()), &found));
                }
                Node {
                    kind: NodeKind::Call(f, Box::new(first)),
                    offset,
                }
            } else {
                if self.peek() != Some(b',') {
                    let found = self.describe_here();
                    return Err(self.syntax_err(self.pos, "`,` (pow takes two arguments)", &found));
                }
                self.pos += 1;
                let second = self.expr(depth + 1)?;
                self.skip_ws();
                Node {
                    kind: NodeKind::Bin(BinOp::Pow, Box::new(first), Box::new(second)),
                    offset,
                }
            };
            self.skip_ws();
            if self.peek() != Some(b')') {
                let found = self.describe_here();
                return Err(self.syntax_err(self.pos, "`)`", &found));
            }
            self.pos += 1;
            return Ok(node);
        }

        // variable
        let valid = if self.dims.k > 0 {
            format!("valid: x1..x{}, u1..u{}", self.dims.n, self.dims.k)
        } else {
            format!("valid: x1..x{}", self.dims.n)
        };
        let (prefix, rest) = name.split_at(1);
        let index: Option<usize> = rest.parse().ok();
        match (prefix, index) {
            ("x", Some(i)) if i >= 1 && i <= self.dims.n => Ok(Node {
                kind: NodeKind::X(i - 1),
                offset,
            }),
            ("u", Some(i)) if i >= 1 && i <= self.dims.k => Ok(Node {
                kind: NodeKind::U(i - 1),
                offset,
            }),
            ("x", None) | ("u", None) if rest.chars().all(|c| c.is_ascii_digit()) && !rest.is_empty() => {
                Err(ExprError::DimensionOverflow {
                    pos: Pos::locate(self.src, offset),
                    name,
                })
            }
            _ => Err(ExprError::UnknownIdentifier {
                pos: Pos::locate(self.src, offset),
                name,
                valid,
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// Printer
// ---------------------------------------------------------------------------

fn precedence(kind: &NodeKind) -> u8 {
    match kind {
        NodeKind::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
        NodeKind::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
        NodeKind::Neg(..) => 3,
        NodeKind::Bin(BinOp::Pow, ..) => 4,
        _ => 5,
    }
}

fn print_node(node: &Node, needed: u8, out: &mut String) {
    let prec = precedence(&node.kind);
    let parens = prec < needed;
    if parens {
        out.push('(');
    }
    match &node.kind {
        NodeKind::Num(v) => out.push_str(&format!("{v}")),
        NodeKind::X(i) => out.push_str(&format!("x{}", i + 1)),
        NodeKind::U(i) => out.push_str(&format!("u{}", i + 1)),
        NodeKind::Neg(a) => {
            out.push('-');
            print_node(a, 3, out);
        }
        NodeKind::Bin(op, l, r) => {
            let (sym, lp, rp) = match op {
                BinOp::Add => ("+", 1, 2),
                BinOp::Sub => ("-", 1, 2),
                BinOp::Mul => ("*", 2, 3),
                BinOp::Div => ("/", 2, 3),
                // base must be an atom; exponent may be a factor
                BinOp::Pow => ("^", 5, 3),
            };
            print_node(l, lp, out);
            out.push_str(sym);
            print_node(r, rp, out);
        }
        NodeKind::Call(f, a) => {
            out.push_str(f.name());
            out.push('(');
            print_node(a, 0, out);
            out.push(')');
        }
    }
    if parens {
        out.push(')');
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        print_node(&self.root, 0, &mut s);
        f.write_str(&s)
    }
}

// ---------------------------------------------------------------------------
// Dual numbers (forward mode, arbitrarily nestable)
// ---------------------------------------------------------------------------

/// Scalar abstraction so the evaluator runs on plain floats, first-order
/// duals, or duals-of-duals (for Hessians) with the same code path.
pub trait Scalar: Clone {
    fn from_f64(v: f64) -> Self;
    /// Innermost float value, used for domain checks.
    fn primal(&self) -> f64;
    /// True when the scalar carries no derivative information at all
    /// (used to treat `a^b` with a constant integer `b` via `powi`).
    fn has_no_derivatives(&self) -> bool;
    /// True when value and all derivative lanes are exactly zero.
    fn is_identically_zero(&self) -> bool;
    fn add(&self, o: &Self) -> Self;
    fn sub(&self, o: &Self) -> Self;
    fn mul(&self, o: &Self) -> Self;
    fn div(&self, o: &Self) -> Self;
    fn neg(&self) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn exp(&self) -> Self;
    fn log(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn tanh(&self) -> Self;
    fn powi(&self, n: i32) -> Self;
    /// General power; callers must ensure the base is positive.
    fn powf(&self, e: &Self) -> Self;
    fn abs(&self) -> Self;
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn primal(&self) -> f64 {
        *self
    }
    fn has_no_derivatives(&self) -> bool {
        true
    }
    fn is_identically_zero(&self) -> bool {
        *self == 0.0
    }
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn sub(&self, o: &Self) -> Self {
        self - o
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn div(&self, o: &Self) -> Self {
        self / o
    }
    fn neg(&self) -> Self {
        -self
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn log(&self) -> Self {
        f64::ln(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn tanh(&self) -> Self {
        f64::tanh(*self)
    }
    fn powi(&self, n: i32) -> Self {
        f64::powi(*self, n)
    }
    fn powf(&self, e: &Self) -> Self {
        f64::powf(*self, *e)
    }
    fn abs(&self) -> Self {
        f64::abs(*self)
    }
}

/// Forward-mode dual number: a value plus partial derivatives with respect
/// to the seeded variables. An empty partials vector stands for "all zero",
/// which is how constants avoid knowing the seed count.
#[derive(Debug, Clone)]
pub struct Dual<T> {
    pub value: T,
    pub partials: Vec<T>,
}

impl<T: Scalar> Dual<T> {
    pub fn constant(v: f64) -> Self {
        Dual {
            value: T::from_f64(v),
            partials: Vec::new(),
        }
    }

    fn part(&self, i: usize) -> T {
        self.partials
            .get(i)
            .cloned()
            .unwrap_or_else(|| T::from_f64(0.0))
    }

    fn width(&self, o: &Self) -> usize {
        self.partials.len().max(o.partials.len())
    }

    /// Chain rule for a univariate function: (f(v), f'(v)·partials).
    fn lift(&self, fv: T, dfv: T) -> Self {
        Dual {
            value: fv,
            partials: self.partials.iter().map(|p| p.mul(&dfv)).collect(),
        }
    }
}

impl<T: Scalar> Scalar for Dual<T> {
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }

    fn primal(&self) -> f64 {
        self.value.primal()
    }

    fn has_no_derivatives(&self) -> bool {
        self.partials.iter().all(|p| p.is_identically_zero())
    }

    fn is_identically_zero(&self) -> bool {
        self.value.is_identically_zero()
            && self.partials.iter().all(|p| p.is_identically_zero())
    }

    fn add(&self, o: &Self) -> Self {
        Dual {
            value: self.value.add(&o.value),
            partials: (0..self.width(o))
                .map(|i| self.part(i).add(&o.part(i)))
                .collect(),
        }
    }

    fn sub(&self, o: &Self) -> Self {
        Dual {
            value: self.value.sub(&o.value),
            partials: (0..self.width(o))
                .map(|i| self.part(i).sub(&o.part(i)))
                .collect(),
        }
    }

    fn mul(&self, o: &Self) -> Self {
        Dual {
            value: self.value.mul(&o.value),
            partials: (0..self.width(o))
                .map(|i| self.part(i).mul(&o.value).add(&self.value.mul(&o.part(i))))
                .collect(),
        }
    }

    fn div(&self, o: &Self) -> Self {
        let inv_den_sq = o.value.mul(&o.value);
        Dual {
            value: self.value.div(&o.value),
            partials: (0..self.width(o))
                .map(|i| {
                    self.part(i)
                        .mul(&o.value)
                        .sub(&self.value.mul(&o.part(i)))
                        .div(&inv_den_sq)
                })
                .collect(),
        }
    }

    fn neg(&self) -> Self {
        Dual {
            value: self.value.neg(),
            partials: self.partials.iter().map(|p| p.neg()).collect(),
        }
    }

    fn sin(&self) -> Self {
        self.lift(self.value.sin(), self.value.cos())
    }

    fn cos(&self) -> Self {
        self.lift(self.value.cos(), self.value.sin().neg())
    }

    fn exp(&self) -> Self {
        let e = self.value.exp();
        self.lift(e.clone(), e)
    }

    fn log(&self) -> Self {
        let one = T::from_f64(1.0);
        self.lift(self.value.log(), one.div(&self.value))
    }

    fn sqrt(&self) -> Self {
        let s = self.value.sqrt();
        let half = T::from_f64(0.5);
        self.lift(s.clone(), half.div(&s))
    }

    fn tanh(&self) -> Self {
        let t = self.value.tanh();
        let one = T::from_f64(1.0);
        self.lift(t.clone(), one.sub(&t.mul(&t)))
    }

    fn powi(&self, n: i32) -> Self {
        if n == 0 {
            return Dual::constant(1.0);
        }
        let dfv = T::from_f64(n as f64).mul(&self.value.powi(n - 1));
        self.lift(self.value.powi(n), dfv)
    }

    fn powf(&self, e: &Self) -> Self {
        // a^b = exp(b ln a); valid for positive base, which callers enforce.
        e.mul(&self.log()).exp()
    }

    fn abs(&self) -> Self {
        // only the plain-f64 path may evaluate abs; differentiating code
        // rejects it before evaluation
        self.lift(
            self.value.abs(),
            T::from_f64(if self.primal() >= 0.0 { 1.0 } else { -1.0 }),
        )
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

fn eval_node<T: Scalar>(expr: &Expr, node: &Node, x: &[T], u: &[T]) -> Result<T, ExprError> {
    match &node.kind {
        NodeKind::Num(v) => Ok(T::from_f64(*v)),
        NodeKind::X(i) => Ok(x[*i].clone()),
        NodeKind::U(i) => Ok(u[*i].clone()),
        NodeKind::Neg(a) => Ok(eval_node(expr, a, x, u)?.neg()),
        NodeKind::Bin(op, l, r) => {
            let a = eval_node(expr, l, x, u)?;
            let b = eval_node(expr, r, x, u)?;
            match op {
                BinOp::Add => Ok(a.add(&b)),
                BinOp::Sub => Ok(a.sub(&b)),
                BinOp::Mul => Ok(a.mul(&b)),
                BinOp::Div => {
                    if b.primal() == 0.0 {
                        return Err(ExprError::Domain {
                            pos: expr.pos(node.offset),
                            what: "division by zero".into(),
                        });
                    }
                    Ok(a.div(&b))
                }
                BinOp::Pow => {
                    let exp_primal = b.primal();
                    let exponent_is_const_int = b.has_no_derivatives()
                        && exp_primal.fract() == 0.0
                        && exp_primal.abs() <= 2_147_483_646.0;
                    if exponent_is_const_int {
                        if exp_primal < 0.0 && a.primal() == 0.0 {
                            return Err(ExprError::Domain {
                                pos: expr.pos(node.offset),
                                what: "zero base raised to a negative power".into(),
                            });
                        }
                        Ok(a.powi(exp_primal as i32))
                    } else {
                        if a.primal() <= 0.0 {
                            return Err(ExprError::Domain {
                                pos: expr.pos(node.offset),
                                what: format!(
                                    "power with non-integer exponent requires a positive base (base = {})",
                                    a.primal()
                                ),
                            });
                        }
                        Ok(a.powf(&b))
                    }
                }
            }
        }
        NodeKind::Call(f, a) => {
            let v = eval_node(expr, a, x, u)?;
            match f {
                Func::Sin => Ok(v.sin()),
                Func::Cos => Ok(v.cos()),
                Func::Exp => Ok(v.exp()),
                Func::Tanh => Ok(v.tanh()),
                Func::Abs => Ok(v.abs()),
                Func::Log => {
                    if v.primal() <= 0.0 {
                        return Err(ExprError::Domain {
                            pos: expr.pos(node.offset),
                            what: format!("log of nonpositive value {}", v.primal()),
                        });
                    }
                    Ok(v.log())
                }
                Func::Sqrt => {
                    if v.primal() < 0.0 {
                        return Err(ExprError::Domain {
                            pos: expr.pos(node.offset),
                            what: format!("sqrt of negative value {}", v.primal()),
                        });
                    }
                    Ok(v.sqrt())
                }
            }
        }
    }
}

/// Plain evaluation. `x` and `u` must match the declared dimensions.
pub fn eval(expr: &Expr, x: &[f64], u: &[f64]) -> Result<f64, ExprError> {
    assert_eq!(x.len(), expr.dims.n, "state dimension mismatch");
    assert_eq!(u.len(), expr.dims.k, "control dimension mismatch");
    eval_node(expr, &expr.root, x, u)
}

/// Which variables are seeded with unit partials in [`eval_dual`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    /// Partials with respect to x1..xn.
    X,
    /// Partials with respect to u1..uk.
    U,
}

/// First-order dual evaluation. The value component is bit-identical to
/// [`eval`] (same operation sequence on the value lane).
pub fn eval_dual(expr: &Expr, x: &[f64], u: &[f64], wrt: Wrt) -> Result<Dual<f64>, ExprError> {
    assert_eq!(x.len(), expr.dims.n, "state dimension mismatch");
    assert_eq!(u.len(), expr.dims.k, "control dimension mismatch");
    if let Some(offset) = expr.abs_offset() {
        return Err(ExprError::AbsNotDifferentiable {
            pos: expr.pos(offset),
        });
    }
    let m = match wrt {
        Wrt::X => x.len(),
        Wrt::U => u.len(),
    };
    let seed = |vals: &[f64], seeded: bool| -> Vec<Dual<f64>> {
        vals.iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut partials = vec![0.0; if seeded { m } else { 0 }];
                if seeded {
                    partials[i] = 1.0;
                }
                Dual { value: v, partials }
            })
            .collect()
    };
    let (xs, us) = match wrt {
        Wrt::X => (seed(x, true), seed(u, false)),
        Wrt::U => (seed(x, false), seed(u, true)),
    };
    let mut out = eval_node(expr, &expr.root, &xs, &us)?;
    out.partials.resize(m, 0.0);
    Ok(out)
}

/// Value, gradient and Hessian with respect to the state variables, computed
/// by a nested dual pass (duals whose coefficients are themselves duals).
pub fn eval_hessian(expr: &Expr, x: &[f64], u: &[f64]) -> Result<(f64, Vec<f64>, Mat), ExprError> {
    assert_eq!(x.len(), expr.dims.n, "state dimension mismatch");
    assert_eq!(u.len(), expr.dims.k, "control dimension mismatch");
    if let Some(offset) = expr.abs_offset() {
        return Err(ExprError::AbsNotDifferentiable {
            pos: expr.pos(offset),
        });
    }
    let n = x.len();
    let xs: Vec<Dual<Dual<f64>>> = (0..n)
        .map(|i| {
            let mut inner_partials = vec![0.0; n];
            inner_partials[i] = 1.0;
            let value = Dual {
                value: x[i],
                partials: inner_partials,
            };
            let mut outer = vec![Dual::<f64>::constant(0.0); n];
            outer[i] = Dual {
                value: 1.0,
                partials: vec![0.0; n],
            };
            Dual {
                value,
                partials: outer,
            }
        })
        .collect();
    let us: Vec<Dual<Dual<f64>>> = u.iter().map(|&v| Dual::constant(v)).collect();
    let r = eval_node(expr, &expr.root, &xs, &us)?;

    let value = r.value.value;
    let mut grad = r.value.partials.clone();
    grad.resize(n, 0.0);
    let mut hess = Mat::zeros(n, n);
    for i in 0..n {
        if let Some(row) = r.partials.get(i) {
            for j in 0..n {
                hess.set(i, j, row.partials.get(j).copied().unwrap_or(0.0));
            }
        }
    }
    Ok((value, grad, hess))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const D2: Dims = Dims { n: 2, k: 0 };

    #[test]
    fn parse_add_mul_shape() {
        let e = parse("x1 + 2*x2", D2).unwrap();
        let want = parse("x1+(2*x2)", D2).unwrap();
        assert_eq!(e, want);
        // and it is not the left-grouped product
        let other = parse("(x1+2)*x2", D2).unwrap();
        assert_ne!(e, other);
    }

    #[test]
    fn unary_minus_binds_looser_than_pow() {
        let e = parse("-x1^2", D2).unwrap();
        let want = parse("-(x1^2)", D2).unwrap();
        assert_eq!(e, want);
        assert_ne!(e, parse("(-x1)^2", D2).unwrap());

        let neg = parse("-x2", D2).unwrap();
        assert_eq!(neg, parse("-(x2)", D2).unwrap());
    }

    #[test]
    fn pow_right_associative() {
        let e = parse("x1^x2^2", D2).unwrap();
        assert_eq!(e, parse("x1^(x2^2)", D2).unwrap());
    }

    #[test]
    fn unknown_identifier_offset() {
        match parse("x3", D2) {
            Err(ExprError::UnknownIdentifier { pos, name, .. }) => {
                assert_eq!(pos.offset, 0);
                assert_eq!(name, "x3");
            }
            other => panic!("expected unknown identifier, got {other:?}"),
        }
        let msg = parse("x3", D2).unwrap_err().to_string();
        assert!(msg.starts_with("1:1:"), "error must render line:col, got {msg}");
    }

    #[test]
    fn dimension_overflow_detected() {
        let huge = format!("x{}", "9".repeat(40));
        match parse(&huge, D2) {
            Err(ExprError::DimensionOverflow { .. }) => {}
            other => panic!("expected dimension overflow, got {other:?}"),
        }
    }

    #[test]
    fn syntax_error_carries_position() {
        match parse("x1 + ", D2) {
            Err(ExprError::Syntax { pos, .. }) => assert_eq!(pos.offset, 5),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn depth_limit_enforced() {
        let deep = format!("{}x1{}", "(".repeat(300), ")".repeat(300));
        assert!(matches!(
            parse(&deep, D2),
            Err(ExprError::DepthExceeded { .. })
        ));
    }

    #[test]
    fn eval_square_and_derivative() {
        let e = parse("x1*x1", Dims { n: 1, k: 0 }).unwrap();
        assert_relative_eq!(eval(&e, &[3.0], &[]).unwrap(), 9.0);
        let d = eval_dual(&e, &[3.0], &[], Wrt::X).unwrap();
        assert_relative_eq!(d.value, 9.0);
        assert_relative_eq!(d.partials[0], 6.0);
    }

    #[test]
    fn eval_sine_at_zero() {
        let e = parse("sin(x1)", Dims { n: 1, k: 0 }).unwrap();
        let d = eval_dual(&e, &[0.0], &[], Wrt::X).unwrap();
        assert_relative_eq!(d.value, 0.0);
        assert_relative_eq!(d.partials[0], 1.0);
    }

    #[test]
    fn eval_value_matches_dual_value_bitwise() {
        let e = parse("sin(x1)*exp(x2) - x1/(x2+2) + tanh(x1*x2)", D2).unwrap();
        let x = [0.7, -0.3];
        let v = eval(&e, &x, &[]).unwrap();
        let d = eval_dual(&e, &x, &[], Wrt::X).unwrap();
        assert_eq!(v.to_bits(), d.value.to_bits());
    }

    #[test]
    fn circle_sigma_jacobian_vector_product() {
        // σ = (-x2, x1); Dσ·σ at (0.6, 0.8) must be (-0.6, -0.8) = -x
        let rows = [parse("-x2", D2).unwrap(), parse("x1", D2).unwrap()];
        let x = [0.6, 0.8];
        let sigma: Vec<f64> = rows.iter().map(|e| eval(e, &x, &[]).unwrap()).collect();
        let mut out = [0.0, 0.0];
        for (r, e) in rows.iter().enumerate() {
            let d = eval_dual(e, &x, &[], Wrt::X).unwrap();
            out[r] = d.partials[0] * sigma[0] + d.partials[1] * sigma[1];
        }
        assert_relative_eq!(out[0], -0.6, epsilon = 1e-14);
        assert_relative_eq!(out[1], -0.8, epsilon = 1e-14);
    }

    #[test]
    fn hessian_of_quadratic() {
        let e = parse("x1^2 + 3*x1*x2", D2).unwrap();
        let (v, g, h) = eval_hessian(&e, &[1.0, 2.0], &[]).unwrap();
        assert_relative_eq!(v, 7.0);
        assert_relative_eq!(g[0], 8.0);
        assert_relative_eq!(g[1], 3.0);
        assert_relative_eq!(h.get(0, 0), 2.0);
        assert_relative_eq!(h.get(0, 1), 3.0);
        assert_relative_eq!(h.get(1, 0), 3.0);
        assert_relative_eq!(h.get(1, 1), 0.0);
    }

    #[test]
    fn domain_errors_reported_with_location() {
        let e = parse("log(x1)", Dims { n: 1, k: 0 }).unwrap();
        let err = eval(&e, &[-1.0], &[]).unwrap_err();
        assert!(matches!(err, ExprError::Domain { .. }));
        assert!(err.to_string().starts_with("1:1:"));

        let e = parse("x1/(x1-1)", Dims { n: 1, k: 0 }).unwrap();
        assert!(matches!(
            eval(&e, &[1.0], &[]),
            Err(ExprError::Domain { .. })
        ));
    }

    #[test]
    fn abs_allowed_plain_rejected_in_duals() {
        let e = parse("abs(x1)", Dims { n: 1, k: 0 }).unwrap();
        assert_relative_eq!(eval(&e, &[-2.0], &[]).unwrap(), 2.0);
        assert!(matches!(
            eval_dual(&e, &[-2.0], &[], Wrt::X),
            Err(ExprError::AbsNotDifferentiable { .. })
        ));
        assert!(matches!(
            eval_hessian(&e, &[-2.0], &[]),
            Err(ExprError::AbsNotDifferentiable { .. })
        ));
    }

    #[test]
    fn control_variables_and_wrt_u() {
        let e = parse("u1*x1 + u2", Dims { n: 1, k: 2 }).unwrap();
        let d = eval_dual(&e, &[3.0], &[2.0, 5.0], Wrt::U).unwrap();
        assert_relative_eq!(d.value, 11.0);
        assert_relative_eq!(d.partials[0], 3.0);
        assert_relative_eq!(d.partials[1], 1.0);
    }

    // --- random expression generation for property tests ---

    fn gen_expr(rng: &mut rand_chacha::ChaCha8Rng, depth: usize) -> String {
        use rand::Rng;
        if depth == 0 || rng.gen_bool(0.25) {
            return match rng.gen_range(0..3) {
                0 => "x1".to_string(),
                1 => "x2".to_string(),
                _ => format!("{:.3}", rng.gen_range(0.1..3.0)),
            };
        }
        let a = gen_expr(rng, depth - 1);
        match rng.gen_range(0..12) {
            0 => format!("({a})+({})", gen_expr(rng, depth - 1)),
            1 => format!("({a})-({})", gen_expr(rng, depth - 1)),
            2 => format!("({a})*({})", gen_expr(rng, depth - 1)),
            3 => format!("({a})/(({})^2+1)", gen_expr(rng, depth - 1)),
            4 => format!("sin({a})"),
            5 => format!("cos({a})"),
            6 => format!("tanh({a})"),
            7 => format!("exp(tanh({a}))"),
            8 => format!("log(({a})^2+1.5)"),
            9 => format!("sqrt(({a})^2+0.5)"),
            10 => format!("-({a})"),
            _ => format!("({a})^3"),
        }
    }

    #[test]
    fn dual_matches_finite_differences_on_random_expressions() {
        use rand::Rng;
        let mut rng = crate::numerics::stream_rng(0xD1FF, 0);
        let mut accepted = 0usize;
        let mut attempts = 0usize;
        while accepted < 1000 {
            attempts += 1;
            assert!(attempts < 20_000, "generator rejected too many candidates");
            let depth = rng.gen_range(1..=6);
            let src = gen_expr(&mut rng, depth);
            let x = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
            let e = parse(&src, D2).unwrap();
            let d = match eval_dual(&e, &x, &[], Wrt::X) {
                Ok(d) => d,
                Err(_) => continue, // domain-rejected sample
            };
            if !d.value.is_finite()
                || d.value.abs() > 1e3
                || d.partials.iter().any(|p| !p.is_finite() || p.abs() > 1e3)
            {
                continue;
            }
            let h = 1e-5;
            let mut usable = true;
            for i in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let (fp, fm) = match (eval(&e, &xp, &[]), eval(&e, &xm, &[])) {
                    (Ok(a), Ok(b)) => (a, b),
                    _ => {
                        usable = false;
                        break;
                    }
                };
                let fd = (fp - fm) / (2.0 * h);
                if !fd.is_finite() {
                    usable = false;
                    break;
                }
                let scale = d.partials[i].abs().max(fd.abs()).max(1.0);
                assert!(
                    (fd - d.partials[i]).abs() <= 1e-5 * scale,
                    "src {src} at {x:?}: dual {} fd {fd}",
                    d.partials[i]
                );
            }
            if usable {
                accepted += 1;
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn parse_print_parse_idempotent(seed in 0u64..u64::MAX, depth in 1usize..=6) {
            let mut rng = crate::numerics::stream_rng(seed, 1);
            let src = gen_expr(&mut rng, depth);
            let once = parse(&src, D2).unwrap();
            let printed = once.to_string();
            let twice = parse(&printed, D2)
                .unwrap_or_else(|e| panic!("reparse of `{printed}` failed: {e}"));
            prop_assert!(once == twice, "`{}` -> `{}` changed structure", src, printed);
        }
    }
}
