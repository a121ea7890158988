//! Scalar expressions in the time variable `t`.
//!
//! Grammar (standard precedence, left associative):
//!
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := ['-'] atom
//! atom   := number | 't' | 'pi' | func '(' expr ')' | '(' expr ')'
//! ```
//!
//! Expressions are immutable once built. [`Expr::derivative`] returns the exact
//! symbolic derivative in the same grammar; the smart constructors fold
//! constants so derivatives of constant matrices collapse to literal zeros.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::Error;

/// Elementary functions known to the parser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
}

/// Name registry for [`Func`]. Adding a function means one entry here plus its
/// `eval`/`derivative` arms.
const FUNCTIONS: &[(&str, Func)] = &[
    ("sin", Func::Sin),
    ("cos", Func::Cos),
    ("exp", Func::Exp),
    ("sqrt", Func::Sqrt),
];

impl Func {
    pub fn name(self) -> &'static str {
        FUNCTIONS
            .iter()
            .find(|(_, f)| *f == self)
            .map(|(n, _)| *n)
            .expect("every function is registered")
    }

    pub fn lookup(name: &str) -> Option<Func> {
        FUNCTIONS.iter().find(|(n, _)| *n == name).map(|(_, f)| *f)
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Exp => x.exp(),
            Func::Sqrt => x.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    T,
    Neg(Expr),
    Add(Expr, Expr),
    Sub(Expr, Expr),
    Mul(Expr, Expr),
    Div(Expr, Expr),
    Call(Func, Expr),
}

/// A scalar expression in `t`. Cheap to clone (shared tree).
#[derive(Debug, Clone, PartialEq)]
pub struct Expr(Arc<Node>);

impl Expr {
    fn node(n: Node) -> Self {
        Expr(Arc::new(n))
    }

    pub fn num(v: f64) -> Self {
        Expr::node(Node::Num(v))
    }

    pub fn zero() -> Self {
        Expr::num(0.0)
    }

    pub fn one() -> Self {
        Expr::num(1.0)
    }

    pub fn t() -> Self {
        Expr::node(Node::T)
    }

    /// Literal value if the expression is a folded constant.
    pub fn as_const(&self) -> Option<f64> {
        match *self.0 {
            Node::Num(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    pub fn neg(a: Expr) -> Expr {
        match &*a.0 {
            Node::Num(v) => Expr::num(-v),
            Node::Neg(inner) => inner.clone(),
            _ => Expr::node(Node::Neg(a)),
        }
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::num(x + y),
            (Some(x), _) if x == 0.0 => b,
            (_, Some(y)) if y == 0.0 => a,
            _ => Expr::node(Node::Add(a, b)),
        }
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::num(x - y),
            (Some(x), _) if x == 0.0 => Expr::neg(b),
            (_, Some(y)) if y == 0.0 => a,
            _ => Expr::node(Node::Sub(a, b)),
        }
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::num(x * y),
            (Some(x), _) if x == 0.0 => Expr::zero(),
            (_, Some(y)) if y == 0.0 => Expr::zero(),
            (Some(x), _) if x == 1.0 => b,
            (_, Some(y)) if y == 1.0 => a,
            (Some(x), _) if x == -1.0 => Expr::neg(b),
            (_, Some(y)) if y == -1.0 => Expr::neg(a),
            _ => Expr::node(Node::Mul(a, b)),
        }
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) if y != 0.0 => Expr::num(x / y),
            (Some(x), _) if x == 0.0 => Expr::zero(),
            (_, Some(y)) if y == 1.0 => a,
            _ => Expr::node(Node::Div(a, b)),
        }
    }

    pub fn call(f: Func, a: Expr) -> Expr {
        match a.as_const() {
            Some(v) => Expr::num(f.apply(v)),
            None => Expr::node(Node::Call(f, a)),
        }
    }

    /// Parse an expression string.
    pub fn parse(source: &str) -> Result<Expr, ParseError> {
        Parser::new(source).parse()
    }

    pub fn eval(&self, t: f64) -> f64 {
        match &*self.0 {
            Node::Num(v) => *v,
            Node::T => t,
            Node::Neg(a) => -a.eval(t),
            Node::Add(a, b) => a.eval(t) + b.eval(t),
            Node::Sub(a, b) => a.eval(t) - b.eval(t),
            Node::Mul(a, b) => a.eval(t) * b.eval(t),
            Node::Div(a, b) => a.eval(t) / b.eval(t),
            Node::Call(f, a) => f.apply(a.eval(t)),
        }
    }

    /// Exact symbolic derivative with respect to `t`.
    pub fn derivative(&self) -> Expr {
        match &*self.0 {
            Node::Num(_) => Expr::zero(),
            Node::T => Expr::one(),
            Node::Neg(a) => Expr::neg(a.derivative()),
            Node::Add(a, b) => Expr::add(a.derivative(), b.derivative()),
            Node::Sub(a, b) => Expr::sub(a.derivative(), b.derivative()),
            Node::Mul(a, b) => Expr::add(
                Expr::mul(a.derivative(), b.clone()),
                Expr::mul(a.clone(), b.derivative()),
            ),
            Node::Div(a, b) => {
                let da = a.derivative();
                let db = b.derivative();
                if db.is_zero() {
                    return Expr::div(da, b.clone());
                }
                Expr::div(
                    Expr::sub(Expr::mul(da, b.clone()), Expr::mul(a.clone(), db)),
                    Expr::mul(b.clone(), b.clone()),
                )
            }
            Node::Call(f, a) => {
                let da = a.derivative();
                let outer = match f {
                    Func::Sin => Expr::call(Func::Cos, a.clone()),
                    Func::Cos => Expr::neg(Expr::call(Func::Sin, a.clone())),
                    Func::Exp => self.clone(),
                    Func::Sqrt => Expr::div(Expr::num(0.5), self.clone()),
                };
                Expr::mul(outer, da)
            }
        }
    }

    /// Node count, used to keep an eye on growth in derivative recursions.
    pub fn size(&self) -> usize {
        match &*self.0 {
            Node::Num(_) | Node::T => 1,
            Node::Neg(a) | Node::Call(_, a) => 1 + a.size(),
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                1 + a.size() + b.size()
            }
        }
    }
}

impl fmt::Display for Expr {
    /// Fully parenthesised output that parses back to an identical value.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &*self.0 {
            Node::Num(v) if *v < 0.0 => write!(f, "(-{})", -v),
            Node::Num(v) => write!(f, "{v}"),
            Node::T => f.write_str("t"),
            Node::Neg(a) => write!(f, "(-{a})"),
            Node::Add(a, b) => write!(f, "({a} + {b})"),
            Node::Sub(a, b) => write!(f, "({a} - {b})"),
            Node::Mul(a, b) => write!(f, "({a} * {b})"),
            Node::Div(a, b) => write!(f, "({a} / {b})"),
            Node::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at position {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown identifier `{name}` at position {position}")]
    UnknownIdentifier { position: usize, name: String },
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
    End,
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    tok: Token,
    tok_pos: usize,
    lex_error: Option<ParseError>,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        let mut p = Parser {
            src,
            pos: 0,
            tok: Token::End,
            tok_pos: 0,
            lex_error: None,
        };
        p.advance();
        p
    }

    fn syntax(&self, position: usize, message: impl Into<String>) -> ParseError {
        ParseError::Syntax {
            position,
            message: message.into(),
        }
    }

    fn advance(&mut self) {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        self.tok_pos = self.pos;
        if self.pos >= bytes.len() {
            self.tok = Token::End;
            return;
        }
        let c = bytes[self.pos];
        let single = match c {
            b'+' => Some(Token::Plus),
            b'-' => Some(Token::Minus),
            b'*' => Some(Token::Star),
            b'/' => Some(Token::Slash),
            b'(' => Some(Token::LParen),
            b')' => Some(Token::RParen),
            _ => None,
        };
        if let Some(tok) = single {
            self.pos += 1;
            self.tok = tok;
            return;
        }
        if c.is_ascii_digit() || c == b'.' {
            let start = self.pos;
            while self.pos < bytes.len() && (bytes[self.pos].is_ascii_digit() || bytes[self.pos] == b'.') {
                self.pos += 1;
            }
            // optional exponent, only consumed when followed by digits
            if self.pos < bytes.len() && (bytes[self.pos] == b'e' || bytes[self.pos] == b'E') {
                let mut look = self.pos + 1;
                if look < bytes.len() && (bytes[look] == b'+' || bytes[look] == b'-') {
                    look += 1;
                }
                if look < bytes.len() && bytes[look].is_ascii_digit() {
                    while look < bytes.len() && bytes[look].is_ascii_digit() {
                        look += 1;
                    }
                    self.pos = look;
                }
            }
            let text = &self.src[start..self.pos];
            match text.parse::<f64>() {
                Ok(v) => self.tok = Token::Num(v),
                Err(_) => {
                    self.lex_error = Some(self.syntax(start, format!("malformed number `{text}`")));
                    self.tok = Token::End;
                }
            }
            return;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let start = self.pos;
            while self.pos < bytes.len() && (bytes[self.pos].is_ascii_alphanumeric() || bytes[self.pos] == b'_') {
                self.pos += 1;
            }
            self.tok = Token::Ident(self.src[start..self.pos].to_string());
            return;
        }
        let ch = self.src[self.pos..].chars().next().unwrap_or('?');
        self.lex_error = Some(self.syntax(self.pos, format!("unexpected character `{ch}`")));
        self.tok = Token::End;
    }

    fn check_lex(&mut self) -> Result<(), ParseError> {
        match self.lex_error.take() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn parse(mut self) -> Result<Expr, ParseError> {
        self.check_lex()?;
        let e = self.expr()?;
        self.check_lex()?;
        if self.tok != Token::End {
            return Err(self.syntax(self.tok_pos, "unexpected trailing input"));
        }
        Ok(e)
    }

    fn bump(&mut self) -> Result<(), ParseError> {
        self.advance();
        self.check_lex()
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.term()?;
        loop {
            match self.tok {
                Token::Plus => {
                    self.bump()?;
                    acc = Expr::node(Node::Add(acc, self.term()?));
                }
                Token::Minus => {
                    self.bump()?;
                    acc = Expr::node(Node::Sub(acc, self.term()?));
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.factor()?;
        loop {
            match self.tok {
                Token::Star => {
                    self.bump()?;
                    acc = Expr::node(Node::Mul(acc, self.factor()?));
                }
                Token::Slash => {
                    self.bump()?;
                    acc = Expr::node(Node::Div(acc, self.factor()?));
                }
                _ => return Ok(acc),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        if self.tok == Token::Minus {
            self.bump()?;
            let a = self.atom()?;
            return Ok(match a.as_const() {
                Some(v) => Expr::num(-v),
                None => Expr::node(Node::Neg(a)),
            });
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let at = self.tok_pos;
        match self.tok.clone() {
            Token::Num(v) => {
                self.bump()?;
                Ok(Expr::num(v))
            }
            Token::Ident(name) => {
                self.bump()?;
                match name.as_str() {
                    "t" => Ok(Expr::t()),
                    "pi" => Ok(Expr::num(std::f64::consts::PI)),
                    _ => {
                        let Some(func) = Func::lookup(&name) else {
                            return Err(ParseError::UnknownIdentifier { position: at, name });
                        };
                        if self.tok != Token::LParen {
                            return Err(self.syntax(self.tok_pos, format!("expected `(` after `{name}`")));
                        }
                        self.bump()?;
                        let arg = self.expr()?;
                        self.expect_rparen()?;
                        Ok(Expr::node(Node::Call(func, arg)))
                    }
                }
            }
            Token::LParen => {
                self.bump()?;
                let e = self.expr()?;
                self.expect_rparen()?;
                Ok(e)
            }
            Token::End => Err(self.syntax(at, "unexpected end of input")),
            other => Err(self.syntax(at, format!("unexpected token {other:?}"))),
        }
    }

    fn expect_rparen(&mut self) -> Result<(), ParseError> {
        if self.tok != Token::RParen {
            return Err(self.syntax(self.tok_pos, "expected `)`"));
        }
        self.bump()
    }
}

/// A time-varying matrix whose entries are expressions in `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixExpr {
    rows: usize,
    cols: usize,
    entries: Vec<Expr>,
}

impl MatrixExpr {
    /// Row-major entries.
    pub fn new(rows: usize, cols: usize, entries: Vec<Expr>) -> Self {
        assert_eq!(entries.len(), rows * cols, "entry count must equal rows*cols");
        MatrixExpr { rows, cols, entries }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        MatrixExpr::new(rows, cols, vec![Expr::zero(); rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        MatrixExpr::from_fn(n, n, |i, j| if i == j { Expr::one() } else { Expr::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Expr) -> Self {
        let mut entries = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                entries.push(f(i, j));
            }
        }
        MatrixExpr { rows, cols, entries }
    }

    pub fn from_constant(m: &DMatrix<f64>) -> Self {
        MatrixExpr::from_fn(m.nrows(), m.ncols(), |i, j| Expr::num(m[(i, j)]))
    }

    /// Parse a row-major grid of expression strings.
    pub fn parse_grid<S: AsRef<str>>(rows: &[Vec<S>]) -> Result<Self, (usize, usize, ParseError)> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        let mut entries = Vec::with_capacity(nrows * ncols);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), ncols, "ragged grid");
            for (j, s) in row.iter().enumerate() {
                entries.push(Expr::parse(s.as_ref()).map_err(|e| (i, j, e))?);
            }
        }
        Ok(MatrixExpr { rows: nrows, cols: ncols, entries })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> &Expr {
        &self.entries[i * self.cols + j]
    }

    /// True when no entry depends on `t`.
    pub fn is_constant(&self) -> bool {
        self.entries.iter().all(|e| e.as_const().is_some())
    }

    pub fn eval(&self, t: f64) -> Result<DMatrix<f64>, Error> {
        let mut out = DMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let v = self.get(i, j).eval(t);
                if !v.is_finite() {
                    return Err(Error::NonFiniteEntry { row: i + 1, col: j + 1, t });
                }
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }

    pub fn derivative(&self) -> MatrixExpr {
        MatrixExpr {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(Expr::derivative).collect(),
        }
    }

    /// `order`-th time derivative.
    pub fn derivative_n(&self, order: usize) -> MatrixExpr {
        (0..order).fold(self.clone(), |m, _| m.derivative())
    }

    pub fn add(&self, other: &MatrixExpr) -> MatrixExpr {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in add");
        MatrixExpr {
            rows: self.rows,
            cols: self.cols,
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| Expr::add(a.clone(), b.clone()))
                .collect(),
        }
    }

    pub fn mul(&self, other: &MatrixExpr) -> MatrixExpr {
        assert_eq!(self.cols, other.rows, "shape mismatch in mul");
        MatrixExpr::from_fn(self.rows, other.cols, |i, j| {
            (0..self.cols).fold(Expr::zero(), |acc, l| {
                Expr::add(acc, Expr::mul(self.get(i, l).clone(), other.get(l, j).clone()))
            })
        })
    }

    /// Stack matrices with equal column count on top of each other.
    pub fn vstack(blocks: &[MatrixExpr]) -> MatrixExpr {
        let cols = blocks.first().map_or(0, |b| b.cols);
        let mut entries = Vec::new();
        let mut rows = 0;
        for b in blocks {
            assert_eq!(b.cols, cols, "column mismatch in vstack");
            entries.extend(b.entries.iter().cloned());
            rows += b.rows;
        }
        MatrixExpr { rows, cols, entries }
    }

    /// Place `block` into a zero matrix of the given shape at `(r0, c0)`.
    pub fn embed(&mut self, r0: usize, c0: usize, block: &MatrixExpr) {
        for i in 0..block.rows {
            for j in 0..block.cols {
                self.entries[(r0 + i) * self.cols + c0 + j] = block.get(i, j).clone();
            }
        }
    }
}

impl Expr {
    /// Vector of expressions evaluated at `t`.
    pub fn eval_all(exprs: &[Expr], t: f64) -> Result<nalgebra::DVector<f64>, Error> {
        let mut out = nalgebra::DVector::zeros(exprs.len());
        for (i, e) in exprs.iter().enumerate() {
            let v = e.eval(t);
            if !v.is_finite() {
                return Err(Error::NonFiniteEntry { row: i + 1, col: 1, t });
            }
            out[i] = v;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn ev(s: &str, t: f64) -> f64 {
        Expr::parse(s).unwrap().eval(t)
    }

    #[test]
    fn evaluates_examples() {
        assert!((ev("0.23*sin(0.5*t)", PI) - 0.23).abs() < 1e-15);
        for t in [-3.0, 0.0, 1.7, 40.0] {
            assert_eq!(ev("t*t - t*t", t), 0.0);
        }
        assert_eq!(ev("-1.3", 7.7), -1.3);
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("1 - 2 - 3", 0.0), -4.0);
        assert_eq!(ev("8 / 4 / 2", 0.0), 1.0);
        assert_eq!(ev("1 + 2 * 3", 0.0), 7.0);
        assert_eq!(ev("-2 * 3", 0.0), -6.0);
        assert_eq!(ev("2 * -t", 1.5), -3.0);
        assert_eq!(ev("(1 + 2) * 3", 0.0), 9.0);
        assert_eq!(ev("1.5e-3 * 2", 0.0), 3e-3);
        assert!((ev("2*pi*0.1", 0.0) - 0.2 * PI).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            Expr::parse("0.23*sn(0.5*t)"),
            Err(ParseError::UnknownIdentifier { position: 5, .. })
        ));
        assert!(matches!(Expr::parse("x"), Err(ParseError::UnknownIdentifier { .. })));
        for bad in ["", "1 +", "(1", "1)", "sin 2", "--1", "1 $ 2", "t t", "sin()", "1..2"] {
            assert!(Expr::parse(bad).is_err(), "{bad:?} should be rejected");
        }
    }

    #[test]
    fn derivative_examples() {
        let d = Expr::parse("sin(0.5*t)").unwrap().derivative();
        let reference = Expr::parse("0.5*cos(0.5*t)").unwrap();
        for t in [-2.0, 0.0, 0.3, 11.0] {
            assert!((d.eval(t) - reference.eval(t)).abs() < 1e-15);
        }
        assert_eq!(Expr::parse("3.2").unwrap().derivative().as_const(), Some(0.0));

        // central difference of t*exp(t) at 0 with h = 1e-6
        let e = Expr::parse("t*exp(t)").unwrap();
        let h = 1e-6;
        let fd = (e.eval(h) - e.eval(-h)) / (2.0 * h);
        assert!((fd - 1.0).abs() < 1e-9);
        assert!((e.derivative().eval(0.0) - fd).abs() < 1e-9);
    }

    #[test]
    fn display_round_trips() {
        for s in ["-1.3", "0.23*sin(0.5*t)", "t/(2+cos(t)) - -t", "sqrt(1+t*t)*exp(-t)", "pi*t"] {
            let e = Expr::parse(s).unwrap();
            let back = Expr::parse(&e.to_string()).unwrap();
            for t in [-1.0, 0.0, 0.7, 3.0] {
                assert_eq!(e.eval(t).to_bits(), back.eval(t).to_bits(), "{s} -> {e}");
            }
        }
    }

    #[test]
    fn matrix_eval_and_derivative() {
        let id = MatrixExpr::identity(3);
        assert_eq!(id.eval(5.0).unwrap(), DMatrix::identity(3, 3));
        let m = MatrixExpr::parse_grid(&[vec!["sin(t)", "1/(t-1)"]]).unwrap();
        assert!(matches!(m.eval(1.0), Err(Error::NonFiniteEntry { row: 1, col: 2, .. })));
        let dm = m.derivative();
        assert_eq!(dm.shape(), (1, 2));
        assert!((dm.eval(0.0).unwrap()[(0, 0)] - 1.0).abs() < 1e-15);
        assert!(MatrixExpr::identity(2).derivative().is_constant());
    }
}
