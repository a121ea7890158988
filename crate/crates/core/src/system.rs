use nalgebra::{DMatrix, DVector};

use crate::expr::{Expr, MatrixExpr};
use crate::{Error, Result};

/// Anything that yields a matrix for a given time.
pub trait TimeMatrix {
    fn shape(&self) -> (usize, usize);
    fn at(&self, t: f64) -> Result<DMatrix<f64>>;
}

impl TimeMatrix for MatrixExpr {
    fn shape(&self) -> (usize, usize) {
        MatrixExpr::shape(self)
    }

    fn at(&self, t: f64) -> Result<DMatrix<f64>> {
        self.eval(t)
    }
}

impl TimeMatrix for DMatrix<f64> {
    fn shape(&self) -> (usize, usize) {
        (self.nrows(), self.ncols())
    }

    fn at(&self, _t: f64) -> Result<DMatrix<f64>> {
        Ok(self.clone())
    }
}

/// Adapter for closures `t -> matrix`.
pub struct FnMatrix<F> {
    shape: (usize, usize),
    f: F,
}

impl<F: Fn(f64) -> DMatrix<f64>> FnMatrix<F> {
    pub fn new(rows: usize, cols: usize, f: F) -> Self {
        FnMatrix { shape: (rows, cols), f }
    }
}

impl<F: Fn(f64) -> DMatrix<f64>> TimeMatrix for FnMatrix<F> {
    fn shape(&self) -> (usize, usize) {
        self.shape
    }

    fn at(&self, t: f64) -> Result<DMatrix<f64>> {
        let m = (self.f)(t);
        if m.iter().all(|v| v.is_finite()) {
            Ok(m)
        } else {
            Err(Error::NonFinite { what: "matrix function", t })
        }
    }
}

/// `ẋ = A x + F u + D w`, `y = C x` with `x ∈ ℝⁿ`, `u ∈ ℝ^q`, `w ∈ ℝ^m`, `y ∈ ℝ^r`.
#[derive(Debug, Clone)]
pub struct LtvSystem {
    pub a: MatrixExpr,
    pub f: MatrixExpr,
    pub d: MatrixExpr,
    pub c: MatrixExpr,
    /// Bound on the unknown input, `‖w(t)‖ ≤ w_bar`.
    pub w_bar: f64,
}

impl LtvSystem {
    /// Validates the dimensions of the quadruple.
    pub fn new(a: MatrixExpr, f: MatrixExpr, d: MatrixExpr, c: MatrixExpr, w_bar: f64) -> Result<Self> {
        let n = a.rows();
        let check = |name: &str, got: (usize, usize), rows: Option<usize>, cols: Option<usize>| {
            let ok = rows.is_none_or(|r| r == got.0) && cols.is_none_or(|c| c == got.1);
            if ok {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    name: name.to_string(),
                    expected: format!(
                        "{}x{}",
                        rows.map_or("*".into(), |r| r.to_string()),
                        cols.map_or("*".into(), |c| c.to_string())
                    ),
                    found: format!("{}x{}", got.0, got.1),
                })
            }
        };
        check("A", a.shape(), Some(n), Some(n))?;
        check("F", f.shape(), Some(n), None)?;
        check("D", d.shape(), Some(n), None)?;
        check("C", c.shape(), None, Some(n))?;
        if !(w_bar >= 0.0) {
            return Err(Error::InvalidArgument(format!("w_bar must be non-negative, got {w_bar}")));
        }
        Ok(LtvSystem { a, f, d, c, w_bar })
    }

    /// Input-free system `(A, 0, D, C)`.
    pub fn without_known_input(a: MatrixExpr, d: MatrixExpr, c: MatrixExpr, w_bar: f64) -> Result<Self> {
        let n = a.rows();
        LtvSystem::new(a, MatrixExpr::zeros(n, 0), d, c, w_bar)
    }

    pub fn n(&self) -> usize {
        self.a.rows()
    }

    pub fn q(&self) -> usize {
        self.f.cols()
    }

    pub fn m(&self) -> usize {
        self.d.cols()
    }

    pub fn r(&self) -> usize {
        self.c.rows()
    }
}

/// A vector-valued signal given by one expression per component.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal(pub Vec<Expr>);

impl Signal {
    pub fn zeros(len: usize) -> Self {
        Signal(vec![Expr::zero(); len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn at(&self, t: f64) -> Result<DVector<f64>> {
        Expr::eval_all(&self.0, t)
    }

    pub fn derivative(&self) -> Signal {
        Signal(self.0.iter().map(Expr::derivative).collect())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(Expr::is_zero)
    }
}
