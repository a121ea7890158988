//! Fixed-step RK4 and the projected RK4 for orthonormal frames.

use nalgebra::{DMatrix, DVector};

use crate::linalg::mgs_qr;
use crate::{Error, Result};

/// Fixed-step time grid `t0, t0 + h, …, t_end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub h: f64,
    pub t0: f64,
    pub t_end: f64,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig { h: 1e-3, t0: 0.0, t_end: 1.0 }
    }
}

impl StepConfig {
    pub fn new(h: f64, t0: f64, t_end: f64) -> Result<Self> {
        let cfg = StepConfig { h, t0, t_end };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_horizon(h: f64, horizon: f64) -> Result<Self> {
        StepConfig::new(h, 0.0, horizon)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size must be positive, got {}", self.h)));
        }
        if !(self.t_end >= self.t0) || !self.t0.is_finite() || !self.t_end.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "need finite t_end >= t0, got [{}, {}]",
                self.t0, self.t_end
            )));
        }
        Ok(())
    }

    /// Number of steps; the horizon is rounded to the nearest multiple of `h`.
    pub fn steps(&self) -> usize {
        ((self.t_end - self.t0) / self.h).round() as usize
    }

    /// Time of grid point `k`, computed without accumulating rounding.
    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.h
    }

    pub fn horizon(&self) -> f64 {
        self.steps() as f64 * self.h
    }
}

/// State types RK4 can advance.
pub trait OdeState: Clone {
    /// `self + h·k`
    fn add_scaled(&self, h: f64, k: &Self) -> Self;
    fn all_finite(&self) -> bool;
}

impl OdeState for DVector<f64> {
    fn add_scaled(&self, h: f64, k: &Self) -> Self {
        self + k * h
    }

    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl OdeState for DMatrix<f64> {
    fn add_scaled(&self, h: f64, k: &Self) -> Self {
        self + k * h
    }

    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl<A: OdeState, B: OdeState> OdeState for (A, B) {
    fn add_scaled(&self, h: f64, k: &Self) -> Self {
        (self.0.add_scaled(h, &k.0), self.1.add_scaled(h, &k.1))
    }

    fn all_finite(&self) -> bool {
        self.0.all_finite() && self.1.all_finite()
    }
}

impl<A: OdeState, B: OdeState, C: OdeState> OdeState for (A, B, C) {
    fn add_scaled(&self, h: f64, k: &Self) -> Self {
        (
            self.0.add_scaled(h, &k.0),
            self.1.add_scaled(h, &k.1),
            self.2.add_scaled(h, &k.2),
        )
    }

    fn all_finite(&self) -> bool {
        self.0.all_finite() && self.1.all_finite() && self.2.all_finite()
    }
}

/// One classic RK4 step of `ẋ = f(t, x)`.
pub fn rk4_step<S, F>(mut f: F, t: f64, x: &S, h: f64) -> Result<S>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S>,
{
    let stage = |k: S, t: f64| -> Result<S> {
        if k.all_finite() {
            Ok(k)
        } else {
            Err(Error::NonFinite { what: "RK4 stage", t })
        }
    };
    let k1 = stage(f(t, x)?, t)?;
    let k2 = stage(f(t + 0.5 * h, &x.add_scaled(0.5 * h, &k1))?, t + 0.5 * h)?;
    let k3 = stage(f(t + 0.5 * h, &x.add_scaled(0.5 * h, &k2))?, t + 0.5 * h)?;
    let k4 = stage(f(t + h, &x.add_scaled(h, &k3))?, t + h)?;
    let out = x
        .add_scaled(h / 6.0, &k1)
        .add_scaled(h / 3.0, &k2)
        .add_scaled(h / 3.0, &k3)
        .add_scaled(h / 6.0, &k4);
    stage(out, t + h)
}

/// Right-hand side of the frame flow `Q̇ = (I − QQᵀ)AQ + QS` where `S` is
/// produced from `QᵀAQ` by `skew`.
pub fn frame_rhs(a: &DMatrix<f64>, q: &DMatrix<f64>, skew: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> DMatrix<f64> {
    let aq = a * q;
    let m = q.transpose() * &aq;
    let s = skew(&m);
    // (I − QQᵀ)AQ + QS = AQ − Q(QᵀAQ − S)
    aq - q * (m - s)
}

/// Re-orthonormalise an RK4 frame with modified Gram–Schmidt, rejecting
/// frames with a collapsed column.
pub fn project_frame(q: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    for (j, col) in q.column_iter().enumerate() {
        let norm = col.norm();
        if norm < 1e-12 {
            return Err(Error::FrameCollapse { column: j + 1, norm, t });
        }
    }
    Ok(mgs_qr(q).q)
}

/// One projected RK4 step of the frame flow: RK4 on `Q̇`, then mGS.
pub fn projected_rk4_step<A, S>(mut a_at: A, t: f64, q: &DMatrix<f64>, skew: S, h: f64) -> Result<DMatrix<f64>>
where
    A: FnMut(f64) -> Result<DMatrix<f64>>,
    S: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    let next = rk4_step(|s, qs: &DMatrix<f64>| Ok(frame_rhs(&a_at(s)?, qs, &skew)), t, q, h)?;
    project_frame(&next, t + h)
}
