//! Lyapunov exponents by the continuous QR flow and finite-horizon
//! regularity diagnostics.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::integrators::{frame_rhs, project_frame, rk4_step, StepConfig};
use crate::linalg::{mgs_qr, orthonormality_defect};
use crate::system::TimeMatrix;
use crate::{Error, Result};

/// Default band around zero inside which an exponent counts as non-negative.
pub const DEFAULT_ZERO_BAND: f64 = 1e-3;
/// Default margin ε for strong regularity checks.
pub const DEFAULT_EPSILON: f64 = 1e-2;
/// Default threshold on the tail mass for strong regularity.
pub const DEFAULT_STRONG_TOL: f64 = 0.05;

/// Skew-symmetric `S` with `S_ij = M_ij` for `i > j`.
pub fn skew_rule(m: &DMatrix<f64>) -> DMatrix<f64> {
    let k = m.nrows();
    assert_eq!(k, m.ncols(), "skew_rule needs a square matrix");
    let mut s = DMatrix::zeros(k, k);
    for j in 0..k {
        for i in (j + 1)..k {
            s[(i, j)] = m[(i, j)];
            s[(j, i)] = -m[(i, j)];
        }
    }
    s
}

/// First `k` columns of the identity.
pub fn identity_frame(n: usize, k: usize) -> DMatrix<f64> {
    DMatrix::identity(n, k)
}

/// Orthonormalised Gaussian frame drawn from a seeded ChaCha8 stream.
pub fn random_frame(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng));
    mgs_qr(&x).q
}

/// Remembers the last few evaluations of a time matrix, so that RK4 stage
/// times shared between consecutive steps are evaluated once.
pub(crate) struct MatrixCache<'a, M: TimeMatrix + ?Sized> {
    src: &'a M,
    slots: [(f64, Option<DMatrix<f64>>); 3],
    next: usize,
}

impl<'a, M: TimeMatrix + ?Sized> MatrixCache<'a, M> {
    pub(crate) fn new(src: &'a M) -> Self {
        MatrixCache { src, slots: [(f64::NAN, None), (f64::NAN, None), (f64::NAN, None)], next: 0 }
    }

    pub(crate) fn at(&mut self, t: f64) -> Result<DMatrix<f64>> {
        for (ts, m) in &self.slots {
            if *ts == t {
                if let Some(m) = m {
                    return Ok(m.clone());
                }
            }
        }
        let m = self.src.at(t)?;
        self.slots[self.next] = (t, Some(m.clone()));
        self.next = (self.next + 1) % self.slots.len();
        Ok(m)
    }
}

/// Diagonal entries `B_ii = (QᵀAQ)_ii`.
pub fn frame_diagonal(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Vec<f64> {
    let aq = a * q;
    (0..q.ncols()).map(|i| q.column(i).dot(&aq.column(i))).collect()
}

/// Sampled `B_ii(t)` series, one row per direction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiagonalSeries {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl DiagonalSeries {
    pub fn new(k: usize) -> Self {
        DiagonalSeries { times: Vec::new(), values: vec![Vec::new(); k] }
    }

    /// Series sampled from a closure for each direction.
    pub fn from_fn(k: usize, cfg: &StepConfig, f: impl Fn(usize, f64) -> f64) -> Self {
        let mut s = DiagonalSeries::new(k);
        for step in 0..=cfg.steps() {
            let t = cfg.time(step);
            s.times.push(t);
            for (i, v) in s.values.iter_mut().enumerate() {
                v.push(f(i, t));
            }
        }
        s
    }

    pub fn directions(&self) -> usize {
        self.values.len()
    }

    fn push(&mut self, t: f64, diag: &[f64]) {
        self.times.push(t);
        for (v, d) in self.values.iter_mut().zip(diag) {
            v.push(*d);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumOptions {
    /// Record a history point every `record_stride` steps.
    pub record_stride: usize,
    /// Keep the full-resolution `B_ii` series for regularity checks.
    pub keep_diagonal: bool,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        SpectrumOptions { record_stride: 100, keep_diagonal: false }
    }
}

/// One recorded point of the running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryPoint {
    pub t: f64,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SpectrumEstimate {
    /// Running averages at the final time, non-increasing.
    pub exponents: Vec<f64>,
    /// Accumulated `∫ B_ii`.
    pub integrals: Vec<f64>,
    pub q_final: DMatrix<f64>,
    pub history: Vec<HistoryPoint>,
    /// Present when requested through [`SpectrumOptions::keep_diagonal`].
    pub diagonal: Option<DiagonalSeries>,
    /// Largest `‖QᵀQ − I‖_F` seen after projection.
    pub max_orthonormality_defect: f64,
    pub step: StepConfig,
}

/// Spectrum estimate with default options and `Q0` the first `k` identity
/// columns when not given.
pub fn estimate_spectrum<M: TimeMatrix + ?Sized>(
    a: &M,
    k: usize,
    q0: Option<&DMatrix<f64>>,
    cfg: StepConfig,
) -> Result<SpectrumEstimate> {
    let n = a.shape().0;
    let q0 = q0.cloned().unwrap_or_else(|| identity_frame(n, k));
    estimate_spectrum_with(a, &q0, cfg, SpectrumOptions::default())
}

pub fn estimate_spectrum_with<M: TimeMatrix + ?Sized>(
    a: &M,
    q0: &DMatrix<f64>,
    cfg: StepConfig,
    opts: SpectrumOptions,
) -> Result<SpectrumEstimate> {
    cfg.validate()?;
    let (n, na) = a.shape();
    if n != na {
        return Err(Error::DimensionMismatch { name: "A".into(), expected: "square".into(), found: format!("{n}x{na}") });
    }
    let k = q0.ncols();
    if k == 0 || k > n || q0.nrows() != n {
        return Err(Error::InvalidArgument(format!("frame must be {n}xk with 1 <= k <= {n}, got {}x{k}", q0.nrows())));
    }
    if orthonormality_defect(q0) > 1e-8 {
        return Err(Error::InvalidArgument("initial frame is not orthonormal".into()));
    }
    let stride = opts.record_stride.max(1);
    let steps = cfg.steps();
    let h = cfg.h;

    let mut cache = MatrixCache::new(a);
    let mut q = q0.clone();
    let mut diag = frame_diagonal(&cache.at(cfg.t0)?, &q);
    let mut integrals = vec![0.0; k];
    let mut history = Vec::new();
    let mut series = opts.keep_diagonal.then(|| DiagonalSeries::new(k));
    if let Some(s) = series.as_mut() {
        s.push(cfg.t0, &diag);
    }
    let mut max_defect = orthonormality_defect(&q);

    for step in 0..steps {
        let t = cfg.time(step);
        let t1 = cfg.time(step + 1);
        let stepped = rk4_step(|s, qs: &DMatrix<f64>| Ok(frame_rhs(&cache.at(s)?, qs, skew_rule)), t, &q, h)?;
        q = project_frame(&stepped, t1)?;
        max_defect = max_defect.max(orthonormality_defect(&q));
        let next = frame_diagonal(&cache.at(t1)?, &q);
        for i in 0..k {
            integrals[i] += 0.5 * h * (diag[i] + next[i]);
        }
        if integrals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "exponent integral", t: t1 });
        }
        diag = next;
        if let Some(s) = series.as_mut() {
            s.push(t1, &diag);
        }
        if (step + 1) % stride == 0 || step + 1 == steps {
            let span = t1 - cfg.t0;
            history.push(HistoryPoint { t: t1, lambda: integrals.iter().map(|v| v / span).collect() });
        }
    }

    let span = cfg.horizon();
    let exponents: Vec<f64> = if span > 0.0 {
        integrals.iter().map(|v| v / span).collect()
    } else {
        diag.clone()
    };
    let mut est = SpectrumEstimate {
        exponents,
        integrals,
        q_final: q,
        history,
        diagonal: series,
        max_orthonormality_defect: max_defect,
        step: cfg,
    };
    sort_directions(&mut est);
    Ok(est)
}

/// Reorders all per-direction data so that exponents are non-increasing.
fn sort_directions(est: &mut SpectrumEstimate) {
    let k = est.exponents.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| est.exponents[j].total_cmp(&est.exponents[i]));
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        return;
    }
    let perm = |v: &[f64]| order.iter().map(|&o| v[o]).collect::<Vec<f64>>();
    est.exponents = perm(&est.exponents);
    est.integrals = perm(&est.integrals);
    for p in &mut est.history {
        p.lambda = perm(&p.lambda);
    }
    let q = est.q_final.clone();
    for (dst, &src) in order.iter().enumerate() {
        est.q_final.set_column(dst, &q.column(src));
    }
    if let Some(s) = est.diagonal.as_mut() {
        let old = std::mem::take(&mut s.values);
        s.values = order.iter().map(|&o| old[o].clone()).collect();
    }
}

/// Number of exponents `≥ −zero_band`.
pub fn nonstable_dimension(exponents: &[f64], zero_band: f64) -> usize {
    exponents.iter().filter(|&&l| l >= -zero_band).count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularityOptions {
    pub epsilon: f64,
    /// Window length as a fraction of the horizon.
    pub window_fraction: f64,
    pub zero_band: f64,
    pub strong_tol: f64,
}

impl Default for RegularityOptions {
    fn default() -> Self {
        RegularityOptions {
            epsilon: DEFAULT_EPSILON,
            window_fraction: 0.05,
            zero_band: DEFAULT_ZERO_BAND,
            strong_tol: DEFAULT_STRONG_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionRegularity {
    /// Average of `B_ii` over the whole horizon.
    pub mean: f64,
    pub limsup_estimate: f64,
    pub liminf_estimate: f64,
    pub gap: f64,
    pub forward_regular: bool,
    /// Whether the direction was classified as stable (`mean < −zero_band`).
    pub stable: bool,
    /// `∫_{T/2}^{T} max(B_ii + ε, 0)`.
    pub tail_mass_positive: f64,
    /// `∫_{T/2}^{T} max(ε − B_ii, 0)`.
    pub tail_mass_negative: f64,
    /// The mass relevant for the classification.
    pub tail_mass: f64,
    pub strong_regular: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularityReport {
    pub directions: Vec<DirectionRegularity>,
    pub options: RegularityOptions,
    pub window: f64,
    pub horizon: (f64, f64),
}

impl RegularityReport {
    pub fn all_forward_regular(&self) -> bool {
        self.directions.iter().all(|d| d.forward_regular)
    }

    pub fn all_strong_regular(&self) -> bool {
        self.directions.iter().all(|d| d.strong_regular)
    }
}

/// Finite-horizon regularity proxies.
///
/// limsup and liminf are the extrema of the running average
/// `(1/(t − t0)) ∫_{t0}^{t} B_ii` sampled at window endpoints covering the
/// last half of the horizon. Tail masses integrate over `[T/2, T]`.
pub fn regularity_report(series: &DiagonalSeries, opts: RegularityOptions) -> Result<RegularityReport> {
    let times = &series.times;
    if times.len() < 3 {
        return Err(Error::InsufficientHistory(format!("{} samples", times.len())));
    }
    if !(opts.window_fraction > 0.0 && opts.window_fraction <= 0.25) {
        return Err(Error::InvalidArgument(format!(
            "window_fraction must lie in (0, 0.25], got {}",
            opts.window_fraction
        )));
    }
    let t0 = times[0];
    let t_end = *times.last().unwrap();
    let horizon = t_end - t0;
    let window = opts.window_fraction * horizon;
    let tail_start = t0 + 0.5 * horizon;
    // window endpoints in the tail
    let mut marks = Vec::new();
    let mut m = t_end;
    while m >= tail_start - 1e-9 * horizon {
        marks.push(m);
        m -= window;
    }
    marks.reverse();
    if marks.len() < 2 {
        return Err(Error::InsufficientHistory("fewer than two windows in the tail".into()));
    }
    let mut directions = Vec::with_capacity(series.directions());
    for values in &series.values {
        if values.len() != times.len() {
            return Err(Error::DimensionMismatch {
                name: "B_ii series".into(),
                expected: times.len().to_string(),
                found: values.len().to_string(),
            });
        }
        let mut cumulative = 0.0;
        let mut averages = Vec::with_capacity(marks.len());
        let mut next_mark = 0;
        let mut pos = 0.0;
        let mut neg = 0.0;
        for idx in 1..times.len() {
            let (ta, tb) = (times[idx - 1], times[idx]);
            let (va, vb) = (values[idx - 1], values[idx]);
            let dt = tb - ta;
            cumulative += 0.5 * dt * (va + vb);
            if tb > tail_start {
                pos += 0.5 * dt * ((va + opts.epsilon).max(0.0) + (vb + opts.epsilon).max(0.0));
                neg += 0.5 * dt * ((opts.epsilon - va).max(0.0) + (opts.epsilon - vb).max(0.0));
            }
            while next_mark < marks.len() && tb >= marks[next_mark] - 0.5 * dt {
                averages.push(cumulative / (tb - t0));
                next_mark += 1;
            }
        }
        let mean = cumulative / horizon;
        let limsup = averages.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let liminf = averages.iter().cloned().fold(f64::INFINITY, f64::min);
        let gap = limsup - liminf;
        let stable = mean < -opts.zero_band;
        let tail_mass = if stable { pos } else { neg };
        directions.push(DirectionRegularity {
            mean,
            limsup_estimate: limsup,
            liminf_estimate: liminf,
            gap,
            forward_regular: gap <= 10.0 * opts.zero_band,
            stable,
            tail_mass_positive: pos,
            tail_mass_negative: neg,
            tail_mass,
            strong_regular: tail_mass <= opts.strong_tol,
        });
    }
    Ok(RegularityReport { directions, options: opts, window, horizon: (t0, t_end) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::MatrixExpr;
    use approx::assert_relative_eq;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn skew_examples() {
        let s = skew_rule(&mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(s, mat(2, 2, &[0.0, -3.0, 3.0, 0.0]));
        assert_eq!(skew_rule(&mat(2, 2, &[1.0, 0.0, 0.0, 5.0])), DMatrix::zeros(2, 2));
        assert_eq!(skew_rule(&mat(1, 1, &[7.0])), DMatrix::zeros(1, 1));
    }

    #[test]
    fn constant_diagonal_spectrum() {
        let a = mat(2, 2, &[2.0, 0.0, 0.0, -1.0]);
        let est = estimate_spectrum(&a, 2, None, StepConfig::new(1e-2, 0.0, 50.0).unwrap()).unwrap();
        assert_relative_eq!(est.exponents[0], 2.0, epsilon = 1e-6);
        assert_relative_eq!(est.exponents[1], -1.0, epsilon = 1e-6);
    }

    #[test]
    fn double_integrator_spectrum() {
        let a = MatrixExpr::parse_grid(&[vec!["0", "1"], vec!["0", "0"]]).unwrap();
        let est = estimate_spectrum(&a, 2, None, StepConfig::new(1e-2, 0.0, 200.0).unwrap()).unwrap();
        for l in &est.exponents {
            assert!(l.abs() <= 0.05, "{l}");
        }
        assert_eq!(nonstable_dimension(&est.exponents, DEFAULT_ZERO_BAND), 2);
    }

    #[test]
    fn sorted_by_exponent() {
        let a = mat(3, 3, &[-1.0, 2.0, 0.5, 0.0, 3.0, 1.0, 0.0, 0.0, 0.5]);
        let est = estimate_spectrum(&a, 3, None, StepConfig::new(1e-2, 0.0, 100.0).unwrap()).unwrap();
        assert_relative_eq!(est.exponents[0], 3.0, epsilon = 1e-6);
        assert_relative_eq!(est.exponents[1], 0.5, epsilon = 1e-6);
        assert_relative_eq!(est.exponents[2], -1.0, epsilon = 1e-6);
        assert!(est.history.windows(2).all(|w| w[0].t < w[1].t));
    }

    #[test]
    fn nonstable_dimension_examples() {
        assert_eq!(nonstable_dimension(&[2.0, -1.0], DEFAULT_ZERO_BAND), 1);
        assert_eq!(nonstable_dimension(&[0.0, 0.0], DEFAULT_ZERO_BAND), 2);
        assert_eq!(nonstable_dimension(&[-5e-4], DEFAULT_ZERO_BAND), 1);
    }

    #[test]
    fn regularity_constant() {
        let cfg = StepConfig::new(1e-2, 0.0, 100.0).unwrap();
        let s = DiagonalSeries::from_fn(1, &cfg, |_, _| -1.0);
        let rep = regularity_report(&s, RegularityOptions { epsilon: 0.1, ..Default::default() }).unwrap();
        let d = &rep.directions[0];
        assert!(d.forward_regular && d.strong_regular);
        assert_eq!(d.tail_mass, 0.0);
        assert!(d.limsup_estimate >= d.liminf_estimate);
    }

    #[test]
    fn regularity_sine() {
        let cfg = StepConfig::new(1e-2, 0.0, 2000.0).unwrap();
        let s = DiagonalSeries::from_fn(1, &cfg, |_, t| t.sin());
        let rep = regularity_report(&s, RegularityOptions { epsilon: 0.5, ..Default::default() }).unwrap();
        let d = &rep.directions[0];
        assert!(d.limsup_estimate.abs() < 0.01 && d.liminf_estimate.abs() < 0.01);
        assert!(d.forward_regular);
        assert!(!d.strong_regular);
    }

    #[test]
    fn regularity_decaying_transient() {
        let cfg = StepConfig::new(1e-2, 0.0, 100.0).unwrap();
        let s = DiagonalSeries::from_fn(1, &cfg, |_, t| -1.0 + 2.0 * (-t).exp());
        let rep = regularity_report(&s, RegularityOptions { epsilon: 0.1, ..Default::default() }).unwrap();
        let d = &rep.directions[0];
        assert!(d.stable && d.strong_regular);
    }

    #[test]
    fn regularity_needs_history() {
        let s = DiagonalSeries { times: vec![0.0, 1.0], values: vec![vec![0.0, 0.0]] };
        assert!(matches!(regularity_report(&s, RegularityOptions::default()), Err(Error::InsufficientHistory(_))));
    }
}
