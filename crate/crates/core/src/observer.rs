//! Tangent-space observer: gain on the non-stable subspace from the reduced
//! QR flow, coupled plant/observer simulation and detectability diagnostics.

use nalgebra::{DMatrix, DVector};

use crate::error::DesignStep;
use crate::integrators::{frame_rhs, project_frame, rk4_step, StepConfig};
use crate::linalg::{mgs_qr, min_singular_value, orthonormality_defect};
use crate::lyapunov::{frame_diagonal, identity_frame, skew_rule, MatrixCache, DEFAULT_ZERO_BAND};
use crate::system::{LtvSystem, Signal};
use crate::{Error, Result};

/// Default threshold on the averaged `R̃_jj` for a detectable direction.
pub const DEFAULT_DETECT_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct ObserverConfig {
    pub p: f64,
    pub k: usize,
    pub q0: DMatrix<f64>,
    pub step: StepConfig,
    pub detect_tol: f64,
    pub zero_band: f64,
}

impl ObserverConfig {
    /// Configuration with `Q0` the first `k` identity columns.
    pub fn new(n: usize, p: f64, k: usize, step: StepConfig) -> Result<Self> {
        let conf = ObserverConfig {
            p,
            k,
            q0: identity_frame(n, k.min(n)),
            step,
            detect_tol: DEFAULT_DETECT_TOL,
            zero_band: DEFAULT_ZERO_BAND,
        };
        conf.validate(n)?;
        Ok(conf)
    }

    pub fn with_frame(mut self, q0: DMatrix<f64>) -> Self {
        self.q0 = q0;
        self
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.p > 0.0 && self.p.is_finite()) {
            return Err(Error::InvalidArgument(format!("gain p must be positive, got {}", self.p)));
        }
        if self.k == 0 || self.k > n {
            return Err(Error::InvalidArgument(format!("k must lie in 1..={n}, got {}", self.k)));
        }
        if self.q0.shape() != (n, self.k) {
            return Err(Error::DimensionMismatch {
                name: "Q0".into(),
                expected: format!("{n}x{}", self.k),
                found: format!("{}x{}", self.q0.nrows(), self.q0.ncols()),
            });
        }
        if orthonormality_defect(&self.q0) > 1e-8 {
            return Err(Error::InvalidArgument("Q0 must have orthonormal columns".into()));
        }
        self.step.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverState {
    pub xt: DVector<f64>,
    pub q: DMatrix<f64>,
    pub t: f64,
}

/// Gain `L = pQQ̃ᵀCᵀ` with `Q̃R̃ = CᵀCQ`; also returns `diag(R̃)`.
///
/// Columns of `Q̃` belonging to a zero `R̃_jj` are dropped, so a direction
/// in `Ker CᵀC` receives no gain.
pub fn compute_gain(c: &DMatrix<f64>, q: &DMatrix<f64>, p: f64) -> (DMatrix<f64>, Vec<f64>) {
    let ctc_q = c.transpose() * (c * q);
    let mut qr = mgs_qr(&ctc_q);
    for j in 0..q.ncols() {
        if qr.r[(j, j)] == 0.0 {
            qr.q.column_mut(j).fill(0.0);
        }
    }
    let l = (q * qr.q.transpose() * c.transpose()) * p;
    let rdiag = (0..q.ncols()).map(|j| qr.r[(j, j)]).collect();
    (l, rdiag)
}

/// One observer step driven by externally given `u(t)` and `y(t)`.
///
/// `x̃` and `Q` are advanced together by RK4 with the gain recomputed from
/// each stage frame; `Q` is re-orthonormalised afterwards.
pub fn observer_step(
    sys: &LtvSystem,
    st: &ObserverState,
    u: impl Fn(f64) -> Result<DVector<f64>>,
    y: impl Fn(f64) -> Result<DVector<f64>>,
    conf: &ObserverConfig,
) -> Result<ObserverState> {
    let h = conf.step.h;
    let next = rk4_step(
        |s, (xt, q): &(DVector<f64>, DMatrix<f64>)| {
            let a = sys.a.eval(s)?;
            let c = sys.c.eval(s)?;
            let (l, _) = compute_gain(&c, q, conf.p);
            let mut dxt = &a * xt + l * (y(s)? - &c * xt);
            if sys.q() > 0 {
                dxt += sys.f.eval(s)? * u(s)?;
            }
            Ok((dxt, frame_rhs(&a, q, skew_rule)))
        },
        st.t,
        &(st.xt.clone(), st.q.clone()),
        h,
    )?;
    Ok(ObserverState { xt: next.0, q: project_frame(&next.1, st.t + h)?, t: st.t + h })
}

/// Per-direction detectability diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionDetectability {
    /// Running average of `R̃_jj`.
    pub r_bar: f64,
    /// Running average of `B_jj` along the frame.
    pub lambda: f64,
    /// Predicted error exponent `λ̂_j − p·r̄_j`.
    pub mu: f64,
    pub nonstable: bool,
    pub detectable: bool,
}

impl DirectionDetectability {
    pub fn fails(&self) -> bool {
        self.nonstable && !self.detectable
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectabilityReport {
    pub p: f64,
    pub directions: Vec<DirectionDetectability>,
    /// Smallest `σ_min(CᵀCQ)` over the step grid; near zero warns of a
    /// non-smooth gain.
    pub min_sigma_ctcq: f64,
    pub horizon: (f64, f64),
}

impl DetectabilityReport {
    pub fn passed(&self) -> bool {
        !self.directions.iter().any(DirectionDetectability::fails)
    }
}

/// Integrates the reduced frame flow and averages `B_jj` and `R̃_jj`.
pub fn detectability_report(sys: &LtvSystem, conf: &ObserverConfig) -> Result<DetectabilityReport> {
    let n = sys.n();
    conf.validate(n)?;
    let cfg = conf.step;
    let k = conf.k;
    let mut a_cache = MatrixCache::new(&sys.a);
    let mut q = conf.q0.clone();
    let sample = |a: &DMatrix<f64>, c: &DMatrix<f64>, q: &DMatrix<f64>| -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let (_, rdiag) = compute_gain(c, q, conf.p);
        let sigma = min_singular_value(&(c.transpose() * (c * q)))?;
        Ok((frame_diagonal(a, q), rdiag, sigma))
    };
    let (mut b_prev, mut r_prev, mut min_sigma) = sample(&a_cache.at(cfg.t0)?, &sys.c.eval(cfg.t0)?, &q)?;
    let mut b_int = vec![0.0; k];
    let mut r_int = vec![0.0; k];
    for step in 0..cfg.steps() {
        let t = cfg.time(step);
        let t1 = cfg.time(step + 1);
        let next = rk4_step(|s, qs: &DMatrix<f64>| Ok(frame_rhs(&a_cache.at(s)?, qs, skew_rule)), t, &q, cfg.h)?;
        q = project_frame(&next, t1)?;
        let (b, r, sigma) = sample(&a_cache.at(t1)?, &sys.c.eval(t1)?, &q)?;
        for j in 0..k {
            b_int[j] += 0.5 * cfg.h * (b_prev[j] + b[j]);
            r_int[j] += 0.5 * cfg.h * (r_prev[j] + r[j]);
        }
        min_sigma = min_sigma.min(sigma);
        b_prev = b;
        r_prev = r;
    }
    let span = cfg.horizon();
    let directions = (0..k)
        .map(|j| {
            let (lambda, r_bar) = if span > 0.0 { (b_int[j] / span, r_int[j] / span) } else { (b_prev[j], r_prev[j]) };
            DirectionDetectability {
                r_bar,
                lambda,
                mu: lambda - conf.p * r_bar,
                nonstable: lambda >= -conf.zero_band,
                detectable: r_bar > conf.detect_tol,
            }
        })
        .collect();
    Ok(DetectabilityReport { p: conf.p, directions, min_sigma_ctcq: min_sigma, horizon: (cfg.t0, cfg.t0 + span) })
}

/// Smallest gain `p` pushing every non-stable direction below `−margin`:
/// `max_j (λ̂_j + margin)/r̄_j`.
pub fn min_gain_suggestion(report: &DetectabilityReport, margin: f64) -> Result<f64> {
    if let Some((j, _)) = report.directions.iter().enumerate().find(|(_, d)| d.fails()) {
        return Err(Error::precondition(
            DesignStep::Detectability,
            format!("non-stable direction {} is not detectable", j + 1),
        ));
    }
    Ok(report
        .directions
        .iter()
        .filter(|d| d.nonstable)
        .map(|d| (d.lambda + margin) / d.r_bar)
        .fold(0.0, f64::max))
}

/// True plant with its known and unknown inputs.
#[derive(Debug, Clone)]
pub struct Plant {
    pub sys: LtvSystem,
    /// Feed-forward part of the known input.
    pub u: Signal,
    pub w: Signal,
    /// Optional state feedback `u = u_ff − K x̃` on the observer estimate.
    pub feedback: Option<DMatrix<f64>>,
}

impl Plant {
    pub fn new(sys: LtvSystem, u: Signal, w: Signal, feedback: Option<DMatrix<f64>>) -> Result<Self> {
        if u.len() != sys.q() {
            return Err(Error::DimensionMismatch { name: "u".into(), expected: sys.q().to_string(), found: u.len().to_string() });
        }
        if w.len() != sys.m() {
            return Err(Error::DimensionMismatch { name: "w".into(), expected: sys.m().to_string(), found: w.len().to_string() });
        }
        if let Some(k) = &feedback {
            if k.shape() != (sys.q(), sys.n()) {
                return Err(Error::DimensionMismatch {
                    name: "feedback".into(),
                    expected: format!("{}x{}", sys.q(), sys.n()),
                    found: format!("{}x{}", k.nrows(), k.ncols()),
                });
            }
        }
        Ok(Plant { sys, u, w, feedback })
    }

    pub fn known_input(&self, t: f64, xt: &DVector<f64>) -> Result<DVector<f64>> {
        let mut u = self.u.at(t)?;
        if let Some(k) = &self.feedback {
            u -= k * xt;
        }
        Ok(u)
    }
}

#[derive(Debug, Clone)]
struct Sampled {
    a: DMatrix<f64>,
    f: DMatrix<f64>,
    d: DMatrix<f64>,
    c: DMatrix<f64>,
    w: DVector<f64>,
}

/// Evaluations of the plant at the last few stage times.
struct PlantCache<'a> {
    plant: &'a Plant,
    slots: Vec<(f64, Sampled)>,
}

impl<'a> PlantCache<'a> {
    fn new(plant: &'a Plant) -> Self {
        PlantCache { plant, slots: Vec::with_capacity(3) }
    }

    fn at(&mut self, t: f64) -> Result<Sampled> {
        if let Some((_, s)) = self.slots.iter().find(|(ts, _)| *ts == t) {
            return Ok(s.clone());
        }
        let sys = &self.plant.sys;
        let s = Sampled { a: sys.a.eval(t)?, f: sys.f.eval(t)?, d: sys.d.eval(t)?, c: sys.c.eval(t)?, w: self.plant.w.at(t)? };
        if self.slots.len() == 3 {
            self.slots.remove(0);
        }
        self.slots.push((t, s.clone()));
        Ok(s)
    }
}

type Coupled = ((DVector<f64>, DVector<f64>), DMatrix<f64>);

/// Plant, observer and frame advanced as one coupled RK4 system.
///
/// The plant is carried in error coordinates `e = x − x̃`, whose dynamics
/// `ė = (A − LC)e + Dw − Ln` do not involve the known input; `x` is
/// recovered as `x̃ + e`.
pub struct Simulator<'a> {
    plant: &'a Plant,
    cache: PlantCache<'a>,
    p: f64,
    step: StepConfig,
    index: usize,
    pub x: DVector<f64>,
    pub xt: DVector<f64>,
    e: DVector<f64>,
    pub q: DMatrix<f64>,
    pub max_orthonormality_defect: f64,
}

impl<'a> Simulator<'a> {
    pub fn new(plant: &'a Plant, conf: &ObserverConfig, x0: DVector<f64>, xt0: DVector<f64>) -> Result<Self> {
        let n = plant.sys.n();
        conf.validate(n)?;
        for (name, v) in [("x0", &x0), ("xt0", &xt0)] {
            if v.len() != n {
                return Err(Error::DimensionMismatch { name: name.into(), expected: n.to_string(), found: v.len().to_string() });
            }
        }
        Ok(Simulator {
            plant,
            cache: PlantCache::new(plant),
            p: conf.p,
            step: conf.step,
            index: 0,
            e: &x0 - &xt0,
            x: x0,
            xt: xt0,
            max_orthonormality_defect: orthonormality_defect(&conf.q0),
            q: conf.q0.clone(),
        })
    }

    pub fn t(&self) -> f64 {
        self.step.time(self.index)
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn done(&self) -> bool {
        self.index >= self.step.steps()
    }

    /// Output matrix, gain and `diag(R̃)` at the current time.
    pub fn gain_now(&mut self) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<f64>)> {
        let s = self.cache.at(self.t())?;
        let (l, rdiag) = compute_gain(&s.c, &self.q, self.p);
        Ok((s.c, l, rdiag))
    }

    /// Noise-free output error `C(x − x̃)` at the current time.
    pub fn output_error(&mut self) -> Result<DVector<f64>> {
        let s = self.cache.at(self.t())?;
        Ok(&s.c * &self.e)
    }

    pub fn error(&self) -> DVector<f64> {
        self.e.clone()
    }

    /// One step; `noise` is added to the measurement and held over the step.
    pub fn step(&mut self, noise: Option<&DVector<f64>>) -> Result<()> {
        let t = self.t();
        let t1 = self.step.time(self.index + 1);
        let h = self.step.h;
        let p = self.p;
        let plant = self.plant;
        let cache = &mut self.cache;
        let state: Coupled = ((self.e.clone(), self.xt.clone()), self.q.clone());
        let next = rk4_step(
            |s, ((e, xt), q): &Coupled| {
                let m = cache.at(s)?;
                let (l, _) = compute_gain(&m.c, q, p);
                // output error y − Cx̃ as the observer sees it
                let mut ey = &m.c * e;
                if let Some(n) = noise {
                    ey += n;
                }
                let mut dxt = &m.a * xt + &l * &ey;
                if plant.sys.q() > 0 {
                    dxt += &m.f * plant.known_input(s, xt)?;
                }
                let de = &m.a * e + &m.d * &m.w - l * ey;
                Ok(((de, dxt), frame_rhs(&m.a, q, skew_rule)))
            },
            t,
            &state,
            h,
        )?;
        let ((e, xt), q) = next;
        self.q = project_frame(&q, t1)?;
        self.max_orthonormality_defect = self.max_orthonormality_defect.max(orthonormality_defect(&self.q));
        self.x = &xt + &e;
        self.e = e;
        self.xt = xt;
        self.index += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    pub x: DVector<f64>,
    pub xt: DVector<f64>,
    pub e_norm: f64,
}

#[derive(Debug, Clone)]
pub struct ObserverOutput {
    pub samples: Vec<TrajectorySample>,
    /// `‖e(t)‖` on every grid point.
    pub e_norm: Vec<f64>,
    pub final_state: ObserverState,
    pub x_final: DVector<f64>,
    pub max_orthonormality_defect: f64,
}

impl ObserverOutput {
    /// `sup ‖e(t)‖` over grid points with `t ∈ [t_a, t_b]`.
    pub fn sup_error(&self, t_a: f64, t_b: f64, step: &StepConfig) -> f64 {
        self.e_norm
            .iter()
            .enumerate()
            .filter(|(k, _)| {
                let t = step.time(*k);
                t >= t_a - 1e-12 && t <= t_b + 1e-12
            })
            .map(|(_, e)| *e)
            .fold(0.0, f64::max)
    }
}

/// Observer-only simulation of the plant.
pub fn run_observer(
    plant: &Plant,
    conf: &ObserverConfig,
    x0: DVector<f64>,
    xt0: DVector<f64>,
    record_stride: usize,
) -> Result<ObserverOutput> {
    let stride = record_stride.max(1);
    let mut sim = Simulator::new(plant, conf, x0, xt0)?;
    let mut samples = Vec::new();
    let mut e_norm = Vec::with_capacity(conf.step.steps() + 1);
    loop {
        let en = sim.error().norm();
        e_norm.push(en);
        if sim.index() % stride == 0 || sim.done() {
            samples.push(TrajectorySample { t: sim.t(), x: sim.x.clone(), xt: sim.xt.clone(), e_norm: en });
        }
        if sim.done() {
            break;
        }
        sim.step(None)?;
    }
    Ok(ObserverOutput {
        samples,
        e_norm,
        final_state: ObserverState { xt: sim.xt.clone(), q: sim.q.clone(), t: sim.t() },
        x_final: sim.x.clone(),
        max_orthonormality_defect: sim.max_orthonormality_defect,
    })
}
