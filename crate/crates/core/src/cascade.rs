//! Cascaded observer: tangent-space observer, differentiator bank on the
//! output error, and reconstruction of the estimation error from the
//! stacked derivatives, `x̂ = x̃ + ẽ`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::DesignStep;
use crate::hosm::{DifferentiatorBank, DifferentiatorConfig, Discretization, SettleOptions, DEFAULT_GAINS, MAX_ORDER};
use crate::observer::{detectability_report, DetectabilityReport, ObserverConfig, Plant, Simulator};
use crate::strong_obs::{build_stack, probe_grid, strong_observability_test, ErrorStackTracker, ObservabilityStack, ReconstructionAt, SoVerdict};
use crate::system::Signal;
use crate::{Error, Result};

/// Differentiator settings; the order defaults to `ν − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferentiatorSpec {
    pub order: Option<usize>,
    pub lipschitz: f64,
    pub gains: Option<Vec<f64>>,
    pub discretization: Discretization,
}

impl Default for DifferentiatorSpec {
    fn default() -> Self {
        DifferentiatorSpec { order: None, lipschitz: 1.0, gains: None, discretization: Discretization::Euler }
    }
}

impl DifferentiatorSpec {
    pub fn resolve(&self, nu: usize) -> Result<DifferentiatorConfig> {
        let order = self.order.unwrap_or(nu.saturating_sub(1)).max(1);
        if order + 1 < nu {
            return Err(Error::precondition(
                DesignStep::Differentiation,
                format!("differentiator order {order} cannot supply {} derivatives", nu - 1),
            ));
        }
        if order > MAX_ORDER {
            return Err(Error::precondition(DesignStep::Differentiation, format!("no gains for order {order}")));
        }
        let conf = DifferentiatorConfig {
            order,
            lipschitz: self.lipschitz,
            gains: self.gains.clone().unwrap_or_else(|| DEFAULT_GAINS[..=order].to_vec()),
            discretization: self.discretization,
        };
        conf.validate()?;
        Ok(conf)
    }
}

/// Source of the stacked output-error derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DerivativeSource {
    #[default]
    Differentiator,
    /// Exact derivatives from the simulated error, bypassing the bank.
    Oracle,
}

/// Which signal fills the zeroth block of the stacked derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZerothBlock {
    /// Raw `e_y` without noise, `z₀` with noise.
    #[default]
    Auto,
    Raw,
    Filtered,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { sigma: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct CascadeConfig {
    pub observer: ObserverConfig,
    pub x0: DVector<f64>,
    pub xt0: DVector<f64>,
    pub differentiator: DifferentiatorSpec,
    pub settle: SettleOptions,
    pub noise: NoiseConfig,
    pub derivatives: DerivativeSource,
    pub zeroth_block: ZerothBlock,
    /// Search limit for the observability index.
    pub nu_max: usize,
    pub probes: usize,
    /// Permit finite-difference gain derivatives for `ν > 2`.
    pub allow_finite_differences: bool,
    pub record_stride: usize,
}

impl CascadeConfig {
    pub fn new(observer: ObserverConfig, x0: DVector<f64>, xt0: DVector<f64>) -> Self {
        let n = x0.len();
        CascadeConfig {
            observer,
            x0,
            xt0,
            differentiator: DifferentiatorSpec::default(),
            settle: SettleOptions::default(),
            noise: NoiseConfig::default(),
            derivatives: DerivativeSource::Differentiator,
            zeroth_block: ZerothBlock::Auto,
            nu_max: 2 * n,
            probes: 101,
            allow_finite_differences: false,
            record_stride: 10,
        }
    }
}

/// Results of the design checks preceding a cascade run.
#[derive(Debug, Clone)]
pub struct DesignArtifacts {
    pub detectability: DetectabilityReport,
    pub stack: ObservabilityStack,
    pub strong_observability: SoVerdict,
}

/// Checks detectability, the gain choice and strong observability.
pub fn design_checks(plant: &Plant, conf: &CascadeConfig) -> Result<DesignArtifacts> {
    let sys = &plant.sys;
    let detectability = detectability_report(sys, &conf.observer)?;
    if !detectability.passed() {
        let bad: Vec<String> = detectability
            .directions
            .iter()
            .enumerate()
            .filter(|(_, d)| d.fails())
            .map(|(j, _)| (j + 1).to_string())
            .collect();
        return Err(Error::precondition(
            DesignStep::Detectability,
            format!("non-stable direction(s) {} not detectable", bad.join(", ")),
        ));
    }
    if let Some((j, d)) = detectability.directions.iter().enumerate().find(|(_, d)| d.nonstable && d.mu >= 0.0) {
        return Err(Error::precondition(
            DesignStep::GainChoice,
            format!("p = {} leaves direction {} with predicted error exponent {:.4}", conf.observer.p, j + 1, d.mu),
        ));
    }
    let step = conf.observer.step;
    let probes = probe_grid(step.t0, step.t0 + step.horizon(), conf.probes);
    let stack = build_stack(sys, conf.nu_max, &probes).map_err(|e| match e {
        Error::NoRankPlateau { .. } | Error::RankVaries { .. } => Error::precondition(DesignStep::Reconstruction, e.to_string()),
        other => other,
    })?;
    let strong_observability = strong_observability_test(&stack, &probes)?;
    if !strong_observability.strongly_observable {
        return Err(Error::precondition(DesignStep::Reconstruction, "system is not strongly observable"));
    }
    Ok(DesignArtifacts { detectability, stack, strong_observability })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeSample {
    pub t: f64,
    pub x: DVector<f64>,
    pub xt: DVector<f64>,
    pub xhat: DVector<f64>,
    pub e_norm_tso: f64,
    pub e_norm_cascade: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CascadeSummary {
    pub nu: usize,
    pub differentiator_order: usize,
    pub lipschitz: f64,
    pub sigma: f64,
    pub seed: u64,
    pub oracle_derivatives: bool,
    pub settled_at: Option<f64>,
    pub t_f: Option<f64>,
    /// `sup |x_i − x̂_i|` for `t ≥ t_f`, per state.
    pub sup_error_after_settling: Option<Vec<f64>>,
    pub sup_error_tso: f64,
    pub sup_error_cascade_after_settling: Option<f64>,
    pub max_condition_h: f64,
    pub finite_difference_gain_derivatives: bool,
}

#[derive(Debug, Clone)]
pub struct CascadeOutput {
    pub samples: Vec<CascadeSample>,
    /// Grid times.
    pub times: Vec<f64>,
    /// `|x − x̂|` per state on every grid point.
    pub abs_error: Vec<DVector<f64>>,
    pub e_norm_tso: Vec<f64>,
    pub e_norm_cascade: Vec<f64>,
    /// `x̂ − x̃` on every grid point.
    pub correction: Vec<DVector<f64>>,
    pub summary: CascadeSummary,
}

impl CascadeOutput {
    /// Per-state `sup |x_i − x̂_i|` for `t ≥ t_from`.
    pub fn sup_abs_error_from(&self, t_from: f64) -> DVector<f64> {
        let n = self.abs_error.first().map_or(0, |v| v.len());
        let mut sup = DVector::zeros(n);
        for (t, e) in self.times.iter().zip(&self.abs_error) {
            if *t >= t_from - 1e-12 {
                sup = sup.sup(e);
            }
        }
        sup
    }

    pub fn sup_cascade_error_from(&self, t_from: f64) -> f64 {
        self.times
            .iter()
            .zip(&self.e_norm_cascade)
            .filter(|(t, _)| **t >= t_from - 1e-12)
            .map(|(_, e)| *e)
            .fold(0.0, f64::max)
    }
}

/// Runs the design checks and then the cascade.
pub fn run_cascade(plant: &Plant, conf: &CascadeConfig) -> Result<CascadeOutput> {
    let artifacts = design_checks(plant, conf)?;
    run_cascade_with(plant, conf, artifacts.stack.nu)
}

/// Same as [`run_cascade`] with measurement noise of standard deviation `sigma`.
pub fn run_with_noise(plant: &Plant, conf: &CascadeConfig, sigma: f64, seed: u64) -> Result<CascadeOutput> {
    let mut conf = conf.clone();
    conf.noise = NoiseConfig { sigma, seed };
    run_cascade(plant, &conf)
}

/// Exact `[e_y; ė_y; …]` from the true error:
/// `e_y^{(i)} = C_{i,e} e + Σ_{j<i} 𝒟_{i,j} w^{(j)}`.
fn oracle_stack(c: &[DMatrix<f64>], d: &[Vec<DMatrix<f64>>], e: &DVector<f64>, w_derivs: &[DVector<f64>]) -> DVector<f64> {
    let r = c[0].nrows();
    let nu = c.len();
    let mut out = DVector::zeros(r * nu);
    for (i, ci) in c.iter().enumerate() {
        let mut yi = ci * e;
        if let Some(row) = d.get(i) {
            for (j, dij) in row.iter().enumerate() {
                yi += dij * &w_derivs[j];
            }
        }
        out.rows_mut(i * r, r).copy_from(&yi);
    }
    out
}

/// Cascade run for a known observability index, without design checks.
pub fn run_cascade_with(plant: &Plant, conf: &CascadeConfig, nu: usize) -> Result<CascadeOutput> {
    let sys = &plant.sys;
    let n = sys.n();
    let r = sys.r();
    let step = conf.observer.step;
    let h = step.h;
    let dconf = conf.differentiator.resolve(nu)?;
    let sigma = conf.noise.sigma;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise level must be non-negative, got {sigma}")));
    }
    let settle = if sigma > 0.0 { conf.settle.for_noise(sigma) } else { conf.settle };
    let raw_zeroth = match conf.zeroth_block {
        ZerothBlock::Auto => sigma == 0.0,
        ZerothBlock::Raw => true,
        ZerothBlock::Filtered => false,
    };
    let oracle = conf.derivatives == DerivativeSource::Oracle;

    let mut sim = Simulator::new(plant, &conf.observer, conf.x0.clone(), conf.xt0.clone())?;
    let mut tracker = ErrorStackTracker::new(sys, nu, h, conf.allow_finite_differences)
        .map_err(|e| match e {
            Error::Precondition { reason, .. } => Error::precondition(DesignStep::Reconstruction, reason),
            other => other,
        })?;
    let mut bank = DifferentiatorBank::new(r, dconf.clone(), settle)?;
    let mut rng = ChaCha8Rng::seed_from_u64(conf.noise.seed);
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    // derivatives of w for the oracle stack
    let mut w_derivs: Vec<Signal> = vec![plant.w.clone()];
    for _ in 1..nu.saturating_sub(1) {
        let next = w_derivs.last().unwrap().derivative();
        w_derivs.push(next);
    }

    let steps = step.steps();
    let stride = conf.record_stride.max(1);
    let mut samples = Vec::new();
    let mut times = Vec::with_capacity(steps + 1);
    let mut abs_error = Vec::with_capacity(steps + 1);
    let mut e_tso = Vec::with_capacity(steps + 1);
    let mut e_cas = Vec::with_capacity(steps + 1);
    let mut correction = Vec::with_capacity(steps + 1);
    let mut max_condition: f64 = 0.0;

    loop {
        let t = sim.t();
        let (c, l, _) = sim.gain_now()?;
        let a = sys.a.eval(t)?;
        let a_cl = &a - &l * &c;
        let d = sys.d.eval(t)?;
        let e = sim.error();
        let noise = if sigma > 0.0 { Some(DVector::from_fn(r, |_, _| normal.sample(&mut rng))) } else { None };
        let mut e_y = &c * &e;
        if let Some(nk) = &noise {
            e_y += nk;
        }

        let e_tilde = match tracker.update(t, &a_cl, &d) {
            Ok(at) => {
                let rec = ReconstructionAt::new(&at.stack, t)?;
                max_condition = max_condition.max(rec.condition);
                let y_hat = if oracle {
                    let wd = w_derivs.iter().map(|s| s.at(t)).collect::<Result<Vec<_>>>()?;
                    oracle_stack(&at.c, &at.d, &e, &wd)
                } else {
                    let mut stack = bank.stacked(nu);
                    if raw_zeroth {
                        stack.rows_mut(0, r).copy_from(&e_y);
                    }
                    stack
                };
                rec.reconstruct(&y_hat).map_err(|err| match err {
                    Error::SingularReconstruction { condition, .. } => Error::SingularReconstruction { t, condition },
                    other => other,
                })?
            }
            Err(Error::InsufficientHistory(_)) => DVector::zeros(n),
            Err(other) => return Err(other),
        };
        let xhat = &sim.xt + &e_tilde;
        let err = &e - &e_tilde;
        let en_cas = err.norm();
        let en_tso = e.norm();
        times.push(t);
        abs_error.push(err.abs());
        e_tso.push(en_tso);
        e_cas.push(en_cas);
        correction.push(e_tilde);
        if sim.index() % stride == 0 || sim.done() {
            samples.push(CascadeSample { t, x: sim.x.clone(), xt: sim.xt.clone(), xhat, e_norm_tso: en_tso, e_norm_cascade: en_cas });
        }
        if sim.done() {
            break;
        }
        if !oracle {
            bank.step(t, &e_y, h)?;
        }
        sim.step(noise.as_ref())?;
    }

    let t_f = if oracle { Some(step.t0) } else { bank.t_f() };
    let settled_at = if oracle { Some(step.t0) } else { bank.settled_at() };
    let mut out = CascadeOutput {
        samples,
        times,
        abs_error,
        e_norm_tso: e_tso,
        e_norm_cascade: e_cas,
        correction,
        summary: CascadeSummary {
            nu,
            differentiator_order: dconf.order,
            lipschitz: dconf.lipschitz,
            sigma,
            seed: conf.noise.seed,
            oracle_derivatives: oracle,
            settled_at,
            t_f,
            sup_error_after_settling: None,
            sup_error_tso: 0.0,
            sup_error_cascade_after_settling: None,
            max_condition_h: max_condition,
            finite_difference_gain_derivatives: tracker.uses_finite_differences(),
        },
    };
    out.summary.sup_error_tso = out.e_norm_tso.iter().cloned().fold(0.0, f64::max);
    if let Some(tf) = t_f {
        out.summary.sup_error_after_settling = Some(out.sup_abs_error_from(tf).iter().cloned().collect());
        out.summary.sup_error_cascade_after_settling = Some(out.sup_cascade_error_from(tf));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{Expr, MatrixExpr};
    use crate::integrators::StepConfig;
    use crate::system::LtvSystem;

    fn grid(rows: &[&[&str]]) -> MatrixExpr {
        let owned: Vec<Vec<&str>> = rows.iter().map(|r| r.to_vec()).collect();
        MatrixExpr::parse_grid(&owned).unwrap()
    }

    fn unstable_plant(w: &str) -> Plant {
        // x₁ measured, x₂ driven by w; unstable x₁
        let sys = LtvSystem::without_known_input(
            grid(&[&["0.5", "1"], &["0", "-1"]]),
            grid(&[&["0"], &["1"]]),
            grid(&[&["1", "0"]]),
            1.0,
        )
        .unwrap();
        Plant::new(sys, Signal::zeros(0), Signal(vec![Expr::parse(w).unwrap()]), None).unwrap()
    }

    fn config(plant: &Plant, x0: &[f64], xt0: &[f64]) -> CascadeConfig {
        let obs = ObserverConfig::new(plant.sys.n(), 5.0, 1, StepConfig::new(1e-3, 0.0, 8.0).unwrap()).unwrap();
        let mut c = CascadeConfig::new(obs, DVector::from_row_slice(x0), DVector::from_row_slice(xt0));
        c.differentiator.lipschitz = 10.0;
        c.probes = 11;
        c
    }

    #[test]
    fn exact_start_stays_exact() {
        let plant = unstable_plant("0");
        let conf = config(&plant, &[1.0, -1.0], &[1.0, -1.0]);
        let out = run_cascade(&plant, &conf).unwrap();
        for (corr, e) in out.correction.iter().zip(&out.e_norm_cascade) {
            assert_eq!(corr.norm(), 0.0);
            assert_eq!(*e, 0.0);
        }
    }

    #[test]
    fn oracle_reconstruction_is_exact() {
        let plant = unstable_plant("sin(t)");
        let mut conf = config(&plant, &[1.0, -1.0], &[0.0, 0.0]);
        conf.derivatives = DerivativeSource::Oracle;
        let out = run_cascade(&plant, &conf).unwrap();
        assert!(out.sup_cascade_error_from(0.0) < 1e-9);
    }

    #[test]
    fn differentiator_recovers_unmeasured_state() {
        let plant = unstable_plant("sin(t)");
        let conf = config(&plant, &[1.0, -1.0], &[0.0, 0.0]);
        let out = run_cascade(&plant, &conf).unwrap();
        let tf = out.summary.t_f.expect("bank settles");
        let sup = out.sup_abs_error_from(tf);
        assert!(sup[0] < 1e-9);
        assert!(sup[1] < 5e-2, "{sup}");
        // unmeasured-state error of the observer alone stays large
        assert!(out.e_norm_tso.last().unwrap() > &1e-2);
    }

    #[test]
    fn undetectable_plant_fails_at_detectability() {
        let sys = LtvSystem::without_known_input(
            grid(&[&["0", "1"], &["0", "0"]]),
            grid(&[&["0"], &["1"]]),
            grid(&[&["1", "0"]]),
            1.0,
        )
        .unwrap();
        let plant = Plant::new(sys, Signal::zeros(0), Signal::zeros(1), None).unwrap();
        let obs = ObserverConfig::new(2, 5.0, 2, StepConfig::new(1e-2, 0.0, 5.0).unwrap()).unwrap();
        let conf = CascadeConfig::new(obs, DVector::zeros(2), DVector::zeros(2));
        let err = run_cascade(&plant, &conf).unwrap_err();
        assert!(matches!(err, Error::Precondition { step: DesignStep::Detectability, .. }), "{err}");
    }

    #[test]
    fn zero_noise_matches_noise_free() {
        let plant = unstable_plant("sin(t)");
        let mut conf = config(&plant, &[1.0, -1.0], &[0.0, 0.0]);
        conf.observer.step = StepConfig::new(1e-3, 0.0, 1.0).unwrap();
        let a = run_cascade(&plant, &conf).unwrap();
        let b = run_with_noise(&plant, &conf, 0.0, 42).unwrap();
        assert_eq!(a.e_norm_cascade, b.e_norm_cascade);
    }
}
