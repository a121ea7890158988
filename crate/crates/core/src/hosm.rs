//! Levant's robust exact differentiator, discretised with a fixed step, and
//! a bank of them for vector signals.

use nalgebra::DVector;

use crate::{Error, Result};

/// Gains `λ₀ … λ₅` for differentiators up to order 5.
pub const DEFAULT_GAINS: [f64; 6] = [1.1, 1.5, 2.0, 3.0, 5.0, 8.0];
pub const MAX_ORDER: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Discretization {
    /// `z_j ← z_j + h·ż_j`.
    #[default]
    Euler,
    /// Euler plus the Taylor terms `Σ_{s≥2} h^s/s!·z_{j+s}` of the higher
    /// estimates, which suppresses the discretisation lag of the lower ones.
    Taylor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifferentiatorConfig {
    pub order: usize,
    /// Lipschitz constant of the `(order)`-th derivative.
    pub lipschitz: f64,
    /// `λ₀ … λ_order`.
    pub gains: Vec<f64>,
    pub discretization: Discretization,
}

impl DifferentiatorConfig {
    pub fn new(order: usize, lipschitz: f64) -> Result<Self> {
        if order == 0 || order > MAX_ORDER {
            return Err(Error::InvalidArgument(format!("differentiator order must lie in 1..={MAX_ORDER}, got {order}")));
        }
        let conf = DifferentiatorConfig {
            order,
            lipschitz,
            gains: DEFAULT_GAINS[..=order].to_vec(),
            discretization: Discretization::Euler,
        };
        conf.validate()?;
        Ok(conf)
    }

    pub fn with_discretization(mut self, d: Discretization) -> Self {
        self.discretization = d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.order == 0 || self.order > MAX_ORDER {
            return Err(Error::InvalidArgument(format!("differentiator order must lie in 1..={MAX_ORDER}, got {}", self.order)));
        }
        if !(self.lipschitz > 0.0 && self.lipschitz.is_finite()) {
            return Err(Error::InvalidArgument(format!("Lipschitz constant must be positive, got {}", self.lipschitz)));
        }
        if self.gains.len() != self.order + 1 || self.gains.iter().any(|g| !(*g > 0.0)) {
            return Err(Error::InvalidArgument(format!("need {} positive gains", self.order + 1)));
        }
        Ok(())
    }
}

/// `z₀ … z_r`: estimates of the signal and its first `r` derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferentiatorState {
    pub z: Vec<f64>,
}

impl DifferentiatorState {
    pub fn zeros(order: usize) -> Self {
        DifferentiatorState { z: vec![0.0; order + 1] }
    }
}

fn signed_power(s: f64, exponent: f64) -> f64 {
    s.abs().powf(exponent) * s.signum_or_zero()
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Right-hand side `ż₀ … ż_r` of the recursive differentiator for the sample `f`.
pub fn levant_rhs(z: &[f64], f: f64, conf: &DifferentiatorConfig) -> Vec<f64> {
    let r = conf.order;
    let l = conf.lipschitz;
    let mut dz = vec![0.0; r + 1];
    let mut target = f;
    for i in 0..r {
        let k = (r - i + 1) as f64;
        let s = z[i] - target;
        let v = -conf.gains[r - i] * l.powf(1.0 / k) * signed_power(s, (r - i) as f64 / k) + z[i + 1];
        dz[i] = v;
        target = v;
    }
    dz[r] = -conf.gains[0] * l * (z[r] - target).signum_or_zero();
    dz
}

/// One discrete step of the differentiator with sample `f`.
pub fn levant_step(st: &DifferentiatorState, f: f64, conf: &DifferentiatorConfig, h: f64) -> Result<DifferentiatorState> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let r = conf.order;
    let dz = levant_rhs(&st.z, f, conf);
    let mut z = st.z.clone();
    for j in 0..=r {
        z[j] += h * dz[j];
        if conf.discretization == Discretization::Taylor {
            let mut coef = h;
            for s in 2..=(r - j) {
                coef *= h / s as f64;
                z[j] += coef * st.z[j + s];
            }
        }
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "differentiator state", t: f64::NAN });
    }
    Ok(DifferentiatorState { z })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SettleOptions {
    /// Residual `|z₀ − f|` below which a channel counts as settled.
    pub threshold: f64,
    /// Time the residuals must stay below the threshold.
    pub dwell: f64,
}

impl Default for SettleOptions {
    fn default() -> Self {
        SettleOptions { threshold: 1e-3, dwell: 0.5 }
    }
}

impl SettleOptions {
    /// Threshold raised to five standard deviations of the measurement noise.
    pub fn for_noise(self, sigma: f64) -> Self {
        SettleOptions { threshold: self.threshold.max(5.0 * sigma), ..self }
    }
}

/// One differentiator per channel with a shared configuration.
#[derive(Debug, Clone)]
pub struct DifferentiatorBank {
    conf: DifferentiatorConfig,
    settle: SettleOptions,
    states: Vec<DifferentiatorState>,
    below_since: Option<f64>,
    settled_at: Option<f64>,
}

impl DifferentiatorBank {
    pub fn new(channels: usize, conf: DifferentiatorConfig, settle: SettleOptions) -> Result<Self> {
        conf.validate()?;
        Ok(DifferentiatorBank {
            states: vec![DifferentiatorState::zeros(conf.order); channels],
            conf,
            settle,
            below_since: None,
            settled_at: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.states.len()
    }

    pub fn config(&self) -> &DifferentiatorConfig {
        &self.conf
    }

    pub fn states(&self) -> &[DifferentiatorState] {
        &self.states
    }

    /// Stacked estimates `[z₀; z₁; …; z_{depth−1}]`, each block holding
    /// all channels.
    pub fn stacked(&self, depth: usize) -> DVector<f64> {
        let ch = self.channels();
        DVector::from_fn(ch * depth, |idx, _| self.states[idx % ch].z[idx / ch])
    }

    /// Advance every channel with the samples `f` taken at time `t`.
    pub fn step(&mut self, t: f64, f: &DVector<f64>, h: f64) -> Result<()> {
        if f.len() != self.channels() {
            return Err(Error::DimensionMismatch { name: "bank input".into(), expected: self.channels().to_string(), found: f.len().to_string() });
        }
        let below = self.states.iter().zip(f.iter()).all(|(s, fi)| (s.z[0] - fi).abs() < self.settle.threshold);
        if self.settled_at.is_none() {
            if below {
                let since = *self.below_since.get_or_insert(t);
                if t - since >= self.settle.dwell - 1e-12 {
                    self.settled_at = Some(since);
                }
            } else {
                self.below_since = None;
            }
        }
        for (s, fi) in self.states.iter_mut().zip(f.iter()) {
            *s = levant_step(s, *fi, &self.conf, h).map_err(|e| match e {
                Error::NonFinite { what, .. } => Error::NonFinite { what, t },
                other => other,
            })?;
        }
        Ok(())
    }

    /// Start of the first window in which all residuals stayed below the
    /// threshold for the dwell time.
    pub fn settled_at(&self) -> Option<f64> {
        self.settled_at
    }

    /// Operational settling time: the settled flag plus one dwell window.
    pub fn t_f(&self) -> Option<f64> {
        self.settled_at.map(|t| t + self.settle.dwell)
    }
}

#[derive(Debug, Clone)]
pub struct BankOutput {
    /// Stacked estimate at each sample time, taken before consuming the sample.
    pub stacks: Vec<DVector<f64>>,
    pub settled_at: Option<f64>,
    pub t_f: Option<f64>,
}

/// Runs a bank of order `ν − 1` (or the configured order) over a sampled
/// series and returns the stacked `[e_y; ė_y; …; e_y^{(ν−1)}]` estimates.
pub fn run_bank(
    times: &[f64],
    samples: &[DVector<f64>],
    nu: usize,
    conf: DifferentiatorConfig,
    settle: SettleOptions,
) -> Result<BankOutput> {
    if times.len() != samples.len() {
        return Err(Error::DimensionMismatch { name: "series".into(), expected: times.len().to_string(), found: samples.len().to_string() });
    }
    if conf.order + 1 < nu {
        return Err(Error::InvalidArgument(format!("order {} is too low for {} stacked blocks", conf.order, nu)));
    }
    let channels = samples.first().map_or(0, |s| s.len());
    let mut bank = DifferentiatorBank::new(channels, conf, settle)?;
    let mut stacks = Vec::with_capacity(samples.len());
    for k in 0..samples.len() {
        stacks.push(bank.stacked(nu));
        let h = if k + 1 < times.len() { times[k + 1] - times[k] } else { times[k] - times[k.saturating_sub(1)] };
        if h > 0.0 {
            bank.step(times[k], &samples[k], h)?;
        }
    }
    Ok(BankOutput { stacks, settled_at: bank.settled_at(), t_f: bank.t_f() })
}

/// `2·max |Δ^{order+1} f| / h^{order+1}` over a sampled window; a crude
/// estimate of the Lipschitz constant of the `order`-th derivative.
pub fn estimate_lipschitz(samples: &[f64], h: f64, order: usize) -> Option<f64> {
    let mut diff = samples.to_vec();
    for _ in 0..=order {
        if diff.len() < 2 {
            return None;
        }
        diff = diff.windows(2).map(|w| w[1] - w[0]).collect();
    }
    let max = diff.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Some(2.0 * max / h.powi(order as i32 + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_scalar(conf: &DifferentiatorConfig, h: f64, t_end: f64, f: impl Fn(f64) -> f64) -> Vec<(f64, Vec<f64>)> {
        let mut st = DifferentiatorState::zeros(conf.order);
        let steps = (t_end / h).round() as usize;
        let mut out = Vec::with_capacity(steps);
        for k in 0..steps {
            let t = k as f64 * h;
            out.push((t, st.z.clone()));
            st = levant_step(&st, f(t), conf, h).unwrap();
        }
        out
    }

    #[test]
    fn equilibrium_on_constant() {
        for order in 1..=5 {
            let conf = DifferentiatorConfig::new(order, 3.0).unwrap();
            let mut st = DifferentiatorState::zeros(order);
            st.z[0] = 2.5;
            let next = levant_step(&st, 2.5, &conf, 1e-3).unwrap();
            assert_eq!(next, st);
        }
    }

    #[test]
    fn ramp_first_order() {
        // ż₁ is bounded by λ₀L = 1.1, so z₁ cannot reach 1 before t ≈ 0.91
        let conf = DifferentiatorConfig::new(1, 1.0).unwrap();
        for (t, z) in run_scalar(&conf, 1e-3, 2.0, |t| t) {
            if t < 0.9 {
                assert!(z[1] < 1.0 - 5e-3);
            }
            if t >= 1.2 {
                assert!((z[1] - 1.0).abs() <= 5e-2, "t={t} z1={}", z[1]);
            }
        }
    }

    #[test]
    fn sine_first_order() {
        let conf = DifferentiatorConfig::new(1, 1.1).unwrap();
        for (t, z) in run_scalar(&conf, 1e-3, 6.0, f64::sin) {
            if t >= 2.0 {
                assert!((z[1] - t.cos()).abs() <= 0.05, "t={t}");
            }
        }
    }

    #[test]
    fn homogeneity() {
        let base = DifferentiatorConfig::new(2, 1.5).unwrap();
        let c = 3.0;
        let scaled = DifferentiatorConfig { lipschitz: c * base.lipschitz, ..base.clone() };
        let a = run_scalar(&base, 1e-3, 1.0, |t| (2.0 * t).sin());
        let b = run_scalar(&scaled, 1e-3, 1.0, |t| c * (2.0 * t).sin());
        for ((_, za), (_, zb)) in a.iter().zip(&b) {
            for (x, y) in za.iter().zip(zb) {
                assert!((c * x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} {y}");
            }
        }
    }

    #[test]
    fn bank_on_zero_signal() {
        let times: Vec<f64> = (0..1000).map(|k| k as f64 * 1e-3).collect();
        let samples = vec![DVector::zeros(3); times.len()];
        let out = run_bank(&times, &samples, 2, DifferentiatorConfig::new(1, 1.0).unwrap(), SettleOptions::default()).unwrap();
        assert!(out.stacks.iter().all(|s| s.iter().all(|v| *v == 0.0)));
        assert_eq!(out.settled_at, Some(0.0));
    }

    #[test]
    fn bank_on_parabola() {
        let h = 1e-3;
        let times: Vec<f64> = (0..2000).map(|k| k as f64 * h).collect();
        let samples: Vec<DVector<f64>> = times.iter().map(|t| DVector::from_element(1, t * t)).collect();
        let out = run_bank(&times, &samples, 2, DifferentiatorConfig::new(1, 2.2).unwrap(), SettleOptions::default()).unwrap();
        for (t, s) in times.iter().zip(&out.stacks) {
            if *t >= 1.0 {
                assert!((s[1] - 2.0 * t).abs() <= 0.1, "t={t}");
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(DifferentiatorConfig::new(0, 1.0).is_err());
        assert!(DifferentiatorConfig::new(6, 1.0).is_err());
        assert!(DifferentiatorConfig::new(2, 0.0).is_err());
        assert_eq!(DifferentiatorConfig::new(5, 1.0).unwrap().gains, DEFAULT_GAINS.to_vec());
    }

    #[test]
    fn lipschitz_estimate_of_parabola() {
        let h = 1e-2;
        let s: Vec<f64> = (0..100).map(|k| (k as f64 * h).powi(2)).collect();
        let l = estimate_lipschitz(&s, h, 1).unwrap();
        assert!((l - 4.0).abs() < 1e-6);
    }
}
