//! Generalized observability matrices, the constant-rank and strong
//! observability tests, and state reconstruction from output derivatives.

use nalgebra::{DMatrix, DVector};

use crate::error::DesignStep;
use crate::expr::MatrixExpr;
use crate::integrators::{frame_rhs, project_frame, rk4_step, StepConfig};
use crate::linalg::{
    hstack, numerical_rank, orthogonal_projector_complement, solve_spd, symmetric_eigenvalues, vstack, RankTolerance,
};
use crate::lyapunov::{skew_rule, MatrixCache};
use crate::observer::{compute_gain, ObserverConfig};
use crate::system::LtvSystem;
use crate::{Error, Result};

/// Condition number above which `H` counts as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Budget on the total expression size when building controllability
/// matrices; the index is left undetermined beyond it.
const CONTROLLABILITY_BUDGET: usize = 200_000;

/// `count` equispaced probe times on `[t0, t1]`.
pub fn probe_grid(t0: f64, t1: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![t0],
        _ => (0..count).map(|i| t0 + (t1 - t0) * i as f64 / (count - 1) as f64).collect(),
    }
}

/// Symbolic observability data of `(A, D, C)`.
#[derive(Debug, Clone)]
pub struct ObservabilityStack {
    pub nu: usize,
    /// `C_0 … C_ν`.
    pub c: Vec<MatrixExpr>,
    /// `d[α][β] = 𝒟_{α,β}` for `1 ≤ α ≤ ν−1`, `β < α`; `d[0]` is empty.
    pub d: Vec<Vec<MatrixExpr>>,
    /// Rank of `R_ν` on the probe grid.
    pub q0: usize,
    /// Controllability index, when found within the search budget.
    pub mu: Option<usize>,
    pub n: usize,
    pub r: usize,
    pub m: usize,
}

/// `𝒟` table up to row `depth − 1`:
/// `𝒟_{1,0} = C₀D`, `𝒟_{α+1,0} = C_αD + 𝒟̇_{α,0}`,
/// `𝒟_{α+1,β} = 𝒟_{α,β−1} + 𝒟̇_{α,β}`, `𝒟_{α+1,α} = C₀D`.
fn d_table(c: &[MatrixExpr], d: &MatrixExpr, depth: usize) -> Vec<Vec<MatrixExpr>> {
    let mut table: Vec<Vec<MatrixExpr>> = vec![Vec::new()];
    if depth < 2 {
        return table;
    }
    let c0d = c[0].mul(d);
    table.push(vec![c0d.clone()]);
    for alpha in 1..depth - 1 {
        let prev = &table[alpha];
        let mut row = Vec::with_capacity(alpha + 1);
        row.push(c[alpha].mul(d).add(&prev[0].derivative()));
        for beta in 1..alpha {
            row.push(prev[beta - 1].add(&prev[beta].derivative()));
        }
        row.push(c0d.clone());
        table.push(row);
    }
    table
}

fn ranks_at(blocks: &[MatrixExpr], probes: &[f64]) -> Result<Vec<usize>> {
    probes
        .iter()
        .map(|&t| {
            let evaluated = blocks.iter().map(|b| b.eval(t)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&DMatrix<f64>> = evaluated.iter().collect();
            numerical_rank(&vstack(&refs), RankTolerance::Default)
        })
        .collect()
}

/// Builds `C_i` lazily and determines `ν` as the smallest `k` with
/// `rank R_k = rank R_{k+1} = q₀` at every probe time.
pub fn build_stack(sys: &LtvSystem, nu_max: usize, probes: &[f64]) -> Result<ObservabilityStack> {
    if probes.is_empty() {
        return Err(Error::InvalidArgument("need at least one probe time".into()));
    }
    let mut c = vec![sys.c.clone()];
    let next_c = |ci: &MatrixExpr| ci.mul(&sys.a).add(&ci.derivative());
    let mut nu = None;
    let mut ranks_k = ranks_at(&c, probes)?;
    for k in 1..=nu_max.max(1) {
        let ck = next_c(&c[k - 1]);
        c.push(ck);
        let ranks_next = ranks_at(&c, probes)?;
        if ranks_next == ranks_k {
            let min = *ranks_k.iter().min().unwrap();
            let max = *ranks_k.iter().max().unwrap();
            if min != max {
                return Err(Error::RankVaries { depth: k, min, max });
            }
            nu = Some((k, min));
            break;
        }
        ranks_k = ranks_next;
    }
    let (nu, q0) = nu.ok_or(Error::NoRankPlateau { nu_max })?;
    let d = d_table(&c, &sys.d, nu);
    let mu = controllability_index(sys, nu_max, probes)?;
    Ok(ObservabilityStack { nu, c, d, q0, mu, n: sys.n(), r: sys.r(), m: sys.m() })
}

/// `P_{i+1} = AP_i + Ṗ_i`, `P_0 = D`; smallest `μ` with
/// `rank Q_μ = rank Q_{μ+1}` at every probe.
fn controllability_index(sys: &LtvSystem, depth_max: usize, probes: &[f64]) -> Result<Option<usize>> {
    if sys.m() == 0 {
        return Ok(None);
    }
    let rank_q = |p: &[MatrixExpr]| -> Result<Vec<usize>> {
        probes
            .iter()
            .map(|&t| {
                let evaluated = p.iter().map(|b| b.eval(t)).collect::<Result<Vec<_>>>()?;
                let refs: Vec<&DMatrix<f64>> = evaluated.iter().collect();
                numerical_rank(&hstack(&refs), RankTolerance::Default)
            })
            .collect()
    };
    let mut p = vec![sys.d.clone()];
    let mut ranks = rank_q(&p)?;
    for k in 1..=depth_max {
        let last = &p[k - 1];
        let next = sys.a.mul(last).add(&last.derivative());
        let size: usize = (0..next.rows()).flat_map(|i| (0..next.cols()).map(move |j| (i, j))).map(|(i, j)| next.get(i, j).size()).sum();
        if size > CONTROLLABILITY_BUDGET {
            return Ok(None);
        }
        p.push(next);
        let ranks_next = rank_q(&p)?;
        if ranks_next == ranks && ranks.iter().min() == ranks.iter().max() {
            return Ok(Some(k));
        }
        ranks = ranks_next;
    }
    Ok(None)
}

/// Numerical `R_ν`, `J_ν` at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct StackAt {
    pub r: DMatrix<f64>,
    pub j: DMatrix<f64>,
}

/// Assembles `J_ν` from evaluated `𝒟_{α,β}` blocks, `blocks[α][β]`.
pub fn assemble_j(rows: usize, m: usize, nu: usize, blocks: &[Vec<DMatrix<f64>>]) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(rows * nu, m * nu.saturating_sub(1));
    for (alpha, row) in blocks.iter().enumerate() {
        for (beta, b) in row.iter().enumerate() {
            j.view_mut((alpha * rows, beta * m), (rows, m)).copy_from(b);
        }
    }
    j
}

impl ObservabilityStack {
    pub fn at(&self, t: f64) -> Result<StackAt> {
        let cs = self.c[..self.nu].iter().map(|c| c.eval(t)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&DMatrix<f64>> = cs.iter().collect();
        let blocks = self
            .d
            .iter()
            .map(|row| row.iter().map(|d| d.eval(t)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(StackAt { r: vstack(&refs), j: assemble_j(self.r, self.m, self.nu, &blocks) })
    }
}

/// Strong observability and reconstruction margins at one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub t: f64,
    pub rank_s: usize,
    pub rank_s_star: usize,
    pub min_eig_h: f64,
    pub strongly_observable: bool,
}

/// Evaluates the rank condition `rank S = rank S*` and `λ_min(H)`.
pub fn probe(t: f64, st: &StackAt) -> Result<ProbeResult> {
    let n = st.r.ncols();
    let s = hstack(&[&st.r, &st.j]);
    let top = hstack(&[&DMatrix::identity(n, n), &DMatrix::zeros(n, st.j.ncols())]);
    let s_star = vstack(&[&top, &s]);
    let rank_s = numerical_rank(&s, RankTolerance::Default)?;
    let rank_s_star = numerical_rank(&s_star, RankTolerance::Default)?;
    let k = orthogonal_projector_complement(&st.j)?;
    let h = st.r.transpose() * &k * &st.r;
    let min_eig_h = symmetric_eigenvalues(&h).first().copied().unwrap_or(0.0);
    Ok(ProbeResult { t, rank_s, rank_s_star, min_eig_h, strongly_observable: rank_s == rank_s_star })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoVerdict {
    pub probes: Vec<ProbeResult>,
    pub strongly_observable: bool,
}

impl SoVerdict {
    fn from_probes(probes: Vec<ProbeResult>) -> Self {
        let strongly_observable = probes.iter().all(|p| p.strongly_observable);
        SoVerdict { probes, strongly_observable }
    }

    pub fn min_eig_h(&self) -> f64 {
        self.probes.iter().map(|p| p.min_eig_h).fold(f64::INFINITY, f64::min)
    }
}

pub fn strong_observability_test(stack: &ObservabilityStack, probes: &[f64]) -> Result<SoVerdict> {
    let results = probes.iter().map(|&t| probe(t, &stack.at(t)?)).collect::<Result<Vec<_>>>()?;
    Ok(SoVerdict::from_probes(results))
}

/// `K`, `H` and `R_ν` at one instant.
#[derive(Debug, Clone)]
pub struct ReconstructionAt {
    pub r: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub min_eig: f64,
    pub condition: f64,
}

impl ReconstructionAt {
    pub fn new(st: &StackAt, t: f64) -> Result<Self> {
        let k = orthogonal_projector_complement(&st.j)?;
        let h = st.r.transpose() * &k * &st.r;
        let h = (&h + h.transpose()) * 0.5;
        let ev = symmetric_eigenvalues(&h);
        let min_eig = ev.first().copied().unwrap_or(0.0);
        let max_eig = ev.last().copied().unwrap_or(0.0);
        let condition = if min_eig > 0.0 { max_eig / min_eig } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::SingularReconstruction { t, condition });
        }
        Ok(ReconstructionAt { r: st.r.clone(), k, h, min_eig, condition })
    }

    /// `H⁻¹RᵀKᵀKŷ`.
    pub fn reconstruct(&self, y_hat: &DVector<f64>) -> Result<DVector<f64>> {
        if y_hat.len() != self.r.nrows() {
            return Err(Error::DimensionMismatch {
                name: "y_hat".into(),
                expected: self.r.nrows().to_string(),
                found: y_hat.len().to_string(),
            });
        }
        let rhs = self.r.transpose() * (self.k.transpose() * (&self.k * y_hat));
        solve_spd(&self.h, &rhs).ok_or(Error::SingularReconstruction { t: f64::NAN, condition: self.condition })
    }
}

/// Reconstruction map of a strongly observable stack.
#[derive(Debug, Clone)]
pub struct ReconstructionMap {
    pub stack: ObservabilityStack,
    /// Smallest eigenvalue of `H` over the probes used to build the map.
    pub min_eig_h: f64,
}

pub fn build_reconstruction(stack: &ObservabilityStack, probes: &[f64]) -> Result<ReconstructionMap> {
    let verdict = strong_observability_test(stack, probes)?;
    if !verdict.strongly_observable {
        return Err(Error::precondition(DesignStep::Reconstruction, "system is not strongly observable"));
    }
    let mut min_eig = f64::INFINITY;
    for &t in probes {
        min_eig = min_eig.min(ReconstructionAt::new(&stack.at(t)?, t)?.min_eig);
    }
    Ok(ReconstructionMap { stack: stack.clone(), min_eig_h: min_eig })
}

impl ReconstructionMap {
    pub fn at(&self, t: f64) -> Result<ReconstructionAt> {
        ReconstructionAt::new(&self.stack.at(t)?, t)
    }

    pub fn reconstruct(&self, t: f64, y_hat: &DVector<f64>) -> Result<DVector<f64>> {
        self.at(t)?.reconstruct(y_hat).map_err(|e| match e {
            Error::SingularReconstruction { condition, .. } => Error::SingularReconstruction { t, condition },
            other => other,
        })
    }
}

/// Observability data of the error system `(A − LC, D, C)` tracked along the
/// observer's frame flow.
///
/// `C_{i+1,e} = C_{i,e}(A − LC) + Ċ_{i,e}`. For `ν = 2` only `Ċ` is needed,
/// which is exact. Deeper stacks need time derivatives of the sampled gain
/// and use backward differences of the numeric `C_{i,e}` and `𝒟` blocks;
/// this must be enabled explicitly.
#[derive(Debug, Clone)]
pub struct ErrorStackTracker {
    nu: usize,
    h: f64,
    allow_fd: bool,
    c: MatrixExpr,
    c_dot: MatrixExpr,
    c0d: MatrixExpr,
    c0d_dot: MatrixExpr,
    /// Last values of `C_{i,e}` (`i ≥ 1`) and of the `𝒟` table, newest last.
    history: Vec<(Vec<DMatrix<f64>>, Vec<Vec<DMatrix<f64>>>)>,
}

/// Numeric error-system stack at one instant.
#[derive(Debug, Clone)]
pub struct ErrorStackAt {
    /// `C_{0,e} … C_{ν−1,e}`.
    pub c: Vec<DMatrix<f64>>,
    /// `𝒟_{α,β}` blocks, `d[α][β]`.
    pub d: Vec<Vec<DMatrix<f64>>>,
    pub stack: StackAt,
}

impl ErrorStackTracker {
    pub fn new(sys: &LtvSystem, nu: usize, h: f64, allow_fd: bool) -> Result<Self> {
        if nu == 0 {
            return Err(Error::InvalidArgument("observability index must be positive".into()));
        }
        if nu > 2 && !allow_fd {
            return Err(Error::precondition(
                DesignStep::Reconstruction,
                format!("observability index {nu} needs finite-difference derivatives of the gain; enable them explicitly"),
            ));
        }
        let c0d = sys.c.mul(&sys.d);
        Ok(ErrorStackTracker {
            nu,
            h,
            allow_fd,
            c: sys.c.clone(),
            c_dot: sys.c.derivative(),
            c0d_dot: c0d.derivative(),
            c0d,
            history: Vec::new(),
        })
    }

    pub fn nu(&self) -> usize {
        self.nu
    }

    pub fn uses_finite_differences(&self) -> bool {
        self.allow_fd && self.nu > 2
    }

    fn backward_diff(&self, current: &DMatrix<f64>, past: impl Fn(&(Vec<DMatrix<f64>>, Vec<Vec<DMatrix<f64>>>)) -> DMatrix<f64>) -> Result<DMatrix<f64>> {
        let len = self.history.len();
        match len {
            0 => Err(Error::InsufficientHistory("finite-difference stack needs a previous sample".into())),
            1 => Ok((current - past(&self.history[0])) / self.h),
            _ => {
                let p1 = past(&self.history[len - 1]);
                let p2 = past(&self.history[len - 2]);
                Ok((current * 3.0 - p1 * 4.0 + p2) / (2.0 * self.h))
            }
        }
    }

    /// Evaluate at time `t` with the closed-loop matrix `A − LC`; must be
    /// called once per grid point in increasing time when finite
    /// differences are used.
    pub fn update(&mut self, t: f64, a_cl: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<ErrorStackAt> {
        let nu = self.nu;
        let c0 = self.c.eval(t)?;
        let mut cs = vec![c0.clone()];
        if nu >= 2 {
            cs.push(&c0 * a_cl + self.c_dot.eval(t)?);
        }
        let mut dt: Vec<Vec<DMatrix<f64>>> = vec![Vec::new()];
        if nu >= 2 {
            dt.push(vec![self.c0d.eval(t)?]);
        }
        let mut fd_result = Ok(());
        if nu > 2 {
            let c0d = dt[1][0].clone();
            for i in 1..nu - 1 {
                let ci_dot = self.backward_diff(&cs[i], |h| h.0[i - 1].clone());
                let ci_dot = match ci_dot {
                    Ok(v) => v,
                    Err(e) => {
                        fd_result = Err(e);
                        break;
                    }
                };
                cs.push(&cs[i] * a_cl + ci_dot);
            }
            if fd_result.is_ok() {
                for alpha in 1..nu - 1 {
                    let prev = dt[alpha].clone();
                    let mut row = Vec::with_capacity(alpha + 1);
                    let d0_dot = if alpha == 1 {
                        self.c0d_dot.eval(t)?
                    } else {
                        self.backward_diff(&prev[0], |h| h.1[alpha][0].clone())?
                    };
                    row.push(&cs[alpha] * d + d0_dot);
                    for beta in 1..alpha {
                        let dot = self.backward_diff(&prev[beta], |h| h.1[alpha][beta].clone())?;
                        row.push(&prev[beta - 1] + dot);
                    }
                    row.push(c0d.clone());
                    dt.push(row);
                }
            }
            self.history.push((cs[1..].to_vec(), dt.clone()));
            if self.history.len() > 3 {
                self.history.remove(0);
            }
        }
        fd_result?;
        cs.truncate(nu);
        let refs: Vec<&DMatrix<f64>> = cs.iter().collect();
        let r = vstack(&refs);
        let j = assemble_j(c0.nrows(), d.ncols(), nu, &dt);
        Ok(ErrorStackAt { c: cs, d: dt.clone(), stack: StackAt { r, j } })
    }
}

/// Runs the reduced frame flow of `conf` and evaluates the strong
/// observability test of `(A − LC, D, C)` at the grid points nearest to
/// `probes`.
pub fn error_system_so_test(
    sys: &LtvSystem,
    conf: &ObserverConfig,
    nu: usize,
    probes: &[f64],
    allow_fd: bool,
) -> Result<SoVerdict> {
    let cfg: StepConfig = conf.step;
    let steps = cfg.steps();
    let mut targets: Vec<(usize, f64)> = probes
        .iter()
        .map(|&t| ((((t - cfg.t0) / cfg.h).round().max(0.0) as usize).min(steps), t))
        .collect();
    targets.sort_by_key(|(k, _)| *k);
    let last = targets.last().map_or(0, |(k, _)| *k);
    let mut tracker = ErrorStackTracker::new(sys, nu, cfg.h, allow_fd)?;
    let mut a_cache = MatrixCache::new(&sys.a);
    let mut q = conf.q0.clone();
    let mut results = Vec::with_capacity(targets.len());
    let mut next_target = 0;
    for step in 0..=last {
        let t = cfg.time(step);
        let a = a_cache.at(t)?;
        let c = sys.c.eval(t)?;
        let (l, _) = compute_gain(&c, &q, conf.p);
        let a_cl = &a - l * &c;
        let at = tracker.update(t, &a_cl, &sys.d.eval(t)?);
        while next_target < targets.len() && targets[next_target].0 == step {
            let at = match &at {
                Ok(v) => v,
                Err(Error::InsufficientHistory(_)) => {
                    next_target += 1;
                    continue;
                }
                Err(_) => return at.map(|_| unreachable!()),
            };
            results.push(probe(t, &at.stack)?);
            next_target += 1;
        }
        if let Err(e) = at {
            if !matches!(e, Error::InsufficientHistory(_)) {
                return Err(e);
            }
        }
        if step < last {
            let t1 = cfg.time(step + 1);
            let next = rk4_step(|s, qs: &DMatrix<f64>| Ok(frame_rhs(&a_cache.at(s)?, qs, skew_rule)), t, &q, cfg.h)?;
            q = project_frame(&next, t1)?;
        }
    }
    Ok(SoVerdict::from_probes(results))
}
