use std::fmt;

use ltvobs_core::bibs::{general_bibs_certificate, triangularize, triangularize_error_system, GeneralCertificate, TriangularizeOptions};
use ltvobs_core::cascade::{design_checks, run_cascade_with, CascadeConfig, DerivativeSource, NoiseConfig};
use ltvobs_core::lyapunov::{estimate_spectrum_with, nonstable_dimension, random_frame, SpectrumOptions, DEFAULT_ZERO_BAND};
use ltvobs_core::observer::{detectability_report, min_gain_suggestion, run_observer, ObserverConfig};
use ltvobs_core::scenario::{load_scenario, FramePolicy, Scenario};
use ltvobs_core::strong_obs::{build_stack, error_system_so_test, probe_grid, strong_observability_test, ReconstructionAt, SoVerdict};
use ltvobs_core::system::Signal;
use ltvobs_core::{DesignStep, Error, ErrorKind, StepConfig};

use crate::output::{gnuplot, indexed, num, OutDir, Table};
use crate::{BibsArgs, BibsTarget, Command, Common, DetectArgs, ObserveArgs, ReconstructArgs};

const PROBES: usize = 101;

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Io(std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e.kind() {
                ErrorKind::Validation => 2,
                ErrorKind::Precondition => 3,
                ErrorKind::Numerical => 4,
            },
            CliError::Io(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "i/o: {e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = Result<T, CliError>;

pub fn dispatch(cmd: &Command) -> CliResult<()> {
    let common = cmd.common();
    let scenario = prepare(common)?;
    let root = OutDir::create(&common.out)?;
    if common.sweep.is_empty() {
        let report = run_one(cmd, &scenario, &root)?;
        print!("{report}");
        return Ok(());
    }
    let results: Vec<(f64, CliResult<String>)> = std::thread::scope(|s| {
        let handles: Vec<_> = common
            .sweep
            .iter()
            .map(|&p| {
                let mut scn = scenario.clone();
                scn.p = p;
                let root = &root;
                (p, s.spawn(move || -> CliResult<String> { run_one(cmd, &scn, &root.sub(&format!("p_{p}"))?) }))
            })
            .collect();
        handles.into_iter().map(|(p, h)| (p, h.join().expect("sweep worker panicked"))).collect()
    });
    let mut first_err = None;
    for (p, r) in results {
        match r {
            Ok(text) => {
                for line in text.lines() {
                    println!("[p={p}] {line}");
                }
            }
            Err(e) => {
                eprintln!("[p={p}] error: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn run_one(cmd: &Command, scn: &Scenario, out: &OutDir) -> CliResult<String> {
    match cmd {
        Command::Spectrum(c) => spectrum(c, scn, out),
        Command::Detect(a) => detect(a, scn, out),
        Command::CheckSo(c) => check_so(c, scn, out),
        Command::Observe(a) => observe(a, scn, out),
        Command::Reconstruct(a) => reconstruct(a, scn, out),
        Command::Bibs(a) => bibs(a, scn, out),
    }
}

/// Loads the scenario and applies the command-line overrides.
fn prepare(c: &Common) -> CliResult<Scenario> {
    let mut scn = load_scenario(&c.scenario)?;
    let h = c.h.unwrap_or(scn.step.h);
    let t_end = c.horizon.map_or(scn.step.t_end, |hz| scn.step.t0 + hz);
    scn.step = StepConfig::new(h, scn.step.t0, t_end)?;
    if let Some(k) = c.k {
        scn.k = k;
    }
    if let Some(p) = c.p {
        scn.p = p;
    }
    if let Some(seed) = c.frame_seed {
        scn.frame = FramePolicy::Random(seed);
    }
    Ok(scn)
}

fn stride(c: &Common, default: usize) -> usize {
    c.stride.unwrap_or(default).max(1)
}

fn spectrum(c: &Common, scn: &Scenario, out: &OutDir) -> CliResult<String> {
    let n = scn.n();
    let k = c.k.unwrap_or(n);
    let q0 = scn.frame.frame(n, k);
    let opts = SpectrumOptions { record_stride: stride(c, 100), keep_diagonal: false };
    let est = estimate_spectrum_with(&scn.sys().a, &q0, scn.step, opts)?;

    let mut table = Table::new(std::iter::once("t".to_string()).chain(indexed("lambda", k)));
    for hp in &est.history {
        table.push(std::iter::once(num(hp.t)).chain(hp.lambda.iter().map(|&v| num(v))).collect());
    }
    out.table("spectrum.csv", &table)?;
    let cols: Vec<_> = (0..k).map(|i| (i + 2, format!("lambda_{}", i + 1))).collect();
    out.text("spectrum.gp", &gnuplot("spectrum.csv", "running Lyapunov exponent estimates", "lambda", &cols, false))?;

    let dim = nonstable_dimension(&est.exponents, DEFAULT_ZERO_BAND);
    let mut s = String::new();
    for (i, v) in est.exponents.iter().enumerate() {
        s += &format!("lambda_{} = {:.6}\n", i + 1, v);
    }
    s += &format!("nonstable_dimension={dim}\n");
    s += &format!("max_orthonormality_defect={:.3e}\n", est.max_orthonormality_defect);
    Ok(s)
}

fn detect(a: &DetectArgs, scn: &Scenario, out: &OutDir) -> CliResult<String> {
    let conf = scn.observer_config()?;
    let report = detectability_report(scn.sys(), &conf)?;
    let mut table = Table::new(["direction", "lambda", "r_bar", "mu", "nonstable", "detectable"]);
    for (j, d) in report.directions.iter().enumerate() {
        table.push(vec![
            (j + 1).to_string(),
            num(d.lambda),
            num(d.r_bar),
            num(d.mu),
            d.nonstable.to_string(),
            d.detectable.to_string(),
        ]);
    }
    out.table("detectability.csv", &table)?;
    out.text("detectability.gp", &bar_script("detectability.csv", "detectability per direction", &[(2, "lambda"), (4, "mu")]))?;

    let mut s = String::new();
    for (j, d) in report.directions.iter().enumerate() {
        s += &format!(
            "direction {}: lambda={:.6} r_bar={:.6} mu={:.6} nonstable={} detectable={}\n",
            j + 1,
            d.lambda,
            d.r_bar,
            d.mu,
            d.nonstable,
            d.detectable
        );
    }
    let p_min = min_gain_suggestion(&report, a.margin)?;
    s += &format!("p_min={p_min:.6}\n");
    if let Some((j, d)) = report.directions.iter().enumerate().find(|(_, d)| d.nonstable && d.mu >= 0.0) {
        return Err(Error::precondition(
            DesignStep::GainChoice,
            format!("p = {} leaves direction {} with mu = {:.6} >= 0; need p > {:.6}", conf.p, j + 1, d.mu, p_min),
        )
        .into());
    }
    s += &format!("p={} detectable=true\n", conf.p);
    Ok(s)
}

fn probe_table(v: &SoVerdict) -> Table {
    let mut table = Table::new(["t", "rank_S", "rank_Sstar", "min_eig_H"]);
    for p in &v.probes {
        table.push(vec![num(p.t), p.rank_s.to_string(), p.rank_s_star.to_string(), num(p.min_eig_h)]);
    }
    table
}

fn check_so(_c: &Common, scn: &Scenario, out: &OutDir) -> CliResult<String> {
    let sys = scn.sys();
    let step = scn.step;
    let probes = probe_grid(step.t0, step.t0 + step.horizon(), PROBES);
    let stack = build_stack(sys, 2 * scn.n(), &probes)?;
    let verdict = strong_observability_test(&stack, &probes)?;
    out.table("probes.csv", &probe_table(&verdict))?;
    out.text(
        "probes.gp",
        &gnuplot("probes.csv", "reconstruction margin", "min eig H", &[(4, "min_eig_H".into())], true),
    )?;

    let mut s = format!("nu={}, strongly_observable={}\n", stack.nu, verdict.strongly_observable);
    if !verdict.strongly_observable {
        print!("{s}");
        return Err(Error::precondition(DesignStep::Reconstruction, "the system is not strongly observable").into());
    }
    let mut max_cond: f64 = 0.0;
    for &t in &probes {
        let rec = ReconstructionAt::new(&stack.at(t)?, t)?;
        max_cond = max_cond.max(rec.condition);
    }
    s += &format!("min_eig_H={:.6e} max_condition_H={:.6e}\n", verdict.min_eig_h(), max_cond);

    let conf = scn.observer_config()?;
    let err_verdict = error_system_so_test(sys, &conf, stack.nu, &probes, false)?;
    out.table("probes_error_system.csv", &probe_table(&err_verdict))?;
    s += &format!("error_system: nu={}, strongly_observable={}\n", stack.nu, err_verdict.strongly_observable);
    s += &format!("error_system_min_eig_H={:.6e}\n", err_verdict.min_eig_h());
    Ok(s)
}

fn observe(a: &ObserveArgs, scn: &Scenario, out: &OutDir) -> CliResult<String> {
    let mut plant = scn.plant.clone();
    if a.no_disturbance {
        plant.w = Signal::zeros(plant.sys.m());
    }
    let conf = scn.observer_config()?;
    let xt0 = match a.initial_error_seed {
        Some(seed) => &scn.x0 + random_frame(scn.n(), 1, seed).column(0),
        None => scn.xt0.clone(),
    };
    let run = run_observer(&plant, &conf, scn.x0.clone(), xt0, stride(&a.common, 10))?;
    let n = scn.n();
    let mut table =
        Table::new(std::iter::once("t".to_string()).chain(indexed("x", n)).chain(indexed("xt", n)).chain(["e_norm".to_string()]));
    for smp in &run.samples {
        table.push(
            std::iter::once(num(smp.t))
                .chain(smp.x.iter().map(|&v| num(v)))
                .chain(smp.xt.iter().map(|&v| num(v)))
                .chain([num(smp.e_norm)])
                .collect(),
        );
    }
    out.table("trajectory.csv", &table)?;
    out.text(
        "trajectory.gp",
        &gnuplot("trajectory.csv", "observer error norm", "|e|", &[(2 * n + 2, "e_norm".into())], true),
    )?;
    let step = conf.step;
    let t_end = step.t0 + step.horizon();
    let mut s = format!("e_norm(0)={:.6e}\n", run.e_norm[0]);
    s += &format!("e_norm(T)={:.6e}\n", run.e_norm.last().copied().unwrap_or(f64::NAN));
    s += &format!("sup_e_norm_second_half={:.6e}\n", run.sup_error(step.t0 + 0.5 * step.horizon(), t_end, &step));
    s += &format!("max_orthonormality_defect={:.3e}\n", run.max_orthonormality_defect);
    Ok(s)
}

fn reconstruct(a: &ReconstructArgs, scn: &Scenario, out: &OutDir) -> CliResult<String> {
    let mut plant = scn.plant.clone();
    if a.no_disturbance {
        plant.w = Signal::zeros(plant.sys.m());
    }
    let mut conf = CascadeConfig::new(scn.observer_config()?, scn.x0.clone(), scn.xt0.clone());
    conf.differentiator = scn.differentiator.clone();
    if let Some(l) = a.lipschitz {
        conf.differentiator.lipschitz = l;
    }
    if a.order.is_some() {
        conf.differentiator.order = a.order;
    }
    conf.settle = scn.settle;
    conf.noise = NoiseConfig { sigma: a.sigma.unwrap_or(scn.noise.sigma), seed: a.seed.unwrap_or(scn.noise.seed) };
    conf.derivatives = if a.oracle_derivatives { DerivativeSource::Oracle } else { DerivativeSource::Differentiator };
    conf.allow_finite_differences = a.allow_finite_differences;
    conf.record_stride = stride(&a.common, 10);
    conf.probes = PROBES;

    let artifacts = design_checks(&plant, &conf)?;
    let run = run_cascade_with(&plant, &conf, artifacts.stack.nu)?;

    let n = scn.n();
    let mut table = Table::new(
        std::iter::once("t".to_string())
            .chain(indexed("x", n))
            .chain(indexed("xhat", n))
            .chain(["e_norm_tso".to_string(), "e_norm_cascade".to_string()]),
    );
    for smp in &run.samples {
        table.push(
            std::iter::once(num(smp.t))
                .chain(smp.x.iter().map(|&v| num(v)))
                .chain(smp.xhat.iter().map(|&v| num(v)))
                .chain([num(smp.e_norm_tso), num(smp.e_norm_cascade)])
                .collect(),
        );
    }
    out.table("cascade.csv", &table)?;
    let summary = serde_json::to_string_pretty(&run.summary).map_err(std::io::Error::other)?;
    out.text("summary.json", &(summary + "\n"))?;
    out.text(
        "cascade.gp",
        &gnuplot(
            "cascade.csv",
            "estimation error",
            "|x - estimate|",
            &[(2 * n + 2, "e_norm_tso".into()), (2 * n + 3, "e_norm_cascade".into())],
            true,
        ),
    )?;

    let sm = &run.summary;
    let mut s = format!("nu={} differentiator_order={}\n", sm.nu, sm.differentiator_order);
    match sm.settled_at {
        Some(t) => s += &format!("settled_at={t:.6}\n"),
        None => s += "settled_at=never\n",
    }
    s += &format!("sup_error_tso={:.6e}\n", sm.sup_error_tso);
    if let Some(v) = &sm.sup_error_after_settling {
        for (i, e) in v.iter().enumerate() {
            s += &format!("sup_error_x{}={:.6e}\n", i + 1, e);
        }
    }
    if let Some(e) = sm.sup_error_cascade_after_settling {
        s += &format!("sup_error_cascade={e:.6e}\n");
    }
    s += &format!("max_condition_H={:.6e}\n", sm.max_condition_h);
    Ok(s)
}

fn bibs(a: &BibsArgs, scn: &Scenario, out: &OutDir) -> CliResult<String> {
    let sys = scn.sys();
    let opts = TriangularizeOptions::default();
    let tri = match a.matrix {
        BibsTarget::A => triangularize(&sys.a, scn.step, opts)?,
        BibsTarget::Error => {
            let conf: ObserverConfig = scn.observer_config()?;
            triangularize_error_system(sys, conf.p, &conf.q0, scn.step, opts)?
        }
    };
    let x0_norm = match a.matrix {
        BibsTarget::A => scn.x0.norm(),
        BibsTarget::Error => (&scn.x0 - &scn.xt0).norm(),
    };
    let cert: GeneralCertificate = general_bibs_certificate(&tri, a.epsilon, &sys.d, sys.w_bar, x0_norm)?;
    let mut table = Table::new(["component", "lambda", "epsilon", "tail_mass", "bound_factor", "certified"]);
    for c in &cert.components {
        table.push(vec![
            c.index.to_string(),
            num(c.scalar.lambda),
            num(c.scalar.epsilon),
            num(c.scalar.tail_mass),
            num(c.scalar.bound_factor),
            c.certified.to_string(),
        ]);
    }
    out.table("bibs.csv", &table)?;
    out.text("bibs.gp", &bar_script("bibs.csv", "diagonal averages of the triangular form", &[(2, "lambda")]))?;

    let mut s = String::new();
    for c in &cert.components {
        s += &format!(
            "component {}: lambda={:.6} tail_mass={:.6e} bound_factor={:.6e} state_bound={:.6e} certified={}\n",
            c.index,
            c.scalar.lambda,
            c.scalar.tail_mass,
            c.scalar.bound_factor,
            c.state_bound,
            c.certified
        );
    }
    s += &format!("max_subdiagonal={:.3e}\n", tri.max_subdiagonal);
    s += &format!("certified={}\n", cert.certified);
    Ok(s)
}

fn bar_script(csv: &str, title: &str, cols: &[(usize, &str)]) -> String {
    let mut s = String::from("set datafile separator ','\nset style data histograms\nset style fill solid 0.6\nset grid y\n");
    s += &format!("set title '{title}'\nset xlabel 'direction'\n");
    let plots: Vec<String> = cols.iter().map(|(c, name)| format!("'{csv}' using {c}:xtic(1) title '{name}'")).collect();
    s += &format!("plot {}\n", plots.join(", "));
    s
}
