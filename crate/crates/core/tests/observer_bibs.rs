mod common;

use common::grid;
use ltvobs_core::bibs::{general_bibs_certificate, triangular_part, triangularize, TriangularizeOptions};
use ltvobs_core::integrators::{frame_rhs, project_frame, rk4_step};
use ltvobs_core::linalg::{hstack, mgs_qr};
use ltvobs_core::lyapunov::{random_frame, skew_rule};
use ltvobs_core::observer::{compute_gain, run_observer, ObserverConfig, Plant, Simulator};
use ltvobs_core::system::Signal;
use ltvobs_core::{LtvSystem, StepConfig, TimeMatrix};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Orthonormal completion `[Q Q⊥]` of a frame.
fn complete(q: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = q.shape();
    mgs_qr(&hstack(&[q, &random_frame(n, n - k, 5)])).q
}

#[test]
fn gain_only_acts_inside_the_tracked_subspace() {
    let scn = common::benchmark();
    let conf = scn.observer_config().unwrap();
    let n = scn.n();
    let k = conf.k;
    let mut sim = Simulator::new(&scn.plant, &conf, scn.x0.clone(), scn.xt0.clone()).unwrap();
    let mut checked = 0;
    while sim.t() < 20.0 {
        if sim.index() % 2500 == 0 {
            let (c, l, rdiag) = sim.gain_now().unwrap();
            let full = complete(&sim.q);
            let m = full.transpose() * &l * &c * &full;
            let lower = m.rows(k, n - k);
            assert!(lower.norm() <= 1e-8 * (1.0 + m.norm()), "t = {}: |lower| = {:e}", sim.t(), lower.norm());
            assert!(rdiag.iter().all(|&r| r >= 0.0));
            checked += 1;
        }
        sim.step(None).unwrap();
    }
    assert_eq!(checked, 8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gain_never_raises_an_exponent_estimate(
        n in 2usize..=6,
        r in 1usize..=3,
        kk in 1usize..=6,
        entries in prop::collection::vec(-2.0f64..2.0, 18),
        seed in 0u64..10_000,
        p in 0.0f64..50.0,
    ) {
        let k = kk.min(n);
        let c = DMatrix::from_fn(r, n, |i, j| entries[(i * 6 + j) % 18]);
        let q = random_frame(n, k, seed);
        let (l, rdiag) = compute_gain(&c, &q, p);
        prop_assert_eq!(l.shape(), (n, r));
        prop_assert!(rdiag.iter().all(|&v| v >= 0.0));
        // μ_j = λ_j − p r_j with the frame diagonal of −LC
        let d = q.transpose() * (&l * &c) * &q;
        for j in 0..k {
            prop_assert!(d[(j, j)] >= -1e-9 * (1.0 + p), "(QᵀLCQ)_jj = {}", d[(j, j)]);
        }
    }
}

#[test]
fn triangular_coordinates_preserve_the_norm() {
    let scn = common::benchmark();
    let a = &scn.sys().a;
    let n = scn.n();
    type State = ((DVector<f64>, DVector<f64>), DMatrix<f64>);
    for seed in [1u64, 2, 3] {
        let x0 = random_frame(n, 1, seed).column(0).into_owned();
        let mut state: State = ((x0.clone(), x0), DMatrix::identity(n, n));
        let h = 1e-3;
        for step in 0..10_000 {
            let t = step as f64 * h;
            let next = rk4_step(
                |s, ((x, z), q): &State| {
                    let am = a.at(s)?;
                    let b = triangular_part(&am, q);
                    Ok(((&am * x, b * z), frame_rhs(&am, q, skew_rule)))
                },
                t,
                &state,
                h,
            )
            .unwrap();
            let ((x, z), q) = next;
            state = ((x, z), project_frame(&q, t + h).unwrap());
        }
        let ((x, z), q) = &state;
        let rel = (x.norm() - z.norm()).abs() / x.norm();
        assert!(rel <= 1e-6, "seed {seed}: relative norm gap {rel:e}");
        let back = (&(q.transpose() * x) - z).norm() / x.norm();
        assert!(back <= 1e-6, "seed {seed}: ζ ≠ 𝕢ᵀx ({back:e})");
    }
}

#[test]
fn certified_bound_holds_in_simulation() {
    // rotated upper-triangular system with time-varying stable diagonal
    let c = 0.8f64.cos();
    let s = 0.8f64.sin();
    let a11 = "(-1 + 0.5*sin(t))";
    let a22 = "(-2 + cos(t))";
    let a12 = "1";
    let e = |x: &str| x.to_string();
    // A = P U Pᵀ with P the rotation by 0.8 rad
    let u = [[e(a11), e(a12)], [e("0"), e(a22)]];
    let p = [[c, -s], [s, c]];
    let mut entries = vec![vec![String::new(); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let mut terms = Vec::new();
            for k in 0..2 {
                for l in 0..2 {
                    terms.push(format!("({})*({})*({})", p[i][k], u[k][l], p[j][l]));
                }
            }
            entries[i][j] = terms.join(" + ");
        }
    }
    let rows: Vec<Vec<&str>> = entries.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
    let a = ltvobs_core::MatrixExpr::parse_grid(&rows).unwrap();
    let d = grid(&[&["1", "0"], &["0", "1"]]);
    let w_bar = 1.0;
    let x0 = DVector::from_vec(vec![0.3, -0.4]);
    let cfg = StepConfig::new(1e-3, 0.0, 200.0).unwrap();
    let tri = triangularize(&a, cfg, TriangularizeOptions::default()).unwrap();
    let cert = general_bibs_certificate(&tri, 1e-2, &d, w_bar, x0.norm()).unwrap();
    assert!(cert.certified);
    let bound = cert.components.iter().map(|c| c.state_bound.powi(2)).sum::<f64>().sqrt();
    assert!(bound.is_finite());

    // worst-case sign input: push along the current state direction
    let mut x = x0;
    let mut sup: f64 = 0.0;
    for step in 0..cfg.steps() {
        let t = cfg.time(step);
        let w = if x.norm() > 0.0 { &x * (w_bar / x.norm()) } else { DVector::zeros(2) };
        x = rk4_step(|s, xs: &DVector<f64>| Ok(a.eval(s)? * xs + d.eval(s)? * &w), t, &x, cfg.h).unwrap();
        sup = sup.max(x.norm());
    }
    assert!(sup <= 10.0 * bound, "sup |x| = {sup}, bound = {bound}");
}

#[test]
fn observer_error_vanishes_without_unknown_input() {
    let scn = common::benchmark();
    let mut plant = scn.plant.clone();
    plant.w = Signal::zeros(plant.sys.m());
    let conf = ObserverConfig::new(scn.n(), 30.0, 2, StepConfig::new(1e-3, 0.0, 200.0).unwrap()).unwrap();
    let xt0 = &scn.x0 + random_frame(scn.n(), 1, 11).column(0);
    let out = run_observer(&plant, &conf, scn.x0.clone(), xt0, 10_000).unwrap();
    let e0 = out.e_norm[0];
    let e_end = *out.e_norm.last().unwrap();
    assert!((e0 - 1.0).abs() < 1e-12);
    assert!(e_end <= 1e-6 * e0, "|e(200)| = {e_end:e}");
}

#[test]
fn plant_rejects_mismatched_signals() {
    let sys = LtvSystem::without_known_input(grid(&[&["0"]]), grid(&[&["1"]]), grid(&[&["1"]]), 1.0).unwrap();
    assert!(Plant::new(sys, Signal::zeros(0), Signal::zeros(2), None).is_err());
}
