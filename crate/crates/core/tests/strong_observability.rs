mod common;

use common::grid;
use ltvobs_core::linalg::{numerical_rank, RankTolerance};
use ltvobs_core::observer::ObserverConfig;
use ltvobs_core::strong_obs::{build_reconstruction, build_stack, error_system_so_test, probe_grid, strong_observability_test};
use ltvobs_core::{LtvSystem, StepConfig};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Rank by Gaussian elimination with full pivoting.
fn elimination_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    let mut a = m.clone();
    let (rows, cols) = a.shape();
    let mut rank = 0;
    for _ in 0..rows.min(cols) {
        let mut best = (rank, rank, 0.0f64);
        for i in rank..rows {
            for j in rank..cols {
                if a[(i, j)].abs() > best.2 {
                    best = (i, j, a[(i, j)].abs());
                }
            }
        }
        if best.2 <= tol {
            break;
        }
        a.swap_rows(rank, best.0);
        a.swap_columns(rank, best.1);
        for i in rank + 1..rows {
            let f = a[(i, rank)] / a[(rank, rank)];
            for j in rank..cols {
                a[(i, j)] -= f * a[(rank, j)];
            }
        }
        rank += 1;
    }
    rank
}

fn double_integrator(d: &[&str]) -> LtvSystem {
    LtvSystem::without_known_input(grid(&[&["0", "1"], &["0", "0"]]), grid(&[&[d[0]], &[d[1]]]), grid(&[&["1", "0"]]), 1.0).unwrap()
}

#[test]
fn double_integrator_variants_match_rank_oracle() {
    // R = [C; CA] = I; J = [0; CD]; SO iff rank [R J] = n + rank J
    for (d, cd, expected) in [(["0", "1"], 0.0, true), (["1", "0"], 1.0, false)] {
        let sys = double_integrator(&d);
        let probes = probe_grid(0.0, 1.0, 5);
        let stack = build_stack(&sys, 4, &probes).unwrap();
        let verdict = strong_observability_test(&stack, &probes).unwrap();
        let r = DMatrix::<f64>::identity(2, 2);
        let j = DMatrix::from_column_slice(2, 1, &[0.0, cd]);
        let s = DMatrix::from_fn(2, 3, |a, b| if b < 2 { r[(a, b)] } else { j[(a, 0)] });
        let oracle = elimination_rank(&s, 1e-12) == 2 + elimination_rank(&j, 1e-12);
        assert_eq!(oracle, expected);
        assert_eq!(verdict.strongly_observable, expected, "D = {d:?}");
    }
}

#[test]
fn error_system_verdict_matches_plant_verdict() {
    let scn = common::benchmark();
    let sys = scn.sys();
    let step = StepConfig::new(1e-3, 0.0, 50.0).unwrap();
    let conf = ObserverConfig::new(scn.n(), 30.0, 2, step).unwrap();
    let probes = probe_grid(0.0, 50.0, 101);
    let stack = build_stack(sys, 2 * scn.n(), &probes).unwrap();
    assert_eq!(stack.nu, 2);
    let plant = strong_observability_test(&stack, &probes).unwrap();
    let error = error_system_so_test(sys, &conf, stack.nu, &probes, false).unwrap();
    assert_eq!(plant.probes.len(), 101);
    assert_eq!(error.probes.len(), 101);
    for (a, b) in plant.probes.iter().zip(&error.probes) {
        assert_eq!(a.strongly_observable, b.strongly_observable, "t = {}", a.t);
        assert_eq!(a.rank_s, b.rank_s);
    }
    assert!(plant.strongly_observable);
}

#[test]
fn projector_annihilates_unknown_input_directions() {
    let scn = common::benchmark();
    let probes = probe_grid(0.0, 50.0, 101);
    let stack = build_stack(scn.sys(), 16, &probes).unwrap();
    let map = build_reconstruction(&stack, &probes).unwrap();
    for &t in &probes {
        let st = stack.at(t).unwrap();
        let rec = map.at(t).unwrap();
        assert!((&rec.k * &st.j).norm() <= 1e-10 * (1.0 + st.j.norm()), "t = {t}");
        assert_eq!(numerical_rank(&(&rec.k * &st.r), RankTolerance::Default).unwrap(), scn.n());
    }
}

/// `Ċ` by central differences, independent of the symbolic recursion.
fn c_dot(sys: &LtvSystem, t: f64) -> DMatrix<f64> {
    let h = 1e-5;
    (sys.c.eval(t + h).unwrap() - sys.c.eval(t - h).unwrap()) / (2.0 * h)
}

#[test]
fn exact_outputs_reconstruct_the_state() {
    let scn = common::benchmark();
    let sys = scn.sys();
    let probes = probe_grid(0.0, 50.0, 101);
    let stack = build_stack(sys, 16, &probes).unwrap();
    let map = build_reconstruction(&stack, &probes).unwrap();
    let n = scn.n();
    for (i, &t) in probes.iter().enumerate().step_by(5) {
        let x = DVector::from_fn(n, |k, _| ((i * 7 + k * 3) as f64 * 0.37).sin());
        let w = DVector::from_element(1, (i as f64 * 0.9).cos());
        let a = sys.a.eval(t).unwrap();
        let c = sys.c.eval(t).unwrap();
        let d = sys.d.eval(t).unwrap();
        let y = &c * &x;
        let y_dot = c_dot(sys, t) * &x + &c * (&a * &x + &d * &w);
        let mut yhat = DVector::zeros(2 * c.nrows());
        yhat.rows_mut(0, c.nrows()).copy_from(&y);
        yhat.rows_mut(c.nrows(), c.nrows()).copy_from(&y_dot);
        let xr = map.reconstruct(t, &yhat).unwrap();
        assert!((&xr - &x).norm() <= 1e-6 * (1.0 + x.norm()), "t = {t}: {:e}", (&xr - &x).norm());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reconstruction_is_linear(
        t in 0.0f64..50.0,
        y1 in prop::collection::vec(-5.0f64..5.0, 8),
        y2 in prop::collection::vec(-5.0f64..5.0, 8),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let scn = common::benchmark();
        let probes = probe_grid(0.0, 50.0, 11);
        let stack = build_stack(scn.sys(), 16, &probes).unwrap();
        let map = build_reconstruction(&stack, &probes).unwrap();
        let y1 = DVector::from_vec(y1);
        let y2 = DVector::from_vec(y2);
        let lhs = map.reconstruct(t, &(&y1 * a + &y2 * b)).unwrap();
        let rhs = map.reconstruct(t, &y1).unwrap() * a + map.reconstruct(t, &y2).unwrap() * b;
        prop_assert!((&lhs - &rhs).norm() <= 1e-8 * (1.0 + rhs.norm()));
    }
}
