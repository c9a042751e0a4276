mod common;

use common::*;
use dyngame_core::clne::{bellman_check_cl, solve_clne, ClneMethod};
use dyngame_core::game::{ConstraintSpec, InputBox, Polytope};
use dyngame_core::linalg::asymmetry;
use dyngame_core::olne::{build_cost_to_go, solve_olne, IterOptions};
use dyngame_core::scenario::platooning_x0;
use dyngame_core::terminal::compute_terminal_set;
use dyngame_core::vi::*;
use dyngame_core::{Error, Mat, Vector};
use rand::Rng;

fn unconstrained_olne_vi(g: &dyngame_core::game::GameDefinition) -> (FiniteHorizonVi, dyngame_core::olne::OlNeSolution) {
    let sol = solve_olne(g, None, IterOptions::default()).unwrap();
    let ctg = build_cost_to_go(g, &sol).unwrap();
    let vi = build_vi(g, ValueSource::Olne { sol: &sol, ctg: &ctg }, &ConstraintSpec::unconstrained(g), None).unwrap();
    (vi, sol)
}

#[test]
fn single_step_structure() {
    let mut r = rng(1);
    let g = random_game(&mut r, 3, 2, 2, 0.9, 1);
    let (vi, sol) = unconstrained_olne_vi(&g);
    assert_eq!(vi.theta, g.a);
    for i in 0..2 {
        assert_eq!(vi.gamma[i], g.b[i]);
        assert_eq!(vi.q_bar[i], sol.p_ol[i]);
    }
    assert_eq!(vi.operator(&Vector::zeros(4), &Vector::zeros(3)).norm(), 0.0);
}

#[test]
fn prediction_blocks_follow_powers_of_a() {
    let mut r = rng(2);
    let g = random_game(&mut r, 3, 1, 2, 0.9, 4);
    let vi = build_vi(&g, ValueSource::None, &ConstraintSpec::unconstrained(&g), None).unwrap();
    for i in 0..2 {
        for row in 0..4 {
            for col in 0..4 {
                let block = vi.gamma[i].view((row * 3, col), (3, 1)).into_owned();
                let expect = if row >= col { dyngame_core::linalg::mat_pow(&g.a, row - col) * &g.b[i] } else { Mat::zeros(3, 1) };
                assert!((block - expect).norm() < 1e-14);
            }
        }
        assert_eq!(vi.q_bar[i].view((9, 9), (3, 3)), g.q[i]);
    }
}

#[test]
fn scalar_pair_hand_expansion() {
    let g = scalar_game(1.0, 2, 2);
    let (vi, sol) = unconstrained_olne_vi(&g);
    let p = sol.p_ol[0][(0, 0)];
    // Γ = [[1, 0], [1, 1]], Q̄ = diag(1, p).
    let block = Mat::from_row_slice(2, 2, &[1.0 + p, p, p, p]);
    for i in 0..2 {
        for j in 0..2 {
            let mut expect = block.clone();
            if i == j {
                expect += Mat::identity(2, 2);
            }
            assert!((vi.m_mat.view((2 * i, 2 * j), (2, 2)) - expect).norm() < 1e-12);
        }
        let w = vi.offset(&Vector::from_element(1, 1.0));
        assert!((w[2 * i] - (1.0 + p)).abs() < 1e-12 && (w[2 * i + 1] - p).abs() < 1e-12);
    }
    let x0 = Vector::from_element(1, 1.7);
    let u = vi.m_mat.clone().lu().solve(&(-vi.offset(&x0))).unwrap();
    let expect = feedback_sequence(&vi, &sol.k_ol, &sol.abar_ol, &x0);
    assert!((u - expect).norm() < 1e-10);
}

#[test]
fn unconstrained_solution_is_truncated_equilibrium() {
    let mut r = rng(3);
    let mut checked = 0;
    while checked < 8 {
        let g = random_game(&mut r, 3, 1 + checked % 2, 2 + checked % 2, 1.1, 2 + checked);
        let Ok(sol) = solve_olne(&g, None, IterOptions::default()) else { continue };
        let ctg = build_cost_to_go(&g, &sol).unwrap();
        let vi = build_vi(&g, ValueSource::Olne { sol: &sol, ctg: &ctg }, &ConstraintSpec::unconstrained(&g), None).unwrap();
        let x0 = vec(&mut r, 3, 2.0);
        let res = solve_vi(&vi, &x0, None, ViOptions::default()).unwrap();
        let expect = feedback_sequence(&vi, &sol.k_ol, &sol.abar_ol, &x0);
        assert!(res.converged && (&res.u - &expect).amax() < 1e-8);
        assert!(vi.operator(&res.u, &x0).norm() <= 1e-8);
        checked += 1;
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut r = rng(4);
    let mut checked = 0;
    while checked < 10 {
        let (m, agents) = (1 + checked % 2, 2 + checked % 2);
        let g = random_game(&mut r, 3, m, agents, 1.05, 3);
        let Ok(sol) = solve_olne(&g, None, IterOptions::default()) else { continue };
        let ctg = build_cost_to_go(&g, &sol).unwrap();
        let vi = build_vi(&g, ValueSource::Olne { sol: &sol, ctg: &ctg }, &ConstraintSpec::unconstrained(&g), None).unwrap();
        let x0 = vec(&mut r, 3, 1.0);
        let u = vec(&mut r, vi.dim(), 1.0);
        let f = vi.operator(&u, &x0);
        let bs = vi.horizon * m;
        for i in 0..agents {
            let ui = vi.agent_block(&u, i);
            let fd = Vector::from_fn(bs, |k, _| {
                let h = 1e-5;
                let (mut up, mut dn) = (ui.clone(), ui.clone());
                up[k] += h;
                dn[k] -= h;
                (vi.agent_cost(i, &x0, &up, &u) - vi.agent_cost(i, &x0, &dn, &u)) / (2.0 * h)
            });
            let fi = f.rows(i * bs, bs).into_owned();
            assert!((&fi - &fd).norm() <= 1e-5 * (1.0 + fi.norm()), "agent {i}: {fi} vs {fd}");
        }
        checked += 1;
    }
}

#[test]
fn monotonicity_diagnostics() {
    let mut r = rng(5);
    let g = random_game(&mut r, 3, 2, 1, 0.9, 3);
    let (vi, _) = unconstrained_olne_vi(&g);
    let d = diagnose_monotonicity(&vi);
    assert!(d.strongly_monotone && asymmetry(&vi.m_mat) < 1e-10);

    let g = random_game(&mut r, 3, 1, 3, 0.9, 3);
    let base = diagnose_monotonicity(&build_vi(&g, ValueSource::None, &ConstraintSpec::unconstrained(&g), None).unwrap());
    let rho = 0.75;
    let mut shifted = g.clone();
    for ri in &mut shifted.r {
        *ri += Mat::identity(1, 1) * rho;
    }
    let moved = diagnose_monotonicity(&build_vi(&shifted, ValueSource::None, &ConstraintSpec::unconstrained(&shifted), None).unwrap());
    assert!((moved.min_eig_sym - base.min_eig_sym - rho).abs() < 1e-10);
    assert!((moved.gerschgorin_bound - base.gerschgorin_bound - rho).abs() < 1e-10);
    assert!(base.gerschgorin_bound <= base.min_eig_sym + 1e-12);
}

#[test]
fn asymmetric_terminal_weight_shows_in_diagonal_blocks() {
    let mut r = rng(6);
    let mut seen = 0;
    for _ in 0..40 {
        let g = random_game(&mut r, 3, 1, 2, 1.05, 3);
        let Ok(sol) = solve_olne(&g, None, IterOptions::default()) else { continue };
        if sol.p_ol.iter().map(asymmetry).fold(0.0, f64::max) <= 1e-6 {
            continue;
        }
        let ctg = build_cost_to_go(&g, &sol).unwrap();
        let vi = build_vi(&g, ValueSource::Olne { sol: &sol, ctg: &ctg }, &ConstraintSpec::unconstrained(&g), None).unwrap();
        assert!(diagnose_monotonicity(&vi).max_block_asymmetry > 1e-6);
        seen += 1;
    }
    assert!(seen > 0, "no random game produced a non-symmetric P_ol");
}

/// Enumerates active sets of `a u ≤ b` and returns the KKT point that is
/// primal feasible with nonnegative multipliers.
fn enumeration_oracle(m: &Mat, w: &Vector, a: &Mat, b: &Vector) -> Option<Vector> {
    let (d, k) = (m.nrows(), a.nrows());
    for mask in 0u32..(1 << k) {
        let act: Vec<usize> = (0..k).filter(|j| mask >> j & 1 == 1).collect();
        let s = d + act.len();
        let mut kk = Mat::zeros(s, s);
        let mut rhs = Vector::zeros(s);
        kk.view_mut((0, 0), (d, d)).copy_from(m);
        rhs.rows_mut(0, d).copy_from(&(-w));
        for (r, &j) in act.iter().enumerate() {
            for c in 0..d {
                kk[(d + r, c)] = a[(j, c)];
                kk[(c, d + r)] = a[(j, c)];
            }
            rhs[d + r] = b[j];
        }
        if act.len() > d {
            continue;
        }
        let Some(sol) = kk.clone().lu().solve(&rhs) else { continue };
        if (&kk * &sol - &rhs).norm() > 1e-9 * (1.0 + rhs.norm()) {
            continue;
        }
        let u = sol.rows(0, d).into_owned();
        let dual_ok = sol.rows(d, act.len()).iter().all(|l| *l >= -1e-10);
        let primal_ok = (a * &u - b).iter().all(|v| *v <= 1e-9);
        if dual_ok && primal_ok {
            return Some(u);
        }
    }
    None
}

fn random_small_vi(r: &mut rand_chacha::ChaCha8Rng) -> (AffineVi, Mat, Vector) {
    let d = r.random_range(1..=6usize);
    let s = spd(r, d, 0.3);
    let skew = {
        let k = mat(r, d, d);
        (&k - k.transpose()) * 0.5
    };
    let m = s + skew;
    let w = vec(r, d, 4.0);
    let rows = r.random_range(0..=3usize);
    let a = mat(r, rows, d);
    let b = Vector::from_fn(rows, |_, _| r.random_range(0.2..1.5));
    let mut lower = Vector::from_element(d, f64::NEG_INFINITY);
    let mut upper = Vector::from_element(d, f64::INFINITY);
    let mut oracle_rows: Vec<(Vec<f64>, f64)> = (0..rows).map(|j| (a.row(j).iter().copied().collect(), b[j])).collect();
    for k in 0..d {
        if oracle_rows.len() < 10 && r.random_bool(0.6) {
            let beta = r.random_range(0.3..1.5);
            upper[k] = beta;
            lower[k] = -beta;
            let mut e = vec![0.0; d];
            e[k] = 1.0;
            oracle_rows.push((e.clone(), beta));
            e[k] = -1.0;
            oracle_rows.push((e, beta));
        }
    }
    let oa = Mat::from_fn(oracle_rows.len(), d, |i, j| oracle_rows[i].0[j]);
    let ob = Vector::from_iterator(oracle_rows.len(), oracle_rows.iter().map(|r| r.1));
    (AffineVi::new(m, w, lower, upper, a, b, None), oa, ob)
}

#[test]
fn matches_active_set_enumeration() {
    let mut r = rng(7);
    for case in 0..200 {
        let (vi, oa, ob) = random_small_vi(&mut r);
        let expect = enumeration_oracle(&vi.m, &vi.w, &oa, &ob).expect("strongly monotone VI has a solution");
        let res = solve_affine_vi(&vi, None, ViOptions::default()).unwrap();
        assert!(res.converged && (&res.u - &expect).amax() < 1e-7, "case {case}: {} vs {}", res.u, expect);
        let plain = solve_affine_vi(&vi, None, ViOptions { polish: false, tol: 1e-11, ..ViOptions::default() }).unwrap();
        assert!(plain.converged && (&plain.u - &expect).amax() < 1e-7, "case {case} without polishing");
    }
}

#[test]
fn extragradient_on_merely_monotone_problem() {
    // Rotation field over a box: monotone but not strongly monotone.
    let m = Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    let w = Vector::from_vec(vec![2.0, -0.5]);
    let vi = AffineVi::new(m, w, Vector::from_element(2, -1.0), Vector::from_element(2, 1.0), Mat::zeros(0, 2), Vector::zeros(0), None);
    let res = solve_affine_vi(&vi, None, ViOptions { polish: false, ..ViOptions::default() }).unwrap();
    assert!(res.converged && res.residual <= 1e-8);
    let f = vi.operator(&res.u);
    for v in [[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]] {
        let v = Vector::from_vec(v.to_vec());
        assert!(f.dot(&(v - &res.u)) >= -1e-7);
    }
}

#[test]
fn scalar_box_clamps() {
    for (w, rho, beta) in [(-10.0, 2.0, 1.5), (1.0, 4.0, 1.0), (3.0, 0.5, 2.0)] {
        let vi = AffineVi::new(
            Mat::from_element(1, 1, rho),
            Vector::from_element(1, w),
            Vector::from_element(1, -beta),
            Vector::from_element(1, beta),
            Mat::zeros(0, 1),
            Vector::zeros(0),
            None,
        );
        let res = solve_affine_vi(&vi, None, ViOptions::default()).unwrap();
        assert!((res.u[0] - (-w / rho).clamp(-beta, beta)).abs() < 1e-12);
    }
}

#[test]
fn invalid_step_and_infeasible_sets() {
    let g = scalar_game(1.0, 1, 1);
    let mut spec = ConstraintSpec::unconstrained(&g);
    spec.state = Polytope { a: Mat::from_element(1, 1, 1.0), b: Vector::from_element(1, 1.0) };
    spec.input_boxes = vec![InputBox::symmetric(1, 1.0)];
    let vi = build_vi(&g, ValueSource::None, &spec, None).unwrap();
    let e = solve_vi(&vi, &Vector::from_element(1, 10.0), None, ViOptions::default()).unwrap_err();
    assert!(matches!(e, Error::Infeasible(_)));
    let e = solve_vi(&vi, &Vector::from_element(1, 0.5), None, ViOptions { step: Some(-1.0), ..ViOptions::default() }).unwrap_err();
    assert!(matches!(e, Error::Invalid { .. }));
    assert!(solve_vi(&vi, &Vector::from_element(1, 0.5), None, ViOptions::default()).unwrap().converged);
}

#[test]
fn max_iter_returns_best_iterate() {
    let mut r = rng(8);
    let (vi, _, _) = (0..).map(|_| random_small_vi(&mut r)).find(|(vi, _, _)| vi.dim() >= 3).unwrap();
    let res = solve_affine_vi(&vi, None, ViOptions { polish: false, max_iter: 3, polish_every: 1, ..ViOptions::default() }).unwrap();
    assert!(!res.converged && res.iterations == 3 && res.residual.is_finite());
}

#[test]
fn shifted_start_on_unconstrained_scalar_game() {
    let g = scalar_game(1.0, 2, 1);
    let (vi, sol) = unconstrained_olne_vi(&g);
    let x0 = Vector::from_element(1, 2.0);
    let res = solve_vi(&vi, &x0, None, ViOptions::default()).unwrap();
    let x_term = vi.predict(&x0, &res.u).pop().unwrap();
    let shifted = shifted_warm_start(&vi, &res.u, &sol.k_ol, &x_term);
    for i in 0..2 {
        assert!((shifted[i] - (&sol.k_ol[i] * &x_term)[0]).abs() < 1e-15);
    }
    let x1 = g.step(&x0, &vi.first_input(&res.u));
    assert!(vi.instantiate(&x1).natural_residual(&shifted).unwrap() <= 1e-8);

    let g = scalar_game(1.0, 2, 5);
    let (vi, sol) = unconstrained_olne_vi(&g);
    let res = solve_vi(&vi, &x0, None, ViOptions::default()).unwrap();
    let x_term = vi.predict(&x0, &res.u).pop().unwrap();
    let shifted = shifted_warm_start(&vi, &res.u, &sol.k_ol, &x_term);
    for i in 0..2 {
        for s in 0..4 {
            assert_eq!(shifted[vi.index(i, s)], res.u[vi.index(i, s + 1)]);
        }
    }
    let x1 = g.step(&x0, &vi.first_input(&res.u));
    assert!(vi.instantiate(&x1).natural_residual(&shifted).unwrap() <= 1e-8);
}

#[test]
fn platooning_warm_start_invariance() {
    let f = platoon(4);
    let (g, spec) = (&f.platoon.game, &f.platoon.constraints);
    let vi = build_vi(g, ValueSource::Olne { sol: &f.sol, ctg: &f.ctg }, spec, None).unwrap();
    assert!(diagnose_monotonicity(&vi).strongly_monotone);
    let x0 = platooning_x0(&f.platoon.params).unwrap();
    let first = solve_vi(&vi, &x0, None, ViOptions::default()).unwrap();
    let inst = vi.instantiate(&x0);
    assert!(inst.violation(&first.u) <= 1e-9);
    // Input bounds are active in the first solution.
    assert!((0..vi.dim()).any(|k| (first.u[k].abs() - 4.0).abs() < 1e-9));
    let plain = solve_vi(&vi, &x0, None, ViOptions { polish: false, tol: 1e-10, ..ViOptions::default() }).unwrap();
    assert!((&plain.u - &first.u).amax() <= 1e-7);

    let x_term = vi.predict(&x0, &first.u).pop().unwrap();
    let shifted = shifted_warm_start(&vi, &first.u, &f.sol.k_ol, &x_term);
    let x1 = g.step(&x0, &vi.first_input(&first.u));
    let cold = solve_vi(&vi, &x1, None, ViOptions::default()).unwrap();
    let warm = solve_vi(&vi, &x1, Some(&shifted), ViOptions::default()).unwrap();
    assert!((&cold.u - &warm.u).amax() <= 1e-7);
}

#[test]
fn terminal_ellipsoid_constraint() {
    let f = platoon(4);
    let (g, spec) = (&f.platoon.game, &f.platoon.constraints);
    let ts = compute_terminal_set(&f.sol.abar_ol, spec, &f.sol.k_ol, None).unwrap();
    let vi = build_vi(g, ValueSource::Olne { sol: &f.sol, ctg: &f.ctg }, spec, Some(&ts)).unwrap();
    let base = platooning_x0(&f.platoon.params).unwrap();
    let mut active = None;
    for k in 1..=20 {
        let x0 = &base * (k as f64 / 20.0);
        match solve_vi(&vi, &x0, None, ViOptions::default()) {
            Ok(res) if res.terminal_multiplier > 0.0 => active = Some((x0, res)),
            Ok(_) => {}
            Err(Error::Infeasible(_)) => break,
            Err(e) => panic!("{e}"),
        }
    }
    let (x0, res) = active.expect("some scaled start makes the terminal constraint bind");
    let inst = vi.instantiate(&x0);
    let ell = inst.ellipsoid.as_ref().unwrap();
    assert!(res.converged && ell.value(&res.u).abs() <= 1e-9 * ell.level);
    assert!(ts.membership(&vi.predict(&x0, &res.u).pop().unwrap()).inside);

    let plain = solve_vi(&vi, &x0, None, ViOptions { polish: false, tol: 1e-10, ..ViOptions::default() }).unwrap();
    assert!(plain.converged && (&plain.u - &res.u).amax() <= 1e-6);

    // Variational inequality against sampled feasible points.
    let fu = inst.operator(&res.u);
    let mut r = rng(10);
    for _ in 0..50 {
        let v = inst.project(&(&res.u + vec(&mut r, vi.dim(), 3.0))).unwrap();
        assert!(inst.violation(&v) <= 1e-9);
        assert!(fu.dot(&(&v - &res.u)) >= -1e-7);
    }
}

#[test]
fn surrogate_closed_form_solution() {
    let g = scalar_game(1.0, 2, 4);
    let cl = solve_clne(&g, ClneMethod::LyapunovRecursion, None, IterOptions::default()).unwrap();
    assert_eq!(surrogate_clne_residual(&g, &cl, &Vector::zeros(1), 4).unwrap(), 0.0);
    assert!(surrogate_clne_residual(&g, &cl, &Vector::from_element(1, 1.0), 4).unwrap() <= 1e-9);

    let f = platoon(4);
    let g = &f.platoon.game;
    let cl = solve_clne(g, ClneMethod::LyapunovRecursion, None, IterOptions::default()).unwrap();
    let mut r = rng(11);
    for t in 1..=5 {
        let x0 = vec(&mut r, 8, 5.0);
        assert!(surrogate_clne_residual(g, &cl, &x0, t).unwrap() <= 1e-7 * (1.0 + x0.norm()));
    }
    // With one step the surrogate game is the Bellman minimisation.
    let g1 = g.with_horizon(1);
    let vi = build_vi(&g1, ValueSource::Clne(&cl), &ConstraintSpec::unconstrained(&g1), None).unwrap();
    let x0 = vec(&mut r, 8, 5.0);
    let res = solve_vi(&vi, &x0, None, ViOptions::default()).unwrap();
    for i in 0..4 {
        let b = bellman_check_cl(&cl, &g1, i, &x0).unwrap();
        assert!((res.u[i] - b.argmin[0]).abs() <= 1e-8 * (1.0 + x0.norm()));
    }
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_idempotent_and_nonexpansive(seed in 0u64..1_000_000) {
        let mut r = rng(seed);
        let (vi, _, _) = random_small_vi(&mut r);
        let d = vi.dim();
        let (a, b) = (vec(&mut r, d, 5.0), vec(&mut r, d, 5.0));
        let (pa, pb) = (vi.project(&a).unwrap(), vi.project(&b).unwrap());
        proptest::prop_assert!(vi.violation(&pa) <= 1e-9);
        proptest::prop_assert!((vi.project(&pa).unwrap() - &pa).amax() <= 1e-10);
        proptest::prop_assert!((&pa - &pb).norm() <= (&a - &b).norm() + 1e-9);
    }

    #[test]
    fn solution_satisfies_variational_inequality(seed in 0u64..1_000_000) {
        let mut r = rng(seed);
        let (vi, _, _) = random_small_vi(&mut r);
        let res = solve_affine_vi(&vi, None, ViOptions::default()).unwrap();
        proptest::prop_assert!(res.converged && vi.violation(&res.u) <= 1e-9);
        let f = vi.operator(&res.u);
        for _ in 0..10 {
            let v = vi.project(&vec(&mut r, vi.dim(), 5.0)).unwrap();
            proptest::prop_assert!(f.dot(&(v - &res.u)) >= -1e-8 * (1.0 + f.norm()));
        }
    }
}
