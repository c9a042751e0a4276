mod common;

use common::*;
use dyngame_core::game::*;
use dyngame_core::matrix_eq::spectrum;
use dyngame_core::{Mat, Vector};
use proptest::prelude::*;

#[test]
fn propagate_matches_hand_loop_on_platoon() {
    let p = build_platooning(&PlatoonParams::new(3)).unwrap();
    let g = &p.game;
    let mut r = rng(3);
    let x0 = vec(&mut r, g.n(), 2.0);
    let u: Vec<Vector> = (0..5).map(|_| vec(&mut r, 3, 1.0)).collect();
    let xs = propagate(g, &x0, &u).unwrap();
    assert_eq!(xs.len(), 6);
    let mut x = x0.clone();
    for (t, ut) in u.iter().enumerate() {
        let mut next = Vector::zeros(g.n());
        for row in 0..g.n() {
            let mut acc = 0.0;
            for col in 0..g.n() {
                acc += g.a[(row, col)] * x[col];
            }
            for i in 0..3 {
                acc += g.b[i][(row, 0)] * ut[i];
            }
            next[row] = acc;
        }
        x = next;
        assert!((&xs[t + 1] - &x).norm() <= 1e-14 * (1.0 + x.norm()));
    }
}

#[test]
fn propagate_trivial_cases() {
    let g = GameDefinition::new(Mat::identity(2, 2), vec![Mat::identity(2, 2)], vec![Mat::identity(2, 2)], vec![Mat::identity(2, 2)], 1).unwrap();
    let v = Vector::from_vec(vec![0.5, -1.0]);
    let x0 = Vector::from_vec(vec![1.0, 2.0]);
    assert_eq!(propagate(&g, &x0, std::slice::from_ref(&v)).unwrap()[1], &x0 + &v);
    let zeros = propagate(&g, &Vector::zeros(2), &vec![Vector::zeros(2); 4]).unwrap();
    assert!(zeros.iter().all(|x| x.norm() == 0.0));
    assert!(propagate(&g, &x0, &[Vector::zeros(3)]).is_err());
}

#[test]
fn stage_cost_matches_independent_quadratic_form() {
    let mut r = rng(5);
    let g = random_game(&mut r, 3, 2, 2, 0.9, 1);
    for _ in 0..50 {
        let x = vec(&mut r, 3, 3.0);
        let u = vec(&mut r, 2, 3.0);
        for i in 0..2 {
            let mut expect = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    expect += x[a] * g.q[i][(a, b)] * x[b];
                }
            }
            for a in 0..2 {
                for b in 0..2 {
                    expect += u[a] * g.r[i][(a, b)] * u[b];
                }
            }
            assert!(rel(stage_cost(&g, i, &x, &u).unwrap(), 0.5 * expect) < 1e-14);
        }
    }
}

#[test]
fn weights_are_validated() {
    let one = Mat::identity(1, 1);
    let neg = Mat::from_element(1, 1, -1.0);
    let e = GameDefinition::new(one.clone(), vec![one.clone()], vec![neg], vec![one.clone()], 1).unwrap_err();
    assert!(e.to_string().contains("Q not positive semidefinite"));
    let e = GameDefinition::new(one.clone(), vec![one.clone()], vec![one.clone()], vec![Mat::zeros(1, 1)], 1).unwrap_err();
    assert!(e.to_string().contains("R[0]") && e.to_string().contains("R not positive definite"));
    assert!(GameDefinition::new(one.clone(), vec![one.clone()], vec![one.clone()], vec![one.clone()], 0).is_err());
    assert!(GameDefinition::new(one.clone(), vec![Mat::identity(2, 1)], vec![one.clone()], vec![one], 1).is_err());
}

#[test]
fn platooning_structure() {
    let p = build_platooning(&PlatoonParams::new(4)).unwrap();
    let g = &p.game;
    assert_eq!((g.n(), g.m(), g.agents()), (8, 1, 4));
    let b1 = &g.b[0];
    assert_eq!((b1[(0, 0)], b1[(1, 0)]), (0.0, -0.1));
    assert!((b1[(2, 0)] - 0.005).abs() < 1e-15 && (b1[(3, 0)] - 0.1).abs() < 1e-15);
    assert!((4..8).all(|r| b1[(r, 0)] == 0.0));
    let bn = &g.b[3];
    assert!((bn[(6, 0)] + 0.055).abs() < 1e-15 && (bn[(7, 0)] + 0.1).abs() < 1e-15);
    assert!((0..6).all(|r| bn[(r, 0)] == 0.0));
    assert_eq!(p.a_open.view((0, 0), (2, 2)), Mat::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]));
    assert_eq!(p.a_open.view((2, 2), (2, 2)), Mat::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]));
    assert_eq!(p.k_stab[1].row(0).iter().copied().collect::<Vec<_>>(), [0.0, 0.0, -1.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
    assert!(spectrum(&g.a).unwrap().is_schur);
    for nv in [2, 3, 5] {
        let p = build_platooning(&PlatoonParams::new(nv)).unwrap();
        assert_eq!((p.game.n(), p.game.m()), (2 * nv, 1));
    }
    assert!(build_platooning(&PlatoonParams::new(1)).is_err());
}

#[test]
fn platooning_rows_encode_physical_limits() {
    let p = build_platooning(&PlatoonParams::new(3)).unwrap();
    let spec = &p.constraints;
    let rep = feasible(spec, &Vector::zeros(6), &Vector::zeros(3));
    assert!(rep.state_slack.iter().chain(&rep.box_slack).all(|s| *s > 0.0));
    // Gap at exactly the safety distance is on the boundary.
    let x = p.state_from_physical(&[20.0, 20.0, 20.0], &[0.0, 4.0, 20.0]);
    assert!(feasible(spec, &x, &Vector::zeros(3)).max_state_violation.abs() < 1e-12);
    let x = p.state_from_physical(&[20.0, 31.0, 20.0], &[0.0, 20.0, 20.0]);
    assert!((feasible(spec, &x, &Vector::zeros(3)).max_state_violation - 1.0).abs() < 1e-12);
    let x = p.state_from_physical(&[21.0, 19.0, 23.0], &[0.0, 15.0, 17.0]);
    let v = p.velocities(&x);
    assert!((v[0] - 21.0).abs() < 1e-12 && (v[1] - 19.0).abs() < 1e-12 && (v[2] - 23.0).abs() < 1e-12);
    let pos = p.positions(&x);
    assert!((pos[1] + 15.0).abs() < 1e-12 && (pos[2] + 32.0).abs() < 1e-12);
}

#[test]
fn origin_violating_spec_is_rejected() {
    let g = scalar_game(0.5, 1, 1);
    let mut spec = ConstraintSpec::unconstrained(&g);
    spec.state = Polytope { a: Mat::from_element(1, 1, 1.0), b: Vector::from_element(1, 0.0) };
    assert!(spec.validate(&g).is_err());
    spec.state = Polytope { a: Mat::zeros(1, 1), b: Vector::from_element(1, 1.0) };
    assert!(spec.validate(&g).is_err());
}

proptest! {
    #[test]
    fn stage_cost_nonnegative(seed in 0u64..10_000, scale in 0.1f64..100.0) {
        let mut r = rng(seed);
        let g = random_game(&mut r, 3, 2, 1, 0.9, 1);
        let x = vec(&mut r, 3, scale);
        let u = vec(&mut r, 2, scale);
        prop_assert!(stage_cost(&g, 0, &x, &u).unwrap() >= 0.0);
    }

    #[test]
    fn validated_specs_are_strictly_feasible_at_origin(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let g = random_game(&mut r, 3, 1, 2, 0.9, 1);
        let mut spec = ConstraintSpec::unconstrained(&g);
        spec.state = Polytope { a: mat(&mut r, 4, 3), b: vec(&mut r, 4, 1.0) };
        spec.coupling = Polytope { a: mat(&mut r, 2, 2), b: vec(&mut r, 2, 1.0) };
        if spec.validate(&g).is_ok() {
            let rep = feasible(&spec, &Vector::zeros(3), &Vector::zeros(2));
            prop_assert!(rep.state_slack.iter().chain(&rep.coupling_slack).all(|s| *s > 0.0));
        }
    }
}
