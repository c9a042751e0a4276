#![allow(dead_code)]

use dyngame_core::game::{build_platooning, GameDefinition, Platoon, PlatoonParams};
use dyngame_core::matrix_eq::spectral_radius;
use dyngame_core::olne::{build_cost_to_go, solve_olne, AugmentedCostToGo, IterOptions, OlNeSolution};
use dyngame_core::{Mat, Vector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

pub fn vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vector {
    Vector::from_fn(n, |_, _| scale * rng.random_range(-1.0..1.0))
}

/// Random matrix rescaled to the given spectral radius.
pub fn with_radius(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> Mat {
    loop {
        let a = mat(rng, n, n);
        let rho = spectral_radius(&a).unwrap();
        if rho > 1e-3 {
            return a * (radius / rho);
        }
    }
}

pub fn spd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> Mat {
    let c = mat(rng, n, n);
    c.transpose() * c * 0.5 + Mat::identity(n, n) * shift
}

/// Random game with `A` of spectral radius `radius` and positive definite weights.
pub fn random_game(rng: &mut ChaCha8Rng, n: usize, m: usize, agents: usize, radius: f64, horizon: usize) -> GameDefinition {
    let a = with_radius(rng, n, radius);
    let b = (0..agents).map(|_| mat(rng, n, m)).collect();
    let q = (0..agents).map(|_| spd(rng, n, 0.2)).collect();
    let r = (0..agents).map(|_| spd(rng, m, 0.5)).collect();
    GameDefinition::new(a, b, q, r, horizon).unwrap()
}

pub fn scalar_game(a: f64, agents: usize, horizon: usize) -> GameDefinition {
    let one = Mat::identity(1, 1);
    GameDefinition::new(Mat::from_element(1, 1, a), vec![one.clone(); agents], vec![one.clone(); agents], vec![one; agents], horizon).unwrap()
}

pub struct PlatoonFixture {
    pub platoon: Platoon,
    pub sol: OlNeSolution,
    pub ctg: AugmentedCostToGo,
}

pub fn platoon(vehicles: usize) -> PlatoonFixture {
    let platoon = build_platooning(&PlatoonParams::new(vehicles)).unwrap();
    let sol = solve_olne(&platoon.game, None, IterOptions::default()).unwrap();
    let ctg = build_cost_to_go(&platoon.game, &sol).unwrap();
    PlatoonFixture { platoon, sol, ctg }
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}
