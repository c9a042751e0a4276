//! Closed-loop Nash equilibrium of the unconstrained infinite-horizon game.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::game::GameDefinition;
use crate::linalg::{asymmetry, inverse, solve, symmetrize};
use crate::matrix_eq::{ensure_schur, is_detectable, is_stabilizable, solve_dare, solve_dlyap};
use crate::olne::{initial_gains, IterOptions};
use crate::{Error, Mat, Result, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClneMethod {
    /// Per-agent Riccati solves against the opponents' current feedback.
    RiccatiRecursion,
    /// Lyapunov solves with the weights `Qᵢ + KᵢᵀRᵢKᵢ`.
    #[default]
    LyapunovRecursion,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClNeSolution {
    pub p_cl: Vec<Mat>,
    pub k_cl: Vec<Mat>,
    pub abar_cl: Mat,
    /// `Ā − BᵢKᵢ`: the closed loop seen by agent i.
    pub abar_cl_minus: Vec<Mat>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub method: ClneMethod,
}

/// (A, [B₁ … B_N]) stabilizable and (A, ΣQᵢ) detectable.
pub fn closed_loop_assumptions(game: &GameDefinition) -> Result<(bool, bool)> {
    let q: Mat = game.q.iter().fold(Mat::zeros(game.n(), game.n()), |acc, q| acc + q);
    Ok((is_stabilizable(&game.a, &game.b_row())?, is_detectable(&game.a, &q)?))
}

fn opponents_loop(game: &GameDefinition, k: &[Mat], i: usize) -> Mat {
    let mut out = game.a.clone();
    for (j, (b, kj)) in game.b.iter().zip(k).enumerate() {
        if j != i {
            out += b * kj;
        }
    }
    out
}

/// Residual of `Pᵢ = Qᵢ + Ā₋ᵢᵀPᵢĀ` with `Kᵢ = −Rᵢ⁻¹BᵢᵀPᵢĀ`.
fn residuals(game: &GameDefinition, p: &[Mat], abar: &Mat, minus: &[Mat]) -> Vec<f64> {
    (0..game.agents())
        .map(|i| (&p[i] - &game.q[i] - minus[i].transpose() * &p[i] * abar).norm())
        .collect()
}

fn finish(game: &GameDefinition, p: Vec<Mat>, k: Vec<Mat>, iterations: usize, method: ClneMethod) -> Result<ClNeSolution> {
    let abar_cl = game.closed_loop(&k);
    ensure_schur(&abar_cl, "closed-loop equilibrium")?;
    let abar_cl_minus: Vec<Mat> = (0..game.agents()).map(|i| opponents_loop(game, &k, i)).collect();
    let residuals = residuals(game, &p, &abar_cl, &abar_cl_minus);
    Ok(ClNeSolution { p_cl: p, k_cl: k, abar_cl, abar_cl_minus, residuals, iterations, method })
}

fn check_symmetry(p: &[Mat]) -> Result<()> {
    for (i, pi) in p.iter().enumerate() {
        let asym = asymmetry(pi);
        if asym > 1e-9 * pi.norm().max(f64::MIN_POSITIVE) {
            return Err(Error::Verification(format!("P_{} lost symmetry ({asym:.3e})", i + 1)));
        }
    }
    Ok(())
}

fn relative_change(new: &[Mat], old: &[Mat]) -> f64 {
    new.iter().zip(old).map(|(p, q)| (p - q).norm() / (1.0 + q.norm())).fold(0.0, f64::max)
}

pub fn solve_clne(game: &GameDefinition, method: ClneMethod, k0: Option<&[Mat]>, opts: IterOptions) -> Result<ClNeSolution> {
    let (n, nag) = (game.n(), game.agents());
    let mut k = match k0 {
        Some(k) => {
            if k.len() != nag || k.iter().any(|ki| ki.shape() != (game.m(), n)) {
                return Err(Error::dim("initial gains"));
            }
            k.to_vec()
        }
        None => initial_gains(game)?,
    };
    ensure_schur(&game.closed_loop(&k), "initial closed-loop gains")?;
    let r_inv: Vec<Mat> = game.r.iter().map(|r| inverse(r, "R")).collect::<Result<_>>()?;
    let s: Vec<Mat> = (0..nag).map(|i| game.s(i)).collect();
    let eye = Mat::identity(n, n);
    let mut p_prev: Option<Vec<Mat>> = None;
    let mut history = Vec::new();

    for iter in 1..=opts.max_iter {
        let p: Vec<Mat> = match method {
            ClneMethod::LyapunovRecursion => {
                let abar = game.closed_loop(&k);
                ensure_schur(&abar, "closed-loop Lyapunov recursion")?;
                let p: Vec<Mat> = (0..nag)
                    .map(|i| solve_dlyap(&abar, &(&game.q[i] + k[i].transpose() * &game.r[i] * &k[i])))
                    .collect::<Result<_>>()?;
                let coupling = p.iter().zip(&s).fold(eye.clone(), |acc, (pj, sj)| acc + sj * pj);
                let next = solve(&coupling, &game.a, "I + Σ SⱼPⱼ")?;
                k = (0..nag).map(|i| -(&r_inv[i] * game.b[i].transpose() * &p[i] * &next)).collect();
                p
            }
            ClneMethod::RiccatiRecursion => {
                let mut p = Vec::with_capacity(nag);
                for i in 0..nag {
                    let minus = opponents_loop(game, &k, i);
                    let (pi, ki) = solve_dare(&minus, &game.b[i], &game.q[i], &game.r[i])?;
                    k[i] = ki;
                    p.push(symmetrize(&pi));
                }
                p
            }
        };
        check_symmetry(&p)?;
        let change = p_prev.as_ref().map_or(f64::INFINITY, |old| relative_change(&p, old));
        history.push(change);
        if change < opts.tol {
            debug!("closed-loop recursion ({method:?}) converged in {iter} iterations");
            return finish(game, p, k, iter, method);
        }
        p_prev = Some(p);
    }
    Err(Error::NoConvergence {
        solver: format!("closed-loop {method:?}"),
        iterations: opts.max_iter,
        residual: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

#[derive(Debug, Clone)]
pub struct BellmanCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub argmin: Vector,
}

/// `½‖x‖²_{Pᵢ}` against `min_u ℓᵢ(x,u) + ½‖Ā₋ᵢx + Bᵢu‖²_{Pᵢ}`.
pub fn bellman_check_cl(sol: &ClNeSolution, game: &GameDefinition, i: usize, x: &Vector) -> Result<BellmanCheck> {
    let (p, b, r) = (&sol.p_cl[i], &game.b[i], &game.r[i]);
    let minus = &sol.abar_cl_minus[i];
    let lhs = 0.5 * x.dot(&(p * x));
    let gram = r + b.transpose() * p * b;
    let rhs_vec = -(b.transpose() * p * minus * x);
    let argmin = gram.lu().solve(&rhs_vec).ok_or_else(|| Error::Singular("Bellman normal equations".into()))?;
    let next = minus * x + b * &argmin;
    let rhs = 0.5 * (x.dot(&(&game.q[i] * x)) + argmin.dot(&(r * &argmin)) + next.dot(&(p * &next)));
    Ok(BellmanCheck { lhs, rhs, argmin })
}
