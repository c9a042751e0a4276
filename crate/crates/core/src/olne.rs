//! Open-loop Nash equilibrium of the unconstrained infinite-horizon game and
//! the augmented-LQR cost-to-go built from it.

use log::debug;
use serde::Serialize;

use crate::game::GameDefinition;
use crate::linalg::{blkdiag, hstack, inverse, min_eig_sym, solve, symmetrize, vstack};
use crate::matrix_eq::{
    eigenvalues, ensure_schur, is_detectable, is_stabilizable, solve_dare, solve_dlyap, solve_stein, solve_sylvester_stein,
    spectrum, stein_residual, EPS_SCHUR,
};
use crate::{Error, Mat, Result, Vector};

/// Rank tolerance of the complementarity test.
pub const COMPLEMENTARITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub a_invertible: bool,
    pub stabilizable: Vec<bool>,
    pub detectable: Vec<bool>,
    /// Only formed when `A` is invertible.
    pub h: Option<Mat>,
    pub stable_eig_count: usize,
    pub complementarity_ok: bool,
    /// Some eigenvalue lies within the Schur margin of the unit circle, so the
    /// stable count is not decided.
    pub ambiguous: bool,
    pub overall: bool,
}

impl AssumptionReport {
    /// Names of the failing checks.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.a_invertible {
            out.push("Assumption 2(i): A is singular".to_string());
        }
        for (i, ok) in self.stabilizable.iter().enumerate() {
            if !ok {
                out.push(format!("Assumption 2(ii): (A, B_{}) not stabilizable", i + 1));
            }
        }
        for (i, ok) in self.detectable.iter().enumerate() {
            if !ok {
                out.push(format!("Assumption 2(ii): (A, C_{}) not detectable", i + 1));
            }
        }
        if self.ambiguous {
            out.push("Assumption 3: eigenvalues on the unit circle, stable count ambiguous".to_string());
        }
        let n = self.h.as_ref().map(|h| h.nrows());
        if !self.ambiguous && !self.complementarity_ok {
            out.push(match n {
                Some(_) => format!("Assumption 3: {} stable eigenvalues or complementarity fails", self.stable_eig_count),
                None => format!("Assumption 3: stable subspace of dimension {} or complementarity fails", self.stable_eig_count),
            });
        }
        out
    }
}

/// The Hamiltonian-like matrix of the coupled open-loop conditions, for invertible `A`.
pub fn h_matrix(game: &GameDefinition) -> Result<Mat> {
    let (n, nag) = (game.n(), game.agents());
    let a_inv_t = inverse(&game.a, "A")?.transpose();
    let mut h = Mat::zeros((nag + 1) * n, (nag + 1) * n);
    let mut top_left = game.a.clone();
    for j in 0..nag {
        let sj = game.s(j);
        top_left += &sj * &a_inv_t * &game.q[j];
        h.view_mut((0, (j + 1) * n), (n, n)).copy_from(&(-(&sj * &a_inv_t)));
        h.view_mut(((j + 1) * n, 0), (n, n)).copy_from(&(-(&a_inv_t * &game.q[j])));
        h.view_mut(((j + 1) * n, (j + 1) * n), (n, n)).copy_from(&a_inv_t);
    }
    h.view_mut((0, 0), (n, n)).copy_from(&top_left);
    Ok(h)
}

/// Pencil `F − λE` with the same finite eigenvalues and eigenvectors as the
/// H matrix; well defined for singular `A`.
fn pencil(game: &GameDefinition) -> (Mat, Mat) {
    let (n, nag) = (game.n(), game.agents());
    let d = (nag + 1) * n;
    let mut e = Mat::identity(d, d);
    let mut f = Mat::identity(d, d);
    f.view_mut((0, 0), (n, n)).copy_from(&game.a);
    for j in 0..nag {
        e.view_mut((0, (j + 1) * n), (n, n)).copy_from(&game.s(j));
        e.view_mut(((j + 1) * n, (j + 1) * n), (n, n)).copy_from(&game.a.transpose());
        f.view_mut(((j + 1) * n, 0), (n, n)).copy_from(&(-&game.q[j]));
    }
    (e, f)
}

/// Matrix sign function by scaled Newton iteration.
fn matrix_sign(c: &Mat) -> Result<Mat> {
    let d = c.nrows();
    let mut s = c.clone();
    for _ in 0..200 {
        let inv = inverse(&s, "sign iteration")?;
        let lu = s.clone().lu();
        let log_det: f64 = (0..d).map(|i| lu.u()[(i, i)].abs().ln()).sum();
        let mu = (-log_det / d as f64).exp();
        let mu = if mu.is_finite() && mu > 0.0 { mu } else { 1.0 };
        let next = (&s * mu + inv / mu) * 0.5;
        let change = (&next - &s).norm();
        s = next;
        if change <= 1e-13 * s.norm() {
            // Unscaled polishing step.
            let inv = inverse(&s, "sign iteration")?;
            return Ok((&s + inv) * 0.5);
        }
    }
    Err(Error::NoConvergence {
        solver: "matrix sign iteration".into(),
        iterations: 200,
        residual: f64::NAN,
        history: Vec::new(),
    })
}

struct StableSubspace {
    count: usize,
    ambiguous: bool,
    basis: Option<Mat>,
}

fn stable_subspace(game: &GameDefinition) -> Result<StableSubspace> {
    let (e, f) = pencil(game);
    let d = e.nrows();
    // λ ↦ (λ+1)/(λ−1) sends the open unit disk to the open left half plane
    // and the pencil's infinite eigenvalues to 1.
    let fe = &f - &e;
    let Ok(c) = solve(&fe, &(&f + &e), "Cayley transform") else {
        return Ok(StableSubspace { count: 0, ambiguous: true, basis: None });
    };
    let mut count = 0;
    let mut ambiguous = false;
    for nu in eigenvalues(&c)? {
        let lam = (nu + 1.0) / (nu - 1.0);
        let modulus = if lam.is_finite() { lam.norm() } else { f64::INFINITY };
        if modulus < 1.0 - EPS_SCHUR {
            count += 1;
        } else if modulus <= 1.0 + EPS_SCHUR {
            ambiguous = true;
        }
    }
    if ambiguous || count == 0 {
        return Ok(StableSubspace { count, ambiguous, basis: None });
    }
    let sign = matrix_sign(&c)?;
    let proj = (Mat::identity(d, d) - sign) * 0.5;
    let svd = proj.svd(true, false);
    let u = svd.u.ok_or(Error::Eigensolver)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let rank = svd.singular_values.iter().filter(|&&s| s > 0.5).count();
    if rank != count {
        return Ok(StableSubspace { count, ambiguous: true, basis: None });
    }
    let basis = Mat::from_fn(d, count, |r, c| u[(r, order[c])]);
    Ok(StableSubspace { count, ambiguous, basis: Some(basis) })
}

pub fn check_assumptions(game: &GameDefinition) -> Result<AssumptionReport> {
    let n = game.n();
    let sv = game.a.clone().svd(false, false).singular_values;
    let a_invertible = sv.min() > COMPLEMENTARITY_TOL * sv.max().max(1.0);
    let mut stabilizable = Vec::new();
    let mut detectable = Vec::new();
    for i in 0..game.agents() {
        stabilizable.push(is_stabilizable(&game.a, &game.b[i])?);
        detectable.push(is_detectable(&game.a, &game.q[i])?);
    }
    let h = if a_invertible { Some(h_matrix(game)?) } else { None };
    let sub = stable_subspace(game)?;
    let complementarity_ok = !sub.ambiguous
        && sub.count == n
        && sub.basis.as_ref().is_some_and(|v| {
            let top = v.rows(0, n).into_owned();
            top.svd(false, false).singular_values.min() > COMPLEMENTARITY_TOL
        });
    let overall = a_invertible
        && stabilizable.iter().all(|&b| b)
        && detectable.iter().all(|&b| b)
        && complementarity_ok;
    Ok(AssumptionReport {
        a_invertible,
        stabilizable,
        detectable,
        h,
        stable_eig_count: sub.count,
        complementarity_ok,
        ambiguous: sub.ambiguous,
        overall,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct OlNeSolution {
    pub p_ol: Vec<Mat>,
    pub k_ol: Vec<Mat>,
    pub abar_ol: Mat,
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct IterOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IterOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 10_000 }
    }
}

fn split_rows(k: &Mat, agents: usize, m: usize) -> Vec<Mat> {
    (0..agents).map(|i| k.rows(i * m, m).into_owned()).collect()
}

/// Zero gains when `A` is Schur, otherwise the row blocks of the centralized
/// LQR gain for `(A, [B₁ … B_N])`, `Σ Qᵢ`, `blkdiag(Rᵢ)`.
pub fn initial_gains(game: &GameDefinition) -> Result<Vec<Mat>> {
    let (n, m, nag) = (game.n(), game.m(), game.agents());
    if spectrum(&game.a)?.is_schur {
        return Ok(vec![Mat::zeros(m, n); nag]);
    }
    let q: Mat = game.q.iter().fold(Mat::zeros(n, n), |acc, q| acc + q);
    let r_refs: Vec<&Mat> = game.r.iter().collect();
    let (_, k) = solve_dare(&game.a, &game.b_row(), &q, &blkdiag(&r_refs))?;
    Ok(split_rows(&k, nag, m))
}

fn relative_change(new: &[Mat], old: &[Mat]) -> f64 {
    new.iter()
        .zip(old)
        .map(|(p, q)| (p - q).norm() / (1.0 + q.norm()))
        .fold(0.0, f64::max)
}

/// Stein recursion: Pᵢ from `Pᵢ = Qᵢ + AᵀPᵢĀ`, then `Ā ← (I + ΣSⱼPⱼ)⁻¹A` and
/// `Kᵢ = −Rᵢ⁻¹BᵢᵀPᵢĀ`, until the relative change of every Pᵢ drops below tol.
pub fn solve_olne(game: &GameDefinition, k0: Option<&[Mat]>, opts: IterOptions) -> Result<OlNeSolution> {
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
    let mut abar = game.closed_loop(&k);
    ensure_schur(&abar, "initial open-loop closed loop")?;
    let s: Vec<Mat> = (0..nag).map(|i| game.s(i)).collect();
    let r_inv: Vec<Mat> = game.r.iter().map(|r| inverse(r, "R")).collect::<Result<_>>()?;
    let eye = Mat::identity(n, n);

    let mut p_prev: Option<Vec<Mat>> = None;
    let mut history = Vec::new();
    for iter in 1..=opts.max_iter {
        let p: Vec<Mat> = game.q.iter().map(|q| solve_stein(&game.a, &abar, q)).collect::<Result<_>>()?;
        let coupling = p.iter().zip(&s).fold(eye.clone(), |acc, (pj, sj)| acc + sj * pj);
        let next = solve(&coupling, &game.a, "I + Σ SⱼPⱼ")?;
        k = (0..nag).map(|i| -(&r_inv[i] * game.b[i].transpose() * &p[i] * &next)).collect();
        let change = p_prev.as_ref().map_or(f64::INFINITY, |old| relative_change(&p, old));
        history.push(change);
        abar = next;
        ensure_schur(&abar, "open-loop recursion")?;
        if change < opts.tol {
            let abar_ol = game.closed_loop(&k);
            let residuals = p.iter().zip(&game.q).map(|(pi, qi)| stein_residual(&game.a, &abar_ol, qi, pi)).collect();
            debug!("open-loop recursion converged in {iter} iterations");
            return Ok(OlNeSolution { p_ol: p, k_ol: k, abar_ol, residuals, iterations: iter });
        }
        p_prev = Some(p);
    }
    Err(Error::NoConvergence {
        solver: "open-loop Stein recursion".into(),
        iterations: opts.max_iter,
        residual: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

/// Lifted regulator of one agent with state `[x; y]`, where `y` replays the
/// opponents' equilibrium inputs.
#[derive(Debug, Clone, Serialize)]
pub struct AgentCostToGo {
    pub p_lqr: Mat,
    pub k_lqr: Mat,
    pub p_tilde: Mat,
    pub k_tilde: Mat,
    pub a_hat: Mat,
    pub b_hat: Mat,
    pub q_hat: Mat,
    pub p_hat: Mat,
    pub k_hat: Mat,
    pub are_residual: f64,
    pub min_eig: f64,
    pub closed_loop_radius: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AugmentedCostToGo {
    pub agents: Vec<AgentCostToGo>,
}

/// Residual of `P̂ = Q̂ + ÂᵀP̂(Â + B̂K̂)` with `K̂` recomputed from `P̂`.
pub fn augmented_are_residual(a_hat: &Mat, b_hat: &Mat, q_hat: &Mat, r: &Mat, p_hat: &Mat) -> Result<f64> {
    crate::matrix_eq::dare_residual(a_hat, b_hat, q_hat, r, p_hat)
}

pub fn build_cost_to_go(game: &GameDefinition, sol: &OlNeSolution) -> Result<AugmentedCostToGo> {
    let (n, m, nag) = (game.n(), game.m(), game.agents());
    let mut agents = Vec::with_capacity(nag);
    for i in 0..nag {
        let (bi, qi, ri) = (&game.b[i], &game.q[i], &game.r[i]);
        let (p_lqr, k_lqr) = solve_dare(&game.a, bi, qi, ri)?;
        let a_lqr = &game.a + bi * &k_lqr;
        let w = (0..nag).filter(|&j| j != i).fold(Mat::zeros(n, n), |acc, j| acc + &game.b[j] * &sol.k_ol[j]);
        let p_tilde = solve_sylvester_stein(&a_lqr, &sol.abar_ol, &(a_lqr.transpose() * &p_lqr * &w))?;
        let gram = ri + bi.transpose() * &p_lqr * bi;
        let k_tilde = -solve(&gram, &(bi.transpose() * (&p_tilde * &sol.abar_ol + &p_lqr * &w)), "R + BᵀPB")?;

        let a_hat = vstack(&[&hstack(&[&game.a, &w]), &hstack(&[&Mat::zeros(n, n), &sol.abar_ol])]);
        let b_hat = vstack(&[bi, &Mat::zeros(n, m)]);
        let q_hat = blkdiag(&[qi, &Mat::zeros(n, n)]);
        let k_hat = hstack(&[&k_lqr, &k_tilde]);
        let lifted = &a_hat + &b_hat * &k_hat;
        let full = solve_dlyap(&lifted, &(&q_hat + k_hat.transpose() * ri * &k_hat))?;
        let z = symmetrize(&full.view((n, n), (n, n)).into_owned());
        let p_hat = vstack(&[&hstack(&[&p_lqr, &p_tilde]), &hstack(&[&p_tilde.transpose(), &z])]);

        let are_residual = augmented_are_residual(&a_hat, &b_hat, &q_hat, ri, &p_hat)?;
        let min_eig = min_eig_sym(&p_hat);
        let closed_loop_radius = spectrum(&lifted)?.spectral_radius;
        let scale = 1.0 + p_hat.norm();
        if are_residual > 1e-8 * scale {
            return Err(Error::Verification(format!("agent {}: augmented Riccati residual {are_residual:.3e}", i + 1)));
        }
        if min_eig < -1e-8 * scale {
            return Err(Error::Verification(format!("agent {}: augmented value matrix has eigenvalue {min_eig:.3e}", i + 1)));
        }
        if closed_loop_radius >= 1.0 - EPS_SCHUR {
            return Err(Error::NotSchur { context: format!("agent {} lifted closed loop", i + 1), radius: closed_loop_radius });
        }
        agents.push(AgentCostToGo {
            p_lqr,
            k_lqr,
            p_tilde,
            k_tilde,
            a_hat,
            b_hat,
            q_hat,
            p_hat,
            k_hat,
            are_residual,
            min_eig,
            closed_loop_radius,
        });
    }
    Ok(AugmentedCostToGo { agents })
}

/// `Vᵢ(x, y) = ½[x; y]ᵀP̂ᵢ[x; y]`.
pub fn eval_v(ctg: &AugmentedCostToGo, i: usize, x: &Vector, y: &Vector) -> f64 {
    let p = &ctg.agents[i].p_hat;
    let n = x.len();
    let px = p.view((0, 0), (n, n)) * x + p.view((0, n), (n, n)) * y;
    let py = p.view((n, 0), (n, n)) * x + p.view((n, n), (n, n)) * y;
    0.5 * (x.dot(&px) + y.dot(&py))
}

/// One Bellman step of the lifted regulator at `(x, y)`.
#[derive(Debug, Clone)]
pub struct OlBellmanCheck {
    /// `Vᵢ(x, y)`.
    pub value: f64,
    /// `min_u ℓᵢ(x, u) + Vᵢ(Ax + Bᵢu + Σ_{j≠i}BⱼK_olⱼy, Ā_ol y)`.
    pub rhs: f64,
    pub argmin: Vector,
    /// `K_lqrᵢx + K̃ᵢy`.
    pub feedback: Vector,
}

pub fn bellman_check_ol(game: &GameDefinition, ctg: &AugmentedCostToGo, i: usize, x: &Vector, y: &Vector) -> Result<OlBellmanCheck> {
    let ag = &ctg.agents[i];
    let n = game.n();
    let mut z = Vector::zeros(2 * n);
    z.rows_mut(0, n).copy_from(x);
    z.rows_mut(n, n).copy_from(y);
    let r = &game.r[i];
    let gram = r + ag.b_hat.transpose() * &ag.p_hat * &ag.b_hat;
    let rhs_vec = -(ag.b_hat.transpose() * &ag.p_hat * &ag.a_hat * &z);
    let argmin = gram.lu().solve(&rhs_vec).ok_or_else(|| Error::Singular("Bellman normal equations".into()))?;
    let next = &ag.a_hat * &z + &ag.b_hat * &argmin;
    let (xn, yn) = (next.rows(0, n).into_owned(), next.rows(n, n).into_owned());
    let rhs = 0.5 * (x.dot(&(&game.q[i] * x)) + argmin.dot(&(r * &argmin))) + eval_v(ctg, i, &xn, &yn);
    Ok(OlBellmanCheck { value: eval_v(ctg, i, x, y), rhs, argmin, feedback: &ag.k_lqr * x + &ag.k_tilde * y })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64, agents: usize) -> GameDefinition {
        let one = Mat::identity(1, 1);
        GameDefinition::new(Mat::from_element(1, 1, a), vec![one.clone(); agents], vec![one.clone(); agents], vec![one; agents], 1).unwrap()
    }

    #[test]
    fn h_matrix_scalar_example() {
        let g = scalar(2.0, 1);
        let rep = check_assumptions(&g).unwrap();
        let h = rep.h.clone().unwrap();
        let expect = Mat::from_row_slice(2, 2, &[2.5, -0.5, -0.5, 0.5]);
        assert!((h - expect).norm() < 1e-14);
        assert_eq!(rep.stable_eig_count, 1);
        assert!(rep.complementarity_ok && rep.overall);
    }

    #[test]
    fn singular_a_is_reported() {
        let rep = check_assumptions(&scalar(0.0, 1)).unwrap();
        assert!(!rep.a_invertible && rep.h.is_none() && !rep.overall);
    }

    #[test]
    fn scalar_two_player_fixed_point() {
        let sol = solve_olne(&scalar(1.0, 2), None, IterOptions::default()).unwrap();
        let p = (1.0 + 3f64.sqrt()) / 2.0;
        for i in 0..2 {
            assert!((sol.p_ol[i][(0, 0)] - p).abs() < 1e-10);
            assert!((sol.k_ol[i][(0, 0)] + p / (1.0 + 2.0 * p)).abs() < 1e-10);
        }
        assert!((sol.abar_ol[(0, 0)] - 1.0 / (1.0 + 2.0 * p)).abs() < 1e-10);
    }
}
