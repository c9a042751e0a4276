//! The finite-horizon game as an affine variational inequality
//! `F(u | x₀) = Mu + w(x₀)` over a polyhedral (optionally ellipsoid-capped)
//! set, and a projected forward-backward solver for it.
//!
//! Decision vectors are stacked agent-major: `u = col(u₁, …, u_N)` with
//! `uᵢ = col(uᵢ[0], …, uᵢ[T−1])`.

use log::{debug, trace};
use serde::{Deserialize, Serialize};

use crate::clne::ClNeSolution;
use crate::game::{stage_cost, ConstraintSpec, GameDefinition};
use crate::linalg::{asymmetry, blkdiag, hstack, min_eig_sym, power_norm, quad, spectral_norm, symmetrize};
use crate::olne::{AugmentedCostToGo, OlNeSolution};
use crate::qp::solve_qp;
use crate::terminal::TerminalSet;
use crate::{Error, Mat, Result, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalKind {
    OlneTerminal,
    ClneSurrogate,
    NoTerminal,
}

/// Value matrices a VI is built from.
#[derive(Clone, Copy)]
pub enum ValueSource<'a> {
    Olne { sol: &'a OlNeSolution, ctg: &'a AugmentedCostToGo },
    Clne(&'a ClNeSolution),
    None,
}

/// Terminal cost used when evaluating an agent's objective.
#[derive(Debug, Clone, Serialize)]
pub enum TerminalValue {
    /// `Vᵢ(x_T, y_T)` with the lifted value matrices `P̂ᵢ`.
    Augmented(Vec<Mat>),
    /// `½x_TᵀPᵢx_T`.
    Quadratic(Vec<Mat>),
}

/// Agent i's prediction `Xᵢ = Θᵢx₀ + Σⱼ Gᵢⱼuⱼ` of the states `x[1..T]`.
#[derive(Debug, Clone, Serialize)]
pub struct AgentPrediction {
    pub theta: Mat,
    pub g: Vec<Mat>,
}

/// `‖x[T]‖²_P ≤ level` with `x[T] = Lu + Θ_T x₀`.
#[derive(Debug, Clone, Serialize)]
pub struct TerminalRow {
    pub l: Mat,
    pub theta_t: Mat,
    pub p: Mat,
    pub level: f64,
}

/// Bounds, linear rows `rows·u ≤ rhs_const + rhs_state·x₀` and an optional
/// terminal ellipsoid.
#[derive(Debug, Clone, Serialize)]
pub struct FeasibleSet {
    pub lower: Vector,
    pub upper: Vector,
    pub rows: Mat,
    pub rhs_const: Vector,
    pub rhs_state: Mat,
    pub terminal: Option<TerminalRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FiniteHorizonVi {
    pub kind: TerminalKind,
    pub horizon: usize,
    pub n: usize,
    pub m: usize,
    pub agents: usize,
    pub m_mat: Mat,
    /// `w(x₀) = w_map·x₀`.
    pub w_map: Mat,
    /// True-dynamics prediction matrices.
    pub gamma: Vec<Mat>,
    pub theta: Mat,
    pub q_bar: Vec<Mat>,
    pub r_bar: Vec<Mat>,
    pub prediction: Vec<AgentPrediction>,
    pub terminal_value: TerminalValue,
    pub feasible: FeasibleSet,
    q: Vec<Mat>,
    r: Vec<Mat>,
}

/// Block (r, c) maps u[c] to x[r+1] through `a^{r−c}·b`; with `only_first`
/// the input acts at step 0 only.
fn prediction_blocks(a: &Mat, b: &Mat, horizon: usize, only_first: bool) -> Mat {
    let (n, m) = (a.nrows(), b.ncols());
    let mut g = Mat::zeros(horizon * n, horizon * m);
    let mut powers = vec![Mat::identity(n, n)];
    for k in 1..horizon {
        powers.push(a * &powers[k - 1]);
    }
    for r in 0..horizon {
        for c in 0..=r {
            if only_first && c > 0 {
                break;
            }
            g.view_mut((r * n, c * m), (n, m)).copy_from(&(&powers[r - c] * b));
        }
    }
    g
}

fn theta_blocks(a_tail: &Mat, a_first: &Mat, horizon: usize) -> Mat {
    let n = a_first.nrows();
    let mut theta = Mat::zeros(horizon * n, n);
    let mut cur = a_first.clone();
    for r in 0..horizon {
        theta.view_mut((r * n, 0), (n, n)).copy_from(&cur);
        cur = a_tail * cur;
    }
    theta
}

fn block_weight(q: &Mat, terminal: &Mat, horizon: usize) -> Mat {
    let mut blocks: Vec<&Mat> = vec![q; horizon - 1];
    blocks.push(terminal);
    blkdiag(&blocks)
}

impl FiniteHorizonVi {
    /// Low-level constructor. `terminal_weights` are the last blocks of Q̄ᵢ;
    /// `surrogate_loops`, when given, are the matrices agent i assumes drive
    /// the state after the shared first step.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        game: &GameDefinition,
        kind: TerminalKind,
        terminal_weights: Vec<Mat>,
        surrogate_loops: Option<&[Mat]>,
        terminal_value: TerminalValue,
        spec: &ConstraintSpec,
        terminal_set: Option<&TerminalSet>,
    ) -> Result<Self> {
        let (n, m, nag, t) = (game.n(), game.m(), game.agents(), game.horizon);
        spec.validate(game)?;
        if terminal_weights.len() != nag || terminal_weights.iter().any(|p| p.shape() != (n, n)) {
            return Err(Error::dim("terminal weights"));
        }
        let theta = theta_blocks(&game.a, &game.a, t);
        let gamma: Vec<Mat> = game.b.iter().map(|b| prediction_blocks(&game.a, b, t, false)).collect();
        let prediction: Vec<AgentPrediction> = match surrogate_loops {
            None => (0..nag).map(|_| AgentPrediction { theta: theta.clone(), g: gamma.clone() }).collect(),
            Some(loops) => {
                if loops.len() != nag {
                    return Err(Error::dim("surrogate loops"));
                }
                (0..nag)
                    .map(|i| AgentPrediction {
                        theta: theta_blocks(&loops[i], &game.a, t),
                        g: (0..nag)
                            .map(|j| prediction_blocks(&loops[i], &game.b[j], t, j != i))
                            .collect(),
                    })
                    .collect()
            }
        };
        let q_bar: Vec<Mat> = (0..nag).map(|i| block_weight(&game.q[i], &terminal_weights[i], t)).collect();
        let r_bar: Vec<Mat> = game.r.iter().map(|r| blkdiag(&vec![r; t])).collect();

        let bs = t * m;
        let dim = nag * bs;
        let mut m_mat = Mat::zeros(dim, dim);
        let mut w_map = Mat::zeros(dim, n);
        for i in 0..nag {
            let pred = &prediction[i];
            let lead = pred.g[i].transpose() * &q_bar[i];
            for j in 0..nag {
                let mut block = &lead * &pred.g[j];
                if i == j {
                    block += &r_bar[i];
                }
                m_mat.view_mut((i * bs, j * bs), (bs, bs)).copy_from(&block);
            }
            w_map.view_mut((i * bs, 0), (bs, n)).copy_from(&(&lead * &pred.theta));
        }

        let feasible = Self::feasible_set(game, spec, &theta, &gamma, terminal_set)?;
        Ok(Self {
            kind,
            horizon: t,
            n,
            m,
            agents: nag,
            m_mat,
            w_map,
            gamma,
            theta,
            q_bar,
            r_bar,
            prediction,
            terminal_value,
            feasible,
            q: game.q.clone(),
            r: game.r.clone(),
        })
    }

    fn feasible_set(
        game: &GameDefinition,
        spec: &ConstraintSpec,
        theta: &Mat,
        gamma: &[Mat],
        terminal_set: Option<&TerminalSet>,
    ) -> Result<FeasibleSet> {
        let (n, m, nag, t) = (game.n(), game.m(), game.agents(), game.horizon);
        let dim = nag * t * m;
        let mut lower = Vector::zeros(dim);
        let mut upper = Vector::zeros(dim);
        for i in 0..nag {
            for s in 0..t {
                for k in 0..m {
                    let idx = (i * t + s) * m + k;
                    lower[idx] = spec.input_boxes[i].lower[k];
                    upper[idx] = spec.input_boxes[i].upper[k];
                }
            }
        }
        let refs: Vec<&Mat> = gamma.iter().collect();
        let gamma_row = hstack(&refs);
        let (sx, su) = (spec.state.rows(), spec.coupling.rows());
        let nrows = t * (sx + su);
        let mut rows = Mat::zeros(nrows, dim);
        let mut rhs_const = Vector::zeros(nrows);
        let mut rhs_state = Mat::zeros(nrows, n);
        let mut r0 = 0;
        for s in 0..t {
            if sx > 0 {
                let g_s = gamma_row.rows(s * n, n);
                rows.view_mut((r0, 0), (sx, dim)).copy_from(&(&spec.state.a * g_s));
                rhs_const.rows_mut(r0, sx).copy_from(&spec.state.b);
                rhs_state.view_mut((r0, 0), (sx, n)).copy_from(&(-(&spec.state.a * theta.rows(s * n, n))));
                r0 += sx;
            }
        }
        for s in 0..t {
            if su > 0 {
                for j in 0..su {
                    for i in 0..nag {
                        for k in 0..m {
                            rows[(r0 + j, (i * t + s) * m + k)] = spec.coupling.a[(j, i * m + k)];
                        }
                    }
                }
                rhs_const.rows_mut(r0, su).copy_from(&spec.coupling.b);
                r0 += su;
            }
        }
        let terminal = match terminal_set {
            Some(ts) => ts.level.map(|level| TerminalRow {
                l: gamma_row.rows((t - 1) * n, n).into_owned(),
                theta_t: theta.rows((t - 1) * n, n).into_owned(),
                p: ts.p_lyap.clone(),
                level,
            }),
            None => None,
        };
        Ok(FeasibleSet { lower, upper, rows, rhs_const, rhs_state, terminal })
    }

    pub fn dim(&self) -> usize {
        self.agents * self.horizon * self.m
    }

    pub fn index(&self, agent: usize, step: usize) -> usize {
        (agent * self.horizon + step) * self.m
    }

    pub fn offset(&self, x0: &Vector) -> Vector {
        &self.w_map * x0
    }

    pub fn operator(&self, u: &Vector, x0: &Vector) -> Vector {
        &self.m_mat * u + self.offset(x0)
    }

    pub fn agent_block(&self, u: &Vector, i: usize) -> Vector {
        let bs = self.horizon * self.m;
        u.rows(i * bs, bs).into_owned()
    }

    /// Stacked input of all agents at step `s`.
    pub fn input_at(&self, u: &Vector, s: usize) -> Vector {
        let mut out = Vector::zeros(self.agents * self.m);
        for i in 0..self.agents {
            let idx = self.index(i, s);
            out.rows_mut(i * self.m, self.m).copy_from(&u.rows(idx, self.m));
        }
        out
    }

    pub fn first_input(&self, u: &Vector) -> Vector {
        self.input_at(u, 0)
    }

    /// Stacks per-step inputs (each of length N·m) into the decision vector.
    pub fn stack(&self, steps: &[Vector]) -> Vector {
        let mut u = Vector::zeros(self.dim());
        for (s, us) in steps.iter().enumerate().take(self.horizon) {
            for i in 0..self.agents {
                let idx = self.index(i, s);
                u.rows_mut(idx, self.m).copy_from(&us.rows(i * self.m, self.m));
            }
        }
        u
    }

    /// True-dynamics states `x[0..=T]`.
    pub fn predict(&self, x0: &Vector, u: &Vector) -> Vec<Vector> {
        let refs: Vec<&Mat> = self.gamma.iter().collect();
        let x = &self.theta * x0 + hstack(&refs) * u;
        let mut out = vec![x0.clone()];
        for s in 0..self.horizon {
            out.push(x.rows(s * self.n, self.n).into_owned());
        }
        out
    }

    fn agent_states(&self, i: usize, x0: &Vector, u: &Vector) -> Vector {
        let pred = &self.prediction[i];
        let mut x = &pred.theta * x0;
        for j in 0..self.agents {
            x += &pred.g[j] * self.agent_block(u, j);
        }
        x
    }

    /// `Jᵢ(vᵢ | x₀, u)`: agent i's predicted cost of playing `vᵢ` against the
    /// others' blocks of `u`; the terminal second argument is the state `u` reaches.
    pub fn agent_cost(&self, i: usize, x0: &Vector, v_i: &Vector, u: &Vector) -> f64 {
        let bs = self.horizon * self.m;
        let mut dev = u.clone();
        dev.rows_mut(i * bs, bs).copy_from(v_i);
        let xs = self.agent_states(i, x0, &dev);
        let (n, m, t) = (self.n, self.m, self.horizon);
        let mut cost = 0.5 * quad(x0, &self.q[i]);
        for s in 0..t {
            let us = v_i.rows(s * m, m).into_owned();
            cost += 0.5 * quad(&us, &self.r[i]);
            if s + 1 < t {
                cost += 0.5 * quad(&xs.rows(s * n, n).into_owned(), &self.q[i]);
            }
        }
        let x_t = xs.rows((t - 1) * n, n).into_owned();
        cost += match &self.terminal_value {
            TerminalValue::Quadratic(p) => 0.5 * quad(&x_t, &p[i]),
            TerminalValue::Augmented(p_hat) => {
                let y = self.agent_states(i, x0, u).rows((t - 1) * n, n).into_owned();
                let mut z = Vector::zeros(2 * n);
                z.rows_mut(0, n).copy_from(&x_t);
                z.rows_mut(n, n).copy_from(&y);
                0.5 * quad(&z, &p_hat[i])
            }
        };
        cost
    }

    pub fn total_cost(&self, x0: &Vector, u: &Vector) -> f64 {
        (0..self.agents).map(|i| self.agent_cost(i, x0, &self.agent_block(u, i), u)).sum()
    }

    pub fn instantiate(&self, x0: &Vector) -> AffineVi {
        let f = &self.feasible;
        let ellipsoid = f.terminal.as_ref().map(|t| Ellipsoid { l: t.l.clone(), c: &t.theta_t * x0, p: t.p.clone(), level: t.level });
        AffineVi::new(
            self.m_mat.clone(),
            self.offset(x0),
            f.lower.clone(),
            f.upper.clone(),
            f.rows.clone(),
            &f.rhs_const + &f.rhs_state * x0,
            ellipsoid,
        )
    }
}

/// Builds the VI for the requested value source.
pub fn build_vi(game: &GameDefinition, source: ValueSource<'_>, spec: &ConstraintSpec, terminal: Option<&TerminalSet>) -> Result<FiniteHorizonVi> {
    match source {
        ValueSource::Olne { sol, ctg } => {
            let p_hat = ctg.agents.iter().map(|a| a.p_hat.clone()).collect();
            FiniteHorizonVi::assemble(game, TerminalKind::OlneTerminal, sol.p_ol.clone(), None, TerminalValue::Augmented(p_hat), spec, terminal)
        }
        ValueSource::Clne(cl) => FiniteHorizonVi::assemble(
            game,
            TerminalKind::ClneSurrogate,
            cl.p_cl.clone(),
            Some(&cl.abar_cl_minus),
            TerminalValue::Quadratic(cl.p_cl.clone()),
            spec,
            terminal,
        ),
        ValueSource::None => FiniteHorizonVi::assemble(
            game,
            TerminalKind::NoTerminal,
            game.q.clone(),
            None,
            TerminalValue::Quadratic(game.q.clone()),
            spec,
            terminal,
        ),
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MonotonicityReport {
    pub min_eig_sym: f64,
    pub strongly_monotone: bool,
    pub gerschgorin_bound: f64,
    pub max_block_asymmetry: f64,
}

/// Spectral and block-Gerschgorin monotonicity estimates of a block matrix
/// with `agents` equal diagonal blocks.
pub fn monotonicity(m: &Mat, agents: usize) -> MonotonicityReport {
    let bs = m.nrows() / agents.max(1);
    let min_eig = min_eig_sym(m);
    let mut bound = f64::INFINITY;
    let mut asym = 0.0f64;
    for i in 0..agents {
        let diag = m.view((i * bs, i * bs), (bs, bs)).into_owned();
        asym = asym.max(asymmetry(&diag));
        let mut est = min_eig_sym(&symmetrize(&diag));
        for j in 0..agents {
            if j != i {
                est -= spectral_norm(&m.view((i * bs, j * bs), (bs, bs)).into_owned());
            }
        }
        bound = bound.min(est);
    }
    MonotonicityReport { min_eig_sym: min_eig, strongly_monotone: min_eig > 1e-10, gerschgorin_bound: bound, max_block_asymmetry: asym }
}

pub fn diagnose_monotonicity(vi: &FiniteHorizonVi) -> MonotonicityReport {
    monotonicity(&vi.m_mat, vi.agents)
}

#[derive(Debug, Clone, Serialize)]
pub struct Ellipsoid {
    pub l: Mat,
    pub c: Vector,
    pub p: Mat,
    pub level: f64,
}

impl Ellipsoid {
    /// `‖Lu + c‖²_P − level`.
    pub fn value(&self, u: &Vector) -> f64 {
        quad(&(&self.l * u + &self.c), &self.p) - self.level
    }

    pub fn gradient(&self, u: &Vector) -> Vector {
        self.l.transpose() * (&self.p * (&self.l * u + &self.c)) * 2.0
    }

    fn hessian(&self) -> Mat {
        self.l.transpose() * &self.p * &self.l * 2.0
    }

    fn linear(&self) -> Vector {
        self.l.transpose() * (&self.p * &self.c) * 2.0
    }
}

/// The VI at a fixed initial state.
#[derive(Debug, Clone)]
pub struct AffineVi {
    pub m: Mat,
    pub w: Vector,
    pub lower: Vector,
    pub upper: Vector,
    pub rows: Mat,
    pub rhs: Vector,
    pub ellipsoid: Option<Ellipsoid>,
    all_rows: Mat,
    all_rhs: Vector,
}

#[derive(Debug, Clone, Serialize)]
pub struct ViSolveResult {
    pub u: Vector,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Multipliers of the linear rows.
    pub dual: Vector,
    pub terminal_multiplier: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ViOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub step: Option<f64>,
    pub polish_every: usize,
    /// Try exact active-set solves along the way.
    pub polish: bool,
}

impl Default for ViOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200_000, step: None, polish_every: 25, polish: true }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Fix {
    Free,
    Lower,
    Upper,
}

#[derive(Clone, Debug, PartialEq)]
struct ActiveSet {
    fixed: Vec<Fix>,
    rows: Vec<bool>,
    ellipsoid: bool,
}

struct Candidate {
    u: Vector,
    dual: Vector,
    mu: f64,
    residual: f64,
}

impl AffineVi {
    pub fn new(m: Mat, w: Vector, lower: Vector, upper: Vector, rows: Mat, rhs: Vector, ellipsoid: Option<Ellipsoid>) -> Self {
        let dim = m.nrows();
        let mut extra: Vec<(usize, f64, f64)> = Vec::new();
        for k in 0..dim {
            if upper[k].is_finite() {
                extra.push((k, 1.0, upper[k]));
            }
            if lower[k].is_finite() {
                extra.push((k, -1.0, -lower[k]));
            }
        }
        let nr = rows.nrows();
        let mut all_rows = Mat::zeros(nr + extra.len(), dim);
        all_rows.rows_mut(0, nr).copy_from(&rows);
        let mut all_rhs = Vector::zeros(nr + extra.len());
        all_rhs.rows_mut(0, nr).copy_from(&rhs);
        for (e, &(k, s, b)) in extra.iter().enumerate() {
            all_rows[(nr + e, k)] = s;
            all_rhs[nr + e] = b;
        }
        Self { m, w, lower, upper, rows, rhs, ellipsoid, all_rows, all_rhs }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn operator(&self, u: &Vector) -> Vector {
        &self.m * u + &self.w
    }

    /// Largest constraint violation (0 when feasible).
    pub fn violation(&self, u: &Vector) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..u.len() {
            worst = worst.max(self.lower[k] - u[k]).max(u[k] - self.upper[k]);
        }
        if self.rows.nrows() > 0 {
            let s = &self.rows * u - &self.rhs;
            worst = worst.max(s.max());
        }
        if let Some(e) = &self.ellipsoid {
            worst = worst.max(e.value(u));
        }
        worst
    }

    fn polyhedral_projection(&self, h: &Mat, f: &Vector) -> Result<Vector> {
        Ok(solve_qp(h, f, &self.all_rows, &self.all_rhs)?.z)
    }

    /// Euclidean projection onto the feasible set.
    pub fn project(&self, v: &Vector) -> Result<Vector> {
        let eye = Mat::identity(self.dim(), self.dim());
        let z0 = self.polyhedral_projection(&eye, &(-v))?;
        let Some(e) = &self.ellipsoid else { return Ok(z0) };
        if e.value(&z0) <= 0.0 {
            return Ok(z0);
        }
        // Multiplier of the ellipsoid row: φ(μ) = g(z(μ)) is nonincreasing.
        let (hq, lin) = (e.hessian(), e.linear());
        let z_of = |mu: f64| self.polyhedral_projection(&(&eye + &hq * mu), &(&lin * mu - v));
        let mut hi = 1.0;
        let mut z_hi = z_of(hi)?;
        let unreachable = || Error::Infeasible("terminal ellipsoid does not meet the polyhedral constraints".into());
        while e.value(&z_hi) > 0.0 {
            hi *= 4.0;
            if hi > 1e14 {
                return Err(unreachable());
            }
            z_hi = z_of(hi).map_err(|_| unreachable())?;
        }
        let (mut lo, mut f_lo, mut f_hi) = (0.0, e.value(&z0), e.value(&z_hi));
        for _ in 0..200 {
            let mid = if f_lo - f_hi > 0.0 { (lo * -f_hi + hi * f_lo) / (f_lo - f_hi) } else { 0.5 * (lo + hi) };
            let mid = if mid <= lo || mid >= hi { 0.5 * (lo + hi) } else { mid };
            let z = z_of(mid)?;
            let fm = e.value(&z);
            if fm > 0.0 {
                lo = mid;
                f_lo = fm;
                f_hi *= 0.5;
            } else {
                hi = mid;
                f_hi = fm;
                z_hi = z;
                f_lo *= 0.5;
            }
            if fm.abs() <= 1e-14 * (1.0 + e.level) || hi - lo <= 1e-15 * hi {
                break;
            }
        }
        Ok(z_hi)
    }

    /// `‖u − Π_C(u − F(u))‖`.
    pub fn natural_residual(&self, u: &Vector) -> Result<f64> {
        let step = u - self.operator(u);
        Ok((u - self.project(&step)?).norm())
    }

    fn guess_from_point(&self, u: &Vector) -> ActiveSet {
        let scale = 1e-9 * (1.0 + u.amax());
        let fixed = (0..u.len())
            .map(|k| {
                if u[k] <= self.lower[k] + scale {
                    Fix::Lower
                } else if u[k] >= self.upper[k] - scale {
                    Fix::Upper
                } else {
                    Fix::Free
                }
            })
            .collect();
        let slack = &self.rhs - &self.rows * u;
        let rows = slack.iter().map(|s| *s <= scale).collect();
        let ellipsoid = self.ellipsoid.as_ref().is_some_and(|e| e.value(u) >= -scale * (1.0 + e.level));
        ActiveSet { fixed, rows, ellipsoid }
    }

    /// Solves the equality-constrained KKT system of an active set for a fixed
    /// ellipsoid multiplier.
    fn kkt(&self, set: &ActiveSet, mu: f64) -> Option<(Vector, Vector)> {
        let dim = self.dim();
        let (mut mm, mut w) = (self.m.clone(), self.w.clone());
        if let (Some(e), true) = (&self.ellipsoid, mu > 0.0) {
            mm += e.hessian() * mu;
            w += e.linear() * mu;
        }
        let free: Vec<usize> = (0..dim).filter(|&k| set.fixed[k] == Fix::Free).collect();
        let act: Vec<usize> = (0..self.rows.nrows()).filter(|&j| set.rows[j]).collect();
        let mut u = Vector::zeros(dim);
        for k in 0..dim {
            match set.fixed[k] {
                Fix::Lower => u[k] = self.lower[k],
                Fix::Upper => u[k] = self.upper[k],
                Fix::Free => {}
            }
        }
        let (nf, na) = (free.len(), act.len());
        let size = nf + na;
        if size == 0 {
            return Some((u, Vector::zeros(self.rows.nrows())));
        }
        let base = &mm * &u + &w;
        let mut k = Mat::zeros(size, size);
        let mut rhs = Vector::zeros(size);
        for (a, &i) in free.iter().enumerate() {
            for (b, &j) in free.iter().enumerate() {
                k[(a, b)] = mm[(i, j)];
            }
            for (b, &r) in act.iter().enumerate() {
                k[(a, nf + b)] = self.rows[(r, i)];
                k[(nf + b, a)] = self.rows[(r, i)];
            }
            rhs[a] = -base[i];
        }
        for (b, &r) in act.iter().enumerate() {
            rhs[nf + b] = self.rhs[r] - self.rows.row(r).dot(&u.transpose());
        }
        let sol = match k.clone().lu().solve(&rhs) {
            Some(s) if s.iter().all(|v| v.is_finite()) && (&k * &s - &rhs).norm() <= 1e-9 * (1.0 + rhs.norm()) => s,
            _ => k.svd(true, true).solve(&rhs, 1e-12).ok()?,
        };
        for (a, &i) in free.iter().enumerate() {
            u[i] = sol[a];
        }
        let mut dual = Vector::zeros(self.rows.nrows());
        for (b, &r) in act.iter().enumerate() {
            dual[r] = sol[nf + b];
        }
        Some((u, dual))
    }

    /// KKT solve with the ellipsoid multiplier chosen so the ellipsoid row is tight.
    fn kkt_with_ellipsoid(&self, set: &ActiveSet) -> Option<(Vector, Vector, f64)> {
        let e = match (&self.ellipsoid, set.ellipsoid) {
            (Some(e), true) => e,
            _ => return self.kkt(set, 0.0).map(|(u, d)| (u, d, 0.0)),
        };
        let (u0, d0) = self.kkt(set, 0.0)?;
        let f0 = e.value(&u0);
        if f0 <= 0.0 {
            return Some((u0, d0, 0.0));
        }
        let mut hi = 1.0;
        let (mut u_hi, mut d_hi) = self.kkt(set, hi)?;
        while e.value(&u_hi) > 0.0 {
            hi *= 4.0;
            if hi > 1e14 {
                return None;
            }
            (u_hi, d_hi) = self.kkt(set, hi)?;
        }
        let (mut lo, mut f_lo, mut f_hi) = (0.0, f0, e.value(&u_hi));
        for _ in 0..200 {
            let mid = if f_lo - f_hi > 0.0 { (lo * -f_hi + hi * f_lo) / (f_lo - f_hi) } else { 0.5 * (lo + hi) };
            let mid = if mid <= lo || mid >= hi { 0.5 * (lo + hi) } else { mid };
            let (u, d) = self.kkt(set, mid)?;
            let fm = e.value(&u);
            if fm > 0.0 {
                lo = mid;
                f_lo = fm;
                f_hi *= 0.5;
            } else {
                hi = mid;
                f_hi = fm;
                u_hi = u;
                d_hi = d;
                f_lo *= 0.5;
            }
            if fm.abs() <= 1e-14 * (1.0 + e.level) || hi - lo <= 1e-15 * hi {
                break;
            }
        }
        Some((u_hi, d_hi, hi))
    }

    /// Primal-dual active-set refinement starting from a guess; returns a
    /// candidate when the set stabilizes.
    fn polish(&self, mut set: ActiveSet, tol: f64) -> Result<Option<Candidate>> {
        let dim = self.dim();
        for _ in 0..40 {
            let Some((u, dual, mu)) = self.kkt_with_ellipsoid(&set) else { return Ok(None) };
            let scale = 1e-11 * (1.0 + u.amax());
            let mut grad = &self.m * &u + &self.w + self.rows.transpose() * &dual;
            if let Some(e) = &self.ellipsoid {
                grad += e.gradient(&u) * mu;
            }
            let mut next = set.clone();
            for k in 0..dim {
                match set.fixed[k] {
                    Fix::Free => {
                        if u[k] < self.lower[k] - scale {
                            next.fixed[k] = Fix::Lower;
                        } else if u[k] > self.upper[k] + scale {
                            next.fixed[k] = Fix::Upper;
                        }
                    }
                    // The bound multiplier is ±grad[k]; release on the wrong sign.
                    Fix::Lower => {
                        if grad[k] < -scale * (1.0 + grad.amax()) {
                            next.fixed[k] = Fix::Free;
                        }
                    }
                    Fix::Upper => {
                        if grad[k] > scale * (1.0 + grad.amax()) {
                            next.fixed[k] = Fix::Free;
                        }
                    }
                }
            }
            let slack = &self.rhs - &self.rows * &u;
            for j in 0..self.rows.nrows() {
                if set.rows[j] && dual[j] < -scale * (1.0 + dual.amax()) {
                    next.rows[j] = false;
                } else if !set.rows[j] && slack[j] < -scale {
                    next.rows[j] = true;
                }
            }
            if let Some(e) = &self.ellipsoid {
                if !set.ellipsoid && e.value(&u) > scale * (1.0 + e.level) {
                    next.ellipsoid = true;
                } else if set.ellipsoid && mu <= 0.0 {
                    next.ellipsoid = false;
                }
            }
            if next == set {
                if self.violation(&u) > 1e-9 * (1.0 + u.amax()) {
                    return Ok(None);
                }
                let residual = self.natural_residual(&u)?;
                return Ok((residual <= tol).then_some(Candidate { u, dual, mu, residual }));
            }
            set = next;
        }
        Ok(None)
    }
}

fn accept(c: Candidate, iterations: usize) -> ViSolveResult {
    ViSolveResult { u: c.u, residual: c.residual, iterations, converged: true, dual: c.dual, terminal_multiplier: c.mu }
}

/// Forward-backward solution of the affine VI. Box constraints are handled
/// by projection, linear rows and the terminal ellipsoid by multipliers;
/// iterates are periodically polished by an exact active-set KKT solve.
pub fn solve_affine_vi(vi: &AffineVi, warm: Option<&Vector>, opts: ViOptions) -> Result<ViSolveResult> {
    let dim = vi.dim();
    if let Some(step) = opts.step {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::invalid("step", format!("step size must be positive, got {step}")));
        }
    }
    if let Some(w) = warm {
        if w.len() != dim {
            return Err(Error::dim("warm start"));
        }
    }
    let start = warm.cloned().unwrap_or_else(|| Vector::zeros(dim));
    let mut u = vi.project(&start)?;

    if warm.is_some() {
        let residual = vi.natural_residual(&u)?;
        if residual <= opts.tol {
            return Ok(ViSolveResult { u, residual, iterations: 0, converged: true, dual: Vector::zeros(vi.rows.nrows()), terminal_multiplier: 0.0 });
        }
    }
    if opts.polish {
        if let Some(c) = vi.polish(vi.guess_from_point(&u), opts.tol)? {
            return Ok(accept(c, 0));
        }
    }

    let nr = vi.rows.nrows();
    let row_norms: Vec<f64> = (0..nr).map(|j| vi.rows.row(j).norm().max(1e-300)).collect();
    let g = Mat::from_fn(nr, dim, |j, k| vi.rows[(j, k)] / row_norms[j]);
    let h = Vector::from_fn(nr, |j, _| vi.rhs[j] / row_norms[j]);
    let g_norm = spectral_norm(&g);
    let mono = monotonicity(&vi.m, 1);
    let lip = power_norm(&vi.m, 100).max(1e-300);
    let strongly = mono.strongly_monotone;

    let mut lam = Vector::zeros(nr);
    let mut mu = 0.0f64;
    let mut best: Option<(f64, Vector)> = None;
    let mut last_guess: Option<ActiveSet> = None;
    let mut best_violation = f64::INFINITY;
    let mut last_improvement = 0usize;

    let (gamma, sigma) = if strongly {
        let gamma = opts.step.unwrap_or(0.9 * mono.min_eig_sym / (lip * lip));
        (gamma, if g_norm > 0.0 { 0.45 / (gamma * g_norm * g_norm) } else { 0.0 })
    } else {
        let joint = Mat::from_fn(dim + nr, dim + nr, |r, c| match (r < dim, c < dim) {
            (true, true) => vi.m[(r, c)],
            (true, false) => g[(c - dim, r)],
            (false, true) => -g[(r - dim, c)],
            (false, false) => 0.0,
        });
        let lt = power_norm(&joint, 100).max(1e-300);
        let gamma = opts.step.unwrap_or(0.9 / lt);
        (gamma, gamma)
    };
    debug!("VI solve: dim {dim}, rows {nr}, strongly monotone {strongly}, step {gamma:.3e}");

    let clamp = |v: Vector| -> Vector { Vector::from_fn(dim, |k, _| v[k].clamp(vi.lower[k], vi.upper[k])) };
    let ell_sigma = |grad: &Vector| sigma / (1.0 + grad.norm_squared());

    for iter in 1..=opts.max_iter {
        let field = |u: &Vector, lam: &Vector, mu: f64| -> Vector {
            let mut f = vi.operator(u) + g.transpose() * lam;
            if let (Some(e), true) = (&vi.ellipsoid, mu > 0.0) {
                f += e.gradient(u) * mu;
            }
            f
        };
        let u_prev = u.clone();
        if strongly {
            let u_new = clamp(&u - field(&u, &lam, mu) * gamma);
            let ext = &u_new * 2.0 - &u;
            if nr > 0 {
                lam = (&lam + (&g * &ext - &h) * sigma).map(|v| v.max(0.0));
            }
            if let Some(e) = &vi.ellipsoid {
                mu = (mu + ell_sigma(&e.gradient(&ext)) * e.value(&ext)).max(0.0);
            }
            u = u_new;
        } else {
            let u_bar = clamp(&u - field(&u, &lam, mu) * gamma);
            let lam_bar = if nr > 0 { (&lam + (&g * &u - &h) * gamma).map(|v| v.max(0.0)) } else { lam.clone() };
            let mu_bar = vi.ellipsoid.as_ref().map_or(0.0, |e| (mu + gamma * e.value(&u)).max(0.0));
            let f_bar = field(&u_bar, &lam_bar, mu_bar);
            let u_new = clamp(&u - f_bar * gamma);
            if nr > 0 {
                lam = (&lam + (&g * &u_bar - &h) * gamma).map(|v| v.max(0.0));
            }
            if let Some(e) = &vi.ellipsoid {
                mu = (mu + gamma * e.value(&u_bar)).max(0.0);
            }
            u = u_new;
        }

        let step_norm = (&u - &u_prev).norm() / gamma;
        if iter % opts.polish_every == 0 || step_norm <= opts.tol * 1e-2 {
            let mut guess = vi.guess_from_point(&u);
            for j in 0..nr {
                guess.rows[j] = lam[j] > 0.0;
            }
            if vi.ellipsoid.is_some() {
                guess.ellipsoid = mu > 0.0;
            }
            if opts.polish && last_guess.as_ref() != Some(&guess) {
                if let Some(c) = vi.polish(guess.clone(), opts.tol)? {
                    debug!("VI solve: polished after {iter} iterations");
                    return Ok(accept(c, iter));
                }
                last_guess = Some(guess);
            }
            let residual = vi.natural_residual(&u)?;
            if residual <= opts.tol {
                let dual = Vector::from_fn(nr, |j, _| lam[j] / row_norms[j]);
                return Ok(ViSolveResult { u, residual, iterations: iter, converged: true, dual, terminal_multiplier: mu });
            }
            if best.as_ref().is_none_or(|(r, _)| residual < *r) {
                best = Some((residual, u.clone()));
            }
            trace!("VI iteration {iter}: residual {residual:.3e}");
        }

        let viol = vi.violation(&u);
        if viol < best_violation * (1.0 - 1e-9) {
            best_violation = viol;
            last_improvement = iter;
        }
        let dual_norm = lam.norm() + mu;
        if dual_norm > 1e8 && iter - last_improvement > 10_000 {
            return Err(Error::Infeasible(format!("dual norm {dual_norm:.3e} diverges without primal progress")));
        }
    }

    let (residual, u) = match best {
        Some((r, b)) => (r, b),
        None => (vi.natural_residual(&u)?, u),
    };
    Ok(ViSolveResult {
        u,
        residual,
        iterations: opts.max_iter,
        converged: false,
        dual: Vector::from_fn(nr, |j, _| lam[j] / row_norms[j]),
        terminal_multiplier: mu,
    })
}

pub fn solve_vi(vi: &FiniteHorizonVi, x0: &Vector, warm: Option<&Vector>, opts: ViOptions) -> Result<ViSolveResult> {
    if x0.len() != vi.n {
        return Err(Error::dim(format!("x0 has {} entries, expected {}", x0.len(), vi.n)));
    }
    solve_affine_vi(&vi.instantiate(x0), warm, opts)
}

/// Previous solution advanced by one step, with `Kᵢ·x_terminal` appended.
pub fn shifted_warm_start(vi: &FiniteHorizonVi, prev: &Vector, gains: &[Mat], x_terminal: &Vector) -> Vector {
    let (t, m) = (vi.horizon, vi.m);
    let mut out = Vector::zeros(vi.dim());
    for i in 0..vi.agents {
        for s in 0..t.saturating_sub(1) {
            out.rows_mut(vi.index(i, s), m).copy_from(&prev.rows(vi.index(i, s + 1), m));
        }
        out.rows_mut(vi.index(i, t - 1), m).copy_from(&(&gains[i] * x_terminal));
    }
    out
}

/// Candidate `uᵢ[t] = Kᵢ Ā^t x₀` from a linear feedback.
pub fn feedback_sequence(vi: &FiniteHorizonVi, gains: &[Mat], abar: &Mat, x0: &Vector) -> Vector {
    let mut x = x0.clone();
    let mut steps = Vec::with_capacity(vi.horizon);
    for _ in 0..vi.horizon {
        let mut us = Vector::zeros(vi.agents * vi.m);
        for (i, k) in gains.iter().enumerate() {
            us.rows_mut(i * vi.m, vi.m).copy_from(&(k * &x));
        }
        steps.push(us);
        x = abar * x;
    }
    vi.stack(&steps)
}

/// Stacked inputs of the finite-horizon solution followed by the open-loop
/// equilibrium continuation `Kᵢ Ā^{t−T} x[T]`, `steps` entries in total.
pub fn extended_sequence(vi: &FiniteHorizonVi, x0: &Vector, u: &Vector, gains: &[Mat], abar: &Mat, steps: usize) -> Vec<Vector> {
    let mut out: Vec<Vector> = (0..vi.horizon.min(steps)).map(|s| vi.input_at(u, s)).collect();
    let mut x = vi.predict(x0, u).pop().expect("horizon ≥ 1");
    while out.len() < steps {
        let mut us = Vector::zeros(vi.agents * vi.m);
        for (i, k) in gains.iter().enumerate() {
            us.rows_mut(i * vi.m, vi.m).copy_from(&(k * &x));
        }
        out.push(us);
        x = abar * x;
    }
    out
}

/// Largest stationarity violation `‖F(u)‖∞` of the closed-loop feedback
/// sequence in the unconstrained surrogate game.
pub fn surrogate_clne_residual(game: &GameDefinition, cl: &ClNeSolution, x0: &Vector, horizon: usize) -> Result<f64> {
    let g = game.with_horizon(horizon);
    let vi = build_vi(&g, ValueSource::Clne(cl), &ConstraintSpec::unconstrained(&g), None)?;
    let u = feedback_sequence(&vi, &cl.k_cl, &cl.abar_cl, x0);
    Ok(vi.operator(&u, x0).amax())
}

/// Per-step stage costs `ℓᵢ(x, uᵢ)` of a stacked input.
pub fn stage_costs(game: &GameDefinition, x: &Vector, u: &Vector) -> Vec<f64> {
    (0..game.agents())
        .map(|i| stage_cost(game, i, x, &game.agent_input(u, i)).expect("dimensions checked by caller"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_box_is_a_clamp() {
        let vi = AffineVi::new(
            Mat::from_element(1, 1, 2.0),
            Vector::from_element(1, -10.0),
            Vector::from_element(1, -1.5),
            Vector::from_element(1, 1.5),
            Mat::zeros(0, 1),
            Vector::zeros(0),
            None,
        );
        let r = solve_affine_vi(&vi, None, ViOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.u[0] - 1.5).abs() < 1e-12);
    }
}
