//! Problem data of the game: dynamics, weights, constraints, trajectories and
//! the platooning scenario.

use serde::{Deserialize, Serialize};

use crate::linalg::{hstack, min_eig_sym, psd_sqrt, symmetrize};
use crate::{Error, Mat, Result, Vector};

/// Tolerance on symmetry and eigenvalue checks of the weights.
pub const EPS_SYM: f64 = 1e-10;

/// `x⁺ = Ax + Σᵢ Bᵢuᵢ` with agent costs `½xᵀQᵢx + ½uᵢᵀRᵢuᵢ` and horizon `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameDefinition {
    pub a: Mat,
    pub b: Vec<Mat>,
    pub q: Vec<Mat>,
    pub r: Vec<Mat>,
    pub horizon: usize,
}

impl GameDefinition {
    /// Validates dimensions and weights. `Q` and `R` are symmetrized.
    pub fn new(a: Mat, b: Vec<Mat>, q: Vec<Mat>, r: Vec<Mat>, horizon: usize) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || n == 0 {
            return Err(Error::invalid("A", format!("must be square and non-empty, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.is_empty() {
            return Err(Error::invalid("B", "at least one agent is required"));
        }
        if q.len() != b.len() || r.len() != b.len() {
            return Err(Error::invalid(
                "Q/R",
                format!("expected {} matrices each, got {} and {}", b.len(), q.len(), r.len()),
            ));
        }
        if horizon == 0 {
            return Err(Error::invalid("T", "horizon must be at least 1"));
        }
        let m = b[0].ncols();
        if m == 0 {
            return Err(Error::invalid("B[0]", "input dimension must be positive"));
        }
        let mut qs = Vec::with_capacity(q.len());
        let mut rs = Vec::with_capacity(r.len());
        for (i, ((bi, qi), ri)) in b.iter().zip(&q).zip(&r).enumerate() {
            if bi.shape() != (n, m) {
                return Err(Error::invalid(format!("B[{i}]"), format!("expected {n}x{m}, got {}x{}", bi.nrows(), bi.ncols())));
            }
            if qi.shape() != (n, n) {
                return Err(Error::invalid(format!("Q[{i}]"), format!("expected {n}x{n}")));
            }
            if ri.shape() != (m, m) {
                return Err(Error::invalid(format!("R[{i}]"), format!("expected {m}x{m}")));
            }
            let all_finite = [bi, qi, ri].iter().all(|x| x.iter().all(|v| v.is_finite()));
            if !all_finite {
                return Err(Error::invalid(format!("agent {i}"), "non-finite entries"));
            }
            let qsym = symmetrize(qi);
            if min_eig_sym(&qsym) < -EPS_SYM {
                return Err(Error::invalid(format!("Q[{i}]"), "Q not positive semidefinite"));
            }
            let rsym = symmetrize(ri);
            if min_eig_sym(&rsym) <= 0.0 {
                return Err(Error::invalid(format!("R[{i}]"), "R not positive definite"));
            }
            qs.push(qsym);
            rs.push(rsym);
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("A", "non-finite entries"));
        }
        Ok(Self { a, b, q: qs, r: rs, horizon })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b[0].ncols()
    }

    pub fn agents(&self) -> usize {
        self.b.len()
    }

    /// `Sᵢ = BᵢRᵢ⁻¹Bᵢᵀ`.
    pub fn s(&self, i: usize) -> Mat {
        let rinv = self.r[i].clone().cholesky().expect("R validated positive definite").inverse();
        &self.b[i] * rinv * self.b[i].transpose()
    }

    /// A square root `Cᵢ` with `CᵢᵀCᵢ = Qᵢ`.
    pub fn c(&self, i: usize) -> Mat {
        psd_sqrt(&self.q[i])
    }

    /// `[B₁ … B_N]`.
    pub fn b_row(&self) -> Mat {
        let refs: Vec<&Mat> = self.b.iter().collect();
        hstack(&refs)
    }

    pub fn with_horizon(&self, horizon: usize) -> Self {
        Self { horizon, ..self.clone() }
    }

    /// `A + Σᵢ BᵢKᵢ`.
    pub fn closed_loop(&self, gains: &[Mat]) -> Mat {
        let mut out = self.a.clone();
        for (b, k) in self.b.iter().zip(gains) {
            out += b * k;
        }
        out
    }

    /// Input of agent `i` inside a stacked per-step input.
    pub fn agent_input(&self, u: &Vector, i: usize) -> Vector {
        u.rows(i * self.m(), self.m()).into_owned()
    }

    pub fn step(&self, x: &Vector, u: &Vector) -> Vector {
        let m = self.m();
        let mut next = &self.a * x;
        for (i, b) in self.b.iter().enumerate() {
            next += b * u.rows(i * m, m);
        }
        next
    }
}

/// `x[0] = x0`, `x[t+1] = Ax[t] + Σᵢ Bᵢuᵢ[t]` over stacked per-step inputs.
pub fn propagate(game: &GameDefinition, x0: &Vector, u: &[Vector]) -> Result<Vec<Vector>> {
    if x0.len() != game.n() {
        return Err(Error::dim(format!("x0 has {} entries, expected {}", x0.len(), game.n())));
    }
    let nm = game.agents() * game.m();
    let mut out = Vec::with_capacity(u.len() + 1);
    out.push(x0.clone());
    for (t, ut) in u.iter().enumerate() {
        if ut.len() != nm {
            return Err(Error::dim(format!("input at step {t} has {} entries, expected {nm}", ut.len())));
        }
        let next = game.step(&out[t], ut);
        out.push(next);
    }
    Ok(out)
}

/// `½xᵀQᵢx + ½uᵢᵀRᵢuᵢ`.
pub fn stage_cost(game: &GameDefinition, i: usize, x: &Vector, ui: &Vector) -> Result<f64> {
    if i >= game.agents() {
        return Err(Error::dim(format!("agent index {i} out of range")));
    }
    if x.len() != game.n() || ui.len() != game.m() {
        return Err(Error::dim("stage cost arguments"));
    }
    Ok(0.5 * (x.dot(&(&game.q[i] * x)) + ui.dot(&(&game.r[i] * ui))))
}

/// `{z : a z ≤ b}`; zero rows encode the whole space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polytope {
    pub a: Mat,
    pub b: Vector,
}

impl Polytope {
    pub fn empty(dim: usize) -> Self {
        Self { a: Mat::zeros(0, dim), b: Vector::zeros(0) }
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn slack(&self, z: &Vector) -> Vector {
        &self.b - &self.a * z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lower: Vector,
    pub upper: Vector,
}

impl InputBox {
    pub fn unbounded(m: usize) -> Self {
        Self {
            lower: Vector::from_element(m, f64::NEG_INFINITY),
            upper: Vector::from_element(m, f64::INFINITY),
        }
    }

    pub fn symmetric(m: usize, bound: f64) -> Self {
        Self { lower: Vector::from_element(m, -bound), upper: Vector::from_element(m, bound) }
    }

    pub fn is_unbounded(&self) -> bool {
        self.lower.iter().all(|v| v.is_infinite()) && self.upper.iter().all(|v| v.is_infinite())
    }
}

/// State polytope, per-agent input boxes and one coupling polytope over the
/// stacked input of a single step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub state: Polytope,
    pub input_boxes: Vec<InputBox>,
    pub coupling: Polytope,
}

impl ConstraintSpec {
    pub fn unconstrained(game: &GameDefinition) -> Self {
        Self {
            state: Polytope::empty(game.n()),
            input_boxes: vec![InputBox::unbounded(game.m()); game.agents()],
            coupling: Polytope::empty(game.agents() * game.m()),
        }
    }

    pub fn is_unconstrained(&self) -> bool {
        self.state.rows() == 0 && self.coupling.rows() == 0 && self.input_boxes.iter().all(InputBox::is_unbounded)
    }

    pub fn validate(&self, game: &GameDefinition) -> Result<()> {
        let (n, m, nag) = (game.n(), game.m(), game.agents());
        if self.state.a.ncols() != n || self.state.a.nrows() != self.state.b.len() {
            return Err(Error::invalid("constraints.state", format!("expected rows of width {n} and matching bounds")));
        }
        if self.coupling.a.ncols() != nag * m || self.coupling.a.nrows() != self.coupling.b.len() {
            return Err(Error::invalid("constraints.coupling", format!("expected rows of width {}", nag * m)));
        }
        if self.input_boxes.len() != nag {
            return Err(Error::invalid("constraints.input_boxes", format!("expected {nag} boxes")));
        }
        for (j, row) in self.state.a.row_iter().enumerate() {
            if row.iter().all(|v| *v == 0.0) {
                return Err(Error::invalid("constraints.state", format!("row {j} has a zero normal")));
            }
        }
        for (j, row) in self.coupling.a.row_iter().enumerate() {
            if row.iter().all(|v| *v == 0.0) {
                return Err(Error::invalid("constraints.coupling", format!("row {j} has a zero normal")));
            }
        }
        if let Some(j) = self.state.b.iter().position(|&g| !(g > 0.0)) {
            return Err(Error::invalid("constraints.state", format!("origin must strictly satisfy row {j}")));
        }
        if let Some(j) = self.coupling.b.iter().position(|&g| !(g > 0.0)) {
            return Err(Error::invalid("constraints.coupling", format!("origin must strictly satisfy row {j}")));
        }
        for (i, bx) in self.input_boxes.iter().enumerate() {
            if bx.lower.len() != m || bx.upper.len() != m {
                return Err(Error::invalid(format!("constraints.input_boxes[{i}]"), format!("expected {m} bounds")));
            }
            if bx.lower.iter().any(|&l| !(l < 0.0)) || bx.upper.iter().any(|&u| !(u > 0.0)) {
                return Err(Error::invalid(format!("constraints.input_boxes[{i}]"), "bounds must satisfy lower < 0 < upper"));
            }
        }
        Ok(())
    }
}

/// Per-row slacks (positive = strictly satisfied) grouped by family.
#[derive(Debug, Clone, Serialize)]
pub struct ViolationReport {
    pub state_slack: Vec<f64>,
    pub box_slack: Vec<f64>,
    pub coupling_slack: Vec<f64>,
    pub max_state_violation: f64,
    pub max_box_violation: f64,
    pub max_coupling_violation: f64,
}

impl ViolationReport {
    pub fn max_violation(&self) -> f64 {
        self.max_state_violation.max(self.max_box_violation).max(self.max_coupling_violation)
    }

    pub fn admissible(&self) -> bool {
        self.max_violation() <= 0.0
    }
}

fn worst(slacks: &[f64]) -> f64 {
    slacks.iter().fold(f64::NEG_INFINITY, |acc, s| acc.max(-s))
}

pub fn feasible(spec: &ConstraintSpec, x: &Vector, u: &Vector) -> ViolationReport {
    let state_slack: Vec<f64> = spec.state.slack(x).iter().copied().collect();
    let coupling_slack: Vec<f64> = spec.coupling.slack(u).iter().copied().collect();
    let mut box_slack = Vec::new();
    let mut offset = 0;
    for bx in &spec.input_boxes {
        for k in 0..bx.lower.len() {
            let v = u[offset + k];
            box_slack.push((v - bx.lower[k]).min(bx.upper[k] - v));
        }
        offset += bx.lower.len();
    }
    ViolationReport {
        max_state_violation: worst(&state_slack),
        max_box_violation: worst(&box_slack),
        max_coupling_violation: worst(&coupling_slack),
        state_slack,
        box_slack,
        coupling_slack,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverStat {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Closed-loop record. `states` has one more entry than `inputs`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub states: Vec<Vector>,
    pub inputs: Vec<Vector>,
    pub stage_costs: Vec<Vec<f64>>,
    pub solver_stats: Vec<SolverStat>,
    pub terminal_distance: Vec<f64>,
    pub terminal_distance_euclidean: Vec<f64>,
}

impl TrajectoryLog {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    /// Largest relative deviation from the dynamics recursion.
    pub fn replay_error(&self, game: &GameDefinition) -> f64 {
        let mut worst = 0.0f64;
        for (t, u) in self.inputs.iter().enumerate() {
            let pred = game.step(&self.states[t], u);
            let err = (&pred - &self.states[t + 1]).norm() / (1.0 + pred.norm());
            worst = worst.max(err);
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatoonParams {
    pub vehicles: usize,
    pub sample_time: f64,
    /// Headway gains `hᵢ` (entry 0 is unused by the leader's model).
    pub headway: Vec<f64>,
    /// Desired stand-still distances `dᵢ` (entry 0 unused).
    pub distance: Vec<f64>,
    /// Safety distances `d_minᵢ` (entry 0 unused).
    pub min_distance: Vec<f64>,
    pub v_ref: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub horizon: usize,
}

impl PlatoonParams {
    pub fn new(vehicles: usize) -> Self {
        Self {
            vehicles,
            sample_time: 0.1,
            headway: vec![0.5; vehicles],
            distance: vec![10.0; vehicles],
            min_distance: vec![4.0; vehicles],
            v_ref: 20.0,
            v_min: 5.0,
            v_max: 30.0,
            u_min: -4.0,
            u_max: 4.0,
            horizon: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Platoon {
    pub game: GameDefinition,
    pub constraints: ConstraintSpec,
    /// Prestabilizing gains as printed for the scenario, `(δᵢ)ᵀ ⊗ [−1, −1]`.
    pub k_stab: Vec<Mat>,
    /// Unstabilized plant matrix.
    pub a_open: Mat,
    pub params: PlatoonParams,
}

impl Platoon {
    /// Physical input from the game input: `u_phys = u − K_stab x`.
    pub fn physical_input(&self, x: &Vector, u: &Vector) -> Vector {
        let mut out = u.clone();
        for (i, k) in self.k_stab.iter().enumerate() {
            out[i] -= (k * x)[0];
        }
        out
    }

    /// Velocities `vᵢ = v_ref − Σ_{k≤i} x_{k,2}`.
    pub fn velocities(&self, x: &Vector) -> Vec<f64> {
        let mut acc = 0.0;
        (0..self.params.vehicles)
            .map(|i| {
                acc += x[2 * i + 1];
                self.params.v_ref - acc
            })
            .collect()
    }

    /// Positions relative to the leader, `pᵢ = p_{i−1} − (x_{i,1} + dᵢ + hᵢvᵢ)`.
    pub fn positions(&self, x: &Vector) -> Vec<f64> {
        let v = self.velocities(x);
        let p = &self.params;
        let mut out = vec![0.0; p.vehicles];
        for i in 1..p.vehicles {
            out[i] = out[i - 1] - (x[2 * i] + p.distance[i] + p.headway[i] * v[i]);
        }
        out
    }

    /// Error state of a platoon with the given physical speeds and inter-vehicle gaps
    /// (`gaps[i] = p_{i−1} − pᵢ`, entry 0 ignored).
    pub fn state_from_physical(&self, speeds: &[f64], gaps: &[f64]) -> Vector {
        let p = &self.params;
        let mut x = Vector::zeros(2 * p.vehicles);
        x[1] = p.v_ref - speeds[0];
        for i in 1..p.vehicles {
            x[2 * i] = gaps[i] - p.distance[i] - p.headway[i] * speeds[i];
            x[2 * i + 1] = speeds[i - 1] - speeds[i];
        }
        x
    }
}

/// Builds the prestabilized platooning game of `params.vehicles` vehicles.
///
/// Agent `i` accelerates vehicle `i`; the state stacks, per vehicle, the
/// distance error and the speed difference to the predecessor (the leader
/// tracks `v_ref`). The prestabilizer is applied as `A' = A − Σ BᵢK_stabᵢ`.
pub fn build_platooning(params: &PlatoonParams) -> Result<Platoon> {
    let nv = params.vehicles;
    if nv < 2 {
        return Err(Error::invalid("vehicles", "platooning needs at least two vehicles"));
    }
    if !(params.sample_time > 0.0) {
        return Err(Error::invalid("sample_time", "must be positive"));
    }
    for (name, v) in [("headway", &params.headway), ("distance", &params.distance), ("min_distance", &params.min_distance)] {
        if v.len() != nv {
            return Err(Error::invalid(name, format!("expected {nv} entries")));
        }
    }
    let tau = params.sample_time;
    let n = 2 * nv;
    let mut a = Mat::zeros(n, n);
    a[(1, 1)] = 1.0;
    for i in 1..nv {
        a[(2 * i, 2 * i)] = 1.0;
        a[(2 * i, 2 * i + 1)] = tau;
        a[(2 * i + 1, 2 * i + 1)] = 1.0;
    }
    let mut b = Vec::with_capacity(nv);
    for i in 0..nv {
        let mut bi = Mat::zeros(n, 1);
        if i + 1 < nv {
            bi[(2 * (i + 1), 0)] = tau * tau / 2.0;
            bi[(2 * (i + 1) + 1, 0)] = tau;
        }
        if i > 0 {
            bi[(2 * i, 0)] = -(params.headway[i] * tau + tau * tau / 2.0);
        }
        bi[(2 * i + 1, 0)] = -tau;
        b.push(bi);
    }
    let k_stab: Vec<Mat> = (0..nv)
        .map(|i| {
            let mut k = Mat::zeros(1, n);
            k[(0, 2 * i)] = -1.0;
            k[(0, 2 * i + 1)] = -1.0;
            k
        })
        .collect();
    let mut a_pre = a.clone();
    for (bi, ki) in b.iter().zip(&k_stab) {
        a_pre -= bi * ki;
    }

    let q = vec![Mat::identity(n, n); nv];
    let r = vec![Mat::identity(1, 1); nv];
    let game = GameDefinition::new(a_pre, b, q, r, params.horizon)?;

    // Rows in the error coordinates, using vᵢ = v_ref − Σ_{k≤i} x_{k,2}.
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for i in 1..nv {
        let mut row = vec![0.0; n];
        row[2 * i] = -1.0;
        for k in 0..=i {
            row[2 * k + 1] = params.headway[i];
        }
        rows.push((row, params.distance[i] + params.headway[i] * params.v_ref - params.min_distance[i]));
    }
    for i in 0..nv {
        let mut row = vec![0.0; n];
        for k in 0..=i {
            row[2 * k + 1] = 1.0;
        }
        rows.push((row.clone(), params.v_ref - params.v_min));
        rows.push((row.iter().map(|v| -v).collect(), params.v_max - params.v_ref));
    }
    let state = Polytope {
        a: Mat::from_fn(rows.len(), n, |r, c| rows[r].0[c]),
        b: Vector::from_iterator(rows.len(), rows.iter().map(|r| r.1)),
    };
    let constraints = ConstraintSpec {
        state,
        input_boxes: (0..nv)
            .map(|_| InputBox { lower: Vector::from_element(1, params.u_min), upper: Vector::from_element(1, params.u_max) })
            .collect(),
        coupling: Polytope::empty(nv),
    };
    constraints.validate(&game)?;
    Ok(Platoon { game, constraints, k_stab, a_open: a, params: params.clone() })
}
