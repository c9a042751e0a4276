//! Python bindings. Matrices cross the boundary as lists of rows and vectors
//! as flat lists.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dyngame_core::clne::{solve_clne as clne, ClNeSolution, ClneMethod};
use dyngame_core::game::{build_platooning, GameDefinition, PlatoonParams};
use dyngame_core::matrix_eq::{solve_dare as dare, spectral_radius};
use dyngame_core::olne::{build_cost_to_go, check_assumptions as assumptions, solve_olne as olne, IterOptions, OlNeSolution};
use dyngame_core::rhc::{run_rhc, Controller, RhcConfig};
use dyngame_core::scenario::{mat_rows, platooning_config, Scenario as CoreScenario};
use dyngame_core::terminal::{compute_terminal_set, TerminalSet};
use dyngame_core::vi::{solve_vi, ViOptions};
use dyngame_core::{Error, Mat, Vector};

create_exception!(dyngame, DyngameError, PyException);

type Rows = Vec<Vec<f64>>;

fn err(e: Error) -> PyErr {
    DyngameError::new_err(e.to_string())
}

fn to_mat(rows: Vec<Vec<f64>>) -> PyResult<Mat> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(DyngameError::new_err("ragged matrix rows"));
    }
    Ok(Mat::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

fn to_vec(v: &Vector) -> Vec<f64> {
    v.iter().copied().collect()
}

fn mats(ms: &[Mat]) -> Vec<Vec<Vec<f64>>> {
    ms.iter().map(mat_rows).collect()
}

/// Linear-quadratic game `x⁺ = Ax + Σ Bᵢuᵢ` with stage costs `½xᵀQᵢx + ½uᵢᵀRᵢuᵢ`.
#[pyclass(frozen, skip_from_py_object, name = "Game", module = "dyngame")]
#[derive(Clone)]
struct Game(GameDefinition);

#[pymethods]
impl Game {
    #[new]
    #[pyo3(signature = (a, b, q, r, horizon = 1))]
    fn new(a: Vec<Vec<f64>>, b: Vec<Vec<Vec<f64>>>, q: Vec<Vec<Vec<f64>>>, r: Vec<Vec<Vec<f64>>>, horizon: usize) -> PyResult<Self> {
        let b = b.into_iter().map(to_mat).collect::<PyResult<_>>()?;
        let q = q.into_iter().map(to_mat).collect::<PyResult<_>>()?;
        let r = r.into_iter().map(to_mat).collect::<PyResult<_>>()?;
        GameDefinition::new(to_mat(a)?, b, q, r, horizon).map(Game).map_err(err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    #[getter]
    fn m(&self) -> usize {
        self.0.m()
    }

    #[getter]
    fn agents(&self) -> usize {
        self.0.agents()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.0.horizon
    }

    #[getter]
    fn a(&self) -> Vec<Vec<f64>> {
        mat_rows(&self.0.a)
    }

    #[getter]
    fn b(&self) -> Vec<Vec<Vec<f64>>> {
        mats(&self.0.b)
    }

    #[getter]
    fn q(&self) -> Vec<Vec<Vec<f64>>> {
        mats(&self.0.q)
    }

    #[getter]
    fn r(&self) -> Vec<Vec<Vec<f64>>> {
        mats(&self.0.r)
    }

    /// Successor state for the stacked input `u = (u₁, …, u_N)`.
    fn step(&self, x: Vec<f64>, u: Vec<f64>) -> PyResult<Vec<f64>> {
        if x.len() != self.0.n() || u.len() != self.0.agents() * self.0.m() {
            return Err(DyngameError::new_err("state or input has the wrong length"));
        }
        Ok(to_vec(&self.0.step(&Vector::from_vec(x), &Vector::from_vec(u))))
    }

    fn __repr__(&self) -> String {
        format!("Game(n={}, m={}, agents={}, horizon={})", self.0.n(), self.0.m(), self.0.agents(), self.0.horizon)
    }
}

/// Game data together with constraints, solver settings and an initial state.
#[pyclass(frozen, name = "Scenario", module = "dyngame")]
struct Scenario(CoreScenario);

#[pymethods]
impl Scenario {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        CoreScenario::load(&path).map(Scenario).map_err(err)
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        CoreScenario::parse(text).map(Scenario).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (vehicles = 4))]
    fn platooning(vehicles: usize) -> PyResult<Self> {
        let cfg = platooning_config(&PlatoonParams::new(vehicles), None).map_err(err)?;
        CoreScenario::from_config(cfg).map(Scenario).map_err(err)
    }

    #[getter]
    fn game(&self) -> Game {
        Game(self.0.game.clone())
    }

    #[getter]
    fn x0(&self) -> Option<Vec<f64>> {
        self.0.x0.as_ref().map(to_vec)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }
}

fn initial_state(scn: &CoreScenario, x0: Option<Vec<f64>>) -> PyResult<Vector> {
    let x0 = match x0 {
        Some(v) => Vector::from_vec(v),
        None => scn.x0.clone().ok_or_else(|| DyngameError::new_err("scenario has no x0; pass one explicitly"))?,
    };
    if x0.len() != scn.game.n() {
        return Err(DyngameError::new_err(format!("x0 has {} entries, expected {}", x0.len(), scn.game.n())));
    }
    Ok(x0)
}

fn method(name: &str) -> PyResult<ClneMethod> {
    match name {
        "lyapunov" => Ok(ClneMethod::LyapunovRecursion),
        "riccati" => Ok(ClneMethod::RiccatiRecursion),
        other => Err(DyngameError::new_err(format!("unknown method {other:?}; expected \"lyapunov\" or \"riccati\""))),
    }
}

enum Solved {
    Ol(OlNeSolution, TerminalSet),
    Cl(ClNeSolution, TerminalSet),
}

fn equilibrium(scn: &CoreScenario, kind: &str) -> PyResult<Solved> {
    let terminal = |abar: &Mat, gains: &[Mat]| compute_terminal_set(abar, &scn.constraints, gains, scn.lyap_weight.as_ref()).map_err(err);
    match kind {
        "ol" => {
            let sol = olne(&scn.game, None, IterOptions::default()).map_err(err)?;
            let ts = terminal(&sol.abar_ol, &sol.k_ol)?;
            Ok(Solved::Ol(sol, ts))
        }
        "cl" => {
            let cl = clne(&scn.game, scn.config.clne_method.unwrap_or_default(), None, IterOptions::default()).map_err(err)?;
            let ts = terminal(&cl.abar_cl, &cl.k_cl)?;
            Ok(Solved::Cl(cl, ts))
        }
        other => Err(DyngameError::new_err(format!("unknown kind {other:?}; expected \"ol\" or \"cl\""))),
    }
}

fn controller(scn: &CoreScenario, kind: &str, enforce_terminal: bool) -> PyResult<Controller> {
    let (g, spec) = (&scn.game, &scn.constraints);
    match equilibrium(scn, kind)? {
        Solved::Ol(sol, ts) => {
            let ctg = build_cost_to_go(g, &sol).map_err(err)?;
            Controller::olne(g, spec, &sol, &ctg, &ts, enforce_terminal).map_err(err)
        }
        Solved::Cl(cl, ts) => Controller::clne(g, spec, &cl, &ts, enforce_terminal).map_err(err),
    }
}

#[pyfunction]
fn check_assumptions<'py>(py: Python<'py>, game: &Game) -> PyResult<Bound<'py, PyDict>> {
    let rep = assumptions(&game.0).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("a_invertible", rep.a_invertible)?;
    d.set_item("stabilizable", rep.stabilizable.clone())?;
    d.set_item("detectable", rep.detectable.clone())?;
    d.set_item("stable_eig_count", rep.stable_eig_count)?;
    d.set_item("complementarity_ok", rep.complementarity_ok)?;
    d.set_item("ambiguous", rep.ambiguous)?;
    d.set_item("overall", rep.overall)?;
    d.set_item("failures", rep.failures())?;
    Ok(d)
}

/// Stabilizing DARE solution `P` and gain `K` with `u = Kx`.
#[pyfunction]
fn solve_dare(a: Rows, b: Rows, q: Rows, r: Rows) -> PyResult<(Rows, Rows)> {
    let (p, k) = dare(&to_mat(a)?, &to_mat(b)?, &to_mat(q)?, &to_mat(r)?).map_err(err)?;
    Ok((mat_rows(&p), mat_rows(&k)))
}

#[pyfunction]
#[pyo3(signature = (game, tol = 1e-10, max_iter = 10_000))]
fn solve_olne<'py>(py: Python<'py>, game: &Game, tol: f64, max_iter: usize) -> PyResult<Bound<'py, PyDict>> {
    let sol = olne(&game.0, None, IterOptions { tol, max_iter }).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("P", mats(&sol.p_ol))?;
    d.set_item("K", mats(&sol.k_ol))?;
    d.set_item("Abar", mat_rows(&sol.abar_ol))?;
    d.set_item("spectral_radius", spectral_radius(&sol.abar_ol).map_err(err)?)?;
    d.set_item("residuals", sol.residuals)?;
    d.set_item("iterations", sol.iterations)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (game, method = "lyapunov", tol = 1e-10, max_iter = 10_000))]
fn solve_clne<'py>(py: Python<'py>, game: &Game, method: &str, tol: f64, max_iter: usize) -> PyResult<Bound<'py, PyDict>> {
    let sol = clne(&game.0, self::method(method)?, None, IterOptions { tol, max_iter }).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("P", mats(&sol.p_cl))?;
    d.set_item("K", mats(&sol.k_cl))?;
    d.set_item("Abar", mat_rows(&sol.abar_cl))?;
    d.set_item("spectral_radius", spectral_radius(&sol.abar_cl).map_err(err)?)?;
    d.set_item("residuals", sol.residuals)?;
    d.set_item("iterations", sol.iterations)?;
    Ok(d)
}

/// Invariant ellipsoid `{x : xᵀPx ≤ level}` for the chosen equilibrium.
#[pyfunction]
#[pyo3(signature = (scenario, kind = "ol"))]
fn terminal_set<'py>(py: Python<'py>, scenario: &Scenario, kind: &str) -> PyResult<Bound<'py, PyDict>> {
    let ts = match equilibrium(&scenario.0, kind)? {
        Solved::Ol(_, ts) | Solved::Cl(_, ts) => ts,
    };
    let d = PyDict::new(py);
    d.set_item("P", mat_rows(&ts.p_lyap))?;
    d.set_item("level", ts.level)?;
    d.set_item("binding_row", ts.binding_row)?;
    d.set_item("decrease_margin", ts.decrease_margin)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (scenario, x0 = None, kind = "ol", enforce_terminal = false))]
fn solve_finite_horizon<'py>(py: Python<'py>, scenario: &Scenario, x0: Option<Vec<f64>>, kind: &str, enforce_terminal: bool) -> PyResult<Bound<'py, PyDict>> {
    let scn = &scenario.0;
    let x0 = initial_state(scn, x0)?;
    let ctrl = controller(scn, kind, enforce_terminal)?;
    let vi = &ctrl.vi;
    let opts = ViOptions { tol: scn.solver.tol, max_iter: scn.solver.max_iter, step: scn.solver.step_size, ..ViOptions::default() };
    let res = solve_vi(vi, &x0, None, opts).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("states", vi.predict(&x0, &res.u).iter().map(to_vec).collect::<Vec<_>>())?;
    d.set_item("inputs", (0..vi.horizon).map(|t| to_vec(&vi.input_at(&res.u, t))).collect::<Vec<_>>())?;
    let costs: Vec<f64> = (0..vi.agents).map(|i| vi.agent_cost(i, &x0, &vi.agent_block(&res.u, i), &res.u)).collect();
    d.set_item("agent_costs", costs)?;
    d.set_item("residual", res.residual)?;
    d.set_item("iterations", res.iterations)?;
    d.set_item("converged", res.converged)?;
    d.set_item("terminal_multiplier", res.terminal_multiplier)?;
    Ok(d)
}

/// Receding-horizon closed loop. A run that stops early reports the reason
/// under `halted` instead of raising.
#[pyfunction]
#[pyo3(signature = (scenario, x0 = None, kind = "ol", steps = 200, enforce_terminal = false, warm_start = true))]
fn simulate<'py>(py: Python<'py>, scenario: &Scenario, x0: Option<Vec<f64>>, kind: &str, steps: usize, enforce_terminal: bool, warm_start: bool) -> PyResult<Bound<'py, PyDict>> {
    let scn = &scenario.0;
    let x0 = initial_state(scn, x0)?;
    let ctrl = controller(scn, kind, enforce_terminal)?;
    let cfg = RhcConfig { steps, enforce_terminal, warm_start, tol: scn.solver.tol, max_iter: scn.solver.max_iter, ..RhcConfig::default() };
    let run = run_rhc(&scn.game, &scn.constraints, &ctrl, &x0, &cfg).map_err(err)?;
    let (log, diag) = (&run.log, &run.diagnostics);
    let d = PyDict::new(py);
    d.set_item("states", log.states.iter().map(to_vec).collect::<Vec<_>>())?;
    d.set_item("inputs", log.inputs.iter().map(to_vec).collect::<Vec<_>>())?;
    d.set_item("stage_costs", log.stage_costs.clone())?;
    d.set_item("terminal_distance", log.terminal_distance.clone())?;
    d.set_item("entered_terminal_at", diag.entered_terminal_at)?;
    d.set_item("constraint_max_violation", diag.constraint_max_violation)?;
    d.set_item("converged_to_origin", diag.converged_to_origin)?;
    d.set_item("final_state_norm", diag.final_state_norm)?;
    d.set_item("monotone_after_entry", diag.monotone_after_entry)?;
    d.set_item("halted", run.halted.as_ref().map(|e| e.to_string()))?;
    Ok(d)
}

/// Platooning game for `vehicles` cars with its input boxes.
#[pyfunction]
#[pyo3(signature = (vehicles = 4))]
fn platooning_game(vehicles: usize) -> PyResult<Game> {
    build_platooning(&PlatoonParams::new(vehicles)).map(|p| Game(p.game)).map_err(err)
}

#[pymodule]
fn dyngame(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DyngameError", m.py().get_type::<DyngameError>())?;
    m.add_class::<Game>()?;
    m.add_class::<Scenario>()?;
    m.add_function(wrap_pyfunction!(check_assumptions, m)?)?;
    m.add_function(wrap_pyfunction!(solve_dare, m)?)?;
    m.add_function(wrap_pyfunction!(solve_olne, m)?)?;
    m.add_function(wrap_pyfunction!(solve_clne, m)?)?;
    m.add_function(wrap_pyfunction!(terminal_set, m)?)?;
    m.add_function(wrap_pyfunction!(solve_finite_horizon, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(platooning_game, m)?)?;
    Ok(())
}
