//! Receding-horizon control: at every step solve the finite-horizon game from
//! the measured state and apply the first stacked input.

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clne::ClNeSolution;
use crate::game::{feasible, ConstraintSpec, GameDefinition, SolverStat, TrajectoryLog};
use crate::olne::{AugmentedCostToGo, OlNeSolution};
use crate::terminal::TerminalSet;
use crate::vi::{build_vi, shifted_warm_start, solve_vi, stage_costs, FiniteHorizonVi, TerminalKind, TerminalValue, ValueSource, ViOptions};
use crate::{Error, Mat, Result, Vector};

/// `‖x[end]‖∞` below this counts as converged to the origin.
pub const STABILITY_THRESHOLD: f64 = 1e-4;
/// Slack allowed in the cumulative-cost decrease.
pub const DECREASE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Olne,
    ClneSurrogate,
    NoTerminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub variance: f64,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhcConfig {
    pub controller_kind: ControllerKind,
    pub steps: usize,
    pub enforce_terminal: bool,
    pub warm_start: bool,
    pub tol: f64,
    pub max_iter: usize,
    pub perturbation: Option<Perturbation>,
}

impl Default for RhcConfig {
    fn default() -> Self {
        Self {
            controller_kind: ControllerKind::Olne,
            steps: 200,
            enforce_terminal: false,
            warm_start: true,
            tol: 1e-8,
            max_iter: 200_000,
            perturbation: None,
        }
    }
}

impl RhcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol", "must be positive"));
        }
        if let Some(p) = &self.perturbation {
            if !(p.variance >= 0.0) || !p.variance.is_finite() {
                return Err(Error::invalid("variance", "must be a finite nonnegative number"));
            }
        }
        Ok(())
    }

    fn vi_options(&self) -> ViOptions {
        ViOptions { tol: self.tol, max_iter: self.max_iter, ..ViOptions::default() }
    }
}

/// Finite-horizon problem plus the feedback used to extend shifted solutions.
#[derive(Debug, Clone)]
pub struct Controller {
    pub vi: FiniteHorizonVi,
    pub tail_gains: Vec<Mat>,
    pub terminal: TerminalSet,
}

impl Controller {
    pub fn olne(game: &GameDefinition, spec: &ConstraintSpec, sol: &OlNeSolution, ctg: &AugmentedCostToGo, ts: &TerminalSet, enforce_terminal: bool) -> Result<Self> {
        let vi = build_vi(game, ValueSource::Olne { sol, ctg }, spec, enforce_terminal.then_some(ts))?;
        Ok(Self { vi, tail_gains: sol.k_ol.clone(), terminal: ts.clone() })
    }

    pub fn clne(game: &GameDefinition, spec: &ConstraintSpec, cl: &ClNeSolution, ts: &TerminalSet, enforce_terminal: bool) -> Result<Self> {
        let vi = build_vi(game, ValueSource::Clne(cl), spec, enforce_terminal.then_some(ts))?;
        Ok(Self { vi, tail_gains: cl.k_cl.clone(), terminal: ts.clone() })
    }

    /// Stage-cost-only horizon; `gains` only seed the warm start.
    pub fn no_terminal(game: &GameDefinition, spec: &ConstraintSpec, gains: &[Mat], ts: &TerminalSet, enforce_terminal: bool) -> Result<Self> {
        let vi = build_vi(game, ValueSource::None, spec, enforce_terminal.then_some(ts))?;
        Ok(Self { vi, tail_gains: gains.to_vec(), terminal: ts.clone() })
    }

    /// OL-NE controller with the terminal weights replaced by `p_terminal`.
    pub fn olne_with_terminal(game: &GameDefinition, spec: &ConstraintSpec, sol: &OlNeSolution, p_terminal: Vec<Mat>, ts: &TerminalSet, enforce_terminal: bool) -> Result<Self> {
        let vi = FiniteHorizonVi::assemble(
            game,
            TerminalKind::OlneTerminal,
            p_terminal.clone(),
            None,
            TerminalValue::Quadratic(p_terminal),
            spec,
            enforce_terminal.then_some(ts),
        )?;
        Ok(Self { vi, tail_gains: sol.k_ol.clone(), terminal: ts.clone() })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    /// `Σᵢ Jᵢ` at each step's solution.
    pub cum_cost_sequence: Vec<f64>,
    pub entered_terminal_at: Option<usize>,
    /// Natural residual of the shifted solution at the successor state.
    pub shifted_solution_residuals: Vec<f64>,
    pub constraint_max_violation: f64,
    pub converged_to_origin: bool,
    pub final_state_norm: f64,
    /// Largest `J(k+1) − J(k) + Σℓ(k)` after entry.
    pub max_decrease_violation: f64,
    pub monotone_after_entry: bool,
    pub nonconverged_steps: Vec<usize>,
}

#[derive(Debug)]
pub struct RhcRun {
    pub log: TrajectoryLog,
    pub diagnostics: DiagnosticsReport,
    /// Full input sequences solved at every step.
    pub solutions: Vec<Vector>,
    /// Set when the run stopped early.
    pub halted: Option<Error>,
}

pub fn run_rhc(game: &GameDefinition, spec: &ConstraintSpec, ctrl: &Controller, x0: &Vector, cfg: &RhcConfig) -> Result<RhcRun> {
    cfg.validate()?;
    if x0.len() != game.n() {
        return Err(Error::dim(format!("x0 has {} entries, expected {}", x0.len(), game.n())));
    }
    let vi = &ctrl.vi;
    let opts = cfg.vi_options();
    let mut log = TrajectoryLog { states: vec![x0.clone()], ..Default::default() };
    let mut solutions: Vec<Vector> = Vec::new();
    let mut cum = Vec::new();
    let mut shifted_res = Vec::new();
    let mut entered = None;
    let mut nonconverged = Vec::new();
    let mut violation = f64::NEG_INFINITY;
    let mut halted = None;
    let mut warm: Option<Vector> = None;

    for k in 0..cfg.steps {
        let x = log.states[k].clone();
        let res = match solve_vi(vi, &x, warm.as_ref().filter(|_| cfg.warm_start), opts) {
            Ok(r) => r,
            Err(e) => {
                warn!("step {k}: solver failed: {e}");
                halted = Some(e);
                break;
            }
        };
        if !res.converged {
            warn!("step {k}: solver stopped at residual {:.3e}; applying best iterate", res.residual);
            nonconverged.push(k);
        }
        let u0 = vi.first_input(&res.u);
        let pred = vi.predict(&x, &res.u);
        let x_term = pred.last().expect("horizon ≥ 1").clone();
        let member = ctrl.terminal.membership(&x_term);
        if entered.is_none() && member.inside && res.converged {
            debug!("terminal set entered at step {k}");
            entered = Some(k);
        }
        violation = violation.max(feasible(spec, &x, &u0).max_violation());
        cum.push(vi.total_cost(&x, &res.u));
        log.stage_costs.push(stage_costs(game, &x, &u0));
        log.solver_stats.push(SolverStat { iterations: res.iterations, residual: res.residual, converged: res.converged });
        log.terminal_distance.push(member.distance);
        log.terminal_distance_euclidean.push(member.euclidean_distance);
        let x_next = game.step(&x, &u0);
        let shifted = shifted_warm_start(vi, &res.u, &ctrl.tail_gains, &x_term);
        shifted_res.push(vi.instantiate(&x_next).natural_residual(&shifted)?);
        log.inputs.push(u0);
        log.states.push(x_next);
        solutions.push(res.u);
        warm = Some(shifted);
    }

    for x in &log.states {
        violation = violation.max(feasible(spec, x, &Vector::zeros(game.agents() * game.m())).max_state_violation);
    }
    let mut max_dec = f64::NEG_INFINITY;
    if let Some(e) = entered {
        for k in e..cum.len().saturating_sub(1) {
            let ell: f64 = log.stage_costs[k].iter().sum();
            max_dec = max_dec.max(cum[k + 1] - cum[k] + ell);
        }
    }
    let final_state_norm = log.states.last().map_or(0.0, |x| x.amax());
    let diagnostics = DiagnosticsReport {
        cum_cost_sequence: cum,
        entered_terminal_at: entered,
        shifted_solution_residuals: shifted_res,
        constraint_max_violation: violation.max(0.0),
        converged_to_origin: halted.is_none() && final_state_norm < STABILITY_THRESHOLD,
        final_state_norm,
        max_decrease_violation: max_dec,
        monotone_after_entry: entered.is_some() && max_dec <= DECREASE_SLACK,
        nonconverged_steps: nonconverged,
    };
    info!(
        "RHC run: {} steps, entry {:?}, final ‖x‖∞ {:.3e}",
        log.inputs.len(),
        diagnostics.entered_terminal_at,
        diagnostics.final_state_norm
    );
    Ok(RhcRun { log, diagnostics, solutions, halted })
}

/// Natural residual of each shifted solution at the successor state.
pub fn check_shifted_optimality(vi: &FiniteHorizonVi, log: &TrajectoryLog, solutions: &[Vector], gains: &[Mat]) -> Result<Vec<f64>> {
    (0..solutions.len())
        .map(|k| {
            let x = &log.states[k];
            let x_term = vi.predict(x, &solutions[k]).pop().expect("horizon ≥ 1");
            let shifted = shifted_warm_start(vi, &solutions[k], gains, &x_term);
            vi.instantiate(&log.states[k + 1]).natural_residual(&shifted)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialResult {
    pub variance: f64,
    pub trial: usize,
    /// `maxₜ ‖x(t) − x̂(t)‖ / maxₜ ‖x̂(t)‖`.
    pub max_relative_deviation: f64,
    pub stable: bool,
    pub failure: Option<String>,
}

/// Seed of trial `t` at variance index `v`, derived from the base seed.
fn trial_seed(seed: u64, v: usize, t: usize) -> u64 {
    use rand::RngCore;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((v as u64) << 32) | t as u64);
    rng.next_u64()
}

/// Adds i.i.d. `N(0, variance)` entries to every `P_olᵢ`.
pub fn perturb(p_ol: &[Mat], variance: f64, seed: u64) -> Result<Vec<Mat>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| Error::invalid("variance", e.to_string()))?;
    Ok(p_ol
        .iter()
        .map(|p| Mat::from_fn(p.nrows(), p.ncols(), |r, c| p[(r, c)] + normal.sample(&mut rng)))
        .collect())
}

/// Re-runs the OL-NE controller with noisy terminal weights and compares
/// each trajectory with the nominal one. Variances are absolute.
#[allow(clippy::too_many_arguments)]
pub fn run_perturbation_experiment(
    game: &GameDefinition,
    spec: &ConstraintSpec,
    sol: &OlNeSolution,
    ts: &TerminalSet,
    x0: &Vector,
    cfg: &RhcConfig,
    variances: &[f64],
    nominal: &TrajectoryLog,
) -> Result<Vec<TrialResult>> {
    cfg.validate()?;
    let pert = cfg.perturbation.ok_or_else(|| Error::invalid("perturbation", "missing trials and seed"))?;
    for v in variances {
        if !(*v >= 0.0) || !v.is_finite() {
            return Err(Error::invalid("variance", format!("{v} is not a finite nonnegative number")));
        }
    }
    let scale = nominal.states.iter().map(|x| x.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let jobs: Vec<(usize, usize)> = (0..variances.len()).flat_map(|v| (0..pert.trials).map(move |t| (v, t))).collect();
    let results: Vec<TrialResult> = jobs
        .par_iter()
        .map(|&(vi_idx, trial)| {
            let variance = variances[vi_idx];
            let outcome = (|| -> Result<(f64, bool)> {
                let p = perturb(&sol.p_ol, variance, trial_seed(pert.seed, vi_idx, trial))?;
                let ctrl = Controller::olne_with_terminal(game, spec, sol, p, ts, cfg.enforce_terminal)?;
                let run = run_rhc(game, spec, &ctrl, x0, cfg)?;
                if let Some(e) = run.halted {
                    return Err(e);
                }
                let dev = run
                    .log
                    .states
                    .iter()
                    .zip(&nominal.states)
                    .map(|(x, xh)| (x - xh).norm())
                    .fold(0.0, f64::max);
                Ok((dev / scale, run.diagnostics.converged_to_origin))
            })();
            match outcome {
                Ok((dev, stable)) => TrialResult { variance, trial, max_relative_deviation: dev, stable, failure: None },
                Err(e) => TrialResult { variance, trial, max_relative_deviation: f64::NAN, stable: false, failure: Some(e.to_string()) },
            }
        })
        .collect();
    Ok(results)
}
