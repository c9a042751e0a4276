//! The `dyngame` command-line tool.

pub mod args;
pub mod manifest;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::info;
use serde_json::{json, Value};

use dyngame_core::clne::{closed_loop_assumptions, solve_clne, ClNeSolution, ClneMethod};
use dyngame_core::game::{build_platooning, PlatoonParams};
use dyngame_core::matrix_eq::spectral_radius;
use dyngame_core::olne::{build_cost_to_go, check_assumptions, solve_olne, AugmentedCostToGo, IterOptions, OlNeSolution};
use dyngame_core::rhc::{run_perturbation_experiment, run_rhc, Controller, Perturbation, RhcConfig, RhcRun, TrialResult};
use dyngame_core::scenario::{format_f64, mat_rows, platooning_config, to_json, trajectory_header, write_trajectory_csv, Scenario};
use dyngame_core::terminal::{compute_terminal_set, TerminalSet};
use dyngame_core::vi::{diagnose_monotonicity, solve_vi, ViOptions};
use dyngame_core::{Error, Mat, Result, Vector};

use args::*;
use manifest::{sha256_hex, sidecar, Recorder};

/// Bundled platooning scenario used by `reproduce`.
pub const PLATOONING_CONFIG: &str = include_str!("../configs/platooning.json");

/// Variance fractions of `max|P_ol|` swept by default.
pub const DEFAULT_FRACTIONS: [f64; 4] = [0.001, 0.01, 0.05, 0.1];

/// Process exit code for a library error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Json(_) | Error::Invalid { .. } | Error::Dimension(_) | Error::Io(_) => 1,
        Error::Assumption(_) | Error::NotSchur { .. } | Error::Resonance { .. } => 2,
        Error::NoConvergence { .. } | Error::Eigensolver | Error::Singular(_) | Error::Verification(_) => 3,
        Error::Infeasible(_) => 4,
    }
}

/// Runs a parsed command and returns its exit code. Errors are reported on
/// stderr by the caller.
pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Check(a) => check(a),
        Command::SolveOl(a) => solve_ol_cmd(a),
        Command::SolveCl(a) => solve_cl_cmd(a),
        Command::SolveFh(a) => solve_fh(a),
        Command::TerminalSet(a) => terminal_set(a),
        Command::Simulate(a) => simulate(a),
        Command::Experiment(Experiment::Perturb(a)) => perturb(a),
        Command::Reproduce(a) => reproduce(a),
        Command::ExportScenario(a) => export(a),
    }
}

struct Loaded {
    scn: Scenario,
    hash: String,
}

fn load(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| Error::Invalid { field: "config".into(), reason: e.to_string() })?;
    Ok(Loaded { scn: Scenario::parse(&text)?, hash: sha256_hex(&bytes) })
}

fn parse_vector(text: &str, n: usize) -> Result<Vector> {
    let vals: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Invalid { field: "x0".into(), reason: e.to_string() })?;
    if vals.len() != n {
        return Err(Error::Invalid { field: "x0".into(), reason: format!("expected {n} entries, got {}", vals.len()) });
    }
    Ok(Vector::from_vec(vals))
}

fn initial_state(scn: &Scenario, flag: Option<&str>) -> Result<Vector> {
    match (flag, &scn.x0) {
        (Some(s), _) => parse_vector(s, scn.game.n()),
        (None, Some(x)) => Ok(x.clone()),
        (None, None) => Err(Error::Invalid { field: "x0".into(), reason: "pass --x0 or set x0 in the scenario".into() }),
    }
}

fn mats(ms: &[Mat]) -> Value {
    json!(ms.iter().map(mat_rows).collect::<Vec<_>>())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            std::fs::write(p, text)?;
            info!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// Writes `value` as JSON to `out` (plus its manifest) or to stdout.
fn emit_json(out: Option<&Path>, value: &Value, rec: Recorder, summary: Value) -> Result<()> {
    emit(out, &to_json(value)?)?;
    if let Some(p) = out {
        rec.finish(&sidecar(p), &[p.to_path_buf()], summary)?;
    }
    Ok(())
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(header).map_err(to_io)?;
    for r in rows {
        w.write_record(r).map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}

fn iter_opts(a: &IterArgs) -> IterOptions {
    IterOptions { tol: a.tol, max_iter: a.max_iter }
}

fn open_loop(scn: &Scenario, opts: IterOptions) -> Result<(OlNeSolution, AugmentedCostToGo)> {
    let sol = solve_olne(&scn.game, None, opts)?;
    let ctg = build_cost_to_go(&scn.game, &sol)?;
    Ok((sol, ctg))
}

fn closed_loop(scn: &Scenario, method: Option<Method>, opts: IterOptions) -> Result<ClNeSolution> {
    let method = match method {
        Some(Method::Riccati) => ClneMethod::RiccatiRecursion,
        Some(Method::Lyapunov) => ClneMethod::LyapunovRecursion,
        None => scn.config.clne_method.unwrap_or_default(),
    };
    solve_clne(&scn.game, method, None, opts)
}

fn check(a: CheckArgs) -> Result<u8> {
    let Loaded { scn, hash } = load(&a.config.config)?;
    let rec = Recorder::new("check", Some(hash), None);
    let ol = check_assumptions(&scn.game)?;
    let (stab, det) = closed_loop_assumptions(&scn.game)?;
    let mut failures = Vec::new();
    if a.which != Which::Cl {
        failures.extend(ol.failures());
    }
    if a.which != Which::Ol {
        if !stab {
            failures.push("closed loop: (A, [B_1 ... B_N]) not stabilizable".to_string());
        }
        if !det {
            failures.push("closed loop: (A, sum Q_i) not detectable".to_string());
        }
    }
    let report = json!({
        "open_loop": ol,
        "closed_loop": { "stabilizable": stab, "detectable": det, "overall": stab && det },
        "failures": failures,
        "passed": failures.is_empty(),
    });
    emit_json(a.out.as_deref(), &report, rec, json!({ "passed": failures.is_empty() }))?;
    if failures.is_empty() {
        eprintln!("all requested assumptions hold");
        Ok(0)
    } else {
        for f in &failures {
            eprintln!("FAILED {f}");
        }
        Ok(2)
    }
}

fn solve_ol_cmd(a: SolveOlArgs) -> Result<u8> {
    let Loaded { scn, hash } = load(&a.config.config)?;
    let rec = Recorder::new("solve-ol", Some(hash), None);
    let (sol, ctg) = open_loop(&scn, iter_opts(&a.iter))?;
    let radius = spectral_radius(&sol.abar_ol)?;
    let agents: Vec<Value> = ctg
        .agents
        .iter()
        .map(|ag| {
            json!({
                "P_lqr": mat_rows(&ag.p_lqr),
                "K_lqr": mat_rows(&ag.k_lqr),
                "P_tilde": mat_rows(&ag.p_tilde),
                "K_tilde": mat_rows(&ag.k_tilde),
                "P_hat": mat_rows(&ag.p_hat),
                "are_residual": ag.are_residual,
                "min_eig": ag.min_eig,
                "closed_loop_radius": ag.closed_loop_radius,
            })
        })
        .collect();
    let out = json!({
        "P_ol": mats(&sol.p_ol),
        "K_ol": mats(&sol.k_ol),
        "Abar_ol": mat_rows(&sol.abar_ol),
        "spectral_radius": radius,
        "residuals": sol.residuals,
        "iterations": sol.iterations,
        "cost_to_go": agents,
    });
    let summary = json!({ "iterations": sol.iterations, "spectral_radius": radius, "max_residual": sol.residuals.iter().copied().fold(0.0, f64::max) });
    emit_json(a.out.as_deref(), &out, rec, summary)?;
    Ok(0)
}

fn solve_cl_cmd(a: SolveClArgs) -> Result<u8> {
    let Loaded { scn, hash } = load(&a.config.config)?;
    let rec = Recorder::new("solve-cl", Some(hash), None);
    let cl = closed_loop(&scn, a.method, iter_opts(&a.iter))?;
    let radius = spectral_radius(&cl.abar_cl)?;
    let out = json!({
        "method": cl.method,
        "P_cl": mats(&cl.p_cl),
        "K_cl": mats(&cl.k_cl),
        "Abar_cl": mat_rows(&cl.abar_cl),
        "spectral_radius": radius,
        "residuals": cl.residuals,
        "iterations": cl.iterations,
    });
    emit_json(a.out.as_deref(), &out, rec, json!({ "iterations": cl.iterations, "spectral_radius": radius }))?;
    Ok(0)
}

fn terminal_set_for(scn: &Scenario, abar: &Mat, gains: &[Mat]) -> Result<TerminalSet> {
    compute_terminal_set(abar, &scn.constraints, gains, scn.lyap_weight.as_ref())
}

fn terminal_set(a: TerminalSetArgs) -> Result<u8> {
    let Loaded { scn, hash } = load(&a.config.config)?;
    let rec = Recorder::new("terminal-set", Some(hash), None);
    let ts = match a.which {
        EquilibriumKind::Ol => {
            let sol = solve_olne(&scn.game, None, IterOptions::default())?;
            terminal_set_for(&scn, &sol.abar_ol, &sol.k_ol)?
        }
        EquilibriumKind::Cl => {
            let cl = closed_loop(&scn, None, IterOptions::default())?;
            terminal_set_for(&scn, &cl.abar_cl, &cl.k_cl)?
        }
    };
    let out = json!({
        "P": mat_rows(&ts.p_lyap),
        "level": ts.level,
        "binding_row": ts.binding_row,
        "decrease_margin": ts.decrease_margin,
        "closed_loop": mat_rows(&ts.closed_loop),
        "gains": mats(&ts.gains),
        "rows": mat_rows(&ts.rows),
        "bounds": ts.bounds.as_slice(),
    });
    emit_json(a.out.as_deref(), &out, rec, json!({ "level": ts.level, "binding_row": ts.binding_row }))?;
    Ok(0)
}

fn controller(scn: &Scenario, kind: Kind, enforce: bool) -> Result<Controller> {
    let (g, spec) = (&scn.game, &scn.constraints);
    match kind {
        Kind::Ol => {
            let (sol, ctg) = open_loop(scn, IterOptions::default())?;
            let ts = terminal_set_for(scn, &sol.abar_ol, &sol.k_ol)?;
            Controller::olne(g, spec, &sol, &ctg, &ts, enforce)
        }
        Kind::Cl => {
            let cl = closed_loop(scn, None, IterOptions::default())?;
            let ts = terminal_set_for(scn, &cl.abar_cl, &cl.k_cl)?;
            Controller::clne(g, spec, &cl, &ts, enforce)
        }
        Kind::None => {
            let sol = solve_olne(g, None, IterOptions::default())?;
            let ts = terminal_set_for(scn, &sol.abar_ol, &sol.k_ol)?;
            Controller::no_terminal(g, spec, &sol.k_ol, &ts, enforce)
        }
    }
}

fn kind_name(kind: Kind) -> &'static str {
    match kind {
        Kind::Ol => "ol",
        Kind::Cl => "cl",
        Kind::None => "none",
    }
}

fn solve_fh(a: SolveFhArgs) -> Result<u8> {
    let Loaded { scn, hash } = load(&a.config.config)?;
    let rec = Recorder::new(format!("solve-fh --kind {}", kind_name(a.kind)), Some(hash), None);
    let x0 = initial_state(&scn, a.x0.as_deref())?;
    let enforce = a.enforce_terminal || scn.config.rhc.as_ref().is_some_and(|r| r.enforce_terminal);
    let ctrl = controller(&scn, a.kind, enforce)?;
    let vi = &ctrl.vi;
    let opts = ViOptions { tol: a.tol.unwrap_or(scn.solver.tol), max_iter: scn.solver.max_iter, step: scn.solver.step_size, ..ViOptions::default() };
    let res = solve_vi(vi, &x0, None, opts)?;
    let states = vi.predict(&x0, &res.u);
    let (n, nag, m) = (scn.game.n(), scn.game.agents(), scn.game.m());
    let header: Vec<String> = trajectory_header(n, nag, m).into_iter().take(1 + n + nag * m).collect();
    let rows: Vec<Vec<String>> = states
        .iter()
        .enumerate()
        .map(|(t, x)| {
            let mut r = vec![t.to_string()];
            r.extend(x.iter().map(|v| format_f64(*v)));
            if t < vi.horizon {
                r.extend(vi.input_at(&res.u, t).iter().map(|v| format_f64(*v)));
            } else {
                r.resize(header.len(), String::new());
            }
            r
        })
        .collect();
    let costs: Vec<f64> = (0..nag).map(|i| vi.agent_cost(i, &x0, &vi.agent_block(&res.u, i), &res.u)).collect();
    let summary = json!({
        "residual": res.residual,
        "iterations": res.iterations,
        "converged": res.converged,
        "terminal_multiplier": res.terminal_multiplier,
        "agent_costs": costs,
        "monotonicity": diagnose_monotonicity(vi),
    });
    match &a.out {
        Some(p) => {
            write_csv(p, &header, &rows)?;
            rec.finish(&sidecar(p), std::slice::from_ref(p), summary.clone())?;
            print!("{}", to_json(&summary)?);
        }
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
            w.write_record(&header).map_err(to_io)?;
            for r in &rows {
                w.write_record(r).map_err(to_io)?;
            }
            w.flush()?;
            eprint!("{}", to_json(&summary)?);
        }
    }
    Ok(if res.converged { 0 } else { 3 })
}

fn rhc_config(scn: &Scenario, steps: Option<usize>, enforce: bool, no_warm: bool) -> RhcConfig {
    let section = scn.config.rhc.as_ref();
    RhcConfig {
        steps: steps.or(section.map(|r| r.steps)).unwrap_or(200),
        enforce_terminal: enforce || section.is_some_and(|r| r.enforce_terminal),
        warm_start: !no_warm && section.is_none_or(|r| r.warm_start),
        tol: scn.solver.tol,
        max_iter: scn.solver.max_iter,
        ..RhcConfig::default()
    }
}

fn run_summary(run: &RhcRun) -> Value {
    json!({
        "steps": run.log.steps(),
        "diagnostics": run.diagnostics,
        "halted": run.halted.as_ref().map(|e| e.to_string()),
    })
}

/// Exit code of a finished receding-horizon run.
fn run_code(run: &RhcRun) -> u8 {
    match &run.halted {
        Some(e) => exit_code(e),
        None if !run.diagnostics.nonconverged_steps.is_empty() => 3,
        None => 0,
    }
}

fn simulate(a: SimulateArgs) -> Result<u8> {
    let Loaded { scn, hash } = load(&a.config.config)?;
    let rec = Recorder::new(format!("simulate --kind {}", kind_name(a.kind)), Some(hash), a.seed.or(Some(scn.solver.seed)));
    let x0 = initial_state(&scn, a.x0.as_deref())?;
    let cfg = rhc_config(&scn, a.steps, a.enforce_terminal, a.no_warm_start);
    let ctrl = controller(&scn, a.kind, cfg.enforce_terminal)?;
    let run = run_rhc(&scn.game, &scn.constraints, &ctrl, &x0, &cfg)?;
    write_trajectory_csv(BufWriter::new(File::create(&a.out)?), &run.log, scn.game.agents(), scn.game.m())?;
    let summary = run_summary(&run);
    rec.finish(&sidecar(&a.out), std::slice::from_ref(&a.out), summary)?;
    if let Some(e) = &run.halted {
        eprintln!("run halted after {} steps: {e}", run.log.steps());
    }
    Ok(run_code(&run))
}

struct Sweep {
    trials: Vec<TrialResult>,
    fractions: Vec<Option<f64>>,
    variances: Vec<f64>,
}

fn sweep(scn: &Scenario, x0: &Vector, cfg: RhcConfig, values: &[f64], absolute: bool, trials: usize, seed: u64) -> Result<Sweep> {
    let (sol, ctg) = open_loop(scn, IterOptions::default())?;
    let ts = terminal_set_for(scn, &sol.abar_ol, &sol.k_ol)?;
    let ctrl = Controller::olne(&scn.game, &scn.constraints, &sol, &ctg, &ts, cfg.enforce_terminal)?;
    let cfg = RhcConfig { perturbation: Some(Perturbation { variance: 0.0, trials, seed }), ..cfg };
    let nominal = run_rhc(&scn.game, &scn.constraints, &ctrl, x0, &cfg)?;
    if let Some(e) = nominal.halted {
        return Err(e);
    }
    let scale = sol.p_ol.iter().map(|p| p.amax()).fold(0.0, f64::max);
    let (variances, fractions): (Vec<f64>, Vec<Option<f64>>) =
        values.iter().map(|v| if absolute { (*v, None) } else { (v * scale, Some(*v)) }).unzip();
    let trials = run_perturbation_experiment(&scn.game, &scn.constraints, &sol, &ts, x0, &cfg, &variances, &nominal.log)?;
    Ok(Sweep { trials, fractions, variances })
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[k] } else { 0.5 * (v[k - 1] + v[k]) })
}

impl Sweep {
    fn trial_rows(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let header = ["variance", "fraction", "trial", "max_relative_deviation", "stable", "failure"].map(String::from).to_vec();
        let rows = self
            .trials
            .iter()
            .map(|t| {
                let k = self.variances.iter().position(|v| v.to_bits() == t.variance.to_bits()).expect("trial variance is one of the inputs");
                vec![
                    format_f64(t.variance),
                    self.fractions[k].map(format_f64).unwrap_or_default(),
                    t.trial.to_string(),
                    if t.max_relative_deviation.is_finite() { format_f64(t.max_relative_deviation) } else { String::new() },
                    t.stable.to_string(),
                    t.failure.clone().unwrap_or_default(),
                ]
            })
            .collect();
        (header, rows)
    }

    fn summary(&self) -> Vec<Value> {
        self.variances
            .iter()
            .zip(&self.fractions)
            .map(|(v, f)| {
                let of: Vec<&TrialResult> = self.trials.iter().filter(|t| t.variance.to_bits() == v.to_bits()).collect();
                let devs: Vec<f64> = of.iter().map(|t| t.max_relative_deviation).filter(|d| d.is_finite()).collect();
                json!({
                    "variance": v,
                    "fraction": f,
                    "trials": of.len(),
                    "stable": of.iter().filter(|t| t.stable).count(),
                    "failed": of.iter().filter(|t| t.failure.is_some()).count(),
                    "median_deviation": median(devs.clone()),
                    "max_deviation": devs.iter().copied().reduce(f64::max),
                })
            })
            .collect()
    }
}

fn perturb(a: PerturbArgs) -> Result<u8> {
    let Loaded { scn, hash } = load(&a.config.config)?;
    let seed = a.seed.unwrap_or(scn.solver.seed);
    let rec = Recorder::new("experiment perturb", Some(hash), Some(seed));
    let x0 = initial_state(&scn, a.x0.as_deref())?;
    let cfg = rhc_config(&scn, a.steps, false, false);
    let s = sweep(&scn, &x0, cfg, &a.variances, a.absolute, a.trials, seed)?;
    let (header, rows) = s.trial_rows();
    write_csv(&a.out, &header, &rows)?;
    let summary = json!(s.summary());
    rec.finish(&sidecar(&a.out), std::slice::from_ref(&a.out), summary.clone())?;
    print!("{}", to_json(&summary)?);
    Ok(0)
}

fn reproduce(a: ReproduceArgs) -> Result<u8> {
    let scn = Scenario::parse(PLATOONING_CONFIG)?;
    let hash = sha256_hex(PLATOONING_CONFIG.as_bytes());
    std::fs::create_dir_all(&a.out_dir)?;
    let x0 = scn.x0.clone().expect("bundled scenario has x0");
    let cfg = rhc_config(&scn, a.steps, false, false);
    let dir = &a.out_dir;
    match a.figure {
        Figure::Platooning => {
            let rec = Recorder::new("reproduce platooning", Some(hash), None);
            let params: PlatoonParams = scn.config.platooning.clone().expect("bundled scenario has platooning parameters");
            let platoon = build_platooning(&params)?;
            let ctrl = controller(&scn, Kind::Ol, cfg.enforce_terminal)?;
            let run = run_rhc(&scn.game, &scn.constraints, &ctrl, &x0, &cfg)?;
            let outputs = write_platooning(dir, &platoon, &run, &scn)?;
            rec.finish(&dir.join("manifest.json"), &outputs, run_summary(&run))?;
            Ok(run_code(&run))
        }
        Figure::Perturbation => {
            let rec = Recorder::new("reproduce perturbation", Some(hash), Some(a.seed));
            let s = sweep(&scn, &x0, cfg, &DEFAULT_FRACTIONS, false, a.trials, a.seed)?;
            let trials = dir.join("perturbation_trials.csv");
            let (header, rows) = s.trial_rows();
            write_csv(&trials, &header, &rows)?;
            let summary = s.summary();
            let stats = dir.join("perturbation_summary.csv");
            let header = ["fraction", "variance", "trials", "stable", "failed", "median_deviation", "max_deviation"].map(String::from);
            let num = |v: &Value| v.as_f64().map(format_f64).unwrap_or_default();
            let rows: Vec<Vec<String>> = summary
                .iter()
                .map(|s| {
                    vec![
                        num(&s["fraction"]),
                        num(&s["variance"]),
                        s["trials"].to_string(),
                        s["stable"].to_string(),
                        s["failed"].to_string(),
                        num(&s["median_deviation"]),
                        num(&s["max_deviation"]),
                    ]
                })
                .collect();
            write_csv(&stats, &header, &rows)?;
            rec.finish(&dir.join("manifest.json"), &[trials, stats], json!(summary))?;
            Ok(0)
        }
    }
}

fn write_platooning(dir: &Path, platoon: &dyngame_core::game::Platoon, run: &RhcRun, scn: &Scenario) -> Result<Vec<PathBuf>> {
    let tau = platoon.params.sample_time;
    let nv = platoon.params.vehicles;
    let traj = dir.join("trajectory.csv");
    write_trajectory_csv(BufWriter::new(File::create(&traj)?), &run.log, scn.game.agents(), scn.game.m())?;

    let per_state = |f: &dyn Fn(&Vector) -> Vec<f64>| -> Vec<Vec<String>> {
        run.log
            .states
            .iter()
            .enumerate()
            .map(|(t, x)| {
                let mut r = vec![t.to_string(), format_f64(t as f64 * tau)];
                r.extend(f(x).into_iter().map(format_f64));
                r
            })
            .collect()
    };
    let named = |prefix: &str| -> Vec<String> {
        let mut h = vec!["t".to_string(), "time".to_string()];
        h.extend((1..=nv).map(|i| format!("{prefix}_{i}")));
        h
    };
    let positions = dir.join("positions.csv");
    write_csv(&positions, &named("p"), &per_state(&|x| platoon.positions(x)))?;
    let velocities = dir.join("velocities.csv");
    write_csv(&velocities, &named("v"), &per_state(&|x| platoon.velocities(x)))?;

    let inputs = dir.join("physical_inputs.csv");
    let rows: Vec<Vec<String>> = run
        .log
        .inputs
        .iter()
        .enumerate()
        .map(|(t, u)| {
            let mut r = vec![t.to_string(), format_f64(t as f64 * tau)];
            r.extend(platoon.physical_input(&run.log.states[t], u).iter().map(|v| format_f64(*v)));
            r
        })
        .collect();
    write_csv(&inputs, &named("a"), &rows)?;

    let term = dir.join("terminal_distance.csv");
    let rows: Vec<Vec<String>> = (0..run.log.steps())
        .map(|t| {
            vec![
                t.to_string(),
                format_f64(t as f64 * tau),
                format_f64(run.log.terminal_distance[t]),
                format_f64(run.log.terminal_distance_euclidean[t]),
            ]
        })
        .collect();
    write_csv(&term, &["t", "time", "distance", "euclidean_distance"].map(String::from), &rows)?;
    Ok(vec![traj, positions, velocities, inputs, term])
}

fn export(a: ExportArgs) -> Result<u8> {
    let rec = Recorder::new("export-scenario", None, None);
    let params = PlatoonParams::new(a.vehicles);
    let x0 = match &a.x0 {
        Some(s) => Some(parse_vector(s, 2 * a.vehicles)?),
        None => None,
    };
    let cfg = platooning_config(&params, x0.as_ref())?;
    let text = to_json(&cfg)?;
    std::fs::write(&a.out, &text)?;
    rec.finish(&sidecar(&a.out), std::slice::from_ref(&a.out), json!({ "vehicles": a.vehicles, "sha256": sha256_hex(text.as_bytes()) }))?;
    Ok(0)
}
