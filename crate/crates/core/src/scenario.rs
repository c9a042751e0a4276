//! JSON scenario files and CSV trajectory export.
//!
//! Floats are written with 17 significant digits so that a scenario survives
//! a write/read cycle bit for bit.

use std::io::{self, Write};
use std::path::Path;

use serde::ser::Serialize;
use serde::Deserialize;
use serde_json::ser::{Formatter, Serializer};

use crate::clne::ClneMethod;
use crate::game::{build_platooning, ConstraintSpec, GameDefinition, InputBox, PlatoonParams, Polytope, TrajectoryLog};
use crate::{Error, Mat, Result, Vector};

/// `{:.16e}`: 17 significant digits, exact for every finite double.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Clone, Copy, Default)]
struct ExactFloats;

impl Formatter for ExactFloats {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            writer.write_all(format_f64(value).as_bytes())
        } else {
            writer.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

/// Pretty-printed JSON with exact float formatting.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = Serializer::with_formatter(&mut out, PrettyExact::default());
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json emits UTF-8"))
}

/// serde_json's pretty formatter with [`ExactFloats`] number output.
#[derive(Default)]
struct PrettyExact {
    inner: serde_json::ser::PrettyFormatter<'static>,
}

macro_rules! delegate {
    ($($name:ident($($arg:ident: $ty:ty),*)),* $(,)?) => {
        $(fn $name<W: ?Sized + Write>(&mut self, writer: &mut W $(, $arg: $ty)*) -> io::Result<()> {
            self.inner.$name(writer $(, $arg)*)
        })*
    };
}

impl Formatter for PrettyExact {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        ExactFloats.write_f64(writer, value)
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        ExactFloats.write_f32(writer, value)
    }

    delegate!(
        begin_array(),
        end_array(),
        begin_array_value(first: bool),
        end_array_value(),
        begin_object(),
        end_object(),
        begin_object_key(first: bool),
        begin_object_value(),
        end_object_value(),
    );
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolytopeConfig {
    #[serde(rename = "G")]
    pub g_mat: Vec<Vec<f64>>,
    pub g: Vec<f64>,
}

/// `null` entries are unbounded.
#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<PolytopeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_boxes: Option<Vec<BoxConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<PolytopeConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_tol() -> f64 {
    1e-8
}

fn default_max_iter() -> usize {
    200_000
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: default_tol(), max_iter: default_max_iter(), step_size: None, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhcSection {
    pub steps: usize,
    #[serde(default)]
    pub enforce_terminal: bool,
    #[serde(default = "yes")]
    pub warm_start: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(default)]
    pub constraints: ConstraintsConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Weight `W` of the terminal-set Lyapunov equation (identity if absent).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lyap_weight: Option<Vec<Vec<f64>>>,
    /// Feedback already folded into `A`, for mapping inputs back to physical ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prestabilizer: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub platooning: Option<PlatoonParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rhc: Option<RhcSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clne_method: Option<ClneMethod>,
}

/// Validated problem data.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub game: GameDefinition,
    pub constraints: ConstraintSpec,
    pub solver: SolverConfig,
    pub x0: Option<Vector>,
    pub lyap_weight: Option<Mat>,
}

fn matrix(field: &str, rows: &[Vec<f64>], cols: Option<usize>) -> Result<Mat> {
    let ncols = cols.unwrap_or_else(|| rows.first().map_or(0, Vec::len));
    if let Some((r, row)) = rows.iter().enumerate().find(|(_, row)| row.len() != ncols) {
        return Err(Error::invalid(field, format!("row {r} has {} entries, expected {ncols}", row.len())));
    }
    Ok(Mat::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

pub fn mat_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn polytope(field: &str, cfg: &PolytopeConfig, dim: usize) -> Result<Polytope> {
    let a = matrix(&format!("{field}.G"), &cfg.g_mat, Some(dim))?;
    if cfg.g.len() != a.nrows() {
        return Err(Error::invalid(format!("{field}.g"), format!("expected {} entries, got {}", a.nrows(), cfg.g.len())));
    }
    Ok(Polytope { a, b: Vector::from_vec(cfg.g.clone()) })
}

fn bound(v: Option<f64>, unbounded: f64) -> f64 {
    v.unwrap_or(unbounded)
}

impl Scenario {
    pub fn from_config(config: ScenarioConfig) -> Result<Self> {
        let a = matrix("A", &config.a, None)?;
        let n = a.nrows();
        let b: Vec<Mat> = config.b.iter().enumerate().map(|(i, m)| matrix(&format!("B[{i}]"), m, None)).collect::<Result<_>>()?;
        let q: Vec<Mat> = config.q.iter().enumerate().map(|(i, m)| matrix(&format!("Q[{i}]"), m, Some(n))).collect::<Result<_>>()?;
        let r: Vec<Mat> = config.r.iter().enumerate().map(|(i, m)| matrix(&format!("R[{i}]"), m, None)).collect::<Result<_>>()?;
        let game = GameDefinition::new(a, b, q, r, config.t)?;
        let (nag, m) = (game.agents(), game.m());

        let mut spec = ConstraintSpec::unconstrained(&game);
        if let Some(s) = &config.constraints.state {
            spec.state = polytope("constraints.state", s, n)?;
        }
        if let Some(c) = &config.constraints.coupling {
            spec.coupling = polytope("constraints.coupling", c, nag * m)?;
        }
        if let Some(boxes) = &config.constraints.input_boxes {
            if boxes.len() != nag {
                return Err(Error::invalid("constraints.input_boxes", format!("expected {nag} boxes, got {}", boxes.len())));
            }
            spec.input_boxes = boxes
                .iter()
                .enumerate()
                .map(|(i, bx)| {
                    if bx.lower.len() != m || bx.upper.len() != m {
                        return Err(Error::invalid(format!("constraints.input_boxes[{i}]"), format!("expected {m} bounds per side")));
                    }
                    Ok(InputBox {
                        lower: Vector::from_iterator(m, bx.lower.iter().map(|v| bound(*v, f64::NEG_INFINITY))),
                        upper: Vector::from_iterator(m, bx.upper.iter().map(|v| bound(*v, f64::INFINITY))),
                    })
                })
                .collect::<Result<_>>()?;
        }
        spec.validate(&game)?;

        let s = &config.solver;
        if !(s.tol > 0.0) {
            return Err(Error::invalid("solver.tol", "must be positive"));
        }
        if s.step_size.is_some_and(|h| !(h > 0.0)) {
            return Err(Error::invalid("solver.step_size", "must be positive"));
        }
        let x0 = match &config.x0 {
            Some(v) if v.len() != n => return Err(Error::invalid("x0", format!("expected {n} entries, got {}", v.len()))),
            Some(v) => Some(Vector::from_vec(v.clone())),
            None => None,
        };
        let lyap_weight = match &config.lyap_weight {
            Some(w) => {
                let w = matrix("lyap_weight", w, Some(n))?;
                if w.nrows() != n || crate::linalg::min_eig_sym(&crate::linalg::symmetrize(&w)) <= 0.0 {
                    return Err(Error::invalid("lyap_weight", "must be an n×n positive definite matrix"));
                }
                Some(w)
            }
            None => None,
        };
        if let Some(k) = &config.prestabilizer {
            if k.len() != nag {
                return Err(Error::invalid("prestabilizer", format!("expected {nag} gains")));
            }
            for (i, ki) in k.iter().enumerate() {
                let ki = matrix(&format!("prestabilizer[{i}]"), ki, Some(n))?;
                if ki.nrows() != m {
                    return Err(Error::invalid(format!("prestabilizer[{i}]"), format!("expected {m} rows")));
                }
            }
        }
        if let Some(rhc) = &config.rhc {
            if rhc.steps == 0 {
                return Err(Error::invalid("rhc.steps", "must be at least 1"));
            }
        }
        Ok(Self { solver: config.solver, config, game, constraints: spec, x0, lyap_weight })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_config(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        to_json(&self.config)
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    Scenario::load(path)
}

/// Default platooning initial state: followers 4 m/s faster than the leader
/// and 8 m short of their desired gap.
pub fn platooning_x0(params: &PlatoonParams) -> Result<Vector> {
    let p = build_platooning(params)?;
    let nv = params.vehicles;
    let mut speeds = vec![params.v_ref + 4.0; nv];
    speeds[0] = params.v_ref;
    let gaps: Vec<f64> = (0..nv).map(|i| if i == 0 { 0.0 } else { 12.0 }).collect();
    Ok(p.state_from_physical(&speeds, &gaps))
}

/// Scenario file describing the prestabilized platooning game.
pub fn platooning_config(params: &PlatoonParams, x0: Option<&Vector>) -> Result<ScenarioConfig> {
    let p = build_platooning(params)?;
    let g = &p.game;
    let x0 = match x0 {
        Some(x) => x.clone(),
        None => platooning_x0(params)?,
    };
    let opt = |v: f64| v.is_finite().then_some(v);
    Ok(ScenarioConfig {
        name: Some(format!("platooning-{}", params.vehicles)),
        a: mat_rows(&g.a),
        b: g.b.iter().map(mat_rows).collect(),
        q: g.q.iter().map(mat_rows).collect(),
        r: g.r.iter().map(mat_rows).collect(),
        t: g.horizon,
        constraints: ConstraintsConfig {
            state: Some(PolytopeConfig { g_mat: mat_rows(&p.constraints.state.a), g: p.constraints.state.b.iter().copied().collect() }),
            input_boxes: Some(
                p.constraints
                    .input_boxes
                    .iter()
                    .map(|bx| BoxConfig { lower: bx.lower.iter().map(|v| opt(*v)).collect(), upper: bx.upper.iter().map(|v| opt(*v)).collect() })
                    .collect(),
            ),
            coupling: None,
        },
        solver: SolverConfig::default(),
        x0: Some(x0.iter().copied().collect()),
        lyap_weight: None,
        prestabilizer: Some(p.k_stab.iter().map(mat_rows).collect()),
        platooning: Some(params.clone()),
        rhc: Some(RhcSection { steps: 300, enforce_terminal: false, warm_start: true }),
        clne_method: None,
    })
}

/// Header of the trajectory CSV.
pub fn trajectory_header(n: usize, agents: usize, m: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((0..n).map(|k| format!("x_{k}")));
    for i in 1..=agents {
        h.extend((0..m).map(|k| format!("u_{{{i},{k}}}")));
    }
    h.extend((1..=agents).map(|i| format!("cost_{i}")));
    h.extend(["term_dist", "vi_iters", "vi_residual"].map(String::from));
    h
}

/// One row per applied step plus a final state-only row.
pub fn write_trajectory_csv<W: Write>(out: W, log: &TrajectoryLog, agents: usize, m: usize) -> Result<()> {
    let n = log.states.first().map_or(0, Vector::len);
    let mut w = csv::Writer::from_writer(out);
    let header = trajectory_header(n, agents, m);
    let io_err = |e: csv::Error| Error::Io(io::Error::other(e));
    w.write_record(&header).map_err(io_err)?;
    for (t, x) in log.states.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(x.iter().map(|v| format_f64(*v)));
        if t < log.inputs.len() {
            rec.extend(log.inputs[t].iter().map(|v| format_f64(*v)));
            rec.extend(log.stage_costs[t].iter().map(|v| format_f64(*v)));
            rec.push(format_f64(log.terminal_distance[t]));
            rec.push(log.solver_stats[t].iterations.to_string());
            rec.push(format_f64(log.solver_stats[t].residual));
        } else {
            rec.resize(header.len(), String::new());
        }
        w.write_record(&rec).map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}
