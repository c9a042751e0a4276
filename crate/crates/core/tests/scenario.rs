use dyngame_core::game::{build_platooning, PlatoonParams, SolverStat, TrajectoryLog};
use dyngame_core::scenario::*;
use dyngame_core::{Error, Vector};

const SCALAR: &str = r#"{
  "A": [[1.0]],
  "B": [[[1.0]], [[1.0]]],
  "Q": [[[1.0]], [[1.0]]],
  "R": [[[1.0]], [[1.0]]],
  "T": 3,
  "constraints": {"input_boxes": [{"lower": [-1.0], "upper": [null]}, {"lower": [null], "upper": [null]}]},
  "solver": {"tol": 1e-9, "max_iter": 1000, "step_size": null, "seed": 4}
}"#;

#[test]
fn minimal_scalar_scenario() {
    let s = Scenario::parse(SCALAR).unwrap();
    assert_eq!((s.game.n(), s.game.agents(), s.game.m(), s.game.horizon), (1, 2, 1, 3));
    assert_eq!(s.constraints.input_boxes[0].lower[0], -1.0);
    assert_eq!(s.constraints.input_boxes[0].upper[0], f64::INFINITY);
    assert_eq!(s.solver.seed, 4);
    assert!(s.x0.is_none());
    let again = Scenario::parse(&s.to_json().unwrap()).unwrap();
    assert_eq!(again.config, s.config);
}

fn field_of(text: &str) -> String {
    match Scenario::parse(text) {
        Err(Error::Invalid { field, .. }) => field,
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn validation_names_the_field() {
    assert!(field_of(&SCALAR.replace(r#""R": [[[1.0]], [[1.0]]]"#, r#""R": [[[0.0]], [[1.0]]]"#)).starts_with('R'));
    assert_eq!(field_of(&SCALAR.replace(r#""tol": 1e-9"#, r#""tol": -1.0"#)), "solver.tol");
    assert_eq!(field_of(&SCALAR.replace(r#""T": 3"#, r#""T": 3, "x0": [1.0, 2.0]"#)), "x0");
    assert_eq!(field_of(&SCALAR.replace(r#""T": 3"#, r#""T": 3, "rhc": {"steps": 0}"#)), "rhc.steps");
}

#[test]
fn malformed_and_unknown_input() {
    assert!(matches!(Scenario::parse("{\"A\": [[1.0]"), Err(Error::Json(_))));
    assert!(matches!(Scenario::parse(&SCALAR.replace(r#""T": 3"#, r#""T": 3, "colour": 1"#)), Err(Error::Json(_))));
    assert!(matches!(Scenario::load(std::path::Path::new("/nonexistent/scenario.json")), Err(Error::Io(_))));
}

#[test]
fn platooning_export_round_trips_exactly() {
    let params = PlatoonParams::new(4);
    let text = to_json(&platooning_config(&params, None).unwrap()).unwrap();
    let s = Scenario::parse(&text).unwrap();
    assert_eq!(s.to_json().unwrap(), text);
    let p = build_platooning(&params).unwrap();
    assert_eq!(s.game.a, p.game.a);
    assert_eq!(s.game.b, p.game.b);
    assert_eq!(s.constraints.state.a, p.constraints.state.a);
    assert_eq!(s.constraints.state.b, p.constraints.state.b);
    assert_eq!(s.x0.unwrap(), platooning_x0(&params).unwrap());
    assert_eq!(s.config.rhc.unwrap().steps, 300);
}

#[test]
fn trajectory_csv_layout() {
    let log = TrajectoryLog {
        states: vec![Vector::from_vec(vec![1.0, 0.5]), Vector::from_vec(vec![0.25, 0.0])],
        inputs: vec![Vector::from_vec(vec![-0.5, 0.1])],
        stage_costs: vec![vec![0.75, 0.6]],
        solver_stats: vec![SolverStat { iterations: 7, residual: 1e-10, converged: true }],
        terminal_distance: vec![0.0],
        terminal_distance_euclidean: vec![0.0],
    };
    let mut out = Vec::new();
    write_trajectory_csv(&mut out, &log, 2, 1).unwrap();
    let mut r = csv::Reader::from_reader(out.as_slice());
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, trajectory_header(2, 2, 1));
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][3].parse::<f64>().unwrap(), -0.5);
    assert_eq!(&rows[0][8], "7");
    assert_eq!(&rows[1][0], "1");
    assert_eq!(&rows[1][3], "");
}
