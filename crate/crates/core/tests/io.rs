use std::fs;

use attrition::game::Game;
use attrition::io::*;
use attrition::model::Player;
use attrition::montecarlo::SimConfig;
use attrition::solver::{solve_grid_equilibrium, SolverOptions};
use attrition::verify::VerificationReport;

const MINIMAL: &str = r#"
[metadata]
name = "minimal"

[model]
family = "bm"
lower = 0.0
upper = 1.0

[payoffs]
g1 = "1 + x*(1 - x)"
f1 = "1 + 2*x*(1 - x)"
g2 = "1 + x*(1 - x)"
f2 = "1 + 2*x*(1 - x)"
r1 = 0.5
r2 = 0.5
"#;

fn corpus() -> Vec<(String, String)> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/problems");
    let mut out: Vec<(String, String)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .map(|p| (p.display().to_string(), fs::read_to_string(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn minimal_document_gets_defaults() {
    let doc = parse_problem_str(MINIMAL).unwrap();
    assert_eq!(doc.metadata.seed, 0);
    assert_eq!(doc.grid, GridBlock::default());
    assert_eq!(doc.solver, SolverOptions::default());
    assert_eq!(doc.simulation.rng_seed, 1);
    assert_eq!(
        doc.model,
        ModelBlock::Bm {
            lower: 0.0,
            upper: 1.0,
            sigma: 1.0,
            drift: 0.0
        }
    );
    doc.problem().unwrap();
}

#[test]
fn documents_round_trip() {
    let mut docs = vec![parse_problem_str(MINIMAL).unwrap()];
    for (name, text) in corpus() {
        docs.push(parse_problem_str(&text).unwrap_or_else(|e| panic!("{name}: {e}")));
    }
    assert!(docs.len() >= 6);
    for doc in docs {
        let text = emit_problem(&doc);
        let back = parse_problem_str(&text).unwrap();
        assert_eq!(back, doc);
        assert_eq!(emit_problem(&back), text);
        assert_eq!(back.hash(), doc.hash());
    }
}

#[test]
fn negative_stop_payoff_violates_assumptions() {
    let text = MINIMAL.replace(r#"g1 = "1 + x*(1 - x)""#, r#"g1 = "x^2 - 1""#);
    assert!(matches!(parse_problem_str(&text), Err(IoError::Assumption(_))));
}

#[test]
fn missing_discount_is_a_schema_error() {
    let text = MINIMAL.replace("r1 = 0.5\n", "");
    match parse_problem_str(&text) {
        Err(IoError::Schema { path, line, .. }) => {
            assert_eq!(path, "payoffs.r1");
            assert_eq!(text.lines().nth(line - 1).unwrap(), "[payoffs]");
        }
        other => panic!("expected a schema error, got {other:?}"),
    }
}

#[test]
fn unknown_key_is_located() {
    let text = MINIMAL.replace("upper = 1.0", "upper = 1.0\nsigmaa = 2.0");
    match parse_problem_str(&text) {
        Err(IoError::Schema { path, message, .. }) => {
            assert_eq!(path, "model.sigmaa");
            assert!(message.contains("sigmaa"));
        }
        other => panic!("expected a schema error, got {other:?}"),
    }
}

#[test]
fn bad_expression_reports_token() {
    let text = MINIMAL.replace(r#"f2 = "1 + 2*x*(1 - x)""#, r#"f2 = "1 + 2*x*(1 - x))""#);
    match parse_problem_str(&text) {
        Err(IoError::Expression { field, token, .. }) => {
            assert_eq!(field, "payoffs.f2");
            assert_eq!(token, ")");
        }
        other => panic!("expected an expression error, got {other:?}"),
    }
    let text = MINIMAL.replace(r#"f2 = "1 + 2*x*(1 - x)""#, r#"f2 = "1 + 2*y""#);
    assert!(matches!(
        parse_problem_str(&text),
        Err(IoError::Expression { token, .. }) if token == "y"
    ));
}

#[test]
fn custom_and_tabulated_functions_parse() {
    let text = MINIMAL
        .replace(
            "family = \"bm\"",
            "family = \"custom\"\ndrift = \"0.1*(0.5 - x)\"\nvolatility = { x = [0.0, 1.0], y = [0.8, 1.2] }",
        )
        .replace(r#"g2 = "1 + x*(1 - x)""#, "g2 = { x = [0.0, 0.5, 1.0], y = [1.0, 1.25, 1.0] }")
        .replace(r#"f2 = "1 + 2*x*(1 - x)""#, "f2 = { x = [0.0, 0.5, 1.0], y = [1.0, 1.5, 1.0] }");
    let doc = parse_problem_str(&text).unwrap();
    let p = doc.problem().unwrap();
    assert!((p.model().volatility(0.5) - 1.0).abs() < 1e-15);
    assert!((p.payoffs().f2.eval(0.25) - 1.25).abs() < 1e-15);
    assert_eq!(parse_problem_str(&emit_problem(&doc)).unwrap(), doc);
}

#[test]
fn seed_derives_every_stream() {
    let mut doc = parse_problem_str(MINIMAL).unwrap();
    let h = doc.hash();
    doc.set_seed(41);
    assert_eq!((doc.solver.rng_seed, doc.simulation.rng_seed), (41, 42));
    assert_ne!(doc.hash(), h);
}

#[test]
fn floats_are_written_with_seventeen_digits() {
    let json = to_json(&vec![0.1, 1.0 / 3.0, -2.5e-300]);
    assert!(json.contains("1.0000000000000001e-1"));
    assert!(json.contains("3.3333333333333331e-1"));
    let back: Vec<f64> = serde_json::from_str(&json).unwrap();
    assert_eq!(back, vec![0.1, 1.0 / 3.0, -2.5e-300]);
    let cfg = SimConfig::default();
    let back: SimConfig = serde_json::from_str(&to_json(&cfg)).unwrap();
    assert_eq!(back, cfg);
}

fn solved_document() -> ResultDocument {
    let doc = parse_problem_str(MINIMAL).unwrap();
    let problem = doc.problem().unwrap();
    let game = Game::new(&problem, doc.grid(&problem, 7).unwrap()).unwrap();
    let result = solve_grid_equilibrium(&game, &doc.solver).unwrap();
    ResultDocument {
        schema_version: SCHEMA_VERSION,
        tool_version: "test".into(),
        command: "solve".into(),
        problem_name: doc.metadata.name.clone(),
        problem_hash: doc.hash(),
        seed: 0,
        tolerance: 1e-8,
        equilibria: vec![StoredEquilibrium { result, law: None }],
        refinement: None,
        verification: VerificationReport::new(Vec::new()),
    }
}

#[test]
fn result_documents_round_trip() {
    let doc = solved_document();
    let text = to_json(&doc);
    assert_eq!(parse_result_str(&text).unwrap(), doc);
    let bumped = text.replacen("\"schema_version\": 1", "\"schema_version\": 9", 1);
    assert!(matches!(parse_result_str(&bumped), Err(IoError::Result(_))));
}

#[test]
fn plot_tables_for_a_symmetric_solution() {
    let mut doc = solved_document();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_plot_data(&doc, dir.path()).unwrap();
    assert_eq!(files.len(), 3);
    let rates = fs::read_to_string(dir.path().join("rates.csv")).unwrap();
    let mut lines = rates.lines();
    assert_eq!(lines.next(), Some("x,unit1,unit2,rate1,rate2"));
    for line in lines {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!((cols[1] - cols[2]).abs() <= 1e-8, "{line}");
        assert!((cols[3] - cols[4]).abs() <= 1e-6 * (1.0 + cols[3].abs()) || cols[3] == cols[4], "{line}");
    }
    let values = fs::read_to_string(dir.path().join("values.csv")).unwrap();
    assert_eq!(values.lines().count(), 1 + 9);

    let law = attrition::solver::stopped_distribution(
        &Game::new(
            &parse_problem_str(MINIMAL).unwrap().problem().unwrap(),
            doc.equilibria[0].result.profile.grid().clone(),
        )
        .unwrap(),
        &doc.equilibria[0].result.profile,
        4,
        attrition::solver::LawView::Game,
    )
    .unwrap()
    .law();
    doc.equilibria[0].law = Some(law);
    let second = doc.equilibria[0].clone();
    doc.equilibria.push(second);
    let dir = tempfile::tempdir().unwrap();
    let files = emit_plot_data(&doc, dir.path()).unwrap();
    assert_eq!(files.len(), 8);
    assert!(dir.path().join("rates_level1.csv").exists());
    assert!(dir.path().join("law_level0.csv").exists());
    let u = doc.equilibria[0].result.profile.units(Player::One);
    assert!(u.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn empty_result_writes_nothing() {
    let mut doc = solved_document();
    doc.equilibria.clear();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("plots");
    assert!(emit_plot_data(&doc, &out).unwrap().is_empty());
    assert!(!out.exists());
}
