//! Command-line entry points.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, ValueEnum};
use serde::Serialize;

use crate::game::Game;
use crate::io::{
    emit_plot_data, parse_problem, read_result, to_json, write_text, IoError, ProblemDocument, ResultDocument,
    StoredEquilibrium, SCHEMA_VERSION,
};
use crate::model::{Player, Problem};
use crate::oracle::{enumerate_pure_responses, one_point_bisection, OnePointEquilibrium};
use crate::solver::{
    reassess_refinement, refine_and_solve, solve_grid_equilibrium, stopped_distribution, EquilibriumResult, LawView,
    SolverError,
};
use crate::stopping::StrategyProfile;
use crate::verify::{certify_equilibrium, cross_validate, refinement_diagnostics, Check, CheckStatus, VerificationReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_ASSUMPTIONS: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;
pub const EXIT_VERIFICATION: i32 = 5;
/// Output, file-system and other failures not covered above.
pub const EXIT_OTHER: i32 = 1;

pub const RESULT_FILE: &str = "result.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const SIMULATION_FILE: &str = "simulation.json";
pub const ORACLE_FILE: &str = "oracle.json";
pub const VERIFICATION_FILE: &str = "verification.json";
pub const PLOT_DIR: &str = "plots";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Solve each configured grid size and certify the result.
    Solve,
    /// Solve the nested refinement schedule.
    Refine,
    /// Re-certify a stored result document.
    Verify,
    /// Compare stored equilibria with Monte Carlo estimates.
    Simulate,
    /// Run the brute-force reference solvers.
    Oracle,
}

#[derive(Debug, Clone, Parser)]
#[command(name = "attrition", version, about = "Equilibria of diffusion-driven wars of attrition")]
pub struct Cli {
    pub command: Command,
    pub problem: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the document seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Residual and certification tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Number of refinement levels.
    #[arg(long)]
    pub levels: Option<usize>,
    /// Number of simulated paths.
    #[arg(long)]
    pub paths: Option<usize>,
}

#[derive(Debug)]
enum Failure {
    Io(IoError),
    Solver(SolverError),
    Other(String),
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::Io(e)
    }
}

impl From<SolverError> for Failure {
    fn from(e: SolverError) -> Self {
        Failure::Solver(e)
    }
}

impl Failure {
    fn exit_code(&self) -> i32 {
        match self {
            Failure::Io(IoError::Assumption(_)) => EXIT_ASSUMPTIONS,
            Failure::Io(IoError::Schema { .. } | IoError::Expression { .. }) => EXIT_PARSE,
            Failure::Io(IoError::File { .. }) => EXIT_PARSE,
            Failure::Io(IoError::Result(_)) => EXIT_VERIFICATION,
            Failure::Solver(SolverError::NotConverged { .. }) => EXIT_NOT_CONVERGED,
            Failure::Solver(_) | Failure::Other(_) => EXIT_OTHER,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Io(e) => e.to_string(),
            Failure::Solver(e) => e.to_string(),
            Failure::Other(s) => s.clone(),
        }
    }
}

#[derive(Debug, Default, Serialize)]
struct Timings {
    command: String,
    phases: Vec<(String, f64)>,
}

impl Timings {
    fn lap(&mut self, name: &str, since: Instant) {
        self.phases.push((name.into(), since.elapsed().as_secs_f64()));
    }
}

struct Context {
    doc: ProblemDocument,
    problem: Problem,
    hash: String,
    tolerance: f64,
    tol_override: Option<f64>,
    out: PathBuf,
}

/// Runs one command and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.exit_code()
        }
    }
}

fn load(cli: &Cli) -> Result<Context, Failure> {
    let mut doc = parse_problem(&cli.problem)?;
    let hash = doc.hash();
    if let Some(seed) = cli.seed {
        doc.set_seed(seed);
    }
    if let Some(tol) = cli.tol {
        if !(tol > 0.0 && tol.is_finite()) {
            return Err(Failure::Other(format!("tolerance must be positive, got {tol}")));
        }
        doc.solver.residual_tolerance = tol;
    }
    if let Some(levels) = cli.levels {
        doc.grid.levels = levels;
    }
    if let Some(paths) = cli.paths {
        doc.simulation.n_paths = paths;
    }
    let problem = doc.problem()?;
    Ok(Context {
        tolerance: doc.solver.residual_tolerance,
        tol_override: cli.tol,
        doc,
        problem,
        hash,
        out: cli.out.clone(),
    })
}

fn dispatch(cli: &Cli) -> Result<i32, Failure> {
    let ctx = load(cli)?;
    let mut timings = Timings {
        command: format!("{:?}", cli.command).to_lowercase(),
        ..Timings::default()
    };
    let code = match cli.command {
        Command::Solve => solve(&ctx, &mut timings)?,
        Command::Refine => refine(&ctx, &mut timings)?,
        Command::Verify => verify(&ctx, &mut timings)?,
        Command::Simulate => simulate(&ctx, &mut timings)?,
        Command::Oracle => oracle(&ctx, &mut timings)?,
    };
    write_text(&ctx.out.join(TIMINGS_FILE), &to_json(&timings))?;
    Ok(code)
}

fn law_start(game: &Game, problem: &Problem) -> usize {
    let mid = problem.model().midpoint();
    let pts = game.grid().points();
    (0..pts.len())
        .min_by(|&a, &b| (pts[a] - mid).abs().total_cmp(&(pts[b] - mid).abs()))
        .expect("grid is nonempty")
}

fn store(game: &Game, problem: &Problem, result: EquilibriumResult) -> StoredEquilibrium {
    let law = stopped_distribution(game, &result.profile, law_start(game, problem), LawView::Game)
        .ok()
        .map(|l| l.law());
    StoredEquilibrium { result, law }
}

fn label(report: VerificationReport, prefix: &str) -> Vec<Check> {
    report
        .checks
        .into_iter()
        .map(|mut c| {
            c.name = format!("{prefix}/{}", c.name);
            c
        })
        .collect()
}

fn summarize(report: &VerificationReport) {
    for c in &report.checks {
        let status = match c.status {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Skipped => "skip",
        };
        let measured = c.measured.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "-".into());
        let threshold = c.threshold.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "-".into());
        let witness = c.witness.as_deref().map(|w| format!("  [{w}]")).unwrap_or_default();
        println!("{status:>4}  {:<40} {measured:>10} <= {threshold:<10}{witness}", c.name);
    }
    println!("overall: {}", if report.overall { "pass" } else { "FAIL" });
}

fn finish(ctx: &Context, command: &str, doc: ResultDocument, not_converged: bool) -> Result<i32, Failure> {
    write_text(&ctx.out.join(RESULT_FILE), &to_json(&doc))?;
    emit_plot_data(&doc, &ctx.out.join(PLOT_DIR))?;
    summarize(&doc.verification);
    println!("{command}: wrote {}", ctx.out.join(RESULT_FILE).display());
    Ok(if not_converged {
        EXIT_NOT_CONVERGED
    } else if !doc.verification.overall {
        EXIT_VERIFICATION
    } else {
        EXIT_OK
    })
}

fn result_document(ctx: &Context, command: &str) -> ResultDocument {
    ResultDocument {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        problem_name: ctx.doc.metadata.name.clone(),
        problem_hash: ctx.hash.clone(),
        seed: ctx.doc.metadata.seed,
        tolerance: ctx.tolerance,
        equilibria: Vec::new(),
        refinement: None,
        verification: VerificationReport::new(Vec::new()),
    }
}

fn solve(ctx: &Context, timings: &mut Timings) -> Result<i32, Failure> {
    let mut doc = result_document(ctx, "solve");
    let mut checks = Vec::new();
    let mut not_converged = false;
    for &n in &ctx.doc.grid.sizes {
        let t = Instant::now();
        let game = Game::new(&ctx.problem, ctx.doc.grid(&ctx.problem, n)?).map_err(SolverError::from)?;
        match solve_grid_equilibrium(&game, &ctx.doc.solver) {
            Ok(result) => {
                let report = certify_equilibrium(&game, &result.profile, ctx.tolerance);
                checks.extend(label(report, &format!("n{n}")));
                doc.equilibria.push(store(&game, &ctx.problem, result));
            }
            Err(SolverError::NotConverged { best_residual, .. }) => {
                not_converged = true;
                checks.push(Check {
                    name: format!("n{n}/converged"),
                    status: CheckStatus::Fail,
                    measured: Some(best_residual),
                    threshold: Some(ctx.tolerance),
                    witness: Some("solver did not reach the tolerance".into()),
                });
            }
            Err(e) => return Err(e.into()),
        }
        timings.lap(&format!("solve n{n}"), t);
    }
    doc.verification = VerificationReport::new(checks);
    finish(ctx, "solve", doc, not_converged)
}

fn refine(ctx: &Context, timings: &mut Timings) -> Result<i32, Failure> {
    let t = Instant::now();
    let schedule = ctx.doc.schedule(&ctx.problem, ctx.doc.grid.levels)?;
    let report = refine_and_solve(&ctx.problem, &schedule, &ctx.doc.solver)?;
    timings.lap("refine", t);
    let mut doc = result_document(ctx, "refine");
    let mut checks = Vec::new();
    let mut not_converged = false;
    for (k, level) in report.levels.iter().enumerate() {
        match &level.result {
            Some(result) => {
                let game = Game::new(&ctx.problem, level.grid.clone()).map_err(SolverError::from)?;
                checks.extend(label(
                    certify_equilibrium(&game, &result.profile, ctx.tolerance),
                    &format!("level{k}"),
                ));
                doc.equilibria.push(StoredEquilibrium {
                    result: result.clone(),
                    law: level.law.clone(),
                });
            }
            None => not_converged = true,
        }
    }
    checks.extend(label(
        refinement_diagnostics(&report, ctx.doc.grid.refinement_tolerance),
        "refinement",
    ));
    doc.refinement = Some(report);
    doc.verification = VerificationReport::new(checks);
    finish(ctx, "refine", doc, not_converged)
}

/// Re-certifies `stored` from its profiles, ignoring stored values and checks.
pub fn reverify(
    problem: &Problem,
    hash: &str,
    stored: &ResultDocument,
    tolerance: f64,
    refinement_tolerance: f64,
) -> VerificationReport {
    let mut checks = vec![Check {
        name: "problem_hash".into(),
        status: if stored.problem_hash == hash {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        },
        measured: None,
        threshold: None,
        witness: (stored.problem_hash != hash).then(|| format!("stored {} != {hash}", stored.problem_hash)),
    }];
    if stored.equilibria.is_empty() {
        checks.push(Check {
            name: "equilibria".into(),
            status: CheckStatus::Fail,
            measured: None,
            threshold: None,
            witness: Some("no stored equilibria".into()),
        });
    }
    for (k, eq) in stored.equilibria.iter().enumerate() {
        let prefix = format!("eq{k}");
        let r = &eq.result;
        let rebuilt = StrategyProfile::from_units(
            r.profile.grid().clone(),
            r.profile.units(Player::One).to_vec(),
            r.profile.units(Player::Two).to_vec(),
        );
        let game = Game::new(problem, r.profile.grid().clone());
        let (profile, game) = match (rebuilt, game) {
            (Ok(p), Ok(g)) => (p, g),
            (Err(e), _) => {
                checks.push(failed(&prefix, "profile", e.to_string()));
                continue;
            }
            (_, Err(e)) => {
                checks.push(failed(&prefix, "profile", e.to_string()));
                continue;
            }
        };
        checks.extend(label(certify_equilibrium(&game, &profile, tolerance), &prefix));
        match game.payoff_values(&profile) {
            Ok(v) => {
                let mut worst = 0.0f64;
                for (a, b) in v.w1.iter().chain(&v.w2).zip(r.values.w1.iter().chain(&r.values.w2)) {
                    worst = worst.max((a - b).abs());
                }
                if r.values.w1.len() != v.w1.len() || r.values.w2.len() != v.w2.len() {
                    worst = f64::INFINITY;
                }
                checks.push(Check {
                    name: format!("{prefix}/stored_values"),
                    status: if worst <= tolerance { CheckStatus::Pass } else { CheckStatus::Fail },
                    measured: Some(worst),
                    threshold: Some(tolerance),
                    witness: (worst > tolerance).then(|| "stored values differ from recomputed".into()),
                });
            }
            Err(e) => checks.push(failed(&prefix, "stored_values", e.to_string())),
        }
    }
    if let Some(report) = &stored.refinement {
        match reassess_refinement(problem, report) {
            Ok(fresh) => checks.extend(label(refinement_diagnostics(&fresh, refinement_tolerance), "refinement")),
            Err(e) => checks.push(failed("refinement", "reassess", e.to_string())),
        }
    }
    VerificationReport::new(checks)
}

fn failed(prefix: &str, name: &str, why: String) -> Check {
    Check {
        name: format!("{prefix}/{name}"),
        status: CheckStatus::Fail,
        measured: None,
        threshold: None,
        witness: Some(why),
    }
}

fn verify(ctx: &Context, timings: &mut Timings) -> Result<i32, Failure> {
    let t = Instant::now();
    let stored = read_result(&ctx.out.join(RESULT_FILE))?;
    let tolerance = ctx.tol_override.unwrap_or(stored.tolerance);
    let report = reverify(
        &ctx.problem,
        &ctx.hash,
        &stored,
        tolerance,
        ctx.doc.grid.refinement_tolerance,
    );
    timings.lap("verify", t);
    write_text(&ctx.out.join(VERIFICATION_FILE), &to_json(&report))?;
    summarize(&report);
    Ok(if report.overall { EXIT_OK } else { EXIT_VERIFICATION })
}

/// Grid indices nearest the quartiles of the interval.
pub fn quartile_starts(game: &Game) -> Vec<usize> {
    let pts = game.grid().points();
    let (lo, hi) = (pts[0], pts[pts.len() - 1]);
    let mut out: Vec<usize> = [0.25, 0.5, 0.75]
        .iter()
        .map(|q| {
            let x = lo + q * (hi - lo);
            (0..pts.len())
                .min_by(|&a, &b| (pts[a] - x).abs().total_cmp(&(pts[b] - x).abs()))
                .expect("grid is nonempty")
        })
        .collect();
    out.dedup();
    out
}

#[derive(Debug, Serialize)]
struct SimulationDocument {
    problem_hash: String,
    n_paths: usize,
    seed: u64,
    reports: Vec<VerificationReport>,
}

fn simulate(ctx: &Context, timings: &mut Timings) -> Result<i32, Failure> {
    let t = Instant::now();
    let path = ctx.out.join(RESULT_FILE);
    let stored = match read_result(&path) {
        Ok(doc) if doc.problem_hash == ctx.hash => doc,
        _ => {
            println!("simulate: no matching {}, solving first", path.display());
            let code = solve(ctx, timings)?;
            if code == EXIT_NOT_CONVERGED {
                return Ok(code);
            }
            read_result(&path)?
        }
    };
    let mut reports = Vec::new();
    for eq in &stored.equilibria {
        let game = Game::new(&ctx.problem, eq.result.profile.grid().clone()).map_err(SolverError::from)?;
        let starts = quartile_starts(&game);
        reports.push(cross_validate(&game, &eq.result.profile, &starts, &ctx.doc.simulation));
    }
    timings.lap("simulate", t);
    let all = reports.iter().all(|r| r.overall);
    for r in &reports {
        summarize(r);
    }
    let doc = SimulationDocument {
        problem_hash: ctx.hash.clone(),
        n_paths: ctx.doc.simulation.n_paths,
        seed: ctx.doc.simulation.rng_seed,
        reports,
    };
    write_text(&ctx.out.join(SIMULATION_FILE), &to_json(&doc))?;
    Ok(if all { EXIT_OK } else { EXIT_VERIFICATION })
}

#[derive(Debug, Serialize)]
struct OracleDocument {
    problem_hash: String,
    one_point: OnePointEquilibrium,
    /// Stop sets attaining the maximum for each player against unit rates 0.5.
    enumeration: Vec<Vec<Vec<bool>>>,
    report: VerificationReport,
}

/// Opponent unit rate used by the enumeration oracle.
pub const ORACLE_OPPONENT_UNIT: f64 = 0.5;

fn oracle(ctx: &Context, timings: &mut Timings) -> Result<i32, Failure> {
    let t = Instant::now();
    let one = one_point_bisection(&ctx.problem).map_err(|e| Failure::Other(e.to_string()))?;
    println!(
        "one-point oracle at x = {}: units ({:.17e}, {:.17e}), rates ({}, {})",
        one.x,
        one.units[0],
        one.units[1],
        one.rates[0].map(|r| format!("{r:.17e}")).unwrap_or_else(|| "inf".into()),
        one.rates[1].map(|r| format!("{r:.17e}")).unwrap_or_else(|| "inf".into()),
    );
    let mut checks = Vec::new();
    let game1 = Game::new(&ctx.problem, ctx.doc.grid(&ctx.problem, 1)?).map_err(SolverError::from)?;
    let solved = solve_grid_equilibrium(&game1, &ctx.doc.solver)?;
    let gap = (0..2)
        .map(|k| {
            let p = if k == 0 { Player::One } else { Player::Two };
            (solved.profile.unit(p, 0) - one.units[k]).abs()
        })
        .fold(0.0, f64::max);
    checks.push(Check {
        name: "one_point_solver_agreement".into(),
        status: if gap <= ctx.tolerance { CheckStatus::Pass } else { CheckStatus::Fail },
        measured: Some(gap),
        threshold: Some(ctx.tolerance),
        witness: None,
    });

    let game3 = Game::new(&ctx.problem, ctx.doc.grid(&ctx.problem, 3)?).map_err(SolverError::from)?;
    let opp = vec![ORACLE_OPPONENT_UNIT; 3];
    let mut sets = Vec::new();
    for player in [Player::One, Player::Two] {
        let en = enumerate_pure_responses(&game3, player, &opp).map_err(|e| Failure::Other(e.to_string()))?;
        let br = game3.best_response(player, &opp).map_err(SolverError::from)?;
        let value_gap = en
            .value
            .iter()
            .zip(&br.value)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let all: Vec<Vec<bool>> = (0..8usize).map(|m| (0..3).map(|j| m >> j & 1 == 1).collect()).collect();
        let mismatch = all
            .iter()
            .find(|s| br.is_optimal_stop_set(s) != en.argmax.contains(s))
            .map(|s| format!("stop set {s:?}"));
        let name = if player == Player::One { "player1" } else { "player2" };
        checks.push(Check {
            name: format!("enumeration_{name}_value"),
            status: if value_gap <= 1e-10 { CheckStatus::Pass } else { CheckStatus::Fail },
            measured: Some(value_gap),
            threshold: Some(1e-10),
            witness: None,
        });
        checks.push(Check {
            name: format!("enumeration_{name}_argmax"),
            status: if mismatch.is_none() { CheckStatus::Pass } else { CheckStatus::Fail },
            measured: None,
            threshold: None,
            witness: mismatch,
        });
        sets.push(en.argmax);
    }
    timings.lap("oracle", t);
    let report = VerificationReport::new(checks);
    summarize(&report);
    let doc = OracleDocument {
        problem_hash: ctx.hash.clone(),
        one_point: one,
        enumeration: sets,
        report,
    };
    write_text(&ctx.out.join(ORACLE_FILE), &to_json(&doc))?;
    Ok(if doc.report.overall { EXIT_OK } else { EXIT_VERIFICATION })
}

/// Convenience wrapper for callers holding a problem path.
pub fn run_command(command: Command, problem: &Path, out: &Path) -> i32 {
    run(&Cli {
        command,
        problem: problem.to_path_buf(),
        out: out.to_path_buf(),
        seed: None,
        tol: None,
        levels: None,
        paths: None,
    })
}
