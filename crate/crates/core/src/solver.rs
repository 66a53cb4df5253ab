//! Grid equilibria, the refinement loop, and stopped-location laws.
//!
//! The search is heuristic and the answer is certified: a profile is only
//! returned when its complementarity residual is below the tolerance.
//!
//! Phase 1 iterates a damped local selection map. At each interior point,
//! with `N_i = g_i − (e_up·w_i(c+) + e_low·w_i(c−))` the gain from stopping
//! over waiting without interruption and `d_i = f_i − g_i` the follower
//! premium, the map picks the mixed pair that makes both players indifferent
//! when both want to stop (`λ_j = N_i/(h_i d_i)`), the pure stop of the only
//! player who wants to stop, or mutual continuation. When the given start
//! stalls, the map is restarted from the single-player stopping values,
//! which is exact when only mixing and continuation occur. Phase 2 polishes with a
//! Levenberg-Marquardt step on `u − T(u)` and falls back to the natural
//! residual of the complementarity problem.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{Game, GameError, Residuals, ValueVectors};
use crate::model::{check_nested, Grid, GridError, Player, Problem};
use crate::stopping::{iota_unit, StrategyProfile};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("no certified equilibrium; best residual {best_residual:e}")]
    NotConverged {
        best_residual: f64,
        trace: Vec<PhaseRecord>,
    },
    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
    #[error("start point {0} is not a grid point")]
    StartNotOnGrid(f64),
    #[error("stopped law has no mass (deficit {deficit:e})")]
    MassDeficit { deficit: f64 },
    #[error("not a probability law: {0}")]
    NonProbabilityInput(String),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_outer_iterations: usize,
    pub damping: f64,
    pub residual_tolerance: f64,
    pub newton_enabled: bool,
    pub restart_seeds: usize,
    pub rng_seed: u64,
    /// Phase-1 residual below which Phase 2 is attempted.
    pub warm_start_threshold: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_outer_iterations: 2000,
            damping: 0.5,
            residual_tolerance: 1e-8,
            newton_enabled: true,
            restart_seeds: 4,
            rng_seed: 0,
            warm_start_threshold: 1e-3,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(SolverError::InvalidOptions(format!(
                "damping {} outside (0, 1]",
                self.damping
            )));
        }
        if !(self.residual_tolerance > 0.0) {
            return Err(SolverError::InvalidOptions(format!(
                "tolerance {} is not positive",
                self.residual_tolerance
            )));
        }
        if self.max_outer_iterations == 0 {
            return Err(SolverError::InvalidOptions("zero iterations".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    BestResponse,
    Newton,
    Complementarity,
    Restart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub profile: StrategyProfile,
    pub values: ValueVectors,
    pub residual_max: f64,
    pub residuals: Residuals,
    pub iterations_used: usize,
    pub method_trace: Vec<PhaseRecord>,
    /// Sup-norm residual after every Phase-1 iteration.
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

/// Point-wise selection `T(u)` for both players.
fn local_map(game: &Game, values: &ValueVectors) -> (Vec<f64>, Vec<f64>) {
    let m = game.n_interior();
    let mut t1 = vec![0.0; m];
    let mut t2 = vec![0.0; m];
    let data = |player: Player, j: usize| {
        let b = game.kernel(player).bracket(j);
        let w = values.get(player);
        let g = game.stop_values(player)[j + 1];
        let f = game.follow_values(player)[j + 1];
        let wait = b.exit.up * w[j + 2] + b.exit.low * w[j];
        (g - wait, f - g, b.green)
    };
    for j in 0..m {
        let (n1, d1, h1) = data(Player::One, j);
        let (n2, d2, h2) = data(Player::Two, j);
        let (a, b) = match (n1 > 0.0, n2 > 0.0) {
            (true, true) => match (d1 > 0.0, d2 > 0.0) {
                (true, true) => (
                    iota_unit(n2 / (h2 * d2)).unwrap_or(1.0),
                    iota_unit(n1 / (h1 * d1)).unwrap_or(1.0),
                ),
                (false, true) => (1.0, 0.0),
                (true, false) => (0.0, 1.0),
                (false, false) => (1.0, 1.0),
            },
            (true, false) => (1.0, 0.0),
            (false, true) => (0.0, 1.0),
            (false, false) => (0.0, 0.0),
        };
        t1[j] = a;
        t2[j] = b;
    }
    (t1, t2)
}

fn pack(p: &StrategyProfile) -> Vec<f64> {
    p.units(Player::One)
        .iter()
        .chain(p.units(Player::Two))
        .copied()
        .collect()
}

fn unpack(grid: &Grid, x: &[f64]) -> StrategyProfile {
    let m = grid.n_interior();
    let clamp = |v: &f64| v.clamp(0.0, 1.0);
    StrategyProfile::from_units(
        grid.clone(),
        x[..m].iter().map(clamp).collect(),
        x[m..].iter().map(clamp).collect(),
    )
    .expect("clamped units have the grid length")
}

/// Fixed-point defect `u − T(u)`.
fn map_defect(game: &Game, x: &[f64]) -> Option<Vec<f64>> {
    let p = unpack(game.grid(), x);
    let values = game.payoff_values(&p).ok()?;
    let (t1, t2) = local_map(game, &values);
    Some(x.iter().zip(t1.iter().chain(&t2)).map(|(u, t)| u - t).collect())
}

/// Natural residual `u − clamp(u − F(u), 0, 1)` with `F = (continue − stop)/scale`.
fn natural_defect(game: &Game, x: &[f64]) -> Option<Vec<f64>> {
    let p = unpack(game.grid(), x);
    let values = game.payoff_values(&p).ok()?;
    let scale = game.payoff_scale();
    let m = game.n_interior();
    let mut out = Vec::with_capacity(2 * m);
    for player in [Player::One, Player::Two] {
        let opp = p.units(player.other());
        let w = values.get(player);
        let g = game.stop_values(player);
        for j in 0..m {
            let u = p.unit(player, j);
            let f = (game.continuation(player, j, w, opp[j]) - g[j + 1]) / scale;
            out.push(u - (u - f).clamp(0.0, 1.0));
        }
    }
    Some(out)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Damped least squares on `defect(x) = 0` over the unit cube.
fn levenberg_marquardt(
    x0: Vec<f64>,
    defect: impl Fn(&[f64]) -> Option<Vec<f64>>,
    max_iter: usize,
) -> (Vec<f64>, usize) {
    let n = x0.len();
    let mut x = x0;
    let Some(mut fx) = defect(&x) else {
        return (x, 0);
    };
    let mut mu = 1e-8;
    let mut it = 0;
    while it < max_iter {
        it += 1;
        let f_norm = norm(&fx);
        if f_norm <= 1e-15 {
            break;
        }
        let mut jac = DMatrix::<f64>::zeros(fx.len(), n);
        for k in 0..n {
            let h = 1e-7;
            let mut xp = x.clone();
            let step = if x[k] + h <= 1.0 { h } else { -h };
            xp[k] += step;
            let Some(fp) = defect(&xp) else {
                return (x, it);
            };
            for (i, (a, b)) in fp.iter().zip(&fx).enumerate() {
                jac[(i, k)] = (a - b) / step;
            }
        }
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let g = &jt * DVector::from_vec(fx.clone());
        let mut improved = false;
        while mu < 1e12 {
            let mut a = jtj.clone();
            for k in 0..n {
                a[(k, k)] += mu * (1.0 + jtj[(k, k)]);
            }
            let Some(chol) = a.cholesky() else {
                mu *= 10.0;
                continue;
            };
            let delta = chol.solve(&(-&g));
            let candidate: Vec<f64> = x
                .iter()
                .zip(delta.iter())
                .map(|(a, d)| (a + d).clamp(0.0, 1.0))
                .collect();
            if let Some(fc) = defect(&candidate) {
                if norm(&fc) < f_norm {
                    x = candidate;
                    fx = fc;
                    mu = (mu / 10.0).max(1e-14);
                    improved = true;
                    break;
                }
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (x, it)
}

/// Sends units within `eps` of a pure target exactly onto it.
fn snap(x: &mut [f64], target: &[f64], eps: f64) {
    for (u, t) in x.iter_mut().zip(target) {
        if (*t == 0.0 || *t == 1.0) && (*u - t).abs() < eps {
            *u = *t;
        }
    }
}

/// Forces own unit 0 where the opponent stops at once and `f > g`.
fn enforce_nonstop(game: &Game, x: &mut [f64]) {
    let m = game.n_interior();
    for j in 0..m {
        for (own, opp, player) in [(j, m + j, Player::One), (m + j, j, Player::Two)] {
            let gap = game.follow_values(player)[j + 1] - game.stop_values(player)[j + 1];
            if x[opp] == 1.0 && gap > 0.0 {
                x[own] = 0.0;
            }
        }
    }
}

/// Phase-1 iterations without a new best residual before Phase 2 is tried.
const STALL_ITERATIONS: usize = 50;

struct Attempt {
    x: Vec<f64>,
    residual: f64,
    iterations: usize,
    trace: Vec<PhaseRecord>,
    history: Vec<f64>,
}

fn certify(game: &Game, x: &[f64]) -> Result<(f64, Vec<f64>), SolverError> {
    let mut y = x.to_vec();
    enforce_nonstop(game, &mut y);
    let res = game.complementarity_residual(&unpack(game.grid(), &y))?;
    Ok((res.max(), y))
}

/// Runs Phase 2 from `x`; returns the polished point when it improves the residual.
fn polish(
    game: &Game,
    x: &[f64],
    tol: f64,
    trace: &mut Vec<PhaseRecord>,
) -> Result<(Vec<f64>, f64), SolverError> {
    let (mut best_res, mut best) = certify(game, x)?;
    let (mut y, it) = levenberg_marquardt(x.to_vec(), |v| map_defect(game, v), 50);
    if let Some(d) = map_defect(game, &y) {
        let target: Vec<f64> = y.iter().zip(&d).map(|(u, d)| u - d).collect();
        snap(&mut y, &target, 1e-9);
    }
    let (r, y) = certify(game, &y)?;
    trace.push(PhaseRecord {
        phase: Phase::Newton,
        iterations: it,
        residual: r,
    });
    if r < best_res {
        best_res = r;
        best = y;
    }
    if best_res <= tol {
        return Ok((best, best_res));
    }
    let (z, it) = levenberg_marquardt(best.clone(), |v| natural_defect(game, v), 50);
    let (r, z) = certify(game, &z)?;
    trace.push(PhaseRecord {
        phase: Phase::Complementarity,
        iterations: it,
        residual: r,
    });
    if r < best_res {
        best_res = r;
        best = z;
    }
    Ok((best, best_res))
}

fn run_attempt(game: &Game, x0: Vec<f64>, options: &SolverOptions) -> Result<Attempt, SolverError> {
    let tol = options.residual_tolerance;
    let d = options.damping;
    let mut x = x0;
    enforce_nonstop(game, &mut x);
    let mut trace = Vec::new();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, x.clone());
    let mut last_polish = f64::INFINITY;
    let mut best_it = 0;
    let mut polished_at = None;
    let mut it = 0;
    while it < options.max_outer_iterations {
        it += 1;
        let p = unpack(game.grid(), &x);
        let (res, values) = game.residuals_with_values(&p)?;
        let r = res.max();
        history.push(r);
        if r < best.0 {
            best = (r, x.clone());
            best_it = it;
        }
        if r <= tol {
            break;
        }
        let warm = r < options.warm_start_threshold && r < 0.1 * last_polish;
        let stalled = it >= best_it + STALL_ITERATIONS && polished_at != Some(best_it);
        if options.newton_enabled && (warm || stalled) {
            last_polish = last_polish.min(r);
            polished_at = Some(best_it);
            let x = if stalled { best.1.clone() } else { x.clone() };
            let (y, ry) = polish(game, &x, tol, &mut trace)?;
            if ry < best.0 {
                best = (ry, y.clone());
            }
            if ry <= tol {
                break;
            }
        }
        let (t1, t2) = local_map(game, &values);
        let target: Vec<f64> = t1.into_iter().chain(t2).collect();
        for (u, t) in x.iter_mut().zip(&target) {
            *u = (1.0 - d) * *u + d * t;
        }
        snap(&mut x, &target, 1e-6);
        enforce_nonstop(game, &mut x);
    }
    trace.insert(
        0,
        PhaseRecord {
            phase: Phase::BestResponse,
            iterations: it,
            residual: history.last().copied().unwrap_or(f64::INFINITY),
        },
    );
    if best.0 > tol && options.newton_enabled {
        let (y, ry) = polish(game, &best.1, tol, &mut trace)?;
        if ry < best.0 {
            best = (ry, y);
        }
    }
    Ok(Attempt {
        x: best.1,
        residual: best.0,
        iterations: it,
        trace,
        history,
    })
}

fn finish(game: &Game, attempt: Attempt, tol: f64) -> Result<EquilibriumResult, SolverError> {
    let profile = unpack(game.grid(), &attempt.x);
    let (residuals, values) = game.residuals_with_values(&profile)?;
    let residual_max = residuals.max();
    let converged = residual_max <= tol;
    if !converged {
        return Err(SolverError::NotConverged {
            best_residual: residual_max,
            trace: attempt.trace,
        });
    }
    Ok(EquilibriumResult {
        profile,
        values,
        residual_max,
        residuals,
        iterations_used: attempt.iterations,
        method_trace: attempt.trace,
        residual_history: attempt.history,
        converged,
    })
}

/// Selection map applied to the single-player stopping values, i.e. the
/// values each player would get if the opponent never stopped.
pub fn stopping_value_start(game: &Game) -> Result<Vec<f64>, SolverError> {
    let zeros = vec![0.0; game.n_interior()];
    let values = ValueVectors {
        w1: game.best_response(Player::One, &zeros)?.value,
        w2: game.best_response(Player::Two, &zeros)?.value,
    };
    let (t1, t2) = local_map(game, &values);
    let mut x: Vec<f64> = t1.into_iter().chain(t2).collect();
    enforce_nonstop(game, &mut x);
    Ok(x)
}

/// Solves from the zero profile, with random restarts when stalled.
pub fn solve_grid_equilibrium(game: &Game, options: &SolverOptions) -> Result<EquilibriumResult, SolverError> {
    solve_from(game, &StrategyProfile::zeros(game.grid().clone()), options)
}

/// Solves from a given initial profile, with random restarts when stalled.
pub fn solve_from(
    game: &Game,
    initial: &StrategyProfile,
    options: &SolverOptions,
) -> Result<EquilibriumResult, SolverError> {
    options.validate()?;
    if initial.grid() != game.grid() {
        return Err(GameError::ProfileGridMismatch.into());
    }
    let tol = options.residual_tolerance;
    let mut first = run_attempt(game, pack(initial), options)?;
    if first.residual > tol {
        let second = run_attempt(game, stopping_value_start(game)?, options)?;
        first.trace.extend(second.trace.iter().cloned());
        if second.residual < first.residual {
            let trace = std::mem::take(&mut first.trace);
            first = Attempt { trace, ..second };
        }
    }
    if first.residual <= tol || options.restart_seeds == 0 {
        return finish(game, first, tol);
    }
    let n = 2 * game.n_interior();
    let restarts: Vec<Result<Attempt, SolverError>> = (0..options.restart_seeds)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(options.rng_seed);
            rng.set_stream(k as u64 + 1);
            let x0: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            run_attempt(game, x0, options)
        })
        .collect();
    let mut best = first;
    let mut trace = best.trace.clone();
    for attempt in restarts {
        let attempt = attempt?;
        trace.push(PhaseRecord {
            phase: Phase::Restart,
            iterations: attempt.iterations,
            residual: attempt.residual,
        });
        let done = best.residual <= tol;
        if !done && attempt.residual < best.residual {
            let history = std::mem::take(&mut best.history);
            best = attempt;
            best.history = history.into_iter().chain(best.history).collect();
        }
    }
    best.trace = trace;
    finish(game, best, tol)
}

/// One level of a refinement run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub n_interior: usize,
    pub grid: Grid,
    pub result: Option<EquilibriumResult>,
    pub error: Option<String>,
    /// Sup-distance of value vectors to the previous level on its points.
    pub value_distance: Option<f64>,
    /// Wasserstein distance of the stopped-location law to the previous level.
    pub law_distance: Option<f64>,
    pub law: Option<DiscreteLaw>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub law_start: f64,
    pub levels: Vec<LevelReport>,
}

impl RefinementReport {
    pub fn value_distances(&self) -> Vec<Option<f64>> {
        self.levels.iter().skip(1).map(|l| l.value_distance).collect()
    }

    pub fn law_distances(&self) -> Vec<Option<f64>> {
        self.levels.iter().skip(1).map(|l| l.law_distance).collect()
    }
}

/// Profile on `fine` that copies `coarse` at shared points and is 0 elsewhere.
pub fn inject_profile(coarse: &StrategyProfile, fine: &Grid) -> StrategyProfile {
    let mut out = StrategyProfile::zeros(fine.clone());
    for (j, &x) in coarse.grid().interior().iter().enumerate() {
        if let Some(i) = fine.index_of(x) {
            for player in [Player::One, Player::Two] {
                out.units_mut(player)[i - 1] = coarse.unit(player, j);
            }
        }
    }
    out
}

/// Solves a nested schedule, warm-starting each level from the previous one.
pub fn refine_and_solve(
    problem: &Problem,
    schedule: &[Grid],
    options: &SolverOptions,
) -> Result<RefinementReport, SolverError> {
    check_nested(schedule)?;
    let law_start = schedule
        .first()
        .map(|g| {
            let mid = problem.model().midpoint();
            *g.points()
                .iter()
                .min_by(|a, b| (*a - mid).abs().total_cmp(&(*b - mid).abs()))
                .expect("grid is nonempty")
        })
        .unwrap_or(problem.model().midpoint());
    let mut levels: Vec<LevelReport> = Vec::new();
    let mut previous: Option<EquilibriumResult> = None;
    for grid in schedule {
        let game = Game::new(problem, grid.clone())?;
        let initial = match &previous {
            Some(r) => inject_profile(&r.profile, grid),
            None => StrategyProfile::zeros(grid.clone()),
        };
        let mut level = LevelReport {
            n_interior: grid.n_interior(),
            grid: grid.clone(),
            result: None,
            error: None,
            value_distance: None,
            law_distance: None,
            law: None,
        };
        let solved = match solve_from(&game, &initial, options) {
            Ok(r) => Ok(r),
            Err(SolverError::NotConverged { .. }) if previous.is_some() => {
                solve_grid_equilibrium(&game, options)
            }
            Err(e) => Err(e),
        };
        match solved {
            Ok(result) => {
                previous = Some(result.clone());
                level.result = Some(result);
            }
            Err(SolverError::NotConverged { best_residual, .. }) => {
                level.error = Some(format!("not converged (best residual {best_residual:e})"));
                previous = None;
            }
            Err(e) => return Err(e),
        }
        levels.push(level);
    }
    let mut report = RefinementReport { law_start, levels };
    measure_levels(problem, &mut report)?;
    Ok(report)
}

/// Recomputes values, stopped laws and distances of a stored refinement
/// report from its profiles alone.
pub fn reassess_refinement(problem: &Problem, report: &RefinementReport) -> Result<RefinementReport, SolverError> {
    let mut out = report.clone();
    for level in &mut out.levels {
        if let Some(result) = &mut level.result {
            let game = Game::new(problem, level.grid.clone())?;
            result.values = game.payoff_values(&result.profile)?;
        }
    }
    measure_levels(problem, &mut out)?;
    Ok(out)
}

/// Fills laws and distances between consecutive solved levels.
fn measure_levels(problem: &Problem, report: &mut RefinementReport) -> Result<(), SolverError> {
    let mut previous: Option<(Grid, ValueVectors, DiscreteLaw)> = None;
    for level in &mut report.levels {
        level.value_distance = None;
        level.law_distance = None;
        level.law = None;
        let Some(result) = &level.result else {
            previous = None;
            continue;
        };
        let grid = &level.grid;
        let game = Game::new(problem, grid.clone())?;
        let start = grid.index_of(report.law_start).ok_or(SolverError::StartNotOnGrid(report.law_start))?;
        let law = stopped_distribution(&game, &result.profile, start, LawView::Game)?.law();
        if let Some((pg, pv, plaw)) = &previous {
            let mut d = 0.0f64;
            for (i, &x) in pg.points().iter().enumerate() {
                let k = grid.index_of(x).ok_or(SolverError::Grid(GridError::NotNested(0)))?;
                d = d
                    .max((result.values.w1[k] - pv.w1[i]).abs())
                    .max((result.values.w2[k] - pv.w2[i]).abs());
            }
            level.value_distance = Some(d);
            level.law_distance = Some(distribution_distance(&law, plaw)?);
        }
        level.law = Some(law.clone());
        previous = Some((grid.clone(), result.values.clone(), law));
    }
    Ok(())
}

/// Which clocks stop the process in [`stopped_distribution`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawView {
    /// Only this player's clock and absorption.
    Player(Player),
    /// Both clocks and absorption (the end of the game).
    Game,
}

/// Discrete law on the line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteLaw {
    pub points: Vec<f64>,
    pub mass: Vec<f64>,
}

/// Law of the stopped location with the mass split by cause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppedLaw {
    pub points: Vec<f64>,
    /// Mass stopped by player 1's clock at each grid point.
    pub by_player1: Vec<f64>,
    /// Mass stopped by player 2's clock at each grid point.
    pub by_player2: Vec<f64>,
    /// Mass where both stop at once (both rates infinite).
    pub by_tie: Vec<f64>,
    /// Mass absorbed at each endpoint (nonzero only at the ends).
    pub by_absorption: Vec<f64>,
    pub deficit: f64,
    pub renormalized: bool,
}

impl StoppedLaw {
    pub fn total(&self, i: usize) -> f64 {
        self.by_player1[i] + self.by_player2[i] + self.by_tie[i] + self.by_absorption[i]
    }

    pub fn law(&self) -> DiscreteLaw {
        DiscreteLaw {
            points: self.points.clone(),
            mass: (0..self.points.len()).map(|i| self.total(i)).collect(),
        }
    }
}

fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let m = diag.len();
    let mut c = vec![0.0; m];
    let mut d = vec![0.0; m];
    for j in 0..m {
        let pivot = if j == 0 { diag[0] } else { diag[j] - lower[j] * c[j - 1] };
        if pivot.abs() < 1e-300 || !pivot.is_finite() {
            return None;
        }
        c[j] = upper[j] / pivot;
        d[j] = if j == 0 { rhs[0] / pivot } else { (rhs[j] - lower[j] * d[j - 1]) / pivot };
    }
    let mut x = vec![0.0; m];
    for j in (0..m).rev() {
        x[j] = d[j] - if j + 1 < m { c[j] * x[j + 1] } else { 0.0 };
    }
    Some(x)
}

/// Exact law of the stopped location from grid index `start`, at zero discount.
pub fn stopped_distribution(
    game: &Game,
    profile: &StrategyProfile,
    start: usize,
    view: LawView,
) -> Result<StoppedLaw, SolverError> {
    if profile.grid() != game.grid() {
        return Err(GameError::ProfileGridMismatch.into());
    }
    let grid = game.grid();
    let n = grid.len();
    let m = grid.n_interior();
    let mut law = StoppedLaw {
        points: grid.points().to_vec(),
        by_player1: vec![0.0; n],
        by_player2: vec![0.0; n],
        by_tie: vec![0.0; n],
        by_absorption: vec![0.0; n],
        deficit: 0.0,
        renormalized: false,
    };
    if start >= n {
        return Err(SolverError::StartNotOnGrid(f64::NAN));
    }
    if start == 0 || start == n - 1 {
        law.by_absorption[start] = 1.0;
        return Ok(law);
    }
    let kernel = game.absorption_kernel();
    // per interior point: (up, down, kill1, kill2, tie)
    let rows: Vec<[f64; 5]> = (0..m)
        .map(|j| {
            let b = kernel.bracket(j);
            let (u1, u2) = match view {
                LawView::Game => (profile.unit(Player::One, j), profile.unit(Player::Two, j)),
                LawView::Player(Player::One) => (profile.unit(Player::One, j), 0.0),
                LawView::Player(Player::Two) => (0.0, profile.unit(Player::Two, j)),
            };
            if u1 == 1.0 && u2 == 1.0 {
                return [0.0, 0.0, 0.0, 0.0, 1.0];
            }
            let free = (1.0 - u1) * (1.0 - u2);
            let k1 = b.green * u1 * (1.0 - u2);
            let k2 = b.green * u2 * (1.0 - u1);
            let den = free + k1 + k2;
            [b.exit.up * free / den, b.exit.low * free / den, k1 / den, k2 / den, 0.0]
        })
        .collect();
    // expected visits solve (I − P)ᵀ N = e_start
    let diag = vec![1.0; m];
    let lower: Vec<f64> = (0..m).map(|j| if j > 0 { -rows[j - 1][0] } else { 0.0 }).collect();
    let upper: Vec<f64> = (0..m).map(|j| if j + 1 < m { -rows[j + 1][1] } else { 0.0 }).collect();
    let mut rhs = vec![0.0; m];
    rhs[start - 1] = 1.0;
    let visits = thomas(&lower, &diag, &upper, &rhs).ok_or(GameError::SingularSystem { index: start })?;
    for j in 0..m {
        law.by_player1[j + 1] = visits[j] * rows[j][2];
        law.by_player2[j + 1] = visits[j] * rows[j][3];
        law.by_tie[j + 1] = visits[j] * rows[j][4];
    }
    law.by_absorption[0] = visits[0] * rows[0][1];
    law.by_absorption[n - 1] = visits[m - 1] * rows[m - 1][0];
    let total: f64 = (0..n).map(|i| law.total(i)).sum();
    law.deficit = 1.0 - total;
    if !(total > 0.0) || !total.is_finite() {
        return Err(SolverError::MassDeficit { deficit: law.deficit });
    }
    if law.deficit.abs() > 1e-10 {
        for v in [
            &mut law.by_player1,
            &mut law.by_player2,
            &mut law.by_tie,
            &mut law.by_absorption,
        ] {
            v.iter_mut().for_each(|m| *m /= total);
        }
        law.renormalized = true;
    }
    Ok(law)
}

fn check_law(law: &DiscreteLaw) -> Result<(), SolverError> {
    if law.points.len() != law.mass.len() || law.points.is_empty() {
        return Err(SolverError::NonProbabilityInput("points and masses differ in length".into()));
    }
    if let Some(m) = law.mass.iter().find(|m| !(**m >= -1e-12)) {
        return Err(SolverError::NonProbabilityInput(format!("negative mass {m}")));
    }
    let total: f64 = law.mass.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(SolverError::NonProbabilityInput(format!("total mass {total}")));
    }
    Ok(())
}

/// 1-Wasserstein distance between two discrete laws on the line.
pub fn distribution_distance(a: &DiscreteLaw, b: &DiscreteLaw) -> Result<f64, SolverError> {
    check_law(a)?;
    check_law(b)?;
    let mut events: Vec<(f64, f64)> = a
        .points
        .iter()
        .zip(&a.mass)
        .map(|(&x, &m)| (x, m))
        .chain(b.points.iter().zip(&b.mass).map(|(&x, &m)| (x, -m)))
        .collect();
    events.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut diff = 0.0;
    let mut dist = 0.0;
    for w in events.windows(2) {
        diff += w[0].1;
        dist += diff.abs() * (w[1].0 - w[0].0);
    }
    Ok(dist)
}
