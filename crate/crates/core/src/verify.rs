//! Certificates: equilibrium checks, analytic-versus-simulation agreement,
//! and refinement diagnostics, each collected into a [`VerificationReport`].

use serde::{Deserialize, Serialize};

use crate::game::{Game, GameError};
use crate::model::Player;
use crate::montecarlo::{mc_payoff_grid, sample_stopped_law, tie_probability_grid, SimConfig, SimMode};
use crate::solver::{stopped_distribution, LawView, RefinementReport};
use crate::stopping::StrategyProfile;

/// Simulation budgets below this many paths are reported as skipped.
pub const MIN_PATHS: usize = 1000;
/// Standard errors allowed between analytic and simulated payoffs.
pub const PAYOFF_SIGMAS: f64 = 3.0;
/// Standard errors allowed per grid point between exact and sampled laws.
pub const LAW_SIGMAS: f64 = 4.0;
/// Largest tie frequency accepted from the Euler scheme.
pub const EULER_TIE_BOUND: f64 = 1e-3;
/// Distances at or below this are treated as exact zeros.
const ZERO_DISTANCE: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub status: CheckStatus,
    pub measured: Option<f64>,
    pub threshold: Option<f64>,
    pub witness: Option<String>,
}

impl Check {
    fn compare(name: impl Into<String>, measured: f64, threshold: f64, witness: Option<String>) -> Check {
        let status = if measured <= threshold {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        };
        Check {
            name: name.into(),
            status,
            measured: Some(measured),
            threshold: Some(threshold),
            witness: if status == CheckStatus::Fail { witness } else { None },
        }
    }

    fn skipped(name: impl Into<String>, why: impl Into<String>) -> Check {
        Check {
            name: name.into(),
            status: CheckStatus::Skipped,
            measured: None,
            threshold: None,
            witness: Some(why.into()),
        }
    }

    fn failed(name: impl Into<String>, why: impl Into<String>) -> Check {
        Check {
            name: name.into(),
            status: CheckStatus::Fail,
            measured: None,
            threshold: None,
            witness: Some(why.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checks: Vec<Check>,
    pub overall: bool,
}

impl VerificationReport {
    pub fn new(checks: Vec<Check>) -> VerificationReport {
        let overall = checks.iter().all(|c| c.status != CheckStatus::Fail);
        VerificationReport { checks, overall }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Appends the checks of `other`.
    pub fn merge(mut self, other: VerificationReport) -> VerificationReport {
        self.checks.extend(other.checks);
        VerificationReport::new(self.checks)
    }
}

fn name(player: Player) -> &'static str {
    match player {
        Player::One => "player 1",
        Player::Two => "player 2",
    }
}

/// Largest payoff gain over all single-point overrides and first-exit challengers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviationGain {
    pub gain: f64,
    pub player: Player,
    /// Grid index of the start where the gain occurs.
    pub start: usize,
    pub challengers: usize,
}

/// Evaluates every single-point override to {0, 1} and every first-exit
/// interval challenger against the opponent's units.
pub fn deviation_sweep(game: &Game, profile: &StrategyProfile) -> Result<DeviationGain, GameError> {
    let base = game.payoff_values(profile)?;
    let m = game.n_interior();
    let n = game.grid().len();
    let mut best = DeviationGain {
        gain: f64::NEG_INFINITY,
        player: Player::One,
        start: 0,
        challengers: 0,
    };
    for player in [Player::One, Player::Two] {
        let own = profile.units(player);
        let opp = profile.units(player.other());
        let w = base.get(player);
        let mut challengers: Vec<Vec<f64>> = Vec::new();
        for j in 0..m {
            for v in [0.0, 1.0] {
                let mut c = own.to_vec();
                c[j] = v;
                challengers.push(c);
            }
        }
        // continue strictly inside (x_a, x_b), stop at every other interior point
        for a in 0..n {
            for b in a + 1..n {
                challengers.push((1..=m).map(|i| if a < i && i < b { 0.0 } else { 1.0 }).collect());
            }
        }
        for c in &challengers {
            let v = game.player_values(player, c, opp)?;
            for (k, (x, y)) in v.iter().zip(w).enumerate() {
                if x - y > best.gain {
                    best.gain = x - y;
                    best.player = player;
                    best.start = k;
                }
            }
        }
        best.challengers += challengers.len();
    }
    best.gain = best.gain.max(0.0);
    Ok(best)
}

fn certify_inner(game: &Game, profile: &StrategyProfile, tol: f64) -> Result<Vec<Check>, GameError> {
    let grid = game.grid();
    let (res, values) = game.residuals_with_values(profile)?;
    let witness = res
        .argmax()
        .map(|(p, j, _)| format!("{} at x = {}", name(p), grid.interior()[j]));
    let mut checks = vec![Check::compare("residual", res.max(), tol, witness)];

    let mut worst = (0.0f64, None);
    for player in [Player::One, Player::Two] {
        let br = game.best_response(player, profile.units(player.other()))?;
        for (k, (a, b)) in br.value.iter().zip(values.get(player)).enumerate() {
            let d = (a - b).abs();
            if d > worst.0 {
                worst = (d, Some(format!("{} at x = {}", name(player), grid.points()[k])));
            }
        }
    }
    checks.push(Check::compare("value_optimality", worst.0, tol, worst.1));

    let dev = deviation_sweep(game, profile)?;
    checks.push(Check::compare(
        "deviation_sweep",
        dev.gain,
        tol,
        Some(format!(
            "{} gains from x = {} ({} challengers)",
            name(dev.player),
            grid.points()[dev.start],
            dev.challengers
        )),
    ));

    let bad = game.nonstop_violations(profile);
    let witness = bad
        .first()
        .map(|(p, j)| format!("{} stops at x = {} after the opponent", name(*p), grid.interior()[*j]));
    checks.push(Check::compare("nonstop", bad.len() as f64, 0.0, witness));
    Ok(checks)
}

/// Residual, best-response value, deviation sweep and nonstop checks.
pub fn certify_equilibrium(game: &Game, profile: &StrategyProfile, tolerance: f64) -> VerificationReport {
    match certify_inner(game, profile, tolerance) {
        Ok(checks) => VerificationReport::new(checks),
        Err(e) => VerificationReport::new(vec![Check::failed("inputs", e.to_string())]),
    }
}

/// Compares analytic payoffs and stopped laws with simulation from each start.
pub fn cross_validate(
    game: &Game,
    profile: &StrategyProfile,
    starts: &[usize],
    config: &SimConfig,
) -> VerificationReport {
    let mut checks = Vec::new();
    if config.n_paths < MIN_PATHS {
        checks.push(Check::skipped(
            "cross_validation",
            format!("underpowered: {} paths < {MIN_PATHS}", config.n_paths),
        ));
        return VerificationReport::new(checks);
    }
    let values = match game.payoff_values(profile) {
        Ok(v) => v,
        Err(e) => {
            checks.push(Check::skipped("cross_validation", format!("analytic engine unavailable: {e}")));
            return VerificationReport::new(checks);
        }
    };
    for &start in starts {
        let x = game.grid().points().get(start).copied().unwrap_or(f64::NAN);
        match mc_payoff_grid(game, profile, start, config) {
            Ok(est) => {
                for player in [Player::One, Player::Two] {
                    let e = est.get(player);
                    let diff = (e.mean - values.get(player)[start]).abs();
                    // floor for exactly deterministic payoffs
                    let bound = PAYOFF_SIGMAS * e.std_error + 1e-12;
                    checks.push(Check::compare(
                        format!("payoff_{}_x{x}", player.index() + 1),
                        diff,
                        bound,
                        Some(format!("{} standard errors", diff / e.std_error.max(1e-300))),
                    ));
                }
            }
            Err(e) => checks.push(Check::failed(format!("payoff_x{x}"), e.to_string())),
        }
        let exact = stopped_distribution(game, profile, start, LawView::Game);
        let sampled = sample_stopped_law(game, profile, start, config);
        match (exact, sampled) {
            (Ok(exact), Ok(sampled)) => {
                let n = sampled.n as f64;
                let mut worst = (0.0f64, None);
                for k in 0..sampled.points.len() {
                    let q = exact.total(k);
                    let f = sampled.counts[k] as f64 / n;
                    let se = (q * (1.0 - q) / n).sqrt();
                    let z = if se > 0.0 {
                        (f - q).abs() / se
                    } else if (f - q).abs() <= 1e-12 {
                        0.0
                    } else {
                        f64::INFINITY
                    };
                    if z > worst.0 {
                        worst = (z, Some(format!("x = {}: sampled {f}, exact {q}", sampled.points[k])));
                    }
                }
                checks.push(Check::compare(format!("law_x{x}"), worst.0, LAW_SIGMAS, worst.1));
            }
            (Err(e), _) => checks.push(Check::skipped(format!("law_x{x}"), format!("analytic law unavailable: {e}"))),
            (_, Err(e)) => checks.push(Check::failed(format!("law_x{x}"), e.to_string())),
        }
        let immediate_tie = (0..game.n_interior())
            .any(|j| profile.unit(Player::One, j) == 1.0 && profile.unit(Player::Two, j) == 1.0);
        match tie_probability_grid(game, profile, start, config) {
            Ok(_) if immediate_tie => checks.push(Check::skipped(
                format!("tie_x{x}"),
                "both players stop at once somewhere; ties are not excluded",
            )),
            Ok(e) => {
                let bound = match config.mode {
                    SimMode::EmbeddedChain => 0.0,
                    SimMode::Euler => EULER_TIE_BOUND,
                };
                checks.push(Check::compare(
                    format!("tie_x{x}"),
                    e.mean,
                    bound,
                    Some(format!("tie window {} in {:?} mode", config.dt, config.mode)),
                ));
            }
            Err(e) => checks.push(Check::failed(format!("tie_x{x}"), e.to_string())),
        }
    }
    VerificationReport::new(checks)
}

/// Decreasing value and law distances across levels, and a final value
/// distance within `tolerance`.
pub fn refinement_diagnostics(report: &RefinementReport, tolerance: f64) -> VerificationReport {
    let solved = report.levels.iter().filter(|l| l.result.is_some()).count();
    if report.levels.len() < 3 || solved < 3 {
        return VerificationReport::new(vec![Check::skipped(
            "refinement",
            format!("insufficient data: {solved} solved levels"),
        )]);
    }
    let mut checks = Vec::new();
    if let Some(k) = report.levels.iter().position(|l| l.result.is_none()) {
        checks.push(Check::failed("levels_converged", format!("level {k} did not converge")));
        return VerificationReport::new(checks);
    }
    let decreasing = |name: &str, d: Vec<Option<f64>>, strict: bool| {
        let d: Vec<f64> = d.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        let bad = d.windows(2).position(|w| {
            let ok = if strict { w[1] < w[0] } else { w[1] <= w[0] };
            !(ok || (w[0] <= ZERO_DISTANCE && w[1] <= ZERO_DISTANCE))
        });
        let worst = d
            .windows(2)
            .map(|w| if w[0] > 0.0 { w[1] / w[0] } else if w[1] > ZERO_DISTANCE { f64::INFINITY } else { 0.0 })
            .fold(0.0, f64::max);
        match bad {
            None => Check {
                name: name.into(),
                status: CheckStatus::Pass,
                measured: Some(worst),
                threshold: Some(1.0),
                witness: None,
            },
            Some(k) => Check {
                name: name.into(),
                status: CheckStatus::Fail,
                measured: Some(worst),
                threshold: Some(1.0),
                witness: Some(format!("level {} does not improve on level {}", k + 2, k + 1)),
            },
        }
    };
    checks.push(decreasing("value_distance_decreasing", report.value_distances(), true));
    let last = report.value_distances().last().copied().flatten().unwrap_or(f64::NAN);
    checks.push(Check::compare(
        "final_value_distance",
        last,
        tolerance,
        Some(format!("level {}", report.levels.len() - 1)),
    ));
    checks.push(decreasing("law_distance_decreasing", report.law_distances(), false));
    VerificationReport::new(checks)
}
