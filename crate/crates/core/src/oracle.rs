//! Brute-force reference solvers for tiny grids.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{Game, GameError};
use crate::model::{build_grid, GridError, Placement, Player, Problem};
use crate::stopping::iota_rate;

/// Largest interior size accepted by [`enumerate_pure_responses`].
pub const MAX_ENUMERATION_POINTS: usize = 16;
/// Values within this distance of the pointwise maximum count as optimal.
pub const ENUMERATION_TIE: f64 = 1e-10;
const BISECTION_STEPS: usize = 200;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("enumeration over {0} interior points is too large")]
    TooLarge(usize),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Equilibrium of the game restricted to the interval midpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnePointEquilibrium {
    pub x: f64,
    pub units: [f64; 2],
    /// `None` stands for an infinite rate.
    pub rates: [Option<f64>; 2],
}

/// Solves the one-interior-point game at the midpoint by bisection on each
/// player's indifference condition.
pub fn one_point_bisection(problem: &Problem) -> Result<OnePointEquilibrium, OracleError> {
    let grid = build_grid(problem.model(), 1, &Placement::Uniform)?;
    let x = grid.points()[1];
    let game = Game::new(problem, grid)?;
    // stop advantage against a never-stopping opponent, and follower premium
    let edge = |p: Player| {
        let w = game.stop_values(p);
        let n = w[1] - game.continuation(p, 0, w, 0.0);
        let d = game.follow_values(p)[1] - w[1];
        (n, d)
    };
    let root = |p: Player| {
        let w = game.stop_values(p);
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            if game.continuation(p, 0, w, mid) > w[1] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let (n1, d1) = edge(Player::One);
    let (n2, d2) = edge(Player::Two);
    let units = match (n1 > 0.0, n2 > 0.0) {
        (true, true) => match (d1 > 0.0, d2 > 0.0) {
            (true, true) => [root(Player::Two), root(Player::One)],
            (false, true) => [1.0, 0.0],
            (true, false) => [0.0, 1.0],
            (false, false) => [1.0, 1.0],
        },
        (true, false) => [1.0, 0.0],
        (false, true) => [0.0, 1.0],
        (false, false) => [0.0, 0.0],
    };
    let rate = |u: f64| iota_rate(u).ok().filter(|r| r.is_finite());
    Ok(OnePointEquilibrium {
        x,
        units,
        rates: [rate(units[0]), rate(units[1])],
    })
}

/// Result of scanning every pure stop set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Enumeration {
    /// Pointwise maximum over all stop sets, on the full grid.
    pub value: Vec<f64>,
    /// Stop sets (interior flags) attaining the maximum at every start.
    pub argmax: Vec<Vec<bool>>,
}

/// Evaluates all `2^m` pure stop sets of `player` against fixed opponent units.
pub fn enumerate_pure_responses(
    game: &Game,
    player: Player,
    opponent_units: &[f64],
) -> Result<Enumeration, OracleError> {
    let m = game.n_interior();
    if m > MAX_ENUMERATION_POINTS {
        return Err(OracleError::TooLarge(m));
    }
    let sets: Vec<Vec<bool>> = (0..1usize << m)
        .map(|mask| (0..m).map(|j| mask >> j & 1 == 1).collect())
        .collect();
    let mut values = Vec::with_capacity(sets.len());
    for s in &sets {
        let own: Vec<f64> = s.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        values.push(game.player_values(player, &own, opponent_units)?);
    }
    let n = game.grid().len();
    let value: Vec<f64> = (0..n)
        .map(|k| values.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let argmax = sets
        .into_iter()
        .zip(&values)
        .filter(|(_, v)| v.iter().zip(&value).all(|(a, b)| b - a <= ENUMERATION_TIE))
        .map(|(s, _)| s)
        .collect();
    Ok(Enumeration { value, argmax })
}
