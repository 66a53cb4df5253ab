//! Exact evaluation of the game on a grid.
//!
//! All rates are handled in unit form `u = λ/(1+λ)`. For player `i` at an
//! interior point with own unit `u` and opponent unit `v`, the sojourn row
//! reads
//!
//! ```text
//! D    = (1−u)(1−v) + h·(u(1−v) + v(1−u))
//! w(c) = [e_up(1−u)(1−v)·w(c+) + e_low(1−u)(1−v)·w(c−) + h(u(1−v)g + v(1−u)f)] / D
//! ```
//!
//! which is the elastic-killing identity multiplied through by
//! `(1−u)(1−v)`. It stays finite when either rate is infinite; only
//! `u = v = 1` needs the tie convention `w = g`.

use rayon::join;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{AnalyticsError, SojournKernel};
use crate::model::{DiffusionModel, Grid, PayoffSpec, Player, Problem};
use crate::stopping::StrategyProfile;

/// Relative tolerance used to decide strict preference between stop and continue.
pub const PREFERENCE_TOL: f64 = 1e-12;
const POLICY_ITERATION_CAP: usize = 10_000;
const VALUE_ITERATION_CAP: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GameError {
    #[error("linear system is singular at grid index {index}")]
    SingularSystem { index: usize },
    #[error("best response did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("grid [{grid_lower}, {grid_upper}] does not span the state interval")]
    GridMismatch { grid_lower: f64, grid_upper: f64 },
    #[error("profile is defined on a different grid")]
    ProfileGridMismatch,
    #[error("expected {expected} interior values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

/// Payoff vectors `w_i(x) = J^i(x, τ¹, τ²)` over all grid points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueVectors {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
}

impl ValueVectors {
    pub fn get(&self, player: Player) -> &[f64] {
        match player {
            Player::One => &self.w1,
            Player::Two => &self.w2,
        }
    }
}

/// Optimal-stopping solution against a fixed opponent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestResponseSolution {
    /// Value over all grid points.
    pub value: Vec<f64>,
    /// Interior points where stopping is strictly better than continuing.
    /// This is where the largest optimal stopping time stops.
    pub stop_set: Vec<bool>,
    /// Interior points where stopping and continuing are equally good.
    /// The largest optimal time continues there.
    pub indifferent: Vec<bool>,
    pub iterations: usize,
}

impl BestResponseSolution {
    /// Whether a pure stop set (interior flags) is an optimal response.
    pub fn is_optimal_stop_set(&self, stop: &[bool]) -> bool {
        stop.iter()
            .zip(self.stop_set.iter().zip(&self.indifferent))
            .all(|(&s, (&must, &may))| (!must || s) && (!s || must || may))
    }
}

/// Per-player complementarity residuals on interior points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub player1: Vec<f64>,
    pub player2: Vec<f64>,
}

impl Residuals {
    pub fn get(&self, player: Player) -> &[f64] {
        match player {
            Player::One => &self.player1,
            Player::Two => &self.player2,
        }
    }

    pub fn max(&self) -> f64 {
        self.player1
            .iter()
            .chain(&self.player2)
            .copied()
            .fold(0.0, f64::max)
    }

    /// Player, interior index and value of the largest residual.
    pub fn argmax(&self) -> Option<(Player, usize, f64)> {
        let one = self.player1.iter().enumerate().map(|(j, &v)| (Player::One, j, v));
        let two = self.player2.iter().enumerate().map(|(j, &v)| (Player::Two, j, v));
        one.chain(two).fold(None, |best, cur| match best {
            Some((_, _, b)) if b >= cur.2 => best,
            _ => Some(cur),
        })
    }
}

/// One sojourn row: `w_j = up·w_{j+1} + down·w_{j−1} + constant`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Row {
    pub up: f64,
    pub down: f64,
    pub constant: f64,
}

/// Grid, payoffs and sojourn kernels for both discount rates.
#[derive(Debug, Clone)]
pub struct Game {
    model: DiffusionModel,
    payoffs: PayoffSpec,
    grid: Grid,
    kernel1: SojournKernel,
    kernel2: SojournKernel,
    kernel0: SojournKernel,
    g: [Vec<f64>; 2],
    f: [Vec<f64>; 2],
}

impl Game {
    pub fn new(problem: &Problem, grid: Grid) -> Result<Game, GameError> {
        let model = problem.model();
        let payoffs = problem.payoffs();
        let tol = 1e-12 * (1.0 + model.length());
        if (grid.lower() - model.lower()).abs() > tol || (grid.upper() - model.upper()).abs() > tol {
            return Err(GameError::GridMismatch {
                grid_lower: grid.lower(),
                grid_upper: grid.upper(),
            });
        }
        let (k1, (k2, k0)) = join(
            || SojournKernel::new(model, &grid, payoffs.r1),
            || {
                join(
                    || SojournKernel::new(model, &grid, payoffs.r2),
                    || SojournKernel::new(model, &grid, 0.0),
                )
            },
        );
        let sample = |h: &crate::model::ScalarFn| grid.points().iter().map(|&x| h.eval(x)).collect();
        Ok(Game {
            model: model.clone(),
            payoffs: payoffs.clone(),
            g: [sample(&payoffs.g1), sample(&payoffs.g2)],
            f: [sample(&payoffs.f1), sample(&payoffs.f2)],
            grid,
            kernel1: k1?,
            kernel2: k2?,
            kernel0: k0?,
        })
    }

    pub fn model(&self) -> &DiffusionModel {
        &self.model
    }

    pub fn payoffs(&self) -> &PayoffSpec {
        &self.payoffs
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n_interior(&self) -> usize {
        self.grid.n_interior()
    }

    pub fn kernel(&self, player: Player) -> &SojournKernel {
        match player {
            Player::One => &self.kernel1,
            Player::Two => &self.kernel2,
        }
    }

    /// Kernel at zero discount, used for stopped-location laws.
    pub fn absorption_kernel(&self) -> &SojournKernel {
        &self.kernel0
    }

    /// Stop payoff `g_i` over all grid points.
    pub fn stop_values(&self, player: Player) -> &[f64] {
        &self.g[player.index()]
    }

    /// Follower payoff `f_i` over all grid points.
    pub fn follow_values(&self, player: Player) -> &[f64] {
        &self.f[player.index()]
    }

    /// Largest absolute payoff value on the grid.
    pub fn payoff_scale(&self) -> f64 {
        self.g
            .iter()
            .chain(&self.f)
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1.0)
    }

    fn check_profile(&self, profile: &StrategyProfile) -> Result<(), GameError> {
        if profile.grid() != &self.grid {
            return Err(GameError::ProfileGridMismatch);
        }
        Ok(())
    }

    fn check_len(&self, v: &[f64]) -> Result<(), GameError> {
        if v.len() != self.n_interior() {
            return Err(GameError::LengthMismatch {
                expected: self.n_interior(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Sojourn row of `player` at interior index `j`; `None` when both units
    /// are 1 (the tie pays `g`).
    pub fn row(&self, player: Player, j: usize, own: f64, opp: f64) -> Option<Row> {
        let b = self.kernel(player).bracket(j);
        let (e_up, e_low, h) = (b.exit.up, b.exit.low, b.green);
        let k = player.index();
        let (g, f) = (self.g[k][j + 1], self.f[k][j + 1]);
        let free = (1.0 - own) * (1.0 - opp);
        let own_only = own * (1.0 - opp);
        let opp_only = opp * (1.0 - own);
        let den = free + h * (own_only + opp_only);
        if den <= 0.0 {
            return None;
        }
        Some(Row {
            up: e_up * free / den,
            down: e_low * free / den,
            constant: h * (own_only * g + opp_only * f) / den,
        })
    }

    /// Continuation value of `player` at interior index `j` against the
    /// opponent's unit rate, given neighbour values of `w`.
    pub fn continuation(&self, player: Player, j: usize, w: &[f64], opp: f64) -> f64 {
        let row = self.row(player, j, 0.0, opp).expect("own rate zero keeps the row finite");
        row.up * w[j + 2] + row.down * w[j] + row.constant
    }

    /// Solves `w_j − up_j w_{j+1} − down_j w_{j−1} = constant_j` with
    /// Dirichlet values at both ends. `None` rows are fixed to `fixed[j]`.
    fn solve_rows(
        &self,
        rows: &[Option<Row>],
        fixed: &[f64],
        left: f64,
        right: f64,
    ) -> Result<Vec<f64>, GameError> {
        let m = rows.len();
        let mut out = vec![0.0; m + 2];
        out[0] = left;
        out[m + 1] = right;
        // Thomas algorithm on rows 1..=m
        let mut c_prime = vec![0.0; m];
        let mut d_prime = vec![0.0; m];
        for j in 0..m {
            let (lower, diag, upper, mut rhs) = match rows[j] {
                Some(r) => (-r.down, 1.0, -r.up, r.constant),
                None => (0.0, 1.0, 0.0, fixed[j]),
            };
            if j == 0 {
                rhs -= lower * left;
            }
            if j == m - 1 {
                rhs -= upper * right;
            }
            let (pivot, prev_d) = if j == 0 {
                (diag, 0.0)
            } else {
                (diag - lower * c_prime[j - 1], d_prime[j - 1])
            };
            if pivot.abs() < 1e-300 || !pivot.is_finite() {
                return Err(GameError::SingularSystem { index: j + 1 });
            }
            c_prime[j] = if j + 1 < m { upper / pivot } else { 0.0 };
            d_prime[j] = if j == 0 { rhs / pivot } else { (rhs - lower * prev_d) / pivot };
        }
        for j in (0..m).rev() {
            out[j + 1] = d_prime[j] - if j + 1 < m { c_prime[j] * out[j + 2] } else { 0.0 };
        }
        Ok(out)
    }

    fn values_for(&self, player: Player, own: &[f64], opp: &[f64]) -> Result<Vec<f64>, GameError> {
        let k = player.index();
        let g = &self.g[k];
        let n = g.len();
        let rows: Vec<Option<Row>> = (0..own.len())
            .map(|j| self.row(player, j, own[j], opp[j]))
            .collect();
        self.solve_rows(&rows, &g[1..n - 1], g[0], g[n - 1])
    }

    /// Payoff vectors of both players under a grid strategy profile.
    pub fn payoff_values(&self, profile: &StrategyProfile) -> Result<ValueVectors, GameError> {
        self.check_profile(profile)?;
        let (u1, u2) = (profile.units(Player::One), profile.units(Player::Two));
        Ok(ValueVectors {
            w1: self.values_for(Player::One, u1, u2)?,
            w2: self.values_for(Player::Two, u2, u1)?,
        })
    }

    /// Payoff of `player` using own units `own` against opponent units `opp`.
    pub fn player_values(&self, player: Player, own: &[f64], opp: &[f64]) -> Result<Vec<f64>, GameError> {
        self.check_len(own)?;
        self.check_len(opp)?;
        self.values_for(player, own, opp)
    }

    /// Payoff of never stopping voluntarily against the opponent.
    pub fn continuation_f(&self, player: Player, opponent_units: &[f64]) -> Result<Vec<f64>, GameError> {
        self.check_len(opponent_units)?;
        let zeros = vec![0.0; opponent_units.len()];
        self.values_for(player, &zeros, opponent_units)
    }

    /// Optimal stopping against a fixed opponent by policy iteration, with a
    /// value-iteration fallback.
    pub fn best_response(
        &self,
        player: Player,
        opponent_units: &[f64],
    ) -> Result<BestResponseSolution, GameError> {
        let allowed = vec![true; opponent_units.len()];
        self.best_response_restricted(player, opponent_units, &allowed)
    }

    /// Best response when voluntary stopping is only allowed where `allowed` is set.
    pub fn best_response_restricted(
        &self,
        player: Player,
        opponent_units: &[f64],
        allowed: &[bool],
    ) -> Result<BestResponseSolution, GameError> {
        self.check_len(opponent_units)?;
        if allowed.len() != opponent_units.len() {
            return Err(GameError::LengthMismatch {
                expected: opponent_units.len(),
                got: allowed.len(),
            });
        }
        let m = opponent_units.len();
        let k = player.index();
        let g = &self.g[k];
        let n = g.len();
        let tol = PREFERENCE_TOL * self.payoff_scale();
        let cont_rows: Vec<Row> = (0..m)
            .map(|j| self.row(player, j, 0.0, opponent_units[j]).expect("own rate zero"))
            .collect();
        let continuation = |w: &[f64], j: usize| {
            let r = cont_rows[j];
            r.up * w[j + 2] + r.down * w[j] + r.constant
        };

        let mut stop = vec![false; m];
        let mut value = Vec::new();
        let mut iterations = 0;
        let mut converged = false;
        while iterations < POLICY_ITERATION_CAP {
            iterations += 1;
            let rows: Vec<Option<Row>> = (0..m)
                .map(|j| if stop[j] { None } else { Some(cont_rows[j]) })
                .collect();
            value = self.solve_rows(&rows, &g[1..n - 1], g[0], g[n - 1])?;
            let mut changed = false;
            for j in 0..m {
                let q = continuation(&value, j);
                let better_stop = allowed[j] && g[j + 1] > q + tol;
                let better_continue = q > g[j + 1] + tol;
                if (better_stop && !stop[j]) || (better_continue && stop[j]) {
                    stop[j] = better_stop;
                    changed = true;
                }
            }
            if !changed {
                converged = true;
                break;
            }
        }
        if !converged {
            value = self.value_iteration(player, &cont_rows, allowed, value)?;
        }

        let mut stop_set = vec![false; m];
        let mut indifferent = vec![false; m];
        for j in (0..m).filter(|&j| allowed[j]) {
            let q = continuation(&value, j);
            if q < g[j + 1] - tol {
                stop_set[j] = true;
            } else if (q - g[j + 1]).abs() <= tol {
                indifferent[j] = true;
            }
        }
        Ok(BestResponseSolution {
            value,
            stop_set,
            indifferent,
            iterations,
        })
    }

    fn value_iteration(
        &self,
        player: Player,
        rows: &[Row],
        allowed: &[bool],
        start: Vec<f64>,
    ) -> Result<Vec<f64>, GameError> {
        let g = &self.g[player.index()];
        let mut v = start;
        let mut residual = f64::INFINITY;
        for it in 0..VALUE_ITERATION_CAP {
            let mut next = v.clone();
            for (j, r) in rows.iter().enumerate() {
                let q = r.up * v[j + 2] + r.down * v[j] + r.constant;
                next[j + 1] = if allowed[j] { g[j + 1].max(q) } else { q };
            }
            residual = next
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = next;
            if residual <= 1e-15 * self.payoff_scale() {
                return Ok(v);
            }
            if it > 0 && residual.is_nan() {
                break;
            }
        }
        Err(GameError::NoConvergence {
            iterations: VALUE_ITERATION_CAP,
            residual,
        })
    }

    /// Per-point complementarity residuals of a profile, together with its
    /// payoff vectors.
    pub fn residuals_with_values(
        &self,
        profile: &StrategyProfile,
    ) -> Result<(Residuals, ValueVectors), GameError> {
        let values = self.payoff_values(profile)?;
        let res = |player: Player| -> Vec<f64> {
            let own = profile.units(player);
            let opp = profile.units(player.other());
            let w = values.get(player);
            let k = player.index();
            (0..own.len())
                .map(|j| {
                    let s = self.g[k][j + 1];
                    let q = self.continuation(player, j, w, opp[j]);
                    let base = if own[j] == 0.0 {
                        (s - q).max(0.0)
                    } else if own[j] == 1.0 {
                        (q - s).max(0.0)
                    } else {
                        (s - q).abs()
                    };
                    let gap = self.f[k][j + 1] - s;
                    let nonstop = if opp[j] == 1.0 && gap > 0.0 { own[j] * gap } else { 0.0 };
                    base + nonstop
                })
                .collect()
        };
        Ok((
            Residuals {
                player1: res(Player::One),
                player2: res(Player::Two),
            },
            values,
        ))
    }

    pub fn complementarity_residual(&self, profile: &StrategyProfile) -> Result<Residuals, GameError> {
        Ok(self.residuals_with_values(profile)?.0)
    }

    /// Interior points where the opponent stops immediately, the follower
    /// payoff is strictly larger, and the player still stops with positive rate.
    pub fn nonstop_violations(&self, profile: &StrategyProfile) -> Vec<(Player, usize)> {
        let mut out = Vec::new();
        for player in [Player::One, Player::Two] {
            let own = profile.units(player);
            let opp = profile.units(player.other());
            let k = player.index();
            for j in 0..own.len() {
                if opp[j] == 1.0 && self.f[k][j + 1] > self.g[k][j + 1] && own[j] > 0.0 {
                    out.push((player, j));
                }
            }
        }
        out
    }
}
