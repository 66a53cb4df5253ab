//! Path simulation: an exact-in-space embedded chain on the grid and an
//! Euler scheme with band local times for general randomized stopping times.
//!
//! Every path draws from its own ChaCha stream indexed by the path number, so
//! results do not depend on how rayon schedules the chunks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{Game, GameError};
use crate::model::{DiffusionModel, PayoffSpec, Player, Problem};
use crate::stopping::{grid_strategy_to_mrst, iota_rate, Mrst, Path, StoppingError, StrategyProfile};

/// Paths per parallel work unit.
const CHUNK: usize = 512;
/// Sojourn cap for one embedded-chain path.
const MAX_SOJOURNS: usize = 50_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum McError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("band width {epsilon} exceeds the limit {limit}")]
    BandTooWide { epsilon: f64, limit: f64 },
    #[error("start {0} is not a usable start point")]
    BadStart(f64),
    #[error("embedded chain needs grid strategies")]
    NotAGridStrategy,
    #[error(transparent)]
    Stopping(#[from] StoppingError),
    #[error(transparent)]
    Game(#[from] GameError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    Euler,
    EmbeddedChain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub band_epsilon: f64,
    pub rng_seed: u64,
    pub mode: SimMode,
    /// Time after which an Euler path is cut off and counted as truncated.
    pub horizon: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_paths: 10_000,
            dt: 1e-4,
            band_epsilon: 1e-3,
            rng_seed: 0,
            mode: SimMode::EmbeddedChain,
            horizon: 100.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), McError> {
        if self.n_paths == 0 {
            return Err(McError::InvalidConfig("n_paths must be at least 1".into()));
        }
        if !(self.dt > 0.0) || !(self.horizon >= self.dt) {
            return Err(McError::InvalidConfig(format!(
                "need 0 < dt <= horizon, got dt {} horizon {}",
                self.dt, self.horizon
            )));
        }
        if !(self.band_epsilon > 0.0) {
            return Err(McError::InvalidConfig("band_epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Also requires the band to be narrower than half the smallest spacing.
    pub fn validate_for_points(&self, points: &[f64]) -> Result<(), McError> {
        self.validate()?;
        let spacing = points
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        if self.band_epsilon >= 0.5 * spacing {
            return Err(McError::BandTooWide {
                epsilon: self.band_epsilon,
                limit: 0.5 * spacing,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateWithError {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

/// Running mean and variance.
#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn estimate(&self) -> EstimateWithError {
        let se = if self.n > 1 {
            (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt()
        } else {
            0.0
        };
        EstimateWithError {
            mean: self.mean,
            std_error: se,
            n: self.n,
        }
    }
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Runs `f` on every path index in parallel chunks, returning results in index order.
fn map_paths<T: Send>(n: usize, seed: u64, f: impl Fn(&mut ChaCha8Rng) -> T + Sync) -> Vec<T> {
    let chunks = n.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            (c * CHUNK..((c + 1) * CHUNK).min(n))
                .map(|i| f(&mut path_rng(seed, i)))
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopCause {
    Player1,
    Player2,
    /// Both players stop at the same instant.
    Tie,
    Absorbed,
}

impl StopCause {
    fn of(player: Player) -> StopCause {
        match player {
            Player::One => StopCause::Player1,
            Player::Two => StopCause::Player2,
        }
    }
}

/// One embedded-chain path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainSample {
    pub cause: StopCause,
    /// Grid index of the stopped location.
    pub index: usize,
    /// Accumulated discount factor of each player at the stop.
    pub discount: [f64; 2],
    pub sojourns: usize,
}

#[derive(Debug, Clone, Copy)]
struct Transition {
    up: f64,
    down: f64,
    /// Probability that a kill is player 1's.
    share1: f64,
    tie: bool,
    /// Discount multipliers per player for (up, down, kill).
    mult: [[f64; 3]; 2],
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

fn transitions(game: &Game, profile: &StrategyProfile) -> Result<Vec<Transition>, McError> {
    let m = game.n_interior();
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let u1 = profile.unit(Player::One, j);
        let u2 = profile.unit(Player::Two, j);
        let (l1, l2) = (iota_rate(u1)?, iota_rate(u2)?);
        let kappa = l1 + l2;
        let base = game.absorption_kernel().primitives(j, kappa);
        let share1 = match (l1.is_infinite(), l2.is_infinite()) {
            (true, false) => 1.0,
            (false, true) => 0.0,
            _ if kappa > 0.0 => l1 / kappa,
            _ => 0.0,
        };
        let mut mult = [[1.0; 3]; 2];
        for player in [Player::One, Player::Two] {
            let p = game.kernel(player).primitives(j, kappa);
            mult[player.index()] = [
                ratio(p.up, base.up),
                ratio(p.down, base.down),
                ratio(p.kill, base.kill),
            ];
        }
        out.push(Transition {
            up: base.up,
            down: base.down,
            share1,
            tie: l1.is_infinite() && l2.is_infinite(),
            mult,
        });
    }
    Ok(out)
}

fn chain_path(table: &[Transition], n: usize, start: usize, rng: &mut ChaCha8Rng) -> ChainSample {
    let mut j = start;
    let mut discount = [1.0, 1.0];
    let mut sojourns = 0;
    while j > 0 && j < n - 1 && sojourns < MAX_SOJOURNS {
        let t = &table[j - 1];
        if t.tie {
            return ChainSample {
                cause: StopCause::Tie,
                index: j,
                discount,
                sojourns,
            };
        }
        sojourns += 1;
        let u: f64 = rng.gen();
        let k = if u < t.up {
            j += 1;
            0
        } else if u < t.up + t.down {
            j -= 1;
            1
        } else {
            2
        };
        discount[0] *= t.mult[0][k];
        discount[1] *= t.mult[1][k];
        if k == 2 {
            let cause = if rng.gen::<f64>() < t.share1 {
                StopCause::Player1
            } else {
                StopCause::Player2
            };
            return ChainSample {
                cause,
                index: j,
                discount,
                sojourns,
            };
        }
    }
    ChainSample {
        cause: StopCause::Absorbed,
        index: j,
        discount,
        sojourns,
    }
}

/// Samples `config.n_paths` embedded-chain paths from grid index `start`.
pub fn simulate_embedded_chain(
    game: &Game,
    profile: &StrategyProfile,
    start: usize,
    config: &SimConfig,
) -> Result<Vec<ChainSample>, McError> {
    config.validate()?;
    if profile.grid() != game.grid() {
        return Err(GameError::ProfileGridMismatch.into());
    }
    let n = game.grid().len();
    if start >= n {
        return Err(McError::BadStart(start as f64));
    }
    let table = transitions(game, profile)?;
    Ok(map_paths(config.n_paths, config.rng_seed, |rng| {
        chain_path(&table, n, start, rng)
    }))
}

/// Euler-Maruyama skeleton absorbed at the endpoints, with a Brownian-bridge
/// test for crossings between steps.
pub fn simulate_euler<R: Rng + ?Sized>(
    model: &DiffusionModel,
    start: f64,
    dt: f64,
    horizon: f64,
    rng: &mut R,
) -> Result<Path, McError> {
    if !(dt > 0.0 && dt <= horizon) {
        return Err(McError::InvalidConfig(format!("dt {dt} with horizon {horizon}")));
    }
    if !model.contains(start) {
        return Err(McError::BadStart(start));
    }
    let steps = (horizon / dt).round() as usize;
    let mut states = Vec::with_capacity(steps.min(1 << 16) + 1);
    states.push(start);
    let mut x = start;
    let mut absorbed = x == model.lower() || x == model.upper();
    for _ in 0..steps {
        if absorbed {
            break;
        }
        let (next, hit) = euler_step(model, x, dt, rng);
        x = next;
        absorbed = hit;
        states.push(x);
    }
    Ok(Path { dt, states, absorbed })
}

/// One Euler step; returns the new state and whether it is absorbed.
fn euler_step<R: Rng + ?Sized>(model: &DiffusionModel, x: f64, dt: f64, rng: &mut R) -> (f64, bool) {
    let (lo, hi) = (model.lower(), model.upper());
    let sigma = model.volatility(x);
    let z: f64 = rng.sample(StandardNormal);
    let y = x + model.drift(x) * dt + sigma * dt.sqrt() * z;
    if y <= lo {
        return (lo, true);
    }
    if y >= hi {
        return (hi, true);
    }
    let var = sigma * sigma * dt;
    if var > 0.0 {
        let u: f64 = rng.gen();
        let p_lo = (-2.0 * (x - lo) * (y - lo) / var).exp();
        let p_hi = (-2.0 * (hi - x) * (hi - y) / var).exp();
        if u < p_lo {
            return (lo, true);
        }
        if u < p_lo + p_hi {
            return (hi, true);
        }
    }
    (y, false)
}

/// Band estimate of the local time at `y` along `path`, cumulative per state.
pub fn local_time_estimate(
    model: &DiffusionModel,
    path: &Path,
    y: f64,
    band_epsilon: f64,
) -> Result<Vec<f64>, McError> {
    if !(band_epsilon > 0.0) || y - band_epsilon < model.lower() || y + band_epsilon > model.upper() {
        return Err(McError::BandTooWide {
            epsilon: band_epsilon,
            limit: (y - model.lower()).min(model.upper() - y),
        });
    }
    let mut out = Vec::with_capacity(path.states.len());
    let mut acc = 0.0;
    out.push(0.0);
    for &x in &path.states[..path.states.len() - 1] {
        if (x - y).abs() < band_epsilon {
            let s = model.volatility(x);
            acc += s * s * path.dt / (2.0 * band_epsilon);
        }
        out.push(acc);
    }
    Ok(out)
}

/// One player's clock in an Euler race.
struct Racer<'a> {
    mrst: &'a Mrst,
    threshold: f64,
    clock: f64,
    stop: Option<(f64, f64)>,
}

impl<'a> Racer<'a> {
    fn new(mrst: &'a Mrst, start: f64, threshold: f64) -> Racer<'a> {
        let stop = (!mrst.contains(start)).then_some((0.0, start));
        Racer {
            mrst,
            threshold,
            clock: 0.0,
            stop,
        }
    }

    fn step(&mut self, model: &DiffusionModel, x0: f64, x1: f64, t: f64, dt: f64, sig2: f64) {
        if self.stop.is_some() {
            return;
        }
        // reaching an end of the state space is absorption, not a stop
        let exit = self
            .mrst
            .exit_point(x0, x1)
            .filter(|&e| e != model.lower() && e != model.upper());
        if let Some(e) = exit {
            let frac = if x1 != x0 { ((e - x0) / (x1 - x0)).clamp(0.0, 1.0) } else { 0.0 };
            self.stop = Some((t + frac * dt, e));
            return;
        }
        let s = sig2 * dt;
        let reach = 8.0 * s.sqrt();
        let (lo, hi) = (x0.min(x1) - reach, x0.max(x1) + reach);
        let atoms = self.mrst.atoms();
        let first = atoms.partition_point(|a| a.x < lo);
        let mut inc = 0.0;
        let mut at = None;
        let mut best = 0.0;
        for a in atoms[first..].iter().take_while(|a| a.x <= hi) {
            let dl = bridge_local_time(x0, x1, a.x, s);
            inc += a.rate * dl;
            if a.rate * dl > best {
                best = a.rate * dl;
                at = Some(a.x);
            }
        }
        let dens = self.mrst.density_at(x0) * s;
        inc += dens;
        if inc > 0.0 && self.clock + inc >= self.threshold {
            let frac = ((self.threshold - self.clock) / inc).clamp(0.0, 1.0);
            let state = match at {
                Some(x) if dens == 0.0 => x,
                _ => x0 + frac * (x1 - x0),
            };
            self.stop = Some((t + frac * dt, state));
        }
        self.clock += inc;
    }
}

/// `exp(z²)·erfc(z)`.
fn erfcx(z: f64) -> f64 {
    if z < 5.0 {
        (z * z).exp() * libm::erfc(z)
    } else {
        let w = 1.0 / (z * z);
        (1.0 - 0.5 * w + 0.75 * w * w - 1.875 * w * w * w) / (z * std::f64::consts::PI.sqrt())
    }
}

/// Expected local time at `y` of a Brownian bridge from `a` to `b` with
/// quadratic variation `s` over the step.
pub fn bridge_local_time(a: f64, b: f64, y: f64, s: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    let big = (a - y).abs() + (b - y).abs();
    let d = b - a;
    let z = big / (2.0 * s).sqrt();
    (0.5 * std::f64::consts::PI * s).sqrt() * ((d * d - big * big) / (2.0 * s)).exp() * erfcx(z)
}

/// Result of one Euler race between two clocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerOutcome {
    /// Stop time and state per player (before absorption).
    pub stops: [Option<(f64, f64)>; 2],
    pub absorbed: Option<(f64, f64)>,
    pub truncated: bool,
}

fn euler_race(
    model: &DiffusionModel,
    mrsts: [&Mrst; 2],
    start: f64,
    config: &SimConfig,
    until_both: bool,
    rng: &mut ChaCha8Rng,
) -> EulerOutcome {
    let e1: f64 = rng.sample(Exp1);
    let e2: f64 = rng.sample(Exp1);
    let mut racers = [Racer::new(mrsts[0], start, e1), Racer::new(mrsts[1], start, e2)];
    let dt = config.dt;
    let mut x = start;
    let mut t = 0.0;
    let mut absorbed = (x == model.lower() || x == model.upper()).then_some((0.0, x));
    let done = |r: &[Racer; 2], t: f64| {
        let (a, b) = (r[0].stop, r[1].stop);
        match (a, b) {
            (Some(_), Some(_)) => true,
            (Some((s, _)), None) | (None, Some((s, _))) => !until_both || t > s + dt,
            (None, None) => false,
        }
    };
    while absorbed.is_none() && !done(&racers, t) {
        if t >= config.horizon {
            return EulerOutcome {
                stops: [racers[0].stop, racers[1].stop],
                absorbed: None,
                truncated: true,
            };
        }
        let s = model.volatility(x);
        let (y, hit) = euler_step(model, x, dt, rng);
        for r in racers.iter_mut() {
            r.step(model, x, y, t, dt, s * s);
        }
        t += dt;
        x = y;
        if hit {
            absorbed = Some((t, x));
        }
    }
    let cut = |s: Option<(f64, f64)>| match (s, absorbed) {
        (Some((ts, _)), Some((ta, _))) if ts > ta => None,
        _ => s,
    };
    EulerOutcome {
        stops: [cut(racers[0].stop), cut(racers[1].stop)],
        absorbed,
        truncated: false,
    }
}

/// Discounted payoff of `player` on one Euler outcome; `None` when truncated.
fn euler_payoff(pay: &PayoffSpec, o: &EulerOutcome, player: Player) -> Option<f64> {
    let r = pay.discount(player);
    let own = o.stops[player.index()];
    let opp = o.stops[player.other().index()];
    let g = pay.stop_payoff(player);
    let f = pay.follow_payoff(player);
    let inf = (f64::INFINITY, 0.0);
    let (to, xo) = own.unwrap_or(inf);
    let (tp, xp) = opp.unwrap_or(inf);
    let (ta, xa) = o.absorbed.unwrap_or(inf);
    let first = to.min(tp).min(ta);
    if first.is_infinite() {
        return None;
    }
    let disc = (-r * first).exp();
    Some(if to == first {
        disc * g.eval(xo)
    } else if tp == first {
        disc * f.eval(xp)
    } else {
        disc * g.eval(xa)
    })
}

fn chain_payoff(game: &Game, s: &ChainSample, player: Player) -> f64 {
    let x = game.grid().points()[s.index];
    let own = StopCause::of(player);
    let opp = StopCause::of(player.other());
    let disc = s.discount[player.index()];
    let p = game.payoffs();
    if s.cause == opp {
        disc * p.follow_payoff(player).eval(x)
    } else if s.cause == own || s.cause == StopCause::Tie || s.cause == StopCause::Absorbed {
        disc * p.stop_payoff(player).eval(x)
    } else {
        unreachable!()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffEstimate {
    pub player1: EstimateWithError,
    pub player2: EstimateWithError,
    pub mode: SimMode,
    /// Euler paths cut off at the horizon and left out of the estimates.
    pub truncated: usize,
}

impl PayoffEstimate {
    pub fn get(&self, player: Player) -> &EstimateWithError {
        match player {
            Player::One => &self.player1,
            Player::Two => &self.player2,
        }
    }
}

fn summarize(samples: impl Iterator<Item = Option<(f64, f64)>>, mode: SimMode) -> PayoffEstimate {
    let mut w = [Welford::default(), Welford::default()];
    let mut truncated = 0;
    for s in samples {
        match s {
            Some((a, b)) => {
                w[0].push(a);
                w[1].push(b);
            }
            None => truncated += 1,
        }
    }
    PayoffEstimate {
        player1: w[0].estimate(),
        player2: w[1].estimate(),
        mode,
        truncated,
    }
}

fn start_index(game: &Game, start: usize) -> Result<usize, McError> {
    if start >= game.grid().len() {
        return Err(McError::BadStart(start as f64));
    }
    Ok(start)
}

/// Payoff estimates for a grid profile, in the mode chosen by `config`.
pub fn mc_payoff_grid(
    game: &Game,
    profile: &StrategyProfile,
    start: usize,
    config: &SimConfig,
) -> Result<PayoffEstimate, McError> {
    let start = start_index(game, start)?;
    match config.mode {
        SimMode::EmbeddedChain => {
            let samples = simulate_embedded_chain(game, profile, start, config)?;
            Ok(summarize(
                samples.iter().map(|s| {
                    Some((chain_payoff(game, s, Player::One), chain_payoff(game, s, Player::Two)))
                }),
                SimMode::EmbeddedChain,
            ))
        }
        SimMode::Euler => {
            config.validate_for_points(game.grid().points())?;
            let (m1, m2) = (profile.to_mrst(Player::One), profile.to_mrst(Player::Two));
            euler_payoff_estimate(game.model(), game.payoffs(), [&m1, &m2], game.grid().points()[start], config)
        }
    }
}

fn euler_payoff_estimate(
    model: &DiffusionModel,
    payoffs: &PayoffSpec,
    mrsts: [&Mrst; 2],
    start: f64,
    config: &SimConfig,
) -> Result<PayoffEstimate, McError> {
    let outcomes = map_paths(config.n_paths, config.rng_seed, |rng| {
        euler_race(model, mrsts, start, config, false, rng)
    });
    Ok(summarize(
        outcomes.iter().map(|o| {
            if o.truncated {
                return None;
            }
            Some((euler_payoff(payoffs, o, Player::One)?, euler_payoff(payoffs, o, Player::Two)?))
        }),
        SimMode::Euler,
    ))
}

/// Grid profile equivalent to a pair of atom-only strategies, if any.
pub fn lower_to_grid(problem: &Problem, mrsts: [&Mrst; 2]) -> Option<StrategyProfile> {
    let model = problem.model();
    let mut points = vec![model.lower(), model.upper()];
    for m in mrsts {
        if !m.density().is_empty() {
            return None;
        }
        points.extend(m.atoms().iter().map(|a| a.x));
        points.extend(m.intervals().iter().flat_map(|&(a, b)| [a, b]));
    }
    points.sort_by(f64::total_cmp);
    points.dedup();
    let grid = crate::model::Grid::from_points(points).ok()?;
    let rates = |m: &Mrst| -> Vec<f64> {
        grid.interior()
            .iter()
            .map(|&x| {
                if !m.contains(x) {
                    f64::INFINITY
                } else {
                    m.atoms().iter().find(|a| a.x == x).map_or(0.0, |a| a.rate)
                }
            })
            .collect()
    };
    let (r1, r2) = (rates(mrsts[0]), rates(mrsts[1]));
    for (m, r) in [(mrsts[0], &r1), (mrsts[1], &r2)] {
        if grid_strategy_to_mrst(&grid, r).ok()? != *m {
            return None;
        }
    }
    StrategyProfile::from_rates(grid, &r1, &r2).ok()
}

/// Payoff estimates for general strategies from `start`. Atom-only strategies
/// run on the embedded chain when `config.mode` asks for it.
pub fn mc_payoff(
    problem: &Problem,
    mrst1: &Mrst,
    mrst2: &Mrst,
    start: f64,
    config: &SimConfig,
) -> Result<PayoffEstimate, McError> {
    config.validate()?;
    if !problem.model().contains(start) {
        return Err(McError::BadStart(start));
    }
    if config.mode == SimMode::EmbeddedChain {
        if let Some(profile) = lower_to_grid(problem, [mrst1, mrst2]) {
            if let Some(j) = profile.grid().index_of(start) {
                let game = Game::new(problem, profile.grid().clone())?;
                return mc_payoff_grid(&game, &profile, j, config);
            }
        }
    }
    config.validate_for_points(&atom_points(problem.model(), [mrst1, mrst2]))?;
    euler_payoff_estimate(problem.model(), problem.payoffs(), [mrst1, mrst2], start, config)
}

/// Frequencies of stopped locations and causes over grid points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawSample {
    pub points: Vec<f64>,
    pub counts: Vec<usize>,
    pub by_player1: Vec<usize>,
    pub by_player2: Vec<usize>,
    pub by_tie: Vec<usize>,
    pub n: usize,
}

impl LawSample {
    pub fn frequencies(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 / self.n as f64).collect()
    }
}

/// Empirical law of the stopped location for a grid profile. Euler stops are
/// assigned to the nearest grid point.
pub fn sample_stopped_law(
    game: &Game,
    profile: &StrategyProfile,
    start: usize,
    config: &SimConfig,
) -> Result<LawSample, McError> {
    let start = start_index(game, start)?;
    let points = game.grid().points().to_vec();
    let n = points.len();
    let mut law = LawSample {
        points: points.clone(),
        counts: vec![0; n],
        by_player1: vec![0; n],
        by_player2: vec![0; n],
        by_tie: vec![0; n],
        n: 0,
    };
    let mut record = |cause: StopCause, k: usize| {
        law.counts[k] += 1;
        law.n += 1;
        match cause {
            StopCause::Player1 => law.by_player1[k] += 1,
            StopCause::Player2 => law.by_player2[k] += 1,
            StopCause::Tie => law.by_tie[k] += 1,
            StopCause::Absorbed => {}
        }
    };
    match config.mode {
        SimMode::EmbeddedChain => {
            for s in simulate_embedded_chain(game, profile, start, config)? {
                record(s.cause, s.index);
            }
        }
        SimMode::Euler => {
            config.validate_for_points(&points)?;
            let (m1, m2) = (profile.to_mrst(Player::One), profile.to_mrst(Player::Two));
            let outcomes = map_paths(config.n_paths, config.rng_seed, |rng| {
                euler_race(game.model(), [&m1, &m2], points[start], config, false, rng)
            });
            let nearest = |x: f64| {
                let k = points.partition_point(|&p| p < x);
                if k == 0 {
                    0
                } else if k == n || x - points[k - 1] < points[k] - x {
                    k - 1
                } else {
                    k
                }
            };
            for o in outcomes.iter().filter(|o| !o.truncated) {
                let inf = (f64::INFINITY, 0.0);
                let (t1, x1) = o.stops[0].unwrap_or(inf);
                let (t2, x2) = o.stops[1].unwrap_or(inf);
                let (ta, xa) = o.absorbed.unwrap_or(inf);
                if t1 == t2 && t1 <= ta {
                    record(StopCause::Tie, nearest(x1));
                } else if t1 < t2 && t1 <= ta {
                    record(StopCause::Player1, nearest(x1));
                } else if t2 < t1 && t2 <= ta {
                    record(StopCause::Player2, nearest(x2));
                } else {
                    record(StopCause::Absorbed, nearest(xa));
                }
            }
        }
    }
    Ok(law)
}

/// Frequency with which both players stop at the same instant: within one
/// step in Euler mode, or by simultaneous immediate stops on the embedded chain.
pub fn tie_probability(
    problem: &Problem,
    mrst1: &Mrst,
    mrst2: &Mrst,
    start: f64,
    config: &SimConfig,
) -> Result<EstimateWithError, McError> {
    config.validate()?;
    if !problem.model().contains(start) {
        return Err(McError::BadStart(start));
    }
    if config.mode == SimMode::EmbeddedChain {
        let profile = lower_to_grid(problem, [mrst1, mrst2]).ok_or(McError::NotAGridStrategy)?;
        let j = profile.grid().index_of(start).ok_or(McError::BadStart(start))?;
        let game = Game::new(problem, profile.grid().clone())?;
        let samples = simulate_embedded_chain(&game, &profile, j, config)?;
        let mut w = Welford::default();
        for s in samples {
            w.push(if s.cause == StopCause::Tie { 1.0 } else { 0.0 });
        }
        return Ok(w.estimate());
    }
    euler_tie(problem.model(), [mrst1, mrst2], start, config)
}

fn atom_points(model: &DiffusionModel, mrsts: [&Mrst; 2]) -> Vec<f64> {
    let mut points: Vec<f64> = mrsts
        .iter()
        .flat_map(|m| m.atoms().iter().map(|a| a.x))
        .chain([model.lower(), model.upper()])
        .collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    points
}

fn euler_tie(
    model: &DiffusionModel,
    mrsts: [&Mrst; 2],
    start: f64,
    config: &SimConfig,
) -> Result<EstimateWithError, McError> {
    config.validate_for_points(&atom_points(model, mrsts))?;
    let dt = config.dt;
    let outcomes = map_paths(config.n_paths, config.rng_seed, |rng| {
        euler_race(model, mrsts, start, config, true, rng)
    });
    let mut w = Welford::default();
    for o in outcomes.iter().filter(|o| !o.truncated) {
        let tie = match (o.stops[0], o.stops[1]) {
            (Some((a, _)), Some((b, _))) => (a - b).abs() <= dt,
            _ => false,
        };
        w.push(if tie { 1.0 } else { 0.0 });
    }
    Ok(w.estimate())
}

/// [`tie_probability`] for a grid profile.
pub fn tie_probability_grid(
    game: &Game,
    profile: &StrategyProfile,
    start: usize,
    config: &SimConfig,
) -> Result<EstimateWithError, McError> {
    let start = start_index(game, start)?;
    if config.mode == SimMode::EmbeddedChain {
        let samples = simulate_embedded_chain(game, profile, start, config)?;
        let mut w = Welford::default();
        for s in samples {
            w.push(if s.cause == StopCause::Tie { 1.0 } else { 0.0 });
        }
        return Ok(w.estimate());
    }
    let (m1, m2) = (profile.to_mrst(Player::One), profile.to_mrst(Player::Two));
    euler_tie(game.model(), [&m1, &m2], game.grid().points()[start], config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_matches_two_pass() {
        let xs: Vec<f64> = (0..100).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
        let mut w = Welford::default();
        xs.iter().for_each(|&x| w.push(x));
        let mean = xs.iter().sum::<f64>() / 100.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 99.0;
        let e = w.estimate();
        assert!((e.mean - mean).abs() < 1e-12);
        assert!((e.std_error - (var / 100.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn bridge_local_time_averages_to_reflection_formula() {
        let t = 0.7;
        assert!((bridge_local_time(0.0, 0.0, 0.0, t) - (0.5 * std::f64::consts::PI * t).sqrt()).abs() < 1e-15);
        let h = 1e-3;
        let mut acc = 0.0;
        for k in -8000..=8000 {
            let b = k as f64 * h;
            let dens = (-b * b / (2.0 * t)).exp() / (2.0 * std::f64::consts::PI * t).sqrt();
            acc += dens * bridge_local_time(0.0, b, 0.0, t) * h;
        }
        assert!((acc - (2.0 * t / std::f64::consts::PI).sqrt()).abs() < 1e-6);
        // continuity across the asymptotic switch
        let s = 1.0;
        let lo = bridge_local_time(0.0, 0.0, 5.0 * 2f64.sqrt() / 2.0 - 1e-9, s);
        let hi = bridge_local_time(0.0, 0.0, 5.0 * 2f64.sqrt() / 2.0 + 1e-9, s);
        assert!((lo / hi - 1.0).abs() < 1e-4);
    }

    #[test]
    fn config_checks() {
        assert!(SimConfig::default().validate().is_ok());
        let bad = SimConfig {
            n_paths: 0,
            ..SimConfig::default()
        };
        assert!(bad.validate().is_err());
        let cfg = SimConfig {
            band_epsilon: 0.3,
            ..SimConfig::default()
        };
        assert!(matches!(
            cfg.validate_for_points(&[0.0, 0.5, 1.0]),
            Err(McError::BandTooWide { .. })
        ));
    }
}
