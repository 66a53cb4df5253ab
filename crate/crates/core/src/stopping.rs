//! Markovian randomized stopping times.
//!
//! A stopping rule is a continuation set `D` (open, inside the state
//! interval) together with a locally finite measure `λ` on `D`. The clock
//! `A_t = ∫_D l^y_t λ(dy)` runs on the local time of the path and jumps to
//! `+∞` on the first exit from `D`; the rule stops the first time `A_t`
//! reaches an independent `Exp(1)` variate.
//!
//! On a grid, the measure is atomic and is stored per interior point either
//! as a rate in `[0, ∞]` or in unit form `rate / (1 + rate)` in `[0, 1]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Grid, Player};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StoppingError {
    #[error("stopping rate {0} is negative")]
    NegativeRate(f64),
    #[error("unit rate {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("atom or density cell at {0} lies outside the continuation set")]
    OutsideContinuation(f64),
    #[error("local-time increments missing: expected {expected}, got {got}")]
    MissingLocalTime { expected: usize, got: usize },
    #[error("path ended at t = {time} before the clock reached its threshold")]
    PathTooShort { time: f64 },
}

/// Maps a stopping rate in `[0, ∞]` to `[0, 1]`; `∞ ↦ 1`.
pub fn iota_unit(rate: f64) -> Result<f64, StoppingError> {
    if rate.is_nan() || rate < 0.0 {
        return Err(StoppingError::NegativeRate(rate));
    }
    if rate.is_infinite() {
        return Ok(1.0);
    }
    Ok(rate / (1.0 + rate))
}

/// Inverse of [`iota_unit`]; `1 ↦ ∞`.
pub fn iota_rate(unit: f64) -> Result<f64, StoppingError> {
    if !(0.0..=1.0).contains(&unit) {
        return Err(StoppingError::OutOfRange(unit));
    }
    if unit == 1.0 {
        return Ok(f64::INFINITY);
    }
    Ok(unit / (1.0 - unit))
}

/// Per-player atomic stopping rates on the interior points of a grid, in unit form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyProfile {
    grid: Grid,
    unit1: Vec<f64>,
    unit2: Vec<f64>,
}

impl StrategyProfile {
    pub fn from_units(
        grid: Grid,
        unit1: Vec<f64>,
        unit2: Vec<f64>,
    ) -> Result<StrategyProfile, StoppingError> {
        let m = grid.n_interior();
        for u in [&unit1, &unit2] {
            if u.len() != m {
                return Err(StoppingError::LengthMismatch {
                    expected: m,
                    got: u.len(),
                });
            }
            if let Some(bad) = u.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(StoppingError::OutOfRange(*bad));
            }
        }
        Ok(StrategyProfile { grid, unit1, unit2 })
    }

    pub fn from_rates(
        grid: Grid,
        rates1: &[f64],
        rates2: &[f64],
    ) -> Result<StrategyProfile, StoppingError> {
        let unit1 = rates1.iter().map(|&r| iota_unit(r)).collect::<Result<_, _>>()?;
        let unit2 = rates2.iter().map(|&r| iota_unit(r)).collect::<Result<_, _>>()?;
        StrategyProfile::from_units(grid, unit1, unit2)
    }

    /// Neither player stops voluntarily.
    pub fn zeros(grid: Grid) -> StrategyProfile {
        let m = grid.n_interior();
        StrategyProfile {
            grid,
            unit1: vec![0.0; m],
            unit2: vec![0.0; m],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn units(&self, player: Player) -> &[f64] {
        match player {
            Player::One => &self.unit1,
            Player::Two => &self.unit2,
        }
    }

    pub fn units_mut(&mut self, player: Player) -> &mut [f64] {
        match player {
            Player::One => &mut self.unit1,
            Player::Two => &mut self.unit2,
        }
    }

    pub fn rates(&self, player: Player) -> Vec<f64> {
        self.units(player)
            .iter()
            .map(|&u| iota_rate(u).expect("unit form is kept in [0, 1]"))
            .collect()
    }

    /// Unit rate of `player` at interior index `j` (grid index `j + 1`).
    pub fn unit(&self, player: Player, j: usize) -> f64 {
        self.units(player)[j]
    }

    pub fn with_unit(&self, player: Player, j: usize, value: f64) -> StrategyProfile {
        let mut out = self.clone();
        out.units_mut(player)[j] = value.clamp(0.0, 1.0);
        out
    }

    /// The stopping rule of one player as a general [`Mrst`].
    pub fn to_mrst(&self, player: Player) -> Mrst {
        grid_strategy_to_mrst(&self.grid, &self.rates(player))
            .expect("rates are indexed by interior points")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub x: f64,
    pub rate: f64,
}

/// Piecewise-constant density `rate` on `[lo, hi)`, per unit local time and unit space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityCell {
    pub lo: f64,
    pub hi: f64,
    pub rate: f64,
}

/// General Markovian randomized stopping time `(D, λ)`.
///
/// `D` is kept as sorted disjoint open intervals; infinite atoms are
/// canonicalized by removing their location from `D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mrst {
    intervals: Vec<(f64, f64)>,
    atoms: Vec<Atom>,
    density: Vec<DensityCell>,
}

impl Mrst {
    /// `intervals` must be disjoint open intervals. Atoms with rate `∞` split
    /// the interval that contains them; zero atoms are dropped.
    pub fn new(
        mut intervals: Vec<(f64, f64)>,
        atoms: Vec<Atom>,
        density: Vec<DensityCell>,
    ) -> Result<Mrst, StoppingError> {
        intervals.retain(|(a, b)| b > a);
        intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut finite = Vec::new();
        for atom in atoms {
            if atom.rate.is_nan() || atom.rate < 0.0 {
                return Err(StoppingError::NegativeRate(atom.rate));
            }
            if atom.rate.is_infinite() {
                if let Some(k) = intervals.iter().position(|&(a, b)| a < atom.x && atom.x < b) {
                    let (a, b) = intervals[k];
                    intervals.splice(k..=k, [(a, atom.x), (atom.x, b)]);
                }
            } else if atom.rate > 0.0 {
                finite.push(atom);
            }
        }
        finite.sort_by(|a, b| a.x.total_cmp(&b.x));
        let mrst = Mrst {
            intervals,
            atoms: finite,
            density: density.into_iter().filter(|c| c.rate > 0.0).collect(),
        };
        for atom in &mrst.atoms {
            if !mrst.contains(atom.x) {
                return Err(StoppingError::OutsideContinuation(atom.x));
            }
        }
        for cell in &mrst.density {
            if cell.rate.is_nan() || cell.rate < 0.0 || !cell.rate.is_finite() {
                return Err(StoppingError::NegativeRate(cell.rate));
            }
            let inside = mrst
                .intervals
                .iter()
                .any(|&(a, b)| a <= cell.lo && cell.hi <= b && cell.lo < cell.hi);
            if !inside {
                return Err(StoppingError::OutsideContinuation(cell.lo));
            }
        }
        Ok(mrst)
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn density(&self) -> &[DensityCell] {
        &self.density
    }

    pub fn contains(&self, x: f64) -> bool {
        self.component(x).is_some()
    }

    /// The connected component of `D` containing `x`.
    pub fn component(&self, x: f64) -> Option<(f64, f64)> {
        self.intervals.iter().copied().find(|&(a, b)| a < x && x < b)
    }

    /// Point of `D^c` hit first when moving continuously from `from` to `to`.
    pub fn exit_point(&self, from: f64, to: f64) -> Option<f64> {
        match self.component(from) {
            None => Some(from),
            Some((a, b)) => {
                if to <= a {
                    Some(a)
                } else if to >= b {
                    Some(b)
                } else {
                    None
                }
            }
        }
    }

    /// Density rate at `x`, zero outside the cells.
    pub fn density_at(&self, x: f64) -> f64 {
        self.density
            .iter()
            .find(|c| c.lo <= x && x < c.hi)
            .map_or(0.0, |c| c.rate)
    }

    /// Same rule with every rate multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Mrst {
        Mrst {
            intervals: self.intervals.clone(),
            atoms: self
                .atoms
                .iter()
                .map(|a| Atom {
                    x: a.x,
                    rate: a.rate * factor,
                })
                .collect(),
            density: self
                .density
                .iter()
                .map(|c| DensityCell {
                    rate: c.rate * factor,
                    ..*c
                })
                .collect(),
        }
    }
}

/// Lowers grid rates to a general rule: `D` is the open interval minus the
/// points with infinite rate, finite positive rates become atoms.
pub fn grid_strategy_to_mrst(grid: &Grid, rates: &[f64]) -> Result<Mrst, StoppingError> {
    if rates.len() != grid.n_interior() {
        return Err(StoppingError::LengthMismatch {
            expected: grid.n_interior(),
            got: rates.len(),
        });
    }
    let atoms = grid
        .interior()
        .iter()
        .zip(rates)
        .map(|(&x, &rate)| Atom { x, rate })
        .collect();
    Mrst::new(vec![(grid.lower(), grid.upper())], atoms, Vec::new())
}

/// Value of the additive functional along one path.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClockState {
    pub accumulated: f64,
    pub exhausted_at: Option<f64>,
}

impl ClockState {
    /// Adds a nonnegative increment; once infinite the clock stays infinite.
    pub fn advance(&mut self, delta: f64, time: f64) {
        debug_assert!(delta >= 0.0);
        if self.accumulated.is_infinite() {
            return;
        }
        self.accumulated += delta;
        if self.accumulated.is_infinite() {
            self.exhausted_at = Some(time);
        }
    }
}

/// Local-time increments over one path step, one entry per atom and per density cell.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LocalTimeIncrements {
    pub atoms: Vec<f64>,
    pub cells: Vec<f64>,
}

/// Increment of the clock over the segment `from -> to`.
///
/// Returns `∞` when the segment leaves the continuation set.
pub fn clock_increment(
    mrst: &Mrst,
    from: f64,
    to: f64,
    local_times: &LocalTimeIncrements,
) -> Result<f64, StoppingError> {
    if local_times.atoms.len() != mrst.atoms.len() {
        return Err(StoppingError::MissingLocalTime {
            expected: mrst.atoms.len(),
            got: local_times.atoms.len(),
        });
    }
    if local_times.cells.len() != mrst.density.len() {
        return Err(StoppingError::MissingLocalTime {
            expected: mrst.density.len(),
            got: local_times.cells.len(),
        });
    }
    if mrst.exit_point(from, to).is_some() {
        return Ok(f64::INFINITY);
    }
    let atoms: f64 = mrst
        .atoms
        .iter()
        .zip(&local_times.atoms)
        .map(|(a, dl)| a.rate * dl)
        .sum();
    let cells: f64 = mrst
        .density
        .iter()
        .zip(&local_times.cells)
        .map(|(c, dl)| c.rate * dl)
        .sum();
    Ok(atoms + cells)
}

/// A discretized path skeleton on a uniform time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub dt: f64,
    pub states: Vec<f64>,
    /// True when the last state is an absorbing endpoint.
    pub absorbed: bool,
}

impl Path {
    pub fn steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn horizon(&self) -> f64 {
        self.steps() as f64 * self.dt
    }
}

/// Per-step local-time increments aligned with a path (one entry per step).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PathLocalTimes {
    pub steps: Vec<LocalTimeIncrements>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopSample {
    pub time: f64,
    pub state: f64,
    /// True when the stop is a first exit from the continuation set.
    pub by_exit: bool,
}

/// Stops at the first time the clock reaches `threshold` (an `Exp(1)` draw)
/// or at the first exit from the continuation set.
pub fn sample_stop(
    mrst: &Mrst,
    path: &Path,
    local_times: &PathLocalTimes,
    threshold: f64,
) -> Result<StopSample, StoppingError> {
    let start = path.states[0];
    if !mrst.contains(start) {
        return Ok(StopSample {
            time: 0.0,
            state: start,
            by_exit: true,
        });
    }
    if local_times.steps.len() < path.steps() {
        return Err(StoppingError::MissingLocalTime {
            expected: path.steps(),
            got: local_times.steps.len(),
        });
    }
    let mut clock = 0.0;
    for (k, w) in path.states.windows(2).enumerate() {
        let (x0, x1) = (w[0], w[1]);
        let t0 = k as f64 * path.dt;
        if let Some(exit) = mrst.exit_point(x0, x1) {
            let frac = if x1 != x0 { (exit - x0) / (x1 - x0) } else { 0.0 };
            return Ok(StopSample {
                time: t0 + frac.clamp(0.0, 1.0) * path.dt,
                state: exit,
                by_exit: true,
            });
        }
        let delta = clock_increment(mrst, x0, x1, &local_times.steps[k])?;
        if clock + delta >= threshold {
            let frac = if delta > 0.0 {
                ((threshold - clock) / delta).clamp(0.0, 1.0)
            } else {
                0.0
            };
            return Ok(StopSample {
                time: t0 + frac * path.dt,
                state: x0 + frac * (x1 - x0),
                by_exit: false,
            });
        }
        clock += delta;
    }
    Err(StoppingError::PathTooShort {
        time: path.horizon(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iota_examples() {
        assert_eq!(iota_unit(0.0).unwrap(), 0.0);
        assert_eq!(iota_unit(f64::INFINITY).unwrap(), 1.0);
        assert_eq!(iota_unit(1.0).unwrap(), 0.5);
        assert_eq!(iota_rate(0.0).unwrap(), 0.0);
        assert_eq!(iota_rate(1.0).unwrap(), f64::INFINITY);
        assert_eq!(iota_rate(0.5).unwrap(), 1.0);
        assert_eq!(iota_unit(-1.0), Err(StoppingError::NegativeRate(-1.0)));
        assert_eq!(iota_rate(1.5), Err(StoppingError::OutOfRange(1.5)));
    }

    proptest! {
        #[test]
        fn iota_round_trip(u in 0.0f64..=1.0) {
            let back = iota_unit(iota_rate(u).unwrap()).unwrap();
            prop_assert!((back - u).abs() <= 4.0 * f64::EPSILON);
        }

        #[test]
        fn iota_monotone(a in 0.0f64..1e6, b in 0.0f64..1e6) {
            prop_assume!(a < b);
            prop_assert!(iota_unit(a).unwrap() <= iota_unit(b).unwrap());
        }
    }

    fn grid() -> Grid {
        Grid::from_points(vec![0.0, 0.5, 1.0]).unwrap()
    }

    #[test]
    fn grid_rates_to_mrst() {
        let m = grid_strategy_to_mrst(&grid(), &[2.0]).unwrap();
        assert_eq!(m.intervals(), &[(0.0, 1.0)]);
        assert_eq!(m.atoms(), &[Atom { x: 0.5, rate: 2.0 }]);

        let m = grid_strategy_to_mrst(&grid(), &[f64::INFINITY]).unwrap();
        assert_eq!(m.intervals(), &[(0.0, 0.5), (0.5, 1.0)]);
        assert!(m.atoms().is_empty());

        let m = grid_strategy_to_mrst(&grid(), &[0.0]).unwrap();
        assert_eq!(m.intervals(), &[(0.0, 1.0)]);
        assert!(m.atoms().is_empty());
    }

    #[test]
    fn infinite_atom_and_removed_point_are_the_same_rule() {
        let a = Mrst::new(
            vec![(0.0, 1.0)],
            vec![Atom {
                x: 0.3,
                rate: f64::INFINITY,
            }],
            vec![],
        )
        .unwrap();
        let b = Mrst::new(vec![(0.0, 0.3), (0.3, 1.0)], vec![], vec![]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn atoms_must_lie_in_continuation_set() {
        let err = Mrst::new(
            vec![(0.0, 0.5)],
            vec![Atom { x: 0.7, rate: 1.0 }],
            vec![],
        );
        assert_eq!(err, Err(StoppingError::OutsideContinuation(0.7)));
    }

    #[test]
    fn clock_increment_examples() {
        let m = grid_strategy_to_mrst(&grid(), &[2.0]).unwrap();
        let lt = LocalTimeIncrements {
            atoms: vec![0.3],
            cells: vec![],
        };
        assert!((clock_increment(&m, 0.49, 0.51, &lt).unwrap() - 0.6).abs() < 1e-15);

        let removed = grid_strategy_to_mrst(&grid(), &[f64::INFINITY]).unwrap();
        let none = LocalTimeIncrements::default();
        assert_eq!(
            clock_increment(&removed, 0.45, 0.55, &none).unwrap(),
            f64::INFINITY
        );

        let empty = grid_strategy_to_mrst(&grid(), &[0.0]).unwrap();
        assert_eq!(clock_increment(&empty, 0.3, 0.35, &none).unwrap(), 0.0);

        assert!(matches!(
            clock_increment(&m, 0.3, 0.35, &none),
            Err(StoppingError::MissingLocalTime { .. })
        ));
    }

    #[test]
    fn clock_is_monotone_and_sticks_at_infinity() {
        let mut c = ClockState::default();
        c.advance(0.5, 0.1);
        c.advance(0.0, 0.2);
        assert_eq!(c.accumulated, 0.5);
        c.advance(f64::INFINITY, 0.3);
        assert_eq!(c.exhausted_at, Some(0.3));
        c.advance(1.0, 0.4);
        assert_eq!(c.accumulated, f64::INFINITY);
        assert_eq!(c.exhausted_at, Some(0.3));
    }

    fn walk() -> (Path, PathLocalTimes) {
        // 0.5 -> 0.52 -> 0.48 -> 0.6 -> 1.0 (absorbed)
        let states = vec![0.5, 0.52, 0.48, 0.6, 1.0];
        let lt = PathLocalTimes {
            steps: vec![
                LocalTimeIncrements {
                    atoms: vec![0.1],
                    cells: vec![],
                },
                LocalTimeIncrements {
                    atoms: vec![0.2],
                    cells: vec![],
                },
                LocalTimeIncrements {
                    atoms: vec![0.05],
                    cells: vec![],
                },
                LocalTimeIncrements {
                    atoms: vec![0.0],
                    cells: vec![],
                },
            ],
        };
        (
            Path {
                dt: 0.01,
                states,
                absorbed: true,
            },
            lt,
        )
    }

    #[test]
    fn sample_stop_exit_only() {
        let m = grid_strategy_to_mrst(&grid(), &[0.0]).unwrap();
        let (path, _) = walk();
        let none = PathLocalTimes {
            steps: vec![LocalTimeIncrements::default(); 4],
        };
        let s = sample_stop(&m, &path, &none, 0.3).unwrap();
        assert!(s.by_exit);
        assert_eq!(s.state, 1.0);
    }

    #[test]
    fn sample_stop_immediate_when_start_removed() {
        let m = grid_strategy_to_mrst(&grid(), &[f64::INFINITY]).unwrap();
        let (path, lt) = walk();
        let s = sample_stop(&m, &path, &lt, 0.3).unwrap();
        assert_eq!(s.time, 0.0);
        assert_eq!(s.state, 0.5);
    }

    #[test]
    fn sample_stop_by_clock_and_scaling_law() {
        let m = grid_strategy_to_mrst(&grid(), &[2.0]).unwrap();
        let (path, lt) = walk();
        // clock: 0.2, 0.6, 0.7 -> threshold 0.5 is crossed in the second step
        let s = sample_stop(&m, &path, &lt, 0.5).unwrap();
        assert!(!s.by_exit);
        assert!((s.time - (0.01 + 0.75 * 0.01)).abs() < 1e-15);
        let doubled = sample_stop(&m.scaled(2.0), &path, &lt, 1.0).unwrap();
        assert_eq!(s, doubled);
    }

    #[test]
    fn sample_stop_path_too_short() {
        let m = grid_strategy_to_mrst(&grid(), &[2.0]).unwrap();
        let (mut path, mut lt) = walk();
        path.states.truncate(3);
        path.absorbed = false;
        lt.steps.truncate(2);
        assert!(matches!(
            sample_stop(&m, &path, &lt, 5.0),
            Err(StoppingError::PathTooShort { .. })
        ));
    }
}
