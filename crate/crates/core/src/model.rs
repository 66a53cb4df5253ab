//! Diffusion driver, payoff data, and state grids.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::Expr;

/// Number of points used to check coefficient invariants at construction.
const CONSTRUCTION_MESH: usize = 1000;
/// Tolerance for the boundary equality `f_i = g_i`.
pub const BOUNDARY_TOLERANCE: f64 = 1e-12;
/// Smallest volatility accepted anywhere on the interval.
pub const SIGMA_MIN: f64 = 1e-10;
/// Upper bound for the finite-difference Lipschitz estimate of μ and σ.
pub const LIPSCHITZ_BOUND: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("volatility {value} at x = {x} is not positive")]
    NonPositiveVolatility { x: f64, value: f64 },
    #[error("interval [{lower}, {upper}] is not a bounded nonempty interval")]
    UnboundedInterval { lower: f64, upper: f64 },
    #[error("{what} is not finite at x = {x}")]
    NonFiniteCoefficient { what: &'static str, x: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("assumptions violated: {0}")]
    AssumptionsViolated(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("duplicate grid point {0}")]
    DuplicatePoints(f64),
    #[error("grid point {0} lies outside the state interval")]
    PointOutsideInterval(f64),
    #[error("grid needs at least one interior point")]
    NoInteriorPoints,
    #[error("grid levels are not nested at level {0}")]
    NotNested(usize),
}

/// Piecewise-linear interpolation table, clamped at the ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl Table {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Table, ModelError> {
        if xs.len() != ys.len() || xs.len() < 2 {
            return Err(ModelError::InvalidParameter(
                "table needs at least two (x, y) pairs of equal length".into(),
            ));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ModelError::InvalidParameter(
                "table abscissae must be strictly increasing".into(),
            ));
        }
        Ok(Table { xs, ys })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        let k = self.xs.partition_point(|&t| t <= x).saturating_sub(1);
        let (x0, x1) = (self.xs[k], self.xs[k + 1]);
        let t = (x - x0) / (x1 - x0);
        self.ys[k] * (1.0 - t) + self.ys[k + 1] * t
    }
}

/// A real function of the state variable.
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarFn {
    Constant(f64),
    /// `slope * x + intercept`
    Affine { slope: f64, intercept: f64 },
    Expr(Expr),
    Table(Table),
}

impl ScalarFn {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            ScalarFn::Constant(c) => *c,
            ScalarFn::Affine { slope, intercept } => slope * x + intercept,
            ScalarFn::Expr(e) => e.eval(x),
            ScalarFn::Table(t) => t.eval(x),
        }
    }
}

/// Raw model description before validation.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelFamily {
    /// Brownian motion with constant drift.
    Bm { sigma: f64, drift: f64 },
    /// Ornstein-Uhlenbeck: `dX = θ(m - X)dt + σ dW`.
    Ou { theta: f64, mean: f64, sigma: f64 },
    /// Geometric Brownian motion: `dX = μ̂ X dt + σ̂ X dW`.
    Gbm { mu: f64, sigma: f64 },
    /// User-supplied coefficient functions.
    Custom { drift: ScalarFn, volatility: ScalarFn },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawModelSpec {
    pub family: ModelFamily,
    pub lower: f64,
    pub upper: f64,
}

/// A regular diffusion on a compact interval, absorbed at both endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    lower: f64,
    upper: f64,
    drift: ScalarFn,
    volatility: ScalarFn,
}

impl DiffusionModel {
    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn drift(&self, x: f64) -> f64 {
        self.drift.eval(x)
    }

    pub fn volatility(&self, x: f64) -> f64 {
        self.volatility.eval(x)
    }

    pub fn drift_fn(&self) -> &ScalarFn {
        &self.drift
    }

    pub fn volatility_fn(&self) -> &ScalarFn {
        &self.volatility
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }

    /// Bypasses validation, e.g. for a zero-noise simulation stub.
    pub fn new_unchecked(
        lower: f64,
        upper: f64,
        drift: ScalarFn,
        volatility: ScalarFn,
    ) -> DiffusionModel {
        DiffusionModel {
            lower,
            upper,
            drift,
            volatility,
        }
    }
}

fn mesh(lower: f64, upper: f64, intervals: usize) -> impl Iterator<Item = f64> {
    let n = intervals.max(1);
    (0..=n).map(move |k| {
        if k == n {
            upper
        } else {
            lower + (upper - lower) * k as f64 / n as f64
        }
    })
}

/// Expand a raw spec into a validated [`DiffusionModel`].
pub fn build_model(raw: &RawModelSpec) -> Result<DiffusionModel, ModelError> {
    let (lower, upper) = (raw.lower, raw.upper);
    if !(lower.is_finite() && upper.is_finite() && lower < upper) {
        return Err(ModelError::UnboundedInterval { lower, upper });
    }
    let (drift, volatility) = match &raw.family {
        ModelFamily::Bm { sigma, drift } => (ScalarFn::Constant(*drift), ScalarFn::Constant(*sigma)),
        ModelFamily::Ou { theta, mean, sigma } => {
            if *theta < 0.0 {
                return Err(ModelError::InvalidParameter(format!(
                    "OU mean-reversion speed must be nonnegative, got {theta}"
                )));
            }
            (
                ScalarFn::Affine {
                    slope: -theta,
                    intercept: theta * mean,
                },
                ScalarFn::Constant(*sigma),
            )
        }
        ModelFamily::Gbm { mu, sigma } => (
            ScalarFn::Affine {
                slope: *mu,
                intercept: 0.0,
            },
            ScalarFn::Affine {
                slope: *sigma,
                intercept: 0.0,
            },
        ),
        ModelFamily::Custom { drift, volatility } => (drift.clone(), volatility.clone()),
    };
    for x in mesh(lower, upper, CONSTRUCTION_MESH) {
        let mu = drift.eval(x);
        let sigma = volatility.eval(x);
        if !mu.is_finite() {
            return Err(ModelError::NonFiniteCoefficient { what: "drift", x });
        }
        if !sigma.is_finite() {
            return Err(ModelError::NonFiniteCoefficient {
                what: "volatility",
                x,
            });
        }
        if sigma < SIGMA_MIN {
            return Err(ModelError::NonPositiveVolatility { x, value: sigma });
        }
    }
    Ok(DiffusionModel {
        lower,
        upper,
        drift,
        volatility,
    })
}

/// Payoff data of the stopping game.
///
/// Player `i` receives `g_i` when stopping first (or simultaneously) and
/// `f_i` when the opponent stops first; `r_i` is the discount rate.
#[derive(Debug, Clone, PartialEq)]
pub struct PayoffSpec {
    pub g1: ScalarFn,
    pub f1: ScalarFn,
    pub g2: ScalarFn,
    pub f2: ScalarFn,
    pub r1: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Player {
    One,
    Two,
}

impl Player {
    pub fn other(self) -> Player {
        match self {
            Player::One => Player::Two,
            Player::Two => Player::One,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Player::One => 0,
            Player::Two => 1,
        }
    }
}

impl PayoffSpec {
    pub fn stop_payoff(&self, player: Player) -> &ScalarFn {
        match player {
            Player::One => &self.g1,
            Player::Two => &self.g2,
        }
    }

    pub fn follow_payoff(&self, player: Player) -> &ScalarFn {
        match player {
            Player::One => &self.f1,
            Player::Two => &self.f2,
        }
    }

    pub fn discount(&self, player: Player) -> f64 {
        match player {
            Player::One => self.r1,
            Player::Two => self.r2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub x: f64,
    /// Size of the violation (or smallest margin when the check passes).
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    pub worst: Option<Witness>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
    pub notes: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> Vec<&AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

// Records the worst (largest) violation; `violation > 0` means failure.
struct Tracker {
    name: &'static str,
    worst: Option<Witness>,
    failed: bool,
}

impl Tracker {
    fn new(name: &'static str) -> Tracker {
        Tracker {
            name,
            worst: None,
            failed: false,
        }
    }

    fn observe(&mut self, x: f64, violation: f64, failed: bool) {
        let worse = match &self.worst {
            None => true,
            Some(w) => violation > w.value || violation.is_nan(),
        };
        if worse {
            self.worst = Some(Witness {
                x,
                value: violation,
            });
        }
        self.failed |= failed;
    }

    fn finish(self) -> AssumptionCheck {
        AssumptionCheck {
            name: self.name.to_string(),
            passed: !self.failed,
            worst: if self.failed { self.worst } else { None },
        }
    }
}

/// Check the structural assumptions on a mesh of `mesh_intervals` cells.
///
/// (A) `g_i <= f_i`, nonnegative payoffs; (B) compact interval, σ bounded
/// away from 0, Lipschitz coefficients; (C) `f_i = g_i` at both endpoints.
pub fn validate_assumptions(
    model: &DiffusionModel,
    payoffs: &PayoffSpec,
    mesh_intervals: usize,
) -> ValidationReport {
    let xs: Vec<f64> = mesh(model.lower, model.upper, mesh_intervals).collect();
    let mut order1 = Tracker::new("A: g1 <= f1");
    let mut order2 = Tracker::new("A: g2 <= f2");
    let mut nonneg = Tracker::new("A: payoffs nonnegative");
    let mut finite = Tracker::new("payoffs finite");
    let mut sigma_pos = Tracker::new("B: volatility positive");
    let mut coeff_finite = Tracker::new("B: coefficients finite");
    let mut lipschitz = Tracker::new("B: Lipschitz coefficients");
    let mut boundary1 = Tracker::new("C: f1 = g1 on boundary");
    let mut boundary2 = Tracker::new("C: f2 = g2 on boundary");
    let mut rates = Tracker::new("discount rates nonnegative");

    let mut prev: Option<(f64, f64, f64)> = None;
    for &x in &xs {
        let g1 = payoffs.g1.eval(x);
        let f1 = payoffs.f1.eval(x);
        let g2 = payoffs.g2.eval(x);
        let f2 = payoffs.f2.eval(x);
        let all_finite = [g1, f1, g2, f2].iter().all(|v| v.is_finite());
        finite.observe(x, if all_finite { 0.0 } else { f64::INFINITY }, !all_finite);
        order1.observe(x, g1 - f1, !(g1 <= f1));
        order2.observe(x, g2 - f2, !(g2 <= f2));
        let min_pay = g1.min(f1).min(g2).min(f2);
        nonneg.observe(x, -min_pay, !(min_pay >= 0.0));

        let mu = model.drift(x);
        let sigma = model.volatility(x);
        let ok = mu.is_finite() && sigma.is_finite();
        coeff_finite.observe(x, if ok { 0.0 } else { f64::INFINITY }, !ok);
        sigma_pos.observe(x, SIGMA_MIN - sigma, !(sigma >= SIGMA_MIN));
        if let Some((px, pmu, psigma)) = prev {
            let dx = x - px;
            let slope = ((mu - pmu) / dx).abs().max(((sigma - psigma) / dx).abs());
            lipschitz.observe(x, slope - LIPSCHITZ_BOUND, !(slope <= LIPSCHITZ_BOUND));
        }
        prev = Some((x, mu, sigma));
    }
    for x in [model.lower, model.upper] {
        let d1 = (payoffs.f1.eval(x) - payoffs.g1.eval(x)).abs();
        let d2 = (payoffs.f2.eval(x) - payoffs.g2.eval(x)).abs();
        boundary1.observe(x, d1, !(d1 <= BOUNDARY_TOLERANCE));
        boundary2.observe(x, d2, !(d2 <= BOUNDARY_TOLERANCE));
    }
    for r in [payoffs.r1, payoffs.r2] {
        rates.observe(f64::NAN, -r, !(r >= 0.0 && r.is_finite()));
    }

    let mut notes = Vec::new();
    for (name, r) in [("r1", payoffs.r1), ("r2", payoffs.r2)] {
        if r == 0.0 {
            notes.push(format!(
                "{name} = 0: relies on a.s. absorption at the endpoints for unique values"
            ));
        }
    }
    ValidationReport {
        checks: vec![
            order1.finish(),
            order2.finish(),
            nonneg.finish(),
            finite.finish(),
            sigma_pos.finish(),
            coeff_finite.finish(),
            lipschitz.finish(),
            boundary1.finish(),
            boundary2.finish(),
            rates.finish(),
        ],
        notes,
    }
}

/// A model together with payoffs that passed [`validate_assumptions`].
#[derive(Debug, Clone)]
pub struct Problem {
    model: DiffusionModel,
    payoffs: PayoffSpec,
    report: ValidationReport,
}

impl Problem {
    pub fn new(
        model: DiffusionModel,
        payoffs: PayoffSpec,
        mesh_intervals: usize,
    ) -> Result<Problem, ModelError> {
        let report = validate_assumptions(&model, &payoffs, mesh_intervals);
        if !report.passed() {
            let msg = report
                .failures()
                .iter()
                .map(|c| match &c.worst {
                    Some(w) => format!("{} (x = {}, violation {:e})", c.name, w.x, w.value),
                    None => c.name.clone(),
                })
                .collect::<Vec<_>>()
                .join("; ");
            return Err(ModelError::AssumptionsViolated(msg));
        }
        Ok(Problem {
            model,
            payoffs,
            report,
        })
    }

    pub fn model(&self) -> &DiffusionModel {
        &self.model
    }

    pub fn payoffs(&self) -> &PayoffSpec {
        &self.payoffs
    }

    pub fn report(&self) -> &ValidationReport {
        &self.report
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Uniform,
    Chebyshev,
    /// Full list of points; the interval endpoints are added when missing.
    Explicit(Vec<f64>),
}

/// Finite state grid containing both endpoints of the interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    points: Vec<f64>,
}

impl Grid {
    /// Builds a grid from a full point list. Points must be strictly increasing.
    pub fn from_points(points: Vec<f64>) -> Result<Grid, GridError> {
        for w in points.windows(2) {
            if w[1] == w[0] {
                return Err(GridError::DuplicatePoints(w[0]));
            }
            if w[1] < w[0] {
                return Err(GridError::PointOutsideInterval(w[1]));
            }
        }
        if points.len() < 3 {
            return Err(GridError::NoInteriorPoints);
        }
        Ok(Grid { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn n_interior(&self) -> usize {
        self.points.len() - 2
    }

    pub fn lower(&self) -> f64 {
        self.points[0]
    }

    pub fn upper(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn is_interior(&self, index: usize) -> bool {
        index > 0 && index + 1 < self.points.len()
    }

    pub fn interior_mask(&self) -> Vec<bool> {
        (0..self.points.len()).map(|i| self.is_interior(i)).collect()
    }

    /// Interior points only, in order.
    pub fn interior(&self) -> &[f64] {
        &self.points[1..self.points.len() - 1]
    }

    pub fn index_of(&self, x: f64) -> Option<usize> {
        self.points.iter().position(|&p| p == x)
    }

    pub fn min_spacing(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_spacing(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    /// Inserts the midpoint of every cell.
    pub fn refine(&self) -> Grid {
        let mut points = Vec::with_capacity(2 * self.points.len() - 1);
        for w in self.points.windows(2) {
            points.push(w[0]);
            points.push(0.5 * (w[0] + w[1]));
        }
        points.push(self.upper());
        Grid { points }
    }

    /// True when every point of `coarser` is also a point of `self`.
    pub fn contains_grid(&self, coarser: &Grid) -> bool {
        coarser.points.iter().all(|p| self.index_of(*p).is_some())
    }

    /// `levels` nested grids starting at `self`, each the refinement of the previous one.
    pub fn refinement_schedule(&self, levels: usize) -> Vec<Grid> {
        let mut out = Vec::with_capacity(levels);
        let mut g = self.clone();
        for _ in 0..levels {
            let next = g.refine();
            out.push(g);
            g = next;
        }
        out
    }
}

/// Checks that a list of grids is nested (each a superset of its predecessor).
pub fn check_nested(schedule: &[Grid]) -> Result<(), GridError> {
    for (k, w) in schedule.windows(2).enumerate() {
        if !w[1].contains_grid(&w[0]) {
            return Err(GridError::NotNested(k + 1));
        }
    }
    Ok(())
}

pub fn build_grid(
    model: &DiffusionModel,
    n_interior: usize,
    placement: &Placement,
) -> Result<Grid, GridError> {
    let (lo, hi) = (model.lower, model.upper);
    match placement {
        Placement::Uniform => {
            if n_interior == 0 {
                return Err(GridError::NoInteriorPoints);
            }
            let n = n_interior + 1;
            Grid::from_points(mesh(lo, hi, n).collect())
        }
        Placement::Chebyshev => {
            if n_interior == 0 {
                return Err(GridError::NoInteriorPoints);
            }
            let n = n_interior as f64;
            let mid = 0.5 * (lo + hi);
            let half = 0.5 * (hi - lo);
            let mut points = vec![lo];
            points.extend((1..=n_interior).rev().map(|k| {
                mid + half * (std::f64::consts::PI * (2.0 * k as f64 - 1.0) / (2.0 * n)).cos()
            }));
            points.push(hi);
            Grid::from_points(points)
        }
        Placement::Explicit(list) => {
            let mut points = list.clone();
            if let Some(bad) = points.iter().find(|&&p| !(p >= lo && p <= hi)) {
                return Err(GridError::PointOutsideInterval(*bad));
            }
            points.sort_by(|a, b| a.total_cmp(b));
            if let Some(w) = points.windows(2).find(|w| w[0] == w[1]) {
                return Err(GridError::DuplicatePoints(w[0]));
            }
            if points.first() != Some(&lo) {
                points.insert(0, lo);
            }
            if points.last() != Some(&hi) {
                points.push(hi);
            }
            Grid::from_points(points)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_bm() -> DiffusionModel {
        build_model(&RawModelSpec {
            family: ModelFamily::Bm {
                sigma: 1.0,
                drift: 0.0,
            },
            lower: 0.0,
            upper: 1.0,
        })
        .unwrap()
    }

    fn expr(s: &str) -> ScalarFn {
        ScalarFn::Expr(Expr::parse(s).unwrap())
    }

    #[test]
    fn built_in_families_expand() {
        let bm = unit_bm();
        assert_eq!(bm.drift(0.3), 0.0);
        assert_eq!(bm.volatility(0.7), 1.0);

        let ou = build_model(&RawModelSpec {
            family: ModelFamily::Ou {
                theta: 2.0,
                mean: 0.5,
                sigma: 0.3,
            },
            lower: 0.0,
            upper: 1.0,
        })
        .unwrap();
        for x in [0.0, 0.2, 0.9] {
            assert!((ou.drift(x) - 2.0 * (0.5 - x)).abs() < 1e-15);
            assert_eq!(ou.volatility(x), 0.3);
        }

        let gbm = build_model(&RawModelSpec {
            family: ModelFamily::Gbm {
                mu: 0.05,
                sigma: 0.2,
            },
            lower: 0.5,
            upper: 2.0,
        })
        .unwrap();
        assert!((gbm.drift(1.5) - 0.075).abs() < 1e-15);
        assert!((gbm.volatility(1.5) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn build_model_errors() {
        let err = build_model(&RawModelSpec {
            family: ModelFamily::Bm {
                sigma: 0.0,
                drift: 0.0,
            },
            lower: 0.0,
            upper: 1.0,
        });
        assert!(matches!(err, Err(ModelError::NonPositiveVolatility { .. })));

        let err = build_model(&RawModelSpec {
            family: ModelFamily::Bm {
                sigma: 1.0,
                drift: 0.0,
            },
            lower: 0.0,
            upper: f64::INFINITY,
        });
        assert!(matches!(err, Err(ModelError::UnboundedInterval { .. })));

        // GBM through zero has vanishing volatility
        let err = build_model(&RawModelSpec {
            family: ModelFamily::Gbm {
                mu: 0.0,
                sigma: 0.2,
            },
            lower: 0.0,
            upper: 1.0,
        });
        assert!(matches!(err, Err(ModelError::NonPositiveVolatility { .. })));

        let err = build_model(&RawModelSpec {
            family: ModelFamily::Custom {
                drift: expr("1/(x - 0.5)"),
                volatility: ScalarFn::Constant(1.0),
            },
            lower: 0.0,
            upper: 1.0,
        });
        assert!(matches!(err, Err(ModelError::NonFiniteCoefficient { .. })));
    }

    fn payoffs(g1: ScalarFn, f1: ScalarFn) -> PayoffSpec {
        PayoffSpec {
            g1: g1.clone(),
            f1: f1.clone(),
            g2: g1,
            f2: f1,
            r1: 0.1,
            r2: 0.1,
        }
    }

    #[test]
    fn assumptions_pass_for_war_of_attrition() {
        let p = payoffs(ScalarFn::Constant(1.0), expr("1 + x*(1-x)"));
        let report = validate_assumptions(&unit_bm(), &p, 100);
        assert!(report.passed(), "{report:?}");
        assert!(report.notes.is_empty());
    }

    #[test]
    fn order_violation_has_witness() {
        // f1 = x - 0.1 < g1 = x everywhere; nonnegativity and boundary also fail
        let p = payoffs(expr("x"), expr("x - 0.1"));
        let report = validate_assumptions(&unit_bm(), &p, 10);
        let a = report.check("A: g1 <= f1").unwrap();
        assert!(!a.passed);
        let w = a.worst.as_ref().unwrap();
        assert!((w.value - 0.1).abs() < 1e-12);
        assert!(!report.passed());
    }

    #[test]
    fn boundary_violation_has_witness() {
        // f1 - g1 = 0.5 at the lower endpoint only
        let p = payoffs(ScalarFn::Constant(1.0), expr("1 + 0.5*(1-x)"));
        let report = validate_assumptions(&unit_bm(), &p, 10);
        let c = report.check("C: f1 = g1 on boundary").unwrap();
        assert!(!c.passed);
        let w = c.worst.as_ref().unwrap();
        assert_eq!(w.x, 0.0);
        assert!((w.value - 0.5).abs() < 1e-15);
        assert!(report.check("A: g1 <= f1").unwrap().passed);
    }

    #[test]
    fn zero_discount_is_flagged_not_rejected() {
        let mut p = payoffs(ScalarFn::Constant(1.0), expr("1 + x*(1-x)"));
        p.r1 = 0.0;
        let report = validate_assumptions(&unit_bm(), &p, 10);
        assert!(report.passed());
        assert_eq!(report.notes.len(), 1);
    }

    #[test]
    fn problem_rejects_failed_assumptions() {
        let p = payoffs(expr("x^2 - 1"), ScalarFn::Constant(1.0));
        assert!(matches!(
            Problem::new(unit_bm(), p, 100),
            Err(ModelError::AssumptionsViolated(_))
        ));
    }

    #[test]
    fn uniform_grid_and_refinement() {
        let g = build_grid(&unit_bm(), 1, &Placement::Uniform).unwrap();
        assert_eq!(g.points(), &[0.0, 0.5, 1.0]);
        assert_eq!(g.interior_mask(), vec![false, true, false]);
        let r = g.refine();
        assert_eq!(r.points(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(r.contains_grid(&g));
        let sched = g.refinement_schedule(5);
        let sizes: Vec<usize> = sched.iter().map(Grid::n_interior).collect();
        assert_eq!(sizes, vec![1, 3, 7, 15, 31]);
        assert!(check_nested(&sched).is_ok());
        for w in sched.windows(2) {
            assert!((w[1].max_spacing() - 0.5 * w[0].max_spacing()).abs() < 1e-15);
        }
    }

    #[test]
    fn explicit_grid_errors() {
        let m = unit_bm();
        assert_eq!(
            build_grid(&m, 0, &Placement::Explicit(vec![0.0, 0.3, 0.3, 1.0])),
            Err(GridError::DuplicatePoints(0.3))
        );
        assert_eq!(
            build_grid(&m, 0, &Placement::Explicit(vec![0.0, 1.3])),
            Err(GridError::PointOutsideInterval(1.3))
        );
        let g = build_grid(&m, 0, &Placement::Explicit(vec![0.7, 0.2])).unwrap();
        assert_eq!(g.points(), &[0.0, 0.2, 0.7, 1.0]);
    }

    #[test]
    fn chebyshev_grid_is_symmetric() {
        let g = build_grid(&unit_bm(), 4, &Placement::Chebyshev).unwrap();
        assert_eq!(g.len(), 6);
        let p = g.points();
        for i in 0..p.len() {
            assert!((p[i] + p[p.len() - 1 - i] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn non_nested_schedule_is_rejected() {
        let a = Grid::from_points(vec![0.0, 0.5, 1.0]).unwrap();
        let b = Grid::from_points(vec![0.0, 0.3, 0.6, 1.0]).unwrap();
        assert_eq!(check_nested(&[a, b]), Err(GridError::NotNested(1)));
    }
}
