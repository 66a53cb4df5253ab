//! Analytic kernel of the discretized game.
//!
//! Everything downstream is expressed through an r-harmonic pair `ψ₊, ψ₋`
//! of `½σ²ψ'' + μψ' = rψ`. The pair is stored in logarithmic form, as
//! `ln ψ` together with `q = ψ'/ψ`, and `q` obeys the Riccati equation
//! `q' = 2(r − μq)/σ² − q²`. Integrating `q₊` forward from the lower end
//! and `q₋` backward from the upper end is stable in both directions, and
//! the logarithms never overflow.
//!
//! Local time is the semimartingale one: killing at rate `κ` per unit local
//! time at `c` produces the derivative jump `v'(c+) − v'(c−) = 2κ v(c)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DiffusionModel, Grid};

/// Default number of mesh intervals for stand-alone queries.
pub const DEFAULT_MESH: usize = 2000;
/// Minimum total mesh size used when the mesh is built around a grid.
const MIN_MESH_NODES: usize = 400;
/// Minimum number of sub-intervals per grid cell.
const MIN_CELL_SPLIT: usize = 10;
/// Local error target of the adaptive Riccati integrator.
const RICCATI_TOL: f64 = 1e-13;
/// Relative agreement required between the two sojourn methods.
pub const DUAL_METHOD_TOL: f64 = 1e-8;
/// Absolute floor below which the two sojourn methods are not compared.
pub const DUAL_METHOD_FLOOR: f64 = 1e-14;
/// Kill rates at which every bracket of a kernel is cross-checked.
pub const KAPPA_LADDER: [f64; 6] = [0.0, 0.1, 1.0, 10.0, 1e3, 1e6];
/// Logarithm below which exit quantities are clamped to zero.
const LN_UNDERFLOW: f64 = -700.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalyticsError {
    #[error("quadrature of the scale density failed near x = {x}")]
    QuadratureFailure { x: f64 },
    #[error("harmonic integration blew up on [{from}, {to}]")]
    IntegrationBlowup { from: f64, to: f64 },
    #[error("degenerate bracket l = {l}, c = {c}, u = {u}")]
    DegenerateBracket { l: f64, c: f64, u: f64 },
    #[error("sojourn methods disagree on {what}: elastic {elastic:e}, ode {ode:e}")]
    MethodDisagreement {
        what: &'static str,
        elastic: f64,
        ode: f64,
    },
    #[error("discount rate {0} is negative")]
    NegativeDiscount(f64),
    #[error("kill rate {0} is negative")]
    NegativeKillRate(f64),
}

/// Gauss-Legendre nodes and weights on [-1, 1].
const GL5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_47),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_47),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_08),
    (0.906_179_845_938_664, 0.236_926_885_056_189_08),
];

fn gauss_legendre(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    half * GL5.iter().map(|&(t, w)| w * f(mid + half * t)).sum::<f64>()
}

/// Builds a mesh containing every anchor, the endpoints and the midpoint.
fn build_mesh(lower: f64, upper: f64, anchors: &[f64], total: usize) -> Vec<f64> {
    let mut knots: Vec<f64> = anchors
        .iter()
        .copied()
        .filter(|x| *x >= lower && *x <= upper)
        .chain([lower, upper, 0.5 * (lower + upper)])
        .collect();
    knots.sort_by(f64::total_cmp);
    knots.dedup();
    let length = upper - lower;
    let mut mesh = Vec::with_capacity(total + knots.len() * MIN_CELL_SPLIT);
    for w in knots.windows(2) {
        let (a, b) = (w[0], w[1]);
        let k = ((total as f64 * (b - a) / length).ceil() as usize).max(MIN_CELL_SPLIT);
        for i in 0..k {
            mesh.push(a + (b - a) * i as f64 / k as f64);
        }
    }
    mesh.push(upper);
    mesh
}

fn cubic_hermite(x0: f64, x1: f64, y0: f64, y1: f64, d0: f64, d1: f64, x: f64) -> f64 {
    let h = x1 - x0;
    let t = (x - x0) / h;
    let t2 = t * t;
    let t3 = t2 * t;
    (2.0 * t3 - 3.0 * t2 + 1.0) * y0
        + (t3 - 2.0 * t2 + t) * h * d0
        + (-2.0 * t3 + 3.0 * t2) * y1
        + (t3 - t2) * h * d1
}

/// Locates `x` in a sorted mesh: `Ok(i)` for a node, `Err(i)` for the cell `[i, i+1]`.
fn locate(mesh: &[f64], x: f64) -> Result<usize, usize> {
    match mesh.binary_search_by(|p| p.total_cmp(&x)) {
        Ok(i) => Ok(i),
        Err(0) => Err(0),
        Err(i) if i >= mesh.len() => Err(mesh.len() - 2),
        Err(i) => Err(i - 1),
    }
}

/// Weights of the first derivative at `x0` from values at `xs` (Fornberg).
fn fd_weights(x0: f64, xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut c = vec![[0.0f64; 2]; n];
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(1);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.iter().map(|w| w[1]).collect()
}

/// Tabulated scale density `s'(x) = exp(−∫_{x₀}^x 2μ/σ²)`, `x₀` the midpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleDensity {
    mesh: Vec<f64>,
    log_density: Vec<f64>,
    slope: Vec<f64>,
}

impl ScaleDensity {
    fn on_mesh(model: &DiffusionModel, mesh: &[f64]) -> Result<ScaleDensity, AnalyticsError> {
        let integrand = |y: f64| {
            let s = model.volatility(y);
            -2.0 * model.drift(y) / (s * s)
        };
        let mut log_density = Vec::with_capacity(mesh.len());
        let mut acc = 0.0;
        log_density.push(0.0);
        for w in mesh.windows(2) {
            acc += gauss_legendre(integrand, w[0], w[1]);
            if !acc.is_finite() {
                return Err(AnalyticsError::QuadratureFailure { x: w[1] });
            }
            log_density.push(acc);
        }
        let slope: Vec<f64> = mesh.iter().map(|&x| integrand(x)).collect();
        let mut out = ScaleDensity {
            mesh: mesh.to_vec(),
            log_density,
            slope,
        };
        let shift = out.ln_eval(model.midpoint());
        out.log_density.iter_mut().for_each(|v| *v -= shift);
        Ok(out)
    }

    pub fn mesh(&self) -> &[f64] {
        &self.mesh
    }

    pub fn ln_eval(&self, x: f64) -> f64 {
        match locate(&self.mesh, x) {
            Ok(i) => self.log_density[i],
            Err(i) => cubic_hermite(
                self.mesh[i],
                self.mesh[i + 1],
                self.log_density[i],
                self.log_density[i + 1],
                self.slope[i],
                self.slope[i + 1],
                x,
            ),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.ln_eval(x).exp()
    }
}

pub fn scale_density(model: &DiffusionModel) -> Result<ScaleDensity, AnalyticsError> {
    let mesh = build_mesh(model.lower(), model.upper(), &[], DEFAULT_MESH);
    ScaleDensity::on_mesh(model, &mesh)
}

/// Right-hand side of the Riccati equation for `q = ψ'/ψ`.
fn riccati(model: &DiffusionModel, r: f64, x: f64, q: f64) -> f64 {
    let s = model.volatility(x);
    2.0 * (r - model.drift(x) * q) / (s * s) - q * q
}

fn rk4_riccati(model: &DiffusionModel, r: f64, x: f64, l: f64, q: f64, h: f64) -> (f64, f64) {
    let k1 = riccati(model, r, x, q);
    let k2 = riccati(model, r, x + 0.5 * h, q + 0.5 * h * k1);
    let k3 = riccati(model, r, x + 0.5 * h, q + 0.5 * h * k2);
    let k4 = riccati(model, r, x + h, q + h * k3);
    let q_new = q + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    // ℓ' = q, integrated with the same stages
    let l_new = l + h / 6.0 * (q + 2.0 * (q + 0.5 * h * k1) + 2.0 * (q + 0.5 * h * k2) + (q + h * k3));
    (l_new, q_new)
}

/// Integrates `(ln ψ, q)` across the mesh in the direction given by `order`.
fn integrate_branch(
    model: &DiffusionModel,
    r: f64,
    mesh: &[f64],
    q_start: f64,
    forward: bool,
) -> Result<(Vec<f64>, Vec<f64>), AnalyticsError> {
    let n = mesh.len();
    let mut ln = vec![0.0; n];
    let mut q = vec![0.0; n];
    let order: Vec<usize> = if forward {
        (0..n).collect()
    } else {
        (0..n).rev().collect()
    };
    q[order[0]] = q_start;
    let mut h_try = f64::INFINITY;
    for w in order.windows(2) {
        let (from, to) = (mesh[w[0]], mesh[w[1]]);
        let (mut x, mut l, mut qq) = (from, ln[w[0]], q[w[0]]);
        let span = to - from;
        let mut h = span.signum() * h_try.min(span.abs());
        let mut steps = 0usize;
        while (to - x) * span.signum() > 0.0 {
            let last = (x + h - to) * span.signum() >= 0.0;
            let step = if last { to - x } else { h };
            let (l1, q1) = rk4_riccati(model, r, x, l, qq, step);
            let (lh, qh) = rk4_riccati(model, r, x, l, qq, 0.5 * step);
            let (l2, q2) = rk4_riccati(model, r, x + 0.5 * step, lh, qh, 0.5 * step);
            let err = ((l2 - l1).abs() / (1.0 + l2.abs())).max((q2 - q1).abs() / (1.0 + q2.abs()));
            steps += 1;
            if !err.is_finite() || steps > 1_000_000 {
                return Err(AnalyticsError::IntegrationBlowup { from, to });
            }
            if err <= RICCATI_TOL || step.abs() < 1e-14 * (1.0 + x.abs()) {
                l = l2 + (l2 - l1) / 15.0;
                qq = q2 + (q2 - q1) / 15.0;
                x = if last { to } else { x + step };
                if err < RICCATI_TOL / 64.0 && !last {
                    h *= 2.0;
                }
            } else {
                h = 0.5 * step;
            }
        }
        h_try = h.abs();
        if !l.is_finite() || !qq.is_finite() {
            return Err(AnalyticsError::IntegrationBlowup { from, to });
        }
        ln[w[1]] = l;
        q[w[1]] = qq;
    }
    Ok((ln, q))
}

/// Two-sided discounted exit values `(E[e^{−rη}; exit low], E[e^{−rη}; exit up])`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitPair {
    pub low: f64,
    pub up: f64,
}

/// Increasing and decreasing positive r-harmonic functions, tabulated.
#[derive(Debug, Clone)]
pub struct HarmonicPair {
    r: f64,
    model: DiffusionModel,
    mesh: Vec<f64>,
    ln_plus: Vec<f64>,
    q_plus: Vec<f64>,
    ln_minus: Vec<f64>,
    q_minus: Vec<f64>,
    scale: ScaleDensity,
}

/// Solves the pair on a default mesh over the whole interval.
pub fn solve_harmonic_pair(model: &DiffusionModel, r: f64) -> Result<HarmonicPair, AnalyticsError> {
    HarmonicPair::with_anchors(model, r, &[], DEFAULT_MESH)
}

impl HarmonicPair {
    /// Solves the pair on a mesh containing every anchor point as a node.
    pub fn with_anchors(
        model: &DiffusionModel,
        r: f64,
        anchors: &[f64],
        total: usize,
    ) -> Result<HarmonicPair, AnalyticsError> {
        if r.is_nan() || r < 0.0 {
            return Err(AnalyticsError::NegativeDiscount(r));
        }
        let (lo, hi) = (model.lower(), model.upper());
        let mesh = build_mesh(lo, hi, anchors, total.max(MIN_MESH_NODES));
        let length = hi - lo;
        let (q_plus0, q_minus0) = if r > 0.0 {
            let root = |x: f64, sign: f64| {
                let s2 = model.volatility(x).powi(2);
                let m = model.drift(x);
                (-m + sign * (m * m + 2.0 * s2 * r).sqrt()) / s2
            };
            (root(lo, 1.0), root(hi, -1.0))
        } else {
            (1.0 / length, 0.0)
        };
        let (mut ln_plus, q_plus) = integrate_branch(model, r, &mesh, q_plus0, true)?;
        let (mut ln_minus, q_minus) = integrate_branch(model, r, &mesh, q_minus0, false)?;
        let mid = locate(&mesh, model.midpoint()).expect("midpoint is a mesh node");
        let (sp, sm) = (ln_plus[mid], ln_minus[mid]);
        ln_plus.iter_mut().for_each(|v| *v -= sp);
        ln_minus.iter_mut().for_each(|v| *v -= sm);
        let scale = ScaleDensity::on_mesh(model, &mesh)?;
        Ok(HarmonicPair {
            r,
            model: model.clone(),
            mesh,
            ln_plus,
            q_plus,
            ln_minus,
            q_minus,
            scale,
        })
    }

    /// Solves the pair with a mesh built around the points of `grid`.
    pub fn for_grid(model: &DiffusionModel, r: f64, grid: &Grid) -> Result<HarmonicPair, AnalyticsError> {
        let total = (10 * grid.len()).max(DEFAULT_MESH);
        HarmonicPair::with_anchors(model, r, grid.points(), total)
    }

    pub fn discount(&self) -> f64 {
        self.r
    }

    pub fn mesh(&self) -> &[f64] {
        &self.mesh
    }

    pub fn scale(&self) -> &ScaleDensity {
        &self.scale
    }

    fn interp(&self, ln: &[f64], q: &[f64], x: f64) -> (f64, f64) {
        match locate(&self.mesh, x) {
            Ok(i) => (ln[i], q[i]),
            Err(i) => {
                let (x0, x1) = (self.mesh[i], self.mesh[i + 1]);
                let d0 = riccati(&self.model, self.r, x0, q[i]);
                let d1 = riccati(&self.model, self.r, x1, q[i + 1]);
                (
                    cubic_hermite(x0, x1, ln[i], ln[i + 1], q[i], q[i + 1], x),
                    cubic_hermite(x0, x1, q[i], q[i + 1], d0, d1, x),
                )
            }
        }
    }

    pub fn ln_psi_plus(&self, x: f64) -> f64 {
        self.interp(&self.ln_plus, &self.q_plus, x).0
    }

    pub fn ln_psi_minus(&self, x: f64) -> f64 {
        self.interp(&self.ln_minus, &self.q_minus, x).0
    }

    pub fn psi_plus(&self, x: f64) -> f64 {
        self.ln_psi_plus(x).exp()
    }

    pub fn psi_minus(&self, x: f64) -> f64 {
        self.ln_psi_minus(x).exp()
    }

    /// Logarithmic derivative `ψ₊'/ψ₊`.
    pub fn q_plus(&self, x: f64) -> f64 {
        self.interp(&self.ln_plus, &self.q_plus, x).1
    }

    /// Logarithmic derivative `ψ₋'/ψ₋`.
    pub fn q_minus(&self, x: f64) -> f64 {
        self.interp(&self.ln_minus, &self.q_minus, x).1
    }

    /// `ln(ψ₋/ψ₊)`, strictly decreasing.
    fn ln_rho(&self, x: f64) -> f64 {
        self.ln_psi_minus(x) - self.ln_psi_plus(x)
    }

    /// Largest relative residual of `½σ²ψ'' + μψ' − rψ` over the mesh,
    /// with `ψ''` obtained by a 7-point finite difference of `q`.
    pub fn ode_residual(&self) -> f64 {
        let n = self.mesh.len();
        let mut worst = 0.0f64;
        for q in [&self.q_plus, &self.q_minus] {
            for k in 0..n {
                let start = k.saturating_sub(3).min(n.saturating_sub(7));
                let idx = start..(start + 7).min(n);
                let w = fd_weights(self.mesh[k], &self.mesh[idx.clone()]);
                let dq: f64 = w.iter().zip(&q[idx]).map(|(w, v)| w * v).sum();
                let x = self.mesh[k];
                let s2 = self.model.volatility(x).powi(2);
                let mu = self.model.drift(x);
                // ψ''/ψ = q' + q²
                let res = 0.5 * s2 * (dq + q[k] * q[k]) + mu * q[k] - self.r;
                let scale = self.r + (mu * q[k]).abs() + 0.5 * s2 * (dq.abs() + q[k] * q[k]);
                if scale > 0.0 {
                    worst = worst.max(res.abs() / scale);
                }
            }
        }
        worst
    }

    /// Relative spread `(max − min)/mean` of the Wronskian divided by `s'`.
    pub fn wronskian_spread(&self) -> f64 {
        let logs: Vec<f64> = (0..self.mesh.len())
            .map(|k| {
                self.ln_plus[k] + self.ln_minus[k] + (self.q_plus[k] - self.q_minus[k]).ln()
                    - self.scale.log_density[k]
            })
            .collect();
        let reference = logs[logs.len() / 2];
        let vals: Vec<f64> = logs.iter().map(|v| (v - reference).exp()).collect();
        let max = vals.iter().copied().fold(f64::MIN, f64::max);
        let min = vals.iter().copied().fold(f64::MAX, f64::min);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        (max - min) / mean
    }

    fn check_bracket(&self, l: f64, c: f64, u: f64) -> Result<(), AnalyticsError> {
        let inside = self.model.lower() <= l && u <= self.model.upper();
        if !(l < c && c < u) || !inside {
            return Err(AnalyticsError::DegenerateBracket { l, c, u });
        }
        Ok(())
    }

    /// Discounted probabilities of leaving `(l, u)` through each end, from `x`.
    pub fn exit(&self, l: f64, x: f64, u: f64) -> Result<ExitPair, AnalyticsError> {
        self.check_bracket(l, x, u)?;
        let (rl, rx, ru) = (self.ln_rho(l), self.ln_rho(x), self.ln_rho(u));
        let denom = -(ru - rl).exp_m1();
        let ln_up = self.ln_psi_plus(x) - self.ln_psi_plus(u);
        let ln_low = self.ln_psi_minus(x) - self.ln_psi_minus(l);
        let up = ln_up.exp() * (-(rx - rl).exp_m1()) / denom;
        let low = ln_low.exp() * (-(ru - rx).exp_m1()) / denom;
        Ok(ExitPair {
            low: clamp_unit(low),
            up: clamp_unit(up),
        })
    }

    /// Discounted expected local time at `c` before leaving `(l, u)`.
    pub fn green(&self, l: f64, c: f64, u: f64) -> Result<f64, AnalyticsError> {
        self.check_bracket(l, c, u)?;
        let (rl, rc, ru) = (self.ln_rho(l), self.ln_rho(c), self.ln_rho(u));
        let num = (-(rc - rl).exp_m1()) * (-(ru - rc).exp_m1());
        let den = (-(ru - rl).exp_m1()) * (self.q_plus(c) - self.q_minus(c));
        Ok(2.0 * num / den)
    }
}

fn clamp_unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Discounted exit and kill probabilities around one point, plus the Green value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SojournPrimitives {
    /// Reach the upper neighbour first.
    pub up: f64,
    /// Reach the lower neighbour first.
    pub down: f64,
    /// The local-time clock rings first.
    pub kill: f64,
    /// Discounted local time at the centre before leaving the bracket (no killing).
    pub green: f64,
}

/// Elastic-killing identity applied to exit values and the Green value.
fn elastic(exit: ExitPair, green: f64, kappa: f64) -> SojournPrimitives {
    if kappa.is_infinite() {
        return SojournPrimitives {
            up: 0.0,
            down: 0.0,
            kill: 1.0,
            green,
        };
    }
    let kg = kappa * green;
    SojournPrimitives {
        up: exit.up / (1.0 + kg),
        down: exit.low / (1.0 + kg),
        kill: kg / (1.0 + kg),
        green,
    }
}

/// Linear ODE `y'' = 2(ry − μy')/σ²` integrated by fixed-step RK4 with
/// renormalization. Returns `(y, y', ln scale)` with the true state equal to
/// `(y, y')·exp(ln scale)`.
fn integrate_linear(
    model: &DiffusionModel,
    r: f64,
    from: f64,
    to: f64,
    y0: f64,
    dy0: f64,
    steps: usize,
) -> (f64, f64, f64) {
    let rhs = |x: f64, y: f64, dy: f64| {
        let s = model.volatility(x);
        2.0 * (r * y - model.drift(x) * dy) / (s * s)
    };
    let h = (to - from) / steps as f64;
    let (mut y, mut dy, mut ln_scale) = (y0, dy0, 0.0);
    for i in 0..steps {
        let x = from + h * i as f64;
        let k1y = dy;
        let k1d = rhs(x, y, dy);
        let k2y = dy + 0.5 * h * k1d;
        let k2d = rhs(x + 0.5 * h, y + 0.5 * h * k1y, dy + 0.5 * h * k1d);
        let k3y = dy + 0.5 * h * k2d;
        let k3d = rhs(x + 0.5 * h, y + 0.5 * h * k2y, dy + 0.5 * h * k2d);
        let k4y = dy + h * k3d;
        let k4d = rhs(x + h, y + h * k3y, dy + h * k3d);
        y += h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
        dy += h / 6.0 * (k1d + 2.0 * k2d + 2.0 * k3d + k4d);
        let m = y.abs().max(dy.abs());
        if m > 1e100 {
            y /= m;
            dy /= m;
            ln_scale += m.ln();
        }
    }
    (y, dy, ln_scale)
}

/// Integrates with step doubling until two successive results agree.
fn integrate_linear_converged(
    model: &DiffusionModel,
    r: f64,
    from: f64,
    to: f64,
    y0: f64,
    dy0: f64,
) -> (f64, f64, f64) {
    let mut steps = 64;
    let mut prev = integrate_linear(model, r, from, to, y0, dy0, steps);
    loop {
        steps *= 2;
        let next = integrate_linear(model, r, from, to, y0, dy0, steps);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-13 * a.abs().max(b.abs());
        let ratio_prev = prev.1 / prev.0;
        let ratio_next = next.1 / next.0;
        let level_prev = prev.0.abs().ln() + prev.2;
        let level_next = next.0.abs().ln() + next.2;
        if (close(ratio_prev, ratio_next) && (level_prev - level_next).abs() <= 1e-13)
            || steps >= 1 << 18
        {
            return next;
        }
        prev = next;
    }
}

/// κ-independent coefficients of the direct solve with the atom at `c`.
///
/// With `Q = φ_l'/φ_l − φ_u'/φ_u` at `c` (φ_l vanishing at `l`, φ_u at `u`),
/// the derivative jump `2κ v(c)` gives
/// `up = F_up/(Q + 2κ)`, `down = F_down/(Q + 2κ)`, `kill = 2κ/(Q + 2κ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomOde {
    pub log_derivative_gap: f64,
    pub up_flux: f64,
    pub down_flux: f64,
}

impl AtomOde {
    pub fn solve(model: &DiffusionModel, r: f64, l: f64, c: f64, u: f64) -> AtomOde {
        let (yl, dyl, _) = integrate_linear_converged(model, r, l, c, 0.0, 1.0);
        let (yu, dyu, _) = integrate_linear_converged(model, r, u, c, 0.0, -1.0);
        let (yt, _, st) = integrate_linear_converged(model, r, c, u, 0.0, 1.0);
        let (yh, _, sh) = integrate_linear_converged(model, r, c, l, 0.0, -1.0);
        let flux = |y: f64, s: f64| {
            let ln = -(y.abs().ln() + s);
            if ln < LN_UNDERFLOW {
                0.0
            } else {
                ln.exp()
            }
        };
        AtomOde {
            log_derivative_gap: dyl / yl - dyu / yu,
            up_flux: flux(yt, st),
            down_flux: flux(yh, sh),
        }
    }

    pub fn primitives(&self, kappa: f64) -> SojournPrimitives {
        let green = 2.0 / self.log_derivative_gap;
        if kappa.is_infinite() {
            return SojournPrimitives {
                up: 0.0,
                down: 0.0,
                kill: 1.0,
                green,
            };
        }
        let den = self.log_derivative_gap + 2.0 * kappa;
        SojournPrimitives {
            up: self.up_flux / den,
            down: self.down_flux / den,
            kill: 2.0 * kappa / den,
            green,
        }
    }
}

fn agree(a: f64, b: f64) -> bool {
    (a - b).abs() <= DUAL_METHOD_TOL * a.abs().max(b.abs()) + DUAL_METHOD_FLOOR
}

/// Compares both methods and returns the elastic-identity values.
fn dual_check(
    exit: ExitPair,
    green: f64,
    ode: &AtomOde,
    kappa: f64,
) -> Result<SojournPrimitives, AnalyticsError> {
    let e = elastic(exit, green, kappa);
    let o = ode.primitives(kappa);
    for (what, a, b) in [
        ("up", e.up, o.up),
        ("down", e.down, o.down),
        ("kill", e.kill, o.kill),
        ("green", e.green, o.green),
    ] {
        if !agree(a, b) {
            return Err(AnalyticsError::MethodDisagreement {
                what,
                elastic: a,
                ode: b,
            });
        }
    }
    Ok(e)
}

/// Sojourn primitives for one bracket, computed by both methods.
pub fn sojourn_primitives(
    model: &DiffusionModel,
    r: f64,
    l: f64,
    c: f64,
    u: f64,
    kappa: f64,
) -> Result<SojournPrimitives, AnalyticsError> {
    if kappa.is_nan() || kappa < 0.0 {
        return Err(AnalyticsError::NegativeKillRate(kappa));
    }
    let pair = HarmonicPair::with_anchors(model, r, &[l, c, u], DEFAULT_MESH)?;
    let exit = pair.exit(l, c, u)?;
    let green = pair.green(l, c, u)?;
    let ode = AtomOde::solve(model, r, l, c, u);
    dual_check(exit, green, &ode, kappa)
}

pub fn discounted_two_sided_exit(
    model: &DiffusionModel,
    r: f64,
    l: f64,
    x: f64,
    u: f64,
) -> Result<ExitPair, AnalyticsError> {
    let pair = HarmonicPair::with_anchors(model, r, &[l, x, u], DEFAULT_MESH)?;
    pair.exit(l, x, u)
}

pub fn green_local_time(
    model: &DiffusionModel,
    r: f64,
    l: f64,
    c: f64,
    u: f64,
) -> Result<f64, AnalyticsError> {
    let pair = HarmonicPair::with_anchors(model, r, &[l, c, u], DEFAULT_MESH)?;
    pair.green(l, c, u)
}

/// κ-independent data of one grid bracket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub exit: ExitPair,
    pub green: f64,
    pub ode: AtomOde,
}

/// Sojourn primitives for every interior point of a grid at one discount rate.
#[derive(Debug, Clone)]
pub struct SojournKernel {
    r: f64,
    brackets: Vec<Bracket>,
    residual: f64,
    wronskian_spread: f64,
    clamped: usize,
}

impl SojournKernel {
    /// Builds and cross-checks the kernel on every bracket over [`KAPPA_LADDER`].
    pub fn new(model: &DiffusionModel, grid: &Grid, r: f64) -> Result<SojournKernel, AnalyticsError> {
        let pair = HarmonicPair::for_grid(model, r, grid)?;
        let p = grid.points();
        let mut clamped = 0;
        let mut brackets = Vec::with_capacity(grid.n_interior());
        for j in 1..p.len() - 1 {
            let exit = pair.exit(p[j - 1], p[j], p[j + 1])?;
            if exit.up == 0.0 || exit.low == 0.0 {
                clamped += 1;
            }
            let green = pair.green(p[j - 1], p[j], p[j + 1])?;
            let ode = AtomOde::solve(model, r, p[j - 1], p[j], p[j + 1]);
            for kappa in KAPPA_LADDER.into_iter().chain([f64::INFINITY]) {
                dual_check(exit, green, &ode, kappa)?;
            }
            brackets.push(Bracket { exit, green, ode });
        }
        Ok(SojournKernel {
            r,
            brackets,
            residual: pair.ode_residual(),
            wronskian_spread: pair.wronskian_spread(),
            clamped,
        })
    }

    pub fn discount(&self) -> f64 {
        self.r
    }

    pub fn len(&self) -> usize {
        self.brackets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.brackets.is_empty()
    }

    /// Bracket of interior index `j` (grid index `j + 1`).
    pub fn bracket(&self, j: usize) -> &Bracket {
        &self.brackets[j]
    }

    pub fn primitives(&self, j: usize, kappa: f64) -> SojournPrimitives {
        let b = &self.brackets[j];
        elastic(b.exit, b.green, kappa)
    }

    /// Primitives from the direct ODE solve, for cross-checks.
    pub fn primitives_ode(&self, j: usize, kappa: f64) -> SojournPrimitives {
        self.brackets[j].ode.primitives(kappa)
    }

    /// Both methods at an arbitrary kill rate; errors when they disagree.
    pub fn primitives_checked(&self, j: usize, kappa: f64) -> Result<SojournPrimitives, AnalyticsError> {
        let b = &self.brackets[j];
        dual_check(b.exit, b.green, &b.ode, kappa)
    }

    pub fn ode_residual(&self) -> f64 {
        self.residual
    }

    pub fn wronskian_spread(&self) -> f64 {
        self.wronskian_spread
    }

    /// Number of brackets where an exit value underflowed to zero.
    pub fn clamped(&self) -> usize {
        self.clamped
    }
}
