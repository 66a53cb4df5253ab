#![allow(dead_code)]

use attrition::expr::Expr;
use attrition::model::{
    build_grid, build_model, Grid, ModelFamily, PayoffSpec, Placement, Problem, RawModelSpec, ScalarFn,
};

pub fn expr(s: &str) -> ScalarFn {
    ScalarFn::Expr(Expr::parse(s).unwrap())
}

pub fn problem(family: ModelFamily, lower: f64, upper: f64, fns: [&str; 4], r1: f64, r2: f64) -> Problem {
    let model = build_model(&RawModelSpec { family, lower, upper }).unwrap();
    let payoffs = PayoffSpec {
        g1: expr(fns[0]),
        f1: expr(fns[1]),
        g2: expr(fns[2]),
        f2: expr(fns[3]),
        r1,
        r2,
    };
    Problem::new(model, payoffs, 1000).unwrap()
}

pub fn bm() -> ModelFamily {
    ModelFamily::Bm { sigma: 1.0, drift: 0.0 }
}

pub const SYM_G: &str = "1 + 0.1*cos(2*pi*(x - 0.5))";
pub const SYM_F: &str = "1 + 0.1*cos(2*pi*(x - 0.5)) + x*(1 - x)";

/// Symmetric war of attrition driven by standard Brownian motion on [0, 1].
pub fn symmetric_woa(r: f64) -> Problem {
    problem(bm(), 0.0, 1.0, [SYM_G, SYM_F, SYM_G, SYM_F], r, r)
}

/// Concave payoff used with `f = g`, where stopping at once is optimal.
pub const TRIV_G: &str = "1 + 0.5*x*(1 - x)";

/// Payoffs with a dip at the midpoint: mixing near the ends, waiting in the middle.
pub const DIP_G: &str = "1 + x*(1 - x) - 0.3*exp(-((x - 0.5)/0.1)^2)";
pub const DIP_F: &str = "1 + 2*x*(1 - x) - 0.3*exp(-((x - 0.5)/0.1)^2)";

/// The reference symmetric war of attrition used for refinement and simulation.
pub fn dip_woa() -> Problem {
    problem(bm(), 0.0, 1.0, [DIP_G, DIP_F, DIP_G, DIP_F], 1.0, 1.0)
}

pub fn uniform(problem: &Problem, n: usize) -> Grid {
    build_grid(problem.model(), n, &Placement::Uniform).unwrap()
}

/// Closed forms for standard Brownian motion.
pub mod bm_oracle {
    pub fn exit_up(r: f64, l: f64, x: f64, u: f64) -> f64 {
        if r == 0.0 {
            return (x - l) / (u - l);
        }
        let k = (2.0 * r).sqrt();
        (k * (x - l)).sinh() / (k * (u - l)).sinh()
    }

    pub fn exit_low(r: f64, l: f64, x: f64, u: f64) -> f64 {
        exit_up(r, -u, -x, -l)
    }

    pub fn green(r: f64, l: f64, c: f64, u: f64) -> f64 {
        if r == 0.0 {
            return 2.0 * (c - l) * (u - c) / (u - l);
        }
        let k = (2.0 * r).sqrt();
        2.0 * (k * (c - l)).sinh() * (k * (u - c)).sinh() / (k * (k * (u - l)).sinh())
    }
}

/// Bisection for the root of an increasing function on [lo, hi].
pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}
