//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use attrition::analytics::{solve_harmonic_pair, SojournKernel};
use attrition::game::Game;
use attrition::io::{parse_problem, ProblemDocument};
use attrition::model::{build_grid, build_model, Grid, ModelFamily, Placement, Player, Problem, RawModelSpec};
use attrition::montecarlo::{mc_payoff_grid, sample_stopped_law, tie_probability_grid, SimConfig, SimMode};
use attrition::solver::{refine_and_solve, solve_grid_equilibrium, stopped_distribution, LawView, SolverOptions};
use attrition::stopping::{iota_rate, StrategyProfile};
use common::*;

struct Outcome {
    failed: usize,
}

impl Outcome {
    fn line(&mut self, id: usize, what: &str, measured: f64, op: &str, threshold: f64, pass: bool) {
        if !pass {
            self.failed += 1;
        }
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} [{id}] {what}: measured {measured:.3e} {op} {threshold:.1e}");
    }
}

struct Certified {
    name: String,
    problem: Problem,
    game: Game,
    profile: StrategyProfile,
}

fn corpus() -> Vec<(PathBuf, ProblemDocument)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("problems");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    paths.sort();
    paths.into_iter().map(|p| (p.clone(), parse_problem(&p).unwrap())).collect()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Equilibria on grids of up to 41 points for every bundled problem.
fn criterion_1(out: &mut Outcome) -> Vec<Certified> {
    let mut certified = Vec::new();
    let mut worst_residual = 0.0f64;
    let mut worst_time = 0.0f64;
    let docs = corpus();
    for (path, doc) in &docs {
        let problem = doc.problem().unwrap();
        for &n in &doc.grid.sizes {
            assert!(n + 2 <= 41);
            let game = Game::new(&problem, doc.grid(&problem, n).unwrap()).unwrap();
            let t = Instant::now();
            let res = solve_grid_equilibrium(&game, &doc.solver);
            worst_time = worst_time.max(t.elapsed().as_secs_f64());
            match res {
                Ok(r) => {
                    let residual = game.complementarity_residual(&r.profile).unwrap().max();
                    worst_residual = worst_residual.max(residual);
                    if n == *doc.grid.sizes.iter().max().unwrap() || n == 9 {
                        certified.push(Certified {
                            name: format!("{}@{n}", path.file_stem().unwrap().to_string_lossy()),
                            problem: problem.clone(),
                            game,
                            profile: r.profile,
                        });
                    }
                }
                Err(e) => {
                    println!("  {} n={n}: {e}", path.display());
                    worst_residual = f64::INFINITY;
                }
            }
        }
    }
    out.line(
        1,
        &format!("complementarity residual over {} corpus instances", docs.len()),
        worst_residual,
        "<=",
        1e-8,
        docs.len() >= 5 && worst_residual <= 1e-8,
    );
    out.line(1, "slowest single solve (s)", worst_time, "<", 10.0, worst_time < 10.0);
    certified
}

/// Best gain over single-point overrides and first-exit intervals.
fn sweep_gain(game: &Game, profile: &StrategyProfile) -> f64 {
    let base = game.payoff_values(profile).unwrap();
    let m = game.n_interior();
    let mut gain = 0.0f64;
    for player in [Player::One, Player::Two] {
        let own = profile.units(player);
        let opp = profile.units(player.other());
        let w = base.get(player);
        let mut challengers = Vec::new();
        for j in 0..m {
            for v in [0.0, 1.0] {
                let mut c = own.to_vec();
                c[j] = v;
                challengers.push(c);
            }
        }
        for a in 0..=m + 1 {
            for b in a + 1..=m + 1 {
                challengers.push((1..=m).map(|i| if a < i && i < b { 0.0 } else { 1.0 }).collect::<Vec<f64>>());
            }
        }
        for c in challengers {
            let v = game.player_values(player, &c, opp).unwrap();
            for (x, y) in v.iter().zip(w) {
                gain = gain.max(x - y);
            }
        }
    }
    gain
}

fn criterion_2(out: &mut Outcome, certified: &[Certified]) {
    let gain = certified
        .iter()
        .map(|c| sweep_gain(&c.game, &c.profile))
        .fold(0.0, f64::max);
    out.line(2, "largest deviation gain over all certified profiles", gain, "<=", 1e-6, gain <= 1e-6);
}

fn is_standard_bm(problem: &Problem) -> bool {
    let m = problem.model();
    [0.1, 0.5, 0.9].iter().all(|&q| {
        let x = m.lower() + q * m.length();
        m.drift(x) == 0.0 && m.volatility(x) == 1.0
    })
}

/// |g − continuation| at mixing points; closed forms for standard BM.
fn criterion_3(out: &mut Outcome, certified: &[Certified]) {
    let mut worst = 0.0f64;
    let mut mixing = 0;
    for c in certified {
        let values = c.game.payoff_values(&c.profile).unwrap();
        let pts = c.game.grid().points();
        for player in [Player::One, Player::Two] {
            let r = c.problem.payoffs().discount(player);
            let g = c.problem.payoffs().stop_payoff(player);
            let f = c.problem.payoffs().follow_payoff(player);
            let w = values.get(player);
            for (j, &u) in c.profile.units(player).iter().enumerate() {
                if !(u > 0.0 && u < 1.0) {
                    continue;
                }
                mixing += 1;
                let v = c.profile.unit(player.other(), j);
                let (l, x, h) = (pts[j], pts[j + 1], pts[j + 2]);
                let cont = if is_standard_bm(&c.problem) {
                    let up = bm_oracle::exit_up(r, l, x, h);
                    let low = bm_oracle::exit_low(r, l, x, h);
                    let green = bm_oracle::green(r, l, x, h);
                    ((1.0 - v) * (up * w[j + 2] + low * w[j]) + green * v * f.eval(x)) / ((1.0 - v) + green * v)
                } else {
                    c.game.continuation(player, j, w, v)
                };
                worst = worst.max((g.eval(x) - cont).abs());
            }
        }
    }
    out.line(
        3,
        &format!("indifference gap at {mixing} mixing points"),
        worst,
        "<=",
        1e-8,
        mixing > 0 && worst <= 1e-8,
    );
}

fn model(family: ModelFamily, lower: f64, upper: f64) -> attrition::model::DiffusionModel {
    build_model(&RawModelSpec { family, lower, upper }).unwrap()
}

fn criterion_4(out: &mut Outcome) {
    let models = [
        model(ModelFamily::Bm { sigma: 1.0, drift: 0.0 }, 0.0, 1.0),
        model(ModelFamily::Bm { sigma: 0.6, drift: 0.3 }, 0.0, 1.0),
        model(
            ModelFamily::Ou {
                theta: 1.0,
                mean: 0.5,
                sigma: 0.5,
            },
            0.0,
            1.0,
        ),
        model(ModelFamily::Gbm { mu: 0.05, sigma: 0.4 }, 0.5, 2.0),
    ];
    let kappas = [0.0, 1.0, 10.0, 1e3, f64::INFINITY];
    let mut dual = 0.0f64;
    let mut psi = 0.0f64;
    for m in &models {
        let grid = build_grid(m, 7, &Placement::Uniform).unwrap();
        for r in [0.0, 0.1, 1.0, 5.0] {
            let kernel = SojournKernel::new(m, &grid, r).unwrap();
            psi = psi.max(kernel.ode_residual());
            for j in 0..kernel.len() {
                for &k in &kappas {
                    let a = kernel.primitives(j, k);
                    let b = kernel.primitives_ode(j, k);
                    for (x, y) in [(a.up, b.up), (a.down, b.down), (a.kill, b.kill), (a.green, b.green)] {
                        let scale = x.abs().max(y.abs());
                        // both below the dual-method floor count as agreement
                        if scale > 1e-14 {
                            dual = dual.max((x - y).abs() / scale);
                        }
                    }
                }
            }
            psi = psi.max(solve_harmonic_pair(m, r).unwrap().ode_residual());
        }
    }
    out.line(4, "dual-method relative disagreement over (model, r, kappa)", dual, "<=", 1e-8, dual <= 1e-8);
    out.line(4, "harmonic-pair ODE residual", psi, "<=", 1e-8, psi <= 1e-8);

    // Brownian closed forms with σ = 0.8 on [0, 1]
    let sigma = 0.8;
    let bm = model(ModelFamily::Bm { sigma, drift: 0.0 }, 0.0, 1.0);
    let mut closed = 0.0f64;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    for r in [0.1, 0.5, 2.0] {
        let pair = solve_harmonic_pair(&bm, r).unwrap();
        let k = (2.0 * r).sqrt() / sigma;
        for x in [0.0, 0.2, 0.45, 0.8, 1.0] {
            closed = closed.max(rel(pair.psi_plus(x) / pair.psi_plus(0.5), (k * (x - 0.5)).exp()));
            closed = closed.max(rel(pair.psi_minus(x) / pair.psi_minus(0.5), (-k * (x - 0.5)).exp()));
        }
        for (l, x, u) in [(0.0, 0.5, 1.0), (0.1, 0.3, 0.9), (0.25, 0.375, 0.5)] {
            let e = pair.exit(l, x, u).unwrap();
            closed = closed.max(rel(e.up, (k * (x - l)).sinh() / (k * (u - l)).sinh()));
            closed = closed.max(rel(e.low, (k * (u - x)).sinh() / (k * (u - l)).sinh()));
            let green = 2.0 * (k * (x - l)).sinh() * (k * (u - x)).sinh() / (k * (k * (u - l)).sinh());
            closed = closed.max(rel(pair.green(l, x, u).unwrap(), green));
        }
    }
    out.line(4, "Brownian closed forms (exponentials, sinh ratios, Green)", closed, "<=", 1e-6, closed <= 1e-6);
}

fn quartiles(game: &Game) -> Vec<usize> {
    let n = game.grid().len() - 1;
    vec![n / 4, n / 2, 3 * n / 4]
}

fn criterion_5(out: &mut Outcome, certified: &[Certified]) {
    let n = 100_000;
    let mut worst_payoff = 0.0f64;
    let mut worst_law = 0.0f64;
    let picked: Vec<&Certified> = ["symmetric_bm@9", "gbm@9", "ou@9"]
        .iter()
        .map(|name| certified.iter().find(|c| c.name == *name).expect("certified profile"))
        .collect();
    for (k, c) in picked.iter().enumerate() {
        let values = c.game.payoff_values(&c.profile).unwrap();
        for (s, &start) in quartiles(&c.game).iter().enumerate() {
            let cfg = SimConfig {
                n_paths: n,
                rng_seed: 1000 + 10 * k as u64 + s as u64,
                mode: SimMode::EmbeddedChain,
                ..SimConfig::default()
            };
            let est = mc_payoff_grid(&c.game, &c.profile, start, &cfg).unwrap();
            for player in [Player::One, Player::Two] {
                let e = est.get(player);
                let diff = (e.mean - values.get(player)[start]).abs();
                let z = if e.std_error > 0.0 {
                    diff / e.std_error
                } else if diff <= 1e-12 {
                    0.0
                } else {
                    f64::INFINITY
                };
                worst_payoff = worst_payoff.max(z);
            }
            let exact = stopped_distribution(&c.game, &c.profile, start, LawView::Game).unwrap();
            let law = sample_stopped_law(&c.game, &c.profile, start, &cfg).unwrap();
            for i in 0..law.points.len() {
                let q = exact.total(i);
                let f = law.counts[i] as f64 / n as f64;
                let se = (q * (1.0 - q) / n as f64).sqrt();
                let z = if se > 0.0 {
                    (f - q).abs() / se
                } else if (f - q).abs() <= 1e-12 {
                    0.0
                } else {
                    f64::INFINITY
                };
                worst_law = worst_law.max(z);
            }
        }
    }
    out.line(5, "payoff error in standard errors (3 profiles x 3 starts)", worst_payoff, "<=", 3.0, worst_payoff <= 3.0);
    out.line(5, "stopped-law error in standard errors", worst_law, "<=", 4.0, worst_law <= 4.0);
}

fn criterion_6(out: &mut Outcome, certified: &[Certified]) {
    let sym = certified.iter().find(|c| c.name == "symmetric_bm@9").unwrap();
    let grid = sym.game.grid().clone();
    let unit = |stop: bool, rate: f64| if stop { 1.0 } else { rate / (1.0 + rate) };
    let band = |x: f64, lo: f64, hi: f64, rate: f64| if lo - 1e-9 <= x && x <= hi + 1e-9 { rate } else { 0.0 };
    // frontiers 0.8 / 0.2 differ on both sides; clocks a cell away from every other stop point
    let a1: Vec<f64> = grid.interior().iter().map(|&x| unit(x >= 0.8, band(x, 0.3, 0.4, 2.0))).collect();
    let a2: Vec<f64> = grid.interior().iter().map(|&x| unit(x <= 0.2, band(x, 0.6, 0.7, 3.0))).collect();
    // no immediate stops at all; clocks left and right of the start
    let b1: Vec<f64> = grid.interior().iter().map(|&x| unit(false, band(x, 0.0, 0.4, 5.0))).collect();
    let b2: Vec<f64> = grid.interior().iter().map(|&x| unit(false, band(x, 0.6, 1.0, 0.5))).collect();
    let profiles = [
        StrategyProfile::from_units(grid.clone(), a1, a2).unwrap(),
        StrategyProfile::from_units(grid.clone(), b1, b2).unwrap(),
    ];
    let start = grid.len() / 2;
    let euler = |seed: u64| SimConfig {
        n_paths: 10_000,
        dt: 1e-4,
        rng_seed: seed,
        mode: SimMode::Euler,
        ..SimConfig::default()
    };
    let chain = |seed: u64| SimConfig {
        n_paths: 10_000,
        rng_seed: seed,
        mode: SimMode::EmbeddedChain,
        ..SimConfig::default()
    };
    let mut euler_worst = 0.0f64;
    let mut chain_worst = 0.0f64;
    for (k, profile) in profiles.iter().chain([&sym.profile]).enumerate() {
        let seed = 60 + 2 * k as u64;
        chain_worst = chain_worst.max(tie_probability_grid(&sym.game, profile, start, &chain(seed)).unwrap().mean);
        let e = tie_probability_grid(&sym.game, profile, start, &euler(seed + 1)).unwrap().mean;
        if k < profiles.len() {
            euler_worst = euler_worst.max(e);
        } else {
            // shared atoms put the one-step window at O(rate * sqrt(dt))
            println!("  info: Euler one-step coincidence for the certified shared-atom profile {e:.3e}");
        }
    }
    out.line(6, "Euler tie frequency (dt 1e-4, n 1e4)", euler_worst, "<=", 1e-3, euler_worst <= 1e-3);
    out.line(6, "embedded-chain tie frequency", chain_worst, "==", 0.0, chain_worst == 0.0);
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|d| format!("{d:.3e}")).collect::<Vec<_>>().join(" ")
}

fn w1(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let mut xs: Vec<f64> = a.iter().chain(b).map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let cdf = |law: &[(f64, f64)], x: f64| law.iter().filter(|p| p.0 <= x).map(|p| p.1).sum::<f64>();
    xs.windows(2).map(|w| (cdf(a, w[0]) - cdf(b, w[0])).abs() * (w[1] - w[0])).sum()
}

fn criterion_7(out: &mut Outcome) {
    let p = dip_woa();
    let schedule: Vec<Grid> = uniform(&p, 1).refinement_schedule(5);
    let sizes: Vec<usize> = schedule.iter().map(Grid::n_interior).collect();
    assert_eq!(sizes, vec![1, 3, 7, 15, 31]);
    let t = Instant::now();
    let report = refine_and_solve(&p, &schedule, &SolverOptions::default()).unwrap();
    let elapsed = t.elapsed().as_secs_f64();
    let mut values = Vec::new();
    let mut laws = Vec::new();
    for level in &report.levels {
        let r = level.result.as_ref().expect("every level converges");
        let game = Game::new(&p, level.grid.clone()).unwrap();
        let v = game.payoff_values(&r.profile).unwrap();
        let mid = level.grid.index_of(0.5).unwrap();
        let law = stopped_distribution(&game, &r.profile, mid, LawView::Game).unwrap().law();
        values.push((level.grid.clone(), v));
        laws.push(law.points.iter().copied().zip(law.mass.iter().copied()).collect::<Vec<_>>());
    }
    let mut vd = Vec::new();
    let mut ld = Vec::new();
    for k in 1..values.len() {
        let (cg, cv) = &values[k - 1];
        let (fg, fv) = &values[k];
        let mut d = 0.0f64;
        for (i, &x) in cg.points().iter().enumerate() {
            let j = fg.index_of(x).unwrap();
            d = d.max((cv.w1[i] - fv.w1[j]).abs()).max((cv.w2[i] - fv.w2[j]).abs());
        }
        vd.push(d);
        ld.push(w1(&laws[k - 1], &laws[k]));
    }
    println!("  value distances {}", fmt_list(&vd));
    println!("  law distances   {}", fmt_list(&ld));
    let worst_ratio = vd.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max);
    out.line(7, "largest ratio of consecutive value distances", worst_ratio, "<", 1.0, worst_ratio < 1.0);
    let last = *vd.last().unwrap();
    out.line(7, "final value distance", last, "<=", 1e-2, last <= 1e-2);
    let law_ratio = ld.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max);
    out.line(7, "largest ratio of consecutive law distances", law_ratio, "<=", 1.0, law_ratio <= 1.0);
    out.line(7, "refinement runtime (s)", elapsed, "<", 120.0, elapsed < 120.0);
}

/// Rate of the opponent that makes `player` indifferent at the midpoint.
fn bisection_rate(g: impl Fn(f64) -> f64, f: impl Fn(f64) -> f64, r: f64) -> f64 {
    let (up, low, h) = (
        bm_oracle::exit_up(r, 0.0, 0.5, 1.0),
        bm_oracle::exit_low(r, 0.0, 0.5, 1.0),
        bm_oracle::green(r, 0.0, 0.5, 1.0),
    );
    // continuation minus stop against opponent rate λ, increasing in λ
    let gap = |lambda: f64| (up * g(1.0) + low * g(0.0) + h * lambda * f(0.5)) / (1.0 + h * lambda) - g(0.5);
    assert!(gap(0.0) < 0.0, "no interior mixing at r = {r}");
    let mut hi = 1.0;
    while gap(hi) <= 0.0 {
        hi *= 2.0;
    }
    bisect(gap, 0.0, hi)
}

fn criterion_8(out: &mut Outcome) {
    let cosg = |x: f64| 1.0 + 0.1 * (2.0 * std::f64::consts::PI * (x - 0.5)).cos();
    let cosf = |x: f64| cosg(x) + x * (1.0 - x);
    let dipg = |x: f64| 1.0 + x * (1.0 - x) - 0.3 * (-((x - 0.5) / 0.1f64).powi(2)).exp();
    let dipf = |x: f64| dipg(x) + x * (1.0 - x);
    let mut worst = 0.0f64;
    for (r1, r2) in [(0.5, 0.5), (2.0, 2.0), (0.05, 0.3), (1.0, 0.3), (5.0, 0.25)] {
        let p = problem(bm(), 0.0, 1.0, [SYM_G, SYM_F, DIP_G, DIP_F], r1, r2);
        let game = Game::new(&p, uniform(&p, 1)).unwrap();
        let res = solve_grid_equilibrium(&game, &SolverOptions::default()).unwrap();
        // player 1's indifference pins player 2's rate and vice versa
        let lambda2 = bisection_rate(cosg, cosf, r1);
        let lambda1 = bisection_rate(dipg, dipf, r2);
        let got1 = iota_rate(res.profile.unit(Player::One, 0)).unwrap();
        let got2 = iota_rate(res.profile.unit(Player::Two, 0)).unwrap();
        worst = worst.max((got1 - lambda1).abs()).max((got2 - lambda2).abs());
    }
    out.line(8, "one-point rates against bisection", worst, "<=", 1e-8, worst <= 1e-8);

    let mut value_gap = 0.0f64;
    let mut mismatches = 0usize;
    let instances = [
        dip_woa(),
        symmetric_woa(0.5),
        problem(
            ModelFamily::Gbm { mu: 0.05, sigma: 0.4 },
            0.5,
            2.0,
            [
                "1 + (x - 0.5)*(2 - x)",
                "1 + 2*(x - 0.5)*(2 - x)",
                "1 + (x - 0.5)*(2 - x)",
                "1 + 2*(x - 0.5)*(2 - x)",
            ],
            0.5,
            0.2,
        ),
    ];
    let opponents = [[0.3, 0.6, 0.2], [0.5, 0.5, 0.5], [0.9, 0.1, 0.4], [0.0, 0.0, 0.0]];
    for p in &instances {
        let game = Game::new(p, uniform(p, 3)).unwrap();
        for player in [Player::One, Player::Two] {
            for opp in &opponents {
                let sets: Vec<[bool; 3]> = (0..8).map(|m| [m & 1 == 1, m & 2 == 2, m & 4 == 4]).collect();
                let vals: Vec<Vec<f64>> = sets
                    .iter()
                    .map(|s| {
                        let own: Vec<f64> = s.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                        game.player_values(player, &own, opp).unwrap()
                    })
                    .collect();
                let best: Vec<f64> = (0..5)
                    .map(|i| vals.iter().map(|v| v[i]).fold(f64::NEG_INFINITY, f64::max))
                    .collect();
                let br = game.best_response(player, opp).unwrap();
                value_gap = value_gap.max(max_abs(&br.value, &best));
                for (s, v) in sets.iter().zip(&vals) {
                    let attains = v.iter().zip(&best).all(|(a, b)| b - a <= 1e-10);
                    if attains != br.is_optimal_stop_set(s) {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    out.line(8, "three-point best-response value against enumeration", value_gap, "<=", 1e-10, value_gap <= 1e-10);
    out.line(
        8,
        "three-point argmax-set mismatches",
        mismatches as f64,
        "==",
        0.0,
        mismatches == 0,
    );
}

fn criterion_9(out: &mut Outcome) {
    let bin = env!("CARGO_BIN_EXE_attrition");
    let mut differing = 0usize;
    let mut runs = 0usize;
    for (path, _) in corpus() {
        for command in ["solve", "refine"] {
            let mut bytes = Vec::new();
            for _ in 0..2 {
                let dir = tempfile::tempdir().unwrap();
                let status = Command::new(bin)
                    .args([command, path.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--seed", "17"])
                    .output()
                    .unwrap()
                    .status;
                assert!(status.code().is_some());
                bytes.push(fs::read(dir.path().join("result.json")).unwrap());
            }
            runs += 1;
            if bytes[0] != bytes[1] {
                differing += 1;
            }
        }
    }
    out.line(
        9,
        &format!("result documents differing across {runs} repeated runs"),
        differing as f64,
        "==",
        0.0,
        differing == 0,
    );
}

fn main() {
    let mut out = Outcome { failed: 0 };
    let certified = criterion_1(&mut out);
    criterion_2(&mut out, &certified);
    criterion_3(&mut out, &certified);
    criterion_4(&mut out);
    criterion_5(&mut out, &certified);
    criterion_6(&mut out, &certified);
    criterion_7(&mut out);
    criterion_8(&mut out);
    criterion_9(&mut out);
    if out.failed > 0 {
        println!("{} acceptance check(s) failed", out.failed);
        std::process::exit(1);
    }
    println!("all acceptance checks passed");
}
