//! Problem documents (TOML), result documents (JSON) and plot tables.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::expr::{Expr, ExprError};
use crate::model::{
    build_grid, build_model, Grid, GridError, ModelError, ModelFamily, PayoffSpec, Placement, Problem,
    RawModelSpec, ScalarFn, Table,
};
use crate::montecarlo::SimConfig;
use crate::solver::{DiscreteLaw, EquilibriumResult, RefinementReport, SolverOptions};
use crate::stopping::iota_rate;
use crate::verify::VerificationReport;

/// Version tag of the result document layout.
pub const SCHEMA_VERSION: u32 = 1;
/// Mesh used to check the structural assumptions of a loaded problem.
pub const ASSUMPTION_MESH: usize = 1000;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("schema error at `{path}` (line {line}): {message}")]
    Schema { path: String, line: usize, message: String },
    #[error("expression error in `{field}` near `{token}`: {message}")]
    Expression { field: String, token: String, message: String },
    #[error("assumption error: {0}")]
    Assumption(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed result document: {0}")]
    Result(String),
}

// ---------------------------------------------------------------------------
// Problem documents

/// A function of the state given as a constant, an expression or a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FnSpec {
    Constant(f64),
    Expr(String),
    Table { x: Vec<f64>, y: Vec<f64> },
}

impl FnSpec {
    fn build(&self, field: &str) -> Result<ScalarFn, IoError> {
        match self {
            FnSpec::Constant(c) => Ok(ScalarFn::Constant(*c)),
            FnSpec::Expr(src) => Expr::parse(src).map(ScalarFn::Expr).map_err(|e| {
                let token = match &e {
                    ExprError::UnexpectedToken { token, .. } => token.clone(),
                    ExprError::UnexpectedEnd => "<end>".into(),
                    ExprError::UnknownIdentifier(name) => name.clone(),
                    ExprError::Arity { name, .. } => name.clone(),
                };
                IoError::Expression {
                    field: field.into(),
                    token,
                    message: e.to_string(),
                }
            }),
            FnSpec::Table { x, y } => Table::new(x.clone(), y.clone())
                .map(ScalarFn::Table)
                .map_err(|e| IoError::Schema {
                    path: field.into(),
                    line: 0,
                    message: e.to_string(),
                }),
        }
    }
}

fn one() -> f64 {
    1.0
}

/// Driver of the state process on `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelBlock {
    /// `dX = drift dt + sigma dW`
    Bm {
        lower: f64,
        upper: f64,
        #[serde(default = "one")]
        sigma: f64,
        #[serde(default)]
        drift: f64,
    },
    /// `dX = theta (mean - X) dt + sigma dW`
    Ou {
        lower: f64,
        upper: f64,
        theta: f64,
        mean: f64,
        sigma: f64,
    },
    /// `dX = mu X dt + sigma X dW`
    Gbm {
        lower: f64,
        upper: f64,
        mu: f64,
        sigma: f64,
    },
    Custom {
        lower: f64,
        upper: f64,
        drift: FnSpec,
        volatility: FnSpec,
    },
}

/// Stop payoffs `g`, follower payoffs `f` and discount rates (per unit time).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayoffBlock {
    pub g1: FnSpec,
    pub f1: FnSpec,
    pub g2: FnSpec,
    pub f2: FnSpec,
    pub r1: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridBlock {
    pub placement: Placement,
    /// Interior sizes solved by `solve`.
    pub sizes: Vec<usize>,
    /// Interior size of the coarsest refinement level.
    pub base: usize,
    /// Number of nested levels used by `refine`.
    pub levels: usize,
    /// Largest accepted value distance between the last two levels.
    pub refinement_tolerance: f64,
}

impl Default for GridBlock {
    fn default() -> Self {
        GridBlock {
            placement: Placement::Uniform,
            sizes: vec![15],
            base: 1,
            levels: 5,
            refinement_tolerance: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub name: String,
    /// Source of every random stream: the solver uses `seed`, simulation `seed + 1`.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemDocument {
    pub metadata: Metadata,
    pub model: ModelBlock,
    pub payoffs: PayoffBlock,
    #[serde(default)]
    pub grid: GridBlock,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub simulation: SimConfig,
}

impl ProblemDocument {
    /// Sets the document seed and the derived solver and simulation seeds.
    pub fn set_seed(&mut self, seed: u64) {
        self.metadata.seed = seed;
        self.solver.rng_seed = seed;
        self.simulation.rng_seed = seed.wrapping_add(1);
    }

    /// Builds the validated model and payoffs.
    pub fn problem(&self) -> Result<Problem, IoError> {
        let (family, lower, upper) = match &self.model {
            ModelBlock::Bm { lower, upper, sigma, drift } => (
                ModelFamily::Bm {
                    sigma: *sigma,
                    drift: *drift,
                },
                *lower,
                *upper,
            ),
            ModelBlock::Ou {
                lower,
                upper,
                theta,
                mean,
                sigma,
            } => (
                ModelFamily::Ou {
                    theta: *theta,
                    mean: *mean,
                    sigma: *sigma,
                },
                *lower,
                *upper,
            ),
            ModelBlock::Gbm { lower, upper, mu, sigma } => (ModelFamily::Gbm { mu: *mu, sigma: *sigma }, *lower, *upper),
            ModelBlock::Custom {
                lower,
                upper,
                drift,
                volatility,
            } => (
                ModelFamily::Custom {
                    drift: drift.build("model.drift")?,
                    volatility: volatility.build("model.volatility")?,
                },
                *lower,
                *upper,
            ),
        };
        let model = build_model(&RawModelSpec { family, lower, upper }).map_err(assumption)?;
        let p = &self.payoffs;
        let payoffs = PayoffSpec {
            g1: p.g1.build("payoffs.g1")?,
            f1: p.f1.build("payoffs.f1")?,
            g2: p.g2.build("payoffs.g2")?,
            f2: p.f2.build("payoffs.f2")?,
            r1: p.r1,
            r2: p.r2,
        };
        Problem::new(model, payoffs, ASSUMPTION_MESH).map_err(assumption)
    }

    pub fn grid(&self, problem: &Problem, n_interior: usize) -> Result<Grid, IoError> {
        build_grid(problem.model(), n_interior, &self.grid.placement).map_err(grid_error)
    }

    /// Nested schedule of `levels` grids starting from the base size.
    pub fn schedule(&self, problem: &Problem, levels: usize) -> Result<Vec<Grid>, IoError> {
        Ok(self.grid(problem, self.grid.base)?.refinement_schedule(levels))
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(emit_problem(self).as_bytes()))
    }
}

fn assumption(e: ModelError) -> IoError {
    IoError::Assumption(e.to_string())
}

fn grid_error(e: GridError) -> IoError {
    IoError::Schema {
        path: "grid".into(),
        line: 0,
        message: e.to_string(),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses and validates a problem document.
pub fn parse_problem_str(text: &str) -> Result<ProblemDocument, IoError> {
    let mut doc: ProblemDocument = toml::from_str(text).map_err(|e| schema_error(text, &e))?;
    let seed = doc.metadata.seed;
    doc.set_seed(seed);
    doc.solver.validate().map_err(|e| IoError::Schema {
        path: "solver".into(),
        line: section_line(text, "solver"),
        message: e.to_string(),
    })?;
    doc.simulation.validate().map_err(|e| IoError::Schema {
        path: "simulation".into(),
        line: section_line(text, "simulation"),
        message: e.to_string(),
    })?;
    if doc.grid.sizes.is_empty() || doc.grid.levels == 0 {
        return Err(IoError::Schema {
            path: "grid".into(),
            line: section_line(text, "grid"),
            message: "need at least one size and one level".into(),
        });
    }
    let problem = doc.problem()?;
    for &n in &doc.grid.sizes {
        doc.grid(&problem, n)?;
    }
    doc.grid(&problem, doc.grid.base)?;
    Ok(doc)
}

pub fn parse_problem(path: &Path) -> Result<ProblemDocument, IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })?;
    parse_problem_str(&text)
}

/// Canonical text form with every default written out.
pub fn emit_problem(doc: &ProblemDocument) -> String {
    toml::to_string(doc).expect("problem documents always serialize")
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn section_line(text: &str, name: &str) -> usize {
    let header = format!("[{name}]");
    text.lines()
        .position(|l| l.trim() == header)
        .map(|i| i + 1)
        .unwrap_or(0)
}

fn schema_error(text: &str, e: &toml::de::Error) -> IoError {
    let message = e.message().trim().to_string();
    let start = e.span().map(|s| s.start).unwrap_or(0);
    let line_end = text[start.min(text.len())..]
        .find('\n')
        .map_or(text.len(), |i| start + i);
    // innermost table header at or before the error line
    let section = text[..line_end]
        .lines()
        .rev()
        .find_map(|l| {
            let l = l.trim();
            (l.starts_with('[') && l.ends_with(']')).then(|| l.trim_matches(|c| c == '[' || c == ']').to_string())
        })
        .unwrap_or_default();
    let field = message.split('`').nth(1).filter(|_| message.contains("field")).map(str::to_string);
    let path = match (section.is_empty(), field) {
        (true, Some(f)) => f,
        (true, None) => "<root>".into(),
        (false, Some(f)) => format!("{section}.{f}"),
        (false, None) => section,
    };
    IoError::Schema {
        path,
        line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
        message,
    }
}

// ---------------------------------------------------------------------------
// Result documents

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredEquilibrium {
    pub result: EquilibriumResult,
    /// Stopped-location law from the start point nearest the midpoint.
    pub law: Option<DiscreteLaw>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub problem_name: String,
    pub problem_hash: String,
    pub seed: u64,
    pub tolerance: f64,
    pub equilibria: Vec<StoredEquilibrium>,
    pub refinement: Option<RefinementReport>,
    pub verification: VerificationReport,
}

/// Pretty JSON with every float written to 17 significant digits.
struct Digits17<'a>(PrettyFormatter<'a>);

impl Formatter for Digits17<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> std::io::Result<()> {
        write!(w, "{v:.16e}")
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Serializes any value as pretty JSON with 17-digit floats.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Digits17(PrettyFormatter::new()));
    value.serialize(&mut ser).expect("in-memory serialization");
    buf.push(b'\n');
    String::from_utf8(buf).expect("JSON is UTF-8")
}

pub fn parse_result_str(text: &str) -> Result<ResultDocument, IoError> {
    let doc: ResultDocument = serde_json::from_str(text).map_err(|e| IoError::Result(e.to_string()))?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(IoError::Result(format!("unsupported schema version {}", doc.schema_version)));
    }
    Ok(doc)
}

pub fn read_result(path: &Path) -> Result<ResultDocument, IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })?;
    parse_result_str(&text)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    let file_err = |source| IoError::File {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(file_err)?;
    }
    fs::write(path, text).map_err(file_err)
}

// ---------------------------------------------------------------------------
// Plot tables

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v > 0.0 {
        "inf".into()
    } else {
        "nan".into()
    }
}

fn table(header: &str, rows: impl Iterator<Item = Vec<f64>>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        out.push_str(&row.iter().map(|v| num(*v)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

/// Writes rate, value, residual-history and stopped-law tables for every
/// stored equilibrium. Files get a `_level{k}` suffix when there are several.
pub fn emit_plot_data(result: &ResultDocument, out_dir: &Path) -> Result<Vec<PathBuf>, IoError> {
    if result.equilibria.is_empty() {
        eprintln!("warning: result document holds no equilibria; no plot tables written");
        return Ok(Vec::new());
    }
    let many = result.equilibria.len() > 1;
    let mut written = Vec::new();
    for (k, eq) in result.equilibria.iter().enumerate() {
        let suffix = if many { format!("_level{k}") } else { String::new() };
        let r = &eq.result;
        let points = r.profile.grid().points();
        let u1 = r.profile.units(crate::model::Player::One);
        let u2 = r.profile.units(crate::model::Player::Two);
        let rate = |u: f64| iota_rate(u).unwrap_or(f64::NAN);
        let rates = table(
            "x,unit1,unit2,rate1,rate2",
            (0..u1.len()).map(|j| vec![points[j + 1], u1[j], u2[j], rate(u1[j]), rate(u2[j])]),
        );
        let values = table(
            "x,value1,value2",
            (0..points.len()).map(|i| vec![points[i], r.values.w1[i], r.values.w2[i]]),
        );
        let mut residuals = String::from("iteration,residual\n");
        for (i, v) in r.residual_history.iter().enumerate() {
            residuals.push_str(&format!("{i},{}\n", num(*v)));
        }
        let mut files = vec![
            (format!("rates{suffix}.csv"), rates),
            (format!("values{suffix}.csv"), values),
            (format!("residuals{suffix}.csv"), residuals),
        ];
        if let Some(law) = &eq.law {
            files.push((
                format!("law{suffix}.csv"),
                table("x,mass", law.points.iter().zip(&law.mass).map(|(x, m)| vec![*x, *m])),
            ));
        }
        for (name, text) in files {
            let path = out_dir.join(name);
            write_text(&path, &text)?;
            written.push(path);
        }
    }
    Ok(written)
}
