//! Problem files, the built-in catalog and the `ksym` subcommands.
//!
//! A problem file is line oriented: `[section]` headers, `key = value`
//! entries, `#` comments. See `docs/problem-format.md` for the full format.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::exprlang::{parse, Ast, Side};
use crate::geometry::{
    closedness_defect, closedness_defects, prolong, BaseField, Dims, GridDefect, GridSolution, KVectorFieldQ, Lattice,
    PhaseGrid, SectionGamma,
};
use crate::hamiltonian::{build_hamiltonian_kvf, hamilton_residual, hj_residual, project_gamma, relatedness_defect};
use crate::integrate::{
    commutator_defect, compose_solution, path_independence_defect, sweep, traversed_sample, GridSpec,
};
use crate::lagrangian::{el_residual, lagrangian_hj_residual, pullback_theta_l, regularity};
use crate::scalars::grad;
use crate::{Error, Result};

pub const CATALOG_NAMES: [&str; 4] = [
    "vibrating-string",
    "string-lagrangian",
    "free-particle",
    "harmonic-sections",
];

const VIBRATING_STRING: &str = "\
# Vibrating string with sigma = 4, tau = 1 and gamma = (a q, b q), a = 2, b = 1.
[problem]
kind = hamiltonian
n = 1
k = 2

[hamiltonian]
H = 0.5*(p1_1^2/4 - p2_1^2/1)

[section]
gamma1_1 = 2*q1
gamma2_1 = q1

[grid]
t_min = 0, 0
t_max = 1, 1
steps = 100, 100
q0 = 1
";

const STRING_LAGRANGIAN: &str = "\
# Vibrating string on the velocity side: L = (sigma/2) v1^2 - (tau/2) v2^2.
[problem]
kind = lagrangian
n = 1
k = 2

[lagrangian]
L = (4/2)*v1_1^2 - (1/2)*v1_2^2

[section]
X1_1 = 0.5*q1
X1_2 = -q1

[grid]
t_min = 0, 0
t_max = 1, 1
steps = 100, 100
q0 = 1
";

const FREE_PARTICLE: &str = "\
# Free field: sum of squared velocities with a constant section.
[problem]
kind = lagrangian
n = 1
k = 2

[lagrangian]
L = 0.5*(v1_1^2 + v1_2^2)

[section]
X1_1 = 0.5
X1_2 = -0.25

[grid]
t_min = 0, 0
t_max = 1, 1
steps = 100, 100
q0 = 1
";

const HARMONIC_SECTIONS: &str = "\
# Kinetic Hamiltonian with a constant section.
[problem]
kind = hamiltonian
n = 1
k = 2

[hamiltonian]
H = 0.5*(p1_1^2 + p2_1^2)

[section]
gamma1_1 = 0.5
gamma2_1 = -0.25

[grid]
t_min = 0, 0
t_max = 1, 1
steps = 100, 100
q0 = 1
";

/// Text of a built-in problem file.
pub fn catalog(name: &str) -> Result<&'static str> {
    match name {
        "vibrating-string" => Ok(VIBRATING_STRING),
        "string-lagrangian" => Ok(STRING_LAGRANGIAN),
        "free-particle" => Ok(FREE_PARTICLE),
        "harmonic-sections" => Ok(HARMONIC_SECTIONS),
        _ => Err(Error::Argument(format!(
            "unknown catalog entry '{name}'; valid names: {}",
            CATALOG_NAMES.join(", ")
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Hamiltonian,
    Lagrangian,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Hamiltonian => "hamiltonian",
            Kind::Lagrangian => "lagrangian",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub t_min: Vec<f64>,
    pub t_max: Vec<f64>,
    pub steps: Vec<usize>,
    pub q0: Vec<f64>,
}

/// Tolerances and sampling parameters; every field can be overridden in
/// the `[tolerances]` section under the same name.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub hj: f64,
    pub closedness: f64,
    pub kernel: f64,
    pub integrability: f64,
    pub path: f64,
    /// Grid residuals pass when below `equation_constant * h^2` and
    /// converging at second order, or when below `equation_floor`.
    pub equation_constant: f64,
    pub equation_floor: f64,
    pub sample_lo: f64,
    pub sample_hi: f64,
    pub sample_points: usize,
    pub sample_cap: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            hj: 1e-6,
            closedness: 1e-9,
            kernel: 1e-6,
            integrability: 1e-9,
            path: 1e-7,
            equation_constant: 10.0,
            equation_floor: 1e-10,
            sample_lo: -1.0,
            sample_hi: 1.0,
            sample_points: 101,
            sample_cap: 100_000,
        }
    }
}

/// A parsed and validated problem file.
#[derive(Debug, Clone)]
pub struct ProblemFile {
    pub kind: Kind,
    pub dims: Dims,
    /// `H` over `(q, p)` or `L` over `(q, v)`.
    pub function: Ast,
    /// `gamma^A_i` or `X^i_A`, A-major.
    pub section: Vec<Ast>,
    pub grid: Option<GridConfig>,
    pub tolerances: Tolerances,
}

struct Entry<'a> {
    key: &'a str,
    value: &'a str,
    line: usize,
    /// 1-based column of the first character of `value`.
    column: usize,
}

struct Block<'a> {
    name: &'a str,
    line: usize,
    entries: Vec<Entry<'a>>,
}

const SECTIONS: [&str; 6] = ["problem", "hamiltonian", "lagrangian", "section", "grid", "tolerances"];

fn problem_error(line: usize, message: impl Into<String>) -> Error {
    Error::Problem {
        line,
        message: message.into(),
    }
}

fn is_key(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn split_blocks(src: &str) -> Result<Vec<Block<'_>>> {
    let mut blocks: Vec<Block> = Vec::new();
    for (idx, raw) in src.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        let trimmed = content.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| problem_error(line, "section header is missing ']'"))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(problem_error(
                    line,
                    format!("unknown section [{name}]; expected one of {}", SECTIONS.join(", ")),
                ));
            }
            if let Some(prev) = blocks.iter().find(|b| b.name == name) {
                return Err(problem_error(
                    line,
                    format!("section [{name}] already defined on line {}", prev.line),
                ));
            }
            blocks.push(Block {
                name,
                line,
                entries: Vec::new(),
            });
            continue;
        }
        let Some(eq) = content.find('=') else {
            return Err(problem_error(line, "expected 'key = value' or a [section] header"));
        };
        let key = content[..eq].trim();
        if !is_key(key) {
            return Err(problem_error(line, format!("invalid key '{key}'")));
        }
        let after = &content[eq + 1..];
        let value = after.trim();
        if value.is_empty() {
            return Err(problem_error(line, format!("missing value for '{key}'")));
        }
        let column = eq + 1 + (after.len() - after.trim_start().len()) + 1;
        let Some(block) = blocks.last_mut() else {
            return Err(problem_error(
                line,
                format!("'{key}' appears before any section header"),
            ));
        };
        if let Some(prev) = block.entries.iter().find(|e| e.key == key) {
            return Err(problem_error(
                line,
                format!("duplicate key '{key}' (first set on line {})", prev.line),
            ));
        }
        block.entries.push(Entry {
            key,
            value,
            line,
            column,
        });
    }
    Ok(blocks)
}

fn parse_number<T: std::str::FromStr>(e: &Entry, text: &str) -> Result<T> {
    text.trim().parse().map_err(|_| {
        problem_error(
            e.line,
            format!("'{}': cannot parse '{}' as a number", e.key, text.trim()),
        )
    })
}

fn parse_list<T: std::str::FromStr>(e: &Entry, len: usize) -> Result<Vec<T>> {
    let items = e
        .value
        .split(',')
        .map(|s| parse_number(e, s))
        .collect::<Result<Vec<T>>>()?;
    if items.len() != len {
        return Err(problem_error(
            e.line,
            format!("'{}' needs {len} comma-separated values, found {}", e.key, items.len()),
        ));
    }
    Ok(items)
}

fn require_finite(e: &Entry, values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(problem_error(e.line, format!("'{}' must be finite", e.key)));
    }
    Ok(())
}

fn parse_expr(e: &Entry, dims: Dims, side: Side) -> Result<Ast> {
    parse(e.value, dims.env(side)).map_err(|err| {
        problem_error(
            e.line,
            format!("column {}: in '{}': {}", e.column + err.offset, e.key, err.message),
        )
    })
}

/// Parses `{prefix}{a}_{b}` with positive indices without leading zeros.
fn indexed_key(key: &str, prefix: &str) -> Option<(usize, usize)> {
    let rest = key.strip_prefix(prefix)?;
    let (a, b) = rest.split_once('_')?;
    let index = |s: &str| -> Option<usize> {
        if s.is_empty() || s.starts_with('0') || !s.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        s.parse().ok()
    };
    Some((index(a)?, index(b)?))
}

fn entries_by_key<'a>(block: &'a Block<'a>, allowed: &[&str]) -> Result<BTreeMap<&'a str, &'a Entry<'a>>> {
    let mut out = BTreeMap::new();
    for e in &block.entries {
        if !allowed.contains(&e.key) {
            return Err(problem_error(
                e.line,
                format!(
                    "unknown key '{}' in [{}]; expected one of {}",
                    e.key,
                    block.name,
                    allowed.join(", ")
                ),
            ));
        }
        out.insert(e.key, e);
    }
    Ok(out)
}

fn required<'a>(map: &BTreeMap<&str, &'a Entry<'a>>, block: &Block, key: &str) -> Result<&'a Entry<'a>> {
    map.get(key)
        .copied()
        .ok_or_else(|| problem_error(block.line, format!("[{}] is missing '{key}'", block.name)))
}

const TOLERANCE_KEYS: [&str; 11] = [
    "hj",
    "closedness",
    "kernel",
    "integrability",
    "path",
    "equation_constant",
    "equation_floor",
    "sample_lo",
    "sample_hi",
    "sample_points",
    "sample_cap",
];

fn parse_tolerances(block: &Block) -> Result<Tolerances> {
    let mut tol = Tolerances::default();
    for e in &block.entries {
        let positive = |v: f64| -> Result<f64> {
            if v.is_finite() && v > 0.0 {
                Ok(v)
            } else {
                Err(problem_error(
                    e.line,
                    format!("'{}' must be positive and finite", e.key),
                ))
            }
        };
        let count = |v: usize| -> Result<usize> {
            if v >= 1 {
                Ok(v)
            } else {
                Err(problem_error(e.line, format!("'{}' must be at least 1", e.key)))
            }
        };
        match e.key {
            "hj" => tol.hj = positive(parse_number(e, e.value)?)?,
            "closedness" => tol.closedness = positive(parse_number(e, e.value)?)?,
            "kernel" => tol.kernel = positive(parse_number(e, e.value)?)?,
            "integrability" => tol.integrability = positive(parse_number(e, e.value)?)?,
            "path" => tol.path = positive(parse_number(e, e.value)?)?,
            "equation_constant" => tol.equation_constant = positive(parse_number(e, e.value)?)?,
            "equation_floor" => tol.equation_floor = positive(parse_number(e, e.value)?)?,
            "sample_lo" => {
                tol.sample_lo = parse_number(e, e.value)?;
                require_finite(e, &[tol.sample_lo])?;
            }
            "sample_hi" => {
                tol.sample_hi = parse_number(e, e.value)?;
                require_finite(e, &[tol.sample_hi])?;
            }
            "sample_points" => tol.sample_points = count(parse_number(e, e.value)?)?,
            "sample_cap" => tol.sample_cap = count(parse_number(e, e.value)?)?,
            _ => {
                return Err(problem_error(
                    e.line,
                    format!(
                        "unknown key '{}' in [tolerances]; expected one of {}",
                        e.key,
                        TOLERANCE_KEYS.join(", ")
                    ),
                ))
            }
        }
    }
    if tol.sample_lo > tol.sample_hi {
        return Err(problem_error(block.line, "sample_lo exceeds sample_hi"));
    }
    Ok(tol)
}

fn parse_grid(block: &Block, dims: Dims) -> Result<GridConfig> {
    let map = entries_by_key(block, &["t_min", "t_max", "steps", "q0"])?;
    let t_min_e = required(&map, block, "t_min")?;
    let t_max_e = required(&map, block, "t_max")?;
    let steps_e = required(&map, block, "steps")?;
    let q0_e = required(&map, block, "q0")?;
    let t_min: Vec<f64> = parse_list(t_min_e, dims.k)?;
    let t_max: Vec<f64> = parse_list(t_max_e, dims.k)?;
    let steps: Vec<usize> = parse_list(steps_e, dims.k)?;
    let q0: Vec<f64> = parse_list(q0_e, dims.n)?;
    require_finite(t_min_e, &t_min)?;
    require_finite(t_max_e, &t_max)?;
    require_finite(q0_e, &q0)?;
    if let Some(a) = (0..dims.k).find(|&a| t_max[a] <= t_min[a]) {
        return Err(problem_error(
            t_max_e.line,
            format!("t_max must exceed t_min on axis {}", a + 1),
        ));
    }
    if let Some(a) = (0..dims.k).find(|&a| steps[a] < 2) {
        return Err(problem_error(
            steps_e.line,
            format!("axis {} needs at least 2 steps", a + 1),
        ));
    }
    Ok(GridConfig {
        t_min,
        t_max,
        steps,
        q0,
    })
}

impl ProblemFile {
    pub fn parse(src: &str) -> Result<Self> {
        let blocks = split_blocks(src)?;
        let find = |name: &str| blocks.iter().find(|b| b.name == name);
        let last_line = src.lines().count().max(1);

        let problem = find("problem").ok_or_else(|| problem_error(last_line, "missing [problem] section"))?;
        let map = entries_by_key(problem, &["kind", "n", "k"])?;
        let kind_e = required(&map, problem, "kind")?;
        let kind = match kind_e.value {
            "hamiltonian" => Kind::Hamiltonian,
            "lagrangian" => Kind::Lagrangian,
            other => {
                return Err(problem_error(
                    kind_e.line,
                    format!("kind must be 'hamiltonian' or 'lagrangian', found '{other}'"),
                ))
            }
        };
        let dim = |key: &str| -> Result<usize> {
            let e = required(&map, problem, key)?;
            let v: usize = parse_number(e, e.value)?;
            if v == 0 {
                return Err(problem_error(e.line, format!("'{key}' must be at least 1")));
            }
            Ok(v)
        };
        let dims = Dims::new(dim("n")?, dim("k")?)?;

        let (fname, other, key, side) = match kind {
            Kind::Hamiltonian => ("hamiltonian", "lagrangian", "H", Side::Hamiltonian),
            Kind::Lagrangian => ("lagrangian", "hamiltonian", "L", Side::Lagrangian),
        };
        if let Some(b) = find(other) {
            return Err(problem_error(
                b.line,
                format!("section [{other}] does not belong to a {fname} problem"),
            ));
        }
        let fblock = find(fname).ok_or_else(|| problem_error(last_line, format!("missing [{fname}] section")))?;
        let fmap = entries_by_key(fblock, &[key])?;
        let function = parse_expr(required(&fmap, fblock, key)?, dims, side)?;

        let sblock = find("section").ok_or_else(|| problem_error(last_line, "missing [section] section"))?;
        let mut slots: Vec<Option<Ast>> = vec![None; dims.n * dims.k];
        for e in &sblock.entries {
            // gamma{A}_{i} or X{i}_{A}
            let parsed = match kind {
                Kind::Hamiltonian => indexed_key(e.key, "gamma"),
                Kind::Lagrangian => indexed_key(e.key, "X").map(|(i, a)| (a, i)),
            };
            let expected = match kind {
                Kind::Hamiltonian => format!("gamma{{A}}_{{i}} with A <= {} and i <= {}", dims.k, dims.n),
                Kind::Lagrangian => format!("X{{i}}_{{A}} with i <= {} and A <= {}", dims.n, dims.k),
            };
            let Some((a, i)) = parsed.filter(|&(a, i)| a <= dims.k && i <= dims.n) else {
                return Err(problem_error(
                    e.line,
                    format!("unknown key '{}' in [section]; expected {expected}", e.key),
                ));
            };
            slots[(a - 1) * dims.n + (i - 1)] = Some(parse_expr(e, dims, Side::Base)?);
        }
        let mut section = Vec::with_capacity(slots.len());
        for (idx, slot) in slots.into_iter().enumerate() {
            let (a, i) = (idx / dims.n + 1, idx % dims.n + 1);
            let name = match kind {
                Kind::Hamiltonian => format!("gamma{a}_{i}"),
                Kind::Lagrangian => format!("X{i}_{a}"),
            };
            section.push(slot.ok_or_else(|| problem_error(sblock.line, format!("[section] is missing '{name}'")))?);
        }

        let grid = find("grid").map(|b| parse_grid(b, dims)).transpose()?;
        let tolerances = find("tolerances")
            .map(parse_tolerances)
            .transpose()?
            .unwrap_or_default();
        Ok(Self {
            kind,
            dims,
            function,
            section,
            grid,
            tolerances,
        })
    }

    pub fn gamma(&self) -> Result<SectionGamma> {
        if self.kind != Kind::Hamiltonian {
            return Err(Error::Argument("a Lagrangian problem has no gamma section".into()));
        }
        SectionGamma::new(self.dims, self.section.clone())
    }

    pub fn field(&self) -> Result<KVectorFieldQ> {
        if self.kind != Kind::Lagrangian {
            return Err(Error::Argument("a Hamiltonian problem has no X section".into()));
        }
        KVectorFieldQ::new(self.dims, self.section.clone())
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        let g = self
            .grid
            .as_ref()
            .ok_or_else(|| Error::Argument("problem file has no [grid] section".into()))?;
        GridSpec::new(
            Lattice::new(g.t_min.clone(), g.t_max.clone(), g.steps.clone())?,
            g.q0.clone(),
        )
    }

    /// Base points for residual sups.
    pub fn sample(&self) -> Vec<Vec<f64>> {
        let t = &self.tolerances;
        crate::geometry::sample_box(self.dims.n, t.sample_lo, t.sample_hi, t.sample_points, t.sample_cap)
    }
}

/// Flat `key=value` results with pass/fail verdicts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    lines: Vec<(String, String)>,
    failed: bool,
}

fn fmt_num(v: f64) -> String {
    format!("{v:e}")
}

impl Report {
    pub fn new(command: &str, p: &ProblemFile) -> Self {
        let mut r = Self::default();
        r.value("command", command);
        r.value("kind", p.kind.name());
        r.value("n", p.dims.n);
        r.value("k", p.dims.k);
        r
    }

    pub fn value(&mut self, key: &str, v: impl Display) {
        self.lines.push((key.to_string(), v.to_string()));
    }

    pub fn number(&mut self, key: &str, v: f64) {
        self.value(key, fmt_num(v));
    }

    /// Records `value <= tolerance` as the verdict of `name`.
    pub fn check(&mut self, name: &str, value: f64, tolerance: f64) -> bool {
        let pass = value <= tolerance;
        self.number(name, value);
        self.number(&format!("{name}_tol"), tolerance);
        self.verdict(name, pass);
        pass
    }

    pub fn verdict(&mut self, name: &str, pass: bool) {
        self.value(&format!("{name}_pass"), pass);
        self.failed |= !pass;
    }

    pub fn passed(&self) -> bool {
        !self.failed
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.lines {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out.push_str(if self.passed() {
            "verdict=PASS\n"
        } else {
            "verdict=FAIL\n"
        });
        out
    }
}

/// Command-line overrides shared by the subcommands.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Options {
    /// Replaces the Hamilton-Jacobi residual tolerance.
    pub tol: Option<f64>,
    pub override_integrability: bool,
}

impl Options {
    fn tolerances(&self, p: &ProblemFile) -> Tolerances {
        let mut t = p.tolerances;
        if let Some(tol) = self.tol {
            t.hj = tol;
        }
        t
    }
}

fn hj_checks(p: &ProblemFile, tol: &Tolerances, report: &mut Report) -> Result<()> {
    let sample = p.sample();
    report.value("sample_points", sample.len());
    match p.kind {
        Kind::Hamiltonian => {
            let gamma = p.gamma()?;
            let closed = report.check("closedness", closedness_defect(&gamma, &sample)?, tol.closedness);
            if !closed {
                report.value("hj_residual", "skipped");
                return Ok(());
            }
            let hj = hj_residual(&p.function, &gamma, &sample, f64::INFINITY)?;
            report.check("hj_residual", hj.residual, tol.hj);
            report.number("hj_spread", hj.spread);
            let z = build_hamiltonian_kvf(&p.function)?;
            let related = relatedness_defect(&z, &gamma, &sample, f64::INFINITY, tol.kernel)?;
            report.check("relatedness_defect", related.defect, tol.kernel);
        }
        Kind::Lagrangian => {
            let x = p.field()?;
            let theta = pullback_theta_l(&x, &p.function)?;
            let defects = closedness_defects(&theta, &sample)?;
            let worst = defects.iter().cloned().fold(0.0, f64::max);
            let closed = report.check("closedness", worst, tol.closedness);
            if !closed {
                let a = defects.iter().position(|&d| d > tol.closedness).unwrap_or(0);
                report.value("closedness_failing_form", a + 1);
                report.value("hj_residual", "skipped");
                return Ok(());
            }
            let mut min_pivot = f64::INFINITY;
            let mut regular = true;
            for q in &sample {
                let mut coords = q.clone();
                coords.extend(x.eval_field(q)?);
                let r = regularity(&p.function, &crate::geometry::PhasePointL::from_coords(p.dims, &coords))?;
                min_pivot = min_pivot.min(r.min_pivot);
                regular &= r.regular;
            }
            report.number("regularity_min_pivot", min_pivot);
            report.verdict("regularity", regular);
            let hj = lagrangian_hj_residual(&p.function, &x, &sample, f64::INFINITY)?;
            report.check("hj_residual", hj.residual, tol.hj);
            report.number("hj_spread", hj.spread);
        }
    }
    Ok(())
}

pub fn cmd_check_hj(p: &ProblemFile, opts: &Options) -> Result<Report> {
    let start = Instant::now();
    let tol = opts.tolerances(p);
    let mut report = Report::new("check-hj", p);
    hj_checks(p, &tol, &mut report)?;
    report.value("elapsed_ms", start.elapsed().as_millis());
    Ok(report)
}

/// Every-other-node subsampling, when every axis has an even step count of
/// at least four.
fn coarsen(lattice: &Lattice, data: &[f64], width: usize) -> Option<(Lattice, Vec<f64>)> {
    if lattice.steps().iter().any(|&s| s % 2 != 0 || s < 4) {
        return None;
    }
    let steps: Vec<usize> = lattice.steps().iter().map(|s| s / 2).collect();
    let coarse = Lattice::new(lattice.t_min().to_vec(), lattice.t_max().to_vec(), steps).ok()?;
    let mut out = Vec::with_capacity(coarse.len() * width);
    for node in 0..coarse.len() {
        let fine: Vec<usize> = coarse.multi(node).iter().map(|j| 2 * j).collect();
        let f = lattice.flat(&fine);
        out.extend_from_slice(&data[f * width..(f + 1) * width]);
    }
    Some((coarse, out))
}

fn coarsen_solution(g: &GridSolution) -> Option<GridSolution> {
    let (lattice, values) = coarsen(&g.lattice, &g.values, g.n)?;
    GridSolution::new(lattice, g.n, values).ok()
}

fn coarsen_phase(g: &PhaseGrid) -> Option<PhaseGrid> {
    let (lattice, coords) = coarsen(&g.lattice, &g.coords, g.width())?;
    PhaseGrid::new(lattice, g.dims, coords).ok()
}

/// Grid residual verdict: below the floor, or below `C h^2` while the
/// coarse-grid residual shows at least a factor 3 of convergence.
fn equation_check(
    report: &mut Report,
    name: &str,
    lattice: &Lattice,
    fine: &GridDefect,
    coarse: Option<f64>,
    tol: &Tolerances,
) -> bool {
    let h = lattice.max_spacing();
    let bound = tol.equation_constant * h * h;
    report.number(name, fine.sup);
    if let Some(node) = fine.node {
        let multi = lattice.multi(node);
        report.value(&format!("{name}_node"), format!("{multi:?}"));
        let t: Vec<String> = lattice.t_at(&multi).iter().map(|v| fmt_num(*v)).collect();
        report.value(&format!("{name}_t"), format!("[{}]", t.join(", ")));
    }
    report.number(&format!("{name}_h"), h);
    report.number(&format!("{name}_bound"), bound);
    report.number(&format!("{name}_floor"), tol.equation_floor);
    let mut converging = true;
    if let Some(c) = coarse {
        report.number(&format!("{name}_coarse"), c);
        if fine.sup > 0.0 {
            let ratio = c / fine.sup;
            report.number(&format!("{name}_ratio"), ratio);
            converging = ratio >= 3.0;
        }
    }
    let pass = fine.sup <= tol.equation_floor || (fine.sup <= bound && converging);
    report.verdict(name, pass);
    pass
}

fn integrate_checked<X: BaseField>(
    x: &X,
    spec: &GridSpec,
    tol: &Tolerances,
    opts: &Options,
    report: &mut Report,
) -> Result<GridSolution> {
    let k = spec.lattice.k();
    let g = sweep(x, spec, &(0..k).collect::<Vec<_>>())?;
    let defect = commutator_defect(x, &traversed_sample(&g, crate::integrate::INTEGRABILITY_SAMPLE_CAP))?;
    if defect > tol.integrability && !opts.override_integrability {
        return Err(Error::Integrability {
            defect,
            tolerance: tol.integrability,
        });
    }
    report.check("commutator_defect", defect, tol.integrability);
    report.value("integrability_overridden", opts.override_integrability);
    report.check("path_independence_defect", path_independence_defect(x, spec)?, tol.path);
    Ok(g)
}

/// Writes `contents` to `path` through a temporary file in the same
/// directory, so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> std::result::Result<(), csv::Error>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write(&mut buf).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(buf)
}

/// Output of [`cmd_solve`].
#[derive(Debug, Clone)]
pub struct Solved {
    pub report: Report,
    pub psi: GridSolution,
    pub phase: PhaseGrid,
}

/// Runs the pipeline and keeps the grids in memory; see [`cmd_solve`].
pub fn solve_problem(p: &ProblemFile, opts: &Options) -> Result<Solved> {
    let start = Instant::now();
    let tol = opts.tolerances(p);
    let spec = p.grid_spec()?;
    let mut report = Report::new("solve", p);
    hj_checks(p, &tol, &mut report)?;
    let (psi, phase) = match p.kind {
        Kind::Hamiltonian => {
            let gamma = p.gamma()?;
            let projected = project_gamma(&build_hamiltonian_kvf(&p.function)?, &gamma)?;
            let psi = integrate_checked(&projected, &spec, &tol, opts, &mut report)?;
            let phase = compose_solution(&gamma, &psi)?;
            let fine = hamilton_residual(&phase, &p.function)?;
            let coarse = coarsen_phase(&phase)
                .map(|c| hamilton_residual(&c, &p.function).map(|d| d.sup))
                .transpose()?;
            equation_check(&mut report, "hamilton_residual", &phase.lattice, &fine, coarse, &tol);
            (psi, phase)
        }
        Kind::Lagrangian => {
            let x = p.field()?;
            let psi = integrate_checked(&x, &spec, &tol, opts, &mut report)?;
            let phase = compose_solution(&pullback_theta_l(&x, &p.function)?, &psi)?;
            let fine = el_residual(&psi, &p.function)?;
            let coarse = coarsen_solution(&psi)
                .map(|c| el_residual(&c, &p.function).map(|d| d.sup))
                .transpose()?;
            equation_check(&mut report, "el_residual", &psi.lattice, &fine, coarse, &tol);
            (psi, phase)
        }
    };
    report.value("elapsed_ms", start.elapsed().as_millis());
    Ok(Solved { report, psi, phase })
}

/// Integrates the characteristics and writes `psi.csv` and `phase.csv`
/// into `out_dir`.
pub fn cmd_solve(p: &ProblemFile, out_dir: &Path, opts: &Options) -> Result<Report> {
    let Solved { mut report, psi, phase } = solve_problem(p, opts)?;
    fs::create_dir_all(out_dir)?;
    let psi_path = out_dir.join("psi.csv");
    let phase_path = out_dir.join("phase.csv");
    write_atomic(&psi_path, &csv_bytes(|b| psi.write_csv(b))?)?;
    write_atomic(&phase_path, &csv_bytes(|b| phase.write_csv(b))?)?;
    report.value("psi_csv", psi_path.display());
    report.value("phase_csv", phase_path.display());
    Ok(report)
}

/// Sup over interior nodes of `|p - dL/dv(psi, d psi/dt)|` for a phase grid
/// of a Lagrangian problem.
fn legendre_defect(grid: &PhaseGrid, l: &Ast) -> Result<GridDefect> {
    let psi = grid.base();
    let jet = prolong(&psi)?;
    let n = grid.dims.n;
    let mut out = GridDefect::zero();
    for node in 0..grid.lattice.len() {
        if !grid.lattice.is_interior(&grid.lattice.multi(node)) {
            continue;
        }
        let g = grad(l, jet.coords_at(node)).map_err(|e| grid.lattice.locate(node, e.into()))?;
        let p = &grid.coords_at(node)[n..];
        for (j, pj) in p.iter().enumerate() {
            out.update((pj - g[n + j]).abs(), node);
        }
    }
    Ok(out)
}

/// Recomputes the field-equation residuals of a grid CSV: either a `psi`
/// grid (`t*, q*` columns) or a phase grid (`t*, q*, p*` columns).
pub fn cmd_verify(p: &ProblemFile, csv_text: &str, opts: &Options) -> Result<Report> {
    let start = Instant::now();
    let tol = opts.tolerances(p);
    let mut report = Report::new("verify", p);
    let header = csv_text.lines().next().unwrap_or("");
    let is_phase = header.split(',').any(|c| c.trim().starts_with('p'));
    report.value("grid_kind", if is_phase { "phase" } else { "psi" });
    let phase = if is_phase {
        Some(PhaseGrid::read_csv(csv_text.as_bytes(), p.dims)?)
    } else {
        None
    };
    let psi = match &phase {
        Some(g) => g.base(),
        None => GridSolution::read_csv(csv_text.as_bytes(), p.dims.n, p.dims.k)?,
    };
    report.value("nodes", psi.lattice.len());
    match p.kind {
        Kind::Hamiltonian => {
            let phase = match phase {
                Some(g) => g,
                None => compose_solution(&p.gamma()?, &psi)?,
            };
            let fine = hamilton_residual(&phase, &p.function)?;
            let coarse = coarsen_phase(&phase)
                .map(|c| hamilton_residual(&c, &p.function).map(|d| d.sup))
                .transpose()?;
            equation_check(&mut report, "hamilton_residual", &phase.lattice, &fine, coarse, &tol);
        }
        Kind::Lagrangian => {
            let fine = el_residual(&psi, &p.function)?;
            let coarse = coarsen_solution(&psi)
                .map(|c| el_residual(&c, &p.function).map(|d| d.sup))
                .transpose()?;
            equation_check(&mut report, "el_residual", &psi.lattice, &fine, coarse, &tol);
            if let Some(phase) = &phase {
                let fine = legendre_defect(phase, &p.function)?;
                let coarse = coarsen_phase(phase)
                    .map(|c| legendre_defect(&c, &p.function).map(|d| d.sup))
                    .transpose()?;
                equation_check(&mut report, "legendre_residual", &phase.lattice, &fine, coarse, &tol);
            }
        }
    }
    report.value("elapsed_ms", start.elapsed().as_millis());
    Ok(report)
}

/// Process exit status for an error: 2 for bad input, 3 for failures
/// while computing.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Parse(_) | Error::Argument(_) | Error::Shape(_) | Error::Problem { .. } => 2,
        _ => 3,
    }
}

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "ksym",
    version,
    about = "Hamilton-Jacobi checks and solvers for k-symplectic field theories"
)]
struct Cli {
    /// Tolerance for the Hamilton-Jacobi residual (overrides the problem file)
    #[arg(long, global = true, value_name = "FLOAT")]
    tol: Option<f64>,

    /// Keep results even when the field fails the integrability check
    #[arg(long, global = true)]
    override_integrability: bool,

    /// Also write the report to this file
    #[arg(long, global = true, value_name = "PATH")]
    report: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the Hamilton-Jacobi condition for the problem's section
    CheckHj { file: PathBuf },
    /// Integrate the characteristics and write psi.csv and phase.csv
    Solve {
        file: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Recompute the field-equation residuals of a grid CSV
    Verify {
        file: PathBuf,
        #[arg(long, value_name = "CSV")]
        grid: PathBuf,
    },
    /// Print a built-in problem file
    Catalog { name: String },
}

fn read_input(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Argument(format!("cannot read {}: {e}", path.display())))
}

fn load_problem(path: &Path) -> Result<ProblemFile> {
    ProblemFile::parse(&read_input(path)?).map_err(|e| match e {
        Error::Problem { line, message } => Error::Problem {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => Error::Argument(format!("{}: {other}", path.display())),
    })
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let opts = Options {
        tol: cli.tol,
        override_integrability: cli.override_integrability,
    };
    if let Some(t) = cli.tol {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::Argument("--tol must be positive and finite".into()));
        }
    }
    let report = match &cli.command {
        Command::Catalog { name } => {
            out.write_all(catalog(name)?.as_bytes())?;
            return Ok(EXIT_PASS);
        }
        Command::CheckHj { file } => cmd_check_hj(&load_problem(file)?, &opts)?,
        Command::Solve { file, out: dir } => cmd_solve(&load_problem(file)?, dir, &opts)?,
        Command::Verify { file, grid } => {
            let p = load_problem(file)?;
            cmd_verify(&p, &read_input(grid)?, &opts)?
        }
    };
    let text = report.render();
    out.write_all(text.as_bytes())?;
    if let Some(path) = &cli.report {
        write_atomic(path, text.as_bytes())?;
    }
    Ok(if report.passed() { EXIT_PASS } else { EXIT_FAIL })
}

/// Entry point of the `ksym` binary; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_PASS };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(&cli, &mut lock) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("ksym: error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_entries_parse() {
        for name in CATALOG_NAMES {
            let p = ProblemFile::parse(catalog(name).unwrap()).unwrap();
            assert_eq!(p.dims, Dims::new(1, 2).unwrap());
            assert!(p.grid_spec().is_ok());
        }
        let err = catalog("pendulum").unwrap_err().to_string();
        assert!(CATALOG_NAMES.iter().all(|n| err.contains(n)));
    }

    #[test]
    fn string_entries() {
        let p = ProblemFile::parse(catalog("vibrating-string").unwrap()).unwrap();
        assert_eq!(p.function.to_string(), "0.5*(p1_1^2/4 - p2_1^2/1)");
        assert_eq!(p.section[0].to_string(), "2*q1");
        assert_eq!(p.section[1].to_string(), "q1");
        assert_eq!(p.kind, Kind::Hamiltonian);
    }

    fn err_line(src: &str) -> (usize, String) {
        match ProblemFile::parse(src) {
            Err(Error::Problem { line, message }) => (line, message),
            other => panic!("expected a problem error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_files_report_lines() {
        let base = catalog("vibrating-string").unwrap();
        let (line, msg) = err_line(&base.replace("H = 0.5", "H = 0.5 +* "));
        assert_eq!(line, 8);
        assert!(msg.contains("column"), "{msg}");
        let (line, msg) = err_line(&base.replace("q0 = 1", "q0 = 1\nspeed = 3"));
        assert_eq!(line, 19);
        assert!(msg.contains("unknown key 'speed'"), "{msg}");
        let (line, _) = err_line(&base.replace("gamma2_1 = q1\n", ""));
        assert_eq!(line, 10);
        let (line, _) = err_line(&base.replace("gamma2_1", "gamma3_1"));
        assert_eq!(line, 12);
        let (line, _) = err_line(&base.replace("kind = hamiltonian", "kind = quantum"));
        assert_eq!(line, 3);
        let (line, _) = err_line(&format!("{base}\n[grid]\nq0 = 2\n"));
        assert_eq!(line, 20);
        let (line, _) = err_line(&base.replace("steps = 100, 100", "steps = 100"));
        assert_eq!(line, 17);
        let (line, _) = err_line(&base.replace("[hamiltonian]", "[lagrangian]"));
        assert_eq!(line, 7);
        let (line, _) = err_line("n = 1\n");
        assert_eq!(line, 1);
    }

    #[test]
    fn tolerances_override() {
        let src = format!(
            "{}\n[tolerances]\nhj = 1e-3\nsample_points = 5\n",
            catalog("harmonic-sections").unwrap()
        );
        let p = ProblemFile::parse(&src).unwrap();
        assert_eq!(p.tolerances.hj, 1e-3);
        assert_eq!(p.sample().len(), 5);
        let bad = format!("{}\n[tolerances]\nhj = -1\n", catalog("harmonic-sections").unwrap());
        assert!(ProblemFile::parse(&bad).is_err());
    }

    #[test]
    fn check_hj_verdicts() {
        let p = ProblemFile::parse(catalog("vibrating-string").unwrap()).unwrap();
        let r = cmd_check_hj(&p, &Options::default()).unwrap();
        assert!(r.passed(), "{}", r.render());
        let res: f64 = r.get("hj_residual").unwrap().parse().unwrap();
        assert!(res < 1e-12);

        let perturbed = catalog("vibrating-string")
            .unwrap()
            .replace("gamma2_1 = q1", "gamma2_1 = 1.1*q1");
        let r = cmd_check_hj(&ProblemFile::parse(&perturbed).unwrap(), &Options::default()).unwrap();
        assert!(!r.passed());
        let res: f64 = r.get("hj_residual").unwrap().parse().unwrap();
        assert!((res - 0.21).abs() < 1e-12, "{res}");

        let constant = catalog("vibrating-string")
            .unwrap()
            .replace("H = 0.5*(p1_1^2/4 - p2_1^2/1)", "H = 3")
            .replace("gamma2_1 = q1", "gamma2_1 = sin(q1)");
        assert!(
            cmd_check_hj(&ProblemFile::parse(&constant).unwrap(), &Options::default())
                .unwrap()
                .passed()
        );
    }

    #[test]
    fn lagrangian_check_hj() {
        for name in ["string-lagrangian", "free-particle"] {
            let p = ProblemFile::parse(catalog(name).unwrap()).unwrap();
            let r = cmd_check_hj(&p, &Options::default()).unwrap();
            assert!(r.passed(), "{name}: {}", r.render());
        }
        let twisted = "[problem]\nkind = lagrangian\nn = 2\nk = 1\n[lagrangian]\nL = 0.5*(v1_1^2 + v2_1^2)\n\
                       [section]\nX1_1 = q2\nX2_1 = -q1\n[tolerances]\nsample_points = 5\n";
        let r = cmd_check_hj(&ProblemFile::parse(twisted).unwrap(), &Options::default()).unwrap();
        assert!(!r.passed());
        assert_eq!(r.get("closedness_failing_form"), Some("1"));
        assert_eq!(r.get("hj_residual"), Some("skipped"));
    }

    #[test]
    fn solve_and_verify_in_memory() {
        let p = ProblemFile::parse(catalog("harmonic-sections").unwrap()).unwrap();
        let solved = solve_problem(&p, &Options::default()).unwrap();
        assert!(solved.report.passed(), "{}", solved.report.render());
        let node = solved.psi.lattice.flat(&[100, 100]);
        assert!((solved.psi.point(node)[0] - 1.25).abs() < 1e-14);
        assert_eq!(&solved.phase.coords_at(node)[1..], &[0.5, -0.25]);

        let mut csv = Vec::new();
        solved.phase.write_csv(&mut csv).unwrap();
        let r = cmd_verify(&p, std::str::from_utf8(&csv).unwrap(), &Options::default()).unwrap();
        assert!(r.passed(), "{}", r.render());
    }

    #[test]
    fn coarsening_needs_even_steps() {
        let l = Lattice::new(vec![0.0], vec![1.0], vec![5]).unwrap();
        assert!(coarsen(&l, &[0.0; 6], 1).is_none());
        let l = Lattice::new(vec![0.0], vec![1.0], vec![4]).unwrap();
        let (c, v) = coarsen(&l, &[0.0, 1.0, 2.0, 3.0, 4.0], 1).unwrap();
        assert_eq!(c.steps(), &[2]);
        assert_eq!(v, vec![0.0, 2.0, 4.0]);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Argument("x".into())), 2);
        assert_eq!(
            exit_code(&Error::BlowUp {
                node: vec![1],
                t: vec![0.1]
            }),
            3
        );
        assert_eq!(
            exit_code(&Error::Integrability {
                defect: 1.0,
                tolerance: 1e-9
            }),
            3
        );
    }
}
