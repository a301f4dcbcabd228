//! Problem-file ingestion: a flat INI-style key/value format with
//! sections, chosen for hand-editability of the bundled corpus.
//!
//! ```text
//! # harmonic oscillator
//! [problem]
//! kind = hamiltonian
//! n = 1
//!
//! [hamiltonian]
//! H = (p1^2 + q1^2)/2
//!
//! [integration]
//! theta = 0.5
//! h = 0.01
//! steps = 1000
//!
//! [initial]
//! q = 1.0
//! p = 0.0
//! ```
//!
//! OCP files use `kind = ocp`, an `m` key, an `[ocp]` section with
//! `X1..Xn` and `F`, and an optional `[gauge]` section mapping control
//! names to constants. `[options]` holds `seed`, `newton_tol`,
//! `newton_max_iter`, `rank_tol` and `samples`.

use crate::expr::{self, Expr};
use crate::hamiltonian::{p_name, q_name, u_name};
use std::collections::BTreeMap;
use std::fmt;

/// Parse or validation failure, with the 1-based line it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ProblemError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "problem file error at line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ProblemError {}

fn err(line: usize, message: impl Into<String>) -> ProblemError {
    ProblemError { line, message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Hamiltonian,
    Ocp,
}

/// A validated problem file.
#[derive(Debug, Clone)]
pub struct ProblemFile {
    pub kind: ProblemKind,
    pub n: usize,
    pub m: usize,
    /// `H` for Hamiltonian problems.
    pub hamiltonian: Option<Expr>,
    /// `X1..Xn` for OCP problems.
    pub dynamics: Vec<Expr>,
    /// `F` for OCP problems.
    pub cost: Option<Expr>,
    pub theta: f64,
    pub h: f64,
    pub steps: usize,
    pub q0: Vec<f64>,
    pub p0: Vec<f64>,
    /// Gauge control values by zero-based control index.
    pub gauge: BTreeMap<usize, f64>,
    pub seed: u64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub rank_tol: f64,
    pub samples: usize,
}

/// Raw key/value entries with positions, grouped by section.
struct RawFile {
    sections: BTreeMap<String, Vec<(String, String, usize)>>,
    header_lines: BTreeMap<String, usize>,
}

fn parse_raw(text: &str) -> Result<RawFile, ProblemError> {
    let mut sections: BTreeMap<String, Vec<(String, String, usize)>> = BTreeMap::new();
    let mut header_lines: BTreeMap<String, usize> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (idx, raw_line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let Some(name) = name.strip_suffix(']') else {
                return Err(err(lineno, "unterminated section header"));
            };
            let name = name.trim().to_ascii_lowercase();
            if name.is_empty() {
                return Err(err(lineno, "empty section name"));
            }
            if sections.contains_key(&name) {
                return Err(err(lineno, format!("duplicate section [{name}]")));
            }
            sections.insert(name.clone(), Vec::new());
            header_lines.insert(name.clone(), lineno);
            current = Some(name);
            continue;
        }
        let Some(eq) = line.find('=') else {
            return Err(err(lineno, "expected 'key = value'"));
        };
        let key = line[..eq].trim().to_string();
        let value = line[eq + 1..].trim().to_string();
        if key.is_empty() {
            return Err(err(lineno, "empty key"));
        }
        let Some(section) = &current else {
            return Err(err(lineno, format!("key '{key}' before any [section]")));
        };
        sections.get_mut(section).unwrap().push((key, value, lineno));
    }
    Ok(RawFile { sections, header_lines })
}

struct Section {
    name: String,
    entries: Vec<(String, String, usize)>,
    used: Vec<bool>,
}

impl Section {
    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        for (i, (k, v, line)) in self.entries.iter().enumerate() {
            if !self.used[i] && k.eq_ignore_ascii_case(key) {
                self.used[i] = true;
                return Some((v.clone(), *line));
            }
        }
        None
    }

    fn finish(&self) -> Result<(), ProblemError> {
        for (i, (k, _, line)) in self.entries.iter().enumerate() {
            if !self.used[i] {
                return Err(err(*line, format!("unknown key '{k}' in section [{}]", self.name)));
            }
        }
        Ok(())
    }
}

fn parse_number<T: std::str::FromStr>(value: &str, line: usize, what: &str) -> Result<T, ProblemError> {
    value.parse::<T>().map_err(|_| err(line, format!("invalid {what}: '{value}'")))
}

fn parse_vector(value: &str, line: usize, what: &str) -> Result<Vec<f64>, ProblemError> {
    value
        .split(',')
        .map(|s| parse_number::<f64>(s.trim(), line, what))
        .collect()
}

fn parse_expression(value: &str, line: usize, allowed: &[String]) -> Result<Expr, ProblemError> {
    let e = expr::parse(value).map_err(|pe| err(line, format!("{pe} in expression '{value}'")))?;
    for name in e.free_variables() {
        if !allowed.contains(&name) {
            return Err(err(
                line,
                format!("variable '{name}' is not declared (allowed: {})", allowed.join(", ")),
            ));
        }
    }
    Ok(e)
}

/// Parse and validate a problem file.
pub fn parse_problem(text: &str) -> Result<ProblemFile, ProblemError> {
    let raw = parse_raw(text)?;
    let known = ["problem", "hamiltonian", "ocp", "integration", "initial", "gauge", "options"];
    for name in raw.sections.keys() {
        if !known.contains(&name.as_str()) {
            return Err(err(raw.header_lines[name], format!("unknown section [{name}]")));
        }
    }
    let section = |name: &str| -> Option<Section> {
        raw.sections.get(name).map(|entries| Section {
            name: name.to_string(),
            entries: entries.clone(),
            used: vec![false; entries.len()],
        })
    };

    // [problem]
    let mut problem = section("problem").ok_or_else(|| err(1, "missing [problem] section"))?;
    let (kind_str, kind_line) = problem.take("kind").ok_or_else(|| err(1, "missing 'kind'"))?;
    let kind = match kind_str.to_ascii_lowercase().as_str() {
        "hamiltonian" => ProblemKind::Hamiltonian,
        "ocp" => ProblemKind::Ocp,
        other => return Err(err(kind_line, format!("kind must be 'hamiltonian' or 'ocp', got '{other}'"))),
    };
    let (n_str, n_line) = problem.take("n").ok_or_else(|| err(kind_line, "missing 'n'"))?;
    let n: usize = parse_number(&n_str, n_line, "n")?;
    if n == 0 {
        return Err(err(n_line, "n must be at least 1"));
    }
    let m: usize = match problem.take("m") {
        Some((v, line)) => {
            let m = parse_number(&v, line, "m")?;
            if kind == ProblemKind::Ocp && m == 0 {
                return Err(err(line, "m must be at least 1 for an ocp"));
            }
            m
        }
        None => {
            if kind == ProblemKind::Ocp {
                return Err(err(n_line, "missing 'm' for an ocp"));
            }
            0
        }
    };
    problem.finish()?;

    let q_vars: Vec<String> = (0..n).map(q_name).collect();
    let p_vars: Vec<String> = (0..n).map(p_name).collect();
    let u_vars: Vec<String> = (0..m).map(u_name).collect();

    // [hamiltonian] / [ocp]
    let mut hamiltonian = None;
    let mut dynamics = Vec::new();
    let mut cost = None;
    match kind {
        ProblemKind::Hamiltonian => {
            let mut sec = section("hamiltonian").ok_or_else(|| err(1, "missing [hamiltonian] section"))?;
            let allowed: Vec<String> = q_vars.iter().chain(&p_vars).cloned().collect();
            let (h_str, h_line) = sec.take("H").ok_or_else(|| err(1, "missing 'H'"))?;
            hamiltonian = Some(parse_expression(&h_str, h_line, &allowed)?);
            sec.finish()?;
            if raw.sections.contains_key("ocp") {
                return Err(err(raw.header_lines["ocp"], "unexpected [ocp] section in a hamiltonian file"));
            }
        }
        ProblemKind::Ocp => {
            let mut sec = section("ocp").ok_or_else(|| err(1, "missing [ocp] section"))?;
            let allowed: Vec<String> = q_vars.iter().chain(&u_vars).cloned().collect();
            for i in 0..n {
                let key = format!("X{}", i + 1);
                let (x_str, x_line) =
                    sec.take(&key).ok_or_else(|| err(raw.header_lines["ocp"], format!("missing '{key}'")))?;
                dynamics.push(parse_expression(&x_str, x_line, &allowed)?);
            }
            let (f_str, f_line) = sec.take("F").ok_or_else(|| err(raw.header_lines["ocp"], "missing 'F'"))?;
            cost = Some(parse_expression(&f_str, f_line, &allowed)?);
            sec.finish()?;
            if raw.sections.contains_key("hamiltonian") {
                return Err(err(
                    raw.header_lines["hamiltonian"],
                    "unexpected [hamiltonian] section in an ocp file",
                ));
            }
        }
    }

    // [integration]
    let mut theta = 0.5f64;
    let mut h = 0.01f64;
    let mut steps = 0usize;
    if let Some(mut sec) = section("integration") {
        if let Some((v, line)) = sec.take("theta") {
            theta = parse_number(&v, line, "theta")?;
            if !(0.0..=1.0).contains(&theta) {
                return Err(err(line, format!("theta must lie in [0, 1], got {theta}")));
            }
        }
        if let Some((v, line)) = sec.take("h") {
            h = parse_number(&v, line, "h")?;
            if !(h > 0.0) || !h.is_finite() {
                return Err(err(line, format!("h must be positive, got {h}")));
            }
        }
        if let Some((v, line)) = sec.take("steps") {
            steps = parse_number(&v, line, "steps")?;
        }
        sec.finish()?;
    }

    // [initial]
    let mut q0 = vec![0.0; n];
    let mut p0 = vec![0.0; n];
    if let Some(mut sec) = section("initial") {
        if let Some((v, line)) = sec.take("q") {
            q0 = parse_vector(&v, line, "q component")?;
            if q0.len() != n {
                return Err(err(line, format!("q has {} components, expected {n}", q0.len())));
            }
        }
        if let Some((v, line)) = sec.take("p") {
            p0 = parse_vector(&v, line, "p component")?;
            if p0.len() != n {
                return Err(err(line, format!("p has {} components, expected {n}", p0.len())));
            }
        }
        sec.finish()?;
    }

    // [gauge]
    let mut gauge = BTreeMap::new();
    if let Some(sec) = section("gauge") {
        if kind != ProblemKind::Ocp {
            return Err(err(raw.header_lines["gauge"], "[gauge] only applies to ocp files"));
        }
        for (key, value, line) in &sec.entries {
            let index = key
                .strip_prefix('u')
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|&k| k >= 1 && k <= m)
                .ok_or_else(|| err(*line, format!("gauge key '{key}' is not a control name u1..u{m}")))?;
            gauge.insert(index - 1, parse_number::<f64>(value, *line, "gauge value")?);
        }
    }

    // [options]
    let mut seed = 0u64;
    let mut newton_tol = 1e-12;
    let mut newton_max_iter = 50usize;
    let mut rank_tol = 1e-9;
    let mut samples = 32usize;
    if let Some(mut sec) = section("options") {
        if let Some((v, line)) = sec.take("seed") {
            seed = parse_number(&v, line, "seed")?;
        }
        if let Some((v, line)) = sec.take("newton_tol") {
            newton_tol = parse_number(&v, line, "newton_tol")?;
            if !(newton_tol > 0.0) {
                return Err(err(line, "newton_tol must be positive"));
            }
        }
        if let Some((v, line)) = sec.take("newton_max_iter") {
            newton_max_iter = parse_number(&v, line, "newton_max_iter")?;
        }
        if let Some((v, line)) = sec.take("rank_tol") {
            rank_tol = parse_number(&v, line, "rank_tol")?;
            if !(rank_tol > 0.0) {
                return Err(err(line, "rank_tol must be positive"));
            }
        }
        if let Some((v, line)) = sec.take("samples") {
            samples = parse_number(&v, line, "samples")?;
            if samples == 0 {
                return Err(err(line, "samples must be at least 1"));
            }
        }
        sec.finish()?;
    }

    Ok(ProblemFile {
        kind,
        n,
        m,
        hamiltonian,
        dynamics,
        cost,
        theta,
        h,
        steps,
        q0,
        p0,
        gauge,
        seed,
        newton_tol,
        newton_max_iter,
        rank_tol,
        samples,
    })
}
