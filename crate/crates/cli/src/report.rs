//! Run directory, CSV/JSON writers, check records and failure classes.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;

/// Why a run stopped; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration or input (exit 1).
    Validation { check: String, message: String },
    /// The computation itself failed (exit 2).
    Numerical { check: String, message: String },
}

impl Failure {
    pub fn validation(check: &str, message: impl Display) -> Self {
        Self::Validation { check: check.into(), message: message.to_string() }
    }

    pub fn numerical(check: &str, message: impl Display) -> Self {
        Self::Numerical { check: check.into(), message: message.to_string() }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Validation { .. } => 1,
            Self::Numerical { .. } => 2,
        }
    }
}

impl Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Validation { check, message } => write!(f, "validation failed [{check}]: {message}"),
            Self::Numerical { check, message } => write!(f, "numerical failure [{check}]: {message}"),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::validation("output", format!("{e:#}"))
    }
}

/// Outcome of one acceptance check exercised by a command.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub pass: bool,
    pub detail: String,
    pub metrics: BTreeMap<String, Value>,
}

impl Check {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into(), metrics: BTreeMap::new() }
    }

    pub fn metric(mut self, key: &str, v: impl Serialize) -> Self {
        self.metrics.insert(key.into(), serde_json::to_value(v).unwrap_or(Value::Null));
        self
    }
}

/// Contents of `summary.json`. Keys of `checks` are acceptance identifiers (AC1..AC12).
#[derive(Debug, Serialize)]
pub struct Summary {
    pub command: String,
    pub passed: bool,
    pub checks: BTreeMap<String, Check>,
    pub info: BTreeMap<String, Value>,
    pub warnings: Vec<String>,
}

impl Summary {
    pub fn new(command: &str) -> Self {
        Self { command: command.into(), passed: true, checks: BTreeMap::new(), info: BTreeMap::new(), warnings: Vec::new() }
    }

    pub fn check(&mut self, id: &str, c: Check) {
        self.passed &= c.pass;
        self.checks.insert(id.into(), c);
    }

    pub fn info(&mut self, key: &str, v: impl Serialize) {
        self.info.insert(key.into(), serde_json::to_value(v).unwrap_or(Value::Null));
    }

    pub fn failed(&self) -> Vec<(&String, &Check)> {
        self.checks.iter().filter(|(_, c)| !c.pass).collect()
    }
}

pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("cannot create {}", path.display()))?;
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write_text(&self, name: &str, text: &str) -> anyhow::Result<()> {
        let p = self.path.join(name);
        fs::write(&p, text).with_context(|| format!("cannot write {}", p.display()))
    }

    pub fn write_json(&self, name: &str, v: &impl Serialize) -> anyhow::Result<()> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.write_text(name, &s)
    }

    pub fn write_csv(&self, name: &str, csv: &Csv) -> anyhow::Result<()> {
        self.write_text(name, &csv.text)
    }
}

/// Header plus rows; numbers use Rust's shortest round-trip formatting.
pub struct Csv {
    text: String,
    width: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self { text: header.join(",") + "\n", width: header.len() }
    }

    pub fn with_header(header: Vec<String>) -> Self {
        Self { width: header.len(), text: header.join(",") + "\n" }
    }

    pub fn row(&mut self, cells: &[Cell]) {
        debug_assert_eq!(cells.len(), self.width);
        let line: Vec<String> = cells.iter().map(|c| c.to_string()).collect();
        self.text += &line.join(",");
        self.text.push('\n');
    }

    pub fn nums(&mut self, v: &[f64]) {
        let cells: Vec<Cell> = v.iter().map(|x| Cell::F(*x)).collect();
        self.row(&cells);
    }
}

pub enum Cell {
    F(f64),
    I(u64),
    S(String),
    Empty,
}

impl Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::F(x) if *x == 0.0 || !x.is_finite() || (1e-4..1e15).contains(&x.abs()) => write!(f, "{x}"),
            Cell::F(x) => write!(f, "{x:e}"),
            Cell::I(x) => write!(f, "{x}"),
            Cell::S(s) => write!(f, "{s}"),
            Cell::Empty => Ok(()),
        }
    }
}
