//! Result tables and the files a run leaves behind.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Serialize;
use serde_json::{Map, Value};

use relsa::io::{write_atomic, write_json};
use relsa::Result;

use crate::config::RunMetadata;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    fn extension(&self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Int(i64),
    Real(f64),
    Empty,
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Int(v) => v.to_string(),
            Cell::Real(v) => format!("{v:.9}"),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Text(s) => Value::String(s.clone()),
            Cell::Int(v) => Value::from(*v),
            Cell::Real(v) => serde_json::Number::from_f64(*v)
                .map(Value::Number)
                .unwrap_or(Value::Null),
            Cell::Empty => Value::Null,
        }
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u32> for Cell {
    fn from(v: u32) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(v.to_string())
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map(Into::into).unwrap_or(Cell::Empty)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Self {
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.headers.join(",");
        s.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Cell::csv).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> Value {
        Value::Array(
            self.rows
                .iter()
                .map(|row| {
                    let obj: Map<String, Value> =
                        self.headers.iter().cloned().zip(row.iter().map(Cell::json)).collect();
                    Value::Object(obj)
                })
                .collect(),
        )
    }
}

/// Collects the files of one run under its output directory.
pub struct Outputs {
    dir: PathBuf,
    format: Format,
    written: Vec<String>,
}

impl Outputs {
    pub fn new(dir: &Path, format: Format) -> Self {
        Self {
            dir: dir.to_path_buf(),
            format,
            written: Vec::new(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Write a table as `<stem>.csv` or `<stem>.json` per the run's format.
    pub fn table(&mut self, stem: &str, table: &Table) -> Result<PathBuf> {
        let name = format!("{stem}.{}", self.format.extension());
        let path = self.path(&name);
        match self.format {
            Format::Csv => write_atomic(&path, table.to_csv().as_bytes())?,
            Format::Json => write_json(&path, &table.to_json())?,
        }
        self.written.push(name);
        Ok(path)
    }

    /// Text whose format does not depend on `--format` (CSV reports, JSONL).
    pub fn text(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.path(name);
        write_atomic(&path, text.as_bytes())?;
        self.written.push(name.to_string());
        Ok(path)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.path(name);
        write_json(&path, value)?;
        self.written.push(name.to_string());
        Ok(path)
    }

    /// Note a file written by other means.
    pub fn record(&mut self, name: &str) {
        self.written.push(name.to_string());
    }

    /// Write `run.json`, which reproduces the run when passed as `--config`.
    pub fn finish<C: Serialize + Clone>(self, command: &str, config: &C) -> Result<Vec<String>> {
        let meta = RunMetadata {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            outputs: self.written.clone(),
        };
        write_json(&self.dir.join("run.json"), &meta)?;
        Ok(self.written)
    }
}
