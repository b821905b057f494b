//! Deterministic output: CSV with a fixed column order and
//! 17-significant-digit floats, LF line endings, plus a manifest JSON next
//! to every artifact.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fedgen_core::config::RunConfig;
use fedgen_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// One CSV cell.
pub enum Cell {
    Int(i64),
    Float(f64),
    Str(String),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            // 17 significant digits round-trip every f64.
            Cell::Float(v) => format!("{v:.16e}"),
            Cell::Str(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }
}

pub struct CsvTable {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl CsvTable {
    pub fn new(header: Vec<&'static str>) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Cell::render).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// SHA-256 over the canonical (key-sorted) JSON encoding of the resolved
/// configuration; insensitive to key order in the input file.
pub fn fingerprint(config: &RunConfig) -> String {
    let value = serde_json::to_value(config).expect("config serializes");
    let canonical = serde_json::to_string(&value).expect("value serializes");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    format!("{:x}", hasher.finalize())
}

#[derive(Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub resolved_config: &'a RunConfig,
    pub seed: u64,
    pub tool_version: &'a str,
    pub duration_ms: u128,
    pub outputs: Vec<String>,
    pub fingerprint: String,
}

pub struct OutputWriter {
    dir: PathBuf,
    started: Instant,
    written: Vec<String>,
}

impl OutputWriter {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::InvalidConfig(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), started: Instant::now(), written: Vec::new() })
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        let mut f = std::fs::File::create(&path)
            .map_err(|e| Error::InvalidConfig(format!("cannot write {}: {e}", path.display())))?;
        f.write_all(bytes)
            .map_err(|e| Error::InvalidConfig(format!("cannot write {}: {e}", path.display())))?;
        self.written.push(path.display().to_string());
        Ok(path)
    }

    pub fn write_csv(&mut self, name: &str, table: &CsvTable) -> Result<PathBuf> {
        self.write_bytes(name, table.render().as_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).expect("report serializes");
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    /// Writes `<command>_manifest.json` recording how the artifacts were
    /// produced.
    pub fn write_manifest(&mut self, command: &str, config: &RunConfig) -> Result<PathBuf> {
        let manifest = Manifest {
            command,
            resolved_config: config,
            seed: config.base_seed,
            tool_version: env!("CARGO_PKG_VERSION"),
            duration_ms: self.started.elapsed().as_millis(),
            outputs: self.written.clone(),
            fingerprint: fingerprint(config),
        };
        self.write_json(&format!("{command}_manifest.json"), &manifest)
    }
}
