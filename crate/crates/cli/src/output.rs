//! Output directory handling: reports, tables, binary artifacts and the
//! hash manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::config::OutputFormat;
use crate::Failure;

pub const MANIFEST: &str = "manifest.json";
pub const REPORT: &str = "report.json";

/// Files a previous run in the same directory may have left behind.
const STALE: [&str; 3] = [MANIFEST, "error.json", "manifest.json.tmp"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub exit_code: i32,
    /// Resolved config with the command-line options.
    pub invocation: Value,
    pub started_at_unix: f64,
    pub wall_clock_seconds: f64,
    /// Per-module diagnostics of the run.
    pub diagnostics: Value,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A numeric table, written as CSV or embedded in the report.
#[derive(Debug, Clone)]
pub(crate) struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: &str, columns: Vec<String>) -> Self {
        Self { name: name.into(), columns, rows: Vec::new() }
    }

    fn csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    fn json(&self) -> Value {
        serde_json::json!({ "columns": self.columns, "rows": self.rows })
    }
}

/// Everything a command produces.
#[derive(Debug, Clone)]
pub(crate) struct Product {
    pub report: Value,
    pub tables: Vec<Table>,
    pub binaries: Vec<(String, Vec<u8>)>,
    pub sidecars: Vec<(String, Value)>,
    pub diagnostics: Value,
    /// Set when an iterative solver stopped before its tolerance.
    pub non_convergence: Option<String>,
}

impl Product {
    pub fn new(report: Value, diagnostics: Value) -> Self {
        Self { report, tables: Vec::new(), binaries: Vec::new(), sidecars: Vec::new(), diagnostics, non_convergence: None }
    }
}

pub(crate) struct Writer {
    dir: PathBuf,
    format: OutputFormat,
    entries: Vec<FileEntry>,
}

fn io(path: &Path, e: std::io::Error) -> Failure {
    Failure::Output(format!("{}: {e}", path.display()))
}

impl Writer {
    pub fn create(dir: &Path, format: OutputFormat) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        for name in STALE {
            let p = dir.join(name);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| io(&p, e))?;
            }
        }
        Ok(Self { dir: dir.to_path_buf(), format, entries: Vec::new() })
    }

    pub fn entries(&self) -> &[FileEntry] {
        &self.entries
    }

    pub fn bytes(&mut self, name: &str, data: &[u8]) -> Result<(), Failure> {
        let path = self.dir.join(name);
        fs::write(&path, data).map_err(|e| io(&path, e))?;
        self.entries.push(FileEntry { name: name.into(), bytes: data.len() as u64, sha256: sha256_hex(data) });
        Ok(())
    }

    pub fn json(&mut self, name: &str, value: &Value) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Output(e.to_string()))?;
        text.push('\n');
        self.bytes(name, text.as_bytes())
    }

    pub fn product(&mut self, product: Product) -> Result<(), Failure> {
        for (name, data) in &product.binaries {
            self.bytes(name, data)?;
        }
        for (name, value) in &product.sidecars {
            self.json(name, value)?;
        }
        let mut report = product.report;
        match self.format {
            OutputFormat::Csv => {
                for t in &product.tables {
                    self.bytes(&format!("{}.csv", t.name), t.csv().as_bytes())?;
                }
            }
            OutputFormat::Json => {
                let tables: Map<String, Value> = product.tables.iter().map(|t| (t.name.clone(), t.json())).collect();
                if let Value::Object(m) = &mut report {
                    m.insert("tables".into(), Value::Object(tables));
                }
            }
        }
        self.json(REPORT, &report)
    }

    /// Writes the manifest last, through a temporary file and a rename.
    pub fn finish(&self, manifest: &Manifest) -> Result<(), Failure> {
        let tmp = self.dir.join("manifest.json.tmp");
        let mut text = serde_json::to_string_pretty(manifest).map_err(|e| Failure::Output(e.to_string()))?;
        text.push('\n');
        fs::write(&tmp, text).map_err(|e| io(&tmp, e))?;
        let dest = self.dir.join(MANIFEST);
        fs::rename(&tmp, &dest).map_err(|e| io(&dest, e))
    }
}
