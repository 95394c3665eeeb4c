//! Runs configured pipelines and writes their outputs with a manifest.
//!
//! Exit codes: 0 success, 2 invalid configuration or unwritable output,
//! 3 an iterative solver did not converge (outputs are still written),
//! 4 numerical failure.

pub mod config;

mod commands;
mod output;

use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

pub use config::{Command, OutputFormat, RunConfig};
pub use output::{sha256_hex, FileEntry, Manifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NON_CONVERGENCE: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error(transparent)]
    Core(#[from] rbsde_core::Error),
    #[error("cannot write outputs: {0}")]
    Output(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Core(e) if e.is_validation() => EXIT_VALIDATION,
            Failure::Core(rbsde_core::Error::Io(_)) | Failure::Output(_) => EXIT_VALIDATION,
            Failure::Core(_) => EXIT_NUMERICAL,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Core(rbsde_core::Error::Input(_)) => "input",
            Failure::Core(rbsde_core::Error::Config(_)) => "config",
            Failure::Core(rbsde_core::Error::IllPosed(_)) => "ill-posed",
            Failure::Core(rbsde_core::Error::Numerical(_)) => "numerical",
            Failure::Core(rbsde_core::Error::Ellipticity(_)) => "ellipticity",
            Failure::Core(rbsde_core::Error::Io(_)) | Failure::Output(_) => "io",
        }
    }
}

/// Command-line choices applied on top of the config file.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub command: Command,
    pub config: RunConfig,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub format: OutputFormat,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub exit_code: i32,
    pub out_dir: Option<PathBuf>,
    /// Human-readable error, for standard error.
    pub message: Option<String>,
}

/// Options echoed into the manifest beside the config.
#[derive(Debug, Serialize)]
struct Invocation<'a> {
    command: &'a str,
    threads: Option<usize>,
    format: OutputFormat,
    config: &'a RunConfig,
}

pub fn run(opts: RunOptions) -> Outcome {
    let started = Instant::now();
    let started_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
    let mut cfg = opts.config.clone();
    cfg.command = Some(opts.command);
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &opts.out {
        cfg.out = Some(out.clone());
    }
    let Some(dir) = cfg.out.clone() else {
        return Outcome { exit_code: EXIT_VALIDATION, out_dir: None, message: Some("no output directory: pass --out or set `out`".into()) };
    };
    let mut writer = match output::Writer::create(&dir, opts.format) {
        Ok(w) => w,
        Err(e) => return Outcome { exit_code: EXIT_VALIDATION, out_dir: Some(dir), message: Some(e.to_string()) },
    };

    let result = match opts.threads {
        Some(0) => Err(Failure::Core(rbsde_core::Error::Config("--threads must be at least 1".into()))),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| commands::execute(opts.command, &cfg)),
            Err(e) => Err(Failure::Output(format!("cannot start {n} threads: {e}"))),
        },
        None => commands::execute(opts.command, &cfg),
    };

    let (exit_code, message, diagnostics) = match result {
        Ok(product) => {
            let code = if product.non_convergence.is_some() { EXIT_NON_CONVERGENCE } else { EXIT_OK };
            let diagnostics = product.diagnostics.clone();
            let written = writer.product(product.clone());
            match (written, product.non_convergence) {
                (Err(e), _) => (e.exit_code(), Some(e.to_string()), diagnostics),
                (Ok(()), Some(msg)) => {
                    let err = json!({ "exit_code": code, "kind": "non-convergence", "message": msg });
                    let code = match writer.json("error.json", &err) {
                        Ok(()) => code,
                        Err(e) => e.exit_code(),
                    };
                    (code, Some(msg), diagnostics)
                }
                (Ok(()), None) => (code, None, diagnostics),
            }
        }
        Err(e) => {
            let code = e.exit_code();
            let err = json!({ "exit_code": code, "kind": e.kind(), "message": e.to_string() });
            // the manifest below still lists whatever was written
            let _ = writer.json("error.json", &err);
            (code, Some(e.to_string()), Value::Null)
        }
    };

    let invocation = Invocation { command: opts.command.name(), threads: opts.threads, format: opts.format, config: &cfg };
    let manifest = Manifest {
        tool: "rbsde".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        exit_code,
        invocation: serde_json::to_value(&invocation).unwrap_or(Value::Null),
        started_at_unix: started_at,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        diagnostics,
        files: writer.entries().to_vec(),
    };
    match writer.finish(&manifest) {
        Ok(()) => Outcome { exit_code, out_dir: Some(dir), message },
        Err(e) => Outcome { exit_code: e.exit_code(), out_dir: Some(dir), message: Some(e.to_string()) },
    }
}
