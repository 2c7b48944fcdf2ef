//! Artifact writers.
//!
//! Data files are a pure function of the resolved configuration: CSV files
//! start with `#` header lines holding the tool version, the command and the
//! configuration as JSON; JSON files wrap the result in the same header
//! fields. Wall-clock information goes to a `.meta.json` sidecar only.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::json;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// `run.csv` -> `run.csv.<suffix>`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".");
    name.push(suffix);
    PathBuf::from(name)
}

fn header_json(command: &str, config: &impl Serialize) -> serde_json::Value {
    json!({ "tool": "hwdiff", "version": VERSION, "command": command, "config": config })
}

pub fn write_json(path: &Path, command: &str, config: &impl Serialize, result: &impl Serialize) -> io::Result<()> {
    let mut doc = header_json(command, config);
    doc["result"] = serde_json::to_value(result).map_err(io::Error::other)?;
    let mut text = serde_json::to_string_pretty(&doc).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

/// Plain JSON document without the header (for sidecars).
pub fn write_plain_json(path: &Path, value: &impl Serialize) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

/// Incrementally written CSV so checkpoint rows survive interruption.
pub struct CsvWriter {
    file: io::BufWriter<fs::File>,
}

impl CsvWriter {
    pub fn create(path: &Path, command: &str, config: &impl Serialize, columns: &[String]) -> io::Result<Self> {
        use io::Write;
        let mut file = io::BufWriter::new(fs::File::create(path)?);
        writeln!(file, "# hwdiff {VERSION}")?;
        writeln!(file, "# command {command}")?;
        let cfg = serde_json::to_string(config).map_err(io::Error::other)?;
        writeln!(file, "# config {cfg}")?;
        writeln!(file, "{}", columns.join(","))?;
        Ok(CsvWriter { file })
    }

    pub fn row(&mut self, cells: &[String]) -> io::Result<()> {
        use io::Write;
        writeln!(self.file, "{}", cells.join(","))?;
        self.file.flush()
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_meta(path: &Path, argv: &[String], started: SystemTime, elapsed: Duration, threads: usize) -> io::Result<()> {
    let secs = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let doc = json!({
        "tool": "hwdiff",
        "version": VERSION,
        "argv": argv,
        "started_unix": secs(started),
        "finished_unix": secs(started + elapsed),
        "elapsed_seconds": elapsed.as_secs_f64(),
        "threads": threads,
    });
    write_plain_json(&sidecar(path, "meta.json"), &doc)
}
