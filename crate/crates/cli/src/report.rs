//! Output directory handling: JSON summary, CSV tables, JSON lines.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

pub struct Output {
    dir: PathBuf,
    reproducible: bool,
    started: Instant,
}

impl Output {
    pub fn create(dir: &Path, reproducible: bool) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            reproducible,
            started: Instant::now(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn subdir(&self, name: &str) -> CliResult<PathBuf> {
        let p = self.path(name);
        std::fs::create_dir_all(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        write_file(&self.path(name), bytes.as_ref())
    }

    pub fn write_config(&self, cfg: &ExperimentConfig) -> CliResult<()> {
        self.write("config.toml", cfg.to_toml())
    }

    pub fn write_csv<S: Serialize>(&self, name: &str, rows: &[S]) -> CliResult<()> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        for r in rows {
            w.serialize(r).map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))
    }

    pub fn jsonl(&self, name: &str) -> CliResult<JsonLines> {
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(JsonLines {
            path,
            out: BufWriter::new(file),
        })
    }

    /// Writes `summary.json`. Wall-clock fields are left out when the run
    /// is marked reproducible.
    pub fn summary(&self, command: &str, seed: u64, results: Value) -> CliResult<()> {
        let mut doc = json!({
            "schema": SCHEMA_VERSION,
            "command": command,
            "seed": seed,
            "version": env!("CARGO_PKG_VERSION"),
            "results": results,
        });
        if !self.reproducible {
            let now = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            doc["created_unix"] = json!(now);
            doc["elapsed_seconds"] = json!(self.started.elapsed().as_secs_f64());
        }
        let mut text = serde_json::to_string_pretty(&doc).expect("summary serializes");
        text.push('\n');
        self.write("summary.json", text)
    }
}

pub struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn push<S: Serialize>(&mut self, record: &S) -> CliResult<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.out, "{line}").map_err(|e| CliError::io(&self.path, e))
    }

    pub fn finish(mut self) -> CliResult<()> {
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::io(path, std::io::Error::other(e.to_string()))
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_mean() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(mean(&[1.0, 2.0, 6.0]), 3.0);
    }
}
