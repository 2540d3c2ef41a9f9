//! Per-invocation bookkeeping: atomic artifact writes and the run manifest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use dissent_core::seed;

use crate::error::{CliError, ErrorKind, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestError {
    pub kind: ErrorKind,
    pub exit_code: i32,
    pub message: String,
}

/// Everything needed to reproduce a run, plus what it produced.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Short content hash over tool version, resolved config (minus the output
    /// location) and input digests.
    pub artifact_version: String,
    pub status: String,
    pub error: Option<ManifestError>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, FileDigest>,
    pub outputs: BTreeMap<String, String>,
    pub counters: BTreeMap<String, f64>,
    pub notes: Vec<String>,
    pub started_at_unix_ms: u128,
    pub finished_at_unix_ms: u128,
    pub wall_seconds: f64,
    pub timings: BTreeMap<String, Vec<f64>>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| CliError::runtime(format!("cannot create a temporary file in {}: {e}", dir.display())))?;
    tmp.write_all(bytes)
        .and_then(|_| tmp.as_file().sync_all())
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?;
    tmp.persist(path).map_err(|e| CliError::runtime(format!("cannot move into {}: {e}", path.display())))?;
    Ok(())
}

pub struct Run {
    pub out_dir: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl Run {
    pub fn new(command: &str, out_dir: PathBuf) -> Self {
        Self {
            out_dir,
            manifest: RunManifest {
                command: command.to_string(),
                tool_version: format!("dissent {}", env!("CARGO_PKG_VERSION")),
                artifact_version: String::new(),
                status: "running".into(),
                error: None,
                config: serde_json::Value::Null,
                seeds: BTreeMap::new(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                counters: BTreeMap::new(),
                notes: Vec::new(),
                started_at_unix_ms: now_ms(),
                finished_at_unix_ms: 0,
                wall_seconds: 0.0,
                timings: BTreeMap::new(),
            },
            started: Instant::now(),
        }
    }

    pub fn set_config(&mut self, config: serde_json::Value) {
        self.manifest.config = config;
    }

    /// Records the master seed and the named streams derived from it.
    pub fn set_seed(&mut self, master: u64) {
        self.manifest.seeds.insert("master".into(), master);
        for name in [seed::SPLIT, seed::INIT, seed::NOISE, seed::SHUFFLE, seed::BOOTSTRAP, seed::GENERATION, seed::CLUSTER, seed::BASELINE] {
            self.manifest.seeds.insert(name.into(), seed::derive(master, name));
        }
    }

    /// Reads an input file and records its digest under `name`.
    pub fn read(&mut self, name: &str, path: &Path) -> Result<String> {
        let bytes = std::fs::read(path).map_err(|e| CliError::validation(format!("{name}: cannot read {}: {e}", path.display())))?;
        self.manifest.inputs.insert(name.into(), FileDigest { path: path.display().to_string(), sha256: sha256_hex(&bytes) });
        String::from_utf8(bytes).map_err(|_| CliError::validation(format!("{name}: {} is not UTF-8", path.display())))
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        write_atomic(&path, bytes)?;
        self.manifest.outputs.insert(name.into(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn write_csv<S: AsRef<str>>(&mut self, name: &str, header: &[S], rows: &[Vec<String>]) -> Result<PathBuf> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| CliError::runtime(e.to_string());
        w.write_record(header.iter().map(|h| h.as_ref())).map_err(csv_err)?;
        for r in rows {
            w.write_record(r).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::runtime(e.to_string()))?;
        self.write(name, &bytes)
    }

    pub fn count(&mut self, name: &str, value: f64) {
        self.manifest.counters.insert(name.into(), value);
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.manifest.notes.push(note.into());
    }

    pub fn timing(&mut self, name: &str, seconds: Vec<f64>) {
        self.manifest.timings.insert(name.into(), seconds);
    }

    /// Finalizes and writes the manifest; called on success and on failure.
    pub fn finish(mut self, outcome: &Result<()>) -> Result<RunManifest> {
        let m = &mut self.manifest;
        m.finished_at_unix_ms = now_ms();
        m.wall_seconds = self.started.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => m.status = "ok".into(),
            Err(e) => {
                m.status = "failed".into();
                m.error = Some(ManifestError { kind: e.kind, exit_code: e.exit_code(), message: e.message.clone() });
            }
        }
        let mut h = Sha256::new();
        h.update(m.tool_version.as_bytes());
        let mut config = m.config.clone();
        if let Some(obj) = config.as_object_mut() {
            obj.remove("output");
        }
        h.update(serde_json::to_vec(&config).unwrap_or_default());
        for (name, d) in &m.inputs {
            h.update(name.as_bytes());
            h.update(d.sha256.as_bytes());
        }
        m.artifact_version = format!("{}+{}", env!("CARGO_PKG_VERSION"), &hex::encode(h.finalize())[..12]);
        let mut text = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::runtime(e.to_string()))?;
        text.push('\n');
        write_atomic(&self.out_dir.join(MANIFEST), text.as_bytes())?;
        Ok(self.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn manifest_written_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::new("stats", dir.path().to_path_buf());
        run.set_seed(4);
        run.write("x.txt", b"hello").unwrap();
        let m = run.finish(&Err(CliError::validation("bad"))).unwrap();
        assert_eq!(m.status, "failed");
        assert_eq!(m.error.as_ref().unwrap().exit_code, 1);
        assert_eq!(m.outputs["x.txt"], sha256_hex(b"hello"));
        assert_eq!(m.seeds["split"], seed::derive(4, "split"));
        let text = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(text.contains("\"failed\""));
    }
}
