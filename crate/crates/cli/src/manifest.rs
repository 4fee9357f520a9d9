//! Run directories and their manifests.
//!
//! A run lives in `<out>/<command>-<id>/`, where the id hashes the command and its full
//! parameter set. The manifest is written last through a rename, so a directory without a
//! manifest (or with status `failed`) marks an interrupted or failed run.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub params: Value,
    pub seeds: Vec<u64>,
    pub grid: Value,
    pub code_version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    /// File names relative to the run directory.
    pub outputs: Vec<String>,
    pub status: Status,
    pub diagnostics: Option<String>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Option<RunManifest>> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?))
    }
}

/// First 12 hex digits of the SHA-256 of `command` and the canonical JSON of `params`.
pub fn run_id(command: &str, params: &Value) -> String {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update([0]);
    h.update(serde_json::to_string(params).expect("JSON values always serialize").as_bytes());
    h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming {}", tmp.display()))?;
    Ok(())
}

/// An open run directory.
pub struct Run {
    pub id: String,
    pub dir: PathBuf,
    command: String,
    params: Value,
    seeds: Vec<u64>,
    grid: Value,
    started: f64,
    outputs: Vec<String>,
}

pub enum Prepared {
    /// A complete manifest with the same id exists and `--force` was not given.
    AlreadyComplete(PathBuf),
    Fresh(Run),
}

impl Run {
    pub fn prepare(out: &Path, command: &str, params: Value, seeds: Vec<u64>, grid: Value, force: bool) -> Result<Prepared> {
        let id = run_id(command, &params);
        let dir = out.join(format!("{command}-{id}"));
        if !force {
            if let Some(m) = RunManifest::read(&dir)? {
                if m.status == Status::Complete {
                    return Ok(Prepared::AlreadyComplete(dir));
                }
            }
        }
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let stale = dir.join(MANIFEST);
        if stale.exists() {
            fs::remove_file(&stale)?;
        }
        Ok(Prepared::Fresh(Run { id, dir, command: command.into(), params, seeds, grid, started: now(), outputs: Vec::new() }))
    }

    /// Path of an output file, recorded for the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn finish(self, status: Status, diagnostics: Option<String>) -> Result<RunManifest> {
        let outputs = self.outputs.into_iter().filter(|o| self.dir.join(o).exists()).collect();
        let manifest = RunManifest {
            run_id: self.id,
            command: self.command,
            params: self.params,
            seeds: self.seeds,
            grid: self.grid,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: self.started,
            finished_unix: now(),
            outputs,
            status,
            diagnostics,
        };
        write_atomic(&self.dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn run_id_depends_on_command_and_params_only() {
        let a = run_id("lse", &json!({"delta2": 0.7, "p": 3}));
        let b = run_id("lse", &json!({"p": 3, "delta2": 0.7}));
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        assert_ne!(a, run_id("phase", &json!({"delta2": 0.7, "p": 3})));
        assert_ne!(a, run_id("lse", &json!({"delta2": 0.71, "p": 3})));
    }

    #[test]
    fn completed_run_is_detected() {
        let out = tempfile::tempdir().unwrap();
        let Prepared::Fresh(mut run) = Run::prepare(out.path(), "x", json!({"a": 1}), vec![], json!(null), false).unwrap() else {
            panic!("fresh directory expected");
        };
        fs::write(run.output("t.csv"), "run_id\n").unwrap();
        let _ = run.output("missing.csv");
        let m = run.finish(Status::Complete, None).unwrap();
        assert_eq!(m.outputs, vec!["t.csv".to_string()]);
        assert!(matches!(
            Run::prepare(out.path(), "x", json!({"a": 1}), vec![], json!(null), false).unwrap(),
            Prepared::AlreadyComplete(_)
        ));
        assert!(matches!(Run::prepare(out.path(), "x", json!({"a": 1}), vec![], json!(null), true).unwrap(), Prepared::Fresh(_)));
    }
}
