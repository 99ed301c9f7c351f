//! Run directories: advisory lock, content hashes and the run manifest.
//!
//! A finished run leaves `run.json` naming its inputs, configuration and
//! every artifact with a SHA-256. Re-running with the same key and intact
//! artifacts is a no-op; a different key or a damaged artifact is refused.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tokvla_core::train::sha256_hex;

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "run.json";
pub const LOCK_FILE: &str = ".lock";
pub const ROOT_ENV: &str = "UNIVLA_RUN_DIR";

/// Output location for `out`: absolute paths are kept, relative ones are
/// placed under `$UNIVLA_RUN_DIR` when it is set.
pub fn resolve_out(out: &Path) -> PathBuf {
    if out.is_absolute() {
        return out.to_path_buf();
    }
    match std::env::var_os(ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => CliError::Core(tokvla_core::Error::NotFound(path.display().to_string())),
        _ => CliError::Core(tokvla_core::Error::Io { path: path.into(), source: e }),
    })
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read(path)?))
}

/// Hash of a directory's regular files, excluding run bookkeeping: names and
/// contents in name order.
pub fn hash_dir(dir: &Path) -> Result<String> {
    let entries = fs::read_dir(dir).map_err(|e| match e.kind() {
        ErrorKind::NotFound => CliError::Core(tokvla_core::Error::NotFound(dir.display().to_string())),
        _ => CliError::Core(tokvla_core::Error::Io { path: dir.into(), source: e }),
    })?;
    let mut names: Vec<String> = Vec::new();
    for e in entries {
        let e = e.map_err(|e| CliError::io(dir, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if e.path().is_file() && name != MANIFEST_FILE && name != LOCK_FILE {
            names.push(name);
        }
    }
    names.sort();
    let mut acc = String::new();
    for n in names {
        acc.push_str(&format!("{n}\t{}\n", hash_file(&dir.join(&n))?));
    }
    Ok(sha256_hex(acc.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Input {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Hash of command, arguments, configuration, inputs and version.
    pub run_id: String,
    pub command: String,
    pub args: serde_json::Value,
    pub config: serde_json::Value,
    pub inputs: Vec<Input>,
    pub checkpoints: Vec<Artifact>,
    pub metrics: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub version: String,
}

impl RunManifest {
    pub fn artifacts(&self) -> impl Iterator<Item = &Artifact> {
        self.checkpoints.iter().chain(&self.metrics).chain(&self.outputs)
    }
}

pub fn run_id(command: &str, args: &serde_json::Value, config: &serde_json::Value, inputs: &[Input]) -> String {
    let key = serde_json::json!({
        "command": command,
        "args": args,
        "config": config,
        "inputs": inputs,
        "version": env!("CARGO_PKG_VERSION"),
    });
    sha256_hex(key.to_string().as_bytes())
}

/// Exclusive use of a run directory for the lifetime of the value.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn lock(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
        let lock = path.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(Self { path: path.to_path_buf(), lock }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(CliError::Locked(path.to_path_buf())),
            Err(e) => Err(CliError::io(&lock, e)),
        }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// The completed run with this id, verified; `None` when the directory
    /// holds no finished run.
    pub fn completed(&self, run_id: &str) -> Result<Option<RunManifest>> {
        let path = self.file(MANIFEST_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(CliError::io(&path, e)),
        };
        let m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Refused { path: path.clone(), reason: format!("unreadable manifest: {e}") })?;
        if m.run_id != run_id {
            return Err(CliError::Refused {
                path: self.path.clone(),
                reason: format!(
                    "it holds run {} of `{}` with different inputs or settings",
                    m.run_id.get(..12).unwrap_or(&m.run_id),
                    m.command
                ),
            });
        }
        for a in m.artifacts() {
            let p = self.path.join(&a.path);
            let ok = hash_file(&p).map(|h| h == a.sha256).unwrap_or(false);
            if !ok {
                return Err(CliError::Refused {
                    path: p,
                    reason: "artifact is missing or does not match its recorded hash".into(),
                });
            }
        }
        Ok(Some(m))
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.file(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    pub fn artifact(&self, rel: &str) -> Result<Artifact> {
        Ok(Artifact { path: PathBuf::from(rel), sha256: hash_file(&self.file(rel))? })
    }

    pub fn finish(&self, manifest: &RunManifest) -> Result<()> {
        let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        self.write(MANIFEST_FILE, format!("{text}\n").as_bytes())?;
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}
