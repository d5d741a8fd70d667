//! Run directories. Each directory belongs to exactly one configuration:
//! `run.json` records the digest of the config file it was created for and a
//! later command with a different config is refused rather than mixing
//! artifacts. Every artifact is listed in `manifest.json` with its checksum
//! and the digest of the effective (flag-adjusted) config that produced it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const RUN_FILE: &str = "run.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_digest: String,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sha256: String,
    pub command: String,
    pub config_digest: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub artifacts: BTreeMap<String, ManifestEntry>,
}

fn read_record(dir: &Path) -> Result<Option<RunRecord>, CliError> {
    let path = dir.join(RUN_FILE);
    match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::RunDir(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(CliError::io(&path, e)),
    }
}

fn check_record(dir: &Path, record: &RunRecord, digest: &str) -> Result<(), CliError> {
    if record.config_digest != digest {
        return Err(CliError::RunDir(format!(
            "{} was created for config {} but this config digests to {}; pick another --run-dir",
            dir.display(),
            &record.config_digest[..12.min(record.config_digest.len())],
            &digest[..12]
        )));
    }
    Ok(())
}

/// Open `dir` for `config`, creating it atomically if it does not exist.
pub fn prepare(dir: &Path, config: &RunConfig) -> Result<(), CliError> {
    let digest = config.digest();
    let record = RunRecord {
        config_digest: digest.clone(),
        config: config.digested_view(),
    };
    if dir.exists() {
        return match read_record(dir)? {
            Some(existing) => check_record(dir, &existing, &digest),
            None if fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?.next().is_none() => {
                write_atomic(&dir.join(RUN_FILE), &pretty(&record))
            }
            None => Err(CliError::RunDir(format!(
                "{} exists, is not empty and has no {RUN_FILE}; refusing to write into it",
                dir.display()
            ))),
        };
    }
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("run");
    let staging = parent.join(format!(".{name}.staging-{}", std::process::id()));
    let _ = fs::remove_dir_all(&staging);
    fs::create_dir(&staging).map_err(|e| CliError::io(&staging, e))?;
    fs::write(staging.join(RUN_FILE), pretty(&record)).map_err(|e| CliError::io(&staging, e))?;
    if let Err(e) = fs::rename(&staging, dir) {
        let _ = fs::remove_dir_all(&staging);
        // somebody else created it first; accept it only if it is ours
        return match read_record(dir)? {
            Some(existing) => check_record(dir, &existing, &digest),
            None => Err(CliError::io(dir, e)),
        };
    }
    Ok(())
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("artifact serializes") + "\n"
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    fs::write(&tmp, contents).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes artifacts into one run directory.
pub struct RunDir {
    pub path: PathBuf,
    /// Digest of the config file; owns the directory.
    pub base_digest: String,
    /// Digest after flag overrides; stamped on every artifact.
    pub digest: String,
    pub command: String,
}

impl RunDir {
    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Write `contents` to `name` and record it in the manifest.
    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let path = self.file(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        write_atomic(&path, contents)?;
        self.record(name, contents.as_bytes())?;
        Ok(path)
    }

    /// JSON artifact with a top-level `config_digest` field.
    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut value = serde_json::to_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(map) = value.as_object_mut() {
            map.insert("config_digest".into(), serde_json::Value::String(self.digest.clone()));
        }
        self.write(name, &pretty(&value))
    }

    fn record(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.file(MANIFEST_FILE);
        let mut manifest: Manifest = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| CliError::RunDir(format!("{}: {e}", path.display())))?,
            Err(_) => Manifest {
                config_digest: self.base_digest.clone(),
                ..Default::default()
            },
        };
        manifest.artifacts.insert(
            name.to_string(),
            ManifestEntry {
                sha256: sha256_hex(bytes),
                command: self.command.clone(),
                config_digest: self.digest.clone(),
            },
        );
        write_atomic(&path, &pretty(&manifest))
    }
}
