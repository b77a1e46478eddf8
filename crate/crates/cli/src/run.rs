//! Output directories: `<out>/<run-id>/{manifest.json, config.toml,
//! checkpoints, logs, results}`, owned by one process at a time.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use kadp::artifact::{hash_file, hash_json};
use kadp::error::{Error, Result};
use serde::Serialize;

use crate::config::{Provenance, RunConfig};

pub const LOCK_FILE: &str = ".lock";

/// A file the run read, with its content hash.
#[derive(Debug, Clone, Serialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

pub fn input(path: &Path) -> Result<InputRecord> {
    Ok(InputRecord {
        path: path.to_path_buf(),
        sha256: hash_file(path)?,
    })
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    code_version: &'a str,
    seed: u64,
    config: &'a RunConfig,
    provenance: &'a Provenance,
    inputs: &'a BTreeMap<String, InputRecord>,
    /// Paths relative to the run directory.
    outputs: BTreeMap<String, String>,
}

/// Default run id: the command and a hash of everything that determines
/// its outputs.
pub fn default_run_id(command: &str, cfg: &RunConfig, inputs: &BTreeMap<String, InputRecord>, extra: &str) -> String {
    let hashes: BTreeMap<&String, &String> = inputs.iter().map(|(k, v)| (k, &v.sha256)).collect();
    let h = hash_json(&(command, cfg, hashes, extra, kadp::eval::CODE_VERSION));
    format!("{command}-{}", &h[..12])
}

pub struct RunDir {
    pub root: PathBuf,
    lock: PathBuf,
    outputs: Vec<PathBuf>,
}

impl RunDir {
    /// Create the directory tree and take its lock.
    pub fn open(out: &Path, run_id: &str) -> Result<Self> {
        let root = out.join(run_id);
        for sub in ["checkpoints", "logs", "results"] {
            let d = root.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let lock = root.join(LOCK_FILE);
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = std::fs::read_to_string(&lock).unwrap_or_default();
                return Err(Error::io(
                    &lock,
                    std::io::Error::new(
                        e.kind(),
                        format!(
                            "run directory is in use by process {}; delete the lockfile if that run is gone",
                            holder.trim()
                        ),
                    ),
                ));
            }
            Err(e) => return Err(Error::io(&lock, e)),
        }
        log::info!("run directory {}", root.display());
        Ok(RunDir {
            root,
            lock,
            outputs: Vec::new(),
        })
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(name)
    }

    pub fn result(&self, name: &str) -> PathBuf {
        self.root.join("results").join(name)
    }

    /// Record a produced file in the manifest.
    pub fn produced(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    /// Write the config snapshot and manifest.
    pub fn finish(
        &self,
        command: &str,
        cfg: &RunConfig,
        provenance: &Provenance,
        inputs: &BTreeMap<String, InputRecord>,
    ) -> Result<()> {
        let snapshot = self.root.join("config.toml");
        std::fs::write(&snapshot, cfg.to_toml()?).map_err(|e| Error::io(&snapshot, e))?;
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            let rel = p.strip_prefix(&self.root).unwrap_or(p).display().to_string();
            outputs.insert(rel, hash_file(p)?);
        }
        let m = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            code_version: kadp::eval::CODE_VERSION,
            seed: cfg.seed,
            config: cfg,
            provenance,
            inputs,
            outputs,
        };
        let path = self.root.join("manifest.json");
        let text = serde_json::to_string_pretty(&m)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}
