//! Run manifests: what a command was given, so a result can be traced back
//! to its inputs and a modified input is caught before it is reused.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::Settings;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

pub const VERSION: &str = env!("FOAM_VERSION");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub mode: Option<String>,
    /// Effective configuration, flat dotted keys.
    pub config: BTreeMap<String, Value>,
    pub files: Vec<FileHash>,
    pub started_at: String,
    pub finished_at: Option<String>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut f = fs::File::open(path)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f
            .read(&mut buf)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl RunManifest {
    pub fn new(
        command: &str,
        settings: &Settings,
        mode: Option<&str>,
        files: &[PathBuf],
    ) -> Result<Self, CliError> {
        let mut hashes = Vec::with_capacity(files.len());
        for p in files {
            let abs = fs::canonicalize(p)
                .map_err(|e| CliError::Data(format!("cannot resolve {}: {e}", p.display())))?;
            let sha256 = sha256_file(&abs)?;
            hashes.push(FileHash { path: abs, sha256 });
        }
        Ok(Self {
            command: command.to_string(),
            version: VERSION.to_string(),
            seed: settings.seed,
            mode: mode.map(str::to_string),
            config: settings.flat().clone(),
            files: hashes,
            started_at: now(),
            finished_at: None,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(dir.join(MANIFEST_FILE), text + "\n")
            .map_err(|e| CliError::Data(format!("cannot write manifest in {}: {e}", dir.display())))
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    /// Recomputes every input hash.
    pub fn verify(&self) -> Result<(), CliError> {
        for f in &self.files {
            let now = sha256_file(&f.path)?;
            if now != f.sha256 {
                return Err(CliError::Data(format!(
                    "{} changed since it was recorded (sha256 {} != {})",
                    f.path.display(),
                    now,
                    f.sha256
                )));
            }
        }
        Ok(())
    }

    pub fn finish(&mut self, dir: &Path) -> Result<(), CliError> {
        self.finished_at = Some(now());
        self.write(dir)
    }

    pub fn settings(&self) -> Result<Settings, CliError> {
        Settings::from_flat(self.config.clone())
    }
}
