use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// What was asked for, with every input path; enough to run it again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    GenData,
    PretrainTeacher {
        data: PathBuf,
    },
    Train {
        data: PathBuf,
        teacher: Option<PathBuf>,
    },
    Sample {
        model: PathBuf,
        /// Dataset for the readout probe; without it depth planes hold the sky sentinel.
        data: Option<PathBuf>,
    },
    Eval {
        generated: PathBuf,
        reference: PathBuf,
        teacher: Option<PathBuf>,
        model: Option<PathBuf>,
        data: Option<PathBuf>,
    },
    Ablate {
        preset: String,
        data: PathBuf,
        teacher: PathBuf,
        appearance_teacher: Option<PathBuf>,
    },
    Probe {
        model: PathBuf,
        model_b: Option<PathBuf>,
        random_baseline: bool,
        data: PathBuf,
    },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::PretrainTeacher { .. } => "pretrain-teacher",
            Self::Train { .. } => "train",
            Self::Sample { .. } => "sample",
            Self::Eval { .. } => "eval",
            Self::Ablate { .. } => "ablate",
            Self::Probe { .. } => "probe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub role: String,
    /// Inputs as given; outputs relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub invocation: Invocation,
    /// Fully resolved `key = value` text.
    pub config: String,
    pub config_hash: String,
    pub seed: u64,
    pub checked: bool,
    pub inputs: Vec<FileRef>,
    pub outputs: Vec<FileRef>,
    pub started: u64,
    pub finished: u64,
    pub versions: BTreeMap<String, String>,
    pub notes: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn output(&self, role: &str) -> Option<&FileRef> {
        self.outputs.iter().find(|f| f.role == role)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("gf-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("gf-core".to_string(), gf_core::VERSION.to_string()),
        ("gf-numerics".to_string(), gf_numerics::VERSION.to_string()),
    ])
}

/// Files read and written by one command.
#[derive(Debug)]
pub struct Artifacts {
    out: PathBuf,
    pub inputs: Vec<FileRef>,
    pub outputs: Vec<FileRef>,
    pub notes: BTreeMap<String, String>,
}

impl Artifacts {
    pub fn new(out: &Path) -> Self {
        Self {
            out: out.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    /// Reads and records an input file.
    pub fn read_input(&mut self, role: &str, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.inputs.push(FileRef {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    /// Writes `bytes` to `name` under the run directory; refuses to overwrite.
    pub fn write_output(&mut self, role: &str, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(name);
        if path.exists() {
            return Err(CliError::Usage(format!("refusing to overwrite {}", path.display())));
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.outputs.push(FileRef {
            role: role.to_string(),
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    /// Records a file written by a nested command (its manifest).
    pub fn adopt_output(&mut self, role: &str, name: &str) -> Result<()> {
        let path = self.out.join(name);
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        self.outputs.push(FileRef {
            role: role.to_string(),
            path: name.to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.notes.insert(key.to_string(), value.to_string());
    }
}
