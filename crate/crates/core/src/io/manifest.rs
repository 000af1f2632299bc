use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::IoError;

pub const MANIFEST_VERSION: u32 = 1;

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

/// Git-style object id: SHA-256 over `blob <len>\0` followed by the content.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path) -> Result<Self, IoError> {
        Ok(Self { path: path.display().to_string(), sha256: sha256_file(path)? })
    }
}

/// Record of one command invocation and every file it read or wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: u32,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_hash: Option<String>,
    /// Seconds since the Unix epoch.
    pub started: u64,
    pub finished: u64,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn start(command: &str, config: serde_json::Value) -> Self {
        let t = now();
        Self {
            version: MANIFEST_VERSION,
            command: command.to_string(),
            config,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            checkpoint_hash: None,
            started: t,
            finished: t,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), IoError> {
        self.inputs.push(FileHash::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), IoError> {
        self.outputs.push(FileHash::of(path)?);
        Ok(())
    }

    pub fn checkpoint(&mut self, path: &Path) -> Result<(), IoError> {
        let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
        self.checkpoint_hash = Some(blob_hash(&bytes));
        Ok(())
    }

    pub fn finish(&mut self, path: &Path) -> Result<(), IoError> {
        self.finished = now();
        super::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let m: Self = super::read_json(path)?;
        if m.version != MANIFEST_VERSION {
            return Err(IoError::format(path, format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }
}
