//! Run manifest: config echo, per-stage content hashes, the partition hash
//! recorded at `prepare`, and wall-clock timings kept apart from the hashed
//! content.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use icurisk::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Relative path (or external path as given) to sha256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: u32,
    pub software_version: String,
    pub config: serde_json::Value,
    pub partition_hash: Option<String>,
    pub stages: BTreeMap<String, StageRecord>,
    /// Digest of everything above; equal across reruns of the same config.
    pub content_hash: String,
    /// Seconds per stage. Not part of `content_hash`.
    pub timings: BTreeMap<String, f64>,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(sha256_bytes(&bytes))
}

/// Hashes of every file under `dir`, keyed by path relative to `root`.
pub fn hash_tree(root: &Path, dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Data(format!("walking {}: {e}", dir.display())))?;
        if entry.file_type().is_file() {
            out.insert(relative(root, entry.path()), sha256_file(entry.path())?);
        }
    }
    Ok(out)
}

pub fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

impl RunManifest {
    pub fn new(config: serde_json::Value) -> Self {
        let mut m = RunManifest {
            format: MANIFEST_FORMAT,
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            partition_hash: None,
            stages: BTreeMap::new(),
            content_hash: String::new(),
            timings: BTreeMap::new(),
        };
        m.content_hash = m.digest();
        m
    }

    pub fn digest(&self) -> String {
        let body = serde_json::json!({
            "format": self.format,
            "software_version": self.software_version,
            "config": self.config,
            "partition_hash": self.partition_hash,
            "stages": self.stages,
        });
        sha256_bytes(body.to_string().as_bytes())
    }

    pub fn path(out: &Path) -> PathBuf {
        out.join(MANIFEST_FILE)
    }

    /// Loads the manifest in `out`, or starts a fresh one.
    pub fn open(out: &Path, config: serde_json::Value) -> Result<Self> {
        let p = Self::path(out);
        if !p.exists() {
            return Ok(Self::new(config));
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
        let mut m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: p.clone(),
            line: e.line() as u64,
            reason: e.to_string(),
        })?;
        m.config = config;
        Ok(m)
    }

    pub fn record(&mut self, stage: &str, record: StageRecord, seconds: f64) {
        self.stages.insert(stage.to_string(), record);
        self.timings.insert(stage.to_string(), seconds);
    }

    pub fn save(&mut self, out: &Path) -> Result<()> {
        self.content_hash = self.digest();
        let p = Self::path(out);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(&p, text + "\n").map_err(|e| Error::Io { path: p, source: e })
    }

    /// Fails unless the partition file still hashes to the recorded value.
    pub fn check_partition(&self, partition_file: &Path) -> Result<()> {
        let recorded = self
            .partition_hash
            .as_deref()
            .ok_or_else(|| Error::Precondition("no partition recorded; run `prepare` first".into()))?;
        let actual = sha256_file(partition_file)?;
        if actual != recorded {
            return Err(Error::Precondition(format!(
                "train/test partition changed since prepare (recorded {recorded}, found {actual})"
            )));
        }
        Ok(())
    }
}
