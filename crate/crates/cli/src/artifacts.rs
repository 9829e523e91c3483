//! Output directory handling and the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

/// Files excluded from checksums because their content depends on the clock.
pub const VOLATILE: &[&str] = &["timings.json"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    /// Arguments that reproduce the run, output directory excluded.
    pub args: Vec<String>,
    pub dataset_dir: Option<PathBuf>,
    pub config: Option<serde_json::Value>,
    pub seed: Option<u64>,
    /// sha256 of every artifact, keyed by path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
}

/// Artifacts buffered in memory and written together with the manifest, so a
/// failed invocation leaves nothing behind unless it got as far as training.
pub struct Outputs {
    dir: PathBuf,
    files: BTreeMap<String, Vec<u8>>,
    on_disk: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Outputs {
    pub fn new(dir: &Path) -> Self {
        Outputs {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
            on_disk: Vec::new(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn add(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.insert(name.to_string(), bytes.into());
    }

    pub fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.add(name, text);
        Ok(())
    }

    /// Creates (and empties) a subdirectory that a library routine writes into
    /// directly; its files are checksummed at [`Outputs::finish`].
    pub fn direct_subdir(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if path.exists() {
            std::fs::remove_dir_all(&path).with_context(|| format!("clearing {}", path.display()))?;
        }
        std::fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        self.on_disk.push(name.to_string());
        Ok(path)
    }

    /// Records a file some other routine already wrote into the output directory.
    pub fn register_existing(&mut self, name: &str) {
        self.on_disk.push(name.to_string());
    }

    /// Writes every buffered file plus `manifest.json` and returns the paths
    /// written.
    pub fn finish(self, mut manifest: Manifest) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        let mut written = Vec::new();
        for (name, bytes) in &self.files {
            let path = self.dir.join(name);
            std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
            if !VOLATILE.contains(&name.as_str()) {
                manifest.artifacts.insert(name.clone(), sha256_hex(bytes));
            }
            written.push(path);
        }
        for rel in &self.on_disk {
            let root = self.dir.join(rel);
            let mut entries: Vec<(String, PathBuf)> = if root.is_dir() {
                std::fs::read_dir(&root)?
                    .map(|e| e.map(|e| (format!("{rel}/{}", e.file_name().to_string_lossy()), e.path())))
                    .collect::<std::io::Result<_>>()?
            } else {
                vec![(rel.clone(), root)]
            };
            entries.sort();
            for (name, path) in entries {
                let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                manifest.artifacts.insert(name, sha256_hex(&bytes));
                written.push(path);
            }
        }
        let path = self.dir.join(MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
        Ok(written)
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
