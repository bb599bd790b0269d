use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    pub fn of(path: impl Into<String>, bytes: &[u8]) -> Self {
        Self {
            path: path.into(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        }
    }
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: Option<FileDigest>,
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    pub inputs: Vec<FileDigest>,
    /// Every file written by the run except this manifest, relative to the
    /// output directory.
    pub artifacts: Vec<FileDigest>,
    /// Taken from `SOURCE_DATE_EPOCH` so that re-runs stay byte-identical.
    pub created_at: Option<u64>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config: None,
            seed: None,
            mode: None,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            created_at: std::env::var("SOURCE_DATE_EPOCH")
                .ok()
                .and_then(|v| v.trim().parse().ok()),
        }
    }
}

/// Collects outputs in a temporary directory beside `out` and moves them
/// into place only once the whole command has succeeded.
pub struct Staging {
    out: PathBuf,
    dir: TempDir,
    files: Vec<String>,
    pub manifest: RunManifest,
}

impl Staging {
    pub fn new(out: &Path, manifest: RunManifest) -> Result<Self> {
        let parent = match out.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("cannot create {}", parent.display()))?;
        let dir = tempfile::Builder::new()
            .prefix(".uamflow-staging-")
            .tempdir_in(&parent)
            .with_context(|| format!("cannot stage outputs in {}", parent.display()))?;
        Ok(Self {
            out: out.to_path_buf(),
            dir,
            files: Vec::new(),
            manifest,
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.path().join(name), bytes).with_context(|| format!("cannot write {name}"))?;
        self.manifest.artifacts.push(FileDigest::of(name, bytes));
        self.files.push(name.to_string());
        Ok(())
    }

    /// Writes the manifest and moves every staged file into the output
    /// directory. Returns the final paths.
    pub fn commit(mut self) -> Result<Vec<PathBuf>> {
        let mut manifest = serde_json::to_vec_pretty(&self.manifest)?;
        manifest.push(b'\n');
        fs::write(self.dir.path().join(MANIFEST_FILE), &manifest).context("cannot write manifest")?;
        self.files.push(MANIFEST_FILE.to_string());
        fs::create_dir_all(&self.out).with_context(|| format!("cannot create {}", self.out.display()))?;
        let mut written = Vec::with_capacity(self.files.len());
        for f in &self.files {
            let dest = self.out.join(f);
            fs::rename(self.dir.path().join(f), &dest).with_context(|| format!("cannot move {f} into place"))?;
            written.push(dest);
        }
        Ok(written)
    }
}

pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec(value)?;
    v.push(b'\n');
    Ok(v)
}
