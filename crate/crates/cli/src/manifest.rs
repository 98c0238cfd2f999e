//! Content hashes of outputs and the per-directory run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliResult;

pub const MANIFEST_NAME: &str = "manifest.toml";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> CliResult<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Every regular file below `root`, as sorted `/`-separated relative paths.
pub fn list_files(root: &Path) -> CliResult<Vec<String>> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                walk(&p, root, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("below root");
                out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    if root.is_dir() {
        walk(root, root, &mut out)?;
    }
    out.sort();
    Ok(out)
}

/// Hash of a directory tree: sha256 over `path\0hash\n` lines in path order.
pub fn tree_hash(root: &Path) -> CliResult<String> {
    let mut h = Sha256::new();
    for rel in list_files(root)? {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(file_hash(&root.join(&rel))?.as_bytes());
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub command: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub dataset_hash: Option<String>,
    #[serde(default)]
    pub timings: Vec<Timing>,
    #[serde(default)]
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub fn path(out: &Path) -> PathBuf {
        out.join(MANIFEST_NAME)
    }

    pub fn read(out: &Path) -> CliResult<Option<Self>> {
        let p = Self::path(out);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p)?;
        let m = toml::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))?;
        Ok(Some(m))
    }

    /// Re-lists every file under `out`, appends a timing and rewrites the
    /// manifest. Earlier timings are kept.
    pub fn refresh(out: &Path, config_hash: &str, dataset_hash: Option<String>, timing: Timing) -> CliResult<Self> {
        let mut timings = Self::read(out)?.map(|m| m.timings).unwrap_or_default();
        timings.push(timing);
        let mut files = Vec::new();
        for rel in list_files(out)? {
            if rel == MANIFEST_NAME {
                continue;
            }
            let p = out.join(&rel);
            files.push(FileEntry {
                sha256: file_hash(&p)?,
                bytes: fs::metadata(&p)?.len(),
                path: rel,
            });
        }
        let m = Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            dataset_hash,
            timings,
            files,
        };
        fs::write(Self::path(out), toml::to_string(&m).expect("manifest serializes"))?;
        Ok(m)
    }
}
