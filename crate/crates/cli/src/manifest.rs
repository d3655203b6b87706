//! Provenance manifests: content hashes of inputs and outputs, the resolved
//! config, the seed and the tool version.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const TOOL: &str = "driftmask";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub stage: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub fn sha256_file(path: &Path) -> CliResult<(String, u64)> {
    let mut f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        total += n as u64;
        h.update(&buf[..n]);
    }
    Ok((hex::encode(h.finalize()), total))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash entry labelled with `label` (a path as given, or relative to the
/// output directory, so manifests do not depend on where a run lives).
pub fn hash_entry(path: &Path, label: impl Into<String>) -> CliResult<FileHash> {
    let (sha256, bytes) = sha256_file(path)?;
    Ok(FileHash {
        path: label.into(),
        sha256,
        bytes,
    })
}

/// Tracks files written under an output directory.
#[derive(Debug)]
pub struct Outputs {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(root: impl Into<PathBuf>) -> CliResult<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| CliError::io(&root, e))?;
        Ok(Outputs { root, files: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Absolute path for `rel`, creating parent directories, recorded for
    /// the manifest.
    pub fn path(&mut self, rel: impl AsRef<Path>) -> CliResult<PathBuf> {
        let p = self.root.join(rel.as_ref());
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        self.files.push(rel.as_ref().to_path_buf());
        Ok(p)
    }

    pub fn write(&mut self, rel: impl AsRef<Path>, bytes: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.path(rel)?;
        std::fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: impl AsRef<Path>, value: &T) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text)
    }

    /// Hashes every recorded output (sorted, deduplicated) and writes the
    /// manifest as `<stage>.manifest.json`.
    pub fn finish(
        mut self,
        stage: &str,
        seed: u64,
        config: serde_json::Value,
        inputs: Vec<FileHash>,
    ) -> CliResult<Manifest> {
        self.files.sort();
        self.files.dedup();
        let outputs = self
            .files
            .iter()
            .filter(|rel| self.root.join(rel).exists())
            .map(|rel| hash_entry(&self.root.join(rel), rel.to_string_lossy().replace('\\', "/")))
            .collect::<CliResult<Vec<_>>>()?;
        let manifest = Manifest {
            tool: TOOL.into(),
            version: VERSION.into(),
            stage: stage.into(),
            seed,
            config,
            inputs,
            outputs,
        };
        let path = self.root.join(format!("{stage}.manifest.json"));
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}

/// Input entries for files passed on the command line.
pub fn inputs(paths: &[&Path]) -> CliResult<Vec<FileHash>> {
    paths
        .iter()
        .map(|p| hash_entry(p, p.to_string_lossy().into_owned()))
        .collect()
}
