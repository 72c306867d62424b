//! Per-output-directory record of how its files were produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: BTreeMap<String, String>,
    /// Hash over every input digest.
    pub input_hash: String,
    pub inputs: Vec<InputDigest>,
    pub started: String,
    pub finished: String,
    /// Paths relative to the output directory, sorted.
    pub outputs: Vec<String>,
}

/// RFC 3339 UTC timestamp with second precision.
pub fn timestamp(t: SystemTime) -> String {
    humantime::format_rfc3339_seconds(t).to_string()
}

/// Hash of a file's bytes with a git-style `blob <len>\0` header.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a file, or of a directory as the sorted list of its files'
/// relative paths and blob hashes (manifests excluded).
pub fn content_hash(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut files = Vec::new();
        walk(path, &mut files)?;
        files.sort();
        let mut h = Sha256::new();
        for (rel, digest) in files {
            h.update(format!("{digest} {rel}\n").as_bytes());
        }
        Ok(hex(&h.finalize()))
    } else {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(blob_hash(&bytes))
    }
}

/// Every file below `dir`, in sorted path order.
pub fn files_below(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let e = e.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            Error::io(path, e.into())
        })?;
        if e.file_type().is_file() {
            out.push(e.into_path());
        }
    }
    Ok(out)
}

fn walk(root: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
    for p in files_below(root)? {
        if p.file_name().is_some_and(|n| n != MANIFEST_FILE) {
            let rel = p
                .strip_prefix(root)
                .unwrap_or(&p)
                .to_string_lossy()
                .replace('\\', "/");
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            out.push((rel, blob_hash(&bytes)));
        }
    }
    Ok(())
}

/// Digests of `inputs` and the combined hash.
pub fn hash_inputs(inputs: &[PathBuf]) -> Result<(String, Vec<InputDigest>)> {
    let digests = inputs
        .iter()
        .map(|p| {
            Ok(InputDigest {
                path: p.display().to_string(),
                sha256: content_hash(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut h = Sha256::new();
    for d in &digests {
        h.update(format!("{} {}\n", d.sha256, d.path).as_bytes());
    }
    Ok((hex(&h.finalize()), digests))
}

impl RunManifest {
    /// Starts a manifest; call [`finish`](Self::finish) once outputs exist.
    pub fn begin(
        command: Vec<String>,
        config: BTreeMap<String, String>,
        inputs: &[PathBuf],
    ) -> Result<Self> {
        let (input_hash, inputs) = hash_inputs(inputs)?;
        Ok(RunManifest {
            command,
            config,
            input_hash,
            inputs,
            started: timestamp(SystemTime::now()),
            finished: String::new(),
            outputs: Vec::new(),
        })
    }

    /// Records the outputs and writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path, outputs: &[PathBuf]) -> Result<PathBuf> {
        let mut outs: Vec<String> = outputs
            .iter()
            .map(|p| {
                p.strip_prefix(dir)
                    .unwrap_or(p)
                    .to_string_lossy()
                    .replace('\\', "/")
            })
            .filter(|p| p != MANIFEST_FILE)
            .collect();
        outs.sort();
        outs.dedup();
        self.outputs = outs;
        self.finished = timestamp(SystemTime::now());
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&self)? + "\n")
            .map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
