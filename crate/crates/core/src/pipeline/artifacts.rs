use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FareError, Result};

/// Marker on the first line of every non-JSON artifact.
pub const ARTIFACT_TAG: &str = "farelab-artifact";

#[derive(Serialize)]
struct EnvelopeOut<'a, T> {
    config_hash: &'a str,
    stage: &'a str,
    body: &'a T,
}

#[derive(Deserialize)]
struct EnvelopeIn<T> {
    config_hash: String,
    body: T,
}

#[derive(Deserialize)]
struct HashOnly {
    config_hash: String,
}

/// How the first line of a text artifact is wrapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeaderStyle {
    /// `# farelab-artifact ...`
    Hash,
    /// `<!-- farelab-artifact ... -->`, for XML documents.
    XmlComment,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Config hash embedded in an artifact's bytes, if any.
pub fn embedded_hash(bytes: &[u8]) -> Option<String> {
    let first = bytes.split(|&b| b == b'\n').next()?;
    let first = std::str::from_utf8(first).ok()?;
    if first.contains(ARTIFACT_TAG) {
        return first
            .split_whitespace()
            .find_map(|t| t.strip_prefix("config_hash="))
            .map(str::to_string);
    }
    serde_json::from_slice::<HashOnly>(bytes).ok().map(|h| h.config_hash)
}

/// A run directory whose files all carry the producing config's hash.
#[derive(Debug, Clone)]
pub struct ArtifactStore {
    root: PathBuf,
    hash: String,
}

impl ArtifactStore {
    pub fn open(root: &Path, config_hash: &str) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| FareError::io(root, e))?;
        Ok(ArtifactStore {
            root: root.to_path_buf(),
            hash: config_hash.to_string(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).is_file()
    }

    /// Artifacts are never replaced by output of a different config.
    fn guard(&self, path: &Path) -> Result<()> {
        if let Ok(old) = fs::read(path) {
            match embedded_hash(&old) {
                Some(h) if h == self.hash => {}
                found => {
                    return Err(FareError::ConfigHashMismatch {
                        path: path.to_path_buf(),
                        expected: self.hash.clone(),
                        found: found.unwrap_or_else(|| "none".into()),
                    })
                }
            }
        }
        Ok(())
    }

    fn put(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        self.guard(&path)?;
        fs::write(&path, bytes).map_err(|e| FareError::io(&path, e))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, stage: &str, name: &str, value: &T) -> Result<PathBuf> {
        let env = EnvelopeOut {
            config_hash: &self.hash,
            stage,
            body: value,
        };
        let mut text = serde_json::to_string_pretty(&env)?;
        text.push('\n');
        self.put(name, text.as_bytes())
    }

    pub fn write_bytes(&self, stage: &str, name: &str, style: HeaderStyle, body: &[u8]) -> Result<PathBuf> {
        let line = format!("{ARTIFACT_TAG} config_hash={} stage={stage}", self.hash);
        let mut bytes = match style {
            HeaderStyle::Hash => format!("# {line}\n"),
            HeaderStyle::XmlComment => format!("<!-- {line} -->\n"),
        }
        .into_bytes();
        bytes.extend_from_slice(body);
        self.put(name, &bytes)
    }

    fn fetch(&self, name: &str, stage: &str, producer: &str) -> Result<(PathBuf, Vec<u8>)> {
        let path = self.path(name);
        if !path.is_file() {
            return Err(FareError::MissingArtifact {
                stage: stage.into(),
                producer: producer.into(),
                path,
            });
        }
        let bytes = fs::read(&path).map_err(|e| FareError::io(&path, e))?;
        match embedded_hash(&bytes) {
            Some(h) if h == self.hash => Ok((path, bytes)),
            found => Err(FareError::ConfigHashMismatch {
                path,
                expected: self.hash.clone(),
                found: found.unwrap_or_else(|| "none".into()),
            }),
        }
    }

    /// Read a JSON artifact on behalf of `stage`; `producer` names the stage
    /// that writes it.
    pub fn read_json<T: DeserializeOwned>(&self, name: &str, stage: &str, producer: &str) -> Result<T> {
        let (path, bytes) = self.fetch(name, stage, producer)?;
        let env: EnvelopeIn<T> = serde_json::from_slice(&bytes).map_err(|e| {
            FareError::parse(path.display().to_string(), format!("line {}", e.line()), e.to_string())
        })?;
        debug_assert_eq!(env.config_hash, self.hash);
        Ok(env.body)
    }

    /// Body of a header-tagged artifact, header line removed.
    pub fn read_bytes(&self, name: &str, stage: &str, producer: &str) -> Result<Vec<u8>> {
        let (_, bytes) = self.fetch(name, stage, producer)?;
        let start = bytes.iter().position(|&b| b == b'\n').map_or(bytes.len(), |i| i + 1);
        Ok(bytes[start..].to_vec())
    }

    pub fn checksum(&self, name: &str) -> Result<String> {
        let path = self.path(name);
        let bytes = fs::read(&path).map_err(|e| FareError::io(&path, e))?;
        Ok(sha256_hex(&bytes))
    }
}
