//! Utterance manifests: one JSON object per line with id, audio path, text and split.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::jsonl;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative paths are resolved against the manifest's directory.
    pub audio_path: PathBuf,
    pub text: String,
    #[serde(default)]
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { root: root.into(), entries };
        m.validate()?;
        Ok(m)
    }

    /// Reads and validates a manifest, including that every audio file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let entries: Vec<ManifestEntry> = jsonl::read(path).map_err(|e| match e {
            Error::Io(io) => Error::Manifest(format!("{}: {io}", path.display())),
            Error::Parse { line, message } => Error::Manifest(format!("{} line {line}: {message}", path.display())),
            other => other,
        })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::new(root, entries)?;
        for e in &m.entries {
            let audio = m.audio_path(e);
            if !audio.is_file() {
                return Err(Error::Manifest(format!("{}: audio file {} not found", e.id, audio.display())));
            }
        }
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Manifest("no utterances".into()));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.id.is_empty() || e.id.contains(['/', '\\']) {
                return Err(Error::Manifest(format!("invalid utterance id {:?}", e.id)));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate utterance id {:?}", e.id)));
            }
            if e.text.trim().is_empty() {
                return Err(Error::Manifest(format!("{}: empty text", e.id)));
            }
        }
        Ok(())
    }

    pub fn audio_path(&self, e: &ManifestEntry) -> PathBuf {
        if e.audio_path.is_absolute() {
            e.audio_path.clone()
        } else {
            self.root.join(&e.audio_path)
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        jsonl::write(path, &self.entries)
    }
}
