//! JSON corpus manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{pgm, WordAnnotation};
use crate::error::{Result, RtnError};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordRecord {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl From<&WordRecord> for WordAnnotation {
    fn from(r: &WordRecord) -> Self {
        WordAnnotation {
            x0: r.x0 as f64,
            y0: r.y0 as f64,
            x1: r.x1 as f64,
            y1: r.y1 as f64,
            text: r.text.clone(),
        }
    }
}

impl From<&WordAnnotation> for WordRecord {
    fn from(w: &WordAnnotation) -> Self {
        WordRecord {
            x0: w.x0.round() as i64,
            y0: w.y0.round() as i64,
            x1: w.x1.round() as i64,
            y1: w.y1.round() as i64,
            text: w.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Image path relative to the manifest's directory.
    pub path: String,
    pub width: usize,
    pub height: usize,
    pub words: Vec<WordRecord>,
}

impl ManifestEntry {
    pub fn annotations(&self) -> Vec<WordAnnotation> {
        self.words.iter().map(WordAnnotation::from).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl Default for CorpusManifest {
    fn default() -> Self {
        CorpusManifest {
            version: MANIFEST_VERSION,
            entries: Vec::new(),
        }
    }
}

impl CorpusManifest {
    /// Absolute location of an entry's image given the manifest file path.
    pub fn image_path(manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
        manifest_path.parent().unwrap_or(Path::new(".")).join(&entry.path)
    }

    /// Entry with the given path, compared as written in the manifest.
    pub fn find(&self, path: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.path == path)
    }
}

pub fn save_manifest(path: &Path, manifest: &CorpusManifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest).map_err(|e| RtnError::Input(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| RtnError::io(path, e))
}

fn entry_error(index: usize, entry: &ManifestEntry, reason: impl Into<String>) -> RtnError {
    RtnError::Ingestion {
        entry: format!("entries[{index}] ({})", entry.path),
        reason: reason.into(),
    }
}

/// Parses a manifest and checks every entry: image present with matching
/// extents, words with positive size inside the image.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = fs::read_to_string(path).map_err(|e| RtnError::io(path, e))?;
    let manifest: CorpusManifest = serde_json::from_str(&text).map_err(|e| RtnError::Ingestion {
        entry: path.display().to_string(),
        reason: format!("malformed manifest: {e}"),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(RtnError::Ingestion {
            entry: path.display().to_string(),
            reason: format!("unsupported manifest version {}", manifest.version),
        });
    }
    for (i, entry) in manifest.entries.iter().enumerate() {
        for (j, w) in entry.words.iter().enumerate() {
            if w.x0 >= w.x1 || w.y0 >= w.y1 {
                return Err(entry_error(i, entry, format!("word {j} has non-positive extent")));
            }
            if w.x0 < 0 || w.y0 < 0 || w.x1 > entry.width as i64 || w.y1 > entry.height as i64 {
                return Err(entry_error(i, entry, format!("word {j} lies outside the image")));
            }
        }
        let image = CorpusManifest::image_path(path, entry);
        if !image.is_file() {
            return Err(entry_error(i, entry, format!("missing image file {}", image.display())));
        }
        let (w, h) = pgm::read_extent(&image).map_err(|e| entry_error(i, entry, e.to_string()))?;
        if (w, h) != (entry.width, entry.height) {
            return Err(entry_error(
                i,
                entry,
                format!("image is {w}x{h}, manifest records {}x{}", entry.width, entry.height),
            ));
        }
    }
    Ok(manifest)
}
