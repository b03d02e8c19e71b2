//! Dataset manifests: sorted lists of image files with their geometry.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::load_image;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Image-like files that failed to decode, with the reason.
    pub unreadable: Vec<(PathBuf, String)>,
}

const EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

fn is_image_file(p: &Path) -> bool {
    p.extension().and_then(|e| e.to_str()).is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Scans each directory (not recursively) for PNG/PGM/PPM files.
pub fn build_manifest<P: AsRef<Path>>(dirs: &[P]) -> Result<Manifest> {
    let mut found = BTreeMap::new();
    for dir in dirs {
        let dir = dir.as_ref();
        let rd = std::fs::read_dir(dir).map_err(|e| Error::Data(format!("cannot read directory {}: {e}", dir.display())))?;
        for entry in rd {
            let path = entry?.path();
            if path.is_file() && is_image_file(&path) {
                let key = std::fs::canonicalize(&path).unwrap_or_else(|_| path.clone());
                found.entry(key).or_insert(path);
            }
        }
    }
    let mut paths: Vec<PathBuf> = found.into_values().collect();
    paths.sort();
    paths.dedup();

    let mut m = Manifest::default();
    for path in paths {
        match load_image(&path) {
            Ok(img) => m.entries.push(ManifestEntry { path, height: img.height, width: img.width, channels: img.channels }),
            Err(e) => m.unreadable.push((path, e.to_string())),
        }
    }
    Ok(m)
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.entries).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        let entries = serde_json::from_str(&text).map_err(|e| Error::Data(format!("bad manifest {}: {e}", path.display())))?;
        Ok(Manifest { entries, unreadable: Vec::new() })
    }

    /// A manifest file, or a directory scanned on the fly.
    pub fn open(path: &Path) -> Result<Manifest> {
        if path.is_dir() {
            build_manifest(&[path])
        } else {
            Self::load(path)
        }
    }
}
