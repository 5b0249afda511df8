//! Dataset manifest: the JSON index tying scenes, illuminations, images and
//! probes together. Paths are stored relative to the manifest file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub image_size: usize,
    pub probe_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// scene id → illumination id → image path
    pub scenes: BTreeMap<String, BTreeMap<u32, String>>,
    /// illumination id → scene-agnostic probe path
    #[serde(default)]
    pub probes: BTreeMap<u32, String>,
    /// scene id → illumination id → scene-specific probe path
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scene_probes: BTreeMap<String, BTreeMap<u32, String>>,
    pub meta: ManifestMeta,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub fn new(meta: ManifestMeta, root: impl Into<PathBuf>) -> Self {
        Self {
            scenes: BTreeMap::new(),
            probes: BTreeMap::new(),
            scene_probes: BTreeMap::new(),
            meta,
            root: root.into(),
        }
    }

    /// Directory relative paths are resolved against.
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Sorted union of illumination ids over all scenes.
    pub fn illumination_ids(&self) -> Vec<u32> {
        let ids: BTreeSet<u32> = self.scenes.values().flat_map(|m| m.keys().copied()).collect();
        ids.into_iter().collect()
    }

    pub fn scene_ids(&self) -> Vec<String> {
        self.scenes.keys().cloned().collect()
    }

    pub fn image_path(&self, scene: &str, id: u32) -> Option<PathBuf> {
        self.scenes.get(scene)?.get(&id).map(|p| self.resolve(p))
    }

    /// Checks that every scene covers the same illumination ids and that all
    /// referenced files exist.
    pub fn validate(&self) -> Result<()> {
        let mut sets = self.scenes.iter().map(|(s, m)| (s, m.keys().copied().collect::<BTreeSet<_>>()));
        if let Some((_, first)) = sets.next() {
            for (scene, ids) in sets {
                if ids != first {
                    return Err(Error::invalid(
                        "manifest",
                        format!("scene {scene} covers ids {ids:?}, expected {first:?}"),
                    ));
                }
            }
        }
        let all_paths = self
            .scenes
            .values()
            .chain(self.scene_probes.values())
            .flat_map(|m| m.values())
            .chain(self.probes.values());
        for rel in all_paths {
            let path = self.resolve(rel);
            if !path.exists() {
                return Err(Error::io(
                    path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "referenced by manifest"),
                ));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let manifest = Self::load_unchecked(path)?;
        manifest.validate()?;
        Ok(manifest)
    }

    /// Parses without checking that referenced files exist.
    pub fn load_unchecked(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}
