//! Dataset manifests, feature loading, splits and the planted generator.
//!
//! A dataset directory holds `manifest.json` at its root and one tensor file
//! per image under `features/`. Feature maps are stored precomputed.

pub mod attributes;
pub mod split;
pub mod synthetic;
pub mod tensor_io;

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURES_DIR: &str = "features";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flavor {
    /// Every identity has its own attribute vector; evaluation uses true identities.
    FaceStyle,
    /// Attribute vectors may collide; attribute-side evaluation uses semantic ids.
    ReidStyle,
}

impl std::fmt::Display for Flavor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Flavor::FaceStyle => "face-style",
            Flavor::ReidStyle => "reid-style",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    TestGallery,
    TestProbe,
}

impl Split {
    pub fn is_test(self) -> bool {
        self != Split::Train
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: String,
    /// Path of the feature tensor relative to the dataset root.
    pub features: String,
    pub attributes: Vec<u8>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_id: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityRecord {
    pub id: String,
    pub images: Vec<ImageRecord>,
}

impl IdentityRecord {
    /// Split side of the identity; `None` when it has no images.
    pub fn side(&self) -> Option<bool> {
        self.images.first().map(|i| i.split.is_test())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub flavor: Flavor,
    pub attribute_names: Vec<String>,
    /// `[C, H, W]` of every feature map.
    pub feature_shape: [usize; 3],
    pub identities: Vec<IdentityRecord>,
}

impl DatasetManifest {
    pub fn attributes(&self) -> usize {
        self.attribute_names.len()
    }

    /// Checks everything that does not touch the feature files.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Manifest(format!(
                "schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let q = self.attributes();
        if q == 0 {
            return Err(Error::Manifest("no attributes declared".into()));
        }
        if self.feature_shape.contains(&0) {
            return Err(Error::Manifest(format!("feature shape {:?} has a zero extent", self.feature_shape)));
        }
        let mut identity_ids = HashSet::new();
        let mut image_ids = HashSet::new();
        for identity in &self.identities {
            if !identity_ids.insert(identity.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate identity {}", identity.id)));
            }
            if identity.images.is_empty() {
                return Err(Error::Manifest(format!("identity {} has no images", identity.id)));
            }
            let test_side = identity.images[0].split.is_test();
            for image in &identity.images {
                if !image_ids.insert(image.id.as_str()) {
                    return Err(Error::Manifest(format!("duplicate image {}", image.id)));
                }
                if image.split.is_test() != test_side {
                    return Err(Error::Manifest(format!(
                        "identity {} appears in both the train and test splits",
                        identity.id
                    )));
                }
                if image.attributes.len() != q {
                    return Err(Error::Manifest(format!(
                        "image {} has {} attributes, expected {q}",
                        image.id,
                        image.attributes.len()
                    )));
                }
                if let Some(v) = image.attributes.iter().find(|&&v| v > 1) {
                    return Err(Error::Manifest(format!("image {} has non-binary attribute value {v}", image.id)));
                }
                if self.flavor == Flavor::FaceStyle && image.semantic_id.is_some() {
                    return Err(Error::Manifest(format!("face-style image {} carries a semantic id", image.id)));
                }
            }
        }
        Ok(())
    }

    pub fn train_identities(&self) -> Vec<&IdentityRecord> {
        self.identities.iter().filter(|i| i.side() == Some(false)).collect()
    }

    pub fn test_identities(&self) -> Vec<&IdentityRecord> {
        self.identities.iter().filter(|i| i.side() == Some(true)).collect()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// One image with its feature map loaded.
#[derive(Clone, Debug)]
pub struct Image {
    pub id: String,
    /// Index into [`Dataset::identities`].
    pub identity: usize,
    pub attributes: Vec<f32>,
    pub split: Split,
    pub semantic_id: Option<usize>,
    pub features: Tensor<f32>,
}

/// A validated dataset held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub identities: Vec<String>,
    pub images: Vec<Image>,
}

impl Dataset {
    /// Loads and validates a dataset directory, reading every feature tensor.
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        Self::from_manifest(dir, manifest)
    }

    pub fn from_manifest(dir: &Path, manifest: DatasetManifest) -> Result<Self> {
        manifest.validate()?;
        let shape = manifest.feature_shape.to_vec();
        let mut identities = Vec::with_capacity(manifest.identities.len());
        let mut images = Vec::new();
        for (index, identity) in manifest.identities.iter().enumerate() {
            identities.push(identity.id.clone());
            for record in &identity.images {
                let path = dir.join(&record.features);
                if !path.is_file() {
                    return Err(Error::Manifest(format!(
                        "image {}: feature file {} is missing",
                        record.id,
                        path.display()
                    )));
                }
                let features = tensor_io::read(&path)?;
                if features.shape() != shape.as_slice() {
                    return Err(Error::Manifest(format!(
                        "image {}: feature shape {:?} differs from the dataset's {:?}",
                        record.id,
                        features.shape(),
                        shape
                    )));
                }
                images.push(Image {
                    id: record.id.clone(),
                    identity: index,
                    attributes: record.attributes.iter().map(|&a| f32::from(a)).collect(),
                    split: record.split,
                    semantic_id: record.semantic_id,
                    features,
                });
            }
        }
        Ok(Dataset {
            root: dir.to_path_buf(),
            manifest,
            identities,
            images,
        })
    }

    pub fn flavor(&self) -> Flavor {
        self.manifest.flavor
    }

    pub fn attributes(&self) -> usize {
        self.manifest.attributes()
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        self.manifest.feature_shape
    }

    pub fn image(&self, id: &str) -> Option<&Image> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Images of one identity restricted to the given splits, in manifest order.
    pub fn images_of<'a>(&'a self, identity: usize, splits: &'a [Split]) -> impl Iterator<Item = &'a Image> + 'a {
        self.images
            .iter()
            .filter(move |i| i.identity == identity && splits.contains(&i.split))
    }

    /// Identity indices whose images are all in the train split.
    pub fn train_identities(&self) -> Vec<usize> {
        self.side(false)
    }

    pub fn test_identities(&self) -> Vec<usize> {
        self.side(true)
    }

    fn side(&self, test: bool) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .images
            .iter()
            .filter(|i| i.split.is_test() == test)
            .map(|i| i.identity)
            .collect();
        set.into_iter().collect()
    }

    /// Mean attribute vector of an identity over images in `splits`.
    pub fn category_attribute(&self, identity: usize, splits: &[Split]) -> Result<Vec<f32>> {
        let rows: Vec<Vec<f32>> = self.images_of(identity, splits).map(|i| i.attributes.clone()).collect();
        crate::plm::category_attribute(&rows).map_err(|_| {
            Error::Argument(format!(
                "identity {} has no images in splits {splits:?}",
                self.identities[identity]
            ))
        })
    }
}
