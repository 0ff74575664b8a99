//! Planted synthetic data.
//!
//! Each attribute owns a fixed basis map: a channel vector painted over a
//! small rectangle, zero elsewhere. An identity is a binary attribute vector,
//! and each of its images is the sum of the active bases plus Gaussian noise.
//! Annotations are the identity's vector with independent bit flips.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::split::{gallery_probe, make_split, SplitSpec};
use crate::dataset::{
    attributes, tensor_io, DatasetManifest, Flavor, IdentityRecord, ImageRecord, Split, FEATURES_DIR,
    SCHEMA_VERSION,
};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const PLANTED_FILE: &str = "planted.json";
const MAX_DRAWS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub train_identities: usize,
    pub test_identities: usize,
    pub attributes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub images_per_identity: usize,
    /// Probability that an annotation bit disagrees with the ground truth.
    pub flip_probability: f64,
    /// Standard deviation of the per-entry feature noise.
    pub noise_scale: f64,
    /// Probability that an identity has a given attribute.
    pub active_probability: f64,
    pub flavor: Flavor,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train_identities: 40,
            test_identities: 10,
            attributes: 12,
            channels: 16,
            height: 8,
            width: 8,
            images_per_identity: 6,
            flip_probability: 0.05,
            noise_scale: 0.5,
            active_probability: 0.5,
            flavor: Flavor::FaceStyle,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.train_identities < 2 || self.test_identities < 2 {
            return fail(format!(
                "need at least 2 train and 2 test identities, got {} and {}",
                self.train_identities, self.test_identities
            ));
        }
        if self.attributes < 2 {
            return fail(format!("need at least 2 attributes, got {}", self.attributes));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 || self.images_per_identity == 0 {
            return fail("feature geometry and images per identity must be positive".into());
        }
        if !(0.0..0.5).contains(&self.flip_probability) {
            return fail(format!("flip probability {} outside [0, 0.5)", self.flip_probability));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return fail(format!("noise scale {} must be finite and nonnegative", self.noise_scale));
        }
        if !(self.active_probability > 0.0 && self.active_probability < 1.0) {
            return fail(format!("active probability {} outside (0, 1)", self.active_probability));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.height).contains(&y) && (self.left..self.left + self.width).contains(&x)
    }
}

/// Generator internals, kept so tests can check against ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedModel {
    pub feature_shape: [usize; 3],
    pub rectangles: Vec<Rect>,
    pub channel_vectors: Vec<Vec<f32>>,
    /// Ground-truth attribute vector of every identity.
    pub ground_truth: BTreeMap<String, Vec<u8>>,
}

impl PlantedModel {
    /// Noiseless feature map of an attribute vector.
    pub fn render(&self, active: &[u8]) -> Tensor<f32> {
        let [c, h, w] = self.feature_shape;
        let mut data = vec![0.0f32; c * h * w];
        for (q, _) in active.iter().enumerate().filter(|(_, &g)| g == 1) {
            let rect = self.rectangles[q];
            for ch in 0..c {
                let value = self.channel_vectors[q][ch];
                for y in rect.top..rect.top + rect.height {
                    for x in rect.left..rect.left + rect.width {
                        data[(ch * h + y) * w + x] += value;
                    }
                }
            }
        }
        Tensor::new(vec![c, h, w], data).expect("shape matches data")
    }

    /// Noiseless pooled feature of an attribute vector.
    pub fn pooled(&self, active: &[u8]) -> Vec<f64> {
        let [c, h, w] = self.feature_shape;
        let map = self.render(active);
        (0..c)
            .map(|ch| map.data()[ch * h * w..(ch + 1) * h * w].iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64)
            .collect()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(PLANTED_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
    }
}

/// A generated dataset held in memory; `features` follows manifest image order.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub manifest: DatasetManifest,
    pub features: Vec<Tensor<f32>>,
    pub planted: PlantedModel,
}

fn draw_vector(rng: &mut ChaCha8Rng, q: usize, p: f64) -> Vec<u8> {
    (0..q).map(|_| u8::from(rng.random_bool(p))).collect()
}

/// Runs the planted generator without touching the filesystem.
pub fn synthesize(cfg: &SyntheticConfig) -> Result<Synthetic> {
    cfg.validate()?;
    let (q, c, h, w) = (cfg.attributes, cfg.channels, cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let (rh, rw) = (h.div_ceil(3), w.div_ceil(3));
    let mut rectangles = Vec::with_capacity(q);
    let mut channel_vectors = Vec::with_capacity(q);
    for _ in 0..q {
        rectangles.push(Rect {
            top: rng.random_range(0..=h - rh),
            left: rng.random_range(0..=w - rw),
            height: rh,
            width: rw,
        });
        channel_vectors.push((0..c).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f32>>());
    }

    let n = cfg.train_identities + cfg.test_identities;
    let ids: Vec<String> = (0..n).map(|i| format!("id{i:04}")).collect();
    let mut truths: Vec<Vec<u8>> = Vec::with_capacity(n);
    for id in &ids {
        let mut draws = 0;
        let g = loop {
            draws += 1;
            if draws > MAX_DRAWS {
                return Err(Error::Config(format!(
                    "could not draw a distinct attribute vector for {id} after {MAX_DRAWS} tries; use more attributes"
                )));
            }
            let g = draw_vector(&mut rng, q, cfg.active_probability);
            let empty = g.iter().all(|&b| b == 0);
            let taken = cfg.flavor == Flavor::FaceStyle && truths.contains(&g);
            if !empty && !taken {
                break g;
            }
        };
        truths.push(g);
    }

    let (_, test) = make_split(&ids, SplitSpec::Counts(cfg.train_identities, cfg.test_identities), cfg.seed)?;
    let planted = PlantedModel {
        feature_shape: [c, h, w],
        rectangles,
        channel_vectors,
        ground_truth: ids.iter().cloned().zip(truths.iter().cloned()).collect(),
    };

    let mut identities = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * cfg.images_per_identity);
    for (id, g) in ids.iter().zip(&truths) {
        let roles = if test.contains(id) {
            gallery_probe(cfg.images_per_identity, cfg.flavor, &mut rng)
        } else {
            vec![Split::Train; cfg.images_per_identity]
        };
        let clean = planted.render(g);
        let mut images = Vec::with_capacity(cfg.images_per_identity);
        for (k, split) in roles.into_iter().enumerate() {
            let image_id = format!("{id}_{k:02}");
            let mut map = clean.clone();
            for v in map.data_mut() {
                let eta: f64 = StandardNormal.sample(&mut rng);
                *v += (cfg.noise_scale * eta) as f32;
            }
            let attributes = g
                .iter()
                .map(|&b| if rng.random_bool(cfg.flip_probability) { 1 - b } else { b })
                .collect();
            features.push(map);
            images.push(ImageRecord {
                features: format!("{FEATURES_DIR}/{image_id}.mft"),
                id: image_id,
                attributes,
                split,
                semantic_id: None,
            });
        }
        identities.push(IdentityRecord { id: id.clone(), images });
    }

    let mut manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        flavor: cfg.flavor,
        attribute_names: (0..q).map(|i| format!("attr{i:02}")).collect(),
        feature_shape: [c, h, w],
        identities,
    };
    if cfg.flavor == Flavor::ReidStyle {
        attributes::assign_semantic_ids(&mut manifest)?;
    }
    manifest.validate()?;
    Ok(Synthetic {
        manifest,
        features,
        planted,
    })
}

/// Counts printed after generation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenerationSummary {
    pub train_identities: usize,
    pub test_identities: usize,
    pub attributes: usize,
    pub feature_shape: [usize; 3],
    pub images: usize,
}

/// Generates a dataset into `dir`: manifest, feature tensors and the planted model.
pub fn generate_synthetic(cfg: &SyntheticConfig, dir: &Path) -> Result<GenerationSummary> {
    let synthetic = synthesize(cfg)?;
    let features_dir = dir.join(FEATURES_DIR);
    std::fs::create_dir_all(&features_dir).map_err(|e| Error::io(&features_dir, e))?;
    let records = synthetic.manifest.identities.iter().flat_map(|i| &i.images);
    for (record, map) in records.zip(&synthetic.features) {
        tensor_io::write(&dir.join(&record.features), map)?;
    }
    synthetic.manifest.save(dir)?;
    let path = dir.join(PLANTED_FILE);
    let mut text = serde_json::to_string_pretty(&synthetic.planted).expect("planted model serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(GenerationSummary {
        train_identities: cfg.train_identities,
        test_identities: cfg.test_identities,
        attributes: cfg.attributes,
        feature_shape: [cfg.channels, cfg.height, cfg.width],
        images: synthetic.features.len(),
    })
}
