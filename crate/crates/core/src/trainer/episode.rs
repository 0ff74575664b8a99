//! Episode sampling over the seen identities.

use rand::seq::index;
use rand::Rng;

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::EpisodeInputs;
use crate::numeric::Tensor;

/// Identities and image picks of one episode, as indices into the pools.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeDraw {
    /// Pool indices; position in this list is the episode-local label.
    pub identities: Vec<usize>,
    /// For each drawn identity, indices into its image list.
    pub picks: Vec<Vec<usize>>,
}

/// Draws `n` distinct identities uniformly, then `shots` images from each;
/// without replacement unless an identity has fewer than `shots` images.
pub fn sample_episode(pool_sizes: &[usize], n: usize, shots: usize, rng: &mut impl Rng) -> Result<EpisodeDraw> {
    if n == 0 || n > pool_sizes.len() {
        return Err(Error::Config(format!(
            "episodes of {n} identities from {} seen identities",
            pool_sizes.len()
        )));
    }
    if shots == 0 {
        return Err(Error::Config("shots per identity must be at least 1".into()));
    }
    if let Some(i) = pool_sizes.iter().position(|&s| s == 0) {
        return Err(Error::Config(format!("seen identity #{i} has no training images")));
    }
    let identities = index::sample(rng, pool_sizes.len(), n).into_vec();
    let picks = identities
        .iter()
        .map(|&i| {
            let size = pool_sizes[i];
            if size >= shots {
                index::sample(rng, size, shots).into_vec()
            } else {
                (0..shots).map(|_| rng.random_range(0..size)).collect()
            }
        })
        .collect();
    Ok(EpisodeDraw { identities, picks })
}

/// Seen identities with their training images and category-level vectors.
#[derive(Clone, Debug)]
pub struct TrainSet {
    /// Dataset identity index of each seen identity.
    pub identities: Vec<usize>,
    /// Dataset image indices per seen identity.
    pub images: Vec<Vec<usize>>,
    /// Mean annotation over every training image of the identity.
    pub category: Vec<Vec<f32>>,
}

impl TrainSet {
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let identities = dataset.train_identities();
        if identities.is_empty() {
            return Err(Error::Config("dataset has no training identities".into()));
        }
        let images = identities
            .iter()
            .map(|&id| {
                dataset
                    .images
                    .iter()
                    .enumerate()
                    .filter(|(_, im)| im.identity == id && im.split == Split::Train)
                    .map(|(k, _)| k)
                    .collect()
            })
            .collect();
        let category = identities
            .iter()
            .map(|&id| dataset.category_attribute(id, &[Split::Train]))
            .collect::<Result<_>>()?;
        Ok(TrainSet {
            identities,
            images,
            category,
        })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn pool_sizes(&self) -> Vec<usize> {
        self.images.iter().map(Vec::len).collect()
    }

    pub fn ids(&self, dataset: &Dataset) -> Vec<String> {
        self.identities.iter().map(|&i| dataset.identities[i].clone()).collect()
    }

    /// Loss inputs of a drawn episode. Classifier rows are seen-identity positions.
    pub fn inputs(&self, dataset: &Dataset, draw: &EpisodeDraw) -> Result<EpisodeInputs<f32>> {
        let mut maps = Vec::new();
        let mut labels = Vec::new();
        let mut targets = Vec::new();
        for (label, (&who, picks)) in draw.identities.iter().zip(&draw.picks).enumerate() {
            for &p in picks {
                let image = &dataset.images[self.images[who][p]];
                maps.push(image.features.clone());
                labels.push(label);
                targets.push(image.attributes.clone());
            }
        }
        let rows: Vec<Vec<f32>> = draw.identities.iter().map(|&i| self.category[i].clone()).collect();
        Ok(EpisodeInputs {
            maps,
            labels,
            targets,
            class_attributes: Tensor::from_rows(&rows)?,
            class_rows: draw.identities.clone(),
        })
    }
}
