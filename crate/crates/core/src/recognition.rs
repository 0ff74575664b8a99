//! Test-time protocols: image to attribute, attribute to image, image to image.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Flavor, Split};
use crate::error::{Error, Result};
use crate::metrics::{cmc, mean_average_precision, rank, top_p_per_class, Order, RankedResult};
use crate::model::Model;
use crate::numeric::NORM_EPS;
use crate::plm::{MlpParams, PrototypeSet};
use crate::sgsa::AttentionConfig;
use crate::trainer::Checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    I2a,
    A2i,
    I2i,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::I2a, Protocol::A2i, Protocol::I2i];
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i2a" => Ok(Protocol::I2a),
            "a2i" => Ok(Protocol::A2i),
            "i2i" => Ok(Protocol::I2i),
            other => Err(Error::Argument(format!("unknown protocol {other:?} (expected i2a, a2i or i2i)"))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::I2a => "i2a",
            Protocol::A2i => "a2i",
            Protocol::I2i => "i2i",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Cut-offs for Top-P accuracy and CMC.
    pub top: Vec<usize>,
    /// Drop the query image itself from image-to-image candidates.
    pub exclude_self: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            top: vec![1, 5, 10],
            exclude_self: true,
        }
    }
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn unit(v: &[f64], what: &str) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= NORM_EPS {
        return Err(Error::Degenerate(format!("{what} has zero norm")));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ranks candidates by descending cosine similarity to `v`.
pub fn cosine_ranking(query: &str, v: &[f32], ids: &[String], candidates: &[Vec<f32>]) -> Result<RankedResult> {
    if ids.len() != candidates.len() {
        return Err(Error::Argument("one id per candidate required".into()));
    }
    let q = unit(&to_f64(v), &format!("query {query}"))?;
    let scores = ids
        .iter()
        .zip(candidates)
        .map(|(id, c)| Ok(dot(&q, &unit(&to_f64(c), &format!("candidate {id}"))?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(rank(query, ids, &scores, Order::Descending))
}

/// Nearest-prototype classification; the predicted identity is `candidates[0]`.
pub fn classify_i2a(query: &str, v: &[f32], prototypes: &PrototypeSet<f32>) -> Result<RankedResult> {
    let rows: Vec<Vec<f32>> = (0..prototypes.len()).map(|i| prototypes.row(i).to_vec()).collect();
    cosine_ranking(query, v, &prototypes.identities, &rows)
}

/// Ranks gallery features against the prototype of an attribute query.
pub fn retrieve_a2i(
    query: &str,
    attributes: &[f32],
    plm: &MlpParams<f32>,
    gallery_ids: &[String],
    gallery: &[Vec<f32>],
) -> Result<RankedResult> {
    if gallery.is_empty() {
        return Err(Error::Argument("empty gallery".into()));
    }
    let m = crate::plm::prototype(attributes, plm)?;
    cosine_ranking(query, &m, gallery_ids, gallery)
}

/// Ranks gallery features by ascending Euclidean distance after unit normalization.
pub fn retrieve_i2i(query: &str, v: &[f32], gallery_ids: &[String], gallery: &[Vec<f32>]) -> Result<RankedResult> {
    if gallery_ids.len() != gallery.len() {
        return Err(Error::Argument("one id per gallery feature required".into()));
    }
    let q = unit(&to_f64(v), &format!("query {query}"))?;
    let scores = gallery_ids
        .iter()
        .zip(gallery)
        .map(|(id, g)| {
            let g = unit(&to_f64(g), &format!("gallery item {id}"))?;
            Ok(q.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(rank(query, gallery_ids, &scores, Order::Ascending))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportCounts {
    /// Queries scored.
    pub queries: usize,
    /// Queries dropped because no class or relevant item matched them.
    pub skipped: usize,
    pub gallery: usize,
    /// Classes (identities or semantic ids) on the attribute side.
    pub identities: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub top: Vec<usize>,
    /// Mean per-class Top-P accuracy (image to attribute).
    pub top_p_accuracy: Option<Vec<f64>>,
    /// CMC at each cut-off (retrieval protocols); `None` entries are not applicable.
    pub cmc: Option<Vec<Option<f64>>>,
    pub map: Option<f64>,
    pub counts: ReportCounts,
    pub seed: u64,
    pub config_hash: String,
    pub episodes: usize,
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

impl MetricsReport {
    pub fn file_stem(&self) -> String {
        format!("report-{}-seed{}-{}", self.protocol, self.seed, self.config_hash)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "protocol\t{}", self.protocol).unwrap();
        writeln!(s, "config\t{}", self.config_hash).unwrap();
        writeln!(s, "seed\t{}", self.seed).unwrap();
        writeln!(s, "episodes\t{}", self.episodes).unwrap();
        writeln!(
            s,
            "queries\t{}\tskipped\t{}\tgallery\t{}\tidentities\t{}",
            self.counts.queries, self.counts.skipped, self.counts.gallery, self.counts.identities
        )
        .unwrap();
        writeln!(s, "metric\tvalue").unwrap();
        if let Some(acc) = &self.top_p_accuracy {
            for (p, v) in self.top.iter().zip(acc) {
                writeln!(s, "top-{p}\t{}", fmt_metric(Some(*v))).unwrap();
            }
        }
        if let Some(cmc) = &self.cmc {
            for (p, v) in self.top.iter().zip(cmc) {
                writeln!(s, "R@{p}\t{}", fmt_metric(*v)).unwrap();
            }
        }
        if self.cmc.is_some() {
            writeln!(s, "mAP\t{}", fmt_metric(self.map)).unwrap();
        }
        s
    }

    /// Writes `<stem>.txt` and `<stem>.json` into `dir`; returns both paths.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let txt = dir.join(format!("{}.txt", self.file_stem()));
        let json = dir.join(format!("{}.json", self.file_stem()));
        std::fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))?;
        let mut body = serde_json::to_string_pretty(self).expect("report serializes");
        body.push('\n');
        std::fs::write(&json, body).map_err(|e| Error::io(&json, e))?;
        Ok((txt, json))
    }

    pub fn top1(&self) -> Option<f64> {
        match (&self.top_p_accuracy, &self.cmc) {
            (Some(acc), _) => self.top.iter().position(|&p| p == 1).map(|i| acc[i]),
            (None, Some(cmc)) => self.top.iter().position(|&p| p == 1).and_then(|i| cmc[i]),
            _ => None,
        }
    }
}

/// A class on the attribute side: a test identity, or a semantic id for reid-style data.
struct AttributeClass {
    id: String,
    attributes: Vec<f32>,
}

fn semantic_label(s: usize) -> String {
    format!("sem{s:06}")
}

/// Label an image answers to on the attribute side.
fn class_label(dataset: &Dataset, image: &crate::dataset::Image) -> Option<String> {
    match dataset.flavor() {
        Flavor::FaceStyle => Some(dataset.identities[image.identity].clone()),
        Flavor::ReidStyle => image.semantic_id.map(semantic_label),
    }
}

/// Attribute-side classes built from gallery annotations only.
fn attribute_classes(dataset: &Dataset) -> Result<Vec<AttributeClass>> {
    match dataset.flavor() {
        Flavor::FaceStyle => dataset
            .test_identities()
            .into_iter()
            .filter(|&i| dataset.images_of(i, &[Split::TestGallery]).next().is_some())
            .map(|i| {
                Ok(AttributeClass {
                    id: dataset.identities[i].clone(),
                    attributes: dataset.category_attribute(i, &[Split::TestGallery])?,
                })
            })
            .collect(),
        Flavor::ReidStyle => {
            let mut by_id: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
            for image in dataset.images.iter().filter(|i| i.split == Split::TestGallery) {
                let s = image
                    .semantic_id
                    .ok_or_else(|| Error::Manifest(format!("reid-style image {} has no semantic id", image.id)))?;
                by_id.entry(s).or_insert_with(|| image.attributes.clone());
            }
            Ok(by_id
                .into_iter()
                .map(|(s, attributes)| AttributeClass {
                    id: semantic_label(s),
                    attributes,
                })
                .collect())
        }
    }
}

/// Visual features of the images in `splits` of test identities, in dataset order.
fn features(
    model: &Model<f32>,
    attention: &AttentionConfig,
    dataset: &Dataset,
    split: Split,
) -> Result<Vec<(usize, Vec<f32>)>> {
    dataset
        .images
        .iter()
        .enumerate()
        .filter(|(_, i)| i.split == split)
        .map(|(k, i)| Ok((k, model.visual_feature(&i.features, attention)?.feature.into_data())))
        .collect()
}

/// Rejects checkpoints whose seen identities reappear among the test identities.
pub fn check_disjoint(seen: &[String], dataset: &Dataset) -> Result<()> {
    let seen: BTreeSet<&str> = seen.iter().map(String::as_str).collect();
    let overlap: Vec<&str> = dataset
        .test_identities()
        .into_iter()
        .map(|i| dataset.identities[i].as_str())
        .filter(|id| seen.contains(id))
        .collect();
    if !overlap.is_empty() {
        return Err(Error::Protocol(format!(
            "test identities were seen in training: {}",
            overlap.join(", ")
        )));
    }
    Ok(())
}

/// Runs one protocol over the test split of `dataset` with a trained checkpoint.
pub fn evaluate(protocol: Protocol, ckpt: &Checkpoint, dataset: &Dataset, cfg: &EvalConfig) -> Result<MetricsReport> {
    ckpt.meta.dataset.check(dataset)?;
    check_disjoint(&ckpt.meta.seen_identities, dataset)?;
    if cfg.top.is_empty() || cfg.top.contains(&0) {
        return Err(Error::Config(format!("cut-offs must be positive, got {:?}", cfg.top)));
    }
    let model = &ckpt.model;
    let attention = &ckpt.meta.train.attention;
    let ids: Vec<String> = dataset.images.iter().map(|i| i.id.clone()).collect();

    let (top_p_accuracy, cmc_values, map, counts) = match protocol {
        Protocol::I2a | Protocol::A2i => {
            let plm = model.plm.as_ref().ok_or_else(|| {
                Error::Protocol(format!("{protocol} needs a model trained in i2a mode; this checkpoint is i2i"))
            })?;
            let classes = attribute_classes(dataset)?;
            if classes.is_empty() {
                return Err(Error::Protocol("no test identity has gallery images".into()));
            }
            let class_ids: Vec<String> = classes.iter().map(|c| c.id.clone()).collect();
            if protocol == Protocol::I2a {
                let attrs: Vec<Vec<f32>> = classes.iter().map(|c| c.attributes.clone()).collect();
                let prototypes = PrototypeSet::new(
                    crate::plm::prototypes(&attrs, plm)?,
                    class_ids.clone(),
                    crate::plm::PrototypeSource::Plm,
                )?;
                let probes = features(model, attention, dataset, Split::TestProbe)?;
                let mut rankings = Vec::new();
                let mut truths = Vec::new();
                let mut skipped = 0;
                for (k, v) in &probes {
                    match class_label(dataset, &dataset.images[*k]).filter(|c| class_ids.contains(c)) {
                        Some(truth) => {
                            rankings.push(classify_i2a(&ids[*k], v, &prototypes)?);
                            truths.push(truth);
                        }
                        None => skipped += 1,
                    }
                }
                let acc = top_p_per_class(&rankings, &truths, &cfg.top)?;
                let counts = ReportCounts {
                    queries: rankings.len(),
                    skipped,
                    gallery: prototypes.len(),
                    identities: classes.len(),
                };
                (Some(acc), None, None, counts)
            } else {
                let gallery = features(model, attention, dataset, Split::TestGallery)?;
                let gallery_ids: Vec<String> = gallery.iter().map(|(k, _)| ids[*k].clone()).collect();
                let gallery_vecs: Vec<Vec<f32>> = gallery.iter().map(|(_, v)| v.clone()).collect();
                let mut rankings = Vec::new();
                let mut relevant = Vec::new();
                for class in &classes {
                    rankings.push(retrieve_a2i(&class.id, &class.attributes, plm, &gallery_ids, &gallery_vecs)?);
                    relevant.push(
                        gallery
                            .iter()
                            .filter(|(k, _)| class_label(dataset, &dataset.images[*k]).as_ref() == Some(&class.id))
                            .map(|(k, _)| ids[*k].clone())
                            .collect::<BTreeSet<String>>(),
                    );
                }
                let skipped = relevant.iter().filter(|r| r.is_empty()).count();
                let counts = ReportCounts {
                    queries: rankings.len() - skipped,
                    skipped,
                    gallery: gallery.len(),
                    identities: classes.len(),
                };
                (
                    None,
                    Some(cmc(&rankings, &relevant, &cfg.top)),
                    mean_average_precision(&rankings, &relevant),
                    counts,
                )
            }
        }
        Protocol::I2i => {
            let gallery = features(model, attention, dataset, Split::TestGallery)?;
            let probes = features(model, attention, dataset, Split::TestProbe)?;
            let mut rankings = Vec::new();
            let mut relevant = Vec::new();
            for (q, v) in &probes {
                let keep: Vec<&(usize, Vec<f32>)> =
                    gallery.iter().filter(|(k, _)| !(cfg.exclude_self && k == q)).collect();
                let gallery_ids: Vec<String> = keep.iter().map(|(k, _)| ids[*k].clone()).collect();
                let gallery_vecs: Vec<Vec<f32>> = keep.iter().map(|(_, g)| g.clone()).collect();
                rankings.push(retrieve_i2i(&ids[*q], v, &gallery_ids, &gallery_vecs)?);
                let who = dataset.images[*q].identity;
                relevant.push(
                    keep.iter()
                        .filter(|(k, _)| dataset.images[*k].identity == who)
                        .map(|(k, _)| ids[*k].clone())
                        .collect::<BTreeSet<String>>(),
                );
            }
            let skipped = relevant.iter().filter(|r| r.is_empty()).count();
            let counts = ReportCounts {
                queries: rankings.len() - skipped,
                skipped,
                gallery: gallery.len(),
                identities: dataset.test_identities().len(),
            };
            (
                None,
                Some(cmc(&rankings, &relevant, &cfg.top)),
                mean_average_precision(&rankings, &relevant),
                counts,
            )
        }
    };
    Ok(MetricsReport {
        protocol,
        top: cfg.top.clone(),
        top_p_accuracy,
        cmc: cmc_values,
        map,
        counts,
        seed: ckpt.meta.train.seed,
        config_hash: ckpt.meta.config_hash.clone(),
        episodes: ckpt.meta.episode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;
    use crate::plm::PrototypeSource;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("g{i}")).collect()
    }

    #[test]
    fn i2a_examples() {
        let protos = PrototypeSet::new(
            Tensor::new(vec![2, 2], vec![1.0, 0.1, 0.0, 1.0]).unwrap(),
            vec!["a".into(), "b".into()],
            PrototypeSource::Plm,
        )
        .unwrap();
        let r = classify_i2a("q", &[1.0, 0.0], &protos).unwrap();
        assert_eq!(r.candidates[0], "a");
        assert!((r.scores[0] - 0.995037).abs() < 1e-6);
        assert_eq!(classify_i2a("q", &[0.0, 2.0], &protos).unwrap().candidates[0], "b");
        let scaled = classify_i2a("q", &[3.0, 0.0], &protos).unwrap();
        assert_eq!(scaled.candidates, r.candidates);
        assert!(matches!(classify_i2a("q", &[0.0, 0.0], &protos), Err(Error::Degenerate(_))));
    }

    #[test]
    fn cosine_order_from_hand_values() {
        // Unit candidates with cosines 0.9, 0.1, 0.5 against the query [1, 0].
        let g: Vec<Vec<f32>> = [0.9f64, 0.1, 0.5]
            .iter()
            .map(|&c| vec![c as f32, (1.0 - c * c).sqrt() as f32])
            .collect();
        let r = cosine_ranking("q", &[1.0, 0.0], &ids(3), &g).unwrap();
        assert_eq!(r.candidates, vec!["g0", "g2", "g1"]);
    }

    #[test]
    fn duplicates_are_adjacent_and_id_ordered() {
        let g = vec![vec![0.0f32, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let names: Vec<String> = vec!["z".into(), "m".into(), "a".into()];
        let r = cosine_ranking("q", &[0.1, 1.0], &names, &g).unwrap();
        assert_eq!(r.candidates, vec!["a", "z", "m"]);
    }

    #[test]
    fn i2i_angles() {
        let deg = |d: f64| vec![d.to_radians().cos() as f32, d.to_radians().sin() as f32];
        let g = vec![deg(170.0), deg(10.0), deg(90.0)];
        let r = retrieve_i2i("q", &[1.0, 0.0], &ids(3), &g).unwrap();
        assert_eq!(r.candidates, vec!["g1", "g2", "g0"]);
        let r = retrieve_i2i("q", &[2.0, 0.0], &ids(2), &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(r.candidates[0], "g0");
        assert!(r.scores[0].abs() < 1e-12);
    }

    #[test]
    fn protocol_strings() {
        for p in Protocol::ALL {
            assert_eq!(p.to_string().parse::<Protocol>().unwrap(), p);
        }
        assert!("x2y".parse::<Protocol>().is_err());
    }
}
