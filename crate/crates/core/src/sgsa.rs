//! Semantics-guided spatial attention.
//!
//! An attribute classifier over the pooled feature map scores every attribute;
//! the classifier rows double as class-activation weights, the activation maps
//! of the `D` best-scoring attributes are merged by a pointwise maximum, and the
//! resulting map re-weights the feature map residually before pooling.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::tensor_io;
use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tape, Tensor, Var};

/// Added to the map maximum before dividing, so an all-zero map stays zero.
pub const ATTENTION_EPS: f64 = 1e-8;

/// Attribute classifier weights (`Q x C`) and bias (`Q`).
#[derive(Clone, Debug, PartialEq)]
pub struct ApmParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ApmParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::dim(
                "apm",
                format!("weight {:?} with bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        Ok(ApmParams { weight, bias })
    }

    pub fn zeros(attributes: usize, channels: usize) -> Self {
        ApmParams {
            weight: Tensor::zeros(vec![attributes, channels]),
            bias: Tensor::zeros(vec![attributes]),
        }
    }

    pub fn attributes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    /// Number of activation maps merged into the attention map.
    pub top_d: usize,
    /// Rectify and rescale the merged map into `[0, 1]`.
    pub normalize: bool,
    /// When false the attention flow is skipped and the feature is `gap(F)`.
    pub enabled: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            top_d: 10,
            normalize: true,
            enabled: true,
        }
    }
}

/// Tape handles for one image pass.
#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub scores: Var,
    pub selected: Vec<usize>,
    pub attention: Option<Var>,
    pub fused: Option<Var>,
    pub feature: Var,
}

/// Materialized intermediates of one image pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput<T = f32> {
    pub scores: Vec<T>,
    pub selected: Vec<usize>,
    /// `1 x H x W`
    pub attention: Tensor<T>,
    /// `C x H x W`
    pub fused: Tensor<T>,
    /// `C`
    pub feature: Tensor<T>,
}

fn check_map<T: Scalar>(map: &Tensor<T>, channels: usize) -> Result<()> {
    if map.rank() != 3 || map.shape()[0] != channels {
        return Err(Error::dim(
            "sgsa",
            format!("feature map {:?} against {channels} classifier channels", map.shape()),
        ));
    }
    Ok(())
}

/// `sigmoid(W gap(F) + b)` on the tape.
pub fn scores_on_tape<T: Scalar>(tape: &mut Tape<T>, map: Var, weight: Var, bias: Var) -> Result<Var> {
    let (q, c) = (tape.value(weight).shape()[0], tape.value(weight).shape()[1]);
    check_map(tape.value(map), c)?;
    let pooled = tape.gap(map)?;
    let pooled = tape.reshape(pooled, [c, 1])?;
    let logits = tape.matmul(weight, pooled)?;
    let bias = tape.reshape(bias, [q, 1])?;
    let logits = tape.add(logits, bias)?;
    let p = tape.sigmoid(logits)?;
    tape.reshape(p, [q])
}

/// Activation maps `W[rows] . F` as a `len(rows) x (H*W)` matrix.
pub fn cams_on_tape<T: Scalar>(tape: &mut Tape<T>, map: Var, weight: Var, rows: &[usize]) -> Result<Var> {
    let shape = tape.value(map).shape().to_vec();
    check_map(tape.value(map), tape.value(weight).shape()[1])?;
    let w = tape.select_rows(weight, rows)?;
    let flat = tape.reshape(map, [shape[0], shape[1] * shape[2]])?;
    tape.matmul(w, flat)
}

/// Merges the rows of a `D x (H*W)` map stack into a `1 x H x W` attention map.
pub fn merge_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cams: Var,
    height: usize,
    width: usize,
    normalize: bool,
) -> Result<Var> {
    let d = tape.value(cams).rows();
    let mut merged = tape.select_rows(cams, &[0])?;
    for i in 1..d {
        let row = tape.select_rows(cams, &[i])?;
        merged = tape.max(merged, row)?;
    }
    if normalize {
        merged = tape.relu(merged)?;
        let top = tape.max_all(merged)?;
        merged = tape.div_scalar(merged, top, T::from_f64_lossy(ATTENTION_EPS))?;
    }
    tape.reshape(merged, [1, height, width])
}

/// `F' = (F * M) + F` with `M` broadcast across channels.
pub fn fuse_on_tape<T: Scalar>(tape: &mut Tape<T>, map: Var, attention: Var) -> Result<Var> {
    let weighted = tape.mul(map, attention)?;
    tape.add(weighted, map)
}

/// Full attention flow on the tape. Top-D selection is a hard choice made
/// from the forward scores; gradients flow through the selected maps only.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    map: Var,
    weight: Var,
    bias: Var,
    cfg: &AttentionConfig,
) -> Result<AttentionVars> {
    let scores = scores_on_tape(tape, map, weight, bias)?;
    if !cfg.enabled {
        let feature = tape.gap(map)?;
        return Ok(AttentionVars {
            scores,
            selected: Vec::new(),
            attention: None,
            fused: None,
            feature,
        });
    }
    let selected = select_top_d(tape.value(scores).data(), cfg.top_d)?;
    let shape = tape.value(map).shape().to_vec();
    let cams = cams_on_tape(tape, map, weight, &selected)?;
    let attention = merge_on_tape(tape, cams, shape[1], shape[2], cfg.normalize)?;
    let fused = fuse_on_tape(tape, map, attention)?;
    let feature = tape.gap(fused)?;
    Ok(AttentionVars {
        scores,
        selected,
        attention: Some(attention),
        fused: Some(fused),
        feature,
    })
}

/// Attribute confidences for one feature map.
pub fn apm_scores<T: Scalar>(map: &Tensor<T>, params: &ApmParams<T>) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let (m, w, b) = bind(&mut tape, map, params)?;
    let p = scores_on_tape(&mut tape, m, w, b)?;
    Ok(tape.value(p).data().to_vec())
}

/// Class activation map of attribute `index`, as `H x W`.
pub fn cam<T: Scalar>(map: &Tensor<T>, params: &ApmParams<T>, index: usize) -> Result<Tensor<T>> {
    if index >= params.attributes() {
        return Err(Error::Argument(format!(
            "attribute index {index} out of {}",
            params.attributes()
        )));
    }
    let mut tape = Tape::new();
    let (m, w, _) = bind(&mut tape, map, params)?;
    let c = cams_on_tape(&mut tape, m, w, &[index])?;
    tape.value(c).reshaped(map.shape()[1..].to_vec())
}

/// Indices of the `d` largest scores; ties go to the lower index.
pub fn select_top_d<T: Scalar>(scores: &[T], d: usize) -> Result<Vec<usize>> {
    if d == 0 || d > scores.len() {
        return Err(Error::Argument(format!(
            "top-D count {d} outside 1..={}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.truncate(d);
    Ok(order)
}

/// Pointwise maximum over `H x W` maps, optionally rectified and rescaled into `[0, 1]`.
pub fn attention_map<T: Scalar>(cams: &[Tensor<T>], normalize: bool) -> Result<Tensor<T>> {
    let first = cams
        .first()
        .ok_or_else(|| Error::Argument("attention map over no activation maps".into()))?;
    let spatial = first.shape().to_vec();
    if spatial.len() != 2 || cams.iter().any(|c| c.shape() != spatial.as_slice()) {
        return Err(Error::dim("attention_map", "activation maps must share one H x W shape"));
    }
    let rows: Vec<Vec<T>> = cams.iter().map(|c| c.data().to_vec()).collect();
    let mut tape = Tape::new();
    let stack = tape.constant(Tensor::from_rows(&rows)?)?;
    let m = merge_on_tape(&mut tape, stack, spatial[0], spatial[1], normalize)?;
    Ok(tape.value(m).clone())
}

pub fn fuse<T: Scalar>(map: &Tensor<T>, attention: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let m = tape.constant(map.clone())?;
    let a = tape.constant(attention.clone())?;
    let f = fuse_on_tape(&mut tape, m, a)?;
    Ok(tape.value(f).clone())
}

/// Runs the attention flow and returns every intermediate.
pub fn visual_feature<T: Scalar>(
    map: &Tensor<T>,
    params: &ApmParams<T>,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput<T>> {
    let mut tape = Tape::new();
    let (m, w, b) = bind(&mut tape, map, params)?;
    let vars = forward_on_tape(&mut tape, m, w, b, cfg)?;
    let shape = map.shape();
    let attention = match vars.attention {
        Some(a) => tape.value(a).clone(),
        None => Tensor::zeros(vec![1, shape[1], shape[2]]),
    };
    let fused = match vars.fused {
        Some(f) => tape.value(f).clone(),
        None => map.clone(),
    };
    Ok(AttentionOutput {
        scores: tape.value(vars.scores).data().to_vec(),
        selected: vars.selected,
        attention,
        fused,
        feature: tape.value(vars.feature).clone(),
    })
}

fn bind<T: Scalar>(tape: &mut Tape<T>, map: &Tensor<T>, params: &ApmParams<T>) -> Result<(Var, Var, Var)> {
    check_map(map, params.channels())?;
    Ok((
        tape.constant(map.clone())?,
        tape.constant(params.weight.clone())?,
        tape.constant(params.bias.clone())?,
    ))
}

/// Renders a map as binary 8-bit PGM, min-max scaled to `0..=255`.
pub fn render_pgm(map: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = match map.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => (1, s.iter().product()),
    };
    let lo = map.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

/// Files written for one dumped image.
#[derive(Clone, Debug)]
pub struct DumpPaths {
    pub header: PathBuf,
    pub tensor: PathBuf,
    pub image: PathBuf,
}

/// Writes `<id>.txt` (selected attributes and scores), `<id>.mft` (the map) and `<id>.pgm`.
pub fn write_attention_dump(
    dir: &Path,
    image_id: &str,
    output: &AttentionOutput<f32>,
    attribute_names: &[String],
) -> Result<DumpPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut header = String::new();
    writeln!(header, "image\t{image_id}").unwrap();
    writeln!(header, "shape\t{:?}", output.attention.shape()).unwrap();
    writeln!(header, "rank\tattribute\tname\tscore").unwrap();
    for (rank, &q) in output.selected.iter().enumerate() {
        let name = attribute_names.get(q).map(String::as_str).unwrap_or("?");
        writeln!(header, "{rank}\t{q}\t{name}\t{:.6}", output.scores[q]).unwrap();
    }
    let paths = DumpPaths {
        header: dir.join(format!("{image_id}.txt")),
        tensor: dir.join(format!("{image_id}.mft")),
        image: dir.join(format!("{image_id}.pgm")),
    };
    std::fs::write(&paths.header, header).map_err(|e| Error::io(&paths.header, e))?;
    tensor_io::write(&paths.tensor, &output.attention)?;
    std::fs::write(&paths.image, render_pgm(&output.attention)).map_err(|e| Error::io(&paths.image, e))?;
    Ok(paths)
}
