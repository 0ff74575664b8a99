//! Attribute classification error and cross-modal distribution consistency.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{softmax, AngularMargin, Scalar, Tape, Tensor, Var};

/// Scores are clamped into `[SCORE_EPS, 1 - SCORE_EPS]` before taking logs.
pub const SCORE_EPS: f64 = 1e-7;
/// Cosines are clamped into `[-1 + COS_EPS, 1 - COS_EPS]`.
pub const COS_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stability {
    /// Linear surrogate for the target logit once `theta + d` passes `pi`.
    #[default]
    ArcfaceFallback,
    /// The margined cosine everywhere.
    Strict,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcmConfig {
    /// Hypersphere radius `r`.
    pub scale: f64,
    /// Additive angular margin `d`, radians.
    pub margin: f64,
    pub stability: Stability,
}

impl Default for DcmConfig {
    fn default() -> Self {
        DcmConfig {
            scale: 32.0,
            margin: 0.2,
            stability: Stability::ArcfaceFallback,
        }
    }
}

impl DcmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("feature scale must be > 0, got {}", self.scale)));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Config(format!("angular margin must lie in [0, pi/2), got {}", self.margin)));
        }
        Ok(())
    }

    pub fn angular_margin<T: Scalar>(&self) -> AngularMargin<T> {
        AngularMargin {
            scale: T::from_f64_lossy(self.scale),
            margin: T::from_f64_lossy(self.margin),
            fallback: self.stability == Stability::ArcfaceFallback,
        }
    }
}

fn check_targets<T: Scalar>(targets: &[T]) -> Result<()> {
    if let Some(t) = targets.iter().find(|&&t| t != T::zero() && t != T::one()) {
        return Err(Error::Argument(format!("attribute target {t} is not 0 or 1")));
    }
    Ok(())
}

/// Summed binary cross-entropy over attributes for one image.
pub fn cea_on_tape<T: Scalar>(tape: &mut Tape<T>, scores: Var, targets: &[T]) -> Result<Var> {
    check_targets(targets)?;
    tape.binary_cross_entropy(scores, targets, T::from_f64_lossy(SCORE_EPS))
}

/// Attribute loss averaged over a batch of `(scores, targets)` pairs.
pub fn cea_loss<T: Scalar>(scores: &[Vec<T>], targets: &[Vec<T>]) -> Result<T> {
    if scores.is_empty() || scores.len() != targets.len() {
        return Err(Error::Argument("cea_loss needs one target row per score row".into()));
    }
    let mut tape = Tape::new();
    let mut terms = Vec::with_capacity(scores.len());
    for (p, r) in scores.iter().zip(targets) {
        let p = tape.constant(Tensor::vector(p.clone()))?;
        terms.push(cea_on_tape(&mut tape, p, r)?);
    }
    let mean = mean_on_tape(&mut tape, &terms)?;
    Ok(tape.value(mean).item())
}

fn check_norms<T: Scalar>(v: &[T], prototypes: &Tensor<T>, ids: Option<&[String]>) -> Result<()> {
    let eps = T::from_f64_lossy(crate::numeric::NORM_EPS);
    let norm = |x: &[T]| x.iter().map(|&a| a * a).sum::<T>().sqrt();
    if norm(v) <= eps {
        return Err(Error::Degenerate("visual feature has zero norm".into()));
    }
    for j in 0..prototypes.rows() {
        if norm(prototypes.row(j)) <= eps {
            let name = ids
                .and_then(|ids| ids.get(j).cloned())
                .unwrap_or_else(|| format!("#{j}"));
            return Err(Error::Degenerate(format!("prototype of identity {name} has zero norm")));
        }
    }
    Ok(())
}

/// Clamped cosines between `v` (`C`) and each row of `prototypes` (`N x C`), as an `N` vector.
pub fn cosines_on_tape<T: Scalar>(tape: &mut Tape<T>, v: Var, prototypes: Var) -> Result<Var> {
    let c = tape.value(v).len();
    let n = tape.value(prototypes).rows();
    if tape.value(prototypes).row_len() != c {
        return Err(Error::dim(
            "cosine_angles",
            format!("feature of {c} against prototypes {:?}", tape.value(prototypes).shape()),
        ));
    }
    let v = tape.reshape(v, [c])?;
    let vn = tape.l2_normalize(v)?;
    let vn = tape.reshape(vn, [c, 1])?;
    let pn = tape.l2_normalize(prototypes)?;
    let cos = tape.matmul(pn, vn)?;
    let cos = tape.reshape(cos, [n])?;
    let eps = T::from_f64_lossy(COS_EPS);
    tape.clamp(cos, -T::one() + eps, T::one() - eps)
}

/// `cos(theta_j)` between a feature and every prototype, clamped away from +-1.
pub fn cosine_angles<T: Scalar>(v: &[T], prototypes: &Tensor<T>, ids: Option<&[String]>) -> Result<Vec<T>> {
    check_norms(v, prototypes, ids)?;
    let mut tape = Tape::new();
    let vv = tape.constant(Tensor::vector(v.to_vec()))?;
    let pv = tape.constant(prototypes.clone())?;
    let cos = cosines_on_tape(&mut tape, vv, pv)?;
    Ok(tape.value(cos).data().to_vec())
}

/// Class probabilities under the margined hypersphere softmax.
pub fn dcm_probability<T: Scalar>(cosines: &[T], target: usize, cfg: &DcmConfig) -> Vec<T> {
    softmax(&cfg.angular_margin::<T>().logits(cosines, target))
}

/// The margin-free hypersphere softmax, `softmax(r cos theta)`.
pub fn margin_free_probability<T: Scalar>(cosines: &[T], scale: T) -> Vec<T> {
    let logits: Vec<T> = cosines.iter().map(|&c| scale * c).collect();
    softmax(&logits)
}

/// `-log p(x in m_y | x)` for one feature against an episode's prototypes.
pub fn dcm_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    v: Var,
    prototypes: Var,
    target: usize,
    cfg: &DcmConfig,
) -> Result<Var> {
    let cos = cosines_on_tape(tape, v, prototypes)?;
    let logits = tape.margin_logits(cos, target, cfg.angular_margin())?;
    tape.cross_entropy(logits, target)
}

/// Per-sample visual features, labels and attribute targets against one prototype set.
#[derive(Clone, Debug)]
pub struct EpisodeBatch<T = f32> {
    pub features: Vec<Vec<T>>,
    pub labels: Vec<usize>,
    pub prototypes: Tensor<T>,
    pub attribute_targets: Vec<Vec<T>>,
}

impl<T: Scalar> EpisodeBatch<T> {
    pub fn validate(&self) -> Result<()> {
        let n = self.prototypes.rows();
        if self.features.len() != self.labels.len() {
            return Err(Error::Argument("one label per feature required".into()));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= n) {
            return Err(Error::Argument(format!("label {y} outside {n} prototypes")));
        }
        self.attribute_targets.iter().try_for_each(|t| check_targets(t))
    }
}

/// Mean distribution-consistency loss over a batch.
pub fn dcm_loss<T: Scalar>(batch: &EpisodeBatch<T>, cfg: &DcmConfig) -> Result<T> {
    batch.validate()?;
    cfg.validate()?;
    let mut tape = Tape::new();
    let protos = tape.constant(batch.prototypes.clone())?;
    let mut terms = Vec::with_capacity(batch.features.len());
    for (v, &y) in batch.features.iter().zip(&batch.labels) {
        check_norms(v, &batch.prototypes, None)?;
        let v = tape.constant(Tensor::vector(v.clone()))?;
        terms.push(dcm_on_tape(&mut tape, v, protos, y, cfg)?);
    }
    let mean = mean_on_tape(&mut tape, &terms)?;
    Ok(tape.value(mean).item())
}

pub fn mean_on_tape<T: Scalar>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let sum = tape.add_n(terms)?;
    tape.scale(sum, T::one() / T::from_usize(terms.len()).unwrap())
}

/// Coefficients on the two objectives; both 1 in the full model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cea: f64,
    pub dcm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cea: 1.0, dcm: 1.0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cea: Var,
    pub dcm: Var,
    pub total: Var,
}

/// Batch means of both objectives and their weighted sum.
pub fn total_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cea_terms: &[Var],
    dcm_terms: &[Var],
    weights: &LossWeights,
) -> Result<LossVars> {
    let cea = mean_on_tape(tape, cea_terms)?;
    let dcm = mean_on_tape(tape, dcm_terms)?;
    let a = tape.scale(cea, T::from_f64_lossy(weights.cea))?;
    let b = tape.scale(dcm, T::from_f64_lossy(weights.dcm))?;
    let total = tape.add(a, b)?;
    Ok(LossVars { cea, dcm, total })
}
