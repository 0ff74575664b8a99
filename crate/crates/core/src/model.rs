//! The trainable model: attribute classifier, prototype perceptron and,
//! in image-to-image mode, a classifier whose weight rows are prototypes.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{cea_on_tape, dcm_on_tape, total_on_tape, DcmConfig, LossVars, LossWeights};
use crate::numeric::{Scalar, Tape, Tensor, Var};
use crate::plm::{fan_in_uniform, prototypes_on_tape, MlpParams, MlpVars};
use crate::sgsa::{forward_on_tape, visual_feature, ApmParams, AttentionConfig, AttentionOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Prototypes come from attribute vectors; serves I2A and A2I.
    #[serde(rename = "i2a", alias = "a2i")]
    Prototype,
    /// Prototypes are classifier weight rows over the seen identities; serves I2I.
    #[serde(rename = "i2i")]
    Classifier,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i2a" | "a2i" => Ok(Mode::Prototype),
            "i2i" => Ok(Mode::Classifier),
            other => Err(Error::Argument(format!("unknown mode {other:?} (expected i2a or i2i)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Prototype => "i2a",
            Mode::Classifier => "i2i",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub mode: Mode,
    pub apm: ApmParams<T>,
    pub plm: Option<MlpParams<T>>,
    /// `K x C`, one row per seen identity.
    pub fc: Option<Tensor<T>>,
}

/// Parameter names in storage order.
pub const APM_WEIGHT: &str = "apm.weight";
pub const APM_BIAS: &str = "apm.bias";
pub const FC_WEIGHT: &str = "fc.weight";

pub fn is_bias(name: &str) -> bool {
    name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2")
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters: fan-in uniform weights, zero classifier bias.
    pub fn init(mode: Mode, attributes: usize, channels: usize, hidden: usize, seen: usize, rng: &mut impl Rng) -> Self {
        let apm = ApmParams {
            weight: fan_in_uniform(vec![attributes, channels], channels, rng),
            bias: Tensor::zeros(vec![attributes]),
        };
        match mode {
            Mode::Prototype => Model {
                mode,
                apm,
                plm: Some(MlpParams::init(attributes, hidden, channels, rng)),
                fc: None,
            },
            Mode::Classifier => Model {
                mode,
                apm,
                plm: None,
                fc: Some(fan_in_uniform(vec![seen, channels], channels, rng)),
            },
        }
    }

    pub fn attributes(&self) -> usize {
        self.apm.attributes()
    }

    pub fn channels(&self) -> usize {
        self.apm.channels()
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = vec![(APM_WEIGHT, &self.apm.weight), (APM_BIAS, &self.apm.bias)];
        if let Some(p) = &self.plm {
            out.extend([("plm.w1", &p.w1), ("plm.b1", &p.b1), ("plm.w2", &p.w2), ("plm.b2", &p.b2)]);
        }
        if let Some(fc) = &self.fc {
            out.push((FC_WEIGHT, fc));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut out = vec![(APM_WEIGHT, &mut self.apm.weight), (APM_BIAS, &mut self.apm.bias)];
        if let Some(p) = &mut self.plm {
            out.extend([
                ("plm.w1", &mut p.w1),
                ("plm.b1", &mut p.b1),
                ("plm.w2", &mut p.w2),
                ("plm.b2", &mut p.b2),
            ]);
        }
        if let Some(fc) = &mut self.fc {
            out.push((FC_WEIGHT, fc));
        }
        out
    }

    /// Rebuilds a model from named tensors, checking that every piece fits.
    pub fn from_params(mode: Mode, mut named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut take = |name: &str| -> Result<Tensor<T>> {
            let pos = named
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Manifest(format!("parameter {name} is missing")))?;
            Ok(named.swap_remove(pos).1)
        };
        let apm = ApmParams::new(take(APM_WEIGHT)?, take(APM_BIAS)?)?;
        let model = match mode {
            Mode::Prototype => {
                let plm = MlpParams::new(take("plm.w1")?, take("plm.b1")?, take("plm.w2")?, take("plm.b2")?)?;
                if plm.inputs() != apm.attributes() || plm.outputs() != apm.channels() {
                    return Err(Error::dim(
                        "model",
                        format!(
                            "perceptron {}->{} against {} attributes and {} channels",
                            plm.inputs(),
                            plm.outputs(),
                            apm.attributes(),
                            apm.channels()
                        ),
                    ));
                }
                Model { mode, apm, plm: Some(plm), fc: None }
            }
            Mode::Classifier => {
                let fc = take(FC_WEIGHT)?;
                if fc.rank() != 2 || fc.shape()[1] != apm.channels() {
                    return Err(Error::dim("model", format!("fc weight {:?}", fc.shape())));
                }
                Model { mode, apm, plm: None, fc: Some(fc) }
            }
        };
        if let Some((name, _)) = named.first() {
            return Err(Error::Manifest(format!("unexpected parameter {name}")));
        }
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            mode: self.mode,
            apm: ApmParams {
                weight: self.apm.weight.cast(),
                bias: self.apm.bias.cast(),
            },
            plm: self.plm.as_ref().map(|p| MlpParams {
                w1: p.w1.cast(),
                b1: p.b1.cast(),
                w2: p.w2.cast(),
                b2: p.b2.cast(),
            }),
            fc: self.fc.as_ref().map(|t| t.cast()),
        }
    }

    /// Puts every parameter on the tape, in [`Model::params`] order.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<ModelVars> {
        let apm_weight = tape.leaf(self.apm.weight.clone(), trainable)?;
        let apm_bias = tape.leaf(self.apm.bias.clone(), trainable)?;
        let plm = self.plm.as_ref().map(|p| p.bind(tape, trainable)).transpose()?;
        let fc = self.fc.as_ref().map(|t| tape.leaf(t.clone(), trainable)).transpose()?;
        Ok(ModelVars {
            apm_weight,
            apm_bias,
            plm,
            fc,
        })
    }

    pub fn visual_feature(&self, map: &Tensor<T>, attention: &AttentionConfig) -> Result<AttentionOutput<T>> {
        visual_feature(map, &self.apm, attention)
    }

    /// Prototypes for rows of category-level attribute vectors.
    pub fn prototypes(&self, attributes: &[Vec<T>]) -> Result<Tensor<T>> {
        let plm = self.plm.as_ref().ok_or_else(|| {
            Error::Protocol("an image-to-image model has no attribute perceptron".into())
        })?;
        crate::plm::prototypes(attributes, plm)
    }
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub apm_weight: Var,
    pub apm_bias: Var,
    pub plm: Option<MlpVars>,
    pub fc: Option<Var>,
}

impl ModelVars {
    /// Handles in [`Model::params`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.apm_weight, self.apm_bias];
        if let Some(p) = &self.plm {
            out.extend([p.w1, p.b1, p.w2, p.b2]);
        }
        out.extend(self.fc);
        out
    }
}

/// Everything the loss needs from one episode.
#[derive(Clone, Debug)]
pub struct EpisodeInputs<T = f32> {
    pub maps: Vec<Tensor<T>>,
    /// Episode-local label of each map.
    pub labels: Vec<usize>,
    /// Image-level attribute annotations of each map.
    pub targets: Vec<Vec<T>>,
    /// `N x Q` category-level attribute vectors of the episode identities.
    pub class_attributes: Tensor<T>,
    /// Classifier rows of the episode identities.
    pub class_rows: Vec<usize>,
}

/// Settings that shape the objective rather than the parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub attention: AttentionConfig,
    pub dcm: DcmConfig,
    pub weights: LossWeights,
}

/// Builds both losses for an episode. Attribute scores come from the raw map,
/// the prototype-matching feature from the attended map.
pub fn episode_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    inputs: &EpisodeInputs<T>,
    objective: &Objective,
) -> Result<LossVars> {
    let n = inputs.maps.len();
    if n == 0 || inputs.labels.len() != n || inputs.targets.len() != n {
        return Err(Error::Argument(format!(
            "episode with {n} maps, {} labels and {} target rows",
            inputs.labels.len(),
            inputs.targets.len()
        )));
    }
    let prototypes = match (&vars.plm, vars.fc) {
        (Some(mlp), _) => {
            let attrs = tape.constant(inputs.class_attributes.clone())?;
            prototypes_on_tape(tape, attrs, mlp)?
        }
        (None, Some(fc)) => tape.select_rows(fc, &inputs.class_rows)?,
        (None, None) => return Err(Error::Argument("model has no prototype source".into())),
    };
    let mut cea = Vec::with_capacity(n);
    let mut dcm = Vec::with_capacity(n);
    for ((map, &label), targets) in inputs.maps.iter().zip(&inputs.labels).zip(&inputs.targets) {
        let m = tape.constant(map.clone())?;
        let flow = forward_on_tape(tape, m, vars.apm_weight, vars.apm_bias, &objective.attention)?;
        cea.push(cea_on_tape(tape, flow.scores, targets)?);
        dcm.push(dcm_on_tape(tape, flow.feature, prototypes, label, &objective.dcm)?);
    }
    total_on_tape(tape, &cea, &dcm, &objective.weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn inputs(rng: &mut ChaCha8Rng, n: usize, shots: usize, q: usize) -> EpisodeInputs<f64> {
        let maps = (0..n * shots).map(|_| random(rng, &[8, 4, 4])).collect();
        let labels = (0..n * shots).map(|i| i / shots).collect();
        let targets = (0..n * shots)
            .map(|_| (0..q).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect())
            .collect();
        let class_attributes = Tensor::new(vec![n, q], (0..n * q).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        EpisodeInputs {
            maps,
            labels,
            targets,
            class_attributes,
            class_rows: (0..n).rev().collect(),
        }
    }

    fn check(mode: Mode, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model: Model<f64> = Model::init(mode, 6, 8, 5, 7, &mut rng);
        let model = Model { apm: ApmParams { weight: model.apm.weight.clone(), bias: random(&mut rng, &[6]) }, ..model };
        let inputs = inputs(&mut rng, 4, 2, 6);
        let objective = Objective {
            attention: AttentionConfig { top_d: 3, ..Default::default() },
            dcm: DcmConfig { scale: 4.0, margin: 0.3, ..Default::default() },
            weights: LossWeights::default(),
        };
        let params: Vec<Tensor<f64>> = model.params().into_iter().map(|(_, t)| t.clone()).collect();
        let report = grad_check(
            |tape, vars| {
                let mv = match mode {
                    Mode::Prototype => ModelVars {
                        apm_weight: vars[0],
                        apm_bias: vars[1],
                        plm: Some(MlpVars { w1: vars[2], b1: vars[3], w2: vars[4], b2: vars[5] }),
                        fc: None,
                    },
                    Mode::Classifier => ModelVars { apm_weight: vars[0], apm_bias: vars[1], plm: None, fc: Some(vars[2]) },
                };
                Ok(episode_loss(tape, &mv, &inputs, &objective)?.total)
            },
            &params,
            1e-6,
        )
        .unwrap();
        report.max_rel_error
    }

    #[test]
    fn episode_loss_gradients_match_finite_differences() {
        for seed in 0..3 {
            assert!(check(Mode::Prototype, seed) < 1e-5);
            assert!(check(Mode::Classifier, seed) < 1e-5);
        }
    }

    #[test]
    fn params_round_trip_by_name() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mode in [Mode::Prototype, Mode::Classifier] {
            let model: Model = Model::init(mode, 4, 6, 3, 5, &mut rng);
            let named = model.params().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
            assert_eq!(Model::from_params(mode, named).unwrap(), model);
        }
        let model: Model = Model::init(Mode::Prototype, 4, 6, 3, 5, &mut rng);
        let mut named: Vec<_> = model.params().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        named.pop();
        assert!(Model::<f32>::from_params(Mode::Prototype, named).is_err());
    }

    #[test]
    fn mode_strings() {
        assert_eq!("i2a".parse::<Mode>().unwrap(), Mode::Prototype);
        assert_eq!("a2i".parse::<Mode>().unwrap(), Mode::Prototype);
        assert_eq!("i2i".parse::<Mode>().unwrap(), Mode::Classifier);
        assert!("x2y".parse::<Mode>().is_err());
        assert!(is_bias("apm.bias") && is_bias("plm.b2") && !is_bias("plm.w1"));
    }
}
