//! Episodic training.

pub mod checkpoint;
pub mod episode;
pub mod optimizer;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::{DcmConfig, LossWeights};
use crate::model::{episode_loss, EpisodeInputs, Mode, Model, Objective};
use crate::numeric::{Tape, Tensor};
use crate::sgsa::AttentionConfig;

pub use checkpoint::{Checkpoint, CheckpointMeta, DatasetSignature, RngState};
pub use episode::{sample_episode, EpisodeDraw, TrainSet};
pub use optimizer::{AdamConfig, OptimizerState};

pub const LOG_FILE: &str = "train.log";
pub const TIMING_FILE: &str = "timing.log";
pub const MODEL_DIR: &str = "model";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Stream of the generator used for parameter initialization; episodes use stream 0.
const INIT_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub episodes: usize,
    /// Identities per episode, `N`.
    pub identities_per_episode: usize,
    /// Images per identity per episode.
    pub shots: usize,
    /// Hidden width of the prototype perceptron. When unset: half the channel
    /// count, but never below twice the attribute count.
    pub hidden: Option<usize>,
    pub attention: AttentionConfig,
    pub dcm: DcmConfig,
    pub loss_weights: LossWeights,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Write `checkpoints/epNNNNNN` every this many episodes; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Prototype,
            episodes: 2000,
            identities_per_episode: 16,
            shots: 4,
            hidden: None,
            attention: AttentionConfig::default(),
            dcm: DcmConfig::default(),
            loss_weights: LossWeights::default(),
            optimizer: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, attributes: usize, seen: usize) -> Result<()> {
        if self.identities_per_episode < 2 || self.identities_per_episode > seen {
            return Err(Error::Config(format!(
                "identities per episode must lie in 2..={seen}, got {}",
                self.identities_per_episode
            )));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        if self.attention.top_d == 0 || self.attention.top_d > attributes {
            return Err(Error::Config(format!(
                "top-D must lie in 1..={attributes}, got {}",
                self.attention.top_d
            )));
        }
        if self.hidden == Some(0) {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        self.dcm.validate()?;
        self.optimizer.validate()
    }

    pub fn hidden_size(&self, attributes: usize, channels: usize) -> usize {
        self.hidden.unwrap_or((channels / 2).max(2 * attributes))
    }

    pub fn objective(&self) -> Objective {
        Objective {
            attention: self.attention,
            dcm: self.dcm,
            weights: self.loss_weights,
        }
    }

    /// Digest of everything that shapes the trained model. The episode count
    /// and checkpoint cadence are left out so a resumed run keeps its digest.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("train config serializes");
        let map = value.as_object_mut().expect("train config is an object");
        map.remove("episodes");
        map.remove("checkpoint_every");
        config_hash(&value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub cea: f32,
    pub dcm: f32,
    pub total: f32,
}

/// Forward, backward and one optimizer update.
pub fn train_step(
    model: &mut Model<f32>,
    state: &mut OptimizerState,
    inputs: &EpisodeInputs<f32>,
    objective: &Objective,
    adam: &AdamConfig,
) -> Result<StepLosses> {
    let step = state.step + 1;
    let annotate = |e: Error| match e {
        Error::NonFinite(op) => Error::Numeric(format!("non-finite value from {op} at step {step}")),
        other => other,
    };
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true)?;
    let loss = episode_loss(&mut tape, &vars, inputs, objective).map_err(annotate)?;
    let losses = StepLosses {
        cea: tape.value(loss.cea).item(),
        dcm: tape.value(loss.dcm).item(),
        total: tape.value(loss.total).item(),
    };
    for (name, v) in [("cea", losses.cea), ("dcm", losses.dcm), ("total", losses.total)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is {v} at step {step}")));
        }
    }
    let mut grads = tape.backward(loss.total).map_err(annotate)?;
    let grads: Vec<Tensor<f32>> = vars
        .all()
        .into_iter()
        .zip(model.params())
        .map(|(v, (_, p))| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    state.update(model.params_mut(), &grads, adam)?;
    Ok(losses)
}

/// Result of a [`fit`] call.
#[derive(Clone, Debug)]
pub struct FitSummary {
    pub config_hash: String,
    pub episodes: usize,
    pub model_dir: PathBuf,
    pub log: PathBuf,
    pub losses: Vec<StepLosses>,
}

fn header(hash: &str) -> String {
    format!("episode\tcea\tdcm\ttotal\tconfig={hash}\n")
}

fn log_line(episode: usize, l: &StepLosses) -> String {
    format!("{episode}\t{:.6}\t{:.6}\t{:.6}\n", l.cea, l.dcm, l.total)
}

fn parse_log(text: &str, upto: usize) -> Result<Vec<StepLosses>> {
    let mut out = Vec::with_capacity(upto);
    for line in text.lines().skip(1).take(upto) {
        let cols: Vec<f32> = line.split('\t').skip(1).filter_map(|c| c.parse().ok()).collect();
        if cols.len() != 3 {
            return Err(Error::Manifest(format!("malformed log line {line:?}")));
        }
        out.push(StepLosses {
            cea: cols[0],
            dcm: cols[1],
            total: cols[2],
        });
    }
    if out.len() != upto {
        return Err(Error::Manifest(format!("log holds {} episodes, checkpoint is at {upto}", out.len())));
    }
    Ok(out)
}

/// Runs episodic training into `out`: `train.log`, `timing.log`, periodic
/// checkpoints and the final model in `out/model`. With `resume`, training
/// continues from that checkpoint and rewrites the log from its episode on.
pub fn fit(dataset: &Dataset, cfg: &TrainConfig, out: &Path, resume: Option<&Path>) -> Result<FitSummary> {
    let train = TrainSet::new(dataset)?;
    cfg.validate(dataset.attributes(), train.len())?;
    let hash = cfg.hash();
    let seen = train.ids(dataset);
    let signature = DatasetSignature::of(dataset);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOG_FILE);
    let timing_path = out.join(TIMING_FILE);

    let (mut model, mut state, mut rng, start, mut log, mut timing, mut losses) = match resume {
        Some(dir) => {
            let ckpt = Checkpoint::load(dir)?;
            if ckpt.meta.config_hash != hash {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with config {}, current config is {hash}",
                    dir.display(),
                    ckpt.meta.config_hash
                )));
            }
            ckpt.meta.dataset.check(dataset)?;
            if ckpt.meta.seen_identities != seen {
                return Err(Error::Config("checkpoint was trained on different seen identities".into()));
            }
            if ckpt.meta.episode > cfg.episodes {
                return Err(Error::Config(format!(
                    "checkpoint is at episode {}, beyond the requested {}",
                    ckpt.meta.episode, cfg.episodes
                )));
            }
            let text = std::fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let losses = parse_log(&text, ckpt.meta.episode)?;
            let mut log = header(&hash);
            text.lines().skip(1).take(ckpt.meta.episode).for_each(|l| {
                log.push_str(l);
                log.push('\n');
            });
            let mut timing = String::from("episode\tseconds\n");
            if let Ok(t) = std::fs::read_to_string(&timing_path) {
                t.lines().skip(1).take(ckpt.meta.episode).for_each(|l| {
                    timing.push_str(l);
                    timing.push('\n');
                });
            }
            let rng = ckpt.meta.rng.restore()?;
            (ckpt.model, ckpt.optimizer, rng, ckpt.meta.episode, log, timing, losses)
        }
        None => {
            let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
            init.set_stream(INIT_STREAM);
            let model = Model::init(
                cfg.mode,
                dataset.attributes(),
                dataset.feature_shape()[0],
                cfg.hidden_size(dataset.attributes(), dataset.feature_shape()[0]),
                train.len(),
                &mut init,
            );
            let state = OptimizerState::new(model.params().into_iter().map(|(_, t)| t));
            let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let log = header(&hash);
            (model, state, rng, 0, log, String::from("episode\tseconds\n"), Vec::new())
        }
    };

    let snapshot = |model: &Model<f32>, state: &OptimizerState, rng: &ChaCha8Rng, episode: usize| Checkpoint {
        meta: CheckpointMeta {
            format_version: checkpoint::FORMAT_VERSION,
            config_hash: hash.clone(),
            mode: cfg.mode,
            episode,
            train: cfg.clone(),
            dataset: signature.clone(),
            seen_identities: seen.clone(),
            rng: RngState::capture(rng),
            optimizer_step: state.step,
            tensors: Vec::new(),
        },
        model: model.clone(),
        optimizer: state.clone(),
    };

    let objective = cfg.objective();
    let pools = train.pool_sizes();
    let clock = Instant::now();
    for episode in start + 1..=cfg.episodes {
        let draw = sample_episode(&pools, cfg.identities_per_episode, cfg.shots, &mut rng)?;
        let inputs = train.inputs(dataset, &draw)?;
        let step = train_step(&mut model, &mut state, &inputs, &objective, &cfg.optimizer)
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("episode {episode}: {msg}")),
                Error::NonFinite(op) => Error::Numeric(format!("episode {episode}: non-finite value produced by {op}")),
                other => other,
            })?;
        log.push_str(&log_line(episode, &step));
        writeln!(timing, "{episode}\t{:.3}", clock.elapsed().as_secs_f64()).unwrap();
        losses.push(step);
        if cfg.checkpoint_every > 0 && episode % cfg.checkpoint_every == 0 && episode < cfg.episodes {
            snapshot(&model, &state, &rng, episode).save(&out.join(CHECKPOINT_DIR).join(format!("ep{episode:06}")))?;
            std::fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
        }
    }

    let model_dir = out.join(MODEL_DIR);
    snapshot(&model, &state, &rng, cfg.episodes).save(&model_dir)?;
    std::fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
    std::fs::write(&timing_path, &timing).map_err(|e| Error::io(&timing_path, e))?;
    Ok(FitSummary {
        config_hash: hash,
        episodes: cfg.episodes,
        model_dir,
        log: log_path,
        losses,
    })
}
