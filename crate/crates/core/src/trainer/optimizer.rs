//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::is_bias;
use crate::numeric::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Apply weight decay to bias vectors as well.
    pub decay_biases: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 5e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay_biases: false,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && [self.learning_rate, self.weight_decay, self.epsilon].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("optimizer settings out of range: {self:?}")))
        }
    }
}

/// Moment accumulators, one pair per parameter in model order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Tensor<f32>>,
    pub second: Vec<Tensor<f32>>,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<f32>>) -> Self {
        let first: Vec<Tensor<f32>> = params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        OptimizerState {
            step: 0,
            second: first.clone(),
            first,
        }
    }

    /// One update. `params` and `grads` follow the order the state was built with.
    pub fn update(&mut self, params: Vec<(&str, &mut Tensor<f32>)>, grads: &[Tensor<f32>], cfg: &AdamConfig) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Argument(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let lr = cfg.learning_rate as f32;
        let eps = cfg.epsilon as f32;
        for (i, ((name, p), g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::dim(
                    "optimizer",
                    format!("{name}: parameter {:?}, gradient {:?}", p.shape(), g.shape()),
                ));
            }
            let decay = if cfg.decay_biases || !is_bias(name) {
                (cfg.learning_rate * cfg.weight_decay) as f32
            } else {
                0.0
            };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m as f64 / c1;
                let v_hat = *v as f64 / c2;
                *w -= decay * *w + lr * (m_hat as f32) / ((v_hat as f32).sqrt() + eps);
            }
        }
        Ok(())
    }
}
