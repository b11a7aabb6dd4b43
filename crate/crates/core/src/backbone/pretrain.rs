use rand::Rng;
use serde::{Deserialize, Serialize};

use super::BackboneModel;
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tasks::Example;

/// Full-parameter plain SGD on the labelled source examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 4000,
            lr: 0.1,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean minibatch loss of every step.
    pub losses: Vec<f64>,
}

/// Trains every backbone parameter on `examples`; the caller freezes the
/// result before adaptation.
pub fn pretrain<T: Scalar>(
    mut model: BackboneModel<T>,
    examples: &[Example],
    cfg: &PretrainConfig,
) -> Result<(BackboneModel<T>, PretrainReport)> {
    if model.is_frozen() {
        return Err(Error::Contract("pretraining needs a trainable (unfrozen) model".into()));
    }
    if cfg.steps > 0 && examples.is_empty() {
        return Err(Error::Argument("pretraining needs at least one example".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0) {
        return Err(Error::Argument("pretrain batch_size must be >= 1 and lr >= 0".into()));
    }
    let mut rng = rng::derived(cfg.seed, 1);
    let lr = T::lit(cfg.lr);
    let mut report = PretrainReport::default();
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let mut logits = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let ex = &examples[rng.gen_range(0..examples.len())];
            let x = bound.embed(&mut g, &ex.ids)?;
            logits.push(bound.forward(&mut g, x, 0, &vec![true; ex.ids.len()])?);
            labels.push(ex.label);
        }
        let stacked = g.stack_rows(&logits)?;
        let loss = g.cross_entropy(stacked, &labels)?;
        let value = g.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::Training { step, loss: value });
        }
        report.losses.push(value);
        g.backward(loss)?;
        model.sgd_step(&g, &bound, lr);
    }
    Ok((model, report))
}
