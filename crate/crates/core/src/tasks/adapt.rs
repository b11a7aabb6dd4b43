//! Adaptation of a frozen backbone and evaluation.

use std::thread;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::{Example, NEUTRAL_TOKEN};
use crate::autograd::{Graph, NodeId, Tensor};
use crate::backbone::{BackboneModel, BoundBackbone};
use crate::error::{Error, Result};
use crate::peft::{fit_to_budget, BoundMethod, MethodKind, MethodSpec, PeftMethod};
use crate::rng;
use crate::scalar::Scalar;

/// Environment variable capping evaluation threads (default 1).
pub const THREADS_ENV: &str = "ADEPT_LAB_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: MethodKind,
    pub prompt_len: usize,
    /// Trainable-scalar budget the offset rank or bottleneck is sized to.
    pub budget: usize,
    pub prompt_lr: f64,
    /// Learning rate of the low-rank factors or the offset network.
    pub network_lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub seed: u64,
}

impl RunConfig {
    /// Desk-scale defaults: a 10-row soft prompt defines the budget
    /// (10·16 = 160 scalars); the offset methods use a 4-row prompt and
    /// spend the rest on their offsets.
    pub fn default_for(method: MethodKind) -> Self {
        RunConfig {
            method,
            prompt_len: match method {
                MethodKind::Pt => 10,
                _ => 4,
            },
            budget: 160,
            prompt_lr: 0.5,
            network_lr: 0.01,
            steps: 2000,
            batch_size: 16,
            eval_interval: 50,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prompt_lr >= 0.0 && self.prompt_lr.is_finite())
            || !(self.network_lr >= 0.0 && self.network_lr.is_finite())
        {
            return Err(Error::Argument("learning rates must be finite and >= 0".into()));
        }
        if self.batch_size == 0 || self.eval_interval == 0 || self.prompt_len == 0 {
            return Err(Error::Argument(
                "batch_size, eval_interval and prompt_len must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Method shape for a backbone of width `dim` and `max_len` content positions.
    pub fn method_spec(&self, dim: usize, max_len: usize) -> Result<MethodSpec> {
        fit_to_budget(self.method, self.budget, dim, self.prompt_len, max_len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean minibatch loss since the previous record.
    pub train_loss: f64,
    pub valid_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub history: Vec<MetricsRecord>,
    pub best_step: Option<usize>,
    pub best_valid_accuracy: Option<f64>,
}

/// Trains only the method's tensors against the frozen backbone with
/// two-group minibatch SGD and returns the checkpoint with the best
/// validation accuracy (earliest on ties).
pub fn adapt<T: Scalar>(
    backbone: &BackboneModel<T>,
    method: PeftMethod<T>,
    train: &[Example],
    valid: &[Example],
    cfg: &RunConfig,
) -> Result<(PeftMethod<T>, AdaptReport)> {
    if !backbone.is_frozen() {
        return Err(Error::Contract("adaptation needs a frozen backbone".into()));
    }
    if method.dim() != backbone.embed_dim() {
        return Err(Error::dims(
            "adapt",
            &[method.dim()],
            &[backbone.embed_dim()],
        ));
    }
    cfg.validate()?;
    let mut report = AdaptReport::default();
    if cfg.steps == 0 {
        return Ok((method, report));
    }
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Argument("adaptation needs non-empty train and valid splits".into()));
    }

    let mut rng = rng::derived(cfg.seed, 3);
    let (prompt_lr, network_lr) = (T::lit(cfg.prompt_lr), T::lit(cfg.network_lr));
    let mut current = method;
    let mut best: Option<(PeftMethod<T>, f64, usize)> = None;
    let mut interval_loss = 0.0;
    let mut interval_steps = 0usize;

    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let bb = backbone.bind_constant(&mut g);
        let bm = current.bind(&mut g)?;
        let batch: Vec<&Example> = (0..cfg.batch_size)
            .map(|_| &train[rng.gen_range(0..train.len())])
            .collect();
        let loss = batch_loss(&mut g, &bb, &bm, &batch)?;
        let value = g.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::Training { step, loss: value });
        }
        g.backward(loss)?;
        current.sgd_step(&g, &bm, prompt_lr, network_lr);
        interval_loss += value;
        interval_steps += 1;

        let done = step + 1;
        if done % cfg.eval_interval == 0 || done == cfg.steps {
            let acc = evaluate(backbone, Some(&current), valid, 0)?.accuracy;
            report.history.push(MetricsRecord {
                step: done,
                train_loss: interval_loss / interval_steps as f64,
                valid_accuracy: acc,
            });
            interval_loss = 0.0;
            interval_steps = 0;
            if best.as_ref().map_or(true, |(_, b, _)| acc > *b) {
                best = Some((current.clone(), acc, done));
            }
        }
    }
    let (method, acc, step) = best.expect("at least one evaluation when steps > 0");
    report.best_step = Some(step);
    report.best_valid_accuracy = Some(acc);
    Ok((method, report))
}

/// Mean cross-entropy of `batch` with every sequence passed through the
/// method and the backbone.
pub fn batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    backbone: &BoundBackbone,
    method: &BoundMethod,
    batch: &[&Example],
) -> Result<NodeId> {
    let mut logits = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for ex in batch {
        let e = backbone.embed(g, &ex.ids)?;
        let (x, prompt_len) = method.assemble(g, e)?;
        logits.push(backbone.forward(g, x, prompt_len, &vec![true; ex.ids.len()])?);
        labels.push(ex.label);
    }
    let stacked = g.stack_rows(&logits)?;
    g.cross_entropy(stacked, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// Evaluation threads from `ADEPT_LAB_THREADS`, defaulting to 1.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Predicted class of one token sequence, optionally through a method.
pub fn predict<T: Scalar>(
    backbone: &BackboneModel<T>,
    method: Option<&PeftMethod<T>>,
    ids: &[usize],
) -> Result<usize> {
    let e = backbone.embed(ids)?;
    let (input, prompt_len) = match method {
        None => (e, 0),
        Some(m) => {
            let adapted = m.apply(&e)?;
            let l = adapted.prompt.rows();
            (Tensor::concat_rows(&[&adapted.prompt, &adapted.content])?, l)
        }
    };
    let logits = backbone.logits(&input, prompt_len, &vec![true; ids.len()])?;
    Ok(logits.argmax_rows()[0])
}

/// Accuracy and per-example predictions. With `prepend_neutral = t`, every
/// sequence is prefixed by `t` copies of [`NEUTRAL_TOKEN`] before embedding.
pub fn evaluate<T: Scalar>(
    backbone: &BackboneModel<T>,
    method: Option<&PeftMethod<T>>,
    examples: &[Example],
    prepend_neutral: usize,
) -> Result<EvalResult> {
    evaluate_with_threads(backbone, method, examples, prepend_neutral, threads_from_env())
}

pub fn evaluate_with_threads<T: Scalar>(
    backbone: &BackboneModel<T>,
    method: Option<&PeftMethod<T>>,
    examples: &[Example],
    prepend_neutral: usize,
    threads: usize,
) -> Result<EvalResult> {
    if examples.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty split".into()));
    }
    let run = |chunk: &[Example]| -> Result<Vec<usize>> {
        chunk
            .iter()
            .map(|ex| {
                let ids: Vec<usize> = std::iter::repeat(NEUTRAL_TOKEN)
                    .take(prepend_neutral)
                    .chain(ex.ids.iter().copied())
                    .collect();
                predict(backbone, method, &ids)
            })
            .collect()
    };
    let threads = threads.clamp(1, examples.len());
    let predictions: Vec<usize> = if threads == 1 {
        run(examples)?
    } else {
        let chunk = examples.len().div_ceil(threads);
        let parts: Vec<Result<Vec<usize>>> = thread::scope(|s| {
            let handles: Vec<_> = examples.chunks(chunk).map(|c| s.spawn(move || run(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(examples.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };
    let correct = predictions
        .iter()
        .zip(examples)
        .filter(|(&p, ex)| p == ex.label)
        .count();
    Ok(EvalResult {
        accuracy: correct as f64 / examples.len() as f64,
        predictions,
    })
}
