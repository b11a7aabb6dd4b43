//! Synthetic tasks and the pretrain → freeze → adapt harness.
//!
//! The backbone is pretrained on a suite of source tasks, each announced by
//! a reserved indicator token. The default target asks whether key 13 is
//! present, a question the source suite only ever asks as "does 13 occur at
//! least twice", and it comes without any indicator token, so the adaptation
//! method has to supply the task signal itself.

mod adapt;
mod data;

pub use adapt::{
    adapt, batch_loss, evaluate, evaluate_with_threads, predict, threads_from_env, AdaptReport, EvalResult,
    MetricsRecord, RunConfig, THREADS_ENV,
};
pub use data::{
    generate, positive_rate, read_jsonl, write_jsonl, Dataset, Example, Split, TaskKind, TaskSpec,
    NEUTRAL_TOKEN,
};

use serde::{Deserialize, Serialize};

use crate::backbone::{pretrain, BackboneConfig, BackboneModel, PretrainConfig, PretrainReport};
use crate::error::Result;
use crate::peft::PeftMethod;
use crate::scalar::Scalar;

/// Source tasks for pretraining plus the held-out target task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSuite {
    pub source: Vec<TaskSpec>,
    pub target: TaskSpec,
    pub source_examples: usize,
    pub target_examples: usize,
}

impl Default for TaskSuite {
    fn default() -> Self {
        TaskSuite {
            source: vec![
                TaskSpec::presence(8, Some(1), 101),
                TaskSpec::presence(9, Some(2), 102),
                TaskSpec::presence(10, Some(3), 103),
                TaskSpec::presence(11, Some(4), 104),
                TaskSpec::count(12, 2, Some(5), 105),
                TaskSpec::count(13, 2, Some(6), 106),
            ],
            target: TaskSpec::presence(13, None, 200),
            source_examples: 1000,
            target_examples: 2000,
        }
    }
}

impl TaskSuite {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        for t in self.source.iter().chain(std::iter::once(&self.target)) {
            t.validate(backbone.max_content_len)?;
            if t.vocab != backbone.vocab_size {
                return Err(crate::Error::Argument(format!(
                    "task vocab {} differs from backbone vocab_size {}",
                    t.vocab, backbone.vocab_size
                )));
            }
        }
        Ok(())
    }

    pub fn source_datasets(&self) -> Result<Vec<Dataset>> {
        self.source
            .iter()
            .map(|t| generate(t, self.source_examples))
            .collect()
    }

    pub fn target_dataset(&self) -> Result<Dataset> {
        generate(&self.target, self.target_examples)
    }
}

/// Pooled split of several datasets, in suite order.
pub fn pooled(datasets: &[Dataset], split: Split) -> Vec<Example> {
    datasets
        .iter()
        .flat_map(|d| d.split(split).iter().cloned())
        .collect()
}

/// Initialises and pretrains a backbone on the suite's source tasks and
/// returns it frozen.
pub fn pretrain_backbone<T: Scalar>(
    config: &BackboneConfig,
    suite: &TaskSuite,
    pretrain_cfg: &PretrainConfig,
) -> Result<(BackboneModel<T>, PretrainReport)> {
    suite.validate(config)?;
    let model = BackboneModel::init(config.clone(), pretrain_cfg.seed)?;
    let sources = suite.source_datasets()?;
    let (mut model, report) = pretrain(model, &pooled(&sources, Split::Train), pretrain_cfg)?;
    model.freeze();
    Ok((model, report))
}

/// Initialises a method for `backbone` per `cfg` and adapts it on the target
/// task's train split, selecting on its valid split.
pub fn adapt_on<T: Scalar>(
    backbone: &BackboneModel<T>,
    target: &Dataset,
    cfg: &RunConfig,
) -> Result<(PeftMethod<T>, AdaptReport)> {
    let spec = cfg.method_spec(backbone.embed_dim(), backbone.config.max_content_len)?;
    let method = PeftMethod::init(&spec, backbone, cfg.seed)?;
    adapt(
        backbone,
        method,
        target.split(Split::Train),
        target.split(Split::Valid),
        cfg,
    )
}
