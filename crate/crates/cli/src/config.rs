//! Layered configuration: built-in defaults, then a JSON file, then
//! `--section.key value` flags.

use std::path::Path;

use adept_lab::backbone::{BackboneConfig, PretrainConfig, Scaling};
use adept_lab::peft::MethodKind;
use adept_lab::tasks::{RunConfig, Split, TaskSuite};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const SECTIONS: [&str; 5] = ["backbone", "task", "method", "run", "analysis"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    pub kind: MethodKind,
    /// Defaults to 10 rows for plain soft prompts and 4 otherwise.
    pub prompt_len: Option<usize>,
    /// Trainable-scalar budget the offset rank or bottleneck is sized to.
    pub budget: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub prompt_lr: f64,
    pub network_lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Target split used by `eval`, the probes and `data`; unset means test
    /// for `eval` and the probes, train for `stats` and `data`.
    pub split: Option<Split>,
    /// Cyclic shifts; defaults to `0, 1, s/4, s/2` for `s` offset positions.
    pub shifts: Option<Vec<usize>>,
    /// Example of the split whose tokens feed `decompose` and `prepend`.
    pub example: usize,
    /// Query position within that example.
    pub position: usize,
    pub layer: usize,
    pub head: usize,
    pub scaling: Scaling,
    /// Neutral tokens placed in front of the content by `prepend`.
    pub prefix_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub backbone: BackboneConfig,
    pub task: TaskSuite,
    pub method: MethodSection,
    pub run: RunSection,
    pub analysis: AnalysisSection,
}

impl Default for CliConfig {
    fn default() -> Self {
        let run = RunConfig::default_for(MethodKind::Adept);
        let pretrain = PretrainConfig::default();
        CliConfig {
            backbone: BackboneConfig::default(),
            task: TaskSuite::default(),
            method: MethodSection {
                kind: MethodKind::Adept,
                prompt_len: None,
                budget: run.budget,
            },
            run: RunSection {
                seed: 0,
                prompt_lr: run.prompt_lr,
                network_lr: run.network_lr,
                steps: run.steps,
                batch_size: run.batch_size,
                eval_interval: run.eval_interval,
                pretrain_steps: pretrain.steps,
                pretrain_lr: pretrain.lr,
                pretrain_batch_size: pretrain.batch_size,
            },
            analysis: AnalysisSection {
                split: None,
                shifts: None,
                example: 0,
                position: 0,
                layer: 0,
                head: 0,
                scaling: Scaling::Scaled,
                prefix_len: 2,
            },
        }
    }
}

impl CliConfig {
    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.run.pretrain_steps,
            lr: self.run.pretrain_lr,
            batch_size: self.run.pretrain_batch_size,
            seed: self.run.seed,
        }
    }

    pub fn run_config(&self) -> RunConfig {
        let kind = self.method.kind;
        RunConfig {
            method: kind,
            prompt_len: self
                .method
                .prompt_len
                .unwrap_or(RunConfig::default_for(kind).prompt_len),
            budget: self.method.budget,
            prompt_lr: self.run.prompt_lr,
            network_lr: self.run.network_lr,
            steps: self.run.steps,
            batch_size: self.run.batch_size,
            eval_interval: self.run.eval_interval,
            seed: self.run.seed,
        }
    }

    pub fn shifts(&self) -> Vec<usize> {
        let s = self.backbone.max_content_len;
        self.analysis
            .shifts
            .clone()
            .unwrap_or_else(|| vec![0, 1, s / 4, s / 2])
    }

    /// Checks every section before any work starts; each failure names the
    /// offending key.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |key: &str, e: adept_lab::Error| CliError::Config(format!("{key}: {e}"));
        self.backbone.validate().map_err(|e| cfg("backbone", e))?;
        self.task.validate(&self.backbone).map_err(|e| cfg("task", e))?;
        let run = self.run_config();
        run.validate().map_err(|e| cfg("run", e))?;
        run.method_spec(self.backbone.embed_dim, self.backbone.max_content_len)
            .map_err(|e| cfg("method.budget", e))?;
        if run.prompt_len > self.backbone.max_prompt_len {
            return Err(CliError::Config(format!(
                "method.prompt_len: {} exceeds backbone.max_prompt_len {}",
                run.prompt_len, self.backbone.max_prompt_len
            )));
        }
        if self.run.pretrain_batch_size == 0 || !(self.run.pretrain_lr >= 0.0 && self.run.pretrain_lr.is_finite()) {
            return Err(CliError::Config(
                "run.pretrain_batch_size must be >= 1 and run.pretrain_lr finite and >= 0".into(),
            ));
        }
        if let Some(&bad) = self.shifts().iter().find(|&&j| j > self.backbone.max_content_len) {
            return Err(CliError::Config(format!(
                "analysis.shifts: {bad} exceeds the {} offset positions",
                self.backbone.max_content_len
            )));
        }
        if self.analysis.layer >= self.backbone.layers {
            return Err(CliError::Config(format!(
                "analysis.layer: {} but the backbone has {} layers",
                self.analysis.layer, self.backbone.layers
            )));
        }
        if self.analysis.head >= self.backbone.heads {
            return Err(CliError::Config(format!(
                "analysis.head: {} but the backbone has {} heads",
                self.analysis.head, self.backbone.heads
            )));
        }
        if self.analysis.prefix_len == 0 {
            return Err(CliError::Config("analysis.prefix_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, everything else
/// replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Interprets a flag value: JSON when it parses, a comma-separated list when
/// the key holds an array, a plain string otherwise.
fn flag_value(current: &Value, raw: &str) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        return v;
    }
    if current.is_array() || current.is_null() && raw.contains(',') {
        let items: Option<Vec<Value>> = raw
            .split(',')
            .map(|s| serde_json::from_str(s.trim()).ok())
            .collect();
        if let Some(items) = items {
            return Value::Array(items);
        }
    }
    Value::String(raw.to_string())
}

fn set_dotted(root: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let mut node = root;
    for part in key.split('.') {
        let next = match node {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        };
        node = next.ok_or_else(|| CliError::Config(format!("{key}: unknown configuration key")))?;
    }
    let v = flag_value(node, raw);
    *node = v;
    Ok(())
}

/// Builds the effective configuration. Precedence: flag > file > default.
pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<CliConfig, CliError> {
    let mut value = serde_json::to_value(CliConfig::default()).expect("default config serializes");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(CliError::Config("config file must hold a JSON object".into()));
        }
        merge(&mut value, patch);
    }
    for (key, raw) in overrides {
        set_dotted(&mut value, key, raw)?;
    }
    let config: CliConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{path}: {}", e.into_inner()))
    })?;
    config.validate()?;
    Ok(config)
}

/// Splits `--section.key value` and `--section.key=value` flags off the
/// argument list, leaving the rest for the regular parser.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        if arg == "--" {
            rest.push(arg);
            rest.extend(it.by_ref());
            break;
        }
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        let Some((section, _)) = key.split_once('.') else {
            rest.push(arg);
            continue;
        };
        if !SECTIONS.contains(&section) {
            return Err(CliError::Config(format!("{key}: unknown configuration section {section:?}")));
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| CliError::Config(format!("{key}: missing value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}
