use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use adept_lab::analysis::{
    adept_decompose, dept_decompose, offset_stats, prepend_probe, pt_decompose, shift_probe,
};
use adept_lab::checkpoint::{load_backbone, load_method, save_backbone, save_method};
use adept_lab::peft::{
    fit_to_budget, solve_bottleneck, solve_rank, BudgetSpec, MethodKind, MethodSpec, PeftMethod,
};
use adept_lab::tasks::{
    adapt_on, evaluate, pretrain_backbone, read_jsonl, write_jsonl, Example, Split, NEUTRAL_TOKEN,
};
use adept_lab::{Backbone64, Method64};
use serde_json::{json, Value};

use crate::config::CliConfig;
use crate::CliError;

pub const SCHEMA: &str = "adept-lab/v1";

/// Writes `report` to `out`, or to stdout when no path is given.
pub fn emit(mut report: Value, out: Option<&Path>) -> Result<(), CliError> {
    if let Value::Object(map) = &mut report {
        map.insert("schema".into(), SCHEMA.into());
    }
    let text = serde_json::to_string_pretty(&report).map_err(adept_lab::Error::from)?;
    match out {
        Some(path) => std::fs::write(path, text + "\n").map_err(adept_lab::Error::from)?,
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            writeln!(lock, "{text}").map_err(adept_lab::Error::from)?;
        }
    }
    Ok(())
}

fn split_default(cfg: &CliConfig, fallback: Split) -> Split {
    cfg.analysis.split.unwrap_or(fallback)
}

fn examples(cfg: &CliConfig, data: Option<&Path>, split: Split) -> Result<Vec<Example>, CliError> {
    match data {
        Some(path) => {
            let file = File::open(path).map_err(adept_lab::Error::from)?;
            Ok(read_jsonl(BufReader::new(file))?)
        }
        None => Ok(cfg.task.target_dataset()?.split(split).to_vec()),
    }
}

pub fn pretrain(cfg: &CliConfig, out: &Path) -> Result<(), CliError> {
    let pcfg = cfg.pretrain_config();
    let (model, report) = pretrain_backbone::<f64>(&cfg.backbone, &cfg.task, &pcfg)?;
    save_backbone(&model, out)?;
    let sources = cfg.task.source_datasets()?;
    let accuracy = sources
        .iter()
        .map(|d| Ok(evaluate(&model, None, d.split(Split::Test), 0)?.accuracy))
        .collect::<Result<Vec<f64>, adept_lab::Error>>()?;
    let window = report.losses.len().min(100);
    let mean = |xs: &[f64]| if xs.is_empty() { None } else { Some(xs.iter().sum::<f64>() / xs.len() as f64) };
    emit(
        json!({
            "command": "pretrain",
            "checkpoint": out,
            "steps": pcfg.steps,
            "seed": pcfg.seed,
            "leading_loss": mean(&report.losses[..window]),
            "trailing_loss": mean(&report.losses[report.losses.len() - window..]),
            "source_test_accuracy": accuracy,
            "param_count": model.param_count(),
            "checksum": format!("{:016x}", model.checksum()),
        }),
        None,
    )
}

pub fn adapt(cfg: &CliConfig, backbone: &Path, out: &Path, metrics: Option<&Path>) -> Result<(), CliError> {
    let model: Backbone64 = load_backbone(backbone)?;
    let target = cfg.task.target_dataset()?;
    let run = cfg.run_config();
    let (method, report) = adapt_on(&model, &target, &run)?;
    save_method(&method, out)?;
    emit(
        json!({
            "command": "adapt",
            "checkpoint": out,
            "method": method.kind(),
            "param_count": method.param_count(),
            "run": run,
            "history": report.history,
            "best_step": report.best_step,
            "best_valid_accuracy": report.best_valid_accuracy,
        }),
        metrics,
    )
}

pub fn eval(
    cfg: &CliConfig,
    backbone: &Path,
    method: Option<&Path>,
    prepend: usize,
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let model: Backbone64 = load_backbone(backbone)?;
    let method: Option<Method64> = method.map(load_method).transpose()?;
    let split = split_default(cfg, Split::Test);
    let examples = examples(cfg, data, split)?;
    let result = evaluate(&model, method.as_ref(), &examples, prepend)?;
    emit(
        json!({
            "command": "eval",
            "method": method.as_ref().map(|m| m.kind()),
            "split": if data.is_some() { Value::Null } else { json!(split) },
            "prepend": prepend,
            "examples": examples.len(),
            "accuracy": result.accuracy,
            "predictions": result.predictions,
        }),
        out,
    )
}

#[derive(Clone, Copy, Debug)]
pub enum Probe {
    Decompose,
    Shift,
    Stats,
    Prepend,
}

fn pick<'a>(cfg: &CliConfig, examples: &'a [Example]) -> Result<&'a Example, CliError> {
    examples.get(cfg.analysis.example).ok_or_else(|| {
        CliError::Config(format!(
            "analysis.example: {} but the split has {} examples",
            cfg.analysis.example,
            examples.len()
        ))
    })
}

pub fn analyze(
    cfg: &CliConfig,
    probe: Probe,
    backbone: &Path,
    method: &Path,
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let model: Backbone64 = load_backbone(backbone)?;
    let method: Method64 = load_method(method)?;
    let fallback = match probe {
        Probe::Stats => Split::Train,
        _ => Split::Test,
    };
    let examples = examples(cfg, data, split_default(cfg, fallback))?;
    let a = &cfg.analysis;
    let report = match probe {
        Probe::Decompose => {
            let ex = pick(cfg, &examples)?;
            let content = model.embed(&ex.ids)?;
            if a.position >= content.rows() {
                return Err(CliError::Config(format!(
                    "analysis.position: {} but the example has {} tokens",
                    a.position,
                    content.rows()
                )));
            }
            let query = content.row(a.position).to_vec();
            let head = model.head(a.layer, a.head)?;
            let rep = match &method {
                PeftMethod::SoftPrompt(m) => pt_decompose(&query, &content, &m.prompt, head, a.scaling)?,
                PeftMethod::Adaptive(m) => adept_decompose(&query, &content, m, head, a.scaling)?,
                PeftMethod::Decomposed(m) => dept_decompose(&query, a.position, &content, m, head, a.scaling)?,
            };
            json!({
                "command": "analyze decompose",
                "method": method.kind(),
                "example": a.example,
                "position": a.position,
                "layer": a.layer,
                "head": a.head,
                "scaling": a.scaling,
                "decomposition": rep,
            })
        }
        Probe::Shift => {
            let rep = shift_probe(&model, &method, &examples, &cfg.shifts())?;
            json!({ "command": "analyze shift", "shift_probe": rep })
        }
        Probe::Stats => {
            let rep = offset_stats(&model, &method, &examples)?;
            json!({ "command": "analyze stats", "offset_stats": rep })
        }
        Probe::Prepend => {
            let ex = pick(cfg, &examples)?;
            let content = model.embed(&ex.ids)?;
            let prefix = model.embed(&vec![NEUTRAL_TOKEN; a.prefix_len])?;
            let change = prepend_probe(&method, &content, &prefix)?;
            let base = evaluate(&model, Some(&method), &examples, 0)?;
            let prepended = evaluate(&model, Some(&method), &examples, a.prefix_len)?;
            let changed = base
                .predictions
                .iter()
                .zip(&prepended.predictions)
                .filter(|(x, y)| x != y)
                .count();
            json!({
                "command": "analyze prepend",
                "method": method.kind(),
                "example": a.example,
                "prefix_len": a.prefix_len,
                "max_offset_change": change,
                "baseline_accuracy": base.accuracy,
                "prepended_accuracy": prepended.accuracy,
                "changed_predictions": changed,
            })
        }
    };
    emit(report, out)
}

pub fn budget(
    budget: usize,
    dim: usize,
    prompt_len: usize,
    max_len: Option<usize>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let spec = BudgetSpec {
        budget,
        dim,
        prompt_len,
    };
    let invalid = |e: adept_lab::Error| CliError::Config(format!("budget: {e}"));
    let r = solve_bottleneck(spec).map_err(invalid)?;
    let adept = fit_to_budget(MethodKind::Adept, budget, dim, prompt_len, 0).map_err(invalid)?;
    let pt_len = budget / dim.max(1);
    let count = |kind, prompt_len, rank, max_len| {
        MethodSpec {
            kind,
            prompt_len,
            rank,
            max_len,
            dim,
        }
        .param_count()
    };
    let mut report = json!({
        "command": "budget",
        "budget": budget,
        "dim": dim,
        "prompt_len": prompt_len,
        "r": r,
        "adept_params": adept.param_count(),
        "pt_prompt_len": pt_len,
        "pt_params": count(MethodKind::Pt, pt_len, 0, 0),
        "pt_params_at_100": count(MethodKind::Pt, 100, 0, 0),
    });
    if let Some(s) = max_len {
        let rank = solve_rank(spec, s).map_err(invalid)?;
        report["max_len"] = json!(s);
        report["dept_rank"] = json!(rank);
        report["dept_params"] = json!(count(MethodKind::Dept, prompt_len, rank, s));
    }
    emit(report, out)
}

/// Writes a split of the target task (or of source task `source`) as JSON lines.
pub fn data(cfg: &CliConfig, source: Option<usize>, out: Option<&PathBuf>) -> Result<(), CliError> {
    let split = split_default(cfg, Split::Train);
    let dataset = match source {
        None => cfg.task.target_dataset()?,
        Some(i) => {
            let spec = cfg.task.source.get(i).ok_or_else(|| {
                CliError::Config(format!("task.source: no source task {i} (have {})", cfg.task.source.len()))
            })?;
            adept_lab::tasks::generate(spec, cfg.task.source_examples)?
        }
    };
    let rows = dataset.split(split);
    match out {
        Some(path) => {
            let file = File::create(path).map_err(adept_lab::Error::from)?;
            let mut w = BufWriter::new(file);
            write_jsonl(rows, &mut w)?;
            w.flush().map_err(adept_lab::Error::from)?;
        }
        None => write_jsonl(rows, std::io::stdout().lock())?,
    }
    Ok(())
}
