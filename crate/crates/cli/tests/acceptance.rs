//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the binary exits non-zero if any criterion fails. Runs without the libtest
//! harness so the lines are never captured.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use adept_lab::analysis::{
    adept_decompose, dept_decompose, offset_stats, prepend_probe, pt_decompose, shift_probe, DecompositionReport,
};
use adept_lab::autograd::{grad_check, Graph, NodeId, Tensor};
use adept_lab::backbone::{BackboneConfig, BackboneModel, HeadWeights, PretrainConfig, Scaling};
use adept_lab::checkpoint::{load_backbone, load_method};
use adept_lab::peft::{
    solve_bottleneck, AdaptivePrompt, BoundMethod, BudgetSpec, DecomposedPrompt, MethodKind, MethodSpec,
    PeftMethod, SoftPrompt,
};
use adept_lab::rng::{self, LabRng};
use adept_lab::tasks::{
    adapt_on, batch_loss, evaluate, pretrain_backbone, Dataset, Example, RunConfig, Split, TaskSuite,
};
use adept_lab::{Backbone64, Method64};
use rand::Rng;
use serde_json::Value;

const GAP_TOL: f64 = 1e-10;
const REDUCTION_TOL: f64 = 1e-12;
const GRAD_EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const VALID_TARGET: f64 = 0.9;
const PRETRAIN_LIMIT: Duration = Duration::from_secs(120);
const PIPELINE_LIMIT: Duration = Duration::from_secs(180);

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn head(r: &mut LabRng, d: usize, dh: usize) -> HeadWeights<f64> {
    HeadWeights {
        w_q: rng::uniform(r, &[d, dh], -1.0, 1.0),
        w_k: rng::uniform(r, &[d, dh], -1.0, 1.0),
        w_v: rng::uniform(r, &[d, dh], -1.0, 1.0),
    }
}

fn adaptive(r: &mut LabRng, prompt: &Tensor<f64>, bott: usize) -> AdaptivePrompt<f64> {
    let d = prompt.cols();
    AdaptivePrompt {
        prompt: prompt.clone(),
        w_down: rng::uniform(r, &[d, bott], -1.0, 1.0),
        b_1: rng::uniform(r, &[bott], -1.0, 1.0),
        w_up: rng::uniform(r, &[bott, d], -1.0, 1.0),
        b_2: rng::uniform(r, &[d], -1.0, 1.0),
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Attention of one query over `keys`, written out with plain loops.
fn naive_attention(q: &[f64], keys: &Tensor<f64>, h: &HeadWeights<f64>, scaled: bool) -> Vec<f64> {
    let dh = h.head_dim();
    let proj = |x: &[f64], w: &Tensor<f64>| -> Vec<f64> {
        (0..dh).map(|c| x.iter().enumerate().map(|(r, v)| v * w.get(r, c)).sum()).collect()
    };
    let qp = proj(q, &h.w_q);
    let mut logits: Vec<f64> = (0..keys.rows())
        .map(|i| {
            let k = proj(keys.row(i), &h.w_k);
            qp.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    if scaled {
        logits.iter_mut().for_each(|v| *v /= (dh as f64).sqrt());
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0; dh];
    for i in 0..keys.rows() {
        let v = proj(keys.row(i), &h.w_v);
        for c in 0..dh {
            out[c] += w[i] / z * v[c];
        }
    }
    out
}

fn plus_row(x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| a + b).collect()
}

fn budget_criterion() -> Outcome {
    let start = Instant::now();
    let at = |l| BudgetSpec {
        budget: 76800,
        dim: 768,
        prompt_len: l,
    };
    for (l, want) in [(20, 39), (40, 29), (60, 19), (80, 9)] {
        let r = solve_bottleneck(at(l)).map_err(|e| e.to_string())?;
        check(r == want, format!("l={l}: r={r}, want {want}"))?;
    }
    let count = MethodSpec {
        kind: MethodKind::Adept,
        prompt_len: 60,
        rank: 19,
        max_len: 0,
        dim: 768,
    }
    .param_count();
    // l·d + (d·r + r) + (r·d + d)
    let oracle = 60 * 768 + (768 * 19 + 19) + (19 * 768 + 768);
    check(count == 76051 && count == oracle && count <= 76800, format!("param count {count}"))?;
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(1), format!("took {elapsed:?}"))?;
    Ok(format!("r = 39/29/19/9, 76051 params, {elapsed:?}"))
}

fn decomposition_criterion() -> Outcome {
    let start = Instant::now();
    let mut r = rng::seeded(1001);
    let mut worst = [0.0f64; 3];
    for _ in 0..200 {
        let d = [4, 8, 16][r.gen_range(0..3)];
        let s = r.gen_range(1..=10);
        let l = r.gen_range(1..=5);
        let dh = [1, 2, d / 2, d][r.gen_range(0..4)];
        let scaled = r.gen_bool(0.5);
        let h = head(&mut r, d, dh);
        let prompt = rng::uniform::<f64>(&mut r, &[l, d], -1.0, 1.0);
        let content = rng::uniform::<f64>(&mut r, &[s, d], -1.0, 1.0);
        let pos = r.gen_range(0..s);
        let query = content.row(pos).to_vec();
        let bott = r.gen_range(1..=4);
        let ap = adaptive(&mut r, &prompt, bott);
        let rank = r.gen_range(1..=4);
        let max_len = s + r.gen_range(0..4);
        let dp = DecomposedPrompt {
            prompt: prompt.clone(),
            a: rng::uniform(&mut r, &[max_len, rank], -1.0, 1.0),
            b: rng::uniform(&mut r, &[rank, d], -1.0, 1.0),
        };
        let scaling = Scaling::from_flag(scaled);

        let pt = pt_decompose(&query, &content, &prompt, &h, scaling).map_err(|e| e.to_string())?;
        let keys = Tensor::concat_rows(&[&prompt, &content]).unwrap();
        let want = naive_attention(&query, &keys, &h, scaled);

        let ad = adept_decompose(&query, &content, &ap, &h, scaling).map_err(|e| e.to_string())?;
        let shifted = content.add(&ap.offsets(&content).unwrap()).unwrap();
        let keys_a = Tensor::concat_rows(&[&prompt, &shifted]).unwrap();
        let want_a = naive_attention(shifted.row(pos), &keys_a, &h, scaled);

        let de = dept_decompose(&query, pos, &content, &dp, &h, scaling).map_err(|e| e.to_string())?;
        let table = dp.a.matmul(&dp.b).unwrap();
        let moved = content.add(&table.slice_rows(0, s).unwrap()).unwrap();
        let keys_d = Tensor::concat_rows(&[&prompt, &moved]).unwrap();
        let want_d = naive_attention(&plus_row(&query, table.row(pos)), &keys_d, &h, scaled);

        for (i, (rep, oracle)) in [(&pt, &want), (&ad, &want_a), (&de, &want_d)].into_iter().enumerate() {
            let gap = rep.max_abs_gap.max(max_diff(&rep.reconstructed, oracle));
            worst[i] = worst[i].max(gap);
        }
    }
    let elapsed = start.elapsed();
    check(worst.iter().all(|&g| g < GAP_TOL), format!("gaps {worst:?}"))?;
    check(elapsed < Duration::from_secs(10), format!("took {elapsed:?}"))?;
    Ok(format!("200 instances per method, worst gaps {worst:?}, {elapsed:?}"))
}

fn reports_match(a: &DecompositionReport<f64>, b: &DecompositionReport<f64>) -> f64 {
    [
        max_diff(&a.prefix_weights, &b.prefix_weights),
        max_diff(&a.bias_term, &b.bias_term),
        max_diff(&a.content_weights, &b.content_weights),
        max_diff(&a.content_term, &b.content_term),
        max_diff(&a.reconstructed, &b.reconstructed),
        max_diff(&a.direct, &b.direct),
        (a.prefix_mass - b.prefix_mass).abs(),
        (a.scale - b.scale).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn reduction_criterion() -> Outcome {
    let mut r = rng::seeded(1002);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let d = [4, 8][r.gen_range(0..2)];
        let s = r.gen_range(1..=8);
        let h = head(&mut r, d, d / 2);
        let l = r.gen_range(1..=3);
        let prompt = rng::uniform::<f64>(&mut r, &[l, d], -1.0, 1.0);
        let content = rng::uniform::<f64>(&mut r, &[s, d], -1.0, 1.0);
        let pos = r.gen_range(0..s);
        let query = content.row(pos).to_vec();
        let scaling = Scaling::from_flag(r.gen_bool(0.5));
        let pt = pt_decompose(&query, &content, &prompt, &h, scaling).unwrap();
        let bott = r.gen_range(1..=3);
        let zero_net = AdaptivePrompt {
            prompt: prompt.clone(),
            w_down: rng::uniform(&mut r, &[d, bott], -1.0, 1.0),
            b_1: rng::uniform(&mut r, &[bott], -1.0, 1.0),
            w_up: Tensor::zeros(&[bott, d]),
            b_2: Tensor::zeros(&[d]),
        };
        let zero_table = DecomposedPrompt {
            prompt: prompt.clone(),
            a: Tensor::zeros(&[s + 2, 2]),
            b: rng::uniform(&mut r, &[2, d], -1.0, 1.0),
        };
        let ad = adept_decompose(&query, &content, &zero_net, &h, scaling).unwrap();
        let de = dept_decompose(&query, pos, &content, &zero_table, &h, scaling).unwrap();
        worst = worst.max(reports_match(&pt, &ad)).max(reports_match(&pt, &de));
    }
    check(worst <= REDUCTION_TOL, format!("max difference {worst:e}"))?;
    Ok(format!("50 instances, max difference {worst:.1e}"))
}

fn prepend_criterion() -> Outcome {
    let mut r = rng::seeded(1003);
    for i in 0..100 {
        let d = r.gen_range(1..=16);
        let prompt = rng::uniform::<f64>(&mut r, &[2, d], -1.0, 1.0);
        let bott = r.gen_range(1..=6);
        let m = PeftMethod::Adaptive(adaptive(&mut r, &prompt, bott));
        let (s, p) = (r.gen_range(1..=16), r.gen_range(1..=8));
        let content = rng::uniform::<f64>(&mut r, &[s, d], -3.0, 3.0);
        let prefix = rng::uniform::<f64>(&mut r, &[p, d], -3.0, 3.0);
        let change = prepend_probe(&m, &content, &prefix).map_err(|e| e.to_string())?;
        check(change == 0.0, format!("pair {i}: offset change {change:e}"))?;
    }
    Ok("100 pairs, offset change exactly 0".into())
}

fn gradient_criterion() -> Outcome {
    let mut bb = BackboneModel::<f64>::init(BackboneConfig::default(), 31).unwrap();
    let mut r = rng::seeded(32);
    for t in bb.tensors_mut() {
        *t = t.add(&rng::uniform::<f64>(&mut r, t.shape(), -0.2, 0.2)).unwrap();
    }
    bb.freeze();
    let examples = [
        Example {
            ids: vec![5, 13, 40, 2, 2, 61, 9],
            label: 1,
        },
        Example {
            ids: vec![30, 7, 19, 44],
            label: 0,
        },
    ];
    let refs: Vec<&Example> = examples.iter().collect();
    let mut worst = Vec::new();
    for kind in MethodKind::ALL {
        let spec = MethodSpec {
            kind,
            prompt_len: 3,
            rank: 2,
            max_len: 32,
            dim: 16,
        };
        let mut m = PeftMethod::init(&spec, &bb, 33).unwrap();
        for t in m.tensors_mut() {
            *t = t.add(&rng::uniform::<f64>(&mut r, t.shape(), -0.2, 0.2)).unwrap();
        }
        let params: Vec<Tensor<f64>> = m.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let report = grad_check(
            |g: &mut Graph<f64>, ids: &[NodeId]| {
                let bound_bb = bb.bind_constant(g);
                let bound = BoundMethod::from_nodes(g, kind, ids.to_vec())?;
                batch_loss(g, &bound_bb, &bound, &refs)
            },
            &params,
            GRAD_EPS,
        )
        .map_err(|e| e.to_string())?;
        check(
            report.max_rel_error < GRAD_TOL,
            format!("{kind}: relative error {:e} at {:?}", report.max_rel_error, report.worst),
        )?;
        worst.push(report.max_rel_error);

        let mut g = Graph::new();
        let bound_bb = bb.bind(&mut g);
        let bound = m.bind(&mut g).unwrap();
        let loss = batch_loss(&mut g, &bound_bb, &bound, &refs).unwrap();
        g.backward(loss).unwrap();
        check(
            bound_bb.node_ids().iter().all(|&id| g.grad(id).is_none()),
            format!("{kind}: backbone received a gradient"),
        )?;
        check(
            bound.node_ids().iter().all(|&id| g.grad(id).is_some()),
            format!("{kind}: method tensor without gradient"),
        )?;
    }
    Ok(format!("max relative errors PT/DePT/ADePT {worst:?}, backbone untouched"))
}

fn stats_criterion() -> Outcome {
    let cfg = BackboneConfig {
        vocab_size: 4,
        embed_dim: 2,
        heads: 1,
        head_dim: 2,
        layers: 1,
        classes: 2,
        ffn_dim: 3,
        max_content_len: 2,
        max_prompt_len: 1,
        ..BackboneConfig::default()
    };
    let mut bb = BackboneModel::<f64>::init(cfg, 1).unwrap();
    bb.freeze();
    let examples = [Example {
        ids: vec![1, 2],
        label: 0,
    }];
    // Offset rows A·B = [[1, -1], [3, -3]].
    let fixture = PeftMethod::Decomposed(DecomposedPrompt {
        prompt: Tensor::zeros(&[1, 2]),
        a: Tensor::from_f64_rows(&[&[1.0], &[3.0]]).unwrap(),
        b: Tensor::from_f64_rows(&[&[1.0, -1.0]]).unwrap(),
    });
    let rep = offset_stats(&bb, &fixture, &examples).map_err(|e| e.to_string())?;
    check(
        (rep.offset.mean, rep.offset.variance) == (2.0, 1.0),
        format!("fixture gave {:?}", rep.offset),
    )?;
    let zero = PeftMethod::SoftPrompt(SoftPrompt {
        prompt: Tensor::zeros(&[1, 2]),
    });
    let rep = offset_stats(&bb, &zero, &examples).map_err(|e| e.to_string())?;
    check(
        (rep.offset.mean, rep.offset.variance) == (0.0, 0.0),
        format!("zero method gave {:?}", rep.offset),
    )?;
    Ok("fixture (2, 1), zero method (0, 0)".into())
}

struct Trained {
    backbone: Backbone64,
    target: Dataset,
    methods: Vec<Method64>,
}

fn learning_criterion(out: &mut Option<Trained>) -> Outcome {
    let suite = TaskSuite::default();
    let start = Instant::now();
    let (backbone, _) =
        pretrain_backbone::<f64>(&BackboneConfig::default(), &suite, &PretrainConfig::default())
            .map_err(|e| e.to_string())?;
    let pretrain_time = start.elapsed();
    let target = suite.target_dataset().map_err(|e| e.to_string())?;
    let mut methods = Vec::new();
    let mut summary = Vec::new();
    let mut failures = Vec::new();
    for kind in MethodKind::ALL {
        let cfg = RunConfig::default_for(kind);
        let (m, report) = adapt_on(&backbone, &target, &cfg).map_err(|e| e.to_string())?;
        let best = report.best_valid_accuracy.unwrap_or(0.0);
        let step = report.best_step.unwrap_or(0);
        summary.push(format!("{kind} {best:.3}@{step}"));
        if best < VALID_TARGET || step > cfg.steps {
            failures.push(format!("{kind} reached {best} at step {step}"));
        }
        methods.push(m);
    }
    let total = start.elapsed();
    *out = Some(Trained {
        backbone,
        target,
        methods,
    });
    check(failures.is_empty(), failures.join("; "))?;
    check(pretrain_time <= PRETRAIN_LIMIT, format!("pretraining took {pretrain_time:?}"))?;
    check(total <= PIPELINE_LIMIT, format!("pipeline took {total:?}"))?;
    Ok(format!(
        "valid {}; pretrain {:.1}s, total {:.1}s",
        summary.join(", "),
        pretrain_time.as_secs_f64(),
        total.as_secs_f64()
    ))
}

fn shift_criterion(trained: Option<&Trained>) -> Outcome {
    let t = trained.ok_or("no trained models")?;
    let dept = t.methods.iter().find(|m| m.kind() == MethodKind::Dept).ok_or("no DePT method")?;
    let s = t.backbone.config.max_content_len;
    let test = t.target.split(Split::Test);
    let rep = shift_probe(&t.backbone, dept, test, &[0, 1, s / 4, s / 2]).map_err(|e| e.to_string())?;
    let base = evaluate(&t.backbone, Some(dept), test, 0).map_err(|e| e.to_string())?;
    let zero = &rep.entries[0];
    check(
        zero.changed_count == 0 && zero.accuracy.to_bits() == base.accuracy.to_bits(),
        format!("shift 0 changed {} predictions", zero.changed_count),
    )?;
    let flips: Vec<usize> = rep.entries[1..].iter().map(|e| e.changed_count).collect();
    check(flips.iter().any(|&n| n > 0), format!("no prediction changed, flips {flips:?}"))?;
    Ok(format!("flips at shifts 1/{}/{}: {flips:?}, shift 0 exact", s / 4, s / 2))
}

fn cli(dir: &Path, args: &[&str], threads: &str) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_adept-lab"))
        .current_dir(dir)
        .env("ADEPT_LAB_THREADS", threads)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn cli_pipeline(dir: &Path, threads: &str) -> Result<[Vec<u8>; 4], String> {
    cli(dir, &["pretrain", "--out", "bb.json"], threads)?;
    cli(
        dir,
        &["--method.kind", "dept", "adapt", "--backbone", "bb.json", "--out", "m.json", "--metrics", "metrics.json"],
        threads,
    )?;
    let eval = cli(dir, &["eval", "--backbone", "bb.json", "--method", "m.json"], threads)?;
    let read = |f: &str| std::fs::read(dir.join(f)).map_err(|e| e.to_string());
    Ok([read("bb.json")?, read("m.json")?, read("metrics.json")?, eval])
}

fn determinism_criterion(trained: Option<&Trained>) -> Outcome {
    let t = trained.ok_or("no trained models")?;
    let dept = t.methods.iter().find(|m| m.kind() == MethodKind::Dept).ok_or("no DePT method")?;
    let first = tempfile::tempdir().map_err(|e| e.to_string())?;
    let second = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = cli_pipeline(first.path(), "1")?;

    let bb: Backbone64 = load_backbone(&first.path().join("bb.json")).map_err(|e| e.to_string())?;
    check(bb == t.backbone, "CLI backbone differs from the in-process one")?;
    let m: Method64 = load_method(&first.path().join("m.json")).map_err(|e| e.to_string())?;
    check(&m == dept, "CLI method differs from the in-process one")?;
    let eval: Value = serde_json::from_slice(&a[3]).map_err(|e| e.to_string())?;
    let want = evaluate(&t.backbone, Some(dept), t.target.split(Split::Test), 0).map_err(|e| e.to_string())?;
    let got_acc = eval["accuracy"].as_f64().ok_or("eval has no accuracy")?;
    check(got_acc.to_bits() == want.accuracy.to_bits(), format!("accuracy {got_acc} vs {}", want.accuracy))?;
    let preds: Vec<usize> = serde_json::from_value(eval["predictions"].clone()).map_err(|e| e.to_string())?;
    check(preds == want.predictions, "predictions differ")?;

    // The repeat uses several evaluation threads; nothing may change.
    let b = cli_pipeline(second.path(), "3")?;
    let names = ["backbone checkpoint", "method checkpoint", "metrics", "eval report"];
    for (i, name) in names.iter().enumerate() {
        check(a[i] == b[i], format!("{name} differs between runs"))?;
    }
    Ok(format!("CLI matches in-process (test accuracy {got_acc}), repeat byte-identical"))
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    match outcome {
        Ok(detail) => {
            println!("[PASS] {name}: {detail}");
            true
        }
        Err(why) => {
            println!("[FAIL] {name}: {why}");
            false
        }
    }
}

fn main() -> ExitCode {
    let mut trained = None;
    let results = [
        run("1 budget solver", budget_criterion),
        run("2 decomposition identities", decomposition_criterion),
        run("3 zero-offset reductions", reduction_criterion),
        run("4 token-wise offsets ignore prefixes", prepend_criterion),
        run("6 gradients and confinement", gradient_criterion),
        run("7 end-to-end learning", || learning_criterion(&mut trained)),
        run("5 positional offset shift sensitivity", || shift_criterion(trained.as_ref())),
        run("8 offset statistics fixture", stats_criterion),
        run("9 determinism and CLI round trip", || determinism_criterion(trained.as_ref())),
    ];
    let failed = results.iter().filter(|&&ok| !ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
