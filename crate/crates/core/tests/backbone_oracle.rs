use adept_lab::autograd::Tensor;
use adept_lab::backbone::{
    pretrain, random_ids, BackboneConfig, BackboneModel, HeadWeights, PositionalMode, PretrainConfig, Scaling,
};
use adept_lab::rng;
use adept_lab::tasks::Example;
use adept_lab::Error;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            let mut s = 0.0;
            for k in 0..b.len() {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Attention spelled out one query at a time: logits, softmax, weighted sum.
fn naive_attention(q_rows: &Mat, kv_rows: &Mat, h: &HeadWeights<f64>, scaled: bool) -> Mat {
    let (wq, wk, wv) = (to_mat(&h.w_q), to_mat(&h.w_k), to_mat(&h.w_v));
    let dh = wq[0].len();
    let proj = |x: &Vec<f64>, w: &Mat| -> Vec<f64> {
        (0..dh).map(|c| (0..x.len()).map(|r| x[r] * w[r][c]).sum()).collect()
    };
    let keys: Vec<Vec<f64>> = kv_rows.iter().map(|x| proj(x, &wk)).collect();
    let vals: Vec<Vec<f64>> = kv_rows.iter().map(|x| proj(x, &wv)).collect();
    q_rows
        .iter()
        .map(|x| {
            let q = proj(x, &wq);
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| {
                    let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                    if scaled {
                        dot / (dh as f64).sqrt()
                    } else {
                        dot
                    }
                })
                .collect();
            let w = softmax(&logits);
            (0..dh).map(|c| (0..vals.len()).map(|j| w[j] * vals[j][c]).sum()).collect()
        })
        .collect()
}

fn max_gap(a: &Mat, b: &Tensor<f64>) -> f64 {
    let mut gap: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            gap = gap.max((v - b.get(i, j)).abs());
        }
    }
    gap
}

fn random_head(seed: u64, d: usize, dh: usize) -> HeadWeights<f64> {
    let mut r = rng::seeded(seed);
    HeadWeights {
        w_q: rng::uniform(&mut r, &[d, dh], -1.0, 1.0),
        w_k: rng::uniform(&mut r, &[d, dh], -1.0, 1.0),
        w_v: rng::uniform(&mut r, &[d, dh], -1.0, 1.0),
    }
}

#[test]
fn attention_matches_step_by_step_oracle() {
    let head = random_head(3, 5, 3);
    let mut r = rng::seeded(4);
    let q = rng::uniform::<f64>(&mut r, &[2, 5], -1.0, 1.0);
    let kv = rng::uniform::<f64>(&mut r, &[3, 5], -1.0, 1.0);
    for scaled in [true, false] {
        let got = head.attend(&q, &kv, Scaling::from_flag(scaled)).unwrap();
        let want = naive_attention(&to_mat(&q), &to_mat(&kv), &head, scaled);
        assert!(max_gap(&want, &got) < 1e-14);
    }
}

#[test]
fn single_key_returns_its_value() {
    let head = random_head(5, 4, 2);
    let mut r = rng::seeded(6);
    let q = rng::uniform::<f64>(&mut r, &[3, 4], -1.0, 1.0);
    let kv = rng::uniform::<f64>(&mut r, &[1, 4], -1.0, 1.0);
    let out = head.attend(&q, &kv, Scaling::Scaled).unwrap();
    let v = kv.matmul(&head.w_v).unwrap();
    for i in 0..3 {
        assert_eq!(out.row(i), v.row(0));
    }
}

#[test]
fn identical_keys_give_uniform_weights() {
    let head = random_head(7, 4, 2);
    let row = [0.3, -0.2, 0.9, 0.1];
    let kv = Tensor::<f64>::from_f64_rows(&[&row, &row, &row]).unwrap();
    let q = Tensor::<f64>::from_f64_rows(&[&[1.0, 2.0, 3.0, 4.0]]).unwrap();
    let w = head.logits(&q, &kv, Scaling::Scaled).unwrap().row_softmax().unwrap();
    assert!(w.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    let out = head.attend(&q, &kv, Scaling::Scaled).unwrap();
    let v = kv.slice_rows(0, 1).unwrap().matmul(&head.w_v).unwrap();
    assert!(out.max_abs_diff(&v).unwrap() < 1e-15);
}

#[test]
fn scaling_is_moot_for_unit_head_dim() {
    let head = random_head(8, 4, 1);
    let mut r = rng::seeded(9);
    let q = rng::uniform::<f64>(&mut r, &[3, 4], -1.0, 1.0);
    let kv = rng::uniform::<f64>(&mut r, &[5, 4], -1.0, 1.0);
    assert_eq!(
        head.attend(&q, &kv, Scaling::Scaled).unwrap(),
        head.attend(&q, &kv, Scaling::Unscaled).unwrap()
    );
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / sd * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

fn micro_config() -> BackboneConfig {
    BackboneConfig {
        vocab_size: 10,
        embed_dim: 4,
        heads: 1,
        head_dim: 4,
        layers: 1,
        classes: 3,
        ffn_dim: 6,
        max_content_len: 8,
        max_prompt_len: 4,
        positional_mode: PositionalMode::None,
        layer_norm_eps: 1e-5,
    }
}

/// Perturbs every tensor so norms and biases are not at their identity init.
fn jitter(model: &mut BackboneModel<f64>, seed: u64) {
    let mut r = rng::seeded(seed);
    for t in model.tensors_mut() {
        let noise = rng::uniform::<f64>(&mut r, t.shape(), -0.3, 0.3);
        *t = t.add(&noise).unwrap();
    }
}

#[test]
fn micro_model_matches_straight_line_oracle() {
    let mut model = BackboneModel::<f64>::init(micro_config(), 11).unwrap();
    jitter(&mut model, 12);
    let ids = [3, 1, 4, 1, 5];
    let x = to_mat(&model.embed(&ids).unwrap());
    let layer = &model.layers[0];

    let h = layer_norm(&x, layer.attn_norm.gain.data(), layer.attn_norm.bias.data(), 1e-5);
    let attn = mm(&naive_attention(&h, &h, &layer.heads[0], true), &to_mat(&layer.w_o));
    let x: Mat = x.iter().zip(&attn).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect();
    let h = layer_norm(&x, layer.ffn_norm.gain.data(), layer.ffn_norm.bias.data(), 1e-5);
    let mut hidden = mm(&h, &to_mat(&layer.ffn.w_1));
    for row in &mut hidden {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v + layer.ffn.b_1.data()[j]).max(0.0);
        }
    }
    let ff = mm(&hidden, &to_mat(&layer.ffn.w_2));
    let x: Mat = x
        .iter()
        .zip(&ff)
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .enumerate()
                .map(|(j, (u, v))| u + v + layer.ffn.b_2.data()[j])
                .collect()
        })
        .collect();
    let x = layer_norm(&x, model.final_norm.gain.data(), model.final_norm.bias.data(), 1e-5);
    let pooled: Vec<f64> = (0..4).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / x.len() as f64).collect();
    let want = mm(&vec![pooled], &to_mat(&model.classifier));

    let got = model.logits(&model.embed(&ids).unwrap(), 0, &[true; 5]).unwrap();
    assert_eq!(got.shape(), &[1, 3]);
    assert!(max_gap(&want, &got) < 1e-12, "gap {}", max_gap(&want, &got));
}

#[test]
fn content_permutation_invariance_without_positions() {
    let model = BackboneModel::<f64>::init(BackboneConfig::default(), 13).unwrap();
    let mut r = rng::seeded(14);
    for _ in 0..20 {
        let ids = random_ids(&mut r, 12, 64);
        let mut perm = ids.clone();
        perm.reverse();
        perm.rotate_left(5);
        let a = model.logits(&model.embed(&ids).unwrap(), 0, &[true; 12]).unwrap();
        let b = model.logits(&model.embed(&perm).unwrap(), 0, &[true; 12]).unwrap();
        // Sums run in a different order, so agreement is up to roundoff.
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }
}

#[test]
fn learned_positions_break_permutation_invariance() {
    let cfg = BackboneConfig {
        positional_mode: PositionalMode::LearnedAbsolute,
        ..BackboneConfig::default()
    };
    let model = BackboneModel::<f64>::init(cfg, 13).unwrap();
    let ids: Vec<usize> = (1..=12).collect();
    let mut perm = ids.clone();
    perm.reverse();
    let a = model.logits(&model.embed(&ids).unwrap(), 0, &[true; 12]).unwrap();
    let b = model.logits(&model.embed(&perm).unwrap(), 0, &[true; 12]).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() > 1e-9);
}

#[test]
fn total_length_is_bounded() {
    let model = BackboneModel::<f64>::init(BackboneConfig::default(), 1).unwrap();
    let input = Tensor::<f64>::zeros(&[49, 16]);
    assert!(matches!(model.logits(&input, 17, &[true; 32]), Err(Error::Length(_))));
    assert!(matches!(model.embed(&[]), Err(Error::Length(_))));
    assert!(matches!(model.embed(&[64]), Err(Error::Index { .. })));
    let e = model.embed(&[5, 5]).unwrap();
    assert_eq!(e.row(0), e.row(1));
}

fn toy_examples() -> Vec<Example> {
    let mut r = rng::seeded(20);
    (0..40)
        .map(|i| Example {
            ids: random_ids(&mut r, 8, 64),
            label: i % 2,
        })
        .collect()
}

#[test]
fn zero_pretrain_steps_leave_parameters() {
    let model = BackboneModel::<f64>::init(BackboneConfig::default(), 2).unwrap();
    let cfg = PretrainConfig {
        steps: 0,
        ..PretrainConfig::default()
    };
    let (after, report) = pretrain(model.clone(), &toy_examples(), &cfg).unwrap();
    assert_eq!(after, model);
    assert!(report.losses.is_empty());
}

#[test]
fn pretraining_needs_a_trainable_model() {
    let mut model = BackboneModel::<f64>::init(BackboneConfig::default(), 2).unwrap();
    model.freeze();
    let err = pretrain(model, &toy_examples(), &PretrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn divergence_reports_the_step() {
    let model = BackboneModel::<f64>::init(BackboneConfig::default(), 2).unwrap();
    let cfg = PretrainConfig {
        steps: 50,
        lr: 1e200,
        ..PretrainConfig::default()
    };
    match pretrain(model, &toy_examples(), &cfg) {
        Err(Error::Training { step, loss }) => {
            assert!(step >= 1 && step < 50);
            assert!(!loss.is_finite());
        }
        other => panic!("expected a training error, got {other:?}"),
    }
}

#[test]
fn pretraining_lowers_the_loss() {
    let model = BackboneModel::<f64>::init(BackboneConfig::default(), 2).unwrap();
    let cfg = PretrainConfig {
        steps: 300,
        ..PretrainConfig::default()
    };
    let mut examples = toy_examples();
    for ex in &mut examples {
        ex.label = usize::from(ex.ids.contains(&7) || ex.ids[0] < 32);
    }
    let (_, report) = pretrain(model, &examples, &cfg).unwrap();
    let head: f64 = report.losses[..100].iter().sum();
    let tail: f64 = report.losses[200..].iter().sum();
    assert!(tail < head);
}
