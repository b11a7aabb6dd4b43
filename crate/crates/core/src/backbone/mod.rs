//! The frozen transformer classifier that every adaptation method targets.
//!
//! Pre-norm blocks (`x + MHA(LN(x))`, then `x + FFN(LN(x))`), a final layer
//! norm, mean pooling over real content positions and a linear class head.
//! Prompt rows take part in attention but are never pooled.

mod attention;
mod pretrain;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attention::{HeadVars, HeadWeights, Scaling};
pub use pretrain::{pretrain, PretrainConfig, PretrainReport};

use crate::autograd::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, LabRng};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalMode {
    #[default]
    None,
    /// A learned table indexed over the full prompt + content length, added
    /// after the prompt is prepended.
    LearnedAbsolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub classes: usize,
    pub ffn_dim: usize,
    pub max_content_len: usize,
    pub max_prompt_len: usize,
    pub positional_mode: PositionalMode,
    pub layer_norm_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 64,
            embed_dim: 16,
            heads: 2,
            head_dim: 8,
            layers: 2,
            classes: 2,
            ffn_dim: 64,
            max_content_len: 32,
            max_prompt_len: 16,
            positional_mode: PositionalMode::None,
            layer_norm_eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("layers", self.layers),
            ("classes", self.classes),
            ("ffn_dim", self.ffn_dim),
            ("max_content_len", self.max_content_len),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Argument(format!("backbone.{name} must be >= 1")));
            }
        }
        if self.heads * self.head_dim != self.embed_dim {
            return Err(Error::Argument(format!(
                "backbone.embed_dim ({}) must equal heads ({}) x head_dim ({})",
                self.embed_dim, self.heads, self.head_dim
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Argument("backbone.layer_norm_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn max_total_len(&self) -> usize {
        self.max_prompt_len + self.max_content_len
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> NormParams<T> {
    fn identity(d: usize) -> Self {
        NormParams {
            gain: Tensor::ones(&[d]),
            bias: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub w_1: Tensor<T>,
    pub b_1: Tensor<T>,
    pub w_2: Tensor<T>,
    pub b_2: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub heads: Vec<HeadWeights<T>>,
    pub w_o: Tensor<T>,
    pub attn_norm: NormParams<T>,
    pub ffn_norm: NormParams<T>,
    pub ffn: FeedForward<T>,
}

/// Backbone parameters. `frozen` decides whether a forward pass records the
/// parameters as trainable graph leaves.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneModel<T> {
    pub config: BackboneConfig,
    pub embedding: Tensor<T>,
    pub position: Option<Tensor<T>>,
    pub layers: Vec<Layer<T>>,
    pub final_norm: NormParams<T>,
    pub classifier: Tensor<T>,
    frozen: bool,
}

fn fan_in<T: Scalar>(rng: &mut LabRng, rows: usize, cols: usize) -> Tensor<T> {
    let bound = 1.0 / (rows as f64).sqrt();
    rng::uniform(rng, &[rows, cols], -bound, bound)
}

impl<T: Scalar> BackboneModel<T> {
    /// Random initialisation: embeddings uniform(-1, 1), projections
    /// uniform(±1/sqrt(fan_in)), identity layer norms, zero biases.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let d = config.embed_dim;
        let embedding = rng::uniform(&mut rng, &[config.vocab_size, d], -1.0, 1.0);
        let position = match config.positional_mode {
            PositionalMode::None => None,
            PositionalMode::LearnedAbsolute => Some(rng::uniform(
                &mut rng,
                &[config.max_total_len(), d],
                -0.1,
                0.1,
            )),
        };
        let layers = (0..config.layers)
            .map(|_| Layer {
                heads: (0..config.heads)
                    .map(|_| HeadWeights {
                        w_q: fan_in(&mut rng, d, config.head_dim),
                        w_k: fan_in(&mut rng, d, config.head_dim),
                        w_v: fan_in(&mut rng, d, config.head_dim),
                    })
                    .collect(),
                w_o: fan_in(&mut rng, d, d),
                attn_norm: NormParams::identity(d),
                ffn_norm: NormParams::identity(d),
                ffn: FeedForward {
                    w_1: fan_in(&mut rng, d, config.ffn_dim),
                    b_1: Tensor::zeros(&[config.ffn_dim]),
                    w_2: fan_in(&mut rng, config.ffn_dim, d),
                    b_2: Tensor::zeros(&[d]),
                },
            })
            .collect();
        let classifier = fan_in(&mut rng, d, config.classes);
        Ok(BackboneModel {
            final_norm: NormParams::identity(d),
            config,
            embedding,
            position,
            layers,
            classifier,
            frozen: false,
        })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn head(&self, layer: usize, head: usize) -> Result<&HeadWeights<T>> {
        let l = self.layers.get(layer).ok_or(Error::Index {
            what: "layer",
            index: layer,
            bound: self.layers.len(),
        })?;
        l.heads.get(head).ok_or(Error::Index {
            what: "head",
            index: head,
            bound: l.heads.len(),
        })
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Length("token sequence is empty".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                bound: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Token embeddings of `ids`, one row per token, without positional signal.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor<T>> {
        self.check_ids(ids)?;
        if ids.len() > self.config.max_content_len {
            return Err(Error::Length(format!(
                "{} tokens exceed max_content_len {}",
                ids.len(),
                self.config.max_content_len
            )));
        }
        self.embedding.select_rows(ids)
    }

    /// Stable dotted names paired with every parameter tensor.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        if let Some(p) = &self.position {
            out.push(("position".to_string(), p));
        }
        for (li, layer) in self.layers.iter().enumerate() {
            for (hi, h) in layer.heads.iter().enumerate() {
                out.push((format!("layer.{li}.head.{hi}.W_Q"), &h.w_q));
                out.push((format!("layer.{li}.head.{hi}.W_K"), &h.w_k));
                out.push((format!("layer.{li}.head.{hi}.W_V"), &h.w_v));
            }
            out.push((format!("layer.{li}.W_O"), &layer.w_o));
            out.push((format!("layer.{li}.attn_norm.gain"), &layer.attn_norm.gain));
            out.push((format!("layer.{li}.attn_norm.bias"), &layer.attn_norm.bias));
            out.push((format!("layer.{li}.ffn_norm.gain"), &layer.ffn_norm.gain));
            out.push((format!("layer.{li}.ffn_norm.bias"), &layer.ffn_norm.bias));
            out.push((format!("layer.{li}.ffn.W_1"), &layer.ffn.w_1));
            out.push((format!("layer.{li}.ffn.b_1"), &layer.ffn.b_1));
            out.push((format!("layer.{li}.ffn.W_2"), &layer.ffn.w_2));
            out.push((format!("layer.{li}.ffn.b_2"), &layer.ffn.b_2));
        }
        out.push(("final_norm.gain".to_string(), &self.final_norm.gain));
        out.push(("final_norm.bias".to_string(), &self.final_norm.bias));
        out.push(("W_cls".to_string(), &self.classifier));
        out
    }

    /// Mutable parameter tensors in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embedding];
        if let Some(p) = &mut self.position {
            out.push(p);
        }
        for layer in &mut self.layers {
            for h in &mut layer.heads {
                out.push(&mut h.w_q);
                out.push(&mut h.w_k);
                out.push(&mut h.w_v);
            }
            out.push(&mut layer.w_o);
            out.push(&mut layer.attn_norm.gain);
            out.push(&mut layer.attn_norm.bias);
            out.push(&mut layer.ffn_norm.gain);
            out.push(&mut layer.ffn_norm.bias);
            out.push(&mut layer.ffn.w_1);
            out.push(&mut layer.ffn.b_1);
            out.push(&mut layer.ffn.w_2);
            out.push(&mut layer.ffn.b_2);
        }
        out.push(&mut self.final_norm.gain);
        out.push(&mut self.final_norm.bias);
        out.push(&mut self.classifier);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Order-sensitive checksum of every parameter bit pattern (FNV-1a).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.named_tensors() {
            for v in t.data() {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Registers every parameter in `g`: trainable leaves unless frozen.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundBackbone {
        self.bind_as(g, !self.frozen)
    }

    /// Registers every parameter as a constant, whatever the frozen flag.
    pub fn bind_constant(&self, g: &mut Graph<T>) -> BoundBackbone {
        self.bind_as(g, false)
    }

    fn bind_as(&self, g: &mut Graph<T>, trainable: bool) -> BoundBackbone {
        let mut leaf = |t: &Tensor<T>| g.leaf(t.clone(), trainable);
        let embedding = leaf(&self.embedding);
        let position = self.position.as_ref().map(&mut leaf);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                heads: l
                    .heads
                    .iter()
                    .map(|h| HeadVars {
                        w_q: leaf(&h.w_q),
                        w_k: leaf(&h.w_k),
                        w_v: leaf(&h.w_v),
                    })
                    .collect(),
                w_o: leaf(&l.w_o),
                attn_norm: (leaf(&l.attn_norm.gain), leaf(&l.attn_norm.bias)),
                ffn_norm: (leaf(&l.ffn_norm.gain), leaf(&l.ffn_norm.bias)),
                w_1: leaf(&l.ffn.w_1),
                b_1: leaf(&l.ffn.b_1),
                w_2: leaf(&l.ffn.w_2),
                b_2: leaf(&l.ffn.b_2),
            })
            .collect();
        let final_norm = (leaf(&self.final_norm.gain), leaf(&self.final_norm.bias));
        let classifier = leaf(&self.classifier);
        BoundBackbone {
            config: self.config.clone(),
            embedding,
            position,
            layers,
            final_norm,
            classifier,
        }
    }

    /// Graph-free forward pass returning the `1 × C` logits.
    pub fn logits(&self, input: &Tensor<T>, prompt_len: usize, content_mask: &[bool]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind_constant(&mut g);
        let x = g.constant(input.clone());
        let out = bound.forward(&mut g, x, prompt_len, content_mask)?;
        Ok(g.value(out).clone())
    }

    /// Applies `param -= lr * grad` for every parameter that received a gradient.
    pub(crate) fn sgd_step(&mut self, g: &Graph<T>, bound: &BoundBackbone, lr: T) {
        let ids = bound.node_ids();
        for (t, id) in self.tensors_mut().into_iter().zip(ids) {
            if let Some(grad) = g.grad(id) {
                for (w, &dw) in t.data_mut().iter_mut().zip(grad.data()) {
                    *w -= lr * dw;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
struct LayerVars {
    heads: Vec<HeadVars>,
    w_o: NodeId,
    attn_norm: (NodeId, NodeId),
    ffn_norm: (NodeId, NodeId),
    w_1: NodeId,
    b_1: NodeId,
    w_2: NodeId,
    b_2: NodeId,
}

/// A model's parameters registered in one graph.
#[derive(Clone, Debug)]
pub struct BoundBackbone {
    config: BackboneConfig,
    embedding: NodeId,
    position: Option<NodeId>,
    layers: Vec<LayerVars>,
    final_norm: (NodeId, NodeId),
    classifier: NodeId,
}

impl BoundBackbone {
    /// Node ids in the same order as [`BackboneModel::named_tensors`].
    pub fn node_ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.embedding];
        out.extend(self.position);
        for l in &self.layers {
            for h in &l.heads {
                out.extend([h.w_q, h.w_k, h.w_v]);
            }
            out.extend([
                l.w_o,
                l.attn_norm.0,
                l.attn_norm.1,
                l.ffn_norm.0,
                l.ffn_norm.1,
                l.w_1,
                l.b_1,
                l.w_2,
                l.b_2,
            ]);
        }
        out.extend([self.final_norm.0, self.final_norm.1, self.classifier]);
        out
    }

    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, ids: &[usize]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::Length("token sequence is empty".into()));
        }
        g.row_select(self.embedding, ids)
    }

    /// Runs the transformer over `prompt_len` prompt rows followed by content
    /// rows (`content_mask[i]` false marks padding) and returns `1 × C` logits.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        input: NodeId,
        prompt_len: usize,
        content_mask: &[bool],
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let t = g.value(input).rows();
        if g.value(input).cols() != cfg.embed_dim {
            return Err(Error::dims("forward", g.value(input).shape(), &[t, cfg.embed_dim]));
        }
        if prompt_len + content_mask.len() != t {
            return Err(Error::Length(format!(
                "input has {t} rows but prompt ({prompt_len}) + content mask ({}) disagree",
                content_mask.len()
            )));
        }
        if t > cfg.max_total_len() {
            return Err(Error::Length(format!(
                "sequence of {t} rows exceeds the configured maximum {}",
                cfg.max_total_len()
            )));
        }
        let content = content_mask.iter().filter(|&&m| m).count();
        if content == 0 {
            return Err(Error::Length("no unmasked content positions".into()));
        }
        let key_mask: Vec<bool> = std::iter::repeat(true)
            .take(prompt_len)
            .chain(content_mask.iter().copied())
            .collect();
        let has_padding = key_mask.iter().any(|&m| !m);
        let key_mask = has_padding.then_some(key_mask.as_slice());
        let eps = T::lit(cfg.layer_norm_eps);

        let mut x = input;
        if let Some(pos) = self.position {
            let p = g.slice_rows(pos, 0, t)?;
            x = g.add(x, p)?;
        }
        for layer in &self.layers {
            let h = g.layer_norm(x, layer.attn_norm.0, layer.attn_norm.1, eps)?;
            let mut head_outs = Vec::with_capacity(layer.heads.len());
            for head in &layer.heads {
                head_outs.push(head.attend(g, h, h, key_mask, Scaling::Scaled)?);
            }
            let joined = g.concat_cols(&head_outs)?;
            let attn = g.matmul(joined, layer.w_o)?;
            x = g.add(x, attn)?;

            let h = g.layer_norm(x, layer.ffn_norm.0, layer.ffn_norm.1, eps)?;
            let hidden = g.matmul(h, layer.w_1)?;
            let hidden = g.add(hidden, layer.b_1)?;
            let hidden = g.relu(hidden);
            let ff = g.matmul(hidden, layer.w_2)?;
            let ff = g.add(ff, layer.b_2)?;
            x = g.add(x, ff)?;
        }
        let x = g.layer_norm(x, self.final_norm.0, self.final_norm.1, eps)?;

        let w = T::one() / T::lit(content as f64);
        let mut pool = vec![T::zero(); t];
        for (slot, &m) in pool[prompt_len..].iter_mut().zip(content_mask) {
            if m {
                *slot = w;
            }
        }
        let pool = g.constant(Tensor::matrix(1, t, pool)?);
        let pooled = g.matmul(pool, x)?;
        g.matmul(pooled, self.classifier)
    }
}

/// Random token ids for tests and probes.
pub fn random_ids(rng: &mut LabRng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> BackboneModel<f64> {
        BackboneModel::init(BackboneConfig::default(), 7).unwrap()
    }

    #[test]
    fn config_rejects_inconsistent_heads() {
        let cfg = BackboneConfig {
            head_dim: 5,
            ..BackboneConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn embed_is_a_table_readback() {
        let m = model();
        let e = m.embed(&[3, 3]).unwrap();
        assert_eq!(e.row(0), e.row(1));
        let e = m.embed(&[0, 1, 2, 3, 4]).unwrap();
        for i in 0..5 {
            assert_eq!(e.row(i), m.embedding.row(i));
        }
        assert!(matches!(m.embed(&[]), Err(Error::Length(_))));
        assert!(matches!(m.embed(&[64]), Err(Error::Index { .. })));
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let mut m = model();
        m.classifier = Tensor::zeros(&[16, 2]);
        let x = m.embed(&[5, 6, 7]).unwrap();
        let logits = m.logits(&x, 0, &[true; 3]).unwrap();
        assert_eq!(logits.data(), &[0.0, 0.0]);
    }

    #[test]
    fn padding_permutation_leaves_logits_unchanged() {
        let m = model();
        let a = m.embed(&[5, 0, 6, 0, 7]).unwrap();
        let b = m.embed(&[5, 6, 0, 7, 0]).unwrap();
        let la = m.logits(&a, 0, &[true, false, true, false, true]).unwrap();
        let lb = m.logits(&b, 0, &[true, true, false, true, false]).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn overlong_input_is_length_error() {
        let m = model();
        let x = Tensor::zeros(&[49, 16]);
        assert!(matches!(
            m.logits(&x, 0, &[true; 49]),
            Err(Error::Length(_))
        ));
    }

    #[test]
    fn frozen_bind_yields_constants() {
        let mut m = model();
        m.freeze();
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        assert!(b.node_ids().iter().all(|&id| !g.requires_grad(id)));
        assert_eq!(b.node_ids().len(), m.named_tensors().len());
    }
}
