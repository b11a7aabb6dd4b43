//! Input-layer adaptation methods for a frozen backbone.
//!
//! Each method produces a prompt to prepend and (possibly offset) content
//! embeddings:
//!
//! * [`SoftPrompt`]: a trainable `l × d` prompt, content untouched.
//! * [`DecomposedPrompt`]: a short prompt plus offsets `A·B` indexed by
//!   position, so row `i` of the content always receives row `i` of `A·B`.
//! * [`AdaptivePrompt`]: a short prompt plus offsets from a token-wise
//!   two-layer network `f(e) = ReLU(e·W_down + b_1)·W_up + b_2`, so every row
//!   is offset by a function of that row alone.

mod budget;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use budget::{fit_to_budget, solve_bottleneck, solve_rank, BudgetSpec, MethodSpec};

use crate::autograd::{Graph, NodeId, Tensor};
use crate::backbone::BackboneModel;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Pt,
    Dept,
    Adept,
}

impl MethodKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Pt => "pt",
            MethodKind::Dept => "dept",
            MethodKind::Adept => "adept",
        }
    }

    pub const ALL: [MethodKind; 3] = [MethodKind::Pt, MethodKind::Dept, MethodKind::Adept];
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pt" => Ok(MethodKind::Pt),
            "dept" => Ok(MethodKind::Dept),
            "adept" => Ok(MethodKind::Adept),
            other => Err(Error::Argument(format!("unknown method kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftPrompt<T> {
    pub prompt: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedPrompt<T> {
    pub prompt: Tensor<T>,
    /// `s × r`
    pub a: Tensor<T>,
    /// `r × d`
    pub b: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptivePrompt<T> {
    pub prompt: Tensor<T>,
    /// `d × r`
    pub w_down: Tensor<T>,
    /// `r`
    pub b_1: Tensor<T>,
    /// `r × d`
    pub w_up: Tensor<T>,
    /// `d`
    pub b_2: Tensor<T>,
}

/// Prompt rows to prepend and the content rows that follow them.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapted<T> {
    pub prompt: Tensor<T>,
    pub content: Tensor<T>,
}

fn check_width<T: Scalar>(e: &Tensor<T>, d: usize, op: &'static str) -> Result<()> {
    if !e.is_matrix() || e.cols() != d {
        return Err(Error::dims(op, e.shape(), &[e.rows(), d]));
    }
    Ok(())
}

impl<T: Scalar> SoftPrompt<T> {
    pub fn dim(&self) -> usize {
        self.prompt.cols()
    }

    /// The content passes through unchanged.
    pub fn apply(&self, e: &Tensor<T>) -> Result<Adapted<T>> {
        check_width(e, self.dim(), "pt_apply")?;
        Ok(Adapted {
            prompt: self.prompt.clone(),
            content: e.clone(),
        })
    }
}

impl<T: Scalar> DecomposedPrompt<T> {
    pub fn dim(&self) -> usize {
        self.b.cols()
    }

    pub fn max_len(&self) -> usize {
        self.a.rows()
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    /// The full `s × d` offset table `A·B`.
    pub fn offset_table(&self) -> Result<Tensor<T>> {
        self.a.matmul(&self.b)
    }

    /// Offsets of the first `len` positions.
    pub fn offsets(&self, len: usize) -> Result<Tensor<T>> {
        if len > self.max_len() {
            return Err(Error::Length(format!(
                "sequence of {len} tokens exceeds the {} offset positions",
                self.max_len()
            )));
        }
        self.offset_table()?.slice_rows(0, len)
    }

    pub fn apply(&self, e: &Tensor<T>) -> Result<Adapted<T>> {
        check_width(e, self.dim(), "dept_apply")?;
        let offsets = self.offsets(e.rows())?;
        Ok(Adapted {
            prompt: self.prompt.clone(),
            content: e.add(&offsets)?,
        })
    }
}

impl<T: Scalar> AdaptivePrompt<T> {
    pub fn dim(&self) -> usize {
        self.w_down.rows()
    }

    pub fn bottleneck(&self) -> usize {
        self.w_down.cols()
    }

    /// `ReLU(E·W_down + b_1)·W_up + b_2`, evaluated row by row.
    pub fn offsets(&self, e: &Tensor<T>) -> Result<Tensor<T>> {
        check_width(e, self.dim(), "adept_offset")?;
        let hidden = e.matmul(&self.w_down)?.add(&self.b_1)?.relu();
        hidden.matmul(&self.w_up)?.add(&self.b_2)
    }

    pub fn apply(&self, e: &Tensor<T>) -> Result<Adapted<T>> {
        let offsets = self.offsets(e)?;
        Ok(Adapted {
            prompt: self.prompt.clone(),
            content: e.add(&offsets)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PeftMethod<T> {
    SoftPrompt(SoftPrompt<T>),
    Decomposed(DecomposedPrompt<T>),
    Adaptive(AdaptivePrompt<T>),
}

impl<T: Scalar> PeftMethod<T> {
    /// Builds a method: prompt rows are copies of uniformly sampled rows of
    /// the backbone embedding table; `A`, `B`, `W_down`, `W_up` are drawn
    /// from uniform(±1/sqrt(d)); biases start at zero.
    pub fn init(spec: &MethodSpec, backbone: &BackboneModel<T>, seed: u64) -> Result<Self> {
        let d = backbone.embed_dim();
        if spec.dim != d {
            return Err(Error::Argument(format!(
                "method dim {} does not match backbone embed_dim {d}",
                spec.dim
            )));
        }
        if spec.prompt_len == 0 {
            return Err(Error::Argument("prompt length must be >= 1".into()));
        }
        if spec.prompt_len > backbone.config.max_prompt_len {
            return Err(Error::Argument(format!(
                "prompt length {} exceeds backbone max_prompt_len {}",
                spec.prompt_len, backbone.config.max_prompt_len
            )));
        }
        let mut rng = rng::derived(seed, 2);
        let vocab = backbone.embedding.rows();
        let rows: Vec<usize> = (0..spec.prompt_len).map(|_| rng.gen_range(0..vocab)).collect();
        let prompt = backbone.embedding.select_rows(&rows)?;
        let bound = 1.0 / (d as f64).sqrt();
        Ok(match spec.kind {
            MethodKind::Pt => PeftMethod::SoftPrompt(SoftPrompt { prompt }),
            MethodKind::Dept => {
                if spec.rank == 0 || spec.max_len == 0 {
                    return Err(Error::Argument("decomposed method needs rank >= 1 and max_len >= 1".into()));
                }
                if spec.rank > spec.max_len.min(d) {
                    return Err(Error::Argument(format!(
                        "rank {} exceeds min(max_len, d) = {}",
                        spec.rank,
                        spec.max_len.min(d)
                    )));
                }
                PeftMethod::Decomposed(DecomposedPrompt {
                    prompt,
                    a: rng::uniform(&mut rng, &[spec.max_len, spec.rank], -bound, bound),
                    b: rng::uniform(&mut rng, &[spec.rank, d], -bound, bound),
                })
            }
            MethodKind::Adept => {
                if spec.rank == 0 {
                    return Err(Error::Argument("adaptive method needs bottleneck >= 1".into()));
                }
                PeftMethod::Adaptive(AdaptivePrompt {
                    prompt,
                    w_down: rng::uniform(&mut rng, &[d, spec.rank], -bound, bound),
                    b_1: Tensor::zeros(&[spec.rank]),
                    w_up: rng::uniform(&mut rng, &[spec.rank, d], -bound, bound),
                    b_2: Tensor::zeros(&[d]),
                })
            }
        })
    }

    pub fn kind(&self) -> MethodKind {
        match self {
            PeftMethod::SoftPrompt(_) => MethodKind::Pt,
            PeftMethod::Decomposed(_) => MethodKind::Dept,
            PeftMethod::Adaptive(_) => MethodKind::Adept,
        }
    }

    pub fn prompt(&self) -> &Tensor<T> {
        match self {
            PeftMethod::SoftPrompt(m) => &m.prompt,
            PeftMethod::Decomposed(m) => &m.prompt,
            PeftMethod::Adaptive(m) => &m.prompt,
        }
    }

    pub fn dim(&self) -> usize {
        self.prompt().cols()
    }

    pub fn spec(&self) -> MethodSpec {
        let (rank, max_len) = match self {
            PeftMethod::SoftPrompt(_) => (0, 0),
            PeftMethod::Decomposed(m) => (m.rank(), m.max_len()),
            PeftMethod::Adaptive(m) => (m.bottleneck(), 0),
        };
        MethodSpec {
            kind: self.kind(),
            prompt_len: self.prompt().rows(),
            rank,
            max_len,
            dim: self.dim(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.spec().param_count()
    }

    /// Prompt and offset content for token embeddings `e`.
    pub fn apply(&self, e: &Tensor<T>) -> Result<Adapted<T>> {
        match self {
            PeftMethod::SoftPrompt(m) => m.apply(e),
            PeftMethod::Decomposed(m) => m.apply(e),
            PeftMethod::Adaptive(m) => m.apply(e),
        }
    }

    /// Offsets the method adds to `e` (all zero for a plain soft prompt).
    pub fn content_offsets(&self, e: &Tensor<T>) -> Result<Tensor<T>> {
        check_width(e, self.dim(), "content_offsets")?;
        match self {
            PeftMethod::SoftPrompt(_) => Ok(Tensor::zeros(e.shape())),
            PeftMethod::Decomposed(m) => m.offsets(e.rows()),
            PeftMethod::Adaptive(m) => m.offsets(e),
        }
    }

    /// Stable names paired with every trainable tensor; the prompt comes first.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            PeftMethod::SoftPrompt(m) => vec![("prompt", &m.prompt)],
            PeftMethod::Decomposed(m) => vec![("prompt", &m.prompt), ("A", &m.a), ("B", &m.b)],
            PeftMethod::Adaptive(m) => vec![
                ("prompt", &m.prompt),
                ("W_down", &m.w_down),
                ("b_1", &m.b_1),
                ("W_up", &m.w_up),
                ("b_2", &m.b_2),
            ],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            PeftMethod::SoftPrompt(m) => vec![&mut m.prompt],
            PeftMethod::Decomposed(m) => vec![&mut m.prompt, &mut m.a, &mut m.b],
            PeftMethod::Adaptive(m) => vec![
                &mut m.prompt,
                &mut m.w_down,
                &mut m.b_1,
                &mut m.w_up,
                &mut m.b_2,
            ],
        }
    }

    /// Registers the method's tensors in `g` as trainable leaves.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<BoundMethod> {
        let ids: Vec<NodeId> = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| g.param(t.clone()))
            .collect();
        BoundMethod::from_nodes(g, self.kind(), ids)
    }

    /// `param -= lr * grad`, with the prompt on `prompt_lr` and every other
    /// tensor on `network_lr`.
    pub fn sgd_step(&mut self, g: &Graph<T>, bound: &BoundMethod, prompt_lr: T, network_lr: T) {
        for (i, (t, &id)) in self.tensors_mut().into_iter().zip(&bound.ids).enumerate() {
            let lr = if i == 0 { prompt_lr } else { network_lr };
            if let Some(grad) = g.grad(id) {
                for (w, &dw) in t.data_mut().iter_mut().zip(grad.data()) {
                    *w -= lr * dw;
                }
            }
        }
    }
}

/// A method's tensors registered in one graph.
#[derive(Clone, Debug)]
pub struct BoundMethod {
    kind: MethodKind,
    ids: Vec<NodeId>,
    offset_table: Option<NodeId>,
}

impl BoundMethod {
    /// Wraps nodes already holding a method's tensors, in the order of
    /// [`PeftMethod::named_tensors`].
    pub fn from_nodes<T: Scalar>(g: &mut Graph<T>, kind: MethodKind, ids: Vec<NodeId>) -> Result<Self> {
        let expected = match kind {
            MethodKind::Pt => 1,
            MethodKind::Dept => 3,
            MethodKind::Adept => 5,
        };
        if ids.len() != expected {
            return Err(Error::Argument(format!(
                "{kind} method has {expected} tensors, got {}",
                ids.len()
            )));
        }
        let offset_table = match kind {
            MethodKind::Dept => Some(g.matmul(ids[1], ids[2])?),
            _ => None,
        };
        Ok(BoundMethod {
            kind,
            ids,
            offset_table,
        })
    }

    /// Node ids in the order of [`PeftMethod::named_tensors`].
    pub fn node_ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn prompt(&self) -> NodeId {
        self.ids[0]
    }

    /// Offset content rows `e` (a `s' × d` node) and prepend the prompt,
    /// returning the `(l + s') × d` input and the prompt length.
    pub fn assemble<T: Scalar>(&self, g: &mut Graph<T>, e: NodeId) -> Result<(NodeId, usize)> {
        let len = g.value(e).rows();
        let content = match self.kind {
            MethodKind::Pt => e,
            MethodKind::Dept => {
                let table = self.offset_table.expect("decomposed method binds its offset table");
                let max_len = g.value(table).rows();
                if len > max_len {
                    return Err(Error::Length(format!(
                        "sequence of {len} tokens exceeds the {max_len} offset positions"
                    )));
                }
                let offsets = g.slice_rows(table, 0, len)?;
                g.add(e, offsets)?
            }
            MethodKind::Adept => {
                let [_, w_down, b_1, w_up, b_2] = self.ids[..] else {
                    unreachable!("adaptive method binds five tensors")
                };
                let h = g.matmul(e, w_down)?;
                let h = g.add(h, b_1)?;
                let h = g.relu(h);
                let o = g.matmul(h, w_up)?;
                let o = g.add(o, b_2)?;
                g.add(e, o)?
            }
        };
        let prompt = self.prompt();
        let prompt_len = g.value(prompt).rows();
        Ok((g.concat_rows(prompt, content)?, prompt_len))
    }
}
