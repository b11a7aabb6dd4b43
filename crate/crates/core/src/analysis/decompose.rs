//! First-layer single-head attention with a prepended prompt, split into a
//! prompt-driven bias and a rescaled content-only attention output:
//!
//! ```text
//! attn(q, [P; X]) = sum_k A_k p_k W_V + (1 - sum_k A_k) * attn(q, X)
//! ```
//!
//! where `A_k` is the weight of prompt row `k` under the softmax over all
//! `l + s` keys. For soft prompts `q = e_i` and `X = E`; with adaptive offsets
//! `q = e_i + f(e_i)` and `X = E + f(E)`; with positional offsets
//! `q = e_i + Δe_i`, `X = E + ΔE`, and the content term is further split into
//! its `ΔE W_V` and `E W_V` parts.
//!
//! Every report carries the directly computed attention output and the gap
//! between it and the reconstruction.

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::backbone::{HeadWeights, Scaling};
use crate::error::{Error, Result};
use crate::peft::{AdaptivePrompt, DecomposedPrompt};
use crate::scalar::Scalar;

/// Largest accepted `max_abs_gap`: `1e-10` in `f64`, looser for `f32`.
pub fn identity_tolerance<T: Scalar>() -> T {
    T::lit(1e-10).max(T::epsilon() * T::lit(1e3))
}

/// Content-term split of a positionally offset input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentParts<T> {
    /// `Softmax(...) ΔE W_V`
    pub offset_term: Vec<T>,
    /// `Softmax(...) E W_V`
    pub embedding_term: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport<T> {
    /// Attention weight of each prompt row under the full softmax.
    pub prefix_weights: Vec<T>,
    pub prefix_mass: T,
    /// `1 - prefix_mass`
    pub scale: T,
    pub bias_term: Vec<T>,
    /// Softmax weights of the content keys when attending to content only.
    pub content_weights: Vec<T>,
    /// Content-only attention output.
    pub content_term: Vec<T>,
    pub content_parts: Option<ContentParts<T>>,
    pub reconstructed: Vec<T>,
    /// Attention output over the prompt-prepended input.
    pub direct: Vec<T>,
    pub max_abs_gap: T,
}

fn as_row<T: Scalar>(v: &[T]) -> Result<Tensor<T>> {
    Tensor::matrix(1, v.len(), v.to_vec())
}

fn check_query<T: Scalar>(query: &[T], d: usize) -> Result<()> {
    if query.len() != d {
        return Err(Error::dims("decompose query", &[query.len()], &[d]));
    }
    Ok(())
}

/// Shared decomposition of `attn(query, [prompt; content])`.
fn decompose<T: Scalar>(
    query: &[T],
    prompt: &Tensor<T>,
    content: &Tensor<T>,
    split: Option<(&Tensor<T>, &Tensor<T>)>,
    head: &HeadWeights<T>,
    scaling: Scaling,
) -> Result<DecompositionReport<T>> {
    let d = head.w_q.rows();
    check_query(query, d)?;
    if prompt.cols() != d || content.cols() != d {
        return Err(Error::dims("decompose", prompt.shape(), content.shape()));
    }
    let l = prompt.rows();
    let q = as_row(query)?;
    let keys = Tensor::concat_rows(&[prompt, content])?;

    let full = head.logits(&q, &keys, scaling)?.row_softmax()?;
    let prefix_weights = full.row(0)[..l].to_vec();
    let prefix_mass = prefix_weights.iter().fold(T::zero(), |a, &w| a + w);
    let scale = T::one() - prefix_mass;
    let bias = as_row(&prefix_weights)?.matmul(&prompt.matmul(&head.w_v)?)?;

    let content_weights = head.logits(&q, content, scaling)?.row_softmax()?;
    let content_term = content_weights.matmul(&content.matmul(&head.w_v)?)?;

    let (mixed, content_parts) = match split {
        None => (content_term.clone(), None),
        Some((offsets, embeddings)) => {
            let offset_term = content_weights.matmul(&offsets.matmul(&head.w_v)?)?;
            let embedding_term = content_weights.matmul(&embeddings.matmul(&head.w_v)?)?;
            let sum = offset_term.add(&embedding_term)?;
            (
                sum,
                Some(ContentParts {
                    offset_term: offset_term.into_data(),
                    embedding_term: embedding_term.into_data(),
                }),
            )
        }
    };

    let reconstructed = bias.add(&mixed.scale(scale))?;
    let direct = head.attend(&q, &keys, scaling)?;
    let gap = reconstructed.max_abs_diff(&direct)?;
    let report = DecompositionReport {
        prefix_weights,
        prefix_mass,
        scale,
        bias_term: bias.into_data(),
        content_weights: content_weights.into_data(),
        content_term: content_term.into_data(),
        content_parts,
        reconstructed: reconstructed.into_data(),
        direct: direct.into_data(),
        max_abs_gap: gap,
    };
    if !(gap <= identity_tolerance::<T>()) {
        return Err(Error::Consistency(format!(
            "decomposition differs from direct attention by {gap}"
        )));
    }
    Ok(report)
}

/// Decomposition for a plain soft prompt `P` and query `e_i` over content `E`.
pub fn pt_decompose<T: Scalar>(
    query: &[T],
    content: &Tensor<T>,
    prompt: &Tensor<T>,
    head: &HeadWeights<T>,
    scaling: Scaling,
) -> Result<DecompositionReport<T>> {
    decompose(query, prompt, content, None, head, scaling)
}

/// Decomposition with token-wise offsets: query `e_i + f(e_i)` over
/// `E + f(E)`, prompt taken from the method.
pub fn adept_decompose<T: Scalar>(
    query: &[T],
    content: &Tensor<T>,
    method: &AdaptivePrompt<T>,
    head: &HeadWeights<T>,
    scaling: Scaling,
) -> Result<DecompositionReport<T>> {
    let q = as_row(query)?;
    let q = q.add(&method.offsets(&q)?)?;
    let shifted = method.apply(content)?.content;
    decompose(q.data(), &method.prompt, &shifted, None, head, scaling)
}

/// Decomposition with positional offsets: query `e_i + Δe_i` (row
/// `position` of the offset table) over `E + ΔE`.
pub fn dept_decompose<T: Scalar>(
    query: &[T],
    position: usize,
    content: &Tensor<T>,
    method: &DecomposedPrompt<T>,
    head: &HeadWeights<T>,
    scaling: Scaling,
) -> Result<DecompositionReport<T>> {
    if position >= method.max_len() {
        return Err(Error::Index {
            what: "offset position",
            index: position,
            bound: method.max_len(),
        });
    }
    let table = method.offset_table()?;
    let q = as_row(query)?.add(&table.slice_rows(position, 1)?)?;
    let offsets = method.offsets(content.rows())?;
    let shifted = content.add(&offsets)?;
    decompose(
        q.data(),
        &method.prompt,
        &shifted,
        Some((&offsets, content)),
        head,
        scaling,
    )
}
