use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Projection weights of one attention head, each `d × d_H`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
}

/// Whether attention logits are divided by `sqrt(d_H)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    #[default]
    Scaled,
    Unscaled,
}

impl Scaling {
    pub fn from_flag(scaled: bool) -> Self {
        if scaled {
            Scaling::Scaled
        } else {
            Scaling::Unscaled
        }
    }

    pub(crate) fn factor<T: Scalar>(self, head_dim: usize) -> Option<T> {
        match self {
            Scaling::Scaled => Some(T::one() / T::lit(head_dim as f64).sqrt()),
            Scaling::Unscaled => None,
        }
    }
}

impl<T: Scalar> HeadWeights<T> {
    pub fn head_dim(&self) -> usize {
        self.w_q.cols()
    }

    /// Attention logits of `queries` against `keys` (both in model space),
    /// before the softmax.
    pub fn logits(&self, queries: &Tensor<T>, keys: &Tensor<T>, scaling: Scaling) -> Result<Tensor<T>> {
        let q = queries.matmul(&self.w_q)?;
        let k = keys.matmul(&self.w_k)?;
        let logits = q.matmul(&k.transpose()?)?;
        Ok(match scaling.factor::<T>(self.head_dim()) {
            Some(c) => logits.scale(c),
            None => logits,
        })
    }

    /// `Softmax((Q W_Q)(K W_K)^T [/ sqrt(d_H)]) (K W_V)` for `q` queries over
    /// `k` key/value rows; returns `q × d_H`.
    pub fn attend(&self, queries: &Tensor<T>, keys_values: &Tensor<T>, scaling: Scaling) -> Result<Tensor<T>> {
        if queries.cols() != self.w_q.rows() || keys_values.cols() != self.w_k.rows() {
            return Err(Error::dims("attention_head", queries.shape(), self.w_q.shape()));
        }
        let weights = self.logits(queries, keys_values, scaling)?.row_softmax()?;
        weights.matmul(&keys_values.matmul(&self.w_v)?)
    }
}

/// Graph handles of one head's projections.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
}

impl HeadVars {
    /// Graph counterpart of [`HeadWeights::attend`]; the arithmetic is
    /// identical, so values agree bit-for-bit. Key columns with
    /// `key_mask[j] == false` get zero attention weight.
    pub fn attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        queries: NodeId,
        keys_values: NodeId,
        key_mask: Option<&[bool]>,
        scaling: Scaling,
    ) -> Result<NodeId> {
        let q = g.matmul(queries, self.w_q)?;
        let k = g.matmul(keys_values, self.w_k)?;
        let v = g.matmul(keys_values, self.w_v)?;
        let kt = g.transpose(k)?;
        let mut logits = g.matmul(q, kt)?;
        if let Some(c) = scaling.factor::<T>(g.value(self.w_q).cols()) {
            logits = g.scale(logits, c);
        }
        let weights = g.masked_row_softmax(logits, key_mask)?;
        g.matmul(weights, v)
    }
}
