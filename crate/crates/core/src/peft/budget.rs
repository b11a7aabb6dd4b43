//! Trainable-parameter accounting and equal-budget sizing.

use serde::{Deserialize, Serialize};

use super::MethodKind;
use crate::error::{Error, Result};

/// Shape of an adaptation method, independent of its values.
///
/// `rank` is the low-rank width for the decomposed method and the bottleneck
/// width for the adaptive one; plain soft prompts ignore it. `max_len` is the
/// number of offset rows of the decomposed method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub kind: MethodKind,
    pub prompt_len: usize,
    pub rank: usize,
    pub max_len: usize,
    pub dim: usize,
}

impl MethodSpec {
    /// Number of trainable scalars:
    /// soft prompt `l·d`, decomposed `l·d + s·r + r·d`, adaptive `l·d + 2·r·d + r + d`.
    pub fn param_count(&self) -> usize {
        let (l, r, s, d) = (self.prompt_len, self.rank, self.max_len, self.dim);
        match self.kind {
            MethodKind::Pt => l * d,
            MethodKind::Dept => l * d + s * r + r * d,
            MethodKind::Adept => l * d + 2 * r * d + r + d,
        }
    }
}

/// Inputs of the equal-budget sizing rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub budget: usize,
    pub dim: usize,
    pub prompt_len: usize,
}

/// Largest bottleneck `r` with `l·d + 2·r·d + r + d <= budget`.
pub fn solve_bottleneck(spec: BudgetSpec) -> Result<usize> {
    let BudgetSpec {
        budget,
        dim: d,
        prompt_len: l,
    } = spec;
    let fixed = l * d + d;
    if d == 0 || budget < fixed {
        return Err(Error::Budget(format!(
            "budget {budget} cannot hold a {l}x{d} prompt plus a {d}-wide bias"
        )));
    }
    let r = (budget - fixed) / (2 * d + 1);
    if r == 0 {
        return Err(Error::Budget(format!(
            "budget {budget} leaves no room for a bottleneck with prompt length {l} at d = {d}"
        )));
    }
    Ok(r)
}

/// Largest rank `r` with `l·d + r·(s + d) <= budget` for offsets over `s` positions.
pub fn solve_rank(spec: BudgetSpec, max_len: usize) -> Result<usize> {
    let BudgetSpec {
        budget,
        dim: d,
        prompt_len: l,
    } = spec;
    let fixed = l * d;
    if budget < fixed || max_len + d == 0 {
        return Err(Error::Budget(format!(
            "budget {budget} cannot hold a {l}x{d} prompt"
        )));
    }
    let r = (budget - fixed) / (max_len + d);
    if r == 0 {
        return Err(Error::Budget(format!(
            "budget {budget} leaves no room for rank-1 offsets over {max_len} positions"
        )));
    }
    Ok(r)
}

/// Method shape for `kind` that fits `budget`: the soft prompt takes the
/// given length, the other methods derive their rank from the remainder.
pub fn fit_to_budget(kind: MethodKind, budget: usize, dim: usize, prompt_len: usize, max_len: usize) -> Result<MethodSpec> {
    let bspec = BudgetSpec {
        budget,
        dim,
        prompt_len,
    };
    let rank = match kind {
        MethodKind::Pt => {
            if prompt_len * dim > budget {
                return Err(Error::Budget(format!(
                    "prompt {prompt_len}x{dim} exceeds budget {budget}"
                )));
            }
            0
        }
        MethodKind::Dept => solve_rank(bspec, max_len)?,
        MethodKind::Adept => solve_bottleneck(bspec)?,
    };
    Ok(MethodSpec {
        kind,
        prompt_len,
        rank,
        max_len,
        dim,
    })
}
