//! Position-sensitivity and offset-magnitude probes.

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::backbone::BackboneModel;
use crate::error::{Error, Result};
use crate::peft::{MethodKind, PeftMethod};
use crate::scalar::Scalar;
use crate::tasks::{evaluate, Example};

/// Cyclic left shift by `shift` rows: row `i` of the result is row
/// `(i + shift) mod s` of `rows`. Accepts `0 <= shift <= s`.
pub fn cyclic_shift<T: Scalar>(rows: &Tensor<T>, shift: usize) -> Result<Tensor<T>> {
    let s = rows.rows();
    if !rows.is_matrix() || shift > s {
        return Err(Error::Argument(format!(
            "cyclic shift {shift} outside [0, {s}]"
        )));
    }
    let order: Vec<usize> = (0..s).map(|i| (i + shift) % s).collect();
    rows.select_rows(&order)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftEntry {
    pub shift: usize,
    pub accuracy: f64,
    /// Whether each example's prediction differs from the unshifted one.
    pub changed: Vec<bool>,
    pub changed_count: usize,
    /// L2 norm of each offset row's displacement, `||ΔE'_i - ΔE_i||`.
    pub row_displacement: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftProbeReport {
    pub method: MethodKind,
    pub baseline_accuracy: f64,
    pub entries: Vec<ShiftEntry>,
}

/// Re-evaluates `examples` with the positional offset table cyclically
/// shifted by each amount in `shifts`.
///
/// Only positional offsets can be shifted; for the other methods every shift
/// is the identity and the report shows no changes. Shifting the rows of `A`
/// yields exactly the shifted rows of `A·B`, since each product row depends
/// on one row of `A` only.
pub fn shift_probe<T: Scalar>(
    backbone: &BackboneModel<T>,
    method: &PeftMethod<T>,
    examples: &[Example],
    shifts: &[usize],
) -> Result<ShiftProbeReport> {
    let baseline = evaluate(backbone, Some(method), examples, 0)?;
    let mut entries = Vec::with_capacity(shifts.len());
    for &shift in shifts {
        let entry = match method {
            PeftMethod::Decomposed(dp) => {
                let mut shifted = dp.clone();
                shifted.a = cyclic_shift(&dp.a, shift)?;
                let table = dp.offset_table()?;
                let moved = cyclic_shift(&table, shift)?.sub(&table)?;
                let row_displacement = (0..moved.rows())
                    .map(|i| {
                        moved
                            .row(i)
                            .iter()
                            .fold(0.0, |a, &v| a + v.as_f64() * v.as_f64())
                            .sqrt()
                    })
                    .collect();
                let shifted = PeftMethod::Decomposed(shifted);
                let result = evaluate(backbone, Some(&shifted), examples, 0)?;
                let changed: Vec<bool> = result
                    .predictions
                    .iter()
                    .zip(&baseline.predictions)
                    .map(|(a, b)| a != b)
                    .collect();
                ShiftEntry {
                    shift,
                    accuracy: result.accuracy,
                    changed_count: changed.iter().filter(|&&c| c).count(),
                    changed,
                    row_displacement,
                }
            }
            _ => ShiftEntry {
                shift,
                accuracy: baseline.accuracy,
                changed: vec![false; examples.len()],
                changed_count: 0,
                row_displacement: Vec::new(),
            },
        };
        entries.push(entry);
    }
    Ok(ShiftProbeReport {
        method: method.kind(),
        baseline_accuracy: baseline.accuracy,
        entries,
    })
}

/// Mean and population variance of absolute values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbsStats {
    pub mean: f64,
    pub variance: f64,
    pub count: usize,
}

impl AbsStats {
    /// Two passes in a fixed order over the values.
    pub fn from_values<T: Scalar>(values: &[T]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Argument("no values to summarise".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().fold(0.0, |a, v| a + v.abs().as_f64()) / n;
        let variance = values
            .iter()
            .fold(0.0, |a, v| {
                let dev = v.abs().as_f64() - mean;
                a + dev * dev
            })
            / n;
        Ok(AbsStats {
            mean,
            variance,
            count: values.len(),
        })
    }
}

pub fn abs_stats<T: Scalar>(rows: &Tensor<T>) -> Result<AbsStats> {
    AbsStats::from_values(rows.data())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetStatsReport {
    pub method: MethodKind,
    pub tokens: usize,
    pub embedding: AbsStats,
    pub offset: AbsStats,
}

/// Statistics of `|x|` over every element of every content-token row of
/// `examples`, for the raw token embeddings and for the method's offsets.
pub fn offset_stats<T: Scalar>(
    backbone: &BackboneModel<T>,
    method: &PeftMethod<T>,
    examples: &[Example],
) -> Result<OffsetStatsReport> {
    if examples.is_empty() {
        return Err(Error::Argument("offset statistics need a non-empty dataset".into()));
    }
    let mut embeddings = Vec::new();
    let mut offsets = Vec::new();
    let mut tokens = 0;
    for ex in examples {
        let e = backbone.embed(&ex.ids)?;
        offsets.extend_from_slice(method.content_offsets(&e)?.data());
        tokens += e.rows();
        embeddings.extend(e.into_data());
    }
    Ok(OffsetStatsReport {
        method: method.kind(),
        tokens,
        embedding: AbsStats::from_values(&embeddings)?,
        offset: AbsStats::from_values(&offsets)?,
    })
}

/// Largest element-wise change of the offsets of `content`'s rows when
/// `prefix` rows are placed in front of them.
///
/// Token-wise offsets give exactly zero. Positional offsets give
/// `max_i ||ΔE[i + p] - ΔE[i]||_inf` for a prefix of `p` rows.
pub fn prepend_probe<T: Scalar>(method: &PeftMethod<T>, content: &Tensor<T>, prefix: &Tensor<T>) -> Result<T> {
    if prefix.cols() != content.cols() || !prefix.is_matrix() {
        return Err(Error::dims("prepend_probe", prefix.shape(), content.shape()));
    }
    let joined = Tensor::concat_rows(&[prefix, content])?;
    let alone = method.content_offsets(content)?;
    let with_prefix = method.content_offsets(&joined)?;
    let tail = with_prefix.slice_rows(prefix.rows(), content.rows())?;
    tail.max_abs_diff(&alone)
}
