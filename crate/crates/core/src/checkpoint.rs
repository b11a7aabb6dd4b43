//! JSON checkpoints.
//!
//! Backbone: `{"config": {...}, "tensors": {name: {"shape": [...], "values": [...]}}}`.
//! Method: `{"method_kind": "pt"|"dept"|"adept", "tensors": {...}}`.
//!
//! Values are written as the shortest decimal string that parses back to the
//! same `f64`, so `f64` checkpoints round-trip bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::backbone::{BackboneConfig, BackboneModel};
use crate::error::{Error, Result};
use crate::peft::{AdaptivePrompt, DecomposedPrompt, MethodKind, PeftMethod, SoftPrompt};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorRecord {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Result<Self> {
        let values: Vec<f64> = t.data().iter().map(|v| v.as_f64()).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("tensor {name} has non-finite values")));
        }
        Ok(TensorRecord {
            shape: t.shape().to_vec(),
            values,
        })
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::new(self.shape.clone(), self.values.iter().map(|&v| T::lit(v)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneCheckpoint {
    pub config: BackboneConfig,
    pub tensors: BTreeMap<String, TensorRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodCheckpoint {
    pub method_kind: MethodKind,
    pub tensors: BTreeMap<String, TensorRecord>,
}

fn fill<'a, T: Scalar>(
    what: &str,
    records: &BTreeMap<String, TensorRecord>,
    slots: Vec<(String, &'a mut Tensor<T>)>,
) -> Result<()> {
    if records.len() != slots.len() {
        let expected: Vec<&str> = slots.iter().map(|(n, _)| n.as_str()).collect();
        return Err(Error::Checkpoint(format!(
            "{what} checkpoint has {} tensors, expected {expected:?}",
            records.len()
        )));
    }
    for (name, slot) in slots {
        let rec = records
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("{what} checkpoint lacks tensor {name}")))?;
        if rec.shape != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {:?}, expected {:?}",
                rec.shape,
                slot.shape()
            )));
        }
        *slot = rec.to_tensor()?;
    }
    Ok(())
}

impl BackboneCheckpoint {
    pub fn from_model<T: Scalar>(model: &BackboneModel<T>) -> Result<Self> {
        let tensors = model
            .named_tensors()
            .into_iter()
            .map(|(name, t)| Ok((name.clone(), TensorRecord::from_tensor(&name, t)?)))
            .collect::<Result<_>>()?;
        Ok(BackboneCheckpoint {
            config: model.config.clone(),
            tensors,
        })
    }

    /// Rebuilds the model; checkpoints hold pretrained weights, so the
    /// result is frozen.
    pub fn into_model<T: Scalar>(&self) -> Result<BackboneModel<T>> {
        let mut model = BackboneModel::init(self.config.clone(), 0)?;
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        let slots = names.into_iter().zip(model.tensors_mut()).collect();
        fill("backbone", &self.tensors, slots)?;
        model.freeze();
        Ok(model)
    }
}

impl MethodCheckpoint {
    pub fn from_method<T: Scalar>(method: &PeftMethod<T>) -> Result<Self> {
        let tensors = method
            .named_tensors()
            .into_iter()
            .map(|(name, t)| Ok((name.to_string(), TensorRecord::from_tensor(name, t)?)))
            .collect::<Result<_>>()?;
        Ok(MethodCheckpoint {
            method_kind: method.kind(),
            tensors,
        })
    }

    pub fn into_method<T: Scalar>(&self) -> Result<PeftMethod<T>> {
        let get = |name: &str| -> Result<Tensor<T>> {
            self.tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("method checkpoint lacks tensor {name}")))?
                .to_tensor()
        };
        let method = match self.method_kind {
            MethodKind::Pt => PeftMethod::SoftPrompt(SoftPrompt {
                prompt: get("prompt")?,
            }),
            MethodKind::Dept => PeftMethod::Decomposed(DecomposedPrompt {
                prompt: get("prompt")?,
                a: get("A")?,
                b: get("B")?,
            }),
            MethodKind::Adept => PeftMethod::Adaptive(AdaptivePrompt {
                prompt: get("prompt")?,
                w_down: get("W_down")?,
                b_1: get("b_1")?,
                w_up: get("W_up")?,
                b_2: get("b_2")?,
            }),
        };
        let names = method.named_tensors();
        if names.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} checkpoint has unexpected tensors",
                self.method_kind
            )));
        }
        check_method_shapes(&method)?;
        Ok(method)
    }
}

fn check_method_shapes<T: Scalar>(method: &PeftMethod<T>) -> Result<()> {
    let d = method.dim();
    let bad = |what: &str| Err(Error::Checkpoint(format!("inconsistent {what} shape")));
    if !method.prompt().is_matrix() {
        return bad("prompt");
    }
    match method {
        PeftMethod::SoftPrompt(_) => {}
        PeftMethod::Decomposed(m) => {
            if !m.a.is_matrix() || !m.b.is_matrix() || m.a.cols() != m.b.rows() || m.b.cols() != d {
                return bad("A/B");
            }
        }
        PeftMethod::Adaptive(m) => {
            let r = m.w_down.cols();
            let ok = m.w_down.is_matrix()
                && m.w_down.rows() == d
                && m.w_up.is_matrix()
                && m.w_up.shape() == [r, d]
                && m.b_1.shape() == [r]
                && m.b_2.shape() == [d];
            if !ok {
                return bad("offset network");
            }
        }
    }
    Ok(())
}

pub fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let text = serde_json::to_string(value)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_backbone<T: Scalar>(model: &BackboneModel<T>, path: &Path) -> Result<()> {
    write_json(&BackboneCheckpoint::from_model(model)?, path)
}

pub fn load_backbone<T: Scalar>(path: &Path) -> Result<BackboneModel<T>> {
    read_json::<BackboneCheckpoint>(path)?.into_model()
}

pub fn save_method<T: Scalar>(method: &PeftMethod<T>, path: &Path) -> Result<()> {
    write_json(&MethodCheckpoint::from_method(method)?, path)
}

pub fn load_method<T: Scalar>(path: &Path) -> Result<PeftMethod<T>> {
    read_json::<MethodCheckpoint>(path)?.into_method()
}
