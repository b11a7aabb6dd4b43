//! Central finite-difference gradient checking.

use crate::autograd::graph::{Graph, NodeId};
use crate::autograd::tensor::Tensor;
use crate::error::Result;

/// Builds a scalar loss from the given trainable leaves.
pub trait LossFn: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> {}
impl<F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>> LossFn for F {}

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

fn evaluate(f: &impl LossFn, params: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.constant(p.clone())).collect();
    let loss = f(&mut g, &ids)?;
    Ok(g.value(loss).data()[0])
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(θ+eps) − f(θ−eps)) / 2eps` at every coordinate of every parameter.
///
/// The relative error of a coordinate is `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn grad_check(f: impl LossFn, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.numel() {
            let orig = p.data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let plus = evaluate(&f, &work)?;
            work[pi].data_mut()[k] = orig - eps;
            let minus = evaluate(&f, &work)?;
            work[pi].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: rel,
                    worst: (pi, k),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
