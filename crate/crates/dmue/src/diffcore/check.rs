//! Finite-difference verification of the backward pass.
//!
//! The checker only uses forward evaluations, so it is independent of the
//! gradient code it validates.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;

/// Compares analytic gradients of a scalar-valued function against central
/// finite differences at `point`, returning the maximum relative error
/// `|analytic - fd| / max(1, |fd|)` over all coordinates.
///
/// `build` must construct the same computation for any leaf values; it is
/// called once for the analytic pass and twice per coordinate for the
/// difference quotients.
pub fn grad_check<F>(build: F, point: &[Tensor], step: f64) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    assert!(step > 0.0, "grad_check: step must be positive");

    let mut graph = Graph::new();
    let ids: Vec<NodeId> = point.iter().map(|t| graph.param(t)).collect();
    let root = build(&mut graph, &ids);
    assert_eq!(graph.shape(root), (1, 1), "grad_check: function output must be scalar");
    graph.backward(root);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(point.iter())
        .map(|(id, t)| graph.grad(*id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut max_err: f64 = 0.0;
    for (ti, t) in point.iter().enumerate() {
        for k in 0..t.numel() {
            let plus = eval_perturbed(&build, point, ti, k, step);
            let minus = eval_perturbed(&build, point, ti, k, -step);
            let fd = (plus - minus) / (2.0 * step);
            let err = (analytic[ti][k] - fd).abs() / fd.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    max_err
}

fn eval_perturbed<F>(build: &F, point: &[Tensor], ti: usize, k: usize, delta: f64) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let mut shifted: Vec<Tensor> = point.to_vec();
    shifted[ti].data_mut()[k] += delta;
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = shifted.iter().map(|t| graph.param(t)).collect();
    let root = build(&mut graph, &ids);
    graph.scalar_value(root)
}
