use super::{AutodiffError, Gradients, Graph, NodeId, Precision};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Max relative error per parameter, in graph order.
    pub per_parameter: Vec<(String, f64)>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Checks the gradients produced by [`Graph::backward`].
pub fn grad_check(graph: &mut Graph, loss: NodeId, step: f64, tol: f64) -> Result<GradReport, AutodiffError> {
    let analytic = graph.backward(loss)?;
    check_gradients(graph, loss, &analytic, step, tol)
}

/// Compares the supplied gradients against `(f(x+h) - f(x-h)) / 2h` for
/// every scalar parameter. Relative error uses `max(1, |analytic|)` as the
/// denominator.
pub fn check_gradients(
    graph: &mut Graph,
    loss: NodeId,
    analytic: &Gradients,
    step: f64,
    tol: f64,
) -> Result<GradReport, AutodiffError> {
    if graph.precision() != Precision::Double {
        return Err(AutodiffError::PrecisionMode);
    }
    if !(1e-7..=1e-4).contains(&step) {
        return Err(AutodiffError::BadStep(step));
    }
    let params: Vec<(String, NodeId)> = graph
        .parameters()
        .into_iter()
        .map(|(n, id)| (n.to_string(), id))
        .collect();
    let mut per_parameter = Vec::with_capacity(params.len());
    let mut max_err = 0.0f64;
    for (name, id) in params {
        let original = graph.value(id).clone();
        let grad = analytic
            .get(id)
            .cloned()
            .unwrap_or_else(|| super::Tensor::zeros(original.shape()));
        let mut worst = 0.0f64;
        for i in 0..original.len() {
            let mut probe = original.clone();
            probe.data_mut()[i] = original.data()[i] + step;
            graph.set_leaf_value(id, probe.clone());
            graph.replay_from(id)?;
            let plus = graph.value(loss).item();
            probe.data_mut()[i] = original.data()[i] - step;
            graph.set_leaf_value(id, probe);
            graph.replay_from(id)?;
            let minus = graph.value(loss).item();
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
        }
        graph.set_leaf_value(id, original);
        graph.replay_from(id)?;
        max_err = max_err.max(worst);
        per_parameter.push((name, worst));
    }
    Ok(GradReport {
        per_parameter,
        max_relative_error: max_err,
        tolerance: tol,
        pass: max_err < tol,
    })
}
