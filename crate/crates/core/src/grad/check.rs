use super::{GradError, Graph, NodeId, ParameterSet, Tensor};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |analytic − fd| / max(1, |fd|)` over every parameter entry.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// The graph contains stop-gradient or straight-through nodes, so a
    /// mismatch with finite differences is expected rather than a defect.
    pub has_detaching_ops: bool,
}

/// Checks the gradients of the scalar built by `build` at `point`.
///
/// `build` receives a fresh graph and the parameter values and must return
/// the loss node. Perturbed points are evaluated with [`Graph::forward`], so
/// the graph structure is built once.
pub fn gradient_check<F>(build: F, point: &ParameterSet, eps: f64) -> Result<GradCheck, GradError>
where
    F: FnOnce(&mut Graph, &ParameterSet) -> Result<NodeId, GradError>,
{
    check_eps(eps)?;
    let mut graph = Graph::new();
    let loss = build(&mut graph, point)?;
    let analytic = graph.backward(loss)?.parameters(&graph);
    let fd = central_differences(&mut graph, loss, point, eps)?;
    let (max_rel_error, worst) = max_relative_error(&analytic, &fd);
    Ok(GradCheck {
        max_rel_error,
        worst,
        has_detaching_ops: graph.contains_detaching_ops(),
    })
}

/// Central-difference gradients of the scalar built by `build`, for every
/// parameter of `point` that the graph uses.
pub fn finite_differences<F>(build: F, point: &ParameterSet, eps: f64) -> Result<ParameterSet, GradError>
where
    F: FnOnce(&mut Graph, &ParameterSet) -> Result<NodeId, GradError>,
{
    check_eps(eps)?;
    let mut graph = Graph::new();
    let loss = build(&mut graph, point)?;
    central_differences(&mut graph, loss, point, eps)
}

/// `max |a − r| / max(1, |r|)` over entries present in both sets, with the
/// name and flat index of the worst entry.
pub fn max_relative_error(analytic: &ParameterSet, reference: &ParameterSet) -> (f64, Option<(String, usize)>) {
    let mut worst = None;
    let mut max_err = 0.0f64;
    for (name, r) in reference {
        let Some(a) = analytic.get(name) else { continue };
        for (idx, (x, y)) in a.data().iter().zip(r.data()).enumerate() {
            let err = (x - y).abs() / y.abs().max(1.0);
            if err > max_err || worst.is_none() {
                max_err = max_err.max(err);
                worst = Some((name.clone(), idx));
            }
        }
    }
    (max_err, worst)
}

fn check_eps(eps: f64) -> Result<(), GradError> {
    if !(eps > 1e-8 && eps < 1e-2) {
        return Err(GradError::Usage(format!("eps {eps} outside (1e-8, 1e-2)")));
    }
    Ok(())
}

fn central_differences(
    graph: &mut Graph,
    loss: NodeId,
    point: &ParameterSet,
    eps: f64,
) -> Result<ParameterSet, GradError> {
    let mut out = ParameterSet::new();
    let mut probe = point.clone();
    for (name, value) in point {
        if graph.leaf(name).is_none() {
            continue;
        }
        let mut grad = vec![0.0; value.len()];
        for (idx, slot) in grad.iter_mut().enumerate() {
            let base = value.data()[idx];
            let mut eval_at = |x: f64| -> Result<f64, GradError> {
                probe.get_mut(name).expect("cloned from point").data_mut()[idx] = x;
                graph.forward(&probe)?;
                Ok(graph.value(loss).data()[0])
            };
            let plus = eval_at(base + eps)?;
            let minus = eval_at(base - eps)?;
            eval_at(base)?;
            *slot = (plus - minus) / (2.0 * eps);
        }
        out.insert(name.clone(), Tensor::new(value.rows(), value.cols(), grad)?)?;
    }
    Ok(out)
}
