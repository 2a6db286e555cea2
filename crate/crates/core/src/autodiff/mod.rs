//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is built from a small fixed set of primitives (elementwise
//! arithmetic, matrix products, exp/log/tanh, softmax and log-softmax over
//! the last axis, sum/mean reductions, gather, clip, stop-gradient and
//! embedding lookup). Leaves are bound by name at evaluation time, which
//! lets the same graph be re-evaluated under perturbed parameters for
//! finite-difference checks.

mod array;
mod graph;
pub mod kernels;

pub use array::Array;
pub use graph::{Bindings, Evaluation, GradientReport, Graph, NodeId};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("invalid array: {0}")]
    InvalidArray(String),
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("leaf {0} has no binding")]
    Unbound(String),
    #[error("gradient output must be scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
}

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of `output` with respect to `parameter`
/// against central differences with the given `step`, over every element.
///
/// Returns the largest elementwise relative error.
pub fn check_gradient(
    graph: &Graph,
    bindings: &Bindings,
    output: NodeId,
    parameter: &str,
    step: f64,
) -> Result<f64, AutodiffError> {
    let n = bindings
        .get(parameter)
        .ok_or_else(|| AutodiffError::UnknownParameter(parameter.to_string()))?
        .len();
    check_gradient_at(graph, bindings, output, parameter, step, 0..n)
}

/// Like [`check_gradient`] but only over the listed flat element indices.
pub fn check_gradient_at(
    graph: &Graph,
    bindings: &Bindings,
    output: NodeId,
    parameter: &str,
    step: f64,
    elements: impl IntoIterator<Item = usize>,
) -> Result<f64, AutodiffError> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let eval = graph.evaluate(bindings)?;
    let report = graph.gradient(&eval, output)?;
    let analytic = report
        .get(parameter)
        .ok_or_else(|| AutodiffError::UnknownParameter(parameter.to_string()))?;
    let mut probe = bindings.clone();
    let base = bindings[parameter].clone();
    let mut worst = 0.0_f64;
    for i in elements {
        let mut plus = base.clone();
        plus.data_mut()[i] += step;
        probe.insert(parameter.to_string(), plus);
        let f_plus = graph.eval_scalar(&probe, output)?;
        let mut minus = base.clone();
        minus.data_mut()[i] -= step;
        probe.insert(parameter.to_string(), minus);
        let f_minus = graph.eval_scalar(&probe, output)?;
        let numeric = (f_plus - f_minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Runs [`check_gradient`] over every trainable parameter of the graph.
pub fn check_all_gradients(
    graph: &Graph,
    bindings: &Bindings,
    output: NodeId,
    step: f64,
) -> Result<GradientReport, AutodiffError> {
    let eval = graph.evaluate(bindings)?;
    let mut report = graph.gradient(&eval, output)?;
    let mut worst = 0.0_f64;
    for name in graph.parameters() {
        worst = worst.max(check_gradient(graph, bindings, output, &name, step)?);
    }
    report.max_rel_error = Some(worst);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Array)]) -> Bindings {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn square_value_and_derivative() {
        let mut g = Graph::new();
        let x = g.param("x", &[]);
        let y = g.mul(x, x);
        let b = bind(&[("x", Array::scalar(3.0))]);
        let eval = g.evaluate(&b).unwrap();
        assert_eq!(eval.scalar(y), 9.0);
        let grads = g.gradient(&eval, y).unwrap();
        assert_eq!(grads.get("x").unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input("x", &[3]);
        let s = g.softmax(x);
        let eval = g.evaluate(&bind(&[("x", Array::vector(vec![0.0; 3]))])).unwrap();
        for &v in eval.get(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_matches_scalar_math() {
        // scalar oracle: log(e^a / (e^1 + e^2))
        let lse = (1.0_f64.exp() + 2.0_f64.exp()).ln();
        let expected = [1.0 - lse, 2.0 - lse];
        let mut g = Graph::new();
        let x = g.input("x", &[2]);
        let s = g.log_softmax(x);
        let eval = g.evaluate(&bind(&[("x", Array::vector(vec![1.0, 2.0]))])).unwrap();
        for (a, b) in eval.get(s).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((expected[0] + 1.3133).abs() < 1e-4);
        assert!((expected[1] + 0.3133).abs() < 1e-4);
    }

    #[test]
    fn stop_gradient_is_identity_forward_zero_backward() {
        let mut g = Graph::new();
        let x = g.param("x", &[]);
        let s = g.stop_gradient(x);
        let y = g.mul(s, s);
        let eval = g.evaluate(&bind(&[("x", Array::scalar(3.0))])).unwrap();
        assert_eq!(eval.scalar(y), 9.0);
        let grads = g.gradient(&eval, y).unwrap();
        assert_eq!(grads.get("x").unwrap().item(), 0.0);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", &[2]);
        let _unused = g.param("w", &[2, 2]);
        let y = g.sum(x);
        let b = bind(&[("x", Array::vector(vec![1.0, 2.0])), ("w", Array::zeros(&[2, 2]))]);
        let eval = g.evaluate(&b).unwrap();
        let grads = g.gradient(&eval, y).unwrap();
        assert_eq!(grads.get("w").unwrap(), &Array::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", &[2]);
        let y = g.exp(x);
        let eval = g.evaluate(&bind(&[("x", Array::vector(vec![0.0, 1.0]))])).unwrap();
        assert!(matches!(
            g.gradient(&eval, y),
            Err(AutodiffError::NonScalarOutput(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_reported_on_evaluate() {
        let mut g = Graph::new();
        let a = g.input("a", &[2, 3]);
        let b = g.input("b", &[2, 3]);
        let _ = g.matmul(a, b);
        let b = bind(&[("a", Array::zeros(&[2, 3])), ("b", Array::zeros(&[2, 3]))]);
        assert!(matches!(
            g.evaluate(&b),
            Err(AutodiffError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn binding_shape_mismatch() {
        let mut g = Graph::new();
        let _ = g.input("a", &[2]);
        assert!(g.evaluate(&bind(&[("a", Array::zeros(&[3]))])).is_err());
    }

    #[test]
    fn non_finite_reports_node() {
        let mut g = Graph::new();
        let x = g.input("x", &[1]);
        let l = g.log(x);
        let err = g.evaluate(&bind(&[("x", Array::vector(vec![0.0]))])).unwrap_err();
        assert_eq!(err, AutodiffError::NonFinite { node: l.index(), op: "log" });
    }

    #[test]
    fn linear_graph_gradient_is_exact() {
        let mut g = Graph::new();
        let x = g.param("x", &[]);
        let y = g.scale(x, 2.0);
        let err = check_gradient(&g, &bind(&[("x", Array::scalar(0.7))]), y, "x", 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn mean_softmax_of_projection_matches_finite_differences() {
        let mut g = Graph::new();
        let w = g.param("w", &[3, 4]);
        let h = g.input("h", &[2, 3]);
        let z = g.matmul(h, w);
        let s = g.softmax(z);
        // weight the probabilities so the mean is not constant
        let c = g.constant(Array::matrix(2, 4, vec![0.3, -1.0, 2.0, 0.5, 1.5, 0.1, -0.7, 0.9]));
        let p = g.mul(s, c);
        let out = g.mean(p);
        let b = bind(&[
            ("w", Array::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.7).sin()).collect())),
            ("h", Array::matrix(2, 3, vec![0.5, -0.2, 1.0, 0.3, 0.8, -0.6])),
        ]);
        let err = check_gradient(&g, &b, out, "w", 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        let mut g = Graph::new();
        let a = g.param("a", &[2, 3]);
        let b = g.param("b", &[3]);
        let t = g.param("t", &[4, 3]);
        let e = g.embedding(t, vec![1, 3]);
        let x = g.add(a, b);
        let x = g.mul(x, e);
        let x = g.tanh(x);
        let y = g.matmul_nt(x, t);
        let ls = g.log_softmax(y);
        let pick = g.gather(ls, vec![0, 2]);
        let ex = g.exp(pick);
        let cl = g.clip(ex, 0.05, 0.3);
        let lg = g.log(cl);
        let m = g.minimum(lg, pick);
        let o = g.offset(m, 1.5);
        let s1 = g.sum(o);
        let sq = g.mul(s1, s1);
        let out = g.scale(sq, 0.5);
        let b = bind(&[
            ("a", Array::matrix(2, 3, vec![0.1, -0.4, 0.3, 0.9, -0.2, 0.5])),
            ("b", Array::vector(vec![0.05, 0.2, -0.1])),
            ("t", Array::matrix(4, 3, (0..12).map(|i| (i as f64 * 1.3).cos()).collect())),
        ]);
        let report = check_all_gradients(&g, &b, out, 1e-5).unwrap();
        assert!(report.max_rel_error.unwrap() < 1e-6, "{:?}", report.max_rel_error);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let mut g = Graph::new();
        let w = g.param("w", &[2, 2]);
        let s = g.softmax(w);
        let o = g.mean(s);
        let b = bind(&[("w", Array::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]))]);
        let e1 = g.evaluate(&b).unwrap();
        let e2 = g.evaluate(&b).unwrap();
        assert_eq!(e1.get(s), e2.get(s));
        assert_eq!(g.gradient(&e1, o).unwrap().grads, g.gradient(&e2, o).unwrap().grads);
    }
}
