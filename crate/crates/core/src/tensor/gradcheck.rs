use crate::error::{HmilError, Result};
use crate::tensor::{Graph, Matrix, NodeId, OpKind};

/// Floor on the denominator of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Compares reverse-mode gradients of `build` against central finite
/// differences, returning `max |analytic - numeric| / max(1e-8, |numeric|)`
/// over every entry of every parameter.
///
/// `build` receives a fresh graph and one trainable leaf per entry of
/// `params` and must return a scalar loss node.
pub fn grad_check<F>(params: &[Matrix], epsilon: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    grad_check_with_fault(params, epsilon, None, build)
}

/// As [`grad_check`], with the backward rule of `fault` deliberately
/// corrupted in the analytic pass.
pub fn grad_check_with_fault<F>(
    params: &[Matrix],
    epsilon: f64,
    fault: Option<OpKind>,
    build: F,
) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(epsilon > 0.0) {
        return Err(HmilError::Config(format!("epsilon must be positive, got {epsilon}")));
    }

    let mut graph = Graph::new();
    if let Some(kind) = fault {
        graph.inject_fault(kind);
    }
    let ids = params
        .iter()
        .map(|p| graph.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut graph, &ids)?;
    let analytic = graph.backward(loss, &ids)?.into_matrices();

    let evaluate = |values: &[Matrix]| -> Result<f64> {
        let mut g = Graph::new();
        let ids = values
            .iter()
            .map(|p| g.param(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut g, &ids).map_err(|e| match e {
            HmilError::Numeric(msg) => HmilError::Numeric(format!("while probing: {msg}")),
            other => other,
        })?;
        let v = g.scalar(loss);
        if !v.is_finite() {
            return Err(HmilError::Numeric("non-finite loss while probing".into()));
        }
        Ok(v)
    };

    let mut probe: Vec<Matrix> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for k in 0..grad.len() {
            let original = probe[pi].data()[k];
            probe[pi].data_mut()[k] = original + epsilon;
            let plus = evaluate(&probe)?;
            probe[pi].data_mut()[k] = original - epsilon;
            let minus = evaluate(&probe)?;
            probe[pi].data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = (grad.data()[k] - numeric).abs() / numeric.abs().max(REL_ERROR_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Matrix {
        Matrix::from_rows(&[[0.3, -1.2, 0.8], [2.0, -0.4, 0.1]]).unwrap()
    }

    #[test]
    fn quadratic_is_near_exact() {
        let err = grad_check(&[sample()], 1e-5, |g, p| {
            let sq = g.hadamard(p[0], p[0])?;
            let s = g.sum(sq)?;
            g.scale(s, 0.5)
        })
        .unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_toy() {
        let err = grad_check(&[sample()], 1e-5, |g, p| {
            let ls = g.log_softmax_rows(p[0])?;
            let a = g.pick(ls, 0, 2)?;
            let b = g.pick(ls, 1, 0)?;
            let s = g.add(a, b)?;
            g.scale(s, -1.0)
        })
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn rejects_nonpositive_epsilon() {
        let r = grad_check(&[sample()], 0.0, |g, p| g.sum(p[0]));
        assert!(matches!(r, Err(HmilError::Config(_))));
    }

    #[test]
    fn non_finite_probe_is_a_numeric_error() {
        let big = Matrix::scalar(709.78);
        let r = grad_check(&[big], 1e-2, |g, p| g.exp(p[0]));
        assert!(matches!(r, Err(HmilError::Numeric(_))), "{r:?}");
    }

    #[test]
    fn fault_injection_is_detected() {
        let build = |g: &mut Graph, p: &[NodeId]| {
            let t = g.tanh(p[0])?;
            g.sum(t)
        };
        let clean = grad_check(&[sample()], 1e-5, build).unwrap();
        let broken = grad_check_with_fault(&[sample()], 1e-5, Some(OpKind::Tanh), build).unwrap();
        assert!(clean < 1e-6);
        assert!(broken > 0.1);
    }
}
