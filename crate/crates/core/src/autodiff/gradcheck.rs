//! Central finite-difference verification of reverse-mode gradients.

use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of checking one scalar function against finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over all coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// The same maximum restricted to each input.
    pub per_input: Vec<f64>,
}

/// Checks the gradient of a scalar function of one tensor.
///
/// `f` receives a fresh graph and the leaf holding the (possibly perturbed)
/// point, and must return a one-element node.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let report = grad_check_many(
        |g, ids| f(g, ids[0]),
        std::slice::from_ref(point),
        eps,
    )?;
    Ok(report.max_rel_error)
}

/// Checks the gradient of a scalar function of several tensors at once.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Parameter(format!(
            "finite-difference step must lie in (0, 1e-2], got {eps}"
        )));
    }

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = pts.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&mut g, &ids)?;
        let v = scalar_of(&g, out)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite function value {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = points.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    let v = scalar_of(&g, out)?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite function value {v}")));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad_data(id).to_vec()).collect();

    let mut work = points.to_vec();
    let mut per_input = Vec::with_capacity(points.len());
    for (which, grads) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (k, &a) in grads.iter().enumerate() {
            if !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite analytic gradient at input {which}, coordinate {k}"
                )));
            }
            let original = work[which].data()[k];
            work[which].data_mut()[k] = original + eps;
            let plus = eval(&work)?;
            work[which].data_mut()[k] = original - eps;
            let minus = eval(&work)?;
            work[which].data_mut()[k] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
        per_input.push(worst);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_input,
    })
}

fn scalar_of(g: &Graph, id: NodeId) -> Result<f64> {
    let v = g.value(id);
    if v.len() != 1 {
        return Err(Error::dim("grad_check", v.shape(), &[1]));
    }
    Ok(v.scalar_value())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let err = grad_check(
            |g, _x| Ok(g.leaf(Tensor::scalar(2.5))),
            &p,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn affine_then_squared_distance() {
        let x = Tensor::vector(vec![0.31, -0.72, 1.13]);
        let w = Tensor::matrix(3, 2, vec![0.2, -0.4, 0.9, 0.15, -0.33, 0.6]).unwrap();
        let b = Tensor::vector(vec![0.05, -0.1]);
        let target = Tensor::vector(vec![1.0, -2.0]);
        let report = grad_check_many(
            |g, ids| {
                let y = g.affine(ids[0], ids[1], ids[2])?;
                let t = g.leaf(target.clone());
                g.squared_distance(t, y)
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(report.per_input.len(), 3);
    }

    #[test]
    fn rejects_bad_step() {
        let p = Tensor::vector(vec![1.0]);
        assert!(grad_check(|g, x| Ok(g.sum(x)), &p, 0.0).is_err());
        assert!(grad_check(|g, x| Ok(g.sum(x)), &p, 0.5).is_err());
    }

    #[test]
    fn non_finite_value_is_a_numeric_error() {
        let p = Tensor::vector(vec![1000.0]);
        let err = grad_check(
            |g, x| {
                let e = g.exp(x);
                Ok(g.sum(e))
            },
            &p,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn detects_wrong_gradient() {
        // The analytic gradient of sum(relu(x)) is wrong near the kink when
        // the finite-difference stencil straddles zero.
        let p = Tensor::vector(vec![1e-7]);
        let err = grad_check(
            |g, x| {
                let r = g.relu(x);
                Ok(g.sum(r))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1);
    }
}
