//! Training objectives.
//!
//! Each objective comes in two forms: a plain function over slices, and a
//! graph builder that records the same computation for backpropagation. The
//! temperature enters as `t = 1/σ²`, so the tempered softmax is
//! `softmax(t·h)`.

use crate::autodiff::{log_sum_exp_values, softmax_values, Graph, NodeId};
use crate::error::{Error, Result};
use crate::N_DISCRETE;

fn check_sigma(sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!(
            "temperature σ must be positive, got {sigma}"
        )));
    }
    Ok(1.0 / (sigma * sigma))
}

/// `softmax(h / σ²)`.
pub fn tempered_softmax(h: &[f64], sigma: f64) -> Result<Vec<f64>> {
    let t = check_sigma(sigma)?;
    if h.is_empty() {
        return Err(Error::Input("tempered softmax of an empty vector".into()));
    }
    let scaled: Vec<f64> = h.iter().map(|v| v * t).collect();
    Ok(softmax_values(&scaled))
}

/// `-(h_i/σ² - log Σ_j exp(h_j/σ²))`.
pub fn tempered_cross_entropy(h: &[f64], sigma: f64, target: usize) -> Result<f64> {
    let t = check_sigma(sigma)?;
    if target >= h.len() {
        return Err(Error::Input(format!(
            "target index {target} out of range for {} classes",
            h.len()
        )));
    }
    let scaled: Vec<f64> = h.iter().map(|v| v * t).collect();
    Ok(log_sum_exp_values(&scaled) - scaled[target])
}

/// Squared L2 distance `‖y - ỹ‖²`.
pub fn mse_loss(y: &[f64], y_tilde: &[f64]) -> Result<f64> {
    if y.len() != y_tilde.len() {
        return Err(Error::dim("mse_loss", &[y.len()], &[y_tilde.len()]));
    }
    Ok(y.iter().zip(y_tilde).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `mse + β·CE(h_discrete, σ, argmax y_discrete)`.
pub fn total_loss(
    y: &[f64],
    y_tilde: &[f64],
    h_emotion: &[f64],
    sigma: f64,
    beta: f64,
) -> Result<f64> {
    check_beta(beta)?;
    let mse = mse_loss(y, y_tilde)?;
    if beta == 0.0 {
        return Ok(mse);
    }
    let (h, target) = discrete_parts(y, h_emotion)?;
    Ok(mse + beta * tempered_cross_entropy(h, sigma, target)?)
}

/// Log of the gap between `Σ exp(h/σ²)` and `(Σ exp h)^{1/σ²}`:
/// `LSE(h/σ²) - LSE(h)/σ²`. Zero exactly at `σ = 1`.
pub fn approximation_log_gap(h: &[f64], sigma: f64) -> Result<f64> {
    let t = check_sigma(sigma)?;
    let scaled: Vec<f64> = h.iter().map(|v| v * t).collect();
    Ok(log_sum_exp_values(&scaled) - t * log_sum_exp_values(h))
}

/// The two sides `(Σ exp(h/σ²), (Σ exp h)^{1/σ²})` of the approximation.
pub fn approximation_sides(h: &[f64], sigma: f64) -> Result<(f64, f64)> {
    let t = check_sigma(sigma)?;
    let lhs = h.iter().map(|v| (v * t).exp()).sum::<f64>();
    let rhs = h.iter().map(|v| v.exp()).sum::<f64>().powf(t);
    Ok((lhs, rhs))
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Parameter(format!("β must be >= 0, got {beta}")));
    }
    Ok(())
}

fn discrete_parts<'a>(y: &[f64], h_emotion: &'a [f64]) -> Result<(&'a [f64], usize)> {
    if y.len() < N_DISCRETE || h_emotion.len() < N_DISCRETE {
        return Err(Error::dim("total_loss", &[y.len()], &[h_emotion.len()]));
    }
    Ok((&h_emotion[..N_DISCRETE], argmax(&y[..N_DISCRETE])))
}

/// Recorded `1/σ²` from a node holding `σ`.
pub fn inverse_square_node(g: &mut Graph, sigma: NodeId) -> NodeId {
    g.powf(sigma, -2.0)
}

/// Recorded tempered softmax; `sigma` holds `σ` as a one-element node.
pub fn tempered_softmax_node(g: &mut Graph, h: NodeId, sigma: NodeId) -> Result<NodeId> {
    let t = inverse_square_node(g, sigma);
    let scaled = g.scale_by(h, t)?;
    g.softmax(scaled)
}

/// Recorded tempered cross-entropy.
pub fn tempered_cross_entropy_node(
    g: &mut Graph,
    h: NodeId,
    sigma: NodeId,
    target: usize,
) -> Result<NodeId> {
    let d = g.value(h).len();
    if target >= d {
        return Err(Error::Input(format!(
            "target index {target} out of range for {d} classes"
        )));
    }
    let t = inverse_square_node(g, sigma);
    let scaled = g.scale_by(h, t)?;
    let lse = g.log_sum_exp(scaled)?;
    let picked = g.pick(scaled, target)?;
    g.sub(lse, picked)
}

/// Recorded `‖y - ỹ‖²`.
pub fn mse_node(g: &mut Graph, y: NodeId, y_tilde: NodeId) -> Result<NodeId> {
    g.squared_distance(y_tilde, y)
}

/// Recorded [`total_loss`]. The cross-entropy term is only added when
/// `β > 0`, so `σ` receives no gradient otherwise.
pub fn total_loss_node(
    g: &mut Graph,
    y: NodeId,
    y_tilde: NodeId,
    h_emotion: NodeId,
    sigma: NodeId,
    beta: f64,
) -> Result<NodeId> {
    check_beta(beta)?;
    let mse = mse_node(g, y, y_tilde)?;
    if beta == 0.0 {
        return Ok(mse);
    }
    let target = argmax(&g.value(y).data()[..N_DISCRETE]);
    let h = g.slice(h_emotion, 0, N_DISCRETE)?;
    let ce = tempered_cross_entropy_node(g, h, sigma, target)?;
    let weighted = g.scale(ce, beta);
    g.add(mse, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::tensor::Tensor;

    #[test]
    fn tempered_softmax_examples() {
        let h = [0.3, -1.2, 2.0];
        let plain = softmax_values(&h);
        for (a, b) in tempered_softmax(&h, 1.0).unwrap().iter().zip(plain) {
            assert!((a - b).abs() <= 1e-15);
        }
        for p in tempered_softmax(&[5.0, -3.0, 0.0, 9.0], 100.0).unwrap() {
            assert!((p - 0.25).abs() < 1e-3);
        }
        let p = tempered_softmax(&[0.0, 3f64.ln()], 1.0).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        assert!(matches!(
            tempered_softmax(&[1.0], 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = tempered_cross_entropy(&[0.0, 3f64.ln()], 1.0, 1).unwrap();
        assert!((ce - 0.28768207245178085).abs() < 1e-12);
        let uniform = tempered_cross_entropy(&[0.7; 5], 2.3, 3).unwrap();
        assert!((uniform - 5f64.ln()).abs() < 1e-12);
        assert!(matches!(
            tempered_cross_entropy(&[0.0, 1.0], 1.0, 2),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn cross_entropy_is_shift_invariant() {
        let h = [0.4, -0.1, 1.7, 0.0];
        let shifted: Vec<f64> = h.iter().map(|v| v + 12.5).collect();
        let a = tempered_cross_entropy(&h, 0.8, 2).unwrap();
        let b = tempered_cross_entropy(&shifted, 0.8, 2).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[0.3, 0.2], &[0.3, 0.2]).unwrap(), 0.0);
        let mut y = vec![0.0; 29];
        y[0] = 1.0;
        assert_eq!(mse_loss(&y, &[0.0; 29]).unwrap(), 1.0);
        assert_eq!(mse_loss(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert!(matches!(mse_loss(&[1.0], &[1.0, 2.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn total_loss_examples() {
        let y = vec![0.5; 29];
        let yt = vec![0.25; 29];
        let h = vec![0.0; 29];
        assert_eq!(
            total_loss(&y, &yt, &h, 1.0, 0.0).unwrap(),
            mse_loss(&y, &yt).unwrap()
        );
        let both = total_loss(&y, &y, &h, 1.0, 1.0).unwrap();
        assert!((both - (N_DISCRETE as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_wrt_sigma_at_1_3() {
        let h = Tensor::vector(vec![0.2, -0.5, 1.1, 0.3]);
        let err = grad_check(
            |g, s| {
                let hn = g.leaf(h.clone());
                tempered_cross_entropy_node(g, hn, s, 2)
            },
            &Tensor::vector(vec![1.3]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn cross_entropy_gradient_matches_closed_form() {
        let h = [0.2, -0.5, 1.1, 0.3];
        let sigma = 0.9;
        let mut g = Graph::new();
        let hn = g.leaf(Tensor::vector(h.to_vec()));
        let s = g.leaf(Tensor::scalar(sigma));
        let ce = tempered_cross_entropy_node(&mut g, hn, s, 1).unwrap();
        g.backward(ce).unwrap();
        let p = tempered_softmax(&h, sigma).unwrap();
        let t = 1.0 / (sigma * sigma);
        for (i, (&gv, pv)) in g.grad_data(hn).iter().zip(p).enumerate() {
            let expected = (pv - if i == 1 { 1.0 } else { 0.0 }) * t;
            assert!((gv - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_gradient_only_with_positive_beta() {
        for (beta, nonzero) in [(0.0, false), (1.0, true)] {
            let mut g = Graph::new();
            let mut yv = vec![0.1; 29];
            yv[4] = 0.9;
            let y = g.leaf(Tensor::vector(yv));
            let yt = g.leaf(Tensor::vector(vec![0.3; 29]));
            let h = g.leaf(Tensor::vector((0..29).map(|i| i as f64 * 0.01).collect()));
            let s = g.leaf(Tensor::scalar(1.2));
            let loss = total_loss_node(&mut g, y, yt, h, s, beta).unwrap();
            g.backward(loss).unwrap();
            assert_eq!(g.grad_data(s)[0] != 0.0, nonzero);
        }
    }

    #[test]
    fn approximation_is_exact_at_unit_temperature() {
        let h = [0.3, -1.0, 2.2];
        let (lhs, rhs) = approximation_sides(&h, 1.0).unwrap();
        assert_eq!(lhs, rhs);
        assert_eq!(approximation_log_gap(&h, 1.0).unwrap(), 0.0);
    }
}
