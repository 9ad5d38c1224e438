//! Gaussian kernel density estimates of entropy and mutual information.
//!
//! Both estimators work on probability masses rather than integrated
//! densities: the density is evaluated at the observed points and
//! normalized to sum to one, so results are bounded by `log2 n`.
//!
//! The bandwidth follows Silverman's rule `h = 1.06·σ·n^{-1/5}` with the
//! sample standard deviation. For the joint density the same factor scales
//! the sample covariance, which keeps the estimate equivariant under affine
//! maps of either variable and reduces to a product kernel for uncorrelated
//! data.

use crate::error::{Error, Result};

const DEGENERATE_STD: f64 = 1e-12;
const MAX_CORRELATION: f64 = 1.0 - 1e-9;
const NEGATIVE_TOLERANCE: f64 = 0.05;
/// Largest exponent magnitude allowed on the factorized joint path.
const SAFE_EXPONENT: f64 = 600.0;

/// Silverman's factor `1.06·n^{-1/5}`; multiply by σ for the bandwidth.
pub fn silverman_factor(n: usize) -> f64 {
    1.06 * (n as f64).powf(-0.2)
}

/// Sample mean and standard deviation (`n − 1` denominator).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn require_len(values: &[f64]) -> Result<()> {
    if values.len() < 2 {
        return Err(Error::Input(format!(
            "kernel density estimates need at least 2 values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in KDE input".into()));
    }
    Ok(())
}

fn shannon_bits(masses: &[f64]) -> f64 {
    -masses
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.log2())
        .sum::<f64>()
}

/// KDE masses at the sample points; `None` for a degenerate sample.
pub fn kde_masses(values: &[f64]) -> Result<Option<Vec<f64>>> {
    require_len(values)?;
    let (_, std) = mean_std(values);
    if std < DEGENERATE_STD {
        return Ok(None);
    }
    let h = silverman_factor(values.len()) * std;
    let c = -0.5 / (h * h);
    let density: Vec<f64> = values
        .iter()
        .map(|&x| values.iter().map(|&y| (c * (x - y) * (x - y)).exp()).sum())
        .collect();
    let total: f64 = density.iter().sum();
    Ok(Some(density.into_iter().map(|d| d / total).collect()))
}

/// Shannon entropy in bits of the KDE masses at the sample points.
pub fn entropy_kde(values: &[f64]) -> Result<f64> {
    Ok(kde_masses(values)?.map_or(0.0, |m| shannon_bits(&m)))
}

/// Mutual information in bits between paired samples.
///
/// The joint density is evaluated on the grid of observed values
/// `(y_a, ŷ_b)` and normalized to masses; the marginals are its row and
/// column sums.
pub fn mutual_information_kde(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    require_len(y)?;
    require_len(y_hat)?;
    if y.len() != y_hat.len() {
        return Err(Error::dim("mutual_information_kde", &[y.len()], &[y_hat.len()]));
    }
    let Some(joint) = joint_masses(y, y_hat)? else {
        return Ok(0.0);
    };
    mi_from_joint(&joint, y.len())
}

fn mi_from_joint(joint: &[f64], n: usize) -> Result<f64> {
    let mut row = vec![0.0; n];
    let mut col = vec![0.0; n];
    for a in 0..n {
        for b in 0..n {
            let p = joint[a * n + b];
            row[a] += p;
            col[b] += p;
        }
    }
    let mut mi = 0.0;
    for a in 0..n {
        for b in 0..n {
            let p = joint[a * n + b];
            if p > 0.0 {
                mi += p * (p / (row[a] * col[b])).log2();
            }
        }
    }
    if mi < -NEGATIVE_TOLERANCE {
        return Err(Error::Numeric(format!(
            "mutual information estimate {mi} is below the tolerance"
        )));
    }
    Ok(mi.max(0.0))
}

/// Standardized copies and the kernel precision `[a11, a12, a22]`.
struct JointKernel {
    u: Vec<f64>,
    v: Vec<f64>,
    a11: f64,
    a12: f64,
    a22: f64,
}

impl JointKernel {
    fn new(y: &[f64], y_hat: &[f64]) -> Option<Self> {
        let (my, sy) = mean_std(y);
        let (mh, sh) = mean_std(y_hat);
        if sy < DEGENERATE_STD || sh < DEGENERATE_STD {
            return None;
        }
        let u: Vec<f64> = y.iter().map(|v| (v - my) / sy).collect();
        let v: Vec<f64> = y_hat.iter().map(|x| (x - mh) / sh).collect();
        let n = y.len() as f64;
        let rho = (u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / (n - 1.0))
            .clamp(-MAX_CORRELATION, MAX_CORRELATION);
        let s2 = silverman_factor(y.len()).powi(2);
        let det = s2 * (1.0 - rho * rho);
        Some(Self {
            u,
            v,
            a11: 1.0 / det,
            a12: -rho / det,
            a22: 1.0 / det,
        })
    }

    fn exponent(&self, du: f64, dv: f64) -> f64 {
        -0.5 * (self.a11 * du * du + 2.0 * self.a12 * du * dv + self.a22 * dv * dv)
    }
}

/// Joint masses on the `n × n` grid, row-major by `y` index.
pub fn joint_masses(y: &[f64], y_hat: &[f64]) -> Result<Option<Vec<f64>>> {
    let Some(kernel) = JointKernel::new(y, y_hat) else {
        return Ok(None);
    };
    let joint = joint_factorized(&kernel).unwrap_or_else(|| joint_direct(&kernel));
    let total: f64 = joint.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Numeric("joint KDE mass is not positive and finite".into()));
    }
    Ok(Some(joint.into_iter().map(|p| p / total).collect()))
}

/// Unnormalized joint density by direct summation, `O(n³)` exponentials.
fn joint_direct(k: &JointKernel) -> Vec<f64> {
    let n = k.u.len();
    let mut out = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            out[a * n + b] = (0..n)
                .map(|j| k.exponent(k.u[a] - k.u[j], k.v[b] - k.v[j]).exp())
                .sum();
        }
    }
    out
}

/// Unnormalized joint density with the cross term split into a matrix
/// product; `None` when any factor's exponent is too large to be safe.
fn joint_factorized(k: &JointKernel) -> Option<Vec<f64>> {
    let n = k.u.len();
    let (u, v) = (&k.u, &k.v);
    // -a12·(u_a − u_j)(v_b − v_j) = -a12·u_a·v_b + a12·u_a·v_j + a12·u_j·v_b − a12·u_j·v_j
    let mut left = vec![0.0; n * n];
    let mut right = vec![0.0; n * n];
    for a in 0..n {
        for j in 0..n {
            let du = u[a] - u[j];
            let e = -0.5 * k.a11 * du * du + k.a12 * u[a] * v[j] - k.a12 * u[j] * v[j];
            if e.abs() > SAFE_EXPONENT {
                return None;
            }
            left[a * n + j] = e.exp();
        }
    }
    for j in 0..n {
        for b in 0..n {
            let dv = v[b] - v[j];
            let e = -0.5 * k.a22 * dv * dv + k.a12 * u[j] * v[b];
            if e.abs() > SAFE_EXPONENT {
                return None;
            }
            right[j * n + b] = e.exp();
        }
    }
    let mut out = vec![0.0; n * n];
    for a in 0..n {
        let row = &mut out[a * n..(a + 1) * n];
        for j in 0..n {
            let l = left[a * n + j];
            for (o, r) in row.iter_mut().zip(&right[j * n..(j + 1) * n]) {
                *o += l * r;
            }
        }
    }
    for a in 0..n {
        for b in 0..n {
            let e = -k.a12 * u[a] * v[b];
            if e.abs() > SAFE_EXPONENT {
                return None;
            }
            out[a * n + b] *= e.exp();
        }
    }
    Some(out)
}
