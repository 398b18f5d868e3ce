use std::f64::consts::{E, PI};

use nalgebra::DMatrix;

use super::layer::MeanFieldLayer;
use super::sampling::{std_normal_cdf, std_normal_pdf};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Differential entropy of a diagonal Gaussian: `Σ log σ_i + (D/2) log 2πe`.
pub fn entropy_gaussian(layer: &MeanFieldLayer) -> f64 {
    let d = layer.dim() as f64;
    sum_log_sigma(layer) + 0.5 * d * (2.0 * PI * E).ln()
}

/// Entropy of the radial posterior as derived in hyperspherical coordinates:
/// `Σ log σ_i + ½ log 2π + ½`. Only the first term depends on the parameters.
pub fn entropy_radial(layer: &MeanFieldLayer) -> f64 {
    sum_log_sigma(layer) + radial_entropy_constant()
}

pub fn radial_entropy_constant() -> f64 {
    0.5 * (2.0 * PI).ln() + 0.5
}

/// Entropy of per-coordinate Gaussian noise truncated to `[-c, c]`, scaled by `σ`.
pub fn entropy_truncated(layer: &MeanFieldLayer, c: f64) -> f64 {
    sum_log_sigma(layer) + layer.dim() as f64 * truncated_normal_entropy(c)
}

/// Entropy of a standard normal truncated to `[-c, c]`.
pub fn truncated_normal_entropy(c: f64) -> f64 {
    let z = 2.0 * std_normal_cdf(c) - 1.0;
    0.5 * (2.0 * PI).ln() + 0.5 - c * std_normal_pdf(c) / z + z.ln()
}

pub fn sum_log_sigma(layer: &MeanFieldLayer) -> f64 {
    layer.sigma().data().iter().map(|s| s.ln()).sum()
}

/// `KL(q ‖ p)` between diagonal Gaussians of matching shape.
pub fn kl_diag_gaussians(q: &MeanFieldLayer, p: &MeanFieldLayer) -> Result<f64> {
    if q.shape() != p.shape() {
        return Err(Error::Dimension {
            context: "kl_diag_gaussians",
            expected: q.shape().to_vec(),
            actual: p.shape().to_vec(),
        });
    }
    Ok(kl_diag_raw(q.mu(), &q.sigma(), p.mu(), &p.sigma()))
}

/// Closed form `Σ_i log(σp/σq) + (σq² + (μq − μp)²) / 2σp² − ½`.
pub fn kl_diag_raw(mu_q: &Tensor, sig_q: &Tensor, mu_p: &Tensor, sig_p: &Tensor) -> f64 {
    mu_q.data()
        .iter()
        .zip(sig_q.data())
        .zip(mu_p.data().iter().zip(sig_p.data()))
        .map(|((mq, sq), (mp, sp))| {
            (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5
        })
        .sum()
}

/// Information lost by dropping the off-diagonal of a Gaussian covariance:
/// `KL(N(m, Σ) ‖ N(m, diag Σ)) = ½ (Σ_i log Σ_ii − log det Σ)`.
///
/// The means cancel, so only the covariance is needed.
pub fn kl_full_vs_diag(cov: &Tensor) -> Result<f64> {
    let n = cov.rows();
    if cov.shape() != [n, n] {
        return Err(Error::Dimension {
            context: "kl_full_vs_diag",
            expected: vec![n, n],
            actual: cov.shape().to_vec(),
        });
    }
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (cov.get2(i, j), cov.get2(j, i));
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                return Err(Error::NotPositiveDefinite);
            }
        }
    }
    let m = DMatrix::from_row_slice(n, n, cov.data());
    let chol = m.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_diag: f64 = (0..n).map(|i| cov.get2(i, i).ln()).sum();
    Ok(0.5 * (log_diag - log_det))
}
