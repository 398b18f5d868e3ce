use super::layer::{MeanFieldLayer, PosteriorKind, Provenance, WeightSample};
use crate::error::{invalid, Result};
use crate::numcore::{RngStream, Tensor};

/// Standardized noise multiplying `σ` in `w = μ + σ ⊙ noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub kind: PosteriorKind,
    pub scaled: Vec<f64>,
    pub eps: Vec<f64>,
    pub radius: Option<f64>,
    pub rejections: Option<usize>,
}

impl Noise {
    pub fn gaussian(rng: &mut RngStream, d: usize) -> Self {
        let eps = rng.normals(d);
        Self {
            kind: PosteriorKind::Gaussian,
            scaled: eps.clone(),
            eps,
            radius: None,
            rejections: None,
        }
    }

    /// Uniform direction on the unit sphere times `r = |N(0,1)|`.
    pub fn radial(rng: &mut RngStream, d: usize) -> Self {
        let eps = loop {
            let e = rng.normals(d);
            if e.iter().any(|v| *v != 0.0) {
                break e;
            }
        };
        let r = rng.normal().abs();
        Self::radial_from(eps, r)
    }

    /// Radial noise from a given direction draw and radius.
    pub fn radial_from(eps: Vec<f64>, r: f64) -> Self {
        let norm = eps.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scaled = eps.iter().map(|v| v / norm * r).collect();
        Self {
            kind: PosteriorKind::Radial,
            scaled,
            eps,
            radius: Some(r),
            rejections: None,
        }
    }

    pub fn truncated(rng: &mut RngStream, d: usize, c: f64) -> Self {
        let mut rejections = 0;
        let eps: Vec<f64> = (0..d)
            .map(|_| loop {
                let e = rng.normal();
                if e.abs() <= c {
                    break e;
                }
                rejections += 1;
            })
            .collect();
        Self {
            kind: PosteriorKind::TruncatedGaussian { c },
            scaled: eps.clone(),
            eps,
            radius: None,
            rejections: Some(rejections),
        }
    }

    /// Draws noise for a variational kind; dropout has no weight noise.
    pub fn draw(kind: PosteriorKind, rng: &mut RngStream, d: usize) -> Result<Self> {
        match kind.validate()? {
            PosteriorKind::Gaussian => Ok(Self::gaussian(rng, d)),
            PosteriorKind::Radial => Ok(Self::radial(rng, d)),
            PosteriorKind::TruncatedGaussian { c } => Ok(Self::truncated(rng, d, c)),
            PosteriorKind::McDropout { .. } => {
                Err(invalid("dropout posteriors carry no weight noise"))
            }
        }
    }

    /// Zero noise: the weights collapse onto their means.
    pub fn zero(kind: PosteriorKind, d: usize) -> Self {
        Self {
            kind,
            scaled: vec![0.0; d],
            eps: vec![0.0; d],
            radius: None,
            rejections: None,
        }
    }

    pub fn as_tensor(&self, shape: &[usize]) -> Tensor {
        Tensor::from_parts(shape.to_vec(), self.scaled.clone())
    }

    /// `E[noise_i²]` for this family: 1, `1/D`, or the truncated-normal variance.
    pub fn second_moment(kind: PosteriorKind, d: usize) -> f64 {
        match kind {
            PosteriorKind::Gaussian => 1.0,
            PosteriorKind::Radial => 1.0 / d as f64,
            PosteriorKind::TruncatedGaussian { c } => truncated_normal_variance(c),
            PosteriorKind::McDropout { .. } => 0.0,
        }
    }
}

/// Variance of a standard normal truncated to `[-c, c]`.
pub fn truncated_normal_variance(c: f64) -> f64 {
    let z = 2.0 * std_normal_cdf(c) - 1.0;
    1.0 - 2.0 * c * std_normal_pdf(c) / z
}

pub(crate) fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// `w = μ + σ ⊙ noise` with the noise recorded.
pub fn sample_with_noise(layer: &MeanFieldLayer, noise: Noise) -> Result<WeightSample> {
    if noise.scaled.len() != layer.dim() {
        return Err(invalid(format!(
            "noise of length {} for a layer of {} weights",
            noise.scaled.len(),
            layer.dim()
        )));
    }
    let sigma = layer.sigma();
    let values: Vec<f64> = layer
        .mu()
        .data()
        .iter()
        .zip(sigma.data())
        .zip(&noise.scaled)
        .map(|((m, s), e)| m + s * e)
        .collect();
    Ok(WeightSample {
        values: Tensor::from_parts(layer.shape().to_vec(), values),
        provenance: Provenance {
            kind: noise.kind,
            eps: noise.eps,
            radius: noise.radius,
            rejections: noise.rejections,
            mask: None,
        },
    })
}

pub fn sample_gaussian(layer: &MeanFieldLayer, rng: &mut RngStream) -> WeightSample {
    sample_with_noise(layer, Noise::gaussian(rng, layer.dim())).expect("noise sized to layer")
}

pub fn sample_radial(layer: &MeanFieldLayer, rng: &mut RngStream) -> WeightSample {
    sample_with_noise(layer, Noise::radial(rng, layer.dim())).expect("noise sized to layer")
}

pub fn sample_truncated(
    layer: &MeanFieldLayer,
    rng: &mut RngStream,
    c: f64,
) -> Result<WeightSample> {
    PosteriorKind::TruncatedGaussian { c }.validate()?;
    sample_with_noise(layer, Noise::truncated(rng, layer.dim(), c))
}

/// `k` Bernoulli keep-masks over `rows` units, drawn once.
pub fn dropout_masks(rng: &mut RngStream, rows: usize, p: f64, k: usize) -> Vec<Vec<bool>> {
    (0..k)
        .map(|_| (0..rows).map(|_| !rng.bernoulli(p)).collect())
        .collect()
}

/// Consistent MC-dropout: `k` row masks are drawn once and sample `i`
/// applies mask `i` with inverted scaling `1 / (1 − p)`.
pub fn sample_mc_dropout(
    base_weights: &Tensor,
    rng: &mut RngStream,
    p: f64,
    k: usize,
) -> Result<Vec<WeightSample>> {
    PosteriorKind::McDropout { p }.validate()?;
    if k == 0 {
        return Err(invalid("mask set size must be at least 1"));
    }
    let rows = base_weights.rows();
    let cols = base_weights.cols();
    let scale = 1.0 / (1.0 - p);
    Ok(dropout_masks(rng, rows, p, k)
        .into_iter()
        .map(|mask| {
            let mut values = base_weights.clone();
            for (r, keep) in mask.iter().enumerate() {
                let f = if *keep { scale } else { 0.0 };
                for v in &mut values.data_mut()[r * cols..(r + 1) * cols] {
                    *v *= f;
                }
            }
            WeightSample {
                values,
                provenance: Provenance {
                    kind: PosteriorKind::McDropout { p },
                    eps: Vec::new(),
                    radius: None,
                    rejections: None,
                    mask: Some(mask),
                },
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(mu: Vec<f64>, sigma: Vec<f64>) -> MeanFieldLayer {
        MeanFieldLayer::from_sigma(Tensor::vector(mu), &Tensor::vector(sigma)).unwrap()
    }

    #[test]
    fn degenerate_sigma_returns_mean() {
        let mu = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let l = MeanFieldLayer::with_constant_rho(mu.clone(), -40.0).unwrap();
        let s = sample_gaussian(&l, &mut RngStream::new(1, 1));
        assert!(s.values.max_abs_diff(&mu) < 1e-15);
    }

    #[test]
    fn frozen_gaussian_noise() {
        let l = layer(vec![0.0, 0.0], vec![2.0, 3.0]);
        let noise = Noise {
            kind: PosteriorKind::Gaussian,
            scaled: vec![1.0, -1.0],
            eps: vec![1.0, -1.0],
            radius: None,
            rejections: None,
        };
        let s = sample_with_noise(&l, noise).unwrap();
        assert!(s.values.max_abs_diff(&Tensor::vector(vec![2.0, -3.0])) < 1e-12);
    }

    #[test]
    fn frozen_radial_noise() {
        let l = layer(vec![0.0, 0.0], vec![1.0, 1.0]);
        let s = sample_with_noise(&l, Noise::radial_from(vec![3.0, 4.0], 1.0)).unwrap();
        assert!(s.values.max_abs_diff(&Tensor::vector(vec![0.6, 0.8])) < 1e-12);
    }

    #[test]
    fn gaussian_norm_tracks_sqrt_d() {
        let d = 100_000;
        let l = layer(vec![0.0; d], vec![1.0; d]);
        let s = sample_gaussian(&l, &mut RngStream::new(5, 0));
        let ratio = s.values.l2_norm() / (d as f64).sqrt();
        assert!(ratio > 0.99 && ratio < 1.01, "{ratio}");
    }

    #[test]
    fn truncation_bound_holds() {
        let l = layer(vec![0.0; 500], vec![1.0; 500]);
        let s = sample_truncated(&l, &mut RngStream::new(2, 2), 0.1).unwrap();
        assert!(s.values.data().iter().all(|v| v.abs() <= 0.1));
        assert!(s.provenance.rejections.unwrap() > 0);
    }

    #[test]
    fn truncated_variance_at_one() {
        let l = layer(vec![0.0; 200_000], vec![1.0; 200_000]);
        let s = sample_truncated(&l, &mut RngStream::new(3, 3), 1.0).unwrap();
        let n = s.values.len() as f64;
        let m = s.values.sum() / n;
        let v = s.values.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((truncated_normal_variance(1.0) - 0.2912).abs() < 1e-3);
        assert!((v - 0.2912).abs() < 0.01, "{v}");
    }

    #[test]
    fn invalid_kinds_are_rejected() {
        assert!(PosteriorKind::TruncatedGaussian { c: 0.0 }
            .validate()
            .is_err());
        assert!(PosteriorKind::McDropout { p: 1.0 }.validate().is_err());
    }

    #[test]
    fn dropout_near_zero_rate_keeps_everything() {
        let base = Tensor::filled(&[4, 3], 1.0);
        let s = sample_mc_dropout(&base, &mut RngStream::new(0, 0), 1e-9, 10).unwrap();
        assert!(s
            .iter()
            .all(|w| w.provenance.mask.as_ref().unwrap().iter().all(|k| *k)));
    }

    #[test]
    fn dropout_masks_are_reproducible() {
        let base = Tensor::filled(&[8, 3], 1.0);
        let a = sample_mc_dropout(&base, &mut RngStream::new(4, 1), 0.5, 5).unwrap();
        let b = sample_mc_dropout(&base, &mut RngStream::new(4, 1), 0.5, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inverted_dropout_preserves_mean() {
        let base = Tensor::filled(&[16, 4], 1.0);
        let s = sample_mc_dropout(&base, &mut RngStream::new(8, 0), 0.5, 1000).unwrap();
        let total: f64 = s.iter().map(|w| w.values.sum()).sum();
        let mean = total / (1000.0 * 64.0);
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
    }
}
