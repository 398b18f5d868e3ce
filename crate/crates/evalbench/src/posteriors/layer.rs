use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numcore::{inv_softplus, softplus, Tensor};

/// Variational parameters of one affine layer: a mean and a softplus-encoded
/// standard deviation per weight, biases included.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldLayer {
    mu: Tensor,
    rho: Tensor,
}

impl MeanFieldLayer {
    pub fn new(mu: Tensor, rho: Tensor) -> Result<Self> {
        if mu.shape() != rho.shape() {
            return Err(Error::Dimension {
                context: "MeanFieldLayer",
                expected: mu.shape().to_vec(),
                actual: rho.shape().to_vec(),
            });
        }
        if !mu.is_all_finite() || !rho.is_all_finite() {
            return Err(Error::NonFinite("MeanFieldLayer parameters".into()));
        }
        let layer = Self { mu, rho };
        if layer.sigma().data().iter().any(|&s| s <= 0.0) {
            return Err(invalid("rho so negative that sigma underflows to zero"));
        }
        Ok(layer)
    }

    /// Builds the layer from standard deviations instead of `rho`.
    pub fn from_sigma(mu: Tensor, sigma: &Tensor) -> Result<Self> {
        if sigma.data().iter().any(|&s| s <= 0.0) {
            return Err(invalid("sigma must be positive"));
        }
        let rho = sigma.map(inv_softplus);
        Self::new(mu, rho)
    }

    /// Same `rho` everywhere.
    pub fn with_constant_rho(mu: Tensor, rho: f64) -> Result<Self> {
        let r = Tensor::filled(mu.shape(), rho);
        Self::new(mu, r)
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn rho(&self) -> &Tensor {
        &self.rho
    }

    pub fn mu_mut(&mut self) -> &mut Tensor {
        &mut self.mu
    }

    pub fn rho_mut(&mut self) -> &mut Tensor {
        &mut self.rho
    }

    /// `σ = log(1 + e^ρ)`, elementwise.
    pub fn sigma(&self) -> Tensor {
        self.rho.map(softplus)
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    /// Number of scalar weights `D`.
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Family of the approximate posterior over each layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PosteriorKind {
    Gaussian,
    Radial,
    /// Gaussian noise rejected per coordinate to `|ε_i| ≤ c`.
    TruncatedGaussian {
        c: f64,
    },
    /// Deterministic weights with Bernoulli row masks of drop rate `p`.
    McDropout {
        p: f64,
    },
}

impl PosteriorKind {
    pub fn validate(self) -> Result<Self> {
        match self {
            PosteriorKind::TruncatedGaussian { c } if !(c > 0.0) => Err(invalid(format!(
                "truncation threshold must be positive, got {c}"
            ))),
            PosteriorKind::McDropout { p } if !(p > 0.0 && p < 1.0) => {
                Err(invalid(format!("dropout rate must lie in (0, 1), got {p}")))
            }
            k => Ok(k),
        }
    }

    pub fn is_variational(self) -> bool {
        !matches!(self, PosteriorKind::McDropout { .. })
    }

    pub fn tag(self) -> &'static str {
        match self {
            PosteriorKind::Gaussian => "gaussian",
            PosteriorKind::Radial => "radial",
            PosteriorKind::TruncatedGaussian { .. } => "truncated-gaussian",
            PosteriorKind::McDropout { .. } => "mc-dropout",
        }
    }
}

/// How a [`WeightSample`] was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub kind: PosteriorKind,
    /// Raw standard-normal draw (`ε`). Empty for dropout samples.
    pub eps: Vec<f64>,
    /// Radius `r ≥ 0` for radial samples.
    pub radius: Option<f64>,
    /// Rejected draws for truncated samples.
    pub rejections: Option<usize>,
    /// Row keep-mask for dropout samples.
    pub mask: Option<Vec<bool>>,
}

/// One draw of a layer's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSample {
    pub values: Tensor,
    pub provenance: Provenance,
}
