use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numcore::{Activation, RngStream, Tensor};
use crate::posteriors::{MeanFieldLayer, PosteriorKind};

/// Default initial `ρ`, giving `σ = log(1 + e^{-6}) ≈ 0.0025`.
pub const DEFAULT_RHO_INIT: f64 = -6.0;

/// Default observation noise of the regression head.
pub const DEFAULT_SIGMA_OBS: f64 = 0.1;

/// Likelihood attached to the network output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "head", rename_all = "kebab-case")]
pub enum Head {
    /// Categorical over the output units.
    Softmax,
    /// `N(f(x), σ_obs²)` on a single output unit.
    Gaussian { sigma_obs: f64 },
}

/// Multilayer perceptron with a factorized distribution over every weight.
///
/// Layers are stored augmented, `(out, in + 1)` with the bias in the last
/// column. For MC dropout only the means are used and `ρ` is ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesianMlp {
    layers: Vec<MeanFieldLayer>,
    kind: PosteriorKind,
    activation: Activation,
    head: Head,
}

impl BayesianMlp {
    pub fn new(
        layers: Vec<MeanFieldLayer>,
        kind: PosteriorKind,
        activation: Activation,
        head: Head,
    ) -> Result<Self> {
        kind.validate()?;
        if layers.is_empty() {
            return Err(invalid("a network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.shape().len() != 2 || l.shape()[1] < 2 {
                return Err(invalid(format!(
                    "layer {i} is not an augmented matrix: {:?}",
                    l.shape()
                )));
            }
            if i > 0 && l.shape()[1] != layers[i - 1].shape()[0] + 1 {
                return Err(Error::Dimension {
                    context: "BayesianMlp layer chain",
                    expected: vec![l.shape()[0], layers[i - 1].shape()[0] + 1],
                    actual: l.shape().to_vec(),
                });
            }
        }
        if let Head::Gaussian { sigma_obs } = head {
            if !(sigma_obs > 0.0) {
                return Err(invalid("observation sigma must be positive"));
            }
            if layers.last().unwrap().shape()[0] != 1 {
                return Err(invalid("regression head needs a single output unit"));
            }
        }
        Ok(Self {
            layers,
            kind,
            activation,
            head,
        })
    }

    /// He-initialized means (`N(0, 2 / fan_in)`, zero biases) and constant `ρ`.
    pub fn init(
        widths: &[usize],
        kind: PosteriorKind,
        activation: Activation,
        head: Head,
        rho_init: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(invalid(format!("bad layer widths {widths:?}")));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = (2.0 / fan_in as f64).sqrt();
            let mut mu = Vec::with_capacity(fan_out * (fan_in + 1));
            for _ in 0..fan_out {
                for _ in 0..fan_in {
                    mu.push(scale * rng.normal());
                }
                mu.push(0.0);
            }
            let mu = Tensor::matrix(fan_out, fan_in + 1, mu)?;
            layers.push(MeanFieldLayer::with_constant_rho(mu, rho_init)?);
        }
        Self::new(layers, kind, activation, head)
    }

    pub fn layers(&self) -> &[MeanFieldLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [MeanFieldLayer] {
        &mut self.layers
    }

    pub fn kind(&self) -> PosteriorKind {
        self.kind
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].shape()[1] - 1
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().shape()[0]
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.dim()).sum()
    }

    /// Posterior means as plain weight matrices.
    pub fn mean_weights(&self) -> Vec<Tensor> {
        self.layers.iter().map(|l| l.mu().clone()).collect()
    }

    /// Sets every `ρ` to `rho`.
    pub fn set_rho(&mut self, rho: f64) {
        for l in &mut self.layers {
            for v in l.rho_mut().data_mut() {
                *v = rho;
            }
        }
    }
}

/// Family of a prior distribution over the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorFamily {
    /// Factorized Gaussian; cross-entropy is analytic.
    Gaussian,
    /// Radial distribution; cross-entropy is a Monte Carlo estimate through
    /// the hyperspherical change of variables.
    Radial,
}

/// Per-weight prior location and scale, layer by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    pub family: PriorFamily,
    pub layers: Vec<MeanFieldLayer>,
}

impl Prior {
    /// Zero-mean prior with the same `σ` for every weight, shaped like `model`.
    pub fn isotropic(model: &BayesianMlp, sigma: f64, family: PriorFamily) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(invalid("prior sigma must be positive"));
        }
        let layers = model
            .layers()
            .iter()
            .map(|l| {
                MeanFieldLayer::from_sigma(
                    Tensor::zeros(l.shape()),
                    &Tensor::filled(l.shape(), sigma),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { family, layers })
    }

    /// `N(0, 1)` on every weight.
    pub fn unit(model: &BayesianMlp) -> Result<Self> {
        Self::isotropic(model, 1.0, PriorFamily::Gaussian)
    }

    /// Frozen copy of the current posterior, used as the next prior.
    pub fn from_posterior(model: &BayesianMlp) -> Self {
        let family = match model.kind() {
            PosteriorKind::Radial => PriorFamily::Radial,
            _ => PriorFamily::Gaussian,
        };
        Self {
            family,
            layers: model.layers().to_vec(),
        }
    }

    pub(crate) fn check(&self, model: &BayesianMlp) -> Result<()> {
        if self.layers.len() != model.layers().len() {
            return Err(invalid(format!(
                "prior has {} layers, model has {}",
                self.layers.len(),
                model.layers().len()
            )));
        }
        for (p, q) in self.layers.iter().zip(model.layers()) {
            if p.shape() != q.shape() {
                return Err(Error::Dimension {
                    context: "prior layer",
                    expected: q.shape().to_vec(),
                    actual: p.shape().to_vec(),
                });
            }
        }
        if self.family == PriorFamily::Radial && model.kind() != PosteriorKind::Radial {
            return Err(invalid(format!(
                "radial prior needs a radial posterior, model is {}",
                model.kind().tag()
            )));
        }
        Ok(())
    }
}
