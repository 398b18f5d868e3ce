use serde::Serialize;

use crate::bnn::{
    draw_noise, mean_of, predict_samples, predictive_entropy, term_gradients, BayesianMlp,
    ElboSpec, Prior,
};
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::numcore::RngStream;
use crate::stats;

/// Final-layer gradient norms of the likelihood and KL terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientRatio {
    pub nll_norm: f64,
    pub prior_norm: f64,
    /// Spread of the NLL norm across probes.
    pub nll_norm_std: f64,
}

impl GradientRatio {
    pub fn ratio(&self) -> f64 {
        self.nll_norm / self.prior_norm
    }
}

/// Averages, over `probes` noise draws, the L2 norms of the final-layer
/// gradients (means and `ρ`) of the NLL and of `prior_ce − entropy`.
pub fn gradient_ratio_probe(
    model: &BayesianMlp,
    batch: &Dataset,
    prior: &Prior,
    probes: usize,
    rng: &mut RngStream,
) -> Result<GradientRatio> {
    if probes == 0 {
        return Err(invalid("need at least one probe"));
    }
    let last = model.layers().len() - 1;
    let spec = ElboSpec::default();
    let mut nll = Vec::with_capacity(probes);
    let mut kl = Vec::with_capacity(probes);
    for _ in 0..probes {
        let noise = [draw_noise(model, rng)?];
        let g = term_gradients(model, batch, prior, &spec, &noise)?;
        let norm = |parts: &[&[f64]]| {
            parts
                .iter()
                .flat_map(|p| p.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        };
        nll.push(norm(&[g.nll[last].mu.data(), g.nll[last].rho.data()]));
        let dmu: Vec<f64> = g.prior_ce[last]
            .mu
            .data()
            .iter()
            .zip(g.entropy[last].mu.data())
            .map(|(a, b)| a - b)
            .collect();
        let drho: Vec<f64> = g.prior_ce[last]
            .rho
            .data()
            .iter()
            .zip(g.entropy[last].rho.data())
            .map(|(a, b)| a - b)
            .collect();
        kl.push(norm(&[&dmu, &drho]));
    }
    Ok(GradientRatio {
        nll_norm: stats::mean(&nll),
        prior_norm: stats::mean(&kl),
        nll_norm_std: if probes > 1 {
            stats::std_dev(&nll)
        } else {
            0.0
        },
    })
}

/// Mean entropy of the `S`-sample averaged prediction over `data`.
pub fn boundary_entropy(
    model: &BayesianMlp,
    data: &Dataset,
    samples: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let mean = mean_of(&predict_samples(model, data.x(), samples, rng)?)?;
    let h: Vec<f64> = (0..mean.rows())
        .map(|i| predictive_entropy(mean.row(i)))
        .collect();
    Ok(stats::mean(&h))
}
