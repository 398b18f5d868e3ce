use std::f64::consts::{E, PI};

use super::model::{BayesianMlp, Head, Prior, PriorFamily};
use crate::data::{Dataset, Targets};
use crate::error::{invalid, Error, Result};
use crate::numcore::{mlp_forward_tape, GradTape, RngStream, Tensor, Var};
use crate::posteriors::{radial_entropy_constant, truncated_normal_entropy, Noise, PosteriorKind};

/// The three parts of the negative ELBO, each already multiplied by the
/// scaling used in the loss (`N_total / |batch|` for the NLL).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ElboBreakdown {
    pub nll: f64,
    /// `E_q[−log p(w)]`.
    pub prior_ce: f64,
    /// `−E_q[log q(w)]`.
    pub entropy: f64,
    /// `nll + kl_scale · (prior_ce − entropy)`.
    pub loss: f64,
}

impl ElboBreakdown {
    pub fn kl(&self) -> f64 {
        self.prior_ce - self.entropy
    }
}

/// Knobs for one ELBO evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ElboSpec<'a> {
    /// Monte Carlo weight draws `S`.
    pub samples: usize,
    pub kl_scale: f64,
    /// Size of the full training set; defaults to the batch size.
    pub n_total: Option<usize>,
    /// Per-example weights for the NLL; all ones when absent.
    pub weights: Option<&'a [f64]>,
    /// Restrict the softmax to these classes (multi-head training).
    pub allowed: Option<&'a [usize]>,
}

impl Default for ElboSpec<'_> {
    fn default() -> Self {
        Self {
            samples: 1,
            kl_scale: 1.0,
            n_total: None,
            weights: None,
            allowed: None,
        }
    }
}

/// Randomness behind one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleNoise {
    /// Standardized weight noise, one entry per layer.
    Weights(Vec<Noise>),
    /// Dropout keep-masks for the output units of every hidden layer.
    Masks(Vec<Vec<bool>>),
    /// No noise: weights sit at their means.
    Mean,
}

/// Draws the noise for a single forward pass of `model`.
pub fn draw_noise(model: &BayesianMlp, rng: &mut RngStream) -> Result<SampleNoise> {
    match model.kind() {
        PosteriorKind::McDropout { p } => {
            let n = model.layers().len();
            Ok(SampleNoise::Masks(
                model.layers()[..n - 1]
                    .iter()
                    .map(|l| (0..l.shape()[0]).map(|_| !rng.bernoulli(p)).collect())
                    .collect(),
            ))
        }
        kind => Ok(SampleNoise::Weights(
            model
                .layers()
                .iter()
                .map(|l| Noise::draw(kind, rng, l.dim()))
                .collect::<Result<_>>()?,
        )),
    }
}

/// Vars of the recorded objective.
#[derive(Debug, Clone, Copy)]
pub struct ElboVars {
    pub nll: Var,
    pub prior_ce: Var,
    pub entropy: Var,
    pub loss: Var,
}

/// Per-layer gradients with respect to `(μ, ρ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub mu: Tensor,
    pub rho: Tensor,
}

/// Weight tensors on the tape for one forward pass.
fn materialize(
    tape: &mut GradTape,
    model: &BayesianMlp,
    params: &[(Var, Var)],
    noise: &SampleNoise,
) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(params.len());
    for (i, (l, &(mu, rho))) in model.layers().iter().zip(params).enumerate() {
        let w = match noise {
            SampleNoise::Weights(ns) => {
                let n = ns
                    .get(i)
                    .ok_or_else(|| invalid("noise for too few layers"))?;
                let sigma = tape.softplus(rho);
                let scaled = tape.mul_const(sigma, &n.as_tensor(l.shape()))?;
                tape.add(mu, scaled)?
            }
            SampleNoise::Masks(masks) => match (masks.get(i), model.kind()) {
                (Some(mask), PosteriorKind::McDropout { p }) => {
                    let cols = l.shape()[1];
                    let scale = 1.0 / (1.0 - p);
                    let m: Vec<f64> = mask
                        .iter()
                        .flat_map(|&keep| std::iter::repeat_n(if keep { scale } else { 0.0 }, cols))
                        .collect();
                    tape.mul_const(mu, &Tensor::from_parts(l.shape().to_vec(), m))?
                }
                _ => mu,
            },
            SampleNoise::Mean => mu,
        };
        out.push(w);
    }
    Ok(out)
}

/// Negative log-likelihood of `batch` under weights `ws`, as a weighted sum.
fn record_nll(
    tape: &mut GradTape,
    model: &BayesianMlp,
    ws: &[Var],
    x: Var,
    batch: &Dataset,
    weights: &[f64],
    allowed: Option<&[usize]>,
) -> Result<Var> {
    let out = mlp_forward_tape(tape, ws, model.activation(), x)?;
    match (model.head(), batch.targets()) {
        (Head::Softmax, Targets::Classes { labels, .. }) => {
            tape.softmax_cross_entropy(out, labels, weights, allowed)
        }
        (Head::Gaussian { sigma_obs }, Targets::Regression(y)) => {
            tape.gaussian_nll(out, y, weights, sigma_obs)
        }
        _ => Err(invalid("head does not match the target type")),
    }
}

/// Records the negative ELBO for parameters already on the tape.
///
/// `params[l]` holds the `(μ, ρ)` vars of layer `l`; `noise` has one entry
/// per Monte Carlo sample.
pub fn record_elbo(
    tape: &mut GradTape,
    params: &[(Var, Var)],
    model: &BayesianMlp,
    batch: &Dataset,
    prior: &Prior,
    spec: &ElboSpec,
    noise: &[SampleNoise],
) -> Result<ElboVars> {
    prior.check(model)?;
    if params.len() != model.layers().len() {
        return Err(invalid("one (mu, rho) pair per layer is required"));
    }
    if noise.is_empty() {
        return Err(invalid("need at least one Monte Carlo sample"));
    }
    let b = batch.len();
    if b == 0 {
        return Err(invalid("empty batch"));
    }
    let ones;
    let weights = match spec.weights {
        Some(w) if w.len() != b => {
            return Err(Error::Dimension {
                context: "elbo weights",
                expected: vec![b],
                actual: vec![w.len()],
            })
        }
        Some(w) => w,
        None => {
            ones = vec![1.0; b];
            &ones
        }
    };
    let n_total = spec.n_total.unwrap_or(b) as f64;
    let s = noise.len() as f64;
    let x = tape.leaf(batch.x().clone());

    let mut nll_sum: Option<Var> = None;
    let mut radial_sum: Option<Var> = None;
    for ns in noise {
        let ws = materialize(tape, model, params, ns)?;
        let term = record_nll(tape, model, &ws, x, batch, weights, spec.allowed)?;
        nll_sum = Some(match nll_sum {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
        if prior.family == PriorFamily::Radial {
            for (w, p) in ws.iter().zip(&prior.layers) {
                let centred = tape.leaf(p.mu().clone());
                let diff = tape.sub(*w, centred)?;
                let z = tape.mul_const(diff, &p.sigma().map(|v| 1.0 / v))?;
                let lp = tape.radial_log_prior(z);
                radial_sum = Some(match radial_sum {
                    Some(acc) => tape.add(acc, lp)?,
                    None => lp,
                });
            }
        }
    }
    let nll = tape.scale(
        nll_sum.expect("at least one sample"),
        n_total / (b as f64 * s),
    );

    let prior_ce = match prior.family {
        PriorFamily::Radial => tape.scale(radial_sum.expect("radial prior term"), -1.0 / s),
        PriorFamily::Gaussian => gaussian_prior_ce(tape, model, params, prior)?,
    };
    let entropy = record_entropy(tape, model, params)?;

    let kl = tape.sub(prior_ce, entropy)?;
    let kl = tape.scale(kl, spec.kl_scale);
    let loss = tape.add(nll, kl)?;
    for (name, v) in [
        ("nll", nll),
        ("prior cross-entropy", prior_ce),
        ("entropy", entropy),
        ("loss", loss),
    ] {
        if !tape.scalar_value(v).is_finite() {
            return Err(Error::NonFinite(format!("elbo {name} term")));
        }
    }
    Ok(ElboVars {
        nll,
        prior_ce,
        entropy,
        loss,
    })
}

/// `Σ ½ log 2πσp² + (m₂ σq² + (μq − μp)²) / 2σp²`, with `m₂ = E[noise²]`.
fn gaussian_prior_ce(
    tape: &mut GradTape,
    model: &BayesianMlp,
    params: &[(Var, Var)],
    prior: &Prior,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for ((l, &(mu, rho)), p) in model.layers().iter().zip(params).zip(&prior.layers) {
        let sp = p.sigma();
        let constant: f64 = sp
            .data()
            .iter()
            .map(|s| 0.5 * (2.0 * PI * s * s).ln())
            .sum();
        let inv2 = sp.map(|s| 0.5 / (s * s));
        let pm = tape.leaf(p.mu().clone());
        let diff = tape.sub(mu, pm)?;
        let sq = tape.square(diff);
        let mut quad = tape.mul_const(sq, &inv2)?;
        let m2 = Noise::second_moment(model.kind(), l.dim());
        if m2 > 0.0 {
            let sig = tape.softplus(rho);
            let sig2 = tape.square(sig);
            let spread = tape.mul_const(sig2, &inv2.map(|v| v * m2))?;
            quad = tape.add(quad, spread)?;
        }
        let layer_sum = tape.sum(quad);
        let layer_total = tape.add_scalar(layer_sum, constant);
        total = Some(match total {
            Some(acc) => tape.add(acc, layer_total)?,
            None => layer_total,
        });
    }
    Ok(total.expect("at least one layer"))
}

fn record_entropy(tape: &mut GradTape, model: &BayesianMlp, params: &[(Var, Var)]) -> Result<Var> {
    let kind = model.kind();
    if !kind.is_variational() {
        return Ok(tape.leaf(Tensor::scalar(0.0)));
    }
    let mut total: Option<Var> = None;
    for (l, &(_, rho)) in model.layers().iter().zip(params) {
        let d = l.dim() as f64;
        let constant = match kind {
            PosteriorKind::Gaussian => 0.5 * d * (2.0 * PI * E).ln(),
            PosteriorKind::Radial => radial_entropy_constant(),
            PosteriorKind::TruncatedGaussian { c } => d * truncated_normal_entropy(c),
            PosteriorKind::McDropout { .. } => unreachable!("handled above"),
        };
        let sig = tape.softplus(rho);
        let logs = tape.log(sig);
        let s = tape.sum(logs);
        let h = tape.add_scalar(s, constant);
        total = Some(match total {
            Some(acc) => tape.add(acc, h)?,
            None => h,
        });
    }
    Ok(total.expect("at least one layer"))
}

fn push_params(tape: &mut GradTape, model: &BayesianMlp) -> Vec<(Var, Var)> {
    model
        .layers()
        .iter()
        .map(|l| (tape.leaf(l.mu().clone()), tape.leaf(l.rho().clone())))
        .collect()
}

fn breakdown(tape: &GradTape, v: &ElboVars) -> ElboBreakdown {
    ElboBreakdown {
        nll: tape.scalar_value(v.nll),
        prior_ce: tape.scalar_value(v.prior_ce),
        entropy: tape.scalar_value(v.entropy),
        loss: tape.scalar_value(v.loss),
    }
}

/// Negative ELBO of `model` on `batch` with `spec.samples` fresh draws.
pub fn elbo(
    model: &BayesianMlp,
    batch: &Dataset,
    prior: &Prior,
    spec: &ElboSpec,
    rng: &mut RngStream,
) -> Result<(f64, ElboBreakdown)> {
    if spec.samples == 0 {
        return Err(invalid("need at least one Monte Carlo sample"));
    }
    let noise = (0..spec.samples)
        .map(|_| draw_noise(model, rng))
        .collect::<Result<Vec<_>>>()?;
    elbo_with_noise(model, batch, prior, spec, &noise)
}

/// As [`elbo`] with the noise fixed by the caller.
pub fn elbo_with_noise(
    model: &BayesianMlp,
    batch: &Dataset,
    prior: &Prior,
    spec: &ElboSpec,
    noise: &[SampleNoise],
) -> Result<(f64, ElboBreakdown)> {
    let mut tape = GradTape::new();
    let params = push_params(&mut tape, model);
    let vars = record_elbo(&mut tape, &params, model, batch, prior, spec, noise)?;
    let b = breakdown(&tape, &vars);
    Ok((b.loss, b))
}

/// Loss value and gradient of the negative ELBO under fixed noise.
pub fn elbo_gradients(
    model: &BayesianMlp,
    batch: &Dataset,
    prior: &Prior,
    spec: &ElboSpec,
    noise: &[SampleNoise],
) -> Result<(ElboBreakdown, Vec<LayerGrad>)> {
    let mut tape = GradTape::new();
    let params = push_params(&mut tape, model);
    let vars = record_elbo(&mut tape, &params, model, batch, prior, spec, noise)?;
    let grads = tape.backward(vars.loss)?;
    Ok((breakdown(&tape, &vars), collect(&grads, &params)))
}

fn collect(grads: &crate::numcore::Gradients, params: &[(Var, Var)]) -> Vec<LayerGrad> {
    params
        .iter()
        .map(|&(mu, rho)| LayerGrad {
            mu: grads.get(mu),
            rho: grads.get(rho),
        })
        .collect()
}

/// Gradients of each loss term separately (before `kl_scale`).
#[derive(Debug, Clone, PartialEq)]
pub struct TermGradients {
    pub breakdown: ElboBreakdown,
    pub nll: Vec<LayerGrad>,
    pub prior_ce: Vec<LayerGrad>,
    pub entropy: Vec<LayerGrad>,
}

pub fn term_gradients(
    model: &BayesianMlp,
    batch: &Dataset,
    prior: &Prior,
    spec: &ElboSpec,
    noise: &[SampleNoise],
) -> Result<TermGradients> {
    let mut tape = GradTape::new();
    let params = push_params(&mut tape, model);
    let vars = record_elbo(&mut tape, &params, model, batch, prior, spec, noise)?;
    Ok(TermGradients {
        breakdown: breakdown(&tape, &vars),
        nll: collect(&tape.backward(vars.nll)?, &params),
        prior_ce: collect(&tape.backward(vars.prior_ce)?, &params),
        entropy: collect(&tape.backward(vars.entropy)?, &params),
    })
}

/// Spread of single-sample gradient estimates of one loss term.
#[derive(Debug, Clone, PartialEq)]
pub struct TermStd {
    /// `sqrt(mean_i Var(g_i))` over the weight means of each layer.
    pub per_layer: Vec<f64>,
    /// Same quantity over all weight means.
    pub aggregate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradVarianceReport {
    pub nll: TermStd,
    pub prior_ce: TermStd,
    pub entropy: TermStd,
}

/// Draws `s_outer` independent single-sample gradient estimates on a fixed
/// batch and reports, per term, the standard deviation of the gradient with
/// respect to the weight means.
pub fn grad_variance_probe(
    model: &BayesianMlp,
    batch: &Dataset,
    prior: &Prior,
    s_outer: usize,
    rng: &mut RngStream,
) -> Result<GradVarianceReport> {
    if s_outer < 2 {
        return Err(invalid("need at least two probes"));
    }
    let spec = ElboSpec::default();
    let mut runs = Vec::with_capacity(s_outer);
    for _ in 0..s_outer {
        let noise = [draw_noise(model, rng)?];
        runs.push(term_gradients(model, batch, prior, &spec, &noise)?);
    }
    let pick = |f: fn(&TermGradients) -> &Vec<LayerGrad>| -> TermStd {
        let n_layers = model.layers().len();
        let mut per_layer = Vec::with_capacity(n_layers);
        let mut sum_var = 0.0;
        let mut count = 0usize;
        for l in 0..n_layers {
            let samples: Vec<&[f64]> = runs.iter().map(|r| f(r)[l].mu.data()).collect();
            let v = shifted_variances(&samples);
            per_layer.push((v.iter().sum::<f64>() / v.len() as f64).sqrt());
            sum_var += v.iter().sum::<f64>();
            count += v.len();
        }
        TermStd {
            per_layer,
            aggregate: (sum_var / count as f64).sqrt(),
        }
    };
    Ok(GradVarianceReport {
        nll: pick(|r| &r.nll),
        prior_ce: pick(|r| &r.prior_ce),
        entropy: pick(|r| &r.entropy),
    })
}

/// Per-coordinate sample variances computed relative to the first sample,
/// so identical samples give exactly zero.
fn shifted_variances(samples: &[&[f64]]) -> Vec<f64> {
    let n = samples.len() as f64;
    let base = samples[0];
    (0..base.len())
        .map(|i| {
            let (mut s, mut s2) = (0.0, 0.0);
            for x in samples {
                let d = x[i] - base[i];
                s += d;
                s2 += d * d;
            }
            ((s2 - s * s / n) / (n - 1.0)).max(0.0)
        })
        .collect()
}
