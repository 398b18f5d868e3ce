use super::elbo::{draw_noise, SampleNoise};
use super::model::{BayesianMlp, Head};
use crate::data::{Dataset, Targets};
use crate::error::{invalid, Result};
use crate::numcore::{mlp_forward, OutputHead, RngStream, Tensor};
use crate::posteriors::PosteriorKind;

/// Concrete weight matrices for one draw.
pub fn weights_for(model: &BayesianMlp, noise: &SampleNoise) -> Vec<Tensor> {
    model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| match noise {
            SampleNoise::Weights(ns) => {
                let sigma = l.sigma();
                let data = l
                    .mu()
                    .data()
                    .iter()
                    .zip(sigma.data())
                    .zip(&ns[i].scaled)
                    .map(|((m, s), e)| m + s * e)
                    .collect();
                Tensor::from_parts(l.shape().to_vec(), data)
            }
            SampleNoise::Masks(masks) => match (masks.get(i), model.kind()) {
                (Some(mask), PosteriorKind::McDropout { p }) => {
                    let cols = l.shape()[1];
                    let mut w = l.mu().clone();
                    for (r, keep) in mask.iter().enumerate() {
                        let f = if *keep { 1.0 / (1.0 - p) } else { 0.0 };
                        for v in &mut w.data_mut()[r * cols..(r + 1) * cols] {
                            *v *= f;
                        }
                    }
                    w
                }
                _ => l.mu().clone(),
            },
            SampleNoise::Mean => l.mu().clone(),
        })
        .collect()
}

/// Network output under fixed noise: probabilities `(n, C)` or means `(n, 1)`.
pub fn forward(model: &BayesianMlp, x: &Tensor, noise: &SampleNoise) -> Result<Tensor> {
    let head = match model.head() {
        Head::Softmax => OutputHead::Softmax,
        Head::Gaussian { .. } => OutputHead::Linear,
    };
    let mut outs = mlp_forward(&weights_for(model, noise), model.activation(), head, x)?;
    Ok(outs.pop().expect("at least one layer"))
}

/// `S` outputs, each from one full weight draw (one mask set for dropout).
pub fn predict_samples(
    model: &BayesianMlp,
    x: &Tensor,
    samples: usize,
    rng: &mut RngStream,
) -> Result<Vec<Tensor>> {
    if samples == 0 {
        return Err(invalid("need at least one sample"));
    }
    (0..samples)
        .map(|_| {
            let noise = draw_noise(model, rng)?;
            forward(model, x, &noise)
        })
        .collect()
}

/// Average of [`predict_samples`].
pub fn predict_mean(
    model: &BayesianMlp,
    x: &Tensor,
    samples: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    mean_of(&predict_samples(model, x, samples, rng)?)
}

pub fn mean_of(samples: &[Tensor]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| invalid("no samples"))?;
    let mut acc = vec![0.0; first.len()];
    for s in samples {
        for (a, v) in acc.iter_mut().zip(s.data()) {
            *a += v;
        }
    }
    let k = samples.len() as f64;
    Ok(Tensor::from_parts(
        first.shape().to_vec(),
        acc.into_iter().map(|v| v / k).collect(),
    ))
}

/// Renormalizes a probability row over `allowed`; other entries become 0.
pub fn restrict(probs: &[f64], allowed: &[usize]) -> Vec<f64> {
    let z: f64 = allowed.iter().map(|&k| probs[k]).sum();
    let mut out = vec![0.0; probs.len()];
    for &k in allowed {
        out[k] = if z > 0.0 {
            probs[k] / z
        } else {
            1.0 / allowed.len() as f64
        };
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax (optionally over `allowed`) equals the label.
pub fn accuracy(probs: &Tensor, labels: &[usize], allowed: Option<&[usize]>) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = probs.row(i);
            let pred = match allowed {
                Some(a) => argmax(&restrict(row, a)),
                None => argmax(row),
            };
            pred == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// `−Σ p log p` in nats, with `0 log 0 = 0`.
pub fn predictive_entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Mutual information between the prediction and the weights, estimated
/// from `S` probability vectors for one input; clipped at 0.
pub fn bald_mi(samples: &[Vec<f64>]) -> f64 {
    let s = samples.len() as f64;
    let c = samples[0].len();
    let mean: Vec<f64> = (0..c)
        .map(|k| samples.iter().map(|p| p[k]).sum::<f64>() / s)
        .collect();
    let expected: f64 = samples.iter().map(|p| predictive_entropy(p)).sum::<f64>() / s;
    (predictive_entropy(&mean) - expected).max(0.0)
}

/// Per-row BALD scores from sampled `(n, C)` probability tensors.
pub fn bald_scores(samples: &[Tensor]) -> Vec<f64> {
    let n = samples[0].rows();
    (0..n)
        .map(|i| {
            let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.row(i).to_vec()).collect();
            bald_mi(&rows)
        })
        .collect()
}

/// Per-row entropy of the sample-mean prediction.
pub fn entropy_scores(mean_probs: &Tensor) -> Vec<f64> {
    (0..mean_probs.rows())
        .map(|i| predictive_entropy(mean_probs.row(i)))
        .collect()
}

/// Expected calibration error with `n_bins` equal-width confidence bins
/// over the max-probability predictions.
pub fn ece(mean_probs: &Tensor, labels: &[usize], n_bins: usize) -> Result<f64> {
    if n_bins == 0 {
        return Err(invalid("need at least one bin"));
    }
    let mut conf = vec![0.0; n_bins];
    let mut hits = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for (i, &y) in labels.iter().enumerate() {
        let row = mean_probs.row(i);
        let k = argmax(row);
        let c = row[k];
        let b = ((c * n_bins as f64).ceil() as usize).clamp(1, n_bins) - 1;
        conf[b] += c;
        hits[b] += f64::from(k == y);
        count[b] += 1;
    }
    let n = labels.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (hits[b] - conf[b]).abs() / n)
        .sum())
}

/// Accuracy on the `(1 − f)` share of examples with the lowest uncertainty,
/// for each referral fraction `f`. Ties keep index order.
pub fn referral_curve(uncertainty: &[f64], correct: &[bool], fracs: &[f64]) -> Result<Vec<f64>> {
    if uncertainty.len() != correct.len() || correct.is_empty() {
        return Err(invalid(
            "scores and correctness must be non-empty and aligned",
        ));
    }
    if fracs.iter().any(|f| !(0.0..1.0).contains(f)) {
        return Err(invalid("referral fractions must lie in [0, 1)"));
    }
    let mut order: Vec<usize> = (0..correct.len()).collect();
    order.sort_by(|&a, &b| uncertainty[a].total_cmp(&uncertainty[b]));
    let n = correct.len() as f64;
    Ok(fracs
        .iter()
        .map(|f| {
            let keep = (((1.0 - f) * n).round() as usize).max(1);
            order[..keep].iter().filter(|&&i| correct[i]).count() as f64 / keep as f64
        })
        .collect())
}

/// Per-row negative log predictive density using `S` draws.
pub fn pointwise_nll(
    model: &BayesianMlp,
    data: &Dataset,
    samples: usize,
    allowed: Option<&[usize]>,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let outs = predict_samples(model, data.x(), samples, rng)?;
    match (model.head(), data.targets()) {
        (Head::Softmax, Targets::Classes { labels, .. }) => {
            let mean = mean_of(&outs)?;
            Ok(labels
                .iter()
                .enumerate()
                .map(|(i, &y)| {
                    let row = match allowed {
                        Some(a) => restrict(mean.row(i), a),
                        None => mean.row(i).to_vec(),
                    };
                    -row[y].max(1e-300).ln()
                })
                .collect())
        }
        (Head::Gaussian { sigma_obs }, Targets::Regression(y)) => {
            let s = outs.len() as f64;
            let two_var = 2.0 * sigma_obs * sigma_obs;
            let norm = 0.5 * (std::f64::consts::PI * two_var).ln();
            Ok(y.iter()
                .enumerate()
                .map(|(i, &t)| {
                    let logs: Vec<f64> = outs
                        .iter()
                        .map(|o| -(t - o.data()[i]).powi(2) / two_var)
                        .collect();
                    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
                    norm - (lse - s.ln())
                })
                .collect())
        }
        _ => Err(invalid("head does not match the target type")),
    }
}

/// Mean of [`pointwise_nll`].
pub fn predictive_nll(
    model: &BayesianMlp,
    data: &Dataset,
    samples: usize,
    allowed: Option<&[usize]>,
    rng: &mut RngStream,
) -> Result<f64> {
    let nll = pointwise_nll(model, data, samples, allowed, rng)?;
    Ok(nll.iter().sum::<f64>() / nll.len() as f64)
}

/// Mean squared error of the predictive mean on regression data.
pub fn predictive_mse(
    model: &BayesianMlp,
    data: &Dataset,
    samples: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let y = data
        .values()
        .ok_or_else(|| invalid("mse needs regression targets"))?;
    let mean = predict_mean(model, data.x(), samples, rng)?;
    Ok(y.iter()
        .zip(mean.data())
        .map(|(t, p)| (t - p).powi(2))
        .sum::<f64>()
        / y.len() as f64)
}

/// Naive ensemble: average of each member's predictive mean.
pub fn ensemble_predict(
    models: &[BayesianMlp],
    x: &Tensor,
    samples: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let means = models
        .iter()
        .map(|m| predict_mean(m, x, samples, rng))
        .collect::<Result<Vec<_>>>()?;
    mean_of(&means)
}
