use serde::{Deserialize, Serialize};

use super::elbo::{
    draw_noise, grad_variance_probe, record_elbo, ElboBreakdown, ElboSpec, LayerGrad, SampleNoise,
};
use super::model::{BayesianMlp, Prior};
use super::predict::predictive_nll;
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::numcore::{GradTape, RngStream, Tensor, Var};

/// Optimisation and sampling settings for [`train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Monte Carlo draws per training step.
    pub samples_train: usize,
    /// Monte Carlo draws for validation and prediction.
    pub samples_test: usize,
    pub kl_scale: f64,
    /// Leading epochs that fit only the means, at zero noise and without the
    /// KL term.
    pub mean_pretrain_epochs: usize,
    /// Early-stopping patience on validation NLL; `None` disables it.
    pub patience: Option<usize>,
    pub seed: u64,
    /// Probes per epoch for the NLL-gradient spread; 0 disables probing.
    pub grad_probes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            samples_train: 1,
            samples_test: 8,
            kl_scale: 1.0,
            mean_pretrain_epochs: 0,
            patience: Some(20),
            seed: 0,
            grad_probes: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.samples_train == 0 || self.samples_test == 0 {
            return Err(invalid("batch size and sample counts must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if !(self.kl_scale >= 0.0 && self.kl_scale <= 1.0) {
            return Err(invalid(format!(
                "kl_scale must lie in [0, 1], got {}",
                self.kl_scale
            )));
        }
        if self.patience == Some(0) {
            return Err(invalid("patience must be positive"));
        }
        Ok(())
    }
}

/// Extra term added to the loss, recorded on the tape from the `(μ, ρ)` vars.
pub type Penalty<'a> = &'a dyn Fn(&mut GradTape, &[(Var, Var)]) -> Result<Var>;

/// Optional inputs to [`train`].
#[derive(Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    pub val: Option<&'a Dataset>,
    /// Per-row NLL weights aligned with the training set.
    pub weights: Option<&'a [f64]>,
    /// Restrict the softmax to these classes.
    pub allowed: Option<&'a [usize]>,
    pub penalty: Option<Penalty<'a>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch-averaged loss terms.
    pub breakdown: ElboBreakdown,
    pub val_nll: Option<f64>,
    pub nll_grad_std: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: BayesianMlp,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (the best validation epoch when
    /// early stopping is active).
    pub best_epoch: Option<usize>,
}

/// Adam state over the `(μ, ρ)` tensors of a network.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    lr: f64,
    t: i32,
    m: Vec<(Tensor, Tensor)>,
    v: Vec<(Tensor, Tensor)>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub(crate) fn new(model: &BayesianMlp, lr: f64) -> Self {
        let zeros: Vec<(Tensor, Tensor)> = model
            .layers()
            .iter()
            .map(|l| (Tensor::zeros(l.shape()), Tensor::zeros(l.shape())))
            .collect();
        Self {
            lr,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub(crate) fn step(&mut self, model: &mut BayesianMlp, grads: &[LayerGrad], update_rho: bool) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let lr = self.lr;
        let update = |p: &mut Tensor, g: &Tensor, m: &mut Tensor, v: &mut Tensor| {
            for (((p, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        };
        for (((layer, g), m), v) in model
            .layers_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            update(layer.mu_mut(), &g.mu, &mut m.0, &mut v.0);
            if update_rho {
                update(layer.rho_mut(), &g.rho, &mut m.1, &mut v.1);
            }
        }
    }
}

fn as_diverged(e: Error, epoch: usize, history: &[EpochRecord]) -> Error {
    match e {
        Error::NonFinite(term) => Error::Diverged {
            epoch,
            term,
            history: history.iter().map(|r| r.breakdown.loss).collect(),
        },
        other => other,
    }
}

/// Minibatch Adam on the negative ELBO.
///
/// The NLL is scaled by `N_total / |batch|`. With a validation set and a
/// patience, training stops once validation NLL has not improved for that
/// many epochs and the best parameters are returned. Deterministic given
/// `cfg.seed`.
pub fn train(
    model: BayesianMlp,
    data: &Dataset,
    prior: &Prior,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    prior.check(&model)?;
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if let Some(w) = opts.weights {
        if w.len() != data.len() {
            return Err(Error::Dimension {
                context: "train weights",
                expected: vec![data.len()],
                actual: vec![w.len()],
            });
        }
    }
    let mut model = model;
    let mut adam = Adam::new(&model, cfg.learning_rate);
    let root = RngStream::new(cfg.seed, 0);
    let mut shuffle_rng = root.derive(1);
    let mut noise_rng = root.derive(2);
    let val_rng = root.derive(3);
    let mut probe_rng = root.derive(4);
    let n = data.len();
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(f64, usize, BayesianMlp)> = None;

    for epoch in 0..cfg.epochs {
        let pretrain = epoch < cfg.mean_pretrain_epochs;
        let perm = shuffle_rng.permutation(n);
        let mut sum = ElboBreakdown::default();
        let mut batches = 0.0;
        for idx in perm.chunks(cfg.batch_size) {
            let batch = data.subset(idx);
            let w: Option<Vec<f64>> = opts.weights.map(|w| idx.iter().map(|&i| w[i]).collect());
            let spec = ElboSpec {
                samples: cfg.samples_train,
                kl_scale: if pretrain { 0.0 } else { cfg.kl_scale },
                n_total: Some(n),
                weights: w.as_deref(),
                allowed: opts.allowed,
            };
            let noise: Vec<SampleNoise> = if pretrain {
                vec![SampleNoise::Mean]
            } else {
                (0..cfg.samples_train)
                    .map(|_| draw_noise(&model, &mut noise_rng))
                    .collect::<Result<_>>()?
            };
            let (b, grads) = step_gradients(&model, &batch, prior, &spec, &noise, opts.penalty)
                .map_err(|e| as_diverged(e, epoch, &history))?;
            let update_rho = !pretrain && model.kind().is_variational();
            adam.step(&mut model, &grads, update_rho);
            sum.nll += b.nll;
            sum.prior_ce += b.prior_ce;
            sum.entropy += b.entropy;
            sum.loss += b.loss;
            batches += 1.0;
        }
        let breakdown = ElboBreakdown {
            nll: sum.nll / batches,
            prior_ce: sum.prior_ce / batches,
            entropy: sum.entropy / batches,
            loss: sum.loss / batches,
        };
        let val_nll = match opts.val {
            Some(v) if !v.is_empty() => {
                let mut r = val_rng.derive(epoch as u64);
                let samples = if pretrain { 1 } else { cfg.samples_test };
                Some(predictive_nll(&model, v, samples, opts.allowed, &mut r)?)
            }
            _ => None,
        };
        let nll_grad_std = if cfg.grad_probes >= 2 {
            let idx: Vec<usize> = (0..n.min(cfg.batch_size)).collect();
            let r = grad_variance_probe(
                &model,
                &data.subset(&idx),
                prior,
                cfg.grad_probes,
                &mut probe_rng,
            )?;
            Some(r.nll.aggregate)
        } else {
            None
        };
        history.push(EpochRecord {
            epoch,
            breakdown,
            val_nll,
            nll_grad_std,
        });

        if let (Some(v), Some(patience)) = (val_nll, cfg.patience) {
            if !v.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    term: "validation nll".into(),
                    history: history.iter().map(|r| r.breakdown.loss).collect(),
                });
            }
            let improved = best.as_ref().is_none_or(|(b, _, _)| v < *b);
            if improved {
                best = Some((v, epoch, model.clone()));
            } else if epoch - best.as_ref().unwrap().1 >= patience {
                break;
            }
        }
    }

    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, Some(e)),
        None => (model, history.last().map(|r| r.epoch)),
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

fn step_gradients(
    model: &BayesianMlp,
    batch: &Dataset,
    prior: &Prior,
    spec: &ElboSpec,
    noise: &[SampleNoise],
    penalty: Option<Penalty>,
) -> Result<(ElboBreakdown, Vec<LayerGrad>)> {
    let mut tape = GradTape::new();
    let params: Vec<(Var, Var)> = model
        .layers()
        .iter()
        .map(|l| (tape.leaf(l.mu().clone()), tape.leaf(l.rho().clone())))
        .collect();
    let vars = record_elbo(&mut tape, &params, model, batch, prior, spec, noise)?;
    let mut loss = vars.loss;
    let mut b = ElboBreakdown {
        nll: tape.scalar_value(vars.nll),
        prior_ce: tape.scalar_value(vars.prior_ce),
        entropy: tape.scalar_value(vars.entropy),
        loss: tape.scalar_value(vars.loss),
    };
    if let Some(pen) = penalty {
        let p = pen(&mut tape, &params)?;
        loss = tape.add(loss, p)?;
        b.loss = tape.scalar_value(loss);
        if !b.loss.is_finite() {
            return Err(Error::NonFinite("penalty term".into()));
        }
    }
    let g = tape.backward(loss)?;
    Ok((
        b,
        params
            .iter()
            .map(|&(mu, rho)| LayerGrad {
                mu: g.get(mu),
                rho: g.get(rho),
            })
            .collect(),
    ))
}
