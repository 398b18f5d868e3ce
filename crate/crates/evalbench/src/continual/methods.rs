use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::stream::TaskStream;
use crate::bnn::{
    accuracy, elbo_gradients, predict_mean, train, BayesianMlp, ElboSpec, Head, Prior, PriorFamily,
    SampleNoise, TrainConfig, TrainOptions,
};
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::numcore::{Activation, GradTape, RngStream, Tensor, Var};
use crate::posteriors::PosteriorKind;
use crate::stats;

/// How predictions are restricted to a task's classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// All classes compete at train and test time.
    SingleHead,
    /// The softmax is restricted to the task's classes at train and test time.
    MultiHead,
    /// Trained single-head, restricted only at test time.
    TestTimeKnowledge,
}

impl Protocol {
    pub fn train_allowed(self, classes: &[usize]) -> Option<&[usize]> {
        match self {
            Protocol::MultiHead => Some(classes),
            _ => None,
        }
    }

    pub fn test_allowed(self, classes: &[usize]) -> Option<&[usize]> {
        match self {
            Protocol::SingleHead => None,
            _ => Some(classes),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorSource {
    /// The prior the run started from.
    Initial,
    /// The frozen posterior after the previous task.
    Previous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Method {
    Vcl,
    VclCoreset,
    /// Initial prior for every task; only coreset fine-tuning carries memory.
    CoresetOnly,
    Ewc {
        lambda: f64,
    },
}

impl Method {
    pub fn uses_coreset(self) -> bool {
        matches!(self, Method::VclCoreset | Method::CoresetOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Vcl => "vcl",
            Method::VclCoreset => "vcl-coreset",
            Method::CoresetOnly => "coreset-only",
            Method::Ewc { .. } => "ewc",
        }
    }
}

/// Fresh-model recipe shared by all methods.
/// Initial `rho` for continual runs. Tighter starts let the KL term freeze the
/// first task and block later ones.
pub const CONTINUAL_RHO_INIT: f64 = -3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinualConfig {
    pub hidden: Vec<usize>,
    pub posterior: PosteriorKind,
    pub activation: Activation,
    pub rho_init: f64,
    pub prior_sigma: f64,
    pub train: TrainConfig,
    pub coreset_size: usize,
    pub finetune_epochs: usize,
    pub eval_samples: usize,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            posterior: PosteriorKind::Gaussian,
            activation: Activation::Relu,
            rho_init: CONTINUAL_RHO_INIT,
            prior_sigma: 1.0,
            train: TrainConfig {
                epochs: 100,
                batch_size: 64,
                learning_rate: 1e-2,
                patience: None,
                ..TrainConfig::default()
            },
            coreset_size: 40,
            finetune_epochs: 20,
            eval_samples: 16,
        }
    }
}

impl ContinualConfig {
    pub fn init_model(
        &self,
        d_in: usize,
        n_classes: usize,
        rng: &mut RngStream,
    ) -> Result<BayesianMlp> {
        let mut widths = vec![d_in];
        widths.extend(&self.hidden);
        widths.push(n_classes);
        BayesianMlp::init(
            &widths,
            self.posterior,
            self.activation,
            Head::Softmax,
            self.rho_init,
            rng,
        )
    }

    pub fn initial_prior(&self, model: &BayesianMlp) -> Result<Prior> {
        Prior::isotropic(model, self.prior_sigma, PriorFamily::Gaussian)
    }
}

/// Trains the posterior on one task, warm-started from `model`, with the KL
/// taken against `initial` or against the frozen current posterior.
pub fn vcl_step(
    model: BayesianMlp,
    task: &Dataset,
    initial: &Prior,
    source: PriorSource,
    cfg: &TrainConfig,
    allowed: Option<&[usize]>,
) -> Result<BayesianMlp> {
    if !matches!(
        model.kind(),
        PosteriorKind::Gaussian | PosteriorKind::Radial
    ) {
        return Err(invalid(
            "sequential inference needs a gaussian or radial posterior",
        ));
    }
    let prior = match source {
        PriorSource::Initial => initial.clone(),
        PriorSource::Previous => Prior::from_posterior(&model),
    };
    let opts = TrainOptions {
        allowed,
        ..TrainOptions::default()
    };
    Ok(train(model, task, &prior, cfg, &opts)?.model)
}

/// Greedy farthest-point selection starting from `first`.
pub fn kcenter_from(features: &Tensor, k: usize, first: usize) -> Result<Vec<usize>> {
    let n = features.rows();
    if k > n {
        return Err(invalid(format!("coreset of {k} from {n} points")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if first >= n {
        return Err(invalid(format!("first centre {first} out of range")));
    }
    let dist = |a: usize, b: usize| -> f64 {
        features
            .row(a)
            .iter()
            .zip(features.row(b))
            .map(|(x, y)| (x - y).powi(2))
            .sum()
    };
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = (0..n).map(|i| dist(i, first)).collect();
    while chosen.len() < k {
        let mut best = 0;
        for i in 1..n {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist(i, best));
        }
    }
    Ok(chosen)
}

/// [`kcenter_from`] with a random first centre.
pub fn kcenter_coreset(features: &Tensor, k: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if features.rows() == 0 {
        return kcenter_from(features, k, 0);
    }
    kcenter_from(features, k, rng.below(features.rows()))
}

/// Largest distance from any point to its nearest centre.
pub fn covering_radius(features: &Tensor, centres: &[usize]) -> f64 {
    (0..features.rows())
        .map(|i| {
            centres
                .iter()
                .map(|&c| {
                    features
                        .row(i)
                        .iter()
                        .zip(features.row(c))
                        .map(|(x, y)| (x - y).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .fold(0.0, f64::max)
}

/// Fine-tunes a copy of `model` on the union of `coresets`, with the KL taken
/// against `model` itself. `model` is not modified.
pub fn coreset_finetune(
    model: &BayesianMlp,
    coresets: &[Dataset],
    cfg: &TrainConfig,
    allowed: Option<&[usize]>,
) -> Result<BayesianMlp> {
    let parts: Vec<&Dataset> = coresets.iter().filter(|c| !c.is_empty()).collect();
    if parts.is_empty() || cfg.epochs == 0 {
        return Ok(model.clone());
    }
    let union = Dataset::concat(&parts)?;
    let prior = Prior::from_posterior(model);
    let opts = TrainOptions {
        allowed,
        ..TrainOptions::default()
    };
    Ok(train(model.clone(), &union, &prior, cfg, &opts)?.model)
}

/// Diagonal Fisher and anchor means of each finished task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FisherState {
    pub tasks: Vec<(Vec<Tensor>, Vec<Tensor>)>,
}

impl FisherState {
    /// `(λ/2) Σ_tasks Σ_i F_i (μ_i − μ*_i)²` on the tape.
    pub fn penalty(&self, lambda: f64, tape: &mut GradTape, params: &[(Var, Var)]) -> Result<Var> {
        let mut total = tape.leaf(Tensor::scalar(0.0));
        for (fisher, anchor) in &self.tasks {
            for ((f, a), &(mu, _)) in fisher.iter().zip(anchor).zip(params) {
                let a = tape.leaf(a.clone());
                let d = tape.sub(mu, a)?;
                let sq = tape.square(d);
                let w = tape.mul_const(sq, f)?;
                let s = tape.sum(w);
                total = tape.add(total, s)?;
            }
        }
        Ok(tape.scale(total, 0.5 * lambda))
    }
}

/// Mean squared per-example gradient of the log-likelihood with respect to
/// the weight means, evaluated at the means.
pub fn fisher_diag(
    model: &BayesianMlp,
    data: &Dataset,
    allowed: Option<&[usize]>,
) -> Result<Vec<Tensor>> {
    if data.is_empty() {
        return Err(invalid("fisher needs data"));
    }
    let prior = Prior::unit(model)?;
    let spec = ElboSpec {
        samples: 1,
        kl_scale: 0.0,
        n_total: Some(1),
        weights: None,
        allowed,
    };
    let mut acc: Vec<Tensor> = model
        .layers()
        .iter()
        .map(|l| Tensor::zeros(l.shape()))
        .collect();
    for i in 0..data.len() {
        let (_, grads) = elbo_gradients(
            model,
            &data.subset(&[i]),
            &prior,
            &spec,
            &[SampleNoise::Mean],
        )?;
        for (a, g) in acc.iter_mut().zip(&grads) {
            for (s, v) in a.data_mut().iter_mut().zip(g.mu.data()) {
                *s += v * v;
            }
        }
    }
    let n = data.len() as f64;
    Ok(acc.into_iter().map(|a| a.map(|v| v / n)).collect())
}

/// Trains the means only (zero noise, no KL) on the NLL plus the quadratic
/// penalty from earlier tasks, then appends this task's Fisher and anchor.
pub fn ewc_step(
    model: BayesianMlp,
    task: &Dataset,
    state: FisherState,
    lambda: f64,
    cfg: &TrainConfig,
    allowed: Option<&[usize]>,
) -> Result<(BayesianMlp, FisherState)> {
    if !(lambda >= 0.0) {
        return Err(invalid("lambda must be non-negative"));
    }
    let prior = Prior::unit(&model)?;
    let cfg = TrainConfig {
        mean_pretrain_epochs: cfg.epochs,
        ..cfg.clone()
    };
    let pen = |tape: &mut GradTape, params: &[(Var, Var)]| state.penalty(lambda, tape, params);
    let opts = TrainOptions {
        allowed,
        penalty: if state.tasks.is_empty() {
            None
        } else {
            Some(&pen)
        },
        ..TrainOptions::default()
    };
    let model = train(model, task, &prior, &cfg, &opts)?.model;
    let fisher = fisher_diag(&model, task, allowed)?;
    let mut state = state;
    state.tasks.push((fisher, model.mean_weights()));
    Ok((model, state))
}

/// Accuracies after training through task `t`, one per task `j ≤ t`.
pub fn evaluate_row(
    model: &BayesianMlp,
    stream: &TaskStream,
    t: usize,
    protocol: Protocol,
    samples: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    stream.tasks[..=t]
        .iter()
        .map(|task| {
            let probs = predict_mean(model, task.test.x(), samples, rng)?;
            let labels = task
                .test
                .labels()
                .ok_or_else(|| invalid("task without labels"))?;
            Ok(accuracy(
                &probs,
                labels,
                protocol.test_allowed(&task.classes),
            ))
        })
        .collect()
}

/// Lower-triangular accuracies: row `t` holds tasks `0..=t` after training on `t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn average(&self, t: usize) -> f64 {
        stats::mean(&self.rows[t])
    }

    pub fn final_average(&self) -> f64 {
        self.average(self.rows.len() - 1)
    }
}

/// Average accuracy after `t` tasks (1-based) when only the latest task is
/// remembered and it is solved perfectly.
pub fn forgetting_pattern(t: usize) -> f64 {
    1.0 / t as f64
}

/// Runs `method` through every task of `stream` and records the accuracy matrix.
pub fn run_continual(
    stream: &TaskStream,
    method: Method,
    protocol: Protocol,
    cfg: &ContinualConfig,
    seed: u64,
) -> Result<AccuracyMatrix> {
    let root = RngStream::new(seed, 0);
    let first = stream
        .tasks
        .first()
        .ok_or_else(|| invalid("empty stream"))?;
    let mut model = cfg.init_model(first.train.dim(), stream.n_classes, &mut root.derive(1))?;
    let initial = cfg.initial_prior(&model)?;
    let mut fisher = FisherState::default();
    let mut coresets: Vec<Dataset> = Vec::new();
    let mut matrix = AccuracyMatrix::default();
    let mut core_rng = root.derive(2);
    let mut eval_rng = root.derive(3);
    for (t, task) in stream.tasks.iter().enumerate() {
        let tcfg = TrainConfig {
            seed: root.derive(100 + t as u64).next_u64(),
            ..cfg.train.clone()
        };
        let allowed = protocol.train_allowed(&task.classes);
        model = match method {
            Method::Vcl | Method::VclCoreset => {
                let source = if t == 0 {
                    PriorSource::Initial
                } else {
                    PriorSource::Previous
                };
                vcl_step(model, &task.train, &initial, source, &tcfg, allowed)?
            }
            Method::CoresetOnly => vcl_step(
                model,
                &task.train,
                &initial,
                PriorSource::Initial,
                &tcfg,
                allowed,
            )?,
            Method::Ewc { lambda } => {
                let (m, f) = ewc_step(
                    model,
                    &task.train,
                    std::mem::take(&mut fisher),
                    lambda,
                    &tcfg,
                    allowed,
                )?;
                fisher = f;
                m
            }
        };
        let eval_model = if method.uses_coreset() {
            let k = cfg.coreset_size.min(task.train.len());
            let idx = kcenter_coreset(task.train.x(), k, &mut core_rng)?;
            coresets.push(task.train.subset(&idx));
            let ft = TrainConfig {
                epochs: cfg.finetune_epochs,
                seed: root.derive(200 + t as u64).next_u64(),
                ..cfg.train.clone()
            };
            coreset_finetune(&model, &coresets, &ft, None)?
        } else {
            model.clone()
        };
        matrix.rows.push(evaluate_row(
            &eval_model,
            stream,
            t,
            protocol,
            cfg.eval_samples,
            &mut eval_rng,
        )?);
    }
    Ok(matrix)
}

/// Exact Bayesian linear regression with known noise, updated task by task.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugateLinear {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub noise_var: f64,
}

impl ConjugateLinear {
    pub fn new(prior_mean: DVector<f64>, prior_cov: DMatrix<f64>, noise_var: f64) -> Self {
        Self {
            mean: prior_mean,
            cov: prior_cov,
            noise_var,
        }
    }

    /// Posterior after observing `y = X w + ε`; the old posterior is the prior.
    pub fn update(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        let prec = self
            .cov
            .clone()
            .try_inverse()
            .ok_or(crate::Error::NotPositiveDefinite)?;
        let post_prec = &prec + x.transpose() * x / self.noise_var;
        let cov = post_prec
            .try_inverse()
            .ok_or(crate::Error::NotPositiveDefinite)?;
        let mean = &cov * (prec * &self.mean + x.transpose() * y / self.noise_var);
        Ok(Self {
            mean,
            cov,
            noise_var: self.noise_var,
        })
    }
}
