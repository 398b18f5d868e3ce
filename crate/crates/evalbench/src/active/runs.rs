use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::estimators::{pool_risk, Estimator};
use super::proposal::{DistanceSums, Pool, ProposalKind, Trajectory, DEFAULT_TEMPERATURE};
use crate::bnn::{
    accuracy, bald_scores, mean_of, pointwise_nll, predict_mean, predict_samples, train,
    BayesianMlp, Head, Prior, PriorFamily, TrainConfig, TrainOptions,
};
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::numcore::{Activation, RngStream, Tensor};
use crate::posteriors::PosteriorKind;
use crate::stats;

/// A model family that can be fit with per-example weights and scored.
pub trait Learner: Sync {
    type Model: Send;

    fn fit(&self, data: &Dataset, weights: Option<&[f64]>, seed: u64) -> Result<Self::Model>;

    /// Per-example loss of a fitted model.
    fn losses(&self, model: &Self::Model, data: &Dataset, seed: u64) -> Result<Vec<f64>>;

    fn accuracy(&self, _model: &Self::Model, _data: &Dataset, _seed: u64) -> Result<Option<f64>> {
        Ok(None)
    }

    /// Acquisition scores, larger meaning more informative.
    fn scores(&self, model: &Self::Model, data: &Dataset, seed: u64) -> Result<Vec<f64>>;
}

/// Weighted least squares with an intercept, scored by squared error.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearLearner {
    /// Ridge penalty on the slope coefficients.
    pub ridge: f64,
}

/// Intercept first, then one slope per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub coef: Vec<f64>,
}

impl LinearModel {
    pub fn predict(&self, x: &Tensor) -> Vec<f64> {
        (0..x.rows())
            .map(|i| {
                self.coef[0]
                    + x.row(i)
                        .iter()
                        .zip(&self.coef[1..])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect()
    }
}

impl Learner for LinearLearner {
    type Model = LinearModel;

    fn fit(&self, data: &Dataset, weights: Option<&[f64]>, _seed: u64) -> Result<LinearModel> {
        let y = data
            .values()
            .ok_or_else(|| invalid("linear learner needs regression targets"))?;
        let d = data.dim() + 1;
        let mut xtx = DMatrix::<f64>::zeros(d, d);
        let mut xty = DVector::<f64>::zeros(d);
        for i in 0..data.len() {
            let w = weights.map_or(1.0, |w| w[i]);
            let mut row = Vec::with_capacity(d);
            row.push(1.0);
            row.extend_from_slice(data.x().row(i));
            for a in 0..d {
                xty[a] += w * row[a] * y[i];
                for b in 0..d {
                    xtx[(a, b)] += w * row[a] * row[b];
                }
            }
        }
        for a in 1..d {
            xtx[(a, a)] += self.ridge;
        }
        let coef = xtx
            .svd(true, true)
            .solve(&xty, 1e-12)
            .map_err(|e| invalid(format!("least squares: {e}")))?;
        Ok(LinearModel {
            coef: coef.iter().copied().collect(),
        })
    }

    fn losses(&self, model: &LinearModel, data: &Dataset, _seed: u64) -> Result<Vec<f64>> {
        let y = data
            .values()
            .ok_or_else(|| invalid("linear learner needs regression targets"))?;
        Ok(model
            .predict(data.x())
            .iter()
            .zip(y)
            .map(|(p, t)| (p - t).powi(2))
            .collect())
    }

    fn scores(&self, _model: &LinearModel, _data: &Dataset, _seed: u64) -> Result<Vec<f64>> {
        Err(invalid("the linear learner has no acquisition scores"))
    }
}

/// A mean-field BNN trained from scratch on every fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BnnLearner {
    pub widths: Vec<usize>,
    pub posterior: PosteriorKind,
    pub activation: Activation,
    pub head: Head,
    pub rho_init: f64,
    pub prior_sigma: f64,
    pub train: TrainConfig,
    /// Draws used for scores and test losses.
    pub score_samples: usize,
}

impl Default for BnnLearner {
    fn default() -> Self {
        Self {
            widths: vec![2, 50, 2],
            posterior: PosteriorKind::Radial,
            activation: Activation::Relu,
            head: Head::Softmax,
            rho_init: crate::bnn::DEFAULT_RHO_INIT,
            prior_sigma: 1.0,
            train: TrainConfig {
                patience: None,
                ..TrainConfig::default()
            },
            score_samples: 16,
        }
    }
}

impl Learner for BnnLearner {
    type Model = BayesianMlp;

    fn fit(&self, data: &Dataset, weights: Option<&[f64]>, seed: u64) -> Result<BayesianMlp> {
        let mut rng = RngStream::new(seed, 0x1ea7);
        let model = BayesianMlp::init(
            &self.widths,
            self.posterior,
            self.activation,
            self.head,
            self.rho_init,
            &mut rng,
        )?;
        let prior = Prior::isotropic(&model, self.prior_sigma, PriorFamily::Gaussian)?;
        let cfg = TrainConfig {
            seed,
            ..self.train.clone()
        };
        let opts = TrainOptions {
            weights,
            ..TrainOptions::default()
        };
        Ok(train(model, data, &prior, &cfg, &opts)?.model)
    }

    fn losses(&self, model: &BayesianMlp, data: &Dataset, seed: u64) -> Result<Vec<f64>> {
        pointwise_nll(
            model,
            data,
            self.score_samples,
            None,
            &mut RngStream::new(seed, 0x1055),
        )
    }

    fn accuracy(&self, model: &BayesianMlp, data: &Dataset, seed: u64) -> Result<Option<f64>> {
        let Some(labels) = data.labels() else {
            return Ok(None);
        };
        let probs = predict_mean(
            model,
            data.x(),
            self.score_samples,
            &mut RngStream::new(seed, 0xacc),
        )?;
        Ok(Some(accuracy(&probs, labels, None)))
    }

    fn scores(&self, model: &BayesianMlp, data: &Dataset, seed: u64) -> Result<Vec<f64>> {
        let outs = predict_samples(
            model,
            data.x(),
            self.score_samples,
            &mut RngStream::new(seed, 0x5c0),
        )?;
        match model.head() {
            Head::Softmax => Ok(bald_scores(&outs)),
            Head::Gaussian { .. } => {
                let mean = mean_of(&outs)?;
                Ok((0..data.len())
                    .map(|i| {
                        outs.iter()
                            .map(|o| (o.data()[i] - mean.data()[i]).powi(2))
                            .sum::<f64>()
                            / outs.len() as f64
                    })
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActiveLearningConfig {
    pub proposal: ProposalKind,
    /// Points acquired uniformly at random before active acquisition.
    pub start_points: usize,
    /// Active acquisitions after the start set.
    pub m_max: usize,
    /// Cadence of scoring-model refits and of evaluation checkpoints.
    pub retrain_every: usize,
    pub estimators: Vec<Estimator>,
    /// Objective for the model that produces acquisition scores.
    pub scoring_estimator: Estimator,
}

impl Default for ActiveLearningConfig {
    fn default() -> Self {
        Self {
            proposal: ProposalKind::Boltzmann {
                temperature: DEFAULT_TEMPERATURE,
            },
            start_points: 10,
            m_max: 30,
            retrain_every: 3,
            estimators: Estimator::WEIGHTED.to_vec(),
            scoring_estimator: Estimator::RTilde,
        }
    }
}

impl ActiveLearningConfig {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        self.proposal.validate()?;
        if self.retrain_every == 0 {
            return Err(invalid("retrain_every must be at least 1"));
        }
        if self.start_points + self.m_max >= pool_size {
            return Err(invalid(format!(
                "pool of {pool_size} is too small for {} start points and {} acquisitions",
                self.start_points, self.m_max
            )));
        }
        if self.estimators.contains(&Estimator::Full) || self.scoring_estimator == Estimator::Full {
            return Err(invalid("the full-pool estimator cannot weight training"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    /// Points acquired, start set included.
    pub m: usize,
    pub estimator: Estimator,
    pub test_loss: f64,
    pub test_accuracy: Option<f64>,
    /// Count of negative training weights, which the estimators permit.
    pub negative_weights: usize,
}

fn fit_seed(seed: u64, m: usize) -> u64 {
    RngStream::new(seed, 0xf17).derive(m as u64).next_u64()
}

/// Runs acquisition to `start_points + m_max` points, calling `checkpoint`
/// at the start set and every `retrain_every` acquisitions after it.
fn drive<L: Learner>(
    learner: &L,
    pool_data: &Dataset,
    cfg: &ActiveLearningConfig,
    seed: u64,
    mut checkpoint: impl FnMut(&Pool) -> Result<()>,
) -> Result<Trajectory> {
    let n = pool_data.len();
    cfg.validate(n)?;
    let root = RngStream::new(seed, 0);
    let mut acq_rng = root.derive(1);
    let mut pool = Pool::new(n);
    let mut sums = DistanceSums::new(n);
    for _ in 0..cfg.start_points {
        let k = pool.remaining().len();
        let (idx, _) = pool.acquire(&vec![1.0 / k as f64; k], &mut acq_rng)?;
        sums.add(pool_data.x(), idx);
    }
    let mut scores: Option<Vec<f64>> = None;
    for step in 0..=cfg.m_max {
        let due = step % cfg.retrain_every == 0;
        if due || step == cfg.m_max {
            checkpoint(&pool)?;
        }
        if step == cfg.m_max {
            break;
        }
        if cfg.proposal.needs_scores() && (due || scores.is_none()) {
            let m = pool.acquired().len();
            if m == 0 {
                return Err(invalid(
                    "score-based proposals need at least one start point",
                ));
            }
            let train = pool_data.subset(pool.acquired());
            let w = cfg
                .scoring_estimator
                .weights(&pool.trajectory().masses, n)?;
            let scorer = learner.fit(&train, Some(&w), fit_seed(seed ^ 0x5c, m))?;
            scores = Some(learner.scores(&scorer, pool_data, fit_seed(seed ^ 0x5d, m))?);
        }
        let remaining_scores = scores
            .as_ref()
            .map(|s| pool.remaining().iter().map(|&i| s[i]).collect::<Vec<f64>>());
        let masses =
            cfg.proposal
                .masses_from_sums(&sums, pool.remaining(), remaining_scores.as_deref())?;
        let (idx, _) = pool.acquire(&masses, &mut acq_rng)?;
        sums.add(pool_data.x(), idx);
    }
    let traj = pool.trajectory().clone();
    assert_without_replacement(&traj.indices, n)?;
    Ok(traj)
}

fn assert_without_replacement(idx: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in idx {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(invalid(format!("index {i} acquired twice or out of range")));
        }
    }
    Ok(())
}

/// Learning curves for one trajectory. At each checkpoint a fresh model is
/// fit per estimator on the shared acquired set, weighted by that
/// estimator's per-point weights, and scored on `test`.
pub fn active_learning_run<L: Learner>(
    learner: &L,
    pool_data: &Dataset,
    test: &Dataset,
    cfg: &ActiveLearningConfig,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    let n = pool_data.len();
    let mut curve = Vec::new();
    drive(learner, pool_data, cfg, seed, |pool| {
        let m = pool.acquired().len();
        if m == 0 {
            return Ok(());
        }
        let train = pool_data.subset(pool.acquired());
        for &est in &cfg.estimators {
            let w = est.weights(&pool.trajectory().masses, n)?;
            let s = fit_seed(seed, m);
            let model = learner.fit(&train, Some(&w), s)?;
            let losses = learner.losses(&model, test, s)?;
            curve.push(CurvePoint {
                m,
                estimator: est,
                test_loss: stats::mean(&losses),
                test_accuracy: learner.accuracy(&model, test, s)?,
                negative_weights: w.iter().filter(|v| **v < 0.0).count(),
            });
        }
        Ok(())
    })?;
    Ok(curve)
}

/// The acquisition trajectory alone, without checkpoint training.
pub fn acquire_trajectory<L: Learner>(
    learner: &L,
    pool_data: &Dataset,
    cfg: &ActiveLearningConfig,
    seed: u64,
) -> Result<Trajectory> {
    drive(learner, pool_data, cfg, seed, |_| Ok(()))
}

/// Split of the overall bias `r − R̃(θ*)` into its two parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiasDecomposition {
    /// Full test-pool risk.
    pub r: f64,
    pub r_tilde: f64,
    pub r_lure: f64,
    /// `R_LURE(θ*) − R̃(θ*)`.
    pub alb: f64,
    /// `r − R_LURE(θ*)`.
    pub ofb: f64,
}

impl BiasDecomposition {
    /// `losses` and `qs` describe the training trajectory under `θ*`.
    pub fn new(losses: &[f64], qs: &[f64], n: usize, r: f64) -> Result<Self> {
        let r_tilde = Estimator::RTilde.estimate(losses, qs, n)?.value;
        let r_lure = Estimator::Lure.estimate(losses, qs, n)?.value;
        Ok(Self {
            r,
            r_tilde,
            r_lure,
            alb: r_lure - r_tilde,
            ofb: ofb(r, r_lure),
        })
    }

    pub fn total(&self) -> f64 {
        self.r - self.r_tilde
    }
}

pub fn ofb(r: f64, r_lure: f64) -> f64 {
    r - r_lure
}

/// Acquires a trajectory, fits `θ*` with `objective`, then decomposes the bias
/// of its in-sample risk against the risk on `test`.
pub fn bias_decomposition_run<L: Learner>(
    learner: &L,
    pool_data: &Dataset,
    test: &Dataset,
    cfg: &ActiveLearningConfig,
    objective: Estimator,
    seed: u64,
) -> Result<BiasDecomposition> {
    let traj = acquire_trajectory(learner, pool_data, cfg, seed)?;
    let n = pool_data.len();
    let train = pool_data.subset(&traj.indices);
    let w = objective.weights(&traj.masses, n)?;
    let s = fit_seed(seed, traj.len());
    let model = learner.fit(&train, Some(&w), s)?;
    let in_sample = learner.losses(&model, &train, s)?;
    let r = pool_risk(&learner.losses(&model, test, s)?);
    BiasDecomposition::new(&in_sample, &traj.masses, n, r)
}

/// Samples `m` acquisitions from a fixed pool. `scores` covers the whole
/// pool and is only read by score-based proposals.
pub fn sample_trajectory(
    features: &Tensor,
    proposal: &ProposalKind,
    scores: Option<&[f64]>,
    m: usize,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    let n = features.rows();
    if m > n {
        return Err(invalid(format!("cannot acquire {m} points from {n}")));
    }
    let mut pool = Pool::new(n);
    let mut sums = DistanceSums::new(n);
    for _ in 0..m {
        let rem: Option<Vec<f64>> =
            scores.map(|s| pool.remaining().iter().map(|&i| s[i]).collect());
        let masses = proposal.masses_from_sums(&sums, pool.remaining(), rem.as_deref())?;
        let (idx, _) = pool.acquire(&masses, rng)?;
        sums.add(features, idx);
    }
    Ok(pool.trajectory().clone())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasRow {
    pub m: usize,
    pub estimator: Estimator,
    /// Mean of `estimate − pool risk` over trajectories.
    pub bias: f64,
    pub std_error: f64,
}

/// Estimator bias for a fixed model whose per-point pool losses are known.
pub fn bias_probe(
    pool_losses: &[f64],
    features: &Tensor,
    proposal: &ProposalKind,
    scores: Option<&[f64]>,
    m_max: usize,
    n_trajectories: usize,
    seed: u64,
) -> Result<Vec<BiasRow>> {
    let n = pool_losses.len();
    let truth = pool_risk(pool_losses);
    let root = RngStream::new(seed, 0xb1a5);
    let mut errs = vec![vec![Vec::<f64>::new(); 3]; m_max];
    for t in 0..n_trajectories {
        let traj = sample_trajectory(
            features,
            proposal,
            scores,
            m_max,
            &mut root.derive(t as u64),
        )?;
        let losses: Vec<f64> = traj.indices.iter().map(|&i| pool_losses[i]).collect();
        for m in 1..=m_max {
            for (k, est) in Estimator::WEIGHTED.iter().enumerate() {
                let v = est.estimate(&losses[..m], &traj.masses[..m], n)?.value;
                errs[m - 1][k].push(v - truth);
            }
        }
    }
    let mut rows = Vec::with_capacity(3 * m_max);
    for (i, per_m) in errs.iter().enumerate() {
        for (k, e) in per_m.iter().enumerate() {
            rows.push(BiasRow {
                m: i + 1,
                estimator: Estimator::WEIGHTED[k],
                bias: stats::mean(e),
                std_error: stats::std_error(e),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestingRow {
    pub m: usize,
    pub mse: f64,
    pub median_sq_error: f64,
    /// One squared error per trial.
    pub sq_errors: Vec<f64>,
}

/// Squared error of the LURE estimate of a fixed model's pool risk at each
/// checkpoint `m`, over independent trials.
pub fn active_testing_run(
    pool_losses: &[f64],
    features: &Tensor,
    proposal: &ProposalKind,
    scores: Option<&[f64]>,
    checkpoints: &[usize],
    n_trials: usize,
    seed: u64,
) -> Result<Vec<TestingRow>> {
    let n = pool_losses.len();
    let m_max = checkpoints.iter().copied().max().unwrap_or(0);
    if checkpoints.contains(&0) {
        return Err(invalid("checkpoints start at 1"));
    }
    let truth = pool_risk(pool_losses);
    let root = RngStream::new(seed, 0x7e57);
    let mut sq = vec![Vec::with_capacity(n_trials); checkpoints.len()];
    for t in 0..n_trials {
        let traj = sample_trajectory(
            features,
            proposal,
            scores,
            m_max,
            &mut root.derive(t as u64),
        )?;
        let losses: Vec<f64> = traj.indices.iter().map(|&i| pool_losses[i]).collect();
        for (c, &m) in checkpoints.iter().enumerate() {
            let v = Estimator::Lure
                .estimate(&losses[..m], &traj.masses[..m], n)?
                .value;
            sq[c].push((v - truth).powi(2));
        }
    }
    Ok(checkpoints
        .iter()
        .zip(sq)
        .map(|(&m, e)| TestingRow {
            m,
            mse: stats::mean(&e),
            median_sq_error: stats::median(&e),
            sq_errors: e,
        })
        .collect())
}
