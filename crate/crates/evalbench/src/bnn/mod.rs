//! Bayesian multilayer perceptrons: the ELBO, training, predictive sampling,
//! and uncertainty metrics.

mod elbo;
mod model;
mod predict;
mod train;

pub use elbo::{
    draw_noise, elbo, elbo_gradients, elbo_with_noise, grad_variance_probe, record_elbo,
    term_gradients, ElboBreakdown, ElboSpec, ElboVars, GradVarianceReport, LayerGrad, SampleNoise,
    TermGradients, TermStd,
};
pub use model::{BayesianMlp, Head, Prior, PriorFamily, DEFAULT_RHO_INIT, DEFAULT_SIGMA_OBS};
pub use predict::{
    accuracy, argmax, bald_mi, bald_scores, ece, ensemble_predict, entropy_scores, forward,
    mean_of, pointwise_nll, predict_mean, predict_samples, predictive_entropy, predictive_mse,
    predictive_nll, referral_curve, restrict, weights_for,
};
pub use train::{train, EpochRecord, Penalty, TrainConfig, TrainOptions, TrainOutcome};
