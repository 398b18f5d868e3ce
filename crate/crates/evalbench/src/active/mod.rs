//! Pool-based acquisition, weighted risk estimators, and the runs built on
//! them: active learning curves, bias probes, and active testing.

mod estimators;
mod proposal;
mod runs;

pub use estimators::{
    enumerate_expectation, enumerate_moments, pool_risk, stable_sum, Estimator, Moments,
    RiskEstimate, MAX_ENUMERATION_POOL,
};
pub use proposal::{
    boltzmann_proposal, distance_boltzmann_proposal, epsilon_greedy_proposal, DistanceSums, Pool,
    ProposalKind, Trajectory, DEFAULT_BETA, DEFAULT_EPSILON, DEFAULT_TEMPERATURE, MIN_LOG_WEIGHT,
};
pub use runs::{
    acquire_trajectory, active_learning_run, active_testing_run, bias_decomposition_run,
    bias_probe, ofb, sample_trajectory, ActiveLearningConfig, BiasDecomposition, BiasRow,
    BnnLearner, CurvePoint, Learner, LinearLearner, LinearModel, TestingRow,
};
