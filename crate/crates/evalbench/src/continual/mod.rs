//! Sequential learning over task streams: VCL with and without coresets,
//! EWC, evaluation protocols, and probes at task boundaries.

mod methods;
mod probes;
mod stream;

pub use methods::{
    coreset_finetune, covering_radius, evaluate_row, ewc_step, fisher_diag, forgetting_pattern,
    kcenter_coreset, kcenter_from, run_continual, vcl_step, AccuracyMatrix, ConjugateLinear,
    ContinualConfig, FisherState, Method, PriorSource, Protocol, CONTINUAL_RHO_INIT,
};
pub use probes::{boundary_entropy, gradient_ratio_probe, GradientRatio};
pub use stream::{
    consecutive_pairs, inverse_permutation, make_permuted_stream, make_split_stream,
    permute_features, StreamKind, Task, TaskStream,
};
