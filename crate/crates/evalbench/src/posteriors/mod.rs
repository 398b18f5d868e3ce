//! Variational distributions over layer weights: samplers, entropy and KL
//! terms, and the radial/hyperspherical geometry behind them.

mod entropy;
mod layer;
mod radial;
mod sampling;

pub use entropy::{
    entropy_gaussian, entropy_radial, entropy_truncated, kl_diag_gaussians, kl_diag_raw,
    kl_full_vs_diag, radial_entropy_constant, sum_log_sigma, truncated_normal_entropy,
};
pub use layer::{MeanFieldLayer, PosteriorKind, Provenance, WeightSample};
pub use radial::{
    cart_to_hyperspherical, gaussian_radius_mode, gaussian_radius_pdf, hyperspherical_to_cart,
    log_jacobian, log_sphere_area, radial_logpdf_hyperspherical, radial_logpdf_normalized,
    radial_prior_cross_entropy, radial_prior_cross_entropy_with_noise, standardized_norms,
    Hyperspherical, RadialCrossEntropy,
};
pub use sampling::{
    dropout_masks, sample_gaussian, sample_mc_dropout, sample_radial, sample_truncated,
    sample_with_noise, truncated_normal_variance, Noise,
};
