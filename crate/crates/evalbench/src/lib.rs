pub mod active;
pub mod bnn;
pub mod cli;
pub mod continual;
pub mod data;
pub mod error;
pub mod geometry;
pub mod numcore;
pub mod posteriors;
pub mod stats;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/randomness-and-gradients.md")]
    mod randomness_and_gradients {}
    #[doc = include_str!("../../../book/src/posteriors.md")]
    mod posteriors {}
    #[doc = include_str!("../../../book/src/active-testing.md")]
    mod active_testing {}
    #[doc = include_str!("../../../book/src/continual.md")]
    mod continual {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/running-experiments.md")]
    mod running_experiments {}
}
