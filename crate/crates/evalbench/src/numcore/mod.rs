//! Dense tensors, seeded random streams, and reverse-mode differentiation
//! sized for small multilayer perceptrons. Everything is `f64`.

mod gradcheck;
mod mlp;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use mlp::{
    augment, mlp_forward, mlp_forward_tape, softmax_rows, Activation, OutputHead,
    DEFAULT_LEAKY_ALPHA,
};
pub use rng::{gaussian, RngStream};
pub use tape::{inv_softplus, sigmoid, softplus, GradTape, Gradients, Var};
pub use tensor::Tensor;
