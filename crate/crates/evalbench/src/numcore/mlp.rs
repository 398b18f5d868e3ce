use serde::{Deserialize, Serialize};

use super::tape::{affine_forward, GradTape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Default negative slope for [`Activation::LeakyRelu`].
pub const DEFAULT_LEAKY_ALPHA: f64 = 0.1;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn leaky() -> Self {
        Activation::LeakyRelu(DEFAULT_LEAKY_ALPHA)
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
        }
    }

    /// Slope at `x`; the kink takes the left slope.
    pub fn slope(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => f64::from(x > 0.0),
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
        }
    }

    fn on_tape(self, tape: &mut GradTape, v: Var) -> Var {
        match self {
            Activation::Identity => v,
            Activation::Relu => tape.relu(v),
            Activation::LeakyRelu(a) => tape.leaky_relu(v, a),
        }
    }
}

/// How the final affine output is read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputHead {
    /// Raw outputs (regression means, or logits left unnormalized).
    Linear,
    /// Row-wise softmax over the final layer.
    Softmax,
}

/// Forward pass through augmented weight matrices `(out, in + 1)`.
///
/// Returns the input followed by the post-activation output of every layer;
/// hidden layers use `act`, the last layer is passed through `head`.
pub fn mlp_forward(
    layers: &[Tensor],
    act: Activation,
    head: OutputHead,
    x: &Tensor,
) -> Result<Vec<Tensor>> {
    check_chain(layers, x)?;
    let mut outs = Vec::with_capacity(layers.len() + 1);
    outs.push(x.clone());
    for (i, w) in layers.iter().enumerate() {
        let pre = affine_forward(outs.last().unwrap(), w)?;
        let post = if i + 1 < layers.len() {
            pre.map(|v| act.apply(v))
        } else {
            match head {
                OutputHead::Linear => pre,
                OutputHead::Softmax => softmax_rows(&pre),
            }
        };
        outs.push(post);
    }
    Ok(outs)
}

/// Tape version of [`mlp_forward`] returning final-layer logits (pre-head).
pub fn mlp_forward_tape(
    tape: &mut GradTape,
    layers: &[Var],
    act: Activation,
    x: Var,
) -> Result<Var> {
    let mut h = x;
    for (i, &w) in layers.iter().enumerate() {
        h = tape.affine(h, w)?;
        if i + 1 < layers.len() {
            h = act.on_tape(tape, h);
        }
    }
    Ok(h)
}

fn check_chain(layers: &[Tensor], x: &Tensor) -> Result<()> {
    let mut width = x.cols();
    for w in layers {
        if w.shape().len() != 2 || w.cols() != width + 1 {
            return Err(Error::Dimension {
                context: "mlp_forward",
                expected: vec![w.rows(), width + 1],
                actual: w.shape().to_vec(),
            });
        }
        width = w.rows();
    }
    Ok(())
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.cols();
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::from_parts(logits.shape().to_vec(), out)
}

/// Augmented `(out, in + 1)` weight from a plain matrix and bias.
pub fn augment(weight: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let (k, d) = (weight.rows(), weight.cols());
    if bias.len() != k {
        return Err(Error::Dimension {
            context: "augment",
            expected: vec![k],
            actual: vec![bias.len()],
        });
    }
    let mut data = Vec::with_capacity(k * (d + 1));
    for (j, b) in bias.iter().enumerate() {
        data.extend_from_slice(weight.row(j));
        data.push(*b);
    }
    Ok(Tensor::from_parts(vec![k, d + 1], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_network() {
        let w = augment(&Tensor::identity(2), &[0.0, 0.0]).unwrap();
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let out = mlp_forward(&[w], Activation::Identity, OutputHead::Linear, &x).unwrap();
        assert_eq!(out.last().unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn leaky_relu_definition() {
        let a = Activation::LeakyRelu(0.1);
        assert_eq!((a.apply(-1.0), a.apply(2.0)), (-0.1, 2.0));
    }

    #[test]
    fn zero_weights_give_last_bias() {
        let w1 = augment(&Tensor::zeros(&[3, 2]), &[0.5, -0.5, 1.0]).unwrap();
        let w2 = augment(&Tensor::zeros(&[2, 3]), &[4.0, -7.0]).unwrap();
        let x = Tensor::matrix(1, 2, vec![3.0, -8.0]).unwrap();
        let out = mlp_forward(&[w1, w2], Activation::Relu, OutputHead::Linear, &x).unwrap();
        assert_eq!(out.last().unwrap().data(), &[4.0, -7.0]);
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let w = Tensor::zeros(&[2, 5]);
        let x = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            mlp_forward(&[w], Activation::Relu, OutputHead::Linear, &x),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn softmax_rows_normalize() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 1000.0, 0.0, -1000.0]).unwrap();
        let p = softmax_rows(&t);
        for r in 0..2 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
