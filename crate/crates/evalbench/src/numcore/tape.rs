//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends one node holding its forward value. Nodes only ever
//! reference earlier nodes, so walking the tape backwards from the root is a
//! reverse topological order and each node is visited exactly once.

use std::f64::consts::PI;

use super::Tensor;
use crate::error::{invalid, Error, Result};

/// Handle to a node recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Log(Var),
    Softplus(Var),
    Abs(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    Affine(Var, Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        allowed: Option<Vec<usize>>,
    },
    GaussianNll {
        pred: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        sigma: f64,
    },
    RadialLogPrior {
        z: Var,
        inv_tail_sq_cumsum: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitive operations for a single backward pass.
#[derive(Debug, Clone, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`GradTape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; exact zeros when `v` did not reach the root.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => {
                let n = shape.iter().product();
                Tensor::from_parts(shape, vec![0.0; n])
            }
        }
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Input or parameter node. Constants are leaves whose gradient is ignored.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        ctx: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dimension {
                context: ctx,
                expected: va.shape().to_vec(),
                actual: vb.shape().to_vec(),
            });
        }
        va.zip_map(vb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "tape add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "tape sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "tape mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let v = self.value(a).zip_map(c, |x, y| x * y)?;
        Ok(self.push(v, Op::MulConst(a, c.clone())))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    /// `|x|` with derivative `+1` at the origin.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { alpha * x });
        self.push(v, Op::LeakyRelu(a, alpha))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// `x (n, d)` times an augmented weight `w (k, d + 1)` whose last column
    /// is the bias. Output is `(n, k)`.
    pub fn affine(&mut self, x: Var, w: Var) -> Result<Var> {
        let v = affine_forward(self.value(x), self.value(w))?;
        Ok(self.push(v, Op::Affine(x, w)))
    }

    /// `Σ_b weights[b] · (−log softmax(logits_b)[labels[b]])`.
    ///
    /// With `allowed`, the softmax runs over those classes only and every
    /// other logit receives a zero gradient.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[f64],
        allowed: Option<&[usize]>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if labels.len() != n || weights.len() != n {
            return Err(Error::Dimension {
                context: "softmax_cross_entropy",
                expected: vec![n],
                actual: vec![labels.len(), weights.len()],
            });
        }
        let classes: Vec<usize> = match allowed {
            Some(a) => a.to_vec(),
            None => (0..c).collect(),
        };
        if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
            return Err(invalid(format!("allowed class {bad} out of range {c}")));
        }
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for b in 0..n {
            let row = lv.row(b);
            let y = labels[b];
            if y >= c || !classes.contains(&y) {
                return Err(invalid(format!("label {y} outside the scored classes")));
            }
            let m = classes
                .iter()
                .map(|&k| row[k])
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = classes.iter().map(|&k| (row[k] - m).exp()).sum();
            let lse = m + z.ln();
            for &k in &classes {
                probs[b * c + k] = (row[k] - lse).exp();
            }
            total += weights[b] * (lse - row[y]);
        }
        let op = Op::SoftmaxCe {
            logits,
            labels: labels.to_vec(),
            weights: weights.to_vec(),
            probs,
            allowed: allowed.map(|a| a.to_vec()),
        };
        Ok(self.push(Tensor::scalar(total), op))
    }

    /// `Σ_b weights[b] · (½ log 2πσ² + (y_b − ŷ_b)² / 2σ²)` for a `(n, 1)` prediction.
    pub fn gaussian_nll(
        &mut self,
        pred: Var,
        targets: &[f64],
        weights: &[f64],
        sigma: f64,
    ) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != targets.len() || weights.len() != targets.len() {
            return Err(Error::Dimension {
                context: "gaussian_nll",
                expected: vec![pv.len()],
                actual: vec![targets.len(), weights.len()],
            });
        }
        if sigma <= 0.0 {
            return Err(invalid("observation sigma must be positive"));
        }
        let half_log = 0.5 * (2.0 * PI * sigma * sigma).ln();
        let total: f64 = pv
            .data()
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&p, &y), &w)| w * (half_log + (y - p).powi(2) / (2.0 * sigma * sigma)))
            .sum();
        let op = Op::GaussianNll {
            pred,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            sigma,
        };
        Ok(self.push(Tensor::scalar(total), op))
    }

    /// Log of the radial noise density in hyperspherical coordinates,
    /// evaluated at the Cartesian point `z`, with the coordinate map folded in:
    ///
    /// `log q(T(z)) = Σ_{j<D} log ‖z_{j..D}‖ − ½ log 2π − ‖z‖² / 2`
    ///
    /// The sum of tail-norm logs is `(D−1) log r + Σ_k (D−1−k) log sin φ_k`.
    pub fn radial_log_prior(&mut self, z: Var) -> Var {
        let zv = self.value(z).data();
        let d = zv.len();
        let mut tails = vec![0.0; d];
        let mut acc = 0.0;
        for i in (0..d).rev() {
            acc += zv[i] * zv[i];
            tails[i] = acc;
        }
        let mut value = -0.5 * (2.0 * PI).ln() - 0.5 * tails[0];
        let mut inv_tail_sq_cumsum = vec![0.0; d];
        let mut cum = 0.0;
        for j in 0..d {
            if j + 1 < d {
                value += 0.5 * tails[j].ln();
                cum += 1.0 / tails[j];
            }
            inv_tail_sq_cumsum[j] = cum;
        }
        let op = Op::RadialLogPrior {
            z,
            inv_tail_sq_cumsum,
        };
        self.push(Tensor::scalar(value), op)
    }

    /// Adjoints of the scalar `root` with respect to every recorded node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(invalid(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let ga: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = g.iter().zip(va).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::MulConst(a, c) => {
                    let ga: Vec<f64> = g.iter().zip(c.data()).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.iter().map(|g| g * c).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, &g),
                Op::Square(a) => {
                    let va = self.value(*a).data();
                    let ga: Vec<f64> = g.iter().zip(va).map(|(g, x)| 2.0 * g * x).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Log(a) => {
                    let va = self.value(*a).data();
                    let ga: Vec<f64> = g.iter().zip(va).map(|(g, x)| g / x).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Softplus(a) => {
                    let va = self.value(*a).data();
                    let ga: Vec<f64> = g.iter().zip(va).map(|(g, &x)| g * sigmoid(x)).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Abs(a) => {
                    let va = self.value(*a).data();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(va)
                        .map(|(g, &x)| if x >= 0.0 { *g } else { -g })
                        .collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::LeakyRelu(a, alpha) => {
                    let va = self.value(*a).data();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(va)
                        .map(|(g, &x)| if x > 0.0 { *g } else { alpha * g })
                        .collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, &vec![g[0]; n]);
                }
                Op::Affine(x, w) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (gx, gw) = affine_backward(xv, wv, &g);
                    accumulate(&mut grads, *x, &gx);
                    accumulate(&mut grads, *w, &gw);
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    weights,
                    probs,
                    allowed,
                } => {
                    let c = self.value(*logits).cols();
                    let mut gl = vec![0.0; probs.len()];
                    for (b, (&y, &wb)) in labels.iter().zip(weights).enumerate() {
                        let scale = g[0] * wb;
                        let row = &mut gl[b * c..(b + 1) * c];
                        match allowed {
                            Some(cls) => {
                                for &k in cls {
                                    row[k] = scale * probs[b * c + k];
                                }
                            }
                            None => {
                                for k in 0..c {
                                    row[k] = scale * probs[b * c + k];
                                }
                            }
                        }
                        row[y] -= scale;
                    }
                    accumulate(&mut grads, *logits, &gl);
                }
                Op::GaussianNll {
                    pred,
                    targets,
                    weights,
                    sigma,
                } => {
                    let pv = self.value(*pred).data();
                    let s2 = sigma * sigma;
                    let gp: Vec<f64> = pv
                        .iter()
                        .zip(targets)
                        .zip(weights)
                        .map(|((&p, &y), &w)| g[0] * w * (p - y) / s2)
                        .collect();
                    accumulate(&mut grads, *pred, &gp);
                }
                Op::RadialLogPrior {
                    z,
                    inv_tail_sq_cumsum,
                } => {
                    let zv = self.value(*z).data();
                    let gz: Vec<f64> = zv
                        .iter()
                        .zip(inv_tail_sq_cumsum)
                        .map(|(&x, &c)| g[0] * x * (c - 1.0))
                        .collect();
                    accumulate(&mut grads, *z, &gz);
                }
            }
            grads[idx] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { shapes, grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn inv_softplus(s: f64) -> f64 {
    if s > 30.0 {
        s
    } else {
        s.exp_m1().ln()
    }
}

pub(crate) fn affine_forward(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, d) = (x.rows(), x.cols());
    let (k, d1) = (w.rows(), w.cols());
    if x.shape().len() != 2 || w.shape().len() != 2 || d1 != d + 1 {
        return Err(Error::Dimension {
            context: "affine",
            expected: vec![k, d + 1],
            actual: w.shape().to_vec(),
        });
    }
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let xr = &xd[i * d..(i + 1) * d];
        for j in 0..k {
            let wr = &wd[j * d1..(j + 1) * d1];
            let mut acc = wr[d];
            for (a, b) in xr.iter().zip(wr) {
                acc += a * b;
            }
            out[i * k + j] = acc;
        }
    }
    Ok(Tensor::from_parts(vec![n, k], out))
}

fn affine_backward(x: &Tensor, w: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let k = w.rows();
    let d1 = d + 1;
    let (xd, wd) = (x.data(), w.data());
    let mut gx = vec![0.0; n * d];
    let mut gw = vec![0.0; k * d1];
    for i in 0..n {
        let xr = &xd[i * d..(i + 1) * d];
        let gxr = &mut gx[i * d..(i + 1) * d];
        for j in 0..k {
            let gij = g[i * k + j];
            if gij == 0.0 {
                continue;
            }
            let wr = &wd[j * d1..(j + 1) * d1];
            let gwr = &mut gw[j * d1..(j + 1) * d1];
            for p in 0..d {
                gxr[p] += gij * wr[p];
                gwr[p] += gij * xr[p];
            }
            gwr[d] += gij;
        }
    }
    (gx, gw)
}
