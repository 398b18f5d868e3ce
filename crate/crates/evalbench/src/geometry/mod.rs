//! Covariance of the product of independent mean-field layers, computed
//! analytically and by Monte Carlo, plus local product matrices of
//! piecewise-linear networks.
//!
//! A stack `[W1, W2, ..., WL]` has product `M = WL ... W2 W1`, so `W1` is
//! `(K1, K0)` and the product is `(KL, K0)`. Covariance tables are indexed
//! `(a, b, c, d)` for `Cov(m_ab, m_cd)`.

use std::io::Write;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::numcore::{Activation, RngStream, Tensor};

/// Largest number of product-matrix elements a table may cover.
pub const MAX_PRODUCT_ELEMENTS: usize = 256;

/// Independent Gaussian entries per layer, given by mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    means: Vec<Tensor>,
    stds: Vec<Tensor>,
}

impl LayerStack {
    pub fn new(means: Vec<Tensor>, stds: Vec<Tensor>) -> Result<Self> {
        if means.is_empty() || means.len() != stds.len() {
            return Err(invalid(
                "a stack needs matching, non-empty mean and std lists",
            ));
        }
        for (l, (m, s)) in means.iter().zip(&stds).enumerate() {
            if m.shape().len() != 2 || m.shape() != s.shape() {
                return Err(invalid(format!(
                    "layer {l}: mean {:?} and std {:?}",
                    m.shape(),
                    s.shape()
                )));
            }
            if s.data().iter().any(|v| !(*v >= 0.0)) {
                return Err(invalid(format!("layer {l} has a negative or NaN std")));
            }
            if l > 0 && m.cols() != means[l - 1].rows() {
                return Err(Error::Dimension {
                    context: "layer stack chain",
                    expected: vec![m.rows(), means[l - 1].rows()],
                    actual: m.shape().to_vec(),
                });
            }
        }
        Ok(Self { means, stds })
    }

    /// Entries drawn from `N(0, 1)` for means and `U(lo, hi)` for stds.
    /// `dims` lists `K0, K1, ..., KL`.
    pub fn random(dims: &[usize], std_range: (f64, f64), rng: &mut RngStream) -> Result<Self> {
        if dims.len() < 2 {
            return Err(invalid("need at least two dimensions"));
        }
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for w in dims.windows(2) {
            let (cols, rows) = (w[0], w[1]);
            means.push(Tensor::matrix(rows, cols, rng.normals(rows * cols))?);
            let s = (0..rows * cols)
                .map(|_| std_range.0 + (std_range.1 - std_range.0) * rng.uniform())
                .collect();
            stds.push(Tensor::matrix(rows, cols, s)?);
        }
        Self::new(means, stds)
    }

    pub fn depth(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[Tensor] {
        &self.means
    }

    pub fn stds(&self) -> &[Tensor] {
        &self.stds
    }

    pub fn product_shape(&self) -> (usize, usize) {
        (self.means.last().unwrap().rows(), self.means[0].cols())
    }

    /// Product of the mean matrices, which is `E[M]` by independence.
    pub fn mean_product(&self) -> Result<Tensor> {
        product(&self.means)
    }
}

fn product(layers: &[Tensor]) -> Result<Tensor> {
    let mut m = layers[0].clone();
    for w in &layers[1..] {
        m = w.matmul(&m)?;
    }
    Ok(m)
}

/// Dense `Cov(m_ab, m_cd)` for an `(r, c)` product matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceTable {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CovarianceTable {
    fn zeros(rows: usize, cols: usize) -> Result<Self> {
        let e = rows * cols;
        if e > MAX_PRODUCT_ELEMENTS {
            return Err(invalid(format!(
                "product of {e} elements exceeds {MAX_PRODUCT_ELEMENTS}"
            )));
        }
        Ok(Self {
            rows,
            cols,
            data: vec![0.0; e * e],
        })
    }

    fn idx(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        (a * self.cols + b) * self.rows * self.cols + c * self.cols + d
    }

    pub fn get(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        self.data[self.idx(a, b, c, d)]
    }

    fn set(&mut self, a: usize, b: usize, c: usize, d: usize, v: f64) {
        let i = self.idx(a, b, c, d);
        self.data[i] = v;
    }

    // copies the upper triangle over the lower so rounding cannot break symmetry
    fn mirror(&mut self) {
        let e = self.rows * self.cols;
        for p in 0..e {
            for q in p + 1..e {
                self.data[q * e + p] = self.data[p * e + q];
            }
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Entries in `(a, b, c, d)` row-major order.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs_diff(&self, other: &CovarianceTable) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    /// All `(a, b, c, d)` index tuples.
    pub fn indices(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let (r, c) = (self.rows, self.cols);
        (0..r).flat_map(move |a| {
            (0..c).flat_map(move |b| (0..r).flat_map(move |cc| (0..c).map(move |d| (a, b, cc, d))))
        })
    }
}

/// One draw of the product matrix.
pub fn product_matrix_sample(stack: &LayerStack, rng: &mut RngStream) -> Result<Tensor> {
    let layers: Vec<Tensor> = stack
        .means
        .iter()
        .zip(&stack.stds)
        .map(|(m, s)| m.zip_map(s, |mu, sd| mu + sd * rng.normal()))
        .collect::<Result<_>>()?;
    product(&layers)
}

fn variances(t: &Tensor) -> Tensor {
    t.map(|s| s * s)
}

fn single_layer_cov(stack: &LayerStack) -> Result<CovarianceTable> {
    let v = variances(&stack.stds[0]);
    let mut t = CovarianceTable::zeros(v.rows(), v.cols())?;
    for a in 0..v.rows() {
        for b in 0..v.cols() {
            t.set(a, b, a, b, v.get2(a, b));
        }
    }
    Ok(t)
}

/// Closed form for two layers: per-element variance, shared-column and
/// shared-row terms, nothing else.
pub fn analytic_cov_two_layer(stack: &LayerStack) -> Result<CovarianceTable> {
    if stack.depth() != 2 {
        return Err(invalid(format!(
            "two-layer form needs L = 2, got {}",
            stack.depth()
        )));
    }
    let (mu1, mu2) = (&stack.means[0], &stack.means[1]);
    let (v1, v2) = (variances(&stack.stds[0]), variances(&stack.stds[1]));
    let k = mu1.rows();
    let (rows, cols) = stack.product_shape();
    let mut t = CovarianceTable::zeros(rows, cols)?;
    for (a, b, c, d) in t.indices().collect::<Vec<_>>() {
        let (mut both, mut col, mut row) = (0.0, 0.0, 0.0);
        for i in 0..k {
            if a == c && b == d {
                both += v2.get2(a, i) * v1.get2(i, b);
            }
            if b == d {
                col += mu2.get2(a, i) * mu2.get2(c, i) * v1.get2(i, b);
            }
            if a == c {
                row += v2.get2(a, i) * (mu1.get2(i, b) * mu1.get2(i, d));
            }
        }
        t.set(a, b, c, d, both + col + row);
    }
    t.mirror();
    Ok(t)
}

/// Layer-by-layer recursion from the single-layer table. At `L = 2` the
/// terms the closed form skips are exact zeros here, so both agree bit for bit.
pub fn analytic_cov_recursive(stack: &LayerStack) -> Result<CovarianceTable> {
    if stack.depth() < 2 {
        return Err(invalid("the recursion needs L >= 2"));
    }
    let mut prev = single_layer_cov(stack)?;
    let mut prev_mean = stack.means[0].clone();
    for l in 1..stack.depth() {
        let mu = &stack.means[l];
        let v = variances(&stack.stds[l]);
        let k = mu.cols();
        let cols = prev.cols;
        let mut t = CovarianceTable::zeros(mu.rows(), cols)?;
        for (a, b, c, d) in t.indices().collect::<Vec<_>>() {
            // Cov(w_ai, w_cj) = δ_ac δ_ij v_ai
            let (mut both, mut col, mut row) = (0.0, 0.0, 0.0);
            for i in 0..k {
                if a == c {
                    both += v.get2(a, i) * prev.get(i, b, i, d);
                }
                for j in 0..k {
                    col += mu.get2(a, i) * mu.get2(c, j) * prev.get(i, b, j, d);
                }
                if a == c {
                    row += v.get2(a, i) * (prev_mean.get2(i, b) * prev_mean.get2(i, d));
                }
            }
            t.set(a, b, c, d, both + col + row);
        }
        t.mirror();
        prev = t;
        prev_mean = mu.matmul(&prev_mean)?;
    }
    Ok(prev)
}

/// Monte Carlo covariance with per-entry standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct McCovariance {
    pub table: CovarianceTable,
    pub std_error: CovarianceTable,
}

/// Unbiased sample covariance over `samples` product draws.
pub fn mc_cov(stack: &LayerStack, samples: usize, rng: &mut RngStream) -> Result<McCovariance> {
    if samples < 2 {
        return Err(invalid("need at least two samples"));
    }
    let (rows, cols) = stack.product_shape();
    let e = rows * cols;
    let mut table = CovarianceTable::zeros(rows, cols)?;
    let mut std_error = CovarianceTable::zeros(rows, cols)?;
    // shifting by the exact mean keeps the accumulation well conditioned
    let shift = stack.mean_product()?;
    let mut s1 = vec![0.0; e];
    let mut s2 = vec![0.0; e * e];
    let mut sq = vec![0.0; e * e];
    for _ in 0..samples {
        let m = product_matrix_sample(stack, rng)?;
        let z: Vec<f64> = m
            .data()
            .iter()
            .zip(shift.data())
            .map(|(x, s)| x - s)
            .collect();
        for p in 0..e {
            s1[p] += z[p];
            let row = &mut s2[p * e..(p + 1) * e];
            let row_sq = &mut sq[p * e..(p + 1) * e];
            for q in 0..e {
                let v = z[p] * z[q];
                row[q] += v;
                row_sq[q] += v * v;
            }
        }
    }
    let n = samples as f64;
    for p in 0..e {
        for q in 0..e {
            let cov = (s2[p * e + q] - s1[p] * s1[q] / n) / (n - 1.0);
            let m1 = s2[p * e + q] / n;
            let var = (sq[p * e + q] / n - m1 * m1).max(0.0);
            table.data[p * e + q] = cov;
            std_error.data[p * e + q] = (var / n).sqrt();
        }
    }
    Ok(McCovariance { table, std_error })
}

/// Product covariance of `A B C` with fixed `A`, `C` against the Kronecker
/// form `Cov(m_ab, m_cd) = U_ac V_bd`, `U = A Aᵀ`, `V = Cᵀ C`.
#[derive(Debug, Clone, PartialEq)]
pub struct MvgCheck {
    pub u: Tensor,
    pub v: Tensor,
    pub max_residual: f64,
}

/// `b_means` is arbitrary; the middle layer has unit std.
pub fn mvg_check(a: &Tensor, b_means: &Tensor, c: &Tensor) -> Result<MvgCheck> {
    let stack = LayerStack::new(
        vec![c.clone(), b_means.clone(), a.clone()],
        vec![
            Tensor::zeros(c.shape()),
            Tensor::filled(b_means.shape(), 1.0),
            Tensor::zeros(a.shape()),
        ],
    )?;
    let table = analytic_cov_recursive(&stack)?;
    let u = a.matmul(&a.transpose())?;
    let v = c.transpose().matmul(c)?;
    let max_residual = table
        .indices()
        .map(|(i, j, k, l)| (table.get(i, j, k, l) - u.get2(i, k) * v.get2(j, l)).abs())
        .fold(0.0, f64::max);
    Ok(MvgCheck { u, v, max_residual })
}

/// Matrix `P` of shape `(out, in + 1)` with `P [x; 1] = f(x)` for a network
/// of augmented layers `(out, in + 1)` with a linear output layer. Each
/// hidden activation is replaced by the diagonal of its slopes at `x`. At an
/// exact kink the pre-activation is zero, so either slope reproduces `f(x)`.
pub fn local_product_matrix(layers: &[Tensor], act: Activation, x: &[f64]) -> Result<Tensor> {
    if layers.is_empty() {
        return Err(invalid("no layers"));
    }
    let width = x.len();
    if layers[0].cols() != width + 1 {
        return Err(Error::Dimension {
            context: "local product input",
            expected: vec![layers[0].rows(), width + 1],
            actual: layers[0].shape().to_vec(),
        });
    }
    // running map from [x; 1] to [h; 1]
    let mut p = Tensor::identity(width + 1);
    let mut h: Vec<f64> = x.to_vec();
    for (l, w) in layers.iter().enumerate() {
        if w.cols() != h.len() + 1 {
            return Err(invalid(format!(
                "layer {l} expects {} inputs, got {}",
                w.cols() - 1,
                h.len()
            )));
        }
        let pre: Vec<f64> = (0..w.rows())
            .map(|r| {
                let row = w.row(r);
                row[..h.len()]
                    .iter()
                    .zip(&h)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + row[h.len()]
            })
            .collect();
        let last = l + 1 == layers.len();
        let rows = if last { w.rows() } else { w.rows() + 1 };
        let mut step = vec![0.0; rows * w.cols()];
        for r in 0..w.rows() {
            let s = if last { 1.0 } else { act.slope(pre[r]) };
            for k in 0..w.cols() {
                step[r * w.cols() + k] = s * w.get2(r, k);
            }
        }
        if !last {
            step[w.rows() * w.cols() + w.cols() - 1] = 1.0;
        }
        p = Tensor::matrix(rows, w.cols(), step)?.matmul(&p)?;
        h = if last {
            pre
        } else {
            pre.iter().map(|&v| act.apply(v)).collect()
        };
    }
    Ok(p)
}

/// Writes `sample,element,value` rows; elements are row-major indices.
pub fn write_samples_csv(samples: &[Tensor], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["sample", "element", "value"])?;
    for (s, m) in samples.iter().enumerate() {
        for (e, v) in m.data().iter().enumerate() {
            out.write_record([s.to_string(), e.to_string(), format!("{v:e}")])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_samples_csv(samples: &[Tensor], path: &Path) -> Result<()> {
    write_samples_csv(samples, std::fs::File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{mlp_forward, OutputHead};

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn zero_std_sample_is_mean_product() {
        let mut rng = RngStream::new(0, 0);
        let s = LayerStack::random(&[2, 3, 2], (0.0, 0.0), &mut rng).unwrap();
        assert_eq!(
            product_matrix_sample(&s, &mut rng).unwrap(),
            s.mean_product().unwrap()
        );
        let mc = mc_cov(&s, 10, &mut rng).unwrap();
        assert!(mc.table.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_product_variance() {
        let s = LayerStack::new(vec![t(1, 1, &[0.0]); 2], vec![t(1, 1, &[1.0]); 2]).unwrap();
        let mut rng = RngStream::new(1, 0);
        let mc = mc_cov(&s, 100_000, &mut rng).unwrap();
        assert!((mc.table.get(0, 0, 0, 0) - 1.0).abs() < 3.0 * mc.std_error.get(0, 0, 0, 0));

        let s = LayerStack::new(
            vec![t(1, 1, &[0.7]), t(1, 1, &[-1.3])],
            vec![t(1, 1, &[0.5]), t(1, 1, &[2.0])],
        )
        .unwrap();
        let v = analytic_cov_two_layer(&s).unwrap().get(0, 0, 0, 0);
        assert!((v - (4.0 * 0.25 + 1.69 * 0.25 + 0.49 * 4.0)).abs() < 1e-14);
    }

    #[test]
    fn two_layer_structure() {
        let mut rng = RngStream::new(2, 0);
        let s = LayerStack::random(&[3, 3, 3], (0.2, 1.0), &mut rng).unwrap();
        let two = analytic_cov_two_layer(&s).unwrap();
        assert_eq!(two, analytic_cov_recursive(&s).unwrap());
        for (a, b, c, d) in two.indices() {
            let v = two.get(a, b, c, d);
            assert_eq!(v, two.get(c, d, a, b));
            if a != c && b != d {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn three_layer_positive_construction() {
        let mut rng = RngStream::new(3, 0);
        let mut s = LayerStack::random(&[2, 2, 2, 2], (0.1, 0.5), &mut rng).unwrap();
        for m in &mut s.means {
            *m = m.map(|v| v.abs() + 0.1);
        }
        let t3 = analytic_cov_recursive(&s).unwrap();
        assert!(t3.data().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn mvg_identity_and_random() {
        let eye = Tensor::identity(2);
        let b = t(2, 2, &[0.3, -2.0, 1.0, 0.0]);
        let r = mvg_check(&eye, &b, &eye).unwrap();
        assert!(r.max_residual < 1e-12);
        assert_eq!(r.u, eye);
        let mut rng = RngStream::new(4, 0);
        let a = t(2, 2, &rng.normals(4));
        let c = t(2, 2, &rng.normals(4));
        assert!(mvg_check(&a, &b, &c).unwrap().max_residual < 1e-10);
        let da = t(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let dc = t(2, 2, &[0.5, 0.0, 0.0, 4.0]);
        let r = mvg_check(&da, &b, &dc).unwrap();
        assert_eq!(r.u.data(), &[4.0, 0.0, 0.0, 9.0]);
        assert_eq!(r.v.data(), &[0.25, 0.0, 0.0, 16.0]);
    }

    #[test]
    fn local_product_reproduces_forward_pass() {
        let mut rng = RngStream::new(5, 0);
        let dims = [3, 8, 8, 2];
        let layers: Vec<Tensor> = dims
            .windows(2)
            .map(|w| t(w[1], w[0] + 1, &rng.normals(w[1] * (w[0] + 1))))
            .collect();
        for _ in 0..20 {
            let x = rng.normals(3);
            let act = Activation::leaky();
            let p = local_product_matrix(&layers, act, &x).unwrap();
            let f = mlp_forward(&layers, act, OutputHead::Linear, &t(1, 3, &x)).unwrap();
            let out = f.last().unwrap();
            for r in 0..2 {
                let px: f64 = p.row(r)[..3]
                    .iter()
                    .zip(&x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + p.row(r)[3];
                assert!((px - out.get2(0, r)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identity_activation_gives_plain_product() {
        let w1 = t(2, 3, &[1.0, 2.0, 0.5, -1.0, 0.0, 1.0]);
        let w2 = t(1, 3, &[3.0, -2.0, 0.25]);
        let p = local_product_matrix(
            &[w1.clone(), w2.clone()],
            Activation::Identity,
            &[0.4, -0.2],
        )
        .unwrap();
        let mut w1_aug = w1.data().to_vec();
        w1_aug.extend_from_slice(&[0.0, 0.0, 1.0]);
        let plain = w2.matmul(&t(3, 3, &w1_aug)).unwrap();
        assert_eq!(p, plain);
    }

    #[test]
    fn mc_converges_at_root_n() {
        let mut rng = RngStream::new(6, 0);
        let s = LayerStack::random(&[2, 2, 2], (0.3, 1.0), &mut rng).unwrap();
        let exact = analytic_cov_recursive(&s).unwrap();
        let err = |n: usize, seed: u64| {
            let mut errs: Vec<f64> = (0..8)
                .flat_map(|k| {
                    let mc = mc_cov(&s, n, &mut RngStream::new(seed, k)).unwrap();
                    mc.table
                        .data()
                        .iter()
                        .zip(exact.data())
                        .map(|(a, b)| (a - b).abs())
                        .collect::<Vec<_>>()
                })
                .collect();
            errs.sort_by(f64::total_cmp);
            errs[errs.len() / 2]
        };
        let ratio = err(2_000, 7) / err(32_000, 8);
        assert!((2.0..8.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn csv_dump_has_one_row_per_element() {
        let mut buf = Vec::new();
        write_samples_csv(&[Tensor::identity(2)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("sample,element,value\n0,0,1e0"));
    }
}
