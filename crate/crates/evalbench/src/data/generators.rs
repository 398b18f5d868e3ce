use std::f64::consts::PI;

use super::{Dataset, Targets};
use crate::error::{invalid, Result};
use crate::numcore::{RngStream, Tensor};

/// Input bands of the toy regression problem, small cluster first.
pub const TOY_BANDS: [(f64, f64); 3] = [(-1.2, -0.8), (0.0, 0.5), (1.0, 1.5)];

/// Per-class retention ratios for the unbalanced 10-class recipe.
pub const UNBALANCED_RATIOS: [f64; 10] = [1.0, 0.5, 0.5, 0.2, 0.2, 0.2, 0.1, 0.1, 0.01, 0.01];

/// `y = max(0, x) · (|x|^{3/2} + sin(20x) / 4)`.
pub fn toy_target(x: f64) -> f64 {
    x.max(0.0) * (x.abs().powf(1.5) + (20.0 * x).sin() / 4.0)
}

/// Noiseless 1-d regression data, `cluster_sizes[k]` points drawn
/// uniformly inside band `k` of [`TOY_BANDS`].
pub fn toy_regression(cluster_sizes: [usize; 3], rng: &mut RngStream) -> Result<Dataset> {
    if cluster_sizes.contains(&0) {
        return Err(invalid("cluster sizes must be positive"));
    }
    let mut xs = Vec::new();
    for ((lo, hi), &n) in TOY_BANDS.iter().zip(&cluster_sizes) {
        for _ in 0..n {
            xs.push(lo + (hi - lo) * rng.uniform());
        }
    }
    let ys = xs.iter().map(|&x| toy_target(x)).collect();
    let n = xs.len();
    Dataset::regression(Tensor::matrix(n, 1, xs)?, ys, "toy-regression")
}

/// Two interleaving half circles; outer arc is class 0.
pub fn two_moons(n: usize, noise_std: f64, rng: &mut RngStream) -> Result<Dataset> {
    if n < 2 {
        return Err(invalid("two_moons needs at least two points"));
    }
    let n_out = n / 2;
    let n_in = n - n_out;
    let arc = |k: usize, m: usize| {
        if m > 1 {
            PI * k as f64 / (m - 1) as f64
        } else {
            0.0
        }
    };
    let mut rows = Vec::with_capacity(n);
    for k in 0..n_out {
        let t = arc(k, n_out);
        rows.push(([t.cos(), t.sin()], 0));
    }
    for k in 0..n_in {
        let t = arc(k, n_in);
        rows.push(([1.0 - t.cos(), 0.5 - t.sin()], 1));
    }
    rng.shuffle(&mut rows);
    let mut x = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (p, y) in rows {
        x.push(p[0] + noise_std * rng.normal());
        x.push(p[1] + noise_std * rng.normal());
        labels.push(y);
    }
    Dataset::classification(Tensor::matrix(n, 2, x)?, labels, 2, "two-moons")
}

/// `C` isotropic unit-variance Gaussian classes in `d` dimensions; class `c`
/// is centred at `separation · e_{c mod d}`. Rows are shuffled.
pub fn blobs(
    n_per_class: usize,
    c: usize,
    d: usize,
    separation: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    if c < 2 || d < 1 || n_per_class == 0 {
        return Err(invalid(
            "blobs needs C >= 2, d >= 1 and a positive class size",
        ));
    }
    let mut labels: Vec<usize> = (0..c)
        .flat_map(|k| std::iter::repeat_n(k, n_per_class))
        .collect();
    rng.shuffle(&mut labels);
    let mut x = Vec::with_capacity(labels.len() * d);
    for &y in &labels {
        for j in 0..d {
            let centre = if j == y % d { separation } else { 0.0 };
            x.push(centre + rng.normal());
        }
    }
    let n = labels.len();
    Dataset::classification(Tensor::matrix(n, d, x)?, labels, c, "blobs")
}

/// Replaces a `label_noise_frac` share of labels with uniform random
/// classes, then keeps about `ratios[c]` of each class. Retained rows keep
/// their original order and features.
pub fn unbalance_and_noise(
    data: &Dataset,
    ratios: &[f64],
    label_noise_frac: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    let (labels, c) = match data.targets() {
        Targets::Classes { labels, n_classes } => (labels.clone(), *n_classes),
        Targets::Regression(_) => return Err(invalid("unbalancing needs class labels")),
    };
    if ratios.len() != c {
        return Err(invalid(format!("{} ratios for {c} classes", ratios.len())));
    }
    if ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
        return Err(invalid("ratios must lie in (0, 1]"));
    }
    if !(0.0..=1.0).contains(&label_noise_frac) {
        return Err(invalid("label noise fraction must lie in [0, 1]"));
    }
    let mut labels = labels;
    let n_noisy = (label_noise_frac * labels.len() as f64).round() as usize;
    let perm = rng.permutation(labels.len());
    for &i in &perm[..n_noisy] {
        labels[i] = rng.below(c);
    }
    let mut keep = Vec::new();
    for class in 0..c {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let k = (ratios[class] * members.len() as f64).round() as usize;
        if k == 0 {
            return Err(invalid(format!(
                "ratio {} keeps no examples of class {class} ({} present)",
                ratios[class],
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        keep.extend_from_slice(&members[..k]);
    }
    keep.sort_unstable();
    let relabelled = data.with_targets(Targets::Classes {
        labels,
        n_classes: c,
    });
    let mut out = relabelled.subset(&keep);
    out.provenance = format!("{}+unbalanced", data.provenance);
    Ok(out)
}
