use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Largest pool accepted by [`enumerate_expectation`].
pub const MAX_ENUMERATION_POOL: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Plain mean over the acquired points.
    RTilde,
    Pure,
    Lure,
    /// Mean over the whole pool.
    Full,
}

impl Estimator {
    pub const WEIGHTED: [Estimator; 3] = [Estimator::RTilde, Estimator::Pure, Estimator::Lure];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::RTilde => "r-tilde",
            Estimator::Pure => "pure",
            Estimator::Lure => "lure",
            Estimator::Full => "full",
        }
    }

    /// Per-point weights `w_m` so that the estimate is `(1/M) Σ w_m L_m`.
    /// `qs` are the proposal masses at acquisition time and `n` the pool size.
    pub fn weights(self, qs: &[f64], n: usize) -> Result<Vec<f64>> {
        check(qs, n)?;
        match self {
            Estimator::RTilde => Ok(vec![1.0; qs.len()]),
            Estimator::Pure => Ok(pure_weights(qs, n)),
            Estimator::Lure => Ok(lure_weights(qs, n)),
            Estimator::Full => Err(invalid("the full-pool estimator has no trajectory weights")),
        }
    }

    /// Estimate from the losses of the acquired points.
    pub fn estimate(self, losses: &[f64], qs: &[f64], n: usize) -> Result<RiskEstimate> {
        if losses.len() != qs.len() {
            return Err(Error::Dimension {
                context: "trajectory losses",
                expected: vec![qs.len()],
                actual: vec![losses.len()],
            });
        }
        let w = self.weights(qs, n)?;
        let terms: Vec<f64> = w.iter().zip(losses).map(|(w, l)| w * l).collect();
        RiskEstimate::new(
            stable_sum(&terms) / losses.len() as f64,
            self,
            losses.len(),
            n,
        )
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r-tilde" | "rtilde" => Ok(Estimator::RTilde),
            "pure" => Ok(Estimator::Pure),
            "lure" => Ok(Estimator::Lure),
            "full" => Ok(Estimator::Full),
            _ => Err(invalid(format!("unknown estimator `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskEstimate {
    pub value: f64,
    pub estimator: Estimator,
    pub m: usize,
    pub n: usize,
}

impl RiskEstimate {
    fn new(value: f64, estimator: Estimator, m: usize, n: usize) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{estimator} estimate")));
        }
        Ok(Self {
            value,
            estimator,
            m,
            n,
        })
    }
}

fn check(qs: &[f64], n: usize) -> Result<()> {
    if qs.is_empty() {
        return Err(invalid("at least one acquired point is required"));
    }
    if qs.len() > n {
        return Err(invalid(format!(
            "{} acquisitions from a pool of {n}",
            qs.len()
        )));
    }
    if let Some(q) = qs.iter().find(|q| !(**q > 0.0 && **q <= 1.0)) {
        return Err(invalid(format!("proposal mass {q} outside (0, 1]")));
    }
    Ok(())
}

fn pure_weights(qs: &[f64], n: usize) -> Vec<f64> {
    let m_total = qs.len();
    let nf = n as f64;
    qs.iter()
        .enumerate()
        .map(|(i, q)| (1.0 / q + (m_total - i - 1) as f64) / nf)
        .collect()
}

fn lure_weights(qs: &[f64], n: usize) -> Vec<f64> {
    let m_total = qs.len();
    qs.iter()
        .enumerate()
        .map(|(i, &q)| {
            let m = i + 1;
            let left = n - m + 1;
            if m_total == n || q == 1.0 / left as f64 {
                return 1.0;
            }
            let nf = n as f64;
            1.0 + (nf - m_total as f64) / (nf - m as f64) * (1.0 / (left as f64 * q) - 1.0)
        })
        .collect()
}

/// Order-independent sum: sorted by value, then compensated.
pub fn stable_sum(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let mut sum = 0.0;
    let mut c = 0.0;
    for x in v {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Mean loss over the whole pool.
pub fn pool_risk(losses: &[f64]) -> f64 {
    stable_sum(losses) / losses.len() as f64
}

/// Exact first two moments of an estimator over all trajectories.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    /// Probability mass of all enumerated trajectories.
    pub total_probability: f64,
}

/// Walks every ordered `m`-subset of the pool. `rule(acquired, remaining)`
/// returns proposal masses aligned with `remaining`.
pub fn enumerate_moments<F>(
    pool_losses: &[f64],
    rule: F,
    m: usize,
    estimators: &[Estimator],
) -> Result<Vec<Moments>>
where
    F: Fn(&[usize], &[usize]) -> Result<Vec<f64>>,
{
    let n = pool_losses.len();
    if n > MAX_ENUMERATION_POOL {
        return Err(invalid(format!(
            "enumeration needs N <= {MAX_ENUMERATION_POOL}, got {n}"
        )));
    }
    if m == 0 || m > n {
        return Err(invalid(format!("M must lie in 1..={n}, got {m}")));
    }
    let mut leaves: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut acquired = Vec::with_capacity(m);
    let mut qs = Vec::with_capacity(m);
    let remaining: Vec<usize> = (0..n).collect();
    walk(
        pool_losses,
        &rule,
        m,
        estimators,
        &mut acquired,
        &mut qs,
        remaining,
        1.0,
        &mut leaves,
    )?;

    let probs: Vec<f64> = leaves.iter().map(|(p, _)| *p).collect();
    let total_probability = stable_sum(&probs);
    Ok((0..estimators.len())
        .map(|k| {
            let terms: Vec<f64> = leaves.iter().map(|(p, v)| p * v[k]).collect();
            let mean = stable_sum(&terms);
            let sq: Vec<f64> = leaves
                .iter()
                .map(|(p, v)| p * (v[k] - mean).powi(2))
                .collect();
            Moments {
                mean,
                variance: stable_sum(&sq),
                total_probability,
            }
        })
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn walk<F>(
    losses: &[f64],
    rule: &F,
    m: usize,
    estimators: &[Estimator],
    acquired: &mut Vec<usize>,
    qs: &mut Vec<f64>,
    remaining: Vec<usize>,
    prob: f64,
    leaves: &mut Vec<(f64, Vec<f64>)>,
) -> Result<()>
where
    F: Fn(&[usize], &[usize]) -> Result<Vec<f64>>,
{
    if acquired.len() == m {
        let l: Vec<f64> = acquired.iter().map(|&i| losses[i]).collect();
        let values = estimators
            .iter()
            .map(|e| match e {
                Estimator::Full => Ok(pool_risk(losses)),
                e => e.estimate(&l, qs, losses.len()).map(|r| r.value),
            })
            .collect::<Result<Vec<_>>>()?;
        leaves.push((prob, values));
        return Ok(());
    }
    let masses = rule(acquired, &remaining)?;
    super::proposal::check_masses(&masses, remaining.len())?;
    for (k, &idx) in remaining.iter().enumerate() {
        let mut rest = remaining.clone();
        rest.remove(k);
        acquired.push(idx);
        qs.push(masses[k]);
        walk(
            losses,
            rule,
            m,
            estimators,
            acquired,
            qs,
            rest,
            prob * masses[k],
            leaves,
        )?;
        acquired.pop();
        qs.pop();
    }
    Ok(())
}

/// Single-estimator form of [`enumerate_moments`].
pub fn enumerate_expectation<F>(
    pool_losses: &[f64],
    rule: F,
    m: usize,
    estimator: Estimator,
) -> Result<Moments>
where
    F: Fn(&[usize], &[usize]) -> Result<Vec<f64>>,
{
    Ok(enumerate_moments(pool_losses, rule, m, &[estimator])?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::RngStream;

    fn fixed(masses: Vec<f64>) -> impl Fn(&[usize], &[usize]) -> Result<Vec<f64>> {
        move |_acq: &[usize], rem: &[usize]| {
            let w: Vec<f64> = rem.iter().map(|&i| masses[i]).collect();
            let z: f64 = w.iter().sum();
            Ok(w.into_iter().map(|v| v / z).collect())
        }
    }

    fn uniform(_acq: &[usize], rem: &[usize]) -> Result<Vec<f64>> {
        Ok(vec![1.0 / rem.len() as f64; rem.len()])
    }

    #[test]
    fn r_tilde_examples() {
        let r = Estimator::RTilde.estimate(&[3.0], &[0.5], 4).unwrap();
        assert_eq!(r.value, 3.0);
        assert_eq!(
            Estimator::RTilde
                .estimate(&[2.5; 3], &[0.2, 0.3, 0.5], 5)
                .unwrap()
                .value,
            2.5
        );
        let e = enumerate_expectation(&[1.0, 3.0], fixed(vec![0.25, 0.75]), 1, Estimator::RTilde)
            .unwrap();
        assert!((e.mean - 2.5).abs() < 1e-15);
    }

    #[test]
    fn pure_two_point_cancellation() {
        let e = enumerate_expectation(&[1.0, 3.0], fixed(vec![0.25, 0.75]), 1, Estimator::Pure)
            .unwrap();
        assert!((e.mean - 2.0).abs() < 1e-15);
    }

    #[test]
    fn lure_full_pool_is_pool_mean() {
        let losses = [0.1, 0.7, 0.3, 1e-17];
        let qs = [0.4, 0.2, 0.9, 1.0];
        let order = [2, 0, 3, 1];
        let l: Vec<f64> = order.iter().map(|&i| losses[i]).collect();
        assert_eq!(
            Estimator::Lure.estimate(&l, &qs, 4).unwrap().value,
            pool_risk(&losses)
        );
        let e =
            enumerate_expectation(&[0.3, 9.0], fixed(vec![0.9, 0.1]), 2, Estimator::Lure).unwrap();
        assert!((e.mean - 4.65).abs() < 1e-15);
        assert!(e.variance < 1e-28);
    }

    #[test]
    fn lure_uniform_is_r_tilde() {
        let n = 49;
        let qs: Vec<f64> = (0..20).map(|i| 1.0 / (n - i) as f64).collect();
        let l: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        assert_eq!(
            Estimator::Lure.estimate(&l, &qs, n).unwrap().value,
            Estimator::RTilde.estimate(&l, &qs, n).unwrap().value
        );
    }

    #[test]
    fn zero_mass_is_rejected() {
        assert!(Estimator::Pure.estimate(&[1.0], &[0.0], 3).is_err());
        assert!(Estimator::Lure.estimate(&[1.0], &[0.0], 3).is_err());
        assert!(Estimator::Lure.estimate(&[1.0, 2.0], &[0.5], 3).is_err());
    }

    #[test]
    fn enumeration_guards() {
        assert!(enumerate_expectation(&[0.0; 9], uniform, 2, Estimator::Lure).is_err());
        assert!(enumerate_expectation(&[0.0; 3], uniform, 0, Estimator::Lure).is_err());
    }

    #[test]
    fn unbiased_on_random_instances() {
        let mut rng = RngStream::new(3, 0);
        let losses: Vec<f64> = (0..5).map(|_| rng.uniform() * 4.0).collect();
        let masses: Vec<f64> = (0..5).map(|_| 0.05 + rng.uniform()).collect();
        let truth = pool_risk(&losses);
        let all = enumerate_moments(&losses, fixed(masses), 3, &Estimator::WEIGHTED).unwrap();
        assert!((all[0].total_probability - 1.0).abs() < 1e-12);
        assert!((all[1].mean - truth).abs() < 1e-12);
        assert!((all[2].mean - truth).abs() < 1e-12);
        assert!((all[0].mean - truth).abs() > 1e-6);
    }

    #[test]
    fn loss_proportional_proposal() {
        let losses = [0.2, 0.5, 1.0, 2.0, 4.0];
        let all =
            enumerate_moments(&losses, fixed(losses.to_vec()), 3, &Estimator::WEIGHTED).unwrap();
        let truth = pool_risk(&losses);
        assert!(all[0].mean > truth + 1e-6);
        assert!(all[2].variance <= all[1].variance);
    }

    #[test]
    fn stable_sum_ignores_order() {
        let a = [1e16, 1.0, -1e16, 3.0, 1e-3];
        let b = [1e-3, 3.0, -1e16, 1.0, 1e16];
        assert_eq!(stable_sum(&a), stable_sum(&b));
        assert!((stable_sum(&a) - 4.001).abs() < 1e-12);
    }
}
