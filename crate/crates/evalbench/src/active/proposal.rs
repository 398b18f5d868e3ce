use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numcore::{RngStream, Tensor};

/// Default Boltzmann temperature over acquisition scores.
pub const DEFAULT_TEMPERATURE: f64 = 10_000.0;
pub const DEFAULT_EPSILON: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 1.0;
/// Floor on shifted Boltzmann exponents, about `1e-304` once exponentiated.
pub const MIN_LOG_WEIGHT: f64 = -700.0;

/// Acquisition proposal used while building a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProposalKind {
    Uniform,
    /// Softmax of `T · s_j` over model scores (BALD by default).
    Boltzmann {
        temperature: f64,
    },
    /// Greedy on total distance to the acquired set with probability `1 − ε`.
    EpsilonGreedy {
        epsilon: f64,
    },
    /// Softmax of `β ·` min-max normalized summed squared distances.
    DistanceBoltzmann {
        beta: f64,
    },
}

impl ProposalKind {
    pub fn needs_scores(&self) -> bool {
        matches!(self, ProposalKind::Boltzmann { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ProposalKind::Boltzmann { temperature } if !(temperature > 0.0) => {
                Err(invalid("temperature must be positive"))
            }
            ProposalKind::EpsilonGreedy { epsilon } if !(0.0..1.0).contains(&epsilon) => {
                Err(invalid("epsilon must lie in [0, 1)"))
            }
            ProposalKind::DistanceBoltzmann { beta } if !(beta > 0.0) => {
                Err(invalid("beta must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Masses over `remaining`. `scores` is aligned with `remaining` and is
    /// only read by score-based proposals.
    pub fn masses(
        &self,
        features: &Tensor,
        acquired: &[usize],
        remaining: &[usize],
        scores: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        match *self {
            ProposalKind::Uniform => uniform(remaining.len()),
            ProposalKind::Boltzmann { temperature } => {
                let s = scores.ok_or_else(|| invalid("boltzmann proposal needs scores"))?;
                boltzmann_proposal(s, temperature)
            }
            ProposalKind::EpsilonGreedy { epsilon } => {
                epsilon_greedy_proposal(features, acquired, remaining, epsilon)
            }
            ProposalKind::DistanceBoltzmann { beta } => {
                distance_boltzmann_proposal(features, acquired, remaining, beta)
            }
        }
    }

    /// Same masses as [`ProposalKind::masses`], reading distance totals from
    /// `sums` instead of recomputing them. `sums` must hold every acquired point.
    pub fn masses_from_sums(
        &self,
        sums: &DistanceSums,
        remaining: &[usize],
        scores: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        self.validate()?;
        let pick = |t: &[f64]| remaining.iter().map(|&j| t[j]).collect::<Vec<f64>>();
        match *self {
            ProposalKind::Uniform => uniform(remaining.len()),
            ProposalKind::Boltzmann { temperature } => {
                let s = scores.ok_or_else(|| invalid("boltzmann proposal needs scores"))?;
                boltzmann_proposal(s, temperature)
            }
            _ if sums.count == 0 => uniform(remaining.len()),
            ProposalKind::EpsilonGreedy { epsilon } => {
                let n_pool = sums.count + remaining.len();
                Ok(greedy_over_totals(&pick(&sums.euclidean), n_pool, epsilon))
            }
            ProposalKind::DistanceBoltzmann { beta } => {
                boltzmann_over_totals(&pick(&sums.squared), beta)
            }
        }
    }
}

fn uniform(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(invalid("no remaining points"));
    }
    Ok(vec![1.0 / n as f64; n])
}

/// `q_j = e^{T s_j} / Σ_k e^{T s_k}`, computed with a max shift. Shifted
/// exponents are floored at [`MIN_LOG_WEIGHT`] so no candidate underflows
/// to zero mass at large `T`.
pub fn boltzmann_proposal(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(invalid("no remaining points"));
    }
    if !(temperature > 0.0) {
        return Err(invalid("temperature must be positive"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid("scores must be finite"));
    }
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores
        .iter()
        .map(|s| (temperature * (s - m)).max(MIN_LOG_WEIGHT).exp())
        .collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / z).collect())
}

fn dist(features: &Tensor, a: usize, b: usize) -> f64 {
    features
        .row(a)
        .iter()
        .zip(features.row(b))
        .map(|(u, v)| (u - v).powi(2))
        .sum::<f64>()
}

/// Greedy choice of the candidate with the largest summed distance to the
/// acquired points. With pool size `N = |acquired| + |remaining|`, the
/// greedy point gets `1 − ε + ε/N` and every other candidate `ε/N`; these
/// masses are then renormalized over the remaining candidates.
pub fn epsilon_greedy_proposal(
    features: &Tensor,
    acquired: &[usize],
    remaining: &[usize],
    epsilon: f64,
) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(invalid("epsilon must lie in [0, 1)"));
    }
    if acquired.is_empty() {
        return uniform(remaining.len());
    }
    let n_pool = acquired.len() + remaining.len();
    let totals: Vec<f64> = remaining
        .iter()
        .map(|&j| acquired.iter().map(|&k| dist(features, k, j).sqrt()).sum())
        .collect();
    Ok(greedy_over_totals(&totals, n_pool, epsilon))
}

fn greedy_over_totals(totals: &[f64], n_pool: usize, epsilon: f64) -> Vec<f64> {
    let n_pool = n_pool as f64;
    let mut best = 0;
    for (i, &t) in totals.iter().enumerate() {
        if t > totals[best] {
            best = i;
        }
    }
    let mut w = vec![epsilon / n_pool; totals.len()];
    w[best] += 1.0 - epsilon;
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// Boltzmann weighting of `s_j = Σ_k ‖x_k − x_j‖²`, with the scores
/// min-max normalized to `[0, 1]` first. Uniform when nothing is acquired.
pub fn distance_boltzmann_proposal(
    features: &Tensor,
    acquired: &[usize],
    remaining: &[usize],
    beta: f64,
) -> Result<Vec<f64>> {
    if !(beta > 0.0) {
        return Err(invalid("beta must be positive"));
    }
    if acquired.is_empty() {
        return uniform(remaining.len());
    }
    let s: Vec<f64> = remaining
        .iter()
        .map(|&j| acquired.iter().map(|&k| dist(features, k, j)).sum())
        .collect();
    boltzmann_over_totals(&s, beta)
}

fn boltzmann_over_totals(s: &[f64], beta: f64) -> Result<Vec<f64>> {
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm: Vec<f64> = if hi > lo {
        s.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; s.len()]
    };
    boltzmann_proposal(&norm, beta)
}

/// Per-point distance totals to the acquired set, kept up to date one
/// acquisition at a time. Adds terms in acquisition order, so masses match
/// the direct proposals bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceSums {
    squared: Vec<f64>,
    euclidean: Vec<f64>,
    count: usize,
}

impl DistanceSums {
    pub fn new(n: usize) -> Self {
        Self {
            squared: vec![0.0; n],
            euclidean: vec![0.0; n],
            count: 0,
        }
    }

    pub fn add(&mut self, features: &Tensor, k: usize) {
        for j in 0..self.squared.len() {
            let d = dist(features, k, j);
            self.squared[j] += d;
            self.euclidean[j] += d.sqrt();
        }
        self.count += 1;
    }

    /// Number of points added so far.
    pub fn count(&self) -> usize {
        self.count
    }
}

/// Ordered acquisitions with the proposal mass each point had when chosen.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub indices: Vec<usize>,
    pub masses: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// First `m` acquisitions.
    pub fn prefix(&self, m: usize) -> Trajectory {
        Trajectory {
            indices: self.indices[..m].to_vec(),
            masses: self.masses[..m].to_vec(),
        }
    }
}

/// Index bookkeeping for sampling without replacement.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    n: usize,
    remaining: Vec<usize>,
    trajectory: Trajectory,
}

impl Pool {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            remaining: (0..n).collect(),
            trajectory: Trajectory::default(),
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn acquired(&self) -> &[usize] {
        &self.trajectory.indices
    }

    /// Unacquired indices in increasing order.
    pub fn remaining(&self) -> &[usize] {
        &self.remaining
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    /// Samples one remaining index from `masses` (aligned with
    /// [`Pool::remaining`]) and records it. Returns `(index, q)`.
    pub fn acquire(&mut self, masses: &[f64], rng: &mut RngStream) -> Result<(usize, f64)> {
        if self.remaining.is_empty() {
            return Err(invalid("pool exhausted"));
        }
        check_masses(masses, self.remaining.len())?;
        let k = rng.categorical(masses);
        Ok(self.take(k, masses[k]))
    }

    /// Moves the `k`-th remaining index to the trajectory with mass `q`.
    fn take(&mut self, k: usize, q: f64) -> (usize, f64) {
        let idx = self.remaining.remove(k);
        self.trajectory.indices.push(idx);
        self.trajectory.masses.push(q);
        (idx, q)
    }
}

pub(crate) fn check_masses(masses: &[f64], n: usize) -> Result<()> {
    if masses.len() != n {
        return Err(invalid(format!(
            "{} masses for {n} remaining points",
            masses.len()
        )));
    }
    if masses.iter().any(|q| !(*q > 0.0) || !q.is_finite()) {
        return Err(invalid("proposal masses must be positive"));
    }
    let total: f64 = masses.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("proposal masses sum to {total}")));
    }
    Ok(())
}
