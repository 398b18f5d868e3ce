//! Hyperspherical coordinates and the radial noise density.
//!
//! Angle convention: for `v ∈ R^D`, `φ_k = atan2(‖v_{k+1..D}‖, v_k)` for
//! `k = 1..D−2` (each in `[0, π]`) and the azimuth `φ_{D−1} = atan2(v_D, v_{D−1})`
//! in `(−π, π]`. The volume element is `r^{D−1} Π_k sin(φ_k)^{D−1−k}`.

use std::f64::consts::PI;

use statrs::function::gamma::ln_gamma;

use super::layer::MeanFieldLayer;
use super::sampling::Noise;
use crate::error::{invalid, Error, Result};
use crate::numcore::{RngStream, Tensor};

/// A point in hyperspherical coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperspherical {
    pub radius: f64,
    /// `D − 1` angles in the order documented at module level.
    pub angles: Vec<f64>,
}

impl Hyperspherical {
    pub fn dim(&self) -> usize {
        self.angles.len() + 1
    }

    fn validate(&self) -> Result<()> {
        if !(self.radius >= 0.0) {
            return Err(invalid(format!(
                "radius must be non-negative, got {}",
                self.radius
            )));
        }
        let n = self.angles.len();
        for (k, &a) in self.angles.iter().enumerate() {
            let ok = if k + 1 == n {
                (-PI..=PI).contains(&a)
            } else {
                (0.0..=PI).contains(&a)
            };
            if !ok {
                return Err(invalid(format!("angle {} = {a} is out of range", k + 1)));
            }
        }
        Ok(())
    }
}

pub fn cart_to_hyperspherical(v: &[f64]) -> Result<Hyperspherical> {
    let d = v.len();
    if d < 2 {
        return Err(invalid(
            "hyperspherical transform needs at least two dimensions",
        ));
    }
    let mut tails = vec![0.0; d];
    let mut acc = 0.0;
    for i in (0..d).rev() {
        acc += v[i] * v[i];
        tails[i] = acc;
    }
    if tails[0] == 0.0 {
        return Err(invalid("angles are undefined for the zero vector"));
    }
    let mut angles = Vec::with_capacity(d - 1);
    for k in 0..d - 2 {
        angles.push(tails[k + 1].sqrt().atan2(v[k]));
    }
    angles.push(v[d - 1].atan2(v[d - 2]));
    Ok(Hyperspherical {
        radius: tails[0].sqrt(),
        angles,
    })
}

pub fn hyperspherical_to_cart(p: &Hyperspherical) -> Vec<f64> {
    let d = p.dim();
    let mut out = Vec::with_capacity(d);
    let mut prefix = p.radius;
    for k in 0..d - 1 {
        out.push(prefix * p.angles[k].cos());
        prefix *= p.angles[k].sin();
    }
    out.push(prefix);
    out
}

/// `log r^{D−1} + Σ_k (D−1−k) log sin φ_k`: log-determinant of the map from
/// hyperspherical to Cartesian coordinates.
pub fn log_jacobian(p: &Hyperspherical) -> f64 {
    let d = p.dim();
    let mut v = (d as f64 - 1.0) * p.radius.ln();
    for (k, a) in p.angles.iter().enumerate().take(d.saturating_sub(2)) {
        v += (d - 2 - k) as f64 * a.sin().ln();
    }
    v
}

/// The radial noise density written in hyperspherical coordinates, in the
/// form used to derive the radial entropy:
///
/// `log[ r^{D−1} (2π)^{−½} e^{−r²/2} Π_k sin(φ_k)^{D−1−k} ]`.
///
/// This is not normalized over `(r, φ)`; pairing it with [`log_jacobian`]
/// gives `−½ log 2π − r²/2`, which is what makes the entropy closed-form.
pub fn radial_logpdf_hyperspherical(p: &Hyperspherical) -> Result<f64> {
    p.validate()?;
    Ok(log_jacobian(p) - 0.5 * (2.0 * PI).ln() - 0.5 * p.radius * p.radius)
}

/// Properly normalized density of radial noise over `(r, φ)`: a half-normal
/// radius times the uniform distribution on the sphere.
pub fn radial_logpdf_normalized(p: &Hyperspherical) -> Result<f64> {
    p.validate()?;
    let d = p.dim();
    let half_normal = 0.5 * (2.0 / PI).ln() - 0.5 * p.radius * p.radius;
    if d == 1 {
        return Ok(half_normal);
    }
    let angular: f64 = p
        .angles
        .iter()
        .enumerate()
        .take(d - 2)
        .map(|(k, a)| (d - 2 - k) as f64 * a.sin().ln())
        .sum();
    Ok(half_normal + angular - log_sphere_area(d))
}

/// `log S_D` with `S_D = 2 π^{D/2} / Γ(D/2)`, the surface area of the unit sphere in `R^D`.
pub fn log_sphere_area(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    2f64.ln() + h * PI.ln() - ln_gamma(h)
}

/// Monte Carlo expectation of the log radial prior density under a radial `q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialCrossEntropy {
    /// `(1/S) Σ log q_ε(T((w − μp)/σp))`: the parameter-dependent part.
    pub value: f64,
    pub value_se: f64,
    /// `value` with the dropped normalizer restored, i.e. the MC estimate of
    /// `E_q[log p(w)]` including `−log|J| − Σ log σp`.
    pub full: f64,
    pub full_se: f64,
}

/// Expected log density of a radial prior `(μp, σp)` under radial samples
/// from `q`, evaluated through the hyperspherical transform.
///
/// The Jacobian term of the change of variables does not depend on the
/// optimized parameters and is left out of `value`; `full` keeps it.
pub fn radial_prior_cross_entropy(
    q: &MeanFieldLayer,
    prior: &MeanFieldLayer,
    samples: usize,
    rng: &mut RngStream,
) -> Result<RadialCrossEntropy> {
    if samples == 0 {
        return Err(invalid("need at least one sample"));
    }
    let noises: Vec<Noise> = (0..samples).map(|_| Noise::radial(rng, q.dim())).collect();
    radial_prior_cross_entropy_with_noise(q, prior, &noises)
}

/// As [`radial_prior_cross_entropy`] with the radial draws supplied.
pub fn radial_prior_cross_entropy_with_noise(
    q: &MeanFieldLayer,
    prior: &MeanFieldLayer,
    noises: &[Noise],
) -> Result<RadialCrossEntropy> {
    if q.shape() != prior.shape() {
        return Err(Error::Dimension {
            context: "radial_prior_cross_entropy",
            expected: q.shape().to_vec(),
            actual: prior.shape().to_vec(),
        });
    }
    let (sq, sp) = (q.sigma(), prior.sigma());
    let log_sp: f64 = sp.data().iter().map(|s| s.ln()).sum();
    let mut vals = Vec::with_capacity(noises.len());
    let mut fulls = Vec::with_capacity(noises.len());
    for noise in noises {
        let z: Vec<f64> = (0..q.dim())
            .map(|i| {
                let w = q.mu().data()[i] + sq.data()[i] * noise.scaled[i];
                (w - prior.mu().data()[i]) / sp.data()[i]
            })
            .collect();
        let point = if z.len() == 1 {
            Hyperspherical {
                radius: z[0].abs(),
                angles: Vec::new(),
            }
        } else {
            cart_to_hyperspherical(&z)?
        };
        let v = radial_logpdf_hyperspherical(&point)?;
        vals.push(v);
        fulls.push(v - log_jacobian(&point) - log_sp);
    }
    let (value, value_se) = mean_se(&vals);
    let (full, full_se) = mean_se(&fulls);
    Ok(RadialCrossEntropy {
        value,
        value_se,
        full,
        full_se,
    })
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::NAN);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Density of `‖w − μ‖` for an isotropic `D`-dimensional Gaussian of scale `σ`:
/// `S_D (2πσ²)^{−D/2} r^{D−1} e^{−r²/2σ²}`.
pub fn gaussian_radius_pdf(r: f64, d: usize, sigma: f64) -> Result<f64> {
    if r < 0.0 || d == 0 || sigma <= 0.0 {
        return Err(invalid("gaussian_radius_pdf needs r ≥ 0, D ≥ 1, σ > 0"));
    }
    if r == 0.0 {
        return Ok(if d == 1 {
            (2.0 / (PI * sigma * sigma)).sqrt()
        } else {
            0.0
        });
    }
    let df = d as f64;
    let log = log_sphere_area(d) - 0.5 * df * (2.0 * PI * sigma * sigma).ln() + (df - 1.0) * r.ln()
        - r * r / (2.0 * sigma * sigma);
    Ok(log.exp())
}

/// Stationary point of [`gaussian_radius_pdf`]: `σ √(D − 1)`.
pub fn gaussian_radius_mode(d: usize, sigma: f64) -> f64 {
    sigma * ((d as f64) - 1.0).max(0.0).sqrt()
}

/// Tensor of radial-noise norms `‖(w − μ)/σ‖` for a batch of samples.
pub fn standardized_norms(layer: &MeanFieldLayer, samples: &[Tensor]) -> Vec<f64> {
    let sigma = layer.sigma();
    samples
        .iter()
        .map(|w| {
            w.data()
                .iter()
                .zip(layer.mu().data())
                .zip(sigma.data())
                .map(|((w, m), s)| ((w - m) / s).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}
