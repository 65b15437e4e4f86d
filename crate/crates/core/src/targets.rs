//! Toy targets: Gaussian grids, a four-mode energy and a sine-wave
//! frequency posterior.
//!
//! Each target evaluates its log-density both on plain slices and on a
//! [`Graph`], the latter so that energy fitting can differentiate through
//! `log p_target(y)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use crate::diffgraph::{Graph, Tensor, Value};
use crate::error::{Error, Result};
use crate::stablemath::logsumexp_unchecked;

/// Names accepted by [`by_name`].
pub const REGISTRY: [&str; 5] = ["grid-k2", "grid-k5", "grid-k10", "four-mode", "sine-posterior"];

/// Component standard deviation of the registry grids.
pub const GRID_SD: f64 = 0.5;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Observation noise variance of the sine model.
pub const SINE_VARIANCE: f64 = 0.125;
/// Scale of the quadratic barrier outside the prior support.
pub const SINE_BARRIER: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
enum Density {
    /// Equal-weight isotropic mixture. `normalized = false` drops every
    /// constant and leaves `logsumexp_k(-|y - mu_k|^2 / (2 sd^2))`.
    Mixture {
        means: Vec<Vec<f64>>,
        sd: f64,
        normalized: bool,
    },
    /// Uniform prior on `[lo, hi]` times a Gaussian likelihood of
    /// `y_i = sin(2 pi f t_i) + noise`.
    Sine {
        t: Vec<f64>,
        y: Vec<f64>,
        variance: f64,
        lo: f64,
        hi: f64,
    },
}

/// A named target density or energy.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    name: String,
    dim: usize,
    density: Density,
    exact_sampler: bool,
    modes: Option<Vec<Vec<f64>>>,
}

impl TargetSpec {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modes(&self) -> Option<&[Vec<f64>]> {
        self.modes.as_deref()
    }

    pub fn has_sampler(&self) -> bool {
        self.exact_sampler
    }

    /// Whether `log_density` includes its normalizing constant.
    pub fn is_normalized(&self) -> bool {
        matches!(self.density, Density::Mixture { normalized: true, .. })
    }

    /// Constants that define the target, for run configs.
    pub fn describe(&self) -> serde_json::Value {
        match &self.density {
            Density::Mixture { means, sd, normalized } => json!({
                "name": self.name,
                "family": "isotropic gaussian mixture",
                "means": means,
                "sd": sd,
                "normalized": normalized,
            }),
            Density::Sine { t, y, variance, lo, hi } => json!({
                "name": self.name,
                "family": "sine frequency posterior",
                "t": t,
                "y": y,
                "variance": variance,
                "prior": [lo, hi],
                "barrier": SINE_BARRIER,
                "modes": self.modes,
            }),
        }
    }

    pub fn log_density(&self, y: &[f64]) -> f64 {
        match &self.density {
            Density::Mixture { means, sd, normalized } => {
                let terms: Vec<f64> = means
                    .iter()
                    .map(|mu| -mu.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (2.0 * sd * sd))
                    .collect();
                let lse = logsumexp_unchecked(&terms);
                if *normalized {
                    lse - (means.len() as f64).ln() - self.dim as f64 * (sd.ln() + 0.5 * LN_2PI)
                } else {
                    lse
                }
            }
            Density::Sine { t, y: obs, variance, lo, hi } => {
                let f = y[0];
                let loglik: f64 = t
                    .iter()
                    .zip(obs)
                    .map(|(&ti, &yi)| {
                        let r = yi - (2.0 * std::f64::consts::PI * f * ti).sin();
                        -r * r / (2.0 * variance) - 0.5 * (LN_2PI + variance.ln())
                    })
                    .sum();
                let dist = (lo - f).max(0.0) + (f - hi).max(0.0);
                loglik - (hi - lo).ln() - SINE_BARRIER * dist * dist
            }
        }
    }

    /// Batched log-density: `y` is `(n, dim)`, the result `(n)`.
    pub fn log_density_graph(&self, g: &mut Graph, y: Value) -> Result<Value> {
        let shape = g.shape(y).to_vec();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::shape(
                "target log-density",
                format!("expected (n, {}), got {shape:?}", self.dim),
            ));
        }
        let n = shape[0];
        match &self.density {
            Density::Mixture { means, sd, normalized } => {
                let k = means.len();
                let mu = g.constant(Tensor::new(vec![1, k, self.dim], means.concat())?);
                let y3 = g.reshape(y, &[n, 1, self.dim])?;
                let diff = g.sub(y3, mu)?;
                let sq = g.square(diff)?;
                let dist = g.sum_axis(sq, 2)?;
                let terms = g.mul_scalar(dist, -1.0 / (2.0 * sd * sd))?;
                let lse = g.logsumexp(terms, 1)?;
                if *normalized {
                    g.add_scalar(lse, -(k as f64).ln() - self.dim as f64 * (sd.ln() + 0.5 * LN_2PI))
                } else {
                    Ok(lse)
                }
            }
            Density::Sine { t, y: obs, variance, lo, hi } => {
                let f = g.reshape(y, &[n])?;
                let mut total = None;
                for (&ti, &yi) in t.iter().zip(obs) {
                    let arg = g.mul_scalar(f, 2.0 * std::f64::consts::PI * ti)?;
                    let s = g.sin(arg)?;
                    let r = g.add_scalar(s, -yi)?;
                    let r2 = g.square(r)?;
                    let term = g.mul_scalar(r2, -1.0 / (2.0 * variance))?;
                    total = Some(match total {
                        None => term,
                        Some(acc) => g.add(acc, term)?,
                    });
                }
                let loglik = total.expect("at least one observation");
                let below = g.mul_scalar(f, -1.0)?;
                let below = g.add_scalar(below, *lo)?;
                let below = g.relu(below)?;
                let above = g.add_scalar(f, -hi)?;
                let above = g.relu(above)?;
                let dist = g.add(below, above)?;
                let d2 = g.square(dist)?;
                let barrier = g.mul_scalar(d2, -SINE_BARRIER)?;
                let out = g.add(loglik, barrier)?;
                let c = -(t.len() as f64) * 0.5 * (LN_2PI + variance.ln()) - (hi - lo).ln();
                g.add_scalar(out, c)
            }
        }
    }

    /// Exact draws, when the target has a sampler.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        match &self.density {
            Density::Mixture { means, sd, .. } if self.exact_sampler => Ok((0..n)
                .map(|_| {
                    let mu = &means[rng.random_range(0..means.len())];
                    mu.iter()
                        .map(|&c| {
                            let z: f64 = StandardNormal.sample(rng);
                            c + sd * z
                        })
                        .collect()
                })
                .collect()),
            _ => Err(Error::domain(format!("target `{}` has no exact sampler", self.name))),
        }
    }
}

/// Equal-weight mixture of isotropic Gaussians with an exact sampler.
pub fn gaussian_mixture(name: &str, means: Vec<Vec<f64>>, sd: f64) -> Result<TargetSpec> {
    if means.is_empty() || !(sd > 0.0) {
        return Err(Error::domain("a mixture needs at least one component and sd > 0"));
    }
    let dim = means[0].len();
    if dim == 0 || means.iter().any(|m| m.len() != dim) {
        return Err(Error::domain("mixture means must share a positive dimension"));
    }
    Ok(TargetSpec {
        name: name.to_string(),
        dim,
        modes: Some(means.clone()),
        density: Density::Mixture {
            means,
            sd,
            normalized: true,
        },
        exact_sampler: true,
    })
}

/// `k x k` grid of equal-weight Gaussians with means evenly spaced over
/// `[-5, 5]^2` (endpoints included; a single mode sits at the origin).
pub fn gaussian_grid(k: usize, sd: f64) -> Result<TargetSpec> {
    if k == 0 {
        return Err(Error::domain("a Gaussian grid needs k >= 1"));
    }
    let axis: Vec<f64> = if k == 1 {
        vec![0.0]
    } else {
        (0..k).map(|i| -5.0 + 10.0 * i as f64 / (k - 1) as f64).collect()
    };
    let means = axis.iter().flat_map(|&a| axis.iter().map(move |&b| vec![a, b])).collect();
    gaussian_mixture(&format!("grid-k{k}"), means, sd)
}

/// Unnormalized 2-D energy with four modes at `(+-2, +-2)`, each an
/// isotropic Gaussian bump of sd 0.5.
pub fn four_mode_energy() -> TargetSpec {
    let means = vec![vec![-2.0, -2.0], vec![-2.0, 2.0], vec![2.0, -2.0], vec![2.0, 2.0]];
    TargetSpec {
        name: "four-mode".to_string(),
        dim: 2,
        modes: Some(means.clone()),
        density: Density::Mixture {
            means,
            sd: 0.5,
            normalized: false,
        },
        exact_sampler: false,
    }
}

/// Posterior over the frequency `f` of `y = sin(2 pi f t)` given three
/// zero observations at `t = 0, 5/6, 10/6`, noise variance 0.125 and a
/// uniform prior on `[0, 2]`. Outside the prior support the log-density
/// falls off as `-1e6 * distance^2` instead of jumping to `-inf`.
pub fn sine_posterior() -> TargetSpec {
    TargetSpec {
        name: "sine-posterior".to_string(),
        dim: 1,
        modes: Some(vec![vec![0.0], vec![0.6], vec![1.2], vec![1.8]]),
        density: Density::Sine {
            t: vec![0.0, 5.0 / 6.0, 10.0 / 6.0],
            y: vec![0.0; 3],
            variance: SINE_VARIANCE,
            lo: 0.0,
            hi: 2.0,
        },
        exact_sampler: false,
    }
}

/// Looks a target up by its registry name.
pub fn by_name(name: &str) -> Result<TargetSpec> {
    match name {
        "grid-k2" => gaussian_grid(2, GRID_SD),
        "grid-k5" => gaussian_grid(5, GRID_SD),
        "grid-k10" => gaussian_grid(10, GRID_SD),
        "four-mode" => Ok(four_mode_energy()),
        "sine-posterior" => Ok(sine_posterior()),
        _ => Err(Error::domain(format!(
            "unknown target `{name}`; available: {}",
            REGISTRY.join(", ")
        ))),
    }
}

/// Fraction of `samples` within Euclidean distance `radius` of each mode.
pub fn count_modes(samples: &[Vec<f64>], target: &TargetSpec, radius: f64) -> Result<Vec<f64>> {
    let modes = target
        .modes()
        .ok_or_else(|| Error::domain(format!("target `{}` declares no modes", target.name())))?;
    if !(radius > 0.0) {
        return Err(Error::domain("radius must be positive"));
    }
    if samples.is_empty() {
        return Ok(vec![0.0; modes.len()]);
    }
    let r2 = radius * radius;
    Ok(modes
        .iter()
        .map(|mode| {
            let hits = samples
                .iter()
                .filter(|s| s.iter().zip(mode).map(|(a, b)| (a - b).powi(2)).sum::<f64>() <= r2)
                .count();
            hits as f64 / samples.len() as f64
        })
        .collect())
}

/// Histogram of 1-D samples: `bins` equal-width counts over `[lo, hi]`;
/// values outside the window are dropped.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        if v >= lo && v <= hi {
            let i = (((v - lo) / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
    }
    counts
}

/// Centers of histogram bins that are local maxima and hold at least
/// `min_share` of the largest bin. A bin must exceed its right neighbour and
/// be no smaller than its left one, so a plateau yields one peak; end bins
/// compare with their single neighbour.
pub fn histogram_peaks(counts: &[usize], lo: f64, hi: f64, min_share: f64) -> Vec<f64> {
    let bins = counts.len();
    let width = (hi - lo) / bins as f64;
    let top = counts.iter().copied().max().unwrap_or(0) as f64;
    (0..bins)
        .filter(|&i| {
            let c = counts[i];
            let left = i == 0 || c >= counts[i - 1];
            let right = i + 1 == bins || c > counts[i + 1];
            left && right && c as f64 >= min_share * top && c > 0
        })
        .map(|i| lo + (i as f64 + 0.5) * width)
        .collect()
}
