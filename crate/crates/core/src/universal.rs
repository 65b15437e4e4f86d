//! Constructive approximation of monotone CDFs by steps and by sigmoids.
//!
//! For a strictly increasing `S` on `[r0, r1]` with `S(r0) = 0` and
//! `S(r1) = 1`, the step construction places `n` steps at the quantiles
//! `b_j = S^{-1}(j / (n + 1))` with heights `1/(n+1)` (the last one
//! `2/(n+1)`), which keeps `|S*_n - S| <= 1/(n+1)` everywhere. Replacing each
//! step by a sigmoid of temperature `tau = kappa / logit(1 - eps0)`, where
//! `kappa` is the smallest gap between steps, gives a DSF pre-logit that
//! stays within `3/(n+1)` of `S` for the default `eps0 = 1/(2(n+1))`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::stablemath::{logit, sigmoid};
use crate::transformer::{check_monotone, dsf_forward, invert, DsfParams};

/// Grid size used to check that a target is strictly increasing.
pub const MONOTONE_GRID: usize = 1001;
/// Absolute tolerance of numeric quantiles.
pub const INVERSE_TOL: f64 = 1e-12;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A strictly increasing map of `[r0, r1]` onto `[0, 1]`.
#[derive(Clone)]
pub struct MonotoneTarget {
    eval: ScalarFn,
    inverse: Option<ScalarFn>,
    r0: f64,
    r1: f64,
}

impl std::fmt::Debug for MonotoneTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MonotoneTarget")
            .field("r0", &self.r0)
            .field("r1", &self.r1)
            .field("analytic_inverse", &self.inverse.is_some())
            .finish()
    }
}

impl MonotoneTarget {
    /// Checks `S(r0) = 0`, `S(r1) = 1` (within 1e-9) and strict increase on
    /// a 1001-point grid. Without an analytic inverse, quantiles are found by
    /// bisection.
    pub fn new(
        eval: impl Fn(f64) -> f64 + Send + Sync + 'static,
        inverse: Option<ScalarFn>,
        r0: f64,
        r1: f64,
    ) -> Result<Self> {
        if !(r0 < r1) || !r0.is_finite() || !r1.is_finite() {
            return Err(Error::domain(format!("interval [{r0}, {r1}] is empty or unbounded")));
        }
        let (s0, s1) = (eval(r0), eval(r1));
        if s0.abs() > 1e-9 || (s1 - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("target maps the ends to {s0} and {s1}, not 0 and 1")));
        }
        let grid = even_grid(r0, r1, MONOTONE_GRID);
        if !check_monotone(&eval, &grid) {
            return Err(Error::domain("target is not strictly increasing (flat region detected)"));
        }
        Ok(MonotoneTarget {
            eval: Arc::new(eval),
            inverse,
            r0,
            r1,
        })
    }

    /// `x` on `[0, 1]`.
    pub fn identity() -> Self {
        let inv: ScalarFn = Arc::new(|y| y);
        Self::new(|x| x, Some(inv), 0.0, 1.0).expect("identity is valid")
    }

    /// CDF of the standard normal truncated to `[-r, r]`.
    pub fn truncated_normal(r: f64) -> Result<Self> {
        let phi = |x: f64| 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
        let (lo, hi) = (phi(-r), phi(r));
        Self::new(move |x| ((phi(x) - lo) / (hi - lo)).clamp(0.0, 1.0), None, -r, r)
    }

    /// `sum_k c_k sigmoid((x - m_k) / s_k)` rescaled to run from 0 to 1 on
    /// `[r0, r1]`; weights and scales must be positive.
    pub fn sigmoid_mixture(weights: &[f64], centers: &[f64], scales: &[f64], r0: f64, r1: f64) -> Result<Self> {
        if weights.is_empty()
            || weights.len() != centers.len()
            || weights.len() != scales.len()
            || weights.iter().chain(scales).any(|&v| !(v > 0.0))
        {
            return Err(Error::domain("sigmoid mixture needs matching positive weights and scales"));
        }
        let (w, c, s) = (weights.to_vec(), centers.to_vec(), scales.to_vec());
        let g = move |x: f64| -> f64 { (0..w.len()).map(|k| w[k] * sigmoid((x - c[k]) / s[k])).sum() };
        let (g0, g1) = (g(r0), g(r1));
        Self::new(move |x| ((g(x) - g0) / (g1 - g0)).clamp(0.0, 1.0), None, r0, r1)
    }

    /// Random strictly increasing target on `[r0, r1]` built from 1 to 4
    /// sigmoids.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, r0: f64, r1: f64) -> Result<Self> {
        let k = rng.random_range(1..=4);
        let span = r1 - r0;
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let c: Vec<f64> = (0..k).map(|_| rng.random_range(r0..r1)).collect();
        let s: Vec<f64> = (0..k).map(|_| span * rng.random_range(0.03..0.3)).collect();
        Self::sigmoid_mixture(&w, &c, &s, r0, r1)
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.eval)(x)
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.r0, self.r1)
    }

    /// Quantile `S^{-1}(y)` for `y` in `[0, 1]`.
    pub fn inverse(&self, y: f64) -> f64 {
        if let Some(inv) = &self.inverse {
            return inv(y);
        }
        let (mut lo, mut hi) = (self.r0, self.r1);
        while hi - lo > INVERSE_TOL {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.eval(mid) < y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

fn even_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

/// Steps `S*_n(x) = sum_j w_j 1{x >= b_j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepApprox {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl StepApprox {
    pub fn eval(&self, x: f64) -> f64 {
        self.w.iter().zip(&self.b).filter(|(_, &b)| x >= b).map(|(w, _)| w).sum()
    }
}

/// Quantile step construction with `n` steps.
pub fn build_step_approx(target: &MonotoneTarget, n: usize) -> Result<StepApprox> {
    if n == 0 {
        return Err(Error::domain("the step construction needs n >= 1"));
    }
    let levels = (n + 1) as f64;
    let b: Vec<f64> = (1..=n).map(|j| target.inverse(j as f64 / levels)).collect();
    if b.windows(2).any(|p| !(p[1] > p[0])) {
        return Err(Error::domain("quantiles coincide: the target is not invertible"));
    }
    // t_j = j/(n+1) for j < n, t_n = 1; w = S^{-1} t is the difference t_j - t_{j-1}
    let t: Vec<f64> = (0..=n).map(|j| if j == n { 1.0 } else { j as f64 / levels }).collect();
    let w = t.windows(2).map(|p| p[1] - p[0]).collect();
    Ok(StepApprox { w, b })
}

/// Smallest gap between the step locations.
pub fn min_gap(b: &[f64]) -> f64 {
    let mut sorted = b.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.windows(2).map(|p| p[1] - p[0]).fold(f64::INFINITY, f64::min)
}

/// Smooths the step construction into `sum_j w_j sigmoid((x - b_j) / tau)`
/// with `tau = kappa / logit(1 - eps0)`, returned as DSF parameters with
/// `a = 1 / tau` and bias `-b_j / tau`.
pub fn build_sigmoid_approx(target: &MonotoneTarget, n: usize, eps0: f64) -> Result<DsfParams> {
    if n < 2 {
        return Err(Error::domain("the sigmoid construction needs n >= 2"));
    }
    if !(eps0 > 0.0 && eps0 < 0.5) {
        return Err(Error::domain(format!("eps0 = {eps0} must lie in (0, 0.5)")));
    }
    let steps = build_step_approx(target, n)?;
    let kappa = min_gap(&steps.b);
    if !(kappa > 0.0) {
        return Err(Error::domain("duplicate step locations"));
    }
    let tau = kappa / logit(1.0 - eps0);
    DsfParams::from_centers(steps.w, &steps.b, &vec![tau; n])
}

/// The default `eps0 = 1 / (2 (n + 1))`.
pub fn default_eps0(n: usize) -> f64 {
    0.5 / (n + 1) as f64
}

/// Largest `|approx(x) - S(x)|` over `grid_size` evenly spaced points of
/// `[r0, r1]` (ends included).
pub fn certify(target: &MonotoneTarget, approx: impl Fn(f64) -> f64, grid_size: usize) -> Result<f64> {
    if grid_size < 101 {
        return Err(Error::domain(format!("certification grid of {grid_size} points is below 101")));
    }
    let (r0, r1) = target.bounds();
    Ok(even_grid(r0, r1, grid_size)
        .into_iter()
        .map(|x| (approx(x) - target.eval(x)).abs())
        .fold(0.0, f64::max))
}

/// Result of [`ks_demo`].
#[derive(Debug, Clone, PartialEq)]
pub struct KsReport {
    pub n: usize,
    pub samples: usize,
    pub statistic: f64,
}

/// Pushes logistic noise `logit(u)`, `u ~ U(0, 1)`, through the inverse of
/// the DSF transformer `logit(S_n(x))` built for `target`, and returns the
/// Kolmogorov-Smirnov distance between the resulting samples and `target`.
pub fn ks_demo(target: &MonotoneTarget, n: usize, samples: usize, seed: u64) -> Result<KsReport> {
    if samples == 0 {
        return Err(Error::domain("the demo needs at least one sample"));
    }
    let params = build_sigmoid_approx(target, n, default_eps0(n))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r0, r1) = target.bounds();
    let mid = 0.5 * (r0 + r1);
    let mut xs = (0..samples)
        .map(|_| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            invert(logit(u), |x| dsf_forward(x, &params).map(|r| r.0), (mid - 1.0, mid + 1.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    xs.sort_by(f64::total_cmp);
    let cdf = |x: f64| {
        if x <= r0 {
            0.0
        } else if x >= r1 {
            1.0
        } else {
            target.eval(x)
        }
    };
    let len = xs.len() as f64;
    let statistic = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / len).abs().max(((i + 1) as f64 / len - f).abs())
        })
        .fold(0.0, f64::max);
    Ok(KsReport { n, samples, statistic })
}
