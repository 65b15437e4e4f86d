//! Strictly increasing scalar transformers and their log-derivatives.
//!
//! Each transformer comes in two forms that share the same formulas:
//! a scalar form over plain `f64` (used for inversion, monotonicity and
//! log-det checks) and a batched form recorded on a [`Graph`] (used in the
//! training losses, so parameter gradients flow through the log-det).
//!
//! DSF and DDSF are evaluated entirely in log space. With
//! `C = a * x + b` and pre-logit `D = w . sigmoid(C)`:
//!
//! ```text
//! log D       = logsumexp_j(log w_j + logsigmoid(C_j))
//! log (1 - D) = logsumexp_j(log w_j + logsigmoid(-C_j))
//! y           = log D - log(1 - D)
//! log dy/dx   = -log D - log(1 - D)
//!               + logsumexp_j(log w_j + log a_j + logsigmoid(C_j) + logsigmoid(-C_j))
//! ```
//!
//! Computing `1 - D` as its own weighted sum keeps the logit finite even when
//! `D` is within rounding of 0 or 1. For DDSF each layer contributes a
//! log-Jacobian matrix and the layers are chained with the logarithmic matrix
//! product.

use serde::{Deserialize, Serialize};

use crate::diffgraph::{Graph, Tensor, Value};
use crate::error::{Error, Result};
use crate::stablemath::{self, log_matmul, logsigmoid, logsumexp_unchecked, LogMatrix};

/// Largest `|x|` the inversion bracket may reach.
pub const INVERT_LIMIT: f64 = 1e6;

const SIMPLEX_TOL: f64 = 1e-9;

/// How an affine transformer turns its scale pre-activation into `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AffineKind {
    /// `y = mu + exp(s) x`.
    Exp,
    /// `y = sigmoid(s) x + (1 - sigmoid(s)) mu`.
    Gate,
}

/// Transformer family of a flow layer, with its size hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TransformerKind {
    AffineExp,
    AffineGate,
    Dsf { d: usize },
    Ddsf { d: usize, layers: usize },
}

impl TransformerKind {
    /// Default DSF: 16 sigmoid units.
    pub const DSF: TransformerKind = TransformerKind::Dsf { d: 16 };
    /// Default DDSF: 16 units, two layers.
    pub const DDSF: TransformerKind = TransformerKind::Ddsf { d: 16, layers: 2 };

    pub fn validate(&self) -> Result<()> {
        match *self {
            TransformerKind::Dsf { d } if d == 0 => Err(Error::domain("DSF needs d >= 1")),
            TransformerKind::Ddsf { d, layers } if d == 0 || layers == 0 => {
                Err(Error::domain("DDSF needs d >= 1 and at least one layer"))
            }
            _ => Ok(()),
        }
    }

    /// Number of conditioner outputs per dimension.
    pub fn pseudo_width(&self) -> usize {
        match *self {
            TransformerKind::AffineExp | TransformerKind::AffineGate => 2,
            TransformerKind::Dsf { d } => 3 * d,
            TransformerKind::Ddsf { d, layers } => {
                (0..layers).map(|l| ddsf_layer_dims(d, layers, l)).map(|(i, h, _)| i + 3 * h).sum()
            }
        }
    }

    /// Offsets (within one dimension's pseudo-parameter block) of the
    /// entries that feed a softness `a` through softplus.
    pub fn softness_slots(&self) -> Vec<std::ops::Range<usize>> {
        match *self {
            TransformerKind::AffineExp | TransformerKind::AffineGate => Vec::new(),
            TransformerKind::Dsf { d } => vec![d..2 * d],
            TransformerKind::Ddsf { d, layers } => {
                let mut out = Vec::new();
                let mut off = 0;
                for l in 0..layers {
                    let (i, h, _) = ddsf_layer_dims(d, layers, l);
                    out.push(off + i..off + i + h);
                    off += i + 3 * h;
                }
                out
            }
        }
    }

    /// Offsets of the entries that feed a location `b`.
    pub fn location_slots(&self) -> Vec<std::ops::Range<usize>> {
        self.softness_slots().into_iter().map(|r| r.end..r.end + r.len()).collect()
    }

    pub fn name(&self) -> &'static str {
        match self {
            TransformerKind::AffineExp => "affine-exp",
            TransformerKind::AffineGate => "affine-gate",
            TransformerKind::Dsf { .. } => "dsf",
            TransformerKind::Ddsf { .. } => "ddsf",
        }
    }
}

/// `(input, hidden, output)` widths of DDSF layer `l` of `layers`.
pub fn ddsf_layer_dims(d: usize, layers: usize, l: usize) -> (usize, usize, usize) {
    let input = if l == 0 { 1 } else { d };
    let output = if l + 1 == layers { 1 } else { d };
    (input, d, output)
}

// ---------------------------------------------------------------------------
// scalar parameters
// ---------------------------------------------------------------------------

/// Location and scale pre-activation of an affine transformer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub mu: f64,
    pub sigma_pre: f64,
}

/// Deep sigmoidal flow parameters: simplex `w`, positive `a`, real `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DsfParams {
    w: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl DsfParams {
    pub fn new(w: Vec<f64>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let d = w.len();
        if d == 0 || a.len() != d || b.len() != d {
            return Err(Error::domain(format!(
                "DSF parameter lengths differ or are empty: w {}, a {}, b {}",
                d,
                a.len(),
                b.len()
            )));
        }
        if w.iter().any(|&v| !(v > 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::domain("DSF weights must be positive and sum to 1"));
        }
        if a.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::domain("DSF softness must be positive"));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("DSF biases must be finite"));
        }
        Ok(DsfParams { w, a, b })
    }

    /// Builds parameters without the validity checks; used to exercise the
    /// monotonicity check on corrupted parameters.
    pub fn new_unchecked(w: Vec<f64>, a: Vec<f64>, b: Vec<f64>) -> Self {
        DsfParams { w, a, b }
    }

    /// Activates conditioner outputs: `w = softmax(w_pre)`, `a = softplus(a_pre)`.
    pub fn from_pseudo(w_pre: &[f64], a_pre: &[f64], b: &[f64]) -> Result<Self> {
        let log_w = stablemath::logsoftmax(w_pre)?;
        DsfParams::new(
            log_w.iter().map(|v| v.exp()).collect(),
            a_pre.iter().map(|&v| stablemath::softplus(v)).collect(),
            b.to_vec(),
        )
    }

    /// Pre-logit form `sum_j w_j sigmoid((x - c_j) / t_j)` with centers `c`
    /// and temperatures `t`, i.e. `a = 1/t`, `b = -c/t`.
    pub fn from_centers(w: Vec<f64>, centers: &[f64], temperatures: &[f64]) -> Result<Self> {
        if centers.len() != temperatures.len() {
            return Err(Error::domain("centers and temperatures differ in length"));
        }
        if temperatures.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::domain("temperatures must be positive"));
        }
        let a: Vec<f64> = temperatures.iter().map(|t| 1.0 / t).collect();
        let b = centers.iter().zip(&a).map(|(c, a)| -c * a).collect();
        DsfParams::new(w, a, b)
    }

    /// Identity parameters: uniform `w`, `a = 1`, `b = 0`.
    pub fn identity(d: usize) -> Self {
        DsfParams {
            w: vec![1.0 / d as f64; d],
            a: vec![1.0; d],
            b: vec![0.0; d],
        }
    }

    pub fn d(&self) -> usize {
        self.w.len()
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// `D(x) = sum_j w_j sigmoid(a_j x + b_j)`, in `(0, 1)`.
    pub fn prelogit(&self, x: f64) -> f64 {
        self.w
            .iter()
            .zip(&self.a)
            .zip(&self.b)
            .map(|((w, a), b)| w * stablemath::sigmoid(a * x + b))
            .sum()
    }
}

/// One DDSF layer: `h' = logit(w . sigmoid(a * (u . h) + b))` with
/// row-stochastic `u` (hidden x input) and `w` (output x hidden).
#[derive(Debug, Clone, PartialEq)]
pub struct DdsfLayerParams {
    u: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
    a: Vec<f64>,
    b: Vec<f64>,
}

fn row_stochastic(name: &str, m: &[Vec<f64>], cols: usize) -> Result<()> {
    for row in m {
        if row.len() != cols
            || row.iter().any(|&v| !(v > 0.0))
            || (row.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL
        {
            return Err(Error::domain(format!("{name} must be row-stochastic with {cols} positive columns")));
        }
    }
    Ok(())
}

impl DdsfLayerParams {
    pub fn new(u: Vec<Vec<f64>>, w: Vec<Vec<f64>>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let hidden = a.len();
        if hidden == 0 || b.len() != hidden || u.len() != hidden || w.is_empty() {
            return Err(Error::domain("DDSF layer sizes are inconsistent"));
        }
        let input = u[0].len();
        row_stochastic("u", &u, input)?;
        row_stochastic("w", &w, hidden)?;
        if a.iter().any(|&v| !(v > 0.0) || !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("DDSF softness must be positive and biases finite"));
        }
        Ok(DdsfLayerParams { u, w, a, b })
    }

    /// Identity layer: uniform `u` and `w`, `a = 1`, `b = 0`.
    pub fn identity(input: usize, hidden: usize, output: usize) -> Self {
        DdsfLayerParams {
            u: vec![vec![1.0 / input as f64; input]; hidden],
            w: vec![vec![1.0 / hidden as f64; hidden]; output],
            a: vec![1.0; hidden],
            b: vec![0.0; hidden],
        }
    }

    pub fn input(&self) -> usize {
        self.u[0].len()
    }

    pub fn hidden(&self) -> usize {
        self.a.len()
    }

    pub fn output(&self) -> usize {
        self.w.len()
    }
}

/// A stack of DDSF layers mapping one scalar to one scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct DdsfParams {
    layers: Vec<DdsfLayerParams>,
}

impl DdsfParams {
    pub fn new(layers: Vec<DdsfLayerParams>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::domain("DDSF needs at least one layer"))?;
        if first.input() != 1 || layers.last().map(DdsfLayerParams::output) != Some(1) {
            return Err(Error::domain("DDSF must map one input to one output"));
        }
        for pair in layers.windows(2) {
            if pair[0].output() != pair[1].input() {
                return Err(Error::domain("DDSF layer widths do not chain"));
            }
        }
        Ok(DdsfParams { layers })
    }

    /// Identity-parameterized stack of `layers` layers with `d` hidden units.
    pub fn identity(d: usize, layers: usize) -> Self {
        DdsfParams {
            layers: (0..layers)
                .map(|l| {
                    let (i, h, o) = ddsf_layer_dims(d, layers, l);
                    DdsfLayerParams::identity(i, h, o)
                })
                .collect(),
        }
    }

    /// Activates one dimension's conditioner block against the statistical
    /// weights `v_u[l]` (hidden x input) and `v_w[l]` (output x hidden).
    pub fn from_pseudo(block: &[f64], v_u: &[Tensor], v_w: &[Tensor], d: usize) -> Result<Self> {
        let n_layers = v_u.len();
        let mut off = 0;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (input, hidden, output) = ddsf_layer_dims(d, n_layers, l);
            let eta_u = &block[off..off + input];
            let a_pre = &block[off + input..off + input + hidden];
            let b = &block[off + input + hidden..off + input + 2 * hidden];
            let eta_w = &block[off + input + 2 * hidden..off + input + 3 * hidden];
            off += input + 3 * hidden;
            let u = cwn_rows(v_u[l].data(), hidden, input, eta_u)?;
            let w = cwn_rows(v_w[l].data(), output, hidden, eta_w)?;
            let a = a_pre.iter().map(|&v| stablemath::softplus(v)).collect();
            layers.push(DdsfLayerParams::new(u, w, a, b.to_vec())?);
        }
        DdsfParams::new(layers)
    }

    pub fn layers(&self) -> &[DdsfLayerParams] {
        &self.layers
    }
}

/// Row-wise `softmax(v + eta)` with `eta` broadcast over rows.
pub(crate) fn cwn_rows(v: &[f64], rows: usize, cols: usize, eta: &[f64]) -> Result<Vec<Vec<f64>>> {
    if v.len() != rows * cols || eta.len() != cols {
        return Err(Error::domain(format!(
            "factorized weights {rows}x{cols} need {} entries and eta of length {cols}, got {} and {}",
            rows * cols,
            v.len(),
            eta.len()
        )));
    }
    v.chunks(cols)
        .map(|row| {
            let shifted: Vec<f64> = row.iter().zip(eta).map(|(a, b)| a + b).collect();
            Ok(stablemath::logsoftmax(&shifted)?.into_iter().map(f64::exp).collect())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// scalar forward passes
// ---------------------------------------------------------------------------

/// `(y, log dy/dx)` of an affine transformer.
pub fn affine_forward(x: f64, p: &AffineParams, kind: AffineKind) -> (f64, f64) {
    match kind {
        AffineKind::Exp => (p.mu + p.sigma_pre.exp() * x, p.sigma_pre),
        AffineKind::Gate => {
            let log_sigma = logsigmoid(p.sigma_pre);
            let sigma = log_sigma.exp();
            (sigma * x + (1.0 - sigma) * p.mu, log_sigma)
        }
    }
}

fn saturation(location: String, x: f64) -> Error {
    Error::Saturation {
        location,
        magnitude: x.abs(),
    }
}

/// `(y, log dy/dx)` of a DSF transformer.
pub fn dsf_forward(x: f64, p: &DsfParams) -> Result<(f64, f64)> {
    let d = p.d();
    let mut up = Vec::with_capacity(d);
    let mut down = Vec::with_capacity(d);
    let mut slope = Vec::with_capacity(d);
    for j in 0..d {
        let c = p.a[j] * x + p.b[j];
        let log_w = p.w[j].ln();
        let (ls, lns) = (logsigmoid(c), logsigmoid(-c));
        up.push(log_w + ls);
        down.push(log_w + lns);
        slope.push(log_w + p.a[j].ln() + ls + lns);
    }
    let log_d = logsumexp_unchecked(&up);
    let log_1md = logsumexp_unchecked(&down);
    if !log_d.is_finite() || !log_1md.is_finite() {
        return Err(saturation("DSF pre-logit".into(), x));
    }
    let y = log_d - log_1md;
    let logdet = logsumexp_unchecked(&slope) - log_d - log_1md;
    Ok((y, logdet))
}

/// `(y, log dy/dx)` of a DDSF transformer; the log-Jacobian of every layer is
/// chained with [`log_matmul`] and the final 1x1 entry is returned.
pub fn ddsf_forward(x: f64, p: &DdsfParams) -> Result<(f64, f64)> {
    let mut h = vec![x];
    let mut jac: Option<LogMatrix> = None;
    for (l, layer) in p.layers.iter().enumerate() {
        let hidden = layer.hidden();
        let mut ls = Vec::with_capacity(hidden);
        let mut lns = Vec::with_capacity(hidden);
        for k in 0..hidden {
            let pre: f64 = layer.u[k].iter().zip(&h).map(|(u, v)| u * v).sum();
            let c = layer.a[k] * pre + layer.b[k];
            ls.push(logsigmoid(c));
            lns.push(logsigmoid(-c));
        }
        let out = layer.output();
        let input = layer.input();
        let mut next = Vec::with_capacity(out);
        let mut local = Vec::with_capacity(out * input);
        let mut buf = vec![0.0; hidden];
        for i in 0..out {
            let log_w: Vec<f64> = layer.w[i].iter().map(|v| v.ln()).collect();
            for k in 0..hidden {
                buf[k] = log_w[k] + ls[k];
            }
            let log_d = logsumexp_unchecked(&buf);
            for k in 0..hidden {
                buf[k] = log_w[k] + lns[k];
            }
            let log_1md = logsumexp_unchecked(&buf);
            if !log_d.is_finite() || !log_1md.is_finite() {
                return Err(saturation(format!("DDSF layer {l} unit {i}"), x));
            }
            next.push(log_d - log_1md);
            for j in 0..input {
                for k in 0..hidden {
                    buf[k] = log_w[k] + ls[k] + lns[k] + layer.a[k].ln() + layer.u[k][j].ln();
                }
                local.push(logsumexp_unchecked(&buf) - log_d - log_1md);
            }
        }
        let local = LogMatrix::new(out, input, local)?;
        jac = Some(match jac {
            None => local,
            Some(prev) => log_matmul(&local, &prev)?,
        });
        h = next;
    }
    let jac = jac.expect("at least one layer");
    Ok((h[0], jac.get(0, 0)))
}

/// Scalar transformer with resolved parameters for one dimension.
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarTransformer {
    Affine(AffineParams, AffineKind),
    Dsf(DsfParams),
    Ddsf(DdsfParams),
}

impl ScalarTransformer {
    pub fn forward(&self, x: f64) -> Result<(f64, f64)> {
        if !x.is_finite() {
            return Err(Error::domain(format!("transformer input {x} is not finite")));
        }
        match self {
            ScalarTransformer::Affine(p, k) => Ok(affine_forward(x, p, *k)),
            ScalarTransformer::Dsf(p) => dsf_forward(x, p),
            ScalarTransformer::Ddsf(p) => ddsf_forward(x, p),
        }
    }

    /// Solves `forward(x).0 = y` by bracketed bisection.
    pub fn invert(&self, y: f64) -> Result<f64> {
        invert(y, |x| self.forward(x).map(|r| r.0), (y - 1.0, y + 1.0))
    }
}

/// Draws valid random parameters of `kind`, for property checks.
///
/// Pre-activations are drawn on the scale the conditioner produces in
/// training: `mu ~ N(0, 2^2)`, scale pre-activations in `[-2, 2]`, biases in
/// `[-3, 3]`, softmax logits `~ N(0, 1.5^2)`.
pub fn random_transformer<R: rand::Rng + ?Sized>(kind: TransformerKind, rng: &mut R) -> ScalarTransformer {
    use rand_distr::{Distribution, StandardNormal};
    fn gauss<R: rand::Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    }
    match kind {
        TransformerKind::AffineExp | TransformerKind::AffineGate => {
            let mu = gauss(rng, 2.0);
            let s = gauss(rng, 1.0).clamp(-2.0, 2.0);
            let k = if kind == TransformerKind::AffineExp { AffineKind::Exp } else { AffineKind::Gate };
            ScalarTransformer::Affine(AffineParams { mu, sigma_pre: s }, k)
        }
        TransformerKind::Dsf { d } => {
            let w_pre: Vec<f64> = (0..d).map(|_| gauss(rng, 1.5)).collect();
            let a_pre: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            ScalarTransformer::Dsf(DsfParams::from_pseudo(&w_pre, &a_pre, &b).expect("valid by construction"))
        }
        TransformerKind::Ddsf { d, layers } => {
            let width = kind.pseudo_width();
            let mut block: Vec<f64> = (0..width).map(|_| gauss(rng, 1.0)).collect();
            for slot in kind.softness_slots() {
                for v in &mut block[slot] {
                    *v = rng.random_range(-2.0..2.0);
                }
            }
            let mut v_u = Vec::new();
            let mut v_w = Vec::new();
            for l in 0..layers {
                let (i, h, o) = ddsf_layer_dims(d, layers, l);
                v_u.push(Tensor::new(vec![h, i], (0..h * i).map(|_| gauss(rng, 1.0)).collect()).unwrap());
                v_w.push(Tensor::new(vec![o, h], (0..o * h).map(|_| gauss(rng, 1.0)).collect()).unwrap());
            }
            ScalarTransformer::Ddsf(DdsfParams::from_pseudo(&block, &v_u, &v_w, d).expect("valid by construction"))
        }
    }
}

// ---------------------------------------------------------------------------
// inversion and monotonicity
// ---------------------------------------------------------------------------

/// Inverts a strictly increasing map by bisection.
///
/// The bracket grows geometrically from `hint` until `f(lo) <= y <= f(hi)`,
/// bounded by `|x| <= INVERT_LIMIT`. Bisection then runs until the bracket is
/// narrower than `1e-12` (relative to `|x|` beyond 1), or until it can no
/// longer be split in floating point.
pub fn invert(y: f64, f: impl Fn(f64) -> Result<f64>, hint: (f64, f64)) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::Range {
            target: y,
            limit: INVERT_LIMIT,
        });
    }
    let range_err = || Error::Range {
        target: y,
        limit: INVERT_LIMIT,
    };
    let (mut lo, mut hi) = if hint.0 < hint.1 { hint } else { (hint.1, hint.0) };
    lo = lo.clamp(-INVERT_LIMIT, INVERT_LIMIT);
    hi = hi.clamp(-INVERT_LIMIT, INVERT_LIMIT);
    if lo == hi {
        lo -= 1.0;
        hi += 1.0;
    }

    let mut step = (hi - lo).max(1.0);
    let mut f_lo = f(lo)?;
    while f_lo > y {
        if lo <= -INVERT_LIMIT {
            return Err(range_err());
        }
        hi = lo;
        lo = (lo - step).max(-INVERT_LIMIT);
        step *= 2.0;
        f_lo = f(lo)?;
    }
    let mut step = (hi - lo).max(1.0);
    let mut f_hi = f(hi)?;
    while f_hi < y {
        if hi >= INVERT_LIMIT {
            return Err(range_err());
        }
        lo = hi;
        hi = (hi + step).min(INVERT_LIMIT);
        step *= 2.0;
        f_hi = f(hi)?;
    }
    if f_lo == y {
        return Ok(lo);
    }
    if f_hi == y {
        return Ok(hi);
    }

    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= 1e-12 * mid.abs().max(1.0) {
            return Ok(mid);
        }
        let fm = f(mid)?;
        if fm == y {
            return Ok(mid);
        }
        if fm < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// True iff `f` is strictly increasing along `grid`, which must itself be
/// strictly increasing with at least two points.
pub fn check_monotone(f: impl Fn(f64) -> f64, grid: &[f64]) -> bool {
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return false;
    }
    let values: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
    values.windows(2).all(|w| w[1] > w[0])
}

// ---------------------------------------------------------------------------
// batched graph forms
// ---------------------------------------------------------------------------

/// Batched affine transformer; all inputs have shape `(n, m)`.
pub fn affine_graph(g: &mut Graph, x: Value, mu: Value, s_pre: Value, kind: AffineKind) -> Result<(Value, Value)> {
    match kind {
        AffineKind::Exp => {
            let scale = g.exp(s_pre)?;
            let sx = g.mul(scale, x)?;
            let y = g.add(mu, sx)?;
            Ok((y, s_pre))
        }
        AffineKind::Gate => {
            let log_sigma = g.logsigmoid(s_pre)?;
            let sigma = g.exp(log_sigma)?;
            // y = mu + sigma * (x - mu)
            let diff = g.sub(x, mu)?;
            let scaled = g.mul(sigma, diff)?;
            let y = g.add(mu, scaled)?;
            Ok((y, log_sigma))
        }
    }
}

// `units` pre-logits per (sample, dimension) pair, laid out row-major.
fn check_saturation(
    g: &Graph,
    log_d: Value,
    log_1md: Value,
    x: &[f64],
    m: usize,
    units: usize,
    what: &str,
) -> Result<()> {
    for (idx, (a, b)) in g.data(log_d).data().iter().zip(g.data(log_1md).data()).enumerate() {
        if !a.is_finite() || !b.is_finite() {
            let pair = idx / units;
            let (row, dim) = (pair / m, pair % m);
            return Err(saturation(format!("{what}, sample {row}, dimension {dim}"), x[pair]));
        }
    }
    Ok(())
}

/// Batched DSF transformer: `x` is `(n, m)`, pseudo-parameters `(n, m, d)`.
/// Returns `y` and the per-dimension log-derivative, both `(n, m)`.
pub fn dsf_graph(g: &mut Graph, x: Value, w_pre: Value, a_pre: Value, b: Value) -> Result<(Value, Value)> {
    let shape = g.shape(x).to_vec();
    let (n, m) = (shape[0], shape[1]);
    let x3 = g.reshape(x, &[n, m, 1])?;
    let log_w = g.logsoftmax(w_pre, 2)?;
    let a = g.softplus(a_pre)?;
    let log_a = g.log(a)?;
    let ax = g.mul(a, x3)?;
    let c = g.add(ax, b)?;
    let ls = g.logsigmoid(c)?;
    let neg_c = g.neg(c)?;
    let lns = g.logsigmoid(neg_c)?;

    let up = g.add(log_w, ls)?;
    let log_d = g.logsumexp(up, 2)?;
    let down = g.add(log_w, lns)?;
    let log_1md = g.logsumexp(down, 2)?;
    let xs = g.data(x).data().to_vec();
    check_saturation(g, log_d, log_1md, &xs, m, 1, "DSF pre-logit")?;
    let y = g.sub(log_d, log_1md)?;

    let s1 = g.add(log_w, log_a)?;
    let s2 = g.add(ls, lns)?;
    let slope = g.add(s1, s2)?;
    let log_slope = g.logsumexp(slope, 2)?;
    let norm = g.add(log_d, log_1md)?;
    let logdet = g.sub(log_slope, norm)?;
    Ok((y, logdet))
}

/// Batched DDSF transformer. `x` is `(n, m)`; `block` is the `(n, m, P)`
/// conditioner output for this transformer; `v_u[l]`, `v_w[l]` are the
/// factorized statistical weights of each layer.
pub fn ddsf_graph(
    g: &mut Graph,
    x: Value,
    block: Value,
    v_u: &[Value],
    v_w: &[Value],
    d: usize,
) -> Result<(Value, Value)> {
    let shape = g.shape(x).to_vec();
    let (n, m) = (shape[0], shape[1]);
    let rows = n * m;
    let width = g.shape(block)[2];
    let flat = g.reshape(block, &[rows, width])?;
    let xs = g.data(x).data().to_vec();
    let n_layers = v_u.len();

    let mut h = g.reshape(x, &[rows, 1])?;
    let mut jac: Option<Value> = None;
    let mut off = 0;
    for l in 0..n_layers {
        let (input, hidden, output) = ddsf_layer_dims(d, n_layers, l);
        let eta_u = g.slice(flat, 1, off, input)?;
        let a_pre = g.slice(flat, 1, off + input, hidden)?;
        let b = g.slice(flat, 1, off + input + hidden, hidden)?;
        let eta_w = g.slice(flat, 1, off + input + 2 * hidden, hidden)?;
        off += input + 3 * hidden;

        // u = softmax_rows(v_u + eta_u): (rows, hidden, input)
        let eta_u = g.reshape(eta_u, &[rows, 1, input])?;
        let vu = g.reshape(v_u[l], &[1, hidden, input])?;
        let u_pre = g.add(vu, eta_u)?;
        let log_u = g.logsoftmax(u_pre, 2)?;
        let u = g.exp(log_u)?;
        let h3 = g.reshape(h, &[rows, 1, input])?;
        let uh = g.mul(u, h3)?;
        let pre = g.sum_axis(uh, 2)?;

        let a = g.softplus(a_pre)?;
        let log_a = g.log(a)?;
        let apre = g.mul(a, pre)?;
        let c = g.add(apre, b)?;
        let ls = g.logsigmoid(c)?;
        let neg_c = g.neg(c)?;
        let lns = g.logsigmoid(neg_c)?;

        // w = softmax_rows(v_w + eta_w): (rows, output, hidden)
        let eta_w = g.reshape(eta_w, &[rows, 1, hidden])?;
        let vw = g.reshape(v_w[l], &[1, output, hidden])?;
        let w_pre = g.add(vw, eta_w)?;
        let log_w = g.logsoftmax(w_pre, 2)?;

        let ls3 = g.reshape(ls, &[rows, 1, hidden])?;
        let lns3 = g.reshape(lns, &[rows, 1, hidden])?;
        let up = g.add(log_w, ls3)?;
        let log_d = g.logsumexp(up, 2)?;
        let down = g.add(log_w, lns3)?;
        let log_1md = g.logsumexp(down, 2)?;
        check_saturation(g, log_d, log_1md, &xs, m, output, &format!("DDSF layer {l}"))?;
        h = g.sub(log_d, log_1md)?;

        // local log-Jacobian (rows, output, input)
        let t = g.add(ls, lns)?;
        let t = g.add(t, log_a)?;
        let t = g.reshape(t, &[rows, 1, hidden])?;
        let left = g.add(log_w, t)?;
        let local = g.log_matmul(left, log_u)?;
        let norm = g.add(log_d, log_1md)?;
        let norm = g.reshape(norm, &[rows, output, 1])?;
        let local = g.sub(local, norm)?;
        jac = Some(match jac {
            None => local,
            Some(prev) => g.log_matmul(local, prev)?,
        });
    }
    let y = g.reshape(h, &[n, m])?;
    let logdet = g.reshape(jac.expect("at least one layer"), &[n, m])?;
    Ok((y, logdet))
}
