//! Masked autoregressive conditioner (MADE).
//!
//! One dense pass maps `x` to a block of pseudo-parameters per dimension.
//! Binary masks on every weight matrix make the block of dimension `t`
//! depend only on the dimensions that precede `t` in the layer's order.
//!
//! Orders are 0-based permutations: `order[k]` is the dimension visited
//! `k`-th, and that dimension carries degree `k + 1`.

use rand::Rng;

use crate::diffgraph::{Graph, ParamId, ParamStore, Tensor, Value};
use crate::error::{Error, Result};
use crate::stablemath::{self, SOFTPLUS_INV_ONE};
use crate::transformer::TransformerKind;

/// Half-width of the uniform weight distribution used by [`MadeConditioner::identity_init`].
pub const INIT_SCALE: f64 = 1e-3;
/// Half-width of the fixed spread of sigmoid locations at initialization.
///
/// Units that start with equal parameters receive equal gradients, and a
/// dimension without inputs would keep them equal forever (a DSF with equal
/// units is affine). A spread of 0.5 keeps the initial map within 0.05 of
/// the identity on [-3, 3].
pub const LOCATION_SPREAD: f64 = 0.5;

/// Offset of location `j` of `n`, evenly spaced on `[-LOCATION_SPREAD, LOCATION_SPREAD]`.
pub fn location_spread(j: usize, n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    LOCATION_SPREAD * (2.0 * j as f64 / (n - 1) as f64 - 1.0)
}

/// Degrees and masks of a MADE network.
///
/// `degrees[0]` labels the inputs, `degrees[1..=H]` the hidden layers and the
/// last entry the outputs. `masks[l]` has shape `(fan_in, fan_out)` and
/// multiplies the weight matrix mapping layer `l` to layer `l + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub degrees: Vec<Vec<usize>>,
    pub masks: Vec<Tensor>,
}

impl MaskSet {
    /// Boolean reachability from input `j` to output `t` through the masks.
    pub fn reachable(&self) -> Vec<Vec<bool>> {
        let m = self.degrees[0].len();
        let mut reach: Vec<Vec<bool>> = (0..m).map(|j| (0..m).map(|k| j == k).collect()).collect();
        for mask in &self.masks {
            let (fan_in, fan_out) = (mask.shape()[0], mask.shape()[1]);
            reach = reach
                .iter()
                .map(|row| {
                    (0..fan_out)
                        .map(|o| (0..fan_in).any(|i| row[i] && mask.data()[i * fan_out + o] != 0.0))
                        .collect()
                })
                .collect();
        }
        reach
    }
}

fn check_order(m: usize, order: &[usize]) -> Result<()> {
    let mut seen = vec![false; m];
    if order.len() != m {
        return Err(Error::domain(format!("order has {} entries for {m} dimensions", order.len())));
    }
    for &o in order {
        if o >= m || seen[o] {
            return Err(Error::domain(format!("order {order:?} is not a permutation of 0..{m}")));
        }
        seen[o] = true;
    }
    Ok(())
}

/// The order `0, 1, ..., m-1`, reversed when `reversed` is set.
pub fn natural_order(m: usize, reversed: bool) -> Vec<usize> {
    if reversed {
        (0..m).rev().collect()
    } else {
        (0..m).collect()
    }
}

/// Builds degrees and masks for `m` dimensions.
///
/// Hidden units get degrees `1, 2, ..., m-1, 1, 2, ...` in turn (all 1 when
/// `m = 1`). A connection into a hidden unit of degree `k` is allowed from
/// degree `<= k`; a connection into the output of the dimension at degree `t`
/// is allowed only from degree `< t`.
pub fn build_masks(m: usize, hidden_sizes: &[usize], order: &[usize]) -> Result<MaskSet> {
    if m == 0 {
        return Err(Error::domain("a conditioner needs at least one dimension"));
    }
    if hidden_sizes.contains(&0) {
        return Err(Error::domain("hidden layer sizes must be positive"));
    }
    check_order(m, order)?;

    let mut input_deg = vec![0; m];
    for (k, &dim) in order.iter().enumerate() {
        input_deg[dim] = k + 1;
    }
    let mut degrees = vec![input_deg.clone()];
    for &h in hidden_sizes {
        let cycle = (m - 1).max(1);
        degrees.push((0..h).map(|k| k % cycle + 1).collect());
    }
    degrees.push(input_deg);

    let last = degrees.len() - 1;
    let masks = (0..last)
        .map(|l| {
            let (from, to) = (&degrees[l], &degrees[l + 1]);
            let data = from
                .iter()
                .flat_map(|&a| {
                    to.iter().map(move |&b| {
                        let allowed = if l + 1 == last { a < b } else { a <= b };
                        if allowed {
                            1.0
                        } else {
                            0.0
                        }
                    })
                })
                .collect();
            Tensor::new(vec![from.len(), to.len()], data).expect("sizes match")
        })
        .collect();
    Ok(MaskSet { degrees, masks })
}

/// Conditioner outputs for one input: `m` blocks of `width` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoParams {
    pub width: usize,
    pub data: Vec<f64>,
}

impl PseudoParams {
    pub fn dims(&self) -> usize {
        self.data.len() / self.width
    }

    /// Block of dimension `t` (natural index, not order position).
    pub fn block(&self, t: usize) -> &[f64] {
        &self.data[t * self.width..(t + 1) * self.width]
    }
}

/// MADE network whose output layer holds one pseudo-parameter block per
/// dimension. Hidden layers use `tanh`.
#[derive(Debug, Clone)]
pub struct MadeConditioner {
    m: usize,
    hidden: Vec<usize>,
    kind: TransformerKind,
    order: Vec<usize>,
    masks: Vec<Tensor>,
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
    offset: Tensor,
}

impl MadeConditioner {
    /// Registers zero-valued parameters under `prefix` in `store`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        m: usize,
        hidden: &[usize],
        kind: TransformerKind,
        order: Vec<usize>,
    ) -> Result<Self> {
        kind.validate()?;
        let mask_set = build_masks(m, hidden, &order)?;
        let width = kind.pseudo_width();

        // expand the per-dimension output mask to whole blocks
        let mut masks = mask_set.masks;
        let out = masks.pop().expect("output mask");
        let fan_in = out.shape()[0];
        let expanded: Vec<f64> = out
            .data()
            .chunks(m)
            .flat_map(|row| row.iter().flat_map(|&v| std::iter::repeat_n(v, width)))
            .collect();
        masks.push(Tensor::new(vec![fan_in, m * width], expanded)?);

        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, mask) in masks.iter().enumerate() {
            let shape = mask.shape();
            weights.push(store.register(format!("{prefix}made.w{l}"), Tensor::zeros(shape))?);
            biases.push(store.register(format!("{prefix}made.b{l}"), Tensor::zeros(&[shape[1]]))?);
        }

        let mut offset = vec![0.0; m * width];
        for t in 0..m {
            for slot in kind.softness_slots() {
                offset[t * width + slot.start..t * width + slot.end].fill(SOFTPLUS_INV_ONE);
            }
            for slot in kind.location_slots() {
                let n = slot.len();
                for (j, v) in offset[t * width + slot.start..t * width + slot.end].iter_mut().enumerate() {
                    *v = location_spread(j, n);
                }
            }
        }

        Ok(MadeConditioner {
            m,
            hidden: hidden.to_vec(),
            kind,
            order,
            masks,
            weights,
            biases,
            offset: Tensor::vector(offset),
        })
    }

    pub fn dims(&self) -> usize {
        self.m
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn kind(&self) -> TransformerKind {
        self.kind
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn width(&self) -> usize {
        self.kind.pseudo_width()
    }

    /// Total conditioner output width, `m * width`.
    pub fn output_width(&self) -> usize {
        self.m * self.width()
    }

    /// Weight and bias parameters, layer by layer.
    pub fn params(&self) -> Vec<ParamId> {
        self.weights.iter().zip(&self.biases).flat_map(|(&w, &b)| [w, b]).collect()
    }

    /// Fixed offset added to the raw outputs (nonzero on softness entries).
    pub fn offset(&self) -> &Tensor {
        &self.offset
    }

    /// Weights i.i.d. uniform on `[-INIT_SCALE, INIT_SCALE]`, biases zero.
    ///
    /// Together with the fixed offsets this puts `softplus(a) = 1`, uniform
    /// mixture weights and locations `b` spread over `[-0.5, 0.5]` at the
    /// origin of the output layer, so the transformer starts near the
    /// identity.
    pub fn identity_init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.init_uniform(store, rng, INIT_SCALE, 0.0);
    }

    /// Weights uniform on `[-weight_scale, weight_scale]`, biases on
    /// `[-bias_scale, bias_scale]`; masked entries are drawn too but never
    /// influence the output.
    pub fn init_uniform<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R, weight_scale: f64, bias_scale: f64) {
        for (&w, &b) in self.weights.iter().zip(&self.biases) {
            for v in store.value_mut(w).data_mut() {
                *v = uniform(rng, weight_scale);
            }
            for v in store.value_mut(b).data_mut() {
                *v = uniform(rng, bias_scale);
            }
        }
    }

    /// Batched forward pass: `x` is `(n, m)`, the result `(n, m, width)`.
    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, x: Value) -> Result<Value> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.m {
            return Err(Error::shape(
                "conditioner",
                format!("expected input (n, {}), got {shape:?}", self.m),
            ));
        }
        let n = shape[0];
        let last = self.weights.len() - 1;
        let mut h = x;
        for l in 0..=last {
            let w = g.param(store, self.weights[l]);
            let mask = g.constant(self.masks[l].clone());
            let w = g.mul(w, mask)?;
            let b = g.param(store, self.biases[l]);
            let z = g.matmul(h, w)?;
            let z = g.add(z, b)?;
            h = if l < last { g.tanh(z)? } else { z };
        }
        let offset = g.constant(self.offset.clone());
        let out = g.add(h, offset)?;
        g.reshape(out, &[n, self.m, self.width()])
    }

    /// Pseudo-parameters for a single input vector.
    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<PseudoParams> {
        if let Some(bad) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("conditioner input {bad} is {}", x[bad])));
        }
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
        let out = self.forward_graph(&mut g, store, xv)?;
        Ok(PseudoParams {
            width: self.width(),
            data: g.data(out).data().to_vec(),
        })
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    if scale == 0.0 {
        0.0
    } else {
        rng.random_range(-scale..=scale)
    }
}

/// Row-wise `softmax(v + eta)`: `v` is `(rows, cols)`, `eta` has one entry
/// per column. Shifting the logits by `eta` is the same as rescaling each
/// exponentiated column by `exp(eta)` before normalizing.
pub fn apply_cwn(v: &Tensor, eta: &[f64]) -> Result<Vec<Vec<f64>>> {
    if v.shape().len() != 2 {
        return Err(Error::domain(format!("factorized weights must be a matrix, got shape {:?}", v.shape())));
    }
    crate::transformer::cwn_rows(v.data(), v.shape()[0], v.shape()[1], eta)
}

/// `softplus(a_pre)` of the softness entries of one block.
pub fn softness(kind: TransformerKind, block: &[f64]) -> Vec<f64> {
    kind.softness_slots()
        .into_iter()
        .flat_map(|r| block[r].to_vec())
        .map(stablemath::softplus)
        .collect()
}
