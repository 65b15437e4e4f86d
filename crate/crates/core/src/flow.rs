//! Autoregressive flow layers, stacks, densities and sampling.
//!
//! A layer maps `x` to `y` with `y_t = tau(c(x_<t), x_t)` in one conditioner
//! pass. A stack composes layers, alternating natural and reversed variable
//! orders, and pairs them with a base distribution. The same forward map
//! serves both directions:
//!
//! - density estimation: data `x` is pushed towards the base,
//!   `log p(x) = log p_base(f(x)) + sum logdet`, and samples come from
//!   inverting the layers;
//! - energy fitting: base noise is pushed forward to samples,
//!   `log q(f(x)) = log p_base(x) - sum logdet`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioner::{natural_order, MadeConditioner, PseudoParams};
use crate::diffgraph::{Graph, ParamId, ParamStore, SerializedTensor, Tensor, Value};
use crate::error::{Error, Result};
use crate::transformer::{
    affine_graph, ddsf_layer_dims, ddsf_graph, dsf_graph, AffineKind, AffineParams, DdsfParams, DsfParams,
    ScalarTransformer, TransformerKind,
};

/// Rows per graph when evaluating large batches.
pub const EVAL_CHUNK: usize = 512;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Base distribution of a stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Base {
    StandardNormal,
    Uniform,
}

impl Base {
    pub fn log_density(&self, z: &[f64]) -> f64 {
        match self {
            Base::StandardNormal => -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * LN_2PI,
            Base::Uniform => {
                if z.iter().all(|v| (0.0..=1.0).contains(v)) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, m: usize) -> Vec<f64> {
        match self {
            Base::StandardNormal => (0..m).map(|_| StandardNormal.sample(rng)).collect(),
            Base::Uniform => (0..m).map(|_| rng.random::<f64>()).collect(),
        }
    }

    /// Per-row base log-density on the graph; `z` is `(n, m)`, result `(n)`.
    pub fn log_density_graph(&self, g: &mut Graph, z: Value) -> Result<Value> {
        let shape = g.shape(z).to_vec();
        match self {
            Base::StandardNormal => {
                let sq = g.square(z)?;
                let s = g.sum_axis(sq, 1)?;
                let s = g.mul_scalar(s, -0.5)?;
                g.add_scalar(s, -0.5 * shape[1] as f64 * LN_2PI)
            }
            Base::Uniform => {
                if let Some(i) = g.data(z).data().iter().position(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::numeric(
                        "uniform base",
                        format!("row {} lies outside the unit cube", i / shape[1]),
                    ));
                }
                Ok(g.constant(Tensor::zeros(&[shape[0]])))
            }
        }
    }
}

/// Which way the stack was trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Data is mapped to noise (maximum likelihood).
    #[default]
    Density,
    /// Noise is mapped to samples (energy fitting).
    Energy,
}

/// One autoregressive layer: a conditioner and the transformer it drives.
#[derive(Debug, Clone)]
pub struct FlowLayer {
    made: MadeConditioner,
    kind: TransformerKind,
    v_u: Vec<ParamId>,
    v_w: Vec<ParamId>,
}

impl FlowLayer {
    fn new(store: &mut ParamStore, index: usize, m: usize, hidden: &[usize], kind: TransformerKind, order: Vec<usize>) -> Result<Self> {
        let prefix = format!("layer{index}.");
        let made = MadeConditioner::new(store, &prefix, m, hidden, kind, order)?;
        let mut v_u = Vec::new();
        let mut v_w = Vec::new();
        if let TransformerKind::Ddsf { d, layers } = kind {
            for l in 0..layers {
                let (i, h, o) = ddsf_layer_dims(d, layers, l);
                v_u.push(store.register(format!("{prefix}ddsf.v_u{l}"), Tensor::zeros(&[h, i]))?);
                v_w.push(store.register(format!("{prefix}ddsf.v_w{l}"), Tensor::zeros(&[o, h]))?);
            }
        }
        Ok(FlowLayer { made, kind, v_u, v_w })
    }

    pub fn kind(&self) -> TransformerKind {
        self.kind
    }

    pub fn order(&self) -> &[usize] {
        self.made.order()
    }

    pub fn conditioner(&self) -> &MadeConditioner {
        &self.made
    }

    /// Batched layer map; `x` is `(n, m)`. Returns `y (n, m)` and the
    /// per-dimension log-derivatives `(n, m)`.
    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, x: Value) -> Result<(Value, Value)> {
        let block = self.made.forward_graph(g, store, x)?;
        let shape = g.shape(x).to_vec();
        let (n, m) = (shape[0], shape[1]);
        match self.kind {
            TransformerKind::AffineExp | TransformerKind::AffineGate => {
                let mu = g.slice(block, 2, 0, 1)?;
                let mu = g.reshape(mu, &[n, m])?;
                let s = g.slice(block, 2, 1, 1)?;
                let s = g.reshape(s, &[n, m])?;
                let k = if self.kind == TransformerKind::AffineExp { AffineKind::Exp } else { AffineKind::Gate };
                affine_graph(g, x, mu, s, k)
            }
            TransformerKind::Dsf { d } => {
                let w_pre = g.slice(block, 2, 0, d)?;
                let a_pre = g.slice(block, 2, d, d)?;
                let b = g.slice(block, 2, 2 * d, d)?;
                dsf_graph(g, x, w_pre, a_pre, b)
            }
            TransformerKind::Ddsf { d, .. } => {
                let v_u: Vec<Value> = self.v_u.iter().map(|&id| g.param(store, id)).collect();
                let v_w: Vec<Value> = self.v_w.iter().map(|&id| g.param(store, id)).collect();
                ddsf_graph(g, x, block, &v_u, &v_w, d)
            }
        }
    }

    /// Resolves the scalar transformer of dimension `t` from a conditioner output.
    pub fn transformer(&self, store: &ParamStore, pseudo: &PseudoParams, t: usize) -> Result<ScalarTransformer> {
        let block = pseudo.block(t);
        Ok(match self.kind {
            TransformerKind::AffineExp => ScalarTransformer::Affine(
                AffineParams {
                    mu: block[0],
                    sigma_pre: block[1],
                },
                AffineKind::Exp,
            ),
            TransformerKind::AffineGate => ScalarTransformer::Affine(
                AffineParams {
                    mu: block[0],
                    sigma_pre: block[1],
                },
                AffineKind::Gate,
            ),
            TransformerKind::Dsf { d } => {
                ScalarTransformer::Dsf(DsfParams::from_pseudo(&block[..d], &block[d..2 * d], &block[2 * d..])?)
            }
            TransformerKind::Ddsf { d, .. } => {
                let v_u: Vec<Tensor> = self.v_u.iter().map(|&id| store.value(id).clone()).collect();
                let v_w: Vec<Tensor> = self.v_w.iter().map(|&id| store.value(id).clone()).collect();
                ScalarTransformer::Ddsf(DdsfParams::from_pseudo(block, &v_u, &v_w, d)?)
            }
        })
    }

    /// Inverts the layer for one output vector, visiting dimensions in the
    /// layer's order and recomputing the conditioner on the coordinates
    /// recovered so far.
    pub fn inverse(&self, store: &ParamStore, y: &[f64]) -> Result<Vec<f64>> {
        let mut x = vec![0.0; y.len()];
        for &t in self.made.order() {
            let pseudo = self.made.forward(store, &x)?;
            let tau = self.transformer(store, &pseudo, t)?;
            x[t] = tau.invert(y[t]).map_err(|e| e.within(format!("dimension {t}")))?;
        }
        Ok(x)
    }
}

/// Header entry describing one layer in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHeader {
    pub kind: String,
    pub order: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub l: Option<usize>,
}

/// Checkpoint file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub m: usize,
    pub hidden: Vec<usize>,
    pub layers: Vec<LayerHeader>,
    pub base: Base,
    #[serde(default)]
    pub direction: Direction,
    pub params: BTreeMap<String, SerializedTensor>,
}

/// Ordered layers, a base distribution and the parameters they share.
#[derive(Debug, Clone)]
pub struct FlowStack {
    m: usize,
    hidden: Vec<usize>,
    layers: Vec<FlowLayer>,
    base: Base,
    direction: Direction,
    store: ParamStore,
}

impl FlowStack {
    /// Builds a stack with zero parameters. Layer `i` uses the reversed
    /// order when `i` is odd.
    pub fn new(m: usize, hidden: &[usize], kinds: &[TransformerKind], base: Base) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::domain("a flow needs at least one layer"));
        }
        let orders = (0..kinds.len()).map(|i| natural_order(m, i % 2 == 1)).collect::<Vec<_>>();
        Self::with_orders(m, hidden, kinds, orders, base)
    }

    /// Builds a stack with explicit per-layer orders.
    pub fn with_orders(
        m: usize,
        hidden: &[usize],
        kinds: &[TransformerKind],
        orders: Vec<Vec<usize>>,
        base: Base,
    ) -> Result<Self> {
        if kinds.len() != orders.len() {
            return Err(Error::domain("one order per layer is required"));
        }
        let mut store = ParamStore::new();
        let layers = kinds
            .iter()
            .zip(orders)
            .enumerate()
            .map(|(i, (&kind, order))| FlowLayer::new(&mut store, i, m, hidden, kind, order))
            .collect::<Result<Vec<_>>>()?;
        Ok(FlowStack {
            m,
            hidden: hidden.to_vec(),
            layers,
            base,
            direction: Direction::Density,
            store,
        })
    }

    /// Identity-flow initialization of every conditioner.
    pub fn identity_init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for layer in &self.layers {
            layer.made.identity_init(&mut self.store, rng);
        }
    }

    pub fn dims(&self) -> usize {
        self.m
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    pub fn base(&self) -> Base {
        self.base
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn set_direction(&mut self, direction: Direction) {
        self.direction = direction;
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_dims(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.m {
            return Err(Error::domain(format!("expected {} coordinates, got {}", self.m, x.len())));
        }
        if let Some(bad) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("coordinate {bad} is {}", x[bad])));
        }
        Ok(())
    }

    /// Batched stack map; `x` is `(n, m)`. Returns `f(x)` and the summed
    /// log-derivatives `(n)`.
    pub fn forward_graph(&self, g: &mut Graph, x: Value) -> Result<(Value, Value)> {
        let mut h = x;
        let mut total: Option<Value> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, ld) = layer.forward_graph(g, &self.store, h).map_err(|e| e.within(format!("layer {i}")))?;
            let ld = g.sum_axis(ld, 1)?;
            total = Some(match total {
                None => ld,
                Some(t) => g.add(t, ld)?,
            });
            h = y;
        }
        Ok((h, total.expect("at least one layer")))
    }

    fn batch_tensor(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        for r in rows {
            self.check_dims(r)?;
        }
        Tensor::new(vec![rows.len(), self.m], rows.concat())
    }

    /// Evaluates `f` and its log-determinant for many points, in parallel
    /// over fixed-size chunks.
    pub fn forward_batch(&self, rows: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let parts = rows
            .par_chunks(EVAL_CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut g = Graph::new();
                let x = g.constant(self.batch_tensor(chunk)?);
                let (y, ld) = self
                    .forward_graph(&mut g, x)
                    .map_err(|e| e.within(format!("rows {}..", c * EVAL_CHUNK)))?;
                let ys: Vec<Vec<f64>> = g.data(y).data().chunks(self.m).map(<[f64]>::to_vec).collect();
                Ok((ys, g.data(ld).data().to_vec()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ys = Vec::with_capacity(rows.len());
        let mut lds = Vec::with_capacity(rows.len());
        for (y, l) in parts {
            ys.extend(y);
            lds.extend(l);
        }
        Ok((ys, lds))
    }

    /// `y` and `sum_t log dy_t/dx_t` of layer `i` at one point.
    pub fn layer_forward(&self, i: usize, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dims(x)?;
        let layer = self
            .layers
            .get(i)
            .ok_or_else(|| Error::domain(format!("no layer {i}")))?;
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(vec![1, self.m], x.to_vec())?);
        let (y, ld) = layer.forward_graph(&mut g, &self.store, xv)?;
        Ok((g.data(y).data().to_vec(), g.data(ld).data().iter().sum()))
    }

    /// Density of data `x` with `f` mapping data to the base.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_density_batch(std::slice::from_ref(&x.to_vec()))?[0])
    }

    pub fn log_density_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let (z, ld) = self.forward_batch(rows)?;
        Ok(z.iter().zip(ld).map(|(z, l)| self.base.log_density(z) + l).collect())
    }

    /// `f^{-1}(z)`: layers undone last to first.
    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(z)?;
        let mut x = z.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            x = layer
                .inverse(&self.store, &x)
                .map_err(|e| e.within(format!("layer {i}")))?;
        }
        Ok(x)
    }

    pub fn inverse_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.par_iter()
            .enumerate()
            .map(|(r, z)| self.inverse(z).map_err(|e| e.within(format!("sample {r}"))))
            .collect()
    }

    /// Draws `n` base points in row-major order.
    pub fn base_draws<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.base.sample(rng, self.m)).collect()
    }

    /// Samples by inverting the data-to-noise map on base draws.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        let z = self.base_draws(n, rng);
        self.inverse_batch(&z)
    }

    /// Noise-to-sample map: returns `y = f(x)` and `log q(y)`.
    pub fn transform_noise(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (y, ld) = self.forward_batch(std::slice::from_ref(&x.to_vec()))?;
        Ok((y[0].clone(), self.base.log_density(x) - ld[0]))
    }

    /// Samples from the model in whichever direction it was trained.
    pub fn model_sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        match self.direction {
            Direction::Density => self.sample(n, rng),
            Direction::Energy => {
                let z = self.base_draws(n, rng);
                Ok(self.forward_batch(&z)?.0)
            }
        }
    }

    /// Model log-density at sample-space points, in whichever direction the
    /// model was trained.
    pub fn model_log_prob(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        match self.direction {
            Direction::Density => self.log_density_batch(rows),
            Direction::Energy => {
                let x = self.inverse_batch(rows)?;
                let (_, ld) = self.forward_batch(&x)?;
                Ok(x.iter().zip(ld).map(|(x, l)| self.base.log_density(x) - l).collect())
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let (d, l) = match layer.kind {
                    TransformerKind::AffineExp | TransformerKind::AffineGate => (None, None),
                    TransformerKind::Dsf { d } => (Some(d), None),
                    TransformerKind::Ddsf { d, layers } => (Some(d), Some(layers)),
                };
                LayerHeader {
                    kind: layer.kind.name().to_string(),
                    order: layer.order().to_vec(),
                    d,
                    l,
                }
            })
            .collect();
        Checkpoint {
            version: 1,
            m: self.m,
            hidden: self.hidden.clone(),
            layers,
            base: self.base,
            direction: self.direction,
            params: self.store.to_serialized().into_iter().collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.version != 1 {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        let mut kinds = Vec::new();
        let mut orders = Vec::new();
        for h in &ck.layers {
            let kind = match (h.kind.as_str(), h.d, h.l) {
                ("affine-exp", _, _) => TransformerKind::AffineExp,
                ("affine-gate", _, _) => TransformerKind::AffineGate,
                ("dsf", Some(d), _) => TransformerKind::Dsf { d },
                ("ddsf", Some(d), Some(layers)) => TransformerKind::Ddsf { d, layers },
                _ => return Err(Error::Checkpoint(format!("bad layer header {h:?}"))),
            };
            kinds.push(kind);
            orders.push(h.order.clone());
        }
        let mut stack = Self::with_orders(ck.m, &ck.hidden, &kinds, orders, ck.base)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        stack.direction = ck.direction;
        stack.store.load_serialized(ck.params.iter())?;
        Ok(stack)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&ck)
    }
}
