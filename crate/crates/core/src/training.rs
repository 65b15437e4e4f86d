//! Losses for both KL directions, Adam, and the training loop.
//!
//! Both losses are Monte-Carlo estimates of an exclusive KL divergence:
//!
//! - `mle_loss`: `-(1/n) sum log p(x_i)` over data, the data-to-noise view;
//! - `energy_loss`: `(1/n) sum [log p_base(x_i) - logdet_i - log p_target(f(x_i))]`
//!   over base noise, the noise-to-target view. Unnormalized targets shift
//!   this by a constant.
//!
//! The loop splits each minibatch into fixed chunks that are differentiated
//! in parallel and reduced in chunk order, so results do not depend on the
//! number of worker threads.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffgraph::{Graph, ParamStore, Tensor, Value};
use crate::error::{Error, Result};
use crate::flow::{Direction, FlowStack};
use crate::targets::TargetSpec;

/// Rows per parallel gradient chunk.
pub const GRAD_CHUNK: usize = 64;

/// Which objective to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Mle,
    Energy,
}

/// Optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Global gradient-norm cap.
    pub grad_clip: Option<f64>,
    /// Decay of the parameter moving average; `None` disables it.
    pub polyak: Option<f64>,
    /// Energy fitting only: scale the target log-density by
    /// `min(1, (step + 1) / anneal)` so early steps see a flattened target.
    #[serde(default)]
    pub anneal: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Mle,
            steps: 1000,
            batch: 256,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            grad_clip: Some(10.0),
            polyak: None,
            anneal: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::domain(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::domain(format!("{name} = {b} must lie in [0, 1)")));
            }
        }
        if self.batch == 0 {
            return Err(Error::domain("batch size must be at least 1"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::domain("adam eps must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::domain("gradient clip must be positive"));
            }
        }
        if self.anneal == Some(0) {
            return Err(Error::domain("anneal length must be at least one step"));
        }
        if let Some(d) = self.polyak {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::domain("polyak decay must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

fn rows_tensor(stack: &FlowStack, rows: &[Vec<f64>]) -> Result<Tensor> {
    let m = stack.dims();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != m {
            return Err(Error::domain(format!("point {i} has {} coordinates, expected {m}", r.len())));
        }
    }
    Tensor::new(vec![rows.len(), m], rows.concat())
}

/// Per-point negative log-likelihoods `(n)` of data rows.
pub fn mle_terms(g: &mut Graph, stack: &FlowStack, batch: &[Vec<f64>]) -> Result<Value> {
    let x = g.constant(rows_tensor(stack, batch)?);
    let (z, logdet) = stack.forward_graph(g, x)?;
    let base = stack.base().log_density_graph(g, z)?;
    let lp = g.add(base, logdet)?;
    g.neg(lp)
}

/// Mean negative log-likelihood of `batch`.
pub fn mle_loss(g: &mut Graph, stack: &FlowStack, batch: &[Vec<f64>]) -> Result<Value> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let terms = mle_terms(g, stack, batch)?;
    g.mean(terms)
}

/// Per-sample terms `log p_base(x) - logdet - log p_target(f(x))` for given noise.
pub fn energy_terms(g: &mut Graph, stack: &FlowStack, target: &TargetSpec, noise: &[Vec<f64>]) -> Result<Value> {
    tempered_energy_terms(g, stack, target, noise, 1.0)
}

/// As [`energy_terms`] with the target log-density multiplied by `beta`.
pub fn tempered_energy_terms(
    g: &mut Graph,
    stack: &FlowStack,
    target: &TargetSpec,
    noise: &[Vec<f64>],
    beta: f64,
) -> Result<Value> {
    if target.dim() != stack.dims() {
        return Err(Error::domain(format!(
            "target `{}` has dimension {}, flow has {}",
            target.name(),
            target.dim(),
            stack.dims()
        )));
    }
    let x = g.constant(rows_tensor(stack, noise)?);
    let (y, logdet) = stack.forward_graph(g, x)?;
    let base = stack.base().log_density_graph(g, x)?;
    let lt = target.log_density_graph(g, y)?;
    if let Some(i) = g.data(lt).data().iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(
            "target energy",
            format!("sample {i} at {:?} has log-density {}", &g.data(y).data()[i * stack.dims()..(i + 1) * stack.dims()], g.data(lt).data()[i]),
        ));
    }
    let q = g.sub(base, logdet)?;
    let lt = if beta == 1.0 { lt } else { g.mul_scalar(lt, beta)? };
    g.sub(q, lt)
}

/// Exclusive-KL estimate on the given (frozen) noise.
pub fn energy_loss_with_noise(g: &mut Graph, stack: &FlowStack, target: &TargetSpec, noise: &[Vec<f64>]) -> Result<Value> {
    if noise.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let terms = energy_terms(g, stack, target, noise)?;
    g.mean(terms)
}

/// Exclusive-KL estimate on `n` fresh base draws from `seed`.
pub fn energy_loss(g: &mut Graph, n: usize, stack: &FlowStack, target: &TargetSpec, seed: u64) -> Result<Value> {
    let noise = stack.base_draws(n, &mut ChaCha8Rng::seed_from_u64(seed));
    energy_loss_with_noise(g, stack, target, &noise)
}

/// Adam moments and step counter, one slot per scalar parameter in
/// registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        AdamState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update from the gradients held in `store`.
/// Aborts before touching any value if a gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    for (_, p) in store.iter() {
        if p.grad.data().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    let mut k = 0;
    for id in ids {
        let grad = store.grad(id).data().to_vec();
        let values = store.value_mut(id).data_mut();
        for (x, g) in values.iter_mut().zip(grad) {
            state.m[k] = config.beta1 * state.m[k] + (1.0 - config.beta1) * g;
            state.v[k] = config.beta2 * state.v[k] + (1.0 - config.beta2) * g * g;
            let m_hat = state.m[k] / c1;
            let v_hat = state.v[k] / c2;
            *x -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
            k += 1;
        }
    }
    Ok(())
}

/// Rescales all gradients so that their joint Euclidean norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.flat_grad().iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for g in store.get_mut(id).grad.data_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

/// Exponential moving average of the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyak {
    pub decay: f64,
    pub shadow: Vec<f64>,
}

impl Polyak {
    pub fn new(store: &ParamStore, decay: f64) -> Self {
        Polyak {
            decay,
            shadow: store.flat_values(),
        }
    }

    pub fn update(&mut self, store: &ParamStore) {
        for (s, v) in self.shadow.iter_mut().zip(store.flat_values()) {
            *s = self.decay * *s + (1.0 - self.decay) * v;
        }
    }
}

/// Sums per-point loss terms over `rows` and leaves `d(sum)/d(theta) / n`
/// in the store's gradients. Returns the mean loss.
fn batch_gradient<F>(stack: &mut FlowStack, rows: &[Vec<f64>], terms: F) -> Result<f64>
where
    F: Fn(&mut Graph, &FlowStack, &[Vec<f64>]) -> Result<Value> + Sync,
{
    let n = rows.len();
    let frozen: &FlowStack = stack;
    let ids: Vec<_> = frozen.store().ids().collect();
    let parts = rows
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut g = Graph::new();
            let t = terms(&mut g, frozen, chunk).map_err(|e| e.within(format!("rows from {}", c * GRAD_CHUNK)))?;
            let total = g.sum(t)?;
            let grads = g.backward(total)?;
            let per_param: Vec<Option<Vec<f64>>> = ids.iter().map(|&id| grads.param(id)).collect();
            Ok((g.item(total)?, per_param))
        })
        .collect::<Result<Vec<_>>>()?;

    let store = stack.store_mut();
    store.zero_grad();
    let mut loss = 0.0;
    for (total, per_param) in parts {
        loss += total;
        for (&id, grad) in ids.iter().zip(per_param) {
            if let Some(grad) = grad {
                store.accumulate(id, &grad)?;
            }
        }
    }
    let scale = 1.0 / n as f64;
    for &id in &ids {
        for g in store.get_mut(id).grad.data_mut() {
            *g *= scale;
        }
    }
    Ok(loss * scale)
}

/// Training data or target.
#[derive(Debug, Clone, Copy)]
pub enum Source<'a> {
    Data(&'a [Vec<f64>]),
    Target(&'a TargetSpec),
}

/// One recorded optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub loss: f64,
}

/// Runs `config.steps` Adam steps and returns the loss recorded at each one
/// (evaluated before that step's update).
///
/// Data minibatches are drawn by shuffling without replacement, epoch by
/// epoch; energy fitting draws fresh base noise every step. When Polyak
/// averaging is enabled the averaged parameters are installed at the end.
pub fn fit(stack: &mut FlowStack, source: Source<'_>, config: &TrainConfig) -> Result<Vec<TracePoint>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::new(stack.store().numel());
    let mut ema = config.polyak.map(|d| Polyak::new(stack.store(), d));
    let mut trace = Vec::with_capacity(config.steps);

    match (config.loss, source) {
        (LossKind::Mle, Source::Data(data)) => {
            if data.is_empty() {
                return Err(Error::domain("no training rows"));
            }
            stack.set_direction(Direction::Density);
            let mut perm: Vec<usize> = (0..data.len()).collect();
            let mut cursor = data.len();
            let batch = config.batch.min(data.len());
            for step in 0..config.steps {
                let mut rows = Vec::with_capacity(batch);
                while rows.len() < batch {
                    if cursor == perm.len() {
                        perm.shuffle(&mut rng);
                        cursor = 0;
                    }
                    rows.push(data[perm[cursor]].clone());
                    cursor += 1;
                }
                let loss = batch_gradient(stack, &rows, mle_terms).map_err(|e| e.within(format!("step {step}")))?;
                update(stack, &mut state, config, ema.as_mut())?;
                trace.push(TracePoint { step, loss });
            }
        }
        (LossKind::Energy, Source::Target(target)) => {
            stack.set_direction(Direction::Energy);
            for step in 0..config.steps {
                let noise = stack.base_draws(config.batch, &mut rng);
                let beta = config.anneal.map_or(1.0, |a| ((step + 1) as f64 / a as f64).min(1.0));
                let loss = batch_gradient(stack, &noise, |g, s, rows| tempered_energy_terms(g, s, target, rows, beta))
                    .map_err(|e| e.within(format!("step {step}")))?;
                update(stack, &mut state, config, ema.as_mut())?;
                trace.push(TracePoint { step, loss });
            }
        }
        (LossKind::Mle, Source::Target(_)) => {
            return Err(Error::domain("maximum likelihood needs data rows"));
        }
        (LossKind::Energy, Source::Data(_)) => {
            return Err(Error::domain("energy fitting needs a target"));
        }
    }
    if let Some(ema) = ema {
        stack.store_mut().set_flat_values(&ema.shadow)?;
    }
    Ok(trace)
}

fn update(stack: &mut FlowStack, state: &mut AdamState, config: &TrainConfig, ema: Option<&mut Polyak>) -> Result<()> {
    let store = stack.store_mut();
    if let Some(c) = config.grad_clip {
        clip_grad_norm(store, c);
    }
    adam_step(store, state, config)?;
    if let Some(ema) = ema {
        ema.update(store);
    }
    Ok(())
}

/// Mean negative log-likelihood of `rows` under the stack's density.
pub fn mean_nll(stack: &FlowStack, rows: &[Vec<f64>]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::domain("no rows"));
    }
    let lp = stack.log_density_batch(rows)?;
    Ok(-lp.iter().sum::<f64>() / rows.len() as f64)
}
