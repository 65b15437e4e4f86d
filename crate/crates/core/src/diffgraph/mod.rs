//! Reverse-accumulation differentiation over a dynamically recorded graph.
//!
//! A [`Graph`] is built per minibatch: every operation appends a node holding
//! its forward result and the handles of its operands, so node order is a
//! topological order and the recording is acyclic by construction. Calling
//! [`Graph::backward`] walks the nodes in reverse and returns the gradient of a
//! scalar root with respect to every node; parameter gradients are then added
//! into the owning [`ParamStore`]. The graph is dropped after the pass.
//!
//! Element-wise binary operations broadcast numpy-style. `logsumexp` and the
//! batched logarithmic matrix product are first-class operations so that their
//! gradients are evaluated as softmax weights rather than through `exp`/`log`.
//! Any operation whose result would contain NaN, and `log`/`div` at a pole, is
//! rejected with [`Error::Numeric`].

mod check;
mod params;
mod tensor;

pub use check::check_gradients;
pub use params::{ParamId, ParamStore, Parameter, SerializedTensor};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::stablemath::{self, logsumexp_unchecked};
use tensor::{axis_split, broadcast_shapes, for_each_broadcast};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Value(usize);

/// Provenance of a recorded node.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Constant,
    Param(ParamId),
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Div(Value, Value),
    Neg(Value),
    Exp(Value),
    Log(Value),
    Sigmoid(Value),
    Tanh(Value),
    Sin(Value),
    Relu(Value),
    Softplus(Value),
    MatMul(Value, Value),
    Sum(Value),
    Mean(Value),
    SumAxis(Value, usize),
    LogSumExp(Value, usize),
    Broadcast(Value),
    Reshape(Value),
    Slice { src: Value, axis: usize, start: usize },
    Concat(Vec<Value>, usize),
    LogMatMul(Value, Value),
}

#[derive(Debug, Clone)]
struct Node {
    data: Tensor,
    op: Op,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero-filled if `v` is unreachable.
    pub fn wrt(&self, graph: &Graph, v: Value) -> Tensor {
        let shape = graph.shape(v).to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches node shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradient with respect to parameter `id`, summed over every leaf that
    /// snapshots it; `None` if the parameter is unreachable.
    pub fn param(&self, id: ParamId) -> Option<Vec<f64>> {
        let mut out: Option<Vec<f64>> = None;
        for &(pid, node) in &self.params {
            if pid != id {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                let acc = out.get_or_insert_with(|| vec![0.0; g.len()]);
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        out
    }

    /// Adds every reachable parameter gradient into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.accumulate(id, g)?;
            }
        }
        Ok(())
    }
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().any(|v| v.is_nan()) {
        return Err(Error::numeric(op, "result contains NaN"));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0].data.shape()
    }

    pub fn op(&self, v: Value) -> &Op {
        &self.nodes[v.0].op
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Value) -> Result<f64> {
        self.data(v).item()
    }

    fn push(&mut self, data: Tensor, op: Op) -> Value {
        self.nodes.push(Node { data, op });
        Value(self.nodes.len() - 1)
    }

    fn raw(&self, v: Value) -> &[f64] {
        self.nodes[v.0].data.data()
    }

    /// Generic record entry point for element-wise and structural op-kinds.
    pub fn record(&mut self, op: Op) -> Result<Value> {
        match op {
            Op::Add(a, b) => self.add(a, b),
            Op::Sub(a, b) => self.sub(a, b),
            Op::Mul(a, b) => self.mul(a, b),
            Op::Div(a, b) => self.div(a, b),
            Op::Neg(a) => self.neg(a),
            Op::Exp(a) => self.exp(a),
            Op::Log(a) => self.log(a),
            Op::Sigmoid(a) => self.sigmoid(a),
            Op::Tanh(a) => self.tanh(a),
            Op::Sin(a) => self.sin(a),
            Op::Relu(a) => self.relu(a),
            Op::Softplus(a) => self.softplus(a),
            Op::MatMul(a, b) => self.matmul(a, b),
            Op::Sum(a) => self.sum(a),
            Op::Mean(a) => self.mean(a),
            Op::SumAxis(a, axis) => self.sum_axis(a, axis),
            Op::LogSumExp(a, axis) => self.logsumexp(a, axis),
            Op::LogMatMul(a, b) => self.log_matmul(a, b),
            Op::Concat(vs, axis) => self.concat(&vs, axis),
            Op::Slice { .. } | Op::Broadcast(_) | Op::Reshape(_) | Op::Constant | Op::Param(_) => Err(
                Error::domain("slice, broadcast, reshape and leaves need extra arguments; use the dedicated methods"),
            ),
        }
    }

    // ----- leaves -----

    pub fn constant(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Constant)
    }

    pub fn scalar(&mut self, v: f64) -> Value {
        self.constant(Tensor::scalar(v))
    }

    /// Records a trainable leaf holding a snapshot of the parameter value.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Value {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    // ----- element-wise -----

    fn binary(
        &mut self,
        name: &'static str,
        a: Value,
        b: Value,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Value> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shapes(name, &sa, &sb)?;
        let (da, db) = (self.raw(a), self.raw(b));
        let mut out = vec![0.0; out_shape.iter().product()];
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
        check_finite(name, &out)?;
        Ok(self.push(Tensor::new(out_shape, out)?, op))
    }

    fn unary(&mut self, name: &'static str, a: Value, op: Op, f: impl Fn(f64) -> f64) -> Result<Value> {
        let out: Vec<f64> = self.raw(a).iter().map(|&x| f(x)).collect();
        check_finite(name, &out)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, op))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.raw(b).iter().any(|&y| y == 0.0) {
            return Err(Error::numeric("div", "division by zero"));
        }
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn neg(&mut self, a: Value) -> Result<Value> {
        self.unary("neg", a, Op::Neg(a), |x| -x)
    }

    pub fn exp(&mut self, a: Value) -> Result<Value> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Value) -> Result<Value> {
        if let Some(bad) = self.raw(a).iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::numeric("log", format!("argument {bad} is not positive")));
        }
        self.unary("log", a, Op::Log(a), f64::ln)
    }

    pub fn sigmoid(&mut self, a: Value) -> Result<Value> {
        self.unary("sigmoid", a, Op::Sigmoid(a), stablemath::sigmoid)
    }

    pub fn tanh(&mut self, a: Value) -> Result<Value> {
        self.unary("tanh", a, Op::Tanh(a), f64::tanh)
    }

    pub fn sin(&mut self, a: Value) -> Result<Value> {
        self.unary("sin", a, Op::Sin(a), f64::sin)
    }

    pub fn relu(&mut self, a: Value) -> Result<Value> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    /// `softplus` including the `DELTA` floor.
    pub fn softplus(&mut self, a: Value) -> Result<Value> {
        self.unary("softplus", a, Op::Softplus(a), stablemath::softplus)
    }

    /// `-softplus(-a)`.
    pub fn logsigmoid(&mut self, a: Value) -> Result<Value> {
        let n = self.neg(a)?;
        let s = self.softplus(n)?;
        self.neg(s)
    }

    pub fn square(&mut self, a: Value) -> Result<Value> {
        self.mul(a, a)
    }

    pub fn add_scalar(&mut self, a: Value, c: f64) -> Result<Value> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    pub fn mul_scalar(&mut self, a: Value, c: f64) -> Result<Value> {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: Value) -> Result<Value> {
        let s: f64 = self.raw(a).iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Value) -> Result<Value> {
        let n = self.raw(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "mean of an empty tensor"));
        }
        let s: f64 = self.raw(a).iter().sum::<f64>() / n as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a)))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Value, axis: usize) -> Result<Value> {
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = axis_split("sum_axis", &shape, axis)?;
        let d = self.raw(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis(a, axis)))
    }

    /// `log sum exp` over `axis`, removing it; all-`-inf` slices give `-inf`.
    pub fn logsumexp(&mut self, a: Value, axis: usize) -> Result<Value> {
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = axis_split("logsumexp", &shape, axis)?;
        if n == 0 {
            return Err(Error::shape("logsumexp", "reduction over an empty axis"));
        }
        let d = self.raw(a);
        let mut out = vec![0.0; outer * inner];
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = d[(o * n + j) * inner + i];
                }
                out[o * inner + i] = logsumexp_unchecked(&buf);
            }
        }
        check_finite("logsumexp", &out)?;
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::LogSumExp(a, axis)))
    }

    /// `a - logsumexp(a)` along `axis` (the axis is kept).
    pub fn logsoftmax(&mut self, a: Value, axis: usize) -> Result<Value> {
        let lse = self.logsumexp(a, axis)?;
        let mut kept = self.shape(a).to_vec();
        kept[axis] = 1;
        let lse = self.reshape(lse, &kept)?;
        self.sub(a, lse)
    }

    // ----- linear algebra -----

    /// Matrix product of rank-2 tensors.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} by {sb:?}")));
        }
        let (n, k, p) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.raw(a), self.raw(b));
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let orow = &mut out[i * p..(i + 1) * p];
            for j in 0..k {
                let av = da[i * k + j];
                if av == 0.0 {
                    continue;
                }
                for (o, bv) in orow.iter_mut().zip(&db[j * p..(j + 1) * p]) {
                    *o += av * bv;
                }
            }
        }
        check_finite("matmul", &out)?;
        Ok(self.push(Tensor::new(vec![n, p], out)?, Op::MatMul(a, b)))
    }

    /// Logarithmic matrix product `logsumexp_j(a[.., i, j] + b[.., j, k])` for
    /// rank-2 operands or rank-3 operands with equal leading batch extent.
    pub fn log_matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, n, k, p) = log_matmul_dims(&sa, &sb)?;
        let (da, db) = (self.raw(a), self.raw(b));
        let mut out = vec![0.0; batch * n * p];
        let mut buf = vec![0.0; k];
        for bi in 0..batch {
            let (ao, bo) = (bi * n * k, bi * k * p);
            for i in 0..n {
                for c in 0..p {
                    for (j, t) in buf.iter_mut().enumerate() {
                        *t = da[ao + i * k + j] + db[bo + j * p + c];
                    }
                    out[(bi * n + i) * p + c] = logsumexp_unchecked(&buf);
                }
            }
        }
        check_finite("log_matmul", &out)?;
        let shape = if sa.len() == 3 { vec![batch, n, p] } else { vec![n, p] };
        Ok(self.push(Tensor::new(shape, out)?, Op::LogMatMul(a, b)))
    }

    // ----- structural -----

    pub fn broadcast_to(&mut self, a: Value, shape: &[usize]) -> Result<Value> {
        let sa = self.shape(a).to_vec();
        let out_shape = broadcast_shapes("broadcast", &sa, shape)?;
        if out_shape != shape {
            return Err(Error::shape("broadcast", format!("{sa:?} does not broadcast to {shape:?}")));
        }
        let d = self.raw(a);
        let mut out = vec![0.0; shape.iter().product()];
        for_each_broadcast(shape, &sa, shape, |o, ia, _| out[o] = d[ia]);
        Ok(self.push(Tensor::new(shape.to_vec(), out)?, Op::Broadcast(a)))
    }

    pub fn reshape(&mut self, a: Value, shape: &[usize]) -> Result<Value> {
        let n: usize = shape.iter().product();
        if n != self.raw(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} has {} elements, target {shape:?} has {n}", self.shape(a), self.raw(a).len()),
            ));
        }
        let data = self.raw(a).to_vec();
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::Reshape(a)))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Value, axis: usize, start: usize, len: usize) -> Result<Value> {
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = axis_split("slice", &shape, axis)?;
        if start + len > n {
            return Err(Error::shape("slice", format!("range {start}..{} exceeds extent {n}", start + len)));
        }
        let d = self.raw(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Slice { src: a, axis, start }))
    }

    pub fn concat(&mut self, vs: &[Value], axis: usize) -> Result<Value> {
        let first = vs.first().ok_or_else(|| Error::shape("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = axis_split("concat", &base, axis)?;
        let mut total = 0;
        for v in vs {
            let s = self.shape(*v);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} does not match {base:?} off axis {axis}")));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in vs {
                let n = self.shape(*v)[axis];
                out.extend_from_slice(&self.raw(*v)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Concat(vs.to_vec(), axis)))
    }

    // ----- reverse accumulation -----

    /// Gradient of the scalar `root` with respect to every recorded node.
    pub fn backward(&self, root: Value) -> Result<Gradients> {
        if self.raw(root).len() != 1 {
            return Err(Error::domain(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        let mut params = Vec::new();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => params.push((*id, idx)),
                Op::Add(..) => {
                    self.grad_binary(&mut grads, node, Side::Lhs, &g, |_, _, gv| gv);
                    self.grad_binary(&mut grads, node, Side::Rhs, &g, |_, _, gv| gv);
                }
                Op::Sub(..) => {
                    self.grad_binary(&mut grads, node, Side::Lhs, &g, |_, _, gv| gv);
                    self.grad_binary(&mut grads, node, Side::Rhs, &g, |_, _, gv| -gv);
                }
                Op::Mul(..) => {
                    self.grad_binary(&mut grads, node, Side::Lhs, &g, |_, y, gv| gv * y);
                    self.grad_binary(&mut grads, node, Side::Rhs, &g, |x, _, gv| gv * x);
                }
                Op::Div(..) => {
                    self.grad_binary(&mut grads, node, Side::Lhs, &g, |_, y, gv| gv / y);
                    self.grad_binary(&mut grads, node, Side::Rhs, &g, |x, y, gv| -gv * x / (y * y));
                }
                Op::Neg(a) => self.grad_unary(&mut grads, *a, node, &g, |_, _, gv| -gv),
                Op::Exp(a) => self.grad_unary(&mut grads, *a, node, &g, |_, out, gv| gv * out),
                Op::Log(a) => self.grad_unary(&mut grads, *a, node, &g, |x, _, gv| gv / x),
                Op::Sigmoid(a) => self.grad_unary(&mut grads, *a, node, &g, |_, s, gv| gv * s * (1.0 - s)),
                Op::Tanh(a) => self.grad_unary(&mut grads, *a, node, &g, |_, t, gv| gv * (1.0 - t * t)),
                Op::Sin(a) => self.grad_unary(&mut grads, *a, node, &g, |x, _, gv| gv * x.cos()),
                Op::Relu(a) => {
                    self.grad_unary(&mut grads, *a, node, &g, |x, _, gv| if x > 0.0 { gv } else { 0.0 })
                }
                Op::Softplus(a) => {
                    self.grad_unary(&mut grads, *a, node, &g, |x, _, gv| gv * stablemath::sigmoid(x))
                }
                Op::Sum(a) => {
                    let n = self.raw(*a).len();
                    add_into(&mut grads[a.0], n, |acc| acc.iter_mut().for_each(|v| *v += g[0]));
                }
                Op::Mean(a) => {
                    let n = self.raw(*a).len();
                    let gv = g[0] / n as f64;
                    add_into(&mut grads[a.0], n, |acc| acc.iter_mut().for_each(|v| *v += gv));
                }
                Op::SumAxis(a, axis) => {
                    let (outer, n, inner) = axis_split("sum_axis", self.shape(*a), *axis)?;
                    add_into(&mut grads[a.0], outer * n * inner, |acc| {
                        for o in 0..outer {
                            for j in 0..n {
                                for i in 0..inner {
                                    acc[(o * n + j) * inner + i] += g[o * inner + i];
                                }
                            }
                        }
                    });
                }
                Op::LogSumExp(a, axis) => {
                    let (outer, n, inner) = axis_split("logsumexp", self.shape(*a), *axis)?;
                    let (x, out) = (self.raw(*a), node.data.data());
                    add_into(&mut grads[a.0], outer * n * inner, |acc| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let lse = out[o * inner + i];
                                if lse == f64::NEG_INFINITY {
                                    continue;
                                }
                                let gv = g[o * inner + i];
                                for j in 0..n {
                                    let k = (o * n + j) * inner + i;
                                    acc[k] += gv * (x[k] - lse).exp();
                                }
                            }
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (n, k, p) = (sa[0], sa[1], sb[1]);
                    let (da, db) = (self.raw(*a), self.raw(*b));
                    add_into(&mut grads[a.0], n * k, |acc| {
                        for i in 0..n {
                            for j in 0..k {
                                let mut s = 0.0;
                                for c in 0..p {
                                    s += g[i * p + c] * db[j * p + c];
                                }
                                acc[i * k + j] += s;
                            }
                        }
                    });
                    add_into(&mut grads[b.0], k * p, |acc| {
                        for i in 0..n {
                            for j in 0..k {
                                let av = da[i * k + j];
                                if av == 0.0 {
                                    continue;
                                }
                                for c in 0..p {
                                    acc[j * p + c] += av * g[i * p + c];
                                }
                            }
                        }
                    });
                }
                Op::LogMatMul(a, b) => {
                    let (batch, n, k, p) = log_matmul_dims(self.shape(*a), self.shape(*b))?;
                    let (da, db, out) = (self.raw(*a), self.raw(*b), node.data.data());
                    let mut ga = vec![0.0; batch * n * k];
                    let mut gb = vec![0.0; batch * k * p];
                    for bi in 0..batch {
                        let (ao, bo) = (bi * n * k, bi * k * p);
                        for i in 0..n {
                            for c in 0..p {
                                let oi = (bi * n + i) * p + c;
                                if out[oi] == f64::NEG_INFINITY {
                                    continue;
                                }
                                let gv = g[oi];
                                for j in 0..k {
                                    let w = (da[ao + i * k + j] + db[bo + j * p + c] - out[oi]).exp() * gv;
                                    ga[ao + i * k + j] += w;
                                    gb[bo + j * p + c] += w;
                                }
                            }
                        }
                    }
                    add_into(&mut grads[a.0], ga.len(), |acc| acc.iter_mut().zip(&ga).for_each(|(x, y)| *x += y));
                    add_into(&mut grads[b.0], gb.len(), |acc| acc.iter_mut().zip(&gb).for_each(|(x, y)| *x += y));
                }
                Op::Broadcast(a) => {
                    let sa = self.shape(*a).to_vec();
                    let out_shape = node.data.shape();
                    add_into(&mut grads[a.0], sa.iter().product(), |acc| {
                        for_each_broadcast(out_shape, &sa, out_shape, |o, ia, _| acc[ia] += g[o]);
                    });
                }
                Op::Reshape(a) => {
                    add_into(&mut grads[a.0], g.len(), |acc| acc.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
                Op::Slice { src, axis, start } => {
                    let (outer, n, inner) = axis_split("slice", self.shape(*src), *axis)?;
                    let len = node.data.shape()[*axis];
                    add_into(&mut grads[src.0], outer * n * inner, |acc| {
                        for o in 0..outer {
                            let dst = &mut acc[(o * n + start) * inner..(o * n + start + len) * inner];
                            for (x, y) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                                *x += y;
                            }
                        }
                    });
                }
                Op::Concat(vs, axis) => {
                    let (outer, total, inner) = axis_split("concat", node.data.shape(), *axis)?;
                    let mut offset = 0;
                    for v in vs {
                        let n = self.shape(*v)[*axis];
                        add_into(&mut grads[v.0], outer * n * inner, |acc| {
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                                for (x, y) in acc[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                    *x += y;
                                }
                            }
                        });
                        offset += n;
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, params })
    }

    /// Runs [`Graph::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, root: Value, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(root)?;
        grads.accumulate_into(store)?;
        Ok(grads)
    }

    // Gradient of a broadcast binary op with respect to one operand;
    // `f(x, y, g)` receives both operand values at the broadcast position.
    fn grad_binary(
        &self,
        grads: &mut [Option<Vec<f64>>],
        node: &Node,
        side: Side,
        g: &[f64],
        f: impl Fn(f64, f64, f64) -> f64,
    ) {
        let (a, b) = binary_operands(&node.op);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (da, db) = (self.raw(a), self.raw(b));
        let out_shape = node.data.shape();
        let (target, len) = match side {
            Side::Lhs => (a, da.len()),
            Side::Rhs => (b, db.len()),
        };
        add_into(&mut grads[target.0], len, |acc| {
            for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
                let idx = if side == Side::Lhs { ia } else { ib };
                acc[idx] += f(da[ia], db[ib], g[o]);
            });
        });
    }

    // `f(x, out, g)` for element-wise unary ops.
    fn grad_unary(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Value,
        node: &Node,
        g: &[f64],
        f: impl Fn(f64, f64, f64) -> f64,
    ) {
        let x = self.raw(a);
        let out = node.data.data();
        add_into(&mut grads[a.0], x.len(), |acc| {
            for (i, v) in acc.iter_mut().enumerate() {
                *v += f(x[i], out[i], g[i]);
            }
        });
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    Lhs,
    Rhs,
}

fn binary_operands(op: &Op) -> (Value, Value) {
    match op {
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => (*a, *b),
        _ => unreachable!("not a broadcast binary op"),
    }
}

fn log_matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (sa, sb) {
        ([n, k], [k2, p]) if k == k2 => Ok((1, *n, *k, *p)),
        ([b, n, k], [b2, k2, p]) if b == b2 && k == k2 => Ok((*b, *n, *k, *p)),
        _ => Err(Error::shape("log_matmul", format!("{sa:?} by {sb:?}"))),
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let acc = slot.get_or_insert_with(|| vec![0.0; len]);
    f(acc);
}

#[cfg(test)]
mod tests;
